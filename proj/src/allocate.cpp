// SPDX-License-Identifier: Apache-2.0

#include "mpq/allocate.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "mpq/quant.hpp"
#include "mpq/rng.hpp"

namespace mpq {

namespace {

void check_scores(const std::vector<double>& scores) {
  if (scores.empty()) throw DomainError("cannot plan an empty sensitivity profile");
  for (double s : scores)
    if (!std::isfinite(s)) throw DomainError("sensitivity scores must be finite");
}

int width_index(int bits) {
  for (int k = 0; k < 3; ++k)
    if (kWidths[k] == bits) return k;
  throw DomainError("unsupported bit-width " + std::to_string(bits));
}

}  // namespace

PrecisionPlan tertile_plan(const std::vector<double>& scores) {
  check_scores(scores);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  PrecisionPlan plan{std::vector<int>(n), PlanProvenance::kmeans};
  for (std::size_t r = 0; r < n; ++r) plan.bits[order[r]] = kWidths[(3 * r) / n];
  return plan;
}

PrecisionPlan kmeans_plan(const std::vector<double>& scores, Rng& rng) {
  check_scores(scores);
  const std::set<double> distinct(scores.begin(), scores.end());
  if (distinct.size() < 3) return tertile_plan(scores);
  const KMeansResult km = kmeans(scores, 3, rng);
  std::vector<std::size_t> clusters{0, 1, 2};
  std::sort(clusters.begin(), clusters.end(),
            [&](std::size_t a, std::size_t b) { return km.centroids[a] > km.centroids[b]; });
  int tier_bits[3] = {0, 0, 0};
  for (int t = 0; t < 3; ++t) tier_bits[clusters[static_cast<std::size_t>(t)]] = kWidths[t];
  PrecisionPlan plan{std::vector<int>(scores.size()), PlanProvenance::kmeans};
  for (std::size_t i = 0; i < scores.size(); ++i) plan.bits[i] = tier_bits[km.labels[i]];
  return plan;
}

std::vector<LayerCosts> layer_costs(const TransformerModel& model, const std::vector<double>& scores) {
  check_scores(scores);
  const ModelConfig& config = model.config();
  if (scores.size() != config.n_layers) throw DimensionError("profile length does not match the model");
  std::vector<LayerCosts> costs(config.n_layers);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    costs[l].sensitivity = scores[l];
    for (int k = 0; k < 3; ++k) {
      costs[l].error[k] = layer_quant_error(model, l, kWidths[k]);
      costs[l].bytes[k] = layer_bytes(config, l, kWidths[k]);
    }
  }
  return costs;
}

double surrogate_objective(const std::vector<LayerCosts>& costs, const PrecisionPlan& plan) {
  plan.validate(costs.size());
  double total = 0.0;
  for (std::size_t l = 0; l < costs.size(); ++l)
    total += costs[l].sensitivity * costs[l].error[width_index(plan.bits[l])];
  return total;
}

namespace {

std::size_t plan_memory(const std::vector<LayerCosts>& costs, std::size_t fixed, const std::vector<int>& choice) {
  std::size_t total = fixed;
  for (std::size_t l = 0; l < costs.size(); ++l) total += costs[l].bytes[choice[l]];
  return total;
}

std::vector<int> solve_exhaustive(const std::vector<LayerCosts>& costs, std::size_t fixed, std::size_t budget) {
  const std::size_t n = costs.size();
  std::vector<int> choice(n, 0), best;
  double best_obj = std::numeric_limits<double>::infinity();
  std::size_t best_mem = 0;
  // Odometer over {16, 8, 4}^n with layer 0 most significant, so the first
  // plan met among exact ties is the one with higher precision earliest.
  while (true) {
    const std::size_t mem = plan_memory(costs, fixed, choice);
    if (mem <= budget) {
      double obj = 0.0;
      for (std::size_t l = 0; l < n; ++l) obj += costs[l].sensitivity * costs[l].error[choice[l]];
      if (best.empty() || obj < best_obj || (obj == best_obj && mem < best_mem)) {
        best = choice;
        best_obj = obj;
        best_mem = mem;
      }
    }
    std::size_t pos = n;
    while (pos > 0) {
      --pos;
      if (++choice[pos] < 3) break;
      choice[pos] = 0;
      if (pos == 0) return best;
    }
  }
}

std::vector<int> solve_dp(const std::vector<LayerCosts>& costs, std::size_t fixed, std::size_t budget) {
  const std::size_t n = costs.size();
  std::size_t base = fixed;
  for (const auto& c : costs) base += c.bytes[2];
  std::size_t unit = 0, span = 0;
  for (const auto& c : costs) {
    for (int k = 0; k < 3; ++k) {
      if (c.bytes[k] < c.bytes[2]) throw DomainError("layer storage must not grow as bit-width drops");
      unit = std::gcd(unit, c.bytes[k] - c.bytes[2]);
    }
  }
  std::vector<std::array<std::size_t, 3>> units(n);
  for (std::size_t l = 0; l < n; ++l) {
    for (int k = 0; k < 3; ++k) units[l][k] = unit == 0 ? 0 : (costs[l].bytes[k] - costs[l].bytes[2]) / unit;
    span += units[l][0];
  }
  const std::size_t capacity = unit == 0 ? 0 : std::min((budget - base) / unit, span);

  // best[l][c]: minimal objective of layers l..n-1 using exactly c units.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> best(n + 1, std::vector<double>(capacity + 1, inf));
  best[n][0] = 0.0;
  for (std::size_t l = n; l-- > 0;) {
    for (std::size_t c = 0; c <= capacity; ++c) {
      for (int k = 0; k < 3; ++k) {
        if (units[l][k] > c) continue;
        const double rest = best[l + 1][c - units[l][k]];
        if (rest == inf) continue;
        best[l][c] = std::min(best[l][c], costs[l].sensitivity * costs[l].error[k] + rest);
      }
    }
  }
  std::size_t c = 0;
  for (std::size_t cc = 1; cc <= capacity; ++cc)
    if (best[0][cc] < best[0][c]) c = cc;

  std::vector<int> choice(n);
  for (std::size_t l = 0; l < n; ++l) {
    bool found = false;
    for (int k = 0; k < 3 && !found; ++k) {
      if (units[l][k] > c) continue;
      const double rest = best[l + 1][c - units[l][k]];
      if (rest != inf && costs[l].sensitivity * costs[l].error[k] + rest == best[l][c]) {
        choice[l] = k;
        c -= units[l][k];
        found = true;
      }
    }
    if (!found) throw NumericError("budget DP reconstruction failed", 0.0);
  }
  return choice;
}

}  // namespace

BudgetResult solve_budget(const std::vector<LayerCosts>& costs, std::size_t fixed, std::size_t budget,
                          BudgetSolver solver) {
  if (costs.empty()) throw DomainError("cannot plan zero layers");
  std::size_t minimal = fixed;
  for (const auto& c : costs) minimal += c.bytes[2];
  if (budget < minimal)
    throw InfeasibleBudget("budget of " + std::to_string(budget) + " bytes is below the all-4-bit minimum of " +
                               std::to_string(minimal) + " bytes",
                           minimal);
  if (solver == BudgetSolver::automatic)
    solver = costs.size() <= kExhaustiveMaxLayers ? BudgetSolver::exhaustive : BudgetSolver::dp;
  if (solver == BudgetSolver::exhaustive && costs.size() > 16)
    throw DomainError("exhaustive budget search is limited to 16 layers");
  const auto choice = solver == BudgetSolver::exhaustive ? solve_exhaustive(costs, fixed, budget)
                                                         : solve_dp(costs, fixed, budget);
  BudgetResult r;
  r.plan.provenance = PlanProvenance::budgeted;
  for (int k : choice) r.plan.bits.push_back(kWidths[k]);
  r.objective = surrogate_objective(costs, r.plan);
  r.memory_bytes = plan_memory(costs, fixed, choice);
  return r;
}

BudgetResult budgeted_plan(const TransformerModel& model, const std::vector<double>& scores, std::size_t budget_bytes,
                           const BudgetOptions& options) {
  return solve_budget(layer_costs(model, scores), fixed_bytes(model.config()), budget_bytes, options.solver);
}

ObjectiveValue objective(const TransformerModel& model, const PrecisionPlan& plan, const Dataset& data,
                         double lambda) {
  if (!(lambda >= 0.0)) throw DomainError("lambda must be >= 0");
  plan.validate(model.config().n_layers);
  ObjectiveValue v;
  v.a = evaluate(apply_plan(model, plan).simulated, data).mean_loss;
  for (std::size_t l = 0; l < plan.bits.size(); ++l) v.b += layer_quant_error(model, l, plan.bits[l]);
  v.total = v.a + lambda * v.b;
  return v;
}

}  // namespace mpq
