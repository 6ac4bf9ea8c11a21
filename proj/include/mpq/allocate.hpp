// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "mpq/dataset.hpp"
#include "mpq/model.hpp"
#include "mpq/plan.hpp"

namespace mpq {

class Rng;

// Three-tier k-means plan: clusters ordered by centroid, highest to 16 bits,
// middle to 8, lowest to 4. With fewer than three distinct scores the layers
// are split by rank into tertiles instead (tier = floor(3 r / L) for rank r,
// ties ranked by lower layer index first).
PrecisionPlan kmeans_plan(const std::vector<double>& scores, Rng& rng);
PrecisionPlan tertile_plan(const std::vector<double>& scores);

enum class BudgetSolver { automatic, exhaustive, dp };

inline constexpr std::size_t kExhaustiveMaxLayers = 12;

struct BudgetOptions {
  BudgetSolver solver = BudgetSolver::automatic;  // exhaustive up to 12 layers, else dp
};

// Per-layer inputs of the budgeted allocator: sensitivity, error and bytes
// for widths 16, 8, 4 (in that order).
struct LayerCosts {
  double sensitivity = 0.0;
  double error[3] = {0.0, 0.0, 0.0};
  std::size_t bytes[3] = {0, 0, 0};
};

inline constexpr int kWidths[3] = {16, 8, 4};

std::vector<LayerCosts> layer_costs(const TransformerModel& model, const std::vector<double>& scores);

struct BudgetResult {
  PrecisionPlan plan;
  double objective = 0.0;        // sum_l S_l e_l(b_l), summed in layer order
  std::size_t memory_bytes = 0;  // full container storage under the plan
};

// Minimizes sum_l S_l e_l(b_l) subject to planned_bytes(plan) <= budget_bytes.
// Ties: smaller memory first, then higher precision at lower layer indices.
// Throws InfeasibleBudget when even the all-4-bit plan does not fit.
BudgetResult budgeted_plan(const TransformerModel& model, const std::vector<double>& scores,
                           std::size_t budget_bytes, const BudgetOptions& options = {});

// Same, over precomputed costs. fixed_bytes is storage the plan does not control.
BudgetResult solve_budget(const std::vector<LayerCosts>& costs, std::size_t fixed_bytes, std::size_t budget_bytes,
                          BudgetSolver solver);

// Surrogate objective of a plan over precomputed costs, summed in layer order.
double surrogate_objective(const std::vector<LayerCosts>& costs, const PrecisionPlan& plan);

struct ObjectiveValue {
  double a = 0.0;  // mean loss of the simulated quantized model
  double b = 0.0;  // sum over layers of the layer's quantization error norm
  double total = 0.0;
};

// total = A + lambda B.
ObjectiveValue objective(const TransformerModel& model, const PrecisionPlan& plan, const Dataset& data,
                         double lambda);

}  // namespace mpq
