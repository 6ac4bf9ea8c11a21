// SPDX-License-Identifier: Apache-2.0

#include "mpq/sensitivity.hpp"

#include <algorithm>
#include <cmath>

#include "mpq/parallel.hpp"
#include "mpq/rng.hpp"

namespace mpq {

std::string to_string(Method method) {
  switch (method) {
    case Method::cmpq:
      return "cmpq";
    case Method::pmpq:
      return "pmpq";
    case Method::tdmpq:
      return "tdmpq";
  }
  return "unknown";
}

Method method_from_string(const std::string& name) {
  if (name == "cmpq") return Method::cmpq;
  if (name == "pmpq") return Method::pmpq;
  if (name == "tdmpq") return Method::tdmpq;
  throw DomainError("unknown sensitivity method '" + name + "'");
}

std::string to_string(TdmpqMode mode) { return mode == TdmpqMode::delta ? "delta" : "literal"; }

TdmpqMode tdmpq_mode_from_string(const std::string& name) {
  if (name == "delta") return TdmpqMode::delta;
  if (name == "literal") return TdmpqMode::literal;
  throw DomainError("unknown TDMPQ mode '" + name + "'");
}

// ---- CCA -------------------------------------------------------------------

namespace {

// Centered columns multiplied by the inverse square root of their ridged
// covariance, so that whitened^T whitened / (n-1) = I (up to the ridge).
struct Whitened {
  TensorF64 values;  // n x p
  double eps = 0.0;
  bool degenerate = false;  // zero total variance
};

Whitened whiten(const TensorF64& x) {
  const std::size_t n = x.rows(), p = x.cols();
  std::vector<double> mean(p, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) mean[j] += x.at(i, j);
  for (double& m : mean) m /= static_cast<double>(n);
  TensorF64 xc({n, p});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) xc.at(i, j) = x.at(i, j) - mean[j];

  TensorF64 cov({p, p});
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = xc.row(i);
    for (std::size_t a = 0; a < p; ++a) {
      const double va = r[a];
      if (va == 0.0) continue;
      for (std::size_t b = a; b < p; ++b) cov.at(a, b) += va * r[b];
    }
  }
  const double denom = static_cast<double>(n - 1);
  double trace = 0.0;
  for (std::size_t a = 0; a < p; ++a) {
    for (std::size_t b = a; b < p; ++b) {
      cov.at(a, b) /= denom;
      cov.at(b, a) = cov.at(a, b);
    }
    trace += cov.at(a, a);
  }
  Whitened w;
  if (!(trace > 0.0)) {
    w.degenerate = true;
    w.values = std::move(xc);
    return w;
  }
  w.eps = 1e-6 * trace / static_cast<double>(p);
  for (std::size_t a = 0; a < p; ++a) cov.at(a, a) += w.eps;

  const SymmetricEigen eig = symmetric_eigen(cov);
  TensorF64 inv_sqrt({p, p});
  for (std::size_t k = 0; k < p; ++k) {
    const double s = 1.0 / std::sqrt(std::max(eig.values[k], w.eps));
    for (std::size_t a = 0; a < p; ++a) {
      const double va = eig.vectors.at(a, k) * s;
      for (std::size_t b = 0; b < p; ++b) inv_sqrt.at(a, b) += va * eig.vectors.at(b, k);
    }
  }
  w.values = matmul(xc, inv_sqrt);
  return w;
}

double cross_rho(const Whitened& x, const Whitened& y) {
  if (x.degenerate || y.degenerate) return 0.0;
  const std::size_t n = x.values.rows(), p = x.values.cols(), q = y.values.cols();
  TensorF64 m({p, q});
  for (std::size_t i = 0; i < n; ++i) {
    const auto rx = x.values.row(i);
    const auto ry = y.values.row(i);
    for (std::size_t a = 0; a < p; ++a) {
      const double va = rx[a];
      for (std::size_t b = 0; b < q; ++b) m.at(a, b) += va * ry[b];
    }
  }
  const double denom = static_cast<double>(n - 1);
  for (double& v : m.data()) v /= denom;
  return std::clamp(svd_top(m), 0.0, 1.0);
}

}  // namespace

CCAResult cca_rho1(const TensorF64& x, const TensorF64& y) {
  if (x.rank() != 2 || y.rank() != 2) throw DimensionError("cca_rho1 expects matrices");
  if (x.rows() != y.rows()) throw DimensionError("cca_rho1: X and Y have different row counts");
  if (x.rows() < 2) throw DomainError("cca_rho1 needs at least two observations");
  if (!x.all_finite() || !y.all_finite()) throw DomainError("cca_rho1: non-finite input");
  const Whitened wx = whiten(x), wy = whiten(y);
  return CCAResult{cross_rho(wx, wy), wx.eps, wy.eps, x.cols(), y.cols()};
}

std::vector<std::size_t> stride_columns(std::size_t d, std::size_t cap) {
  if (cap == 0) throw DomainError("CCA dimension cap must be >= 1");
  std::vector<std::size_t> cols;
  if (d <= cap) {
    for (std::size_t i = 0; i < d; ++i) cols.push_back(i);
  } else {
    for (std::size_t i = 0; i < cap; ++i) cols.push_back(i * d / cap);
  }
  return cols;
}

SensitivityProfile cmpq(const TransformerModel& model, const Dataset& calib, const AnalysisSettings& settings) {
  check_compatible(model.config(), calib);
  if (calib.batches.empty()) throw DomainError("CMPQ needs a non-empty calibration set");
  const std::size_t n_layers = model.config().n_layers;
  const auto cols = stride_columns(model.config().d_model, settings.cca_dim_cap);

  SensitivityProfile profile;
  profile.method = Method::cmpq;
  profile.settings = settings;
  profile.cca_dims = cols.size();
  if (n_layers == 1) {
    profile.scores = {0.0};
    profile.warnings.push_back("single-layer model: no layer pairs to correlate, sensitivity set to 0");
    return profile;
  }

  std::size_t rows = 0;
  for (const auto& b : calib.batches) rows += b.batch_size * b.seq_len;
  if (rows < 2) throw DomainError("CMPQ needs at least two calibration tokens");
  std::vector<TensorF64> features(n_layers, TensorF64({rows, cols.size()}));
  std::size_t offset = 0;
  for (const auto& batch : calib.batches) {
    const auto fwd = forward(model, batch, true);
    for (std::size_t l = 0; l < n_layers; ++l) {
      const Tensor& h = fwd.layer_outputs[l];
      for (std::size_t i = 0; i < h.rows(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j) features[l].at(offset + i, j) = h.at(i, cols[j]);
    }
    offset += batch.batch_size * batch.seq_len;
  }

  std::vector<Whitened> whitened(n_layers);
  parallel_for(n_layers, settings.workers, [&](std::size_t l) { whitened[l] = whiten(features[l]); });

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < n_layers; ++a)
    for (std::size_t b = a + 1; b < n_layers; ++b) pairs.emplace_back(a, b);
  std::vector<double> rho(pairs.size());
  parallel_for(pairs.size(), settings.workers,
               [&](std::size_t i) { rho[i] = cross_rho(whitened[pairs[i].first], whitened[pairs[i].second]); });

  std::vector<double> sum(n_layers, 0.0);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    sum[pairs[i].first] += rho[i];
    sum[pairs[i].second] += rho[i];
  }
  profile.scores.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l)
    profile.scores[l] = 1.0 - sum[l] / static_cast<double>(n_layers - 1);
  return profile;
}

// ---- PMPQ ------------------------------------------------------------------

std::size_t PruneMask::zeros() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 0)); }

PruneMask prune_mask(const Tensor& w, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw DomainError("sparsity must lie in [0, 1)");
  if (w.empty()) throw DomainError("prune_mask on an empty tensor");
  std::vector<float> mag(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) mag[i] = std::fabs(w[i]);
  PruneMask m;
  m.sparsity = sparsity;
  m.threshold = quantile(mag, sparsity);
  m.mask.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) m.mask[i] = static_cast<double>(mag[i]) > m.threshold ? 1 : 0;
  return m;
}

void apply_mask(Tensor& w, const PruneMask& mask) {
  if (mask.mask.size() != w.size()) throw DimensionError("mask does not match tensor");
  for (std::size_t i = 0; i < w.size(); ++i)
    if (!mask.mask[i]) w[i] = 0.0f;
}

SensitivityProfile pmpq(const TransformerModel& model, const Dataset& eval, const AnalysisSettings& settings,
                        std::optional<EvalResult> base) {
  check_compatible(model.config(), eval);
  if (settings.sparsity_levels.empty()) throw DomainError("PMPQ needs at least one sparsity level");
  for (double s : settings.sparsity_levels)
    if (!(s >= 0.0 && s < 1.0)) throw DomainError("sparsity levels must lie in [0, 1)");
  if (!base) base = evaluate(model, eval);
  const std::size_t n_layers = model.config().n_layers, n_levels = settings.sparsity_levels.size();
  const bool lm = model.config().task == TaskKind::language_model;
  const double base_metric = base->metric();

  std::vector<double> drop(n_layers * n_levels);
  parallel_for(drop.size(), settings.workers, [&](std::size_t item) {
    const std::size_t l = item / n_levels, s = item % n_levels;
    TransformerModel pruned = model;
    for (LayerParam p : kLayerMatrices) {
      Tensor& w = pruned.layer(l, p);
      apply_mask(w, prune_mask(w, settings.sparsity_levels[s]));
    }
    const double metric = evaluate(pruned, eval).metric();
    drop[item] = lm ? (metric - base_metric) / base_metric : base_metric - metric;
  });

  SensitivityProfile profile;
  profile.method = Method::pmpq;
  profile.settings = settings;
  profile.base_metric = base_metric;
  profile.scores.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    double sum = 0.0;
    for (std::size_t s = 0; s < n_levels; ++s) sum += drop[l * n_levels + s];
    profile.scores[l] = std::max(0.0, sum / static_cast<double>(n_levels));
  }
  return profile;
}

// ---- TDMPQ -----------------------------------------------------------------

TotalVariation total_variation(const TransformerModel& model, const Dataset& data) {
  check_compatible(model.config(), data);
  TotalVariation total;
  for (const auto& batch : data.batches) {
    const auto [sum, terms] = loss_sum(forward(model, batch).logits, batch, model.config().task);
    total.tv += sum;
    total.terms += terms;
  }
  return total;
}

Tensor tdmpq_noise(const Tensor& w, double delta, std::uint64_t seed, std::size_t layer) {
  if (!(delta >= 0.0)) throw DomainError("perturbation delta must be >= 0");
  Tensor noise(w.shape());
  const double sigma = delta * stats(w.data()).std;
  if (sigma == 0.0) return noise;
  Rng rng(derive_seed(seed, layer));
  for (float& v : noise.data()) v = static_cast<float>(sigma * rng.normal());
  return noise;
}

namespace {

// Restores a tensor from its snapshot on scope exit.
class Restore {
 public:
  explicit Restore(Tensor& target) : target_(target), saved_(target) {}
  ~Restore() { target_ = std::move(saved_); }
  Restore(const Restore&) = delete;
  Restore& operator=(const Restore&) = delete;

 private:
  Tensor& target_;
  Tensor saved_;
};

void perturb(Tensor& w, double delta, std::uint64_t seed, std::size_t layer) {
  if (delta == 0.0) return;
  const Tensor noise = tdmpq_noise(w, delta, seed, layer);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += noise[i];
}

}  // namespace

SensitivityProfile tdmpq(TransformerModel& model, const Dataset& eval, const AnalysisSettings& settings) {
  check_compatible(model.config(), eval);
  if (!(settings.delta >= 0.0)) throw DomainError("perturbation delta must be >= 0");
  if (eval.n_samples == 0) throw DomainError("TDMPQ needs a non-empty evaluation set");
  const std::size_t n_layers = model.config().n_layers;
  const auto base = total_variation(model, eval);
  const double tv_base = base.tv, n = static_cast<double>(base.terms);

  std::vector<double> tv(n_layers);
  if (settings.workers <= 1) {
    for (std::size_t l = 0; l < n_layers; ++l) {
      Tensor& w = model.layer(l, LayerParam::attn_q);
      Restore guard(w);
      perturb(w, settings.delta, settings.seed, l);
      tv[l] = total_variation(model, eval).tv;
    }
  } else {
    const TransformerModel& frozen = model;
    parallel_for(n_layers, settings.workers, [&](std::size_t l) {
      TransformerModel copy = frozen;
      perturb(copy.layer(l, LayerParam::attn_q), settings.delta, settings.seed, l);
      tv[l] = total_variation(copy, eval).tv;
    });
  }

  SensitivityProfile profile;
  profile.method = Method::tdmpq;
  profile.settings = settings;
  profile.base_metric = tv_base / n;
  profile.scores.resize(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l)
    profile.scores[l] = settings.mode == TdmpqMode::literal ? tv[l] / n : std::fabs(tv[l] - tv_base) / n;
  return profile;
}

// ---- Segment statistics ----------------------------------------------------

SegmentStats segment_stats(const std::vector<double>& scores) {
  if (scores.empty()) throw DomainError("segment_stats needs at least one layer");
  const std::size_t n = scores.size();
  const std::size_t seg = (3 * n + 9) / 10;  // ceil(0.3 n) in integers
  SegmentStats s;
  s.first_size = std::min(seg, n);
  s.mid_size = std::min(seg, n - s.first_size);
  s.rest_size = n - s.first_size - s.mid_size;
  // Shifted by the first score so a constant profile has an exact mean.
  double shifted = 0.0;
  for (double v : scores) shifted += v - scores[0];
  s.global_mean = scores[0] + shifted / static_cast<double>(n);
  auto deviation = [&](std::size_t begin, std::size_t count) -> std::optional<double> {
    if (count == 0) return std::nullopt;
    double acc = 0.0;
    for (std::size_t i = begin; i < begin + count; ++i) acc += (scores[i] - s.global_mean) * (scores[i] - s.global_mean);
    return std::sqrt(acc / static_cast<double>(count));
  };
  s.first30 = deviation(0, s.first_size);
  s.mid30 = deviation(s.first_size, s.mid_size);
  s.rest = deviation(s.first_size + s.mid_size, s.rest_size);
  return s;
}

}  // namespace mpq
