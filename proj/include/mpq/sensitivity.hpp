// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mpq/dataset.hpp"
#include "mpq/model.hpp"

namespace mpq {

enum class Method { cmpq, pmpq, tdmpq };
std::string to_string(Method method);
Method method_from_string(const std::string& name);

enum class TdmpqMode { delta, literal };
std::string to_string(TdmpqMode mode);
TdmpqMode tdmpq_mode_from_string(const std::string& name);

// Settings an analyzer ran with; only the fields its method reads are meaningful.
struct AnalysisSettings {
  std::size_t cca_dim_cap = 64;
  std::vector<double> sparsity_levels{0.3, 0.5, 0.7};
  double delta = 0.01;
  TdmpqMode mode = TdmpqMode::delta;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool operator==(const AnalysisSettings&) const = default;
};

struct SensitivityProfile {
  Method method = Method::cmpq;
  std::vector<double> scores;  // one per layer, higher = more sensitive
  AnalysisSettings settings;
  // Feature columns kept per layer after subsampling (CMPQ only).
  std::size_t cca_dims = 0;
  // Base metric the analysis compared against (PMPQ: accuracy or perplexity,
  // TDMPQ: mean loss over the evaluation set).
  std::optional<double> base_metric;
  std::vector<std::string> warnings;
  bool operator==(const SensitivityProfile&) const = default;
};

// ---- CMPQ ------------------------------------------------------------------

struct CCAResult {
  double rho1 = 0.0;
  double eps_x = 0.0;  // ridge added to C_XX
  double eps_y = 0.0;
  std::size_t p = 0;
  std::size_t q = 0;
};

// First canonical correlation of the columns of X (n x p) and Y (n x q):
//   C_XX = Xc^T Xc / (n-1) + eps_x I, eps_x = 1e-6 trace(Xc^T Xc / (n-1)) / p
//   rho1 = top singular value of C_XX^-1/2 C_XY C_YY^-1/2, clipped to [0, 1].
// A side with zero variance correlates with nothing: rho1 = 0.
CCAResult cca_rho1(const TensorF64& x, const TensorF64& y);

// Column indices kept when subsampling d columns down to at most cap:
// floor(i * d / cap) for i < cap.
std::vector<std::size_t> stride_columns(std::size_t d, std::size_t cap);

// S_l = 1 - mean over m != l of rho1(outputs_l, outputs_m), where outputs_l
// stacks layer l's hidden states over every calibration token.
SensitivityProfile cmpq(const TransformerModel& model, const Dataset& calib, const AnalysisSettings& settings = {});

// ---- PMPQ ------------------------------------------------------------------

struct PruneMask {
  std::vector<std::uint8_t> mask;  // 1 keeps the weight
  double sparsity = 0.0;
  double threshold = 0.0;
  std::size_t zeros() const;
};

// threshold = quantile(|w|, sparsity); keep iff |w_i| > threshold.
PruneMask prune_mask(const Tensor& w, double sparsity);
void apply_mask(Tensor& w, const PruneMask& mask);

// For each layer and level, every weight matrix of the layer is pruned with its
// own threshold and the model re-evaluated. Classification:
// S_l = mean_s(acc_base - acc_{l,s}); language model:
// S_l = mean_s((ppl_{l,s} - ppl_base) / ppl_base). Negative values clamp to 0.
// `base` skips the baseline evaluation when the caller already has it.
SensitivityProfile pmpq(const TransformerModel& model, const Dataset& eval, const AnalysisSettings& settings = {},
                        std::optional<EvalResult> base = std::nullopt);

// ---- TDMPQ -----------------------------------------------------------------

// Summed cross-entropy over every batch, and the number of loss terms
// (examples, or token positions for a language model) it covers.
struct TotalVariation {
  double tv = 0.0;
  std::size_t terms = 0;
};
TotalVariation total_variation(const TransformerModel& model, const Dataset& data);

// For each layer, attn.q is perturbed by N(0, sigma^2) noise with
// sigma = delta * std(attn.q), seeded by derive_seed(seed, layer), and the
// total variation TV re-measured. With N loss terms, literal: S_l = TV / N
// (the perturbed mean loss); delta: S_l = |TV - TV_base| / N. The tensor is
// restored bit-exactly before the next layer, also when evaluation throws.
SensitivityProfile tdmpq(TransformerModel& model, const Dataset& eval, const AnalysisSettings& settings = {});

// The noise tdmpq adds to layer l's attn.q (empty tensor of zeros when sigma = 0).
Tensor tdmpq_noise(const Tensor& w, double delta, std::uint64_t seed, std::size_t layer);

// ---- Segment statistics ----------------------------------------------------

struct SegmentStats {
  // sqrt(mean over the segment of (S_l - global mean)^2); nullopt when the segment is empty.
  std::optional<double> first30;
  std::optional<double> mid30;
  std::optional<double> rest;
  std::size_t first_size = 0;
  std::size_t mid_size = 0;
  std::size_t rest_size = 0;
  double global_mean = 0.0;
};

// Segments: the first ceil(0.3 L) layers, the next ceil(0.3 L), then the remainder.
SegmentStats segment_stats(const std::vector<double>& scores);

}  // namespace mpq
