// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "mpq/model.hpp"
#include "mpq/model_io.hpp"
#include "mpq/plan.hpp"

namespace mpq {

// nearest_even is the default. floor matches the bracket notation some
// write-ups use for the same operator and exists for comparison runs.
enum class Rounding { nearest_even, floor };

struct QuantParams {
  int bits = 8;
  std::optional<std::size_t> channel_axis;  // nullopt: one scale for the whole tensor
  std::vector<float> scales;
  std::vector<float> mins;

  int q_min() const noexcept { return -(1 << (bits - 1)); }
  int q_max() const noexcept { return (1 << (bits - 1)) - 1; }
  bool operator==(const QuantParams&) const = default;
};

struct QuantizedTensor {
  std::vector<std::size_t> shape;
  std::vector<std::int8_t> codes;  // row-major, one per element
  QuantParams params;
  bool operator==(const QuantizedTensor&) const = default;
};

// Affine min-max quantization. Per channel c:
//   scale_c = (max_c - min_c) / (q_max - q_min)
//   code    = clamp(round((x - min_c) / scale_c) + q_min, q_min, q_max)
// A channel with max_c == min_c gets scale 1 and every code q_min.
// bits must be 4 or 8; 16-bit tiers are stored as fp16 instead.
QuantizedTensor quantize(const Tensor& x, int bits, std::optional<std::size_t> channel_axis,
                         Rounding rounding = Rounding::nearest_even);

// x = (code - q_min) * scale_c + min_c
Tensor dequantize(const QuantizedTensor& q);

// Frobenius norm of w - dequantize(q).
double quant_error(const Tensor& w, const QuantizedTensor& q);

// Channel index of flat element i along `axis` of `shape`.
std::size_t channel_of(std::span<const std::size_t> shape, std::size_t axis, std::size_t i);

TensorRecord encode(const std::string& name, const QuantizedTensor& q);
QuantizedTensor decode_quantized(const TensorRecord& record);
// Any dtype back to fp32 values.
Tensor decode_record(const TensorRecord& record);

// Builds a model from a container, decoding every record. Names and shapes
// must match the canonical layout of the container's config.
TransformerModel model_from_container(const WeightContainer& container);

// Layer matrices are quantized per output channel (axis 0) at the plan's
// width, or stored fp16 at 16 bits. Embeddings, layer-norm vectors, the final
// norm and the head are always fp16.
inline constexpr std::size_t kWeightChannelAxis = 0;

struct QuantizedModel {
  WeightContainer container;
  TransformerModel simulated{ModelConfig{}};  // fp32 weights replaced by their stored values
};

QuantizedModel apply_plan(const TransformerModel& model, const PrecisionPlan& plan);

// Container record for one parameter at the given width (4, 8, 16 or 32).
TensorRecord encode_param(const std::string& name, const Tensor& value, int bits);

// Storage bytes of layer l's six weight matrices at a width.
std::size_t layer_bytes(const ModelConfig& config, std::size_t layer, int bits);
// Storage bytes of every tensor a plan does not control (all fp16).
std::size_t fixed_bytes(const ModelConfig& config);
// Exact container storage (payload + metadata) a plan produces.
std::size_t planned_bytes(const ModelConfig& config, const PrecisionPlan& plan);

// Frobenius norm of the quantization error over the six matrices of layer l
// taken together: sqrt(sum of squared element errors).
double layer_quant_error(const TransformerModel& model, std::size_t layer, int bits);

}  // namespace mpq
