// SPDX-License-Identifier: Apache-2.0

#include "mpq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mpq/fp16.hpp"

namespace mpq {

std::size_t channel_of(std::span<const std::size_t> shape, std::size_t axis, std::size_t i) {
  std::size_t stride = 1;
  for (std::size_t a = axis + 1; a < shape.size(); ++a) stride *= shape[a];
  return (i / stride) % shape[axis];
}

QuantizedTensor quantize(const Tensor& x, int bits, std::optional<std::size_t> channel_axis, Rounding rounding) {
  if (bits != 4 && bits != 8) throw DomainError("integer quantization supports 4 or 8 bits, got " + std::to_string(bits));
  if (x.empty()) throw DimensionError("cannot quantize an empty tensor");
  if (channel_axis && *channel_axis >= x.rank()) throw DimensionError("channel axis outside tensor rank");
  if (!x.all_finite()) throw DomainError("cannot quantize non-finite values");

  QuantizedTensor q;
  q.shape = x.shape();
  q.params.bits = bits;
  q.params.channel_axis = channel_axis;
  const std::size_t n_channels = channel_axis ? x.dim(*channel_axis) : 1;
  auto channel = [&](std::size_t i) { return channel_axis ? channel_of(x.shape(), *channel_axis, i) : 0; };

  std::vector<float> lo(n_channels, std::numeric_limits<float>::infinity());
  std::vector<float> hi(n_channels, -std::numeric_limits<float>::infinity());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = channel(i);
    lo[c] = std::min(lo[c], x[i]);
    hi[c] = std::max(hi[c], x[i]);
  }

  const int q_min = q.params.q_min(), q_max = q.params.q_max();
  q.params.scales.resize(n_channels);
  q.params.mins = lo;
  for (std::size_t c = 0; c < n_channels; ++c) {
    if (hi[c] == lo[c]) {
      q.params.scales[c] = 1.0f;
      continue;
    }
    float s = static_cast<float>((static_cast<double>(hi[c]) - lo[c]) / (q_max - q_min));
    // A range a few ulps wide can underflow the float scale.
    if (!(s > 0.0f)) s = std::numeric_limits<float>::denorm_min();
    q.params.scales[c] = s;
  }

  q.codes.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = channel(i);
    const double t = (static_cast<double>(x[i]) - q.params.mins[c]) / q.params.scales[c];
    const double r = rounding == Rounding::nearest_even ? std::nearbyint(t) : std::floor(t);
    const double code = std::clamp(r + q_min, static_cast<double>(q_min), static_cast<double>(q_max));
    q.codes[i] = static_cast<std::int8_t>(code);
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  const std::size_t n = shape_numel(q.shape);
  if (q.codes.size() != n) throw DimensionError("code count does not match shape");
  const std::size_t n_channels = q.params.channel_axis ? q.shape.at(*q.params.channel_axis) : 1;
  if (q.params.scales.size() != n_channels || q.params.mins.size() != n_channels)
    throw DimensionError("scale/min count does not match channel count");
  const int q_min = q.params.q_min();
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = q.params.channel_axis ? channel_of(q.shape, *q.params.channel_axis, i) : 0;
    out[i] = static_cast<float>(static_cast<double>(q.codes[i] - q_min) * q.params.scales[c] + q.params.mins[c]);
  }
  return Tensor(q.shape, std::move(out));
}

double quant_error(const Tensor& w, const QuantizedTensor& q) {
  if (w.shape() != q.shape) throw DimensionError("quant_error: shape mismatch");
  const Tensor r = dequantize(q);
  double sum = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = static_cast<double>(w[i]) - r[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

TensorRecord encode(const std::string& name, const QuantizedTensor& q) {
  TensorRecord r;
  r.name = name;
  r.dtype = q.params.bits == 4 ? DType::int4 : DType::int8;
  r.shape = q.shape;
  if (q.params.channel_axis) r.meta.channel_axis = static_cast<std::uint8_t>(*q.params.channel_axis);
  r.meta.scales = q.params.scales;
  r.meta.mins = q.params.mins;
  r.payload = q.params.bits == 4 ? pack_int4(q.codes, q.shape.back()) : pack_int8(q.codes);
  return r;
}

QuantizedTensor decode_quantized(const TensorRecord& record) {
  if (!is_integer(record.dtype)) throw FormatError("record '" + record.name + "' is not integer-quantized");
  QuantizedTensor q;
  q.shape = record.shape;
  q.params.bits = bit_width(record.dtype);
  if (record.meta.channel_axis) q.params.channel_axis = *record.meta.channel_axis;
  q.params.scales = record.meta.scales;
  q.params.mins = record.meta.mins;
  q.codes = record.dtype == DType::int4 ? unpack_int4(record.payload, record.numel(), record.shape.back())
                                        : unpack_int8(record.payload);
  return q;
}

Tensor decode_record(const TensorRecord& record) {
  return is_integer(record.dtype) ? dequantize(decode_quantized(record)) : decode_float_record(record);
}

TransformerModel model_from_container(const WeightContainer& container) {
  container.config.validate();
  TransformerModel model(container.config);
  const auto layout = parameter_layout(container.config);
  if (container.records.size() != layout.size())
    throw FormatError("container holds " + std::to_string(container.records.size()) + " tensors, config expects " +
                      std::to_string(layout.size()));
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const TensorRecord& r = container.records[i];
    if (r.name != layout[i].first) throw FormatError("expected tensor '" + layout[i].first + "', found '" + r.name + "'");
    if (r.shape != layout[i].second) throw FormatError("tensor '" + r.name + "' has the wrong shape");
    model.params()[i].value = decode_record(r);
  }
  return model;
}

TensorRecord encode_param(const std::string& name, const Tensor& value, int bits) {
  switch (bits) {
    case 32:
      return fp32_record(name, value);
    case 16:
      return fp16_record(name, value);
    case 8:
    case 4:
      return encode(name, quantize(value, bits, kWeightChannelAxis));
    default:
      throw DomainError("unsupported bit-width " + std::to_string(bits));
  }
}

namespace {

// Width each parameter is stored at under a plan.
int width_of(const ModelConfig& config, const PrecisionPlan& plan, std::size_t param_index) {
  const std::size_t first = 2, end = 2 + config.n_layers * kParamsPerLayer;
  if (param_index < first || param_index >= end) return 16;
  const auto p = static_cast<LayerParam>((param_index - first) % kParamsPerLayer);
  if (!is_layer_matrix(p)) return 16;
  return plan.bits[(param_index - first) / kParamsPerLayer];
}

DType dtype_of(int bits) {
  switch (bits) {
    case 32:
      return DType::fp32;
    case 16:
      return DType::fp16;
    case 8:
      return DType::int8;
    default:
      return DType::int4;
  }
}

std::optional<std::uint8_t> axis_of(int bits) {
  if (bits == 4 || bits == 8) return static_cast<std::uint8_t>(kWeightChannelAxis);
  return std::nullopt;
}

}  // namespace

QuantizedModel apply_plan(const TransformerModel& model, const PrecisionPlan& plan) {
  const ModelConfig& config = model.config();
  plan.validate(config.n_layers);
  QuantizedModel out{WeightContainer{}, TransformerModel(config)};
  out.container.config = config;
  const auto& params = model.params();
  out.container.records.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    out.container.records.push_back(encode_param(params[i].name, params[i].value, width_of(config, plan, i)));
  out.simulated = model_from_container(out.container);
  return out;
}

std::size_t layer_bytes(const ModelConfig& config, std::size_t layer, int bits) {
  if (!is_supported_width(bits) && bits != 32) throw DomainError("unsupported bit-width " + std::to_string(bits));
  if (layer >= config.n_layers) throw DomainError("layer index out of range");
  const auto layout = parameter_layout(config);
  std::size_t total = 0;
  for (LayerParam p : kLayerMatrices) {
    const auto& shape = layout[TransformerModel::layer_index(layer, p)].second;
    total += record_storage_bytes(dtype_of(bits), shape, axis_of(bits));
  }
  return total;
}

std::size_t fixed_bytes(const ModelConfig& config) {
  const auto layout = parameter_layout(config);
  PrecisionPlan any = PrecisionPlan::uniform(config.n_layers, 16);
  std::size_t total = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const std::size_t first = 2, end = 2 + config.n_layers * kParamsPerLayer;
    const bool planned = i >= first && i < end &&
                         is_layer_matrix(static_cast<LayerParam>((i - first) % kParamsPerLayer));
    if (!planned) total += record_storage_bytes(dtype_of(width_of(config, any, i)), layout[i].second, std::nullopt);
  }
  return total;
}

std::size_t planned_bytes(const ModelConfig& config, const PrecisionPlan& plan) {
  plan.validate(config.n_layers);
  std::size_t total = fixed_bytes(config);
  for (std::size_t l = 0; l < config.n_layers; ++l) total += layer_bytes(config, l, plan.bits[l]);
  return total;
}

double layer_quant_error(const TransformerModel& model, std::size_t layer, int bits) {
  if (layer >= model.config().n_layers) throw DomainError("layer index out of range");
  double sum = 0.0;
  for (LayerParam p : kLayerMatrices) {
    const Tensor& w = model.layer(layer, p);
    if (bits == 32) continue;
    if (bits == 16) {
      for (float v : w.data()) {
        const double d = static_cast<double>(v) - round_to_half(v);
        sum += d * d;
      }
    } else {
      const double e = quant_error(w, quantize(w, bits, kWeightChannelAxis));
      sum += e * e;
    }
  }
  return std::sqrt(sum);
}

}  // namespace mpq
