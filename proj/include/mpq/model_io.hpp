// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpq/model.hpp"

namespace mpq {

// MPQW weight container, little-endian throughout:
//
//   "MPQW" | u32 version
//   config: u32 n_layers, d_model, n_heads, d_ff, vocab_size, max_seq_len | u8 task | u32 n_classes
//   u32 record_count
//   record*:
//     u16 name_len | name (UTF-8) | u8 dtype | u32 rank | u32 dims[rank]
//     int8/int4 only: u8 channel_axis (255 = per-tensor) | f32 scales[n] | f32 mins[n]
//       where n = dims[channel_axis], or 1 per-tensor
//     payload
//   u32 CRC32 (IEEE) over every preceding byte
//
// Payloads: fp32/fp16 raw little-endian; int8 one two's-complement byte per
// code; int4 two codes per byte, low nibble first, each row (last dim) packed
// separately with a zero pad nibble when the row length is odd.
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::uint8_t kPerTensorAxis = 255;

enum class DType : std::uint8_t { fp32 = 0, fp16 = 1, int8 = 2, int4 = 3 };

std::string to_string(DType dtype);
bool is_integer(DType dtype);
int bit_width(DType dtype);

struct QuantMeta {
  std::optional<std::uint8_t> channel_axis;  // nullopt: per-tensor
  std::vector<float> scales;
  std::vector<float> mins;
  bool operator==(const QuantMeta&) const = default;
};

struct TensorRecord {
  std::string name;
  DType dtype = DType::fp32;
  std::vector<std::size_t> shape;
  QuantMeta meta;  // integer dtypes only
  std::vector<std::uint8_t> payload;

  std::size_t numel() const;
  std::size_t metadata_bytes() const;  // scales + mins
  std::size_t storage_bytes() const { return payload.size() + metadata_bytes(); }
  bool operator==(const TensorRecord&) const = default;
};

struct WeightContainer {
  std::uint32_t version = kContainerVersion;
  ModelConfig config;
  std::vector<TensorRecord> records;

  const TensorRecord& find(const std::string& name) const;
  bool operator==(const WeightContainer&) const = default;
};

std::size_t payload_bytes(DType dtype, std::span<const std::size_t> shape);
// Number of scale/min pairs for a record: dims[axis], or 1 per-tensor.
std::size_t channel_count(std::span<const std::size_t> shape, std::optional<std::uint8_t> axis);
// Storage (payload + metadata) a record of this shape/dtype occupies.
std::size_t record_storage_bytes(DType dtype, std::span<const std::size_t> shape,
                                 std::optional<std::uint8_t> axis);

// Packing helpers for integer payloads.
std::vector<std::uint8_t> pack_int8(std::span<const std::int8_t> codes);
std::vector<std::int8_t> unpack_int8(std::span<const std::uint8_t> payload);
std::vector<std::uint8_t> pack_int4(std::span<const std::int8_t> codes, std::size_t row_len);
std::vector<std::int8_t> unpack_int4(std::span<const std::uint8_t> payload, std::size_t numel, std::size_t row_len);

TensorRecord fp32_record(const std::string& name, const Tensor& value);
TensorRecord fp16_record(const std::string& name, const Tensor& value);
// Decodes fp32/fp16 payloads; integer records need the quant module.
Tensor decode_float_record(const TensorRecord& record);

// Every parameter as fp32.
WeightContainer fp32_container(const TransformerModel& model);

std::vector<std::uint8_t> serialize(const WeightContainer& container);
WeightContainer deserialize(std::span<const std::uint8_t> bytes);

// Returns bytes written. Throws IoError / FormatError.
std::size_t save(const WeightContainer& container, const std::filesystem::path& path);
WeightContainer load(const std::filesystem::path& path);

std::uint32_t crc32_ieee(std::span<const std::uint8_t> bytes);

struct MemoryReport {
  std::size_t m_o_bytes = 0;  // original storage
  std::size_t m_q_bytes = 0;  // quantized payloads + scale/min metadata
  double fpr_percent = 0.0;   // 100 * (1 - M_Q / M_O)
  double cr = 0.0;            // M_O / M_Q
};

// Records are matched by name; shapes must agree.
MemoryReport memory_report(const WeightContainer& original, const WeightContainer& quantized);

}  // namespace mpq
