// SPDX-License-Identifier: Apache-2.0

#include "mpq/model_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "mpq/fp16.hpp"

namespace mpq {

std::string to_string(DType dtype) {
  switch (dtype) {
    case DType::fp32:
      return "fp32";
    case DType::fp16:
      return "fp16";
    case DType::int8:
      return "int8";
    case DType::int4:
      return "int4";
  }
  return "unknown";
}

bool is_integer(DType dtype) { return dtype == DType::int8 || dtype == DType::int4; }

int bit_width(DType dtype) {
  switch (dtype) {
    case DType::fp32:
      return 32;
    case DType::fp16:
      return 16;
    case DType::int8:
      return 8;
    case DType::int4:
      return 4;
  }
  return 0;
}

std::size_t TensorRecord::numel() const { return shape_numel(shape); }

std::size_t TensorRecord::metadata_bytes() const {
  return (meta.scales.size() + meta.mins.size()) * sizeof(float);
}

const TensorRecord& WeightContainer::find(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return r;
  throw FormatError("container has no record '" + name + "'");
}

std::size_t payload_bytes(DType dtype, std::span<const std::size_t> shape) {
  const std::size_t n = shape_numel(shape);
  switch (dtype) {
    case DType::fp32:
      return 4 * n;
    case DType::fp16:
      return 2 * n;
    case DType::int8:
      return n;
    case DType::int4: {
      const std::size_t row = shape.back();
      return (n / row) * ((row + 1) / 2);
    }
  }
  throw FormatError("unknown dtype");
}

std::size_t channel_count(std::span<const std::size_t> shape, std::optional<std::uint8_t> axis) {
  if (!axis) return 1;
  if (*axis >= shape.size()) throw DimensionError("channel axis outside tensor rank");
  return shape[*axis];
}

std::size_t record_storage_bytes(DType dtype, std::span<const std::size_t> shape,
                                 std::optional<std::uint8_t> axis) {
  std::size_t bytes = payload_bytes(dtype, shape);
  if (is_integer(dtype)) bytes += 2 * sizeof(float) * channel_count(shape, axis);
  return bytes;
}

std::vector<std::uint8_t> pack_int8(std::span<const std::int8_t> codes) {
  std::vector<std::uint8_t> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = static_cast<std::uint8_t>(codes[i]);
  return out;
}

std::vector<std::int8_t> unpack_int8(std::span<const std::uint8_t> payload) {
  std::vector<std::int8_t> out(payload.size());
  for (std::size_t i = 0; i < payload.size(); ++i) out[i] = static_cast<std::int8_t>(payload[i]);
  return out;
}

std::vector<std::uint8_t> pack_int4(std::span<const std::int8_t> codes, std::size_t row_len) {
  if (row_len == 0 || codes.size() % row_len != 0) throw DimensionError("int4 row length does not divide codes");
  const std::size_t rows = codes.size() / row_len, row_bytes = (row_len + 1) / 2;
  std::vector<std::uint8_t> out(rows * row_bytes, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < row_len; ++c) {
      const std::int8_t code = codes[r * row_len + c];
      if (code < -8 || code > 7) throw DomainError("int4 code out of range");
      const auto nibble = static_cast<std::uint8_t>(code & 0x0f);
      out[r * row_bytes + c / 2] |= (c % 2 == 0) ? nibble : static_cast<std::uint8_t>(nibble << 4);
    }
  }
  return out;
}

std::vector<std::int8_t> unpack_int4(std::span<const std::uint8_t> payload, std::size_t numel, std::size_t row_len) {
  if (row_len == 0 || numel % row_len != 0) throw DimensionError("int4 row length does not divide element count");
  const std::size_t rows = numel / row_len, row_bytes = (row_len + 1) / 2;
  if (payload.size() != rows * row_bytes) throw FormatError("int4 payload size mismatch");
  std::vector<std::int8_t> out(numel);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < row_len; ++c) {
      const std::uint8_t byte = payload[r * row_bytes + c / 2];
      const std::uint8_t nibble = (c % 2 == 0) ? (byte & 0x0f) : (byte >> 4);
      out[r * row_len + c] = static_cast<std::int8_t>(nibble >= 8 ? static_cast<int>(nibble) - 16 : nibble);
    }
  }
  return out;
}

namespace {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}
void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffULL) throw FormatError(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > limit_ - pos_) throw TruncatedError("container truncated at byte " + std::to_string(pos_));
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    auto s = take(2);
    return static_cast<std::uint16_t>(s[0] | (s[1] << 8));
  }
  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | s[static_cast<std::size_t>(i)];
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

void validate_record(const TensorRecord& r) {
  if (r.name.size() > 0xffff) throw FormatError("record name longer than 65535 bytes: " + r.name.substr(0, 32));
  check_shape(r.shape);
  if (r.payload.size() != payload_bytes(r.dtype, r.shape))
    throw FormatError("record '" + r.name + "' payload size does not match shape and dtype");
  if (is_integer(r.dtype)) {
    const std::size_t n = channel_count(r.shape, r.meta.channel_axis);
    if (r.meta.scales.size() != n || r.meta.mins.size() != n)
      throw FormatError("record '" + r.name + "' scale/min count does not match channel count");
  } else if (!r.meta.scales.empty() || !r.meta.mins.empty() || r.meta.channel_axis) {
    throw FormatError("float record '" + r.name + "' carries quantization metadata");
  }
}

}  // namespace

TensorRecord fp32_record(const std::string& name, const Tensor& value) {
  TensorRecord r{name, DType::fp32, value.shape(), {}, {}};
  r.payload.reserve(4 * value.size());
  for (float v : value.data()) put_f32(r.payload, v);
  return r;
}

TensorRecord fp16_record(const std::string& name, const Tensor& value) {
  TensorRecord r{name, DType::fp16, value.shape(), {}, {}};
  r.payload.reserve(2 * value.size());
  for (float v : value.data()) put_u16(r.payload, float_to_half(v));
  return r;
}

Tensor decode_float_record(const TensorRecord& record) {
  std::vector<float> values(record.numel());
  if (record.dtype == DType::fp32) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) bits = (bits << 8) | record.payload[4 * i + static_cast<std::size_t>(b)];
      values[i] = std::bit_cast<float>(bits);
    }
  } else if (record.dtype == DType::fp16) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = static_cast<std::uint16_t>(record.payload[2 * i] | (record.payload[2 * i + 1] << 8));
      values[i] = half_to_float(bits);
    }
  } else {
    throw FormatError("record '" + record.name + "' is not a float record");
  }
  return Tensor(record.shape, std::move(values));
}

WeightContainer fp32_container(const TransformerModel& model) {
  WeightContainer c;
  c.config = model.config();
  for (const auto& p : model.params()) c.records.push_back(fp32_record(p.name, p.value));
  return c;
}

std::vector<std::uint8_t> serialize(const WeightContainer& container) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'M', 'P', 'Q', 'W'});
  put_u32(out, container.version);
  const ModelConfig& c = container.config;
  put_u32(out, checked_u32(c.n_layers, "n_layers"));
  put_u32(out, checked_u32(c.d_model, "d_model"));
  put_u32(out, checked_u32(c.n_heads, "n_heads"));
  put_u32(out, checked_u32(c.d_ff, "d_ff"));
  put_u32(out, checked_u32(c.vocab_size, "vocab_size"));
  put_u32(out, checked_u32(c.max_seq_len, "max_seq_len"));
  put_u8(out, static_cast<std::uint8_t>(c.task));
  put_u32(out, checked_u32(c.n_classes, "n_classes"));
  put_u32(out, checked_u32(container.records.size(), "record count"));
  for (const auto& r : container.records) {
    validate_record(r);
    put_u16(out, static_cast<std::uint16_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    put_u8(out, static_cast<std::uint8_t>(r.dtype));
    put_u32(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) put_u32(out, checked_u32(d, "dimension"));
    if (is_integer(r.dtype)) {
      put_u8(out, r.meta.channel_axis.value_or(kPerTensorAxis));
      for (float s : r.meta.scales) put_f32(out, s);
      for (float m : r.meta.mins) put_f32(out, m);
    }
    out.insert(out.end(), r.payload.begin(), r.payload.end());
  }
  put_u32(out, crc32_ieee(out));
  return out;
}

WeightContainer deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw TruncatedError("container shorter than its header");
  if (std::memcmp(bytes.data(), "MPQW", 4) != 0) throw FormatError("bad magic: not an MPQW container");
  if (bytes.size() < 12) throw TruncatedError("container has no CRC footer");
  Reader rd(bytes, bytes.size() - 4);
  rd.take(4);
  WeightContainer c;
  c.version = rd.u32();
  if (c.version != kContainerVersion)
    throw VersionError("unsupported MPQW version " + std::to_string(c.version));
  ModelConfig& cfg = c.config;
  cfg.n_layers = rd.u32();
  cfg.d_model = rd.u32();
  cfg.n_heads = rd.u32();
  cfg.d_ff = rd.u32();
  cfg.vocab_size = rd.u32();
  cfg.max_seq_len = rd.u32();
  const std::uint8_t task = rd.u8();
  if (task > 1) throw FormatError("unknown task code " + std::to_string(task));
  cfg.task = static_cast<TaskKind>(task);
  cfg.n_classes = rd.u32();
  const std::uint32_t count = rd.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord r;
    const std::uint16_t name_len = rd.u16();
    const auto name = rd.take(name_len);
    r.name.assign(name.begin(), name.end());
    const std::uint8_t dtype = rd.u8();
    if (dtype > 3) throw FormatError("unknown dtype code " + std::to_string(dtype) + " in '" + r.name + "'");
    r.dtype = static_cast<DType>(dtype);
    const std::uint32_t rank = rd.u32();
    if (rank < 1 || rank > 3) throw FormatError("record '" + r.name + "' has rank " + std::to_string(rank));
    for (std::uint32_t k = 0; k < rank; ++k) r.shape.push_back(rd.u32());
    try {
      check_shape(r.shape);
    } catch (const DimensionError& e) {
      throw FormatError("record '" + r.name + "': " + e.what());
    }
    if (is_integer(r.dtype)) {
      const std::uint8_t axis = rd.u8();
      if (axis != kPerTensorAxis) {
        if (axis >= rank) throw FormatError("record '" + r.name + "' channel axis out of range");
        r.meta.channel_axis = axis;
      }
      const std::size_t n = channel_count(r.shape, r.meta.channel_axis);
      r.meta.scales.resize(n);
      r.meta.mins.resize(n);
      for (auto& s : r.meta.scales) s = rd.f32();
      for (auto& m : r.meta.mins) m = rd.f32();
    }
    const auto payload = rd.take(payload_bytes(r.dtype, r.shape));
    r.payload.assign(payload.begin(), payload.end());
    c.records.push_back(std::move(r));
  }
  if (rd.pos() != bytes.size() - 4) throw FormatError("trailing bytes after the last record");
  const std::uint32_t stored = Reader(bytes.subspan(bytes.size() - 4), 4).u32();
  if (stored != crc32_ieee(bytes.first(bytes.size() - 4))) throw CrcError("CRC32 mismatch");
  return c;
}

std::size_t save(const WeightContainer& container, const std::filesystem::path& path) {
  const auto bytes = serialize(container);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
  return bytes.size();
}

WeightContainer load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::uint32_t crc32_ieee(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large inputs.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    crc = ::crc32(crc, bytes.data() + pos, static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

MemoryReport memory_report(const WeightContainer& original, const WeightContainer& quantized) {
  if (original.records.size() != quantized.records.size())
    throw DimensionError("containers hold different numbers of tensors");
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : quantized.records) by_name[r.name] = &r;
  MemoryReport m;
  for (const auto& r : original.records) {
    auto it = by_name.find(r.name);
    if (it == by_name.end()) throw DimensionError("quantized container lacks tensor '" + r.name + "'");
    if (it->second->shape != r.shape) throw DimensionError("shape mismatch for tensor '" + r.name + "'");
    m.m_o_bytes += r.storage_bytes();
    m.m_q_bytes += it->second->storage_bytes();
  }
  if (m.m_o_bytes == 0 || m.m_q_bytes == 0) throw DomainError("memory report over empty containers");
  const double mo = static_cast<double>(m.m_o_bytes), mq = static_cast<double>(m.m_q_bytes);
  m.cr = mo / mq;
  m.fpr_percent = 100.0 * (1.0 - mq / mo);
  return m;
}

}  // namespace mpq
