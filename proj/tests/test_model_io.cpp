// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mpq/fp16.hpp"
#include "mpq/model_io.hpp"
#include "mpq/quant.hpp"
#include "support.hpp"

using namespace mpq;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mpq_test_model_io";
  fs::create_directories(dir);
  return dir / name;
}

ModelConfig golden_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 4;
  c.n_heads = 1;
  c.d_ff = 8;
  c.vocab_size = 6;
  c.max_seq_len = 2;
  return c;
}

TensorRecord int4_record(std::vector<std::size_t> shape, std::size_t pairs) {
  TensorRecord r;
  r.name = "w";
  r.dtype = DType::int4;
  r.shape = std::move(shape);
  if (pairs > 1) r.meta.channel_axis = 0;
  r.meta.scales.assign(pairs, 0.5f);
  r.meta.mins.assign(pairs, -1.0f);
  r.payload.assign(payload_bytes(DType::int4, r.shape), 0);
  return r;
}

// Everything the random-container generator can produce.
WeightContainer random_container(Rng& rng) {
  WeightContainer c;
  c.config = test::tiny_config(test::random_between(rng, 1, 4));
  const std::size_t n = test::random_between(rng, 1, 6);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> shape;
    const std::size_t rank = test::random_between(rng, 1, 3);
    for (std::size_t k = 0; k < rank; ++k) shape.push_back(test::random_between(rng, 1, 7));
    const Tensor t = test::random_tensor(rng, shape, -3, 3);
    const std::string name = "t" + std::to_string(i);
    switch (rng.below(4)) {
      case 0: c.records.push_back(fp32_record(name, t)); break;
      case 1: c.records.push_back(fp16_record(name, t)); break;
      case 2: c.records.push_back(encode(name, quantize(t, 8, rng.below(2) ? std::optional<std::size_t>(0) : std::nullopt))); break;
      default: c.records.push_back(encode(name, quantize(t, 4, std::optional<std::size_t>(rank - 1))));
    }
  }
  return c;
}

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("byte sizes of each dtype") {
  const std::vector<std::size_t> s{3, 5};
  CHECK(payload_bytes(DType::fp32, s) == 60);
  CHECK(payload_bytes(DType::fp16, s) == 30);
  CHECK(payload_bytes(DType::int8, s) == 15);
  CHECK(payload_bytes(DType::int4, s) == 9);  // three rows of ceil(5/2)
  CHECK(record_storage_bytes(DType::int4, s, std::nullopt) == 9 + 8);
  CHECK(record_storage_bytes(DType::int8, s, std::uint8_t{0}) == 15 + 3 * 8);
  CHECK(record_storage_bytes(DType::int8, s, std::uint8_t{1}) == 15 + 5 * 8);
  CHECK(record_storage_bytes(DType::fp16, s, std::nullopt) == 30);
}

TEST_CASE("fp32 4x4 record occupies its hand-computed length") {
  WeightContainer empty;
  empty.config = golden_config();
  WeightContainer one = empty;
  Tensor t({4, 4});
  for (std::size_t i = 0; i < 16; ++i) t[i] = static_cast<float>(i);
  one.records.push_back(fp32_record("w", t));
  // magic 4 + version 4 + config 6*4+1+4 + count 4 + crc 4
  CHECK(serialize(empty).size() == 45);
  // name_len 2 + "w" 1 + dtype 1 + rank 4 + dims 8 + payload 64
  CHECK(serialize(one).size() == 45 + 16 + 64);
  const auto bytes = serialize(one);
  float third = 0;
  std::memcpy(&third, bytes.data() + 41 + 16 + 3 * 4, 4);
  CHECK(third == 3.0f);
}

TEST_CASE("save, load, save is byte-identical") {
  Rng rng(1);
  const TransformerModel m = TransformerModel::initialized(test::tiny_config(), rng);
  const WeightContainer c = fp32_container(m);
  const auto p1 = scratch("a.mpqw"), p2 = scratch("b.mpqw");
  const std::size_t n = save(c, p1);
  CHECK(n == fs::file_size(p1));
  const WeightContainer back = load(p1);
  CHECK(back == c);
  save(back, p2);
  std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
}

TEST_CASE("property: every dtype round-trips bit-exactly") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const WeightContainer c = random_container(rng);
    const auto bytes = serialize(c);
    const WeightContainer back = deserialize(bytes);
    REQUIRE(back == c);
    CHECK(serialize(back) == bytes);
  }
}

TEST_CASE("precondition failures") {
  WeightContainer c;
  c.config = golden_config();
  TensorRecord r{"empty", DType::fp32, {0, 4}, {}, {}};
  c.records.push_back(r);
  CHECK_THROWS_AS(serialize(c), DimensionError);
  c.records[0] = fp32_record(std::string(65536, 'x'), Tensor({1}));
  CHECK_THROWS_AS(serialize(c), FormatError);
  c.records[0] = fp32_record(std::string(65535, 'x'), Tensor({1}));
  CHECK(deserialize(serialize(c)) == c);
  CHECK_THROWS_AS(save(c, "/nonexistent-dir/x/y.mpqw"), IoError);
  CHECK_THROWS_AS(load("/nonexistent-dir/x/y.mpqw"), IoError);
}

TEST_CASE("corruption is reported distinctly") {
  Rng rng(3);
  const auto good = serialize(fp32_container(TransformerModel::initialized(test::tiny_config(), rng)));
  SUBCASE("payload byte") {
    auto bad = good;
    bad[bad.size() / 2] ^= 0x01;
    CHECK_THROWS_AS(deserialize(bad), CrcError);
  }
  SUBCASE("footer byte") {
    auto bad = good;
    bad.back() ^= 0x80;
    CHECK_THROWS_AS(deserialize(bad), CrcError);
  }
  SUBCASE("magic") {
    auto bad = good;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize(bad), FormatError);
    try {
      deserialize(bad);
    } catch (const CrcError&) {
      FAIL("magic reported as CRC");
    } catch (const FormatError&) {
    }
  }
  SUBCASE("version") {
    auto bad = good;
    bad[4] = 2;
    CHECK_THROWS_AS(deserialize(bad), VersionError);
  }
  SUBCASE("truncation") {
    for (std::size_t keep : {std::size_t{0}, std::size_t{3}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
      const std::vector<std::uint8_t> cut(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(keep));
      bool truncated = false;
      try {
        deserialize(cut);
      } catch (const TruncatedError&) {
        truncated = true;
      } catch (const Error&) {
      }
      CHECK_MESSAGE(truncated, "kept " << keep << " bytes");
    }
  }
}

TEST_CASE("CRC32 matches the standard check value") {
  const std::string s = "123456789";
  CHECK(crc32_ieee({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}) == 0xCBF43926u);
  CHECK(crc32_ieee({}) == 0u);
}

TEST_CASE("golden file loads to known values") {
  const WeightContainer c = load(fs::path(MPQ_TEST_DATA_DIR) / "golden.mpqw");
  CHECK(c.config == golden_config());
  REQUIRE(c.records.size() == 4);

  const Tensor a = decode_record(c.find("a"));
  CHECK(a.shape() == std::vector<std::size_t>{2, 2});
  CHECK(values(a) == std::vector<float>{1.5f, -2.0f, 0.25f, 3.0f});

  const Tensor b = decode_record(c.find("b"));
  CHECK(values(b) == std::vector<float>{1.0f, -0.5f, 65504.0f});

  const TensorRecord& cr = c.find("c");
  CHECK(cr.dtype == DType::int8);
  CHECK(cr.meta.channel_axis == std::optional<std::uint8_t>(0));
  CHECK(unpack_int8(cr.payload) == std::vector<std::int8_t>{-128, 0, 127, -1, 5, -7});
  CHECK(values(decode_record(cr)) == std::vector<float>{-1.0f, 63.0f, 126.5f, 31.75f, 33.25f, 30.25f});

  const TensorRecord& dr = c.find("d");
  CHECK(dr.dtype == DType::int4);
  CHECK(!dr.meta.channel_axis.has_value());
  CHECK(dr.payload.size() == 4);
  CHECK(values(decode_record(dr)) == std::vector<float>{-1.0f, 0.875f, 0.0f, 0.125f, -0.125f, 0.375f});

  // The writer reproduces the independently produced bytes.
  std::ifstream in(fs::path(MPQ_TEST_DATA_DIR) / "golden.mpqw", std::ios::binary);
  const std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)), {});
  CHECK(serialize(c) == raw);
}

TEST_CASE("int4 packing layout") {
  const std::vector<std::int8_t> codes{-8, 7, 0, 1, -1, 3};
  CHECK(pack_int4(codes, 3) == std::vector<std::uint8_t>{0x78, 0x00, 0xF1, 0x03});
  CHECK(pack_int4(codes, 2) == std::vector<std::uint8_t>{0x78, 0x10, 0x3F});
  const std::vector<std::int8_t> bad{8};
  CHECK_THROWS_AS(pack_int4(bad, 1), DomainError);
}

TEST_CASE("property: int4 pack/unpack is a bijection on [-8, 7]") {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t row = test::random_between(rng, 1, 9), rows = test::random_between(rng, 1, 5);
    std::vector<std::int8_t> codes(row * rows);
    for (auto& v : codes) v = static_cast<std::int8_t>(static_cast<int>(rng.below(16)) - 8);
    const auto packed = pack_int4(codes, row);
    CHECK(packed.size() == rows * ((row + 1) / 2));
    CHECK(unpack_int4(packed, codes.size(), row) == codes);
  }
  // Every byte value decodes and re-encodes to itself.
  for (int byte = 0; byte < 256; ++byte) {
    const std::vector<std::uint8_t> p{static_cast<std::uint8_t>(byte)};
    CHECK(pack_int4(unpack_int4(p, 2, 2), 2) == p);
  }
}

TEST_CASE("fp16 conversion") {
  // Independent decode of every pattern.
  for (std::uint32_t h = 0; h < 65536; ++h) {
    const std::uint16_t bits = static_cast<std::uint16_t>(h);
    const int sign = (bits >> 15) ? -1 : 1;
    const int exp = (bits >> 10) & 0x1f;
    const int man = bits & 0x3ff;
    const float f = half_to_float(bits);
    if (exp == 31) {
      if (man == 0) CHECK(f == sign * std::numeric_limits<float>::infinity());
      else CHECK(std::isnan(f));
      continue;
    }
    const double ref = exp == 0 ? sign * std::ldexp(man, -24) : sign * std::ldexp(1024 + man, exp - 25);
    REQUIRE(static_cast<double>(f) == ref);
    REQUIRE(float_to_half(f) == bits);
  }
  SUBCASE("round to nearest even") {
    CHECK(float_to_half(1.0f + std::ldexp(1.0f, -11)) == 0x3c00);  // tie, rounds to even
    CHECK(float_to_half(1.0f + 3 * std::ldexp(1.0f, -11)) == 0x3c02);
    CHECK(float_to_half(65520.0f) == 0x7c00);
    CHECK(float_to_half(65519.0f) == 0x7bff);
    CHECK(float_to_half(std::ldexp(1.0f, -25)) == 0x0000);
    CHECK(float_to_half(std::ldexp(1.5f, -25)) == 0x0001);
  }
  SUBCASE("property: result is the nearest representable half") {
    Rng rng(5);
    for (int trial = 0; trial < 20000; ++trial) {
      const float x = static_cast<float>(std::ldexp(rng.uniform() * 2 - 1, static_cast<int>(rng.below(40)) - 25));
      const std::uint16_t h = float_to_half(x);
      const double err = std::abs(static_cast<double>(half_to_float(h)) - x);
      for (int d : {-1, 1}) {
        const std::uint16_t nb = static_cast<std::uint16_t>(h + d);
        if (((nb >> 10) & 0x1f) == 31 || (nb & 0x7fff) == 0x7fff) continue;
        if ((h & 0x7fff) == 0 && d == -1) continue;
        CHECK(err <= std::abs(static_cast<double>(half_to_float(nb)) - x));
      }
    }
  }
}

TEST_CASE("memory_report examples") {
  WeightContainer orig, q;
  Tensor w({16, 16});
  orig.records.push_back(fp32_record("w", w));
  q.records.push_back(int4_record({16, 16}, 1));
  auto m = memory_report(orig, q);
  CHECK(m.m_o_bytes == 1024);
  CHECK(m.m_q_bytes == 136);
  CHECK(m.cr == doctest::Approx(1024.0 / 136.0).epsilon(1e-12));
  CHECK(m.cr == doctest::Approx(7.53).epsilon(1e-3));

  q.records[0] = fp16_record("w", w);
  m = memory_report(orig, q);
  CHECK(m.cr == 2.0);
  CHECK(m.fpr_percent == 50.0);

  m = memory_report(orig, orig);
  CHECK(m.cr == 1.0);
  CHECK(m.fpr_percent == 0.0);

  q.records[0] = fp16_record("v", w);
  CHECK_THROWS_AS(memory_report(orig, q), DimensionError);
  q.records[0] = fp16_record("w", Tensor({16, 8}));
  CHECK_THROWS_AS(memory_report(orig, q), DimensionError);
}

TEST_CASE("property: FPR and CR agree, and narrower plans never grow") {
  Rng rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    WeightContainer orig, q;
    const std::size_t n = test::random_between(rng, 1, 5);
    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<std::size_t> shape{test::random_between(rng, 1, 12), test::random_between(rng, 1, 12)};
      const Tensor t = test::random_tensor(rng, shape);
      const std::string name = "t" + std::to_string(i);
      orig.records.push_back(fp32_record(name, t));
      q.records.push_back(encode_param(name, t, std::array{32, 16, 8, 4}[rng.below(4)]));
    }
    const auto m = memory_report(orig, q);
    CHECK(std::abs(m.fpr_percent - 100.0 * (1.0 - 1.0 / m.cr)) < 1e-9);
    CHECK(static_cast<double>(m.m_o_bytes) / static_cast<double>(m.m_q_bytes) == m.cr);
  }
  // With at least 16 weights per channel, metadata never outweighs the savings.
  for (int trial = 0; trial < 100; ++trial) {
    const std::vector<std::size_t> shape{test::random_between(rng, 1, 8), test::random_between(rng, 16, 40)};
    const Tensor t = test::random_tensor(rng, shape);
    WeightContainer orig, q;
    orig.records.push_back(fp32_record("t", t));
    for (int bits : {32, 16, 8, 4}) {
      q.records.assign(1, encode_param("t", t, bits));
      const auto m = memory_report(orig, q);
      CHECK(m.m_q_bytes <= m.m_o_bytes);
      CHECK(m.cr >= 1.0);
    }
  }
}
