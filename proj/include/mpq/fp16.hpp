// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace mpq {

// IEEE-754 binary16 conversion, round-to-nearest-even. Overflow becomes
// infinity and NaN payloads keep their quiet bit.
std::uint16_t float_to_half(float value) noexcept;
float half_to_float(std::uint16_t bits) noexcept;

inline float round_to_half(float value) noexcept { return half_to_float(float_to_half(value)); }

}  // namespace mpq
