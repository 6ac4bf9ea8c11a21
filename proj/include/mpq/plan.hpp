// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace mpq {

enum class PlanProvenance { kmeans, budgeted, uniform };

std::string to_string(PlanProvenance provenance);
PlanProvenance provenance_from_string(const std::string& name);

// Bit-width per transformer layer, each one of 4, 8 or 16.
struct PrecisionPlan {
  std::vector<int> bits;
  PlanProvenance provenance = PlanProvenance::uniform;

  static PrecisionPlan uniform(std::size_t n_layers, int bits);

  std::size_t n_layers() const noexcept { return bits.size(); }
  // Throws DomainError unless the plan has n_layers entries, all in {4, 8, 16}.
  void validate(std::size_t n_layers) const;

  bool operator==(const PrecisionPlan&) const = default;
};

bool is_supported_width(int bits) noexcept;

}  // namespace mpq
