// SPDX-License-Identifier: Apache-2.0

#include "mpq/plan.hpp"

#include "mpq/errors.hpp"

namespace mpq {

std::string to_string(PlanProvenance provenance) {
  switch (provenance) {
    case PlanProvenance::kmeans:
      return "kmeans";
    case PlanProvenance::budgeted:
      return "budgeted";
    case PlanProvenance::uniform:
      return "uniform";
  }
  return "unknown";
}

PlanProvenance provenance_from_string(const std::string& name) {
  if (name == "kmeans") return PlanProvenance::kmeans;
  if (name == "budgeted") return PlanProvenance::budgeted;
  if (name == "uniform") return PlanProvenance::uniform;
  throw DomainError("unknown plan provenance '" + name + "'");
}

bool is_supported_width(int bits) noexcept { return bits == 4 || bits == 8 || bits == 16; }

PrecisionPlan PrecisionPlan::uniform(std::size_t n_layers, int bits) {
  if (!is_supported_width(bits)) throw DomainError("unsupported bit-width " + std::to_string(bits));
  return PrecisionPlan{std::vector<int>(n_layers, bits), PlanProvenance::uniform};
}

void PrecisionPlan::validate(std::size_t n_layers) const {
  if (bits.size() != n_layers)
    throw DomainError("plan covers " + std::to_string(bits.size()) + " layers, model has " +
                      std::to_string(n_layers));
  for (std::size_t l = 0; l < bits.size(); ++l)
    if (!is_supported_width(bits[l]))
      throw DomainError("layer " + std::to_string(l) + " has unsupported bit-width " + std::to_string(bits[l]));
}

}  // namespace mpq
