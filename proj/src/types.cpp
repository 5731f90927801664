#include "haco/types.hpp"

#include <array>
#include <set>

namespace haco {

const std::string& to_string(AgeBin v) {
  static const std::array<std::string, kAgeBinCount> names = {"under_35", "35_49", "50_64", "65_plus",
                                                              "unknown"};
  return names[static_cast<size_t>(v)];
}

const std::string& to_string(Sex v) {
  static const std::array<std::string, kSexCount> names = {"female", "male", "unknown"};
  return names[static_cast<size_t>(v)];
}

const std::string& to_string(Race v) {
  static const std::array<std::string, kRaceCount> names = {"black",    "white", "asian",
                                                            "hispanic", "other", "unknown"};
  return names[static_cast<size_t>(v)];
}

size_t Dataset::n_patients() const {
  std::set<std::string> ids;
  for (const auto& ep : episodes) ids.insert(ep.patient_id);
  return ids.size();
}

}  // namespace haco
