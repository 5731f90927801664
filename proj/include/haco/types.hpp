#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace haco {

// One transition row. States live in Dataset::state_data (one row per step,
// shared feature order) so numeric code can map the whole block at once.
struct Step {
  int t = 0;
  int action = 0;
  double reward = 0.0;
  double prev_reward = 0.0;  // 0 at episode start, else previous step's reward
  bool harm = false;
};

// Half-open range [begin, end) into Dataset::steps.
struct Episode {
  std::string id;  // unique across the dataset
  std::string patient_id;
  size_t begin = 0;
  size_t end = 0;
  size_t length() const { return end - begin; }
};

enum class AgeBin { Under35 = 0, From35To49, From50To64, Plus65, Unknown };
enum class Sex { Female = 0, Male, Unknown };
enum class Race { Black = 0, White, Asian, Hispanic, Other, Unknown };

inline constexpr int kAgeBinCount = 5;
inline constexpr int kSexCount = 3;
inline constexpr int kRaceCount = 6;

const std::string& to_string(AgeBin v);
const std::string& to_string(Sex v);
const std::string& to_string(Race v);

struct Demographics {
  AgeBin age = AgeBin::Unknown;
  Sex sex = Sex::Unknown;
  Race race = Race::Unknown;

  int unknown_count() const {
    return (age == AgeBin::Unknown) + (sex == Sex::Unknown) + (race == Race::Unknown);
  }
  bool operator==(const Demographics&) const = default;
};

struct Dataset {
  std::vector<Step> steps;
  std::vector<Episode> episodes;  // load order; step ranges are contiguous
  std::vector<double> state_data; // row-major, steps.size() x feature_names.size()
  std::vector<std::string> feature_names;  // sorted; defines state column order
  std::map<std::string, Demographics> demographics;  // by patient id
  int action_count = 0;

  size_t size() const { return steps.size(); }
  size_t state_dim() const { return feature_names.size(); }

  std::span<const double> state(size_t i) const {
    const size_t d = feature_names.size();
    return {state_data.data() + i * d, d};
  }
  std::span<double> state(size_t i) {
    const size_t d = feature_names.size();
    return {state_data.data() + i * d, d};
  }

  size_t n_patients() const;
};

}  // namespace haco
