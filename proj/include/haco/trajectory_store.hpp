#pragma once

#include <map>
#include <string>
#include <vector>

#include "haco/types.hpp"

namespace haco {

enum class FileFormat { Csv, Jsonl };

FileFormat file_format_from_string(const std::string& s);  // "csv" | "jsonl"
const std::string& to_string(FileFormat f);

// Lowercase, collapse non-alphanumeric runs to single underscores, strip edge
// underscores. All-symbol input maps to "col". Idempotent.
std::string sanitize_column_name(const std::string& raw);

struct SplitSpec {
  double train_frac = 0.70;
  double calib_frac = 0.15;
  double test_frac = 0.15;
};

// What the loader did: rows kept/dropped plus per-reason and per-warning
// tallies (e.g. unparseable_action, non_numeric_state_value).
struct LoadReport {
  size_t rows_read = 0;
  size_t rows_dropped = 0;
  std::map<std::string, size_t> drop_reasons;
  std::map<std::string, size_t> warnings;
  bool harm_derived_from_reward = false;
};

struct LoadResult {
  Dataset dataset;
  LoadReport report;
};

// Reads trajectories from CSV (header row) or JSONL (one object per line).
// Column names are sanitized; patient_id, action, reward are required.
// Optional columns: t (aliases timestep/time_step/step_index), episode_id
// (alias episode), harm, state_json, state_*-prefixed features, and
// demographics (age_bin/age, sex, race). Missing episode ids are inferred:
// a new episode starts on a patient change or a timestep that fails to
// increase; without a t column each patient is a single episode. Missing
// harm derives from reward < 0. Malformed rows are dropped and counted.
LoadResult load_trajectories(const std::string& path, FileFormat format, int action_count);

// Writes the schema load_trajectories reads back: patient_id, episode_id, t,
// action, reward, harm, age_bin, sex, race, then state features (state_<name>
// columns for CSV, a state_json object for JSONL). Doubles round-trip exactly.
void save_trajectories(const Dataset& ds, const std::string& path, FileFormat format);

// One demographics source: patient id → record. Missing fields stay Unknown.
struct DemographicsTable {
  std::map<std::string, Demographics> rows;
};

// Reads a table keyed by patient_id with optional age/age_bin, sex, race
// columns. Duplicate patients within one table: fewest Unknown fields wins,
// ties to the earlier row.
DemographicsTable load_demographics(const std::string& path, FileFormat format);

// For each patient in ds, picks the source record with the fewest Unknown
// fields (ties to the earlier source); patients absent everywhere get
// all-Unknown. Returns ds with demographics replaced.
Dataset merge_demographics(Dataset ds, const std::vector<DemographicsTable>& sources);

// Splits at episode granularity in load order: first ⌊train·E⌋ episodes,
// next ⌊calib·E⌋, remainder test. Throws InsufficientEpisodes if any part
// would be empty, InvalidConfig for a malformed spec.
struct SplitResult {
  Dataset train;
  Dataset calib;
  Dataset test;
};
SplitResult temporal_split(const Dataset& ds, const SplitSpec& spec);

// New dataset holding the given episodes (in the given order); demographics
// restricted to patients that remain.
Dataset subset_episodes(const Dataset& ds, const std::vector<size_t>& episode_indices);

// Value parsers shared by the loader and the demographics reader. Numeric
// ages are binned; strings match canonical level names plus common synonyms.
AgeBin parse_age_bin(const std::string& raw);
AgeBin bin_age(double age);
Sex parse_sex(const std::string& raw);
Race parse_race(const std::string& raw);

}  // namespace haco
