#include "haco/trajectory_store.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "haco/csv.hpp"
#include "haco/errors.hpp"

namespace haco {

namespace {

using nlohmann::json;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open file: " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::optional<double> parse_double_cell(const std::string& raw) {
  const std::string s = trim(raw);
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::optional<long long> parse_int_cell(const std::string& raw) {
  const std::string s = trim(raw);
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const long long v = std::strtoll(s.c_str(), &end, 10);
  if (end != s.c_str() + s.size()) return std::nullopt;
  return v;
}

// 1 = true, 0 = false, -1 = cannot tell (caller derives from reward).
int parse_harm_cell(const std::string& raw) {
  const std::string s = sanitize_column_name(trim(raw));
  if (s == "true" || s == "t" || s == "yes" || s == "y" || s == "1") return 1;
  if (s == "false" || s == "f" || s == "no" || s == "n" || s == "0") return 0;
  return -1;
}

struct Interner {
  std::unordered_map<std::string, uint32_t> index;
  std::vector<std::string> names;

  uint32_t intern(const std::string& s) {
    auto [it, inserted] = index.emplace(s, static_cast<uint32_t>(names.size()));
    if (inserted) names.push_back(s);
    return it->second;
  }
};

// One ingested row, format-independent. Feature values live in a shared pool
// slice so rows stay small.
struct RawStep {
  uint32_t patient = 0;
  int64_t t = -1;       // -1: absent
  int32_t episode = -1; // -1: absent
  int32_t action = 0;
  double reward = 0.0;
  int8_t harm = -1;     // -1: derive from reward sign
  uint32_t feat_begin = 0;
  uint32_t feat_end = 0;
};

struct ParseState {
  Interner patients;
  Interner episode_ids;
  Interner features;
  std::vector<RawStep> rows;
  std::vector<std::pair<uint32_t, double>> feat_pool;
  bool has_t = false;
  bool has_episode = false;
  bool has_harm = false;
  std::unordered_map<uint32_t, Demographics> demo;  // best record so far per patient
  LoadReport report;

  void drop(const char* reason) {
    ++report.rows_dropped;
    ++report.drop_reasons[reason];
  }
  void warn(const char* what) { ++report.warnings[what]; }

  void offer_demographics(uint32_t patient, const Demographics& d) {
    auto [it, inserted] = demo.emplace(patient, d);
    if (!inserted && d.unknown_count() < it->second.unknown_count()) it->second = d;
  }
};

// Appends one feature, first value wins when two raw names sanitize alike.
void push_feature(ParseState& st, std::vector<std::pair<uint32_t, double>>& row_feats,
                  const std::string& sanitized_name, double value) {
  const uint32_t fid = st.features.intern(sanitized_name);
  for (const auto& [existing, _] : row_feats)
    if (existing == fid) return;
  row_feats.emplace_back(fid, value);
}

void flatten_state_json(ParseState& st, const json& obj,
                        std::vector<std::pair<uint32_t, double>>& row_feats) {
  for (const auto& [key, value] : obj.items()) {
    if (!value.is_number()) {
      st.warn("non_numeric_state_value");
      continue;
    }
    push_feature(st, row_feats, sanitize_column_name(key), value.get<double>());
  }
}

void commit_features(ParseState& st, RawStep& raw,
                     const std::vector<std::pair<uint32_t, double>>& row_feats) {
  raw.feat_begin = static_cast<uint32_t>(st.feat_pool.size());
  st.feat_pool.insert(st.feat_pool.end(), row_feats.begin(), row_feats.end());
  raw.feat_end = static_cast<uint32_t>(st.feat_pool.size());
}

void parse_csv_file(const std::string& text, int action_count, ParseState& st) {
  const auto rows = csv::parse(text);
  if (rows.empty()) throw MissingRequiredColumnError("patient_id");

  std::unordered_map<std::string, size_t> col;
  for (size_t i = 0; i < rows[0].size(); ++i) {
    if (!col.emplace(sanitize_column_name(rows[0][i]), i).second) st.warn("duplicate_column");
  }
  auto find_col = [&](std::initializer_list<const char*> names) -> std::optional<size_t> {
    for (const char* n : names) {
      auto it = col.find(n);
      if (it != col.end()) return it->second;
    }
    return std::nullopt;
  };
  auto require_col = [&](const char* name) {
    auto it = col.find(name);
    if (it == col.end()) throw MissingRequiredColumnError(name);
    return it->second;
  };

  const size_t c_patient = require_col("patient_id");
  const size_t c_action = require_col("action");
  const size_t c_reward = require_col("reward");
  const auto c_t = find_col({"t", "timestep", "time_step", "step_index"});
  const auto c_episode = find_col({"episode_id", "episode"});
  const auto c_harm = find_col({"harm"});
  const auto c_state_json = find_col({"state_json"});
  const auto c_age = find_col({"age_bin", "age"});
  const auto c_sex = find_col({"sex"});
  const auto c_race = find_col({"race"});
  st.has_t = c_t.has_value();
  st.has_episode = c_episode.has_value();
  st.has_harm = c_harm.has_value();
  st.report.harm_derived_from_reward = !st.has_harm;

  // state_<name> feature columns, used only when there is no state_json column
  std::vector<std::pair<std::string, size_t>> state_cols;
  if (!c_state_json) {
    for (const auto& [name, idx] : col) {
      if (name.size() > 6 && name.rfind("state_", 0) == 0) state_cols.emplace_back(name.substr(6), idx);
    }
    std::sort(state_cols.begin(), state_cols.end());
  }

  const std::string empty_cell;
  std::vector<std::pair<uint32_t, double>> row_feats;
  for (size_t r = 1; r < rows.size(); ++r) {
    ++st.report.rows_read;
    const auto& cells = rows[r];
    auto cell = [&](size_t idx) -> const std::string& {
      return idx < cells.size() ? cells[idx] : empty_cell;
    };

    if (cell(c_patient).empty()) {
      st.drop("missing_patient_id");
      continue;
    }
    const auto action = parse_int_cell(cell(c_action));
    if (!action) {
      st.drop("unparseable_action");
      continue;
    }
    if (*action < 0 || *action >= action_count) {
      st.drop("action_out_of_range");
      continue;
    }
    const auto reward = parse_double_cell(cell(c_reward));
    if (!reward) {
      st.drop("unparseable_reward");
      continue;
    }

    RawStep raw;
    raw.action = static_cast<int32_t>(*action);
    raw.reward = *reward;

    if (c_t) {
      const std::string& tc = cell(*c_t);
      if (tc.empty()) {
        raw.t = -1;  // assembly drops it; the file does carry a t column
      } else {
        const auto t = parse_int_cell(tc);
        if (!t || *t < 0) {
          st.drop("bad_t");
          continue;
        }
        raw.t = *t;
      }
    }
    if (c_episode) {
      const std::string& ec = cell(*c_episode);
      if (ec.empty()) {
        st.drop("missing_episode_id");
        continue;
      }
      raw.episode = static_cast<int32_t>(st.episode_ids.intern(ec));
    }
    if (c_harm) {
      const std::string& hc = cell(*c_harm);
      if (!hc.empty()) {
        raw.harm = static_cast<int8_t>(parse_harm_cell(hc));
        if (raw.harm == -1) st.warn("unparseable_harm");
      }
    }

    raw.patient = st.patients.intern(cell(c_patient));

    row_feats.clear();
    if (c_state_json) {
      const std::string& sj = cell(*c_state_json);
      if (!sj.empty()) {
        const json parsed = json::parse(sj, nullptr, false);
        if (!parsed.is_object()) {
          st.warn("unparseable_state_json");
        } else {
          flatten_state_json(st, parsed, row_feats);
        }
      }
    } else {
      for (const auto& [name, idx] : state_cols) {
        const std::string& sc = cell(idx);
        if (sc.empty()) continue;
        const auto v = parse_double_cell(sc);
        if (!v) {
          st.warn("unparseable_state_value");
          continue;
        }
        push_feature(st, row_feats, name, *v);
      }
    }
    commit_features(st, raw, row_feats);

    if (c_age || c_sex || c_race) {
      Demographics d;
      if (c_age) d.age = parse_age_bin(cell(*c_age));
      if (c_sex) d.sex = parse_sex(cell(*c_sex));
      if (c_race) d.race = parse_race(cell(*c_race));
      st.offer_demographics(raw.patient, d);
    }

    st.rows.push_back(raw);
  }
}

std::optional<std::string> json_as_id(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
  if (v.is_number_float()) return format_double(v.get<double>());
  return std::nullopt;
}

std::optional<long long> json_as_int(const json& v) {
  if (v.is_number_integer()) return v.get<long long>();
  if (v.is_number_unsigned()) return static_cast<long long>(v.get<unsigned long long>());
  if (v.is_string()) return parse_int_cell(v.get<std::string>());
  return std::nullopt;
}

std::optional<double> json_as_double(const json& v) {
  if (v.is_number()) {
    const double d = v.get<double>();
    return std::isfinite(d) ? std::optional<double>(d) : std::nullopt;
  }
  if (v.is_string()) return parse_double_cell(v.get<std::string>());
  return std::nullopt;
}

void parse_jsonl_file(const std::string& text, int action_count, ParseState& st) {
  std::unordered_set<std::string> keys_seen;
  std::vector<std::pair<uint32_t, double>> row_feats;

  size_t pos = 0;
  while (pos <= text.size()) {
    const size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    if (trim(line).empty()) continue;

    ++st.report.rows_read;
    const json obj = json::parse(line, nullptr, false);
    if (!obj.is_object()) {
      st.drop("unparseable_row");
      continue;
    }

    // sanitized key → value; first raw key (in object order) wins collisions
    std::unordered_map<std::string, const json*> fields;
    for (const auto& [key, value] : obj.items()) {
      const std::string k = sanitize_column_name(key);
      fields.emplace(k, &value);
      keys_seen.insert(k);
    }
    auto field = [&](std::initializer_list<const char*> names) -> const json* {
      for (const char* n : names) {
        auto it = fields.find(n);
        if (it != fields.end()) return it->second;
      }
      return nullptr;
    };

    const json* patient_v = field({"patient_id"});
    const auto patient = patient_v ? json_as_id(*patient_v) : std::nullopt;
    if (!patient || patient->empty()) {
      st.drop("missing_patient_id");
      continue;
    }
    const json* action_v = field({"action"});
    const auto action = action_v ? json_as_int(*action_v) : std::nullopt;
    if (!action) {
      st.drop("unparseable_action");
      continue;
    }
    if (*action < 0 || *action >= action_count) {
      st.drop("action_out_of_range");
      continue;
    }
    const json* reward_v = field({"reward"});
    const auto reward = reward_v ? json_as_double(*reward_v) : std::nullopt;
    if (!reward) {
      st.drop("unparseable_reward");
      continue;
    }

    RawStep raw;
    raw.action = static_cast<int32_t>(*action);
    raw.reward = *reward;

    if (const json* tv = field({"t", "timestep", "time_step", "step_index"})) {
      st.has_t = true;
      const auto t = json_as_int(*tv);
      if (!t || *t < 0) {
        st.drop("bad_t");
        continue;
      }
      raw.t = *t;
    }
    if (const json* ev = field({"episode_id", "episode"})) {
      st.has_episode = true;
      const auto eid = json_as_id(*ev);
      if (!eid || eid->empty()) {
        st.drop("missing_episode_id");
        continue;
      }
      raw.episode = static_cast<int32_t>(st.episode_ids.intern(*eid));
    }
    if (const json* hv = field({"harm"})) {
      st.has_harm = true;
      if (hv->is_boolean()) {
        raw.harm = hv->get<bool>() ? 1 : 0;
      } else if (hv->is_number()) {
        raw.harm = hv->get<double>() != 0.0 ? 1 : 0;
      } else if (hv->is_string()) {
        raw.harm = static_cast<int8_t>(parse_harm_cell(hv->get<std::string>()));
        if (raw.harm == -1) st.warn("unparseable_harm");
      } else {
        st.warn("unparseable_harm");
      }
    }

    raw.patient = st.patients.intern(*patient);

    row_feats.clear();
    if (const json* sv = field({"state_json"})) {
      if (sv->is_object()) {
        flatten_state_json(st, *sv, row_feats);
      } else if (sv->is_string()) {
        const json parsed = json::parse(sv->get<std::string>(), nullptr, false);
        if (parsed.is_object()) {
          flatten_state_json(st, parsed, row_feats);
        } else {
          st.warn("unparseable_state_json");
        }
      } else {
        st.warn("unparseable_state_json");
      }
    } else {
      // per-row state_<name> keys, gathered in sanitized-name order
      std::vector<std::pair<std::string, const json*>> state_fields;
      for (const auto& [k, v] : fields) {
        if (k.size() > 6 && k.rfind("state_", 0) == 0) state_fields.emplace_back(k.substr(6), v);
      }
      std::sort(state_fields.begin(), state_fields.end());
      for (const auto& [name, v] : state_fields) {
        const auto d = json_as_double(*v);
        if (!d) {
          st.warn("non_numeric_state_value");
          continue;
        }
        push_feature(st, row_feats, name, *d);
      }
    }
    commit_features(st, raw, row_feats);

    const json* age_v = field({"age_bin", "age"});
    const json* sex_v = field({"sex"});
    const json* race_v = field({"race"});
    if (age_v || sex_v || race_v) {
      Demographics d;
      if (age_v) {
        if (age_v->is_number()) {
          d.age = bin_age(age_v->get<double>());
        } else if (age_v->is_string()) {
          d.age = parse_age_bin(age_v->get<std::string>());
        }
      }
      if (sex_v && sex_v->is_string()) d.sex = parse_sex(sex_v->get<std::string>());
      if (race_v && race_v->is_string()) d.race = parse_race(race_v->get<std::string>());
      st.offer_demographics(raw.patient, d);
    }

    st.rows.push_back(raw);
  }

  st.report.harm_derived_from_reward = !st.has_harm;
  if (st.rows.empty()) {
    for (const char* required : {"patient_id", "action", "reward"}) {
      if (!keys_seen.count(required)) throw MissingRequiredColumnError(required);
    }
  }
}

struct EpisodeGroup {
  std::string id;
  uint32_t patient = 0;
  std::vector<uint32_t> row_indices;
};

std::vector<EpisodeGroup> group_rows(ParseState& st) {
  std::vector<EpisodeGroup> groups;

  auto unique_id = [used = std::unordered_set<std::string>()](std::string base) mutable {
    std::string id = base;
    int k = 1;
    while (!used.insert(id).second) id = base + "#" + std::to_string(k++);
    return id;
  };

  if (st.has_episode) {
    // Contiguous runs of one episode_id (same patient). A reappearing id or a
    // mid-episode patient switch opens a fresh group under a suffixed id.
    std::unordered_set<std::string> ids_started;
    int32_t cur_episode = -1;
    uint32_t cur_patient = 0;
    int64_t last_t = -1;
    bool in_group = false;
    for (uint32_t i = 0; i < st.rows.size(); ++i) {
      const RawStep& row = st.rows[i];
      if (row.episode < 0) {
        st.drop("missing_episode_id");
        continue;
      }
      if (st.has_t && row.t < 0) {
        st.drop("missing_t");
        continue;
      }
      const bool boundary = !in_group || row.episode != cur_episode || row.patient != cur_patient;
      if (boundary) {
        const std::string& base = st.episode_ids.names[static_cast<size_t>(row.episode)];
        if (!ids_started.insert(base).second) st.warn("episode_id_reused");
        groups.push_back({unique_id(base), row.patient, {}});
        cur_episode = row.episode;
        cur_patient = row.patient;
        last_t = -1;
        in_group = true;
      }
      if (st.has_t) {
        if (row.t <= last_t) {
          st.drop("non_increasing_t");
          continue;
        }
        last_t = row.t;
      }
      groups.back().row_indices.push_back(i);
    }
  } else if (st.has_t) {
    // Patient change or a timestep that fails to increase starts a new episode.
    std::unordered_map<uint32_t, int> per_patient;
    bool in_group = false;
    uint32_t cur_patient = 0;
    int64_t last_t = -1;
    for (uint32_t i = 0; i < st.rows.size(); ++i) {
      const RawStep& row = st.rows[i];
      if (row.t < 0) {
        st.drop("missing_t");
        continue;
      }
      if (!in_group || row.patient != cur_patient || row.t <= last_t) {
        const int k = per_patient[row.patient]++;
        groups.push_back({unique_id(st.patients.names[row.patient] + "#" + std::to_string(k)),
                          row.patient,
                          {}});
        cur_patient = row.patient;
        in_group = true;
      }
      last_t = row.t;
      groups.back().row_indices.push_back(i);
    }
  } else {
    // No ordering signal at all: one episode per patient, rows in file order.
    std::unordered_map<uint32_t, size_t> group_of;
    for (uint32_t i = 0; i < st.rows.size(); ++i) {
      const RawStep& row = st.rows[i];
      auto [it, inserted] = group_of.emplace(row.patient, groups.size());
      if (inserted) groups.push_back({unique_id(st.patients.names[row.patient] + "#0"), row.patient, {}});
      groups[it->second].row_indices.push_back(i);
    }
  }
  return groups;
}

Dataset assemble_dataset(ParseState& st, int action_count) {
  const auto groups = group_rows(st);

  Dataset ds;
  ds.action_count = action_count;

  // Feature order: sorted sanitized names, with a remap from intern order.
  std::vector<size_t> order(st.features.names.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return st.features.names[a] < st.features.names[b]; });
  std::vector<uint32_t> remap(order.size());
  ds.feature_names.reserve(order.size());
  for (size_t new_idx = 0; new_idx < order.size(); ++new_idx) {
    remap[order[new_idx]] = static_cast<uint32_t>(new_idx);
    ds.feature_names.push_back(st.features.names[order[new_idx]]);
  }

  const size_t d = ds.feature_names.size();
  size_t kept = 0;
  for (const auto& g : groups) kept += g.row_indices.size();
  ds.steps.reserve(kept);
  ds.state_data.assign(kept * d, 0.0);

  for (const auto& g : groups) {
    if (g.row_indices.empty()) continue;
    Episode ep;
    ep.id = g.id;
    ep.patient_id = st.patients.names[g.patient];
    ep.begin = ds.steps.size();
    double prev_reward = 0.0;
    for (size_t pos = 0; pos < g.row_indices.size(); ++pos) {
      const RawStep& raw = st.rows[g.row_indices[pos]];
      Step s;
      s.t = st.has_t ? static_cast<int>(raw.t) : static_cast<int>(pos);
      s.action = raw.action;
      s.reward = raw.reward;
      s.harm = raw.harm == -1 ? raw.reward < 0.0 : raw.harm != 0;
      s.prev_reward = pos == 0 ? 0.0 : prev_reward;
      prev_reward = s.reward;

      double* state_row = ds.state_data.data() + ds.steps.size() * d;
      for (uint32_t f = raw.feat_begin; f < raw.feat_end; ++f) {
        state_row[remap[st.feat_pool[f].first]] = st.feat_pool[f].second;
      }
      ds.steps.push_back(s);
    }
    ep.end = ds.steps.size();
    ds.episodes.push_back(std::move(ep));
  }

  if (ds.steps.empty()) throw EmptyDatasetError();

  if (!st.demo.empty()) {
    std::set<std::string> present;
    for (const auto& ep : ds.episodes) present.insert(ep.patient_id);
    for (const auto& [patient, record] : st.demo) {
      const std::string& name = st.patients.names[patient];
      if (present.count(name)) ds.demographics[name] = record;
    }
  }
  return ds;
}

}  // namespace

FileFormat file_format_from_string(const std::string& s) {
  const std::string f = sanitize_column_name(s);
  if (f == "csv") return FileFormat::Csv;
  if (f == "jsonl") return FileFormat::Jsonl;
  throw InvalidConfigError("unknown file format: " + s);
}

const std::string& to_string(FileFormat f) {
  static const std::string csv_name = "csv", jsonl_name = "jsonl";
  return f == FileFormat::Csv ? csv_name : jsonl_name;
}

std::string sanitize_column_name(const std::string& raw) {
  std::string out;
  out.reserve(raw.size());
  bool pending_separator = false;
  for (unsigned char c : raw) {
    if (std::isalnum(c)) {
      if (pending_separator && !out.empty()) out.push_back('_');
      pending_separator = false;
      out.push_back(static_cast<char>(std::tolower(c)));
    } else {
      pending_separator = true;
    }
  }
  return out.empty() ? "col" : out;
}

LoadResult load_trajectories(const std::string& path, FileFormat format, int action_count) {
  if (action_count < 1) throw InvalidConfigError("action_count must be ≥ 1");
  const std::string text = read_file(path);
  ParseState st;
  if (format == FileFormat::Csv) {
    parse_csv_file(text, action_count, st);
  } else {
    parse_jsonl_file(text, action_count, st);
  }
  LoadResult result;
  result.dataset = assemble_dataset(st, action_count);
  result.report = std::move(st.report);
  return result;
}

void save_trajectories(const Dataset& ds, const std::string& path, FileFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open file for writing: " + path);

  auto demographics_of = [&](const std::string& patient) {
    auto it = ds.demographics.find(patient);
    return it == ds.demographics.end() ? Demographics{} : it->second;
  };

  if (format == FileFormat::Csv) {
    std::vector<std::string> header = {"patient_id", "episode_id", "t",       "action", "reward",
                                       "harm",       "age_bin",    "sex",     "race"};
    for (const auto& name : ds.feature_names) header.push_back("state_" + name);
    out << csv::join_row(header) << "\n";

    std::vector<std::string> row(header.size());
    for (const auto& ep : ds.episodes) {
      const Demographics demo = demographics_of(ep.patient_id);
      for (size_t i = ep.begin; i < ep.end; ++i) {
        const Step& s = ds.steps[i];
        row[0] = ep.patient_id;
        row[1] = ep.id;
        row[2] = std::to_string(s.t);
        row[3] = std::to_string(s.action);
        row[4] = format_double(s.reward);
        row[5] = s.harm ? "true" : "false";
        row[6] = to_string(demo.age);
        row[7] = to_string(demo.sex);
        row[8] = to_string(demo.race);
        const auto state = ds.state(i);
        for (size_t f = 0; f < state.size(); ++f) row[9 + f] = format_double(state[f]);
        out << csv::join_row(row) << "\n";
      }
    }
  } else {
    for (const auto& ep : ds.episodes) {
      const Demographics demo = demographics_of(ep.patient_id);
      for (size_t i = ep.begin; i < ep.end; ++i) {
        const Step& s = ds.steps[i];
        json obj;
        obj["patient_id"] = ep.patient_id;
        obj["episode_id"] = ep.id;
        obj["t"] = s.t;
        obj["action"] = s.action;
        obj["reward"] = s.reward;
        obj["harm"] = s.harm;
        obj["age_bin"] = to_string(demo.age);
        obj["sex"] = to_string(demo.sex);
        obj["race"] = to_string(demo.race);
        json state = json::object();
        const auto values = ds.state(i);
        for (size_t f = 0; f < values.size(); ++f) state[ds.feature_names[f]] = values[f];
        obj["state_json"] = std::move(state);
        out << obj.dump() << "\n";
      }
    }
  }
  if (!out) throw Error("failed writing file: " + path);
}

DemographicsTable load_demographics(const std::string& path, FileFormat format) {
  const std::string text = read_file(path);
  DemographicsTable table;
  std::map<std::string, int> best_rank;  // fewest Unknown fields seen per patient

  auto offer = [&](const std::string& patient, const Demographics& d) {
    if (patient.empty()) return;
    auto it = best_rank.find(patient);
    if (it == best_rank.end() || d.unknown_count() < it->second) {
      best_rank[patient] = d.unknown_count();
      table.rows[patient] = d;
    }
  };

  if (format == FileFormat::Csv) {
    const auto rows = csv::parse(text);
    if (rows.empty()) throw MissingRequiredColumnError("patient_id");
    std::unordered_map<std::string, size_t> col;
    for (size_t i = 0; i < rows[0].size(); ++i) col.emplace(sanitize_column_name(rows[0][i]), i);
    auto find_col = [&](std::initializer_list<const char*> names) -> std::optional<size_t> {
      for (const char* n : names) {
        auto it = col.find(n);
        if (it != col.end()) return it->second;
      }
      return std::nullopt;
    };
    const auto c_patient = find_col({"patient_id"});
    if (!c_patient) throw MissingRequiredColumnError("patient_id");
    const auto c_age = find_col({"age_bin", "age"});
    const auto c_sex = find_col({"sex"});
    const auto c_race = find_col({"race"});

    const std::string empty_cell;
    for (size_t r = 1; r < rows.size(); ++r) {
      auto cell = [&](std::optional<size_t> idx) -> const std::string& {
        return idx && *idx < rows[r].size() ? rows[r][*idx] : empty_cell;
      };
      Demographics d;
      d.age = parse_age_bin(cell(c_age));
      d.sex = parse_sex(cell(c_sex));
      d.race = parse_race(cell(c_race));
      offer(cell(c_patient), d);
    }
  } else {
    bool patient_key_seen = false;
    size_t pos = 0;
    while (pos <= text.size()) {
      const size_t nl = text.find('\n', pos);
      std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
      pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
      if (trim(line).empty()) continue;
      const json obj = json::parse(line, nullptr, false);
      if (!obj.is_object()) continue;

      std::string patient;
      Demographics d;
      for (const auto& [key, value] : obj.items()) {
        const std::string k = sanitize_column_name(key);
        if (k == "patient_id") {
          if (auto id = json_as_id(value)) {
            patient = *id;
            patient_key_seen = true;
          }
        } else if (k == "age_bin" || k == "age") {
          if (value.is_number()) {
            d.age = bin_age(value.get<double>());
          } else if (value.is_string()) {
            d.age = parse_age_bin(value.get<std::string>());
          }
        } else if (k == "sex") {
          if (value.is_string()) d.sex = parse_sex(value.get<std::string>());
        } else if (k == "race") {
          if (value.is_string()) d.race = parse_race(value.get<std::string>());
        }
      }
      offer(patient, d);
    }
    if (!patient_key_seen && table.rows.empty()) throw MissingRequiredColumnError("patient_id");
  }
  return table;
}

Dataset merge_demographics(Dataset ds, const std::vector<DemographicsTable>& sources) {
  std::map<std::string, Demographics> merged;
  for (const auto& ep : ds.episodes) {
    if (merged.count(ep.patient_id)) continue;
    Demographics best;  // all-Unknown default
    int best_unknowns = 4;
    for (const auto& source : sources) {
      auto it = source.rows.find(ep.patient_id);
      if (it == source.rows.end()) continue;
      if (it->second.unknown_count() < best_unknowns) {
        best = it->second;
        best_unknowns = it->second.unknown_count();
      }
    }
    merged[ep.patient_id] = best;
  }
  ds.demographics = std::move(merged);
  return ds;
}

SplitResult temporal_split(const Dataset& ds, const SplitSpec& spec) {
  for (double f : {spec.train_frac, spec.calib_frac, spec.test_frac}) {
    if (!(f > 0.0 && f < 1.0)) throw InvalidConfigError("split fractions must lie in (0,1)");
  }
  if (std::abs(spec.train_frac + spec.calib_frac + spec.test_frac - 1.0) > 1e-9) {
    throw InvalidConfigError("split fractions must sum to 1");
  }

  const size_t e = ds.episodes.size();
  const auto n_train = static_cast<size_t>(std::floor(spec.train_frac * static_cast<double>(e) + 1e-9));
  const auto n_calib = static_cast<size_t>(std::floor(spec.calib_frac * static_cast<double>(e) + 1e-9));
  if (n_train == 0 || n_calib == 0 || n_train + n_calib >= e) {
    throw InsufficientEpisodesError("cannot split " + std::to_string(e) +
                                    " episodes into non-empty train/calib/test");
  }

  std::vector<size_t> indices(e);
  std::iota(indices.begin(), indices.end(), size_t{0});
  SplitResult result;
  result.train = subset_episodes(ds, {indices.begin(), indices.begin() + n_train});
  result.calib = subset_episodes(ds, {indices.begin() + n_train, indices.begin() + n_train + n_calib});
  result.test = subset_episodes(ds, {indices.begin() + n_train + n_calib, indices.end()});
  return result;
}

Dataset subset_episodes(const Dataset& ds, const std::vector<size_t>& episode_indices) {
  Dataset out;
  out.feature_names = ds.feature_names;
  out.action_count = ds.action_count;

  const size_t d = ds.feature_names.size();
  size_t total = 0;
  for (size_t idx : episode_indices) total += ds.episodes[idx].length();
  out.steps.reserve(total);
  out.state_data.reserve(total * d);

  for (size_t idx : episode_indices) {
    const Episode& ep = ds.episodes[idx];
    Episode copy = ep;
    copy.begin = out.steps.size();
    copy.end = copy.begin + ep.length();
    out.steps.insert(out.steps.end(), ds.steps.begin() + ep.begin, ds.steps.begin() + ep.end);
    out.state_data.insert(out.state_data.end(), ds.state_data.begin() + ep.begin * d,
                          ds.state_data.begin() + ep.end * d);
    out.episodes.push_back(std::move(copy));

    auto it = ds.demographics.find(ep.patient_id);
    if (it != ds.demographics.end()) out.demographics.emplace(it->first, it->second);
  }
  return out;
}

AgeBin bin_age(double age) {
  if (!std::isfinite(age) || age < 0.0) return AgeBin::Unknown;
  if (age < 35.0) return AgeBin::Under35;
  if (age < 50.0) return AgeBin::From35To49;
  if (age < 65.0) return AgeBin::From50To64;
  return AgeBin::Plus65;
}

AgeBin parse_age_bin(const std::string& raw) {
  if (const auto numeric = parse_double_cell(raw)) return bin_age(*numeric);
  const std::string s = sanitize_column_name(trim(raw));
  if (s == "under_35" || s == "under35" || s == "below_35" || s == "less_than_35" || s == "lt_35" ||
      s == "0_34" || s == "35") {
    return AgeBin::Under35;  // "35" arises from sanitized "<35"
  }
  if (s == "35_49" || s == "35_to_49" || s == "35to49") return AgeBin::From35To49;
  if (s == "50_64" || s == "50_to_64" || s == "50to64") return AgeBin::From50To64;
  if (s == "65_plus" || s == "65" || s == "over_65" || s == "over65" || s == "65_and_over" ||
      s == "ge_65") {
    return AgeBin::Plus65;  // "65" arises from sanitized "65+"
  }
  return AgeBin::Unknown;
}

Sex parse_sex(const std::string& raw) {
  const std::string s = sanitize_column_name(trim(raw));
  if (s == "female" || s == "f") return Sex::Female;
  if (s == "male" || s == "m") return Sex::Male;
  return Sex::Unknown;
}

Race parse_race(const std::string& raw) {
  const std::string s = sanitize_column_name(trim(raw));
  if (s == "black" || s == "african_american" || s == "black_or_african_american") return Race::Black;
  if (s == "white" || s == "caucasian") return Race::White;
  if (s == "asian") return Race::Asian;
  if (s == "hispanic" || s == "latino" || s == "latina" || s == "latinx" || s == "hispanic_or_latino") {
    return Race::Hispanic;
  }
  if (s == "other" || s == "multiracial" || s == "mixed" || s == "two_or_more" ||
      s == "native_american" || s == "american_indian" || s == "pacific_islander") {
    return Race::Other;
  }
  return Race::Unknown;
}

}  // namespace haco
