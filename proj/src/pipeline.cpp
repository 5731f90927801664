#include "haco/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "haco/audit.hpp"
#include "haco/conformal_gate.hpp"
#include "haco/csv.hpp"
#include "haco/errors.hpp"
#include "haco/fqe.hpp"
#include "haco/policy_learning.hpp"
#include "haco/risk_model.hpp"
#include "haco/rng.hpp"
#include "haco/sha256.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace haco {

namespace {

// Stage-seed tags so each randomized stage draws from its own stream.
constexpr uint64_t kTagFqeSubset = 11;
constexpr uint64_t kTagAudit = 12;

void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw InvalidConfigError("config: unknown key \"" + it.key() + "\" in " + where);
  }
}

FileFormat infer_format(const std::string& path) {
  return path.size() >= 6 && path.substr(path.size() - 6) == ".jsonl" ? FileFormat::Jsonl
                                                                      : FileFormat::Csv;
}

template <typename T, size_t N>
void parse_level_array(const json& j, const std::string& where, std::array<T, N>& out,
                       const std::function<int(const std::string&)>& level_of) {
  if (j.is_array()) {
    if (j.size() != N)
      throw InvalidConfigError("config: " + where + " must have " + std::to_string(N) +
                               " entries");
    for (size_t i = 0; i < N; ++i) out[i] = j[i].get<double>();
    return;
  }
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const int idx = level_of(it.key());
      out[static_cast<size_t>(idx)] = it.value().get<double>();
    }
    return;
  }
  throw InvalidConfigError("config: " + where + " must be an array or name-keyed object");
}

SynthConfig parse_synth(const json& j, uint64_t default_seed) {
  check_keys(j,
             {"n_patients", "horizon", "action_count", "state_dim", "harm_base_rate",
              "risk_signal_strength", "behavior_signal_strength", "demographic_mix",
              "race_risk_offsets", "race_reward_offsets", "seed"},
             "synth");
  SynthConfig sc;
  sc.n_patients = j.value("n_patients", sc.n_patients);
  sc.horizon = j.value("horizon", sc.horizon);
  sc.action_count = j.value("action_count", sc.action_count);
  sc.state_dim = j.value("state_dim", sc.state_dim);
  sc.harm_base_rate = j.value("harm_base_rate", sc.harm_base_rate);
  sc.risk_signal_strength = j.value("risk_signal_strength", sc.risk_signal_strength);
  sc.behavior_signal_strength = j.value("behavior_signal_strength", sc.behavior_signal_strength);
  sc.seed = j.value("seed", default_seed);
  if (j.contains("demographic_mix")) {
    const json& m = j["demographic_mix"];
    check_keys(m, {"age", "sex", "race"}, "synth.demographic_mix");
    if (m.contains("age")) {
      if (!m["age"].is_array() || m["age"].size() != kAgeBinCount)
        throw InvalidConfigError("config: demographic_mix.age needs 5 weights");
      for (size_t i = 0; i < kAgeBinCount; ++i) sc.demographic_mix.age[i] = m["age"][i].get<double>();
    }
    if (m.contains("sex")) {
      if (!m["sex"].is_array() || m["sex"].size() != kSexCount)
        throw InvalidConfigError("config: demographic_mix.sex needs 3 weights");
      for (size_t i = 0; i < kSexCount; ++i) sc.demographic_mix.sex[i] = m["sex"][i].get<double>();
    }
    if (m.contains("race")) {
      if (!m["race"].is_array() || m["race"].size() != kRaceCount)
        throw InvalidConfigError("config: demographic_mix.race needs 6 weights");
      for (size_t i = 0; i < kRaceCount; ++i)
        sc.demographic_mix.race[i] = m["race"][i].get<double>();
    }
  }
  auto race_index = [](const std::string& name) {
    const Race r = parse_race(name);
    if (r == Race::Unknown && sanitize_column_name(name) != "unknown")
      throw InvalidConfigError("config: unknown race level \"" + name + "\"");
    return static_cast<int>(r);
  };
  if (j.contains("race_risk_offsets"))
    parse_level_array(j["race_risk_offsets"], "race_risk_offsets", sc.race_risk_offsets,
                      race_index);
  if (j.contains("race_reward_offsets"))
    parse_level_array(j["race_reward_offsets"], "race_reward_offsets", sc.race_reward_offsets,
                      race_index);
  return sc;
}

json synth_echo(const SynthConfig& sc) {
  json j;
  j["n_patients"] = sc.n_patients;
  j["horizon"] = sc.horizon;
  j["action_count"] = sc.action_count;
  j["state_dim"] = sc.state_dim;
  j["harm_base_rate"] = sc.harm_base_rate;
  j["risk_signal_strength"] = sc.risk_signal_strength;
  j["behavior_signal_strength"] = sc.behavior_signal_strength;
  j["seed"] = sc.seed;
  j["demographic_mix"] = {{"age", sc.demographic_mix.age},
                          {"sex", sc.demographic_mix.sex},
                          {"race", sc.demographic_mix.race}};
  j["race_risk_offsets"] = sc.race_risk_offsets;
  j["race_reward_offsets"] = sc.race_reward_offsets;
  return j;
}

json config_echo(const PipelineConfig& cfg) {
  json j;
  if (cfg.input) {
    j["input"] = {{"path", cfg.input->path},
                  {"format", to_string(cfg.input->format)},
                  {"action_count", cfg.input->action_count}};
  }
  if (cfg.synth) j["synth"] = synth_echo(*cfg.synth);
  j["split"] = {{"train", cfg.split.train_frac},
                {"calib", cfg.split.calib_frac},
                {"test", cfg.split.test_frac}};
  j["alpha"] = cfg.alpha;
  j["alphas_for_curve"] = cfg.alphas_for_curve;
  j["risk"] = {{"use_state", cfg.risk.use_state},
               {"l2_lambda", cfg.risk.l2_lambda},
               {"max_iter", cfg.risk.max_iter},
               {"tol", cfg.risk.tol}};
  j["policy"] = {{"l2_lambda", cfg.policy.l2_lambda},
                 {"max_iter", cfg.policy.max_iter},
                 {"tol", cfg.policy.tol},
                 {"bc_train_frac", cfg.policy.bc_train_frac}};
  j["fqe"] = {{"gamma", cfg.fqe.gamma},
              {"ridge_lambda", cfg.fqe.ridge_lambda},
              {"max_iters", cfg.fqe.max_iters},
              {"tol", cfg.fqe.tol},
              {"v0_mode", cfg.fqe.v0_mode},
              {"subset_rows", cfg.fqe.subset_rows}};
  j["audit"] = {{"B_ci", cfg.audit.B_ci},
                {"B_p", cfg.audit.B_p},
                {"bins", cfg.audit.bins},
                {"z", cfg.audit.z},
                {"gamma", cfg.audit.gamma}};
  j["demographics_files"] = cfg.demographics_files;
  json ext = json::array();
  for (const auto& e : cfg.external_policies) ext.push_back({{"name", e.name}, {"path", e.path}});
  j["external_policies"] = std::move(ext);
  j["save_dataset"] = cfg.save_dataset;
  j["seed"] = cfg.seed;
  return j;
}

class ArtifactWriter {
 public:
  explicit ArtifactWriter(fs::path dir) : dir_(std::move(dir)) {}

  void write_text(const std::string& rel, const std::string& content) {
    std::ofstream out(dir_ / rel, std::ios::binary);
    if (!out) throw Error("cannot write " + (dir_ / rel).string());
    out << content;
    if (!out) throw Error("failed writing " + (dir_ / rel).string());
    note(rel);
  }
  void write_json(const std::string& rel, const json& j) { write_text(rel, j.dump(2) + "\n"); }
  void note(const std::string& rel) { rels_.push_back(rel); }
  std::string abs(const std::string& rel) const { return (dir_ / rel).string(); }

  // Sorted unique relative paths of everything written so far.
  std::vector<std::string> listing() const {
    std::vector<std::string> out = rels_;
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

 private:
  fs::path dir_;
  std::vector<std::string> rels_;
};

std::string csv_doc(const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  for (const auto& row : rows) {
    out += csv::join_row(row);
    out += "\n";
  }
  return out;
}

std::vector<uint8_t> harm_labels(const Dataset& ds) {
  std::vector<uint8_t> out;
  out.reserve(ds.size());
  for (const Step& s : ds.steps) out.push_back(s.harm ? 1 : 0);
  return out;
}

double harm_rate(const std::vector<uint8_t>& labels) {
  if (labels.empty()) return 0.0;
  double s = 0.0;
  for (uint8_t v : labels) s += v;
  return s / static_cast<double>(labels.size());
}

json impact_json(const SafetyImpact& si, size_t n_steps, size_t n_safe) {
  json j;
  j["harm_rate_all"] = si.harm_rate_all;
  j["harm_rate_safe"] = si.harm_rate_safe;
  j["absolute_reduction"] = si.absolute_reduction;
  j["relative_reduction"] = si.relative_reduction ? json(*si.relative_reduction) : json(nullptr);
  j["safe_fraction"] = si.safe_fraction;
  j["n_steps"] = n_steps;
  j["n_safe"] = n_safe;
  return j;
}

// Episodes to keep for FQE: proportional draws from episode-length quartiles
// until the step budget is met, seeded and order-independent.
std::vector<size_t> stratified_episode_subset(const Dataset& ds, size_t subset_rows,
                                              uint64_t seed) {
  const size_t n_ep = ds.episodes.size();
  std::vector<size_t> all(n_ep);
  std::iota(all.begin(), all.end(), size_t{0});
  if (ds.size() <= subset_rows) return all;

  std::vector<size_t> order = all;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    const size_t la = ds.episodes[a].length();
    const size_t lb = ds.episodes[b].length();
    if (la != lb) return la < lb;
    return a < b;
  });

  std::vector<std::vector<size_t>> quartile(4);
  std::vector<size_t> q_steps(4, 0);
  for (size_t r = 0; r < n_ep; ++r) {
    const size_t q = std::min<size_t>(3, 4 * r / n_ep);
    quartile[q].push_back(order[r]);
    q_steps[q] += ds.episodes[order[r]].length();
  }

  std::vector<size_t> chosen;
  for (size_t q = 0; q < 4; ++q) {
    if (quartile[q].empty()) continue;
    const double share = static_cast<double>(q_steps[q]) / static_cast<double>(ds.size());
    const auto target = static_cast<size_t>(share * static_cast<double>(subset_rows));
    Rng rng(Rng::derive(seed, q));
    std::vector<size_t>& pool = quartile[q];
    for (size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
    size_t taken = 0;
    for (size_t e : pool) {
      const size_t len = ds.episodes[e].length();
      if (taken + len > target) continue;
      chosen.push_back(e);
      taken += len;
    }
  }
  if (chosen.empty()) chosen.push_back(order[0]);  // never return an empty evaluation set
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

V0Mode parse_v0_mode(const std::string& s) {
  if (s == "expectation") return V0Mode::Expectation;
  if (s == "greedy") return V0Mode::Greedy;
  throw InvalidConfigError("config: fqe.v0_mode must be \"expectation\" or \"greedy\"");
}

// Demographic level of one episode's patient, per audit's folding rules.
struct StepLevels {
  std::vector<int> age;   // per step
  std::vector<int> sex;   // Unknown folded into Male
  std::vector<int> race;
};

StepLevels step_levels(const Dataset& ds) {
  StepLevels out;
  out.age.assign(ds.size(), static_cast<int>(AgeBin::Unknown));
  out.sex.assign(ds.size(), static_cast<int>(Sex::Male));
  out.race.assign(ds.size(), static_cast<int>(Race::Unknown));
  const Demographics unknown;
  for (const Episode& ep : ds.episodes) {
    const auto it = ds.demographics.find(ep.patient_id);
    const Demographics& d = it == ds.demographics.end() ? unknown : it->second;
    const int age = static_cast<int>(d.age);
    const int sex =
        d.sex == Sex::Unknown ? static_cast<int>(Sex::Male) : static_cast<int>(d.sex);
    const int race = static_cast<int>(d.race);
    for (size_t i = ep.begin; i < ep.end; ++i) {
      out.age[i] = age;
      out.sex[i] = sex;
      out.race[i] = race;
    }
  }
  return out;
}

}  // namespace

PipelineConfig parse_pipeline_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw InvalidConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  try {
    check_keys(j,
               {"input", "synth", "split", "alpha", "alphas_for_curve", "risk", "policy", "fqe",
                "audit", "demographics_files", "external_policies", "save_dataset", "seed",
                "output_dir", "threads"},
               "the top level");
    PipelineConfig cfg;
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("input")) {
      const json& in = j["input"];
      check_keys(in, {"path", "format", "action_count"}, "input");
      InputConfig ic;
      ic.path = in.at("path").get<std::string>();
      ic.format = in.contains("format") ? file_format_from_string(in["format"].get<std::string>())
                                        : infer_format(ic.path);
      ic.action_count = in.at("action_count").get<int>();
      cfg.input = std::move(ic);
    }
    if (j.contains("synth")) cfg.synth = parse_synth(j["synth"], cfg.seed);
    if (j.contains("split")) {
      const json& sp = j["split"];
      check_keys(sp, {"train", "calib", "test"}, "split");
      cfg.split.train_frac = sp.value("train", cfg.split.train_frac);
      cfg.split.calib_frac = sp.value("calib", cfg.split.calib_frac);
      cfg.split.test_frac = sp.value("test", cfg.split.test_frac);
    }
    cfg.alpha = j.value("alpha", cfg.alpha);
    if (j.contains("alphas_for_curve"))
      cfg.alphas_for_curve = j["alphas_for_curve"].get<std::vector<double>>();
    if (j.contains("risk")) {
      const json& r = j["risk"];
      check_keys(r, {"use_state", "l2_lambda", "max_iter", "tol"}, "risk");
      cfg.risk.use_state = r.value("use_state", cfg.risk.use_state);
      cfg.risk.l2_lambda = r.value("l2_lambda", cfg.risk.l2_lambda);
      cfg.risk.max_iter = r.value("max_iter", cfg.risk.max_iter);
      cfg.risk.tol = r.value("tol", cfg.risk.tol);
    }
    if (j.contains("policy")) {
      const json& p = j["policy"];
      check_keys(p, {"l2_lambda", "max_iter", "tol", "bc_train_frac"}, "policy");
      cfg.policy.l2_lambda = p.value("l2_lambda", cfg.policy.l2_lambda);
      cfg.policy.max_iter = p.value("max_iter", cfg.policy.max_iter);
      cfg.policy.tol = p.value("tol", cfg.policy.tol);
      cfg.policy.bc_train_frac = p.value("bc_train_frac", cfg.policy.bc_train_frac);
    }
    if (j.contains("fqe")) {
      const json& f = j["fqe"];
      check_keys(f, {"gamma", "ridge_lambda", "max_iters", "tol", "v0_mode", "subset_rows"},
                 "fqe");
      cfg.fqe.gamma = f.value("gamma", cfg.fqe.gamma);
      cfg.fqe.ridge_lambda = f.value("ridge_lambda", cfg.fqe.ridge_lambda);
      cfg.fqe.max_iters = f.value("max_iters", cfg.fqe.max_iters);
      cfg.fqe.tol = f.value("tol", cfg.fqe.tol);
      cfg.fqe.v0_mode = f.value("v0_mode", cfg.fqe.v0_mode);
      cfg.fqe.subset_rows = f.value("subset_rows", cfg.fqe.subset_rows);
    }
    if (j.contains("audit")) {
      const json& a = j["audit"];
      check_keys(a, {"B_ci", "B_p", "bins", "z", "gamma"}, "audit");
      cfg.audit.B_ci = a.value("B_ci", cfg.audit.B_ci);
      cfg.audit.B_p = a.value("B_p", cfg.audit.B_p);
      cfg.audit.bins = a.value("bins", cfg.audit.bins);
      cfg.audit.z = a.value("z", cfg.audit.z);
      cfg.audit.gamma = a.value("gamma", cfg.audit.gamma);
    }
    if (j.contains("demographics_files"))
      cfg.demographics_files = j["demographics_files"].get<std::vector<std::string>>();
    if (j.contains("external_policies")) {
      for (const json& e : j["external_policies"]) {
        check_keys(e, {"name", "path"}, "external_policies");
        cfg.external_policies.push_back(
            {e.at("name").get<std::string>(), e.at("path").get<std::string>()});
      }
    }
    cfg.save_dataset = j.value("save_dataset", cfg.save_dataset);
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    cfg.threads = j.value("threads", cfg.threads);

    // Cross-field checks, so bad configs fail before any stage runs.
    if (cfg.input.has_value() == cfg.synth.has_value())
      throw InvalidConfigError("config: exactly one of input/synth must be present");
    if (cfg.input && cfg.input->action_count < 2)
      throw InvalidConfigError("config: input.action_count must be >= 2");
    if (!(cfg.alpha > 0.0) || !(cfg.alpha < 1.0))
      throw InvalidConfigError("config: alpha must lie in (0, 1)");
    if (cfg.alphas_for_curve.empty())
      throw InvalidConfigError("config: alphas_for_curve must be non-empty");
    for (double a : cfg.alphas_for_curve)
      if (!(a > 0.0) || !(a < 1.0))
        throw InvalidConfigError("config: alphas_for_curve entries must lie in (0, 1)");
    std::sort(cfg.alphas_for_curve.begin(), cfg.alphas_for_curve.end());
    cfg.alphas_for_curve.erase(
        std::unique(cfg.alphas_for_curve.begin(), cfg.alphas_for_curve.end()),
        cfg.alphas_for_curve.end());
    parse_v0_mode(cfg.fqe.v0_mode);
    if (cfg.fqe.subset_rows == 0)
      throw InvalidConfigError("config: fqe.subset_rows must be >= 1");
    if (cfg.audit.bins < 1) throw InvalidConfigError("config: audit.bins must be >= 1");
    if (cfg.output_dir.empty()) throw InvalidConfigError("config: output_dir must be non-empty");
    if (cfg.threads < 1) throw InvalidConfigError("config: threads must be >= 1");
    std::set<std::string> names;
    for (const auto& e : cfg.external_policies)
      if (!names.insert(e.name).second)
        throw InvalidConfigError("config: duplicate external policy name \"" + e.name + "\"");
    return cfg;
  } catch (const json::exception& e) {
    throw InvalidConfigError(std::string("config: ") + e.what());
  }
}

PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_pipeline_config(buf.str());
}

namespace {

void write_manifest(ArtifactWriter& w, const PipelineConfig& cfg, const std::string& failed_stage,
                    const std::string& error) {
  json m;
  m["status"] = failed_stage.empty() ? "ok" : "failed";
  if (!failed_stage.empty()) {
    m["failed_stage"] = failed_stage;
    m["error"] = error;
  }
  m["seed"] = cfg.seed;
  m["config"] = config_echo(cfg);
  json arts = json::array();
  for (const std::string& rel : w.listing()) {
    const std::string abs = w.abs(rel);
    json a;
    a["path"] = rel;
    a["sha256"] = sha256_file_hex(abs);
    a["bytes"] = static_cast<uint64_t>(fs::file_size(abs));
    arts.push_back(std::move(a));
  }
  m["artifacts"] = std::move(arts);
  std::ofstream out(w.abs("run_manifest.json"), std::ios::binary);
  if (!out) throw Error("cannot write run manifest");
  out << m.dump(2) << "\n";
}

}  // namespace

RunOutcome run_pipeline(const PipelineConfig& cfg) {
  if (cfg.input.has_value() == cfg.synth.has_value())
    throw InvalidConfigError("config: exactly one of input/synth must be present");
  const fs::path dir(cfg.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create output directory " + cfg.output_dir);
  ArtifactWriter w(dir);

  std::string stage = "data";
  try {
    // ---- data: generate or load, then attach demographics -----------------
    Dataset ds;
    LoadReport report;
    if (cfg.synth) {
      GenerationResult gen = generate_dataset(*cfg.synth, cfg.threads);
      ds = std::move(gen.dataset);
      report.rows_read = ds.size();
      if (cfg.save_dataset) {
        save_trajectories(ds, w.abs("dataset.csv"), FileFormat::Csv);
        w.note("dataset.csv");
        save_ground_truth(gen.mdp, w.abs("ground_truth.json"));
        w.note("ground_truth.json");
      }
    } else {
      LoadResult lr = load_trajectories(cfg.input->path, cfg.input->format,
                                        cfg.input->action_count);
      ds = std::move(lr.dataset);
      report = lr.report;
      if (cfg.save_dataset) {
        save_trajectories(ds, w.abs("dataset.csv"), FileFormat::Csv);
        w.note("dataset.csv");
      }
    }
    if (!cfg.demographics_files.empty()) {
      std::vector<DemographicsTable> sources;
      DemographicsTable embedded;
      embedded.rows = ds.demographics;
      sources.push_back(std::move(embedded));
      for (const std::string& path : cfg.demographics_files)
        sources.push_back(load_demographics(path, infer_format(path)));
      ds = merge_demographics(std::move(ds), sources);
    }

    // ---- split -------------------------------------------------------------
    stage = "split";
    SplitResult split = temporal_split(ds, cfg.split);
    {
      json ls;
      ls["rows_read"] = report.rows_read;
      ls["rows_dropped"] = report.rows_dropped;
      ls["drop_reasons"] = report.drop_reasons;
      ls["warnings"] = report.warnings;
      ls["harm_derived_from_reward"] = report.harm_derived_from_reward;
      ls["steps"] = ds.size();
      ls["episodes"] = ds.episodes.size();
      ls["patients"] = ds.n_patients();
      ls["feature_count"] = ds.feature_names.size();
      ls["action_count"] = ds.action_count;
      ls["split"] = {{"train_episodes", split.train.episodes.size()},
                     {"calib_episodes", split.calib.episodes.size()},
                     {"test_episodes", split.test.episodes.size()},
                     {"train_steps", split.train.size()},
                     {"calib_steps", split.calib.size()},
                     {"test_steps", split.test.size()}};
      w.write_json("load_summary.json", ls);
    }

    // ---- risk model ----------------------------------------------------------
    stage = "risk";
    RiskFitOptions ropts;
    ropts.use_state = cfg.risk.use_state;
    ropts.l2_lambda = cfg.risk.l2_lambda;
    ropts.max_iter = cfg.risk.max_iter;
    ropts.tol = cfg.risk.tol;
    const RiskModel model = fit_risk_model(split.train, ropts);
    save_risk_model(model, w.abs("risk_model.json"));
    w.note("risk_model.json");

    const std::vector<double> test_scores = score_dataset(model, split.test);
    const std::vector<uint8_t> test_harm = harm_labels(split.test);
    std::optional<double> auc_test;
    try {
      auc_test = auc(test_scores, test_harm);
    } catch (const DegenerateLabelsError&) {
      // single-class test slice: discrimination is undefined, report null
    }
    {
      json rm;
      rm["auc_test"] = auc_test ? json(*auc_test) : json(nullptr);
      rm["n_train_steps"] = split.train.size();
      rm["n_test_steps"] = split.test.size();
      rm["harm_rate_train"] = harm_rate(harm_labels(split.train));
      rm["harm_rate_test"] = harm_rate(test_harm);
      rm["use_state"] = cfg.risk.use_state;
      rm["l2_lambda"] = cfg.risk.l2_lambda;
      w.write_json("risk_metrics.json", rm);
    }

    // ---- conformal calibration ----------------------------------------------
    stage = "calibrate";
    const std::vector<double> calib_scores = score_dataset(model, split.calib);
    const CalibrationResult cal = calibrate_threshold(calib_scores, cfg.alpha);
    {
      json cj;
      cj["alpha"] = cal.alpha;
      cj["tau"] = cal.tau;
      cj["calib_size"] = cal.calib_size;
      cj["rank_used"] = cal.rank_used;
      cj["guarantee_degraded"] = cal.guarantee_degraded;
      w.write_json("calibration.json", cj);
    }
    const std::vector<CoveragePoint> curve =
        coverage_curve(calib_scores, cfg.alphas_for_curve, test_scores);
    {
      std::vector<std::vector<std::string>> rows;
      rows.push_back({"alpha", "tau", "safe_fraction"});
      for (const CoveragePoint& p : curve)
        rows.push_back({format_double(p.alpha), format_double(p.tau),
                        format_double(p.safe_fraction)});
      w.write_text("coverage_curve.csv", csv_doc(rows));
    }

    // ---- gate -----------------------------------------------------------------
    stage = "gate";
    const std::vector<uint8_t> test_mask = mask_from_scores(test_scores, cal.tau);
    const SafetyImpact si_test = safety_impact(test_harm, test_mask);
    const std::vector<double> full_scores = score_dataset(model, ds);
    const std::vector<uint8_t> full_mask = mask_from_scores(full_scores, cal.tau);
    const std::vector<uint8_t> full_harm = harm_labels(ds);
    const SafetyImpact si_full = safety_impact(full_harm, full_mask);
    {
      auto count = [](const std::vector<uint8_t>& mask) {
        return static_cast<size_t>(std::count(mask.begin(), mask.end(), uint8_t{1}));
      };
      json sj;
      sj["alpha"] = cfg.alpha;
      sj["tau"] = cal.tau;
      sj["test"] = impact_json(si_test, test_mask.size(), count(test_mask));
      sj["full"] = impact_json(si_full, full_mask.size(), count(full_mask));
      w.write_json("safety_impact.json", sj);
    }

    // ---- policies ---------------------------------------------------------------
    stage = "policies";
    const std::vector<double> train_scores = score_dataset(model, split.train);
    const std::vector<uint8_t> train_mask = mask_from_scores(train_scores, cal.tau);
    PolicyFitOptions popts;
    popts.l2_lambda = cfg.policy.l2_lambda;
    popts.max_iter = cfg.policy.max_iter;
    popts.tol = cfg.policy.tol;
    const SoftmaxPolicy haco_policy = fit_preference_policy(split.train, train_mask, popts);
    save_policy(haco_policy, w.abs("haco_policy.json"));
    w.note("haco_policy.json");
    const BcResult bc = fit_behavior_cloning(split.train, BcSplit{cfg.policy.bc_train_frac}, popts);
    save_policy(bc.policy, w.abs("bc_policy.json"));
    w.note("bc_policy.json");

    // ---- fqe ------------------------------------------------------------------
    stage = "fqe";
    const std::vector<size_t> chosen =
        stratified_episode_subset(split.test, cfg.fqe.subset_rows, Rng::derive(cfg.seed, kTagFqeSubset));
    const Dataset eval_ds = subset_episodes(split.test, chosen);
    // Rows of the evaluation subset, as global indices into the full dataset
    // (train, calib, test slices are contiguous and in order).
    std::vector<size_t> eval_to_full;
    {
      const size_t test_offset = split.train.size() + split.calib.size();
      for (size_t e : chosen)
        for (size_t i = split.test.episodes[e].begin; i < split.test.episodes[e].end; ++i)
          eval_to_full.push_back(test_offset + i);
    }
    const V0Mode mode = parse_v0_mode(cfg.fqe.v0_mode);
    FqeOptions fopts;
    fopts.gamma = cfg.fqe.gamma;
    fopts.ridge_lambda = cfg.fqe.ridge_lambda;
    fopts.max_iters = cfg.fqe.max_iters;
    fopts.tol = cfg.fqe.tol;
    json fqe_rows = json::array();
    auto eval_one = [&](const std::string& name, const Policy& pol) {
      const LinearQ q = fit_fqe(eval_ds, pol, fopts);
      const FQEResult r = estimate_v0(q, eval_ds, pol, mode);
      json row;
      row["policy_name"] = name;
      row["gamma"] = cfg.fqe.gamma;
      row["ridge_lambda"] = cfg.fqe.ridge_lambda;
      row["v0"] = r.v0;
      row["v0_mode"] = to_string(mode);
      row["converged"] = r.converged;
      row["iterations_run"] = q.iterations_run;
      row["n_episodes"] = eval_ds.episodes.size();
      fqe_rows.push_back(std::move(row));
      return r.v0;
    };
    eval_one("haco", haco_policy);
    eval_one("bc", bc.policy);
    for (const ExternalPolicySpec& spec : cfg.external_policies) {
      const ExternalPolicy full = load_external_policy(spec.path, ds.action_count, ds.size());
      std::vector<double> sub(eval_to_full.size() * static_cast<size_t>(ds.action_count));
      std::vector<double> buf(static_cast<size_t>(ds.action_count));
      for (size_t r = 0; r < eval_to_full.size(); ++r) {
        StepContext ctx;
        ctx.step_index = eval_to_full[r];
        full.action_probs(ctx, buf);
        std::copy(buf.begin(), buf.end(),
                  sub.begin() + static_cast<std::ptrdiff_t>(r * buf.size()));
      }
      const ExternalPolicy sliced(std::move(sub), ds.action_count);
      eval_one(spec.name, sliced);
    }
    {
      json pe;
      pe["bc_accuracy"] = bc.test_accuracy;
      pe["bc_test_steps"] = bc.n_test_steps;
      pe["fqe"] = std::move(fqe_rows);
      w.write_json("policy_eval.json", pe);
    }

    // ---- audit -------------------------------------------------------------------
    stage = "audit";
    const std::vector<double> returns = episode_returns(ds, cfg.audit.gamma);
    const std::vector<SubgroupSummary> audit_rows =
        subgroup_audit(ds, returns, cfg.audit.B_ci, cfg.audit.B_p, Rng::derive(cfg.seed, kTagAudit));
    {
      std::vector<std::vector<std::string>> rows;
      rows.push_back({"group", "level", "n", "mean", "ci_low", "ci_high"});
      for (const SubgroupSummary& s : audit_rows)
        rows.push_back({to_string(s.group), s.level, std::to_string(s.n), format_double(s.mean),
                        format_double(s.ci_low), format_double(s.ci_high)});
      w.write_text("audit_returns.csv", csv_doc(rows));
    }
    {
      std::vector<std::vector<std::string>> rows;
      rows.push_back({"group", "level", "reference", "p_value"});
      for (const SubgroupSummary& s : audit_rows)
        rows.push_back(
            {to_string(s.group), s.level, s.reference_level, format_double(s.p_value)});
      w.write_text("audit_pvalues.csv", csv_doc(rows));
    }
    {
      const std::vector<uint8_t> calib_harm = harm_labels(split.calib);
      const StepLevels levels = step_levels(split.calib);
      std::vector<std::vector<std::string>> rows;
      rows.push_back({"group", "level", "bin", "mean_predicted", "observed", "n", "wilson_low",
                      "wilson_high"});
      auto emit = [&](const std::string& group, const std::string& level,
                      const std::vector<size_t>& idx) {
        if (idx.size() < static_cast<size_t>(cfg.audit.bins)) return;
        std::vector<double> pred;
        std::vector<uint8_t> obs;
        pred.reserve(idx.size());
        obs.reserve(idx.size());
        for (size_t i : idx) {
          pred.push_back(calib_scores[i]);
          obs.push_back(calib_harm[i]);
        }
        for (const CalibrationBin& b : calibration_bins(pred, obs, cfg.audit.bins, cfg.audit.z))
          rows.push_back({group, level, std::to_string(b.bin_index),
                          format_double(b.mean_predicted), format_double(b.observed_rate),
                          std::to_string(b.n), format_double(b.wilson_low),
                          format_double(b.wilson_high)});
      };
      std::vector<size_t> everything(split.calib.size());
      std::iota(everything.begin(), everything.end(), size_t{0});
      emit("all", "all", everything);
      auto emit_dim = [&](const std::string& group, const std::vector<int>& level_of,
                          int level_count, const std::function<std::string(int)>& name_of) {
        for (int l = 0; l < level_count; ++l) {
          std::vector<size_t> idx;
          for (size_t i = 0; i < level_of.size(); ++i)
            if (level_of[i] == l) idx.push_back(i);
          if (!idx.empty()) emit(group, name_of(l), idx);
        }
      };
      emit_dim("age", levels.age, kAgeBinCount,
               [](int l) { return to_string(static_cast<AgeBin>(l)); });
      emit_dim("sex", levels.sex, kSexCount - 1,
               [](int l) { return to_string(static_cast<Sex>(l)); });
      emit_dim("race", levels.race, kRaceCount,
               [](int l) { return to_string(static_cast<Race>(l)); });
      w.write_text("calibration_bins.csv", csv_doc(rows));
    }

    // ---- plot data ------------------------------------------------------------
    stage = "plots";
    {
      // Score CDF with the threshold marked; rows ascend by score and the
      // last cumulative fraction is exactly 1.
      std::vector<double> s(calib_scores);
      std::sort(s.begin(), s.end());
      const size_t n = s.size();
      const size_t k = std::min<size_t>(1000, n);
      std::vector<std::tuple<double, double, int>> pts;
      pts.reserve(k + 1);
      for (size_t i = 1; i <= k; ++i) {
        const size_t idx = i * n / k - 1;
        pts.emplace_back(s[idx], static_cast<double>(idx + 1) / static_cast<double>(n), 0);
      }
      const auto le_tau =
          static_cast<size_t>(std::upper_bound(s.begin(), s.end(), cal.tau) - s.begin());
      pts.emplace_back(cal.tau, static_cast<double>(le_tau) / static_cast<double>(n), 1);
      std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) {
        return std::get<0>(a) < std::get<0>(b);
      });
      std::vector<std::vector<std::string>> rows;
      rows.push_back({"score", "cum_fraction", "is_threshold"});
      for (const auto& [score, cum, flag] : pts)
        rows.push_back({format_double(score), format_double(cum), std::to_string(flag)});
      w.write_text("score_cdf.csv", csv_doc(rows));
    }
    {
      // Action counts overall and per episode-length quartile.
      const size_t n_ep = ds.episodes.size();
      std::vector<size_t> order(n_ep);
      std::iota(order.begin(), order.end(), size_t{0});
      std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        const size_t la = ds.episodes[a].length();
        const size_t lb = ds.episodes[b].length();
        if (la != lb) return la < lb;
        return a < b;
      });
      std::vector<size_t> quart(n_ep, 0);
      for (size_t r = 0; r < n_ep; ++r) quart[order[r]] = std::min<size_t>(3, 4 * r / n_ep);
      const auto a_count = static_cast<size_t>(ds.action_count);
      std::vector<std::vector<size_t>> counts(5, std::vector<size_t>(a_count, 0));
      for (size_t e = 0; e < n_ep; ++e) {
        for (size_t i = ds.episodes[e].begin; i < ds.episodes[e].end; ++i) {
          const auto a = static_cast<size_t>(ds.steps[i].action);
          counts[0][a] += 1;
          counts[quart[e] + 1][a] += 1;
        }
      }
      const std::vector<std::string> scopes = {"all", "len_q1", "len_q2", "len_q3", "len_q4"};
      std::vector<std::vector<std::string>> rows;
      rows.push_back({"scope", "action", "count"});
      for (size_t scope = 0; scope < scopes.size(); ++scope)
        for (size_t a = 0; a < a_count; ++a)
          rows.push_back({scopes[scope], std::to_string(a), std::to_string(counts[scope][a])});
      w.write_text("action_histogram.csv", csv_doc(rows));
    }
    {
      // Value sensitivity: refit the gated policy at each α and re-run FQE.
      std::vector<std::vector<std::string>> rows;
      rows.push_back({"alpha", "tau", "safe_fraction", "v0"});
      for (double a : cfg.alphas_for_curve) {
        const CalibrationResult ca = calibrate_threshold(calib_scores, a);
        const std::vector<uint8_t> mask = mask_from_scores(train_scores, ca.tau);
        size_t safe_test = 0;
        for (double sc : test_scores) safe_test += sc < ca.tau ? 1 : 0;
        const double safe_fraction =
            static_cast<double>(safe_test) / static_cast<double>(test_scores.size());
        std::string v0_cell;
        try {
          const SoftmaxPolicy pol = fit_preference_policy(split.train, mask, popts);
          const LinearQ q = fit_fqe(eval_ds, pol, fopts);
          const FQEResult r = estimate_v0(q, eval_ds, pol, mode);
          v0_cell = format_double(r.v0);
        } catch (const EmptySafeSetError&) {
          // gate closed every action at this α; leave the value blank
        } catch (const SingleActionSafeSetError&) {
        }
        rows.push_back(
            {format_double(a), format_double(ca.tau), format_double(safe_fraction), v0_cell});
      }
      w.write_text("value_vs_alpha.csv", csv_doc(rows));
    }
  } catch (const std::exception& e) {
    write_manifest(w, cfg, stage, e.what());
    throw StageError(stage, e.what());
  }

  write_manifest(w, cfg, "", "");
  RunOutcome out;
  out.output_dir = cfg.output_dir;
  out.manifest_path = w.abs("run_manifest.json");
  out.artifacts = w.listing();
  return out;
}

}  // namespace haco
