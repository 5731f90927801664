#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "haco/audit.hpp"
#include "haco/csv.hpp"
#include "haco/errors.hpp"
#include "haco/fqe.hpp"
#include "haco/pipeline.hpp"
#include "haco/policy_learning.hpp"
#include "haco/synth_gen.hpp"
#include "haco/trajectory_store.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Precedence: --out flag, then HACO_OUTPUT_DIR, then the configured value.
std::string resolve_output_dir(const std::string& flag_value, const std::string& configured) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("HACO_OUTPUT_DIR"); env != nullptr && *env != '\0')
    return env;
  return configured;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw haco::Error("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Table 3-style display: values at the resampling floor print as "< 1/B".
std::string p_display(double p, int B) {
  const double floor = 1.0 / static_cast<double>(B);
  if (p <= floor) return "<" + haco::format_double(floor);
  return haco::format_double(p);
}

int cmd_run(const std::string& config_path, bool seed_set, uint64_t seed, int threads,
            const std::string& out_flag) {
  haco::PipelineConfig cfg = haco::load_pipeline_config(config_path);
  if (seed_set) {
    cfg.seed = seed;
    if (cfg.synth) cfg.synth->seed = seed;
  }
  if (threads > 0) cfg.threads = threads;
  cfg.output_dir = resolve_output_dir(out_flag, cfg.output_dir);
  const haco::RunOutcome outcome = haco::run_pipeline(cfg);
  std::cout << "wrote " << outcome.artifacts.size() << " artifacts to " << outcome.output_dir
            << "\nmanifest: " << outcome.manifest_path << "\n";
  return 0;
}

int cmd_synth(const std::string& config_path, bool seed_set, uint64_t seed, int threads,
              const std::string& out_flag, const std::string& format_name) {
  const std::string text = read_file(config_path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw haco::InvalidConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  haco::SynthConfig sc;
  std::string configured_dir = "synth_out";
  if (j.contains("synth")) {
    haco::PipelineConfig cfg = haco::parse_pipeline_config(text);
    if (!cfg.synth) throw haco::InvalidConfigError("config has no synth block");
    sc = *cfg.synth;
    configured_dir = cfg.output_dir;
  } else {
    // Bare generator config: the whole document is the synth block.
    json wrapped;
    wrapped["synth"] = j;
    haco::PipelineConfig cfg = haco::parse_pipeline_config(wrapped.dump());
    sc = *cfg.synth;
  }
  if (seed_set) sc.seed = seed;

  const std::string dir = resolve_output_dir(out_flag, configured_dir);
  fs::create_directories(dir);
  const haco::FileFormat fmt = haco::file_format_from_string(format_name);
  const std::string data_name =
      fmt == haco::FileFormat::Csv ? "dataset.csv" : "dataset.jsonl";

  const haco::GenerationResult gen = haco::generate_dataset(sc, threads > 0 ? threads : 1);
  haco::save_trajectories(gen.dataset, (fs::path(dir) / data_name).string(), fmt);
  haco::save_ground_truth(gen.mdp, (fs::path(dir) / "ground_truth.json").string());
  std::cout << "wrote " << gen.dataset.size() << " steps / " << gen.dataset.episodes.size()
            << " episodes to " << (fs::path(dir) / data_name).string() << "\n";
  return 0;
}

int cmd_audit(const std::string& dataset_path, const std::string& policy_path, double gamma,
              int B_ci, int B_p, bool seed_set, uint64_t seed, const std::string& out_flag) {
  const haco::SoftmaxPolicy policy = haco::load_softmax_policy(policy_path);
  const haco::LoadResult lr = haco::load_trajectories(
      dataset_path, haco::file_format_from_string(
                        dataset_path.size() >= 6 &&
                                dataset_path.substr(dataset_path.size() - 6) == ".jsonl"
                            ? "jsonl"
                            : "csv"),
      policy.action_count());
  const haco::Dataset& ds = lr.dataset;
  haco::validate_features(policy, ds);

  const uint64_t run_seed = seed_set ? seed : 0;
  const std::vector<double> returns = haco::episode_returns(ds, gamma);
  const std::vector<haco::SubgroupSummary> rows =
      haco::subgroup_audit(ds, returns, B_ci, B_p, run_seed);

  const std::string dir = resolve_output_dir(out_flag, "audit_out");
  fs::create_directories(dir);
  {
    std::ofstream out(fs::path(dir) / "audit_returns.csv");
    out << "group,level,n,mean,ci_low,ci_high\n";
    for (const auto& s : rows)
      out << haco::to_string(s.group) << "," << s.level << "," << s.n << ","
          << haco::format_double(s.mean) << "," << haco::format_double(s.ci_low) << ","
          << haco::format_double(s.ci_high) << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "audit_pvalues.csv");
    out << "group,level,reference,p_value\n";
    for (const auto& s : rows)
      out << haco::to_string(s.group) << "," << s.level << "," << s.reference_level << ","
          << haco::format_double(s.p_value) << "\n";
  }

  haco::FqeOptions fopts;  // defaults
  const haco::LinearQ q = haco::fit_fqe(ds, policy, fopts);
  const haco::FQEResult fr = haco::estimate_v0(q, ds, policy, haco::V0Mode::Expectation);
  {
    json pe;
    json row;
    row["policy_name"] = fs::path(policy_path).stem().string();
    row["gamma"] = fopts.gamma;
    row["ridge_lambda"] = fopts.ridge_lambda;
    row["v0"] = fr.v0;
    row["v0_mode"] = haco::to_string(haco::V0Mode::Expectation);
    row["converged"] = fr.converged;
    row["iterations_run"] = q.iterations_run;
    row["n_episodes"] = ds.episodes.size();
    pe["fqe"] = json::array({row});
    std::ofstream out(fs::path(dir) / "policy_eval.json");
    out << pe.dump(2) << "\n";
  }

  std::printf("%-6s %-10s %8s %12s %24s %10s\n", "group", "level", "n", "mean", "95% CI", "p");
  for (const auto& s : rows) {
    const std::string ci =
        "[" + haco::format_double(s.ci_low) + ", " + haco::format_double(s.ci_high) + "]";
    const std::string p = s.is_reference ? "(ref)" : p_display(s.p_value, B_p);
    std::printf("%-6s %-10s %8zu %12.4f %24s %10s\n", haco::to_string(s.group).c_str(),
                s.level.c_str(), s.n, s.mean, ci.c_str(), p.c_str());
  }
  std::printf("V0 (%s, gamma=%s): %s over %zu episodes\n", "expectation",
              haco::format_double(fopts.gamma).c_str(), haco::format_double(fr.v0).c_str(),
              ds.episodes.size());
  std::cout << "wrote audit tables to " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conformal risk gating, safe-set policy learning, FQE, and subgroup audits"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_flag;
  std::string format_name = "csv";
  std::string dataset_path;
  std::string policy_path;
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
  double gamma = 1.0;
  int b_ci = 500;
  int b_p = 1000;

  CLI::App* run = app.add_subcommand("run", "Run the full pipeline from a config file");
  run->add_option("--config", config_path, "Pipeline config JSON")->required();
  run->add_option("--seed", seed, "Override the configured seed")->each([&](const std::string&) {
    seed_set = true;
  });
  run->add_option("--threads", threads, "Worker threads (default: from config)");
  run->add_option("--out", out_flag, "Output directory (overrides config and env)");

  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset only");
  synth->add_option("--config", config_path, "Config JSON (pipeline config or bare generator block)")
      ->required();
  synth->add_option("--seed", seed, "Override the configured seed")->each([&](const std::string&) {
    seed_set = true;
  });
  synth->add_option("--threads", threads, "Worker threads");
  synth->add_option("--out", out_flag, "Output directory");
  synth->add_option("--format", format_name, "dataset file format: csv or jsonl")
      ->check(CLI::IsMember({"csv", "jsonl"}));

  CLI::App* audit = app.add_subcommand("audit", "Audit a dataset under a saved policy");
  audit->add_option("--dataset", dataset_path, "Trajectory file (csv or jsonl)")->required();
  audit->add_option("--policy", policy_path, "Saved softmax policy JSON")->required();
  audit->add_option("--gamma", gamma, "Discount for audited returns (default 1.0)");
  audit->add_option("--b-ci", b_ci, "Bootstrap replicates for CIs");
  audit->add_option("--b-p", b_p, "Bootstrap replicates for p-values");
  audit->add_option("--seed", seed, "Resampling seed")->each([&](const std::string&) {
    seed_set = true;
  });
  audit->add_option("--out", out_flag, "Output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, seed_set, seed, threads, out_flag);
    if (synth->parsed()) return cmd_synth(config_path, seed_set, seed, threads, out_flag, format_name);
    if (audit->parsed())
      return cmd_audit(dataset_path, policy_path, gamma, b_ci, b_p, seed_set, seed, out_flag);
  } catch (const haco::StageError& e) {
    std::cerr << "failed at stage " << e.stage() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
