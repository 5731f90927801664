#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "haco/synth_gen.hpp"
#include "haco/trajectory_store.hpp"

namespace haco {

struct InputConfig {
  std::string path;
  FileFormat format = FileFormat::Csv;
  int action_count = 0;  // required for file input: actions live in [0, A)
};

struct RiskConfig {
  bool use_state = false;
  double l2_lambda = 1e-4;
  int max_iter = 100;
  double tol = 1e-7;
};

struct PolicyStageConfig {
  double l2_lambda = 1e-3;
  int max_iter = 200;
  double tol = 1e-7;
  double bc_train_frac = 0.8;
};

struct FqeStageConfig {
  double gamma = 0.99;
  double ridge_lambda = 1.0;
  int max_iters = 200;
  double tol = 1e-6;
  std::string v0_mode = "expectation";  // or "greedy"
  size_t subset_rows = 20000;           // evaluation-subset size cap, in steps
};

struct AuditStageConfig {
  int B_ci = 500;
  int B_p = 1000;
  int bins = 10;
  double z = 1.96;
  double gamma = 1.0;  // discount for the audited episodic returns
};

struct ExternalPolicySpec {
  std::string name;
  std::string path;  // per-step probability CSV, indexed by full-dataset row
};

struct PipelineConfig {
  std::optional<InputConfig> input;  // exactly one of input / synth
  std::optional<SynthConfig> synth;
  SplitSpec split;
  double alpha = 0.10;
  std::vector<double> alphas_for_curve = {0.01, 0.05, 0.10, 0.20, 0.30};
  RiskConfig risk;
  PolicyStageConfig policy;
  FqeStageConfig fqe;
  AuditStageConfig audit;
  std::vector<std::string> demographics_files;
  std::vector<ExternalPolicySpec> external_policies;
  bool save_dataset = false;  // also write the working dataset + generator truth
  uint64_t seed = 0;
  std::string output_dir = "haco_out";
  int threads = 1;
};

// Parses the JSON config document; unknown top-level keys are rejected so
// typos fail loudly. load_pipeline_config reads the file first.
PipelineConfig parse_pipeline_config(const std::string& json_text);
PipelineConfig load_pipeline_config(const std::string& path);

struct RunOutcome {
  std::string output_dir;
  std::string manifest_path;
  std::vector<std::string> artifacts;  // paths relative to output_dir, sorted
};

// Runs every stage in order (data → split → risk → calibrate → gate →
// policies → fqe → audit → plots) and writes all report and plot-data files
// plus a manifest with a SHA-256 per artifact. On a stage failure the partial
// outputs and a failure marker are kept in the manifest and the error is
// rethrown as StageError. Identical config+seed produce identical artifact
// bytes regardless of thread count.
RunOutcome run_pipeline(const PipelineConfig& cfg);

}  // namespace haco
