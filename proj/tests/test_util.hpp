#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "haco/types.hpp"

namespace testutil {

// One hand-written episode: actions and rewards paired by position, optional
// per-step state rows (zeros when omitted). t runs 0..len-1, prev_reward
// chains from the previous reward, harm mirrors reward < 0.
struct EpisodeSpec {
  std::string patient;
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<std::vector<double>> states;
};

inline haco::Dataset build_dataset(std::vector<std::string> feature_names,
                                   const std::vector<EpisodeSpec>& eps, int action_count) {
  haco::Dataset ds;
  ds.feature_names = std::move(feature_names);
  ds.action_count = action_count;
  const size_t d = ds.feature_names.size();
  size_t ep_index = 0;
  for (const auto& spec : eps) {
    if (spec.actions.size() != spec.rewards.size())
      throw std::invalid_argument("episode spec: actions/rewards length mismatch");
    haco::Episode ep;
    ep.id = spec.patient + "#" + std::to_string(ep_index);
    ep.patient_id = spec.patient;
    ep.begin = ds.steps.size();
    double prev = 0.0;
    for (size_t k = 0; k < spec.actions.size(); ++k) {
      haco::Step s;
      s.t = static_cast<int>(k);
      s.action = spec.actions[k];
      s.reward = spec.rewards[k];
      s.prev_reward = k == 0 ? 0.0 : prev;
      s.harm = s.reward < 0.0;
      prev = s.reward;
      ds.steps.push_back(s);
      for (size_t j = 0; j < d; ++j) {
        const bool have = k < spec.states.size() && j < spec.states[k].size();
        ds.state_data.push_back(have ? spec.states[k][j] : 0.0);
      }
    }
    ep.end = ds.steps.size();
    ds.episodes.push_back(ep);
    ++ep_index;
  }
  return ds;
}

// Scratch directory under the system temp root, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& hint) {
    const auto base = std::filesystem::temp_directory_path();
    for (int i = 0; i < 10000; ++i) {
      auto candidate = base / (hint + "_" + std::to_string(i));
      std::error_code ec;
      if (std::filesystem::create_directory(candidate, ec)) {
        path_ = candidate;
        return;
      }
    }
    throw std::runtime_error("could not create scratch directory");
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
  if (!out) throw std::runtime_error("could not write " + path);
  return path;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace testutil
