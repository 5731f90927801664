#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "haco/policy.hpp"
#include "haco/types.hpp"

namespace haco {

struct DemographicMix {
  std::array<double, kAgeBinCount> age = {0.24, 0.30, 0.25, 0.16, 0.05};
  std::array<double, kSexCount> sex = {0.48, 0.49, 0.03};
  std::array<double, kRaceCount> race = {0.18, 0.38, 0.10, 0.16, 0.13, 0.05};
};

struct SynthConfig {
  int n_patients = 1000;
  int horizon = 20;
  int action_count = 9;
  int state_dim = 8;
  double harm_base_rate = 0.0182;
  // Scales every non-intercept term of the harm logit; 0 makes harm
  // unpredictable from (state, t, action).
  double risk_signal_strength = 1.0;
  // Scales the logging policy's logits; 0 logs uniform-random actions.
  double behavior_signal_strength = 0.0;
  DemographicMix demographic_mix;
  // Per-race additions to the harm logit / to every reward, for planting
  // detectable subgroup structure. Reward offsets must stay below 1 so harm
  // steps keep negative rewards.
  std::array<double, kRaceCount> race_risk_offsets = {};
  std::array<double, kRaceCount> race_reward_offsets = {};
  uint64_t seed = 0;
};

// The process behind a continuous-state dataset: AR(1) state dynamics with
// per-action drift, a logistic harm model over (state, t, action, latent
// frailty, race), reward −1 + offset on harm else a small positive
// engagement reward, and a softmax logging policy.
struct ContinuousProcess {
  int state_dim = 0;
  int action_count = 0;
  int horizon = 0;
  double state_persistence = 0.0;          // AR(1) coefficient
  double innovation_sd = 0.0;              // per-step state noise scale
  std::vector<double> harm_state_weights;  // state_dim
  double harm_t_weight = 0.0;              // on t / horizon
  std::vector<double> harm_action_effects; // action_count, mean zero
  double frailty_sd = 0.0;
  double harm_intercept = 0.0;             // solved so the marginal rate matches
  double risk_signal_strength = 0.0;
  std::vector<double> action_drift;        // action_count x state_dim
  std::vector<double> engagement_weights;  // state_dim
  std::vector<double> behavior_weights;    // action_count x state_dim
  double behavior_signal_strength = 0.0;
  DemographicMix demographic_mix;
  std::array<double, kRaceCount> race_risk_offsets = {};
  std::array<double, kRaceCount> race_reward_offsets = {};
};

// A finite MDP with deterministic rewards and a fixed start state; the exact
// evaluation target for value oracles.
struct TabularMdp {
  int n_states = 0;
  int n_actions = 0;
  int horizon = 0;
  int initial_state = 0;
  std::vector<double> transition;  // n_states x n_actions x n_states
  std::vector<double> reward;      // n_states x n_actions

  double p(int s, int a, int next) const {
    return transition[(static_cast<size_t>(s) * n_actions + a) * n_states + next];
  }
  double r(int s, int a) const { return reward[static_cast<size_t>(s) * n_actions + a]; }
};

struct GroundTruthMDP {
  enum class Kind { Continuous, Tabular };
  Kind kind = Kind::Continuous;
  ContinuousProcess continuous;
  TabularMdp tabular;
  uint64_t seed = 0;
};

struct GenerationResult {
  Dataset dataset;
  GroundTruthMDP mdp;
};

// Deterministic given cfg.seed for any thread count (per-patient random
// streams). Episodes have exactly cfg.horizon steps; demographics are drawn
// i.i.d. from cfg.demographic_mix; the harm intercept is solved by bisection
// against a simulated logit sample so the marginal harm rate matches
// cfg.harm_base_rate.
GenerationResult generate_dataset(const SynthConfig& cfg, int threads = 1);

struct ValueEstimate {
  double value = 0.0;
  double std_error = 0.0;  // 0 for exact (tabular) evaluation
};

// Expected discounted return from the start state. Tabular: exact dynamic
// programming over (state, previous-reward) pairs, so policies may condition
// on prev_reward. Continuous: Monte Carlo rollouts with a reported standard
// error.
ValueEstimate true_policy_value(const GroundTruthMDP& mdp, const Policy& policy, double gamma,
                                int n_rollouts = 100000, int threads = 1);

// Random finite MDP (seeded): Dirichlet-like transition rows, rewards uniform
// in [-1, 1], start state 0.
GroundTruthMDP make_tabular_mdp(int n_states, int n_actions, int horizon, uint64_t seed);

// Trajectories from a tabular MDP under uniform logging, one-hot state
// features. Episodes have exactly mdp.horizon steps.
Dataset generate_tabular_dataset(const GroundTruthMDP& mdp, int n_episodes, uint64_t seed);

// JSON sidecar describing the generating process (for downstream oracles).
void save_ground_truth(const GroundTruthMDP& mdp, const std::string& path);

}  // namespace haco
