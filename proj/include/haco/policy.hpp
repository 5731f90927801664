#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "haco/types.hpp"

namespace haco {

// Everything a policy may condition on for one step. step_index is the global
// row number within the dataset being evaluated; only table-backed policies
// use it.
struct StepContext {
  std::span<const double> state;
  int t = 0;
  double prev_reward = 0.0;
  std::optional<size_t> step_index;
};

inline StepContext step_context(const Dataset& ds, size_t i) {
  return {ds.state(i), ds.steps[i].t, ds.steps[i].prev_reward, i};
}

class Policy {
public:
  virtual ~Policy() = default;
  virtual int action_count() const = 0;
  // Fills out (length = action_count()) with non-negative probabilities
  // summing to 1.
  virtual void action_probs(const StepContext& ctx, std::span<double> out) const = 0;

  std::vector<double> action_probs_vec(const StepContext& ctx) const;

  // Argmax of action_probs with lowest-index tie-break.
  int greedy(const StepContext& ctx) const;
};

class UniformPolicy final : public Policy {
public:
  explicit UniformPolicy(int action_count);
  int action_count() const override { return action_count_; }
  void action_probs(const StepContext& ctx, std::span<double> out) const override;

private:
  int action_count_;
};

// softmax(W·x + b) over x = [t / t_scale, prev_reward] ++ state, with the
// class-0 row pinned to zero for identifiability.
class SoftmaxPolicy final : public Policy {
public:
  int action_count() const override { return static_cast<int>(bias.size()); }
  void action_probs(const StepContext& ctx, std::span<double> out) const override;

  size_t feature_dim() const { return feature_names.size(); }
  // Builds the model input for one step; throws FeatureMismatch when the
  // state width disagrees with feature_names.
  void features(const StepContext& ctx, std::span<double> out) const;

  std::vector<std::string> feature_names;  // "t_norm", "prev_reward", then state names
  double t_scale = 1.0;
  double l2_lambda = 0.0;
  std::vector<double> weights;  // action_count x feature_dim, row-major; row 0 all zero
  std::vector<double> bias;     // length action_count; bias[0] = 0
};

// Per-step probability table, the plug-in path for externally trained
// policies. Rows are keyed by global step index of the evaluated dataset.
class ExternalPolicy final : public Policy {
public:
  ExternalPolicy(std::vector<double> probs, int action_count);
  int action_count() const override { return action_count_; }
  void action_probs(const StepContext& ctx, std::span<double> out) const override;
  size_t rows() const { return probs_.size() / static_cast<size_t>(action_count_); }

private:
  std::vector<double> probs_;  // rows x action_count
  int action_count_;
};

// Throws FeatureMismatch unless the dataset's features match what the policy
// was trained on (same names, same order).
void validate_features(const SoftmaxPolicy& policy, const Dataset& ds);

// The learned-policy input layout: [t_normalized, prev_reward] ++ state.
std::vector<std::string> policy_feature_names(const Dataset& ds);

}  // namespace haco
