#include "haco/policy.hpp"

#include <algorithm>
#include <cmath>

#include "haco/errors.hpp"

namespace haco {

std::vector<double> Policy::action_probs_vec(const StepContext& ctx) const {
  std::vector<double> out(static_cast<size_t>(action_count()));
  action_probs(ctx, out);
  return out;
}

int Policy::greedy(const StepContext& ctx) const {
  const auto probs = action_probs_vec(ctx);
  int best = 0;
  for (int a = 1; a < static_cast<int>(probs.size()); ++a) {
    if (probs[static_cast<size_t>(a)] > probs[static_cast<size_t>(best)]) best = a;
  }
  return best;
}

UniformPolicy::UniformPolicy(int action_count) : action_count_(action_count) {
  if (action_count < 1) throw InvalidConfigError("policy needs at least one action");
}

void UniformPolicy::action_probs(const StepContext&, std::span<double> out) const {
  const double p = 1.0 / static_cast<double>(action_count_);
  std::fill(out.begin(), out.end(), p);
}

void SoftmaxPolicy::features(const StepContext& ctx, std::span<double> out) const {
  if (ctx.state.size() + 2 != feature_names.size()) {
    throw FeatureMismatchError("policy expects " + std::to_string(feature_names.size()) +
                               " features, step provides " + std::to_string(ctx.state.size() + 2));
  }
  out[0] = static_cast<double>(ctx.t) / t_scale;
  out[1] = ctx.prev_reward;
  std::copy(ctx.state.begin(), ctx.state.end(), out.begin() + 2);
}

void SoftmaxPolicy::action_probs(const StepContext& ctx, std::span<double> out) const {
  const size_t d = feature_dim();
  const int a_count = action_count();
  std::vector<double> x(d);
  features(ctx, x);

  // out holds logits first, then is normalized in place (max-subtracted).
  double max_logit = 0.0;  // class 0 logit is always 0
  for (int a = 0; a < a_count; ++a) {
    double z = bias[static_cast<size_t>(a)];
    const double* w = weights.data() + static_cast<size_t>(a) * d;
    for (size_t j = 0; j < d; ++j) z += w[j] * x[j];
    out[static_cast<size_t>(a)] = z;
    max_logit = std::max(max_logit, z);
  }
  double total = 0.0;
  for (int a = 0; a < a_count; ++a) {
    const double e = std::exp(out[static_cast<size_t>(a)] - max_logit);
    out[static_cast<size_t>(a)] = e;
    total += e;
  }
  for (int a = 0; a < a_count; ++a) out[static_cast<size_t>(a)] /= total;
}

ExternalPolicy::ExternalPolicy(std::vector<double> probs, int action_count)
    : probs_(std::move(probs)), action_count_(action_count) {
  if (action_count < 1) throw InvalidConfigError("policy needs at least one action");
  if (probs_.size() % static_cast<size_t>(action_count) != 0) {
    throw InvalidConfigError("probability table size is not a multiple of action_count");
  }
}

void ExternalPolicy::action_probs(const StepContext& ctx, std::span<double> out) const {
  if (!ctx.step_index || *ctx.step_index >= rows()) {
    throw FeatureMismatchError("external policy has no probability row for this step");
  }
  const double* row = probs_.data() + *ctx.step_index * static_cast<size_t>(action_count_);
  std::copy(row, row + action_count_, out.begin());
}

void validate_features(const SoftmaxPolicy& policy, const Dataset& ds) {
  const auto expected = policy_feature_names(ds);
  if (expected != policy.feature_names) {
    throw FeatureMismatchError("dataset features do not match the policy's training features");
  }
}

std::vector<std::string> policy_feature_names(const Dataset& ds) {
  std::vector<std::string> names = {"t_norm", "prev_reward"};
  names.insert(names.end(), ds.feature_names.begin(), ds.feature_names.end());
  return names;
}

}  // namespace haco
