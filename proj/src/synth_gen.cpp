#include "haco/synth_gen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "haco/errors.hpp"
#include "haco/parallel.hpp"
#include "haco/rng.hpp"

namespace haco {

namespace {

using nlohmann::json;

// Stream namespaces under the root seed, so every consumer is independent.
constexpr uint64_t kTagParams = 1;
constexpr uint64_t kTagIntercept = 2;
constexpr uint64_t kTagPatients = 3;
constexpr uint64_t kTagRollouts = 4;
constexpr uint64_t kTagTabular = 5;
constexpr uint64_t kTagTabularData = 6;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::string zero_padded(size_t value, size_t width) {
  std::string s = std::to_string(value);
  return s.size() >= width ? s : std::string(width - s.size(), '0') + s;
}

size_t digits_of(size_t max_value) { return std::to_string(max_value).size(); }

std::vector<double> scaled_normals(Rng& rng, size_t n, double target_norm) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0) {
    for (auto& x : v) x *= target_norm / norm;
  }
  return v;
}

void validate(const SynthConfig& cfg) {
  if (cfg.n_patients < 1) throw InvalidConfigError("n_patients must be ≥ 1");
  if (cfg.horizon < 1) throw InvalidConfigError("horizon must be ≥ 1");
  if (cfg.action_count < 2) throw InvalidConfigError("action_count must be ≥ 2");
  if (cfg.state_dim < 1) throw InvalidConfigError("state_dim must be ≥ 1");
  if (!(cfg.harm_base_rate >= 0.0 && cfg.harm_base_rate <= 1.0)) {
    throw InvalidConfigError("harm_base_rate must lie in [0,1]");
  }
  if (cfg.risk_signal_strength < 0.0) throw InvalidConfigError("risk_signal_strength must be ≥ 0");
  auto check_mix = [](const auto& probs, const char* name) {
    double total = 0.0;
    for (double p : probs) {
      if (!(p >= 0.0)) throw InvalidConfigError(std::string("negative probability in ") + name);
      total += p;
    }
    if (!(total > 0.0)) throw InvalidConfigError(std::string("probabilities sum to zero in ") + name);
  };
  check_mix(cfg.demographic_mix.age, "demographic_mix.age");
  check_mix(cfg.demographic_mix.sex, "demographic_mix.sex");
  check_mix(cfg.demographic_mix.race, "demographic_mix.race");
  for (double off : cfg.race_reward_offsets) {
    if (off >= 1.0) throw InvalidConfigError("race_reward_offsets must stay below 1");
  }
}

ContinuousProcess draw_process(const SynthConfig& cfg) {
  Rng rng(Rng::derive(cfg.seed, kTagParams));
  ContinuousProcess p;
  p.state_dim = cfg.state_dim;
  p.action_count = cfg.action_count;
  p.horizon = cfg.horizon;
  p.state_persistence = 0.8;
  // Innovation scale chosen so the stationary per-feature variance is 1.
  p.innovation_sd = std::sqrt(1.0 - p.state_persistence * p.state_persistence);
  p.frailty_sd = 0.4;
  p.harm_t_weight = 0.5;
  p.risk_signal_strength = cfg.risk_signal_strength;
  p.behavior_signal_strength = cfg.behavior_signal_strength;
  p.demographic_mix = cfg.demographic_mix;
  p.race_risk_offsets = cfg.race_risk_offsets;
  p.race_reward_offsets = cfg.race_reward_offsets;

  const auto d = static_cast<size_t>(cfg.state_dim);
  const auto a = static_cast<size_t>(cfg.action_count);
  p.harm_state_weights = scaled_normals(rng, d, 0.6);
  p.harm_action_effects.resize(a);
  double mean_effect = 0.0;
  for (auto& w : p.harm_action_effects) {
    w = rng.normal(0.0, 0.3);
    mean_effect += w;
  }
  mean_effect /= static_cast<double>(a);
  for (auto& w : p.harm_action_effects) w -= mean_effect;

  p.action_drift.reserve(a * d);
  for (size_t i = 0; i < a; ++i) {
    const auto row = scaled_normals(rng, d, 0.15);
    p.action_drift.insert(p.action_drift.end(), row.begin(), row.end());
  }
  p.engagement_weights = scaled_normals(rng, d, 0.5);
  p.behavior_weights.resize(a * d);
  for (auto& w : p.behavior_weights) w = rng.normal();
  return p;
}

// One simulated patient under the logging policy. The visitor sees each step
// before the state advances; harm outcomes never feed back into the dynamics,
// which is what makes exact intercept calibration possible.
template <typename Visitor>
void simulate_patient(const ContinuousProcess& p, Rng& rng, Visitor&& visit) {
  const auto d = static_cast<size_t>(p.state_dim);
  const auto a_count = static_cast<size_t>(p.action_count);

  const auto age = static_cast<AgeBin>(rng.categorical(p.demographic_mix.age));
  const auto sex = static_cast<Sex>(rng.categorical(p.demographic_mix.sex));
  const auto race = static_cast<Race>(rng.categorical(p.demographic_mix.race));
  const double frailty = rng.normal(0.0, p.frailty_sd);

  std::vector<double> state(d);
  for (auto& x : state) x = rng.normal();

  std::vector<double> probs(a_count, 1.0);
  for (int t = 0; t < p.horizon; ++t) {
    if (p.behavior_signal_strength != 0.0) {
      double max_logit = -1e300;
      for (size_t i = 0; i < a_count; ++i) {
        double z = 0.0;
        const double* w = p.behavior_weights.data() + i * d;
        for (size_t j = 0; j < d; ++j) z += w[j] * state[j];
        probs[i] = p.behavior_signal_strength * z;
        max_logit = std::max(max_logit, probs[i]);
      }
      for (auto& q : probs) q = std::exp(q - max_logit);
    }
    const int action = static_cast<int>(rng.categorical(probs));

    double harm_logit = p.harm_t_weight * static_cast<double>(t) / static_cast<double>(p.horizon) +
                        p.harm_action_effects[static_cast<size_t>(action)] + frailty;
    for (size_t j = 0; j < d; ++j) harm_logit += p.harm_state_weights[j] * state[j];
    harm_logit = p.risk_signal_strength * harm_logit +
                 p.race_risk_offsets[static_cast<size_t>(race)];

    double engagement = 0.0;
    for (size_t j = 0; j < d; ++j) engagement += p.engagement_weights[j] * state[j];

    visit(t, state, action, harm_logit, engagement, age, sex, race, rng);

    if (t + 1 < p.horizon) {
      const double* drift = p.action_drift.data() + static_cast<size_t>(action) * d;
      for (size_t j = 0; j < d; ++j) {
        state[j] = p.state_persistence * state[j] + drift[j] + p.innovation_sd * rng.normal();
      }
    }
  }
}

// Solves mean(sigmoid(b + z_i)) = target over a simulated logit sample.
double solve_intercept(const ContinuousProcess& p, uint64_t seed, double target) {
  if (target <= 0.0) return -1e30;
  if (target >= 1.0) return 1e30;

  const int n_sim = std::max(2000, static_cast<int>(200000 / static_cast<size_t>(p.horizon)));
  std::vector<double> logits;
  logits.reserve(static_cast<size_t>(n_sim) * static_cast<size_t>(p.horizon));
  const uint64_t ns = Rng::derive(seed, kTagIntercept);
  for (int i = 0; i < n_sim; ++i) {
    Rng rng(Rng::derive(ns, static_cast<uint64_t>(i)));
    simulate_patient(p, rng,
                     [&](int, const std::vector<double>&, int, double harm_logit, double, AgeBin, Sex,
                         Race, Rng&) { logits.push_back(harm_logit); });
  }

  auto rate_at = [&](double b) {
    double total = 0.0;
    for (double z : logits) total += sigmoid(b + z);
    return total / static_cast<double>(logits.size());
  };
  double lo = -60.0, hi = 60.0;
  for (int iter = 0; iter < 60; ++iter) {
    const double mid = 0.5 * (lo + hi);
    (rate_at(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double reward_for(const ContinuousProcess& p, bool harm, double engagement, Race race) {
  const double offset = p.race_reward_offsets[static_cast<size_t>(race)];
  if (harm) return -1.0 + offset;
  // Clamped away from zero so non-harm rewards keep the harm ⇔ negative-reward
  // correspondence even under negative offsets.
  return std::max(1e-9, 0.1 * sigmoid(engagement) + offset);
}

}  // namespace

GenerationResult generate_dataset(const SynthConfig& cfg, int threads) {
  validate(cfg);

  GroundTruthMDP mdp;
  mdp.kind = GroundTruthMDP::Kind::Continuous;
  mdp.seed = cfg.seed;
  mdp.continuous = draw_process(cfg);
  mdp.continuous.harm_intercept = solve_intercept(mdp.continuous, cfg.seed, cfg.harm_base_rate);
  const ContinuousProcess& p = mdp.continuous;

  const auto n = static_cast<size_t>(cfg.n_patients);
  const auto h = static_cast<size_t>(cfg.horizon);
  const auto d = static_cast<size_t>(cfg.state_dim);

  Dataset ds;
  ds.action_count = cfg.action_count;
  const size_t feature_width = digits_of(d - 1);
  ds.feature_names.reserve(d);
  for (size_t j = 0; j < d; ++j) ds.feature_names.push_back("f" + zero_padded(j, feature_width));
  ds.steps.resize(n * h);
  ds.state_data.resize(n * h * d);
  ds.episodes.resize(n);

  const size_t patient_width = digits_of(n - 1);
  std::vector<Demographics> patient_demo(n);
  const uint64_t patient_ns = Rng::derive(cfg.seed, kTagPatients);

  parallel_for(n, threads, [&](size_t i) {
    Rng rng(Rng::derive(patient_ns, static_cast<uint64_t>(i)));
    const size_t base = i * h;
    double prev_reward = 0.0;
    simulate_patient(p, rng,
                     [&](int t, const std::vector<double>& state, int action, double harm_logit,
                         double engagement, AgeBin age, Sex sex, Race race, Rng& step_rng) {
                       const double p_harm = sigmoid(p.harm_intercept + harm_logit);
                       const bool harm = step_rng.uniform() < p_harm;
                       Step& s = ds.steps[base + static_cast<size_t>(t)];
                       s.t = t;
                       s.action = action;
                       s.harm = harm;
                       s.reward = reward_for(p, harm, engagement, race);
                       s.prev_reward = t == 0 ? 0.0 : prev_reward;
                       prev_reward = s.reward;
                       std::copy(state.begin(), state.end(),
                                 ds.state_data.begin() +
                                     static_cast<ptrdiff_t>((base + static_cast<size_t>(t)) * d));
                       if (t == 0) patient_demo[i] = {age, sex, race};
                     });

    Episode& ep = ds.episodes[i];
    ep.patient_id = "p" + zero_padded(i, patient_width);
    ep.id = ep.patient_id + "#0";
    ep.begin = base;
    ep.end = base + h;
  });

  for (size_t i = 0; i < n; ++i) ds.demographics.emplace(ds.episodes[i].patient_id, patient_demo[i]);

  return {std::move(ds), std::move(mdp)};
}

namespace {

ValueEstimate tabular_policy_value(const TabularMdp& mdp, const Policy& policy, double gamma) {
  const int s_count = mdp.n_states;
  const int a_count = mdp.n_actions;

  // The policy may condition on prev_reward, so the dynamic program runs over
  // (state, previous reward) pairs; rewards are deterministic, so the distinct
  // prev values are just {0} ∪ {r(s,a)}.
  std::vector<double> prev_values = {0.0};
  for (double r : mdp.reward) prev_values.push_back(r);
  std::sort(prev_values.begin(), prev_values.end());
  prev_values.erase(std::unique(prev_values.begin(), prev_values.end()), prev_values.end());
  const size_t n_prev = prev_values.size();
  auto prev_index = [&](double r) {
    return static_cast<size_t>(std::lower_bound(prev_values.begin(), prev_values.end(), r) -
                               prev_values.begin());
  };

  std::vector<double> one_hot(static_cast<size_t>(s_count), 0.0);
  std::vector<double> probs(static_cast<size_t>(a_count));
  std::vector<double> value((static_cast<size_t>(s_count)) * n_prev, 0.0);
  std::vector<double> next_value = value;

  for (int t = mdp.horizon - 1; t >= 0; --t) {
    for (int s = 0; s < s_count; ++s) {
      one_hot.assign(one_hot.size(), 0.0);
      one_hot[static_cast<size_t>(s)] = 1.0;
      for (size_t pi = 0; pi < n_prev; ++pi) {
        StepContext ctx{one_hot, t, prev_values[pi], std::nullopt};
        policy.action_probs(ctx, probs);
        double v = 0.0;
        for (int a = 0; a < a_count; ++a) {
          double future = 0.0;
          if (t + 1 < mdp.horizon) {
            const size_t next_prev = prev_index(mdp.r(s, a));
            for (int next = 0; next < s_count; ++next) {
              future += mdp.p(s, a, next) * next_value[static_cast<size_t>(next) * n_prev + next_prev];
            }
          }
          v += probs[static_cast<size_t>(a)] * (mdp.r(s, a) + gamma * future);
        }
        value[static_cast<size_t>(s) * n_prev + pi] = v;
      }
    }
    std::swap(value, next_value);
  }
  return {next_value[static_cast<size_t>(mdp.initial_state) * n_prev + prev_index(0.0)], 0.0};
}

ValueEstimate continuous_policy_value(const GroundTruthMDP& mdp, const Policy& policy, double gamma,
                                      int n_rollouts, int threads) {
  const ContinuousProcess& p = mdp.continuous;
  const uint64_t ns = Rng::derive(mdp.seed, kTagRollouts);
  std::vector<double> returns(static_cast<size_t>(n_rollouts));

  parallel_for(static_cast<size_t>(n_rollouts), threads, [&](size_t i) {
    Rng rng(Rng::derive(ns, static_cast<uint64_t>(i)));
    const auto d = static_cast<size_t>(p.state_dim);
    const auto a_count = static_cast<size_t>(p.action_count);

    const auto race = [&] {
      rng.categorical(p.demographic_mix.age);
      rng.categorical(p.demographic_mix.sex);
      return static_cast<Race>(rng.categorical(p.demographic_mix.race));
    }();
    const double frailty = rng.normal(0.0, p.frailty_sd);
    std::vector<double> state(d);
    for (auto& x : state) x = rng.normal();

    std::vector<double> probs(a_count);
    double discounted = 0.0;
    double discount = 1.0;
    double prev_reward = 0.0;
    for (int t = 0; t < p.horizon; ++t) {
      StepContext ctx{state, t, prev_reward, std::nullopt};
      policy.action_probs(ctx, probs);
      const int action = static_cast<int>(rng.categorical(probs));

      double harm_logit = p.harm_t_weight * static_cast<double>(t) / static_cast<double>(p.horizon) +
                          p.harm_action_effects[static_cast<size_t>(action)] + frailty;
      for (size_t j = 0; j < d; ++j) harm_logit += p.harm_state_weights[j] * state[j];
      harm_logit =
          p.risk_signal_strength * harm_logit + p.race_risk_offsets[static_cast<size_t>(race)];
      double engagement = 0.0;
      for (size_t j = 0; j < d; ++j) engagement += p.engagement_weights[j] * state[j];

      const bool harm = rng.uniform() < sigmoid(p.harm_intercept + harm_logit);
      const double reward = reward_for(p, harm, engagement, race);
      discounted += discount * reward;
      discount *= gamma;
      prev_reward = reward;

      if (t + 1 < p.horizon) {
        const double* drift = p.action_drift.data() + static_cast<size_t>(action) * d;
        for (size_t j = 0; j < d; ++j) {
          state[j] = p.state_persistence * state[j] + drift[j] + p.innovation_sd * rng.normal();
        }
      }
    }
    returns[i] = discounted;
  });

  double mean = 0.0;
  for (double r : returns) mean += r;
  mean /= static_cast<double>(returns.size());
  double var = 0.0;
  for (double r : returns) var += (r - mean) * (r - mean);
  var = returns.size() > 1 ? var / static_cast<double>(returns.size() - 1) : 0.0;
  return {mean, std::sqrt(var / static_cast<double>(returns.size()))};
}

}  // namespace

ValueEstimate true_policy_value(const GroundTruthMDP& mdp, const Policy& policy, double gamma,
                                int n_rollouts, int threads) {
  if (mdp.kind == GroundTruthMDP::Kind::Tabular) return tabular_policy_value(mdp.tabular, policy, gamma);
  return continuous_policy_value(mdp, policy, gamma, n_rollouts, threads);
}

GroundTruthMDP make_tabular_mdp(int n_states, int n_actions, int horizon, uint64_t seed) {
  if (n_states < 1 || n_actions < 1 || horizon < 1) {
    throw InvalidConfigError("tabular dimensions must be ≥ 1");
  }
  Rng rng(Rng::derive(seed, kTagTabular));
  GroundTruthMDP mdp;
  mdp.kind = GroundTruthMDP::Kind::Tabular;
  mdp.seed = seed;
  TabularMdp& tab = mdp.tabular;
  tab.n_states = n_states;
  tab.n_actions = n_actions;
  tab.horizon = horizon;
  tab.initial_state = 0;

  tab.transition.resize(static_cast<size_t>(n_states) * n_actions * n_states);
  for (int s = 0; s < n_states; ++s) {
    for (int a = 0; a < n_actions; ++a) {
      double total = 0.0;
      const size_t base = (static_cast<size_t>(s) * n_actions + static_cast<size_t>(a)) *
                          static_cast<size_t>(n_states);
      for (int next = 0; next < n_states; ++next) {
        double u = rng.uniform();
        while (u <= 0.0) u = rng.uniform();
        tab.transition[base + static_cast<size_t>(next)] = -std::log(u);
        total += tab.transition[base + static_cast<size_t>(next)];
      }
      for (int next = 0; next < n_states; ++next) tab.transition[base + static_cast<size_t>(next)] /= total;
    }
  }
  tab.reward.resize(static_cast<size_t>(n_states) * n_actions);
  for (auto& r : tab.reward) r = 2.0 * rng.uniform() - 1.0;
  return mdp;
}

Dataset generate_tabular_dataset(const GroundTruthMDP& mdp, int n_episodes, uint64_t seed) {
  if (mdp.kind != GroundTruthMDP::Kind::Tabular) {
    throw InvalidConfigError("generate_tabular_dataset requires a tabular process");
  }
  if (n_episodes < 1) throw InvalidConfigError("n_episodes must be ≥ 1");
  const TabularMdp& tab = mdp.tabular;
  const auto s_count = static_cast<size_t>(tab.n_states);
  const auto h = static_cast<size_t>(tab.horizon);
  const auto n = static_cast<size_t>(n_episodes);

  Dataset ds;
  ds.action_count = tab.n_actions;
  const size_t width = digits_of(s_count - 1);
  for (size_t j = 0; j < s_count; ++j) ds.feature_names.push_back("s" + zero_padded(j, width));
  ds.steps.resize(n * h);
  ds.state_data.assign(n * h * s_count, 0.0);
  ds.episodes.resize(n);

  const uint64_t ns = Rng::derive(seed, kTagTabularData);
  const size_t patient_width = digits_of(n - 1);
  for (size_t e = 0; e < n; ++e) {
    Rng rng(Rng::derive(ns, static_cast<uint64_t>(e)));
    int state = tab.initial_state;
    double prev_reward = 0.0;
    const size_t base = e * h;
    for (size_t t = 0; t < h; ++t) {
      const int action = static_cast<int>(rng.below(static_cast<uint64_t>(tab.n_actions)));
      const double reward = tab.r(state, action);
      Step& step = ds.steps[base + t];
      step.t = static_cast<int>(t);
      step.action = action;
      step.reward = reward;
      step.harm = reward < 0.0;
      step.prev_reward = t == 0 ? 0.0 : prev_reward;
      prev_reward = reward;
      ds.state_data[(base + t) * s_count + static_cast<size_t>(state)] = 1.0;

      if (t + 1 < h) {
        const double* row = tab.transition.data() +
                            (static_cast<size_t>(state) * tab.n_actions + static_cast<size_t>(action)) *
                                s_count;
        state = static_cast<int>(rng.categorical({row, s_count}));
      }
    }
    Episode& ep = ds.episodes[e];
    ep.patient_id = "e" + zero_padded(e, patient_width);
    ep.id = ep.patient_id + "#0";
    ep.begin = base;
    ep.end = base + h;
  }
  return ds;
}

void save_ground_truth(const GroundTruthMDP& mdp, const std::string& path) {
  json out;
  out["seed"] = mdp.seed;
  if (mdp.kind == GroundTruthMDP::Kind::Tabular) {
    out["kind"] = "tabular";
    json tab;
    tab["n_states"] = mdp.tabular.n_states;
    tab["n_actions"] = mdp.tabular.n_actions;
    tab["horizon"] = mdp.tabular.horizon;
    tab["initial_state"] = mdp.tabular.initial_state;
    tab["transition"] = mdp.tabular.transition;
    tab["reward"] = mdp.tabular.reward;
    out["tabular"] = std::move(tab);
  } else {
    const ContinuousProcess& p = mdp.continuous;
    out["kind"] = "continuous";
    json proc;
    proc["state_dim"] = p.state_dim;
    proc["action_count"] = p.action_count;
    proc["horizon"] = p.horizon;
    proc["state_persistence"] = p.state_persistence;
    proc["innovation_sd"] = p.innovation_sd;
    proc["harm_state_weights"] = p.harm_state_weights;
    proc["harm_t_weight"] = p.harm_t_weight;
    proc["harm_action_effects"] = p.harm_action_effects;
    proc["frailty_sd"] = p.frailty_sd;
    proc["harm_intercept"] = p.harm_intercept;
    proc["risk_signal_strength"] = p.risk_signal_strength;
    proc["action_drift"] = p.action_drift;
    proc["engagement_weights"] = p.engagement_weights;
    proc["behavior_weights"] = p.behavior_weights;
    proc["behavior_signal_strength"] = p.behavior_signal_strength;
    proc["race_risk_offsets"] = p.race_risk_offsets;
    proc["race_reward_offsets"] = p.race_reward_offsets;
    out["continuous"] = std::move(proc);
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open file for writing: " + path);
  file << out.dump(2) << "\n";
}

}  // namespace haco
