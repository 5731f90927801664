#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "haco/errors.hpp"
#include "haco/policy.hpp"
#include "haco/risk_model.hpp"
#include "haco/synth_gen.hpp"
#include "test_util.hpp"

using namespace haco;

namespace {

SynthConfig small_config(uint64_t seed) {
  SynthConfig cfg;
  cfg.n_patients = 200;
  cfg.horizon = 6;
  cfg.action_count = 4;
  cfg.state_dim = 4;
  cfg.seed = seed;
  return cfg;
}

bool identical(const Dataset& a, const Dataset& b) {
  if (a.size() != b.size() || a.episodes.size() != b.episodes.size()) return false;
  if (a.feature_names != b.feature_names || a.state_data != b.state_data) return false;
  if (!(a.demographics == b.demographics)) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    const Step& x = a.steps[i];
    const Step& y = b.steps[i];
    if (x.t != y.t || x.action != y.action || x.reward != y.reward ||
        x.prev_reward != y.prev_reward || x.harm != y.harm)
      return false;
  }
  return true;
}

// Best observable harm score: the generating logit minus the latent frailty
// term, recomputed from the saved process parameters. Any strictly monotone
// transform of the logit gives the same AUC, so the intercept is dropped.
std::vector<double> oracle_scores(const Dataset& ds, const ContinuousProcess& p) {
  std::vector<double> scores(ds.size());
  for (const auto& ep : ds.episodes) {
    const Race race = ds.demographics.at(ep.patient_id).race;
    for (size_t i = ep.begin; i < ep.end; ++i) {
      const Step& s = ds.steps[i];
      double z = p.harm_t_weight * static_cast<double>(s.t) / static_cast<double>(p.horizon) +
                 p.harm_action_effects[static_cast<size_t>(s.action)];
      const auto state = ds.state(i);
      for (size_t j = 0; j < state.size(); ++j) z += p.harm_state_weights[j] * state[j];
      scores[i] = p.risk_signal_strength * z + p.race_risk_offsets[static_cast<size_t>(race)];
    }
  }
  return scores;
}

GroundTruthMDP wrap_tabular(TabularMdp tab) {
  GroundTruthMDP mdp;
  mdp.kind = GroundTruthMDP::Kind::Tabular;
  mdp.tabular = std::move(tab);
  return mdp;
}

}  // namespace

TEST_SUITE("synth_gen") {

TEST_CASE("zero harm base rate yields no harm and non-negative rewards") {
  SynthConfig cfg = small_config(3);
  cfg.harm_base_rate = 0.0;
  const Dataset ds = generate_dataset(cfg).dataset;
  for (const Step& s : ds.steps) {
    CHECK_FALSE(s.harm);
    CHECK(s.reward >= 0.0);
  }
}

TEST_CASE("step and episode counts follow n_patients x horizon") {
  SynthConfig cfg = small_config(5);
  cfg.n_patients = 2;
  cfg.horizon = 3;
  const Dataset ds = generate_dataset(cfg).dataset;
  CHECK(ds.size() == 6);
  CHECK(ds.episodes.size() == 2);
  for (const auto& ep : ds.episodes) CHECK(ep.length() == 3);
  CHECK(ds.action_count == cfg.action_count);
  CHECK(ds.feature_names.size() == static_cast<size_t>(cfg.state_dim));
  CHECK(ds.n_patients() == 2);
}

TEST_CASE("generation is bit-identical across runs and thread counts") {
  const SynthConfig cfg = small_config(11);
  const Dataset one = generate_dataset(cfg, 1).dataset;
  const Dataset two = generate_dataset(cfg, 1).dataset;
  const Dataset four = generate_dataset(cfg, 4).dataset;
  CHECK(identical(one, two));
  CHECK(identical(one, four));

  SynthConfig other = cfg;
  other.seed = 12;
  CHECK_FALSE(identical(one, generate_dataset(other).dataset));
}

TEST_CASE("marginal harm rate tracks the configured target at scale") {
  SynthConfig cfg;
  cfg.n_patients = 6000;
  cfg.horizon = 20;
  cfg.action_count = 5;
  cfg.state_dim = 5;
  cfg.seed = 21;
  const Dataset ds = generate_dataset(cfg, 4).dataset;
  REQUIRE(ds.size() == 120000);
  double rate = 0.0;
  for (const Step& s : ds.steps) rate += s.harm ? 1.0 : 0.0;
  rate /= static_cast<double>(ds.size());
  CHECK(rate > 0.8 * cfg.harm_base_rate);
  CHECK(rate < 1.2 * cfg.harm_base_rate);
}

TEST_CASE("harm flags and reward signs agree, offsets included") {
  SynthConfig cfg = small_config(9);
  cfg.race_reward_offsets = {-0.3, 0.2, 0.0, 0.0, 0.0, 0.0};
  cfg.race_risk_offsets = {0.5, -0.5, 0.0, 0.0, 0.0, 0.0};
  cfg.harm_base_rate = 0.15;  // enough harm events to exercise both branches
  const Dataset ds = generate_dataset(cfg).dataset;
  size_t harms = 0;
  for (const Step& s : ds.steps) {
    CHECK(s.harm == (s.reward < 0.0));
    harms += s.harm;
  }
  CHECK(harms > 0);
}

TEST_CASE("prev_reward chains within each generated episode") {
  const Dataset ds = generate_dataset(small_config(15)).dataset;
  for (const auto& ep : ds.episodes) {
    CHECK(ds.steps[ep.begin].prev_reward == 0.0);
    for (size_t i = ep.begin + 1; i < ep.end; ++i)
      CHECK(ds.steps[i].prev_reward == ds.steps[i - 1].reward);
  }
}

TEST_CASE("stronger risk signal raises the oracle's discrimination") {
  const std::vector<double> strengths = {0.5, 1.5, 3.0};
  std::vector<double> mean_auc(strengths.size(), 0.0);
  const int n_seeds = 5;
  for (size_t k = 0; k < strengths.size(); ++k) {
    for (int seed = 0; seed < n_seeds; ++seed) {
      SynthConfig cfg;
      cfg.n_patients = 1500;
      cfg.horizon = 8;
      cfg.action_count = 4;
      cfg.state_dim = 4;
      cfg.risk_signal_strength = strengths[k];
      cfg.seed = 1000 + static_cast<uint64_t>(seed);
      const GenerationResult res = generate_dataset(cfg, 2);
      const std::vector<double> scores = oracle_scores(res.dataset, res.mdp.continuous);
      std::vector<uint8_t> labels(res.dataset.size());
      for (size_t i = 0; i < labels.size(); ++i) labels[i] = res.dataset.steps[i].harm;
      mean_auc[k] += auc(scores, labels) / n_seeds;
    }
  }
  CHECK(mean_auc[0] < mean_auc[1]);
  CHECK(mean_auc[1] < mean_auc[2]);
  CHECK(mean_auc[0] > 0.5);  // even the weak signal beats chance
}

TEST_CASE("invalid generator configs are rejected") {
  SynthConfig cfg = small_config(1);
  cfg.n_patients = 0;
  CHECK_THROWS_AS(generate_dataset(cfg), InvalidConfigError);
  cfg = small_config(1);
  cfg.action_count = 1;
  CHECK_THROWS_AS(generate_dataset(cfg), InvalidConfigError);
  cfg = small_config(1);
  cfg.harm_base_rate = 1.5;
  CHECK_THROWS_AS(generate_dataset(cfg), InvalidConfigError);
}

TEST_CASE("one deterministic transition values at its reward") {
  TabularMdp tab;
  tab.n_states = 1;
  tab.n_actions = 1;
  tab.horizon = 1;
  tab.initial_state = 0;
  tab.transition = {1.0};
  tab.reward = {1.0};
  const ValueEstimate v = true_policy_value(wrap_tabular(tab), UniformPolicy(1), 0.5);
  CHECK(v.value == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(v.std_error == 0.0);
}

TEST_CASE("two-step chain with unit rewards sums to two at gamma one") {
  TabularMdp tab;
  tab.n_states = 2;
  tab.n_actions = 1;
  tab.horizon = 2;
  tab.initial_state = 0;
  tab.transition = {0.0, 1.0,   // s0 -> s1
                    0.0, 1.0};  // s1 -> s1
  tab.reward = {1.0, 1.0};
  const ValueEstimate v = true_policy_value(wrap_tabular(tab), UniformPolicy(1), 1.0);
  CHECK(v.value == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("gamma zero reduces the value to the expected first reward") {
  const GroundTruthMDP mdp = make_tabular_mdp(3, 3, 5, 77);
  const ValueEstimate v = true_policy_value(mdp, UniformPolicy(3), 0.0);
  double expected = 0.0;
  for (int a = 0; a < 3; ++a) expected += mdp.tabular.r(mdp.tabular.initial_state, a) / 3.0;
  CHECK(v.value == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("make_tabular_mdp emits proper transition rows") {
  const GroundTruthMDP mdp = make_tabular_mdp(4, 3, 6, 5);
  const TabularMdp& tab = mdp.tabular;
  for (int s = 0; s < tab.n_states; ++s) {
    for (int a = 0; a < tab.n_actions; ++a) {
      double total = 0.0;
      for (int nxt = 0; nxt < tab.n_states; ++nxt) {
        CHECK(tab.p(s, a, nxt) >= 0.0);
        total += tab.p(s, a, nxt);
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(std::abs(tab.r(s, a)) <= 1.0);
    }
  }
  // seeded construction is stable
  const GroundTruthMDP again = make_tabular_mdp(4, 3, 6, 5);
  CHECK(again.tabular.transition == tab.transition);
  CHECK(again.tabular.reward == tab.reward);
}

TEST_CASE("tabular rollouts log one-hot states and the mdp's rewards") {
  const GroundTruthMDP mdp = make_tabular_mdp(3, 3, 4, 13);
  const Dataset ds = generate_tabular_dataset(mdp, 25, 99);
  CHECK(ds.episodes.size() == 25);
  CHECK(ds.size() == 100);
  CHECK(ds.action_count == 3);
  REQUIRE(ds.feature_names.size() == 3);
  for (size_t i = 0; i < ds.size(); ++i) {
    const auto row = ds.state(i);
    int ones = 0;
    int state = -1;
    for (size_t j = 0; j < row.size(); ++j) {
      CHECK((row[j] == 0.0 || row[j] == 1.0));
      if (row[j] == 1.0) {
        ++ones;
        state = static_cast<int>(j);
      }
    }
    CHECK(ones == 1);
    const Step& s = ds.steps[i];
    CHECK(s.action >= 0);
    CHECK(s.action < 3);
    CHECK(s.reward == mdp.tabular.r(state, s.action));
  }
  // all episodes start at the mdp's initial state
  for (const auto& ep : ds.episodes)
    CHECK(ds.state(ep.begin)[static_cast<size_t>(mdp.tabular.initial_state)] == 1.0);
}

TEST_CASE("ground truth sidecar is written as readable json") {
  testutil::TempDir dir("haco_synth");
  const GenerationResult res = generate_dataset(small_config(2));
  const std::string path = dir.file("truth.json");
  save_ground_truth(res.mdp, path);
  const std::string text = testutil::read_file(path);
  CHECK(text.find("harm_intercept") != std::string::npos);
  CHECK(text.find("risk_signal_strength") != std::string::npos);
}

}  // TEST_SUITE
