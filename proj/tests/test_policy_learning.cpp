#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "haco/errors.hpp"
#include "haco/policy_learning.hpp"
#include "haco/rng.hpp"
#include "haco/trajectory_store.hpp"
#include "test_util.hpp"

using namespace haco;

namespace {

// n steps in one episode: uniform actions, standard-normal states, and rewards
// that vary so no feature column (prev_reward included) is constant.
Dataset random_action_dataset(size_t n, int action_count, int state_dim, uint64_t seed) {
  Rng rng(seed);
  testutil::EpisodeSpec ep;
  ep.patient = "p0";
  for (size_t i = 0; i < n; ++i) {
    ep.actions.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(action_count))));
    ep.rewards.push_back(2.0 * rng.uniform() - 1.0);
    std::vector<double> s(static_cast<size_t>(state_dim));
    for (double& v : s) v = rng.normal();
    ep.states.push_back(std::move(s));
  }
  std::vector<std::string> names;
  for (int j = 0; j < state_dim; ++j) names.push_back("x" + std::to_string(j));
  return testutil::build_dataset(names, {ep}, action_count);
}

Eigen::VectorXd multinomial_fd(const Eigen::MatrixXd& x, const std::vector<int>& actions,
                               int action_count, double lambda,
                               std::span<const double> weights, const Eigen::VectorXd& params) {
  Eigen::VectorXd g(params.size());
  for (Eigen::Index j = 0; j < params.size(); ++j) {
    const double h = 1e-5 * (1.0 + std::abs(params[j]));
    Eigen::VectorXd hi = params, lo = params;
    hi[j] += h;
    lo[j] -= h;
    g[j] = (multinomial_objective(x, actions, action_count, lambda, weights, hi) -
            multinomial_objective(x, actions, action_count, lambda, weights, lo)) /
           (2 * h);
  }
  return g;
}

double mean_prob_of_action(const SoftmaxPolicy& pol, const Dataset& ds, int action) {
  double total = 0.0;
  for (size_t i = 0; i < ds.size(); ++i)
    total += pol.action_probs_vec(step_context(ds, i))[static_cast<size_t>(action)];
  return total / static_cast<double>(ds.size());
}

}  // namespace

TEST_SUITE("policy_learning") {

TEST_CASE("zero parameters spread probability uniformly") {
  SoftmaxPolicy pol;
  pol.feature_names = {"t_norm", "prev_reward"};
  pol.t_scale = 1.0;
  pol.weights.assign(3 * 2, 0.0);
  pol.bias.assign(3, 0.0);
  const std::vector<double> state;
  const StepContext ctx{std::span<const double>(state), 0, 0.0, std::nullopt};
  const std::vector<double> probs = pol.action_probs_vec(ctx);
  for (double p : probs) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(pol.greedy(ctx) == 0);  // ties break to the lowest index
}

TEST_CASE("a dominant logit saturates its action") {
  SoftmaxPolicy pol;
  pol.feature_names = {"t_norm", "prev_reward"};
  pol.t_scale = 1.0;
  pol.weights.assign(2 * 2, 0.0);
  pol.bias = {0.0, 30.0};
  const std::vector<double> state;
  const StepContext ctx{std::span<const double>(state), 0, 0.0, std::nullopt};
  CHECK(pol.action_probs_vec(ctx)[1] >= 1.0 - 1e-9);
  CHECK(pol.greedy(ctx) == 1);
}

TEST_CASE("log-two logit gap gives a two-to-one split") {
  SoftmaxPolicy pol;
  pol.feature_names = {"t_norm", "prev_reward"};
  pol.t_scale = 1.0;
  pol.weights.assign(2 * 2, 0.0);
  pol.bias = {0.0, -std::log(2.0)};  // logits (ln 2, 0) shifted to pin class 0
  const std::vector<double> state;
  const StepContext ctx{std::span<const double>(state), 0, 0.0, std::nullopt};
  const std::vector<double> probs = pol.action_probs_vec(ctx);
  CHECK(probs[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(probs[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("shifting every logit by a constant changes nothing") {
  Rng rng(3);
  SoftmaxPolicy a;
  a.feature_names = {"t_norm", "prev_reward", "x0"};
  a.t_scale = 10.0;
  a.weights.resize(3 * 3);
  a.bias.resize(3);
  for (double& w : a.weights) w = rng.normal();
  for (double& b : a.bias) b = rng.normal();

  SoftmaxPolicy b = a;
  const double c = 3.7;
  for (double& v : b.bias) v += c;

  const std::vector<double> state = {0.4};
  const StepContext ctx{std::span<const double>(state), 7, -0.5, std::nullopt};
  const std::vector<double> pa = a.action_probs_vec(ctx);
  const std::vector<double> pb = b.action_probs_vec(ctx);
  for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == doctest::Approx(pb[i]).epsilon(1e-12));
  CHECK(std::accumulate(pa.begin(), pa.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("greedy is invariant under positive logit scaling") {
  Rng rng(5);
  SoftmaxPolicy a;
  a.feature_names = {"t_norm", "prev_reward", "x0"};
  a.t_scale = 5.0;
  a.weights.resize(4 * 3);
  a.bias.resize(4);
  for (double& w : a.weights) w = rng.normal();
  for (double& b : a.bias) b = rng.normal();

  SoftmaxPolicy doubled = a;
  for (double& w : doubled.weights) w *= 2.0;
  for (double& b : doubled.bias) b *= 2.0;

  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<double> state = {rng.normal()};
    const StepContext ctx{std::span<const double>(state), trial, rng.normal(), std::nullopt};
    CHECK(a.greedy(ctx) == doubled.greedy(ctx));
  }
}

TEST_CASE("multinomial gradient matches central differences") {
  Rng rng(11);
  const int n = 30, d = 3, A = 4;
  Eigen::MatrixXd x(n, d);
  std::vector<int> actions(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) x(i, j) = rng.normal();
    actions[i] = static_cast<int>(rng.below(A));
  }
  std::vector<double> sw(n);
  for (double& w : sw) w = 0.5 + rng.uniform();

  for (int point = 0; point < 3; ++point) {
    Eigen::VectorXd params((A - 1) * (d + 1));
    for (Eigen::Index j = 0; j < params.size(); ++j) params[j] = rng.normal();

    const Eigen::VectorXd g =
        multinomial_gradient(x, actions, A, 0.1, std::span<const double>{}, params);
    const Eigen::VectorXd fd =
        multinomial_fd(x, actions, A, 0.1, std::span<const double>{}, params);
    CHECK((g - fd).norm() <= 1e-5 * std::max(1.0, g.norm()));

    const Eigen::VectorXd gw = multinomial_gradient(x, actions, A, 0.1, sw, params);
    const Eigen::VectorXd fdw = multinomial_fd(x, actions, A, 0.1, sw, params);
    CHECK((gw - fdw).norm() <= 1e-5 * std::max(1.0, gw.norm()));
  }
}

TEST_CASE("a parity-separable safe set is learned almost perfectly") {
  testutil::EpisodeSpec ep;
  ep.patient = "p0";
  for (int t = 0; t < 400; ++t) {
    ep.actions.push_back(t % 2);
    ep.rewards.push_back(0.0);
    ep.states.push_back({static_cast<double>(t % 2)});
  }
  const Dataset ds = testutil::build_dataset({"parity"}, {ep}, 2);
  const std::vector<uint8_t> mask(ds.size(), 1);
  const SoftmaxPolicy pol = fit_preference_policy(ds, mask, PolicyFitOptions{});

  size_t hits = 0;
  for (size_t i = 0; i < ds.size(); ++i)
    hits += pol.greedy(step_context(ds, i)) == ds.steps[i].action;
  CHECK(static_cast<double>(hits) / static_cast<double>(ds.size()) > 0.95);
}

TEST_CASE("no signal fits back to near-uniform probabilities") {
  const Dataset ds = random_action_dataset(2000, 3, 2, 21);
  const std::vector<uint8_t> mask(ds.size(), 1);
  const SoftmaxPolicy pol = fit_preference_policy(ds, mask, PolicyFitOptions{});
  for (int a = 0; a < 3; ++a)
    CHECK(std::abs(mean_prob_of_action(pol, ds, a) - 1.0 / 3.0) < 0.05);
}

TEST_CASE("masking an action out starves its probability") {
  const Dataset ds = random_action_dataset(3600, 9, 2, 33);
  std::vector<uint8_t> mask(ds.size());
  for (size_t i = 0; i < ds.size(); ++i) mask[i] = ds.steps[i].action != 7;
  const SoftmaxPolicy pol = fit_preference_policy(ds, mask, PolicyFitOptions{});
  CHECK(mean_prob_of_action(pol, ds, 7) < 1.0 / 9.0);
}

TEST_CASE("degenerate masks are rejected") {
  const Dataset ds = random_action_dataset(100, 3, 1, 41);
  const std::vector<uint8_t> none(ds.size(), 0);
  CHECK_THROWS_AS(fit_preference_policy(ds, none, PolicyFitOptions{}), EmptySafeSetError);

  std::vector<uint8_t> single(ds.size(), 0);
  for (size_t i = 0; i < ds.size(); ++i) single[i] = ds.steps[i].action == 1;
  CHECK_THROWS_AS(fit_preference_policy(ds, single, PolicyFitOptions{}),
                  SingleActionSafeSetError);
}

TEST_CASE("unregularized fits require every action in the safe set") {
  const Dataset ds = random_action_dataset(600, 4, 1, 43);
  std::vector<uint8_t> mask(ds.size());
  for (size_t i = 0; i < ds.size(); ++i) mask[i] = ds.steps[i].action != 2;
  PolicyFitOptions opts;
  opts.l2_lambda = 0.0;
  CHECK_THROWS_AS(fit_preference_policy(ds, mask, opts), InvalidConfigError);

  const std::vector<uint8_t> all(ds.size(), 1);
  CHECK_NOTHROW(fit_preference_policy(ds, all, opts));
}

TEST_CASE("sample weights accept masked-row or full-dataset length") {
  const Dataset ds = random_action_dataset(500, 3, 2, 47);
  std::vector<uint8_t> mask(ds.size());
  size_t kept = 0;
  for (size_t i = 0; i < ds.size(); ++i) {
    mask[i] = i % 2 == 0;
    kept += mask[i];
  }
  const SoftmaxPolicy plain = fit_preference_policy(ds, mask, PolicyFitOptions{});

  PolicyFitOptions uniform2;  // constant weights rescale nothing
  uniform2.sample_weights = std::vector<double>(kept, 2.0);
  const SoftmaxPolicy weighted = fit_preference_policy(ds, mask, uniform2);
  for (size_t i = 0; i < plain.weights.size(); ++i)
    CHECK(plain.weights[i] == doctest::Approx(weighted.weights[i]).epsilon(1e-9));

  PolicyFitOptions full;  // full-length weights are restricted to the mask
  full.sample_weights = std::vector<double>(ds.size(), 2.0);
  const SoftmaxPolicy restricted = fit_preference_policy(ds, mask, full);
  for (size_t i = 0; i < plain.weights.size(); ++i)
    CHECK(plain.weights[i] == doctest::Approx(restricted.weights[i]).epsilon(1e-9));

  PolicyFitOptions bad;
  bad.sample_weights = std::vector<double>(kept + 1, 1.0);
  CHECK_THROWS_AS(fit_preference_policy(ds, mask, bad), InvalidConfigError);
  PolicyFitOptions negative;
  negative.sample_weights = std::vector<double>(kept, -1.0);
  CHECK_THROWS_AS(fit_preference_policy(ds, mask, negative), InvalidConfigError);
}

TEST_CASE("behavior cloning recovers a separable logged policy") {
  Rng rng(53);
  std::vector<testutil::EpisodeSpec> eps;
  for (int e = 0; e < 40; ++e) {
    testutil::EpisodeSpec ep;
    ep.patient = "p" + std::to_string(e);
    for (int t = 0; t < 20; ++t) {
      const double s = rng.normal();
      ep.actions.push_back(s > 0 ? 1 : 0);
      ep.rewards.push_back(0.0);
      ep.states.push_back({s});
    }
    eps.push_back(std::move(ep));
  }
  const Dataset ds = testutil::build_dataset({"x0"}, eps, 2);
  const BcResult bc = fit_behavior_cloning(ds, BcSplit{}, PolicyFitOptions{});
  CHECK(bc.test_accuracy > 0.95);
  CHECK(bc.n_test_steps == 8 * 20);  // 40 episodes, the trailing 8 held out
}

TEST_CASE("uniform logging pins cloning accuracy to chance") {
  Rng rng(57);
  std::vector<testutil::EpisodeSpec> eps;
  for (int e = 0; e < 300; ++e) {
    testutil::EpisodeSpec ep;
    ep.patient = "p" + std::to_string(e);
    for (int t = 0; t < 10; ++t) {
      ep.actions.push_back(static_cast<int>(rng.below(5)));
      ep.rewards.push_back(0.0);
      ep.states.push_back({rng.normal(), rng.normal()});
    }
    eps.push_back(std::move(ep));
  }
  const Dataset ds = testutil::build_dataset({"x0", "x1"}, eps, 5);
  const BcResult bc = fit_behavior_cloning(ds, BcSplit{}, PolicyFitOptions{});
  CHECK(bc.n_test_steps == 600);
  CHECK(bc.test_accuracy > 0.2 - 0.06);
  CHECK(bc.test_accuracy < 0.2 + 0.06);
}

TEST_CASE("a single training episode is enough to run") {
  const Dataset ds = random_action_dataset(40, 2, 1, 61);
  // one episode only: re-slice into 5 episodes of 8 steps
  std::vector<testutil::EpisodeSpec> eps;
  Rng rng(61);
  for (int e = 0; e < 5; ++e) {
    testutil::EpisodeSpec ep;
    ep.patient = "p" + std::to_string(e);
    for (int t = 0; t < 8; ++t) {
      ep.actions.push_back(static_cast<int>(rng.below(2)));
      ep.rewards.push_back(0.0);
      ep.states.push_back({rng.normal()});
    }
    eps.push_back(std::move(ep));
  }
  const Dataset five = testutil::build_dataset({"x0"}, eps, 2);
  const BcResult bc = fit_behavior_cloning(five, BcSplit{0.2}, PolicyFitOptions{});
  CHECK(bc.n_test_steps == 32);
  CHECK(bc.test_accuracy >= 0.0);
  CHECK(bc.test_accuracy <= 1.0);
}

TEST_CASE("behavior cloning split validation") {
  const Dataset ds = random_action_dataset(40, 2, 1, 63);
  CHECK_THROWS_AS(fit_behavior_cloning(ds, BcSplit{0.0}, PolicyFitOptions{}),
                  InvalidConfigError);
  CHECK_THROWS_AS(fit_behavior_cloning(ds, BcSplit{1.0}, PolicyFitOptions{}),
                  InvalidConfigError);
  // a single episode cannot produce disjoint train and test sides
  CHECK_THROWS_AS(fit_behavior_cloning(ds, BcSplit{0.5}, PolicyFitOptions{}),
                  InsufficientEpisodesError);
}

TEST_CASE("preference fit on the cloning rows reproduces the cloning fit") {
  Rng rng(67);
  std::vector<testutil::EpisodeSpec> eps;
  for (int e = 0; e < 10; ++e) {
    testutil::EpisodeSpec ep;
    ep.patient = "p" + std::to_string(e);
    for (int t = 0; t < 25; ++t) {
      const double s = rng.normal();
      ep.actions.push_back(s > 0.5 ? 2 : static_cast<int>(rng.below(2)));
      ep.rewards.push_back(rng.uniform());
      ep.states.push_back({s});
    }
    eps.push_back(std::move(ep));
  }
  const Dataset ds = testutil::build_dataset({"x0"}, eps, 3);

  const BcResult bc = fit_behavior_cloning(ds, BcSplit{}, PolicyFitOptions{});

  std::vector<size_t> train_eps(8);  // same leading slice the cloning fit used
  std::iota(train_eps.begin(), train_eps.end(), size_t{0});
  const Dataset train = subset_episodes(ds, train_eps);
  const std::vector<uint8_t> all(train.size(), 1);
  const SoftmaxPolicy pref = fit_preference_policy(train, all, PolicyFitOptions{});

  REQUIRE(pref.weights.size() == bc.policy.weights.size());
  for (size_t i = 0; i < pref.weights.size(); ++i)
    CHECK(std::abs(pref.weights[i] - bc.policy.weights[i]) < 1e-8);
  for (size_t i = 0; i < pref.bias.size(); ++i)
    CHECK(std::abs(pref.bias[i] - bc.policy.bias[i]) < 1e-8);
  CHECK(pref.t_scale == bc.policy.t_scale);
}

TEST_CASE("softmax policy serialization round-trips") {
  const Dataset ds = random_action_dataset(300, 3, 2, 71);
  const std::vector<uint8_t> mask(ds.size(), 1);
  const SoftmaxPolicy pol = fit_preference_policy(ds, mask, PolicyFitOptions{});

  testutil::TempDir dir("haco_policy");
  const std::string path = dir.file("pol.json");
  save_policy(pol, path);
  const SoftmaxPolicy back = load_softmax_policy(path);
  CHECK(back.weights == pol.weights);
  CHECK(back.bias == pol.bias);
  CHECK(back.feature_names == pol.feature_names);
  CHECK(back.t_scale == pol.t_scale);
  CHECK(back.l2_lambda == pol.l2_lambda);

  testutil::write_file(dir.file("bad.json"), "{\"type\":\"linear\"}");
  CHECK_THROWS_AS(load_softmax_policy(dir.file("bad.json")), Error);
}

TEST_CASE("external probability tables load, renormalize, and validate") {
  testutil::TempDir dir("haco_policy");
  const std::string good = testutil::write_file(dir.file("ext.csv"),
                                                "step_index,p0,p1\n"
                                                "1,2,2\n"
                                                "0,1,3\n");
  const ExternalPolicy pol = load_external_policy(good, 2, 2);
  const std::vector<double> state;
  const StepContext row0{std::span<const double>(state), 0, 0.0, size_t{0}};
  const StepContext row1{std::span<const double>(state), 0, 0.0, size_t{1}};
  CHECK(pol.action_probs_vec(row0) == std::vector<double>{0.25, 0.75});
  CHECK(pol.action_probs_vec(row1) == std::vector<double>{0.5, 0.5});

  const StepContext missing{std::span<const double>(state), 0, 0.0, std::nullopt};
  CHECK_THROWS_AS(pol.action_probs_vec(missing), FeatureMismatchError);

  const std::string gap = testutil::write_file(dir.file("gap.csv"),
                                               "step_index,p0,p1\n"
                                               "0,1,1\n"
                                               "2,1,1\n");
  CHECK_THROWS_AS(load_external_policy(gap, 2, 3), InvalidConfigError);

  const std::string dup = testutil::write_file(dir.file("dup.csv"),
                                               "step_index,p0,p1\n"
                                               "0,1,1\n"
                                               "0,1,1\n");
  CHECK_THROWS_AS(load_external_policy(dup, 2, 2), InvalidConfigError);

  const std::string neg = testutil::write_file(dir.file("neg.csv"),
                                               "step_index,p0,p1\n"
                                               "0,-1,2\n");
  CHECK_THROWS_AS(load_external_policy(neg, 2, 1), InvalidConfigError);

  const std::string short_cols = testutil::write_file(dir.file("short.csv"),
                                                      "step_index,p0\n"
                                                      "0,1\n");
  CHECK_THROWS_AS(load_external_policy(short_cols, 2, 1), MissingRequiredColumnError);
}

}  // TEST_SUITE
