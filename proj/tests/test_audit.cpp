#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "haco/audit.hpp"
#include "haco/errors.hpp"
#include "haco/rng.hpp"
#include "test_util.hpp"

using namespace haco;

namespace {

Dataset episode_per_patient(const std::vector<Demographics>& people) {
  std::vector<testutil::EpisodeSpec> eps;
  for (size_t i = 0; i < people.size(); ++i) {
    testutil::EpisodeSpec ep;
    ep.patient = "p" + std::to_string(i);
    ep.actions = {0};
    ep.rewards = {0.0};
    ep.states = {{0.0}};
    eps.push_back(std::move(ep));
  }
  Dataset ds = testutil::build_dataset({"x0"}, eps, 2);
  for (size_t i = 0; i < people.size(); ++i) ds.demographics["p" + std::to_string(i)] = people[i];
  return ds;
}

const SubgroupSummary& row_for(const std::vector<SubgroupSummary>& rows, GroupDim dim,
                               const std::string& level) {
  for (const auto& r : rows)
    if (r.group == dim && r.level == level) return r;
  REQUIRE(false);
  return rows.front();
}

size_t level_count(const std::vector<SubgroupSummary>& rows, GroupDim dim) {
  size_t c = 0;
  for (const auto& r : rows) c += r.group == dim;
  return c;
}

}  // namespace

TEST_SUITE("audit") {

TEST_CASE("discounted episodic returns") {
  testutil::EpisodeSpec a;
  a.patient = "p0";
  a.actions = {0, 0, 0};
  a.rewards = {-1.0, 0.0, 1.0};
  a.states = {{0.0}, {0.0}, {0.0}};
  testutil::EpisodeSpec b;
  b.patient = "p1";
  b.actions = {0, 0};
  b.rewards = {1.0, 1.0};
  b.states = {{0.0}, {0.0}};
  testutil::EpisodeSpec c;
  c.patient = "p2";
  c.actions = {0};
  c.rewards = {0.375};
  c.states = {{0.0}};
  const Dataset ds = testutil::build_dataset({"x0"}, {a, b, c}, 1);

  CHECK(episodic_return(ds, ds.episodes[0], 1.0) == 0.0);
  CHECK(episodic_return(ds, ds.episodes[1], 0.5) == 1.5);
  CHECK(episodic_return(ds, ds.episodes[2], 0.9) == 0.375);

  const std::vector<double> all = episode_returns(ds, 1.0);
  CHECK(all == std::vector<double>{0.0, 2.0, 0.375});
}

TEST_CASE("bootstrap interval of a constant sample is a point") {
  const std::vector<double> v(10, 0.7);
  const BootstrapCi ci = bootstrap_ci(v, 200, 0.95, 5);
  CHECK(ci.mean == doctest::Approx(0.7).epsilon(1e-14));
  CHECK(ci.ci_low == ci.mean);
  CHECK(ci.ci_high == ci.mean);
}

TEST_CASE("bootstrap interval is seed-deterministic and brackets the mean") {
  Rng rng(71);
  for (uint64_t seed = 0; seed < 50; ++seed) {
    std::vector<double> v(50);
    for (double& x : v) x = rng.normal();
    const BootstrapCi one = bootstrap_ci(v, 200, 0.95, seed);
    const BootstrapCi two = bootstrap_ci(v, 200, 0.95, seed);
    CHECK(one.ci_low == two.ci_low);
    CHECK(one.ci_high == two.ci_high);
    CHECK(one.ci_low <= one.mean);
    CHECK(one.mean <= one.ci_high);
  }
}

TEST_CASE("bootstrap interval width tracks the CLT rate") {
  Rng rng(73);
  std::vector<double> v(10000);
  for (double& x : v) x = rng.normal();
  const BootstrapCi ci = bootstrap_ci(v, 1000, 0.95, 9);
  const double half = (ci.ci_high - ci.ci_low) / 2.0;
  const double clt = 1.96 / std::sqrt(10000.0);
  CHECK(half > 0.8 * clt);
  CHECK(half < 1.2 * clt);
}

TEST_CASE("bootstrap interval input validation") {
  const std::vector<double> one = {1.0};
  const std::vector<double> two = {1.0, 2.0};
  CHECK_THROWS_AS(bootstrap_ci(one, 200, 0.95, 1), InsufficientDataError);
  CHECK_THROWS_AS(bootstrap_ci(two, 99, 0.95, 1), InsufficientDataError);
  CHECK_THROWS_AS(bootstrap_ci(two, 200, 1.0, 1), InvalidConfigError);
  CHECK_THROWS_AS(bootstrap_ci(two, 200, 0.0, 1), InvalidConfigError);
}

TEST_CASE("bootstrap p-values behave at the extremes") {
  Rng rng(77);
  std::vector<double> base(200);
  for (double& x : base) x = rng.normal();
  const std::vector<double> copy = base;

  // Identical distributions in distinct storage: nowhere near significant.
  CHECK(bootstrap_pvalue(base, copy, 500, 3) > 0.5);
  // The same storage compared against itself is 1.0 by definition.
  CHECK(bootstrap_pvalue(base, base, 500, 3) == 1.0);

  std::vector<double> high(500), low(500);
  for (double& x : high) x = 1.0 + 0.1 * rng.normal();
  for (double& x : low) x = 0.1 * rng.normal();
  CHECK(bootstrap_pvalue(high, low, 1000, 7) == 1.0 / 1000.0);

  for (uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<double> a(8), b(8);
    for (double& x : a) x = rng.normal();
    for (double& x : b) x = rng.normal();
    const double p = bootstrap_pvalue(a, b, 200, seed);
    CHECK(p >= 1.0 / 200.0);
    CHECK(p <= 1.0);
  }
  CHECK_THROWS_AS(bootstrap_pvalue(base, copy, 99, 1), InsufficientDataError);
  const std::vector<double> empty;
  CHECK_THROWS_AS(bootstrap_pvalue(empty, copy, 200, 1), InsufficientDataError);
}

TEST_CASE("standardized mean difference") {
  const std::vector<double> g123 = {1.0, 2.0, 3.0};
  const std::vector<double> r123 = {1.0, 2.0, 3.0};
  CHECK(cohens_d(g123, r123) == 0.0);

  const std::vector<double> g = {0.0, 2.0};
  const std::vector<double> r = {1.0, 3.0};
  CHECK(cohens_d(g, r) == doctest::Approx(-std::sqrt(0.5)).epsilon(1e-12));
  CHECK(cohens_d(g, r) == -cohens_d(r, g));

  Rng rng(81);
  std::vector<double> shifted(5000), centered(5000);
  for (double& x : shifted) x = 1.0 + rng.normal();
  for (double& x : centered) x = rng.normal();
  CHECK(cohens_d(shifted, centered) == doctest::Approx(1.0).epsilon(0.1));

  const std::vector<double> flat = {2.0, 2.0, 2.0};
  CHECK_THROWS_AS(cohens_d(flat, flat), ZeroVarianceError);
  const std::vector<double> single = {1.0};
  CHECK_THROWS_AS(cohens_d(single, g), InsufficientDataError);
}

TEST_CASE("a five-of-ten bin gets the textbook Wilson interval") {
  std::vector<double> predicted(10);
  std::vector<uint8_t> observed(10, 0);
  for (size_t i = 0; i < 10; ++i) predicted[i] = 0.05 + 0.09 * static_cast<double>(i);
  for (size_t i = 0; i < 5; ++i) observed[i * 2] = 1;

  const auto bins = calibration_bins(predicted, observed, 1, 1.96);
  REQUIRE(bins.size() == 1);
  CHECK(bins[0].n == 10);
  CHECK(bins[0].observed_rate == 0.5);
  CHECK(bins[0].wilson_low == doctest::Approx(0.237).epsilon(1e-3));
  CHECK(bins[0].wilson_high == doctest::Approx(0.763).epsilon(1e-3));
}

TEST_CASE("an empty-count bin keeps a zero lower bound and a positive upper") {
  const std::vector<double> predicted = {0.1, 0.2, 0.3, 0.4};
  const std::vector<uint8_t> observed(4, 0);
  const auto bins = calibration_bins(predicted, observed, 1, 1.96);
  REQUIRE(bins.size() == 1);
  CHECK(bins[0].wilson_low == 0.0);
  CHECK(bins[0].wilson_high > 0.0);
  CHECK(bins[0].wilson_high < 1.0);
}

TEST_CASE("bins partition the sample in score order") {
  Rng rng(83);
  std::vector<double> predicted(103);
  std::vector<uint8_t> observed(103);
  for (size_t i = 0; i < predicted.size(); ++i) {
    predicted[i] = rng.uniform();
    observed[i] = rng.uniform() < 0.5;
  }
  const auto bins = calibration_bins(predicted, observed, 10, 1.96);
  REQUIRE(bins.size() == 10);
  size_t total = 0, smallest = predicted.size(), largest = 0;
  for (const auto& b : bins) {
    total += b.n;
    smallest = std::min(smallest, b.n);
    largest = std::max(largest, b.n);
  }
  CHECK(total == predicted.size());
  CHECK(largest - smallest <= 1);
  for (size_t i = 1; i < bins.size(); ++i) {
    CHECK(bins[i].bin_index == static_cast<int>(i));
    CHECK(bins[i].mean_predicted >= bins[i - 1].mean_predicted);
  }
}

TEST_CASE("a perfectly calibrated model covers the identity in nearly every bin") {
  Rng rng(87);
  const size_t n = 100000;
  std::vector<double> predicted(n);
  std::vector<uint8_t> observed(n);
  for (size_t i = 0; i < n; ++i) {
    predicted[i] = rng.uniform();
    observed[i] = rng.uniform() < predicted[i];
  }
  const auto bins = calibration_bins(predicted, observed, 10, 1.96);
  REQUIRE(bins.size() == 10);
  int covered = 0;
  for (const auto& b : bins)
    covered += b.wilson_low <= b.mean_predicted && b.mean_predicted <= b.wilson_high;
  CHECK(covered >= 9);
}

TEST_CASE("calibration input validation") {
  const std::vector<double> predicted = {0.1, 0.2, 0.3};
  const std::vector<uint8_t> observed = {0, 1};
  CHECK_THROWS_AS(calibration_bins(predicted, observed, 1, 1.96), InvalidConfigError);
  const std::vector<uint8_t> three = {0, 1, 0};
  CHECK_THROWS_AS(calibration_bins(predicted, three, 10, 1.96), TooFewSamplesError);
}

TEST_CASE("fully unknown demographics collapse to single levels") {
  const std::vector<Demographics> people(6, Demographics{});
  Dataset ds = episode_per_patient(people);
  const std::vector<double> returns(6, 0.5);
  const auto rows = subgroup_audit(ds, returns, 200, 200, 11);

  CHECK(level_count(rows, GroupDim::Age) == 1);
  CHECK(level_count(rows, GroupDim::Sex) == 1);
  CHECK(level_count(rows, GroupDim::Race) == 1);
  const auto& age = row_for(rows, GroupDim::Age, "unknown");
  CHECK(age.is_reference);
  CHECK(age.p_value == 1.0);
  CHECK(age.n == 6);
  // Unknown sex reports under the male level rather than its own bucket.
  const auto& sex = row_for(rows, GroupDim::Sex, "male");
  CHECK(sex.is_reference);
  CHECK(sex.n == 6);
  CHECK(row_for(rows, GroupDim::Race, "unknown").n == 6);
}

TEST_CASE("the largest level is the reference, ties to the lower enum value") {
  std::vector<Demographics> people;
  for (int i = 0; i < 6; ++i)
    people.push_back(Demographics{AgeBin::Under35, Sex::Female, Race::White});
  for (int i = 0; i < 4; ++i)
    people.push_back(Demographics{AgeBin::Plus65, Sex::Male, Race::Black});
  Dataset ds = episode_per_patient(people);
  Rng rng(13);
  std::vector<double> returns(people.size());
  for (double& r : returns) r = rng.normal();

  const auto rows = subgroup_audit(ds, returns, 200, 200, 17);
  const auto& female = row_for(rows, GroupDim::Sex, "female");
  CHECK(female.is_reference);
  CHECK(female.p_value == 1.0);
  CHECK(female.n == 6);
  const auto& male = row_for(rows, GroupDim::Sex, "male");
  CHECK_FALSE(male.is_reference);
  CHECK(male.reference_level == "female");
  CHECK(male.p_value >= 1.0 / 200.0);

  // Per-dimension level sizes partition the episodes.
  for (const GroupDim dim : {GroupDim::Age, GroupDim::Sex, GroupDim::Race}) {
    size_t total = 0;
    for (const auto& r : rows)
      if (r.group == dim) total += r.n;
    CHECK(total == people.size());
  }

  // An even split falls back to the lower enum value.
  std::vector<Demographics> tied;
  for (int i = 0; i < 4; ++i) tied.push_back(Demographics{AgeBin::Under35, Sex::Female, Race::White});
  for (int i = 0; i < 4; ++i) tied.push_back(Demographics{AgeBin::Under35, Sex::Male, Race::White});
  Dataset tds = episode_per_patient(tied);
  const std::vector<double> tr(tied.size(), 0.0);
  const auto trows = subgroup_audit(tds, tr, 200, 200, 19);
  CHECK(row_for(trows, GroupDim::Sex, "female").is_reference);
  CHECK_FALSE(row_for(trows, GroupDim::Sex, "male").is_reference);
}

TEST_CASE("a planted return gap is flagged against the reference") {
  std::vector<Demographics> people;
  for (int i = 0; i < 320; ++i)
    people.push_back(Demographics{AgeBin::From35To49, Sex::Female, Race::White});
  for (int i = 0; i < 300; ++i)
    people.push_back(Demographics{AgeBin::From35To49, Sex::Female, Race::Black});
  Dataset ds = episode_per_patient(people);

  Rng rng(23);
  std::vector<double> returns(people.size());
  for (size_t i = 0; i < returns.size(); ++i) {
    const bool black = i >= 320;
    returns[i] = (black ? -0.5 : 0.0) + 0.1 * rng.normal();
  }

  const auto rows = subgroup_audit(ds, returns, 200, 200, 29);
  const auto& white = row_for(rows, GroupDim::Race, "white");
  const auto& black = row_for(rows, GroupDim::Race, "black");
  CHECK(white.is_reference);
  CHECK(black.reference_level == "white");
  CHECK(black.p_value < 0.05);
  const bool excludes = black.ci_high < white.mean || black.ci_low > white.mean;
  CHECK(excludes);
  CHECK(black.mean == doctest::Approx(-0.5).epsilon(0.05));
}

TEST_CASE("singleton levels get point intervals and absent patients count as unknown") {
  std::vector<Demographics> people;
  for (int i = 0; i < 5; ++i)
    people.push_back(Demographics{AgeBin::Under35, Sex::Female, Race::White});
  people.push_back(Demographics{AgeBin::Under35, Sex::Female, Race::Hispanic});
  Dataset ds = episode_per_patient(people);
  ds.demographics.erase("p2");  // this patient now has no demographics row

  std::vector<double> returns = {0.1, 0.2, 0.3, 0.4, 0.5, 0.42};
  const auto rows = subgroup_audit(ds, returns, 200, 200, 31);

  const auto& hisp = row_for(rows, GroupDim::Race, "hispanic");
  CHECK(hisp.n == 1);
  CHECK(hisp.mean == 0.42);
  CHECK(hisp.ci_low == 0.42);
  CHECK(hisp.ci_high == 0.42);

  CHECK(row_for(rows, GroupDim::Race, "unknown").n == 1);
  CHECK(row_for(rows, GroupDim::Race, "white").n == 4);
  CHECK(row_for(rows, GroupDim::Age, "unknown").n == 1);
}

TEST_CASE("subgroup audit validation and determinism") {
  const std::vector<Demographics> people(4, Demographics{});
  Dataset ds = episode_per_patient(people);
  const std::vector<double> returns(4, 1.0);

  Dataset no_demo = ds;
  no_demo.demographics.clear();
  CHECK_THROWS_AS(subgroup_audit(no_demo, returns, 200, 200, 1), NoDemographicsError);

  const std::vector<double> short_returns(3, 1.0);
  CHECK_THROWS_AS(subgroup_audit(ds, short_returns, 200, 200, 1), InvalidConfigError);

  std::vector<Demographics> mixed;
  for (int i = 0; i < 8; ++i)
    mixed.push_back(Demographics{i % 2 ? AgeBin::Under35 : AgeBin::Plus65,
                                 i % 3 ? Sex::Female : Sex::Male,
                                 i % 2 ? Race::White : Race::Asian});
  Dataset mds = episode_per_patient(mixed);
  Rng rng(37);
  std::vector<double> mr(mixed.size());
  for (double& r : mr) r = rng.normal();
  const auto a = subgroup_audit(mds, mr, 200, 200, 41);
  const auto b = subgroup_audit(mds, mr, 200, 200, 41);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].level == b[i].level);
    CHECK(a[i].p_value == b[i].p_value);
    CHECK(a[i].ci_low == b[i].ci_low);
    CHECK(a[i].ci_high == b[i].ci_high);
  }
}

}  // TEST_SUITE
