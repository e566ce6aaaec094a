#include "promptrel/protocols.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>

#include "promptrel/aggregate.hpp"
#include "promptrel/metrics.hpp"
#include "promptrel/rng.hpp"
#include "test_util.hpp"

using namespace promptrel;
using testutil::make_matrix;
using V = std::vector<double>;

namespace {

const V kGrid{1.00, 0.95, 0.90, 0.85, 0.80, 0.70, 0.60, 0.50};

CoverageCurve curve_from(const V& grid, const std::function<double(double)>& risk) {
  CoverageCurve c;
  for (double g : grid) c.points.push_back({g, 0, risk(g), risk(g), risk(g)});
  return c;
}

bool same_bits(const BootstrapResult& a, const BootstrapResult& b) {
  return std::memcmp(&a.point_delta, &b.point_delta, sizeof(double)) == 0 &&
         std::memcmp(&a.ci_low, &b.ci_low, sizeof(double)) == 0 &&
         std::memcmp(&a.ci_high, &b.ci_high, sizeof(double)) == 0 &&
         std::memcmp(&a.p_two_sided, &b.p_two_sided, sizeof(double)) == 0;
}

}  // namespace

TEST(WinCounts, Examples) {
  const std::vector<V> one{{0.5, 0.7}};
  const auto t = win_counts(one, {"a", "b"});
  EXPECT_EQ(t.wins, (std::vector<int>{1, 0}));
  EXPECT_EQ(t.avg_rank, (V{1.0, 2.0}));
  EXPECT_EQ(t.pairs, 1u);

  const std::vector<V> tie{{0.5, 0.5}};
  const auto u = win_counts(tie, {"a", "b"});
  EXPECT_EQ(u.wins, (std::vector<int>{1, 1}));
  EXPECT_EQ(u.avg_rank, (V{1.5, 1.5}));

  EXPECT_EQ(average_ranks(V{0.3, 0.1, 0.3, 0.2}), (V{3.5, 1.0, 3.5, 2.0}));
}

TEST(WinCounts, UntiedWinsNeverExceedPairs) {
  Pcg32 rng(71);
  for (int t = 0; t < 50; ++t) {
    const std::size_t pairs = 1 + rng.bounded(20), m = 2 + rng.bounded(6);
    std::vector<V> rows(pairs, V(m));
    for (auto& r : rows) {
      for (auto& v : r) v = rng.bounded(5);
    }
    std::vector<std::string> names(m);
    for (std::size_t j = 0; j < m; ++j) names[j] = "m" + std::to_string(j);
    const auto w = win_counts(rows, names);
    int untied = 0;
    for (const auto& r : rows) {
      const double best = *std::min_element(r.begin(), r.end());
      if (std::count(r.begin(), r.end(), best) == 1) ++untied;
    }
    int total = 0;
    for (int x : w.wins) total += x;
    EXPECT_GE(total, untied);
    EXPECT_LE(untied, static_cast<int>(pairs));
    // Mean of average ranks is (m+1)/2 on every pair.
    double s = 0.0;
    for (double r : w.avg_rank) s += r;
    EXPECT_NEAR(s / m, (m + 1) / 2.0, 1e-12);
  }
}

TEST(SweepRules, MeanProbDominates) {
  // Each pair: one prompt confidently wrong, the other mildly right. Averaging
  // probabilities is the least extreme and therefore best on NLL.
  std::vector<EvaluationPair> pairs;
  for (int p = 0; p < 14; ++p) {
    const double hi = 0.99 + 0.0005 * p, lo = 0.4 - 0.01 * p;
    pairs.push_back({"pair" + std::to_string(p),
                     make_matrix({{hi, lo}, {1 - hi, 1 - lo}}, testutil::labels_from({0, 1}))});
  }
  const std::vector<AggregationRule> rules{AggregationRule::parse("mean_prob"),
                                           AggregationRule::parse("mean_logit"),
                                           AggregationRule::parse("entropy_weighted_mean")};
  const auto t = sweep_rules(pairs, rules);
  EXPECT_EQ(t.pairs, 14u);
  EXPECT_EQ(t.wins[0], 14);
  EXPECT_EQ(t.avg_rank[0], 1.0);
  EXPECT_EQ(t.methods[0], "mean_prob");
}

TEST(SweepRules, FailingPairIsExcludedWithWarning) {
  std::vector<EvaluationPair> pairs{
      {"ok", make_matrix({{0.2, 0.3}, {0.8, 0.6}}, testutil::labels_from({0, 1}))},
      {"tiny", make_matrix({{0.2, 0.3}}, testutil::labels_from({0}))}};
  const std::vector<AggregationRule> rules{AggregationRule::parse("mean_prob"),
                                           AggregationRule::parse("bias_scale_logit_mean")};
  const auto t = sweep_rules(pairs, rules);
  EXPECT_EQ(t.pairs, 1u);
  ASSERT_EQ(t.warnings.size(), 1u);
  EXPECT_NE(t.warnings[0].find("tiny"), std::string::npos);
}

TEST(Uncertainty, Examples) {
  const auto m = make_matrix({{0.5, 0.5}, {0.2, 0.8}, {1.0, 0.3}});
  const auto ent = uncertainty(m, SignalKind::kEntropyMean);
  EXPECT_NEAR(ent.values[0], std::log(2.0), 1e-15);
  const auto sd = uncertainty(m, SignalKind::kStdPU);
  EXPECT_NEAR(sd.values[1], 0.3, 1e-15);
  const auto mg = uncertainty(m, SignalKind::kMarginSingle, 1);
  EXPECT_EQ(mg.values[2], 0.0);
  EXPECT_EQ(mg.values[0], 1.0);
  EXPECT_THROW(uncertainty(m, SignalKind::kMarginSingle), ValidationError);
  EXPECT_EQ(parse_signal("std_pu"), SignalKind::kStdPU);
  EXPECT_EQ(to_string(SignalKind::kMarginSingle), "margin_single");
  EXPECT_THROW(parse_signal("variance"), ValidationError);
}

TEST(RiskCoverage, FullCoverageIsFullSet) {
  Pcg32 rng(72);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 1 + rng.bounded(300);
    const auto s = testutil::random_scores(rng, n, t % 2);
    V y(n);
    for (auto& v : y) v = rng.bernoulli(0.5);
    const auto sig = testutil::random_scores(rng, n, true);
    const auto c = risk_coverage(s, y, sig, kGrid);
    EXPECT_EQ(c.points[0].retained, n);
    EXPECT_NEAR(c.points[0].error, error_at_threshold(s, y), 1e-12);
    EXPECT_NEAR(c.points[0].nll, nll(s, y), 1e-12);
    EXPECT_NEAR(c.points[0].ece, ece(s, y, EceSpec{}), 1e-12);
  }
}

TEST(RiskCoverage, OracleSignalAndRounding) {
  // 10 samples, 7 correct at threshold 0.5.
  const V s{0.9, 0.8, 0.2, 0.4, 0.6, 0.7, 0.1, 0.3, 0.95, 0.05};
  const V y{1, 1, 0, 0, 1, 0, 1, 1, 1, 0};
  V wrong(10);
  for (int i = 0; i < 10; ++i) wrong[i] = ((s[i] >= 0.5) != (y[i] > 0.5)) ? 1.0 : 0.0;
  const auto c = risk_coverage(s, y, wrong, kGrid);
  EXPECT_EQ(risk_at(c, RiskMetric::kError, 0.5), 0.0);
  EXPECT_EQ(c.points[7].retained, 5u);
  // m = floor(0.95 * 10 + 0.5) = 10; 0.85 -> 9 (8.5 rounds up).
  EXPECT_EQ(c.points[1].retained, 10u);
  EXPECT_EQ(c.points[3].retained, 9u);
}

TEST(RiskCoverage, ConstantSignalKeepsFirstSamples) {
  const V s{0.9, 0.1, 0.9, 0.1}, y{1, 1, 0, 0}, sig(4, 0.3);
  const auto c = risk_coverage(s, y, sig, V{1.0, 0.5});
  // First two samples: (0.9, U) correct, (0.1, U) wrong.
  EXPECT_EQ(c.points[1].retained, 2u);
  EXPECT_EQ(c.points[1].error, 0.5);
}

TEST(RiskCoverage, RankOnlyDependenceOnSignal) {
  Pcg32 rng(73);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 20 + rng.bounded(200);
    const auto s = testutil::random_scores(rng, n, false);
    const auto y = testutil::random_labels(rng, n);
    const auto sig = testutil::random_scores(rng, n, t % 2);
    V transformed(n);
    for (std::size_t i = 0; i < n; ++i) transformed[i] = std::exp(3 * sig[i]) - 7;
    const auto a = risk_coverage(s, y, sig, kGrid), b = risk_coverage(s, y, transformed, kGrid);
    for (std::size_t g = 0; g < kGrid.size(); ++g) {
      EXPECT_EQ(a.points[g].error, b.points[g].error);
      EXPECT_EQ(a.points[g].nll, b.points[g].nll);
      EXPECT_EQ(a.points[g].ece, b.points[g].ece);
    }
  }
}

TEST(Aurc, Exactness) {
  EXPECT_NEAR(aurc(curve_from(kGrid, [](double) { return 0.2; }), RiskMetric::kError, 0.5, 1.0),
              0.2, 1e-12);
  EXPECT_NEAR(aurc(curve_from(kGrid, [](double c) { return c; }), RiskMetric::kNll, 0.5, 1.0), 0.75,
              1e-12);
  EXPECT_NEAR(aurc(curve_from(kGrid, [](double c) { return c; }), RiskMetric::kEce, 0.9, 1.0), 0.95,
              1e-12);
  EXPECT_THROW(aurc(curve_from(kGrid, [](double c) { return c; }), RiskMetric::kNll, 0.55, 1.0),
               ValidationError);
  EXPECT_THROW(aurc(curve_from(kGrid, [](double c) { return c; }), RiskMetric::kNll, 1.0, 0.5),
               ValidationError);
}

TEST(Aurc, HandComputedTrapezoid) {
  const V grid{1.0, 0.9, 0.5};
  const auto c = curve_from(grid, [](double x) { return x * x; });
  // 0.5*(1+0.81)*0.1 + 0.5*(0.81+0.25)*0.4 = 0.0905 + 0.212
  EXPECT_NEAR(aurc(c, RiskMetric::kError, 0.5, 1.0), (0.0905 + 0.212) / 0.5, 1e-12);
}

TEST(Aurc, DominanceIsMonotone) {
  Pcg32 rng(74);
  for (int t = 0; t < 100; ++t) {
    CoverageCurve lo, hi;
    for (double g : kGrid) {
      const double r = rng.uniform();
      lo.points.push_back({g, 0, r, r, r});
      const double r2 = r + rng.uniform() * 0.1;
      hi.points.push_back({g, 0, r2, r2, r2});
    }
    EXPECT_LE(aurc(lo, RiskMetric::kError, 0.5, 1.0), aurc(hi, RiskMetric::kError, 0.5, 1.0));
  }
}

TEST(Percentile, LinearInterpolation) {
  V v{4, 1, 3, 2};
  EXPECT_EQ(percentile(v, 0.0), 1.0);
  EXPECT_EQ(percentile(v, 1.0), 4.0);
  EXPECT_EQ(percentile(v, 0.5), 2.5);
  V w{10, 20};
  EXPECT_NEAR(percentile(w, 0.025), 10.25, 1e-12);
}

TEST(Bootstrap, IdenticalInputsDegenerate) {
  Pcg32 rng(75);
  const auto s = testutil::random_scores(rng, 200, false);
  const auto y = testutil::random_labels(rng, 200);
  for (auto metric : {DeltaMetric::kNll, DeltaMetric::kEceW15}) {
    const auto r = bootstrap_delta(s, s, y, metric, {2000, 42, 1});
    EXPECT_EQ(r.point_delta, 0.0);
    EXPECT_EQ(r.ci_low, 0.0);
    EXPECT_EQ(r.ci_high, 0.0);
    EXPECT_EQ(r.p_two_sided, 1.0);
  }
}

TEST(Bootstrap, ConstantGap) {
  // All labels U; every sample has the same loss gap.
  const V y(300, 1.0), cand(300, 0.8), base(300, 0.6);
  const auto r = bootstrap_delta(cand, base, y, DeltaMetric::kNll, {2000, 3, 1});
  const double gap = std::log(0.8) - std::log(0.6);
  EXPECT_NEAR(r.point_delta, gap, 1e-12);
  EXPECT_NEAR(r.ci_low, gap, 1e-12);
  EXPECT_NEAR(r.ci_high, gap, 1e-12);
  EXPECT_EQ(r.p_two_sided, 0.0);
}

TEST(Bootstrap, DeterministicAcrossRunsAndThreads) {
  Pcg32 rng(76);
  const auto a = testutil::random_scores(rng, 500, false);
  const auto b = testutil::random_scores(rng, 500, false);
  const auto y = testutil::random_labels(rng, 500);
  for (auto metric : {DeltaMetric::kNll, DeltaMetric::kEceW15}) {
    const auto r1 = bootstrap_delta(a, b, y, metric, {3000, 42, 1});
    const auto r2 = bootstrap_delta(a, b, y, metric, {3000, 42, 1});
    const auto r4 = bootstrap_delta(a, b, y, metric, {3000, 42, 4});
    EXPECT_TRUE(same_bits(r1, r2));
    EXPECT_TRUE(same_bits(r1, r4));
    const auto other = bootstrap_delta(a, b, y, metric, {3000, 43, 1});
    EXPECT_FALSE(same_bits(r1, other));
  }
}

TEST(Bootstrap, ResampleDrawsMatchIndependentReplay) {
  // Replays resample r with Pcg32(seed, r) and checks the percentile of the
  // replayed deltas matches the library's CI.
  Pcg32 rng(77);
  const std::size_t n = 40;
  const auto a = testutil::random_scores(rng, n, false);
  const auto b = testutil::random_scores(rng, n, false);
  const auto y = testutil::random_labels(rng, n);
  const int B = 200;
  V deltas;
  for (int r = 0; r < B; ++r) {
    Pcg32 g(9, static_cast<std::uint64_t>(r));
    V ra(n), rb(n), ry(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = g.bounded(static_cast<std::uint32_t>(n));
      ra[i] = a[k];
      rb[i] = b[k];
      ry[i] = y[k];
    }
    deltas.push_back(nll(rb, ry) - nll(ra, ry));
  }
  const auto res = bootstrap_delta(a, b, y, DeltaMetric::kNll, {B, 9, 1});
  auto d1 = deltas, d2 = deltas;
  EXPECT_NEAR(res.ci_low, percentile(d1, 0.025), 1e-12);
  EXPECT_NEAR(res.ci_high, percentile(d2, 0.975), 1e-12);
}

TEST(Bootstrap, CiUsuallyContainsPoint) {
  Pcg32 rng(78);
  int contained = 0;
  const int instances = 100;
  for (int t = 0; t < instances; ++t) {
    const std::size_t n = 60 + rng.bounded(60);
    const auto a = testutil::random_scores(rng, n, false);
    const auto b = testutil::random_scores(rng, n, false);
    const auto y = testutil::random_labels(rng, n);
    const auto r = bootstrap_delta(a, b, y, t % 2 ? DeltaMetric::kNll : DeltaMetric::kEceW15,
                                   {10000, static_cast<std::uint64_t>(t), 1});
    if (r.ci_low <= r.point_delta && r.point_delta <= r.ci_high) ++contained;
  }
  EXPECT_GE(contained, 99);
}

TEST(Bootstrap, Validation) {
  EXPECT_THROW(bootstrap_delta(V{0.1}, V{0.1, 0.2}, V{1}, DeltaMetric::kNll, {}), ValidationError);
  EXPECT_THROW(bootstrap_delta(V{}, V{}, V{}, DeltaMetric::kNll, {}), ValidationError);
  EXPECT_THROW(bootstrap_delta(V{0.1}, V{0.1}, V{1}, DeltaMetric::kNll, {0, 1, 1}),
               ValidationError);
}

TEST(Prevalence, WeightExamples) {
  const V y{1, 1, 0, 0};
  const auto s = prevalence_weights(y, 0.25);
  EXPECT_EQ(s.weights, (V{0.5, 0.5, 1.5, 1.5}));
  EXPECT_EQ(s.native_pi, 0.5);
  EXPECT_EQ(prevalence_weights(y, std::nullopt).weights, V(4, 1.0));
  const auto same = prevalence_weights(y, 0.5);
  for (double w : same.weights) EXPECT_NEAR(w, 1.0, 1e-12);
  EXPECT_THROW(prevalence_weights(V{1, 1}, 0.3), ValidationError);
  EXPECT_THROW(prevalence_weights(y, 1.0), ValidationError);
}

TEST(Prevalence, WeightedUnsafeMassHitsTarget) {
  Pcg32 rng(79);
  for (int t = 0; t < 50; ++t) {
    const auto y = testutil::random_labels(rng, 10 + rng.bounded(500));
    const double target = rng.uniform(0.01, 0.99);
    const auto s = prevalence_weights(y, target);
    double pos = 0.0, tot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      tot += s.weights[i];
      pos += y[i] * s.weights[i];
    }
    EXPECT_NEAR(pos / tot, target, 1e-12);
  }
}

TEST(Prevalence, NativeMatchesUnweightedBootstrap) {
  Pcg32 rng(80);
  const auto a = testutil::random_scores(rng, 400, false);
  const auto b = testutil::random_scores(rng, 400, false);
  const auto y = testutil::random_labels(rng, 400);
  const BootstrapOptions opts{2000, 42, 1};
  const auto rows = prevalence_stress(a, b, y, V{0.25, 0.10, 0.05}, opts);
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_FALSE(rows[0].target_pi.has_value());
  for (int m = 0; m < 2; ++m) {
    const auto metric = m == 0 ? DeltaMetric::kNll : DeltaMetric::kEceW15;
    const auto ref = bootstrap_delta(a, b, y, metric, opts);
    const auto& got = rows[m].result;
    EXPECT_LT(std::abs(got.point_delta - ref.point_delta), 1e-12);
    EXPECT_LT(std::abs(got.ci_low - ref.ci_low), 1e-12);
    EXPECT_LT(std::abs(got.ci_high - ref.ci_high), 1e-12);
  }
  // Non-native target equal to the empirical rate reproduces native too.
  const double pi = std::count(y.begin(), y.end(), 1.0) / 400.0;
  const auto at_pi = prevalence_stress(a, b, y, V{pi}, opts);
  EXPECT_NEAR(at_pi[2].result.ci_low, at_pi[0].result.ci_low, 1e-12);
  EXPECT_NEAR(at_pi[2].result.ci_high, at_pi[0].result.ci_high, 1e-12);
}

TEST(Prevalence, DominatingCandidateStaysPositive) {
  Pcg32 rng(81);
  const std::size_t n = 2000;
  V y(n), cand(n), base(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = rng.bernoulli(0.4) ? 1.0 : 0.0;
    cand[i] = y[i] > 0.5 ? rng.uniform(0.8, 0.95) : rng.uniform(0.05, 0.2);
    base[i] = y[i] > 0.5 ? rng.uniform(0.3, 0.6) : rng.uniform(0.4, 0.7);
  }
  const auto rows = prevalence_stress(cand, base, y, V{0.25, 0.10, 0.05}, {2000, 42, 1});
  for (const auto& r : rows) {
    if (r.metric == DeltaMetric::kNll) EXPECT_GT(r.result.ci_low, 0.0);
  }
}

TEST(Bootstrap, LargeRunIsFast) {
  Pcg32 rng(82);
  const auto a = testutil::random_scores(rng, 10000, false);
  const auto b = testutil::random_scores(rng, 10000, false);
  const auto y = testutil::random_labels(rng, 10000);
  const auto t0 = std::chrono::steady_clock::now();
  bootstrap_delta(a, b, y, DeltaMetric::kNll, {10000, 42, 1});
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 10.0);
}
