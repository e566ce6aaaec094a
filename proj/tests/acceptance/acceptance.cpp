// Acceptance harness: one PASS/FAIL line per criterion, nonzero exit on any failure.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "promptrel/aggregate.hpp"
#include "promptrel/calibrate.hpp"
#include "promptrel/metrics.hpp"
#include "promptrel/protocols.hpp"
#include "promptrel/report.hpp"
#include "promptrel/rng.hpp"
#include "promptrel/synth.hpp"

using namespace promptrel;
namespace fs = std::filesystem;
using V = std::vector<double>;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

V random_scores(Pcg32& rng, std::size_t n, bool ties) {
  V s(n);
  for (auto& v : s) v = ties ? static_cast<double>(rng.bounded(11)) / 10.0 : rng.uniform();
  return s;
}

V random_labels(Pcg32& rng, std::size_t n) {
  V y(n);
  for (;;) {
    double pos = 0.0;
    for (auto& v : y) pos += (v = rng.bernoulli(0.5) ? 1.0 : 0.0);
    if (pos > 0.0 && pos < static_cast<double>(n)) return y;
  }
}

ScoreMatrix random_matrix(Pcg32& rng, std::size_t n, std::size_t k) {
  std::vector<std::string> ids, ds(n, "d");
  std::vector<Split> splits(n, Split::kTest);
  std::vector<PromptMeta> prompts;
  for (std::size_t j = 0; j < k; ++j) {
    prompts.push_back(
        {static_cast<int>(j + 1), static_cast<Family>(std::min<std::size_t>(j * 3 / k, 2))});
  }
  V vals(n * k);
  // Per-column bias on the logit scale so columns differ systematically.
  V bias(k);
  for (auto& b : bias) b = rng.normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    ids.push_back("r" + std::to_string(i));
    const double z = rng.normal(0.0, 2.0);
    for (std::size_t j = 0; j < k; ++j)
      vals[i * k + j] = sigmoid(z + bias[j] + rng.normal(0.0, 0.5));
  }
  const auto y = random_labels(rng, n);
  std::vector<Label> labels;
  for (double v : y) labels.push_back(v > 0.5 ? Label::kUnsafe : Label::kSafe);
  return ScoreMatrix(ids, ds, labels, splits, prompts, vals);
}

Outcome c1_auroc_oracle() {
  Pcg32 rng(1001);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + rng.bounded(299);
    const auto s = random_scores(rng, n, t % 2 == 0);
    const auto y = random_labels(rng, n);
    worst = std::max(worst, std::abs(auroc(s, y) - oracle::auroc(s, y)));
  }
  return {worst < 1e-12, fmt("max|diff|=%.3g (tol 1e-12)", worst)};
}

Outcome c2_isotonic_oracle() {
  Pcg32 rng(2002);
  double worst = 0.0;
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = 1 + rng.bounded(8);
    const auto s = random_scores(rng, n, t % 2 == 0);
    V y(n);
    for (auto& v : y) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const auto fitted = fit_isotonic(s, y).apply(s);
    const auto ref = oracle::isotonic(s, y);
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(fitted[i] - ref[i]));
  }
  return {worst < 1e-9, fmt("max|diff|=%.3g (tol 1e-9)", worst)};
}

Outcome c3_jensen() {
  Pcg32 rng(3003);
  int violations = 0, strict_needed = 0, strict_held = 0;
  for (int t = 0; t < 100; ++t) {
    const auto m = random_matrix(rng, 20 + rng.bounded(200), 2 + rng.bounded(14));
    const auto y = m.label_indicators();
    double avg = 0.0;
    for (std::size_t j = 0; j < m.k(); ++j) avg += nll(m.column(j), y);
    avg /= static_cast<double>(m.k());
    const double ens = nll(mean_ensemble(m), y);
    if (ens > avg + 1e-12) ++violations;
    const auto sig = fragility_profile(m).sigma;
    if (std::any_of(sig.begin(), sig.end(), [](double s) { return s > 0.01; })) {
      ++strict_needed;
      if (ens < avg) ++strict_held;
    }
  }
  std::ostringstream d;
  d << "violations=" << violations << " strict " << strict_held << "/" << strict_needed;
  return {violations == 0 && strict_held == strict_needed, d.str()};
}

Outcome c4_shrink_closure() {
  Pcg32 rng(4004);
  double w0 = 0.0, w1 = 0.0;
  for (int t = 0; t < 50; ++t) {
    const auto m = random_matrix(rng, 10 + rng.bounded(100), 2 + rng.bounded(14));
    const auto stats = fit_logit_correction(m);
    const std::size_t k = m.k();
    const auto base = logit_matrix(m);
    auto s0 = base, s1 = base, bs = base;
    apply_bias_scale_shrink(s0, k, stats, 0.0);
    apply_bias_scale_shrink(s1, k, stats, 1.0);
    apply_bias_scale(bs, k, stats);
    for (std::size_t i = 0; i < base.size(); ++i) {
      w0 = std::max(w0, std::abs(s0[i] - base[i]));
      w1 = std::max(w1, std::abs(s1[i] - bs[i]));
    }
    // Same identities through the aggregate path.
    const auto a0 = aggregate(m, AggregationRule::parse("mean_logit"));
    const auto a1 = aggregate(m, AggregationRule::parse("bias_scale_logit_mean"));
    AggregationRule r0 = AggregationRule::parse("bias_scale_shrink_0.5");
    AggregationRule r1 = r0;
    r0.alpha = 0.0;
    r1.alpha = 1.0;
    const auto g0 = aggregate(m, r0), g1 = aggregate(m, r1);
    for (std::size_t i = 0; i < m.n(); ++i) {
      w0 = std::max(w0, std::abs(g0[i] - a0[i]));
      w1 = std::max(w1, std::abs(g1[i] - a1[i]));
    }
  }
  return {w0 < 1e-12 && w1 < 1e-12,
          fmt("alpha=0 max|diff|=%.3g", w0) + fmt(", alpha=1 max|diff|=%.3g (tol 1e-12)", w1)};
}

Outcome c5_calibrator_recovery() {
  auto one_prompt = [](double scale, std::uint64_t seed) {
    SynthConfig cfg;
    cfg.n_samples = 50000;
    cfg.k_prompts = 1;
    cfg.scale_lo = cfg.scale_hi = scale;
    cfg.seed = seed;
    return generate(cfg);
  };
  double slowest = 0.0;
  auto timed = [&](auto&& fn) {
    const auto t0 = Clock::now();
    auto r = fn();
    slowest = std::max(slowest, seconds_since(t0));
    return r;
  };
  const auto over = one_prompt(2.0, 501);
  const double t_over =
      timed([&] { return fit_temperature(over.column(0), over.label_indicators()); }).t();
  const auto clean = one_prompt(1.0, 502);
  const double t_clean =
      timed([&] { return fit_temperature(clean.column(0), clean.label_indicators()); }).t();
  const auto pl = timed([&] { return fit_platt(clean.column(0), clean.label_indicators()); });
  const bool ok = t_over >= 1.9 && t_over <= 2.1 && t_clean >= 0.95 && t_clean <= 1.05 &&
                  std::abs(pl.a() - 1.0) <= 0.05 && std::abs(pl.b()) <= 0.05 && slowest < 5.0;
  std::ostringstream d;
  d << "T(x2)=" << t_over << " T(clean)=" << t_clean << " platt=(" << pl.a() << ", " << pl.b()
    << ") slowest fit " << fmt("%.3fs", slowest);
  return {ok, d.str()};
}

Outcome c6_native_prevalence() {
  Pcg32 rng(6006);
  const std::size_t n = 2000;
  const auto a = random_scores(rng, n, false);
  const auto b = random_scores(rng, n, true);
  const auto y = random_labels(rng, n);
  const BootstrapOptions opts{2000, 42, 1};
  const auto rows = prevalence_stress(a, b, y, V{0.25, 0.10, 0.05}, opts);
  double worst = 0.0;
  for (const auto& row : rows) {
    if (row.target_pi) continue;
    const auto ref = bootstrap_delta(a, b, y, row.metric, opts);
    worst = std::max({worst, std::abs(row.result.point_delta - ref.point_delta),
                      std::abs(row.result.ci_low - ref.ci_low),
                      std::abs(row.result.ci_high - ref.ci_high)});
  }
  return {worst < 1e-12, fmt("max|diff|=%.3g (tol 1e-12)", worst)};
}

bool same_bits(const BootstrapResult& a, const BootstrapResult& b) {
  return std::memcmp(&a.point_delta, &b.point_delta, sizeof(double)) == 0 &&
         std::memcmp(&a.ci_low, &b.ci_low, sizeof(double)) == 0 &&
         std::memcmp(&a.ci_high, &b.ci_high, sizeof(double)) == 0 &&
         std::memcmp(&a.p_two_sided, &b.p_two_sided, sizeof(double)) == 0;
}

Outcome c7_bootstrap() {
  Pcg32 rng(7007);
  const std::size_t n = 10000;
  const auto a = random_scores(rng, n, false);
  const auto b = random_scores(rng, n, false);
  const auto y = random_labels(rng, n);
  const BootstrapOptions opts{10000, 42, 1};
  const auto t0 = Clock::now();
  const auto r1 = bootstrap_delta(a, b, y, DeltaMetric::kNll, opts);
  const double secs = seconds_since(t0);
  const auto r2 = bootstrap_delta(a, b, y, DeltaMetric::kNll, opts);
  const bool det = same_bits(r1, r2);

  const std::size_t m = 500;
  const V s(a.begin(), a.begin() + m), yy(y.begin(), y.begin() + m);
  const BootstrapOptions small{1000, 9, 1};
  const auto same = bootstrap_delta(s, s, yy, DeltaMetric::kNll, small);
  const bool ident = same.ci_low == 0.0 && same.ci_high == 0.0 && same.p_two_sided == 1.0;
  // Constant gap: err-free NLL shift via all-positive labels with fixed scores.
  const V ones(m, 1.0), pc(m, 0.8), pb(m, 0.4);
  const auto gap = bootstrap_delta(pc, pb, ones, DeltaMetric::kNll, small);
  const double expect = -std::log(0.4) + std::log(0.8);
  const bool constant = std::abs(gap.ci_low - expect) < 1e-12 &&
                        std::abs(gap.ci_high - expect) < 1e-12 && gap.p_two_sided == 0.0;
  std::ostringstream d;
  d << "bit-identical=" << det << " identical-input CI/p ok=" << ident
    << " constant-gap ok=" << constant << " B=10000,N=10000 in " << fmt("%.2fs", secs)
    << " (limit 10s)";
  return {det && ident && constant && secs < 10.0, d.str()};
}

Outcome c8_aurc() {
  const V grid{1.0, 0.95, 0.9, 0.85, 0.8, 0.7, 0.6, 0.5};
  auto curve = [&](const std::function<double(double)>& f) {
    CoverageCurve c;
    for (double g : grid) c.points.push_back({g, 0, f(g), f(g), f(g)});
    return c;
  };
  double worst = 0.0;
  for (double r : {0.0, 0.07, 0.2, 0.5, 1.0}) {
    for (auto metric : {RiskMetric::kError, RiskMetric::kNll, RiskMetric::kEce}) {
      worst =
          std::max(worst, std::abs(aurc(curve([r](double) { return r; }), metric, 0.5, 1.0) - r));
    }
  }
  const double lin = aurc(curve([](double c) { return c; }), RiskMetric::kError, 0.5, 1.0);
  worst = std::max(worst, std::abs(lin - 0.75));
  return {worst < 1e-12, fmt("linear=%.17g", lin) + fmt(", max|diff|=%.3g (tol 1e-12)", worst)};
}

Outcome c9_desk_analogue() {
  int mean_wins = 0, mistake_pos = 0, disagree_pos = 0;
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SynthConfig cfg;
    cfg.n_samples = 5000;
    cfg.k_prompts = 15;
    cfg.per_prompt_bias_std = 1.0;
    cfg.scale_lo = 0.5;
    cfg.scale_hi = 2.0;
    cfg.noise_std = 0.5;
    cfg.seed = seed;
    const auto m = generate(cfg);
    const auto y = m.label_indicators();
    V per;
    for (std::size_t j = 0; j < m.k(); ++j) per.push_back(nll(m.column(j), y));
    std::sort(per.begin(), per.end());
    const double median_single = per[per.size() / 2];
    if (nll(mean_ensemble(m), y) < median_single) ++mean_wins;
    const auto f = fragility_profile(m);
    if (f.mistake_deciles.gap > 0.0) ++mistake_pos;
    if (f.disagreement_deciles.gap > 0.0) ++disagree_pos;
  }
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << "mean beats median prompt " << mean_wins << "/100 (need 90), mistake gap>0 " << mistake_pos
    << "/100, disagreement gap>0 " << disagree_pos << "/100 (need 95), " << fmt("%.1fs", secs);
  return {mean_wins >= 90 && mistake_pos >= 95 && disagree_pos >= 95 && secs < 120.0, d.str()};
}

Outcome c10_ece_variants() {
  SynthConfig cfg;
  cfg.n_samples = 1500;
  cfg.per_prompt_bias_std = 1.0;
  cfg.scale_lo = 0.5;
  cfg.scale_hi = 2.0;
  cfg.noise_std = 0.5;
  RunConfig rc;
  rc.protocol.bootstrap_b = 200;
  const std::vector<NamedInput> inputs{{"synth.jsonl", generate(cfg)}};
  const auto bundle = run_pipeline(inputs, rc);
  // Every method row of the main table carries all four variants, and the
  // robustness summary lists each variant once.
  bool computable = bundle.errors.empty();
  const Table* main = bundle.find("main");
  const Table* robust = bundle.find("ece_robustness");
  if (!main || main->rows.empty() || !robust) computable = false;
  std::vector<std::string> seen;
  if (computable) {
    for (const auto& spec : ece_variants()) {
      const auto it = std::find(main->columns.begin(), main->columns.end(), spec.id());
      if (it == main->columns.end()) {
        computable = false;
        continue;
      }
      const auto idx = static_cast<std::size_t>(it - main->columns.begin());
      for (const auto& row : main->rows) {
        if (row[idx] == "NA" || !std::isfinite(std::stod(row[idx]))) computable = false;
      }
    }
    for (const auto& row : robust->rows) seen.push_back(row[0]);
    for (const auto& spec : ece_variants()) {
      if (std::count(seen.begin(), seen.end(), spec.id()) != 1) computable = false;
    }
  }
  Pcg32 rng(10010);
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.bounded(400);
    const auto s = random_scores(rng, n, t % 2 == 0);
    const auto y = random_labels(rng, n);
    const V w(n, 1.0);
    for (const auto& spec : ece_variants()) {
      worst = std::max(worst, std::abs(ece(s, y, spec, w) - ece(s, y, spec)));
    }
  }
  std::ostringstream d;
  d << "four variants computable on report run=" << computable
    << fmt(", uniform-vs-unweighted max|diff|=%.3g (tol 1e-12)", worst);
  return {computable && ece_variants().size() == 4 && worst < 1e-12, d.str()};
}

int sh(const std::string& cmd) {
  const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome c11_end_to_end() {
  const auto dir = fs::temp_directory_path() / "promptrel_acceptance_e2e";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cli = PROMPTREL_CLI_PATH;
  const auto art = (dir / "synth.jsonl").string();
  if (sh(cli + " synth --n 3000 --bias-std 1 --scale-lo 0.5 --scale-hi 2 --noise-std 0.5 --out " +
         art) != 0) {
    return {false, "synth failed"};
  }
  std::ofstream(dir / "cfg.json") << R"({"bootstrap_b": 1000})";
  const auto cfg = (dir / "cfg.json").string();
  const std::vector<std::pair<std::string, std::string>> runs{
      {"a", "--threads 1"}, {"b", "--threads 1"}, {"c", "--threads 4"}};
  for (const auto& [name, extra] : runs) {
    if (sh(cli + " run " + extra + " --config " + cfg + " --input " + art + " --out " +
           (dir / name).string()) != 0) {
      return {false, "run " + name + " failed"};
    }
  }
  std::size_t files = 0;
  std::string mismatch;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    if (e.path().extension() != ".csv") continue;
    ++files;
    const auto ref = slurp(e.path());
    for (const char* other : {"b", "c"}) {
      const auto p = dir / other / e.path().filename();
      if (!fs::exists(p) || slurp(p) != ref)
        mismatch += std::string(other) + "/" + e.path().filename().string() + " ";
    }
  }
  std::ostringstream d;
  d << files << " CSVs compared across 2 reruns and threads 1 vs 4";
  if (!mismatch.empty()) d << "; mismatched: " << mismatch;
  return {files > 0 && mismatch.empty(), d.str()};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 AUROC oracle equivalence", c1_auroc_oracle},
      {"2 isotonic oracle equivalence", c2_isotonic_oracle},
      {"3 Jensen dominance", c3_jensen},
      {"4 shrink closure identities", c4_shrink_closure},
      {"5 calibrator recovery", c5_calibrator_recovery},
      {"6 native prevalence consistency", c6_native_prevalence},
      {"7 bootstrap determinism/degeneracy", c7_bootstrap},
      {"8 AURC exactness", c8_aurc},
      {"9 synthetic main-pattern analogue", c9_desk_analogue},
      {"10 ECE binning robustness", c10_ece_variants},
      {"11 end-to-end determinism", c11_end_to_end},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (!o.pass) ++failed;
    std::printf("[%s] criterion %s: %s [%.2fs]\n", o.pass ? "PASS" : "FAIL", name.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed,
              criteria.size());
  return failed == 0 ? 0 : 1;
}
