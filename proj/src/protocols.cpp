#include "promptrel/protocols.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <thread>

#include "promptrel/rng.hpp"

namespace promptrel {

std::vector<double> average_ranks(std::span<const double> row) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return row[a] < row[b]; });
  std::vector<double> ranks(row.size());
  std::size_t r = 0;
  while (r < idx.size()) {
    std::size_t e = r;
    while (e < idx.size() && row[idx[e]] == row[idx[r]]) ++e;
    // Ranks r+1 .. e share their mean.
    const double shared = 0.5 * static_cast<double>(r + 1 + e);
    for (std::size_t j = r; j < e; ++j) ranks[idx[j]] = shared;
    r = e;
  }
  return ranks;
}

WinCountTable win_counts(std::span<const std::vector<double>> values,
                         std::vector<std::string> methods) {
  WinCountTable t;
  const std::size_t m = methods.size();
  t.methods = std::move(methods);
  t.wins.assign(m, 0);
  t.avg_rank.assign(m, 0.0);
  for (const auto& row : values) {
    if (row.size() != m) throw ValidationError("win-count row has wrong number of methods");
    const double best = *std::min_element(row.begin(), row.end());
    for (std::size_t j = 0; j < m; ++j) {
      if (row[j] == best) ++t.wins[j];
    }
    const auto ranks = average_ranks(row);
    for (std::size_t j = 0; j < m; ++j) t.avg_rank[j] += ranks[j];
    ++t.pairs;
  }
  if (t.pairs > 0) {
    for (double& r : t.avg_rank) r /= static_cast<double>(t.pairs);
  }
  return t;
}

WinCountTable sweep_rules(std::span<const EvaluationPair> pairs,
                          std::span<const AggregationRule> rules, double eps) {
  if (pairs.empty()) throw ValidationError("rule sweep needs at least one evaluation pair");
  if (rules.size() < 2) throw ValidationError("rule sweep needs at least two rules");
  std::vector<std::string> names;
  for (const auto& r : rules) names.push_back(r.name());
  std::vector<std::vector<double>> rows;
  std::vector<std::string> warnings;
  for (const auto& pair : pairs) {
    try {
      const auto y = pair.matrix.label_indicators();
      std::vector<double> row;
      for (const auto& rule : rules)
        row.push_back(nll(aggregate(pair.matrix, rule, nullptr, eps), y, {}, eps));
      rows.push_back(std::move(row));
    } catch (const Error& e) {
      warnings.push_back("pair '" + pair.name + "' excluded: " + e.what());
    }
  }
  auto table = win_counts(rows, std::move(names));
  table.warnings = std::move(warnings);
  return table;
}

std::string_view to_string(SignalKind k) {
  switch (k) {
    case SignalKind::kStdPU:
      return "std_pu";
    case SignalKind::kEntropyMean:
      return "entropy_mean";
    case SignalKind::kMarginSingle:
      return "margin_single";
  }
  return "?";
}

SignalKind parse_signal(std::string_view s) {
  if (s == "std_pu") return SignalKind::kStdPU;
  if (s == "entropy_mean") return SignalKind::kEntropyMean;
  if (s == "margin_single") return SignalKind::kMarginSingle;
  throw ValidationError("unknown uncertainty signal '" + std::string(s) + "'");
}

UncertaintySignal uncertainty(const ScoreMatrix& m, SignalKind kind,
                              std::optional<int> selected_prompt) {
  UncertaintySignal sig{kind, std::vector<double>(m.n())};
  switch (kind) {
    case SignalKind::kStdPU: {
      const auto prof = fragility_profile(m);
      sig.values = prof.sigma;
      break;
    }
    case SignalKind::kEntropyMean: {
      const auto mu = mean_ensemble(m);
      for (std::size_t i = 0; i < m.n(); ++i) {
        const double p = mu[i];
        double h = 0.0;
        if (p > 0.0) h -= p * std::log(p);
        if (p < 1.0) h -= (1.0 - p) * std::log(1.0 - p);
        sig.values[i] = h;
      }
      break;
    }
    case SignalKind::kMarginSingle: {
      if (!selected_prompt) throw ValidationError("margin_single needs a selected prompt id");
      const auto col = m.prompt_column(*selected_prompt);
      for (std::size_t i = 0; i < m.n(); ++i) sig.values[i] = 1.0 - std::abs(2.0 * col[i] - 1.0);
      break;
    }
  }
  return sig;
}

CoverageCurve risk_coverage(std::span<const double> scores, std::span<const double> labels,
                            std::span<const double> signal, std::span<const double> grid,
                            double threshold, double eps) {
  if (scores.size() != labels.size() || scores.size() != signal.size()) {
    throw ValidationError("scores, labels and signal must be aligned");
  }
  if (scores.empty()) throw ValidationError("risk-coverage of empty input");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return signal[a] < signal[b]; });
  CoverageCurve curve;
  const EceSpec spec{15, BinScheme::kEqualWidth};
  for (double c : grid) {
    if (!(c > 0.0 && c <= 1.0)) throw ValidationError("coverage must lie in (0, 1]");
    auto m = static_cast<std::size_t>(std::floor(c * static_cast<double>(n) + 0.5));
    m = std::clamp<std::size_t>(m, 1, n);
    std::vector<double> s(m), y(m);
    for (std::size_t r = 0; r < m; ++r) {
      s[r] = scores[order[r]];
      y[r] = labels[order[r]];
    }
    // Full coverage evaluates in original sample order.
    if (m == n) {
      s.assign(scores.begin(), scores.end());
      y.assign(labels.begin(), labels.end());
    }
    curve.points.push_back(
        {c, m, error_at_threshold(s, y, threshold), nll(s, y, {}, eps), ece(s, y, spec)});
  }
  return curve;
}

namespace {

double metric_of(const CoveragePoint& p, RiskMetric metric) {
  switch (metric) {
    case RiskMetric::kError:
      return p.error;
    case RiskMetric::kNll:
      return p.nll;
    case RiskMetric::kEce:
      return p.ece;
  }
  return 0.0;
}

constexpr double kGridTol = 1e-12;

}  // namespace

double risk_at(const CoverageCurve& curve, RiskMetric metric, double coverage) {
  for (const auto& p : curve.points) {
    if (std::abs(p.coverage - coverage) <= kGridTol) return metric_of(p, metric);
  }
  throw ValidationError("coverage " + std::to_string(coverage) + " not on the evaluated grid");
}

double aurc(const CoverageCurve& curve, RiskMetric metric, double c_min, double c_max) {
  if (!(c_max > c_min)) throw ValidationError("AURC range must have c_max > c_min");
  std::vector<std::pair<double, double>> pts;
  bool has_lo = false, has_hi = false;
  for (const auto& p : curve.points) {
    if (p.coverage < c_min - kGridTol || p.coverage > c_max + kGridTol) continue;
    if (std::abs(p.coverage - c_min) <= kGridTol) has_lo = true;
    if (std::abs(p.coverage - c_max) <= kGridTol) has_hi = true;
    pts.emplace_back(p.coverage, metric_of(p, metric));
  }
  if (!has_lo || !has_hi) throw ValidationError("AURC range endpoints must be grid points");
  if (pts.size() < 2) throw ValidationError("AURC needs at least two grid points in range");
  std::sort(pts.begin(), pts.end());
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    area += 0.5 * (pts[i].second + pts[i - 1].second) * (pts[i].first - pts[i - 1].first);
  }
  return area / (c_max - c_min);
}

std::string_view to_string(DeltaMetric m) { return m == DeltaMetric::kNll ? "nll" : "ece_w15"; }

double percentile(std::vector<double>& values, double q) {
  if (values.empty()) throw ValidationError("percentile of empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

namespace {

constexpr int kBootstrapBins = 15;

// Per-sample inputs shared by all resamples.
struct DeltaInputs {
  DeltaMetric metric;
  std::vector<double> loss_cand, loss_base;  // NLL
  std::vector<int> bin_cand, bin_base;       // ECE
  std::span<const double> cand, base, labels, weights;
};

class ResampleKernel {
 public:
  explicit ResampleKernel(const DeltaInputs& in) : in_(in) {}

  double delta(std::span<const std::uint32_t> idx) {
    if (in_.metric == DeltaMetric::kNll) {
      double w = 0.0, sc = 0.0, sb = 0.0;
      for (std::uint32_t i : idx) {
        const double wi = in_.weights.empty() ? 1.0 : in_.weights[i];
        w += wi;
        sc += wi * in_.loss_cand[i];
        sb += wi * in_.loss_base[i];
      }
      return sb / w - sc / w;
    }
    return ece_of(idx, in_.base, in_.bin_base) - ece_of(idx, in_.cand, in_.bin_cand);
  }

 private:
  double ece_of(std::span<const std::uint32_t> idx, std::span<const double> scores,
                const std::vector<int>& bins) {
    mass_.fill(0.0);
    conf_.fill(0.0);
    freq_.fill(0.0);
    double w = 0.0;
    for (std::uint32_t i : idx) {
      const double wi = in_.weights.empty() ? 1.0 : in_.weights[i];
      const int b = bins[i];
      w += wi;
      mass_[b] += wi;
      conf_[b] += wi * scores[i];
      freq_[b] += wi * in_.labels[i];
    }
    double total = 0.0;
    for (int b = 0; b < kBootstrapBins; ++b) {
      if (mass_[b] <= 0.0) continue;
      total += (mass_[b] / w) * std::abs(freq_[b] / mass_[b] - conf_[b] / mass_[b]);
    }
    return total;
  }

  const DeltaInputs& in_;
  std::array<double, kBootstrapBins> mass_{}, conf_{}, freq_{};
};

}  // namespace

BootstrapResult bootstrap_delta(std::span<const double> candidate, std::span<const double> baseline,
                                std::span<const double> labels, DeltaMetric metric,
                                const BootstrapOptions& opts, std::span<const double> weights,
                                double eps) {
  const std::size_t n = labels.size();
  if (candidate.size() != n || baseline.size() != n) {
    throw ValidationError("bootstrap inputs must be aligned");
  }
  if (!weights.empty() && weights.size() != n) throw ValidationError("weights length mismatch");
  if (n == 0) throw ValidationError("bootstrap of empty input");
  if (opts.b < 1) throw ValidationError("bootstrap B must be >= 1");
  if (n > 0xFFFFFFFFu) throw ValidationError("bootstrap supports at most 2^32 - 1 samples");

  DeltaInputs in{metric, {}, {}, {}, {}, candidate, baseline, labels, weights};
  const EceSpec spec{kBootstrapBins, BinScheme::kEqualWidth};
  if (metric == DeltaMetric::kNll) {
    in.loss_cand.resize(n);
    in.loss_base.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double pc = std::clamp(candidate[i], eps, 1.0 - eps);
      const double pb = std::clamp(baseline[i], eps, 1.0 - eps);
      const bool pos = labels[i] > 0.5;
      in.loss_cand[i] = pos ? -std::log(pc) : -std::log(1.0 - pc);
      in.loss_base[i] = pos ? -std::log(pb) : -std::log(1.0 - pb);
    }
  } else {
    in.bin_cand = assign_bins(candidate, spec);
    in.bin_base = assign_bins(baseline, spec);
  }

  BootstrapResult res;
  res.b = opts.b;
  res.seed = opts.seed;
  if (metric == DeltaMetric::kNll) {
    res.point_delta = nll(baseline, labels, weights, eps) - nll(candidate, labels, weights, eps);
  } else {
    res.point_delta = ece(baseline, labels, spec, weights) - ece(candidate, labels, spec, weights);
  }

  std::vector<double> deltas(static_cast<std::size_t>(opts.b));
  auto worker = [&](std::size_t begin, std::size_t end) {
    ResampleKernel kernel(in);
    std::vector<std::uint32_t> idx(n);
    for (std::size_t r = begin; r < end; ++r) {
      Pcg32 rng(opts.seed, r);
      for (auto& v : idx) v = rng.bounded(static_cast<std::uint32_t>(n));
      deltas[r] = kernel.delta(idx);
    }
  };
  const std::size_t total = deltas.size();
  const std::size_t threads = std::clamp<std::size_t>(opts.threads, 1, total);
  if (threads == 1) {
    worker(0, total);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back(worker, t * total / threads, (t + 1) * total / threads);
    }
    for (auto& th : pool) th.join();
  }

  std::size_t le = 0, ge = 0;
  for (double d : deltas) {
    if (d <= 0.0) ++le;
    if (d >= 0.0) ++ge;
  }
  const double bd = static_cast<double>(total);
  res.p_two_sided = std::min(1.0, 2.0 * std::min(le / bd, ge / bd));
  res.ci_low = percentile(deltas, 0.025);
  res.ci_high = percentile(deltas, 0.975);
  return res;
}

PrevalenceSpec prevalence_weights(std::span<const double> labels, std::optional<double> target) {
  if (labels.empty()) throw ValidationError("prevalence weights of empty labels");
  double pos = 0.0;
  for (double y : labels) pos += y > 0.5 ? 1.0 : 0.0;
  const double n = static_cast<double>(labels.size());
  if (pos == 0.0 || pos == n) {
    throw ValidationError("prevalence reweighting needs both classes");
  }
  PrevalenceSpec spec;
  spec.target_pi = target;
  spec.native_pi = pos / n;
  spec.weights.assign(labels.size(), 1.0);
  if (!target) return spec;
  if (!(*target > 0.0 && *target < 1.0)) {
    throw ValidationError("target prevalence must lie in (0, 1)");
  }
  const double w_pos = *target / spec.native_pi;
  const double w_neg = (1.0 - *target) / (1.0 - spec.native_pi);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    spec.weights[i] = labels[i] > 0.5 ? w_pos : w_neg;
  }
  return spec;
}

std::vector<PrevalenceRow> prevalence_stress(std::span<const double> candidate,
                                             std::span<const double> baseline,
                                             std::span<const double> labels,
                                             std::span<const double> targets,
                                             const BootstrapOptions& opts, double eps) {
  std::vector<std::optional<double>> all{std::nullopt};
  for (double t : targets) all.emplace_back(t);
  std::vector<PrevalenceRow> rows;
  for (const auto& t : all) {
    const auto spec = prevalence_weights(labels, t);
    const std::span<const double> w(spec.weights);
    for (DeltaMetric metric : {DeltaMetric::kNll, DeltaMetric::kEceW15}) {
      rows.push_back(
          {t, metric, bootstrap_delta(candidate, baseline, labels, metric, opts, w, eps)});
    }
  }
  return rows;
}

}  // namespace promptrel
