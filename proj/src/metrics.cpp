#include "promptrel/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace promptrel {

namespace {

void check_lengths(std::span<const double> scores, std::span<const double> labels,
                   std::span<const double> weights) {
  if (scores.size() != labels.size()) throw ValidationError("scores/labels length mismatch");
  if (!weights.empty() && weights.size() != scores.size()) {
    throw ValidationError("weights length mismatch");
  }
}

inline double weight_at(std::span<const double> w, std::size_t i) { return w.empty() ? 1.0 : w[i]; }

double total_weight(std::span<const double> w, std::size_t n) {
  if (w.empty()) return static_cast<double>(n);
  double s = 0.0;
  for (double v : w) {
    if (!(v >= 0.0)) throw ValidationError("weights must be nonnegative");
    s += v;
  }
  if (!(s > 0.0)) throw ValidationError("weights sum to zero");
  return s;
}

// Indices sorted by score (ascending), ties by index.
std::vector<std::size_t> order_by_score(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return idx;
}

}  // namespace

double nll(std::span<const double> scores, std::span<const double> labels,
           std::span<const double> weights, double eps) {
  check_lengths(scores, labels, weights);
  if (scores.empty()) throw ValidationError("nll of empty input");
  const double wtot = total_weight(weights, scores.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double p = std::clamp(scores[i], eps, 1.0 - eps);
    const double loss = labels[i] > 0.5 ? -std::log(p) : -std::log(1.0 - p);
    acc += weight_at(weights, i) * loss;
  }
  return acc / wtot;
}

std::string EceSpec::id() const {
  return std::string(scheme == BinScheme::kEqualWidth ? "ece_w" : "ece_m") + std::to_string(bins);
}

void EceSpec::validate() const {
  if (bins < 2) throw ValidationError("ECE needs at least 2 bins");
}

std::vector<EceSpec> ece_variants() {
  return {{10, BinScheme::kEqualWidth},
          {15, BinScheme::kEqualWidth},
          {20, BinScheme::kEqualWidth},
          {15, BinScheme::kEqualMass}};
}

int equal_width_bin(double p, int bins) {
  const double b = std::floor(p * bins);
  if (b < 0.0) return 0;
  return std::min(static_cast<int>(b), bins - 1);
}

std::vector<int> assign_bins(std::span<const double> scores, const EceSpec& spec) {
  spec.validate();
  std::vector<int> bin(scores.size());
  if (spec.scheme == BinScheme::kEqualWidth) {
    for (std::size_t i = 0; i < scores.size(); ++i) bin[i] = equal_width_bin(scores[i], spec.bins);
    return bin;
  }
  const auto order = order_by_score(scores);
  const std::size_t n = scores.size();
  // Group g holds ranks [floor(g n / B), floor((g+1) n / B)).
  for (int g = 0; g < spec.bins; ++g) {
    const std::size_t lo = static_cast<std::size_t>(g) * n / spec.bins;
    const std::size_t hi = static_cast<std::size_t>(g + 1) * n / spec.bins;
    for (std::size_t r = lo; r < hi; ++r) bin[order[r]] = g;
  }
  return bin;
}

std::vector<ReliabilityBin> reliability_bins(std::span<const double> scores,
                                             std::span<const double> labels, const EceSpec& spec,
                                             std::span<const double> weights) {
  check_lengths(scores, labels, weights);
  const double wtot = total_weight(weights, scores.size());
  const auto bin = assign_bins(scores, spec);
  std::vector<double> w(spec.bins, 0.0), conf(spec.bins, 0.0), freq(spec.bins, 0.0),
      cnt(spec.bins, 0.0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double wi = weight_at(weights, i);
    w[bin[i]] += wi;
    conf[bin[i]] += wi * scores[i];
    freq[bin[i]] += wi * labels[i];
    cnt[bin[i]] += 1.0;
  }
  std::vector<ReliabilityBin> out;
  for (int b = 0; b < spec.bins; ++b) {
    if (w[b] <= 0.0) continue;
    out.push_back({b, conf[b] / w[b], freq[b] / w[b], w[b] / wtot, cnt[b]});
  }
  return out;
}

double ece(std::span<const double> scores, std::span<const double> labels, const EceSpec& spec,
           std::span<const double> weights) {
  check_lengths(scores, labels, weights);
  if (scores.empty()) throw ValidationError("ece of empty input");
  const double wtot = total_weight(weights, scores.size());
  const auto bin = assign_bins(scores, spec);
  std::vector<double> w(spec.bins, 0.0), conf(spec.bins, 0.0), freq(spec.bins, 0.0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double wi = weight_at(weights, i);
    w[bin[i]] += wi;
    conf[bin[i]] += wi * scores[i];
    freq[bin[i]] += wi * labels[i];
  }
  double total = 0.0;
  for (int b = 0; b < spec.bins; ++b) {
    if (w[b] <= 0.0) continue;
    total += (w[b] / wtot) * std::abs(freq[b] / w[b] - conf[b] / w[b]);
  }
  return total;
}

double auroc(std::span<const double> scores, std::span<const double> labels,
             std::span<const double> weights) {
  check_lengths(scores, labels, weights);
  const auto order = order_by_score(scores);
  double pos_total = 0.0, neg_total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    (labels[i] > 0.5 ? pos_total : neg_total) += weight_at(weights, i);
  }
  if (!(pos_total > 0.0) || !(neg_total > 0.0)) {
    throw UndefinedMetricError("AUROC undefined: both classes must be present");
  }
  // Walk tie groups in ascending order; each positive earns full credit for
  // negatives strictly below and half credit for tied negatives.
  double neg_below = 0.0;
  double credit = 0.0;
  std::size_t r = 0;
  while (r < order.size()) {
    std::size_t e = r;
    double pos_g = 0.0, neg_g = 0.0;
    while (e < order.size() && scores[order[e]] == scores[order[r]]) {
      const std::size_t i = order[e];
      (labels[i] > 0.5 ? pos_g : neg_g) += weight_at(weights, i);
      ++e;
    }
    credit += pos_g * (neg_below + 0.5 * neg_g);
    neg_below += neg_g;
    r = e;
  }
  return credit / (pos_total * neg_total);
}

double auprc(std::span<const double> scores, std::span<const double> labels,
             std::span<const double> weights) {
  check_lengths(scores, labels, weights);
  double pos_total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] > 0.5) pos_total += weight_at(weights, i);
  }
  if (!(pos_total > 0.0)) throw UndefinedMetricError("AUPRC undefined: no positive samples");
  auto order = order_by_score(scores);
  std::reverse(order.begin(), order.end());
  double tp = 0.0, fp = 0.0, ap = 0.0;
  std::size_t r = 0;
  while (r < order.size()) {
    std::size_t e = r;
    double pos_g = 0.0;
    while (e < order.size() && scores[order[e]] == scores[order[r]]) {
      const std::size_t i = order[e];
      const double wi = weight_at(weights, i);
      if (labels[i] > 0.5) {
        tp += wi;
        pos_g += wi;
      } else {
        fp += wi;
      }
      ++e;
    }
    if (pos_g > 0.0) ap += (pos_g / pos_total) * (tp / (tp + fp));
    r = e;
  }
  return ap;
}

double error_at_threshold(std::span<const double> scores, std::span<const double> labels,
                          double threshold, std::span<const double> weights) {
  check_lengths(scores, labels, weights);
  if (scores.empty()) throw ValidationError("error of empty input");
  const double wtot = total_weight(weights, scores.size());
  double wrong = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool truth = labels[i] > 0.5;
    if (pred != truth) wrong += weight_at(weights, i);
  }
  return wrong / wtot;
}

EvalReport evaluate(std::span<const double> scores, std::span<const double> labels,
                    std::span<const double> weights, double threshold, double eps) {
  EvalReport r;
  r.n = scores.size();
  r.weighted = !weights.empty();
  r.nll = nll(scores, labels, weights, eps);
  for (const auto& spec : ece_variants()) r.ece[spec] = ece(scores, labels, spec, weights);
  try {
    r.auroc = auroc(scores, labels, weights);
  } catch (const UndefinedMetricError&) {
  }
  try {
    r.auprc = auprc(scores, labels, weights);
  } catch (const UndefinedMetricError&) {
  }
  r.error_at_threshold = error_at_threshold(scores, labels, threshold, weights);
  return r;
}

FragilityProfile fragility_profile(const ScoreMatrix& m, double threshold) {
  const std::size_t n = m.n(), k = m.k();
  FragilityProfile f;
  f.mu.resize(n);
  f.sigma.resize(n);
  f.mistake_rate.resize(n);
  f.disagreement_rate.resize(n);
  const double kd = static_cast<double>(k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = m.row(i);
    double mu = 0.0;
    for (double p : row) mu += p;
    mu /= kd;
    // Deviations taken around row[0] so constant rows give exactly zero.
    double shift = 0.0;
    for (double p : row) shift += p - row[0];
    shift /= kd;
    double var = 0.0;
    std::size_t n_unsafe = 0;
    for (double p : row) {
      const double d = (p - row[0]) - shift;
      var += d * d;
      if (p >= threshold) ++n_unsafe;
    }
    const std::size_t n_safe = k - n_unsafe;
    const bool truth = m.labels()[i] == Label::kUnsafe;
    f.mu[i] = mu;
    f.sigma[i] = std::sqrt(var / kd);
    f.mistake_rate[i] = static_cast<double>(truth ? n_safe : n_unsafe) / kd;
    f.disagreement_rate[i] = 1.0 - static_cast<double>(std::max(n_unsafe, n_safe)) / kd;
  }
  if (n >= 10) {
    f.mistake_deciles = decile_gaps(f.sigma, f.mistake_rate);
    f.disagreement_deciles = decile_gaps(f.sigma, f.disagreement_rate);
    f.has_deciles = true;
  }
  return f;
}

DecileSummary decile_gaps(std::span<const double> sigma, std::span<const double> stat) {
  if (sigma.size() != stat.size()) throw ValidationError("sigma/stat length mismatch");
  const std::size_t n = sigma.size();
  if (n < 10) throw ValidationError("decile analysis needs at least 10 samples");
  const auto order = order_by_score(sigma);
  auto decile_mean = [&](std::size_t d) {
    const std::size_t lo = (d - 1) * n / 10;
    const std::size_t hi = d * n / 10;
    double s = 0.0;
    for (std::size_t r = lo; r < hi; ++r) s += stat[order[r]];
    return s / static_cast<double>(hi - lo);
  };
  DecileSummary out;
  out.d1 = decile_mean(1);
  out.d10 = decile_mean(10);
  out.gap = out.d10 - out.d1;
  return out;
}

DecileSummary decile_gaps(const FragilityProfile& profile, FragilityStat stat) {
  return decile_gaps(profile.sigma, stat == FragilityStat::kMistake ? profile.mistake_rate
                                                                    : profile.disagreement_rate);
}

}  // namespace promptrel
