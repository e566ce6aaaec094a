#include "promptrel/aggregate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace promptrel {

double to_logit(double p, double eps) {
  const double q = std::clamp(p, eps, 1.0 - eps);
  return std::log(q / (1.0 - q));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

std::string format_param(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

struct RuleName {
  RuleKind kind;
  const char* name;
};

constexpr RuleName kRuleNames[] = {
    {RuleKind::kMeanProb, "mean_prob"},
    {RuleKind::kTrimmedMean, "trimmed_mean"},
    {RuleKind::kMedianProb, "median_prob"},
    {RuleKind::kEntropyWeightedMean, "entropy_weighted_mean"},
    {RuleKind::kMeanLogit, "mean_logit"},
    {RuleKind::kMeanLogitUniform, "mean_logit_uniform"},
    {RuleKind::kTrimmedLogitMean, "trimmed_logit_mean"},
    {RuleKind::kMedianLogit, "median_logit"},
    {RuleKind::kBiasCorrectedLogitMean, "bias_corrected_logit_mean"},
    {RuleKind::kBiasScaleLogitMean, "bias_scale_logit_mean"},
    {RuleKind::kBiasScaleShrink, "bias_scale_shrink"},
};

bool is_trimmed(RuleKind k) {
  return k == RuleKind::kTrimmedMean || k == RuleKind::kTrimmedLogitMean;
}

}  // namespace

std::string AggregationRule::name() const {
  std::string base;
  for (const auto& rn : kRuleNames) {
    if (rn.kind == kind) base = rn.name;
  }
  if (kind == RuleKind::kBiasScaleShrink) return base + "_" + format_param(alpha);
  if (is_trimmed(kind) && trim_fraction != 0.1) return base + "_" + format_param(trim_fraction);
  return base;
}

bool AggregationRule::needs_correction_stats() const {
  return kind == RuleKind::kBiasCorrectedLogitMean || kind == RuleKind::kBiasScaleLogitMean ||
         kind == RuleKind::kBiasScaleShrink;
}

void AggregationRule::validate() const {
  if (!(trim_fraction >= 0.0 && trim_fraction < 0.5)) {
    throw ValidationError("trim fraction must lie in [0, 0.5)");
  }
  if (kind == RuleKind::kBiasScaleShrink && !(alpha >= 0.0 && alpha <= 1.0)) {
    throw ValidationError("shrink alpha must lie in [0, 1]");
  }
}

AggregationRule AggregationRule::parse(const std::string& name, double trim_fraction) {
  AggregationRule rule;
  rule.trim_fraction = trim_fraction;
  static const std::string kShrink = "bias_scale_shrink_";
  if (name.rfind(kShrink, 0) == 0) {
    rule.kind = RuleKind::kBiasScaleShrink;
    const std::string tail = name.substr(kShrink.size());
    char* end = nullptr;
    rule.alpha = std::strtod(tail.c_str(), &end);
    if (tail.empty() || *end != '\0') throw ValidationError("bad shrink alpha in '" + name + "'");
    rule.validate();
    return rule;
  }
  for (const auto& rn : kRuleNames) {
    if (rn.kind == RuleKind::kBiasScaleShrink) continue;
    const std::string base = rn.name;
    if (name == base) {
      rule.kind = rn.kind;
      return rule;
    }
    if (is_trimmed(rn.kind) && name.rfind(base + "_", 0) == 0) {
      const std::string tail = name.substr(base.size() + 1);
      char* end = nullptr;
      rule.kind = rn.kind;
      rule.trim_fraction = std::strtod(tail.c_str(), &end);
      if (tail.empty() || *end != '\0') throw ValidationError("bad trim in '" + name + "'");
      rule.validate();
      return rule;
    }
  }
  throw ValidationError("unknown aggregation rule '" + name + "'");
}

std::vector<AggregationRule> standard_sweep_rules(double trim_fraction,
                                                  std::span<const double> alphas) {
  static constexpr double kAlphas[] = {0.9, 0.75, 0.5, 0.25, 0.1};
  std::vector<AggregationRule> rules;
  auto add = [&](RuleKind k, double alpha = 1.0) {
    rules.push_back(AggregationRule{k, trim_fraction, alpha});
  };
  add(RuleKind::kMeanProb);
  add(RuleKind::kTrimmedMean);
  add(RuleKind::kMedianProb);
  add(RuleKind::kEntropyWeightedMean);
  add(RuleKind::kMeanLogit);
  add(RuleKind::kMeanLogitUniform);
  add(RuleKind::kTrimmedLogitMean);
  add(RuleKind::kMedianLogit);
  add(RuleKind::kBiasCorrectedLogitMean);
  add(RuleKind::kBiasScaleLogitMean);
  if (alphas.empty()) alphas = kAlphas;
  for (double a : alphas) add(RuleKind::kBiasScaleShrink, a);
  return rules;
}

std::vector<double> logit_matrix(const ScoreMatrix& m, double eps) {
  std::vector<double> z(m.values().size());
  std::transform(m.values().begin(), m.values().end(), z.begin(),
                 [eps](double p) { return to_logit(p, eps); });
  return z;
}

LogitCorrectionStats fit_logit_correction(std::span<const double> logits, std::size_t n,
                                          std::size_t k) {
  if (n < 2) throw ValidationError("logit correction needs at least 2 samples");
  if (logits.size() != n * k || k == 0) throw ValidationError("logit matrix shape mismatch");
  LogitCorrectionStats s;
  s.mu_hat.assign(k, 0.0);
  s.sigma_hat.assign(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) s.mu_hat[j] += logits[i * k + j];
  }
  for (double& mu : s.mu_hat) mu /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double d = logits[i * k + j] - s.mu_hat[j];
      s.sigma_hat[j] += d * d;
    }
  }
  for (double& sd : s.sigma_hat) sd = std::sqrt(sd / static_cast<double>(n));
  for (std::size_t j = 0; j < k; ++j) {
    s.mu_star += s.mu_hat[j];
    s.sigma_star += s.sigma_hat[j];
  }
  s.mu_star /= static_cast<double>(k);
  s.sigma_star /= static_cast<double>(k);
  return s;
}

LogitCorrectionStats fit_logit_correction(const ScoreMatrix& m, double eps) {
  if (m.n() < 2) throw ValidationError("logit correction needs at least 2 samples");
  const auto z = logit_matrix(m, eps);
  return fit_logit_correction(z, m.n(), m.k());
}

namespace {

void check_stats(const LogitCorrectionStats& stats, std::size_t k) {
  if (stats.mu_hat.size() != k || stats.sigma_hat.size() != k) {
    throw ValidationError("correction stats were fit on a different prompt set");
  }
}

}  // namespace

void apply_bias_correction(std::span<double> logits, std::size_t k,
                           const LogitCorrectionStats& stats) {
  check_stats(stats, k);
  for (std::size_t idx = 0; idx < logits.size(); ++idx) {
    const std::size_t j = idx % k;
    logits[idx] -= stats.mu_hat[j] - stats.mu_star;
  }
}

void apply_bias_scale(std::span<double> logits, std::size_t k, const LogitCorrectionStats& stats) {
  check_stats(stats, k);
  for (std::size_t idx = 0; idx < logits.size(); ++idx) {
    const std::size_t j = idx % k;
    const double sd = std::max(stats.sigma_hat[j], kSigmaFloor);
    logits[idx] = (logits[idx] - stats.mu_hat[j]) / sd * stats.sigma_star + stats.mu_star;
  }
}

void apply_bias_scale_shrink(std::span<double> logits, std::size_t k,
                             const LogitCorrectionStats& stats, double alpha) {
  check_stats(stats, k);
  for (std::size_t idx = 0; idx < logits.size(); ++idx) {
    const std::size_t j = idx % k;
    const double sd = std::max(stats.sigma_hat[j], kSigmaFloor);
    const double z = logits[idx];
    const double z_bs = (z - stats.mu_hat[j]) / sd * stats.sigma_star + stats.mu_star;
    logits[idx] = z + alpha * (z_bs - z);
  }
}

double median_of(std::vector<double> values) {
  if (values.empty()) throw ValidationError("median of empty row");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double trimmed_mean_of(std::vector<double> values, double trim_fraction) {
  const std::size_t k = values.size();
  const auto cut = static_cast<std::size_t>(std::floor(trim_fraction * static_cast<double>(k)));
  if (2 * cut >= k) throw ValidationError("trim removes every prompt");
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (std::size_t j = cut; j < k - cut; ++j) sum += values[j];
  return sum / static_cast<double>(k - 2 * cut);
}

double binary_entropy_bits(double p) {
  double h = 0.0;
  if (p > 0.0) h -= p * std::log2(p);
  if (p < 1.0) h -= (1.0 - p) * std::log2(1.0 - p);
  return h;
}

double entropy_weighted_mean_of(std::span<const double> probs) {
  double wsum = 0.0;
  double acc = 0.0;
  for (double p : probs) {
    const double w = std::max(0.0, 1.0 - binary_entropy_bits(p));
    wsum += w;
    acc += w * p;
  }
  if (wsum > 0.0) return std::clamp(acc / wsum, 0.0, 1.0);
  // Every prompt maximally uncertain: uniform weights.
  double sum = 0.0;
  for (double p : probs) sum += p;
  return sum / static_cast<double>(probs.size());
}

namespace {

double row_mean(std::span<const double> r) {
  double s = 0.0;
  for (double v : r) s += v;
  return s / static_cast<double>(r.size());
}

}  // namespace

std::vector<double> aggregate(const ScoreMatrix& m, const AggregationRule& rule,
                              const LogitCorrectionStats* stats, double eps) {
  rule.validate();
  const std::size_t n = m.n();
  const std::size_t k = m.k();
  std::vector<double> out(n);

  if (rule.kind == RuleKind::kTrimmedMean || rule.kind == RuleKind::kTrimmedLogitMean) {
    const auto cut =
        static_cast<std::size_t>(std::floor(rule.trim_fraction * static_cast<double>(k)));
    if (2 * cut >= k) throw ValidationError("trim removes every prompt for rule " + rule.name());
  }

  switch (rule.kind) {
    case RuleKind::kMeanProb:
      for (std::size_t i = 0; i < n; ++i) out[i] = row_mean(m.row(i));
      return out;
    case RuleKind::kTrimmedMean:
      for (std::size_t i = 0; i < n; ++i) {
        auto r = m.row(i);
        out[i] = trimmed_mean_of({r.begin(), r.end()}, rule.trim_fraction);
      }
      return out;
    case RuleKind::kMedianProb:
      for (std::size_t i = 0; i < n; ++i) {
        auto r = m.row(i);
        out[i] = median_of({r.begin(), r.end()});
      }
      return out;
    case RuleKind::kEntropyWeightedMean:
      for (std::size_t i = 0; i < n; ++i) out[i] = entropy_weighted_mean_of(m.row(i));
      return out;
    default:
      break;
  }

  auto z = logit_matrix(m, eps);
  if (rule.needs_correction_stats()) {
    LogitCorrectionStats fitted;
    if (stats == nullptr) {
      fitted = fit_logit_correction(z, n, k);
      stats = &fitted;
    }
    if (rule.kind == RuleKind::kBiasCorrectedLogitMean) {
      apply_bias_correction(z, k, *stats);
    } else if (rule.kind == RuleKind::kBiasScaleLogitMean) {
      apply_bias_scale(z, k, *stats);
    } else {
      apply_bias_scale_shrink(z, k, *stats, rule.alpha);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> r{z.data() + i * k, k};
    double zi;
    switch (rule.kind) {
      case RuleKind::kTrimmedLogitMean:
        zi = trimmed_mean_of({r.begin(), r.end()}, rule.trim_fraction);
        break;
      case RuleKind::kMedianLogit:
        zi = median_of({r.begin(), r.end()});
        break;
      default:
        zi = row_mean(r);
        break;
    }
    out[i] = sigmoid(zi);
  }
  return out;
}

std::vector<double> mean_ensemble(const ScoreMatrix& m) {
  return aggregate(m, AggregationRule{RuleKind::kMeanProb});
}

std::vector<double> top_k_mean(const ScoreMatrix& m, std::span<const int> prompt_ranking,
                               std::size_t k) {
  if (prompt_ranking.size() != m.k()) {
    throw ValidationError("prompt ranking must be a permutation of the matrix prompts");
  }
  std::vector<bool> seen(m.k(), false);
  std::vector<std::size_t> cols;
  for (int id : prompt_ranking) {
    const std::size_t c = m.column_index(id);
    if (seen[c]) throw ValidationError("prompt ranking repeats prompt " + std::to_string(id));
    seen[c] = true;
    cols.push_back(c);
  }
  if (k < 1 || k > m.k()) {
    throw ValidationError("top-k: k=" + std::to_string(k) + " outside [1, " +
                          std::to_string(m.k()) + "]");
  }
  std::vector<double> out(m.n(), 0.0);
  for (std::size_t i = 0; i < m.n(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += m.at(i, cols[j]);
    out[i] = s / static_cast<double>(k);
  }
  return out;
}

}  // namespace promptrel
