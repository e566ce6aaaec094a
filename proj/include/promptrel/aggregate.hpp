#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptrel/core.hpp"

namespace promptrel {

inline constexpr double kDefaultEpsilon = 1e-12;
// Floor applied to per-prompt logit spread before rescaling.
inline constexpr double kSigmaFloor = 1e-8;

// Clipped logit: log(p'/(1-p')), p' = clamp(p, eps, 1-eps).
double to_logit(double p, double eps = kDefaultEpsilon);
double sigmoid(double z);

enum class RuleKind {
  kMeanProb,
  kTrimmedMean,
  kMedianProb,
  kEntropyWeightedMean,
  kMeanLogit,
  kMeanLogitUniform,
  kTrimmedLogitMean,
  kMedianLogit,
  kBiasCorrectedLogitMean,
  kBiasScaleLogitMean,
  kBiasScaleShrink,
};

struct AggregationRule {
  RuleKind kind = RuleKind::kMeanProb;
  double trim_fraction = 0.1;
  double alpha = 1.0;  // shrink rules only

  // Stable snake_case identifier, e.g. "bias_scale_shrink_0.25".
  std::string name() const;
  bool needs_correction_stats() const;
  void validate() const;

  static AggregationRule parse(const std::string& name, double trim_fraction = 0.1);
};

// The 15 training-free rules in report order.
std::vector<AggregationRule> standard_sweep_rules(double trim_fraction = 0.1,
                                                  std::span<const double> alphas = {});

struct LogitCorrectionStats {
  std::vector<double> mu_hat;     // per-prompt logit mean
  std::vector<double> sigma_hat;  // per-prompt population std
  double mu_star = 0.0;
  double sigma_star = 0.0;
};

// Row-major N x K clipped logits of the matrix.
std::vector<double> logit_matrix(const ScoreMatrix& m, double eps = kDefaultEpsilon);

LogitCorrectionStats fit_logit_correction(const ScoreMatrix& m, double eps = kDefaultEpsilon);
LogitCorrectionStats fit_logit_correction(std::span<const double> logits, std::size_t n,
                                          std::size_t k);

// In-place per-prompt corrections on a row-major N x K logit matrix.
void apply_bias_correction(std::span<double> logits, std::size_t k,
                           const LogitCorrectionStats& stats);
void apply_bias_scale(std::span<double> logits, std::size_t k, const LogitCorrectionStats& stats);
// z + alpha * (z_bs - z).
void apply_bias_scale_shrink(std::span<double> logits, std::size_t k,
                             const LogitCorrectionStats& stats, double alpha);

// One score in [0,1] per sample. Correction rules fit stats on `m` itself
// unless `stats` is supplied.
std::vector<double> aggregate(const ScoreMatrix& m, const AggregationRule& rule,
                              const LogitCorrectionStats* stats = nullptr,
                              double eps = kDefaultEpsilon);

std::vector<double> mean_ensemble(const ScoreMatrix& m);

// Mean probability over the first k prompts of `prompt_ranking` (prompt ids).
std::vector<double> top_k_mean(const ScoreMatrix& m, std::span<const int> prompt_ranking,
                               std::size_t k);

// Row-level reductions, exposed for testing.
double median_of(std::vector<double> values);
double trimmed_mean_of(std::vector<double> values, double trim_fraction);
// Base-2 binary entropy with 0 log 0 = 0.
double binary_entropy_bits(double p);
double entropy_weighted_mean_of(std::span<const double> probs);

}  // namespace promptrel
