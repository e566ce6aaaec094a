#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptrel/aggregate.hpp"
#include "promptrel/core.hpp"
#include "promptrel/metrics.hpp"

namespace promptrel {

// ---------------------------------------------------------------------------
// Win counts and ranks

struct WinCountTable {
  std::vector<std::string> methods;
  std::vector<int> wins;         // strictly lowest value per pair; exact ties share
  std::vector<double> avg_rank;  // 1 = best, average-rank convention for ties
  std::size_t pairs = 0;         // pairs that contributed
  std::vector<std::string> warnings;
};

// values[p][m]: metric for pair p and method m (lower is better).
WinCountTable win_counts(std::span<const std::vector<double>> values,
                         std::vector<std::string> methods);

// Average ranks (1-based) of one row, ties sharing the mean rank.
std::vector<double> average_ranks(std::span<const double> row);

struct EvaluationPair {
  std::string name;  // e.g. "model/dataset"
  ScoreMatrix matrix;
};

// NLL sweep of aggregation rules over evaluation pairs. Pairs on which a
// rule fails are excluded with a warning.
WinCountTable sweep_rules(std::span<const EvaluationPair> pairs,
                          std::span<const AggregationRule> rules, double eps = 1e-12);

// ---------------------------------------------------------------------------
// Selective prediction

enum class SignalKind { kStdPU, kEntropyMean, kMarginSingle };
std::string_view to_string(SignalKind k);
SignalKind parse_signal(std::string_view s);

struct UncertaintySignal {
  SignalKind kind;
  std::vector<double> values;  // higher = more uncertain
};

// `selected_prompt` is required for kMarginSingle.
UncertaintySignal uncertainty(const ScoreMatrix& m, SignalKind kind,
                              std::optional<int> selected_prompt = std::nullopt);

struct CoveragePoint {
  double coverage = 1.0;
  std::size_t retained = 0;
  double error = 0.0;
  double nll = 0.0;
  double ece = 0.0;
};

struct CoverageCurve {
  std::vector<CoveragePoint> points;  // in grid order
};

enum class RiskMetric { kError, kNll, kEce };

// Retains round-half-up(c N) samples with the lowest signal (ties by index)
// and evaluates error@threshold, NLL and 15-bin ECE on them.
CoverageCurve risk_coverage(std::span<const double> scores, std::span<const double> labels,
                            std::span<const double> signal, std::span<const double> grid,
                            double threshold = 0.5, double eps = 1e-12);

// Normalized trapezoid over evaluated points in [c_min, c_max]; both ends must
// be grid points.
double aurc(const CoverageCurve& curve, RiskMetric metric, double c_min, double c_max);

double risk_at(const CoverageCurve& curve, RiskMetric metric, double coverage);

// ---------------------------------------------------------------------------
// Bootstrap

enum class DeltaMetric { kNll, kEceW15 };
std::string_view to_string(DeltaMetric m);

struct BootstrapResult {
  double point_delta = 0.0;  // metric(baseline) - metric(candidate)
  double ci_low = 0.0;
  double ci_high = 0.0;
  double p_two_sided = 1.0;
  int b = 0;
  std::uint64_t seed = 0;
};

struct BootstrapOptions {
  int b = 10000;
  std::uint64_t seed = 42;
  unsigned threads = 1;
};

// Per-sample bootstrap of metric(baseline) - metric(candidate). Resample r
// draws N indices from Pcg32(seed, stream r). Optional fixed weights are
// applied inside every resample.
BootstrapResult bootstrap_delta(std::span<const double> candidate, std::span<const double> baseline,
                                std::span<const double> labels, DeltaMetric metric,
                                const BootstrapOptions& opts, std::span<const double> weights = {},
                                double eps = 1e-12);

// Linear interpolation between order statistics; q in [0,1]. Sorts in place.
double percentile(std::vector<double>& values, double q);

// ---------------------------------------------------------------------------
// Prevalence

struct PrevalenceSpec {
  std::optional<double> target_pi;  // empty = native
  double native_pi = 0.0;
  std::vector<double> weights;
};

PrevalenceSpec prevalence_weights(std::span<const double> labels, std::optional<double> target);

struct PrevalenceRow {
  std::optional<double> target_pi;
  DeltaMetric metric;
  BootstrapResult result;
};

// Native target first, then each requested target; NLL and ECE-15 per target.
std::vector<PrevalenceRow> prevalence_stress(std::span<const double> candidate,
                                             std::span<const double> baseline,
                                             std::span<const double> labels,
                                             std::span<const double> targets,
                                             const BootstrapOptions& opts, double eps = 1e-12);

}  // namespace promptrel
