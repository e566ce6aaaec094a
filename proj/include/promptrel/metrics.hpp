#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptrel/core.hpp"

namespace promptrel {

// Scores are probabilities of the unsafe class; labels are 0/1 indicators.
// An empty weight span means unweighted.

double nll(std::span<const double> scores, std::span<const double> labels,
           std::span<const double> weights = {}, double eps = 1e-12);

enum class BinScheme { kEqualWidth, kEqualMass };

struct EceSpec {
  int bins = 15;
  BinScheme scheme = BinScheme::kEqualWidth;

  // "ece_w15", "ece_m15", ...
  std::string id() const;
  void validate() const;
  auto operator<=>(const EceSpec&) const = default;
};

// The binning variants reported side by side.
std::vector<EceSpec> ece_variants();

double ece(std::span<const double> scores, std::span<const double> labels, const EceSpec& spec,
           std::span<const double> weights = {});

// Per-sample bin index under `spec`.
std::vector<int> assign_bins(std::span<const double> scores, const EceSpec& spec);
// Equal-width bin of a single score: min(floor(p * bins), bins - 1).
int equal_width_bin(double p, int bins);

struct ReliabilityBin {
  int bin = 0;
  double conf = 0.0;
  double freq = 0.0;
  double mass = 0.0;  // fraction of total weight
  double count = 0.0;
};

// Occupied bins only, ascending bin index.
std::vector<ReliabilityBin> reliability_bins(std::span<const double> scores,
                                             std::span<const double> labels, const EceSpec& spec,
                                             std::span<const double> weights = {});

// Mann-Whitney AUROC with half credit for ties. Throws UndefinedMetricError
// if either class has no (positive-weight) members.
double auroc(std::span<const double> scores, std::span<const double> labels,
             std::span<const double> weights = {});

// Step-wise average precision with tied scores grouped into one threshold.
double auprc(std::span<const double> scores, std::span<const double> labels,
             std::span<const double> weights = {});

// Prediction is unsafe iff score >= threshold.
double error_at_threshold(std::span<const double> scores, std::span<const double> labels,
                          double threshold = 0.5, std::span<const double> weights = {});

struct EvalReport {
  double nll = 0.0;
  std::map<EceSpec, double> ece;
  std::optional<double> auroc;  // empty when undefined (single class)
  std::optional<double> auprc;
  double error_at_threshold = 0.0;
  std::size_t n = 0;
  bool weighted = false;
};

EvalReport evaluate(std::span<const double> scores, std::span<const double> labels,
                    std::span<const double> weights = {}, double threshold = 0.5,
                    double eps = 1e-12);

struct DecileSummary {
  double d1 = 0.0;
  double d10 = 0.0;
  double gap = 0.0;  // d10 - d1
};

struct FragilityProfile {
  std::vector<double> mu;
  std::vector<double> sigma;
  std::vector<double> mistake_rate;
  std::vector<double> disagreement_rate;
  DecileSummary mistake_deciles;
  DecileSummary disagreement_deciles;  // filled when n >= 10
  bool has_deciles = false;
};

FragilityProfile fragility_profile(const ScoreMatrix& m, double threshold = 0.5);

// Deciles of samples sorted ascending by sigma (ties by index); decile d
// covers ranks [floor((d-1)N/10), floor(dN/10)).
DecileSummary decile_gaps(std::span<const double> sigma, std::span<const double> stat);

enum class FragilityStat { kMistake, kDisagreement };
DecileSummary decile_gaps(const FragilityProfile& profile, FragilityStat stat);

}  // namespace promptrel
