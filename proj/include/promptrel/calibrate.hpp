#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "promptrel/core.hpp"

namespace promptrel {

struct SelectionStage {
  std::string criterion;  // "nll", "ece_w15", "err05", "prompt_id"
  std::vector<int> survivors;
};

struct SelectionResult {
  int selected_prompt_id = 0;
  std::vector<SelectionStage> trail;
};

// Train-locked single prompt: minimum NLL, exact ties broken by 15-bin ECE,
// then error at the threshold, then smallest prompt id.
SelectionResult select_prompt(const ScoreMatrix& train, double threshold = 0.5, double eps = 1e-12);

// Uniform draw over 1..k: one bounded draw from Pcg32(seed, stream 0).
int locked_random_prompt(std::uint64_t seed, std::size_t k);

// Prompt ids ordered by ascending train NLL (ties by id).
std::vector<int> rank_prompts_by_nll(const ScoreMatrix& train, double eps = 1e-12);

enum class CalibratorKind { kTemperature, kPlatt, kIsotonic };
std::string_view to_string(CalibratorKind k);

// A fitted monotone score map. Temperature and Platt act on the clipped
// logit of the input score.
class Calibrator {
 public:
  static Calibrator temperature(double t);
  static Calibrator platt(double a, double b);
  // knots strictly ascending; values nondecreasing in [0,1].
  static Calibrator isotonic(std::vector<double> knots, std::vector<double> values);

  CalibratorKind kind() const { return kind_; }
  double t() const { return t_; }
  double a() const { return a_; }
  double b() const { return b_; }
  const std::vector<double>& knots() const { return knots_; }
  const std::vector<double>& values() const { return values_; }
  // Platt fit with a negative slope.
  bool inverted() const { return kind_ == CalibratorKind::kPlatt && a_ < 0.0; }

  double apply(double score) const;
  std::vector<double> apply(std::span<const double> scores) const;

  std::string to_json() const;
  static Calibrator from_json(const std::string& text);

  // Optimizer diagnostics (not serialized).
  int iterations = 0;

 private:
  CalibratorKind kind_ = CalibratorKind::kTemperature;
  double t_ = 1.0;
  double a_ = 1.0;
  double b_ = 0.0;
  std::vector<double> knots_;
  std::vector<double> values_;
};

// Golden-section search over log T in [log 0.05, log 20], tolerance 1e-6.
Calibrator fit_temperature(std::span<const double> scores, std::span<const double> labels,
                           double eps = 1e-12);

// Ridge-stabilized logistic MLE on (a, b) by damped Newton.
Calibrator fit_platt(std::span<const double> scores, std::span<const double> labels,
                     double eps = 1e-12);

// Pool-adjacent-violators; tied scores share one block.
Calibrator fit_isotonic(std::span<const double> scores, std::span<const double> labels);

Calibrator fit_calibrator(CalibratorKind kind, std::span<const double> scores,
                          std::span<const double> labels, double eps = 1e-12);

}  // namespace promptrel
