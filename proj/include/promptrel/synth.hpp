#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "promptrel/core.hpp"

namespace promptrel {

// Synthetic prompt-score matrices with per-prompt bias/scale corruption:
//   z_i ~ N(0, latent_std^2),  y_i ~ Bernoulli(sigmoid(z_i)),
//   z_ik = a_k + b_k z_i + e_ik,  a_k ~ N(0, bias_std^2),
//   b_k ~ U(scale_lo, scale_hi),  e_ik ~ N(0, noise_std^2),
//   p_ik = sigmoid(z_ik).
// Draw order: all (a_k, b_k) for k = 1..K, then per sample z_i, the label
// uniform, and e_i1..e_iK. Everything comes from Pcg32(seed, stream 0).
struct SynthConfig {
  std::size_t n_samples = 1000;
  std::size_t k_prompts = 15;
  double latent_logit_std = 2.0;
  double per_prompt_bias_std = 0.0;
  double scale_lo = 1.0;
  double scale_hi = 1.0;
  double noise_std = 0.0;
  std::uint64_t seed = 42;
  // Leading fraction of samples tagged train; the rest test.
  double train_fraction = 0.5;
  std::string dataset = "synth";
  std::string model = "synth";

  void validate() const;
};

struct SynthResult {
  ScoreMatrix matrix;
  std::vector<double> latent;        // z_i
  std::vector<double> prompt_bias;   // a_k
  std::vector<double> prompt_scale;  // b_k
};

SynthResult generate_detailed(const SynthConfig& cfg);
ScoreMatrix generate(const SynthConfig& cfg);

// Brute-force reference implementations used to cross-check the library.
namespace oracle {

// Explicit double loop over (positive, negative) pairs.
double auroc(std::span<const double> scores, std::span<const double> labels);

// Threshold enumeration: for each distinct score t (descending), precision
// and recall of {score >= t}; AP = sum (R_t - R_prev) P_t.
double auprc(std::span<const double> scores, std::span<const double> labels);

// Exhaustive monotone least squares over all block partitions of the
// score-sorted sequence (cuts only between distinct scores). N <= 8.
// Returns fitted values in input order.
std::vector<double> isotonic(std::span<const double> scores, std::span<const double> labels);

}  // namespace oracle

}  // namespace promptrel
