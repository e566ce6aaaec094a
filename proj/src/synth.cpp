#include "promptrel/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>

#include "promptrel/aggregate.hpp"
#include "promptrel/rng.hpp"

namespace promptrel {

void SynthConfig::validate() const {
  if (n_samples < 1) throw ValidationError("synth: n_samples must be >= 1");
  if (k_prompts < 1) throw ValidationError("synth: k_prompts must be >= 1");
  if (!(latent_logit_std > 0.0)) throw ValidationError("synth: latent_logit_std must be > 0");
  if (!(per_prompt_bias_std >= 0.0)) throw ValidationError("synth: bias std must be >= 0");
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi)) {
    throw ValidationError("synth: need 0 < scale_lo <= scale_hi");
  }
  if (!(noise_std >= 0.0)) throw ValidationError("synth: noise_std must be >= 0");
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) {
    throw ValidationError("synth: train_fraction must lie in [0, 1]");
  }
}

SynthResult generate_detailed(const SynthConfig& cfg) {
  cfg.validate();
  Pcg32 rng(cfg.seed, 0);
  const std::size_t n = cfg.n_samples, k = cfg.k_prompts;
  SynthResult out;
  out.prompt_bias.resize(k);
  out.prompt_scale.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    out.prompt_bias[j] = rng.normal(0.0, cfg.per_prompt_bias_std);
    out.prompt_scale[j] = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  }
  std::vector<PromptMeta> prompts(k);
  for (std::size_t j = 0; j < k; ++j) {
    prompts[j].prompt_id = static_cast<int>(j) + 1;
    prompts[j].family = static_cast<Family>(std::min<std::size_t>(j * 3 / k, 2));
  }
  const auto n_train =
      static_cast<std::size_t>(std::floor(cfg.train_fraction * static_cast<double>(n) + 0.5));
  std::vector<std::string> ids(n), datasets(n, cfg.dataset);
  std::vector<Label> labels(n);
  std::vector<Split> splits(n);
  std::vector<double> values(n * k);
  out.latent.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%07zu", i);
    ids[i] = buf;
    const double z = rng.normal(0.0, cfg.latent_logit_std);
    out.latent[i] = z;
    labels[i] = rng.bernoulli(sigmoid(z)) ? Label::kUnsafe : Label::kSafe;
    splits[i] = i < n_train ? Split::kTrain : Split::kTest;
    for (std::size_t j = 0; j < k; ++j) {
      const double e = rng.normal(0.0, cfg.noise_std);
      values[i * k + j] = sigmoid(out.prompt_bias[j] + out.prompt_scale[j] * z + e);
    }
  }
  out.matrix = ScoreMatrix(std::move(ids), std::move(datasets), std::move(labels),
                           std::move(splits), std::move(prompts), std::move(values), cfg.model);
  return out;
}

ScoreMatrix generate(const SynthConfig& cfg) { return generate_detailed(cfg).matrix; }

namespace oracle {

double auroc(std::span<const double> scores, std::span<const double> labels) {
  double credit = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] < 0.5) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] > 0.5) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) {
        credit += 1.0;
      } else if (scores[i] == scores[j]) {
        credit += 0.5;
      }
    }
  }
  if (pairs == 0.0) throw UndefinedMetricError("oracle AUROC needs both classes");
  return credit / pairs;
}

double auprc(std::span<const double> scores, std::span<const double> labels) {
  const double total_pos =
      std::count_if(labels.begin(), labels.end(), [](double y) { return y > 0.5; });
  if (total_pos == 0.0) throw UndefinedMetricError("oracle AUPRC needs a positive");
  std::set<double, std::greater<>> thresholds(scores.begin(), scores.end());
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0, predicted = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) {
        predicted += 1.0;
        if (labels[i] > 0.5) tp += 1.0;
      }
    }
    const double recall = tp / total_pos;
    ap += (recall - prev_recall) * (tp / predicted);
    prev_recall = recall;
  }
  return ap;
}

std::vector<double> isotonic(std::span<const double> scores, std::span<const double> labels) {
  const std::size_t n = scores.size();
  if (n == 0 || n > 8) throw ValidationError("oracle isotonic supports 1 <= N <= 8");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Cut positions c in 1..n-1 split between sorted ranks c-1 and c.
  std::vector<std::size_t> cuttable;
  for (std::size_t c = 1; c < n; ++c) {
    if (scores[order[c - 1]] != scores[order[c]]) cuttable.push_back(c);
  }
  double best_sse = std::numeric_limits<double>::infinity();
  std::vector<double> best(n);
  for (std::uint32_t mask = 0; mask < (1u << cuttable.size()); ++mask) {
    std::vector<std::size_t> bounds{0};
    for (std::size_t b = 0; b < cuttable.size(); ++b) {
      if (mask & (1u << b)) bounds.push_back(cuttable[b]);
    }
    bounds.push_back(n);
    std::vector<double> fitted(n);
    double prev = -std::numeric_limits<double>::infinity();
    bool monotone = true;
    double sse = 0.0;
    for (std::size_t blk = 0; blk + 1 < bounds.size(); ++blk) {
      double s = 0.0;
      for (std::size_t r = bounds[blk]; r < bounds[blk + 1]; ++r) s += labels[order[r]];
      const double v = s / static_cast<double>(bounds[blk + 1] - bounds[blk]);
      if (v < prev) {
        monotone = false;
        break;
      }
      prev = v;
      for (std::size_t r = bounds[blk]; r < bounds[blk + 1]; ++r) {
        fitted[order[r]] = v;
        sse += (v - labels[order[r]]) * (v - labels[order[r]]);
      }
    }
    if (monotone && sse < best_sse) {
      best_sse = sse;
      best = fitted;
    }
  }
  return best;
}

}  // namespace oracle

}  // namespace promptrel
