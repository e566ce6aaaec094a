#include "promptrel/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <numeric>

#include "promptrel/aggregate.hpp"
#include "promptrel/metrics.hpp"
#include "promptrel/rng.hpp"

namespace promptrel {

namespace {

struct PromptStats {
  int id;
  double nll;
  double ece;
  double err;
};

// Keeps survivors whose metric equals the minimum exactly.
std::vector<PromptStats> keep_min(const std::vector<PromptStats>& in, double PromptStats::* field) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : in) best = std::min(best, s.*field);
  std::vector<PromptStats> out;
  for (const auto& s : in) {
    if (s.*field == best) out.push_back(s);
  }
  return out;
}

std::vector<int> ids_of(const std::vector<PromptStats>& v) {
  std::vector<int> ids;
  for (const auto& s : v) ids.push_back(s.id);
  return ids;
}

void require_both_classes(std::span<const double> labels, const char* what) {
  bool pos = false, neg = false;
  for (double y : labels) (y > 0.5 ? pos : neg) = true;
  if (!pos || !neg) {
    throw ValidationError(std::string(what) + " needs both classes in the training labels");
  }
}

}  // namespace

SelectionResult select_prompt(const ScoreMatrix& train, double threshold, double eps) {
  if (train.n() == 0) throw EmptySplitError("prompt selection needs labeled train rows");
  const auto y = train.label_indicators();
  std::vector<PromptStats> stats;
  for (std::size_t k = 0; k < train.k(); ++k) {
    const auto col = train.column(k);
    stats.push_back({train.prompts()[k].prompt_id, nll(col, y, {}, eps),
                     ece(col, y, EceSpec{15, BinScheme::kEqualWidth}),
                     error_at_threshold(col, y, threshold)});
  }
  std::sort(stats.begin(), stats.end(),
            [](const PromptStats& a, const PromptStats& b) { return a.id < b.id; });

  SelectionResult result;
  auto survivors = keep_min(stats, &PromptStats::nll);
  result.trail.push_back({"nll", ids_of(survivors)});
  if (survivors.size() > 1) {
    survivors = keep_min(survivors, &PromptStats::ece);
    result.trail.push_back({"ece_w15", ids_of(survivors)});
  }
  if (survivors.size() > 1) {
    survivors = keep_min(survivors, &PromptStats::err);
    result.trail.push_back({"err05", ids_of(survivors)});
  }
  if (survivors.size() > 1) {
    survivors.resize(1);  // sorted by id
    result.trail.push_back({"prompt_id", ids_of(survivors)});
  }
  result.selected_prompt_id = survivors.front().id;
  return result;
}

int locked_random_prompt(std::uint64_t seed, std::size_t k) {
  if (k < 1) throw ValidationError("random prompt needs K >= 1");
  Pcg32 rng(seed, 0);
  return static_cast<int>(rng.bounded(static_cast<std::uint32_t>(k))) + 1;
}

std::vector<int> rank_prompts_by_nll(const ScoreMatrix& train, double eps) {
  const auto y = train.label_indicators();
  std::vector<std::pair<double, int>> v;
  for (std::size_t k = 0; k < train.k(); ++k) {
    v.emplace_back(nll(train.column(k), y, {}, eps), train.prompts()[k].prompt_id);
  }
  std::sort(v.begin(), v.end());
  std::vector<int> ids;
  for (const auto& [_, id] : v) ids.push_back(id);
  return ids;
}

std::string_view to_string(CalibratorKind k) {
  switch (k) {
    case CalibratorKind::kTemperature:
      return "temperature";
    case CalibratorKind::kPlatt:
      return "platt";
    case CalibratorKind::kIsotonic:
      return "isotonic";
  }
  return "?";
}

Calibrator Calibrator::temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) throw ValidationError("temperature must be positive");
  Calibrator c;
  c.kind_ = CalibratorKind::kTemperature;
  c.t_ = t;
  return c;
}

Calibrator Calibrator::platt(double a, double b) {
  if (!std::isfinite(a) || !std::isfinite(b)) throw ValidationError("platt parameters not finite");
  Calibrator c;
  c.kind_ = CalibratorKind::kPlatt;
  c.a_ = a;
  c.b_ = b;
  return c;
}

Calibrator Calibrator::isotonic(std::vector<double> knots, std::vector<double> values) {
  if (knots.empty() || knots.size() != values.size()) {
    throw ValidationError("isotonic calibrator needs matching non-empty knots and values");
  }
  for (std::size_t i = 0; i < knots.size(); ++i) {
    if (!(values[i] >= 0.0 && values[i] <= 1.0)) {
      throw ValidationError("isotonic values must lie in [0,1]");
    }
    if (i > 0 && !(knots[i] > knots[i - 1])) {
      throw ValidationError("isotonic knots must be strictly ascending");
    }
    if (i > 0 && values[i] < values[i - 1]) {
      throw ValidationError("isotonic values must be nondecreasing");
    }
  }
  Calibrator c;
  c.kind_ = CalibratorKind::kIsotonic;
  c.knots_ = std::move(knots);
  c.values_ = std::move(values);
  return c;
}

double Calibrator::apply(double score) const {
  switch (kind_) {
    case CalibratorKind::kTemperature:
      return sigmoid(to_logit(score) / t_);
    case CalibratorKind::kPlatt:
      return sigmoid(a_ * to_logit(score) + b_);
    case CalibratorKind::kIsotonic: {
      // Left-continuous step: value of the first knot >= score.
      auto it = std::lower_bound(knots_.begin(), knots_.end(), score);
      if (it == knots_.end()) return values_.back();
      return values_[static_cast<std::size_t>(it - knots_.begin())];
    }
  }
  return score;
}

std::vector<double> Calibrator::apply(std::span<const double> scores) const {
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = apply(scores[i]);
  return out;
}

std::string Calibrator::to_json() const {
  nlohmann::ordered_json j;
  j["kind"] = to_string(kind_);
  switch (kind_) {
    case CalibratorKind::kTemperature:
      j["T"] = t_;
      break;
    case CalibratorKind::kPlatt:
      j["a"] = a_;
      j["b"] = b_;
      break;
    case CalibratorKind::kIsotonic:
      j["knots"] = knots_;
      j["values"] = values_;
      break;
  }
  return j.dump();
}

Calibrator Calibrator::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "temperature") return temperature(j.at("T").get<double>());
    if (kind == "platt") return platt(j.at("a").get<double>(), j.at("b").get<double>());
    if (kind == "isotonic") {
      return isotonic(j.at("knots").get<std::vector<double>>(),
                      j.at("values").get<std::vector<double>>());
    }
    throw ValidationError("unknown calibrator kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad calibrator JSON: ") + e.what());
  }
}

namespace {

double softplus(double s) { return std::max(s, 0.0) + std::log1p(std::exp(-std::abs(s))); }

double temperature_nll(std::span<const double> z, std::span<const double> y, double log_t) {
  const double inv_t = std::exp(-log_t);
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double s = z[i] * inv_t;
    acc += softplus(s) - y[i] * s;
  }
  return acc / static_cast<double>(z.size());
}

std::vector<double> clipped_logits(std::span<const double> scores, double eps) {
  std::vector<double> z(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) z[i] = to_logit(scores[i], eps);
  return z;
}

}  // namespace

Calibrator fit_temperature(std::span<const double> scores, std::span<const double> labels,
                           double eps) {
  if (scores.size() != labels.size()) throw ValidationError("scores/labels length mismatch");
  require_both_classes(labels, "temperature scaling");
  const auto z = clipped_logits(scores, eps);

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = std::log(0.05), hi = std::log(20.0);
  double x1 = hi - inv_phi * (hi - lo);
  double x2 = lo + inv_phi * (hi - lo);
  double f1 = temperature_nll(z, labels, x1);
  double f2 = temperature_nll(z, labels, x2);
  int iters = 0;
  while (hi - lo > 1e-6) {
    ++iters;
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = temperature_nll(z, labels, x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = temperature_nll(z, labels, x2);
    }
  }
  auto cal = Calibrator::temperature(std::exp(0.5 * (lo + hi)));
  cal.iterations = iters;
  return cal;
}

Calibrator fit_platt(std::span<const double> scores, std::span<const double> labels, double eps) {
  if (scores.size() != labels.size()) throw ValidationError("scores/labels length mismatch");
  require_both_classes(labels, "Platt scaling");
  constexpr double kRidge = 1e-8;
  constexpr double kGradTol = 1e-10;
  constexpr int kMaxIter = 100;

  const auto z = clipped_logits(scores, eps);
  const double n = static_cast<double>(z.size());

  auto objective = [&](double a, double b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double s = a * z[i] + b;
      acc += softplus(s) - labels[i] * s;
    }
    return acc / n + 0.5 * kRidge * (a * a + b * b);
  };

  double a = 1.0, b = 0.0;
  double f = objective(a, b);
  for (int iter = 1; iter <= kMaxIter; ++iter) {
    double ga = 0.0, gb = 0.0, haa = 0.0, hab = 0.0, hbb = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double p = sigmoid(a * z[i] + b);
      const double r = p - labels[i];
      const double w = p * (1.0 - p);
      ga += r * z[i];
      gb += r;
      haa += w * z[i] * z[i];
      hab += w * z[i];
      hbb += w;
    }
    ga = ga / n + kRidge * a;
    gb = gb / n + kRidge * b;
    haa = haa / n + kRidge;
    hab = hab / n;
    hbb = hbb / n + kRidge;
    if (std::hypot(ga, gb) < kGradTol) {
      auto cal = Calibrator::platt(a, b);
      cal.iterations = iter - 1;
      return cal;
    }
    const double det = haa * hbb - hab * hab;
    double da = -(hbb * ga - hab * gb) / det;
    double db = -(haa * gb - hab * ga) / det;
    // Backtracking on the Armijo condition.
    const double slope = ga * da + gb * db;
    double step = 1.0;
    double f_new = objective(a + da, b + db);
    while (f_new > f + 1e-4 * step * slope && step > 1e-12) {
      step *= 0.5;
      f_new = objective(a + step * da, b + step * db);
    }
    const double na = a + step * da, nb = b + step * db;
    // Stationary to machine precision even if the gradient test is noisy.
    if (na == a && nb == b) {
      auto cal = Calibrator::platt(a, b);
      cal.iterations = iter;
      return cal;
    }
    a = na;
    b = nb;
    f = f_new;
  }
  throw ComputationError("Platt scaling did not converge after " + std::to_string(kMaxIter) +
                         " Newton iterations");
}

Calibrator fit_isotonic(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw ValidationError("scores/labels length mismatch");
  if (scores.empty()) throw ValidationError("isotonic fit needs at least one sample");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  struct Block {
    double sum;
    double weight;
    double max_score;
    double value() const { return sum / weight; }
  };
  std::vector<Block> stack;
  std::size_t r = 0;
  while (r < order.size()) {
    Block blk{0.0, 0.0, scores[order[r]]};
    std::size_t e = r;
    while (e < order.size() && scores[order[e]] == scores[order[r]]) {
      blk.sum += labels[order[e]];
      blk.weight += 1.0;
      ++e;
    }
    stack.push_back(blk);
    while (stack.size() > 1 && stack[stack.size() - 2].value() > stack.back().value()) {
      Block top = stack.back();
      stack.pop_back();
      stack.back().sum += top.sum;
      stack.back().weight += top.weight;
      stack.back().max_score = top.max_score;
    }
    r = e;
  }
  std::vector<double> knots, values;
  for (const auto& blk : stack) {
    knots.push_back(blk.max_score);
    values.push_back(std::clamp(blk.value(), 0.0, 1.0));
  }
  return Calibrator::isotonic(std::move(knots), std::move(values));
}

Calibrator fit_calibrator(CalibratorKind kind, std::span<const double> scores,
                          std::span<const double> labels, double eps) {
  switch (kind) {
    case CalibratorKind::kTemperature:
      return fit_temperature(scores, labels, eps);
    case CalibratorKind::kPlatt:
      return fit_platt(scores, labels, eps);
    case CalibratorKind::kIsotonic:
      return fit_isotonic(scores, labels);
  }
  throw ValidationError("unknown calibrator kind");
}

}  // namespace promptrel
