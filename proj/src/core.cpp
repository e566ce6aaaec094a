#include "promptrel/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace promptrel {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(Label y) { return y == Label::kUnsafe ? "U" : "S"; }

Label parse_label(std::string_view s) {
  if (s == "U") return Label::kUnsafe;
  if (s == "S") return Label::kSafe;
  throw ValidationError("invalid label '" + std::string(s) + "' (expected U or S)");
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kTest:
      return "test";
    case Split::kExternal:
      return "external";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  if (s == "external") return Split::kExternal;
  throw ValidationError("invalid split '" + std::string(s) + "'");
}

std::string_view to_string(Family f) {
  switch (f) {
    case Family::kA:
      return "A";
    case Family::kB:
      return "B";
    case Family::kC:
      return "C";
  }
  return "?";
}

Family parse_family(std::string_view s) {
  if (s == "A") return Family::kA;
  if (s == "B") return Family::kB;
  if (s == "C") return Family::kC;
  throw ValidationError("unknown prompt family '" + std::string(s) + "'");
}

double subset_normalize(const RawLogitRecord& rec) {
  if (!std::isfinite(rec.logit_u) || !std::isfinite(rec.logit_s)) {
    throw ValidationError("non-finite logit");
  }
  const double m = std::max(rec.logit_u, rec.logit_s);
  const double eu = std::exp(rec.logit_u - m);
  const double es = std::exp(rec.logit_s - m);
  return eu / (eu + es);
}

void ProtocolConfig::validate() const {
  if (!(epsilon > 0.0 && epsilon < 0.5)) throw ValidationError("epsilon must lie in (0, 0.5)");
  if (ece_bins_default < 2) throw ValidationError("ece bins must be >= 2");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("threshold must lie in (0, 1)");
  if (!(trim_fraction >= 0.0 && trim_fraction < 0.5)) {
    throw ValidationError("trim_fraction must lie in [0, 0.5)");
  }
  for (double a : shrink_alphas) {
    if (!(a >= 0.0 && a <= 1.0)) throw ValidationError("shrink alpha must lie in [0, 1]");
  }
  if (coverage_grid.empty()) throw ValidationError("coverage grid is empty");
  for (std::size_t i = 0; i < coverage_grid.size(); ++i) {
    const double c = coverage_grid[i];
    if (!(c > 0.0 && c <= 1.0)) throw ValidationError("coverage grid values must lie in (0, 1]");
    if (i > 0 && !(c < coverage_grid[i - 1])) {
      throw ValidationError("coverage grid must be strictly descending");
    }
  }
  if (coverage_grid.front() != 1.0) throw ValidationError("coverage grid must contain 1.0");
  if (bootstrap_b < 1) throw ValidationError("bootstrap B must be >= 1");
  for (double t : prevalence_targets) {
    if (!(t > 0.0 && t < 1.0)) throw ValidationError("prevalence targets must lie in (0, 1)");
  }
}

ScoreMatrix::ScoreMatrix(std::vector<std::string> sample_ids, std::vector<std::string> datasets,
                         std::vector<Label> labels, std::vector<Split> splits,
                         std::vector<PromptMeta> prompts, std::vector<double> p_unsafe,
                         std::string model)
    : sample_ids_(std::move(sample_ids)),
      datasets_(std::move(datasets)),
      labels_(std::move(labels)),
      splits_(std::move(splits)),
      prompts_(std::move(prompts)),
      p_unsafe_(std::move(p_unsafe)),
      model_(std::move(model)) {
  const std::size_t n = sample_ids_.size();
  if (datasets_.size() != n || labels_.size() != n || splits_.size() != n) {
    throw ValidationError("per-sample field lengths disagree");
  }
  if (prompts_.empty()) throw ValidationError("matrix needs at least one prompt");
  if (p_unsafe_.size() != n * prompts_.size()) {
    throw ValidationError("score matrix shape does not match sample and prompt lists");
  }
  std::unordered_set<std::string> seen;
  for (const auto& id : sample_ids_) {
    if (!seen.insert(id).second) throw ValidationError("duplicate sample_id '" + id + "'");
  }
  std::unordered_set<int> ids;
  for (const auto& p : prompts_) {
    if (p.prompt_id < 1 || !ids.insert(p.prompt_id).second) {
      throw ValidationError("prompt ids must be unique positive integers");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < prompts_.size(); ++k) {
      const double p = at(i, k);
      if (!(p >= 0.0 && p <= 1.0)) {
        throw ValidationError("p_unsafe out of [0,1] for sample '" + sample_ids_[i] + "' prompt " +
                              std::to_string(prompts_[k].prompt_id));
      }
    }
  }
}

std::vector<double> ScoreMatrix::column(std::size_t k) const {
  std::vector<double> out(n());
  for (std::size_t i = 0; i < n(); ++i) out[i] = at(i, k);
  return out;
}

std::size_t ScoreMatrix::column_index(int prompt_id) const {
  for (std::size_t k = 0; k < prompts_.size(); ++k) {
    if (prompts_[k].prompt_id == prompt_id) return k;
  }
  throw ValidationError("prompt " + std::to_string(prompt_id) + " not in matrix");
}

std::vector<double> ScoreMatrix::prompt_column(int prompt_id) const {
  return column(column_index(prompt_id));
}

std::vector<double> ScoreMatrix::label_indicators() const {
  std::vector<double> y(n());
  for (std::size_t i = 0; i < n(); ++i) y[i] = indicator(labels_[i]);
  return y;
}

ScoreMatrix ScoreMatrix::select_rows(std::span<const std::size_t> rows) const {
  std::vector<std::string> ids, ds;
  std::vector<Label> ys;
  std::vector<Split> sp;
  std::vector<double> vals;
  ids.reserve(rows.size());
  vals.reserve(rows.size() * k());
  for (std::size_t r : rows) {
    ids.push_back(sample_ids_.at(r));
    ds.push_back(datasets_[r]);
    ys.push_back(labels_[r]);
    sp.push_back(splits_[r]);
    auto src = row(r);
    vals.insert(vals.end(), src.begin(), src.end());
  }
  return ScoreMatrix(std::move(ids), std::move(ds), std::move(ys), std::move(sp), prompts_,
                     std::move(vals), model_);
}

ScoreMatrix ScoreMatrix::select_columns(std::span<const std::size_t> cols) const {
  std::vector<PromptMeta> ps;
  for (std::size_t c : cols) ps.push_back(prompts_.at(c));
  std::vector<double> vals;
  vals.reserve(n() * cols.size());
  for (std::size_t i = 0; i < n(); ++i) {
    for (std::size_t c : cols) vals.push_back(at(i, c));
  }
  return ScoreMatrix(sample_ids_, datasets_, labels_, splits_, std::move(ps), std::move(vals),
                     model_);
}

namespace {

struct ParsedRecord {
  std::string sample_id;
  std::string dataset;
  std::string model;
  Label label;
  Split split;
  std::vector<PromptMeta> prompts;
  std::vector<double> scores;
};

Label label_from_json(const json& v) {
  if (v.is_string()) return parse_label(v.get<std::string>());
  if (v.is_number_integer()) {
    const auto i = v.get<long long>();
    if (i == 1) return Label::kUnsafe;
    if (i == 0) return Label::kSafe;
  }
  throw ValidationError("label must be \"U\", \"S\", 1 or 0");
}

ParsedRecord parse_record(const json& rec) {
  if (!rec.is_object()) throw ValidationError("record is not a JSON object");
  ParsedRecord out;
  if (!rec.contains("sample_id") || !rec["sample_id"].is_string()) {
    throw ValidationError("missing string field 'sample_id'");
  }
  out.sample_id = rec["sample_id"].get<std::string>();
  if (!rec.contains("label") || rec["label"].is_null()) {
    throw ValidationError("sample '" + out.sample_id + "': missing label");
  }
  out.label = label_from_json(rec["label"]);
  out.dataset = rec.value("dataset", std::string{});
  out.model = rec.value("model", std::string{});
  if (!rec.contains("split") || !rec["split"].is_string()) {
    throw ValidationError("sample '" + out.sample_id + "': missing split");
  }
  out.split = parse_split(rec["split"].get<std::string>());
  if (!rec.contains("scores") || !rec["scores"].is_array() || rec["scores"].empty()) {
    throw ValidationError("sample '" + out.sample_id + "': missing or empty 'scores'");
  }
  std::vector<std::pair<PromptMeta, double>> cells;
  for (const auto& s : rec["scores"]) {
    PromptMeta meta;
    if (!s.contains("prompt_id") || !s["prompt_id"].is_number_integer()) {
      throw ValidationError("sample '" + out.sample_id + "': score without integer prompt_id");
    }
    meta.prompt_id = s["prompt_id"].get<int>();
    const std::string where =
        "sample '" + out.sample_id + "' prompt " + std::to_string(meta.prompt_id);
    if (!s.contains("family") || !s["family"].is_string()) {
      throw ValidationError(where + ": missing family");
    }
    meta.family = parse_family(s["family"].get<std::string>());
    double p;
    if (s.contains("logit_u") || s.contains("logit_s")) {
      if (!s.contains("logit_u") || !s.contains("logit_s") || !s["logit_u"].is_number() ||
          !s["logit_s"].is_number()) {
        throw ValidationError(where + ": logit_u and logit_s must both be numbers");
      }
      try {
        p = subset_normalize({s["logit_u"].get<double>(), s["logit_s"].get<double>()});
      } catch (const ValidationError& e) {
        throw ValidationError(where + ": " + e.what());
      }
    } else if (s.contains("p_unsafe") && s["p_unsafe"].is_number()) {
      p = s["p_unsafe"].get<double>();
    } else {
      throw ValidationError(where + ": needs p_unsafe or logit_u/logit_s");
    }
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ValidationError(where + ": p_unsafe " + std::to_string(p) + " outside [0,1]");
    }
    cells.emplace_back(meta, p);
  }
  std::stable_sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) {
    return a.first.prompt_id < b.first.prompt_id;
  });
  for (std::size_t j = 0; j < cells.size(); ++j) {
    if (cells[j].first.prompt_id < 1 ||
        (j > 0 && cells[j].first.prompt_id == cells[j - 1].first.prompt_id)) {
      throw ValidationError("sample '" + out.sample_id +
                            "': prompt ids must be unique positive integers");
    }
    out.prompts.push_back(cells[j].first);
    out.scores.push_back(cells[j].second);
  }
  return out;
}

std::string prompt_set_string(const std::vector<PromptMeta>& ps) {
  std::string s = "{";
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(ps[i].prompt_id) + std::string(to_string(ps[i].family));
  }
  return s + "}";
}

}  // namespace

ScoreMatrix parse_scores_jsonl(std::istream& in) {
  std::vector<std::string> ids, datasets;
  std::vector<Label> labels;
  std::vector<Split> splits;
  std::vector<PromptMeta> prompts;
  std::vector<double> values;
  std::string model;
  std::unordered_set<std::string> seen;
  bool first = true;

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    ParsedRecord rec;
    try {
      rec = parse_record(json::parse(line));
    } catch (const json::exception& e) {
      throw ParseError(lineno, std::string("malformed JSON: ") + e.what());
    } catch (const ValidationError& e) {
      throw ParseError(lineno, e.what());
    }
    if (!seen.insert(rec.sample_id).second) {
      throw ParseError(lineno, "duplicate sample_id '" + rec.sample_id + "'");
    }
    if (first) {
      prompts = rec.prompts;
      model = rec.model;
      first = false;
    } else {
      if (rec.prompts != prompts) {
        throw ParseError(lineno, "inconsistent prompt set for sample '" + rec.sample_id +
                                     "': " + prompt_set_string(rec.prompts) + " vs " +
                                     prompt_set_string(prompts));
      }
      if (rec.model != model) {
        throw ParseError(lineno,
                         "inconsistent model '" + rec.model + "' (expected '" + model + "')");
      }
    }
    ids.push_back(std::move(rec.sample_id));
    datasets.push_back(std::move(rec.dataset));
    labels.push_back(rec.label);
    splits.push_back(rec.split);
    values.insert(values.end(), rec.scores.begin(), rec.scores.end());
  }
  if (ids.empty()) throw ValidationError("no records in input");
  return ScoreMatrix(std::move(ids), std::move(datasets), std::move(labels), std::move(splits),
                     std::move(prompts), std::move(values), std::move(model));
}

ScoreMatrix parse_scores_jsonl(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_scores_jsonl(in);
}

ScoreMatrix load_scores_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  try {
    return parse_scores_jsonl(in);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

void write_scores_jsonl(const ScoreMatrix& m, std::ostream& out) {
  for (std::size_t i = 0; i < m.n(); ++i) {
    ordered_json rec;
    rec["sample_id"] = m.sample_ids()[i];
    rec["dataset"] = m.datasets()[i];
    if (!m.model().empty()) rec["model"] = m.model();
    rec["split"] = to_string(m.splits()[i]);
    rec["label"] = to_string(m.labels()[i]);
    ordered_json scores = ordered_json::array();
    for (std::size_t k = 0; k < m.k(); ++k) {
      ordered_json cell;
      cell["prompt_id"] = m.prompts()[k].prompt_id;
      cell["family"] = to_string(m.prompts()[k].family);
      cell["p_unsafe"] = m.at(i, k);
      scores.push_back(std::move(cell));
    }
    rec["scores"] = std::move(scores);
    out << rec.dump() << '\n';
  }
}

std::string to_jsonl(const ScoreMatrix& m) {
  std::ostringstream out;
  write_scores_jsonl(m, out);
  return out.str();
}

ScoreMatrix restrict_family(const ScoreMatrix& m, Family family) {
  std::vector<std::size_t> cols;
  for (std::size_t k = 0; k < m.k(); ++k) {
    if (m.prompts()[k].family == family) cols.push_back(k);
  }
  if (cols.empty()) {
    throw ValidationError("family " + std::string(to_string(family)) + " not present in matrix");
  }
  return m.select_columns(cols);
}

namespace {

template <class Pred>
ScoreMatrix filter_rows(const ScoreMatrix& m, Pred keep, const std::string& what) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < m.n(); ++i) {
    if (keep(i)) rows.push_back(i);
  }
  if (rows.empty()) throw EmptySplitError("no rows for " + what);
  return m.select_rows(rows);
}

}  // namespace

ScoreMatrix split_view(const ScoreMatrix& m, Split split) {
  return filter_rows(
      m, [&](std::size_t i) { return m.splits()[i] == split; },
      "split '" + std::string(to_string(split)) + "'");
}

ScoreMatrix dataset_view(const ScoreMatrix& m, std::string_view dataset) {
  return filter_rows(
      m, [&](std::size_t i) { return m.datasets()[i] == dataset; },
      "dataset '" + std::string(dataset) + "'");
}

ScoreMatrix evaluation_view(const ScoreMatrix& m) {
  return filter_rows(
      m, [&](std::size_t i) { return m.splits()[i] != Split::kTrain; }, "non-train splits");
}

ScoreMatrix concat_rows(std::span<const ScoreMatrix> parts) {
  if (parts.empty()) throw ValidationError("nothing to concatenate");
  std::vector<std::string> ids, ds;
  std::vector<Label> ys;
  std::vector<Split> sp;
  std::vector<double> vals;
  for (const auto& p : parts) {
    if (p.prompts() != parts.front().prompts()) {
      throw ValidationError("cannot concatenate matrices with different prompt sets");
    }
    if (p.model() != parts.front().model()) {
      throw ValidationError("cannot concatenate matrices from different models");
    }
    ids.insert(ids.end(), p.sample_ids().begin(), p.sample_ids().end());
    ds.insert(ds.end(), p.datasets().begin(), p.datasets().end());
    ys.insert(ys.end(), p.labels().begin(), p.labels().end());
    sp.insert(sp.end(), p.splits().begin(), p.splits().end());
    vals.insert(vals.end(), p.values().begin(), p.values().end());
  }
  return ScoreMatrix(std::move(ids), std::move(ds), std::move(ys), std::move(sp),
                     parts.front().prompts(), std::move(vals), parts.front().model());
}

}  // namespace promptrel
