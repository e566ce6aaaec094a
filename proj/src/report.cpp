#include "promptrel/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "promptrel/aggregate.hpp"
#include "promptrel/calibrate.hpp"
#include "promptrel/protocols.hpp"
#include "promptrel/rng.hpp"

namespace promptrel {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Tables

std::string format_number(double v) {
  if (!std::isfinite(v)) return kGap;
  if (v == 0.0) return "0";  // folds -0
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_number(std::optional<double> v) { return v ? format_number(*v) : kGap; }

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_csv_row(const std::vector<std::string>& cells, std::ostream& out) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out << ',';
    out << csv_escape(cells[i]);
  }
  out << '\n';
}

}  // namespace

void write_csv(const Table& t, std::ostream& out) {
  write_csv_row(t.columns, out);
  for (const auto& r : t.rows) write_csv_row(r, out);
}

std::string to_csv(const Table& t) {
  std::ostringstream out;
  write_csv(t, out);
  return out.str();
}

Table parse_csv(std::string_view text, std::string name) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> row;
  std::string cell;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(cell));
      cell.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(cell));
      cell.clear();
      records.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      cell += c;
      any = true;
    }
  }
  if (quoted) throw ValidationError("unterminated quoted CSV field");
  if (any || !row.empty()) {
    row.push_back(std::move(cell));
    records.push_back(std::move(row));
  }
  if (records.empty()) throw ValidationError("CSV has no header");
  Table t;
  t.name = std::move(name);
  t.columns = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != t.columns.size()) {
      throw ValidationError("CSV row " + std::to_string(r) + " has wrong number of fields");
    }
    t.rows.push_back(std::move(records[r]));
  }
  return t;
}

std::string to_markdown(const Table& t) {
  std::ostringstream out;
  if (!t.name.empty()) out << "### " << t.name << "\n\n";
  out << '|';
  for (const auto& c : t.columns) out << ' ' << c << " |";
  out << "\n|";
  for (std::size_t i = 0; i < t.columns.size(); ++i) out << " --- |";
  out << '\n';
  for (const auto& r : t.rows) {
    out << '|';
    for (const auto& c : r) out << ' ' << c << " |";
    out << '\n';
  }
  return out.str();
}

ordered_json to_json(const Table& t) {
  ordered_json j;
  j["name"] = t.name;
  j["columns"] = t.columns;
  j["rows"] = t.rows;
  return j;
}

Table table_from_json(const json& j) {
  Table t;
  t.name = j.at("name").get<std::string>();
  t.columns = j.at("columns").get<std::vector<std::string>>();
  t.rows = j.at("rows").get<std::vector<std::vector<std::string>>>();
  return t;
}

// ---------------------------------------------------------------------------
// Config

namespace {

struct StageName {
  Stage stage;
  const char* name;
};

constexpr StageName kStageNames[] = {
    {Stage::kSelect, "select"},
    {Stage::kMetrics, "metrics"},
    {Stage::kSweep, "sweep"},
    {Stage::kCalibrate, "calibrate"},
    {Stage::kFragility, "fragility"},
    {Stage::kFamilies, "families"},
    {Stage::kTopK, "topk"},
    {Stage::kSelective, "selective"},
    {Stage::kBootstrap, "bootstrap"},
    {Stage::kPrevalence, "prevalence"},
    {Stage::kReliability, "reliability"},
};

}  // namespace

std::string_view to_string(Stage s) {
  for (const auto& sn : kStageNames) {
    if (sn.stage == s) return sn.name;
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  for (const auto& sn : kStageNames) {
    if (s == sn.name) return sn.stage;
  }
  throw ValidationError("unknown stage '" + std::string(s) + "'");
}

std::vector<Stage> all_stages() {
  std::vector<Stage> v;
  for (const auto& sn : kStageNames) v.push_back(sn.stage);
  return v;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig cfg;
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  try {
    auto& p = cfg.protocol;
    p.epsilon = j.value("epsilon", p.epsilon);
    p.ece_bins_default = j.value("ece_bins_default", p.ece_bins_default);
    p.threshold = j.value("threshold", p.threshold);
    p.trim_fraction = j.value("trim_fraction", p.trim_fraction);
    p.shrink_alphas = j.value("shrink_alphas", p.shrink_alphas);
    p.coverage_grid = j.value("coverage_grid", p.coverage_grid);
    p.bootstrap_b = j.value("bootstrap_b", p.bootstrap_b);
    p.bootstrap_seed = j.value("bootstrap_seed", p.bootstrap_seed);
    p.prevalence_targets = j.value("prevalence_targets", p.prevalence_targets);
    cfg.random_baseline_seed = j.value("random_baseline_seed", cfg.random_baseline_seed);
    cfg.threads = j.value("threads", cfg.threads);
    cfg.svg = j.value("svg", cfg.svg);
    if (j.contains("stages")) {
      for (const auto& s : j.at("stages")) cfg.stages.insert(parse_stage(s.get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad config: ") + e.what());
  }
  cfg.protocol.validate();
  if (cfg.threads < 1) throw ValidationError("threads must be >= 1");
  return cfg;
}

ordered_json RunConfig::to_json() const {
  ordered_json j;
  j["epsilon"] = protocol.epsilon;
  j["ece_bins_default"] = protocol.ece_bins_default;
  j["threshold"] = protocol.threshold;
  j["trim_fraction"] = protocol.trim_fraction;
  j["shrink_alphas"] = protocol.shrink_alphas;
  j["coverage_grid"] = protocol.coverage_grid;
  j["bootstrap_b"] = protocol.bootstrap_b;
  j["bootstrap_seed"] = protocol.bootstrap_seed;
  j["prevalence_targets"] = protocol.prevalence_targets;
  j["random_baseline_seed"] = random_baseline_seed;
  j["svg"] = svg;
  std::vector<std::string> st;
  for (Stage s : all_stages()) {
    if (enabled(s)) st.emplace_back(to_string(s));
  }
  j["stages"] = st;
  // threads is excluded: output does not depend on it.
  return j;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path + "'");
  try {
    return RunConfig::from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ValidationError("config '" + path + "': " + e.what());
  }
}

std::uint64_t fnv1a64(std::string_view data) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Bundle

const Table* ReportBundle::find(std::string_view name) const {
  for (const auto& t : tables) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

ordered_json ReportBundle::to_json() const {
  ordered_json j;
  j["metadata"] = metadata;
  ordered_json ts = ordered_json::array();
  for (const auto& t : tables) ts.push_back(promptrel::to_json(t));
  j["tables"] = std::move(ts);
  return j;
}

ReportBundle ReportBundle::from_json(const json& j) {
  ReportBundle b;
  try {
    b.metadata = ordered_json::parse(j.at("metadata").dump());
    for (const auto& t : j.at("tables")) b.tables.push_back(table_from_json(t));
    if (b.metadata.contains("stage_errors")) {
      for (const auto& e : b.metadata["stage_errors"]) {
        b.errors.push_back({e.at("stage").get<std::string>(), e.at("scope").get<std::string>(),
                            e.at("message").get<std::string>(), e.value("validation", false)});
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad report bundle: ") + e.what());
  }
  return b;
}

Table reliability_table(const std::string& label, std::span<const double> scores,
                        std::span<const double> labels, const EceSpec& spec) {
  Table t{"reliability", {"method", "bin", "conf", "freq", "mass", "count"}, {}};
  for (const auto& b : reliability_bins(scores, labels, spec)) {
    t.rows.push_back({label, std::to_string(b.bin), format_number(b.conf), format_number(b.freq),
                      format_number(b.mass), format_number(b.count)});
  }
  return t;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

struct ModelGroup {
  std::string model;
  std::vector<ScoreMatrix> parts;
};

struct MethodScores {
  std::string name;
  std::vector<double> scores;
};

struct PairResult {
  std::string model, dataset;
  std::map<std::string, EvalReport> reports;  // method -> metrics
  std::vector<double> sweep_nll;              // per rule
  bool sweep_ok = false;
  std::map<std::string, std::map<std::string, double>> selective;  // target -> signal -> risk
};

class Pipeline {
 public:
  Pipeline(std::span<const NamedInput> inputs, const RunConfig& cfg) : inputs_(inputs), cfg_(cfg) {
    init_tables();
  }

  ReportBundle run() {
    for (auto& group : group_inputs()) run_model(group);
    finish_summaries();
    ReportBundle b;
    b.metadata = metadata();
    for (auto& t : tables_) {
      if (!t.rows.empty() || stage_of_.at(t.name) == std::nullopt ||
          cfg_.enabled(*stage_of_.at(t.name))) {
        b.tables.push_back(std::move(t));
      }
    }
    b.errors = errors_;
    return b;
  }

 private:
  Table& table(const std::string& name) {
    for (auto& t : tables_) {
      if (t.name == name) return t;
    }
    throw std::logic_error("no table " + name);
  }

  void add_table(std::optional<Stage> stage, std::string name, std::vector<std::string> cols) {
    stage_of_[name] = stage;
    tables_.push_back({std::move(name), std::move(cols), {}});
  }

  void init_tables() {
    const std::vector<std::string> metric_cols{"nll",     "ece_w10", "ece_w15", "ece_w20",
                                               "ece_m15", "auroc",   "auprc",   "err05"};
    add_table(Stage::kSelect, "selection",
              {"model", "selected_prompt", "trail", "random_prompt", "random_seed", "prng"});
    add_table(Stage::kCalibrate, "calibrators", {"model", "source", "kind", "params", "inverted"});
    std::vector<std::string> main_cols{"model", "dataset", "method", "n"};
    main_cols.insert(main_cols.end(), metric_cols.begin(), metric_cols.end());
    add_table(Stage::kMetrics, "main", main_cols);
    add_table(Stage::kMetrics, "ranking",
              {"model", "dataset", "metric", "sel", "rand", "min_k", "med_k", "mean_k", "max_k",
               "mean_ens"});
    add_table(Stage::kMetrics, "ece_robustness",
              {"variant", "mean_improves", "pairs", "avg_gain_selected_minus_mean"});
    add_table(Stage::kSweep, "sweep_nll", {"model", "dataset", "rule", "nll"});
    add_table(Stage::kSweep, "sweep_wins", {"rule", "nll_wins", "avg_rank", "pairs"});
    add_table(Stage::kCalibrate, "calibration_h2h",
              {"panel", "method", "nll_wins", "nll_avg_gain", "ece_wins", "ece_avg_gain", "pairs"});
    add_table(Stage::kFragility, "fragility",
              {"model", "dataset", "n", "mean_sigma", "mistake_d1", "mistake_d10", "mistake_gap",
               "disagree_d1", "disagree_d10", "disagree_gap"});
    add_table(Stage::kFamilies, "families",
              {"model", "dataset", "family", "k", "selected_prompt", "delta_nll", "delta_ece_w15",
               "mistake_gap", "disagree_gap"});
    add_table(Stage::kTopK, "topk", {"model", "dataset", "k", "prompt_added", "nll", "ece_w15"});
    add_table(Stage::kSelective, "coverage",
              {"model", "dataset", "signal", "coverage", "retained", "error", "nll", "ece_w15"});
    add_table(Stage::kSelective, "aurc",
              {"model", "dataset", "signal", "err_50_100", "err_90_100", "nll_50_100", "nll_90_100",
               "ece_50_100", "ece_90_100"});
    add_table(Stage::kSelective, "selective_wins",
              {"target", "std_pu", "entropy_mean", "margin_single", "pairs"});
    add_table(Stage::kBootstrap, "bootstrap",
              {"model", "dataset", "metric", "delta", "ci_low", "ci_high", "p_two_sided", "B",
               "seed", "ci_excludes_zero"});
    add_table(
        Stage::kPrevalence, "prevalence",
        {"model", "dataset", "target", "metric", "delta", "ci_low", "ci_high", "p_two_sided"});
    add_table(Stage::kReliability, "reliability",
              {"model", "dataset", "method", "bin", "conf", "freq", "mass", "count"});
    add_table(std::nullopt, "gaps", {"stage", "scope", "message"});
  }

  std::vector<ModelGroup> group_inputs() {
    std::vector<ModelGroup> groups;
    for (const auto& in : inputs_) {
      std::string model = in.matrix.model();
      if (model.empty()) model = std::filesystem::path(in.source).stem().string();
      auto it = std::find_if(groups.begin(), groups.end(),
                             [&](const ModelGroup& g) { return g.model == model; });
      if (it == groups.end()) {
        groups.push_back({model, {}});
        it = groups.end() - 1;
      }
      it->parts.push_back(in.matrix);
    }
    return groups;
  }

  void fail(Stage stage, const std::string& scope, const std::exception& e) {
    const bool validation = dynamic_cast<const ValidationError*>(&e) != nullptr;
    errors_.push_back({std::string(to_string(stage)), scope, e.what(), validation});
    table("gaps").rows.push_back({std::string(to_string(stage)), scope, e.what()});
  }

  template <class Fn>
  bool guard(Stage stage, const std::string& scope, Fn&& fn) {
    try {
      fn();
      return true;
    } catch (const Error& e) {
      fail(stage, scope, e);
    }
    return false;
  }

  bool needs_selection() const {
    for (Stage s :
         {Stage::kSelect, Stage::kMetrics, Stage::kCalibrate, Stage::kFamilies, Stage::kTopK,
          Stage::kSelective, Stage::kBootstrap, Stage::kPrevalence, Stage::kReliability}) {
      if (cfg_.enabled(s)) return true;
    }
    return false;
  }

  void run_model(const ModelGroup& group) {
    const auto& proto = cfg_.protocol;
    ScoreMatrix all;
    if (!guard(Stage::kSelect, group.model, [&] { all = concat_rows(group.parts); })) return;

    std::optional<ScoreMatrix> train;
    std::optional<SelectionResult> selection;
    int random_id = 0;
    std::vector<int> ranking;
    if (needs_selection()) {
      guard(Stage::kSelect, group.model, [&] {
        try {
          train = split_view(all, Split::kTrain);
        } catch (const EmptySplitError&) {
          throw EmptySplitError(
              "prompt selection and calibration require labeled train rows (split=train)");
        }
        selection = select_prompt(*train, proto.threshold, proto.epsilon);
        random_id = locked_random_prompt(cfg_.random_baseline_seed, all.k());
        ranking = rank_prompts_by_nll(*train, proto.epsilon);
        std::string trail;
        for (const auto& st : selection->trail) {
          if (!trail.empty()) trail += ";";
          trail += st.criterion + ":";
          for (std::size_t i = 0; i < st.survivors.size(); ++i) {
            trail += (i ? " " : "") + std::to_string(st.survivors[i]);
          }
        }
        table("selection")
            .rows.push_back({group.model, std::to_string(selection->selected_prompt_id), trail,
                             std::to_string(random_id), std::to_string(cfg_.random_baseline_seed),
                             Pcg32::kName});
      });
    }

    // Calibrators fit on train only.
    std::vector<std::pair<std::string, Calibrator>> calibrators;
    if (cfg_.enabled(Stage::kCalibrate) && selection) {
      guard(Stage::kCalibrate, group.model, [&] {
        const auto y = train->label_indicators();
        const auto sel = train->prompt_column(selection->selected_prompt_id);
        const auto mean = mean_ensemble(*train);
        const std::pair<const char*, CalibratorKind> kinds[] = {
            {"ts", CalibratorKind::kTemperature},
            {"platt", CalibratorKind::kPlatt},
            {"iso", CalibratorKind::kIsotonic}};
        for (const auto& [src_name, src] :
             {std::pair{"selected", &sel}, std::pair{"mean", &mean}}) {
          for (const auto& [prefix, kind] : kinds) {
            auto cal = fit_calibrator(kind, *src, y, proto.epsilon);
            table("calibrators")
                .rows.push_back({group.model, src_name, std::string(to_string(kind)), cal.to_json(),
                                 cal.inverted() ? "true" : "false"});
            calibrators.emplace_back(std::string(prefix) + "_" + src_name, std::move(cal));
          }
        }
      });
    }

    ScoreMatrix eval;
    if (!guard(Stage::kMetrics, group.model, [&] { eval = evaluation_view(all); })) return;
    std::vector<std::string> datasets;
    for (const auto& d : eval.datasets()) {
      if (std::find(datasets.begin(), datasets.end(), d) == datasets.end()) datasets.push_back(d);
    }
    for (const auto& ds : datasets) {
      run_pair(group.model, ds, dataset_view(eval, ds), train, selection, random_id, ranking,
               calibrators);
    }
  }

  void run_pair(const std::string& model, const std::string& dataset, const ScoreMatrix& m,
                const std::optional<ScoreMatrix>& train,
                const std::optional<SelectionResult>& selection, int random_id,
                const std::vector<int>& ranking,
                const std::vector<std::pair<std::string, Calibrator>>& calibrators) {
    const auto& proto = cfg_.protocol;
    const std::string scope = model + "/" + dataset;
    const auto y = m.label_indicators();
    PairResult pr{model, dataset, {}, {}, false, {}};
    const auto mean = mean_ensemble(m);
    std::vector<double> selected, random;
    if (selection) {
      selected = m.prompt_column(selection->selected_prompt_id);
      random = m.prompt_column(random_id);
    }

    if (cfg_.enabled(Stage::kMetrics) || cfg_.enabled(Stage::kCalibrate)) {
      guard(Stage::kMetrics, scope, [&] {
        std::vector<MethodScores> methods;
        if (selection) {
          methods.push_back({"selected", selected});
          methods.push_back({"random", random});
        }
        methods.push_back({"mean_ensemble", mean});
        for (const auto& [name, cal] : calibrators) {
          const bool on_mean = name.ends_with("_mean");
          methods.push_back({name, cal.apply(on_mean ? mean : selected)});
        }
        for (const auto& ms : methods) {
          const auto r = evaluate(ms.scores, y, {}, proto.threshold, proto.epsilon);
          pr.reports[ms.name] = r;
          if (!cfg_.enabled(Stage::kMetrics)) continue;
          std::vector<std::string> row{model, dataset, ms.name, std::to_string(r.n),
                                       format_number(r.nll)};
          for (const auto& spec : ece_variants()) row.push_back(format_number(r.ece.at(spec)));
          row.push_back(format_number(r.auroc));
          row.push_back(format_number(r.auprc));
          row.push_back(format_number(r.error_at_threshold));
          table("main").rows.push_back(std::move(row));
        }
        if (cfg_.enabled(Stage::kMetrics) && selection) ranking_rows(model, dataset, m, pr);
      });
    }

    if (cfg_.enabled(Stage::kSweep)) {
      guard(Stage::kSweep, scope, [&] {
        const auto rules = standard_sweep_rules(proto.trim_fraction, proto.shrink_alphas);
        std::vector<double> row;
        for (const auto& rule : rules)
          row.push_back(nll(aggregate(m, rule, nullptr, proto.epsilon), y, {}, proto.epsilon));
        for (std::size_t r = 0; r < rules.size(); ++r) {
          table("sweep_nll")
              .rows.push_back({model, dataset, rules[r].name(), format_number(row[r])});
        }
        pr.sweep_nll = std::move(row);
        pr.sweep_ok = true;
      });
    }

    if (cfg_.enabled(Stage::kFragility)) {
      guard(Stage::kFragility, scope, [&] {
        const auto prof = fragility_profile(m, proto.threshold);
        if (!prof.has_deciles) throw ValidationError("decile analysis needs at least 10 samples");
        double mean_sigma = 0.0;
        for (double s : prof.sigma) mean_sigma += s;
        mean_sigma /= static_cast<double>(prof.sigma.size());
        table("fragility")
            .rows.push_back({model, dataset, std::to_string(m.n()), format_number(mean_sigma),
                             format_number(prof.mistake_deciles.d1),
                             format_number(prof.mistake_deciles.d10),
                             format_number(prof.mistake_deciles.gap),
                             format_number(prof.disagreement_deciles.d1),
                             format_number(prof.disagreement_deciles.d10),
                             format_number(prof.disagreement_deciles.gap)});
      });
    }

    if (cfg_.enabled(Stage::kFamilies) && train) {
      for (Family fam : {Family::kA, Family::kB, Family::kC}) {
        const bool present = std::any_of(m.prompts().begin(), m.prompts().end(),
                                         [&](const PromptMeta& p) { return p.family == fam; });
        if (!present) continue;
        guard(Stage::kFamilies, scope + "/" + std::string(to_string(fam)), [&] {
          const auto sub_train = restrict_family(*train, fam);
          const auto sub = restrict_family(m, fam);
          const auto sel = select_prompt(sub_train, proto.threshold, proto.epsilon);
          const auto s = sub.prompt_column(sel.selected_prompt_id);
          const auto mu = mean_ensemble(sub);
          const EceSpec w15{15, BinScheme::kEqualWidth};
          const auto prof = fragility_profile(sub, proto.threshold);
          table("families")
              .rows.push_back(
                  {model, dataset, std::string(to_string(fam)), std::to_string(sub.k()),
                   std::to_string(sel.selected_prompt_id),
                   format_number(nll(s, y, {}, proto.epsilon) - nll(mu, y, {}, proto.epsilon)),
                   format_number(ece(s, y, w15) - ece(mu, y, w15)),
                   prof.has_deciles ? format_number(prof.mistake_deciles.gap) : kGap,
                   prof.has_deciles ? format_number(prof.disagreement_deciles.gap) : kGap});
        });
      }
    }

    if (cfg_.enabled(Stage::kTopK) && !ranking.empty()) {
      guard(Stage::kTopK, scope, [&] {
        const EceSpec w15{15, BinScheme::kEqualWidth};
        for (std::size_t k = 1; k <= m.k(); ++k) {
          const auto s = top_k_mean(m, ranking, k);
          table("topk").rows.push_back(
              {model, dataset, std::to_string(k), std::to_string(ranking[k - 1]),
               format_number(nll(s, y, {}, proto.epsilon)), format_number(ece(s, y, w15))});
        }
      });
    }

    if (cfg_.enabled(Stage::kSelective) && selection) {
      guard(Stage::kSelective, scope,
            [&] { selective(model, dataset, m, mean, y, *selection, pr); });
    }

    if (cfg_.enabled(Stage::kBootstrap) && selection) {
      guard(Stage::kBootstrap, scope, [&] {
        const BootstrapOptions opts{proto.bootstrap_b, proto.bootstrap_seed, cfg_.threads};
        for (DeltaMetric metric : {DeltaMetric::kNll, DeltaMetric::kEceW15}) {
          const auto r = bootstrap_delta(mean, selected, y, metric, opts, {}, proto.epsilon);
          const char* excl = r.ci_low > 0.0 ? "above" : (r.ci_high < 0.0 ? "below" : "no");
          table("bootstrap")
              .rows.push_back({model, dataset, std::string(to_string(metric)),
                               format_number(r.point_delta), format_number(r.ci_low),
                               format_number(r.ci_high), format_number(r.p_two_sided),
                               std::to_string(r.b), std::to_string(r.seed), excl});
        }
      });
    }

    if (cfg_.enabled(Stage::kPrevalence) && selection) {
      guard(Stage::kPrevalence, scope, [&] {
        const BootstrapOptions opts{proto.bootstrap_b, proto.bootstrap_seed, cfg_.threads};
        for (const auto& row :
             prevalence_stress(mean, selected, y, proto.prevalence_targets, opts, proto.epsilon)) {
          table("prevalence")
              .rows.push_back(
                  {model, dataset, row.target_pi ? format_number(*row.target_pi) : "native",
                   std::string(to_string(row.metric)), format_number(row.result.point_delta),
                   format_number(row.result.ci_low), format_number(row.result.ci_high),
                   format_number(row.result.p_two_sided)});
        }
      });
    }

    if (cfg_.enabled(Stage::kReliability)) {
      guard(Stage::kReliability, scope, [&] {
        const EceSpec spec{proto.ece_bins_default, BinScheme::kEqualWidth};
        std::vector<MethodScores> methods;
        if (selection) methods.push_back({"selected", selected});
        methods.push_back({"mean_ensemble", mean});
        for (const auto& ms : methods) {
          for (auto& r : reliability_table(ms.name, ms.scores, y, spec).rows) {
            r.insert(r.begin(), {model, dataset});
            table("reliability").rows.push_back(std::move(r));
          }
        }
      });
    }

    pairs_.push_back(std::move(pr));
  }

  void ranking_rows(const std::string& model, const std::string& dataset, const ScoreMatrix& m,
                    const PairResult& pr) {
    const auto y = m.label_indicators();
    for (const char* metric : {"auroc", "auprc"}) {
      const bool is_roc = std::string_view(metric) == "auroc";
      auto get = [&](const EvalReport& r) { return is_roc ? r.auroc : r.auprc; };
      std::vector<double> singles;
      for (std::size_t k = 0; k < m.k(); ++k) {
        const auto col = m.column(k);
        try {
          singles.push_back(is_roc ? auroc(col, y) : auprc(col, y));
        } catch (const UndefinedMetricError&) {
        }
      }
      std::vector<std::string> row{model, dataset, metric,
                                   format_number(get(pr.reports.at("selected"))),
                                   format_number(get(pr.reports.at("random")))};
      if (singles.empty()) {
        row.insert(row.end(), {kGap, kGap, kGap, kGap});
      } else {
        double s = 0.0;
        for (double v : singles) s += v;
        row.push_back(format_number(*std::min_element(singles.begin(), singles.end())));
        row.push_back(format_number(median_of(singles)));
        row.push_back(format_number(s / static_cast<double>(singles.size())));
        row.push_back(format_number(*std::max_element(singles.begin(), singles.end())));
      }
      row.push_back(format_number(get(pr.reports.at("mean_ensemble"))));
      table("ranking").rows.push_back(std::move(row));
    }
  }

  void selective(const std::string& model, const std::string& dataset, const ScoreMatrix& m,
                 const std::vector<double>& mean, const std::vector<double>& y,
                 const SelectionResult& selection, PairResult& pr) {
    const auto& proto = cfg_.protocol;
    const auto& grid = proto.coverage_grid;
    const bool has_half =
        std::any_of(grid.begin(), grid.end(), [](double c) { return std::abs(c - 0.5) <= 1e-12; });
    const bool has_90 =
        std::any_of(grid.begin(), grid.end(), [](double c) { return std::abs(c - 0.9) <= 1e-12; });
    for (SignalKind kind :
         {SignalKind::kStdPU, SignalKind::kEntropyMean, SignalKind::kMarginSingle}) {
      const auto sig = uncertainty(m, kind, selection.selected_prompt_id);
      const auto curve = risk_coverage(mean, y, sig.values, grid, proto.threshold, proto.epsilon);
      const std::string sname(to_string(kind));
      for (const auto& p : curve.points) {
        table("coverage")
            .rows.push_back({model, dataset, sname, format_number(p.coverage),
                             std::to_string(p.retained), format_number(p.error),
                             format_number(p.nll), format_number(p.ece)});
      }
      auto area = [&](RiskMetric rm, double lo, bool ok) -> std::optional<double> {
        if (!ok) return std::nullopt;
        return aurc(curve, rm, lo, 1.0);
      };
      const auto e50 = area(RiskMetric::kError, 0.5, has_half);
      const auto e90 = area(RiskMetric::kError, 0.9, has_90);
      const auto n50 = area(RiskMetric::kNll, 0.5, has_half);
      const auto n90 = area(RiskMetric::kNll, 0.9, has_90);
      const auto c50 = area(RiskMetric::kEce, 0.5, has_half);
      const auto c90 = area(RiskMetric::kEce, 0.9, has_90);
      table("aurc").rows.push_back({model, dataset, sname, format_number(e50), format_number(e90),
                                    format_number(n50), format_number(n90), format_number(c50),
                                    format_number(c90)});
      auto put = [&](const std::string& target, std::optional<double> v) {
        if (v) pr.selective[target][sname] = *v;
      };
      put("aurc_err_50_100", e50);
      put("aurc_err_90_100", e90);
      put("aurc_nll_90_100", n90);
      put("aurc_ece_90_100", c90);
      for (double c : {0.95, 0.90}) {
        const bool on_grid = std::any_of(grid.begin(), grid.end(),
                                         [&](double g) { return std::abs(g - c) <= 1e-12; });
        if (!on_grid) continue;
        const std::string suffix = c == 0.95 ? "95" : "90";
        put("err_at_" + suffix, risk_at(curve, RiskMetric::kError, c));
        put("nll_at_" + suffix, risk_at(curve, RiskMetric::kNll, c));
        put("ece_at_" + suffix, risk_at(curve, RiskMetric::kEce, c));
      }
    }
  }

  void finish_summaries() {
    const auto& proto = cfg_.protocol;
    if (cfg_.enabled(Stage::kSweep)) {
      std::vector<std::vector<double>> rows;
      for (const auto& p : pairs_) {
        if (p.sweep_ok) rows.push_back(p.sweep_nll);
      }
      std::vector<std::string> names;
      for (const auto& r : standard_sweep_rules(proto.trim_fraction, proto.shrink_alphas)) {
        names.push_back(r.name());
      }
      if (!rows.empty()) {
        const auto wc = win_counts(rows, names);
        for (std::size_t j = 0; j < names.size(); ++j) {
          table("sweep_wins")
              .rows.push_back({names[j], std::to_string(wc.wins[j]), format_number(wc.avg_rank[j]),
                               std::to_string(wc.pairs)});
        }
      }
    }

    if (cfg_.enabled(Stage::kMetrics)) {
      for (const auto& spec : ece_variants()) {
        int improves = 0, pairs = 0;
        double gain = 0.0;
        for (const auto& p : pairs_) {
          if (!p.reports.count("selected") || !p.reports.count("mean_ensemble")) continue;
          const double d =
              p.reports.at("selected").ece.at(spec) - p.reports.at("mean_ensemble").ece.at(spec);
          if (d > 0.0) ++improves;
          gain += d;
          ++pairs;
        }
        if (pairs == 0) continue;
        table("ece_robustness")
            .rows.push_back({spec.id(), std::to_string(improves), std::to_string(pairs),
                             format_number(gain / pairs)});
      }
    }

    if (cfg_.enabled(Stage::kCalibrate)) {
      const EceSpec w15{15, BinScheme::kEqualWidth};
      for (const auto& [panel, suffix] : {std::pair{"A", "_selected"}, std::pair{"B", "_mean"}}) {
        for (const char* kind : {"ts", "platt", "iso"}) {
          const std::string method = std::string(kind) + suffix;
          int nll_w = 0, ece_w = 0, pairs = 0;
          double nll_g = 0.0, ece_g = 0.0;
          for (const auto& p : pairs_) {
            if (!p.reports.count(method) || !p.reports.count("mean_ensemble")) continue;
            const auto& base = p.reports.at("mean_ensemble");
            const auto& r = p.reports.at(method);
            const double dn = base.nll - r.nll;
            const double de = base.ece.at(w15) - r.ece.at(w15);
            if (dn > 0.0) ++nll_w;
            if (de > 0.0) ++ece_w;
            nll_g += dn;
            ece_g += de;
            ++pairs;
          }
          if (pairs == 0) continue;
          table("calibration_h2h")
              .rows.push_back({panel, method, std::to_string(nll_w), format_number(nll_g / pairs),
                               std::to_string(ece_w), format_number(ece_g / pairs),
                               std::to_string(pairs)});
        }
      }
    }

    if (cfg_.enabled(Stage::kSelective)) {
      static const char* kTargets[] = {
          "aurc_err_50_100", "aurc_err_90_100", "aurc_nll_90_100", "aurc_ece_90_100", "err_at_95",
          "nll_at_95",       "ece_at_95",       "err_at_90",       "nll_at_90",       "ece_at_90"};
      static const char* kSignals[] = {"std_pu", "entropy_mean", "margin_single"};
      for (const char* target : kTargets) {
        std::vector<std::vector<double>> rows;
        for (const auto& p : pairs_) {
          auto it = p.selective.find(target);
          if (it == p.selective.end() || it->second.size() != 3) continue;
          std::vector<double> row;
          for (const char* s : kSignals) row.push_back(it->second.at(s));
          rows.push_back(std::move(row));
        }
        if (rows.empty()) continue;
        const auto wc = win_counts(rows, {kSignals, kSignals + 3});
        table("selective_wins")
            .rows.push_back({target, std::to_string(wc.wins[0]), std::to_string(wc.wins[1]),
                             std::to_string(wc.wins[2]), std::to_string(wc.pairs)});
      }
    }
  }

  ordered_json metadata() const {
    ordered_json md;
    md["tool"] = "promptrel";
    md["version"] = kToolVersion;
    const auto cfg_json = cfg_.to_json();
    md["config"] = cfg_json;
    md["config_hash"] = hex64(fnv1a64(cfg_json.dump()));
    ordered_json prng;
    prng["generator"] = Pcg32::kName;
    prng["random_baseline"] = "Pcg32(seed, stream 0), one bounded draw over 1..K";
    prng["bootstrap"] = "Pcg32(seed, stream = resample index), N bounded draws";
    prng["random_baseline_seed"] = cfg_.random_baseline_seed;
    prng["bootstrap_seed"] = cfg_.protocol.bootstrap_seed;
    md["prng"] = prng;
    ordered_json d;
    d["entropy_weighted_mean_entropy_base"] = 2;
    d["uncertainty_entropy_base"] = "e";
    d["std_convention"] = "population";
    d["sigma_floor"] = kSigmaFloor;
    d["logit_clip_epsilon"] = cfg_.protocol.epsilon;
    d["correction_stats"] = "transductive (fit on the evaluated matrix, label-free)";
    d["trim_rule"] = "floor(trim_fraction*K) per side";
    d["ece_edge_rule"] = "bin = min(floor(p*B), B-1)";
    d["ece_equal_mass"] = "rank partition, sizes differ by <= 1, ties by sample index";
    d["auprc"] = "step-wise average precision, tied scores grouped";
    d["threshold_rule"] = "unsafe iff score >= threshold";
    d["selection_ties"] = "exact equality; nll -> ece_w15 -> err05 -> prompt_id";
    d["temperature_fit"] = "golden-section on log T in [log 0.05, log 20], tol 1e-6";
    d["platt_fit"] = "damped Newton, ridge 1e-8, grad tol 1e-10, max 100 iterations";
    d["isotonic_fit"] = "PAVA, tied scores pooled, left-continuous step, clamped ends";
    d["retention_rounding"] = "m = floor(c*N + 0.5), ties by sample index";
    d["aurc"] = "trapezoid over evaluated grid points / (c_max - c_min)";
    d["bootstrap_percentile"] = "linear interpolation between order statistics";
    d["bootstrap_p_value"] = "min(1, 2*min(P(d<=0), P(d>=0)))";
    d["delta_sign"] = "baseline (selected) minus candidate (mean); positive = mean better";
    d["prevalence_weights"] = "fixed from the full sample, applied inside each resample";
    d["selective_base_predictor"] = "mean ensemble";
    md["decisions"] = d;
    ordered_json ins = ordered_json::array();
    for (const auto& in : inputs_) {
      ordered_json e;
      e["source"] = std::filesystem::path(in.source).filename().string();
      e["model"] = in.matrix.model();
      e["n"] = in.matrix.n();
      e["k"] = in.matrix.k();
      e["content_hash"] = hex64(fnv1a64(to_jsonl(in.matrix)));
      ins.push_back(std::move(e));
    }
    md["inputs"] = std::move(ins);
    ordered_json errs = ordered_json::array();
    for (const auto& e : errors_) {
      ordered_json je;
      je["stage"] = e.stage;
      je["scope"] = e.scope;
      je["message"] = e.message;
      je["validation"] = e.validation;
      errs.push_back(std::move(je));
    }
    md["stage_errors"] = std::move(errs);
    return md;
  }

  std::span<const NamedInput> inputs_;
  const RunConfig& cfg_;
  std::vector<Table> tables_;
  std::map<std::string, std::optional<Stage>> stage_of_;
  std::vector<PairResult> pairs_;
  std::vector<StageError> errors_;
};

}  // namespace

ReportBundle run_pipeline(std::span<const NamedInput> inputs, const RunConfig& cfg) {
  cfg.protocol.validate();
  if (inputs.empty()) throw ValidationError("run needs at least one input artifact");
  return Pipeline(inputs, cfg).run();
}

// ---------------------------------------------------------------------------
// SVG

namespace {

constexpr double kSvgSize = 360.0;
constexpr double kMargin = 40.0;
const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

double px(double x) { return kMargin + x * (kSvgSize - 2 * kMargin); }
double py(double y) { return kSvgSize - kMargin - y * (kSvgSize - 2 * kMargin); }

std::size_t col_index(const Table& t, const std::string& name) {
  auto it = std::find(t.columns.begin(), t.columns.end(), name);
  if (it == t.columns.end()) throw ValidationError("table " + t.name + " lacks column " + name);
  return static_cast<std::size_t>(it - t.columns.begin());
}

double cell_number(const std::string& s) {
  if (s == kGap) return std::nan("");
  return std::stod(s);
}

std::string svg_frame(const std::string& title, const std::string& xlabel,
                      const std::string& ylabel) {
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSvgSize << "\" height=\""
    << kSvgSize << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << kSvgSize / 2 << "\" y=\"18\" text-anchor=\"middle\">" << title
    << "</text>\n";
  o << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << kSvgSize - 2 * kMargin
    << "\" height=\"" << kSvgSize - 2 * kMargin << "\" fill=\"none\" stroke=\"black\"/>\n";
  o << "<text x=\"" << kSvgSize / 2 << "\" y=\"" << kSvgSize - 8 << "\" text-anchor=\"middle\">"
    << xlabel << "</text>\n";
  o << "<text x=\"12\" y=\"" << kSvgSize / 2
    << "\" text-anchor=\"middle\" transform=\"rotate(-90 12 " << kSvgSize / 2 << ")\">" << ylabel
    << "</text>\n";
  return o.str();
}

}  // namespace

std::string reliability_svg(const Table& reliability, const std::string& pair) {
  const auto cm = col_index(reliability, "method");
  const auto cc = col_index(reliability, "conf");
  const auto cf = col_index(reliability, "freq");
  std::vector<std::string> methods;
  for (const auto& r : reliability.rows) {
    if (std::find(methods.begin(), methods.end(), r[cm]) == methods.end()) methods.push_back(r[cm]);
  }
  std::ostringstream o;
  o << svg_frame("Reliability: " + pair, "confidence", "observed frequency");
  o << "<line x1=\"" << svg_num(px(0)) << "\" y1=\"" << svg_num(py(0)) << "\" x2=\""
    << svg_num(px(1)) << "\" y2=\"" << svg_num(py(1))
    << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    const char* color = kPalette[mi % 5];
    std::string pts;
    for (const auto& r : reliability.rows) {
      if (r[cm] != methods[mi]) continue;
      const double x = cell_number(r[cc]), y = cell_number(r[cf]);
      pts += svg_num(px(x)) + "," + svg_num(py(y)) + " ";
      o << "<circle cx=\"" << svg_num(px(x)) << "\" cy=\"" << svg_num(py(y)) << "\" r=\"3\" fill=\""
        << color << "\"/>\n";
    }
    o << "<polyline points=\"" << pts << "\" fill=\"none\" stroke=\"" << color << "\"/>\n";
    o << "<text x=\"" << kMargin + 6 << "\" y=\"" << kMargin + 14 + 14 * mi << "\" fill=\"" << color
      << "\">" << methods[mi] << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string coverage_svg(const Table& coverage, const std::string& pair) {
  const auto cs = col_index(coverage, "signal");
  const auto cc = col_index(coverage, "coverage");
  const auto ce = col_index(coverage, "error");
  std::vector<std::string> signals;
  double max_err = 0.0;
  for (const auto& r : coverage.rows) {
    if (std::find(signals.begin(), signals.end(), r[cs]) == signals.end()) signals.push_back(r[cs]);
    max_err = std::max(max_err, cell_number(r[ce]));
  }
  const double ymax = max_err > 0.0 ? max_err * 1.1 : 1.0;
  std::ostringstream o;
  o << svg_frame("Risk-coverage: " + pair, "coverage", "retained error");
  for (std::size_t si = 0; si < signals.size(); ++si) {
    const char* color = kPalette[si % 5];
    std::vector<std::pair<double, double>> pts;
    for (const auto& r : coverage.rows) {
      if (r[cs] == signals[si]) pts.emplace_back(cell_number(r[cc]), cell_number(r[ce]) / ymax);
    }
    std::sort(pts.begin(), pts.end());
    std::string poly;
    for (const auto& [x, y] : pts) poly += svg_num(px(x)) + "," + svg_num(py(y)) + " ";
    o << "<polyline points=\"" << poly << "\" fill=\"none\" stroke=\"" << color << "\"/>\n";
    o << "<text x=\"" << kMargin + 6 << "\" y=\"" << kMargin + 14 + 14 * si << "\" fill=\"" << color
      << "\">" << signals[si] << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

OutputFormat parse_format(std::string_view s) {
  if (s == "csv") return OutputFormat::kCsv;
  if (s == "json") return OutputFormat::kJson;
  if (s == "md") return OutputFormat::kMarkdown;
  throw ValidationError("unknown format '" + std::string(s) + "' (csv|json|md)");
}

namespace {

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-') ? c : '_';
  return out;
}

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + p.string() + "'");
  out << content;
}

Table filter_pair(const Table& t, const std::string& model, const std::string& dataset) {
  Table out{t.name, t.columns, {}};
  const auto cm = col_index(t, "model");
  const auto cd = col_index(t, "dataset");
  for (const auto& r : t.rows) {
    if (r[cm] == model && r[cd] == dataset) out.rows.push_back(r);
  }
  return out;
}

}  // namespace

void write_bundle(const ReportBundle& bundle, const std::string& out_dir, OutputFormat format,
                  bool svg) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  std::string md = "# promptrel report\n\n";
  for (const auto& t : bundle.tables) {
    switch (format) {
      case OutputFormat::kCsv:
        write_file(dir / (t.name + ".csv"), to_csv(t));
        break;
      case OutputFormat::kJson:
        write_file(dir / (t.name + ".json"), to_json(t).dump(2) + "\n");
        break;
      case OutputFormat::kMarkdown:
        md += to_markdown(t) + "\n";
        break;
    }
  }
  if (format == OutputFormat::kMarkdown) write_file(dir / "report.md", md);
  write_file(dir / "metadata.json", bundle.metadata.dump(2) + "\n");
  write_file(dir / "report.json", bundle.to_json().dump(2) + "\n");
  if (!svg) return;
  std::vector<std::pair<std::string, std::string>> pairs;
  auto collect = [&](const Table* t) {
    if (t == nullptr) return;
    const auto cm = col_index(*t, "model");
    const auto cd = col_index(*t, "dataset");
    for (const auto& r : t->rows) {
      std::pair<std::string, std::string> key{r[cm], r[cd]};
      if (std::find(pairs.begin(), pairs.end(), key) == pairs.end()) pairs.push_back(key);
    }
  };
  collect(bundle.find("reliability"));
  collect(bundle.find("coverage"));
  for (const auto& [model, dataset] : pairs) {
    const std::string label = model + "/" + dataset;
    const std::string stem = sanitize(model) + "__" + sanitize(dataset);
    if (const Table* t = bundle.find("reliability")) {
      auto sub = filter_pair(*t, model, dataset);
      if (!sub.rows.empty())
        write_file(dir / ("reliability_" + stem + ".svg"), reliability_svg(sub, label));
    }
    if (const Table* t = bundle.find("coverage")) {
      auto sub = filter_pair(*t, model, dataset);
      if (!sub.rows.empty())
        write_file(dir / ("coverage_" + stem + ".svg"), coverage_svg(sub, label));
    }
  }
}

}  // namespace promptrel
