#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "promptrel/aggregate.hpp"
#include "promptrel/calibrate.hpp"
#include "promptrel/core.hpp"
#include "promptrel/metrics.hpp"
#include "promptrel/protocols.hpp"
#include "promptrel/report.hpp"
#include "promptrel/synth.hpp"

namespace pr = promptrel;

namespace {

struct Globals {
  std::string config;
  std::vector<std::string> inputs;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string format = "csv";
  unsigned threads = 1;
};

pr::RunConfig load_config(const Globals& g) {
  pr::RunConfig cfg = g.config.empty() ? pr::RunConfig{} : pr::load_run_config(g.config);
  if (g.seed) {
    cfg.random_baseline_seed = *g.seed;
    cfg.protocol.bootstrap_seed = *g.seed;
  }
  cfg.threads = std::max(1u, g.threads);
  return cfg;
}

std::vector<pr::NamedInput> load_inputs(const Globals& g) {
  if (g.inputs.empty()) throw pr::ValidationError("at least one --input is required");
  std::vector<pr::NamedInput> out;
  for (const auto& path : g.inputs) out.push_back({path, pr::load_scores_jsonl(path)});
  return out;
}

void print_table(const pr::Table& t, pr::OutputFormat fmt) {
  switch (fmt) {
    case pr::OutputFormat::kCsv:
      std::cout << "# " << t.name << "\n" << pr::to_csv(t) << "\n";
      break;
    case pr::OutputFormat::kJson:
      std::cout << pr::to_json(t).dump(2) << "\n";
      break;
    case pr::OutputFormat::kMarkdown:
      std::cout << pr::to_markdown(t) << "\n";
      break;
  }
}

// Tables go to --out as files when given, else to stdout.
void emit(const pr::ReportBundle& b, const Globals& g, bool svg) {
  const auto fmt = pr::parse_format(g.format);
  if (!g.out.empty()) {
    pr::write_bundle(b, g.out, fmt, svg);
    return;
  }
  for (const auto& t : b.tables) print_table(t, fmt);
}

int stage_exit(const pr::ReportBundle& b) {
  int code = 0;
  for (const auto& e : b.errors) {
    std::cerr << "error [" << e.stage << "] " << e.scope << ": " << e.message << "\n";
    code = std::max(code, e.validation ? 1 : 2);
  }
  // Validation problems take precedence for the exit status.
  for (const auto& e : b.errors) {
    if (e.validation) return 1;
  }
  return code;
}

int run_stages(const Globals& g, std::set<pr::Stage> stages, bool keep_gaps_only = false) {
  auto cfg = load_config(g);
  if (!stages.empty()) {
    if (cfg.stages.empty()) {
      cfg.stages = stages;
    } else {
      std::set<pr::Stage> both;
      for (auto s : stages) {
        if (cfg.stages.count(s)) both.insert(s);
      }
      cfg.stages = both.empty() ? stages : both;
    }
  }
  const auto inputs = load_inputs(g);
  auto bundle = pr::run_pipeline(inputs, cfg);
  if (!keep_gaps_only) {
    // Drop empty tables from narrowed subcommands.
    std::vector<pr::Table> kept;
    for (auto& t : bundle.tables) {
      if (!t.rows.empty() || stages.empty()) kept.push_back(std::move(t));
    }
    bundle.tables = std::move(kept);
  }
  emit(bundle, g, cfg.svg && stages.empty());
  return stage_exit(bundle);
}

int cmd_validate(const Globals& g) {
  pr::Table t{"validate",
              {"source", "model", "n", "k", "datasets", "train", "test", "external", "unsafe_rate"},
              {}};
  for (const auto& in : load_inputs(g)) {
    const auto& m = in.matrix;
    std::set<std::string> ds(m.datasets().begin(), m.datasets().end());
    std::string dss;
    for (const auto& d : ds) dss += (dss.empty() ? "" : " ") + d;
    std::size_t counts[3] = {0, 0, 0};
    for (auto s : m.splits()) ++counts[static_cast<int>(s)];
    double u = 0.0;
    for (double y : m.label_indicators()) u += y;
    t.rows.push_back({in.source, m.model(), std::to_string(m.n()), std::to_string(m.k()), dss,
                      std::to_string(counts[0]), std::to_string(counts[1]),
                      std::to_string(counts[2]),
                      pr::format_number(u / static_cast<double>(m.n()))});
  }
  pr::ReportBundle b;
  b.tables.push_back(std::move(t));
  emit(b, g, false);
  return 0;
}

int cmd_aggregate(const Globals& g, const std::string& rule_name) {
  const auto cfg = load_config(g);
  const auto rule = pr::AggregationRule::parse(rule_name, cfg.protocol.trim_fraction);
  pr::Table t{"aggregate", {"model", "sample_id", "dataset", "split", "label", rule.name()}, {}};
  for (const auto& in : load_inputs(g)) {
    const auto& m = in.matrix;
    const auto s = pr::aggregate(m, rule, nullptr, cfg.protocol.epsilon);
    for (std::size_t i = 0; i < m.n(); ++i) {
      t.rows.push_back({m.model(), m.sample_ids()[i], m.datasets()[i],
                        std::string(pr::to_string(m.splits()[i])),
                        std::string(pr::to_string(m.labels()[i])), pr::format_number(s[i])});
    }
  }
  pr::ReportBundle b;
  b.tables.push_back(std::move(t));
  emit(b, g, false);
  return 0;
}

int cmd_calibrate(const Globals& g, const std::string& kind_name, const std::string& source) {
  const auto cfg = load_config(g);
  pr::CalibratorKind kind;
  if (kind_name == "ts" || kind_name == "temperature") {
    kind = pr::CalibratorKind::kTemperature;
  } else if (kind_name == "platt") {
    kind = pr::CalibratorKind::kPlatt;
  } else if (kind_name == "iso" || kind_name == "isotonic") {
    kind = pr::CalibratorKind::kIsotonic;
  } else {
    throw pr::ValidationError("unknown calibrator '" + kind_name + "' (ts|platt|iso)");
  }
  if (source != "mean" && source != "selected") {
    throw pr::ValidationError("--source must be mean or selected");
  }
  const auto& proto = cfg.protocol;
  pr::Table t{"calibrate",
              {"source", "model", "dataset", "calibrator", "inverted", "nll_before", "nll_after",
               "ece_w15_before", "ece_w15_after"},
              {}};
  const pr::EceSpec w15{15, pr::BinScheme::kEqualWidth};
  for (const auto& in : load_inputs(g)) {
    const auto train = pr::split_view(in.matrix, pr::Split::kTrain);
    std::optional<int> sel;
    if (source == "selected")
      sel = pr::select_prompt(train, proto.threshold, proto.epsilon).selected_prompt_id;
    auto scores_of = [&](const pr::ScoreMatrix& m) {
      return sel ? m.prompt_column(*sel) : pr::mean_ensemble(m);
    };
    const auto cal =
        pr::fit_calibrator(kind, scores_of(train), train.label_indicators(), proto.epsilon);
    const auto eval = pr::evaluation_view(in.matrix);
    std::set<std::string> seen;
    for (const auto& ds : eval.datasets()) {
      if (!seen.insert(ds).second) continue;
      const auto m = pr::dataset_view(eval, ds);
      const auto y = m.label_indicators();
      const auto before = scores_of(m);
      const auto after = cal.apply(before);
      t.rows.push_back({in.source, m.model(), ds, cal.to_json(), cal.inverted() ? "true" : "false",
                        pr::format_number(pr::nll(before, y, {}, proto.epsilon)),
                        pr::format_number(pr::nll(after, y, {}, proto.epsilon)),
                        pr::format_number(pr::ece(before, y, w15)),
                        pr::format_number(pr::ece(after, y, w15))});
    }
  }
  pr::ReportBundle b;
  b.tables.push_back(std::move(t));
  emit(b, g, false);
  return 0;
}

int cmd_synth(const Globals& g, pr::SynthConfig sc) {
  if (g.seed) sc.seed = *g.seed;
  const auto m = pr::generate(sc);
  if (g.out.empty()) {
    pr::write_scores_jsonl(m, std::cout);
    return 0;
  }
  const std::filesystem::path p(g.out);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw pr::ValidationError("cannot write '" + g.out + "'");
  pr::write_scores_jsonl(m, out);
  return 0;
}

int cmd_report(const Globals& g) {
  if (g.inputs.size() != 1)
    throw pr::ValidationError("report takes exactly one --input (report.json or its directory)");
  std::filesystem::path p(g.inputs.front());
  if (std::filesystem::is_directory(p)) p /= "report.json";
  std::ifstream in(p);
  if (!in) throw pr::ValidationError("cannot open '" + p.string() + "'");
  pr::ReportBundle b;
  try {
    b = pr::ReportBundle::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw pr::ValidationError(std::string("bad report: ") + e.what());
  }
  emit(b, g, true);
  return stage_exit(b);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"promptrel: reliability evaluation for prompt-ensemble classifier scores"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--input", g.inputs, "score artifact (JSONL); repeatable");
  app.add_option("--out", g.out, "output directory (or file for synth)");
  app.add_option("--seed", g.seed, "seed override");
  app.add_option("--format", g.format, "csv|json|md")->check(CLI::IsMember({"csv", "json", "md"}));
  app.add_option("--threads", g.threads, "bootstrap worker threads");

  auto* validate = app.add_subcommand("validate", "check artifacts and summarize them");
  std::string rule = "mean_prob";
  auto* aggregate = app.add_subcommand("aggregate", "aggregate prompt scores with one rule");
  aggregate->add_option("--rule", rule, "rule id, e.g. mean_prob, bias_scale_shrink_0.25");
  auto* metrics = app.add_subcommand("metrics", "main comparison metrics");
  auto* select = app.add_subcommand("select", "locked prompt selection on train rows");
  std::string cal_kind = "ts", cal_source = "mean";
  auto* calibrate = app.add_subcommand("calibrate", "fit one calibrator on train rows");
  calibrate->add_option("--kind", cal_kind, "ts|platt|iso");
  calibrate->add_option("--source", cal_source, "mean|selected");
  auto* sweep = app.add_subcommand("sweep", "aggregation-rule NLL sweep and win counts");
  auto* selective = app.add_subcommand("selective", "risk-coverage curves and AURC");
  auto* bootstrap = app.add_subcommand("bootstrap", "paired bootstrap of mean vs selected");
  auto* prevalence = app.add_subcommand("prevalence", "prevalence-shift stress test");
  pr::SynthConfig sc;
  auto* synth = app.add_subcommand("synth", "generate a synthetic score artifact");
  synth->add_option("--n", sc.n_samples, "samples");
  synth->add_option("--k", sc.k_prompts, "prompts");
  synth->add_option("--latent-std", sc.latent_logit_std, "latent logit std");
  synth->add_option("--bias-std", sc.per_prompt_bias_std, "per-prompt bias std");
  synth->add_option("--scale-lo", sc.scale_lo, "lower prompt scale");
  synth->add_option("--scale-hi", sc.scale_hi, "upper prompt scale");
  synth->add_option("--noise-std", sc.noise_std, "per-cell logit noise std");
  synth->add_option("--train-fraction", sc.train_fraction, "leading fraction tagged train");
  synth->add_option("--dataset", sc.dataset, "dataset name");
  synth->add_option("--model", sc.model, "model name");
  auto* run = app.add_subcommand("run", "full protocol end to end");
  auto* report = app.add_subcommand("report", "re-render a saved report.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  using S = pr::Stage;
  try {
    if (*validate) return cmd_validate(g);
    if (*aggregate) return cmd_aggregate(g, rule);
    if (*metrics) return run_stages(g, {S::kMetrics});
    if (*select) return run_stages(g, {S::kSelect});
    if (*calibrate) return cmd_calibrate(g, cal_kind, cal_source);
    if (*sweep) return run_stages(g, {S::kSweep});
    if (*selective) return run_stages(g, {S::kSelective});
    if (*bootstrap) return run_stages(g, {S::kBootstrap});
    if (*prevalence) return run_stages(g, {S::kPrevalence});
    if (*synth) return cmd_synth(g, sc);
    if (*run) return run_stages(g, {}, true);
    if (*report) return cmd_report(g);
  } catch (const pr::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const pr::Error& e) {
    std::cerr << "computation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
