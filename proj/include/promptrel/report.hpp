#pragma once

#include <cstdint>
#include <iosfwd>
#include <json.hpp>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "promptrel/core.hpp"
#include "promptrel/metrics.hpp"

namespace promptrel {

inline constexpr const char* kToolVersion = "0.1.0";

// A rectangular table of preformatted cells.
struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  bool operator==(const Table&) const = default;
};

// Shortest round-trip decimal for finite values; "NA" marks a gap.
std::string format_number(double v);
std::string format_number(std::optional<double> v);
inline constexpr const char* kGap = "NA";

void write_csv(const Table& t, std::ostream& out);
std::string to_csv(const Table& t);
Table parse_csv(std::string_view text, std::string name = {});
std::string to_markdown(const Table& t);
nlohmann::ordered_json to_json(const Table& t);
Table table_from_json(const nlohmann::json& j);

enum class Stage {
  kSelect,
  kMetrics,
  kSweep,
  kCalibrate,
  kFragility,
  kFamilies,
  kTopK,
  kSelective,
  kBootstrap,
  kPrevalence,
  kReliability,
};
std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);
std::vector<Stage> all_stages();

struct RunConfig {
  ProtocolConfig protocol;
  std::uint64_t random_baseline_seed = 42;
  unsigned threads = 1;
  std::set<Stage> stages;  // empty = all
  bool svg = true;

  bool enabled(Stage s) const { return stages.empty() || stages.count(s) > 0; }
  static RunConfig from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

RunConfig load_run_config(const std::string& path);

struct StageError {
  std::string stage;
  std::string scope;  // model or pair the failure applies to
  std::string message;
  bool validation = false;
};

struct ReportBundle {
  nlohmann::ordered_json metadata;
  std::vector<Table> tables;
  std::vector<StageError> errors;

  const Table* find(std::string_view name) const;
  nlohmann::ordered_json to_json() const;
  static ReportBundle from_json(const nlohmann::json& j);
};

// One input artifact plus a label for provenance (file name).
struct NamedInput {
  std::string source;
  ScoreMatrix matrix;
};

// ingest -> select -> aggregate -> calibrate -> metrics -> fragility ->
// selective -> bootstrap -> prevalence. Stage failures are recorded in
// `errors` and the affected tables carry gaps; other stages still run.
ReportBundle run_pipeline(std::span<const NamedInput> inputs, const RunConfig& cfg);

// Reliability-diagram rows for one score vector.
Table reliability_table(const std::string& label, std::span<const double> scores,
                        std::span<const double> labels, const EceSpec& spec);

// Static SVG renderings.
std::string reliability_svg(const Table& reliability, const std::string& pair);
std::string coverage_svg(const Table& coverage, const std::string& pair);

enum class OutputFormat { kCsv, kJson, kMarkdown };
OutputFormat parse_format(std::string_view s);

// Writes every table (in `format`), report.json and metadata.json, plus SVGs
// when enabled.
void write_bundle(const ReportBundle& bundle, const std::string& out_dir, OutputFormat format,
                  bool svg);

std::uint64_t fnv1a64(std::string_view data);

}  // namespace promptrel
