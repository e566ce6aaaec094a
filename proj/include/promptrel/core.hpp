#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace promptrel {

// Error hierarchy. ValidationError maps to CLI exit code 1, ComputationError
// to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ComputationError : public Error {
 public:
  using Error::Error;
};

// A metric that has no value on the given input (e.g. AUROC on one class).
class UndefinedMetricError : public ComputationError {
 public:
  using ComputationError::ComputationError;
};

class EmptySplitError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// U (unsafe) is the positive class.
enum class Label : std::uint8_t { kSafe = 0, kUnsafe = 1 };

inline double indicator(Label y) { return y == Label::kUnsafe ? 1.0 : 0.0; }
std::string_view to_string(Label y);
Label parse_label(std::string_view s);

enum class Split : std::uint8_t { kTrain, kTest, kExternal };
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

enum class Family : std::uint8_t { kA, kB, kC };
std::string_view to_string(Family f);
Family parse_family(std::string_view s);

struct PromptMeta {
  int prompt_id = 0;
  Family family = Family::kA;

  bool operator==(const PromptMeta&) const = default;
};

struct RawLogitRecord {
  double logit_u = 0.0;
  double logit_s = 0.0;
};

// Two-label softmax P(U) = exp(lu) / (exp(lu) + exp(ls)), max-shifted.
double subset_normalize(const RawLogitRecord& rec);

struct ProtocolConfig {
  double epsilon = 1e-12;
  int ece_bins_default = 15;
  double threshold = 0.5;
  double trim_fraction = 0.1;
  std::vector<double> shrink_alphas{0.1, 0.25, 0.5, 0.75, 0.9};
  std::vector<double> coverage_grid{1.00, 0.95, 0.90, 0.85, 0.80, 0.70, 0.60, 0.50};
  int bootstrap_b = 10000;
  std::uint64_t bootstrap_seed = 42;
  // Non-native prevalence targets; the native anchor is always evaluated first.
  std::vector<double> prevalence_targets{0.25, 0.10, 0.05};

  // Throws ValidationError on any violated invariant.
  void validate() const;
};

// Dense N x K matrix of unsafe probabilities with per-sample labels, splits,
// and dataset tags. Immutable after construction.
class ScoreMatrix {
 public:
  ScoreMatrix() = default;

  // Validates all invariants; throws ValidationError.
  ScoreMatrix(std::vector<std::string> sample_ids, std::vector<std::string> datasets,
              std::vector<Label> labels, std::vector<Split> splits, std::vector<PromptMeta> prompts,
              std::vector<double> p_unsafe, std::string model = {});

  std::size_t n() const { return sample_ids_.size(); }
  std::size_t k() const { return prompts_.size(); }

  double at(std::size_t i, std::size_t k) const { return p_unsafe_[i * prompts_.size() + k]; }
  std::span<const double> row(std::size_t i) const {
    return {p_unsafe_.data() + i * prompts_.size(), prompts_.size()};
  }
  std::vector<double> column(std::size_t k) const;
  // Column for a prompt id; throws ValidationError if absent.
  std::vector<double> prompt_column(int prompt_id) const;
  std::size_t column_index(int prompt_id) const;

  const std::vector<std::string>& sample_ids() const { return sample_ids_; }
  const std::vector<std::string>& datasets() const { return datasets_; }
  const std::vector<Label>& labels() const { return labels_; }
  const std::vector<Split>& splits() const { return splits_; }
  const std::vector<PromptMeta>& prompts() const { return prompts_; }
  const std::vector<double>& values() const { return p_unsafe_; }
  const std::string& model() const { return model_; }

  std::vector<double> label_indicators() const;

  // Row subset in the given order (indices into this matrix).
  ScoreMatrix select_rows(std::span<const std::size_t> rows) const;
  // Column subset in the given order (column indices).
  ScoreMatrix select_columns(std::span<const std::size_t> cols) const;

  bool operator==(const ScoreMatrix&) const = default;

 private:
  std::vector<std::string> sample_ids_;
  std::vector<std::string> datasets_;
  std::vector<Label> labels_;
  std::vector<Split> splits_;
  std::vector<PromptMeta> prompts_;
  std::vector<double> p_unsafe_;
  std::string model_;
};

// Reads newline-delimited JSON records (one sample per line). Records may
// carry p_unsafe or (logit_u, logit_s); logits take precedence when both
// are present. Throws ParseError naming the line.
ScoreMatrix parse_scores_jsonl(std::istream& in);
ScoreMatrix parse_scores_jsonl(std::string_view text);
ScoreMatrix load_scores_jsonl(const std::string& path);

// Canonical form: sample_id, dataset, [model], split, label, scores.
void write_scores_jsonl(const ScoreMatrix& m, std::ostream& out);
std::string to_jsonl(const ScoreMatrix& m);

ScoreMatrix restrict_family(const ScoreMatrix& m, Family family);
ScoreMatrix split_view(const ScoreMatrix& m, Split split);
// Rows whose dataset tag matches; throws EmptySplitError if none.
ScoreMatrix dataset_view(const ScoreMatrix& m, std::string_view dataset);
// Rows not tagged train.
ScoreMatrix evaluation_view(const ScoreMatrix& m);

// Concatenates rows of matrices with identical prompt sets and models.
ScoreMatrix concat_rows(std::span<const ScoreMatrix> parts);

}  // namespace promptrel
