// SPDX-License-Identifier: Apache-2.0
//
// Synthetic GLUE-shaped tasks, training/evaluation loops and multi-plan
// comparisons.

#pragma once

#include <spafit/metrics.hpp>
#include <spafit/model.hpp>
#include <spafit/optim.hpp>
#include <spafit/plan.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace spafit {

class TaskError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
  DivergenceError(std::uint64_t step, double loss);
  std::uint64_t step() const { return step_; }

private:
  std::uint64_t step_;
};

enum class TaskKind { SingleSentence, PairClassification, PairRegression };

std::string_view to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view s);

inline constexpr int kPadToken = 0;
inline constexpr int kClsToken = 1;
inline constexpr int kSepToken = 2;
inline constexpr int kFirstContentToken = 3;
/// Single-sentence task: a sentence is positive iff it contains one of the
/// first kTriggerTokens content tokens.
inline constexpr int kTriggerTokens = 4;
inline constexpr double kMaxScore = 5.0;

struct TaskSpec {
  TaskKind kind = TaskKind::PairClassification;
  /// Token ids drawn from [kFirstContentToken, vocab_size).
  int vocab_size = 64;
  /// Tokens per text segment.
  int segment_length = 6;
  std::uint64_t seed = 0;
  std::size_t train_size = 2000;
  std::size_t val_size = 500;
  /// Regression label noise (standard deviation, before clamping).
  double score_noise = 0.1;
  std::optional<MetricKind> metric;

  /// Accuracy for classification and Pearson for regression unless set.
  MetricKind resolved_metric() const;
  /// Head width the model needs: 2 for classification, 1 for regression.
  int head_width() const { return kind == TaskKind::PairRegression ? 1 : 2; }
  bool is_pair() const { return kind != TaskKind::SingleSentence; }
  /// [CLS] a [SEP] (b [SEP]).
  std::size_t sequence_length() const;
  void validate() const;
};

struct DatasetRecord {
  std::vector<int> text_a;
  std::optional<std::vector<int>> text_b;
  double label = 0.0;

  friend bool operator==(const DatasetRecord &, const DatasetRecord &) = default;
};

using Dataset = std::vector<DatasetRecord>;

struct TaskData {
  Dataset train;
  Dataset val;
};

/// Deterministic in `spec.seed`.
TaskData generate_task(const TaskSpec &spec);

/// The rule that labels classification records (0/1).
int planted_label(const TaskSpec &spec, const DatasetRecord &r);
/// Noise-free regression target: 5 * |A n B| / min(|A|, |B|) over token sets.
double planted_score(const DatasetRecord &r);

/// Packs records[indices] into a batch padded to the longest sequence.
Batch make_batch(const Dataset &records, std::span<const std::size_t> indices);

/// One JSON object per line: {"text_a": [...], "text_b": [...], "label": x};
/// text_b omitted for single-sentence records.
void write_jsonl(const Dataset &data, std::ostream &out);
Dataset read_jsonl(std::istream &in);
void write_jsonl(const Dataset &data, const std::filesystem::path &path);
Dataset read_jsonl(const std::filesystem::path &path);

/// Predicted labels (argmax) or scores for every record, in eval mode.
std::vector<double> predict_all(const ParamStore &store, const Dataset &data,
                                std::size_t batch_size = 64);
double evaluate(const ParamStore &store, const Dataset &data, TaskKind kind,
                MetricKind metric);

struct RunResult {
  std::string plan_spec;
  std::uint64_t trainable_params = 0;
  std::vector<double> epoch_losses;
  std::string metric_name;
  double metric = 0.0;
  /// Same metric on the training split after the last epoch.
  double train_metric = 0.0;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  TrainConfig train;
};

std::string run_result_json(const RunResult &r);
RunResult parse_run_result_json(const std::string &text);

/// Minibatch AdamW over `data.train` with per-epoch seeded shuffling, then
/// eval-mode scoring on both splits. `store` must already carry the plan
/// (see attach_lora). Throws DivergenceError on a non-finite loss.
RunResult train_run(ParamStore &store, const FinetunePlan &plan,
                    const TaskSpec &task, const TaskData &data,
                    const TrainConfig &cfg);

/// Full fine-tuning of a fresh seeded build on `task`, for use as a trained
/// base (see with_fresh_head). The head width follows the task.
ParamStore pretrain_base(const ModelConfig &config, std::uint64_t model_seed,
                         const TaskSpec &task, const TrainConfig &cfg,
                         RunResult *result = nullptr);

struct CompareOptions {
  ModelConfig model;
  std::uint64_t model_seed = 0;
  /// Trained base to start every run from; the classifier is redrawn from
  /// model_seed. A seeded random build is used when null.
  std::shared_ptr<const ParamStore> base;
  TaskSpec task;
  TrainConfig train;
  /// One run per seed per plan; the seed drives LoRA init, shuffling and
  /// dropout.
  std::vector<std::uint64_t> seeds{0};
  /// Learning rate for full fine-tuning rows when set.
  std::optional<double> full_ft_learning_rate;
  unsigned workers = 1;
};

struct ComparisonRow {
  PlanSpec spec;
  std::uint64_t trainable_params = 0;
  std::string metric_name;
  std::vector<RunResult> runs;
  double best = 0.0;
  bool best_peft = false;
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;
  std::vector<std::uint64_t> seeds;
};

/// One row per spec in the given order. The row with the highest metric
/// among parameter-efficient plans is flagged; a table of full fine-tuning
/// rows only flags its own best.
ComparisonTable compare_configs(const std::vector<PlanSpec> &specs,
                                const CompareOptions &options);
void write_csv(const ComparisonTable &table, std::ostream &out);

} // namespace spafit
