#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "addp/augment.hpp"
#include "addp/loss.hpp"
#include "addp/nn/model.hpp"
#include "addp/prototypes.hpp"
#include "addp/signal.hpp"
#include "addp/synth.hpp"

namespace addp::protocol {

/// Invalid or unparsable experiment configuration. The message starts with the
/// offending field path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Method { kAddp, kNaive, kJoint };

Method method_from_name(const std::string& s);
std::string method_name(Method m);

struct Toggles {
  bool style_aug = true;
  bool noise_aug = true;
  bool simplify = true;

  bool operator==(const Toggles&) const = default;
};

struct Hyper {
  int k = 8;
  double p = 0.5;
  int alpha = 9;
  double lr = 1e-4;
  double weight_decay = 5e-5;
  int epochs_initial = 8;
  int epochs_incremental = 4;
  int batch = 8;
  double lambda_freq = 1.0;
  // Periodogram length for the frequency loss (0: clip length).
  std::size_t loss_nfft = 0;
  // Periodogram length for HR readout in metrics and MAE tracking.
  std::size_t hr_nfft = 2048;
  bool mae_attribution = true;
  augment::Sampling sampling = augment::Sampling::kPooled;
  int top_m = 1;
  synth::ClipAugmentOptions clip_augment{};
};

/// A task given inline or by an index.json manifest on disk.
struct TaskSource {
  synth::TaskSpec spec;
  std::optional<std::filesystem::path> manifest;
  synth::LoadOptions window{};
};

struct AblationRow {
  std::string name;
  Toggles toggles;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::vector<TaskSource> tasks;
  Method method = Method::kAddp;
  Toggles toggles{};
  Hyper hyper{};
  std::uint64_t seed = 0;
  nn::ModelConfig model{};
  // Non-empty: run one addp experiment per row instead of a single run.
  std::vector<AblationRow> ablation;
  // Permutation of task indices; empty keeps the listed order.
  std::vector<int> task_order;
  bool audit = false;
  bool checkpoints = true;

  /// Throws ConfigError.
  void validate() const;
  std::vector<TaskSource> ordered_tasks() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Throws ConfigError naming the offending field.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_hash(const ExperimentConfig& c);

/// The three-domain synthetic benchmark used by the acceptance suite.
ExperimentConfig default_benchmark(std::uint64_t seed, Method method = Method::kAddp);

/// The four ablation rows: none, style, style+noise, full.
std::vector<AblationRow> default_ablation_grid();

// --- training ---------------------------------------------------------------

struct EpochLog {
  int task = 0;
  int epoch = 0;
  double loss = 0.0;
  std::uint64_t backbone = 0;
  std::uint64_t adapter = 0;
  std::uint64_t head = 0;
};

struct TrainContext {
  const ExperimentConfig& config;
  proto::PrototypeStore& store;
  augment::AuditLog* audit = nullptr;
  std::int64_t step = 0;  // optimizer steps so far in the run
};

/// Trains one task. With `augment` the store must be non-empty. Throws on an
/// empty training set or if a frozen parameter changes.
std::vector<EpochLog> train_task(nn::Model& model, const std::vector<synth::ClipSample>& train, int task_index,
                                 nn::Stage stage, bool augment, TrainContext& ctx);

// --- evaluation -------------------------------------------------------------

struct Evaluation {
  signal::MetricReport report;
  std::vector<double> pred_hr;  // per recording
  std::vector<double> gt_hr;
};

struct Simplification {
  std::vector<std::size_t> candidates;  // best first; empty means disabled
};

Simplification plan_simplification(const proto::PrototypeStore& store, int top_m);

/// Video-level evaluation: clip HR estimates are averaged per recording.
Evaluation evaluate(const nn::Model& model, const std::vector<synth::ClipSample>& test,
                    const proto::PrototypeStore* store, const Simplification& simp, const Hyper& hyper);

// --- runs -------------------------------------------------------------------

struct RunRecord {
  std::string name;
  std::string method;
  Toggles toggles;
  signal::ResultMatrix matrix;
  std::map<std::string, double> final_performance;  // P_N per metric
  std::vector<std::size_t> style_counts;  // store size per task after each task
  std::vector<std::size_t> noise_counts;
  std::vector<std::optional<std::size_t>> selected;  // simplification prototype per row
  std::vector<double> selected_mae;
  std::vector<EpochLog> epochs;
  double wall_seconds = 0.0;
  std::string config_hash;

  nlohmann::json to_json() const;
};

using Progress = std::function<void(const std::string&)>;

struct TaskSet {
  std::vector<std::string> names;
  std::vector<synth::TaskData> data;
};

/// Generates or loads every task of the config in run order.
TaskSet materialize_tasks(const ExperimentConfig& config);

/// Sequential training over the tasks, filling row t of the result matrix
/// after task t. Artifacts go to `out_dir` when given.
RunRecord run_dil(const ExperimentConfig& config, const std::optional<std::filesystem::path>& out_dir = {},
                  const Progress& progress = {}, const TaskSet* tasks = nullptr);

/// One addp run per row (shared seeds), each in its own subdirectory.
std::vector<RunRecord> run_ablation(const ExperimentConfig& config, const std::vector<AblationRow>& rows,
                                    const std::optional<std::filesystem::path>& out_dir = {},
                                    const Progress& progress = {}, const TaskSet* tasks = nullptr);

/// Std/MAE/RMSE/R table of P_N, one line per record.
std::string summary_table(const std::vector<RunRecord>& records);

}  // namespace addp::protocol
