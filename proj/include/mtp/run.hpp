#pragma once

// Run configuration and the command implementations behind the mtp tool.

#include <torch/torch.h>

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mtp/data.hpp"
#include "mtp/losses.hpp"
#include "mtp/metrics.hpp"
#include "mtp/model.hpp"
#include "mtp/postprocess.hpp"
#include "mtp/train.hpp"

namespace mtp {

struct DataConfig {
  std::string source = "synthetic";  // dataset root, or "synthetic"
  std::string train_split = "train";
  std::string val_split = "val";     // falls back to the train split when absent
  bool strict = true;
  int synthetic_train = 8;
  int synthetic_val = 0;
  int synthetic_size = 640;

  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  OptimConfig optim;
  LossCoefficients loss;
  AugmentConfig aug;
  ThresholdProfile eval_thresholds = ThresholdProfile::eval();
  ThresholdProfile predict_thresholds = ThresholdProfile::predict();
  RecallMode recall_mode = RecallMode::best_f1;
  FitnessWeights fitness;
  uint64_t seed = 0;
  int eval_interval = 1;  // validate every n epochs (and always at the last one)
  std::string out_dir = "runs/train";

  void validate() const;
  nlohmann::json to_json() const;
  /// Rejects unknown keys and mistyped values with a ConfigError naming the
  /// dotted key.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

/// Applies "dotted.key=value" to a config document. The value is parsed as
/// JSON when possible, otherwise taken as a string; comma-separated strings
/// become arrays where the key holds an array. Unknown keys throw ConfigError.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Device from MTP_DEVICE ("cpu", "cuda", "cuda:N"); cpu when unset.
torch::Device device_from_env();

/// Mask task directories present under <root>/masks, sorted.
std::vector<std::string> discover_tasks(const std::filesystem::path& root);

// ---- commands ------------------------------------------------------------------

struct TrainOutcome {
  std::filesystem::path run_dir;
  FitResult fit;
  TrainCounters counters;
  std::vector<EpochStats> epochs;
};

/// Trains per the config inside cfg.out_dir. Synthetic data is generated
/// under <out_dir>/data.
TrainOutcome run_train(const RunConfig& cfg, std::ostream& log);

/// Continues an interrupted run from <run_dir>/weights/last.pt using the
/// run's config snapshot; epoch numbering carries on.
TrainOutcome resume_train(const std::filesystem::path& run_dir, std::ostream& log,
                          int epochs_override = 0);

struct ValOptions {
  std::filesystem::path weights;
  std::filesystem::path data;
  std::string split = "val";
  std::filesystem::path out_dir;
  int64_t batch_size = 8;
  RecallMode recall_mode = RecallMode::best_f1;
  bool strict = true;
  bool measure_fps = false;  // adds a bs=1 throughput line to the report
};

/// Evaluates a checkpoint with the eval thresholds; writes val_metrics.txt
/// and pr_curve.csv into out_dir.
EvalReport run_val(const ValOptions& options, std::ostream& log);

struct PredictOptions {
  std::filesystem::path weights;
  std::vector<std::filesystem::path> sources;  // image files or directories
  std::filesystem::path out_dir;
  ThresholdProfile thresholds = ThresholdProfile::predict();
};

/// Writes predictions/predictions.json and predictions/overlays/<name>.png.
/// Unreadable images are skipped with a warning. Returns the number of images
/// written.
std::size_t run_predict(const PredictOptions& options, std::ostream& log);

struct BenchOptions {
  std::filesystem::path weights;  // empty: fresh model of `scale`
  Scale scale = Scale::n;
  std::vector<int64_t> batch_sizes{1, 32};
  int64_t input_size = 640;
  int64_t warmup = 2;
  int64_t iters = 10;
  int runs = 3;
  std::filesystem::path out_dir;  // bench.txt when set
};

struct BenchSummary {
  int64_t batch_size = 0;
  std::vector<BenchResult> runs;
  double mean_fps = 0;
  double spread = 0;  // (max - min) / mean
};

std::vector<BenchSummary> run_bench(const BenchOptions& options, std::ostream& log);

/// Gate table of a checkpoint (or of a fresh model when weights is empty).
std::vector<GateState> run_gates(const std::filesystem::path& weights, std::ostream& log);
std::string format_gates(const std::vector<GateState>& gates);

}  // namespace mtp
