#pragma once

// Joint training: one forward, the summed loss, one backward and one SGD step
// per batch, with warmup, linear annealing and patience-based early stopping.

#include <torch/torch.h>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mtp/data.hpp"
#include "mtp/losses.hpp"
#include "mtp/metrics.hpp"
#include "mtp/model.hpp"

namespace mtp {

struct OptimConfig {
  double lr0 = 0.01;
  double lrf = 0.01;  // final lr = lr0 * lrf
  double momentum = 0.937;
  double weight_decay = 0.0005;
  double warmup_epochs = 3.0;
  double warmup_momentum = 0.8;
  double warmup_bias_lr = 0.1;
  int epochs = 300;
  int patience = 50;
  int batch_size = 8;
  int nominal_batch = 0;        // > 0 accumulates gradients up to this many images
  bool scale_loss_by_batch = true;
  double grad_clip_norm = 10.0;  // 0 disables
  bool ema = false;
  double ema_decay = 0.9999;

  void validate() const;
  /// Optimizer steps happen every accumulate() batches.
  int accumulate() const;
  nlohmann::json to_json() const;
  static OptimConfig from_json(const nlohmann::json& j);
};

// Parameter groups, in optimizer order.
enum ParamGroup : int { kDecayWeights = 0, kNoDecay = 1, kBiases = 2 };

struct LrState {
  double lr[3] = {0, 0, 0};
  double momentum = 0;
};

/// Learning rate per group and momentum at (epoch, iteration) with
/// `iters_per_epoch` batches per epoch. Warmup covers the first
/// warmup_epochs * iters_per_epoch iterations; afterwards the rate falls
/// linearly to lr0 * lrf at epoch == epochs.
LrState lr_schedule(int epoch, int64_t iter, int64_t iters_per_epoch, const OptimConfig& cfg);

/// Group of every named parameter: conv / linear weights decay, norm weights
/// and gate scalars do not, biases get the warmup bias rate.
std::map<std::string, ParamGroup> parameter_groups(const torch::nn::Module& model);

std::unique_ptr<torch::optim::SGD> make_optimizer(torch::nn::Module& model, const OptimConfig& cfg);
void apply_lr(torch::optim::SGD& optimizer, const LrState& state);

// ---- fitness / early stopping ------------------------------------------------

struct FitnessWeights {
  std::map<std::string, double> weights{
      {"map50", 0.2}, {"drivable_miou", 0.3}, {"lane_iou", 0.3}, {"lane_acc", 0.2}};

  /// Drops terms of tasks that are not trained and rescales the rest to sum 1.
  FitnessWeights for_tasks(const std::vector<std::string>& tasks) const;
  nlohmann::json to_json() const;
  static FitnessWeights from_json(const nlohmann::json& j);
};

/// Weighted sum of metrics. A weighted metric that is missing throws
/// ConfigError.
double fitness(const std::map<std::string, double>& metrics, const FitnessWeights& weights = {});

struct FitnessRecord {
  int epoch = 0;
  std::map<std::string, double> metrics;
  double fitness = 0;
};

/// Stops once `patience` epochs have passed without a strict improvement over
/// the best fitness so far. Epochs are 1-based.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Records one epoch; returns true when training should stop.
  bool update(int epoch, double fitness);
  bool improved() const { return improved_; }
  int best_epoch() const { return best_epoch_; }
  double best_fitness() const { return best_fitness_; }
  void restore(int best_epoch, double best_fitness);

 private:
  int patience_;
  int best_epoch_ = 0;
  double best_fitness_ = -std::numeric_limits<double>::infinity();
  bool improved_ = false;
};

struct FitHooks {
  std::function<void(int epoch)> train_epoch;
  std::function<FitnessRecord(int epoch)> validate;
  std::function<void(const FitnessRecord&, const EarlyStopping&)> on_epoch_end;
};

struct FitResult {
  int last_epoch = 0;
  int best_epoch = 0;
  double best_fitness = 0;
  bool stopped_early = false;
};

/// Epoch loop from start_epoch to max_epochs (inclusive, 1-based).
FitResult fit_loop(const FitHooks& hooks, int max_epochs, EarlyStopping& stopper,
                   int start_epoch = 1);

// ---- checkpoints -------------------------------------------------------------

struct CheckpointMeta {
  nlohmann::json config;  // run config snapshot (holds "model")
  int epoch = 0;
  int best_epoch = 0;
  double best_fitness = -std::numeric_limits<double>::infinity();
};

void save_checkpoint(const std::filesystem::path& path, MultiTaskNetImpl& model,
                     const CheckpointMeta& meta, torch::optim::Optimizer* optimizer = nullptr);

struct LoadedCheckpoint {
  MultiTaskNet model{nullptr};
  CheckpointMeta meta;
};

/// Rebuilds the model from the stored config and loads its weights. When an
/// optimizer is given its state is restored too.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 torch::optim::Optimizer* optimizer = nullptr);
void load_optimizer_state(const std::filesystem::path& path, torch::optim::Optimizer& optimizer);

// ---- trainer -------------------------------------------------------------------

struct TrainCounters {
  int64_t batches = 0;
  int64_t forwards = 0;
  int64_t backwards = 0;
  int64_t steps = 0;
};

struct EpochStats {
  int epoch = 0;
  int64_t batches = 0;
  LossBreakdown mean;
  LrState lr;
  double seconds = 0;
};

/// Exponential moving average of the model weights.
class ModelEma {
 public:
  ModelEma(MultiTaskNetImpl& model, double decay);
  void update(MultiTaskNetImpl& model);
  MultiTaskNetImpl& model() { return *ema_; }
  int64_t updates() const { return updates_; }

 private:
  MultiTaskNet ema_{nullptr};
  double decay_;
  int64_t updates_ = 0;
};

struct TrainerOptions {
  OptimConfig optim;
  LossCoefficients loss;
  AugmentConfig aug;
  uint64_t seed = 0;
  torch::Device device = torch::kCPU;
};

class Trainer {
 public:
  Trainer(MultiTaskNet model, const Dataset& train_set, TrainerOptions options);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// One pass over the training set (epoch is 1-based).
  EpochStats train_epoch(int epoch);

  MultiTaskNet model() const { return model_; }
  /// Weights used for evaluation (EMA copy when enabled).
  MultiTaskNetImpl& eval_model();
  torch::optim::SGD& optimizer() { return *optimizer_; }
  const TrainCounters& counters() const { return counters_; }
  const TrainerOptions& options() const { return options_; }
  int64_t iterations() const { return global_iter_; }
  void set_iterations(int64_t iter) { global_iter_ = iter; }

 private:
  MultiTaskNet model_;
  const Dataset& train_set_;
  TrainerOptions options_;
  std::unique_ptr<torch::optim::SGD> optimizer_;
  MultiTaskLoss loss_;
  std::optional<ModelEma> ema_;
  TrainCounters counters_;
  int64_t global_iter_ = 0;
};

// ---- run directory -------------------------------------------------------------

/// config.json, metrics.csv, weights/{best,last}.pt and loss_curve.png.
class RunDirectory {
 public:
  explicit RunDirectory(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path weights(const std::string& name) const;
  std::filesystem::path metrics_csv() const { return root_ / "metrics.csv"; }

  void write_config(const nlohmann::json& config) const;
  /// Appends one row; writes the header when the file is new.
  void append_metrics(const EpochStats& stats, const FitnessRecord& record,
                      const std::vector<std::string>& tasks) const;
  /// Redraws the loss curve from metrics.csv.
  void plot_loss_curve() const;

 private:
  std::filesystem::path root_;
};

}  // namespace mtp
