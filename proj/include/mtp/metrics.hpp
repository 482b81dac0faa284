#pragma once

// Detection and segmentation metrics plus the throughput benchmark.
// Pixel metrics accumulate counts over the whole evaluation set before any
// division (micro averaging).

#include <torch/torch.h>

#include <opencv2/core.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtp/data.hpp"
#include "mtp/model.hpp"
#include "mtp/postprocess.hpp"

namespace mtp {

// ---- detection -------------------------------------------------------------

/// Greedy matching in descending score order. A detection is a true positive
/// when its best still-unmatched ground truth has IoU >= iou_threshold.
/// Returns flags aligned with the input order.
std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<Box>& gts,
                                   double iou_threshold = 0.5);

struct PRCurve {
  std::vector<std::pair<double, bool>> points;  // (score, is_tp)
  int64_t num_gt = 0;

  void add(double score, bool tp) { points.emplace_back(score, tp); }
  void merge(const PRCurve& other);
  /// Points ordered by non-increasing score; equal scores keep insertion order.
  std::vector<std::pair<double, bool>> sorted() const;
};

/// All-point interpolated AP. The precision envelope is made monotone before
/// integrating over recall. nullopt when the class has neither ground truth
/// nor detections; 0 when it has detections but no ground truth.
std::optional<double> average_precision(const PRCurve& curve);

/// Recall at the score threshold with the highest F1 (ties keep the higher
/// threshold).
double recall_at_best_f1(const PRCurve& curve);
/// Recall with every detection kept.
double recall_at_floor(const PRCurve& curve);

enum class RecallMode { best_f1, floor };
RecallMode parse_recall_mode(const std::string& text);
std::string to_string(RecallMode mode);

// ---- segmentation ----------------------------------------------------------

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;

  int64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  bool operator==(const ConfusionCounts&) const = default;
};

/// Pixel counts of a binary prediction against a binary label. Throws
/// ShapeError on a resolution mismatch.
ConfusionCounts confusion(const cv::Mat& pred, const cv::Mat& gt);
ConfusionCounts confusion(std::span<const cv::Mat> preds, std::span<const cv::Mat> gts);

/// IoU of class c (1 = foreground, 0 = background) from global counts. An
/// empty union counts as a perfect 1.
double seg_iou(const ConfusionCounts& counts, int cls = 1);
double seg_iou(std::span<const cv::Mat> preds, std::span<const cv::Mat> gts, int cls = 1);

/// Two-class mean of background and foreground IoU.
double miou_drivable(const ConfusionCounts& counts);
double miou_drivable(std::span<const cv::Mat> preds, std::span<const cv::Mat> gts);

/// Balanced accuracy (sensitivity + specificity) / 2. Throws DataError when
/// either class is absent from the labels.
double line_accuracy(const ConfusionCounts& counts);

// ---- evaluation ------------------------------------------------------------

struct EvalOptions {
  ThresholdProfile profile = ThresholdProfile::eval();
  double match_iou = 0.5;
  std::size_t max_det = 300;
  int64_t batch_size = 8;
  RecallMode recall_mode = RecallMode::best_f1;
};

struct TaskScores {
  std::string task;
  ConfusionCounts counts;
  double iou = 0;   // foreground
  double miou = 0;  // background/foreground mean
  double accuracy = 0;
};

struct EvalReport {
  int64_t images = 0;
  double map50 = 0;
  double recall = 0;
  std::map<int, double> ap_per_class;
  std::map<int, PRCurve> curves;
  std::vector<TaskScores> tasks;
  std::optional<double> fps;

  /// Flat metric map: map50, recall, <task>_iou, <task>_miou, <task>_acc.
  std::map<std::string, double> flat() const;
  std::string to_text() const;
};

/// Runs the model over a dataset at its ingest resolution.
EvalReport evaluate(MultiTaskNetImpl& model, const Dataset& dataset,
                    const EvalOptions& options = {}, const torch::Device& device = torch::kCPU);

void write_report(const std::filesystem::path& path, const EvalReport& report);
/// recall,precision,score rows of the per-class curves.
void write_pr_csv(const std::filesystem::path& path, const EvalReport& report);

// ---- throughput ------------------------------------------------------------

struct BenchResult {
  int64_t batch_size = 0;
  int64_t input_size = 0;
  int64_t timed_iters = 0;
  double seconds = 0;
  double fps = 0;
  std::string device;
};

/// FPS = timed_iters * batch_size / wall time, measured after warmup on a
/// fixed random input in eval mode. Zero timed iterations throw ConfigError.
BenchResult benchmark_fps(MultiTaskNetImpl& model, int64_t batch_size, int64_t warmup_iters,
                          int64_t timed_iters, int64_t input_size = 640,
                          const torch::Device& device = torch::kCPU);

}  // namespace mtp
