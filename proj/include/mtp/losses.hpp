#pragma once

// Loss functions for the three heads and the task-aligned target assigner.
//
// Detection: lambda_bce * BCE + lambda_dfl * DFL + lambda_ciou * (1 - CIoU).
// Segmentation (identical for every task): lambda_fl * focal + lambda_tl * Tversky.
// Total: plain sum of the detection loss and every segmentation loss.

#include <torch/torch.h>

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "mtp/model.hpp"

namespace mtp {

struct LossCoefficients {
  double bce = 0.5;
  double dfl = 1.5;
  double ciou = 7.5;
  double fl = 24.0;
  double tl = 8.0;
  double tversky_alpha = 0.7;
  double tversky_beta = 0.3;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  void validate() const;
  nlohmann::json to_json() const;
  static LossCoefficients from_json(const nlohmann::json& j);
  bool operator==(const LossCoefficients&) const = default;
};

inline constexpr double kLogClamp = 1e-12;
inline constexpr double kTverskyEps = 1e-7;

// ---- primitives -----------------------------------------------------------

/// Mean binary cross-entropy on probabilities (logs clamped at 1e-12).
torch::Tensor bce_loss(const torch::Tensor& prob, const torch::Tensor& target);

/// Element-wise binary cross-entropy on logits, computed stably.
torch::Tensor bce_with_logits(const torch::Tensor& logits, const torch::Tensor& target);

/// Distribution focal loss per row. bin_logits: N x R, target: N continuous
/// bin positions (clamped to [0, R-1]). Returns N losses.
torch::Tensor dfl_loss(const torch::Tensor& bin_logits, const torch::Tensor& target);

/// Complete IoU between matched rows of xyxy boxes (N x 4 each). Width and
/// height are floored at 1e-7 so degenerate boxes stay finite.
torch::Tensor ciou(const torch::Tensor& pred, const torch::Tensor& gt);

/// 1 - CIoU per row.
torch::Tensor ciou_loss(const torch::Tensor& pred, const torch::Tensor& gt);

/// Mean over every element of -alpha_t (1 - p_t)^gamma log(p_t), with
/// p = sigmoid(logit), p_t = p for target 1 and 1 - p for target 0. alpha_t
/// is a constant weight applied to every element.
torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& target,
                         double alpha = 0.25, double gamma = 2.0);

/// 1 - (TP + eps) / (TP + alpha FN + beta FP + eps) over soft counts.
torch::Tensor tversky_loss(const torch::Tensor& prob, const torch::Tensor& target,
                           double alpha = 0.7, double beta = 0.3, double eps = kTverskyEps);

// ---- target assignment ----------------------------------------------------

struct Assignment {
  torch::Tensor target_boxes;   // B x A x 4, pixel xyxy
  torch::Tensor target_scores;  // B x A x nc, normalised alignment
  torch::Tensor target_gt_idx;  // B x A, int64 (0 where background)
  torch::Tensor fg_mask;        // B x A, bool
};

/// Task-aligned top-k assignment. The alignment of gt g with cell a is
/// score(a, cls_g)^alpha * IoU(g, box_a)^beta, restricted to cells whose
/// anchor lies strictly inside g. Each gt takes its top-k cells; a cell
/// claimed by several gts goes to the one with the highest IoU (lowest index
/// on ties).
class TaskAlignedAssigner {
 public:
  explicit TaskAlignedAssigner(int64_t num_classes, int64_t topk = 10, double alpha = 0.5,
                               double beta = 6.0);

  /// pd_scores: B x A x nc probabilities, pd_boxes: B x A x 4 pixel xyxy,
  /// anchors: A x 2 pixel points, gt_labels/gt_boxes: per image (M,) int64
  /// and (M x 4) pixel xyxy.
  Assignment assign(const torch::Tensor& pd_scores, const torch::Tensor& pd_boxes,
                    const torch::Tensor& anchors, const std::vector<torch::Tensor>& gt_labels,
                    const std::vector<torch::Tensor>& gt_boxes) const;

  /// Alignment metric and in-box mask for one image (M x A each).
  std::pair<torch::Tensor, torch::Tensor> alignment(const torch::Tensor& pd_scores,
                                                    const torch::Tensor& pd_boxes,
                                                    const torch::Tensor& anchors,
                                                    const torch::Tensor& labels,
                                                    const torch::Tensor& boxes) const;

 private:
  int64_t nc_;
  int64_t topk_;
  double alpha_;
  double beta_;
};

/// Pairwise IoU, M x 4 against A x 4 -> M x A.
torch::Tensor pairwise_iou(const torch::Tensor& a, const torch::Tensor& b);

// ---- composite losses -----------------------------------------------------

struct DetLossParts {
  torch::Tensor total;
  torch::Tensor bce;
  torch::Tensor dfl;
  torch::Tensor ciou;
  int64_t num_foreground = 0;
};

/// Detection loss over the three raw head tensors. Targets: K x 6 rows of
/// (image index, class, cx, cy, w, h) with box coordinates normalised to
/// the input size. BCE is summed and divided by the total target score;
/// DFL and CIoU are weighted by each foreground cell's target score and
/// divided by the same total.
class DetectionLoss {
 public:
  DetectionLoss(int64_t num_classes, int64_t reg_max, std::vector<int64_t> strides,
                int64_t input_size, LossCoefficients coeffs = {});

  DetLossParts operator()(const std::vector<torch::Tensor>& raw,
                          const torch::Tensor& targets) const;

  const TaskAlignedAssigner& assigner() const { return assigner_; }

 private:
  int64_t nc_;
  int64_t reg_max_;
  std::vector<int64_t> strides_;
  int64_t input_size_;
  LossCoefficients coeffs_;
  TaskAlignedAssigner assigner_;
};

struct SegLossParts {
  torch::Tensor total;
  torch::Tensor fl;
  torch::Tensor tl;
};

/// Shared segmentation loss. Logits: B x 2 x H x W, mask: B x H x W in {0, 1}.
/// Focal runs on both channels against the one-hot target; Tversky runs on
/// the foreground channel only.
class SegmentationLoss {
 public:
  explicit SegmentationLoss(LossCoefficients coeffs = {});

  SegLossParts operator()(const torch::Tensor& logits, const torch::Tensor& mask) const;

  const LossCoefficients& coefficients() const { return coeffs_; }

 private:
  LossCoefficients coeffs_;
};

/// Unweighted sum: det + sum(segs).
torch::Tensor total_loss(const torch::Tensor& det, const std::vector<torch::Tensor>& segs);

struct LossBreakdown {
  double bce = 0, dfl = 0, ciou = 0, det = 0;
  std::vector<double> fl, tl, seg;
  double total = 0;

  bool finite() const;
  std::string describe(const std::vector<std::string>& tasks) const;
};

struct LossResult {
  torch::Tensor total;
  LossBreakdown parts;
};

class MultiTaskLoss {
 public:
  MultiTaskLoss(const ModelConfig& cfg, LossCoefficients coeffs = {});

  /// det_targets as in DetectionLoss; masks: one B x H x W tensor per task.
  LossResult operator()(const PredictionBundle& pred, const torch::Tensor& det_targets,
                        const std::vector<torch::Tensor>& masks) const;

 private:
  DetectionLoss det_;
  SegmentationLoss seg_;
};

}  // namespace mtp
