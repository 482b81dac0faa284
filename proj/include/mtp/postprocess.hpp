#pragma once

#include <torch/torch.h>

#include <opencv2/core.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace mtp {

/// Axis-aligned box in pixel xyxy.
struct Box {
  float x1 = 0.f;
  float y1 = 0.f;
  float x2 = 0.f;
  float y2 = 0.f;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return width() > 0.f && height() > 0.f ? width() * height() : 0.f; }
};

double box_iou(const Box& a, const Box& b);

struct Detection {
  Box box;
  float score = 0.f;
  int cls = 0;
};

struct ThresholdProfile {
  double conf = 0.001;
  double nms_iou = 0.6;

  static ThresholdProfile eval() { return {0.001, 0.6}; }
  static ThresholdProfile predict() { return {0.25, 0.45}; }
};

/// Cell-centre anchor points in pixels and the stride each one belongs to.
struct AnchorGrid {
  torch::Tensor points;   // A x 2 (x, y)
  torch::Tensor strides;  // A x 1
};

/// Anchor of cell (i, j) at stride s is ((j + 0.5) s, (i + 0.5) s); scales are
/// concatenated in the given order, row-major within each scale.
AnchorGrid make_anchors(const std::vector<std::pair<int64_t, int64_t>>& grid_hw,
                        const std::vector<int64_t>& strides,
                        torch::TensorOptions options = torch::kFloat32);

/// Expected bin index per side: sum_k k * softmax(logits)_k. Input is
/// B x 4*reg_max x A (side-major), output B x A x 4 in bin units (l, t, r, b).
torch::Tensor dfl_expectation(const torch::Tensor& bin_logits, int64_t reg_max);

/// Decodes side distributions into pixel xyxy boxes: B x A x 4.
torch::Tensor decode_dfl(const torch::Tensor& bin_logits, const AnchorGrid& anchors,
                         int64_t reg_max);

/// Greedy class-aware NMS. Suppresses a box when IoU > iou_threshold with a
/// kept, higher-scored box of the same class. Output sorted by score
/// (descending); ties keep input order.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold,
                           std::size_t max_det = 300);

/// Turns one image's decoded head output (4+nc x A) into detections:
/// best class per cell, confidence filter (strictly greater), NMS.
std::vector<Detection> postprocess_detections(const torch::Tensor& decoded,
                                              const ThresholdProfile& profile,
                                              std::size_t max_det = 300);

/// Per-pixel argmax over (nc+1) x H x W logits, ties going to the lower
/// channel; pixels whose argmax > 0 become 1. Resized (nearest) to out_size
/// when it differs from the logit resolution.
cv::Mat binarize_mask(const torch::Tensor& logits, cv::Size out_size = {});

/// BGR tint per task, applied in task order.
std::vector<cv::Scalar> default_palette();

/// Alpha-blends each mask with its palette colour and draws labelled boxes.
cv::Mat render_overlay(const cv::Mat& image, const std::vector<Detection>& dets,
                       const std::vector<cv::Mat>& masks,
                       const std::vector<cv::Scalar>& palette = default_palette(),
                       const std::vector<std::string>& class_names = {"vehicle"});

/// Row-major run-length encoding of a binary mask; runs alternate starting
/// with background (the first run may be zero-length).
std::vector<int64_t> rle_encode(const cv::Mat& mask);
cv::Mat rle_decode(const std::vector<int64_t>& counts, cv::Size size);

}  // namespace mtp
