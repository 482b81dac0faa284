#include "mtp/postprocess.hpp"

#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "mtp/errors.hpp"

namespace mtp {

double box_iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = static_cast<double>(a.area()) + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

AnchorGrid make_anchors(const std::vector<std::pair<int64_t, int64_t>>& grid_hw,
                        const std::vector<int64_t>& strides, torch::TensorOptions options) {
  TORCH_CHECK(grid_hw.size() == strides.size(), "one stride per grid required");
  options = options.dtype(options.dtype()).requires_grad(false);
  std::vector<torch::Tensor> points, stride_list;
  for (std::size_t i = 0; i < grid_hw.size(); ++i) {
    const auto [h, w] = grid_hw[i];
    const double s = static_cast<double>(strides[i]);
    auto ys = (torch::arange(h, options) + 0.5) * s;
    auto xs = (torch::arange(w, options) + 0.5) * s;
    auto grid = torch::meshgrid({ys, xs}, "ij");
    points.push_back(torch::stack({grid[1].reshape(-1), grid[0].reshape(-1)}, 1));
    stride_list.push_back(torch::full({h * w, 1}, s, options));
  }
  return {torch::cat(points, 0), torch::cat(stride_list, 0)};
}

torch::Tensor dfl_expectation(const torch::Tensor& bin_logits, int64_t reg_max) {
  const auto b = bin_logits.size(0);
  const auto a = bin_logits.size(2);
  // B x 4R x A -> B x A x 4 x R
  auto logits = bin_logits.view({b, 4, reg_max, a}).permute({0, 3, 1, 2});
  auto bins = torch::arange(reg_max, bin_logits.options().requires_grad(false));
  return (torch::softmax(logits, -1) * bins).sum(-1);
}

torch::Tensor decode_dfl(const torch::Tensor& bin_logits, const AnchorGrid& anchors,
                         int64_t reg_max) {
  auto dist = dfl_expectation(bin_logits, reg_max) * anchors.strides.unsqueeze(0);  // B x A x 4
  auto lt = dist.slice(2, 0, 2);
  auto rb = dist.slice(2, 2, 4);
  auto pts = anchors.points.unsqueeze(0);
  return torch::cat({pts - lt, pts + rb}, 2);
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold,
                           std::size_t max_det) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> keep;
  std::vector<char> removed(dets.size(), 0);
  for (std::size_t i = 0; i < dets.size() && keep.size() < max_det; ++i) {
    if (removed[i]) continue;
    keep.push_back(dets[i]);
    for (std::size_t j = i + 1; j < dets.size(); ++j) {
      if (!removed[j] && dets[j].cls == dets[i].cls &&
          box_iou(dets[i].box, dets[j].box) > iou_threshold) {
        removed[j] = 1;
      }
    }
  }
  return keep;
}

std::vector<Detection> postprocess_detections(const torch::Tensor& decoded,
                                              const ThresholdProfile& profile,
                                              std::size_t max_det) {
  TORCH_CHECK(decoded.dim() == 2 && decoded.size(0) > 4, "expected (4+nc) x A tensor");
  constexpr std::size_t kMaxCandidates = 30000;
  auto t = decoded.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  const int64_t nc = t.size(0) - 4;
  const int64_t a = t.size(1);
  auto acc = t.accessor<float, 2>();
  std::vector<Detection> cands;
  for (int64_t i = 0; i < a; ++i) {
    int best = 0;
    float best_score = acc[4][i];
    for (int64_t c = 1; c < nc; ++c) {
      if (acc[4 + c][i] > best_score) {
        best_score = acc[4 + c][i];
        best = static_cast<int>(c);
      }
    }
    if (best_score <= profile.conf) continue;
    Detection d;
    d.box = {acc[0][i], acc[1][i], acc[2][i], acc[3][i]};
    d.score = best_score;
    d.cls = best;
    cands.push_back(d);
  }
  if (cands.size() > kMaxCandidates) {
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Detection& x, const Detection& y) { return x.score > y.score; });
    cands.resize(kMaxCandidates);
  }
  return nms(std::move(cands), profile.nms_iou, max_det);
}

cv::Mat binarize_mask(const torch::Tensor& logits, cv::Size out_size) {
  TORCH_CHECK(logits.dim() == 3 && logits.size(0) >= 2, "expected (nc+1) x H x W logits");
  auto t = logits.detach().to(torch::kCPU, torch::kFloat32);
  // argmax with ties to the lower index: compare background against the best
  // foreground channel using strict inequality.
  auto fg_best = std::get<0>(t.slice(0, 1).max(0));
  auto fg = (fg_best > t[0]).to(torch::kUInt8).contiguous();
  const int h = static_cast<int>(fg.size(0));
  const int w = static_cast<int>(fg.size(1));
  cv::Mat mask(h, w, CV_8UC1);
  std::memcpy(mask.data, fg.data_ptr<uint8_t>(), static_cast<std::size_t>(h) * w);
  if (out_size.area() > 0 && out_size != mask.size()) {
    cv::Mat resized;
    cv::resize(mask, resized, out_size, 0, 0, cv::INTER_NEAREST_EXACT);
    return resized;
  }
  return mask;
}

std::vector<cv::Scalar> default_palette() {
  return {cv::Scalar(0, 200, 0), cv::Scalar(0, 0, 255), cv::Scalar(255, 0, 0),
          cv::Scalar(0, 255, 255)};
}

cv::Mat render_overlay(const cv::Mat& image, const std::vector<Detection>& dets,
                       const std::vector<cv::Mat>& masks, const std::vector<cv::Scalar>& palette,
                       const std::vector<std::string>& class_names) {
  CV_Assert(image.type() == CV_8UC3);
  cv::Mat out = image.clone();
  constexpr double kAlpha = 0.5;
  for (std::size_t t = 0; t < masks.size(); ++t) {
    const cv::Mat& m = masks[t];
    if (m.size() != out.size()) {
      throw ShapeError("overlay mask " + std::to_string(t) + " does not match image size");
    }
    const cv::Scalar color = palette[t % palette.size()];
    for (int y = 0; y < out.rows; ++y) {
      const auto* mrow = m.ptr<uint8_t>(y);
      auto* orow = out.ptr<cv::Vec3b>(y);
      for (int x = 0; x < out.cols; ++x) {
        if (!mrow[x]) continue;
        for (int c = 0; c < 3; ++c) {
          orow[x][c] = cv::saturate_cast<uint8_t>((1 - kAlpha) * orow[x][c] + kAlpha * color[c]);
        }
      }
    }
  }
  for (const auto& d : dets) {
    const cv::Point p1(static_cast<int>(std::lround(d.box.x1)), static_cast<int>(std::lround(d.box.y1)));
    const cv::Point p2(static_cast<int>(std::lround(d.box.x2)), static_cast<int>(std::lround(d.box.y2)));
    const cv::Scalar color(0, 165, 255);
    cv::rectangle(out, p1, p2, color, 2);
    const std::string name = d.cls < static_cast<int>(class_names.size())
                                 ? class_names[d.cls]
                                 : std::to_string(d.cls);
    char label[64];
    std::snprintf(label, sizeof(label), "%s %.2f", name.c_str(), d.score);
    cv::putText(out, label, {p1.x, std::max(p1.y - 4, 10)}, cv::FONT_HERSHEY_SIMPLEX, 0.4, color,
                1);
  }
  return out;
}

std::vector<int64_t> rle_encode(const cv::Mat& mask) {
  CV_Assert(mask.type() == CV_8UC1);
  std::vector<int64_t> counts;
  uint8_t current = 0;
  int64_t run = 0;
  for (int y = 0; y < mask.rows; ++y) {
    const auto* row = mask.ptr<uint8_t>(y);
    for (int x = 0; x < mask.cols; ++x) {
      const uint8_t v = row[x] ? 1 : 0;
      if (v != current) {
        counts.push_back(run);
        run = 0;
        current = v;
      }
      ++run;
    }
  }
  counts.push_back(run);
  return counts;
}

cv::Mat rle_decode(const std::vector<int64_t>& counts, cv::Size size) {
  cv::Mat mask(size, CV_8UC1, cv::Scalar(0));
  int64_t pos = 0;
  const int64_t total = static_cast<int64_t>(size.area());
  uint8_t value = 0;
  for (int64_t run : counts) {
    if (run < 0 || pos + run > total) throw DataError("run-length counts exceed mask size");
    if (value) {
      for (int64_t k = pos; k < pos + run; ++k) mask.data[k] = 1;
    }
    pos += run;
    value ^= 1;
  }
  if (pos != total) throw DataError("run-length counts do not cover the mask");
  return mask;
}

}  // namespace mtp
