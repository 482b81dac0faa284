#include "mtp/losses.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "mtp/errors.hpp"
#include "mtp/postprocess.hpp"

namespace mtp {

void LossCoefficients::validate() const {
  for (double v : {bce, dfl, ciou, fl, tl, tversky_alpha, tversky_beta, focal_alpha, focal_gamma}) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ConfigError("loss coefficients must be finite and non-negative");
    }
  }
}

nlohmann::json LossCoefficients::to_json() const {
  return {{"bce", bce},
          {"dfl", dfl},
          {"ciou", ciou},
          {"fl", fl},
          {"tl", tl},
          {"tversky_alpha", tversky_alpha},
          {"tversky_beta", tversky_beta},
          {"focal_alpha", focal_alpha},
          {"focal_gamma", focal_gamma}};
}

LossCoefficients LossCoefficients::from_json(const nlohmann::json& j) {
  LossCoefficients c;
  c.bce = j.value("bce", c.bce);
  c.dfl = j.value("dfl", c.dfl);
  c.ciou = j.value("ciou", c.ciou);
  c.fl = j.value("fl", c.fl);
  c.tl = j.value("tl", c.tl);
  c.tversky_alpha = j.value("tversky_alpha", c.tversky_alpha);
  c.tversky_beta = j.value("tversky_beta", c.tversky_beta);
  c.focal_alpha = j.value("focal_alpha", c.focal_alpha);
  c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

torch::Tensor bce_loss(const torch::Tensor& prob, const torch::Tensor& target) {
  auto log_p = torch::log(prob.clamp_min(kLogClamp));
  auto log_q = torch::log((1 - prob).clamp_min(kLogClamp));
  return -(target * log_p + (1 - target) * log_q).mean();
}

torch::Tensor bce_with_logits(const torch::Tensor& logits, const torch::Tensor& target) {
  // max(x, 0) - x y + log(1 + exp(-|x|))
  return logits.clamp_min(0) - logits * target + torch::log1p(torch::exp(-logits.abs()));
}

torch::Tensor dfl_loss(const torch::Tensor& bin_logits, const torch::Tensor& target) {
  TORCH_CHECK(bin_logits.dim() == 2 && target.dim() == 1 && bin_logits.size(0) == target.size(0),
              "dfl_loss expects N x R logits and N targets");
  const int64_t r = bin_logits.size(1);
  auto y = target.clamp(0, static_cast<double>(r - 1));
  auto left = y.floor().clamp_max(static_cast<double>(r - 2)).to(torch::kLong);
  auto right = left + 1;
  auto w_left = right.to(y.scalar_type()) - y;
  auto w_right = 1 - w_left;
  auto log_p = torch::log_softmax(bin_logits, 1);
  return -(log_p.gather(1, left.unsqueeze(1)).squeeze(1) * w_left +
           log_p.gather(1, right.unsqueeze(1)).squeeze(1) * w_right);
}

torch::Tensor ciou(const torch::Tensor& pred, const torch::Tensor& gt) {
  constexpr double eps = 1e-7;
  auto px1 = pred.select(-1, 0), py1 = pred.select(-1, 1);
  auto px2 = pred.select(-1, 2), py2 = pred.select(-1, 3);
  auto gx1 = gt.select(-1, 0), gy1 = gt.select(-1, 1);
  auto gx2 = gt.select(-1, 2), gy2 = gt.select(-1, 3);
  auto pw = (px2 - px1).clamp_min(eps), ph = (py2 - py1).clamp_min(eps);
  auto gw = (gx2 - gx1).clamp_min(eps), gh = (gy2 - gy1).clamp_min(eps);

  auto inter = (torch::minimum(px2, gx2) - torch::maximum(px1, gx1)).clamp_min(0) *
               (torch::minimum(py2, gy2) - torch::maximum(py1, gy1)).clamp_min(0);
  auto uni = pw * ph + gw * gh - inter;
  auto iou = inter / uni;

  auto cw = torch::maximum(px2, gx2) - torch::minimum(px1, gx1);
  auto ch = torch::maximum(py2, gy2) - torch::minimum(py1, gy1);
  auto c2 = cw.pow(2) + ch.pow(2) + eps;
  auto rho2 = ((px1 + px2) - (gx1 + gx2)).pow(2) / 4 + ((py1 + py2) - (gy1 + gy2)).pow(2) / 4;
  const double k = 4.0 / (std::numbers::pi * std::numbers::pi);
  auto v = k * (torch::atan(gw / gh) - torch::atan(pw / ph)).pow(2);
  auto alpha = v / (v - iou + (1 + eps));
  return iou - (rho2 / c2 + v * alpha);
}

torch::Tensor ciou_loss(const torch::Tensor& pred, const torch::Tensor& gt) {
  return 1 - ciou(pred, gt);
}

torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& target, double alpha,
                         double gamma) {
  auto log_p = torch::log_sigmoid(logits);
  auto log_q = torch::log_sigmoid(-logits);
  auto log_pt = target * log_p + (1 - target) * log_q;
  auto pt = torch::exp(log_pt);
  return (-alpha * (1 - pt).pow(gamma) * log_pt).mean();
}

torch::Tensor tversky_loss(const torch::Tensor& prob, const torch::Tensor& target, double alpha,
                           double beta, double eps) {
  auto tp = (prob * target).sum();
  auto fn = ((1 - prob) * target).sum();
  auto fp = (prob * (1 - target)).sum();
  return 1 - (tp + eps) / (tp + alpha * fn + beta * fp + eps);
}

// ---------------------------------------------------------------------------

torch::Tensor pairwise_iou(const torch::Tensor& a, const torch::Tensor& b) {
  auto a1 = a.unsqueeze(1);  // M x 1 x 4
  auto b1 = b.unsqueeze(0);  // 1 x A x 4
  auto iw = (torch::minimum(a1.select(2, 2), b1.select(2, 2)) -
             torch::maximum(a1.select(2, 0), b1.select(2, 0)))
                .clamp_min(0);
  auto ih = (torch::minimum(a1.select(2, 3), b1.select(2, 3)) -
             torch::maximum(a1.select(2, 1), b1.select(2, 1)))
                .clamp_min(0);
  auto inter = iw * ih;
  auto area_a = ((a1.select(2, 2) - a1.select(2, 0)) * (a1.select(2, 3) - a1.select(2, 1))).clamp_min(0);
  auto area_b = ((b1.select(2, 2) - b1.select(2, 0)) * (b1.select(2, 3) - b1.select(2, 1))).clamp_min(0);
  return inter / (area_a + area_b - inter + 1e-9);
}

TaskAlignedAssigner::TaskAlignedAssigner(int64_t num_classes, int64_t topk, double alpha,
                                         double beta)
    : nc_(num_classes), topk_(topk), alpha_(alpha), beta_(beta) {}

std::pair<torch::Tensor, torch::Tensor> TaskAlignedAssigner::alignment(
    const torch::Tensor& pd_scores, const torch::Tensor& pd_boxes, const torch::Tensor& anchors,
    const torch::Tensor& labels, const torch::Tensor& boxes) const {
  constexpr double eps = 1e-9;
  auto ax = anchors.select(1, 0).unsqueeze(0);
  auto ay = anchors.select(1, 1).unsqueeze(0);
  auto in_gt = (ax - boxes.select(1, 0).unsqueeze(1) > eps) &
               (ay - boxes.select(1, 1).unsqueeze(1) > eps) &
               (boxes.select(1, 2).unsqueeze(1) - ax > eps) &
               (boxes.select(1, 3).unsqueeze(1) - ay > eps);  // M x A
  auto ious = pairwise_iou(boxes, pd_boxes).clamp_min(0);        // M x A
  auto scores = pd_scores.index_select(1, labels).transpose(0, 1);  // M x A
  auto metric = scores.pow(alpha_) * ious.pow(beta_) * in_gt.to(scores.scalar_type());
  return {metric, in_gt};
}

Assignment TaskAlignedAssigner::assign(const torch::Tensor& pd_scores,
                                       const torch::Tensor& pd_boxes,
                                       const torch::Tensor& anchors,
                                       const std::vector<torch::Tensor>& gt_labels,
                                       const std::vector<torch::Tensor>& gt_boxes) const {
  torch::NoGradGuard no_grad;
  const int64_t batch = pd_scores.size(0);
  const int64_t num_anchors = pd_scores.size(1);
  const auto opts = pd_scores.options();
  Assignment out;
  out.target_boxes = torch::zeros({batch, num_anchors, 4}, opts);
  out.target_scores = torch::zeros({batch, num_anchors, nc_}, opts);
  out.target_gt_idx = torch::zeros({batch, num_anchors}, opts.dtype(torch::kLong));
  out.fg_mask = torch::zeros({batch, num_anchors}, opts.dtype(torch::kBool));

  for (int64_t b = 0; b < batch; ++b) {
    const auto& labels = gt_labels[b];
    const auto& boxes = gt_boxes[b];
    const int64_t m = labels.numel();
    if (m == 0) continue;

    auto [metric, in_gt] = alignment(pd_scores[b], pd_boxes[b], anchors, labels, boxes);
    auto ious = pairwise_iou(boxes, pd_boxes[b]).clamp_min(0);

    const int64_t k = std::min(topk_, num_anchors);
    auto top_idx = std::get<1>(metric.topk(k, 1, /*largest=*/true, /*sorted=*/true));
    auto mask_pos = torch::zeros({m, num_anchors}, opts).scatter_(1, top_idx, 1.0);
    mask_pos = mask_pos * in_gt.to(mask_pos.scalar_type());

    // cells claimed by several gts keep the one with the highest IoU
    auto claims = mask_pos.sum(0);
    auto multi = claims > 1;
    if (multi.any().item<bool>()) {
      auto best = ious.argmax(0);  // first max -> lowest gt index on ties
      auto one_hot = torch::zeros_like(mask_pos).scatter_(0, best.unsqueeze(0), 1.0);
      mask_pos = torch::where(multi.unsqueeze(0), one_hot, mask_pos);
    }
    auto fg = mask_pos.sum(0) > 0;
    auto gt_idx = mask_pos.argmax(0);

    auto aligned = metric * mask_pos;
    auto pos_align_max = aligned.amax(1, true);
    auto pos_iou_max = (ious * mask_pos).amax(1, true);
    auto norm_align = (aligned * pos_iou_max / (pos_align_max + 1e-9)).amax(0);  // A

    auto assigned_labels = labels.index_select(0, gt_idx);
    auto scores = torch::zeros({num_anchors, nc_}, opts)
                      .scatter_(1, assigned_labels.unsqueeze(1), 1.0);
    scores = scores * (norm_align * fg.to(opts.dtype())).unsqueeze(1);

    out.target_boxes[b] = boxes.index_select(0, gt_idx);
    out.target_scores[b] = scores;
    out.target_gt_idx[b] = gt_idx;
    out.fg_mask[b] = fg;
  }
  return out;
}

// ---------------------------------------------------------------------------

DetectionLoss::DetectionLoss(int64_t num_classes, int64_t reg_max, std::vector<int64_t> strides,
                             int64_t input_size, LossCoefficients coeffs)
    : nc_(num_classes),
      reg_max_(reg_max),
      strides_(std::move(strides)),
      input_size_(input_size),
      coeffs_(coeffs),
      assigner_(num_classes) {
  coeffs_.validate();
}

DetLossParts DetectionLoss::operator()(const std::vector<torch::Tensor>& raw,
                                       const torch::Tensor& targets) const {
  if (raw.size() != strides_.size()) {
    throw ShapeError("detection loss expects " + std::to_string(strides_.size()) +
                     " head tensors, got " + std::to_string(raw.size()));
  }
  const int64_t batch = raw[0].size(0);
  const int64_t no = 4 * reg_max_ + nc_;
  std::vector<std::pair<int64_t, int64_t>> grid;
  std::vector<torch::Tensor> flat;
  for (const auto& t : raw) {
    if (t.size(1) != no) {
      throw ShapeError("detection head tensor has " + std::to_string(t.size(1)) +
                       " channels, expected " + std::to_string(no));
    }
    grid.emplace_back(t.size(2), t.size(3));
    flat.push_back(t.flatten(2));
  }
  auto all = torch::cat(flat, 2);                              // B x no x A
  auto box_logits = all.slice(1, 0, 4 * reg_max_);             // B x 4R x A
  auto cls_logits = all.slice(1, 4 * reg_max_).transpose(1, 2);  // B x A x nc
  const auto opts = all.options().requires_grad(false);
  const AnchorGrid anchors = make_anchors(grid, strides_, opts);
  const int64_t num_anchors = anchors.points.size(0);

  auto anchor_grid = anchors.points / anchors.strides;  // grid units
  auto dist = dfl_expectation(box_logits, reg_max_);     // B x A x 4 (grid units)
  auto pred_boxes = torch::cat({anchor_grid.unsqueeze(0) - dist.slice(2, 0, 2),
                                anchor_grid.unsqueeze(0) + dist.slice(2, 2, 4)},
                               2);

  // targets to per-image pixel boxes
  std::vector<torch::Tensor> gt_labels(batch), gt_boxes(batch);
  auto tcpu = targets.to(torch::kCPU, torch::kFloat64);
  const double s = static_cast<double>(input_size_);
  for (int64_t b = 0; b < batch; ++b) {
    auto rows = tcpu.numel() ? tcpu.index({tcpu.select(1, 0) == b}) : tcpu.reshape({0, 6});
    auto cx = rows.select(1, 2) * s, cy = rows.select(1, 3) * s;
    auto w = rows.select(1, 4) * s, h = rows.select(1, 5) * s;
    gt_labels[b] = rows.select(1, 1).to(torch::kLong).to(all.device());
    gt_boxes[b] = torch::stack({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, 1)
                      .to(opts.dtype())
                      .to(all.device());
  }

  auto pd_boxes_px = (pred_boxes.detach() * anchors.strides.unsqueeze(0));
  auto assignment = assigner_.assign(torch::sigmoid(cls_logits.detach()), pd_boxes_px,
                                     anchors.points, gt_labels, gt_boxes);

  auto target_scores = assignment.target_scores;
  auto score_sum = std::max(target_scores.sum().item<double>(), 1.0);

  DetLossParts parts;
  parts.bce = bce_with_logits(cls_logits, target_scores).sum() / score_sum;

  auto fg = assignment.fg_mask;
  parts.num_foreground = fg.sum().item<int64_t>();
  if (parts.num_foreground > 0) {
    auto weight = target_scores.sum(-1).index({fg});  // F
    auto target_grid = assignment.target_boxes / anchors.strides.unsqueeze(0);
    auto pb = pred_boxes.index({fg});
    auto tb = target_grid.index({fg});
    parts.ciou = ((1 - ciou(pb, tb)) * weight).sum() / score_sum;

    auto ag = anchor_grid.unsqueeze(0).expand({batch, num_anchors, 2}).index({fg});
    auto target_ltrb = torch::cat({ag - tb.slice(1, 0, 2), tb.slice(1, 2, 4) - ag}, 1)
                           .clamp(0, static_cast<double>(reg_max_ - 1));
    auto logits_fg = box_logits.view({batch, 4, reg_max_, num_anchors})
                         .permute({0, 3, 1, 2})
                         .index({fg})
                         .reshape({-1, reg_max_});
    auto dfl = dfl_loss(logits_fg, target_ltrb.reshape({-1})).view({-1, 4}).mean(1);
    parts.dfl = (dfl * weight).sum() / score_sum;
  } else {
    parts.ciou = torch::zeros({}, all.options());
    parts.dfl = torch::zeros({}, all.options());
  }
  parts.total = coeffs_.bce * parts.bce + coeffs_.dfl * parts.dfl + coeffs_.ciou * parts.ciou;
  return parts;
}

SegmentationLoss::SegmentationLoss(LossCoefficients coeffs) : coeffs_(coeffs) {
  coeffs_.validate();
}

SegLossParts SegmentationLoss::operator()(const torch::Tensor& logits,
                                          const torch::Tensor& mask) const {
  if (logits.dim() != 4 || logits.size(1) != 2) {
    throw ShapeError("segmentation loss expects B x 2 x H x W logits");
  }
  if (mask.dim() != 3 || mask.size(0) != logits.size(0) || mask.size(1) != logits.size(2) ||
      mask.size(2) != logits.size(3)) {
    throw ShapeError("segmentation target " + std::to_string(mask.size(-2)) + "x" +
                     std::to_string(mask.size(-1)) + " does not match logits " +
                     std::to_string(logits.size(2)) + "x" + std::to_string(logits.size(3)));
  }
  auto target = mask.to(logits.scalar_type());
  auto one_hot = torch::stack({1 - target, target}, 1);
  SegLossParts parts;
  parts.fl = focal_loss(logits, one_hot, coeffs_.focal_alpha, coeffs_.focal_gamma);
  parts.tl = tversky_loss(torch::sigmoid(logits.select(1, 1)), target, coeffs_.tversky_alpha,
                          coeffs_.tversky_beta);
  parts.total = coeffs_.fl * parts.fl + coeffs_.tl * parts.tl;
  return parts;
}

torch::Tensor total_loss(const torch::Tensor& det, const std::vector<torch::Tensor>& segs) {
  auto total = det;
  for (const auto& s : segs) total = total + s;
  return total;
}

bool LossBreakdown::finite() const {
  if (!std::isfinite(bce) || !std::isfinite(dfl) || !std::isfinite(ciou) || !std::isfinite(det) ||
      !std::isfinite(total)) {
    return false;
  }
  for (const auto* v : {&fl, &tl, &seg}) {
    for (double x : *v) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

std::string LossBreakdown::describe(const std::vector<std::string>& tasks) const {
  std::ostringstream os;
  os << "total=" << total << " det=" << det << " (bce=" << bce << " dfl=" << dfl
     << " ciou=" << ciou << ")";
  for (std::size_t i = 0; i < seg.size(); ++i) {
    os << " " << (i < tasks.size() ? tasks[i] : std::to_string(i)) << "=" << seg[i]
       << " (fl=" << fl[i] << " tl=" << tl[i] << ")";
  }
  return os.str();
}

MultiTaskLoss::MultiTaskLoss(const ModelConfig& cfg, LossCoefficients coeffs)
    : det_(cfg.nc_det, cfg.reg_max, cfg.strides, cfg.input_size, coeffs), seg_(coeffs) {}

LossResult MultiTaskLoss::operator()(const PredictionBundle& pred,
                                     const torch::Tensor& det_targets,
                                     const std::vector<torch::Tensor>& masks) const {
  if (masks.size() != pred.seg_masks.size()) {
    throw ShapeError("got " + std::to_string(masks.size()) + " mask targets for " +
                     std::to_string(pred.seg_masks.size()) + " segmentation outputs");
  }
  LossResult out;
  auto det = det_(pred.det.raw, det_targets);
  std::vector<torch::Tensor> seg_totals;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    auto s = seg_(pred.seg_masks[i], masks[i]);
    out.parts.fl.push_back(s.fl.item<double>());
    out.parts.tl.push_back(s.tl.item<double>());
    out.parts.seg.push_back(s.total.item<double>());
    seg_totals.push_back(s.total);
  }
  out.total = total_loss(det.total, seg_totals);
  out.parts.bce = det.bce.item<double>();
  out.parts.dfl = det.dfl.item<double>();
  out.parts.ciou = det.ciou.item<double>();
  out.parts.det = det.total.item<double>();
  out.parts.total = out.total.item<double>();
  return out;
}

}  // namespace mtp
