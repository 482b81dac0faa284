#pragma once

// Independent scalar reference implementations used by the unit and
// acceptance tests. Written from the loss definitions with plain doubles and
// loops, sharing no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "mtp/postprocess.hpp"

namespace oracle {

inline double bce(double p, double y) {
  const double lp = std::log(std::max(p, 1e-12));
  const double lq = std::log(std::max(1.0 - p, 1e-12));
  return -(y * lp + (1.0 - y) * lq);
}

inline double bce_mean(const std::vector<double>& p, const std::vector<double>& y) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += bce(p[i], y[i]);
  return s / static_cast<double>(p.size());
}

/// -[(y_r - y) log p_l + (y - y_l) log p_r], bins l = floor(y), r = l + 1.
inline double dfl(const std::vector<double>& logits, double y) {
  const int n = static_cast<int>(logits.size());
  y = std::clamp(y, 0.0, static_cast<double>(n - 1));
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0;
  for (double v : logits) z += std::exp(v - mx);
  auto logp = [&](int k) { return logits[k] - mx - std::log(z); };
  int l = static_cast<int>(std::floor(y));
  if (l > n - 2) l = n - 2;
  const int r = l + 1;
  return -((r - y) * logp(l) + (y - l) * logp(r));
}

struct B {
  double x1, y1, x2, y2;
};

/// Complete IoU; widths/heights floored at 1e-7 and 1e-7 added to c^2 and
/// the alpha denominator.
inline double ciou(B p, B g) {
  const double eps = 1e-7;
  const double pw = std::max(p.x2 - p.x1, eps), ph = std::max(p.y2 - p.y1, eps);
  const double gw = std::max(g.x2 - g.x1, eps), gh = std::max(g.y2 - g.y1, eps);
  const double iw = std::max(0.0, std::min(p.x2, g.x2) - std::max(p.x1, g.x1));
  const double ih = std::max(0.0, std::min(p.y2, g.y2) - std::max(p.y1, g.y1));
  const double inter = iw * ih;
  const double iou = inter / (pw * ph + gw * gh - inter);
  const double cx = std::max(p.x2, g.x2) - std::min(p.x1, g.x1);
  const double cy = std::max(p.y2, g.y2) - std::min(p.y1, g.y1);
  const double c2 = cx * cx + cy * cy + eps;
  const double dx = (p.x1 + p.x2) / 2 - (g.x1 + g.x2) / 2;
  const double dy = (p.y1 + p.y2) / 2 - (g.y1 + g.y2) / 2;
  const double rho2 = dx * dx + dy * dy;
  const double d = std::atan(gw / gh) - std::atan(pw / ph);
  const double v = 4.0 / (std::numbers::pi * std::numbers::pi) * d * d;
  const double alpha = v / ((1.0 - iou) + v + eps);
  return iou - (rho2 / c2 + alpha * v);
}

inline double ciou_loss(B p, B g) { return 1.0 - ciou(p, g); }

inline double focal(double logit, double t, double alpha, double gamma) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  const double pt = t * p + (1.0 - t) * (1.0 - p);
  return -alpha * std::pow(1.0 - pt, gamma) * std::log(pt);
}

inline double focal_mean(const std::vector<double>& x, const std::vector<double>& t, double alpha,
                         double gamma) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += focal(x[i], t[i], alpha, gamma);
  return s / static_cast<double>(x.size());
}

inline double tversky(const std::vector<double>& p, const std::vector<double>& y, double a,
                      double b, double eps = 1e-7) {
  double tp = 0, fn = 0, fp = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    tp += p[i] * y[i];
    fn += (1 - p[i]) * y[i];
    fp += p[i] * (1 - y[i]);
  }
  return 1.0 - (tp + eps) / (tp + a * fn + b * fp + eps);
}

inline double iou(const mtp::Box& a, const mtp::Box& b) {
  const double iw = std::max(0.0, double(std::min(a.x2, b.x2)) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, double(std::min(a.y2, b.y2)) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double ua = double(a.x2 - a.x1) * (a.y2 - a.y1) + double(b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return ua > 0 ? inter / ua : 0.0;
}

/// Repeatedly takes the best remaining box (lowest index on ties) and drops
/// same-class boxes overlapping it by more than the threshold.
inline std::vector<mtp::Detection> nms(const std::vector<mtp::Detection>& dets, double thr) {
  std::vector<bool> alive(dets.size(), true);
  std::vector<mtp::Detection> out;
  for (;;) {
    int best = -1;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (alive[i] && (best < 0 || dets[i].score > dets[best].score)) best = static_cast<int>(i);
    }
    if (best < 0) break;
    out.push_back(dets[best]);
    alive[best] = false;
    for (std::size_t j = 0; j < dets.size(); ++j) {
      if (alive[j] && dets[j].cls == dets[best].cls && iou(dets[best].box, dets[j].box) > thr) {
        alive[j] = false;
      }
    }
  }
  return out;
}

/// Area under the precision envelope: at each recall step r_k the precision
/// is the best precision reached at any recall >= r_k.
inline double ap(std::vector<std::pair<double, bool>> pts, int num_gt) {
  std::stable_sort(pts.begin(), pts.end(), [](auto& a, auto& b) { return a.first > b.first; });
  std::vector<double> rec, prec;
  int tp = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    tp += pts[i].second;
    rec.push_back(static_cast<double>(tp) / num_gt);
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  double area = 0, prev_r = 0;
  for (std::size_t k = 0; k < rec.size(); ++k) {
    if (rec[k] <= prev_r) continue;
    double best = 0;
    for (std::size_t j = 0; j < rec.size(); ++j) {
      if (rec[j] >= rec[k]) best = std::max(best, prec[j]);
    }
    area += (rec[k] - prev_r) * best;
    prev_r = rec[k];
  }
  return area;
}

}  // namespace oracle
