#include "mtp/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mtp/errors.hpp"

namespace mtp {

std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<Box>& gts,
                                   double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<bool> tp(dets.size(), false);
  std::vector<char> used(gts.size(), 0);
  for (auto i : order) {
    double best = -1.0;
    std::size_t best_j = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[j]) continue;
      const double iou = box_iou(dets[i].box, gts[j]);
      if (iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best_j < gts.size() && best >= iou_threshold) {
      used[best_j] = 1;
      tp[i] = true;
    }
  }
  return tp;
}

void PRCurve::merge(const PRCurve& other) {
  points.insert(points.end(), other.points.begin(), other.points.end());
  num_gt += other.num_gt;
}

std::vector<std::pair<double, bool>> PRCurve::sorted() const {
  auto out = points;
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  return out;
}

std::optional<double> average_precision(const PRCurve& curve) {
  if (curve.num_gt == 0) {
    if (curve.points.empty()) return std::nullopt;
    return 0.0;
  }
  const auto pts = curve.sorted();
  std::vector<double> recall{0.0}, precision{0.0};
  int64_t tp = 0, fp = 0;
  for (const auto& [score, is_tp] : pts) {
    (is_tp ? tp : fp) += 1;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(curve.num_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  recall.push_back(1.0);
  precision.push_back(0.0);
  for (std::size_t i = precision.size() - 1; i > 0; --i) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0;
  for (std::size_t i = 1; i < recall.size(); ++i) {
    ap += (recall[i] - recall[i - 1]) * precision[i];
  }
  return ap;
}

double recall_at_best_f1(const PRCurve& curve) {
  if (curve.num_gt == 0) return 0.0;
  const auto pts = curve.sorted();
  int64_t tp = 0, fp = 0;
  double best_f1 = -1.0, best_recall = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    (pts[i].second ? tp : fp) += 1;
    // evaluate only once every detection sharing this score is in
    if (i + 1 < pts.size() && pts[i + 1].first == pts[i].first) continue;
    const double r = static_cast<double>(tp) / static_cast<double>(curve.num_gt);
    const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    if (f1 > best_f1) {
      best_f1 = f1;
      best_recall = r;
    }
  }
  return best_recall;
}

double recall_at_floor(const PRCurve& curve) {
  if (curve.num_gt == 0) return 0.0;
  int64_t tp = 0;
  for (const auto& p : curve.points) tp += p.second ? 1 : 0;
  return static_cast<double>(tp) / static_cast<double>(curve.num_gt);
}

RecallMode parse_recall_mode(const std::string& text) {
  if (text == "best_f1") return RecallMode::best_f1;
  if (text == "floor") return RecallMode::floor;
  throw ConfigError("unknown recall mode '" + text + "' (expected best_f1 or floor)");
}

std::string to_string(RecallMode mode) {
  return mode == RecallMode::best_f1 ? "best_f1" : "floor";
}

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  tn += o.tn;
  fn += o.fn;
  return *this;
}

ConfusionCounts confusion(const cv::Mat& pred, const cv::Mat& gt) {
  if (pred.size() != gt.size()) {
    throw ShapeError("prediction " + std::to_string(pred.cols) + "x" + std::to_string(pred.rows) +
                     " does not match label " + std::to_string(gt.cols) + "x" +
                     std::to_string(gt.rows));
  }
  CV_Assert(pred.type() == CV_8UC1 && gt.type() == CV_8UC1);
  ConfusionCounts c;
  for (int y = 0; y < pred.rows; ++y) {
    const auto* p = pred.ptr<uint8_t>(y);
    const auto* g = gt.ptr<uint8_t>(y);
    for (int x = 0; x < pred.cols; ++x) {
      const bool pp = p[x] != 0, gg = g[x] != 0;
      if (pp && gg) ++c.tp;
      else if (pp) ++c.fp;
      else if (gg) ++c.fn;
      else ++c.tn;
    }
  }
  return c;
}

ConfusionCounts confusion(std::span<const cv::Mat> preds, std::span<const cv::Mat> gts) {
  if (preds.size() != gts.size()) throw ShapeError("prediction and label counts differ");
  ConfusionCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) c += confusion(preds[i], gts[i]);
  return c;
}

double seg_iou(const ConfusionCounts& c, int cls) {
  const int64_t inter = cls == 1 ? c.tp : c.tn;
  const int64_t uni = inter + c.fp + c.fn;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double seg_iou(std::span<const cv::Mat> preds, std::span<const cv::Mat> gts, int cls) {
  return seg_iou(confusion(preds, gts), cls);
}

double miou_drivable(const ConfusionCounts& c) { return 0.5 * (seg_iou(c, 0) + seg_iou(c, 1)); }

double miou_drivable(std::span<const cv::Mat> preds, std::span<const cv::Mat> gts) {
  return miou_drivable(confusion(preds, gts));
}

double line_accuracy(const ConfusionCounts& c) {
  if (c.tp + c.fn == 0) throw DataError("line accuracy undefined: no positive pixels in the labels");
  if (c.tn + c.fp == 0) throw DataError("line accuracy undefined: no negative pixels in the labels");
  // (tp / P + tn / N) / 2 as one ratio of exact products: a single rounding
  const long double pos = c.tp + c.fn, neg = c.tn + c.fp;
  const long double num = static_cast<long double>(c.tp) * neg + static_cast<long double>(c.tn) * pos;
  return static_cast<double>(num / (2 * pos * neg));
}

std::map<std::string, double> EvalReport::flat() const {
  std::map<std::string, double> m{{"map50", map50}, {"recall", recall}};
  for (const auto& t : tasks) {
    m[t.task + "_iou"] = t.iou;
    m[t.task + "_miou"] = t.miou;
    m[t.task + "_acc"] = t.accuracy;
  }
  if (fps) m["fps"] = *fps;
  return m;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  char buf[160];
  os << "images: " << images << "\n";
  std::snprintf(buf, sizeof(buf), "recall: %.6f\nmap50: %.6f\n", recall, map50);
  os << buf;
  for (const auto& t : tasks) {
    std::snprintf(buf, sizeof(buf), "%s.iou: %.6f\n%s.miou: %.6f\n%s.accuracy: %.6f\n",
                  t.task.c_str(), t.iou, t.task.c_str(), t.miou, t.task.c_str(), t.accuracy);
    os << buf;
    std::snprintf(buf, sizeof(buf), "%s.counts: tp=%lld fp=%lld tn=%lld fn=%lld\n", t.task.c_str(),
                  static_cast<long long>(t.counts.tp), static_cast<long long>(t.counts.fp),
                  static_cast<long long>(t.counts.tn), static_cast<long long>(t.counts.fn));
    os << buf;
  }
  if (fps) {
    std::snprintf(buf, sizeof(buf), "fps: %.3f\n", *fps);
    os << buf;
  }
  os << "per_class_ap:\n";
  for (const auto& [cls, ap] : ap_per_class) {
    const auto& curve = curves.at(cls);
    std::snprintf(buf, sizeof(buf), "  class %d: ap50=%.6f gt=%lld dets=%zu\n", cls, ap,
                  static_cast<long long>(curve.num_gt), curve.points.size());
    os << buf;
  }
  return os.str();
}

namespace {

std::vector<Box> boxes_of(const Sample& s, int cls) {
  std::vector<Box> out;
  for (const auto& o : s.objects) {
    if (o.cls == cls) out.push_back(o.box);
  }
  return out;
}

}  // namespace

EvalReport evaluate(MultiTaskNetImpl& model, const Dataset& dataset, const EvalOptions& options,
                    const torch::Device& device) {
  const bool was_training = model.is_training();
  model.eval();
  torch::NoGradGuard no_grad;

  const auto& cfg = model.config();
  const auto& tasks = cfg.seg_tasks;
  if (tasks != dataset.spec().tasks) {
    std::string a, b;
    for (const auto& t : tasks) a += (a.empty() ? "" : ",") + t;
    for (const auto& t : dataset.spec().tasks) b += (b.empty() ? "" : ",") + t;
    throw DataError("model tasks [" + a + "] do not match dataset tasks [" + b + "]");
  }

  EvalReport report;
  std::vector<ConfusionCounts> counts(tasks.size());
  for (int c = 0; c < cfg.nc_det; ++c) report.curves[c] = PRCurve{};

  const auto batches = epoch_batches(dataset.size(), static_cast<std::size_t>(options.batch_size),
                                     0, 0, false);
  for (const auto& idx : batches) {
    std::vector<Sample> samples;
    for (auto i : idx) samples.push_back(dataset.at(i));
    auto batch = collate(samples).to(device);
    auto pred = model.forward(batch.images);
    auto decoded = pred.det.decoded.to(torch::kCPU);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const Sample& s = samples[b];
      const auto dets = postprocess_detections(decoded[static_cast<int64_t>(b)], options.profile,
                                               options.max_det);
      for (int c = 0; c < cfg.nc_det; ++c) {
        std::vector<Detection> dc;
        for (const auto& d : dets) {
          if (d.cls == c) dc.push_back(d);
        }
        const auto gts = boxes_of(s, c);
        const auto flags = match_detections(dc, gts, options.match_iou);
        auto& curve = report.curves[c];
        curve.num_gt += static_cast<int64_t>(gts.size());
        for (std::size_t k = 0; k < dc.size(); ++k) curve.add(dc[k].score, flags[k]);
      }
      for (std::size_t t = 0; t < tasks.size(); ++t) {
        const cv::Mat mask =
            binarize_mask(pred.seg_masks[t][static_cast<int64_t>(b)].to(torch::kCPU), s.masks[t].size());
        counts[t] += confusion(mask, s.masks[t]);
      }
      ++report.images;
    }
  }

  double ap_sum = 0.0, recall_sum = 0.0;
  int used = 0;
  for (const auto& [c, curve] : report.curves) {
    const auto ap = average_precision(curve);
    if (!ap) continue;
    report.ap_per_class[c] = *ap;
    ap_sum += *ap;
    recall_sum += options.recall_mode == RecallMode::best_f1 ? recall_at_best_f1(curve)
                                                             : recall_at_floor(curve);
    ++used;
  }
  if (used > 0) {
    report.map50 = ap_sum / used;
    report.recall = recall_sum / used;
  }
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    TaskScores ts;
    ts.task = tasks[t];
    ts.counts = counts[t];
    ts.iou = seg_iou(counts[t], 1);
    ts.miou = miou_drivable(counts[t]);
    ts.accuracy = line_accuracy(counts[t]);
    report.tasks.push_back(ts);
  }
  if (was_training) model.train();
  return report;
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << report.to_text();
}

void write_pr_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "class,score,recall,precision\n";
  char buf[128];
  for (const auto& [cls, curve] : report.curves) {
    int64_t tp = 0, fp = 0;
    for (const auto& [score, is_tp] : curve.sorted()) {
      (is_tp ? tp : fp) += 1;
      const double r = curve.num_gt ? static_cast<double>(tp) / curve.num_gt : 0.0;
      const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
      std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f\n", cls, score, r, p);
      out << buf;
    }
  }
}

BenchResult benchmark_fps(MultiTaskNetImpl& model, int64_t batch_size, int64_t warmup_iters,
                          int64_t timed_iters, int64_t input_size, const torch::Device& device) {
  if (timed_iters <= 0) throw ConfigError("benchmark needs at least one timed iteration");
  if (batch_size <= 0) throw ConfigError("benchmark batch size must be positive");
  const bool was_training = model.is_training();
  model.eval();
  torch::NoGradGuard no_grad;
  torch::manual_seed(0);
  auto x = torch::rand({batch_size, 3, input_size, input_size}).to(device);
  auto sync = [&] {
    if (device.is_cuda()) torch::cuda::synchronize();
  };
  for (int64_t i = 0; i < warmup_iters; ++i) model.forward(x);
  sync();
  const auto t0 = std::chrono::steady_clock::now();
  for (int64_t i = 0; i < timed_iters; ++i) model.forward(x);
  sync();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (was_training) model.train();
  BenchResult r;
  r.batch_size = batch_size;
  r.input_size = input_size;
  r.timed_iters = timed_iters;
  r.seconds = secs;
  r.fps = static_cast<double>(timed_iters * batch_size) / secs;
  r.device = device.str();
  return r;
}

}  // namespace mtp
