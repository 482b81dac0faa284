#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <random>

#include "mtp/data.hpp"
#include "mtp/errors.hpp"
#include "mtp/metrics.hpp"
#include "mtp/model.hpp"
#include "oracles.hpp"

using namespace mtp;
namespace fs = std::filesystem;

namespace {

Detection det(float x1, float y1, float x2, float y2, float score) {
  return {{x1, y1, x2, y2}, score, 0};
}

PRCurve curve(std::vector<std::pair<double, bool>> pts, int64_t gt) {
  PRCurve c;
  for (auto [s, tp] : pts) c.add(s, tp);
  c.num_gt = gt;
  return c;
}

cv::Mat square_mask(int n, cv::Rect fg) {
  cv::Mat m = cv::Mat::zeros(n, n, CV_8UC1);
  m(fg) = 1;
  return m;
}

fs::path scratch(const std::string& name) {
  const char* env = std::getenv("MTP_TEST_TMP");
  fs::path root = env ? fs::path(env) : fs::temp_directory_path() / "mtp_tests";
  fs::path dir = root / ("metrics_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

// ---- matching / AP -------------------------------------------------------------

TEST(Match, ExactDetectionIsTruePositive) {
  auto flags = match_detections({det(0, 0, 10, 10, 0.9f)}, {Box{0, 0, 10, 10}});
  ASSERT_EQ(flags.size(), 1u);
  EXPECT_TRUE(flags[0]);
}

TEST(Match, GroundTruthConsumedOnce) {
  auto flags = match_detections({det(0, 0, 10, 10, 0.6f), det(0, 0, 10, 11, 0.9f)},
                                {Box{0, 0, 10, 10}});
  EXPECT_FALSE(flags[0]);
  EXPECT_TRUE(flags[1]);
}

TEST(Match, ThresholdBoundary) {
  // 49 / 100 overlap -> IoU 0.49
  auto below = match_detections({det(0, 0, 10, 4.9f, 0.9f)}, {Box{0, 0, 10, 10}});
  EXPECT_FALSE(below[0]);
  auto at = match_detections({det(0, 0, 10, 5, 0.9f)}, {Box{0, 0, 10, 10}});
  EXPECT_TRUE(at[0]);
}

TEST(AveragePrecision, Examples) {
  EXPECT_DOUBLE_EQ(*average_precision(curve({{0.9, true}}, 1)), 1.0);
  EXPECT_NEAR(*average_precision(curve({{0.9, true}, {0.8, false}, {0.7, true}}, 2)),
              0.5 * 1.0 + 0.5 * (2.0 / 3.0), 1e-12);
  EXPECT_NEAR(*average_precision(curve({{0.9, true}, {0.8, false}, {0.7, true}}, 2)), 0.8333, 1e-4);
  EXPECT_DOUBLE_EQ(*average_precision(curve({{0.9, false}, {0.5, false}}, 3)), 0.0);
}

TEST(AveragePrecision, EmptyClassHandling) {
  EXPECT_FALSE(average_precision(curve({}, 0)).has_value());
  EXPECT_DOUBLE_EQ(*average_precision(curve({{0.3, false}}, 0)), 0.0);
  EXPECT_DOUBLE_EQ(*average_precision(curve({}, 4)), 0.0);
}

TEST(AveragePrecision, MatchesBruteForceOnRandomCurves) {
  std::mt19937 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> n_det(1, 25), n_gt(1, 15), score(0, 20);
    const int gt = n_gt(rng);
    std::vector<std::pair<double, bool>> pts;
    int tps = 0;
    for (int i = 0, n = n_det(rng); i < n; ++i) {
      const bool tp = tps < gt && (rng() % 2 == 0);
      tps += tp;
      pts.emplace_back(score(rng) / 20.0, tp);  // coarse scores force ties
    }
    const double got = *average_precision(curve(pts, gt));
    EXPECT_NEAR(got, oracle::ap(pts, gt), 1e-9) << "trial " << trial;
  }
}

TEST(AveragePrecision, InvariantUnderMonotoneScoreMaps) {
  std::mt19937 rng(37);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::pair<double, bool>> pts, mapped;
  for (int i = 0; i < 40; ++i) {
    const double s = u(rng);
    const bool tp = i % 3 != 0;
    pts.emplace_back(s, tp);
    mapped.emplace_back(std::exp(4 * s) + 7, tp);
  }
  EXPECT_NEAR(*average_precision(curve(pts, 30)), *average_precision(curve(mapped, 30)), 1e-12);
  EXPECT_NEAR(recall_at_best_f1(curve(pts, 30)), recall_at_best_f1(curve(mapped, 30)), 1e-12);
}

TEST(AveragePrecision, MergeIsOrderIndependent) {
  auto a = curve({{0.9, true}, {0.4, false}}, 2);
  auto b = curve({{0.7, true}, {0.2, true}}, 3);
  PRCurve ab = a, ba = b;
  ab.merge(b);
  ba.merge(a);
  EXPECT_EQ(ab.num_gt, 5);
  EXPECT_DOUBLE_EQ(*average_precision(ab), *average_precision(ba));
}

TEST(Recall, Examples) {
  EXPECT_DOUBLE_EQ(recall_at_best_f1(curve({{0.9, true}, {0.8, true}}, 2)), 1.0);
  EXPECT_DOUBLE_EQ(recall_at_best_f1(curve({{0.9, false}, {0.8, false}}, 2)), 0.0);
  EXPECT_DOUBLE_EQ(recall_at_best_f1(curve({{0.9, true}, {0.8, false}, {0.7, true}}, 2)), 1.0);
}

TEST(Recall, BestF1MatchesExhaustiveSweep) {
  std::mt19937 rng(41);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::pair<double, bool>> pts;
    for (int i = 0; i < 20; ++i) pts.emplace_back(u(rng), u(rng) < 0.5);
    const int gt = 15;
    double best_f1 = -1, best_recall = 0;
    std::vector<double> thresholds;
    for (auto& p : pts) thresholds.push_back(p.first);
    std::sort(thresholds.rbegin(), thresholds.rend());
    for (double t : thresholds) {
      int tp = 0, n = 0;
      for (auto& p : pts) {
        if (p.first >= t) {
          ++n;
          tp += p.second;
        }
      }
      const double r = double(tp) / gt, pr = double(tp) / n;
      const double f1 = tp == 0 ? 0.0 : 2 * pr * r / (pr + r);
      if (f1 > best_f1 + 1e-15) {
        best_f1 = f1;
        best_recall = r;
      }
    }
    EXPECT_NEAR(recall_at_best_f1(curve(pts, gt)), best_recall, 1e-12) << trial;
  }
}

TEST(Recall, FloorModeKeepsEverything) {
  auto c = curve({{0.9, true}, {0.1, false}, {0.05, true}}, 4);
  EXPECT_DOUBLE_EQ(recall_at_floor(c), 0.5);
  EXPECT_EQ(parse_recall_mode("floor"), RecallMode::floor);
  EXPECT_EQ(to_string(RecallMode::best_f1), "best_f1");
  EXPECT_THROW(parse_recall_mode("max"), ConfigError);
}

// ---- pixel metrics ---------------------------------------------------------------

TEST(SegIou, Examples) {
  cv::Mat a = square_mask(10, {0, 0, 10, 10});
  std::vector<cv::Mat> p{a}, g{a};
  EXPECT_DOUBLE_EQ(seg_iou(p, g), 1.0);

  std::vector<cv::Mat> left{square_mask(10, {0, 0, 5, 10})}, right{square_mask(10, {5, 0, 5, 10})};
  EXPECT_DOUBLE_EQ(seg_iou(left, right), 0.0);

  std::vector<cv::Mat> upper{square_mask(10, {0, 0, 10, 5})};
  EXPECT_NEAR(seg_iou(upper, left), 0.25 / 0.75, 1e-12);
}

TEST(SegIou, GlobalAccumulationNotPerImage) {
  std::vector<cv::Mat> p{square_mask(10, {0, 0, 10, 10}), square_mask(10, {0, 0, 1, 1})};
  std::vector<cv::Mat> g{square_mask(10, {0, 0, 10, 10}), square_mask(10, {5, 5, 1, 1})};
  // per-image mean would be (1 + 0) / 2
  EXPECT_NEAR(seg_iou(p, g), 100.0 / 102.0, 1e-12);
}

TEST(SegIou, ResolutionMismatchIsShapeError) {
  std::vector<cv::Mat> p{cv::Mat::zeros(8, 8, CV_8UC1)}, g{cv::Mat::zeros(8, 9, CV_8UC1)};
  EXPECT_THROW(seg_iou(p, g), ShapeError);
}

TEST(MiouDrivable, Examples) {
  std::vector<cv::Mat> gt{square_mask(10, {0, 0, 5, 10})};
  EXPECT_DOUBLE_EQ(miou_drivable(gt, gt), 1.0);
  std::vector<cv::Mat> all{square_mask(10, {0, 0, 10, 10})};
  EXPECT_DOUBLE_EQ(miou_drivable(all, gt), 0.25);
}

TEST(MiouDrivable, SymmetricUnderLabelSwap) {
  cv::Mat p(32, 32, CV_8UC1), g(32, 32, CV_8UC1);
  cv::randu(p, 0, 2);
  cv::randu(g, 0, 2);
  std::vector<cv::Mat> ps{p}, gs{g}, pi{1 - p}, gi{1 - g};
  EXPECT_NEAR(miou_drivable(ps, gs), miou_drivable(pi, gi), 1e-12);
}

TEST(LineAccuracy, Examples) {
  EXPECT_EQ(line_accuracy({80, 10, 90, 20}), 0.85);
  EXPECT_DOUBLE_EQ(line_accuracy({50, 0, 50, 0}), 1.0);
  EXPECT_DOUBLE_EQ(line_accuracy({0, 0, 90, 10}), 0.5);
  EXPECT_THROW(line_accuracy({0, 5, 95, 0}), DataError);
  EXPECT_THROW(line_accuracy({5, 0, 0, 5}), DataError);
}

TEST(LineAccuracy, RandomPredictorConvergesToHalf) {
  cv::RNG rng(1234);
  cv::Mat gt(1000, 1000, CV_8UC1), pr(1000, 1000, CV_8UC1), u(1000, 1000, CV_32F);
  rng.fill(u, cv::RNG::UNIFORM, 0, 1);
  gt = u < 0.05;
  gt /= 255;
  for (double q : {0.1, 0.5, 0.9}) {
    rng.fill(u, cv::RNG::UNIFORM, 0, 1);
    pr = u < q;
    pr /= 255;
    EXPECT_NEAR(line_accuracy(confusion(pr, gt)), 0.5, 0.02) << q;
  }
}

TEST(Confusion, OrderInvariant) {
  std::vector<cv::Mat> p, g;
  for (int i = 0; i < 5; ++i) {
    cv::Mat a(16, 16, CV_8UC1), b(16, 16, CV_8UC1);
    cv::randu(a, 0, 2);
    cv::randu(b, 0, 2);
    p.push_back(a);
    g.push_back(b);
  }
  auto forward = confusion(p, g);
  std::reverse(p.begin(), p.end());
  std::reverse(g.begin(), g.end());
  EXPECT_EQ(confusion(p, g), forward);
  EXPECT_EQ(forward.total(), 5 * 256);
}

// ---- evaluation / bench ------------------------------------------------------------

TEST(Evaluate, ReportKeysAndTaskMismatch) {
  auto root = scratch("eval");
  SyntheticOptions o;
  o.train_count = 3;
  o.width = o.height = 64;
  generate_synthetic(root, o);
  ModelConfig cfg = ModelConfig::for_scale(Scale::n);
  cfg.input_size = 64;
  auto model = build(cfg);
  DatasetSpec spec;
  spec.root = root;
  Dataset ds(spec, 64);
  auto report = evaluate(*model, ds);
  EXPECT_EQ(report.images, 3);
  auto flat = report.flat();
  for (const char* k : {"map50", "recall", "drivable_iou", "drivable_miou", "drivable_acc",
                        "lane_iou", "lane_miou", "lane_acc"}) {
    EXPECT_TRUE(flat.count(k)) << k;
  }
  EXPECT_FALSE(flat.count("fps"));
  EXPECT_TRUE(model->is_training());  // caller mode restored

  auto again = evaluate(*model, ds);
  EXPECT_EQ(again.flat(), flat);

  spec.tasks = {"drivable"};
  Dataset one(spec, 64);
  EXPECT_THROW(evaluate(*model, one), DataError);
}

TEST(Bench, ZeroTimedIterationsRejected) {
  ModelConfig cfg = ModelConfig::for_scale(Scale::n);
  cfg.input_size = 64;
  auto model = build(cfg);
  EXPECT_THROW(benchmark_fps(*model, 1, 0, 0, 64), ConfigError);
  auto r = benchmark_fps(*model, 2, 1, 3, 64);
  EXPECT_GT(r.fps, 0.0);
  EXPECT_EQ(r.batch_size, 2);
  EXPECT_EQ(r.timed_iters, 3);
  EXPECT_EQ(r.device, "cpu");
  EXPECT_NEAR(r.fps, 3 * 2 / r.seconds, 1e-6 * r.fps);
}
