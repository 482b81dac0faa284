#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "mtp/errors.hpp"
#include "mtp/run.hpp"

using namespace mtp;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const char* env = std::getenv("MTP_TEST_TMP");
  fs::path root = env ? fs::path(env) : fs::temp_directory_path() / "mtp_tests";
  fs::path dir = root / ("run_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

RunConfig tiny_config(const fs::path& out) {
  RunConfig c;
  c.model.input_size = 64;
  c.data.synthetic_train = 4;
  c.data.synthetic_size = 64;
  c.optim.epochs = 2;
  c.optim.batch_size = 4;
  c.aug.enabled = false;
  c.out_dir = out.string();
  return c;
}

struct EnvGuard {
  explicit EnvGuard(const char* value) {
    if (value) setenv("MTP_DEVICE", value, 1);
    else unsetenv("MTP_DEVICE");
  }
  ~EnvGuard() { unsetenv("MTP_DEVICE"); }
};

// A trained tiny run shared by the val / predict / gates tests.
const fs::path& trained_run() {
  static fs::path dir;
  if (dir.empty()) {
    dir = scratch("shared");
    std::ostringstream log;
    run_train(tiny_config(dir), log);
  }
  return dir;
}

}  // namespace

// ---- config -----------------------------------------------------------------------

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c;
  c.optim.lr0 = 0.02;
  c.model.seg_tasks = {"lane"};
  c.recall_mode = RecallMode::floor;
  c.eval_interval = 5;
  auto back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(RunConfig, UnknownKeyNamed) {
  try {
    RunConfig::from_json({{"optim", {{"lr", 0.1}}}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("optim.lr"), std::string::npos) << e.what();
  }
  EXPECT_THROW(RunConfig::from_json({{"optim", {{"epochs", "ten"}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"eval_interval", 0}}), ConfigError);
}

TEST(RunConfig, PartialDocumentKeepsDefaults) {
  auto c = RunConfig::from_json({{"optim", {{"epochs", 7}}}});
  EXPECT_EQ(c.optim.epochs, 7);
  EXPECT_DOUBLE_EQ(c.optim.lr0, 0.01);
  EXPECT_EQ(c.model.seg_tasks, (std::vector<std::string>{"drivable", "lane"}));
}

TEST(RunConfig, LoadsCommentedFile) {
  auto dir = scratch("load");
  std::ofstream(dir / "c.json") << "{\n  // short run\n  \"optim\": {\"epochs\": 3}\n}\n";
  EXPECT_EQ(RunConfig::load(dir / "c.json").optim.epochs, 3);
  std::ofstream(dir / "bad.json") << "{ optim: ";
  EXPECT_THROW(RunConfig::load(dir / "bad.json"), ConfigError);
  EXPECT_THROW(RunConfig::load(dir / "absent.json"), ConfigError);
}

TEST(Overrides, DottedKeys) {
  auto j = RunConfig{}.to_json();
  apply_override(j, "optim.lr0=0.02");
  apply_override(j, "model.seg_tasks=lane");
  apply_override(j, "aug.enabled=false");
  apply_override(j, "out_dir=runs/x");
  apply_override(j, "fitness.map50=1");
  auto c = RunConfig::from_json(j);
  EXPECT_DOUBLE_EQ(c.optim.lr0, 0.02);
  EXPECT_EQ(c.model.seg_tasks, std::vector<std::string>{"lane"});
  EXPECT_FALSE(c.aug.enabled);
  EXPECT_EQ(c.out_dir, "runs/x");

  apply_override(j, "model.scale=s");
  EXPECT_DOUBLE_EQ(RunConfig::from_json(j).model.width_multiple, 0.5);

  EXPECT_THROW(apply_override(j, "optim.learning_rate=1"), ConfigError);
  EXPECT_THROW(apply_override(j, "optim.lr0"), ConfigError);
  EXPECT_THROW(apply_override(j, "=3"), ConfigError);
}

TEST(Device, FromEnvironment) {
  {
    EnvGuard g(nullptr);
    EXPECT_TRUE(device_from_env().is_cpu());
  }
  {
    EnvGuard g("cpu");
    EXPECT_TRUE(device_from_env().is_cpu());
  }
  {
    EnvGuard g("quantum");
    EXPECT_THROW(device_from_env(), ConfigError);
  }
  if (!torch::cuda::is_available()) {
    EnvGuard g("cuda:0");
    EXPECT_THROW(device_from_env(), ConfigError);
  }
}

TEST(Device, InvalidDeviceFailsCommands) {
  EnvGuard g("tpu7");
  auto dir = scratch("baddevice");
  std::ostringstream log;
  EXPECT_THROW(run_train(tiny_config(dir), log), ConfigError);
}

// ---- train / resume --------------------------------------------------------------

TEST(Train, TinyRunWritesArtifacts) {
  const auto& dir = trained_run();
  EXPECT_TRUE(fs::exists(dir / "config.json"));
  EXPECT_TRUE(fs::exists(dir / "weights" / "last.pt"));
  EXPECT_TRUE(fs::exists(dir / "weights" / "best.pt"));
  EXPECT_TRUE(fs::exists(dir / "loss_curve.png"));
  EXPECT_EQ(count_lines(dir / "metrics.csv"), 3);  // header + 2 epochs
  auto snap = RunConfig::load(dir / "config.json");
  EXPECT_EQ(snap.optim.epochs, 2);
}

TEST(Train, CountersMatchBatches) {
  auto dir = scratch("counters");
  auto cfg = tiny_config(dir);
  cfg.optim.batch_size = 3;  // 4 images -> 2 batches per epoch
  std::ostringstream log;
  auto out = run_train(cfg, log);
  ASSERT_EQ(out.epochs.size(), 2u);
  EXPECT_EQ(out.counters.batches, 4);
  EXPECT_EQ(out.counters.forwards, 4);
  EXPECT_EQ(out.counters.backwards, 4);
  EXPECT_EQ(out.fit.last_epoch, 2);
  EXPECT_NE(log.str().find("epoch 2/2"), std::string::npos) << log.str();
}

TEST(Train, SameSeedSameFirstEpochLoss) {
  auto a = scratch("seed_a"), b = scratch("seed_b");
  auto ca = tiny_config(a), cb = tiny_config(b);
  ca.optim.epochs = cb.optim.epochs = 1;
  ca.aug.enabled = cb.aug.enabled = true;
  ca.seed = cb.seed = 3;
  std::ostringstream log;
  auto ra = run_train(ca, log);
  auto rb = run_train(cb, log);
  EXPECT_NEAR(ra.epochs[0].mean.total, rb.epochs[0].mean.total, 1e-6);
}

TEST(Train, ResumeContinuesEpochNumbering) {
  auto dir = scratch("resume");
  auto cfg = tiny_config(dir);
  std::ostringstream log;
  run_train(cfg, log);
  auto out = resume_train(dir, log, 3);
  ASSERT_EQ(out.epochs.size(), 1u);
  EXPECT_EQ(out.epochs[0].epoch, 3);
  EXPECT_EQ(out.fit.last_epoch, 3);
  EXPECT_EQ(count_lines(dir / "metrics.csv"), 4);
  EXPECT_NE(log.str().find("resuming at epoch 3"), std::string::npos);
}

TEST(Train, SingleTaskRun) {
  auto dir = scratch("single");
  auto cfg = tiny_config(dir);
  cfg.optim.epochs = 1;
  cfg.model.seg_tasks = {"drivable"};
  std::ostringstream log;
  run_train(cfg, log);
  std::ifstream in(dir / "metrics.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_NE(header.find("drivable_miou"), std::string::npos);
  EXPECT_EQ(header.find("lane"), std::string::npos) << header;
}

TEST(Train, EvalIntervalReusesLastMetrics) {
  auto dir = scratch("interval");
  auto cfg = tiny_config(dir);
  cfg.optim.epochs = 3;
  cfg.eval_interval = 10;
  std::ostringstream log;
  auto out = run_train(cfg, log);
  EXPECT_EQ(out.fit.last_epoch, 3);
}

// ---- val / predict / bench / gates ----------------------------------------------

TEST(Val, DeterministicMetricFiles) {
  const auto& run = trained_run();
  auto a = scratch("val_a"), b = scratch("val_b");
  ValOptions o;
  o.weights = run / "weights" / "best.pt";
  o.data = run / "data";
  o.split = "train";
  std::ostringstream log;
  o.out_dir = a;
  auto ra = run_val(o, log);
  o.out_dir = b;
  run_val(o, log);
  EXPECT_EQ(ra.images, 4);
  EXPECT_EQ(slurp(a / "val_metrics.txt"), slurp(b / "val_metrics.txt"));
  EXPECT_EQ(slurp(a / "pr_curve.csv"), slurp(b / "pr_curve.csv"));
  EXPECT_FALSE(slurp(a / "val_metrics.txt").empty());
}

TEST(Val, TaskMismatchIsDataError) {
  const auto& run = trained_run();
  auto data = scratch("val_mismatch");
  SyntheticOptions so;
  so.train_count = 2;
  so.width = so.height = 64;
  generate_synthetic(data, so);
  fs::remove_all(data / "masks" / "lane");
  ValOptions o;
  o.weights = run / "weights" / "last.pt";
  o.data = data;
  o.split = "train";
  std::ostringstream log;
  try {
    run_val(o, log);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("lane"), std::string::npos) << e.what();
  }
}

TEST(Val, FpsLineOnlyWhenAsked) {
  const auto& run = trained_run();
  ValOptions o;
  o.weights = run / "weights" / "last.pt";
  o.data = run / "data";
  o.split = "train";
  std::ostringstream log;
  EXPECT_FALSE(run_val(o, log).fps.has_value());
  o.measure_fps = true;
  auto r = run_val(o, log);
  ASSERT_TRUE(r.fps.has_value());
  EXPECT_GT(*r.fps, 0.0);
}

TEST(Predict, WritesOverlaysAndSkipsUnreadable) {
  const auto& run = trained_run();
  auto out = scratch("predict");
  auto src = out / "src";
  fs::create_directories(src);
  for (const auto& e : fs::directory_iterator(run / "data" / "images" / "train")) {
    fs::copy_file(e.path(), src / e.path().filename());
  }
  std::ofstream(src / "broken.png") << "not an image";
  PredictOptions o;
  o.weights = run / "weights" / "last.pt";
  o.sources = {src};
  o.out_dir = out;
  std::ostringstream log;
  EXPECT_EQ(run_predict(o, log), 4u);
  const auto dump = nlohmann::json::parse(slurp(out / "predictions" / "predictions.json"));
  ASSERT_EQ(dump["images"].size(), 4u);
  const auto& first = dump["images"][0];
  EXPECT_EQ(first["width"], 64);
  EXPECT_TRUE(first["masks"].contains("drivable"));
  EXPECT_TRUE(first["masks"].contains("lane"));
  int64_t total = 0;
  for (auto c : first["masks"]["lane"]["counts"]) total += c.get<int64_t>();
  EXPECT_EQ(total, 64 * 64);
  for (const auto& d : first["detections"]) EXPECT_GT(d["score"].get<double>(), 0.25);
  int overlays = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(out / "predictions" / "overlays")) {
    ++overlays;
  }
  EXPECT_EQ(overlays, 4);
}

TEST(Bench, SummariesPerBatchSize) {
  auto out = scratch("bench");
  BenchOptions o;
  o.batch_sizes = {1, 2};
  o.input_size = 64;
  o.warmup = 1;
  o.iters = 2;
  o.runs = 2;
  o.out_dir = out;
  std::ostringstream log;
  auto res = run_bench(o, log);
  ASSERT_EQ(res.size(), 2u);
  EXPECT_EQ(res[1].batch_size, 2);
  EXPECT_EQ(res[1].runs.size(), 2u);
  EXPECT_GT(res[0].mean_fps, 0.0);
  EXPECT_GE(res[0].spread, 0.0);
  EXPECT_EQ(count_lines(out / "bench.txt"), 2);
  o.runs = 0;
  EXPECT_THROW(run_bench(o, log), ConfigError);
}

TEST(Gates, FreshModelTable) {
  std::ostringstream log;
  auto gates = run_gates({}, log);
  ASSERT_EQ(gates.size(), 8u);
  for (const auto& g : gates) {
    EXPECT_NEAR(g.gate, 0.99331, 1e-5);
    EXPECT_TRUE(g.concat);
  }
  const std::string table = log.str();
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 9);
}

TEST(Gates, EditedCheckpointShowsPassthrough) {
  const auto& run = trained_run();
  auto ckpt = load_checkpoint(run / "weights" / "last.pt");
  auto gates = ckpt.model->gates();
  // gate names carry the task; parameter paths do not
  std::string param = gates[2].name;
  param.erase(param.find(".drivable."), std::string(".drivable").size());
  {
    torch::NoGradGuard ng;
    ckpt.model->named_parameters(true)[param + ".weight"].fill_(-1.0);
  }
  auto edited = scratch("gates") / "edited.pt";
  save_checkpoint(edited, *ckpt.model, ckpt.meta);
  std::ostringstream log;
  auto after = run_gates(edited, log);
  ASSERT_EQ(after.size(), 8u);
  EXPECT_DOUBLE_EQ(after[2].weight, -1.0);
  EXPECT_FALSE(after[2].concat);
  EXPECT_TRUE(after[1].concat);
  EXPECT_NE(log.str().find("passthrough"), std::string::npos);
}
