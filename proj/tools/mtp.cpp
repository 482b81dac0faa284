// mtp: train, evaluate, predict, benchmark, synthesize data and inspect gates.
//
// Exit codes: 0 ok, 1 usage / config error, 2 data error, 3 numerical failure.

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

#include "mtp/errors.hpp"
#include "mtp/run.hpp"

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Multi-task driving perception: vehicles, drivable area and lane lines"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  std::string config_path, data, scale, seg_tasks, out_dir, resume;
  std::vector<std::string> overrides;
  int epochs = 0, batch = 0, imgsz = 0;
  int64_t seed = -1;
  train->add_option("--config", config_path, "JSON run config");
  train->add_option("--set", overrides, "Override a config key, e.g. optim.lr0=0.02")->take_all();
  train->add_option("--data", data, "Dataset root or 'synthetic'");
  train->add_option("--scale", scale, "Model scale (n or s)");
  train->add_option("--epochs", epochs, "Maximum epochs");
  train->add_option("--batch", batch, "Batch size");
  train->add_option("--imgsz", imgsz, "Square input size");
  train->add_option("--seg-tasks", seg_tasks, "Comma-separated segmentation tasks");
  train->add_option("--seed", seed, "Random seed");
  train->add_option("--out", out_dir, "Run directory");
  train->add_option("--resume", resume, "Resume the run in this directory");

  // val
  auto* val = app.add_subcommand("val", "Evaluate a checkpoint");
  mtp::ValOptions vopts;
  std::string recall_mode = "best_f1";
  val->add_option("--weights", vopts.weights, "Checkpoint")->required();
  val->add_option("--data", vopts.data, "Dataset root")->required();
  val->add_option("--split", vopts.split, "Split to evaluate");
  val->add_option("--out", vopts.out_dir, "Output directory")->required();
  val->add_option("--batch", vopts.batch_size, "Batch size");
  val->add_option("--recall-mode", recall_mode, "best_f1 or floor");
  val->add_flag("--fps", vopts.measure_fps, "Append a bs=1 FPS measurement");
  val->add_flag("!--strict", vopts.strict, "Skip unreadable samples instead of failing");

  // predict
  auto* predict = app.add_subcommand(
      "predict",
      "Run inference and write overlays. Uses conf 0.25 / NMS 0.45, so visual results may "
      "differ slightly from val, which uses conf 0.001 / NMS 0.6.");
  mtp::PredictOptions popts;
  std::vector<std::string> sources;
  predict->add_option("--weights", popts.weights, "Checkpoint")->required();
  predict->add_option("--source", sources, "Image files or directories")->required();
  predict->add_option("--out", popts.out_dir, "Output directory")->required();
  predict->add_option("--conf", popts.thresholds.conf, "Confidence threshold");
  predict->add_option("--iou", popts.thresholds.nms_iou, "NMS IoU threshold");

  // bench
  auto* bench = app.add_subcommand("bench", "Measure inference throughput");
  mtp::BenchOptions bopts;
  std::string bench_scale = "n", bench_batches = "1,32";
  bench->add_option("--weights", bopts.weights, "Checkpoint (default: fresh model)");
  bench->add_option("--scale", bench_scale, "Scale of the fresh model");
  bench->add_option("--batch", bench_batches, "Comma-separated batch sizes");
  bench->add_option("--imgsz", bopts.input_size, "Input size of the fresh model");
  bench->add_option("--warmup", bopts.warmup, "Warmup iterations");
  bench->add_option("--iters", bopts.iters, "Timed iterations");
  bench->add_option("--runs", bopts.runs, "Repeated measurements");
  bench->add_option("--out", bopts.out_dir, "Write bench.txt here");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic road-scene dataset");
  mtp::SyntheticOptions sopts;
  std::string synth_out;
  int synth_size = 640;
  synth->add_option("--out", synth_out, "Dataset root")->required();
  synth->add_option("--train", sopts.train_count, "Training scenes");
  synth->add_option("--val", sopts.val_count, "Validation scenes");
  synth->add_option("--size", synth_size, "Square image size");
  synth->add_option("--seed", sopts.seed, "Random seed");

  // gates
  auto* gates = app.add_subcommand("gates", "Show adaptive concatenation gate states");
  std::string gate_weights;
  gates->add_option("--weights", gate_weights, "Checkpoint (default: fresh model)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (*train) {
    if (!resume.empty()) {
      mtp::resume_train(resume, std::cout, epochs);
      return 0;
    }
    nlohmann::json cfg = config_path.empty() ? mtp::RunConfig{}.to_json()
                                             : mtp::RunConfig::load(config_path).to_json();
    auto set = [&](const std::string& kv) { mtp::apply_override(cfg, kv); };
    if (!scale.empty()) set("model.scale=" + scale);
    if (!data.empty()) cfg["data"]["source"] = data;
    if (epochs > 0) set("optim.epochs=" + std::to_string(epochs));
    if (batch > 0) set("optim.batch_size=" + std::to_string(batch));
    if (imgsz > 0) set("model.input_size=" + std::to_string(imgsz));
    if (!seg_tasks.empty()) cfg["model"]["seg_tasks"] = split_list(seg_tasks);
    if (seed >= 0) set("seed=" + std::to_string(seed));
    if (!out_dir.empty()) cfg["out_dir"] = out_dir;
    for (const auto& kv : overrides) set(kv);
    const auto run_cfg = mtp::RunConfig::from_json(cfg);
    auto outcome = mtp::run_train(run_cfg, std::cout);
    std::cout << "best fitness " << outcome.fit.best_fitness << " at epoch " << outcome.fit.best_epoch
              << "; weights in " << (outcome.run_dir / "weights").string() << "\n";
    return 0;
  }
  if (*val) {
    vopts.recall_mode = mtp::parse_recall_mode(recall_mode);
    mtp::run_val(vopts, std::cout);
    return 0;
  }
  if (*predict) {
    for (const auto& s : sources) popts.sources.emplace_back(s);
    mtp::run_predict(popts, std::cout);
    return 0;
  }
  if (*bench) {
    bopts.scale = mtp::parse_scale(bench_scale);
    bopts.batch_sizes.clear();
    for (const auto& b : split_list(bench_batches)) bopts.batch_sizes.push_back(std::stoll(b));
    mtp::run_bench(bopts, std::cout);
    return 0;
  }
  if (*synth) {
    sopts.width = sopts.height = synth_size;
    const auto ids = mtp::generate_synthetic(synth_out, sopts);
    for (const auto& [split, list] : ids) {
      std::cout << split << ": " << list.size() << " scenes\n";
    }
    return 0;
  }
  if (*gates) {
    mtp::run_gates(gate_weights, std::cout);
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const mtp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const mtp::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const mtp::ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 2;
  } catch (const mtp::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
