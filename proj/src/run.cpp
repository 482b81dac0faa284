#include "mtp/run.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mtp/errors.hpp"

namespace fs = std::filesystem;

namespace mtp {

nlohmann::json DataConfig::to_json() const {
  return {{"source", source},
          {"train_split", train_split},
          {"val_split", val_split},
          {"strict", strict},
          {"synthetic_train", synthetic_train},
          {"synthetic_val", synthetic_val},
          {"synthetic_size", synthetic_size}};
}

DataConfig DataConfig::from_json(const nlohmann::json& j) {
  DataConfig d;
  d.source = j.value("source", d.source);
  d.train_split = j.value("train_split", d.train_split);
  d.val_split = j.value("val_split", d.val_split);
  d.strict = j.value("strict", d.strict);
  d.synthetic_train = j.value("synthetic_train", d.synthetic_train);
  d.synthetic_val = j.value("synthetic_val", d.synthetic_val);
  d.synthetic_size = j.value("synthetic_size", d.synthetic_size);
  return d;
}

namespace {

bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void check_keys(const nlohmann::json& j, const nlohmann::json& ref, const std::string& prefix) {
  if (!j.is_object()) throw ConfigError("config section '" + prefix + "' must be a table");
  for (const auto& [key, value] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (prefix == "fitness") {
      if (!value.is_number()) throw ConfigError("config key '" + path + "' must be a number");
      continue;
    }
    if (!ref.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    const auto& r = ref.at(key);
    if (r.is_object()) {
      check_keys(value, r, path);
    } else if (!same_kind(value, r)) {
      throw ConfigError("config key '" + path + "' expects a " + std::string(r.type_name()) +
                        ", got " + value.type_name());
    }
  }
}

ThresholdProfile profile_from(const nlohmann::json& j, ThresholdProfile p) {
  p.conf = j.value("conf", p.conf);
  p.nms_iou = j.value("iou", p.nms_iou);
  return p;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ",") + s;
  return out;
}

bool split_exists(const fs::path& root, const std::string& split) {
  return fs::exists(root / (split + ".txt")) || fs::is_directory(root / "images" / split);
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  optim.validate();
  loss.validate();
  if (optim.patience >= optim.epochs) {
    // patience is only meaningful below the epoch budget; allowed but noted
  }
  for (const auto* p : {&eval_thresholds, &predict_thresholds}) {
    if (p->conf < 0 || p->conf > 1 || p->nms_iou < 0 || p->nms_iou > 1) {
      throw ConfigError("thresholds must lie in [0, 1]");
    }
  }
  if (eval_interval < 1) throw ConfigError("eval_interval must be at least 1");
  if (data.synthetic_train < 1) throw ConfigError("data.synthetic_train must be at least 1");
  if (data.synthetic_size < 32) throw ConfigError("data.synthetic_size must be at least 32");
}

nlohmann::json RunConfig::to_json() const {
  return {{"model", model.to_json()},
          {"data", data.to_json()},
          {"optim", optim.to_json()},
          {"loss", loss.to_json()},
          {"aug", aug.to_json()},
          {"eval",
           {{"conf", eval_thresholds.conf},
            {"iou", eval_thresholds.nms_iou},
            {"recall_mode", to_string(recall_mode)}}},
          {"predict", {{"conf", predict_thresholds.conf}, {"iou", predict_thresholds.nms_iou}}},
          {"fitness", fitness.to_json()},
          {"seed", seed},
          {"eval_interval", eval_interval},
          {"out_dir", out_dir}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  const RunConfig defaults;
  check_keys(j, defaults.to_json(), "");
  RunConfig c;
  try {
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("data")) c.data = DataConfig::from_json(j.at("data"));
    if (j.contains("optim")) c.optim = OptimConfig::from_json(j.at("optim"));
    if (j.contains("loss")) c.loss = LossCoefficients::from_json(j.at("loss"));
    if (j.contains("aug")) c.aug = AugmentConfig::from_json(j.at("aug"));
    if (j.contains("eval")) {
      c.eval_thresholds = profile_from(j.at("eval"), c.eval_thresholds);
      c.recall_mode = parse_recall_mode(j.at("eval").value("recall_mode", to_string(c.recall_mode)));
    }
    if (j.contains("predict")) c.predict_thresholds = profile_from(j.at("predict"), c.predict_thresholds);
    if (j.contains("fitness")) c.fitness = FitnessWeights::from_json(j.at("fitness"));
    c.seed = j.value("seed", c.seed);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.out_dir = j.value("out_dir", c.out_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  const nlohmann::json ref = RunConfig{}.to_json();
  nlohmann::json* node = &config;
  const nlohmann::json* ref_node = &ref;
  std::istringstream parts(key);
  std::string part, path;
  std::vector<std::string> segments;
  while (std::getline(parts, part, '.')) segments.push_back(part);
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const auto& seg = segments[i];
    path += (path.empty() ? "" : ".") + seg;
    const bool free_key = i == 1 && segments[0] == "fitness";
    if (!free_key && (!ref_node->is_object() || !ref_node->contains(seg))) {
      throw ConfigError("unknown config key '" + path + "'");
    }
    if (i + 1 < segments.size()) {
      ref_node = &ref_node->at(seg);
      node = &(*node)[seg];
      continue;
    }
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
      value = text;
    }
    if (!free_key && ref_node->at(seg).is_array() && value.is_string()) {
      nlohmann::json arr = nlohmann::json::array();
      std::istringstream items(text);
      std::string item;
      while (std::getline(items, item, ',')) {
        if (!item.empty()) arr.push_back(item);
      }
      value = arr;
    }
    (*node)[seg] = value;
  }
  if (key == "model.scale") {
    const auto scaled = ModelConfig::for_scale(parse_scale(config["model"]["scale"].get<std::string>()));
    config["model"]["depth_multiple"] = scaled.depth_multiple;
    config["model"]["width_multiple"] = scaled.width_multiple;
  }
}

torch::Device device_from_env() {
  const char* env = std::getenv("MTP_DEVICE");
  if (!env || !*env) return torch::kCPU;
  try {
    torch::Device d{std::string(env)};
    if (d.is_cuda() && !torch::cuda::is_available()) {
      throw ConfigError("MTP_DEVICE=" + std::string(env) + " but no CUDA device is available");
    }
    return d;
  } catch (const c10::Error&) {
    throw ConfigError("MTP_DEVICE has an invalid value '" + std::string(env) + "'");
  }
}

std::vector<std::string> discover_tasks(const fs::path& root) {
  std::vector<std::string> tasks;
  const auto dir = root / "masks";
  if (!fs::is_directory(dir)) return tasks;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) tasks.push_back(e.path().filename().string());
  }
  std::sort(tasks.begin(), tasks.end());
  return tasks;
}

// ---------------------------------------------------------------------------

namespace {

struct Datasets {
  std::unique_ptr<Dataset> train;
  std::unique_ptr<Dataset> val;
};

Datasets open_datasets(const RunConfig& cfg, const fs::path& run_dir, std::ostream& log) {
  fs::path root;
  if (cfg.data.source == "synthetic") {
    root = run_dir / "data";
    if (!fs::exists(root / (cfg.data.train_split + ".txt"))) {
      SyntheticOptions opts;
      opts.seed = cfg.seed;
      opts.train_count = cfg.data.synthetic_train;
      opts.val_count = cfg.data.synthetic_val;
      opts.width = opts.height = cfg.data.synthetic_size;
      generate_synthetic(root, opts);
      log << "generated " << opts.train_count << " synthetic training scenes under " << root.string()
          << "\n";
    }
  } else {
    root = cfg.data.source;
  }
  DatasetSpec train_spec;
  train_spec.root = root;
  train_spec.split = cfg.data.train_split;
  train_spec.tasks = cfg.model.seg_tasks;
  DatasetSpec val_spec = train_spec;
  if (split_exists(root, cfg.data.val_split)) {
    val_spec.split = cfg.data.val_split;
  } else {
    log << "no '" << cfg.data.val_split << "' split; validating on '" << cfg.data.train_split
        << "'\n";
  }
  Datasets d;
  d.train = std::make_unique<Dataset>(train_spec, cfg.model.input_size, cfg.data.strict);
  d.val = std::make_unique<Dataset>(val_spec, cfg.model.input_size, cfg.data.strict);
  return d;
}

TrainOutcome fit_run(const RunConfig& cfg, const fs::path& run_dir, MultiTaskNet model,
                     const LoadedCheckpoint* resume, std::ostream& log) {
  const torch::Device device = device_from_env();
  RunDirectory run(run_dir);
  auto data = open_datasets(cfg, run_dir, log);
  const auto& tasks = cfg.model.seg_tasks;

  TrainerOptions topts;
  topts.optim = cfg.optim;
  topts.loss = cfg.loss;
  topts.aug = cfg.aug;
  topts.seed = cfg.seed;
  topts.device = device;
  Trainer trainer(model, *data.train, topts);

  EarlyStopping stopper(cfg.optim.patience);
  int start_epoch = 1;
  if (resume) {
    load_optimizer_state(run.weights("last"), trainer.optimizer());
    stopper.restore(resume->meta.best_epoch, resume->meta.best_fitness);
    start_epoch = resume->meta.epoch + 1;
    const auto nb = epoch_batches(data.train->size(), static_cast<std::size_t>(cfg.optim.batch_size),
                                  cfg.seed, 1, false).size();
    trainer.set_iterations(static_cast<int64_t>(nb) * resume->meta.epoch);
    log << "resuming at epoch " << start_epoch << " (best fitness " << resume->meta.best_fitness
        << " at epoch " << resume->meta.best_epoch << ")\n";
  }

  const nlohmann::json snapshot = cfg.to_json();
  const FitnessWeights weights = cfg.fitness.for_tasks(tasks);
  EvalOptions eopts;
  eopts.profile = cfg.eval_thresholds;
  eopts.recall_mode = cfg.recall_mode;
  eopts.batch_size = cfg.optim.batch_size;

  TrainOutcome outcome;
  outcome.run_dir = run_dir;
  EpochStats current;
  FitnessRecord last_record;
  bool have_record = false;

  FitHooks hooks;
  hooks.train_epoch = [&](int epoch) {
    current = trainer.train_epoch(epoch);
    outcome.epochs.push_back(current);
  };
  hooks.validate = [&](int epoch) {
    const bool due = !have_record || epoch % cfg.eval_interval == 0 || epoch == cfg.optim.epochs;
    if (due) {
      const auto report = evaluate(trainer.eval_model(), *data.val, eopts, device);
      last_record.metrics = report.flat();
      last_record.fitness = fitness(last_record.metrics, weights);
      have_record = true;
    }
    FitnessRecord rec = last_record;
    rec.epoch = epoch;
    return rec;
  };
  hooks.on_epoch_end = [&](const FitnessRecord& rec, const EarlyStopping& es) {
    CheckpointMeta meta;
    meta.config = snapshot;
    meta.epoch = rec.epoch;
    meta.best_epoch = es.best_epoch();
    meta.best_fitness = es.best_fitness();
    save_checkpoint(run.weights("last"), *trainer.model(), meta, &trainer.optimizer());
    if (es.improved()) save_checkpoint(run.weights("best"), trainer.eval_model(), meta);
    run.append_metrics(current, rec, tasks);
    run.plot_loss_curve();
    char line[256];
    std::snprintf(line, sizeof(line), "epoch %d/%d  loss %.4f  fitness %.4f  best %.4f@%d  %.1fs\n",
                  rec.epoch, cfg.optim.epochs, current.mean.total, rec.fitness, es.best_fitness(),
                  es.best_epoch(), current.seconds);
    log << line << std::flush;
  };

  outcome.fit = fit_loop(hooks, cfg.optim.epochs, stopper, start_epoch);
  outcome.counters = trainer.counters();
  if (outcome.fit.stopped_early) {
    log << "early stop at epoch " << outcome.fit.last_epoch << ": no improvement since epoch "
        << outcome.fit.best_epoch << "\n";
  }
  return outcome;
}

}  // namespace

TrainOutcome run_train(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const fs::path run_dir = cfg.out_dir;
  fs::create_directories(run_dir);
  RunDirectory(run_dir).write_config(cfg.to_json());
  torch::manual_seed(cfg.seed);
  auto model = build(cfg.model);
  return fit_run(cfg, run_dir, model, nullptr, log);
}

TrainOutcome resume_train(const fs::path& run_dir, std::ostream& log, int epochs_override) {
  RunConfig cfg = RunConfig::load(run_dir / "config.json");
  cfg.out_dir = run_dir.string();
  if (epochs_override > 0) {
    cfg.optim.epochs = epochs_override;
    RunDirectory(run_dir).write_config(cfg.to_json());
  }
  auto ckpt = load_checkpoint(run_dir / "weights" / "last.pt");
  torch::manual_seed(cfg.seed);
  return fit_run(cfg, run_dir, ckpt.model, &ckpt, log);
}

EvalReport run_val(const ValOptions& options, std::ostream& log) {
  const torch::Device device = device_from_env();
  auto ckpt = load_checkpoint(options.weights);
  auto model = ckpt.model;
  model->to(device);
  const auto& mcfg = model->config();

  const auto available = discover_tasks(options.data);
  if (!available.empty()) {
    for (const auto& t : mcfg.seg_tasks) {
      if (std::find(available.begin(), available.end(), t) == available.end()) {
        throw DataError("checkpoint tasks [" + join(mcfg.seg_tasks) +
                        "] do not match dataset tasks [" + join(available) + "]");
      }
    }
  }
  DatasetSpec spec;
  spec.root = options.data;
  spec.split = options.split;
  spec.tasks = mcfg.seg_tasks;
  Dataset ds(spec, mcfg.input_size, options.strict);

  EvalOptions eopts;
  eopts.profile = ThresholdProfile::eval();
  eopts.batch_size = options.batch_size;
  eopts.recall_mode = options.recall_mode;
  auto report = evaluate(*model, ds, eopts, device);
  if (options.measure_fps) {
    report.fps = benchmark_fps(*model, 1, 2, 10, mcfg.input_size, device).fps;
  }
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    write_report(options.out_dir / "val_metrics.txt", report);
    write_pr_csv(options.out_dir / "pr_curve.csv", report);
  }
  log << report.to_text();
  return report;
}

namespace {

bool is_image(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

std::vector<fs::path> expand_sources(const std::vector<fs::path>& sources) {
  std::vector<fs::path> out;
  for (const auto& s : sources) {
    if (fs::is_directory(s)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(s)) {
        if (e.is_regular_file() && is_image(e.path())) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      out.insert(out.end(), files.begin(), files.end());
    } else {
      out.push_back(s);
    }
  }
  return out;
}

}  // namespace

std::size_t run_predict(const PredictOptions& options, std::ostream& log) {
  const torch::Device device = device_from_env();
  auto ckpt = load_checkpoint(options.weights);
  auto model = ckpt.model;
  model->to(device);
  model->eval();
  torch::NoGradGuard no_grad;
  const auto& mcfg = model->config();
  const int s = static_cast<int>(mcfg.input_size);

  const fs::path pred_dir = options.out_dir / "predictions";
  fs::create_directories(pred_dir / "overlays");
  nlohmann::json images = nlohmann::json::array();
  std::size_t written = 0;
  for (const auto& path : expand_sources(options.sources)) {
    cv::Mat image = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (image.empty()) {
      std::cerr << "[warn] skipping unreadable image " << path.string() << "\n";
      continue;
    }
    Sample sample;
    sample.id = path.stem().string();
    cv::resize(image, sample.image, cv::Size(s, s), 0, 0, cv::INTER_LINEAR);
    const auto batch = collate(std::span<const Sample>(&sample, 1)).to(device);
    const auto pred = model->forward(batch.images);

    auto dets = postprocess_detections(pred.det.decoded[0].to(torch::kCPU), options.thresholds);
    const float fx = static_cast<float>(image.cols) / s, fy = static_cast<float>(image.rows) / s;
    for (auto& d : dets) d.box = {d.box.x1 * fx, d.box.y1 * fy, d.box.x2 * fx, d.box.y2 * fy};
    std::vector<cv::Mat> masks;
    for (const auto& logits : pred.seg_masks) {
      masks.push_back(binarize_mask(logits[0].to(torch::kCPU), image.size()));
    }
    const cv::Mat overlay = render_overlay(image, dets, masks, default_palette(), {"vehicle"});
    const auto overlay_path = pred_dir / "overlays" / (sample.id + ".png");
    cv::imwrite(overlay_path.string(), overlay);

    nlohmann::json rec;
    rec["image"] = path.string();
    rec["width"] = image.cols;
    rec["height"] = image.rows;
    rec["detections"] = nlohmann::json::array();
    for (const auto& d : dets) {
      rec["detections"].push_back(
          {{"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}, {"score", d.score}, {"class", d.cls}});
    }
    for (std::size_t t = 0; t < masks.size(); ++t) {
      rec["masks"][mcfg.seg_tasks[t]] = {{"size", {image.rows, image.cols}},
                                         {"counts", rle_encode(masks[t])}};
    }
    images.push_back(rec);
    ++written;
  }
  nlohmann::json dump{{"thresholds", {{"conf", options.thresholds.conf}, {"iou", options.thresholds.nms_iou}}},
                      {"tasks", mcfg.seg_tasks},
                      {"images", images}};
  std::ofstream(pred_dir / "predictions.json") << dump.dump(1) << "\n";
  log << "wrote " << written << " predictions to " << pred_dir.string() << "\n";
  return written;
}

std::vector<BenchSummary> run_bench(const BenchOptions& options, std::ostream& log) {
  if (options.runs < 1) throw ConfigError("bench needs at least one run");
  const torch::Device device = device_from_env();
  MultiTaskNet model{nullptr};
  if (options.weights.empty()) {
    auto cfg = ModelConfig::for_scale(options.scale);
    cfg.input_size = options.input_size;
    torch::manual_seed(0);
    model = build(cfg);
  } else {
    model = load_checkpoint(options.weights).model;
  }
  model->to(device);
  const int64_t size = options.weights.empty() ? options.input_size : model->config().input_size;

  std::vector<BenchSummary> out;
  std::ostringstream text;
  for (int64_t bs : options.batch_sizes) {
    BenchSummary s;
    s.batch_size = bs;
    double lo = 1e300, hi = 0, sum = 0;
    for (int r = 0; r < options.runs; ++r) {
      auto res = benchmark_fps(*model, bs, options.warmup, options.iters, size, device);
      lo = std::min(lo, res.fps);
      hi = std::max(hi, res.fps);
      sum += res.fps;
      s.runs.push_back(res);
    }
    s.mean_fps = sum / options.runs;
    s.spread = (hi - lo) / s.mean_fps;
    char line[200];
    std::snprintf(line, sizeof(line),
                  "bs=%lld imgsz=%lld device=%s runs=%d iters=%lld fps=%.3f spread=%.2f%%\n",
                  static_cast<long long>(bs), static_cast<long long>(size), device.str().c_str(),
                  options.runs, static_cast<long long>(options.iters), s.mean_fps, 100 * s.spread);
    text << line;
    log << line << std::flush;
    out.push_back(s);
  }
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    std::ofstream(options.out_dir / "bench.txt") << text.str();
  }
  return out;
}

std::vector<GateState> run_gates(const fs::path& weights, std::ostream& log) {
  MultiTaskNet model{nullptr};
  if (weights.empty()) {
    model = build(ModelConfig{});
  } else {
    model = load_checkpoint(weights).model;
  }
  auto gates = model->gates();
  log << format_gates(gates);
  return gates;
}

std::string format_gates(const std::vector<GateState>& gates) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-28s %10s %10s  %s\n", "acm", "weight", "sigmoid", "branch");
  os << line;
  for (const auto& g : gates) {
    std::snprintf(line, sizeof(line), "%-28s %10.5f %10.5f  %s\n", g.name.c_str(), g.weight, g.gate,
                  g.concat ? "concat" : "passthrough");
    os << line;
  }
  return os.str();
}

}  // namespace mtp
