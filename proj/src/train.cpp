#include "mtp/train.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mtp/errors.hpp"

namespace fs = std::filesystem;

namespace mtp {

void OptimConfig::validate() const {
  auto require = [](bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ConfigError("optim." + key + " " + what);
  };
  require(lr0 > 0, "lr0", "must be positive");
  require(lrf > 0 && lrf <= 1, "lrf", "must be in (0, 1]");
  require(momentum >= 0 && momentum < 1, "momentum", "must be in [0, 1)");
  require(warmup_momentum >= 0 && warmup_momentum < 1, "warmup_momentum", "must be in [0, 1)");
  require(weight_decay >= 0, "weight_decay", "must be non-negative");
  require(warmup_epochs >= 0, "warmup_epochs", "must be non-negative");
  require(warmup_bias_lr >= 0, "warmup_bias_lr", "must be non-negative");
  require(epochs >= 1, "epochs", "must be at least 1");
  require(patience >= 1, "patience", "must be at least 1");
  require(batch_size >= 1, "batch_size", "must be at least 1");
  require(nominal_batch >= 0, "nominal_batch", "must be non-negative");
  require(grad_clip_norm >= 0, "grad_clip_norm", "must be non-negative");
  require(ema_decay > 0 && ema_decay < 1, "ema_decay", "must be in (0, 1)");
}

int OptimConfig::accumulate() const {
  if (nominal_batch <= 0) return 1;
  return std::max(static_cast<int>(std::lround(static_cast<double>(nominal_batch) / batch_size)), 1);
}

nlohmann::json OptimConfig::to_json() const {
  return {{"lr0", lr0},
          {"lrf", lrf},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"warmup_epochs", warmup_epochs},
          {"warmup_momentum", warmup_momentum},
          {"warmup_bias_lr", warmup_bias_lr},
          {"epochs", epochs},
          {"patience", patience},
          {"batch_size", batch_size},
          {"nominal_batch", nominal_batch},
          {"scale_loss_by_batch", scale_loss_by_batch},
          {"grad_clip_norm", grad_clip_norm},
          {"ema", ema},
          {"ema_decay", ema_decay}};
}

OptimConfig OptimConfig::from_json(const nlohmann::json& j) {
  OptimConfig c;
  c.lr0 = j.value("lr0", c.lr0);
  c.lrf = j.value("lrf", c.lrf);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.warmup_momentum = j.value("warmup_momentum", c.warmup_momentum);
  c.warmup_bias_lr = j.value("warmup_bias_lr", c.warmup_bias_lr);
  c.epochs = j.value("epochs", c.epochs);
  c.patience = j.value("patience", c.patience);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.nominal_batch = j.value("nominal_batch", c.nominal_batch);
  c.scale_loss_by_batch = j.value("scale_loss_by_batch", c.scale_loss_by_batch);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  c.ema = j.value("ema", c.ema);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  return c;
}

LrState lr_schedule(int epoch, int64_t iter, int64_t iters_per_epoch, const OptimConfig& cfg) {
  const int64_t nb = std::max<int64_t>(iters_per_epoch, 1);
  const double pos = epoch + static_cast<double>(iter) / static_cast<double>(nb);  // epochs done
  const double span = cfg.epochs - cfg.warmup_epochs;
  const double frac = span > 0 ? std::clamp((pos - cfg.warmup_epochs) / span, 0.0, 1.0) : 0.0;
  const double target = cfg.lr0 * (1.0 - (1.0 - cfg.lrf) * frac);

  LrState s;
  const int64_t warmup_iters = std::llround(cfg.warmup_epochs * static_cast<double>(nb));
  const int64_t xi = static_cast<int64_t>(epoch) * nb + iter;
  if (xi < warmup_iters) {
    const double f = static_cast<double>(xi) / static_cast<double>(warmup_iters);
    s.lr[kDecayWeights] = target * f;
    s.lr[kNoDecay] = target * f;
    s.lr[kBiases] = cfg.warmup_bias_lr + (target - cfg.warmup_bias_lr) * f;
    s.momentum = cfg.warmup_momentum + (cfg.momentum - cfg.warmup_momentum) * f;
  } else {
    for (double& lr : s.lr) lr = target;
    s.momentum = cfg.momentum;
  }
  return s;
}

std::map<std::string, ParamGroup> parameter_groups(const torch::nn::Module& model) {
  std::map<std::string, ParamGroup> out;
  for (const auto& item : model.named_parameters(true)) {
    const std::string& name = item.key();
    const bool is_bias = name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0;
    if (is_bias) out[name] = kBiases;
    else if (item.value().dim() <= 1) out[name] = kNoDecay;
    else out[name] = kDecayWeights;
  }
  return out;
}

std::unique_ptr<torch::optim::SGD> make_optimizer(torch::nn::Module& model, const OptimConfig& cfg) {
  const auto groups = parameter_groups(model);
  std::vector<torch::Tensor> params[3];
  for (const auto& item : model.named_parameters(true)) {
    params[groups.at(item.key())].push_back(item.value());
  }
  double wd = cfg.weight_decay;
  if (cfg.nominal_batch > 0) wd *= static_cast<double>(cfg.batch_size * cfg.accumulate()) / cfg.nominal_batch;

  const auto base = torch::optim::SGDOptions(cfg.lr0).momentum(cfg.momentum).nesterov(true);
  std::vector<torch::optim::OptimizerParamGroup> param_groups;
  for (int g = 0; g < 3; ++g) {
    auto opts = std::make_unique<torch::optim::SGDOptions>(base);
    opts->weight_decay(g == kDecayWeights ? wd : 0.0);
    param_groups.emplace_back(params[g], std::move(opts));
  }
  return std::make_unique<torch::optim::SGD>(std::move(param_groups), base);
}

void apply_lr(torch::optim::SGD& optimizer, const LrState& state) {
  auto& groups = optimizer.param_groups();
  for (std::size_t g = 0; g < groups.size() && g < 3; ++g) {
    auto& o = static_cast<torch::optim::SGDOptions&>(groups[g].options());
    o.lr(state.lr[g]);
    o.momentum(state.momentum);
  }
}

// ---------------------------------------------------------------------------

FitnessWeights FitnessWeights::for_tasks(const std::vector<std::string>& tasks) const {
  FitnessWeights out;
  out.weights.clear();
  double sum = 0.0;
  for (const auto& [key, w] : weights) {
    bool keep = key == "map50" || key == "recall";
    for (const auto& t : tasks) {
      if (key.rfind(t + "_", 0) == 0) keep = true;
    }
    if (keep && w > 0) {
      out.weights[key] = w;
      sum += w;
    }
  }
  if (sum <= 0) throw ConfigError("fitness weights are all zero for the configured tasks");
  for (auto& [key, w] : out.weights) w /= sum;
  return out;
}

nlohmann::json FitnessWeights::to_json() const { return weights; }

FitnessWeights FitnessWeights::from_json(const nlohmann::json& j) {
  FitnessWeights f;
  f.weights = j.get<std::map<std::string, double>>();
  return f;
}

double fitness(const std::map<std::string, double>& metrics, const FitnessWeights& weights) {
  double f = 0.0;
  for (const auto& [key, w] : weights.weights) {
    if (w == 0) continue;
    auto it = metrics.find(key);
    if (it == metrics.end()) throw ConfigError("fitness needs metric '" + key + "'");
    f += w * it->second;
  }
  return f;
}

bool EarlyStopping::update(int epoch, double fitness) {
  improved_ = fitness > best_fitness_;
  if (improved_) {
    best_fitness_ = fitness;
    best_epoch_ = epoch;
  }
  return epoch - best_epoch_ >= patience_;
}

void EarlyStopping::restore(int best_epoch, double best_fitness) {
  best_epoch_ = best_epoch;
  best_fitness_ = best_fitness;
  improved_ = false;
}

FitResult fit_loop(const FitHooks& hooks, int max_epochs, EarlyStopping& stopper, int start_epoch) {
  FitResult r;
  r.last_epoch = start_epoch - 1;
  for (int epoch = start_epoch; epoch <= max_epochs; ++epoch) {
    if (hooks.train_epoch) hooks.train_epoch(epoch);
    FitnessRecord rec = hooks.validate(epoch);
    rec.epoch = epoch;
    const bool stop = stopper.update(epoch, rec.fitness);
    if (hooks.on_epoch_end) hooks.on_epoch_end(rec, stopper);
    r.last_epoch = epoch;
    if (stop) {
      r.stopped_early = true;
      break;
    }
  }
  r.best_epoch = stopper.best_epoch();
  r.best_fitness = stopper.best_fitness();
  return r;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const fs::path& path, MultiTaskNetImpl& model, const CheckpointMeta& meta,
                     torch::optim::Optimizer* optimizer) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  nlohmann::json m{{"config", meta.config},
                   {"epoch", meta.epoch},
                   {"best_epoch", meta.best_epoch},
                   {"best_fitness", std::isfinite(meta.best_fitness) ? meta.best_fitness : -1e300}};
  if (!m["config"].contains("model")) m["config"]["model"] = model.config().to_json();
  torch::serialize::OutputArchive archive;
  archive.write("meta", c10::IValue(m.dump()));
  torch::serialize::OutputArchive model_archive;
  model.save(model_archive);
  archive.write("model", model_archive);
  if (optimizer) {
    torch::serialize::OutputArchive optim_archive;
    optimizer->save(optim_archive);
    archive.write("optimizer", optim_archive);
  }
  // write-then-rename so an interrupted save never leaves a truncated file
  const fs::path tmp = path.string() + ".tmp";
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path, torch::optim::Optimizer* optimizer) {
  if (!fs::exists(path)) throw DataError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw DataError("cannot read checkpoint " + path.string());
  }
  c10::IValue meta_value;
  if (!archive.try_read("meta", meta_value) || !meta_value.isString()) {
    throw DataError("checkpoint " + path.string() + " has no metadata");
  }
  const auto m = nlohmann::json::parse(meta_value.toStringRef());
  LoadedCheckpoint out;
  out.meta.config = m.at("config");
  out.meta.epoch = m.value("epoch", 0);
  out.meta.best_epoch = m.value("best_epoch", 0);
  out.meta.best_fitness = m.value("best_fitness", -1e300);
  out.model = build(ModelConfig::from_json(out.meta.config.at("model")));
  torch::serialize::InputArchive model_archive;
  archive.read("model", model_archive);
  out.model->load(model_archive);
  if (optimizer) {
    torch::serialize::InputArchive optim_archive;
    if (!archive.try_read("optimizer", optim_archive)) {
      throw DataError("checkpoint " + path.string() + " holds no optimizer state");
    }
    optimizer->load(optim_archive);
  }
  return out;
}

void load_optimizer_state(const fs::path& path, torch::optim::Optimizer& optimizer) {
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  torch::serialize::InputArchive optim_archive;
  if (!archive.try_read("optimizer", optim_archive)) {
    throw DataError("checkpoint " + path.string() + " holds no optimizer state");
  }
  optimizer.load(optim_archive);
}

// ---------------------------------------------------------------------------

ModelEma::ModelEma(MultiTaskNetImpl& model, double decay)
    : ema_(build(model.config())), decay_(decay) {
  torch::NoGradGuard no_grad;
  auto src = model.named_parameters(true);
  for (auto& p : ema_->named_parameters(true)) p.value().copy_(src[p.key()]);
  auto bufs = model.named_buffers(true);
  for (auto& b : ema_->named_buffers(true)) b.value().copy_(bufs[b.key()]);
  ema_->eval();
  for (auto& p : ema_->parameters()) p.set_requires_grad(false);
}

void ModelEma::update(MultiTaskNetImpl& model) {
  torch::NoGradGuard no_grad;
  ++updates_;
  const double d = decay_ * (1.0 - std::exp(-static_cast<double>(updates_) / 2000.0));
  auto src = model.named_parameters(true);
  for (auto& p : ema_->named_parameters(true)) {
    p.value().mul_(d).add_(src[p.key()].detach(), 1.0 - d);
  }
  auto bufs = model.named_buffers(true);
  for (auto& b : ema_->named_buffers(true)) {
    if (b.value().is_floating_point()) b.value().mul_(d).add_(bufs[b.key()], 1.0 - d);
    else b.value().copy_(bufs[b.key()]);
  }
}

Trainer::Trainer(MultiTaskNet model, const Dataset& train_set, TrainerOptions options)
    : model_(std::move(model)),
      train_set_(train_set),
      options_(std::move(options)),
      loss_(model_->config(), options_.loss) {
  options_.optim.validate();
  options_.loss.validate();
  model_->to(options_.device);
  optimizer_ = make_optimizer(*model_, options_.optim);
  if (options_.optim.ema) ema_.emplace(*model_, options_.optim.ema_decay);
  // Backward passes are counted where gradients reach the first layer.
  model_->backbone->stem->conv->weight.register_hook([this](torch::Tensor g) {
    ++counters_.backwards;
    return g;
  });
}

MultiTaskNetImpl& Trainer::eval_model() { return ema_ ? ema_->model() : *model_; }

EpochStats Trainer::train_epoch(int epoch) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& optim = options_.optim;
  const auto& aug = options_.aug;
  const auto& tasks = model_->config().seg_tasks;
  model_->train();

  const auto batches = epoch_batches(train_set_.size(), static_cast<std::size_t>(optim.batch_size),
                                     options_.seed, epoch, true);
  const int64_t nb = static_cast<int64_t>(batches.size());
  const bool use_mosaic = aug.enabled && aug.mosaic && epoch <= optim.epochs - aug.close_mosaic;
  const int accumulate = optim.accumulate();

  EpochStats stats;
  stats.epoch = epoch;
  stats.mean.fl.assign(tasks.size(), 0.0);
  stats.mean.tl.assign(tasks.size(), 0.0);
  stats.mean.seg.assign(tasks.size(), 0.0);

  optimizer_->zero_grad();
  for (int64_t i = 0; i < nb; ++i) {
    stats.lr = lr_schedule(epoch - 1, i, nb, optim);
    apply_lr(*optimizer_, stats.lr);

    std::vector<Sample> samples;
    for (auto idx : batches[static_cast<std::size_t>(i)]) {
      samples.push_back(train_set_.augmented(idx, options_.seed, epoch, aug, use_mosaic));
    }
    const Batch batch = collate(samples).to(options_.device);

    const PredictionBundle pred = model_->forward(batch.images);
    ++counters_.forwards;
    const LossResult loss = loss_(pred, batch.det_targets, batch.masks);
    if (!loss.parts.finite()) {
      throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(i) + ": " + loss.parts.describe(tasks));
    }
    const double scale = optim.scale_loss_by_batch ? static_cast<double>(samples.size()) : 1.0;
    (loss.total * scale).backward();
    ++counters_.batches;
    ++global_iter_;

    if ((i + 1) % accumulate == 0 || i + 1 == nb) {
      if (optim.grad_clip_norm > 0) {
        torch::nn::utils::clip_grad_norm_(model_->parameters(), optim.grad_clip_norm);
      }
      optimizer_->step();
      optimizer_->zero_grad();
      ++counters_.steps;
      if (ema_) ema_->update(*model_);
    }

    auto& m = stats.mean;
    m.total += loss.parts.total;
    m.det += loss.parts.det;
    m.bce += loss.parts.bce;
    m.dfl += loss.parts.dfl;
    m.ciou += loss.parts.ciou;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      m.fl[t] += loss.parts.fl[t];
      m.tl[t] += loss.parts.tl[t];
      m.seg[t] += loss.parts.seg[t];
    }
  }
  stats.batches = nb;
  if (nb > 0) {
    auto& m = stats.mean;
    const double n = static_cast<double>(nb);
    m.total /= n;
    m.det /= n;
    m.bce /= n;
    m.dfl /= n;
    m.ciou /= n;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      m.fl[t] /= n;
      m.tl[t] /= n;
      m.seg[t] /= n;
    }
  }
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return stats;
}

// ---------------------------------------------------------------------------

RunDirectory::RunDirectory(fs::path root) : root_(std::move(root)) {
  fs::create_directories(root_ / "weights");
}

fs::path RunDirectory::weights(const std::string& name) const {
  return root_ / "weights" / (name + ".pt");
}

void RunDirectory::write_config(const nlohmann::json& config) const {
  std::ofstream(root_ / "config.json") << config.dump(2) << "\n";
}

void RunDirectory::append_metrics(const EpochStats& stats, const FitnessRecord& record,
                                  const std::vector<std::string>& tasks) const {
  const bool fresh = !fs::exists(metrics_csv());
  std::ofstream out(metrics_csv(), std::ios::app);
  if (!out) throw DataError("cannot write " + metrics_csv().string());
  if (fresh) {
    out << "epoch,seconds,lr_weights,lr_nodecay,lr_bias,momentum,loss_total,loss_det,bce,dfl,ciou";
    for (const auto& t : tasks) out << "," << t << "_fl," << t << "_tl," << t << "_seg";
    for (const auto& [k, v] : record.metrics) out << "," << k;
    out << ",fitness\n";
  }
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), ",%.8g", v);
    out << buf;
  };
  out << stats.epoch;
  put(stats.seconds);
  for (double lr : stats.lr.lr) put(lr);
  put(stats.lr.momentum);
  put(stats.mean.total);
  put(stats.mean.det);
  put(stats.mean.bce);
  put(stats.mean.dfl);
  put(stats.mean.ciou);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    put(stats.mean.fl.at(t));
    put(stats.mean.tl.at(t));
    put(stats.mean.seg.at(t));
  }
  for (const auto& [k, v] : record.metrics) put(v);
  put(record.fitness);
  out << "\n";
}

void RunDirectory::plot_loss_curve() const {
  std::ifstream in(metrics_csv());
  if (!in) return;
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  {
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) header.push_back(cell);
  }
  const auto col = std::find(header.begin(), header.end(), "loss_total") - header.begin();
  std::vector<double> losses;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string cell;
    for (std::ptrdiff_t c = 0; std::getline(ls, cell, ','); ++c) {
      if (c == col) losses.push_back(std::stod(cell));
    }
  }
  if (losses.empty()) return;

  const int w = 640, h = 360, margin = 40;
  cv::Mat img(h, w, CV_8UC3, cv::Scalar(255, 255, 255));
  const double lo = 0.0, hi = *std::max_element(losses.begin(), losses.end()) * 1.05 + 1e-12;
  cv::line(img, {margin, h - margin}, {w - 10, h - margin}, cv::Scalar(0, 0, 0));
  cv::line(img, {margin, 10}, {margin, h - margin}, cv::Scalar(0, 0, 0));
  std::vector<cv::Point> pts;
  const double n = std::max<double>(static_cast<double>(losses.size()) - 1, 1);
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const int x = margin + static_cast<int>(std::lround(i / n * (w - margin - 10)));
    const int y = h - margin -
                  static_cast<int>(std::lround((losses[i] - lo) / (hi - lo) * (h - margin - 10)));
    pts.emplace_back(x, y);
  }
  cv::polylines(img, pts, false, cv::Scalar(200, 60, 0), 2, cv::LINE_AA);
  char label[64];
  std::snprintf(label, sizeof(label), "total loss (max %.3g)", hi / 1.05);
  cv::putText(img, label, {margin + 8, 24}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0), 1);
  cv::putText(img, "epoch", {w - 70, h - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0), 1);
  cv::imwrite((root_ / "loss_curve.png").string(), img);
}

}  // namespace mtp
