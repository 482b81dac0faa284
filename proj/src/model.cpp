#include "mtp/model.hpp"

#include <cmath>

#include "mtp/errors.hpp"

namespace mtp {

namespace {

constexpr int64_t kMaxChannels = 1024;
// Base (unscaled) channel plan of the backbone at strides 2, 4, 8, 16, 32.
constexpr int64_t kBackboneBase[] = {64, 128, 256, 512, 1024};
// Segmentation neck: top conv width, then outputs at strides 16, 8, 4, 2.
constexpr int64_t kSegTopBase = 1024;
constexpr int64_t kSegLevelBase[] = {256, 128, 64, 64};
constexpr int64_t kSegLevelStride[] = {16, 8, 4, 2};

torch::Tensor upsample2x(const torch::Tensor& x) {
  return torch::upsample_nearest2d(x, std::vector<int64_t>{x.size(2) * 2, x.size(3) * 2});
}

}  // namespace

std::string to_string(Scale scale) { return scale == Scale::n ? "n" : "s"; }

Scale parse_scale(const std::string& text) {
  if (text == "n") return Scale::n;
  if (text == "s") return Scale::s;
  throw ConfigError("unknown model scale '" + text + "' (expected n or s)");
}

ModelConfig ModelConfig::for_scale(Scale scale) {
  ModelConfig cfg;
  cfg.scale = scale;
  cfg.depth_multiple = 0.33;
  cfg.width_multiple = scale == Scale::n ? 0.25 : 0.50;
  return cfg;
}

int64_t ModelConfig::channels(int64_t base) const {
  const double scaled = static_cast<double>(std::min(base, kMaxChannels)) * width_multiple;
  const double rounded = std::round(scaled);
  if (std::abs(scaled - rounded) > 1e-9 || rounded < 2 || static_cast<int64_t>(rounded) % 2) {
    throw ConfigError("width_multiple " + std::to_string(width_multiple) + " gives " +
                      std::to_string(scaled) + " channels for base width " +
                      std::to_string(base) + "; need an even integer");
  }
  return static_cast<int64_t>(rounded);
}

int64_t ModelConfig::depth(int64_t base) const {
  return std::max<int64_t>(1, std::llround(static_cast<double>(base) * depth_multiple));
}

void ModelConfig::validate() const {
  if (seg_tasks.empty()) throw ConfigError("model needs at least one segmentation task");
  for (std::size_t i = 0; i < seg_tasks.size(); ++i) {
    for (std::size_t j = i + 1; j < seg_tasks.size(); ++j) {
      if (seg_tasks[i] == seg_tasks[j]) {
        throw ConfigError("duplicate segmentation task '" + seg_tasks[i] + "'");
      }
    }
  }
  if (strides != std::vector<int64_t>{8, 16, 32}) {
    throw ConfigError("detection strides must be {8, 16, 32}");
  }
  if (nc_det < 1) throw ConfigError("nc_det must be >= 1");
  if (reg_max < 2) throw ConfigError("reg_max must be >= 2");
  if (depth_multiple <= 0) throw ConfigError("depth_multiple must be positive");
  if (input_size < 32 || input_size % 32 != 0) {
    throw ConfigError("input_size must be a positive multiple of 32, got " +
                      std::to_string(input_size));
  }
  for (int64_t base : kBackboneBase) channels(base);
  for (int64_t base : kSegLevelBase) channels(base);
}

nlohmann::json ModelConfig::to_json() const {
  return {{"scale", to_string(scale)},
          {"depth_multiple", depth_multiple},
          {"width_multiple", width_multiple},
          {"nc_det", nc_det},
          {"seg_tasks", seg_tasks},
          {"strides", strides},
          {"input_size", input_size},
          {"reg_max", reg_max}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig cfg = for_scale(parse_scale(j.value("scale", std::string("n"))));
  cfg.depth_multiple = j.value("depth_multiple", cfg.depth_multiple);
  cfg.width_multiple = j.value("width_multiple", cfg.width_multiple);
  cfg.nc_det = j.value("nc_det", cfg.nc_det);
  cfg.seg_tasks = j.value("seg_tasks", cfg.seg_tasks);
  cfg.strides = j.value("strides", cfg.strides);
  cfg.input_size = j.value("input_size", cfg.input_size);
  cfg.reg_max = j.value("reg_max", cfg.reg_max);
  return cfg;
}

const torch::Tensor& FeaturePyramid::at(int64_t stride) const {
  auto it = levels.find(stride);
  if (it == levels.end()) {
    throw ShapeError("feature pyramid has no level at stride " + std::to_string(stride));
  }
  return it->second;
}

// ---------------------------------------------------------------------------

BackboneImpl::BackboneImpl(const ModelConfig& cfg) {
  const int64_t c2 = cfg.channels(kBackboneBase[0]);
  const int64_t c4 = cfg.channels(kBackboneBase[1]);
  const int64_t c8 = cfg.channels(kBackboneBase[2]);
  const int64_t c16 = cfg.channels(kBackboneBase[3]);
  const int64_t c32 = cfg.channels(kBackboneBase[4]);
  channels_ = {{2, c2}, {4, c4}, {8, c8}, {16, c16}, {32, c32}};

  stem = register_module("stem", ConvBlock(3, c2, 3, 2));
  auto stage = [&](int64_t cin, int64_t cout, int64_t base_depth) {
    torch::nn::Sequential seq;
    seq->push_back("down", ConvBlock(cin, cout, 3, 2));
    seq->push_back("c2f", C2f(cout, cout, cfg.depth(base_depth), /*shortcut=*/true));
    return seq;
  };
  stage1 = register_module("stage1", stage(c2, c4, 3));
  stage2 = register_module("stage2", stage(c4, c8, 6));
  stage3 = register_module("stage3", stage(c8, c16, 6));
  stage4 = register_module("stage4", stage(c16, c32, 3));
  sppf = register_module("sppf", SPPF(c32, c32, 5));
}

FeaturePyramid BackboneImpl::forward(const torch::Tensor& images) {
  FeaturePyramid p;
  p.levels[2] = stem->forward(images);
  p.levels[4] = stage1->forward(p.levels[2]);
  p.levels[8] = stage2->forward(p.levels[4]);
  p.levels[16] = stage3->forward(p.levels[8]);
  p.levels[32] = sppf->forward(stage4->forward(p.levels[16]));
  return p;
}

DetectionNeckImpl::DetectionNeckImpl(const ModelConfig& cfg,
                                     const std::map<int64_t, int64_t>& ch) {
  const int64_t c8 = ch.at(8), c16 = ch.at(16), c32 = ch.at(32);
  const int64_t n = cfg.depth(3);
  td_p4 = register_module("td_p4", C2f(c32 + c16, c16, n));
  td_p3 = register_module("td_p3", C2f(c16 + c8, c8, n));
  down_p3 = register_module("down_p3", ConvBlock(c8, c8, 3, 2));
  bu_p4 = register_module("bu_p4", C2f(c8 + c16, c16, n));
  down_p4 = register_module("down_p4", ConvBlock(c16, c16, 3, 2));
  bu_p5 = register_module("bu_p5", C2f(c16 + c32, c32, n));
  out_channels_ = {c8, c16, c32};
}

std::vector<torch::Tensor> DetectionNeckImpl::forward(const FeaturePyramid& p) {
  auto h4 = td_p4->forward(torch::cat({upsample2x(p.at(32)), p.at(16)}, 1));
  auto o3 = td_p3->forward(torch::cat({upsample2x(h4), p.at(8)}, 1));
  auto o4 = bu_p4->forward(torch::cat({down_p3->forward(o3), h4}, 1));
  auto o5 = bu_p5->forward(torch::cat({down_p4->forward(o4), p.at(32)}, 1));
  return {o3, o4, o5};
}

SegLevelImpl::SegLevelImpl(int64_t neck_channels, int64_t backbone_channels,
                           int64_t out_channels, int64_t depth, int64_t stride)
    : stride_(stride) {
  acm = register_module(
      "acm", AdaptiveConcat(neck_channels, backbone_channels, "p" + std::to_string(stride)));
  c2f = register_module("c2f", C2f(neck_channels, out_channels, depth, /*shortcut=*/false));
}

torch::Tensor SegLevelImpl::forward(const torch::Tensor& x_neck, const torch::Tensor& x_backbone) {
  return c2f->forward(acm->forward(x_neck, x_backbone));
}

SegmentationNeckImpl::SegmentationNeckImpl(const ModelConfig& cfg,
                                           const std::map<int64_t, int64_t>& ch) {
  const int64_t top_ch = cfg.channels(kSegTopBase);
  top = register_module("top", ConvBlock(ch.at(32), top_ch, 3, 1));
  int64_t prev = top_ch;
  for (std::size_t i = 0; i < std::size(kSegLevelStride); ++i) {
    const int64_t stride = kSegLevelStride[i];
    const int64_t out = cfg.channels(kSegLevelBase[i]);
    auto level = SegLevel(prev, ch.at(stride), out, cfg.depth(3), stride);
    levels_.push_back(register_module("p" + std::to_string(stride), level));
    prev = out;
  }
  out_channels_ = prev;
}

torch::Tensor SegmentationNeckImpl::forward(const FeaturePyramid& p) {
  auto x = top->forward(p.at(32));
  for (auto& level : levels_) {
    x = level->forward(upsample2x(x), p.at(level->stride()));
  }
  return x;
}

// ---------------------------------------------------------------------------

MultiTaskNetImpl::MultiTaskNetImpl(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  backbone = register_module("backbone", Backbone(cfg_));
  const auto ch = backbone->channels();
  det_neck = register_module("det_neck", DetectionNeck(cfg_, ch));
  det_head = register_module(
      "det_head", DetectHead(cfg_.nc_det, det_neck->out_channels(), cfg_.strides, cfg_.reg_max));
  det_head->init_biases(cfg_.input_size);
  seg_necks = register_module("seg_neck", torch::nn::ModuleList());
  seg_heads = register_module("seg_head", torch::nn::ModuleList());
  for (std::size_t i = 0; i < cfg_.seg_tasks.size(); ++i) {
    auto neck = SegmentationNeck(cfg_, ch);
    seg_heads->push_back(SegmentHead(neck->out_channels(), 1));
    seg_necks->push_back(neck);
  }
}

PredictionBundle MultiTaskNetImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg_.input_size ||
      images.size(3) != cfg_.input_size) {
    throw ShapeError("model expects B x 3 x " + std::to_string(cfg_.input_size) + " x " +
                     std::to_string(cfg_.input_size) + " images, got " +
                     (images.dim() == 4 ? to_string(TensorSpec::of(images))
                                        : std::to_string(images.dim()) + "-d tensor"));
  }
  auto pyramid = backbone->forward(images);
  ++backbone_passes_;

  PredictionBundle out;
  out.det = det_head->forward(det_neck->forward(pyramid));
  out.seg_masks.reserve(seg_necks->size());
  for (std::size_t i = 0; i < seg_necks->size(); ++i) {
    auto neck_out = (*seg_necks)[i]->as<SegmentationNeck>()->forward(pyramid);
    out.seg_masks.push_back((*seg_heads)[i]->as<SegmentHead>()->forward(neck_out));
  }
  return out;
}

std::vector<GateState> MultiTaskNetImpl::gates() const {
  std::vector<GateState> out;
  for (std::size_t i = 0; i < seg_necks->size(); ++i) {
    const auto* neck = (*seg_necks)[i]->as<SegmentationNeck>();
    for (const auto& level : neck->levels()) {
      GateState g;
      g.name = "seg_neck." + std::to_string(i) + "." + cfg_.seg_tasks[i] + ".p" +
               std::to_string(level->stride()) + ".acm";
      g.weight = level->acm->weight.item<double>();
      g.gate = level->acm->gate();
      g.concat = level->acm->concat_active();
      out.push_back(g);
    }
  }
  return out;
}

MultiTaskNet build(const ModelConfig& cfg) { return MultiTaskNet(cfg); }

int64_t count_parameters(const MultiTaskNetImpl& model, const std::string& selector) {
  std::function<bool(const std::string&)> match;
  auto prefix = [](std::string p) {
    return [p = std::move(p)](const std::string& name) { return name.rfind(p, 0) == 0; };
  };
  if (selector == "all") {
    match = [](const std::string&) { return true; };
  } else if (selector == "none") {
    return 0;
  } else if (selector == "backbone" || selector == "det_neck" || selector == "det_head") {
    match = prefix(selector + ".");
  } else if (selector == "seg_necks") {
    match = prefix("seg_neck.");
  } else if (selector == "seg_heads") {
    match = prefix("seg_head.");
  } else if (selector == "acm") {
    match = [](const std::string& name) { return name.find(".acm.") != std::string::npos; };
  } else if (selector.rfind("seg_neck.", 0) == 0 || selector.rfind("seg_head.", 0) == 0) {
    const auto idx_text = selector.substr(selector.find('.') + 1);
    std::size_t idx = 0;
    try {
      std::size_t used = 0;
      idx = std::stoul(idx_text, &used);
      if (used != idx_text.size()) throw std::invalid_argument(idx_text);
    } catch (const std::exception&) {
      throw ConfigError("unknown parameter selector '" + selector + "'");
    }
    if (idx >= model.config().seg_tasks.size()) {
      throw ConfigError("parameter selector '" + selector + "' is out of range");
    }
    match = prefix(selector + ".");
  } else {
    throw ConfigError("unknown parameter selector '" + selector + "'");
  }

  int64_t total = 0;
  for (const auto& item : model.named_parameters(/*recurse=*/true)) {
    if (match(item.key())) total += item.value().numel();
  }
  return total;
}

}  // namespace mtp
