#include "mtp/blocks.hpp"

#include <cmath>
#include <sstream>

#include "mtp/errors.hpp"
#include "mtp/postprocess.hpp"

namespace mtp {

namespace {

constexpr double kBnEps = 1e-3;
constexpr double kBnMomentum = 0.03;

void check_channels(const torch::Tensor& x, int64_t expected, const char* block) {
  if (x.dim() != 4) {
    throw ShapeError(std::string(block) + ": expected a 4-d NCHW tensor, got " +
                     std::to_string(x.dim()) + " dims");
  }
  if (x.size(1) != expected) {
    throw ShapeError(std::string(block) + ": expected " + std::to_string(expected) +
                     " input channels, got " + std::to_string(x.size(1)));
  }
}

}  // namespace

TensorSpec TensorSpec::of(const torch::Tensor& t) {
  TORCH_CHECK(t.dim() == 4, "TensorSpec needs a 4-d tensor");
  return {t.size(0), t.size(1), t.size(2), t.size(3)};
}

std::string to_string(const TensorSpec& spec) {
  std::ostringstream os;
  os << spec.batch << "x" << spec.channels << "x" << spec.height << "x" << spec.width;
  return os.str();
}

// ---------------------------------------------------------------------------

ConvBlockImpl::ConvBlockImpl(int64_t in_channels, int64_t out_channels, int64_t kernel,
                             int64_t stride, bool activation)
    : in_channels_(in_channels), out_channels_(out_channels), activation_(activation) {
  if (kernel < 1 || kernel > 3) {
    throw ConfigError("conv block kernel must be 1, 2 or 3, got " + std::to_string(kernel));
  }
  if (in_channels < 1 || out_channels < 1 || stride < 1) {
    throw ConfigError("conv block needs positive channels and stride");
  }
  conv = register_module(
      "conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, kernel)
                                    .stride(stride)
                                    .padding(kernel / 2)
                                    .bias(false)));
  bn = register_module(
      "bn", torch::nn::BatchNorm2d(
                torch::nn::BatchNorm2dOptions(out_channels).eps(kBnEps).momentum(kBnMomentum)));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x) {
  check_channels(x, in_channels_, "conv block");
  auto y = bn->forward(conv->forward(x));
  return activation_ ? torch::silu(y) : y;
}

ConvTransposeBlockImpl::ConvTransposeBlockImpl(int64_t in_channels, int64_t out_channels,
                                               int64_t kernel, int64_t stride, int64_t padding)
    : in_channels_(in_channels) {
  conv = register_module(
      "conv", torch::nn::ConvTranspose2d(
                  torch::nn::ConvTranspose2dOptions(in_channels, out_channels, kernel)
                      .stride(stride)
                      .padding(padding)
                      .bias(false)));
  bn = register_module(
      "bn", torch::nn::BatchNorm2d(
                torch::nn::BatchNorm2dOptions(out_channels).eps(kBnEps).momentum(kBnMomentum)));
}

torch::Tensor ConvTransposeBlockImpl::forward(const torch::Tensor& x) {
  check_channels(x, in_channels_, "transposed conv block");
  return torch::silu(bn->forward(conv->forward(x)));
}

// ---------------------------------------------------------------------------

BottleneckImpl::BottleneckImpl(int64_t in_channels, int64_t out_channels, bool shortcut)
    : add_(shortcut && in_channels == out_channels) {
  cv1 = register_module("cv1", ConvBlock(in_channels, out_channels, 3, 1));
  cv2 = register_module("cv2", ConvBlock(out_channels, out_channels, 3, 1));
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x) {
  auto y = cv2->forward(cv1->forward(x));
  return add_ ? x + y : y;
}

C2fImpl::C2fImpl(int64_t in_channels, int64_t out_channels, int64_t n_bottlenecks,
                 bool shortcut) {
  if (out_channels % 2 != 0) {
    throw ConfigError("c2f: output channel count " + std::to_string(out_channels) +
                      " cannot be split in half");
  }
  if (n_bottlenecks < 1) {
    throw ConfigError("c2f: needs at least one bottleneck");
  }
  hidden_ = out_channels / 2;
  cv1 = register_module("cv1", ConvBlock(in_channels, 2 * hidden_, 1, 1));
  cv2 = register_module("cv2", ConvBlock((2 + n_bottlenecks) * hidden_, out_channels, 1, 1));
  m = register_module("m", torch::nn::ModuleList());
  for (int64_t i = 0; i < n_bottlenecks; ++i) {
    m->push_back(Bottleneck(hidden_, hidden_, shortcut));
  }
}

torch::Tensor C2fImpl::forward(const torch::Tensor& x) {
  auto halves = cv1->forward(x).chunk(2, 1);
  std::vector<torch::Tensor> parts{halves[0], halves[1]};
  parts.reserve(2 + m->size());
  for (const auto& block : *m) {
    parts.push_back(block->as<Bottleneck>()->forward(parts.back()));
  }
  return cv2->forward(torch::cat(parts, 1));
}

SPPFImpl::SPPFImpl(int64_t in_channels, int64_t out_channels, int64_t pool_kernel)
    : pool_kernel_(pool_kernel) {
  const int64_t hidden = in_channels / 2;
  cv1 = register_module("cv1", ConvBlock(in_channels, hidden, 1, 1));
  cv2 = register_module("cv2", ConvBlock(hidden * 4, out_channels, 1, 1));
}

torch::Tensor SPPFImpl::forward(const torch::Tensor& x) {
  auto y0 = cv1->forward(x);
  auto pool = [this](const torch::Tensor& t) {
    return torch::max_pool2d(t, {pool_kernel_, pool_kernel_}, {1, 1},
                             {pool_kernel_ / 2, pool_kernel_ / 2});
  };
  auto y1 = pool(y0);
  auto y2 = pool(y1);
  auto y3 = pool(y2);
  return cv2->forward(torch::cat({y0, y1, y2, y3}, 1));
}

// ---------------------------------------------------------------------------

AdaptiveConcatImpl::AdaptiveConcatImpl(int64_t neck_channels, int64_t backbone_channels,
                                       std::string level, double init_weight)
    : neck_channels_(neck_channels),
      backbone_channels_(backbone_channels),
      level_(std::move(level)) {
  weight = register_parameter("weight", torch::full({}, init_weight));
  fuse = register_module("fuse", ConvBlock(neck_channels + backbone_channels, neck_channels, 1, 1));
}

double AdaptiveConcatImpl::gate() const {
  return 1.0 / (1.0 + std::exp(-weight.item<double>()));
}

torch::Tensor AdaptiveConcatImpl::forward(const torch::Tensor& x_neck,
                                          const torch::Tensor& x_backbone) {
  check_channels(x_neck, neck_channels_, "adaptive concat (neck input)");
  check_channels(x_backbone, backbone_channels_, "adaptive concat (backbone input)");
  if (x_neck.size(2) != x_backbone.size(2) || x_neck.size(3) != x_backbone.size(3)) {
    throw ShapeError("adaptive concat at level " + level_ + ": neck feature " +
                     to_string(TensorSpec::of(x_neck)) + " and backbone feature " +
                     to_string(TensorSpec::of(x_backbone)) + " differ in spatial size");
  }
  if (is_training()) {
    auto g = torch::sigmoid(weight);
    return g * fuse->forward(torch::cat({x_neck, x_backbone}, 1)) + (1 - g) * x_neck;
  }
  if (concat_active()) {
    return fuse->forward(torch::cat({x_neck, x_backbone}, 1));
  }
  return x_neck;
}

// ---------------------------------------------------------------------------

SegmentHeadImpl::SegmentHeadImpl(int64_t in_channels, int64_t num_classes)
    : in_channels_(in_channels) {
  constexpr int64_t fd = kFeatureDim;
  cv1 = register_module("cv1", ConvBlock(in_channels, fd, 3, 1));
  upsample = register_module("upsample", ConvTransposeBlock(fd, fd / 2, 2, 2, 0));
  cv2 = register_module("cv2", ConvBlock(fd / 2, fd / 4, 3, 1));
  cv3 = register_module("cv3", ConvBlock(fd / 4, num_classes + 1, 1, 1, /*activation=*/false));
}

torch::Tensor SegmentHeadImpl::forward(const torch::Tensor& x) {
  check_channels(x, in_channels_, "segment head");
  return cv3->forward(cv2->forward(upsample->forward(cv1->forward(x))));
}

// ---------------------------------------------------------------------------

DetectHeadImpl::DetectHeadImpl(int64_t num_classes, std::vector<int64_t> in_channels,
                               std::vector<int64_t> strides, int64_t reg_max)
    : nc_(num_classes), reg_max_(reg_max), strides_(std::move(strides)) {
  if (in_channels.size() != 3 || strides_.size() != 3) {
    throw ConfigError("detect head needs exactly 3 input scales, got " +
                      std::to_string(in_channels.size()));
  }
  if (num_classes < 1 || reg_max < 2) {
    throw ConfigError("detect head needs nc >= 1 and reg_max >= 2");
  }
  const int64_t c_box = std::max<int64_t>({16, in_channels[0] / 4, reg_max * 4});
  const int64_t c_cls = std::max<int64_t>(in_channels[0], std::min<int64_t>(nc_, 100));
  box_branch = register_module("box", torch::nn::ModuleList());
  cls_branch = register_module("cls", torch::nn::ModuleList());
  for (int64_t ch : in_channels) {
    box_branch->push_back(torch::nn::Sequential(
        ConvBlock(ch, c_box, 3, 1), ConvBlock(c_box, c_box, 3, 1),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(c_box, 4 * reg_max, 1))));
    cls_branch->push_back(torch::nn::Sequential(
        ConvBlock(ch, c_cls, 3, 1), ConvBlock(c_cls, c_cls, 3, 1),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(c_cls, nc_, 1))));
  }
}

void DetectHeadImpl::init_biases(int64_t image_size) {
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < strides_.size(); ++i) {
    auto box_last = (*box_branch)[i]->as<torch::nn::Sequential>()->ptr(2)->as<torch::nn::Conv2d>();
    auto cls_last = (*cls_branch)[i]->as<torch::nn::Sequential>()->ptr(2)->as<torch::nn::Conv2d>();
    box_last->bias.fill_(1.0);
    const double cells = std::pow(static_cast<double>(image_size) / strides_[i], 2);
    cls_last->bias.fill_(std::log(5.0 / nc_ / cells));
  }
}

DetOutput DetectHeadImpl::forward(const std::vector<torch::Tensor>& feats) {
  if (feats.size() != strides_.size()) {
    throw ShapeError("detect head expects " + std::to_string(strides_.size()) +
                     " scales, got " + std::to_string(feats.size()));
  }
  DetOutput out;
  out.raw.reserve(feats.size());
  for (std::size_t i = 0; i < feats.size(); ++i) {
    auto box = (*box_branch)[i]->as<torch::nn::Sequential>()->forward(feats[i]);
    auto cls = (*cls_branch)[i]->as<torch::nn::Sequential>()->forward(feats[i]);
    out.raw.push_back(torch::cat({box, cls}, 1));
  }
  if (is_training()) {
    return out;
  }

  std::vector<std::pair<int64_t, int64_t>> grid;
  std::vector<torch::Tensor> flat;
  for (const auto& t : out.raw) {
    grid.emplace_back(t.size(2), t.size(3));
    flat.push_back(t.flatten(2));
  }
  auto all = torch::cat(flat, 2);  // B x no x A
  auto anchors = make_anchors(grid, strides_, all.options());
  auto box_logits = all.slice(1, 0, 4 * reg_max_);
  auto cls_logits = all.slice(1, 4 * reg_max_);
  auto boxes = decode_dfl(box_logits, anchors, reg_max_);  // B x A x 4
  out.decoded = torch::cat({boxes.transpose(1, 2), torch::sigmoid(cls_logits)}, 1);
  return out;
}

}  // namespace mtp
