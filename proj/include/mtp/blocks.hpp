#pragma once

// Neural building blocks: conv-norm-act unit, bottleneck, c2f, SPPF, the
// adaptive concatenation gate and the detection / segmentation heads.
//
// Every block follows the libtorch convention: the module's training flag
// selects between train-mode and eval-mode behaviour.

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace mtp {

struct TensorSpec {
  int64_t batch = 1;
  int64_t channels = 1;
  int64_t height = 1;
  int64_t width = 1;

  static TensorSpec of(const torch::Tensor& t);
  bool operator==(const TensorSpec&) const = default;
};

std::string to_string(const TensorSpec& spec);

/// Conv2d (no bias) -> BatchNorm2d -> SiLU. Padding keeps "same" geometry
/// for odd kernels, so output size is ceil(in / stride).
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(int64_t in_channels, int64_t out_channels, int64_t kernel = 1,
                int64_t stride = 1, bool activation = true);

  torch::Tensor forward(const torch::Tensor& x);

  int64_t in_channels() const { return in_channels_; }
  int64_t out_channels() const { return out_channels_; }

  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};

 private:
  int64_t in_channels_;
  int64_t out_channels_;
  bool activation_;
};
TORCH_MODULE(ConvBlock);

/// ConvTranspose2d (no bias) -> BatchNorm2d -> SiLU.
class ConvTransposeBlockImpl : public torch::nn::Module {
 public:
  ConvTransposeBlockImpl(int64_t in_channels, int64_t out_channels, int64_t kernel = 2,
                         int64_t stride = 2, int64_t padding = 0);

  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::ConvTranspose2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};

 private:
  int64_t in_channels_;
};
TORCH_MODULE(ConvTransposeBlock);

/// Two 3x3 conv blocks with an optional residual add (only when the
/// channel counts agree).
class BottleneckImpl : public torch::nn::Module {
 public:
  BottleneckImpl(int64_t in_channels, int64_t out_channels, bool shortcut = true);

  torch::Tensor forward(const torch::Tensor& x);

  ConvBlock cv1{nullptr};
  ConvBlock cv2{nullptr};

 private:
  bool add_;
};
TORCH_MODULE(Bottleneck);

/// Cross-stage block: 1x1 conv splits into two halves, a chain of
/// bottlenecks runs on the second half, and every intermediate output is
/// concatenated and fused by a final 1x1 conv.
class C2fImpl : public torch::nn::Module {
 public:
  C2fImpl(int64_t in_channels, int64_t out_channels, int64_t n_bottlenecks = 1,
          bool shortcut = false);

  torch::Tensor forward(const torch::Tensor& x);

  int64_t hidden_channels() const { return hidden_; }
  int64_t fusion_in_channels() const { return cv2->in_channels(); }

  ConvBlock cv1{nullptr};
  ConvBlock cv2{nullptr};
  torch::nn::ModuleList m{nullptr};

 private:
  int64_t hidden_;
};
TORCH_MODULE(C2f);

/// Spatial pyramid pooling (fast): three chained stride-1 max pools whose
/// outputs are concatenated with their input and fused by a 1x1 conv.
class SPPFImpl : public torch::nn::Module {
 public:
  SPPFImpl(int64_t in_channels, int64_t out_channels, int64_t pool_kernel = 5);

  torch::Tensor forward(const torch::Tensor& x);

  ConvBlock cv1{nullptr};
  ConvBlock cv2{nullptr};

 private:
  int64_t pool_kernel_;
};
TORCH_MODULE(SPPF);

/// Adaptive concatenation module.
///
/// Joins a neck feature with the backbone feature of identical resolution,
/// gated by a single learnable scalar initialised to 5.0. In eval mode the
/// gate is a hard switch: if sigmoid(weight) > 0.5 the fused concatenation
/// is returned, otherwise the neck input passes through untouched. In train
/// mode the two branches are blended with g = sigmoid(weight) so that the
/// scalar receives a gradient.
class AdaptiveConcatImpl : public torch::nn::Module {
 public:
  AdaptiveConcatImpl(int64_t neck_channels, int64_t backbone_channels,
                     std::string level = "", double init_weight = 5.0);

  torch::Tensor forward(const torch::Tensor& x_neck, const torch::Tensor& x_backbone);

  double gate() const;
  bool concat_active() const { return gate() > 0.5; }
  const std::string& level() const { return level_; }

  torch::Tensor weight;
  ConvBlock fuse{nullptr};

 private:
  int64_t neck_channels_;
  int64_t backbone_channels_;
  std::string level_;
};
TORCH_MODULE(AdaptiveConcat);

/// Lightweight mask head: cv1 (3x3, ch->32), stride-2 transposed conv
/// (32->16), cv2 (3x3, 16->8), cv3 (1x1, 8->nc+1). Returns raw logits at twice
/// the input resolution.
class SegmentHeadImpl : public torch::nn::Module {
 public:
  static constexpr int64_t kFeatureDim = 32;

  SegmentHeadImpl(int64_t in_channels, int64_t num_classes = 1);

  torch::Tensor forward(const torch::Tensor& x);

  ConvBlock cv1{nullptr};
  ConvTransposeBlock upsample{nullptr};
  ConvBlock cv2{nullptr};
  ConvBlock cv3{nullptr};

 private:
  int64_t in_channels_;
};
TORCH_MODULE(SegmentHead);

/// Output of the detection head. `raw` always holds one undecoded tensor per
/// scale (B x (4*reg_max+nc) x H x W); `decoded` is only filled in eval mode
/// and holds B x (4+nc) x A with pixel xyxy boxes followed by class
/// probabilities.
struct DetOutput {
  std::vector<torch::Tensor> raw;
  torch::Tensor decoded;
};

/// Decoupled anchor-free detection head without objectness.
class DetectHeadImpl : public torch::nn::Module {
 public:
  DetectHeadImpl(int64_t num_classes, std::vector<int64_t> in_channels,
                 std::vector<int64_t> strides, int64_t reg_max = 16);

  DetOutput forward(const std::vector<torch::Tensor>& feats);

  /// Prior-probability bias init for a given training image size.
  void init_biases(int64_t image_size);

  int64_t num_classes() const { return nc_; }
  int64_t reg_max() const { return reg_max_; }
  int64_t outputs_per_cell() const { return 4 * reg_max_ + nc_; }
  const std::vector<int64_t>& strides() const { return strides_; }

  torch::nn::ModuleList box_branch{nullptr};
  torch::nn::ModuleList cls_branch{nullptr};

 private:
  int64_t nc_;
  int64_t reg_max_;
  std::vector<int64_t> strides_;
};
TORCH_MODULE(DetectHead);

}  // namespace mtp
