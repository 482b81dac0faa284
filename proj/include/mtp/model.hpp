#pragma once

// Shared-backbone multi-task network: one backbone, a PAN detection neck with
// an anchor-free head, and N identical FPN segmentation necks (each gated by
// adaptive concatenation at every resolution level) with their mask heads.

#include <torch/torch.h>

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtp/blocks.hpp"

namespace mtp {

enum class Scale { n, s };

std::string to_string(Scale scale);
Scale parse_scale(const std::string& text);

struct ModelConfig {
  Scale scale = Scale::n;
  double depth_multiple = 0.33;
  double width_multiple = 0.25;
  int64_t nc_det = 1;
  std::vector<std::string> seg_tasks{"drivable", "lane"};
  std::vector<int64_t> strides{8, 16, 32};
  int64_t input_size = 640;
  int64_t reg_max = 16;

  /// Multipliers of the reference detector family: n = (0.33, 0.25),
  /// s = (0.33, 0.50).
  static ModelConfig for_scale(Scale scale);

  void validate() const;

  /// Scaled channel count; throws ConfigError when base * width is not an
  /// even integer.
  int64_t channels(int64_t base) const;
  /// Scaled repeat count, at least 1.
  int64_t depth(int64_t base) const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Multi-scale features keyed by stride.
struct FeaturePyramid {
  std::map<int64_t, torch::Tensor> levels;

  const torch::Tensor& at(int64_t stride) const;
};

/// The prediction list of one forward pass: detection output plus one mask
/// logit tensor per segmentation task, in config order.
struct PredictionBundle {
  DetOutput det;
  std::vector<torch::Tensor> seg_masks;
};

class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const ModelConfig& cfg);

  /// Returns strides {2, 4, 8, 16, 32}; the stride-32 entry is the SPPF output.
  FeaturePyramid forward(const torch::Tensor& images);

  std::map<int64_t, int64_t> channels() const { return channels_; }

  ConvBlock stem{nullptr};
  torch::nn::Sequential stage1{nullptr}, stage2{nullptr}, stage3{nullptr}, stage4{nullptr};
  SPPF sppf{nullptr};

 private:
  std::map<int64_t, int64_t> channels_;
};
TORCH_MODULE(Backbone);

/// Top-down then bottom-up path aggregation over strides 8, 16, 32.
class DetectionNeckImpl : public torch::nn::Module {
 public:
  DetectionNeckImpl(const ModelConfig& cfg, const std::map<int64_t, int64_t>& backbone_channels);

  std::vector<torch::Tensor> forward(const FeaturePyramid& pyramid);

  std::vector<int64_t> out_channels() const { return out_channels_; }

  C2f td_p4{nullptr}, td_p3{nullptr}, bu_p4{nullptr}, bu_p5{nullptr};
  ConvBlock down_p3{nullptr}, down_p4{nullptr};

 private:
  std::vector<int64_t> out_channels_;
};
TORCH_MODULE(DetectionNeck);

/// One level of a segmentation neck: upsampled neck feature gated with the
/// backbone feature of the same stride, then refined by a c2f.
class SegLevelImpl : public torch::nn::Module {
 public:
  SegLevelImpl(int64_t neck_channels, int64_t backbone_channels, int64_t out_channels,
               int64_t depth, int64_t stride);

  torch::Tensor forward(const torch::Tensor& x_neck, const torch::Tensor& x_backbone);

  int64_t stride() const { return stride_; }

  AdaptiveConcat acm{nullptr};
  C2f c2f{nullptr};

 private:
  int64_t stride_;
};
TORCH_MODULE(SegLevel);

/// Top-down FPN from stride 32 to stride 2.
class SegmentationNeckImpl : public torch::nn::Module {
 public:
  SegmentationNeckImpl(const ModelConfig& cfg,
                       const std::map<int64_t, int64_t>& backbone_channels);

  torch::Tensor forward(const FeaturePyramid& pyramid);

  int64_t out_channels() const { return out_channels_; }
  std::vector<SegLevel> levels() const { return levels_; }

  ConvBlock top{nullptr};

 private:
  std::vector<SegLevel> levels_;
  int64_t out_channels_ = 0;
};
TORCH_MODULE(SegmentationNeck);

struct GateState {
  std::string name;
  double weight = 0.0;
  double gate = 0.0;
  bool concat = false;
};

class MultiTaskNetImpl : public torch::nn::Module {
 public:
  explicit MultiTaskNetImpl(ModelConfig cfg);

  /// Images: B x 3 x S x S in [0, 1]. One backbone pass feeds every neck.
  PredictionBundle forward(const torch::Tensor& images);

  const ModelConfig& config() const { return cfg_; }
  int64_t backbone_passes() const { return backbone_passes_; }
  std::vector<GateState> gates() const;

  Backbone backbone{nullptr};
  DetectionNeck det_neck{nullptr};
  DetectHead det_head{nullptr};
  torch::nn::ModuleList seg_necks{nullptr};
  torch::nn::ModuleList seg_heads{nullptr};

 private:
  ModelConfig cfg_;
  int64_t backbone_passes_ = 0;
};
TORCH_MODULE(MultiTaskNet);

MultiTaskNet build(const ModelConfig& cfg);

/// Number of learnable scalars in a component. Selectors: "all", "none",
/// "backbone", "det_neck", "det_head", "seg_necks", "seg_heads",
/// "seg_neck.<i>", "seg_head.<i>", "acm". Unknown selectors throw ConfigError.
int64_t count_parameters(const MultiTaskNetImpl& model, const std::string& selector);

}  // namespace mtp
