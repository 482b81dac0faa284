#pragma once

// Dataset ingestion, synthetic scene generation, resizing and augmentation.
//
// On-disk layout (shared by BDD100K-style data and the synthetic generator):
//   <root>/{split}.txt                 one sample id per line
//   <root>/images/{split}/<id>.png|jpg
//   <root>/labels/det/{split}/<id>.txt  "class cx cy w h" per object, normalised
//   <root>/masks/{task}/{split}/<id>.png single channel, {0, 255}

#include <torch/torch.h>

#include <opencv2/core.hpp>

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mtp/postprocess.hpp"

namespace mtp {

using Rng = std::mt19937_64;

/// Deterministic generator for a (seed, a, b) triple.
Rng make_rng(uint64_t seed, uint64_t a = 0, uint64_t b = 0);

struct ObjectBox {
  int cls = 0;
  Box box;  // pixel xyxy
};

struct NormalizedBox {
  int cls = 0;
  float cx = 0, cy = 0, w = 0, h = 0;
};

struct Sample {
  std::string id;
  cv::Mat image;                  // H x W, 8UC3, BGR
  std::vector<ObjectBox> objects;  // clipped to the image
  std::vector<cv::Mat> masks;     // one 8UC1 {0, 1} mask per task

  std::vector<NormalizedBox> normalized() const;
};

struct DatasetSpec {
  std::filesystem::path root;
  std::string split = "train";
  std::map<std::string, int> class_map = default_class_map();
  std::vector<std::string> tasks{"drivable", "lane"};

  /// car, bus, truck and train merge into vehicle (0).
  static std::map<std::string, int> default_class_map();
};

std::vector<std::string> read_manifest(const DatasetSpec& spec);

/// Reads one sample. Mask pixels > 127 become 1. Missing masks or unreadable
/// images raise DataError naming the task / id.
Sample load_sample(const DatasetSpec& spec, const std::string& id);

/// Parses one label file body against an image size.
std::vector<ObjectBox> parse_labels(const std::string& text, cv::Size image_size,
                                    const std::map<std::string, int>& class_map);

/// Inverse of parse_labels for writing.
std::string format_labels(const Sample& sample);

void write_sample(const std::filesystem::path& root, const std::string& split,
                  const std::vector<std::string>& tasks, const Sample& sample);

// ---- synthetic road scenes -------------------------------------------------

struct SyntheticOptions {
  uint64_t seed = 0;
  int train_count = 8;
  int val_count = 0;
  int width = 640;
  int height = 640;
};

/// One deterministic scene: gray road trapezoid (drivable), 2-4 bright lane
/// polylines 3-5 px wide (lane), 1-6 shaded rectangles (vehicles). Lane and
/// drivable masks exclude pixels covered by vehicles.
Sample synthesize_scene(uint64_t seed, int index, cv::Size size);

/// Writes train/val splits in the dataset layout; returns the ids per split.
std::map<std::string, std::vector<std::string>> generate_synthetic(
    const std::filesystem::path& root, const SyntheticOptions& options);

// ---- geometry ----------------------------------------------------------------

/// Direct (aspect-distorting) resize: image bilinear, masks nearest, boxes
/// scaled per axis. Identity when the size already matches.
Sample resize_sample(const Sample& sample, cv::Size target);

/// A source-to-output affine valid inside `region` (output pixel coords,
/// continuous, pixel centres at +0.5). Output pixels whose centre falls in
/// no region are background.
struct Piece {
  int source = 0;
  cv::Matx23d affine = cv::Matx23d(1, 0, 0, 0, 1, 0);
  cv::Rect2d region;
};

struct TransformTrace {
  cv::Size out_size;
  std::vector<Piece> pieces;

  /// Applies `outer` after every piece and clips regions to the output.
  void compose(const cv::Matx23d& outer, cv::Size new_size);
};

inline constexpr uint8_t kImageFill = 114;
inline constexpr float kMinBoxSide = 2.0f;

/// Renders the pieces in a single resampling pass from the source samples.
/// Boxes are transformed, clipped to region and image, and dropped when a
/// side is shorter than 2 px.
Sample render_pieces(std::span<const Sample* const> sources, const TransformTrace& trace,
                     const std::string& id = {});

/// 2x2 mosaic: four tiles placed around a centre on a double-size canvas
/// which is then scaled back by one half. `center` (canvas coords) defaults
/// to a uniform draw in [s/2, 3s/2].
TransformTrace mosaic_trace(std::span<const Sample* const, 4> samples, cv::Size out_size, Rng& rng,
                            std::optional<cv::Point> center = std::nullopt);
Sample mosaic(std::span<const Sample* const, 4> samples, Rng& rng,
              TransformTrace* trace = nullptr, std::optional<cv::Point> center = std::nullopt);

struct HsvGains {
  double h = 0.015, s = 0.7, v = 0.4;
};

/// Random per-image HSV gains in [1 - g, 1 + g]. Zero gains leave the image
/// untouched.
cv::Mat photometric_jitter(const cv::Mat& image, Rng& rng, const HsvGains& gains = {});

struct GeometricParams {
  double translate = 0.1;
  double scale = 0.5;
  double flip_p = 0.5;
};

struct GeometricDraw {
  double scale = 1.0;
  double tx = 0.0;  // pixels
  double ty = 0.0;
  bool flip = false;
};

GeometricDraw draw_geometric(const GeometricParams& params, cv::Size size, Rng& rng);
/// Scale about the image centre, translate, then optionally mirror (x -> W - x).
cv::Matx23d geometric_affine(const GeometricDraw& draw, cv::Size size);

Sample apply_affine(const Sample& sample, const cv::Matx23d& affine,
                    TransformTrace* trace = nullptr);
Sample geometric_jitter(const Sample& sample, Rng& rng, const GeometricParams& params = {},
                        TransformTrace* trace = nullptr);

struct AugmentConfig {
  bool enabled = true;
  bool mosaic = true;
  int close_mosaic = 10;  // final epochs without mosaic
  HsvGains hsv;
  GeometricParams geometric;

  nlohmann::json to_json() const;
  static AugmentConfig from_json(const nlohmann::json& j);
};

// ---- dataset / batching ------------------------------------------------------

struct Batch {
  torch::Tensor images;       // B x 3 x S x S float in [0, 1], RGB
  torch::Tensor det_targets;  // K x 6: image, class, cx, cy, w, h (normalised)
  std::vector<torch::Tensor> masks;  // per task: B x S x S float {0, 1}
  std::vector<std::string> ids;

  Batch to(const torch::Device& device) const;
};

Batch collate(std::span<const Sample> samples);

class Dataset {
 public:
  /// Loads and resizes every sample of the split. With strict = false,
  /// samples whose image cannot be decoded are skipped with a warning;
  /// otherwise they throw. Missing files always throw.
  Dataset(DatasetSpec spec, int64_t input_size, bool strict = true);

  std::size_t size() const { return samples_.size(); }
  const DatasetSpec& spec() const { return spec_; }
  int64_t input_size() const { return input_size_; }

  /// Resized, un-augmented sample.
  const Sample& at(std::size_t index) const { return samples_.at(index); }
  /// Original-resolution size of a sample (for mapping predictions back).
  cv::Size original_size(std::size_t index) const { return original_sizes_.at(index); }

  /// Training view: fully determined by (seed, epoch, index).
  Sample augmented(std::size_t index, uint64_t seed, int epoch, const AugmentConfig& aug,
                   bool use_mosaic, TransformTrace* trace = nullptr,
                   std::vector<std::size_t>* sources = nullptr) const;

 private:
  DatasetSpec spec_;
  int64_t input_size_;
  std::vector<Sample> samples_;
  std::vector<cv::Size> original_sizes_;
};

/// Index batches for one epoch; shuffled deterministically from (seed, epoch).
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    uint64_t seed, int epoch, bool shuffle);

}  // namespace mtp
