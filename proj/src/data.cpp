#include "mtp/data.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mtp/errors.hpp"

namespace fs = std::filesystem;

namespace mtp {

namespace {

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path find_image(const DatasetSpec& spec, const std::string& id) {
  for (const char* ext : {".png", ".jpg", ".jpeg", ".bmp"}) {
    auto p = spec.root / "images" / spec.split / (id + ext);
    if (fs::exists(p)) return p;
  }
  throw DataError("no image for sample '" + id + "' under " +
                  (spec.root / "images" / spec.split).string());
}

cv::Matx23d compose(const cv::Matx23d& outer, const cv::Matx23d& inner) {
  cv::Matx33d o(outer(0, 0), outer(0, 1), outer(0, 2), outer(1, 0), outer(1, 1), outer(1, 2), 0, 0, 1);
  cv::Matx33d i(inner(0, 0), inner(0, 1), inner(0, 2), inner(1, 0), inner(1, 1), inner(1, 2), 0, 0, 1);
  cv::Matx33d r = o * i;
  return {r(0, 0), r(0, 1), r(0, 2), r(1, 0), r(1, 1), r(1, 2)};
}

cv::Point2d apply(const cv::Matx23d& m, double x, double y) {
  return {m(0, 0) * x + m(0, 1) * y + m(0, 2), m(1, 0) * x + m(1, 1) * y + m(1, 2)};
}

cv::Rect2d transform_rect(const cv::Matx23d& m, const cv::Rect2d& r) {
  const cv::Point2d corners[] = {apply(m, r.x, r.y), apply(m, r.x + r.width, r.y),
                                 apply(m, r.x, r.y + r.height),
                                 apply(m, r.x + r.width, r.y + r.height)};
  double x0 = corners[0].x, x1 = x0, y0 = corners[0].y, y1 = y0;
  for (const auto& c : corners) {
    x0 = std::min(x0, c.x);
    x1 = std::max(x1, c.x);
    y0 = std::min(y0, c.y);
    y1 = std::max(y1, c.y);
  }
  return {x0, y0, x1 - x0, y1 - y0};
}

cv::Rect2d intersect(const cv::Rect2d& a, const cv::Rect2d& b) {
  const double x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  const double x1 = std::min(a.x + a.width, b.x + b.width);
  const double y1 = std::min(a.y + a.height, b.y + b.height);
  if (x1 <= x0 || y1 <= y0) return {};
  return {x0, y0, x1 - x0, y1 - y0};
}

// Continuous (pixel-corner) affine -> OpenCV index-space inverse map.
cv::Matx23d index_space_inverse(const cv::Matx23d& m) {
  cv::Matx23d idx = m;
  idx(0, 2) = m(0, 2) + 0.5 * (m(0, 0) + m(0, 1)) - 0.5;
  idx(1, 2) = m(1, 2) + 0.5 * (m(1, 0) + m(1, 1)) - 0.5;
  cv::Matx23d inv;
  cv::invertAffineTransform(idx, inv);
  return inv;
}

// Nearest lookup straight from the continuous inverse in double precision:
// output pixel centre -> source point -> containing pixel. warpAffine's
// fixed-point coordinates shift boundary pixels of thin masks.
void warp_mask_nearest(const cv::Mat& src, const cv::Matx23d& m, const cv::Rect& roi, cv::Mat& out) {
  cv::Matx23d inv;
  cv::invertAffineTransform(m, inv);
  for (int y = roi.y; y < roi.y + roi.height; ++y) {
    uint8_t* row = out.ptr<uint8_t>(y);
    const double cy = y + 0.5;
    for (int x = roi.x; x < roi.x + roi.width; ++x) {
      const double cx = x + 0.5;
      const double sx = std::floor(inv(0, 0) * cx + inv(0, 1) * cy + inv(0, 2));
      const double sy = std::floor(inv(1, 0) * cx + inv(1, 1) * cy + inv(1, 2));
      row[x] = (sx >= 0 && sy >= 0 && sx < src.cols && sy < src.rows)
                   ? src.at<uint8_t>(static_cast<int>(sy), static_cast<int>(sx))
                   : 0;
    }
  }
}

}  // namespace

Rng make_rng(uint64_t seed, uint64_t a, uint64_t b) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(a), static_cast<uint32_t>(a >> 32),
                    static_cast<uint32_t>(b), static_cast<uint32_t>(b >> 32)};
  return Rng(seq);
}

std::vector<NormalizedBox> Sample::normalized() const {
  std::vector<NormalizedBox> out;
  const float w = static_cast<float>(image.cols), h = static_cast<float>(image.rows);
  for (const auto& o : objects) {
    out.push_back({o.cls, (o.box.x1 + o.box.x2) / 2 / w, (o.box.y1 + o.box.y2) / 2 / h,
                   o.box.width() / w, o.box.height() / h});
  }
  return out;
}

std::map<std::string, int> DatasetSpec::default_class_map() {
  return {{"car", 0}, {"bus", 0}, {"truck", 0}, {"train", 0}, {"vehicle", 0}};
}

std::vector<std::string> read_manifest(const DatasetSpec& spec) {
  const auto manifest = spec.root / (spec.split + ".txt");
  std::vector<std::string> ids;
  if (fs::exists(manifest)) {
    std::istringstream in(read_text(manifest));
    std::string line;
    while (std::getline(in, line)) {
      line.erase(line.find_last_not_of(" \t\r") + 1);
      if (!line.empty()) ids.push_back(line);
    }
    return ids;
  }
  const auto dir = spec.root / "images" / spec.split;
  if (!fs::is_directory(dir)) {
    throw DataError("dataset has neither " + manifest.string() + " nor " + dir.string());
  }
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) ids.push_back(entry.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<ObjectBox> parse_labels(const std::string& text, cv::Size size,
                                    const std::map<std::string, int>& class_map) {
  std::vector<ObjectBox> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string cls_token;
    if (!(ls >> cls_token)) continue;
    double cx, cy, w, h;
    if (!(ls >> cx >> cy >> w >> h)) {
      throw DataError("malformed label line " + std::to_string(line_no) + ": '" + line + "'");
    }
    int cls = 0;
    if (std::all_of(cls_token.begin(), cls_token.end(), ::isdigit)) {
      cls = std::stoi(cls_token);
    } else {
      auto it = class_map.find(lower(cls_token));
      if (it == class_map.end()) continue;  // not a detection class
      cls = it->second;
    }
    if (w <= 0 || h <= 0) continue;
    ObjectBox o;
    o.cls = cls;
    o.box.x1 = static_cast<float>(std::clamp((cx - w / 2) * size.width, 0.0, 1.0 * size.width));
    o.box.y1 = static_cast<float>(std::clamp((cy - h / 2) * size.height, 0.0, 1.0 * size.height));
    o.box.x2 = static_cast<float>(std::clamp((cx + w / 2) * size.width, 0.0, 1.0 * size.width));
    o.box.y2 = static_cast<float>(std::clamp((cy + h / 2) * size.height, 0.0, 1.0 * size.height));
    if (o.box.width() > 0 && o.box.height() > 0) out.push_back(o);
  }
  return out;
}

std::string format_labels(const Sample& sample) {
  std::string out;
  char buf[128];
  for (const auto& n : sample.normalized()) {
    std::snprintf(buf, sizeof(buf), "%d %.6f %.6f %.6f %.6f\n", n.cls, n.cx, n.cy, n.w, n.h);
    out += buf;
  }
  return out;
}

Sample load_sample(const DatasetSpec& spec, const std::string& id) {
  Sample s;
  s.id = id;
  const auto image_path = find_image(spec, id);
  s.image = cv::imread(image_path.string(), cv::IMREAD_COLOR);
  if (s.image.empty()) throw CorruptImageError("cannot decode image " + image_path.string());

  const auto label_path = spec.root / "labels" / "det" / spec.split / (id + ".txt");
  if (fs::exists(label_path)) {
    s.objects = parse_labels(read_text(label_path), s.image.size(), spec.class_map);
  }

  for (const auto& task : spec.tasks) {
    const auto mask_dir = spec.root / "masks" / task / spec.split;
    if (!fs::is_directory(mask_dir)) {
      throw DataError("missing mask directory for task '" + task + "': " + mask_dir.string());
    }
    const auto mask_path = mask_dir / (id + ".png");
    if (!fs::exists(mask_path)) {
      throw DataError("missing '" + task + "' mask for sample '" + id + "'");
    }
    cv::Mat raw = cv::imread(mask_path.string(), cv::IMREAD_GRAYSCALE);
    if (raw.empty()) throw DataError("cannot decode '" + task + "' mask for sample '" + id + "'");
    if (raw.size() != s.image.size()) {
      throw DataError("'" + task + "' mask of sample '" + id + "' does not match the image size");
    }
    cv::Mat mask;
    cv::threshold(raw, mask, 127, 1, cv::THRESH_BINARY);
    s.masks.push_back(mask);
  }
  return s;
}

void write_sample(const fs::path& root, const std::string& split,
                  const std::vector<std::string>& tasks, const Sample& s) {
  fs::create_directories(root / "images" / split);
  fs::create_directories(root / "labels" / "det" / split);
  if (!cv::imwrite((root / "images" / split / (s.id + ".png")).string(), s.image)) {
    throw DataError("cannot write image for " + s.id);
  }
  std::ofstream(root / "labels" / "det" / split / (s.id + ".txt")) << format_labels(s);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto dir = root / "masks" / tasks[t] / split;
    fs::create_directories(dir);
    cv::Mat scaled = s.masks.at(t) * 255;
    if (!cv::imwrite((dir / (s.id + ".png")).string(), scaled)) {
      throw DataError("cannot write mask for " + s.id);
    }
  }
}

// ---------------------------------------------------------------------------

Sample synthesize_scene(uint64_t seed, int index, cv::Size size) {
  Rng rng = make_rng(seed, static_cast<uint64_t>(index), 0x5CE7E);
  const int W = size.width, H = size.height;
  Sample s;
  char id[32];
  std::snprintf(id, sizeof(id), "syn_%06d", index);
  s.id = id;
  s.image = cv::Mat(size, CV_8UC3);

  const double horizon = H * uniform(rng, 0.35, 0.45);
  const cv::Vec3d sky_top(uniform(rng, 200, 255), uniform(rng, 150, 200), uniform(rng, 90, 140));
  const cv::Vec3d ground(uniform(rng, 40, 80), uniform(rng, 100, 140), uniform(rng, 40, 90));
  for (int y = 0; y < H; ++y) {
    const double t = y / std::max(horizon, 1.0);
    const cv::Vec3d c = y < horizon ? sky_top * (1.0 - 0.3 * t) : ground;
    s.image.row(y).setTo(cv::Scalar(c[0], c[1], c[2]));
  }

  // road trapezoid
  const double y_top = horizon + 0.02 * H;
  const double bl = W * uniform(rng, -0.2, 0.15), br = W * uniform(rng, 0.85, 1.2);
  const double tc = W * uniform(rng, 0.4, 0.6), thw = W * uniform(rng, 0.03, 0.08);
  const double tl = tc - thw, tr = tc + thw;
  std::vector<cv::Point> road{{static_cast<int>(std::lround(bl)), H},
                              {static_cast<int>(std::lround(br)), H},
                              {static_cast<int>(std::lround(tr)), static_cast<int>(std::lround(y_top))},
                              {static_cast<int>(std::lround(tl)), static_cast<int>(std::lround(y_top))}};
  cv::Mat drivable(size, CV_8UC1, cv::Scalar(0));
  cv::fillPoly(drivable, std::vector<std::vector<cv::Point>>{road}, cv::Scalar(1), cv::LINE_8);
  const int gray = uniform_int(rng, 90, 130);
  s.image.setTo(cv::Scalar(gray, gray, gray), drivable);

  auto road_x = [&](double frac, double y) {
    const double t = (y - y_top) / (H - y_top);
    const double left = tl + (bl - tl) * t, right = tr + (br - tr) * t;
    return left + frac * (right - left);
  };

  // lanes
  cv::Mat lane(size, CV_8UC1, cv::Scalar(0));
  const int n_lanes = uniform_int(rng, 2, 4);
  for (int i = 0; i < n_lanes; ++i) {
    const double frac = (i + 0.5) / n_lanes + uniform(rng, -0.05, 0.05);
    const double curve = W * uniform(rng, -0.03, 0.03);
    const double y_mid = (y_top + H) / 2;
    std::vector<cv::Point> pts{
        {static_cast<int>(std::lround(road_x(frac, H - 1))), H - 1},
        {static_cast<int>(std::lround(road_x(frac, y_mid) + curve)), static_cast<int>(std::lround(y_mid))},
        {static_cast<int>(std::lround(road_x(frac, y_top + 1))), static_cast<int>(std::lround(y_top + 1))}};
    const int thickness = uniform_int(rng, 3, 5);
    const bool yellow = uniform(rng, 0, 1) < 0.3;
    const int v = uniform_int(rng, 220, 255);
    const cv::Scalar color = yellow ? cv::Scalar(0, v, v) : cv::Scalar(v, v, v);
    cv::polylines(lane, std::vector<std::vector<cv::Point>>{pts}, false, cv::Scalar(1), thickness,
                  cv::LINE_8);
    cv::polylines(s.image, std::vector<std::vector<cv::Point>>{pts}, false, color, thickness,
                  cv::LINE_8);
  }
  lane &= drivable;

  // vehicles
  cv::Mat occupied(size, CV_8UC1, cv::Scalar(0));
  const int n_vehicles = uniform_int(rng, 1, 6);
  for (int attempt = 0; attempt < 60 && static_cast<int>(s.objects.size()) < n_vehicles; ++attempt) {
    const double t = uniform(rng, 0.15, 1.0);
    const double yb = y_top + (H - y_top) * t;
    const double k = (yb - y_top) / (H - y_top);
    const double w = W * (0.06 + 0.2 * k) * uniform(rng, 0.8, 1.2);
    const double h = w * uniform(rng, 0.6, 0.9);
    const double left = road_x(0.1, yb), right = road_x(0.9, yb);
    if (right - left < w) continue;
    const double xc = uniform(rng, left + w / 2, right - w / 2);
    int x1 = static_cast<int>(std::lround(xc - w / 2)), y1 = static_cast<int>(std::lround(yb - h));
    int x2 = static_cast<int>(std::lround(xc + w / 2)), y2 = static_cast<int>(std::lround(yb));
    x1 = std::clamp(x1, 0, W);
    x2 = std::clamp(x2, 0, W);
    y1 = std::clamp(y1, 0, H);
    y2 = std::clamp(y2, 0, H);
    if (x2 - x1 < 8 || y2 - y1 < 8) continue;
    const cv::Rect rect(x1, y1, x2 - x1, y2 - y1);
    const cv::Rect padded = (rect + cv::Size(4, 4) - cv::Point(2, 2)) & cv::Rect(0, 0, W, H);
    if (cv::countNonZero(occupied(padded)) > 0) continue;
    occupied(rect).setTo(1);

    const cv::Vec3d color(uniform(rng, 20, 255), uniform(rng, 20, 255), uniform(rng, 20, 255));
    for (int y = y1; y < y2; ++y) {
      const double shade = 1.0 - 0.45 * (y - y1) / std::max(1, y2 - y1);
      s.image(cv::Rect(x1, y, x2 - x1, 1)).setTo(cv::Scalar(color * shade));
    }
    const int wy1 = y1 + (y2 - y1) * 15 / 100, wy2 = y1 + (y2 - y1) * 40 / 100;
    const int wx1 = x1 + (x2 - x1) * 15 / 100, wx2 = x2 - (x2 - x1) * 15 / 100;
    if (wy2 > wy1 && wx2 > wx1) {
      s.image(cv::Rect(wx1, wy1, wx2 - wx1, wy2 - wy1)).setTo(cv::Scalar(color * 0.35));
    }
    s.objects.push_back({0, Box{static_cast<float>(x1), static_cast<float>(y1),
                                static_cast<float>(x2), static_cast<float>(y2)}});
  }
  drivable.setTo(0, occupied);
  lane.setTo(0, occupied);

  // mild sensor noise
  for (int y = 0; y < H; ++y) {
    auto* row = s.image.ptr<cv::Vec3b>(y);
    for (int x = 0; x < W; ++x) {
      const int n = static_cast<int>(rng() % 9) - 4;
      for (int c = 0; c < 3; ++c) row[x][c] = cv::saturate_cast<uint8_t>(row[x][c] + n);
    }
  }
  s.masks = {drivable, lane};
  return s;
}

std::map<std::string, std::vector<std::string>> generate_synthetic(
    const fs::path& root, const SyntheticOptions& options) {
  const std::vector<std::string> tasks{"drivable", "lane"};
  const cv::Size size(options.width, options.height);
  std::map<std::string, std::vector<std::string>> ids;
  auto emit = [&](const std::string& split, int first, int count) {
    auto& list = ids[split];
    for (int i = first; i < first + count; ++i) {
      auto s = synthesize_scene(options.seed, i, size);
      write_sample(root, split, tasks, s);
      list.push_back(s.id);
    }
    fs::create_directories(root);
    std::ofstream manifest(root / (split + ".txt"));
    for (const auto& id : list) manifest << id << "\n";
  };
  emit("train", 0, options.train_count);
  if (options.val_count > 0) emit("val", options.train_count, options.val_count);
  return ids;
}

// ---------------------------------------------------------------------------

Sample resize_sample(const Sample& sample, cv::Size target) {
  Sample out;
  out.id = sample.id;
  if (sample.image.size() == target) {
    out.image = sample.image.clone();
    for (const auto& m : sample.masks) out.masks.push_back(m.clone());
    out.objects = sample.objects;
    return out;
  }
  const double fx = static_cast<double>(target.width) / sample.image.cols;
  const double fy = static_cast<double>(target.height) / sample.image.rows;
  cv::resize(sample.image, out.image, target, 0, 0, cv::INTER_LINEAR);
  for (const auto& m : sample.masks) {
    cv::Mat r;
    cv::resize(m, r, target, 0, 0, cv::INTER_NEAREST_EXACT);
    out.masks.push_back(r);
  }
  for (auto o : sample.objects) {
    o.box = {static_cast<float>(o.box.x1 * fx), static_cast<float>(o.box.y1 * fy),
             static_cast<float>(o.box.x2 * fx), static_cast<float>(o.box.y2 * fy)};
    out.objects.push_back(o);
  }
  return out;
}

void TransformTrace::compose(const cv::Matx23d& outer, cv::Size new_size) {
  const cv::Rect2d bounds(0, 0, new_size.width, new_size.height);
  std::vector<Piece> kept;
  for (auto p : pieces) {
    p.affine = mtp::compose(outer, p.affine);
    p.region = intersect(transform_rect(outer, p.region), bounds);
    if (p.region.area() > 0) kept.push_back(p);
  }
  pieces = std::move(kept);
  out_size = new_size;
}

Sample render_pieces(std::span<const Sample* const> sources, const TransformTrace& trace,
                     const std::string& id) {
  if (sources.empty()) throw DataError("render_pieces needs at least one source");
  const cv::Size size = trace.out_size;
  const std::size_t n_masks = sources[0]->masks.size();
  Sample out;
  out.id = id.empty() ? sources[0]->id : id;
  out.image = cv::Mat(size, CV_8UC3, cv::Scalar::all(kImageFill));
  for (std::size_t t = 0; t < n_masks; ++t) out.masks.emplace_back(size, CV_8UC1, cv::Scalar(0));

  const cv::Rect2d bounds(0, 0, size.width, size.height);
  for (const auto& piece : trace.pieces) {
    if (piece.source < 0 || static_cast<std::size_t>(piece.source) >= sources.size()) {
      throw DataError("piece refers to a missing source");
    }
    const Sample& src = *sources[static_cast<std::size_t>(piece.source)];
    const int x0 = std::max(0, static_cast<int>(std::ceil(piece.region.x - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(piece.region.y - 0.5)));
    const int x1 = std::min(size.width,
                            static_cast<int>(std::ceil(piece.region.x + piece.region.width - 0.5)));
    const int y1 = std::min(size.height,
                            static_cast<int>(std::ceil(piece.region.y + piece.region.height - 0.5)));
    if (x1 > x0 && y1 > y0) {
      const cv::Rect roi(x0, y0, x1 - x0, y1 - y0);
      const cv::Matx23d inv = index_space_inverse(piece.affine);
      cv::Mat warped;
      cv::warpAffine(src.image, warped, inv, size, cv::INTER_LINEAR | cv::WARP_INVERSE_MAP,
                     cv::BORDER_CONSTANT, cv::Scalar::all(kImageFill));
      warped(roi).copyTo(out.image(roi));
      for (std::size_t t = 0; t < n_masks; ++t) {
        warp_mask_nearest(src.masks.at(t), piece.affine, roi, out.masks[t]);
      }
    }
    const cv::Rect2d clip = intersect(piece.region, bounds);
    for (const auto& o : src.objects) {
      const cv::Rect2d r = intersect(
          transform_rect(piece.affine, {o.box.x1, o.box.y1, o.box.width(), o.box.height()}), clip);
      if (r.width < kMinBoxSide || r.height < kMinBoxSide) continue;
      out.objects.push_back({o.cls, Box{static_cast<float>(r.x), static_cast<float>(r.y),
                                        static_cast<float>(r.x + r.width),
                                        static_cast<float>(r.y + r.height)}});
    }
  }
  return out;
}

TransformTrace mosaic_trace(std::span<const Sample* const, 4> samples, cv::Size out_size, Rng& rng,
                            std::optional<cv::Point> center) {
  const int s = out_size.width;
  if (out_size.height != s) throw ConfigError("mosaic needs a square output size");
  cv::Point c = center.value_or(
      cv::Point(uniform_int(rng, s / 2, 3 * s / 2), uniform_int(rng, s / 2, 3 * s / 2)));
  TransformTrace trace;
  trace.out_size = out_size;
  const cv::Rect2d canvas(0, 0, 2 * s, 2 * s);
  for (int k = 0; k < 4; ++k) {
    const int w = samples[k]->image.cols, h = samples[k]->image.rows;
    const double ox = (k % 2 == 0) ? c.x - w : c.x;
    const double oy = (k < 2) ? c.y - h : c.y;
    const cv::Rect2d tile = intersect(cv::Rect2d(ox, oy, w, h), canvas);
    if (tile.area() <= 0) continue;
    Piece p;
    p.source = k;
    p.affine = cv::Matx23d(0.5, 0, 0.5 * ox, 0, 0.5, 0.5 * oy);
    p.region = cv::Rect2d(tile.x * 0.5, tile.y * 0.5, tile.width * 0.5, tile.height * 0.5);
    trace.pieces.push_back(p);
  }
  return trace;
}

Sample mosaic(std::span<const Sample* const, 4> samples, Rng& rng, TransformTrace* trace,
              std::optional<cv::Point> center) {
  auto t = mosaic_trace(samples, samples[0]->image.size(), rng, center);
  auto out = render_pieces(std::span<const Sample* const>(samples.data(), 4), t, samples[0]->id);
  if (trace) *trace = std::move(t);
  return out;
}

cv::Mat photometric_jitter(const cv::Mat& image, Rng& rng, const HsvGains& gains) {
  const double r[3] = {uniform(rng, -1, 1) * gains.h + 1, uniform(rng, -1, 1) * gains.s + 1,
                       uniform(rng, -1, 1) * gains.v + 1};
  if (gains.h == 0 && gains.s == 0 && gains.v == 0) return image.clone();
  cv::Mat hsv;
  cv::cvtColor(image, hsv, cv::COLOR_BGR2HSV);
  cv::Mat lut(1, 256, CV_8UC3);
  for (int x = 0; x < 256; ++x) {
    lut.at<cv::Vec3b>(0, x) = {static_cast<uint8_t>(static_cast<int>(x * r[0]) % 180),
                               cv::saturate_cast<uint8_t>(x * r[1]),
                               cv::saturate_cast<uint8_t>(x * r[2])};
  }
  cv::LUT(hsv, lut, hsv);
  cv::Mat out;
  cv::cvtColor(hsv, out, cv::COLOR_HSV2BGR);
  return out;
}

GeometricDraw draw_geometric(const GeometricParams& params, cv::Size size, Rng& rng) {
  GeometricDraw d;
  d.scale = uniform(rng, 1 - params.scale, 1 + params.scale);
  d.tx = uniform(rng, -params.translate, params.translate) * size.width;
  d.ty = uniform(rng, -params.translate, params.translate) * size.height;
  d.flip = uniform(rng, 0, 1) < params.flip_p;
  return d;
}

cv::Matx23d geometric_affine(const GeometricDraw& d, cv::Size size) {
  const double cx = size.width / 2.0, cy = size.height / 2.0;
  cv::Matx23d m(d.scale, 0, cx - d.scale * cx + d.tx, 0, d.scale, cy - d.scale * cy + d.ty);
  if (d.flip) {
    m = compose(cv::Matx23d(-1, 0, size.width, 0, 1, 0), m);
  }
  return m;
}

Sample apply_affine(const Sample& sample, const cv::Matx23d& affine, TransformTrace* trace) {
  TransformTrace t;
  t.out_size = sample.image.size();
  t.pieces.push_back({0, cv::Matx23d(1, 0, 0, 0, 1, 0),
                      cv::Rect2d(0, 0, sample.image.cols, sample.image.rows)});
  t.compose(affine, sample.image.size());
  const Sample* src[] = {&sample};
  auto out = render_pieces(src, t, sample.id);
  if (trace) *trace = std::move(t);
  return out;
}

Sample geometric_jitter(const Sample& sample, Rng& rng, const GeometricParams& params,
                        TransformTrace* trace) {
  const auto d = draw_geometric(params, sample.image.size(), rng);
  return apply_affine(sample, geometric_affine(d, sample.image.size()), trace);
}

nlohmann::json AugmentConfig::to_json() const {
  return {{"enabled", enabled},
          {"mosaic", mosaic},
          {"close_mosaic", close_mosaic},
          {"hsv_h", hsv.h},
          {"hsv_s", hsv.s},
          {"hsv_v", hsv.v},
          {"translate", geometric.translate},
          {"scale", geometric.scale},
          {"fliplr", geometric.flip_p}};
}

AugmentConfig AugmentConfig::from_json(const nlohmann::json& j) {
  AugmentConfig a;
  a.enabled = j.value("enabled", a.enabled);
  a.mosaic = j.value("mosaic", a.mosaic);
  a.close_mosaic = j.value("close_mosaic", a.close_mosaic);
  a.hsv.h = j.value("hsv_h", a.hsv.h);
  a.hsv.s = j.value("hsv_s", a.hsv.s);
  a.hsv.v = j.value("hsv_v", a.hsv.v);
  a.geometric.translate = j.value("translate", a.geometric.translate);
  a.geometric.scale = j.value("scale", a.geometric.scale);
  a.geometric.flip_p = j.value("fliplr", a.geometric.flip_p);
  return a;
}

// ---------------------------------------------------------------------------

Batch Batch::to(const torch::Device& device) const {
  Batch b;
  b.images = images.to(device);
  b.det_targets = det_targets.to(device);
  for (const auto& m : masks) b.masks.push_back(m.to(device));
  b.ids = ids;
  return b;
}

Batch collate(std::span<const Sample> samples) {
  if (samples.empty()) throw DataError("cannot collate an empty batch");
  const int h = samples[0].image.rows, w = samples[0].image.cols;
  const std::size_t n_tasks = samples[0].masks.size();
  std::vector<torch::Tensor> images;
  std::vector<std::vector<torch::Tensor>> masks(n_tasks);
  std::vector<float> rows;
  Batch b;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.image.rows != h || s.image.cols != w || s.masks.size() != n_tasks) {
      throw DataError("batch samples differ in size or task count");
    }
    cv::Mat rgb;
    cv::cvtColor(s.image, rgb, cv::COLOR_BGR2RGB);
    images.push_back(torch::from_blob(rgb.data, {h, w, 3}, torch::kUInt8).clone());
    for (std::size_t t = 0; t < n_tasks; ++t) {
      cv::Mat m = s.masks[t].isContinuous() ? s.masks[t] : s.masks[t].clone();
      masks[t].push_back(torch::from_blob(m.data, {h, w}, torch::kUInt8).clone());
    }
    for (const auto& n : s.normalized()) {
      rows.insert(rows.end(), {static_cast<float>(i), static_cast<float>(n.cls), n.cx, n.cy, n.w, n.h});
    }
    b.ids.push_back(s.id);
  }
  b.images = torch::stack(images).permute({0, 3, 1, 2}).to(torch::kFloat32).div_(255.0);
  b.det_targets = torch::from_blob(rows.data(), {static_cast<int64_t>(rows.size() / 6), 6},
                                   torch::kFloat32)
                      .clone();
  for (auto& m : masks) b.masks.push_back(torch::stack(m).to(torch::kFloat32));
  return b;
}

Dataset::Dataset(DatasetSpec spec, int64_t input_size, bool strict)
    : spec_(std::move(spec)), input_size_(input_size) {
  const cv::Size target(static_cast<int>(input_size), static_cast<int>(input_size));
  for (const auto& id : read_manifest(spec_)) {
    try {
      auto s = load_sample(spec_, id);
      original_sizes_.push_back(s.image.size());
      samples_.push_back(resize_sample(s, target));
    } catch (const CorruptImageError& e) {
      if (strict) throw;
      std::cerr << "[warn] skipping sample '" << id << "': " << e.what() << "\n";
    }
  }
  if (samples_.empty()) {
    throw DataError("no usable samples in split '" + spec_.split + "' of " + spec_.root.string());
  }
}

Sample Dataset::augmented(std::size_t index, uint64_t seed, int epoch, const AugmentConfig& aug,
                          bool use_mosaic, TransformTrace* trace,
                          std::vector<std::size_t>* sources) const {
  const Sample& base = samples_.at(index);
  const cv::Size size = base.image.size();
  Rng rng = make_rng(seed, static_cast<uint64_t>(epoch), index);

  std::vector<std::size_t> picked{index};
  TransformTrace t;
  if (aug.enabled && use_mosaic && aug.mosaic) {
    for (int k = 0; k < 3; ++k) {
      picked.push_back(static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(size_t(samples_.size()) - 1))));
    }
    const Sample* four[] = {&samples_[picked[0]], &samples_[picked[1]], &samples_[picked[2]],
                            &samples_[picked[3]]};
    t = mosaic_trace(std::span<const Sample* const, 4>(four), size, rng);
  } else {
    t.out_size = size;
    t.pieces.push_back({0, cv::Matx23d(1, 0, 0, 0, 1, 0), cv::Rect2d(0, 0, size.width, size.height)});
  }
  if (aug.enabled) {
    t.compose(geometric_affine(draw_geometric(aug.geometric, size, rng), size), size);
  }

  std::vector<const Sample*> srcs;
  for (auto i : picked) srcs.push_back(&samples_[i]);
  Sample out = render_pieces(srcs, t, base.id);
  if (aug.enabled) out.image = photometric_jitter(out.image, rng, aug.hsv);
  if (trace) *trace = std::move(t);
  if (sources) *sources = std::move(picked);
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    uint64_t seed, int epoch, bool shuffle) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    Rng rng = make_rng(seed, static_cast<uint64_t>(epoch), 0xBA7C4);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return batches;
}

}  // namespace mtp
