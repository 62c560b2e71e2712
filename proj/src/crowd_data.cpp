#include "msfanet/crowd_data.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string_view>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace msfa {

namespace fs = std::filesystem;
using nlohmann::json;

HeadAnnotations::HeadAnnotations(std::vector<Point> points, int image_width, int image_height)
    : points_(std::move(points)), width_(image_width), height_(image_height) {
  MSFA_EXPECT(width_ >= 0 && height_ >= 0, "negative annotation image size");
  for (const Point& p : points_) {
    if (!(p.x >= 0.0 && p.x < width_ && p.y >= 0.0 && p.y < height_)) {
      throw ContractError("annotation point (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                          ") outside " + std::to_string(width_) + "x" + std::to_string(height_) + " image");
    }
  }
}

AugmentationConfig AugmentationConfig::large_image_profile() {
  AugmentationConfig cfg;
  cfg.crop_size = 512;
  cfg.longest_side_cap = 2048;
  return cfg;
}

void AugmentationConfig::validate() const {
  MSFA_EXPECT(crop_size > 0, "crop_size must be positive");
  MSFA_EXPECT(!scales.empty(), "scales must not be empty");
  for (double s : scales) MSFA_EXPECT(s > 0.0, "every augmentation scale must be positive");
  if (longest_side_cap) MSFA_EXPECT(*longest_side_cap > 0, "longest_side_cap must be positive");
}

// ---------------------------------------------------------------------------
// Sidecars

namespace {

Point parse_point(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw SchemaError(where, "expected [x, y] number pair");
  }
  Point p{j[0].get<double>(), j[1].get<double>()};
  if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw SchemaError(where, "non-finite coordinate");
  return p;
}

}  // namespace

AnnotationSidecar parse_sidecar(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw LoadError(std::string("corrupt annotation document: ") + e.what());
  }
  if (!doc.is_object()) throw SchemaError("<root>", "expected a JSON object");

  AnnotationSidecar out;
  if (!doc.contains("image") || !doc["image"].is_string()) throw SchemaError("image", "missing or not a string");
  out.image = doc["image"].get<std::string>();

  if (!doc.contains("points") || !doc["points"].is_array()) throw SchemaError("points", "missing or not an array");
  const json& pts = doc["points"];
  out.points.reserve(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    out.points.push_back(parse_point(pts[i], "points[" + std::to_string(i) + "]"));
  }

  if (doc.contains("roi_polygons") && !doc["roi_polygons"].is_null()) {
    const json& polys = doc["roi_polygons"];
    if (!polys.is_array()) throw SchemaError("roi_polygons", "not an array");
    out.has_roi = true;
    for (std::size_t i = 0; i < polys.size(); ++i) {
      const std::string where = "roi_polygons[" + std::to_string(i) + "]";
      if (!polys[i].is_array() || polys[i].size() < 3) throw SchemaError(where, "polygon needs at least 3 vertices");
      Polygon poly;
      for (std::size_t v = 0; v < polys[i].size(); ++v) {
        poly.push_back(parse_point(polys[i][v], where + "[" + std::to_string(v) + "]"));
      }
      out.roi_polygons.push_back(std::move(poly));
    }
  }
  return out;
}

AnnotationSidecar read_sidecar(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open annotation sidecar " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_sidecar(ss.str());
}

LoadedSample make_sample(const AnnotationSidecar& sidecar, Tensor<float> image, std::string id) {
  MSFA_EXPECT(image.rank() == 3 && image.channels() == 3, "sample image must be (3, H, W)");
  const int h = image.height();
  const int w = image.width();
  LoadedSample out;
  std::vector<Point> pts;
  pts.reserve(sidecar.points.size());
  for (Point p : sidecar.points) {
    const Point q{std::clamp(p.x, 0.0, static_cast<double>(w - 1)), std::clamp(p.y, 0.0, static_cast<double>(h - 1))};
    if (q != p) ++out.clamped_points;
    pts.push_back(q);
  }
  out.sample.id = std::move(id);
  out.sample.annotations = HeadAnnotations(std::move(pts), w, h);
  if (sidecar.has_roi) out.sample.roi = rasterize_polygons(sidecar.roi_polygons, h, w);
  out.sample.image = std::move(image);
  return out;
}

LoadedSample load_annotations(const fs::path& sidecar_path) {
  AnnotationSidecar sc = read_sidecar(sidecar_path);
  const fs::path image_path = sidecar_path.parent_path() / sc.image;
  return make_sample(sc, load_image(image_path), sidecar_id(sidecar_path));
}

std::string sidecar_id(const fs::path& sidecar_path) {
  std::string name = sidecar_path.filename().string();
  for (std::string_view suffix : {std::string_view(kSidecarSuffix), std::string_view(".json")}) {
    if (name.size() > suffix.size() && name.ends_with(suffix)) return name.substr(0, name.size() - suffix.size());
  }
  return name;
}

// ---------------------------------------------------------------------------
// Images

namespace {

cv::Mat plane_view(Tensor<float>& t, int c) {
  return cv::Mat(t.height(), t.width(), CV_32F, t.data() + static_cast<std::size_t>(c) * t.plane());
}

Tensor<float> resize_image(const Tensor<float>& img, int new_h, int new_w) {
  Tensor<float> out({img.channels(), new_h, new_w});
  auto& src = const_cast<Tensor<float>&>(img);
  for (int c = 0; c < img.channels(); ++c) {
    cv::Mat dst = plane_view(out, c);
    cv::resize(plane_view(src, c), dst, cv::Size(new_w, new_h), 0, 0, cv::INTER_LINEAR);
  }
  return out;
}

RoiMask resize_mask(const RoiMask& m, int new_h, int new_w) {
  RoiMask out(new_h, new_w);
  cv::Mat src(m.height, m.width, CV_8U, const_cast<std::uint8_t*>(m.values.data()));
  cv::Mat dst(new_h, new_w, CV_8U, out.values.data());
  cv::resize(src, dst, cv::Size(new_w, new_h), 0, 0, cv::INTER_NEAREST);
  return out;
}

}  // namespace

Tensor<float> load_image(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw LoadError("cannot decode image " + path.string());
  Tensor<float> out({3, bgr.rows, bgr.cols});
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = static_cast<float>(row[x][2 - c]) / 255.0f;
        out.at(c, y, x) = (v - kImageMean[c]) / kImageStd[c];
      }
    }
  }
  return out;
}

void save_image(const Tensor<float>& image, const fs::path& path) {
  MSFA_EXPECT(image.rank() == 3 && image.channels() == 3, "save_image expects (3, H, W)");
  cv::Mat bgr(image.height(), image.width(), CV_8UC3);
  for (int y = 0; y < image.height(); ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = (image.at(c, y, x) * kImageStd[c] + kImageMean[c]) * 255.0f;
        row[x][2 - c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  if (!cv::imwrite(path.string(), bgr)) throw ExportError("cannot write image " + path.string());
}

std::array<int, 2> image_size(const fs::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (img.empty()) throw LoadError("cannot decode image " + path.string());
  return {img.rows, img.cols};
}

// ---------------------------------------------------------------------------
// Ground truth

DensityMap generate_density_map(const HeadAnnotations& ann, double sigma) {
  MSFA_EXPECT(sigma > 0.0, "sigma must be positive");
  const int h = ann.image_height();
  const int w = ann.image_width();
  std::vector<double> acc(static_cast<std::size_t>(h) * w, 0.0);
  const double radius = 4.0 * sigma;
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  std::vector<double> gx;
  std::vector<double> gy;

  for (const Point& p : ann.points()) {
    int x0 = std::max(0, static_cast<int>(std::ceil(p.x - radius)));
    int x1 = std::min(w - 1, static_cast<int>(std::floor(p.x + radius)));
    int y0 = std::max(0, static_cast<int>(std::ceil(p.y - radius)));
    int y1 = std::min(h - 1, static_cast<int>(std::floor(p.y + radius)));
    if (x0 > x1) x0 = x1 = std::clamp(static_cast<int>(std::lround(p.x)), 0, w - 1);
    if (y0 > y1) y0 = y1 = std::clamp(static_cast<int>(std::lround(p.y)), 0, h - 1);

    // The kernel is separable, so the clipped 2D sum is the product of 1D sums.
    gx.assign(static_cast<std::size_t>(x1 - x0 + 1), 0.0);
    gy.assign(static_cast<std::size_t>(y1 - y0 + 1), 0.0);
    double sx = 0.0;
    double sy = 0.0;
    for (int x = x0; x <= x1; ++x) sx += gx[x - x0] = std::exp(-(x - p.x) * (x - p.x) * inv2s2);
    for (int y = y0; y <= y1; ++y) sy += gy[y - y0] = std::exp(-(y - p.y) * (y - p.y) * inv2s2);
    const double norm = 1.0 / (sx * sy);
    for (int y = y0; y <= y1; ++y) {
      const double wy = gy[y - y0] * norm;
      double* row = acc.data() + static_cast<std::size_t>(y) * w;
      for (int x = x0; x <= x1; ++x) row[x] += wy * gx[x - x0];
    }
  }

  DensityMap out(h, w, 1);
  std::transform(acc.begin(), acc.end(), out.values.values.begin(), [](double v) { return static_cast<float>(v); });
  return out;
}

DensityMap pad_to_multiple(const DensityMap& d, int multiple) {
  MSFA_EXPECT(multiple >= 1, "padding multiple must be >= 1");
  const int h = (d.height() + multiple - 1) / multiple * multiple;
  const int w = (d.width() + multiple - 1) / multiple * multiple;
  if (h == d.height() && w == d.width()) return d;
  DensityMap out(h, w, d.scale);
  for (int y = 0; y < d.height(); ++y) {
    std::copy_n(&d.values(y, 0), d.width(), &out.values(y, 0));
  }
  return out;
}

DensityMap downsample_density(const DensityMap& d, int factor) {
  MSFA_EXPECT(factor >= 1, "downsampling factor must be >= 1");
  MSFA_EXPECT(d.scale == 1, "downsample_density expects a full-resolution map");
  if (d.height() % factor != 0 || d.width() % factor != 0) {
    throw ContractError("density map " + std::to_string(d.height()) + "x" + std::to_string(d.width()) +
                        " is not divisible by " + std::to_string(factor) + "; pad first");
  }
  const int oh = d.height() / factor;
  const int ow = d.width() / factor;
  DensityMap out(oh, ow, factor);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double s = 0.0;
      for (int y = oy * factor; y < (oy + 1) * factor; ++y) {
        for (int x = ox * factor; x < (ox + 1) * factor; ++x) s += d.values(y, x);
      }
      out.values(oy, ox) = static_cast<float>(s);
    }
  }
  return out;
}

DensityMap make_target(const HeadAnnotations& ann, double sigma, int factor) {
  return downsample_density(pad_to_multiple(generate_density_map(ann, sigma), factor), factor);
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

CrowdSample resize_sample(const CrowdSample& s, int new_h, int new_w, double fx, double fy) {
  CrowdSample out;
  out.id = s.id;
  out.image = resize_image(s.image, new_h, new_w);
  std::vector<Point> pts;
  pts.reserve(s.annotations.count());
  const double max_x = std::nextafter(static_cast<double>(new_w), 0.0);
  const double max_y = std::nextafter(static_cast<double>(new_h), 0.0);
  for (const Point& p : s.annotations.points()) {
    pts.push_back({std::min(p.x * fx, max_x), std::min(p.y * fy, max_y)});
  }
  out.annotations = HeadAnnotations(std::move(pts), new_w, new_h);
  if (s.roi) out.roi = resize_mask(*s.roi, new_h, new_w);
  return out;
}

}  // namespace

CrowdSample scale_sample(const CrowdSample& s, double factor) {
  MSFA_EXPECT(factor > 0.0, "scale factor must be positive");
  if (factor == 1.0) return s;
  const int new_h = std::max(1, static_cast<int>(std::lround(s.height() * factor)));
  const int new_w = std::max(1, static_cast<int>(std::lround(s.width() * factor)));
  return resize_sample(s, new_h, new_w, factor, factor);
}

CrowdSample cap_longest_side(const CrowdSample& s, int cap) {
  MSFA_EXPECT(cap > 0, "longest-side cap must be positive");
  const int longest = std::max(s.height(), s.width());
  if (longest <= cap) return s;
  return scale_sample(s, static_cast<double>(cap) / longest);
}

CrowdSample crop_at(const CrowdSample& s, int y0, int x0, int crop_h, int crop_w) {
  MSFA_EXPECT(y0 >= 0 && x0 >= 0 && y0 + crop_h <= s.height() && x0 + crop_w <= s.width(),
              "crop window outside image");
  CrowdSample out;
  out.id = s.id;
  out.image = Tensor<float>({s.image.channels(), crop_h, crop_w});
  for (int c = 0; c < s.image.channels(); ++c) {
    for (int y = 0; y < crop_h; ++y) {
      std::copy_n(&s.image.at(c, y0 + y, x0), crop_w, &out.image.at(c, y, 0));
    }
  }
  std::vector<Point> pts;
  for (const Point& p : s.annotations.points()) {
    if (p.x >= x0 && p.x < x0 + crop_w && p.y >= y0 && p.y < y0 + crop_h) pts.push_back({p.x - x0, p.y - y0});
  }
  out.annotations = HeadAnnotations(std::move(pts), crop_w, crop_h);
  if (s.roi) {
    RoiMask m(crop_h, crop_w);
    for (int y = 0; y < crop_h; ++y) std::copy_n(&(*s.roi)(y0 + y, x0), crop_w, &m(y, 0));
    out.roi = std::move(m);
  }
  return out;
}

CrowdSample random_crop(const CrowdSample& s, const AugmentationConfig& cfg, Rng& rng) {
  cfg.validate();
  const int crop = cfg.crop_size;
  if (s.height() < crop || s.width() < crop) {
    const double f = static_cast<double>(crop) / std::min(s.height(), s.width());
    const int new_h = std::max(crop, static_cast<int>(std::lround(s.height() * f)));
    const int new_w = std::max(crop, static_cast<int>(std::lround(s.width() * f)));
    return random_crop(resize_sample(s, new_h, new_w, static_cast<double>(new_w) / s.width(),
                                     static_cast<double>(new_h) / s.height()),
                       cfg, rng);
  }
  const int y0 = uniform_int(rng, 0, s.height() - crop);
  const int x0 = uniform_int(rng, 0, s.width() - crop);
  return crop_at(s, y0, x0, crop, crop);
}

CrowdSample random_crop(const CrowdSample& s, const AugmentationConfig& cfg) {
  Rng rng(cfg.rng_seed);
  return random_crop(s, cfg, rng);
}

HeadAnnotations mirror_annotations(const HeadAnnotations& ann) {
  std::vector<Point> pts;
  pts.reserve(ann.count());
  const double last = ann.image_width() - 1;
  // Points in the last pixel's right half would map below zero; pin them to 0.
  for (const Point& p : ann.points()) pts.push_back({std::max(0.0, last - p.x), p.y});
  return HeadAnnotations(std::move(pts), ann.image_width(), ann.image_height());
}

DensityMap mirror_density(const DensityMap& d) {
  DensityMap out(d.height(), d.width(), d.scale);
  for (int y = 0; y < d.height(); ++y) {
    for (int x = 0; x < d.width(); ++x) out.values(y, x) = d.values(y, d.width() - 1 - x);
  }
  return out;
}

CrowdSample horizontal_mirror(const CrowdSample& s) {
  CrowdSample out;
  out.id = s.id;
  out.image = Tensor<float>(s.image.shape());
  const int w = s.width();
  for (int c = 0; c < s.image.channels(); ++c) {
    for (int y = 0; y < s.height(); ++y) {
      for (int x = 0; x < w; ++x) out.image.at(c, y, x) = s.image.at(c, y, w - 1 - x);
    }
  }
  out.annotations = mirror_annotations(s.annotations);
  if (s.roi) {
    RoiMask m(s.roi->height, s.roi->width);
    for (int y = 0; y < m.height; ++y) {
      for (int x = 0; x < m.width; ++x) m(y, x) = (*s.roi)(y, m.width - 1 - x);
    }
    out.roi = std::move(m);
  }
  return out;
}

CrowdSample augment(const CrowdSample& s, const AugmentationConfig& cfg, Rng& rng) {
  cfg.validate();
  CrowdSample cur = cfg.longest_side_cap ? cap_longest_side(s, *cfg.longest_side_cap) : s;
  const double factor = cfg.scales[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(cfg.scales.size()) - 1))];
  if (factor != 1.0) cur = scale_sample(cur, factor);
  cur = random_crop(cur, cfg, rng);
  if (cfg.mirror && uniform_int(rng, 0, 1) == 1) cur = horizontal_mirror(cur);
  return cur;
}

// ---------------------------------------------------------------------------
// ROI

namespace {

bool inside_polygon(const Polygon& poly, double px, double py) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > py) != (b.y > py) && px < (b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x) inside = !inside;
  }
  return inside;
}

}  // namespace

RoiMask rasterize_polygons(const std::vector<Polygon>& polygons, int height, int width) {
  RoiMask m(height, width);
  for (const Polygon& poly : polygons) {
    if (poly.size() < 3) continue;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        if (!m(y, x) && inside_polygon(poly, x, y)) m(y, x) = 1;
      }
    }
  }
  return m;
}

RoiMask downsample_mask(const RoiMask& roi, int factor) {
  MSFA_EXPECT(factor >= 1, "mask downsampling factor must be >= 1");
  const int oh = (roi.height + factor - 1) / factor;
  const int ow = (roi.width + factor - 1) / factor;
  RoiMask out(oh, ow);
  for (int y = 0; y < roi.height; ++y) {
    for (int x = 0; x < roi.width; ++x) {
      if (roi(y, x)) out(y / factor, x / factor) = 1;
    }
  }
  return out;
}

DensityMap apply_roi_mask(const DensityMap& d, const RoiMask& roi) {
  const RoiMask* mask = &roi;
  RoiMask pooled;
  if (roi.height != d.height() || roi.width != d.width()) {
    pooled = downsample_mask(roi, d.scale);
    if (pooled.height != d.height() || pooled.width != d.width()) {
      throw ContractError("ROI " + std::to_string(roi.height) + "x" + std::to_string(roi.width) +
                          " does not match density map " + std::to_string(d.height()) + "x" +
                          std::to_string(d.width()) + " at scale " + std::to_string(d.scale));
    }
    mask = &pooled;
  }
  DensityMap out = d;
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    if (!mask->values[i]) out.values.values[i] = 0.0f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

std::vector<Fold> kfold_splits(const std::vector<std::string>& sample_ids, int k, std::uint64_t seed) {
  MSFA_EXPECT(k >= 2, "k-fold needs k >= 2");
  const int n = static_cast<int>(sample_ids.size());
  if (k > n) throw ContractError("k = " + std::to_string(k) + " exceeds the number of samples (" + std::to_string(n) + ")");

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Fold> folds(static_cast<std::size_t>(k));
  std::vector<int> fold_of(static_cast<std::size_t>(n));
  int pos = 0;
  for (int f = 0; f < k; ++f) {
    const int len = n / k + (f < n % k ? 1 : 0);
    for (int i = 0; i < len; ++i, ++pos) {
      fold_of[static_cast<std::size_t>(order[pos])] = f;
      folds[f].test_ids.push_back(sample_ids[order[pos]]);
    }
  }
  for (int f = 0; f < k; ++f) {
    for (int i = 0; i < n; ++i) {
      if (fold_of[i] != f) folds[f].train_ids.push_back(sample_ids[i]);
    }
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

DensityProfile parse_profile(const std::string& name) {
  if (name == "uniform") return DensityProfile::uniform;
  if (name == "perspective") return DensityProfile::perspective;
  throw ContractError("unknown density profile '" + name + "' (expected uniform or perspective)");
}

std::string to_string(DensityProfile p) { return p == DensityProfile::uniform ? "uniform" : "perspective"; }

CrowdSample synthesize_scene(std::uint64_t seed, int count, int height, int width, DensityProfile profile) {
  MSFA_EXPECT(count >= 0, "scene head count must be non-negative");
  MSFA_EXPECT(height > 0 && width > 0, "scene size must be positive");
  Rng rng(derive_seed(seed, 0));

  // Background: smooth two-tone gradient modulated by a low-frequency texture.
  std::array<double, 3> base{};
  for (double& b : base) b = uniform_real(rng, 0.45, 0.7);
  const double fx = uniform_real(rng, 1.0, 4.0) * 2.0 * M_PI / width;
  const double fy = uniform_real(rng, 1.0, 4.0) * 2.0 * M_PI / height;
  const double phase = uniform_real(rng, 0.0, 2.0 * M_PI);
  std::vector<double> rgb(3 * static_cast<std::size_t>(height) * width);
  std::normal_distribution<double> noise(0.0, 0.02);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double tex = 0.08 * std::sin(fx * x + phase) * std::cos(fy * y) + 0.05 * (static_cast<double>(y) / height);
      for (int c = 0; c < 3; ++c) {
        rgb[(static_cast<std::size_t>(c) * height + y) * width + x] = base[c] + tex + noise(rng);
      }
    }
  }

  // Heads.
  std::vector<Point> pts;
  pts.reserve(static_cast<std::size_t>(count));
  std::discrete_distribution<int> band(kPerspectiveBandWeights.begin(), kPerspectiveBandWeights.end());
  for (int i = 0; i < count; ++i) {
    Point p;
    p.x = uniform_real(rng, 0.0, width);
    if (profile == DensityProfile::uniform) {
      p.y = uniform_real(rng, 0.0, height);
    } else {
      const int b = band(rng);
      p.y = uniform_real(rng, b * height / 3.0, (b + 1) * height / 3.0);
    }
    p.x = std::min(p.x, std::nextafter(static_cast<double>(width), 0.0));
    p.y = std::min(p.y, std::nextafter(static_cast<double>(height), 0.0));
    pts.push_back(p);
  }
  for (const Point& p : pts) {
    const double r = profile == DensityProfile::uniform ? 2.5 : 1.5 + 3.5 * (p.y / height);
    const double darkness = uniform_real(rng, 0.55, 0.8);
    const int reach = static_cast<int>(std::ceil(3.0 * r));
    for (int y = std::max(0, static_cast<int>(p.y) - reach); y <= std::min(height - 1, static_cast<int>(p.y) + reach); ++y) {
      for (int x = std::max(0, static_cast<int>(p.x) - reach); x <= std::min(width - 1, static_cast<int>(p.x) + reach); ++x) {
        const double d2 = (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y);
        const double k = 1.0 - darkness * std::exp(-d2 / (2.0 * r * r));
        for (int c = 0; c < 3; ++c) rgb[(static_cast<std::size_t>(c) * height + y) * width + x] *= k;
      }
    }
  }

  // Quantize to 8 bits so the in-memory scene equals its PNG round trip.
  CrowdSample s;
  s.id = "synth_" + std::to_string(seed);
  s.image = Tensor<float>({3, height, width});
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < static_cast<std::size_t>(height) * width; ++i) {
      const double v = std::clamp(rgb[c * static_cast<std::size_t>(height) * width + i], 0.0, 1.0);
      const float q = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
      s.image.data()[c * static_cast<std::size_t>(height) * width + i] = (q - kImageMean[c]) / kImageStd[c];
    }
  }
  s.annotations = HeadAnnotations(std::move(pts), width, height);
  return s;
}

// ---------------------------------------------------------------------------
// Raw density export

void write_density(const DensityMap& d, const fs::path& base) {
  fs::path bin = base;
  bin += ".bin";
  fs::path hdr = base;
  hdr += ".json";
  std::vector<char> bytes(d.values.size() * sizeof(float));
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(d.values.values[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  std::ofstream out(bin, std::ios::binary | std::ios::trunc);
  if (!out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw ExportError("cannot write " + bin.string());
  }
  json j{{"height", d.height()}, {"width", d.width()}, {"scale", d.scale}, {"sum", d.sum()}};
  std::ofstream jh(hdr, std::ios::trunc);
  if (!(jh << j.dump(2) << '\n')) throw ExportError("cannot write " + hdr.string());
}

DensityMap read_density(const fs::path& base) {
  fs::path bin = base;
  bin += ".bin";
  fs::path hdr = base;
  hdr += ".json";
  std::ifstream jh(hdr);
  if (!jh) throw LoadError("cannot open " + hdr.string());
  json j;
  try {
    jh >> j;
  } catch (const json::exception& e) {
    throw LoadError("corrupt density header " + hdr.string() + ": " + e.what());
  }
  for (const char* key : {"height", "width", "scale"}) {
    if (!j.contains(key) || !j[key].is_number_integer()) throw SchemaError(key, "missing or not an integer");
  }
  DensityMap d(j["height"].get<int>(), j["width"].get<int>(), j["scale"].get<int>());
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw LoadError("cannot open " + bin.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != d.values.size() * 4) {
    throw LoadError(bin.string() + ": expected " + std::to_string(d.values.size() * 4) + " bytes, found " +
                    std::to_string(bytes.size()));
  }
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[i * 4 + b])) << (8 * b);
    d.values.values[i] = std::bit_cast<float>(bits);
  }
  return d;
}

}  // namespace msfa
