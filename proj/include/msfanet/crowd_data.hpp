#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "msfanet/rng.hpp"
#include "msfanet/tensor.hpp"

namespace msfa {

/// Per-channel normalization applied to RGB images scaled to [0, 1].
inline constexpr std::array<float, 3> kImageMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageStd{0.229f, 0.224f, 0.225f};

inline constexpr double kDefaultSigma = 4.0;

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Head-center annotations of one image, in pixel coordinates with pixel
/// centers at integer positions. Every point lies in [0, width) x [0, height).
class HeadAnnotations {
 public:
  HeadAnnotations() = default;
  HeadAnnotations(std::vector<Point> points, int image_width, int image_height);

  const std::vector<Point>& points() const noexcept { return points_; }
  int image_width() const noexcept { return width_; }
  int image_height() const noexcept { return height_; }
  std::size_t count() const noexcept { return points_.size(); }

  friend bool operator==(const HeadAnnotations&, const HeadAnnotations&) = default;

 private:
  std::vector<Point> points_;
  int width_ = 0;
  int height_ = 0;
};

/// Non-negative grid whose sum is a person count. `scale` is the downsampling
/// factor relative to the source image (1 for full resolution, 8 for targets).
struct DensityMap {
  Grid<float> values;
  int scale = 1;

  DensityMap() = default;
  DensityMap(int h, int w, int s = 1) : values(h, w), scale(s) {}
  DensityMap(Grid<float> v, int s) : values(std::move(v)), scale(s) {}

  int height() const noexcept { return values.height; }
  int width() const noexcept { return values.width; }
  double sum() const { return values.sum(); }
  float& operator()(int y, int x) { return values(y, x); }
  float operator()(int y, int x) const { return values(y, x); }
};

using RoiMask = Grid<std::uint8_t>;
using Polygon = std::vector<Point>;

struct CrowdSample {
  std::string id;
  Tensor<float> image;  // (3, H, W), normalized with kImageMean / kImageStd
  HeadAnnotations annotations;
  std::optional<RoiMask> roi;

  int height() const { return image.height(); }
  int width() const { return image.width(); }
};

struct AugmentationConfig {
  int crop_size = 224;
  std::vector<double> scales{0.75, 1.0, 1.25};
  bool mirror = true;
  std::optional<int> longest_side_cap;
  std::uint64_t rng_seed = 0;

  /// 512 px crops and 2048 px longest-side cap for very large images.
  static AugmentationConfig large_image_profile();
  void validate() const;
};

// ---------------------------------------------------------------------------
// Annotation ingestion

struct LoadedSample {
  CrowdSample sample;
  int clamped_points = 0;  // out-of-bounds points moved onto the border
};

/// Parsed sidecar document, before the image is decoded.
struct AnnotationSidecar {
  std::string image;  // relative to the sidecar's directory
  std::vector<Point> points;
  std::vector<Polygon> roi_polygons;
  bool has_roi = false;
};

AnnotationSidecar parse_sidecar(const std::string& json_text);
AnnotationSidecar read_sidecar(const std::filesystem::path& path);

/// Loads an annotation sidecar and the image it references. Points outside the
/// image are clamped to the nearest in-bounds position and tallied.
LoadedSample load_annotations(const std::filesystem::path& sidecar_path);

/// Datasets are directories of `<id>.ann.json` sidecars next to their images.
inline constexpr const char* kSidecarSuffix = ".ann.json";

/// "<id>.ann.json" (or "<id>.json") -> "<id>".
std::string sidecar_id(const std::filesystem::path& sidecar_path);

/// Same as load_annotations but with an already decoded image (H, W from it).
LoadedSample make_sample(const AnnotationSidecar& sidecar, Tensor<float> image, std::string id);

// ---------------------------------------------------------------------------
// Images

Tensor<float> load_image(const std::filesystem::path& path);
/// Writes a normalized image as 8-bit PNG (values are de-normalized and rounded).
void save_image(const Tensor<float>& image, const std::filesystem::path& path);
/// Height and width of an image file without keeping the pixels.
std::array<int, 2> image_size(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Ground truth

/// Sum of one fixed-spread Gaussian per head. Each kernel is truncated at
/// 4 sigma and clipped to the image, then renormalized to sum to exactly one.
DensityMap generate_density_map(const HeadAnnotations& ann, double sigma = kDefaultSigma);

/// Zero-pads bottom/right so both dimensions are multiples of `multiple`.
DensityMap pad_to_multiple(const DensityMap& d, int multiple);

/// Count-preserving block-sum downsampling.
DensityMap downsample_density(const DensityMap& d, int factor = 8);

/// Full-resolution map -> `factor`-scale target (pad, then block-sum).
DensityMap make_target(const HeadAnnotations& ann, double sigma = kDefaultSigma, int factor = 8);

// ---------------------------------------------------------------------------
// Augmentation

/// Crop origin is drawn as y0 = uniform_int(0, H - crop), then
/// x0 = uniform_int(0, W - crop). Points with x0 <= x < x0 + crop (same for y)
/// are kept and translated; all others are dropped. Images smaller than the
/// crop are first upscaled so their shorter side equals crop_size.
CrowdSample random_crop(const CrowdSample& s, const AugmentationConfig& cfg, Rng& rng);
CrowdSample random_crop(const CrowdSample& s, const AugmentationConfig& cfg);

/// Crop at a fixed origin. Requires the window to fit inside the image.
CrowdSample crop_at(const CrowdSample& s, int y0, int x0, int crop_h, int crop_w);

/// Bilinear resize to round(H * factor) x round(W * factor); points are scaled
/// by `factor` (ROI uses nearest-neighbour).
CrowdSample scale_sample(const CrowdSample& s, double factor);

/// Resize so the longer side is at most `cap` pixels, keeping the aspect ratio.
CrowdSample cap_longest_side(const CrowdSample& s, int cap);

CrowdSample horizontal_mirror(const CrowdSample& s);
HeadAnnotations mirror_annotations(const HeadAnnotations& ann);
DensityMap mirror_density(const DensityMap& d);

/// scale -> crop -> mirror, all draws from `rng` in that order.
CrowdSample augment(const CrowdSample& s, const AugmentationConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// ROI

/// Even-odd rasterization of polygons at pixel centers.
RoiMask rasterize_polygons(const std::vector<Polygon>& polygons, int height, int width);

/// Max-pool downsampling of a binary mask; partial blocks at the border count.
RoiMask downsample_mask(const RoiMask& roi, int factor);

/// Zeroes every cell outside the ROI. A full-resolution mask is max-pooled to
/// the map's scale first; any other shape mismatch is a contract error.
DensityMap apply_roi_mask(const DensityMap& d, const RoiMask& roi);

// ---------------------------------------------------------------------------
// Splits

struct Fold {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

/// Shuffles ids with `seed`, then cuts k contiguous test folds whose sizes
/// differ by at most one (the first n % k folds are one larger).
std::vector<Fold> kfold_splits(const std::vector<std::string>& sample_ids, int k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class DensityProfile { uniform, perspective };

DensityProfile parse_profile(const std::string& name);
std::string to_string(DensityProfile p);

/// Probability that a perspective-profile head lands in the far / mid / near
/// third of the image. Heads in the far band are rendered smallest.
inline constexpr std::array<double, 3> kPerspectiveBandWeights{0.5, 0.3, 0.2};

/// Renders `count` head blobs on a textured background. Deterministic in seed.
CrowdSample synthesize_scene(std::uint64_t seed, int count, int height, int width, DensityProfile profile);

// ---------------------------------------------------------------------------
// Raw density export: little-endian float32 row-major `<base>.bin` plus a
// `<base>.json` header {"height", "width", "scale", "sum"}.

void write_density(const DensityMap& d, const std::filesystem::path& base);
DensityMap read_density(const std::filesystem::path& base);

}  // namespace msfa
