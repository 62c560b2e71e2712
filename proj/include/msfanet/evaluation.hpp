#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "msfanet/crowd_data.hpp"
#include "msfanet/model.hpp"

namespace msfa {

double count_from_density(const DensityMap& d);

struct CountErrors {
  double mae = 0.0;
  double mse = 0.0;  // root of the mean squared count error
};

/// Pairs are (ground-truth count, predicted count).
CountErrors compute_mae_mse(std::span<const std::pair<double, double>> pairs);

// ---------------------------------------------------------------------------
// Distance regions

enum class Region { far, mid, near };
inline constexpr std::array<Region, 3> kRegions{Region::far, Region::mid, Region::near};
std::string to_string(Region r);

/// Horizontal bands: far = rows [0, h*far_end/denominator),
/// mid = up to h*mid_end/denominator, near = the rest (integer division, so
/// leftover rows land in mid and near).
struct RegionConfig {
  int far_end = 1;
  int mid_end = 2;
  int denominator = 3;

  void validate() const;
  /// First row of mid and of near for a map of `height` rows.
  std::array<int, 2> boundaries(int height) const;
};

struct RegionErrors {
  std::array<double, 3> gt_counts{};
  std::array<double, 3> pred_counts{};
  std::array<double, 3> abs_errors{};
};

RegionErrors region_errors(const DensityMap& pred, const DensityMap& gt, const RegionConfig& cfg = {});

// ---------------------------------------------------------------------------
// Reports

struct ImageResult {
  std::string id;
  double gt_count = 0.0;
  double pred_count = 0.0;
  std::optional<RegionErrors> regions;
};

struct EvalReport {
  std::vector<ImageResult> per_image;
  double mae = 0.0;
  double mse = 0.0;
  std::optional<std::array<double, 3>> region_mae;  // far, mid, near
};

/// Aggregates per-image results; region MAEs are computed when every image
/// carries a region breakdown.
EvalReport make_report(std::vector<ImageResult> per_image);

nlohmann::json to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);

struct EvalOptions {
  bool regions = false;
  RegionConfig region_config;
  bool apply_roi = true;  // zero predictions and targets outside a sample's ROI
  double sigma = kDefaultSigma;
  int workers = 1;
};

/// Prediction and target for one sample (1/8 scale, ROI applied if requested).
std::pair<DensityMap, DensityMap> predict_sample(const CrowdSample& sample, const ModelConfig& cfg,
                                                 const ParameterStore<float>& params, const EvalOptions& opts);

/// Runs the model over every sample. Results keep the input order regardless
/// of the worker count.
EvalReport evaluate(std::span<const CrowdSample> samples, const ModelConfig& cfg, const ParameterStore<float>& params,
                    const EvalOptions& opts = {});

// ---------------------------------------------------------------------------
// Average ranking

struct MethodRanks {
  std::string method;
  std::vector<std::optional<int>> ranks;  // one slot per dataset, empty when not reported
};

struct RankingRow {
  std::string method;
  double average = 0.0;
  int datasets = 0;
};

/// Sum of the available ranks divided by their number.
std::vector<RankingRow> average_ranking(std::span<const MethodRanks> table);

/// CSV with one column per dataset and a final avg_rank column (2 decimals).
std::string ranking_csv(std::span<const MethodRanks> table, std::span<const std::string> dataset_names);

// ---------------------------------------------------------------------------
// Visualization

struct HeatmapInfo {
  double min = 0.0;
  double max = 0.0;
  bool degenerate = false;  // max == min; every pixel gets the lowest color
};

/// Writes an 8-bit JET-colored image (min -> 0, max -> 255) and a
/// `<path>.json` sidecar recording the normalization.
HeatmapInfo export_heatmap(const DensityMap& d, const std::filesystem::path& path);

/// One heatmap per channel of a (C, H, W) feature grid, named
/// `<layer>_c<k>.png`. Returns the files written.
std::vector<std::filesystem::path> export_feature_channels(const Tensor<float>& features, const std::string& layer,
                                                           const std::filesystem::path& dir, int max_channels = 16);

}  // namespace msfa
