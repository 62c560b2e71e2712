#include "msfanet/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "msfanet/errors.hpp"

namespace msfa {

using nlohmann::json;

double count_from_density(const DensityMap& d) { return d.sum(); }

CountErrors compute_mae_mse(std::span<const std::pair<double, double>> pairs) {
  MSFA_EXPECT(!pairs.empty(), "MAE/MSE need at least one (gt, prediction) pair");
  double abs_sum = 0.0;
  double sq_sum = 0.0;
  for (const auto& [gt, pred] : pairs) {
    const double d = gt - pred;
    abs_sum += std::abs(d);
    sq_sum += d * d;
  }
  const double k = static_cast<double>(pairs.size());
  return {abs_sum / k, std::sqrt(sq_sum / k)};
}

// ---------------------------------------------------------------------------
// Regions

std::string to_string(Region r) {
  switch (r) {
    case Region::far: return "far";
    case Region::mid: return "mid";
    case Region::near: return "near";
  }
  return "unknown";
}

void RegionConfig::validate() const {
  MSFA_EXPECT(denominator >= 1, "region denominator must be >= 1");
  MSFA_EXPECT(0 < far_end && far_end < mid_end && mid_end < denominator, "region bounds must satisfy 0 < far < mid < denominator");
}

std::array<int, 2> RegionConfig::boundaries(int height) const {
  validate();
  return {height * far_end / denominator, height * mid_end / denominator};
}

RegionErrors region_errors(const DensityMap& pred, const DensityMap& gt, const RegionConfig& cfg) {
  if (pred.height() != gt.height() || pred.width() != gt.width()) {
    throw ContractError("region_errors: prediction " + std::to_string(pred.height()) + "x" +
                        std::to_string(pred.width()) + " vs target " + std::to_string(gt.height()) + "x" +
                        std::to_string(gt.width()));
  }
  if (gt.height() < 3) throw ContractError("region_errors needs at least 3 rows, got " + std::to_string(gt.height()));
  const auto [mid_start, near_start] = cfg.boundaries(gt.height());
  RegionErrors r;
  for (int y = 0; y < gt.height(); ++y) {
    const int band = y < mid_start ? 0 : (y < near_start ? 1 : 2);
    for (int x = 0; x < gt.width(); ++x) {
      r.gt_counts[band] += gt(y, x);
      r.pred_counts[band] += pred(y, x);
    }
  }
  for (int b = 0; b < 3; ++b) r.abs_errors[b] = std::abs(r.gt_counts[b] - r.pred_counts[b]);
  return r;
}

// ---------------------------------------------------------------------------
// Reports

EvalReport make_report(std::vector<ImageResult> per_image) {
  MSFA_EXPECT(!per_image.empty(), "a report needs at least one image");
  EvalReport r;
  std::vector<std::pair<double, double>> pairs;
  bool all_regions = true;
  std::array<double, 3> region_sum{};
  for (const auto& img : per_image) {
    pairs.emplace_back(img.gt_count, img.pred_count);
    if (!img.regions) {
      all_regions = false;
      continue;
    }
    for (int b = 0; b < 3; ++b) region_sum[b] += img.regions->abs_errors[b];
  }
  const CountErrors e = compute_mae_mse(pairs);
  r.mae = e.mae;
  r.mse = e.mse;
  if (all_regions) {
    for (double& v : region_sum) v /= static_cast<double>(per_image.size());
    r.region_mae = region_sum;
  }
  r.per_image = std::move(per_image);
  return r;
}

json to_json(const EvalReport& r) {
  json images = json::array();
  for (const auto& img : r.per_image) {
    json j{{"id", img.id}, {"gt_count", img.gt_count}, {"pred_count", img.pred_count}};
    if (img.regions) {
      json reg;
      for (Region b : kRegions) {
        const auto i = static_cast<std::size_t>(b);
        reg[to_string(b)] = {{"gt_count", img.regions->gt_counts[i]},
                             {"pred_count", img.regions->pred_counts[i]},
                             {"abs_error", img.regions->abs_errors[i]}};
      }
      j["regions"] = reg;
    }
    images.push_back(j);
  }
  json out{{"images", r.per_image.size()}, {"mae", r.mae}, {"mse", r.mse}, {"per_image", images}};
  if (r.region_mae) {
    json reg;
    for (Region b : kRegions) reg[to_string(b)] = (*r.region_mae)[static_cast<std::size_t>(b)];
    out["region_mae"] = reg;
  }
  return out;
}

EvalReport report_from_json(const json& j) {
  try {
    EvalReport r;
    r.mae = j.at("mae").get<double>();
    r.mse = j.at("mse").get<double>();
    for (const auto& img : j.at("per_image")) {
      ImageResult res{img.at("id").get<std::string>(), img.at("gt_count").get<double>(),
                      img.at("pred_count").get<double>(), std::nullopt};
      if (img.contains("regions")) {
        RegionErrors e;
        for (Region b : kRegions) {
          const auto i = static_cast<std::size_t>(b);
          const json& band = img["regions"].at(to_string(b));
          e.gt_counts[i] = band.at("gt_count").get<double>();
          e.pred_counts[i] = band.at("pred_count").get<double>();
          e.abs_errors[i] = band.at("abs_error").get<double>();
        }
        res.regions = e;
      }
      r.per_image.push_back(std::move(res));
    }
    if (j.contains("region_mae")) {
      std::array<double, 3> m{};
      for (Region b : kRegions) m[static_cast<std::size_t>(b)] = j["region_mae"].at(to_string(b)).get<double>();
      r.region_mae = m;
    }
    return r;
  } catch (const json::exception& e) {
    throw LoadError(std::string("invalid evaluation report: ") + e.what());
  }
}

std::pair<DensityMap, DensityMap> predict_sample(const CrowdSample& sample, const ModelConfig& cfg,
                                                 const ParameterStore<float>& params, const EvalOptions& opts) {
  DensityMap pred = model_forward(sample.image, cfg, params);
  DensityMap gt = make_target(sample.annotations, opts.sigma, 8);
  if (opts.apply_roi && sample.roi) {
    pred = apply_roi_mask(pred, *sample.roi);
    gt = apply_roi_mask(gt, *sample.roi);
  }
  return {std::move(pred), std::move(gt)};
}

EvalReport evaluate(std::span<const CrowdSample> samples, const ModelConfig& cfg, const ParameterStore<float>& params,
                    const EvalOptions& opts) {
  MSFA_EXPECT(!samples.empty(), "evaluation needs at least one sample");
  MSFA_EXPECT(opts.workers >= 1, "workers must be >= 1");
  if (opts.regions) opts.region_config.validate();
  std::vector<ImageResult> results(samples.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto work = [&] {
    for (std::size_t i = next++; i < samples.size(); i = next++) {
      try {
        const auto [pred, gt] = predict_sample(samples[i], cfg, params, opts);
        ImageResult r{samples[i].id, count_from_density(gt), count_from_density(pred), std::nullopt};
        if (opts.regions) r.regions = region_errors(pred, gt, opts.region_config);
        results[i] = std::move(r);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int n_threads = std::min<int>(opts.workers, static_cast<int>(samples.size()));
  if (n_threads <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);
  return make_report(std::move(results));
}

// ---------------------------------------------------------------------------
// Average ranking

std::vector<RankingRow> average_ranking(std::span<const MethodRanks> table) {
  std::vector<RankingRow> rows;
  rows.reserve(table.size());
  for (const auto& m : table) {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : m.ranks) {
      if (!r) continue;
      MSFA_EXPECT(*r >= 1, "ranks start at 1 (method '" + m.method + "')");
      sum += *r;
      ++n;
    }
    if (n == 0) throw ContractError("method '" + m.method + "' has no ranked datasets");
    rows.push_back({m.method, sum / n, n});
  }
  return rows;
}

std::string ranking_csv(std::span<const MethodRanks> table, std::span<const std::string> dataset_names) {
  const auto rows = average_ranking(table);
  std::ostringstream os;
  os << "method";
  for (const auto& d : dataset_names) os << ',' << d;
  os << ",avg_rank\n";
  for (std::size_t i = 0; i < table.size(); ++i) {
    MSFA_EXPECT(table[i].ranks.size() == dataset_names.size(),
                "method '" + table[i].method + "' has a rank column count different from the dataset list");
    os << table[i].method;
    for (const auto& r : table[i].ranks) {
      os << ',';
      if (r) os << *r;
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", rows[i].average);
    os << ',' << buf << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Visualization

namespace {

HeatmapInfo write_heatmap(const float* values, int height, int width, int scale, const std::filesystem::path& path) {
  MSFA_EXPECT(height > 0 && width > 0, "cannot export an empty map");
  HeatmapInfo info;
  const auto [lo, hi] = std::minmax_element(values, values + static_cast<std::size_t>(height) * width);
  info.min = *lo;
  info.max = *hi;
  info.degenerate = !(info.max > info.min);

  cv::Mat gray(height, width, CV_8UC1);
  const double range = info.degenerate ? 1.0 : info.max - info.min;
  for (int y = 0; y < height; ++y) {
    auto* row = gray.ptr<std::uint8_t>(y);
    for (int x = 0; x < width; ++x) {
      const double t = info.degenerate ? 0.0 : (values[static_cast<std::size_t>(y) * width + x] - info.min) / range;
      row[x] = static_cast<std::uint8_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
    }
  }
  cv::Mat color;
  cv::applyColorMap(gray, color, cv::COLORMAP_JET);
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), color);
  } catch (const cv::Exception& e) {
    throw ExportError("cannot write heatmap " + path.string() + ": " + e.what());
  }
  if (!ok) throw ExportError("cannot write heatmap " + path.string());

  json side{{"min", info.min},     {"max", info.max},       {"degenerate", info.degenerate},
            {"height", height},    {"width", width},        {"scale", scale},
            {"colormap", "jet"},   {"normalization", "linear min->0, max->255"}};
  std::filesystem::path side_path = path;
  side_path += ".json";
  std::ofstream out(side_path);
  out << side.dump(2) << '\n';
  if (!out) throw ExportError("cannot write heatmap sidecar " + side_path.string());
  return info;
}

}  // namespace

HeatmapInfo export_heatmap(const DensityMap& d, const std::filesystem::path& path) {
  return write_heatmap(d.values.values.data(), d.height(), d.width(), d.scale, path);
}

std::vector<std::filesystem::path> export_feature_channels(const Tensor<float>& features, const std::string& layer,
                                                           const std::filesystem::path& dir, int max_channels) {
  MSFA_EXPECT(features.rank() == 3, "feature export expects (C, H, W)");
  MSFA_EXPECT(max_channels >= 1, "max_channels must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ExportError("cannot create " + dir.string() + ": " + ec.message());
  std::string safe = layer;
  std::replace(safe.begin(), safe.end(), '/', '_');
  std::vector<std::filesystem::path> written;
  const int n = std::min(features.channels(), max_channels);
  for (int c = 0; c < n; ++c) {
    auto path = dir / (safe + "_c" + std::to_string(c) + ".png");
    write_heatmap(features.data() + static_cast<std::size_t>(c) * features.plane(), features.height(), features.width(), 0,
                  path);
    written.push_back(std::move(path));
  }
  return written;
}

}  // namespace msfa
