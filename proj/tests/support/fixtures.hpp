#pragma once

// Test-side oracles and fixtures shared by the unit and acceptance suites.
// Oracles are written directly from the definitions, in double precision,
// without calling into the code under test.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "msfanet/crowd_data.hpp"
#include "msfanet/evaluation.hpp"
#include "msfanet/model.hpp"
#include "msfanet/tensor.hpp"
#include "msfanet/training.hpp"

namespace msfa::test {

inline ModelConfig tiny_config(double multiplier, int window = 4) {
  ModelConfig c;
  c.channel_multiplier = multiplier;
  c.stem_window = window;
  return c;
}

template <typename T>
Tensor<T> random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.vec()) v = static_cast<T>(u(rng));
  return t;
}

template <typename T>
Grid<T> random_grid(int h, int w, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  Grid<T> g(h, w);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : g.values) v = static_cast<T>(u(rng));
  return g;
}

inline std::vector<Point> random_points(int n, int w, int h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ux(0.0, std::nextafter(static_cast<double>(w - 1), 0.0));
  std::uniform_real_distribution<double> uy(0.0, std::nextafter(static_cast<double>(h - 1), 0.0));
  std::vector<Point> pts(static_cast<std::size_t>(n));
  for (auto& p : pts) p = {ux(rng), uy(rng)};
  return pts;
}

/// Brute-force ground truth: one 2D Gaussian per point evaluated over the
/// square of half-width 4 sigma clipped to the image, then divided by its own
/// clipped sum.
inline std::vector<double> density_oracle(const std::vector<Point>& pts, int w, int h, double sigma) {
  std::vector<double> out(static_cast<std::size_t>(w) * h, 0.0);
  const double r = 4.0 * sigma;
  for (const Point& p : pts) {
    std::vector<std::pair<std::size_t, double>> cells;
    double total = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (std::abs(x - p.x) > r || std::abs(y - p.y) > r) continue;
        const double v = std::exp(-((x - p.x) * (x - p.x) + (y - p.y) * (y - p.y)) / (2.0 * sigma * sigma));
        cells.emplace_back(static_cast<std::size_t>(y) * w + x, v);
        total += v;
      }
    }
    for (const auto& [i, v] : cells) out[i] += v / total;
  }
  return out;
}

/// Per-window loss written out from the definition.
inline double la_window_oracle(const std::vector<double>& pred, const std::vector<double>& gt) {
  double sq = 0.0, count = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    sq += (pred[i] - gt[i]) * (pred[i] - gt[i]);
    count += gt[i];
  }
  return sq / (count + 1.0);
}

/// Sum of window losses over a non-overlapping tiling of an h x w map by
/// `win` x `win` windows (h and w multiples of win).
inline double pooling_oracle(const Grid<double>& pred, const Grid<double>& gt, int win) {
  double total = 0.0;
  for (int wy = 0; wy < pred.height; wy += win) {
    for (int wx = 0; wx < pred.width; wx += win) {
      std::vector<double> p, g;
      for (int y = wy; y < wy + win; ++y) {
        for (int x = wx; x < wx + win; ++x) {
          p.push_back(pred(y, x));
          g.push_back(gt(y, x));
        }
      }
      total += la_window_oracle(p, g);
    }
  }
  return total;
}

/// Rank columns of the state-of-the-art comparison table (MAE ranks on four
/// datasets, empty where a method did not report), with the printed average.
struct RankedMethod {
  MethodRanks ranks;
  double printed_average;
};

inline std::vector<RankedMethod> comparison_table() {
  const std::optional<int> na;
  return {
      {{"TEDnet", {18, 14, 15, 8}}, 13.75},  {{"DSA-Net", {19, na, na, 7}}, 13.0},
      {{"SDANet", {17, 11, na, 10}}, 12.67}, {{"RANet", {10, 12, 14, na}}, 12.0},
      {{"CAN", {16, 10, 13, 6}}, 10.5},      {{"RPNet", {12, na, na, 11}}, 11.5},
      {{"PGCNet", {6, 13, na, 9}}, 9.33},    {{"HyGnn", {11, 6, 10, na}}, 9.0},
      {{"TopoCount", {13, 5, 7, na}}, 8.33}, {{"GLoss", {14, na, 3, na}}, 8.5},
      {{"AMRNet", {15, 4, 5, na}}, 8.0},     {{"S-DCNet", {9, 8, 12, 3}}, 8.0},
      {{"AMSNet", {5, 9, 11, 5}}, 7.5},      {{"CHANet", {3, na, 9, 4}}, 5.33},
      {{"UOT", {8, na, 2, na}}, 5.0},        {{"ASNet", {7, 2, 8, 2}}, 4.75},
      {{"LibraNet", {4, 3, 6, na}}, 4.33},   {{"ADSCNet", {2, 7, 1, na}}, 3.33},
      {{"MSFANet", {1, 1, 4, 1}}, 1.75},
  };
}

/// Dense synthetic scenes used for the overfit checks: 150, 200, 250 and 300
/// heads at 224 x 224, alternating uniform and perspective layouts.
inline std::vector<CrowdSample> overfit_scenes() {
  std::vector<CrowdSample> out;
  for (int i = 0; i < 4; ++i) {
    out.push_back(synthesize_scene(100 + i, 150 + 50 * i, 224, 224,
                                   i % 2 ? DensityProfile::perspective : DensityProfile::uniform));
  }
  return out;
}

inline ModelConfig overfit_model(Ablation a) { return apply_ablation(tiny_config(0.0625, 7), a); }

inline TrainConfig overfit_train(Ablation a, int iterations) {
  TrainConfig t;
  t.learning_rate = 1e-3;
  t.batch_size = 4;
  t.iterations = iterations;
  t.seed = 7;
  t.ablation = a;
  t.crops_per_image = 1;
  t.log_wall_time = false;
  return t;
}

inline InitOptions overfit_init() {
  InitOptions o;
  o.scheme = InitScheme::he_normal;
  o.seed = 7;
  return o;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("msfanet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Combined loss of one double-precision sample and, optionally, its
/// parameter gradient.
inline double model_total_loss(const ModelConfig& cfg, const ParameterStore<double>& params, const Tensor<double>& image,
                               const Grid<double>& gt, const LossConfig& loss, ParameterStore<double>* grads) {
  ForwardTrace<double> trace;
  const Tensor<double> d = forward(image, cfg, params, grads ? &trace : nullptr);
  Grid<double> pred(d.height(), d.width());
  pred.values = d.vec();
  std::vector<Grid<double>> dpred;
  const std::vector<Grid<double>> p{pred}, g{gt};
  const double value = total_loss<double>(p, g, loss, grads ? &dpred : nullptr);
  if (grads) {
    Tensor<double> dd({1, d.height(), d.width()});
    dd.vec() = dpred[0].values;
    backward(dd, cfg, params, trace, *grads);
  }
  return value;
}

/// Tiny double-precision setup for finite-difference checks: He-scaled
/// weights, random biases and norm parameters so no path is trivially zero.
struct GradCheckSetup {
  ModelConfig cfg;
  ParameterStore<double> params;
  Tensor<double> image;
  Grid<double> gt;
  LossConfig loss;
};

inline GradCheckSetup grad_check_setup(Ablation variant = Ablation::sh_sk_ploss, int side = 32) {
  GradCheckSetup s;
  s.cfg = apply_ablation(tiny_config(0.125, 4), variant);
  InitOptions init;
  init.scheme = InitScheme::he_normal;
  init.seed = 3;
  s.params = init_parameters(s.cfg, init).cast<double>();
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (auto& [name, t] : s.params.tensors) {
    if (name.ends_with(".bias") || name.find(".norm") != std::string::npos) {
      for (auto& v : t.vec()) v += u(rng);
    }
  }
  // Keep the output positive so the final ReLU passes gradient.
  s.params.at("regressor.upsample.bias")[0] = 0.3;
  s.image = random_tensor<double>({3, side, side}, rng, -1.5, 1.5);
  const int gs = (side + 7) / 8;
  s.gt = random_grid<double>(gs, gs, rng, 0.0, 0.5);
  s.loss.window = 2;
  s.loss.stride = 2;
  return s;
}

}  // namespace msfa::test
