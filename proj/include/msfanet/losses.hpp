#pragma once

#include <span>
#include <string>
#include <vector>

#include "msfanet/tensor.hpp"

namespace msfa {

/// Window geometry and weighting of the combined counting objective.
struct LossConfig {
  double alpha = 0.1;  // weight of the Euclidean term
  int window = 4;      // cells per side
  int stride = 4;      // window == stride gives a non-overlapping grid

  void validate() const;
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

enum class Objective { euclidean, total };

std::string to_string(Objective o);

/// Per-sample window grid: windows start at multiples of `stride` and the
/// maps are zero-padded on the bottom/right so the last window fits.
struct WindowGrid {
  int rows = 0;
  int cols = 0;
  int padded_height = 0;
  int padded_width = 0;
};

WindowGrid window_grid(int height, int width, const LossConfig& cfg);

/// Batch losses. `pred` and `gt` are equally sized batches of equally shaped
/// maps. When `grad` is non-null it receives dLoss/dpred, one grid per sample.

/// Mean over the batch of the per-sample sum of squared differences.
template <typename T>
double euclidean_loss(std::span<const Grid<T>> pred, std::span<const Grid<T>> gt,
                      std::vector<Grid<T>>* grad = nullptr);

/// Squared error of one window divided by (ground-truth window count + 1).
template <typename T>
double la_loss_window(std::span<const T> pred_win, std::span<const T> gt_win, std::span<T> grad = {});

/// Mean over the batch of the per-sample sum of window losses.
template <typename T>
double pooling_loss(std::span<const Grid<T>> pred, std::span<const Grid<T>> gt, const LossConfig& cfg,
                    std::vector<Grid<T>>* grad = nullptr);

/// alpha * euclidean + pooling.
template <typename T>
double total_loss(std::span<const Grid<T>> pred, std::span<const Grid<T>> gt, const LossConfig& cfg,
                  std::vector<Grid<T>>* grad = nullptr);

template <typename T>
double objective_loss(Objective objective, std::span<const Grid<T>> pred, std::span<const Grid<T>> gt,
                      const LossConfig& cfg, std::vector<Grid<T>>* grad = nullptr);

}  // namespace msfa
