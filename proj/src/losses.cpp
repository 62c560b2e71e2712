#include "msfanet/losses.hpp"

#include "msfanet/errors.hpp"

namespace msfa {

void LossConfig::validate() const {
  MSFA_EXPECT(alpha >= 0.0, "alpha must be >= 0");
  MSFA_EXPECT(window >= 1, "loss window must be >= 1");
  MSFA_EXPECT(stride >= 1, "loss stride must be >= 1");
}

std::string to_string(Objective o) { return o == Objective::euclidean ? "euclidean" : "total"; }

WindowGrid window_grid(int height, int width, const LossConfig& cfg) {
  cfg.validate();
  auto count = [&](int extent) {
    if (extent <= cfg.window) return 1;
    return (extent - cfg.window + cfg.stride - 1) / cfg.stride + 1;
  };
  WindowGrid g;
  g.rows = count(height);
  g.cols = count(width);
  g.padded_height = (g.rows - 1) * cfg.stride + cfg.window;
  g.padded_width = (g.cols - 1) * cfg.stride + cfg.window;
  return g;
}

namespace {

template <typename T>
void check_batch(std::span<const Grid<T>> pred, std::span<const Grid<T>> gt) {
  MSFA_EXPECT(!pred.empty(), "loss needs a non-empty batch");
  if (pred.size() != gt.size()) {
    throw ContractError("batch size mismatch: " + std::to_string(pred.size()) + " predictions, " +
                        std::to_string(gt.size()) + " targets");
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].height != gt[i].height || pred[i].width != gt[i].width) {
      throw ContractError("sample " + std::to_string(i) + ": prediction " + std::to_string(pred[i].height) + "x" +
                          std::to_string(pred[i].width) + " vs target " + std::to_string(gt[i].height) + "x" +
                          std::to_string(gt[i].width));
    }
  }
}

template <typename T>
void prepare_grad(std::span<const Grid<T>> pred, std::vector<Grid<T>>* grad) {
  if (!grad) return;
  grad->clear();
  for (const auto& p : pred) grad->emplace_back(p.height, p.width);
}

}  // namespace

template <typename T>
double euclidean_loss(std::span<const Grid<T>> pred, std::span<const Grid<T>> gt, std::vector<Grid<T>>* grad) {
  check_batch(pred, gt);
  prepare_grad(pred, grad);
  const double inv_k = 1.0 / static_cast<double>(pred.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < pred[i].size(); ++j) {
      const double d = static_cast<double>(pred[i].values[j]) - static_cast<double>(gt[i].values[j]);
      s += d * d;
      if (grad) (*grad)[i].values[j] = static_cast<T>(2.0 * d * inv_k);
    }
    total += s;
  }
  return total * inv_k;
}

template <typename T>
double la_loss_window(std::span<const T> pred_win, std::span<const T> gt_win, std::span<T> grad) {
  MSFA_EXPECT(pred_win.size() == gt_win.size(), "window size mismatch");
  MSFA_EXPECT(grad.empty() || grad.size() == pred_win.size(), "window gradient size mismatch");
  double sq = 0.0;
  double count = 0.0;
  for (std::size_t j = 0; j < pred_win.size(); ++j) {
    const double d = static_cast<double>(pred_win[j]) - static_cast<double>(gt_win[j]);
    sq += d * d;
    count += static_cast<double>(gt_win[j]);
  }
  const double denom = count + 1.0;
  if (!grad.empty()) {
    for (std::size_t j = 0; j < pred_win.size(); ++j) {
      grad[j] = static_cast<T>(2.0 * (static_cast<double>(pred_win[j]) - static_cast<double>(gt_win[j])) / denom);
    }
  }
  return sq / denom;
}

template <typename T>
double pooling_loss(std::span<const Grid<T>> pred, std::span<const Grid<T>> gt, const LossConfig& cfg,
                    std::vector<Grid<T>>* grad) {
  check_batch(pred, gt);
  prepare_grad(pred, grad);
  const double inv_k = 1.0 / static_cast<double>(pred.size());
  const std::size_t wn = static_cast<std::size_t>(cfg.window) * cfg.window;
  std::vector<T> pw(wn), gw(wn), dw(wn);
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Grid<T>& p = pred[i];
    const Grid<T>& g = gt[i];
    const WindowGrid wg = window_grid(p.height, p.width, cfg);
    for (int r = 0; r < wg.rows; ++r) {
      for (int c = 0; c < wg.cols; ++c) {
        const int y0 = r * cfg.stride;
        const int x0 = c * cfg.stride;
        std::size_t k = 0;
        for (int y = y0; y < y0 + cfg.window; ++y) {
          for (int x = x0; x < x0 + cfg.window; ++x, ++k) {
            const bool inside = y < p.height && x < p.width;
            pw[k] = inside ? p(y, x) : T(0);
            gw[k] = inside ? g(y, x) : T(0);
          }
        }
        total += la_loss_window<T>(pw, gw, grad ? std::span<T>(dw) : std::span<T>());
        if (!grad) continue;
        k = 0;
        for (int y = y0; y < y0 + cfg.window; ++y) {
          for (int x = x0; x < x0 + cfg.window; ++x, ++k) {
            if (y < p.height && x < p.width) (*grad)[i](y, x) += static_cast<T>(dw[k] * inv_k);
          }
        }
      }
    }
  }
  return total * inv_k;
}

template <typename T>
double total_loss(std::span<const Grid<T>> pred, std::span<const Grid<T>> gt, const LossConfig& cfg,
                  std::vector<Grid<T>>* grad) {
  cfg.validate();
  std::vector<Grid<T>> ge;
  const double le = euclidean_loss(pred, gt, grad ? &ge : nullptr);
  const double lp = pooling_loss(pred, gt, cfg, grad);
  if (grad) {
    for (std::size_t i = 0; i < grad->size(); ++i) {
      for (std::size_t j = 0; j < (*grad)[i].size(); ++j) {
        (*grad)[i].values[j] += static_cast<T>(cfg.alpha * static_cast<double>(ge[i].values[j]));
      }
    }
  }
  return cfg.alpha * le + lp;
}

template <typename T>
double objective_loss(Objective objective, std::span<const Grid<T>> pred, std::span<const Grid<T>> gt,
                      const LossConfig& cfg, std::vector<Grid<T>>* grad) {
  return objective == Objective::euclidean ? euclidean_loss(pred, gt, grad) : total_loss(pred, gt, cfg, grad);
}

#define MSFA_INSTANTIATE_LOSSES(T)                                                                                  \
  template double euclidean_loss(std::span<const Grid<T>>, std::span<const Grid<T>>, std::vector<Grid<T>>*);        \
  template double la_loss_window(std::span<const T>, std::span<const T>, std::span<T>);                              \
  template double pooling_loss(std::span<const Grid<T>>, std::span<const Grid<T>>, const LossConfig&,                \
                               std::vector<Grid<T>>*);                                                              \
  template double total_loss(std::span<const Grid<T>>, std::span<const Grid<T>>, const LossConfig&,                  \
                             std::vector<Grid<T>>*);                                                                \
  template double objective_loss(Objective, std::span<const Grid<T>>, std::span<const Grid<T>>, const LossConfig&,   \
                                 std::vector<Grid<T>>*);

MSFA_INSTANTIATE_LOSSES(float)
MSFA_INSTANTIATE_LOSSES(double)

}  // namespace msfa
