#pragma once

#include <vector>

#include "msfanet/tensor.hpp"

/// Windowed multi-head self-attention block (regular or shifted partition)
/// with relative position bias, pre-norm residual attention and a two-layer
/// GELU MLP.
namespace msfa::attn {

template <typename T>
struct BlockWeights {
  const Tensor<T>* norm1_gamma;  // (C)
  const Tensor<T>* norm1_beta;   // (C)
  const Tensor<T>* qkv_w;        // (3C, C)
  const Tensor<T>* qkv_b;        // (3C)
  const Tensor<T>* rel_bias;     // ((2M-1)^2, heads)
  const Tensor<T>* proj_w;       // (C, C)
  const Tensor<T>* proj_b;       // (C)
  const Tensor<T>* norm2_gamma;
  const Tensor<T>* norm2_beta;
  const Tensor<T>* fc1_w;  // (hidden, C)
  const Tensor<T>* fc1_b;
  const Tensor<T>* fc2_w;  // (C, hidden)
  const Tensor<T>* fc2_b;
};

/// Gradient sinks with the same layout as BlockWeights; accumulated into.
template <typename T>
struct BlockGrads {
  Tensor<T>* norm1_gamma;
  Tensor<T>* norm1_beta;
  Tensor<T>* qkv_w;
  Tensor<T>* qkv_b;
  Tensor<T>* rel_bias;
  Tensor<T>* proj_w;
  Tensor<T>* proj_b;
  Tensor<T>* norm2_gamma;
  Tensor<T>* norm2_beta;
  Tensor<T>* fc1_w;
  Tensor<T>* fc1_b;
  Tensor<T>* fc2_w;
  Tensor<T>* fc2_b;
};

struct BlockSpec {
  int window = 7;
  int heads = 3;
  bool shifted = false;
  bool mask_shifted = true;  // block attention across wrapped-around regions
};

/// Flat spatial index (y * W + x) of the source token for each window-ordered
/// slot. Shifted partitions read the grid cyclically shifted by window / 2, so
/// scattering back through the same order undoes the shift.
std::vector<int> window_token_order(int height, int width, int window, bool shifted);

/// Region label of each window-ordered slot for the shifted-window mask
/// (all zeros for an unshifted partition).
std::vector<int> shift_region_labels(int height, int width, int window, bool shifted);

/// Cyclic roll: out(y, x) = in((y + dy) mod H, (x + dx) mod W).
template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, int dy, int dx);

/// Bias-table row for the relative offset between two in-window positions.
int relative_position_index(int yi, int xi, int yj, int xj, int window);

template <typename T>
struct BlockCache {
  int channels = 0, height = 0, width = 0;
  std::vector<int> order;
  std::vector<int> labels;
  std::vector<T> x, ln1_hat, ln1_rstd, ln1_out_w, qkv, attn, heads_out, x1, ln2_hat, ln2_rstd, ln2_out, fc1_pre, gelu;
};

/// Scaled dot-product attention core on window-ordered tokens.
/// tokens: (N, C) row-major in window order; returns (N, C) before the output
/// projection. `attn_out`, when non-null, receives the softmax weights laid
/// out as [window][head][query][key].
template <typename T>
std::vector<T> window_self_attention(const std::vector<T>& qkv, int channels, int window, int heads,
                                     const Tensor<T>* rel_bias, const std::vector<int>* labels,
                                     std::vector<T>* attn_out);

/// Full block on a (C, H, W) feature map; H and W must be divisible by the
/// window and C by the head count.
template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockWeights<T>& w, const BlockSpec& spec, BlockCache<T>* cache);

/// Returns dL/dx and accumulates parameter gradients.
template <typename T>
Tensor<T> block_backward(const Tensor<T>& dy, const BlockWeights<T>& w, const BlockGrads<T>& g, const BlockSpec& spec,
                         const BlockCache<T>& cache);

}  // namespace msfa::attn
