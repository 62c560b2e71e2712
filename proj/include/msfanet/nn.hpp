#pragma once

#include <cstdint>
#include <vector>

#include "msfanet/tensor.hpp"

/// Differentiable building blocks on (C, H, W) feature maps. Every forward op
/// has a matching backward that takes the upstream gradient and returns (or
/// accumulates) gradients for its inputs and parameters.
namespace msfa::nn {

struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_size(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
};

/// x: (Cin, H, W), w: (Cout, Cin, k, k), bias: (Cout) or null.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, ConvSpec spec);

/// Accumulates into dw / db; writes dx when non-null.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, ConvSpec spec, Tensor<T>* dx,
                     Tensor<T>& dw, Tensor<T>* db);

/// Adjoint of conv2d. x: (Cin, H, W), w: (Cin, Cout, k, k); output side is
/// (H - 1) * stride - 2 * pad + kernel.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, ConvSpec spec);

template <typename T>
void conv_transpose2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, ConvSpec spec,
                               Tensor<T>* dx, Tensor<T>& dw, Tensor<T>* db);

template <typename T>
void relu_inplace(Tensor<T>& x);

/// Zeroes dy wherever the ReLU output y was not positive.
template <typename T>
void relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy);

/// 2x2 max pooling with stride 2. `argmax` receives the flat input index of
/// each output cell's winner (first maximum in row-major window order).
template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& x, std::vector<std::uint32_t>& argmax);

template <typename T>
Tensor<T> max_pool2x2_backward(const Tensor<T>& dy, const std::vector<std::uint32_t>& argmax,
                               const std::vector<int>& in_shape);

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x);

template <typename T>
Tensor<T> avg_pool2x2_backward(const Tensor<T>& dy, const std::vector<int>& in_shape);

/// Bilinear resize with half-pixel centers (identity when sizes match).
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w);

template <typename T>
Tensor<T> bilinear_resize_backward(const Tensor<T>& dy, int in_h, int in_w);

/// Extends the bottom and right edges by mirror reflection (edge pixel not
/// repeated); any padding amount is allowed.
template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, int out_h, int out_w);

/// Top-left crop.
template <typename T>
Tensor<T> crop(const Tensor<T>& x, int out_h, int out_w);

/// Adjoint of crop: zero-pads to (out_h, out_w).
template <typename T>
Tensor<T> zero_pad(const Tensor<T>& x, int out_h, int out_w);

}  // namespace msfa::nn
