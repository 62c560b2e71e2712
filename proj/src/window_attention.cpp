#include "msfanet/window_attention.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Core>

namespace msfa::attn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutStridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

constexpr double kLayerNormEps = 1e-5;

int region_of(int v, int extent, int window, int shift) {
  if (v < extent - window) return 0;
  if (v < extent - shift) return 1;
  return 2;
}

/// Row-wise layer norm over channels. Writes normalized values (before the
/// affine map) and reciprocal std for the backward pass.
template <typename T>
void layer_norm(const T* x, int n, int c, const Tensor<T>& gamma, const Tensor<T>& beta, T* hat, T* rstd, T* out) {
  for (int i = 0; i < n; ++i) {
    const T* row = x + static_cast<std::size_t>(i) * c;
    T mean = 0;
    for (int j = 0; j < c; ++j) mean += row[j];
    mean /= c;
    T var = 0;
    for (int j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= c;
    const T r = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[i] = r;
    for (int j = 0; j < c; ++j) {
      const T h = (row[j] - mean) * r;
      hat[static_cast<std::size_t>(i) * c + j] = h;
      out[static_cast<std::size_t>(i) * c + j] = h * gamma[j] + beta[j];
    }
  }
}

/// Accumulates dgamma/dbeta and adds dL/dx into dx.
template <typename T>
void layer_norm_backward(const T* dy, const T* hat, const T* rstd, int n, int c, const Tensor<T>& gamma,
                         Tensor<T>& dgamma, Tensor<T>& dbeta, T* dx) {
  std::vector<T> dhat(static_cast<std::size_t>(c));
  for (int i = 0; i < n; ++i) {
    const T* g = dy + static_cast<std::size_t>(i) * c;
    const T* h = hat + static_cast<std::size_t>(i) * c;
    T mean_d = 0;
    T mean_dh = 0;
    for (int j = 0; j < c; ++j) {
      dgamma[j] += g[j] * h[j];
      dbeta[j] += g[j];
      dhat[j] = g[j] * gamma[j];
      mean_d += dhat[j];
      mean_dh += dhat[j] * h[j];
    }
    mean_d /= c;
    mean_dh /= c;
    T* d = dx + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) d[j] += rstd[i] * (dhat[j] - mean_d - h[j] * mean_dh);
  }
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * static_cast<T>(M_PI));
  return cdf + x * pdf;
}

/// out = in * W^T + b, in: (n, cin), W: (cout, cin).
template <typename T>
void linear(const T* in, int n, int cin, const Tensor<T>& w, const Tensor<T>& b, T* out) {
  const int cout = w.dim(0);
  MapMat<T> o(out, n, cout);
  o.noalias() = CMapMat<T>(in, n, cin) * CMapMat<T>(w.data(), cout, cin).transpose();
  o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data(), cout);
}

/// Accumulates dW, db; writes din = dout * W when din is non-null.
template <typename T>
void linear_backward(const T* in, const T* dout, int n, int cin, const Tensor<T>& w, Tensor<T>& dw, Tensor<T>& db,
                     T* din) {
  const int cout = w.dim(0);
  CMapMat<T> d(dout, n, cout);
  MapMat<T>(dw.data(), cout, cin).noalias() += d.transpose() * CMapMat<T>(in, n, cin);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < cout; ++c) db[c] += dout[static_cast<std::size_t>(r) * cout + c];
  }
  if (din) MapMat<T>(din, n, cin).noalias() = d * CMapMat<T>(w.data(), cout, cin);
}

template <typename T>
void check_block(const Tensor<T>& x, const BlockWeights<T>& w, const BlockSpec& spec) {
  MSFA_EXPECT(x.rank() == 3, "attention block expects (C, H, W)");
  MSFA_EXPECT(spec.window >= 1, "window must be >= 1");
  MSFA_EXPECT(spec.heads >= 1, "heads must be >= 1");
  if (x.channels() % spec.heads != 0) {
    throw ContractError("attention heads (" + std::to_string(spec.heads) + ") must divide channels (" +
                        std::to_string(x.channels()) + ")");
  }
  if (x.height() % spec.window != 0 || x.width() % spec.window != 0) {
    throw ContractError("window " + std::to_string(spec.window) + " does not divide feature size " +
                        std::to_string(x.height()) + "x" + std::to_string(x.width()));
  }
  const int c = x.channels();
  MSFA_EXPECT(w.qkv_w->dim(0) == 3 * c && w.qkv_w->dim(1) == c, "qkv weight shape mismatch");
  MSFA_EXPECT(w.proj_w->dim(0) == c && w.proj_w->dim(1) == c, "projection weight shape mismatch");
  const int table = (2 * spec.window - 1) * (2 * spec.window - 1);
  MSFA_EXPECT(w.rel_bias->dim(0) == table && w.rel_bias->dim(1) == spec.heads, "relative bias table shape mismatch");
}

}  // namespace

std::vector<int> window_token_order(int height, int width, int window, bool shifted) {
  MSFA_EXPECT(window >= 1 && height % window == 0 && width % window == 0, "window must divide the grid");
  const int shift = shifted ? window / 2 : 0;
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(height) * width);
  for (int wy = 0; wy < height / window; ++wy) {
    for (int wx = 0; wx < width / window; ++wx) {
      for (int iy = 0; iy < window; ++iy) {
        for (int ix = 0; ix < window; ++ix) {
          const int y = (wy * window + iy + shift) % height;
          const int x = (wx * window + ix + shift) % width;
          order.push_back(y * width + x);
        }
      }
    }
  }
  return order;
}

std::vector<int> shift_region_labels(int height, int width, int window, bool shifted) {
  std::vector<int> labels(static_cast<std::size_t>(height) * width, 0);
  const int shift = shifted ? window / 2 : 0;
  if (shift == 0) return labels;
  std::size_t k = 0;
  for (int wy = 0; wy < height / window; ++wy) {
    for (int wx = 0; wx < width / window; ++wx) {
      for (int iy = 0; iy < window; ++iy) {
        for (int ix = 0; ix < window; ++ix, ++k) {
          labels[k] = 3 * region_of(wy * window + iy, height, window, shift) +
                      region_of(wx * window + ix, width, window, shift);
        }
      }
    }
  }
  return labels;
}

template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, int dy, int dx) {
  Tensor<T> y(x.shape());
  const int h = x.height();
  const int w = x.width();
  for (int c = 0; c < x.channels(); ++c) {
    for (int yy = 0; yy < h; ++yy) {
      const int sy = ((yy + dy) % h + h) % h;
      for (int xx = 0; xx < w; ++xx) y.at(c, yy, xx) = x.at(c, sy, ((xx + dx) % w + w) % w);
    }
  }
  return y;
}

int relative_position_index(int yi, int xi, int yj, int xj, int window) {
  return (yi - yj + window - 1) * (2 * window - 1) + (xi - xj + window - 1);
}

template <typename T>
std::vector<T> window_self_attention(const std::vector<T>& qkv, int channels, int window, int heads,
                                     const Tensor<T>* rel_bias, const std::vector<int>* labels,
                                     std::vector<T>* attn_out) {
  const int m2 = window * window;
  const int n = static_cast<int>(qkv.size() / (3 * static_cast<std::size_t>(channels)));
  MSFA_EXPECT(n % m2 == 0, "token count is not a whole number of windows");
  MSFA_EXPECT(channels % heads == 0, "heads must divide channels");
  const int windows = n / m2;
  const int dh = channels / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const int stride = 3 * channels;

  std::vector<int> bias_index(static_cast<std::size_t>(m2) * m2);
  for (int i = 0; i < m2; ++i) {
    for (int j = 0; j < m2; ++j) {
      bias_index[static_cast<std::size_t>(i) * m2 + j] =
          relative_position_index(i / window, i % window, j / window, j % window, window);
    }
  }

  std::vector<T> out(static_cast<std::size_t>(n) * channels);
  if (attn_out) attn_out->assign(static_cast<std::size_t>(windows) * heads * m2 * m2, T(0));
  RowMat<T> s(m2, m2);
  for (int win = 0; win < windows; ++win) {
    const T* base = qkv.data() + static_cast<std::size_t>(win) * m2 * stride;
    for (int h = 0; h < heads; ++h) {
      StridedMap<T> q(base + h * dh, m2, dh, Eigen::OuterStride<>(stride));
      StridedMap<T> k(base + channels + h * dh, m2, dh, Eigen::OuterStride<>(stride));
      StridedMap<T> v(base + 2 * channels + h * dh, m2, dh, Eigen::OuterStride<>(stride));
      s.noalias() = scale * (q * k.transpose());
      for (int i = 0; i < m2; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < m2; ++j) {
          if (rel_bias) s(i, j) += (*rel_bias)[static_cast<std::size_t>(bias_index[i * m2 + j]) * heads + h];
          if (labels && (*labels)[win * m2 + i] != (*labels)[win * m2 + j]) s(i, j) = -std::numeric_limits<T>::infinity();
          mx = std::max(mx, s(i, j));
        }
        T z = 0;
        for (int j = 0; j < m2; ++j) z += s(i, j) = std::exp(s(i, j) - mx);
        s.row(i) /= z;
      }
      MutStridedMap<T> o(out.data() + static_cast<std::size_t>(win) * m2 * channels + h * dh, m2, dh,
                         Eigen::OuterStride<>(channels));
      o.noalias() = s * v;
      if (attn_out) {
        MapMat<T>(attn_out->data() + (static_cast<std::size_t>(win) * heads + h) * m2 * m2, m2, m2) = s;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockWeights<T>& w, const BlockSpec& spec, BlockCache<T>* cache) {
  check_block(x, w, spec);
  const int c = x.channels();
  const int h = x.height();
  const int wd = x.width();
  const int n = h * wd;
  const int hidden = w.fc1_w->dim(0);
  const bool shifted = spec.shifted && spec.window / 2 > 0;

  BlockCache<T> local;
  BlockCache<T>& k = cache ? *cache : local;
  k.channels = c;
  k.height = h;
  k.width = wd;
  k.order = window_token_order(h, wd, spec.window, shifted);
  if (shifted && spec.mask_shifted) {
    k.labels = shift_region_labels(h, wd, spec.window, true);
  } else {
    k.labels.clear();
  }

  // (C, H, W) -> token-major (N, C).
  k.x.resize(static_cast<std::size_t>(n) * c);
  MapMat<T>(k.x.data(), n, c) = CMapMat<T>(x.data(), c, n).transpose();

  std::vector<T> ln1(static_cast<std::size_t>(n) * c);
  k.ln1_hat.resize(ln1.size());
  k.ln1_rstd.resize(static_cast<std::size_t>(n));
  layer_norm(k.x.data(), n, c, *w.norm1_gamma, *w.norm1_beta, k.ln1_hat.data(), k.ln1_rstd.data(), ln1.data());

  k.ln1_out_w.resize(ln1.size());
  for (int i = 0; i < n; ++i) {
    std::copy_n(ln1.data() + static_cast<std::size_t>(k.order[i]) * c, c, k.ln1_out_w.data() + static_cast<std::size_t>(i) * c);
  }
  k.qkv.resize(static_cast<std::size_t>(n) * 3 * c);
  linear(k.ln1_out_w.data(), n, c, *w.qkv_w, *w.qkv_b, k.qkv.data());
  k.heads_out = window_self_attention(k.qkv, c, spec.window, spec.heads, w.rel_bias, k.labels.empty() ? nullptr : &k.labels,
                                      &k.attn);
  std::vector<T> proj(static_cast<std::size_t>(n) * c);
  linear(k.heads_out.data(), n, c, *w.proj_w, *w.proj_b, proj.data());

  k.x1 = k.x;
  for (int i = 0; i < n; ++i) {
    T* dst = k.x1.data() + static_cast<std::size_t>(k.order[i]) * c;
    const T* src = proj.data() + static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) dst[j] += src[j];
  }

  k.ln2_out.resize(k.x1.size());
  k.ln2_hat.resize(k.x1.size());
  k.ln2_rstd.resize(static_cast<std::size_t>(n));
  layer_norm(k.x1.data(), n, c, *w.norm2_gamma, *w.norm2_beta, k.ln2_hat.data(), k.ln2_rstd.data(), k.ln2_out.data());
  k.fc1_pre.resize(static_cast<std::size_t>(n) * hidden);
  linear(k.ln2_out.data(), n, c, *w.fc1_w, *w.fc1_b, k.fc1_pre.data());
  k.gelu.resize(k.fc1_pre.size());
  std::transform(k.fc1_pre.begin(), k.fc1_pre.end(), k.gelu.begin(), [](T v) { return gelu(v); });
  std::vector<T> mlp(static_cast<std::size_t>(n) * c);
  linear(k.gelu.data(), n, hidden, *w.fc2_w, *w.fc2_b, mlp.data());

  Tensor<T> y({c, h, wd});
  MapMat<T>(y.data(), c, n) = (CMapMat<T>(k.x1.data(), n, c) + CMapMat<T>(mlp.data(), n, c)).transpose();
  return y;
}

template <typename T>
Tensor<T> block_backward(const Tensor<T>& dy, const BlockWeights<T>& w, const BlockGrads<T>& g, const BlockSpec& spec,
                         const BlockCache<T>& k) {
  const int c = k.channels;
  const int n = k.height * k.width;
  const int hidden = w.fc1_w->dim(0);
  const int m2 = spec.window * spec.window;
  const int heads = spec.heads;
  const int dh = c / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<T> dx1(static_cast<std::size_t>(n) * c);
  MapMat<T>(dx1.data(), n, c) = CMapMat<T>(dy.data(), c, n).transpose();

  // MLP branch.
  std::vector<T> dgelu(static_cast<std::size_t>(n) * hidden);
  linear_backward(k.gelu.data(), dx1.data(), n, hidden, *w.fc2_w, *g.fc2_w, *g.fc2_b, dgelu.data());
  for (std::size_t i = 0; i < dgelu.size(); ++i) dgelu[i] *= gelu_grad(k.fc1_pre[i]);
  std::vector<T> dln2(static_cast<std::size_t>(n) * c);
  linear_backward(k.ln2_out.data(), dgelu.data(), n, c, *w.fc1_w, *g.fc1_w, *g.fc1_b, dln2.data());
  layer_norm_backward(dln2.data(), k.ln2_hat.data(), k.ln2_rstd.data(), n, c, *w.norm2_gamma, *g.norm2_gamma,
                      *g.norm2_beta, dx1.data());

  // Attention branch; dx1 is now dL/dx1 and also the residual part of dL/dx.
  std::vector<T> dproj(static_cast<std::size_t>(n) * c);
  for (int i = 0; i < n; ++i) {
    std::copy_n(dx1.data() + static_cast<std::size_t>(k.order[i]) * c, c, dproj.data() + static_cast<std::size_t>(i) * c);
  }
  std::vector<T> dheads(static_cast<std::size_t>(n) * c);
  linear_backward(k.heads_out.data(), dproj.data(), n, c, *w.proj_w, *g.proj_w, *g.proj_b, dheads.data());

  const int stride = 3 * c;
  std::vector<T> dqkv(static_cast<std::size_t>(n) * stride, T(0));
  RowMat<T> da(m2, m2);
  RowMat<T> ds(m2, m2);
  for (int win = 0; win < n / m2; ++win) {
    const T* base = k.qkv.data() + static_cast<std::size_t>(win) * m2 * stride;
    T* dbase = dqkv.data() + static_cast<std::size_t>(win) * m2 * stride;
    for (int h = 0; h < heads; ++h) {
      CMapMat<T> a(k.attn.data() + (static_cast<std::size_t>(win) * heads + h) * m2 * m2, m2, m2);
      StridedMap<T> q(base + h * dh, m2, dh, Eigen::OuterStride<>(stride));
      StridedMap<T> kk(base + c + h * dh, m2, dh, Eigen::OuterStride<>(stride));
      StridedMap<T> v(base + 2 * c + h * dh, m2, dh, Eigen::OuterStride<>(stride));
      StridedMap<T> dout(dheads.data() + static_cast<std::size_t>(win) * m2 * c + h * dh, m2, dh, Eigen::OuterStride<>(c));
      MutStridedMap<T> dq(dbase + h * dh, m2, dh, Eigen::OuterStride<>(stride));
      MutStridedMap<T> dk(dbase + c + h * dh, m2, dh, Eigen::OuterStride<>(stride));
      MutStridedMap<T> dv(dbase + 2 * c + h * dh, m2, dh, Eigen::OuterStride<>(stride));

      da.noalias() = dout * v.transpose();
      dv.noalias() = a.transpose() * dout;
      for (int i = 0; i < m2; ++i) {
        const T dot = a.row(i).dot(da.row(i));
        for (int j = 0; j < m2; ++j) ds(i, j) = a(i, j) * (da(i, j) - dot);
      }
      for (int i = 0; i < m2; ++i) {
        for (int j = 0; j < m2; ++j) {
          const int idx = relative_position_index(i / spec.window, i % spec.window, j / spec.window, j % spec.window,
                                                  spec.window);
          (*g.rel_bias)[static_cast<std::size_t>(idx) * heads + h] += ds(i, j);
        }
      }
      dq.noalias() = scale * (ds * kk);
      dk.noalias() = scale * (ds.transpose() * q);
    }
  }

  std::vector<T> dln1_w(static_cast<std::size_t>(n) * c);
  linear_backward(k.ln1_out_w.data(), dqkv.data(), n, c, *w.qkv_w, *g.qkv_w, *g.qkv_b, dln1_w.data());
  std::vector<T> dln1(static_cast<std::size_t>(n) * c);
  for (int i = 0; i < n; ++i) {
    std::copy_n(dln1_w.data() + static_cast<std::size_t>(i) * c, c, dln1.data() + static_cast<std::size_t>(k.order[i]) * c);
  }
  layer_norm_backward(dln1.data(), k.ln1_hat.data(), k.ln1_rstd.data(), n, c, *w.norm1_gamma, *g.norm1_gamma,
                      *g.norm1_beta, dx1.data());

  Tensor<T> dx({c, k.height, k.width});
  MapMat<T>(dx.data(), c, n) = CMapMat<T>(dx1.data(), n, c).transpose();
  return dx;
}

#define MSFA_INSTANTIATE_ATTN(T)                                                                                    \
  template Tensor<T> cyclic_shift(const Tensor<T>&, int, int);                                                      \
  template std::vector<T> window_self_attention(const std::vector<T>&, int, int, int, const Tensor<T>*,             \
                                                const std::vector<int>*, std::vector<T>*);                          \
  template Tensor<T> block_forward(const Tensor<T>&, const BlockWeights<T>&, const BlockSpec&, BlockCache<T>*);     \
  template Tensor<T> block_backward(const Tensor<T>&, const BlockWeights<T>&, const BlockGrads<T>&,                 \
                                    const BlockSpec&, const BlockCache<T>&);

MSFA_INSTANTIATE_ATTN(float)
MSFA_INSTANTIATE_ATTN(double)

}  // namespace msfa::attn
