#include "msfanet/nn.hpp"

#include <cmath>

#include <Eigen/Core>

namespace msfa::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

/// Column buffer of shape (C * k * k, out_h * out_w).
template <typename T>
void im2col(const T* x, int channels, int h, int w, ConvSpec s, int oh, int ow, T* col) {
  const int k = s.kernel;
  std::size_t row = 0;
  for (int c = 0; c < channels; ++c) {
    const T* plane = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++row) {
        T* dst = col + row * static_cast<std::size_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.pad + ky;
          T* d = dst + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(d, d + ow, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * w;
          if (s.stride == 1) {
            const int shift = kx - s.pad;
            const int lo = std::max(0, -shift);
            const int hi = std::min(ow, w - shift);
            std::fill(d, d + std::max(lo, 0), T(0));
            for (int ox = lo; ox < hi; ++ox) d[ox] = src[ox + shift];
            if (hi < ow) std::fill(d + std::max(hi, 0), d + ow, T(0));
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * s.stride - s.pad + kx;
              d[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

/// Scatter-adds a column buffer back onto a (C, h, w) image.
template <typename T>
void col2im(const T* col, int channels, int h, int w, ConvSpec s, int oh, int ow, T* x) {
  const int k = s.kernel;
  std::size_t row = 0;
  for (int c = 0; c < channels; ++c) {
    T* plane = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx, ++row) {
        const T* src = col + row * static_cast<std::size_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * w;
          const T* srow = src + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += srow[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(ConvSpec s) { return s.kernel == 1 && s.stride == 1 && s.pad == 0; }

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, ConvSpec spec) {
  MSFA_EXPECT(x.rank() == 3 && w.rank() == 4, "conv2d expects (C,H,W) input and 4D weights");
  const int cin = x.channels();
  const int cout = w.dim(0);
  if (w.dim(1) != cin || w.dim(2) != spec.kernel || w.dim(3) != spec.kernel) {
    throw ContractError("conv2d weight " + shape_string(w.shape()) + " does not match input channels " +
                        std::to_string(cin) + " and kernel " + std::to_string(spec.kernel));
  }
  const int oh = spec.out_size(x.height());
  const int ow = spec.out_size(x.width());
  MSFA_EXPECT(oh > 0 && ow > 0, "conv2d output would be empty");
  const int kdim = cin * spec.kernel * spec.kernel;
  const int n = oh * ow;

  Tensor<T> y({cout, oh, ow});
  MapMat<T> ym(y.data(), cout, n);
  CMapMat<T> wm(w.data(), cout, kdim);
  if (is_pointwise(spec)) {
    ym.noalias() = wm * CMapMat<T>(x.data(), cin, n);
  } else {
    std::vector<T> col(static_cast<std::size_t>(kdim) * n);
    im2col(x.data(), cin, x.height(), x.width(), spec, oh, ow, col.data());
    ym.noalias() = wm * CMapMat<T>(col.data(), kdim, n);
  }
  if (bias) {
    MSFA_EXPECT(bias->size() == static_cast<std::size_t>(cout), "conv2d bias size mismatch");
    for (int c = 0; c < cout; ++c) ym.row(c).array() += (*bias)[c];
  }
  return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, ConvSpec spec, Tensor<T>* dx,
                     Tensor<T>& dw, Tensor<T>* db) {
  const int cin = x.channels();
  const int cout = w.dim(0);
  const int oh = dy.height();
  const int ow = dy.width();
  const int kdim = cin * spec.kernel * spec.kernel;
  const int n = oh * ow;
  CMapMat<T> dym(dy.data(), cout, n);
  CMapMat<T> wm(w.data(), cout, kdim);
  MapMat<T> dwm(dw.data(), cout, kdim);

  if (db) {
    // Plain loops keep the summation order independent of buffer alignment.
    for (int c = 0; c < cout; ++c) {
      const T* row = dy.data() + static_cast<std::size_t>(c) * n;
      T acc = 0;
      for (int i = 0; i < n; ++i) acc += row[i];
      (*db)[c] += acc;
    }
  }
  if (is_pointwise(spec)) {
    CMapMat<T> xm(x.data(), cin, n);
    dwm.noalias() += dym * xm.transpose();
    if (dx) {
      *dx = Tensor<T>(x.shape());
      MapMat<T>(dx->data(), cin, n).noalias() = wm.transpose() * dym;
    }
    return;
  }
  std::vector<T> col(static_cast<std::size_t>(kdim) * n);
  im2col(x.data(), cin, x.height(), x.width(), spec, oh, ow, col.data());
  dwm.noalias() += dym * CMapMat<T>(col.data(), kdim, n).transpose();
  if (dx) {
    MapMat<T>(col.data(), kdim, n).noalias() = wm.transpose() * dym;
    *dx = Tensor<T>(x.shape());
    col2im(col.data(), cin, x.height(), x.width(), spec, oh, ow, dx->data());
  }
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, ConvSpec spec) {
  MSFA_EXPECT(x.rank() == 3 && w.rank() == 4, "conv_transpose2d expects (C,H,W) input and 4D weights");
  const int cin = x.channels();
  MSFA_EXPECT(w.dim(0) == cin && w.dim(2) == spec.kernel && w.dim(3) == spec.kernel,
              "conv_transpose2d weight " + shape_string(w.shape()) + " does not match input");
  const int cout = w.dim(1);
  const int h = x.height();
  const int wd = x.width();
  const int oh = (h - 1) * spec.stride - 2 * spec.pad + spec.kernel;
  const int ow = (wd - 1) * spec.stride - 2 * spec.pad + spec.kernel;
  const int kdim = cout * spec.kernel * spec.kernel;
  const int n = h * wd;

  std::vector<T> col(static_cast<std::size_t>(kdim) * n);
  MapMat<T>(col.data(), kdim, n).noalias() = CMapMat<T>(w.data(), cin, kdim).transpose() * CMapMat<T>(x.data(), cin, n);
  Tensor<T> y({cout, oh, ow});
  col2im(col.data(), cout, oh, ow, spec, h, wd, y.data());
  if (bias) {
    MSFA_EXPECT(bias->size() == static_cast<std::size_t>(cout), "conv_transpose2d bias size mismatch");
    for (int c = 0; c < cout; ++c) {
      T* p = y.data() + static_cast<std::size_t>(c) * y.plane();
      for (std::size_t i = 0; i < y.plane(); ++i) p[i] += (*bias)[c];
    }
  }
  return y;
}

template <typename T>
void conv_transpose2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, ConvSpec spec,
                               Tensor<T>* dx, Tensor<T>& dw, Tensor<T>* db) {
  const int cin = x.channels();
  const int cout = w.dim(1);
  const int h = x.height();
  const int wd = x.width();
  const int kdim = cout * spec.kernel * spec.kernel;
  const int n = h * wd;
  if (db) {
    for (int c = 0; c < cout; ++c) {
      const T* p = dy.data() + static_cast<std::size_t>(c) * dy.plane();
      T s = 0;
      for (std::size_t i = 0; i < dy.plane(); ++i) s += p[i];
      (*db)[c] += s;
    }
  }
  std::vector<T> col(static_cast<std::size_t>(kdim) * n);
  im2col(dy.data(), cout, dy.height(), dy.width(), spec, h, wd, col.data());
  CMapMat<T> colm(col.data(), kdim, n);
  MapMat<T>(dw.data(), cin, kdim).noalias() += CMapMat<T>(x.data(), cin, n) * colm.transpose();
  if (dx) {
    *dx = Tensor<T>(x.shape());
    MapMat<T>(dx->data(), cin, n).noalias() = CMapMat<T>(w.data(), cin, kdim) * colm;
  }
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (T& v : x.vec()) v = v < T(0) ? T(0) : v;  // NaN passes through
}

template <typename T>
void relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy) {
  MSFA_EXPECT(y.size() == dy.size(), "relu backward size mismatch");
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(y[i] > T(0))) dy[i] = T(0);
  }
}

template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& x, std::vector<std::uint32_t>& argmax) {
  MSFA_EXPECT(x.height() % 2 == 0 && x.width() % 2 == 0, "max_pool2x2 needs even spatial dims");
  const int c = x.channels();
  const int oh = x.height() / 2;
  const int ow = x.width() / 2;
  Tensor<T> y({c, oh, ow});
  argmax.resize(y.size());
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = (static_cast<std::size_t>(ch) * x.height() + 2 * oy) * x.width() + 2 * ox;
        T bv = x[best];
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (static_cast<std::size_t>(ch) * x.height() + 2 * oy + dy) * x.width() + 2 * ox + dx;
            if (x[idx] > bv || std::isnan(x[idx])) {
              bv = x[idx];
              best = idx;
            }
          }
        }
        y[o] = bv;
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> max_pool2x2_backward(const Tensor<T>& dy, const std::vector<std::uint32_t>& argmax,
                               const std::vector<int>& in_shape) {
  Tensor<T> dx(in_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
  return dx;
}

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
  MSFA_EXPECT(x.height() % 2 == 0 && x.width() % 2 == 0, "avg_pool2x2 needs even spatial dims");
  const int oh = x.height() / 2;
  const int ow = x.width() / 2;
  Tensor<T> y({x.channels(), oh, ow});
  for (int c = 0; c < x.channels(); ++c) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        y.at(c, oy, ox) = T(0.25) * (x.at(c, 2 * oy, 2 * ox) + x.at(c, 2 * oy, 2 * ox + 1) +
                                     x.at(c, 2 * oy + 1, 2 * ox) + x.at(c, 2 * oy + 1, 2 * ox + 1));
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> avg_pool2x2_backward(const Tensor<T>& dy, const std::vector<int>& in_shape) {
  Tensor<T> dx(in_shape);
  for (int c = 0; c < dy.channels(); ++c) {
    for (int oy = 0; oy < dy.height(); ++oy) {
      for (int ox = 0; ox < dy.width(); ++ox) {
        const T g = T(0.25) * dy.at(c, oy, ox);
        dx.at(c, 2 * oy, 2 * ox) += g;
        dx.at(c, 2 * oy, 2 * ox + 1) += g;
        dx.at(c, 2 * oy + 1, 2 * ox) += g;
        dx.at(c, 2 * oy + 1, 2 * ox + 1) += g;
      }
    }
  }
  return dx;
}

namespace {

struct LerpTap {
  int lo;
  int hi;
  double frac;
};

std::vector<LerpTap> lerp_taps(int in, int out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double src = std::max(0.0, (o + 0.5) * scale - 0.5);
    const int lo = std::min(static_cast<int>(src), in - 1);
    taps[o] = {lo, std::min(lo + 1, in - 1), src - lo};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
  if (x.height() == out_h && x.width() == out_w) return x;
  const auto ty = lerp_taps(x.height(), out_h);
  const auto tx = lerp_taps(x.width(), out_w);
  Tensor<T> y({x.channels(), out_h, out_w});
  for (int c = 0; c < x.channels(); ++c) {
    for (int oy = 0; oy < out_h; ++oy) {
      const T fy = static_cast<T>(ty[oy].frac);
      for (int ox = 0; ox < out_w; ++ox) {
        const T fx = static_cast<T>(tx[ox].frac);
        const T top = x.at(c, ty[oy].lo, tx[ox].lo) * (1 - fx) + x.at(c, ty[oy].lo, tx[ox].hi) * fx;
        const T bot = x.at(c, ty[oy].hi, tx[ox].lo) * (1 - fx) + x.at(c, ty[oy].hi, tx[ox].hi) * fx;
        y.at(c, oy, ox) = top * (1 - fy) + bot * fy;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> bilinear_resize_backward(const Tensor<T>& dy, int in_h, int in_w) {
  if (dy.height() == in_h && dy.width() == in_w) return dy;
  const auto ty = lerp_taps(in_h, dy.height());
  const auto tx = lerp_taps(in_w, dy.width());
  Tensor<T> dx({dy.channels(), in_h, in_w});
  for (int c = 0; c < dy.channels(); ++c) {
    for (int oy = 0; oy < dy.height(); ++oy) {
      const T fy = static_cast<T>(ty[oy].frac);
      for (int ox = 0; ox < dy.width(); ++ox) {
        const T fx = static_cast<T>(tx[ox].frac);
        const T g = dy.at(c, oy, ox);
        dx.at(c, ty[oy].lo, tx[ox].lo) += g * (1 - fy) * (1 - fx);
        dx.at(c, ty[oy].lo, tx[ox].hi) += g * (1 - fy) * fx;
        dx.at(c, ty[oy].hi, tx[ox].lo) += g * fy * (1 - fx);
        dx.at(c, ty[oy].hi, tx[ox].hi) += g * fy * fx;
      }
    }
  }
  return dx;
}

template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, int out_h, int out_w) {
  MSFA_EXPECT(out_h >= x.height() && out_w >= x.width(), "reflect_pad cannot shrink");
  if (out_h == x.height() && out_w == x.width()) return x;
  Tensor<T> y({x.channels(), out_h, out_w});
  for (int c = 0; c < x.channels(); ++c) {
    for (int yy = 0; yy < out_h; ++yy) {
      const int sy = reflect_index(yy, x.height());
      for (int xx = 0; xx < out_w; ++xx) y.at(c, yy, xx) = x.at(c, sy, reflect_index(xx, x.width()));
    }
  }
  return y;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, int out_h, int out_w) {
  MSFA_EXPECT(out_h <= x.height() && out_w <= x.width(), "crop larger than input");
  if (out_h == x.height() && out_w == x.width()) return x;
  Tensor<T> y({x.channels(), out_h, out_w});
  for (int c = 0; c < x.channels(); ++c) {
    for (int yy = 0; yy < out_h; ++yy) std::copy_n(&x.at(c, yy, 0), out_w, &y.at(c, yy, 0));
  }
  return y;
}

template <typename T>
Tensor<T> zero_pad(const Tensor<T>& x, int out_h, int out_w) {
  MSFA_EXPECT(out_h >= x.height() && out_w >= x.width(), "zero_pad cannot shrink");
  if (out_h == x.height() && out_w == x.width()) return x;
  Tensor<T> y({x.channels(), out_h, out_w});
  for (int c = 0; c < x.channels(); ++c) {
    for (int yy = 0; yy < x.height(); ++yy) std::copy_n(&x.at(c, yy, 0), x.width(), &y.at(c, yy, 0));
  }
  return y;
}

#define MSFA_INSTANTIATE_NN(T)                                                                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, ConvSpec);                       \
  template void conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ConvSpec, Tensor<T>*,        \
                                Tensor<T>&, Tensor<T>*);                                                            \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, ConvSpec);             \
  template void conv_transpose2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ConvSpec,          \
                                          Tensor<T>*, Tensor<T>&, Tensor<T>*);                                      \
  template void relu_inplace(Tensor<T>&);                                                                           \
  template void relu_backward_inplace(const Tensor<T>&, Tensor<T>&);                                                \
  template Tensor<T> max_pool2x2(const Tensor<T>&, std::vector<std::uint32_t>&);                                    \
  template Tensor<T> max_pool2x2_backward(const Tensor<T>&, const std::vector<std::uint32_t>&,                      \
                                          const std::vector<int>&);                                                 \
  template Tensor<T> avg_pool2x2(const Tensor<T>&);                                                                 \
  template Tensor<T> avg_pool2x2_backward(const Tensor<T>&, const std::vector<int>&);                               \
  template Tensor<T> bilinear_resize(const Tensor<T>&, int, int);                                                   \
  template Tensor<T> bilinear_resize_backward(const Tensor<T>&, int, int);                                          \
  template Tensor<T> reflect_pad(const Tensor<T>&, int, int);                                                       \
  template Tensor<T> crop(const Tensor<T>&, int, int);                                                              \
  template Tensor<T> zero_pad(const Tensor<T>&, int, int);

MSFA_INSTANTIATE_NN(float)
MSFA_INSTANTIATE_NN(double)

}  // namespace msfa::nn
