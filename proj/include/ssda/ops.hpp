#pragma once

// Differentiable layers used by the segmentation network: convolution,
// activation, batch normalization, softmax, resizing and normalization.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ssda/error.hpp"
#include "ssda/tensor.hpp"

namespace ssda {

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, out_h, out_w;
  int stride, padding, dilation;

  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

template <class T>
void im2col(const ConvGeometry& g, const T* in, T* col) {
  const std::size_t cols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* dst = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(ki) * g.dilation;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(kj) * g.dilation;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                ix < static_cast<long>(g.width);
            dst[oy * g.out_w + ox] = inside ? in[(c * g.height + iy) * g.width + ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* col, T* in) {
  const std::size_t cols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* src = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(ki) * g.dilation;
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(kj) * g.dilation;
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            in[(c * g.height + iy) * g.width + ix] += src[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

struct ConvOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

/// 2-D cross-correlation with zero padding. `bias` may be undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 ConvOptions opt = {}) {
  if (input.rank() != 4 || weight.rank() != 4 || input.dim(1) != weight.dim(1)) {
    throw ConfigError("conv2d: input " + shape_string(input.shape()) + " incompatible with weight " +
                      shape_string(weight.shape()));
  }
  const std::size_t out_c = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_c)) {
    throw ConfigError("conv2d: bias " + shape_string(bias.shape()) + " incompatible with weight " +
                      shape_string(weight.shape()));
  }
  if (opt.stride < 1 || opt.dilation < 1 || opt.padding < 0) {
    throw ConfigError("conv2d: invalid stride/padding/dilation");
  }
  const long span_h = static_cast<long>(input.dim(2)) + 2 * opt.padding -
                      opt.dilation * (static_cast<long>(weight.dim(2)) - 1) - 1;
  const long span_w = static_cast<long>(input.dim(3)) + 2 * opt.padding -
                      opt.dilation * (static_cast<long>(weight.dim(3)) - 1) - 1;
  if (span_h < 0 || span_w < 0) {
    throw ConfigError("conv2d: kernel " + shape_string(weight.shape()) + " larger than padded input " +
                      shape_string(input.shape()));
  }
  const detail::ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3),
                               static_cast<std::size_t>(span_h / opt.stride + 1),
                               static_cast<std::size_t>(span_w / opt.stride + 1),
                               opt.stride, opt.padding, opt.dilation};
  const std::size_t batch = input.dim(0);
  const std::size_t rows = g.rows();
  const std::size_t cols = g.cols();
  const std::size_t in_item = g.channels * g.height * g.width;
  const std::size_t out_item = out_c * cols;

  std::vector<T> out(batch * out_item, T(0));
  std::vector<T> col(g.pointwise() ? 0 : rows * cols);
  for (std::size_t b = 0; b < batch; ++b) {
    T* ob = out.data() + b * out_item;
    if (bias.defined()) {
      for (std::size_t c = 0; c < out_c; ++c) std::fill(ob + c * cols, ob + (c + 1) * cols, bias[c]);
    }
    const T* src = input.data().data() + b * in_item;
    if (!g.pointwise()) {
      detail::im2col(g, src, col.data());
      src = col.data();
    }
    detail::gemm_nn(out_c, cols, rows, weight.data().data(), src, ob);
  }

  return detail::make_op<T>(
      {batch, out_c, g.out_h, g.out_w}, std::move(out), {input, weight, bias},
      [input, weight, bias, g, batch, out_c, rows, cols, in_item, out_item](const Node<T>& self) {
        T* gin = detail::grad_of(input);
        T* gw = detail::grad_of(weight);
        T* gb = detail::grad_of(bias);
        std::vector<T> col(g.pointwise() ? 0 : rows * cols);
        std::vector<T> col_t(gw ? rows * cols : 0);
        std::vector<T> dcol(gin && !g.pointwise() ? rows * cols : 0);
        for (std::size_t b = 0; b < batch; ++b) {
          const T* go = self.grad.data() + b * out_item;
          if (gb) {
            for (std::size_t c = 0; c < out_c; ++c) {
              T acc = 0;
              for (std::size_t p = 0; p < cols; ++p) acc += go[c * cols + p];
              gb[c] += acc;
            }
          }
          if (gw) {
            const T* src = input.data().data() + b * in_item;
            if (!g.pointwise()) {
              detail::im2col(g, src, col.data());
              src = col.data();
            }
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t p = 0; p < cols; ++p) col_t[p * rows + r] = src[r * cols + p];
            }
            detail::gemm_nn(out_c, rows, cols, go, col_t.data(), gw);
          }
          if (gin) {
            T* dst = gin + b * in_item;
            if (g.pointwise()) {
              detail::gemm_tn(rows, cols, out_c, weight.data().data(), go, dst);
            } else {
              std::fill(dcol.begin(), dcol.end(), T(0));
              detail::gemm_tn(rows, cols, out_c, weight.data().data(), go, dcol.data());
              detail::col2im_add(g, dcol.data(), dst);
            }
          }
        }
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [x](const Node<T>& self) {
    T* g = detail::grad_of(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (x[i] > T(0)) g[i] += self.grad[i];
    }
  });
}

enum class Mode { train, eval };

constexpr double kNormEps = 1e-5;
constexpr double kNormMomentum = 0.1;

/// Batch normalization over (B, H, W) per channel. In train mode the batch
/// statistics are used and the running buffers are updated in place (running
/// variance uses the unbiased estimate); eval mode uses the running buffers.
template <class T>
Tensor<T> norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Mode mode,
                 Tensor<T> running_mean, Tensor<T> running_var) {
  if (x.rank() != 4 || gamma.numel() != x.dim(1) || beta.numel() != x.dim(1) ||
      running_mean.numel() != x.dim(1) || running_var.numel() != x.dim(1)) {
    throw ConfigError("norm2d: input " + shape_string(x.shape()) + " incompatible with affine " +
                      shape_string(gamma.shape()));
  }
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  const std::size_t count = batch * plane;
  if (mode == Mode::train && count <= 1) {
    throw NumericError("norm2d: degenerate statistics over a single element per channel");
  }

  std::vector<T> mean(channels), invstd(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x.data().data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x.data().data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + kNormEps));
      running_mean[c] = static_cast<T>((1.0 - kNormMomentum) * running_mean[c] + kNormMomentum * mu);
      const double unbiased = ss / static_cast<double>(count - 1);
      running_var[c] = static_cast<T>((1.0 - kNormMomentum) * running_var[c] + kNormMomentum * unbiased);
    } else {
      mean[c] = running_mean[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + kNormEps));
    }
  }

  std::vector<T> xhat(x.numel()), out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xhat[base + i] = (x[base + i] - mean[c]) * invstd[c];
        out[base + i] = gamma[c] * xhat[base + i] + beta[c];
      }
    }
  }

  return detail::make_op<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, mode, xhat = std::move(xhat), invstd, batch, channels, plane,
       count](const Node<T>& self) {
        T* gx = detail::grad_of(x);
        T* gg = detail::grad_of(gamma);
        T* gbeta = detail::grad_of(beta);
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g += self.grad[base + i];
              sum_gx += self.grad[base + i] * xhat[base + i];
            }
          }
          if (gg) gg[c] += static_cast<T>(sum_gx);
          if (gbeta) gbeta[c] += static_cast<T>(sum_g);
          if (!gx) continue;
          const T scale = gamma[c] * invstd[c];
          if (mode == Mode::eval) {
            for (std::size_t b = 0; b < batch; ++b) {
              const std::size_t base = (b * channels + c) * plane;
              for (std::size_t i = 0; i < plane; ++i) gx[base + i] += scale * self.grad[base + i];
            }
            continue;
          }
          const T mean_g = static_cast<T>(sum_g / static_cast<double>(count));
          const T mean_gx = static_cast<T>(sum_gx / static_cast<double>(count));
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              gx[base + i] += scale * (self.grad[base + i] - mean_g - xhat[base + i] * mean_gx);
            }
          }
        }
      });
}

namespace detail {

struct AxisLayout {
  std::size_t outer, extent, inner;
};

inline AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw ConfigError("axis out of range for shape " + shape_string(shape));
  AxisLayout l{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

}  // namespace detail

/// Softmax along `axis`, computed with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis);
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.extent * l.inner + in;
      T mx = x[base];
      for (std::size_t c = 0; c < l.extent; ++c) {
        const T v = x[base + c * l.inner];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, v);
      }
      T total = 0;
      for (std::size_t c = 0; c < l.extent; ++c) {
        const T e = std::exp(x[base + c * l.inner] - mx);
        out[base + c * l.inner] = e;
        total += e;
      }
      for (std::size_t c = 0; c < l.extent; ++c) out[base + c * l.inner] /= total;
    }
  }
  std::vector<T> probs = out;
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [x, l, probs = std::move(probs)](const Node<T>& self) {
    T* g = detail::grad_of(x);
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t in = 0; in < l.inner; ++in) {
        const std::size_t base = o * l.extent * l.inner + in;
        T dot = 0;
        for (std::size_t c = 0; c < l.extent; ++c) {
          dot += self.grad[base + c * l.inner] * probs[base + c * l.inner];
        }
        for (std::size_t c = 0; c < l.extent; ++c) {
          const std::size_t i = base + c * l.inner;
          g[i] += probs[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

namespace detail {

struct ResizeTap {
  std::size_t lo, hi;
  double frac;
};

// Half-pixel (align_corners = false) sampling positions.
inline std::vector<ResizeTap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<ResizeTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

template <class T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4) throw ConfigError("bilinear_upsample: expected rank-4 input, got " + shape_string(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  if (in_h == out_h && in_w == out_w) {
    std::vector<T> out(x.data().begin(), x.data().end());
    return detail::make_op<T>(x.shape(), std::move(out), {x}, [x](const Node<T>& self) {
      T* g = detail::grad_of(x);
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
  }
  const auto ty = detail::resize_taps(in_h, out_h);
  const auto tx = detail::resize_taps(in_w, out_w);
  std::vector<T> out(planes * out_h * out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data().data() + p * in_h * in_w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const T fy = static_cast<T>(ty[oy].frac);
      const T* r0 = src + ty[oy].lo * in_w;
      const T* r1 = src + ty[oy].hi * in_w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const T fx = static_cast<T>(tx[ox].frac);
        const T top = r0[tx[ox].lo] * (T(1) - fx) + r0[tx[ox].hi] * fx;
        const T bottom = r1[tx[ox].lo] * (T(1) - fx) + r1[tx[ox].hi] * fx;
        dst[oy * out_w + ox] = top * (T(1) - fy) + bottom * fy;
      }
    }
  }
  return detail::make_op<T>(
      {x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x},
      [x, ty, tx, planes, in_h, in_w, out_h, out_w](const Node<T>& self) {
        T* g = detail::grad_of(x);
        for (std::size_t p = 0; p < planes; ++p) {
          T* dst = g + p * in_h * in_w;
          const T* go = self.grad.data() + p * out_h * out_w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const T fy = static_cast<T>(ty[oy].frac);
            T* r0 = dst + ty[oy].lo * in_w;
            T* r1 = dst + ty[oy].hi * in_w;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const T fx = static_cast<T>(tx[ox].frac);
              const T v = go[oy * out_w + ox];
              r0[tx[ox].lo] += v * (T(1) - fy) * (T(1) - fx);
              r0[tx[ox].hi] += v * (T(1) - fy) * fx;
              r1[tx[ox].lo] += v * fy * (T(1) - fx);
              r1[tx[ox].hi] += v * fy * fx;
            }
          }
        }
      });
}

constexpr double kL2Eps = 1e-12;

/// x / max(||x||, eps) along `axis`.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis, double eps = kL2Eps) {
  const auto l = detail::axis_layout(x.shape(), axis);
  std::vector<T> out(x.numel());
  std::vector<T> norms(l.outer * l.inner);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.extent * l.inner + in;
      double ss = 0.0;
      for (std::size_t c = 0; c < l.extent; ++c) ss += double(x[base + c * l.inner]) * x[base + c * l.inner];
      const T n = static_cast<T>(std::max(std::sqrt(ss), eps));
      norms[o * l.inner + in] = n;
      for (std::size_t c = 0; c < l.extent; ++c) out[base + c * l.inner] = x[base + c * l.inner] / n;
    }
  }
  std::vector<T> y = out;
  return detail::make_op<T>(
      x.shape(), std::move(out), {x},
      [x, l, eps, norms = std::move(norms), y = std::move(y)](const Node<T>& self) {
        T* g = detail::grad_of(x);
        for (std::size_t o = 0; o < l.outer; ++o) {
          for (std::size_t in = 0; in < l.inner; ++in) {
            const std::size_t base = o * l.extent * l.inner + in;
            const T n = norms[o * l.inner + in];
            const bool clamped = static_cast<double>(n) <= eps;
            T dot = 0;
            if (!clamped) {
              for (std::size_t c = 0; c < l.extent; ++c) {
                dot += y[base + c * l.inner] * self.grad[base + c * l.inner];
              }
            }
            for (std::size_t c = 0; c < l.extent; ++c) {
              const std::size_t i = base + c * l.inner;
              g[i] += (self.grad[i] - y[i] * dot) / n;
            }
          }
        }
      });
}

}  // namespace ssda
