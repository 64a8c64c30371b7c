#pragma once

// Differentiable primitives over 4-D (batch, channel, height, width)
// tensors. Every op computes its forward value eagerly and, when the tape
// asks for it, records a closure that accumulates input gradients.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cruseg/image.hpp"
#include "cruseg/parallel.hpp"
#include "cruseg/tape.hpp"
#include "cruseg/tensor.hpp"

namespace cruseg {

/// Geometry of a 2-D cross-correlation. Padding may differ at the start
/// (top/left) and end (bottom/right) so even kernels can keep the size.
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad_begin = 0;
  std::size_t pad_end = 0;

  static ConvSpec symmetric(std::size_t in, std::size_t out, std::size_t k, std::size_t padding,
                            std::size_t stride = 1) {
    return {in, out, k, stride, padding, padding};
  }

  /// Size-preserving geometry for stride 1. Odd kernels pad evenly; even
  /// kernels put the extra zero row/column at the bottom/right.
  static ConvSpec same(std::size_t in, std::size_t out, std::size_t k) {
    return {in, out, k, 1, (k - 1) / 2, (k - 1) - (k - 1) / 2};
  }

  std::size_t output_extent(std::size_t extent) const {
    const std::size_t padded = extent + pad_begin + pad_end;
    if (kernel == 0 || stride == 0 || padded < kernel) {
      throw std::invalid_argument("conv2d: kernel " + std::to_string(kernel) +
                                  " does not fit padded extent " + std::to_string(padded));
    }
    return (padded - kernel) / stride + 1;
  }
};

/// Dense symmetric N x N coupling matrix used for message passing.
template <std::floating_point T>
struct DenseKernel {
  std::size_t size = 0;
  std::vector<T> values;  // row-major, values[p * size + q]

  T operator()(std::size_t p, std::size_t q) const { return values[p * size + q]; }
};

template <std::floating_point T>
using DenseKernelPtr = std::shared_ptr<const DenseKernel<T>>;

enum class Activation { relu, softmax_over_channels };

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + a.shape().str() +
                                      " vs " + b.shape().str());
}

// Fills col (K x P) for one batch item; K = C*k*k rows, P = Ho*Wo columns.
template <class T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, const ConvSpec& s,
            std::size_t Ho, std::size_t Wo, T* col) {
  const std::size_t k = s.kernel;
  const std::ptrdiff_t pb = static_cast<std::ptrdiff_t>(s.pad_begin);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s.stride + ky) - pb;
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s.stride + kx) - pb;
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W))
                          ? T(0)
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W, const ConvSpec& s,
                std::size_t Ho, std::size_t Wo, T* gx) {
  const std::size_t k = s.kernel;
  const std::ptrdiff_t pb = static_cast<std::ptrdiff_t>(s.pad_begin);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s.stride + ky) - pb;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          T* dst = gx + (c * H + static_cast<std::size_t>(iy)) * W;
          const T* src = row + oy * Wo;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s.stride + kx) - pb;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) {
              dst[static_cast<std::size_t>(ix)] += src[ox];
            }
          }
        }
      }
    }
  }
}

// out[c][p] = sum_{q != p} K[p][q] * in[c][q] for every channel plane.
// Computed as the full product minus the diagonal term.
template <class T>
void message_planes(const DenseKernel<T>& K, const T* in, T* out, std::size_t channels) {
  const std::size_t N = K.size;
  MatMap<T> o(out, channels, N);
  o.noalias() = ConstMatMap<T>(in, channels, N) * ConstMatMap<T>(K.values.data(), N, N);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < N; ++p) out[c * N + p] -= K.values[p * N + p] * in[c * N + p];
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

/// Cross-correlation (no kernel flip) plus per-output-channel bias.
/// weights: (out, in, k, k); bias: out values or an empty tensor.
template <std::floating_point T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weights,
                 const Tensor<T>& bias, const ConvSpec& spec) {
  using detail::require;
  const Shape xs = x.shape();
  require(xs.c == spec.in_channels, "conv2d: input channels " + std::to_string(xs.c) +
                                        " != in_channels " + std::to_string(spec.in_channels));
  const Shape ws = weights.shape();
  require(ws.n == spec.out_channels, "conv2d: weight out_channels " + std::to_string(ws.n) +
                                         " != " + std::to_string(spec.out_channels));
  require(ws.c == spec.in_channels, "conv2d: weight in_channels " + std::to_string(ws.c) +
                                        " != " + std::to_string(spec.in_channels));
  require(ws.h == spec.kernel && ws.w == spec.kernel,
          "conv2d: weight kernel " + std::to_string(ws.h) + "x" + std::to_string(ws.w) +
              " != " + std::to_string(spec.kernel));
  if (bias) {
    require(bias.numel() == spec.out_channels,
            "conv2d: bias length " + std::to_string(bias.numel()) + " != out_channels " +
                std::to_string(spec.out_channels));
  }
  const std::size_t Ho = spec.output_extent(xs.h);
  const std::size_t Wo = spec.output_extent(xs.w);
  const std::size_t K = spec.in_channels * spec.kernel * spec.kernel;
  const std::size_t P = Ho * Wo;
  const std::size_t Co = spec.out_channels;

  const bool direct = spec.kernel == 1 && spec.stride == 1 && spec.pad_begin == 0 &&
                      spec.pad_end == 0;
  Tensor<T> out(Shape{xs.n, Co, Ho, Wo});
  auto cols = std::make_shared<std::vector<std::vector<T>>>(direct ? 0 : xs.n);

  detail::ConstMatMap<T> wmat(weights.ptr(), Co, K);
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T* xin = x.ptr() + n * xs.c * xs.plane();
    const T* colp = xin;
    if (!direct) {
      auto& col = (*cols)[n];
      col.resize(K * P);
      detail::im2col(xin, xs.c, xs.h, xs.w, spec, Ho, Wo, col.data());
      colp = col.data();
    }
    detail::MatMap<T> omat(out.ptr() + n * Co * P, Co, P);
    omat.noalias() = wmat * detail::ConstMatMap<T>(colp, K, P);
    if (bias) {
      for (std::size_t o = 0; o < Co; ++o) omat.row(o).array() += bias.data()[o];
    }
  }

  if (tape.wants({&x, &weights, &bias})) {
    tape.record("conv2d", {x, weights, bias}, out,
                [x, weights, bias, out, spec, cols, direct, Ho, Wo, K, P, Co]() mutable {
                  const Shape xs = x.shape();
                  auto gout = out.grad();
                  std::vector<T> gcol(direct ? 0 : K * P);
                  for (std::size_t n = 0; n < xs.n; ++n) {
                    detail::ConstMatMap<T> g(gout.data() + n * Co * P, Co, P);
                    const T* colp = direct ? x.ptr() + n * xs.c * xs.plane() : (*cols)[n].data();
                    if (weights.requires_grad()) {
                      detail::MatMap<T> gw(weights.grad_ptr(), Co, K);
                      gw.noalias() += g * detail::ConstMatMap<T>(colp, K, P).transpose();
                    }
                    if (bias && bias.requires_grad()) {
                      T* gb = bias.grad_ptr();
                      // Plain loop: Eigen's vectorized sum depends on alignment.
                      for (std::size_t o = 0; o < Co; ++o) {
                        const T* row = gout.data() + n * Co * P + o * P;
                        T acc = 0;
                        for (std::size_t i = 0; i < P; ++i) acc += row[i];
                        gb[o] += acc;
                      }
                    }
                    if (x.requires_grad()) {
                      detail::ConstMatMap<T> wmat(weights.ptr(), Co, K);
                      T* gx = x.grad_ptr() + n * xs.c * xs.plane();
                      if (direct) {
                        detail::MatMap<T>(gx, K, P).noalias() += wmat.transpose() * g;
                      } else {
                        detail::MatMap<T>(gcol.data(), K, P).noalias() = wmat.transpose() * g;
                        detail::col2im_add(gcol.data(), xs.c, xs.h, xs.w, spec, Ho, Wo, gx);
                      }
                    }
                  }
                });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

/// 2x2 max pooling with stride 2. Gradient goes to the first maximum in
/// row-major window order.
template <std::floating_point T>
Tensor<T> maxpool2(Tape<T>& tape, const Tensor<T>& x) {
  const Shape s = x.shape();
  detail::require(s.h % 2 == 0, "maxpool2: height " + std::to_string(s.h) + " is odd");
  detail::require(s.w % 2 == 0, "maxpool2: width " + std::to_string(s.w) + " is odd");
  const std::size_t Ho = s.h / 2;
  const std::size_t Wo = s.w / 2;
  Tensor<T> out(Shape{s.n, s.c, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.numel());
  const T* in = x.ptr();
  T* o = out.ptr();
  for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
    const T* src = in + plane * s.h * s.w;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (2 * oy) * s.w + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + s.w, best + s.w + 1};
        for (std::size_t c : cand) {
          if (src[c] > src[best]) best = c;
        }
        const std::size_t oi = plane * Ho * Wo + oy * Wo + ox;
        o[oi] = src[best];
        (*argmax)[oi] = static_cast<std::uint32_t>(plane * s.h * s.w + best);
      }
    }
  }
  if (tape.wants({&x})) {
    tape.record("maxpool2", {x}, out, [x, out, argmax]() mutable {
      auto g = out.grad();
      T* gx = x.grad_ptr();
      for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
    });
  }
  return out;
}

/// Nearest-neighbour 2x enlargement.
template <std::floating_point T>
Tensor<T> upsample2(Tape<T>& tape, const Tensor<T>& x) {
  const Shape s = x.shape();
  const std::size_t Ho = 2 * s.h;
  const std::size_t Wo = 2 * s.w;
  Tensor<T> out(Shape{s.n, s.c, Ho, Wo});
  const T* in = x.ptr();
  T* o = out.ptr();
  for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
    for (std::size_t y = 0; y < Ho; ++y) {
      const T* src = in + plane * s.h * s.w + (y / 2) * s.w;
      T* dst = o + plane * Ho * Wo + y * Wo;
      for (std::size_t xo = 0; xo < Wo; ++xo) dst[xo] = src[xo / 2];
    }
  }
  if (tape.wants({&x})) {
    tape.record("upsample2", {x}, out, [x, out]() mutable {
      const Shape s = x.shape();
      const std::size_t Ho = 2 * s.h;
      const std::size_t Wo = 2 * s.w;
      auto g = out.grad();
      T* gx = x.grad_ptr();
      for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
        for (std::size_t y = 0; y < Ho; ++y) {
          const T* src = g.data() + plane * Ho * Wo + y * Wo;
          T* dst = gx + plane * s.h * s.w + (y / 2) * s.w;
          for (std::size_t xo = 0; xo < Wo; ++xo) dst[xo / 2] += src[xo];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise and channel-wise

template <std::floating_point T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = in[i] > T(0) ? in[i] : T(0);
  if (tape.wants({&x})) {
    tape.record("relu", {x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto in = x.data();
      T* gx = x.grad_ptr();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (in[i] > T(0)) gx[i] += g[i];
      }
    });
  }
  return out;
}

/// Per-pixel softmax across channels, shifted by the channel maximum.
template <std::floating_point T>
Tensor<T> softmax_channels(Tape<T>& tape, const Tensor<T>& x) {
  const Shape s = x.shape();
  detail::require(s.c >= 2, "softmax needs at least 2 channels, got " + std::to_string(s.c));
  Tensor<T> out(s);
  const std::size_t P = s.plane();
  const T* in = x.ptr();
  T* o = out.ptr();
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* xb = in + n * s.c * P;
    T* ob = o + n * s.c * P;
    for (std::size_t p = 0; p < P; ++p) {
      T m = xb[p];
      for (std::size_t c = 1; c < s.c; ++c) m = std::max(m, xb[c * P + p]);
      T z = T(0);
      for (std::size_t c = 0; c < s.c; ++c) {
        const T e = std::exp(xb[c * P + p] - m);
        ob[c * P + p] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.c; ++c) ob[c * P + p] /= z;
    }
  }
  if (tape.wants({&x})) {
    tape.record("softmax", {x}, out, [x, out]() mutable {
      const Shape s = x.shape();
      const std::size_t P = s.plane();
      auto g = out.grad();
      const T* pr = out.ptr();
      T* gx = x.grad_ptr();
      for (std::size_t n = 0; n < s.n; ++n) {
        const std::size_t base = n * s.c * P;
        for (std::size_t p = 0; p < P; ++p) {
          T dot = T(0);
          for (std::size_t c = 0; c < s.c; ++c) dot += g[base + c * P + p] * pr[base + c * P + p];
          for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t i = base + c * P + p;
            gx[i] += pr[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

/// Per-pixel log-softmax across channels.
template <std::floating_point T>
Tensor<T> log_softmax_channels(Tape<T>& tape, const Tensor<T>& x) {
  const Shape s = x.shape();
  detail::require(s.c >= 2, "log_softmax needs at least 2 channels, got " + std::to_string(s.c));
  Tensor<T> out(s);
  const std::size_t P = s.plane();
  const T* in = x.ptr();
  T* o = out.ptr();
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* xb = in + n * s.c * P;
    T* ob = o + n * s.c * P;
    for (std::size_t p = 0; p < P; ++p) {
      T m = xb[p];
      for (std::size_t c = 1; c < s.c; ++c) m = std::max(m, xb[c * P + p]);
      T z = T(0);
      for (std::size_t c = 0; c < s.c; ++c) z += std::exp(xb[c * P + p] - m);
      const T lz = m + std::log(z);
      for (std::size_t c = 0; c < s.c; ++c) ob[c * P + p] = xb[c * P + p] - lz;
    }
  }
  if (tape.wants({&x})) {
    tape.record("log_softmax", {x}, out, [x, out]() mutable {
      const Shape s = x.shape();
      const std::size_t P = s.plane();
      auto g = out.grad();
      const T* lp = out.ptr();
      T* gx = x.grad_ptr();
      for (std::size_t n = 0; n < s.n; ++n) {
        const std::size_t base = n * s.c * P;
        for (std::size_t p = 0; p < P; ++p) {
          T total = T(0);
          for (std::size_t c = 0; c < s.c; ++c) total += g[base + c * P + p];
          for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t i = base + c * P + p;
            gx[i] += g[i] - std::exp(lp[i]) * total;
          }
        }
      }
    });
  }
  return out;
}

template <std::floating_point T>
Tensor<T> activation(Tape<T>& tape, const Tensor<T>& x, Activation kind) {
  return kind == Activation::relu ? relu(tape, x) : softmax_channels(tape, x);
}

/// log(max(x, eps)); the gradient is zero where the clamp is active.
template <std::floating_point T>
Tensor<T> log_clamped(Tape<T>& tape, const Tensor<T>& x, T eps) {
  Tensor<T> out(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = std::log(std::max(in[i], eps));
  if (tape.wants({&x})) {
    tape.record("log_clamped", {x}, out, [x, out, eps]() mutable {
      auto g = out.grad();
      auto in = x.data();
      T* gx = x.grad_ptr();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (in[i] > eps) gx[i] += g[i] / in[i];
      }
    });
  }
  return out;
}

/// Inverted dropout: survivors are scaled by 1/(1-rate) so evaluation is
/// the identity. The mask is a pure function of `seed`.
template <std::floating_point T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double rate, std::uint64_t seed,
                  bool training) {
  detail::require(rate >= 0.0 && rate < 1.0,
                  "dropout: rate " + std::to_string(rate) + " outside [0, 1)");
  if (!training || rate == 0.0) return x;
  auto keep = std::make_shared<std::vector<std::uint8_t>>(x.numel());
  std::mt19937_64 rng(seed);
  for (auto& k : *keep) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    k = u >= rate ? 1 : 0;
  }
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> out(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = (*keep)[i] ? in[i] * scale : T(0);
  if (tape.wants({&x})) {
    tape.record("dropout", {x}, out, [x, out, keep, scale]() mutable {
      auto g = out.grad();
      T* gx = x.grad_ptr();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if ((*keep)[i]) gx[i] += g[i] * scale;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural and arithmetic

template <std::floating_point T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto pa = a.data();
  auto pb = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] + pb[i];
  if (tape.wants({&a, &b})) {
    tape.record("add", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        T* ga = a.grad_ptr();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_ptr();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <std::floating_point T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  auto pa = a.data();
  auto pb = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = pa[i] - pb[i];
  if (tape.wants({&a, &b})) {
    tape.record("sub", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        T* ga = a.grad_ptr();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_ptr();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

/// alpha * a + beta * b with constant coefficients.
template <std::floating_point T>
Tensor<T> linear_combination(Tape<T>& tape, const Tensor<T>& a, T alpha, const Tensor<T>& b,
                             T beta) {
  detail::require_same_shape(a, b, "linear_combination");
  Tensor<T> out(a.shape());
  auto pa = a.data();
  auto pb = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = alpha * pa[i] + beta * pb[i];
  if (tape.wants({&a, &b})) {
    tape.record("linear_combination", {a, b}, out, [a, b, out, alpha, beta]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        T* ga = a.grad_ptr();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += alpha * g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad_ptr();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += beta * g[i];
      }
    });
  }
  return out;
}

/// Multiplies every element of x by the single value held in `factor`.
template <std::floating_point T>
Tensor<T> scale_by(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& factor) {
  detail::require(factor.numel() == 1, "scale_by: factor must hold one value, got shape " +
                                           factor.shape().str());
  const T f = factor.item();
  Tensor<T> out(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f * in[i];
  if (tape.wants({&x, &factor})) {
    tape.record("scale_by", {x, factor}, out, [x, factor, out]() mutable {
      auto g = out.grad();
      const T f = factor.item();
      if (x.requires_grad()) {
        T* gx = x.grad_ptr();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += f * g[i];
      }
      if (factor.requires_grad()) {
        auto in = x.data();
        T acc = T(0);
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * in[i];
        factor.grad()[0] += acc;
      }
    });
  }
  return out;
}

/// Channel concatenation [a, b]; batch and spatial extents must agree.
template <std::floating_point T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  detail::require(sa.n == sb.n, "concat: batch " + std::to_string(sa.n) + " vs " +
                                    std::to_string(sb.n));
  detail::require(sa.h == sb.h, "concat: height " + std::to_string(sa.h) + " vs " +
                                    std::to_string(sb.h));
  detail::require(sa.w == sb.w, "concat: width " + std::to_string(sa.w) + " vs " +
                                    std::to_string(sb.w));
  const std::size_t P = sa.plane();
  Tensor<T> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  for (std::size_t n = 0; n < sa.n; ++n) {
    T* o = out.ptr() + n * (sa.c + sb.c) * P;
    std::copy_n(a.ptr() + n * sa.c * P, sa.c * P, o);
    std::copy_n(b.ptr() + n * sb.c * P, sb.c * P, o + sa.c * P);
  }
  if (tape.wants({&a, &b})) {
    tape.record("concat", {a, b}, out, [a, b, out]() mutable {
      const Shape sa = a.shape();
      const Shape sb = b.shape();
      const std::size_t P = sa.plane();
      auto g = out.grad();
      for (std::size_t n = 0; n < sa.n; ++n) {
        const T* src = g.data() + n * (sa.c + sb.c) * P;
        if (a.requires_grad()) {
          T* ga = a.grad_ptr() + n * sa.c * P;
          for (std::size_t i = 0; i < sa.c * P; ++i) ga[i] += src[i];
        }
        if (b.requires_grad()) {
          T* gb = b.grad_ptr() + n * sb.c * P;
          for (std::size_t i = 0; i < sb.c * P; ++i) gb[i] += src[sa.c * P + i];
        }
      }
    });
  }
  return out;
}

template <std::floating_point T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (tape.wants({&x})) {
    tape.record("sum", {x}, out, [x, out]() mutable {
      const T g = out.grad()[0];
      for (T& gx : x.grad()) gx += g;
    });
  }
  return out;
}

/// sum_i w_i x_i with constant weights.
template <std::floating_point T>
Tensor<T> weighted_sum(Tape<T>& tape, const Tensor<T>& x, std::vector<T> weights) {
  detail::require(weights.size() == x.numel(), "weighted_sum: " + std::to_string(weights.size()) +
                                                   " weights for " + std::to_string(x.numel()) +
                                                   " elements");
  T acc = T(0);
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) acc += weights[i] * in[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (tape.wants({&x})) {
    tape.record("weighted_sum", {x}, out, [x, out, w = std::move(weights)]() mutable {
      const T g = out.grad()[0];
      T* gx = x.grad_ptr();
      for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g * w[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense pairwise message passing

/// out[n, c, p] = sum over q != p of K_n(p, q) * x[n, c, q], where the
/// pixel index p runs over the h*w plane and K_n is symmetric.
template <std::floating_point T>
Tensor<T> dense_message(Tape<T>& tape, const Tensor<T>& x,
                        const std::vector<DenseKernelPtr<T>>& kernels) {
  const Shape s = x.shape();
  const std::size_t P = s.plane();
  detail::require(kernels.size() == s.n, "dense_message: " + std::to_string(kernels.size()) +
                                             " kernels for batch of " + std::to_string(s.n));
  for (const auto& k : kernels) {
    detail::require(k && k->size == P, "dense_message: kernel size does not match " +
                                           std::to_string(P) + " pixels");
  }
  Tensor<T> out(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    detail::message_planes(*kernels[n], x.ptr() + n * s.c * P, out.ptr() + n * s.c * P, s.c);
  }
  if (tape.wants({&x})) {
    tape.record("dense_message", {x}, out, [x, out, kernels]() mutable {
      const Shape s = x.shape();
      const std::size_t P = s.plane();
      auto g = out.grad();
      std::vector<T> tmp(s.c * P);
      T* gx = x.grad_ptr();
      for (std::size_t n = 0; n < s.n; ++n) {
        detail::message_planes(*kernels[n], g.data() + n * s.c * P, tmp.data(), s.c);
        for (std::size_t i = 0; i < tmp.size(); ++i) gx[n * s.c * P + i] += tmp[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

namespace detail {
template <class T>
void require_label_masks(const Tensor<T>& t, std::span<const Mask> masks, const char* op) {
  const Shape s = t.shape();
  require(masks.size() == s.n, std::string(op) + ": " + std::to_string(masks.size()) +
                                   " masks for batch of " + std::to_string(s.n));
  for (const Mask& m : masks) {
    require(m.width == s.w && m.height == s.h,
            std::string(op) + ": mask " + std::to_string(m.width) + "x" +
                std::to_string(m.height) + " does not match map " + std::to_string(s.w) + "x" +
                std::to_string(s.h));
    require_binary(m);
  }
  require(s.c == 2, std::string(op) + ": expected 2 class channels, got " + std::to_string(s.c));
}
}  // namespace detail

/// Negative log-likelihood of the true labels given per-pixel log-probabilities.
template <std::floating_point T>
Tensor<T> nll_loss(Tape<T>& tape, const Tensor<T>& logp, std::span<const Mask> masks) {
  detail::require_label_masks(logp, masks, "nll_loss");
  const Shape s = logp.shape();
  const std::size_t P = s.plane();
  T acc = T(0);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      acc -= logp.ptr()[(n * s.c + masks[n].pixels[p]) * P + p];
    }
  }
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (tape.wants({&logp})) {
    std::vector<Mask> held(masks.begin(), masks.end());
    tape.record("nll_loss", {logp}, out, [logp, out, held = std::move(held)]() mutable {
      const Shape s = logp.shape();
      const std::size_t P = s.plane();
      const T g = out.grad()[0];
      T* gx = logp.grad_ptr();
      for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t p = 0; p < P; ++p) gx[(n * s.c + held[n].pixels[p]) * P + p] -= g;
      }
    });
  }
  return out;
}

/// Categorical cross-entropy from probabilities: -sum log max(P(true), eps).
template <std::floating_point T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& prob, std::span<const Mask> masks,
                        T eps = T(1e-12)) {
  detail::require_label_masks(prob, masks, "cross_entropy");
  const Shape s = prob.shape();
  const std::size_t P = s.plane();
  T acc = T(0);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < P; ++p) {
      acc -= std::log(std::max(prob.ptr()[(n * s.c + masks[n].pixels[p]) * P + p], eps));
    }
  }
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (tape.wants({&prob})) {
    std::vector<Mask> held(masks.begin(), masks.end());
    tape.record("cross_entropy", {prob}, out,
                [prob, out, eps, held = std::move(held)]() mutable {
                  const Shape s = prob.shape();
                  const std::size_t P = s.plane();
                  const T g = out.grad()[0];
                  T* gx = prob.grad_ptr();
                  for (std::size_t n = 0; n < s.n; ++n) {
                    for (std::size_t p = 0; p < P; ++p) {
                      const std::size_t i = (n * s.c + held[n].pixels[p]) * P + p;
                      const T v = prob.ptr()[i];
                      if (v > eps) gx[i] -= g / v;
                    }
                  }
                });
  }
  return out;
}

}  // namespace cruseg
