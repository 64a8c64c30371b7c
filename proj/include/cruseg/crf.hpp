#pragma once

// Fully connected two-label CRF over the pixel lattice.
//
// Pairwise potential between pixels p and q:
//   phi(l, l') = mu(l, l') * (omega1 * k1(p, q) + omega2 * k2(p, q))
//   k1 = exp(-|p - q|^2 / (2 theta_alpha^2) - (I_p - I_q)^2 / (2 theta_beta^2))
//   k2 = exp(-|p - q|^2 / (2 theta_gamma^2))
// Lower energy is more probable; phi is a penalty. Mean-field inference is
// unrolled into differentiable steps built from the primitives in ops.hpp.

#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <mutex>
#include <utility>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cruseg/image.hpp"
#include "cruseg/ops.hpp"
#include "cruseg/parallel.hpp"

namespace cruseg {

struct CrfParams {
  // Row-major mu(l, l'); default Potts.
  std::array<double, 4> mu{0.0, 1.0, 1.0, 0.0};
  double omega1 = 1.0;
  double omega2 = 1.0;
  double theta_alpha = 8.0;   // bilateral, spatial bandwidth (pixels)
  double theta_beta = 0.125;  // bilateral, intensity bandwidth
  double theta_gamma = 3.0;   // spatial-only bandwidth (pixels)
  int iterations = 5;

  double mu_at(int l, int lp) const { return mu[static_cast<std::size_t>(l * 2 + lp)]; }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0)) {
        throw std::invalid_argument(std::string("crf.") + name + " must be > 0, got " +
                                    std::to_string(v));
      }
    };
    positive(theta_alpha, "theta_alpha");
    positive(theta_beta, "theta_beta");
    positive(theta_gamma, "theta_gamma");
    if (iterations < 1) {
      throw std::invalid_argument("crf.iterations must be >= 1, got " +
                                  std::to_string(iterations));
    }
    if (!(omega1 >= 0.0) || !(omega2 >= 0.0)) {
      throw std::invalid_argument("crf.omega1/omega2 must be non-negative");
    }
  }
};

/// Learnable CRF parameters: mu as a (2, 2, 1, 1) channel-mixing kernel
/// (out label l, in label l') and the two kernel weights.
template <std::floating_point T>
struct CrfWeights {
  Tensor<T> mu;
  Tensor<T> omega1;
  Tensor<T> omega2;

  static CrfWeights from(const CrfParams& p, bool requires_grad = true) {
    std::vector<T> m(p.mu.begin(), p.mu.end());
    return {Tensor<T>(Shape{2, 2, 1, 1}, std::move(m), requires_grad),
            Tensor<T>::scalar(static_cast<T>(p.omega1), requires_grad),
            Tensor<T>::scalar(static_cast<T>(p.omega2), requires_grad)};
  }
};

template <std::floating_point T>
struct PairwiseKernels {
  std::size_t width = 0;
  std::size_t height = 0;
  DenseKernelPtr<T> bilateral;
  DenseKernelPtr<T> spatial;

  std::size_t pixels() const { return width * height; }
};

template <std::floating_point T>
using PairwiseKernelsPtr = std::shared_ptr<const PairwiseKernels<T>>;

namespace detail {

// The spatial-only kernel depends on geometry alone; share one copy per
// (width, height, bandwidth).
template <std::floating_point T>
DenseKernelPtr<T> spatial_kernel(std::size_t W, std::size_t H, double theta_gamma) {
  struct Key {
    std::size_t w, h;
    double theta;
  };
  static std::mutex mu;
  static std::vector<std::pair<Key, DenseKernelPtr<T>>> cache;
  std::lock_guard lock(mu);
  for (const auto& [k, v] : cache) {
    if (k.w == W && k.h == H && k.theta == theta_gamma) return v;
  }
  const std::size_t N = W * H;
  auto K = std::make_shared<DenseKernel<T>>();
  K->size = N;
  K->values.resize(N * N);
  const double ig = 1.0 / (2.0 * theta_gamma * theta_gamma);
  for (std::size_t p = 0; p < N; ++p) {
    const double py = static_cast<double>(p / W);
    const double px = static_cast<double>(p % W);
    for (std::size_t q = 0; q < N; ++q) {
      const double dy = py - static_cast<double>(q / W);
      const double dx = px - static_cast<double>(q % W);
      K->values[p * N + q] = static_cast<T>(std::exp(-(dx * dx + dy * dy) * ig));
    }
  }
  if (cache.size() >= 8) cache.erase(cache.begin());
  cache.emplace_back(Key{W, H, theta_gamma}, K);
  return K;
}

}  // namespace detail

/// Materializes both Gaussian kernels densely (unit diagonal; message
/// passing skips the diagonal).
template <std::floating_point T>
PairwiseKernels<T> build_kernels(const GrayImage& roi, const CrfParams& params) {
  params.validate();
  for (std::size_t i = 0; i < roi.pixels.size(); ++i) {
    const double v = roi.pixels[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument("build_kernels: intensity " + std::to_string(v) +
                                  " at pixel " + std::to_string(i) + " outside [0, 1]");
    }
  }
  const std::size_t W = roi.width;
  const std::size_t H = roi.height;
  const std::size_t N = W * H;
  auto bil = std::make_shared<DenseKernel<T>>();
  bil->size = N;
  bil->values.resize(N * N);

  const double ia = 1.0 / (2.0 * params.theta_alpha * params.theta_alpha);
  const double ib = 1.0 / (2.0 * params.theta_beta * params.theta_beta);

  // Upper triangle per row, mirrored; row p writes (p, q>=p) and (q>p, p),
  // which no other row touches.
  parallel_for(
      0, N,
      [&](std::size_t p) {
        const double py = static_cast<double>(p / W);
        const double px = static_cast<double>(p % W);
        const double ip = roi.pixels[p];
        for (std::size_t q = p; q < N; ++q) {
          const double dy = py - static_cast<double>(q / W);
          const double dx = px - static_cast<double>(q % W);
          const double di = ip - roi.pixels[q];
          const T v = static_cast<T>(std::exp(-((dx * dx + dy * dy) * ia + di * di * ib)));
          bil->values[p * N + q] = v;
          bil->values[q * N + p] = v;
        }
      },
      16);

  return {W, H, std::move(bil), detail::spatial_kernel<T>(W, H, params.theta_gamma)};
}

template <std::floating_point T>
struct MeanFieldState {
  Tensor<T> q;       // per-pixel marginals
  Tensor<T> logits;  // pre-normalization scores that produced q
};

/// One mean-field update:
///   msg_p(l)   = sum_{q != p} (omega1 k1(p,q) + omega2 k2(p,q)) Q_q(l)
///   compat_p(l) = sum_l' mu(l, l') msg_p(l')
///   Q'_p       = softmax(unary_logp_p - compat_p)
template <std::floating_point T>
MeanFieldState<T> mean_field_step(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& unary_logp,
                                  const std::vector<PairwiseKernelsPtr<T>>& kernels,
                                  const CrfWeights<T>& weights) {
  std::vector<DenseKernelPtr<T>> k1;
  std::vector<DenseKernelPtr<T>> k2;
  for (const auto& k : kernels) {
    k1.push_back(k->bilateral);
    k2.push_back(k->spatial);
  }
  auto m1 = dense_message(tape, q, k1);
  auto m2 = dense_message(tape, q, k2);
  auto msg = add(tape, scale_by(tape, m1, weights.omega1), scale_by(tape, m2, weights.omega2));
  auto compat = conv2d(tape, msg, weights.mu, Tensor<T>{}, ConvSpec{2, 2, 1, 1, 0, 0});
  auto logits = sub(tape, unary_logp, compat);
  return {softmax_channels(tape, logits), logits};
}

template <std::floating_point T>
struct CrfOutput {
  Tensor<T> q;      // refined marginals Q^T
  Tensor<T> log_q;  // log Q^T, computed stably from the last logits
};

/// Q^0 = softmax(unary_logp), then `iterations` mean-field steps.
template <std::floating_point T>
CrfOutput<T> crf_refine(Tape<T>& tape, const Tensor<T>& unary_logp,
                        const std::vector<PairwiseKernelsPtr<T>>& kernels,
                        const CrfWeights<T>& weights, int iterations) {
  if (iterations < 1) throw std::invalid_argument("crf iterations must be >= 1");
  MeanFieldState<T> state{softmax_channels(tape, unary_logp), unary_logp};
  for (int t = 0; t < iterations; ++t) {
    state = mean_field_step(tape, state.q, unary_logp, kernels, weights);
  }
  return {state.q, log_softmax_channels(tape, state.logits)};
}

/// Refinement starting from unary probabilities (log taken with a 1e-12 floor).
template <std::floating_point T>
CrfOutput<T> crf_forward(Tape<T>& tape, const Tensor<T>& unary_prob,
                         const std::vector<PairwiseKernelsPtr<T>>& kernels,
                         const CrfWeights<T>& weights, int iterations) {
  return crf_refine(tape, log_clamped(tape, unary_prob, T(1e-12)), kernels, weights, iterations);
}

/// Training surrogate for the CRF term: cross-entropy of the refined
/// marginals against the mask.
template <std::floating_point T>
Tensor<T> crf_loss(Tape<T>& tape, const Tensor<T>& refined, std::span<const Mask> masks) {
  return cross_entropy(tape, refined, masks, T(1e-12));
}

/// (1 - lambda) f + lambda g.
template <std::floating_point T>
Tensor<T> total_loss(Tape<T>& tape, const Tensor<T>& f, const Tensor<T>& g, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("lambda " + std::to_string(lambda) + " outside [0, 1]");
  }
  return linear_combination(tape, f, static_cast<T>(1.0 - lambda), g, static_cast<T>(lambda));
}

// ---------------------------------------------------------------------------
// Exact inference on tiny instances (oracle scale)

/// Double-precision description of a small dense CRF.
struct DenseCrf {
  std::size_t pixels = 0;
  std::vector<double> unary;     // unary[l * pixels + p] = log-potential of label l
  std::vector<double> coupling;  // symmetric pixels x pixels, omega1 k1 + omega2 k2
  std::array<double, 4> mu{0.0, 1.0, 1.0, 0.0};

  double phi(std::size_t p, std::size_t q, int lp, int lq) const {
    return mu[static_cast<std::size_t>(lp * 2 + lq)] * coupling[p * pixels + q];
  }

  static DenseCrf from(std::span<const double> unary_logp, const PairwiseKernels<double>& k,
                       const CrfParams& params) {
    DenseCrf crf;
    crf.pixels = k.pixels();
    if (unary_logp.size() != 2 * crf.pixels) {
      throw std::invalid_argument("unary array has " + std::to_string(unary_logp.size()) +
                                  " entries, expected " + std::to_string(2 * crf.pixels));
    }
    crf.unary.assign(unary_logp.begin(), unary_logp.end());
    crf.coupling.resize(crf.pixels * crf.pixels);
    for (std::size_t i = 0; i < crf.coupling.size(); ++i) {
      crf.coupling[i] =
          params.omega1 * k.bilateral->values[i] + params.omega2 * k.spatial->values[i];
    }
    crf.mu = params.mu;
    return crf;
  }
};

namespace detail {
inline constexpr std::size_t kMaxExactPixels = 16;

inline void require_enumerable(const DenseCrf& crf) {
  if (crf.pixels > kMaxExactPixels) {
    throw std::invalid_argument("exact enumeration limited to " +
                                std::to_string(kMaxExactPixels) + " pixels, got " +
                                std::to_string(crf.pixels));
  }
}

// Unnormalized log-probability of one labeling (bit p = label of pixel p).
inline double labeling_score(const DenseCrf& crf, std::uint32_t bits) {
  double s = 0.0;
  for (std::size_t p = 0; p < crf.pixels; ++p) {
    const int lp = static_cast<int>((bits >> p) & 1u);
    s += crf.unary[static_cast<std::size_t>(lp) * crf.pixels + p];
    for (std::size_t q = p + 1; q < crf.pixels; ++q) {
      s -= crf.phi(p, q, lp, static_cast<int>((bits >> q) & 1u));
    }
  }
  return s;
}
}  // namespace detail

/// log sum_y exp( sum_p unary(y_p) - sum_{p<q} phi(y_p, y_q) ).
inline double exact_log_partition(const DenseCrf& crf) {
  detail::require_enumerable(crf);
  const std::uint32_t states = 1u << crf.pixels;
  std::vector<double> scores(states);
  double m = -std::numeric_limits<double>::infinity();
  for (std::uint32_t b = 0; b < states; ++b) {
    scores[b] = detail::labeling_score(crf, b);
    m = std::max(m, scores[b]);
  }
  double z = 0.0;
  for (double s : scores) z += std::exp(s - m);
  return m + std::log(z);
}

inline double exact_log_partition(std::span<const double> unary_logp,
                                  const PairwiseKernels<double>& kernels,
                                  const CrfParams& params) {
  return exact_log_partition(DenseCrf::from(unary_logp, kernels, params));
}

/// Exact per-pixel marginals, laid out like `unary`.
inline std::vector<double> exact_marginals(const DenseCrf& crf) {
  detail::require_enumerable(crf);
  const double log_z = exact_log_partition(crf);
  std::vector<double> marg(2 * crf.pixels, 0.0);
  for (std::uint32_t b = 0; b < (1u << crf.pixels); ++b) {
    const double pr = std::exp(detail::labeling_score(crf, b) - log_z);
    for (std::size_t p = 0; p < crf.pixels; ++p) marg[((b >> p) & 1u) * crf.pixels + p] += pr;
  }
  return marg;
}

/// E_Q[score] + sum_p H(Q_p) for a fully factorized Q. This is the negative
/// mean-field free energy and never exceeds log Z.
inline double mean_field_lower_bound(const DenseCrf& crf, std::span<const double> q) {
  const std::size_t N = crf.pixels;
  double value = 0.0;
  for (std::size_t p = 0; p < N; ++p) {
    for (int l = 0; l < 2; ++l) {
      const double ql = q[static_cast<std::size_t>(l) * N + p];
      value += ql * crf.unary[static_cast<std::size_t>(l) * N + p];
      if (ql > 0.0) value -= ql * std::log(ql);
    }
    for (std::size_t r = p + 1; r < N; ++r) {
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
          value -= q[static_cast<std::size_t>(a) * N + p] * q[static_cast<std::size_t>(b) * N + r] *
                   crf.phi(p, r, a, b);
        }
      }
    }
  }
  return value;
}

}  // namespace cruseg
