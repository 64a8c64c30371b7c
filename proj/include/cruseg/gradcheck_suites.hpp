#pragma once

// Finite-difference suites for every differentiable primitive plus the
// full training loss. Shared by the gradcheck command and the tests.

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cruseg/crf.hpp"
#include "cruseg/gradcheck.hpp"
#include "cruseg/network.hpp"
#include "cruseg/ops.hpp"
#include "cruseg/pipeline.hpp"

namespace cruseg {

struct GradSuiteOptions {
  std::uint64_t seed = 1;
  std::size_t samples = 50;
  double step = 1e-5;
  std::string corrupt_op;  // test hook: perturb this op's backward rule
};

struct GradSuiteResult {
  std::string name;
  GradCheckResult result;
};

namespace detail {

using D = double;

struct SuiteRng {
  std::mt19937_64 g;
  explicit SuiteRng(std::uint64_t seed) : g(seed) {}
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(g() >> 11) * 0x1.0p-53);
  }
  Tensor<D> tensor(Shape s, double lo = -1, double hi = 1) {
    std::vector<D> v(s.numel());
    for (auto& x : v) x = uniform(lo, hi);
    return Tensor<D>(s, std::move(v), true);
  }
  // Values bounded away from zero, for ops with a kink there.
  Tensor<D> away_from_zero(Shape s) {
    auto t = tensor(s, 0.05, 1.0);
    for (auto& x : t.data()) x *= (g() & 1) ? 1 : -1;
    return t;
  }
  std::vector<D> weights(std::size_t n) {
    std::vector<D> w(n);
    for (auto& x : w) x = uniform(-1, 1);
    return w;
  }
  GrayImage image(std::size_t w, std::size_t h) {
    GrayImage img(w, h);
    for (auto& v : img.pixels) v = uniform(0, 1);
    return img;
  }
  Mask mask(std::size_t w, std::size_t h) {
    Mask m(w, h);
    for (auto& v : m.pixels) v = static_cast<std::uint8_t>(g() & 1);
    return m;
  }
};

inline DenseKernelPtr<D> random_symmetric_kernel(SuiteRng& r, std::size_t n) {
  auto k = std::make_shared<DenseKernel<D>>();
  k->size = n;
  k->values.assign(n * n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    k->values[p * n + p] = 1.0;
    for (std::size_t q = p + 1; q < n; ++q) k->values[p * n + q] = k->values[q * n + p] = r.uniform(0, 1);
  }
  return k;
}

struct SuiteSetup {
  std::vector<GradTarget> targets;
  FiniteDifferenceChecker::LossFn loss;
  std::vector<std::pair<std::size_t, std::size_t>> forced = {};
};

using SuiteFactory = std::function<SuiteSetup(SuiteRng&)>;

// Scalar probe: a fixed random projection of `out`.
inline Tensor<D> probe(Tape<D>& tape, const Tensor<D>& out, const std::vector<D>& w) {
  return weighted_sum(tape, out, w);
}

inline std::vector<std::pair<std::string, SuiteFactory>> suite_table() {
  std::vector<std::pair<std::string, SuiteFactory>> t;

  t.emplace_back("conv2d", [](SuiteRng& r) {
    auto x = r.tensor({2, 3, 6, 5});
    auto w = r.tensor({4, 3, 3, 3});
    auto b = r.tensor({1, 4, 1, 1});
    auto pw = r.weights(2 * 4 * 6 * 5);
    return SuiteSetup{{{"x", x}, {"w", w}, {"b", b}}, [=](Tape<D>& tp) {
                        return probe(tp, conv2d(tp, x, w, b, ConvSpec::symmetric(3, 4, 3, 1)), pw);
                      }};
  });
  t.emplace_back("conv2d_strided", [](SuiteRng& r) {
    auto x = r.tensor({1, 2, 7, 6});
    auto w = r.tensor({3, 2, 2, 2});
    const ConvSpec spec{2, 3, 2, 2, 0, 1};
    const std::size_t oh = spec.output_extent(7), ow = spec.output_extent(6);
    auto pw = r.weights(3 * oh * ow);
    return SuiteSetup{{{"x", x}, {"w", w}}, [=](Tape<D>& tp) {
                        return probe(tp, conv2d(tp, x, w, Tensor<D>{}, spec), pw);
                      }};
  });
  t.emplace_back("maxpool2", [](SuiteRng& r) {
    auto x = r.tensor({2, 2, 6, 4});
    auto pw = r.weights(2 * 2 * 3 * 2);
    return SuiteSetup{{{"x", x}}, [=](Tape<D>& tp) { return probe(tp, maxpool2(tp, x), pw); }};
  });
  t.emplace_back("upsample2", [](SuiteRng& r) {
    auto x = r.tensor({1, 3, 3, 4});
    auto pw = r.weights(3 * 6 * 8);
    return SuiteSetup{{{"x", x}}, [=](Tape<D>& tp) { return probe(tp, upsample2(tp, x), pw); }};
  });
  t.emplace_back("relu", [](SuiteRng& r) {
    auto x = r.away_from_zero({2, 2, 4, 4});
    auto pw = r.weights(x.numel());
    return SuiteSetup{{{"x", x}}, [=](Tape<D>& tp) { return probe(tp, relu(tp, x), pw); }};
  });
  t.emplace_back("softmax_channels", [](SuiteRng& r) {
    auto x = r.tensor({2, 3, 3, 3}, -3, 3);
    auto pw = r.weights(x.numel());
    return SuiteSetup{{{"x", x}}, [=](Tape<D>& tp) { return probe(tp, softmax_channels(tp, x), pw); }};
  });
  t.emplace_back("log_softmax_channels", [](SuiteRng& r) {
    auto x = r.tensor({2, 2, 3, 3}, -3, 3);
    auto pw = r.weights(x.numel());
    return SuiteSetup{{{"x", x}},
                      [=](Tape<D>& tp) { return probe(tp, log_softmax_channels(tp, x), pw); }};
  });
  t.emplace_back("log_clamped", [](SuiteRng& r) {
    auto x = r.tensor({1, 2, 4, 4}, 0.1, 1.0);
    auto pw = r.weights(x.numel());
    return SuiteSetup{{{"x", x}}, [=](Tape<D>& tp) { return probe(tp, log_clamped(tp, x, 1e-12), pw); }};
  });
  t.emplace_back("dropout", [](SuiteRng& r) {
    auto x = r.tensor({1, 4, 4, 4});
    auto pw = r.weights(x.numel());
    return SuiteSetup{{{"x", x}},
                      [=](Tape<D>& tp) { return probe(tp, dropout(tp, x, 0.5, 99, true), pw); }};
  });
  t.emplace_back("add_sub", [](SuiteRng& r) {
    auto a = r.tensor({1, 2, 3, 3});
    auto b = r.tensor({1, 2, 3, 3});
    auto pw = r.weights(a.numel());
    return SuiteSetup{{{"a", a}, {"b", b}}, [=](Tape<D>& tp) {
                        return probe(tp, sub(tp, add(tp, a, b), add(tp, b, b)), pw);
                      }};
  });
  t.emplace_back("linear_combination", [](SuiteRng& r) {
    auto a = r.tensor({1, 2, 3, 3});
    auto b = r.tensor({1, 2, 3, 3});
    auto pw = r.weights(a.numel());
    return SuiteSetup{{{"a", a}, {"b", b}}, [=](Tape<D>& tp) {
                        return probe(tp, linear_combination(tp, a, 0.33, b, 0.67), pw);
                      }};
  });
  t.emplace_back("scale_by", [](SuiteRng& r) {
    auto x = r.tensor({1, 2, 3, 3});
    auto s = r.tensor({1, 1, 1, 1});
    auto pw = r.weights(x.numel());
    return SuiteSetup{{{"x", x}, {"s", s}}, [=](Tape<D>& tp) { return probe(tp, scale_by(tp, x, s), pw); }};
  });
  t.emplace_back("concat_channels", [](SuiteRng& r) {
    auto a = r.tensor({2, 2, 3, 3});
    auto b = r.tensor({2, 3, 3, 3});
    auto pw = r.weights(2 * 5 * 9);
    return SuiteSetup{{{"a", a}, {"b", b}},
                      [=](Tape<D>& tp) { return probe(tp, concat_channels(tp, a, b), pw); }};
  });
  t.emplace_back("sum", [](SuiteRng& r) {
    auto x = r.tensor({1, 2, 3, 3});
    return SuiteSetup{{{"x", x}}, [=](Tape<D>& tp) {
                        auto s = sum(tp, x);
                        return scale_by(tp, s, s);  // s^2 so the gradient varies
                      }};
  });
  t.emplace_back("dense_message", [](SuiteRng& r) {
    auto x = r.tensor({2, 2, 3, 4});
    std::vector<DenseKernelPtr<D>> ks{random_symmetric_kernel(r, 12), random_symmetric_kernel(r, 12)};
    auto pw = r.weights(x.numel());
    return SuiteSetup{{{"x", x}}, [=](Tape<D>& tp) { return probe(tp, dense_message(tp, x, ks), pw); }};
  });
  t.emplace_back("nll_loss", [](SuiteRng& r) {
    auto x = r.tensor({2, 2, 4, 4}, -4, 0);
    std::vector<Mask> m{r.mask(4, 4), r.mask(4, 4)};
    return SuiteSetup{{{"logp", x}}, [=](Tape<D>& tp) {
                        return nll_loss(tp, log_softmax_channels(tp, x), std::span<const Mask>(m));
                      }};
  });
  t.emplace_back("cross_entropy", [](SuiteRng& r) {
    auto x = r.tensor({1, 2, 4, 4}, 0.05, 1.0);
    std::vector<Mask> m{r.mask(4, 4)};
    return SuiteSetup{{{"prob", x}},
                      [=](Tape<D>& tp) { return cross_entropy(tp, x, std::span<const Mask>(m)); }};
  });
  t.emplace_back("mean_field_step", [](SuiteRng& r) {
    CrfParams params;
    auto roi = r.image(4, 4);
    auto kernels = std::vector<PairwiseKernelsPtr<D>>{
        std::make_shared<const PairwiseKernels<D>>(build_kernels<D>(roi, params))};
    auto unary = r.tensor({1, 2, 4, 4}, -3, 0);
    auto q0 = r.tensor({1, 2, 4, 4}, -2, 2);
    auto w = CrfWeights<D>::from(params);
    w.mu = r.tensor({2, 2, 1, 1}, 0, 1);
    w.omega1 = r.tensor({1, 1, 1, 1}, 0.1, 0.5);
    w.omega2 = r.tensor({1, 1, 1, 1}, 0.1, 0.5);
    auto pw = r.weights(32);
    return SuiteSetup{{{"q_logits", q0}, {"unary_logp", unary}, {"mu", w.mu}, {"omega1", w.omega1},
                       {"omega2", w.omega2}},
                      [=](Tape<D>& tp) {
                        auto q = softmax_channels(tp, q0);
                        return probe(tp, mean_field_step(tp, q, unary, kernels, w).q, pw);
                      },
                      {{2, 1}, {3, 0}, {4, 0}}};
  });
  t.emplace_back("crf_forward", [](SuiteRng& r) {
    CrfParams params;
    auto roi = r.image(4, 4);
    auto kernels = std::vector<PairwiseKernelsPtr<D>>{
        std::make_shared<const PairwiseKernels<D>>(build_kernels<D>(roi, params))};
    auto logits = r.tensor({1, 2, 4, 4}, -2, 2);
    auto w = CrfWeights<D>::from(params);
    w.omega1 = r.tensor({1, 1, 1, 1}, 0.1, 0.3);
    w.omega2 = r.tensor({1, 1, 1, 1}, 0.1, 0.3);
    std::vector<Mask> m{r.mask(4, 4)};
    return SuiteSetup{{{"unary_logits", logits}, {"mu", w.mu}, {"omega1", w.omega1}, {"omega2", w.omega2}},
                      [=](Tape<D>& tp) {
                        auto out = crf_forward(tp, softmax_channels(tp, logits), kernels, w, params.iterations);
                        return crf_loss(tp, out.q, std::span<const Mask>(m));
                      },
                      {{1, 1}, {2, 0}, {3, 0}}};
  });
  return t;
}

// Full objective (1 - lambda) f + lambda g on one 40x40 sample, with
// dropout active, over all network and CRF parameters.
inline SuiteSetup composite_suite(SuiteRng& r, std::uint64_t seed) {
  NetworkConfig cfg;
  auto net = std::make_shared<CruNet<D>>(build_network<D>(cfg, seed));
  // Small CRF weights keep the refined marginals away from saturation, so
  // the check sees gradients through every term.
  net->crf.omega1.data()[0] = 0.05;
  net->crf.omega2.data()[0] = 0.05;
  auto roi = std::make_shared<std::vector<GrayImage>>(1, r.image(40, 40));
  auto mask = std::make_shared<std::vector<Mask>>(1, r.mask(40, 40));
  SuiteSetup s;
  for (const auto& p : net->parameters()) s.targets.push_back({p.name, p.tensor});
  const std::size_t n = s.targets.size();
  s.forced = {{n - 3, 1}, {n - 2, 0}, {n - 1, 0}, {n - 4, 0}, {0, 0}};
  const double lambda = cfg.lambda;
  s.loss = [net, roi, mask, lambda, seed](Tape<D>& tp) {
    ForwardOptions opt{true, seed, net->config.dropout_rate};
    auto out = run_pipeline(tp, *net, std::span<const GrayImage>(*roi), opt);
    return composite_loss(tp, out, std::span<const Mask>(*mask), lambda).total;
  };
  return s;
}

}  // namespace detail

inline std::vector<std::string> gradcheck_suite_names() {
  std::vector<std::string> names;
  for (const auto& [n, f] : detail::suite_table()) names.push_back(n);
  names.push_back("composite_loss");
  return names;
}

inline GradSuiteResult run_gradcheck_suite(const std::string& name, const GradSuiteOptions& opt) {
  if (opt.samples == 0) throw std::invalid_argument("gradcheck: samples must be at least 1");
  detail::SuiteRng rng(detail::mix_seed(opt.seed, detail::fnv1a(name)));
  detail::SuiteSetup setup;
  if (name == "composite_loss") {
    setup = detail::composite_suite(rng, opt.seed);
  } else {
    bool found = false;
    for (auto& [n, f] : detail::suite_table()) {
      if (n == name) {
        setup = f(rng);
        found = true;
        break;
      }
    }
    if (!found) throw std::invalid_argument("unknown gradcheck suite '" + name + "'");
  }
  FiniteDifferenceChecker checker(setup.targets, setup.loss, opt.step);
  if (!opt.corrupt_op.empty()) checker.corrupt_backward_of(opt.corrupt_op);
  return {name, checker.run(opt.samples, rng.g(), setup.forced)};
}

}  // namespace cruseg
