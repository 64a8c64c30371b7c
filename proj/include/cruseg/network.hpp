#pragma once

// Residual U-Net feature extractor.
//
// Seven blocks:
//   layer1  1   -> 16 @40   (no pooling)         skip partner: layer7
//   layer2  16  -> 32 @20   conv@40 then pool    skip partner: layer6
//   layer3  32  -> 64 @10                        skip partner: layer5
//   layer4  64  -> 128 @5
//   layer5  128 -> 64 @10   upsample, conv, concat layer3, conv
//   layer6  64  -> 32 @20
//   layer7  32  -> 16 @40
// then a 1x1 classifier to two channels. Each block adds a linear
// projection W*x of its input (1x1 conv [+ pool] going down, upsample +
// 2x2 conv going up) when residual learning is on.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cruseg/crf.hpp"
#include "cruseg/ops.hpp"
#include "cruseg/seed.hpp"

namespace cruseg {

struct NetworkConfig {
  std::array<std::size_t, 4> base_channels{16, 32, 64, 128};
  std::size_t kernel_size = 3;
  double dropout_rate = 0.5;
  bool residual_enabled = true;
  std::size_t input_size = 40;
  std::size_t num_classes = 2;
  double lambda = 0.67;
  // Apply the CRF layer after the unary head. Off only for the plain U-Net.
  bool use_crf = true;
  CrfParams crf;

  void validate() const {
    for (std::size_t i = 0; i < base_channels.size(); ++i) {
      if (base_channels[i] == 0) {
        throw std::invalid_argument("network.base_channels[" + std::to_string(i) +
                                    "] must be positive");
      }
    }
    if (kernel_size != 3 && kernel_size != 7) {
      throw std::invalid_argument("network.kernel_size must be 3 or 7, got " +
                                  std::to_string(kernel_size));
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw std::invalid_argument("network.dropout_rate must be in [0, 1), got " +
                                  std::to_string(dropout_rate));
    }
    if (input_size == 0 || input_size % 8 != 0) {
      throw std::invalid_argument("network.input_size must be a positive multiple of 8, got " +
                                  std::to_string(input_size));
    }
    if (num_classes != 2) {
      throw std::invalid_argument("network.num_classes must be 2, got " +
                                  std::to_string(num_classes));
    }
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
      throw std::invalid_argument("network.lambda must be in [0, 1], got " +
                                  std::to_string(lambda));
    }
    crf.validate();
  }
};

template <std::floating_point T>
struct ConvLayer {
  Tensor<T> weight;
  Tensor<T> bias;
  ConvSpec spec;

  Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
    return conv2d(tape, x, weight, bias, spec);
  }
};

template <std::floating_point T>
struct DownBlock {
  ConvLayer<T> conv1;
  ConvLayer<T> conv2;
  Tensor<T> shortcut;  // (out, in, 1, 1); empty without residual learning
  bool pool = true;
  bool dropout = false;
};

template <std::floating_point T>
struct UpBlock {
  ConvLayer<T> conv1;  // after upsampling: in -> out
  ConvLayer<T> conv2;  // after concatenation: 2*out -> out
  Tensor<T> shortcut;  // (out, in, 2, 2) applied to the upsampled input
};

template <std::floating_point T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Per-forward options that do not belong to the parameters.
struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  double dropout_rate = 0.5;
};

namespace detail {

// Uniform(-bound, bound) fill, seeded per parameter name so that adding or
// removing other parameters never changes this one.
template <class T>
Tensor<T> uniform_init(Shape shape, double bound, std::uint64_t seed, std::string_view name) {
  std::mt19937_64 rng(mix_seed(seed, fnv1a(name)));
  std::vector<T> v(shape.numel());
  for (auto& x : v) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    x = static_cast<T>((2.0 * u - 1.0) * bound);
  }
  return Tensor<T>(shape, std::move(v), true);
}

// Variance gains for uniform(-sqrt(gain/fan_in), +sqrt(gain/fan_in)).
inline constexpr double kReluGain = 3.0;
inline constexpr double kShortcutGain = 3.0;
inline constexpr double kLinearGain = 1.0;

}  // namespace detail

template <std::floating_point T>
struct CruNet {
  NetworkConfig config;
  std::array<DownBlock<T>, 4> down;
  std::array<UpBlock<T>, 3> up;
  ConvLayer<T> head;
  CrfWeights<T> crf;

  /// Parameters in manifest order (the weights-file order).
  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    auto conv = [&](const std::string& prefix, const ConvLayer<T>& c) {
      out.push_back({prefix + ".weight", c.weight});
      out.push_back({prefix + ".bias", c.bias});
    };
    for (std::size_t i = 0; i < down.size(); ++i) {
      const std::string p = "layer" + std::to_string(i + 1);
      conv(p + ".conv1", down[i].conv1);
      conv(p + ".conv2", down[i].conv2);
      if (down[i].shortcut) out.push_back({p + ".shortcut.weight", down[i].shortcut});
    }
    for (std::size_t i = 0; i < up.size(); ++i) {
      const std::string p = "layer" + std::to_string(i + 5);
      conv(p + ".conv1", up[i].conv1);
      conv(p + ".conv2", up[i].conv2);
      if (up[i].shortcut) out.push_back({p + ".shortcut.weight", up[i].shortcut});
    }
    conv("head", head);
    out.push_back({"crf.mu", crf.mu});
    out.push_back({"crf.omega1", crf.omega1});
    out.push_back({"crf.omega2", crf.omega2});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  /// Deep copy, optionally into another scalar type.
  template <std::floating_point U = T>
  CruNet<U> cast() const {
    CruNet<U> o;
    o.config = config;
    auto cp = [](const Tensor<T>& t) { return t ? t.template cast<U>() : Tensor<U>{}; };
    auto cl = [&](const ConvLayer<T>& c) { return ConvLayer<U>{cp(c.weight), cp(c.bias), c.spec}; };
    for (std::size_t i = 0; i < down.size(); ++i) {
      o.down[i] = {cl(down[i].conv1), cl(down[i].conv2), cp(down[i].shortcut), down[i].pool,
                   down[i].dropout};
    }
    for (std::size_t i = 0; i < up.size(); ++i) {
      o.up[i] = {cl(up[i].conv1), cl(up[i].conv2), cp(up[i].shortcut)};
    }
    o.head = cl(head);
    o.crf = {cp(crf.mu), cp(crf.omega1), cp(crf.omega2)};
    return o;
  }

  CruNet clone() const { return cast<T>(); }
};

/// Builds a network with fan-in scaled uniform weights (see the gains in
/// detail). Biases start at zero. Equal seeds give bit-identical weights.
template <std::floating_point T>
CruNet<T> build_network(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  CruNet<T> net;
  net.config = config;
  const std::size_t k = config.kernel_size;
  const auto& ch = config.base_channels;

  auto make_conv = [&](const std::string& name, std::size_t in, std::size_t out,
                       std::size_t ksize, double gain) {
    const double fan_in = static_cast<double>(in * ksize * ksize);
    ConvLayer<T> c;
    c.spec = ConvSpec::same(in, out, ksize);
    c.weight = detail::uniform_init<T>(Shape{out, in, ksize, ksize}, std::sqrt(gain / fan_in),
                                       seed, name + ".weight");
    c.bias = Tensor<T>(Shape{out, 1, 1, 1}, true);
    return c;
  };
  auto make_shortcut = [&](const std::string& name, std::size_t in, std::size_t out,
                           std::size_t ksize) {
    return detail::uniform_init<T>(Shape{out, in, ksize, ksize},
                                   std::sqrt(detail::kShortcutGain / static_cast<double>(in * ksize * ksize)), seed,
                                   name + ".shortcut.weight");
  };

  for (std::size_t i = 0; i < 4; ++i) {
    const std::string p = "layer" + std::to_string(i + 1);
    const std::size_t in = i == 0 ? 1 : ch[i - 1];
    const std::size_t out = ch[i];
    auto& b = net.down[i];
    b.conv1 = make_conv(p + ".conv1", in, out, k, detail::kReluGain);
    b.conv2 = make_conv(p + ".conv2", out, out, k, detail::kReluGain);
    if (config.residual_enabled) b.shortcut = make_shortcut(p, in, out, 1);
    b.pool = i > 0;
    b.dropout = i >= 2;
  }
  for (std::size_t j = 0; j < 3; ++j) {
    const std::string p = "layer" + std::to_string(j + 5);
    const std::size_t in = ch[3 - j];
    const std::size_t out = ch[2 - j];
    auto& b = net.up[j];
    b.conv1 = make_conv(p + ".conv1", in, out, k, detail::kReluGain);
    b.conv2 = make_conv(p + ".conv2", 2 * out, out, k, detail::kReluGain);
    if (config.residual_enabled) b.shortcut = make_shortcut(p, in, out, 2);
  }
  net.head = make_conv("head", ch[0], config.num_classes, 1, detail::kLinearGain);
  net.crf = CrfWeights<T>::from(config.crf);
  return net;
}

/// F(x) + W*x for a contracting block, where F is
/// conv-relu-conv-relu[-dropout][-maxpool] and W*x is a 1x1 projection
/// [followed by the same maxpool]. Without a shortcut tensor, returns F(x).
template <std::floating_point T>
Tensor<T> residual_block_down(Tape<T>& tape, const Tensor<T>& x, const DownBlock<T>& block,
                              const ForwardOptions& opt = {}) {
  auto h = relu(tape, block.conv1(tape, x));
  h = relu(tape, block.conv2(tape, h));
  if (block.dropout) h = dropout(tape, h, opt.dropout_rate, opt.dropout_seed, opt.training);
  if (block.pool) h = maxpool2(tape, h);
  if (!block.shortcut) return h;
  const Shape ws = block.shortcut.shape();
  auto s = conv2d(tape, x, block.shortcut, Tensor<T>{}, ConvSpec::same(ws.c, ws.n, 1));
  if (block.pool) s = maxpool2(tape, s);
  return add(tape, h, s);
}

/// Expanding block: upsample x, conv-relu, concatenate [skip, .], conv-relu;
/// plus the projection 2x2-conv(upsample(x)) when a shortcut is present.
template <std::floating_point T>
Tensor<T> residual_block_up(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& skip,
                            const UpBlock<T>& block) {
  auto u = upsample2(tape, x);
  auto h = relu(tape, block.conv1(tape, u));
  const Shape hs = h.shape();
  const Shape ss = skip.shape();
  if (ss.h != hs.h || ss.w != hs.w) {
    throw std::invalid_argument("skip partner is " + std::to_string(ss.h) + "x" +
                                std::to_string(ss.w) + " but the upsampled path is " +
                                std::to_string(hs.h) + "x" + std::to_string(hs.w));
  }
  h = relu(tape, block.conv2(tape, concat_channels(tape, skip, h)));
  if (!block.shortcut) return h;
  const Shape ws = block.shortcut.shape();
  return add(tape, h, conv2d(tape, u, block.shortcut, Tensor<T>{}, ConvSpec::same(ws.c, ws.n, 2)));
}

/// Unary logits (N, 2, S, S) for a batch of single-channel ROIs. When
/// `trace` is given it receives the output shape of every block in order.
template <std::floating_point T>
Tensor<T> forward_logits(Tape<T>& tape, const CruNet<T>& net, const Tensor<T>& roi,
                         const ForwardOptions& opt = {}, std::vector<Shape>* trace = nullptr) {
  const Shape s = roi.shape();
  const std::size_t S = net.config.input_size;
  if (s.c != 1 || s.h != S || s.w != S) {
    throw std::invalid_argument("forward: expected Nx1x" + std::to_string(S) + "x" +
                                std::to_string(S) + " input, got " + s.str());
  }
  ForwardOptions o = opt;
  o.dropout_rate = net.config.dropout_rate;
  std::array<Tensor<T>, 4> enc;
  Tensor<T> h = roi;
  for (std::size_t i = 0; i < 4; ++i) {
    o.dropout_seed = detail::mix_seed(opt.dropout_seed, i);
    h = residual_block_down(tape, h, net.down[i], o);
    enc[i] = h;
    if (trace) trace->push_back(h.shape());
  }
  for (std::size_t j = 0; j < 3; ++j) {
    h = residual_block_up(tape, h, enc[2 - j], net.up[j]);
    if (trace) trace->push_back(h.shape());
  }
  return net.head(tape, h);
}

/// Per-pixel class probabilities (N, 2, S, S) from the U-Net head.
template <std::floating_point T>
Tensor<T> forward(Tape<T>& tape, const CruNet<T>& net, const Tensor<T>& roi,
                  const ForwardOptions& opt = {}) {
  return softmax_channels(tape, forward_logits(tape, net, roi, opt));
}

/// Categorical cross-entropy of the probability map against the masks.
template <std::floating_point T>
Tensor<T> unet_loss(Tape<T>& tape, const Tensor<T>& prob, std::span<const Mask> masks) {
  return cross_entropy(tape, prob, masks, T(1e-12));
}

}  // namespace cruseg
