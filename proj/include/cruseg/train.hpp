#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cruseg/adam.hpp"
#include "cruseg/data.hpp"
#include "cruseg/metrics.hpp"
#include "cruseg/parallel.hpp"
#include "cruseg/pipeline.hpp"
#include "cruseg/seed.hpp"

namespace cruseg {

enum class Variant { cru, cru_no_r, unet };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::cru: return "cru";
    case Variant::cru_no_r: return "cru_no_r";
    case Variant::unet: return "unet";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "cru") return Variant::cru;
  if (s == "cru_no_r") return Variant::cru_no_r;
  if (s == "unet") return Variant::unet;
  throw std::invalid_argument("unknown variant '" + s + "' (expected cru, cru_no_r or unet)");
}

struct TrainConfig {
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  long epochs = 30;
  std::size_t batch_size = 1;
  std::uint64_t seed = 1;
  double lambda = 0.67;
  Variant variant = Variant::cru;

  void validate() const {
    auto bad = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
    if (!(learning_rate > 0)) bad("learning_rate must be > 0");
    if (epochs < 0) bad("epochs must be >= 0");
    if (batch_size < 1) bad("batch_size must be >= 1");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
      bad("Adam betas must lie in [0, 1)");
    }
    if (!(adam_eps > 0)) bad("adam_eps must be > 0");
    if (!(lambda >= 0 && lambda <= 1)) bad("lambda must lie in [0, 1]");
  }

  AdamConfig adam() const { return {learning_rate, adam_beta1, adam_beta2, adam_eps}; }
};

/// Network settings implied by the variant: `cru` keeps residual shortcuts
/// and the CRF with the configured lambda, `cru_no_r` drops the shortcuts,
/// and `unet` drops both and trains on the U-Net loss alone.
inline NetworkConfig apply_variant(NetworkConfig net, const TrainConfig& cfg) {
  net.lambda = cfg.lambda;
  switch (cfg.variant) {
    case Variant::cru:
      net.residual_enabled = true;
      net.use_crf = true;
      break;
    case Variant::cru_no_r:
      net.residual_enabled = false;
      net.use_crf = true;
      break;
    case Variant::unet:
      net.residual_enabled = false;
      net.use_crf = false;
      net.lambda = 0.0;
      break;
  }
  return net;
}

struct EpochLog {
  long epoch = 0;
  double f = 0.0;  // mean U-Net loss per step
  double g = 0.0;  // mean CRF loss per step
  double loss = 0.0;
};

struct TrainProgress {
  long epoch = 0;
  std::size_t step = 0;
  std::size_t steps_per_epoch = 0;
};

template <std::floating_point T>
void clamp_crf_weights(CruNet<T>& net) {
  for (auto* t : {&net.crf.omega1, &net.crf.omega2}) {
    for (auto& v : t->data()) v = std::max(v, T(0));
  }
}

/// Adam on (1 - lambda) f + lambda g over every network and CRF parameter.
/// The sample order of epoch e is a permutation seeded by (seed, e); the
/// dropout stream of step s is seeded by (seed, s). lambda is taken from
/// net.config. Throws if a loss turns non-finite.
template <std::floating_point T>
std::vector<EpochLog> train(CruNet<T>& net, const std::vector<RoiSample>& data, const TrainConfig& cfg,
                            const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (cfg.epochs > 0 && data.empty()) throw std::invalid_argument("train: empty training stream");
  for (const auto& s : data) {
    if (s.image.width != net.config.input_size || s.image.height != net.config.input_size) {
      throw std::invalid_argument("train: sample '" + s.id + "' is not " +
                                  std::to_string(net.config.input_size) + " pixels square");
    }
    s.validate();
  }
  std::vector<Tensor<T>> params;
  for (const auto& p : net.parameters()) params.push_back(p.tensor);
  Adam<T> adam(params, cfg.adam());
  const double lambda = net.config.lambda;

  std::vector<EpochLog> log;
  std::uint64_t step = 0;
  for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_indices(data.size(), detail::mix_seed(cfg.seed, 0x5eed0000ull + epoch));
    EpochLog e{epoch + 1};
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      std::vector<GrayImage> images;
      std::vector<Mask> masks;
      for (std::size_t i = b; i < end; ++i) {
        images.push_back(data[order[i]].image);
        masks.push_back(data[order[i]].mask);
      }
      adam.zero_grad();
      Tape<T> tape(true);
      ForwardOptions opt{true, detail::mix_seed(cfg.seed, step), net.config.dropout_rate};
      const auto out = run_pipeline(tape, net, std::span<const GrayImage>(images), opt);
      const auto terms = composite_loss(tape, out, std::span<const Mask>(masks), lambda);
      const double f = terms.unet.item(), g = terms.crf.item(), l = terms.total.item();
      if (!std::isfinite(f) || !std::isfinite(g) || !std::isfinite(l)) {
        throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch + 1) +
                                 ", sample '" + data[order[b]].id + "' (f=" + std::to_string(f) +
                                 ", g=" + std::to_string(g) + ")");
      }
      tape.backward(terms.total);
      adam.step();
      clamp_crf_weights(net);
      e.f += f;
      e.g += g;
      e.loss += l;
      ++batches;
    }
    e.f /= static_cast<double>(batches);
    e.g /= static_cast<double>(batches);
    e.loss /= static_cast<double>(batches);
    log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  for (auto& p : params) p.drop_grad();
  return log;
}

/// Foreground probability of the final output (CRF-refined unless the CRF
/// is off), one value per pixel.
template <std::floating_point T>
GrayImage predict_probability(const CruNet<T>& net, const GrayImage& roi) {
  Tape<T> tape(false);
  const auto out = run_pipeline(tape, net, std::span<const GrayImage>(&roi, 1));
  GrayImage p(roi.width, roi.height);
  const T* fg = out.refined.ptr() + roi.size();  // channel 1
  for (std::size_t i = 0; i < roi.size(); ++i) p.pixels[i] = static_cast<double>(fg[i]);
  return p;
}

/// Strict > 0.5 rule, so an exact tie is background.
inline Mask threshold_mask(const GrayImage& prob, double level = 0.5) {
  Mask m(prob.width, prob.height);
  for (std::size_t i = 0; i < prob.size(); ++i) m.pixels[i] = prob.pixels[i] > level ? 1 : 0;
  return m;
}

template <std::floating_point T>
Mask predict_mask(const CruNet<T>& net, const GrayImage& roi) {
  return threshold_mask(predict_probability(net, roi));
}

/// Scores every sample against the frozen network. Results keep stream order.
template <std::floating_point T>
EvalReport evaluate(const CruNet<T>& net, const std::vector<RoiSample>& test) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test stream");
  EvalReport r;
  r.samples.resize(test.size());
  parallel_for(0, test.size(), [&](std::size_t i) {
    r.samples[i] = score_sample(test[i].id, predict_mask(net, test[i].image), test[i].mask);
  }, 1);
  summarize(r);
  return r;
}

}  // namespace cruseg
