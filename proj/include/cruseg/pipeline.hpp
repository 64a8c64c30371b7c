#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <stdexcept>
#include <vector>

#include "cruseg/crf.hpp"
#include "cruseg/network.hpp"

namespace cruseg {

/// Stacks ROIs into an (N, 1, H, W) tensor.
template <std::floating_point T>
Tensor<T> images_to_tensor(std::span<const GrayImage> images) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
  const std::size_t W = images[0].width;
  const std::size_t H = images[0].height;
  Tensor<T> t(Shape{images.size(), 1, H, W});
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].width != W || images[n].height != H) {
      throw std::invalid_argument("images_to_tensor: ROI " + std::to_string(n) +
                                  " has a different size");
    }
    for (std::size_t i = 0; i < W * H; ++i) t.ptr()[n * W * H + i] = static_cast<T>(images[n].pixels[i]);
  }
  return t;
}

template <std::floating_point T>
struct PipelineOutput {
  Tensor<T> logits;      // unary head, pre-softmax
  Tensor<T> unary_logp;  // log P from the U-Net head
  Tensor<T> unary_prob;  // P from the U-Net head
  Tensor<T> refined;     // CRF marginals; equals unary_prob when the CRF is off
  Tensor<T> refined_logp;
  bool crf_applied = false;
};

/// Full CRU-Net forward pass: residual U-Net, then mean-field CRF over the
/// ROI intensities (skipped when config.use_crf is false).
template <std::floating_point T>
PipelineOutput<T> run_pipeline(Tape<T>& tape, const CruNet<T>& net,
                               std::span<const GrayImage> rois, const ForwardOptions& opt = {}) {
  PipelineOutput<T> out;
  const Tensor<T> x = images_to_tensor<T>(rois);
  out.logits = forward_logits(tape, net, x, opt);
  out.unary_logp = log_softmax_channels(tape, out.logits);
  out.unary_prob = softmax_channels(tape, out.logits);
  if (!net.config.use_crf) {
    out.refined = out.unary_prob;
    out.refined_logp = out.unary_logp;
    return out;
  }
  std::vector<PairwiseKernelsPtr<T>> kernels;
  kernels.reserve(rois.size());
  for (const auto& roi : rois) {
    kernels.push_back(std::make_shared<const PairwiseKernels<T>>(build_kernels<T>(roi, net.config.crf)));
  }
  auto crf = crf_refine(tape, out.unary_logp, kernels, net.crf, net.config.crf.iterations);
  out.refined = crf.q;
  out.refined_logp = crf.log_q;
  out.crf_applied = true;
  return out;
}

template <std::floating_point T>
struct LossTerms {
  Tensor<T> unet;   // f
  Tensor<T> crf;    // g (zero when the CRF is off)
  Tensor<T> total;  // (1 - lambda) f + lambda g
};

/// f and g are evaluated in the log domain from the stable log-softmax
/// outputs; they equal the clamped cross-entropies whenever P > 1e-12.
template <std::floating_point T>
LossTerms<T> composite_loss(Tape<T>& tape, const PipelineOutput<T>& out,
                            std::span<const Mask> masks, double lambda) {
  LossTerms<T> terms;
  terms.unet = nll_loss(tape, out.unary_logp, masks);
  terms.crf = out.crf_applied ? nll_loss(tape, out.refined_logp, masks) : Tensor<T>::scalar(T(0));
  terms.total = total_loss(tape, terms.unet, terms.crf, out.crf_applied ? lambda : 0.0);
  return terms;
}

}  // namespace cruseg
