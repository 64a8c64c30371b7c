#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cruseg/data.hpp"
#include "cruseg/seed.hpp"

namespace cruseg {

struct SynthConfig {
  std::size_t size = 40;
  double min_area = 0.05;
  double max_area = 0.60;
  double fg_level = 0.5;       // interior intensities are >= this, background below
  double contrast_min = 0.15;  // interior lift above fg_level
  double contrast_max = 0.45;
  double background_max = 0.40;
  double noise_sigma = 0.06;   // additive Gaussian noise; 0 disables
  bool background_gradient = true;
  double spike_probability = 0.5;

  void validate() const {
    auto bad = [](const std::string& m) { throw std::invalid_argument("synth config: " + m); };
    if (size < 4) bad("size must be at least 4");
    if (!(min_area > 0 && min_area < max_area && max_area < 1)) bad("need 0 < min_area < max_area < 1");
    if (!(fg_level > 0 && fg_level < 1)) bad("fg_level must lie in (0, 1)");
    if (!(background_max >= 0 && background_max < fg_level)) bad("background_max must lie in [0, fg_level)");
    if (!(contrast_min >= 0 && contrast_min <= contrast_max && fg_level + contrast_max <= 1)) {
      bad("contrast range must satisfy 0 <= min <= max and fg_level + max <= 1");
    }
    if (noise_sigma < 0) bad("noise_sigma must be >= 0");
    if (spike_probability < 0 || spike_probability > 1) bad("spike_probability must lie in [0, 1]");
  }
};

namespace detail {

class SynthRng {
 public:
  explicit SynthRng(std::uint64_t seed) : g_(seed) {}
  double uniform() { return static_cast<double>(g_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int integer(int lo, int hi) { return lo + static_cast<int>(uniform() * (hi - lo + 1)); }
  // Box-Muller; spelled out so the stream does not depend on the standard library.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 g_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

struct Blob {
  double cx, cy, rx, ry, angle;
  std::array<double, 4> amp, phase;  // harmonics 2..5
  std::vector<std::array<double, 3>> spikes;  // angle, height, width

  double radius(double phi) const {
    double r = 1.0;
    for (int k = 0; k < 4; ++k) r += amp[k] * std::sin((k + 2) * phi + phase[k]);
    for (const auto& s : spikes) {
      double d = std::remainder(phi - s[0], 2.0 * std::numbers::pi);
      r += s[1] * std::exp(-0.5 * (d / s[2]) * (d / s[2]));
    }
    return r;
  }

  bool inside(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / rx;
    const double v = (-s * dx + c * dy) / ry;
    const double rho = std::hypot(u, v);
    return rho <= radius(std::atan2(v, u));
  }
};

inline Blob random_blob(SynthRng& rng, const SynthConfig& cfg) {
  const double n = static_cast<double>(cfg.size);
  Blob b{};
  b.rx = rng.uniform(0.12, 0.42) * n;
  b.ry = b.rx * rng.uniform(0.6, 1.0);
  b.cx = n / 2 + rng.uniform(-0.12, 0.12) * n;
  b.cy = n / 2 + rng.uniform(-0.12, 0.12) * n;
  b.angle = rng.uniform(0.0, std::numbers::pi);
  for (int k = 0; k < 4; ++k) {
    b.amp[k] = rng.uniform(0.0, 0.12 / (1.0 + 0.5 * k));
    b.phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  if (rng.uniform() < cfg.spike_probability) {
    const int count = rng.integer(3, 8);
    for (int i = 0; i < count; ++i) {
      b.spikes.push_back({rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform(0.2, 0.6),
                          rng.uniform(0.04, 0.12)});
    }
  }
  return b;
}

}  // namespace detail

/// One synthetic mass ROI. Sample `index` depends only on (seed, index), so
/// corpora of different sizes share their common prefix.
inline RoiSample synth_sample(std::uint64_t seed, std::size_t index, const SynthConfig& cfg) {
  detail::SynthRng rng(detail::mix_seed(seed, index));
  const std::size_t n = cfg.size;
  Mask mask(n, n);
  for (int attempt = 0;; ++attempt) {
    if (attempt == 1000) throw std::runtime_error("synth: could not meet the area range");
    const auto blob = detail::random_blob(rng, cfg);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) mask(x, y) = blob.inside(x + 0.5, y + 0.5) ? 1 : 0;
    }
    const double frac = static_cast<double>(count_foreground(mask)) / static_cast<double>(n * n);
    if (frac >= cfg.min_area && frac <= cfg.max_area) break;
  }

  // Background plane strictly below fg_level, interior at or above it.
  const double b0 = rng.uniform(0.0, 0.5 * cfg.background_max);
  double gx = 0, gy = 0;
  if (cfg.background_gradient) {
    gx = rng.uniform(-1, 1);
    gy = rng.uniform(-1, 1);
    const double span = (cfg.background_max - b0) / std::max(1e-12, std::abs(gx) + std::abs(gy));
    gx *= span;
    gy *= span;
  }
  const double lift = rng.uniform(cfg.contrast_min, cfg.contrast_max);
  const double fx = rng.uniform(0.1, 0.4), fy = rng.uniform(0.1, 0.4);
  const double px = rng.uniform(0, 2 * std::numbers::pi), py = rng.uniform(0, 2 * std::numbers::pi);

  GrayImage image(n, n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double u = static_cast<double>(x) / static_cast<double>(n - 1);
      const double v = static_cast<double>(y) / static_cast<double>(n - 1);
      double value;
      if (mask(x, y)) {
        const double tex = 0.25 * (2.0 + std::sin(fx * x + px) + std::sin(fy * y + py));  // [0, 1]
        value = cfg.fg_level + lift * tex;
      } else {
        // Corner-anchored so the plane stays in [0, background_max].
        value = b0 + (gx >= 0 ? gx * u : -gx * (1 - u)) + (gy >= 0 ? gy * v : -gy * (1 - v));
        value = std::min(value, std::nextafter(cfg.fg_level, 0.0));
      }
      if (cfg.noise_sigma > 0) value += cfg.noise_sigma * rng.normal();
      image(x, y) = std::clamp(value, 0.0, 1.0);
    }
  }

  RoiSample s;
  s.image = std::move(image);
  s.mask = std::move(mask);
  char id[32];
  std::snprintf(id, sizeof id, "synth_%05zu", index);
  s.id = id;
  return s;
}

inline std::vector<RoiSample> synth_generate(std::uint64_t seed, std::size_t count,
                                             const SynthConfig& cfg = {}) {
  if (count == 0) throw std::invalid_argument("synth_generate: count must be at least 1");
  cfg.validate();
  std::vector<RoiSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(synth_sample(seed, i, cfg));
  return out;
}

}  // namespace cruseg
