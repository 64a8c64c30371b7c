#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cruseg/image.hpp"

namespace cruseg {

/// Keys cubic convolution weight with a = -0.5 (Catmull-Rom).
inline double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

namespace detail {

// Four taps per output sample along one axis, centre-aligned and clamped.
inline std::vector<std::array<std::pair<std::size_t, double>, 4>> cubic_taps(std::size_t src,
                                                                             std::size_t dst) {
  std::vector<std::array<std::pair<std::size_t, double>, 4>> taps(dst);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  const auto last = static_cast<std::ptrdiff_t>(src) - 1;
  for (std::size_t d = 0; d < dst; ++d) {
    const double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
    const double f = std::floor(s);
    const auto base = static_cast<std::ptrdiff_t>(f);
    for (int k = 0; k < 4; ++k) {
      const std::ptrdiff_t i = std::clamp<std::ptrdiff_t>(base - 1 + k, 0, last);
      taps[d][k] = {static_cast<std::size_t>(i), cubic_weight(s - f - (k - 1))};
    }
  }
  return taps;
}

}  // namespace detail

/// Separable bicubic resample. Source coordinates follow the pixel-centre
/// convention sx = (dx + 0.5) * (W / w) - 0.5, and samples outside the
/// source are clamped to the nearest edge pixel.
inline GrayImage resize_bicubic(const GrayImage& src, std::size_t width, std::size_t height) {
  if (src.empty()) throw std::invalid_argument("resize_bicubic: empty source image");
  if (width == 0 || height == 0) throw std::invalid_argument("resize_bicubic: zero target size");
  const auto tx = detail::cubic_taps(src.width, width);
  const auto ty = detail::cubic_taps(src.height, height);

  GrayImage rows(width, src.height);
  for (std::size_t y = 0; y < src.height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double acc = 0.0;
      for (const auto& [i, w] : tx[x]) acc += w * src(i, y);
      rows(x, y) = acc;
    }
  }
  GrayImage out(width, height);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      double acc = 0.0;
      for (const auto& [j, w] : ty[y]) acc += w * rows(x, j);
      out(x, y) = acc;
    }
  }
  return out;
}

}  // namespace cruseg
