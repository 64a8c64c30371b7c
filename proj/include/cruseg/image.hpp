#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cruseg {

/// Row-major single-channel raster.
template <class T>
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<T> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, T fill = T{}) : width(w), height(h), pixels(w * h, fill) {}

  T& operator()(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  const T& operator()(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  std::size_t size() const { return pixels.size(); }
  bool empty() const { return pixels.empty(); }
  bool same_extent(const auto& other) const {
    return width == other.width && height == other.height;
  }
  bool operator==(const Image&) const = default;
};

using GrayImage = Image<double>;
/// Binary label image; valid values are 0 (background) and 1 (mass).
using Mask = Image<std::uint8_t>;

inline void require_binary(const Mask& m, const char* what = "mask") {
  for (std::size_t i = 0; i < m.pixels.size(); ++i) {
    if (m.pixels[i] > 1) {
      throw std::invalid_argument(std::string(what) + " value " + std::to_string(m.pixels[i]) +
                                  " at pixel " + std::to_string(i) + " is not 0 or 1");
    }
  }
}

inline std::size_t count_foreground(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m.pixels) n += (v != 0);
  return n;
}

}  // namespace cruseg
