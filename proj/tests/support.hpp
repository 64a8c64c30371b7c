#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cruseg/image.hpp"
#include "cruseg/tensor.hpp"

namespace cruseg::testing {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : g_(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(g_);
  }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(g_); }
  bool coin() { return (g_() & 1) != 0; }

  template <class T = double>
  Tensor<T> tensor(Shape s, double lo = -1.0, double hi = 1.0, bool grad = false) {
    std::vector<T> v(s.numel());
    for (auto& x : v) x = static_cast<T>(uniform(lo, hi));
    return Tensor<T>(s, std::move(v), grad);
  }
  GrayImage image(std::size_t w, std::size_t h) {
    GrayImage img(w, h);
    for (auto& v : img.pixels) v = uniform();
    return img;
  }
  Mask mask(std::size_t w, std::size_t h, double p = 0.5) {
    Mask m(w, h);
    for (auto& v : m.pixels) v = uniform() < p ? 1 : 0;
    return m;
  }

 private:
  std::mt19937_64 g_;
};

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cruseg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace cruseg::testing
