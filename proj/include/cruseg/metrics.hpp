#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cruseg/contour.hpp"
#include "cruseg/image.hpp"

namespace cruseg {

/// 2|P n T| / (|P| + |T|), with two empty masks scoring 1.
inline double dice_index(const Mask& pred, const Mask& truth) {
  if (!pred.same_extent(truth)) {
    throw std::invalid_argument("dice_index: prediction is " + std::to_string(pred.width) + "x" +
                                std::to_string(pred.height) + ", truth is " +
                                std::to_string(truth.width) + "x" + std::to_string(truth.height));
  }
  std::size_t p = 0, t = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.pixels[i] != 0, b = truth.pixels[i] != 0;
    p += a;
    t += b;
    both += a && b;
  }
  if (p + t == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Bessel-corrected; zero for fewer than two values.
inline double sample_stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline constexpr std::size_t kHistogramBins = 20;

/// Equal-width bins over [0, 1]; 1.0 falls in the last bin.
inline std::vector<std::size_t> dice_histogram(const std::vector<double>& v,
                                               std::size_t bins = kHistogramBins) {
  std::vector<std::size_t> h(bins, 0);
  for (double x : v) {
    const double c = std::clamp(x, 0.0, 1.0);
    h[std::min(bins - 1, static_cast<std::size_t>(c * static_cast<double>(bins)))]++;
  }
  return h;
}

/// Empirical CDF as (value, fraction <= value) at each distinct value.
inline std::vector<std::pair<double, double>> empirical_cdf(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::vector<std::pair<double, double>> out;
  const double n = static_cast<double>(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i + 1 < v.size() && v[i + 1] == v[i]) continue;
    out.emplace_back(v[i], static_cast<double>(i + 1) / n);
  }
  return out;
}

struct SampleResult {
  std::string id;
  double dice = 0.0;
  std::vector<Polygon> pred_contours;
  std::vector<Polygon> truth_contours;
};

struct EvalReport {
  std::vector<SampleResult> samples;
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<std::size_t> histogram;
  std::vector<std::pair<double, double>> cdf;

  std::vector<double> dice_values() const {
    std::vector<double> v;
    for (const auto& s : samples) v.push_back(s.dice);
    return v;
  }
};

/// Fills the summary fields from the per-sample results.
inline void summarize(EvalReport& r) {
  const auto v = r.dice_values();
  r.mean = mean_of(v);
  r.stddev = sample_stddev(v);
  r.histogram = dice_histogram(v);
  r.cdf = empirical_cdf(v);
}

inline SampleResult score_sample(std::string id, const Mask& pred, const Mask& truth) {
  return {std::move(id), dice_index(pred, truth), mask_contours(pred), mask_contours(truth)};
}

}  // namespace cruseg
