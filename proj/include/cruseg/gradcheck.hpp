#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cruseg/tape.hpp"
#include "cruseg/tensor.hpp"

namespace cruseg {

/// Relative error |a - b| / max(|a|, |b|, floor). The floor keeps
/// coordinates whose true derivative is zero from dividing by ~0.
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

struct CoordinateCheck {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckResult {
  std::vector<CoordinateCheck> coords;

  double max_rel_error() const {
    double m = 0;
    for (const auto& c : coords) m = std::max(m, c.rel_error);
    return m;
  }
  bool passed(double tol) const { return max_rel_error() < tol; }
};

struct GradTarget {
  std::string name;
  Tensor<double> tensor;
};

/// Compares tape gradients against central differences.
///
/// `loss` builds a scalar from the targets on the given tape; it is called
/// once with a recording tape for the analytic gradient and twice per
/// checked coordinate with a non-recording tape. Coordinates are drawn
/// uniformly over the concatenation of all target elements, plus any
/// explicitly forced (target, index) pairs.
class FiniteDifferenceChecker {
 public:
  using LossFn = std::function<Tensor<double>(Tape<double>&)>;

  FiniteDifferenceChecker(std::vector<GradTarget> targets, LossFn loss, double step = 1e-4)
      : targets_(std::move(targets)), loss_(std::move(loss)), step_(step) {}

  void corrupt_backward_of(std::string op) { corrupted_ = std::move(op); }

  GradCheckResult run(std::size_t samples, std::uint64_t seed,
                      const std::vector<std::pair<std::size_t, std::size_t>>& forced = {}) {
    for (auto& t : targets_) {
      t.tensor.set_requires_grad(true);
      t.tensor.drop_grad();
    }
    {
      Tape<double> tape;
      if (!corrupted_.empty()) tape.corrupt_backward_of(corrupted_);
      tape.backward(loss_(tape));
    }
    std::vector<std::pair<std::size_t, std::size_t>> picks = forced;
    std::size_t total = 0;
    for (const auto& t : targets_) total += t.tensor.numel();
    std::mt19937_64 rng(seed);
    for (std::size_t s = 0; s < samples && total > 0; ++s) {
      std::size_t flat = static_cast<std::size_t>(rng() % total);
      std::size_t which = 0;
      while (flat >= targets_[which].tensor.numel()) flat -= targets_[which++].tensor.numel();
      picks.emplace_back(which, flat);
    }

    GradCheckResult result;
    for (auto [which, idx] : picks) {
      auto& t = targets_[which].tensor;
      const double analytic = t.has_grad() ? t.grad()[idx] : 0.0;
      const double saved = t.data()[idx];
      t.data()[idx] = saved + step_;
      const double up = eval();
      t.data()[idx] = saved - step_;
      const double down = eval();
      t.data()[idx] = saved;
      const double numeric = (up - down) / (2 * step_);
      result.coords.push_back({targets_[which].name, idx, analytic, numeric,
                               relative_error(analytic, numeric)});
    }
    return result;
  }

 private:
  double eval() {
    Tape<double> tape(false);
    return loss_(tape).item();
  }

  std::vector<GradTarget> targets_;
  LossFn loss_;
  double step_;
  std::string corrupted_;
};

}  // namespace cruseg
