#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cruseg {

/// (batch, channels, height, width) extent of a dense tensor.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

/// Handle to a dense 4-D array that can take part in a Tape.
///
/// Copies share storage. Gradient buffers are allocated lazily the first
/// time something accumulates into them.
template <std::floating_point T>
class Tensor {
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : s_(std::make_shared<Storage>(Storage{shape, std::vector<T>(shape.numel(), T(0)), {},
                                             requires_grad})) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != shape.numel()) {
      throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape.str());
    }
    s_ = std::make_shared<Storage>(Storage{shape, std::move(values), {}, requires_grad});
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    return Tensor(shape, std::vector<T>(shape.numel(), value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1, 1, 1, 1}, std::vector<T>{value}, requires_grad);
  }

  explicit operator bool() const { return static_cast<bool>(s_); }
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  const Shape& shape() const { return s_->shape; }
  std::size_t numel() const { return s_->data.size(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  T* ptr() { return s_->data.data(); }
  const T* ptr() const { return s_->data.data(); }

  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    const Shape& s = s_->shape;
    return s_->data[((n * s.c + c) * s.h + y) * s.w + x];
  }
  T at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    const Shape& s = s_->shape;
    return s_->data[((n * s.c + c) * s.h + y) * s.w + x];
  }

  T item() const {
    if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape().str());
    return s_->data[0];
  }

  bool requires_grad() const { return s_ && s_->requires_grad; }
  void set_requires_grad(bool on) const { s_->requires_grad = on; }

  // Gradient buffers belong to the shared storage, so accumulating into
  // them is allowed through a const handle.
  bool has_grad() const { return !s_->grad.empty(); }
  std::span<T> grad() const {
    ensure_grad();
    return s_->grad;
  }
  T* grad_ptr() const {
    ensure_grad();
    return s_->grad.data();
  }
  void ensure_grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
  }
  void zero_grad() const {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }
  void drop_grad() const { std::vector<T>().swap(s_->grad); }

  /// Deep copy of the values; the copy has no gradient buffer.
  Tensor clone() const { return Tensor(shape(), s_->data, requires_grad()); }

  template <std::floating_point U>
  Tensor<U> cast() const {
    std::vector<U> v(s_->data.begin(), s_->data.end());
    return Tensor<U>(shape(), std::move(v), requires_grad());
  }

 private:
  std::shared_ptr<Storage> s_;
};

}  // namespace cruseg
