#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lwnet {

/// N x C x H x W extent of a dense tensor.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class BasicTape;

/// Shared handle to a dense channel-planar tensor with an optional gradient
/// buffer. Copies alias the same storage; use clone() for a deep copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, bool requires_grad = false);
  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// Mutable view. Reserved for leaves (parameters, freshly built inputs);
  /// ops never write through it.
  std::span<T> data_mut() const { return impl_->data; }
  T item() const;
  T at(int n, int c, int y, int x) const {
    return impl_->data[index(n, c, y, x)];
  }
  std::size_t index(int n, int c, int y, int x) const {
    const Shape& s = impl_->shape;
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + y) * s.w + x;
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool value) const { impl_->requires_grad = value; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated zero-filled on first access.
  std::span<T> grad_mut() const;
  void zero_grad() const { impl_->grad.clear(); }

  BasicTensor clone() const;
  /// Same values, no gradient, no graph history.
  BasicTensor detach() const { return clone(); }

  const void* id() const { return impl_.get(); }
  bool same(const BasicTensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of primitive applications for reverse-mode differentiation.
/// Entries are appended in execution order, so every input of entry i is a
/// leaf or the output of an entry before i.
template <typename T>
class BasicTape {
 public:
  using Tensor = BasicTensor<T>;
  using BackwardFn = std::function<void()>;

  struct Entry {
    std::string_view op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  BasicTape() = default;
  /// A tape that records nothing; ops run as plain functions.
  static BasicTape inference() {
    BasicTape tape;
    tape.enabled_ = false;
    return tape;
  }

  bool enabled() const { return enabled_; }
  bool wants_grad(std::initializer_list<const Tensor*> inputs) const;

  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output,
              BackwardFn backward);

  std::size_t size() const { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_[i]; }
  bool produced(const Tensor& t) const;
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
  bool enabled_ = true;
};

/// Accumulates d(loss)/d(leaf) into the grad buffer of every leaf reachable
/// from `loss` that requires a gradient. Gradients of values with several
/// consumers are summed.
template <typename T>
void backward(const BasicTensor<T>& loss, BasicTape<T>& tape);

using Tensor = BasicTensor<float>;
using Tape = BasicTape<float>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;
extern template class BasicTape<float>;
extern template class BasicTape<double>;

}  // namespace lwnet
