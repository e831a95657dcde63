#include "lwnet/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace lwnet {

std::string Shape::str() const {
  return "[" + std::to_string(n) + "," + std::to_string(c) + "," +
         std::to_string(h) + "," + std::to_string(w) + "]";
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0)
    throw ShapeError("negative extent in shape " + shape.str());
  impl_->shape = shape;
  impl_->data.assign(shape.numel(), T(0));
  impl_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values,
                            bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (values.size() != shape.numel())
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape.str());
  impl_->shape = shape;
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  BasicTensor t(shape, requires_grad);
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return full({1, 1, 1, 1}, value, requires_grad);
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1)
    throw ShapeError("item() on non-scalar tensor " + shape().str());
  return impl_->data[0];
}

template <typename T>
std::span<T> BasicTensor<T>::grad_mut() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(impl_->shape, impl_->data, false);
}

template <typename T>
bool BasicTape<T>::wants_grad(
    std::initializer_list<const Tensor*> inputs) const {
  if (!enabled_) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) {
    return t && t->defined() && t->requires_grad();
  });
}

template <typename T>
void BasicTape<T>::record(std::string_view op, std::vector<Tensor> inputs,
                          Tensor output, BackwardFn backward) {
  output.set_requires_grad(true);
  entries_.push_back(
      {op, std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
bool BasicTape<T>::produced(const Tensor& t) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.output.same(t); });
}

template <typename T>
void backward(const BasicTensor<T>& loss, BasicTape<T>& tape) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward() needs a scalar loss");
  if (!tape.produced(loss))
    throw std::logic_error("backward(): loss was not produced on this tape");

  BasicTensor<T> root = loss;
  root.grad_mut()[0] += T(1);
  for (std::size_t i = tape.size(); i-- > 0;) {
    const auto& e = tape.entry(i);
    // Entries not upstream of the loss never received a gradient.
    if (!e.output.has_grad()) continue;
    e.backward();
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class BasicTape<float>;
template class BasicTape<double>;
template void backward<float>(const BasicTensor<float>&, BasicTape<float>&);
template void backward<double>(const BasicTensor<double>&, BasicTape<double>&);

}  // namespace lwnet
