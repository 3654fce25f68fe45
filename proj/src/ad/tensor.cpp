#include "donut/ad/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

#include "donut/error.hpp"

namespace donut::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) fail(ErrorKind::shape_mismatch, "negative dimension in shape " + to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
std::vector<T>& Node<T>::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), T(0));
  return grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = ad::numel(shape);
  return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (ad::numel(shape) != values.size())
    fail(ErrorKind::shape_mismatch,
         "value count " + std::to_string(values.size()) + " does not fit shape " + to_string(shape));
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) fail(ErrorKind::shape_mismatch, "item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(node_->shape, node_->value, false);
}

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

namespace {
std::atomic<std::uint64_t> next_tape_id{1};
}

template <typename T>
Tape<T>::Tape() : id_(next_tape_id.fetch_add(1, std::memory_order_relaxed)) {}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (running_) fail(ErrorKind::runtime, "backward called re-entrantly");
  if (consumed_)
    fail(ErrorKind::runtime, "tape already consumed; higher-order backward is not supported");
  if (!loss.defined() || loss.numel() != 1)
    fail(ErrorKind::shape_mismatch, "backward needs a scalar loss");
  if (loss.node()->recorded_by != id_)
    fail(ErrorKind::runtime, "loss was not produced under this tape");
  running_ = true;
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
  running_ = false;
  consumed_ = true;
}

template <typename T>
TapeScope<T>::TapeScope() : previous_(Tape<T>::active_) {
  Tape<T>::active_ = &tape_;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  Tape<T>::active_ = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(Tape<T>::active_) {
  Tape<T>::active_ = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  Tape<T>::active_ = previous_;
}

namespace {

template <typename T, typename Range>
Tensor<T> make_result_impl(Shape shape, std::vector<T> values, const Range& inputs,
                           std::function<void(Node<T>&)> backward) {
#ifndef NDEBUG
  for (const T& v : values)
    if (!std::isfinite(v)) fail(ErrorKind::runtime, "non-finite value produced by forward op");
#endif
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(values), false);
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return out;
  bool needs = false;
  for (const Tensor<T>& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  if (!needs) return out;
  if (tape->consumed()) fail(ErrorKind::runtime, "recording onto a consumed tape");
  Node<T>* node = out.node();
  node->requires_grad = true;
  node->recorded_by = tape->id();
  // The closure keeps the result alive until backward runs; inputs are kept
  // alive by the op's own captures.
  tape->record([keep = out.node_ptr(), fn = std::move(backward)]() {
    if (keep->grad.empty()) return;  // nothing flowed here
    fn(*keep);
  });
  return out;
}

}  // namespace

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  return make_result_impl<T>(std::move(shape), std::move(values), inputs, std::move(backward));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward) {
  return make_result_impl<T>(std::move(shape), std::move(values), inputs, std::move(backward));
}

#define DONUT_AD_INSTANTIATE(T)                                                                  \
  template struct Node<T>;                                                                       \
  template class Tensor<T>;                                                                      \
  template class Tape<T>;                                                                        \
  template class TapeScope<T>;                                                                   \
  template class NoGradScope<T>;                                                                 \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, std::initializer_list<Tensor<T>>,     \
                                    std::function<void(Node<T>&)>);                              \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, const std::vector<Tensor<T>>&,        \
                                    std::function<void(Node<T>&)>);

DONUT_AD_INSTANTIATE(float)
DONUT_AD_INSTANTIATE(double)

#undef DONUT_AD_INSTANTIATE

}  // namespace donut::ad
