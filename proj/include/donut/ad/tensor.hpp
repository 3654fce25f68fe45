#pragma once

// Dense tensors with a reverse-mode tape. A Tensor is a shared handle to a
// node holding values and an optional gradient accumulator. Ops record a
// backward closure on the thread's active tape whenever one of their inputs
// requires a gradient; with no active tape they run forward-only.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace donut::ad {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
class Tape;
template <typename T>
class TapeScope;
template <typename T>
class NoGradScope;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::uint64_t recorded_by = 0;  // id of the recording tape; 0 for leaves

  /// Zero-filled on first use.
  std::vector<T>& grad_buffer();
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  const T* data() const { return node_->value.data(); }
  T* data() { return node_->value.data(); }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// A leaf with a copy of the values and no history.
  Tensor detach() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of executed ops. backward() replays the closures in exact
/// reverse order once; a consumed tape cannot be replayed.
template <typename T>
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> backward) { entries_.push_back(std::move(backward)); }
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }
  std::uint64_t id() const { return id_; }

  /// Seeds d(loss)/d(loss) = 1 and accumulates into every requires_grad leaf.
  void backward(const Tensor<T>& loss);

 private:
  friend class TapeScope<T>;
  friend class NoGradScope<T>;
  std::vector<std::function<void()>> entries_;
  std::uint64_t id_;
  bool consumed_ = false;
  bool running_ = false;
  static thread_local Tape* active_;
};

/// Makes a fresh tape active for the enclosing scope.
template <typename T>
class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape<T>& tape() { return tape_; }
  void backward(const Tensor<T>& loss) { tape_.backward(loss); }

 private:
  Tape<T> tape_;
  Tape<T>* previous_;
};

/// Suspends recording for the enclosing scope.
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Creates the result node of an op. When a tape is active and any input
/// requires a gradient, the result requires one too and `backward` is
/// recorded; it receives the result node once its gradient is known.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward);

/// Same, for a dynamic input list.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward);

}  // namespace donut::ad
