#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fda {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename Scalar>
class Tape;

/// Dense row-major tensor. A tensor produced by an op on tracked inputs
/// carries a link to the tape node that produced it.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Array::Zero(numel(shape_))) {}

  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
      throw DimensionError("tensor: shape " + to_string(shape_) + " does not match " +
                           std::to_string(data_.size()) + " values");
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Eigen::Map<const Array>(values.begin(), values.size())) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar value) {
    Index n = numel(shape);
    return Tensor(std::move(shape), Array::Constant(n, value));
  }

  static Tensor scalar(Scalar value) { return Tensor(Shape{}, Array::Constant(1, value)); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }

  Array& data() { return data_; }
  const Array& data() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar item() const {
    if (data_.size() != 1) throw ArgumentError("item: tensor has " + std::to_string(size()) + " elements");
    return data_[0];
  }

  bool requires_grad() const { return tape_ != nullptr; }
  Tape<Scalar>* tape() const { return tape_; }
  int node() const { return node_; }

  /// Same values, no gradient link.
  Tensor detached() const { return Tensor(shape_, data_); }

  /// Reinterpret the buffer under a new shape without recording a tape op.
  Tensor& reshape_inplace(Shape shape) {
    if (numel(shape) != size()) throw DimensionError("reshape: " + to_string(shape_) + " -> " + to_string(shape));
    shape_ = std::move(shape);
    return *this;
  }

 private:
  friend class Tape<Scalar>;

  Shape shape_;
  Array data_;
  Tape<Scalar>* tape_ = nullptr;
  int node_ = -1;
};

/// Reverse-mode recorder. Nodes are appended in evaluation order, so the
/// node index is a topological order and backward is a single reverse sweep.
template <typename Scalar>
class Tape {
 public:
  using Array = typename Tensor<Scalar>::Array;
  using Backward = std::function<void(const Array& grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a leaf (parameter or input) whose gradient is wanted.
  Tensor<Scalar> leaf(Tensor<Scalar> value) {
    check_open();
    value.tape_ = this;
    value.node_ = push(value.shape(), {}, nullptr);
    return value;
  }

  /// Records an op output. `inputs` holds tape node ids (-1 for constants).
  Tensor<Scalar> record(Tensor<Scalar> value, std::vector<int> inputs, Backward backward) {
    check_open();
    value.tape_ = this;
    value.node_ = push(value.shape(), std::move(inputs), std::move(backward));
    return value;
  }

  void backward(const Tensor<Scalar>& loss) {
    if (loss.size() != 1) {
      throw ArgumentError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
    }
    if (loss.tape() != this) throw StateError("backward: loss was not recorded on this tape");
    if (consumed_) throw StateError("backward: tape already consumed; re-run the forward pass");
    consumed_ = true;

    grads_[loss.node()] = Array::Ones(1);
    for (int i = loss.node(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || grads_[i].size() == 0) continue;
      n.backward(grads_[i], *this);
      // Activations captured by the closure are no longer needed.
      n.backward = nullptr;
    }
  }

  /// Adds `g` into the gradient buffer of `node`; ignores constants.
  void accumulate(int node, const Array& g) {
    if (node < 0) return;
    Array& buf = grads_[node];
    if (buf.size() == 0) {
      buf = g;
    } else {
      buf += g;
    }
  }

  /// Gradient of the last backward pass w.r.t. `t`; zero when unreachable.
  Tensor<Scalar> grad(const Tensor<Scalar>& t) const {
    if (t.tape() != this) throw StateError("grad: tensor is not tracked by this tape");
    const Array& g = grads_[t.node()];
    if (g.size() == 0) return Tensor<Scalar>::zeros(t.shape());
    return Tensor<Scalar>(t.shape(), g);
  }

  bool consumed() const { return consumed_; }
  int size() const { return static_cast<int>(nodes_.size()); }
  const std::vector<int>& inputs_of(int node) const { return nodes_.at(node).inputs; }

 private:
  struct Node {
    Shape shape;
    std::vector<int> inputs;
    Backward backward;
  };

  void check_open() const {
    if (consumed_) throw StateError("tape: cannot record after backward");
  }

  int push(const Shape& shape, std::vector<int> inputs, Backward backward) {
    for (int in : inputs) {
      if (in >= static_cast<int>(nodes_.size())) throw StateError("tape: input recorded after its consumer");
    }
    nodes_.push_back(Node{shape, std::move(inputs), std::move(backward)});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<Array> grads_;
  bool consumed_ = false;
};

namespace detail {

/// Tape shared by the tracked members of `ts`, or nullptr when none is tracked.
template <typename Scalar>
Tape<Scalar>* common_tape(std::initializer_list<const Tensor<Scalar>*> ts) {
  Tape<Scalar>* tape = nullptr;
  for (const auto* t : ts) {
    if (!t->tape()) continue;
    if (tape && tape != t->tape()) throw StateError("op: inputs are recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

template <typename Scalar>
void check_finite(const Tensor<Scalar>& t, const char* op) {
#ifndef NDEBUG
  if (!t.data().allFinite()) throw NumericError(std::string(op) + ": non-finite output");
#else
  (void)t;
  (void)op;
#endif
}

}  // namespace detail

}  // namespace fda
