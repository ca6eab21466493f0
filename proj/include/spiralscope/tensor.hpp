#pragma once

#include <Eigen/Core>

#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace spiralscope {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index shape_numel(const Shape& shape);

/// Raised when operand shapes do not conform.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a NaN or Inf shows up where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major tensor with an optional gradient slot.
///
/// Tensors are cheap handles onto shared storage. Values are fixed once the
/// tensor is built; only the gradient buffer changes during backward. The
/// `mutable_values()` escape hatch exists for optimizers and checkpoint
/// loaders, which own the parameters they touch.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using ConstMap = Eigen::Map<const Array>;
  using Map = Eigen::Map<Array>;

  Tensor() = default;
  Tensor(Shape shape, Array values, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, Scalar value);
  static Tensor from_values(Shape shape, std::initializer_list<Scalar> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  Index dim(std::size_t axis) const;
  Index numel() const;

  ConstMap values() const;
  const Scalar* data() const;
  Scalar operator[](Index flat) const { return data()[flat]; }
  Scalar item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  ConstMap grad() const;
  /// Gradient storage, allocated as zeros on first use.
  Array& grad_buffer();
  void zero_grad();

  Map mutable_values();

  Tensor clone() const;
  template <typename Other>
  Tensor<Other> cast() const {
    typename Tensor<Other>::Array v = values().template cast<Other>();
    return Tensor<Other>(shape(), std::move(v), requires_grad());
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  bool all_finite() const;

 private:
  struct Node {
    Shape shape;
    Array values;
    Array grad;
    bool has_grad = false;
    bool requires_grad = false;
  };
  const Node& node() const;
  Node& node();
  std::shared_ptr<Node> node_;
};

/// Ordered log of executed primitives. Record order is the execution order,
/// which is a topological order of the computation.
template <typename Scalar>
class Tape {
 public:
  using Array = typename Tensor<Scalar>::Array;
  using BackwardFn = std::function<void(const Array& grad_output)>;

  struct Record {
    std::string op;
    Tensor<Scalar> output;
    std::vector<Tensor<Scalar>> inputs;
    BackwardFn backward;
  };

  void record(std::string op, Tensor<Scalar> output,
              std::vector<Tensor<Scalar>> inputs, BackwardFn backward);
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  /// Tape currently receiving records on this thread, or nullptr.
  static Tape* active();

 private:
  template <typename>
  friend class TapeScope;
  static Tape*& active_slot();

  std::vector<Record> records_;
};

/// Makes a tape active on the current thread for the scope's lifetime.
template <typename Scalar>
class TapeScope {
 public:
  explicit TapeScope(Tape<Scalar>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<Scalar>* previous_;
};

/// Reverse sweep over `tape` seeded with d loss / d loss = 1.
///
/// Leaf gradients accumulate across calls; call zero_grad() between steps.
/// Gradients of recorded intermediates are reset at the start of each sweep.
template <typename Scalar>
void backward(Tape<Scalar>& tape, const Tensor<Scalar>& loss);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;
extern template class TapeScope<float>;
extern template class TapeScope<double>;

}  // namespace spiralscope
