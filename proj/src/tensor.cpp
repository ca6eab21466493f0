#include "spiralscope/tensor.hpp"

#include <sstream>

namespace spiralscope {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array values, bool requires_grad) {
  for (Index e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_string(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape) {
  return full(std::move(shape), Scalar(0));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value) {
  const Index n = shape_numel(shape);
  return Tensor(std::move(shape), Array::Constant(n, value));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_values(Shape shape, std::initializer_list<Scalar> values) {
  Array v(static_cast<Index>(values.size()));
  Index i = 0;
  for (Scalar x : values) v[i++] = x;
  return Tensor(std::move(shape), std::move(v));
}

template <typename Scalar>
const typename Tensor<Scalar>::Node& Tensor<Scalar>::node() const {
  if (!node_) throw std::logic_error("use of an undefined tensor");
  return *node_;
}

template <typename Scalar>
typename Tensor<Scalar>::Node& Tensor<Scalar>::node() {
  if (!node_) throw std::logic_error("use of an undefined tensor");
  return *node_;
}

template <typename Scalar>
const Shape& Tensor<Scalar>::shape() const {
  return node().shape;
}

template <typename Scalar>
Index Tensor<Scalar>::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

template <typename Scalar>
Index Tensor<Scalar>::numel() const {
  return node().values.size();
}

template <typename Scalar>
typename Tensor<Scalar>::ConstMap Tensor<Scalar>::values() const {
  const Node& n = node();
  return ConstMap(n.values.data(), n.values.size());
}

template <typename Scalar>
const Scalar* Tensor<Scalar>::data() const {
  return node().values.data();
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return data()[0];
}

template <typename Scalar>
bool Tensor<Scalar>::requires_grad() const {
  return node().requires_grad;
}

template <typename Scalar>
void Tensor<Scalar>::set_requires_grad(bool flag) {
  node().requires_grad = flag;
}

template <typename Scalar>
bool Tensor<Scalar>::has_grad() const {
  return node().has_grad;
}

template <typename Scalar>
typename Tensor<Scalar>::ConstMap Tensor<Scalar>::grad() const {
  const Node& n = node();
  if (!n.has_grad) throw std::logic_error("tensor has no gradient");
  return ConstMap(n.grad.data(), n.grad.size());
}

template <typename Scalar>
typename Tensor<Scalar>::Array& Tensor<Scalar>::grad_buffer() {
  Node& n = node();
  if (!n.has_grad) {
    n.grad = Array::Zero(n.values.size());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  Node& n = node();
  n.grad.resize(0);
  n.has_grad = false;
}

template <typename Scalar>
typename Tensor<Scalar>::Map Tensor<Scalar>::mutable_values() {
  Node& n = node();
  return Map(n.values.data(), n.values.size());
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone() const {
  return Tensor(shape(), node().values, requires_grad());
}

template <typename Scalar>
bool Tensor<Scalar>::all_finite() const {
  return values().allFinite();
}

template <typename Scalar>
void Tape<Scalar>::record(std::string op, Tensor<Scalar> output,
                          std::vector<Tensor<Scalar>> inputs, BackwardFn backward) {
  records_.push_back(Record{std::move(op), std::move(output), std::move(inputs), std::move(backward)});
}

template <typename Scalar>
Tape<Scalar>*& Tape<Scalar>::active_slot() {
  thread_local Tape<Scalar>* slot = nullptr;
  return slot;
}

template <typename Scalar>
Tape<Scalar>* Tape<Scalar>::active() {
  return active_slot();
}

template <typename Scalar>
TapeScope<Scalar>::TapeScope(Tape<Scalar>& tape) : previous_(Tape<Scalar>::active_slot()) {
  Tape<Scalar>::active_slot() = &tape;
}

template <typename Scalar>
TapeScope<Scalar>::~TapeScope() {
  Tape<Scalar>::active_slot() = previous_;
}

template <typename Scalar>
void backward(Tape<Scalar>& tape, const Tensor<Scalar>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got " + shape_string(loss.shape()));
  }
  auto& records = tape.records();
  bool on_tape = false;
  for (const auto& r : records) {
    if (r.output.same_storage(loss)) on_tape = true;
  }
  if (!on_tape) throw std::logic_error("backward: loss was not produced on this tape");

  for (const auto& r : records) {
    Tensor<Scalar> out = r.output;
    out.zero_grad();
  }
  Tensor<Scalar> seed = loss;
  seed.grad_buffer()[0] += Scalar(1);

  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    Tensor<Scalar> out = it->output;
    it->backward(out.grad_buffer());
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template void backward<float>(Tape<float>&, const Tensor<float>&);
template void backward<double>(Tape<double>&, const Tensor<double>&);

}  // namespace spiralscope
