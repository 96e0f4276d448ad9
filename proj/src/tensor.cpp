#include <bitgen/tensor.hpp>

#include <algorithm>
#include <sstream>
#include <unordered_set>

BITGEN_NAMESPACE_BEGIN

namespace {
thread_local bool t_grad_enabled = true;
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<real> TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), real(0));
  return grad;
}

std::span<real> input_grad(TensorImpl& out, size_t i) {
  TensorImpl& in = *out.inputs[i];
  if (!in.requires_grad) return {};
  return in.grad_buffer();
}

Tensor::Tensor(Shape shape) : impl_(std::make_shared<TensorImpl>()) {
  impl_->data.assign(static_cast<size_t>(shape_numel(shape)), real(0));
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<real> values) : impl_(std::make_shared<TensorImpl>()) {
  if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::full(Shape shape, real value) {
  Tensor t(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("undefined tensor");
  return impl_->shape;
}

int64_t Tensor::dim(size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("axis out of range for shape " + shape_str(s));
  return s[axis];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(impl_ ? impl_->data.size() : 0); }

std::span<real> Tensor::data() { return impl_->data; }
std::span<const real> Tensor::data() const { return impl_->data; }

real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::requires_grad_(bool on) {
  if (!is_leaf()) throw std::logic_error("requires_grad_ on a non-leaf tensor");
  impl_->requires_grad = on;
  return *this;
}

std::span<const real> Tensor::grad() const { return impl_->grad; }
std::span<real> Tensor::mutable_grad() { return impl_->grad_buffer(); }

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

bool Tensor::is_leaf() const { return impl_ && !impl_->backward; }

Tensor Tensor::detach() const {
  Tensor t(shape(), impl_->data);
  return t;
}

Tensor Tensor::clone() const { return detach(); }

void Tensor::backward() const {
  if (!impl_) throw std::logic_error("backward on undefined tensor");
  if (numel() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_str(shape()));
  if (!impl_->requires_grad) throw std::logic_error("loss is not on the tape");
  impl_->grad_buffer()[0] += real(1);
  Tape::record(*this).sweep();
}

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.defined()) return tape;
  // Iterative post-order DFS so deep graphs do not exhaust the stack.
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorImpl* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void Tape::sweep() const {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor make_result(Shape shape, std::vector<real> values, std::vector<Tensor> inputs,
                   const char* op, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  if (!t_grad_enabled) return out;
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  TensorImpl* impl = out.get();
  impl->requires_grad = true;
  impl->op = op;
  impl->inputs.reserve(inputs.size());
  for (auto& t : inputs) impl->inputs.push_back(t.impl());
  impl->backward = std::move(backward);
  return out;
}

BITGEN_NAMESPACE_END
