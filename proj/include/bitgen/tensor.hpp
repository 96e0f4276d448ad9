#pragma once

#include <bitgen/config.hpp>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

BITGEN_NAMESPACE_BEGIN

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct TensorImpl;

// A dense row-major array. Tensor is a handle: copies share storage and
// autograd history, clone() makes an independent leaf.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<real> values);
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, real value);
  static Tensor ones(Shape shape) { return full(std::move(shape), real(1)); }
  static Tensor scalar(real value) { return Tensor(Shape{}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  size_t ndim() const { return shape().size(); }
  int64_t dim(size_t axis) const;
  int64_t numel() const;

  std::span<real> data();
  std::span<const real> data() const;
  real item() const;

  bool requires_grad() const;
  Tensor& requires_grad_(bool on = true);
  // Empty span until a backward pass reaches this tensor.
  std::span<const real> grad() const;
  std::span<real> mutable_grad();
  void zero_grad();

  // Accumulates d(this)/d(leaf) into every leaf that requires grad.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;
  bool is_leaf() const;

  TensorImpl* get() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

using BackwardFn = std::function<void(TensorImpl& out)>;

struct TensorImpl {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;
  bool requires_grad = false;

  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;

  // Gradient buffer of this node, zero-allocated on first use.
  std::span<real> grad_buffer();
};

// Returns the gradient buffer of input `i` of `out`, or an empty span when that
// input does not take part in differentiation.
std::span<real> input_grad(TensorImpl& out, size_t i);

// Topologically ordered list of the nodes reachable from a root. Every node
// appears after all of its inputs.
class Tape {
 public:
  static Tape record(const Tensor& root);

  size_t size() const { return nodes_.size(); }
  std::span<TensorImpl* const> nodes() const { return nodes_; }

  // Reverse sweep: runs every node's backward rule exactly once.
  void sweep() const;

 private:
  std::vector<TensorImpl*> nodes_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds an op result. When gradients are enabled and some input requires
// grad, the result is recorded with `backward` as its rule. This is also the
// hook through which surrogate (straight-through) gradients are registered.
Tensor make_result(Shape shape, std::vector<real> values, std::vector<Tensor> inputs,
                   const char* op, BackwardFn backward);

BITGEN_NAMESPACE_END
