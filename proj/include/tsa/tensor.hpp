// Dense tensor with reverse-mode automatic differentiation.
//
// Tensors are value-type handles onto shared storage. Storage is immutable
// once an op has produced it; the only mutation after creation is gradient
// accumulation. Differentiable ops record pull-back closures on the
// thread-local active Tape; with no tape open they run as plain numerics,
// which is how inference works.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace tsa {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  // True when this value was produced through tracked ops on the
  // current tape (or is itself a requires_grad leaf).
  bool tracked = false;
  Tape* producer = nullptr;  // tape that recorded the producing op
  std::vector<double> grad;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}
  Tensor(Shape shape, std::vector<double> values);
  Tensor(Shape shape, double fill);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }
  static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(std::size_t axis) const;
  bool is_scalar() const { return numel() == 1; }

  std::span<const double> values() const { return impl_->data; }
  // Mutable view for construction and optimizer updates. Mutating a tensor
  // that already sits on a tape invalidates saved activations; callers own
  // that discipline.
  std::vector<double>& mutable_values() { return impl_->data; }

  double operator()(std::size_t i) const;
  double operator()(std::size_t i, std::size_t j) const;
  double operator()(std::size_t i, std::size_t j, std::size_t k) const;
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const;
  double grad_at(std::size_t flat) const;
  void zero_grad();

  detail::TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Records one pull-back closure per differentiable op, in creation order.
// Creation order is a topological order of the computation, so the backward
// pass is a single reverse sweep that fires each node exactly once.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  // Propagates d(loss)/d(leaf) into every requires_grad leaf reachable from
  // `loss`. Intermediate gradients are reset per call; leaf gradients
  // accumulate across calls until zero_grad.
  void backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

  void record(std::shared_ptr<detail::TensorImpl> output, std::function<void()> pull);

 private:
  struct Node {
    std::shared_ptr<detail::TensorImpl> output;
    std::function<void()> pull;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
};

// Convenience: backward on the innermost active tape.
void backward(const Tensor& loss);

enum class Elementwise { add, sub, mul, div };
enum class Activation { relu, sigmoid };
enum class Reduce { mean, stdev, max, sum };

// --- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise op);
Tensor activation(const Tensor& x, Activation kind);
Tensor softmax_axis(const Tensor& x, std::size_t axis);
Tensor reduce_axis(const Tensor& x, std::size_t axis, Reduce kind, bool keepdim = false);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // 2-D only
Tensor concat(const std::vector<Tensor>& xs, std::size_t axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sqrt_elem(const Tensor& x);

// Rows of the output are [x[t+o0], x[t+o1], ...] concatenated over the
// context offsets; only rows where every offset lands inside [0, T) are
// produced (valid convolution).
Tensor gather_context(const Tensor& x, const std::vector<int>& offsets);

// {T,F,C} feature map -> {To*Fo, kt*kf*C} patch matrix for stride-s,
// zero-padded 2-D convolution lowered onto matmul.
Tensor im2col(const Tensor& x, std::size_t kt, std::size_t kf, std::size_t stride,
              std::size_t pad);
std::size_t conv_out_dim(std::size_t n, std::size_t k, std::size_t stride, std::size_t pad);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, double c);
Tensor operator*(double c, const Tensor& a);
Tensor operator+(const Tensor& a, double c);

// Broadcast result shape under the size-1-axis-stretches rule (shorter
// shapes are left-padded with 1s). Throws std::invalid_argument naming both
// shapes when they cannot broadcast.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace tsa
