#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

namespace edlseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

namespace detail {

// One node of the dynamically recorded differentiation graph. The tape is
// rebuilt on every forward pass; leaves (parameters, constants) persist
// across passes, interior nodes are freed when the root tensor is dropped.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<TensorNode>> parents;  // grad-requiring inputs
  std::function<void(TensorNode&)> backprop;         // empty for leaves

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  bool is_leaf() const { return !backprop; }
};

}  // namespace detail

// Dense row-major tensor of 64-bit floats. Copying a Tensor copies the
// handle, not the storage; use detach() for an independent value copy.
// All forward operations reject non-finite outputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->data; }
  // Direct mutable access to the value buffer (initialization, optimizer
  // updates). Must not be used while a recorded graph referencing this
  // tensor is still alive.
  std::span<double> values_mut() { return node_->data; }
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  }

  // Value of a single-element tensor.
  double item() const;
  // Element access by multi-index (tests and glue code).
  double at(std::initializer_list<std::size_t> index) const;

  // Value copy with no recorded history.
  Tensor detach(bool requires_grad = false) const;

  // Reverse-mode sweep from a single-element root. Gradients of interior
  // nodes are recomputed per call; leaf gradients accumulate until cleared.
  void backward() const;

  std::shared_ptr<detail::TensorNode>& node() { return node_; }
  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node)
      : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_op_result(Shape shape, std::vector<double> data,
                               std::vector<std::shared_ptr<detail::TensorNode>>
                                   parents,
                               std::function<void(detail::TensorNode&)> bp,
                               const char* op_name);
};

// Elementwise, broadcasting where shapes differ (NumPy rules).
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor clamp_min(const Tensor& x, double floor);
Tensor clamp_max(const Tensor& x, double ceiling);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) {
  return add(a, Tensor::scalar(b));
}
inline Tensor operator-(const Tensor& a, double b) {
  return sub(a, Tensor::scalar(b));
}
inline Tensor operator-(double a, const Tensor& b) {
  return sub(Tensor::scalar(a), b);
}
inline Tensor operator*(const Tensor& a, double b) {
  return mul(a, Tensor::scalar(b));
}
inline Tensor operator*(double a, const Tensor& b) {
  return mul(b, Tensor::scalar(a));
}
inline Tensor operator/(double a, const Tensor& b) {
  return div(Tensor::scalar(a), b);
}
inline Tensor operator/(const Tensor& a, double b) {
  return div(a, Tensor::scalar(b));
}

// Reductions. Empty axis list reduces every axis; a full reduction without
// keepdims yields shape {1}.
Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes = {},
           bool keepdims = false);
Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes = {},
            bool keepdims = false);
Tensor max(const Tensor& x, const std::vector<std::size_t>& axes = {},
           bool keepdims = false);

// 2-d cross-correlation, input NCHW and kernel OIHW.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding);

// Bilinear interpolation to (out_h, out_w) >= input extents, half-pixel
// centers with edge clamping.
Tensor bilinear_upsample(const Tensor& x, std::size_t out_h,
                         std::size_t out_w);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start,
              std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);

}  // namespace edlseg
