#include "edlseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace edlseg {

namespace {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

[[noreturn]] void fail(const char* op, const std::string& what) {
  throw std::invalid_argument(std::string(op) + ": " + what);
}

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      fail(op, "non-finite value in result");
    }
  }
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// Shape of a broadcast binary result; extents must match or be 1.
Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t d = 0; d < nd; ++d) {
    const std::size_t ea = d < nd - a.size() ? 1 : a[d - (nd - a.size())];
    const std::size_t eb = d < nd - b.size() ? 1 : b[d - (nd - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      fail(op, "shapes " + shape_str(a) + " and " + shape_str(b) +
                   " are not broadcast-compatible");
    }
    out[d] = std::max(ea, eb);
  }
  return out;
}

// Per-dimension element strides of `in` viewed under broadcast shape `out`
// (0 where the input extent is 1 and the output extent is larger).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t nd = out.size();
  std::vector<std::size_t> strides(nd, 0);
  std::size_t acc = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t d = i + (nd - in.size());
    strides[d] = (in[i] == 1 && out[d] != 1) ? 0 : acc;
    acc *= in[i];
  }
  return strides;
}

// Walks every element of `out_shape`, calling f(out_linear, a_off, b_off).
template <class F>
void broadcast_walk(const Shape& out_shape,
                    const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t nd = out_shape.size();
  const std::size_t n = shape_numel(out_shape);
  std::vector<std::size_t> idx(nd, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (std::size_t dd = nd; dd-- > 0;) {
      if (++idx[dd] < out_shape[dd]) {
        oa += sa[dd];
        ob += sb[dd];
        break;
      }
      idx[dd] = 0;
      oa -= sa[dd] * (out_shape[dd] - 1);
      ob -= sb[dd] * (out_shape[dd] - 1);
    }
  }
}

}  // namespace

// Friend factory; gives op implementations access to the private ctor.
Tensor make_op_result(Shape shape, std::vector<double> data,
                      std::vector<NodePtr> parents,
                      std::function<void(TensorNode&)> bp,
                      const char* op_name) {
  check_finite(op_name, data);
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = !parents.empty();
  node->parents = std::move(parents);
  if (node->requires_grad) node->backprop = std::move(bp);
  return Tensor(std::move(node));
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from_data(shape, std::vector<double>(shape_numel(shape), 0.0),
                   requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  return from_data(shape, std::vector<double>(shape_numel(shape), value),
                   requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    fail("from_data", "shape " + shape_str(shape) + " does not match " +
                          std::to_string(data.size()) + " elements");
  }
  for (std::size_t e : shape) {
    if (e == 0) fail("from_data", "zero extent in shape " + shape_str(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) fail("item", "tensor has more than one element");
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != dim()) fail("at", "index rank mismatch");
  std::size_t off = 0;
  std::size_t d = 0;
  for (std::size_t i : index) {
    if (i >= node_->shape[d]) fail("at", "index out of range");
    off = off * node_->shape[d] + i;
    ++d;
  }
  return node_->data[off];
}

Tensor Tensor::detach(bool requires_grad) const {
  return from_data(node_->shape, node_->data, requires_grad);
}

void Tensor::backward() const {
  if (!defined() || numel() != 1) {
    fail("backward", "root must be a single-element tensor");
  }
  if (!node_->requires_grad) {
    fail("backward", "root records no differentiation graph");
  }
  // Topological order by iterative post-order DFS over grad-requiring nodes.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next_child] = stack.back();
    if (next_child < n->parents.size()) {
      TensorNode* p = n->parents[next_child++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // Interior gradients are recomputed each sweep; leaf gradients accumulate.
  for (TensorNode* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (!n->is_leaf()) n->backprop(*n);
  }
}

namespace {

template <class FwdF, class GradF>
Tensor unary_op(const char* name, const Tensor& x, FwdF fwd, GradF dfdx) {
  const auto& xn = x.node();
  std::vector<double> out(xn->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xn->data[i]);
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> bp;
  if (xn->requires_grad) {
    parents.push_back(xn);
    bp = [xn, dfdx](TensorNode& o) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        xn->grad[i] += o.grad[i] * dfdx(xn->data[i], o.data[i]);
      }
    };
  }
  return make_op_result(xn->shape, std::move(out), std::move(parents),
                        std::move(bp), name);
}

// dfa/dfb receive (a_value, b_value) and return the local partial.
template <class FwdF, class DfA, class DfB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdF fwd,
                 DfA dfa, DfB dfb) {
  const auto& an = a.node();
  const auto& bn = b.node();
  const Shape out_shape = broadcast_shape(name, an->shape, bn->shape);
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const bool same =
      an->shape == bn->shape && an->shape.size() == out_shape.size();
  std::vector<std::size_t> sa, sb;
  if (same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(an->data[i], bn->data[i]);
  } else {
    sa = broadcast_strides(an->shape, out_shape);
    sb = broadcast_strides(bn->shape, out_shape);
    broadcast_walk(out_shape, sa, sb,
                   [&](std::size_t i, std::size_t oa, std::size_t ob) {
                     out[i] = fwd(an->data[oa], bn->data[ob]);
                   });
  }
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> bp;
  if (an->requires_grad || bn->requires_grad) {
    if (an->requires_grad) parents.push_back(an);
    if (bn->requires_grad) parents.push_back(bn);
    bp = [an, bn, same, out_shape, sa, sb, dfa, dfb](TensorNode& o) {
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (same) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          const double av = an->data[i];
          const double bv = bn->data[i];
          if (an->requires_grad) an->grad[i] += o.grad[i] * dfa(av, bv);
          if (bn->requires_grad) bn->grad[i] += o.grad[i] * dfb(av, bv);
        }
      } else {
        broadcast_walk(out_shape, sa, sb,
                       [&](std::size_t i, std::size_t oa, std::size_t ob) {
                         const double av = an->data[oa];
                         const double bv = bn->data[ob];
                         if (an->requires_grad) {
                           an->grad[oa] += o.grad[i] * dfa(av, bv);
                         }
                         if (bn->requires_grad) {
                           bn->grad[ob] += o.grad[i] * dfb(av, bv);
                         }
                       });
      }
    };
  }
  return make_op_result(out_shape, std::move(out), std::move(parents),
                        std::move(bp), name);
}

}  // namespace

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x,
      [](double v) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                        : std::exp(v) / (1.0 + std::exp(v));
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor clamp_min(const Tensor& x, double floor) {
  return unary_op(
      "clamp_min", x, [floor](double v) { return v < floor ? floor : v; },
      [floor](double v, double) { return v >= floor ? 1.0 : 0.0; });
}

Tensor clamp_max(const Tensor& x, double ceiling) {
  return unary_op(
      "clamp_max", x,
      [ceiling](double v) { return v > ceiling ? ceiling : v; },
      [ceiling](double v, double) { return v <= ceiling ? 1.0 : 0.0; });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

namespace {

enum class ReduceKind { sum, mean, max };

Tensor reduce_impl(const char* name, ReduceKind kind, const Tensor& x,
                   const std::vector<std::size_t>& axes_in, bool keepdims) {
  const auto& xn = x.node();
  const std::size_t nd = xn->shape.size();
  std::vector<bool> reduced(nd, false);
  if (axes_in.empty()) {
    reduced.assign(nd, true);
  } else {
    for (std::size_t a : axes_in) {
      if (a >= nd) fail(name, "axis " + std::to_string(a) + " out of range");
      reduced[a] = true;
    }
  }
  Shape out_shape;
  for (std::size_t d = 0; d < nd; ++d) {
    if (!reduced[d]) {
      out_shape.push_back(xn->shape[d]);
    } else if (keepdims) {
      out_shape.push_back(1);
    }
  }
  if (out_shape.empty()) out_shape = {1};

  // Output strides laid over the input dimensions (0 on reduced axes).
  std::vector<std::size_t> out_stride(nd, 0);
  std::size_t acc = 1;
  for (std::size_t d = nd; d-- > 0;) {
    if (!reduced[d]) {
      out_stride[d] = acc;
      acc *= xn->shape[d];
    }
  }

  const std::size_t n_in = xn->data.size();
  const std::size_t n_out = shape_numel(out_shape);
  std::size_t group = 1;
  for (std::size_t d = 0; d < nd; ++d) {
    if (reduced[d]) group *= xn->shape[d];
  }

  // Maps each input element to its output slot.
  std::vector<double> out;
  std::vector<std::size_t> argmax;
  auto walk = [&](auto&& f) {
    std::vector<std::size_t> idx(nd, 0);
    std::size_t o = 0;
    for (std::size_t i = 0; i < n_in; ++i) {
      f(i, o);
      for (std::size_t dd = nd; dd-- > 0;) {
        if (++idx[dd] < xn->shape[dd]) {
          o += out_stride[dd];
          break;
        }
        idx[dd] = 0;
        o -= out_stride[dd] * (xn->shape[dd] - 1);
      }
    }
  };

  if (kind == ReduceKind::max) {
    out.assign(n_out, -std::numeric_limits<double>::infinity());
    argmax.assign(n_out, 0);
    walk([&](std::size_t i, std::size_t o) {
      if (xn->data[i] > out[o]) {
        out[o] = xn->data[i];
        argmax[o] = i;
      }
    });
  } else {
    out.assign(n_out, 0.0);
    walk([&](std::size_t i, std::size_t o) { out[o] += xn->data[i]; });
    if (kind == ReduceKind::mean) {
      const double inv = 1.0 / static_cast<double>(group);
      for (double& v : out) v *= inv;
    }
  }

  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> bp;
  if (xn->requires_grad) {
    parents.push_back(xn);
    if (kind == ReduceKind::max) {
      bp = [xn, argmax](TensorNode& o) {
        xn->ensure_grad();
        for (std::size_t j = 0; j < o.grad.size(); ++j) {
          xn->grad[argmax[j]] += o.grad[j];
        }
      };
    } else {
      const double scale =
          kind == ReduceKind::mean ? 1.0 / static_cast<double>(group) : 1.0;
      bp = [xn, walk_shape = xn->shape, out_stride, scale](TensorNode& o) {
        xn->ensure_grad();
        const std::size_t nd2 = walk_shape.size();
        std::vector<std::size_t> idx(nd2, 0);
        std::size_t oo = 0;
        for (std::size_t i = 0; i < xn->data.size(); ++i) {
          xn->grad[i] += o.grad[oo] * scale;
          for (std::size_t dd = nd2; dd-- > 0;) {
            if (++idx[dd] < walk_shape[dd]) {
              oo += out_stride[dd];
              break;
            }
            idx[dd] = 0;
            oo -= out_stride[dd] * (walk_shape[dd] - 1);
          }
        }
      };
    }
  }
  return make_op_result(out_shape, std::move(out), std::move(parents),
                        std::move(bp), name);
}

}  // namespace

Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes,
           bool keepdims) {
  return reduce_impl("sum", ReduceKind::sum, x, axes, keepdims);
}

Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes,
            bool keepdims) {
  return reduce_impl("mean", ReduceKind::mean, x, axes, keepdims);
}

Tensor max(const Tensor& x, const std::vector<std::size_t>& axes,
           bool keepdims) {
  return reduce_impl("max", ReduceKind::max, x, axes, keepdims);
}

namespace {

// Copies NCHW data into a zero-padded buffer (and back for gradients).
std::vector<double> pad_nchw(const std::vector<double>& src, std::size_t n,
                             std::size_t c, std::size_t h, std::size_t w,
                             std::size_t p) {
  const std::size_t ph = h + 2 * p;
  const std::size_t pw = w + 2 * p;
  std::vector<double> dst(n * c * ph * pw, 0.0);
  for (std::size_t i = 0; i < n * c; ++i) {
    for (std::size_t y = 0; y < h; ++y) {
      const double* s = src.data() + (i * h + y) * w;
      double* d = dst.data() + (i * ph + y + p) * pw + p;
      std::copy(s, s + w, d);
    }
  }
  return dst;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
              std::size_t padding) {
  const auto& in = input.node();
  const auto& kn = kernel.node();
  if (in->shape.size() != 4 || kn->shape.size() != 4) {
    fail("conv2d", "input must be NCHW and kernel OIHW");
  }
  if (stride == 0) fail("conv2d", "stride must be positive");
  const std::size_t N = in->shape[0], C = in->shape[1], H = in->shape[2],
                    W = in->shape[3];
  const std::size_t O = kn->shape[0], I = kn->shape[1], KH = kn->shape[2],
                    KW = kn->shape[3];
  if (C != I) fail("conv2d", "channel count mismatch");
  if (H + 2 * padding < KH || W + 2 * padding < KW) {
    fail("conv2d", "kernel larger than padded input");
  }
  const std::size_t OH = (H + 2 * padding - KH) / stride + 1;
  const std::size_t OW = (W + 2 * padding - KW) / stride + 1;
  const std::size_t PH = H + 2 * padding, PW = W + 2 * padding;

  const std::vector<double> padded =
      padding == 0 ? in->data : pad_nchw(in->data, N, C, H, W, padding);

  std::vector<double> out(N * O * OH * OW, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t o = 0; o < O; ++o) {
      double* dst = out.data() + (n * O + o) * OH * OW;
      for (std::size_t c = 0; c < C; ++c) {
        const double* src = padded.data() + (n * C + c) * PH * PW;
        const double* wk = kn->data.data() + ((o * I + c) * KH) * KW;
        for (std::size_t kh = 0; kh < KH; ++kh) {
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const double wv = wk[kh * KW + kw];
            if (wv == 0.0) continue;
            for (std::size_t oh = 0; oh < OH; ++oh) {
              const double* row = src + (oh * stride + kh) * PW + kw;
              double* drow = dst + oh * OW;
              if (stride == 1) {
                for (std::size_t ow = 0; ow < OW; ++ow) {
                  drow[ow] += wv * row[ow];
                }
              } else {
                for (std::size_t ow = 0; ow < OW; ++ow) {
                  drow[ow] += wv * row[ow * stride];
                }
              }
            }
          }
        }
      }
    }
  }

  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> bp;
  if (in->requires_grad || kn->requires_grad) {
    if (in->requires_grad) parents.push_back(in);
    if (kn->requires_grad) parents.push_back(kn);
    bp = [in, kn, padded, N, C, H, W, O, I, KH, KW, OH, OW, PH, PW, stride,
          padding](TensorNode& onode) {
      const std::vector<double>& gout = onode.grad;
      if (in->requires_grad) {
        in->ensure_grad();
        std::vector<double> gpad(padding == 0 ? 0 : N * C * PH * PW, 0.0);
        std::vector<double>& gin = padding == 0 ? in->grad : gpad;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t o = 0; o < O; ++o) {
            const double* g = gout.data() + (n * O + o) * OH * OW;
            for (std::size_t c = 0; c < C; ++c) {
              double* gi = gin.data() + (n * C + c) * PH * PW;
              const double* wk = kn->data.data() + ((o * I + c) * KH) * KW;
              for (std::size_t kh = 0; kh < KH; ++kh) {
                for (std::size_t kw = 0; kw < KW; ++kw) {
                  const double wv = wk[kh * KW + kw];
                  if (wv == 0.0) continue;
                  for (std::size_t oh = 0; oh < OH; ++oh) {
                    double* row = gi + (oh * stride + kh) * PW + kw;
                    const double* grow = g + oh * OW;
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                      row[ow * stride] += wv * grow[ow];
                    }
                  }
                }
              }
            }
          }
        }
        if (padding != 0) {
          for (std::size_t i = 0; i < N * C; ++i) {
            for (std::size_t y = 0; y < H; ++y) {
              const double* s = gpad.data() + (i * PH + y + padding) * PW +
                                padding;
              double* d = in->grad.data() + (i * H + y) * W;
              for (std::size_t x = 0; x < W; ++x) d[x] += s[x];
            }
          }
        }
      }
      if (kn->requires_grad) {
        kn->ensure_grad();
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t o = 0; o < O; ++o) {
            const double* g = gout.data() + (n * O + o) * OH * OW;
            for (std::size_t c = 0; c < C; ++c) {
              const double* src = padded.data() + (n * C + c) * PH * PW;
              double* gw = kn->grad.data() + ((o * I + c) * KH) * KW;
              for (std::size_t kh = 0; kh < KH; ++kh) {
                for (std::size_t kw = 0; kw < KW; ++kw) {
                  double acc = 0.0;
                  for (std::size_t oh = 0; oh < OH; ++oh) {
                    const double* row = src + (oh * stride + kh) * PW + kw;
                    const double* grow = g + oh * OW;
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                      acc += grow[ow] * row[ow * stride];
                    }
                  }
                  gw[kh * KW + kw] += acc;
                }
              }
            }
          }
        }
      }
    };
  }
  return make_op_result({N, O, OH, OW}, std::move(out), std::move(parents),
                        std::move(bp), "conv2d");
}

namespace {

// Half-pixel source coordinates with clamped neighbor indices.
void bilinear_table(std::size_t in, std::size_t out,
                    std::vector<std::size_t>& i0, std::vector<std::size_t>& i1,
                    std::vector<double>& w1) {
  i0.resize(out);
  i1.resize(out);
  w1.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const double f = std::floor(src);
    double t = src - f;
    long lo = static_cast<long>(f);
    long hi = lo + 1;
    if (lo < 0) lo = 0;
    if (hi < 0) hi = 0;
    const long m = static_cast<long>(in) - 1;
    if (lo > m) lo = m;
    if (hi > m) hi = m;
    i0[o] = static_cast<std::size_t>(lo);
    i1[o] = static_cast<std::size_t>(hi);
    w1[o] = t;
  }
}

}  // namespace

Tensor bilinear_upsample(const Tensor& x, std::size_t out_h,
                         std::size_t out_w) {
  const auto& xn = x.node();
  if (xn->shape.size() != 4) fail("bilinear_upsample", "input must be NCHW");
  const std::size_t N = xn->shape[0], C = xn->shape[1], H = xn->shape[2],
                    W = xn->shape[3];
  if (out_h < H || out_w < W) {
    fail("bilinear_upsample", "target extents must not downsample");
  }
  std::vector<std::size_t> y0, y1, x0, x1;
  std::vector<double> wy, wx;
  bilinear_table(H, out_h, y0, y1, wy);
  bilinear_table(W, out_w, x0, x1, wx);

  std::vector<double> out(N * C * out_h * out_w);
  for (std::size_t i = 0; i < N * C; ++i) {
    const double* src = xn->data.data() + i * H * W;
    double* dst = out.data() + i * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const double* r0 = src + y0[oy] * W;
      const double* r1 = src + y1[oy] * W;
      const double ty = wy[oy];
      double* drow = dst + oy * out_w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const double tx = wx[ox];
        const double top = r0[x0[ox]] * (1.0 - tx) + r0[x1[ox]] * tx;
        const double bot = r1[x0[ox]] * (1.0 - tx) + r1[x1[ox]] * tx;
        drow[ox] = top * (1.0 - ty) + bot * ty;
      }
    }
  }

  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> bp;
  if (xn->requires_grad) {
    parents.push_back(xn);
    bp = [xn, N, C, H, W, out_h, out_w, y0, y1, x0, x1, wy,
          wx](TensorNode& o) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < N * C; ++i) {
        double* gsrc = xn->grad.data() + i * H * W;
        const double* g = o.grad.data() + i * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const double ty = wy[oy];
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const double tx = wx[ox];
            const double gv = g[oy * out_w + ox];
            gsrc[y0[oy] * W + x0[ox]] += gv * (1.0 - ty) * (1.0 - tx);
            gsrc[y0[oy] * W + x1[ox]] += gv * (1.0 - ty) * tx;
            gsrc[y1[oy] * W + x0[ox]] += gv * ty * (1.0 - tx);
            gsrc[y1[oy] * W + x1[ox]] += gv * ty * tx;
          }
        }
      }
    };
  }
  return make_op_result({N, C, out_h, out_w}, std::move(out),
                        std::move(parents), std::move(bp),
                        "bilinear_upsample");
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) fail("concat", "no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) fail("concat", "axis out of range");
  std::size_t axis_total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) fail("concat", "rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != s0[d]) fail("concat", "extent mismatch");
    }
    axis_total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = axis_total;

  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  std::vector<double> out(shape_numel(out_shape));
  std::size_t axis_off = 0;
  for (const Tensor& p : parts) {
    const std::size_t pa = p.shape()[axis];
    const double* src = p.node()->data.data();
    for (std::size_t u = 0; u < outer; ++u) {
      double* dst = out.data() + (u * axis_total + axis_off) * inner;
      std::copy(src + u * pa * inner, src + (u + 1) * pa * inner, dst);
    }
    axis_off += pa;
  }

  std::vector<NodePtr> parents;
  std::vector<NodePtr> all_nodes;
  for (const Tensor& p : parts) {
    all_nodes.push_back(p.node());
    if (p.requires_grad()) parents.push_back(p.node());
  }
  std::function<void(TensorNode&)> bp;
  if (!parents.empty()) {
    bp = [all_nodes, outer, inner, axis_total, axis](TensorNode& o) {
      std::size_t off = 0;
      for (const NodePtr& p : all_nodes) {
        const std::size_t pa = p->shape[axis];
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t u = 0; u < outer; ++u) {
            const double* g = o.grad.data() + (u * axis_total + off) * inner;
            double* d = p->grad.data() + u * pa * inner;
            for (std::size_t k = 0; k < pa * inner; ++k) d[k] += g[k];
          }
        }
        off += pa;
      }
    };
  }
  return make_op_result(std::move(out_shape), std::move(out),
                        std::move(parents), std::move(bp), "concat");
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start,
              std::size_t length) {
  const auto& xn = x.node();
  if (axis >= xn->shape.size()) fail("narrow", "axis out of range");
  if (length == 0 || start + length > xn->shape[axis]) {
    fail("narrow", "slice out of range");
  }
  Shape out_shape = xn->shape;
  out_shape[axis] = length;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= xn->shape[d];
  for (std::size_t d = axis + 1; d < xn->shape.size(); ++d) {
    inner *= xn->shape[d];
  }
  const std::size_t ax = xn->shape[axis];

  std::vector<double> out(shape_numel(out_shape));
  for (std::size_t u = 0; u < outer; ++u) {
    const double* src = xn->data.data() + (u * ax + start) * inner;
    std::copy(src, src + length * inner, out.data() + u * length * inner);
  }

  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> bp;
  if (xn->requires_grad) {
    parents.push_back(xn);
    bp = [xn, outer, inner, ax, start, length](TensorNode& o) {
      xn->ensure_grad();
      for (std::size_t u = 0; u < outer; ++u) {
        const double* g = o.grad.data() + u * length * inner;
        double* d = xn->grad.data() + (u * ax + start) * inner;
        for (std::size_t k = 0; k < length * inner; ++k) d[k] += g[k];
      }
    };
  }
  return make_op_result(std::move(out_shape), std::move(out),
                        std::move(parents), std::move(bp), "narrow");
}

Tensor reshape(const Tensor& x, Shape shape) {
  const auto& xn = x.node();
  if (shape_numel(shape) != xn->data.size()) {
    fail("reshape", "element count mismatch");
  }
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> bp;
  if (xn->requires_grad) {
    parents.push_back(xn);
    bp = [xn](TensorNode& o) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        xn->grad[i] += o.grad[i];
      }
    };
  }
  return make_op_result(std::move(shape), xn->data, std::move(parents),
                        std::move(bp), "reshape");
}

}  // namespace edlseg
