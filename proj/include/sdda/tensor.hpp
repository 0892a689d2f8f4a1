// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors and a minimal reverse-mode autodiff tape.
//
// One Graph records the ops of one forward pass; backward() replays the tape
// in reverse, accumulating d(loss)/d(leaf) into the grad buffers of
// requires_grad leaves. Grad buffers persist across backward calls (explicit
// reset by the caller); gradients of interior nodes live in per-call scratch
// so repeated backward passes never double-count shared subgraphs.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace sdda {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible operand shapes. Carries the op name and both shapes.
class ShapeError : public Error {
 public:
  ShapeError(std::string op, Shape lhs, Shape rhs)
      : Error(op + ": incompatible shapes " + shape_str(lhs) + " and " +
              shape_str(rhs)),
        op_(std::move(op)),
        lhs_(std::move(lhs)),
        rhs_(std::move(rhs)) {}
  const std::string& op() const { return op_; }
  const Shape& lhs() const { return lhs_; }
  const Shape& rhs() const { return rhs_; }

 private:
  std::string op_;
  Shape lhs_, rhs_;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

// A forward op produced a NaN/Inf (overflow raises instead of propagating).
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& op)
      : Error(op + ": non-finite value in op output") {}
};

class Graph;

class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("leaf", shape, Shape{values.size()});
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw NumericError("leaf");
    }
    Tensor t;
    t.d_ = std::make_shared<Payload>();
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    size_t n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    size_t n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return leaf(Shape{1}, {v}, requires_grad);
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  size_t rank() const { return d_->shape.size(); }
  size_t size() const { return d_->value.size(); }
  bool requires_grad() const { return d_->requires_grad; }
  bool is_leaf() const { return d_->producer == nullptr; }

  std::span<const double> value() const { return d_->value; }
  // In-place mutation is for leaves only (optimizer updates); mutating an op
  // output would desynchronize the tape.
  std::span<double> value_mut() {
    if (!is_leaf()) throw GraphError("value_mut: tensor is an op output");
    return d_->value;
  }

  double item() const {
    if (size() != 1) {
      throw ShapeError("item", d_->shape, Shape{1});
    }
    return d_->value[0];
  }

  bool has_grad() const { return !d_->grad.empty(); }
  std::span<const double> grad() const {
    if (d_->grad.empty()) {
      throw GraphError("grad: no gradient buffer (backward never reached this tensor)");
    }
    return d_->grad;
  }
  void zero_grad() {
    if (d_->requires_grad) d_->grad.assign(d_->value.size(), 0.0);
  }

  // Fresh leaf holding a copy of the current values.
  Tensor clone(bool requires_grad) const {
    return leaf(d_->shape, d_->value, requires_grad);
  }
  Tensor detach() const { return clone(false); }

  bool same_object(const Tensor& o) const { return d_ == o.d_; }

 private:
  struct Payload {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily by backward; leaves only
    bool requires_grad = false;
    const Graph* producer = nullptr;
    int node = -1;
  };

  std::shared_ptr<Payload> d_;
  friend class Graph;
};

enum class Op {
  Add,
  Mul,
  MatMul,
  Conv2d,
  BiasAdd,
  Relu,
  Reshape,
  ReduceSum,
  ReduceMean,
  Log,
  Exp,
  ClampMin,
  MaxAlongAxis,
  Softmax,
  MaxPool2,
  AvgPool2,
  Upsample2,
  ConcatChannels,
};

inline const char* op_name(Op k) {
  switch (k) {
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::MatMul: return "matmul";
    case Op::Conv2d: return "conv2d";
    case Op::BiasAdd: return "bias_add";
    case Op::Relu: return "relu";
    case Op::Reshape: return "reshape";
    case Op::ReduceSum: return "reduce_sum";
    case Op::ReduceMean: return "reduce_mean";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::ClampMin: return "clamp_min";
    case Op::MaxAlongAxis: return "max_along_axis";
    case Op::Softmax: return "softmax";
    case Op::MaxPool2: return "maxpool2";
    case Op::AvgPool2: return "avgpool2";
    case Op::Upsample2: return "upsample2";
    case Op::ConcatChannels: return "concat_channels";
  }
  return "?";
}

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  size_t node_count() const { return nodes_.size(); }

  // ---- elementwise / scalar-broadcast binary ops -------------------------

  // Same-shape elementwise, or one operand a 1-element scalar tensor.
  // No other broadcasting: mismatches are errors, not silent alignment.
  Tensor add(const Tensor& a, const Tensor& b) { return binary(Op::Add, a, b); }
  Tensor mul(const Tensor& a, const Tensor& b) { return binary(Op::Mul, a, b); }
  Tensor mul(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }
  Tensor sub(const Tensor& a, const Tensor& b) { return add(a, mul(b, -1.0)); }

  // ---- unary elementwise -------------------------------------------------

  Tensor relu(const Tensor& x) {
    Tensor out = fresh(x.shape(), x.requires_grad());
    const auto xv = x.value();
    auto& ov = out.d_->value;
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    return record(Op::Relu, {x}, std::move(out));
  }

  Tensor log(const Tensor& x) {
    Tensor out = fresh(x.shape(), x.requires_grad());
    const auto xv = x.value();
    auto& ov = out.d_->value;
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = std::log(xv[i]);
    return record(Op::Log, {x}, std::move(out));
  }

  Tensor exp(const Tensor& x) {
    Tensor out = fresh(x.shape(), x.requires_grad());
    const auto xv = x.value();
    auto& ov = out.d_->value;
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = std::exp(xv[i]);
    return record(Op::Exp, {x}, std::move(out));
  }

  // max(x, c) elementwise; gradient passes only where x > c.
  Tensor clamp_min(const Tensor& x, double c) {
    Tensor out = fresh(x.shape(), x.requires_grad());
    const auto xv = x.value();
    auto& ov = out.d_->value;
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > c ? xv[i] : c;
    Node n(Op::ClampMin, {x}, out);
    n.daux = {c};
    return push(std::move(n));
  }

  // ---- shape ops -----------------------------------------------------------

  Tensor reshape(const Tensor& x, Shape to) {
    if (shape_numel(to) != x.size()) throw ShapeError("reshape", x.shape(), to);
    Tensor out = fresh(to, x.requires_grad());
    std::copy(x.value().begin(), x.value().end(), out.d_->value.begin());
    return record(Op::Reshape, {x}, std::move(out));
  }

  // Concatenation along the channel axis (axis 1 for rank 4, axis 0 for rank 3).
  Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || (a.rank() != 3 && a.rank() != 4)) {
      throw ShapeError("concat_channels", a.shape(), b.shape());
    }
    const size_t caxis = a.rank() == 4 ? 1 : 0;
    Shape out_shape = a.shape();
    for (size_t i = 0; i < a.rank(); ++i) {
      if (i == caxis) continue;
      if (a.shape()[i] != b.shape()[i]) {
        throw ShapeError("concat_channels", a.shape(), b.shape());
      }
    }
    out_shape[caxis] += b.shape()[caxis];
    const size_t batch = a.rank() == 4 ? a.shape()[0] : 1;
    const size_t plane = a.shape()[a.rank() - 2] * a.shape()[a.rank() - 1];
    const size_t ca = a.shape()[caxis], cb = b.shape()[caxis];
    Tensor out = fresh(out_shape, a.requires_grad() || b.requires_grad());
    auto& ov = out.d_->value;
    const auto av = a.value(), bv = b.value();
    for (size_t n = 0; n < batch; ++n) {
      double* dst = ov.data() + n * (ca + cb) * plane;
      std::copy_n(av.data() + n * ca * plane, ca * plane, dst);
      std::copy_n(bv.data() + n * cb * plane, cb * plane, dst + ca * plane);
    }
    return record(Op::ConcatChannels, {a, b}, std::move(out));
  }

  // ---- reductions ----------------------------------------------------------

  Tensor reduce_sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.value()) s += v;
    Tensor out = fresh(Shape{1}, x.requires_grad());
    out.d_->value[0] = s;
    return record(Op::ReduceSum, {x}, std::move(out));
  }

  Tensor reduce_mean(const Tensor& x) {
    double s = 0.0;
    for (double v : x.value()) s += v;
    Tensor out = fresh(Shape{1}, x.requires_grad());
    out.d_->value[0] = s / static_cast<double>(x.size());
    return record(Op::ReduceMean, {x}, std::move(out));
  }

  // Max along one axis, keeping that axis with extent 1. Ties resolve to the
  // lowest index; the gradient routes there.
  Tensor max_along_axis(const Tensor& x, size_t axis) {
    if (axis >= x.rank()) throw ShapeError("max_along_axis", x.shape(), Shape{axis});
    Shape out_shape = x.shape();
    out_shape[axis] = 1;
    const auto [outer, extent, inner] = axis_split(x.shape(), axis);
    Tensor out = fresh(out_shape, x.requires_grad());
    Node n(Op::MaxAlongAxis, {x}, out);
    n.iaux.resize(1 + outer * inner);
    n.iaux[0] = static_cast<int64_t>(axis);
    const auto xv = x.value();
    auto& ov = out.d_->value;
    for (size_t o = 0; o < outer; ++o) {
      for (size_t i = 0; i < inner; ++i) {
        const double* base = xv.data() + o * extent * inner + i;
        double best = base[0];
        size_t best_k = 0;
        for (size_t k = 1; k < extent; ++k) {
          const double v = base[k * inner];
          if (v > best) {
            best = v;
            best_k = k;
          }
        }
        ov[o * inner + i] = best;
        n.iaux[1 + o * inner + i] = static_cast<int64_t>(best_k);
      }
    }
    return push(std::move(n));
  }

  // Numerically stable softmax along `axis` of logits scaled by `inv_temp`
  // (max subtraction before exponentiation).
  Tensor softmax(const Tensor& x, size_t axis, double inv_temp = 1.0) {
    if (axis >= x.rank()) throw ShapeError("softmax", x.shape(), Shape{axis});
    const auto [outer, extent, inner] = axis_split(x.shape(), axis);
    Tensor out = fresh(x.shape(), x.requires_grad());
    const auto xv = x.value();
    auto& ov = out.d_->value;
    for (size_t o = 0; o < outer; ++o) {
      for (size_t i = 0; i < inner; ++i) {
        const double* src = xv.data() + o * extent * inner + i;
        double* dst = ov.data() + o * extent * inner + i;
        double mx = src[0];
        for (size_t k = 1; k < extent; ++k) mx = std::max(mx, src[k * inner]);
        double sum = 0.0;
        for (size_t k = 0; k < extent; ++k) {
          const double e = std::exp((src[k * inner] - mx) * inv_temp);
          dst[k * inner] = e;
          sum += e;
        }
        const double inv = 1.0 / sum;
        for (size_t k = 0; k < extent; ++k) dst[k * inner] *= inv;
      }
    }
    Node n(Op::Softmax, {x}, out);
    n.iaux = {static_cast<int64_t>(axis)};
    n.daux = {inv_temp};
    return push(std::move(n));
  }

  // ---- linear algebra ------------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
      throw ShapeError("matmul", a.shape(), b.shape());
    }
    const size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out = fresh(Shape{m, n}, a.requires_grad() || b.requires_grad());
    const double* av = a.value().data();
    const double* bv = b.value().data();
    double* ov = out.d_->value.data();
    for (size_t i = 0; i < m; ++i) {
      double* orow = ov + i * n;
      for (size_t p = 0; p < k; ++p) {
        const double aip = av[i * k + p];
        const double* brow = bv + p * n;
        for (size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
    }
    return record(Op::MatMul, {a, b}, std::move(out));
  }

  // Adds a length-C vector along `axis` (broadcast over all other axes).
  Tensor bias_add(const Tensor& x, const Tensor& bias, size_t axis) {
    if (bias.rank() != 1 || axis >= x.rank() ||
        bias.shape()[0] != x.shape()[axis]) {
      throw ShapeError("bias_add", x.shape(), bias.shape());
    }
    const auto [outer, extent, inner] = axis_split(x.shape(), axis);
    Tensor out = fresh(x.shape(), x.requires_grad() || bias.requires_grad());
    const auto xv = x.value();
    const auto bv = bias.value();
    auto& ov = out.d_->value;
    for (size_t o = 0; o < outer; ++o) {
      for (size_t k = 0; k < extent; ++k) {
        const size_t base = (o * extent + k) * inner;
        const double b = bv[k];
        for (size_t i = 0; i < inner; ++i) ov[base + i] = xv[base + i] + b;
      }
    }
    Node n(Op::BiasAdd, {x, bias}, out);
    n.iaux = {static_cast<int64_t>(axis)};
    return push(std::move(n));
  }

  // 2-D convolution, stride 1, symmetric zero padding preserving H and W
  // (odd kernels only). Input (C,H,W) or (B,C,H,W); kernel (Co,Ci,kH,kW);
  // optional bias (Co).
  Tensor conv2d(const Tensor& x, const Tensor& kernel) {
    return conv2d_impl(x, kernel, nullptr);
  }
  Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    return conv2d_impl(x, kernel, &bias);
  }

  // ---- pooling / upsampling ------------------------------------------------

  // 2x2 max pooling, stride 2. H and W must be even.
  Tensor maxpool2(const Tensor& x) {
    const Dims4 d = dims4(x, "maxpool2");
    if (d.h % 2 != 0 || d.w % 2 != 0) {
      throw ShapeError("maxpool2", x.shape(), Shape{2, 2});
    }
    const size_t oh = d.h / 2, ow = d.w / 2;
    Tensor out = fresh(with_hw(x.shape(), oh, ow), x.requires_grad());
    Node n(Op::MaxPool2, {x}, out);
    n.iaux.resize(out.size());
    const auto xv = x.value();
    auto& ov = out.d_->value;
    for (size_t bc = 0; bc < d.b * d.c; ++bc) {
      const double* plane = xv.data() + bc * d.h * d.w;
      double* oplane = ov.data() + bc * oh * ow;
      int64_t* idx = n.iaux.data() + bc * oh * ow;
      for (size_t y = 0; y < oh; ++y) {
        for (size_t x2 = 0; x2 < ow; ++x2) {
          const size_t base = (2 * y) * d.w + 2 * x2;
          size_t best = base;
          double bv = plane[base];
          const size_t cand[3] = {base + 1, base + d.w, base + d.w + 1};
          for (size_t c : cand) {
            if (plane[c] > bv) {
              bv = plane[c];
              best = c;
            }
          }
          oplane[y * ow + x2] = bv;
          idx[y * ow + x2] = static_cast<int64_t>(bc * d.h * d.w + best);
        }
      }
    }
    return push(std::move(n));
  }

  // Stride-2 average pooling. Each spatial dim must be even or already 1
  // (a 1-extent dim passes through).
  Tensor avgpool2(const Tensor& x) {
    const Dims4 d = dims4(x, "avgpool2");
    const bool pool_h = d.h > 1, pool_w = d.w > 1;
    if ((pool_h && d.h % 2 != 0) || (pool_w && d.w % 2 != 0)) {
      throw ShapeError("avgpool2", x.shape(), Shape{2, 2});
    }
    const size_t oh = pool_h ? d.h / 2 : 1, ow = pool_w ? d.w / 2 : 1;
    const size_t wh = pool_h ? 2 : 1, ww = pool_w ? 2 : 1;
    const double scale = 1.0 / static_cast<double>(wh * ww);
    Tensor out = fresh(with_hw(x.shape(), oh, ow), x.requires_grad());
    const auto xv = x.value();
    auto& ov = out.d_->value;
    for (size_t bc = 0; bc < d.b * d.c; ++bc) {
      const double* plane = xv.data() + bc * d.h * d.w;
      double* oplane = ov.data() + bc * oh * ow;
      for (size_t y = 0; y < oh; ++y) {
        for (size_t x2 = 0; x2 < ow; ++x2) {
          double s = 0.0;
          for (size_t dy = 0; dy < wh; ++dy) {
            for (size_t dx = 0; dx < ww; ++dx) {
              s += plane[(wh * y + dy) * d.w + ww * x2 + dx];
            }
          }
          oplane[y * ow + x2] = s * scale;
        }
      }
    }
    return record(Op::AvgPool2, {x}, std::move(out));
  }

  // 2x nearest-neighbour upsampling.
  Tensor upsample2(const Tensor& x) {
    const Dims4 d = dims4(x, "upsample2");
    const size_t oh = d.h * 2, ow = d.w * 2;
    Tensor out = fresh(with_hw(x.shape(), oh, ow), x.requires_grad());
    const auto xv = x.value();
    auto& ov = out.d_->value;
    for (size_t bc = 0; bc < d.b * d.c; ++bc) {
      const double* plane = xv.data() + bc * d.h * d.w;
      double* oplane = ov.data() + bc * oh * ow;
      for (size_t y = 0; y < oh; ++y) {
        const double* irow = plane + (y / 2) * d.w;
        double* orow = oplane + y * ow;
        for (size_t x2 = 0; x2 < ow; ++x2) orow[x2] = irow[x2 / 2];
      }
    }
    return record(Op::Upsample2, {x}, std::move(out));
  }

  // ---- backward ------------------------------------------------------------

  // Accumulates d(loss)/d(leaf) into every requires_grad leaf of the recorded
  // tape. Repeated calls without zero_grad accumulate.
  void backward(const Tensor& loss) {
    if (!loss.defined()) throw GraphError("backward: undefined loss tensor");
    if (loss.size() != 1) {
      throw ShapeError("backward", loss.shape(), Shape{1});
    }
    if (loss.d_->producer != this) {
      throw GraphError("backward: loss is not an output of this graph");
    }
    const int loss_node = loss.d_->node;

    // Every requires_grad leaf feeding the relevant prefix of the tape gets a
    // buffer, so "holds d(loss)/d(leaf)" is true even when that gradient is 0.
    for (int i = 0; i <= loss_node; ++i) {
      for (const Tensor& in : nodes_[static_cast<size_t>(i)].in) {
        if (in.is_leaf() && in.requires_grad() && in.d_->grad.empty()) {
          in.d_->grad.assign(in.size(), 0.0);
        }
      }
    }

    // Interior gradients are per-call scratch keyed by node index.
    std::vector<std::vector<double>> scratch(static_cast<size_t>(loss_node) + 1);
    scratch[static_cast<size_t>(loss_node)].assign(1, 1.0);

    for (int i = loss_node; i >= 0; --i) {
      auto& up = scratch[static_cast<size_t>(i)];
      if (up.empty()) continue;  // node not an ancestor of the loss
      backprop(nodes_[static_cast<size_t>(i)], up, scratch);
      up.clear();
      up.shrink_to_fit();
    }
  }

 private:
  struct Node {
    Op kind;
    std::vector<Tensor> in;
    Tensor out;
    std::vector<int64_t> iaux;
    std::vector<double> daux;
    Node(Op k, std::vector<Tensor> i, Tensor o)
        : kind(k), in(std::move(i)), out(std::move(o)) {}
  };

  struct Dims4 {
    size_t b, c, h, w;
  };

  std::vector<Node> nodes_;

  static std::tuple<size_t, size_t, size_t> axis_split(const Shape& s,
                                                       size_t axis) {
    size_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    return {outer, s[axis], inner};
  }

  static Dims4 dims4(const Tensor& x, const char* op) {
    if (x.rank() == 4) return {x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]};
    if (x.rank() == 3) return {1, x.shape()[0], x.shape()[1], x.shape()[2]};
    throw ShapeError(op, x.shape(), Shape{0, 0, 0, 0});
  }

  static Shape with_hw(Shape s, size_t h, size_t w) {
    s[s.size() - 2] = h;
    s[s.size() - 1] = w;
    return s;
  }

  Tensor fresh(Shape shape, bool requires_grad) {
    Tensor t;
    t.d_ = std::make_shared<Tensor::Payload>();
    t.d_->shape = std::move(shape);
    t.d_->value.assign(shape_numel(t.d_->shape), 0.0);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  void check_same_graph(const char* op, const Tensor& t) const {
    if (!t.defined()) throw GraphError(std::string(op) + ": undefined input tensor");
    if (t.d_->producer != nullptr && t.d_->producer != this) {
      throw GraphError(std::string(op) +
                       ": input belongs to another graph (detach it first)");
    }
  }

  Tensor push(Node n) {
    for (const Tensor& t : n.in) check_same_graph(op_name(n.kind), t);
    n.out.d_->producer = this;
    n.out.d_->node = static_cast<int>(nodes_.size());
    for (double v : n.out.d_->value) {
      if (!std::isfinite(v)) throw NumericError(op_name(n.kind));
    }
    Tensor out = n.out;
    nodes_.push_back(std::move(n));
    return out;
  }

  Tensor record(Op kind, std::vector<Tensor> in, Tensor out) {
    return push(Node(kind, std::move(in), std::move(out)));
  }

  Tensor binary(Op kind, const Tensor& a, const Tensor& b) {
    const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
    if (!(a.shape() == b.shape() || a_scalar || b_scalar)) {
      throw ShapeError(op_name(kind), a.shape(), b.shape());
    }
    const Tensor& big = (b_scalar && !a_scalar) || a.shape() == b.shape() ? a : b;
    Tensor out = fresh(big.shape(), a.requires_grad() || b.requires_grad());
    const auto av = a.value(), bv = b.value();
    auto& ov = out.d_->value;
    const size_t n = ov.size();
    if (a.shape() == b.shape()) {
      if (kind == Op::Add) {
        for (size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
      } else {
        for (size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
      }
    } else if (b_scalar) {
      const double s = bv[0];
      if (kind == Op::Add) {
        for (size_t i = 0; i < n; ++i) ov[i] = av[i] + s;
      } else {
        for (size_t i = 0; i < n; ++i) ov[i] = av[i] * s;
      }
    } else {
      const double s = av[0];
      if (kind == Op::Add) {
        for (size_t i = 0; i < n; ++i) ov[i] = s + bv[i];
      } else {
        for (size_t i = 0; i < n; ++i) ov[i] = s * bv[i];
      }
    }
    return record(kind, {a, b}, std::move(out));
  }

  Tensor conv2d_impl(const Tensor& x, const Tensor& kernel, const Tensor* bias) {
    if (kernel.rank() != 4) throw ShapeError("conv2d", x.shape(), kernel.shape());
    const Dims4 d = dims4(x, "conv2d");
    const size_t co = kernel.shape()[0], ci = kernel.shape()[1];
    const size_t kh = kernel.shape()[2], kw = kernel.shape()[3];
    if (ci != d.c || kh % 2 == 0 || kw % 2 == 0) {
      throw ShapeError("conv2d", x.shape(), kernel.shape());
    }
    if (bias && (bias->rank() != 1 || bias->shape()[0] != co)) {
      throw ShapeError("conv2d", kernel.shape(), bias->shape());
    }
    Shape out_shape =
        x.rank() == 4 ? Shape{d.b, co, d.h, d.w} : Shape{co, d.h, d.w};
    bool rg = x.requires_grad() || kernel.requires_grad() ||
              (bias && bias->requires_grad());
    Tensor out = fresh(std::move(out_shape), rg);
    conv2d_forward(x.value().data(), kernel.value().data(),
                   bias ? bias->value().data() : nullptr, out.d_->value.data(),
                   d, co, kh, kw);
    std::vector<Tensor> in{x, kernel};
    if (bias) in.push_back(*bias);
    return record(Op::Conv2d, std::move(in), std::move(out));
  }

  // Copies plane (h x w) into a zero-padded (h+2ph x w+2pw) scratch plane.
  static void pad_plane(const double* src, double* dst, size_t h, size_t w,
                        size_t ph, size_t pw) {
    const size_t pwidth = w + 2 * pw;
    std::fill(dst, dst + (h + 2 * ph) * pwidth, 0.0);
    for (size_t y = 0; y < h; ++y) {
      std::copy_n(src + y * w, w, dst + (y + ph) * pwidth + pw);
    }
  }

  // y += stencil(pad, k) for one channel pair; pad is the zero-padded plane.
  static void conv_accum_plane(const double* pad, const double* kp, double* y,
                               size_t h, size_t w, size_t kh, size_t kw) {
    const size_t pwidth = w + kw - 1;
    if (kh == 3 && kw == 3) {
      const double k00 = kp[0], k01 = kp[1], k02 = kp[2];
      const double k10 = kp[3], k11 = kp[4], k12 = kp[5];
      const double k20 = kp[6], k21 = kp[7], k22 = kp[8];
      for (size_t yy = 0; yy < h; ++yy) {
        const double* __restrict r0 = pad + yy * pwidth;
        const double* __restrict r1 = r0 + pwidth;
        const double* __restrict r2 = r1 + pwidth;
        double* __restrict yrow = y + yy * w;
        for (size_t xx = 0; xx < w; ++xx) {
          yrow[xx] += k00 * r0[xx] + k01 * r0[xx + 1] + k02 * r0[xx + 2] +
                      k10 * r1[xx] + k11 * r1[xx + 1] + k12 * r1[xx + 2] +
                      k20 * r2[xx] + k21 * r2[xx + 1] + k22 * r2[xx + 2];
        }
      }
      return;
    }
    for (size_t dy = 0; dy < kh; ++dy) {
      for (size_t dx = 0; dx < kw; ++dx) {
        const double wgt = kp[dy * kw + dx];
        for (size_t yy = 0; yy < h; ++yy) {
          const double* __restrict prow = pad + (yy + dy) * pwidth + dx;
          double* __restrict yrow = y + yy * w;
          for (size_t xx = 0; xx < w; ++xx) yrow[xx] += wgt * prow[xx];
        }
      }
    }
  }

  static void conv2d_forward(const double* x, const double* k, const double* b,
                             double* y, Dims4 d, size_t co, size_t kh,
                             size_t kw) {
    const size_t plane = d.h * d.w;
    const size_t ph = kh / 2, pw = kw / 2;
    const size_t pplane = (d.h + 2 * ph) * (d.w + 2 * pw);
    std::vector<double> padded(d.c * pplane);
    for (size_t n = 0; n < d.b; ++n) {
      const double* xb = x + n * d.c * plane;
      double* yb = y + n * co * plane;
      for (size_t ic = 0; ic < d.c; ++ic) {
        pad_plane(xb + ic * plane, padded.data() + ic * pplane, d.h, d.w, ph, pw);
      }
      for (size_t oc = 0; oc < co; ++oc) {
        double* yp = yb + oc * plane;
        if (b) {
          const double bv = b[oc];
          for (size_t i = 0; i < plane; ++i) yp[i] = bv;
        }
        for (size_t ic = 0; ic < d.c; ++ic) {
          conv_accum_plane(padded.data() + ic * pplane,
                           k + (oc * d.c + ic) * kh * kw, yp, d.h, d.w, kh, kw);
        }
      }
    }
  }

  // Returns a mutable accumulation buffer for t (allocating if needed), or
  // nullptr when t does not require grad. Lets ops scatter in place.
  std::vector<double>* grad_sink(const Tensor& t,
                                 std::vector<std::vector<double>>& scratch) const {
    if (!t.requires_grad()) return nullptr;
    if (t.is_leaf()) {
      if (t.d_->grad.empty()) t.d_->grad.assign(t.size(), 0.0);
      return &t.d_->grad;
    }
    auto& slot = scratch[static_cast<size_t>(t.d_->node)];
    if (slot.empty()) slot.assign(t.size(), 0.0);
    return &slot;
  }

  void backprop(const Node& n, const std::vector<double>& up,
                std::vector<std::vector<double>>& scratch) const {
    switch (n.kind) {
      case Op::Add: {
        const Tensor &a = n.in[0], &b = n.in[1];
        for (int side = 0; side < 2; ++side) {
          const Tensor& t = side ? b : a;
          auto* dst = grad_sink(t, scratch);
          if (!dst) continue;
          if (t.size() == up.size()) {
            for (size_t i = 0; i < up.size(); ++i) (*dst)[i] += up[i];
          } else {  // scalar side: sum of upstream
            double s = 0.0;
            for (double v : up) s += v;
            (*dst)[0] += s;
          }
        }
        break;
      }
      case Op::Mul: {
        const Tensor &a = n.in[0], &b = n.in[1];
        const auto av = a.value(), bv = b.value();
        if (auto* da = grad_sink(a, scratch)) {
          if (a.size() == up.size()) {
            if (b.size() == up.size()) {
              for (size_t i = 0; i < up.size(); ++i) (*da)[i] += up[i] * bv[i];
            } else {
              for (size_t i = 0; i < up.size(); ++i) (*da)[i] += up[i] * bv[0];
            }
          } else {
            double s = 0.0;
            for (size_t i = 0; i < up.size(); ++i) s += up[i] * bv[i];
            (*da)[0] += s;
          }
        }
        if (auto* db = grad_sink(b, scratch)) {
          if (b.size() == up.size()) {
            if (a.size() == up.size()) {
              for (size_t i = 0; i < up.size(); ++i) (*db)[i] += up[i] * av[i];
            } else {
              for (size_t i = 0; i < up.size(); ++i) (*db)[i] += up[i] * av[0];
            }
          } else {
            double s = 0.0;
            for (size_t i = 0; i < up.size(); ++i) s += up[i] * av[i];
            (*db)[0] += s;
          }
        }
        break;
      }
      case Op::MatMul: {
        const Tensor &a = n.in[0], &b = n.in[1];
        const size_t m = a.shape()[0], k = a.shape()[1], nn = b.shape()[1];
        const double* av = a.value().data();
        const double* bv = b.value().data();
        if (auto* da = grad_sink(a, scratch)) {
          // dA[i,p] = sum_j up[i,j] * B[p,j]
          for (size_t i = 0; i < m; ++i) {
            const double* urow = up.data() + i * nn;
            for (size_t p = 0; p < k; ++p) {
              const double* brow = bv + p * nn;
              double s = 0.0;
              for (size_t j = 0; j < nn; ++j) s += urow[j] * brow[j];
              (*da)[i * k + p] += s;
            }
          }
        }
        if (auto* db = grad_sink(b, scratch)) {
          // dB[p,j] = sum_i A[i,p] * up[i,j]
          for (size_t i = 0; i < m; ++i) {
            const double* urow = up.data() + i * nn;
            for (size_t p = 0; p < k; ++p) {
              const double aip = av[i * k + p];
              double* drow = db->data() + p * nn;
              for (size_t j = 0; j < nn; ++j) drow[j] += aip * urow[j];
            }
          }
        }
        break;
      }
      case Op::Conv2d:
        conv2d_backward(n, up, scratch);
        break;
      case Op::BiasAdd: {
        const Tensor &x = n.in[0], &bias = n.in[1];
        const size_t axis = static_cast<size_t>(n.iaux[0]);
        const auto [outer, extent, inner] = axis_split(x.shape(), axis);
        if (auto* dx = grad_sink(x, scratch)) {
          for (size_t i = 0; i < up.size(); ++i) (*dx)[i] += up[i];
        }
        if (auto* db = grad_sink(bias, scratch)) {
          for (size_t o = 0; o < outer; ++o) {
            for (size_t k = 0; k < extent; ++k) {
              const double* urow = up.data() + (o * extent + k) * inner;
              double s = 0.0;
              for (size_t i = 0; i < inner; ++i) s += urow[i];
              (*db)[k] += s;
            }
          }
        }
        break;
      }
      case Op::Relu: {
        const Tensor& x = n.in[0];
        if (auto* dx = grad_sink(x, scratch)) {
          const auto xv = x.value();
          for (size_t i = 0; i < up.size(); ++i) {
            if (xv[i] > 0.0) (*dx)[i] += up[i];
          }
        }
        break;
      }
      case Op::ClampMin: {
        const Tensor& x = n.in[0];
        const double c = n.daux[0];
        if (auto* dx = grad_sink(x, scratch)) {
          const auto xv = x.value();
          for (size_t i = 0; i < up.size(); ++i) {
            if (xv[i] > c) (*dx)[i] += up[i];
          }
        }
        break;
      }
      case Op::Reshape: {
        if (auto* dx = grad_sink(n.in[0], scratch)) {
          for (size_t i = 0; i < up.size(); ++i) (*dx)[i] += up[i];
        }
        break;
      }
      case Op::ReduceSum: {
        if (auto* dx = grad_sink(n.in[0], scratch)) {
          const double g = up[0];
          for (size_t i = 0; i < dx->size(); ++i) (*dx)[i] += g;
        }
        break;
      }
      case Op::ReduceMean: {
        if (auto* dx = grad_sink(n.in[0], scratch)) {
          const double g = up[0] / static_cast<double>(n.in[0].size());
          for (size_t i = 0; i < dx->size(); ++i) (*dx)[i] += g;
        }
        break;
      }
      case Op::Log: {
        const Tensor& x = n.in[0];
        if (auto* dx = grad_sink(x, scratch)) {
          const auto xv = x.value();
          for (size_t i = 0; i < up.size(); ++i) (*dx)[i] += up[i] / xv[i];
        }
        break;
      }
      case Op::Exp: {
        if (auto* dx = grad_sink(n.in[0], scratch)) {
          const auto ov = n.out.value();
          for (size_t i = 0; i < up.size(); ++i) (*dx)[i] += up[i] * ov[i];
        }
        break;
      }
      case Op::MaxAlongAxis: {
        const Tensor& x = n.in[0];
        const size_t axis = static_cast<size_t>(n.iaux[0]);
        if (auto* dx = grad_sink(x, scratch)) {
          const auto [outer, extent, inner] = axis_split(x.shape(), axis);
          for (size_t o = 0; o < outer; ++o) {
            for (size_t i = 0; i < inner; ++i) {
              const size_t k = static_cast<size_t>(n.iaux[1 + o * inner + i]);
              (*dx)[(o * extent + k) * inner + i] += up[o * inner + i];
            }
          }
        }
        break;
      }
      case Op::Softmax: {
        const Tensor& x = n.in[0];
        if (auto* dx = grad_sink(x, scratch)) {
          const size_t axis = static_cast<size_t>(n.iaux[0]);
          const double inv_temp = n.daux[0];
          const auto [outer, extent, inner] = axis_split(x.shape(), axis);
          const auto pv = n.out.value();
          for (size_t o = 0; o < outer; ++o) {
            for (size_t i = 0; i < inner; ++i) {
              const size_t base = o * extent * inner + i;
              double dot = 0.0;
              for (size_t k = 0; k < extent; ++k) {
                dot += up[base + k * inner] * pv[base + k * inner];
              }
              for (size_t k = 0; k < extent; ++k) {
                const size_t j = base + k * inner;
                (*dx)[j] += inv_temp * pv[j] * (up[j] - dot);
              }
            }
          }
        }
        break;
      }
      case Op::MaxPool2: {
        if (auto* dx = grad_sink(n.in[0], scratch)) {
          for (size_t i = 0; i < up.size(); ++i) {
            (*dx)[static_cast<size_t>(n.iaux[i])] += up[i];
          }
        }
        break;
      }
      case Op::AvgPool2: {
        const Tensor& x = n.in[0];
        if (auto* dx = grad_sink(x, scratch)) {
          const Dims4 d = dims4(x, "avgpool2");
          const bool pool_h = d.h > 1, pool_w = d.w > 1;
          const size_t oh = pool_h ? d.h / 2 : 1, ow = pool_w ? d.w / 2 : 1;
          const size_t wh = pool_h ? 2 : 1, ww = pool_w ? 2 : 1;
          const double scale = 1.0 / static_cast<double>(wh * ww);
          for (size_t bc = 0; bc < d.b * d.c; ++bc) {
            const double* urow = up.data() + bc * oh * ow;
            double* dplane = dx->data() + bc * d.h * d.w;
            for (size_t y = 0; y < oh; ++y) {
              for (size_t x2 = 0; x2 < ow; ++x2) {
                const double g = urow[y * ow + x2] * scale;
                for (size_t dy = 0; dy < wh; ++dy) {
                  for (size_t dxx = 0; dxx < ww; ++dxx) {
                    dplane[(wh * y + dy) * d.w + ww * x2 + dxx] += g;
                  }
                }
              }
            }
          }
        }
        break;
      }
      case Op::Upsample2: {
        const Tensor& x = n.in[0];
        if (auto* dx = grad_sink(x, scratch)) {
          const Dims4 d = dims4(x, "upsample2");
          const size_t oh = d.h * 2, ow = d.w * 2;
          for (size_t bc = 0; bc < d.b * d.c; ++bc) {
            const double* uplane = up.data() + bc * oh * ow;
            double* dplane = dx->data() + bc * d.h * d.w;
            for (size_t y = 0; y < oh; ++y) {
              const double* urow = uplane + y * ow;
              double* drow = dplane + (y / 2) * d.w;
              for (size_t x2 = 0; x2 < ow; ++x2) drow[x2 / 2] += urow[x2];
            }
          }
        }
        break;
      }
      case Op::ConcatChannels: {
        const Tensor &a = n.in[0], &b = n.in[1];
        const size_t caxis = a.rank() == 4 ? 1 : 0;
        const size_t batch = a.rank() == 4 ? a.shape()[0] : 1;
        const size_t plane = a.shape()[a.rank() - 2] * a.shape()[a.rank() - 1];
        const size_t ca = a.shape()[caxis], cb = b.shape()[caxis];
        auto* da = grad_sink(a, scratch);
        auto* db = grad_sink(b, scratch);
        for (size_t nn = 0; nn < batch; ++nn) {
          const double* src = up.data() + nn * (ca + cb) * plane;
          if (da) {
            double* dst = da->data() + nn * ca * plane;
            for (size_t i = 0; i < ca * plane; ++i) dst[i] += src[i];
          }
          if (db) {
            double* dst = db->data() + nn * cb * plane;
            for (size_t i = 0; i < cb * plane; ++i) dst[i] += src[ca * plane + i];
          }
        }
        break;
      }
    }
  }

  void conv2d_backward(const Node& n, const std::vector<double>& up,
                       std::vector<std::vector<double>>& scratch) const {
    const Tensor& x = n.in[0];
    const Tensor& kernel = n.in[1];
    const Dims4 d = dims4(x, "conv2d");
    const size_t co = kernel.shape()[0];
    const size_t kh = kernel.shape()[2], kw = kernel.shape()[3];
    const size_t plane = d.h * d.w;
    const size_t ph = kh / 2, pw = kw / 2;
    const size_t pwidth = d.w + 2 * pw;
    const size_t pplane = (d.h + 2 * ph) * pwidth;
    const double* kv = kernel.value().data();
    const double* xv = x.value().data();

    auto* dx = grad_sink(x, scratch);
    auto* dk = grad_sink(kernel, scratch);
    // dX is the correlation of padded dY with the flipped kernel; dK taps are
    // dot products of dY against the padded input (same padding as forward).
    std::vector<double> pad_up(dx ? co * pplane : 0);
    std::vector<double> pad_x(dk ? d.c * pplane : 0);
    std::vector<double> kflip(kh * kw);
    for (size_t nn = 0; nn < d.b; ++nn) {
      const double* ub = up.data() + nn * co * plane;
      const double* xb = xv + nn * d.c * plane;
      if (dx) {
        for (size_t oc = 0; oc < co; ++oc) {
          pad_plane(ub + oc * plane, pad_up.data() + oc * pplane, d.h, d.w, ph,
                    pw);
        }
      }
      if (dk) {
        for (size_t ic = 0; ic < d.c; ++ic) {
          pad_plane(xb + ic * plane, pad_x.data() + ic * pplane, d.h, d.w, ph,
                    pw);
        }
      }
      for (size_t oc = 0; oc < co; ++oc) {
        const double* uplane = ub + oc * plane;
        for (size_t ic = 0; ic < d.c; ++ic) {
          const double* kp = kv + (oc * d.c + ic) * kh * kw;
          if (dx) {
            for (size_t i = 0; i < kh * kw; ++i) kflip[i] = kp[kh * kw - 1 - i];
            conv_accum_plane(pad_up.data() + oc * pplane, kflip.data(),
                             dx->data() + (nn * d.c + ic) * plane, d.h, d.w, kh,
                             kw);
          }
          if (dk) {
            double* dkp = dk->data() + (oc * d.c + ic) * kh * kw;
            const double* px = pad_x.data() + ic * pplane;
            if (kh == 3 && kw == 3) {
              // One streaming pass with nine accumulators instead of nine
              // passes over the upstream plane.
              double s00 = 0, s01 = 0, s02 = 0, s10 = 0, s11 = 0, s12 = 0,
                     s20 = 0, s21 = 0, s22 = 0;
              for (size_t yy = 0; yy < d.h; ++yy) {
                const double* __restrict urow = uplane + yy * d.w;
                const double* __restrict r0 = px + yy * pwidth;
                const double* __restrict r1 = r0 + pwidth;
                const double* __restrict r2 = r1 + pwidth;
                for (size_t xx = 0; xx < d.w; ++xx) {
                  const double u = urow[xx];
                  s00 += u * r0[xx];
                  s01 += u * r0[xx + 1];
                  s02 += u * r0[xx + 2];
                  s10 += u * r1[xx];
                  s11 += u * r1[xx + 1];
                  s12 += u * r1[xx + 2];
                  s20 += u * r2[xx];
                  s21 += u * r2[xx + 1];
                  s22 += u * r2[xx + 2];
                }
              }
              dkp[0] += s00;
              dkp[1] += s01;
              dkp[2] += s02;
              dkp[3] += s10;
              dkp[4] += s11;
              dkp[5] += s12;
              dkp[6] += s20;
              dkp[7] += s21;
              dkp[8] += s22;
            } else {
              for (size_t dy = 0; dy < kh; ++dy) {
                for (size_t dxi = 0; dxi < kw; ++dxi) {
                  double s = 0.0;
                  for (size_t yy = 0; yy < d.h; ++yy) {
                    const double* __restrict urow = uplane + yy * d.w;
                    const double* __restrict prow = px + (yy + dy) * pwidth + dxi;
                    for (size_t xx = 0; xx < d.w; ++xx) s += urow[xx] * prow[xx];
                  }
                  dkp[dy * kw + dxi] += s;
                }
              }
            }
          }
        }
      }
    }
    if (n.in.size() == 3) {
      if (auto* db = grad_sink(n.in[2], scratch)) {
        for (size_t nn = 0; nn < d.b; ++nn) {
          for (size_t oc = 0; oc < co; ++oc) {
            const double* uplane = up.data() + (nn * co + oc) * plane;
            double s = 0.0;
            for (size_t i = 0; i < plane; ++i) s += uplane[i];
            (*db)[oc] += s;
          }
        }
      }
    }
  }
};

// Max over coordinates of |analytic - central_difference| / max(1, |numeric|)
// for a scalar-valued computation f of x. Non-finite f evaluations give Inf.
inline double grad_check(
    const std::function<Tensor(Graph&, const Tensor&)>& f, const Tensor& x,
    double step) {
  std::vector<double> analytic;
  try {
    Graph g;
    Tensor xi = x.clone(true);
    Tensor y = f(g, xi);
    if (y.size() != 1) throw ShapeError("grad_check", y.shape(), Shape{1});
    g.backward(y);
    const auto ga = xi.grad();
    analytic.assign(ga.begin(), ga.end());
  } catch (const NumericError&) {
    return std::numeric_limits<double>::infinity();
  }

  auto eval = [&](const std::vector<double>& vals) {
    Graph g;
    Tensor xi = Tensor::leaf(x.shape(), vals, false);
    return f(g, xi).item();
  };

  std::vector<double> base(x.value().begin(), x.value().end());
  double worst = 0.0;
  for (size_t i = 0; i < base.size(); ++i) {
    std::vector<double> vp = base, vm = base;
    vp[i] += step;
    vm[i] -= step;
    double numeric;
    try {
      numeric = (eval(vp) - eval(vm)) / (2.0 * step);
    } catch (const NumericError&) {
      return std::numeric_limits<double>::infinity();
    }
    if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
      return std::numeric_limits<double>::infinity();
    }
    const double err =
        std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace sdda
