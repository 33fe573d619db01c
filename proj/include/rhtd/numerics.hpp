#pragma once

// Dense double-precision tensors and a reverse-mode gradient tape.
//
// A Tape records every operation applied to the Vars it hands out. Forward
// values are computed eagerly when an op is recorded; backward() walks the
// records in reverse and accumulates adjoints into every leaf that requires a
// gradient. A tape and its Vars belong to one thread.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rhtd/errors.hpp"

namespace rhtd {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor of shape " + shape_str(shape_) + " cannot hold " +
                           std::to_string(data_.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  // 1 x n row vector.
  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.back(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool requires_grad() const noexcept { return requires_grad_; }
  Tensor& set_requires_grad(bool flag) noexcept {
    requires_grad_ = flag;
    return *this;
  }

  bool operator==(const Tensor& other) const { return shape_ == other.shape_ && data_ == other.data_; }

 private:
  void check_shape() const {
    if (shape_.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

enum class Op : std::uint8_t {
  Leaf,
  Matmul,
  Add,
  Mul,
  Concat,
  Slice,
  Embedding,
  Softmax,
  Sigmoid,
  Tanh,
  Exp,
  Log,
  Neg,
  Sum,
  Scale,
  Reshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Matmul: return "matmul";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Embedding: return "embedding";
    case Op::Softmax: return "softmax";
    case Op::Sigmoid: return "sigmoid";
    case Op::Tanh: return "tanh";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Neg: return "neg";
    case Op::Sum: return "sum";
    case Op::Scale: return "scale";
    case Op::Reshape: return "reshape";
  }
  return "?";
}

enum class Unary : std::uint8_t { Sigmoid, Tanh, Exp, Log, Neg };

class Tape;

// Handle to a value recorded on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
  double operator[](std::size_t i) const { return value()[i]; }
  int id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Gradients of one backward pass, keyed by leaf id.
class Gradients {
 public:
  const Tensor& operator[](const Var& leaf) const { return at(leaf.id()); }
  const Tensor& at(int id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw InputError("no gradient recorded for node " + std::to_string(id));
    return it->second;
  }
  bool contains(int id) const { return grads_.count(id) != 0; }
  const std::map<int, Tensor>& all() const noexcept { return grads_; }

 private:
  friend Gradients backward(const Var& loss);
  std::map<int, Tensor> grads_;
};

class Tape {
 public:
  struct Node {
    Op op = Op::Leaf;
    std::vector<int> inputs;
    Tensor value;
    const Tensor* external = nullptr;  // leaf that aliases caller-owned storage
    bool requires_grad = false;
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    double factor = 1.0;
    std::vector<std::size_t> indices;

    const Tensor& val() const { return external ? *external : value; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Leaf that reads `value` in place. The caller keeps it alive and unchanged
  // for the tape's lifetime.
  Var reference(const Tensor& value, bool requires_grad = true) {
    Node n;
    n.external = &value;
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

  Var push(Node&& n) {
    if (n.op != Op::Leaf) {
      for (double v : n.value.values()) {
        if (!std::isfinite(v)) {
          throw NumericError(std::string("non-finite value produced by ") + op_name(n.op));
        }
      }
      n.requires_grad = false;
      for (int in : n.inputs) n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(in)].requires_grad;
    }
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size() - 1));
  }

 private:
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->node(id_).val(); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (!a.valid() || a.tape() != b.tape()) throw InputError("operands live on different tapes");
  return *a.tape();
}

inline Tape::Node make_node(Op op, std::vector<int> inputs, Tensor value) {
  Tape::Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  return n;
}

// Splits `shape` around `axis` into (outer, axis extent, inner).
inline void axis_split(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& mid,
                       std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  mid = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

template <class F>
Var elementwise(Op op, const Var& a, const Var& b, F f) {
  Tape& tape = same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() == y.shape()) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
    return tape.push(make_node(op, {a.id(), b.id()}, std::move(out)));
  }
  if (y.size() == 1) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[0]);
    return tape.push(make_node(op, {a.id(), b.id()}, std::move(out)));
  }
  if (x.size() == 1) {
    Tensor out(y.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[0], y[i]);
    return tape.push(make_node(op, {a.id(), b.id()}, std::move(out)));
  }
  throw DimensionError(std::string(op_name(op)) + ": shapes " + shape_str(x.shape()) + " and " +
                       shape_str(y.shape()) + " do not match");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0]) {
    throw DimensionError("matmul: shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()) +
                         " are not compatible");
  }
  const std::size_t m = x.shape()[0], k = x.shape()[1], n = y.shape()[1];
  Tensor out({m, n});
  const double* xp = x.data().data();
  const double* yp = y.data().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = xp[i * k + p];
      if (xv == 0.0) continue;
      const double* yrow = yp + p * n;
      double* orow = op + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
    }
  }
  return tape.push(detail::make_node(Op::Matmul, {a.id(), b.id()}, std::move(out)));
}

// Elementwise sum. One operand may hold a single value, which is broadcast.
inline Var add(const Var& a, const Var& b) {
  return detail::elementwise(Op::Add, a, b, [](double x, double y) { return x + y; });
}

// Elementwise product, with the same single-value broadcast as add().
inline Var mul(const Var& a, const Var& b) {
  return detail::elementwise(Op::Mul, a, b, [](double x, double y) { return x * y; });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Tape& tape = *parts.front().tape();
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw DimensionError("concat axis out of range for " + shape_str(shape));
  std::size_t total = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    const Shape& s = p.shape();
    bool ok = s.size() == shape.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == shape[i];
    if (!ok) {
      throw DimensionError("concat: shapes " + shape_str(shape) + " and " + shape_str(s) +
                           " differ off axis " + std::to_string(axis));
    }
    total += s[axis];
    ids.push_back(p.id());
  }
  shape[axis] = total;
  Tensor out(shape);
  std::size_t outer, mid, inner;
  detail::axis_split(shape, axis, outer, mid, inner);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t len = v.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(o * len), len,
                  out.data().begin() + static_cast<std::ptrdiff_t>(o * mid * inner + offset * inner));
    }
    offset += v.shape()[axis];
  }
  auto node = detail::make_node(Op::Concat, std::move(ids), std::move(out));
  node.axis = axis;
  return tape.push(std::move(node));
}

// Elements [begin, end) along `axis`.
inline Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& in = a.shape();
  if (axis >= in.size() || begin >= end || end > in[axis]) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(in));
  }
  Shape shape = in;
  shape[axis] = end - begin;
  Tensor out(shape);
  std::size_t outer, mid, inner;
  detail::axis_split(in, axis, outer, mid, inner);
  const std::size_t len = (end - begin) * inner;
  const Tensor& v = a.value();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(o * mid * inner + begin * inner), len,
                out.data().begin() + static_cast<std::ptrdiff_t>(o * len));
  }
  auto node = detail::make_node(Op::Slice, {a.id()}, std::move(out));
  node.axis = axis;
  node.begin = begin;
  node.end = end;
  return a.tape()->push(std::move(node));
}

// Gathers rows of a 2-D table. Gradient scatter-adds back into the table.
inline Var embedding(const Var& table, std::vector<std::size_t> rows) {
  const Tensor& t = table.value();
  if (t.rank() != 2) throw DimensionError("embedding table must be 2-D, got " + shape_str(t.shape()));
  if (rows.empty()) throw DimensionError("embedding lookup of zero rows");
  const std::size_t width = t.shape()[1];
  Tensor out({rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= t.shape()[0]) {
      throw DimensionError("embedding row " + std::to_string(rows[r]) + " outside table " +
                           shape_str(t.shape()));
    }
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  auto node = detail::make_node(Op::Embedding, {table.id()}, std::move(out));
  node.indices = std::move(rows);
  return table.tape()->push(std::move(node));
}

// Softmax over every element of `a` (callers pass vectors); shape is kept.
inline Var softmax(const Var& a) {
  const Tensor& v = a.value();
  const double mx = *std::max_element(v.values().begin(), v.values().end());
  Tensor out(v.shape());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    z += out[i];
  }
  for (std::size_t i = 0; i < v.size(); ++i) out[i] /= z;
  return a.tape()->push(detail::make_node(Op::Softmax, {a.id()}, std::move(out)));
}

inline Var apply_unary(const Var& a, Unary kind) {
  const Tensor& v = a.value();
  Tensor out(v.shape());
  Op op = Op::Neg;
  switch (kind) {
    case Unary::Sigmoid:
      op = Op::Sigmoid;
      for (std::size_t i = 0; i < v.size(); ++i) {
        // Branch on sign so exp() never overflows.
        if (v[i] >= 0) {
          out[i] = 1.0 / (1.0 + std::exp(-v[i]));
        } else {
          const double e = std::exp(v[i]);
          out[i] = e / (1.0 + e);
        }
      }
      break;
    case Unary::Tanh:
      op = Op::Tanh;
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::tanh(v[i]);
      break;
    case Unary::Exp:
      op = Op::Exp;
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::exp(v[i]);
      break;
    case Unary::Log:
      op = Op::Log;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (!(v[i] > 0.0)) {
          throw DomainError("log of nonpositive value " + std::to_string(v[i]) + " at index " +
                            std::to_string(i));
        }
        out[i] = std::log(v[i]);
      }
      break;
    case Unary::Neg:
      op = Op::Neg;
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = -v[i];
      break;
  }
  return a.tape()->push(detail::make_node(op, {a.id()}, std::move(out)));
}

inline Var sigmoid(const Var& a) { return apply_unary(a, Unary::Sigmoid); }
inline Var tanh(const Var& a) { return apply_unary(a, Unary::Tanh); }
inline Var exp(const Var& a) { return apply_unary(a, Unary::Exp); }
inline Var log(const Var& a) { return apply_unary(a, Unary::Log); }
inline Var neg(const Var& a) { return apply_unary(a, Unary::Neg); }

inline Var sum(const Var& a) {
  const auto& v = a.value().values();
  // Plain left-to-right sum keeps results bitwise reproducible.
  double s = 0.0;
  for (double x : v) s += x;
  return a.tape()->push(detail::make_node(Op::Sum, {a.id()}, Tensor::scalar(s)));
}

inline Var scale(const Var& a, double factor) {
  const Tensor& v = a.value();
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * factor;
  auto node = detail::make_node(Op::Scale, {a.id()}, std::move(out));
  node.factor = factor;
  return a.tape()->push(std::move(node));
}

inline Var reshape(const Var& a, Shape shape) {
  const Tensor& v = a.value();
  if (shape_size(shape) != v.size()) {
    throw DimensionError("reshape " + shape_str(v.shape()) + " to " + shape_str(shape));
  }
  return a.tape()->push(detail::make_node(Op::Reshape, {a.id()}, Tensor(std::move(shape), v.values())));
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return add(a, neg(b)); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

inline Gradients backward(const Var& loss) {
  if (!loss.valid()) throw InputError("backward on an empty Var");
  if (loss.value().size() != 1) {
    throw DimensionError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  const Tape& tape = *loss.tape();
  const auto& nodes = tape.nodes();
  std::vector<std::vector<double>> adj(nodes.size());
  auto grad_of = [&](int id) -> std::vector<double>& {
    auto& g = adj[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(nodes[static_cast<std::size_t>(id)].val().size(), 0.0);
    return g;
  };
  auto wants = [&](int id) { return nodes[static_cast<std::size_t>(id)].requires_grad; };

  adj[static_cast<std::size_t>(loss.id())] = {1.0};
  for (int i = loss.id(); i >= 0; --i) {
    const auto& node = nodes[static_cast<std::size_t>(i)];
    if (node.op == Op::Leaf || !node.requires_grad) continue;
    const std::vector<double>& dy = adj[static_cast<std::size_t>(i)];
    if (dy.empty()) continue;
    const Tensor& y = node.val();

    switch (node.op) {
      case Op::Leaf:
        break;
      case Op::Matmul: {
        const Tensor& a = nodes[static_cast<std::size_t>(node.inputs[0])].val();
        const Tensor& b = nodes[static_cast<std::size_t>(node.inputs[1])].val();
        const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
        if (wants(node.inputs[0])) {
          auto& da = grad_of(node.inputs[0]);
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += dy[r * n + j] * b[p * n + j];
              da[r * k + p] += acc;
            }
          }
        }
        if (wants(node.inputs[1])) {
          auto& db = grad_of(node.inputs[1]);
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t p = 0; p < k; ++p) {
              const double av = a[r * k + p];
              if (av == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av * dy[r * n + j];
            }
          }
        }
        break;
      }
      case Op::Add:
      case Op::Mul: {
        for (int side = 0; side < 2; ++side) {
          const int in = node.inputs[static_cast<std::size_t>(side)];
          if (!wants(in)) continue;
          const Tensor& other = nodes[static_cast<std::size_t>(node.inputs[static_cast<std::size_t>(1 - side)])].val();
          auto& g = grad_of(in);
          const bool broadcast = g.size() == 1 && dy.size() != 1;
          for (std::size_t j = 0; j < dy.size(); ++j) {
            double d = dy[j];
            if (node.op == Op::Mul) d *= other.size() == 1 ? other[0] : other[j];
            g[broadcast ? 0 : j] += d;
          }
        }
        break;
      }
      case Op::Concat: {
        std::size_t outer, mid, inner;
        detail::axis_split(y.shape(), node.axis, outer, mid, inner);
        std::size_t offset = 0;
        for (int in : node.inputs) {
          const std::size_t ext = nodes[static_cast<std::size_t>(in)].val().shape()[node.axis];
          if (wants(in)) {
            auto& g = grad_of(in);
            const std::size_t len = ext * inner;
            for (std::size_t o = 0; o < outer; ++o) {
              for (std::size_t j = 0; j < len; ++j) g[o * len + j] += dy[o * mid * inner + offset * inner + j];
            }
          }
          offset += ext;
        }
        break;
      }
      case Op::Slice: {
        const int in = node.inputs[0];
        if (!wants(in)) break;
        std::size_t outer, mid, inner;
        detail::axis_split(nodes[static_cast<std::size_t>(in)].val().shape(), node.axis, outer, mid, inner);
        auto& g = grad_of(in);
        const std::size_t len = (node.end - node.begin) * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < len; ++j) g[o * mid * inner + node.begin * inner + j] += dy[o * len + j];
        }
        break;
      }
      case Op::Embedding: {
        const int in = node.inputs[0];
        if (!wants(in)) break;
        auto& g = grad_of(in);
        const std::size_t width = y.shape()[1];
        for (std::size_t r = 0; r < node.indices.size(); ++r) {
          for (std::size_t j = 0; j < width; ++j) g[node.indices[r] * width + j] += dy[r * width + j];
        }
        break;
      }
      case Op::Softmax: {
        const int in = node.inputs[0];
        if (!wants(in)) break;
        auto& g = grad_of(in);
        double dot = 0.0;
        for (std::size_t j = 0; j < dy.size(); ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < dy.size(); ++j) g[j] += y[j] * (dy[j] - dot);
        break;
      }
      case Op::Sigmoid:
      case Op::Tanh:
      case Op::Exp:
      case Op::Log:
      case Op::Neg:
      case Op::Scale:
      case Op::Reshape: {
        const int in = node.inputs[0];
        if (!wants(in)) break;
        auto& g = grad_of(in);
        const Tensor& x = nodes[static_cast<std::size_t>(in)].val();
        for (std::size_t j = 0; j < dy.size(); ++j) {
          double local = 1.0;
          switch (node.op) {
            case Op::Sigmoid: local = y[j] * (1.0 - y[j]); break;
            case Op::Tanh: local = 1.0 - y[j] * y[j]; break;
            case Op::Exp: local = y[j]; break;
            case Op::Log: local = 1.0 / x[j]; break;
            case Op::Neg: local = -1.0; break;
            case Op::Scale: local = node.factor; break;
            default: break;
          }
          g[j] += dy[j] * local;
        }
        break;
      }
      case Op::Sum: {
        const int in = node.inputs[0];
        if (!wants(in)) break;
        auto& g = grad_of(in);
        for (double& v : g) v += dy[0];
        break;
      }
    }
  }

  Gradients out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto& node = nodes[i];
    if (node.op != Op::Leaf || !node.requires_grad) continue;
    const Shape& shape = node.val().shape();
    if (adj[i].empty()) {
      out.grads_.emplace(static_cast<int>(i), Tensor(shape));
    } else {
      out.grads_.emplace(static_cast<int>(i), Tensor(shape, std::move(adj[i])));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Named parameters
// ---------------------------------------------------------------------------

class ParameterSet {
 public:
  Tensor& add(const std::string& name, Tensor value) {
    value.set_requires_grad(true);
    auto [it, inserted] = params_.insert_or_assign(name, std::move(value));
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InputError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InputError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  bool operator==(const ParameterSet& other) const { return params_ == other.params_; }

 private:
  std::map<std::string, Tensor> params_;
};

using GradientMap = std::map<std::string, Tensor>;

// Binds a ParameterSet to one tape: each parameter becomes a leaf the first
// time it is requested, aliasing the set's storage.
class Binding {
 public:
  Binding(Tape& tape, const ParameterSet& params) : tape_(&tape), params_(&params) {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var v = tape_->reference(params_->at(name), true);
    bound_.emplace(name, v);
    return v;
  }

  bool has(const std::string& name) const { return params_->contains(name); }
  Tape& tape() const noexcept { return *tape_; }
  const ParameterSet& params() const noexcept { return *params_; }

  // Per-parameter gradients; parameters never touched get zeros.
  GradientMap gradients(const Gradients& grads) const {
    GradientMap out;
    for (const auto& [name, value] : *params_) {
      auto it = bound_.find(name);
      if (it != bound_.end() && grads.contains(it->second.id())) {
        out.emplace(name, grads.at(it->second.id()));
      } else {
        out.emplace(name, Tensor(value.shape()));
      }
    }
    return out;
  }

 private:
  Tape* tape_;
  const ParameterSet* params_;
  std::map<std::string, Var> bound_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

namespace detail {

inline void check_step(double h) {
  if (!(h >= 1e-7 && h <= 1e-4)) throw DomainError("grad_check step must lie in [1e-7, 1e-4]");
}

inline double scalar_of(const Var& v) {
  if (v.value().size() != 1) {
    throw DimensionError("grad_check needs a scalar function, got shape " + shape_str(v.shape()));
  }
  return v.item();
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

}  // namespace detail

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                         std::vector<Tensor>& inputs, double h) {
  detail::check_step(h);
  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.reference(t, true));
    return detail::scalar_of(f(tape, vars));
  };

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.reference(t, true));
    Var loss = f(tape, vars);
    detail::scalar_of(loss);
    Gradients g = backward(loss);
    for (const Var& v : vars) analytic.push_back(g[v]);
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + h;
      const double up = evaluate();
      inputs[i][j] = saved - h;
      const double down = evaluate();
      inputs[i][j] = saved;
      worst = std::max(worst, detail::relative_error(analytic[i][j], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

inline double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h) {
  std::vector<Tensor> inputs{x};
  return grad_check([&](Tape& tape, const std::vector<Var>& v) { return f(tape, v[0]); }, inputs, h);
}

// Gradient check over every scalar of a parameter set. `f` must rebuild the
// whole computation from the binding it receives.
inline double grad_check(const std::function<Var(Binding&)>& f, ParameterSet& params, double h) {
  detail::check_step(h);
  auto evaluate = [&]() {
    Tape tape;
    Binding bind(tape, params);
    return detail::scalar_of(f(bind));
  };

  GradientMap analytic;
  {
    Tape tape;
    Binding bind(tape, params);
    Var loss = f(bind);
    detail::scalar_of(loss);
    analytic = bind.gradients(backward(loss));
  }

  double worst = 0.0;
  for (auto& [name, tensor] : params) {
    const Tensor& g = analytic.at(name);
    for (std::size_t j = 0; j < tensor.size(); ++j) {
      const double saved = tensor[j];
      tensor[j] = saved + h;
      const double up = evaluate();
      tensor[j] = saved - h;
      const double down = evaluate();
      tensor[j] = saved;
      worst = std::max(worst, detail::relative_error(g[j], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

}  // namespace rhtd
