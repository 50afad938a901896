#pragma once

// Reverse-mode automatic differentiation on an explicit computation record
// (Wengert tape). The backward pass is itself recorded as forward nodes, so
// gradients returned with create_graph=true are ordinary tensors that can be
// differentiated again; second-order support needs no dedicated formulas.
//
// Records are single-threaded: one Tape per logical training thread, never
// shared. Detached tensors carry no graph handle and are freely shareable.

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tameta/common.hpp"

#if defined(__has_include)
#if __has_include(<cblas.h>)
#include <cblas.h>
#define TAMETA_HAS_CBLAS 1
#elif __has_include(<x86_64-linux-gnu/cblas.h>)
#include <x86_64-linux-gnu/cblas.h>
#define TAMETA_HAS_CBLAS 1
#endif
#endif

#ifdef TAMETA_HAS_CBLAS
extern "C" void openblas_set_num_threads(int);
#endif

namespace tameta {

using Shape = std::vector<long>;

inline long numel(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

// Rank-1 shapes are treated as a single row for matrix-view purposes.
inline long shape_rows(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
inline long shape_cols(const Shape& s) { return s.size() == 2 ? s[1] : (s.empty() ? 1 : s[0]); }

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

enum class OpKind : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div_op,
  matmul,
  transpose,
  relu,
  sigmoid,
  tanh_op,
  exp_op,
  log_op,
  pow_op,
  sum_all,
  row_sum,
  col_sum,
  reshape,
  slice_cols,
  concat_cols,
};

struct Node {
  OpKind op = OpKind::leaf;
  Shape shape;
  std::vector<double> value;
  std::array<int, 2> in{-1, -1};
  std::vector<int> in_many;  // concat_cols only
  double exponent = 0.0;     // pow_op only
  long c0 = 0, c1 = 0;       // slice_cols bounds
  bool requires_grad = false;
};

class Tape;

// Value-semantic handle to either a node on a Tape or a detached constant.
class Tensor {
 public:
  Tensor() = default;

  // Detached constant.
  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)),
        owned_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (numel(shape_) != static_cast<long>(owned_->size()))
      throw shape_error("Tensor: value count does not match shape " + shape_str(shape_));
    if (!all_finite(*owned_)) throw numeric_error("Tensor: non-finite constant values");
  }

  static Tensor scalar(double v) { return Tensor(Shape{1, 1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  long size() const { return numel(shape_); }
  long rows() const { return shape_rows(shape_); }
  long cols() const { return shape_cols(shape_); }
  bool defined() const { return owned_ != nullptr || tape_ != nullptr; }
  bool on_tape() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  inline std::span<const double> values() const;
  inline bool requires_grad() const;

  double item() const {
    if (size() != 1) throw shape_error("Tensor::item: tensor is not scalar");
    return values()[0];
  }

  std::vector<double> to_vector() const {
    auto v = values();
    return std::vector<double>(v.begin(), v.end());
  }

 private:
  friend class Tape;
  Tensor(Tape* tape, int node, Shape shape)
      : shape_(std::move(shape)), tape_(tape), node_(node) {}

  Shape shape_;
  std::shared_ptr<const std::vector<double>> owned_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Maps variables (identified by their tape node) to gradient tensors of
// identical shape.
class GradientMap {
 public:
  void set(const Tensor& var, Tensor grad) { entries_[var.node()] = std::move(grad); }

  const Tensor& at(const Tensor& var) const {
    auto it = entries_.find(var.node());
    if (it == entries_.end()) throw graph_error("GradientMap: no entry for variable");
    return it->second;
  }

  bool contains(const Tensor& var) const { return entries_.count(var.node()) != 0; }
  std::size_t size() const { return entries_.size(); }
  const std::map<int, Tensor>& entries() const { return entries_; }

 private:
  std::map<int, Tensor> entries_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(Shape shape, std::span<const double> values, bool requires_grad = true) {
    Node n;
    n.op = OpKind::leaf;
    n.shape = std::move(shape);
    n.value.assign(values.begin(), values.end());
    n.requires_grad = requires_grad && grad_enabled_;
    return wrap(push(std::move(n), "leaf"));
  }

  Tensor leaf(const Tensor& t, bool requires_grad = true) {
    return leaf(t.shape(), t.values(), requires_grad);
  }

  Tensor constant(Shape shape, std::span<const double> values) {
    return leaf(std::move(shape), values, false);
  }

  Tensor constant_scalar(double v) {
    double buf[1] = {v};
    return leaf(Shape{1, 1}, std::span<const double>(buf, 1), false);
  }

  Tensor zeros(Shape shape) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)), 0.0);
    return leaf(std::move(shape), v, false);
  }

  Tensor ones(Shape shape) {
    std::vector<double> v(static_cast<std::size_t>(numel(shape)), 1.0);
    return leaf(std::move(shape), v, false);
  }

  std::size_t size() const { return nodes_.size(); }

  std::span<const double> node_values(int id) const { return nodes_[id].value; }
  const Node& node(int id) const { return nodes_[id]; }

  // While false, newly created nodes never require grad; used by the
  // backward pass when the caller does not ask for a differentiable graph.
  class GradGuard {
   public:
    GradGuard(Tape& t, bool enabled) : tape_(t), prev_(t.grad_enabled_) {
      tape_.grad_enabled_ = enabled;
    }
    ~GradGuard() { tape_.grad_enabled_ = prev_; }

   private:
    Tape& tape_;
    bool prev_;
  };

  // Implementation surface used by the free-function ops; not part of the
  // public contract.
  int push(Node n, const char* opname) {
    if (!all_finite(n.value))
      throw numeric_error(std::string("non-finite values produced by op '") + opname + "'");
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Tensor wrap(int id) { return Tensor(this, id, nodes_[id].shape); }

  // Interns a detached tensor as a constant node so ops can reference it.
  int intern(const Tensor& t) {
    if (t.on_tape()) {
      if (t.tape() != this) throw graph_error("op combines tensors from different records");
      return t.node();
    }
    Node n;
    n.op = OpKind::leaf;
    n.shape = t.shape();
    auto v = t.values();
    n.value.assign(v.begin(), v.end());
    n.requires_grad = false;
    return push(std::move(n), "constant");
  }

  const Node& node_ref(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

inline std::span<const double> Tensor::values() const {
  if (tape_ != nullptr) return tape_->node_values(node_);
  if (!owned_) throw graph_error("Tensor::values: empty tensor");
  return *owned_;
}

inline bool Tensor::requires_grad() const {
  return tape_ != nullptr && tape_->node(node_).requires_grad;
}

namespace detail {

inline void check_same_tape(const Tensor& a, const Tensor& b) {
  if (a.on_tape() && b.on_tape() && a.tape() != b.tape())
    throw graph_error("op combines tensors from different records");
}

inline Tape* tape_of(const Tensor& a, const Tensor& b) {
  check_same_tape(a, b);
  Tape* t = a.on_tape() ? a.tape() : b.tape();
  if (t == nullptr) throw graph_error("op requires at least one tensor on a record");
  return t;
}

// Broadcast-compatible matrix views: equal shapes, scalar against anything,
// row vector [1 x n] against [m x n], or column vector [m x 1] against [m x n].
inline bool broadcast_ok(long ar, long ac, long br, long bc) {
  if (ar == br && ac == bc) return true;
  if (ar * ac == 1 || br * bc == 1) return true;
  if (ar == 1 && ac == bc) return true;
  if (br == 1 && bc == ac) return true;
  if (ac == 1 && ar == br) return true;
  if (bc == 1 && br == ar) return true;
  return false;
}

inline double fetch(std::span<const double> v, long r, long c, long vr, long vc) {
  if (vr * vc == 1) return v[0];
  long rr = (vr == 1) ? 0 : r;
  long cc = (vc == 1) ? 0 : c;
  return v[static_cast<std::size_t>(rr * vc + cc)];
}

}  // namespace detail

inline Tensor binary_op(OpKind op, const Tensor& a, const Tensor& b) {
  Tape* t = detail::tape_of(a, b);
  int ia = t->intern(a);
  int ib = t->intern(b);
  const Node& na = t->node_ref(ia);
  const Node& nb = t->node_ref(ib);
  long ar = shape_rows(na.shape), ac = shape_cols(na.shape);
  long br = shape_rows(nb.shape), bc = shape_cols(nb.shape);
  if (!detail::broadcast_ok(ar, ac, br, bc))
    throw shape_error("elementwise op: incompatible shapes " + shape_str(na.shape) + " and " +
                      shape_str(nb.shape));
  long rr = std::max(ar, br), rc = std::max(ac, bc);

  Node out;
  out.op = op;
  out.shape = (rr == 1 && na.shape.size() == 1 && nb.shape.size() == 1) ? Shape{rc} : Shape{rr, rc};
  out.in = {ia, ib};
  out.requires_grad = t->grad_enabled() && (na.requires_grad || nb.requires_grad);
  out.value.resize(static_cast<std::size_t>(rr * rc));
  std::span<const double> va = na.value, vb = nb.value;
  for (long r = 0; r < rr; ++r) {
    for (long c = 0; c < rc; ++c) {
      double x = detail::fetch(va, r, c, ar, ac);
      double y = detail::fetch(vb, r, c, br, bc);
      double z = 0.0;
      switch (op) {
        case OpKind::add: z = x + y; break;
        case OpKind::sub: z = x - y; break;
        case OpKind::mul: z = x * y; break;
        case OpKind::div_op: z = x / y; break;
        default: throw graph_error("binary_op: bad op");
      }
      out.value[static_cast<std::size_t>(r * rc + c)] = z;
    }
  }
  const char* names[] = {"add", "sub", "mul", "div"};
  int ni = op == OpKind::add ? 0 : op == OpKind::sub ? 1 : op == OpKind::mul ? 2 : 3;
  return t->wrap(t->push(std::move(out), names[ni]));
}

inline Tensor add(const Tensor& a, const Tensor& b) { return binary_op(OpKind::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(OpKind::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(OpKind::mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return binary_op(OpKind::div_op, a, b); }

inline Tensor unary_op(OpKind op, const Tensor& a, double exponent = 0.0) {
  if (!a.on_tape()) throw graph_error("op requires a tensor on a record");
  Tape* t = a.tape();
  int ia = a.node();
  const Node& na = t->node_ref(ia);

  Node out;
  out.op = op;
  out.shape = na.shape;
  out.in = {ia, -1};
  out.exponent = exponent;
  out.requires_grad = t->grad_enabled() && na.requires_grad;
  out.value.resize(na.value.size());
  const char* name = "unary";
  switch (op) {
    case OpKind::relu:
      name = "relu";
      for (std::size_t i = 0; i < na.value.size(); ++i)
        out.value[i] = na.value[i] > 0.0 ? na.value[i] : 0.0;
      break;
    case OpKind::sigmoid:
      name = "sigmoid";
      for (std::size_t i = 0; i < na.value.size(); ++i) {
        double x = na.value[i];
        out.value[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                : std::exp(x) / (1.0 + std::exp(x));
      }
      break;
    case OpKind::tanh_op:
      name = "tanh";
      for (std::size_t i = 0; i < na.value.size(); ++i) out.value[i] = std::tanh(na.value[i]);
      break;
    case OpKind::exp_op:
      name = "exp";
      for (std::size_t i = 0; i < na.value.size(); ++i) out.value[i] = std::exp(na.value[i]);
      break;
    case OpKind::log_op:
      name = "log";
      for (std::size_t i = 0; i < na.value.size(); ++i) out.value[i] = std::log(na.value[i]);
      break;
    case OpKind::pow_op:
      name = "pow";
      for (std::size_t i = 0; i < na.value.size(); ++i)
        out.value[i] = std::pow(na.value[i], exponent);
      break;
    default: throw graph_error("unary_op: bad op");
  }
  return t->wrap(t->push(std::move(out), name));
}

inline Tensor relu(const Tensor& a) { return unary_op(OpKind::relu, a); }
inline Tensor sigmoid(const Tensor& a) { return unary_op(OpKind::sigmoid, a); }
inline Tensor tanh(const Tensor& a) { return unary_op(OpKind::tanh_op, a); }
inline Tensor exp(const Tensor& a) { return unary_op(OpKind::exp_op, a); }
inline Tensor log(const Tensor& a) { return unary_op(OpKind::log_op, a); }
inline Tensor pow(const Tensor& a, double p) { return unary_op(OpKind::pow_op, a, p); }

namespace detail {

#ifdef TAMETA_HAS_CBLAS
inline void blas_single_thread_once() {
  static const bool done = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}
#endif

inline void matmul_values(const double* a, const double* b, double* c, long m, long k, long n) {
#ifdef TAMETA_HAS_CBLAS
  blas_single_thread_once();
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), 1.0, a, static_cast<int>(k), b,
              static_cast<int>(n), 0.0, c, static_cast<int>(n));
#else
  for (long i = 0; i < m * n; ++i) c[i] = 0.0;
  for (long i = 0; i < m; ++i) {
    for (long l = 0; l < k; ++l) {
      double av = a[i * k + l];
      const double* brow = b + l * n;
      double* crow = c + i * n;
      for (long j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
#endif
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape* t = detail::tape_of(a, b);
  int ia = t->intern(a);
  int ib = t->intern(b);
  const Node& na = t->node_ref(ia);
  const Node& nb = t->node_ref(ib);
  if (na.shape.size() != 2 || nb.shape.size() != 2)
    throw shape_error("matmul: operands must be rank-2");
  long m = na.shape[0], k = na.shape[1], k2 = nb.shape[0], n = nb.shape[1];
  if (k != k2)
    throw shape_error("matmul: inner dimensions differ " + shape_str(na.shape) + " @ " +
                      shape_str(nb.shape));
  Node out;
  out.op = OpKind::matmul;
  out.shape = {m, n};
  out.in = {ia, ib};
  out.requires_grad = t->grad_enabled() && (na.requires_grad || nb.requires_grad);
  out.value.resize(static_cast<std::size_t>(m * n));
  detail::matmul_values(na.value.data(), nb.value.data(), out.value.data(), m, k, n);
  return t->wrap(t->push(std::move(out), "matmul"));
}

inline Tensor transpose(const Tensor& a) {
  if (!a.on_tape()) throw graph_error("transpose requires a tensor on a record");
  Tape* t = a.tape();
  const Node& na = t->node_ref(a.node());
  if (na.shape.size() != 2) throw shape_error("transpose: operand must be rank-2");
  long m = na.shape[0], n = na.shape[1];
  Node out;
  out.op = OpKind::transpose;
  out.shape = {n, m};
  out.in = {a.node(), -1};
  out.requires_grad = t->grad_enabled() && na.requires_grad;
  out.value.resize(na.value.size());
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < n; ++j)
      out.value[static_cast<std::size_t>(j * m + i)] = na.value[static_cast<std::size_t>(i * n + j)];
  return t->wrap(t->push(std::move(out), "transpose"));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (!a.on_tape()) throw graph_error("reshape requires a tensor on a record");
  Tape* t = a.tape();
  const Node& na = t->node_ref(a.node());
  if (numel(shape) != numel(na.shape))
    throw shape_error("reshape: element count mismatch " + shape_str(na.shape) + " -> " +
                      shape_str(shape));
  Node out;
  out.op = OpKind::reshape;
  out.shape = std::move(shape);
  out.in = {a.node(), -1};
  out.requires_grad = t->grad_enabled() && na.requires_grad;
  out.value = na.value;
  return t->wrap(t->push(std::move(out), "reshape"));
}

inline Tensor slice_cols(const Tensor& a, long c0, long c1) {
  if (!a.on_tape()) throw graph_error("slice requires a tensor on a record");
  Tape* t = a.tape();
  const Node& na = t->node_ref(a.node());
  long m = shape_rows(na.shape), n = shape_cols(na.shape);
  if (c0 < 0 || c1 > n || c0 >= c1) throw shape_error("slice_cols: bad range");
  Node out;
  out.op = OpKind::slice_cols;
  out.shape = {m, c1 - c0};
  out.in = {a.node(), -1};
  out.c0 = c0;
  out.c1 = c1;
  out.requires_grad = t->grad_enabled() && na.requires_grad;
  out.value.resize(static_cast<std::size_t>(m * (c1 - c0)));
  for (long r = 0; r < m; ++r)
    for (long c = c0; c < c1; ++c)
      out.value[static_cast<std::size_t>(r * (c1 - c0) + (c - c0))] =
          na.value[static_cast<std::size_t>(r * n + c)];
  return t->wrap(t->push(std::move(out), "slice_cols"));
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw shape_error("concat_cols: no inputs");
  Tape* t = nullptr;
  for (const Tensor& p : parts)
    if (p.on_tape()) {
      if (t != nullptr && p.tape() != t)
        throw graph_error("op combines tensors from different records");
      t = p.tape();
    }
  if (t == nullptr) throw graph_error("concat_cols requires a tensor on a record");

  Node out;
  out.op = OpKind::concat_cols;
  long m = -1, n = 0;
  bool rg = false;
  for (const Tensor& p : parts) {
    int id = t->intern(p);
    const Node& np = t->node_ref(id);
    long pr = shape_rows(np.shape);
    if (m == -1) m = pr;
    if (pr != m) throw shape_error("concat_cols: row mismatch");
    n += shape_cols(np.shape);
    rg = rg || np.requires_grad;
    out.in_many.push_back(id);
  }
  out.shape = {m, n};
  out.requires_grad = t->grad_enabled() && rg;
  out.value.resize(static_cast<std::size_t>(m * n));
  long off = 0;
  for (int id : out.in_many) {
    const Node& np = t->node_ref(id);
    long pc = shape_cols(np.shape);
    for (long r = 0; r < m; ++r)
      for (long c = 0; c < pc; ++c)
        out.value[static_cast<std::size_t>(r * n + off + c)] =
            np.value[static_cast<std::size_t>(r * pc + c)];
    off += pc;
  }
  return t->wrap(t->push(std::move(out), "concat_cols"));
}

inline Tensor concat_cols(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return concat_cols(std::span<const Tensor>(v));
}

namespace detail {

inline Tensor reduce_op(OpKind op, const Tensor& a) {
  Tape* t = a.tape();
  if (t == nullptr) throw graph_error("reduction requires a tensor on a record");
  const Node& na = t->node_ref(a.node());
  long m = shape_rows(na.shape), n = shape_cols(na.shape);
  Node out;
  out.op = op;
  out.in = {a.node(), -1};
  out.requires_grad = t->grad_enabled() && na.requires_grad;
  const char* name = "reduce";
  if (op == OpKind::sum_all) {
    name = "sum";
    out.shape = {1, 1};
    double s = 0.0;
    for (double x : na.value) s += x;
    out.value.assign(1, s);
  } else if (op == OpKind::row_sum) {
    name = "row_sum";
    out.shape = {m, 1};
    out.value.assign(static_cast<std::size_t>(m), 0.0);
    for (long r = 0; r < m; ++r) {
      double s = 0.0;
      for (long c = 0; c < n; ++c) s += na.value[static_cast<std::size_t>(r * n + c)];
      out.value[static_cast<std::size_t>(r)] = s;
    }
  } else {
    name = "col_sum";
    out.shape = {1, n};
    out.value.assign(static_cast<std::size_t>(n), 0.0);
    for (long r = 0; r < m; ++r)
      for (long c = 0; c < n; ++c)
        out.value[static_cast<std::size_t>(c)] += na.value[static_cast<std::size_t>(r * n + c)];
  }
  return t->wrap(t->push(std::move(out), name));
}

}  // namespace detail

inline Tensor sum(const Tensor& a) { return detail::reduce_op(OpKind::sum_all, a); }
inline Tensor row_sum(const Tensor& a) { return detail::reduce_op(OpKind::row_sum, a); }
inline Tensor col_sum(const Tensor& a) { return detail::reduce_op(OpKind::col_sum, a); }

// --- composite ops -----------------------------------------------------

inline Tensor scale(const Tensor& a, double c) {
  if (!a.on_tape()) throw graph_error("scale requires a tensor on a record");
  return mul(a, a.tape()->constant_scalar(c));
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Tensor square(const Tensor& a) { return mul(a, a); }

inline Tensor l2_norm(const Tensor& a) { return pow(sum(square(a)), 0.5); }

// Returns a tensor with identical values that contributes zero gradient to
// anything upstream. If the input lives on a record the result is a fresh
// constant leaf on the same record (so it can keep participating in ops);
// otherwise it is a plain detached copy.
inline Tensor detach(const Tensor& a) {
  auto v = a.values();
  if (a.on_tape()) return a.tape()->constant(a.shape(), v);
  return Tensor(a.shape(), std::vector<double>(v.begin(), v.end()));
}

// Detached copy with no graph handle at all; shareable across records.
inline Tensor detach_off_tape(const Tensor& a) {
  auto v = a.values();
  return Tensor(a.shape(), std::vector<double>(v.begin(), v.end()));
}

// Row-wise softmax, stabilized by subtracting the (detached) row max.
// Subtracting a constant leaves both the value and all derivatives exact.
inline Tensor softmax(const Tensor& a) {
  Tape* t = a.tape();
  if (t == nullptr) throw graph_error("softmax requires a tensor on a record");
  long m = a.rows(), n = a.cols();
  auto va = a.values();
  std::vector<double> mx(static_cast<std::size_t>(m));
  for (long r = 0; r < m; ++r) {
    double best = va[static_cast<std::size_t>(r * n)];
    for (long c = 1; c < n; ++c)
      best = std::max(best, va[static_cast<std::size_t>(r * n + c)]);
    mx[static_cast<std::size_t>(r)] = best;
  }
  Tensor shifted = sub(a, t->constant(Shape{m, 1}, mx));
  Tensor e = exp(shifted);
  return div(e, row_sum(e));
}

inline Tensor log_softmax(const Tensor& a) {
  Tape* t = a.tape();
  if (t == nullptr) throw graph_error("log_softmax requires a tensor on a record");
  long m = a.rows(), n = a.cols();
  auto va = a.values();
  std::vector<double> mx(static_cast<std::size_t>(m));
  for (long r = 0; r < m; ++r) {
    double best = va[static_cast<std::size_t>(r * n)];
    for (long c = 1; c < n; ++c)
      best = std::max(best, va[static_cast<std::size_t>(r * n + c)]);
    mx[static_cast<std::size_t>(r)] = best;
  }
  Tensor shifted = sub(a, t->constant(Shape{m, 1}, mx));
  return sub(shifted, log(row_sum(exp(shifted))));
}

// Mean cross-entropy between logits and one-hot targets.
inline Tensor cross_entropy(const Tensor& logits, const Tensor& onehot_targets) {
  if (logits.rows() != onehot_targets.rows() || logits.cols() != onehot_targets.cols())
    throw shape_error("cross_entropy: logits/targets shape mismatch");
  Tensor lsm = log_softmax(logits);
  return scale(sum(mul(onehot_targets, lsm)), -1.0 / static_cast<double>(logits.rows()));
}

inline Tensor mse(const Tensor& pred, const Tensor& target) {
  Tensor d = sub(pred, target);
  return mean(square(d));
}

// --- gradients ----------------------------------------------------------

// Reverse-mode gradients of a scalar output with respect to `wrt` tensors.
// With create_graph=true the returned tensors stay on the record and are
// differentiable; otherwise they are detached constants.
inline GradientMap gradient(const Tensor& output, std::span<const Tensor> wrt,
                            bool create_graph = false) {
  if (output.size() != 1) throw graph_error("gradient: output must be scalar");
  Tape* t = output.tape();
  if (t == nullptr) throw graph_error("gradient: output is not on a record");
  for (const Tensor& w : wrt) {
    if (!w.on_tape() || w.tape() != t)
      throw graph_error("gradient: wrt tensor does not participate in the output's record");
  }

  const int out_id = output.node();

  // Mark ancestors of the output that can influence it.
  std::vector<char> reach(static_cast<std::size_t>(out_id) + 1, 0);
  reach[static_cast<std::size_t>(out_id)] = 1;
  for (int i = out_id; i >= 0; --i) {
    if (!reach[static_cast<std::size_t>(i)]) continue;
    const Node& n = t->node_ref(i);
    if (!n.requires_grad) continue;
    for (int in : n.in)
      if (in >= 0 && t->node_ref(in).requires_grad)
        reach[static_cast<std::size_t>(in)] = 1;
    for (int in : n.in_many)
      if (t->node_ref(in).requires_grad)
        reach[static_cast<std::size_t>(in)] = 1;
  }

  Tape::GradGuard guard(*t, create_graph);

  // Adjoints, stored as node handles; -1 means "no contribution yet".
  std::vector<Tensor> adj(static_cast<std::size_t>(out_id) + 1);
  adj[static_cast<std::size_t>(out_id)] = t->constant_scalar(1.0);

  auto tensor_of = [&](int id) { return t->wrap(id); };

  auto accumulate = [&](int id, const Tensor& contrib) {
    if (id < 0 || id > out_id) return;
    if (!reach[static_cast<std::size_t>(id)]) return;
    if (!t->node_ref(id).requires_grad) return;
    // Reduce broadcasted contributions back to the operand's shape.
    const Shape tshape = t->node_ref(id).shape;
    long tr = shape_rows(tshape), tc = shape_cols(tshape);
    Tensor g = contrib;
    long gr = g.rows(), gc = g.cols();
    if (gr != tr || gc != tc) {
      if (tr == 1 && tc == 1) {
        g = sum(g);
      } else if (tr == 1 && tc == gc) {
        g = col_sum(g);
      } else if (tc == 1 && tr == gr) {
        g = row_sum(g);
      } else {
        throw graph_error("gradient: cannot reduce adjoint to operand shape");
      }
    }
    if (g.shape() != tshape) g = reshape(g, tshape);
    Tensor& slot = adj[static_cast<std::size_t>(id)];
    slot = slot.defined() ? add(slot, g) : g;
  };

  // Light copy of node metadata; nodes_ may reallocate while adjoint nodes
  // are appended, so references into it cannot be held across op calls.
  struct NodeMeta {
    OpKind op;
    std::array<int, 2> in;
    std::vector<int> in_many;
    double exponent;
    long c0, c1;
    bool requires_grad;
  };

  for (int i = out_id; i >= 0; --i) {
    if (!reach[static_cast<std::size_t>(i)]) continue;
    if (!adj[static_cast<std::size_t>(i)].defined()) continue;
    NodeMeta n;
    {
      const Node& src = t->node_ref(i);
      n = NodeMeta{src.op, src.in, src.in_many, src.exponent, src.c0, src.c1, src.requires_grad};
    }
    if (!n.requires_grad) continue;
    Tensor g = adj[static_cast<std::size_t>(i)];
    switch (n.op) {
      case OpKind::leaf:
        break;
      case OpKind::add:
        accumulate(n.in[0], g);
        accumulate(n.in[1], g);
        break;
      case OpKind::sub:
        accumulate(n.in[0], g);
        accumulate(n.in[1], neg(g));
        break;
      case OpKind::mul:
        accumulate(n.in[0], mul(g, tensor_of(n.in[1])));
        accumulate(n.in[1], mul(g, tensor_of(n.in[0])));
        break;
      case OpKind::div_op: {
        Tensor b = tensor_of(n.in[1]);
        accumulate(n.in[0], div(g, b));
        accumulate(n.in[1], neg(mul(g, div(tensor_of(i), b))));
        break;
      }
      case OpKind::matmul: {
        Tensor a = tensor_of(n.in[0]);
        Tensor b = tensor_of(n.in[1]);
        if (t->node_ref(n.in[0]).requires_grad)
          accumulate(n.in[0], matmul(g, transpose(b)));
        if (t->node_ref(n.in[1]).requires_grad)
          accumulate(n.in[1], matmul(transpose(a), g));
        break;
      }
      case OpKind::transpose:
        accumulate(n.in[0], transpose(g));
        break;
      case OpKind::relu: {
        const Node& in = t->node_ref(n.in[0]);
        std::vector<double> mask(in.value.size());
        for (std::size_t j = 0; j < in.value.size(); ++j)
          mask[j] = in.value[j] > 0.0 ? 1.0 : 0.0;
        accumulate(n.in[0], mul(g, t->constant(in.shape, mask)));
        break;
      }
      case OpKind::sigmoid: {
        Tensor y = tensor_of(i);
        accumulate(n.in[0], mul(g, mul(y, sub(t->constant_scalar(1.0), y))));
        break;
      }
      case OpKind::tanh_op: {
        Tensor y = tensor_of(i);
        accumulate(n.in[0], mul(g, sub(t->constant_scalar(1.0), mul(y, y))));
        break;
      }
      case OpKind::exp_op:
        accumulate(n.in[0], mul(g, tensor_of(i)));
        break;
      case OpKind::log_op:
        accumulate(n.in[0], div(g, tensor_of(n.in[0])));
        break;
      case OpKind::pow_op:
        accumulate(n.in[0],
                   mul(g, scale(pow(tensor_of(n.in[0]), n.exponent - 1.0), n.exponent)));
        break;
      case OpKind::sum_all:
      case OpKind::row_sum:
      case OpKind::col_sum: {
        const Node& in = t->node_ref(n.in[0]);
        accumulate(n.in[0], mul(g, t->ones(in.shape)));
        break;
      }
      case OpKind::reshape: {
        const Node& in = t->node_ref(n.in[0]);
        accumulate(n.in[0], reshape(g, in.shape));
        break;
      }
      case OpKind::slice_cols: {
        const Node& in = t->node_ref(n.in[0]);
        long m = shape_rows(in.shape), w = shape_cols(in.shape);
        std::vector<Tensor> parts;
        if (n.c0 > 0) parts.push_back(t->zeros(Shape{m, n.c0}));
        parts.push_back(g);
        if (n.c1 < w) parts.push_back(t->zeros(Shape{m, w - n.c1}));
        Tensor padded = parts.size() == 1 ? g : concat_cols(std::span<const Tensor>(parts));
        accumulate(n.in[0], padded);
        break;
      }
      case OpKind::concat_cols: {
        long off = 0;
        for (int id : n.in_many) {
          const Node& in = t->node_ref(id);
          long w = shape_cols(in.shape);
          if (in.requires_grad) accumulate(id, slice_cols(g, off, off + w));
          off += w;
        }
        break;
      }
    }
  }

  GradientMap result;
  for (const Tensor& w : wrt) {
    Tensor g;
    int id = w.node();
    if (id <= out_id && adj[static_cast<std::size_t>(id)].defined()) {
      g = adj[static_cast<std::size_t>(id)];
    } else {
      std::vector<double> z(static_cast<std::size_t>(w.size()), 0.0);
      g = create_graph ? t->constant(w.shape(), z) : Tensor(w.shape(), std::move(z));
    }
    if (!create_graph && g.on_tape()) g = detach(g);
    if (!all_finite(g.to_vector())) throw numeric_error("gradient: non-finite gradient values");
    result.set(w, std::move(g));
  }
  return result;
}

inline GradientMap gradient(const Tensor& output, std::initializer_list<Tensor> wrt,
                            bool create_graph = false) {
  std::vector<Tensor> v(wrt);
  return gradient(output, std::span<const Tensor>(v), create_graph);
}

// Central-difference gradient oracle: (f(x+eps*e_i) - f(x-eps*e_i)) / (2 eps)
// per coordinate. Verification tool, fully independent of the reverse-mode
// path above.
inline Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                         const Tensor& point, double epsilon) {
  if (epsilon <= 0.0) throw error("finite_difference_gradient: epsilon must be positive");
  std::vector<double> base = point.to_vector();
  std::vector<double> grad(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> hi = base, lo = base;
    hi[i] += epsilon;
    lo[i] -= epsilon;
    double fp = f(Tensor(point.shape(), hi));
    double fm = f(Tensor(point.shape(), lo));
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw numeric_error("finite_difference_gradient: non-finite function value");
    grad[i] = (fp - fm) / (2.0 * epsilon);
  }
  return Tensor(point.shape(), std::move(grad));
}

}  // namespace tameta
