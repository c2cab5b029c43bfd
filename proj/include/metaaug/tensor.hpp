#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace metaaug {

class TensorError : public std::runtime_error {
 public:
  explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

/// Tensor shape, rank <= 4. Rank 0 denotes a scalar (numel 1).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims) {
    if (dims.size() > kMaxRank) throw TensorError("shape: rank > 4");
    for (int d : dims) dims_[rank_++] = d;
  }

  int rank() const { return rank_; }
  int operator[](int i) const { return dims_[i]; }

  long long numel() const {
    long long n = 1;
    for (int i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i) {
      if (dims_[i] != o.dims_[i]) return false;
    }
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "[";
    for (int i = 0; i < rank_; ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + "]";
  }

 private:
  static constexpr int kMaxRank = 4;
  std::array<int, kMaxRank> dims_{};
  int rank_ = 0;
};

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  // Bookkeeping for the tape that currently knows this tensor.
  std::uint64_t tape_uid = 0;
  int node = -1;
};

}  // namespace detail

class Tape;

/// Dense 64-bit float tensor with value semantics (copies share storage).
/// A tensor participates in autodiff only while a tape is recording.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s) {
    return Tensor(std::make_shared<detail::TensorData>(
        detail::TensorData{s, std::vector<double>(s.numel(), 0.0)}));
  }

  static Tensor full(Shape s, double v) {
    return Tensor(std::make_shared<detail::TensorData>(
        detail::TensorData{s, std::vector<double>(s.numel(), v)}));
  }

  static Tensor from(Shape s, std::vector<double> vals) {
    if (static_cast<long long>(vals.size()) != s.numel()) {
      throw TensorError("tensor: data length " + std::to_string(vals.size()) +
                        " does not match shape " + s.str());
    }
    return Tensor(std::make_shared<detail::TensorData>(
        detail::TensorData{s, std::move(vals)}));
  }

  static Tensor scalar(double v) { return full(Shape{}, v); }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  long long numel() const { return d_->shape.numel(); }

  std::span<const double> data() const { return d_->values; }

  /// Writable view. Only valid before the tensor enters any computation.
  std::span<double> mutable_data() { return d_->values; }

  double item() const {
    if (numel() != 1) {
      throw TensorError("item: tensor " + shape().str() + " is not a scalar");
    }
    return d_->values[0];
  }

  double at(int i, int j) const {
    return d_->values[static_cast<size_t>(i) * shape()[1] + j];
  }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    d_->requires_grad = b;
    return *this;
  }

  /// Same values, no grad participation, fresh storage.
  Tensor detach() const {
    Tensor t = from(d_->shape, d_->values);
    return t;
  }

  /// Reinterpret the buffer under a new shape with equal numel.
  Tensor reshaped(Shape s) const {
    if (s.numel() != numel()) {
      throw TensorError("reshape: " + shape().str() + " -> " + s.str());
    }
    Tensor t = from(s, d_->values);
    return t;
  }

  detail::TensorData* impl() const { return d_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<detail::TensorData> d_;

  friend class Tape;
};

enum class OpKind {
  leaf,
  add,
  mul,
  matmul,
  relu,
  tanh_act,
  square,
  exp_fn,
  log_fn,
  sum_red,
  mean_red,
  broadcast,
  concat,
  gather,
  slice,
  softmax_xent,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::relu: return "relu";
    case OpKind::tanh_act: return "tanh";
    case OpKind::square: return "square";
    case OpKind::exp_fn: return "exp";
    case OpKind::log_fn: return "log";
    case OpKind::sum_red: return "sum";
    case OpKind::mean_red: return "mean";
    case OpKind::broadcast: return "broadcast";
    case OpKind::concat: return "concat";
    case OpKind::gather: return "gather";
    case OpKind::slice: return "slice";
    case OpKind::softmax_xent: return "softmax-cross-entropy";
  }
  return "?";
}

struct Node {
  OpKind op = OpKind::leaf;
  int in0 = -1, in1 = -1;  // node ids of inputs; -1 for constants
  Tensor a, b;             // input tensors (kept for vjp math)
  Tensor out;
  // op payload
  int axis = -1;        // sum/mean (-1: all), concat axis
  bool ta = false, tb = false;            // matmul transposes
  int rep_axis = -1;                      // broadcast: replicated axis (-1: scalar fill)
  int split = 0;                          // concat: numel/extent of `a` along axis
  int slice_start = 0, slice_len = 0;     // slice payload
  std::shared_ptr<std::vector<int>> indices;  // gather rows / xent labels
};

/// Recording tape. Nodes are appended in execution order; backward walks
/// them in reverse. A backward pass run while recording is itself recorded,
/// which is what makes gradients-of-gradients work.
class Tape {
 public:
  Tape() : uid_(++counter_) {}

  std::uint64_t uid() const { return uid_; }
  int size() const { return static_cast<int>(nodes_.size()); }
  const Node& node(int i) const { return nodes_[i]; }

  int append(Node n) {
    const int id = size();
    if (n.out.defined()) {
      n.out.impl()->tape_uid = uid_;
      n.out.impl()->node = id;
    }
    nodes_.push_back(std::move(n));
    return id;
  }

  /// Node id of `t` on this tape; registers a leaf for grad-requiring
  /// tensors seen for the first time. Constants stay off the tape.
  int ensure(const Tensor& t) {
    auto* impl = t.impl();
    if (impl->tape_uid == uid_) return impl->node;
    if (!impl->requires_grad) return -1;
    Node leaf;
    leaf.op = OpKind::leaf;
    leaf.out = t;
    return append(std::move(leaf));
  }

  int lookup(const Tensor& t) const {
    auto* impl = t.impl();
    return impl->tape_uid == uid_ ? impl->node : -1;
  }

  void clear() { nodes_.clear(); }
  void reserve(size_t n) { nodes_.reserve(n); }

 private:
  std::vector<Node> nodes_;
  std::uint64_t uid_;
  static inline std::uint64_t counter_ = 0;
};

namespace detail {

inline thread_local std::vector<Tape*> g_tape_stack;

inline Tape* current_tape() {
  return g_tape_stack.empty() ? nullptr : g_tape_stack.back();
}

}  // namespace detail

/// RAII: makes a tape the innermost recorder for its scope.
class TapeScope {
 public:
  TapeScope() { detail::g_tape_stack.push_back(&tape_); }
  ~TapeScope() { detail::g_tape_stack.pop_back(); }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
};

/// RAII: suspends recording for its scope.
class NoGradScope {
 public:
  NoGradScope() { detail::g_tape_stack.push_back(nullptr); }
  ~NoGradScope() { detail::g_tape_stack.pop_back(); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
};

namespace detail {

/// Sum of a scratch buffer in ascending value order. Reductions done this
/// way are bitwise invariant under permutations of their inputs, which the
/// aggregation steps of the nearest-neighbor learners rely on.
inline double ordered_sum(std::vector<double>& scratch) {
  std::sort(scratch.begin(), scratch.end());
  double acc = 0.0;
  for (double v : scratch) acc += v;
  return acc;
}

inline Tensor record_unary(OpKind op, const Tensor& x, Tensor out) {
  Tape* t = current_tape();
  if (!t) return out;
  const int ix = t->ensure(x);
  if (ix < 0) return out;
  out.impl()->requires_grad = true;
  Node n;
  n.op = op;
  n.in0 = ix;
  n.a = x;
  n.out = out;
  t->append(std::move(n));
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations. Each computes its forward value eagerly and records
// a node on the innermost active tape when any input participates in grad.
// ---------------------------------------------------------------------------

namespace ops {

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string("add: incompatible shapes ") +
                      a.shape().str() + " and " + b.shape().str());
  }
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.mutable_data();
  auto pa = a.data(), pb = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = pa[i] + pb[i];

  Tape* t = detail::current_tape();
  if (!t) return out;
  const int ia = t->ensure(a), ib = t->ensure(b);
  if (ia < 0 && ib < 0) return out;
  out.impl()->requires_grad = true;
  Node n;
  n.op = OpKind::add;
  n.in0 = ia;
  n.in1 = ib;
  n.a = a;
  n.b = b;
  n.out = out;
  t->append(std::move(n));
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string("mul: incompatible shapes ") +
                      a.shape().str() + " and " + b.shape().str());
  }
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.mutable_data();
  auto pa = a.data(), pb = b.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = pa[i] * pb[i];

  Tape* t = detail::current_tape();
  if (!t) return out;
  const int ia = t->ensure(a), ib = t->ensure(b);
  if (ia < 0 && ib < 0) return out;
  out.impl()->requires_grad = true;
  Node n;
  n.op = OpKind::mul;
  n.in0 = ia;
  n.in1 = ib;
  n.a = a;
  n.b = b;
  n.out = out;
  t->append(std::move(n));
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false,
                     bool tb = false) {
  if (a.shape().rank() != 2 || b.shape().rank() != 2) {
    throw TensorError(std::string("matmul: incompatible shapes ") +
                      a.shape().str() + " and " + b.shape().str());
  }
  const int am = ta ? a.shape()[1] : a.shape()[0];
  const int ak = ta ? a.shape()[0] : a.shape()[1];
  const int bk = tb ? b.shape()[1] : b.shape()[0];
  const int bn = tb ? b.shape()[0] : b.shape()[1];
  if (ak != bk) {
    throw TensorError(std::string("matmul: incompatible shapes ") +
                      a.shape().str() + " and " + b.shape().str());
  }
  Tensor out = Tensor::zeros(Shape{am, bn});
  auto o = out.mutable_data();
  auto pa = a.data(), pb = b.data();
  const int lda = a.shape()[1], ldb = b.shape()[1];
  // Accumulate row-wise with a j-contiguous inner loop where possible.
  if (!ta && !tb) {
    for (int i = 0; i < am; ++i) {
      for (int k = 0; k < ak; ++k) {
        const double av = pa[i * lda + k];
        if (av == 0.0) continue;
        const double* bp = &pb[k * ldb];
        double* op = &o[i * static_cast<size_t>(bn)];
        for (int j = 0; j < bn; ++j) op[j] += av * bp[j];
      }
    }
  } else {
    for (int i = 0; i < am; ++i) {
      for (int k = 0; k < ak; ++k) {
        const double av = ta ? pa[k * lda + i] : pa[i * lda + k];
        if (av == 0.0) continue;
        for (int j = 0; j < bn; ++j) {
          const double bv = tb ? pb[j * ldb + k] : pb[k * ldb + j];
          o[i * static_cast<size_t>(bn) + j] += av * bv;
        }
      }
    }
  }

  Tape* t = detail::current_tape();
  if (!t) return out;
  const int ia = t->ensure(a), ib = t->ensure(b);
  if (ia < 0 && ib < 0) return out;
  out.impl()->requires_grad = true;
  Node n;
  n.op = OpKind::matmul;
  n.in0 = ia;
  n.in1 = ib;
  n.a = a;
  n.b = b;
  n.ta = ta;
  n.tb = tb;
  n.out = out;
  t->append(std::move(n));
  return out;
}

inline Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  auto p = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = p[i] > 0.0 ? p[i] : 0.0;
  return detail::record_unary(OpKind::relu, x, std::move(out));
}

inline Tensor tanh(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  auto p = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(p[i]);
  return detail::record_unary(OpKind::tanh_act, x, std::move(out));
}

inline Tensor square(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  auto p = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = p[i] * p[i];
  return detail::record_unary(OpKind::square, x, std::move(out));
}

inline Tensor exp(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  auto p = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = std::exp(p[i]);
  return detail::record_unary(OpKind::exp_fn, x, std::move(out));
}

inline Tensor log(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  auto p = x.data();
  for (size_t i = 0; i < o.size(); ++i) o[i] = std::log(p[i]);
  return detail::record_unary(OpKind::log_fn, x, std::move(out));
}

namespace reduce_detail {

inline Tensor reduce(const Tensor& x, int axis, bool take_mean, OpKind kind) {
  const Shape& s = x.shape();
  if (axis != -1 && (s.rank() != 2 || (axis != 0 && axis != 1))) {
    throw TensorError(std::string(op_name(kind)) + ": axis " +
                      std::to_string(axis) + " invalid for shape " + s.str());
  }
  Tensor out;
  auto p = x.data();
  std::vector<double> scratch;
  if (axis == -1) {
    scratch.assign(p.begin(), p.end());
    double v = detail::ordered_sum(scratch);
    if (take_mean) v /= static_cast<double>(p.size());
    out = Tensor::scalar(v);
  } else if (axis == 0) {
    const int m = s[0], n = s[1];
    out = Tensor::zeros(Shape{n});
    auto o = out.mutable_data();
    scratch.resize(m);
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < m; ++i) scratch[i] = p[i * static_cast<size_t>(n) + j];
      double v = detail::ordered_sum(scratch);
      if (take_mean) v /= m;
      o[j] = v;
    }
  } else {
    const int m = s[0], n = s[1];
    out = Tensor::zeros(Shape{m});
    auto o = out.mutable_data();
    scratch.resize(n);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) scratch[j] = p[i * static_cast<size_t>(n) + j];
      double v = detail::ordered_sum(scratch);
      if (take_mean) v /= n;
      o[i] = v;
    }
  }

  Tape* t = detail::current_tape();
  if (!t) return out;
  const int ix = t->ensure(x);
  if (ix < 0) return out;
  out.impl()->requires_grad = true;
  Node nd;
  nd.op = kind;
  nd.in0 = ix;
  nd.a = x;
  nd.axis = axis;
  nd.out = out;
  t->append(std::move(nd));
  return out;
}

}  // namespace reduce_detail

/// Sum over all elements (axis -1) or one axis of a rank-2 tensor.
inline Tensor sum(const Tensor& x, int axis = -1) {
  return reduce_detail::reduce(x, axis, false, OpKind::sum_red);
}

inline Tensor mean(const Tensor& x, int axis = -1) {
  return reduce_detail::reduce(x, axis, true, OpKind::mean_red);
}

/// Replicates `x` into `target`. rep_axis -1: x is scalar, fill everywhere.
/// rep_axis 0: x is [n] (or [1,n]), rows copied down a [m,n] target.
/// rep_axis 1: x is [m] (or [m,1]), columns copied across a [m,n] target.
inline Tensor broadcast(const Tensor& x, Shape target, int rep_axis) {
  Tensor out = Tensor::zeros(target);
  auto o = out.mutable_data();
  auto p = x.data();
  bool ok = true;
  if (rep_axis == -1) {
    ok = x.numel() == 1;
    if (ok) std::fill(o.begin(), o.end(), p[0]);
  } else if (rep_axis == 0) {
    ok = target.rank() == 2 && x.numel() == target[1];
    if (ok) {
      const int m = target[0], n = target[1];
      for (int i = 0; i < m; ++i) {
        std::copy(p.begin(), p.end(), o.begin() + i * static_cast<size_t>(n));
      }
    }
  } else if (rep_axis == 1) {
    ok = target.rank() == 2 && x.numel() == target[0];
    if (ok) {
      const int m = target[0], n = target[1];
      for (int i = 0; i < m; ++i) {
        std::fill(o.begin() + i * static_cast<size_t>(n),
                  o.begin() + (i + 1) * static_cast<size_t>(n), p[i]);
      }
    }
  } else {
    ok = false;
  }
  if (!ok) {
    throw TensorError("broadcast: cannot replicate " + x.shape().str() +
                      " into " + target.str() + " along axis " +
                      std::to_string(rep_axis));
  }

  Tape* t = detail::current_tape();
  if (!t) return out;
  const int ix = t->ensure(x);
  if (ix < 0) return out;
  out.impl()->requires_grad = true;
  Node n;
  n.op = OpKind::broadcast;
  n.in0 = ix;
  n.a = x;
  n.rep_axis = rep_axis;
  n.out = out;
  t->append(std::move(n));
  return out;
}

/// Concatenation of two rank-2 tensors along rows (axis 0) or cols (axis 1).
inline Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  if (a.shape().rank() != 2 || b.shape().rank() != 2 ||
      (axis != 0 && axis != 1) ||
      a.shape()[1 - axis] != b.shape()[1 - axis]) {
    throw TensorError(std::string("concat: incompatible shapes ") +
                      a.shape().str() + " and " + b.shape().str());
  }
  Tensor out;
  auto pa = a.data(), pb = b.data();
  if (axis == 0) {
    out = Tensor::zeros(Shape{a.shape()[0] + b.shape()[0], a.shape()[1]});
    auto o = out.mutable_data();
    std::copy(pa.begin(), pa.end(), o.begin());
    std::copy(pb.begin(), pb.end(), o.begin() + pa.size());
  } else {
    const int m = a.shape()[0], na = a.shape()[1], nb = b.shape()[1];
    out = Tensor::zeros(Shape{m, na + nb});
    auto o = out.mutable_data();
    for (int i = 0; i < m; ++i) {
      std::copy(pa.begin() + i * static_cast<size_t>(na),
                pa.begin() + (i + 1) * static_cast<size_t>(na),
                o.begin() + i * static_cast<size_t>(na + nb));
      std::copy(pb.begin() + i * static_cast<size_t>(nb),
                pb.begin() + (i + 1) * static_cast<size_t>(nb),
                o.begin() + i * static_cast<size_t>(na + nb) + na);
    }
  }

  Tape* t = detail::current_tape();
  if (!t) return out;
  const int ia = t->ensure(a), ib = t->ensure(b);
  if (ia < 0 && ib < 0) return out;
  out.impl()->requires_grad = true;
  Node n;
  n.op = OpKind::concat;
  n.in0 = ia;
  n.in1 = ib;
  n.a = a;
  n.b = b;
  n.axis = axis;
  n.split = a.shape()[axis];
  n.out = out;
  t->append(std::move(n));
  return out;
}

/// Rows `start..start+len` (axis 0) or columns (axis 1) of a rank-2 tensor.
inline Tensor slice(const Tensor& x, int axis, int start, int len) {
  if (x.shape().rank() != 2 || (axis != 0 && axis != 1) || start < 0 ||
      start + len > x.shape()[axis]) {
    throw TensorError("slice: invalid range on " + x.shape().str());
  }
  const int m = x.shape()[0], n = x.shape()[1];
  Tensor out;
  auto p = x.data();
  if (axis == 0) {
    out = Tensor::zeros(Shape{len, n});
    auto o = out.mutable_data();
    std::copy(p.begin() + start * static_cast<size_t>(n),
              p.begin() + (start + len) * static_cast<size_t>(n), o.begin());
  } else {
    out = Tensor::zeros(Shape{m, len});
    auto o = out.mutable_data();
    for (int i = 0; i < m; ++i) {
      std::copy(p.begin() + i * static_cast<size_t>(n) + start,
                p.begin() + i * static_cast<size_t>(n) + start + len,
                o.begin() + i * static_cast<size_t>(len));
    }
  }

  Tape* t = detail::current_tape();
  if (!t) return out;
  const int ix = t->ensure(x);
  if (ix < 0) return out;
  out.impl()->requires_grad = true;
  Node nd;
  nd.op = OpKind::slice;
  nd.in0 = ix;
  nd.a = x;
  nd.axis = axis;
  nd.slice_start = start;
  nd.slice_len = len;
  nd.out = out;
  t->append(std::move(nd));
  return out;
}

/// Row selection: out[i] = x[rows[i]]. Rows may repeat.
inline Tensor gather(const Tensor& x, const std::vector<int>& rows) {
  if (x.shape().rank() != 2) {
    throw TensorError("gather: expected rank-2 input, got " + x.shape().str());
  }
  const int m = x.shape()[0], n = x.shape()[1];
  for (int r : rows) {
    if (r < 0 || r >= m) throw TensorError("gather: row index out of range");
  }
  Tensor out = Tensor::zeros(Shape{static_cast<int>(rows.size()), n});
  auto o = out.mutable_data();
  auto p = x.data();
  for (size_t i = 0; i < rows.size(); ++i) {
    std::copy(p.begin() + rows[i] * static_cast<size_t>(n),
              p.begin() + (rows[i] + 1) * static_cast<size_t>(n),
              o.begin() + i * static_cast<size_t>(n));
  }

  Tape* t = detail::current_tape();
  if (!t) return out;
  const int ix = t->ensure(x);
  if (ix < 0) return out;
  out.impl()->requires_grad = true;
  Node nd;
  nd.op = OpKind::gather;
  nd.in0 = ix;
  nd.a = x;
  nd.indices = std::make_shared<std::vector<int>>(rows);
  nd.out = out;
  t->append(std::move(nd));
  return out;
}

/// Mean over rows of -log softmax(logits)[label]. Natural log. The
/// per-row log-sum-exp accumulates in ascending order so the value is
/// invariant under a consistent permutation of columns and labels.
inline Tensor softmax_cross_entropy(const Tensor& logits,
                                    const std::vector<int>& labels) {
  if (logits.shape().rank() != 2 ||
      static_cast<int>(labels.size()) != logits.shape()[0]) {
    throw TensorError(
        "softmax-cross-entropy: logits " + logits.shape().str() + " need " +
        std::to_string(logits.shape()[0]) + " labels, got " +
        std::to_string(labels.size()));
  }
  const int m = logits.shape()[0], n = logits.shape()[1];
  for (int l : labels) {
    if (l < 0 || l >= n) {
      throw TensorError("softmax-cross-entropy: label out of range");
    }
  }
  auto p = logits.data();
  std::vector<double> rows(m), scratch(n);
  for (int i = 0; i < m; ++i) {
    const double* row = &p[i * static_cast<size_t>(n)];
    const double mx = *std::max_element(row, row + n);
    for (int j = 0; j < n; ++j) scratch[j] = std::exp(row[j] - mx);
    const double lse = std::log(detail::ordered_sum(scratch)) + mx;
    rows[i] = lse - row[labels[i]];
  }
  std::vector<double> acc = rows;
  Tensor out = Tensor::scalar(detail::ordered_sum(acc) / m);

  Tape* t = detail::current_tape();
  if (!t) return out;
  const int ix = t->ensure(logits);
  if (ix < 0) return out;
  out.impl()->requires_grad = true;
  Node nd;
  nd.op = OpKind::softmax_xent;
  nd.in0 = ix;
  nd.a = logits;
  nd.indices = std::make_shared<std::vector<int>>(labels);
  nd.out = out;
  t->append(std::move(nd));
  return out;
}

// ---- composites (no backward rules of their own) ----

inline Tensor scale(const Tensor& x, double s) {
  return mul(x, broadcast(Tensor::scalar(s), x.shape(), -1));
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return add(x, broadcast(Tensor::scalar(s), x.shape(), -1));
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

/// x + row-vector bias.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  return add(x, broadcast(bias, x.shape(), 0));
}

inline Tensor mse(const Tensor& pred, const Tensor& target) {
  return mean(square(sub(pred, target)));
}

inline Tensor reciprocal(const Tensor& x) { return exp(neg(log(x))); }

}  // namespace ops

// ---------------------------------------------------------------------------
// Reverse-mode differentiation.
// ---------------------------------------------------------------------------

struct Gradients {
  std::vector<Tensor> grads;
  /// False entries mark params that were unreachable from the loss; their
  /// grads are explicit zeros rather than silently absent.
  std::vector<bool> on_tape;
  bool all_on_tape() const {
    return std::all_of(on_tape.begin(), on_tape.end(), [](bool b) { return b; });
  }
};

namespace detail {

/// Input adjoints of one node, expressed through the public primitives so
/// that running this under an active tape records the backward pass itself.
inline void node_vjp(const Node& n, const Tensor& adj, Tensor& ga, Tensor& gb) {
  using namespace ops;
  switch (n.op) {
    case OpKind::leaf:
      break;
    case OpKind::add:
      if (n.in0 >= 0) ga = adj;
      if (n.in1 >= 0) gb = adj;
      break;
    case OpKind::mul:
      if (n.in0 >= 0) ga = mul(adj, n.b);
      if (n.in1 >= 0) gb = mul(adj, n.a);
      break;
    case OpKind::matmul:
      if (n.in0 >= 0) {
        ga = n.ta ? matmul(n.b, adj, n.tb, true) : matmul(adj, n.b, false, !n.tb);
      }
      if (n.in1 >= 0) {
        gb = n.tb ? matmul(adj, n.a, true, n.ta) : matmul(n.a, adj, !n.ta, false);
      }
      break;
    case OpKind::relu: {
      Tensor mask = Tensor::zeros(n.a.shape());
      auto m = mask.mutable_data();
      auto p = n.a.data();
      for (size_t i = 0; i < m.size(); ++i) m[i] = p[i] > 0.0 ? 1.0 : 0.0;
      ga = mul(adj, mask);
      break;
    }
    case OpKind::tanh_act:
      ga = mul(adj, add_scalar(scale(square(n.out), -1.0), 1.0));
      break;
    case OpKind::square:
      ga = mul(adj, scale(n.a, 2.0));
      break;
    case OpKind::exp_fn:
      ga = mul(adj, n.out);
      break;
    case OpKind::log_fn:
      // 1/x = exp(-log x); reuses this node's output.
      ga = mul(adj, exp(neg(n.out)));
      break;
    case OpKind::sum_red:
      // Reducing over axis k removes it; the adjoint re-expands by
      // replicating along that same axis.
      ga = broadcast(adj, n.a.shape(), n.axis);
      break;
    case OpKind::mean_red: {
      const double inv = n.axis == -1
                             ? 1.0 / static_cast<double>(n.a.numel())
                             : 1.0 / static_cast<double>(n.a.shape()[n.axis]);
      ga = broadcast(scale(adj, inv), n.a.shape(), n.axis);
      break;
    }
    case OpKind::broadcast:
      if (n.rep_axis == -1) {
        ga = sum(adj);
        if (n.a.shape().rank() != 0) ga = ga.reshaped(n.a.shape());
      } else {
        ga = sum(adj, n.rep_axis == 0 ? 0 : 1);
        if (ga.shape() != n.a.shape()) ga = ga.reshaped(n.a.shape());
      }
      break;
    case OpKind::concat:
      if (n.in0 >= 0) ga = slice(adj, n.axis, 0, n.split);
      if (n.in1 >= 0) {
        gb = slice(adj, n.axis, n.split, adj.shape()[n.axis] - n.split);
      }
      break;
    case OpKind::slice: {
      // Pad the adjoint back to the input extent with zeros.
      const int extent = n.a.shape()[n.axis];
      const int other = n.a.shape()[1 - n.axis];
      Tensor lo, hi;
      if (n.slice_start > 0) {
        lo = Tensor::zeros(n.axis == 0 ? Shape{n.slice_start, other}
                                       : Shape{other, n.slice_start});
      }
      const int tail = extent - n.slice_start - n.slice_len;
      if (tail > 0) {
        hi = Tensor::zeros(n.axis == 0 ? Shape{tail, other}
                                       : Shape{other, tail});
      }
      ga = adj;
      if (lo.defined()) ga = concat(lo, ga, n.axis);
      if (hi.defined()) ga = concat(ga, hi, n.axis);
      break;
    }
    case OpKind::gather: {
      // Scatter-add as a matmul with the constant selection matrix.
      const auto& rows = *n.indices;
      Tensor sel = Tensor::zeros(
          Shape{static_cast<int>(rows.size()), n.a.shape()[0]});
      auto s = sel.mutable_data();
      for (size_t i = 0; i < rows.size(); ++i) {
        s[i * static_cast<size_t>(n.a.shape()[0]) + rows[i]] = 1.0;
      }
      ga = matmul(sel, adj, true, false);
      break;
    }
    case OpKind::softmax_xent: {
      // d/dlogits = (softmax - onehot)/rows, composed from primitives so
      // it stays differentiable. Row maxima are constants; the shift
      // cancels exactly in softmax.
      const int m = n.a.shape()[0], cols = n.a.shape()[1];
      Tensor neg_max = Tensor::zeros(Shape{m});
      {
        auto p = n.a.data();
        auto q = neg_max.mutable_data();
        for (int i = 0; i < m; ++i) {
          q[i] = -*std::max_element(&p[i * static_cast<size_t>(cols)],
                                    &p[(i + 1) * static_cast<size_t>(cols)]);
        }
      }
      Tensor z = add(n.a, broadcast(neg_max, n.a.shape(), 1));
      Tensor e = exp(z);
      Tensor denom = reciprocal(sum(e, 1));
      Tensor probs = mul(e, broadcast(denom, n.a.shape(), 1));
      Tensor neg_onehot = Tensor::zeros(n.a.shape());
      {
        auto q = neg_onehot.mutable_data();
        const auto& labels = *n.indices;
        for (int i = 0; i < m; ++i) {
          q[i * static_cast<size_t>(cols) + labels[i]] = -1.0;
        }
      }
      Tensor g = scale(add(probs, neg_onehot), 1.0 / m);
      ga = mul(g, broadcast(adj, n.a.shape(), -1));
      break;
    }
  }
}

}  // namespace detail

/// Reverse accumulation of dloss/dparam for each param. With create_graph
/// the backward computation is recorded on the same tape, so a later
/// backward differentiates through these gradients.
inline Gradients grad(const Tensor& loss, const std::vector<Tensor>& params,
                      bool create_graph = false) {
  Tape* t = detail::current_tape();
  if (!t) {
    throw TensorError("grad: no active tape");
  }
  if (loss.numel() != 1) {
    throw TensorError("grad: loss has shape " + loss.shape().str() +
                      ", expected a scalar");
  }
  const int root = t->lookup(loss);
  if (root < 0) {
    throw TensorError("grad: loss is not on the active tape");
  }

  std::vector<Tensor> adj(root + 1);
  adj[root] = Tensor::scalar(1.0);

  std::vector<bool> keep(root + 1, false);
  keep[root] = true;
  for (const Tensor& p : params) {
    const int id = t->lookup(p);
    if (id >= 0 && id <= root) keep[id] = true;
  }

  auto run = [&] {
    for (int i = root; i >= 0; --i) {
      if (!adj[i].defined()) continue;
      const Node n = t->node(i);  // copy: vjp may grow the node vector
      if (n.op == OpKind::leaf) continue;
      Tensor ga, gb;
      detail::node_vjp(n, adj[i], ga, gb);
      if (n.in0 >= 0 && ga.defined()) {
        adj[n.in0] = adj[n.in0].defined() ? ops::add(adj[n.in0], ga) : ga;
      }
      if (n.in1 >= 0 && gb.defined()) {
        adj[n.in1] = adj[n.in1].defined() ? ops::add(adj[n.in1], gb) : gb;
      }
      if (!keep[i]) adj[i] = Tensor();  // release intermediates
    }
  };

  if (create_graph) {
    run();
  } else {
    NoGradScope no_grad;
    run();
  }

  Gradients out;
  out.grads.reserve(params.size());
  out.on_tape.reserve(params.size());
  for (const Tensor& p : params) {
    const int id = t->lookup(p);
    if (id >= 0 && id <= root && adj[id].defined()) {
      out.grads.push_back(adj[id]);
      out.on_tape.push_back(true);
    } else {
      out.grads.push_back(Tensor::zeros(p.shape()));
      out.on_tape.push_back(id >= 0);
    }
  }
  return out;
}

}  // namespace metaaug
