#pragma once

#include <cassert>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <unordered_map>

#include "rearrange/common.hpp"

namespace rearrange {

// Dense row-major tensors with a thread-confined gradient tape. Two widths
// are instantiated: float for training, double for finite-difference checks.

using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

enum class Op {
  add,
  mul,
  matmul,
  transpose,
  reshape,
  concat,
  slice,
  exp,
  log,
  tanh,
  relu,
  gelu,
  sum,
  mean,
  max,
  softmax_lastdim,
  layernorm_lastdim,
  embedding_lookup,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::reshape: return "reshape";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::tanh: return "tanh";
    case Op::relu: return "relu";
    case Op::gelu: return "gelu";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::max: return "max";
    case Op::softmax_lastdim: return "softmax_lastdim";
    case Op::layernorm_lastdim: return "layernorm_lastdim";
    case Op::embedding_lookup: return "embedding_lookup";
  }
  return "?";
}

// Per-op attributes: reshape target shape, concat axis, slice offsets+sizes,
// embedding indices, reduction mode, layernorm epsilon.
struct Attrs {
  std::vector<int> ints;
  double real = 0.0;
  bool lastdim = false;  // reductions: lastdim-with-keepdim vs full
};

inline uint64_t next_tensor_id() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1);
}

template <typename Real>
struct TensorStorage {
  Shape shape;
  std::vector<Real> values;
  std::vector<Real> grad;  // same length as values once populated
  bool requires_grad = false;
  uint64_t id = 0;
};

template <typename Real>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), Real(0), requires_grad);
  }

  static TensorT filled(Shape shape, Real value, bool requires_grad = false) {
    TensorT t;
    t.d_ = std::make_shared<TensorStorage<Real>>();
    t.d_->shape = std::move(shape);
    t.d_->values.assign(size_t(shape_numel(t.d_->shape)), value);
    t.d_->requires_grad = requires_grad;
    t.d_->id = next_tensor_id();
    return t;
  }

  static TensorT scalar(Real value, bool requires_grad = false) {
    return filled({1}, value, requires_grad);
  }

  static TensorT from(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    TensorT t;
    t.d_ = std::make_shared<TensorStorage<Real>>();
    if (int(values.size()) != shape_numel(shape))
      fail("tensor data length " + std::to_string(values.size()) +
           " does not match shape " + shape_str(shape));
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    t.d_->requires_grad = requires_grad;
    t.d_->id = next_tensor_id();
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return int(d_->shape.size()); }
  int dim(int i) const { return d_->shape[size_t(i)]; }
  int numel() const { return int(d_->values.size()); }
  uint64_t id() const { return d_->id; }
  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  std::vector<Real>& values() { return d_->values; }
  const std::vector<Real>& values() const { return d_->values; }
  Real at(int i) const { return d_->values[size_t(i)]; }
  Real at(int r, int c) const { return d_->values[size_t(r) * size_t(dim(1)) + size_t(c)]; }

  std::vector<Real>& grad() { return d_->grad; }
  const std::vector<Real>& grad() const { return d_->grad; }
  void ensure_grad() {
    if (d_->grad.size() != d_->values.size()) d_->grad.assign(d_->values.size(), Real(0));
  }
  void zero_grad() { d_->grad.assign(d_->values.size(), Real(0)); }

  bool all_finite() const {
    for (Real v : d_->values)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  TensorT detached_copy() const {
    return from(d_->shape, d_->values, false);
  }

  std::shared_ptr<TensorStorage<Real>> storage() const { return d_; }

 private:
  std::shared_ptr<TensorStorage<Real>> d_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <typename Real>
struct TapeRecord {
  Op op;
  std::vector<TensorT<Real>> inputs;
  TensorT<Real> output;
  Attrs attrs;
};

template <typename Real>
class TapeT {
 public:
  void push(TapeRecord<Real> rec) { records_.push_back(std::move(rec)); }
  size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const TapeRecord<Real>& back() const { return records_.back(); }
  const std::vector<TapeRecord<Real>>& records() const { return records_; }
  bool consumed() const { return consumed_; }
  void mark_consumed() { consumed_ = true; }
  void clear() {
    records_.clear();
    consumed_ = false;
  }

  static TapeT*& active() {
    thread_local TapeT* current = nullptr;
    return current;
  }

 private:
  std::vector<TapeRecord<Real>> records_;
  bool consumed_ = false;
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

// RAII scope making a tape the active recording target on this thread.
template <typename Real>
class TapeScopeT {
 public:
  explicit TapeScopeT(TapeT<Real>& tape) : prev_(TapeT<Real>::active()) {
    TapeT<Real>::active() = &tape;
  }
  ~TapeScopeT() { TapeT<Real>::active() = prev_; }
  TapeScopeT(const TapeScopeT&) = delete;
  TapeScopeT& operator=(const TapeScopeT&) = delete;

 private:
  TapeT<Real>* prev_;
};

using TapeScope = TapeScopeT<float>;
using TapeScope64 = TapeScopeT<double>;

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

namespace detail {

[[noreturn]] inline void shape_error(Op op, const std::string& detail) {
  fail(std::string("op ") + op_name(op) + ": " + detail);
}

// Binary broadcasting: equal shapes, rhs scalar, or rhs vector matching the
// last dim of lhs.
enum class Broadcast { none, scalar, lastdim };

template <typename Real>
Broadcast binary_broadcast(Op op, const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.numel() == 1) return Broadcast::scalar;
  if (b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.dim(a.rank() - 1))
    return Broadcast::lastdim;
  shape_error(op, "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                      " do not conform");
}

template <typename Real, typename Fn>
TensorT<Real> binary_ew(Op op, const TensorT<Real>& a, const TensorT<Real>& b, Fn fn) {
  Broadcast bc = binary_broadcast(op, a, b);
  TensorT<Real> out = TensorT<Real>::zeros(a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  const size_t n = av.size();
  if (bc == Broadcast::none) {
    for (size_t i = 0; i < n; ++i) ov[i] = fn(av[i], bv[i]);
  } else if (bc == Broadcast::scalar) {
    const Real s = bv[0];
    for (size_t i = 0; i < n; ++i) ov[i] = fn(av[i], s);
  } else {
    const size_t d = bv.size();
    for (size_t i = 0; i < n; ++i) ov[i] = fn(av[i], bv[i % d]);
  }
  return out;
}

template <typename Real>
void matmul_kernel(const Real* a, const Real* b, Real* c, int m, int k, int n) {
  // c[m x n] = a[m x k] * b[k x n]; ikj order keeps the inner loop contiguous.
  for (int i = 0; i < m; ++i) {
    Real* crow = c + size_t(i) * size_t(n);
    for (int j = 0; j < n; ++j) crow[j] = Real(0);
    const Real* arow = a + size_t(i) * size_t(k);
    for (int p = 0; p < k; ++p) {
      const Real apv = arow[p];
      const Real* brow = b + size_t(p) * size_t(n);
      for (int j = 0; j < n; ++j) crow[j] += apv * brow[j];
    }
  }
}

template <typename Real>
Real gelu_fwd(Real x) {
  return Real(0.5) * x * (Real(1) + Real(std::erf(double(x) * M_SQRT1_2)));
}

template <typename Real>
Real gelu_bwd(Real x) {
  const double xd = double(x);
  const double cdf = 0.5 * (1.0 + std::erf(xd * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * M_PI);
  return Real(cdf + xd * pdf);
}

// Row geometry for lastdim ops on rank >= 1 tensors.
inline std::pair<int, int> row_geometry(const Shape& s) {
  int d = s.back();
  int rows = shape_numel(s) / d;
  return {rows, d};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// apply_primitive: the single entry point all differentiable computation
// funnels through. Records onto the active tape when an input requires grad.
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> apply_primitive(Op op, const std::vector<TensorT<Real>>& inputs,
                              const Attrs& attrs = {}) {
  using detail::shape_error;
  TensorT<Real> out;

  auto in = [&](size_t i) -> const TensorT<Real>& { return inputs[i]; };

  switch (op) {
    case Op::add:
      out = detail::binary_ew(op, in(0), in(1), [](Real x, Real y) { return x + y; });
      break;
    case Op::mul:
      out = detail::binary_ew(op, in(0), in(1), [](Real x, Real y) { return x * y; });
      break;
    case Op::matmul: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        shape_error(op, "shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
      out = TensorT<Real>::zeros({a.dim(0), b.dim(1)});
      detail::matmul_kernel(a.values().data(), b.values().data(), out.values().data(),
                            a.dim(0), a.dim(1), b.dim(1));
      break;
    }
    case Op::transpose: {
      const auto& a = in(0);
      if (a.rank() != 2) shape_error(op, "expects rank 2, got " + shape_str(a.shape()));
      const int r = a.dim(0), c = a.dim(1);
      out = TensorT<Real>::zeros({c, r});
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.values()[size_t(j) * size_t(r) + size_t(i)] = a.at(i, j);
      break;
    }
    case Op::reshape: {
      const auto& a = in(0);
      Shape target(attrs.ints.begin(), attrs.ints.end());
      if (shape_numel(target) != a.numel())
        shape_error(op, "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(target));
      out = TensorT<Real>::from(target, a.values());
      break;
    }
    case Op::concat: {
      if (inputs.empty()) shape_error(op, "needs at least one input");
      const int axis = attrs.ints.empty() ? 0 : attrs.ints[0];
      const int rank = in(0).rank();
      if (axis < 0 || axis >= rank) shape_error(op, "axis out of range");
      Shape out_shape = in(0).shape();
      int axis_total = 0;
      for (const auto& t : inputs) {
        if (t.rank() != rank) shape_error(op, "rank mismatch");
        for (int d = 0; d < rank; ++d)
          if (d != axis && t.dim(d) != out_shape[size_t(d)])
            shape_error(op, "non-axis dims differ: " + shape_str(t.shape()));
        axis_total += t.dim(axis);
      }
      out_shape[size_t(axis)] = axis_total;
      out = TensorT<Real>::zeros(out_shape);
      // outer = product of dims before axis, inner = after axis
      int outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= out_shape[size_t(d)];
      for (int d = axis + 1; d < rank; ++d) inner *= out_shape[size_t(d)];
      size_t axis_off = 0;
      for (const auto& t : inputs) {
        const size_t t_axis = size_t(t.dim(axis));
        for (int o = 0; o < outer; ++o) {
          const Real* src = t.values().data() + size_t(o) * t_axis * size_t(inner);
          Real* dst = out.values().data() +
                      (size_t(o) * size_t(axis_total) + axis_off) * size_t(inner);
          std::copy(src, src + t_axis * size_t(inner), dst);
        }
        axis_off += t_axis;
      }
      break;
    }
    case Op::slice: {
      const auto& a = in(0);
      const int rank = a.rank();
      if (int(attrs.ints.size()) != 2 * rank)
        shape_error(op, "expects offsets+sizes for each dim");
      Shape out_shape(attrs.ints.begin() + rank, attrs.ints.end());
      for (int d = 0; d < rank; ++d) {
        int off = attrs.ints[size_t(d)], sz = out_shape[size_t(d)];
        if (off < 0 || sz <= 0 || off + sz > a.dim(d))
          shape_error(op, "slice out of range on dim " + std::to_string(d) + " of " +
                              shape_str(a.shape()));
      }
      out = TensorT<Real>::zeros(out_shape);
      if (rank == 1) {
        std::copy_n(a.values().data() + attrs.ints[0], out_shape[0], out.values().data());
      } else if (rank == 2) {
        for (int i = 0; i < out_shape[0]; ++i)
          std::copy_n(a.values().data() + size_t(attrs.ints[0] + i) * size_t(a.dim(1)) +
                          size_t(attrs.ints[1]),
                      out_shape[1], out.values().data() + size_t(i) * size_t(out_shape[1]));
      } else {
        shape_error(op, "supports rank 1-2");
      }
      break;
    }
    case Op::exp: {
      const auto& a = in(0);
      out = TensorT<Real>::zeros(a.shape());
      for (int i = 0; i < a.numel(); ++i) out.values()[size_t(i)] = Real(std::exp(double(a.at(i))));
      break;
    }
    case Op::log: {
      const auto& a = in(0);
      out = TensorT<Real>::zeros(a.shape());
      for (int i = 0; i < a.numel(); ++i) {
        if (!(a.at(i) > Real(0)))
          fail("op log: domain error, non-positive value " + std::to_string(double(a.at(i))));
        out.values()[size_t(i)] = Real(std::log(double(a.at(i))));
      }
      break;
    }
    case Op::tanh: {
      const auto& a = in(0);
      out = TensorT<Real>::zeros(a.shape());
      for (int i = 0; i < a.numel(); ++i) out.values()[size_t(i)] = Real(std::tanh(double(a.at(i))));
      break;
    }
    case Op::relu: {
      const auto& a = in(0);
      out = TensorT<Real>::zeros(a.shape());
      for (int i = 0; i < a.numel(); ++i) out.values()[size_t(i)] = a.at(i) > Real(0) ? a.at(i) : Real(0);
      break;
    }
    case Op::gelu: {
      const auto& a = in(0);
      out = TensorT<Real>::zeros(a.shape());
      for (int i = 0; i < a.numel(); ++i) out.values()[size_t(i)] = detail::gelu_fwd(a.at(i));
      break;
    }
    case Op::sum:
    case Op::mean: {
      const auto& a = in(0);
      if (!attrs.lastdim) {
        double acc = 0.0;
        for (int i = 0; i < a.numel(); ++i) acc += double(a.at(i));
        if (op == Op::mean) acc /= double(a.numel());
        out = TensorT<Real>::scalar(Real(acc));
      } else {
        auto [rows, d] = detail::row_geometry(a.shape());
        Shape out_shape = a.shape();
        out_shape.back() = 1;
        out = TensorT<Real>::zeros(out_shape);
        for (int r = 0; r < rows; ++r) {
          double acc = 0.0;
          for (int j = 0; j < d; ++j) acc += double(a.at(r * d + j));
          if (op == Op::mean) acc /= double(d);
          out.values()[size_t(r)] = Real(acc);
        }
      }
      break;
    }
    case Op::max: {
      const auto& a = in(0);
      if (!attrs.lastdim) {
        int arg = 0;
        for (int i = 1; i < a.numel(); ++i)
          if (a.at(i) > a.at(arg)) arg = i;
        out = TensorT<Real>::scalar(a.at(arg));
      } else {
        auto [rows, d] = detail::row_geometry(a.shape());
        Shape out_shape = a.shape();
        out_shape.back() = 1;
        out = TensorT<Real>::zeros(out_shape);
        for (int r = 0; r < rows; ++r) {
          int arg = 0;
          for (int j = 1; j < d; ++j)
            if (a.at(r * d + j) > a.at(r * d + arg)) arg = j;
          out.values()[size_t(r)] = a.at(r * d + arg);
        }
      }
      break;
    }
    case Op::softmax_lastdim: {
      const auto& a = in(0);
      auto [rows, d] = detail::row_geometry(a.shape());
      out = TensorT<Real>::zeros(a.shape());
      for (int r = 0; r < rows; ++r) {
        Real mx = a.at(r * d);
        for (int j = 1; j < d; ++j) mx = std::max(mx, a.at(r * d + j));
        double denom = 0.0;
        for (int j = 0; j < d; ++j) {
          double e = std::exp(double(a.at(r * d + j)) - double(mx));
          out.values()[size_t(r * d + j)] = Real(e);
          denom += e;
        }
        for (int j = 0; j < d; ++j) out.values()[size_t(r * d + j)] = Real(double(out.at(r * d + j)) / denom);
      }
      break;
    }
    case Op::layernorm_lastdim: {
      // inputs: x, gain[d], bias[d]; attrs.real = eps
      const auto& a = in(0);
      const auto& gain = in(1);
      const auto& bias = in(2);
      auto [rows, d] = detail::row_geometry(a.shape());
      if (gain.numel() != d || bias.numel() != d)
        shape_error(op, "gain/bias must match last dim " + std::to_string(d));
      out = TensorT<Real>::zeros(a.shape());
      const double eps = attrs.real;
      for (int r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += double(a.at(r * d + j));
        mu /= double(d);
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
          double dv = double(a.at(r * d + j)) - mu;
          var += dv * dv;
        }
        var /= double(d);
        const double rstd = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) {
          double xhat = (double(a.at(r * d + j)) - mu) * rstd;
          out.values()[size_t(r * d + j)] =
              Real(xhat * double(gain.at(j)) + double(bias.at(j)));
        }
      }
      break;
    }
    case Op::embedding_lookup: {
      const auto& table = in(0);
      if (table.rank() != 2) shape_error(op, "table must be rank 2");
      const int v = table.dim(0), d = table.dim(1);
      const auto& idx = attrs.ints;
      out = TensorT<Real>::zeros({int(idx.size()), d});
      for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= v)
          shape_error(op, "index " + std::to_string(idx[i]) + " out of range [0," +
                              std::to_string(v) + ")");
        std::copy_n(table.values().data() + size_t(idx[i]) * size_t(d), d,
                    out.values().data() + i * size_t(d));
      }
      break;
    }
  }

  bool needs_grad = false;
  for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
  TapeT<Real>* tape = TapeT<Real>::active();
  if (needs_grad && tape != nullptr) {
    out.set_requires_grad(true);
    tape->push({op, inputs, out, attrs});
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename Real>
using GradMap = std::unordered_map<uint64_t, std::vector<Real>>;

namespace detail {

// Reduces a full-shape gradient back to the broadcast operand's shape.
template <typename Real>
void reduce_broadcast_grad(Broadcast bc, const std::vector<Real>& g, std::vector<Real>& acc) {
  if (bc == Broadcast::none) {
    for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
  } else if (bc == Broadcast::scalar) {
    double s = 0.0;
    for (Real v : g) s += double(v);
    acc[0] += Real(s);
  } else {
    const size_t d = acc.size();
    for (size_t i = 0; i < g.size(); ++i) acc[i % d] += g[i];
  }
}

}  // namespace detail

// Reverse pass over a tape. Populates .grad on requires_grad leaves (unless
// write_leaf_grads is false) and returns the full gradient map keyed by
// tensor id. The tape is single-use.
template <typename Real>
GradMap<Real> backward(TapeT<Real>& tape, const TensorT<Real>& seed,
                       bool write_leaf_grads = true) {
  if (tape.consumed()) fail("backward: tape already consumed");
  if (tape.empty()) fail("backward: tape is empty");
  const auto& final_out = tape.back().output;
  if (seed.shape() != final_out.shape())
    fail("backward: seed shape " + shape_str(seed.shape()) + " does not match output " +
         shape_str(final_out.shape()));
  tape.mark_consumed();

  GradMap<Real> grads;
  grads[final_out.id()] = seed.values();

  // Ids produced by some record; everything else is a leaf.
  std::unordered_map<uint64_t, bool> produced;
  for (const auto& rec : tape.records()) produced[rec.output.id()] = true;

  auto grad_of = [&](const TensorT<Real>& t) -> std::vector<Real>* {
    auto it = grads.find(t.id());
    return it == grads.end() ? nullptr : &it->second;
  };
  auto accum = [&](const TensorT<Real>& t) -> std::vector<Real>& {
    auto it = grads.find(t.id());
    if (it == grads.end())
      it = grads.emplace(t.id(), std::vector<Real>(size_t(t.numel()), Real(0))).first;
    return it->second;
  };

  const auto& recs = tape.records();
  for (size_t ri = recs.size(); ri-- > 0;) {
    const auto& rec = recs[ri];
    std::vector<Real>* gout_p = grad_of(rec.output);
    if (gout_p == nullptr) continue;  // output unused downstream
    const std::vector<Real>& g = *gout_p;
    const auto& ins = rec.inputs;

    switch (rec.op) {
      case Op::add: {
        if (ins[0].requires_grad()) detail::reduce_broadcast_grad(detail::Broadcast::none, g, accum(ins[0]));
        if (ins[1].requires_grad()) {
          auto bc = detail::binary_broadcast(rec.op, ins[0], ins[1]);
          detail::reduce_broadcast_grad(bc, g, accum(ins[1]));
        }
        break;
      }
      case Op::mul: {
        auto bc = detail::binary_broadcast(rec.op, ins[0], ins[1]);
        const auto& av = ins[0].values();
        const auto& bv = ins[1].values();
        if (ins[0].requires_grad()) {
          auto& acc = accum(ins[0]);
          if (bc == detail::Broadcast::none)
            for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * bv[i];
          else if (bc == detail::Broadcast::scalar)
            for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * bv[0];
          else
            for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * bv[i % bv.size()];
        }
        if (ins[1].requires_grad()) {
          std::vector<Real> ga(g.size());
          for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * av[i];
          detail::reduce_broadcast_grad(bc, ga, accum(ins[1]));
        }
        break;
      }
      case Op::matmul: {
        const auto& a = ins[0];
        const auto& b = ins[1];
        const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
        if (a.requires_grad()) {
          // gA = g * B^T
          auto& acc = accum(a);
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              double s = 0.0;
              for (int j = 0; j < n; ++j)
                s += double(g[size_t(i) * size_t(n) + size_t(j)]) * double(b.at(p, j));
              acc[size_t(i) * size_t(k) + size_t(p)] += Real(s);
            }
        }
        if (b.requires_grad()) {
          // gB = A^T * g
          auto& acc = accum(b);
          for (int p = 0; p < k; ++p)
            for (int i = 0; i < m; ++i) {
              const Real apv = a.at(i, p);
              if (apv == Real(0)) continue;
              const Real* grow = g.data() + size_t(i) * size_t(n);
              Real* arow = acc.data() + size_t(p) * size_t(n);
              for (int j = 0; j < n; ++j) arow[j] += apv * grow[j];
            }
        }
        break;
      }
      case Op::transpose: {
        if (!ins[0].requires_grad()) break;
        auto& acc = accum(ins[0]);
        const int r = ins[0].dim(0), c = ins[0].dim(1);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            acc[size_t(i) * size_t(c) + size_t(j)] += g[size_t(j) * size_t(r) + size_t(i)];
        break;
      }
      case Op::reshape: {
        if (!ins[0].requires_grad()) break;
        auto& acc = accum(ins[0]);
        for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        break;
      }
      case Op::concat: {
        const int axis = rec.attrs.ints.empty() ? 0 : rec.attrs.ints[0];
        const int rank = ins[0].rank();
        int outer = 1, inner = 1;
        const Shape& os = rec.output.shape();
        for (int d = 0; d < axis; ++d) outer *= os[size_t(d)];
        for (int d = axis + 1; d < rank; ++d) inner *= os[size_t(d)];
        const int axis_total = os[size_t(axis)];
        size_t axis_off = 0;
        for (const auto& t : ins) {
          const size_t t_axis = size_t(t.dim(axis));
          if (t.requires_grad()) {
            auto& acc = accum(t);
            for (int o = 0; o < outer; ++o) {
              const Real* src = g.data() +
                                (size_t(o) * size_t(axis_total) + axis_off) * size_t(inner);
              Real* dst = acc.data() + size_t(o) * t_axis * size_t(inner);
              for (size_t i = 0; i < t_axis * size_t(inner); ++i) dst[i] += src[i];
            }
          }
          axis_off += t_axis;
        }
        break;
      }
      case Op::slice: {
        if (!ins[0].requires_grad()) break;
        auto& acc = accum(ins[0]);
        const auto& a = ins[0];
        const int rank = a.rank();
        const auto& at = rec.attrs.ints;
        if (rank == 1) {
          for (int i = 0; i < at[1]; ++i) acc[size_t(at[0] + i)] += g[size_t(i)];
        } else {
          const int oc = at[3];
          for (int i = 0; i < at[2]; ++i)
            for (int j = 0; j < oc; ++j)
              acc[size_t(at[0] + i) * size_t(a.dim(1)) + size_t(at[1] + j)] +=
                  g[size_t(i) * size_t(oc) + size_t(j)];
        }
        break;
      }
      case Op::exp: {
        if (!ins[0].requires_grad()) break;
        auto& acc = accum(ins[0]);
        const auto& ov = rec.output.values();
        for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * ov[i];
        break;
      }
      case Op::log: {
        if (!ins[0].requires_grad()) break;
        auto& acc = accum(ins[0]);
        const auto& av = ins[0].values();
        for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] / av[i];
        break;
      }
      case Op::tanh: {
        if (!ins[0].requires_grad()) break;
        auto& acc = accum(ins[0]);
        const auto& ov = rec.output.values();
        for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * (Real(1) - ov[i] * ov[i]);
        break;
      }
      case Op::relu: {
        if (!ins[0].requires_grad()) break;
        auto& acc = accum(ins[0]);
        const auto& av = ins[0].values();
        for (size_t i = 0; i < g.size(); ++i) acc[i] += av[i] > Real(0) ? g[i] : Real(0);
        break;
      }
      case Op::gelu: {
        if (!ins[0].requires_grad()) break;
        auto& acc = accum(ins[0]);
        const auto& av = ins[0].values();
        for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * detail::gelu_bwd(av[i]);
        break;
      }
      case Op::sum:
      case Op::mean: {
        if (!ins[0].requires_grad()) break;
        auto& acc = accum(ins[0]);
        const auto& a = ins[0];
        if (!rec.attrs.lastdim) {
          const Real scale = rec.op == Op::mean ? Real(1) / Real(a.numel()) : Real(1);
          for (size_t i = 0; i < acc.size(); ++i) acc[i] += g[0] * scale;
        } else {
          auto [rows, d] = detail::row_geometry(a.shape());
          const Real scale = rec.op == Op::mean ? Real(1) / Real(d) : Real(1);
          for (int r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) acc[size_t(r * d + j)] += g[size_t(r)] * scale;
        }
        break;
      }
      case Op::max: {
        if (!ins[0].requires_grad()) break;
        auto& acc = accum(ins[0]);
        const auto& a = ins[0];
        if (!rec.attrs.lastdim) {
          int arg = 0;
          for (int i = 1; i < a.numel(); ++i)
            if (a.at(i) > a.at(arg)) arg = i;
          acc[size_t(arg)] += g[0];
        } else {
          auto [rows, d] = detail::row_geometry(a.shape());
          for (int r = 0; r < rows; ++r) {
            int arg = 0;
            for (int j = 1; j < d; ++j)
              if (a.at(r * d + j) > a.at(r * d + arg)) arg = j;
            acc[size_t(r * d + arg)] += g[size_t(r)];
          }
        }
        break;
      }
      case Op::softmax_lastdim: {
        if (!ins[0].requires_grad()) break;
        auto& acc = accum(ins[0]);
        const auto& p = rec.output.values();
        auto [rows, d] = detail::row_geometry(ins[0].shape());
        for (int r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (int j = 0; j < d; ++j)
            dot += double(g[size_t(r * d + j)]) * double(p[size_t(r * d + j)]);
          for (int j = 0; j < d; ++j)
            acc[size_t(r * d + j)] +=
                Real(double(p[size_t(r * d + j)]) * (double(g[size_t(r * d + j)]) - dot));
        }
        break;
      }
      case Op::layernorm_lastdim: {
        const auto& x = ins[0];
        const auto& gain = ins[1];
        auto [rows, d] = detail::row_geometry(x.shape());
        const double eps = rec.attrs.real;
        std::vector<Real>* gx = x.requires_grad() ? &accum(x) : nullptr;
        std::vector<Real>* ggain = gain.requires_grad() ? &accum(gain) : nullptr;
        std::vector<Real>* gbias = ins[2].requires_grad() ? &accum(ins[2]) : nullptr;
        for (int r = 0; r < rows; ++r) {
          double mu = 0.0;
          for (int j = 0; j < d; ++j) mu += double(x.at(r * d + j));
          mu /= double(d);
          double var = 0.0;
          for (int j = 0; j < d; ++j) {
            double dv = double(x.at(r * d + j)) - mu;
            var += dv * dv;
          }
          var /= double(d);
          const double rstd = 1.0 / std::sqrt(var + eps);
          // xhat_j = (x_j - mu) * rstd; out_j = xhat_j * gain_j + bias_j
          double mean_gxh = 0.0, mean_gxh_xh = 0.0;
          for (int j = 0; j < d; ++j) {
            double xhat = (double(x.at(r * d + j)) - mu) * rstd;
            double gxh = double(g[size_t(r * d + j)]) * double(gain.at(j));
            mean_gxh += gxh;
            mean_gxh_xh += gxh * xhat;
            if (ggain) (*ggain)[size_t(j)] += Real(double(g[size_t(r * d + j)]) * xhat);
            if (gbias) (*gbias)[size_t(j)] += g[size_t(r * d + j)];
          }
          mean_gxh /= double(d);
          mean_gxh_xh /= double(d);
          if (gx) {
            for (int j = 0; j < d; ++j) {
              double xhat = (double(x.at(r * d + j)) - mu) * rstd;
              double gxh = double(g[size_t(r * d + j)]) * double(gain.at(j));
              (*gx)[size_t(r * d + j)] += Real(rstd * (gxh - mean_gxh - xhat * mean_gxh_xh));
            }
          }
        }
        break;
      }
      case Op::embedding_lookup: {
        if (!ins[0].requires_grad()) break;
        auto& acc = accum(ins[0]);
        const int d = ins[0].dim(1);
        const auto& idx = rec.attrs.ints;
        for (size_t i = 0; i < idx.size(); ++i)
          for (int j = 0; j < d; ++j)
            acc[size_t(idx[i]) * size_t(d) + size_t(j)] += g[i * size_t(d) + size_t(j)];
        break;
      }
    }
  }

  if (write_leaf_grads) {
    std::unordered_map<uint64_t, bool> written;
    for (const auto& rec : recs) {
      for (const auto& t : rec.inputs) {
        if (!t.requires_grad() || produced.count(t.id()) || written.count(t.id())) continue;
        written[t.id()] = true;
        auto st = t.storage();
        if (st->grad.size() != st->values.size()) st->grad.assign(st->values.size(), Real(0));
        auto it = grads.find(t.id());
        if (it != grads.end())
          for (size_t i = 0; i < st->grad.size(); ++i) st->grad[i] += it->second[i];
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Convenience wrappers over apply_primitive.
// ---------------------------------------------------------------------------

template <typename Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
  return apply_primitive(Op::add, std::vector<TensorT<Real>>{a, b});
}
template <typename Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
  return apply_primitive(Op::mul, std::vector<TensorT<Real>>{a, b});
}
template <typename Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b) {
  return apply_primitive(Op::matmul, std::vector<TensorT<Real>>{a, b});
}
template <typename Real>
TensorT<Real> transpose(const TensorT<Real>& a) {
  return apply_primitive(Op::transpose, std::vector<TensorT<Real>>{a});
}
template <typename Real>
TensorT<Real> reshape(const TensorT<Real>& a, const Shape& s) {
  Attrs at;
  at.ints.assign(s.begin(), s.end());
  return apply_primitive(Op::reshape, std::vector<TensorT<Real>>{a}, at);
}
template <typename Real>
TensorT<Real> concat(const std::vector<TensorT<Real>>& xs, int axis) {
  Attrs at;
  at.ints = {axis};
  return apply_primitive(Op::concat, xs, at);
}
template <typename Real>
TensorT<Real> slice(const TensorT<Real>& a, const std::vector<int>& offsets,
                    const std::vector<int>& sizes) {
  Attrs at;
  at.ints = offsets;
  at.ints.insert(at.ints.end(), sizes.begin(), sizes.end());
  return apply_primitive(Op::slice, std::vector<TensorT<Real>>{a}, at);
}
template <typename Real>
TensorT<Real> vexp(const TensorT<Real>& a) {
  return apply_primitive(Op::exp, std::vector<TensorT<Real>>{a});
}
template <typename Real>
TensorT<Real> vlog(const TensorT<Real>& a) {
  return apply_primitive(Op::log, std::vector<TensorT<Real>>{a});
}
template <typename Real>
TensorT<Real> vtanh(const TensorT<Real>& a) {
  return apply_primitive(Op::tanh, std::vector<TensorT<Real>>{a});
}
template <typename Real>
TensorT<Real> relu(const TensorT<Real>& a) {
  return apply_primitive(Op::relu, std::vector<TensorT<Real>>{a});
}
template <typename Real>
TensorT<Real> gelu(const TensorT<Real>& a) {
  return apply_primitive(Op::gelu, std::vector<TensorT<Real>>{a});
}
template <typename Real>
TensorT<Real> sum_all(const TensorT<Real>& a) {
  return apply_primitive(Op::sum, std::vector<TensorT<Real>>{a});
}
template <typename Real>
TensorT<Real> mean_all(const TensorT<Real>& a) {
  return apply_primitive(Op::mean, std::vector<TensorT<Real>>{a});
}
template <typename Real>
TensorT<Real> max_lastdim(const TensorT<Real>& a) {
  Attrs at;
  at.lastdim = true;
  return apply_primitive(Op::max, std::vector<TensorT<Real>>{a}, at);
}
template <typename Real>
TensorT<Real> max_all(const TensorT<Real>& a) {
  return apply_primitive(Op::max, std::vector<TensorT<Real>>{a});
}
template <typename Real>
TensorT<Real> softmax_lastdim(const TensorT<Real>& a) {
  return apply_primitive(Op::softmax_lastdim, std::vector<TensorT<Real>>{a});
}
template <typename Real>
TensorT<Real> layernorm_lastdim(const TensorT<Real>& x, const TensorT<Real>& gain,
                                const TensorT<Real>& bias, double eps = 1e-5) {
  Attrs at;
  at.real = eps;
  return apply_primitive(Op::layernorm_lastdim, std::vector<TensorT<Real>>{x, gain, bias}, at);
}
template <typename Real>
TensorT<Real> embedding_lookup(const TensorT<Real>& table, const std::vector<int>& indices) {
  Attrs at;
  at.ints = indices;
  return apply_primitive(Op::embedding_lookup, std::vector<TensorT<Real>>{table}, at);
}

// a - b and scalar scaling, built on the primitive set.
template <typename Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
  return add(a, mul(b, TensorT<Real>::scalar(Real(-1))));
}
template <typename Real>
TensorT<Real> scale(const TensorT<Real>& a, Real s) {
  return mul(a, TensorT<Real>::scalar(s));
}
template <typename Real>
TensorT<Real> shift(const TensorT<Real>& a, Real s) {
  return add(a, TensorT<Real>::scalar(s));
}

}  // namespace rearrange
