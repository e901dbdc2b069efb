// Dense float64 tensors with reverse-mode automatic differentiation.
//
// Design: a dynamic tape rebuilt on every forward pass. Operations record a
// node with a backward closure when any input requires gradients. Tensors are
// immutable values; parameters (Param) live outside the tape and are bound to
// leaf nodes per pass. Broadcasting is restricted to leading-dimension
// expansion: a binary op accepts equal shapes or one operand whose shape is a
// trailing suffix of the other's.
//
// Everything is float64 and single-threaded per tape; distinct tapes on
// distinct threads are independent.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace mv3d::ad {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

[[noreturn]] inline void op_error(const char* op, const std::string& msg) {
  throw std::invalid_argument(std::string(op) + ": " + msg);
}

// A persistent trainable array. Lives in the model, not on any tape.
struct Param {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  Param(std::string n, Shape s) : name(std::move(n)), shape(std::move(s)) {
    value.assign(numel(shape), 0.0);
    grad.assign(numel(shape), 0.0);
  }
};

class Tape;

struct Tensor {
  Shape shape;
  std::shared_ptr<const std::vector<double>> data;
  int node = -1;  // tape node id, -1 when not recorded
  bool requires_grad = false;
  uint64_t gen = 0;  // tape generation at record time

  int64_t size() const { return numel(shape); }
  int rank() const { return static_cast<int>(shape.size()); }
  const double* ptr() const { return data->data(); }
  double operator[](int64_t i) const { return (*data)[static_cast<size_t>(i)]; }
  double item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: not a scalar");
    return (*data)[0];
  }

  static Tensor constant(Shape s, std::vector<double> v) {
    if (numel(s) != static_cast<int64_t>(v.size()))
      throw std::invalid_argument("Tensor::constant: shape does not match data length");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(std::move(v));
    return t;
  }

  static Tensor zeros(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(numel(t.shape), 0.0);
    return t;
  }

  static Tensor full(Shape s, double v) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(numel(t.shape), v);
    return t;
  }
};

// Recording of one forward pass. Node backward closures consume the output
// gradient and accumulate into the input nodes' buffers via Tape::accumulate.
class Tape {
 public:
  struct Node {
    const char* op;
    int64_t out_numel;
    std::function<void(Tape&, const std::vector<double>&)> backward;  // empty for leaves
  };

  static Tape& active() {
    thread_local Tape t;
    return t;
  }

  void reset() {
    nodes_.clear();
    grads_.clear();
    bindings_.clear();
    bound_.clear();
    ++gen_;
    last_backward_visits_ = 0;
  }

  uint64_t generation() const { return gen_; }
  size_t size() const { return nodes_.size(); }
  size_t last_backward_visits() const { return last_backward_visits_; }

  int add_node(const char* op, int64_t out_numel,
               std::function<void(Tape&, const std::vector<double>&)> bw) {
    nodes_.push_back(Node{op, out_numel, std::move(bw)});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  void accumulate(int node, const double* g, int64_t n) {
    if (node < 0) return;
    auto& buf = grads_[static_cast<size_t>(node)];
    if (buf.empty()) buf.assign(static_cast<size_t>(nodes_[node].out_numel), 0.0);
    for (int64_t i = 0; i < n; ++i) buf[static_cast<size_t>(i)] += g[i];
  }

  const std::vector<double>* grad(int node) const {
    if (node < 0 || node >= static_cast<int>(grads_.size())) return nullptr;
    if (grads_[static_cast<size_t>(node)].empty()) return nullptr;
    return &grads_[static_cast<size_t>(node)];
  }

  // Fresh leaf holding externally supplied values.
  Tensor leaf(Shape shape, std::shared_ptr<const std::vector<double>> data, bool requires_grad) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::move(data);
    t.requires_grad = requires_grad;
    if (requires_grad) {
      t.node = add_node("leaf", t.size(), nullptr);
      t.gen = gen_;
    }
    return t;
  }

  // Leaf bound to a parameter; after backward() its gradient is added into
  // p.grad. Repeated use of the same parameter returns the same leaf.
  Tensor use(Param& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    Tensor t = leaf(p.shape, std::make_shared<std::vector<double>>(p.value), true);
    bindings_.emplace_back(t.node, &p);
    bound_.emplace(&p, t);
    return t;
  }

  // Reverse sweep from a scalar loss. Each recorded node is visited at most
  // once, in reverse topological (= recording) order. Leaf gradients stay
  // readable through grad() until the next reset(); bound parameters get
  // their gradient accumulated into Param::grad.
  void backward(const Tensor& loss) {
    if (loss.node < 0) throw std::invalid_argument("backward: loss is detached from the tape");
    if (loss.gen != gen_) throw std::invalid_argument("backward: loss belongs to a reset tape");
    if (loss.size() != 1 || loss.rank() > 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape));
    for (auto& g : grads_) g.clear();
    grads_[static_cast<size_t>(loss.node)] = {1.0};
    last_backward_visits_ = 0;
    for (int i = loss.node; i >= 0; --i) {
      auto& buf = grads_[static_cast<size_t>(i)];
      if (buf.empty()) continue;
      ++last_backward_visits_;
      if (nodes_[static_cast<size_t>(i)].backward) nodes_[static_cast<size_t>(i)].backward(*this, buf);
    }
    for (auto& [node, param] : bindings_) {
      const auto* g = grad(node);
      if (!g) continue;
      for (size_t i = 0; i < g->size(); ++i) param->grad[i] += (*g)[i];
    }
  }

 private:
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::vector<std::pair<int, Param*>> bindings_;
  std::unordered_map<Param*, Tensor> bound_;
  uint64_t gen_ = 1;
  size_t last_backward_visits_ = 0;
};

namespace detail {

inline void check_gen(const char* op, const Tensor& t) {
  if (t.node >= 0 && t.gen != Tape::active().generation())
    op_error(op, "input tensor belongs to a reset tape");
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> vals,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Tape&, const std::vector<double>&)> bw) {
  Tensor out;
  out.shape = std::move(shape);
  out.data = std::make_shared<std::vector<double>>(std::move(vals));
  for (const Tensor* t : inputs)
    if (t->requires_grad) out.requires_grad = true;
  if (out.requires_grad) {
    for (const Tensor* t : inputs) check_gen(op, *t);
    out.node = Tape::active().add_node(op, out.size(), std::move(bw));
    out.gen = Tape::active().generation();
  }
  return out;
}

// True when `small` equals the trailing dims of `big` (scalar counts).
inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i)
    if (small[i] != big[off + i]) return false;
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (suffix broadcast)

namespace detail {

template <typename FwdF, typename BmakeA, typename BmakeB>
Tensor broadcast_binary(const char* op, const Tensor& a, const Tensor& b, FwdF fwd, BmakeA bga,
                        BmakeB bgb) {
  const Tensor *big = &a, *small = &b;
  bool a_is_big = true;
  if (a.shape != b.shape) {
    if (is_suffix(b.shape, a.shape)) {
      // keep
    } else if (is_suffix(a.shape, b.shape)) {
      big = &b;
      small = &a;
      a_is_big = false;
    } else {
      op_error(op, "shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) +
                       " are incompatible (only leading-dim broadcast is supported)");
    }
  }
  int64_t n = big->size(), bn = small->size();
  std::vector<double> out(static_cast<size_t>(n));
  const double* bp = big->ptr();
  const double* sp = small->ptr();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(a_is_big ? bp[i] : sp[i % bn], a_is_big ? sp[i % bn] : bp[i]);

  Tensor ta = a, tb = b;  // capture copies (shared data)
  auto bw = [ta, tb, a_is_big, n, bn, bga, bgb](Tape& tape, const std::vector<double>& g) {
    const Tensor& bigT = a_is_big ? ta : tb;
    const Tensor& smallT = a_is_big ? tb : ta;
    if (bigT.node >= 0) {
      std::vector<double> gb(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) {
        double av = a_is_big ? bigT[i] : smallT[i % bn];
        double bv = a_is_big ? smallT[i % bn] : bigT[i];
        gb[static_cast<size_t>(i)] = g[static_cast<size_t>(i)] * (a_is_big ? bga(av, bv) : bgb(av, bv));
      }
      tape.accumulate(bigT.node, gb.data(), n);
    }
    if (smallT.node >= 0) {
      std::vector<double> gs(static_cast<size_t>(bn), 0.0);
      for (int64_t i = 0; i < n; ++i) {
        double av = a_is_big ? bigT[i] : smallT[i % bn];
        double bv = a_is_big ? smallT[i % bn] : bigT[i];
        gs[static_cast<size_t>(i % bn)] += g[static_cast<size_t>(i)] * (a_is_big ? bgb(av, bv) : bga(av, bv));
      }
      tape.accumulate(smallT.node, gs.data(), bn);
    }
  };
  return make_result(op, big->shape, std::move(out), {&a, &b}, std::move(bw));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::broadcast_binary(
      "multiply", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

// s * x + t with scalar constants.
inline Tensor affine(const Tensor& a, double s, double t) {
  int64_t n = a.size();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = s * a[i] + t;
  Tensor ta = a;
  auto bw = [ta, s, n](Tape& tape, const std::vector<double>& g) {
    if (ta.node < 0) return;
    std::vector<double> gi(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) gi[static_cast<size_t>(i)] = s * g[static_cast<size_t>(i)];
    tape.accumulate(ta.node, gi.data(), n);
  };
  return detail::make_result("affine", a.shape, std::move(out), {&a}, std::move(bw));
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, affine(b, -1.0, 0.0)); }

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

template <typename FwdF, typename GradF>
Tensor unary(const char* op, const Tensor& a, FwdF fwd, GradF gradf) {
  int64_t n = a.size();
  std::vector<double> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(a[i]);
  auto saved = std::make_shared<std::vector<double>>(out);
  Tensor ta = a;
  auto bw = [ta, saved, gradf, n](Tape& tape, const std::vector<double>& g) {
    if (ta.node < 0) return;
    std::vector<double> gi(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
      gi[static_cast<size_t>(i)] = g[static_cast<size_t>(i)] * gradf(ta[i], (*saved)[static_cast<size_t>(i)]);
    tape.accumulate(ta.node, gi.data(), n);
  };
  return make_result(op, a.shape, std::move(out), {&a}, std::move(bw));
}

}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& a) {
  // Subgradient at 0 is 0.
  return detail::unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor power(const Tensor& a, double p) {
  return detail::unary(
      "power", a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo < hi)) op_error("clamp", "lo must be < hi");
  return detail::unary(
      "clamp", a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Matrix multiply (rank-2 only)

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ar = a + static_cast<int64_t>(i) * k;
    double* cr = c + static_cast<int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = ar[p];
      if (av == 0) continue;
      const double* br = b + static_cast<int64_t>(p) * n;
      for (int j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// C[m,k] += G[m,n] * B[k,n]^T
inline void mm_nt(const double* g, const double* b, double* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* gr = g + static_cast<int64_t>(i) * n;
    double* cr = c + static_cast<int64_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      const double* br = b + static_cast<int64_t>(j) * n;
      double s = 0;
      for (int p = 0; p < n; ++p) s += gr[p] * br[p];
      cr[j] += s;
    }
  }
}

// C[k,n] += A[m,k]^T * G[m,n]
inline void mm_tn(const double* a, const double* g, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ar = a + static_cast<int64_t>(i) * k;
    const double* gr = g + static_cast<int64_t>(i) * n;
    for (int j = 0; j < k; ++j) {
      double av = ar[j];
      if (av == 0) continue;
      double* cr = c + static_cast<int64_t>(j) * n;
      for (int p = 0; p < n; ++p) cr[p] += av * gr[p];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    op_error("matmul", "expects rank-2 inputs, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
  int m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
  if (k != k2)
    op_error("matmul", "inner dimensions differ: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  detail::mm_nn(a.ptr(), b.ptr(), out.data(), m, k, n);
  Tensor ta = a, tb = b;
  auto bw = [ta, tb, m, k, n](Tape& tape, const std::vector<double>& g) {
    if (ta.node >= 0) {
      std::vector<double> ga(static_cast<size_t>(m) * k, 0.0);
      detail::mm_nt(g.data(), tb.ptr(), ga.data(), m, n, k);
      tape.accumulate(ta.node, ga.data(), static_cast<int64_t>(ga.size()));
    }
    if (tb.node >= 0) {
      std::vector<double> gb(static_cast<size_t>(k) * n, 0.0);
      detail::mm_tn(ta.ptr(), g.data(), gb.data(), m, k, n);
      tape.accumulate(tb.node, gb.data(), static_cast<int64_t>(gb.size()));
    }
  };
  return detail::make_result("matmul", {m, n}, std::move(out), {&a, &b}, std::move(bw));
}

// ---------------------------------------------------------------------------
// Softmax / layer norm

inline Tensor softmax(const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.rank())
    op_error("softmax", "axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape));
  int64_t outer = 1, inner = 1, nd = a.shape[axis];
  for (int i = 0; i < axis; ++i) outer *= a.shape[i];
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.shape[i];
  std::vector<double> out(static_cast<size_t>(a.size()));
  const double* x = a.ptr();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * nd * inner + in;
      double mx = -1e300;
      for (int64_t d = 0; d < nd; ++d) mx = std::max(mx, x[base + d * inner]);
      double sum = 0;
      for (int64_t d = 0; d < nd; ++d) {
        double e = std::exp(x[base + d * inner] - mx);
        out[static_cast<size_t>(base + d * inner)] = e;
        sum += e;
      }
      for (int64_t d = 0; d < nd; ++d) out[static_cast<size_t>(base + d * inner)] /= sum;
    }
  auto saved = std::make_shared<std::vector<double>>(out);
  Tensor ta = a;
  auto bw = [ta, saved, outer, inner, nd](Tape& tape, const std::vector<double>& g) {
    if (ta.node < 0) return;
    std::vector<double> gi(saved->size());
    const double* y = saved->data();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        int64_t base = o * nd * inner + in;
        double dot = 0;
        for (int64_t d = 0; d < nd; ++d) {
          int64_t idx = base + d * inner;
          dot += g[static_cast<size_t>(idx)] * y[idx];
        }
        for (int64_t d = 0; d < nd; ++d) {
          int64_t idx = base + d * inner;
          gi[static_cast<size_t>(idx)] = y[idx] * (g[static_cast<size_t>(idx)] - dot);
        }
      }
    tape.accumulate(ta.node, gi.data(), static_cast<int64_t>(gi.size()));
  };
  return detail::make_result("softmax", a.shape, std::move(out), {&a}, std::move(bw));
}

// Normalizes over the last axis to zero mean / unit variance. No affine part;
// apply scale/shift with mul/add if wanted. The variance guard is 1e-12 so
// the unit-variance property holds to ~1e-12 on non-degenerate rows.
inline Tensor layer_norm(const Tensor& a) {
  if (a.rank() < 1) op_error("layer_norm", "expects rank >= 1");
  int64_t cols = a.shape.back();
  int64_t rows = a.size() / cols;
  if (cols < 2) op_error("layer_norm", "last dimension must be >= 2");
  std::vector<double> out(static_cast<size_t>(a.size()));
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(a.size()));
  auto istd = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  const double* x = a.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cols;
    double mean = 0;
    for (int64_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<double>(cols);
    double var = 0;
    for (int64_t c = 0; c < cols; ++c) {
      double d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    double inv = 1.0 / std::sqrt(var + 1e-12);
    (*istd)[static_cast<size_t>(r)] = inv;
    for (int64_t c = 0; c < cols; ++c) {
      double h = (xr[c] - mean) * inv;
      (*xhat)[static_cast<size_t>(r * cols + c)] = h;
      out[static_cast<size_t>(r * cols + c)] = h;
    }
  }
  Tensor ta = a;
  auto bw = [ta, xhat, istd, rows, cols](Tape& tape, const std::vector<double>& g) {
    if (ta.node < 0) return;
    std::vector<double> gi(xhat->size());
    for (int64_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * cols;
      const double* hr = xhat->data() + r * cols;
      double gmean = 0, ghmean = 0;
      for (int64_t c = 0; c < cols; ++c) {
        gmean += gr[c];
        ghmean += gr[c] * hr[c];
      }
      gmean /= static_cast<double>(cols);
      ghmean /= static_cast<double>(cols);
      double inv = (*istd)[static_cast<size_t>(r)];
      for (int64_t c = 0; c < cols; ++c)
        gi[static_cast<size_t>(r * cols + c)] = inv * (gr[c] - gmean - hr[c] * ghmean);
    }
    tape.accumulate(ta.node, gi.data(), static_cast<int64_t>(gi.size()));
  };
  return detail::make_result("layer_norm", a.shape, std::move(out), {&a}, std::move(bw));
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    op_error("reshape", "cannot reshape " + shape_str(a.shape) + " to " + shape_str(shape));
  Tensor ta = a;
  std::vector<double> out(*a.data);  // flat copy; layout is identical
  auto bw = [ta](Tape& tape, const std::vector<double>& g) {
    tape.accumulate(ta.node, g.data(), static_cast<int64_t>(g.size()));
  };
  return detail::make_result("reshape", std::move(shape), std::move(out), {&a}, std::move(bw));
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) op_error("concatenate", "no inputs");
  int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) op_error("concatenate", "axis out of range");
  for (const auto& p : parts) {
    if (p.rank() != rank) op_error("concatenate", "rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && p.shape[d] != parts[0].shape[d])
        op_error("concatenate",
                 "shape mismatch " + shape_str(p.shape) + " vs " + shape_str(parts[0].shape));
  }
  Shape out_shape = parts[0].shape;
  int total_axis = 0;
  for (const auto& p : parts) total_axis += p.shape[axis];
  out_shape[axis] = total_axis;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[d];

  std::vector<double> out(static_cast<size_t>(numel(out_shape)));
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t block = p.shape[axis] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.ptr() + o * block, block, out.data() + o * total_axis * inner + off);
    off += block;
  }

  std::vector<Tensor> saved = parts;
  auto bw = [saved, outer, inner, total_axis](Tape& tape, const std::vector<double>& g) {
    int64_t start = 0;
    for (const auto& p : saved) {
      int64_t block = p.size() / outer;
      if (p.node >= 0) {
        std::vector<double> gp(static_cast<size_t>(p.size()));
        for (int64_t o = 0; o < outer; ++o)
          std::copy_n(g.data() + o * total_axis * inner + start, block, gp.data() + o * block);
        tape.accumulate(p.node, gp.data(), static_cast<int64_t>(gp.size()));
      }
      start += block;
    }
  };
  std::vector<const Tensor*> ptrs;
  Tensor out_t;
  out_t.shape = out_shape;
  out_t.data = std::make_shared<std::vector<double>>(std::move(out));
  for (const auto& p : parts)
    if (p.requires_grad) out_t.requires_grad = true;
  if (out_t.requires_grad) {
    for (const auto& p : parts) detail::check_gen("concatenate", p);
    out_t.node = Tape::active().add_node("concatenate", out_t.size(), std::move(bw));
    out_t.gen = Tape::active().generation();
  }
  return out_t;
}

inline Tensor slice(const Tensor& a, const std::vector<int>& begin, const std::vector<int>& end) {
  int rank = a.rank();
  if (static_cast<int>(begin.size()) != rank || static_cast<int>(end.size()) != rank)
    op_error("slice", "begin/end rank mismatch for " + shape_str(a.shape));
  Shape out_shape(rank);
  for (int d = 0; d < rank; ++d) {
    if (begin[d] < 0 || end[d] > a.shape[d] || begin[d] >= end[d])
      op_error("slice", "bad range [" + std::to_string(begin[d]) + "," + std::to_string(end[d]) +
                            ") on dim " + std::to_string(d) + " of " + shape_str(a.shape));
    out_shape[d] = end[d] - begin[d];
  }
  // strides of input
  std::vector<int64_t> stride(static_cast<size_t>(rank), 1);
  for (int d = rank - 2; d >= 0; --d) stride[d] = stride[d + 1] * a.shape[d + 1];
  int64_t n = numel(out_shape);
  std::vector<double> out(static_cast<size_t>(n));
  std::vector<int> idx(static_cast<size_t>(rank), 0);
  const double* x = a.ptr();
  for (int64_t i = 0; i < n; ++i) {
    int64_t src = 0;
    for (int d = 0; d < rank; ++d) src += (begin[d] + idx[d]) * stride[d];
    out[static_cast<size_t>(i)] = x[src];
    for (int d = rank - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  Tensor ta = a;
  auto bw = [ta, begin, out_shape, stride, rank, n](Tape& tape, const std::vector<double>& g) {
    if (ta.node < 0) return;
    std::vector<double> gi(static_cast<size_t>(ta.size()), 0.0);
    std::vector<int> idx(static_cast<size_t>(rank), 0);
    for (int64_t i = 0; i < n; ++i) {
      int64_t dst = 0;
      for (int d = 0; d < rank; ++d) dst += (begin[d] + idx[d]) * stride[d];
      gi[static_cast<size_t>(dst)] += g[static_cast<size_t>(i)];
      for (int d = rank - 1; d >= 0; --d) {
        if (++idx[d] < out_shape[d]) break;
        idx[d] = 0;
      }
    }
    tape.accumulate(ta.node, gi.data(), static_cast<int64_t>(gi.size()));
  };
  return detail::make_result("slice", out_shape, std::move(out), {&a}, std::move(bw));
}

namespace detail {

inline std::vector<double> permute_raw(const double* x, const Shape& in_shape,
                                       const std::vector<int>& axes) {
  int rank = static_cast<int>(in_shape.size());
  Shape out_shape(rank);
  for (int d = 0; d < rank; ++d) out_shape[d] = in_shape[axes[d]];
  std::vector<int64_t> in_stride(static_cast<size_t>(rank), 1);
  for (int d = rank - 2; d >= 0; --d) in_stride[d] = in_stride[d + 1] * in_shape[d + 1];
  int64_t n = numel(in_shape);
  std::vector<double> out(static_cast<size_t>(n));
  std::vector<int> idx(static_cast<size_t>(rank), 0);  // index in OUT coordinates
  for (int64_t i = 0; i < n; ++i) {
    int64_t src = 0;
    for (int d = 0; d < rank; ++d) src += idx[d] * in_stride[axes[d]];
    out[static_cast<size_t>(i)] = x[src];
    for (int d = rank - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace detail

inline Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  int rank = a.rank();
  if (static_cast<int>(axes.size()) != rank) op_error("permute", "axes rank mismatch");
  std::vector<bool> seen(static_cast<size_t>(rank), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= rank || seen[static_cast<size_t>(ax)]) op_error("permute", "axes must be a permutation");
    seen[static_cast<size_t>(ax)] = true;
  }
  Shape out_shape(rank);
  for (int d = 0; d < rank; ++d) out_shape[d] = a.shape[axes[d]];
  std::vector<double> out = detail::permute_raw(a.ptr(), a.shape, axes);
  Tensor ta = a;
  auto bw = [ta, axes, out_shape, rank](Tape& tape, const std::vector<double>& g) {
    if (ta.node < 0) return;
    std::vector<int> inv(static_cast<size_t>(rank));
    for (int d = 0; d < rank; ++d) inv[static_cast<size_t>(axes[d])] = d;
    std::vector<double> gi = detail::permute_raw(g.data(), out_shape, inv);
    tape.accumulate(ta.node, gi.data(), static_cast<int64_t>(gi.size()));
  };
  return detail::make_result("permute", out_shape, std::move(out), {&a}, std::move(bw));
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) op_error("transpose", "expects rank-2, got " + shape_str(a.shape));
  return permute(a, {1, 0});
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor reduce_sum(const Tensor& a) {
  double s = 0;
  for (int64_t i = 0; i < a.size(); ++i) s += a[i];
  Tensor ta = a;
  auto bw = [ta](Tape& tape, const std::vector<double>& g) {
    if (ta.node < 0) return;
    std::vector<double> gi(static_cast<size_t>(ta.size()), g[0]);
    tape.accumulate(ta.node, gi.data(), static_cast<int64_t>(gi.size()));
  };
  return detail::make_result("reduce_sum", Shape{}, {s}, {&a}, std::move(bw));
}

inline Tensor reduce_mean(const Tensor& a) {
  double inv = 1.0 / static_cast<double>(a.size());
  Tensor s = reduce_sum(a);
  return affine(s, inv, 0.0);
}

inline Tensor reduce_sum_axis(const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.rank()) op_error("reduce_sum", "axis out of range");
  int64_t outer = 1, inner = 1, nd = a.shape[axis];
  for (int i = 0; i < axis; ++i) outer *= a.shape[i];
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.shape[i];
  Shape out_shape;
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis) out_shape.push_back(a.shape[i]);
  std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
  const double* x = a.ptr();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t d = 0; d < nd; ++d)
      for (int64_t in = 0; in < inner; ++in)
        out[static_cast<size_t>(o * inner + in)] += x[o * nd * inner + d * inner + in];
  Tensor ta = a;
  auto bw = [ta, outer, inner, nd](Tape& tape, const std::vector<double>& g) {
    if (ta.node < 0) return;
    std::vector<double> gi(static_cast<size_t>(ta.size()));
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t d = 0; d < nd; ++d)
        for (int64_t in = 0; in < inner; ++in)
          gi[static_cast<size_t>(o * nd * inner + d * inner + in)] = g[static_cast<size_t>(o * inner + in)];
    tape.accumulate(ta.node, gi.data(), static_cast<int64_t>(gi.size()));
  };
  return detail::make_result("reduce_sum", out_shape, std::move(out), {&a}, std::move(bw));
}

inline Tensor reduce_mean_axis(const Tensor& a, int axis) {
  double inv = 1.0 / static_cast<double>(a.shape[axis]);
  return affine(reduce_sum_axis(a, axis), inv, 0.0);
}

// ---------------------------------------------------------------------------
// Gather / im2col

inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  if (a.rank() != 2) op_error("gather_rows", "expects rank-2, got " + shape_str(a.shape));
  int m = a.shape[0], n = a.shape[1];
  for (int i : idx)
    if (i < 0 || i >= m) op_error("gather_rows", "row index " + std::to_string(i) + " out of range");
  std::vector<double> out(idx.size() * static_cast<size_t>(n));
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(a.ptr() + static_cast<int64_t>(idx[r]) * n, n, out.data() + r * static_cast<size_t>(n));
  Tensor ta = a;
  auto bw = [ta, idx, n](Tape& tape, const std::vector<double>& g) {
    if (ta.node < 0) return;
    std::vector<double> gi(static_cast<size_t>(ta.size()), 0.0);
    for (size_t r = 0; r < idx.size(); ++r)
      for (int c = 0; c < n; ++c) gi[static_cast<size_t>(idx[r]) * n + c] += g[r * static_cast<size_t>(n) + c];
    tape.accumulate(ta.node, gi.data(), static_cast<int64_t>(gi.size()));
  };
  return detail::make_result("gather_rows", {static_cast<int>(idx.size()), n}, std::move(out), {&a},
                             std::move(bw));
}

// Unfolds [H, W, C] into [Ho*Wo, kh*kw*C] patches (zero padding), the matmul
// form of a strided convolution. Column order is (ky, kx, c).
inline Tensor im2col(const Tensor& a, int kh, int kw, int stride, int pad) {
  if (a.rank() != 3) op_error("im2col", "expects [H,W,C], got " + shape_str(a.shape));
  if (kh < 1 || kw < 1 || stride < 1 || pad < 0) op_error("im2col", "bad kernel/stride/pad");
  int h = a.shape[0], w = a.shape[1], c = a.shape[2];
  int ho = (h + 2 * pad - kh) / stride + 1;
  int wo = (w + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1) op_error("im2col", "kernel larger than padded input");
  int cols = kh * kw * c;
  std::vector<double> out(static_cast<size_t>(ho) * wo * cols, 0.0);
  const double* x = a.ptr();
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox) {
      double* row = out.data() + (static_cast<int64_t>(oy) * wo + ox) * cols;
      for (int ky = 0; ky < kh; ++ky) {
        int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= w) continue;
          std::copy_n(x + (static_cast<int64_t>(iy) * w + ix) * c, c, row + (ky * kw + kx) * c);
        }
      }
    }
  Tensor ta = a;
  auto bw = [ta, kh, kw, stride, pad, h, w, c, ho, wo, cols](Tape& tape, const std::vector<double>& g) {
    if (ta.node < 0) return;
    std::vector<double> gi(static_cast<size_t>(ta.size()), 0.0);
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        const double* row = g.data() + (static_cast<int64_t>(oy) * wo + ox) * cols;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            double* dst = gi.data() + (static_cast<int64_t>(iy) * w + ix) * c;
            const double* src = row + (ky * kw + kx) * c;
            for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
          }
        }
      }
    tape.accumulate(ta.node, gi.data(), static_cast<int64_t>(gi.size()));
  };
  return detail::make_result("im2col", {ho * wo, cols}, std::move(out), {&a}, std::move(bw));
}

// ---------------------------------------------------------------------------
// Composites

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Uniform primitive entry point

enum class OpKind {
  kMatmul,
  kAdd,
  kMultiply,
  kSigmoid,
  kRelu,
  kSoftmax,
  kLayerNorm,
  kConcatenate,
  kReshape,
  kSlice,
  kReduceMean,
  kReduceSum,
  kLog,
  kExp,
  kPower,
  kClamp,
  kAffine,
  kPermute,
  kGatherRows,
  kIm2col,
};

struct OpAttrs {
  int axis = -1;  // softmax / concat / axis reductions (axis < 0 = full reduction)
  Shape shape;    // reshape
  std::vector<int> begin, end;  // slice
  std::vector<int> axes;        // permute
  std::vector<int> indices;     // gather_rows
  double s = 1.0, t = 0.0;      // affine
  double lo = 0.0, hi = 0.0;    // clamp
  double p = 1.0;               // power
  int kh = 1, kw = 1, stride = 1, pad = 0;  // im2col
};

inline Tensor apply_primitive(OpKind kind, const std::vector<Tensor>& in, const OpAttrs& attrs = {}) {
  auto need = [&](size_t n, const char* op) {
    if (in.size() != n) op_error(op, "expects " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
  };
  switch (kind) {
    case OpKind::kMatmul: need(2, "matmul"); return matmul(in[0], in[1]);
    case OpKind::kAdd: need(2, "add"); return add(in[0], in[1]);
    case OpKind::kMultiply: need(2, "multiply"); return mul(in[0], in[1]);
    case OpKind::kSigmoid: need(1, "sigmoid"); return sigmoid(in[0]);
    case OpKind::kRelu: need(1, "relu"); return relu(in[0]);
    case OpKind::kSoftmax: need(1, "softmax"); return softmax(in[0], attrs.axis);
    case OpKind::kLayerNorm: need(1, "layer_norm"); return layer_norm(in[0]);
    case OpKind::kConcatenate: return concat(in, attrs.axis);
    case OpKind::kReshape: need(1, "reshape"); return reshape(in[0], attrs.shape);
    case OpKind::kSlice: need(1, "slice"); return slice(in[0], attrs.begin, attrs.end);
    case OpKind::kReduceMean:
      need(1, "reduce_mean");
      return attrs.axis < 0 ? reduce_mean(in[0]) : reduce_mean_axis(in[0], attrs.axis);
    case OpKind::kReduceSum:
      need(1, "reduce_sum");
      return attrs.axis < 0 ? reduce_sum(in[0]) : reduce_sum_axis(in[0], attrs.axis);
    case OpKind::kLog: need(1, "log"); return log(in[0]);
    case OpKind::kExp: need(1, "exp"); return exp(in[0]);
    case OpKind::kPower: need(1, "power"); return power(in[0], attrs.p);
    case OpKind::kClamp: need(1, "clamp"); return clamp(in[0], attrs.lo, attrs.hi);
    case OpKind::kAffine: need(1, "affine"); return affine(in[0], attrs.s, attrs.t);
    case OpKind::kPermute: need(1, "permute"); return permute(in[0], attrs.axes);
    case OpKind::kGatherRows: need(1, "gather_rows"); return gather_rows(in[0], attrs.indices);
    case OpKind::kIm2col: need(1, "im2col"); return im2col(in[0], attrs.kh, attrs.kw, attrs.stride, attrs.pad);
  }
  throw std::invalid_argument("apply_primitive: unknown primitive kind " +
                              std::to_string(static_cast<int>(kind)));
}

// ---------------------------------------------------------------------------
// Parameter store and gradient checking

class ParamStore {
 public:
  Param& add(const std::string& name, Shape shape) {
    auto [it, inserted] = params_.emplace(name, nullptr);
    if (!inserted) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    it->second = std::make_unique<Param>(name, std::move(shape));
    return *it->second;
  }

  Param* find(const std::string& name) {
    auto it = params_.find(name);
    return it == params_.end() ? nullptr : it->second.get();
  }

  void zero_grads() {
    for (auto& [k, p] : params_) std::fill(p->grad.begin(), p->grad.end(), 0.0);
  }

  size_t count() const { return params_.size(); }
  int64_t total_entries() const {
    int64_t n = 0;
    for (const auto& [k, p] : params_) n += numel(p->shape);
    return n;
  }

  template <typename F>
  void for_each(F&& f) {  // name order, deterministic
    for (auto& [k, p] : params_) f(*p);
  }
  template <typename F>
  void for_each(F&& f) const {
    for (const auto& [k, p] : params_) f(*p);
  }

 private:
  std::map<std::string, std::unique_ptr<Param>> params_;
};

// Variant of grad_check over a parameter store: forward() must rebuild its
// graph from the stores' current values on the active tape and return a
// scalar loss. Perturbs every entry of every parameter. Resets the tape.
inline double grad_check_params(ParamStore& store, const std::function<Tensor()>& forward,
                                double eps) {
  if (eps <= 0) throw std::invalid_argument("grad_check_params: eps must be > 0");
  Tape& tape = Tape::active();
  tape.reset();
  store.zero_grads();
  Tensor loss = forward();
  tape.backward(loss);
  std::map<std::string, std::vector<double>> analytic;
  store.for_each([&](Param& p) { analytic[p.name] = p.grad; });
  double max_err = 0;
  store.for_each([&](Param& p) {
    for (size_t i = 0; i < p.value.size(); ++i) {
      double keep = p.value[i];
      p.value[i] = keep + eps;
      tape.reset();
      double lp = forward().item();
      p.value[i] = keep - eps;
      tape.reset();
      double lm = forward().item();
      p.value[i] = keep;
      double numeric = (lp - lm) / (2 * eps);
      double a = analytic[p.name][i];
      double err = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
      max_err = std::max(max_err, err);
    }
  });
  tape.reset();
  return max_err;
}

// Compares analytic gradients of f against central finite differences.
// f is called with leaves created on the active tape; it must be
// deterministic. Returns max over parameter entries of
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// Note: resets the active tape.
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         const std::vector<Tensor>& params, double eps) {
  if (eps <= 0) throw std::invalid_argument("grad_check: eps must be > 0");
  std::vector<std::vector<double>> vals;
  vals.reserve(params.size());
  for (const auto& p : params) vals.push_back(*p.data);

  auto eval = [&](bool want_grad, std::vector<int>* leaf_nodes) {
    Tape& tape = Tape::active();
    tape.reset();
    std::vector<Tensor> leaves;
    leaves.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor t = tape.leaf(params[i].shape, std::make_shared<std::vector<double>>(vals[i]), true);
      if (leaf_nodes) leaf_nodes->push_back(t.node);
      leaves.push_back(std::move(t));
    }
    Tensor loss = f(leaves);
    if (loss.size() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
    if (want_grad) tape.backward(loss);
    return loss.item();
  };

  std::vector<int> leaf_nodes;
  eval(true, &leaf_nodes);
  std::vector<std::vector<double>> analytic(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    const auto* g = Tape::active().grad(leaf_nodes[i]);
    analytic[i] = g ? *g : std::vector<double>(vals[i].size(), 0.0);
  }

  double max_err = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    for (size_t j = 0; j < vals[i].size(); ++j) {
      double keep = vals[i][j];
      vals[i][j] = keep + eps;
      double lp = eval(false, nullptr);
      vals[i][j] = keep - eps;
      double lm = eval(false, nullptr);
      vals[i][j] = keep;
      double numeric = (lp - lm) / (2 * eps);
      double a = analytic[i][j];
      double err = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace mv3d::ad
