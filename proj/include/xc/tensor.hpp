#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "xc/error.hpp"

namespace xc {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream o;
  o << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) o << ',';
    o << s[i];
  }
  o << ']';
  return o.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(s));
    n *= d;
  }
  return n;
}

// Dense row-major f32 tensor node.  Values are written once by the op that
// produces them; grads accumulate during backward replay.  Parameter
// updates go through mutable_data() between steps.
struct TensorNode {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // allocated on first touch
  bool tracked = false;     // reverse pass visits this node
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false) {
    int64_t n = shape_numel(shape);
    if ((int64_t)data.size() != n)
      throw ShapeError("data size " + std::to_string(data.size()) +
                       " does not fill shape " + shape_str(shape));
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->tracked = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>((size_t)n, 0.f),
                  requires_grad);
  }
  static Tensor full(Shape shape, float v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>((size_t)n, v),
                  requires_grad);
  }
  static Tensor randn(Shape shape, std::mt19937_64& rng, float stddev,
                      bool requires_grad = false) {
    auto n = shape_numel(shape);
    std::vector<float> d((size_t)n);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : d) v = (float)(dist(rng) * stddev);
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return (bool)node_; }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(int i) const { return node_->shape[(size_t)i]; }
  int rank() const { return (int)node_->shape.size(); }
  int64_t numel() const { return (int64_t)node_->value.size(); }
  const std::vector<float>& data() const { return node_->value; }
  std::vector<float>& mutable_data() { return node_->value; }
  bool tracked() const { return node_ && node_->tracked; }

  std::vector<float>& grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.f);
    return node_->grad;
  }
  const std::vector<float>* grad_if_any() const {
    return node_->grad.empty() ? nullptr : &node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  float item() const {
    if (numel() != 1)
      throw ContractError("item() on non-scalar tensor " +
                          shape_str(node_->shape));
    return node_->value[0];
  }

  std::shared_ptr<TensorNode> node_;
};

inline std::vector<float>& ensure_grad(const std::shared_ptr<TensorNode>& n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), 0.f);
  return n->grad;
}

// Reverse-mode tape.  Construction activates it for the current thread;
// ops record their backward closures while one is active.  No active tape
// means pure inference.  A tape replays at most once, in reverse order.
class Tape {
 public:
  Tape() : prev_(active_ref()) { active_ref() = this; }
  ~Tape() { active_ref() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_ref(); }

  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
  size_t size() const { return entries_.size(); }

  void backward(const Tensor& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward requires a scalar loss, got " +
                          shape_str(loss.shape()));
    if (!loss.tracked())
      throw ContractError("loss does not depend on any tracked tensor");
    if (consumed_) throw ContractError("tape already replayed once");
    consumed_ = true;
    ensure_grad(loss.node_)[0] += 1.f;
    for (size_t i = entries_.size(); i-- > 0;) entries_[i]();
  }

 private:
  static Tape*& active_ref() {
    static thread_local Tape* a = nullptr;
    return a;
  }
  std::vector<std::function<void()>> entries_;
  Tape* prev_;
  bool consumed_ = false;
};

inline bool op_tracks(std::initializer_list<const Tensor*> ins) {
  if (!Tape::active()) return false;
  for (auto* t : ins)
    if (t->tracked()) return true;
  return false;
}

// Counts multiply-accumulates done inside attention score/value products
// while a scope is active on this thread.
struct MacCounter {
  uint64_t attention_macs = 0;
};

class MacScope {
 public:
  explicit MacScope(MacCounter& c) : prev_(active_ref()) { active_ref() = &c; }
  ~MacScope() { active_ref() = prev_; }
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;
  static MacCounter* active() { return active_ref(); }

 private:
  static MacCounter*& active_ref() {
    static thread_local MacCounter* a = nullptr;
    return a;
  }
  MacCounter* prev_;
};

// ---- elementwise and linear ops ----

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + " shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<float> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  Tensor c(a.shape(), std::move(out));
  if (op_tracks({&a, &b})) {
    c.node_->tracked = true;
    auto an = a.node_, bn = b.node_, cn = c.node_;
    Tape::active()->record([an, bn, cn] {
      if (cn->grad.empty()) return;
      const auto& g = cn->grad;
      if (an->tracked) {
        auto& da = ensure_grad(an);
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (bn->tracked) {
        auto& db = ensure_grad(bn);
        for (size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      }
    });
  }
  return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<float> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  Tensor c(a.shape(), std::move(out));
  if (op_tracks({&a, &b})) {
    c.node_->tracked = true;
    auto an = a.node_, bn = b.node_, cn = c.node_;
    Tape::active()->record([an, bn, cn] {
      if (cn->grad.empty()) return;
      const auto& g = cn->grad;
      if (an->tracked) {
        auto& da = ensure_grad(an);
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bn->value[i];
      }
      if (bn->tracked) {
        auto& db = ensure_grad(bn);
        for (size_t i = 0; i < g.size(); ++i) db[i] += g[i] * an->value[i];
      }
    });
  }
  return c;
}

inline Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.data());
  for (auto& v : out) v *= s;
  Tensor c(a.shape(), std::move(out));
  if (op_tracks({&a})) {
    c.node_->tracked = true;
    auto an = a.node_, cn = c.node_;
    Tape::active()->record([an, cn, s] {
      if (cn->grad.empty() || !an->tracked) return;
      auto& da = ensure_grad(an);
      for (size_t i = 0; i < cn->grad.size(); ++i) da[i] += cn->grad[i] * s;
    });
  }
  return c;
}

// y = g[0] * x with a trainable scalar g of shape [1].
inline Tensor gate_scale(const Tensor& x, const Tensor& g) {
  if (g.numel() != 1)
    throw ShapeError("gate must be a single scalar, got " +
                     shape_str(g.shape()));
  float gv = g.data()[0];
  std::vector<float> out(x.data());
  for (auto& v : out) v *= gv;
  Tensor c(x.shape(), std::move(out));
  if (op_tracks({&x, &g})) {
    c.node_->tracked = true;
    auto xn = x.node_, gn = g.node_, cn = c.node_;
    Tape::active()->record([xn, gn, cn, gv] {
      if (cn->grad.empty()) return;
      const auto& gr = cn->grad;
      if (xn->tracked) {
        auto& dx = ensure_grad(xn);
        for (size_t i = 0; i < gr.size(); ++i) dx[i] += gr[i] * gv;
      }
      if (gn->tracked) {
        double acc = 0;
        for (size_t i = 0; i < gr.size(); ++i)
          acc += (double)gr[i] * xn->value[i];
        ensure_grad(gn)[0] += (float)acc;
      }
    });
  }
  return c;
}

// y[t,c] = x[t,c] + b[c]
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
    throw ShapeError("add_bias shapes " + shape_str(x.shape()) + " and " +
                     shape_str(b.shape()));
  int64_t rows = x.dim(0), cols = x.dim(1);
  std::vector<float> out(x.data());
  const auto& bd = b.data();
  for (int64_t t = 0; t < rows; ++t)
    for (int64_t c = 0; c < cols; ++c) out[(size_t)(t * cols + c)] += bd[(size_t)c];
  Tensor y({rows, cols}, std::move(out));
  if (op_tracks({&x, &b})) {
    y.node_->tracked = true;
    auto xn = x.node_, bn = b.node_, yn = y.node_;
    Tape::active()->record([xn, bn, yn, rows, cols] {
      if (yn->grad.empty()) return;
      const auto& g = yn->grad;
      if (xn->tracked) {
        auto& dx = ensure_grad(xn);
        for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      }
      if (bn->tracked) {
        auto& db = ensure_grad(bn);
        for (int64_t t = 0; t < rows; ++t)
          for (int64_t c = 0; c < cols; ++c)
            db[(size_t)c] += g[(size_t)(t * cols + c)];
      }
    });
  }
  return y;
}

// c[m,n] = a[m,k] * b[k,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul shape mismatch " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out((size_t)(m * n), 0.f);
  const float* A = a.data().data();
  const float* B = b.data().data();
  for (int64_t i = 0; i < m; ++i) {
    float* C = &out[(size_t)(i * n)];
    for (int64_t t = 0; t < k; ++t) {
      float av = A[i * k + t];
      const float* Bt = &B[t * n];
      for (int64_t j = 0; j < n; ++j) C[j] += av * Bt[j];
    }
  }
  Tensor c({m, n}, std::move(out));
  if (op_tracks({&a, &b})) {
    c.node_->tracked = true;
    auto an = a.node_, bn = b.node_, cn = c.node_;
    Tape::active()->record([an, bn, cn, m, k, n] {
      if (cn->grad.empty()) return;
      const float* G = cn->grad.data();
      if (an->tracked) {
        auto& da = ensure_grad(an);
        const float* B = bn->value.data();
        for (int64_t i = 0; i < m; ++i) {
          const float* Gi = &G[i * n];
          for (int64_t t = 0; t < k; ++t) {
            const float* Bt = &B[t * n];
            double acc = 0;
            for (int64_t j = 0; j < n; ++j) acc += (double)Gi[j] * Bt[j];
            da[(size_t)(i * k + t)] += (float)acc;
          }
        }
      }
      if (bn->tracked) {
        auto& db = ensure_grad(bn);
        const float* A = an->value.data();
        for (int64_t i = 0; i < m; ++i) {
          const float* Gi = &G[i * n];
          for (int64_t t = 0; t < k; ++t) {
            float av = A[i * k + t];
            float* Dt = &db[(size_t)(t * n)];
            for (int64_t j = 0; j < n; ++j) Dt[j] += av * Gi[j];
          }
        }
      }
    });
  }
  return c;
}

// c[m,n] = a[m,k] * b[n,k]^T  (rows of b are the output columns)
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("matmul_nt shape mismatch " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()) + "^T");
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<float> out((size_t)(m * n));
  const float* A = a.data().data();
  const float* B = b.data().data();
  for (int64_t i = 0; i < m; ++i) {
    const float* Ai = &A[i * k];
    for (int64_t j = 0; j < n; ++j) {
      const float* Bj = &B[j * k];
      double acc = 0;
      for (int64_t t = 0; t < k; ++t) acc += (double)Ai[t] * Bj[t];
      out[(size_t)(i * n + j)] = (float)acc;
    }
  }
  Tensor c({m, n}, std::move(out));
  if (op_tracks({&a, &b})) {
    c.node_->tracked = true;
    auto an = a.node_, bn = b.node_, cn = c.node_;
    Tape::active()->record([an, bn, cn, m, k, n] {
      if (cn->grad.empty()) return;
      const float* G = cn->grad.data();
      if (an->tracked) {
        auto& da = ensure_grad(an);
        const float* B = bn->value.data();
        for (int64_t i = 0; i < m; ++i) {
          float* Di = &da[(size_t)(i * k)];
          const float* Gi = &G[i * n];
          for (int64_t j = 0; j < n; ++j) {
            float gv = Gi[j];
            const float* Bj = &B[j * k];
            for (int64_t t = 0; t < k; ++t) Di[t] += gv * Bj[t];
          }
        }
      }
      if (bn->tracked) {
        auto& db = ensure_grad(bn);
        const float* A = an->value.data();
        for (int64_t i = 0; i < m; ++i) {
          const float* Ai = &A[i * k];
          const float* Gi = &G[i * n];
          for (int64_t j = 0; j < n; ++j) {
            float gv = Gi[j];
            float* Dj = &db[(size_t)(j * k)];
            for (int64_t t = 0; t < k; ++t) Dj[t] += gv * Ai[t];
          }
        }
      }
    });
  }
  return c;
}

inline Tensor silu(const Tensor& x) {
  std::vector<float> out(x.data().size());
  const auto& xd = x.data();
  for (size_t i = 0; i < out.size(); ++i) {
    double s = 1.0 / (1.0 + std::exp(-(double)xd[i]));
    out[i] = (float)((double)xd[i] * s);
  }
  Tensor y(x.shape(), std::move(out));
  if (op_tracks({&x})) {
    y.node_->tracked = true;
    auto xn = x.node_, yn = y.node_;
    Tape::active()->record([xn, yn] {
      if (yn->grad.empty() || !xn->tracked) return;
      auto& dx = ensure_grad(xn);
      for (size_t i = 0; i < yn->grad.size(); ++i) {
        double v = xn->value[i];
        double s = 1.0 / (1.0 + std::exp(-v));
        dx[i] += (float)((double)yn->grad[i] * s * (1.0 + v * (1.0 - s)));
      }
    });
  }
  return y;
}

// Numerically stabilized softmax along `axis`.
inline Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("softmax axis out of range for " + shape_str(x.shape()));
  const auto& s = x.shape();
  int64_t outer = 1, inner = 1, n = s[(size_t)axis];
  for (int i = 0; i < axis; ++i) outer *= s[(size_t)i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[(size_t)i];
  std::vector<float> out(x.data().size());
  const auto& xd = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t r = 0; r < inner; ++r) {
      int64_t base = o * n * inner + r;
      double m = -1e300;
      for (int64_t i = 0; i < n; ++i)
        m = std::max(m, (double)xd[(size_t)(base + i * inner)]);
      double sum = 0;
      for (int64_t i = 0; i < n; ++i)
        sum += std::exp((double)xd[(size_t)(base + i * inner)] - m);
      for (int64_t i = 0; i < n; ++i)
        out[(size_t)(base + i * inner)] =
            (float)(std::exp((double)xd[(size_t)(base + i * inner)] - m) / sum);
    }
  }
  Tensor y(x.shape(), std::move(out));
  if (op_tracks({&x})) {
    y.node_->tracked = true;
    auto xn = x.node_, yn = y.node_;
    Tape::active()->record([xn, yn, outer, inner, n] {
      if (yn->grad.empty() || !xn->tracked) return;
      auto& dx = ensure_grad(xn);
      const auto& p = yn->value;
      const auto& dy = yn->grad;
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t r = 0; r < inner; ++r) {
          int64_t base = o * n * inner + r;
          double dot = 0;
          for (int64_t i = 0; i < n; ++i) {
            size_t idx = (size_t)(base + i * inner);
            dot += (double)dy[idx] * p[idx];
          }
          for (int64_t i = 0; i < n; ++i) {
            size_t idx = (size_t)(base + i * inner);
            dx[idx] += (float)(p[idx] * ((double)dy[idx] - dot));
          }
        }
      }
    });
  }
  return y;
}

// RMSNorm over the last axis: y = x / sqrt(mean(x^2) + eps) * w
inline Tensor rms_norm(const Tensor& x, const Tensor& w, float eps) {
  if (x.rank() < 1 || w.rank() != 1 ||
      w.dim(0) != x.shape().back())
    throw ShapeError("rms_norm shapes " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  int64_t n = x.shape().back();
  int64_t rows = x.numel() / n;
  std::vector<float> out(x.data().size());
  std::vector<float> inv((size_t)rows);
  const auto& xd = x.data();
  const auto& wd = w.data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = &xd[(size_t)(r * n)];
    double ss = 0;
    for (int64_t c = 0; c < n; ++c) ss += (double)xr[c] * xr[c];
    double iv = 1.0 / std::sqrt(ss / (double)n + (double)eps);
    inv[(size_t)r] = (float)iv;
    float* yr = &out[(size_t)(r * n)];
    for (int64_t c = 0; c < n; ++c)
      yr[c] = (float)((double)xr[c] * iv * (double)wd[(size_t)c]);
  }
  Tensor y(x.shape(), std::move(out));
  if (op_tracks({&x, &w})) {
    y.node_->tracked = true;
    auto xn = x.node_, wn = w.node_, yn = y.node_;
    Tape::active()->record([xn, wn, yn, rows, n, inv] {
      if (yn->grad.empty()) return;
      const auto& dy = yn->grad;
      const auto& xd = xn->value;
      const auto& wd = wn->value;
      if (xn->tracked) {
        auto& dx = ensure_grad(xn);
        for (int64_t r = 0; r < rows; ++r) {
          const float* xr = &xd[(size_t)(r * n)];
          const float* gr = &dy[(size_t)(r * n)];
          double iv = inv[(size_t)r];
          double dot = 0;
          for (int64_t c = 0; c < n; ++c)
            dot += (double)gr[c] * wd[(size_t)c] * xr[c];
          double k = iv * iv * iv * dot / (double)n;
          float* dr = &dx[(size_t)(r * n)];
          for (int64_t c = 0; c < n; ++c)
            dr[c] += (float)((double)gr[c] * wd[(size_t)c] * iv - xr[c] * k);
        }
      }
      if (wn->tracked) {
        auto& dw = ensure_grad(wn);
        for (int64_t r = 0; r < rows; ++r) {
          const float* xr = &xd[(size_t)(r * n)];
          const float* gr = &dy[(size_t)(r * n)];
          double iv = inv[(size_t)r];
          for (int64_t c = 0; c < n; ++c)
            dw[(size_t)c] += (float)((double)gr[c] * xr[c] * iv);
        }
      }
    });
  }
  return y;
}

// out[t,:] = table[ids[t],:]   (embedding lookup / row gather)
inline Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids) {
  if (table.rank() != 2)
    throw ShapeError("gather_rows table must be rank 2, got " +
                     shape_str(table.shape()));
  int64_t rows = table.dim(0), cols = table.dim(1);
  for (auto id : ids)
    if (id < 0 || id >= rows)
      throw ShapeError("row index " + std::to_string(id) +
                       " out of range for table " + shape_str(table.shape()));
  std::vector<float> out((size_t)((int64_t)ids.size() * cols));
  const auto& td = table.data();
  for (size_t t = 0; t < ids.size(); ++t)
    std::memcpy(&out[t * (size_t)cols], &td[(size_t)(ids[t] * cols)],
                (size_t)cols * sizeof(float));
  Tensor y({(int64_t)ids.size(), cols}, std::move(out));
  if (op_tracks({&table})) {
    y.node_->tracked = true;
    auto tn = table.node_, yn = y.node_;
    Tape::active()->record([tn, yn, ids, cols] {
      if (yn->grad.empty() || !tn->tracked) return;
      auto& dt = ensure_grad(tn);
      const auto& g = yn->grad;
      for (size_t t = 0; t < ids.size(); ++t) {
        float* drow = &dt[(size_t)(ids[t] * cols)];
        const float* grow = &g[t * (size_t)cols];
        for (int64_t c = 0; c < cols; ++c) drow[c] += grow[c];
      }
    });
  }
  return y;
}

// Rotary position encoding applied per head.  x is [T, H*dh]; the head's
// channel c < dh/2 pairs with c + dh/2; pair (x1, x2) rotates by
// angle = (pos0 + t) * theta^(-2c/dh).
inline void rope_rotate(std::vector<float>& buf, int64_t T, int64_t H,
                        int64_t dh, int64_t pos0, float theta, bool inverse) {
  int64_t half = dh / 2;
  for (int64_t t = 0; t < T; ++t) {
    double pos = (double)(pos0 + t);
    for (int64_t h = 0; h < H; ++h) {
      float* base = &buf[(size_t)(t * H * dh + h * dh)];
      for (int64_t c = 0; c < half; ++c) {
        double freq = std::pow((double)theta, -2.0 * (double)c / (double)dh);
        double ang = pos * freq;
        double cs = std::cos(ang), sn = std::sin(ang);
        if (inverse) sn = -sn;
        double x1 = base[c], x2 = base[c + half];
        base[c] = (float)(x1 * cs - x2 * sn);
        base[c + half] = (float)(x1 * sn + x2 * cs);
      }
    }
  }
}

inline Tensor rope(const Tensor& x, int64_t n_heads, int64_t pos0,
                   float theta) {
  if (x.rank() != 2 || n_heads <= 0 || x.dim(1) % n_heads != 0)
    throw ShapeError("rope input " + shape_str(x.shape()) + " with " +
                     std::to_string(n_heads) + " heads");
  int64_t dh = x.dim(1) / n_heads;
  if (dh % 2 != 0)
    throw ShapeError("rope head dim must be even, got " + std::to_string(dh));
  int64_t T = x.dim(0);
  std::vector<float> out(x.data());
  rope_rotate(out, T, n_heads, dh, pos0, theta, false);
  Tensor y(x.shape(), std::move(out));
  if (op_tracks({&x})) {
    y.node_->tracked = true;
    auto xn = x.node_, yn = y.node_;
    Tape::active()->record([xn, yn, T, n_heads, dh, pos0, theta] {
      if (yn->grad.empty() || !xn->tracked) return;
      std::vector<float> g(yn->grad);
      rope_rotate(g, T, n_heads, dh, pos0, theta, true);
      auto& dx = ensure_grad(xn);
      for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    });
  }
  return y;
}

struct AttendOpts {
  bool causal = true;
  // Row i of q may attend key positions j <= i + causal_offset.  A full
  // self-attention pass uses 0; a single decode step over a cache of S-1
  // past entries uses S-1.
  int64_t causal_offset = 0;
  float scale = 0.f;  // 0 -> 1/sqrt(head_dim)
  float dropout_p = 0.f;
  std::mt19937_64* rng = nullptr;  // required when dropout_p > 0
};

// Single-head scaled dot-product attention: q [F,D], k/v [S,D] -> [F,D].
// Fused op: one tape entry regardless of window sizes.  Score and value
// MACs are added to the active MacCounter.
inline Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v,
                     const AttendOpts& opts = {}) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 ||
      q.dim(1) != k.dim(1) || k.shape() != v.shape())
    throw ShapeError("attend shapes q" + shape_str(q.shape()) + " k" +
                     shape_str(k.shape()) + " v" + shape_str(v.shape()));
  int64_t F = q.dim(0), S = k.dim(0), D = q.dim(1);
  float alpha = opts.scale != 0.f ? opts.scale : (float)(1.0 / std::sqrt((double)D));
  if (opts.causal && opts.causal_offset < 0)
    throw ContractError("negative causal offset");
  bool drop = opts.dropout_p > 0.f;
  if (drop && !opts.rng) throw ContractError("dropout requires an rng");
  float keep_inv = drop ? 1.f / (1.f - opts.dropout_p) : 1.f;

  std::vector<float> probs((size_t)(F * S), 0.f);
  std::vector<uint8_t> mask;
  if (drop) mask.assign((size_t)(F * S), 1);
  std::vector<float> out((size_t)(F * D), 0.f);
  const float* Q = q.data().data();
  const float* K = k.data().data();
  const float* V = v.data().data();
  uint64_t macs = 0;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int64_t i = 0; i < F; ++i) {
    int64_t w = opts.causal ? std::min(S, i + opts.causal_offset + 1) : S;
    if (w <= 0)
      throw ContractError("attend row " + std::to_string(i) +
                          " has empty attention window");
    const float* qi = &Q[i * D];
    double m = -1e300;
    std::vector<double> sc((size_t)w);
    for (int64_t j = 0; j < w; ++j) {
      const float* kj = &K[j * D];
      double acc = 0;
      for (int64_t d = 0; d < D; ++d) acc += (double)qi[d] * kj[d];
      sc[(size_t)j] = acc * alpha;
      m = std::max(m, sc[(size_t)j]);
    }
    double sum = 0;
    for (int64_t j = 0; j < w; ++j) sum += std::exp(sc[(size_t)j] - m);
    float* pi = &probs[(size_t)(i * S)];
    for (int64_t j = 0; j < w; ++j)
      pi[j] = (float)(std::exp(sc[(size_t)j] - m) / sum);
    float* oi = &out[(size_t)(i * D)];
    if (drop) {
      uint8_t* mi = &mask[(size_t)(i * S)];
      for (int64_t j = 0; j < w; ++j)
        if (unit(*opts.rng) < (double)opts.dropout_p) mi[j] = 0;
      for (int64_t j = 0; j < w; ++j) {
        if (!mi[j]) continue;
        float pj = pi[j] * keep_inv;
        const float* vj = &V[j * D];
        for (int64_t d = 0; d < D; ++d) oi[d] += pj * vj[d];
      }
    } else {
      for (int64_t j = 0; j < w; ++j) {
        float pj = pi[j];
        const float* vj = &V[j * D];
        for (int64_t d = 0; d < D; ++d) oi[d] += pj * vj[d];
      }
    }
    macs += (uint64_t)w * (uint64_t)D * 2;
  }
  if (auto* mc = MacScope::active()) mc->attention_macs += macs;

  Tensor y({F, D}, std::move(out));
  if (op_tracks({&q, &k, &v})) {
    y.node_->tracked = true;
    auto qn = q.node_, kn = k.node_, vn = v.node_, yn = y.node_;
    auto opt = opts;
    Tape::active()->record([qn, kn, vn, yn, probs = std::move(probs),
                            mask = std::move(mask), F, S, D, alpha, opt,
                            keep_inv] {
      if (yn->grad.empty()) return;
      const float* G = yn->grad.data();
      const float* Q = qn->value.data();
      const float* K = kn->value.data();
      const float* V = vn->value.data();
      bool drop = !mask.empty();
      std::vector<float>* dq = qn->tracked ? &ensure_grad(qn) : nullptr;
      std::vector<float>* dk = kn->tracked ? &ensure_grad(kn) : nullptr;
      std::vector<float>* dv = vn->tracked ? &ensure_grad(vn) : nullptr;
      std::vector<double> dp((size_t)S), ds((size_t)S);
      for (int64_t i = 0; i < F; ++i) {
        int64_t w = opt.causal ? std::min(S, i + opt.causal_offset + 1) : S;
        const float* gi = &G[i * D];
        const float* pi = &probs[(size_t)(i * S)];
        const uint8_t* mi = drop ? &mask[(size_t)(i * S)] : nullptr;
        for (int64_t j = 0; j < w; ++j) {
          const float* vj = &V[j * D];
          double acc = 0;
          for (int64_t d = 0; d < D; ++d) acc += (double)gi[d] * vj[d];
          double keep = (!drop || mi[j]) ? (double)keep_inv : 0.0;
          dp[(size_t)j] = acc * keep;
          if (dv && keep != 0.0) {
            float pj = pi[j] * (float)keep;
            float* dvj = &(*dv)[(size_t)(j * D)];
            for (int64_t d = 0; d < D; ++d) dvj[d] += pj * gi[d];
          }
        }
        double dot = 0;
        for (int64_t j = 0; j < w; ++j) dot += dp[(size_t)j] * pi[j];
        for (int64_t j = 0; j < w; ++j)
          ds[(size_t)j] = pi[j] * (dp[(size_t)j] - dot);
        const float* qi = &Q[i * D];
        for (int64_t j = 0; j < w; ++j) {
          float dsj = (float)(ds[(size_t)j] * alpha);
          if (dsj == 0.f) continue;
          const float* kj = &K[j * D];
          if (dq) {
            float* dqi = &(*dq)[(size_t)(i * D)];
            for (int64_t d = 0; d < D; ++d) dqi[d] += dsj * kj[d];
          }
          if (dk) {
            float* dkj = &(*dk)[(size_t)(j * D)];
            for (int64_t d = 0; d < D; ++d) dkj[d] += dsj * qi[d];
          }
        }
      }
    });
  }
  return y;
}

// Mean cross-entropy of next-token targets over masked positions.
// logits [T,V]; targets[t] in [0,V); mask[t] != 0 selects the position.
inline Tensor cross_entropy(const Tensor& logits,
                            const std::vector<int64_t>& targets,
                            const std::vector<uint8_t>& mask) {
  if (logits.rank() != 2)
    throw ShapeError("cross_entropy logits must be [T,V], got " +
                     shape_str(logits.shape()));
  int64_t T = logits.dim(0), V = logits.dim(1);
  if ((int64_t)targets.size() != T || (int64_t)mask.size() != T)
    throw ShapeError("cross_entropy target/mask length " +
                     std::to_string(targets.size()) + "/" +
                     std::to_string(mask.size()) + " vs T=" +
                     std::to_string(T));
  int64_t M = 0;
  for (int64_t t = 0; t < T; ++t) {
    if (mask[(size_t)t]) {
      ++M;
      if (targets[(size_t)t] < 0 || targets[(size_t)t] >= V)
        throw ShapeError("cross_entropy target " +
                         std::to_string(targets[(size_t)t]) +
                         " out of range for V=" + std::to_string(V));
    }
  }
  if (M == 0) throw ContractError("cross_entropy over an empty target set");
  const auto& ld = logits.data();
  double total = 0;
  for (int64_t t = 0; t < T; ++t) {
    if (!mask[(size_t)t]) continue;
    const float* row = &ld[(size_t)(t * V)];
    double mx = -1e300;
    for (int64_t c = 0; c < V; ++c) mx = std::max(mx, (double)row[c]);
    double sum = 0;
    for (int64_t c = 0; c < V; ++c) sum += std::exp((double)row[c] - mx);
    total += (mx + std::log(sum)) - (double)row[(size_t)targets[(size_t)t]];
  }
  Tensor loss({1}, {(float)(total / (double)M)});
  if (op_tracks({&logits})) {
    loss.node_->tracked = true;
    auto ln = logits.node_, on = loss.node_;
    Tape::active()->record([ln, on, targets, mask, T, V, M] {
      if (on->grad.empty() || !ln->tracked) return;
      double g = (double)on->grad[0] / (double)M;
      auto& dl = ensure_grad(ln);
      const auto& ld = ln->value;
      for (int64_t t = 0; t < T; ++t) {
        if (!mask[(size_t)t]) continue;
        const float* row = &ld[(size_t)(t * V)];
        double mx = -1e300;
        for (int64_t c = 0; c < V; ++c) mx = std::max(mx, (double)row[c]);
        double sum = 0;
        for (int64_t c = 0; c < V; ++c) sum += std::exp((double)row[c] - mx);
        float* dr = &dl[(size_t)(t * V)];
        for (int64_t c = 0; c < V; ++c) {
          double p = std::exp((double)row[c] - mx) / sum;
          double delta = (c == targets[(size_t)t]) ? 1.0 : 0.0;
          dr[c] += (float)(g * (p - delta));
        }
      }
    });
  }
  return loss;
}

// Scalar sum of all elements (double accumulator).
inline Tensor sum(const Tensor& x) {
  double acc = 0;
  for (float v : x.data()) acc += (double)v;
  Tensor y({1}, {(float)acc});
  if (op_tracks({&x})) {
    y.node_->tracked = true;
    auto xn = x.node_, yn = y.node_;
    Tape::active()->record([xn, yn] {
      if (yn->grad.empty() || !xn->tracked) return;
      float g = yn->grad[0];
      auto& dx = ensure_grad(xn);
      for (auto& v : dx) v += g;
    });
  }
  return y;
}

inline Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
  if (x.rank() != 2 || c0 < 0 || c1 <= c0 || c1 > x.dim(1))
    throw ShapeError("slice_cols [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") of " + shape_str(x.shape()));
  int64_t T = x.dim(0), C = x.dim(1), W = c1 - c0;
  std::vector<float> out((size_t)(T * W));
  const auto& xd = x.data();
  for (int64_t t = 0; t < T; ++t)
    std::memcpy(&out[(size_t)(t * W)], &xd[(size_t)(t * C + c0)],
                (size_t)W * sizeof(float));
  Tensor y({T, W}, std::move(out));
  if (op_tracks({&x})) {
    y.node_->tracked = true;
    auto xn = x.node_, yn = y.node_;
    Tape::active()->record([xn, yn, T, C, W, c0] {
      if (yn->grad.empty() || !xn->tracked) return;
      auto& dx = ensure_grad(xn);
      const auto& g = yn->grad;
      for (int64_t t = 0; t < T; ++t)
        for (int64_t c = 0; c < W; ++c)
          dx[(size_t)(t * C + c0 + c)] += g[(size_t)(t * W + c)];
    });
  }
  return y;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of zero tensors");
  int64_t T = parts[0].dim(0), C = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != T)
      throw ShapeError("concat_cols row mismatch at " + shape_str(p.shape()));
    C += p.dim(1);
  }
  std::vector<float> out((size_t)(T * C));
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t W = p.dim(1);
    const auto& pd = p.data();
    for (int64_t t = 0; t < T; ++t)
      std::memcpy(&out[(size_t)(t * C + off)], &pd[(size_t)(t * W)],
                  (size_t)W * sizeof(float));
    off += W;
  }
  Tensor y({T, C}, std::move(out));
  bool track = false;
  if (Tape::active())
    for (const auto& p : parts) track = track || p.tracked();
  if (track) {
    y.node_->tracked = true;
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node_);
    auto yn = y.node_;
    Tape::active()->record([nodes, yn, T, C] {
      if (yn->grad.empty()) return;
      const auto& g = yn->grad;
      int64_t off = 0;
      for (auto& n : nodes) {
        int64_t W = n->shape[1];
        if (n->tracked) {
          auto& dn = ensure_grad(n);
          for (int64_t t = 0; t < T; ++t)
            for (int64_t c = 0; c < W; ++c)
              dn[(size_t)(t * W + c)] += g[(size_t)(t * C + off + c)];
        }
        off += W;
      }
    });
  }
  return y;
}

// ---- utilities ----

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "max_abs_diff");
  float m = 0;
  for (size_t i = 0; i < a.data().size(); ++i)
    m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

inline int64_t argmax_first(const float* row, int64_t n) {
  int64_t best = 0;
  for (int64_t i = 1; i < n; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

inline void zero_grads(const std::vector<Tensor>& params) {
  for (auto p : params) p.zero_grad();
}

inline void zero_grads(const std::vector<std::pair<std::string, Tensor>>& params) {
  for (auto [name, p] : params) p.zero_grad();
}

// Central-difference gradient verification.  `f` rebuilds the graph from
// the given parameters on every call.  Analytic grads come from one taped
// backward; numeric evaluations run with no tape active.  Returns the
// worst relative error max|ga-gn| / max(1, |ga|+|gn|).
inline double grad_check(const std::function<Tensor()>& f,
                         std::vector<Tensor> params, float eps) {
  for (auto& p : params) p.zero_grad();
  {
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
  }
  std::vector<std::vector<float>> analytic;
  for (auto& p : params) {
    if (auto* g = p.grad_if_any())
      analytic.push_back(*g);
    else
      analytic.emplace_back(p.data().size(), 0.f);
  }
  double worst = 0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi].mutable_data();
    for (size_t i = 0; i < data.size(); ++i) {
      float orig = data[i];
      data[i] = orig + eps;
      double fp = f().item();
      data[i] = orig - eps;
      double fm = f().item();
      data[i] = orig;
      double num = (fp - fm) / (2.0 * (double)eps);
      double ana = analytic[pi][i];
      double rel =
          std::fabs(ana - num) / std::max(1.0, std::fabs(ana) + std::fabs(num));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace xc
