#pragma once

// Dense float64 tensors plus a define-by-run reverse-mode tape.
// A Graph is installed for the current thread while it is alive; ops executed
// under an active graph record their adjoint steps, ops executed without one
// are plain forward arithmetic.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "sqvlm/errors.hpp"

namespace sqvlm {

using Shape = std::vector<int>;
using BoolVec = std::vector<std::uint8_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
};
using TensorPtr = std::shared_ptr<TensorData>;

inline std::vector<double>& grad_buf(const TensorPtr& p) {
  if (p->grad.empty()) p->grad.assign(p->value.size(), 0.0);
  return p->grad;
}
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto p = std::make_shared<detail::TensorData>();
    p->value.assign(shape_numel(shape), 0.0);
    p->shape = std::move(shape);
    p->requires_grad = requires_grad;
    return Tensor(std::move(p));
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.value()) x = v;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<double> value,
                          bool requires_grad = false) {
    if (shape_numel(shape) != value.size())
      throw ShapeError("data length " + std::to_string(value.size()) +
                       " does not match shape " + shape_str(shape));
    auto p = std::make_shared<detail::TensorData>();
    p->shape = std::move(shape);
    p->value = std::move(value);
    p->requires_grad = requires_grad;
    return Tensor(std::move(p));
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : t.value()) x = dist(rng);
    return t;
  }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  int ndim() const { return static_cast<int>(p_->shape.size()); }
  int dim(int i) const { return p_->shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return p_->value.size(); }

  std::vector<double>& value() { return p_->value; }
  const std::vector<double>& value() const { return p_->value; }
  double item() const {
    if (numel() != 1)
      throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return p_->value[0];
  }

  bool requires_grad() const { return p_->requires_grad; }
  void set_requires_grad(bool b) { p_->requires_grad = b; }
  bool has_grad() const { return !p_->grad.empty(); }
  std::vector<double>& grad() { return detail::grad_buf(p_); }
  const std::vector<double>& grad_view() const { return p_->grad; }
  void zero_grad() { p_->grad.clear(); }

  Tensor clone() const {
    return from_data(p_->shape, p_->value, p_->requires_grad);
  }

  const detail::TensorPtr& ptr() const { return p_; }

 private:
  explicit Tensor(detail::TensorPtr p) : p_(std::move(p)) {}
  detail::TensorPtr p_;
};

class Graph {
 public:
  Graph() : prev_(tl_current) { tl_current = this; }
  ~Graph() { tl_current = prev_; }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* current() { return tl_current; }

  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  std::size_t size() const { return steps_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays adjoints in exact reverse execution
  // order. A graph can be consumed exactly once.
  void backward(const Tensor& loss) {
    if (consumed_) throw StateError("graph already consumed by a backward pass");
    if (loss.numel() != 1)
      throw ShapeError("backward requires a scalar loss, got " +
                       shape_str(loss.shape()));
    consumed_ = true;
    detail::grad_buf(loss.ptr())[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    steps_.clear();
  }

 private:
  std::vector<std::function<void()>> steps_;
  bool consumed_ = false;
  Graph* prev_;
  static thread_local Graph* tl_current;
};

inline thread_local Graph* Graph::tl_current = nullptr;

namespace detail {
inline bool recording(std::initializer_list<const Tensor*> ins) {
  if (!Graph::current()) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}
inline void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2)
    throw ShapeError(std::string(op) + " requires a 2-D tensor, got " +
                     shape_str(t.shape()));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and structural ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  const double* av = a.value().data();
  const double* bv = b.value().data();
  double* ov = out.value().data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
  if (detail::recording({&a, &b})) {
    out.set_requires_grad(true);
    Graph::current()->record([ap = a.ptr(), bp = b.ptr(), op = out.ptr(), n] {
      const std::vector<double>& og = detail::grad_buf(op);
      if (ap->requires_grad) {
        auto& ag = detail::grad_buf(ap);
        for (std::size_t i = 0; i < n; ++i) ag[i] += og[i];
      }
      if (bp->requires_grad) {
        auto& bg = detail::grad_buf(bp);
        for (std::size_t i = 0; i < n; ++i) bg[i] += og[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i)
    out.value()[i] = a.value()[i] * b.value()[i];
  if (detail::recording({&a, &b})) {
    out.set_requires_grad(true);
    Graph::current()->record([ap = a.ptr(), bp = b.ptr(), op = out.ptr(), n] {
      const std::vector<double>& og = detail::grad_buf(op);
      if (ap->requires_grad) {
        auto& ag = detail::grad_buf(ap);
        for (std::size_t i = 0; i < n; ++i) ag[i] += og[i] * bp->value[i];
      }
      if (bp->requires_grad) {
        auto& bg = detail::grad_buf(bp);
        for (std::size_t i = 0; i < n; ++i) bg[i] += og[i] * ap->value[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] * s;
  if (detail::recording({&a})) {
    out.set_requires_grad(true);
    Graph::current()->record([ap = a.ptr(), op = out.ptr(), s, n] {
      const std::vector<double>& og = detail::grad_buf(op);
      auto& ag = detail::grad_buf(ap);
      for (std::size_t i = 0; i < n; ++i) ag[i] += og[i] * s;
    });
  }
  return out;
}

// x:[m,n] + v:[n], v added to every row.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  detail::require_2d(x, "add_rowvec");
  if (v.ndim() != 1 || v.dim(0) != x.dim(1))
    throw ShapeError("add_rowvec expects vector of width " +
                     std::to_string(x.dim(1)) + ", got " + shape_str(v.shape()));
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.value()[i * n + j] = x.value()[i * n + j] + v.value()[j];
  if (detail::recording({&x, &v})) {
    out.set_requires_grad(true);
    Graph::current()->record([xp = x.ptr(), vp = v.ptr(), op = out.ptr(), m, n] {
      const std::vector<double>& og = detail::grad_buf(op);
      if (xp->requires_grad) {
        auto& xg = detail::grad_buf(xp);
        for (std::size_t i = 0; i < og.size(); ++i) xg[i] += og[i];
      }
      if (vp->requires_grad) {
        auto& vg = detail::grad_buf(vp);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) vg[j] += og[i * n + j];
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& x) {
  detail::require_2d(x, "transpose");
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.value()[j * m + i] = x.value()[i * n + j];
  if (detail::recording({&x})) {
    out.set_requires_grad(true);
    Graph::current()->record([xp = x.ptr(), op = out.ptr(), m, n] {
      const std::vector<double>& og = detail::grad_buf(op);
      auto& xg = detail::grad_buf(xp);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) xg[i * n + j] += og[j * m + i];
    });
  }
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  {
    const double* av = a.value().data();
    const double* bv = b.value().data();
    double* ov = out.value().data();
    for (int i = 0; i < m; ++i) {
      double* orow = ov + static_cast<std::size_t>(i) * n;
      for (int kk = 0; kk < k; ++kk) {
        const double aik = av[static_cast<std::size_t>(i) * k + kk];
        const double* brow = bv + static_cast<std::size_t>(kk) * n;
        for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
      }
    }
  }
  if (detail::recording({&a, &b})) {
    out.set_requires_grad(true);
    Graph::current()->record([ap = a.ptr(), bp = b.ptr(), op = out.ptr(), m, k, n] {
      const double* og = detail::grad_buf(op).data();
      if (ap->requires_grad) {
        double* ag = detail::grad_buf(ap).data();
        const double* bv = bp->value.data();
        // dA = dC * B^T
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            const double* grow = og + static_cast<std::size_t>(i) * n;
            const double* brow = bv + static_cast<std::size_t>(l) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ag[static_cast<std::size_t>(i) * k + l] += acc;
          }
      }
      if (bp->requires_grad) {
        double* bg = detail::grad_buf(bp).data();
        const double* av = ap->value.data();
        // dB = A^T * dC
        for (int i = 0; i < m; ++i) {
          const double* grow = og + static_cast<std::size_t>(i) * n;
          for (int l = 0; l < k; ++l) {
            const double ail = av[static_cast<std::size_t>(i) * k + l];
            double* brow = bg + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) brow[j] += ail * grow[j];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// nonlinearities and normalizations

inline Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x.value()[i];
    out.value()[i] = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  }
  if (detail::recording({&x})) {
    out.set_requires_grad(true);
    Graph::current()->record([xp = x.ptr(), op = out.ptr(), n] {
      const std::vector<double>& og = detail::grad_buf(op);
      auto& xg = detail::grad_buf(xp);
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (std::size_t i = 0; i < n; ++i) {
        const double v = xp->value[i];
        const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        xg[i] += og[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// softmax along one axis of an arbitrary-rank tensor, stabilized by
// max-subtraction.
inline Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.ndim())
    throw ShapeError("softmax axis " + std::to_string(axis) +
                     " out of bounds for shape " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  const int len = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.dim(i));
  for (int i = axis + 1; i < x.ndim(); ++i)
    inner *= static_cast<std::size_t>(x.dim(i));

  Tensor out = Tensor::zeros(x.shape());
  const double* xv = x.value().data();
  double* ov = out.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * static_cast<std::size_t>(len) * inner + in;
      double mx = xv[base];
      for (int t = 1; t < len; ++t)
        mx = std::max(mx, xv[base + static_cast<std::size_t>(t) * inner]);
      double sum = 0.0;
      for (int t = 0; t < len; ++t) {
        const double e = std::exp(xv[base + static_cast<std::size_t>(t) * inner] - mx);
        ov[base + static_cast<std::size_t>(t) * inner] = e;
        sum += e;
      }
      for (int t = 0; t < len; ++t)
        ov[base + static_cast<std::size_t>(t) * inner] /= sum;
    }
  if (detail::recording({&x})) {
    out.set_requires_grad(true);
    Graph::current()->record([xp = x.ptr(), op = out.ptr(), outer, inner, len] {
      const std::vector<double>& og = detail::grad_buf(op);
      auto& xg = detail::grad_buf(xp);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * static_cast<std::size_t>(len) * inner + in;
          double dot = 0.0;
          for (int t = 0; t < len; ++t) {
            const std::size_t idx = base + static_cast<std::size_t>(t) * inner;
            dot += og[idx] * op->value[idx];
          }
          for (int t = 0; t < len; ++t) {
            const std::size_t idx = base + static_cast<std::size_t>(t) * inner;
            xg[idx] += op->value[idx] * (og[idx] - dot);
          }
        }
    });
  }
  return out;
}

inline constexpr double kNormEps = 1e-8;

// Row-wise layer normalization over the last axis with learnable gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const int n = x.dim(x.ndim() - 1);
  if (gain.ndim() != 1 || gain.dim(0) != n || bias.ndim() != 1 || bias.dim(0) != n)
    throw ShapeError("layer_norm gain/bias must be vectors of width " +
                     std::to_string(n));
  const std::size_t rows = x.numel() / static_cast<std::size_t>(n);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.value().data() + r * static_cast<std::size_t>(n);
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += xr[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= n;
    const double is = 1.0 / std::sqrt(var + kNormEps);
    inv_std[r] = is;
    double* outr = out.value().data() + r * static_cast<std::size_t>(n);
    for (int j = 0; j < n; ++j) {
      const double xh = (xr[j] - mean) * is;
      xhat[r * static_cast<std::size_t>(n) + j] = xh;
      outr[j] = gain.value()[j] * xh + bias.value()[j];
    }
  }
  if (detail::recording({&x, &gain, &bias})) {
    out.set_requires_grad(true);
    Graph::current()->record([xp = x.ptr(), gp = gain.ptr(), bp = bias.ptr(),
                              op = out.ptr(), xhat = std::move(xhat),
                              inv_std = std::move(inv_std), rows, n] {
      const std::vector<double>& og = detail::grad_buf(op);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * static_cast<std::size_t>(n);
        if (gp->requires_grad) {
          auto& gg = detail::grad_buf(gp);
          for (int j = 0; j < n; ++j) gg[j] += og[base + j] * xhat[base + j];
        }
        if (bp->requires_grad) {
          auto& bg = detail::grad_buf(bp);
          for (int j = 0; j < n; ++j) bg[j] += og[base + j];
        }
        if (xp->requires_grad) {
          auto& xg = detail::grad_buf(xp);
          double mean_dy = 0.0, mean_dy_xhat = 0.0;
          for (int j = 0; j < n; ++j) {
            const double dy = og[base + j] * gp->value[j];
            mean_dy += dy;
            mean_dy_xhat += dy * xhat[base + j];
          }
          mean_dy /= n;
          mean_dy_xhat /= n;
          for (int j = 0; j < n; ++j) {
            const double dy = og[base + j] * gp->value[j];
            xg[base + j] +=
                (dy - mean_dy - xhat[base + j] * mean_dy_xhat) * inv_std[r];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// gathers, reductions, concatenations

inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  detail::require_2d(table, "embedding_lookup");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ShapeError("embedding id " + std::to_string(id) +
                       " out of range for table " + shape_str(table.shape()));
  const int l = static_cast<int>(ids.size());
  if (l == 0) throw ShapeError("embedding_lookup requires at least one id");
  Tensor out = Tensor::zeros({l, d});
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < d; ++j)
      out.value()[i * d + j] = table.value()[static_cast<std::size_t>(ids[i]) * d + j];
  if (detail::recording({&table})) {
    out.set_requires_grad(true);
    Graph::current()->record([tp = table.ptr(), op = out.ptr(), ids, d] {
      const std::vector<double>& og = detail::grad_buf(op);
      auto& tg = detail::grad_buf(tp);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          tg[static_cast<std::size_t>(ids[i]) * d + j] += og[i * d + j];
    });
  }
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of zero tensors");
  const int n = parts[0].dim(1);
  int m = 0;
  for (const Tensor& t : parts) {
    detail::require_2d(t, "concat_rows");
    if (t.dim(1) != n)
      throw ShapeError("concat_rows width mismatch: " + shape_str(t.shape()) +
                       " vs width " + std::to_string(n));
    m += t.dim(0);
  }
  Tensor out = Tensor::zeros({m, n});
  std::size_t off = 0;
  for (const Tensor& t : parts) {
    std::copy(t.value().begin(), t.value().end(), out.value().begin() + off);
    off += t.numel();
  }
  bool rec = false;
  if (Graph::current())
    for (const Tensor& t : parts)
      if (t.requires_grad()) rec = true;
  if (rec) {
    out.set_requires_grad(true);
    std::vector<detail::TensorPtr> ps;
    for (const Tensor& t : parts) ps.push_back(t.ptr());
    Graph::current()->record([ps = std::move(ps), op = out.ptr()] {
      const std::vector<double>& og = detail::grad_buf(op);
      std::size_t off = 0;
      for (const auto& p : ps) {
        if (p->requires_grad) {
          auto& pg = detail::grad_buf(p);
          for (std::size_t i = 0; i < p->value.size(); ++i) pg[i] += og[off + i];
        }
        off += p->value.size();
      }
    });
  }
  return out;
}

inline Tensor slice_cols(const Tensor& x, int start, int count) {
  detail::require_2d(x, "slice_cols");
  const int m = x.dim(0), n = x.dim(1);
  if (start < 0 || count <= 0 || start + count > n)
    throw ShapeError("slice_cols [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") out of bounds for " +
                     shape_str(x.shape()));
  Tensor out = Tensor::zeros({m, count});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < count; ++j)
      out.value()[i * count + j] = x.value()[i * n + start + j];
  if (detail::recording({&x})) {
    out.set_requires_grad(true);
    Graph::current()->record([xp = x.ptr(), op = out.ptr(), m, n, start, count] {
      const std::vector<double>& og = detail::grad_buf(op);
      auto& xg = detail::grad_buf(xp);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < count; ++j)
          xg[i * n + start + j] += og[i * count + j];
    });
  }
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of zero tensors");
  const int m = parts[0].dim(0);
  int n = 0;
  for (const Tensor& t : parts) {
    detail::require_2d(t, "concat_cols");
    if (t.dim(0) != m)
      throw ShapeError("concat_cols height mismatch: " + shape_str(t.shape()));
    n += t.dim(1);
  }
  Tensor out = Tensor::zeros({m, n});
  int coff = 0;
  for (const Tensor& t : parts) {
    const int w = t.dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out.value()[i * n + coff + j] = t.value()[i * w + j];
    coff += w;
  }
  bool rec = false;
  if (Graph::current())
    for (const Tensor& t : parts)
      if (t.requires_grad()) rec = true;
  if (rec) {
    out.set_requires_grad(true);
    std::vector<detail::TensorPtr> ps;
    for (const Tensor& t : parts) ps.push_back(t.ptr());
    Graph::current()->record([ps = std::move(ps), op = out.ptr(), m, n] {
      const std::vector<double>& og = detail::grad_buf(op);
      int coff = 0;
      for (const auto& p : ps) {
        const int w = p->shape[1];
        if (p->requires_grad) {
          auto& pg = detail::grad_buf(p);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) pg[i * w + j] += og[i * n + coff + j];
        }
        coff += w;
      }
    });
  }
  return out;
}

// column means: [m,n] -> [n]
inline Tensor mean_rows(const Tensor& x) {
  detail::require_2d(x, "mean_rows");
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.value()[j] += x.value()[i * n + j];
  for (int j = 0; j < n; ++j) out.value()[j] /= m;
  if (detail::recording({&x})) {
    out.set_requires_grad(true);
    Graph::current()->record([xp = x.ptr(), op = out.ptr(), m, n] {
      const std::vector<double>& og = detail::grad_buf(op);
      auto& xg = detail::grad_buf(xp);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) xg[i * n + j] += og[j] / m;
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& x) {
  Tensor out = Tensor::zeros({1});
  double acc = 0.0;
  for (double v : x.value()) acc += v;
  out.value()[0] = acc;
  if (detail::recording({&x})) {
    out.set_requires_grad(true);
    Graph::current()->record([xp = x.ptr(), op = out.ptr()] {
      const double g = detail::grad_buf(op)[0];
      auto& xg = detail::grad_buf(xp);
      for (std::size_t i = 0; i < xg.size(); ++i) xg[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// cosine similarities
//
// cos(a,b) = a.b / max(sqrt(|a|^2 |b|^2), eps). The sqrt-of-product form makes
// cos(v,v) exactly 1.0 for any nonzero v; zero-norm inputs hit the eps guard
// and come out as 0.

namespace detail {
inline double cosine_pair(const double* a, const double* b, int d, double* sa_out,
                          double* sb_out, double* dot_out) {
  double sa = 0.0, sb = 0.0, dot = 0.0;
  for (int j = 0; j < d; ++j) {
    sa += a[j] * a[j];
    sb += b[j] * b[j];
    dot += a[j] * b[j];
  }
  *sa_out = sa;
  *sb_out = sb;
  *dot_out = dot;
  const double r = std::sqrt(sa * sb);
  return dot / std::max(r, kNormEps);
}

// adjoint of cosine_pair into ga/gb (either may be null)
inline void cosine_pair_grad(const double* a, const double* b, int d, double sa,
                             double sb, double dot, double gout, double* ga,
                             double* gb) {
  const double r = std::sqrt(sa * sb);
  if (r <= kNormEps) {
    if (ga)
      for (int j = 0; j < d; ++j) ga[j] += gout * b[j] / kNormEps;
    if (gb)
      for (int j = 0; j < d; ++j) gb[j] += gout * a[j] / kNormEps;
    return;
  }
  const double inv_r = 1.0 / r;
  const double coef = dot * inv_r * inv_r * inv_r;  // dot / r^3
  if (ga)
    for (int j = 0; j < d; ++j) ga[j] += gout * (b[j] * inv_r - coef * sb * a[j]);
  if (gb)
    for (int j = 0; j < d; ++j) gb[j] += gout * (a[j] * inv_r - coef * sa * b[j]);
}
}  // namespace detail

// row-wise cosine of two [m,n] tensors -> [m]
inline Tensor cosine_rows(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "cosine_rows");
  if (a.shape() != b.shape())
    throw ShapeError("cosine_rows shape mismatch: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({m});
  std::vector<double> sa(m), sb(m), dot(m);
  for (int i = 0; i < m; ++i)
    out.value()[i] = detail::cosine_pair(a.value().data() + i * n,
                                         b.value().data() + i * n, n, &sa[i],
                                         &sb[i], &dot[i]);
  if (detail::recording({&a, &b})) {
    out.set_requires_grad(true);
    Graph::current()->record([ap = a.ptr(), bp = b.ptr(), op = out.ptr(),
                              sa = std::move(sa), sb = std::move(sb),
                              dot = std::move(dot), m, n] {
      const std::vector<double>& og = detail::grad_buf(op);
      double* ga = ap->requires_grad ? detail::grad_buf(ap).data() : nullptr;
      double* gb = bp->requires_grad ? detail::grad_buf(bp).data() : nullptr;
      for (int i = 0; i < m; ++i)
        detail::cosine_pair_grad(
            ap->value.data() + i * n, bp->value.data() + i * n, n, sa[i], sb[i],
            dot[i], og[i], ga ? ga + i * n : nullptr, gb ? gb + i * n : nullptr);
    });
  }
  return out;
}

// all-pairs cosine: a [m,d], b [k,d] -> [m,k]
inline Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "cosine_matrix");
  detail::require_2d(b, "cosine_matrix");
  if (a.dim(1) != b.dim(1))
    throw ShapeError("cosine_matrix width mismatch: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  const int m = a.dim(0), k = b.dim(0), d = a.dim(1);
  Tensor out = Tensor::zeros({m, k});
  std::vector<double> sa(m), sb(k), dot(static_cast<std::size_t>(m) * k);
  for (int i = 0; i < m; ++i) {
    const double* ar = a.value().data() + i * d;
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += ar[j] * ar[j];
    sa[i] = s;
  }
  for (int i = 0; i < k; ++i) {
    const double* br = b.value().data() + i * d;
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += br[j] * br[j];
    sb[i] = s;
  }
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) {
      const double* ar = a.value().data() + i * d;
      const double* br = b.value().data() + j * d;
      double dd = 0.0;
      for (int t = 0; t < d; ++t) dd += ar[t] * br[t];
      dot[static_cast<std::size_t>(i) * k + j] = dd;
      out.value()[static_cast<std::size_t>(i) * k + j] =
          dd / std::max(std::sqrt(sa[i] * sb[j]), kNormEps);
    }
  if (detail::recording({&a, &b})) {
    out.set_requires_grad(true);
    Graph::current()->record([ap = a.ptr(), bp = b.ptr(), op = out.ptr(),
                              sa = std::move(sa), sb = std::move(sb),
                              dot = std::move(dot), m, k, d] {
      const std::vector<double>& og = detail::grad_buf(op);
      double* ga = ap->requires_grad ? detail::grad_buf(ap).data() : nullptr;
      double* gb = bp->requires_grad ? detail::grad_buf(bp).data() : nullptr;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j)
          detail::cosine_pair_grad(ap->value.data() + i * d,
                                   bp->value.data() + j * d, d, sa[i], sb[j],
                                   dot[static_cast<std::size_t>(i) * k + j],
                                   og[static_cast<std::size_t>(i) * k + j],
                                   ga ? ga + i * d : nullptr,
                                   gb ? gb + j * d : nullptr);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// masked cross entropy
//
// Mean over masked positions of -log softmax(logits)[target]. An all-false
// mask is a degenerate batch: value 0, zero gradient.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const BoolVec& mask) {
  detail::require_2d(logits, "cross_entropy");
  const int l = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != l || static_cast<int>(mask.size()) != l)
    throw ShapeError("cross_entropy needs " + std::to_string(l) +
                     " targets and mask bits, got " +
                     std::to_string(targets.size()) + "/" +
                     std::to_string(mask.size()));
  int count = 0;
  for (int i = 0; i < l; ++i)
    if (mask[i]) {
      if (targets[i] < 0 || targets[i] >= v)
        throw ShapeError("cross_entropy target " + std::to_string(targets[i]) +
                         " out of vocab " + std::to_string(v));
      ++count;
    }
  Tensor out = Tensor::zeros({1});
  if (count == 0) {
    if (detail::recording({&logits})) out.set_requires_grad(true);
    return out;
  }
  double loss = 0.0;
  std::vector<double> lse(l, 0.0);
  for (int i = 0; i < l; ++i) {
    if (!mask[i]) continue;
    const double* row = logits.value().data() + static_cast<std::size_t>(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    lse[i] = mx + std::log(sum);
    loss += lse[i] - row[targets[i]];
  }
  out.value()[0] = loss / count;
  if (detail::recording({&logits})) {
    out.set_requires_grad(true);
    Graph::current()->record([lp = logits.ptr(), op = out.ptr(), targets, mask,
                              lse = std::move(lse), l, v, count] {
      const double g = detail::grad_buf(op)[0] / count;
      auto& lg = detail::grad_buf(lp);
      for (int i = 0; i < l; ++i) {
        if (!mask[i]) continue;
        const double* row = lp->value.data() + static_cast<std::size_t>(i) * v;
        double* grow = lg.data() + static_cast<std::size_t>(i) * v;
        for (int j = 0; j < v; ++j) {
          const double p = std::exp(row[j] - lse[i]);
          grow[j] += g * (p - (j == targets[i] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

}  // namespace sqvlm
