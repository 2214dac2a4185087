#include "koff/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "koff/errors.hpp"

namespace koff {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Grad buffer of a parent, or nullptr when it takes no gradient.
template <typename T>
T* grad_of(const NodePtr<T>& n) {
  if (!n->tracked) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <typename T>
void check_finite(std::span<const T> v, const char* op) {
  for (T x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite input to ") + op);
}

template <typename T>
int64_t last_dim(const Tensor<T>& x) {
  require(x.rank() >= 1, "expected rank >= 1, got " + shape_str(x.shape()));
  return x.shape().back();
}

template <typename T>
Tensor<T> unary(const Tensor<T>& x, auto f, auto df) {
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [xn, df](const Node<T>& o) {
    T* g = grad_of(xn);
    if (!g) return;
    for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * df(xn->value[i], o.value[i]);
  });
}

}  // namespace

std::vector<uint8_t> attention_mask(int n_kv, int seq) {
  const int cols = n_kv + seq;
  std::vector<uint8_t> m(static_cast<size_t>(seq) * cols);
  for (int t = 0; t < seq; ++t)
    for (int j = 0; j < cols; ++j) m[t * cols + j] = attention_allowed(n_kv, t, j) ? 1 : 0;
  return m;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2,
          "matmul expects 2-D operands, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  std::vector<T> out(static_cast<size_t>(m * n));
  MapMat<T>(out.data(), m, n).noalias() =
      CMapMat<T>(a.values().data(), m, k) * CMapMat<T>(b.values().data(), k, n);
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>({m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](const Node<T>& o) {
    CMapMat<T> go(o.grad.data(), m, n);
    if (T* ga = grad_of(an))
      MapMat<T>(ga, m, k).noalias() += go * CMapMat<T>(bn->value.data(), k, n).transpose();
    if (T* gb = grad_of(bn))
      MapMat<T>(gb, k, n).noalias() += CMapMat<T>(an->value.data(), m, k).transpose() * go;
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  require(w.rank() == 2, "linear weight must be 2-D, got " + shape_str(w.shape()));
  const int64_t in = w.dim(1), out_dim = w.dim(0);
  require(last_dim(x) == in, "linear input " + shape_str(x.shape()) + " does not match weight " +
                                 shape_str(w.shape()));
  const int64_t rows = in == 0 ? 0 : x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<T> out(static_cast<size_t>(rows * out_dim));
  if (rows > 0 && out_dim > 0) {
    if (in == 0) {
      std::fill(out.begin(), out.end(), T(0));
    } else {
      MapMat<T>(out.data(), rows, out_dim).noalias() =
          CMapMat<T>(x.values().data(), rows, in) * CMapMat<T>(w.values().data(), out_dim, in).transpose();
    }
  }
  auto xn = x.node(), wn = w.node();
  return detail::make_result<T>(std::move(shape), std::move(out), {&x, &w},
                                [xn, wn, rows, in, out_dim](const Node<T>& o) {
                                  if (rows == 0 || in == 0 || out_dim == 0) return;
                                  CMapMat<T> go(o.grad.data(), rows, out_dim);
                                  if (T* gx = grad_of(xn))
                                    MapMat<T>(gx, rows, in).noalias() +=
                                        go * CMapMat<T>(wn->value.data(), out_dim, in);
                                  if (T* gw = grad_of(wn))
                                    MapMat<T>(gw, out_dim, in).noalias() +=
                                        go.transpose() * CMapMat<T>(xn->value.data(), rows, in);
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](const Node<T>& o) {
    if (T* g = grad_of(an))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    if (T* g = grad_of(bn))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "sub shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](const Node<T>& o) {
    if (T* g = grad_of(an))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    if (T* g = grad_of(bn))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](const Node<T>& o) {
    if (T* g = grad_of(an))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bn->value[i];
    if (T* g = grad_of(bn))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * an->value[i];
  });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row) {
  require(row.rank() == 1 && last_dim(x) == row.dim(0),
          "add_row: " + shape_str(x.shape()) + " + " + shape_str(row.shape()));
  const int64_t c = row.dim(0);
  std::vector<T> out(x.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] += row.values()[i % c];
  auto xn = x.node(), rn = row.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &row}, [xn, rn, c](const Node<T>& o) {
    if (T* g = grad_of(xn))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    if (T* g = grad_of(rn))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i % c] += o.grad[i];
  });
}

template <typename T>
Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& row) {
  require(row.rank() == 1 && last_dim(x) == row.dim(0),
          "mul_row: " + shape_str(x.shape()) + " * " + shape_str(row.shape()));
  const int64_t c = row.dim(0);
  std::vector<T> out(x.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= row.values()[i % c];
  auto xn = x.node(), rn = row.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &row}, [xn, rn, c](const Node<T>& o) {
    if (T* g = grad_of(xn))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * rn->value[i % c];
    if (T* g = grad_of(rn))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i % c] += o.grad[i] * xn->value[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return unary<T>(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return unary<T>(x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  auto xn = x.node();
  return detail::make_result<T>({}, {acc}, {&x}, [xn](const Node<T>& o) {
    if (T* g = grad_of(xn))
      for (size_t i = 0; i < xn->value.size(); ++i) g[i] += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary<T>(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const int64_t c = last_dim(x);
  require(c > 0, "softmax over an empty last dimension");
  check_finite<T>(x.values(), "softmax_lastdim");
  const int64_t rows = x.numel() / c;
  std::vector<T> out(x.values());
  for (int64_t r = 0; r < rows; ++r) {
    T* p = out.data() + r * c;
    T mx = *std::max_element(p, p + c);
    T z = 0;
    for (int64_t j = 0; j < c; ++j) z += (p[j] = std::exp(p[j] - mx));
    for (int64_t j = 0; j < c; ++j) p[j] /= z;
  }
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [xn, rows, c](const Node<T>& o) {
    T* g = grad_of(xn);
    if (!g) return;
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * c;
      const T* gy = o.grad.data() + r * c;
      T dot = 0;
      for (int64_t j = 0; j < c; ++j) dot += gy[j] * y[j];
      for (int64_t j = 0; j < c; ++j) g[r * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
  const int64_t c = last_dim(x);
  require(c > 0, "log_softmax over an empty last dimension");
  check_finite<T>(x.values(), "log_softmax_lastdim");
  const int64_t rows = x.numel() / c;
  std::vector<T> out(x.values());
  for (int64_t r = 0; r < rows; ++r) {
    T* p = out.data() + r * c;
    T mx = *std::max_element(p, p + c);
    T z = 0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(p[j] - mx);
    T lse = mx + std::log(z);
    for (int64_t j = 0; j < c; ++j) p[j] -= lse;
  }
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [xn, rows, c](const Node<T>& o) {
    T* g = grad_of(xn);
    if (!g) return;
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * c;
      const T* gy = o.grad.data() + r * c;
      T total = 0;
      for (int64_t j = 0; j < c; ++j) total += gy[j];
      for (int64_t j = 0; j < c; ++j) g[r * c + j] += gy[j] - std::exp(y[j]) * total;
    }
  });
}

template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps) {
  const int64_t c = last_dim(x);
  require(weight.rank() == 1 && weight.dim(0) == c,
          "rmsnorm weight " + shape_str(weight.shape()) + " for input " + shape_str(x.shape()));
  const int64_t rows = x.numel() / c;
  std::vector<T> out(x.values().size());
  std::vector<T> inv(static_cast<size_t>(rows));
  const auto& xv = x.values();
  const auto& wv = weight.values();
  for (int64_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (int64_t j = 0; j < c; ++j) ss += xv[r * c + j] * xv[r * c + j];
    T s = T(1) / std::sqrt(ss / static_cast<T>(c) + eps);
    inv[r] = s;
    for (int64_t j = 0; j < c; ++j) out[r * c + j] = xv[r * c + j] * s * wv[j];
  }
  auto xn = x.node(), wn = weight.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &weight}, [xn, wn, inv, rows, c](const Node<T>& o) {
        T* gx = grad_of(xn);
        T* gw = grad_of(wn);
        const auto& xv = xn->value;
        const auto& wv = wn->value;
        for (int64_t r = 0; r < rows; ++r) {
          const T* x = xv.data() + r * c;
          const T* gy = o.grad.data() + r * c;
          T s = inv[r];
          if (gw)
            for (int64_t j = 0; j < c; ++j) gw[j] += gy[j] * x[j] * s;
          if (gx) {
            // y_j = w_j x_j s; ds/dx_k = -s^3 x_k / c
            T dot = 0;
            for (int64_t j = 0; j < c; ++j) dot += gy[j] * wv[j] * x[j];
            T coef = dot * s * s * s / static_cast<T>(c);
            for (int64_t j = 0; j < c; ++j) gx[r * c + j] += gy[j] * wv[j] * s - coef * x[j];
          }
        }
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.numel(), "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto xn = x.node();
  return detail::make_result<T>(std::move(shape), x.values(), {&x}, [xn](const Node<T>& o) {
    if (T* g = grad_of(xn))
      for (size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int32_t> ids) {
  require(table.rank() == 2, "embedding table must be 2-D, got " + shape_str(table.shape()));
  const int64_t vocab = table.dim(0), d = table.dim(1);
  const int64_t n = static_cast<int64_t>(ids.size());
  std::vector<T> out(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= vocab)
      throw InputError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    std::copy_n(table.values().data() + ids[i] * d, d, out.data() + i * d);
  }
  auto tn = table.node();
  std::vector<int32_t> idv(ids.begin(), ids.end());
  return detail::make_result<T>({n, d}, std::move(out), {&table},
                                [tn, idv = std::move(idv), d](const Node<T>& o) {
                                  T* g = grad_of(tn);
                                  if (!g) return;
                                  for (size_t i = 0; i < idv.size(); ++i)
                                    for (int64_t j = 0; j < d; ++j) g[idv[i] * d + j] += o.grad[i * d + j];
                                });
}

namespace {

struct AttnDims {
  int64_t batch, seq, heads, width, dh, n_kv, cols;
};

template <typename T>
AttnDims attn_dims(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>* v, const Tensor<T>& mem_k,
                   const Tensor<T>* mem_v, AttentionShape s) {
  require(s.batch >= 1 && s.seq >= 1 && s.heads >= 1, "attention shape extents must be >= 1");
  require(q.rank() == 2 && q.shape() == k.shape() && (!v || v->shape() == q.shape()),
          "attention q/k/v shapes differ: " + shape_str(q.shape()) + " " + shape_str(k.shape()));
  require(q.dim(0) == int64_t(s.batch) * s.seq, "attention rows " + std::to_string(q.dim(0)) +
                                                    " != batch*seq");
  const int64_t width = q.dim(1);
  require(width % s.heads == 0, "attention width not divisible by heads");
  int64_t n_kv = 0;
  if (mem_k.defined()) {
    require(mem_k.rank() == 2 && mem_k.dim(1) == width,
            "memory keys " + shape_str(mem_k.shape()) + " do not match width " + std::to_string(width));
    n_kv = mem_k.dim(0);
    if (mem_v) require(mem_v->defined() && mem_v->shape() == mem_k.shape(), "memory values shape mismatch");
  }
  return {s.batch, s.seq, s.heads, width, width / s.heads, n_kv, n_kv + s.seq};
}

// Row of (memory ++ text) keys for column j of sequence b, head h.
template <typename T>
const T* key_row(const T* mem, const T* text, const AttnDims& a, int64_t b, int64_t h, int64_t j) {
  if (j < a.n_kv) return mem + j * a.width + h * a.dh;
  return text + ((b * a.seq) + (j - a.n_kv)) * a.width + h * a.dh;
}

template <typename T>
void compute_probs(const T* q, const T* k, const T* mk, const AttnDims& a, std::vector<T>& probs) {
  probs.assign(static_cast<size_t>(a.batch * a.heads * a.seq * a.cols), T(0));
  const T sc = T(1) / std::sqrt(static_cast<T>(a.dh));
  for (int64_t b = 0; b < a.batch; ++b)
    for (int64_t h = 0; h < a.heads; ++h)
      for (int64_t t = 0; t < a.seq; ++t) {
        T* p = probs.data() + ((b * a.heads + h) * a.seq + t) * a.cols;
        const T* qr = q + (b * a.seq + t) * a.width + h * a.dh;
        const int64_t visible = a.n_kv + t + 1;
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j < visible; ++j) {
          const T* kr = key_row(mk, k, a, b, h, j);
          T dot = 0;
          for (int64_t e = 0; e < a.dh; ++e) dot += qr[e] * kr[e];
          p[j] = dot * sc;
          mx = std::max(mx, p[j]);
        }
        T z = 0;
        for (int64_t j = 0; j < visible; ++j) z += (p[j] = std::exp(p[j] - mx));
        for (int64_t j = 0; j < visible; ++j) p[j] /= z;
      }
}

}  // namespace

template <typename T>
std::vector<T> attention_probs(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& mem_k,
                               AttentionShape s) {
  auto a = attn_dims<T>(q, k, nullptr, mem_k, nullptr, s);
  std::vector<T> probs;
  compute_probs<T>(q.values().data(), k.values().data(),
                   mem_k.defined() ? mem_k.values().data() : nullptr, a, probs);
  return probs;
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& mem_k,
                    const Tensor<T>& mem_v, AttentionShape s) {
  auto a = attn_dims<T>(q, k, &v, mem_k, &mem_v, s);
  const T* mk = a.n_kv ? mem_k.values().data() : nullptr;
  const T* mv = a.n_kv ? mem_v.values().data() : nullptr;
  std::vector<T> probs;
  compute_probs<T>(q.values().data(), k.values().data(), mk, a, probs);

  std::vector<T> out(q.values().size(), T(0));
  const T* vv = v.values().data();
  for (int64_t b = 0; b < a.batch; ++b)
    for (int64_t h = 0; h < a.heads; ++h)
      for (int64_t t = 0; t < a.seq; ++t) {
        const T* p = probs.data() + ((b * a.heads + h) * a.seq + t) * a.cols;
        T* o = out.data() + (b * a.seq + t) * a.width + h * a.dh;
        const int64_t visible = a.n_kv + t + 1;
        for (int64_t j = 0; j < visible; ++j) {
          const T* vr = key_row(mv, vv, a, b, h, j);
          for (int64_t e = 0; e < a.dh; ++e) o[e] += p[j] * vr[e];
        }
      }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  NodePtr<T> mkn = a.n_kv ? mem_k.node() : nullptr, mvn = a.n_kv ? mem_v.node() : nullptr;
  const Tensor<T>* mk_in = a.n_kv ? &mem_k : nullptr;
  const Tensor<T>* mv_in = a.n_kv ? &mem_v : nullptr;
  return detail::make_result<T>(
      q.shape(), std::move(out), {&q, &k, &v, mk_in, mv_in},
      [qn, kn, vn, mkn, mvn, a, probs = std::move(probs)](const Node<T>& o) {
        T* gq = grad_of(qn);
        T* gk = grad_of(kn);
        T* gv = grad_of(vn);
        T* gmk = mkn ? grad_of(mkn) : nullptr;
        T* gmv = mvn ? grad_of(mvn) : nullptr;
        const T sc = T(1) / std::sqrt(static_cast<T>(a.dh));
        const T* qv = qn->value.data();
        const T* kv = kn->value.data();
        const T* vv = vn->value.data();
        const T* mk = mkn ? mkn->value.data() : nullptr;
        const T* mv = mvn ? mvn->value.data() : nullptr;
        std::vector<T> dp(static_cast<size_t>(a.cols));
        for (int64_t b = 0; b < a.batch; ++b)
          for (int64_t h = 0; h < a.heads; ++h)
            for (int64_t t = 0; t < a.seq; ++t) {
              const T* p = probs.data() + ((b * a.heads + h) * a.seq + t) * a.cols;
              const T* go = o.grad.data() + (b * a.seq + t) * a.width + h * a.dh;
              const int64_t visible = a.n_kv + t + 1;
              T dot = 0;
              for (int64_t j = 0; j < visible; ++j) {
                const T* vr = key_row(mv, vv, a, b, h, j);
                T acc = 0;
                for (int64_t e = 0; e < a.dh; ++e) acc += go[e] * vr[e];
                dp[j] = acc;
                dot += acc * p[j];
                T* gvr = j < a.n_kv ? (gmv ? gmv + j * a.width + h * a.dh : nullptr)
                                    : (gv ? gv + (b * a.seq + j - a.n_kv) * a.width + h * a.dh : nullptr);
                if (gvr)
                  for (int64_t e = 0; e < a.dh; ++e) gvr[e] += p[j] * go[e];
              }
              const T* qr = qv + (b * a.seq + t) * a.width + h * a.dh;
              T* gqr = gq ? gq + (b * a.seq + t) * a.width + h * a.dh : nullptr;
              for (int64_t j = 0; j < visible; ++j) {
                T ds = p[j] * (dp[j] - dot) * sc;
                if (ds == T(0)) continue;
                const T* kr = key_row(mk, kv, a, b, h, j);
                if (gqr)
                  for (int64_t e = 0; e < a.dh; ++e) gqr[e] += ds * kr[e];
                T* gkr = j < a.n_kv ? (gmk ? gmk + j * a.width + h * a.dh : nullptr)
                                    : (gk ? gk + (b * a.seq + j - a.n_kv) * a.width + h * a.dh : nullptr);
                if (gkr)
                  for (int64_t e = 0; e < a.dh; ++e) gkr[e] += ds * qr[e];
              }
            }
      });
}

template <typename T>
Tensor<T> hard_concrete(const Tensor<T>& log_alpha, std::span<const double> u, double beta, double gamma,
                        double zeta) {
  require(static_cast<int64_t>(u.size()) == log_alpha.numel(), "hard_concrete noise length mismatch");
  const auto& la = log_alpha.values();
  std::vector<T> out(la.size());
  std::vector<T> dz(la.size());
  for (size_t i = 0; i < la.size(); ++i) {
    double logit_u = std::log(u[i]) - std::log1p(-u[i]);
    double s = 1.0 / (1.0 + std::exp(-(logit_u + static_cast<double>(la[i])) / beta));
    double stretched = s * (zeta - gamma) + gamma;
    if (stretched <= 0.0) {
      out[i] = T(0);
      dz[i] = T(0);
    } else if (stretched >= 1.0) {
      out[i] = T(1);
      dz[i] = T(0);
    } else {
      out[i] = static_cast<T>(stretched);
      dz[i] = static_cast<T>((zeta - gamma) * s * (1.0 - s) / beta);
    }
  }
  auto ln = log_alpha.node();
  return detail::make_result<T>(log_alpha.shape(), std::move(out), {&log_alpha},
                                [ln, dz = std::move(dz)](const Node<T>& o) {
                                  if (T* g = grad_of(ln))
                                    for (size_t i = 0; i < dz.size(); ++i) g[i] += o.grad[i] * dz[i];
                                });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int32_t> targets) {
  require(logits.rank() == 2, "cross_entropy expects [positions, vocab] logits");
  const int64_t n = logits.dim(0), v = logits.dim(1);
  require(static_cast<int64_t>(targets.size()) == n, "cross_entropy target count mismatch");
  check_finite<T>(logits.values(), "cross_entropy");
  std::vector<T> soft(logits.values());
  double total = 0;
  int64_t counted = 0;
  for (int64_t r = 0; r < n; ++r) {
    T* p = soft.data() + r * v;
    T mx = *std::max_element(p, p + v);
    T z = 0;
    for (int64_t j = 0; j < v; ++j) z += (p[j] = std::exp(p[j] - mx));
    for (int64_t j = 0; j < v; ++j) p[j] /= z;
    if (targets[r] < 0) continue;
    if (targets[r] >= v) throw InputError("target id outside vocabulary");
    total -= static_cast<double>(logits.values()[r * v + targets[r]] - mx - std::log(z));
    ++counted;
  }
  if (counted == 0) throw InputError("cross_entropy with no scored positions");
  auto ln = logits.node();
  std::vector<int32_t> tg(targets.begin(), targets.end());
  return detail::make_result<T>(
      {}, {static_cast<T>(total / counted)}, {&logits},
      [ln, soft = std::move(soft), tg = std::move(tg), n, v, counted](const Node<T>& o) {
        T* g = grad_of(ln);
        if (!g) return;
        const T w = o.grad[0] / static_cast<T>(counted);
        for (int64_t r = 0; r < n; ++r) {
          if (tg[r] < 0) continue;
          for (int64_t j = 0; j < v; ++j) g[r * v + j] += w * soft[r * v + j];
          g[r * v + tg[r]] -= w;
        }
      });
}

template <typename T>
Tensor<T> topk_kl(const Tensor<T>& logits, std::span<const int32_t> idx, std::span<const float> probs, int k) {
  require(logits.rank() == 2, "topk_kl expects [positions, vocab] logits");
  const int64_t n = logits.dim(0), v = logits.dim(1);
  require(k >= 1 && static_cast<int64_t>(idx.size()) == n * k && probs.size() == idx.size(),
          "topk_kl target layout mismatch");
  require(n > 0, "topk_kl with no positions");
  check_finite<T>(logits.values(), "topk_kl");
  std::vector<T> soft(logits.values());
  double total = 0;
  for (int64_t r = 0; r < n; ++r) {
    T* p = soft.data() + r * v;
    T mx = *std::max_element(p, p + v);
    T z = 0;
    for (int64_t j = 0; j < v; ++j) z += (p[j] = std::exp(p[j] - mx));
    for (int64_t j = 0; j < v; ++j) p[j] /= z;
    const T lse = mx + std::log(z);
    for (int i = 0; i < k; ++i) {
      double pt = probs[r * k + i];
      if (pt <= 0) continue;
      double log_ps = static_cast<double>(logits.values()[r * v + idx[r * k + i]] - lse);
      total += pt * (std::log(pt) - log_ps);
    }
  }
  auto ln = logits.node();
  std::vector<int32_t> iv(idx.begin(), idx.end());
  std::vector<float> pv(probs.begin(), probs.end());
  return detail::make_result<T>(
      {}, {static_cast<T>(total / n)}, {&logits},
      [ln, soft = std::move(soft), iv = std::move(iv), pv = std::move(pv), n, v, k](const Node<T>& o) {
        T* g = grad_of(ln);
        if (!g) return;
        const T w = o.grad[0] / static_cast<T>(n);
        for (int64_t r = 0; r < n; ++r) {
          T mass = 0;
          for (int i = 0; i < k; ++i) mass += static_cast<T>(pv[r * k + i]);
          for (int64_t j = 0; j < v; ++j) g[r * v + j] += w * mass * soft[r * v + j];
          for (int i = 0; i < k; ++i) g[r * v + iv[r * k + i]] -= w * static_cast<T>(pv[r * k + i]);
        }
      });
}

#define KOFF_INSTANTIATE_OPS(T)                                                                             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> mul_row(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> scale(const Tensor<T>&, T);                                                            \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                       \
  template Tensor<T> sum(const Tensor<T>&);                                                                 \
  template Tensor<T> mean(const Tensor<T>&);                                                                \
  template Tensor<T> relu(const Tensor<T>&);                                                                \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                             \
  template Tensor<T> silu(const Tensor<T>&);                                                                \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                                     \
  template Tensor<T> log_softmax_lastdim(const Tensor<T>&);                                                 \
  template Tensor<T> rmsnorm(const Tensor<T>&, const Tensor<T>&, T);                                        \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                      \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int32_t>);                                 \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                               const Tensor<T>&, AttentionShape);                                           \
  template std::vector<T> attention_probs(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                          AttentionShape);                                                  \
  template Tensor<T> hard_concrete(const Tensor<T>&, std::span<const double>, double, double, double);     \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int32_t>);                             \
  template Tensor<T> topk_kl(const Tensor<T>&, std::span<const int32_t>, std::span<const float>, int);

KOFF_INSTANTIATE_OPS(float)
KOFF_INSTANTIATE_OPS(double)

}  // namespace koff
