#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <vector>

#include "faar/fft.hpp"
#include "faar/tensor.hpp"

// Differentiable primitives. Every op computes eagerly; when a tape is active
// and any input lies on a gradient path, a pull closure is recorded that
// accumulates (+=) into the parents' gradient buffers. Shapes must match
// exactly: there is no implicit broadcasting beyond the row/column/channel
// variants defined here.

namespace faar {
namespace detail {

inline bool tracing(std::initializer_list<const Tensor*> parents) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : parents)
    if (t->needs_grad()) return true;
  return false;
}

inline void check_real(const Tensor& t, const char* op) {
  check_arg(!t.is_complex(), std::string(op) + ": real tensor required");
}

inline void check_complex(const Tensor& t, const char* op) {
  check_arg(t.is_complex(), std::string(op) + ": complex tensor required");
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check_arg(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                        shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
}

// ---- raw matrix kernels (row-major) ----

// C = A(MxK) * B(KxN)
inline void mm_nn(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C += A(MxK) * B(NxK)^T
inline void mm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C += A(KxM)^T * B(KxN)
inline void mm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                      std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = a[p * m + i];
      if (api == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise (real)
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_real(a, "add");
  detail::check_real(b, "add");
  detail::check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::tracing({&a, &b})) {
    auto pa = a.impl(), pb = b.impl(), po = out.impl();
    Tape::active()->record(po, [pa, pb, po, n] {
      const auto& g = po->grad;
      if (pa->needs_grad()) {
        auto& ga = pa->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (pb->needs_grad()) {
        auto& gb = pb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_real(a, "sub");
  detail::check_real(b, "sub");
  detail::check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (detail::tracing({&a, &b})) {
    auto pa = a.impl(), pb = b.impl(), po = out.impl();
    Tape::active()->record(po, [pa, pb, po, n] {
      const auto& g = po->grad;
      if (pa->needs_grad()) {
        auto& ga = pa->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (pb->needs_grad()) {
        auto& gb = pb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_real(a, "mul");
  detail::check_real(b, "mul");
  detail::check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (detail::tracing({&a, &b})) {
    auto pa = a.impl(), pb = b.impl(), po = out.impl();
    Tape::active()->record(po, [pa, pb, po, n] {
      const auto& g = po->grad;
      if (pa->needs_grad()) {
        auto& ga = pa->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb->re[i];
      }
      if (pb->needs_grad()) {
        auto& gb = pb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa->re[i];
      }
    });
  }
  return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_real(a, "div");
  detail::check_real(b, "div");
  detail::check_same_shape(a, b, "div");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] / b.data()[i];
  if (detail::tracing({&a, &b})) {
    auto pa = a.impl(), pb = b.impl(), po = out.impl();
    Tape::active()->record(po, [pa, pb, po, n] {
      const auto& g = po->grad;
      if (pa->needs_grad()) {
        auto& ga = pa->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / pb->re[i];
      }
      if (pb->needs_grad()) {
        auto& gb = pb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          gb[i] -= g[i] * pa->re[i] / (pb->re[i] * pb->re[i]);
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  detail::check_real(a, "scale");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (detail::tracing({&a})) {
    auto pa = a.impl(), po = out.impl();
    Tape::active()->record(po, [pa, po, c, n] {
      if (!pa->needs_grad()) return;
      auto& ga = pa->ensure_grad();
      const auto& g = po->grad;
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

// out = s * t with s a scalar tensor (possibly trainable).
inline Tensor scale_by(const Tensor& t, const Tensor& s) {
  detail::check_real(t, "scale_by");
  detail::check_real(s, "scale_by");
  check_arg(s.numel() == 1, "scale_by: scale must be a scalar tensor");
  const double sv = s.data()[0];
  Tensor out = Tensor::zeros(t.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = t.data()[i] * sv;
  if (detail::tracing({&t, &s})) {
    auto pt = t.impl(), ps = s.impl(), po = out.impl();
    Tape::active()->record(po, [pt, ps, po, sv, n] {
      const auto& g = po->grad;
      if (pt->needs_grad()) {
        auto& gt = pt->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) gt[i] += g[i] * sv;
      }
      if (ps->needs_grad()) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += g[i] * pt->re[i];
        ps->ensure_grad()[0] += acc;
      }
    });
  }
  return out;
}

namespace detail {

// Shared scaffold for elementwise unary ops: dfn receives (x, y) and returns
// dy/dx.
template <typename F, typename DF>
Tensor unary_op(const Tensor& a, const char* name, F fn, DF dfn) {
  check_real(a, name);
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = fn(a.data()[i]);
  if (tracing({&a})) {
    auto pa = a.impl(), po = out.impl();
    Tape::active()->record(po, [pa, po, dfn, n] {
      if (!pa->needs_grad()) return;
      auto& ga = pa->ensure_grad();
      const auto& g = po->grad;
      for (std::size_t i = 0; i < n; ++i)
        ga[i] += g[i] * dfn(pa->re[i], po->re[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor tanh_t(const Tensor& a) {
  return detail::unary_op(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor abs_t(const Tensor& a) {
  return detail::unary_op(
      a, "abs", [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor log_t(const Tensor& a) {
  return detail::unary_op(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Tensor exp_t(const Tensor& a) {
  return detail::unary_op(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Tensor softplus_t(const Tensor& a) {
  return detail::unary_op(
      a, "softplus",
      [](double x) {
        if (x > 30.0) return x;
        if (x < -30.0) return std::exp(x);
        return std::log1p(std::exp(x));
      },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

// out_i = max(v_i, floor); gradient passes only where v_i > floor.
inline Tensor clamp_min(const Tensor& a, double floor) {
  return detail::unary_op(
      a, "clamp_min", [floor](double x) { return x > floor ? x : floor; },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

// Boolean selector: out_i = (a_i > threshold) ? 1 : 0. Deliberately detached:
// indicator functions have zero gradient almost everywhere, so the result is a
// constant in the recorded graph.
inline Tensor greater_than(const Tensor& a, double threshold) {
  detail::check_real(a, "greater_than");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.data()[i] = a.data()[i] > threshold ? 1.0 : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// structure / linear algebra
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, const Shape& shape) {
  check_arg(shape_numel(shape) == a.numel(),
            "reshape: cannot view " + shape_str(a.shape()) + " as " +
                shape_str(shape));
  Tensor out;
  if (a.is_complex()) {
    out = Tensor::from_complex(shape, a.cvalues());
  } else {
    out = Tensor::from(shape, a.values());
  }
  if (detail::tracing({&a})) {
    auto pa = a.impl(), po = out.impl();
    Tape::active()->record(po, [pa, po] {
      if (!pa->needs_grad()) return;
      if (pa->dtype == Dtype::complex128) {
        auto& ga = pa->ensure_cgrad();
        const auto& g = po->cgrad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      } else {
        auto& ga = pa->ensure_grad();
        const auto& g = po->grad;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::check_real(a, "transpose");
  check_arg(a.rank() == 2, "transpose: rank-2 tensor required");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out = Tensor::zeros({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data()[j * r + i] = a.data()[i * c + j];
  if (detail::tracing({&a})) {
    auto pa = a.impl(), po = out.impl();
    Tape::active()->record(po, [pa, po, r, c] {
      if (!pa->needs_grad()) return;
      auto& ga = pa->ensure_grad();
      const auto& g = po->grad;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_real(a, "matmul");
  detail::check_real(b, "matmul");
  check_arg(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
  check_arg(a.dim(1) == b.dim(0), "matmul: inner dimensions differ, " +
                                      shape_str(a.shape()) + " * " +
                                      shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  detail::mm_nn(a.data(), b.data(), out.data(), m, k, n);
  if (detail::tracing({&a, &b})) {
    auto pa = a.impl(), pb = b.impl(), po = out.impl();
    Tape::active()->record(po, [pa, pb, po, m, k, n] {
      const double* g = po->grad.data();
      if (pa->needs_grad())  // dA += g * B^T
        detail::mm_nt_acc(g, pb->re.data(), pa->ensure_grad().data(), m, n, k);
      if (pb->needs_grad())  // dB += A^T * g
        detail::mm_tn_acc(pa->re.data(), g, pb->ensure_grad().data(), k, m, n);
    });
  }
  return out;
}

// out[i,j] = m[i,j] + v[i]  (column-broadcast bias)
inline Tensor add_bias(const Tensor& m, const Tensor& v) {
  detail::check_real(m, "add_bias");
  detail::check_real(v, "add_bias");
  check_arg(m.rank() == 2 && v.rank() == 1 && v.dim(0) == m.dim(0),
            "add_bias: need MxN matrix and length-M vector");
  const std::size_t r = m.dim(0), c = m.dim(1);
  Tensor out = Tensor::zeros({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    const double bi = v.data()[i];
    for (std::size_t j = 0; j < c; ++j)
      out.data()[i * c + j] = m.data()[i * c + j] + bi;
  }
  if (detail::tracing({&m, &v})) {
    auto pm = m.impl(), pv = v.impl(), po = out.impl();
    Tape::active()->record(po, [pm, pv, po, r, c] {
      const auto& g = po->grad;
      if (pm->needs_grad()) {
        auto& gm = pm->ensure_grad();
        for (std::size_t i = 0; i < r * c; ++i) gm[i] += g[i];
      }
      if (pv->needs_grad()) {
        auto& gv = pv->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j];
          gv[i] += acc;
        }
      }
    });
  }
  return out;
}

// out[i,j] = m[i,j] * v[i]
inline Tensor scale_rows(const Tensor& m, const Tensor& v) {
  detail::check_real(m, "scale_rows");
  detail::check_real(v, "scale_rows");
  check_arg(m.rank() == 2 && v.rank() == 1 && v.dim(0) == m.dim(0),
            "scale_rows: need MxN matrix and length-M vector");
  const std::size_t r = m.dim(0), c = m.dim(1);
  Tensor out = Tensor::zeros({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    const double vi = v.data()[i];
    for (std::size_t j = 0; j < c; ++j)
      out.data()[i * c + j] = m.data()[i * c + j] * vi;
  }
  if (detail::tracing({&m, &v})) {
    auto pm = m.impl(), pv = v.impl(), po = out.impl();
    Tape::active()->record(po, [pm, pv, po, r, c] {
      const auto& g = po->grad;
      if (pm->needs_grad()) {
        auto& gm = pm->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          const double vi = pv->re[i];
          for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += g[i * c + j] * vi;
        }
      }
      if (pv->needs_grad()) {
        auto& gv = pv->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < c; ++j)
            acc += g[i * c + j] * pm->re[i * c + j];
          gv[i] += acc;
        }
      }
    });
  }
  return out;
}

// out[i,j] = m[i,j] * v[j]
inline Tensor scale_cols(const Tensor& m, const Tensor& v) {
  detail::check_real(m, "scale_cols");
  detail::check_real(v, "scale_cols");
  check_arg(m.rank() == 2 && v.rank() == 1 && v.dim(0) == m.dim(1),
            "scale_cols: need MxN matrix and length-N vector");
  const std::size_t r = m.dim(0), c = m.dim(1);
  Tensor out = Tensor::zeros({r, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out.data()[i * c + j] = m.data()[i * c + j] * v.data()[j];
  if (detail::tracing({&m, &v})) {
    auto pm = m.impl(), pv = v.impl(), po = out.impl();
    Tape::active()->record(po, [pm, pv, po, r, c] {
      const auto& g = po->grad;
      if (pm->needs_grad()) {
        auto& gm = pm->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            gm[i * c + j] += g[i * c + j] * pv->re[j];
      }
      if (pv->needs_grad()) {
        auto& gv = pv->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j)
            gv[j] += g[i * c + j] * pm->re[i * c + j];
      }
    });
  }
  return out;
}

// Row-wise Euclidean norms of an MxN matrix. A zero row yields norm 0 with
// zero gradient; callers that divide by the result guard with clamp_min.
inline Tensor rowwise_l2_norm(const Tensor& m) {
  detail::check_real(m, "rowwise_l2_norm");
  check_arg(m.rank() == 2 && m.numel() > 0, "rowwise_l2_norm: nonempty matrix required");
  const std::size_t r = m.dim(0), c = m.dim(1);
  Tensor out = Tensor::zeros({r});
  for (std::size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double x = m.data()[i * c + j];
      acc += x * x;
    }
    out.data()[i] = std::sqrt(acc);
  }
  if (detail::tracing({&m})) {
    auto pm = m.impl(), po = out.impl();
    Tape::active()->record(po, [pm, po, r, c] {
      if (!pm->needs_grad()) return;
      auto& gm = pm->ensure_grad();
      const auto& g = po->grad;
      for (std::size_t i = 0; i < r; ++i) {
        const double ni = po->re[i];
        if (ni == 0.0) continue;
        const double gi = g[i] / ni;
        for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += gi * pm->re[i * c + j];
      }
    });
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  detail::check_real(a, "sum");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
  Tensor out = Tensor::scalar(acc);
  if (detail::tracing({&a})) {
    auto pa = a.impl(), po = out.impl();
    Tape::active()->record(po, [pa, po] {
      if (!pa->needs_grad()) return;
      auto& ga = pa->ensure_grad();
      const double g = po->grad[0];
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  detail::check_real(a, "mean");
  check_arg(a.numel() > 0, "mean: empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
  const double inv = 1.0 / static_cast<double>(a.numel());
  Tensor out = Tensor::scalar(acc * inv);
  if (detail::tracing({&a})) {
    auto pa = a.impl(), po = out.impl();
    Tape::active()->record(po, [pa, po, inv] {
      if (!pa->needs_grad()) return;
      auto& ga = pa->ensure_grad();
      const double g = po->grad[0] * inv;
      for (auto& v : ga) v += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// feature-map ops (rank-3 tensors laid out channel-major: {C, H, W})
// ---------------------------------------------------------------------------

inline Tensor channel_slice(const Tensor& x, std::size_t c) {
  detail::check_real(x, "channel_slice");
  check_arg(x.rank() == 3 && c < x.dim(0), "channel_slice: bad channel index");
  const std::size_t hw = x.dim(1) * x.dim(2);
  Tensor out = Tensor::zeros({x.dim(1), x.dim(2)});
  const double* src = x.data() + c * hw;
  std::copy(src, src + hw, out.data());
  if (detail::tracing({&x})) {
    auto px = x.impl(), po = out.impl();
    Tape::active()->record(po, [px, po, c, hw] {
      if (!px->needs_grad()) return;
      auto& gx = px->ensure_grad();
      const auto& g = po->grad;
      for (std::size_t i = 0; i < hw; ++i) gx[c * hw + i] += g[i];
    });
  }
  return out;
}

inline Tensor channel_stack(const std::vector<Tensor>& channels) {
  check_arg(!channels.empty(), "channel_stack: empty channel list");
  const std::size_t h = channels[0].dim(0), w = channels[0].dim(1);
  bool trace = false;
  for (const auto& ch : channels) {
    detail::check_real(ch, "channel_stack");
    check_arg(ch.rank() == 2 && ch.dim(0) == h && ch.dim(1) == w,
              "channel_stack: inconsistent channel shapes");
    if (Tape::active() && ch.needs_grad()) trace = true;
  }
  const std::size_t hw = h * w, n = channels.size();
  Tensor out = Tensor::zeros({n, h, w});
  for (std::size_t c = 0; c < n; ++c)
    std::copy(channels[c].data(), channels[c].data() + hw, out.data() + c * hw);
  if (trace) {
    std::vector<std::shared_ptr<detail::TensorImpl>> ps;
    ps.reserve(n);
    for (const auto& ch : channels) ps.push_back(ch.impl());
    auto po = out.impl();
    Tape::active()->record(po, [ps, po, hw] {
      const auto& g = po->grad;
      for (std::size_t c = 0; c < ps.size(); ++c) {
        if (!ps[c]->needs_grad()) continue;
        auto& gc = ps[c]->ensure_grad();
        for (std::size_t i = 0; i < hw; ++i) gc[i] += g[c * hw + i];
      }
    });
  }
  return out;
}

inline Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  detail::check_real(x, "upsample_nearest");
  check_arg(x.rank() == 3 && factor >= 1, "upsample_nearest: CHW tensor and factor >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  Tensor out = Tensor::zeros({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y) {
      const double* srow = x.data() + (ch * h + y / factor) * w;
      double* drow = out.data() + (ch * oh + y) * ow;
      for (std::size_t xx = 0; xx < ow; ++xx) drow[xx] = srow[xx / factor];
    }
  if (detail::tracing({&x})) {
    auto px = x.impl(), po = out.impl();
    Tape::active()->record(po, [px, po, c, h, w, factor] {
      if (!px->needs_grad()) return;
      auto& gx = px->ensure_grad();
      const auto& g = po->grad;
      const std::size_t oh = h * factor, ow = w * factor;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < oh; ++y) {
          double* drow = gx.data() + (ch * h + y / factor) * w;
          const double* grow = g.data() + (ch * oh + y) * ow;
          for (std::size_t xx = 0; xx < ow; ++xx) drow[xx / factor] += grow[xx];
        }
    });
  }
  return out;
}

// 3x3 same-convolution with zero padding: x {Cin,H,W}, k {Cout,Cin,3,3},
// bias {Cout} -> {Cout,H,W}.
inline Tensor conv3x3(const Tensor& x, const Tensor& k, const Tensor& bias) {
  detail::check_real(x, "conv3x3");
  detail::check_real(k, "conv3x3");
  detail::check_real(bias, "conv3x3");
  check_arg(x.rank() == 3, "conv3x3: CHW input required");
  check_arg(k.rank() == 4 && k.dim(2) == 3 && k.dim(3) == 3 && k.dim(1) == x.dim(0),
            "conv3x3: kernel must be {Cout,Cin,3,3} matching input channels");
  check_arg(bias.rank() == 1 && bias.dim(0) == k.dim(0),
            "conv3x3: bias length must equal Cout");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2), cout = k.dim(0);
  Tensor out = Tensor::zeros({cout, h, w});
  for (std::size_t co = 0; co < cout; ++co) {
    double* oc = out.data() + co * h * w;
    const double bv = bias.data()[co];
    for (std::size_t i = 0; i < h * w; ++i) oc[i] = bv;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* xc = x.data() + ci * h * w;
      const double* kk = k.data() + (co * cin + ci) * 9;
      for (std::size_t u = 0; u < 3; ++u)
        for (std::size_t v = 0; v < 3; ++v) {
          const double kv = kk[u * 3 + v];
          if (kv == 0.0) continue;
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(u) - 1;
          const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(v) - 1;
          const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? h - 1 : h;
          const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? w - 1 : w;
          for (std::size_t y = y0; y < y1; ++y) {
            const double* srow = xc + (y + dy) * w + dx;
            double* drow = oc + y * w;
            for (std::size_t xx = x0; xx < x1; ++xx) drow[xx] += kv * srow[xx];
          }
        }
    }
  }
  if (detail::tracing({&x, &k, &bias})) {
    auto px = x.impl(), pk = k.impl(), pb = bias.impl(), po = out.impl();
    Tape::active()->record(po, [px, pk, pb, po, cin, h, w, cout] {
      const auto& g = po->grad;
      if (pb->needs_grad()) {
        auto& gb = pb->ensure_grad();
        for (std::size_t co = 0; co < cout; ++co) {
          double acc = 0.0;
          const double* gc = g.data() + co * h * w;
          for (std::size_t i = 0; i < h * w; ++i) acc += gc[i];
          gb[co] += acc;
        }
      }
      for (std::size_t co = 0; co < cout; ++co) {
        const double* gc = g.data() + co * h * w;
        for (std::size_t ci = 0; ci < cin; ++ci) {
          const double* xc = px->re.data() + ci * h * w;
          const double* kk = pk->re.data() + (co * cin + ci) * 9;
          double* gk = pk->needs_grad()
                           ? pk->ensure_grad().data() + (co * cin + ci) * 9
                           : nullptr;
          double* gx = px->needs_grad() ? px->ensure_grad().data() + ci * h * w
                                        : nullptr;
          for (std::size_t u = 0; u < 3; ++u)
            for (std::size_t v = 0; v < 3; ++v) {
              const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(u) - 1;
              const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(v) - 1;
              const std::size_t y0 = dy < 0 ? 1 : 0, y1 = dy > 0 ? h - 1 : h;
              const std::size_t x0 = dx < 0 ? 1 : 0, x1 = dx > 0 ? w - 1 : w;
              if (gk != nullptr) {
                double acc = 0.0;
                for (std::size_t y = y0; y < y1; ++y) {
                  const double* srow = xc + (y + dy) * w + dx;
                  const double* grow = gc + y * w;
                  for (std::size_t xx = x0; xx < x1; ++xx)
                    acc += grow[xx] * srow[xx];
                }
                gk[u * 3 + v] += acc;
              }
              if (gx != nullptr) {
                const double kv = kk[u * 3 + v];
                if (kv == 0.0) continue;
                for (std::size_t y = y0; y < y1; ++y) {
                  double* drow = gx + (y + dy) * w + dx;
                  const double* grow = gc + y * w;
                  for (std::size_t xx = x0; xx < x1; ++xx)
                    drow[xx] += kv * grow[xx];
                }
              }
            }
        }
      }
    });
  }
  return out;
}

// Groups 2x2 neighborhoods of a row-major token grid: x {N,C} with
// N = grid_h*grid_w -> {N/4, 4C}, quadrant order (0,0),(0,1),(1,0),(1,1).
inline Tensor merge_tokens_2x2(const Tensor& x, std::size_t grid_h, std::size_t grid_w) {
  detail::check_real(x, "merge_tokens_2x2");
  check_arg(x.rank() == 2 && x.dim(0) == grid_h * grid_w,
            "merge_tokens_2x2: token count must equal grid_h*grid_w");
  check_arg(grid_h % 2 == 0 && grid_w % 2 == 0,
            "merge_tokens_2x2: grid dimensions must be even");
  const std::size_t c = x.dim(1), oh = grid_h / 2, ow = grid_w / 2;
  Tensor out = Tensor::zeros({oh * ow, 4 * c});
  for (std::size_t ti = 0; ti < oh; ++ti)
    for (std::size_t tj = 0; tj < ow; ++tj) {
      double* drow = out.data() + (ti * ow + tj) * 4 * c;
      for (std::size_t q = 0; q < 4; ++q) {
        const std::size_t sy = 2 * ti + q / 2, sx = 2 * tj + q % 2;
        const double* srow = x.data() + (sy * grid_w + sx) * c;
        std::copy(srow, srow + c, drow + q * c);
      }
    }
  if (detail::tracing({&x})) {
    auto px = x.impl(), po = out.impl();
    Tape::active()->record(po, [px, po, grid_h, grid_w, c] {
      if (!px->needs_grad()) return;
      auto& gx = px->ensure_grad();
      const auto& g = po->grad;
      const std::size_t oh = grid_h / 2, ow = grid_w / 2;
      for (std::size_t ti = 0; ti < oh; ++ti)
        for (std::size_t tj = 0; tj < ow; ++tj) {
          const double* grow = g.data() + (ti * ow + tj) * 4 * c;
          for (std::size_t q = 0; q < 4; ++q) {
            const std::size_t sy = 2 * ti + q / 2, sx = 2 * tj + q % 2;
            double* drow = gx.data() + (sy * grid_w + sx) * c;
            for (std::size_t i = 0; i < c; ++i) drow[i] += grow[q * c + i];
          }
        }
    });
  }
  return out;
}

// Log-softmax over axis 0 of a {C, ...} tensor, computed per trailing index.
inline Tensor log_softmax_channels(const Tensor& x) {
  detail::check_real(x, "log_softmax_channels");
  check_arg(x.rank() >= 2, "log_softmax_channels: rank >= 2 required");
  const std::size_t c = x.dim(0), m = x.numel() / c;
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t j = 0; j < m; ++j) {
    double mx = x.data()[j];
    for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, x.data()[i * m + j]);
    double lse = 0.0;
    for (std::size_t i = 0; i < c; ++i) lse += std::exp(x.data()[i * m + j] - mx);
    lse = mx + std::log(lse);
    for (std::size_t i = 0; i < c; ++i)
      out.data()[i * m + j] = x.data()[i * m + j] - lse;
  }
  if (detail::tracing({&x})) {
    auto px = x.impl(), po = out.impl();
    Tape::active()->record(po, [px, po, c, m] {
      if (!px->needs_grad()) return;
      auto& gx = px->ensure_grad();
      const auto& g = po->grad;
      for (std::size_t j = 0; j < m; ++j) {
        double gsum = 0.0;
        for (std::size_t i = 0; i < c; ++i) gsum += g[i * m + j];
        for (std::size_t i = 0; i < c; ++i)
          gx[i * m + j] += g[i * m + j] - std::exp(po->re[i * m + j]) * gsum;
      }
    });
  }
  return out;
}

inline Tensor softmax_channels(const Tensor& x) {
  return exp_t(log_softmax_channels(x));
}

// ---------------------------------------------------------------------------
// complex ops
//
// Cotangent convention: the gradient buffer of a complex tensor stores
// (dL/dRe, dL/dIm) as one complex number per element. With that convention the
// adjoint of a complex-linear map N is conj(N)^T, and elementwise products
// pull back through the conjugate of the other factor.
// ---------------------------------------------------------------------------

inline Tensor to_complex(const Tensor& x) {
  detail::check_real(x, "to_complex");
  std::vector<cplx> v(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) v[i] = cplx(x.data()[i], 0.0);
  Tensor out = Tensor::from_complex(x.shape(), std::move(v));
  if (detail::tracing({&x})) {
    auto px = x.impl(), po = out.impl();
    Tape::active()->record(po, [px, po] {
      if (!px->needs_grad()) return;
      auto& gx = px->ensure_grad();
      const auto& g = po->cgrad;
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i].real();
    });
  }
  return out;
}

inline Tensor real_part(const Tensor& f) {
  detail::check_complex(f, "real_part");
  Tensor out = Tensor::zeros(f.shape());
  for (std::size_t i = 0; i < f.numel(); ++i) out.data()[i] = f.cdata()[i].real();
  if (detail::tracing({&f})) {
    auto pf = f.impl(), po = out.impl();
    Tape::active()->record(po, [pf, po] {
      if (!pf->needs_grad()) return;
      auto& gf = pf->ensure_cgrad();
      const auto& g = po->grad;
      for (std::size_t i = 0; i < gf.size(); ++i) gf[i] += cplx(g[i], 0.0);
    });
  }
  return out;
}

inline Tensor cadd(const Tensor& a, const Tensor& b) {
  detail::check_complex(a, "cadd");
  detail::check_complex(b, "cadd");
  detail::check_same_shape(a, b, "cadd");
  std::vector<cplx> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.cdata()[i] + b.cdata()[i];
  Tensor out = Tensor::from_complex(a.shape(), std::move(v));
  if (detail::tracing({&a, &b})) {
    auto pa = a.impl(), pb = b.impl(), po = out.impl();
    Tape::active()->record(po, [pa, pb, po] {
      const auto& g = po->cgrad;
      if (pa->needs_grad()) {
        auto& ga = pa->ensure_cgrad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      }
      if (pb->needs_grad()) {
        auto& gb = pb->ensure_cgrad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor csub(const Tensor& a, const Tensor& b) {
  detail::check_complex(a, "csub");
  detail::check_complex(b, "csub");
  detail::check_same_shape(a, b, "csub");
  std::vector<cplx> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.cdata()[i] - b.cdata()[i];
  Tensor out = Tensor::from_complex(a.shape(), std::move(v));
  if (detail::tracing({&a, &b})) {
    auto pa = a.impl(), pb = b.impl(), po = out.impl();
    Tape::active()->record(po, [pa, pb, po] {
      const auto& g = po->cgrad;
      if (pa->needs_grad()) {
        auto& ga = pa->ensure_cgrad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      }
      if (pb->needs_grad()) {
        auto& gb = pb->ensure_cgrad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

inline Tensor cscale(const Tensor& a, double c) {
  detail::check_complex(a, "cscale");
  std::vector<cplx> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.cdata()[i] * c;
  Tensor out = Tensor::from_complex(a.shape(), std::move(v));
  if (detail::tracing({&a})) {
    auto pa = a.impl(), po = out.impl();
    Tape::active()->record(po, [pa, po, c] {
      if (!pa->needs_grad()) return;
      auto& ga = pa->ensure_cgrad();
      const auto& g = po->cgrad;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

inline Tensor cmul(const Tensor& a, const Tensor& b) {
  detail::check_complex(a, "cmul");
  detail::check_complex(b, "cmul");
  detail::check_same_shape(a, b, "cmul");
  std::vector<cplx> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.cdata()[i] * b.cdata()[i];
  Tensor out = Tensor::from_complex(a.shape(), std::move(v));
  if (detail::tracing({&a, &b})) {
    auto pa = a.impl(), pb = b.impl(), po = out.impl();
    Tape::active()->record(po, [pa, pb, po] {
      const auto& g = po->cgrad;
      if (pa->needs_grad()) {
        auto& ga = pa->ensure_cgrad();
        for (std::size_t i = 0; i < ga.size(); ++i)
          ga[i] += g[i] * std::conj(pb->cx[i]);
      }
      if (pb->needs_grad()) {
        auto& gb = pb->ensure_cgrad();
        for (std::size_t i = 0; i < gb.size(); ++i)
          gb[i] += g[i] * std::conj(pa->cx[i]);
      }
    });
  }
  return out;
}

inline Tensor cmagnitude(const Tensor& f) {
  detail::check_complex(f, "cmagnitude");
  Tensor out = Tensor::zeros(f.shape());
  for (std::size_t i = 0; i < f.numel(); ++i) out.data()[i] = std::abs(f.cdata()[i]);
  if (detail::tracing({&f})) {
    auto pf = f.impl(), po = out.impl();
    Tape::active()->record(po, [pf, po] {
      if (!pf->needs_grad()) return;
      auto& gf = pf->ensure_cgrad();
      const auto& g = po->grad;
      for (std::size_t i = 0; i < gf.size(); ++i) {
        const double r = po->re[i];
        if (r > 0.0) gf[i] += g[i] / r * pf->cx[i];
      }
    });
  }
  return out;
}

// Unnormalized forward 2D DFT of a real HxW tensor.
inline Tensor fft2(const Tensor& x) {
  detail::check_real(x, "fft2");
  check_arg(x.rank() == 2 && x.dim(0) >= 1 && x.dim(1) >= 1,
            "fft2: nonempty HxW tensor required");
  const std::size_t h = x.dim(0), w = x.dim(1);
  std::vector<cplx> v(h * w);
  for (std::size_t i = 0; i < h * w; ++i) v[i] = cplx(x.data()[i], 0.0);
  fft2_buffer(v.data(), h, w);
  Tensor out = Tensor::from_complex({h, w}, std::move(v));
  if (detail::tracing({&x})) {
    auto px = x.impl(), po = out.impl();
    Tape::active()->record(po, [px, po, h, w] {
      if (!px->needs_grad()) return;
      // adjoint of the symmetric DFT matrix: dx = Re(F(conj(g)))
      std::vector<cplx> tmp(po->cgrad);
      for (auto& z : tmp) z = std::conj(z);
      fft2_buffer(tmp.data(), h, w);
      auto& gx = px->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += tmp[i].real();
    });
  }
  return out;
}

// Inverse 2D DFT (1/(HW)-normalized), complex in, complex out. Real extraction
// is a separate explicit op.
inline Tensor ifft2(const Tensor& f) {
  detail::check_complex(f, "ifft2");
  check_arg(f.rank() == 2, "ifft2: HxW tensor required");
  const std::size_t h = f.dim(0), w = f.dim(1);
  std::vector<cplx> v(f.cvalues());
  ifft2_buffer(v.data(), h, w);
  Tensor out = Tensor::from_complex({h, w}, std::move(v));
  if (detail::tracing({&f})) {
    auto pf = f.impl(), po = out.impl();
    Tape::active()->record(po, [pf, po, h, w] {
      if (!pf->needs_grad()) return;
      // adjoint: df = (1/(HW)) * F(g)
      std::vector<cplx> tmp(po->cgrad);
      fft2_buffer(tmp.data(), h, w);
      const double norm = 1.0 / (static_cast<double>(h) * static_cast<double>(w));
      auto& gf = pf->ensure_cgrad();
      for (std::size_t i = 0; i < gf.size(); ++i) gf[i] += tmp[i] * norm;
    });
  }
  return out;
}

}  // namespace faar
