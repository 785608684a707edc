#pragma once

// Test-side oracles, kept independent of the library's compute paths: a naive
// triple-loop matrix product, a direct O(N^2) 2D DFT, and a central
// finite-difference gradient checker.

#include <cmath>
#include <complex>
#include <functional>
#include <vector>

#include "faar/tensor.hpp"

namespace oracle {

using faar::cplx;
using faar::Tensor;

inline std::vector<double> naive_matmul(const std::vector<double>& a,
                                        const std::vector<double>& b,
                                        std::size_t m, std::size_t k,
                                        std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
  return c;
}

// Direct summation DFT: F[u,v] = sum x[h,w] e^{-2pi i (uh/H + vw/W)}.
inline std::vector<cplx> naive_dft2(const std::vector<cplx>& x, std::size_t h,
                                    std::size_t w) {
  std::vector<cplx> f(h * w, cplx(0.0, 0.0));
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      cplx acc(0.0, 0.0);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x2 = 0; x2 < w; ++x2) {
          const double ang =
              -2.0 * M_PI *
              (static_cast<double>(u * y) / static_cast<double>(h) +
               static_cast<double>(v * x2) / static_cast<double>(w));
          acc += x[y * w + x2] * cplx(std::cos(ang), std::sin(ang));
        }
      f[u * w + v] = acc;
    }
  return f;
}

inline std::vector<cplx> naive_idft2(const std::vector<cplx>& f, std::size_t h,
                                     std::size_t w) {
  std::vector<cplx> x(h * w, cplx(0.0, 0.0));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x2 = 0; x2 < w; ++x2) {
      cplx acc(0.0, 0.0);
      for (std::size_t u = 0; u < h; ++u)
        for (std::size_t v = 0; v < w; ++v) {
          const double ang =
              2.0 * M_PI *
              (static_cast<double>(u * y) / static_cast<double>(h) +
               static_cast<double>(v * x2) / static_cast<double>(w));
          acc += f[u * w + v] * cplx(std::cos(ang), std::sin(ang));
        }
      x[y * w + x2] = acc / static_cast<double>(h * w);
    }
  return x;
}

inline std::vector<cplx> real_to_cplx(const std::vector<double>& x) {
  std::vector<cplx> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = cplx(x[i], 0.0);
  return out;
}

// Central finite-difference check: rebuilds the loss through `forward` for
// every perturbed entry and compares against the reverse-mode gradients.
// Returns the worst norm-relative error over all checked parameters.
struct GradCheck {
  double max_rel_err = 0.0;
  std::string worst_param;
};

inline GradCheck finite_diff_check(const std::function<double()>& forward_value,
                                   const std::function<void()>& backward_once,
                                   const std::vector<std::pair<std::string, Tensor>>& params,
                                   double h = 1e-5) {
  for (const auto& [name, p] : params) const_cast<Tensor&>(p).zero_grad();
  backward_once();

  GradCheck res;
  for (const auto& [name, p] : params) {
    Tensor& param = const_cast<Tensor&>(p);
    std::vector<double> analytic =
        param.has_grad() ? param.grad() : std::vector<double>(param.numel(), 0.0);
    double max_abs_diff = 0.0, max_abs_fd = 0.0;
    for (std::size_t i = 0; i < param.numel(); ++i) {
      const double saved = param.data()[i];
      param.data()[i] = saved + h;
      const double lp = forward_value();
      param.data()[i] = saved - h;
      const double lm = forward_value();
      param.data()[i] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      max_abs_diff = std::max(max_abs_diff, std::fabs(analytic[i] - fd));
      max_abs_fd = std::max(max_abs_fd, std::fabs(fd));
    }
    const double rel = max_abs_diff / std::max(max_abs_fd, 1e-8);
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_param = name;
    }
  }
  return res;
}

// Convenience wrapper for the common case: one closure that records a fresh
// tape, returns the loss tensor, and is reused for both value and gradient.
inline GradCheck check_gradients(const std::function<Tensor()>& build_loss,
                                 const std::vector<std::pair<std::string, Tensor>>& params,
                                 double h = 1e-5) {
  auto forward_value = [&]() {
    const Tensor loss = build_loss();  // no active tape: pure evaluation
    return loss.value();
  };
  auto backward_once = [&]() {
    faar::Tape tape;
    Tensor loss = build_loss();
    tape.backward(loss);
  };
  return finite_diff_check(forward_value, backward_once, params, h);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  return max_abs_diff(a.values(), b.values());
}

}  // namespace oracle
