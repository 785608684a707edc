#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "faar/common.hpp"

namespace faar {
namespace detail {

inline bool is_pow2(std::size_t n) { return n && (n & (n - 1)) == 0; }

// Roots of unity table for length n (power of two): w[k] = exp(-2*pi*i*k/n),
// k < n/2. Cached per length; transforms here are at most a few dozen points.
inline const std::vector<cplx>& twiddles(std::size_t n) {
  thread_local std::vector<std::vector<cplx>> cache;
  std::size_t log2n = 0;
  while ((std::size_t{1} << log2n) < n) ++log2n;
  if (cache.size() <= log2n) cache.resize(log2n + 1);
  auto& tw = cache[log2n];
  if (tw.size() != n / 2) {
    tw.resize(n / 2);
    for (std::size_t k = 0; k < n / 2; ++k) {
      double a = -2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n);
      tw[k] = cplx(std::cos(a), std::sin(a));
    }
  }
  return tw;
}

// In-place iterative radix-2 FFT, unnormalized. inverse=true conjugates the
// twiddles (still unnormalized).
inline void fft_pow2(cplx* a, std::size_t n, bool inverse) {
  if (n <= 1) return;
  // bit reversal
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const auto& tw = twiddles(n);
  for (std::size_t len = 2; len <= n; len <<= 1) {
    std::size_t step = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        cplx w = tw[k * step];
        if (inverse) w = std::conj(w);
        cplx u = a[i + k];
        cplx v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

// O(n^2) transform for non-power-of-two lengths. Unnormalized.
inline void dft_any(cplx* a, std::size_t n, bool inverse) {
  std::vector<cplx> out(n);
  const double sign = inverse ? 2.0 * M_PI : -2.0 * M_PI;
  for (std::size_t k = 0; k < n; ++k) {
    cplx acc(0.0, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      double ang = sign * static_cast<double>(k * t % n) / static_cast<double>(n);
      acc += a[t] * cplx(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  for (std::size_t k = 0; k < n; ++k) a[k] = out[k];
}

inline void fft1d(cplx* a, std::size_t n, bool inverse) {
  if (is_pow2(n)) {
    fft_pow2(a, n, inverse);
  } else {
    dft_any(a, n, inverse);
  }
}

}  // namespace detail

// Forward 2D DFT, unnormalized: F[u,v] = sum_{h,w} x[h,w] e^{-2pi i(uh/H + vw/W)}.
inline void fft2_buffer(cplx* data, std::size_t h, std::size_t w) {
  for (std::size_t r = 0; r < h; ++r) detail::fft1d(data + r * w, w, false);
  std::vector<cplx> col(h);
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) col[r] = data[r * w + c];
    detail::fft1d(col.data(), h, false);
    for (std::size_t r = 0; r < h; ++r) data[r * w + c] = col[r];
  }
}

// Inverse 2D DFT with 1/(H*W) normalization, so ifft2(fft2(x)) == x.
inline void ifft2_buffer(cplx* data, std::size_t h, std::size_t w) {
  for (std::size_t r = 0; r < h; ++r) detail::fft1d(data + r * w, w, true);
  std::vector<cplx> col(h);
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) col[r] = data[r * w + c];
    detail::fft1d(col.data(), h, true);
    for (std::size_t r = 0; r < h; ++r) data[r * w + c] = col[r];
  }
  const double norm = 1.0 / (static_cast<double>(h) * static_cast<double>(w));
  for (std::size_t i = 0; i < h * w; ++i) data[i] *= norm;
}

}  // namespace faar
