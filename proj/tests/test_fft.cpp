#include <cmath>
#include <vector>

#include "doctest.h"
#include "faar/ops.hpp"
#include "faar/random.hpp"
#include "support/oracles.hpp"

using namespace faar;

namespace {

Tensor random_map(std::size_t h, std::size_t w, Rng& rng) {
  std::vector<double> v(h * w);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from({h, w}, std::move(v));
}

double max_cplx_diff(const std::vector<cplx>& a, const std::vector<cplx>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("fft2 of constant signal concentrates in the DC bin") {
  Tensor ones = Tensor::full({2, 2}, 1.0);
  Tensor f = fft2(ones);
  CHECK(std::abs(f.cdata()[0] - cplx(4.0, 0.0)) < 1e-12);
  for (std::size_t i = 1; i < 4; ++i) CHECK(std::abs(f.cdata()[i]) < 1e-12);
}

TEST_CASE("fft2 matches the direct DFT summation") {
  Rng rng(21);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{4, 4},
                      {8, 8},
                      {16, 16},
                      {3, 5},
                      {6, 10},
                      {16, 8}}) {
    Tensor x = random_map(h, w, rng);
    Tensor f = fft2(x);
    auto ref = oracle::naive_dft2(oracle::real_to_cplx(x.values()), h, w);
    CHECK(max_cplx_diff(f.cvalues(), ref) < 1e-9);
  }
}

TEST_CASE("ifft2 inverts fft2") {
  Rng rng(22);
  Tensor x = random_map(8, 8, rng);
  Tensor back = real_part(ifft2(fft2(x)));
  CHECK(oracle::max_abs_diff(back, x) < 1e-9);
}

TEST_CASE("ifft2 matches the direct inverse DFT") {
  Rng rng(23);
  Tensor x = random_map(4, 6, rng);
  Tensor f = fft2(x);
  Tensor z = ifft2(f);
  auto ref = oracle::naive_idft2(f.cvalues(), 4, 6);
  CHECK(max_cplx_diff(z.cvalues(), ref) < 1e-9);
}

TEST_CASE("Parseval identity") {
  Rng rng(24);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor x = random_map(8, 4, rng);
    double space = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) space += x.data()[i] * x.data()[i];
    Tensor f = fft2(x);
    double freq = 0.0;
    for (std::size_t i = 0; i < f.numel(); ++i) freq += std::norm(f.cdata()[i]);
    freq /= static_cast<double>(x.numel());
    CHECK(std::fabs(space - freq) / std::max(space, 1e-12) < 1e-9);
  }
}
