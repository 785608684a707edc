#include <cmath>
#include <vector>

#include "doctest.h"
#include "faar/ops.hpp"
#include "faar/random.hpp"
#include "support/oracles.hpp"

using namespace faar;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(v));
}

Tensor random_param(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = random_tensor(shape, rng, lo, hi);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor col = Tensor::from({2, 1}, {2, 3});
  Tensor r = matmul(eye, col);
  CHECK(r.data()[0] == doctest::Approx(2.0));
  CHECK(r.data()[1] == doctest::Approx(3.0));

  Tensor row = Tensor::from({1, 2}, {1, 1});
  CHECK(matmul(row, col).value() == doctest::Approx(5.0));

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})),
                  std::invalid_argument);
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(11);
  Tensor a = random_param({3, 4}, rng);
  Tensor b = random_param({4, 2}, rng);
  Tensor w = random_tensor({3, 2}, rng);
  auto loss = [&] { return sum(mul(matmul(a, b), w)); };
  auto res = oracle::check_gradients(loss, {{"a", a}, {"b", b}});
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("matmul associativity against naive triple loop") {
  Rng rng(7);
  Tensor a = random_tensor({8, 8}, rng);
  Tensor b = random_tensor({8, 8}, rng);
  Tensor c = random_tensor({8, 8}, rng);
  Tensor left = matmul(matmul(a, b), c);
  auto bc = oracle::naive_matmul(b.values(), c.values(), 8, 8, 8);
  auto right = oracle::naive_matmul(a.values(), bc, 8, 8, 8);
  CHECK(oracle::max_abs_diff(left.values(), right) < 1e-10);
}

TEST_CASE("rowwise_l2_norm examples") {
  CHECK(rowwise_l2_norm(Tensor::from({1, 2}, {3, 4})).data()[0] == doctest::Approx(5.0));
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor n = rowwise_l2_norm(eye);
  CHECK(n.data()[0] == doctest::Approx(1.0));
  CHECK(n.data()[1] == doctest::Approx(1.0));

  Rng rng(3);
  Tensor m = random_param({4, 4}, rng);
  Tensor w = random_tensor({4}, rng);
  auto loss = [&] { return sum(mul(rowwise_l2_norm(m), w)); };
  CHECK(oracle::check_gradients(loss, {{"m", m}}).max_rel_err < 1e-5);
}

TEST_CASE("backward basics") {
  SUBCASE("loss = sum(x) gives unit gradients") {
    Tensor x = Tensor::param({3}, {1, 2, 3});
    Tape tape;
    Tensor loss = sum(x);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == doctest::Approx(1.0));
  }
  SUBCASE("loss = 0.5*||x||^2 gives grad = x") {
    Tensor x = Tensor::param({4}, {0.5, -1.0, 2.0, 3.0});
    Tape tape;
    Tensor loss = scale(sum(mul(x, x)), 0.5);
    tape.backward(loss);
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(x.grad()[i] == doctest::Approx(x.data()[i]));
  }
  SUBCASE("fan-out accumulates: y = x + x") {
    Tensor x = Tensor::param({2}, {1.0, 2.0});
    Tape tape;
    Tensor loss = sum(add(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(2.0));
  }
  SUBCASE("non-scalar loss is rejected") {
    Tensor x = Tensor::param({2}, {1.0, 2.0});
    Tape tape;
    Tensor y = add(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  }
  SUBCASE("detached loss is rejected") {
    Tensor x = Tensor::from({2}, {1.0, 2.0});  // no grad path
    Tape tape;
    Tensor loss = sum(x);  // not recorded: no parent needs grad
    CHECK_THROWS_AS(faar::backward(loss), std::runtime_error);
  }
  SUBCASE("double backward on one recording is rejected") {
    Tensor x = Tensor::param({2}, {1.0, 2.0});
    Tape tape;
    Tensor loss = sum(x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);
  }
}

TEST_CASE("thresholded masks are gradient-blocked constants") {
  Tensor x = Tensor::param({3}, {-1.0, 0.5, 2.0});
  Tape tape;
  Tensor mask = greater_than(x, 0.0);
  CHECK_FALSE(mask.needs_grad());
  CHECK(mask.data()[0] == 0.0);
  CHECK(mask.data()[1] == 1.0);
  CHECK(mask.data()[2] == 1.0);
  Tensor loss = sum(mul(x, mask));
  tape.backward(loss);
  // d loss / dx = mask values only; no derivative through the threshold
  CHECK(x.grad()[0] == doctest::Approx(0.0));
  CHECK(x.grad()[1] == doctest::Approx(1.0));
  CHECK(x.grad()[2] == doctest::Approx(1.0));
}

TEST_CASE("every differentiable op passes finite differences over 20 seeds") {
  double worst = 0.0;
  std::string worst_op;
  auto track = [&](const char* op, double err) {
    if (err > worst) {
      worst = err;
      worst_op = op;
    }
  };

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    {
      Tensor a = random_param({3, 4}, rng);
      Tensor b = random_param({3, 4}, rng);
      Tensor w = random_tensor({3, 4}, rng);
      track("add", oracle::check_gradients(
                       [&] { return sum(mul(add(a, b), w)); }, {{"a", a}, {"b", b}})
                       .max_rel_err);
      track("sub", oracle::check_gradients(
                       [&] { return sum(mul(sub(a, b), w)); }, {{"a", a}, {"b", b}})
                       .max_rel_err);
      track("mul", oracle::check_gradients(
                       [&] { return sum(mul(mul(a, b), w)); }, {{"a", a}, {"b", b}})
                       .max_rel_err);
    }
    {
      Tensor a = random_param({2, 5}, rng, 0.5, 1.5);
      Tensor b = random_param({2, 5}, rng, 0.5, 1.5);
      Tensor w = random_tensor({2, 5}, rng);
      track("div", oracle::check_gradients(
                       [&] { return sum(mul(div(a, b), w)); }, {{"a", a}, {"b", b}})
                       .max_rel_err);
      track("log", oracle::check_gradients([&] { return sum(mul(log_t(a), w)); },
                                           {{"a", a}})
                       .max_rel_err);
    }
    {
      Tensor a = random_param({4, 3}, rng);
      Tensor w = random_tensor({4, 3}, rng);
      track("scale", oracle::check_gradients(
                         [&] { return sum(mul(scale(a, -1.7), w)); }, {{"a", a}})
                         .max_rel_err);
      track("tanh", oracle::check_gradients([&] { return sum(mul(tanh_t(a), w)); },
                                            {{"a", a}})
                        .max_rel_err);
      track("exp", oracle::check_gradients([&] { return sum(mul(exp_t(a), w)); },
                                           {{"a", a}})
                       .max_rel_err);
      track("softplus",
            oracle::check_gradients([&] { return sum(mul(softplus_t(a), w)); },
                                    {{"a", a}})
                .max_rel_err);
      track("mean", oracle::check_gradients([&] { return mean(mul(a, w)); },
                                            {{"a", a}})
                        .max_rel_err);
      track("transpose",
            oracle::check_gradients(
                [&] { return sum(mul(transpose(a), transpose(w))); }, {{"a", a}})
                .max_rel_err);
      track("reshape", oracle::check_gradients(
                           [&] {
                             return sum(mul(reshape(a, {2, 6}), reshape(w, {2, 6})));
                           },
                           {{"a", a}})
                           .max_rel_err);
    }
    {
      // abs and clamp_min away from their kinks
      Tensor a = random_param({3, 3}, rng, 0.2, 1.0);
      Tensor s = random_param({3, 3}, rng, -1.0, -0.2);
      Tensor w = random_tensor({3, 3}, rng);
      track("abs_pos", oracle::check_gradients([&] { return sum(mul(abs_t(a), w)); },
                                               {{"a", a}})
                           .max_rel_err);
      track("abs_neg", oracle::check_gradients([&] { return sum(mul(abs_t(s), w)); },
                                               {{"s", s}})
                           .max_rel_err);
      track("clamp_min",
            oracle::check_gradients(
                [&] { return sum(mul(clamp_min(a, 0.1), w)); }, {{"a", a}})
                .max_rel_err);
    }
    {
      Tensor m = random_param({3, 5}, rng);
      Tensor v = random_param({3}, rng, 0.5, 1.5);
      Tensor c = random_param({5}, rng, 0.5, 1.5);
      Tensor w = random_tensor({3, 5}, rng);
      track("add_bias",
            oracle::check_gradients([&] { return sum(mul(add_bias(m, v), w)); },
                                    {{"m", m}, {"v", v}})
                .max_rel_err);
      track("scale_rows",
            oracle::check_gradients([&] { return sum(mul(scale_rows(m, v), w)); },
                                    {{"m", m}, {"v", v}})
                .max_rel_err);
      track("scale_cols",
            oracle::check_gradients([&] { return sum(mul(scale_cols(m, c), w)); },
                                    {{"m", m}, {"c", c}})
                .max_rel_err);
    }
    {
      Tensor s = random_param({1}, rng, 0.3, 1.2);
      Tensor t = random_param({2, 3}, rng);
      Tensor w = random_tensor({2, 3}, rng);
      track("scale_by",
            oracle::check_gradients([&] { return sum(mul(scale_by(t, s), w)); },
                                    {{"t", t}, {"s", s}})
                .max_rel_err);
    }
    {
      Tensor x = random_param({2, 4, 4}, rng);
      Tensor w2 = random_tensor({4, 4}, rng);
      Tensor w3 = random_tensor({2, 8, 8}, rng);
      track("channel_slice",
            oracle::check_gradients(
                [&] { return sum(mul(channel_slice(x, 1), w2)); }, {{"x", x}})
                .max_rel_err);
      track("channel_stack",
            oracle::check_gradients(
                [&] {
                  return sum(mul(channel_stack({channel_slice(x, 1), channel_slice(x, 0)}),
                                 random_tensor({2, 4, 4}, rng)));
                },
                {{"x", x}})
                .max_rel_err);
      track("upsample",
            oracle::check_gradients(
                [&] { return sum(mul(upsample_nearest(x, 2), w3)); }, {{"x", x}})
                .max_rel_err);
    }
    {
      Tensor x = random_param({3, 5, 5}, rng);
      Tensor k = random_param({2, 3, 3, 3}, rng);
      Tensor b = random_param({2}, rng);
      Tensor w = random_tensor({2, 5, 5}, rng);
      track("conv3x3",
            oracle::check_gradients(
                [&] { return sum(mul(conv3x3(x, k, b), w)); },
                {{"x", x}, {"k", k}, {"b", b}})
                .max_rel_err);
    }
    {
      Tensor x = random_param({16, 3}, rng);
      Tensor w = random_tensor({4, 12}, rng);
      track("merge_tokens",
            oracle::check_gradients(
                [&] { return sum(mul(merge_tokens_2x2(x, 4, 4), w)); }, {{"x", x}})
                .max_rel_err);
    }
    {
      Tensor x = random_param({4, 3, 3}, rng);
      Tensor w = random_tensor({4, 3, 3}, rng);
      track("log_softmax",
            oracle::check_gradients(
                [&] { return sum(mul(log_softmax_channels(x), w)); }, {{"x", x}})
                .max_rel_err);
      track("softmax",
            oracle::check_gradients(
                [&] { return sum(mul(softmax_channels(x), w)); }, {{"x", x}})
                .max_rel_err);
    }
    {
      // complex chain: fft2 -> filter multiply -> ifft2 -> real part
      Tensor x = random_param({4, 4}, rng);
      Tensor f = random_param({4, 4}, rng, 0.2, 1.5);
      Tensor w = random_tensor({4, 4}, rng);
      track("fft_chain",
            oracle::check_gradients(
                [&] {
                  Tensor spec = fft2(x);
                  Tensor y = cmul(to_complex(f), spec);
                  return sum(mul(real_part(ifft2(y)), w));
                },
                {{"x", x}, {"f", f}})
                .max_rel_err);
      track("cmagnitude",
            oracle::check_gradients(
                [&] { return sum(mul(cmagnitude(fft2(x)), w)); }, {{"x", x}})
                .max_rel_err);
      track("csub_cadd",
            oracle::check_gradients(
                [&] {
                  Tensor a = fft2(x);
                  Tensor b = cscale(cadd(a, csub(a, a)), 0.5);
                  return sum(mul(real_part(ifft2(b)), w));
                },
                {{"x", x}})
                .max_rel_err);
    }
  }
  INFO("worst op: ", worst_op, " rel err ", worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("sum and mean reductions") {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(sum(x).value() == doctest::Approx(10.0));
  CHECK(mean(x).value() == doctest::Approx(2.5));
}

TEST_CASE("softmax columns sum to one") {
  Rng rng(5);
  Tensor x = Tensor::from({3, 2, 2}, {0.1, -2.0, 3.0, 0.4, 1.0, 0.0, -1.0, 2.0,
                                      0.7, 0.2, -0.5, 1.5});
  Tensor s = softmax_channels(x);
  for (std::size_t j = 0; j < 4; ++j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < 3; ++c) acc += s.data()[c * 4 + j];
    CHECK(std::fabs(acc - 1.0) < 1e-9);
  }
}
