#include <doctest.h>

#include <cmath>
#include <limits>

#include "corelab/autograd.hpp"
#include "corelab/errors.hpp"
#include "../support/oracles.hpp"

using namespace corelab;

TEST_CASE("tensor shape and data invariants") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK(Tensor::identity(3)(1, 1) == 1.0);
  CHECK(Tensor::identity(3)(1, 2) == 0.0);
}

TEST_CASE("matmul") {
  Rng rng(11);
  const Tensor a = oracle::random_tensor(rng, 2, 2);
  CHECK(kernels::matmul(Tensor::identity(2), a) == a);
  const Tensor z({2, 3}), b = oracle::random_tensor(rng, 3, 2);
  const Tensor zb = kernels::matmul(z, b);
  for (double v : zb.data()) CHECK(v == 0.0);
  const Tensor x = oracle::random_tensor(rng, 3, 3), y = oracle::random_tensor(rng, 3, 3);
  CHECK(max_abs_diff(kernels::matmul(x, y), oracle::matmul(x, y)) < 1e-12);
  CHECK(max_abs_diff(kernels::matmul_nt(x, y), oracle::matmul(x, kernels::transpose(y))) < 1e-12);
  CHECK(max_abs_diff(kernels::matmul_tn(x, y), oracle::matmul(kernels::transpose(x), y)) < 1e-12);
  CHECK_THROWS_AS(kernels::matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST_CASE("masked softmax") {
  SUBCASE("uniform") {
    const Tensor p = kernels::masked_softmax(Tensor({1, 3}), AdditiveMask(1, 3, true));
    for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("single survivor") {
    AdditiveMask m(1, 3, false);
    m.set_kept(0, 2, true);
    const Tensor p = kernels::masked_softmax(Tensor({1, 3}, {5, 1, 9}), m);
    CHECK(p[0] == 0.0);
    CHECK(p[1] == 0.0);
    CHECK(p[2] == 1.0);
  }
  SUBCASE("partial mask against scalar oracle") {
    AdditiveMask m(1, 3, true);
    m.set_kept(0, 0, false);
    const Tensor p = kernels::masked_softmax(Tensor({1, 3}, {1, 2, 3}), m);
    const double e2 = std::exp(2.0), e3 = std::exp(3.0);
    CHECK(p[0] == 0.0);
    CHECK(std::abs(p[1] - e2 / (e2 + e3)) < 1e-15);
    CHECK(std::abs(p[2] - e3 / (e2 + e3)) < 1e-15);
  }
  SUBCASE("fully masked row") {
    CHECK_THROWS_AS(kernels::masked_softmax(Tensor({1, 3}), AdditiveMask(1, 3, false)), InvariantViolation);
  }
  SUBCASE("rows sum to one, masked entries exactly zero") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t r = 1 + rng.below(5), c = 1 + rng.below(9);
      const Tensor logits = oracle::random_tensor(rng, r, c, 30.0);
      AdditiveMask m(r, c, false);
      for (std::size_t i = 0; i < r; ++i) {
        m.set_kept(i, rng.below(c), true);
        for (std::size_t j = 0; j < c; ++j)
          if (rng.below(2)) m.set_kept(i, j, true);
      }
      const Tensor p = kernels::masked_softmax(logits, m);
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          if (!m.kept(i, j)) CHECK(p(i, j) == 0.0);
          CHECK(p(i, j) >= 0.0);
          s += p(i, j);
        }
        CHECK(std::abs(s - 1.0) < 1e-9);
      }
    }
  }
  CHECK(AdditiveMask(1, 1, false).value(0, 0) == -std::numeric_limits<double>::infinity());
  CHECK(AdditiveMask(1, 1, true).value(0, 0) == 0.0);
}

TEST_CASE("cosine similarity") {
  const std::vector<double> u{0.3, -1.2, 2.0};
  CHECK(kernels::cosine_similarity(u, u) == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<double> e0{1, 0}, e1{0, 1};
  CHECK(kernels::cosine_similarity(e0, e1) == 0.0);
  Rng rng(8);
  const Tensor a = oracle::random_tensor(rng, 2, 8);
  CHECK(std::abs(kernels::cosine_similarity(a.row(0), a.row(1)) - oracle::cosine(a.row(0), a.row(1))) < 1e-12);
  const std::vector<double> zero{0, 0};
  CHECK_THROWS_AS(kernels::cosine_similarity(zero, e0), DomainError);
}

TEST_CASE("cross entropy") {
  const std::vector<TokenId> t{2};
  CHECK(kernels::cross_entropy(Tensor({1, 4}), t) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  Tensor peaked({1, 4});
  peaked(0, 2) = 30.0;
  const double near_zero = kernels::cross_entropy(peaked, t);
  CHECK(near_zero > 0.0);
  CHECK(near_zero < 1e-12);
  const Tensor l({2, 3}, {0.2, -1.0, 0.7, 1.5, 0.1, -0.4});
  const std::vector<TokenId> tg{2, 0};
  double expect = 0.0;
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 3; ++c) s += std::exp(l(r, c));
    expect += -(l(r, static_cast<std::size_t>(tg[r])) - std::log(s));
  }
  CHECK(std::abs(kernels::cross_entropy(l, tg) - expect / 2.0) < 1e-10);
  const std::vector<TokenId> bad{4};
  CHECK_THROWS_AS(kernels::cross_entropy(Tensor({1, 4}), bad), IndexError);
}

TEST_CASE("transformer kernels") {
  const Tensor ln = kernels::layer_norm(Tensor({1, 5}, 3.0));
  for (double v : ln.data()) CHECK(v == 0.0);
  Rng rng(3);
  const Tensor x = oracle::random_tensor(rng, 4, 7, 3.0);
  const Tensor y = kernels::layer_norm(x);
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0.0, var = 0.0;
    for (double v : y.row(r)) mean += v;
    mean /= 7.0;
    for (double v : y.row(r)) var += (v - mean) * (v - mean);
    var /= 7.0;
    CHECK(std::abs(mean) < 1e-6);
    // eps in the denominator keeps the variance just under 1.
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
  CHECK(kernels::gelu(0.0) == 0.0);
  const Tensor table = oracle::random_tensor(rng, 3, 2);
  const std::vector<TokenId> ids{2, 0};
  const Tensor rows = kernels::embedding_lookup(table, ids);
  CHECK(rows(0, 0) == table(2, 0));
  CHECK(rows(1, 1) == table(0, 1));
  const std::vector<TokenId> bad{3};
  CHECK_THROWS_AS(kernels::embedding_lookup(table, bad), IndexError);
}

TEST_CASE("backward basics") {
  Parameter x("x", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  Parameter unused("u", Tensor({1, 1}, {2.0}));
  x.zero_grad();
  unused.zero_grad();
  {
    Tape tape;
    const Var vx = tape.param(x);
    tape.param(unused);
    tape.backward(ag::sum(vx));
  }
  for (double g : x.grad.data()) CHECK(g == 1.0);
  CHECK(unused.grad[0] == 0.0);

  SUBCASE("gradients accumulate until zero_grad") {
    Tape tape;
    tape.backward(ag::sum(tape.param(x)));
    for (double g : x.grad.data()) CHECK(g == 2.0);
    x.zero_grad();
    for (double g : x.grad.data()) CHECK(g == 0.0);
  }
  SUBCASE("detached loss") {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(Var{}), UsageError);
  }
}

TEST_CASE("two-layer network gradients match finite differences") {
  Rng rng(21);
  Parameter w1("w1", oracle::random_tensor(rng, 4, 6, 0.5));
  Parameter b1("b1", oracle::random_tensor(rng, 1, 6, 0.1));
  Parameter w2("w2", oracle::random_tensor(rng, 6, 5, 0.5));
  Parameter g("g", oracle::random_tensor(rng, 1, 6, 0.2));
  Parameter b("b", oracle::random_tensor(rng, 1, 6, 0.2));
  for (double& v : g.value.data()) v += 1.0;
  const Tensor input = oracle::random_tensor(rng, 3, 4);
  const std::vector<TokenId> targets{1, 4, 0};
  auto loss = [&](Tape& tape) {
    Var h = ag::add_row(ag::matmul(tape.constant(input), tape.param(w1)), tape.param(b1));
    h = ag::layer_norm(ag::gelu(h), tape.param(g), tape.param(b));
    return ag::cross_entropy(ag::matmul(h, tape.param(w2)), targets);
  };
  const auto res = oracle::grad_check(loss, {&w1, &b1, &w2, &g, &b});
  INFO("worst " << res.worst);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("attention and masked softmax gradients match finite differences") {
  Rng rng(4);
  Parameter q("q", oracle::random_tensor(rng, 4, 6));
  Parameter k("k", oracle::random_tensor(rng, 4, 6));
  Parameter v("v", oracle::random_tensor(rng, 4, 6));
  Parameter logits("c", oracle::random_tensor(rng, 3, 5));
  AdditiveMask mask(3, 5, false);
  for (std::size_t i = 0; i < 3; ++i) {
    mask.set_kept(i, i, true);
    mask.set_kept(i, 4 - i, true);
  }
  const Tensor weights = oracle::random_tensor(rng, 4, 6);
  const Tensor weights2 = oracle::random_tensor(rng, 3, 5);
  auto loss = [&](Tape& tape) {
    const Var a = ag::causal_self_attention(tape.param(q), tape.param(k), tape.param(v), 2);
    const Var s = ag::masked_softmax(tape.param(logits), mask);
    return ag::add(ag::sum(ag::mul(a, tape.constant(weights))), ag::sum(ag::mul(s, tape.constant(weights2))));
  };
  const auto res = oracle::grad_check(loss, {&q, &k, &v, &logits});
  INFO("worst " << res.worst);
  CHECK(res.max_rel_error < 1e-4);
  // Masked logits receive no gradient.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      if (!mask.kept(i, j)) CHECK(logits.grad(i, j) == 0.0);
}

TEST_CASE("ops are bit-deterministic") {
  Rng a(99), b(99);
  const Tensor x = oracle::random_tensor(a, 5, 5), y = oracle::random_tensor(b, 5, 5);
  CHECK(kernels::matmul(x, x) == kernels::matmul(y, y));
  CHECK(kernels::softmax_rows(x) == kernels::softmax_rows(y));
}
