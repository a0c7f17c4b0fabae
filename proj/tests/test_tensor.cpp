#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "recursor/errors.hpp"
#include "recursor/ops.hpp"

using namespace recursor;
using testutil::gradcheck;
using testutil::random_tensor;

TEST_CASE("matmul identity and shape errors") {
  auto a = Tensor::matrix({{1, 2}, {3, 4}});
  auto eye = Tensor::matrix({{1, 0}, {0, 1}});
  CHECK(matmul(a, eye).to_vector() == std::vector<double>{1, 2, 3, 4});
  CHECK(matmul(eye, Tensor::matrix({{5}, {7}})).to_vector() == std::vector<double>{5, 7});
  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3, 2})), DimensionError);
}

TEST_CASE("matmul gradient matches finite differences") {
  Rng rng(1);
  auto a = random_tensor(rng, {3, 4});
  auto b = random_tensor(rng, {4, 2});
  auto r = gradcheck({a, b}, [&] { return sum(matmul(a, b)); });
  CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("softmax fixtures") {
  auto s = softmax(Tensor::vector({0, 0}));
  CHECK(s.at(0) == doctest::Approx(0.5));
  auto big = softmax(Tensor::vector({1000, 1000, 1000}));
  for (double v : big.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
  auto r = softmax(Tensor::vector({0, std::log(3.0)}));
  CHECK(r.at(0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(r.at(1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  Rng rng(2);
  auto x = random_tensor(rng, {5, 7}, -5, 5);
  auto y = softmax(x);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) s += y.at(i, j);
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
  auto shifted = x.to_vector();
  for (auto& v : shifted) v += 3.0;
  auto y2 = softmax(Tensor::from({5, 7}, shifted));
  for (std::size_t i = 0; i < 35; ++i) CHECK(std::abs(y.at(i) - y2.at(i)) <= 1e-15);
}

TEST_CASE("softmax along a leading axis") {
  auto x = Tensor::matrix({{0, 1}, {0, 1}});
  auto y = softmax(x, 0);
  for (double v : y.data()) CHECK(v == doctest::Approx(0.5));
  Rng rng(3);
  auto z = random_tensor(rng, {3, 4});
  auto w = random_tensor(rng, {3, 4});
  CHECK(gradcheck({z}, [&] { return sum(mul(softmax(z, 0), w)); }).max_rel_error <= 1e-6);
}

TEST_CASE("rmsnorm fixtures and gradient") {
  auto ones = Tensor::vector({1, 1});
  auto y = rmsnorm(Tensor::vector({2, 2}), ones);
  CHECK(y.at(0) == doctest::Approx(1.0).epsilon(1e-6));
  auto z = rmsnorm(Tensor::vector({0, 0}), ones);
  CHECK(z.at(0) == 0.0);
  CHECK(z.at(1) == 0.0);
  Rng rng(4);
  auto x = random_tensor(rng, {3, 6});
  auto w = random_tensor(rng, {6});
  auto c = random_tensor(rng, {3, 6});
  CHECK(gradcheck({x, w}, [&] { return sum(mul(rmsnorm(x, w), c)); }).max_rel_error <= 1e-6);
}

TEST_CASE("causal attention fixtures") {
  auto q = Tensor::matrix({{0.3, -0.2}});
  auto k = Tensor::matrix({{0.1, 0.4}});
  auto v = Tensor::matrix({{2.0, -1.0}});
  auto out = causal_attention(q, k, v, 0);
  CHECK(out.at(0) == doctest::Approx(2.0));
  CHECK(out.at(1) == doctest::Approx(-1.0));

  // Zero query gives identical scores for every key.
  auto q0 = Tensor::matrix({{0.0, 0.0}});
  auto k2 = Tensor::matrix({{0.5, 0.1}, {-0.3, 0.9}});
  auto v2 = Tensor::matrix({{1.0, 0.0}, {0.0, 1.0}});
  auto o2 = causal_attention(q0, k2, v2, 1);
  CHECK(o2.at(0) == doctest::Approx(0.5));
  CHECK(o2.at(1) == doctest::Approx(0.5));

  CHECK_THROWS_AS(causal_attention(q0, k2, v2, 2), CacheError);
}

TEST_CASE("prefill attention equals token-by-token decode against a growing cache") {
  Rng rng(5);
  const std::size_t T = 6, d = 4;
  auto q = random_tensor(rng, {T, d});
  auto k = random_tensor(rng, {T, d});
  auto v = random_tensor(rng, {T, d});
  auto full = causal_attention(q, k, v, 0);
  double worst = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> qrow(q.data().begin() + t * d, q.data().begin() + (t + 1) * d);
    std::vector<double> kpre(k.data().begin(), k.data().begin() + (t + 1) * d);
    std::vector<double> vpre(v.data().begin(), v.data().begin() + (t + 1) * d);
    auto step = causal_attention(Tensor::from({1, d}, qrow), Tensor::from({t + 1, d}, kpre),
                                 Tensor::from({t + 1, d}, vpre), static_cast<int>(t));
    for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(step.at(j) - full.at(t, j)));
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("grouped-query attention gradient") {
  Rng rng(6);
  auto q = random_tensor(rng, {4, 8});
  auto k = random_tensor(rng, {5, 4});
  auto v = random_tensor(rng, {5, 4});
  auto c = random_tensor(rng, {4, 8});
  std::vector<int> qp{1, 2, 3, 4}, kp{0, 1, 2, 3, 4};
  auto r = gradcheck({q, k, v}, [&] {
    auto qr = rope(q, qp, 4);
    auto kr = rope(k, kp, 2);
    return sum(mul(masked_attention(qr, kr, v, qp, kp, 4, 2), c));
  });
  CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("cross entropy fixtures") {
  const std::size_t V = 49152;
  auto uniform = Tensor::zeros({1, V});
  std::vector<int> tgt{7};
  CHECK(cross_entropy(uniform, tgt).item() == doctest::Approx(std::log(49152.0)).epsilon(1e-12));
  double prev = 1e9;
  for (double margin : {1.0, 10.0, 100.0}) {
    auto l = Tensor::matrix({{margin, 0.0, 0.0}});
    std::vector<int> t0{0};
    const double nll = cross_entropy(l, t0).item();
    CHECK(nll < prev);
    prev = nll;
  }
  CHECK(prev < 1e-40);
  std::vector<int> bad{3};
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 3}), bad), IndexError);
  Rng rng(7);
  auto x = random_tensor(rng, {4, 6});
  std::vector<int> ts{0, 5, 2, 2};
  CHECK(gradcheck({x}, [&] { return cross_entropy(x, ts); }).max_rel_error <= 1e-6);
}

TEST_CASE("backward contracts") {
  auto w = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}).set_requires_grad();
  auto x = Tensor::matrix({{0.5, -1.0, 2.0}});
  auto unused = Tensor::vector({1.0}).set_requires_grad();
  auto loss = sum(matmul(x, w));
  loss.backward();
  // d sum(xW)/dW[i][j] = x[i]
  const std::vector<double> expected{0.5, 0.5, -1.0, -1.0, 2.0, 2.0};
  CHECK(std::vector<double>(w.grad().begin(), w.grad().end()) == expected);
  CHECK_FALSE(unused.has_grad());
  CHECK_THROWS_AS(matmul(x, w).backward(), ContractError);
}

TEST_CASE("every elementwise op passes the gradient check") {
  Rng rng(8);
  auto a = random_tensor(rng, {3, 4});
  auto b = random_tensor(rng, {3, 4});
  auto pos = random_tensor(rng, {3, 4}, 0.2, 1.0);
  auto c = random_tensor(rng, {3, 4});
  auto s = random_tensor(rng, {3});
  auto wsum = [&](const Tensor& t) { return sum(mul(t, c)); };
  CHECK(gradcheck({a, b}, [&] { return wsum(add(a, b)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a, b}, [&] { return wsum(sub(a, b)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a, b}, [&] { return wsum(mul(a, b)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return wsum(scale(a, -2.5)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a, s}, [&] { return wsum(scale_rows(a, s)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return wsum(square(a)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return wsum(sigmoid(a)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return wsum(tanh(a)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return wsum(silu(a)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return wsum(gelu(a)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return wsum(exp(a)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({pos}, [&] { return wsum(log(pos)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return wsum(log_softmax(a)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return dot(transpose(a), transpose(c)); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return dot(mean_rows(a), Tensor::vector({1, -2, 3, 0.5})); })
            .max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return dot(logsumexp_rows(a), s); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return dot(select_column(a, 2), s); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return mean(reshape(mul(a, c), {12})); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a, b}, [&] { return mse(a, b); }).max_rel_error <= 1e-6);
  CHECK(gradcheck({a}, [&] { return forward_kl(b, a); }).max_rel_error <= 1e-6);
  // Teacher side is detached.
  b.set_requires_grad(true);
  b.clear_grad();
  forward_kl(b, a).backward();
  CHECK_FALSE(b.has_grad());
}

TEST_CASE("row gather, scatter and concat gradients") {
  Rng rng(9);
  auto table = random_tensor(rng, {5, 3});
  auto vals = random_tensor(rng, {2, 3});
  auto c4 = random_tensor(rng, {4, 3});
  auto c5 = random_tensor(rng, {5, 3});
  std::vector<int> ids{4, 0, 4, 2};
  CHECK(gradcheck({table}, [&] { return dot(gather_rows(table, ids), c4); }).max_rel_error <= 1e-6);
  std::vector<int> rows{1, 3};
  CHECK(gradcheck({table, vals}, [&] { return dot(scatter_rows(table, rows, vals), c5); })
            .max_rel_error <= 1e-6);
  auto top = random_tensor(rng, {2, 3});
  auto bottom = random_tensor(rng, {2, 3});
  std::vector<Tensor> parts{top, bottom};
  CHECK(gradcheck({top, bottom}, [&] { return dot(concat_rows(parts), c4); }).max_rel_error <= 1e-6);
  std::vector<int> oob{5};
  CHECK_THROWS_AS(gather_rows(table, oob), IndexError);
}

TEST_CASE("binary cross entropy") {
  auto p = Tensor::vector({0.5, 0.5, 0.5});
  std::vector<double> t{1, 0, 1};
  CHECK(binary_cross_entropy(p, t).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  auto exact = Tensor::vector({1.0, 0.0});
  std::vector<double> t2{1, 0};
  CHECK(binary_cross_entropy(exact, t2).item() < 1e-6);
  Rng rng(10);
  auto q = random_tensor(rng, {6}, 0.05, 0.95);
  std::vector<double> t3{1, 0, 0, 1, 1, 0};
  CHECK(gradcheck({q}, [&] { return binary_cross_entropy(q, t3); }).max_rel_error <= 1e-6);
}

TEST_CASE("forward KL closed forms") {
  Rng rng(11);
  auto a = random_tensor(rng, {3, 5});
  CHECK(std::abs(forward_kl(a, a).item()) <= 1e-15);
  auto onehot = Tensor::matrix({{60, 0, 0, 0}});
  auto uniform = Tensor::zeros({1, 4});
  CHECK(forward_kl(onehot, uniform).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("forward and backward are bitwise reproducible") {
  auto run = [] {
    Rng rng(12);
    auto w = random_tensor(rng, {6, 6}).set_requires_grad();
    auto x = random_tensor(rng, {4, 6});
    auto norm_w = Tensor::full({6}, 1.0);
    auto h = silu(matmul(rmsnorm(x, norm_w), w));
    std::vector<int> tgt{0, 1, 2, 3};
    auto loss = cross_entropy(h, tgt);
    loss.backward();
    auto out = loss.to_vector();
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("no-grad mode records no history") {
  auto w = Tensor::vector({1, 2}).set_requires_grad();
  NoGradGuard guard;
  auto y = sum(square(w));
  CHECK_FALSE(y.requires_grad());
}
