// SPDX-License-Identifier: Apache-2.0
//
// Gradient checks for every tape primitive against central finite
// differences, run in double so FD noise stays far below tolerance.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "ssmlens/tape.hpp"

using namespace ssmlens;
using TensorD = TensorT<double>;

namespace {

// Builds loss = sum(weights * f(inputs...)) so every output coordinate
// participates with a distinct coefficient.
template <typename BuildFn>
double weighted_loss(const TensorD& weights, BuildFn&& build) {
  Tape<double> tp(false);
  Var out = build(tp);
  Var w = tp.constant(weights);
  return tp.value(tp.sum(tp.mul(out, w)))[0];
}

template <typename BuildFn>
void check_param(TensorD* param, const TensorD& weights, BuildFn&& build,
                 double tol = 1e-6) {
  // analytic gradient
  Tape<double> tp(true);
  Var out = build(tp);
  Var w = tp.constant(weights);
  Var loss = tp.sum(tp.mul(out, w));
  tp.backward(loss);
  const TensorD* g = tp.grad_of(param);
  REQUIRE(g != nullptr);

  auto loss_fn = [&]() { return weighted_loss(weights, build); };
  auto res = oracles::gradcheck(param, *g, loss_fn, 1e-5, tol);
  CHECK(res.ok == res.checked);
}

TensorD random_tensor(std::vector<int> shape, std::mt19937_64& gen, double lo = -1.0,
                      double hi = 1.0) {
  TensorD t(std::move(shape));
  oracles::fill_uniform(t, gen, lo, hi);
  return t;
}

}  // namespace

TEST_CASE("sum gradient is all ones") {
  TensorD x({5}, {1.0, 2.0, 3.0, 4.0, 5.0});
  Tape<double> tp(true);
  Var vx = tp.param(&x);
  Var loss = tp.sum(vx);
  tp.backward(loss);
  const TensorD* g = tp.grad_of(&x);
  REQUIRE(g != nullptr);
  for (size_t i = 0; i < x.numel(); ++i) CHECK((*g)[i] == 1.0);
}

TEST_CASE("product of scalars has swapped gradients") {
  TensorD x({1}, {3.0}), y({1}, {-2.0});
  Tape<double> tp(true);
  Var loss = tp.mul(tp.param(&x), tp.param(&y));
  tp.backward(loss);
  CHECK((*tp.grad_of(&x))[0] == -2.0);
  CHECK((*tp.grad_of(&y))[0] == 3.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  TensorD x({3}, {1.0, 2.0, 3.0});
  Tape<double> tp(true);
  Var vx = tp.param(&x);
  CHECK_THROWS_AS(tp.backward(vx), ContractError);
}

TEST_CASE("leaves off the loss path keep exactly-zero gradients") {
  TensorD x({2}, {1.0, 2.0}), unused({2}, {5.0, 6.0});
  Tape<double> tp(true);
  Var vx = tp.param(&x);
  tp.param(&unused);
  Var loss = tp.sum(vx);
  tp.backward(loss);
  const TensorD& gu = tp.grad(tp.param(&unused));
  for (size_t i = 0; i < gu.numel(); ++i) CHECK(gu[i] == 0.0);
}

TEST_CASE("matmul gradients") {
  std::mt19937_64 gen(41);
  TensorD a = random_tensor({3, 4}, gen);
  TensorD b = random_tensor({4, 2}, gen);
  TensorD w = random_tensor({3, 2}, gen);
  auto build = [&](Tape<double>& tp) { return tp.matmul(tp.param(&a), tp.param(&b)); };
  check_param(&a, w, build);
  check_param(&b, w, build);
}

TEST_CASE("matmul_nt gradients") {
  std::mt19937_64 gen(43);
  TensorD a = random_tensor({3, 4}, gen);
  TensorD b = random_tensor({5, 4}, gen);
  TensorD w = random_tensor({3, 5}, gen);
  auto build = [&](Tape<double>& tp) { return tp.matmul_nt(tp.param(&a), tp.param(&b)); };
  check_param(&a, w, build);
  check_param(&b, w, build);
}

TEST_CASE("causal conv gradients") {
  std::mt19937_64 gen(47);
  TensorD x = random_tensor({6, 3}, gen);
  TensorD cw = random_tensor({3, 4}, gen);
  TensorD cb = random_tensor({3}, gen);
  TensorD w = random_tensor({6, 3}, gen);
  auto build = [&](Tape<double>& tp) {
    return tp.causal_conv1d(tp.param(&x), tp.param(&cw), tp.param(&cb));
  };
  check_param(&x, w, build);
  check_param(&cw, w, build);
  check_param(&cb, w, build);
}

TEST_CASE("elementwise gradients (silu, softplus, exp)") {
  std::mt19937_64 gen(53);
  TensorD x = random_tensor({4, 3}, gen, -2.0, 2.0);
  TensorD w = random_tensor({4, 3}, gen);
  check_param(&x, w, [&](Tape<double>& tp) { return tp.silu(tp.param(&x)); });
  check_param(&x, w, [&](Tape<double>& tp) { return tp.softplus(tp.param(&x)); });
  check_param(&x, w, [&](Tape<double>& tp) { return tp.exp(tp.param(&x)); });
}

TEST_CASE("rmsnorm_rows gradients") {
  std::mt19937_64 gen(59);
  TensorD x = random_tensor({4, 6}, gen);
  TensorD gain = random_tensor({6}, gen, 0.5, 1.5);
  TensorD w = random_tensor({4, 6}, gen);
  auto build = [&](Tape<double>& tp) {
    return tp.rmsnorm_rows(tp.param(&x), tp.param(&gain));
  };
  check_param(&x, w, build);
  check_param(&gain, w, build);
}

TEST_CASE("add_rowwise and row patch gradients") {
  std::mt19937_64 gen(61);
  TensorD x = random_tensor({5, 3}, gen);
  TensorD bias = random_tensor({3}, gen);
  TensorD v = random_tensor({3}, gen);
  TensorD w = random_tensor({5, 3}, gen);

  auto rowwise = [&](Tape<double>& tp) {
    return tp.add_rowwise(tp.param(&x), tp.param(&bias));
  };
  check_param(&x, w, rowwise);
  check_param(&bias, w, rowwise);

  auto overwrite = [&](Tape<double>& tp) {
    return tp.overwrite_row(tp.param(&x), 2, tp.param(&v));
  };
  check_param(&x, w, overwrite);
  check_param(&v, w, overwrite);

  auto addrow = [&](Tape<double>& tp) {
    return tp.add_to_row(tp.param(&x), 1, tp.param(&v));
  };
  check_param(&x, w, addrow);
  check_param(&v, w, addrow);
}

TEST_CASE("row gather gradients scatter into the table") {
  std::mt19937_64 gen(67);
  TensorD table = random_tensor({6, 3}, gen);
  TensorD w = random_tensor({4, 3}, gen);
  const std::vector<int> ids{1, 3, 1, 5};
  auto build = [&](Tape<double>& tp) { return tp.rows(tp.param(&table), ids); };
  check_param(&table, w, build);
}

TEST_CASE("ssm_scan gradients for every input") {
  std::mt19937_64 gen(71);
  const int seq = 5, e_dim = 3, n_dim = 2;
  TensorD c = random_tensor({seq, e_dim}, gen);
  TensorD delta = random_tensor({seq, e_dim}, gen, 0.01, 0.9);
  TensorD b = random_tensor({seq, n_dim}, gen);
  TensorD cm = random_tensor({seq, n_dim}, gen);
  TensorD a = random_tensor({e_dim, n_dim}, gen, -2.0, -0.1);
  TensorD d = random_tensor({e_dim}, gen);
  TensorD w = random_tensor({seq, e_dim}, gen);
  auto build = [&](Tape<double>& tp) {
    return tp.ssm_scan(tp.param(&c), tp.param(&delta), tp.param(&b), tp.param(&cm),
                       tp.param(&a), tp.param(&d));
  };
  check_param(&c, w, build);
  check_param(&delta, w, build);
  check_param(&b, w, build);
  check_param(&cm, w, build);
  check_param(&a, w, build);
  check_param(&d, w, build);
}

TEST_CASE("cross entropy gradient") {
  std::mt19937_64 gen(73);
  TensorD logits = random_tensor({4, 6}, gen);
  const std::vector<int> ids{2, 0, 5, 1};

  Tape<double> tp(true);
  Var v = tp.param(&logits);
  Var loss = tp.cross_entropy_next(v, ids);
  tp.backward(loss);
  const TensorD* g = tp.grad_of(&logits);
  REQUIRE(g != nullptr);

  auto loss_fn = [&]() {
    Tape<double> t2(false);
    return t2.value(t2.cross_entropy_next(t2.param(&logits), ids))[0];
  };
  auto res = oracles::gradcheck(&logits, *g, loss_fn, 1e-5, 1e-6);
  CHECK(res.ok == res.checked);
}

TEST_CASE("log softmax row and pick gradients") {
  std::mt19937_64 gen(79);
  TensorD logits = random_tensor({3, 5}, gen);
  TensorD w = random_tensor({5}, gen);
  auto build = [&](Tape<double>& tp) { return tp.log_softmax_row(tp.param(&logits), 1); };
  check_param(&logits, w, build);

  Tape<double> tp(true);
  Var picked = tp.pick(tp.log_softmax_row(tp.param(&logits), 2), 4);
  tp.backward(picked);
  const TensorD* g = tp.grad_of(&logits);
  auto loss_fn = [&]() {
    Tape<double> t2(false);
    return t2.value(t2.pick(t2.log_softmax_row(t2.param(&logits), 2), 4))[0];
  };
  auto res = oracles::gradcheck(&logits, *g, loss_fn, 1e-5, 1e-6);
  CHECK(res.ok == res.checked);
}
