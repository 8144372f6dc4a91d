#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <string>

#include "oracles.hpp"
#include "uch/errors.hpp"
#include "uch/ndcore.hpp"
#include "uch/random.hpp"

using namespace uch;

namespace {

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("matrix construction and shape checks") {
  Matrix m(2, 3, 1.5);
  CHECK(m.rows() == 2);
  CHECK(m.cols() == 3);
  CHECK(m.size() == 6);
  CHECK(m(1, 2) == 1.5);
  CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Matrix::from_rows({{1, 2}, {3}}), ShapeError);

  const Matrix g = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
  const std::vector<std::size_t> pick = {2, 0};
  CHECK(g.gather_rows(pick) == Matrix::from_rows({{5, 6}, {1, 2}}));
  const std::vector<std::size_t> bad = {3};
  CHECK_THROWS_AS(g.gather_rows(bad), ContractError);
}

TEST_CASE("matmul by the identity") {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  CHECK(matmul(a, Matrix::identity(2)) == a);
  CHECK(matmul(Matrix::identity(2), Matrix::from_rows({{5}, {7}})) == Matrix::from_rows({{5}, {7}}));
}

TEST_CASE("matmul matches a triple loop") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.index(6), k = 1 + rng.index(6), m = 1 + rng.index(6);
    const Matrix a = oracle::random_matrix(rng, n, k);
    const Matrix b = oracle::random_matrix(rng, k, m);
    const auto expected = oracle::matmul(oracle::to_rows(a), oracle::to_rows(b));
    const Matrix c = matmul(a, b);
    REQUIRE(c.rows() == n);
    REQUIRE(c.cols() == m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) CHECK(c(i, j) == doctest::Approx(expected[i][j]).epsilon(1e-14));
  }
  const Matrix a = oracle::random_matrix(rng, 3, 4);
  const Matrix b = oracle::random_matrix(rng, 4, 2);
  const Matrix at = oracle::random_matrix(rng, 4, 3);
  const Matrix bt = oracle::random_matrix(rng, 2, 4);
  const auto ta = matmul_transpose_a(at, b);
  const auto tb = matmul_transpose_b(a, bt);
  const auto ea = oracle::matmul(oracle::transpose(oracle::to_rows(at)), oracle::to_rows(b));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(ta(i, j) == doctest::Approx(ea[i][j]).epsilon(1e-14));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < 4; ++t) s += a(i, t) * bt(j, t);
      CHECK(tb(i, j) == doctest::Approx(s).epsilon(1e-14));
    }
}

TEST_CASE("matmul shape error names both shapes") {
  const std::string msg = message_of([] { matmul(Matrix(2, 3), Matrix(4, 5)); });
  CHECK(msg.find("[2x3]") != std::string::npos);
  CHECK(msg.find("[4x5]") != std::string::npos);
  Tape tape;
  CHECK_THROWS_AS(matmul(tape.constant(Matrix(2, 3)), tape.constant(Matrix(2, 3))), ShapeError);
}

TEST_CASE("matmul is associative on random matrices") {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t p = 1 + rng.index(5), q = 1 + rng.index(5), r = 1 + rng.index(5), s = 1 + rng.index(5);
    const Matrix a = oracle::random_matrix(rng, p, q);
    const Matrix b = oracle::random_matrix(rng, q, r);
    const Matrix c = oracle::random_matrix(rng, r, s);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) CHECK(std::abs(left.values()[i] - right.values()[i]) <= 1e-9);
  }
}

TEST_CASE("elementwise known values") {
  Tape tape;
  const Var zero = tape.constant(Matrix(1, 1));
  CHECK(tanh(zero).scalar() == 0.0);
  CHECK(sigmoid(zero).scalar() == 0.5);
  CHECK(square(tape.constant(Matrix::from_rows({{2, -3}}))).value() == Matrix::from_rows({{4, 9}}));
  CHECK(relu(tape.constant(Matrix::from_rows({{-1, 0, 2}}))).value() == Matrix::from_rows({{0, 0, 2}}));
  const Var a = tape.constant(Matrix::from_rows({{1, 2}}));
  const Var b = tape.constant(Matrix::from_rows({{3, 5}}));
  CHECK((a + b).value() == Matrix::from_rows({{4, 7}}));
  CHECK((a - b).value() == Matrix::from_rows({{-2, -3}}));
  CHECK(mul(a, b).value() == Matrix::from_rows({{3, 10}}));
  CHECK(scale(a, -2).value() == Matrix::from_rows({{-2, -4}}));
  CHECK((3.0 * a).value() == Matrix::from_rows({{3, 6}}));
  CHECK(add_scalar(a, 0.5).value() == Matrix::from_rows({{1.5, 2.5}}));
  CHECK(clamp(tape.constant(Matrix::from_rows({{-2, 0.3, 2}})), -1, 1).value() == Matrix::from_rows({{-1, 0.3, 1}}));
  CHECK(log(tape.constant(Matrix::from_rows({{1}}))).scalar() == 0.0);
  CHECK(add_row(tape.constant(Matrix::from_rows({{1, 2}, {3, 4}})), tape.constant(Matrix::from_rows({{10, 20}}))).value() ==
        Matrix::from_rows({{11, 22}, {13, 24}}));
  CHECK_THROWS_AS(add(a, tape.constant(Matrix(2, 2))), ShapeError);
  CHECK_THROWS_AS(add_row(a, tape.constant(Matrix(1, 3))), ShapeError);
  CHECK_THROWS_AS(clamp(a, 1, -1), ContractError);
}

TEST_CASE("log of a non-positive entry names its position") {
  Tape tape;
  const Var x = tape.constant(Matrix::from_rows({{1, 2}, {3, 0}}));
  CHECK_THROWS_AS(log(x), DomainError);
  const std::string msg = message_of([&] { log(x); });
  CHECK(msg.find("row 1") != std::string::npos);
  CHECK(msg.find("col 1") != std::string::npos);
  CHECK_THROWS_AS(log(tape.constant(Matrix::from_rows({{-1}}))), DomainError);
}

TEST_CASE("NaN propagates through relu and log") {
  // Divergence detection relies on non-finite values surviving to the objective.
  Tape tape;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const Var x = tape.constant(Matrix::from_rows({{nan, 1}}));
  CHECK(std::isnan(relu(x).value()(0, 0)));
  CHECK(std::isnan(log(x).value()(0, 0)));
  CHECK(std::isnan(reduce_sum(relu(x)).scalar()));
}

TEST_CASE("reductions") {
  Tape tape;
  CHECK(reduce_sum(tape.constant(Matrix(3, 2))).scalar() == 0.0);
  CHECK(reduce_mean(tape.constant(Matrix::from_rows({{1, 2}, {3, 4}}))).scalar() == 2.5);

  const Var x = tape.variable(Matrix::from_rows({{1, -2, 3}, {0, 5, 6}}));
  CHECK(tape.backward(reduce_sum(x)).of(x) == Matrix(2, 3, 1.0));
  CHECK(tape.backward(reduce_mean(x)).of(x) == Matrix(2, 3, 1.0 / 6.0));
}

TEST_CASE("backward of sum of squares") {
  Tape tape;
  const Var w = tape.variable(Matrix::from_rows({{1, -2}}));
  CHECK(tape.backward(reduce_sum(square(w))).of(w) == Matrix::from_rows({{2, -4}}));
}

TEST_CASE("gradient of log(sigmoid(x)) at zero") {
  Tape tape;
  Matrix x0(1, 1, 0.0);
  const Var x = tape.variable(x0);
  const double analytic = tape.backward(log(sigmoid(x))).of(x)(0, 0);
  const double numeric = oracle::central_difference(x0, 0, [&] { return std::log(1.0 / (1.0 + std::exp(-x0(0, 0)))); });
  CHECK(analytic == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(numeric == doctest::Approx(analytic).epsilon(1e-8));
}

TEST_CASE("backward contracts") {
  Tape tape;
  const Var x = tape.variable(Matrix(2, 2, 1.0));
  CHECK_THROWS_AS(tape.backward(square(x)), ContractError);

  const Var unreached = tape.variable(Matrix::from_rows({{4, 5}}));
  const Gradients g = tape.backward(reduce_sum(x));
  CHECK(g.of(unreached) == Matrix(1, 2, 0.0));

  Tape other;
  const Var foreign = other.variable(Matrix(1, 1, 1.0));
  CHECK_THROWS_AS(g.of(foreign), ContractError);
  CHECK_THROWS_AS(add(x, other.constant(Matrix(2, 2))), ContractError);
  CHECK_THROWS_AS(Var().value(), ContractError);
}

TEST_CASE("constants receive no gradient and do not propagate") {
  Tape tape;
  const Var c = tape.constant(Matrix::from_rows({{2, 3}}));
  const Var w = tape.variable(Matrix::from_rows({{1, 1}}));
  CHECK_FALSE(tape.requires_grad(c));
  CHECK_FALSE(tape.requires_grad(square(c)));
  CHECK(tape.requires_grad(mul(c, w)));
  const Gradients g = tape.backward(reduce_sum(mul(c, w)));
  CHECK(g.of(w) == Matrix::from_rows({{2, 3}}));
  CHECK(g.of(c) == Matrix(1, 2, 0.0));
}

TEST_CASE("backward is deterministic") {
  Rng rng(5);
  Tape tape;
  const Var x = tape.constant(oracle::random_matrix(rng, 4, 3));
  const Var w = tape.variable(oracle::random_matrix(rng, 3, 5));
  const Var b = tape.variable(oracle::random_matrix(rng, 1, 5));
  const Var loss = reduce_mean(square(tanh(add_row(matmul(x, w), b))));
  const Gradients g1 = tape.backward(loss);
  const Gradients g2 = tape.backward(loss);
  CHECK(g1.of(w) == g2.of(w));
  CHECK(g1.of(b) == g2.of(b));
}

TEST_CASE("injected adjoint fault changes gradients") {
  Tape tape;
  const Var w = tape.variable(Matrix::from_rows({{0.3, -0.2}}));
  const Var loss = reduce_sum(tanh(w));
  const Matrix clean = tape.backward(loss).of(w);
  tape.inject_fault(OpKind::tanh, 2.0);
  const Matrix faulty = tape.backward(loss).of(w);
  CHECK(faulty(0, 0) == doctest::Approx(2.0 * clean(0, 0)));
}

// Random compositions of every primitive, differentiated against central differences.
TEST_CASE("property: analytic gradients match finite differences on random expressions") {
  Rng rng(2024);
  int checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng.index(4), k = 1 + rng.index(4), m = 1 + rng.index(4);
    Matrix x0 = oracle::random_matrix(rng, n, k);
    Matrix w0 = oracle::random_matrix(rng, k, m, -0.5, 0.5);
    Matrix b0 = oracle::random_matrix(rng, 1, m, -0.5, 0.5);
    Matrix y0 = oracle::random_matrix(rng, n, m);
    std::vector<int> ops;
    const std::size_t depth = 1 + rng.index(5);
    for (std::size_t d = 0; d < depth; ++d) ops.push_back(static_cast<int>(rng.index(9)));

    struct Graph {
      Var x, w, loss;
    };
    auto build = [&](Tape& tape, bool track) {
      auto leaf = [&](const Matrix& v) { return track ? tape.variable(v) : tape.constant(v); };
      Graph graph{leaf(x0), leaf(w0), {}};
      const Var b = leaf(b0), y = leaf(y0);
      Var h = add_row(matmul(graph.x, graph.w), b);
      for (int op : ops) {
        switch (op) {
          case 0: h = tanh(h); break;
          case 1: h = relu(h); break;
          case 2: h = sigmoid(h); break;
          case 3: h = scale(square(h), 0.5); break;
          case 4: h = log(add_scalar(square(h), 0.5)); break;
          case 5: h = mul(h, y); break;
          case 6: h = h - y; break;
          case 7: h = clamp(h, -0.6, 0.6); break;
          case 8: h = h + scale(y, 0.3); break;
        }
      }
      graph.loss = reduce_sum(h) + reduce_mean(square(h));
      return graph;
    };

    Tape tape;
    const Graph graph = build(tape, true);
    const Gradients g = tape.backward(graph.loss);
    for (Matrix* target : {&x0, &w0}) {
      const Matrix grad = g.of(target == &x0 ? graph.x : graph.w);
      for (std::size_t i = 0; i < target->size(); ++i) {
        std::vector<bool> branches_plus, branches_minus;
        auto eval = [&](std::vector<bool>& branches) {
          Tape t;
          const double v = build(t, false).loss.scalar();
          branches = t.branch_pattern();
          return v;
        };
        const double original = target->values()[i];
        target->values()[i] = original + 1e-5;
        const double plus = eval(branches_plus);
        target->values()[i] = original - 1e-5;
        const double minus = eval(branches_minus);
        target->values()[i] = original;
        if (branches_plus != branches_minus) continue;
        const double numeric = (plus - minus) / 2e-5;
        const double a = grad.values()[i];
        CHECK(std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-5}) < 1e-4);
        ++checked;
      }
    }
  }
  CHECK(checked > 200);
}
