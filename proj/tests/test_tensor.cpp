#include "limit/errors.hpp"
#include "limit/grad_check.hpp"
#include "limit/tensor.hpp"

#include "support/grad_suite.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace limit;

TEST_CASE("matmul values and shape errors") {
  const Tensor id = Tensor::from_rows({{1, 0}, {0, 1}});
  const Tensor m = Tensor::from_rows({{1, 2}, {3, 4}});
  CHECK(matmul(id, m).value() == m.value());
  CHECK(matmul(Tensor::row({1, 2}), Tensor::from_rows({{3}, {4}})).item() == 11.0);

  try {
    matmul(Tensor::zeros(2, 3), Tensor::zeros(2, 3));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("2x3") != std::string::npos);
  }
}

TEST_CASE("matmul gradients against central differences") {
  const Matrix a0 = oracle::random_matrix(5, 4, 1);
  const Matrix b0 = oracle::random_matrix(4, 3, 2);
  const Matrix r = oracle::random_matrix(5, 3, 3);
  Tensor a(a0, true), b(b0, true);
  backward(sum(mul(matmul(a, b), Tensor(r))));
  Tape::current().clear();

  const Matrix fd_a = oracle::finite_difference([&](const Matrix& x) { return (x * b0).cwiseProduct(r).sum(); }, a0);
  const Matrix fd_b = oracle::finite_difference([&](const Matrix& x) { return (a0 * x).cwiseProduct(r).sum(); }, b0);
  CHECK(oracle::max_rel_error(a.grad(), fd_a) < 1e-6);
  CHECK(oracle::max_rel_error(b.grad(), fd_b) < 1e-6);
}

TEST_CASE("matmul rows do not depend on the batch they are computed in") {
  const Matrix x = oracle::random_matrix(37, 64, 4);
  const Matrix w = oracle::random_matrix(64, 32, 5);
  const Matrix full = matmul(Tensor(x), Tensor(w)).value();
  for (Index i = 0; i < x.rows(); ++i) {
    const Matrix one = matmul(Tensor(Matrix(x.row(i))), Tensor(w)).value();
    CHECK(one == Matrix(full.row(i)));
  }
}

TEST_CASE("softmax") {
  CHECK(softmax(Tensor::row({0, 0})).value() == Matrix::Constant(1, 2, 0.5));
  const Matrix big = softmax(Tensor::row({1000, 1000, 1000})).value();
  for (Index j = 0; j < 3; ++j) CHECK(big(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  const Matrix p = softmax(Tensor::row({1, 2, 3})).value();
  const auto ref = oracle::softmax_ld({1, 2, 3});
  for (Index j = 0; j < 3; ++j) CHECK(std::abs(p(0, j) - static_cast<double>(ref[static_cast<std::size_t>(j)])) < 1e-15);

  const Matrix logits = oracle::random_matrix(20, 7, 6, 5.0);
  const Matrix rows = softmax(Tensor(logits)).value();
  const Matrix shifted = softmax(Tensor(Matrix(logits.array() + 123.0))).value();
  for (Index i = 0; i < rows.rows(); ++i) {
    CHECK(std::abs(rows.row(i).sum() - 1.0) < 1e-12);
    CHECK((rows.row(i) - shifted.row(i)).cwiseAbs().maxCoeff() < 1e-12);
  }
  const Matrix cols = softmax(Tensor(logits), Axis::rows).value();
  for (Index j = 0; j < cols.cols(); ++j) CHECK(std::abs(cols.col(j).sum() - 1.0) < 1e-12);

  CHECK_THROWS_AS(softmax(Tensor::row({1, NAN})), NumericError);
  CHECK_THROWS_AS(softmax(Tensor::row({1, INFINITY})), NumericError);
}

TEST_CASE("cross entropy") {
  const int zero[] = {0};
  CHECK(cross_entropy(Tensor::from_rows({{0, 0}}), zero).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const double tiny = cross_entropy(Tensor::from_rows({{10, -10}}), zero).item();
  CHECK(tiny == doctest::Approx(static_cast<double>(oracle::cross_entropy_ld({10, -10}, 0))).epsilon(1e-9));
  CHECK(tiny == doctest::Approx(2.06e-9).epsilon(0.01));

  double prev = INFINITY;
  for (double margin = 0.5; margin < 20; margin += 0.5) {
    const double loss = cross_entropy(Tensor::from_rows({{margin, 0, -0.3}}), zero).item();
    CHECK(loss < prev);
    prev = loss;
  }

  const int bad[] = {2};
  CHECK_THROWS_AS(cross_entropy(Tensor::from_rows({{0, 0}}), bad), IndexError);
  const int negative[] = {-1};
  CHECK_THROWS_AS(cross_entropy(Tensor::from_rows({{0, 0}}), negative), IndexError);
}

TEST_CASE("layer norm") {
  const Tensor gamma(Matrix::Ones(1, 3)), beta(Matrix::Zero(1, 3));
  CHECK(layer_norm(Tensor::row({5, 5, 5}), gamma, beta).value().cwiseAbs().maxCoeff() == 0.0);

  // Hand normalization: mean 2, variance 2/3.
  const Matrix y = layer_norm(Tensor::row({1, 2, 3}), gamma, beta).value();
  const double expect = std::sqrt(1.5);
  CHECK(y(0, 0) == doctest::Approx(-expect).epsilon(1e-5));
  CHECK(y(0, 1) == doctest::Approx(0.0));
  CHECK(y(0, 2) == doctest::Approx(expect).epsilon(1e-5));

  Tensor x(oracle::random_matrix(4, 6, 7), true);
  Tensor g(oracle::random_matrix(1, 6, 8), true), b(oracle::random_matrix(1, 6, 9), true);
  const double err = grad_check([&] { return grad_suite::weighted(layer_norm(x, g, b), 10); }, {x, g, b});
  CHECK(err < 1e-5);
}

TEST_CASE("every differentiable operation passes grad_check") {
  for (const auto& c : grad_suite::op_cases()) {
    CAPTURE(c.name);
    CHECK(c.error < 1e-4);
  }
}

TEST_CASE("grad_check on a quadratic and on an MLP with cross entropy") {
  Tensor w(Matrix(Tensor::row({1, 2}).value()), true);
  CHECK(grad_check([&] { return sum(mul(w, w)); }, {w}) < 1e-8);

  Tensor x(oracle::random_matrix(4, 5, 11));
  Tensor w1(oracle::random_matrix(5, 6, 12), true), b1(oracle::random_matrix(1, 6, 13), true);
  Tensor w2(oracle::random_matrix(6, 3, 14), true);
  const std::vector<int> y{0, 1, 2, 1};
  auto f = [&] { return cross_entropy(matmul(relu(add_row_bias(matmul(x, w1), b1)), w2), y); };
  CHECK(grad_check(f, {w1, b1, w2}) < 1e-4);
}

TEST_CASE("backward contract and accumulation") {
  Tensor w(Matrix::Constant(1, 2, 3.0), true);
  CHECK_THROWS_AS(backward(mul(w, w)), ContractError);
  Tape::current().clear();
  CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), ContractError);

  w.zero_grad();
  backward(sum(mul(w, w)));
  backward(sum(mul(w, w)));
  Tape::current().clear();
  CHECK(w.grad() == Matrix::Constant(1, 2, 12.0));  // 2 * (2w)
}

TEST_CASE("tape records in order and clearing releases intermediates") {
  Tape::current().clear();
  Tensor w(oracle::random_matrix(3, 3, 15), true);
  std::weak_ptr<detail::Node> intermediate;
  {
    const Tensor h = relu(matmul(w, w));
    intermediate = h.node();
    const Tensor loss = sum(h);
    const auto& nodes = Tape::current().nodes();
    REQUIRE(nodes.size() == 3);
    CHECK(nodes[1] == h.node());
    CHECK(nodes[2] == loss.node());
  }
  CHECK_FALSE(intermediate.expired());
  Tape::current().clear();
  CHECK(intermediate.expired());
  CHECK(w.value().size() == 9);

  {
    NoGradGuard guard;
    const Tensor h = matmul(w, w);
    CHECK(Tape::current().size() == 0);
    CHECK_FALSE(h.requires_grad());
  }
  CHECK(grad_enabled());
}

TEST_CASE("dropout") {
  const Tensor x(Matrix::Ones(50, 40));
  Rng rng(3);
  CHECK(dropout(x, 0.5, Mode::eval, rng).value() == x.value());
  CHECK(dropout(x, 0.0, Mode::train, rng).value() == x.value());
  const Matrix y = dropout(x, 0.25, Mode::train, rng).value();
  long kept = 0;
  for (Index i = 0; i < y.size(); ++i) {
    const double v = y.data()[i];
    CHECK((v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15));
    kept += v != 0.0;
  }
  CHECK(kept > 1300);
  CHECK(kept < 1700);

  Rng r1(8), r2(8);
  CHECK(dropout(x, 0.5, Mode::train, r1).value() == dropout(x, 0.5, Mode::train, r2).value());
  CHECK_THROWS_AS(dropout(x, 1.0, Mode::train, rng), ContractError);
}

TEST_CASE("only row-wise bias broadcasts") {
  CHECK_THROWS_AS(add(Tensor::zeros(2, 3), Tensor::zeros(1, 3)), DimensionError);
  CHECK_THROWS_AS(add_row_bias(Tensor::zeros(2, 3), Tensor::zeros(1, 2)), DimensionError);
  CHECK(add_row_bias(Tensor::zeros(2, 3), Tensor::row({1, 2, 3})).value().row(1) == Tensor::row({1, 2, 3}).value());
}
