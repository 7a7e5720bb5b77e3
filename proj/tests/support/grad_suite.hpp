#pragma once

// Finite-difference checks shared by the unit tests and the acceptance run.

#include "limit/calibration.hpp"
#include "limit/grad_check.hpp"
#include "limit/training.hpp"

#include "oracles.hpp"

#include <string>
#include <vector>

namespace grad_suite {

using namespace limit;

struct Case {
  std::string name;
  double error;
};

/// Reduces a matrix-valued output to a scalar with fixed random weights so
/// that every output entry carries a distinct gradient.
inline Tensor weighted(const Tensor& y, std::uint64_t seed) {
  return sum(mul(y, Tensor(oracle::random_matrix(y.rows(), y.cols(), seed))));
}

inline std::vector<Case> op_cases() {
  const double eps = 1e-5;
  std::vector<Case> out;
  auto param = [](Index r, Index c, std::uint64_t seed) { return Tensor(oracle::random_matrix(r, c, seed), true); };
  auto run = [&](const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> params) {
    out.push_back({name, grad_check(f, std::move(params), eps)});
  };

  Tensor a = param(5, 4, 1), b = param(4, 3, 2), c = param(5, 4, 3);
  Tensor bias = param(1, 4, 4), s = param(5, 1, 5);
  Tensor gamma = param(1, 4, 6), beta = param(1, 4, 7);
  const std::vector<int> labels{0, 2, 1, 3, 2};

  run("matmul", [&] { return weighted(matmul(a, b), 10); }, {a, b});
  run("transpose", [&] { return weighted(transpose(a), 11); }, {a});
  run("add", [&] { return weighted(add(a, c), 12); }, {a, c});
  run("sub", [&] { return weighted(sub(a, c), 13); }, {a, c});
  run("mul", [&] { return weighted(mul(a, c), 14); }, {a, c});
  run("scale", [&] { return weighted(scale(a, -1.7), 15); }, {a});
  run("add_row_bias", [&] { return weighted(add_row_bias(a, bias), 16); }, {a, bias});
  run("scale_rows", [&] { return weighted(scale_rows(a, s), 17); }, {a, s});
  run("relu", [&] { return weighted(relu(a), 18); }, {a});
  run("softmax_cols", [&] { return weighted(softmax(a, Axis::cols), 19); }, {a});
  run("softmax_rows", [&] { return weighted(softmax(a, Axis::rows), 20); }, {a});
  run("log_softmax", [&] { return weighted(log_softmax(a), 21); }, {a});
  run("cross_entropy", [&] { return cross_entropy(a, labels); }, {a});
  {
    Matrix target = oracle::random_matrix(5, 4, 22).array().exp();
    for (Index i = 0; i < 5; ++i) target.row(i) /= target.row(i).sum();
    run("soft_cross_entropy", [&, target] { return soft_cross_entropy(a, target); }, {a});
  }
  run("layer_norm", [&] { return weighted(layer_norm(a, gamma, beta), 23); }, {a, gamma, beta});
  run("dropout", [&] {
        Rng rng(99);
        return weighted(dropout(a, 0.5, Mode::train, rng), 24);
      }, {a});
  run("concat_rows", [&] {
        const Tensor parts[] = {a, c};
        return weighted(concat_rows(parts), 25);
      }, {a, c});
  run("concat_cols", [&] {
        const Tensor parts[] = {a, c};
        return weighted(concat_cols(parts), 26);
      }, {a, c});
  run("slice_rows", [&] { return weighted(slice_rows(a, 1, 3), 27); }, {a});
  run("slice_cols", [&] { return weighted(slice_cols(a, 2, 2), 28); }, {a});
  {
    const std::vector<Index> rows{4, 0, 0, 2};
    run("gather_rows", [&] { return weighted(gather_rows(a, rows), 29); }, {a});
    const std::vector<Index> cols{3, 3, 1};
    run("gather_cols", [&] { return weighted(gather_cols(a, cols), 30); }, {a});
  }
  run("reshape", [&] { return weighted(reshape(a, 2, 10), 31); }, {a});
  run("row_dot", [&] { return weighted(row_dot(a, c), 32); }, {a, c});
  run("sum", [&] { return sum(mul(a, a)); }, {a});
  run("mean", [&] { return mean(mul(a, c)); }, {a, c});
  return out;
}

/// A three-class base set in R^6 with well spread instances.
inline Dataset toy_base(int classes = 3, int per_class = 6, int dim = 6) {
  Dataset ds;
  ds.num_classes = classes;
  ds.features = oracle::random_matrix(classes * per_class, dim, 40);
  for (int y = 0; y < classes; ++y) {
    for (int k = 0; k < per_class; ++k) ds.labels.push_back(y);
    ds.features.middleRows(y * per_class, per_class).rowwise() += oracle::random_matrix(1, dim, 41 + y).row(0);
  }
  return ds;
}

/// The meta-training objective on a 3-class, d = 8 toy: prototypes from the
/// support, classifier replacement, calibration, and cross-entropy over the
/// queries, summed over `phases` fake phases of one class each.
inline double meta_loss_error(int phases) {
  const Dataset base = toy_base();
  Rng rng(5);
  ModelConfig mc;
  mc.hidden = {7};
  mc.embed_dim = 8;
  mc.calib_hidden = 5;
  mc.dropout = 0.5;
  ModelState state = init_model(mc, 6, {0, 1, 2}, rng);

  FakeTaskSpec spec;
  spec.phases = phases;
  spec.way = 1;
  spec.shot = 2;
  spec.query_shot = 3;
  Rng sample_rng(6);
  const FakeTaskSequence seq = sample_fake_tasks(base, spec, sample_rng);

  std::vector<Tensor> params = state.net.parameters();
  params.push_back(state.classifier.weights);
  for (const Tensor& t : state.calibration.parameters()) params.push_back(t);
  auto f = [&] {
    Rng unused(0);
    return meta_loss(state, base, seq, true, Mode::eval, unused).total;
  };
  return grad_check(f, params, 1e-5);
}

}  // namespace grad_suite
