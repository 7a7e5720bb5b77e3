#include "limit/checkpoint.hpp"
#include "limit/errors.hpp"
#include "limit/evaluation.hpp"

#include "support/oracles.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>

using namespace limit;

namespace {

struct Fixture {
  SessionStream stream;
  ModelState state;
};

Fixture make_fixture(int sessions = 2) {
  const Dataset all = generate_gaussian_mixture(20, 6, 30, 1.0, 1);
  SplitSpec split;
  split.base_class_count = 10;
  split.session_count = sessions;
  split.seed = 2;
  Fixture f{split_sessions(all, split), {}};
  ModelConfig mc;
  mc.hidden = {12};
  mc.embed_dim = 8;
  mc.calib_hidden = 8;
  Rng rng(3);
  f.state = init_model(mc, 6, f.stream.session_classes[0], rng);
  TrainConfig cfg;
  cfg.seed = 4;
  cfg.pretrain.epochs = 5;
  cfg.pretrain.lr = 0.02;
  cfg.pretrain.batch_size = 32;
  f.state = pretrain(f.state, f.stream.base, cfg);
  return f;
}

}  // namespace

TEST_CASE("metric formulas") {
  const std::vector<double> cub{75.89, 70.0, 60.0, 57.41};
  CHECK(performance_drop(cub) == doctest::Approx(18.48).epsilon(1e-12));
  const std::vector<double> ft{64.10, 30.0, 2.65};
  CHECK(performance_drop(ft) == doctest::Approx(61.45).epsilon(1e-12));
  const std::vector<double> flat{50.0, 50.0, 50.0};
  CHECK(performance_drop(flat) == 0.0);

  CHECK(std::abs(harmonic_mean(73.6, 41.8) - 53.3) <= 0.05);
  CHECK(harmonic_mean(40.0, 40.0) == 40.0);
  CHECK(harmonic_mean(40.0, 0.0) == 0.0);
  CHECK(harmonic_mean(0.0, 0.0) == 0.0);

  // 1000 base instances with 736 hits, 1000 incremental with 418.
  ConfusionMatrix m = ConfusionMatrix::Zero(4, 4);
  m(0, 0) = 400;
  m(0, 2) = 100;
  m(1, 1) = 336;
  m(1, 3) = 164;
  m(2, 2) = 218;
  m(2, 0) = 282;
  m(3, 3) = 200;
  m(3, 1) = 300;
  const SplitAccuracy s = split_accuracy(m, 2);
  CHECK(s.base_acc == doctest::Approx(73.6));
  CHECK(s.inc_acc == doctest::Approx(41.8));
  CHECK(std::abs(s.harmonic - 53.3) <= 0.05);
}

TEST_CASE("top-1 accuracy") {
  const Matrix eye = Matrix::Identity(4, 4);
  const std::vector<int> perfect{0, 1, 2, 3};
  CHECK(top1_accuracy(eye, perfect) == 100.0);

  const Matrix zeros = Matrix::Zero(8, 4);
  const std::vector<int> labels{0, 0, 0, 1, 2, 3, 3, 1};
  CHECK(top1_accuracy(zeros, labels) == 37.5);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Matrix z = oracle::random_matrix(50, 6, seed);
    z.col(3) = z.col(1);  // force ties
    std::mt19937_64 rng(seed);
    std::vector<int> y(50);
    for (int& v : y) v = static_cast<int>(rng() % 6);
    CHECK(top1_accuracy(z, y) == oracle::accuracy(z, y));
  }
}

TEST_CASE("confusion matrix") {
  const std::vector<int> y{0, 1, 1, 2, 2, 2};
  const ConfusionMatrix perfect = confusion_matrix(y, y, 3);
  CHECK(perfect(0, 0) == 1);
  CHECK(perfect(1, 1) == 2);
  CHECK(perfect(2, 2) == 3);
  CHECK(perfect.sum() == 6);
  CHECK(perfect.sum() == perfect.diagonal().sum());

  std::mt19937_64 rng(5);
  std::vector<int> preds(200), labels(200);
  for (std::size_t i = 0; i < 200; ++i) {
    preds[i] = static_cast<int>(rng() % 7);
    labels[i] = static_cast<int>(rng() % 7);
  }
  const ConfusionMatrix m = confusion_matrix(preds, labels, 7);
  const auto pairs = oracle::pair_counts(preds, labels);
  long total = 0;
  for (Index i = 0; i < 7; ++i) {
    for (Index j = 0; j < 7; ++j) {
      const auto it = pairs.find({static_cast<int>(i), static_cast<int>(j)});
      CHECK(m(i, j) == (it == pairs.end() ? 0 : it->second));
      total += m(i, j);
    }
  }
  CHECK(total == 200);
  const std::vector<int> bad{7};
  const std::vector<int> one{0};
  CHECK_THROWS_AS(confusion_matrix(bad, one, 7), IndexError);
}

TEST_CASE("incremental run with no sessions") {
  Fixture f = make_fixture(0);
  EvalOptions o;
  o.use_calibration = false;
  const EvalReport r = run_incremental(f.state, f.stream, o);
  CHECK(r.session_acc.size() == 1);
  CHECK(r.pd == 0.0);
}

TEST_CASE("constant predictions score the share of the first column") {
  Fixture f = make_fixture();
  for (auto& layer : f.state.net.layers()) {
    layer.weight.mutable_value().setZero();
    layer.bias.mutable_value().setZero();
  }
  EvalOptions o;
  o.use_calibration = false;
  const EvalReport r = run_incremental(f.state, f.stream, o);
  const int first = f.state.classifier.class_ids.front();
  for (std::size_t b = 0; b < r.session_acc.size(); ++b) {
    const auto& labels = f.stream.test_sets[b].labels;
    const double share = 100.0 * static_cast<double>(std::count(labels.begin(), labels.end(), first)) /
                         static_cast<double>(labels.size());
    CHECK(r.session_acc[b] == share);
  }
}

TEST_CASE("report invariants, state immutability, and checkpoint re-evaluation") {
  Fixture f = make_fixture();
  const ModelState before = f.state.clone();
  EvalOptions o;
  const EvalReport r = run_incremental(f.state, f.stream, o);
  CHECK(same_state(before, f.state));
  CHECK(r.method == "limit");

  REQUIRE(r.session_acc.size() == 3);
  CHECK(r.pd == r.session_acc.front() - r.session_acc.back());
  CHECK(r.per_session_class_counts == std::vector<int>{10, 15, 20});
  CHECK(r.per_session_test_counts == std::vector<long>{150, 225, 300});
  for (Index i = 0; i < r.confusion.rows(); ++i) CHECK(r.confusion.row(i).sum() == 15);
  if (r.base_acc + r.inc_acc > 0) {
    CHECK(r.harmonic == 2.0 * r.base_acc * r.inc_acc / (r.base_acc + r.inc_acc));
  }

  const EvalReport back = EvalReport::from_json(nlohmann::json::parse(r.to_json().dump()));
  CHECK(back == r);

  const auto path = std::filesystem::temp_directory_path() / "limit_test_eval_ckpt.json";
  save_checkpoint(path, f.state, 4);
  const ModelState loaded = load_checkpoint(path);
  CHECK(same_state(loaded, f.state));
  CHECK(run_incremental(loaded, f.stream, o) == r);
}

TEST_CASE("scoring does not depend on the thread count") {
  Fixture f = make_fixture();
  const Matrix x = f.stream.test_sets.back().features;
  const Matrix one = score(f.state, f.state.classifier, x, true, 1);
  CHECK(score(f.state, f.state.classifier, x, true, 4) == one);
  CHECK(score(f.state, f.state.classifier, x, false, 3) == score(f.state, f.state.classifier, x, false, 1));

  setenv("LIMIT_NUM_THREADS", "2", 1);
  CHECK(resolve_threads(8) == 2);
  unsetenv("LIMIT_NUM_THREADS");
  CHECK(resolve_threads(8) == 8);
  CHECK(resolve_threads(0) >= 1);

  CHECK_THROWS_AS(score(f.state, f.state.classifier, Matrix::Zero(2, 5), false, 1), DimensionError);
}

TEST_CASE("learner variants run and mismatches are rejected") {
  Fixture f = make_fixture();
  EvalOptions o;
  o.learner = Learner::finetune;
  o.train.finetune.lr = 0.01;
  o.train.finetune.epochs = 2;
  CHECK(run_incremental(f.state, f.stream, o).method == "finetune");
  o.learner = Learner::kd;
  CHECK(run_incremental(f.state, f.stream, o).method == "kd");
  o.learner = Learner::prototype;
  o.use_calibration = false;
  CHECK(run_incremental(f.state, f.stream, o).method == "proto");

  Fixture other = make_fixture();
  other.state.classifier.class_ids.back() = 999;
  CHECK_THROWS_AS(run_incremental(other.state, f.stream, o), DimensionError);
}

TEST_CASE("top-k probabilities") {
  const Matrix z = oracle::random_matrix(3, 6, 9);
  const std::vector<int> ids{10, 11, 12, 13, 14, 15};
  const auto top = top_k_probabilities(z, ids, 5);
  REQUIRE(top.size() == 3);
  for (Index i = 0; i < 3; ++i) {
    const auto& t = top[static_cast<std::size_t>(i)];
    CHECK(t.classes.size() == 5);
    for (std::size_t k = 1; k < 5; ++k) CHECK(t.probabilities[k] <= t.probabilities[k - 1]);
    const auto ref = oracle::softmax_ld({z(i, 0), z(i, 1), z(i, 2), z(i, 3), z(i, 4), z(i, 5)});
    CHECK(t.probabilities[0] == doctest::Approx(static_cast<double>(ref[static_cast<std::size_t>(t.classes[0] - 10)])));
  }
}
