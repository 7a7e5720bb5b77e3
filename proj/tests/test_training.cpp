#include "limit/errors.hpp"
#include "limit/evaluation.hpp"
#include "limit/training.hpp"

#include "support/oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace limit;

namespace {

ModelConfig small_model() {
  ModelConfig mc;
  mc.hidden = {16};
  mc.embed_dim = 8;
  mc.calib_hidden = 8;
  return mc;
}

ModelState fresh_state(const Dataset& base, std::uint64_t seed, const ModelConfig& mc = small_model()) {
  Rng rng(seed);
  return init_model(mc, static_cast<int>(base.dim()), base.present_classes(), rng);
}

bool same_params(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k].value() != b[k].value()) return false;
  }
  return true;
}

std::vector<Tensor> all_params(const ModelState& s) {
  std::vector<Tensor> p = s.net.parameters();
  p.push_back(s.classifier.weights);
  for (const auto& t : s.calibration.parameters()) p.push_back(t);
  return p;
}

/// Fake-query accuracy on sequences drawn from a fixed rng, eval mode.
double fake_accuracy(const ModelState& s, const Dataset& base, const FakeTaskSpec& spec) {
  NoGradGuard no_grad;
  Rng rng(12345);
  long correct = 0, total = 0;
  for (int k = 0; k < 20; ++k) {
    const FakeTaskSequence seq = sample_fake_tasks(base, spec, rng);
    const MetaLoss ml = meta_loss(s, base, seq, true, Mode::eval, rng);
    correct += ml.correct;
    total += ml.queries;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("sgd_step") {
  Tensor p(Matrix::Constant(1, 2, 1.0), true);
  std::vector<Tensor> params{p};
  OptimizerState plain;
  p.node()->grad = Tensor::row({0.5, -2.0}).value();
  sgd_step(params, plain, 0.1, 0.0);
  CHECK(p.value()(0, 0) == doctest::Approx(0.95));
  CHECK(p.value()(0, 1) == doctest::Approx(1.2));

  // Hand unrolled: v1 = g1, p1 = p0 - lr g1; v2 = mu g1 + g2, p2 = p1 - lr v2.
  Tensor q(Matrix::Constant(1, 1, 2.0), true);
  std::vector<Tensor> qs{q};
  OptimizerState opt;
  q.node()->grad = Matrix::Constant(1, 1, 3.0);
  sgd_step(qs, opt, 0.1, 0.9);
  q.node()->grad = Matrix::Constant(1, 1, -1.0);
  sgd_step(qs, opt, 0.1, 0.9);
  const double v2 = 0.9 * 3.0 - 1.0;
  CHECK(q.value()(0, 0) == doctest::Approx(2.0 - 0.1 * 3.0 - 0.1 * v2).epsilon(1e-15));
  CHECK(opt.iteration == 2);

  q.zero_grad();
  for (int k = 0; k < 3; ++k) sgd_step(qs, opt, 0.1, 0.9);
  CHECK(opt.velocity[0](0, 0) == doctest::Approx(v2 * 0.9 * 0.9 * 0.9).epsilon(1e-15));
}

TEST_CASE("learning-rate schedule") {
  const MetaConfig cfg;
  CHECK(lr_at(0, cfg) == 0.0002);
  CHECK(lr_at(999, cfg) == 0.0002);
  CHECK(lr_at(1000, cfg) == 0.0001);
  CHECK(lr_at(2500, cfg) == doctest::Approx(0.00005));
  CHECK_THROWS_AS(lr_at(-1, cfg), ContractError);
}

TEST_CASE("knowledge distillation loss") {
  const Matrix old_logits = oracle::random_matrix(4, 3, 1);
  Matrix new_values(4, 5);
  new_values.leftCols(3) = old_logits;
  new_values.rightCols(2) = oracle::random_matrix(4, 2, 2);
  const Tensor new_logits(new_values);
  const std::vector<int> y{0, 3, 4, 1};
  const Tensor ce = cross_entropy(new_logits, y);

  CHECK(kd_loss(new_logits, old_logits, ce, 0.0).item() == ce.item());

  long double entropy = 0.0L;
  for (Index i = 0; i < 4; ++i) {
    const auto s = oracle::softmax_ld({old_logits(i, 0), old_logits(i, 1), old_logits(i, 2)});
    for (auto v : s) entropy -= v * std::log(v);
  }
  entropy /= 4.0L;
  CHECK(kd_loss(new_logits, old_logits, ce, 1.0).item() == doctest::Approx(static_cast<double>(entropy)).epsilon(1e-13));

  // Random 3-class case: (1 - l) ce + l * KD against a long double evaluation.
  const Matrix n3 = oracle::random_matrix(5, 3, 3);
  const Matrix o3 = oracle::random_matrix(5, 3, 4);
  const std::vector<int> y3{0, 1, 2, 2, 0};
  long double ce_ld = 0.0L, kd_ld = 0.0L;
  for (Index i = 0; i < 5; ++i) {
    const std::vector<double> nr{n3(i, 0), n3(i, 1), n3(i, 2)};
    ce_ld += oracle::cross_entropy_ld(nr, y3[static_cast<std::size_t>(i)]);
    const auto t = oracle::softmax_ld({o3(i, 0), o3(i, 1), o3(i, 2)});
    const auto s = oracle::softmax_ld(nr);
    for (std::size_t k = 0; k < 3; ++k) kd_ld -= t[k] * std::log(s[k]);
  }
  const long double expect = 0.7L * ce_ld / 5.0L + 0.3L * kd_ld / 5.0L;
  const double got = kd_loss(Tensor(n3), o3, cross_entropy(Tensor(n3), y3), 0.3).item();
  CHECK(got == doctest::Approx(static_cast<double>(expect)).epsilon(1e-13));

  CHECK_THROWS_AS(kd_loss(Tensor(n3), oracle::random_matrix(5, 4, 5), ce, 0.5), DimensionError);
  CHECK_THROWS_AS(kd_loss(Tensor(n3), oracle::random_matrix(4, 3, 5), ce, 0.5), DimensionError);
}

TEST_CASE("pretraining") {
  const Dataset easy = generate_gaussian_mixture(2, 4, 30, 0.2, 1);
  TrainConfig cfg;
  cfg.pretrain.epochs = 20;
  cfg.pretrain.batch_size = 16;
  cfg.pretrain.lr = 0.05;
  cfg.seed = 3;
  const ModelState start = fresh_state(easy, 2);
  std::vector<LogRow> log;
  const ModelState trained = pretrain(start, easy, cfg, [&](const LogRow& r) { log.push_back(r); });
  CHECK(trained.pretrained);
  REQUIRE(log.size() == 20);
  const Matrix logits = raw_logits(trained.classifier, embed(trained.net, Tensor(easy.features))).value();
  CHECK(top1_accuracy(logits, easy.labels) == 100.0);

  const ModelState again = pretrain(start, easy, cfg);
  CHECK(same_params(all_params(trained), all_params(again)));

  cfg.pretrain.epochs = 0;
  const ModelState untouched = pretrain(start, easy, cfg);
  CHECK(same_params(all_params(untouched), all_params(start)));
  CHECK_FALSE(untouched.pretrained);

  Dataset huge = easy;
  huge.features *= 1e300;
  cfg.pretrain.epochs = 5;
  try {
    pretrain(start, huge, cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.iteration() >= 0);
    CHECK(std::string(e.what()).find("iteration") != std::string::npos);
  }
}

TEST_CASE("meta loss bookkeeping, gradient flow, finiteness") {
  const Dataset base = generate_gaussian_mixture(12, 6, 20, 1.0, 4);
  FakeTaskSpec spec;
  spec.phases = 2;
  spec.way = 3;
  spec.shot = 3;
  spec.query_shot = 4;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ModelState s = fresh_state(base, seed);
    Rng rng(seed);
    const FakeTaskSequence seq = sample_fake_tasks(base, spec, rng);
    const MetaLoss ml = meta_loss(s, base, seq, true, Mode::train, rng);
    CHECK(std::isfinite(ml.total.item()));
    REQUIRE(ml.phase_losses.size() == 2);
    CHECK(ml.total.item() == doctest::Approx(ml.phase_losses[0] + ml.phase_losses[1]).epsilon(1e-15));
    CHECK(ml.queries == 4 * (9 + 12));

    backward(ml.total);
    Tape::current().clear();
    for (const Tensor& p : all_params(s)) CHECK(p.grad().cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("meta-training improves fake-task accuracy") {
  const Dataset base = generate_gaussian_mixture(20, 8, 30, 1.5, 5);
  TrainConfig cfg;
  cfg.seed = 6;
  cfg.pretrain.epochs = 10;
  cfg.pretrain.lr = 0.02;
  cfg.pretrain.batch_size = 32;
  cfg.meta.lr = 0.01;
  cfg.meta.iterations = 100;
  cfg.meta.fake.phases = 2;
  cfg.meta.fake.way = 5;
  cfg.meta.fake.shot = 5;
  cfg.meta.fake.query_shot = 5;
  // An 8-dimensional toy cannot absorb the default 0.5 dropout inside tau.
  ModelConfig mc = small_model();
  mc.dropout = 0.1;
  const ModelState pre = prototype_base_classifier(pretrain(fresh_state(base, 7, mc), base, cfg), base);
  std::vector<LogRow> log;
  const ModelState meta = meta_train(pre, base, cfg, [&](const LogRow& r) { log.push_back(r); });
  CHECK(meta.meta_trained);
  CHECK(log.size() == 100);
  CHECK(fake_accuracy(meta, base, cfg.meta.fake) > fake_accuracy(pre, base, cfg.meta.fake));

  cfg.meta.fake.phases = 1;
  const ModelState meta1 = meta_train(pre, base, cfg);
  CHECK(meta1.meta_trained);

  cfg.meta.iterations = 0;
  const ModelState same = meta_train(pre, base, cfg);
  CHECK(same_params(all_params(same), all_params(pre)));

  cfg.meta.iterations = 3;
  cfg.meta.train_embedding = false;
  cfg.meta.train_classifier = false;
  const ModelState calib_only = meta_train(pre, base, cfg);
  CHECK(same_params(calib_only.net.parameters(), pre.net.parameters()));
  CHECK(calib_only.classifier.weights.value() == pre.classifier.weights.value());
  CHECK(calib_only.calibration.query_proj.value() != pre.calibration.query_proj.value());
}

TEST_CASE("finetuning baseline") {
  const Dataset all = generate_gaussian_mixture(15, 8, 40, 1.0, 8);
  SplitSpec split;
  split.base_class_count = 10;
  split.session_count = 1;
  split.seed = 9;
  const SessionStream stream = split_sessions(all, split);
  TrainConfig cfg;
  cfg.seed = 10;
  cfg.pretrain.epochs = 15;
  cfg.pretrain.lr = 0.02;
  cfg.pretrain.batch_size = 32;
  const ModelState pre = pretrain(fresh_state(stream.base, 11), stream.base, cfg);

  // Zero steps with prototype initialization is exactly the augment path.
  cfg.finetune.epochs = 0;
  cfg.finetune.prototype_init = true;
  Rng rng(1);
  const ModelState zero = finetune_incremental(pre, stream.sessions[0], stream.session_classes[1], cfg, rng);
  Classifier augmented;
  {
    NoGradGuard g;
    augmented = augment_classifier(pre.classifier, compute_prototypes(stream.sessions[0], pre.net),
                                   stream.session_classes[1]);
  }
  CHECK(zero.classifier.weights.value() == augmented.weights.value());
  CHECK(zero.classifier.class_ids == augmented.class_ids);

  // Small learning rate: loss falls over the first steps.
  cfg.finetune.prototype_init = false;
  cfg.finetune.epochs = 5;
  cfg.finetune.lr = 0.001;
  std::vector<LogRow> log;
  finetune_incremental(pre, stream.sessions[0], stream.session_classes[1], cfg, rng, nullptr,
                       [&](const LogRow& r) { log.push_back(r); });
  REQUIRE(log.size() == 5);
  for (std::size_t k = 1; k < log.size(); ++k) CHECK(log[k].loss < log[k - 1].loss);

  // Aggressive finetuning forgets the base classes; prototypes do not.
  cfg.finetune.lr = 0.05;
  cfg.finetune.epochs = 20;
  EvalOptions ft;
  ft.learner = Learner::finetune;
  ft.use_calibration = false;
  ft.train = cfg;
  EvalOptions proto;
  proto.use_calibration = false;
  const EvalReport r_ft = run_incremental(pre, stream, ft);
  const EvalReport r_proto = run_incremental(pre, stream, proto);
  CHECK(r_ft.base_acc < r_proto.base_acc);

  const std::vector<int> dup{stream.session_classes[0].front()};
  CHECK_THROWS_AS(finetune_incremental(pre, stream.sessions[0], dup, cfg, rng), ContractError);
}

TEST_CASE("train config validation names the field") {
  TrainConfig cfg;
  cfg.meta.decay_factor = 0.0;
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).rfind("train.meta.decay_factor", 0) == 0);
  }
  cfg = TrainConfig{};
  cfg.pretrain.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.finetune.lr = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_NOTHROW(TrainConfig{}.validate());
}
