#include "limit/training.hpp"

#include "limit/errors.hpp"
#include "limit/seeding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

namespace limit {

namespace {

std::vector<int> to_columns(const Classifier& w, std::span<const int> labels) {
  std::unordered_map<int, int> column;
  for (std::size_t j = 0; j < w.class_ids.size(); ++j) column[w.class_ids[j]] = static_cast<int>(j);
  std::vector<int> out;
  out.reserve(labels.size());
  for (int y : labels) {
    const auto it = column.find(y);
    if (it == column.end()) throw IndexError("no classifier column for label " + std::to_string(y));
    out.push_back(it->second);
  }
  return out;
}

long count_correct(const Matrix& logits, std::span<const int> columns) {
  long correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < logits.cols(); ++j) {
      if (logits(i, j) > logits(i, best)) best = j;
    }
    if (best == columns[static_cast<std::size_t>(i)]) ++correct;
  }
  return correct;
}

void require_finite_loss(const Tensor& loss, long iteration, const char* stage) {
  if (!std::isfinite(loss.item())) throw DivergenceError(std::string(stage) + ": non-finite loss", iteration);
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

Matrix rows_of(const Matrix& m, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

/// One pass of shuffled mini-batches of cross-entropy (optionally distilled) SGD.
template <typename LossFn>
void run_epochs(int epochs, int batch_size, Index n, Rng& rng, std::vector<Tensor>& params,
                OptimizerState& opt, double lr, double momentum, const char* stage, LossFn&& batch_loss,
                const LogSink& log, bool log_every_step) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    long correct = 0;
    for (Index start = 0; start < n; start += batch_size) {
      const Index count = std::min<Index>(batch_size, n - start);
      std::span<const Index> batch(order.data() + start, static_cast<std::size_t>(count));
      auto [loss, batch_correct] = batch_loss(batch);
      require_finite_loss(loss, opt.iteration, stage);
      zero_grads(params);
      backward(loss);
      sgd_step(params, opt, lr, momentum);
      Tape::current().clear();
      loss_sum += loss.item() * static_cast<double>(count);
      correct += batch_correct;
      if (log && log_every_step) {
        log({opt.iteration, lr, loss.item(), 100.0 * static_cast<double>(batch_correct) / static_cast<double>(count)});
      }
    }
    if (log && !log_every_step) {
      log({epoch + 1, lr, loss_sum / static_cast<double>(n), 100.0 * static_cast<double>(correct) / static_cast<double>(n)});
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  auto positive = [](double v, const char* path) {
    if (!(v > 0.0)) throw ConfigError(std::string(path) + ": must be > 0");
  };
  auto momentum_ok = [](double v, const char* path) {
    if (!(v >= 0.0 && v < 1.0)) throw ConfigError(std::string(path) + ": must lie in [0, 1)");
  };
  auto non_negative = [](long v, const char* path) {
    if (v < 0) throw ConfigError(std::string(path) + ": must be >= 0");
  };
  positive(pretrain.lr, "train.pretrain.lr");
  momentum_ok(pretrain.momentum, "train.pretrain.momentum");
  non_negative(pretrain.epochs, "train.pretrain.epochs");
  if (pretrain.batch_size < 1) throw ConfigError("train.pretrain.batch_size: must be >= 1");
  positive(meta.lr, "train.meta.lr");
  momentum_ok(meta.momentum, "train.meta.momentum");
  if (!(meta.decay_factor > 0.0 && meta.decay_factor <= 1.0)) {
    throw ConfigError("train.meta.decay_factor: must lie in (0, 1]");
  }
  if (meta.decay_every < 1) throw ConfigError("train.meta.decay_every: must be >= 1");
  non_negative(meta.iterations, "train.meta.iterations");
  if (meta.episodes_per_step < 1) throw ConfigError("train.meta.episodes_per_step: must be >= 1");
  if (meta.fake.phases < 1) throw ConfigError("train.meta.fake.phases: must be >= 1");
  if (meta.fake.way < 1) throw ConfigError("train.meta.fake.way: must be >= 1");
  if (meta.fake.shot < 1) throw ConfigError("train.meta.fake.shot: must be >= 1");
  if (meta.fake.query_shot < 1) throw ConfigError("train.meta.fake.query_shot: must be >= 1");
  positive(finetune.lr, "train.finetune.lr");
  momentum_ok(finetune.momentum, "train.finetune.momentum");
  non_negative(finetune.epochs, "train.finetune.epochs");
  if (finetune.batch_size < 1) throw ConfigError("train.finetune.batch_size: must be >= 1");
  if (!(kd_lambda >= 0.0 && kd_lambda <= 1.0)) throw ConfigError("train.kd_lambda: must lie in [0, 1]");
}

ModelState ModelState::clone() const {
  return {net.clone(), classifier.clone(), calibration.clone(), pretrained, meta_trained};
}

ModelState init_model(const ModelConfig& cfg, int input_dim, std::vector<int> base_classes, Rng& rng) {
  std::vector<int> widths{input_dim};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(cfg.embed_dim);
  ModelState state;
  state.net = EmbeddingNet::create(widths, rng);
  state.classifier = Classifier::create(cfg.embed_dim, std::move(base_classes), rng);
  state.calibration = CalibrationParams::create(cfg.embed_dim, cfg.calib_hidden, cfg.dropout, rng);
  state.calibration.dropout_before_norm = cfg.dropout_before_norm;
  return state;
}

void sgd_step(std::span<Tensor> params, OptimizerState& opt, double lr, double momentum) {
  if (opt.velocity.empty()) {
    for (const auto& p : params) opt.velocity.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
  if (opt.velocity.size() != params.size()) {
    throw ContractError("sgd_step: optimizer state tracks " + std::to_string(opt.velocity.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& v = opt.velocity[k];
    if (v.rows() != params[k].rows() || v.cols() != params[k].cols()) {
      throw DimensionError("sgd_step: velocity shape changed for parameter " + std::to_string(k));
    }
    v *= momentum;
    if (params[k].has_grad()) v += params[k].node()->grad;
    params[k].mutable_value() -= lr * v;
  }
  ++opt.iteration;
}

double lr_at(long iteration, const MetaConfig& cfg) {
  if (iteration < 0) throw ContractError("lr_at: negative iteration");
  return cfg.lr * std::pow(cfg.decay_factor, static_cast<double>(iteration / cfg.decay_every));
}

Tensor kd_loss(const Tensor& new_logits, const Matrix& old_logits, const Tensor& ce, double lambda) {
  if (old_logits.rows() != new_logits.rows() || old_logits.cols() > new_logits.cols()) {
    throw DimensionError("kd_loss: old logits [" + std::to_string(old_logits.rows()) + "x" +
                         std::to_string(old_logits.cols()) + "] do not cover old columns of " +
                         shape_string(new_logits));
  }
  if (lambda == 0.0) return ce;
  const Matrix teacher = softmax(Tensor(old_logits)).value();
  const Tensor distill = soft_cross_entropy(slice_cols(new_logits, 0, old_logits.cols()), teacher);
  return add(scale(ce, 1.0 - lambda), scale(distill, lambda));
}

ModelState pretrain(const ModelState& state, const Dataset& base, const TrainConfig& cfg, const LogSink& log) {
  if (state.classifier.size() != static_cast<Index>(base.present_classes().size())) {
    throw ContractError("pretrain: classifier has " + std::to_string(state.classifier.size()) +
                        " columns for " + std::to_string(base.present_classes().size()) + " base classes");
  }
  ModelState out = state.clone();
  out.pretrained = state.pretrained || cfg.pretrain.epochs > 0;
  if (cfg.pretrain.epochs == 0) return out;

  Rng rng(derive_seed(cfg.seed, salt::pretrain));
  std::vector<Tensor> params = out.net.parameters();
  params.push_back(out.classifier.weights);
  for (auto& p : params) p.set_requires_grad(true);
  const std::vector<int> columns = to_columns(out.classifier, base.labels);
  OptimizerState opt;

  auto batch_loss = [&](std::span<const Index> batch) {
    std::vector<int> y;
    for (Index i : batch) y.push_back(columns[static_cast<std::size_t>(i)]);
    const Tensor logits = raw_logits(out.classifier, embed(out.net, Tensor(rows_of(base.features, batch))));
    if (!logits.value().allFinite()) throw DivergenceError("pretrain: non-finite logits", opt.iteration);
    return std::pair{cross_entropy(logits, y), count_correct(logits.value(), y)};
  };
  run_epochs(cfg.pretrain.epochs, cfg.pretrain.batch_size, base.size(), rng, params, opt,
             cfg.pretrain.lr, cfg.pretrain.momentum, "pretrain", batch_loss, log, false);
  return out;
}

ModelState prototype_base_classifier(const ModelState& state, const Dataset& base) {
  NoGradGuard no_grad;
  ModelState out = state.clone();
  const Classifier replaced = replace_classifier(state.classifier, compute_prototypes(base, state.net),
                                                 state.classifier.class_ids);
  out.classifier.weights = Tensor(replaced.weights.value(), true);
  return out;
}

MetaLoss meta_loss(const ModelState& state, const Dataset& base, const FakeTaskSequence& seq,
                   bool use_calibration, Mode mode, Rng& rng) {
  std::vector<Index> base_columns;
  for (int y : seq.fake_base_classes) base_columns.push_back(state.classifier.column_of(y));
  Classifier prev{gather_cols(state.classifier.weights, base_columns), seq.fake_base_classes};

  MetaLoss out;
  for (int c = 0; c < seq.phases(); ++c) {
    const InstanceSet& support = seq.supports[static_cast<std::size_t>(c)];
    const InstanceSet& query = seq.queries[static_cast<std::size_t>(c)];
    const Tensor support_emb = embed(state.net, Tensor(rows_of(base.features, support.rows)));
    const Prototypes protos = compute_prototypes(support_emb, support.labels);
    Classifier w_hat = replace_classifier(prev, protos, seq.phase_classes[static_cast<std::size_t>(c)]);

    const Tensor query_emb = embed(state.net, Tensor(rows_of(base.features, query.rows)));
    const Tensor logits = use_calibration
                              ? calibrated_logits(calibrate(w_hat, query_emb, state.calibration, mode, rng))
                              : raw_logits(w_hat, query_emb);
    const std::vector<int> y = to_columns(w_hat, query.labels);
    const Tensor phase_loss = cross_entropy(logits, y);
    out.phase_losses.push_back(phase_loss.item());
    out.total = c == 0 ? phase_loss : add(out.total, phase_loss);
    out.correct += count_correct(logits.value(), y);
    out.queries += static_cast<long>(y.size());
    prev = std::move(w_hat);
  }
  return out;
}

ModelState meta_train(const ModelState& state, const Dataset& base, const TrainConfig& cfg, const LogSink& log) {
  ModelState out = state.clone();
  const MetaConfig& meta = cfg.meta;
  if (meta.iterations == 0) return out;

  out.net.set_requires_grad(meta.train_embedding);
  out.classifier.weights.set_requires_grad(meta.train_classifier);
  out.calibration.set_requires_grad(meta.train_calibration && meta.use_calibration);
  std::vector<Tensor> params;
  if (meta.train_embedding) {
    for (const auto& p : out.net.parameters()) params.push_back(p);
  }
  if (meta.train_classifier) params.push_back(out.classifier.weights);
  if (meta.train_calibration && meta.use_calibration) {
    for (const auto& p : out.calibration.parameters()) params.push_back(p);
  }
  if (params.empty()) throw ContractError("meta_train: every parameter group is frozen");

  Rng rng(derive_seed(cfg.seed, salt::meta));
  OptimizerState opt;
  for (long it = 0; it < meta.iterations; ++it) {
    const double lr = lr_at(it, meta);
    Tensor loss;
    long correct = 0;
    long queries = 0;
    for (int e = 0; e < meta.episodes_per_step; ++e) {
      const FakeTaskSequence seq = sample_fake_tasks(base, meta.fake, rng);
      MetaLoss ml = meta_loss(out, base, seq, meta.use_calibration, Mode::train, rng);
      loss = e == 0 ? ml.total : add(loss, ml.total);
      correct += ml.correct;
      queries += ml.queries;
    }
    require_finite_loss(loss, it, "meta_train");
    zero_grads(params);
    backward(loss);
    sgd_step(params, opt, lr, meta.momentum);
    Tape::current().clear();
    if (log) log({it, lr, loss.item(), 100.0 * static_cast<double>(correct) / static_cast<double>(queries)});
  }
  zero_grads(params);
  out.net.set_requires_grad(true);
  out.classifier.weights.set_requires_grad(true);
  out.calibration.set_requires_grad(true);
  out.meta_trained = true;
  return out;
}

ModelState finetune_incremental(const ModelState& state, const Dataset& session,
                                std::span<const int> new_classes, const TrainConfig& cfg, Rng& rng,
                                const ModelState* teacher, const LogSink& log) {
  const FinetuneConfig& ft = cfg.finetune;
  ModelState out = state.clone();
  if (!new_classes.empty()) {
    if (ft.prototype_init) {
      NoGradGuard no_grad;
      out.classifier = augment_classifier(out.classifier, compute_prototypes(session, out.net), new_classes);
    } else {
      const Classifier fresh = Classifier::create(static_cast<int>(out.classifier.dim()),
                                                  {new_classes.begin(), new_classes.end()}, rng);
      for (int y : new_classes) {
        if (std::find(out.classifier.class_ids.begin(), out.classifier.class_ids.end(), y) !=
            out.classifier.class_ids.end()) {
          throw ContractError("finetune: class " + std::to_string(y) + " already has a column");
        }
      }
      const Tensor parts[] = {out.classifier.weights.detach(), fresh.weights.detach()};
      out.classifier.weights = Tensor(concat_cols(parts).value(), true);
      out.classifier.class_ids.insert(out.classifier.class_ids.end(), new_classes.begin(), new_classes.end());
    }
  }
  if (ft.epochs == 0 || session.size() == 0) return out;

  std::vector<Tensor> params;
  out.net.set_requires_grad(ft.train_embedding);
  if (ft.train_embedding) {
    for (const auto& p : out.net.parameters()) params.push_back(p);
  }
  out.classifier.weights.set_requires_grad(true);
  params.push_back(out.classifier.weights);

  const std::vector<int> columns = to_columns(out.classifier, session.labels);
  const bool distill = teacher != nullptr && cfg.kd_lambda > 0.0;
  OptimizerState opt;
  auto batch_loss = [&](std::span<const Index> batch) {
    std::vector<int> y;
    for (Index i : batch) y.push_back(columns[static_cast<std::size_t>(i)]);
    const Matrix x = rows_of(session.features, batch);
    const Tensor logits = raw_logits(out.classifier, embed(out.net, Tensor(x)));
    if (!logits.value().allFinite()) throw DivergenceError("finetune: non-finite logits", opt.iteration);
    Tensor loss = cross_entropy(logits, y);
    if (distill) {
      Matrix old_logits;
      {
        NoGradGuard no_grad;
        old_logits = raw_logits(teacher->classifier, embed(teacher->net, Tensor(x))).value();
      }
      loss = kd_loss(logits, old_logits, loss, cfg.kd_lambda);
    }
    return std::pair{loss, count_correct(logits.value(), y)};
  };
  run_epochs(ft.epochs, ft.batch_size, session.size(), rng, params, opt, ft.lr, ft.momentum, "finetune",
             batch_loss, log, true);
  out.net.set_requires_grad(true);
  zero_grads(params);
  return out;
}

}  // namespace limit
