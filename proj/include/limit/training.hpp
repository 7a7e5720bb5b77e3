#pragma once

#include "limit/calibration.hpp"
#include "limit/dataset.hpp"
#include "limit/model.hpp"
#include "limit/sampler.hpp"

#include <functional>
#include <vector>

namespace limit {

struct PretrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  int epochs = 100;
  int batch_size = 128;
};

struct MetaConfig {
  double lr = 0.0002;
  double momentum = 0.9;
  double decay_factor = 0.5;
  int decay_every = 1000;
  int iterations = 2000;
  /// Fake-task sequences whose losses are summed before each optimizer step.
  int episodes_per_step = 1;
  FakeTaskSpec fake;
  bool use_calibration = true;
  bool train_embedding = true;
  bool train_classifier = true;
  bool train_calibration = true;
};

/// Plain SGD on the few-shot data of one session, the forgetting baseline.
struct FinetuneConfig {
  double lr = 0.1;
  double momentum = 0.9;
  int epochs = 10;
  int batch_size = 25;
  /// New columns start from prototypes instead of small random values.
  bool prototype_init = false;
  bool train_embedding = true;
};

struct TrainConfig {
  PretrainConfig pretrain;
  MetaConfig meta;
  FinetuneConfig finetune;
  double kd_lambda = 0.5;
  /// After pretraining, base columns are replaced by base-class prototypes so
  /// that old and new columns live on the same scale.
  bool base_prototypes = true;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct ModelState {
  EmbeddingNet net;
  Classifier classifier;
  CalibrationParams calibration;
  bool pretrained = false;
  bool meta_trained = false;

  ModelState clone() const;
};

struct ModelConfig {
  std::vector<int> hidden{64, 64};
  int embed_dim = 32;
  int calib_hidden = 64;
  double dropout = 0.5;
  bool dropout_before_norm = true;
};

/// Fresh, untrained state for `input_dim` features and the given base classes.
ModelState init_model(const ModelConfig& cfg, int input_dim, std::vector<int> base_classes, Rng& rng);

struct OptimizerState {
  std::vector<Matrix> velocity;
  long iteration = 0;
};

/// v <- momentum * v + g ; p <- p - lr * v, for every parameter. Parameters
/// without a gradient contribute g = 0.
void sgd_step(std::span<Tensor> params, OptimizerState& opt, double lr, double momentum);

/// base_lr * decay_factor ^ floor(iteration / decay_every).
double lr_at(long iteration, const MetaConfig& cfg);

/// (1 - lambda) * ce + lambda * mean_rows(sum_k -softmax(old)_k log softmax(new_old)_k),
/// where new_old is the first old_logits.cols() columns of new_logits.
Tensor kd_loss(const Tensor& new_logits, const Matrix& old_logits, const Tensor& ce, double lambda);

struct LogRow {
  long iteration = 0;
  double lr = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;  // percent
};
using LogSink = std::function<void(const LogRow&)>;

/// Mini-batch SGD on cross-entropy over the base classes.
ModelState pretrain(const ModelState& state, const Dataset& base, const TrainConfig& cfg,
                    const LogSink& log = {});

/// Every classifier column becomes the prototype of its class over `base`.
ModelState prototype_base_classifier(const ModelState& state, const Dataset& base);

/// Loss of one fake-task sequence: the sum over phases of the mean query
/// cross-entropy of the prototype-substituted (and optionally calibrated) classifier.
struct MetaLoss {
  Tensor total;
  std::vector<double> phase_losses;
  long correct = 0;
  long queries = 0;
};

MetaLoss meta_loss(const ModelState& state, const Dataset& base, const FakeTaskSequence& seq,
                   bool use_calibration, Mode mode, Rng& rng);

/// Meta-training over sampled fake-incremental sequences; one optimizer step
/// per `episodes_per_step` sequences on the enabled parameter groups.
ModelState meta_train(const ModelState& state, const Dataset& base, const TrainConfig& cfg,
                      const LogSink& log = {});

/// Appends columns for `new_classes` and runs SGD on the session data. When
/// `teacher` is given, the loss is kd_loss against the teacher's logits over
/// its classes with weight cfg.kd_lambda.
ModelState finetune_incremental(const ModelState& state, const Dataset& session,
                                std::span<const int> new_classes, const TrainConfig& cfg, Rng& rng,
                                const ModelState* teacher = nullptr, const LogSink& log = {});

}  // namespace limit
