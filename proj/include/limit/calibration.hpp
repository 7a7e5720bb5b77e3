#pragma once

#include "limit/model.hpp"
#include "limit/tensor.hpp"

#include <vector>

namespace limit {

/// Single-layer, single-head self-attention over a set of d-dimensional
/// elements, followed by tau = layer_norm(dropout(.)). Projections are bias-free.
struct CalibrationParams {
  Tensor query_proj;  // d x d'
  Tensor key_proj;    // d x d'
  Tensor value_proj;  // d x d'
  Tensor out_proj;    // d' x d
  Tensor ln_gamma;    // 1 x d
  Tensor ln_beta;     // 1 x d
  double dropout_p = 0.5;
  /// tau applies dropout first and normalizes second; false swaps the order.
  bool dropout_before_norm = true;

  /// Projections are uniform in +-1/sqrt(fan_in); gamma = 1, beta = 0.
  static CalibrationParams create(int dim, int hidden, double dropout_p, Rng& rng);

  Index dim() const { return query_proj.rows(); }
  Index hidden() const { return query_proj.cols(); }
  std::vector<Tensor> parameters() const;
  void set_requires_grad(bool on);
  CalibrationParams clone() const;
  void validate() const;
};

/// Attends every element of `set` (m x d) over the whole set:
/// out_q = tau(x_q + W_FC^T sum_k alpha_qk V_k), alpha_q = softmax(x_q^T W_Q K / sqrt(d)).
Tensor self_attend(const Tensor& set, const CalibrationParams& params, Mode mode, Rng& rng);

/// Output of calibrate for a batch of b query instances against n classes.
struct Calibrated {
  /// Row j * n + i is the calibrated classifier of class column i as seen by instance j.
  Tensor weights;     // (b * n) x d
  Tensor embeddings;  // b x d
  Index num_classes = 0;
  Index batch() const { return embeddings.rows(); }
};

/// For every instance independently, forms the set [classifier columns; phi(x)]
/// of n + 1 elements and applies self_attend to it. All b sets are evaluated in
/// one batched pass that shares the classifier-only terms.
Calibrated calibrate(const Classifier& w_hat, const Tensor& emb, const CalibrationParams& params,
                     Mode mode, Rng& rng);

/// logits(j, i) = <calibrated classifier i of instance j, calibrated phi(x_j)>.
Tensor calibrated_logits(const Calibrated& calibrated);

}  // namespace limit
