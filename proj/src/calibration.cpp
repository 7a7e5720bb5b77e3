#include "limit/calibration.hpp"

#include "limit/errors.hpp"

#include <cmath>

namespace limit {

namespace {

Tensor uniform_matrix(Index rows, Index cols, Rng& rng) {
  const double limit = 1.0 / std::sqrt(static_cast<double>(rows));
  std::uniform_real_distribution<double> uniform(-limit, limit);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng);
  return Tensor(std::move(m), true);
}

Tensor tau(const Tensor& z, const CalibrationParams& p, Mode mode, Rng& rng) {
  if (p.dropout_before_norm) return layer_norm(dropout(z, p.dropout_p, mode, rng), p.ln_gamma, p.ln_beta);
  return dropout(layer_norm(z, p.ln_gamma, p.ln_beta), p.dropout_p, mode, rng);
}

Tensor concat2_cols(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat_cols(parts);
}

}  // namespace

CalibrationParams CalibrationParams::create(int dim, int hidden, double dropout_p, Rng& rng) {
  if (dim < 1 || hidden < 1) throw ContractError("calibration: dimensions must be >= 1");
  CalibrationParams p;
  p.query_proj = uniform_matrix(dim, hidden, rng);
  p.key_proj = uniform_matrix(dim, hidden, rng);
  p.value_proj = uniform_matrix(dim, hidden, rng);
  p.out_proj = uniform_matrix(hidden, dim, rng);
  p.ln_gamma = Tensor(Matrix::Ones(1, dim), true);
  p.ln_beta = Tensor::zeros(1, dim, true);
  p.dropout_p = dropout_p;
  p.validate();
  return p;
}

std::vector<Tensor> CalibrationParams::parameters() const {
  return {query_proj, key_proj, value_proj, out_proj, ln_gamma, ln_beta};
}

void CalibrationParams::set_requires_grad(bool on) {
  for (Tensor t : parameters()) t.set_requires_grad(on);
}

CalibrationParams CalibrationParams::clone() const {
  CalibrationParams p = *this;
  p.query_proj = query_proj.clone();
  p.key_proj = key_proj.clone();
  p.value_proj = value_proj.clone();
  p.out_proj = out_proj.clone();
  p.ln_gamma = ln_gamma.clone();
  p.ln_beta = ln_beta.clone();
  return p;
}

void CalibrationParams::validate() const {
  const Index d = dim();
  const Index h = hidden();
  if (key_proj.rows() != d || key_proj.cols() != h || value_proj.rows() != d ||
      value_proj.cols() != h || out_proj.rows() != h || out_proj.cols() != d ||
      ln_gamma.rows() != 1 || ln_gamma.cols() != d || ln_beta.rows() != 1 || ln_beta.cols() != d) {
    throw DimensionError("calibration: inconsistent parameter shapes for d=" + std::to_string(d) +
                         ", d'=" + std::to_string(h));
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ContractError("calibration: dropout_p must lie in [0, 1)");
}

Tensor self_attend(const Tensor& set, const CalibrationParams& params, Mode mode, Rng& rng) {
  if (set.rows() < 1) throw DimensionError("self_attend: empty set");
  if (set.cols() != params.dim()) {
    throw DimensionError("self_attend: set " + shape_string(set) + " but parameters expect d=" +
                         std::to_string(params.dim()));
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.dim()));
  const Tensor q = matmul(set, params.query_proj);
  const Tensor k = matmul(set, params.key_proj);
  const Tensor v = matmul(set, params.value_proj);
  const Tensor alpha = softmax(scale(matmul(q, transpose(k)), inv_sqrt_d));
  const Tensor z = add(set, matmul(matmul(alpha, v), params.out_proj));
  return tau(z, params, mode, rng);
}

Calibrated calibrate(const Classifier& w_hat, const Tensor& emb, const CalibrationParams& params,
                     Mode mode, Rng& rng) {
  const Index d = params.dim();
  if (w_hat.dim() != d || emb.cols() != d) {
    throw DimensionError("calibrate: classifier " + shape_string(w_hat.weights) + ", embeddings " +
                         shape_string(emb) + ", parameters d=" + std::to_string(d));
  }
  const Index n = w_hat.size();
  const Index b = emb.rows();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  // Row r = j * n + i of the expanded layout pairs instance j with class i.
  std::vector<Index> class_of(static_cast<std::size_t>(b * n));
  std::vector<Index> instance_of(static_cast<std::size_t>(b * n));
  for (Index j = 0; j < b; ++j) {
    for (Index i = 0; i < n; ++i) {
      class_of[static_cast<std::size_t>(j * n + i)] = i;
      instance_of[static_cast<std::size_t>(j * n + i)] = j;
    }
  }

  const Tensor w_rows = transpose(w_hat.weights);  // n x d
  const Tensor qw = matmul(w_rows, params.query_proj);
  const Tensor kw = matmul(w_rows, params.key_proj);
  const Tensor vw = matmul(w_rows, params.value_proj);
  const Tensor qe = matmul(emb, params.query_proj);
  const Tensor ke = matmul(emb, params.key_proj);
  const Tensor ve = matmul(emb, params.value_proj);

  Calibrated out;
  out.num_classes = n;

  // Classifier elements. Their keys are all n classifier columns plus the
  // instance's own embedding, so only the last score column differs per instance.
  {
    const Tensor shared_scores = scale(matmul(qw, transpose(kw)), inv_sqrt_d);             // n x n
    const Tensor instance_scores = scale(matmul(qw, transpose(ke)), inv_sqrt_d);           // n x b
    const Tensor scores = concat2_cols(gather_rows(shared_scores, class_of),
                                       reshape(transpose(instance_scores), b * n, 1));
    const Tensor alpha = softmax(scores);
    const Tensor attended = add(matmul(slice_cols(alpha, 0, n), vw),
                                scale_rows(gather_rows(ve, instance_of), slice_cols(alpha, n, 1)));
    const Tensor z = add(gather_rows(w_rows, class_of), matmul(attended, params.out_proj));
    out.weights = tau(z, params, mode, rng);
  }

  // Query elements: phi(x_j) attends over the classifier columns and itself.
  {
    const Tensor scores = concat2_cols(scale(matmul(qe, transpose(kw)), inv_sqrt_d),
                                       scale(row_dot(qe, ke), inv_sqrt_d));
    const Tensor alpha = softmax(scores);
    const Tensor attended = add(matmul(slice_cols(alpha, 0, n), vw), scale_rows(ve, slice_cols(alpha, n, 1)));
    const Tensor z = add(emb, matmul(attended, params.out_proj));
    out.embeddings = tau(z, params, mode, rng);
  }
  return out;
}

Tensor calibrated_logits(const Calibrated& calibrated) {
  const Index b = calibrated.batch();
  const Index n = calibrated.num_classes;
  if (calibrated.weights.rows() != b * n || calibrated.weights.cols() != calibrated.embeddings.cols()) {
    throw DimensionError("calibrated_logits: weights " + shape_string(calibrated.weights) +
                         " do not match embeddings " + shape_string(calibrated.embeddings));
  }
  std::vector<Index> instance_of(static_cast<std::size_t>(b * n));
  for (Index r = 0; r < b * n; ++r) instance_of[static_cast<std::size_t>(r)] = r / n;
  return reshape(row_dot(calibrated.weights, gather_rows(calibrated.embeddings, instance_of)), b, n);
}

}  // namespace limit
