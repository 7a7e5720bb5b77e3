#include "limit/tensor.hpp"

#include "limit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace limit {

namespace detail {

void Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

}  // namespace detail

namespace {

thread_local bool t_grad_enabled = true;

using detail::Node;
using Backward = std::function<void(const Node&)>;

std::string shape_of(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void require_finite(const char* op, const Matrix& m) {
  if (!m.allFinite()) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace

Tensor make_result(Matrix value, bool needs, Backward backward);

Tensor make_result(Matrix value, bool needs, Backward backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (needs && t_grad_enabled) {
    node->requires_grad = true;
    node->leaf = false;
    node->backward = std::move(backward);
    Tape::current().record(node);
  }
  return Tensor(std::move(node));
}

Tensor::Tensor() : node_(std::make_shared<Node>()) {}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::scalar(double v) { return Tensor(Matrix::Constant(1, 1, v)); }

Tensor Tensor::row(std::initializer_list<double> values) {
  Matrix m(1, static_cast<Index>(values.size()));
  Index j = 0;
  for (double v : values) m(0, j++) = v;
  return Tensor(std::move(m));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const auto r = static_cast<Index>(rows.size());
  const auto c = r == 0 ? Index{0} : static_cast<Index>(rows.begin()->size());
  Matrix m(r, c);
  Index i = 0;
  for (const auto& row : rows) {
    if (static_cast<Index>(row.size()) != c) throw DimensionError("from_rows: ragged rows");
    Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return Tensor(std::move(m));
}

Matrix Tensor::grad() const {
  if (has_grad()) return node_->grad;
  return Matrix::Zero(rows(), cols());
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item: tensor " + shape_string(*this) + " is not a scalar");
  return node_->value(0, 0);
}

Tensor Tensor::detach() const { return Tensor(node_->value, false); }

Tensor Tensor::clone() const { return Tensor(node_->value, node_->requires_grad); }

std::string shape_string(const Tensor& t) { return shape_of(t.value()); }

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got " + shape_string(loss));
  }
  const auto& root = loss.node();
  if (!root->requires_grad) {
    throw ContractError("backward: loss does not depend on any tensor that requires grad");
  }
  if (root->leaf) {
    root->accumulate(Matrix::Ones(1, 1));
    return;
  }
  const auto& nodes = Tape::current().nodes();
  auto it = std::find(nodes.rbegin(), nodes.rend(), root);
  if (it == nodes.rend()) {
    throw ContractError("backward: loss was not recorded on this thread's tape");
  }
  // Intermediate gradients restart from zero; leaves keep accumulating.
  for (const auto& n : nodes) n->grad.resize(0, 0);
  root->grad = Matrix::Ones(1, 1);
  for (; it != nodes.rend(); ++it) {
    const Node& n = **it;
    if (n.grad.size() != 0 && n.backward) n.backward(n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(a) + " x " +
                         shape_string(b));
  }
  // Coefficient-wise product: every output entry accumulates over the inner
  // dimension in the same order whatever the row count, so a row's result does
  // not depend on the batch it was evaluated in.
  Matrix out = a.value().lazyProduct(b.value());
  auto an = a.node();
  auto bn = b.node();
  return make_result(std::move(out), needs_grad({&a, &b}), [an, bn](const Node& self) {
    if (an->requires_grad) an->accumulate(self.grad * bn->value.transpose());
    if (bn->requires_grad) bn->accumulate(an->value.transpose() * self.grad);
  });
}

Tensor transpose(const Tensor& a) {
  auto an = a.node();
  return make_result(a.value().transpose(), needs_grad({&a}),
                     [an](const Node& self) { an->accumulate(self.grad.transpose()); });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto an = a.node();
  auto bn = b.node();
  return make_result(a.value() + b.value(), needs_grad({&a, &b}), [an, bn](const Node& self) {
    an->accumulate(self.grad);
    bn->accumulate(self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto an = a.node();
  auto bn = b.node();
  return make_result(a.value() - b.value(), needs_grad({&a, &b}), [an, bn](const Node& self) {
    an->accumulate(self.grad);
    bn->accumulate(-self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto an = a.node();
  auto bn = b.node();
  return make_result(a.value().cwiseProduct(b.value()), needs_grad({&a, &b}), [an, bn](const Node& self) {
    if (an->requires_grad) an->accumulate(self.grad.cwiseProduct(bn->value));
    if (bn->requires_grad) bn->accumulate(self.grad.cwiseProduct(an->value));
  });
}

Tensor scale(const Tensor& a, double factor) {
  auto an = a.node();
  return make_result(a.value() * factor, needs_grad({&a}),
                     [an, factor](const Node& self) { an->accumulate(self.grad * factor); });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw DimensionError("add_row_bias: bias " + shape_string(bias) + " does not fit " +
                         shape_string(x));
  }
  Matrix out = x.value().rowwise() + bias.value().row(0);
  auto xn = x.node();
  auto bn = bias.node();
  return make_result(std::move(out), needs_grad({&x, &bias}), [xn, bn](const Node& self) {
    xn->accumulate(self.grad);
    if (bn->requires_grad) bn->accumulate(self.grad.colwise().sum());
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  if (s.cols() != 1 || s.rows() != x.rows()) {
    throw DimensionError("scale_rows: scales " + shape_string(s) + " do not fit " +
                         shape_string(x));
  }
  Matrix out = s.value().col(0).asDiagonal() * x.value();
  auto xn = x.node();
  auto sn = s.node();
  return make_result(std::move(out), needs_grad({&x, &s}), [xn, sn](const Node& self) {
    if (xn->requires_grad) xn->accumulate(sn->value.col(0).asDiagonal() * self.grad);
    if (sn->requires_grad) sn->accumulate(self.grad.cwiseProduct(xn->value).rowwise().sum());
  });
}

Tensor relu(const Tensor& x) {
  Matrix out = x.value().cwiseMax(0.0);
  auto xn = x.node();
  return make_result(std::move(out), needs_grad({&x}), [xn](const Node& self) {
    xn->accumulate((xn->value.array() > 0.0).cast<double>().matrix().cwiseProduct(self.grad));
  });
}

// ---------------------------------------------------------------------------
// Normalizers and losses

namespace {

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - top).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    const double lse = top + std::log((logits.row(i).array() - top).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

}  // namespace

Tensor softmax(const Tensor& logits, Axis axis) {
  if (logits.cols() < 1 || logits.rows() < 1) throw DimensionError("softmax: empty input");
  require_finite("softmax", logits.value());
  if (axis == Axis::rows) return transpose(softmax(transpose(logits), Axis::cols));
  Matrix out = softmax_rows(logits.value());
  auto ln = logits.node();
  return make_result(out, needs_grad({&logits}), [ln, out](const Node& self) {
    const Eigen::VectorXd dot = self.grad.cwiseProduct(out).rowwise().sum();
    Matrix g = self.grad;
    g.colwise() -= dot;
    ln->accumulate(out.cwiseProduct(g));
  });
}

Tensor log_softmax(const Tensor& logits) {
  if (logits.cols() < 1) throw DimensionError("log_softmax: empty input");
  require_finite("log_softmax", logits.value());
  Matrix out = log_softmax_rows(logits.value());
  auto ln = logits.node();
  return make_result(out, needs_grad({&logits}), [ln, out](const Node& self) {
    const Eigen::VectorXd total = self.grad.rowwise().sum();
    Matrix probs = out.array().exp().matrix();
    ln->accumulate(self.grad - Matrix(total.asDiagonal() * probs));
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const Index b = logits.rows();
  const Index n = logits.cols();
  if (static_cast<Index>(labels.size()) != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         shape_string(logits) + " logits");
  }
  if (b == 0) throw DimensionError("cross_entropy: empty batch");
  for (Index i = 0; i < b; ++i) {
    if (labels[i] < 0 || labels[i] >= n) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " outside [0, " + std::to_string(n) + ")");
    }
  }
  require_finite("cross_entropy", logits.value());
  const Matrix logp = log_softmax_rows(logits.value());
  double total = 0.0;
  for (Index i = 0; i < b; ++i) total -= logp(i, labels[i]);
  std::vector<int> targets(labels.begin(), labels.end());
  auto ln = logits.node();
  return make_result(Matrix::Constant(1, 1, total / static_cast<double>(b)), needs_grad({&logits}),
                     [ln, logp, targets](const Node& self) {
                       Matrix g = logp.array().exp().matrix();
                       for (Index i = 0; i < g.rows(); ++i) g(i, targets[i]) -= 1.0;
                       ln->accumulate(g * (self.grad(0, 0) / static_cast<double>(g.rows())));
                     });
}

Tensor soft_cross_entropy(const Tensor& logits, const Matrix& target) {
  if (target.rows() != logits.rows() || target.cols() != logits.cols()) {
    throw DimensionError("soft_cross_entropy: target " + shape_of(target) + " vs logits " +
                         shape_string(logits));
  }
  if (logits.rows() == 0) throw DimensionError("soft_cross_entropy: empty batch");
  require_finite("soft_cross_entropy", logits.value());
  const Matrix logp = log_softmax_rows(logits.value());
  const double b = static_cast<double>(logits.rows());
  const double total = -logp.cwiseProduct(target).sum() / b;
  auto ln = logits.node();
  return make_result(Matrix::Constant(1, 1, total), needs_grad({&logits}),
                     [ln, logp, target, b](const Node& self) {
                       const Eigen::VectorXd mass = target.rowwise().sum();
                       Matrix g = mass.asDiagonal() * Matrix(logp.array().exp().matrix());
                       g -= target;
                       ln->accumulate(g * (self.grad(0, 0) / b));
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Index d = x.cols();
  if (d < 1) throw DimensionError("layer_norm: empty feature dimension");
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw DimensionError("layer_norm: gamma " + shape_string(gamma) + " / beta " +
                         shape_string(beta) + " do not fit " + shape_string(x));
  }
  const Matrix& v = x.value();
  Matrix xhat(v.rows(), d);
  Eigen::VectorXd inv_std(v.rows());
  for (Index i = 0; i < v.rows(); ++i) {
    const double mu = v.row(i).mean();
    const double var = (v.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (v.row(i).array() - mu) * inv_std(i);
  }
  Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return make_result(std::move(out), needs_grad({&x, &gamma, &beta}),
                     [xn, gn, bn, xhat, inv_std](const Node& self) {
                       const Matrix& g = self.grad;
                       if (gn->requires_grad) gn->accumulate(g.cwiseProduct(xhat).colwise().sum());
                       if (bn->requires_grad) bn->accumulate(g.colwise().sum());
                       if (!xn->requires_grad) return;
                       const double dd = static_cast<double>(xhat.cols());
                       Matrix dxhat = g.array().rowwise() * gn->value.row(0).array();
                       Matrix dx(xhat.rows(), xhat.cols());
                       for (Index i = 0; i < xhat.rows(); ++i) {
                         const double s1 = dxhat.row(i).sum();
                         const double s2 = dxhat.row(i).dot(xhat.row(i));
                         dx.row(i) = (dd * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2) *
                                     (inv_std(i) / dd);
                       }
                       xn->accumulate(dx);
                     });
}

Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: probability must lie in [0, 1)");
  if (mode == Mode::eval || p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double kept_scale = 1.0 / (1.0 - p);
  Matrix mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.rows(); ++i) {
    for (Index j = 0; j < mask.cols(); ++j) mask(i, j) = keep(rng) ? kept_scale : 0.0;
  }
  auto xn = x.node();
  return make_result(x.value().cwiseProduct(mask), needs_grad({&x}),
                     [xn, mask](const Node& self) { xn->accumulate(self.grad.cwiseProduct(mask)); });
}

// ---------------------------------------------------------------------------
// Structural operations

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts.front()) +
                           " vs " + shape_string(p));
    }
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::shared_ptr<Node>> nodes;
  Index at = 0;
  bool needs = false;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    nodes.push_back(p.node());
    needs = needs || p.requires_grad();
  }
  return make_result(std::move(out), needs, [nodes](const Node& self) {
    Index offset = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) n->accumulate(self.grad.middleRows(offset, n->value.rows()));
      offset += n->value.rows();
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front()) + " vs " +
                           shape_string(p));
    }
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::shared_ptr<Node>> nodes;
  Index at = 0;
  bool needs = false;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
    nodes.push_back(p.node());
    needs = needs || p.requires_grad();
  }
  return make_result(std::move(out), needs, [nodes](const Node& self) {
    Index offset = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) n->accumulate(self.grad.middleCols(offset, n->value.cols()));
      offset += n->value.cols();
    }
  });
}

Tensor slice_rows(const Tensor& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") outside " + shape_string(x));
  }
  auto xn = x.node();
  return make_result(x.value().middleRows(begin, count), needs_grad({&x}), [xn, begin](const Node& self) {
    Matrix g = Matrix::Zero(xn->value.rows(), xn->value.cols());
    g.middleRows(begin, self.grad.rows()) = self.grad;
    xn->accumulate(g);
  });
}

Tensor slice_cols(const Tensor& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                         ") outside " + shape_string(x));
  }
  auto xn = x.node();
  return make_result(x.value().middleCols(begin, count), needs_grad({&x}), [xn, begin](const Node& self) {
    Matrix g = Matrix::Zero(xn->value.rows(), xn->value.cols());
    g.middleCols(begin, self.grad.cols()) = self.grad;
    xn->accumulate(g);
  });
}

Tensor gather_rows(const Tensor& x, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " outside " +
                       shape_string(x));
    }
    out.row(static_cast<Index>(i)) = x.value().row(rows[i]);
  }
  auto xn = x.node();
  std::vector<Index> idx(rows.begin(), rows.end());
  return make_result(std::move(out), needs_grad({&x}), [xn, idx](const Node& self) {
    Matrix g = Matrix::Zero(xn->value.rows(), xn->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
    xn->accumulate(g);
  });
}

Tensor gather_cols(const Tensor& x, std::span<const Index> cols) {
  Matrix out(x.rows(), static_cast<Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (cols[j] < 0 || cols[j] >= x.cols()) {
      throw IndexError("gather_cols: column " + std::to_string(cols[j]) + " outside " +
                       shape_string(x));
    }
    out.col(static_cast<Index>(j)) = x.value().col(cols[j]);
  }
  auto xn = x.node();
  std::vector<Index> idx(cols.begin(), cols.end());
  return make_result(std::move(out), needs_grad({&x}), [xn, idx](const Node& self) {
    Matrix g = Matrix::Zero(xn->value.rows(), xn->value.cols());
    for (std::size_t j = 0; j < idx.size(); ++j) g.col(idx[j]) += self.grad.col(static_cast<Index>(j));
    xn->accumulate(g);
  });
}

Tensor reshape(const Tensor& x, Index rows, Index cols) {
  if (rows * cols != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(x) + " as [" +
                         std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
  auto xn = x.node();
  return make_result(std::move(out), needs_grad({&x}), [xn](const Node& self) {
    xn->accumulate(Eigen::Map<const Matrix>(self.grad.data(), xn->value.rows(), xn->value.cols()));
  });
}

Tensor row_dot(const Tensor& a, const Tensor& b) {
  require_same_shape("row_dot", a, b);
  Matrix out(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) out(i, 0) = a.value().row(i).dot(b.value().row(i));
  auto an = a.node();
  auto bn = b.node();
  return make_result(std::move(out), needs_grad({&a, &b}), [an, bn](const Node& self) {
    const auto g = self.grad.col(0).asDiagonal();
    if (an->requires_grad) an->accumulate(g * bn->value);
    if (bn->requires_grad) bn->accumulate(g * an->value);
  });
}

Tensor sum(const Tensor& x) {
  auto xn = x.node();
  return make_result(Matrix::Constant(1, 1, x.value().sum()), needs_grad({&x}), [xn](const Node& self) {
    xn->accumulate(Matrix::Constant(xn->value.rows(), xn->value.cols(), self.grad(0, 0)));
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

}  // namespace limit
