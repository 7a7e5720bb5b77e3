#pragma once

// Rank-2 dense tensors with define-by-run reverse-mode differentiation.
//
// Every tensor is a matrix (scalars are 1x1, vectors are 1xn or nx1). Values
// are stored row-major in 64-bit floats. Operations whose inputs require a
// gradient are appended to the calling thread's Tape; backward() walks the
// tape in reverse. Parameters are leaves and are never owned by the tape, so
// Tape::clear() releases the recorded graph while the parameters survive.

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace limit {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rng = std::mt19937_64;

enum class Mode { train, eval };
enum class Axis { rows, cols };

namespace detail {

struct Node {
  Matrix value;
  Matrix grad;  // empty until something is accumulated
  bool requires_grad = false;
  bool leaf = true;
  std::function<void(const Node&)> backward;  // propagates this->grad into the parents

  void accumulate(const Matrix& g);
};

}  // namespace detail

class Tensor {
 public:
  Tensor();
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor row(std::initializer_list<double> values);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const Matrix& value() const { return node_->value; }
  /// In-place access for optimizers and finite differences; never use on recorded nodes.
  Matrix& mutable_value() { return node_->value; }

  bool has_grad() const { return node_->grad.size() != 0; }
  /// Gradient buffer; zeros of the value shape if nothing was accumulated yet.
  Matrix grad() const;
  void zero_grad() { node_->grad.resize(0, 0); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return node_->leaf; }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }
  Index size() const { return node_->value.size(); }
  double item() const;

  /// Fresh leaf holding a copy of the value, detached from any graph.
  Tensor detach() const;
  /// Deep copy including requires_grad; the copy shares no storage.
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend Tensor make_result(Matrix, bool, std::function<void(const detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

std::string shape_string(const Tensor& t);

/// Ordered record of the operations executed since the last clear().
/// Nodes appear after all of their inputs, so reverse order is a valid
/// reverse-topological order.
class Tape {
 public:
  /// The tape of the calling thread.
  static Tape& current();

  void record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Disables recording on the calling thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Populates gradients of every requires_grad tensor reachable from `loss`.
/// Leaf gradients accumulate across calls until zero_grad().
void backward(const Tensor& loss);

// Operations. All shape mismatches throw DimensionError; the only broadcast is
// add_row_bias.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
/// Multiplies row i of x by s(i, 0).
Tensor scale_rows(const Tensor& x, const Tensor& s);
Tensor relu(const Tensor& x);

Tensor softmax(const Tensor& logits, Axis axis = Axis::cols);
Tensor log_softmax(const Tensor& logits);
/// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Mean over rows of -sum_k target(k) * log softmax(logits)(k); target is constant.
Tensor soft_cross_entropy(const Tensor& logits, const Matrix& target);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Inverted dropout: Bernoulli keep mask scaled by 1/(1-p) in train mode, identity in eval.
Tensor dropout(const Tensor& x, double p, Mode mode, Rng& rng);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, Index begin, Index count);
Tensor slice_cols(const Tensor& x, Index begin, Index count);
Tensor gather_rows(const Tensor& x, std::span<const Index> rows);
Tensor gather_cols(const Tensor& x, std::span<const Index> cols);
Tensor reshape(const Tensor& x, Index rows, Index cols);
/// Row-wise inner product of two equally shaped matrices, m x 1.
Tensor row_dot(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }

}  // namespace limit
