#pragma once

#include "limit/dataset.hpp"
#include "limit/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace limit {

using ConfusionMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Column of the row maximum; ties go to the lowest column.
template <typename Derived>
std::vector<int> argmax_rows(const Eigen::MatrixBase<Derived>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()), 0);
  for (Index i = 0; i < logits.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < logits.cols(); ++j) {
      if (logits(i, j) > logits(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

/// Percentage of rows whose argmax equals the label column.
template <typename Derived>
double top1_accuracy(const Eigen::MatrixBase<Derived>& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows()) {
    throw std::invalid_argument("top1_accuracy: label count does not match logit rows");
  }
  if (labels.empty()) return 0.0;
  const auto preds = argmax_rows(logits);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// First session accuracy minus last session accuracy.
double performance_drop(std::span<const double> session_acc);

double harmonic_mean(double base_acc, double inc_acc);

struct SplitAccuracy {
  double base_acc = 0.0;
  double inc_acc = 0.0;
  double harmonic = 0.0;
};

/// Rows/columns [0, base_class_count) are base classes, the rest incremental.
SplitAccuracy split_accuracy(const ConfusionMatrix& confusion, int base_class_count);

/// confusion(true, predicted) counts.
ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, int num_classes);

enum class Learner { prototype, finetune, kd };

struct EvalOptions {
  Learner learner = Learner::prototype;
  bool use_calibration = true;
  /// Worker threads for scoring; 0 picks hardware concurrency. LIMIT_NUM_THREADS caps it.
  int threads = 0;
  /// Used by the finetune and kd learners.
  TrainConfig train;
};

struct EvalReport {
  static constexpr int kSchemaVersion = 1;

  std::string method;
  std::uint64_t seed = 0;
  std::vector<double> session_acc;  // percent, sessions 0..B
  double pd = 0.0;
  double base_acc = 0.0;
  double inc_acc = 0.0;
  double harmonic = 0.0;
  /// Over the last session's test set; axes follow class_order.
  ConfusionMatrix confusion;
  std::vector<int> class_order;
  std::vector<int> per_session_class_counts;  // cumulative seen classes
  std::vector<long> per_session_test_counts;
  int base_class_count = 0;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  bool operator==(const EvalReport&) const = default;
};

int resolve_threads(int requested);

/// Scores `features` against the classifier, optionally through calibration in
/// eval mode. Rows are processed in fixed-size chunks across threads; results
/// do not depend on the thread count.
Matrix score(const ModelState& state, const Classifier& classifier, const Matrix& features,
             bool use_calibration, int threads = 0);

/// Runs the incremental protocol: evaluate the base session, then for every
/// session extend the classifier (prototypes or finetuning) and evaluate on all
/// classes seen so far. The input state is never modified.
EvalReport run_incremental(const ModelState& state, const SessionStream& stream, const EvalOptions& options,
                           ModelState* final_state = nullptr);

struct TopK {
  std::vector<int> classes;
  std::vector<double> probabilities;
};

/// Highest softmax probabilities per row, mapped to class ids.
std::vector<TopK> top_k_probabilities(const Matrix& logits, std::span<const int> class_ids, int k);

}  // namespace limit
