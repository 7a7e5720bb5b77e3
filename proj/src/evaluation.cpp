#include "limit/evaluation.hpp"

#include "limit/errors.hpp"
#include "limit/seeding.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <numeric>
#include <set>
#include <thread>
#include <unordered_map>

namespace limit {

double performance_drop(std::span<const double> session_acc) {
  if (session_acc.empty()) throw ContractError("performance_drop: no sessions");
  return session_acc.front() - session_acc.back();
}

double harmonic_mean(double base_acc, double inc_acc) {
  if (base_acc + inc_acc <= 0.0) return 0.0;
  return 2.0 * base_acc * inc_acc / (base_acc + inc_acc);
}

SplitAccuracy split_accuracy(const ConfusionMatrix& confusion, int base_class_count) {
  if (confusion.rows() != confusion.cols()) throw DimensionError("split_accuracy: confusion matrix is not square");
  if (base_class_count < 0 || base_class_count > confusion.rows()) {
    throw ContractError("split_accuracy: base class count outside the confusion matrix");
  }
  auto accuracy = [&](Index begin, Index end) {
    std::int64_t hits = 0;
    std::int64_t total = 0;
    for (Index i = begin; i < end; ++i) {
      hits += confusion(i, i);
      total += confusion.row(i).sum();
    }
    return total == 0 ? 0.0 : 100.0 * static_cast<double>(hits) / static_cast<double>(total);
  };
  SplitAccuracy out;
  out.base_acc = accuracy(0, base_class_count);
  out.inc_acc = accuracy(base_class_count, confusion.rows());
  out.harmonic = harmonic_mean(out.base_acc, out.inc_acc);
  return out;
}

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, int num_classes) {
  if (preds.size() != labels.size()) throw DimensionError("confusion_matrix: predictions and labels differ in length");
  ConfusionMatrix m = ConfusionMatrix::Zero(num_classes, num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes || preds[i] < 0 || preds[i] >= num_classes) {
      throw IndexError("confusion_matrix: class index outside [0, " + std::to_string(num_classes) + ")");
    }
    ++m(labels[i], preds[i]);
  }
  return m;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["kind"] = "limit-eval-report";
  j["method"] = method;
  j["seed"] = seed;
  j["session_acc"] = session_acc;
  j["pd"] = pd;
  j["base_acc"] = base_acc;
  j["inc_acc"] = inc_acc;
  j["harmonic"] = harmonic;
  j["base_class_count"] = base_class_count;
  j["class_order"] = class_order;
  j["per_session_class_counts"] = per_session_class_counts;
  j["per_session_test_counts"] = per_session_test_counts;
  auto rows = nlohmann::json::array();
  for (Index i = 0; i < confusion.rows(); ++i) {
    std::vector<std::int64_t> row(confusion.row(i).data(), confusion.row(i).data() + confusion.cols());
    rows.push_back(row);
  }
  j["confusion"] = rows;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != kSchemaVersion) {
    throw ParseError("eval report: unsupported schema_version " + j.at("schema_version").dump(), 0);
  }
  EvalReport r;
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.session_acc = j.at("session_acc").get<std::vector<double>>();
  r.pd = j.at("pd").get<double>();
  r.base_acc = j.at("base_acc").get<double>();
  r.inc_acc = j.at("inc_acc").get<double>();
  r.harmonic = j.at("harmonic").get<double>();
  r.base_class_count = j.at("base_class_count").get<int>();
  r.class_order = j.at("class_order").get<std::vector<int>>();
  r.per_session_class_counts = j.at("per_session_class_counts").get<std::vector<int>>();
  r.per_session_test_counts = j.at("per_session_test_counts").get<std::vector<long>>();
  const auto rows = j.at("confusion").get<std::vector<std::vector<std::int64_t>>>();
  r.confusion = ConfusionMatrix::Zero(static_cast<Index>(rows.size()), static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw ParseError("eval report: confusion matrix is not square", 0);
    for (std::size_t k = 0; k < rows[i].size(); ++k) r.confusion(static_cast<Index>(i), static_cast<Index>(k)) = rows[i][k];
  }
  return r;
}

int resolve_threads(int requested) {
  int n = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  n = std::max(n, 1);
  if (const char* cap = std::getenv("LIMIT_NUM_THREADS")) {
    const int limit = std::atoi(cap);
    if (limit >= 1) n = std::min(n, limit);
  }
  return n;
}

Matrix score(const ModelState& state, const Classifier& classifier, const Matrix& features,
             bool use_calibration, int threads) {
  if (features.cols() != state.net.input_dim()) {
    throw DimensionError("score: features have " + std::to_string(features.cols()) +
                         " columns, the embedding expects " + std::to_string(state.net.input_dim()));
  }
  constexpr Index kChunk = 128;
  const Index n = features.rows();
  const Index chunks = (n + kChunk - 1) / kChunk;
  Matrix out(n, classifier.size());
  const int workers = static_cast<int>(std::min<Index>(resolve_threads(threads), std::max<Index>(chunks, 1)));

  auto run = [&](int worker) {
    NoGradGuard no_grad;
    Rng unused(0);
    for (Index c = worker; c < chunks; c += workers) {
      const Index begin = c * kChunk;
      const Index count = std::min(kChunk, n - begin);
      const Tensor emb = embed(state.net, Tensor(features.middleRows(begin, count)));
      const Tensor logits = use_calibration
                                ? calibrated_logits(calibrate(classifier, emb, state.calibration, Mode::eval, unused))
                                : raw_logits(classifier, emb);
      out.middleRows(begin, count) = logits.value();
    }
  };

  if (workers <= 1) {
    run(0);
    return out;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        run(w);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

namespace {

std::vector<int> label_columns(const Classifier& w, std::span<const int> labels) {
  std::unordered_map<int, int> column;
  for (std::size_t j = 0; j < w.class_ids.size(); ++j) column[w.class_ids[j]] = static_cast<int>(j);
  std::vector<int> out;
  out.reserve(labels.size());
  for (int y : labels) {
    const auto it = column.find(y);
    if (it == column.end()) throw IndexError("evaluation: test label " + std::to_string(y) + " has no classifier column");
    out.push_back(it->second);
  }
  return out;
}

std::string method_name(const EvalOptions& options) {
  switch (options.learner) {
    case Learner::finetune:
      return "finetune";
    case Learner::kd:
      return "kd";
    case Learner::prototype:
      break;
  }
  return options.use_calibration ? "limit" : "proto";
}

}  // namespace

EvalReport run_incremental(const ModelState& state, const SessionStream& stream, const EvalOptions& options,
                           ModelState* final_state) {
  if (stream.base.dim() != state.net.input_dim()) {
    throw DimensionError("run_incremental: stream has " + std::to_string(stream.base.dim()) +
                         " features, model expects " + std::to_string(state.net.input_dim()));
  }
  {
    const std::set<int> model_classes(state.classifier.class_ids.begin(), state.classifier.class_ids.end());
    const std::set<int> base_classes(stream.session_classes.front().begin(), stream.session_classes.front().end());
    if (model_classes != base_classes) {
      throw DimensionError("run_incremental: classifier classes do not match the base session");
    }
  }

  const bool prototype = options.learner == Learner::prototype;
  const bool calibrated = prototype && options.use_calibration;
  Rng rng(derive_seed(options.train.seed, salt::finetune));

  EvalReport report;
  report.method = method_name(options);
  report.seed = options.train.seed;
  report.base_class_count = stream.base_class_count();

  ModelState current = state.clone();
  std::vector<int> last_preds;
  std::vector<int> last_labels;
  for (std::size_t b = 0; b < stream.test_sets.size(); ++b) {
    if (b > 0) {
      const std::vector<int>& fresh = stream.session_classes[b];
      const Dataset& session = stream.sessions[b - 1];
      if (prototype) {
        NoGradGuard no_grad;
        current.classifier = augment_classifier(current.classifier, compute_prototypes(session, current.net), fresh);
      } else {
        const ModelState teacher = current.clone();
        current = finetune_incremental(current, session, fresh, options.train, rng,
                                       options.learner == Learner::kd ? &teacher : nullptr);
      }
    }
    const Dataset& test = stream.test_sets[b];
    const std::vector<int> columns = label_columns(current.classifier, test.labels);
    const Matrix logits = score(current, current.classifier, test.features, calibrated, options.threads);
    report.session_acc.push_back(top1_accuracy(logits, columns));
    report.per_session_class_counts.push_back(static_cast<int>(current.classifier.size()));
    report.per_session_test_counts.push_back(static_cast<long>(test.size()));
    last_preds = argmax_rows(logits);
    last_labels = columns;
  }

  report.pd = performance_drop(report.session_acc);
  report.class_order = current.classifier.class_ids;
  report.confusion = confusion_matrix(last_preds, last_labels, static_cast<int>(current.classifier.size()));
  const SplitAccuracy split = split_accuracy(report.confusion, report.base_class_count);
  report.base_acc = split.base_acc;
  report.inc_acc = split.inc_acc;
  report.harmonic = split.harmonic;
  if (final_state != nullptr) *final_state = std::move(current);
  return report;
}

std::vector<TopK> top_k_probabilities(const Matrix& logits, std::span<const int> class_ids, int k) {
  if (static_cast<Index>(class_ids.size()) != logits.cols()) {
    throw DimensionError("top_k_probabilities: class ids do not match logit columns");
  }
  const Matrix probs = softmax(Tensor(logits)).value();
  const auto keep = static_cast<std::size_t>(std::clamp<Index>(k, 0, logits.cols()));
  std::vector<TopK> out;
  out.reserve(static_cast<std::size_t>(logits.rows()));
  std::vector<int> order(static_cast<std::size_t>(logits.cols()));
  for (Index i = 0; i < probs.rows(); ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs(i, a) > probs(i, b); });
    TopK row;
    for (std::size_t r = 0; r < keep; ++r) {
      row.classes.push_back(class_ids[static_cast<std::size_t>(order[r])]);
      row.probabilities.push_back(probs(i, order[r]));
    }
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace limit
