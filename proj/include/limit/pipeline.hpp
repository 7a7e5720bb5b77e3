#pragma once

#include "limit/config.hpp"
#include "limit/evaluation.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace limit {

Dataset load_dataset(const RunConfig& cfg, LabelMap* map = nullptr);
SessionStream build_stream(const RunConfig& cfg, const Dataset& ds);
/// Untrained model sized for the stream's features and base classes.
ModelState initial_state(const RunConfig& cfg, const SessionStream& stream);
EvalOptions eval_options(const RunConfig& cfg);

/// TrainConfig for a meta-training run with the given phase count. With
/// `calibration_only`, the embedding and classifier stay frozen.
TrainConfig meta_variant(const TrainConfig& base, int phases, bool calibration_only);

/// Pretraining followed, when enabled, by base-prototype replacement.
ModelState pretrain_stage(const RunConfig& cfg, const SessionStream& stream, const TrainConfig& train,
                          const LogSink& log = {});

struct PipelineResult {
  ModelState pretrained;
  ModelState meta_trained;
  EvalReport report;
};

/// synth/load -> split -> pretrain -> meta-train -> evaluate, all from cfg.
PipelineResult run_pipeline(const RunConfig& cfg);

struct AblationRow {
  std::string name;
  bool prototype = false;
  bool calibration = false;
  bool meta_1 = false;
  bool meta_c = false;
  std::vector<double> session_acc;  // trial means, percent
  double pd = 0.0;
  double old_acc = 0.0;  // base-class accuracy after the last session
  double inc_acc = 0.0;

  bool operator==(const AblationRow&) const = default;
};

struct AblationReport {
  static constexpr int kSchemaVersion = 1;

  std::uint64_t seed = 0;
  int trials = 0;
  std::vector<AblationRow> rows;  // finetune, prototype, prototype+calibration, meta-1, meta-C

  const AblationRow& row(const std::string& name) const;

  nlohmann::json to_json() const;
  static AblationReport from_json(const nlohmann::json& j);
  std::string to_csv() const;
  static AblationReport from_csv(const std::string& text);
  /// Human-readable grid with two-decimal accuracies.
  std::string to_table() const;

  bool operator==(const AblationReport&) const = default;
};

/// Component ablation grid. Trial t reseeds everything from derive_seed(cfg.seed, t).
/// When `pretrained` is given, every trial reuses it and the configured
/// stream, and only the training seeds vary.
AblationReport run_ablation(const RunConfig& cfg, const ModelState* pretrained = nullptr);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace limit
