#pragma once

#include "limit/dataset.hpp"
#include "limit/evaluation.hpp"
#include "limit/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace limit {

inline constexpr int kConfigSchemaVersion = 1;

struct SynthConfig {
  int num_classes = 100;
  int dim = 64;
  int per_class = 60;
  double spread = 1.0;
};

struct DatasetConfig {
  std::string source = "synth";  // synth | csv
  SynthConfig synth;
  std::filesystem::path csv_path;
  SplitSpec split;
};

struct EvalConfig {
  bool use_calibration = true;
  int threads = 0;
  int top_k = 5;
};

struct AblateConfig {
  int trials = 5;
  int meta1_phases = 1;
  int metac_phases = 2;
};

/// Everything a command needs. One master seed drives every random stream.
struct RunConfig {
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  AblateConfig ablate;
  std::string method = "limit";  // limit | proto | finetune | kd
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 0;

  /// Copies the master seed into the split and training sections.
  void propagate_seed();
  /// Throws ConfigError with the dotted path of the first bad field.
  void validate() const;

  nlohmann::json to_json() const;
  /// Unknown keys and wrongly typed values are ConfigErrors. Relative paths
  /// resolve against `base_dir`.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
};

/// Applies `a.b.c=value` to a JSON document. The value is parsed as JSON when
/// possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Defaults, overlaid with the file (if any), overlaid with the overrides.
RunConfig load_run_config(const std::filesystem::path& path, std::span<const std::string> overrides);

Learner learner_for(const std::string& method);

}  // namespace limit
