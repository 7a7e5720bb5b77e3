#pragma once

#include "limit/tensor.hpp"

#include <filesystem>
#include <map>
#include <vector>

namespace limit {

/// Labeled feature vectors. Rows of `features` align with `labels`.
///
/// Datasets produced by generation or loading have every class in
/// [0, num_classes) present. Subsets carved out of a session stream keep the
/// global num_classes so that labels stay comparable across sessions.
struct Dataset {
  Matrix features;
  std::vector<int> labels;
  int num_classes = 0;

  Index size() const { return features.rows(); }
  Index dim() const { return features.cols(); }
  /// Sorted distinct labels that occur.
  std::vector<int> present_classes() const;
  /// Row indices per label, in row order.
  std::map<int, std::vector<Index>> rows_by_class() const;
  /// New dataset made of the listed rows, in the listed order.
  Dataset subset(std::span<const Index> rows) const;
  /// Throws ContractError when shapes disagree or a label is out of range.
  void validate() const;
};

/// Original label values of a loaded CSV, indexed by dense label.
struct LabelMap {
  std::vector<long long> original;
};

struct SplitSpec {
  int base_class_count = 60;
  int way = 5;
  int shot = 5;
  int session_count = 8;
  int test_per_class = 15;
  std::uint64_t seed = 0;

  void validate(int num_classes) const;
};

/// One base session and B few-shot sessions with disjoint label spaces.
///
/// session_classes[0] is Y0 and session_classes[b] is Yb. test_sets[b] holds
/// the held-out instances of every class in Y0 u ... u Yb.
struct SessionStream {
  Dataset base;
  std::vector<Dataset> sessions;
  std::vector<Dataset> test_sets;
  std::vector<std::vector<int>> session_classes;
  /// All classes in the order they become visible: Y0 then Y1, ...
  std::vector<int> class_order;
  int base_class_count() const { return static_cast<int>(session_classes.front().size()); }
  int session_count() const { return static_cast<int>(sessions.size()); }
};

/// Class means drawn from N(0, I_dim); instances are mean + spread * N(0, I_dim).
Dataset generate_gaussian_mixture(int num_classes, int dim, int per_class, double spread,
                                  std::uint64_t seed);

/// Reads `label,f1,...,fD` rows. Lines that are blank or start with '#' are skipped.
/// Labels are remapped to 0..C-1 in ascending order of the original value.
Dataset load_feature_csv(const std::filesystem::path& path, LabelMap* map = nullptr);
/// Writes features with round-trip precision so that loading reproduces them exactly.
void save_feature_csv(const std::filesystem::path& path, const Dataset& ds,
                      const LabelMap* map = nullptr, const std::string& header = {});
void save_label_map(const std::filesystem::path& path, const LabelMap& map, std::uint64_t seed = 0);
LabelMap load_label_map(const std::filesystem::path& path);

SessionStream split_sessions(const Dataset& ds, const SplitSpec& spec);

}  // namespace limit
