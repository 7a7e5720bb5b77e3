#pragma once

#include "limit/dataset.hpp"

#include <vector>

namespace limit {

struct FakeTaskSpec {
  int phases = 2;       // C
  int way = 5;          // fake-way
  int shot = 5;         // fake-shot
  int query_shot = 10;  // instances per seen class in every query set

  void validate(int base_class_count) const;
};

/// Rows of the base dataset together with their labels.
struct InstanceSet {
  std::vector<Index> rows;
  std::vector<int> labels;

  std::size_t size() const { return rows.size(); }
};

/// One sampled sequence of fake-incremental phases drawn from the base session.
struct FakeTaskSequence {
  std::vector<int> fake_base_classes;               // sorted ascending
  std::vector<std::vector<int>> phase_classes;      // one entry per phase
  std::vector<InstanceSet> supports;                // way x shot per phase
  std::vector<InstanceSet> queries;                 // query_shot per seen class per phase

  int phases() const { return static_cast<int>(phase_classes.size()); }
  /// Fake-base classes followed by the classes of phases 1..phase (1-based).
  std::vector<int> seen_classes(int phase) const;
};

/// Splits the base label space into fake-base and fake-incremental classes and
/// draws support and query sets for every phase. Sampling is without
/// replacement within a class; queries of a phase never reuse that phase's
/// support rows.
FakeTaskSequence sample_fake_tasks(const Dataset& base, const FakeTaskSpec& spec, Rng& rng);

/// k distinct values from [0, n), in sampled order.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng);

}  // namespace limit
