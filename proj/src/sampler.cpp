#include "limit/sampler.hpp"

#include "limit/errors.hpp"

#include <algorithm>
#include <numeric>

namespace limit {

void FakeTaskSpec::validate(int base_class_count) const {
  if (phases < 1 || way < 1 || shot < 1 || query_shot < 1) {
    throw ContractError("fake tasks: phases, way, shot and query_shot must be >= 1");
  }
  if (way * phases >= base_class_count) {
    throw ContractError("fake tasks: " + std::to_string(way) + "-way x " + std::to_string(phases) +
                        " phases leaves no fake-base class among " +
                        std::to_string(base_class_count) + " base classes");
  }
}

std::vector<int> FakeTaskSequence::seen_classes(int phase) const {
  std::vector<int> out = fake_base_classes;
  for (int c = 0; c < phase; ++c) {
    out.insert(out.end(), phase_classes[c].begin(), phase_classes[c].end());
  }
  return out;
}

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  return pool;
}

FakeTaskSequence sample_fake_tasks(const Dataset& base, const FakeTaskSpec& spec, Rng& rng) {
  const auto by_class = base.rows_by_class();
  std::vector<int> classes;
  for (const auto& [c, rows] : by_class) classes.push_back(c);
  spec.validate(static_cast<int>(classes.size()));

  const auto need = static_cast<std::size_t>(spec.shot + spec.query_shot);
  for (const auto& [c, rows] : by_class) {
    if (rows.size() < need) {
      throw CapacityError("fake tasks: class " + std::to_string(c) + " has " +
                          std::to_string(rows.size()) + " instances, needs " + std::to_string(need));
    }
  }

  std::shuffle(classes.begin(), classes.end(), rng);
  const auto unseen = static_cast<std::size_t>(spec.way * spec.phases);

  FakeTaskSequence seq;
  seq.fake_base_classes.assign(classes.begin() + static_cast<std::ptrdiff_t>(unseen), classes.end());
  std::sort(seq.fake_base_classes.begin(), seq.fake_base_classes.end());
  for (int c = 0; c < spec.phases; ++c) {
    const auto first = classes.begin() + c * spec.way;
    seq.phase_classes.emplace_back(first, first + spec.way);
  }

  for (int c = 0; c < spec.phases; ++c) {
    InstanceSet support;
    std::map<int, std::vector<Index>> remaining;
    for (int y : seq.phase_classes[c]) {
      const auto& rows = by_class.at(y);
      std::vector<bool> taken(rows.size(), false);
      for (std::size_t pos : sample_without_replacement(rows.size(), static_cast<std::size_t>(spec.shot), rng)) {
        support.rows.push_back(rows[pos]);
        support.labels.push_back(y);
        taken[pos] = true;
      }
      auto& rest = remaining[y];
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!taken[i]) rest.push_back(rows[i]);
      }
    }

    InstanceSet query;
    for (int y : seq.seen_classes(c + 1)) {
      const auto it = remaining.find(y);
      const auto& pool = it != remaining.end() ? it->second : by_class.at(y);
      for (std::size_t pos : sample_without_replacement(pool.size(), static_cast<std::size_t>(spec.query_shot), rng)) {
        query.rows.push_back(pool[pos]);
        query.labels.push_back(y);
      }
    }
    seq.supports.push_back(std::move(support));
    seq.queries.push_back(std::move(query));
  }
  return seq;
}

}  // namespace limit
