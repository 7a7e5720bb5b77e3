#include "limit/dataset.hpp"

#include "limit/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace limit {

std::vector<int> Dataset::present_classes() const {
  std::set<int> seen(labels.begin(), labels.end());
  return {seen.begin(), seen.end()};
}

std::map<int, std::vector<Index>> Dataset::rows_by_class() const {
  std::map<int, std::vector<Index>> out;
  for (std::size_t i = 0; i < labels.size(); ++i) out[labels[i]].push_back(static_cast<Index>(i));
  return out;
}

Dataset Dataset::subset(std::span<const Index> rows) const {
  Dataset out;
  out.num_classes = num_classes;
  out.features.resize(static_cast<Index>(rows.size()), dim());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Index>(i)) = features.row(rows[i]);
    out.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

void Dataset::validate() const {
  if (static_cast<Index>(labels.size()) != features.rows()) {
    throw ContractError("dataset: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(features.rows()) + " feature rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw ContractError("dataset: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(num_classes) + ")");
    }
  }
}

void SplitSpec::validate(int num_classes) const {
  if (base_class_count < 1 || way < 1 || shot < 1 || test_per_class < 1 || session_count < 0) {
    throw ContractError("split: base_class_count, way, shot and test_per_class must be >= 1");
  }
  if (base_class_count + way * session_count > num_classes) {
    throw ContractError("split: " + std::to_string(base_class_count) + " base + " +
                        std::to_string(way) + "x" + std::to_string(session_count) +
                        " incremental classes exceed the " + std::to_string(num_classes) +
                        " available");
  }
}

Dataset generate_gaussian_mixture(int num_classes, int dim, int per_class, double spread,
                                  std::uint64_t seed) {
  if (num_classes < 1 || dim < 1 || per_class < 1) {
    throw ContractError("generate_gaussian_mixture: counts must be >= 1");
  }
  if (spread < 0.0) throw ContractError("generate_gaussian_mixture: spread must be >= 0");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix means(num_classes, dim);
  for (Index i = 0; i < means.size(); ++i) means.data()[i] = normal(rng);

  Dataset ds;
  ds.num_classes = num_classes;
  ds.features.resize(static_cast<Index>(num_classes) * per_class, dim);
  ds.labels.reserve(static_cast<std::size_t>(num_classes) * per_class);
  Index row = 0;
  for (int c = 0; c < num_classes; ++c) {
    for (int k = 0; k < per_class; ++k, ++row) {
      for (Index j = 0; j < dim; ++j) ds.features(row, j) = means(c, j) + spread * normal(rng);
      ds.labels.push_back(c);
    }
  }
  return ds;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_field(std::string_view text, long line, const char* what) {
  text = trim(text);
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (text.empty() || ec != std::errc() || ptr != end) {
    throw ParseError("feature csv: non-numeric " + std::string(what) + " '" + std::string(text) + "'",
                     line);
  }
  return value;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

Dataset load_feature_csv(const std::filesystem::path& path, LabelMap* map) {
  std::ifstream in(path);
  if (!in) throw ParseError("feature csv: cannot open " + path.string(), 0);

  std::vector<long long> raw_labels;
  std::vector<std::vector<double>> rows;
  std::string text;
  long line = 0;
  std::size_t width = 0;
  while (std::getline(in, text)) {
    ++line;
    std::string_view view = trim(text);
    if (view.empty() || view.front() == '#') continue;
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = view.find(',', start);
      fields.push_back(view.substr(start, comma == std::string_view::npos ? view.npos : comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (fields.size() < 2) throw ParseError("feature csv: expected label and at least one feature", line);
    if (width == 0) {
      width = fields.size();
    } else if (fields.size() != width) {
      throw ParseError("feature csv: ragged row with " + std::to_string(fields.size() - 1) +
                           " features, expected " + std::to_string(width - 1),
                       line);
    }
    raw_labels.push_back(parse_field<long long>(fields[0], line, "label"));
    std::vector<double> values;
    values.reserve(fields.size() - 1);
    for (std::size_t j = 1; j < fields.size(); ++j) values.push_back(parse_field<double>(fields[j], line, "feature"));
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw ParseError("feature csv: no data rows in " + path.string(), line);

  std::vector<long long> distinct(raw_labels);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

  Dataset ds;
  ds.num_classes = static_cast<int>(distinct.size());
  ds.features.resize(static_cast<Index>(rows.size()), static_cast<Index>(width - 1));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      ds.features(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    }
    const auto pos = std::lower_bound(distinct.begin(), distinct.end(), raw_labels[i]);
    ds.labels.push_back(static_cast<int>(pos - distinct.begin()));
  }
  if (map != nullptr) map->original = std::move(distinct);
  return ds;
}

void save_feature_csv(const std::filesystem::path& path, const Dataset& ds, const LabelMap* map,
                      const std::string& header) {
  ds.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (!header.empty()) {
    std::istringstream lines(header);
    std::string l;
    while (std::getline(lines, l)) out << "# " << l << '\n';
  }
  for (Index i = 0; i < ds.size(); ++i) {
    const int y = ds.labels[static_cast<std::size_t>(i)];
    if (map != nullptr) {
      out << map->original.at(static_cast<std::size_t>(y));
    } else {
      out << y;
    }
    for (Index j = 0; j < ds.dim(); ++j) out << ',' << format_double(ds.features(i, j));
    out << '\n';
  }
}

void save_label_map(const std::filesystem::path& path, const LabelMap& map, std::uint64_t seed) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["seed"] = seed;
  j["original_labels"] = map.original;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

LabelMap load_label_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("label map: cannot open " + path.string(), 0);
  const auto j = nlohmann::json::parse(in);
  return LabelMap{j.at("original_labels").get<std::vector<long long>>()};
}

SessionStream split_sessions(const Dataset& ds, const SplitSpec& spec) {
  ds.validate();
  spec.validate(ds.num_classes);
  Rng rng(spec.seed);

  std::vector<int> classes(static_cast<std::size_t>(ds.num_classes));
  std::iota(classes.begin(), classes.end(), 0);
  std::shuffle(classes.begin(), classes.end(), rng);
  const auto used = static_cast<std::size_t>(spec.base_class_count + spec.way * spec.session_count);
  classes.resize(used);

  SessionStream stream;
  stream.class_order = classes;
  stream.session_classes.emplace_back(classes.begin(), classes.begin() + spec.base_class_count);
  for (int b = 0; b < spec.session_count; ++b) {
    const auto first = classes.begin() + spec.base_class_count + b * spec.way;
    stream.session_classes.emplace_back(first, first + spec.way);
  }

  const auto by_class = ds.rows_by_class();
  std::map<int, std::vector<Index>> train_rows;
  std::map<int, std::vector<Index>> test_rows;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const int c = classes[k];
    const auto it = by_class.find(c);
    const std::size_t have = it == by_class.end() ? 0 : it->second.size();
    const auto need = static_cast<std::size_t>(spec.shot + spec.test_per_class);
    if (have < need) {
      throw CapacityError("split: class " + std::to_string(c) + " has " + std::to_string(have) +
                          " instances, needs at least " + std::to_string(need));
    }
    std::vector<Index> rows = it->second;
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto tests = static_cast<std::ptrdiff_t>(spec.test_per_class);
    test_rows[c].assign(rows.begin(), rows.begin() + tests);
    const bool is_base = k < static_cast<std::size_t>(spec.base_class_count);
    const auto train_end = is_base ? rows.end() : rows.begin() + tests + spec.shot;
    train_rows[c].assign(rows.begin() + tests, train_end);
  }

  auto gather = [&](const std::vector<int>& group, const std::map<int, std::vector<Index>>& pool,
                    std::vector<Index>& into) {
    for (int c : group) into.insert(into.end(), pool.at(c).begin(), pool.at(c).end());
  };

  std::vector<Index> rows;
  gather(stream.session_classes[0], train_rows, rows);
  stream.base = ds.subset(rows);

  std::vector<Index> tests;
  for (std::size_t b = 0; b < stream.session_classes.size(); ++b) {
    if (b > 0) {
      rows.clear();
      gather(stream.session_classes[b], train_rows, rows);
      stream.sessions.push_back(ds.subset(rows));
    }
    gather(stream.session_classes[b], test_rows, tests);
    stream.test_sets.push_back(ds.subset(tests));
  }
  return stream;
}

}  // namespace limit
