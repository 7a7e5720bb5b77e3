#include "limit/pipeline.hpp"

#include "limit/errors.hpp"
#include "limit/seeding.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

namespace limit {

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

Dataset load_dataset(const RunConfig& cfg, LabelMap* map) {
  if (cfg.dataset.source == "csv") return load_feature_csv(cfg.dataset.csv_path, map);
  const SynthConfig& s = cfg.dataset.synth;
  Dataset ds = generate_gaussian_mixture(s.num_classes, s.dim, s.per_class, s.spread, derive_seed(cfg.seed, salt::synth));
  if (map != nullptr) {
    map->original.clear();
    for (int c = 0; c < s.num_classes; ++c) map->original.push_back(c);
  }
  return ds;
}

SessionStream build_stream(const RunConfig& cfg, const Dataset& ds) {
  SplitSpec spec = cfg.dataset.split;
  spec.seed = derive_seed(cfg.seed, salt::split);
  return split_sessions(ds, spec);
}

ModelState initial_state(const RunConfig& cfg, const SessionStream& stream) {
  Rng rng(derive_seed(cfg.seed, salt::init));
  return init_model(cfg.model, static_cast<int>(stream.base.dim()), stream.session_classes.front(), rng);
}

EvalOptions eval_options(const RunConfig& cfg) {
  EvalOptions o;
  o.learner = learner_for(cfg.method);
  o.use_calibration = cfg.method == "limit" && cfg.eval.use_calibration;
  o.threads = cfg.eval.threads;
  o.train = cfg.train;
  o.train.seed = cfg.seed;
  return o;
}

TrainConfig meta_variant(const TrainConfig& base, int phases, bool calibration_only) {
  TrainConfig t = base;
  t.meta.fake.phases = phases;
  t.meta.use_calibration = true;
  if (calibration_only) {
    t.meta.train_embedding = false;
    t.meta.train_classifier = false;
    t.meta.train_calibration = true;
  }
  return t;
}

ModelState pretrain_stage(const RunConfig& cfg, const SessionStream& stream, const TrainConfig& train,
                          const LogSink& log) {
  ModelState state = pretrain(initial_state(cfg, stream), stream.base, train, log);
  if (train.base_prototypes) state = prototype_base_classifier(state, stream.base);
  return state;
}

PipelineResult run_pipeline(const RunConfig& cfg) {
  const Dataset ds = load_dataset(cfg);
  const SessionStream stream = build_stream(cfg, ds);
  TrainConfig train = cfg.train;
  train.seed = cfg.seed;
  PipelineResult r;
  r.pretrained = pretrain_stage(cfg, stream, train);
  r.meta_trained = meta_train(r.pretrained, stream.base, train);
  r.report = run_incremental(r.meta_trained, stream, eval_options(cfg));
  return r;
}

const AblationRow& AblationReport::row(const std::string& name) const {
  for (const auto& r : rows) {
    if (r.name == name) return r;
  }
  throw ContractError("ablation report: no row named " + name);
}

namespace {

struct Accumulator {
  std::vector<double> session_acc;
  double old_acc = 0.0;
  double inc_acc = 0.0;

  void add(const EvalReport& r) {
    if (session_acc.empty()) session_acc.assign(r.session_acc.size(), 0.0);
    for (std::size_t b = 0; b < r.session_acc.size(); ++b) session_acc[b] += r.session_acc[b];
    old_acc += r.base_acc;
    inc_acc += r.inc_acc;
  }
};

}  // namespace

AblationReport run_ablation(const RunConfig& cfg, const ModelState* pretrained) {
  struct Variant {
    const char* name;
    bool prototype, calibration, meta_1, meta_c;
  };
  const Variant variants[] = {
      {"finetune", false, false, false, false},
      {"prototype", true, false, false, false},
      {"prototype+calibration", true, true, false, false},
      {"meta-1", true, true, true, false},
      {"meta-C", true, true, false, true},
  };
  std::vector<Accumulator> acc(std::size(variants));

  for (int t = 0; t < cfg.ablate.trials; ++t) {
    RunConfig trial = cfg;
    trial.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(t));
    trial.train.seed = trial.seed;

    RunConfig data_cfg = pretrained != nullptr ? cfg : trial;
    const SessionStream stream = build_stream(data_cfg, load_dataset(data_cfg));
    const ModelState trained =
        pretrained != nullptr ? pretrained->clone() : pretrain(initial_state(trial, stream), stream.base, trial.train);
    const ModelState base_state =
        trial.train.base_prototypes ? prototype_base_classifier(trained, stream.base) : trained.clone();

    EvalOptions options;
    options.threads = cfg.eval.threads;
    options.train = trial.train;

    options.learner = Learner::finetune;
    options.use_calibration = false;
    acc[0].add(run_incremental(trained, stream, options));

    options.learner = Learner::prototype;
    acc[1].add(run_incremental(base_state, stream, options));

    options.use_calibration = true;
    const TrainConfig calib = meta_variant(trial.train, cfg.ablate.meta1_phases, true);
    acc[2].add(run_incremental(meta_train(base_state, stream.base, calib), stream, options));

    const TrainConfig meta1 = meta_variant(trial.train, cfg.ablate.meta1_phases, false);
    acc[3].add(run_incremental(meta_train(base_state, stream.base, meta1), stream, options));

    const TrainConfig metac = meta_variant(trial.train, cfg.ablate.metac_phases, false);
    acc[4].add(run_incremental(meta_train(base_state, stream.base, metac), stream, options));
  }

  AblationReport report;
  report.seed = cfg.seed;
  report.trials = cfg.ablate.trials;
  const double n = cfg.ablate.trials;
  for (std::size_t v = 0; v < std::size(variants); ++v) {
    AblationRow row;
    row.name = variants[v].name;
    row.prototype = variants[v].prototype;
    row.calibration = variants[v].calibration;
    row.meta_1 = variants[v].meta_1;
    row.meta_c = variants[v].meta_c;
    for (double a : acc[v].session_acc) row.session_acc.push_back(a / n);
    row.pd = performance_drop(row.session_acc);
    row.old_acc = acc[v].old_acc / n;
    row.inc_acc = acc[v].inc_acc / n;
    report.rows.push_back(std::move(row));
  }
  return report;
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["kind"] = "limit-ablation";
  j["seed"] = seed;
  j["trials"] = trials;
  auto arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"name", r.name},
                   {"prototype", r.prototype},
                   {"calibration", r.calibration},
                   {"meta_1", r.meta_1},
                   {"meta_c", r.meta_c},
                   {"session_acc", r.session_acc},
                   {"pd", r.pd},
                   {"old_acc", r.old_acc},
                   {"inc_acc", r.inc_acc}});
  }
  j["rows"] = arr;
  return j;
}

AblationReport AblationReport::from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != kSchemaVersion) {
    throw ParseError("ablation report: unsupported schema_version " + j.at("schema_version").dump(), 0);
  }
  AblationReport r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.trials = j.at("trials").get<int>();
  for (const auto& row : j.at("rows")) {
    AblationRow a;
    a.name = row.at("name").get<std::string>();
    a.prototype = row.at("prototype").get<bool>();
    a.calibration = row.at("calibration").get<bool>();
    a.meta_1 = row.at("meta_1").get<bool>();
    a.meta_c = row.at("meta_c").get<bool>();
    a.session_acc = row.at("session_acc").get<std::vector<double>>();
    a.pd = row.at("pd").get<double>();
    a.old_acc = row.at("old_acc").get<double>();
    a.inc_acc = row.at("inc_acc").get<double>();
    r.rows.push_back(std::move(a));
  }
  return r;
}

std::string AblationReport::to_csv() const {
  std::ostringstream out;
  out << "# schema_version=" << kSchemaVersion << "\n# seed=" << seed << "\n# trials=" << trials << '\n';
  out << "method,prototype,calibration,meta_1,meta_c";
  const std::size_t sessions = rows.empty() ? 0 : rows.front().session_acc.size();
  for (std::size_t b = 0; b < sessions; ++b) out << ",session_" << b;
  out << ",pd,old_acc,inc_acc\n";
  for (const auto& r : rows) {
    out << r.name << ',' << r.prototype << ',' << r.calibration << ',' << r.meta_1 << ',' << r.meta_c;
    for (double a : r.session_acc) out << ',' << format_double(a);
    out << ',' << format_double(r.pd) << ',' << format_double(r.old_acc) << ',' << format_double(r.inc_acc) << '\n';
  }
  return out.str();
}

AblationReport AblationReport::from_csv(const std::string& text) {
  AblationReport r;
  std::istringstream in(text);
  std::string line;
  long line_no = 0;
  bool header_seen = false;
  bool version_seen = false;
  auto number = [&](const std::string& s, auto& out) {
    const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
      throw ParseError("ablation csv: bad number '" + s + "'", line_no);
    }
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(2, eq - 2);
      const std::string value = line.substr(eq + 1);
      if (key == "schema_version") {
        int v = 0;
        number(value, v);
        if (v != kSchemaVersion) throw ParseError("ablation csv: unsupported schema_version " + value, line_no);
        version_seen = true;
      } else if (key == "seed") {
        number(value, r.seed);
      } else if (key == "trials") {
        number(value, r.trials);
      }
      continue;
    }
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 8) throw ParseError("ablation csv: too few columns", line_no);
    AblationRow a;
    a.name = cells[0];
    a.prototype = cells[1] == "1";
    a.calibration = cells[2] == "1";
    a.meta_1 = cells[3] == "1";
    a.meta_c = cells[4] == "1";
    for (std::size_t k = 5; k + 3 < cells.size(); ++k) {
      double v = 0.0;
      number(cells[k], v);
      a.session_acc.push_back(v);
    }
    number(cells[cells.size() - 3], a.pd);
    number(cells[cells.size() - 2], a.old_acc);
    number(cells[cells.size() - 1], a.inc_acc);
    r.rows.push_back(std::move(a));
  }
  if (!version_seen) throw ParseError("ablation csv: missing schema_version", line_no);
  return r;
}

std::string AblationReport::to_table() const {
  std::ostringstream out;
  char buf[64];
  out << "method                 P C 1 M";
  const std::size_t sessions = rows.empty() ? 0 : rows.front().session_acc.size();
  for (std::size_t b = 0; b < sessions; ++b) {
    std::snprintf(buf, sizeof buf, " %7zu", b);
    out << buf;
  }
  out << "      PD     old\n";
  auto mark = [](bool on) { return on ? 'x' : '.'; };
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-22s %c %c %c %c", r.name.c_str(), mark(r.prototype), mark(r.calibration),
                  mark(r.meta_1), mark(r.meta_c));
    out << buf;
    for (double a : r.session_acc) {
      std::snprintf(buf, sizeof buf, " %7.2f", a);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, " %7.2f %7.2f\n", r.pd, r.old_acc);
    out << buf;
  }
  return out.str();
}

}  // namespace limit
