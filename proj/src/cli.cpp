#include "limit/cli.hpp"

#include "limit/checkpoint.hpp"
#include "limit/errors.hpp"
#include "limit/pipeline.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <optional>

namespace limit {

namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string method;
  std::vector<std::string> sets;
  std::string checkpoint;
  bool allow_cold = false;
};

RunConfig resolve(const Common& c) {
  std::vector<std::string> overrides = c.sets;
  if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
  if (!c.out.empty()) overrides.push_back("out_dir=\"" + c.out + "\"");
  if (!c.method.empty()) overrides.push_back("method=\"" + c.method + "\"");
  RunConfig cfg = load_run_config(c.config, overrides);
  fs::create_directories(cfg.out_dir);
  return cfg;
}

std::ofstream open_output(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void write_header(std::ostream& out, std::uint64_t seed) {
  out << "# schema_version=1\n# seed=" << seed << '\n';
}

void write_json(const fs::path& path, const nlohmann::json& j) { open_output(path) << j.dump(2) << '\n'; }

/// Collects LogRows and writes them as CSV.
struct LogFile {
  std::vector<LogRow> rows;
  LogSink sink() {
    return [this](const LogRow& r) { rows.push_back(r); };
  }
  void write(const fs::path& path, std::uint64_t seed) const {
    auto out = open_output(path);
    write_header(out, seed);
    out << "iteration,lr,loss,accuracy\n";
    for (const auto& r : rows) {
      out << r.iteration << ',' << format_double(r.lr) << ',' << format_double(r.loss) << ','
          << format_double(r.accuracy) << '\n';
    }
  }
};

ModelState require_checkpoint(const Common& c) {
  if (c.checkpoint.empty()) throw ConfigError("--checkpoint: required for this command");
  if (!fs::is_regular_file(c.checkpoint)) throw ConfigError("--checkpoint: no such file: " + c.checkpoint);
  return load_checkpoint(c.checkpoint);
}

int cmd_synth(const Common& c, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  LabelMap map;
  const Dataset ds = load_dataset(cfg, &map);
  save_feature_csv(cfg.out_dir / "features.csv", ds, &map,
                   "schema_version=1\nseed=" + std::to_string(cfg.seed));
  save_label_map(cfg.out_dir / "label_map.json", map, cfg.seed);
  out << "classes " << ds.num_classes << "\ninstances " << ds.size() << "\ndim " << ds.dim() << '\n';
  return kExitOk;
}

int cmd_pretrain(const Common& c, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  const SessionStream stream = build_stream(cfg, load_dataset(cfg));
  LogFile log;
  const ModelState state = pretrain_stage(cfg, stream, cfg.train, log.sink());
  save_checkpoint(cfg.out_dir / "pretrained.json", state, cfg.seed);
  log.write(cfg.out_dir / "pretrain_log.csv", cfg.seed);
  out << "checkpoint " << (cfg.out_dir / "pretrained.json").string() << '\n';
  return kExitOk;
}

int cmd_metatrain(const Common& c, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  const ModelState start = require_checkpoint(c);
  if (!start.pretrained && !c.allow_cold) {
    throw ConfigError("--checkpoint: model is not pretrained; pass --allow-cold to meta-train from scratch");
  }
  const SessionStream stream = build_stream(cfg, load_dataset(cfg));
  LogFile log;
  const ModelState state = meta_train(start, stream.base, cfg.train, log.sink());
  save_checkpoint(cfg.out_dir / "meta.json", state, cfg.seed);
  log.write(cfg.out_dir / "meta_log.csv", cfg.seed);
  out << "checkpoint " << (cfg.out_dir / "meta.json").string() << '\n';
  return kExitOk;
}

void write_report(const fs::path& dir, const EvalReport& r) {
  write_json(dir / "report.json", r.to_json());
  {
    auto csv = open_output(dir / "report.csv");
    write_header(csv, r.seed);
    csv << "# method=" << r.method << "\n# pd=" << format_double(r.pd) << "\n# base_acc=" << format_double(r.base_acc)
        << "\n# inc_acc=" << format_double(r.inc_acc) << "\n# harmonic=" << format_double(r.harmonic) << '\n';
    csv << "session,classes,test_instances,accuracy\n";
    for (std::size_t b = 0; b < r.session_acc.size(); ++b) {
      csv << b << ',' << r.per_session_class_counts[b] << ',' << r.per_session_test_counts[b] << ','
          << format_double(r.session_acc[b]) << '\n';
    }
  }
  auto grid = open_output(dir / "confusion.csv");
  write_header(grid, r.seed);
  grid << "true\\pred";
  for (int id : r.class_order) grid << ',' << id;
  grid << '\n';
  for (Index i = 0; i < r.confusion.rows(); ++i) {
    grid << r.class_order[static_cast<std::size_t>(i)];
    for (Index j = 0; j < r.confusion.cols(); ++j) grid << ',' << r.confusion(i, j);
    grid << '\n';
  }
}

int cmd_eval(const Common& c, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  const ModelState state = require_checkpoint(c);
  const SessionStream stream = build_stream(cfg, load_dataset(cfg));
  const EvalOptions options = eval_options(cfg);
  ModelState final_state;
  const EvalReport report = run_incremental(state, stream, options, &final_state);
  write_report(cfg.out_dir, report);

  const Dataset& last = stream.test_sets.back();
  const bool calibrated = options.learner == Learner::prototype && options.use_calibration;
  const Matrix logits = score(final_state, final_state.classifier, last.features, calibrated, options.threads);
  const auto top = top_k_probabilities(logits, final_state.classifier.class_ids, cfg.eval.top_k);
  auto csv = open_output(cfg.out_dir / "top5.csv");
  write_header(csv, cfg.seed);
  csv << "instance,label";
  for (int k = 1; k <= cfg.eval.top_k; ++k) csv << ",class_" << k << ",prob_" << k;
  csv << '\n';
  for (std::size_t i = 0; i < top.size(); ++i) {
    csv << i << ',' << last.labels[i];
    for (std::size_t k = 0; k < top[i].classes.size(); ++k) {
      csv << ',' << top[i].classes[k] << ',' << format_double(top[i].probabilities[k]);
    }
    csv << '\n';
  }

  char buf[32];
  out << "method " << report.method << "\nsession accuracy";
  for (double a : report.session_acc) {
    std::snprintf(buf, sizeof buf, " %.2f", a);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%.2f", report.pd);
  out << "\nPD " << buf;
  std::snprintf(buf, sizeof buf, "%.2f", report.harmonic);
  out << "\nharmonic " << buf << '\n';
  return kExitOk;
}

int cmd_ablate(const Common& c, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  std::optional<ModelState> start;
  if (!c.checkpoint.empty()) start = require_checkpoint(c);
  const AblationReport report = run_ablation(cfg, start ? &*start : nullptr);
  write_json(cfg.out_dir / "ablation.json", report.to_json());
  open_output(cfg.out_dir / "ablation.csv") << report.to_csv();
  out << report.to_table();
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot class-incremental learning with meta-calibration", "limit"};
  app.require_subcommand(1);
  Common common;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON run configuration");
    sub->add_option("--seed", common.seed, "Master seed");
    sub->add_option("--out", common.out, "Output directory");
    sub->add_option("--set", common.sets, "Override a config field, e.g. train.meta.lr=0.01");
  };
  auto add_method = [&](CLI::App* sub) {
    sub->add_option("--method", common.method, "limit, proto, finetune or kd")
        ->check(CLI::IsMember({"limit", "proto", "finetune", "kd"}));
  };

  CLI::App* synth = app.add_subcommand("synth", "Generate the synthetic feature dataset");
  add_common(synth);
  CLI::App* pre = app.add_subcommand("pretrain", "Pretrain on the base session");
  add_common(pre);
  CLI::App* meta = app.add_subcommand("metatrain", "Meta-train on fake-incremental tasks");
  add_common(meta);
  meta->add_option("--checkpoint", common.checkpoint, "Pretrained checkpoint")->required();
  meta->add_flag("--allow-cold", common.allow_cold, "Accept a checkpoint that was never pretrained");
  CLI::App* eval = app.add_subcommand("eval", "Run the incremental evaluation protocol");
  add_common(eval);
  add_method(eval);
  eval->add_option("--checkpoint", common.checkpoint, "Checkpoint to evaluate")->required();
  CLI::App* ablate = app.add_subcommand("ablate", "Run the component ablation grid");
  add_common(ablate);
  ablate->add_option("--checkpoint", common.checkpoint, "Pretrained checkpoint shared by all trials");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (synth->parsed()) return cmd_synth(common, out);
    if (pre->parsed()) return cmd_pretrain(common, out);
    if (meta->parsed()) return cmd_metatrain(common, out);
    if (eval->parsed()) return cmd_eval(common, out);
    return cmd_ablate(common, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DivergenceError& e) {
    err << "divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const NumericError& e) {
    err << "divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace limit
