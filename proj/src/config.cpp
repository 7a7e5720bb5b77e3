#include "limit/config.hpp"

#include "limit/errors.hpp"
#include "limit/seeding.hpp"

#include <fstream>
#include <set>

namespace limit {

namespace {

using nlohmann::json;

/// Reads one JSON object, remembering its dotted path and which keys were used.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    used_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(child(key) + ": wrong type (" + std::string(it->type_name()) + ")");
    }
  }

  Section sub(const char* key) {
    used_.insert(key);
    static const json empty = json::object();
    const auto it = j_.find(key);
    return Section(it == j_.end() ? empty : *it, child(key));
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError(child(key) + ": unknown field");
    }
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string label() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path + ": " + what);
}

}  // namespace

void RunConfig::propagate_seed() {
  dataset.split.seed = derive_seed(seed, salt::split);
  train.seed = seed;
}

void RunConfig::validate() const {
  require(dataset.source == "synth" || dataset.source == "csv", "dataset.source", "must be synth or csv");
  if (dataset.source == "synth") {
    require(dataset.synth.num_classes >= 1, "dataset.synth.num_classes", "must be >= 1");
    require(dataset.synth.dim >= 1, "dataset.synth.dim", "must be >= 1");
    require(dataset.synth.per_class >= 1, "dataset.synth.per_class", "must be >= 1");
    require(dataset.synth.spread >= 0.0, "dataset.synth.spread", "must be >= 0");
  } else {
    require(!dataset.csv_path.empty(), "dataset.csv_path", "required when dataset.source is csv");
    require(std::filesystem::is_regular_file(dataset.csv_path), "dataset.csv_path",
            "no such file: " + dataset.csv_path.string());
  }
  const SplitSpec& s = dataset.split;
  require(s.base_class_count >= 1, "dataset.split.base_class_count", "must be >= 1");
  require(s.way >= 1, "dataset.split.way", "must be >= 1");
  require(s.shot >= 1, "dataset.split.shot", "must be >= 1");
  require(s.session_count >= 0, "dataset.split.session_count", "must be >= 0");
  require(s.test_per_class >= 1, "dataset.split.test_per_class", "must be >= 1");
  if (dataset.source == "synth") {
    require(s.base_class_count + s.way * s.session_count <= dataset.synth.num_classes, "dataset.split",
            "needs " + std::to_string(s.base_class_count + s.way * s.session_count) + " classes, synth has " +
                std::to_string(dataset.synth.num_classes));
    require(dataset.synth.per_class >= s.shot + s.test_per_class, "dataset.synth.per_class",
            "must be >= split.shot + split.test_per_class");
  }

  for (std::size_t i = 0; i < model.hidden.size(); ++i) {
    require(model.hidden[i] >= 1, "model.hidden[" + std::to_string(i) + "]", "must be >= 1");
  }
  require(model.embed_dim >= 1, "model.embed_dim", "must be >= 1");
  require(model.calib_hidden >= 1, "model.calib_hidden", "must be >= 1");
  require(model.dropout >= 0.0 && model.dropout < 1.0, "model.dropout", "must lie in [0, 1)");

  train.validate();
  const FakeTaskSpec& f = train.meta.fake;
  require(f.way * f.phases < s.base_class_count, "train.meta.fake",
          "way x phases must leave at least one fake-base class");

  require(eval.threads >= 0, "eval.threads", "must be >= 0");
  require(eval.top_k >= 1, "eval.top_k", "must be >= 1");
  require(ablate.trials >= 1, "ablate.trials", "must be >= 1");
  require(ablate.meta1_phases >= 1, "ablate.meta1_phases", "must be >= 1");
  require(ablate.metac_phases >= 1, "ablate.metac_phases", "must be >= 1");
  require(f.way * ablate.metac_phases < s.base_class_count, "ablate.metac_phases",
          "way x phases must leave at least one fake-base class");
  require(method == "limit" || method == "proto" || method == "finetune" || method == "kd", "method",
          "must be one of limit, proto, finetune, kd");
}

nlohmann::json RunConfig::to_json() const {
  const SplitSpec& s = dataset.split;
  const MetaConfig& m = train.meta;
  return {
      {"schema_version", kConfigSchemaVersion},
      {"seed", seed},
      {"method", method},
      {"out_dir", out_dir.string()},
      {"dataset",
       {{"source", dataset.source},
        {"csv_path", dataset.csv_path.string()},
        {"synth",
         {{"num_classes", dataset.synth.num_classes},
          {"dim", dataset.synth.dim},
          {"per_class", dataset.synth.per_class},
          {"spread", dataset.synth.spread}}},
        {"split",
         {{"base_class_count", s.base_class_count},
          {"way", s.way},
          {"shot", s.shot},
          {"session_count", s.session_count},
          {"test_per_class", s.test_per_class}}}}},
      {"model",
       {{"hidden", model.hidden},
        {"embed_dim", model.embed_dim},
        {"calib_hidden", model.calib_hidden},
        {"dropout", model.dropout},
        {"dropout_before_norm", model.dropout_before_norm}}},
      {"train",
       {{"kd_lambda", train.kd_lambda},
        {"base_prototypes", train.base_prototypes},
        {"pretrain",
         {{"lr", train.pretrain.lr},
          {"momentum", train.pretrain.momentum},
          {"epochs", train.pretrain.epochs},
          {"batch_size", train.pretrain.batch_size}}},
        {"meta",
         {{"lr", m.lr},
          {"momentum", m.momentum},
          {"decay_factor", m.decay_factor},
          {"decay_every", m.decay_every},
          {"iterations", m.iterations},
          {"episodes_per_step", m.episodes_per_step},
          {"use_calibration", m.use_calibration},
          {"train_embedding", m.train_embedding},
          {"train_classifier", m.train_classifier},
          {"train_calibration", m.train_calibration},
          {"fake",
           {{"phases", m.fake.phases}, {"way", m.fake.way}, {"shot", m.fake.shot}, {"query_shot", m.fake.query_shot}}}}},
        {"finetune",
         {{"lr", train.finetune.lr},
          {"momentum", train.finetune.momentum},
          {"epochs", train.finetune.epochs},
          {"batch_size", train.finetune.batch_size},
          {"prototype_init", train.finetune.prototype_init},
          {"train_embedding", train.finetune.train_embedding}}}}},
      {"eval", {{"use_calibration", eval.use_calibration}, {"threads", eval.threads}, {"top_k", eval.top_k}}},
      {"ablate",
       {{"trials", ablate.trials}, {"meta1_phases", ablate.meta1_phases}, {"metac_phases", ablate.metac_phases}}},
  };
}

RunConfig RunConfig::from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  RunConfig c;
  Section root(j, "");
  int version = kConfigSchemaVersion;
  root.read("schema_version", version);
  require(version == kConfigSchemaVersion, "schema_version", "unsupported value " + std::to_string(version));
  root.read("seed", c.seed);
  root.read("method", c.method);
  std::string out_dir = c.out_dir.string();
  root.read("out_dir", out_dir);
  c.out_dir = out_dir;

  {
    Section d = root.sub("dataset");
    d.read("source", c.dataset.source);
    std::string csv;
    d.read("csv_path", csv);
    c.dataset.csv_path = csv;
    Section synth = d.sub("synth");
    synth.read("num_classes", c.dataset.synth.num_classes);
    synth.read("dim", c.dataset.synth.dim);
    synth.read("per_class", c.dataset.synth.per_class);
    synth.read("spread", c.dataset.synth.spread);
    synth.finish();
    Section split = d.sub("split");
    split.read("base_class_count", c.dataset.split.base_class_count);
    split.read("way", c.dataset.split.way);
    split.read("shot", c.dataset.split.shot);
    split.read("session_count", c.dataset.split.session_count);
    split.read("test_per_class", c.dataset.split.test_per_class);
    split.finish();
    d.finish();
  }
  {
    Section m = root.sub("model");
    m.read("hidden", c.model.hidden);
    m.read("embed_dim", c.model.embed_dim);
    m.read("calib_hidden", c.model.calib_hidden);
    m.read("dropout", c.model.dropout);
    m.read("dropout_before_norm", c.model.dropout_before_norm);
    m.finish();
  }
  {
    Section t = root.sub("train");
    t.read("kd_lambda", c.train.kd_lambda);
    t.read("base_prototypes", c.train.base_prototypes);
    Section p = t.sub("pretrain");
    p.read("lr", c.train.pretrain.lr);
    p.read("momentum", c.train.pretrain.momentum);
    p.read("epochs", c.train.pretrain.epochs);
    p.read("batch_size", c.train.pretrain.batch_size);
    p.finish();
    Section m = t.sub("meta");
    MetaConfig& mc = c.train.meta;
    m.read("lr", mc.lr);
    m.read("momentum", mc.momentum);
    m.read("decay_factor", mc.decay_factor);
    m.read("decay_every", mc.decay_every);
    m.read("iterations", mc.iterations);
    m.read("episodes_per_step", mc.episodes_per_step);
    m.read("use_calibration", mc.use_calibration);
    m.read("train_embedding", mc.train_embedding);
    m.read("train_classifier", mc.train_classifier);
    m.read("train_calibration", mc.train_calibration);
    Section f = m.sub("fake");
    f.read("phases", mc.fake.phases);
    f.read("way", mc.fake.way);
    f.read("shot", mc.fake.shot);
    f.read("query_shot", mc.fake.query_shot);
    f.finish();
    m.finish();
    Section ft = t.sub("finetune");
    ft.read("lr", c.train.finetune.lr);
    ft.read("momentum", c.train.finetune.momentum);
    ft.read("epochs", c.train.finetune.epochs);
    ft.read("batch_size", c.train.finetune.batch_size);
    ft.read("prototype_init", c.train.finetune.prototype_init);
    ft.read("train_embedding", c.train.finetune.train_embedding);
    ft.finish();
    t.finish();
  }
  {
    Section e = root.sub("eval");
    e.read("use_calibration", c.eval.use_calibration);
    e.read("threads", c.eval.threads);
    e.read("top_k", c.eval.top_k);
    e.finish();
  }
  {
    Section a = root.sub("ablate");
    a.read("trials", c.ablate.trials);
    a.read("meta1_phases", c.ablate.meta1_phases);
    a.read("metac_phases", c.ablate.metac_phases);
    a.finish();
  }
  root.finish();

  if (!c.dataset.csv_path.empty() && c.dataset.csv_path.is_relative() && !base_dir.empty()) {
    c.dataset.csv_path = base_dir / c.dataset.csv_path;
  }
  c.propagate_seed();
  return c;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment + ": override must look like path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::size_t begin = 0;
  while (true) {
    const auto dot = path.find('.', begin);
    const std::string key = path.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
    if (key.empty()) throw ConfigError(path + ": empty path segment");
    if (!node->is_object()) throw ConfigError(path + ": " + key + " is not inside an object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    begin = dot + 1;
  }
}

RunConfig load_run_config(const std::filesystem::path& path, std::span<const std::string> overrides) {
  json doc = json::object();
  std::filesystem::path base_dir;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("--config: cannot open " + path.string());
    doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("--config: " + path.string() + " is not valid JSON");
    base_dir = path.parent_path();
  }
  for (const auto& o : overrides) apply_override(doc, o);
  RunConfig c = RunConfig::from_json(doc, base_dir);
  c.validate();
  return c;
}

Learner learner_for(const std::string& method) {
  if (method == "finetune") return Learner::finetune;
  if (method == "kd") return Learner::kd;
  if (method == "limit" || method == "proto") return Learner::prototype;
  throw ConfigError("method: unknown value " + method);
}

}  // namespace limit
