#include "limit/checkpoint.hpp"

#include "limit/errors.hpp"

#include <fstream>

namespace limit {

nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Index>();
  const auto cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<Index>(data.size()) != rows * cols) {
    throw ParseError("checkpoint: matrix data does not match its " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " shape",
                     0);
  }
  return Eigen::Map<const Matrix>(data.data(), rows, cols);
}

nlohmann::json checkpoint_to_json(const ModelState& state, std::uint64_t seed) {
  nlohmann::json j;
  j["schema_version"] = kCheckpointSchemaVersion;
  j["kind"] = "limit-checkpoint";
  j["seed"] = seed;
  j["pretrained"] = state.pretrained;
  j["meta_trained"] = state.meta_trained;
  j["widths"] = state.net.widths();
  auto layers = nlohmann::json::array();
  for (const auto& layer : state.net.layers()) {
    layers.push_back({{"weight", matrix_to_json(layer.weight.value())}, {"bias", matrix_to_json(layer.bias.value())}});
  }
  j["layers"] = layers;
  j["classifier"] = {{"class_ids", state.classifier.class_ids},
                     {"weights", matrix_to_json(state.classifier.weights.value())}};
  const CalibrationParams& c = state.calibration;
  j["calibration"] = {{"query_proj", matrix_to_json(c.query_proj.value())},
                      {"key_proj", matrix_to_json(c.key_proj.value())},
                      {"value_proj", matrix_to_json(c.value_proj.value())},
                      {"out_proj", matrix_to_json(c.out_proj.value())},
                      {"ln_gamma", matrix_to_json(c.ln_gamma.value())},
                      {"ln_beta", matrix_to_json(c.ln_beta.value())},
                      {"dropout_p", c.dropout_p},
                      {"dropout_before_norm", c.dropout_before_norm}};
  return j;
}

ModelState checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kCheckpointSchemaVersion) {
      throw ParseError("checkpoint: unsupported schema_version " + j.at("schema_version").dump(), 0);
    }
    ModelState state;
    std::vector<DenseLayer> layers;
    for (const auto& layer : j.at("layers")) {
      layers.push_back({Tensor(matrix_from_json(layer.at("weight")), true), Tensor(matrix_from_json(layer.at("bias")), true)});
    }
    state.net = EmbeddingNet::from_layers(std::move(layers));
    if (state.net.widths() != j.at("widths").get<std::vector<int>>()) {
      throw ParseError("checkpoint: layer shapes disagree with recorded widths", 0);
    }
    const auto& cls = j.at("classifier");
    state.classifier.class_ids = cls.at("class_ids").get<std::vector<int>>();
    state.classifier.weights = Tensor(matrix_from_json(cls.at("weights")), true);
    if (state.classifier.size() != state.classifier.weights.cols()) {
      throw ParseError("checkpoint: classifier ids do not match its columns", 0);
    }
    const auto& c = j.at("calibration");
    CalibrationParams& p = state.calibration;
    p.query_proj = Tensor(matrix_from_json(c.at("query_proj")), true);
    p.key_proj = Tensor(matrix_from_json(c.at("key_proj")), true);
    p.value_proj = Tensor(matrix_from_json(c.at("value_proj")), true);
    p.out_proj = Tensor(matrix_from_json(c.at("out_proj")), true);
    p.ln_gamma = Tensor(matrix_from_json(c.at("ln_gamma")), true);
    p.ln_beta = Tensor(matrix_from_json(c.at("ln_beta")), true);
    p.dropout_p = c.at("dropout_p").get<double>();
    p.dropout_before_norm = c.at("dropout_before_norm").get<bool>();
    p.validate();
    state.pretrained = j.at("pretrained").get<bool>();
    state.meta_trained = j.at("meta_trained").get<bool>();
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what(), 0);
  } catch (const DimensionError& e) {
    throw ParseError(std::string("checkpoint: ") + e.what(), 0);
  }
}

void save_checkpoint(const std::filesystem::path& path, const ModelState& state, std::uint64_t seed) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << checkpoint_to_json(state, seed).dump() << '\n';
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("checkpoint: cannot open " + path.string(), 0);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what(), 0);
  }
  return checkpoint_from_json(j);
}

bool same_state(const ModelState& a, const ModelState& b) {
  auto same = [](const Tensor& x, const Tensor& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() && x.value() == y.value();
  };
  if (a.pretrained != b.pretrained || a.meta_trained != b.meta_trained) return false;
  if (a.net.widths() != b.net.widths()) return false;
  for (std::size_t l = 0; l < a.net.layers().size(); ++l) {
    if (!same(a.net.layers()[l].weight, b.net.layers()[l].weight) || !same(a.net.layers()[l].bias, b.net.layers()[l].bias)) {
      return false;
    }
  }
  if (a.classifier.class_ids != b.classifier.class_ids || !same(a.classifier.weights, b.classifier.weights)) return false;
  const auto pa = a.calibration.parameters();
  const auto pb = b.calibration.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k) {
    if (!same(pa[k], pb[k])) return false;
  }
  return a.calibration.dropout_p == b.calibration.dropout_p &&
         a.calibration.dropout_before_norm == b.calibration.dropout_before_norm;
}

}  // namespace limit
