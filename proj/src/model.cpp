#include "limit/model.hpp"

#include "limit/errors.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace limit {

EmbeddingNet EmbeddingNet::create(std::vector<int> widths, Rng& rng) {
  if (widths.size() < 2) throw ContractError("embedding: need at least input and output width");
  for (int w : widths) {
    if (w < 1) throw ContractError("embedding: layer widths must be >= 1");
  }
  EmbeddingNet net;
  net.widths_ = std::move(widths);
  for (std::size_t l = 0; l + 1 < net.widths_.size(); ++l) {
    const int fan_in = net.widths_[l];
    const int fan_out = net.widths_[l + 1];
    const double limit = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> uniform(-limit, limit);
    Matrix w(fan_in, fan_out);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = uniform(rng);
    net.layers_.push_back({Tensor(std::move(w), true), Tensor::zeros(1, fan_out, true)});
  }
  return net;
}

EmbeddingNet EmbeddingNet::from_layers(std::vector<DenseLayer> layers) {
  if (layers.empty()) throw ContractError("embedding: no layers");
  EmbeddingNet net;
  net.widths_.push_back(static_cast<int>(layers.front().weight.rows()));
  for (const auto& layer : layers) {
    if (layer.weight.rows() != net.widths_.back() || layer.bias.rows() != 1 ||
        layer.bias.cols() != layer.weight.cols()) {
      throw DimensionError("embedding: layer " + shape_string(layer.weight) + " / bias " +
                           shape_string(layer.bias) + " do not chain");
    }
    net.widths_.push_back(static_cast<int>(layer.weight.cols()));
  }
  net.layers_ = std::move(layers);
  return net;
}

std::vector<Tensor> EmbeddingNet::parameters() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers_) {
    out.push_back(layer.weight);
    out.push_back(layer.bias);
  }
  return out;
}

void EmbeddingNet::set_requires_grad(bool on) {
  for (auto& layer : layers_) {
    layer.weight.set_requires_grad(on);
    layer.bias.set_requires_grad(on);
  }
}

EmbeddingNet EmbeddingNet::clone() const {
  EmbeddingNet net;
  net.widths_ = widths_;
  for (const auto& layer : layers_) net.layers_.push_back({layer.weight.clone(), layer.bias.clone()});
  return net;
}

Tensor embed(const EmbeddingNet& net, const Tensor& x) {
  if (x.cols() != net.input_dim()) {
    throw DimensionError("embed: input " + shape_string(x) + " but network expects " +
                         std::to_string(net.input_dim()) + " features");
  }
  Tensor h = x;
  const auto& layers = net.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h = add_row_bias(matmul(h, layers[l].weight), layers[l].bias);
    if (l + 1 < layers.size()) h = relu(h);
  }
  return h;
}

Classifier Classifier::create(int dim, std::vector<int> class_ids, Rng& rng) {
  const double limit = 1.0 / std::sqrt(static_cast<double>(dim));
  std::uniform_real_distribution<double> uniform(-limit, limit);
  Matrix w(dim, static_cast<Index>(class_ids.size()));
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = uniform(rng);
  return {Tensor(std::move(w), true), std::move(class_ids)};
}

Index Classifier::column_of(int class_id) const {
  const auto it = std::find(class_ids.begin(), class_ids.end(), class_id);
  if (it == class_ids.end()) throw IndexError("classifier: no column for class " + std::to_string(class_id));
  return it - class_ids.begin();
}

Classifier Classifier::clone() const { return {weights.clone(), class_ids}; }

bool Prototypes::contains(int class_id) const {
  return std::binary_search(class_ids.begin(), class_ids.end(), class_id);
}

Index Prototypes::column_of(int class_id) const {
  const auto it = std::lower_bound(class_ids.begin(), class_ids.end(), class_id);
  if (it == class_ids.end() || *it != class_id) {
    throw ContractError("prototypes: no prototype for class " + std::to_string(class_id));
  }
  return it - class_ids.begin();
}

Prototypes compute_prototypes(const Tensor& embeddings, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != embeddings.rows()) {
    throw DimensionError("compute_prototypes: " + std::to_string(labels.size()) + " labels for " +
                         shape_string(embeddings) + " embeddings");
  }
  if (labels.empty()) throw ContractError("compute_prototypes: empty support set");
  std::set<int> distinct(labels.begin(), labels.end());
  Prototypes out;
  out.class_ids.assign(distinct.begin(), distinct.end());

  // Row k of `averaging` holds 1/K_k on the instances of class k.
  Matrix averaging = Matrix::Zero(static_cast<Index>(out.class_ids.size()), embeddings.rows());
  std::vector<int> counts(out.class_ids.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto k = std::lower_bound(out.class_ids.begin(), out.class_ids.end(), labels[i]) -
                   out.class_ids.begin();
    averaging(k, static_cast<Index>(i)) = 1.0;
    ++counts[static_cast<std::size_t>(k)];
  }
  for (std::size_t k = 0; k < counts.size(); ++k) averaging.row(static_cast<Index>(k)) /= counts[k];
  out.columns = transpose(matmul(Tensor(std::move(averaging)), embeddings));
  return out;
}

Prototypes compute_prototypes(const Dataset& support, const EmbeddingNet& net) {
  return compute_prototypes(embed(net, Tensor(support.features)), support.labels);
}

Classifier replace_classifier(const Classifier& prev, const Prototypes& protos,
                              std::span<const int> phase_classes) {
  if (phase_classes.empty()) return prev;
  if (protos.columns.rows() != prev.dim()) {
    throw DimensionError("replace_classifier: prototypes " + shape_string(protos.columns) +
                         " vs classifier " + shape_string(prev.weights));
  }
  // Index space of the concatenation [prev | protos].
  const Index offset = prev.size();
  Classifier out;
  out.class_ids = prev.class_ids;
  std::vector<Index> source(prev.class_ids.size());
  for (std::size_t j = 0; j < source.size(); ++j) source[j] = static_cast<Index>(j);
  for (int y : phase_classes) {
    const Index proto_col = offset + protos.column_of(y);
    const auto it = std::find(out.class_ids.begin(), out.class_ids.end(), y);
    if (it != out.class_ids.end()) {
      source[static_cast<std::size_t>(it - out.class_ids.begin())] = proto_col;
    } else {
      out.class_ids.push_back(y);
      source.push_back(proto_col);
    }
  }
  const Tensor parts[] = {prev.weights, protos.columns};
  out.weights = gather_cols(concat_cols(parts), source);
  return out;
}

Classifier augment_classifier(const Classifier& w, const Prototypes& protos,
                              std::span<const int> new_class_ids) {
  std::set<int> fresh;
  for (int y : new_class_ids) {
    if (std::find(w.class_ids.begin(), w.class_ids.end(), y) != w.class_ids.end() ||
        !fresh.insert(y).second) {
      throw ContractError("augment_classifier: duplicate class id " + std::to_string(y));
    }
  }
  if (new_class_ids.empty()) return w.clone();
  if (protos.columns.rows() != w.dim()) {
    throw DimensionError("augment_classifier: prototypes " + shape_string(protos.columns) +
                         " vs classifier " + shape_string(w.weights));
  }
  Matrix grown(w.dim(), w.size() + static_cast<Index>(new_class_ids.size()));
  grown.leftCols(w.size()) = w.weights.value();
  Classifier out;
  out.class_ids = w.class_ids;
  for (std::size_t k = 0; k < new_class_ids.size(); ++k) {
    grown.col(w.size() + static_cast<Index>(k)) = protos.columns.value().col(protos.column_of(new_class_ids[k]));
    out.class_ids.push_back(new_class_ids[k]);
  }
  out.weights = Tensor(std::move(grown), w.weights.requires_grad());
  return out;
}

Tensor raw_logits(const Classifier& w, const Tensor& emb) {
  if (emb.cols() != w.dim()) {
    throw DimensionError("raw_logits: embeddings " + shape_string(emb) + " vs classifier " +
                         shape_string(w.weights));
  }
  return matmul(emb, w.weights);
}

}  // namespace limit
