#pragma once

#include "limit/dataset.hpp"
#include "limit/tensor.hpp"

#include <vector>

namespace limit {

struct DenseLayer {
  Tensor weight;  // fan_in x fan_out
  Tensor bias;    // 1 x fan_out
};

/// Multilayer perceptron phi: R^D -> R^d with rectifiers between layers and a
/// linear output layer.
class EmbeddingNet {
 public:
  EmbeddingNet() = default;
  /// widths = {D, h1, ..., d}. Weights are Kaiming-uniform, biases zero.
  static EmbeddingNet create(std::vector<int> widths, Rng& rng);
  static EmbeddingNet from_layers(std::vector<DenseLayer> layers);

  const std::vector<int>& widths() const { return widths_; }
  int input_dim() const { return widths_.front(); }
  int output_dim() const { return widths_.back(); }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  /// Handles that share storage with the network.
  std::vector<Tensor> parameters() const;
  void set_requires_grad(bool on);
  EmbeddingNet clone() const;

 private:
  std::vector<int> widths_;
  std::vector<DenseLayer> layers_;
};

Tensor embed(const EmbeddingNet& net, const Tensor& x);

/// Bias-free linear classifier. Column j scores class_ids[j].
struct Classifier {
  Tensor weights;  // d x |classes|
  std::vector<int> class_ids;

  static Classifier create(int dim, std::vector<int> class_ids, Rng& rng);
  Index size() const { return static_cast<Index>(class_ids.size()); }
  Index dim() const { return weights.rows(); }
  /// Column index of a class id; throws IndexError when absent.
  Index column_of(int class_id) const;
  Classifier clone() const;
};

/// Per-class mean embeddings, one column per class in ascending id order.
struct Prototypes {
  std::vector<int> class_ids;
  Tensor columns;  // d x |class_ids|

  bool contains(int class_id) const;
  Index column_of(int class_id) const;
};

/// Mean of the embeddings sharing a label. Differentiable through `embeddings`.
Prototypes compute_prototypes(const Tensor& embeddings, std::span<const int> labels);
Prototypes compute_prototypes(const Dataset& support, const EmbeddingNet& net);

/// Columns of `phase_classes` become their prototypes; classes not yet in the
/// classifier are appended in the given order. Other columns are copied.
Classifier replace_classifier(const Classifier& prev, const Prototypes& protos,
                              std::span<const int> phase_classes);

/// Appends prototype columns for classes the classifier has never seen. Runs
/// without recording; the result is a fresh leaf.
Classifier augment_classifier(const Classifier& w, const Prototypes& protos,
                              std::span<const int> new_class_ids);

/// Inner product of each embedding row with every classifier column.
Tensor raw_logits(const Classifier& w, const Tensor& emb);

}  // namespace limit
