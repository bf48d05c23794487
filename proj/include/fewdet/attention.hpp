#pragma once

#include <map>
#include <string>
#include <vector>

#include "fewdet/dataset.hpp"
#include "fewdet/image.hpp"
#include "fewdet/model.hpp"

namespace fewdet {

// One standardized 4-channel reference object: full image resized to S×S plus
// a binary structure-label channel (the object's mask).
struct MetaInput {
  Image data;  // 4×S×S; channel 3 is binary
  int class_id = -1;
  std::string source;  // "<image_id>#<annotation index>"
};

MetaInput build_meta_input(const ImageSample& sample, int ann_index, int size);

struct AttentiveVector {
  std::vector<float> values;  // length C, each strictly in (0,1)
  int class_id = -1;
  std::string source;
};

// Per-class mean of K object vectors.
struct AttentiveBank {
  std::map<int, std::vector<float>> vectors;
  int k = 0;
  std::string provenance;
  std::string checkpoint_hash;
};

// Groups the object vectors by class and averages; every class present must
// contribute exactly K vectors.
AttentiveBank aggregate_class_bank(const std::vector<AttentiveVector>& vectors, int k);

void write_bank(const AttentiveBank& bank, const std::string& path);
AttentiveBank read_bank(const std::string& path);

template <typename T>
Tensor<T> meta_input_to_tensor(const MetaInput& mi, bool requires_grad = false) {
  return image_to_tensor<T>(mi.data, requires_grad);
}

// Cross-entropy over the auxiliary linear classifier applied to each object
// vector; pushes vectors of the same class together. Gradients flow into the
// attentive branch and the classifier.
template <typename T>
Tensor<T> meta_loss(const Model<T>& model, const std::vector<Tensor<T>>& object_vectors,
                    const std::vector<int>& labels) {
  if (object_vectors.empty()) throw data_error("meta_loss: empty batch of object vectors");
  if (labels.size() != object_vectors.size())
    throw dimension_error("meta_loss: label count does not match vector count");
  auto logits = linear(model.meta_cls.w, stack_columns(object_vectors), model.meta_cls.b);
  return softmax_cross_entropy_cols(logits, labels);
}

// Convenience: run the attentive branch over a prepared meta input (f32).
inline AttentiveVector infer_object_vector(const ModelF& model, const MetaInput& mi) {
  NoGradGuard ng;
  auto v = model.infer_object_vector(meta_input_to_tensor<float>(mi));
  AttentiveVector out;
  out.values = v.value();
  out.class_id = mi.class_id;
  out.source = mi.source;
  return out;
}

}  // namespace fewdet
