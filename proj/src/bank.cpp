#include "fewdet/attention.hpp"

#include <fstream>

#include <json.hpp>

using json = nlohmann::json;

namespace fewdet {

MetaInput build_meta_input(const ImageSample& sample, int ann_index, int size) {
  if (ann_index < 0 || ann_index >= static_cast<int>(sample.annotations.size()))
    throw index_error("build_meta_input: annotation index out of range");
  const auto& ann = sample.annotations[static_cast<std::size_t>(ann_index)];

  MetaInput mi;
  mi.class_id = ann.class_id;
  mi.source = sample.id + "#" + std::to_string(ann_index);

  const Image rgb = resize_bilinear(sample.image, size, size);
  const BitMask mask = resize_nearest(ann.mask, size, size);
  if (mask.count() == 0)
    throw data_error("build_meta_input: object " + mi.source + " degenerate after resize to " +
                     std::to_string(size));

  mi.data = Image(4, size, size);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) mi.data.at(c, y, x) = rgb.at(c, y, x);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) mi.data.at(3, y, x) = mask.at(y, x) ? 1.0f : 0.0f;
  return mi;
}

AttentiveBank aggregate_class_bank(const std::vector<AttentiveVector>& vectors, int k) {
  if (k < 1) throw config_error("aggregate_class_bank: K must be >= 1");
  if (vectors.empty()) throw data_error("aggregate_class_bank: no vectors");
  std::map<int, std::vector<const AttentiveVector*>> by_class;
  for (const auto& v : vectors) by_class[v.class_id].push_back(&v);

  AttentiveBank bank;
  bank.k = k;
  for (const auto& [cls, group] : by_class) {
    if (static_cast<int>(group.size()) != k)
      throw data_error("aggregate_class_bank: class " + std::to_string(cls) + " has " +
                       std::to_string(group.size()) + " vectors, expected K=" + std::to_string(k));
    const std::size_t c = group[0]->values.size();
    // Accumulate in f64 so the mean is insensitive to the K-vector order at
    // f32 resolution.
    std::vector<double> acc(c, 0.0);
    for (const auto* v : group) {
      if (v->values.size() != c)
        throw dimension_error("aggregate_class_bank: inconsistent vector lengths");
      for (std::size_t i = 0; i < c; ++i) acc[i] += static_cast<double>(v->values[i]);
    }
    std::vector<float> mean(c);
    for (std::size_t i = 0; i < c; ++i) mean[i] = static_cast<float>(acc[i] / k);
    bank.vectors[cls] = std::move(mean);
  }
  return bank;
}

void write_bank(const AttentiveBank& bank, const std::string& path) {
  json j;
  j["k"] = bank.k;
  j["provenance"] = bank.provenance;
  j["checkpoint_hash"] = bank.checkpoint_hash;
  json vecs = json::object();
  for (const auto& [cls, v] : bank.vectors) vecs[std::to_string(cls)] = v;
  j["vectors"] = vecs;
  std::ofstream os(path);
  if (!os) throw data_error("write_bank: cannot open " + path);
  os << j.dump() << "\n";
}

AttentiveBank read_bank(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw data_error("read_bank: cannot open " + path);
  json j = json::parse(is);
  AttentiveBank bank;
  bank.k = j.at("k").get<int>();
  bank.provenance = j.value("provenance", "");
  bank.checkpoint_hash = j.value("checkpoint_hash", "");
  for (const auto& [key, v] : j.at("vectors").items())
    bank.vectors[std::stoi(key)] = v.get<std::vector<float>>();
  return bank;
}

}  // namespace fewdet
