#include "fewdet/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace fewdet {

namespace {

constexpr char kMagic[8] = {'F', 'E', 'W', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw data_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, Model<float>& model, const nlohmann::json& config) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw data_error("save_checkpoint: cannot open " + path);
  os.write(kMagic, 8);
  put<std::uint32_t>(os, kVersion);
  const std::string cfg = config.dump();
  put<std::uint64_t>(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  auto params = model.parameters();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (auto& [name, tensor] : params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, 0);  // dtype f32
    put<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.shape().size()));
    for (int d : tensor.shape()) put<std::int32_t>(os, d);
    put<std::uint64_t>(os, tensor.value().size() * sizeof(float));
    os.write(reinterpret_cast<const char*>(tensor.data()),
             static_cast<std::streamsize>(tensor.value().size() * sizeof(float)));
  }
  if (!os) throw data_error("save_checkpoint: write failed for " + path);
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error("read_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw data_error("read_checkpoint: bad magic in " + path);
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion)
    throw data_error("read_checkpoint: unsupported format version " + std::to_string(version));
  const auto json_len = get<std::uint64_t>(is);
  std::string cfg(json_len, '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(json_len));
  CheckpointData out;
  out.config = nlohmann::json::parse(cfg);
  const auto count = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto dtype = get<std::uint8_t>(is);
    if (dtype != 0) throw data_error("read_checkpoint: unsupported dtype");
    const auto ndim = get<std::uint32_t>(is);
    std::vector<int> shape;
    std::int64_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(get<std::int32_t>(is));
      numel *= shape.back();
    }
    const auto nbytes = get<std::uint64_t>(is);
    if (nbytes != static_cast<std::uint64_t>(numel) * sizeof(float))
      throw data_error("read_checkpoint: byte count mismatch for " + name);
    std::vector<float> data(static_cast<std::size_t>(numel));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(nbytes));
    if (!is) throw data_error("read_checkpoint: truncated tensor " + name);
    out.tensors[name] = {std::move(shape), std::move(data)};
  }
  return out;
}

void load_into_model(const CheckpointData& ckpt, Model<float>& model) {
  auto params = model.parameters();
  if (params.size() != ckpt.tensors.size())
    throw data_error("load_into_model: parameter count mismatch (" + std::to_string(params.size()) +
                     " in model, " + std::to_string(ckpt.tensors.size()) + " in checkpoint)");
  for (auto& [name, tensor] : params) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw data_error("load_into_model: missing tensor " + name);
    if (it->second.first != tensor.shape())
      throw data_error("load_into_model: shape mismatch for " + name);
    tensor.value() = it->second.second;
  }
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["num_classes"] = cfg.num_classes;
  j["widths"] = cfg.widths;
  j["feat_stride"] = cfg.feat_stride;
  j["anchor_sizes"] = cfg.anchor_sizes;
  j["roi_pool"] = cfg.roi_pool;
  j["roi_cap"] = cfg.roi_cap;
  j["head_hidden"] = cfg.head_hidden;
  j["mask_size"] = cfg.mask_size;
  j["meta_input_size"] = cfg.meta_input_size;
  j["with_attention"] = cfg.with_attention;
  j["with_multiway"] = cfg.with_multiway;
  j["with_mask"] = cfg.with_mask;
  j["with_image_level"] = cfg.with_image_level;
  j["fusion"] = fusion_name(cfg.fusion);
  j["unshare_trunk"] = cfg.unshare_trunk;
  j["init_seed"] = cfg.init_seed;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.widths = j.at("widths").get<std::vector<int>>();
  cfg.feat_stride = j.at("feat_stride").get<int>();
  cfg.anchor_sizes = j.at("anchor_sizes").get<std::vector<float>>();
  cfg.roi_pool = j.at("roi_pool").get<int>();
  cfg.roi_cap = j.at("roi_cap").get<int>();
  cfg.head_hidden = j.at("head_hidden").get<int>();
  cfg.mask_size = j.at("mask_size").get<int>();
  cfg.meta_input_size = j.at("meta_input_size").get<int>();
  cfg.with_attention = j.at("with_attention").get<bool>();
  cfg.with_multiway = j.at("with_multiway").get<bool>();
  cfg.with_mask = j.at("with_mask").get<bool>();
  cfg.with_image_level = j.at("with_image_level").get<bool>();
  cfg.fusion = fusion_from_name(j.at("fusion").get<std::string>());
  cfg.unshare_trunk = j.at("unshare_trunk").get<bool>();
  cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  return cfg;
}

Model<float> load_model(const std::string& path, nlohmann::json* full_config) {
  auto ckpt = read_checkpoint(path);
  Model<float> model(model_config_from_json(ckpt.config.at("model")));
  load_into_model(ckpt, model);
  if (full_config) *full_config = ckpt.config;
  return model;
}

}  // namespace fewdet
