#pragma once

#include <string>

#include <json.hpp>

#include "fewdet/model.hpp"

namespace fewdet {

// Versioned binary container: magic, format version, a config snapshot (JSON)
// and a name -> (dtype, shape, bytes) tensor table.
void save_checkpoint(const std::string& path, Model<float>& model, const nlohmann::json& config);

struct CheckpointData {
  nlohmann::json config;
  std::map<std::string, std::pair<std::vector<int>, std::vector<float>>> tensors;
};

CheckpointData read_checkpoint(const std::string& path);

// Restores parameters into an already constructed model (names and shapes
// must match exactly).
void load_into_model(const CheckpointData& ckpt, Model<float>& model);

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Rebuilds the model from the checkpoint's embedded model config.
Model<float> load_model(const std::string& path, nlohmann::json* full_config = nullptr);

}  // namespace fewdet
