#pragma once

#include <string>

#include <json.hpp>

#include "fewdet/dataset.hpp"
#include "fewdet/evalmod.hpp"
#include "fewdet/model.hpp"
#include "fewdet/train.hpp"

namespace fewdet {

struct DataConfig {
  std::string dir = "data";
  int train_images = 2000;
  int test_images = 300;
  int canvas = 128;
  int min_objects = 1;
  int max_objects = 5;
  float max_overlap_iou = 0.3f;
  std::vector<std::string> novel_classes;  // empty -> last four of the universe
  int split_id = 0;
};

struct EvalSection {
  EvalConfig eval;
  std::string classes = "all";  // all|base|novel
  int k_shot = -1;              // -1 -> use train.k_shot
  bool use_mask_ap = false;
};

// The union of datagen / model / train / eval settings plus output directory
// and seed. Unknown keys anywhere are hard errors; the key reference lives in
// docs/config_schema.json.
struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/out";
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  EvalSection eval;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json run_config_to_json(const RunConfig& cfg);

}  // namespace fewdet
