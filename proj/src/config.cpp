#include "fewdet/config.hpp"

#include "fewdet/checkpoint.hpp"

#include <fstream>
#include <set>

using json = nlohmann::json;

namespace fewdet {

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw config_error(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw config_error(where + ": unknown key '" + key + "'");
}

template <typename T>
T take(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw config_error("config key '" + key + "' has the wrong type");
  }
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  check_keys(j, {"seed", "out_dir", "data", "model", "train", "eval"}, "config");
  RunConfig cfg;
  cfg.seed = take<std::uint64_t>(j, "seed", cfg.seed);
  cfg.out_dir = take<std::string>(j, "out_dir", cfg.out_dir);

  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d,
               {"dir", "train_images", "test_images", "canvas", "min_objects", "max_objects",
                "max_overlap_iou", "novel_classes", "split_id"},
               "config.data");
    cfg.data.dir = take<std::string>(d, "dir", cfg.data.dir);
    cfg.data.train_images = take<int>(d, "train_images", cfg.data.train_images);
    cfg.data.test_images = take<int>(d, "test_images", cfg.data.test_images);
    cfg.data.canvas = take<int>(d, "canvas", cfg.data.canvas);
    cfg.data.min_objects = take<int>(d, "min_objects", cfg.data.min_objects);
    cfg.data.max_objects = take<int>(d, "max_objects", cfg.data.max_objects);
    cfg.data.max_overlap_iou = take<float>(d, "max_overlap_iou", cfg.data.max_overlap_iou);
    cfg.data.novel_classes =
        take<std::vector<std::string>>(d, "novel_classes", cfg.data.novel_classes);
    cfg.data.split_id = take<int>(d, "split_id", cfg.data.split_id);
    if (cfg.data.train_images < 1 || cfg.data.test_images < 1)
      throw config_error("config.data: image counts must be >= 1");
    if (cfg.data.min_objects < 1 || cfg.data.max_objects < cfg.data.min_objects)
      throw config_error("config.data: bad object count range");
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m,
               {"widths", "feat_stride", "anchor_sizes", "roi_pool", "roi_cap", "head_hidden", "mask_size",
                "meta_input_size"},
               "config.model");
    cfg.model.widths = take<std::vector<int>>(m, "widths", cfg.model.widths);
    cfg.model.feat_stride = take<int>(m, "feat_stride", cfg.model.feat_stride);
    cfg.model.anchor_sizes = take<std::vector<float>>(m, "anchor_sizes", cfg.model.anchor_sizes);
    cfg.model.roi_pool = take<int>(m, "roi_pool", cfg.model.roi_pool);
    cfg.model.roi_cap = take<int>(m, "roi_cap", cfg.model.roi_cap);
    cfg.model.head_hidden = take<int>(m, "head_hidden", cfg.model.head_hidden);
    cfg.model.mask_size = take<int>(m, "mask_size", cfg.model.mask_size);
    cfg.model.meta_input_size = take<int>(m, "meta_input_size", cfg.model.meta_input_size);
    if (cfg.model.widths.size() != 4) throw config_error("config.model.widths must list 4 blocks");
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t,
               {"strategy", "k_shot", "phase1_iters", "phase2_iters", "phase1_shots", "lr",
                "momentum", "weight_decay", "clip_norm", "meta_loss_weight", "lr_decay", "lambda_mask", "meta_loss", "meta_scope", "fusion",
                "unshare", "ft_full_window", "ft_full_min_improve", "ft_full_max_iters",
                "checkpoint_every", "rpn_pre_nms", "rpn_post_nms", "resume_from"},
               "config.train");
    cfg.train.strategy =
        strategy_from_name(take<std::string>(t, "strategy", strategy_name(cfg.train.strategy)));
    cfg.train.k_shot = take<int>(t, "k_shot", cfg.train.k_shot);
    cfg.train.phase1_iters = take<int>(t, "phase1_iters", cfg.train.phase1_iters);
    cfg.train.phase2_iters = take<int>(t, "phase2_iters", cfg.train.phase2_iters);
    cfg.train.phase1_shots = take<int>(t, "phase1_shots", cfg.train.phase1_shots);
    cfg.train.lr = take<float>(t, "lr", cfg.train.lr);
    cfg.train.momentum = take<float>(t, "momentum", cfg.train.momentum);
    cfg.train.weight_decay = take<float>(t, "weight_decay", cfg.train.weight_decay);
    cfg.train.clip_norm = take<float>(t, "clip_norm", cfg.train.clip_norm);
    cfg.train.meta_loss_weight = take<float>(t, "meta_loss_weight", cfg.train.meta_loss_weight);
    cfg.train.lr_decay = take<float>(t, "lr_decay", cfg.train.lr_decay);
    cfg.train.lambda_mask = take<int>(t, "lambda_mask", cfg.train.lambda_mask);
    cfg.train.meta_loss_on = take<bool>(t, "meta_loss", cfg.train.meta_loss_on);
    cfg.train.scope = scope_from_name(take<std::string>(t, "meta_scope", scope_name(cfg.train.scope)));
    cfg.train.fusion = fusion_from_name(take<std::string>(t, "fusion", fusion_name(cfg.train.fusion)));
    cfg.train.unshare = take<bool>(t, "unshare", cfg.train.unshare);
    cfg.train.ft_full_window = take<int>(t, "ft_full_window", cfg.train.ft_full_window);
    cfg.train.ft_full_min_improve =
        take<float>(t, "ft_full_min_improve", cfg.train.ft_full_min_improve);
    cfg.train.ft_full_max_iters = take<int>(t, "ft_full_max_iters", cfg.train.ft_full_max_iters);
    cfg.train.checkpoint_every = take<int>(t, "checkpoint_every", cfg.train.checkpoint_every);
    cfg.train.rpn_pre_nms = take<int>(t, "rpn_pre_nms", cfg.train.rpn_pre_nms);
    cfg.train.rpn_post_nms = take<int>(t, "rpn_post_nms", cfg.train.rpn_post_nms);
    cfg.train.resume_from = take<std::string>(t, "resume_from", cfg.train.resume_from);
    if (cfg.train.k_shot < 1) throw config_error("config.train.k_shot must be >= 1");
    if (cfg.train.lambda_mask != 0 && cfg.train.lambda_mask != 1)
      throw config_error("config.train.lambda_mask must be 0 or 1");
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e,
               {"objectness_threshold", "nms_iou", "iou_threshold", "rpn_pre_nms", "rpn_post_nms",
                "classes", "k_shot", "use_mask_ap"},
               "config.eval");
    cfg.eval.eval.objectness_threshold =
        take<double>(e, "objectness_threshold", cfg.eval.eval.objectness_threshold);
    cfg.eval.eval.nms_iou = take<double>(e, "nms_iou", cfg.eval.eval.nms_iou);
    cfg.eval.eval.iou_threshold = take<double>(e, "iou_threshold", cfg.eval.eval.iou_threshold);
    cfg.eval.eval.rpn_pre_nms = take<int>(e, "rpn_pre_nms", cfg.eval.eval.rpn_pre_nms);
    cfg.eval.eval.rpn_post_nms = take<int>(e, "rpn_post_nms", cfg.eval.eval.rpn_post_nms);
    cfg.eval.classes = take<std::string>(e, "classes", cfg.eval.classes);
    cfg.eval.k_shot = take<int>(e, "k_shot", cfg.eval.k_shot);
    cfg.eval.use_mask_ap = take<bool>(e, "use_mask_ap", cfg.eval.use_mask_ap);
    if (cfg.eval.classes != "all" && cfg.eval.classes != "base" && cfg.eval.classes != "novel")
      throw config_error("config.eval.classes must be all, base or novel");
  }

  // The RoI cap doubles as the kept-proposal count at test time.
  cfg.eval.eval.rpn_post_nms = std::min(cfg.eval.eval.rpn_post_nms, cfg.model.roi_cap);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw config_error("cannot open config file " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw config_error("config parse error in " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

json run_config_to_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  json d;
  d["dir"] = cfg.data.dir;
  d["train_images"] = cfg.data.train_images;
  d["test_images"] = cfg.data.test_images;
  d["canvas"] = cfg.data.canvas;
  d["min_objects"] = cfg.data.min_objects;
  d["max_objects"] = cfg.data.max_objects;
  d["max_overlap_iou"] = cfg.data.max_overlap_iou;
  d["novel_classes"] = cfg.data.novel_classes;
  d["split_id"] = cfg.data.split_id;
  j["data"] = d;
  j["model"] = model_config_to_json(cfg.model);
  j["train"] = train_config_to_json(cfg.train);
  json e;
  e["objectness_threshold"] = cfg.eval.eval.objectness_threshold;
  e["nms_iou"] = cfg.eval.eval.nms_iou;
  e["iou_threshold"] = cfg.eval.eval.iou_threshold;
  e["rpn_pre_nms"] = cfg.eval.eval.rpn_pre_nms;
  e["rpn_post_nms"] = cfg.eval.eval.rpn_post_nms;
  e["classes"] = cfg.eval.classes;
  e["k_shot"] = cfg.eval.k_shot;
  e["use_mask_ap"] = cfg.eval.use_mask_ap;
  j["eval"] = e;
  return j;
}

}  // namespace fewdet
