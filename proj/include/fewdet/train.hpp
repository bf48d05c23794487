#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewdet/detloss.hpp"
#include "fewdet/episode.hpp"
#include "fewdet/model.hpp"

namespace fewdet {

enum class Strategy { meta_rcnn, frcn_joint, frcn_ft, frcn_ft_full, full_image_meta };

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& s);

struct TrainConfig {
  Strategy strategy = Strategy::meta_rcnn;
  int k_shot = 3;
  int phase1_iters = 2000;
  int phase2_iters = 500;
  // Meta-set draw size during phase 1 (the base pool is not shot-limited, so
  // the per-episode reference count is a free parameter; phase 2 uses K).
  int phase1_shots = 3;
  float lr = 0.02f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  float clip_norm = 5.0f;  // global gradient-norm cap; 0 disables
  float meta_loss_weight = 1.0f;
  float lr_decay = 0.1f;  // applied once, between the phases
  int lambda_mask = 0;
  bool meta_loss_on = true;
  MetaScope scope = MetaScope::image_classes;
  FusionMode fusion = FusionMode::channelwise;
  bool unshare = false;
  // "Train to full convergence": stop when the windowed mean of the total
  // loss improves by less than min_improve over one window.
  int ft_full_window = 200;
  float ft_full_min_improve = 0.01f;
  int ft_full_max_iters = 4000;
  int checkpoint_every = 0;  // phase-2 checkpoint cadence; 0 = off
  std::uint64_t seed = 1;
  int rpn_pre_nms = 192;
  int rpn_post_nms = 48;
  MatcherConfig matcher;
  std::string resume_from;  // checkpoint path; skips phase 1 when set
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct LossBreakdown {
  int iter = 0;
  int phase = 0;
  float cls = 0, reg = 0, mask = 0, meta = 0, total = 0;
  float rpn_cls = 0, rpn_reg = 0, det_cls = 0, det_reg = 0;
  bool has_mask = false;
  float lr = 0;
  std::vector<int> c_meta;
};

class Sgd {
 public:
  Sgd(std::vector<std::pair<std::string, TensorF>> params, float momentum,
      float weight_decay = 0.0f, float clip_norm = 0.0f)
      : params_(std::move(params)),
        momentum_(momentum),
        weight_decay_(weight_decay),
        clip_norm_(clip_norm) {}

  void step(float lr);
  void zero_grad();

 private:
  std::vector<std::pair<std::string, TensorF>> params_;
  std::vector<std::vector<float>> velocity_;
  float momentum_;
  float weight_decay_;
  float clip_norm_;
};

// One gradient update on the Eq.-style objective:
//   total = L_cls + L_reg + lambda * L_mask + L_meta
// where the detection terms come from per-class binary heads under each
// object attentive vector (meta strategies) or the (N+1)-way head (plain).
LossBreakdown train_step(ModelF& model, Sgd& opt, const Episode& ep, const TrainConfig& cfg,
                         int phase, int iter, float lr, Rng& rng);

struct TrainResult {
  std::unique_ptr<ModelF> model;
  FewShotRegistry registry_phase1;
  FewShotRegistry registry_phase2;
  std::vector<LossBreakdown> log;
  nlohmann::json snapshot;  // model + train config, embedded in checkpoints
  std::string final_checkpoint;  // path, when out_dir was given
};

ModelConfig model_config_for(const TrainConfig& cfg, const ModelConfig& base);

// Runs the strategy's full schedule over the manifest. When out_dir is
// non-empty, writes log.jsonl, the phase-2 registry, periodic phase-2
// checkpoints and checkpoint_final.bin there.
TrainResult run_schedule(const DatasetManifest& manifest, const ClassSplit& split,
                         const TrainConfig& cfg, const ModelConfig& base_model,
                         const std::string& out_dir = "");

}  // namespace fewdet
