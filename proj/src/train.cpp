#include "fewdet/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "fewdet/checkpoint.hpp"
#include "fewdet/version.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace fewdet {

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::meta_rcnn: return "meta_rcnn";
    case Strategy::frcn_joint: return "frcn_joint";
    case Strategy::frcn_ft: return "frcn_ft";
    case Strategy::frcn_ft_full: return "frcn_ft_full";
    case Strategy::full_image_meta: return "full_image_meta";
  }
  return "?";
}

Strategy strategy_from_name(const std::string& s) {
  if (s == "meta_rcnn") return Strategy::meta_rcnn;
  if (s == "frcn_joint") return Strategy::frcn_joint;
  if (s == "frcn_ft") return Strategy::frcn_ft;
  if (s == "frcn_ft_full") return Strategy::frcn_ft_full;
  if (s == "full_image_meta") return Strategy::full_image_meta;
  throw config_error("unknown strategy '" + s +
                     "' (meta_rcnn|frcn_joint|frcn_ft|frcn_ft_full|full_image_meta)");
}

json train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["strategy"] = strategy_name(cfg.strategy);
  j["k_shot"] = cfg.k_shot;
  j["phase1_iters"] = cfg.phase1_iters;
  j["phase2_iters"] = cfg.phase2_iters;
  j["phase1_shots"] = cfg.phase1_shots;
  j["lr"] = cfg.lr;
  j["momentum"] = cfg.momentum;
  j["weight_decay"] = cfg.weight_decay;
  j["clip_norm"] = cfg.clip_norm;
  j["meta_loss_weight"] = cfg.meta_loss_weight;
  j["lr_decay"] = cfg.lr_decay;
  j["lambda_mask"] = cfg.lambda_mask;
  j["meta_loss"] = cfg.meta_loss_on;
  j["meta_scope"] = scope_name(cfg.scope);
  j["fusion"] = fusion_name(cfg.fusion);
  j["unshare"] = cfg.unshare;
  j["ft_full_window"] = cfg.ft_full_window;
  j["ft_full_min_improve"] = cfg.ft_full_min_improve;
  j["ft_full_max_iters"] = cfg.ft_full_max_iters;
  j["checkpoint_every"] = cfg.checkpoint_every;
  j["seed"] = cfg.seed;
  j["rpn_pre_nms"] = cfg.rpn_pre_nms;
  j["rpn_post_nms"] = cfg.rpn_post_nms;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig cfg;
  cfg.strategy = strategy_from_name(j.at("strategy").get<std::string>());
  cfg.k_shot = j.at("k_shot").get<int>();
  cfg.phase1_iters = j.at("phase1_iters").get<int>();
  cfg.phase2_iters = j.at("phase2_iters").get<int>();
  cfg.phase1_shots = j.at("phase1_shots").get<int>();
  cfg.lr = j.at("lr").get<float>();
  cfg.momentum = j.at("momentum").get<float>();
  cfg.weight_decay = j.at("weight_decay").get<float>();
  cfg.clip_norm = j.at("clip_norm").get<float>();
  cfg.meta_loss_weight = j.at("meta_loss_weight").get<float>();
  cfg.lr_decay = j.at("lr_decay").get<float>();
  cfg.lambda_mask = j.at("lambda_mask").get<int>();
  cfg.meta_loss_on = j.at("meta_loss").get<bool>();
  cfg.scope = scope_from_name(j.at("meta_scope").get<std::string>());
  cfg.fusion = fusion_from_name(j.at("fusion").get<std::string>());
  cfg.unshare = j.at("unshare").get<bool>();
  cfg.ft_full_window = j.at("ft_full_window").get<int>();
  cfg.ft_full_min_improve = j.at("ft_full_min_improve").get<float>();
  cfg.ft_full_max_iters = j.at("ft_full_max_iters").get<int>();
  cfg.checkpoint_every = j.at("checkpoint_every").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.rpn_pre_nms = j.at("rpn_pre_nms").get<int>();
  cfg.rpn_post_nms = j.at("rpn_post_nms").get<int>();
  return cfg;
}

void Sgd::step(float lr) {
  if (clip_norm_ > 0) {
    double sq = 0;
    for (auto& [name, p] : params_)
      for (float g : p.grad()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm > clip_norm_) {
      const float s = static_cast<float>(clip_norm_ / norm);
      for (auto& [name, p] : params_)
        for (auto& g : p.grad()) g *= s;
    }
  }
  if (velocity_.empty()) {
    velocity_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i)
      velocity_[i].assign(params_[i].second.value().size(), 0.0f);
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].second;
    auto& g = t.grad();
    auto& v = velocity_[i];
    auto& w = t.value();
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j] + weight_decay_ * w[j];
      w[j] -= lr * v[j];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

ModelConfig model_config_for(const TrainConfig& cfg, const ModelConfig& base) {
  ModelConfig m = base;
  const bool meta = cfg.strategy == Strategy::meta_rcnn || cfg.strategy == Strategy::full_image_meta;
  m.with_attention = meta;
  m.with_multiway = !meta;
  m.with_image_level = cfg.strategy == Strategy::full_image_meta;
  m.with_mask = cfg.lambda_mask != 0;
  m.fusion = cfg.fusion;
  m.unshare_trunk = cfg.unshare;
  if (m.init_seed == 0) m.init_seed = cfg.seed;
  return m;
}

namespace {

GtSet gt_from_episode(const Episode& ep) {
  GtSet gt;
  for (int i : ep.labeled) {
    const auto& a = ep.sample.annotations[static_cast<std::size_t>(i)];
    gt.boxes.push_back(a.bbox);
    gt.classes.push_back(a.class_id);
    gt.masks.push_back(&a.mask);
  }
  for (int i : ep.ignored)
    gt.ignored.push_back(ep.sample.annotations[static_cast<std::size_t>(i)].bbox);
  return gt;
}

float checked(const TensorF& t, const char* component) {
  const float v = t.item();
  if (!std::isfinite(v)) throw numerical_error(std::string("non-finite loss component ") + component);
  return v;
}

}  // namespace

LossBreakdown train_step(ModelF& model, Sgd& opt, const Episode& ep, const TrainConfig& cfg,
                         int phase, int iter, float lr, Rng& rng) {
  const bool meta = cfg.strategy == Strategy::meta_rcnn || cfg.strategy == Strategy::full_image_meta;
  const bool with_mask = cfg.lambda_mask != 0;

  const GtSet gt = gt_from_episode(ep);
  auto img = image_to_tensor<float>(ep.sample.image);
  auto fm = model.backbone_forward(img);
  auto rpn = model.rpn_forward(fm);

  const auto anchor_boxes = model.anchors(rpn.fh, rpn.fw);
  const auto rtargets =
      rpn_targets(anchor_boxes, rpn.fh, rpn.fw, model.cfg.anchors_per_cell(), gt, cfg.matcher, rng);
  auto rlosses = rpn_loss(rpn, rtargets);

  std::vector<Proposal> proposals;
  {
    NoGradGuard ng;
    proposals = model.rpn_propose(rpn, ep.sample.image.width, ep.sample.image.height,
                                  cfg.rpn_pre_nms, cfg.rpn_post_nms);
  }
  const RoiBatch batch = sample_rois(proposals, gt, cfg.matcher, rng, true);

  TensorF Z;
  if (cfg.strategy == Strategy::full_image_meta) {
    // Image-level variant: a single pooled column broadcast to every RoI.
    auto col = model.image_column(fm);
    Z = channelwise_mul(TensorF::full({model.cfg.trunk_channels(),
                                       static_cast<int>(batch.boxes.size())},
                                      1.0f),
                        col);
  } else {
    Z = model.roi_columns(fm, batch.boxes);
  }

  auto det_cls = TensorF::scalar(0.0f);
  auto det_reg = TensorF::scalar(0.0f);
  auto det_mask = TensorF::scalar(0.0f);
  auto l_meta = TensorF::scalar(0.0f);

  if (meta) {
    std::map<int, std::vector<TensorF>> by_class;
    std::vector<TensorF> all_vectors;
    std::vector<int> all_labels;
    for (const auto& mi : ep.meta_inputs) {
      auto v = model.infer_object_vector(meta_input_to_tensor<float>(mi));
      by_class[mi.class_id].push_back(v);
      all_vectors.push_back(v);
      all_labels.push_back(mi.class_id);
    }
    if (by_class.empty()) throw data_error("train_step: episode has no meta inputs");
    const float class_w = 1.0f / static_cast<float>(by_class.size());
    for (const auto& [cls, vecs] : by_class) {
      const float vec_w = class_w / static_cast<float>(vecs.size());
      for (const auto& v : vecs) {
        auto attended = model.remodel_rois(Z, v, cfg.fusion);
        auto out = model.predictor_head(attended, true, with_mask);
        auto losses = detection_losses(out, cls, batch, gt, with_mask, model.cfg.mask_size);
        det_cls = add(det_cls, scale(losses.cls, vec_w));
        det_reg = add(det_reg, scale(losses.reg, vec_w));
        if (with_mask) det_mask = add(det_mask, scale(losses.mask, vec_w));
      }
    }
    if (cfg.meta_loss_on) l_meta = meta_loss(model, all_vectors, all_labels);
  } else {
    auto out = model.predictor_head(Z, false, with_mask);
    auto losses =
        detection_losses_multiway(out, model.cfg.num_classes, batch, gt, with_mask, model.cfg.mask_size);
    det_cls = losses.cls;
    det_reg = losses.reg;
    if (with_mask) det_mask = losses.mask;
  }

  auto cls_total = add(rlosses.cls, det_cls);
  auto reg_total = add(rlosses.reg, det_reg);
  auto total = add(cls_total, reg_total);
  if (with_mask) total = add(total, scale(det_mask, static_cast<float>(cfg.lambda_mask)));
  total = add(total, scale(l_meta, cfg.meta_loss_weight));

  LossBreakdown out;
  out.iter = iter;
  out.phase = phase;
  out.lr = lr;
  out.c_meta = ep.c_meta;
  out.rpn_cls = checked(rlosses.cls, "rpn_cls");
  out.rpn_reg = checked(rlosses.reg, "rpn_reg");
  out.det_cls = checked(det_cls, "det_cls");
  out.det_reg = checked(det_reg, "det_reg");
  out.cls = checked(cls_total, "cls");
  out.reg = checked(reg_total, "reg");
  out.has_mask = with_mask;
  out.mask = with_mask ? checked(det_mask, "mask") : 0.0f;
  out.meta = checked(l_meta, "meta");
  out.total = checked(total, "total");

  total.backward();
  opt.step(lr);
  opt.zero_grad();
  return out;
}

namespace {

void append_log(std::ofstream* os, const LossBreakdown& lb) {
  if (!os || !os->is_open()) return;
  json j;
  j["iter"] = lb.iter;
  j["phase"] = lb.phase;
  json losses;
  losses["cls"] = lb.cls;
  losses["reg"] = lb.reg;
  losses["rpn_cls"] = lb.rpn_cls;
  losses["rpn_reg"] = lb.rpn_reg;
  losses["det_cls"] = lb.det_cls;
  losses["det_reg"] = lb.det_reg;
  if (lb.has_mask) losses["mask"] = lb.mask;
  losses["meta"] = lb.meta;
  losses["total"] = lb.total;
  j["losses"] = losses;
  j["c_meta"] = lb.c_meta;
  j["lr"] = lb.lr;
  (*os) << j.dump() << "\n";
}

}  // namespace

TrainResult run_schedule(const DatasetManifest& manifest, const ClassSplit& split,
                         const TrainConfig& cfg, const ModelConfig& base_model,
                         const std::string& out_dir) {
  if (cfg.k_shot < 1) throw config_error("run_schedule: K must be >= 1");
  if (cfg.lambda_mask != 0 && cfg.lambda_mask != 1)
    throw config_error("run_schedule: lambda must be 0 or 1");

  TrainResult result;
  const ModelConfig mcfg = model_config_for(cfg, base_model);
  result.model = std::make_unique<ModelF>(mcfg);

  result.snapshot["version"] = kFewdetVersion;
  result.snapshot["model"] = model_config_to_json(mcfg);
  result.snapshot["train"] = train_config_to_json(cfg);
  result.snapshot["classes"] = manifest.class_names;
  {
    json sn;
    sn["split_id"] = split.split_id;
    sn["base"] = split.base_classes;
    sn["novel"] = split.novel_classes;
    result.snapshot["split"] = sn;
  }

  const bool meta = cfg.strategy == Strategy::meta_rcnn || cfg.strategy == Strategy::full_image_meta;
  const bool joint = cfg.strategy == Strategy::frcn_joint;

  result.registry_phase1 = sample_kshot(manifest, split, std::max(1, cfg.phase1_shots), 1,
                                        derive_seed(cfg.seed, 0xF1));
  result.registry_phase2 = sample_kshot(manifest, split, cfg.k_shot, 2, derive_seed(cfg.seed, 0xF2));

  std::ofstream log_os;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    log_os.open(fs::path(out_dir) / "log.jsonl");
    write_registry(result.registry_phase2, manifest, (fs::path(out_dir) / "registry.json").string());
    write_split(split, manifest, (fs::path(out_dir) / "split.json").string());
  }

  Sgd opt(result.model->parameters(), cfg.momentum, cfg.weight_decay, cfg.clip_norm);

  int start_phase2_iter = 0;
  bool skip_phase1 = false;
  if (!cfg.resume_from.empty()) {
    auto ckpt = read_checkpoint(cfg.resume_from);
    load_into_model(ckpt, *result.model);
    skip_phase1 = true;
    if (ckpt.config.contains("progress") && ckpt.config["progress"].value("phase", 1) == 2)
      start_phase2_iter = ckpt.config["progress"].value("iter", 0);
  }

  auto save_ckpt = [&](const std::string& name, int phase, int iter) {
    if (out_dir.empty()) return std::string();
    json snap = result.snapshot;
    snap["progress"] = {{"phase", phase}, {"iter", iter}};
    const std::string path = (fs::path(out_dir) / name).string();
    save_checkpoint(path, *result.model, snap);
    return path;
  };

  auto run_phase = [&](int phase, int iters, float lr, const FewShotRegistry* registry,
                       int k_draw, int start_iter, bool until_converged) {
    const auto candidates = episode_candidates(manifest, registry, split, joint ? 0 : phase);
    if (candidates.empty()) throw data_error("run_schedule: no eligible training images for phase");
    std::vector<float> recent;
    int iter = start_iter;
    const int limit = until_converged ? cfg.ft_full_max_iters : iters;
    for (; iter < limit; ++iter) {
      Rng rng(derive_seed(cfg.seed, 0xA0000000ULL + static_cast<std::uint64_t>(phase) * 0x1000000ULL +
                                        static_cast<std::uint64_t>(iter)));
      const int idx = candidates[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(candidates.size()) - 1))];
      Episode ep = build_episode(manifest, idx, registry, split, joint ? 0 : phase, k_draw,
                                 cfg.scope, base_model.meta_input_size, meta, rng);
      LossBreakdown lb;
      try {
        lb = train_step(*result.model, opt, ep, cfg, phase, iter, lr, rng);
      } catch (const numerical_error& e) {
        throw numerical_error("iteration " + std::to_string(iter) + " (phase " +
                              std::to_string(phase) + "): " + e.what());
      }
      result.log.push_back(lb);
      append_log(log_os.is_open() ? &log_os : nullptr, lb);
      if (phase == 2 && cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0)
        save_ckpt("checkpoint_p2_" + std::to_string(iter + 1) + ".bin", 2, iter + 1);
      if (until_converged) {
        recent.push_back(lb.total);
        const int w = cfg.ft_full_window;
        if (static_cast<int>(recent.size()) >= 2 * w && static_cast<int>(recent.size()) % w == 0) {
          double prev = 0, last = 0;
          for (int i = 0; i < w; ++i) {
            prev += recent[recent.size() - static_cast<std::size_t>(2 * w) + static_cast<std::size_t>(i)];
            last += recent[recent.size() - static_cast<std::size_t>(w) + static_cast<std::size_t>(i)];
          }
          prev /= w;
          last /= w;
          if (prev - last < cfg.ft_full_min_improve * std::max(prev, 1e-6)) break;
        }
      }
    }
    return iter;
  };

  const float lr1 = cfg.lr;
  const float lr2 = cfg.lr * cfg.lr_decay;

  switch (cfg.strategy) {
    case Strategy::meta_rcnn:
    case Strategy::full_image_meta:
      if (!skip_phase1)
        run_phase(1, cfg.phase1_iters, lr1, &result.registry_phase1, cfg.phase1_shots, 0, false);
      save_ckpt("checkpoint_phase1.bin", 1, cfg.phase1_iters);
      run_phase(2, cfg.phase2_iters, lr2, &result.registry_phase2, cfg.k_shot, start_phase2_iter,
                false);
      break;
    case Strategy::frcn_joint:
      // Plain detector on all data for the same total iteration budget.
      run_phase(1, cfg.phase1_iters, lr1, nullptr, 0, 0, false);
      run_phase(2, cfg.phase2_iters, lr2, nullptr, 0, start_phase2_iter, false);
      break;
    case Strategy::frcn_ft:
      if (!skip_phase1) run_phase(1, cfg.phase1_iters, lr1, nullptr, 0, 0, false);
      save_ckpt("checkpoint_phase1.bin", 1, cfg.phase1_iters);
      run_phase(2, cfg.phase2_iters, lr2, &result.registry_phase2, 0, start_phase2_iter, false);
      break;
    case Strategy::frcn_ft_full:
      if (!skip_phase1) run_phase(1, cfg.phase1_iters, lr1, nullptr, 0, 0, false);
      save_ckpt("checkpoint_phase1.bin", 1, cfg.phase1_iters);
      run_phase(2, cfg.phase2_iters, lr2, &result.registry_phase2, 0, start_phase2_iter, true);
      break;
  }

  result.final_checkpoint =
      save_ckpt("checkpoint_final.bin", result.log.empty() ? 1 : result.log.back().phase,
                result.log.empty() ? 0 : result.log.back().iter + 1);
  return result;
}

}  // namespace fewdet
