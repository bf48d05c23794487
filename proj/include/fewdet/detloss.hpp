#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fewdet/dataset.hpp"
#include "fewdet/model.hpp"
#include "fewdet/rng.hpp"

namespace fewdet {

// Ground truth visible to the loss: labeled objects plus boxes to ignore
// (objects outside the phase's class set or outside the few-shot registry).
// RoIs and anchors overlapping ignored boxes are excluded from sampling, so
// those objects are neither foreground nor background.
struct GtSet {
  std::vector<Box> boxes;
  std::vector<int> classes;
  std::vector<const BitMask*> masks;
  std::vector<Box> ignored;
};

struct MatcherConfig {
  float rpn_pos_iou = 0.5f;
  float rpn_neg_iou = 0.3f;
  int rpn_sample = 32;
  int rpn_max_pos = 16;
  float roi_fg_iou = 0.5f;
  int roi_sample = 32;
  int roi_max_fg = 8;
  float ignore_iou = 0.3f;
};

struct RpnTargets {
  std::vector<std::int64_t> obj_flat;  // into the {A,H',W'} logit tensor
  std::vector<std::int64_t> reg_flat;  // into the {4A,H',W'} delta tensor
  std::vector<float> obj_labels;
  std::vector<float> reg_values;
  int n_pos = 0;
};

inline RpnTargets rpn_targets(const std::vector<Box>& anchor_boxes, int fh, int fw,
                              int anchors_per_cell, const GtSet& gt, const MatcherConfig& mc,
                              Rng& rng) {
  const int n = static_cast<int>(anchor_boxes.size());
  std::vector<int> label(static_cast<std::size_t>(n), 0);  // 1 pos, 0 neg, -1 excluded
  std::vector<int> argmax(static_cast<std::size_t>(n), -1);

  std::vector<double> best_per_gt(gt.boxes.size(), 0.0);
  std::vector<int> best_anchor(gt.boxes.size(), -1);
  for (int i = 0; i < n; ++i) {
    double best = 0.0;
    for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
      const double v = iou(anchor_boxes[static_cast<std::size_t>(i)], gt.boxes[g]);
      if (v > best) {
        best = v;
        argmax[static_cast<std::size_t>(i)] = static_cast<int>(g);
      }
      if (v > best_per_gt[g]) {
        best_per_gt[g] = v;
        best_anchor[g] = i;
      }
    }
    double ign = 0.0;
    for (const auto& ib : gt.ignored)
      ign = std::max(ign, iou(anchor_boxes[static_cast<std::size_t>(i)], ib));
    if (best >= mc.rpn_pos_iou)
      label[static_cast<std::size_t>(i)] = 1;
    else if (ign >= mc.ignore_iou)
      label[static_cast<std::size_t>(i)] = -1;
    else if (best < mc.rpn_neg_iou)
      label[static_cast<std::size_t>(i)] = 0;
    else
      label[static_cast<std::size_t>(i)] = -1;
  }
  // The best anchor for each labeled object is always positive.
  for (std::size_t g = 0; g < gt.boxes.size(); ++g)
    if (best_anchor[g] >= 0 && best_per_gt[g] > 0.0) {
      label[static_cast<std::size_t>(best_anchor[g])] = 1;
      argmax[static_cast<std::size_t>(best_anchor[g])] = static_cast<int>(g);
    }

  std::vector<int> pos, neg;
  for (int i = 0; i < n; ++i) {
    if (label[static_cast<std::size_t>(i)] == 1) pos.push_back(i);
    if (label[static_cast<std::size_t>(i)] == 0) neg.push_back(i);
  }
  rng.shuffle(pos);
  rng.shuffle(neg);
  if (static_cast<int>(pos.size()) > mc.rpn_max_pos) pos.resize(static_cast<std::size_t>(mc.rpn_max_pos));
  const int want_neg = std::max(0, mc.rpn_sample - static_cast<int>(pos.size()));
  if (static_cast<int>(neg.size()) > want_neg) neg.resize(static_cast<std::size_t>(want_neg));

  RpnTargets t;
  t.n_pos = static_cast<int>(pos.size());
  const auto plane = static_cast<std::int64_t>(fh) * fw;
  auto to_logit_flat = [&](int k) {
    const int ai = k % anchors_per_cell;
    const int cell = k / anchors_per_cell;
    const int y = cell / fw, x = cell % fw;
    return (static_cast<std::int64_t>(ai) * fh + y) * fw + x;
  };
  for (int k : pos) {
    t.obj_flat.push_back(to_logit_flat(k));
    t.obj_labels.push_back(1.0f);
    const auto enc = box_encode(gt.boxes[static_cast<std::size_t>(argmax[static_cast<std::size_t>(k)])],
                                anchor_boxes[static_cast<std::size_t>(k)]);
    const int ai = k % anchors_per_cell;
    const int cell = k / anchors_per_cell;
    const int y = cell / fw, x = cell % fw;
    for (int c = 0; c < 4; ++c) {
      t.reg_flat.push_back((static_cast<std::int64_t>(4 * ai + c) * fh + y) * fw + x);
      t.reg_values.push_back(enc[static_cast<std::size_t>(c)]);
    }
    (void)plane;
  }
  for (int k : neg) {
    t.obj_flat.push_back(to_logit_flat(k));
    t.obj_labels.push_back(0.0f);
  }
  return t;
}

template <typename T>
struct RpnLosses {
  Tensor<T> cls;
  Tensor<T> reg;
  int n_pos = 0;
};

template <typename T>
RpnLosses<T> rpn_loss(const RpnOut<T>& rpn, const RpnTargets& t) {
  RpnLosses<T> out;
  out.n_pos = t.n_pos;
  if (t.obj_flat.empty()) throw data_error("rpn_loss: empty anchor batch");
  std::vector<T> labels(t.obj_labels.begin(), t.obj_labels.end());
  out.cls = bce_with_logits(gather(reshape(rpn.obj_logits, {static_cast<int>(rpn.obj_logits.numel())}),
                                   t.obj_flat),
                            labels);
  if (!t.reg_flat.empty()) {
    std::vector<T> targets(t.reg_values.begin(), t.reg_values.end());
    out.reg = smooth_l1_mean(gather(reshape(rpn.deltas, {static_cast<int>(rpn.deltas.numel())}),
                                    t.reg_flat),
                             targets, T(1) / T(9));
  } else {
    out.reg = Tensor<T>::scalar(T(0));
  }
  return out;
}

// Sampled second-stage batch: boxes fed to RoIAlign plus their match labels.
struct RoiBatch {
  std::vector<Box> boxes;
  std::vector<int> matched_class;  // -1 for background
  std::vector<int> matched_gt;     // index into GtSet, -1 for background
};

inline RoiBatch sample_rois(const std::vector<Proposal>& proposals, const GtSet& gt,
                            const MatcherConfig& mc, Rng& rng, bool append_gt = true) {
  std::vector<Box> cands;
  for (const auto& p : proposals) cands.push_back(p.box);
  if (append_gt)
    for (const auto& b : gt.boxes) cands.push_back(b);
  if (cands.empty()) throw data_error("sample_rois: empty batch (no proposals, no ground truth)");

  std::vector<int> fg, bg;
  std::vector<int> match(cands.size(), -1);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    double best = 0.0;
    int arg = -1;
    for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
      const double v = iou(cands[i], gt.boxes[g]);
      if (v > best) {
        best = v;
        arg = static_cast<int>(g);
      }
    }
    double ign = 0.0;
    for (const auto& ib : gt.ignored) ign = std::max(ign, iou(cands[i], ib));
    if (best >= mc.roi_fg_iou) {
      match[i] = arg;
      fg.push_back(static_cast<int>(i));
    } else if (ign >= mc.roi_fg_iou) {
      // Covers an ignored object: excluded entirely.
    } else {
      bg.push_back(static_cast<int>(i));
    }
  }
  rng.shuffle(fg);
  rng.shuffle(bg);
  if (static_cast<int>(fg.size()) > mc.roi_max_fg) fg.resize(static_cast<std::size_t>(mc.roi_max_fg));
  const int want_bg = std::max(0, mc.roi_sample - static_cast<int>(fg.size()));
  if (static_cast<int>(bg.size()) > want_bg) bg.resize(static_cast<std::size_t>(want_bg));

  RoiBatch batch;
  for (int i : fg) {
    batch.boxes.push_back(cands[static_cast<std::size_t>(i)]);
    batch.matched_gt.push_back(match[static_cast<std::size_t>(i)]);
    batch.matched_class.push_back(gt.classes[static_cast<std::size_t>(match[static_cast<std::size_t>(i)])]);
  }
  for (int i : bg) {
    batch.boxes.push_back(cands[static_cast<std::size_t>(i)]);
    batch.matched_gt.push_back(-1);
    batch.matched_class.push_back(-1);
  }
  if (batch.boxes.empty()) throw data_error("sample_rois: empty batch after matching");
  return batch;
}

// GT mask cropped to the box and resampled (nearest) to an M×M grid.
template <typename T>
std::vector<T> mask_target(const BitMask& gt_mask, const Box& box, int m) {
  std::vector<T> out(static_cast<std::size_t>(m) * m, T(0));
  for (int i = 0; i < m; ++i) {
    const float fy = box.y1 + (static_cast<float>(i) + 0.5f) * box.height() / static_cast<float>(m);
    int y = static_cast<int>(fy);
    y = std::min(std::max(y, 0), gt_mask.height - 1);
    for (int j = 0; j < m; ++j) {
      const float fx = box.x1 + (static_cast<float>(j) + 0.5f) * box.width() / static_cast<float>(m);
      int x = static_cast<int>(fx);
      x = std::min(std::max(x, 0), gt_mask.width - 1);
      out[static_cast<std::size_t>(i) * m + j] = gt_mask.at(y, x) ? T(1) : T(0);
    }
  }
  return out;
}

template <typename T>
struct DetLosses {
  Tensor<T> cls;
  Tensor<T> reg;
  Tensor<T> mask;
  int n_pos = 0;
};

namespace detail_loss {

template <typename T>
void reg_and_mask(const HeadOutput<T>& out, const RoiBatch& batch, const GtSet& gt,
                  const std::vector<int>& pos, bool with_mask, int mask_size, DetLosses<T>& losses) {
  if (pos.empty()) {
    losses.reg = Tensor<T>::scalar(T(0));
    losses.mask = Tensor<T>::scalar(T(0));
    return;
  }
  const int p = static_cast<int>(pos.size());
  std::vector<T> reg_targets(static_cast<std::size_t>(4) * p);
  for (int j = 0; j < p; ++j) {
    const int r = pos[static_cast<std::size_t>(j)];
    const auto enc = box_encode(gt.boxes[static_cast<std::size_t>(batch.matched_gt[static_cast<std::size_t>(r)])],
                                batch.boxes[static_cast<std::size_t>(r)]);
    for (int c = 0; c < 4; ++c) reg_targets[static_cast<std::size_t>(c) * p + j] = enc[static_cast<std::size_t>(c)];
  }
  losses.reg = smooth_l1_mean(select_columns(out.deltas, pos), reg_targets, T(1) / T(9));
  if (with_mask) {
    const int mm = mask_size * mask_size;
    std::vector<T> mask_targets(static_cast<std::size_t>(mm) * p);
    for (int j = 0; j < p; ++j) {
      const int r = pos[static_cast<std::size_t>(j)];
      const auto tgt = mask_target<T>(*gt.masks[static_cast<std::size_t>(batch.matched_gt[static_cast<std::size_t>(r)])],
                                      batch.boxes[static_cast<std::size_t>(r)], mask_size);
      for (int i = 0; i < mm; ++i) mask_targets[static_cast<std::size_t>(i) * p + j] = tgt[static_cast<std::size_t>(i)];
    }
    losses.mask = bce_with_logits(select_columns(out.mask, pos), mask_targets);
  } else {
    losses.mask = Tensor<T>::scalar(T(0));
  }
}

}  // namespace detail_loss

// Binary per-class losses: an RoI is positive iff its matched ground-truth
// class equals the class whose attentive vector produced these head outputs.
template <typename T>
DetLosses<T> detection_losses(const HeadOutput<T>& out, int attended_class, const RoiBatch& batch,
                              const GtSet& gt, bool with_mask, int mask_size) {
  const int r = static_cast<int>(batch.boxes.size());
  if (r == 0) throw data_error("detection_losses: empty batch");
  if (out.cls.dim(0) != 2) throw dimension_error("detection_losses: expected binary logits");
  std::vector<int> labels(static_cast<std::size_t>(r), 0);
  std::vector<int> pos;
  for (int i = 0; i < r; ++i)
    if (batch.matched_class[static_cast<std::size_t>(i)] == attended_class) {
      labels[static_cast<std::size_t>(i)] = 1;
      pos.push_back(i);
    }
  DetLosses<T> losses;
  losses.n_pos = static_cast<int>(pos.size());
  losses.cls = softmax_cross_entropy_cols(out.cls, labels);
  detail_loss::reg_and_mask(out, batch, gt, pos, with_mask, mask_size, losses);
  return losses;
}

// Plain (N+1)-way losses for the unattended detector.
template <typename T>
DetLosses<T> detection_losses_multiway(const HeadOutput<T>& out, int num_classes,
                                       const RoiBatch& batch, const GtSet& gt, bool with_mask,
                                       int mask_size) {
  const int r = static_cast<int>(batch.boxes.size());
  if (r == 0) throw data_error("detection_losses: empty batch");
  if (out.cls.dim(0) != num_classes + 1)
    throw dimension_error("detection_losses_multiway: logit arity mismatch");
  std::vector<int> labels(static_cast<std::size_t>(r), num_classes);
  std::vector<int> pos;
  for (int i = 0; i < r; ++i)
    if (batch.matched_class[static_cast<std::size_t>(i)] >= 0) {
      labels[static_cast<std::size_t>(i)] = batch.matched_class[static_cast<std::size_t>(i)];
      pos.push_back(i);
    }
  DetLosses<T> losses;
  losses.n_pos = static_cast<int>(pos.size());
  losses.cls = softmax_cross_entropy_cols(out.cls, labels);
  detail_loss::reg_and_mask(out, batch, gt, pos, with_mask, mask_size, losses);
  return losses;
}

}  // namespace fewdet
