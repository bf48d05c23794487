#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fewdet/geometry.hpp"
#include "fewdet/image.hpp"
#include "fewdet/rng.hpp"
#include "fewdet/tensor.hpp"

namespace fewdet {

// How a class-attentive vector is fused with RoI feature columns.
enum class FusionMode { channelwise, concat, plus };

inline const char* fusion_name(FusionMode m) {
  switch (m) {
    case FusionMode::channelwise: return "channelwise";
    case FusionMode::concat: return "concat";
    case FusionMode::plus: return "plus";
  }
  return "?";
}

inline FusionMode fusion_from_name(const std::string& s) {
  if (s == "channelwise") return FusionMode::channelwise;
  if (s == "concat") return FusionMode::concat;
  if (s == "plus") return FusionMode::plus;
  throw config_error("unknown fusion mode '" + s + "' (channelwise|concat|plus)");
}

struct ModelConfig {
  int num_classes = 12;
  // Stem + three trunk blocks; strides 2,2,2,1 -> feature stride 8.
  std::vector<int> widths = {16, 32, 64, 64};
  int feat_stride = 8;
  std::vector<float> anchor_sizes = {16.0f, 32.0f, 64.0f};
  int roi_pool = 7;          // RoIAlign output grid
  int roi_cap = 32;          // max kept proposals per image
  int head_hidden = 128;     // shared fc width between attention and branches
  int mask_size = 14;
  int meta_input_size = 64;
  bool with_attention = true;    // attentive stem, binary head, meta classifier
  bool with_multiway = false;    // (N+1)-way softmax head for the plain detector
  bool with_mask = false;        // mask branch activator
  bool with_image_level = false; // image-level variant: one pooled column per image
  FusionMode fusion = FusionMode::channelwise;
  bool unshare_trunk = false;    // private trunk copy for the attentive branch
  std::uint64_t init_seed = 0;

  int trunk_channels() const { return widths.back(); }
  int head_in() const {
    return fusion == FusionMode::concat ? 2 * trunk_channels() : trunk_channels();
  }
  int anchors_per_cell() const { return static_cast<int>(anchor_sizes.size()); }
};

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  int stride = 1, pad = 1;

  void init(int cin, int cout, int k, int stride_, int pad_, Rng& rng) {
    stride = stride_;
    pad = pad_;
    // Fan-in-scaled uniform with relu gain (Kaiming bound sqrt(6/fan_in)).
    const double bound = std::sqrt(6.0 / (static_cast<double>(cin) * k * k));
    std::vector<T> wd(static_cast<std::size_t>(cout) * cin * k * k);
    for (auto& v : wd) v = static_cast<T>(rng.uniform(-bound, bound));
    w = Tensor<T>::from_data({cout, cin, k, k}, std::move(wd), true);
    b = Tensor<T>::zeros({cout}, true);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct LinearLayer {
  Tensor<T> w, b;

  void init(int in, int out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::vector<T> wd(static_cast<std::size_t>(out) * in);
    for (auto& v : wd) v = static_cast<T>(rng.uniform(-bound, bound));
    w = Tensor<T>::from_data({out, in}, std::move(wd), true);
    b = Tensor<T>::zeros({out}, true);
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(w, x, b); }
};

struct Proposal {
  Box box;
  float objectness = 0.0f;
};

template <typename T>
struct RpnOut {
  Tensor<T> obj_logits;  // {A, H', W'}
  Tensor<T> deltas;      // {4A, H', W'}
  int fh = 0, fw = 0;
};

template <typename T>
struct HeadOutput {
  Tensor<T> cls;     // {2,R} binary (attended) or {N+1,R} multiway
  Tensor<T> deltas;  // {4,R}
  Tensor<T> mask;    // {M*M,R}, valid iff mask branch is active
  bool has_mask = false;
};

// The two-stage detector plus the class-attentive remodeling branch. All
// trunk blocks after the stem are shared with the attentive branch (same
// parameter tensors) unless unshare_trunk is set.
template <typename T>
struct Model {
  ModelConfig cfg;

  Conv2dLayer<T> stem;  // 3 -> w0, stride 2
  Conv2dLayer<T> trunk1, trunk2, trunk3;
  Conv2dLayer<T> attn_stem;  // 4 -> w0, stride 2
  Conv2dLayer<T> attn_trunk1, attn_trunk2, attn_trunk3;  // only if unshared
  Conv2dLayer<T> rpn_conv, rpn_obj, rpn_reg;
  LinearLayer<T> roi_proj;
  LinearLayer<T> head_fc;
  LinearLayer<T> cls_binary, cls_multiway, reg_head;
  LinearLayer<T> mask_fc1, mask_fc2;
  LinearLayer<T> meta_cls;
  LinearLayer<T> image_proj;

  explicit Model(const ModelConfig& c) : cfg(c) {
    Rng rng(derive_seed(cfg.init_seed, 0x90DE1));
    const int w0 = cfg.widths[0], w1 = cfg.widths[1], w2 = cfg.widths[2], w3 = cfg.widths[3];
    stem.init(3, w0, 3, 2, 1, rng);
    trunk1.init(w0, w1, 3, 2, 1, rng);
    trunk2.init(w1, w2, 3, 2, 1, rng);
    trunk3.init(w2, w3, 3, 1, 1, rng);
    const int a = cfg.anchors_per_cell();
    rpn_conv.init(w3, w3, 3, 1, 1, rng);
    rpn_obj.init(w3, a, 1, 1, 0, rng);
    rpn_reg.init(w3, 4 * a, 1, 1, 0, rng);
    // The projection starts as per-channel spatial averaging (plus small
    // noise), so RoI columns share the trunk's channel basis with the
    // attentive vectors from the first step; channel-wise attention depends
    // on that correspondence.
    roi_proj.init(w3 * proj_grid() * proj_grid(), w3, rng);
    {
      const int g2 = proj_grid() * proj_grid();
      const T cell = T(1) / static_cast<T>(g2);
      for (int o = 0; o < w3; ++o) {
        T* row = roi_proj.w.data() + static_cast<std::size_t>(o) * w3 * g2;
        for (int i = 0; i < w3 * g2; ++i) row[i] *= T(0.1);
        for (int k = 0; k < g2; ++k) row[o * g2 + k] += cell;
      }
    }
    head_fc.init(cfg.head_in(), cfg.head_hidden, rng);
    reg_head.init(cfg.head_hidden, 4, rng);
    if (cfg.with_attention) {
      attn_stem.init(4, w0, 3, 2, 1, rng);
      cls_binary.init(cfg.head_hidden, 2, rng);
      meta_cls.init(w3, cfg.num_classes, rng);
    }
    if (cfg.with_multiway) cls_multiway.init(cfg.head_hidden, cfg.num_classes + 1, rng);
    if (cfg.with_mask) {
      mask_fc1.init(cfg.head_hidden, 128, rng);
      mask_fc2.init(128, cfg.mask_size * cfg.mask_size, rng);
    }
    if (cfg.with_image_level) image_proj.init(w3, w3, rng);
    if (cfg.unshare_trunk) {
      attn_trunk1.init(w0, w1, 3, 2, 1, rng);
      attn_trunk2.init(w1, w2, 3, 2, 1, rng);
      attn_trunk3.init(w2, w3, 3, 1, 1, rng);
    }
  }

  int proj_grid() const { return cfg.roi_pool >= 3 ? (cfg.roi_pool - 3) / 2 + 1 : cfg.roi_pool; }

  // Early blocks are standardized per channel so activations keep a stable
  // scale from scratch at batch size 1; the last block is left raw so channel
  // energies stay class-selective for the pooled attentive vectors.
  Tensor<T> trunk_forward(const Tensor<T>& x, bool attentive_branch) const {
    const bool priv = attentive_branch && cfg.unshare_trunk;
    auto h1 = relu(instance_norm((priv ? attn_trunk1 : trunk1)(x)));
    auto h2 = relu(instance_norm((priv ? attn_trunk2 : trunk2)(h1)));
    return relu((priv ? attn_trunk3 : trunk3)(h2));
  }

  // Pixel inputs live in [0,1]; shift to [-1,1] so features are centered.
  Tensor<T> centered(const Tensor<T>& x) const {
    return scale(add(x, Tensor<T>::full(x.shape(), T(-0.5))), T(2));
  }

  // image {3,H,W} in [0,1] -> {C,H/8,W/8}
  Tensor<T> backbone_forward(const Tensor<T>& image) const {
    check_finite(image, "backbone_forward input");
    return trunk_forward(relu(instance_norm(stem(centered(image)))), false);
  }

  // 4-channel standardized object input -> attentive vector in (0,1)^C.
  // Spatial pooling is weighted by the structure-label channel downsampled to
  // the feature grid, so the pooled features describe the reference object
  // rather than the whole scene; they are then standardized across channels
  // before the gate so the vector spreads over (0,1) even for a from-scratch
  // trunk.
  Tensor<T> infer_object_vector(const Tensor<T>& meta_input) const {
    const int s = meta_input.dim(1);
    if (meta_input.dim(0) != 4) throw dimension_error("infer_object_vector: expected 4 channels");
    if (s % cfg.feat_stride != 0)
      throw config_error("meta input size must be divisible by the feature stride");
    auto fm = trunk_forward(relu(instance_norm(attn_stem(centered(meta_input)))), true);
    const int g = s / cfg.feat_stride;
    std::vector<T> weights(static_cast<std::size_t>(g) * g, T(0));
    const T* mask_plane = meta_input.data() + static_cast<std::size_t>(3) * s * s;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        weights[static_cast<std::size_t>(y / cfg.feat_stride) * g + x / cfg.feat_stride] +=
            mask_plane[static_cast<std::size_t>(y) * s + x];
    return sigmoid(standardize(weighted_avg_pool(fm, weights)));
  }

  RpnOut<T> rpn_forward(const Tensor<T>& fm) const {
    auto h = relu(rpn_conv(fm));
    RpnOut<T> out;
    out.obj_logits = rpn_obj(h);
    out.deltas = rpn_reg(h);
    out.fh = fm.dim(1);
    out.fw = fm.dim(2);
    return out;
  }

  std::vector<Box> anchors(int fh, int fw) const {
    std::vector<Box> out;
    out.reserve(static_cast<std::size_t>(fh) * fw * cfg.anchor_sizes.size());
    for (int y = 0; y < fh; ++y)
      for (int x = 0; x < fw; ++x)
        for (float s : cfg.anchor_sizes) {
          const float cx = (static_cast<float>(x) + 0.5f) * static_cast<float>(cfg.feat_stride);
          const float cy = (static_cast<float>(y) + 0.5f) * static_cast<float>(cfg.feat_stride);
          out.push_back({cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2});
        }
    return out;
  }

  // Decode + clip + NMS the raw anchor grid into scored proposals.
  std::vector<Proposal> rpn_propose(const RpnOut<T>& rpn, int img_w, int img_h, int pre_nms_top,
                                    int post_nms_top, double nms_iou = 0.7) const {
    const int a = cfg.anchors_per_cell();
    const int fh = rpn.fh, fw = rpn.fw;
    const auto anchor_boxes = anchors(fh, fw);
    const T* obj = rpn.obj_logits.data();
    const T* del = rpn.deltas.data();
    struct Cand {
      float score;
      int idx;
    };
    std::vector<Cand> cands;
    cands.reserve(anchor_boxes.size());
    for (int ai = 0; ai < a; ++ai)
      for (int y = 0; y < fh; ++y)
        for (int x = 0; x < fw; ++x) {
          const int flat = (ai * fh + y) * fw + x;
          cands.push_back({static_cast<float>(obj[flat]), flat});
        }
    const int keep_pre = std::min<int>(pre_nms_top, static_cast<int>(cands.size()));
    std::partial_sort(cands.begin(), cands.begin() + keep_pre, cands.end(),
                      [](const Cand& l, const Cand& r) {
                        return l.score != r.score ? l.score > r.score : l.idx < r.idx;
                      });
    std::vector<Box> boxes;
    std::vector<float> scores;
    std::vector<int> flats;
    for (int i = 0; i < keep_pre; ++i) {
      const int flat = cands[static_cast<std::size_t>(i)].idx;
      const int ai = flat / (fh * fw);
      const int cell = flat % (fh * fw);
      const int y = cell / fw, x = cell % fw;
      const std::size_t base = ((static_cast<std::size_t>(4 * ai)) * fh + y) * fw + x;
      const std::size_t plane = static_cast<std::size_t>(fh) * fw;
      const std::array<float, 4> d = {
          static_cast<float>(del[base]), static_cast<float>(del[base + plane]),
          static_cast<float>(del[base + 2 * plane]), static_cast<float>(del[base + 3 * plane])};
      const std::size_t aidx = static_cast<std::size_t>((y * fw + x) * a + ai);
      Box b = box_decode(d, anchor_boxes[aidx], static_cast<float>(img_w), static_cast<float>(img_h));
      if (b.width() < 2.0f || b.height() < 2.0f) continue;
      boxes.push_back(b);
      scores.push_back(cands[static_cast<std::size_t>(i)].score);
      flats.push_back(flat);
    }
    auto kept = nms(boxes, scores, nms_iou);
    std::vector<Proposal> out;
    for (int k : kept) {
      if (static_cast<int>(out.size()) >= post_nms_top) break;
      const float logit = scores[static_cast<std::size_t>(k)];
      out.push_back({boxes[static_cast<std::size_t>(k)],
                     1.0f / (1.0f + std::exp(-logit))});
    }
    return out;
  }

  // RoIAlign + pool + shared projection: one feature column per box. Columns
  // are standardized across channels, mirroring the attentive-vector path, so
  // channel-wise attention correlates class signatures on both sides.
  Tensor<T> roi_columns(const Tensor<T>& fm, const std::vector<Box>& boxes) const {
    if (boxes.empty()) throw data_error("roi_columns: empty batch of boxes");
    std::vector<Tensor<T>> cols;
    cols.reserve(boxes.size());
    const int g = proj_grid();
    for (const auto& b : boxes) {
      auto grid = roi_align(fm, static_cast<T>(b.x1), static_cast<T>(b.y1), static_cast<T>(b.x2),
                            static_cast<T>(b.y2), static_cast<T>(cfg.feat_stride), cfg.roi_pool);
      auto pooled = cfg.roi_pool >= 3 ? avg_pool2d(grid, 3, 2) : grid;
      cols.push_back(reshape(pooled, {cfg.trunk_channels() * g * g}));
    }
    return standardize_columns(linear(roi_proj.w, stack_columns(cols), roi_proj.b));
  }

  // One pooled-and-projected column for the whole image (image-level variant).
  Tensor<T> image_column(const Tensor<T>& fm) const {
    return standardize(image_proj(global_avg_pool(fm)));
  }

  // Channel attention on feature columns. `Z` is {C,R} (or {C}); `v` is {C}.
  Tensor<T> remodel_rois(const Tensor<T>& Z, const Tensor<T>& v, FusionMode mode) const {
    if (v.dim(0) != cfg.trunk_channels())
      throw dimension_error("remodel_rois: vector length " + std::to_string(v.dim(0)) +
                            " vs channels " + std::to_string(cfg.trunk_channels()));
    switch (mode) {
      case FusionMode::channelwise:
        return channelwise_mul(Z, v);
      case FusionMode::plus:
        return channelwise_add(Z, v);
      case FusionMode::concat: {
        const int r = Z.shape().size() == 2 ? Z.dim(1) : 1;
        auto tiled = channelwise_mul(Tensor<T>::full({v.dim(0), r}, T(1)), v);
        auto t = Z.shape().size() == 2 ? tiled : reshape(tiled, {v.dim(0)});
        return concat_channels(Z, t);
      }
    }
    throw config_error("remodel_rois: bad fusion mode");
  }

  // Predictor head over (possibly attended) feature columns: a shared hidden
  // fc feeds the classification, box and mask branches. `binary` selects the
  // attended fg/bg classifier; otherwise the (N+1)-way plain classifier runs.
  HeadOutput<T> predictor_head(const Tensor<T>& Z, bool binary, bool with_mask) const {
    if (Z.dim(0) != cfg.head_in())
      throw config_error("predictor_head: column dim " + std::to_string(Z.dim(0)) +
                         " does not match head input " + std::to_string(cfg.head_in()) +
                         " (fusion mode " + fusion_name(cfg.fusion) + ")");
    HeadOutput<T> out;
    auto h = relu(head_fc(Z));
    if (binary) {
      if (!cfg.with_attention) throw config_error("predictor_head: binary head not built");
      out.cls = cls_binary(h);
    } else {
      if (!cfg.with_multiway) throw config_error("predictor_head: multiway head not built");
      out.cls = cls_multiway(h);
    }
    out.deltas = reg_head(h);
    if (with_mask) {
      if (!cfg.with_mask) throw config_error("predictor_head: mask branch not built");
      out.mask = mask_fc2(relu(mask_fc1(h)));
      out.has_mask = true;
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>>> parameters() {
    std::vector<std::pair<std::string, Tensor<T>>> p;
    auto conv = [&](const std::string& n, Conv2dLayer<T>& l) {
      p.emplace_back(n + ".w", l.w);
      p.emplace_back(n + ".b", l.b);
    };
    auto lin = [&](const std::string& n, LinearLayer<T>& l) {
      p.emplace_back(n + ".w", l.w);
      p.emplace_back(n + ".b", l.b);
    };
    conv("backbone.stem", stem);
    conv("backbone.trunk1", trunk1);
    conv("backbone.trunk2", trunk2);
    conv("backbone.trunk3", trunk3);
    conv("rpn.conv", rpn_conv);
    conv("rpn.obj", rpn_obj);
    conv("rpn.reg", rpn_reg);
    lin("head.roi_proj", roi_proj);
    lin("head.fc", head_fc);
    lin("head.reg", reg_head);
    if (cfg.with_attention) {
      conv("attn.stem", attn_stem);
      lin("head.cls_binary", cls_binary);
      lin("attn.meta_cls", meta_cls);
    }
    if (cfg.with_multiway) lin("head.cls_multiway", cls_multiway);
    if (cfg.with_mask) {
      lin("head.mask_fc1", mask_fc1);
      lin("head.mask_fc2", mask_fc2);
    }
    if (cfg.with_image_level) lin("attn.image_proj", image_proj);
    if (cfg.unshare_trunk) {
      conv("attn.trunk1", attn_trunk1);
      conv("attn.trunk2", attn_trunk2);
      conv("attn.trunk3", attn_trunk3);
    }
    return p;
  }
};

template <typename T>
Tensor<T> image_to_tensor(const Image& img, bool requires_grad = false) {
  std::vector<T> data(img.data.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(img.data[i]);
  return Tensor<T>::from_data({img.channels, img.height, img.width}, std::move(data), requires_grad);
}

using ModelF = Model<float>;

}  // namespace fewdet
