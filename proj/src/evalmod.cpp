#include "fewdet/evalmod.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "fewdet/version.hpp"

using json = nlohmann::json;

namespace fewdet {

namespace {

struct RoiScores {
  std::vector<Proposal> proposals;
  TensorF columns;  // {C,R}
};

RoiScores forward_rois(const ModelF& model, const Image& image, const EvalConfig& cfg) {
  RoiScores out;
  auto fm = model.backbone_forward(image_to_tensor<float>(image));
  auto rpn = model.rpn_forward(fm);
  out.proposals = model.rpn_propose(rpn, image.width, image.height, cfg.rpn_pre_nms,
                                    cfg.rpn_post_nms, cfg.rpn_nms_iou);
  if (out.proposals.empty()) return out;
  std::vector<Box> boxes;
  for (const auto& p : out.proposals) boxes.push_back(p.box);
  out.columns = model.roi_columns(fm, boxes);
  return out;
}

struct Candidate {
  int roi = 0;
  int class_id = -1;
  float score = 0;
  Box box;
  std::vector<float> mask;
};

void keep_per_class_nms(std::vector<Candidate>& cands, const ModelF& model, double nms_iou,
                        const std::string& image_id, std::vector<Detection>& out) {
  std::map<int, std::vector<int>> by_class;
  for (int i = 0; i < static_cast<int>(cands.size()); ++i) by_class[cands[static_cast<std::size_t>(i)].class_id].push_back(i);
  for (auto& [cls, idxs] : by_class) {
    std::vector<Box> boxes;
    std::vector<float> scores;
    for (int i : idxs) {
      boxes.push_back(cands[static_cast<std::size_t>(i)].box);
      scores.push_back(cands[static_cast<std::size_t>(i)].score);
    }
    for (int k : nms(boxes, scores, nms_iou)) {
      auto& c = cands[static_cast<std::size_t>(idxs[static_cast<std::size_t>(k)])];
      Detection d;
      d.image_id = image_id;
      d.class_id = c.class_id;
      d.score = c.score;
      d.box = c.box;
      d.mask = std::move(c.mask);
      d.mask_size = d.mask.empty() ? 0 : model.cfg.mask_size;
      out.push_back(std::move(d));
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
}

std::array<float, 4> column_deltas(const TensorF& deltas, int r) {
  const int cols = deltas.dim(1);
  return {deltas.data()[0 * cols + r], deltas.data()[1 * cols + r], deltas.data()[2 * cols + r],
          deltas.data()[3 * cols + r]};
}

std::vector<float> column_mask_probs(const TensorF& mask_logits, int r) {
  const int cols = mask_logits.dim(1);
  const int mm = mask_logits.dim(0);
  std::vector<float> out(static_cast<std::size_t>(mm));
  for (int i = 0; i < mm; ++i) {
    const float x = mask_logits.data()[static_cast<std::size_t>(i) * cols + r];
    out[static_cast<std::size_t>(i)] =
        x >= 0 ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x));
  }
  return out;
}

}  // namespace

std::vector<Detection> run_inference(const ModelF& model, const Image& image,
                                     const std::string& image_id, const AttentiveBank* bank,
                                     const EvalConfig& cfg) {
  NoGradGuard ng;
  std::vector<Detection> out;
  auto rois = forward_rois(model, image, cfg);
  const int r_count = static_cast<int>(rois.proposals.size());
  if (r_count == 0) return out;
  const bool with_mask = model.cfg.with_mask;

  if (bank) {
    if (!model.cfg.with_attention)
      throw config_error("run_inference: bank given but the model has no attentive branch");
    // Per-class branches: fg score, deltas and mask under each class vector.
    struct Branch {
      int class_id;
      std::vector<float> fg;
      HeadOutput<float> head;
    };
    std::vector<Branch> branches;
    for (const auto& [cls, vec] : bank->vectors) {
      if (static_cast<int>(vec.size()) != model.cfg.trunk_channels())
        throw data_error("run_inference: bank vector length mismatch for class " +
                         std::to_string(cls));
      auto v = TensorF::from_data({static_cast<int>(vec.size())},
                                  std::vector<float>(vec.begin(), vec.end()));
      auto attended = model.remodel_rois(rois.columns, v, model.cfg.fusion);
      Branch br;
      br.class_id = cls;
      br.head = model.predictor_head(attended, true, with_mask);
      br.fg.resize(static_cast<std::size_t>(r_count));
      for (int r = 0; r < r_count; ++r) {
        const float logits[2] = {br.head.cls.data()[r], br.head.cls.data()[r_count + r]};
        const auto probs = softmax_values(logits, 2);
        br.fg[static_cast<std::size_t>(r)] = static_cast<float>(probs[1]);
      }
      branches.push_back(std::move(br));
    }
    std::vector<Candidate> cands;
    for (int r = 0; r < r_count; ++r) {
      int best = 0;
      for (int b = 1; b < static_cast<int>(branches.size()); ++b)
        if (branches[static_cast<std::size_t>(b)].fg[static_cast<std::size_t>(r)] >
            branches[static_cast<std::size_t>(best)].fg[static_cast<std::size_t>(r)])
          best = b;  // ties keep the lowest class id (map order)
      const auto& br = branches[static_cast<std::size_t>(best)];
      const float score = br.fg[static_cast<std::size_t>(r)];
      if (score < cfg.objectness_threshold) continue;
      Candidate c;
      c.roi = r;
      c.class_id = br.class_id;
      c.score = score;
      c.box = box_decode(column_deltas(br.head.deltas, r), rois.proposals[static_cast<std::size_t>(r)].box,
                         static_cast<float>(image.width), static_cast<float>(image.height));
      if (c.box.width() <= 0 || c.box.height() <= 0) continue;
      if (with_mask) c.mask = column_mask_probs(br.head.mask, r);
      cands.push_back(std::move(c));
    }
    keep_per_class_nms(cands, model, cfg.nms_iou, image_id, out);
    return out;
  }

  if (model.cfg.with_multiway) {
    auto head = model.predictor_head(rois.columns, false, with_mask);
    const int n = model.cfg.num_classes;
    std::vector<Candidate> cands;
    for (int r = 0; r < r_count; ++r) {
      std::vector<float> logits(static_cast<std::size_t>(n) + 1);
      for (int c = 0; c <= n; ++c)
        logits[static_cast<std::size_t>(c)] = head.cls.data()[static_cast<std::size_t>(c) * r_count + r];
      const auto probs = softmax_values(logits.data(), n + 1);
      int best = 0;
      for (int c = 1; c < n; ++c)
        if (probs[static_cast<std::size_t>(c)] > probs[static_cast<std::size_t>(best)]) best = c;
      const float score = static_cast<float>(probs[static_cast<std::size_t>(best)]);
      if (score < cfg.objectness_threshold) continue;
      Candidate c;
      c.roi = r;
      c.class_id = best;
      c.score = score;
      c.box = box_decode(column_deltas(head.deltas, r), rois.proposals[static_cast<std::size_t>(r)].box,
                         static_cast<float>(image.width), static_cast<float>(image.height));
      if (c.box.width() <= 0 || c.box.height() <= 0) continue;
      if (with_mask) c.mask = column_mask_probs(head.mask, r);
      cands.push_back(std::move(c));
    }
    keep_per_class_nms(cands, model, cfg.nms_iou, image_id, out);
    return out;
  }

  // Unattended binary branch: class-agnostic scoring (identity/timing path).
  auto head = model.predictor_head(rois.columns, true, with_mask);
  std::vector<Candidate> cands;
  for (int r = 0; r < r_count; ++r) {
    const float logits[2] = {head.cls.data()[r], head.cls.data()[r_count + r]};
    const auto probs = softmax_values(logits, 2);
    const float score = static_cast<float>(probs[1]);
    if (score < cfg.objectness_threshold) continue;
    Candidate c;
    c.roi = r;
    c.class_id = -1;
    c.score = score;
    c.box = box_decode(column_deltas(head.deltas, r), rois.proposals[static_cast<std::size_t>(r)].box,
                       static_cast<float>(image.width), static_cast<float>(image.height));
    if (c.box.width() <= 0 || c.box.height() <= 0) continue;
    if (with_mask) c.mask = column_mask_probs(head.mask, r);
    cands.push_back(std::move(c));
  }
  keep_per_class_nms(cands, model, cfg.nms_iou, image_id, out);
  return out;
}

AttentiveBank build_bank(const ModelF& model, const DatasetManifest& manifest,
                         const FewShotRegistry& registry, int k, std::uint64_t seed,
                         std::vector<AttentiveVector>* object_vectors) {
  if (!model.cfg.with_attention)
    throw config_error("build_bank: model has no attentive branch");
  if (k < 1) throw config_error("build_bank: K must be >= 1");
  std::vector<AttentiveVector> vectors;
  Rng rng(derive_seed(seed, 0xBA4C));
  for (const auto& [cls, pool] : registry.shots) {
    if (static_cast<int>(pool.size()) < k)
      throw data_error("build_bank: class " + manifest.class_names[static_cast<std::size_t>(cls)] +
                       " has only " + std::to_string(pool.size()) + " shots, need K=" +
                       std::to_string(k));
    auto idx = rng.sample_without_replacement(static_cast<int>(pool.size()), k);
    std::sort(idx.begin(), idx.end());
    for (int i : idx) {
      const auto& ref = pool[static_cast<std::size_t>(i)];
      const auto sample = load_sample(manifest, manifest.index_of(ref.image_id));
      const auto mi = build_meta_input(sample, ref.ann_index, model.cfg.meta_input_size);
      vectors.push_back(infer_object_vector(model, mi));
    }
  }
  auto bank = aggregate_class_bank(vectors, k);
  bank.provenance = "registry phase " + std::to_string(registry.phase) + ", seed " +
                    std::to_string(registry.seed);
  if (object_vectors) *object_vectors = std::move(vectors);
  return bank;
}

void ensure_bank_covers(const AttentiveBank& bank, const std::vector<int>& class_set) {
  for (int cls : class_set)
    if (bank.vectors.find(cls) == bank.vectors.end())
      throw data_error("bank is missing a test class: " + std::to_string(cls));
}

GroundTruth ground_truth_from(const DatasetManifest& manifest, const std::vector<int>& indices,
                              bool with_masks) {
  GroundTruth gt;
  for (int i : indices) {
    const auto& img = manifest.images[static_cast<std::size_t>(i)];
    auto& list = gt.by_image[img.id];
    for (const auto& o : img.objects) {
      GtObject g;
      g.class_id = o.class_id;
      g.box = o.bbox;
      if (with_masks) g.mask = rle_decode(o.mask_rle, img.height, img.width);
      list.push_back(std::move(g));
    }
  }
  return gt;
}

std::vector<Detection> evaluate_manifest(const ModelF& model, const DatasetManifest& manifest,
                                         const std::vector<int>& indices, const AttentiveBank* bank,
                                         const EvalConfig& cfg) {
  std::vector<Detection> out;
  for (int i : indices) {
    const auto sample = load_sample(manifest, i);
    auto dets = run_inference(model, sample.image, sample.id, bank, cfg);
    for (auto& d : dets) out.push_back(std::move(d));
  }
  return out;
}

BitMask paste_detection_mask(const Detection& det, int canvas_h, int canvas_w) {
  BitMask out(canvas_h, canvas_w);
  if (det.mask.empty() || det.mask_size <= 0) return out;
  const int m = det.mask_size;
  const Box b = det.box.clipped(static_cast<float>(canvas_w), static_cast<float>(canvas_h));
  if (b.width() <= 0 || b.height() <= 0) return out;
  for (int y = static_cast<int>(std::floor(b.y1)); y < static_cast<int>(std::ceil(b.y2)); ++y) {
    if (y < 0 || y >= canvas_h) continue;
    int my = static_cast<int>((static_cast<float>(y) + 0.5f - det.box.y1) / det.box.height() *
                              static_cast<float>(m));
    my = std::min(std::max(my, 0), m - 1);
    for (int x = static_cast<int>(std::floor(b.x1)); x < static_cast<int>(std::ceil(b.x2)); ++x) {
      if (x < 0 || x >= canvas_w) continue;
      int mx = static_cast<int>((static_cast<float>(x) + 0.5f - det.box.x1) / det.box.width() *
                                static_cast<float>(m));
      mx = std::min(std::max(mx, 0), m - 1);
      if (det.mask[static_cast<std::size_t>(my) * m + mx] >= 0.5f) out.at(y, x) = 1;
    }
  }
  return out;
}

double mask_iou(const BitMask& a, const BitMask& b) {
  if (a.height != b.height || a.width != b.width)
    throw dimension_error("mask_iou: size mismatch");
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool av = a.data[i] != 0, bv = b.data[i] != 0;
    inter += (av && bv) ? 1 : 0;
    uni += (av || bv) ? 1 : 0;
  }
  if (uni == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

APReport average_precision(const std::vector<Detection>& detections, const GroundTruth& gt,
                           const std::vector<int>& class_set, double iou_threshold,
                           bool use_mask_iou) {
  APReport report;
  report.iou_threshold = iou_threshold;
  report.mask_iou = use_mask_iou;

  double ap_sum = 0.0;
  int ap_count = 0;
  for (int cls : class_set) {
    // Count ground truth of this class.
    int total_gt = 0;
    for (const auto& [img, objs] : gt.by_image)
      for (const auto& o : objs)
        if (o.class_id == cls) ++total_gt;
    if (total_gt == 0) {
      report.warnings.push_back("class " + std::to_string(cls) + " has no ground truth; excluded");
      continue;
    }

    // Detections of this class, sorted by (score desc, image, input order).
    std::vector<int> order;
    for (int i = 0; i < static_cast<int>(detections.size()); ++i)
      if (detections[static_cast<std::size_t>(i)].class_id == cls) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      const auto& da = detections[static_cast<std::size_t>(a)];
      const auto& db = detections[static_cast<std::size_t>(b)];
      if (da.score != db.score) return da.score > db.score;
      return da.image_id < db.image_id;
    });

    // Greedy matching in score order; each GT matched at most once.
    std::map<std::string, std::vector<char>> used;
    std::vector<char> tp_flags(order.size(), 0);
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      const auto& det = detections[static_cast<std::size_t>(order[oi])];
      auto it = gt.by_image.find(det.image_id);
      if (it == gt.by_image.end()) continue;
      const auto& objs = it->second;
      auto& used_flags = used[det.image_id];
      used_flags.resize(objs.size(), 0);
      double best = -1.0;
      int best_g = -1;
      for (int g = 0; g < static_cast<int>(objs.size()); ++g) {
        if (objs[static_cast<std::size_t>(g)].class_id != cls) continue;
        double overlap;
        if (use_mask_iou) {
          const auto& gm = objs[static_cast<std::size_t>(g)].mask;
          overlap = mask_iou(paste_detection_mask(det, gm.height, gm.width), gm);
        } else {
          overlap = iou(det.box, objs[static_cast<std::size_t>(g)].box);
        }
        if (overlap > best) {
          best = overlap;
          best_g = g;
        }
      }
      if (best_g >= 0 && best >= iou_threshold && !used_flags[static_cast<std::size_t>(best_g)]) {
        used_flags[static_cast<std::size_t>(best_g)] = 1;
        tp_flags[oi] = 1;
      }
      report.ledger.push_back({det.image_id, cls, det.score, tp_flags[oi] != 0});
    }

    // PR points at distinct score boundaries (equal scores form one point).
    std::vector<double> recalls, precisions;
    int tp = 0, fp = 0;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      if (tp_flags[oi])
        ++tp;
      else
        ++fp;
      const bool boundary =
          oi + 1 == order.size() ||
          detections[static_cast<std::size_t>(order[oi + 1])].score !=
              detections[static_cast<std::size_t>(order[oi])].score;
      if (boundary) {
        recalls.push_back(static_cast<double>(tp) / total_gt);
        precisions.push_back(static_cast<double>(tp) / (tp + fp));
      }
    }

    // Area under the precision envelope (all-points interpolation).
    double ap = 0.0;
    double env = 0.0;
    std::vector<double> envs(precisions.size());
    for (int i = static_cast<int>(precisions.size()) - 1; i >= 0; --i) {
      env = std::max(env, precisions[static_cast<std::size_t>(i)]);
      envs[static_cast<std::size_t>(i)] = env;
    }
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < recalls.size(); ++i) {
      ap += (recalls[i] - prev_recall) * envs[i];
      prev_recall = recalls[i];
    }
    report.per_class_ap[cls] = ap;
    ap_sum += ap;
    ++ap_count;
  }
  report.map = ap_count > 0 ? ap_sum / ap_count : 0.0;
  return report;
}

VectorReport attentive_vector_report(const std::vector<AttentiveVector>& vectors) {
  if (vectors.size() < 2) throw data_error("attentive_vector_report: need at least 2 vectors");
  std::map<int, std::vector<const AttentiveVector*>> by_class;
  for (const auto& v : vectors) by_class[v.class_id].push_back(&v);
  if (by_class.size() < 2) throw data_error("attentive_vector_report: need at least 2 classes");

  auto cosine = [](const std::vector<float>& a, const std::vector<float>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      dot += static_cast<double>(a[i]) * b[i];
      na += static_cast<double>(a[i]) * a[i];
      nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
  };

  VectorReport report;
  for (const auto& [cls, group] : by_class) {
    std::vector<double> acc(group[0]->values.size(), 0.0);
    for (const auto* v : group)
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v->values[i];
    std::vector<float> mean(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i)
      mean[i] = static_cast<float>(acc[i] / static_cast<double>(group.size()));
    report.class_means[cls] = std::move(mean);
    if (group.size() < 2) {
      report.singleton_classes.push_back(cls);
      continue;
    }
    double sum = 0;
    int n = 0;
    for (std::size_t i = 0; i < group.size(); ++i)
      for (std::size_t j = i + 1; j < group.size(); ++j) {
        sum += cosine(group[i]->values, group[j]->values);
        ++n;
      }
    report.per_class_intra_cosine[cls] = sum / n;
  }

  double intra_sum = 0;
  int intra_n = 0;
  for (const auto& [cls, v] : report.per_class_intra_cosine) {
    intra_sum += v;
    ++intra_n;
  }
  report.intra_class_mean_cosine = intra_n > 0 ? intra_sum / intra_n : 0.0;

  double inter_sum = 0;
  int inter_n = 0;
  for (std::size_t i = 0; i < vectors.size(); ++i)
    for (std::size_t j = i + 1; j < vectors.size(); ++j)
      if (vectors[i].class_id != vectors[j].class_id) {
        inter_sum += cosine(vectors[i].values, vectors[j].values);
        ++inter_n;
      }
  report.inter_class_mean_cosine = inter_n > 0 ? inter_sum / inter_n : 0.0;

  int correct = 0;
  for (const auto& v : vectors) {
    double best = -2;
    int best_cls = -1;
    for (const auto& [cls, mean] : report.class_means) {
      const double c = cosine(v.values, mean);
      if (c > best) {
        best = c;
        best_cls = cls;
      }
    }
    if (best_cls == v.class_id) ++correct;
  }
  report.nearest_class_accuracy = static_cast<double>(correct) / static_cast<double>(vectors.size());
  return report;
}

void write_vector_report(const VectorReport& report, const std::vector<AttentiveVector>& vectors,
                         const std::string& path) {
  json j;
  j["version"] = kFewdetVersion;
  j["intra_class_mean_cosine"] = report.intra_class_mean_cosine;
  j["inter_class_mean_cosine"] = report.inter_class_mean_cosine;
  j["nearest_class_accuracy"] = report.nearest_class_accuracy;
  j["singleton_classes"] = report.singleton_classes;
  json per = json::object();
  for (const auto& [cls, v] : report.per_class_intra_cosine) per[std::to_string(cls)] = v;
  j["per_class_intra_cosine"] = per;
  json means = json::object();
  for (const auto& [cls, v] : report.class_means) means[std::to_string(cls)] = v;
  j["class_means"] = means;
  json vecs = json::array();
  for (const auto& v : vectors)
    vecs.push_back({{"class", v.class_id}, {"source", v.source}, {"values", v.values}});
  j["vectors"] = vecs;
  std::ofstream os(path);
  if (!os) throw data_error("write_vector_report: cannot open " + path);
  os << j.dump() << "\n";
}

AdaptationCurve adaptation_curve(const std::vector<int>& iterations,
                                 const std::vector<std::map<int, double>>& ap_per_iteration,
                                 const std::vector<int>& class_set) {
  if (iterations.size() != ap_per_iteration.size())
    throw dimension_error("adaptation_curve: iteration/AP count mismatch");
  if (iterations.empty()) throw data_error("adaptation_curve: no checkpoints");
  AdaptationCurve curve;
  curve.iterations = iterations;
  const auto& final_ap = ap_per_iteration.back();
  for (int cls : class_set) {
    auto it = final_ap.find(cls);
    const double converged = it == final_ap.end() ? 0.0 : it->second;
    if (converged <= 0.0) {
      curve.excluded_classes.push_back(cls);
      continue;
    }
    std::vector<double> series;
    for (const auto& aps : ap_per_iteration) {
      auto ap_it = aps.find(cls);
      series.push_back((ap_it == aps.end() ? 0.0 : ap_it->second) / converged);
    }
    curve.per_class_normalized[cls] = std::move(series);
  }
  for (std::size_t t = 0; t < iterations.size(); ++t) {
    double sum = 0;
    int n = 0;
    for (const auto& [cls, series] : curve.per_class_normalized) {
      sum += series[t];
      ++n;
    }
    const double mean = n > 0 ? sum / n : 0.0;
    double var = 0;
    for (const auto& [cls, series] : curve.per_class_normalized) var += (series[t] - mean) * (series[t] - mean);
    curve.mean.push_back(mean);
    curve.variance.push_back(n > 0 ? var / n : 0.0);
  }
  return curve;
}

void write_detections_jsonl(const std::vector<Detection>& dets, const DatasetManifest& manifest,
                            const std::string& path) {
  std::ofstream os(path);
  if (!os) throw data_error("write_detections_jsonl: cannot open " + path);
  for (const auto& d : dets) {
    json j;
    j["image_id"] = d.image_id;
    j["class"] = d.class_id >= 0 ? manifest.class_names[static_cast<std::size_t>(d.class_id)]
                                 : std::string("(agnostic)");
    j["score"] = d.score;
    j["bbox"] = {d.box.x1, d.box.y1, d.box.x2, d.box.y2};
    if (!d.mask.empty()) {
      BitMask m(d.mask_size, d.mask_size);
      for (std::size_t i = 0; i < d.mask.size(); ++i) m.data[i] = d.mask[i] >= 0.5f ? 1 : 0;
      j["mask_rle"] = {{"size", {d.mask_size, d.mask_size}}, {"counts", rle_encode(m)}};
    }
    os << j.dump() << "\n";
  }
}

void write_ap_report(const APReport& report, const DatasetManifest& manifest,
                     const nlohmann::json& settings, const std::string& path) {
  json j;
  j["version"] = kFewdetVersion;
  j["settings"] = settings;
  j["iou_threshold"] = report.iou_threshold;
  j["mask_iou"] = report.mask_iou;
  j["map"] = report.map;
  json per = json::object();
  for (const auto& [cls, ap] : report.per_class_ap)
    per[manifest.class_names[static_cast<std::size_t>(cls)]] = ap;
  j["per_class_ap"] = per;
  j["warnings"] = report.warnings;
  std::ofstream os(path);
  if (!os) throw data_error("write_ap_report: cannot open " + path);
  os << j.dump(2) << "\n";
}

TimingReport measure_inference_overhead(const ModelF& model, const DatasetManifest& manifest,
                                        const std::vector<int>& indices, const AttentiveBank& bank,
                                        const EvalConfig& cfg, int repeats) {
  std::vector<Image> images;
  std::vector<std::string> ids;
  for (int i : indices) {
    auto s = load_sample(manifest, i);
    images.push_back(std::move(s.image));
    ids.push_back(s.id);
  }
  if (images.empty()) throw data_error("measure_inference_overhead: no images");
  using clock = std::chrono::steady_clock;
  // Warm-up pass keeps allocator effects out of the comparison.
  run_inference(model, images[0], ids[0], &bank, cfg);
  run_inference(model, images[0], ids[0], nullptr, cfg);

  const auto t0 = clock::now();
  for (int rep = 0; rep < repeats; ++rep)
    for (std::size_t i = 0; i < images.size(); ++i) run_inference(model, images[i], ids[i], &bank, cfg);
  const auto t1 = clock::now();
  for (int rep = 0; rep < repeats; ++rep)
    for (std::size_t i = 0; i < images.size(); ++i) run_inference(model, images[i], ids[i], nullptr, cfg);
  const auto t2 = clock::now();

  const double n = static_cast<double>(images.size()) * repeats;
  TimingReport out;
  out.attended_ms_per_image = std::chrono::duration<double, std::milli>(t1 - t0).count() / n;
  out.plain_ms_per_image = std::chrono::duration<double, std::milli>(t2 - t1).count() / n;
  out.overhead_ratio = out.attended_ms_per_image / out.plain_ms_per_image;
  return out;
}

}  // namespace fewdet
