#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewdet/attention.hpp"
#include "fewdet/dataset.hpp"
#include "fewdet/model.hpp"

namespace fewdet {

struct EvalConfig {
  double objectness_threshold = 0.05;  // pre-NMS confidence floor
  double nms_iou = 0.5;                // per-class suppression
  double iou_threshold = 0.5;          // AP matching
  int rpn_pre_nms = 256;
  int rpn_post_nms = 32;               // kept-proposal cap per image
  double rpn_nms_iou = 0.7;
};

struct Detection {
  std::string image_id;
  int class_id = -1;  // -1 = class-agnostic (unattended binary head)
  float score = 0;
  Box box;
  std::vector<float> mask;  // M*M foreground probabilities; empty if none
  int mask_size = 0;
};

// Scores every kept RoI under each class vector in the bank, keeps the argmax
// class when its confidence clears the threshold, decodes the box (and mask)
// from that class branch, then applies per-class NMS. With a null bank the
// plain head is used: the (N+1)-way classifier when present, otherwise the
// single unattended fg/bg branch.
std::vector<Detection> run_inference(const ModelF& model, const Image& image,
                                     const std::string& image_id, const AttentiveBank* bank,
                                     const EvalConfig& cfg);

// Builds the K-shot bank from a registry: exactly K object vectors per class
// (base-class pools of 3K are subsampled deterministically).
AttentiveBank build_bank(const ModelF& model, const DatasetManifest& manifest,
                         const FewShotRegistry& registry, int k, std::uint64_t seed,
                         std::vector<AttentiveVector>* object_vectors = nullptr);

// Every class to be scored must have a bank entry.
void ensure_bank_covers(const AttentiveBank& bank, const std::vector<int>& class_set);

struct GtObject {
  int class_id = -1;
  Box box;
  BitMask mask;
};

struct GroundTruth {
  std::map<std::string, std::vector<GtObject>> by_image;
};

GroundTruth ground_truth_from(const DatasetManifest& manifest, const std::vector<int>& indices,
                              bool with_masks);

std::vector<Detection> evaluate_manifest(const ModelF& model, const DatasetManifest& manifest,
                                         const std::vector<int>& indices, const AttentiveBank* bank,
                                         const EvalConfig& cfg);

struct APReport {
  std::map<int, double> per_class_ap;
  double map = 0.0;
  double iou_threshold = 0.5;
  bool mask_iou = false;
  std::vector<std::string> warnings;
  struct MatchEntry {
    std::string image_id;
    int class_id = -1;
    float score = 0;
    bool tp = false;
  };
  std::vector<MatchEntry> ledger;  // per class, descending score
};

// All-points interpolated AP at a single IoU threshold (PASCAL protocol).
// Detections are matched greedily by score, one GT at most once; mask mode
// replaces box IoU with pixel IoU of the pasted mask.
APReport average_precision(const std::vector<Detection>& detections, const GroundTruth& gt,
                           const std::vector<int>& class_set, double iou_threshold,
                           bool use_mask_iou);

// Binary canvas mask from a detection: the M×M grid thresholded at 0.5 and
// pasted into the detection box.
BitMask paste_detection_mask(const Detection& det, int canvas_h, int canvas_w);
double mask_iou(const BitMask& a, const BitMask& b);

struct VectorReport {
  std::map<int, std::vector<float>> class_means;
  std::map<int, double> per_class_intra_cosine;  // classes with >= 2 vectors
  double intra_class_mean_cosine = 0.0;
  double inter_class_mean_cosine = 0.0;
  double nearest_class_accuracy = 0.0;
  std::vector<int> singleton_classes;
};

VectorReport attentive_vector_report(const std::vector<AttentiveVector>& vectors);
void write_vector_report(const VectorReport& report, const std::vector<AttentiveVector>& vectors,
                         const std::string& path);

struct AdaptationCurve {
  std::vector<int> iterations;
  std::map<int, std::vector<double>> per_class_normalized;
  std::vector<double> mean;      // across classes, per iteration
  std::vector<double> variance;  // across classes, per iteration
  std::vector<int> excluded_classes;  // converged AP == 0
};

// Normalizes each class's AP trajectory by its final (converged) value.
AdaptationCurve adaptation_curve(const std::vector<int>& iterations,
                                 const std::vector<std::map<int, double>>& ap_per_iteration,
                                 const std::vector<int>& class_set);

void write_detections_jsonl(const std::vector<Detection>& dets, const DatasetManifest& manifest,
                            const std::string& path);
void write_ap_report(const APReport& report, const DatasetManifest& manifest,
                     const nlohmann::json& settings, const std::string& path);

struct TimingReport {
  double plain_ms_per_image = 0.0;
  double attended_ms_per_image = 0.0;
  double overhead_ratio = 0.0;
};

// Mean per-image wall time with a precomputed bank vs. the unattended
// forward pass on the same checkpoint and images.
TimingReport measure_inference_overhead(const ModelF& model, const DatasetManifest& manifest,
                                        const std::vector<int>& indices, const AttentiveBank& bank,
                                        const EvalConfig& cfg, int repeats = 1);

}  // namespace fewdet
