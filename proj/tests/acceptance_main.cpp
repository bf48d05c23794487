// Acceptance suite: runs every acceptance criterion end to end and prints one
// pass/fail line per criterion. Heavy benchmark runs are cached under the
// work directory (FEWDET_ACCEPT_DIR overrides), so re-runs only retrain what
// is missing.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <set>
#include <thread>

#include <json.hpp>

#include "fewdet/checkpoint.hpp"
#include "fewdet/evalmod.hpp"
#include "fewdet/gradcheck.hpp"
#include "fewdet/sha256.hpp"
#include "fewdet/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace fewdet;

namespace {

// ---------------------------------------------------------------------------
// Benchmark scale. 12 classes (8 base / 4 novel), three seeds, K in {1,3,10}.

constexpr int kTrainImages = 2000;
constexpr int kTestImages = 300;
constexpr int kCanvas = 128;
constexpr std::uint64_t kDataSeed = 1000;
constexpr int kSeeds[3] = {1, 2, 3};
constexpr int kShots[3] = {1, 3, 10};

TrainConfig benchmark_train(Strategy strategy, int k, std::uint64_t seed) {
  TrainConfig t;
  t.strategy = strategy;
  t.k_shot = k;
  t.phase1_iters = 2600;
  t.phase2_iters = 700;
  t.phase1_shots = 3;
  t.lr = 0.02f;
  t.lambda_mask = 1;
  t.seed = seed;
  t.ft_full_window = 250;
  t.ft_full_max_iters = 3500;
  return t;
}

ModelConfig benchmark_model() {
  ModelConfig m;  // desk defaults: 64-channel trunk, stride 8, anchors 16/32/64
  return m;
}

EvalConfig benchmark_eval() {
  return EvalConfig{};
}

// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  std::string name;
  bool passed = false;
  std::string detail;
};

std::vector<Criterion> g_results;
std::mutex g_mutex;

void report(int id, const std::string& name, bool passed, const std::string& detail) {
  std::lock_guard<std::mutex> lock(g_mutex);
  g_results.push_back({id, name, passed, detail});
  std::cout << (passed ? "[PASS] " : "[FAIL] ") << "criterion " << id << " (" << name
            << "): " << detail << "\n"
            << std::flush;
}

fs::path work_dir() {
  const char* env = std::getenv("FEWDET_ACCEPT_DIR");
  fs::path p = env ? fs::path(env) : fs::temp_directory_path() / "fewdet_acceptance";
  fs::create_directories(p);
  return p;
}

double pct(double x) { return 100.0 * x; }

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Shared benchmark state

struct Bench {
  DatasetManifest train;
  DatasetManifest test;
  ClassSplit split;
  std::vector<int> test_idx;
};

Bench& bench() {
  static Bench b = [] {
    Bench out;
    const fs::path root = work_dir() / "data";
    if (!fs::exists(root / "train" / "manifest.jsonl")) {
      std::cout << "[setup] generating benchmark dataset (" << kTrainImages << " train, "
                << kTestImages << " test)\n";
      DataGenConfig cfg;
      cfg.scene.canvas_h = cfg.scene.canvas_w = kCanvas;
      cfg.num_images = kTrainImages;
      cfg.seed = derive_seed(kDataSeed, 0x7121);
      build_dataset(cfg, (root / "train").string());
      cfg.num_images = kTestImages;
      cfg.seed = derive_seed(kDataSeed, 0x7E57);
      build_dataset(cfg, (root / "test").string());
    }
    out.train = ingest_annotations((root / "train" / "manifest.jsonl").string(),
                                   AnnotationFormat::native_jsonl);
    out.test = ingest_annotations((root / "test" / "manifest.jsonl").string(),
                                  AnnotationFormat::native_jsonl);
    auto names = out.train.class_names;
    out.split = make_split(names, {names.end() - 4, names.end()});
    for (int i = 0; i < static_cast<int>(out.test.images.size()); ++i) out.test_idx.push_back(i);
    return out;
  }();
  return b;
}

std::string run_key(const TrainConfig& cfg, const std::string& stage) {
  json j = train_config_to_json(cfg);
  j["stage"] = stage;
  return sha256_hex(j.dump()).substr(0, 16);
}

// Trains (or reuses) a cached run; returns the final checkpoint path.
std::string ensure_run(TrainConfig cfg, const std::string& stage) {
  const fs::path dir = work_dir() / "runs" / run_key(cfg, stage);
  const fs::path ckpt = dir / "checkpoint_final.bin";
  if (fs::exists(ckpt)) return ckpt.string();
  auto& b = bench();
  std::cout << "[train] " << stage << " (strategy " << strategy_name(cfg.strategy) << ", K="
            << cfg.k_shot << ", seed " << cfg.seed << ")\n"
            << std::flush;
  const auto t0 = std::chrono::steady_clock::now();
  run_schedule(b.train, b.split, cfg, benchmark_model(), dir.string());
  const double mins =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  std::cout << "[train] " << stage << " done in " << fmt(mins, 1) << " min\n" << std::flush;
  return ckpt.string();
}

// Phase-1 checkpoints shared across K.
std::string ensure_phase1(Strategy strategy, std::uint64_t seed, bool meta_loss_on) {
  TrainConfig cfg = benchmark_train(strategy, 3, seed);
  cfg.phase2_iters = 0;
  cfg.meta_loss_on = meta_loss_on;
  cfg.ft_full_max_iters = 0;
  const std::string tag = std::string("p1_") + strategy_name(strategy) +
                          (meta_loss_on ? "" : "_nometa") + "_s" + std::to_string(seed);
  return ensure_run(cfg, tag);
}

std::string ensure_phase2(Strategy strategy, int k, std::uint64_t seed, bool meta_loss_on) {
  TrainConfig cfg = benchmark_train(strategy, k, seed);
  cfg.meta_loss_on = meta_loss_on;
  cfg.resume_from = ensure_phase1(strategy, seed, meta_loss_on);
  const std::string tag = std::string("p2_") + strategy_name(strategy) +
                          (meta_loss_on ? "" : "_nometa") + "_k" + std::to_string(k) + "_s" +
                          std::to_string(seed);
  return ensure_run(cfg, tag);
}

struct EvalNumbers {
  double novel_box = 0, base_box = 0, novel_mask = 0, base_mask = 0;
  double intra = 0, inter = 0;
  bool has_vectors = false;
};

// Evaluates (or reuses) novel/base box+mask mAP for a checkpoint.
EvalNumbers ensure_eval(const std::string& ckpt_path, int k, std::uint64_t seed,
                        const std::string& tag) {
  const fs::path cache = work_dir() / "evals" / (tag + ".json");
  if (fs::exists(cache)) {
    std::ifstream is(cache);
    json j = json::parse(is);
    return {j["novel_box"], j["base_box"], j["novel_mask"], j["base_mask"],
            j["intra"],     j["inter"],    j["has_vectors"]};
  }
  auto& b = bench();
  auto model = load_model(ckpt_path);
  const auto registry = sample_kshot(b.train, b.split, k, 2, derive_seed(seed, 0xF2));

  std::vector<AttentiveVector> vectors;
  std::optional<AttentiveBank> bank;
  if (model.cfg.with_attention) {
    bank = build_bank(model, b.train, registry, k, derive_seed(seed, 0xBB), &vectors);
    std::vector<int> all;
    for (int c = 0; c < model.cfg.num_classes; ++c) all.push_back(c);
    ensure_bank_covers(*bank, all);
  }
  auto dets = evaluate_manifest(model, b.test, b.test_idx, bank ? &*bank : nullptr, benchmark_eval());
  auto gt = ground_truth_from(b.test, b.test_idx, true);

  EvalNumbers out;
  out.novel_box = average_precision(dets, gt, b.split.novel_classes, 0.5, false).map;
  out.base_box = average_precision(dets, gt, b.split.base_classes, 0.5, false).map;
  out.novel_mask = average_precision(dets, gt, b.split.novel_classes, 0.5, true).map;
  out.base_mask = average_precision(dets, gt, b.split.base_classes, 0.5, true).map;
  if (model.cfg.with_attention && k >= 2) {
    auto vr = attentive_vector_report(vectors);
    out.intra = vr.intra_class_mean_cosine;
    out.inter = vr.inter_class_mean_cosine;
    out.has_vectors = true;
  }
  fs::create_directories(cache.parent_path());
  json j;
  j["novel_box"] = out.novel_box;
  j["base_box"] = out.base_box;
  j["novel_mask"] = out.novel_mask;
  j["base_mask"] = out.base_mask;
  j["intra"] = out.intra;
  j["inter"] = out.inter;
  j["has_vectors"] = out.has_vectors;
  j["checkpoint"] = ckpt_path;
  std::ofstream os(cache);
  os << j.dump(2) << "\n";
  return out;
}

// Tiny fixed-size pool for the benchmark runs; each unit is self-contained.
void run_parallel(std::vector<std::function<void()>> units, int workers) {
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> threads;
  for (int w = 0; w < workers; ++w)
    threads.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= units.size()) return;
        units[i]();
      }
    });
  for (auto& t : threads) t.join();
}

// ===========================================================================
// Criterion 1: identity remodeling (bit-level)

void criterion_identity() {
  auto& b = bench();
  ModelConfig mcfg = benchmark_model();
  mcfg.with_mask = true;
  mcfg.init_seed = 77;
  ModelF model(mcfg);
  NoGradGuard ng;

  auto sample = load_sample(b.test, 0);
  auto fm = model.backbone_forward(image_to_tensor<float>(sample.image));
  auto rpn = model.rpn_forward(fm);
  auto props = model.rpn_propose(rpn, kCanvas, kCanvas, 256, 32);
  std::vector<Box> boxes;
  for (const auto& p : props) boxes.push_back(p.box);
  auto Z = model.roi_columns(fm, boxes);
  auto ones = TensorF::full({model.cfg.trunk_channels()}, 1.0f);

  bool equal = true;
  auto plain = model.predictor_head(Z, true, true);
  for (int c = 0; c < model.cfg.num_classes; ++c) {
    auto attended = model.predictor_head(model.remodel_rois(Z, ones, FusionMode::channelwise),
                                         true, true);
    for (std::int64_t i = 0; i < plain.cls.numel(); ++i)
      equal &= attended.cls.data()[i] == plain.cls.data()[i];
    for (std::int64_t i = 0; i < plain.deltas.numel(); ++i)
      equal &= attended.deltas.data()[i] == plain.deltas.data()[i];
    for (std::int64_t i = 0; i < plain.mask.numel(); ++i)
      equal &= attended.mask.data()[i] == plain.mask.data()[i];
  }

  // Full pipeline: a ones bank must reproduce the unattended detector's
  // boxes, scores and masks bit for bit.
  AttentiveBank ones_bank;
  ones_bank.k = 1;
  ones_bank.vectors[0] = std::vector<float>(static_cast<std::size_t>(model.cfg.trunk_channels()), 1.0f);
  EvalConfig ecfg = benchmark_eval();
  auto attended_dets = run_inference(model, sample.image, sample.id, &ones_bank, ecfg);
  auto plain_dets = run_inference(model, sample.image, sample.id, nullptr, ecfg);
  equal &= attended_dets.size() == plain_dets.size();
  if (equal)
    for (std::size_t i = 0; i < attended_dets.size(); ++i) {
      equal &= attended_dets[i].score == plain_dets[i].score;
      equal &= attended_dets[i].box.x1 == plain_dets[i].box.x1 &&
               attended_dets[i].box.y1 == plain_dets[i].box.y1 &&
               attended_dets[i].box.x2 == plain_dets[i].box.x2 &&
               attended_dets[i].box.y2 == plain_dets[i].box.y2;
      equal &= attended_dets[i].mask == plain_dets[i].mask;
    }
  report(1, "identity remodeling", equal,
         equal ? "all-ones attention is bit-identical to the plain detector"
               : "outputs differ at bit level");
}

// ===========================================================================
// Criterion 2: oracle equivalence

double bilinear_oracle(const std::vector<double>& plane, int h, int w, double fy, double fx) {
  fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
  fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
  const int y0 = static_cast<int>(std::floor(fy));
  const int x0 = static_cast<int>(std::floor(fx));
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double ty = fy - y0, tx = fx - x0;
  return (plane[static_cast<std::size_t>(y0) * w + x0] * (1 - tx) +
          plane[static_cast<std::size_t>(y0) * w + x1] * tx) * (1 - ty) +
         (plane[static_cast<std::size_t>(y1) * w + x0] * (1 - tx) +
          plane[static_cast<std::size_t>(y1) * w + x1] * tx) * ty;
}

void criterion_oracles() {
  Rng rng(4242);
  bool ok = true;
  std::string detail;

  // (a) roi_align vs bilinear oracle, 1000 cases, tol 1e-6.
  double max_err = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> plane(25);
    for (auto& v : plane) v = rng.uniform(-1, 1);
    auto fm = TensorD::from_data({1, 5, 5}, plane);
    const double stride = rng.uniform() < 0.5 ? 1.0 : 2.0;
    const double x1 = rng.uniform(-2, 7), y1 = rng.uniform(-2, 7);
    const double bw = rng.uniform(0.3, 6), bh = rng.uniform(0.3, 6);
    const int p = rng.uniform_int(1, 4);
    auto out = roi_align(fm, x1, y1, x1 + bw, y1 + bh, stride, p);
    for (int py = 0; py < p; ++py)
      for (int px = 0; px < p; ++px) {
        const double fy = (y1 + (py + 0.5) * bh / p) / stride - 0.5;
        const double fx = (x1 + (px + 0.5) * bw / p) / stride - 0.5;
        max_err = std::max(max_err, std::abs(out.data()[static_cast<std::size_t>(py) * p + px] -
                                             bilinear_oracle(plane, 5, 5, fy, fx)));
      }
  }
  ok &= max_err < 1e-6;
  detail += "roi_align max err " + fmt(max_err * 1e9, 3) + "e-9";

  // (b) nms vs brute force, 1000 cases, exact.
  int nms_mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.uniform_int(1, 14);
    std::vector<Box> boxes;
    std::vector<float> scores;
    for (int i = 0; i < n; ++i) {
      const float x = static_cast<float>(rng.uniform(0, 40));
      const float y = static_cast<float>(rng.uniform(0, 40));
      boxes.push_back({x, y, x + static_cast<float>(rng.uniform(2, 20)),
                       y + static_cast<float>(rng.uniform(2, 20))});
      scores.push_back(static_cast<float>(rng.uniform()));
    }
    const double thresh = rng.uniform(0.2, 0.7);
    auto fast = nms(boxes, scores, thresh);
    // Brute force: keep iff no higher-priority kept box overlaps it.
    std::vector<int> order(boxes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int c) { return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(c)]; });
    std::vector<int> slow;
    for (int i : order) {
      bool suppressed = false;
      for (int k : slow)
        if (iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(k)]) > thresh) suppressed = true;
      if (!suppressed) slow.push_back(i);
    }
    std::set<int> a(fast.begin(), fast.end()), c(slow.begin(), slow.end());
    if (a != c) ++nms_mismatches;
  }
  ok &= nms_mismatches == 0;
  detail += ", nms mismatches " + std::to_string(nms_mismatches);

  // (c) AP vs exhaustive-threshold oracle, 50 fixtures, exact equality.
  int ap_mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    GroundTruth gt;
    const int n_img = rng.uniform_int(1, 3);
    for (int i = 0; i < n_img; ++i) {
      const int n_gt = rng.uniform_int(0, 4);
      for (int g = 0; g < n_gt; ++g) {
        const float x = static_cast<float>(rng.uniform(0, 60));
        const float y = static_cast<float>(rng.uniform(0, 60));
        gt.by_image["i" + std::to_string(i)].push_back(
            {rng.uniform_int(0, 1),
             Box{x, y, x + static_cast<float>(rng.uniform(4, 25)), y + static_cast<float>(rng.uniform(4, 25))},
             {}});
      }
    }
    std::vector<Detection> dets;
    const int n_det = rng.uniform_int(0, 12);
    for (int d = 0; d < n_det; ++d) {
      Detection det;
      det.image_id = "i" + std::to_string(rng.uniform_int(0, n_img - 1));
      det.class_id = rng.uniform_int(0, 1);
      det.score = static_cast<float>(rng.uniform_int(1, 8)) / 8.0f;
      const float x = static_cast<float>(rng.uniform(0, 60));
      const float y = static_cast<float>(rng.uniform(0, 60));
      det.box = {x, y, x + static_cast<float>(rng.uniform(4, 25)), y + static_cast<float>(rng.uniform(4, 25))};
      dets.push_back(det);
    }
    auto rep = average_precision(dets, gt, {0, 1}, 0.5, false);
    for (int cls : {0, 1}) {
      // Exhaustive threshold enumeration with fresh matching per threshold.
      int total_gt = 0;
      for (const auto& [img, objs] : gt.by_image)
        for (const auto& o : objs)
          if (o.class_id == cls) ++total_gt;
      if (total_gt == 0) {
        if (rep.per_class_ap.count(cls)) ++ap_mismatches;
        continue;
      }
      std::vector<const Detection*> mine;
      for (const auto& d : dets)
        if (d.class_id == cls) mine.push_back(&d);
      std::stable_sort(mine.begin(), mine.end(), [](const Detection* a, const Detection* c) {
        if (a->score != c->score) return a->score > c->score;
        return a->image_id < c->image_id;
      });
      std::vector<float> thresholds;
      for (auto* d : mine)
        if (thresholds.empty() || thresholds.back() != d->score) thresholds.push_back(d->score);
      std::vector<double> recalls, precisions;
      for (float t : thresholds) {
        std::map<std::string, std::vector<char>> used;
        int tp = 0, fp = 0;
        for (auto* d : mine) {
          if (d->score < t) break;
          auto it = gt.by_image.find(d->image_id);
          double best = -1;
          int best_g = -1;
          if (it != gt.by_image.end()) {
            auto& flags = used[d->image_id];
            flags.resize(it->second.size(), 0);
            for (int g = 0; g < static_cast<int>(it->second.size()); ++g) {
              if (it->second[static_cast<std::size_t>(g)].class_id != cls) continue;
              const double v = iou(d->box, it->second[static_cast<std::size_t>(g)].box);
              if (v > best) {
                best = v;
                best_g = g;
              }
            }
            if (best_g >= 0 && best >= 0.5 && !flags[static_cast<std::size_t>(best_g)]) {
              flags[static_cast<std::size_t>(best_g)] = 1;
              ++tp;
              continue;
            }
          }
          ++fp;
        }
        recalls.push_back(static_cast<double>(tp) / total_gt);
        precisions.push_back(tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0);
      }
      double env = 0, want = 0, prev = 0;
      std::vector<double> envs(precisions.size());
      for (int i = static_cast<int>(precisions.size()) - 1; i >= 0; --i) {
        env = std::max(env, precisions[static_cast<std::size_t>(i)]);
        envs[static_cast<std::size_t>(i)] = env;
      }
      for (std::size_t i = 0; i < recalls.size(); ++i) {
        want += (recalls[i] - prev) * envs[i];
        prev = recalls[i];
      }
      const double got = rep.per_class_ap.count(cls) ? rep.per_class_ap.at(cls) : 0.0;
      if (got != want) ++ap_mismatches;
    }
  }
  ok &= ap_mismatches == 0;
  detail += ", AP mismatches " + std::to_string(ap_mismatches);

  // (d) box codec round trip, 1000 pairs, max err < 1e-5.
  float codec_err = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto rand_box = [&] {
      const float x = static_cast<float>(rng.uniform(0, 90));
      const float y = static_cast<float>(rng.uniform(0, 90));
      return Box{x, y, x + static_cast<float>(rng.uniform(1, 38)), y + static_cast<float>(rng.uniform(1, 38))};
    };
    const Box gt_box = rand_box(), ref = rand_box();
    const Box back = box_decode(box_encode(gt_box, ref), ref);
    codec_err = std::max({codec_err, std::abs(back.x1 - gt_box.x1), std::abs(back.y1 - gt_box.y1),
                          std::abs(back.x2 - gt_box.x2), std::abs(back.y2 - gt_box.y2)});
  }
  ok &= codec_err < 1e-5f;
  detail += ", codec max err " + fmt(codec_err * 1e6, 3) + "e-6";

  report(2, "oracle equivalence", ok, detail);
}

// ===========================================================================
// Criterion 3 (+ mask checks of criterion 10): the f64 gradient suite

void criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(99);
  auto rand_t = [&](std::vector<int> shape, double lo = -1, double hi = 1) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = rng.uniform(lo, hi);
    return TensorD::from_data(std::move(shape), std::move(data), true);
  };
  auto rand_offzero = [&](std::vector<int> shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) {
      const double mag = rng.uniform(0.05, 1.0);
      v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return TensorD::from_data(std::move(shape), std::move(data), true);
  };

  std::vector<GradCheckReport> reports;
  reports.push_back(grad_check(
      "conv2d", [](std::vector<TensorD>& in) { return sum(conv2d(in[0], in[1], in[2], 2, 1)); },
      {rand_t({3, 9, 9}), rand_t({4, 3, 3, 3}), rand_t({4})}));
  reports.push_back(grad_check(
      "relu", [](std::vector<TensorD>& in) { return sum(relu(in[0])); }, {rand_offzero({5, 6})}));
  reports.push_back(grad_check(
      "linear", [](std::vector<TensorD>& in) { return sum(linear(in[0], in[1], in[2])); },
      {rand_t({3, 5}), rand_t({5, 4}), rand_t({3})}));
  reports.push_back(grad_check(
      "max_pool", [](std::vector<TensorD>& in) { return sum(max_pool2d(in[0], 2, 2)); },
      {rand_t({2, 6, 6})}));
  reports.push_back(grad_check(
      "avg_pool", [](std::vector<TensorD>& in) { return sum(avg_pool2d(in[0], 3, 2)); },
      {rand_t({2, 7, 7})}));
  reports.push_back(grad_check(
      "bilinear_sample",
      [](std::vector<TensorD>& in) { return sum(roi_align(in[0], 1.2, 0.4, 7.3, 6.8, 2.0, 3)); },
      {rand_t({2, 6, 6})}));
  reports.push_back(grad_check(
      "sigmoid", [](std::vector<TensorD>& in) { return sum(sigmoid(in[0])); }, {rand_t({12})}));
  reports.push_back(grad_check(
      "softmax_ce",
      [](std::vector<TensorD>& in) { return softmax_cross_entropy_cols(in[0], {1, 0, 2}); },
      {rand_t({4, 3})}));
  {
    std::vector<double> target = {0.2, -0.3, 1.5, -1.5, 0.0, 0.8};
    reports.push_back(grad_check(
        "smooth_l1", [&](std::vector<TensorD>& in) { return smooth_l1_mean(in[0], target); },
        {rand_offzero({6})}));
  }
  {
    std::vector<double> target = {1, 0, 0, 1, 1, 0};
    reports.push_back(grad_check(
        "binary_ce", [&](std::vector<TensorD>& in) { return bce_with_logits(in[0], target); },
        {rand_t({6}, -2, 2)}));
  }
  reports.push_back(grad_check(
      "add_mul",
      [](std::vector<TensorD>& in) { return sum(mul(add(in[0], in[1]), in[0])); },
      {rand_t({3, 4}), rand_t({3, 4})}));
  reports.push_back(grad_check(
      "concat",
      [](std::vector<TensorD>& in) {
        return sum(mul(concat_channels(in[0], in[1]), concat_channels(in[1], in[0])));
      },
      {rand_t({2, 3}), rand_t({2, 3})}));
  reports.push_back(grad_check(
      "channelwise_mul",
      [](std::vector<TensorD>& in) { return sum(channelwise_mul(in[0], in[1])); },
      {rand_t({5, 4}), rand_t({5})}));
  reports.push_back(grad_check(
      "global_avg_pool", [](std::vector<TensorD>& in) { return sum(global_avg_pool(in[0])); },
      {rand_t({3, 4, 5})}));
  reports.push_back(grad_check(
      "instance_norm",
      [](std::vector<TensorD>& in) { return sum(mul(instance_norm(in[0]), in[1])); },
      {rand_t({3, 4, 4}), rand_t({3, 4, 4})}));
  reports.push_back(grad_check(
      "standardize",
      [](std::vector<TensorD>& in) { return sum(mul(standardize(in[0]), in[1])); },
      {rand_t({8}), rand_t({8})}));
  {
    std::vector<double> weights = {0, 0.5, 1, 0, 2, 0.25, 0, 0, 1.5};
    reports.push_back(grad_check(
        "weighted_avg_pool",
        [&](std::vector<TensorD>& in) { return sum(mul(weighted_avg_pool(in[0], weights), in[1])); },
        {rand_t({2, 3, 3}), rand_t({2})}));
  }

  // Composed path A: meta input -> vector -> attention -> head losses
  // (classification, regression and mask, per criterion 10).
  {
    ModelConfig mcfg;
    mcfg.num_classes = 3;
    mcfg.widths = {4, 6, 8, 8};
    mcfg.roi_pool = 5;
    mcfg.mask_size = 6;
    mcfg.meta_input_size = 16;
    mcfg.with_mask = true;
    mcfg.init_seed = 5;
    Model<double> model(mcfg);
    std::vector<double> mi(4 * 16 * 16);
    for (auto& v : mi) v = rng.uniform();
    for (int i = 0; i < 40; ++i) mi[3 * 256 + 100 + static_cast<std::size_t>(i)] = 1.0;
    std::vector<double> z(8 * 3);
    for (auto& v : z) v = rng.uniform(-1, 1);
    // The structure channel doubles as (data) pooling weights, so the check
    // covers parameters and the RoI matrix.
    auto meta_in = TensorD::from_data({4, 16, 16}, mi, false);
    reports.push_back(grad_check(
        "meta_to_head_path",
        [&](std::vector<TensorD>& in) {
          auto v = model.infer_object_vector(meta_in);
          auto out = model.predictor_head(model.remodel_rois(in[0], v, FusionMode::channelwise),
                                          true, true);
          std::vector<double> mask_t(6 * 6 * 3, 0.5);
          return add(add(softmax_cross_entropy_cols(out.cls, {1, 0, 0}),
                         smooth_l1_mean(out.deltas, std::vector<double>(12, 0.2))),
                     bce_with_logits(out.mask, mask_t));
        },
        {TensorD::from_data({8, 3}, z, true), model.attn_stem.w, model.trunk3.w,
         model.cls_binary.w, model.mask_fc1.w, model.roi_proj.w},
        1e-5, 1e-4, 12));
  }

  // Composed path B: image -> backbone -> RPN losses.
  {
    ModelConfig mcfg;
    mcfg.num_classes = 3;
    mcfg.widths = {4, 6, 8, 8};
    mcfg.init_seed = 6;
    mcfg.with_attention = false;
    mcfg.with_multiway = true;
    Model<double> model(mcfg);
    std::vector<double> img(3 * 32 * 32);
    for (auto& v : img) v = rng.uniform();
    GtSet gt;
    gt.boxes = {Box{6, 6, 22, 22}};
    gt.classes = {1};
    MatcherConfig mc;
    Rng srng(3);
    reports.push_back(grad_check(
        "image_to_rpn_path",
        [&](std::vector<TensorD>& in) {
          auto fm = model.backbone_forward(in[0]);
          auto rpn = model.rpn_forward(fm);
          Rng local(3);
          auto targets = rpn_targets(model.anchors(rpn.fh, rpn.fw), rpn.fh, rpn.fw,
                                     model.cfg.anchors_per_cell(), gt, mc, local);
          auto losses = rpn_loss(rpn, targets);
          return add(losses.cls, losses.reg);
        },
        {TensorD::from_data({3, 32, 32}, img, true), model.stem.w, model.rpn_conv.w,
         model.rpn_obj.w, model.rpn_reg.w},
        1e-5, 1e-4, 12));
  }

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = secs < 120.0;
  double worst = 0;
  std::string worst_name;
  for (const auto& r : reports) {
    if (!r.passed) ok = false;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = r.op_name;
    }
  }
  report(3, "gradient suite", ok,
         std::to_string(reports.size()) + " checks, worst rel err " + fmt(worst * 1e6, 3) +
             "e-6 (" + worst_name + "), " + fmt(secs, 1) + "s");
}

// ===========================================================================
// Criterion 4: aggregation law

void criterion_aggregation() {
  Rng rng(31337);
  bool ok = true;
  for (int trial = 0; trial < 20; ++trial) {
    const int k = rng.uniform_int(1, 10);
    const int c = 64;
    std::vector<AttentiveVector> vectors;
    for (int cls = 0; cls < 3; ++cls)
      for (int i = 0; i < k; ++i) {
        AttentiveVector v;
        v.class_id = cls;
        for (int j = 0; j < c; ++j) v.values.push_back(static_cast<float>(rng.uniform(0.01, 0.99)));
        vectors.push_back(v);
      }
    auto bank = aggregate_class_bank(vectors, k);
    for (int cls = 0; cls < 3; ++cls) {
      // Independent mean: f64 accumulation in input order.
      std::vector<double> acc(static_cast<std::size_t>(c), 0.0);
      for (const auto& v : vectors)
        if (v.class_id == cls)
          for (int j = 0; j < c; ++j) acc[static_cast<std::size_t>(j)] += v.values[static_cast<std::size_t>(j)];
      for (int j = 0; j < c; ++j)
        ok &= bank.vectors.at(cls)[static_cast<std::size_t>(j)] ==
              static_cast<float>(acc[static_cast<std::size_t>(j)] / k);
    }
    if (k == 1)
      for (int cls = 0; cls < 3; ++cls)
        ok &= bank.vectors.at(cls) == vectors[static_cast<std::size_t>(cls)].values;
  }
  // K=1 exactness explicitly.
  AttentiveVector single;
  single.class_id = 7;
  for (int j = 0; j < 16; ++j) single.values.push_back(static_cast<float>(rng.uniform()));
  ok &= aggregate_class_bank({single}, 1).vectors.at(7) == single.values;
  report(4, "aggregation law", ok,
         ok ? "bank entries equal the K-vector means exactly; K=1 is the identity"
            : "bank mean mismatch");
}

// ===========================================================================
// Criteria 5-10: the directional benchmark

struct BenchResults {
  // [strategy][k][seed] -> numbers
  std::map<std::string, std::map<int, std::map<int, EvalNumbers>>> num;
  TimingReport timing;
};

void run_benchmark(BenchResults& results) {
  bench();  // materialize the dataset before parallel work

  const int workers = std::max(1u, std::min(2u, std::thread::hardware_concurrency()));

  // Stage 1: phase-1 checkpoints (one per strategy variant and seed).
  std::vector<std::function<void()>> p1_units;
  for (int seed : kSeeds) {
    p1_units.push_back([seed] { ensure_phase1(Strategy::meta_rcnn, seed, true); });
    p1_units.push_back([seed] { ensure_phase1(Strategy::frcn_ft_full, seed, true); });
    p1_units.push_back([seed] { ensure_phase1(Strategy::full_image_meta, seed, true); });
    p1_units.push_back([seed] { ensure_phase1(Strategy::meta_rcnn, seed, false); });
  }
  run_parallel(p1_units, workers);

  // Stage 2: timing (criterion 9) on a quiet machine, before phase-2 floods.
  {
    const auto ckpt = ensure_phase2(Strategy::meta_rcnn, 3, kSeeds[0], true);
    auto& b = bench();
    auto model = load_model(ckpt);
    const auto registry = sample_kshot(b.train, b.split, 3, 2, derive_seed(kSeeds[0], 0xF2));
    auto bank = build_bank(model, b.train, registry, 3, derive_seed(kSeeds[0], 0xBB));
    std::vector<int> idx;
    for (int i = 0; i < 40; ++i) idx.push_back(i);
    results.timing = measure_inference_overhead(model, b.test, idx, bank, benchmark_eval(), 2);
  }

  // Stage 3: phase-2 runs + evaluations.
  std::mutex results_mutex;
  std::vector<std::function<void()>> units;
  auto add_unit = [&](Strategy strategy, int k, int seed, bool meta_loss_on) {
    units.push_back([&results, &results_mutex, strategy, k, seed, meta_loss_on] {
      const auto ckpt = ensure_phase2(strategy, k, seed, meta_loss_on);
      const std::string tag = std::string(strategy_name(strategy)) +
                              (meta_loss_on ? "" : "_nometa") + "_k" + std::to_string(k) + "_s" +
                              std::to_string(seed);
      auto numbers = ensure_eval(ckpt, k, seed, tag);
      std::lock_guard<std::mutex> lock(results_mutex);
      const std::string key =
          std::string(strategy_name(strategy)) + (meta_loss_on ? "" : "_nometa");
      results.num[key][k][seed] = numbers;
    });
  };
  for (int seed : kSeeds) {
    for (int k : kShots) {
      add_unit(Strategy::meta_rcnn, k, seed, true);
      add_unit(Strategy::frcn_ft_full, k, seed, true);
    }
    add_unit(Strategy::full_image_meta, 3, seed, true);
    add_unit(Strategy::full_image_meta, 10, seed, true);
    add_unit(Strategy::meta_rcnn, 10, seed, false);
  }
  run_parallel(units, workers);
}

double seed_mean(const BenchResults& r, const std::string& strat, int k,
                 double EvalNumbers::*field) {
  double sum = 0;
  int n = 0;
  for (int seed : kSeeds) {
    sum += r.num.at(strat).at(k).at(seed).*field;
    ++n;
  }
  return sum / n;
}

void criteria_benchmark() {
  BenchResults r;
  run_benchmark(r);

  // Persist every measured number for inspection.
  {
    json dump;
    for (const auto& [strat, by_k] : r.num)
      for (const auto& [k, by_seed] : by_k)
        for (const auto& [seed, n] : by_seed) {
          json e;
          e["novel_box"] = n.novel_box;
          e["base_box"] = n.base_box;
          e["novel_mask"] = n.novel_mask;
          e["base_mask"] = n.base_mask;
          e["intra"] = n.intra;
          e["inter"] = n.inter;
          dump[strat][std::to_string(k)][std::to_string(seed)] = e;
        }
    dump["timing"] = {{"plain_ms", r.timing.plain_ms_per_image},
                      {"attended_ms", r.timing.attended_ms_per_image},
                      {"ratio", r.timing.overhead_ratio}};
    std::ofstream os(work_dir() / "acceptance_summary.json");
    os << dump.dump(2) << "\n";
  }

  // Criterion 5: directional Table-1 reproduction.
  {
    bool ok = true;
    std::string detail;
    for (int k : {3, 10}) {
      const double meta_novel = pct(seed_mean(r, "meta_rcnn", k, &EvalNumbers::novel_box));
      const double ft_novel = pct(seed_mean(r, "frcn_ft_full", k, &EvalNumbers::novel_box));
      const double meta_base = pct(seed_mean(r, "meta_rcnn", k, &EvalNumbers::base_box));
      const double ft_base = pct(seed_mean(r, "frcn_ft_full", k, &EvalNumbers::base_box));
      ok &= meta_novel >= ft_novel + 3.0;
      ok &= meta_base >= ft_base - 3.0;
      detail += "K=" + std::to_string(k) + ": novel " + fmt(meta_novel, 1) + " vs " +
                fmt(ft_novel, 1) + ", base " + fmt(meta_base, 1) + " vs " + fmt(ft_base, 1) + "; ";
    }
    report(5, "directional Table-1", ok, detail);
  }

  // Criterion 6: full-image meta-learning scores strictly lower novel mAP.
  {
    bool ok = true;
    std::string detail;
    for (int k : {3, 10}) {
      const double full_img = pct(seed_mean(r, "full_image_meta", k, &EvalNumbers::novel_box));
      const double roi = pct(seed_mean(r, "meta_rcnn", k, &EvalNumbers::novel_box));
      ok &= full_img < roi;
      detail += "K=" + std::to_string(k) + ": image-level " + fmt(full_img, 1) + " < RoI-level " +
                fmt(roi, 1) + "; ";
    }
    report(6, "directional Table-4", ok, detail);
  }

  // Criterion 7: meta-loss on beats off; intra > inter with meta-loss on.
  {
    const double on = pct(seed_mean(r, "meta_rcnn", 10, &EvalNumbers::novel_box));
    const double off = pct(seed_mean(r, "meta_rcnn_nometa", 10, &EvalNumbers::novel_box));
    bool ok = on > off;
    int cosine_ok = 0;
    for (int seed : kSeeds) {
      const auto& n = r.num.at("meta_rcnn").at(10).at(seed);
      if (n.has_vectors && n.intra > n.inter) ++cosine_ok;
    }
    ok &= cosine_ok == 3;
    report(7, "directional Table-5", ok,
           "novel mAP on " + fmt(on, 1) + " vs off " + fmt(off, 1) + "; intra>inter on " +
               std::to_string(cosine_ok) + "/3 seeds");
  }

  // Criterion 8: monotone shot trend for meta_rcnn.
  {
    const double m1 = pct(seed_mean(r, "meta_rcnn", 1, &EvalNumbers::novel_box));
    const double m3 = pct(seed_mean(r, "meta_rcnn", 3, &EvalNumbers::novel_box));
    const double m10 = pct(seed_mean(r, "meta_rcnn", 10, &EvalNumbers::novel_box));
    const bool ok = m1 <= m3 && m3 <= m10;
    report(8, "monotone shot trend", ok,
           "novel mAP " + fmt(m1, 1) + " (K=1) <= " + fmt(m3, 1) + " (K=3) <= " + fmt(m10, 1) +
               " (K=10)");
  }

  // Criterion 9: inference overhead with a precomputed bank.
  {
    const bool ok = r.timing.overhead_ratio <= 1.10;
    report(9, "inference overhead", ok,
           "attended " + fmt(r.timing.attended_ms_per_image, 1) + " ms vs plain " +
               fmt(r.timing.plain_ms_per_image, 1) + " ms, ratio " +
               fmt(r.timing.overhead_ratio, 3));
  }

  // Criterion 10: segmentation path (mask-IoU AP at K=10).
  {
    const double meta_mask = pct(seed_mean(r, "meta_rcnn", 10, &EvalNumbers::novel_mask));
    const double ft_mask = pct(seed_mean(r, "frcn_ft_full", 10, &EvalNumbers::novel_mask));
    const bool ok = meta_mask > ft_mask;
    report(10, "segmentation path", ok,
           "novel mask mAP " + fmt(meta_mask, 1) + " vs ft-full " + fmt(ft_mask, 1) +
               " (mask grad checks covered in criterion 3)");
  }
}

// ===========================================================================
// Criterion 11: determinism

void criterion_determinism() {
  auto& b = bench();
  const fs::path root = work_dir() / "determinism";
  fs::remove_all(root);
  TrainConfig cfg = benchmark_train(Strategy::meta_rcnn, 2, 17);
  cfg.phase1_iters = 25;
  cfg.phase2_iters = 10;

  auto run_once = [&](const std::string& name) {
    auto res = run_schedule(b.train, b.split, cfg, benchmark_model(), (root / name).string());
    auto model = load_model((root / name / "checkpoint_final.bin").string());
    const auto registry = sample_kshot(b.train, b.split, 2, 2, derive_seed(17, 0xF2));
    auto bank = build_bank(model, b.train, registry, 2, derive_seed(17, 0xBB));
    std::vector<int> idx = {0, 1, 2, 3, 4, 5, 6, 7};
    auto dets = evaluate_manifest(model, b.test, idx, &bank, benchmark_eval());
    auto gt = ground_truth_from(b.test, idx, false);
    std::vector<int> all;
    for (int c = 0; c < 12; ++c) all.push_back(c);
    auto rep = average_precision(dets, gt, all, 0.5, false);
    write_ap_report(rep, b.test, {{"run", "determinism"}}, (root / name / "report.json").string());
    return std::pair<std::string, std::string>(
        sha256_file((root / name / "checkpoint_final.bin").string()),
        sha256_file((root / name / "report.json").string()));
  };

  const auto a = run_once("a");
  const auto c = run_once("b");
  const bool ok = a.first == c.first && a.second == c.second;
  report(11, "determinism", ok,
         ok ? "identical checkpoint and report hashes (" + a.first.substr(0, 12) + "...)"
            : "hashes differ between identical runs");
}

}  // namespace

int main() {
  std::cout << "fewdet acceptance suite; work dir: " << work_dir().string() << "\n";
  const auto t0 = std::chrono::steady_clock::now();

  criterion_identity();
  criterion_oracles();
  criterion_gradients();
  criterion_aggregation();
  criterion_determinism();
  criteria_benchmark();

  const double mins =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  std::sort(g_results.begin(), g_results.end(),
            [](const Criterion& a, const Criterion& b) { return a.id < b.id; });
  int passed = 0;
  for (const auto& c : g_results) passed += c.passed ? 1 : 0;
  std::cout << "----------------------------------------------------------------\n";
  for (const auto& c : g_results)
    std::cout << (c.passed ? "[PASS] " : "[FAIL] ") << std::setw(2) << c.id << "  " << c.name
              << "\n";
  std::cout << passed << "/" << g_results.size() << " criteria passed in " << fmt(mins, 1)
            << " min\n";
  return passed == static_cast<int>(g_results.size()) ? 0 : 1;
}
