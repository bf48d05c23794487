// fewdet: synthetic-benchmark few-shot detection experiments.
// Commands: gen, train, eval, ablate, report.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "fewdet/checkpoint.hpp"
#include "fewdet/config.hpp"
#include "fewdet/evalmod.hpp"
#include "fewdet/sha256.hpp"
#include "fewdet/train.hpp"
#include "fewdet/version.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace fewdet;

namespace {

struct DataBundle {
  DatasetManifest train;
  DatasetManifest test;
  ClassSplit split;
};

DataBundle load_data(const RunConfig& cfg) {
  const fs::path root = cfg.data.dir;
  if (!fs::exists(root / "train" / "manifest.jsonl"))
    throw data_error("dataset not found under " + cfg.data.dir + " (run `fewdet gen` first)");
  DataBundle b;
  b.train = ingest_annotations((root / "train" / "manifest.jsonl").string(),
                               AnnotationFormat::native_jsonl);
  b.test = ingest_annotations((root / "test" / "manifest.jsonl").string(),
                              AnnotationFormat::native_jsonl);
  b.split = read_split((root / "split.json").string(), b.train);
  return b;
}

std::vector<int> class_set_for(const std::string& which, const ClassSplit& split, int num_classes) {
  if (which == "base") return split.base_classes;
  if (which == "novel") return split.novel_classes;
  std::vector<int> all;
  for (int c = 0; c < num_classes; ++c) all.push_back(c);
  return all;
}

std::vector<int> all_indices(const DatasetManifest& m) {
  std::vector<int> idx(m.images.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  return idx;
}

int cmd_gen(const RunConfig& cfg) {
  const fs::path root = cfg.data.dir;
  fs::create_directories(root);

  DataGenConfig gen;
  gen.scene.canvas_h = gen.scene.canvas_w = cfg.data.canvas;
  gen.scene.max_overlap_iou = cfg.data.max_overlap_iou;
  gen.min_objects = cfg.data.min_objects;
  gen.max_objects = cfg.data.max_objects;

  gen.num_images = cfg.data.train_images;
  gen.seed = derive_seed(cfg.seed, 0x7121);
  auto train = build_dataset(gen, (root / "train").string());

  gen.num_images = cfg.data.test_images;
  gen.seed = derive_seed(cfg.seed, 0x7E57);
  auto test = build_dataset(gen, (root / "test").string());

  auto novel = cfg.data.novel_classes;
  if (novel.empty()) novel.assign(train.class_names.end() - 4, train.class_names.end());
  auto split = make_split(train.class_names, novel, cfg.data.split_id);
  write_split(split, train, (root / "split.json").string());

  std::map<int, int> counts;
  int objects = 0;
  for (const auto& img : train.images)
    for (const auto& o : img.objects) {
      ++counts[o.class_id];
      ++objects;
    }
  std::cout << "generated " << train.images.size() << " train / " << test.images.size()
            << " test images, " << objects << " train objects, " << train.class_names.size()
            << " classes (" << split.novel_classes.size() << " novel)\n";
  for (const auto& [cls, n] : counts)
    std::cout << "  " << std::setw(18) << std::left << train.class_names[static_cast<std::size_t>(cls)]
              << n << (split.is_novel(cls) ? "  [novel]" : "") << "\n";
  std::cout << "train manifest sha256 "
            << sha256_file((root / "train" / "manifest.jsonl").string()) << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  auto data = load_data(cfg);
  fs::create_directories(cfg.out_dir);
  std::cout << "training strategy " << strategy_name(cfg.train.strategy) << ", K="
            << cfg.train.k_shot << ", seed " << cfg.seed << "\n";
  auto result = run_schedule(data.train, data.split, cfg.train, cfg.model, cfg.out_dir);
  const auto& last = result.log.back();
  std::cout << "finished after " << result.log.size() << " iterations; final total loss "
            << last.total << "\n";
  std::cout << "checkpoint " << result.final_checkpoint << "\n";
  std::cout << "checkpoint sha256 " << sha256_file(result.final_checkpoint) << "\n";
  return 0;
}

json evaluate_checkpoint(const RunConfig& cfg, const DataBundle& data, ModelF& model,
                         const FewShotRegistry& registry, int k, const std::string& out_dir,
                         bool timing) {
  const auto test_idx = all_indices(data.test);
  const auto class_set = class_set_for(cfg.eval.classes, data.split, model.cfg.num_classes);

  std::vector<AttentiveVector> vectors;
  std::optional<AttentiveBank> bank;
  if (model.cfg.with_attention) {
    bank = build_bank(model, data.train, registry, k, derive_seed(cfg.seed, 0xBB), &vectors);
    ensure_bank_covers(*bank, class_set);
  }

  auto detections =
      evaluate_manifest(model, data.test, test_idx, bank ? &*bank : nullptr, cfg.eval.eval);
  auto gt = ground_truth_from(data.test, test_idx, cfg.eval.use_mask_ap);
  auto box_report =
      average_precision(detections, gt, class_set, cfg.eval.eval.iou_threshold, false);

  json settings;
  settings["config"] = run_config_to_json(cfg);
  settings["version"] = kFewdetVersion;
  settings["k_shot"] = k;
  settings["classes"] = cfg.eval.classes;

  json out;
  out["box_map"] = box_report.map;
  json per = json::object();
  for (const auto& [cls, ap] : box_report.per_class_ap)
    per[data.test.class_names[static_cast<std::size_t>(cls)]] = ap;
  out["box_per_class"] = per;

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_ap_report(box_report, data.test, settings, (fs::path(out_dir) / "report.json").string());
    write_detections_jsonl(detections, data.test,
                           (fs::path(out_dir) / "detections.jsonl").string());
  }

  if (cfg.eval.use_mask_ap && model.cfg.with_mask) {
    auto mask_report =
        average_precision(detections, gt, class_set, cfg.eval.eval.iou_threshold, true);
    out["mask_map"] = mask_report.map;
    if (!out_dir.empty())
      write_ap_report(mask_report, data.test, settings,
                      (fs::path(out_dir) / "report_mask.json").string());
  }

  if (bank && !out_dir.empty()) {
    write_bank(*bank, (fs::path(out_dir) / "bank.json").string());
    if (vectors.size() >= 2 && bank->vectors.size() >= 2 && k >= 2) {
      auto vreport = attentive_vector_report(vectors);
      write_vector_report(vreport, vectors, (fs::path(out_dir) / "vector_report.json").string());
      out["intra_class_cosine"] = vreport.intra_class_mean_cosine;
      out["inter_class_cosine"] = vreport.inter_class_mean_cosine;
    }
  }

  if (timing && bank) {
    std::vector<int> sample_idx(test_idx.begin(),
                                test_idx.begin() + std::min<std::size_t>(30, test_idx.size()));
    auto t = measure_inference_overhead(model, data.test, sample_idx, *bank, cfg.eval.eval);
    out["timing"] = {{"plain_ms_per_image", t.plain_ms_per_image},
                     {"attended_ms_per_image", t.attended_ms_per_image},
                     {"overhead_ratio", t.overhead_ratio}};
  }
  return out;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& registry_path,
             bool timing, const std::string& curve_dir) {
  auto data = load_data(cfg);
  auto model = load_model(checkpoint);
  auto registry = read_registry(registry_path, data.train);
  const int k = cfg.eval.k_shot > 0 ? cfg.eval.k_shot : cfg.train.k_shot;
  if (registry.phase == 2 && k != registry.k)
    throw config_error("eval K=" + std::to_string(k) + " does not match registry K=" +
                       std::to_string(registry.k));

  auto out = evaluate_checkpoint(cfg, data, model, registry, k, cfg.out_dir, timing);
  std::cout << "box mAP@" << cfg.eval.eval.iou_threshold << " (" << cfg.eval.classes
            << "): " << out["box_map"].get<double>() << "\n";
  if (out.contains("mask_map")) std::cout << "mask mAP: " << out["mask_map"].get<double>() << "\n";
  if (out.contains("timing"))
    std::cout << "inference overhead ratio: " << out["timing"]["overhead_ratio"].get<double>()
              << "\n";

  if (!curve_dir.empty()) {
    // Checkpoint series -> normalized AP adaptation curve on the class set.
    std::vector<std::pair<int, fs::path>> series;
    for (const auto& entry : fs::directory_iterator(curve_dir)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("checkpoint_p2_", 0) == 0 && entry.path().extension() == ".bin")
        series.emplace_back(std::stoi(name.substr(14, name.size() - 18)), entry.path());
    }
    std::sort(series.begin(), series.end());
    if (series.size() < 2) throw data_error("adaptation curve needs at least 2 checkpoints");
    const auto class_set = class_set_for(cfg.eval.classes, data.split, cfg.model.num_classes);
    std::vector<int> iters;
    std::vector<std::map<int, double>> aps;
    for (const auto& [iter, path] : series) {
      auto m = load_model(path.string());
      std::optional<AttentiveBank> b;
      if (m.cfg.with_attention)
        b = build_bank(m, data.train, registry, k, derive_seed(cfg.seed, 0xBB));
      auto dets = evaluate_manifest(m, data.test, all_indices(data.test), b ? &*b : nullptr,
                                    cfg.eval.eval);
      auto gt = ground_truth_from(data.test, all_indices(data.test), false);
      auto rep = average_precision(dets, gt, class_set, cfg.eval.eval.iou_threshold, false);
      iters.push_back(iter);
      aps.push_back(rep.per_class_ap);
    }
    auto curve = adaptation_curve(iters, aps, class_set);
    json cj;
    cj["iterations"] = curve.iterations;
    cj["mean"] = curve.mean;
    cj["variance"] = curve.variance;
    json percls = json::object();
    for (const auto& [cls, series_vals] : curve.per_class_normalized)
      percls[data.test.class_names[static_cast<std::size_t>(cls)]] = series_vals;
    cj["per_class"] = percls;
    cj["excluded_classes"] = curve.excluded_classes;
    cj["version"] = kFewdetVersion;
    fs::create_directories(cfg.out_dir);
    std::ofstream os(fs::path(cfg.out_dir) / "adaptation_curve.json");
    os << cj.dump(2) << "\n";
    std::cout << "adaptation curve over " << iters.size() << " checkpoints written\n";
  }
  return 0;
}

int cmd_ablate(const RunConfig& base_cfg, const std::string& matrix_path) {
  std::ifstream is(matrix_path);
  if (!is) throw config_error("cannot open ablation matrix " + matrix_path);
  json matrix = json::parse(is);
  static const std::set<std::string> kAxes = {"meta_loss", "fusion",     "unshare", "meta_scope",
                                              "strategy",  "lambda_mask", "k_shot"};
  std::vector<std::string> axes;
  std::vector<std::vector<json>> values;
  for (const auto& [axis, vals] : matrix.items()) {
    if (!kAxes.count(axis))
      throw config_error("ablate: unknown axis '" + axis + "'");
    if (!vals.is_array() || vals.empty())
      throw config_error("ablate: axis '" + axis + "' must list values");
    axes.push_back(axis);
    values.push_back(std::vector<json>(vals.begin(), vals.end()));
  }
  if (axes.empty()) throw config_error("ablate: empty matrix");

  auto data = load_data(base_cfg);
  json table = json::array();

  std::vector<std::size_t> cursor(axes.size(), 0);
  bool done = false;
  while (!done) {
    RunConfig cfg = base_cfg;
    std::string cell_name;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const json& v = values[a][cursor[a]];
      cell_name += (cell_name.empty() ? "" : "_") + axes[a] + "-" +
                   (v.is_string() ? v.get<std::string>() : v.dump());
      if (axes[a] == "meta_loss") cfg.train.meta_loss_on = v.get<bool>();
      if (axes[a] == "fusion") cfg.train.fusion = fusion_from_name(v.get<std::string>());
      if (axes[a] == "unshare") cfg.train.unshare = v.get<bool>();
      if (axes[a] == "meta_scope") cfg.train.scope = scope_from_name(v.get<std::string>());
      if (axes[a] == "strategy") cfg.train.strategy = strategy_from_name(v.get<std::string>());
      if (axes[a] == "lambda_mask") cfg.train.lambda_mask = v.get<int>();
      if (axes[a] == "k_shot") cfg.train.k_shot = v.get<int>();
    }
    std::cout << "[ablate] cell " << cell_name << "\n";
    const std::string cell_dir = (fs::path(base_cfg.out_dir) / cell_name).string();
    auto result = run_schedule(data.train, data.split, cfg.train, cfg.model, cell_dir);

    json row;
    for (std::size_t a = 0; a < axes.size(); ++a) row[axes[a]] = values[a][cursor[a]];
    for (const std::string which : {"novel", "base"}) {
      RunConfig ecfg = cfg;
      ecfg.eval.classes = which;
      auto r = evaluate_checkpoint(ecfg, data, *result.model, result.registry_phase2,
                                   cfg.train.k_shot, "", false);
      row[which + "_map"] = r["box_map"];
    }
    table.push_back(row);

    for (std::size_t a = 0;; ++a) {
      if (a == axes.size()) {
        done = true;
        break;
      }
      if (++cursor[a] < values[a].size()) break;
      cursor[a] = 0;
    }
  }

  fs::create_directories(base_cfg.out_dir);
  json out;
  out["version"] = kFewdetVersion;
  out["config"] = run_config_to_json(base_cfg);
  out["rows"] = table;
  std::ofstream os(fs::path(base_cfg.out_dir) / "ablation.json");
  os << out.dump(2) << "\n";

  std::ostringstream text;
  for (const auto& axis : axes) text << std::setw(18) << std::left << axis;
  text << std::setw(12) << "novel_map" << std::setw(12) << "base_map" << "\n";
  for (const auto& row : table) {
    for (const auto& axis : axes) text << std::setw(18) << std::left << row[axis].dump();
    text << std::setw(12) << std::fixed << std::setprecision(4) << row["novel_map"].get<double>()
         << std::setw(12) << row["base_map"].get<double>() << "\n";
  }
  std::ofstream ts(fs::path(base_cfg.out_dir) / "ablation.txt");
  ts << text.str();
  std::cout << text.str();
  return 0;
}

int cmd_report(const std::string& dir) {
  json combined = json::array();
  std::ostringstream text;
  text << std::setw(44) << std::left << "run" << std::setw(10) << "mAP" << "classes\n";
  std::vector<fs::path> found;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.path().filename() == "report.json" || entry.path().filename() == "report_mask.json")
      found.push_back(entry.path());
  std::sort(found.begin(), found.end());
  for (const auto& p : found) {
    std::ifstream is(p);
    json j = json::parse(is);
    json row;
    row["path"] = fs::relative(p, dir).string();
    row["map"] = j["map"];
    row["mask_iou"] = j["mask_iou"];
    combined.push_back(row);
    text << std::setw(44) << std::left << fs::relative(p, dir).string() << std::setw(10)
         << std::fixed << std::setprecision(4) << j["map"].get<double>()
         << j["settings"].value("classes", std::string("?")) << "\n";
  }
  std::ofstream os(fs::path(dir) / "combined.json");
  os << combined.dump(2) << "\n";
  std::cout << text.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fewdet: few-shot detection with class-attentive head remodeling"};
  app.set_version_flag("--version", kFewdetVersion);
  app.require_subcommand(1);

  std::string config_path, checkpoint, registry, curve_dir, report_dir = "runs", matrix_path;
  std::string strategy_override, classes_override, out_override;
  std::uint64_t seed_override = 0;
  int k_override = 0;
  bool timing = false;
  bool have_seed = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--seed", seed_override, "override config seed")->each([&](std::string) {
      have_seed = true;
    });
    cmd->add_option("--out", out_override, "override output directory");
  };

  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  add_common(gen);
  auto* train = app.add_subcommand("train", "train a detector with a strategy schedule");
  add_common(train);
  train->add_option("--strategy", strategy_override,
                    "meta_rcnn|frcn_joint|frcn_ft|frcn_ft_full|full_image_meta");
  train->add_option("--k", k_override, "shots per novel class");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint with a K-shot registry");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--registry", registry, "K-shot registry JSON")->required();
  eval->add_option("--classes", classes_override, "all|base|novel");
  eval->add_option("--k", k_override, "bank shots per class");
  eval->add_flag("--timing", timing, "measure attended vs plain inference time");
  eval->add_option("--curve", curve_dir, "directory of phase-2 checkpoints for adaptation curve");
  auto* ablate = app.add_subcommand("ablate", "run an ablation matrix");
  add_common(ablate);
  ablate->add_option("--matrix", matrix_path, "JSON axis matrix")->required();
  auto* report = app.add_subcommand("report", "assemble reports under a directory");
  report->add_option("--out", report_dir, "directory to scan");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    if (have_seed) {
      cfg.seed = seed_override;
      cfg.train.seed = seed_override;
    } else {
      cfg.train.seed = cfg.seed;
    }
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (!strategy_override.empty()) cfg.train.strategy = strategy_from_name(strategy_override);
    if (k_override > 0) {
      cfg.train.k_shot = k_override;
      cfg.eval.k_shot = k_override;
    }
    if (!classes_override.empty()) {
      if (classes_override != "all" && classes_override != "base" && classes_override != "novel")
        throw config_error("--classes must be all, base or novel");
      cfg.eval.classes = classes_override;
    }

    if (gen->parsed()) return cmd_gen(cfg);
    if (train->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_eval(cfg, checkpoint, registry, timing, curve_dir);
    if (ablate->parsed()) return cmd_ablate(cfg, matrix_path);
    if (report->parsed()) return cmd_report(report_dir);
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const numerical_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
