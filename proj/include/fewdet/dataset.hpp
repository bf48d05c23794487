#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fewdet/geometry.hpp"
#include "fewdet/image.hpp"

namespace fewdet {

// One labeled object: class, tight pixel box, and the visible-pixel mask.
struct ObjectAnnotation {
  int class_id = -1;
  Box bbox;
  BitMask mask;
};

struct ImageSample {
  Image image;  // 3×H×W in [0,1]
  std::vector<ObjectAnnotation> annotations;
  std::string id;
};

struct ClassSplit {
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  int split_id = 0;

  bool is_novel(int c) const {
    for (int n : novel_classes)
      if (n == c) return true;
    return false;
  }
};

struct ShotRef {
  std::string image_id;
  int ann_index = 0;
};

// The exact few-shot object selections for one phase. Phase 2 holds K shots
// per novel class and 3K per base class; phase 1 holds every base annotation
// (episodes subsample K of them per iteration).
struct FewShotRegistry {
  std::map<int, std::vector<ShotRef>> shots;
  int k = 0;
  int phase = 1;
  std::uint64_t seed = 0;
  // Novel shots may come from images that also contain base objects.
  bool allow_base_novel_mix = true;
};

struct ManifestObject {
  int class_id = -1;
  Box bbox;
  std::vector<int> mask_rle;  // over the full canvas, see rle_encode
};

struct ManifestImage {
  std::string id;
  std::string image_path;  // relative to the manifest directory
  int width = 0, height = 0;
  std::vector<ManifestObject> objects;
};

struct DatasetManifest {
  std::vector<ManifestImage> images;
  std::vector<std::string> class_names;
  std::uint64_t rng_seed = 0;
  std::string base_dir;                  // resolved at load/write time
  std::vector<std::string> diagnostics;  // per-record rejection messages

  int class_id(const std::string& name) const;
  const ManifestImage& by_id(const std::string& id) const;
  int index_of(const std::string& id) const;
};

// --- synthetic scenes -------------------------------------------------------

// Classes are shape×texture pairs so neither cue alone identifies a class.
// The canonical 12-class order puts four held-out combinations last; every
// shape and texture still occurs among the first eight.
std::vector<std::string> default_class_names();

struct SceneConfig {
  int canvas_h = 128;
  int canvas_w = 128;
  float max_overlap_iou = 0.3f;
  float max_coverage = 0.5f;  // cap on inter/area for any earlier object
  int min_size = 18;
  int max_size = 56;
  int max_retries = 200;
};

// Renders textured geometric shapes on a cluttered background. Pure function
// of (arguments, seed); annotations are exact by construction.
ImageSample generate_scene(int num_objects, const std::vector<int>& class_pool,
                           const SceneConfig& cfg, std::uint64_t rng_seed);

struct DataGenConfig {
  int num_images = 2000;
  int min_objects = 1;
  int max_objects = 5;
  SceneConfig scene;
  std::uint64_t seed = 1;
  std::string id_prefix = "img_";
};

// Generates scenes, writes PNGs under <out_dir>/images and a manifest.jsonl;
// returns the manifest. Deterministic in (config, seed).
DatasetManifest build_dataset(const DataGenConfig& cfg, const std::string& out_dir);

// --- splits and registries --------------------------------------------------

ClassSplit make_split(const std::vector<std::string>& class_universe,
                      const std::vector<std::string>& novel_names, int split_id = 0);
ClassSplit make_split_seeded(const std::vector<std::string>& class_universe, int novel_count,
                             std::uint64_t seed, int split_id = 0);

// PASCAL VOC 2007 class list and the three standard novel-class selections.
std::vector<std::string> voc_class_names();
std::vector<std::string> voc_novel_split(int which);

FewShotRegistry sample_kshot(const DatasetManifest& manifest, const ClassSplit& split, int k,
                             int phase, std::uint64_t rng_seed);

// --- manifests ---------------------------------------------------------------

enum class AnnotationFormat { native_jsonl, voc_xml_dir };

DatasetManifest ingest_annotations(const std::string& path, AnnotationFormat format,
                                   const std::vector<std::string>& class_names_for_voc = {});
void write_manifest(const DatasetManifest& manifest, const std::string& path);

// Loads the PNG + decodes masks for one manifest entry.
ImageSample load_sample(const DatasetManifest& manifest, int index);

// Registry round-trip (JSON).
void write_registry(const FewShotRegistry& reg, const DatasetManifest& manifest,
                    const std::string& path);
FewShotRegistry read_registry(const std::string& path, const DatasetManifest& manifest);

void write_split(const ClassSplit& split, const DatasetManifest& manifest, const std::string& path);
ClassSplit read_split(const std::string& path, const DatasetManifest& manifest);

}  // namespace fewdet
