#pragma once

#include <vector>

#include "fewdet/attention.hpp"
#include "fewdet/dataset.hpp"
#include "fewdet/rng.hpp"

namespace fewdet {

// Which classes contribute reference objects to each episode's meta-set.
enum class MetaScope { image_classes, all_classes };

inline const char* scope_name(MetaScope s) {
  return s == MetaScope::image_classes ? "image-classes" : "all-classes";
}
inline MetaScope scope_from_name(const std::string& s) {
  if (s == "image-classes") return MetaScope::image_classes;
  if (s == "all-classes") return MetaScope::all_classes;
  throw config_error("unknown meta scope '" + s + "' (image-classes|all-classes)");
}

// One training mini-batch: the detection image (its labeled/ignored object
// split) plus the K-shot reference objects for the episode's classes.
struct Episode {
  ImageSample sample;
  std::vector<int> labeled;   // annotation indices used as targets
  std::vector<int> ignored;   // annotation indices excluded from all losses
  std::vector<int> c_meta;    // distinct labeled classes, ascending
  std::vector<MetaInput> meta_inputs;
};

// phase 1: base-class objects are labeled, novel-class objects are ignored.
// phase 2: only objects referenced by the registry are labeled.
// phase 0 ("joint"): every object is labeled; no meta inputs are drawn.
Episode build_episode(const DatasetManifest& manifest, int index, const FewShotRegistry* registry,
                      const ClassSplit& split, int phase, int k, MetaScope scope, int meta_size,
                      bool want_meta, Rng& rng);

// Manifest indices eligible as D_train images for a phase.
std::vector<int> episode_candidates(const DatasetManifest& manifest, const FewShotRegistry* registry,
                                    const ClassSplit& split, int phase);

}  // namespace fewdet
