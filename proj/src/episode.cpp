#include "fewdet/episode.hpp"

#include <algorithm>
#include <set>

namespace fewdet {

namespace {

// Meta inputs for one class: K registry shots, subsampled without
// replacement when the pool is larger (phase-1 pools hold all base objects).
void draw_meta_inputs(const DatasetManifest& manifest, const FewShotRegistry& registry, int cls,
                      int k, int meta_size, Rng& rng, std::vector<MetaInput>& out) {
  auto it = registry.shots.find(cls);
  if (it == registry.shots.end() || it->second.empty())
    throw data_error("build_episode: registry has no shots for class " +
                     manifest.class_names[static_cast<std::size_t>(cls)]);
  const auto& pool = it->second;
  const int take = std::min<int>(k, static_cast<int>(pool.size()));
  auto idx = rng.sample_without_replacement(static_cast<int>(pool.size()), take);
  std::sort(idx.begin(), idx.end());
  for (int i : idx) {
    const auto& ref = pool[static_cast<std::size_t>(i)];
    const auto sample = load_sample(manifest, manifest.index_of(ref.image_id));
    out.push_back(build_meta_input(sample, ref.ann_index, meta_size));
  }
}

}  // namespace

Episode build_episode(const DatasetManifest& manifest, int index, const FewShotRegistry* registry,
                      const ClassSplit& split, int phase, int k, MetaScope scope, int meta_size,
                      bool want_meta, Rng& rng) {
  Episode ep;
  ep.sample = load_sample(manifest, index);
  const auto& anns = ep.sample.annotations;

  if (phase == 0) {
    for (int i = 0; i < static_cast<int>(anns.size()); ++i) ep.labeled.push_back(i);
  } else if (phase == 1) {
    for (int i = 0; i < static_cast<int>(anns.size()); ++i) {
      if (split.is_novel(anns[static_cast<std::size_t>(i)].class_id))
        ep.ignored.push_back(i);
      else
        ep.labeled.push_back(i);
    }
  } else if (phase == 2) {
    if (!registry) throw config_error("build_episode: phase 2 requires a registry");
    std::set<int> in_registry;
    for (const auto& [cls, refs] : registry->shots)
      for (const auto& r : refs)
        if (r.image_id == ep.sample.id) in_registry.insert(r.ann_index);
    for (int i = 0; i < static_cast<int>(anns.size()); ++i) {
      if (in_registry.count(i))
        ep.labeled.push_back(i);
      else
        ep.ignored.push_back(i);
    }
  } else {
    throw config_error("build_episode: phase must be 0, 1 or 2");
  }

  if (ep.labeled.empty())
    throw data_error("build_episode: image " + ep.sample.id + " has no labeled objects for phase " +
                     std::to_string(phase));

  std::set<int> classes;
  for (int i : ep.labeled) classes.insert(anns[static_cast<std::size_t>(i)].class_id);
  ep.c_meta.assign(classes.begin(), classes.end());

  if (want_meta) {
    if (!registry) throw config_error("build_episode: meta inputs require a registry");
    std::vector<int> meta_classes = ep.c_meta;
    if (scope == MetaScope::all_classes) {
      meta_classes.clear();
      for (const auto& [cls, refs] : registry->shots) meta_classes.push_back(cls);
    }
    for (int cls : meta_classes)
      draw_meta_inputs(manifest, *registry, cls, k, meta_size, rng, ep.meta_inputs);
  }
  return ep;
}

std::vector<int> episode_candidates(const DatasetManifest& manifest, const FewShotRegistry* registry,
                                    const ClassSplit& split, int phase) {
  std::vector<int> out;
  if (phase == 2) {
    if (!registry) throw config_error("episode_candidates: phase 2 requires a registry");
    std::set<std::string> ids;
    for (const auto& [cls, refs] : registry->shots)
      for (const auto& r : refs) ids.insert(r.image_id);
    for (int i = 0; i < static_cast<int>(manifest.images.size()); ++i)
      if (ids.count(manifest.images[static_cast<std::size_t>(i)].id))
        out.push_back(i);
    return out;
  }
  for (int i = 0; i < static_cast<int>(manifest.images.size()); ++i) {
    const auto& img = manifest.images[static_cast<std::size_t>(i)];
    bool any = false;
    for (const auto& o : img.objects) {
      if (phase == 0 || !split.is_novel(o.class_id)) any = true;
    }
    if (any) out.push_back(i);
  }
  return out;
}

}  // namespace fewdet
