#include "fewdet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fewdet/png.hpp"
#include "fewdet/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace fewdet {

int DatasetManifest::class_id(const std::string& name) const {
  for (std::size_t i = 0; i < class_names.size(); ++i)
    if (class_names[i] == name) return static_cast<int>(i);
  return -1;
}

int DatasetManifest::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < images.size(); ++i)
    if (images[i].id == id) return static_cast<int>(i);
  throw data_error("manifest: unknown image id " + id);
}

const ManifestImage& DatasetManifest::by_id(const std::string& id) const {
  return images[static_cast<std::size_t>(index_of(id))];
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

enum Shape { kCircle = 0, kSquare, kTriangle, kCross };
enum Texture { kSolid = 0, kStripes, kDots };

struct ClassDef {
  Shape shape;
  Texture texture;
  const char* name;
};

// Four combinations are held out at the end of the list; all four shapes and
// all three textures still occur among the first eight, so the held-out
// classes are new compositions of seen cues.
const ClassDef kClassTable[12] = {
    {kCircle, kSolid, "circle_solid"},      {kCircle, kStripes, "circle_stripes"},
    {kSquare, kSolid, "square_solid"},      {kSquare, kDots, "square_dots"},
    {kTriangle, kStripes, "triangle_stripes"}, {kTriangle, kDots, "triangle_dots"},
    {kCross, kSolid, "cross_solid"},        {kCross, kStripes, "cross_stripes"},
    {kCircle, kDots, "circle_dots"},        {kSquare, kStripes, "square_stripes"},
    {kTriangle, kSolid, "triangle_solid"},  {kCross, kDots, "cross_dots"}};

struct Rgb {
  float r, g, b;
};

Rgb random_color(Rng& rng) {
  return {static_cast<float>(rng.uniform(0.1, 0.9)), static_cast<float>(rng.uniform(0.1, 0.9)),
          static_cast<float>(rng.uniform(0.1, 0.9))};
}

// Accent color with guaranteed per-channel contrast against the foreground.
Rgb accent_color(const Rgb& fg) {
  auto flip = [](float v) { return v < 0.5f ? v + 0.45f : v - 0.45f; };
  return {flip(fg.r), flip(fg.g), flip(fg.b)};
}

bool inside_shape(Shape s, int x, int y, int x0, int y0, int w, int h) {
  const float fx = static_cast<float>(x - x0) + 0.5f;
  const float fy = static_cast<float>(y - y0) + 0.5f;
  const float cx = static_cast<float>(w) / 2.0f;
  const float cy = static_cast<float>(h) / 2.0f;
  switch (s) {
    case kCircle: {
      const float dx = (fx - cx) / cx;
      const float dy = (fy - cy) / cy;
      return dx * dx + dy * dy <= 1.0f;
    }
    case kSquare:
      return true;
    case kTriangle: {
      const float t = fy / static_cast<float>(h);
      return std::abs(fx - cx) <= t * cx;
    }
    case kCross: {
      const float bar_x = static_cast<float>(w) / 6.0f;
      const float bar_y = static_cast<float>(h) / 6.0f;
      return std::abs(fx - cx) <= bar_x || std::abs(fy - cy) <= bar_y;
    }
  }
  return false;
}

bool textured_accent(Texture t, int x, int y, int x0, int y0) {
  const int lx = x - x0, ly = y - y0;
  switch (t) {
    case kSolid:
      return false;
    case kStripes:
      return ((lx + ly) / 4) % 2 == 1;
    case kDots:
      return lx % 7 < 3 && ly % 7 < 3;
  }
  return false;
}

void paint_background(Image& img, Rng& rng) {
  const Rgb base = random_color(rng);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      img.at(0, y, x) = base.r;
      img.at(1, y, x) = base.g;
      img.at(2, y, x) = base.b;
    }
  const int blobs = rng.uniform_int(3, 6);
  for (int i = 0; i < blobs; ++i) {
    const Rgb c = random_color(rng);
    const float bx = static_cast<float>(rng.uniform(0, img.width));
    const float by = static_cast<float>(rng.uniform(0, img.height));
    const float rad = static_cast<float>(rng.uniform(10, 40));
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const float d2 = (static_cast<float>(x) - bx) * (static_cast<float>(x) - bx) +
                         (static_cast<float>(y) - by) * (static_cast<float>(y) - by);
        const float a = 0.35f * std::exp(-d2 / (2.0f * rad * rad));
        img.at(0, y, x) = img.at(0, y, x) * (1 - a) + c.r * a;
        img.at(1, y, x) = img.at(1, y, x) * (1 - a) + c.g * a;
        img.at(2, y, x) = img.at(2, y, x) * (1 - a) + c.b * a;
      }
  }
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const float v = img.at(ch, y, x) + static_cast<float>(rng.uniform(-0.04, 0.04));
        img.at(ch, y, x) = std::min(std::max(v, 0.0f), 1.0f);
      }
}

}  // namespace

std::vector<std::string> default_class_names() {
  std::vector<std::string> names;
  for (const auto& c : kClassTable) names.emplace_back(c.name);
  return names;
}

ImageSample generate_scene(int num_objects, const std::vector<int>& class_pool,
                           const SceneConfig& cfg, std::uint64_t rng_seed) {
  if (num_objects < 1) throw config_error("generate_scene: num_objects must be >= 1");
  if (class_pool.empty()) throw config_error("generate_scene: empty class pool");
  for (int c : class_pool)
    if (c < 0 || c >= 12) throw config_error("generate_scene: class id out of range");
  const int h = cfg.canvas_h, w = cfg.canvas_w;
  if (h < cfg.min_size + 2 || w < cfg.min_size + 2)
    throw placement_error("generate_scene: canvas smaller than the minimum object size");

  Rng rng(derive_seed(rng_seed, 0xD5));

  ImageSample sample;
  sample.image = Image(3, h, w);
  paint_background(sample.image, rng);

  struct Placed {
    int class_id;
    int x0, y0, w, h;
  };
  std::vector<Placed> placed;
  int retries = 0;
  while (static_cast<int>(placed.size()) < num_objects) {
    const int max_side = std::min({cfg.max_size, w - 2, h - 2});
    const int side = rng.uniform_int(cfg.min_size, max_side);
    const int ow = std::min(static_cast<int>(std::lround(side * rng.uniform(0.85, 1.2))), w - 2);
    const int oh = std::min(static_cast<int>(std::lround(side * rng.uniform(0.85, 1.2))), h - 2);
    const int x0 = rng.uniform_int(1, w - ow - 1);
    const int y0 = rng.uniform_int(1, h - oh - 1);
    const Box cand{static_cast<float>(x0), static_cast<float>(y0), static_cast<float>(x0 + ow),
                   static_cast<float>(y0 + oh)};
    bool ok = true;
    for (const auto& p : placed) {
      const Box other{static_cast<float>(p.x0), static_cast<float>(p.y0),
                      static_cast<float>(p.x0 + p.w), static_cast<float>(p.y0 + p.h)};
      const double ix = std::max(0.0, static_cast<double>(std::min(cand.x2, other.x2)) -
                                          std::max(cand.x1, other.x1));
      const double iy = std::max(0.0, static_cast<double>(std::min(cand.y2, other.y2)) -
                                          std::max(cand.y1, other.y1));
      const double inter = ix * iy;
      if (iou(cand, other) > cfg.max_overlap_iou ||
          inter / std::min(cand.area(), other.area()) > cfg.max_coverage) {
        ok = false;
        break;
      }
    }
    if (!ok) {
      if (++retries > cfg.max_retries)
        throw placement_error("generate_scene: could not place " + std::to_string(num_objects) +
                              " objects on a " + std::to_string(w) + "x" + std::to_string(h) +
                              " canvas after " + std::to_string(cfg.max_retries) + " retries");
      continue;
    }
    const int cls = class_pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(class_pool.size()) - 1))];
    placed.push_back({cls, x0, y0, ow, oh});
  }

  // Render in placement order; later objects occlude earlier ones, and the
  // stored masks are the visible pixels.
  std::vector<BitMask> masks;
  for (const auto& p : placed) {
    const ClassDef& def = kClassTable[p.class_id];
    const Rgb fg = random_color(rng);
    const Rgb acc = accent_color(fg);
    BitMask m(h, w);
    for (int y = p.y0; y < p.y0 + p.h; ++y)
      for (int x = p.x0; x < p.x0 + p.w; ++x) {
        if (!inside_shape(def.shape, x, y, p.x0, p.y0, p.w, p.h)) continue;
        const Rgb& c = textured_accent(def.texture, x, y, p.x0, p.y0) ? acc : fg;
        sample.image.at(0, y, x) = c.r;
        sample.image.at(1, y, x) = c.g;
        sample.image.at(2, y, x) = c.b;
        m.at(y, x) = 1;
        for (auto& prev : masks) prev.at(y, x) = 0;
      }
    masks.push_back(std::move(m));
  }

  for (std::size_t i = 0; i < placed.size(); ++i) {
    const BitMask& m = masks[i];
    int x1 = w, y1 = h, x2 = -1, y2 = -1;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (m.at(y, x)) {
          x1 = std::min(x1, x);
          y1 = std::min(y1, y);
          x2 = std::max(x2, x);
          y2 = std::max(y2, y);
        }
    if (x2 < 0 || m.count() < 12)
      throw placement_error("generate_scene: object fully occluded; regenerate with another seed");
    ObjectAnnotation ann;
    ann.class_id = placed[i].class_id;
    ann.bbox = {static_cast<float>(x1), static_cast<float>(y1), static_cast<float>(x2 + 1),
                static_cast<float>(y2 + 1)};
    ann.mask = m;
    sample.annotations.push_back(std::move(ann));
  }
  return sample;
}

DatasetManifest build_dataset(const DataGenConfig& cfg, const std::string& out_dir) {
  if (cfg.num_images < 1) throw config_error("build_dataset: num_images must be >= 1");
  if (cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects)
    throw config_error("build_dataset: bad object count range");
  fs::create_directories(fs::path(out_dir) / "images");

  DatasetManifest m;
  m.class_names = default_class_names();
  m.rng_seed = cfg.seed;
  m.base_dir = out_dir;

  std::vector<int> pool(m.class_names.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);

  Rng master(derive_seed(cfg.seed, 0xDA7A));
  for (int i = 0; i < cfg.num_images; ++i) {
    const int n_obj = master.uniform_int(cfg.min_objects, cfg.max_objects);
    std::uint64_t scene_seed = derive_seed(cfg.seed, 0x1000 + static_cast<std::uint64_t>(i));
    ImageSample sample;
    for (int attempt = 0;; ++attempt) {
      try {
        sample = generate_scene(n_obj, pool, cfg.scene, scene_seed);
        break;
      } catch (const placement_error&) {
        if (attempt >= 20) throw;
        scene_seed = derive_seed(scene_seed, 0xBAD);
      }
    }
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "%s%06d", cfg.id_prefix.c_str(), i);
    ManifestImage rec;
    rec.id = idbuf;
    rec.image_path = std::string("images/") + idbuf + ".png";
    rec.width = cfg.scene.canvas_w;
    rec.height = cfg.scene.canvas_h;
    for (const auto& ann : sample.annotations) {
      ManifestObject o;
      o.class_id = ann.class_id;
      o.bbox = ann.bbox;
      o.mask_rle = rle_encode(ann.mask);
      rec.objects.push_back(std::move(o));
    }
    write_png((fs::path(out_dir) / rec.image_path).string(), sample.image);
    m.images.push_back(std::move(rec));
  }
  write_manifest(m, (fs::path(out_dir) / "manifest.jsonl").string());
  return m;
}

// ---------------------------------------------------------------------------
// Splits

ClassSplit make_split(const std::vector<std::string>& class_universe,
                      const std::vector<std::string>& novel_names, int split_id) {
  ClassSplit split;
  split.split_id = split_id;
  std::vector<bool> is_novel(class_universe.size(), false);
  for (const auto& name : novel_names) {
    auto it = std::find(class_universe.begin(), class_universe.end(), name);
    if (it == class_universe.end())
      throw config_error("make_split: novel class '" + name + "' not in the class universe");
    is_novel[static_cast<std::size_t>(it - class_universe.begin())] = true;
  }
  for (std::size_t i = 0; i < class_universe.size(); ++i)
    (is_novel[i] ? split.novel_classes : split.base_classes).push_back(static_cast<int>(i));
  return split;
}

ClassSplit make_split_seeded(const std::vector<std::string>& class_universe, int novel_count,
                             std::uint64_t seed, int split_id) {
  if (novel_count <= 0 || novel_count >= static_cast<int>(class_universe.size()))
    throw config_error("make_split_seeded: novel_count out of range");
  Rng rng(derive_seed(seed, 0x51));
  auto idx = rng.sample_without_replacement(static_cast<int>(class_universe.size()), novel_count);
  std::vector<std::string> novel;
  for (int i : idx) novel.push_back(class_universe[static_cast<std::size_t>(i)]);
  return make_split(class_universe, novel, split_id);
}

std::vector<std::string> voc_class_names() {
  return {"aeroplane", "bicycle", "bird",   "boat",   "bottle", "bus",    "car",
          "cat",       "chair",   "cow",    "diningtable", "dog", "horse",
          "motorbike", "person",  "pottedplant", "sheep", "sofa", "train", "tvmonitor"};
}

std::vector<std::string> voc_novel_split(int which) {
  switch (which) {
    case 1:
      return {"bird", "bus", "cow", "motorbike", "sofa"};
    case 2:
      return {"aeroplane", "bottle", "cow", "horse", "sofa"};
    case 3:
      return {"boat", "cat", "motorbike", "sheep", "sofa"};
    default:
      throw config_error("voc_novel_split: split must be 1, 2 or 3");
  }
}

// ---------------------------------------------------------------------------
// K-shot registries

FewShotRegistry sample_kshot(const DatasetManifest& manifest, const ClassSplit& split, int k,
                             int phase, std::uint64_t rng_seed) {
  if (k < 1) throw config_error("sample_kshot: K must be >= 1");
  if (phase != 1 && phase != 2) throw config_error("sample_kshot: phase must be 1 or 2");

  std::map<int, std::vector<ShotRef>> pools;
  for (const auto& img : manifest.images)
    for (std::size_t a = 0; a < img.objects.size(); ++a)
      pools[img.objects[a].class_id].push_back({img.id, static_cast<int>(a)});

  FewShotRegistry reg;
  reg.k = k;
  reg.phase = phase;
  reg.seed = rng_seed;
  Rng rng(derive_seed(rng_seed, 0x55));

  auto take = [&](int cls, int want) {
    auto it = pools.find(cls);
    if (it == pools.end() || it->second.empty())
      throw data_error("sample_kshot: class '" +
                       manifest.class_names[static_cast<std::size_t>(cls)] +
                       "' has zero annotations");
    auto& pool = it->second;
    const int n = static_cast<int>(pool.size());
    const int count = std::min(want, n);
    auto idx = rng.sample_without_replacement(n, count);
    std::sort(idx.begin(), idx.end());
    std::vector<ShotRef> out;
    for (int i : idx) out.push_back(pool[static_cast<std::size_t>(i)]);
    return out;
  };

  if (phase == 1) {
    // Full base-class pool; episodes draw K-sized meta-sets from it.
    for (int cls : split.base_classes) reg.shots[cls] = take(cls, static_cast<int>(1e9));
  } else {
    for (int cls : split.novel_classes) reg.shots[cls] = take(cls, k);
    for (int cls : split.base_classes) reg.shots[cls] = take(cls, 3 * k);
  }
  return reg;
}

// ---------------------------------------------------------------------------
// Manifest I/O

namespace {

ManifestObject parse_object(const json& jo, const DatasetManifest& m, int canvas_h, int canvas_w) {
  ManifestObject obj;
  const std::string cls = jo.at("class").get<std::string>();
  obj.class_id = m.class_id(cls);
  if (obj.class_id < 0) {
    std::string known;
    for (const auto& n : m.class_names) known += (known.empty() ? "" : ", ") + n;
    throw data_error("unknown class name '" + cls + "' (known classes: " + known + ")");
  }
  const auto& bb = jo.at("bbox");
  obj.bbox = {bb.at(0).get<float>(), bb.at(1).get<float>(), bb.at(2).get<float>(),
              bb.at(3).get<float>()};
  if (!(obj.bbox.x1 < obj.bbox.x2) || !(obj.bbox.y1 < obj.bbox.y2))
    throw data_error("degenerate box (x1>=x2 or y1>=y2)");
  if (obj.bbox.x1 < 0 || obj.bbox.y1 < 0 || obj.bbox.x2 > static_cast<float>(canvas_w) ||
      obj.bbox.y2 > static_cast<float>(canvas_h))
    throw data_error("box outside image bounds");
  if (jo.contains("mask_rle")) {
    obj.mask_rle = jo.at("mask_rle").at("counts").get<std::vector<int>>();
  } else {
    // Rectangle mask filling the box.
    BitMask bm(canvas_h, canvas_w);
    for (int y = static_cast<int>(obj.bbox.y1); y < static_cast<int>(obj.bbox.y2); ++y)
      for (int x = static_cast<int>(obj.bbox.x1); x < static_cast<int>(obj.bbox.x2); ++x)
        bm.at(y, x) = 1;
    obj.mask_rle = rle_encode(bm);
  }
  return obj;
}

DatasetManifest ingest_native_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw data_error("ingest: cannot open " + path);
  DatasetManifest m;
  m.base_dir = fs::path(path).parent_path().string();
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      if (lineno == 1) throw data_error("ingest: bad header in " + path + ": " + e.what());
      m.diagnostics.push_back(path + ":" + std::to_string(lineno) + ": unparseable record: " + e.what());
      continue;
    }
    if (lineno == 1) {
      if (!j.contains("classes")) throw data_error("ingest: first line of " + path + " must be the header record");
      m.class_names = j.at("classes").get<std::vector<std::string>>();
      m.rng_seed = j.value("rng_seed", 0ULL);
      continue;
    }
    try {
      ManifestImage img;
      img.id = j.at("id").get<std::string>();
      img.image_path = j.at("image_path").get<std::string>();
      img.width = j.at("width").get<int>();
      img.height = j.at("height").get<int>();
      for (const auto& jo : j.at("objects")) img.objects.push_back(parse_object(jo, m, img.height, img.width));
      m.images.push_back(std::move(img));
    } catch (const std::exception& e) {
      m.diagnostics.push_back(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

// Just enough XML scanning for VOC-style annotation files.
std::string xml_tag(const std::string& text, const std::string& tag, std::size_t from = 0) {
  const std::string open = "<" + tag + ">";
  const std::string close = "</" + tag + ">";
  const auto a = text.find(open, from);
  if (a == std::string::npos) return "";
  const auto b = text.find(close, a);
  if (b == std::string::npos) return "";
  return text.substr(a + open.size(), b - a - open.size());
}

DatasetManifest ingest_voc_dir(const std::string& dir, const std::vector<std::string>& class_names) {
  if (class_names.empty()) throw config_error("ingest: VOC ingestion requires a class-name table");
  DatasetManifest m;
  m.class_names = class_names;
  m.base_dir = dir;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".xml") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& file : files) {
    std::ifstream is(file);
    std::stringstream ss;
    ss << is.rdbuf();
    const std::string text = ss.str();
    ManifestImage img;
    img.id = file.stem().string();
    img.image_path = xml_tag(text, "filename");
    img.width = std::atoi(xml_tag(xml_tag(text, "size"), "width").c_str());
    img.height = std::atoi(xml_tag(xml_tag(text, "size"), "height").c_str());
    std::size_t pos = 0;
    while (true) {
      const auto a = text.find("<object>", pos);
      if (a == std::string::npos) break;
      const auto b = text.find("</object>", a);
      if (b == std::string::npos) break;
      const std::string body = text.substr(a, b - a);
      pos = b + 9;
      try {
        json jo;
        jo["class"] = xml_tag(body, "name");
        const std::string bnd = xml_tag(body, "bndbox");
        // VOC boxes are 1-based inclusive; convert to 0-based exclusive.
        jo["bbox"] = {std::atof(xml_tag(bnd, "xmin").c_str()) - 1.0,
                      std::atof(xml_tag(bnd, "ymin").c_str()) - 1.0,
                      std::atof(xml_tag(bnd, "xmax").c_str()),
                      std::atof(xml_tag(bnd, "ymax").c_str())};
        img.objects.push_back(parse_object(jo, m, img.height, img.width));
      } catch (const std::exception& e) {
        m.diagnostics.push_back(file.string() + ": " + e.what());
      }
    }
    m.images.push_back(std::move(img));
  }
  return m;
}

}  // namespace

DatasetManifest ingest_annotations(const std::string& path, AnnotationFormat format,
                                   const std::vector<std::string>& class_names_for_voc) {
  if (format == AnnotationFormat::native_jsonl) return ingest_native_jsonl(path);
  return ingest_voc_dir(path, class_names_for_voc);
}

void write_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw data_error("write_manifest: cannot open " + path);
  json header;
  header["classes"] = manifest.class_names;
  header["rng_seed"] = manifest.rng_seed;
  os << header.dump() << "\n";
  for (const auto& img : manifest.images) {
    json j;
    j["id"] = img.id;
    j["image_path"] = img.image_path;
    j["width"] = img.width;
    j["height"] = img.height;
    j["objects"] = json::array();
    for (const auto& o : img.objects) {
      json jo;
      jo["class"] = manifest.class_names[static_cast<std::size_t>(o.class_id)];
      jo["bbox"] = {o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2};
      jo["mask_rle"] = {{"size", {img.height, img.width}}, {"counts", o.mask_rle}};
      j["objects"].push_back(jo);
    }
    os << j.dump() << "\n";
  }
}

ImageSample load_sample(const DatasetManifest& manifest, int index) {
  const auto& rec = manifest.images[static_cast<std::size_t>(index)];
  ImageSample s;
  s.id = rec.id;
  s.image = read_png((fs::path(manifest.base_dir) / rec.image_path).string());
  for (const auto& o : rec.objects) {
    ObjectAnnotation ann;
    ann.class_id = o.class_id;
    ann.bbox = o.bbox;
    ann.mask = rle_decode(o.mask_rle, rec.height, rec.width);
    s.annotations.push_back(std::move(ann));
  }
  return s;
}

void write_registry(const FewShotRegistry& reg, const DatasetManifest& manifest,
                    const std::string& path) {
  json j;
  j["k"] = reg.k;
  j["phase"] = reg.phase;
  j["seed"] = reg.seed;
  j["allow_base_novel_mix"] = reg.allow_base_novel_mix;
  json shots = json::object();
  for (const auto& [cls, refs] : reg.shots) {
    json arr = json::array();
    for (const auto& r : refs) arr.push_back({r.image_id, r.ann_index});
    shots[manifest.class_names[static_cast<std::size_t>(cls)]] = arr;
  }
  j["shots"] = shots;
  std::ofstream os(path);
  if (!os) throw data_error("write_registry: cannot open " + path);
  os << j.dump(2) << "\n";
}

FewShotRegistry read_registry(const std::string& path, const DatasetManifest& manifest) {
  std::ifstream is(path);
  if (!is) throw data_error("read_registry: cannot open " + path);
  json j = json::parse(is);
  FewShotRegistry reg;
  reg.k = j.at("k").get<int>();
  reg.phase = j.at("phase").get<int>();
  reg.seed = j.at("seed").get<std::uint64_t>();
  reg.allow_base_novel_mix = j.value("allow_base_novel_mix", true);
  for (const auto& [name, arr] : j.at("shots").items()) {
    const int cls = manifest.class_id(name);
    if (cls < 0) throw data_error("read_registry: unknown class " + name);
    for (const auto& e : arr) reg.shots[cls].push_back({e.at(0).get<std::string>(), e.at(1).get<int>()});
  }
  return reg;
}

void write_split(const ClassSplit& split, const DatasetManifest& manifest, const std::string& path) {
  json j;
  j["split_id"] = split.split_id;
  auto names = [&](const std::vector<int>& ids) {
    json arr = json::array();
    for (int c : ids) arr.push_back(manifest.class_names[static_cast<std::size_t>(c)]);
    return arr;
  };
  j["base_classes"] = names(split.base_classes);
  j["novel_classes"] = names(split.novel_classes);
  std::ofstream os(path);
  if (!os) throw data_error("write_split: cannot open " + path);
  os << j.dump(2) << "\n";
}

ClassSplit read_split(const std::string& path, const DatasetManifest& manifest) {
  std::ifstream is(path);
  if (!is) throw data_error("read_split: cannot open " + path);
  json j = json::parse(is);
  ClassSplit split;
  split.split_id = j.at("split_id").get<int>();
  for (const auto& n : j.at("base_classes"))
    split.base_classes.push_back(manifest.class_id(n.get<std::string>()));
  for (const auto& n : j.at("novel_classes"))
    split.novel_classes.push_back(manifest.class_id(n.get<std::string>()));
  for (int c : split.base_classes)
    if (c < 0) throw data_error("read_split: unknown base class in " + path);
  for (int c : split.novel_classes)
    if (c < 0) throw data_error("read_split: unknown novel class in " + path);
  return split;
}

}  // namespace fewdet
