#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "fewdet/dataset.hpp"
#include "fewdet/png.hpp"
#include "fewdet/rng.hpp"

using namespace fewdet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("fewdet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void check_sample_invariants(const ImageSample& s, int h, int w, int n_classes) {
  REQUIRE(!s.annotations.empty());
  for (const auto& ann : s.annotations) {
    CHECK(ann.class_id >= 0);
    CHECK(ann.class_id < n_classes);
    CHECK(ann.bbox.x1 < ann.bbox.x2);
    CHECK(ann.bbox.y1 < ann.bbox.y2);
    CHECK(ann.bbox.x1 >= 0);
    CHECK(ann.bbox.y1 >= 0);
    CHECK(ann.bbox.x2 <= static_cast<float>(w));
    CHECK(ann.bbox.y2 <= static_cast<float>(h));
    CHECK(ann.mask.count() >= 1);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (ann.mask.at(y, x)) {
          CHECK(static_cast<float>(x) >= ann.bbox.x1);
          CHECK(static_cast<float>(x) < ann.bbox.x2);
          CHECK(static_cast<float>(y) >= ann.bbox.y1);
          CHECK(static_cast<float>(y) < ann.bbox.y2);
        }
  }
}

}  // namespace

TEST_CASE("single circle scene satisfies annotation invariants") {
  SceneConfig cfg;
  cfg.canvas_h = cfg.canvas_w = 64;
  cfg.max_size = 40;
  auto s = generate_scene(1, {0}, cfg, 7);  // class 0 = circle_solid
  CHECK(s.annotations.size() == 1);
  check_sample_invariants(s, 64, 64, 12);
}

TEST_CASE("scene generation is deterministic per seed") {
  SceneConfig cfg;
  auto a = generate_scene(3, {0, 1, 2, 3}, cfg, 99);
  auto b = generate_scene(3, {0, 1, 2, 3}, cfg, 99);
  CHECK(a.image.data == b.image.data);
  REQUIRE(a.annotations.size() == b.annotations.size());
  for (std::size_t i = 0; i < a.annotations.size(); ++i) {
    CHECK(a.annotations[i].class_id == b.annotations[i].class_id);
    CHECK(a.annotations[i].bbox.x1 == b.annotations[i].bbox.x1);
    CHECK(a.annotations[i].mask.data == b.annotations[i].mask.data);
  }
  auto c = generate_scene(3, {0, 1, 2, 3}, cfg, 100);
  CHECK(a.image.data != c.image.data);
}

TEST_CASE("four-object scene respects the pairwise overlap cap") {
  SceneConfig cfg;
  std::vector<int> pool;
  for (int i = 0; i < 12; ++i) pool.push_back(i);
  auto s = generate_scene(4, pool, cfg, 3);
  REQUIRE(s.annotations.size() == 4);
  // Brute-force pairwise IoU over the placed boxes. Boxes are tightened to
  // visible pixels after occlusion, which can only shrink them.
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j)
      CHECK(iou(s.annotations[i].bbox, s.annotations[j].bbox) <= cfg.max_overlap_iou + 1e-6);
  check_sample_invariants(s, cfg.canvas_h, cfg.canvas_w, 12);
}

TEST_CASE("generate_scene error paths") {
  SceneConfig tiny;
  tiny.canvas_h = tiny.canvas_w = 16;
  CHECK_THROWS_AS(generate_scene(1, {0}, tiny, 1), placement_error);
  SceneConfig cfg;
  CHECK_THROWS_AS(generate_scene(0, {0}, cfg, 1), config_error);
  CHECK_THROWS_AS(generate_scene(1, {}, cfg, 1), config_error);
  // Too many objects for the canvas eventually exhausts retries.
  SceneConfig crowded;
  crowded.canvas_h = crowded.canvas_w = 48;
  crowded.min_size = 30;
  crowded.max_size = 40;
  CHECK_THROWS_AS(generate_scene(8, {0}, crowded, 5), placement_error);
}

TEST_CASE("make_split reproduces the VOC novel splits") {
  auto voc = voc_class_names();
  auto split = make_split(voc, voc_novel_split(1), 1);
  std::vector<std::string> got;
  for (int c : split.novel_classes) got.push_back(voc[static_cast<std::size_t>(c)]);
  CHECK(got == std::vector<std::string>{"bird", "bus", "cow", "motorbike", "sofa"});
  CHECK(split.base_classes.size() == 15);
}

TEST_CASE("make_split partitions an 80-class universe") {
  std::vector<std::string> coco;
  for (int i = 0; i < 60; ++i) coco.push_back("extra_" + std::to_string(i));
  auto voc = voc_class_names();
  coco.insert(coco.end(), voc.begin(), voc.end());
  auto split = make_split(coco, voc);
  CHECK(split.base_classes.size() == 60);
  CHECK(split.novel_classes.size() == 20);
}

TEST_CASE("make_split on the synthetic universe: novel = last 4") {
  auto names = default_class_names();
  REQUIRE(names.size() == 12);
  std::vector<std::string> novel(names.end() - 4, names.end());
  auto split = make_split(names, novel);
  CHECK(split.base_classes.size() == 8);
  CHECK(split.novel_classes.size() == 4);
  for (int b : split.base_classes)
    CHECK_FALSE(split.is_novel(b));

  CHECK_THROWS_AS(make_split(names, {"not_a_class"}), config_error);
}

TEST_CASE("dataset build, k-shot registries, and manifest round-trip") {
  auto dir = temp_dir("datagen");
  DataGenConfig cfg;
  cfg.num_images = 40;
  cfg.seed = 11;
  cfg.scene.canvas_h = cfg.scene.canvas_w = 96;
  cfg.min_objects = 1;
  cfg.max_objects = 4;
  auto manifest = build_dataset(cfg, dir.string());
  CHECK(manifest.images.size() == 40);

  auto names = manifest.class_names;
  auto split = make_split(names, {names[8], names[9], names[10], names[11]});

  SUBCASE("phase-2 counts follow the K novel / 3K base rule") {
    auto reg = sample_kshot(manifest, split, 3, 2, 5);
    for (int c : split.novel_classes) CHECK(reg.shots.at(c).size() == 3);
    for (int c : split.base_classes) CHECK(reg.shots.at(c).size() <= 9);
    // With 40 images and ~2.5 objects each there is usually enough for 3K,
    // but the rule is "3K or all available"; verify at least K.
    for (int c : split.base_classes) CHECK(reg.shots.at(c).size() >= 1);
    auto reg1 = sample_kshot(manifest, split, 1, 2, 5);
    for (int c : split.novel_classes) CHECK(reg1.shots.at(c).size() == 1);
  }

  SUBCASE("registry sampling is deterministic and without replacement") {
    auto a = sample_kshot(manifest, split, 3, 2, 42);
    auto b = sample_kshot(manifest, split, 3, 2, 42);
    for (const auto& [cls, refs] : a.shots) {
      REQUIRE(b.shots.at(cls).size() == refs.size());
      for (std::size_t i = 0; i < refs.size(); ++i) {
        CHECK(b.shots.at(cls)[i].image_id == refs[i].image_id);
        CHECK(b.shots.at(cls)[i].ann_index == refs[i].ann_index);
      }
      for (std::size_t i = 0; i < refs.size(); ++i)
        for (std::size_t j = i + 1; j < refs.size(); ++j)
          CHECK((refs[i].image_id != refs[j].image_id || refs[i].ann_index != refs[j].ann_index));
    }
    auto c = sample_kshot(manifest, split, 3, 2, 43);
    bool any_diff = false;
    for (const auto& [cls, refs] : a.shots) {
      const auto& other = c.shots.at(cls);
      for (std::size_t i = 0; i < refs.size(); ++i)
        if (refs[i].image_id != other[i].image_id || refs[i].ann_index != other[i].ann_index)
          any_diff = true;
    }
    CHECK(any_diff);
  }

  SUBCASE("phase-1 registry covers base classes only") {
    auto reg = sample_kshot(manifest, split, 3, 1, 5);
    for (int c : split.novel_classes) CHECK(reg.shots.find(c) == reg.shots.end());
    for (int c : split.base_classes) CHECK(reg.shots.find(c) != reg.shots.end());
  }

  SUBCASE("manifest write/ingest round-trip is lossless") {
    const auto path = (dir / "roundtrip.jsonl").string();
    write_manifest(manifest, path);
    auto back = ingest_annotations(path, AnnotationFormat::native_jsonl);
    CHECK(back.class_names == manifest.class_names);
    REQUIRE(back.images.size() == manifest.images.size());
    for (std::size_t i = 0; i < back.images.size(); ++i) {
      CHECK(back.images[i].id == manifest.images[i].id);
      REQUIRE(back.images[i].objects.size() == manifest.images[i].objects.size());
      for (std::size_t j = 0; j < back.images[i].objects.size(); ++j) {
        CHECK(back.images[i].objects[j].class_id == manifest.images[i].objects[j].class_id);
        CHECK(back.images[i].objects[j].mask_rle == manifest.images[i].objects[j].mask_rle);
        CHECK(back.images[i].objects[j].bbox.x2 == manifest.images[i].objects[j].bbox.x2);
      }
    }
    CHECK(back.diagnostics.empty());
  }

  SUBCASE("loading a sample restores exact masks and a valid image") {
    auto s = load_sample(manifest, 0);
    check_sample_invariants(s, 96, 96, 12);
    CHECK(s.image.height == 96);
    CHECK(s.image.width == 96);
  }

  SUBCASE("registry and split files round-trip") {
    auto reg = sample_kshot(manifest, split, 2, 2, 9);
    const auto rpath = (dir / "registry.json").string();
    write_registry(reg, manifest, rpath);
    auto back = read_registry(rpath, manifest);
    CHECK(back.k == 2);
    CHECK(back.phase == 2);
    CHECK(back.allow_base_novel_mix == reg.allow_base_novel_mix);
    CHECK(back.shots.size() == reg.shots.size());

    const auto spath = (dir / "split.json").string();
    write_split(split, manifest, spath);
    auto split_back = read_split(spath, manifest);
    CHECK(split_back.base_classes == split.base_classes);
    CHECK(split_back.novel_classes == split.novel_classes);
  }

  SUBCASE("rerunning the build with the same seed is bit-identical") {
    auto dir2 = temp_dir("datagen2");
    auto m2 = build_dataset(cfg, dir2.string());
    REQUIRE(m2.images.size() == manifest.images.size());
    for (std::size_t i = 0; i < m2.images.size(); ++i) {
      CHECK(m2.images[i].objects.size() == manifest.images[i].objects.size());
      std::ifstream f1(dir / manifest.images[i].image_path, std::ios::binary);
      std::ifstream f2(dir2 / m2.images[i].image_path, std::ios::binary);
      std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
      std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
      CHECK(b1 == b2);
    }
  }
}

TEST_CASE("malformed manifest records are rejected with diagnostics") {
  auto dir = temp_dir("badrecords");
  const auto path = (dir / "bad.jsonl").string();
  {
    std::ofstream os(path);
    os << R"({"classes":["circle_solid","square_solid"],"rng_seed":0})" << "\n";
    os << R"({"id":"a","image_path":"a.png","width":64,"height":64,"objects":[{"class":"circle_solid","bbox":[10,10,50,60]}]})" << "\n";
    os << R"({"id":"b","image_path":"b.png","width":64,"height":64,"objects":[{"class":"circle_solid","bbox":[50,10,10,60]}]})" << "\n";
    os << R"({"id":"c","image_path":"c.png","width":64,"height":64,"objects":[{"class":"hexagon","bbox":[10,10,20,20]}]})" << "\n";
  }
  auto m = ingest_annotations(path, AnnotationFormat::native_jsonl);
  CHECK(m.images.size() == 1);  // only record "a" survives
  REQUIRE(m.diagnostics.size() == 2);
  CHECK(m.diagnostics[0].find("degenerate box") != std::string::npos);
  CHECK(m.diagnostics[1].find("hexagon") != std::string::npos);
  CHECK(m.diagnostics[1].find("circle_solid") != std::string::npos);  // lists known classes
}

TEST_CASE("voc xml ingestion resolves classes via the name table") {
  auto dir = temp_dir("voc");
  {
    std::ofstream os(dir / "img1.xml");
    os << "<annotation><filename>img1.jpg</filename>"
          "<size><width>100</width><height>90</height></size>"
          "<object><name>bus</name><bndbox><xmin>11</xmin><ymin>11</ymin><xmax>50</xmax><ymax>80</ymax></bndbox></object>"
          "</annotation>";
  }
  auto m = ingest_annotations(dir.string(), AnnotationFormat::voc_xml_dir, voc_class_names());
  REQUIRE(m.images.size() == 1);
  REQUIRE(m.images[0].objects.size() == 1);
  const auto& o = m.images[0].objects[0];
  CHECK(m.class_names[static_cast<std::size_t>(o.class_id)] == "bus");
  CHECK(o.bbox.x1 == doctest::Approx(10));
  CHECK(o.bbox.y1 == doctest::Approx(10));
  CHECK(o.bbox.x2 == doctest::Approx(50));
  CHECK(o.bbox.y2 == doctest::Approx(80));
  // Missing mask -> rectangle mask filling the box.
  auto mask = rle_decode(o.mask_rle, 90, 100);
  CHECK(mask.count() == 40 * 70);
}

TEST_CASE("png round-trip preserves 8-bit pixels") {
  auto dir = temp_dir("png");
  Rng rng(4);
  Image img(3, 37, 53);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  const auto path = (dir / "t.png").string();
  write_png(path, img);
  auto back = read_png(path);
  REQUIRE(back.height == 37);
  REQUIRE(back.width == 53);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const float q = std::round(std::min(std::max(img.data[i], 0.0f), 1.0f) * 255.0f) / 255.0f;
    CHECK(back.data[i] == doctest::Approx(q).epsilon(1e-6));
  }
}

TEST_CASE("rle round-trip") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    BitMask m(rng.uniform_int(1, 20), rng.uniform_int(1, 20));
    for (auto& v : m.data) v = rng.uniform() < 0.4 ? 1 : 0;
    auto counts = rle_encode(m);
    auto back = rle_decode(counts, m.height, m.width);
    CHECK(back.data == m.data);
  }
}
