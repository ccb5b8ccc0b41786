#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <set>

#include "lqseg/dataset_io.hpp"
#include "lqseg/synthdata.hpp"

using namespace lqseg;

namespace {

int area(const std::vector<std::uint8_t>& m) {
  int n = 0;
  for (auto v : m) n += v;
  return n;
}

std::string temp_path(const char* name) {
  return std::string("/tmp/lqseg_test_") + name;
}

}  // namespace

TEST_CASE("single instance has no occlusion and matches its raster") {
  SceneSpec spec{64, 1, 0.0, 42};
  auto [img, ann] = generate_scene(spec);
  REQUIRE(ann.instances.size() == 1);
  const auto& inst = ann.instances[0];
  CHECK(area(inst.mask) > 0);
  // Every mask pixel must carry non-background color structure: re-rendering
  // the same seed and comparing masks pixel-by-pixel is done in the
  // determinism case; here check mask/image consistency instead. Background
  // is noise around 0.5 while instances are crisp constants, so the set of
  // distinct colors inside the mask is small.
  std::set<std::uint64_t> colors;
  const std::size_t hw = 64 * 64;
  for (std::size_t p = 0; p < hw; ++p) {
    if (!inst.mask[p]) continue;
    const double r = img.data()[p], g = img.data()[hw + p], b = img.data()[2 * hw + p];
    colors.insert(static_cast<std::uint64_t>(r * 1e6) * 1000000000ull +
                  static_cast<std::uint64_t>(g * 1e6) * 1000ull +
                  static_cast<std::uint64_t>(b * 1e6));
  }
  CHECK(colors.size() <= 3);  // base, optional secondary, optional border
}

TEST_CASE("stacked instances: lower mask excludes the overlap") {
  // With several instances, any pixel claimed by a higher layer must be
  // absent from every lower layer's visible mask.
  SceneSpec spec{64, 4, 0.0, 7};
  auto [img, ann] = generate_scene(spec);
  (void)img;
  REQUIRE(ann.instances.size() == 4);
  for (std::size_t i = 0; i < ann.instances.size(); ++i)
    for (std::size_t j = i + 1; j < ann.instances.size(); ++j) {
      const auto& lower = ann.instances[i];
      const auto& upper = ann.instances[j];
      REQUIRE(lower.layer_order < upper.layer_order);
      for (std::size_t p = 0; p < lower.mask.size(); ++p)
        CHECK(!(lower.mask[p] && upper.mask[p]));
    }
}

TEST_CASE("same seed twice gives identical bytes") {
  SceneSpec spec{96, 5, 0.5, 1234};
  auto [img1, ann1] = generate_scene(spec);
  auto [img2, ann2] = generate_scene(spec);
  CHECK(img1.values() == img2.values());
  REQUIRE(ann1.instances.size() == ann2.instances.size());
  for (std::size_t i = 0; i < ann1.instances.size(); ++i) {
    CHECK(ann1.instances[i].mask == ann2.instances[i].mask);
    CHECK(ann1.instances[i].attributes == ann2.instances[i].attributes);
    CHECK(ann1.instances[i].class_id == ann2.instances[i].class_id);
  }
}

TEST_CASE("visible masks are pairwise disjoint") {
  for (std::uint64_t seed : {1ull, 9ull, 77ull}) {
    SceneSpec spec{64, 6, 0.4, seed};
    auto [img, ann] = generate_scene(spec);
    (void)img;
    std::vector<int> owner(64 * 64, -1);
    for (std::size_t i = 0; i < ann.instances.size(); ++i)
      for (std::size_t p = 0; p < ann.instances[i].mask.size(); ++p)
        if (ann.instances[i].mask[p]) {
          CHECK(owner[p] == -1);
          owner[p] = static_cast<int>(i);
        }
  }
}

TEST_CASE("every instance keeps at least one visible pixel") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SceneSpec spec{64, 8, 0.5, seed};
    auto [img, ann] = generate_scene(spec);
    (void)img;
    for (const auto& inst : ann.instances) CHECK(area(inst.mask) >= 1);
  }
}

TEST_CASE("scale_mix forces small instances by construction") {
  SceneSpec spec{128, 4, 0.5, 2024};
  auto [img, ann] = generate_scene(spec);
  (void)img;
  int small = 0;
  for (const auto& inst : ann.instances)
    if (area(inst.mask) < 0.10 * 128 * 128) ++small;
  CHECK(small >= 2);
}

TEST_CASE("attributes are a function of rendered appearance") {
  const std::size_t hw = 96 * 96;
  int striped_seen = 0, solid_seen = 0;
  for (std::uint64_t seed = 0; seed < 24; ++seed) {
    SceneSpec spec{96, 1, 0.0, seed};
    auto [img, ann] = generate_scene(spec);
    const auto& inst = ann.instances[0];
    // collect distinct colors on non-border pixels
    std::set<std::uint64_t> colors;
    for (std::size_t p = 0; p < hw; ++p) {
      if (!inst.mask[p]) continue;
      const double r = img.data()[p];
      const double g = img.data()[hw + p];
      const double b = img.data()[2 * hw + p];
      if (r < 0.1 && g < 0.1 && b < 0.1) continue;  // border pixels
      colors.insert(static_cast<std::uint64_t>(r * 1e6) * 1000000000ull +
                    static_cast<std::uint64_t>(g * 1e6) * 1000ull +
                    static_cast<std::uint64_t>(b * 1e6));
    }
    if (inst.attributes[kAttrStriped]) {
      ++striped_seen;
      CHECK(colors.size() >= 2);  // stripe pixels present
    }
    if (inst.attributes[kAttrSolid]) {
      ++solid_seen;
      CHECK(colors.size() == 1);
    }
  }
  CHECK(striped_seen > 0);
  CHECK(solid_seen > 0);
}

TEST_CASE("attribute vector has one hot per group") {
  SceneSpec spec{64, 8, 0.5, 5};
  auto [img, ann] = generate_scene(spec);
  (void)img;
  for (const auto& inst : ann.instances) {
    REQUIRE(inst.attributes.size() == kNumAttributes);
    int pattern = inst.attributes[0] + inst.attributes[1] + inst.attributes[2];
    int border = inst.attributes[3] + inst.attributes[4];
    int hue = inst.attributes[5] + inst.attributes[6] + inst.attributes[7] +
              inst.attributes[8];
    CHECK(pattern == 1);
    CHECK(border == 1);
    CHECK(hue == 1);
  }
}

TEST_CASE("dataset round trip is lossless") {
  std::vector<Scene> scenes;
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    scenes.push_back(generate_scene({64, 3, 0.5, seed}));
  const std::string path = temp_path("roundtrip.bin");
  serialize_dataset(scenes, path);
  auto loaded = load_dataset(path);
  REQUIRE(loaded.size() == scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    // image payload is f32, so compare after the same downcast
    REQUIRE(loaded[i].first.numel() == scenes[i].first.numel());
    for (std::int64_t p = 0; p < scenes[i].first.numel(); ++p)
      CHECK(loaded[i].first.data()[p] ==
            static_cast<double>(static_cast<float>(scenes[i].first.data()[p])));
    REQUIRE(loaded[i].second.instances.size() == scenes[i].second.instances.size());
    for (std::size_t k = 0; k < scenes[i].second.instances.size(); ++k) {
      CHECK(loaded[i].second.instances[k].mask == scenes[i].second.instances[k].mask);
      CHECK(loaded[i].second.instances[k].attributes ==
            scenes[i].second.instances[k].attributes);
      CHECK(loaded[i].second.instances[k].class_id ==
            scenes[i].second.instances[k].class_id);
      CHECK(loaded[i].second.instances[k].layer_order ==
            scenes[i].second.instances[k].layer_order);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("serialized bytes are deterministic") {
  auto write_once = [](const std::string& path) {
    std::vector<Scene> scenes;
    for (std::uint64_t seed = 0; seed < 3; ++seed)
      scenes.push_back(generate_scene({64, 2, 0.0, seed}));
    serialize_dataset(scenes, path);
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
  };
  const std::string p1 = temp_path("det1.bin"), p2 = temp_path("det2.bin");
  CHECK(write_once(p1) == write_once(p2));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("truncated file raises a parse error") {
  std::vector<Scene> scenes{generate_scene({64, 2, 0.0, 3})};
  const std::string path = temp_path("trunc.bin");
  serialize_dataset(scenes, path);
  std::ifstream f(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  f.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  out.close();
  CHECK_THROWS_AS(load_dataset(path), ParseError);
  try {
    load_dataset(path);
  } catch (const ParseError& e) {
    CHECK(e.offset() >= 0);
  }
  std::remove(path.c_str());
}

TEST_CASE("K_attr mismatch raises a schema error") {
  std::vector<Scene> scenes{generate_scene({64, 2, 0.0, 3})};
  const std::string path = temp_path("schema.bin");
  serialize_dataset(scenes, path);
  CHECK_THROWS_AS(load_dataset(path, kNumClasses, 12), SchemaError);
  std::remove(path.c_str());
}

TEST_CASE("image_size below 32 is rejected") {
  CHECK_THROWS_AS(generate_scene({16, 1, 0.0, 1}), ContractError);
}
