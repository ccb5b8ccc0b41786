#include "lqseg/dataset_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "lqseg/errors.hpp"

namespace lqseg {

namespace {

using nlohmann::json;

void put_u64le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f32le(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

std::size_t mask_bytes(int h, int w) {
  return (static_cast<std::size_t>(h) * w + 7) / 8;
}

}  // namespace

void serialize_dataset(const std::vector<Scene>& scenes, const std::string& path) {
  json index;
  index["version"] = 1;
  index["image_size"] = scenes.empty() ? 0 : scenes[0].second.height;
  index["k_cls"] = kNumClasses;
  index["k_attr"] = kNumAttributes;
  index["scenes"] = json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const SceneAnnotation& ann = scenes[i].second;
    json s;
    s["id"] = i;
    json cls = json::array(), attrs = json::array(), layers = json::array();
    for (const InstanceAnnotation& inst : ann.instances) {
      cls.push_back(inst.class_id);
      attrs.push_back(inst.attributes);
      layers.push_back(inst.layer_order);
    }
    s["class_ids"] = std::move(cls);
    s["attributes"] = std::move(attrs);
    s["layer_order"] = std::move(layers);
    index["scenes"].push_back(std::move(s));
  }

  std::string out;
  const std::string index_str = index.dump();
  put_u64le(out, index_str.size());
  out += index_str;

  for (const Scene& scene : scenes) {
    const Tensor& img = scene.first;
    for (std::int64_t i = 0; i < img.numel(); ++i)
      put_f32le(out, static_cast<float>(img.data()[i]));
    const SceneAnnotation& ann = scene.second;
    const std::size_t nbytes = mask_bytes(ann.height, ann.width);
    for (const InstanceAnnotation& inst : ann.instances) {
      std::string packed(nbytes, '\0');
      for (std::size_t p = 0; p < inst.mask.size(); ++p)
        if (inst.mask[p]) packed[p / 8] |= static_cast<char>(1u << (p % 8));
      out += packed;
    }
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ContractError("serialize_dataset: cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ContractError("serialize_dataset: write failed for " + path);
}

std::vector<Scene> load_dataset(const std::string& path, int expected_k_cls,
                                int expected_k_attr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("load_dataset: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  const unsigned char* data = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t total = bytes.size();

  if (total < 8)
    throw ParseError("load_dataset: truncated header in " + path, static_cast<long long>(total));
  const std::uint64_t index_len = get_u64le(data);
  if (8 + index_len > total)
    throw ParseError("load_dataset: truncated index in " + path, 8);

  json index;
  try {
    index = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(index_len));
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("load_dataset: malformed index JSON: ") + e.what(),
                     8 + static_cast<long long>(e.byte));
  }

  for (const char* key : {"version", "image_size", "k_cls", "k_attr", "scenes"})
    if (!index.contains(key))
      throw ParseError(std::string("load_dataset: index missing key '") + key + "'", 8);
  if (index["version"].get<int>() != 1)
    throw SchemaError("load_dataset: unsupported version " +
                      std::to_string(index["version"].get<int>()));
  if (index["k_cls"].get<int>() != expected_k_cls)
    throw SchemaError("load_dataset: k_cls mismatch: file has " +
                      std::to_string(index["k_cls"].get<int>()) + ", expected " +
                      std::to_string(expected_k_cls));
  if (index["k_attr"].get<int>() != expected_k_attr)
    throw SchemaError("load_dataset: k_attr mismatch: file has " +
                      std::to_string(index["k_attr"].get<int>()) + ", expected " +
                      std::to_string(expected_k_attr));

  const int size = index["image_size"].get<int>();
  const std::size_t hw = static_cast<std::size_t>(size) * size;
  const std::size_t img_bytes = 3 * hw * 4;
  const std::size_t per_mask = mask_bytes(size, size);

  std::vector<Scene> scenes;
  std::size_t off = 8 + index_len;
  for (const json& s : index["scenes"]) {
    const auto& cls = s["class_ids"];
    const auto& attrs = s["attributes"];
    const auto& layers = s["layer_order"];
    if (cls.size() != attrs.size() || cls.size() != layers.size())
      throw ParseError("load_dataset: inconsistent per-instance arrays in scene " +
                       s["id"].dump(), 8);

    if (off + img_bytes > total)
      throw ParseError("load_dataset: truncated image blob", static_cast<long long>(off));
    std::vector<double> pixels(3 * hw);
    for (std::size_t i = 0; i < 3 * hw; ++i)
      pixels[i] = static_cast<double>(get_f32le(data + off + i * 4));
    off += img_bytes;

    SceneAnnotation ann;
    ann.height = size;
    ann.width = size;
    for (std::size_t k = 0; k < cls.size(); ++k) {
      if (off + per_mask > total)
        throw ParseError("load_dataset: truncated mask blob", static_cast<long long>(off));
      InstanceAnnotation inst;
      inst.class_id = cls[k].get<int>();
      inst.layer_order = layers[k].get<int>();
      inst.attributes = attrs[k].get<std::vector<std::uint8_t>>();
      if (static_cast<int>(inst.attributes.size()) != expected_k_attr)
        throw SchemaError("load_dataset: attribute vector length mismatch in scene " +
                          s["id"].dump());
      for (const std::uint8_t v : inst.attributes)
        if (v > 1) throw ParseError("load_dataset: non-binary attribute value", 8);
      inst.mask.assign(hw, 0);
      for (std::size_t p = 0; p < hw; ++p)
        inst.mask[p] = (data[off + p / 8] >> (p % 8)) & 1u;
      off += per_mask;
      ann.instances.push_back(std::move(inst));
    }
    scenes.emplace_back(Tensor::from_data({3, size, size}, std::move(pixels)),
                        std::move(ann));
  }
  if (off != total)
    throw ParseError("load_dataset: trailing bytes after last scene",
                     static_cast<long long>(off));
  return scenes;
}

}  // namespace lqseg
