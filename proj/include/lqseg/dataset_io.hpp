#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lqseg/synthdata.hpp"
#include "lqseg/tensor.hpp"

namespace lqseg {

using Scene = std::pair<Tensor, SceneAnnotation>;

// Container layout (all integers little-endian):
//   [u64 index_len][index JSON][blobs]
// The index is {version, image_size, k_cls, k_attr, scenes: [{id, class_ids,
// attributes, layer_order}]}. Blobs follow in index order: per scene the
// image as f32 C*H*W row-major, then one packed-bit mask per instance
// (row-major, LSB-first within each byte, ceil(H*W/8) bytes).
void serialize_dataset(const std::vector<Scene>& scenes, const std::string& path);

std::vector<Scene> load_dataset(const std::string& path,
                                int expected_k_cls = kNumClasses,
                                int expected_k_attr = kNumAttributes);

}  // namespace lqseg
