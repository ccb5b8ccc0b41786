#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "lqseg/rng.hpp"
#include "lqseg/tensor.hpp"

namespace lqseg {

// Fixed label vocabulary of the synthetic layered-shapes world.
inline constexpr int kNumClasses = 4;    // ellipse, rectangle, triangle, ring
inline constexpr int kNumAttributes = 9; // 3 pattern + 2 border + 4 hue

// Attribute slot layout inside the multi-hot vector.
enum AttributeSlot : int {
  kAttrSolid = 0,
  kAttrStriped = 1,
  kAttrDotted = 2,
  kAttrBorderPresent = 3,
  kAttrBorderAbsent = 4,
  kAttrHue0 = 5,  // hue buckets occupy slots 5..8
};

struct SceneSpec {
  int image_size = 128;       // square, >= 32
  int num_instances = 4;      // in [1, 8]
  double scale_mix = 0.5;     // fraction forced below 10% image area
  std::uint64_t seed = 0;
};

struct InstanceAnnotation {
  int class_id = 0;
  std::vector<std::uint8_t> mask;        // visible region, H*W, row-major 0/1
  std::vector<std::uint8_t> attributes;  // multi-hot, length kNumAttributes
  int layer_order = 0;                   // higher occludes lower
};

struct SceneAnnotation {
  int height = 0;
  int width = 0;
  std::vector<InstanceAnnotation> instances;
};

// Image is a [3 x H x W] tensor with values in [0, 1].
std::pair<Tensor, SceneAnnotation> generate_scene(const SceneSpec& spec);

// Fills a [3 x h x w] pixel buffer with the background texture (low-amplitude
// noise around mid-gray). Exposed so augmentation padding matches generation.
void fill_background(double* pixels, int h, int w, Rng& rng);

// Nearest-neighbor resample of a binary mask.
std::vector<std::uint8_t> resize_mask_nearest(const std::vector<std::uint8_t>& mask,
                                              int h, int w, int out_h, int out_w);

}  // namespace lqseg
