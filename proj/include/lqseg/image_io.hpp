#pragma once

#include <string>

#include "lqseg/tensor.hpp"

namespace lqseg {

// Binary PPM (P6, 8-bit) <-> [3 x H x W] tensor in [0, 1].
Tensor read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Tensor& image);

// 8-bit grayscale PNG; `pixels` is row-major H*W.
void write_png_gray(const std::string& path, const std::vector<std::uint8_t>& pixels,
                    int width, int height);

}  // namespace lqseg
