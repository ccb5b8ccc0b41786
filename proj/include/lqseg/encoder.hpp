#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lqseg/tensor.hpp"

namespace lqseg {

// Four per-scale maps F_1..F_4 (strides 4, 8, 16, 32, d channels each) plus
// the fused stride-4 map F_f.
struct FeaturePyramid {
  std::array<Tensor, 4> levels;
  Tensor fused;
};

// Learned content queries plus fixed positional embeddings; combined is
// content + positional.
struct QuerySet {
  Tensor content;
  Tensor positional;
  Tensor combined;
};

struct ConvLayer {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  int stride = 1;
  int padding = 0;
};

struct EncoderParams {
  int d = 64;
  int n_q = 20;
  // stem + four stride-2 stages; the two high-resolution stages carry an
  // extra unit-stride conv each (mask sharpness lives at stride 4)
  ConvLayer conv0, conv1, conv1b, conv2, conv2b, conv3, conv4, conv5;
  // lateral 1x1 projections to d channels, one per pyramid level
  std::array<ConvLayer, 4> lateral;
  // 1x1 projection of the channel-concatenated levels back to d
  ConvLayer fuse;
  Tensor query_content;  // [n_q, d]
};

EncoderParams init_encoder(int d, int n_q, Rng& rng);
void collect_encoder_params(EncoderParams& p,
                            std::vector<std::pair<std::string, Tensor>>& out);

// Backbone + FPN top-down pathway. Contract: H and W divisible by 32.
std::array<Tensor, 4> extract_pyramid(const Tensor& image, const EncoderParams& p);

// Resize every level to stride-4 size, concatenate along channels, project
// back to d channels with the learned 1x1 conv.
Tensor fuse_features(const std::array<Tensor, 4>& levels, const EncoderParams& p);

// Content queries are data-independent learned parameters; F_f fixes d.
QuerySet make_queries(const Tensor& fused, const EncoderParams& p);

// Sinusoidal encoding over the query index; d must be even.
Tensor positional_encoding(int n_q, int d);

// Full encoder pass.
struct EncoderOutput {
  FeaturePyramid pyramid;
  QuerySet queries;
};
EncoderOutput encode(const Tensor& image, const EncoderParams& p);

}  // namespace lqseg
