#include "lqseg/encoder.hpp"

#include <cmath>

#include "lqseg/errors.hpp"

namespace lqseg {

namespace {

ConvLayer make_conv(int out_ch, int in_ch, int k, int stride, int padding, Rng& rng) {
  ConvLayer c;
  c.weight = kaiming_uniform({out_ch, in_ch, k, k}, in_ch * k * k, rng);
  c.weight.set_requires_grad(true);
  c.bias = Tensor::zeros({out_ch}, true);
  c.stride = stride;
  c.padding = padding;
  return c;
}

Tensor apply_conv(const Tensor& x, const ConvLayer& c) {
  return add_chanvec(conv2d(x, c.weight, c.stride, c.padding), c.bias);
}

}  // namespace

EncoderParams init_encoder(int d, int n_q, Rng& rng) {
  if (d % 4 != 0 || d < 8) throw ContractError("init_encoder: d must be a multiple of 4, >= 8");
  EncoderParams p;
  p.d = d;
  p.n_q = n_q;
  const int w0 = d / 4, w1 = d / 2, w2 = d / 2, w3 = 3 * d / 4, w4 = d, w5 = d;
  p.conv0 = make_conv(w0, 3, 3, 1, 1, rng);
  p.conv1 = make_conv(w1, w0, 3, 2, 1, rng);
  p.conv1b = make_conv(w1, w1, 3, 1, 1, rng);
  p.conv2 = make_conv(w2, w1, 3, 2, 1, rng);
  p.conv2b = make_conv(w2, w2, 3, 1, 1, rng);
  p.conv3 = make_conv(w3, w2, 3, 2, 1, rng);
  p.conv4 = make_conv(w4, w3, 3, 2, 1, rng);
  p.conv5 = make_conv(w5, w4, 3, 2, 1, rng);
  const int widths[4] = {w2, w3, w4, w5};
  for (int i = 0; i < 4; ++i) p.lateral[static_cast<std::size_t>(i)] = make_conv(d, widths[i], 1, 1, 0, rng);
  p.fuse = make_conv(d, 4 * d, 1, 1, 0, rng);
  p.query_content = normal_init({n_q, d}, 0.02, rng);
  p.query_content.set_requires_grad(true);
  return p;
}

void collect_encoder_params(EncoderParams& p,
                            std::vector<std::pair<std::string, Tensor>>& out) {
  auto conv = [&](const std::string& name, ConvLayer& c) {
    out.emplace_back("encoder." + name + ".w", c.weight);
    out.emplace_back("encoder." + name + ".b", c.bias);
  };
  conv("conv0", p.conv0);
  conv("conv1", p.conv1);
  conv("conv1b", p.conv1b);
  conv("conv2", p.conv2);
  conv("conv2b", p.conv2b);
  conv("conv3", p.conv3);
  conv("conv4", p.conv4);
  conv("conv5", p.conv5);
  for (int i = 0; i < 4; ++i)
    conv("lateral" + std::to_string(i + 1), p.lateral[static_cast<std::size_t>(i)]);
  conv("fuse", p.fuse);
  out.emplace_back("encoder.query_content", p.query_content);
}

std::array<Tensor, 4> extract_pyramid(const Tensor& image, const EncoderParams& p) {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw ShapeError("extract_pyramid: expected [3,H,W] image, got " +
                     shape_str(image.shape()));
  const int h = image.dim(1), w = image.dim(2);
  if (h % 32 != 0 || w % 32 != 0)
    throw ContractError("extract_pyramid: image size " + std::to_string(h) + "x" +
                        std::to_string(w) + " not divisible by 32; pad the input");

  Tensor s0 = relu(apply_conv(image, p.conv0));   // H
  Tensor s1 = relu(apply_conv(s0, p.conv1));      // H/2
  s1 = relu(apply_conv(s1, p.conv1b));
  Tensor c1 = relu(apply_conv(s1, p.conv2));      // H/4
  c1 = relu(apply_conv(c1, p.conv2b));
  Tensor c2 = relu(apply_conv(c1, p.conv3));      // H/8
  Tensor c3 = relu(apply_conv(c2, p.conv4));     // H/16
  Tensor c4 = relu(apply_conv(c3, p.conv5));     // H/32

  // top-down pathway
  Tensor p4 = apply_conv(c4, p.lateral[3]);
  Tensor p3 = add(apply_conv(c3, p.lateral[2]), resize_bilinear(p4, c3.dim(1), c3.dim(2)));
  Tensor p2 = add(apply_conv(c2, p.lateral[1]), resize_bilinear(p3, c2.dim(1), c2.dim(2)));
  Tensor p1 = add(apply_conv(c1, p.lateral[0]), resize_bilinear(p2, c1.dim(1), c1.dim(2)));
  return {p1, p2, p3, p4};
}

Tensor fuse_features(const std::array<Tensor, 4>& levels, const EncoderParams& p) {
  const int h = levels[0].dim(1), w = levels[0].dim(2);
  std::vector<Tensor> aligned;
  aligned.reserve(4);
  for (const Tensor& lvl : levels) {
    if (lvl.dim(0) != p.d)
      throw ShapeError("fuse_features: level has " + std::to_string(lvl.dim(0)) +
                       " channels, expected " + std::to_string(p.d));
    aligned.push_back(lvl.dim(1) == h && lvl.dim(2) == w ? lvl
                                                         : resize_bilinear(lvl, h, w));
  }
  return apply_conv(concat(aligned, 0), p.fuse);
}

Tensor positional_encoding(int n_q, int d) {
  if (d % 2 != 0) throw ContractError("positional_encoding: d must be even, got " +
                                      std::to_string(d));
  std::vector<double> pe(static_cast<std::size_t>(n_q) * d);
  for (int q = 0; q < n_q; ++q)
    for (int t = 0; t < d / 2; ++t) {
      const double angle = q / std::pow(10000.0, (2.0 * t) / d);
      pe[static_cast<std::size_t>(q) * d + 2 * t] = std::sin(angle);
      pe[static_cast<std::size_t>(q) * d + 2 * t + 1] = std::cos(angle);
    }
  return Tensor::from_data({n_q, d}, std::move(pe));
}

QuerySet make_queries(const Tensor& fused, const EncoderParams& p) {
  if (fused.ndim() != 3 || fused.dim(0) != p.d)
    throw ShapeError("make_queries: fused map " + shape_str(fused.shape()) +
                     " does not carry d=" + std::to_string(p.d) + " channels");
  QuerySet q;
  q.content = p.query_content;
  q.positional = positional_encoding(p.n_q, p.d);
  q.combined = add(q.content, q.positional);
  return q;
}

EncoderOutput encode(const Tensor& image, const EncoderParams& p) {
  EncoderOutput out;
  out.pyramid.levels = extract_pyramid(image, p);
  out.pyramid.fused = fuse_features(out.pyramid.levels, p);
  out.queries = make_queries(out.pyramid.fused, p);
  return out;
}

}  // namespace lqseg
