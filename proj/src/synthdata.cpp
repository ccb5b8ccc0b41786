#include "lqseg/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "lqseg/errors.hpp"

namespace lqseg {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kSmallAreaCap = 0.10;  // "small" instances stay below this fraction

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h_deg, double s, double v) {
  const double c = v * s;
  const double hp = h_deg / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1)      { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else             { r = c; b = x; }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

Rgb hue_bucket_color(int bucket) {
  static constexpr std::array<double, 4> hues = {0.0, 90.0, 180.0, 270.0};
  return hsv_to_rgb(hues[static_cast<std::size_t>(bucket)], 0.8, 0.85);
}

Rgb scale_color(const Rgb& c, double f) { return {c.r * f, c.g * f, c.b * f}; }

// Geometry of one instance before rasterization. Pixel (x, y) is tested at
// its center (x + 0.5, y + 0.5).
struct ShapeGeom {
  int class_id = 0;
  double cx = 0, cy = 0;
  double a = 0, b = 0;       // semi-axes / half-extents / radii
  double theta = 0;          // rotation (ellipse, triangle)
  double inner_ratio = 0.0;  // ring only
  std::array<double, 6> tri{};  // triangle vertices x0,y0,x1,y1,x2,y2
};

bool point_in_shape(const ShapeGeom& s, double px, double py) {
  switch (s.class_id) {
    case 0: {  // ellipse
      const double dx = px - s.cx, dy = py - s.cy;
      const double ct = std::cos(s.theta), st = std::sin(s.theta);
      const double u = dx * ct + dy * st;
      const double v = -dx * st + dy * ct;
      return (u * u) / (s.a * s.a) + (v * v) / (s.b * s.b) <= 1.0;
    }
    case 1:  // axis-aligned rectangle
      return std::abs(px - s.cx) <= s.a && std::abs(py - s.cy) <= s.b;
    case 2: {  // triangle, sign test against all edges
      const double x0 = s.tri[0], y0 = s.tri[1], x1 = s.tri[2], y1 = s.tri[3],
                   x2 = s.tri[4], y2 = s.tri[5];
      const double d0 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
      const double d1 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
      const double d2 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2);
      const bool has_neg = d0 < 0 || d1 < 0 || d2 < 0;
      const bool has_pos = d0 > 0 || d1 > 0 || d2 > 0;
      return !(has_neg && has_pos);
    }
    case 3: {  // ring
      const double dx = px - s.cx, dy = py - s.cy;
      const double rr = dx * dx + dy * dy;
      const double ri = s.a * s.inner_ratio;
      return rr <= s.a * s.a && rr >= ri * ri;
    }
    default:
      return false;
  }
}

std::vector<std::uint8_t> rasterize(const ShapeGeom& s, int size) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(size) * size, 0);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (point_in_shape(s, x + 0.5, y + 0.5))
        m[static_cast<std::size_t>(y) * size + x] = 1;
  return m;
}

int mask_area(const std::vector<std::uint8_t>& m) {
  int n = 0;
  for (std::uint8_t v : m) n += v;
  return n;
}

ShapeGeom sample_geometry(int class_id, double target_area, int size, Rng& rng) {
  ShapeGeom s;
  s.class_id = class_id;
  s.cx = rng.uniform(0.2 * size, 0.8 * size);
  s.cy = rng.uniform(0.2 * size, 0.8 * size);
  const double aspect = rng.uniform(0.6, 1.7);
  switch (class_id) {
    case 0: {
      s.a = std::sqrt(target_area * aspect / kPi);
      s.b = target_area / (kPi * s.a);
      s.theta = rng.uniform(0.0, kPi);
      break;
    }
    case 1: {
      const double w = std::sqrt(target_area * aspect);
      s.a = w / 2.0;
      s.b = target_area / w / 2.0;
      break;
    }
    case 2: {
      const double phi = rng.uniform(0.0, 2.0 * kPi);
      const double j1 = rng.uniform(-0.4, 0.4), j2 = rng.uniform(-0.4, 0.4);
      const std::array<double, 3> ang = {phi, phi + 2.0 * kPi / 3.0 + j1,
                                         phi + 4.0 * kPi / 3.0 + j2};
      // area of a triangle inscribed in a circle of radius R
      const double spread = 0.5 * std::abs(std::sin(ang[1] - ang[0]) +
                                           std::sin(ang[2] - ang[1]) +
                                           std::sin(ang[0] - ang[2]));
      const double radius = std::sqrt(target_area / std::max(spread, 0.2));
      for (int i = 0; i < 3; ++i) {
        s.tri[static_cast<std::size_t>(2 * i)] = s.cx + radius * std::cos(ang[static_cast<std::size_t>(i)]);
        s.tri[static_cast<std::size_t>(2 * i + 1)] = s.cy + radius * std::sin(ang[static_cast<std::size_t>(i)]);
      }
      break;
    }
    case 3: {
      s.inner_ratio = rng.uniform(0.45, 0.65);
      s.a = std::sqrt(target_area / (kPi * (1.0 - s.inner_ratio * s.inner_ratio)));
      break;
    }
    default:
      break;
  }
  return s;
}

void shrink_geometry(ShapeGeom& s, double f) {
  s.a *= f;
  s.b *= f;
  for (int i = 0; i < 3; ++i) {
    s.tri[static_cast<std::size_t>(2 * i)] = s.cx + (s.tri[static_cast<std::size_t>(2 * i)] - s.cx) * f;
    s.tri[static_cast<std::size_t>(2 * i + 1)] = s.cy + (s.tri[static_cast<std::size_t>(2 * i + 1)] - s.cy) * f;
  }
}

// border = raster minus 2-pixel erosion (Chebyshev neighborhood)
std::vector<std::uint8_t> border_band(const std::vector<std::uint8_t>& raster, int size) {
  std::vector<std::uint8_t> band(raster.size(), 0);
  constexpr int r = 2;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      if (!raster[static_cast<std::size_t>(y) * size + x]) continue;
      bool interior = true;
      for (int dy = -r; dy <= r && interior; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= size || nx < 0 || nx >= size ||
              !raster[static_cast<std::size_t>(ny) * size + nx]) {
            interior = false;
            break;
          }
        }
      if (!interior) band[static_cast<std::size_t>(y) * size + x] = 1;
    }
  return band;
}

struct DrawnInstance {
  ShapeGeom geom;
  std::vector<std::uint8_t> raster;
  std::vector<std::uint8_t> attributes;
  int class_id = 0;
};

}  // namespace

void fill_background(double* pixels, int h, int w, Rng& rng) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      pixels[c * hw + i] = 0.5 + rng.uniform(-0.05, 0.05);
}

std::vector<std::uint8_t> resize_mask_nearest(const std::vector<std::uint8_t>& mask,
                                              int h, int w, int out_h, int out_w) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(out_h) * out_w, 0);
  for (int y = 0; y < out_h; ++y) {
    int sy = static_cast<int>((y + 0.5) * h / out_h);
    sy = std::min(sy, h - 1);
    for (int x = 0; x < out_w; ++x) {
      int sx = static_cast<int>((x + 0.5) * w / out_w);
      sx = std::min(sx, w - 1);
      out[static_cast<std::size_t>(y) * out_w + x] =
          mask[static_cast<std::size_t>(sy) * w + sx];
    }
  }
  return out;
}

std::pair<Tensor, SceneAnnotation> generate_scene(const SceneSpec& spec) {
  if (spec.image_size < 32)
    throw ContractError("generate_scene: image_size must be >= 32, got " +
                        std::to_string(spec.image_size));
  if (spec.num_instances < 1 || spec.num_instances > 8)
    throw ContractError("generate_scene: num_instances must be in [1, 8]");
  if (spec.scale_mix < 0.0 || spec.scale_mix > 1.0)
    throw ContractError("generate_scene: scale_mix must be in [0, 1]");

  const int size = spec.image_size;
  const std::size_t hw = static_cast<std::size_t>(size) * size;
  const int n_small =
      static_cast<int>(std::ceil(spec.scale_mix * spec.num_instances - 1e-9));

  for (int attempt = 0; attempt < 100; ++attempt) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(attempt)));

    std::vector<double> pixels(3 * hw);
    fill_background(pixels.data(), size, size, rng);

    std::vector<DrawnInstance> drawn;
    bool geometry_ok = true;
    // crowded scenes shrink the large instances, or no placement can keep
    // every layer sufficiently visible
    const double crowd = 3.0 / std::max(3, spec.num_instances);
    for (int i = 0; i < spec.num_instances; ++i) {
      DrawnInstance inst;
      inst.class_id = static_cast<int>(rng.uniform_int(kNumClasses));
      const bool small = i < n_small;
      const double frac =
          small ? rng.uniform(0.015, 0.06) : rng.uniform(0.12, 0.30) * crowd;
      inst.geom = sample_geometry(inst.class_id, frac * size * size, size, rng);
      inst.raster = rasterize(inst.geom, size);

      // Clipping and rounding can push a "small" shape over the cap; shrink.
      int guard = 0;
      while (small && mask_area(inst.raster) >= kSmallAreaCap * size * size * 0.95 &&
             guard++ < 12) {
        shrink_geometry(inst.geom, 0.85);
        inst.raster = rasterize(inst.geom, size);
      }
      if (mask_area(inst.raster) < 8) {
        geometry_ok = false;
        break;
      }

      const int pattern = static_cast<int>(rng.uniform_int(3));
      const int border = static_cast<int>(rng.uniform_int(2));  // 0 = present
      const int hue = static_cast<int>(rng.uniform_int(4));
      inst.attributes.assign(kNumAttributes, 0);
      inst.attributes[static_cast<std::size_t>(kAttrSolid + pattern)] = 1;
      inst.attributes[static_cast<std::size_t>(border == 0 ? kAttrBorderPresent
                                                           : kAttrBorderAbsent)] = 1;
      inst.attributes[static_cast<std::size_t>(kAttrHue0 + hue)] = 1;
      drawn.push_back(std::move(inst));
    }
    if (!geometry_ok) continue;

    // Visibility: raster minus everything drawn above. Slivers are rejected
    // along with full occlusion: an instance reduced to a few stray pixels is
    // unlearnable and would poison matching, so each one must keep a
    // meaningful share of its raster.
    std::vector<std::vector<std::uint8_t>> visible(drawn.size());
    bool all_visible = true;
    for (std::size_t i = 0; i < drawn.size(); ++i) {
      visible[i] = drawn[i].raster;
      for (std::size_t j = i + 1; j < drawn.size(); ++j)
        for (std::size_t p = 0; p < hw; ++p)
          if (drawn[j].raster[p]) visible[i][p] = 0;
      const int vis = mask_area(visible[i]);
      if (vis < 16 || vis < 0.30 * mask_area(drawn[i].raster)) {
        all_visible = false;
        break;
      }
    }
    if (!all_visible) continue;

    // Paint bottom to top; later instances overwrite.
    for (const DrawnInstance& inst : drawn) {
      const int pattern = inst.attributes[kAttrStriped] ? 1
                          : inst.attributes[kAttrDotted] ? 2
                                                         : 0;
      int hue = 0;
      for (int hb = 0; hb < 4; ++hb)
        if (inst.attributes[static_cast<std::size_t>(kAttrHue0 + hb)]) hue = hb;
      const Rgb base = hue_bucket_color(hue);
      const Rgb secondary = scale_color(base, pattern == 1 ? 0.45 : 0.35);
      const bool has_border = inst.attributes[kAttrBorderPresent] != 0;
      const std::vector<std::uint8_t> band =
          has_border ? border_band(inst.raster, size) : std::vector<std::uint8_t>();

      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * size + x;
          if (!inst.raster[p]) continue;
          Rgb col = base;
          if (pattern == 1 && (x / 3) % 2 == 1) col = secondary;
          if (pattern == 2 && (x % 6) < 2 && (y % 6) < 2) col = secondary;
          if (has_border && band[p]) col = {0.08, 0.08, 0.08};
          pixels[p] = col.r;
          pixels[hw + p] = col.g;
          pixels[2 * hw + p] = col.b;
        }
    }

    SceneAnnotation ann;
    ann.height = size;
    ann.width = size;
    for (std::size_t i = 0; i < drawn.size(); ++i) {
      InstanceAnnotation ia;
      ia.class_id = drawn[i].class_id;
      ia.mask = std::move(visible[i]);
      ia.attributes = drawn[i].attributes;
      ia.layer_order = static_cast<int>(i);
      ann.instances.push_back(std::move(ia));
    }
    return {Tensor::from_data({3, size, size}, std::move(pixels)), std::move(ann)};
  }
  throw GenerationError("generate_scene: no valid placement after 100 attempts (seed " +
                        std::to_string(spec.seed) + ")");
}

}  // namespace lqseg
