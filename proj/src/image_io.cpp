#include "lqseg/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "lqseg/errors.hpp"

namespace lqseg {

namespace {

int read_pnm_int(std::istream& in) {
  // skips whitespace and '#' comments per the PNM grammar
  int c = in.get();
  for (;;) {
    while (c == ' ' || c == '\t' || c == '\r' || c == '\n') c = in.get();
    if (c == '#') {
      while (c != '\n' && c != EOF) c = in.get();
      continue;
    }
    break;
  }
  int value = 0;
  bool any = false;
  while (c >= '0' && c <= '9') {
    value = value * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw ParseError("ppm: expected integer in header");
  return value;
}

void put_u32be(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

void png_chunk(std::string& out, const char type[4], const std::string& payload) {
  put_u32be(out, static_cast<std::uint32_t>(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  const auto crc = crc32(0, reinterpret_cast<const Bytef*>(body.data()),
                         static_cast<uInt>(body.size()));
  put_u32be(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

Tensor read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("ppm: cannot open " + path);
  char magic[2];
  f.read(magic, 2);
  if (!f || magic[0] != 'P' || magic[1] != '6')
    throw ParseError("ppm: " + path + " is not a binary P6 file", 0);
  const int w = read_pnm_int(f);
  const int h = read_pnm_int(f);
  const int maxval = read_pnm_int(f);
  if (maxval != 255) throw ParseError("ppm: only maxval 255 supported, got " +
                                      std::to_string(maxval));
  std::vector<char> raw(static_cast<std::size_t>(w) * h * 3);
  f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!f) throw ParseError("ppm: truncated pixel data in " + path);
  const std::size_t hw = static_cast<std::size_t>(w) * h;
  std::vector<double> pixels(3 * hw);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      pixels[c * hw + p] =
          static_cast<double>(static_cast<unsigned char>(raw[p * 3 + c])) / 255.0;
  return Tensor::from_data({3, h, w}, std::move(pixels));
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw ShapeError("write_ppm: expected [3,H,W], got " + shape_str(image.shape()));
  const int h = image.dim(1), w = image.dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::string raw(hw * 3, '\0');
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(image.data()[c * hw + p], 0.0, 1.0);
      raw[p * 3 + c] = static_cast<char>(std::lround(v * 255.0));
    }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ContractError("write_ppm: cannot open " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  f.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!f) throw ContractError("write_ppm: write failed for " + path);
}

void write_png_gray(const std::string& path, const std::vector<std::uint8_t>& pixels,
                    int width, int height) {
  if (static_cast<std::size_t>(width) * height != pixels.size())
    throw ShapeError("write_png_gray: pixel count does not match dimensions");

  // scanlines with filter byte 0
  std::string raw;
  raw.reserve(static_cast<std::size_t>(height) * (width + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back('\0');
    raw.append(reinterpret_cast<const char*>(pixels.data() + static_cast<std::size_t>(y) * width),
               static_cast<std::size_t>(width));
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string compressed(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw ContractError("write_png_gray: deflate failed");
  compressed.resize(bound);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32be(ihdr, static_cast<std::uint32_t>(width));
  put_u32be(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(0);   // grayscale
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  png_chunk(out, "IHDR", ihdr);
  png_chunk(out, "IDAT", compressed);
  png_chunk(out, "IEND", "");

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ContractError("write_png_gray: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ContractError("write_png_gray: write failed for " + path);
}

}  // namespace lqseg
