#include "triflow/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace triflow {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail("short write to " + path);
}

unsigned char quantize(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(c * 255.0f));
}

// Planar [C,H,W] float -> interleaved bytes.
std::vector<unsigned char> interleave(const Tensor<float>& image) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<unsigned char> out(static_cast<size_t>(c) * h * w);
  auto src = image.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        out[(static_cast<size_t>(y) * w + x) * c + ch] = quantize(src[(ch * h + y) * w + x]);
  return out;
}

Tensor<float> deinterleave(const unsigned char* bytes, int c, int h, int w) {
  auto image = Tensor<float>::zeros({c, h, w});
  auto dst = image.data_mut();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        dst[(ch * h + y) * w + x] =
            static_cast<float>(bytes[(static_cast<size_t>(y) * w + x) * c + ch]) / 255.0f;
  return image;
}

void check_image(const Tensor<float>& image) {
  if (image.ndim() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    fail("image must be [1,H,W] or [3,H,W]");
}

// --- PNM ---------------------------------------------------------------

int pnm_token(const std::vector<unsigned char>& bytes, size_t& pos) {
  // Skips whitespace and '#' comments, then parses one decimal integer.
  while (pos < bytes.size()) {
    if (std::isspace(bytes[pos])) {
      ++pos;
    } else if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  int value = 0;
  bool any = false;
  while (pos < bytes.size() && std::isdigit(bytes[pos])) {
    value = value * 10 + (bytes[pos] - '0');
    any = true;
    ++pos;
  }
  if (!any) fail("malformed PNM header");
  return value;
}

// --- PNG ---------------------------------------------------------------

void push_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

void push_chunk(std::vector<unsigned char>& out, const char type[4],
                const std::vector<unsigned char>& data) {
  push_be32(out, static_cast<std::uint32_t>(data.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
  push_be32(out, static_cast<std::uint32_t>(crc));
}

int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

const unsigned char kPngSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

}  // namespace

void write_pnm(const std::string& path, const Tensor<float>& image) {
  check_image(image);
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::string header = std::string(c == 1 ? "P5" : "P6") + "\n" + std::to_string(w) + " " +
                       std::to_string(h) + "\n255\n";
  std::vector<unsigned char> bytes(header.begin(), header.end());
  auto pixels = interleave(image);
  bytes.insert(bytes.end(), pixels.begin(), pixels.end());
  write_file(path, bytes);
}

Tensor<float> read_pnm(const std::string& path) {
  auto bytes = read_file(path);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    fail("not a binary PNM file: " + path);
  const int c = bytes[1] == '5' ? 1 : 3;
  size_t pos = 2;
  const int w = pnm_token(bytes, pos);
  const int h = pnm_token(bytes, pos);
  const int maxval = pnm_token(bytes, pos);
  if (w <= 0 || h <= 0 || maxval != 255) fail("unsupported PNM dimensions in " + path);
  ++pos;  // single whitespace after maxval
  const size_t need = static_cast<size_t>(c) * h * w;
  if (bytes.size() < pos + need) fail("truncated PNM payload in " + path);
  return deinterleave(bytes.data() + pos, c, h, w);
}

void write_png(const std::string& path, const Tensor<float>& image) {
  check_image(image);
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  auto pixels = interleave(image);
  const size_t row = static_cast<size_t>(c) * w;
  std::vector<unsigned char> raw((row + 1) * h);
  for (int y = 0; y < h; ++y) {
    raw[y * (row + 1)] = 0;  // no filter
    std::memcpy(raw.data() + y * (row + 1) + 1, pixels.data() + y * row, row);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> packed(bound);
  if (compress2(packed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
    fail("deflate failed for " + path);
  packed.resize(bound);

  std::vector<unsigned char> out(kPngSignature, kPngSignature + 8);
  std::vector<unsigned char> ihdr;
  push_be32(ihdr, static_cast<std::uint32_t>(w));
  push_be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr.push_back(8);                 // bit depth
  ihdr.push_back(c == 1 ? 0 : 2);    // gray / truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  push_chunk(out, "IHDR", ihdr);
  push_chunk(out, "IDAT", packed);
  push_chunk(out, "IEND", {});
  write_file(path, out);
}

Tensor<float> read_png(const std::string& path) {
  auto bytes = read_file(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSignature, 8) != 0)
    fail("not a PNG file: " + path);

  int w = 0, h = 0, channels = 0;
  std::vector<unsigned char> packed;
  size_t pos = 8;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t len = read_be32(bytes.data() + pos);
    if (pos + 12 + len > bytes.size()) fail("truncated PNG chunk in " + path);
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const unsigned char* data = bytes.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) fail("bad IHDR in " + path);
      w = static_cast<int>(read_be32(data));
      h = static_cast<int>(read_be32(data + 4));
      const int depth = data[8], color = data[9], interlace = data[12];
      if (depth != 8 || (color != 0 && color != 2) || interlace != 0)
        fail("unsupported PNG flavor in " + path + " (need 8-bit gray or RGB)");
      channels = color == 0 ? 1 : 3;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      packed.insert(packed.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (w <= 0 || h <= 0 || channels == 0 || packed.empty()) fail("incomplete PNG in " + path);

  const size_t row = static_cast<size_t>(channels) * w;
  std::vector<unsigned char> raw((row + 1) * h);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, packed.data(), static_cast<uLong>(packed.size())) != Z_OK ||
      raw_len != raw.size())
    fail("inflate failed for " + path);

  // Undo per-row filters in place, collecting rows into `pixels`.
  std::vector<unsigned char> pixels(row * h);
  const int bpp = channels;
  for (int y = 0; y < h; ++y) {
    const unsigned char filter = raw[y * (row + 1)];
    unsigned char* cur = raw.data() + y * (row + 1) + 1;
    const unsigned char* above = y > 0 ? pixels.data() + (y - 1) * row : nullptr;
    unsigned char* dst = pixels.data() + y * row;
    for (size_t i = 0; i < row; ++i) {
      const int a = i >= static_cast<size_t>(bpp) ? dst[i - bpp] : 0;
      const int b = above ? above[i] : 0;
      const int c = (above && i >= static_cast<size_t>(bpp)) ? above[i - bpp] : 0;
      int v = cur[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
        default: fail("unknown PNG filter in " + path);
      }
      dst[i] = static_cast<unsigned char>(v & 0xff);
    }
  }
  return deinterleave(pixels.data(), channels, h, w);
}

void write_mask_png(const std::string& path, const Tensor<float>& mask) {
  if (mask.ndim() != 2) fail("mask must be [H,W]");
  auto image = Tensor<float>::zeros({1, mask.dim(0), mask.dim(1)});
  auto dst = image.data_mut();
  auto src = mask.data();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] != 0.0f ? 1.0f : 0.0f;
  write_png(path, image);
}

Tensor<float> read_mask_png(const std::string& path) {
  auto image = read_png(path);
  if (image.dim(0) != 1) fail("mask PNG must be grayscale: " + path);
  auto mask = Tensor<float>::zeros({image.dim(1), image.dim(2)});
  auto dst = mask.data_mut();
  auto src = image.data();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] >= 0.5f ? 1.0f : 0.0f;
  return mask;
}

}  // namespace triflow
