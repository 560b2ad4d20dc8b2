#include "triflow/flowio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace triflow {

namespace {

constexpr float kFloMagic = 202021.25f;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void push_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 24));
}

void push_f32(std::vector<unsigned char>& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  push_u32(out, v);
}

std::uint32_t take_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

float take_f32(const unsigned char* p) {
  const std::uint32_t v = take_u32(p);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

void check_flow(const Tensor<float>& flow, const char* who) {
  if (flow.ndim() != 3 || flow.dim(0) != 2) fail(std::string(who) + ": flow must be [2,H,W]");
}

// Shared walk for the metrics: calls visit(epe, gt_mag, index) on every pixel
// where valid != 0 and returns how many there were.
template <typename F>
std::int64_t for_valid(const Tensor<float>& pred, const Tensor<float>& gt,
                       const Tensor<float>& valid, const char* who, F&& visit) {
  check_flow(pred, who);
  if (gt.shape() != pred.shape()) fail(std::string(who) + ": prediction/ground-truth shape mismatch");
  const int h = pred.dim(1), w = pred.dim(2);
  if (valid.defined() && (valid.ndim() != 2 || valid.dim(0) != h || valid.dim(1) != w))
    fail(std::string(who) + ": valid mask must be [H,W]");
  const auto p = pred.data();
  const auto g = gt.data();
  const std::int64_t n = static_cast<std::int64_t>(h) * w;
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (valid.defined() && valid.data()[i] == 0.0f) continue;
    const double du = double(p[i]) - double(g[i]);
    const double dv = double(p[n + i]) - double(g[n + i]);
    const double mag = std::hypot(double(g[i]), double(g[n + i]));
    visit(std::hypot(du, dv), mag, i);
    ++count;
  }
  if (count == 0) fail(std::string(who) + ": no valid pixels");
  return count;
}

}  // namespace

void write_flo(const std::string& path, const Tensor<float>& flow) {
  check_flow(flow, "write_flo");
  const int h = flow.dim(1), w = flow.dim(2);
  for (float v : flow.data())
    if (!std::isfinite(v)) fail("write_flo: non-finite flow value");
  std::vector<unsigned char> out;
  out.reserve(12 + static_cast<size_t>(h) * w * 8);
  push_f32(out, kFloMagic);
  push_u32(out, static_cast<std::uint32_t>(w));
  push_u32(out, static_cast<std::uint32_t>(h));
  const auto d = flow.data();
  const size_t plane = static_cast<size_t>(h) * w;
  for (size_t i = 0; i < plane; ++i) {
    push_f32(out, d[i]);          // u
    push_f32(out, d[plane + i]);  // v
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) fail("write_flo: cannot open " + path);
  file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!file) fail("write_flo: short write to " + path);
}

Tensor<float> read_flo(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) fail("read_flo: cannot open " + path);
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(file),
                                   std::istreambuf_iterator<char>()};
  if (bytes.size() < 12) fail("read_flo: truncated header in " + path);
  if (take_f32(bytes.data()) != kFloMagic) fail("read_flo: bad magic in " + path);
  const int w = static_cast<std::int32_t>(take_u32(bytes.data() + 4));
  const int h = static_cast<std::int32_t>(take_u32(bytes.data() + 8));
  if (w <= 0 || h <= 0) fail("read_flo: nonpositive dimensions in " + path);
  const size_t plane = static_cast<size_t>(h) * w;
  if (bytes.size() != 12 + plane * 8) fail("read_flo: truncated payload in " + path);
  auto flow = Tensor<float>::zeros({2, h, w});
  auto d = flow.data_mut();
  for (size_t i = 0; i < plane; ++i) {
    d[i] = take_f32(bytes.data() + 12 + i * 8);
    d[plane + i] = take_f32(bytes.data() + 12 + i * 8 + 4);
  }
  return flow;
}

Tensor<float> colorize_flow(const Tensor<float>& flow, float max_magnitude) {
  check_flow(flow, "colorize_flow");
  const int h = flow.dim(1), w = flow.dim(2);
  const size_t plane = static_cast<size_t>(h) * w;
  const auto d = flow.data();

  float max_mag = max_magnitude;
  if (max_mag <= 0.0f) {
    std::vector<float> mags(plane);
    for (size_t i = 0; i < plane; ++i) mags[i] = std::hypot(d[i], d[plane + i]);
    const size_t k = static_cast<size_t>(std::lround(0.99 * double(plane - 1)));
    std::nth_element(mags.begin(), mags.begin() + k, mags.end());
    max_mag = mags[k];
  }
  if (max_mag <= 0.0f) max_mag = 1.0f;

  auto image = Tensor<float>::zeros({3, h, w});
  auto out = image.data_mut();
  for (size_t i = 0; i < plane; ++i) {
    const float u = d[i], v = d[plane + i];
    const float sat = std::min(std::hypot(u, v) / max_mag, 1.0f);
    float deg = std::atan2(v, u) * 180.0f / 3.14159265358979323846f;
    if (deg < 0) deg += 360.0f;
    // HSV with V=1: chroma = sat, so white at zero magnitude.
    const float c = sat;
    const float x = c * (1.0f - std::fabs(std::fmod(deg / 60.0f, 2.0f) - 1.0f));
    float r = 0, g = 0, b = 0;
    switch (static_cast<int>(deg / 60.0f) % 6) {
      case 0: r = c; g = x; break;
      case 1: r = x; g = c; break;
      case 2: g = c; b = x; break;
      case 3: g = x; b = c; break;
      case 4: r = x; b = c; break;
      default: r = c; b = x; break;
    }
    const float m = 1.0f - c;
    out[i] = r + m;
    out[plane + i] = g + m;
    out[2 * plane + i] = b + m;
  }
  return image;
}

double aepe(const Tensor<float>& pred, const Tensor<float>& gt, const Tensor<float>& valid) {
  double sum = 0.0;
  const auto count =
      for_valid(pred, gt, valid, "aepe", [&](double epe, double, std::int64_t) { sum += epe; });
  return sum / double(count);
}

double fl_all(const Tensor<float>& pred, const Tensor<float>& gt, const Tensor<float>& valid) {
  std::int64_t outliers = 0;
  const auto count = for_valid(pred, gt, valid, "fl_all", [&](double epe, double mag, std::int64_t) {
    if (epe > 3.0 && epe > 0.05 * mag) ++outliers;
  });
  return 100.0 * double(outliers) / double(count);
}

MetricsReport band_metrics(const Tensor<float>& pred, const Tensor<float>& gt,
                           const Tensor<float>& occl) {
  const int h = pred.ndim() == 3 ? pred.dim(1) : 0, w = pred.ndim() == 3 ? pred.dim(2) : 0;
  if (occl.defined() && (occl.ndim() != 2 || occl.dim(0) != h || occl.dim(1) != w))
    fail("band_metrics: occlusion mask must be [H,W]");

  double sum = 0.0;
  std::int64_t outliers = 0;
  double band_sum[3] = {0, 0, 0};
  std::int64_t band_n[3] = {0, 0, 0};
  double split_sum[2] = {0, 0};  // matched, unmatched
  std::int64_t split_n[2] = {0, 0};
  const auto count =
      for_valid(pred, gt, {}, "band_metrics", [&](double epe, double mag, std::int64_t i) {
        sum += epe;
        if (epe > 3.0 && epe > 0.05 * mag) ++outliers;
        const int band = mag < 10.0 ? 0 : (mag < 40.0 ? 1 : 2);
        band_sum[band] += epe;
        ++band_n[band];
        const int part = (occl.defined() && occl.data()[i] != 0.0f) ? 1 : 0;
        split_sum[part] += epe;
        ++split_n[part];
      });

  MetricsReport report;
  report.aepe = sum / double(count);
  report.fl_all = 100.0 * double(outliers) / double(count);
  auto stat = [](double s, std::int64_t n) -> std::optional<BandStat> {
    if (n == 0) return std::nullopt;
    return BandStat{s / double(n), n};
  };
  report.s0_10 = stat(band_sum[0], band_n[0]);
  report.s10_40 = stat(band_sum[1], band_n[1]);
  report.s40_plus = stat(band_sum[2], band_n[2]);
  report.matched = stat(split_sum[0], split_n[0]);
  report.unmatched = stat(split_sum[1], split_n[1]);
  return report;
}

std::string format_metrics(const MetricsReport& report) {
  std::ostringstream out;
  out << "aepe=" << report.aepe << "\n";
  out << "fl_all=" << report.fl_all << "\n";
  auto line = [&](const char* key, const std::optional<BandStat>& stat) {
    if (stat) out << key << "=" << stat->value << " (" << stat->pixels << " px)\n";
  };
  line("aepe_s0_10", report.s0_10);
  line("aepe_s10_40", report.s10_40);
  line("aepe_s40plus", report.s40_plus);
  line("aepe_matched", report.matched);
  line("aepe_unmatched", report.unmatched);
  return out.str();
}

}  // namespace triflow
