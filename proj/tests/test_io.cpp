#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "triflow/flowio.hpp"
#include "triflow/image.hpp"
#include "triflow/rng.hpp"

using namespace triflow;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "triflow_io_test";
  fs::create_directories(dir);
  return dir / name;
}

Tensor<float> rand_flow(Rng& rng, int h, int w, float lo = -20.0f, float hi = 20.0f) {
  auto t = Tensor<float>::zeros({2, h, w});
  for (auto& v : t.data_mut()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

Tensor<float> const_flow(int h, int w, float u, float v) {
  auto t = Tensor<float>::zeros({2, h, w});
  auto d = t.data_mut();
  for (int i = 0; i < h * w; ++i) {
    d[i] = u;
    d[h * w + i] = v;
  }
  return t;
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  for (size_t i = 0; i < a.data().size(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

// Hue comparison that sidesteps angle arithmetic: at full brightness, pixels
// share a hue iff their chroma-normalized offsets from the gray floor agree.
std::array<float, 3> hue_direction(const Tensor<float>& img, int i) {
  const int plane = img.dim(1) * img.dim(2);
  float r = img.data()[i], g = img.data()[plane + i], b = img.data()[2 * plane + i];
  const float lo = std::min({r, g, b});
  const float chroma = std::max({r, g, b}) - lo;
  REQUIRE(chroma > 0.01f);
  return {(r - lo) / chroma, (g - lo) / chroma, (b - lo) / chroma};
}

}  // namespace

TEST_CASE("flow files round-trip bitwise and have the documented size") {
  Rng rng(71);
  auto flow = rand_flow(rng, 4, 5);
  const auto path = temp_file("roundtrip.flo");
  write_flo(path.string(), flow);
  CHECK(bitwise_equal(read_flo(path.string()), flow));

  auto small = rand_flow(rng, 2, 3);  // 3 wide, 2 high
  const auto sized = temp_file("sized.flo");
  write_flo(sized.string(), small);
  CHECK(fs::file_size(sized) == 60);  // 12-byte header + 3*2*8
}

TEST_CASE("flow reader rejects malformed files") {
  const auto path = temp_file("bad.flo");

  {  // wrong magic
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    const float wrong = 202021.5f;
    const std::int32_t w = 2, h = 2;
    out.write(reinterpret_cast<const char*>(&wrong), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(&h), 4);
    std::vector<float> payload(8, 0.0f);
    out.write(reinterpret_cast<const char*>(payload.data()), 32);
  }
  CHECK_THROWS_WITH_AS(read_flo(path.string()), doctest::Contains("magic"), std::runtime_error);

  {  // nonpositive dims
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    const float magic = 202021.25f;
    const std::int32_t w = 0, h = 2;
    out.write(reinterpret_cast<const char*>(&magic), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(&h), 4);
  }
  CHECK_THROWS_WITH_AS(read_flo(path.string()), doctest::Contains("dimensions"),
                       std::runtime_error);

  {  // truncated payload
    Rng rng(72);
    write_flo(path.string(), rand_flow(rng, 3, 3));
    fs::resize_file(path, fs::file_size(path) - 4);
  }
  CHECK_THROWS_WITH_AS(read_flo(path.string()), doctest::Contains("truncated"),
                       std::runtime_error);

  auto bad = Tensor<float>::zeros({2, 2, 2});
  bad.data_mut()[0] = std::nanf("");
  CHECK_THROWS(write_flo(path.string(), bad));
}

TEST_CASE("zero flow colorizes to pure white") {
  auto img = colorize_flow(Tensor<float>::zeros({2, 3, 4}));
  for (float v : img.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("opposite flows land on complementary wheel colors") {
  // At full saturation and brightness, hues 180 degrees apart sum to white in
  // every channel; check several directions against that wheel identity.
  for (double deg : {0.0, 37.0, 90.0, 141.0, 200.0, 313.0}) {
    const float u = static_cast<float>(std::cos(deg * 3.14159265358979 / 180.0));
    const float v = static_cast<float>(std::sin(deg * 3.14159265358979 / 180.0));
    auto a = colorize_flow(const_flow(1, 1, u, v), 1.0f);
    auto b = colorize_flow(const_flow(1, 1, -u, -v), 1.0f);
    for (int c = 0; c < 3; ++c) {
      INFO("direction ", deg, " channel ", c);
      CHECK(a.data()[c] + b.data()[c] == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("scaling a flow field changes saturation but not hue") {
  Rng rng(73);
  auto flow = rand_flow(rng, 4, 4, -2.0f, 2.0f);
  auto doubled = Tensor<float>::zeros({2, 4, 4});
  for (size_t i = 0; i < flow.data().size(); ++i) doubled.data_mut()[i] = 2.0f * flow.data()[i];
  auto img1 = colorize_flow(flow, 8.0f);
  auto img2 = colorize_flow(doubled, 8.0f);
  for (int i = 0; i < 16; ++i) {
    const auto h1 = hue_direction(img1, i);
    const auto h2 = hue_direction(img2, i);
    for (int c = 0; c < 3; ++c) CHECK(h1[c] == doctest::Approx(h2[c]).epsilon(1e-5));
  }
}

TEST_CASE("end-point error: exact cases and a masked loop oracle") {
  auto gt = Tensor<float>::zeros({2, 4, 4});
  auto pred = const_flow(4, 4, 3.0f, 4.0f);
  CHECK(aepe(pred, gt) == doctest::Approx(5.0));
  CHECK(aepe(gt, gt) == doctest::Approx(0.0));

  Rng rng(74);
  auto p = rand_flow(rng, 5, 6);
  auto g = rand_flow(rng, 5, 6);
  auto mask = Tensor<float>::zeros({5, 6});
  for (int i = 0; i < 30; ++i) mask.data_mut()[i] = static_cast<float>(i % 2);

  double sum = 0;
  int n = 0;
  for (int i = 0; i < 30; ++i) {
    if (i % 2 == 0) continue;
    const double du = double(p.data()[i]) - double(g.data()[i]);
    const double dv = double(p.data()[30 + i]) - double(g.data()[30 + i]);
    sum += std::sqrt(du * du + dv * dv);
    ++n;
  }
  CHECK(aepe(p, g, mask) == doctest::Approx(sum / n).epsilon(1e-12));

  auto empty = Tensor<float>::zeros({5, 6});
  CHECK_THROWS(aepe(p, g, empty));
}

TEST_CASE("aepe ignores the spatial arrangement of pixels") {
  Rng rng(75);
  auto p = rand_flow(rng, 4, 5);
  auto g = rand_flow(rng, 4, 5);
  std::vector<int> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = 19; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(i + 1)]);

  auto pp = Tensor<float>::zeros({2, 4, 5});
  auto pg = Tensor<float>::zeros({2, 4, 5});
  for (int i = 0; i < 20; ++i) {
    for (int c = 0; c < 2; ++c) {
      pp.data_mut()[c * 20 + perm[i]] = p.data()[c * 20 + i];
      pg.data_mut()[c * 20 + perm[i]] = g.data()[c * 20 + i];
    }
  }
  CHECK(aepe(pp, pg) == doctest::Approx(aepe(p, g)).epsilon(1e-12));
}

TEST_CASE("outlier rate needs both the 3px and the 5% condition") {
  auto gt10 = const_flow(3, 3, 10.0f, 0.0f);
  auto pred4 = const_flow(3, 3, 14.0f, 0.0f);  // EPE 4, 5% of 10 = 0.5
  CHECK(fl_all(pred4, gt10) == doctest::Approx(100.0));

  auto pred2 = const_flow(3, 3, 12.0f, 0.0f);  // EPE 2 fails the 3px test
  CHECK(fl_all(pred2, gt10) == doctest::Approx(0.0));

  auto gt100 = const_flow(3, 3, 100.0f, 0.0f);
  auto pred104 = const_flow(3, 3, 104.0f, 0.0f);  // EPE 4 < 5% of 100
  CHECK(fl_all(pred104, gt100) == doctest::Approx(0.0));
}

TEST_CASE("outlier rate never drops when errors grow") {
  Rng rng(76);
  auto gt = rand_flow(rng, 6, 6, -30.0f, 30.0f);
  auto dir = rand_flow(rng, 6, 6, -4.0f, 4.0f);
  double last = -1.0;
  for (double lambda : {1.0, 1.5, 2.5, 6.0}) {
    auto pred = Tensor<float>::zeros({2, 6, 6});
    for (size_t i = 0; i < pred.data().size(); ++i)
      pred.data_mut()[i] = gt.data()[i] + static_cast<float>(lambda) * dir.data()[i];
    const double rate = fl_all(pred, gt);
    CHECK(rate >= last);
    last = rate;
  }
}

TEST_CASE("band report: membership, loop oracle, and occlusion splits") {
  // All magnitudes below 10: only the first band exists.
  auto gt5 = const_flow(3, 3, 3.0f, 4.0f);
  auto report5 = band_metrics(const_flow(3, 3, 4.0f, 4.0f), gt5);
  CHECK(report5.s0_10.has_value());
  CHECK_FALSE(report5.s10_40.has_value());
  CHECK_FALSE(report5.s40_plus.has_value());
  CHECK(report5.s0_10->pixels == 9);

  // Boundaries are lower-inclusive.
  auto gt10 = const_flow(1, 1, 10.0f, 0.0f);
  auto r10 = band_metrics(gt10, gt10);
  CHECK(r10.s10_40.has_value());
  CHECK_FALSE(r10.s0_10.has_value());
  auto gt40 = const_flow(1, 1, 40.0f, 0.0f);
  auto r40 = band_metrics(gt40, gt40);
  CHECK(r40.s40_plus.has_value());
  CHECK_FALSE(r40.s10_40.has_value());

  // Mixed field against an explicit loop.
  Rng rng(77);
  auto gt = Tensor<float>::zeros({2, 4, 6});
  auto pred = rand_flow(rng, 4, 6, -3.0f, 3.0f);
  for (int i = 0; i < 24; ++i) {
    const float mag = i < 8 ? 5.0f : (i < 16 ? 20.0f : 50.0f);
    gt.data_mut()[i] = mag;
  }
  auto occl = Tensor<float>::zeros({4, 6});
  for (int i = 0; i < 24; i += 3) occl.data_mut()[i] = 1.0f;

  auto report = band_metrics(pred, gt, occl);
  double sums[3] = {0, 0, 0}, match_sum = 0, unmatch_sum = 0;
  int ns[3] = {0, 0, 0}, match_n = 0, unmatch_n = 0;
  for (int i = 0; i < 24; ++i) {
    const double du = double(pred.data()[i]) - double(gt.data()[i]);
    const double dv = double(pred.data()[24 + i]) - double(gt.data()[24 + i]);
    const double epe = std::sqrt(du * du + dv * dv);
    const double mag = std::hypot(double(gt.data()[i]), double(gt.data()[24 + i]));
    const int band = mag < 10 ? 0 : (mag < 40 ? 1 : 2);
    sums[band] += epe;
    ++ns[band];
    if (occl.data()[i] != 0.0f) {
      unmatch_sum += epe;
      ++unmatch_n;
    } else {
      match_sum += epe;
      ++match_n;
    }
  }
  CHECK(report.s0_10->value == doctest::Approx(sums[0] / ns[0]).epsilon(1e-12));
  CHECK(report.s10_40->value == doctest::Approx(sums[1] / ns[1]).epsilon(1e-12));
  CHECK(report.s40_plus->value == doctest::Approx(sums[2] / ns[2]).epsilon(1e-12));
  CHECK(report.matched->value == doctest::Approx(match_sum / match_n).epsilon(1e-12));
  CHECK(report.unmatched->value == doctest::Approx(unmatch_sum / unmatch_n).epsilon(1e-12));

  // Everything occluded: matched absent, unmatched is the overall mean.
  auto all_occl = Tensor<float>::full({4, 6}, 1.0f);
  auto degenerate = band_metrics(pred, gt, all_occl);
  CHECK_FALSE(degenerate.matched.has_value());
  CHECK(degenerate.unmatched->value == doctest::Approx(degenerate.aepe).epsilon(1e-12));

  const auto text = format_metrics(report);
  CHECK(text.find("aepe=") != std::string::npos);
  CHECK(text.find("fl_all=") != std::string::npos);
  CHECK(text.find("aepe_s40plus=") != std::string::npos);
}

TEST_CASE("images survive PNM and PNG round trips after quantization") {
  Rng rng(78);
  auto gray = Tensor<float>::zeros({1, 5, 7});
  for (auto& v : gray.data_mut()) v = static_cast<float>(rng.uniform_int(256)) / 255.0f;
  auto rgb = Tensor<float>::zeros({3, 4, 3});
  for (auto& v : rgb.data_mut()) v = static_cast<float>(rng.uniform_int(256)) / 255.0f;

  const auto pgm = temp_file("img.pgm");
  write_pnm(pgm.string(), gray);
  CHECK(bitwise_equal(read_pnm(pgm.string()), gray));

  const auto ppm = temp_file("img.ppm");
  write_pnm(ppm.string(), rgb);
  CHECK(bitwise_equal(read_pnm(ppm.string()), rgb));

  const auto png_gray = temp_file("img_gray.png");
  write_png(png_gray.string(), gray);
  CHECK(bitwise_equal(read_png(png_gray.string()), gray));

  const auto png_rgb = temp_file("img_rgb.png");
  write_png(png_rgb.string(), rgb);
  CHECK(bitwise_equal(read_png(png_rgb.string()), rgb));

  auto mask = Tensor<float>::zeros({6, 4});
  for (int i = 0; i < 24; ++i) mask.data_mut()[i] = static_cast<float>((i / 3) % 2);
  const auto mask_path = temp_file("mask.png");
  write_mask_png(mask_path.string(), mask);
  CHECK(bitwise_equal(read_mask_png(mask_path.string()), mask));

  CHECK_THROWS(read_png(pgm.string()));
  CHECK_THROWS(read_pnm(png_gray.string()));
}
