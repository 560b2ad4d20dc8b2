#include "triflow/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "triflow/flowio.hpp"
#include "triflow/image.hpp"
#include "triflow/threading.hpp"

namespace triflow {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// --- procedural texture --------------------------------------------------

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
  const std::uint64_t h =
      mix64(seed ^ mix64(static_cast<std::uint64_t>(ix) * 0x8da6b343ull ^
                         static_cast<std::uint64_t>(iy) * 0xd8163841ull));
  return double(h >> 11) * 0x1.0p-53;
}

double value_noise(std::uint64_t seed, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
  const double tx = x - fx, ty = y - fy;
  const double v00 = lattice(seed, ix, iy), v10 = lattice(seed, ix + 1, iy);
  const double v01 = lattice(seed, ix, iy + 1), v11 = lattice(seed, ix + 1, iy + 1);
  const double top = v00 + (v10 - v00) * tx;
  const double bot = v01 + (v11 - v01) * tx;
  return top + (bot - top) * ty;
}

// Four octaves of bilinear value noise. The coarse octaves keep structure
// visible after aggressive feature downsampling (matching needs distinctive
// descriptors at 1/4 resolution and below); the fine ones carry the sub-pixel
// cues.
float texture_at(std::uint64_t seed, double x, double y) {
  const double v = 0.35 * value_noise(seed ^ 0x9e3779b97f4a7c15ull, x / 16.0, y / 16.0) +
                   0.30 * value_noise(seed, x / 8.0, y / 8.0) +
                   0.20 * value_noise(seed ^ 0x5851f42d4c957f2dull, x / 4.0, y / 4.0) +
                   0.15 * value_noise(seed ^ 0x14057b7ef767814full, x / 2.0, y / 2.0);
  return static_cast<float>(v);
}

// --- rigid sprites ---------------------------------------------------------

struct Vec2 {
  double x, y;
};

Vec2 center_at(const SpriteSpec& s, int t) { return {s.cx + t * s.tx, s.cy + t * s.ty}; }

// Image point -> sprite-local coordinates at frame t.
Vec2 to_local(const SpriteSpec& s, int t, double x, double y) {
  const auto c = center_at(s, t);
  const double a = -s.rot * t;
  const double ca = std::cos(a), sa = std::sin(a);
  const double dx = x - c.x, dy = y - c.y;
  return {ca * dx - sa * dy, sa * dx + ca * dy};
}

bool contains_local(const SpriteSpec& s, const Vec2& p) {
  if (s.shape == SpriteShape::rectangle)
    return std::fabs(p.x) <= s.half_w && std::fabs(p.y) <= s.half_h;
  const double nx = p.x / s.half_w, ny = p.y / s.half_h;
  return nx * nx + ny * ny <= 1.0;
}

// Where the sprite content at image point (x,y,t) sits at frame t2.
Vec2 correspond(const SpriteSpec& s, int t, int t2, double x, double y) {
  const auto c1 = center_at(s, t);
  const auto c2 = center_at(s, t2);
  const double a = s.rot * (t2 - t);
  const double ca = std::cos(a), sa = std::sin(a);
  const double dx = x - c1.x, dy = y - c1.y;
  return {ca * dx - sa * dy + c2.x, sa * dx + ca * dy + c2.y};
}

// Index into spec.sprites of the topmost sprite owning image point (x,y) at
// frame t, or -1 for the background. Later list entries win depth ties.
int owner_at(const SceneSpec& spec, int t, double x, double y) {
  int best = -1, best_depth = 0;
  for (size_t i = 0; i < spec.sprites.size(); ++i) {
    const auto& s = spec.sprites[i];
    if (!contains_local(s, to_local(s, t, x, y))) continue;
    if (best < 0 || s.depth >= best_depth) {
      best = static_cast<int>(i);
      best_depth = s.depth;
    }
  }
  return best;
}

bool in_frame(const SceneSpec& spec, const Vec2& p) {
  return p.x >= 0.0 && p.x <= spec.width - 1.0 && p.y >= 0.0 && p.y <= spec.height - 1.0;
}

void check_scene(const SceneSpec& spec) {
  if (spec.frames < 3) fail("scene needs at least 3 frames");
  if (spec.width < 2 || spec.height < 2) fail("scene must be at least 2x2");
  for (const auto& s : spec.sprites) {
    if (s.half_w <= 0.0 || s.half_h <= 0.0) fail("degenerate sprite (zero area)");
    if (s.cx < 0 || s.cx >= spec.width || s.cy < 0 || s.cy >= spec.height)
      fail("sprite starts outside the frame");
  }
}

}  // namespace

SyntheticSequence generate_sequence(const SceneSpec& spec) {
  check_scene(spec);
  const int w = spec.width, h = spec.height, f_count = spec.frames;
  SyntheticSequence seq;
  seq.valid = Tensor<float>::full({h, w}, 1.0f);

  for (int t = 0; t < f_count; ++t) {
    auto frame = Tensor<float>::zeros({1, h, w});
    auto px = frame.data_mut();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int owner = owner_at(spec, t, x, y);
        float v;
        if (owner < 0) {
          v = texture_at(spec.background_seed, x - t * spec.bg_tx, y - t * spec.bg_ty);
        } else {
          const auto& s = spec.sprites[owner];
          const auto p = to_local(s, t, x, y);
          v = texture_at(s.texture_seed, p.x, p.y);
        }
        px[y * w + x] = v;
      }
    seq.frames.push_back(frame);
  }

  for (int t = 1; t + 1 < f_count; ++t) {
    auto fwd = Tensor<float>::zeros({2, h, w});
    auto bwd = Tensor<float>::zeros({2, h, w});
    auto ofwd = Tensor<float>::zeros({h, w});
    auto obwd = Tensor<float>::zeros({h, w});
    auto fw = fwd.data_mut();
    auto bw = bwd.data_mut();
    auto of = ofwd.data_mut();
    auto ob = obwd.data_mut();
    const size_t plane = static_cast<size_t>(h) * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const size_t i = static_cast<size_t>(y) * w + x;
        const int owner = owner_at(spec, t, x, y);
        Vec2 nxt, prv;
        if (owner < 0) {
          nxt = {x + spec.bg_tx, y + spec.bg_ty};
          prv = {x - spec.bg_tx, y - spec.bg_ty};
        } else {
          nxt = correspond(spec.sprites[owner], t, t + 1, x, y);
          prv = correspond(spec.sprites[owner], t, t - 1, x, y);
        }
        fw[i] = static_cast<float>(nxt.x - x);
        fw[plane + i] = static_cast<float>(nxt.y - y);
        bw[i] = static_cast<float>(prv.x - x);
        bw[plane + i] = static_cast<float>(prv.y - y);
        of[i] = (!in_frame(spec, nxt) || owner_at(spec, t + 1, nxt.x, nxt.y) != owner) ? 1.0f : 0.0f;
        ob[i] = (!in_frame(spec, prv) || owner_at(spec, t - 1, prv.x, prv.y) != owner) ? 1.0f : 0.0f;
      }
    seq.gt_fwd.push_back(fwd);
    seq.gt_bwd.push_back(bwd);
    seq.occl_fwd.push_back(ofwd);
    seq.occl_bwd.push_back(obwd);
  }
  return seq;
}

namespace {

std::string seq_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "seq_%04d", index);
  return buf;
}

std::string numbered(const char* stem, int t, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%02d.%s", stem, t, ext);
  return buf;
}

SceneSpec sample_scene(const DatasetSpec& d, std::uint64_t scene_seed) {
  Rng rng(scene_seed);
  SceneSpec scene;
  scene.width = d.width;
  scene.height = d.height;
  scene.frames = d.frames;
  scene.background_seed = rng.next_u64();
  scene.bg_tx = rng.uniform(-d.background_speed, d.background_speed);
  scene.bg_ty = rng.uniform(-d.background_speed, d.background_speed);
  const int n = d.min_sprites + static_cast<int>(rng.uniform_int(d.max_sprites - d.min_sprites + 1));
  const double extent = 0.5 * std::min(d.width, d.height);
  for (int i = 0; i < n; ++i) {
    SpriteSpec s;
    s.shape = rng.uniform_int(2) == 0 ? SpriteShape::rectangle : SpriteShape::ellipse;
    s.cx = rng.uniform(0.2, 0.8) * d.width;
    s.cy = rng.uniform(0.2, 0.8) * d.height;
    s.half_w = rng.uniform(0.15, 0.45) * extent;
    s.half_h = rng.uniform(0.15, 0.45) * extent;
    s.tx = rng.uniform(-d.max_speed, d.max_speed);
    s.ty = rng.uniform(-d.max_speed, d.max_speed);
    s.rot = rng.uniform(-d.max_spin, d.max_spin);
    s.texture_seed = rng.next_u64();
    s.depth = i + 1;
    scene.sprites.push_back(s);
  }
  return scene;
}

json scene_to_json(const SceneSpec& scene, std::uint64_t scene_seed) {
  json sprites = json::array();
  for (const auto& s : scene.sprites) {
    sprites.push_back({{"shape", s.shape == SpriteShape::rectangle ? "rectangle" : "ellipse"},
                       {"cx", s.cx},
                       {"cy", s.cy},
                       {"half_w", s.half_w},
                       {"half_h", s.half_h},
                       {"tx", s.tx},
                       {"ty", s.ty},
                       {"rot", s.rot},
                       {"texture_seed", s.texture_seed},
                       {"depth", s.depth}});
  }
  return {{"seed", scene_seed},
          {"width", scene.width},
          {"height", scene.height},
          {"frames", scene.frames},
          {"background_seed", scene.background_seed},
          {"bg_tx", scene.bg_tx},
          {"bg_ty", scene.bg_ty},
          {"sprites", sprites}};
}

}  // namespace

std::vector<std::string> make_dataset(const std::string& dir, const DatasetSpec& spec) {
  if (spec.count < 1) fail("make_dataset: count must be >= 1");
  if (spec.min_sprites < 0 || spec.max_sprites < spec.min_sprites)
    fail("make_dataset: bad sprite count range");
  fs::create_directories(dir);

  // Per-sequence seeds drawn up front so generation order cannot matter.
  Rng master(spec.seed);
  std::vector<std::uint64_t> seeds(spec.count);
  for (auto& s : seeds) s = master.next_u64();

  std::vector<std::string> names(spec.count);
  parallel_for(spec.count, [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t i = begin; i < end; ++i) {
      const auto scene = sample_scene(spec, seeds[i]);
      const auto seq = generate_sequence(scene);
      const auto name = seq_name(static_cast<int>(i));
      const fs::path base = fs::path(dir) / name;
      fs::create_directories(base);
      for (int t = 0; t < scene.frames; ++t)
        write_pnm((base / numbered("frame", t, "pgm")).string(), seq.frames[t]);
      for (int t = 1; t + 1 < scene.frames; ++t) {
        write_flo((base / numbered("fwd", t, "flo")).string(), seq.gt_fwd[t - 1]);
        write_flo((base / numbered("bwd", t, "flo")).string(), seq.gt_bwd[t - 1]);
        write_mask_png((base / numbered("occl_fwd", t, "png")).string(), seq.occl_fwd[t - 1]);
        write_mask_png((base / numbered("occl_bwd", t, "png")).string(), seq.occl_bwd[t - 1]);
      }
      std::ofstream meta(base / "meta.json");
      meta << scene_to_json(scene, seeds[i]).dump(2) << "\n";
      if (!meta) fail("make_dataset: cannot write manifest in " + name);
      names[i] = name;
    }
  });
  return names;
}

LoadedSequence load_sequence(const std::string& seq_dir) {
  LoadedSequence seq;
  const fs::path base(seq_dir);
  for (int t = 0;; ++t) {
    const auto path = base / numbered("frame", t, "pgm");
    if (!fs::exists(path)) break;
    seq.frames.push_back(read_pnm(path.string()));
  }
  if (seq.frames.size() < 3) fail("load_sequence: fewer than 3 frames in " + seq_dir);
  for (int t = 1; t + 1 < static_cast<int>(seq.frames.size()); ++t) {
    seq.gt_fwd.push_back(read_flo((base / numbered("fwd", t, "flo")).string()));
    seq.gt_bwd.push_back(read_flo((base / numbered("bwd", t, "flo")).string()));
    seq.occl_fwd.push_back(read_mask_png((base / numbered("occl_fwd", t, "png")).string()));
    seq.occl_bwd.push_back(read_mask_png((base / numbered("occl_bwd", t, "png")).string()));
  }
  return seq;
}

std::vector<std::string> list_sequences(const std::string& dataset_dir) {
  std::vector<std::string> names;
  if (!fs::is_directory(dataset_dir)) fail("not a dataset directory: " + dataset_dir);
  for (const auto& entry : fs::directory_iterator(dataset_dir))
    if (entry.is_directory() && entry.path().filename().string().rfind("seq_", 0) == 0)
      names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace triflow
