#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "triflow/rng.hpp"
#include "triflow/tensor.hpp"

namespace triflow {

enum class SpriteShape { rectangle, ellipse };

// A rigidly moving textured layer. Its pose at frame t is a closed-form
// transform: rotation by t*rot about the (translated) center cx + t*tx,
// cy + t*ty, so ground-truth correspondences are exact.
struct SpriteSpec {
  SpriteShape shape = SpriteShape::rectangle;
  double cx = 0, cy = 0;          // center at t = 0, image pixels
  double half_w = 0, half_h = 0;  // extents in the sprite frame
  double tx = 0, ty = 0;          // translation per frame
  double rot = 0;                 // radians per frame
  std::uint64_t texture_seed = 1;
  int depth = 1;                  // higher is drawn on top; background is below all
};

struct SceneSpec {
  int width = 64, height = 64;
  int frames = 5;
  std::uint64_t background_seed = 0;
  double bg_tx = 0, bg_ty = 0;  // background translation per frame
  std::vector<SpriteSpec> sprites;
};

// Frames plus analytically exact bi-directional ground truth for every
// interior frame t in [1, F-2]; index i of the per-center vectors corresponds
// to t = i+1. Flows are defined for every pixel (including occluded ones);
// the occlusion masks mark pixels whose correspondence is covered by another
// layer or leaves the frame.
struct SyntheticSequence {
  std::vector<Tensor<float>> frames;              // F x [1,H,W], values in [0,1]
  std::vector<Tensor<float>> gt_fwd, gt_bwd;      // [2,H,W] per interior frame
  std::vector<Tensor<float>> occl_fwd, occl_bwd;  // [H,W] 0/1 per interior frame
  Tensor<float> valid;                            // [H,W], all ones
};

SyntheticSequence generate_sequence(const SceneSpec& spec);

// Distribution for random scenes.
struct DatasetSpec {
  int count = 8;
  int width = 64, height = 64;
  int frames = 5;
  int min_sprites = 1, max_sprites = 3;
  double max_speed = 6.0;        // per-axis sprite translation bound, px/frame
  double max_spin = 0.15;        // sprite rotation bound, radians/frame
  double background_speed = 1.0; // per-axis background translation bound
  std::uint64_t seed = 7;
};

// Samples `count` scenes from the distribution and serializes each to
// dir/seq_%04d/: frame_%02d.pgm, fwd_%02d.flo / bwd_%02d.flo and
// occl_fwd_%02d.png / occl_bwd_%02d.png per interior frame (files numbered by
// frame), plus a meta.json with the sampled scene. Returns the sequence
// directory names. Byte-identical for identical specs.
std::vector<std::string> make_dataset(const std::string& dir, const DatasetSpec& spec);

// Loads what make_dataset wrote (frames quantized to 8 bits; flows exact).
struct LoadedSequence {
  std::vector<Tensor<float>> frames;
  std::vector<Tensor<float>> gt_fwd, gt_bwd;
  std::vector<Tensor<float>> occl_fwd, occl_bwd;
};

LoadedSequence load_sequence(const std::string& seq_dir);
std::vector<std::string> list_sequences(const std::string& dataset_dir);

}  // namespace triflow
