#pragma once

#include <span>
#include <utility>
#include <vector>

#include "triflow/triunit.hpp"

namespace triflow {

// Which tri-frame units a clip of F frames decomposes into: one unit per
// interior frame, predicting flow from that frame to both neighbors.
struct ClipLayout {
  int frame_count = 0;
  std::vector<int> centers;  // interior frame indices 1 .. F-2

  int units() const { return static_cast<int>(centers.size()); }
};

ClipLayout make_clip_layout(int frame_count);  // throws below 3 frames

// Per-unit motion state carried across iterations.
template <typename S>
struct MotionState {
  Tensor<S> state;  // [D_m, H/s, W/s]
  int center = 0;   // frame index of the owning unit
  int iteration = 0;
};

// Multi-frame model: the shared refinement core plus a motion trunk whose two
// linear heads emit the recurrent-cell input and the state handed to the
// neighboring units on the next iteration. motion_seed is the learned initial
// state, also substituted for missing neighbors at the clip boundary.
template <typename S>
struct ClipModel {
  ModelConfig cfg;
  RefineCore<S> core;
  Conv2dLayer<S> trunk;        // [corr, flow, own state, warped fwd, warped bwd] -> D_m
  Conv2dLayer<S> head_motion;  // trunk -> recurrent-cell input (linear 3x3)
  Conv2dLayer<S> head_state;   // trunk -> next motion state (linear 3x3)
  Tensor<S> motion_seed;       // [D_m]
};

template <typename S>
ClipModel<S> make_clip_model(Rng& rng, const ModelConfig& cfg);

template <typename S>
std::vector<NamedParam<S>> named_params(ClipModel<S>& model);

// Backward-warps a neighbor's state by the flow pointing at it:
// out(x) = state(x + flow(x)), bilinear with border clamping.
template <typename S>
Tensor<S> warp_state(const Tensor<S>& neighbor_state, const Tensor<S>& flow);

// Trunk + heads. Returns {recurrent-cell input, next motion state}.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> motion_encode_prop(const ClipModel<S>& model,
                                                   const Tensor<S>& f_corr,
                                                   const Tensor<S>& f_flow,
                                                   const Tensor<S>& m_self, const Tensor<S>& m_fwd,
                                                   const Tensor<S>& m_bwd);

struct ClipForwardOptions {
  int iters = 12;
  // Order in which units are visited inside one iteration. Purely a schedule:
  // all units read the previous iteration's states, so results cannot depend
  // on it. Empty means natural order.
  std::vector<int> unit_order;
};

// Runs every unit of the clip for `iters` synchronized iterations. Neighbor
// states are read from the previous iteration only (committed in lockstep);
// missing neighbors at the boundary read the learned seed. With propagation
// disabled in the config, both neighbor slots always read the seed.
// Predictions come back in unit order (centers 1..F-2).
template <typename S>
std::vector<UnitPrediction<S>> clip_forward(const ClipModel<S>& model,
                                            std::span<const Tensor<S>> frames,
                                            const ClipForwardOptions& opts = {});

// Reference path: one unit in isolation, straight-line code, both neighbor
// slots fed the seed. clip_forward on a 3-frame clip must match this exactly.
template <typename S>
UnitPrediction<S> single_unit_forward(const ClipModel<S>& model, std::span<const Tensor<S>> frames,
                                      int iters);

}  // namespace triflow
