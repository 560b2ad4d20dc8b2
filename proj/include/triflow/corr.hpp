#pragma once

#include <vector>

#include "triflow/tensor.hpp"

namespace triflow {

// Bi-directional displacement fields of one center frame, both originating
// from the same source pixels: prev = f_{t -> t-1}, next = f_{t -> t+1}.
// Channel 0 is the x component (u), channel 1 the y component (v).
template <typename S>
struct FlowPair {
  Tensor<S> prev;  // [2, H, W]
  Tensor<S> next;  // [2, H, W]
};

struct LookupWindowSpec {
  int levels = 2;
  int radius = 3;
  int window() const { return 2 * radius + 1; }
  int channels_per_direction() const { return levels * window() * window(); }
};

// All-pairs feature similarities of the center frame against both temporal
// neighbors, with an average-pooled pyramid over the target dimensions.
template <typename S>
struct DualCorrelationVolume {
  // pyr_*[0] is the unpooled [H, W, H, W] volume; level l pools the target
  // dims by 2^l. Entries stay attached to the feature graph.
  std::vector<Tensor<S>> pyr_prev;
  std::vector<Tensor<S>> pyr_next;
  S scale_norm = S(1);  // factor applied at build time (1/sqrt(D) or 1)
  int h = 0, w = 0;

  const Tensor<S>& corr_prev() const { return pyr_prev.front(); }
  const Tensor<S>& corr_next() const { return pyr_next.front(); }
  int levels() const { return static_cast<int>(pyr_prev.size()); }
};

// corr_prev[i,j,p,q] = scale * <feat_center[:,i,j], feat_prev[:,p,q]>, same
// for next; differentiable w.r.t. all three feature maps.
template <typename S>
DualCorrelationVolume<S> build_dual_corr(const Tensor<S>& feat_center, const Tensor<S>& feat_prev,
                                         const Tensor<S>& feat_next, int levels,
                                         bool normalize = true);

template <typename S>
struct CorrLookup {
  Tensor<S> c_prev;  // [levels*(2r+1)^2, H, W]
  Tensor<S> c_next;
};

// For each source pixel x, level l, and offset d in the (2r+1)^2 grid, samples
// the level-l target plane of x at (x + f(x)) / 2^l + d with border clamping.
// Channel order: level-major, then row-major offsets (dy outer, dx inner).
// Differentiable w.r.t. the volume and the flows.
template <typename S>
CorrLookup<S> lookup(const DualCorrelationVolume<S>& vol, const FlowPair<S>& flows,
                     const LookupWindowSpec& spec);

// One direction only (used by single-direction refinement passes).
template <typename S>
Tensor<S> lookup_dir(const DualCorrelationVolume<S>& vol, const Tensor<S>& flow,
                     bool next_direction, const LookupWindowSpec& spec);

}  // namespace triflow
