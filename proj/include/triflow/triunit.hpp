#pragma once

#include <span>
#include <utility>
#include <vector>

#include "triflow/corr.hpp"
#include "triflow/nn.hpp"

namespace triflow {

// Layers shared by every refinement pass: frame encoders, the two-stage
// correlation / flow feature encoders, the recurrent cell, and the residual
// flow head. The clip model reuses the same block, so widths depend only on
// the config.
template <typename S>
struct RefineCore {
  FeatureEncoder<S> feature;  // matching features, shared across all frames
  FeatureEncoder<S> context;  // center-frame context, doubles as initial hidden state
  Conv2dLayer<S> corr_a;      // 1x1 reduce over lookup channels
  Conv2dLayer<S> corr_b;      // 3x3 mix
  Conv2dLayer<S> flow_a;      // 3x3 over the current flow estimate(s)
  Conv2dLayer<S> flow_b;      // 3x3 mix
  ConvGru<S> gru;
  FlowHead<S> head;

  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    feature.collect(prefix + ".feature", out);
    context.collect(prefix + ".context", out);
    corr_a.collect(prefix + ".corr_a", out);
    corr_b.collect(prefix + ".corr_b", out);
    flow_a.collect(prefix + ".flow_a", out);
    flow_b.collect(prefix + ".flow_b", out);
    gru.collect(prefix + ".gru", out);
    head.collect(prefix + ".head", out);
  }
};

template <typename S>
RefineCore<S> make_refine_core(Rng& rng, const ModelConfig& cfg);

// Single tri-frame refinement model: predicts flow from the center frame to
// both neighbors, iteratively.
template <typename S>
struct TriModel {
  ModelConfig cfg;
  RefineCore<S> core;
  Conv2dLayer<S> motion;  // 3x3: [corr features, flow features] -> motion features
  Conv2dLayer<S> fuse;    // 1x1 joining per-direction motion features (late-fusion mode only)
};

template <typename S>
TriModel<S> make_tri_model(Rng& rng, const ModelConfig& cfg);

template <typename S>
std::vector<NamedParam<S>> named_params(TriModel<S>& model);

template <typename S>
struct EncodedTriplet {
  Tensor<S> prev, center, next;  // matching features, [D, H/s, W/s]
  Tensor<S> context;             // center context, [D_h, H/s, W/s]
};

// Runs the shared feature encoder over all three frames and the context
// encoder over the center one. Frames must share one [C, H, W] shape with
// H and W divisible by the feature stride.
template <typename S>
EncodedTriplet<S> encode_features(const TriModel<S>& model, std::span<const Tensor<S>> frames);

// Two-stage encoders shared by every pass: 1x1+3x3 over lookup channels, and
// 3x3+3x3 over the current flow estimate. Both end in relu.
template <typename S>
Tensor<S> corr_encode(const RefineCore<S>& core, const Tensor<S>& looked_up);
template <typename S>
Tensor<S> flow_encode(const RefineCore<S>& core, const Tensor<S>& flow);

// Correlation and flow features for the joint bi-directional path; the two
// lookups (and the two flows) are concatenated with the backward direction
// first.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> corr_flow_encode(const TriModel<S>& model, const Tensor<S>& c_prev,
                                                 const Tensor<S>& c_next, const FlowPair<S>& flows);

// Motion features from the two encoded streams.
template <typename S>
Tensor<S> motion_encode_tri(const TriModel<S>& model, const Tensor<S>& f_corr,
                            const Tensor<S>& f_flow);

template <typename S>
struct UpdateResult {
  Tensor<S> hidden;  // next recurrent state
  Tensor<S> delta;   // residual flow(s), [2 or 4, H/s, W/s]
};

// One recurrent step: gru(hidden, [motion, context]) followed by the flow head.
template <typename S>
UpdateResult<S> update_step(const RefineCore<S>& core, const Tensor<S>& f_motion,
                            const Tensor<S>& context, const Tensor<S>& hidden);

// Bilinear-resamples a [2, h, w] feature-grid flow onto the [2, h*factor,
// w*factor] image grid and rescales the displacement values by factor.
template <typename S>
Tensor<S> upsample_flow(const Tensor<S>& flow, int factor);

// Everything one refinement pass produces, per iteration (index k-1 holds the
// k-th estimate). Image-resolution flows are upsampled copies of the feature
// ones; deltas are the raw head outputs.
template <typename S>
struct UnitPrediction {
  int center = 1;  // index of the frame the flows start from
  std::vector<FlowPair<S>> flows_feat;
  std::vector<FlowPair<S>> flows_img;
  std::vector<FlowPair<S>> deltas;
};

// Full tri-frame forward pass: encode, build the dual correlation volume, then
// run `iters` refinement iterations from zero flow. Honors the ablation
// switches in the config.
template <typename S>
UnitPrediction<S> tri_forward(const TriModel<S>& model, std::span<const Tensor<S>> frames,
                              int iters);

}  // namespace triflow
