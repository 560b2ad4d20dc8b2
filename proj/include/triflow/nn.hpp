#pragma once

#include <string>
#include <vector>

#include "triflow/rng.hpp"
#include "triflow/tensor.hpp"

namespace triflow {

// Architecture knobs shared by the tri-frame unit and the clip model.
struct ModelConfig {
  int in_channels = 1;   // grayscale frames by default
  int downsample = 4;    // s: feature grid stride (power of two)
  int d_feat = 64;       // matching-feature width D
  int d_hidden = 64;     // context/hidden width D_h
  int d_corr = 96;       // correlation feature width D_c
  int d_flow = 32;       // flow feature width D_f
  int d_motion = 96;     // motion feature width D_m
  int levels = 2;        // correlation pyramid levels L
  int radius = 3;        // lookup window radius r
  bool corr_normalize = true;
  bool large_kernel_updater = false;  // 7x7 depthwise gates instead of 3x3 dense

  // Ablation switches. bidirectional=false runs two independent single
  // direction passes that are never fused; recurrent_fusion=false encodes the
  // directions separately and joins them once per iteration through a fusion
  // layer instead of inside the recurrent state.
  bool bidirectional = true;
  bool recurrent_fusion = true;
  bool propagation = true;  // clip model: warp neighbor motion states (off = seeds only)

  int lookup_channels_per_direction() const { return levels * (2 * radius + 1) * (2 * radius + 1); }
};

void validate(const ModelConfig& cfg);  // throws on nonsense combinations

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

template <typename S>
struct Conv2dLayer {
  Tensor<S> weight;  // [Co, Ci, k, k]
  Tensor<S> bias;    // [Co]
  int stride = 1;
  int pad = 0;

  bool defined() const { return weight.defined(); }
  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, weight, bias, stride, pad); }
  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

// He-normal weights, biases uniform within the 1/sqrt(fan_in) bound.
template <typename S>
Conv2dLayer<S> make_conv(Rng& rng, int c_in, int c_out, int k, int pad, int stride = 1);

// One gate of the recurrent cell: a dense 3x3 conv, or a 7x7 depthwise
// convolution followed by a 1x1 pointwise mix when large_kernel is chosen.
template <typename S>
struct GateConv {
  bool large = false;
  Conv2dLayer<S> conv;     // 3x3 path
  Tensor<S> dw_weight;     // [C, 7, 7]
  Tensor<S> dw_bias;       // [C]
  Conv2dLayer<S> point;    // 1x1 path

  Tensor<S> operator()(const Tensor<S>& x) const {
    if (!large) return conv(x);
    return point(depthwise_conv2d(x, dw_weight, dw_bias, 3));
  }
  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    if (!large) {
      conv.collect(prefix, out);
      return;
    }
    out.push_back({prefix + ".dw_weight", dw_weight});
    out.push_back({prefix + ".dw_bias", dw_bias});
    point.collect(prefix + ".point", out);
  }
};

template <typename S>
GateConv<S> make_gate(Rng& rng, int c_in, int c_out, bool large);

// Convolutional gated recurrent cell:
//   z = sigmoid(Wz * [h, x]), r = sigmoid(Wr * [h, x]),
//   q = tanh(Wq * [r*h, x]), h' = (1 - z) * h + z * q.
template <typename S>
struct ConvGru {
  GateConv<S> update, reset, cand;

  Tensor<S> step(const Tensor<S>& hidden, const Tensor<S>& inputs) const;
  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    update.collect(prefix + ".update", out);
    reset.collect(prefix + ".reset", out);
    cand.collect(prefix + ".cand", out);
  }
};

template <typename S>
ConvGru<S> make_gru(Rng& rng, int c_hidden, int c_inputs, bool large);

// 3x3 expand + relu + 3x3 project; out_channels is 4 for joint bi-directional
// refinement, 2 for a single-direction pass.
template <typename S>
struct FlowHead {
  Conv2dLayer<S> expand, project;

  Tensor<S> operator()(const Tensor<S>& hidden) const { return project(relu(expand(hidden))); }
  int out_channels() const { return project.weight.dim(0); }
  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    expand.collect(prefix + ".expand", out);
    project.collect(prefix + ".project", out);
  }
};

template <typename S>
FlowHead<S> make_flow_head(Rng& rng, int c_hidden, int c_out);

// Downsampling tower: (log2(s)) blocks of [3x3 conv, relu, 2x2 mean-pool]
// with a 7x7 stem, then a 3x3 head at feature resolution. Channel widths
// ramp from c_out/2 up to c_out. The head is linear for matching features;
// the context encoder squashes it through tanh so the recurrent state it
// seeds stays inside (-1,1).
template <typename S>
struct FeatureEncoder {
  std::vector<Conv2dLayer<S>> convs;
  bool final_tanh = false;

  Tensor<S> operator()(const Tensor<S>& frame) const;
  void collect(const std::string& prefix, std::vector<NamedParam<S>>& out) {
    for (size_t i = 0; i < convs.size(); ++i)
      convs[i].collect(prefix + "." + std::to_string(i), out);
  }
};

template <typename S>
FeatureEncoder<S> make_encoder(Rng& rng, int c_in, int c_out, int downsample,
                               bool final_tanh = false);

}  // namespace triflow
