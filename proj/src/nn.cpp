#include "triflow/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace triflow {

namespace {

bool power_of_two(int v) { return v >= 1 && (v & (v - 1)) == 0; }

template <typename S>
Tensor<S> he_normal(Rng& rng, Shape shape, int fan_in) {
  auto t = Tensor<S>::zeros(std::move(shape), /*requires_grad=*/true);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data_mut()) v = static_cast<S>(rng.normal(0.0, stddev));
  return t;
}

// Uniform +-1/sqrt(fan_in). A nonzero bias also keeps relu inputs away from
// the exact kink when a layer sees an all-zero input (the first iteration's
// flow encoder does).
template <typename S>
Tensor<S> uniform_bias(Rng& rng, int c_out, int fan_in) {
  auto t = Tensor<S>::zeros({c_out}, /*requires_grad=*/true);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data_mut()) v = static_cast<S>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace

void validate(const ModelConfig& cfg) {
  auto bad = [](const std::string& what) { throw std::runtime_error("model config: " + what); };
  if (cfg.in_channels < 1) bad("in_channels must be >= 1");
  if (!power_of_two(cfg.downsample) || cfg.downsample < 2) bad("downsample must be a power of two >= 2");
  if (cfg.d_feat < 1 || cfg.d_hidden < 1 || cfg.d_corr < 1 || cfg.d_flow < 1 || cfg.d_motion < 1)
    bad("channel widths must be positive");
  if (cfg.levels < 1 || cfg.radius < 0) bad("levels must be >= 1 and radius >= 0");
  if (!cfg.bidirectional && !cfg.recurrent_fusion)
    bad("recurrent_fusion has no meaning without bidirectional estimation");
}

template <typename S>
Conv2dLayer<S> make_conv(Rng& rng, int c_in, int c_out, int k, int pad, int stride) {
  Conv2dLayer<S> layer;
  layer.weight = he_normal<S>(rng, {c_out, c_in, k, k}, c_in * k * k);
  layer.bias = uniform_bias<S>(rng, c_out, c_in * k * k);
  layer.stride = stride;
  layer.pad = pad;
  return layer;
}

template <typename S>
GateConv<S> make_gate(Rng& rng, int c_in, int c_out, bool large) {
  GateConv<S> gate;
  gate.large = large;
  if (!large) {
    gate.conv = make_conv<S>(rng, c_in, c_out, 3, 1);
  } else {
    gate.dw_weight = he_normal<S>(rng, {c_in, 7, 7}, 49);
    gate.dw_bias = uniform_bias<S>(rng, c_in, 49);
    gate.point = make_conv<S>(rng, c_in, c_out, 1, 0);
  }
  return gate;
}

template <typename S>
Tensor<S> ConvGru<S>::step(const Tensor<S>& hidden, const Tensor<S>& inputs) const {
  auto hx = concat_channels<S>({hidden, inputs});
  auto z = sigmoid(update(hx));
  auto r = sigmoid(reset(hx));
  auto q = tanh(cand(concat_channels<S>({mul(r, hidden), inputs})));
  return add(mul(affine(z, S(-1), S(1)), hidden), mul(z, q));
}

template <typename S>
ConvGru<S> make_gru(Rng& rng, int c_hidden, int c_inputs, bool large) {
  ConvGru<S> cell;
  cell.update = make_gate<S>(rng, c_hidden + c_inputs, c_hidden, large);
  cell.reset = make_gate<S>(rng, c_hidden + c_inputs, c_hidden, large);
  cell.cand = make_gate<S>(rng, c_hidden + c_inputs, c_hidden, large);
  return cell;
}

template <typename S>
FlowHead<S> make_flow_head(Rng& rng, int c_hidden, int c_out) {
  FlowHead<S> head;
  head.expand = make_conv<S>(rng, c_hidden, 2 * c_hidden, 3, 1);
  head.project = make_conv<S>(rng, 2 * c_hidden, c_out, 3, 1);
  return head;
}

template <typename S>
Tensor<S> FeatureEncoder<S>::operator()(const Tensor<S>& frame) const {
  Tensor<S> t = frame;
  for (size_t i = 0; i + 1 < convs.size(); ++i) t = avg_pool2(relu(convs[i](t)));
  t = convs.back()(t);
  return final_tanh ? tanh(t) : t;
}

template <typename S>
FeatureEncoder<S> make_encoder(Rng& rng, int c_in, int c_out, int downsample, bool final_tanh) {
  int pools = 0;
  for (int s = downsample; s > 1; s /= 2) ++pools;
  FeatureEncoder<S> enc;
  enc.final_tanh = final_tanh;
  int prev = c_in;
  for (int i = 0; i < pools; ++i) {
    // Widths ramp linearly from c_out/2 to c_out across the tower.
    const int width = std::max(8, c_out / 2 + (i * (c_out / 2)) / pools);
    const int k = (i == 0) ? 7 : 3;
    enc.convs.push_back(make_conv<S>(rng, prev, width, k, k / 2));
    prev = width;
  }
  enc.convs.push_back(make_conv<S>(rng, prev, c_out, 3, 1));
  return enc;
}

#define TRIFLOW_INSTANTIATE_NN(S)                                         \
  template Conv2dLayer<S> make_conv<S>(Rng&, int, int, int, int, int);    \
  template GateConv<S> make_gate<S>(Rng&, int, int, bool);                \
  template class ConvGru<S>;                                              \
  template ConvGru<S> make_gru<S>(Rng&, int, int, bool);                  \
  template FlowHead<S> make_flow_head<S>(Rng&, int, int);                 \
  template class FeatureEncoder<S>;                                       \
  template FeatureEncoder<S> make_encoder<S>(Rng&, int, int, int, bool);

TRIFLOW_INSTANTIATE_NN(float)
TRIFLOW_INSTANTIATE_NN(double)

}  // namespace triflow
