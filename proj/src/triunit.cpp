#include "triflow/triunit.hpp"

#include <stdexcept>

namespace triflow {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace

template <typename S>
RefineCore<S> make_refine_core(Rng& rng, const ModelConfig& cfg) {
  validate(cfg);
  // The joint path encodes both directions together; the other two modes run
  // the encoders once per direction.
  const bool joint = cfg.bidirectional && cfg.recurrent_fusion;
  const int dirs = joint ? 2 : 1;
  RefineCore<S> core;
  core.feature = make_encoder<S>(rng, cfg.in_channels, cfg.d_feat, cfg.downsample);
  core.context = make_encoder<S>(rng, cfg.in_channels, cfg.d_hidden, cfg.downsample, true);
  core.corr_a = make_conv<S>(rng, dirs * cfg.lookup_channels_per_direction(), cfg.d_corr, 1, 0);
  core.corr_b = make_conv<S>(rng, cfg.d_corr, cfg.d_corr, 3, 1);
  core.flow_a = make_conv<S>(rng, dirs * 2, cfg.d_flow, 3, 1);
  core.flow_b = make_conv<S>(rng, cfg.d_flow, cfg.d_flow, 3, 1);
  core.gru = make_gru<S>(rng, cfg.d_hidden, cfg.d_motion + cfg.d_hidden, cfg.large_kernel_updater);
  core.head = make_flow_head<S>(rng, cfg.d_hidden, cfg.bidirectional ? 4 : 2);
  return core;
}

template <typename S>
TriModel<S> make_tri_model(Rng& rng, const ModelConfig& cfg) {
  TriModel<S> model;
  model.cfg = cfg;
  model.core = make_refine_core<S>(rng, cfg);
  model.motion = make_conv<S>(rng, cfg.d_corr + cfg.d_flow, cfg.d_motion, 3, 1);
  if (cfg.bidirectional && !cfg.recurrent_fusion)
    model.fuse = make_conv<S>(rng, 2 * cfg.d_motion, cfg.d_motion, 1, 0);
  return model;
}

template <typename S>
std::vector<NamedParam<S>> named_params(TriModel<S>& model) {
  std::vector<NamedParam<S>> out;
  model.core.collect("core", out);
  model.motion.collect("motion", out);
  if (model.fuse.defined()) model.fuse.collect("fuse", out);
  return out;
}

template <typename S>
EncodedTriplet<S> encode_features(const TriModel<S>& model, std::span<const Tensor<S>> frames) {
  if (frames.size() != 3) fail("encode_features: expected exactly 3 frames");
  const auto& cfg = model.cfg;
  const auto& shape = frames[0].shape();
  for (const auto& f : frames) {
    if (f.ndim() != 3 || f.shape() != shape) fail("encode_features: frames must share one [C,H,W] shape");
  }
  if (shape[0] != cfg.in_channels) fail("encode_features: channel count does not match the model");
  if (shape[1] % cfg.downsample != 0 || shape[2] % cfg.downsample != 0)
    fail("encode_features: frame size must be divisible by the feature stride");
  EncodedTriplet<S> enc;
  enc.prev = model.core.feature(frames[0]);
  enc.center = model.core.feature(frames[1]);
  enc.next = model.core.feature(frames[2]);
  enc.context = model.core.context(frames[1]);
  return enc;
}

template <typename S>
Tensor<S> corr_encode(const RefineCore<S>& core, const Tensor<S>& looked_up) {
  return relu(core.corr_b(relu(core.corr_a(looked_up))));
}

template <typename S>
Tensor<S> flow_encode(const RefineCore<S>& core, const Tensor<S>& flow) {
  return relu(core.flow_b(relu(core.flow_a(flow))));
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> corr_flow_encode(const TriModel<S>& model, const Tensor<S>& c_prev,
                                                 const Tensor<S>& c_next,
                                                 const FlowPair<S>& flows) {
  auto f_corr = corr_encode(model.core, concat_channels<S>({c_prev, c_next}));
  auto f_flow = flow_encode(model.core, concat_channels<S>({flows.prev, flows.next}));
  return {f_corr, f_flow};
}

template <typename S>
Tensor<S> motion_encode_tri(const TriModel<S>& model, const Tensor<S>& f_corr,
                            const Tensor<S>& f_flow) {
  return relu(model.motion(concat_channels<S>({f_corr, f_flow})));
}

template <typename S>
UpdateResult<S> update_step(const RefineCore<S>& core, const Tensor<S>& f_motion,
                            const Tensor<S>& context, const Tensor<S>& hidden) {
  auto next = core.gru.step(hidden, concat_channels<S>({f_motion, context}));
  return {next, core.head(next)};
}

template <typename S>
Tensor<S> upsample_flow(const Tensor<S>& flow, int factor) {
  if (flow.ndim() != 3 || flow.dim(0) != 2) fail("upsample_flow: expected a [2,h,w] flow");
  if (factor < 1) fail("upsample_flow: factor must be >= 1");
  if (factor == 1) return flow;
  const int h = flow.dim(1), w = flow.dim(2);
  const int ho = h * factor, wo = w * factor;
  // Feature cell i covers image rows [i*factor, (i+1)*factor); sample each
  // image pixel at the matching fractional feature coordinate.
  auto grid = Tensor<S>::zeros({2, ho, wo});
  auto g = grid.data_mut();
  const S off = S(factor - 1) / S(2);
  for (int y = 0; y < ho; ++y) {
    for (int x = 0; x < wo; ++x) {
      g[y * wo + x] = (S(x) - off) / S(factor);
      g[ho * wo + y * wo + x] = (S(y) - off) / S(factor);
    }
  }
  return affine(bilinear_sample(flow, grid), S(factor), S(0));
}

namespace {

// Motion features of one direction for the modes that encode directions
// separately (single-direction passes and the late-fusion ablation).
template <typename S>
Tensor<S> direction_motion(const TriModel<S>& model, const DualCorrelationVolume<S>& vol,
                           const Tensor<S>& flow, bool next_direction,
                           const LookupWindowSpec& spec) {
  auto looked = lookup_dir(vol, flow, next_direction, spec);
  auto f_corr = corr_encode(model.core, looked);
  auto f_flow = flow_encode(model.core, flow);
  return relu(model.motion(concat_channels<S>({f_corr, f_flow})));
}

// One complete single-direction refinement (used twice when the directions
// are fully independent).
template <typename S>
std::pair<std::vector<Tensor<S>>, std::vector<Tensor<S>>> refine_one_direction(
    const TriModel<S>& model, const DualCorrelationVolume<S>& vol, const Tensor<S>& context,
    bool next_direction, int iters, const LookupWindowSpec& spec) {
  const int h = context.dim(1), w = context.dim(2);
  auto flow = Tensor<S>::zeros({2, h, w});
  auto hidden = context;
  std::vector<Tensor<S>> flows, deltas;
  for (int k = 0; k < iters; ++k) {
    auto f_motion = direction_motion(model, vol, flow, next_direction, spec);
    auto up = update_step(model.core, f_motion, context, hidden);
    hidden = up.hidden;
    flow = add(flow, up.delta);
    flows.push_back(flow);
    deltas.push_back(up.delta);
  }
  return {flows, deltas};
}

}  // namespace

template <typename S>
UnitPrediction<S> tri_forward(const TriModel<S>& model, std::span<const Tensor<S>> frames,
                              int iters) {
  if (iters < 1) fail("tri_forward: need at least one iteration");
  const auto& cfg = model.cfg;
  auto enc = encode_features(model, frames);
  auto vol = build_dual_corr(enc.center, enc.prev, enc.next, cfg.levels, cfg.corr_normalize);
  const LookupWindowSpec spec{cfg.levels, cfg.radius};
  const int h = enc.context.dim(1), w = enc.context.dim(2);

  UnitPrediction<S> pred;
  pred.center = 1;
  if (!cfg.bidirectional) {
    auto [flows_p, deltas_p] = refine_one_direction(model, vol, enc.context, false, iters, spec);
    auto [flows_n, deltas_n] = refine_one_direction(model, vol, enc.context, true, iters, spec);
    for (int k = 0; k < iters; ++k) {
      pred.flows_feat.push_back({flows_p[k], flows_n[k]});
      pred.deltas.push_back({deltas_p[k], deltas_n[k]});
    }
  } else {
    auto f_prev = Tensor<S>::zeros({2, h, w});
    auto f_next = Tensor<S>::zeros({2, h, w});
    auto hidden = enc.context;
    for (int k = 0; k < iters; ++k) {
      Tensor<S> f_motion;
      if (cfg.recurrent_fusion) {
        auto looked = lookup(vol, {f_prev, f_next}, spec);
        auto [f_corr, f_flow] =
            corr_flow_encode(model, looked.c_prev, looked.c_next, {f_prev, f_next});
        f_motion = motion_encode_tri(model, f_corr, f_flow);
      } else {
        auto m_prev = direction_motion(model, vol, f_prev, false, spec);
        auto m_next = direction_motion(model, vol, f_next, true, spec);
        f_motion = relu(model.fuse(concat_channels<S>({m_prev, m_next})));
      }
      auto up = update_step(model.core, f_motion, enc.context, hidden);
      hidden = up.hidden;
      auto d_prev = slice_channels(up.delta, 0, 2);
      auto d_next = slice_channels(up.delta, 2, 4);
      f_prev = add(f_prev, d_prev);
      f_next = add(f_next, d_next);
      pred.flows_feat.push_back({f_prev, f_next});
      pred.deltas.push_back({d_prev, d_next});
    }
  }
  for (const auto& fp : pred.flows_feat)
    pred.flows_img.push_back(
        {upsample_flow(fp.prev, cfg.downsample), upsample_flow(fp.next, cfg.downsample)});
  return pred;
}

#define TRIFLOW_INSTANTIATE_TRIUNIT(S)                                                          \
  template RefineCore<S> make_refine_core<S>(Rng&, const ModelConfig&);                         \
  template TriModel<S> make_tri_model<S>(Rng&, const ModelConfig&);                             \
  template std::vector<NamedParam<S>> named_params<S>(TriModel<S>&);                            \
  template EncodedTriplet<S> encode_features<S>(const TriModel<S>&, std::span<const Tensor<S>>); \
  template Tensor<S> corr_encode<S>(const RefineCore<S>&, const Tensor<S>&);                    \
  template Tensor<S> flow_encode<S>(const RefineCore<S>&, const Tensor<S>&);                    \
  template std::pair<Tensor<S>, Tensor<S>> corr_flow_encode<S>(                                 \
      const TriModel<S>&, const Tensor<S>&, const Tensor<S>&, const FlowPair<S>&);              \
  template Tensor<S> motion_encode_tri<S>(const TriModel<S>&, const Tensor<S>&,                 \
                                          const Tensor<S>&);                                    \
  template UpdateResult<S> update_step<S>(const RefineCore<S>&, const Tensor<S>&,               \
                                          const Tensor<S>&, const Tensor<S>&);                  \
  template Tensor<S> upsample_flow<S>(const Tensor<S>&, int);                                   \
  template UnitPrediction<S> tri_forward<S>(const TriModel<S>&, std::span<const Tensor<S>>, int);

TRIFLOW_INSTANTIATE_TRIUNIT(float)
TRIFLOW_INSTANTIATE_TRIUNIT(double)

}  // namespace triflow
