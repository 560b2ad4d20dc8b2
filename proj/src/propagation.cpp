#include "triflow/propagation.hpp"

#include <algorithm>
#include <stdexcept>

namespace triflow {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace

ClipLayout make_clip_layout(int frame_count) {
  if (frame_count < 3) fail("make_clip_layout: a clip needs at least 3 frames");
  ClipLayout layout;
  layout.frame_count = frame_count;
  for (int t = 1; t + 1 < frame_count; ++t) layout.centers.push_back(t);
  return layout;
}

template <typename S>
ClipModel<S> make_clip_model(Rng& rng, const ModelConfig& cfg) {
  validate(cfg);
  if (!cfg.bidirectional || !cfg.recurrent_fusion)
    fail("make_clip_model: the clip model requires the joint bi-directional core");
  ClipModel<S> model;
  model.cfg = cfg;
  model.core = make_refine_core<S>(rng, cfg);
  const int trunk_in = cfg.d_corr + cfg.d_flow + 3 * cfg.d_motion;
  model.trunk = make_conv<S>(rng, trunk_in, cfg.d_motion, 3, 1);
  model.head_motion = make_conv<S>(rng, cfg.d_motion, cfg.d_motion, 3, 1);
  model.head_state = make_conv<S>(rng, cfg.d_motion, cfg.d_motion, 3, 1);
  model.motion_seed = Tensor<S>::zeros({cfg.d_motion});
  model.motion_seed.set_requires_grad(true);
  return model;
}

template <typename S>
std::vector<NamedParam<S>> named_params(ClipModel<S>& model) {
  std::vector<NamedParam<S>> out;
  model.core.collect("core", out);
  model.trunk.collect("trunk", out);
  model.head_motion.collect("head_motion", out);
  model.head_state.collect("head_state", out);
  out.push_back({"motion_seed", model.motion_seed});
  return out;
}

template <typename S>
Tensor<S> warp_state(const Tensor<S>& neighbor_state, const Tensor<S>& flow) {
  if (neighbor_state.ndim() != 3) fail("warp_state: state must be [C,h,w]");
  const int h = neighbor_state.dim(1), w = neighbor_state.dim(2);
  if (flow.ndim() != 3 || flow.dim(0) != 2 || flow.dim(1) != h || flow.dim(2) != w)
    fail("warp_state: flow must be [2,h,w] matching the state");
  return bilinear_sample(neighbor_state, add(coord_grid<S>(h, w), flow));
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> motion_encode_prop(const ClipModel<S>& model,
                                                   const Tensor<S>& f_corr,
                                                   const Tensor<S>& f_flow,
                                                   const Tensor<S>& m_self, const Tensor<S>& m_fwd,
                                                   const Tensor<S>& m_bwd) {
  auto t = relu(model.trunk(concat_channels<S>({f_corr, f_flow, m_self, m_fwd, m_bwd})));
  return {model.head_motion(t), model.head_state(t)};
}

namespace {

template <typename S>
void check_clip_frames(const ModelConfig& cfg, std::span<const Tensor<S>> frames) {
  if (frames.size() < 3) fail("clip_forward: a clip needs at least 3 frames");
  const auto& shape = frames[0].shape();
  for (const auto& f : frames)
    if (f.ndim() != 3 || f.shape() != shape) fail("clip_forward: frames must share one [C,H,W] shape");
  if (shape[0] != cfg.in_channels) fail("clip_forward: channel count does not match the model");
  if (shape[1] % cfg.downsample != 0 || shape[2] % cfg.downsample != 0)
    fail("clip_forward: frame size must be divisible by the feature stride");
}

// The per-iteration body shared verbatim by clip_forward and the isolated
// reference path: lookup, encode, trunk, recurrent update, flow residual.
template <typename S>
struct UnitStep {
  Tensor<S> hidden, f_prev, f_next, next_state;
  FlowPair<S> delta;
};

template <typename S>
UnitStep<S> unit_step(const ClipModel<S>& model, const DualCorrelationVolume<S>& vol,
                      const LookupWindowSpec& spec, const Tensor<S>& context,
                      const Tensor<S>& hidden, const Tensor<S>& f_prev, const Tensor<S>& f_next,
                      const Tensor<S>& m_self, const Tensor<S>& m_fwd, const Tensor<S>& m_bwd) {
  auto looked = lookup(vol, {f_prev, f_next}, spec);
  auto f_corr = corr_encode(model.core, concat_channels<S>({looked.c_prev, looked.c_next}));
  auto f_flow = flow_encode(model.core, concat_channels<S>({f_prev, f_next}));
  auto [f_motion, next_state] = motion_encode_prop(model, f_corr, f_flow, m_self, m_fwd, m_bwd);
  auto up = update_step(model.core, f_motion, context, hidden);
  UnitStep<S> step;
  step.hidden = up.hidden;
  step.delta = {slice_channels(up.delta, 0, 2), slice_channels(up.delta, 2, 4)};
  step.f_prev = add(f_prev, step.delta.prev);
  step.f_next = add(f_next, step.delta.next);
  step.next_state = next_state;
  return step;
}

}  // namespace

template <typename S>
std::vector<UnitPrediction<S>> clip_forward(const ClipModel<S>& model,
                                            std::span<const Tensor<S>> frames,
                                            const ClipForwardOptions& opts) {
  const auto& cfg = model.cfg;
  check_clip_frames(cfg, frames);
  if (opts.iters < 1) fail("clip_forward: need at least one iteration");
  const auto layout = make_clip_layout(static_cast<int>(frames.size()));
  const int units = layout.units();

  std::vector<int> order = opts.unit_order;
  if (order.empty()) {
    order.resize(units);
    for (int u = 0; u < units; ++u) order[u] = u;
  } else {
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    bool perm = static_cast<int>(sorted.size()) == units;
    for (int u = 0; perm && u < units; ++u) perm = sorted[u] == u;
    if (!perm) fail("clip_forward: unit_order must be a permutation of the units");
  }

  // Shared encodings: every frame's matching features once, plus context and
  // a dual correlation volume per unit.
  std::vector<Tensor<S>> feats;
  feats.reserve(frames.size());
  for (const auto& f : frames) feats.push_back(model.core.feature(f));
  const int h = feats[0].dim(1), w = feats[0].dim(2);
  const LookupWindowSpec spec{cfg.levels, cfg.radius};

  std::vector<Tensor<S>> contexts(units), hidden(units), f_prev(units), f_next(units);
  std::vector<DualCorrelationVolume<S>> vols;
  vols.reserve(units);
  std::vector<MotionState<S>> states(units);
  auto seed_map = expand_spatial(model.motion_seed, h, w);
  std::vector<UnitPrediction<S>> preds(units);
  for (int u = 0; u < units; ++u) {
    const int t = layout.centers[u];
    contexts[u] = model.core.context(frames[t]);
    hidden[u] = contexts[u];
    f_prev[u] = Tensor<S>::zeros({2, h, w});
    f_next[u] = Tensor<S>::zeros({2, h, w});
    vols.push_back(build_dual_corr(feats[t], feats[t - 1], feats[t + 1], cfg.levels,
                                   cfg.corr_normalize));
    states[u] = {seed_map, t, 0};
    preds[u].center = t;
  }

  for (int k = 0; k < opts.iters; ++k) {
    // All units read iteration-k states; the k+1 states land in `staged` and
    // are committed together once the sweep finishes.
    std::vector<Tensor<S>> staged(units);
    for (int idx = 0; idx < units; ++idx) {
      const int u = order[idx];
      Tensor<S> m_bwd = seed_map, m_fwd = seed_map;
      if (cfg.propagation) {
        if (u > 0) m_bwd = warp_state(states[u - 1].state, f_prev[u]);
        if (u + 1 < units) m_fwd = warp_state(states[u + 1].state, f_next[u]);
      }
      auto step = unit_step(model, vols[u], spec, contexts[u], hidden[u], f_prev[u], f_next[u],
                            states[u].state, m_fwd, m_bwd);
      hidden[u] = step.hidden;
      f_prev[u] = step.f_prev;
      f_next[u] = step.f_next;
      staged[u] = step.next_state;
      preds[u].flows_feat.push_back({f_prev[u], f_next[u]});
      preds[u].deltas.push_back(step.delta);
    }
    for (int u = 0; u < units; ++u) states[u] = {staged[u], layout.centers[u], k + 1};
  }

  for (auto& pred : preds)
    for (const auto& fp : pred.flows_feat)
      pred.flows_img.push_back(
          {upsample_flow(fp.prev, cfg.downsample), upsample_flow(fp.next, cfg.downsample)});
  return preds;
}

template <typename S>
UnitPrediction<S> single_unit_forward(const ClipModel<S>& model, std::span<const Tensor<S>> frames,
                                      int iters) {
  const auto& cfg = model.cfg;
  if (frames.size() != 3) fail("single_unit_forward: expected exactly 3 frames");
  check_clip_frames(cfg, frames);
  if (iters < 1) fail("single_unit_forward: need at least one iteration");

  auto feat_prev = model.core.feature(frames[0]);
  auto feat_center = model.core.feature(frames[1]);
  auto feat_next = model.core.feature(frames[2]);
  auto context = model.core.context(frames[1]);
  auto vol = build_dual_corr(feat_center, feat_prev, feat_next, cfg.levels, cfg.corr_normalize);
  const LookupWindowSpec spec{cfg.levels, cfg.radius};
  const int h = context.dim(1), w = context.dim(2);

  auto seed_map = expand_spatial(model.motion_seed, h, w);
  auto m_self = seed_map;
  auto hidden = context;
  auto f_prev = Tensor<S>::zeros({2, h, w});
  auto f_next = Tensor<S>::zeros({2, h, w});
  UnitPrediction<S> pred;
  pred.center = 1;
  for (int k = 0; k < iters; ++k) {
    auto step =
        unit_step(model, vol, spec, context, hidden, f_prev, f_next, m_self, seed_map, seed_map);
    hidden = step.hidden;
    f_prev = step.f_prev;
    f_next = step.f_next;
    m_self = step.next_state;
    pred.flows_feat.push_back({f_prev, f_next});
    pred.deltas.push_back(step.delta);
  }
  for (const auto& fp : pred.flows_feat)
    pred.flows_img.push_back(
        {upsample_flow(fp.prev, cfg.downsample), upsample_flow(fp.next, cfg.downsample)});
  return pred;
}

#define TRIFLOW_INSTANTIATE_PROP(S)                                                             \
  template ClipModel<S> make_clip_model<S>(Rng&, const ModelConfig&);                           \
  template std::vector<NamedParam<S>> named_params<S>(ClipModel<S>&);                           \
  template Tensor<S> warp_state<S>(const Tensor<S>&, const Tensor<S>&);                         \
  template std::pair<Tensor<S>, Tensor<S>> motion_encode_prop<S>(                               \
      const ClipModel<S>&, const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,                \
      const Tensor<S>&, const Tensor<S>&);                                                      \
  template std::vector<UnitPrediction<S>> clip_forward<S>(                                      \
      const ClipModel<S>&, std::span<const Tensor<S>>, const ClipForwardOptions&);              \
  template UnitPrediction<S> single_unit_forward<S>(const ClipModel<S>&,                        \
                                                    std::span<const Tensor<S>>, int);

TRIFLOW_INSTANTIATE_PROP(float)
TRIFLOW_INSTANTIATE_PROP(double)

}  // namespace triflow
