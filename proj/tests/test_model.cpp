#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "triflow/gradcheck.hpp"
#include "triflow/propagation.hpp"
#include "triflow/rng.hpp"
#include "triflow/threading.hpp"
#include "triflow/triunit.hpp"

using namespace triflow;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.in_channels = 1;
  cfg.downsample = 2;
  cfg.d_feat = 12;
  cfg.d_hidden = 10;
  cfg.d_corr = 12;
  cfg.d_flow = 8;
  cfg.d_motion = 10;
  cfg.levels = 2;
  cfg.radius = 1;
  return cfg;
}

template <typename S>
Tensor<S> rand_frame(Rng& rng, int h, int w, int c = 1) {
  auto t = Tensor<S>::zeros({c, h, w});
  fill_uniform(t, rng, S(0), S(1));
  return t;
}

template <typename S>
std::vector<Tensor<S>> rand_frames(Rng& rng, int count, int h, int w) {
  std::vector<Tensor<S>> frames;
  for (int i = 0; i < count; ++i) frames.push_back(rand_frame<S>(rng, h, w));
  return frames;
}

template <typename S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) return false;
  for (size_t i = 0; i < a.data().size(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

template <typename S>
bool bitwise_equal(const FlowPair<S>& a, const FlowPair<S>& b) {
  return bitwise_equal(a.prev, b.prev) && bitwise_equal(a.next, b.next);
}

template <typename S>
bool same_predictions(const UnitPrediction<S>& a, const UnitPrediction<S>& b) {
  if (a.flows_feat.size() != b.flows_feat.size()) return false;
  for (size_t k = 0; k < a.flows_feat.size(); ++k) {
    if (!bitwise_equal(a.flows_feat[k], b.flows_feat[k])) return false;
    if (!bitwise_equal(a.flows_img[k], b.flows_img[k])) return false;
    if (!bitwise_equal(a.deltas[k], b.deltas[k])) return false;
  }
  return true;
}

template <typename S>
void zero_out(Tensor<S>& t) {
  for (auto& v : t.data_mut()) v = S(0);
}

template <typename S>
bool has_nonzero_grad(const Tensor<S>& t) {
  if (!t.has_grad()) return false;
  for (auto v : t.grad()) {
    if (v != S(0)) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("encoders produce the configured shapes and a bounded context") {
  Rng rng(31);
  auto enc = make_encoder<float>(rng, 1, 16, 4);      // 3 convs for s=4
  auto ctx = make_encoder<float>(rng, 1, 16, 4, true);
  CHECK(enc.convs.size() == 3);
  auto frame = rand_frame<float>(rng, 16, 16);
  auto feat = enc(frame);
  CHECK(feat.shape() == Shape{16, 4, 4});
  auto g = ctx(frame);
  CHECK(g.shape() == Shape{16, 4, 4});
  for (float v : g.data()) {
    CHECK(v > -1.0f);
    CHECK(v < 1.0f);
  }
}

TEST_CASE("shared feature weights: identical frames match, swapped neighbors swap") {
  Rng rng(32);
  auto model = make_tri_model<float>(rng, tiny_cfg());
  auto a = rand_frame<float>(rng, 8, 8);
  auto b = rand_frame<float>(rng, 8, 8);
  auto c = rand_frame<float>(rng, 8, 8);

  std::vector<Tensor<float>> same{a, a, a};
  auto enc = encode_features<float>(model, same);
  CHECK(bitwise_equal(enc.prev, enc.center));
  CHECK(bitwise_equal(enc.next, enc.center));

  std::vector<Tensor<float>> fwd{a, b, c}, rev{c, b, a};
  auto e1 = encode_features<float>(model, fwd);
  auto e2 = encode_features<float>(model, rev);
  CHECK(bitwise_equal(e1.prev, e2.next));
  CHECK(bitwise_equal(e1.next, e2.prev));
  CHECK(bitwise_equal(e1.center, e2.center));
  CHECK(bitwise_equal(e1.context, e2.context));
}

TEST_CASE("refinement loop: prediction count, shapes, telescoping residuals") {
  Rng rng(33);
  auto cfg = tiny_cfg();
  auto model = make_tri_model<double>(rng, cfg);
  auto frames = rand_frames<double>(rng, 3, 8, 8);
  const int iters = 3;
  auto pred = tri_forward<double>(model, frames, iters);

  CHECK(pred.flows_feat.size() == iters);
  CHECK(pred.flows_img.size() == iters);
  CHECK(pred.deltas.size() == iters);
  CHECK(pred.flows_feat[0].prev.shape() == Shape{2, 4, 4});
  CHECK(pred.flows_img[0].next.shape() == Shape{2, 8, 8});

  // f^k - f^{k-1} must reproduce the emitted residual.
  for (int k = 0; k < iters; ++k) {
    const auto& cur = pred.flows_feat[k];
    for (int d = 0; d < 2; ++d) {
      const auto& flow = d == 0 ? cur.prev : cur.next;
      const auto& delta = d == 0 ? pred.deltas[k].prev : pred.deltas[k].next;
      for (size_t i = 0; i < flow.data().size(); ++i) {
        const double before = k == 0 ? 0.0 : (d == 0 ? pred.flows_feat[k - 1].prev
                                                     : pred.flows_feat[k - 1].next)
                                                .data()[i];
        CHECK(flow.data()[i] - before == doctest::Approx(delta.data()[i]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("hidden state stays inside (-1,1) through the update pipeline") {
  Rng rng(34);
  auto cfg = tiny_cfg();
  auto model = make_tri_model<float>(rng, cfg);
  auto frames = rand_frames<float>(rng, 3, 8, 8);
  auto enc = encode_features<float>(model, frames);
  auto vol = build_dual_corr(enc.center, enc.prev, enc.next, cfg.levels, cfg.corr_normalize);
  const LookupWindowSpec spec{cfg.levels, cfg.radius};

  auto f_prev = Tensor<float>::zeros({2, 4, 4});
  auto f_next = Tensor<float>::zeros({2, 4, 4});
  auto hidden = enc.context;
  for (int k = 0; k < 4; ++k) {
    auto looked = lookup(vol, {f_prev, f_next}, spec);
    auto [f_corr, f_flow] = corr_flow_encode<float>(model, looked.c_prev, looked.c_next,
                                                    {f_prev, f_next});
    auto f_motion = motion_encode_tri<float>(model, f_corr, f_flow);
    CHECK(f_motion.dim(0) == cfg.d_motion);
    auto up = update_step<float>(model.core, f_motion, enc.context, hidden);
    hidden = up.hidden;
    for (float v : hidden.data()) {
      CHECK(v > -1.0f);
      CHECK(v < 1.0f);
    }
    f_prev = add(f_prev, slice_channels(up.delta, 0, 2));
    f_next = add(f_next, slice_channels(up.delta, 2, 4));
  }
}

TEST_CASE("zero flow head freezes the estimate at zero") {
  Rng rng(35);
  auto model = make_tri_model<float>(rng, tiny_cfg());
  zero_out(model.core.head.project.weight);
  zero_out(model.core.head.project.bias);
  auto frames = rand_frames<float>(rng, 3, 8, 8);
  auto pred = tri_forward<float>(model, frames, 3);
  for (const auto& fp : pred.flows_feat) {
    for (float v : fp.prev.data()) CHECK(v == 0.0f);
    for (float v : fp.next.data()) CHECK(v == 0.0f);
  }
  for (const auto& fp : pred.flows_img) {
    for (float v : fp.prev.data()) CHECK(v == 0.0f);
    for (float v : fp.next.data()) CHECK(v == 0.0f);
  }
}

TEST_CASE("first prediction reacts to a perturbation of any of the three frames") {
  Rng rng(36);
  auto model = make_tri_model<float>(rng, tiny_cfg());
  auto frames = rand_frames<float>(rng, 3, 8, 8);
  auto base = tri_forward<float>(model, frames, 1);
  for (int j = 0; j < 3; ++j) {
    auto bumped = frames;
    bumped[j] = add(frames[j], Tensor<float>::full({1, 8, 8}, 0.25f));
    auto pred = tri_forward<float>(model, bumped, 1);
    CHECK_FALSE(bitwise_equal(pred.flows_feat[0], base.flows_feat[0]));
  }
}

TEST_CASE("upsampling keeps constant flows constant and scales them") {
  Rng rng(37);
  auto flow = Tensor<float>::zeros({2, 3, 4});
  for (size_t i = 0; i < 12; ++i) flow.data_mut()[i] = 0.5f;       // u
  for (size_t i = 12; i < 24; ++i) flow.data_mut()[i] = -1.25f;    // v
  auto up = upsample_flow(flow, 4);
  CHECK(up.shape() == Shape{2, 12, 16});
  for (size_t i = 0; i < 192; ++i) CHECK(up.data()[i] == doctest::Approx(2.0).epsilon(1e-6));
  for (size_t i = 192; i < 384; ++i) CHECK(up.data()[i] == doctest::Approx(-5.0).epsilon(1e-6));
  auto same = upsample_flow(flow, 1);
  CHECK(bitwise_equal(same, flow));
}

TEST_CASE("ablated variants run, with the expected heads and parameters") {
  Rng rng(38);
  auto frames = rand_frames<float>(rng, 3, 8, 8);

  auto uni_cfg = tiny_cfg();
  uni_cfg.bidirectional = false;
  auto uni = make_tri_model<float>(rng, uni_cfg);
  CHECK(uni.core.head.out_channels() == 2);
  CHECK_FALSE(uni.fuse.defined());
  auto uni_pred = tri_forward<float>(uni, frames, 2);
  CHECK(uni_pred.flows_feat.size() == 2);
  CHECK(uni_pred.flows_feat[1].prev.shape() == Shape{2, 4, 4});

  auto late_cfg = tiny_cfg();
  late_cfg.recurrent_fusion = false;
  auto late = make_tri_model<float>(rng, late_cfg);
  CHECK(late.core.head.out_channels() == 4);
  CHECK(late.fuse.defined());
  auto late_pred = tri_forward<float>(late, frames, 2);
  CHECK(late_pred.flows_feat.size() == 2);

  // Config with neither direction handling makes no sense and must throw.
  auto bad = tiny_cfg();
  bad.bidirectional = false;
  bad.recurrent_fusion = false;
  CHECK_THROWS(make_tri_model<float>(rng, bad));
}

TEST_CASE("every parameter group receives gradient from the iterated loss") {
  Rng rng(39);
  auto cfg = tiny_cfg();
  auto model = make_tri_model<double>(rng, cfg);
  auto frames = rand_frames<double>(rng, 3, 8, 8);
  auto pred = tri_forward<double>(model, frames, 2);
  Tensor<double> loss;
  for (const auto& fp : pred.flows_feat) {
    auto term = add(mean_all(abs(fp.prev)), mean_all(abs(fp.next)));
    loss = loss.defined() ? add(loss, term) : term;
  }
  backward(loss);
  for (auto& p : named_params(model)) {
    INFO(p.name);
    CHECK(has_nonzero_grad(p.tensor));
  }
}

TEST_CASE("full-unit gradients match finite differences") {
  set_thread_count(1);
  Rng rng(40);
  ModelConfig cfg = tiny_cfg();
  cfg.d_feat = 6;
  cfg.d_hidden = 6;
  cfg.d_corr = 6;
  cfg.d_flow = 4;
  cfg.d_motion = 6;
  cfg.levels = 1;
  auto model = make_tri_model<double>(rng, cfg);
  // Push the first residual to a generic fraction of a pixel; near-zero flows
  // park the bilinear lookups right at their integer-grid kinks, where finite
  // differences are meaningless.
  fill_uniform(model.core.head.project.weight, rng, -0.02, 0.02);
  fill_uniform(model.core.head.project.bias, rng, 0.25, 0.45);
  std::vector<Tensor<double>> frames;
  for (int i = 0; i < 3; ++i) {
    auto f = rand_frame<double>(rng, 6, 6);
    f.set_requires_grad(true);
    frames.push_back(f);
  }
  std::vector<Tensor<double>> leaves = frames;
  for (auto& p : named_params(model)) leaves.push_back(p.tensor);

  GradCheckOptions opts;
  opts.step = 1e-4;
  opts.max_probes_per_tensor = 3;
  auto result = check_gradients(leaves, [&]() {
    auto pred = tri_forward<double>(model, frames, 2);
    Tensor<double> loss;
    for (const auto& fp : pred.flows_feat) {
      auto term = add(mean_all(abs(fp.prev)), mean_all(abs(fp.next)));
      loss = loss.defined() ? add(loss, term) : term;
    }
    return loss;
  }, opts);
  INFO(result.worst, " rel=", result.max_rel_err, " abs=", result.max_abs_err_small);
  CHECK(result.ok(2e-4, 1e-6));
}

TEST_CASE("clip layout enumerates interior centers") {
  CHECK_THROWS(make_clip_layout(2));
  auto l3 = make_clip_layout(3);
  CHECK(l3.units() == 1);
  CHECK(l3.centers == std::vector<int>{1});
  auto l5 = make_clip_layout(5);
  CHECK(l5.units() == 3);
  CHECK(l5.centers == std::vector<int>{1, 2, 3});
}

TEST_CASE("state warping: identity at zero flow, integer shift, constant fields") {
  Rng rng(41);
  auto state = Tensor<float>::zeros({3, 4, 5});
  fill_uniform(state, rng, -1.0f, 1.0f);

  auto zero = Tensor<float>::zeros({2, 4, 5});
  CHECK(bitwise_equal(warp_state(state, zero), state));

  auto shift = Tensor<float>::zeros({2, 4, 5});
  for (int i = 0; i < 20; ++i) shift.data_mut()[i] = 1.0f;  // (u,v) = (1,0)
  auto shifted = warp_state(state, shift);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x) {
        const int sx = std::min(x + 1, 4);
        CHECK(shifted.data()[(c * 4 + y) * 5 + x] ==
              doctest::Approx(state.data()[(c * 4 + y) * 5 + sx]));
      }

  auto constant = Tensor<float>::full({3, 4, 5}, 0.75f);
  auto wild = Tensor<float>::zeros({2, 4, 5});
  fill_uniform(wild, rng, -3.0f, 3.0f);
  auto warped = warp_state(constant, wild);
  for (float v : warped.data()) CHECK(v == doctest::Approx(0.75f));
}

TEST_CASE("motion trunk: widths, zero-weight constancy, gradients into all states") {
  Rng rng(42);
  auto cfg = tiny_cfg();
  auto model = make_clip_model<double>(rng, cfg);
  const int h = 4, w = 4;
  auto mk = [&](int c) {
    auto t = Tensor<double>::zeros({c, h, w});
    fill_uniform(t, rng, -1.0, 1.0);
    t.set_requires_grad(true);
    return t;
  };
  auto f_corr = mk(cfg.d_corr);
  auto f_flow = mk(cfg.d_flow);
  auto m_self = mk(cfg.d_motion);
  auto m_fwd = mk(cfg.d_motion);
  auto m_bwd = mk(cfg.d_motion);

  auto [f_m, m_next] = motion_encode_prop<double>(model, f_corr, f_flow, m_self, m_fwd, m_bwd);
  CHECK(f_m.shape() == Shape{cfg.d_motion, h, w});
  CHECK(m_next.shape() == Shape{cfg.d_motion, h, w});

  backward(add(sum_all(f_m), sum_all(m_next)));
  CHECK(has_nonzero_grad(m_self));
  CHECK(has_nonzero_grad(m_fwd));
  CHECK(has_nonzero_grad(m_bwd));

  // All weights zero: only the head biases can reach the outputs.
  auto frozen = model;
  zero_out(frozen.trunk.weight);
  zero_out(frozen.head_motion.weight);
  zero_out(frozen.head_state.weight);
  auto [c1, c2] = motion_encode_prop<double>(frozen, f_corr, f_flow, m_self, m_fwd, m_bwd);
  for (int c = 0; c < cfg.d_motion; ++c)
    for (int i = 0; i < h * w; ++i) {
      CHECK(c1.data()[c * h * w + i] == frozen.head_motion.bias.data()[c]);
      CHECK(c2.data()[c * h * w + i] == frozen.head_state.bias.data()[c]);
    }
}

TEST_CASE("a 3-frame clip reduces exactly to the isolated unit") {
  Rng rng(43);
  auto model = make_clip_model<float>(rng, tiny_cfg());
  auto frames = rand_frames<float>(rng, 3, 8, 8);
  ClipForwardOptions opts;
  opts.iters = 3;
  auto clip = clip_forward<float>(model, frames, opts);
  REQUIRE(clip.size() == 1);
  auto solo = single_unit_forward<float>(model, frames, 3);
  CHECK(clip[0].center == 1);
  CHECK(same_predictions(clip[0], solo));

  // Propagation has nothing to warp on a single unit: toggling it is a no-op.
  auto off = model;
  off.cfg.propagation = false;
  auto off_run = clip_forward<float>(off, frames, opts);
  CHECK(same_predictions(off_run[0], clip[0]));
}

TEST_CASE("unit visit order inside an iteration cannot change the result") {
  Rng rng(44);
  auto model = make_clip_model<float>(rng, tiny_cfg());
  auto frames = rand_frames<float>(rng, 5, 8, 8);
  ClipForwardOptions a, b, c;
  a.iters = b.iters = c.iters = 2;
  b.unit_order = {2, 1, 0};
  c.unit_order = {1, 2, 0};
  auto ra = clip_forward<float>(model, frames, a);
  auto rb = clip_forward<float>(model, frames, b);
  auto rc = clip_forward<float>(model, frames, c);
  REQUIRE(ra.size() == 3);
  for (size_t u = 0; u < ra.size(); ++u) {
    CHECK(same_predictions(ra[u], rb[u]));
    CHECK(same_predictions(ra[u], rc[u]));
  }
  ClipForwardOptions bad;
  bad.unit_order = {0, 0, 2};
  CHECK_THROWS(clip_forward<float>(model, frames, bad));
}

TEST_CASE("zeroing the trunk's neighbor channels isolates every unit") {
  Rng rng(45);
  auto cfg = tiny_cfg();
  auto model = make_clip_model<float>(rng, cfg);
  // Input layout of the trunk: [corr | flow | self | fwd | bwd].
  const int k = 3, neighbor_start = cfg.d_corr + cfg.d_flow + cfg.d_motion;
  const int c_in = neighbor_start + 2 * cfg.d_motion;
  auto wdata = model.trunk.weight.data_mut();
  for (int co = 0; co < cfg.d_motion; ++co)
    for (int ci = neighbor_start; ci < c_in; ++ci)
      for (int t = 0; t < k * k; ++t) wdata[(co * c_in + ci) * k * k + t] = 0.0f;

  auto frames = rand_frames<float>(rng, 5, 8, 8);
  ClipForwardOptions opts;
  opts.iters = 2;
  auto clip = clip_forward<float>(model, frames, opts);
  REQUIRE(clip.size() == 3);
  for (int u = 0; u < 3; ++u) {
    std::vector<Tensor<float>> triplet{frames[u], frames[u + 1], frames[u + 2]};
    auto solo = single_unit_forward<float>(model, triplet, 2);
    CHECK(same_predictions(clip[u], solo));
  }
}

TEST_CASE("information travels one unit per iteration, no further") {
  Rng rng(46);
  auto model = make_clip_model<float>(rng, tiny_cfg());
  const int F = 7, iters = 3;
  auto frames = rand_frames<float>(rng, F, 8, 8);
  ClipForwardOptions opts;
  opts.iters = iters;
  auto base = clip_forward<float>(model, frames, opts);
  REQUIRE(base.size() == F - 2);

  for (int j = 0; j < F; ++j) {
    auto bumped = frames;
    bumped[j] = add(frames[j], Tensor<float>::full({1, 8, 8}, 0.25f));
    auto run = clip_forward<float>(model, bumped, opts);
    for (int u = 0; u < F - 2; ++u) {
      const int t = u + 1;
      for (int k = 1; k <= iters; ++k) {
        INFO("frame ", j, " unit center ", t, " iteration ", k);
        const bool reachable = std::abs(j - t) <= k;
        CHECK(bitwise_equal(run[u].flows_feat[k - 1], base[u].flows_feat[k - 1]) == !reachable);
      }
    }
  }
}

TEST_CASE("clip training signal reaches the seed and every clip parameter") {
  Rng rng(47);
  auto model = make_clip_model<double>(rng, tiny_cfg());
  auto frames = rand_frames<double>(rng, 4, 8, 8);
  ClipForwardOptions opts;
  opts.iters = 2;
  auto preds = clip_forward<double>(model, frames, opts);
  Tensor<double> loss;
  for (const auto& pred : preds)
    for (const auto& fp : pred.flows_feat) {
      auto term = add(mean_all(abs(fp.prev)), mean_all(abs(fp.next)));
      loss = loss.defined() ? add(loss, term) : term;
    }
  backward(loss);
  for (auto& p : named_params(model)) {
    INFO(p.name);
    CHECK(has_nonzero_grad(p.tensor));
  }
}

TEST_CASE("clip gradients match finite differences end to end") {
  set_thread_count(1);
  Rng rng(48);
  ModelConfig cfg = tiny_cfg();
  cfg.d_feat = 6;
  cfg.d_hidden = 6;
  cfg.d_corr = 6;
  cfg.d_flow = 4;
  cfg.d_motion = 6;
  cfg.levels = 1;
  auto model = make_clip_model<double>(rng, cfg);
  fill_uniform(model.core.head.project.weight, rng, -0.02, 0.02);
  fill_uniform(model.core.head.project.bias, rng, 0.25, 0.45);
  std::vector<Tensor<double>> frames;
  for (int i = 0; i < 4; ++i) {
    auto f = rand_frame<double>(rng, 6, 6);
    f.set_requires_grad(true);
    frames.push_back(f);
  }
  std::vector<Tensor<double>> leaves = frames;
  for (auto& p : named_params(model)) leaves.push_back(p.tensor);

  GradCheckOptions opts;
  opts.step = 1e-5;
  opts.max_probes_per_tensor = 2;
  auto result = check_gradients(leaves, [&]() {
    ClipForwardOptions fwd;
    fwd.iters = 2;
    auto preds = clip_forward<double>(model, frames, fwd);
    Tensor<double> loss;
    for (const auto& pred : preds)
      for (const auto& fp : pred.flows_feat) {
        auto term = add(mean_all(abs(fp.prev)), mean_all(abs(fp.next)));
        loss = loss.defined() ? add(loss, term) : term;
      }
    return loss;
  }, opts);
  INFO(result.worst, " rel=", result.max_rel_err, " abs=", result.max_abs_err_small);
  CHECK(result.ok(2e-4, 1e-6));
}
