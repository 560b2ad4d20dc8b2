// Acceptance harness: one line per criterion, PASS/FAIL, exit code = number
// of failures. Everything runs single-threaded so bitwise comparisons are
// meaningful. Thresholds and budgets are frozen here on purpose — they are
// the contract, not knobs.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "triflow/checkpoint.hpp"
#include "triflow/corr.hpp"
#include "triflow/flowio.hpp"
#include "triflow/gradcheck.hpp"
#include "triflow/propagation.hpp"
#include "triflow/rng.hpp"
#include "triflow/synth.hpp"
#include "triflow/tensor.hpp"
#include "triflow/threading.hpp"
#include "triflow/train.hpp"
#include "triflow/triunit.hpp"

namespace fs = std::filesystem;
using namespace triflow;

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

std::string fmt(const char* f, ...) {
  char buf[256];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

template <typename S>
bool bitwise(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) return false;
  const auto da = a.data(), db = b.data();
  for (size_t i = 0; i < da.size(); ++i)
    if (!(da[i] == db[i])) return false;
  return true;
}

template <typename S>
bool same_prediction(const UnitPrediction<S>& a, const UnitPrediction<S>& b) {
  if (a.center != b.center || a.flows_feat.size() != b.flows_feat.size() ||
      a.flows_img.size() != b.flows_img.size() || a.deltas.size() != b.deltas.size())
    return false;
  for (size_t k = 0; k < a.flows_feat.size(); ++k)
    if (!bitwise(a.flows_feat[k].prev, b.flows_feat[k].prev) ||
        !bitwise(a.flows_feat[k].next, b.flows_feat[k].next))
      return false;
  for (size_t k = 0; k < a.flows_img.size(); ++k)
    if (!bitwise(a.flows_img[k].prev, b.flows_img[k].prev) ||
        !bitwise(a.flows_img[k].next, b.flows_img[k].next))
      return false;
  for (size_t k = 0; k < a.deltas.size(); ++k)
    if (!bitwise(a.deltas[k].prev, b.deltas[k].prev) ||
        !bitwise(a.deltas[k].next, b.deltas[k].next))
      return false;
  return true;
}

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.downsample = 2;
  cfg.d_feat = 8;
  cfg.d_hidden = 8;
  cfg.d_corr = 8;
  cfg.d_flow = 6;
  cfg.d_motion = 8;
  cfg.levels = 1;
  cfg.radius = 1;
  return cfg;
}

template <typename S>
std::vector<Tensor<S>> rand_frames(Rng& rng, int f, int h, int w, bool needs_grad = false) {
  std::vector<Tensor<S>> frames;
  for (int t = 0; t < f; ++t) {
    auto fr = Tensor<S>::zeros({1, h, w}, needs_grad);
    fill_uniform(fr, rng, 0, 1);
    frames.push_back(fr);
  }
  return frames;
}

Tensor<float> const_flow(int h, int w, float u, float v) {
  auto t = Tensor<float>::zeros({2, h, w});
  auto d = t.data_mut();
  const size_t plane = static_cast<size_t>(h) * w;
  for (size_t i = 0; i < plane; ++i) {
    d[i] = u;
    d[plane + i] = v;
  }
  return t;
}

std::vector<LoadedSequence> load_dir(const std::string& dir) {
  std::vector<LoadedSequence> out;
  for (const auto& name : list_sequences(dir))
    out.push_back(load_sequence((fs::path(dir) / name).string()));
  return out;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite: central finite differences at double precision over every
//    differentiable operation, plus the full pipeline (encode, correlate,
//    look up, warp, update, upsample, loss) probed end-to-end. 5 seeds.

std::string c1_gradient_suite() {
  double worst = 0.0;
  std::int64_t probes = 0;
  auto run = [&](std::vector<Tensor<double>> leaves, const std::function<Tensor<double>()>& fn,
                 const GradCheckOptions& opts, const char* what) {
    const auto r = check_gradients(std::move(leaves), fn, opts);
    require(r.ok(1e-4, 1e-6),
            fmt("%s: rel err %.3e (abs-small %.3e) at %s", what, r.max_rel_err,
                r.max_abs_err_small, r.worst.c_str()));
    worst = std::max(worst, r.max_rel_err);
    probes += r.probes;
  };

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    {
      auto x = Tensor<double>::zeros({2, 5, 7}, true);
      auto w = Tensor<double>::zeros({3, 2, 3, 3}, true);
      auto b = Tensor<double>::zeros({3}, true);
      fill_uniform(x, rng, -1, 1);
      fill_normal(w, rng, 0, 0.5);
      fill_uniform(b, rng, -0.3, 0.3);
      run({x, w, b}, [&] { return mean_all(mul(conv2d(x, w, b, 1, 1), conv2d(x, w, b, 1, 1))); },
          {}, "conv2d stride 1");
      run({x, w, b}, [&] { return sum_all(mul(conv2d(x, w, b, 2, 1), conv2d(x, w, b, 2, 1))); }, {},
          "conv2d stride 2");
    }
    {
      auto x = Tensor<double>::zeros({4, 5, 5}, true);
      auto w = Tensor<double>::zeros({4, 3, 3}, true);
      auto b = Tensor<double>::zeros({4}, true);
      fill_uniform(x, rng, -1, 1);
      fill_normal(w, rng, 0, 0.5);
      fill_uniform(b, rng, -0.3, 0.3);
      run({x, w, b},
          [&] {
            auto y = depthwise_conv2d(x, w, b, 1);
            return sum_all(mul(y, y));
          },
          {}, "depthwise_conv2d");
    }
    {
      auto m = Tensor<double>::zeros({3, 6, 6}, true);
      auto c = Tensor<double>::zeros({2, 4, 4}, true);
      fill_uniform(m, rng, -1, 1);
      fill_uniform(c, rng, 0.3, 4.6);
      // Nudge coordinates off the bilinear lattice so finite differences stay
      // on one smooth piece.
      for (auto& v : c.data_mut())
        if (std::abs(v - std::round(v)) < 0.02) v += 0.05;
      run({m, c},
          [&] {
            auto y = bilinear_sample(m, c);
            return sum_all(mul(y, y));
          },
          {1e-4, 1e-4, 0, seed}, "bilinear_sample");
    }
    {
      auto x = Tensor<double>::zeros({3, 6, 8}, true);
      fill_uniform(x, rng, -1, 1);
      run({x},
          [&] {
            auto y = avg_pool2(x);
            return sum_all(mul(y, y));
          },
          {}, "avg_pool2");
    }
    {
      auto fc = Tensor<double>::zeros({5, 4, 6}, true);
      auto fp = Tensor<double>::zeros({5, 4, 6}, true);
      auto fn2 = Tensor<double>::zeros({5, 4, 6}, true);
      fill_uniform(fc, rng, -1, 1);
      fill_uniform(fp, rng, -1, 1);
      fill_uniform(fn2, rng, -1, 1);
      FlowPair<double> flows{Tensor<double>::zeros({2, 4, 6}, true),
                             Tensor<double>::zeros({2, 4, 6}, true)};
      fill_uniform(flows.prev, rng, -1.3, 1.3);
      fill_uniform(flows.next, rng, -1.3, 1.3);
      run({fc, fp, fn2, flows.prev, flows.next},
          [&] {
            auto vol = build_dual_corr(fc, fp, fn2, 2, true);
            auto lk = lookup(vol, flows, LookupWindowSpec{2, 1});
            return add(sum_all(mul(lk.c_prev, lk.c_prev)), sum_all(mul(lk.c_next, lk.c_next)));
          },
          {1e-4, 1e-4, 0, seed}, "correlation build+lookup");
    }
    {
      auto st = Tensor<double>::zeros({4, 5, 5}, true);
      auto fl = Tensor<double>::zeros({2, 5, 5}, true);
      fill_uniform(st, rng, -1, 1);
      fill_uniform(fl, rng, -1.2, 1.2);
      run({st, fl},
          [&] {
            auto y = warp_state(st, fl);
            return sum_all(mul(y, y));
          },
          {1e-4, 1e-4, 0, seed}, "warp_state");
    }
  }

  // End to end through the multi-frame model: feature/context encoders,
  // correlation encoder, flow encoder, motion trunk and heads, recurrent
  // updater, upsampling, and the weighted sequence loss. Probes a random
  // subset of every parameter tensor and every frame.
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ModelConfig cfg;
    cfg.downsample = 2;
    cfg.d_feat = 6;
    cfg.d_hidden = 6;
    cfg.d_corr = 6;
    cfg.d_flow = 4;
    cfg.d_motion = 6;
    cfg.levels = 1;
    cfg.radius = 1;
    Rng rng(seed * 31 + 1);
    auto model = make_flow_model<double>(rng, cfg);
    auto frames = rand_frames<double>(rng, 4, 8, 8, true);
    std::vector<Tensor<double>> gt_fwd, gt_bwd;
    for (int t = 0; t < 2; ++t) {
      auto f = Tensor<double>::zeros({2, 8, 8});
      auto b = Tensor<double>::zeros({2, 8, 8});
      fill_uniform(f, rng, -1.5, 1.5);
      fill_uniform(b, rng, -1.5, 1.5);
      gt_fwd.push_back(f);
      gt_bwd.push_back(b);
    }
    std::vector<Tensor<double>> leaves = frames;
    for (auto& p : named_params(model)) leaves.push_back(p.tensor);
    auto fn = [&] {
      auto preds = model_forward(model, std::span<const Tensor<double>>(frames), 2);
      return sequence_loss<double>(preds, gt_fwd, gt_bwd, 0.85, true, 0);
    };
    GradCheckOptions opts;
    opts.step = 1e-4;
    opts.max_probes_per_tensor = 4;
    opts.probe_seed = seed;
    run(leaves, fn, opts, fmt("end-to-end seed %llu", (unsigned long long)seed).c_str());
  }

  return fmt("worst rel err %.2e over %lld probes", worst, (long long)probes);
}

// ---------------------------------------------------------------------------
// 2. Correlation volume equals the quadruple-loop brute force on 4x4x8
//    features within 1e-6.

std::string c2_correlation_oracle() {
  Rng rng(8);
  auto fc = Tensor<float>::zeros({8, 4, 4});
  auto fp = Tensor<float>::zeros({8, 4, 4});
  auto fn2 = Tensor<float>::zeros({8, 4, 4});
  fill_uniform(fc, rng, -1, 1);
  fill_uniform(fp, rng, -1, 1);
  fill_uniform(fn2, rng, -1, 1);
  const auto vol = build_dual_corr(fc, fp, fn2, 1, true);
  require(std::abs(vol.scale_norm - 1.0f / std::sqrt(8.0f)) < 1e-7f, "normalizer is not 1/sqrt(D)");

  double worst = 0.0;
  auto brute = [&](const Tensor<float>& target, const Tensor<float>& got) {
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        for (int p = 0; p < 4; ++p)
          for (int q = 0; q < 4; ++q) {
            double dot = 0.0;
            for (int d = 0; d < 8; ++d)
              dot += double(fc.data()[(d * 4 + i) * 4 + j]) * target.data()[(d * 4 + p) * 4 + q];
            const double val = got.data()[((i * 4 + j) * 4 + p) * 4 + q];
            worst = std::max(worst, std::abs(val - dot * vol.scale_norm));
          }
  };
  brute(fp, vol.corr_prev());
  brute(fn2, vol.corr_next());
  require(worst < 1e-6, fmt("worst deviation %.3e", worst));
  return fmt("both directions, worst |delta| %.2e", worst);
}

// ---------------------------------------------------------------------------
// 3. Integer-flow lookup equals direct indexing; warp with constant integer
//    flow equals a shifted-and-clamped copy; zero flow is the identity.

std::string c3_lookup_warp_oracles() {
  Rng rng(12);
  const int h = 5, w = 7, d = 6, r = 2, win = 2 * r + 1;
  auto fc = Tensor<float>::zeros({d, h, w});
  auto fp = Tensor<float>::zeros({d, h, w});
  auto fn2 = Tensor<float>::zeros({d, h, w});
  fill_uniform(fc, rng, -1, 1);
  fill_uniform(fp, rng, -1, 1);
  fill_uniform(fn2, rng, -1, 1);
  const auto vol = build_dual_corr(fc, fp, fn2, 1, true);
  const LookupWindowSpec spec{1, r};

  auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
  const std::pair<int, int> shifts[] = {{0, 0}, {1, -2}, {-3, 4}, {2, 1}};
  for (const auto& [fx, fy] : shifts) {
    FlowPair<float> flows{const_flow(h, w, float(fx), float(fy)),
                          const_flow(h, w, float(fx), float(fy))};
    const auto lk = lookup(vol, flows, spec);
    for (int dir = 0; dir < 2; ++dir) {
      const auto& plane = dir == 0 ? lk.c_prev : lk.c_next;
      const auto& corr = dir == 0 ? vol.corr_prev() : vol.corr_next();
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
              const int ch = (dy + r) * win + (dx + r);
              const float got = plane.data()[(ch * h + i) * w + j];
              const int ti = clampi(i + fy + dy, 0, h - 1);
              const int tj = clampi(j + fx + dx, 0, w - 1);
              const float want = corr.data()[((i * w + j) * h + ti) * w + tj];
              require(std::abs(got - want) <= 1e-6f,
                      fmt("lookup(%d,%d) dir %d pixel (%d,%d) offset (%d,%d): %g vs %g", fx, fy,
                          dir, i, j, dx, dy, got, want));
            }
    }
  }

  auto st = Tensor<float>::zeros({3, h, w});
  fill_uniform(st, rng, -2, 2);
  const std::pair<int, int> warps[] = {{0, 0}, {1, 0}, {0, -2}, {3, 2}, {-9, 9}};
  for (const auto& [dx, dy] : warps) {
    const auto got = warp_state(st, const_flow(h, w, float(dx), float(dy)));
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const float want = st.data()[(c * h + clampi(y + dy, 0, h - 1)) * w +
                                       clampi(x + dx, 0, w - 1)];
          require(got.data()[(c * h + y) * w + x] == want,
                  fmt("warp (%d,%d) not a shifted copy at (%d,%d,%d)", dx, dy, c, y, x));
        }
  }
  require(bitwise(warp_state(st, Tensor<float>::zeros({2, h, w})), st),
          "zero-flow warp is not the identity");
  return "4 lookup shifts direct-indexed, 5 warp shifts bitwise, zero flow = identity";
}

// ---------------------------------------------------------------------------
// 4. Temporal dependency: with k refinement iterations, the estimate at
//    center t is bit-identical under perturbation of frame j iff |j - t| > k.

std::string c4_temporal_dependency() {
  ModelConfig cfg = tiny_cfg();
  Rng rng(21);
  auto model = make_flow_model<float>(rng, cfg);
  require(model.multi_frame, "default flags must select the multi-frame model");

  const int f = 7, iters = 3, hw = 12;
  Rng frame_rng(22);
  auto frames = rand_frames<float>(frame_rng, f, hw, hw);

  NoGradGuard no_grad;
  const auto base = model_forward(model, std::span<const Tensor<float>>(frames), iters);
  require(static_cast<int>(base.size()) == f - 2, "expected one unit per interior frame");

  int checked = 0, influenced[4] = {0, 0, 0, 0};
  for (int j = 0; j < f; ++j) {
    auto bumped = frames;
    bumped[j] = add(frames[j], Tensor<float>::full({1, hw, hw}, 0.25f));
    const auto run = model_forward(model, std::span<const Tensor<float>>(bumped), iters);
    for (int u = 0; u < f - 2; ++u) {
      const int t = u + 1;
      for (int k = 1; k <= iters; ++k) {
        const bool reachable = std::abs(j - t) <= k;
        const bool identical = bitwise(run[u].flows_img[k - 1].prev, base[u].flows_img[k - 1].prev) &&
                               bitwise(run[u].flows_img[k - 1].next, base[u].flows_img[k - 1].next);
        require(identical == !reachable,
                fmt("frame %d, center %d, iteration %d: %s", j, t, k,
                    identical ? "perturbation failed to reach" : "perturbation leaked"));
        ++checked;
        if (reachable && !identical) ++influenced[k];
      }
    }
  }
  for (int k = 1; k <= iters; ++k)
    require(influenced[k] > 0, fmt("no reachable perturbation influenced iteration %d", k));
  return fmt("%d (frame, center, iteration) cases: identical iff |j-t| > k", checked);
}

// ---------------------------------------------------------------------------
// 5. Three-frame reductions: the clip forward equals the isolated unit with
//    placeholder neighbor states, and switching propagation off changes
//    nothing on 3-frame clips.

std::string c5_reduction() {
  const auto cfg = tiny_cfg();
  Rng rng(31);
  auto clip_model = make_clip_model<float>(rng, cfg);
  Rng frame_rng(33);
  auto frames = rand_frames<float>(frame_rng, 3, 10, 10);

  NoGradGuard no_grad;
  ClipForwardOptions opts;
  opts.iters = 4;
  const auto whole = clip_forward<float>(clip_model, frames, opts);
  require(whole.size() == 1, "a 3-frame clip must hold exactly one unit");
  const auto solo = single_unit_forward<float>(clip_model, frames, 4);
  require(same_prediction(whole[0], solo), "clip forward differs from the isolated unit");

  Rng r1(32), r2(32);
  auto base_model = make_flow_model<float>(r1, cfg);
  auto off_cfg = cfg;
  off_cfg.propagation = false;
  auto off_model = make_flow_model<float>(r2, off_cfg);
  const auto a = model_forward(base_model, std::span<const Tensor<float>>(frames), 4);
  const auto b = model_forward(off_model, std::span<const Tensor<float>>(frames), 4);
  require(a.size() == 1 && b.size() == 1 && same_prediction(a[0], b[0]),
          "propagation off is not a no-op on a 3-frame clip");
  return "clip == isolated unit bitwise; propagation toggle is a no-op at F=3";
}

// ---------------------------------------------------------------------------
// 6. Sequence loss equals an independent scalar loop on random inputs and
//    reproduces the worked two-iteration example exactly.

std::string c6_loss_oracle() {
  Rng rng(41);
  const int iters = 3, centers = 2, h = 5, w = 6;
  std::vector<UnitPrediction<float>> preds(centers);
  std::vector<Tensor<float>> gt_fwd, gt_bwd;
  for (int t = 0; t < centers; ++t) {
    preds[t].center = t + 1;
    for (int k = 0; k < iters; ++k) {
      FlowPair<float> pair{Tensor<float>::zeros({2, h, w}), Tensor<float>::zeros({2, h, w})};
      fill_uniform(pair.prev, rng, -2, 2);
      fill_uniform(pair.next, rng, -2, 2);
      preds[t].flows_img.push_back(pair);
    }
    auto f = Tensor<float>::zeros({2, h, w});
    auto b = Tensor<float>::zeros({2, h, w});
    fill_uniform(f, rng, -2, 2);
    fill_uniform(b, rng, -2, 2);
    gt_fwd.push_back(f);
    gt_bwd.push_back(b);
  }
  const double got = sequence_loss<float>(preds, gt_fwd, gt_bwd, 0.85).item();

  double want = 0.0;
  const double n = double(2) * h * w;
  for (int t = 0; t < centers; ++t)
    for (int k = 1; k <= iters; ++k) {
      double sum_prev = 0.0, sum_next = 0.0;
      for (int i = 0; i < 2 * h * w; ++i) {
        sum_prev += std::abs(double(gt_bwd[t].data()[i]) -
                             double(preds[t].flows_img[k - 1].prev.data()[i]));
        sum_next += std::abs(double(gt_fwd[t].data()[i]) -
                             double(preds[t].flows_img[k - 1].next.data()[i]));
      }
      want += std::pow(0.85, iters - k) * (sum_prev / n + sum_next / n);
    }
  const double rel = std::abs(got - want) / std::max(1.0, std::abs(want));
  require(rel <= 1e-6, fmt("scalar-loop mismatch: %.9f vs %.9f", got, want));

  UnitPrediction<float> ex;
  auto field = [&](float v) {
    auto t = Tensor<float>::full({2, 4, 4}, v);
    return t;
  };
  ex.flows_img.push_back({field(1.0f), field(-1.0f)});
  ex.flows_img.push_back({field(0.5f), field(0.5f)});
  std::vector<Tensor<float>> zero{Tensor<float>::zeros({2, 4, 4})};
  const double example = sequence_loss<float>({ex}, zero, zero, 0.85).item();
  require(std::abs(example - 2.7) <= 1e-6, fmt("worked example: %.9f vs 2.7", example));
  return fmt("random loop rel err %.2e; worked example %.7f", rel, example);
}

// ---------------------------------------------------------------------------
// 7/8. Training smoke and bi-directional parity. The budget, threshold, and
//      margin below were calibrated once on this exact configuration and are
//      frozen; the dataset is regenerated from pinned seeds every run.

struct SmokeOutcome {
  double fwd_aepe = 0.0;
  double bwd_aepe = 0.0;
  double seconds = 0.0;
};
std::optional<SmokeOutcome> g_smoke;

constexpr int kSmokeSteps = 140;          // frozen step budget
constexpr double kSmokeThreshold = 0.5;   // px, held-out forward AEPE
constexpr double kParityMargin = 0.15;    // px, |forward - backward| bound

std::string c7_training_smoke() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto root = fs::temp_directory_path() / "triflow_acceptance";
  fs::remove_all(root);

  DatasetSpec train_spec;
  train_spec.count = 12;
  train_spec.width = 32;
  train_spec.height = 32;
  train_spec.frames = 5;
  train_spec.max_speed = 3.0;
  train_spec.max_spin = 0.0;  // translation/occlusion only
  train_spec.background_speed = 1.5;
  train_spec.seed = 101;
  DatasetSpec eval_spec = train_spec;
  eval_spec.count = 4;
  eval_spec.seed = 202;  // held out
  make_dataset((root / "train").string(), train_spec);
  make_dataset((root / "eval").string(), eval_spec);
  const auto train_data = load_dir((root / "train").string());
  const auto eval_data = load_dir((root / "eval").string());

  TrainConfig cfg;
  cfg.model.downsample = 4;
  cfg.model.d_feat = 64;
  cfg.model.d_hidden = 64;
  cfg.model.d_corr = 64;
  cfg.model.d_flow = 32;
  cfg.model.d_motion = 64;
  cfg.model.levels = 1;
  cfg.model.radius = 3;
  cfg.iters = 12;
  cfg.steps = kSmokeSteps;
  cfg.batch_size = 1;
  cfg.seed = 1;

  Rng rng(cfg.seed);
  auto model = make_flow_model<float>(rng, cfg.model);
  train(cfg, model, train_data, nullptr);

  EvalOptions opts;
  opts.iters = cfg.iters;
  const auto ev = evaluate(model, eval_data, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  g_smoke = SmokeOutcome{ev.forward.aepe, ev.backward.aepe, secs};
  require(ev.forward.aepe < kSmokeThreshold,
          fmt("held-out forward aepe %.3f px, needed < %.1f (%d steps, %.0fs)", ev.forward.aepe,
              kSmokeThreshold, kSmokeSteps, secs));
  return fmt("held-out forward aepe %.3f px < %.1f after %d steps (%.0fs)", ev.forward.aepe,
             kSmokeThreshold, kSmokeSteps, secs);
}

std::string c8_parity() {
  require(g_smoke.has_value(), "training smoke produced no model to score");
  const double gap = std::abs(g_smoke->fwd_aepe - g_smoke->bwd_aepe);
  require(gap <= kParityMargin,
          fmt("forward %.3f vs backward %.3f px, |gap| %.3f > %.2f", g_smoke->fwd_aepe,
              g_smoke->bwd_aepe, gap, kParityMargin));
  return fmt("forward %.3f vs backward %.3f px, |gap| %.3f <= %.2f", g_smoke->fwd_aepe,
             g_smoke->bwd_aepe, gap, kParityMargin);
}

// ---------------------------------------------------------------------------
// 9. Format round trips: .flo bitwise, checkpoint reload reproduces forward
//    passes bitwise, dataset generation is byte-identical across runs.

std::string c9_round_trips() {
  const auto root = fs::temp_directory_path() / "triflow_acceptance_fmt";
  fs::remove_all(root);
  fs::create_directories(root);

  Rng rng(51);
  auto flow = Tensor<float>::zeros({2, 7, 5});
  fill_uniform(flow, rng, -40, 40);
  const auto flo_path = (root / "probe.flo").string();
  write_flo(flo_path, flow);
  require(bitwise(read_flo(flo_path), flow), ".flo round trip changed the payload");

  const auto cfg = tiny_cfg();
  Rng ra(52);
  auto saved = make_flow_model<float>(ra, cfg);
  Rng frame_rng(53);
  const auto frames = rand_frames<float>(frame_rng, 3, 8, 8);
  NoGradGuard no_grad;
  const auto before = model_forward(saved, std::span<const Tensor<float>>(frames), 3);
  CheckpointMeta meta;
  meta.step = 3;
  meta.rng_state = ra.state_string();
  const auto ckpt_path = (root / "probe.ckpt").string();
  auto saved_params = named_params(saved);
  save_checkpoint(ckpt_path, saved_params, meta);

  Rng rb(99);  // different init: every value must come from the file
  auto loaded = make_flow_model<float>(rb, cfg);
  auto loaded_params = named_params(loaded);
  load_checkpoint(ckpt_path, loaded_params);
  const auto after = model_forward(loaded, std::span<const Tensor<float>>(frames), 3);
  require(before.size() == after.size(), "prediction counts differ after reload");
  for (size_t u = 0; u < before.size(); ++u)
    require(same_prediction(before[u], after[u]), "reloaded forward pass is not bit-identical");

  DatasetSpec spec;
  spec.count = 2;
  spec.width = 20;
  spec.height = 16;
  spec.frames = 4;
  spec.seed = 77;
  make_dataset((root / "gen_a").string(), spec);
  make_dataset((root / "gen_b").string(), spec);
  std::vector<std::string> rels;
  for (const auto& e : fs::recursive_directory_iterator(root / "gen_a"))
    if (e.is_regular_file()) rels.push_back(fs::relative(e.path(), root / "gen_a").string());
  std::sort(rels.begin(), rels.end());
  require(!rels.empty(), "generation produced no files");
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  for (const auto& rel : rels) {
    require(fs::exists(root / "gen_b" / rel), "second generation is missing " + rel);
    require(slurp(root / "gen_a" / rel) == slurp(root / "gen_b" / rel),
            "generated file differs across runs: " + rel);
  }
  return fmt(".flo bitwise; checkpoint forward bitwise; %zu generated files byte-identical",
             rels.size());
}

// ---------------------------------------------------------------------------
// 10. Metric truth table, exact.

std::string c10_metrics() {
  auto field = [](float u, float v) {
    auto t = Tensor<float>::zeros({2, 3, 3});
    auto d = t.data_mut();
    for (int i = 0; i < 9; ++i) {
      d[i] = u;
      d[9 + i] = v;
    }
    return t;
  };
  require(aepe(field(3, 4), field(0, 0)) == 5.0, "3-4-5 aepe is not exactly 5");
  require(fl_all(field(14, 0), field(10, 0)) == 100.0, "4px error on 10px flow must be an outlier");
  require(fl_all(field(12, 0), field(10, 0)) == 0.0, "2px error is never an outlier");
  require(fl_all(field(104, 0), field(100, 0)) == 0.0, "4px error under 5% of 100px is fine");
  return "aepe 3-4-5 = 5.0 exact; fl_all 100/0/0 truth table exact";
}

}  // namespace

int main() {
  set_thread_count(1);  // bitwise claims need a fixed reduction order

  struct Criterion {
    int id;
    const char* name;
    std::function<std::string()> fn;
  };
  const Criterion criteria[] = {
      {1, "gradient suite", c1_gradient_suite},
      {2, "correlation brute-force oracle", c2_correlation_oracle},
      {3, "lookup and warp oracles", c3_lookup_warp_oracles},
      {4, "temporal dependency invariant", c4_temporal_dependency},
      {5, "three-frame reduction equivalences", c5_reduction},
      {6, "sequence loss oracle", c6_loss_oracle},
      {7, "training smoke", c7_training_smoke},
      {8, "bi-directional parity", c8_parity},
      {9, "format round trips", c9_round_trips},
      {10, "metric truth table", c10_metrics},
  };

  int failures = 0;
  const auto t_start = std::chrono::steady_clock::now();
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = false;
    try {
      detail = c.fn();
      ok = true;
    } catch (const std::exception& e) {
      detail = e.what();
      ++failures;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %2d  %-36s %s (%.1fs)\n", ok ? "PASS" : "FAIL", c.id, c.name, detail.c_str(),
                secs);
    std::fflush(stdout);
  }
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  if (failures == 0)
    std::printf("acceptance: all 10 criteria passed (%.0fs)\n", total);
  else
    std::printf("acceptance: %d of 10 criteria FAILED (%.0fs)\n", failures, total);
  return failures;
}
