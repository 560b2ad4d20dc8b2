#include "triflow/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace triflow {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("train: " + msg); }

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void validate(const TrainConfig& cfg) {
  validate(cfg.model);
  if (cfg.iters < 1) fail("iters must be >= 1");
  if (!(cfg.gamma > 0.0 && cfg.gamma <= 1.0)) fail("gamma must be in (0, 1]");
  if (cfg.supervised_centers < 0) fail("supervised_centers must be >= 0");
  if (cfg.steps < 0) fail("steps must be >= 0");
  if (cfg.batch_size < 1) fail("batch_size must be >= 1");
  if (cfg.lr_peak < 0 || cfg.lr_final < 0) fail("learning rates must be >= 0");
  if (!(cfg.warmup_frac >= 0.0 && cfg.warmup_frac <= 1.0)) fail("warmup_frac must be in [0, 1]");
  if (cfg.weight_decay < 0) fail("weight_decay must be >= 0");
  if (cfg.clip_norm < 0) fail("clip_norm must be >= 0");
  if (cfg.log_every < 1) fail("log_every must be >= 1");
}

TrainConfig train_config_from(const KeyValueConfig& kv) {
  static const std::set<std::string> known = {
      "model.in_channels",   "model.downsample",
      "model.d_feat",        "model.d_hidden",
      "model.d_corr",        "model.d_flow",
      "model.d_motion",      "model.levels",
      "model.radius",        "model.corr_normalize",
      "model.large_kernel_updater",
      "model.bidirectional", "model.recurrent_fusion",
      "model.propagation",   "train.iters",
      "train.gamma",         "train.include_k0",
      "train.supervised_centers",
      "train.steps",         "train.batch_size",
      "train.lr_peak",       "train.lr_final",
      "train.warmup_frac",   "train.weight_decay",
      "train.clip_norm",     "train.seed",
      "train.log_every"};
  for (const auto& [k, v] : kv.items()) {
    const bool owned = k.rfind("model.", 0) == 0 || k.rfind("train.", 0) == 0;
    if (owned && !known.count(k)) fail("unknown config key '" + k + "'");
  }

  TrainConfig c;
  c.model.in_channels = kv.get_int("model.in_channels", c.model.in_channels);
  c.model.downsample = kv.get_int("model.downsample", c.model.downsample);
  c.model.d_feat = kv.get_int("model.d_feat", c.model.d_feat);
  c.model.d_hidden = kv.get_int("model.d_hidden", c.model.d_hidden);
  c.model.d_corr = kv.get_int("model.d_corr", c.model.d_corr);
  c.model.d_flow = kv.get_int("model.d_flow", c.model.d_flow);
  c.model.d_motion = kv.get_int("model.d_motion", c.model.d_motion);
  c.model.levels = kv.get_int("model.levels", c.model.levels);
  c.model.radius = kv.get_int("model.radius", c.model.radius);
  c.model.corr_normalize = kv.get_bool("model.corr_normalize", c.model.corr_normalize);
  c.model.large_kernel_updater =
      kv.get_bool("model.large_kernel_updater", c.model.large_kernel_updater);
  c.model.bidirectional = kv.get_bool("model.bidirectional", c.model.bidirectional);
  c.model.recurrent_fusion = kv.get_bool("model.recurrent_fusion", c.model.recurrent_fusion);
  c.model.propagation = kv.get_bool("model.propagation", c.model.propagation);
  c.iters = kv.get_int("train.iters", c.iters);
  c.gamma = kv.get_double("train.gamma", c.gamma);
  c.include_k0 = kv.get_bool("train.include_k0", c.include_k0);
  c.supervised_centers = kv.get_int("train.supervised_centers", c.supervised_centers);
  c.steps = kv.get_int("train.steps", c.steps);
  c.batch_size = kv.get_int("train.batch_size", c.batch_size);
  c.lr_peak = kv.get_double("train.lr_peak", c.lr_peak);
  c.lr_final = kv.get_double("train.lr_final", c.lr_final);
  c.warmup_frac = kv.get_double("train.warmup_frac", c.warmup_frac);
  c.weight_decay = kv.get_double("train.weight_decay", c.weight_decay);
  c.clip_norm = kv.get_double("train.clip_norm", c.clip_norm);
  c.seed = kv.get_u64("train.seed", c.seed);
  c.log_every = kv.get_int("train.log_every", c.log_every);
  validate(c);
  return c;
}

KeyValueConfig to_key_values(const TrainConfig& c) {
  KeyValueConfig kv;
  kv.set("model.in_channels", std::to_string(c.model.in_channels));
  kv.set("model.downsample", std::to_string(c.model.downsample));
  kv.set("model.d_feat", std::to_string(c.model.d_feat));
  kv.set("model.d_hidden", std::to_string(c.model.d_hidden));
  kv.set("model.d_corr", std::to_string(c.model.d_corr));
  kv.set("model.d_flow", std::to_string(c.model.d_flow));
  kv.set("model.d_motion", std::to_string(c.model.d_motion));
  kv.set("model.levels", std::to_string(c.model.levels));
  kv.set("model.radius", std::to_string(c.model.radius));
  kv.set("model.corr_normalize", c.model.corr_normalize ? "true" : "false");
  kv.set("model.large_kernel_updater", c.model.large_kernel_updater ? "true" : "false");
  kv.set("model.bidirectional", c.model.bidirectional ? "true" : "false");
  kv.set("model.recurrent_fusion", c.model.recurrent_fusion ? "true" : "false");
  kv.set("model.propagation", c.model.propagation ? "true" : "false");
  kv.set("train.iters", std::to_string(c.iters));
  kv.set("train.gamma", fmt_double(c.gamma));
  kv.set("train.include_k0", c.include_k0 ? "true" : "false");
  kv.set("train.supervised_centers", std::to_string(c.supervised_centers));
  kv.set("train.steps", std::to_string(c.steps));
  kv.set("train.batch_size", std::to_string(c.batch_size));
  kv.set("train.lr_peak", fmt_double(c.lr_peak));
  kv.set("train.lr_final", fmt_double(c.lr_final));
  kv.set("train.warmup_frac", fmt_double(c.warmup_frac));
  kv.set("train.weight_decay", fmt_double(c.weight_decay));
  kv.set("train.clip_norm", fmt_double(c.clip_norm));
  kv.set("train.seed", std::to_string(c.seed));
  kv.set("train.log_every", std::to_string(c.log_every));
  return kv;
}

DatasetSpec dataset_spec_from(const KeyValueConfig& kv) {
  static const std::set<std::string> known = {
      "data.count",      "data.width",       "data.height",
      "data.frames",     "data.min_sprites", "data.max_sprites",
      "data.max_speed",  "data.max_spin",    "data.background_speed",
      "data.seed"};
  for (const auto& [k, v] : kv.items())
    if (k.rfind("data.", 0) == 0 && !known.count(k)) fail("unknown config key '" + k + "'");

  DatasetSpec d;
  d.count = kv.get_int("data.count", d.count);
  d.width = kv.get_int("data.width", d.width);
  d.height = kv.get_int("data.height", d.height);
  d.frames = kv.get_int("data.frames", d.frames);
  d.min_sprites = kv.get_int("data.min_sprites", d.min_sprites);
  d.max_sprites = kv.get_int("data.max_sprites", d.max_sprites);
  d.max_speed = kv.get_double("data.max_speed", d.max_speed);
  d.max_spin = kv.get_double("data.max_spin", d.max_spin);
  d.background_speed = kv.get_double("data.background_speed", d.background_speed);
  d.seed = kv.get_u64("data.seed", d.seed);
  return d;
}

template <typename S>
FlowModel<S> make_flow_model(Rng& rng, const ModelConfig& cfg) {
  validate(cfg);
  FlowModel<S> model;
  model.cfg = cfg;
  model.multi_frame = cfg.bidirectional && cfg.recurrent_fusion;
  if (model.multi_frame)
    model.clip = make_clip_model<S>(rng, cfg);
  else
    model.tri = make_tri_model<S>(rng, cfg);
  return model;
}

template <typename S>
std::vector<NamedParam<S>> named_params(FlowModel<S>& model) {
  return model.multi_frame ? named_params(model.clip) : named_params(model.tri);
}

template <typename S>
std::vector<UnitPrediction<S>> model_forward(const FlowModel<S>& model,
                                             std::span<const Tensor<S>> frames, int iters) {
  if (model.multi_frame) {
    ClipForwardOptions opts;
    opts.iters = iters;
    return clip_forward(model.clip, frames, opts);
  }
  if (frames.size() < 3) fail("a clip needs at least 3 frames");
  std::vector<UnitPrediction<S>> preds;
  for (int t = 1; t + 1 < static_cast<int>(frames.size()); ++t) {
    auto pred = tri_forward(model.tri, frames.subspan(t - 1, 3), iters);
    pred.center = t;
    preds.push_back(std::move(pred));
  }
  return preds;
}

template <typename S>
Tensor<S> sequence_loss(const std::vector<UnitPrediction<S>>& preds,
                        const std::vector<Tensor<S>>& gt_fwd, const std::vector<Tensor<S>>& gt_bwd,
                        double gamma, bool include_k0, int supervised_centers) {
  if (!(gamma > 0.0 && gamma <= 1.0)) fail("sequence_loss: gamma must be in (0, 1]");
  if (preds.empty()) fail("sequence_loss: no predictions");
  if (gt_fwd.size() != preds.size() || gt_bwd.size() != preds.size())
    fail("sequence_loss: " + std::to_string(preds.size()) + " predictions but " +
         std::to_string(gt_fwd.size()) + "/" + std::to_string(gt_bwd.size()) +
         " forward/backward ground-truth fields");

  const int centers = static_cast<int>(preds.size());
  const int supervised =
      supervised_centers > 0 ? std::min(supervised_centers, centers) : centers;

  Tensor<S> total;
  auto accumulate = [&](const Tensor<S>& term, double weight) {
    auto weighted = affine(term, static_cast<S>(weight), S(0));
    total = total.defined() ? add(total, weighted) : weighted;
  };

  for (int t = 0; t < supervised; ++t) {
    const auto& seq = preds[t].flows_img;
    const int n = static_cast<int>(seq.size());
    if (n == 0) fail("sequence_loss: prediction " + std::to_string(t) + " has no iterations");
    for (int k = 1; k <= n; ++k) {
      const auto& pair = seq[k - 1];
      if (pair.prev.shape() != gt_bwd[t].shape() || pair.next.shape() != gt_fwd[t].shape())
        fail("sequence_loss: center " + std::to_string(t) + " prediction shape " +
             shape_str(pair.next.shape()) + " does not match ground truth " +
             shape_str(gt_fwd[t].shape()));
      auto term = add(mean_all(abs(sub(gt_bwd[t], pair.prev))),
                      mean_all(abs(sub(gt_fwd[t], pair.next))));
      accumulate(term, std::pow(gamma, n - k));
    }
    if (include_k0) {
      // The k = 0 estimate is the zero initialization; its residual is a
      // parameter-free constant but keeps the loss comparable across flags.
      auto term = add(mean_all(abs(gt_bwd[t])), mean_all(abs(gt_fwd[t])));
      accumulate(term, std::pow(gamma, n));
    }
  }
  return total;
}

AdamW::AdamW(std::vector<NamedParam<float>> params, double weight_decay, double beta1,
             double beta2, double eps)
    : params_(std::move(params)),
      weight_decay_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(static_cast<size_t>(params_[i].tensor.size()), 0.0);
    v_[i].assign(static_cast<size_t>(params_[i].tensor.size()), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

double AdamW::clip_global_norm(double max_norm) {
  double sum_sq = 0.0;
  for (auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) sum_sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sum_sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (float& g : p.tensor.grad_mut()) g = static_cast<float>(g * scale);
    }
  }
  return norm;
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& tensor = params_[i].tensor;
    if (!tensor.has_grad()) continue;
    const auto grad = tensor.grad();
    auto data = tensor.data_mut();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < m.size(); ++j) {
      const double g = grad[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
      data[j] = static_cast<float>(data[j] - lr * (update + weight_decay_ * data[j]));
    }
  }
}

double one_cycle_lr(std::int64_t step, std::int64_t total_steps, double warmup_frac, double peak,
                    double final_lr) {
  if (total_steps <= 0) return peak;
  step = std::clamp<std::int64_t>(step, 0, total_steps - 1);
  std::int64_t warm = std::llround(warmup_frac * static_cast<double>(total_steps));
  warm = std::clamp<std::int64_t>(warm, 0, total_steps);
  if (step < warm) {
    const double start = peak / 25.0;
    return start + (peak - start) * static_cast<double>(step) / static_cast<double>(warm);
  }
  const auto span = std::max<std::int64_t>(total_steps - 1 - warm, 1);
  const double progress = static_cast<double>(step - warm) / static_cast<double>(span);
  return final_lr + (peak - final_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

LoadedSequence as_training_sequence(const SyntheticSequence& seq) {
  LoadedSequence out;
  out.frames = seq.frames;
  out.gt_fwd = seq.gt_fwd;
  out.gt_bwd = seq.gt_bwd;
  out.occl_fwd = seq.occl_fwd;
  out.occl_bwd = seq.occl_bwd;
  return out;
}

namespace {

void check_sequences(const std::vector<LoadedSequence>& data, int downsample) {
  if (data.empty()) fail("no sequences");
  for (size_t i = 0; i < data.size(); ++i) {
    const auto& seq = data[i];
    if (seq.frames.size() < 3)
      fail("sequence " + std::to_string(i) + " has " + std::to_string(seq.frames.size()) +
           " frames; need at least 3");
    const size_t interior = seq.frames.size() - 2;
    if (seq.gt_fwd.size() != interior || seq.gt_bwd.size() != interior)
      fail("sequence " + std::to_string(i) + " ground truth does not cover its interior frames");
    const int h = seq.frames[0].dim(1), w = seq.frames[0].dim(2);
    if (h % downsample != 0 || w % downsample != 0)
      fail("sequence " + std::to_string(i) + " is " + std::to_string(w) + "x" +
           std::to_string(h) + ", not divisible by the feature stride " +
           std::to_string(downsample));
  }
}

}  // namespace

TrainLog train(const TrainConfig& cfg, FlowModel<float>& model,
               const std::vector<LoadedSequence>& data, std::ostream* log) {
  validate(cfg);
  check_sequences(data, model.cfg.downsample);

  auto params = named_params(model);
  AdamW opt(params, cfg.weight_decay);
  Rng shuffle_rng(cfg.seed ^ 0x5ce6e2b293f4d1c7ull);
  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  size_t pos = order.size();  // forces a shuffle before the first batch

  TrainLog result;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<size_t> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (pos >= order.size()) {
        for (size_t i = order.size() - 1; i > 0; --i)
          std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
        pos = 0;
      }
      batch.push_back(order[pos++]);
    }

    opt.zero_grad();
    Tensor<float> loss;
    for (size_t idx : batch) {
      const auto& seq = data[idx];
      auto preds = model_forward(model, std::span<const Tensor<float>>(seq.frames), cfg.iters);
      auto l = sequence_loss(preds, seq.gt_fwd, seq.gt_bwd, cfg.gamma, cfg.include_k0,
                             cfg.supervised_centers);
      loss = loss.defined() ? add(loss, l) : l;
    }
    loss = affine(loss, 1.0f / static_cast<float>(cfg.batch_size), 0.0f);

    const double loss_value = loss.item();
    if (!std::isfinite(loss_value))
      fail("non-finite loss " + std::to_string(loss_value) + " at step " + std::to_string(step));
    backward(loss);
    opt.clip_global_norm(cfg.clip_norm);
    const double lr = one_cycle_lr(step, cfg.steps, cfg.warmup_frac, cfg.lr_peak, cfg.lr_final);
    opt.step(lr);

    result.losses.push_back(loss_value);
    result.lrs.push_back(lr);
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps))
      *log << "step=" << step << " loss=" << loss_value << " lr=" << lr << "\n" << std::flush;
  }
  return result;
}

namespace {

// Pools per-center fields into one long pixel row so the metrics see a single
// population regardless of how many sequences contributed.
struct MetricPool {
  std::vector<float> pu, pv, gu, gv, occ;

  void append(const Tensor<float>& pred, const Tensor<float>& gt, const Tensor<float>& occl) {
    if (pred.shape() != gt.shape()) fail("evaluate: prediction/ground-truth shape mismatch");
    const auto n = static_cast<size_t>(gt.dim(1)) * gt.dim(2);
    const auto p = pred.data(), g = gt.data(), o = occl.data();
    pu.insert(pu.end(), p.begin(), p.begin() + n);
    pv.insert(pv.end(), p.begin() + n, p.begin() + 2 * n);
    gu.insert(gu.end(), g.begin(), g.begin() + n);
    gv.insert(gv.end(), g.begin() + n, g.begin() + 2 * n);
    occ.insert(occ.end(), o.begin(), o.begin() + n);
  }

  MetricsReport metrics() const {
    if (pu.empty()) fail("evaluate: nothing to score");
    const int n = static_cast<int>(pu.size());
    std::vector<float> p(pu), g(gu);
    p.insert(p.end(), pv.begin(), pv.end());
    g.insert(g.end(), gv.begin(), gv.end());
    auto pred = Tensor<float>::from_vector({2, 1, n}, std::move(p));
    auto gt = Tensor<float>::from_vector({2, 1, n}, std::move(g));
    auto occl = Tensor<float>::from_vector({1, n}, occ);
    return band_metrics(pred, gt, occl);
  }
};

}  // namespace

EvalResult evaluate(const FlowModel<float>& model, const std::vector<LoadedSequence>& data,
                    const EvalOptions& opts) {
  if (opts.iters < 1) fail("evaluate: iters must be >= 1");
  check_sequences(data, model.cfg.downsample);
  NoGradGuard no_grad;

  MetricPool fwd, bwd, bwd_rev;
  for (const auto& seq : data) {
    auto preds = model_forward(model, std::span<const Tensor<float>>(seq.frames), opts.iters);
    const int units = static_cast<int>(preds.size());
    for (int u = 0; u < units; ++u) {
      const auto& last = preds[u].flows_img.back();
      fwd.append(last.next, seq.gt_fwd[u], seq.occl_fwd[u]);
      bwd.append(last.prev, seq.gt_bwd[u], seq.occl_bwd[u]);
    }
    if (opts.reverse_cross_check) {
      std::vector<Tensor<float>> reversed(seq.frames.rbegin(), seq.frames.rend());
      auto rpreds = model_forward(model, std::span<const Tensor<float>>(reversed), opts.iters);
      const int f = static_cast<int>(seq.frames.size());
      for (int u = 0; u < units; ++u) {
        // Unit u of the reversed clip is centered on original frame t; its
        // "next" direction points at original t-1.
        const int t = f - 2 - u;
        bwd_rev.append(rpreds[u].flows_img.back().next, seq.gt_bwd[t - 1], seq.occl_bwd[t - 1]);
      }
    }
  }

  EvalResult result;
  result.forward = fwd.metrics();
  result.backward = bwd.metrics();
  if (opts.reverse_cross_check) result.backward_reversed = bwd_rev.metrics();
  return result;
}

std::string format_eval(const EvalResult& result) {
  std::string out;
  out += "[forward]\n" + format_metrics(result.forward);
  out += "[backward]\n" + format_metrics(result.backward);
  if (result.backward_reversed)
    out += "[backward_reversed]\n" + format_metrics(*result.backward_reversed);
  return out;
}

AblationReport ablate(const TrainConfig& base, const std::vector<LoadedSequence>& train_data,
                      const std::vector<LoadedSequence>& eval_data, std::ostream* log) {
  validate(base);
  AblationReport report;

  auto run_one = [&](const std::string& name, ModelConfig mc) {
    TrainConfig cfg = base;
    cfg.model = mc;
    if (log) *log << "ablate: " << name << "\n";
    Rng rng(cfg.seed);
    auto model = make_flow_model<float>(rng, mc);
    AblationRun run;
    run.name = name;
    run.model_cfg = mc;
    run.log = train(cfg, model, train_data, log);
    EvalOptions eopts;
    eopts.iters = cfg.iters;
    run.eval = evaluate(model, eval_data, eopts);
    report.runs.push_back(std::move(run));
  };

  run_one("baseline", base.model);
  {
    auto mc = base.model;
    mc.propagation = false;
    run_one("no_propagation", mc);
  }
  {
    auto mc = base.model;
    mc.recurrent_fusion = false;
    mc.propagation = false;  // per-unit path; nothing to propagate
    run_one("one_shot_fusion", mc);
  }
  {
    auto mc = base.model;
    mc.bidirectional = false;
    mc.recurrent_fusion = true;
    mc.propagation = false;
    run_one("uni_directional", mc);
  }

  const double base_fwd = report.runs[0].eval.forward.aepe;
  const double base_bwd = report.runs[0].eval.backward.aepe;
  std::string table;
  char line[200];
  std::snprintf(line, sizeof line, "%-18s %9s %9s %8s %8s %11s %11s\n", "model", "aepe_fwd",
                "aepe_bwd", "fl_fwd", "fl_bwd", "d_aepe_fwd", "d_aepe_bwd");
  table += line;
  for (const auto& run : report.runs) {
    std::snprintf(line, sizeof line, "%-18s %9.4f %9.4f %8.2f %8.2f %+11.4f %+11.4f\n",
                  run.name.c_str(), run.eval.forward.aepe, run.eval.backward.aepe,
                  run.eval.forward.fl_all, run.eval.backward.fl_all,
                  run.eval.forward.aepe - base_fwd, run.eval.backward.aepe - base_bwd);
    table += line;
  }
  report.table = std::move(table);
  return report;
}

#define TRIFLOW_INSTANTIATE_TRAIN(S)                                                       \
  template FlowModel<S> make_flow_model<S>(Rng&, const ModelConfig&);                      \
  template std::vector<NamedParam<S>> named_params<S>(FlowModel<S>&);                      \
  template std::vector<UnitPrediction<S>> model_forward<S>(const FlowModel<S>&,            \
                                                           std::span<const Tensor<S>>, int); \
  template Tensor<S> sequence_loss<S>(const std::vector<UnitPrediction<S>>&,               \
                                      const std::vector<Tensor<S>>&,                       \
                                      const std::vector<Tensor<S>>&, double, bool, int);

TRIFLOW_INSTANTIATE_TRAIN(float)
TRIFLOW_INSTANTIATE_TRAIN(double)

#undef TRIFLOW_INSTANTIATE_TRAIN

}  // namespace triflow
