#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "triflow/config.hpp"
#include "triflow/flowio.hpp"
#include "triflow/propagation.hpp"
#include "triflow/synth.hpp"

namespace triflow {

// Everything a training run needs beyond the architecture itself.
struct TrainConfig {
  ModelConfig model;

  int iters = 12;           // refinement iterations N during training
  double gamma = 0.85;      // per-iteration loss decay
  bool include_k0 = false;  // also charge the zero initialization (a constant)
  int supervised_centers = 0;  // first T interior frames per clip; 0 = all

  int steps = 2000;
  int batch_size = 2;
  double lr_peak = 2.5e-4;
  double lr_final = 2.5e-6;
  double warmup_frac = 0.1;  // fraction of steps ramping up to the peak
  double weight_decay = 1e-5;
  double clip_norm = 1.0;  // global gradient-norm ceiling; 0 disables
  std::uint64_t seed = 1;
  int log_every = 1;
};

void validate(const TrainConfig& cfg);  // throws on nonsense

// Binding to the flat key=value format (keys "model.*" / "train.*"). Unknown
// keys in those sections are rejected so typos surface instead of silently
// falling back to defaults.
TrainConfig train_config_from(const KeyValueConfig& kv);
KeyValueConfig to_key_values(const TrainConfig& cfg);
DatasetSpec dataset_spec_from(const KeyValueConfig& kv);  // keys "data.*"

// One model handle covering the ablation matrix: the joint bi-directional
// config runs the multi-frame propagation model; the other modes run the
// tri-frame unit independently per interior frame.
template <typename S>
struct FlowModel {
  ModelConfig cfg;
  bool multi_frame = false;
  ClipModel<S> clip;  // defined when multi_frame
  TriModel<S> tri;    // defined otherwise
};

template <typename S>
FlowModel<S> make_flow_model(Rng& rng, const ModelConfig& cfg);

template <typename S>
std::vector<NamedParam<S>> named_params(FlowModel<S>& model);

// Predictions for every interior frame of the clip, unit order.
template <typename S>
std::vector<UnitPrediction<S>> model_forward(const FlowModel<S>& model,
                                             std::span<const Tensor<S>> frames, int iters);

// Weighted multi-iteration supervision: per center t and iteration k = 1..N,
// gamma^(N-k) times the mean absolute error of both directions against the
// ground truth, summed over centers. Image-resolution flows throughout.
// include_k0 adds the (parameter-free) zero-initialization residual at weight
// gamma^N. Returns a scalar graph tensor.
template <typename S>
Tensor<S> sequence_loss(const std::vector<UnitPrediction<S>>& preds,
                        const std::vector<Tensor<S>>& gt_fwd, const std::vector<Tensor<S>>& gt_bwd,
                        double gamma, bool include_k0 = false, int supervised_centers = 0);

// Decoupled weight-decay Adam over named parameters. Moments are kept in
// double so accumulation order quirks cannot leak into float updates.
class AdamW {
 public:
  explicit AdamW(std::vector<NamedParam<float>> params, double weight_decay, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8);

  void zero_grad();
  // Scales all gradients so their joint norm is at most max_norm (0 = off);
  // returns the pre-clip norm.
  double clip_global_norm(double max_norm);
  // One update at the given rate. Parameters without an accumulated gradient
  // are skipped entirely (no decay either). lr = 0 changes nothing.
  void step(double lr);

  std::int64_t steps_taken() const { return t_; }

 private:
  std::vector<NamedParam<float>> params_;
  std::vector<std::vector<double>> m_, v_;
  double weight_decay_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

// One-cycle schedule: linear ramp from peak/25 to peak over the warmup steps,
// then cosine decay to final_lr.
double one_cycle_lr(std::int64_t step, std::int64_t total_steps, double warmup_frac, double peak,
                    double final_lr);

struct TrainLog {
  std::vector<double> losses;  // one entry per step
  std::vector<double> lrs;
};

// Adapts generated sequences for training without touching the filesystem.
LoadedSequence as_training_sequence(const SyntheticSequence& seq);

// Optimizes the model in place. Deterministic for a fixed config and data:
// seeded epoch shuffles, fixed batch partition, single graph per step.
// Writes "step=<n> loss=<x> lr=<x>" lines to log when given.
TrainLog train(const TrainConfig& cfg, FlowModel<float>& model,
               const std::vector<LoadedSequence>& data, std::ostream* log = nullptr);

struct EvalOptions {
  int iters = 12;
  // Additionally reverse the frame order and read the swapped outputs as a
  // second estimate of the backward metrics.
  bool reverse_cross_check = false;
};

struct EvalResult {
  MetricsReport forward;   // f_{t->t+1} against the forward ground truth
  MetricsReport backward;  // f_{t->t-1} against the backward ground truth
  std::optional<MetricsReport> backward_reversed;
};

// Pools every interior frame of every sequence into one pixel population per
// direction, then runs the standard metrics once per direction.
EvalResult evaluate(const FlowModel<float>& model, const std::vector<LoadedSequence>& data,
                    const EvalOptions& opts = {});

std::string format_eval(const EvalResult& result);

struct AblationRun {
  std::string name;
  ModelConfig model_cfg;
  TrainLog log;
  EvalResult eval;
};

struct AblationReport {
  std::vector<AblationRun> runs;  // baseline first
  std::string table;              // aligned side-by-side summary with deltas
};

// Trains and evaluates the baseline plus the three single-flag variants
// (state propagation off, one-shot fusion, uni-directional), all from the
// same seed and data.
AblationReport ablate(const TrainConfig& base, const std::vector<LoadedSequence>& train_data,
                      const std::vector<LoadedSequence>& eval_data, std::ostream* log = nullptr);

}  // namespace triflow
