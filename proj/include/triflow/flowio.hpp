#pragma once

#include <optional>
#include <string>

#include "triflow/tensor.hpp"

namespace triflow {

// Flow fields are [2,H,W] float tensors (channel 0 = u/horizontal, channel 1
// = v/vertical), in image pixels. On disk: the common interchange layout —
// the float 202021.25 as magic, int32 width, int32 height, then row-major
// interleaved (u,v) float32 pairs, everything little-endian.
void write_flo(const std::string& path, const Tensor<float>& flow);
Tensor<float> read_flo(const std::string& path);

// Color-wheel rendering: hue = atan2(v,u), saturation = |f|/max_magnitude
// (clamped), full brightness; zero flow is white. max_magnitude <= 0 picks
// the field's 99th-percentile magnitude. Returns an RGB image.
Tensor<float> colorize_flow(const Tensor<float>& flow, float max_magnitude = 0.0f);

// Mean end-point error over pixels where valid != 0. valid is [H,W]; an
// undefined (empty) tensor means all pixels count. Throws if none do.
double aepe(const Tensor<float>& pred, const Tensor<float>& gt, const Tensor<float>& valid = {});

// Percentage of valid pixels whose end-point error exceeds both 3 px and 5%
// of the ground-truth magnitude (strictly).
double fl_all(const Tensor<float>& pred, const Tensor<float>& gt, const Tensor<float>& valid = {});

struct BandStat {
  double value = 0.0;     // mean EPE over the band
  std::int64_t pixels = 0;
};

// Absent bands (no pixels) are empty optionals, never zeros.
struct MetricsReport {
  double aepe = 0.0;
  double fl_all = 0.0;
  std::optional<BandStat> s0_10, s10_40, s40_plus;  // by ground-truth magnitude
  std::optional<BandStat> matched, unmatched;       // by occlusion mask
};

// Everything at once: overall AEPE / Fl-all, AEPE per ground-truth magnitude
// band ([0,10), [10,40), [40,inf)), and matched (occl == 0) vs unmatched
// splits. occl may be undefined when no occlusion info exists.
MetricsReport band_metrics(const Tensor<float>& pred, const Tensor<float>& gt,
                           const Tensor<float>& occl = {});

// key=value lines, one metric per line; absent bands are omitted.
std::string format_metrics(const MetricsReport& report);

}  // namespace triflow
