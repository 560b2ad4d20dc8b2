#pragma once

// Central-difference verification of reverse-mode gradients. The function
// under test must be a pure, deterministic map from the given leaves to a
// scalar; it is re-evaluated under NoGradGuard for every probe.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "triflow/rng.hpp"
#include "triflow/tensor.hpp"

namespace triflow {

struct GradCheckOptions {
  double step = 1e-3;             // central-difference half-step
  double small_cutoff = 1e-4;     // analytic values below this use the absolute criterion
  int max_probes_per_tensor = 0;  // 0 = probe every element
  std::uint64_t probe_seed = 17;  // subsampling pattern when capped
};

struct GradCheckResult {
  // Relative mismatch where the analytic gradient is >= small_cutoff, and
  // absolute mismatch where it is smaller (relative error is meaningless
  // against a near-zero reference).
  double max_rel_err = 0.0;
  double max_abs_err_small = 0.0;
  std::string worst;  // "<tensor#>/<flat index>" of the largest relative mismatch
  std::int64_t probes = 0;

  bool ok(double rel_tol = 1e-4, double abs_tol = 1e-6) const {
    return probes > 0 && max_rel_err <= rel_tol && max_abs_err_small <= abs_tol;
  }
};

// Leaves must have requires_grad set; fn() must rebuild the graph from their
// current data on every call.
inline GradCheckResult check_gradients(std::vector<Tensor<double>> leaves,
                                       const std::function<Tensor<double>()>& fn,
                                       const GradCheckOptions& opts = {}) {
  GradCheckResult result;

  for (auto& leaf : leaves) leaf.zero_grad();
  auto loss = fn();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) {
    if (leaf.has_grad()) {
      auto g = leaf.grad();
      analytic.emplace_back(g.begin(), g.end());
    } else {
      analytic.emplace_back(static_cast<size_t>(leaf.size()), 0.0);
    }
  }

  Rng probe_rng(opts.probe_seed);
  NoGradGuard no_grad;
  for (size_t t = 0; t < leaves.size(); ++t) {
    auto& leaf = leaves[t];
    const std::int64_t n = leaf.size();
    std::vector<std::int64_t> idx;
    if (opts.max_probes_per_tensor > 0 && n > opts.max_probes_per_tensor) {
      for (int i = 0; i < opts.max_probes_per_tensor; ++i)
        idx.push_back(static_cast<std::int64_t>(probe_rng.uniform_int(static_cast<std::uint64_t>(n))));
      std::sort(idx.begin(), idx.end());
      idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    } else {
      idx.resize(static_cast<size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    }

    auto data = leaf.data_mut();
    for (std::int64_t i : idx) {
      const double saved = data[static_cast<size_t>(i)];
      data[static_cast<size_t>(i)] = saved + opts.step;
      const double up = fn().item();
      data[static_cast<size_t>(i)] = saved - opts.step;
      const double down = fn().item();
      data[static_cast<size_t>(i)] = saved;

      const double numeric = (up - down) / (2.0 * opts.step);
      const double exact = analytic[t][static_cast<size_t>(i)];
      ++result.probes;
      if (std::abs(exact) < opts.small_cutoff) {
        result.max_abs_err_small = std::max(result.max_abs_err_small, std::abs(numeric - exact));
      } else {
        const double rel = std::abs(numeric - exact) / std::max(std::abs(numeric), std::abs(exact));
        if (rel > result.max_rel_err) {
          result.max_rel_err = rel;
          result.worst = std::to_string(t) + "/" + std::to_string(i);
        }
      }
    }
  }
  return result;
}

// Fills a tensor with uniform values in [lo, hi); handy for building oracle
// inputs whose magnitudes keep finite differences away from kinks.
template <typename S>
void fill_uniform(Tensor<S>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.data_mut()) v = static_cast<S>(rng.uniform(lo, hi));
}

template <typename S>
void fill_normal(Tensor<S>& t, Rng& rng, double mean, double stddev) {
  for (auto& v : t.data_mut()) v = static_cast<S>(rng.normal(mean, stddev));
}

}  // namespace triflow
