#include "triflow/corr.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "kernels.hpp"
#include "triflow/threading.hpp"

namespace triflow {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

template <typename S>
Tensor<S> all_pairs(const Tensor<S>& feat_center, const Tensor<S>& feat_target, S scale) {
  const int d = feat_center.dim(0);
  const int h = feat_center.dim(1);
  const int w = feat_center.dim(2);
  const int hw = h * w;
  auto fc = reshape(feat_center, {d, hw});
  auto ft = reshape(feat_target, {d, hw});
  auto corr = matmul(fc, ft, /*trans_a=*/true, /*trans_b=*/false);  // [hw, hw]
  if (scale != S(1)) corr = affine(corr, scale, S(0));
  return reshape(corr, {h, w, h, w});
}

}  // namespace

template <typename S>
DualCorrelationVolume<S> build_dual_corr(const Tensor<S>& feat_center, const Tensor<S>& feat_prev,
                                         const Tensor<S>& feat_next, int levels, bool normalize) {
  if (levels < 1) fail("build_dual_corr: levels must be >= 1");
  const Shape& s = feat_center.shape();
  if (s.size() != 3) fail("build_dual_corr: features must be [D, H, W], got " + shape_str(s));
  if (feat_prev.shape() != s || feat_next.shape() != s)
    fail("build_dual_corr: feature shapes disagree: " + shape_str(s) + " vs " +
         shape_str(feat_prev.shape()) + " vs " + shape_str(feat_next.shape()));

  DualCorrelationVolume<S> vol;
  vol.h = s[1];
  vol.w = s[2];
  vol.scale_norm = normalize ? S(1) / static_cast<S>(std::sqrt(static_cast<double>(s[0]))) : S(1);
  vol.pyr_prev.push_back(all_pairs(feat_center, feat_prev, vol.scale_norm));
  vol.pyr_next.push_back(all_pairs(feat_center, feat_next, vol.scale_norm));
  for (int l = 1; l < levels; ++l) {
    vol.pyr_prev.push_back(avg_pool2(vol.pyr_prev.back()));
    vol.pyr_next.push_back(avg_pool2(vol.pyr_next.back()));
  }
  return vol;
}

namespace {

// One direction of the windowed multi-scale lookup, as a single autodiff node
// whose parents are the pyramid levels plus the flow field. bilinear_sample
// cannot express this (every source pixel samples its own target plane).
template <typename S>
Tensor<S> lookup_one(const std::vector<Tensor<S>>& pyr, const Tensor<S>& flow,
                     const LookupWindowSpec& spec, const char* name) {
  const int levels = spec.levels;
  const int radius = spec.radius;
  const int h = pyr[0].dim(0);
  const int w = pyr[0].dim(1);
  if (flow.shape() != Shape{2, h, w})
    fail(std::string(name) + ": flow shape " + shape_str(flow.shape()) + " does not match volume " +
         std::to_string(h) + "x" + std::to_string(w));
  const int win = spec.window();
  const int c_out = spec.channels_per_direction();
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;

  std::vector<Tensor<S>> parents(pyr.begin(), pyr.begin() + levels);
  parents.push_back(flow);

  auto out = detail::make_result<S>(Shape{c_out, h, w}, name, parents,
                                    [levels, radius, h, w, win, hw](detail::TensorNode<S>& self) {
    auto& pflow = *self.parents[levels];
    const S* g = self.grad.data();
    const S* u = pflow.data.data();
    const S* v = pflow.data.data() + hw;
    const bool need_flow = pflow.requires_grad;
    S* gflow = need_flow ? pflow.grad_data() : nullptr;

    // Pre-allocate every gradient buffer before entering the parallel region.
    std::vector<S*> gvol(static_cast<size_t>(levels), nullptr);
    for (int l = 0; l < levels; ++l)
      if (self.parents[l]->requires_grad) gvol[static_cast<size_t>(l)] = self.parents[l]->grad_data();

    // Each source pixel owns its own target-plane slice of every level's
    // gradient and its own flow-gradient entries, so pixels parallelize.
    parallel_for(hw, [&](std::int64_t i0, std::int64_t i1) {
      for (std::int64_t idx = i0; idx < i1; ++idx) {
        const int j = static_cast<int>(idx % w);
        const int i = static_cast<int>(idx / w);
        S du = 0, dv = 0;
        for (int l = 0; l < levels; ++l) {
          auto& plevel = *self.parents[l];
          const int ht = plevel.shape[2];
          const int wt = plevel.shape[3];
          const std::int64_t plane = static_cast<std::int64_t>(ht) * wt;
          const S inv = S(1) / static_cast<S>(1 << l);
          const S cx0 = (static_cast<S>(j) + u[idx]) * inv;
          const S cy0 = (static_cast<S>(i) + v[idx]) * inv;
          const S* tplane = plevel.data.data() + idx * plane;
          S* gplane = gvol[static_cast<size_t>(l)] ? gvol[static_cast<size_t>(l)] + idx * plane : nullptr;
          for (int dy = -radius; dy <= radius; ++dy)
            for (int dx = -radius; dx <= radius; ++dx) {
              const int ch = (l * win + (dy + radius)) * win + (dx + radius);
              const S gv = g[ch * hw + idx];
              const auto cell = detail::bilinear_cell(cx0 + static_cast<S>(dx),
                                                      cy0 + static_cast<S>(dy), wt, ht);
              if (gplane) {
                gplane[static_cast<std::int64_t>(cell.y0) * wt + cell.x0] += gv * (S(1) - cell.tx) * (S(1) - cell.ty);
                gplane[static_cast<std::int64_t>(cell.y0) * wt + cell.x1] += gv * cell.tx * (S(1) - cell.ty);
                gplane[static_cast<std::int64_t>(cell.y1) * wt + cell.x0] += gv * (S(1) - cell.tx) * cell.ty;
                gplane[static_cast<std::int64_t>(cell.y1) * wt + cell.x1] += gv * cell.tx * cell.ty;
              }
              if (need_flow) {
                const S v00 = tplane[static_cast<std::int64_t>(cell.y0) * wt + cell.x0];
                const S v01 = tplane[static_cast<std::int64_t>(cell.y0) * wt + cell.x1];
                const S v10 = tplane[static_cast<std::int64_t>(cell.y1) * wt + cell.x0];
                const S v11 = tplane[static_cast<std::int64_t>(cell.y1) * wt + cell.x1];
                if (cell.gx) du += gv * inv * ((S(1) - cell.ty) * (v01 - v00) + cell.ty * (v11 - v10));
                if (cell.gy) dv += gv * inv * ((S(1) - cell.tx) * (v10 - v00) + cell.tx * (v11 - v01));
              }
            }
        }
        if (need_flow) {
          gflow[idx] += du;
          gflow[hw + idx] += dv;
        }
      }
    });
  });

  const S* u = flow.data().data();
  const S* v = flow.data().data() + hw;
  S* op_ = out.data_mut().data();
  parallel_for(hw, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t idx = i0; idx < i1; ++idx) {
      const int j = static_cast<int>(idx % w);
      const int i = static_cast<int>(idx / w);
      for (int l = 0; l < levels; ++l) {
        const Tensor<S>& level = pyr[static_cast<size_t>(l)];
        const int ht = level.dim(2);
        const int wt = level.dim(3);
        const std::int64_t plane = static_cast<std::int64_t>(ht) * wt;
        const S inv = S(1) / static_cast<S>(1 << l);
        const S cx0 = (static_cast<S>(j) + u[idx]) * inv;
        const S cy0 = (static_cast<S>(i) + v[idx]) * inv;
        const S* tplane = level.data().data() + idx * plane;
        for (int dy = -radius; dy <= radius; ++dy)
          for (int dx = -radius; dx <= radius; ++dx) {
            const int ch = (l * win + (dy + radius)) * win + (dx + radius);
            const auto cell = detail::bilinear_cell(cx0 + static_cast<S>(dx),
                                                    cy0 + static_cast<S>(dy), wt, ht);
            op_[ch * hw + idx] = detail::bilinear_value(tplane, wt, cell);
          }
      }
    }
  });
  return out;
}

}  // namespace

namespace {

template <typename S>
void check_spec(const DualCorrelationVolume<S>& vol, const LookupWindowSpec& spec) {
  if (spec.levels < 1 || spec.radius < 0)
    fail("lookup: levels must be >= 1 and radius >= 0");
  if (spec.levels > vol.levels())
    fail("lookup: spec wants " + std::to_string(spec.levels) + " levels but volume has " +
         std::to_string(vol.levels()));
}

}  // namespace

template <typename S>
CorrLookup<S> lookup(const DualCorrelationVolume<S>& vol, const FlowPair<S>& flows,
                     const LookupWindowSpec& spec) {
  check_spec(vol, spec);
  CorrLookup<S> result;
  result.c_prev = lookup_one(vol.pyr_prev, flows.prev, spec, "corr_lookup_prev");
  result.c_next = lookup_one(vol.pyr_next, flows.next, spec, "corr_lookup_next");
  return result;
}

template <typename S>
Tensor<S> lookup_dir(const DualCorrelationVolume<S>& vol, const Tensor<S>& flow,
                     bool next_direction, const LookupWindowSpec& spec) {
  check_spec(vol, spec);
  return next_direction ? lookup_one(vol.pyr_next, flow, spec, "corr_lookup_next")
                        : lookup_one(vol.pyr_prev, flow, spec, "corr_lookup_prev");
}

#define TRIFLOW_INSTANTIATE_CORR(S)                                                           \
  template DualCorrelationVolume<S> build_dual_corr<S>(const Tensor<S>&, const Tensor<S>&,    \
                                                       const Tensor<S>&, int, bool);          \
  template CorrLookup<S> lookup<S>(const DualCorrelationVolume<S>&, const FlowPair<S>&,       \
                                   const LookupWindowSpec&);                                  \
  template Tensor<S> lookup_dir<S>(const DualCorrelationVolume<S>&, const Tensor<S>&, bool,   \
                                   const LookupWindowSpec&);

TRIFLOW_INSTANTIATE_CORR(float)
TRIFLOW_INSTANTIATE_CORR(double)

}  // namespace triflow
