#pragma once

// Internal dense kernels shared by the autodiff ops. Everything here is plain
// serial-per-chunk code: callers split work so each output cell is written by
// exactly one thread, keeping results independent of the worker count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "triflow/threading.hpp"

namespace triflow::detail {

// c [M, N] = (or +=) a [M, K] * b [K, N], all row-major.
template <typename S>
void gemm_nn(int m, int n, int k, const S* a, const S* b, S* c, bool accumulate) {
  parallel_for(m, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      S* crow = c + i * n;
      if (!accumulate) std::fill(crow, crow + n, S(0));
      const S* arow = a + i * k;
      for (int kk = 0; kk < k; ++kk) {
        const S av = arow[kk];
        const S* brow = b + static_cast<std::int64_t>(kk) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

// c [M, N] = (or +=) a [M, K] * b^T where b is [N, K] row-major.
template <typename S>
void gemm_nt(int m, int n, int k, const S* a, const S* b, S* c, bool accumulate) {
  parallel_for(m, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      const S* arow = a + i * k;
      S* crow = c + i * n;
      for (int j = 0; j < n; ++j) {
        const S* brow = b + static_cast<std::int64_t>(j) * k;
        S acc = 0;
        for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        if (accumulate)
          crow[j] += acc;
        else
          crow[j] = acc;
      }
    }
  });
}

// dst [N, M] = src [M, N] transposed.
template <typename S>
void transpose(int m, int n, const S* src, S* dst) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) dst[static_cast<std::int64_t>(j) * m + i] = src[static_cast<std::int64_t>(i) * n + j];
}

// col is [C*k*k, Ho*Wo]; row (c*k + ky)*k + kx holds the input tap for that
// kernel offset at every output location (zero where the tap falls in padding).
template <typename S>
void im2col(const S* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, S* col) {
  parallel_for(static_cast<std::int64_t>(c) * k * k, [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t r = r0; r < r1; ++r) {
      const int kx = static_cast<int>(r % k);
      const int ky = static_cast<int>((r / k) % k);
      const int ci = static_cast<int>(r / (k * k));
      const S* plane = x + static_cast<std::int64_t>(ci) * h * w;
      S* out = col + r * ho * wo;
      for (int oy = 0; oy < ho; ++oy) {
        const int iy = oy * stride + static_cast<int>(ky) - pad;
        for (int ox = 0; ox < wo; ++ox) {
          const int ix = ox * stride + kx - pad;
          const bool in = iy >= 0 && iy < h && ix >= 0 && ix < w;
          out[static_cast<std::int64_t>(oy) * wo + ox] = in ? plane[static_cast<std::int64_t>(iy) * w + ix] : S(0);
        }
      }
    }
  });
}

// Scatter-add of a col buffer back onto the input layout; inverse of im2col.
// Parallel over input channels: all col rows of one channel stay on one worker.
template <typename S>
void col2im_add(const S* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo, S* dx) {
  parallel_for(c, [&](std::int64_t c0, std::int64_t c1) {
    for (std::int64_t ci = c0; ci < c1; ++ci) {
      S* plane = dx + ci * h * w;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const S* src = col + ((ci * k + ky) * k + kx) * ho * wo;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= w) continue;
              plane[static_cast<std::int64_t>(iy) * w + ix] += src[static_cast<std::int64_t>(oy) * wo + ox];
            }
          }
        }
      }
    }
  });
}

// One bilinear sampling cell. Coordinates clamp to the border; at the upper
// edge the cell is right-anchored so the fractional part stays in [0, 1].
// gx/gy report whether the coordinate still moves the sample (false once the
// clamp is active), which is the pass-through mask for coordinate gradients.
template <typename S>
struct BilinearCell {
  int x0, x1, y0, y1;
  S tx, ty;
  bool gx, gy;
};

template <typename S>
inline BilinearCell<S> bilinear_cell(S x, S y, int w, int h) {
  BilinearCell<S> cell;
  cell.gx = x >= S(0) && x <= S(w - 1);
  cell.gy = y >= S(0) && y <= S(h - 1);
  const S cx = std::min(std::max(x, S(0)), S(w - 1));
  const S cy = std::min(std::max(y, S(0)), S(h - 1));
  int x0 = static_cast<int>(std::floor(cx));
  int y0 = static_cast<int>(std::floor(cy));
  x0 = std::min(std::max(x0, 0), std::max(0, w - 2));
  y0 = std::min(std::max(y0, 0), std::max(0, h - 2));
  cell.x0 = x0;
  cell.y0 = y0;
  cell.x1 = std::min(x0 + 1, w - 1);
  cell.y1 = std::min(y0 + 1, h - 1);
  cell.tx = cx - S(x0);
  cell.ty = cy - S(y0);
  return cell;
}

template <typename S>
inline S bilinear_value(const S* plane, int w, const BilinearCell<S>& c) {
  const S v00 = plane[static_cast<std::int64_t>(c.y0) * w + c.x0];
  const S v01 = plane[static_cast<std::int64_t>(c.y0) * w + c.x1];
  const S v10 = plane[static_cast<std::int64_t>(c.y1) * w + c.x0];
  const S v11 = plane[static_cast<std::int64_t>(c.y1) * w + c.x1];
  return (S(1) - c.ty) * ((S(1) - c.tx) * v00 + c.tx * v01) + c.ty * ((S(1) - c.tx) * v10 + c.tx * v11);
}

}  // namespace triflow::detail
