#pragma once

#include <string>

#include "triflow/tensor.hpp"

namespace triflow {

// Images are [C,H,W] float tensors with values in [0,1]; C is 1 (gray) or 3
// (RGB). Writers quantize to 8 bits; readers normalize back to [0,1].

// Binary PGM (P5) / PPM (P6).
void write_pnm(const std::string& path, const Tensor<float>& image);
Tensor<float> read_pnm(const std::string& path);

// Minimal 8-bit PNG: grayscale or RGB, non-interlaced. The reader handles all
// five scanline filters; the writer emits unfiltered rows.
void write_png(const std::string& path, const Tensor<float>& image);
Tensor<float> read_png(const std::string& path);

// Binary masks as [H,W] tensors of exactly 0 or 1, stored as 0/255 gray PNG.
void write_mask_png(const std::string& path, const Tensor<float>& mask);
Tensor<float> read_mask_png(const std::string& path);

}  // namespace triflow
