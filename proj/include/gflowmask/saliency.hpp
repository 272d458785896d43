#pragma once

#include <string>

#include "gflowmask/data.hpp"
#include "gflowmask/gflowout.hpp"

namespace gfm {

struct Heatmap {
    Tensor values; // [h, w] in [0, 1]
    std::string source_site;
    int class_index = 0;
};

// Gradient-weighted class activation map at one dropout site, computed on
// the deterministic expected-mask pass: alpha_k = spatial mean of
// d logit_c / d A_k, raw map = ReLU(sum_k alpha_k A_k), then min-max
// normalization and bilinear upsampling to the input resolution. Parameter
// gradients touched by the backward pass are zeroed before returning.
Heatmap grad_cam(const Backbone& bb, const GFlowOut& g, const Tensor& x,
                 int class_index, std::size_t site);

// Half-pixel-centered bilinear resampling of a [h, w] map.
Tensor upsample_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w);

// out = 0.5 * img + 0.5 * colormap(heatmap) with a linear blue-to-red map
// (R = v, G = 0, B = 1 - v), clipped to [0, 1]. Heatmap must match the
// image size.
ImageSample overlay(const Heatmap& hm, const ImageSample& img);

// 8-bit binary PGM (P5), clipped and rounded like write_ppm.
void write_pgm(const std::string& path, const Tensor& gray);

} // namespace gfm
