#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "fmpx/image.hpp"
#include "fmpx/model.hpp"
#include "fmpx/tensor.hpp"

namespace fmpx {

struct CamResult {
    std::vector<float> heatmap;  // height*width, row-major, in [0,1]
    int height = 0, width = 0;   // equals the input spatial dims
    int target_class = 0;
    std::string target_layer;
    std::vector<float> alphas;  // channel weights (mean gradient per map)
    bool zero_map = false;      // pre-normalization map was identically zero
};

// Valid target layers: stage2, stage3, stage4, stage5, fusion (default).
extern const std::array<const char*, 5> kCamLayers;

// Backpropagates the target class score to the chosen activation map,
// weights each channel by its mean gradient, applies ReLU, bilinearly
// upsamples to the input size, and min-max normalizes. A constant nonzero
// map normalizes to all ones; an identically zero map is returned as-is
// with zero_map set. Leaves the model in inference mode with grads cleared.
CamResult grad_cam(FastMpoxModel& model, const Tensor& input, int target_class,
                   const std::string& target_layer = "fusion");

// The combination step alone, on raw channel maps and their gradients
// (both channels*h*w, channel-major).
CamResult cam_from_maps(const std::vector<float>& activations,
                        const std::vector<float>& gradients, int channels, int h, int w,
                        int out_h, int out_w);

// Five-stop linear colormap: blue, cyan, green, yellow, red at
// t = 0, 0.25, 0.5, 0.75, 1.
std::array<uint8_t, 3> heat_color(float t);

Image colorize_heatmap(const CamResult& cam);

// alpha*color(heat) + (1-alpha)*image, rounded and clipped per channel.
Image overlay_heatmap(const Image& image, const CamResult& cam, float alpha = 0.4f);

// Raw normalized heatmap values, one CSV row per pixel row.
void write_heatmap_csv(std::ostream& out, const CamResult& cam);

}  // namespace fmpx
