#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fmpx/rng.hpp"

namespace fmpx {

// Interleaved 8-bit RGB, row-major.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> pixels;  // height * width * 3

    uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
};

Image make_image(int height, int width, uint8_t fill = 0);

// Binary PPM (P6), maxval 255. Comments and arbitrary whitespace are
// accepted in the header; anything else is a decode error.
Image read_ppm(std::istream& in);
Image read_ppm(const std::string& path);
void write_ppm(std::ostream& out, const Image& img);
void write_ppm(const std::string& path, const Image& img);

// Pixel-center bilinear resampling: src = (dst + 0.5) * scale - 0.5,
// clamped at the borders.
Image resize_bilinear(const Image& img, int out_height, int out_width);

Image crop(const Image& img, int top, int left, int height, int width);
Image center_crop(const Image& img, int height, int width);
Image flip_horizontal(const Image& img);
Image flip_vertical(const Image& img);

// Warps with the forward map out = M * (in - center) + center + (tx, ty),
// where M = [m[0] m[1]; m[2] m[3]] acts on (x, y). Output pixels are
// bilinearly sampled from the inverse map; anything falling outside the
// input is black.
Image affine_warp(const Image& img, const std::array<double, 4>& m, double tx, double ty);

// Separable Gaussian blur, radius ceil(3*sigma), replicated borders.
// sigma <= 0 returns the input unchanged.
Image gaussian_blur(const Image& img, float sigma);

// v' = 127 + alpha * (v - 127) per channel, clipped.
Image adjust_contrast(const Image& img, float alpha);

// One N(0, sigma) draw per pixel location, added to all three channels.
Image add_gaussian_noise(const Image& img, float sigma, Rng& rng);

// HSV with h in [0, 360), s and v in [0, 1].
struct Hsv {
    float h, s, v;
};
Hsv rgb_to_hsv(uint8_t r, uint8_t g, uint8_t b);
std::array<uint8_t, 3> hsv_to_rgb(const Hsv& hsv);

// Adds delta to the HSV saturation channel expressed on a 0..255 scale.
Image add_saturation(const Image& img, int delta);

// Scales the HSV value (brightness) channel.
Image multiply_brightness(const Image& img, float factor);

}  // namespace fmpx
