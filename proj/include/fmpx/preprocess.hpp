#pragma once

#include <array>
#include <vector>

#include "fmpx/image.hpp"
#include "fmpx/rng.hpp"
#include "fmpx/tensor.hpp"

namespace fmpx {

constexpr int kInputSize = 224;
constexpr int kEvalResize = 256;
constexpr std::array<float, 3> kNormMean = {0.485f, 0.456f, 0.406f};
constexpr std::array<float, 3> kNormStd = {0.229f, 0.224f, 0.225f};

enum class PreprocessMode { Train, Eval };

// Train: random-resized-crop (area 8..100%, aspect 3/4..4/3) to 224 plus a
// coin-flip horizontal flip. Eval: resize the shorter side to 256, center
// crop 224. Both end with x/255 then per-channel (x - mean) / std and
// return a 3x224x224 tensor. Images under 32x32 are rejected.
Tensor preprocess(const Image& img, PreprocessMode mode, Rng& rng);
Tensor preprocess_eval(const Image& img);  // deterministic, no rng involved

// Inverse of the normalization step: 3xHxW tensor back to 8-bit pixels.
Image denormalize(const Tensor& t);

// Stacks same-shaped 3xHxW tensors into N x 3 x H x W.
Tensor stack_batch(const std::vector<Tensor>& items);

}  // namespace fmpx
