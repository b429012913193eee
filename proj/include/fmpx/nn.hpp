#pragma once

#include <optional>

#include "fmpx/rng.hpp"
#include "fmpx/tensor.hpp"

namespace fmpx {

enum class Activation { Gelu, Relu };

Tensor gelu(const Tensor& x);  // exact erf form, x * Phi(x)
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor activate(const Tensor& x, Activation act);

struct Conv2dLayer {
    Tensor weight;  // OutC x InC/groups x KH x KW
    std::optional<Tensor> bias;
    int stride = 1;
    int padding = 0;
    int groups = 1;
};

// Cross-correlation per group. Depthwise is groups == InC with one output
// channel per input channel.
Tensor conv2d_forward(const Conv2dLayer& layer, const Tensor& x);
Tensor depthwise_conv_forward(const Conv2dLayer& layer, const Tensor& x);

struct BatchNormLayer {
    Tensor gamma, beta;              // trainable, shape C
    Tensor running_mean, running_var;  // buffers, shape C
    float eps = 1e-5f;
    float momentum = 0.1f;  // running = (1-m)*running + m*batch
};

// Training mode normalizes with batch statistics over N,H,W (biased
// variance) and updates the running buffers; inference applies the stored
// affine transform. A 1-element reduction set in training is rejected.
Tensor batchnorm_forward(BatchNormLayer& layer, const Tensor& x, bool training);

Tensor maxpool2d(const Tensor& x, int kernel, int stride, int padding);
// Requires H and W divisible by kernel; stride == kernel (exact tiling).
Tensor avgpool2d(const Tensor& x, int kernel);
Tensor adaptive_avgpool_1x1(const Tensor& x);  // N x C x 1 x 1

std::pair<Tensor, Tensor> channel_split_half(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);

struct ChannelShuffleSpec {
    int groups = 2;
};

// reshape(g, C/g)-transpose permutation: channel i lands at
// (i mod (C/g))*g + i/(C/g).
Tensor channel_shuffle(const Tensor& x, const ChannelShuffleSpec& spec);

struct DropBlockLayer {
    int block_size = 4;
    float drop_prob = 0.1f;
    Rng rng{0};
};

// Training: Bernoulli block anchors at rate
//   gamma = p * H*W / (bs^2 * (H-bs+1) * (W-bs+1))
// in the valid (top-left anchor) region, one mask per sample and channel;
// survivors are rescaled by total/kept per map. Eval or p == 0: bitwise
// identity.
Tensor dropblock(DropBlockLayer& layer, const Tensor& x, bool training);

// x: N x In, weight: Out x In, bias: Out. Returns x W^T + b.
Tensor linear(const Tensor& weight, const Tensor& bias, const Tensor& x);

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Row softmax as plain values (no tape); for prediction and ROC inputs.
std::vector<float> softmax_rows(const Tensor& logits);

}  // namespace fmpx
