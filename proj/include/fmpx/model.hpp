#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fmpx/nn.hpp"
#include "fmpx/tensor.hpp"

namespace fmpx {

struct ModelConfig {
    int num_classes = 4;
    int stem_channels = 24;
    std::vector<int> stage_channels = {48, 96, 192};
    std::vector<int> stage_depths = {4, 8, 4};
    int stage5_channels = 256;
    bool use_ablgfm = true;
    bool use_aux_heads = true;
    bool use_dropblock = true;
    Activation activation = Activation::Gelu;
    float dropblock_prob = 0.1f;
    int dropblock_size_stage2 = 4;
    int dropblock_size_fusion = 1;
    int ablgfm_reduction = 4;

    void validate() const;            // throws on inconsistent settings
    std::string canonical_string() const;
    uint64_t fingerprint() const;     // FNV-1a 64 of the canonical string

    // ShuffleNetV2 x0.5 ablation baseline: wide stage 5, plain ReLU, no
    // fusion, aux heads, or DropBlock.
    static ModelConfig baseline();
};

struct StemLayer {
    Conv2dLayer conv;  // 3 -> stem_channels, 3x3 s2 p1, no bias
    BatchNormLayer bn;
};

// One ShuffleNetV2 unit. Downsampling blocks run both branches on the full
// input; stride-1 blocks split channels in half and transform only the
// second half. Output is concat + channel shuffle (g=2).
struct ShuffleBlock {
    bool downsample = false;
    // branch1 (downsampling blocks only): DW 3x3 s2 + BN, PW + BN + act
    Conv2dLayer b1_dw;
    BatchNormLayer b1_bn1;
    Conv2dLayer b1_pw;
    BatchNormLayer b1_bn2;
    // branch2: PW + BN + act, DW 3x3 + BN, PW + BN + act
    Conv2dLayer b2_pw1;
    BatchNormLayer b2_bn1;
    Conv2dLayer b2_dw;
    BatchNormLayer b2_bn2;
    Conv2dLayer b2_pw2;
    BatchNormLayer b2_bn3;
};

Tensor shuffle_block_forward(ShuffleBlock& block, const Tensor& x, Activation act,
                             bool training);

// Attention-based local-global fusion of the low-level (stage 2) and
// high-level (stage 5) feature maps.
struct AblgfmBlock {
    Conv2dLayer flow_conv;  // C_low -> C_high pointwise, no bias
    BatchNormLayer flow_bn;
    Conv2dLayer g_conv1;  // C -> C/r on the pooled merge
    BatchNormLayer g_bn1;
    Conv2dLayer g_conv2;  // C/r -> C
    BatchNormLayer g_bn2;
    Conv2dLayer l_conv1;  // C -> C/r on the full merge
    BatchNormLayer l_bn1;
    Conv2dLayer l_conv2;  // C/r -> C
    BatchNormLayer l_bn2;
    DropBlockLayer drop_high;  // 1x1 blocks on the high branch
    Activation activation = Activation::Gelu;
    int pool_ratio = 4;  // 28 -> 7 spatial downsample of the projected flow
};

Tensor ablgfm_forward(AblgfmBlock& block, const Tensor& flow, const Tensor& fhigh,
                      bool training);

struct ClsHead {
    Tensor weight;  // num_classes x C
    Tensor bias;    // num_classes
};

Tensor cls_head_forward(const ClsHead& head, const Tensor& features);

struct ForwardResult {
    Tensor logits3;  // main head, N x num_classes
    std::optional<Tensor> logits1, logits2;  // aux heads, training mode only
    Tensor stem_out;  // post-maxpool stem features
    Tensor stage2_out, stage3_out, stage4_out, stage5_out, fusion_out;
};

class FastMpoxModel {
public:
    ModelConfig config;
    StemLayer stem;
    std::vector<std::vector<ShuffleBlock>> stages;  // paper stages 2..4
    Conv2dLayer stage5_conv;
    BatchNormLayer stage5_bn;
    std::optional<AblgfmBlock> ablgfm;
    DropBlockLayer drop_stage2;
    std::optional<ClsHead> head1, head2;
    ClsHead head3;

    void set_training(bool training) { training_ = training; }
    bool is_training() const { return training_; }

    // Input must be N x 3 x 224 x 224. Training mode evaluates the aux
    // heads; inference never touches them.
    ForwardResult forward(const Tensor& x);

    // Parameters in registration order with dotted names
    // (e.g. stage2.block0.branch2.conv1.weight). Handles share storage with
    // the layers, so writing through them updates the model.
    const std::vector<std::pair<std::string, Tensor>>& parameters() const {
        return parameters_;
    }
    // Batch-norm running statistics (saved in checkpoints, never trained).
    const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }

    void zero_grad();

    friend FastMpoxModel build_model(const ModelConfig& config, uint64_t seed);

private:
    bool training_ = true;
    std::vector<std::pair<std::string, Tensor>> parameters_;
    std::vector<std::pair<std::string, Tensor>> buffers_;
    void register_tensors();
};

// Deterministic construction: same (config, seed) gives bitwise-identical
// weights. Kaiming-uniform fan-in init for convs and linear layers.
FastMpoxModel build_model(const ModelConfig& config, uint64_t seed);

// Trainable element count (running stats excluded).
size_t count_parameters(const FastMpoxModel& model);

}  // namespace fmpx
