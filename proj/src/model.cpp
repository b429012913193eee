#include "fmpx/model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "fmpx/rng.hpp"

namespace fmpx {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Layer weights are seeded from (model seed, dotted layer name), so a
// layer's init does not depend on which optional blocks exist around it:
// toggling aux heads or the fusion block leaves all shared weights bitwise
// identical.
Rng layer_rng(uint64_t seed, const std::string& name) {
    return Rng(mix64(seed, fnv1a64(name)));
}

Conv2dLayer make_conv(uint64_t seed, const std::string& name, int out_c, int in_c, int k,
                      int stride, int padding, int groups, bool bias) {
    Rng rng = layer_rng(seed, name);
    const int fan_in = (in_c / groups) * k * k;
    const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    std::vector<float> w(static_cast<size_t>(out_c) * (in_c / groups) * k * k);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    Conv2dLayer layer;
    layer.weight = Tensor::from_data({out_c, in_c / groups, k, k}, std::move(w), true);
    if (bias) {
        const float bb = 1.0f / std::sqrt(static_cast<float>(fan_in));
        std::vector<float> b(static_cast<size_t>(out_c));
        for (auto& v : b) v = rng.uniform(-bb, bb);
        layer.bias = Tensor::from_data({out_c}, std::move(b), true);
    }
    layer.stride = stride;
    layer.padding = padding;
    layer.groups = groups;
    return layer;
}

BatchNormLayer make_bn(int c) {
    BatchNormLayer bn;
    bn.gamma = Tensor::ones({c});
    bn.gamma.set_requires_grad(true);
    bn.beta = Tensor::zeros({c}, true);
    bn.running_mean = Tensor::zeros({c});
    bn.running_var = Tensor::ones({c});
    return bn;
}

ClsHead make_head(uint64_t seed, const std::string& name, int in_c, int classes) {
    Rng rng = layer_rng(seed, name);
    const float bound = std::sqrt(6.0f / static_cast<float>(in_c));
    std::vector<float> w(static_cast<size_t>(classes) * in_c);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    const float bb = 1.0f / std::sqrt(static_cast<float>(in_c));
    std::vector<float> b(static_cast<size_t>(classes));
    for (auto& v : b) v = rng.uniform(-bb, bb);
    ClsHead head;
    head.weight = Tensor::from_data({classes, in_c}, std::move(w), true);
    head.bias = Tensor::from_data({classes}, std::move(b), true);
    return head;
}

ShuffleBlock make_shuffle_block(uint64_t seed, const std::string& prefix, int in_c, int out_c,
                                bool downsample) {
    ShuffleBlock b;
    b.downsample = downsample;
    const int branch = out_c / 2;
    if (downsample) {
        b.b1_dw = make_conv(seed, prefix + ".branch1.conv1", in_c, in_c, 3, 2, 1, in_c, false);
        b.b1_bn1 = make_bn(in_c);
        b.b1_pw = make_conv(seed, prefix + ".branch1.conv2", branch, in_c, 1, 1, 0, 1, false);
        b.b1_bn2 = make_bn(branch);
    }
    const int b2_in = downsample ? in_c : in_c / 2;
    b.b2_pw1 = make_conv(seed, prefix + ".branch2.conv1", branch, b2_in, 1, 1, 0, 1, false);
    b.b2_bn1 = make_bn(branch);
    b.b2_dw = make_conv(seed, prefix + ".branch2.conv2", branch, branch, 3, downsample ? 2 : 1,
                        1, branch, false);
    b.b2_bn2 = make_bn(branch);
    b.b2_pw2 = make_conv(seed, prefix + ".branch2.conv3", branch, branch, 1, 1, 0, 1, false);
    b.b2_bn3 = make_bn(branch);
    return b;
}

}  // namespace

// ---- config -----------------------------------------------------------------

void ModelConfig::validate() const {
    require(num_classes >= 2, "config: num_classes must be at least 2");
    require(stem_channels >= 1, "config: stem_channels must be positive");
    require(stage_channels.size() == 3 && stage_depths.size() == 3,
            "config: expected exactly three backbone stages");
    for (int c : stage_channels)
        require(c >= 2 && c % 2 == 0,
                "config: stage channel counts must be even, got " + std::to_string(c));
    for (int d : stage_depths) require(d >= 1, "config: stage depths must be positive");
    require(stage5_channels >= 1, "config: stage5_channels must be positive");
    if (use_ablgfm) {
        require(ablgfm_reduction >= 1 && stage5_channels % ablgfm_reduction == 0,
                "config: fusion reduction " + std::to_string(ablgfm_reduction) +
                    " must divide stage5 width " + std::to_string(stage5_channels));
    }
    require(dropblock_prob >= 0.0f && dropblock_prob < 1.0f,
            "config: dropblock_prob must be in [0,1)");
    require(dropblock_size_stage2 >= 1 && dropblock_size_fusion >= 1,
            "config: dropblock sizes must be positive");
}

std::string ModelConfig::canonical_string() const {
    std::ostringstream os;
    os << "fmpx-v1|classes=" << num_classes << "|stem=" << stem_channels << "|stages=";
    for (size_t i = 0; i < stage_channels.size(); ++i)
        os << (i ? "," : "") << stage_channels[i];
    os << "|depths=";
    for (size_t i = 0; i < stage_depths.size(); ++i) os << (i ? "," : "") << stage_depths[i];
    os << "|stage5=" << stage5_channels << "|ablgfm=" << (use_ablgfm ? 1 : 0)
       << "|aux=" << (use_aux_heads ? 1 : 0) << "|dropblock=" << (use_dropblock ? 1 : 0)
       << "|act=" << (activation == Activation::Gelu ? "gelu" : "relu")
       << "|r=" << ablgfm_reduction;
    return os.str();
}

uint64_t ModelConfig::fingerprint() const { return fnv1a64(canonical_string()); }

ModelConfig ModelConfig::baseline() {
    ModelConfig c;
    c.stage5_channels = 1024;
    c.use_ablgfm = false;
    c.use_aux_heads = false;
    c.use_dropblock = false;
    c.activation = Activation::Relu;
    return c;
}

// ---- blocks -------------------------------------------------------------------

Tensor shuffle_block_forward(ShuffleBlock& block, const Tensor& x, Activation act,
                             bool training) {
    Tensor left, right_in;
    if (block.downsample) {
        left = x;
        right_in = x;
    } else {
        auto halves = channel_split_half(x);
        left = halves.first;
        right_in = halves.second;
    }

    if (block.downsample) {
        left = conv2d_forward(block.b1_dw, left);
        left = batchnorm_forward(block.b1_bn1, left, training);
        left = conv2d_forward(block.b1_pw, left);
        left = batchnorm_forward(block.b1_bn2, left, training);
        left = activate(left, act);
    }

    Tensor right = conv2d_forward(block.b2_pw1, right_in);
    right = batchnorm_forward(block.b2_bn1, right, training);
    right = activate(right, act);
    right = conv2d_forward(block.b2_dw, right);
    right = batchnorm_forward(block.b2_bn2, right, training);
    right = conv2d_forward(block.b2_pw2, right);
    right = batchnorm_forward(block.b2_bn3, right, training);
    right = activate(right, act);

    return channel_shuffle(concat_channels(left, right), {2});
}

Tensor ablgfm_forward(AblgfmBlock& block, const Tensor& flow, const Tensor& fhigh,
                      bool training) {
    require(flow.rank() == 4 && fhigh.rank() == 4 && flow.dim(0) == fhigh.dim(0),
            "fusion: flow and fhigh must be NCHW with matching batch");
    require(flow.dim(2) == fhigh.dim(2) * block.pool_ratio &&
                flow.dim(3) == fhigh.dim(3) * block.pool_ratio,
            "fusion: flow spatial dims must be pool_ratio times fhigh's");

    // low = AvgPool(act(BN(PWConv(flow))))
    Tensor low = conv2d_forward(block.flow_conv, flow);
    low = batchnorm_forward(block.flow_bn, low, training);
    low = activate(low, block.activation);
    low = avgpool2d(low, block.pool_ratio);

    Tensor merge = add(fhigh, low);

    // global context: pooled merge -> bottleneck -> C x 1 x 1 gate
    Tensor g = adaptive_avgpool_1x1(merge);
    g = conv2d_forward(block.g_conv1, g);
    g = batchnorm_forward(block.g_bn1, g, training);
    g = activate(g, block.activation);
    g = conv2d_forward(block.g_conv2, g);
    g = batchnorm_forward(block.g_bn2, g, training);

    // local context: full-resolution bottleneck
    Tensor l = conv2d_forward(block.l_conv1, merge);
    l = batchnorm_forward(block.l_bn1, l, training);
    l = activate(l, block.activation);
    l = conv2d_forward(block.l_conv2, l);
    l = batchnorm_forward(block.l_bn2, l, training);

    Tensor weight = sigmoid(add(l, g));
    Tensor flow_gated = mul(low, one_minus(weight));
    Tensor high_gated = mul(dropblock(block.drop_high, fhigh, training), weight);
    return add(flow_gated, high_gated);
}

Tensor cls_head_forward(const ClsHead& head, const Tensor& features) {
    Tensor pooled = adaptive_avgpool_1x1(features);
    pooled = reshape(pooled, {features.dim(0), features.dim(1)});
    return linear(head.weight, head.bias, pooled);
}

// ---- model ----------------------------------------------------------------------

ForwardResult FastMpoxModel::forward(const Tensor& x) {
    require(x.rank() == 4 && x.dim(1) == 3 && x.dim(2) == 224 && x.dim(3) == 224,
            "forward: expected N x 3 x 224 x 224 input, got " + shape_str(x.shape()));

    const Activation act = config.activation;
    Tensor s = conv2d_forward(stem.conv, x);
    s = batchnorm_forward(stem.bn, s, training_);
    s = activate(s, act);
    s = maxpool2d(s, 3, 2, 1);

    auto run_stage = [&](int idx, const Tensor& in) {
        Tensor out = in;
        for (auto& block : stages[static_cast<size_t>(idx)])
            out = shuffle_block_forward(block, out, act, training_);
        return out;
    };

    ForwardResult r;
    r.stem_out = s;
    Tensor stage2 = run_stage(0, s);
    // The 4x4 DropBlock replaces the stage-2 tensor for every consumer
    // (stage 3, the fusion flow input, and aux head 1).
    if (config.use_dropblock) stage2 = dropblock(drop_stage2, stage2, training_);
    r.stage2_out = stage2;
    r.stage3_out = run_stage(1, stage2);
    r.stage4_out = run_stage(2, r.stage3_out);

    Tensor f5 = conv2d_forward(stage5_conv, r.stage4_out);
    f5 = batchnorm_forward(stage5_bn, f5, training_);
    f5 = activate(f5, act);
    r.stage5_out = f5;

    r.fusion_out = ablgfm ? ablgfm_forward(*ablgfm, stage2, f5, training_) : f5;
    r.logits3 = cls_head_forward(head3, r.fusion_out);

    if (training_ && config.use_aux_heads) {
        r.logits1 = cls_head_forward(*head1, stage2);
        r.logits2 = cls_head_forward(*head2, r.stage3_out);
    }
    return r;
}

void FastMpoxModel::zero_grad() {
    for (auto& [name, t] : parameters_) {
        (void)name;
        t.zero_grad();
    }
}

void FastMpoxModel::register_tensors() {
    parameters_.clear();
    buffers_.clear();
    auto conv = [&](const std::string& prefix, Conv2dLayer& c) {
        parameters_.emplace_back(prefix + ".weight", c.weight);
        if (c.bias) parameters_.emplace_back(prefix + ".bias", *c.bias);
    };
    auto bn = [&](const std::string& prefix, BatchNormLayer& b) {
        parameters_.emplace_back(prefix + ".gamma", b.gamma);
        parameters_.emplace_back(prefix + ".beta", b.beta);
        buffers_.emplace_back(prefix + ".running_mean", b.running_mean);
        buffers_.emplace_back(prefix + ".running_var", b.running_var);
    };

    conv("stem.conv", stem.conv);
    bn("stem.bn", stem.bn);
    for (size_t si = 0; si < stages.size(); ++si) {
        const std::string stage = "stage" + std::to_string(si + 2);
        for (size_t bi = 0; bi < stages[si].size(); ++bi) {
            const std::string p = stage + ".block" + std::to_string(bi);
            ShuffleBlock& blk = stages[si][bi];
            if (blk.downsample) {
                conv(p + ".branch1.conv1", blk.b1_dw);
                bn(p + ".branch1.bn1", blk.b1_bn1);
                conv(p + ".branch1.conv2", blk.b1_pw);
                bn(p + ".branch1.bn2", blk.b1_bn2);
            }
            conv(p + ".branch2.conv1", blk.b2_pw1);
            bn(p + ".branch2.bn1", blk.b2_bn1);
            conv(p + ".branch2.conv2", blk.b2_dw);
            bn(p + ".branch2.bn2", blk.b2_bn2);
            conv(p + ".branch2.conv3", blk.b2_pw2);
            bn(p + ".branch2.bn3", blk.b2_bn3);
        }
    }
    conv("stage5.conv", stage5_conv);
    bn("stage5.bn", stage5_bn);
    if (ablgfm) {
        conv("fusion.flow.conv", ablgfm->flow_conv);
        bn("fusion.flow.bn", ablgfm->flow_bn);
        conv("fusion.global.conv1", ablgfm->g_conv1);
        bn("fusion.global.bn1", ablgfm->g_bn1);
        conv("fusion.global.conv2", ablgfm->g_conv2);
        bn("fusion.global.bn2", ablgfm->g_bn2);
        conv("fusion.local.conv1", ablgfm->l_conv1);
        bn("fusion.local.bn1", ablgfm->l_bn1);
        conv("fusion.local.conv2", ablgfm->l_conv2);
        bn("fusion.local.bn2", ablgfm->l_bn2);
    }
    if (head1) {
        parameters_.emplace_back("head1.weight", head1->weight);
        parameters_.emplace_back("head1.bias", head1->bias);
    }
    if (head2) {
        parameters_.emplace_back("head2.weight", head2->weight);
        parameters_.emplace_back("head2.bias", head2->bias);
    }
    parameters_.emplace_back("head3.weight", head3.weight);
    parameters_.emplace_back("head3.bias", head3.bias);
}

FastMpoxModel build_model(const ModelConfig& config, uint64_t seed) {
    config.validate();
    FastMpoxModel m;
    m.config = config;

    m.stem.conv = make_conv(seed, "stem.conv", config.stem_channels, 3, 3, 2, 1, 1, false);
    m.stem.bn = make_bn(config.stem_channels);

    int in_c = config.stem_channels;
    for (size_t si = 0; si < config.stage_channels.size(); ++si) {
        const std::string stage = "stage" + std::to_string(si + 2);
        const int out_c = config.stage_channels[si];
        std::vector<ShuffleBlock> blocks;
        blocks.push_back(make_shuffle_block(seed, stage + ".block0", in_c, out_c, true));
        for (int b = 1; b < config.stage_depths[si]; ++b)
            blocks.push_back(make_shuffle_block(seed, stage + ".block" + std::to_string(b),
                                                out_c, out_c, false));
        m.stages.push_back(std::move(blocks));
        in_c = out_c;
    }

    m.stage5_conv =
        make_conv(seed, "stage5.conv", config.stage5_channels, in_c, 1, 1, 0, 1, false);
    m.stage5_bn = make_bn(config.stage5_channels);

    if (config.use_ablgfm) {
        AblgfmBlock a;
        const int c = config.stage5_channels;
        const int cr = c / config.ablgfm_reduction;
        a.flow_conv =
            make_conv(seed, "fusion.flow.conv", c, config.stage_channels[0], 1, 1, 0, 1, false);
        a.flow_bn = make_bn(c);
        a.g_conv1 = make_conv(seed, "fusion.global.conv1", cr, c, 1, 1, 0, 1, false);
        a.g_bn1 = make_bn(cr);
        a.g_conv2 = make_conv(seed, "fusion.global.conv2", c, cr, 1, 1, 0, 1, false);
        a.g_bn2 = make_bn(c);
        a.l_conv1 = make_conv(seed, "fusion.local.conv1", cr, c, 1, 1, 0, 1, false);
        a.l_bn1 = make_bn(cr);
        a.l_conv2 = make_conv(seed, "fusion.local.conv2", c, cr, 1, 1, 0, 1, false);
        a.l_bn2 = make_bn(c);
        a.drop_high.block_size = config.dropblock_size_fusion;
        a.drop_high.drop_prob = config.use_dropblock ? config.dropblock_prob : 0.0f;
        a.drop_high.rng = Rng(mix64(seed, fnv1a64("dropblock.fusion")));
        a.activation = config.activation;
        m.ablgfm = std::move(a);
    }

    m.drop_stage2.block_size = config.dropblock_size_stage2;
    m.drop_stage2.drop_prob = config.dropblock_prob;
    m.drop_stage2.rng = Rng(mix64(seed, fnv1a64("dropblock.stage2")));

    if (config.use_aux_heads) {
        m.head1 = make_head(seed, "head1", config.stage_channels[0], config.num_classes);
        m.head2 = make_head(seed, "head2", config.stage_channels[1], config.num_classes);
    }
    m.head3 = make_head(seed, "head3", config.stage5_channels, config.num_classes);

    m.register_tensors();
    return m;
}

size_t count_parameters(const FastMpoxModel& model) {
    size_t total = 0;
    for (const auto& [name, t] : model.parameters()) {
        (void)name;
        total += t.numel();
    }
    return total;
}

}  // namespace fmpx
