#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "fmpx/checkpoint.hpp"
#include "fmpx/model.hpp"
#include "fmpx/nn.hpp"
#include "fmpx/rng.hpp"
#include "fmpx/tensor.hpp"

using namespace fmpx;

namespace {

Tensor random_tensor(const Shape& shape, uint64_t seed, float lo = -2.0f, float hi = 2.0f) {
    Rng rng(seed);
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_data(shape, std::move(v));
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    auto ad = a.data();
    auto bd = b.data();
    for (size_t i = 0; i < ad.size(); ++i)
        if (ad[i] != bd[i]) return false;
    return true;
}

bool close(float got, double want, double tol = 1e-4) {
    return std::abs(static_cast<double>(got) - want) <= tol * (1.0 + std::abs(want));
}

Conv2dLayer pw_layer(int out_c, int in_c, uint64_t seed) {
    Conv2dLayer l;
    l.weight = random_tensor({out_c, in_c, 1, 1}, seed, -0.8f, 0.8f);
    return l;
}

BatchNormLayer bn_layer(int c, uint64_t seed) {
    Rng rng(seed);
    std::vector<float> g(c), b(c), rm(c), rv(c);
    for (int i = 0; i < c; ++i) {
        g[i] = rng.uniform(0.5f, 1.5f);
        b[i] = rng.uniform(-0.5f, 0.5f);
        rm[i] = rng.uniform(-0.5f, 0.5f);
        rv[i] = rng.uniform(0.5f, 2.0f);
    }
    BatchNormLayer l;
    l.gamma = Tensor::from_data({c}, std::move(g), true);
    l.beta = Tensor::from_data({c}, std::move(b), true);
    l.running_mean = Tensor::from_data({c}, std::move(rm));
    l.running_var = Tensor::from_data({c}, std::move(rv));
    return l;
}

// Small fusion block: 3-channel flow at 8x8, 4-channel high map at 2x2, r=2.
AblgfmBlock small_fusion_block(uint64_t seed) {
    AblgfmBlock b;
    b.flow_conv = pw_layer(4, 3, mix64(seed, 1));
    b.flow_bn = bn_layer(4, mix64(seed, 2));
    b.g_conv1 = pw_layer(2, 4, mix64(seed, 3));
    b.g_bn1 = bn_layer(2, mix64(seed, 4));
    b.g_conv2 = pw_layer(4, 2, mix64(seed, 5));
    b.g_bn2 = bn_layer(4, mix64(seed, 6));
    b.l_conv1 = pw_layer(2, 4, mix64(seed, 7));
    b.l_bn1 = bn_layer(2, mix64(seed, 8));
    b.l_conv2 = pw_layer(4, 2, mix64(seed, 9));
    b.l_bn2 = bn_layer(4, mix64(seed, 10));
    b.drop_high.block_size = 1;
    b.drop_high.drop_prob = 0.1f;
    b.activation = Activation::Gelu;
    b.pool_ratio = 4;
    return b;
}

// Float64 shadow helpers for the fusion-block oracle. NCHW vectors.
using Vec = std::vector<double>;

Vec pw_d(const Vec& x, const Tensor& w, int n, int in_c, int out_c, int hw) {
    auto wd = w.data();
    Vec out(static_cast<size_t>(n) * out_c * hw, 0.0);
    for (int b = 0; b < n; ++b)
        for (int o = 0; o < out_c; ++o)
            for (int i = 0; i < in_c; ++i) {
                const double wv = wd[static_cast<size_t>(o) * in_c + i];
                for (int p = 0; p < hw; ++p)
                    out[(static_cast<size_t>(b) * out_c + o) * hw + p] +=
                        wv * x[(static_cast<size_t>(b) * in_c + i) * hw + p];
            }
    return out;
}

Vec bn_eval_d(const Vec& x, const BatchNormLayer& l, int n, int c, int hw) {
    auto g = l.gamma.data();
    auto be = l.beta.data();
    auto rm = l.running_mean.data();
    auto rv = l.running_var.data();
    Vec out(x.size());
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const double scale = g[ch] / std::sqrt(static_cast<double>(rv[ch]) + l.eps);
            for (int p = 0; p < hw; ++p) {
                const size_t i = (static_cast<size_t>(b) * c + ch) * hw + p;
                out[i] = (x[i] - rm[ch]) * scale + be[ch];
            }
        }
    return out;
}

Vec gelu_d(const Vec& x) {
    Vec out(x.size());
    for (size_t i = 0; i < x.size(); ++i)
        out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] / std::sqrt(2.0)));
    return out;
}

Vec avgpool_d(const Vec& x, int n, int c, int h, int w, int k) {
    const int oh = h / k, ow = w / k;
    Vec out(static_cast<size_t>(n) * c * oh * ow);
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    double s = 0.0;
                    for (int di = 0; di < k; ++di)
                        for (int dj = 0; dj < k; ++dj)
                            s += x[((static_cast<size_t>(b) * c + ch) * h + i * k + di) * w +
                                   j * k + dj];
                    out[((static_cast<size_t>(b) * c + ch) * oh + i) * ow + j] =
                        s / (k * k);
                }
    return out;
}

std::filesystem::path scratch_dir() {
    auto dir = std::filesystem::temp_directory_path() / "fmpx-model-tests";
    std::filesystem::create_directories(dir);
    return dir;
}

std::vector<char> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<char>& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CheckpointErrorCode load_error(const std::string& path, const ModelConfig& cfg) {
    try {
        load_checkpoint(path, cfg);
    } catch (const CheckpointError& e) {
        return e.code();
    }
    throw std::runtime_error("expected load_checkpoint to throw");
}

}  // namespace

// ---- config ----

TEST_CASE("model config: validation rejects inconsistent settings") {
    CHECK_NOTHROW(ModelConfig{}.validate());
    CHECK_NOTHROW(ModelConfig::baseline().validate());

    ModelConfig c;
    c.num_classes = 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = ModelConfig{};
    c.stage_channels = {48, 96};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = ModelConfig{};
    c.stage5_channels = 255;  // not divisible by the attention reduction
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = ModelConfig{};
    c.dropblock_prob = 1.0f;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    c = ModelConfig{};
    c.stage_depths = {4, 0, 4};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("model config: fingerprint separates configurations") {
    ModelConfig a;
    CHECK(a.fingerprint() == ModelConfig{}.fingerprint());
    CHECK(a.fingerprint() != ModelConfig::baseline().fingerprint());

    ModelConfig no_aux;
    no_aux.use_aux_heads = false;
    CHECK(a.fingerprint() != no_aux.fingerprint());

    ModelConfig relu;
    relu.activation = Activation::Relu;
    CHECK(a.fingerprint() != relu.fingerprint());
}

// ---- construction ----

TEST_CASE("model: trainable parameter counts" * doctest::timeout(120)) {
    FastMpoxModel m = build_model(ModelConfig{}, 1);
    const size_t n = count_parameters(m);
    CHECK(n == 274028);  // summed layer-by-layer by hand
    CHECK(n >= 240000);
    CHECK(n <= 310000);

    FastMpoxModel base = build_model(ModelConfig::baseline(), 1);
    const size_t nb = count_parameters(base);
    CHECK(nb == 345892);  // summed layer-by-layer by hand
    CHECK(nb >= 330000);
    CHECK(nb <= 380000);

    // Count depends only on the architecture.
    CHECK(count_parameters(build_model(ModelConfig{}, 99)) == n);
    m.set_training(false);
    CHECK(count_parameters(m) == n);
}

TEST_CASE("model: same seed builds bitwise-identical weights") {
    FastMpoxModel a = build_model(ModelConfig{}, 7);
    FastMpoxModel b = build_model(ModelConfig{}, 7);
    REQUIRE(a.parameters().size() == b.parameters().size());
    for (size_t i = 0; i < a.parameters().size(); ++i) {
        CHECK(a.parameters()[i].first == b.parameters()[i].first);
        CHECK(bitwise_equal(a.parameters()[i].second, b.parameters()[i].second));
    }

    FastMpoxModel c = build_model(ModelConfig{}, 8);
    bool any_diff = false;
    for (size_t i = 0; i < a.parameters().size() && !any_diff; ++i)
        any_diff = !bitwise_equal(a.parameters()[i].second, c.parameters()[i].second);
    CHECK(any_diff);
}

TEST_CASE("model: parameters are registered under dotted names") {
    FastMpoxModel m = build_model(ModelConfig{}, 3);
    REQUIRE(!m.parameters().empty());
    CHECK(m.parameters().front().first == "stem.conv.weight");
    auto has = [&](const std::string& name) {
        for (const auto& [n, t] : m.parameters())
            if (n == name) return true;
        return false;
    };
    CHECK(has("stage2.block0.branch1.conv1.weight"));
    CHECK(has("stage3.block7.branch2.conv3.weight"));
    CHECK(has("fusion.flow.conv.weight"));
    CHECK(has("fusion.global.conv1.weight"));
    CHECK(has("head3.bias"));
    CHECK(!m.buffers().empty());
    CHECK(m.buffers().front().first == "stem.bn.running_mean");
}

// ---- forward ----

TEST_CASE("model: forward shape ladder" * doctest::timeout(300)) {
    FastMpoxModel m = build_model(ModelConfig{}, 11);
    // A single sample cannot train: the attention block's global branch
    // batch-normalizes an N x C x 1 x 1 map, so batch stats need N >= 2.
    m.set_training(true);
    CHECK_THROWS_AS(m.forward(random_tensor({1, 3, 224, 224}, 42)), std::invalid_argument);

    Tensor x = random_tensor({2, 3, 224, 224}, 42, -1.0f, 1.0f);
    ForwardResult r = m.forward(x);

    CHECK(r.stage2_out.shape() == Shape{2, 48, 28, 28});
    CHECK(r.stage3_out.shape() == Shape{2, 96, 14, 14});
    CHECK(r.stage4_out.shape() == Shape{2, 192, 7, 7});
    CHECK(r.stage5_out.shape() == Shape{2, 256, 7, 7});
    CHECK(r.fusion_out.shape() == Shape{2, 256, 7, 7});
    CHECK(r.logits3.shape() == Shape{2, 4});
    REQUIRE(r.logits1.has_value());
    REQUIRE(r.logits2.has_value());
    CHECK(r.logits1->shape() == Shape{2, 4});
    CHECK(r.logits2->shape() == Shape{2, 4});
    check_finite(r.logits3, "logits");

    CHECK_THROWS_AS(m.forward(random_tensor({1, 3, 100, 100}, 1)), std::invalid_argument);
    CHECK_THROWS_AS(m.forward(random_tensor({1, 1, 224, 224}, 1)), std::invalid_argument);
    CHECK_THROWS_AS(m.forward(random_tensor({3, 224, 224}, 1)), std::invalid_argument);
}

TEST_CASE("model: inference is deterministic and skips aux heads" *
          doctest::timeout(300)) {
    FastMpoxModel m = build_model(ModelConfig{}, 5);
    m.set_training(false);
    NoGradGuard ng;
    Tensor x = random_tensor({1, 3, 224, 224}, 17, -1.0f, 1.0f);
    ForwardResult a = m.forward(x);
    ForwardResult b = m.forward(x);
    CHECK(!a.logits1.has_value());
    CHECK(!a.logits2.has_value());
    CHECK(bitwise_equal(a.logits3, b.logits3));
}

TEST_CASE("model: aux heads do not perturb shared weights or inference" *
          doctest::timeout(300)) {
    ModelConfig with_aux;
    ModelConfig no_aux;
    no_aux.use_aux_heads = false;
    FastMpoxModel a = build_model(with_aux, 21);
    FastMpoxModel b = build_model(no_aux, 21);

    // Every parameter of the reduced model exists bitwise in the full one.
    for (const auto& [name, t] : b.parameters()) {
        bool found = false;
        for (const auto& [an, at] : a.parameters())
            if (an == name) {
                found = true;
                CHECK(bitwise_equal(t, at));
            }
        CHECK_MESSAGE(found, name);
    }

    a.set_training(false);
    b.set_training(false);
    NoGradGuard ng;
    Tensor x = random_tensor({1, 3, 224, 224}, 33, -1.0f, 1.0f);
    CHECK(bitwise_equal(a.forward(x).logits3, b.forward(x).logits3));
}

// ---- fusion block ----

TEST_CASE("fusion block: matches a float64 straight-line shadow") {
    AblgfmBlock block = small_fusion_block(1001);
    Tensor flow = random_tensor({2, 3, 8, 8}, 2001);
    Tensor fhigh = random_tensor({2, 4, 2, 2}, 2002);

    NoGradGuard ng;
    Tensor out = ablgfm_forward(block, flow, fhigh, false);
    REQUIRE(out.shape() == Shape{2, 4, 2, 2});

    // Shadow: low = pool4(act(bn(pw(flow)))), merge = fhigh + low,
    // g = bn(pw(act(bn(pw(mean(merge)))))), l = same on the full merge,
    // gate = sigmoid(l + g), out = low*(1-gate) + fhigh*gate.
    Vec flow_d(flow.data().begin(), flow.data().end());
    Vec high_d(fhigh.data().begin(), fhigh.data().end());
    Vec low = avgpool_d(
        gelu_d(bn_eval_d(pw_d(flow_d, block.flow_conv.weight, 2, 3, 4, 64), block.flow_bn,
                         2, 4, 64)),
        2, 4, 8, 8, 4);
    Vec merge(low.size());
    for (size_t i = 0; i < merge.size(); ++i) merge[i] = low[i] + high_d[i];

    Vec pooled(2 * 4);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 4; ++c) {
            double s = 0.0;
            for (int p = 0; p < 4; ++p) s += merge[(static_cast<size_t>(n) * 4 + c) * 4 + p];
            pooled[static_cast<size_t>(n) * 4 + c] = s / 4.0;
        }
    Vec g = bn_eval_d(
        pw_d(gelu_d(bn_eval_d(pw_d(pooled, block.g_conv1.weight, 2, 4, 2, 1), block.g_bn1,
                              2, 2, 1)),
             block.g_conv2.weight, 2, 2, 4, 1),
        block.g_bn2, 2, 4, 1);
    Vec l = bn_eval_d(
        pw_d(gelu_d(bn_eval_d(pw_d(merge, block.l_conv1.weight, 2, 4, 2, 4), block.l_bn1,
                              2, 2, 4)),
             block.l_conv2.weight, 2, 2, 4, 4),
        block.l_bn2, 2, 4, 4);

    auto od = out.data();
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 4; ++c)
            for (int p = 0; p < 4; ++p) {
                const size_t i = (static_cast<size_t>(n) * 4 + c) * 4 + p;
                const double gate =
                    1.0 / (1.0 + std::exp(-(l[i] + g[static_cast<size_t>(n) * 4 + c])));
                CHECK(gate > 0.0);
                CHECK(gate < 1.0);
                const double want = low[i] * (1.0 - gate) + high_d[i] * gate;
                CHECK_MESSAGE(close(od[i], want), "element ", i, ": got ", od[i],
                              " want ", want);
            }
}

TEST_CASE("fusion block: zeroed gate branches blend both inputs equally") {
    AblgfmBlock block = small_fusion_block(4242);
    auto zero_out = [](BatchNormLayer& bn) {
        std::fill(bn.gamma.data().begin(), bn.gamma.data().end(), 0.0f);
        std::fill(bn.beta.data().begin(), bn.beta.data().end(), 0.0f);
    };
    zero_out(block.g_bn2);
    zero_out(block.l_bn2);

    Tensor flow = random_tensor({1, 3, 8, 8}, 91);
    Tensor fhigh = random_tensor({1, 4, 2, 2}, 92);
    NoGradGuard ng;
    Tensor out = ablgfm_forward(block, flow, fhigh, false);
    Tensor low = avgpool2d(
        activate(batchnorm_forward(block.flow_bn, conv2d_forward(block.flow_conv, flow),
                                   false),
                 Activation::Gelu),
        4);

    auto od = out.data();
    auto ld = low.data();
    auto hd = fhigh.data();
    for (size_t i = 0; i < od.size(); ++i)
        CHECK(od[i] == 0.5f * ld[i] + 0.5f * hd[i]);  // sigmoid(0) halves exactly
}

TEST_CASE("fusion block: output is a convex blend of the two branches") {
    AblgfmBlock block = small_fusion_block(777);
    Tensor flow = random_tensor({2, 3, 8, 8}, 93);
    Tensor fhigh = random_tensor({2, 4, 2, 2}, 94);
    NoGradGuard ng;
    Tensor out = ablgfm_forward(block, flow, fhigh, false);
    Tensor low = avgpool2d(
        activate(batchnorm_forward(block.flow_bn, conv2d_forward(block.flow_conv, flow),
                                   false),
                 Activation::Gelu),
        4);
    auto od = out.data();
    auto ld = low.data();
    auto hd = fhigh.data();
    for (size_t i = 0; i < od.size(); ++i) {
        CHECK(od[i] >= std::min(ld[i], hd[i]) - 1e-5f);
        CHECK(od[i] <= std::max(ld[i], hd[i]) + 1e-5f);
    }
}

TEST_CASE("fusion block: rejects mismatched spatial ratios") {
    AblgfmBlock block = small_fusion_block(55);
    NoGradGuard ng;
    Tensor fhigh = random_tensor({1, 4, 2, 2}, 2);
    CHECK_THROWS_AS(ablgfm_forward(block, random_tensor({1, 3, 6, 6}, 1), fhigh, false),
                    std::invalid_argument);
    CHECK_THROWS_AS(ablgfm_forward(block, random_tensor({2, 3, 8, 8}, 1), fhigh, false),
                    std::invalid_argument);
}

// ---- checkpoints ----

TEST_CASE("checkpoint: round trip restores inference bitwise" * doctest::timeout(300)) {
    const auto dir = scratch_dir();
    const auto path = (dir / "roundtrip.fmpx").string();
    ModelConfig cfg;
    FastMpoxModel m = build_model(cfg, 1234);

    // Move the running stats away from their init so buffers are exercised.
    m.set_training(true);
    {
        NoGradGuard ng;
        m.forward(random_tensor({2, 3, 224, 224}, 600, -1.0f, 1.0f));
    }
    m.set_training(false);

    Tensor x = random_tensor({1, 3, 224, 224}, 601, -1.0f, 1.0f);
    NoGradGuard ng;
    Tensor before = m.forward(x).logits3;

    save_checkpoint(m, path);
    FastMpoxModel restored = load_checkpoint(path, cfg);
    restored.set_training(false);

    for (size_t i = 0; i < m.parameters().size(); ++i)
        CHECK(bitwise_equal(m.parameters()[i].second, restored.parameters()[i].second));
    for (size_t i = 0; i < m.buffers().size(); ++i)
        CHECK(bitwise_equal(m.buffers()[i].second, restored.buffers()[i].second));
    CHECK(bitwise_equal(before, restored.forward(x).logits3));
}

TEST_CASE("checkpoint: corruption is reported with distinct error codes") {
    const auto dir = scratch_dir();
    const auto good = dir / "good.fmpx";
    ModelConfig cfg;
    save_checkpoint(build_model(cfg, 5), good.string());
    const std::vector<char> bytes = read_bytes(good);
    REQUIRE(bytes.size() > 64);

    CHECK(load_error((dir / "missing.fmpx").string(), cfg) == CheckpointErrorCode::Io);

    auto mutated = bytes;
    mutated[0] = 'Z';
    write_bytes(dir / "magic.fmpx", mutated);
    CHECK(load_error((dir / "magic.fmpx").string(), cfg) == CheckpointErrorCode::BadMagic);

    mutated = bytes;
    mutated[4] = static_cast<char>(kCheckpointVersion + 1);
    write_bytes(dir / "version.fmpx", mutated);
    CHECK(load_error((dir / "version.fmpx").string(), cfg) ==
          CheckpointErrorCode::BadVersion);

    CHECK(load_error(good.string(), ModelConfig::baseline()) ==
          CheckpointErrorCode::FingerprintMismatch);

    // Layout offsets: magic 0, version 4, fingerprint 8, tensor count 16,
    // first record at 20 (name length u16, then the name itself).
    mutated = bytes;
    mutated[16] = static_cast<char>(static_cast<unsigned char>(mutated[16]) + 1);
    write_bytes(dir / "count.fmpx", mutated);
    CHECK(load_error((dir / "count.fmpx").string(), cfg) ==
          CheckpointErrorCode::BadTensorCount);

    mutated = bytes;
    mutated[22] = '~';  // first byte of the first tensor name
    write_bytes(dir / "name.fmpx", mutated);
    CHECK(load_error((dir / "name.fmpx").string(), cfg) ==
          CheckpointErrorCode::BadTensorName);

    mutated = bytes;
    const size_t name_len = static_cast<unsigned char>(bytes[20]) |
                            (static_cast<size_t>(static_cast<unsigned char>(bytes[21])) << 8);
    const size_t first_dim = 20 + 2 + name_len + 1;  // after name and rank byte
    mutated[first_dim] = static_cast<char>(static_cast<unsigned char>(mutated[first_dim]) + 1);
    write_bytes(dir / "shape.fmpx", mutated);
    CHECK(load_error((dir / "shape.fmpx").string(), cfg) ==
          CheckpointErrorCode::ShapeMismatch);

    mutated = bytes;
    mutated.resize(bytes.size() - 50);
    write_bytes(dir / "short.fmpx", mutated);
    CHECK(load_error((dir / "short.fmpx").string(), cfg) == CheckpointErrorCode::Truncated);
}
