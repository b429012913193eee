#include "fmpx/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <thread>

namespace fmpx {

namespace {

constexpr float kInvSqrt2 = 0.70710678118654752440f;
constexpr float kInvSqrt2Pi = 0.39894228040143267794f;

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Runs fn(begin..end) split across worker threads. Each index is handled by
// exactly one thread, so results match the sequential order bitwise.
template <typename Fn>
void parallel_for(int begin, int end, Fn&& fn) {
    const int n = end - begin;
    const int threads = std::min(num_threads(), n);
    if (threads <= 1 || n < 2) {
        for (int i = begin; i < end; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    const int chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const int lo = begin + t * chunk;
        const int hi = std::min(end, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (int i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

struct ConvDims {
    int batch, in_c, in_h, in_w;
    int out_c, k_h, k_w, out_h, out_w;
    int group_in, group_out;  // channels per group
};

ConvDims conv_dims(const Conv2dLayer& layer, const Tensor& x) {
    require(x.rank() == 4, "conv2d: input must be N x C x H x W, got " + shape_str(x.shape()));
    require(layer.weight.rank() == 4, "conv2d: weight must be rank 4");
    require(layer.stride >= 1 && layer.padding >= 0 && layer.groups >= 1,
            "conv2d: bad stride/padding/groups");
    ConvDims d;
    d.batch = x.dim(0);
    d.in_c = x.dim(1);
    d.in_h = x.dim(2);
    d.in_w = x.dim(3);
    d.out_c = layer.weight.dim(0);
    d.k_h = layer.weight.dim(2);
    d.k_w = layer.weight.dim(3);
    require(d.in_c % layer.groups == 0 && d.out_c % layer.groups == 0,
            "conv2d: channels not divisible by groups");
    d.group_in = d.in_c / layer.groups;
    d.group_out = d.out_c / layer.groups;
    require(layer.weight.dim(1) == d.group_in,
            "conv2d: weight expects " + std::to_string(layer.weight.dim(1)) +
                " input channels per group, input has " + std::to_string(d.group_in));
    d.out_h = (d.in_h + 2 * layer.padding - d.k_h) / layer.stride + 1;
    d.out_w = (d.in_w + 2 * layer.padding - d.k_w) / layer.stride + 1;
    require(d.in_h + 2 * layer.padding >= d.k_h && d.in_w + 2 * layer.padding >= d.k_w &&
                d.out_h >= 1 && d.out_w >= 1,
            "conv2d: non-positive output size for input " + shape_str(x.shape()));
    if (layer.bias) require(layer.bias->numel() == static_cast<size_t>(d.out_c),
                            "conv2d: bias length != out channels");
    return d;
}

// Patch matrix for one (sample, group): rows are output positions, columns
// the k_h*k_w*group_in patch values (zero outside the padded border).
void im2col(const float* x, const ConvDims& d, int stride, int padding, float* col) {
    const int k_area = d.k_h * d.k_w;
    const int cols = d.group_in * k_area;
    for (int oy = 0; oy < d.out_h; ++oy) {
        for (int ox = 0; ox < d.out_w; ++ox) {
            float* row = col + (static_cast<size_t>(oy) * d.out_w + ox) * cols;
            const int iy0 = oy * stride - padding;
            const int ix0 = ox * stride - padding;
            for (int c = 0; c < d.group_in; ++c) {
                const float* plane = x + static_cast<size_t>(c) * d.in_h * d.in_w;
                for (int ky = 0; ky < d.k_h; ++ky) {
                    const int iy = iy0 + ky;
                    float* dst = row + c * k_area + ky * d.k_w;
                    if (iy < 0 || iy >= d.in_h) {
                        std::memset(dst, 0, sizeof(float) * static_cast<size_t>(d.k_w));
                        continue;
                    }
                    const float* src = plane + static_cast<size_t>(iy) * d.in_w;
                    for (int kx = 0; kx < d.k_w; ++kx) {
                        const int ix = ix0 + kx;
                        dst[kx] = (ix < 0 || ix >= d.in_w) ? 0.0f : src[ix];
                    }
                }
            }
        }
    }
}

float dot(const float* a, const float* b, int n) {
    float acc = 0.0f;
    for (int i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

}  // namespace

// ---- activations ----------------------------------------------------------

Tensor gelu(const Tensor& x) {
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        const float v = xd[i];
        out[i] = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
    }
    Tensor xv = x;
    return Tensor::make_result(x.shape(), std::move(out), {x}, [xv](Tensor& o) mutable {
        if (!xv.requires_grad()) return;
        auto g = o.grad();
        auto xd2 = xv.data();
        auto gx = xv.grad();
        for (size_t i = 0; i < gx.size(); ++i) {
            const float v = xd2[i];
            const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
            const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
}

Tensor relu(const Tensor& x) {
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
    Tensor xv = x;
    return Tensor::make_result(x.shape(), std::move(out), {x}, [xv](Tensor& o) mutable {
        if (!xv.requires_grad()) return;
        auto g = o.grad();
        auto xd2 = xv.data();
        auto gx = xv.grad();
        for (size_t i = 0; i < gx.size(); ++i)
            if (xd2[i] > 0.0f) gx[i] += g[i];
    });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        const float v = xd[i];
        out[i] = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v))
                           : std::exp(v) / (1.0f + std::exp(v));
    }
    Tensor xv = x;
    return Tensor::make_result(x.shape(), std::move(out), {x}, [xv](Tensor& o) mutable {
        if (!xv.requires_grad()) return;
        auto g = o.grad();
        auto od = o.data();
        auto gx = xv.grad();
        for (size_t i = 0; i < gx.size(); ++i) {
            const float s = od[i];
            gx[i] += g[i] * s * (1.0f - s);
        }
    });
}

Tensor activate(const Tensor& x, Activation act) {
    return act == Activation::Gelu ? gelu(x) : relu(x);
}

// ---- convolution ------------------------------------------------------------

Tensor conv2d_forward(const Conv2dLayer& layer, const Tensor& x) {
    const ConvDims d = conv_dims(layer, x);
    const int stride = layer.stride, padding = layer.padding, groups = layer.groups;
    const int patch = d.group_in * d.k_h * d.k_w;
    const size_t out_plane = static_cast<size_t>(d.out_h) * d.out_w;
    const size_t in_sample = static_cast<size_t>(d.in_c) * d.in_h * d.in_w;
    const size_t out_sample = static_cast<size_t>(d.out_c) * out_plane;

    std::vector<float> out(static_cast<size_t>(d.batch) * out_sample);
    auto xd = x.data();
    auto wd = layer.weight.data();
    const float* bias = layer.bias ? layer.bias->data().data() : nullptr;

    std::vector<float> col(out_plane * static_cast<size_t>(patch));
    for (int n = 0; n < d.batch; ++n) {
        for (int g = 0; g < groups; ++g) {
            const float* xin = xd.data() + n * in_sample +
                               static_cast<size_t>(g) * d.group_in * d.in_h * d.in_w;
            im2col(xin, d, stride, padding, col.data());
            float* obase = out.data() + n * out_sample + static_cast<size_t>(g) * d.group_out * out_plane;
            parallel_for(0, d.group_out, [&](int oc) {
                const float* wrow = wd.data() + (static_cast<size_t>(g) * d.group_out + oc) * patch;
                const float b = bias ? bias[g * d.group_out + oc] : 0.0f;
                float* orow = obase + static_cast<size_t>(oc) * out_plane;
                for (size_t p = 0; p < out_plane; ++p)
                    orow[p] = dot(wrow, col.data() + p * patch, patch) + b;
            });
        }
    }

    std::vector<Tensor> inputs = {x, layer.weight};
    if (layer.bias) inputs.push_back(*layer.bias);
    Tensor xv = x, wv = layer.weight;
    std::optional<Tensor> bv = layer.bias;
    return Tensor::make_result(
        {d.batch, d.out_c, d.out_h, d.out_w}, std::move(out), std::move(inputs),
        [xv, wv, bv, d, stride, padding, groups, patch, out_plane, in_sample,
         out_sample](Tensor& o) mutable {
            auto g = o.grad();
            auto xd2 = xv.data();
            auto wd2 = wv.data();
            std::vector<float> col(out_plane * static_cast<size_t>(patch));
            std::vector<float> dcol(out_plane * static_cast<size_t>(patch));
            for (int n = 0; n < d.batch; ++n) {
                for (int grp = 0; grp < groups; ++grp) {
                    const float* xin = xd2.data() + n * in_sample +
                                       static_cast<size_t>(grp) * d.group_in * d.in_h * d.in_w;
                    const float* gbase = g.data() + n * out_sample +
                                         static_cast<size_t>(grp) * d.group_out * out_plane;
                    if (wv.requires_grad() || bv) {
                        im2col(xin, d, stride, padding, col.data());
                        auto gw = wv.grad();
                        parallel_for(0, d.group_out, [&](int oc) {
                            float* wrow = gw.data() + (static_cast<size_t>(grp) * d.group_out + oc) * patch;
                            const float* grow = gbase + static_cast<size_t>(oc) * out_plane;
                            for (size_t p = 0; p < out_plane; ++p) {
                                const float gv = grow[p];
                                if (gv == 0.0f) continue;
                                const float* crow = col.data() + p * patch;
                                for (int k = 0; k < patch; ++k) wrow[k] += gv * crow[k];
                            }
                        });
                    }
                    if (bv && bv->requires_grad()) {
                        auto gb = bv->grad();
                        for (int oc = 0; oc < d.group_out; ++oc) {
                            const float* grow = gbase + static_cast<size_t>(oc) * out_plane;
                            float acc = 0.0f;
                            for (size_t p = 0; p < out_plane; ++p) acc += grow[p];
                            gb[grp * d.group_out + oc] += acc;
                        }
                    }
                    if (xv.requires_grad()) {
                        std::fill(dcol.begin(), dcol.end(), 0.0f);
                        parallel_for(0, static_cast<int>(out_plane), [&](int p) {
                            float* crow = dcol.data() + static_cast<size_t>(p) * patch;
                            for (int oc = 0; oc < d.group_out; ++oc) {
                                const float gv = gbase[static_cast<size_t>(oc) * out_plane + p];
                                if (gv == 0.0f) continue;
                                const float* wrow =
                                    wd2.data() + (static_cast<size_t>(grp) * d.group_out + oc) * patch;
                                for (int k = 0; k < patch; ++k) crow[k] += gv * wrow[k];
                            }
                        });
                        // col2im scatter-add, sequential for a fixed order
                        auto gx = xv.grad();
                        float* gx_group = gx.data() + n * in_sample +
                                          static_cast<size_t>(grp) * d.group_in * d.in_h * d.in_w;
                        const int k_area = d.k_h * d.k_w;
                        for (int oy = 0; oy < d.out_h; ++oy)
                            for (int ox = 0; ox < d.out_w; ++ox) {
                                const float* crow =
                                    dcol.data() +
                                    (static_cast<size_t>(oy) * d.out_w + ox) * patch;
                                const int iy0 = oy * stride - padding;
                                const int ix0 = ox * stride - padding;
                                for (int c = 0; c < d.group_in; ++c)
                                    for (int ky = 0; ky < d.k_h; ++ky) {
                                        const int iy = iy0 + ky;
                                        if (iy < 0 || iy >= d.in_h) continue;
                                        for (int kx = 0; kx < d.k_w; ++kx) {
                                            const int ix = ix0 + kx;
                                            if (ix < 0 || ix >= d.in_w) continue;
                                            gx_group[(static_cast<size_t>(c) * d.in_h + iy) * d.in_w + ix] +=
                                                crow[c * k_area + ky * d.k_w + kx];
                                        }
                                    }
                            }
                    }
                }
            }
        });
}

Tensor depthwise_conv_forward(const Conv2dLayer& layer, const Tensor& x) {
    require(layer.groups == x.dim(1) && layer.weight.dim(0) == x.dim(1) &&
                layer.weight.dim(1) == 1,
            "depthwise conv requires groups == InC == OutC (multiplier 1)");
    return conv2d_forward(layer, x);
}

// ---- batch norm -------------------------------------------------------------

Tensor batchnorm_forward(BatchNormLayer& layer, const Tensor& x, bool training) {
    require(x.rank() == 4, "batchnorm: input must be N x C x H x W");
    const int batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
    require(layer.gamma.numel() == static_cast<size_t>(channels),
            "batchnorm: layer built for " + std::to_string(layer.gamma.numel()) +
                " channels, input has " + std::to_string(channels));
    const size_t plane = static_cast<size_t>(height) * width;
    const size_t sample = static_cast<size_t>(channels) * plane;
    const size_t reduce_count = static_cast<size_t>(batch) * plane;
    if (training)
        require(reduce_count > 1, "batchnorm: batch statistics undefined for a single element");

    auto xd = x.data();
    auto gd = layer.gamma.data();
    auto bd = layer.beta.data();

    std::vector<float> mean(channels), invstd(channels);
    if (training) {
        auto rm = layer.running_mean.data();
        auto rv = layer.running_var.data();
        for (int c = 0; c < channels; ++c) {
            double acc = 0.0;
            for (int n = 0; n < batch; ++n) {
                const float* p = xd.data() + n * sample + c * plane;
                for (size_t i = 0; i < plane; ++i) acc += p[i];
            }
            const float m = static_cast<float>(acc / static_cast<double>(reduce_count));
            double var_acc = 0.0;
            for (int n = 0; n < batch; ++n) {
                const float* p = xd.data() + n * sample + c * plane;
                for (size_t i = 0; i < plane; ++i) {
                    const double dvi = static_cast<double>(p[i]) - m;
                    var_acc += dvi * dvi;
                }
            }
            const float var = static_cast<float>(var_acc / static_cast<double>(reduce_count));
            mean[c] = m;
            invstd[c] = 1.0f / std::sqrt(var + layer.eps);
            rm[c] = (1.0f - layer.momentum) * rm[c] + layer.momentum * m;
            rv[c] = (1.0f - layer.momentum) * rv[c] + layer.momentum * var;
        }
    } else {
        auto rm = layer.running_mean.data();
        auto rv = layer.running_var.data();
        for (int c = 0; c < channels; ++c) {
            mean[c] = rm[c];
            invstd[c] = 1.0f / std::sqrt(rv[c] + layer.eps);
        }
    }

    std::vector<float> out(x.numel());
    std::vector<float> xhat(training ? x.numel() : 0);
    for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c) {
            const float* p = xd.data() + n * sample + c * plane;
            float* q = out.data() + n * sample + c * plane;
            const float m = mean[c], is = invstd[c], ga = gd[c], be = bd[c];
            if (training) {
                float* h = xhat.data() + n * sample + c * plane;
                for (size_t i = 0; i < plane; ++i) {
                    h[i] = (p[i] - m) * is;
                    q[i] = ga * h[i] + be;
                }
            } else {
                for (size_t i = 0; i < plane; ++i) q[i] = ga * (p[i] - m) * is + be;
            }
        }

    Tensor xv = x, gamma = layer.gamma, beta = layer.beta;
    auto saved_xhat = std::make_shared<std::vector<float>>(std::move(xhat));
    auto saved_mean = std::make_shared<std::vector<float>>(std::move(mean));
    auto saved_invstd = std::make_shared<std::vector<float>>(std::move(invstd));
    return Tensor::make_result(
        x.shape(), std::move(out), {x, layer.gamma, layer.beta},
        [xv, gamma, beta, training, batch, channels, plane, sample, reduce_count, saved_xhat,
         saved_mean, saved_invstd](Tensor& o) mutable {
            auto g = o.grad();
            auto gd2 = gamma.data();
            const auto& invstd2 = *saved_invstd;
            for (int c = 0; c < channels; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (int n = 0; n < batch; ++n) {
                    const float* gr = g.data() + n * sample + c * plane;
                    for (size_t i = 0; i < plane; ++i) {
                        sum_g += gr[i];
                        if (training)
                            sum_gx += static_cast<double>(gr[i]) *
                                      (*saved_xhat)[n * sample + c * plane + i];
                    }
                }
                if (beta.requires_grad()) beta.grad()[c] += static_cast<float>(sum_g);
                if (training) {
                    if (gamma.requires_grad()) gamma.grad()[c] += static_cast<float>(sum_gx);
                    if (xv.requires_grad()) {
                        auto gx = xv.grad();
                        const float mg = static_cast<float>(sum_g / static_cast<double>(reduce_count));
                        const float mgx = static_cast<float>(sum_gx / static_cast<double>(reduce_count));
                        const float coef = gd2[c] * invstd2[c];
                        for (int n = 0; n < batch; ++n) {
                            const float* gr = g.data() + n * sample + c * plane;
                            const float* h = saved_xhat->data() + n * sample + c * plane;
                            float* dst = gx.data() + n * sample + c * plane;
                            for (size_t i = 0; i < plane; ++i)
                                dst[i] += coef * (gr[i] - mg - h[i] * mgx);
                        }
                    }
                } else {
                    const float m = (*saved_mean)[c], is = invstd2[c];
                    if (gamma.requires_grad()) {
                        double acc = 0.0;
                        for (int n = 0; n < batch; ++n) {
                            const float* gr = g.data() + n * sample + c * plane;
                            const float* p = xv.data().data() + n * sample + c * plane;
                            for (size_t i = 0; i < plane; ++i)
                                acc += static_cast<double>(gr[i]) * (p[i] - m) * is;
                        }
                        gamma.grad()[c] += static_cast<float>(acc);
                    }
                    if (xv.requires_grad()) {
                        auto gx = xv.grad();
                        const float coef = gd2[c] * is;
                        for (int n = 0; n < batch; ++n) {
                            const float* gr = g.data() + n * sample + c * plane;
                            float* dst = gx.data() + n * sample + c * plane;
                            for (size_t i = 0; i < plane; ++i) dst[i] += coef * gr[i];
                        }
                    }
                }
            }
        });
}

// ---- pooling ----------------------------------------------------------------

Tensor maxpool2d(const Tensor& x, int kernel, int stride, int padding) {
    require(x.rank() == 4, "maxpool2d: input must be N x C x H x W");
    const int batch = x.dim(0), channels = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
    const int out_h = (in_h + 2 * padding - kernel) / stride + 1;
    const int out_w = (in_w + 2 * padding - kernel) / stride + 1;
    require(out_h >= 1 && out_w >= 1, "maxpool2d: non-positive output size");

    auto xd = x.data();
    const size_t plane = static_cast<size_t>(in_h) * in_w;
    const size_t out_plane = static_cast<size_t>(out_h) * out_w;
    std::vector<float> out(static_cast<size_t>(batch) * channels * out_plane);
    auto argmax = std::make_shared<std::vector<size_t>>(out.size());

    size_t oi = 0;
    for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c) {
            const float* p = xd.data() + (static_cast<size_t>(n) * channels + c) * plane;
            for (int oy = 0; oy < out_h; ++oy)
                for (int ox = 0; ox < out_w; ++ox, ++oi) {
                    float best = -std::numeric_limits<float>::infinity();
                    size_t best_idx = 0;
                    for (int ky = 0; ky < kernel; ++ky) {
                        const int iy = oy * stride - padding + ky;
                        if (iy < 0 || iy >= in_h) continue;
                        for (int kx = 0; kx < kernel; ++kx) {
                            const int ix = ox * stride - padding + kx;
                            if (ix < 0 || ix >= in_w) continue;
                            const size_t idx = static_cast<size_t>(iy) * in_w + ix;
                            if (p[idx] > best) {  // strict: first maximum wins ties
                                best = p[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oi] = best;
                    (*argmax)[oi] = (static_cast<size_t>(n) * channels + c) * plane + best_idx;
                }
        }

    Tensor xv = x;
    return Tensor::make_result({batch, channels, out_h, out_w}, std::move(out), {x},
                               [xv, argmax](Tensor& o) mutable {
                                   if (!xv.requires_grad()) return;
                                   auto g = o.grad();
                                   auto gx = xv.grad();
                                   for (size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
                               });
}

Tensor avgpool2d(const Tensor& x, int kernel) {
    require(x.rank() == 4, "avgpool2d: input must be N x C x H x W");
    const int batch = x.dim(0), channels = x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
    require(kernel >= 1 && in_h % kernel == 0 && in_w % kernel == 0,
            "avgpool2d: spatial dims " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                " not divisible by kernel " + std::to_string(kernel));
    const int out_h = in_h / kernel, out_w = in_w / kernel;
    const float inv_area = 1.0f / static_cast<float>(kernel * kernel);

    auto xd = x.data();
    std::vector<float> out(static_cast<size_t>(batch) * channels * out_h * out_w);
    size_t oi = 0;
    for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c) {
            const float* p = xd.data() + (static_cast<size_t>(n) * channels + c) * in_h * in_w;
            for (int oy = 0; oy < out_h; ++oy)
                for (int ox = 0; ox < out_w; ++ox, ++oi) {
                    float acc = 0.0f;
                    for (int ky = 0; ky < kernel; ++ky)
                        for (int kx = 0; kx < kernel; ++kx)
                            acc += p[static_cast<size_t>(oy * kernel + ky) * in_w + ox * kernel + kx];
                    out[oi] = acc * inv_area;
                }
        }

    Tensor xv = x;
    const int k = kernel;
    return Tensor::make_result(
        {batch, channels, out_h, out_w}, std::move(out), {x},
        [xv, k, inv_area, batch, channels, in_h, in_w, out_h, out_w](Tensor& o) mutable {
            if (!xv.requires_grad()) return;
            auto g = o.grad();
            auto gx = xv.grad();
            size_t oi = 0;
            for (int n = 0; n < batch; ++n)
                for (int c = 0; c < channels; ++c) {
                    float* dst = gx.data() + (static_cast<size_t>(n) * channels + c) * in_h * in_w;
                    for (int oy = 0; oy < out_h; ++oy)
                        for (int ox = 0; ox < out_w; ++ox, ++oi) {
                            const float gv = g[oi] * inv_area;
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx)
                                    dst[static_cast<size_t>(oy * k + ky) * in_w + ox * k + kx] += gv;
                        }
                }
        });
}

Tensor adaptive_avgpool_1x1(const Tensor& x) {
    require(x.rank() == 4, "adaptive_avgpool_1x1: input must be N x C x H x W");
    const int batch = x.dim(0), channels = x.dim(1);
    const size_t plane = static_cast<size_t>(x.dim(2)) * x.dim(3);
    const float inv = 1.0f / static_cast<float>(plane);

    auto xd = x.data();
    std::vector<float> out(static_cast<size_t>(batch) * channels);
    for (size_t m = 0; m < out.size(); ++m) {
        const float* p = xd.data() + m * plane;
        float acc = 0.0f;
        for (size_t i = 0; i < plane; ++i) acc += p[i];
        out[m] = acc * inv;
    }

    Tensor xv = x;
    return Tensor::make_result({batch, channels, 1, 1}, std::move(out), {x},
                               [xv, plane, inv](Tensor& o) mutable {
                                   if (!xv.requires_grad()) return;
                                   auto g = o.grad();
                                   auto gx = xv.grad();
                                   for (size_t m = 0; m < g.size(); ++m) {
                                       const float gv = g[m] * inv;
                                       float* dst = gx.data() + m * plane;
                                       for (size_t i = 0; i < plane; ++i) dst[i] += gv;
                                   }
                               });
}

// ---- channel plumbing ---------------------------------------------------------

namespace {

Tensor slice_channels(const Tensor& x, int c0, int c1) {
    const int batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
    const size_t plane = static_cast<size_t>(height) * width;
    const int out_c = c1 - c0;
    std::vector<float> out(static_cast<size_t>(batch) * out_c * plane);
    auto xd = x.data();
    for (int n = 0; n < batch; ++n)
        std::memcpy(out.data() + static_cast<size_t>(n) * out_c * plane,
                    xd.data() + (static_cast<size_t>(n) * channels + c0) * plane,
                    sizeof(float) * out_c * plane);
    Tensor xv = x;
    return Tensor::make_result({batch, out_c, height, width}, std::move(out), {x},
                               [xv, c0, out_c, channels, plane, batch](Tensor& o) mutable {
                                   if (!xv.requires_grad()) return;
                                   auto g = o.grad();
                                   auto gx = xv.grad();
                                   for (int n = 0; n < batch; ++n) {
                                       const float* src = g.data() + static_cast<size_t>(n) * out_c * plane;
                                       float* dst = gx.data() + (static_cast<size_t>(n) * channels + c0) * plane;
                                       for (size_t i = 0; i < static_cast<size_t>(out_c) * plane; ++i)
                                           dst[i] += src[i];
                                   }
                               });
}

}  // namespace

std::pair<Tensor, Tensor> channel_split_half(const Tensor& x) {
    require(x.rank() == 4, "channel_split_half: input must be N x C x H x W");
    const int channels = x.dim(1);
    require(channels % 2 == 0,
            "channel_split_half: odd channel count " + std::to_string(channels));
    return {slice_channels(x, 0, channels / 2), slice_channels(x, channels / 2, channels)};
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.rank() == 4 && b.rank() == 4 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) &&
                a.dim(3) == b.dim(3),
            "concat_channels: incompatible shapes " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    const int batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), height = a.dim(2), width = a.dim(3);
    const size_t plane = static_cast<size_t>(height) * width;
    std::vector<float> out(static_cast<size_t>(batch) * (ca + cb) * plane);
    auto ad = a.data();
    auto bd = b.data();
    for (int n = 0; n < batch; ++n) {
        std::memcpy(out.data() + static_cast<size_t>(n) * (ca + cb) * plane,
                    ad.data() + static_cast<size_t>(n) * ca * plane, sizeof(float) * ca * plane);
        std::memcpy(out.data() + (static_cast<size_t>(n) * (ca + cb) + ca) * plane,
                    bd.data() + static_cast<size_t>(n) * cb * plane, sizeof(float) * cb * plane);
    }
    Tensor av = a, bv = b;
    return Tensor::make_result(
        {batch, ca + cb, height, width}, std::move(out), {a, b},
        [av, bv, batch, ca, cb, plane](Tensor& o) mutable {
            auto g = o.grad();
            if (av.requires_grad()) {
                auto ga = av.grad();
                for (int n = 0; n < batch; ++n) {
                    const float* src = g.data() + static_cast<size_t>(n) * (ca + cb) * plane;
                    float* dst = ga.data() + static_cast<size_t>(n) * ca * plane;
                    for (size_t i = 0; i < static_cast<size_t>(ca) * plane; ++i) dst[i] += src[i];
                }
            }
            if (bv.requires_grad()) {
                auto gb = bv.grad();
                for (int n = 0; n < batch; ++n) {
                    const float* src = g.data() + (static_cast<size_t>(n) * (ca + cb) + ca) * plane;
                    float* dst = gb.data() + static_cast<size_t>(n) * cb * plane;
                    for (size_t i = 0; i < static_cast<size_t>(cb) * plane; ++i) dst[i] += src[i];
                }
            }
        });
}

Tensor channel_shuffle(const Tensor& x, const ChannelShuffleSpec& spec) {
    require(x.rank() == 4, "channel_shuffle: input must be N x C x H x W");
    const int batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
    const int g = spec.groups;
    require(g >= 1 && channels % g == 0,
            "channel_shuffle: C=" + std::to_string(channels) + " not divisible by groups=" +
                std::to_string(g));
    const int per = channels / g;
    // dest[i] = (i mod per)*g + i/per
    auto dest = std::make_shared<std::vector<int>>(channels);
    for (int i = 0; i < channels; ++i) (*dest)[i] = (i % per) * g + i / per;

    const size_t plane = static_cast<size_t>(height) * width;
    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c)
            std::memcpy(out.data() + (static_cast<size_t>(n) * channels + (*dest)[c]) * plane,
                        xd.data() + (static_cast<size_t>(n) * channels + c) * plane,
                        sizeof(float) * plane);

    Tensor xv = x;
    return Tensor::make_result(x.shape(), std::move(out), {x},
                               [xv, dest, batch, channels, plane](Tensor& o) mutable {
                                   if (!xv.requires_grad()) return;
                                   auto g2 = o.grad();
                                   auto gx = xv.grad();
                                   for (int n = 0; n < batch; ++n)
                                       for (int c = 0; c < channels; ++c) {
                                           const float* src =
                                               g2.data() +
                                               (static_cast<size_t>(n) * channels + (*dest)[c]) * plane;
                                           float* dst =
                                               gx.data() + (static_cast<size_t>(n) * channels + c) * plane;
                                           for (size_t i = 0; i < plane; ++i) dst[i] += src[i];
                                       }
                               });
}

// ---- dropblock -----------------------------------------------------------------

Tensor dropblock(DropBlockLayer& layer, const Tensor& x, bool training) {
    require(x.rank() == 4, "dropblock: input must be N x C x H x W");
    if (!training || layer.drop_prob <= 0.0f) return x;  // bitwise identity

    const int batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
    const int bs = layer.block_size;
    require(bs >= 1 && bs <= height && bs <= width,
            "dropblock: block_size " + std::to_string(bs) + " exceeds spatial dims");
    require(layer.drop_prob < 1.0f, "dropblock: drop_prob must be in [0,1)");

    const int valid_h = height - bs + 1, valid_w = width - bs + 1;
    const float area = static_cast<float>(height) * static_cast<float>(width);
    const float gamma = layer.drop_prob * area /
                        (static_cast<float>(bs) * bs * static_cast<float>(valid_h) * valid_w);

    const size_t plane = static_cast<size_t>(height) * width;
    auto mask = std::make_shared<std::vector<uint8_t>>(x.numel(), uint8_t{1});
    auto scale = std::make_shared<std::vector<float>>(static_cast<size_t>(batch) * channels);

    for (int n = 0; n < batch; ++n)
        for (int c = 0; c < channels; ++c) {
            uint8_t* m = mask->data() + (static_cast<size_t>(n) * channels + c) * plane;
            for (int ay = 0; ay < valid_h; ++ay)
                for (int ax = 0; ax < valid_w; ++ax) {
                    if (!layer.rng.bernoulli(gamma)) continue;
                    for (int by = 0; by < bs; ++by)
                        std::memset(m + static_cast<size_t>(ay + by) * width + ax, 0,
                                    static_cast<size_t>(bs));
                }
            size_t kept = 0;
            for (size_t i = 0; i < plane; ++i) kept += m[i];
            (*scale)[static_cast<size_t>(n) * channels + c] =
                kept > 0 ? area / static_cast<float>(kept) : 0.0f;
        }

    std::vector<float> out(x.numel());
    auto xd = x.data();
    for (size_t map = 0; map < scale->size(); ++map) {
        const float s = (*scale)[map];
        const uint8_t* m = mask->data() + map * plane;
        const float* p = xd.data() + map * plane;
        float* q = out.data() + map * plane;
        for (size_t i = 0; i < plane; ++i) q[i] = m[i] ? p[i] * s : 0.0f;
    }

    Tensor xv = x;
    return Tensor::make_result(x.shape(), std::move(out), {x},
                               [xv, mask, scale, plane](Tensor& o) mutable {
                                   if (!xv.requires_grad()) return;
                                   auto g = o.grad();
                                   auto gx = xv.grad();
                                   for (size_t map = 0; map < scale->size(); ++map) {
                                       const float s = (*scale)[map];
                                       const uint8_t* m = mask->data() + map * plane;
                                       const float* gr = g.data() + map * plane;
                                       float* dst = gx.data() + map * plane;
                                       for (size_t i = 0; i < plane; ++i)
                                           if (m[i]) dst[i] += gr[i] * s;
                                   }
                               });
}

// ---- linear / losses -------------------------------------------------------------

Tensor linear(const Tensor& weight, const Tensor& bias, const Tensor& x) {
    require(x.rank() == 2 && weight.rank() == 2, "linear: x must be N x In, weight Out x In");
    const int batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
    require(weight.dim(1) == in, "linear: weight expects " + std::to_string(weight.dim(1)) +
                                     " inputs, x has " + std::to_string(in));
    require(bias.numel() == static_cast<size_t>(out_dim), "linear: bias length != out features");

    auto xd = x.data();
    auto wd = weight.data();
    auto bd = bias.data();
    std::vector<float> out(static_cast<size_t>(batch) * out_dim);
    for (int n = 0; n < batch; ++n)
        for (int o = 0; o < out_dim; ++o)
            out[static_cast<size_t>(n) * out_dim + o] =
                dot(xd.data() + static_cast<size_t>(n) * in, wd.data() + static_cast<size_t>(o) * in, in) +
                bd[o];

    Tensor xv = x, wv = weight, bv = bias;
    return Tensor::make_result(
        {batch, out_dim}, std::move(out), {x, weight, bias},
        [xv, wv, bv, batch, in, out_dim](Tensor& o) mutable {
            auto g = o.grad();
            auto xd2 = xv.data();
            auto wd2 = wv.data();
            if (wv.requires_grad()) {
                auto gw = wv.grad();
                for (int n = 0; n < batch; ++n)
                    for (int oo = 0; oo < out_dim; ++oo) {
                        const float gv = g[static_cast<size_t>(n) * out_dim + oo];
                        if (gv == 0.0f) continue;
                        float* wrow = gw.data() + static_cast<size_t>(oo) * in;
                        const float* xrow = xd2.data() + static_cast<size_t>(n) * in;
                        for (int i = 0; i < in; ++i) wrow[i] += gv * xrow[i];
                    }
            }
            if (bv.requires_grad()) {
                auto gb = bv.grad();
                for (int n = 0; n < batch; ++n)
                    for (int oo = 0; oo < out_dim; ++oo)
                        gb[oo] += g[static_cast<size_t>(n) * out_dim + oo];
            }
            if (xv.requires_grad()) {
                auto gx = xv.grad();
                for (int n = 0; n < batch; ++n)
                    for (int oo = 0; oo < out_dim; ++oo) {
                        const float gv = g[static_cast<size_t>(n) * out_dim + oo];
                        if (gv == 0.0f) continue;
                        const float* wrow = wd2.data() + static_cast<size_t>(oo) * in;
                        float* xrow = gx.data() + static_cast<size_t>(n) * in;
                        for (int i = 0; i < in; ++i) xrow[i] += gv * wrow[i];
                    }
            }
        });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    require(logits.rank() == 2, "cross_entropy: logits must be N x K");
    const int batch = logits.dim(0), classes = logits.dim(1);
    require(labels.size() == static_cast<size_t>(batch),
            "cross_entropy: label count != batch size");
    for (int l : labels)
        require(l >= 0 && l < classes,
                "cross_entropy: label " + std::to_string(l) + " outside [0," +
                    std::to_string(classes) + ")");

    auto ld = logits.data();
    auto probs = std::make_shared<std::vector<float>>(logits.numel());
    double loss = 0.0;
    for (int n = 0; n < batch; ++n) {
        const float* row = ld.data() + static_cast<size_t>(n) * classes;
        float* prow = probs->data() + static_cast<size_t>(n) * classes;
        float mx = row[0];
        for (int k = 1; k < classes; ++k) mx = std::max(mx, row[k]);
        double denom = 0.0;
        for (int k = 0; k < classes; ++k) {
            prow[k] = std::exp(row[k] - mx);
            denom += prow[k];
        }
        const float inv = static_cast<float>(1.0 / denom);
        for (int k = 0; k < classes; ++k) prow[k] *= inv;
        loss += std::log(denom) - static_cast<double>(row[labels[static_cast<size_t>(n)]] - mx);
    }
    loss /= batch;

    Tensor lv = logits;
    auto lab = std::make_shared<std::vector<int>>(labels);
    return Tensor::make_result(
        {1}, {static_cast<float>(loss)}, {logits},
        [lv, probs, lab, batch, classes](Tensor& o) mutable {
            if (!lv.requires_grad()) return;
            const float gout = o.grad()[0] / static_cast<float>(batch);
            auto gl = lv.grad();
            for (int n = 0; n < batch; ++n) {
                const float* prow = probs->data() + static_cast<size_t>(n) * classes;
                float* grow = gl.data() + static_cast<size_t>(n) * classes;
                const int lbl = (*lab)[static_cast<size_t>(n)];
                for (int k = 0; k < classes; ++k)
                    grow[k] += gout * (prow[k] - (k == lbl ? 1.0f : 0.0f));
            }
        });
}

std::vector<float> softmax_rows(const Tensor& logits) {
    require(logits.rank() == 2, "softmax_rows: logits must be N x K");
    const int batch = logits.dim(0), classes = logits.dim(1);
    auto ld = logits.data();
    std::vector<float> out(logits.numel());
    for (int n = 0; n < batch; ++n) {
        const float* row = ld.data() + static_cast<size_t>(n) * classes;
        float* orow = out.data() + static_cast<size_t>(n) * classes;
        float mx = row[0];
        for (int k = 1; k < classes; ++k) mx = std::max(mx, row[k]);
        double denom = 0.0;
        for (int k = 0; k < classes; ++k) {
            orow[k] = std::exp(row[k] - mx);
            denom += orow[k];
        }
        const float inv = static_cast<float>(1.0 / denom);
        for (int k = 0; k < classes; ++k) orow[k] *= inv;
    }
    return out;
}

}  // namespace fmpx
