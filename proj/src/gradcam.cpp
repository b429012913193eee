#include "fmpx/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace fmpx {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Pixel-center bilinear resampling of a single-channel float map, matching
// the image-resize convention.
std::vector<float> upsample_bilinear(const std::vector<double>& src, int sh, int sw,
                                     int dh, int dw) {
    std::vector<float> dst(static_cast<size_t>(dh) * dw);
    const double sy = static_cast<double>(sh) / dh;
    const double sx = static_cast<double>(sw) / dw;
    for (int y = 0; y < dh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(sh - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, sh - 1);
        const double wy = fy - y0;
        for (int x = 0; x < dw; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(sw - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, sw - 1);
            const double wx = fx - x0;
            const double top = src[static_cast<size_t>(y0) * sw + x0] * (1.0 - wx) +
                               src[static_cast<size_t>(y0) * sw + x1] * wx;
            const double bot = src[static_cast<size_t>(y1) * sw + x0] * (1.0 - wx) +
                               src[static_cast<size_t>(y1) * sw + x1] * wx;
            dst[static_cast<size_t>(y) * dw + x] =
                static_cast<float>(top * (1.0 - wy) + bot * wy);
        }
    }
    return dst;
}

uint8_t blend_channel(float alpha, uint8_t color, uint8_t pixel) {
    const double v = static_cast<double>(alpha) * color +
                     (1.0 - static_cast<double>(alpha)) * pixel;
    return static_cast<uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
}

}  // namespace

const std::array<const char*, 5> kCamLayers = {"stage2", "stage3", "stage4", "stage5",
                                               "fusion"};

CamResult grad_cam(FastMpoxModel& model, const Tensor& input, int target_class,
                   const std::string& target_layer) {
    require(input.defined(), "grad_cam: undefined input");
    Tensor x = input;
    if (x.rank() == 3)
        x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    require(x.rank() == 4 && x.dim(0) == 1, "grad_cam: input must be one 3xHxW image");
    require(grad_enabled(), "grad_cam: gradients are disabled in this scope");

    model.set_training(false);
    model.zero_grad();
    const ForwardResult r = model.forward(x);
    require(target_class >= 0 && target_class < r.logits3.dim(1),
            "grad_cam: class index out of range");

    Tensor activation;
    if (target_layer == "stage2") activation = r.stage2_out;
    else if (target_layer == "stage3") activation = r.stage3_out;
    else if (target_layer == "stage4") activation = r.stage4_out;
    else if (target_layer == "stage5") activation = r.stage5_out;
    else if (target_layer == "fusion") activation = r.fusion_out;
    else throw std::invalid_argument("grad_cam: unknown target layer: " + target_layer);

    pick(r.logits3, static_cast<size_t>(target_class)).backward();
    require(activation.has_grad(), "grad_cam: target layer received no gradient");

    const std::span<const float> a = activation.data();
    const std::span<const float> g = activation.grad();
    CamResult cam = cam_from_maps({a.begin(), a.end()}, {g.begin(), g.end()},
                                  activation.dim(1), activation.dim(2),
                                  activation.dim(3), x.dim(2), x.dim(3));
    cam.target_class = target_class;
    cam.target_layer = target_layer;
    model.zero_grad();
    return cam;
}

CamResult cam_from_maps(const std::vector<float>& activations,
                        const std::vector<float>& gradients, int channels, int h, int w,
                        int out_h, int out_w) {
    require(channels >= 1 && h >= 1 && w >= 1 && out_h >= 1 && out_w >= 1,
            "cam_from_maps: non-positive dims");
    const size_t plane = static_cast<size_t>(h) * w;
    require(activations.size() == plane * static_cast<size_t>(channels),
            "cam_from_maps: activation length disagrees with dims");
    require(gradients.size() == activations.size(),
            "cam_from_maps: gradient length disagrees with activations");

    CamResult cam;
    cam.height = out_h;
    cam.width = out_w;
    for (int k = 0; k < channels; ++k) {
        double sum = 0.0;
        for (size_t i = 0; i < plane; ++i) sum += gradients[k * plane + i];
        cam.alphas.push_back(static_cast<float>(sum / static_cast<double>(plane)));
    }

    std::vector<double> map(plane, 0.0);
    for (int k = 0; k < channels; ++k)
        for (size_t i = 0; i < plane; ++i)
            map[i] += static_cast<double>(cam.alphas[static_cast<size_t>(k)]) *
                      activations[k * plane + i];
    for (double& v : map) v = std::max(v, 0.0);

    cam.heatmap = upsample_bilinear(map, h, w, out_h, out_w);
    const auto [mn_it, mx_it] =
        std::minmax_element(cam.heatmap.begin(), cam.heatmap.end());
    const float mn = *mn_it, mx = *mx_it;
    if (mx == 0.0f) {
        cam.zero_map = true;
        std::fill(cam.heatmap.begin(), cam.heatmap.end(), 0.0f);
    } else if (mx == mn) {
        std::fill(cam.heatmap.begin(), cam.heatmap.end(), 1.0f);
    } else {
        for (float& v : cam.heatmap) v = (v - mn) / (mx - mn);
    }
    return cam;
}

std::array<uint8_t, 3> heat_color(float t) {
    static const std::array<std::array<double, 3>, 5> stops = {{
        {0, 0, 255}, {0, 255, 255}, {0, 255, 0}, {255, 255, 0}, {255, 0, 0}}};
    const double u = std::clamp(static_cast<double>(t), 0.0, 1.0) * 4.0;
    const int i = std::min(static_cast<int>(u), 3);
    const double f = u - i;
    std::array<uint8_t, 3> out{};
    for (int ch = 0; ch < 3; ++ch)
        out[static_cast<size_t>(ch)] = static_cast<uint8_t>(
            std::lround(stops[i][ch] * (1.0 - f) + stops[i + 1][ch] * f));
    return out;
}

Image colorize_heatmap(const CamResult& cam) {
    require(static_cast<size_t>(cam.height) * cam.width == cam.heatmap.size(),
            "colorize_heatmap: dims disagree with heatmap length");
    Image out = make_image(cam.height, cam.width);
    for (size_t i = 0; i < cam.heatmap.size(); ++i) {
        const auto color = heat_color(cam.heatmap[i]);
        for (int ch = 0; ch < 3; ++ch) out.pixels[i * 3 + ch] = color[ch];
    }
    return out;
}

Image overlay_heatmap(const Image& image, const CamResult& cam, float alpha) {
    require(image.height == cam.height && image.width == cam.width,
            "overlay_heatmap: image and heatmap dims differ");
    require(static_cast<size_t>(cam.height) * cam.width == cam.heatmap.size(),
            "overlay_heatmap: dims disagree with heatmap length");
    require(alpha >= 0.0f && alpha <= 1.0f, "overlay_heatmap: alpha outside [0,1]");
    Image out = make_image(image.height, image.width);
    for (size_t i = 0; i < cam.heatmap.size(); ++i) {
        const auto color = heat_color(cam.heatmap[i]);
        for (int ch = 0; ch < 3; ++ch)
            out.pixels[i * 3 + ch] =
                blend_channel(alpha, color[ch], image.pixels[i * 3 + ch]);
    }
    return out;
}

void write_heatmap_csv(std::ostream& out, const CamResult& cam) {
    require(static_cast<size_t>(cam.height) * cam.width == cam.heatmap.size(),
            "write_heatmap_csv: dims disagree with heatmap length");
    char buf[32];
    for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
            std::snprintf(buf, sizeof buf, "%.9g",
                          cam.heatmap[static_cast<size_t>(y) * cam.width + x]);
            out << (x ? "," : "") << buf;
        }
        out << '\n';
    }
}

}  // namespace fmpx
