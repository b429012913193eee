#include "fmpx/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace fmpx {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

uint8_t to_byte(float v) {
    return static_cast<uint8_t>(std::clamp(std::lround(v), 0l, 255l));
}

void check_image(const Image& img, const std::string& op) {
    require(img.height > 0 && img.width > 0, op + ": empty image");
    require(img.pixels.size() ==
                static_cast<size_t>(img.height) * img.width * 3,
            op + ": pixel buffer does not match dimensions");
}

// Reads the next header token, skipping whitespace and # comments.
std::string ppm_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw std::runtime_error("ppm: truncated header");
    return tok;
}

int ppm_int(std::istream& in, const std::string& what) {
    const std::string tok = ppm_token(in);
    try {
        size_t used = 0;
        const int v = std::stoi(tok, &used);
        if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error("ppm: bad " + what + " '" + tok + "'");
    }
}

}  // namespace

Image make_image(int height, int width, uint8_t fill) {
    require(height > 0 && width > 0, "make_image: dimensions must be positive");
    Image img;
    img.height = height;
    img.width = width;
    img.pixels.assign(static_cast<size_t>(height) * width * 3, fill);
    return img;
}

Image read_ppm(std::istream& in) {
    if (ppm_token(in) != "P6") throw std::runtime_error("ppm: not a binary P6 file");
    Image img;
    img.width = ppm_int(in, "width");
    img.height = ppm_int(in, "height");
    const int maxval = ppm_int(in, "maxval");
    if (maxval != 255)
        throw std::runtime_error("ppm: unsupported maxval " + std::to_string(maxval));
    // The single whitespace byte after maxval was already consumed by the
    // tokenizer.
    img.pixels.resize(static_cast<size_t>(img.height) * img.width * 3);
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (static_cast<size_t>(in.gcount()) != img.pixels.size())
        throw std::runtime_error("ppm: truncated pixel data");
    return img;
}

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("ppm: cannot open " + path);
    try {
        return read_ppm(in);
    } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string(e.what()) + " (" + path + ")");
    }
}

void write_ppm(std::ostream& out, const Image& img) {
    check_image(img, "write_ppm");
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
}

void write_ppm(const std::string& path, const Image& img) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("ppm: cannot open " + path + " for writing");
    write_ppm(out, img);
    out.flush();
    if (!out) throw std::runtime_error("ppm: write failed for " + path);
}

Image resize_bilinear(const Image& img, int out_height, int out_width) {
    check_image(img, "resize");
    require(out_height > 0 && out_width > 0, "resize: output dims must be positive");
    if (out_height == img.height && out_width == img.width) return img;

    Image out = make_image(out_height, out_width);
    const double sy = static_cast<double>(img.height) / out_height;
    const double sx = static_cast<double>(img.width) / out_width;
    for (int y = 0; y < out_height; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(img.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_width; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(img.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double top = img.at(y0, x0, c) * (1.0 - wx) + img.at(y0, x1, c) * wx;
                const double bot = img.at(y1, x0, c) * (1.0 - wx) + img.at(y1, x1, c) * wx;
                out.at(y, x, c) = to_byte(static_cast<float>(top * (1.0 - wy) + bot * wy));
            }
        }
    }
    return out;
}

Image crop(const Image& img, int top, int left, int height, int width) {
    check_image(img, "crop");
    require(height > 0 && width > 0, "crop: dims must be positive");
    require(top >= 0 && left >= 0 && top + height <= img.height &&
                left + width <= img.width,
            "crop: window out of bounds");
    Image out = make_image(height, width);
    for (int y = 0; y < height; ++y)
        std::copy_n(&img.pixels[((static_cast<size_t>(top) + y) * img.width + left) * 3],
                    static_cast<size_t>(width) * 3,
                    &out.pixels[static_cast<size_t>(y) * width * 3]);
    return out;
}

Image center_crop(const Image& img, int height, int width) {
    return crop(img, (img.height - height) / 2, (img.width - width) / 2, height, width);
}

Image flip_horizontal(const Image& img) {
    check_image(img, "flip");
    Image out = make_image(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
    return out;
}

Image flip_vertical(const Image& img) {
    check_image(img, "flip");
    Image out = make_image(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(img.height - 1 - y, x, c);
    return out;
}

Image affine_warp(const Image& img, const std::array<double, 4>& m, double tx, double ty) {
    check_image(img, "affine");
    const double det = m[0] * m[3] - m[1] * m[2];
    require(std::abs(det) > 1e-12, "affine: singular transform");
    // Inverse of the 2x2 linear part.
    const double i00 = m[3] / det, i01 = -m[1] / det;
    const double i10 = -m[2] / det, i11 = m[0] / det;
    const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;

    Image out = make_image(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double dx = x - cx - tx, dy = y - cy - ty;
            const double sx = i00 * dx + i01 * dy + cx;
            const double sy = i10 * dx + i11 * dy + cy;
            const int x0 = static_cast<int>(std::floor(sx));
            const int y0 = static_cast<int>(std::floor(sy));
            const double wx = sx - x0, wy = sy - y0;
            for (int c = 0; c < 3; ++c) {
                // Out-of-range neighbors contribute black.
                auto sample = [&](int yy, int xx) -> double {
                    if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) return 0.0;
                    return img.at(yy, xx, c);
                };
                const double v = sample(y0, x0) * (1 - wx) * (1 - wy) +
                                 sample(y0, x0 + 1) * wx * (1 - wy) +
                                 sample(y0 + 1, x0) * (1 - wx) * wy +
                                 sample(y0 + 1, x0 + 1) * wx * wy;
                out.at(y, x, c) = to_byte(static_cast<float>(v));
            }
        }
    return out;
}

Image gaussian_blur(const Image& img, float sigma) {
    check_image(img, "blur");
    if (sigma <= 0.0f) return img;
    const int radius = static_cast<int>(std::ceil(3.0f * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        total += kernel[i + radius];
    }
    for (auto& k : kernel) k /= total;

    auto clampi = [](int v, int hi) { return std::clamp(v, 0, hi); };
    // Horizontal pass in double, then vertical with rounding.
    std::vector<double> tmp(img.pixels.size());
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    s += kernel[i + radius] * img.at(y, clampi(x + i, img.width - 1), c);
                tmp[(static_cast<size_t>(y) * img.width + x) * 3 + c] = s;
            }
    Image out = make_image(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    s += kernel[i + radius] *
                         tmp[(static_cast<size_t>(clampi(y + i, img.height - 1)) * img.width +
                              x) *
                                 3 +
                             c];
                out.at(y, x, c) = to_byte(static_cast<float>(s));
            }
    return out;
}

Image adjust_contrast(const Image& img, float alpha) {
    check_image(img, "contrast");
    Image out = img;
    for (auto& p : out.pixels) p = to_byte(127.0f + alpha * (p - 127.0f));
    return out;
}

Image add_gaussian_noise(const Image& img, float sigma, Rng& rng) {
    check_image(img, "noise");
    Image out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const float n = rng.normal(0.0f, sigma);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = to_byte(img.at(y, x, c) + n);
        }
    return out;
}

Hsv rgb_to_hsv(uint8_t r8, uint8_t g8, uint8_t b8) {
    const float r = r8 / 255.0f, g = g8 / 255.0f, b = b8 / 255.0f;
    const float maxc = std::max({r, g, b});
    const float minc = std::min({r, g, b});
    const float delta = maxc - minc;
    Hsv hsv{0.0f, 0.0f, maxc};
    if (delta > 0.0f) {
        if (maxc == r)
            hsv.h = 60.0f * std::fmod((g - b) / delta + 6.0f, 6.0f);
        else if (maxc == g)
            hsv.h = 60.0f * ((b - r) / delta + 2.0f);
        else
            hsv.h = 60.0f * ((r - g) / delta + 4.0f);
        hsv.s = delta / maxc;
    }
    return hsv;
}

std::array<uint8_t, 3> hsv_to_rgb(const Hsv& hsv) {
    const float c = hsv.v * hsv.s;
    const float hp = hsv.h / 60.0f;
    const float x = c * (1.0f - std::abs(std::fmod(hp, 2.0f) - 1.0f));
    float r = 0.0f, g = 0.0f, b = 0.0f;
    if (hp < 1.0f)
        r = c, g = x;
    else if (hp < 2.0f)
        r = x, g = c;
    else if (hp < 3.0f)
        g = c, b = x;
    else if (hp < 4.0f)
        g = x, b = c;
    else if (hp < 5.0f)
        r = x, b = c;
    else
        r = c, b = x;
    const float m = hsv.v - c;
    return {to_byte((r + m) * 255.0f), to_byte((g + m) * 255.0f), to_byte((b + m) * 255.0f)};
}

Image add_saturation(const Image& img, int delta) {
    check_image(img, "saturation");
    Image out = make_image(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            Hsv hsv = rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
            hsv.s = std::clamp(hsv.s + delta / 255.0f, 0.0f, 1.0f);
            const auto rgb = hsv_to_rgb(hsv);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = rgb[c];
        }
    return out;
}

Image multiply_brightness(const Image& img, float factor) {
    check_image(img, "brightness");
    require(factor >= 0.0f, "brightness: negative factor");
    Image out = make_image(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            Hsv hsv = rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
            hsv.v = std::clamp(hsv.v * factor, 0.0f, 1.0f);
            const auto rgb = hsv_to_rgb(hsv);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = rgb[c];
        }
    return out;
}

}  // namespace fmpx
