#include "fmpx/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fmpx/dataset.hpp"

namespace fmpx {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Standard random-resized-crop: sample an area fraction and (log-uniform)
// aspect ratio, fall back to the largest in-ratio center crop after ten
// misses.
Image random_resized_crop(const Image& img, Rng& rng) {
    constexpr float kMinArea = 0.08f, kMaxArea = 1.0f;
    const float min_ratio = 3.0f / 4.0f, max_ratio = 4.0f / 3.0f;
    const double area = static_cast<double>(img.height) * img.width;

    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(kMinArea, kMaxArea);
        const double ratio =
            std::exp(rng.uniform(std::log(min_ratio), std::log(max_ratio)));
        const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
        const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
        if (w <= 0 || h <= 0 || w > img.width || h > img.height) continue;
        const int top = rng.uniform_int(0, img.height - h);
        const int left = rng.uniform_int(0, img.width - w);
        return crop(img, top, left, h, w);
    }

    const double in_ratio = static_cast<double>(img.width) / img.height;
    int w = img.width, h = img.height;
    if (in_ratio < min_ratio)
        h = static_cast<int>(std::lround(w / min_ratio));
    else if (in_ratio > max_ratio)
        w = static_cast<int>(std::lround(h * max_ratio));
    return center_crop(img, h, w);
}

Image resize_shorter(const Image& img, int target) {
    if (img.height <= img.width) {
        const int w = static_cast<int>(
            std::lround(static_cast<double>(img.width) * target / img.height));
        return resize_bilinear(img, target, w);
    }
    const int h = static_cast<int>(
        std::lround(static_cast<double>(img.height) * target / img.width));
    return resize_bilinear(img, h, target);
}

Tensor normalize(const Image& img) {
    std::vector<float> v(static_cast<size_t>(3) * img.height * img.width);
    size_t i = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                v[i++] = (img.at(y, x, c) / 255.0f - kNormMean[c]) / kNormStd[c];
    return Tensor::from_data({3, img.height, img.width}, std::move(v));
}

}  // namespace

Tensor preprocess(const Image& img, PreprocessMode mode, Rng& rng) {
    require(img.height >= kMinImageSide && img.width >= kMinImageSide,
            "preprocess: image smaller than " + std::to_string(kMinImageSide) + "x" +
                std::to_string(kMinImageSide));
    Image sized;
    if (mode == PreprocessMode::Train) {
        sized = resize_bilinear(random_resized_crop(img, rng), kInputSize, kInputSize);
        if (rng.bernoulli(0.5f)) sized = flip_horizontal(sized);
    } else {
        sized = center_crop(resize_shorter(img, kEvalResize), kInputSize, kInputSize);
    }
    return normalize(sized);
}

Tensor preprocess_eval(const Image& img) {
    Rng unused(0);
    return preprocess(img, PreprocessMode::Eval, unused);
}

Image denormalize(const Tensor& t) {
    require(t.rank() == 3 && t.dim(0) == 3, "denormalize: expected 3xHxW, got " +
                                                shape_str(t.shape()));
    Image img = make_image(t.dim(1), t.dim(2));
    auto d = t.data();
    size_t i = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const float v = (d[i++] * kNormStd[c] + kNormMean[c]) * 255.0f;
                img.at(y, x, c) =
                    static_cast<uint8_t>(std::clamp(std::lround(v), 0l, 255l));
            }
    return img;
}

Tensor stack_batch(const std::vector<Tensor>& items) {
    require(!items.empty(), "stack_batch: empty batch");
    const Shape item_shape = items.front().shape();
    Shape out_shape = item_shape;
    out_shape.insert(out_shape.begin(), static_cast<int>(items.size()));
    std::vector<float> v(shape_numel(out_shape));
    const size_t stride = shape_numel(item_shape);
    for (size_t n = 0; n < items.size(); ++n) {
        require(items[n].shape() == item_shape, "stack_batch: mismatched item shapes");
        auto d = items[n].data();
        std::copy(d.begin(), d.end(), v.begin() + static_cast<ptrdiff_t>(n * stride));
    }
    return Tensor::from_data(out_shape, std::move(v));
}

}  // namespace fmpx
