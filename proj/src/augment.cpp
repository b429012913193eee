#include "fmpx/augment.hpp"

#include <cmath>
#include <iterator>
#include <stdexcept>

namespace fmpx {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

constexpr double kPi = 3.14159265358979323846;

int crop_amount(float fraction, int extent) {
    return static_cast<int>(std::lround(static_cast<double>(fraction) * extent));
}

}  // namespace

const char* to_string(AugmentKind kind) {
    switch (kind) {
        case AugmentKind::Fliplr: return "Fliplr";
        case AugmentKind::Flipud: return "Flipud";
        case AugmentKind::Crop: return "Crop";
        case AugmentKind::GaussianBlur: return "GaussianBlur";
        case AugmentKind::LinearContrast: return "LinearContrast";
        case AugmentKind::AdditiveGaussianNoise: return "AdditiveGaussianNoise";
        case AugmentKind::AddToSaturation: return "AddToSaturation";
        case AugmentKind::MultiplyBrightness: return "MultiplyBrightness";
        case AugmentKind::AffineScale: return "AffineScale";
        case AugmentKind::AffineTranslate: return "AffineTranslate";
        case AugmentKind::AffineShear: return "AffineShear";
        case AugmentKind::AffineRotate: return "AffineRotate";
    }
    throw std::invalid_argument("to_string: unknown augmentation kind");
}

Image apply_augment(const Image& img, AugmentKind kind, Rng& rng,
                    AppliedStrategy* applied) {
    std::vector<std::pair<std::string, double>> params;
    Image out;
    switch (kind) {
        case AugmentKind::Fliplr: {
            const bool flip = rng.bernoulli(0.5f);
            params.emplace_back("flipped", flip ? 1.0 : 0.0);
            out = flip ? flip_horizontal(img) : img;
            break;
        }
        case AugmentKind::Flipud: {
            const bool flip = rng.bernoulli(0.5f);
            params.emplace_back("flipped", flip ? 1.0 : 0.0);
            out = flip ? flip_vertical(img) : img;
            break;
        }
        case AugmentKind::Crop: {
            // Remove an independent 0..20% from each side, then restore the
            // original dims.
            const float top = rng.uniform(0.0f, 0.2f);
            const float bottom = rng.uniform(0.0f, 0.2f);
            const float left = rng.uniform(0.0f, 0.2f);
            const float right = rng.uniform(0.0f, 0.2f);
            params = {{"top", top}, {"bottom", bottom}, {"left", left}, {"right", right}};
            const int t = crop_amount(top, img.height);
            const int b = crop_amount(bottom, img.height);
            const int l = crop_amount(left, img.width);
            const int r = crop_amount(right, img.width);
            out = resize_bilinear(
                crop(img, t, l, img.height - t - b, img.width - l - r), img.height,
                img.width);
            break;
        }
        case AugmentKind::GaussianBlur: {
            const float sigma = rng.uniform(0.0f, 0.5f);
            params.emplace_back("sigma", sigma);
            out = gaussian_blur(img, sigma);
            break;
        }
        case AugmentKind::LinearContrast: {
            const float alpha = rng.uniform(0.5f, 1.5f);
            params.emplace_back("alpha", alpha);
            out = adjust_contrast(img, alpha);
            break;
        }
        case AugmentKind::AdditiveGaussianNoise: {
            const float sigma = rng.uniform(0.0f, 0.05f * 255.0f);
            params.emplace_back("sigma", sigma);
            out = add_gaussian_noise(img, sigma, rng);
            break;
        }
        case AugmentKind::AddToSaturation: {
            const int delta = rng.uniform_int(-50, 50);
            params.emplace_back("delta", delta);
            out = add_saturation(img, delta);
            break;
        }
        case AugmentKind::MultiplyBrightness: {
            const float factor = rng.uniform(0.5f, 1.5f);
            params.emplace_back("factor", factor);
            out = multiply_brightness(img, factor);
            break;
        }
        case AugmentKind::AffineScale: {
            const float sx = rng.uniform(0.5f, 1.5f);
            const float sy = rng.uniform(0.5f, 1.5f);
            params = {{"x", sx}, {"y", sy}};
            out = affine_warp(img, {sx, 0.0, 0.0, sy}, 0.0, 0.0);
            break;
        }
        case AugmentKind::AffineTranslate: {
            const float tx = rng.uniform(-0.2f, 0.2f);
            const float ty = rng.uniform(-0.2f, 0.2f);
            params = {{"x", tx}, {"y", ty}};
            out = affine_warp(img, {1.0, 0.0, 0.0, 1.0},
                              static_cast<double>(tx) * img.width,
                              static_cast<double>(ty) * img.height);
            break;
        }
        case AugmentKind::AffineShear: {
            const float deg = rng.uniform(-16.0f, 16.0f);
            params.emplace_back("degrees", deg);
            out = affine_warp(img, {1.0, std::tan(deg * kPi / 180.0), 0.0, 1.0}, 0.0, 0.0);
            break;
        }
        case AugmentKind::AffineRotate: {
            const float deg = rng.uniform(-45.0f, 45.0f);
            params.emplace_back("degrees", deg);
            const double rad = deg * kPi / 180.0;
            out = affine_warp(
                img, {std::cos(rad), -std::sin(rad), std::sin(rad), std::cos(rad)}, 0.0,
                0.0);
            break;
        }
    }
    if (applied) {
        applied->kind = kind;
        applied->params = std::move(params);
    }
    return out;
}

Image augment_image(const Image& img, Rng& rng, std::vector<AppliedStrategy>* applied) {
    std::vector<int> picks;  // a uniform 6-permutation doubles as subset + order
    rng.sample_distinct(kAugmentKindCount, 6, std::back_inserter(picks));
    Image out = img;
    for (int p : picks) {
        AppliedStrategy step;
        out = apply_augment(out, static_cast<AugmentKind>(p), rng, &step);
        if (applied) applied->push_back(std::move(step));
    }
    return out;
}

LabeledImage augment_image(const LabeledImage& img, Rng& rng) {
    LabeledImage out = img;  // caller reassigns the id when registering it
    out.image = augment_image(img.image, rng);
    return out;
}

ExpandedDataset expand_dataset(const Dataset& dataset, const std::vector<int>& targets,
                               uint64_t seed) {
    require(targets.size() == dataset.class_names.size(),
            "expand_dataset: one target per class required");
    const auto counts = dataset.class_counts();
    for (size_t c = 0; c < targets.size(); ++c)
        require(targets[c] >= counts[c], "expand_dataset: target for class " +
                                             dataset.class_names[c] +
                                             " is below its current count");

    std::vector<std::vector<const LabeledImage*>> by_class(dataset.class_names.size());
    for (const auto& s : dataset.samples) by_class[s.label].push_back(&s);

    ExpandedDataset out;
    out.dataset.class_names = dataset.class_names;
    out.dataset.samples = dataset.samples;
    out.dataset.skipped_files = dataset.skipped_files;

    int next_id = static_cast<int>(dataset.samples.size());
    for (size_t c = 0; c < targets.size(); ++c) {
        const int needed = targets[c] - counts[c];
        for (int i = 0; i < needed; ++i) {
            const LabeledImage& src = *by_class[c][i % counts[c]];
            const int copy_index = i / counts[c];
            AugmentRecord record;
            record.source_id = src.id;
            record.seed = mix64(seed, static_cast<uint64_t>(src.id),
                                static_cast<uint64_t>(copy_index));
            Rng rng(record.seed);

            LabeledImage gen;
            gen.image = augment_image(src.image, rng, &record.applied);
            gen.label = src.label;
            gen.source_path = src.source_path;
            gen.id = next_id++;
            out.dataset.samples.push_back(std::move(gen));
            out.provenance.push_back(std::move(record));
        }
    }
    return out;
}

}  // namespace fmpx
