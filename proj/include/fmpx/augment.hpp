#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fmpx/dataset.hpp"
#include "fmpx/image.hpp"
#include "fmpx/rng.hpp"

namespace fmpx {

enum class AugmentKind {
    Fliplr,
    Flipud,
    Crop,
    GaussianBlur,
    LinearContrast,
    AdditiveGaussianNoise,
    AddToSaturation,
    MultiplyBrightness,
    AffineScale,
    AffineTranslate,
    AffineShear,
    AffineRotate,
};
constexpr int kAugmentKindCount = 12;

const char* to_string(AugmentKind kind);

// One strategy application with the parameters that were actually sampled.
struct AppliedStrategy {
    AugmentKind kind;
    std::vector<std::pair<std::string, double>> params;
};

// Samples this strategy's parameters from its declared range and applies
// it. Output dims always match the input; pixels stay in [0, 255].
Image apply_augment(const Image& img, AugmentKind kind, Rng& rng,
                    AppliedStrategy* applied = nullptr);

// Draws 6 distinct strategies of the 12 uniformly and applies them in a
// uniformly random order. Deterministic for a fixed rng state.
Image augment_image(const Image& img, Rng& rng,
                    std::vector<AppliedStrategy>* applied = nullptr);
LabeledImage augment_image(const LabeledImage& img, Rng& rng);

struct AugmentRecord {
    int source_id;
    uint64_t seed;  // per-copy stream seed the strategies were drawn from
    std::vector<AppliedStrategy> applied;
};

struct ExpandedDataset {
    Dataset dataset;  // originals first (ids kept), then generated copies
    std::vector<AugmentRecord> provenance;  // one per generated copy
};

// Grows each class to targets[label] by augmenting its originals
// round-robin. Copy streams are seeded from (seed, source id, copy index),
// so results do not depend on generation order.
ExpandedDataset expand_dataset(const Dataset& dataset, const std::vector<int>& targets,
                               uint64_t seed);

}  // namespace fmpx
