#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fmpx/image.hpp"

namespace fmpx {

constexpr int kMinImageSide = 32;

struct LabeledImage {
    Image image;
    int label = 0;
    std::string source_path;
    int id = 0;  // stable: position in the lexicographically sorted path list
};

struct Dataset {
    std::vector<std::string> class_names;  // lexicographic
    std::vector<LabeledImage> samples;     // ordered by id
    int skipped_files = 0;                 // undecodable inputs

    std::vector<int> class_counts() const;
};

// Loads root/<class_name>/<files> trees. Classes are ordered
// lexicographically and ids follow the sorted file paths, so the result is
// independent of directory enumeration order. Undecodable files are skipped
// with a warning; an empty class directory is an error.
Dataset load_dataset(const std::string& root);

struct FoldPlan {
    int k = 5;
    uint64_t seed = 0;
    struct Fold {
        std::vector<int> train_ids;
        std::vector<int> test_ids;
    };
    std::vector<Fold> folds;
};

// Seeded per-class split: each class's ids are shuffled, the first k-1
// folds take floor(n/k) test samples and the last fold takes the remainder
// (so e.g. 107 splits as 21+21+21+21+23). Train ids are the complement.
FoldPlan make_folds(const Dataset& dataset, int k, uint64_t seed);

}  // namespace fmpx
