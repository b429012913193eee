#include "fmpx/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <stdexcept>

#include "fmpx/rng.hpp"

namespace fs = std::filesystem;

namespace fmpx {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

std::vector<int> Dataset::class_counts() const {
    std::vector<int> counts(class_names.size(), 0);
    for (const auto& s : samples) counts[s.label]++;
    return counts;
}

Dataset load_dataset(const std::string& root) {
    require(fs::is_directory(root), "load_dataset: " + root + " is not a directory");

    Dataset ds;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) ds.class_names.push_back(entry.path().filename().string());
    require(!ds.class_names.empty(), "load_dataset: no class directories under " + root);
    std::sort(ds.class_names.begin(), ds.class_names.end());

    std::vector<std::pair<std::string, int>> files;  // (path, label)
    for (size_t label = 0; label < ds.class_names.size(); ++label) {
        std::vector<std::string> paths;
        for (const auto& entry : fs::directory_iterator(fs::path(root) / ds.class_names[label]))
            if (entry.is_regular_file()) paths.push_back(entry.path().string());
        require(!paths.empty(),
                "load_dataset: class directory " + ds.class_names[label] + " is empty");
        std::sort(paths.begin(), paths.end());
        for (auto& p : paths) files.emplace_back(std::move(p), static_cast<int>(label));
    }

    for (const auto& [path, label] : files) {
        LabeledImage sample;
        try {
            sample.image = read_ppm(path);
        } catch (const std::runtime_error& e) {
            std::cerr << "warning: skipping " << path << ": " << e.what() << "\n";
            ds.skipped_files++;
            continue;
        }
        if (sample.image.height < kMinImageSide || sample.image.width < kMinImageSide) {
            std::cerr << "warning: skipping " << path << ": smaller than " << kMinImageSide
                      << "x" << kMinImageSide << "\n";
            ds.skipped_files++;
            continue;
        }
        sample.label = label;
        sample.source_path = path;
        sample.id = static_cast<int>(ds.samples.size());
        ds.samples.push_back(std::move(sample));
    }
    require(!ds.samples.empty(), "load_dataset: no decodable images under " + root);
    for (int count : ds.class_counts())
        require(count > 0, "load_dataset: a class lost all its images to decode errors");
    return ds;
}

FoldPlan make_folds(const Dataset& dataset, int k, uint64_t seed) {
    require(k >= 2, "make_folds: need at least 2 folds");

    std::vector<std::vector<int>> by_class(dataset.class_names.size());
    for (const auto& s : dataset.samples) by_class[s.label].push_back(s.id);
    for (size_t c = 0; c < by_class.size(); ++c)
        require(static_cast<int>(by_class[c].size()) >= k,
                "make_folds: class " + dataset.class_names[c] + " has fewer samples than folds");

    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.folds.resize(k);

    for (size_t c = 0; c < by_class.size(); ++c) {
        auto ids = by_class[c];
        Rng rng(mix64(seed, static_cast<uint64_t>(c)));
        rng.shuffle(ids);
        // First k-1 folds take floor(n/k) test samples each; the last fold
        // absorbs the remainder, matching the published split arithmetic.
        const int base = static_cast<int>(ids.size()) / k;
        int next = 0;
        for (int f = 0; f < k; ++f) {
            const int take = f == k - 1 ? static_cast<int>(ids.size()) - next : base;
            for (int i = 0; i < take; ++i) plan.folds[f].test_ids.push_back(ids[next + i]);
            next += take;
        }
    }

    for (int f = 0; f < k; ++f) {
        auto& fold = plan.folds[f];
        std::sort(fold.test_ids.begin(), fold.test_ids.end());
        for (const auto& s : dataset.samples)
            if (!std::binary_search(fold.test_ids.begin(), fold.test_ids.end(), s.id))
                fold.train_ids.push_back(s.id);
    }
    return plan;
}

}  // namespace fmpx
