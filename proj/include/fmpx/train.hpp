#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fmpx/dataset.hpp"
#include "fmpx/metrics.hpp"
#include "fmpx/model.hpp"
#include "fmpx/tensor.hpp"

namespace fmpx {

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 32;
    int epochs = 100;
    double lambda1 = 1.0, lambda2 = 1.0;  // auxiliary-head loss weights
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    uint64_t seed = 0;
    bool shuffle = true;
    // Stops once the epoch's training accuracy reaches this value. 0 disables;
    // a convenience bound for sanity runs, off by default.
    double early_stop_train_accuracy = 0.0;

    void validate() const;
};

struct AdamState {
    int64_t t = 0;  // completed steps
    std::unordered_map<std::string, std::vector<float>> m, v;
};

// CE(logits3) + lambda1*CE(logits1) + lambda2*CE(logits2). Absent auxiliary
// logits (inference topology) contribute nothing; a zero lambda is skipped
// outright so the result equals CE(logits3) bitwise.
Tensor total_loss(const Tensor& logits3, const std::optional<Tensor>& logits1,
                  const std::optional<Tensor>& logits2, const std::vector<int>& labels,
                  double lambda1, double lambda2);

// One bias-corrected Adam update over params' accumulated gradients.
// Parameters without a gradient buffer are treated as zero-gradient.
void adam_step(const std::vector<std::pair<std::string, Tensor>>& params,
               AdamState& state, const TrainConfig& config);

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double eval_accuracy = 0.0;  // NaN when the fold has no test ids
};

struct TrainResult {
    std::vector<EpochRecord> epochs;
    std::string checkpoint_path;
};

// Inference-mode predictions over `ids`. Leaves the model in inference mode.
struct EvalOutput {
    std::vector<int> predictions;
    std::vector<std::vector<float>> probabilities;  // softmax rows
    double accuracy = 0.0;
};
EvalOutput evaluate(FastMpoxModel& model, const Dataset& data,
                    const std::vector<int>& ids, int batch_size);

// Epoch loop: seeded per-epoch shuffle, per-sample augmentation streams keyed
// by (seed, epoch, sample id), Adam on the multi-head loss, a checkpoint after
// every epoch (so a non-finite loss aborts with the last good one retained),
// one JSONL record per epoch to `log` if given. The model is left in
// inference mode.
TrainResult train(FastMpoxModel& model, const Dataset& data, const FoldPlan::Fold& fold,
                  const TrainConfig& config, const std::string& checkpoint_path,
                  std::ostream* log = nullptr);

struct FoldOutcome {
    int fold = 0;  // 1-based
    double accuracy = 0.0;  // held-out accuracy, in percent
    MetricsReport metrics;
    std::string checkpoint_path;
    std::vector<EpochRecord> epochs;
};

struct CrossValidationResult {
    std::vector<FoldOutcome> folds;
    double mean_accuracy = 0.0, std_accuracy = 0.0;  // percent
    std::string summary;                             // "94.26%(±2.32)"
};

// Trains one independently initialized model per fold and aggregates held-out
// accuracy as mean(±population std).
CrossValidationResult cross_validate(const Dataset& data, const ModelConfig& model_config,
                                     const TrainConfig& train_config, int k,
                                     const std::string& out_dir,
                                     std::ostream* log = nullptr);

std::pair<double, double> mean_std(const std::vector<double>& xs);  // population std
std::string format_mean_std(double mean_pct, double std_pct);
bool parse_mean_std(const std::string& text, double* mean_pct, double* std_pct);

}  // namespace fmpx
