#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fmpx/model.hpp"
#include "fmpx/tensor.hpp"

namespace fmpx {

struct ConfusionMatrix {
    std::vector<std::string> class_names;       // may be empty
    std::vector<std::vector<int64_t>> counts;   // counts[true][pred]

    int k() const { return static_cast<int>(counts.size()); }
    int64_t total() const;
};

ConfusionMatrix confusion(const std::vector<int>& predictions,
                          const std::vector<int>& labels, int k);

struct ClassMetrics {
    double precision = 0.0, recall = 0.0, specificity = 0.0, f1 = 0.0;
    // Zero-denominator cases report 0 with the matching flag set.
    bool precision_degenerate = false, recall_degenerate = false,
         specificity_degenerate = false, f1_degenerate = false;
};

struct MetricsReport {
    double accuracy = 0.0;
    std::vector<ClassMetrics> per_class;  // one-vs-rest
    double macro_precision = 0.0, macro_recall = 0.0, macro_specificity = 0.0,
           macro_f1 = 0.0;
};

MetricsReport per_class_metrics(const ConfusionMatrix& cm);

struct TimingSample {
    double t_in = 0.0, t_out = 0.0;  // monotonic seconds
};

// Mean of per-image reciprocal latencies; average_fps is its ceiling.
double average_fps_mean(const std::vector<TimingSample>& samples);
int average_fps(const std::vector<TimingSample>& samples);

struct BenchResult {
    int fps = 0;
    size_t param_count = 0;
    double p50_ms = 0.0, p95_ms = 0.0;
    int n = 0, warmup = 0, threads = 1;
};

// `warmup` untimed single-image forwards, then n timed ones cycling through
// `images`. The model is put in inference mode.
BenchResult bench_model(FastMpoxModel& model, const std::vector<Tensor>& images, int n,
                        int warmup);

struct RocCurve {
    std::vector<double> fpr, tpr;  // monotone, (0,0) .. (1,1)
};

struct RocResult {
    std::vector<double> per_class_auc;  // 0 where undefined
    std::vector<bool> defined;          // false: class missing from labels (or negatives)
    double macro_auc = 0.0;             // mean over defined classes
    double micro_auc = 0.0;             // pooled one-vs-rest pairs
    std::vector<RocCurve> curves;
    RocCurve micro_curve;
};

// One-vs-rest threshold sweep (one threshold per distinct score, so ties are
// swept together), trapezoidal AUC. Rows must sum to 1 within 1e-4.
RocResult roc_auc(const std::vector<std::vector<float>>& scores,
                  const std::vector<int>& labels);

struct PracticalityRow {
    std::string name;
    double accuracy = 0.0, fps = 0.0, recall = 0.0, specificity = 0.0;
};

// Published combination weights; they sum to 1.05 as printed.
constexpr std::array<double, 4> kPracticalityWeights = {0.15, 0.40, 0.35, 0.15};

struct PracticalityResult {
    std::vector<double> scores;            // aligned with the input rows
    std::vector<int> degenerate_columns;   // constant columns, normalized to 0
};

// Min-max normalizes each metric column, then combines with the published
// weights. A constant column normalizes to 0 for every row (with a warning).
PracticalityResult practicality_score(const std::vector<PracticalityRow>& rows);

// CSV with header "name,accuracy,fps,recall,specificity".
std::vector<PracticalityRow> parse_practicality_csv(std::istream& in);

}  // namespace fmpx
