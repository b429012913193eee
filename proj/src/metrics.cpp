#include "fmpx/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace fmpx {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

double safe_ratio(int64_t num, int64_t den, bool* degenerate) {
    if (den == 0) {
        *degenerate = true;
        return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
}

// Nearest-rank percentile on a sorted vector, q in (0, 1].
double percentile(const std::vector<double>& sorted, double q) {
    auto rank = static_cast<size_t>(
        std::ceil(q * static_cast<double>(sorted.size())));
    rank = std::max<size_t>(rank, 1);
    return sorted[rank - 1];
}

struct BinarySweep {
    RocCurve curve;
    double auc = 0.0;
    bool defined = false;
};

// Descending threshold sweep with one step per distinct score; trapezoidal
// area. Undefined when either class is empty.
BinarySweep binary_roc(std::vector<std::pair<double, bool>> pairs) {
    int64_t pos = 0, neg = 0;
    for (const auto& [score, is_pos] : pairs) (is_pos ? pos : neg)++;
    BinarySweep out;
    out.curve.fpr.push_back(0.0);
    out.curve.tpr.push_back(0.0);
    if (pos == 0 || neg == 0) return out;
    std::sort(pairs.begin(), pairs.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    int64_t tp = 0, fp = 0;
    double area = 0.0;
    size_t i = 0;
    while (i < pairs.size()) {
        size_t j = i;
        while (j < pairs.size() && pairs[j].first == pairs[i].first) {
            (pairs[j].second ? tp : fp)++;
            ++j;
        }
        double fpr = static_cast<double>(fp) / static_cast<double>(neg);
        double tpr = static_cast<double>(tp) / static_cast<double>(pos);
        area += 0.5 * (tpr + out.curve.tpr.back()) * (fpr - out.curve.fpr.back());
        out.curve.fpr.push_back(fpr);
        out.curve.tpr.push_back(tpr);
        i = j;
    }
    out.auc = area;
    out.defined = true;
    return out;
}

}  // namespace

int64_t ConfusionMatrix::total() const {
    int64_t n = 0;
    for (const auto& row : counts) n += std::accumulate(row.begin(), row.end(), int64_t{0});
    return n;
}

ConfusionMatrix confusion(const std::vector<int>& predictions,
                          const std::vector<int>& labels, int k) {
    require(k >= 2, "confusion: need at least 2 classes");
    require(predictions.size() == labels.size(),
            "confusion: predictions and labels differ in length");
    require(!predictions.empty(), "confusion: empty inputs");
    ConfusionMatrix cm;
    cm.counts.assign(k, std::vector<int64_t>(k, 0));
    for (size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] >= 0 && labels[i] < k, "confusion: label out of range");
        require(predictions[i] >= 0 && predictions[i] < k,
                "confusion: prediction out of range");
        cm.counts[labels[i]][predictions[i]]++;
    }
    return cm;
}

MetricsReport per_class_metrics(const ConfusionMatrix& cm) {
    const int k = cm.k();
    require(k >= 2, "per_class_metrics: need at least 2 classes");
    for (const auto& row : cm.counts) {
        require(static_cast<int>(row.size()) == k, "per_class_metrics: ragged matrix");
        for (int64_t v : row) require(v >= 0, "per_class_metrics: negative count");
    }
    const int64_t total = cm.total();
    require(total > 0, "per_class_metrics: empty matrix");

    MetricsReport report;
    int64_t trace = 0;
    for (int i = 0; i < k; ++i) trace += cm.counts[i][i];
    report.accuracy = static_cast<double>(trace) / static_cast<double>(total);

    for (int c = 0; c < k; ++c) {
        int64_t tp = cm.counts[c][c], fp = 0, fn = 0;
        for (int i = 0; i < k; ++i) {
            if (i == c) continue;
            fp += cm.counts[i][c];
            fn += cm.counts[c][i];
        }
        const int64_t tn = total - tp - fp - fn;
        ClassMetrics m;
        m.precision = safe_ratio(tp, tp + fp, &m.precision_degenerate);
        m.recall = safe_ratio(tp, tp + fn, &m.recall_degenerate);
        m.specificity = safe_ratio(tn, tn + fp, &m.specificity_degenerate);
        const double pr = m.precision + m.recall;
        m.f1 = pr > 0.0 ? 2.0 * m.precision * m.recall / pr : 0.0;
        m.f1_degenerate = pr == 0.0;
        report.per_class.push_back(m);
        report.macro_precision += m.precision / k;
        report.macro_recall += m.recall / k;
        report.macro_specificity += m.specificity / k;
        report.macro_f1 += m.f1 / k;
    }
    return report;
}

double average_fps_mean(const std::vector<TimingSample>& samples) {
    require(!samples.empty(), "average_fps: no samples");
    double sum = 0.0;
    for (const auto& s : samples) {
        const double dur = s.t_out - s.t_in;
        require(dur > 0.0, "average_fps: non-positive duration");
        sum += 1.0 / dur;
    }
    return sum / static_cast<double>(samples.size());
}

int average_fps(const std::vector<TimingSample>& samples) {
    return static_cast<int>(std::ceil(average_fps_mean(samples)));
}

BenchResult bench_model(FastMpoxModel& model, const std::vector<Tensor>& images, int n,
                        int warmup) {
    require(n >= 1, "bench_model: need at least one timed run");
    require(warmup >= 0, "bench_model: negative warmup");
    require(!images.empty(), "bench_model: no images");
    std::vector<Tensor> batches;
    for (const auto& img : images) {
        require(img.shape().size() == 3, "bench_model: images must be CxHxW");
        Tensor b = Tensor::zeros({1, img.shape()[0], img.shape()[1], img.shape()[2]});
        std::copy(img.data().begin(), img.data().end(), b.data().begin());
        batches.push_back(std::move(b));
    }
    model.set_training(false);
    NoGradGuard guard;
    for (int i = 0; i < warmup; ++i) model.forward(batches[i % batches.size()]);

    using clock = std::chrono::steady_clock;
    BenchResult result;
    result.n = n;
    result.warmup = warmup;
    result.param_count = count_parameters(model);
    std::vector<TimingSample> samples;
    std::vector<double> durations_ms;
    for (int i = 0; i < n; ++i) {
        const auto t0 = clock::now();
        model.forward(batches[i % batches.size()]);
        const auto t1 = clock::now();
        TimingSample s;
        s.t_in = std::chrono::duration<double>(t0.time_since_epoch()).count();
        s.t_out = std::chrono::duration<double>(t1.time_since_epoch()).count();
        samples.push_back(s);
        durations_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    result.fps = average_fps(samples);
    std::sort(durations_ms.begin(), durations_ms.end());
    result.p50_ms = percentile(durations_ms, 0.50);
    result.p95_ms = percentile(durations_ms, 0.95);
    return result;
}

RocResult roc_auc(const std::vector<std::vector<float>>& scores,
                  const std::vector<int>& labels) {
    require(!scores.empty(), "roc_auc: empty scores");
    require(scores.size() == labels.size(), "roc_auc: scores and labels differ in length");
    const int k = static_cast<int>(scores[0].size());
    require(k >= 2, "roc_auc: need at least 2 classes");
    for (size_t i = 0; i < scores.size(); ++i) {
        require(static_cast<int>(scores[i].size()) == k, "roc_auc: ragged score rows");
        require(labels[i] >= 0 && labels[i] < k, "roc_auc: label out of range");
        double sum = 0.0;
        for (float v : scores[i]) {
            require(std::isfinite(v), "roc_auc: non-finite score");
            sum += v;
        }
        require(std::abs(sum - 1.0) <= 1e-4, "roc_auc: score row does not sum to 1");
    }

    RocResult out;
    std::vector<std::pair<double, bool>> pooled;
    int defined_count = 0;
    for (int c = 0; c < k; ++c) {
        std::vector<std::pair<double, bool>> pairs;
        for (size_t i = 0; i < scores.size(); ++i) {
            pairs.emplace_back(scores[i][c], labels[i] == c);
            pooled.emplace_back(scores[i][c], labels[i] == c);
        }
        BinarySweep sweep = binary_roc(std::move(pairs));
        if (!sweep.defined)
            std::cerr << "roc_auc: class " << c
                      << " has no positives or no negatives; AUC undefined\n";
        out.per_class_auc.push_back(sweep.auc);
        out.defined.push_back(sweep.defined);
        out.curves.push_back(std::move(sweep.curve));
        if (sweep.defined) {
            out.macro_auc += sweep.auc;
            defined_count++;
        }
    }
    require(defined_count > 0, "roc_auc: no class has a defined AUC");
    out.macro_auc /= defined_count;
    BinarySweep micro = binary_roc(std::move(pooled));
    out.micro_auc = micro.auc;
    out.micro_curve = std::move(micro.curve);
    return out;
}

PracticalityResult practicality_score(const std::vector<PracticalityRow>& rows) {
    require(rows.size() >= 2, "practicality_score: need at least 2 rows");
    const size_t n = rows.size();
    std::array<std::vector<double>, 4> cols;
    for (const auto& row : rows) {
        for (double v : {row.accuracy, row.fps, row.recall, row.specificity})
            require(std::isfinite(v), "practicality_score: non-finite entry");
        cols[0].push_back(row.accuracy);
        cols[1].push_back(row.fps);
        cols[2].push_back(row.recall);
        cols[3].push_back(row.specificity);
    }

    PracticalityResult out;
    out.scores.assign(n, 0.0);
    for (int j = 0; j < 4; ++j) {
        const auto [lo_it, hi_it] = std::minmax_element(cols[j].begin(), cols[j].end());
        const double lo = *lo_it, hi = *hi_it;
        if (hi == lo) {
            out.degenerate_columns.push_back(j);
            std::cerr << "practicality_score: column " << j
                      << " is constant; normalized to 0\n";
            continue;
        }
        for (size_t i = 0; i < n; ++i)
            out.scores[i] += kPracticalityWeights[j] * (cols[j][i] - lo) / (hi - lo);
    }
    return out;
}

std::vector<PracticalityRow> parse_practicality_csv(std::istream& in) {
    auto split = [](const std::string& line) {
        std::vector<std::string> fields;
        std::string field;
        std::stringstream ss(line);
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (!line.empty() && line.back() == ',') fields.push_back("");
        return fields;
    };
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), "practicality csv: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    require(line == "name,accuracy,fps,recall,specificity",
            "practicality csv: bad header: " + line);
    std::vector<PracticalityRow> rows;
    size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split(line);
        require(fields.size() == 5,
                "practicality csv: line " + std::to_string(line_no) +
                    " has " + std::to_string(fields.size()) + " fields, want 5");
        PracticalityRow row;
        row.name = fields[0];
        try {
            size_t used = 0;
            row.accuracy = std::stod(fields[1], &used);
            require(used == fields[1].size(), "trailing junk");
            row.fps = std::stod(fields[2], &used);
            require(used == fields[2].size(), "trailing junk");
            row.recall = std::stod(fields[3], &used);
            require(used == fields[3].size(), "trailing junk");
            row.specificity = std::stod(fields[4], &used);
            require(used == fields[4].size(), "trailing junk");
        } catch (const std::exception&) {
            throw std::invalid_argument("practicality csv: bad number on line " +
                                        std::to_string(line_no));
        }
        rows.push_back(std::move(row));
    }
    require(!rows.empty(), "practicality csv: no data rows");
    return rows;
}

}  // namespace fmpx
