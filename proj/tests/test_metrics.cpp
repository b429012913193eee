#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "fmpx/metrics.hpp"
#include "fmpx/rng.hpp"

using namespace fmpx;

namespace {

bool close(double a, double b, double tol = 1e-12) { return std::abs(a - b) <= tol; }

// Pair-counting AUC: wins + half-ties over positive/negative pairs.
double mann_whitney_auc(const std::vector<double>& scores, const std::vector<bool>& pos) {
    double wins = 0.0;
    int64_t np = 0, nn = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!pos[i]) continue;
        ++np;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (pos[j]) continue;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    nn = static_cast<int64_t>(scores.size()) - np;
    REQUIRE(np > 0);
    REQUIRE(nn > 0);
    return wins / (static_cast<double>(np) * static_cast<double>(nn));
}

// grid=true draws from a small integer grid so ties recur across rows.
std::vector<std::vector<float>> random_prob_rows(Rng& rng, int n, int k, bool grid = false) {
    std::vector<std::vector<float>> rows(n, std::vector<float>(k));
    for (auto& row : rows) {
        double sum = 0.0;
        std::vector<double> raw(k);
        for (int c = 0; c < k; ++c) {
            raw[c] = grid ? 1.0 + static_cast<double>(rng.uniform_int(4))
                          : rng.uniform(0.05, 1.0);
            sum += raw[c];
        }
        double acc = 0.0;
        for (int c = 0; c < k - 1; ++c) {
            row[c] = static_cast<float>(raw[c] / sum);
            acc += row[c];
        }
        row[k - 1] = static_cast<float>(1.0 - acc);
    }
    return rows;
}

}  // namespace

TEST_CASE("metrics: confusion matrix layout and validation") {
    // predictions {0,1,1,1,1,0}? build the fixed matrix [[2,1],[0,3]]:
    // true 0 predicted 0 twice, true 0 predicted 1 once, true 1 predicted 1 thrice.
    const std::vector<int> labels = {0, 0, 0, 1, 1, 1};
    const std::vector<int> preds = {0, 0, 1, 1, 1, 1};
    const ConfusionMatrix cm = confusion(preds, labels, 2);
    CHECK(cm.k() == 2);
    CHECK(cm.total() == 6);
    CHECK(cm.counts[0][0] == 2);
    CHECK(cm.counts[0][1] == 1);
    CHECK(cm.counts[1][0] == 0);
    CHECK(cm.counts[1][1] == 3);

    CHECK_THROWS_AS(confusion({0}, {0, 1}, 2), std::invalid_argument);
    CHECK_THROWS_AS(confusion({}, {}, 2), std::invalid_argument);
    CHECK_THROWS_AS(confusion({2}, {0}, 2), std::invalid_argument);
    CHECK_THROWS_AS(confusion({0}, {-1}, 2), std::invalid_argument);
    CHECK_THROWS_AS(confusion({0}, {0}, 1), std::invalid_argument);
}

TEST_CASE("metrics: fixed two-class oracle") {
    ConfusionMatrix cm;
    cm.counts = {{2, 1}, {0, 3}};
    const MetricsReport r = per_class_metrics(cm);
    CHECK(close(r.accuracy, 5.0 / 6.0));
    CHECK(close(r.per_class[0].precision, 1.0));
    CHECK(close(r.per_class[0].recall, 2.0 / 3.0));
    CHECK(close(r.per_class[0].specificity, 1.0));
    CHECK(close(r.per_class[0].f1, 0.8));
    CHECK(close(r.per_class[1].precision, 0.75));
    CHECK(close(r.per_class[1].recall, 1.0));
    CHECK(close(r.per_class[1].specificity, 2.0 / 3.0));
    CHECK(close(r.per_class[1].f1, 6.0 / 7.0));
    CHECK(!r.per_class[0].precision_degenerate);
    CHECK(!r.per_class[1].specificity_degenerate);
    CHECK(close(r.macro_precision, (1.0 + 0.75) / 2.0));
    CHECK(close(r.macro_f1, (0.8 + 6.0 / 7.0) / 2.0));
}

TEST_CASE("metrics: per-class metrics match direct pair counting") {
    Rng rng(412);
    for (int rep = 0; rep < 40; ++rep) {
        const int k = 2 + static_cast<int>(rng.uniform_int(4));
        const int n = 50 + static_cast<int>(rng.uniform_int(150));
        std::vector<int> labels(n), preds(n);
        for (int i = 0; i < n; ++i) {
            labels[i] = static_cast<int>(rng.uniform_int(k));
            preds[i] = static_cast<int>(rng.uniform_int(k));
        }
        const MetricsReport r = per_class_metrics(confusion(preds, labels, k));

        int64_t correct = 0;
        for (int i = 0; i < n; ++i) correct += labels[i] == preds[i];
        CHECK(close(r.accuracy, static_cast<double>(correct) / n));

        for (int c = 0; c < k; ++c) {
            int64_t tp = 0, fp = 0, fn = 0, tn = 0;
            for (int i = 0; i < n; ++i) {
                const bool is_c = labels[i] == c, said_c = preds[i] == c;
                if (is_c && said_c) ++tp;
                else if (!is_c && said_c) ++fp;
                else if (is_c && !said_c) ++fn;
                else ++tn;
            }
            const auto& m = r.per_class[c];
            if (tp + fp == 0) CHECK(m.precision_degenerate);
            else CHECK(close(m.precision, double(tp) / double(tp + fp)));
            if (tp + fn == 0) CHECK(m.recall_degenerate);
            else CHECK(close(m.recall, double(tp) / double(tp + fn)));
            if (tn + fp == 0) CHECK(m.specificity_degenerate);
            else CHECK(close(m.specificity, double(tn) / double(tn + fp)));
            if (m.precision + m.recall > 0.0)
                CHECK(close(m.f1, 2.0 * m.precision * m.recall / (m.precision + m.recall)));
            else CHECK(m.f1_degenerate);
        }
    }
}

TEST_CASE("metrics: zero-denominator cases report 0 with flags") {
    // Class 2 never appears as a label or prediction.
    ConfusionMatrix cm;
    cm.counts = {{3, 1, 0}, {0, 4, 0}, {0, 0, 0}};
    const MetricsReport r = per_class_metrics(cm);
    CHECK(r.per_class[2].precision == 0.0);
    CHECK(r.per_class[2].recall == 0.0);
    CHECK(r.per_class[2].f1 == 0.0);
    CHECK(r.per_class[2].precision_degenerate);
    CHECK(r.per_class[2].recall_degenerate);
    CHECK(r.per_class[2].f1_degenerate);
    CHECK(r.per_class[2].specificity == 1.0);
    CHECK(!r.per_class[2].specificity_degenerate);

    // Everything is class 0, and predicted as such: no negatives for class 0.
    ConfusionMatrix all0;
    all0.counts = {{5, 0}, {0, 0}};
    const MetricsReport r0 = per_class_metrics(all0);
    CHECK(r0.per_class[0].specificity == 0.0);
    CHECK(r0.per_class[0].specificity_degenerate);
    CHECK(close(r0.accuracy, 1.0));

    ConfusionMatrix empty;
    empty.counts = {{0, 0}, {0, 0}};
    CHECK_THROWS_AS(per_class_metrics(empty), std::invalid_argument);
    ConfusionMatrix ragged;
    ragged.counts = {{1, 2}, {3}};
    CHECK_THROWS_AS(per_class_metrics(ragged), std::invalid_argument);
}

TEST_CASE("metrics: average fps ceiling of mean reciprocal latency") {
    auto durs = [](std::initializer_list<double> ds) {
        std::vector<TimingSample> out;
        double t = 100.0;
        for (double d : ds) {
            out.push_back({t, t + d});
            t += d;
        }
        return out;
    };
    CHECK(average_fps(durs({0.01, 0.02, 0.04})) == 59);
    CHECK(average_fps(durs({0.01, 0.01, 0.01})) == 100);
    CHECK(average_fps(durs({1.0})) == 1);

    // Reordering the samples cannot change the result.
    CHECK(average_fps(durs({0.04, 0.01, 0.02})) == 59);

    // Doubling every duration exactly halves the pre-ceiling mean.
    const auto a = durs({0.013, 0.021, 0.009});
    const auto b = durs({0.026, 0.042, 0.018});
    CHECK(close(average_fps_mean(b), average_fps_mean(a) / 2.0, 1e-9));

    CHECK_THROWS_AS(average_fps({}), std::invalid_argument);
    CHECK_THROWS_AS(average_fps({{5.0, 5.0}}), std::invalid_argument);
    CHECK_THROWS_AS(average_fps({{5.0, 4.0}}), std::invalid_argument);
}

TEST_CASE("metrics: roc separates, reverses, and handles constant scores") {
    // Perfectly separated two-class scores.
    std::vector<std::vector<float>> scores = {
        {0.9f, 0.1f}, {0.8f, 0.2f}, {0.3f, 0.7f}, {0.2f, 0.8f}};
    std::vector<int> labels = {0, 0, 1, 1};
    RocResult r = roc_auc(scores, labels);
    CHECK(close(r.per_class_auc[0], 1.0));
    CHECK(close(r.per_class_auc[1], 1.0));
    CHECK(close(r.macro_auc, 1.0));
    CHECK(close(r.micro_auc, 1.0));

    // Anti-separated: every positive scores below every negative.
    RocResult rev = roc_auc(scores, {1, 1, 0, 0});
    CHECK(close(rev.per_class_auc[0], 0.0));
    CHECK(close(rev.macro_auc, 0.0));

    // All rows identical: a single sweep step, area 0.5.
    std::vector<std::vector<float>> flat(6, {0.25f, 0.75f});
    RocResult rf = roc_auc(flat, {0, 1, 0, 1, 0, 1});
    CHECK(close(rf.per_class_auc[0], 0.5));
    CHECK(close(rf.per_class_auc[1], 0.5));
    CHECK(close(rf.micro_auc, 0.5));
}

TEST_CASE("metrics: roc matches pair counting on random data") {
    Rng rng(993);
    for (int rep = 0; rep < 12; ++rep) {
        const int k = 2 + static_cast<int>(rng.uniform_int(3));
        const int n = 40 + static_cast<int>(rng.uniform_int(60));
        // Grid scores force plenty of ties through the sweep.
        auto scores = random_prob_rows(rng, n, k, rep % 2 == 0);
        std::vector<int> labels(n);
        for (int i = 0; i < n; ++i) labels[i] = static_cast<int>(rng.uniform_int(k));
        for (int c = 0; c < k; ++c) labels[c] = c;  // every class present

        const RocResult r = roc_auc(scores, labels);
        std::vector<double> pooled_scores;
        std::vector<bool> pooled_pos;
        for (int c = 0; c < k; ++c) {
            std::vector<double> s(n);
            std::vector<bool> pos(n);
            for (int i = 0; i < n; ++i) {
                s[i] = scores[i][c];
                pos[i] = labels[i] == c;
                pooled_scores.push_back(s[i]);
                pooled_pos.push_back(pos[i]);
            }
            CHECK(r.defined[c]);
            CHECK(close(r.per_class_auc[c], mann_whitney_auc(s, pos), 1e-10));
        }
        CHECK(close(r.micro_auc, mann_whitney_auc(pooled_scores, pooled_pos), 1e-10));

        for (const auto& curve : r.curves) {
            REQUIRE(curve.fpr.size() == curve.tpr.size());
            CHECK(curve.fpr.front() == 0.0);
            CHECK(curve.tpr.front() == 0.0);
            CHECK(close(curve.fpr.back(), 1.0));
            CHECK(close(curve.tpr.back(), 1.0));
            CHECK(std::is_sorted(curve.fpr.begin(), curve.fpr.end()));
            CHECK(std::is_sorted(curve.tpr.begin(), curve.tpr.end()));
        }
    }
}

TEST_CASE("metrics: roc flags absent classes and validates input") {
    std::vector<std::vector<float>> scores = {
        {0.5f, 0.3f, 0.2f}, {0.2f, 0.6f, 0.2f}, {0.1f, 0.6f, 0.3f}, {0.7f, 0.1f, 0.2f}};
    const RocResult r = roc_auc(scores, {0, 1, 1, 0});
    CHECK(!r.defined[2]);
    CHECK(r.per_class_auc[2] == 0.0);
    CHECK(r.defined[0]);
    CHECK(r.defined[1]);
    CHECK(close(r.macro_auc, (r.per_class_auc[0] + r.per_class_auc[1]) / 2.0));

    CHECK_THROWS_AS(roc_auc({{0.6f, 0.6f}}, {0}), std::invalid_argument);  // bad row sum
    CHECK_THROWS_AS(roc_auc({{0.5f, 0.5f}, {1.0f}}, {0, 1}), std::invalid_argument);
    CHECK_THROWS_AS(roc_auc({{0.5f, 0.5f}}, {2}), std::invalid_argument);
    CHECK_THROWS_AS(roc_auc({}, {}), std::invalid_argument);
    // Single class everywhere: nothing has both positives and negatives.
    CHECK_THROWS_AS(roc_auc({{1.0f, 0.0f}, {1.0f, 0.0f}}, {0, 0}), std::invalid_argument);
}

TEST_CASE("metrics: practicality score hand oracle") {
    const std::vector<PracticalityRow> rows = {
        {"a", 0.90, 10.0, 0.90, 0.90},
        {"b", 0.95, 50.0, 0.95, 0.95},
        {"c", 1.00, 100.0, 1.00, 1.00},
    };
    const PracticalityResult r = practicality_score(rows);
    REQUIRE(r.scores.size() == 3);
    CHECK(r.degenerate_columns.empty());
    // Middle row: 0.15*0.5 + 0.40*(40/90) + 0.35*0.5 + 0.15*0.5.
    const double want_mid = 0.15 * 0.5 + 0.40 * (40.0 / 90.0) + 0.35 * 0.5 + 0.15 * 0.5;
    CHECK(close(r.scores[1], want_mid, 1e-9));
    // Row holding every column max collects the full published weight mass.
    CHECK(close(r.scores[2], 1.05, 1e-12));
    CHECK(r.scores[0] == 0.0);
}

TEST_CASE("metrics: practicality ranking is affine-invariant per column") {
    Rng rng(7311);
    for (int rep = 0; rep < 20; ++rep) {
        const int n = 3 + static_cast<int>(rng.uniform_int(6));
        std::vector<PracticalityRow> rows(n), scaled(n);
        for (int i = 0; i < n; ++i) {
            rows[i].name = "m" + std::to_string(i);
            rows[i].accuracy = rng.uniform(0.5, 1.0);
            rows[i].fps = rng.uniform(5.0, 200.0);
            rows[i].recall = rng.uniform(0.5, 1.0);
            rows[i].specificity = rng.uniform(0.5, 1.0);
        }
        const double a = rng.uniform(0.5, 3.0), b = rng.uniform(-1.0, 1.0);
        scaled = rows;
        for (int i = 0; i < n; ++i) scaled[i].fps = a * rows[i].fps + b;

        const auto r1 = practicality_score(rows);
        const auto r2 = practicality_score(scaled);
        for (int i = 0; i < n; ++i) CHECK(close(r1.scores[i], r2.scores[i], 1e-9));

        std::vector<int> order1(n), order2(n);
        std::iota(order1.begin(), order1.end(), 0);
        order2 = order1;
        std::sort(order1.begin(), order1.end(),
                  [&](int x, int y) { return r1.scores[x] < r1.scores[y]; });
        std::sort(order2.begin(), order2.end(),
                  [&](int x, int y) { return r2.scores[x] < r2.scores[y]; });
        CHECK(order1 == order2);
    }
}

TEST_CASE("metrics: practicality degenerate columns and size gate") {
    const std::vector<PracticalityRow> rows = {
        {"a", 0.9, 30.0, 0.9, 0.8},
        {"b", 0.9, 60.0, 0.8, 0.9},
    };
    const PracticalityResult r = practicality_score(rows);
    REQUIRE(r.degenerate_columns.size() == 1);
    CHECK(r.degenerate_columns[0] == 0);  // accuracy column constant
    // Without the accuracy weight the attainable mass is 0.40+0.35+0.15.
    CHECK(close(r.scores[0] + r.scores[1], 0.40 + 0.35 + 0.15, 1e-12));

    const std::vector<PracticalityRow> same = {
        {"a", 0.9, 30.0, 0.9, 0.8},
        {"b", 0.9, 30.0, 0.9, 0.8},
    };
    const PracticalityResult rs = practicality_score(same);
    CHECK(rs.degenerate_columns.size() == 4);
    CHECK(rs.scores[0] == 0.0);
    CHECK(rs.scores[1] == 0.0);

    CHECK_THROWS_AS(practicality_score({{"only", 1.0, 1.0, 1.0, 1.0}}),
                    std::invalid_argument);
    CHECK_THROWS_AS(practicality_score({}), std::invalid_argument);
}

TEST_CASE("metrics: practicality csv parser") {
    std::stringstream ok(
        "name,accuracy,fps,recall,specificity\n"
        "FastNet,0.9426,67,0.9417,0.9807\r\n"
        "Baseline,0.9039,59,0.9023,0.9678\n"
        "\n");
    const auto rows = parse_practicality_csv(ok);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].name == "FastNet");
    CHECK(close(rows[0].accuracy, 0.9426));
    CHECK(close(rows[0].fps, 67.0));
    CHECK(rows[1].name == "Baseline");
    CHECK(close(rows[1].specificity, 0.9678));

    std::stringstream bad_header("model,acc\nx,1\n");
    CHECK_THROWS_AS(parse_practicality_csv(bad_header), std::invalid_argument);
    std::stringstream bad_number(
        "name,accuracy,fps,recall,specificity\nx,oops,1,1,1\n");
    CHECK_THROWS_AS(parse_practicality_csv(bad_number), std::invalid_argument);
    std::stringstream short_row("name,accuracy,fps,recall,specificity\nx,1,2,3\n");
    CHECK_THROWS_AS(parse_practicality_csv(short_row), std::invalid_argument);
    std::stringstream empty("");
    CHECK_THROWS_AS(parse_practicality_csv(empty), std::invalid_argument);
    std::stringstream header_only("name,accuracy,fps,recall,specificity\n");
    CHECK_THROWS_AS(parse_practicality_csv(header_only), std::invalid_argument);
}

TEST_CASE("metrics: bench runs timed forwards and reports percentiles") {
    ModelConfig config;
    FastMpoxModel model = build_model(config, 11);
    Rng rng(55);
    std::vector<Tensor> images;
    for (int i = 0; i < 2; ++i) {
        Tensor img = Tensor::zeros({3, 224, 224});
        for (auto& v : img.data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        images.push_back(std::move(img));
    }
    const BenchResult r = bench_model(model, images, 3, 1);
    CHECK(r.n == 3);
    CHECK(r.warmup == 1);
    CHECK(r.fps >= 1);
    CHECK(r.param_count == 274028);
    CHECK(r.p50_ms > 0.0);
    CHECK(r.p95_ms >= r.p50_ms);

    CHECK_THROWS_AS(bench_model(model, images, 0, 1), std::invalid_argument);
    CHECK_THROWS_AS(bench_model(model, {}, 3, 1), std::invalid_argument);
    Tensor batched = Tensor::zeros({1, 3, 224, 224});
    CHECK_THROWS_AS(bench_model(model, {batched}, 1, 0), std::invalid_argument);
}
