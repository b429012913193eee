#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "fmpx/checkpoint.hpp"
#include "fmpx/nn.hpp"
#include "fmpx/preprocess.hpp"
#include "fmpx/train.hpp"
#include "json.hpp"

using namespace fmpx;

namespace {

Tensor random_logits(Rng& rng, int n, int k, bool requires_grad = false) {
    std::vector<float> vals(static_cast<size_t>(n) * k);
    for (auto& v : vals) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    return Tensor::from_data({n, k}, std::move(vals), requires_grad);
}

// Scalar cross-entropy recomputed in double from raw values.
double ce_oracle(const Tensor& logits, const std::vector<int>& labels) {
    const int n = logits.dim(0), k = logits.dim(1);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const auto row = logits.data().subspan(static_cast<size_t>(i) * k,
                                               static_cast<size_t>(k));
        double mx = row[0];
        for (float v : row) mx = std::max(mx, static_cast<double>(v));
        double denom = 0.0;
        for (float v : row) denom += std::exp(static_cast<double>(v) - mx);
        total += -(static_cast<double>(row[labels[static_cast<size_t>(i)]]) - mx -
                   std::log(denom));
    }
    return total / n;
}

// 4 solid-color classes with mild per-image brightness jitter.
Dataset solid_dataset(int per_class, int side) {
    Dataset d;
    d.class_names = {"blue", "green", "red", "yellow"};
    const uint8_t colors[4][3] = {
        {40, 60, 210}, {40, 210, 60}, {210, 50, 40}, {200, 200, 40}};
    int id = 0;
    for (int c = 0; c < 4; ++c) {
        for (int i = 0; i < per_class; ++i) {
            Image img = make_image(side, side);
            for (int p = 0; p < side * side; ++p)
                for (int ch = 0; ch < 3; ++ch)
                    img.pixels[static_cast<size_t>(p) * 3 + ch] = static_cast<uint8_t>(
                        std::min(255, colors[c][ch] + 3 * i));
            LabeledImage sample;
            sample.image = std::move(img);
            sample.label = c;
            sample.source_path = "synthetic";
            sample.id = id++;
            d.samples.push_back(std::move(sample));
        }
    }
    return d;
}

std::vector<int> all_ids(const Dataset& d) {
    std::vector<int> ids;
    for (const auto& s : d.samples) ids.push_back(s.id);
    return ids;
}

// Small config so train tests stay fast; the full-size model is covered by
// the model tests and the acceptance run.
ModelConfig tiny_config() {
    ModelConfig mc;
    mc.stage_depths = {1, 1, 1};
    return mc;
}

}  // namespace

TEST_CASE("train: config validation") {
    TrainConfig good;
    good.validate();
    CHECK(good.lr == 1e-4);
    CHECK(good.batch_size == 32);
    CHECK(good.epochs == 100);
    CHECK(good.lambda1 == 1.0);
    CHECK(good.beta1 == 0.9);
    CHECK(good.beta2 == 0.999);
    CHECK(good.eps == 1e-8);

    auto broken = [](auto mutate) {
        TrainConfig c;
        mutate(c);
        CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    };
    broken([](TrainConfig& c) { c.lr = -1.0; });
    broken([](TrainConfig& c) { c.batch_size = 0; });
    broken([](TrainConfig& c) { c.epochs = 0; });
    broken([](TrainConfig& c) { c.lambda1 = -0.5; });
    broken([](TrainConfig& c) { c.beta1 = 1.0; });
    broken([](TrainConfig& c) { c.beta2 = -0.1; });
    broken([](TrainConfig& c) { c.eps = 0.0; });
    broken([](TrainConfig& c) { c.early_stop_train_accuracy = 1.5; });
}

TEST_CASE("train: total loss composition") {
    Rng rng(42);
    const std::vector<int> labels = {0, 3, 1, 2};
    Tensor l3 = random_logits(rng, 4, 4);
    Tensor l1 = random_logits(rng, 4, 4);
    Tensor l2 = random_logits(rng, 4, 4);

    // Zero weights leave exactly the main-head loss.
    const float main_only = softmax_cross_entropy(l3, labels).item();
    CHECK(total_loss(l3, l1, l2, labels, 0.0, 0.0).item() == main_only);
    CHECK(total_loss(l3, std::nullopt, std::nullopt, labels, 1.0, 1.0).item() ==
          main_only);

    // Uniform logits on 4 classes: each head contributes ln 4.
    Tensor flat = Tensor::zeros({4, 4});
    const double want = 3.0 * std::log(4.0);
    CHECK(total_loss(flat, flat, flat, labels, 1.0, 1.0).item() ==
          doctest::Approx(want).epsilon(1e-6));

    // Random logits against the double-precision summed oracle.
    const double oracle =
        ce_oracle(l3, labels) + 1.0 * ce_oracle(l1, labels) + 0.7 * ce_oracle(l2, labels);
    CHECK(total_loss(l3, l1, l2, labels, 1.0, 0.7).item() ==
          doctest::Approx(oracle).epsilon(1e-5));

    CHECK_THROWS_AS(total_loss(l3, l1, l2, labels, -1.0, 0.0), std::invalid_argument);
    Tensor wrong = random_logits(rng, 2, 4);
    CHECK_THROWS_AS(total_loss(l3, wrong, l2, labels, 1.0, 1.0), std::invalid_argument);
}

TEST_CASE("train: total loss routes gradients through aux weights") {
    Rng rng(43);
    const std::vector<int> labels = {1, 0};
    Tensor l3 = random_logits(rng, 2, 4, true);
    Tensor l1 = random_logits(rng, 2, 4, true);

    Tensor loss = total_loss(l3, l1, std::nullopt, labels, 2.0, 1.0);
    loss.backward();
    REQUIRE(l1.has_grad());
    std::vector<float> g2(l1.grad().begin(), l1.grad().end());

    Tensor l3b = Tensor::from_data(l3.shape(), {l3.data().begin(), l3.data().end()}, true);
    Tensor l1b = Tensor::from_data(l1.shape(), {l1.data().begin(), l1.data().end()}, true);
    total_loss(l3b, l1b, std::nullopt, labels, 1.0, 1.0).backward();
    for (size_t i = 0; i < g2.size(); ++i)
        CHECK(g2[i] == doctest::Approx(2.0f * l1b.grad()[i]).epsilon(1e-5));

    // A zero weight keeps the aux head out of the graph entirely.
    Tensor l1c = random_logits(rng, 2, 4, true);
    total_loss(l3, l1c, std::nullopt, labels, 0.0, 1.0).backward();
    CHECK(!l1c.has_grad());
}

TEST_CASE("train: adam single-step hand oracle") {
    Tensor w = Tensor::from_data({1}, {1.0f}, true);
    w.grad()[0] = 1.0f;
    AdamState state;
    TrainConfig config;
    adam_step({{"w", w}}, state, config);
    // m-hat = v-hat = 1 after bias correction, so the step is lr/(1+eps).
    CHECK(w.data()[0] == doctest::Approx(1.0 - 1e-4).epsilon(1e-6));
    CHECK(state.t == 1);
    CHECK(state.m.at("w")[0] == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(state.v.at("w")[0] == doctest::Approx(0.001).epsilon(1e-6));
}

TEST_CASE("train: adam matches a double-precision recurrence over steps") {
    Tensor w = Tensor::from_data({2}, {1.0f, -0.5f}, true);
    AdamState state;
    TrainConfig config;
    const double grads[3][2] = {{1.0, -2.0}, {0.5, 0.25}, {-1.5, 3.0}};

    double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {1.0, -0.5};
    for (int t = 1; t <= 3; ++t) {
        w.grad()[0] = static_cast<float>(grads[t - 1][0]);
        w.grad()[1] = static_cast<float>(grads[t - 1][1]);
        adam_step({{"w", w}}, state, config);
        for (int i = 0; i < 2; ++i) {
            m[i] = 0.9 * m[i] + 0.1 * grads[t - 1][i];
            v[i] = 0.999 * v[i] + 0.001 * grads[t - 1][i] * grads[t - 1][i];
            const double mh = m[i] / (1.0 - std::pow(0.9, t));
            const double vh = v[i] / (1.0 - std::pow(0.999, t));
            x[i] -= config.lr * mh / (std::sqrt(vh) + config.eps);
            CHECK(w.data()[i] == doctest::Approx(x[i]).epsilon(1e-5));
        }
    }
}

TEST_CASE("train: adam edge behavior") {
    // No gradient buffer: bitwise no-op with zero state.
    Tensor w = Tensor::from_data({3}, {0.5f, -1.25f, 2.0f}, true);
    AdamState state;
    TrainConfig config;
    adam_step({{"w", w}}, state, config);
    CHECK(w.data()[0] == 0.5f);
    CHECK(w.data()[1] == -1.25f);
    CHECK(w.data()[2] == 2.0f);
    CHECK(state.m.at("w") == std::vector<float>(3, 0.0f));

    // lr = 0: parameters bitwise unchanged, state still advances.
    w.grad()[0] = 3.0f;
    TrainConfig frozen;
    frozen.lr = 0.0;
    adam_step({{"w", w}}, state, frozen);
    CHECK(w.data()[0] == 0.5f);
    CHECK(state.m.at("w")[0] != 0.0f);

    // NaN gradient aborts and names the parameter.
    w.grad()[1] = std::nanf("");
    CHECK_THROWS_WITH_AS(adam_step({{"stem.conv.weight", w}}, state, config),
                         doctest::Contains("stem.conv.weight"), std::runtime_error);

    // State sized for a different parameter is rejected.
    AdamState stale;
    stale.m["w"] = std::vector<float>(7, 0.0f);
    stale.v["w"] = std::vector<float>(7, 0.0f);
    Tensor w2 = Tensor::from_data({2}, {0.0f, 0.0f}, true);
    CHECK_THROWS_AS(adam_step({{"w", w2}}, stale, config), std::invalid_argument);
}

TEST_CASE("train: adam is deterministic across runs") {
    auto run = []() {
        Rng rng(9);
        Tensor w = random_logits(rng, 4, 4, true);
        AdamState state;
        TrainConfig config;
        for (int t = 0; t < 3; ++t) {
            for (size_t i = 0; i < w.numel(); ++i)
                w.grad()[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
            adam_step({{"w", w}}, state, config);
        }
        return std::vector<float>(w.data().begin(), w.data().end());
    };
    CHECK(run() == run());
}

TEST_CASE("train: evaluate reports predictions and probabilities") {
    const Dataset d = solid_dataset(2, 64);
    FastMpoxModel model = build_model(tiny_config(), 7);
    const EvalOutput out = evaluate(model, d, all_ids(d), 4);
    REQUIRE(out.predictions.size() == 8);
    REQUIRE(out.probabilities.size() == 8);
    for (const auto& row : out.probabilities) {
        REQUIRE(row.size() == 4);
        double sum = 0.0;
        for (float p : row) {
            CHECK(p >= 0.0f);
            sum += p;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
    CHECK(out.accuracy >= 0.0);
    CHECK(out.accuracy <= 1.0);

    const EvalOutput again = evaluate(model, d, all_ids(d), 3);  // other batching
    CHECK(again.predictions == out.predictions);
    for (size_t i = 0; i < 8; ++i)
        for (int c = 0; c < 4; ++c)
            CHECK(again.probabilities[i][c] == out.probabilities[i][c]);

    CHECK_THROWS_AS(evaluate(model, d, {}, 4), std::invalid_argument);
    CHECK_THROWS_AS(evaluate(model, d, {99}, 4), std::invalid_argument);
}

TEST_CASE("train: epoch loop logs, checkpoints, and is deterministic") {
    const Dataset d = solid_dataset(2, 64);
    FoldPlan::Fold fold;
    fold.train_ids = all_ids(d);
    fold.test_ids = {0, 3, 5};
    TrainConfig config;
    config.epochs = 2;
    config.batch_size = 4;
    config.seed = 123;

    const auto dir = std::filesystem::temp_directory_path() / "fmpx_train_test";
    std::filesystem::create_directories(dir);
    const std::string ckpt = (dir / "model.fmpx").string();

    auto run = [&](std::ostream* log) {
        FastMpoxModel model = build_model(tiny_config(), 7);
        TrainResult r = train(model, d, fold, config, ckpt, log);
        std::vector<float> flat;
        for (const auto& [name, p] : model.parameters())
            flat.insert(flat.end(), p.data().begin(), p.data().end());
        return std::make_pair(r, flat);
    };

    std::stringstream log;
    const auto [r1, params1] = run(&log);
    REQUIRE(r1.epochs.size() == 2);
    for (const auto& rec : r1.epochs) {
        CHECK(std::isfinite(rec.train_loss));
        CHECK(rec.train_accuracy >= 0.0);
        CHECK(rec.train_accuracy <= 1.0);
        CHECK(std::isfinite(rec.eval_accuracy));
    }
    CHECK(std::filesystem::exists(ckpt));

    // JSONL: one parseable record per epoch.
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        const auto j = nlohmann::json::parse(line);
        ++lines;
        CHECK(j.at("epoch").get<int>() == lines);
        CHECK(j.at("train_loss").is_number());
        CHECK(j.at("eval_accuracy").is_number());
    }
    CHECK(lines == 2);

    // Checkpoint reloads under the same config.
    FastMpoxModel reloaded = load_checkpoint(ckpt, tiny_config());
    CHECK(reloaded.config.num_classes == 4);
    const auto [r1b, params1b] = run(nullptr);
    CHECK(params1 == params1b);  // bit-deterministic end-to-end
    for (size_t i = 0; i < r1.epochs.size(); ++i) {
        CHECK(r1.epochs[i].train_loss == r1b.epochs[i].train_loss);
        CHECK(r1.epochs[i].eval_accuracy == r1b.epochs[i].eval_accuracy);
    }

    // The trained model was left in inference mode: no aux logits.
    FastMpoxModel model = build_model(tiny_config(), 7);
    TrainResult rr = train(model, d, fold, config, ckpt, nullptr);
    Tensor x = Tensor::zeros({1, 3, 224, 224});
    CHECK(!model.forward(x).logits1.has_value());
    (void)rr;
}

TEST_CASE("train: fold validation and non-finite abort keep the last checkpoint") {
    const Dataset d = solid_dataset(2, 64);
    TrainConfig config;
    config.epochs = 1;
    config.batch_size = 4;

    FastMpoxModel model = build_model(tiny_config(), 7);
    FoldPlan::Fold empty;
    CHECK_THROWS_AS(train(model, d, empty, config, "/tmp/x.fmpx", nullptr),
                    std::invalid_argument);
    FoldPlan::Fold single;
    single.train_ids = {0};
    CHECK_THROWS_AS(train(model, d, single, config, "/tmp/x.fmpx", nullptr),
                    std::invalid_argument);
    FoldPlan::Fold bad;
    bad.train_ids = {0, 42};
    CHECK_THROWS_AS(train(model, d, bad, config, "/tmp/x.fmpx", nullptr),
                    std::invalid_argument);

    const auto dir = std::filesystem::temp_directory_path() / "fmpx_train_abort";
    std::filesystem::create_directories(dir);
    const std::string ckpt = (dir / "model.fmpx").string();
    FoldPlan::Fold fold;
    fold.train_ids = all_ids(d);
    train(model, d, fold, config, ckpt, nullptr);
    REQUIRE(std::filesystem::exists(ckpt));

    // Poison one weight; the next run aborts before overwriting the file.
    Tensor poisoned = model.parameters()[0].second;
    poisoned.data()[0] = std::nanf("");
    CHECK_THROWS_WITH_AS(train(model, d, fold, config, ckpt, nullptr),
                         doctest::Contains("non-finite loss"), std::runtime_error);
    FastMpoxModel recovered = load_checkpoint(ckpt, tiny_config());
    CHECK(recovered.config.num_classes == 4);
}

TEST_CASE("train: zero aux weights match the aux-free topology bitwise") {
    const Dataset d = solid_dataset(1, 64);
    ModelConfig with_aux = tiny_config();
    ModelConfig no_aux = tiny_config();
    no_aux.use_aux_heads = false;

    FastMpoxModel a = build_model(with_aux, 31);
    FastMpoxModel b = build_model(no_aux, 31);
    a.set_training(true);
    b.set_training(true);

    std::vector<Tensor> images;
    std::vector<int> labels;
    for (int i : {0, 1, 2, 3}) {
        Rng rng(mix64(5, static_cast<uint64_t>(i)));
        images.push_back(preprocess(d.samples[i].image, PreprocessMode::Train, rng));
        labels.push_back(d.samples[i].label);
    }
    const Tensor x = stack_batch(images);

    const ForwardResult ra = a.forward(x);
    total_loss(ra.logits3, ra.logits1, ra.logits2, labels, 0.0, 0.0).backward();
    const ForwardResult rb = b.forward(x);
    total_loss(rb.logits3, rb.logits1, rb.logits2, labels, 0.0, 0.0).backward();

    int compared = 0;
    for (const auto& [name, pb] : b.parameters()) {
        for (const auto& [na, pa] : a.parameters()) {
            if (na != name) continue;
            REQUIRE(pa.has_grad() == pb.has_grad());
            if (pa.has_grad())
                for (size_t i = 0; i < pa.numel(); ++i)
                    CHECK(pa.grad()[i] == pb.grad()[i]);
            ++compared;
        }
    }
    CHECK(compared == static_cast<int>(b.parameters().size()));
}

TEST_CASE("train: cross validation aggregates folds") {
    const Dataset d = solid_dataset(4, 64);
    TrainConfig config;
    config.epochs = 1;
    config.batch_size = 8;
    config.seed = 77;
    const auto dir = std::filesystem::temp_directory_path() / "fmpx_cv_test";
    std::filesystem::remove_all(dir);

    const CrossValidationResult r =
        cross_validate(d, tiny_config(), config, 2, dir.string(), nullptr);
    REQUIRE(r.folds.size() == 2);
    for (const auto& fold : r.folds) {
        CHECK(std::filesystem::exists(fold.checkpoint_path));
        CHECK(fold.accuracy >= 0.0);
        CHECK(fold.accuracy <= 100.0);
        CHECK(fold.epochs.size() == 1);
        CHECK(fold.metrics.per_class.size() == 4);
    }
    double mean_want = (r.folds[0].accuracy + r.folds[1].accuracy) / 2.0;
    CHECK(r.mean_accuracy == doctest::Approx(mean_want).epsilon(1e-12));
    double m = 0, s = 0;
    std::tie(m, s) = mean_std({r.folds[0].accuracy, r.folds[1].accuracy});
    CHECK(r.std_accuracy == s);
    CHECK(r.summary == format_mean_std(m, s));
}

TEST_CASE("train: mean/std aggregation and presentation format") {
    const auto [m, s] = mean_std({90.0, 92.0, 94.0, 96.0, 98.0});
    CHECK(m == doctest::Approx(94.0).epsilon(1e-12));
    CHECK(s == doctest::Approx(std::sqrt(8.0)).epsilon(1e-12));
    CHECK(format_mean_std(m, s) == "94.00%(±2.83)");
    CHECK(format_mean_std(94.264, 2.317) == "94.26%(±2.32)");

    double mean = 0.0, stdev = 0.0;
    REQUIRE(parse_mean_std("94.26%(±2.32)", &mean, &stdev));
    CHECK(mean == 94.26);
    CHECK(stdev == 2.32);
    REQUIRE(parse_mean_std(format_mean_std(m, s), &mean, &stdev));
    CHECK(mean == 94.00);
    CHECK(stdev == 2.83);
    CHECK(!parse_mean_std("94.26(2.32)", &mean, &stdev));
    CHECK(!parse_mean_std("junk", &mean, &stdev));
    CHECK_THROWS_AS(mean_std({}), std::invalid_argument);
}
