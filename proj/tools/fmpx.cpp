#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "fmpx/augment.hpp"
#include "fmpx/checkpoint.hpp"
#include "fmpx/dataset.hpp"
#include "fmpx/gradcam.hpp"
#include "fmpx/image.hpp"
#include "fmpx/metrics.hpp"
#include "fmpx/model.hpp"
#include "fmpx/nn.hpp"
#include "fmpx/preprocess.hpp"
#include "fmpx/rng.hpp"
#include "fmpx/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fmpx;

namespace {

constexpr const char* kToolVersion = "1.0.0";
constexpr int kExitOk = 0;
constexpr int kExitBadInput = 2;   // bad paths, flags, or file contents
constexpr int kExitInternal = 3;   // anything else

void require_input(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

std::string env_name(std::string key) {
    for (char& c : key) c = c == '-' ? '_' : static_cast<char>(std::toupper(c));
    return "FMPX_" + key;
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(
        std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    require_input(in.good(), "cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw std::invalid_argument("config file " + path + " is not valid JSON: " +
                                    e.what());
    }
}

void write_text(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out.good()) throw std::runtime_error("cannot write " + path.string());
    out << content;
    if (!out.good()) throw std::runtime_error("short write to " + path.string());
}

// Binds every tunable to a config-file key so that CLI flags (and FMPX_*
// env vars, which CLI11 applies during parse) win over the JSON config,
// which wins over defaults. The same map is dumped into the run manifest,
// so a manifest can be replayed via --config.
class ConfigMerger {
public:
    template <typename T>
    CLI::Option* bind(CLI::Option* opt, const std::string& key, T* var) {
        opt->envname(env_name(key));
        keys_.push_back(key);
        appliers_.push_back([opt, key, var](const json& cfg) {
            if (opt->count() > 0 || !cfg.contains(key)) return;
            try {
                *var = cfg.at(key).get<T>();
            } catch (const json::exception&) {
                throw std::invalid_argument("config key \"" + key +
                                            "\" has the wrong type");
            }
        });
        dumpers_.push_back([key, var](json& out) { out[key] = *var; });
        return opt;
    }

    void apply(const std::string& config_path) const {
        if (config_path.empty()) return;
        json cfg = read_json_file(config_path);
        if (cfg.contains("flags")) cfg = cfg.at("flags");  // manifest replay
        for (const auto& [key, value] : cfg.items()) {
            (void)value;
            if (std::find(keys_.begin(), keys_.end(), key) == keys_.end())
                throw std::invalid_argument("config file " + config_path +
                                            " has unknown key \"" + key + "\"");
        }
        for (const auto& apply : appliers_) apply(cfg);
    }

    json dump() const {
        json out = json::object();
        for (const auto& dump : dumpers_) dump(out);
        return out;
    }

private:
    std::vector<std::string> keys_;
    std::vector<std::function<void(const json&)>> appliers_;
    std::vector<std::function<void(json&)>> dumpers_;
};

// ---------------------------------------------------------------- options

struct ModelOpts {
    bool no_ablgfm = false, no_aux = false, no_dropblock = false;
    std::string activation = "gelu";
    int stage5 = 256;
    int num_classes = 4;
};

void add_model_opts(CLI::App* sub, ConfigMerger& merge, ModelOpts* m,
                    bool with_num_classes) {
    merge.bind(sub->add_flag("--no-ablgfm", m->no_ablgfm,
                             "Drop the attention fusion block"),
               "no-ablgfm", &m->no_ablgfm);
    merge.bind(sub->add_flag("--no-aux", m->no_aux, "Drop the auxiliary heads"),
               "no-aux", &m->no_aux);
    merge.bind(sub->add_flag("--no-dropblock", m->no_dropblock, "Disable DropBlock"),
               "no-dropblock", &m->no_dropblock);
    merge.bind(sub->add_option("--activation", m->activation, "gelu or relu")
                   ->capture_default_str()
                   ->check(CLI::IsMember({"gelu", "relu"})),
               "activation", &m->activation);
    merge.bind(sub->add_option("--stage5", m->stage5, "Stage-5 output channels")
                   ->capture_default_str(),
               "stage5", &m->stage5);
    if (with_num_classes)
        merge.bind(sub->add_option("--num-classes", m->num_classes,
                                   "Classifier output classes")
                       ->capture_default_str(),
                   "num-classes", &m->num_classes);
}

ModelConfig to_model_config(const ModelOpts& m, int num_classes) {
    require_input(m.activation == "gelu" || m.activation == "relu",
                  "--activation must be gelu or relu");
    ModelConfig config;
    config.num_classes = num_classes;
    config.use_ablgfm = !m.no_ablgfm;
    config.use_aux_heads = !m.no_aux;
    config.use_dropblock = !m.no_dropblock;
    config.activation = m.activation == "relu" ? Activation::Relu : Activation::Gelu;
    config.stage5_channels = m.stage5;
    config.validate();
    return config;
}

json model_config_json(const ModelConfig& c) {
    return json{{"num_classes", c.num_classes},
                {"stem_channels", c.stem_channels},
                {"stage_channels", c.stage_channels},
                {"stage_depths", c.stage_depths},
                {"stage5_channels", c.stage5_channels},
                {"use_ablgfm", c.use_ablgfm},
                {"use_aux_heads", c.use_aux_heads},
                {"use_dropblock", c.use_dropblock},
                {"activation", c.activation == Activation::Relu ? "relu" : "gelu"},
                {"dropblock_prob", c.dropblock_prob},
                {"ablgfm_reduction", c.ablgfm_reduction},
                {"fingerprint", c.fingerprint()}};
}

struct CommonOpts {
    std::string out;
    std::string config_file;
    uint64_t seed = 0;
    int threads = 1;
};

void add_common_opts(CLI::App* sub, ConfigMerger& merge, CommonOpts* c,
                     const std::string& default_out, int default_threads) {
    c->out = default_out;
    c->threads = default_threads;
    merge.bind(sub->add_option("--out", c->out, "Output directory")
                   ->capture_default_str(),
               "out", &c->out);
    sub->add_option("--config", c->config_file,
                    "JSON config file (or a previous run manifest)");
    merge.bind(sub->add_option("--seed", c->seed, "Master seed")->capture_default_str(),
               "seed", &c->seed);
    merge.bind(
        sub->add_option("--threads", c->threads, "Op-kernel threads (bitwise-stable)")
            ->capture_default_str(),
        "threads", &c->threads);
}

fs::path prepare_out(const CommonOpts& c) {
    require_input(!c.out.empty(), "missing --out directory");
    fs::create_directories(c.out);
    set_num_threads(std::max(1, c.threads));
    return c.out;
}

std::vector<std::string> g_argv;

json manifest_base(const std::string& subcommand, const CommonOpts& c,
                   const ConfigMerger& merge) {
    json m;
    m["tool"] = "fmpx";
    m["version"] = kToolVersion;
    m["subcommand"] = subcommand;
    m["timestamp_utc"] = utc_timestamp();
    m["seed"] = c.seed;
    m["threads"] = c.threads;
    m["argv"] = g_argv;
    m["flags"] = merge.dump();
    return m;
}

void write_manifest(const fs::path& out_dir, const json& manifest) {
    write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---------------------------------------------------------------- shared

json metrics_json(const MetricsReport& report, const std::vector<std::string>& names,
                  const RocResult* roc) {
    json per_class = json::array();
    for (size_t c = 0; c < report.per_class.size(); ++c) {
        const ClassMetrics& m = report.per_class[c];
        json entry{{"precision", m.precision},
                   {"recall", m.recall},
                   {"specificity", m.specificity},
                   {"f1", m.f1}};
        if (c < names.size()) entry["class"] = names[c];
        json degenerate = json::array();
        if (m.precision_degenerate) degenerate.push_back("precision");
        if (m.recall_degenerate) degenerate.push_back("recall");
        if (m.specificity_degenerate) degenerate.push_back("specificity");
        if (m.f1_degenerate) degenerate.push_back("f1");
        entry["degenerate"] = degenerate;
        per_class.push_back(entry);
    }
    json out{{"accuracy", report.accuracy},
             {"per_class", per_class},
             {"macro",
              {{"precision", report.macro_precision},
               {"recall", report.macro_recall},
               {"specificity", report.macro_specificity},
               {"f1", report.macro_f1}}}};
    if (roc) {
        json auc{{"macro", roc->macro_auc}, {"micro", roc->micro_auc}};
        json per = json::array();
        for (size_t c = 0; c < roc->per_class_auc.size(); ++c)
            per.push_back(roc->defined[c] ? json(roc->per_class_auc[c]) : json(nullptr));
        auc["per_class"] = per;
        out["auc"] = auc;
    }
    return out;
}

std::string confusion_csv(const ConfusionMatrix& cm,
                          const std::vector<std::string>& names) {
    std::ostringstream out;
    out << "true\\pred";
    for (int c = 0; c < cm.k(); ++c)
        out << ',' << (c < static_cast<int>(names.size()) ? names[c]
                                                          : "class" + std::to_string(c));
    out << '\n';
    for (int t = 0; t < cm.k(); ++t) {
        out << (t < static_cast<int>(names.size()) ? names[t]
                                                   : "class" + std::to_string(t));
        for (int p = 0; p < cm.k(); ++p) out << ',' << cm.counts[t][p];
        out << '\n';
    }
    return out.str();
}

std::string roc_csv(const RocResult& roc, const std::vector<std::string>& names) {
    std::ostringstream out;
    out << "class,fpr,tpr\n";
    auto dump_curve = [&out](const std::string& name, const RocCurve& curve) {
        for (size_t i = 0; i < curve.fpr.size(); ++i)
            out << name << ',' << curve.fpr[i] << ',' << curve.tpr[i] << '\n';
    };
    for (size_t c = 0; c < roc.curves.size(); ++c) {
        if (!roc.defined[c]) continue;
        dump_curve(c < names.size() ? names[c] : "class" + std::to_string(c),
                   roc.curves[c]);
    }
    dump_curve("micro", roc.micro_curve);
    return out.str();
}

Dataset subset_dataset(const Dataset& d, const std::vector<int>& ids) {
    Dataset out;
    out.class_names = d.class_names;
    int next = 0;
    for (int id : ids) {
        LabeledImage s = d.samples[static_cast<size_t>(id)];
        s.id = next++;
        out.samples.push_back(std::move(s));
    }
    return out;
}

json provenance_json(const AugmentRecord& rec, int new_id) {
    json applied = json::array();
    for (const auto& strategy : rec.applied) {
        json params = json::object();
        for (const auto& [k, v] : strategy.params) params[k] = v;
        applied.push_back({{"kind", to_string(strategy.kind)}, {"params", params}});
    }
    return json{{"id", new_id},
                {"source_id", rec.source_id},
                {"seed", rec.seed},
                {"applied", applied}};
}

// ---------------------------------------------------------------- train

struct TrainOpts {
    CommonOpts common;
    ModelOpts model;
    std::string data;
    int folds = 5;
    int fold = 0;  // 1-based; 0 = every fold
    int epochs = 100;
    int batch = 32;
    double lr = 1e-4;
    double lambda1 = 1.0, lambda2 = 1.0;
    bool no_shuffle = false;
    double early_stop_acc = 0.0;
    int augment_target = 0;
    std::vector<int> augment_targets;
    bool split_after_augment = false;
};

std::vector<int> resolve_targets(const Dataset& d, const TrainOpts& o) {
    const std::vector<int> counts = d.class_counts();
    if (!o.augment_targets.empty()) {
        require_input(o.augment_targets.size() == d.class_names.size(),
                      "--augment-targets needs one value per class");
        for (size_t c = 0; c < o.augment_targets.size(); ++c)
            require_input(o.augment_targets[c] >= counts[c],
                          "--augment-targets below current count for class " +
                              d.class_names[c]);
        return o.augment_targets;
    }
    if (o.augment_target > 0) {
        std::vector<int> targets;
        for (int count : counts) targets.push_back(std::max(o.augment_target, count));
        return targets;
    }
    return {};
}

TrainConfig to_train_config(const TrainOpts& o) {
    TrainConfig t;
    t.lr = o.lr;
    t.batch_size = o.batch;
    t.epochs = o.epochs;
    t.lambda1 = o.lambda1;
    t.lambda2 = o.lambda2;
    t.seed = o.common.seed;
    t.shuffle = !o.no_shuffle;
    t.early_stop_train_accuracy = o.early_stop_acc;
    t.validate();
    return t;
}

int run_train(const TrainOpts& o, json& manifest) {
    require_input(!o.data.empty(), "missing --data directory");
    require_input(o.folds >= 1, "--folds must be at least 1");
    const fs::path out = prepare_out(o.common);
    manifest["inputs"] = {{"data", o.data}};

    Dataset data = load_dataset(o.data);
    const int num_classes = static_cast<int>(data.class_names.size());
    const ModelConfig model_config = to_model_config(o.model, num_classes);
    const TrainConfig train_config = to_train_config(o);
    const std::vector<int> targets = resolve_targets(data, o);
    manifest["model_config"] = model_config_json(model_config);

    // The augment-then-split order folds over the expanded pool (copies of
    // one source may straddle folds); the default expands each fold's
    // training split only.
    if (o.split_after_augment && !targets.empty()) {
        ExpandedDataset expanded = expand_dataset(data, targets, o.common.seed);
        data = std::move(expanded.dataset);
    }

    std::vector<FoldPlan::Fold> folds;
    if (o.folds == 1) {
        FoldPlan::Fold all;
        for (const auto& s : data.samples) all.train_ids.push_back(s.id);
        folds.push_back(std::move(all));
    } else {
        FoldPlan plan = make_folds(data, o.folds, o.common.seed);
        folds = std::move(plan.folds);
    }
    require_input(o.fold >= 0 && o.fold <= static_cast<int>(folds.size()),
                  "--fold outside 1.." + std::to_string(folds.size()));

    json fold_reports = json::array();
    std::vector<double> accuracies;
    for (int f = 0; f < static_cast<int>(folds.size()); ++f) {
        if (o.fold != 0 && o.fold != f + 1) continue;
        const std::string tag = "fold" + std::to_string(f + 1);

        // Assemble this fold's training view (optionally expanded) plus its
        // untouched test samples.
        Dataset fold_data;
        FoldPlan::Fold fold;
        if (!o.split_after_augment && !targets.empty()) {
            Dataset train_part = subset_dataset(data, folds[f].train_ids);
            ExpandedDataset expanded = expand_dataset(
                train_part, targets, mix64(o.common.seed, static_cast<uint64_t>(f)));
            fold_data = std::move(expanded.dataset);
            std::ofstream prov(out / (tag + ".provenance.jsonl"));
            const int originals = static_cast<int>(train_part.samples.size());
            for (size_t i = 0; i < expanded.provenance.size(); ++i)
                prov << provenance_json(expanded.provenance[i],
                                        originals + static_cast<int>(i))
                            .dump()
                     << '\n';
            for (const auto& s : fold_data.samples) fold.train_ids.push_back(s.id);
            for (int id : folds[f].test_ids) {
                LabeledImage test_sample = data.samples[static_cast<size_t>(id)];
                test_sample.id = static_cast<int>(fold_data.samples.size());
                fold.test_ids.push_back(test_sample.id);
                fold_data.samples.push_back(std::move(test_sample));
            }
        } else {
            fold_data = data;
            fold = folds[f];
        }

        FastMpoxModel model = build_model(
            model_config, mix64(o.common.seed, static_cast<uint64_t>(f)));
        const std::string ckpt = (out / (tag + ".fmpx")).string();
        std::ofstream log_stream(out / (tag + ".log.jsonl"));
        const TrainResult trained =
            train(model, fold_data, fold, train_config, ckpt, &log_stream);

        json report{{"fold", f + 1},
                    {"checkpoint", ckpt},
                    {"epochs_run", trained.epochs.size()}};
        if (!fold.test_ids.empty()) {
            const EvalOutput eval =
                evaluate(model, fold_data, fold.test_ids, train_config.batch_size);
            std::vector<int> labels;
            for (int id : fold.test_ids)
                labels.push_back(fold_data.samples[static_cast<size_t>(id)].label);
            const ConfusionMatrix cm = confusion(eval.predictions, labels, num_classes);
            const MetricsReport metrics = per_class_metrics(cm);
            const json mj = metrics_json(metrics, data.class_names, nullptr);
            write_text(out / (tag + ".metrics.json"), mj.dump(2) + "\n");
            write_text(out / (tag + ".confusion.csv"),
                       confusion_csv(cm, data.class_names));
            report["accuracy"] = eval.accuracy;
            accuracies.push_back(eval.accuracy * 100.0);
        } else {
            write_text(out / (tag + ".metrics.json"),
                       json{{"note", "no held-out samples"}}.dump(2) + "\n");
        }
        fold_reports.push_back(std::move(report));
        std::cout << "fmpx: " << tag << " done ("
                  << trained.epochs.back().train_accuracy * 100.0
                  << "% train accuracy)\n";
    }

    json summary{{"folds", fold_reports}, {"classes", data.class_names}};
    if (accuracies.size() >= 2) {
        const auto [mean, stddev] = mean_std(accuracies);
        summary["mean_accuracy"] = mean;
        summary["std_accuracy"] = stddev;
        summary["summary"] = format_mean_std(mean, stddev);
        std::cout << "fmpx: cross-validation accuracy " << format_mean_std(mean, stddev)
                  << "\n";
    } else if (accuracies.size() == 1) {
        summary["mean_accuracy"] = accuracies[0];
    }
    write_text(out / "summary.json", summary.dump(2) + "\n");
    manifest["outputs"] = {{"summary", (out / "summary.json").string()}};
    write_manifest(out, manifest);
    return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalOpts {
    CommonOpts common;
    ModelOpts model;
    std::string data, ckpt;
    int batch = 32;
};

int run_eval(const EvalOpts& o, json& manifest) {
    require_input(!o.data.empty(), "missing --data directory");
    require_input(!o.ckpt.empty(), "missing --ckpt path");
    const fs::path out = prepare_out(o.common);
    manifest["inputs"] = {{"data", o.data}, {"ckpt", o.ckpt}};

    const Dataset data = load_dataset(o.data);
    const int num_classes = static_cast<int>(data.class_names.size());
    FastMpoxModel model =
        load_checkpoint(o.ckpt, to_model_config(o.model, num_classes));

    std::vector<int> ids, labels;
    for (const auto& s : data.samples) {
        ids.push_back(s.id);
        labels.push_back(s.label);
    }
    const EvalOutput eval = evaluate(model, data, ids, o.batch);
    const ConfusionMatrix cm = confusion(eval.predictions, labels, num_classes);
    const MetricsReport metrics = per_class_metrics(cm);
    const RocResult roc = roc_auc(eval.probabilities, labels);

    write_text(out / "metrics.json",
               metrics_json(metrics, data.class_names, &roc).dump(2) + "\n");
    write_text(out / "confusion.csv", confusion_csv(cm, data.class_names));
    write_text(out / "roc.csv", roc_csv(roc, data.class_names));
    manifest["model_config"] = model_config_json(model.config);
    write_manifest(out, manifest);
    std::cout << "fmpx: accuracy " << metrics.accuracy * 100.0 << "% on "
              << data.samples.size() << " images\n";
    return kExitOk;
}

// ---------------------------------------------------------------- bench

struct BenchOpts {
    CommonOpts common;
    ModelOpts model;
    std::string ckpt, image;
    int n = 100;
    int warmup = 10;
};

int run_bench(const BenchOpts& o, json& manifest) {
    const fs::path out = prepare_out(o.common);
    manifest["inputs"] = {{"ckpt", o.ckpt}, {"image", o.image}};
    const ModelConfig config = to_model_config(o.model, o.model.num_classes);
    FastMpoxModel model = o.ckpt.empty() ? build_model(config, o.common.seed)
                                         : load_checkpoint(o.ckpt, config);

    std::vector<Tensor> images;
    if (!o.image.empty()) {
        images.push_back(preprocess_eval(read_ppm(o.image)));
    } else {
        // Synthetic normalized inputs; timings do not depend on content.
        Rng rng(mix64(o.common.seed, 0xbe9c));
        for (int i = 0; i < 2; ++i) {
            Tensor t = Tensor::zeros({3, kInputSize, kInputSize});
            for (auto& v : t.data()) v = rng.uniform(-2.0f, 2.0f);
            images.push_back(std::move(t));
        }
    }
    const BenchResult r = bench_model(model, images, o.n, o.warmup);
    const json bj{{"fps", r.fps},          {"param_count", r.param_count},
                  {"p50_ms", r.p50_ms},    {"p95_ms", r.p95_ms},
                  {"n", r.n},              {"warmup", r.warmup},
                  {"threads", num_threads()}};
    write_text(out / "bench.json", bj.dump(2) + "\n");
    manifest["model_config"] = model_config_json(config);
    write_manifest(out, manifest);
    std::cout << bj.dump() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- classify

struct ClassifyOpts {
    CommonOpts common;
    ModelOpts model;
    std::string image, ckpt;
    std::vector<std::string> classes;
    int topk = 0;  // 0: all classes
};

int run_classify(const ClassifyOpts& o, json& manifest) {
    require_input(!o.image.empty(), "missing --image path");
    require_input(!o.ckpt.empty(), "missing --ckpt path");
    const fs::path out = prepare_out(o.common);
    manifest["inputs"] = {{"image", o.image}, {"ckpt", o.ckpt}};

    std::vector<std::string> files;
    if (fs::is_directory(o.image)) {
        for (const auto& entry : fs::directory_iterator(o.image))
            if (entry.is_regular_file() && entry.path().extension() == ".ppm")
                files.push_back(entry.path().string());
        std::sort(files.begin(), files.end());
        require_input(!files.empty(), "no .ppm files under " + o.image);
    } else {
        require_input(fs::exists(o.image), "no such image: " + o.image);
        files.push_back(o.image);
    }

    const ModelConfig config = to_model_config(o.model, o.model.num_classes);
    FastMpoxModel model = load_checkpoint(o.ckpt, config);
    std::vector<std::string> names = o.classes;
    if (names.empty())
        for (int c = 0; c < config.num_classes; ++c)
            names.push_back("class" + std::to_string(c));
    require_input(static_cast<int>(names.size()) == config.num_classes,
                  "--classes needs exactly " + std::to_string(config.num_classes) +
                      " names");

    model.set_training(false);
    NoGradGuard guard;
    json results = json::array();
    for (const std::string& file : files) {
        const Tensor x = stack_batch({preprocess_eval(read_ppm(file))});
        const std::vector<float> probs = softmax_rows(model.forward(x).logits3);
        double sum = 0.0;
        for (float p : probs) sum += p;
        if (std::abs(sum - 1.0) > 1e-6)
            throw std::runtime_error("softmax drifted from 1 on " + file);

        std::vector<int> order(probs.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(),
                  [&probs](int a, int b) { return probs[a] > probs[b]; });
        const int k = o.topk > 0
                          ? std::min<int>(o.topk, static_cast<int>(order.size()))
                          : static_cast<int>(order.size());
        json top = json::array();
        for (int i = 0; i < k; ++i)
            top.push_back({{"class", names[static_cast<size_t>(order[i])]},
                           {"index", order[i]},
                           {"probability", probs[static_cast<size_t>(order[i])]}});
        results.push_back({{"file", file},
                           {"probabilities", probs},
                           {"prediction", names[static_cast<size_t>(order[0])]},
                           {"top", top}});
    }
    write_text(out / "predictions.json", results.dump(2) + "\n");
    write_manifest(out, manifest);
    std::cout << results.dump(2) << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- gradcam

struct GradcamOpts {
    CommonOpts common;
    ModelOpts model;
    std::string image, ckpt;
    std::string layer = "fusion";
    int target_class = -1;  // -1: predicted class
    double alpha = 0.4;
    bool csv = false;
};

int run_gradcam(const GradcamOpts& o, json& manifest) {
    require_input(!o.image.empty(), "missing --image path");
    require_input(!o.ckpt.empty(), "missing --ckpt path");
    const fs::path out = prepare_out(o.common);
    manifest["inputs"] = {{"image", o.image}, {"ckpt", o.ckpt}};

    const ModelConfig config = to_model_config(o.model, o.model.num_classes);
    FastMpoxModel model = load_checkpoint(o.ckpt, config);
    const Image source = read_ppm(o.image);
    const Tensor x = preprocess_eval(source);

    int target = o.target_class;
    if (target < 0) {
        model.set_training(false);
        NoGradGuard guard;
        const std::vector<float> probs =
            softmax_rows(model.forward(stack_batch({x})).logits3);
        target = static_cast<int>(
            std::max_element(probs.begin(), probs.end()) - probs.begin());
    }

    const CamResult cam = grad_cam(model, x, target, o.layer);
    const Image view = denormalize(x);  // the model's actual 224x224 input view
    write_ppm((out / "heatmap.ppm").string(), colorize_heatmap(cam));
    write_ppm((out / "overlay.ppm").string(),
              overlay_heatmap(view, cam, static_cast<float>(o.alpha)));
    if (o.csv) {
        std::ostringstream csv;
        write_heatmap_csv(csv, cam);
        write_text(out / "heatmap.csv", csv.str());
    }
    manifest["target_class"] = target;
    manifest["target_layer"] = o.layer;
    manifest["zero_map"] = cam.zero_map;
    write_manifest(out, manifest);
    std::cout << "fmpx: grad-cam for class " << target << " via " << o.layer
              << (cam.zero_map ? " (zero map)" : "") << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- augment

struct AugmentOpts {
    CommonOpts common;
    std::string data;
    int target = 0;
    std::vector<int> targets;
};

int run_augment(const AugmentOpts& o, json& manifest) {
    require_input(!o.data.empty(), "missing --data directory");
    require_input(o.target > 0 || !o.targets.empty(),
                  "need --target or --targets to size the expansion");
    const fs::path out = prepare_out(o.common);
    manifest["inputs"] = {{"data", o.data}};

    const Dataset data = load_dataset(o.data);
    TrainOpts sizing;
    sizing.augment_target = o.target;
    sizing.augment_targets = o.targets;
    const std::vector<int> targets = resolve_targets(data, sizing);

    const ExpandedDataset expanded = expand_dataset(data, targets, o.common.seed);
    const int originals = static_cast<int>(data.samples.size());
    std::vector<int> written_per_class(data.class_names.size(), 0);
    for (const auto& s : expanded.dataset.samples) {
        const fs::path dir = out / data.class_names[static_cast<size_t>(s.label)];
        fs::create_directories(dir);
        char name[32];
        std::snprintf(name, sizeof name, "img%06d.ppm", s.id);
        write_ppm((dir / name).string(), s.image);
        written_per_class[static_cast<size_t>(s.label)]++;
    }
    std::ofstream prov(out / "provenance.jsonl");
    for (size_t i = 0; i < expanded.provenance.size(); ++i)
        prov << provenance_json(expanded.provenance[i],
                                originals + static_cast<int>(i))
                    .dump()
             << '\n';

    json counts = json::object();
    for (size_t c = 0; c < data.class_names.size(); ++c)
        counts[data.class_names[c]] = written_per_class[c];
    write_text(out / "counts.json", counts.dump(2) + "\n");
    manifest["outputs"] = {{"total", expanded.dataset.samples.size()},
                           {"augmented", expanded.provenance.size()}};
    write_manifest(out, manifest);
    std::cout << "fmpx: wrote " << expanded.dataset.samples.size() << " images ("
              << expanded.provenance.size() << " augmented copies)\n";
    return kExitOk;
}

// ---------------------------------------------------------------- score

struct ScoreOpts {
    CommonOpts common;
    std::string in;
};

int run_score(const ScoreOpts& o, json& manifest) {
    require_input(!o.in.empty(), "missing --in csv path");
    const fs::path out = prepare_out(o.common);
    manifest["inputs"] = {{"in", o.in}};
    std::ifstream in(o.in);
    require_input(in.good(), "cannot open " + o.in);
    const std::vector<PracticalityRow> rows = parse_practicality_csv(in);
    const PracticalityResult result = practicality_score(rows);

    std::vector<int> order(rows.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&result](int a, int b) {
        return result.scores[static_cast<size_t>(a)] >
               result.scores[static_cast<size_t>(b)];
    });

    std::ostringstream csv;
    csv << "rank,name,score,accuracy,fps,recall,specificity\n";
    char buf[64];
    for (size_t rank = 0; rank < order.size(); ++rank) {
        const PracticalityRow& row = rows[static_cast<size_t>(order[rank])];
        std::snprintf(buf, sizeof buf, "%.6f",
                      result.scores[static_cast<size_t>(order[rank])]);
        csv << rank + 1 << ',' << row.name << ',' << buf << ',' << row.accuracy << ','
            << row.fps << ',' << row.recall << ',' << row.specificity << '\n';
    }
    write_text(out / "ranked.csv", csv.str());
    write_manifest(out, manifest);
    std::cout << csv.str();
    if (!result.degenerate_columns.empty())
        std::cout << "fmpx: warning: " << result.degenerate_columns.size()
                  << " constant column(s) normalized to 0\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    g_argv.assign(argv, argv + argc);
    CLI::App app{"CPU toolkit for the fused shuffle-net skin-lesion classifier"};
    app.require_subcommand(1);
    int exit_code = kExitOk;

    // train ---------------------------------------------------------------
    TrainOpts train_opts;
    ConfigMerger train_merge;
    CLI::App* train_cmd =
        app.add_subcommand("train", "Train with k-fold cross-validation");
    add_common_opts(train_cmd, train_merge, &train_opts.common, "fmpx-out/train", 1);
    add_model_opts(train_cmd, train_merge, &train_opts.model, false);
    train_merge.bind(train_cmd->add_option("--data", train_opts.data,
                                           "Dataset root (class subdirectories)"),
                     "data", &train_opts.data);
    train_merge.bind(train_cmd->add_option("--folds", train_opts.folds, "Fold count")
                         ->capture_default_str(),
                     "folds", &train_opts.folds);
    train_merge.bind(train_cmd->add_option("--fold", train_opts.fold,
                                           "Train only this fold (1-based)")
                         ->capture_default_str(),
                     "fold", &train_opts.fold);
    train_merge.bind(train_cmd->add_option("--epochs", train_opts.epochs, "Epochs")
                         ->capture_default_str(),
                     "epochs", &train_opts.epochs);
    train_merge.bind(train_cmd->add_option("--batch", train_opts.batch, "Batch size")
                         ->capture_default_str(),
                     "batch", &train_opts.batch);
    train_merge.bind(train_cmd->add_option("--lr", train_opts.lr, "Learning rate")
                         ->capture_default_str(),
                     "lr", &train_opts.lr);
    train_merge.bind(train_cmd
                         ->add_option("--lambda1", train_opts.lambda1,
                                      "First auxiliary loss weight")
                         ->capture_default_str(),
                     "lambda1", &train_opts.lambda1);
    train_merge.bind(train_cmd
                         ->add_option("--lambda2", train_opts.lambda2,
                                      "Second auxiliary loss weight")
                         ->capture_default_str(),
                     "lambda2", &train_opts.lambda2);
    train_merge.bind(train_cmd->add_flag("--no-shuffle", train_opts.no_shuffle,
                                         "Keep epoch order fixed"),
                     "no-shuffle", &train_opts.no_shuffle);
    train_merge.bind(train_cmd
                         ->add_option("--early-stop-acc", train_opts.early_stop_acc,
                                      "Stop when train accuracy reaches this")
                         ->capture_default_str(),
                     "early-stop-acc", &train_opts.early_stop_acc);
    train_merge.bind(train_cmd
                         ->add_option("--augment-target", train_opts.augment_target,
                                      "Expand every class to at least this count")
                         ->capture_default_str(),
                     "augment-target", &train_opts.augment_target);
    train_merge.bind(train_cmd
                         ->add_option("--augment-targets", train_opts.augment_targets,
                                      "Per-class expansion counts")
                         ->delimiter(','),
                     "augment-targets", &train_opts.augment_targets);
    train_merge.bind(train_cmd->add_flag("--split-after-augment",
                                         train_opts.split_after_augment,
                                         "Expand first, then fold the expanded pool"),
                     "split-after-augment", &train_opts.split_after_augment);
    train_cmd->callback([&] {
        train_merge.apply(train_opts.common.config_file);
        json manifest = manifest_base("train", train_opts.common, train_merge);
        exit_code = run_train(train_opts, manifest);
    });

    // eval ----------------------------------------------------------------
    EvalOpts eval_opts;
    ConfigMerger eval_merge;
    CLI::App* eval_cmd =
        app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    add_common_opts(eval_cmd, eval_merge, &eval_opts.common, "fmpx-out/eval", 1);
    add_model_opts(eval_cmd, eval_merge, &eval_opts.model, false);
    eval_merge.bind(eval_cmd->add_option("--data", eval_opts.data, "Dataset root"),
                    "data", &eval_opts.data);
    eval_merge.bind(eval_cmd->add_option("--ckpt", eval_opts.ckpt, "Checkpoint file"),
                    "ckpt", &eval_opts.ckpt);
    eval_merge.bind(eval_cmd->add_option("--batch", eval_opts.batch, "Batch size")
                        ->capture_default_str(),
                    "batch", &eval_opts.batch);
    eval_cmd->callback([&] {
        eval_merge.apply(eval_opts.common.config_file);
        json manifest = manifest_base("eval", eval_opts.common, eval_merge);
        exit_code = run_eval(eval_opts, manifest);
    });

    // bench ---------------------------------------------------------------
    BenchOpts bench_opts;
    ConfigMerger bench_merge;
    CLI::App* bench_cmd =
        app.add_subcommand("bench", "Single-image latency benchmark");
    add_common_opts(bench_cmd, bench_merge, &bench_opts.common, "fmpx-out/bench", 1);
    add_model_opts(bench_cmd, bench_merge, &bench_opts.model, true);
    bench_merge.bind(bench_cmd->add_option("--ckpt", bench_opts.ckpt,
                                           "Checkpoint (fresh weights if omitted)"),
                     "ckpt", &bench_opts.ckpt);
    bench_merge.bind(bench_cmd->add_option("--image", bench_opts.image,
                                           "Bench on this image instead of noise"),
                     "image", &bench_opts.image);
    bench_merge.bind(bench_cmd->add_option("--n", bench_opts.n, "Timed forwards")
                         ->capture_default_str(),
                     "n", &bench_opts.n);
    bench_merge.bind(
        bench_cmd->add_option("--warmup", bench_opts.warmup, "Untimed warmup forwards")
            ->capture_default_str(),
        "warmup", &bench_opts.warmup);
    bench_cmd->callback([&] {
        bench_merge.apply(bench_opts.common.config_file);
        json manifest = manifest_base("bench", bench_opts.common, bench_merge);
        exit_code = run_bench(bench_opts, manifest);
    });

    // classify ------------------------------------------------------------
    ClassifyOpts classify_opts;
    ConfigMerger classify_merge;
    CLI::App* classify_cmd =
        app.add_subcommand("classify", "Class probabilities for images");
    add_common_opts(classify_cmd, classify_merge, &classify_opts.common,
                    "fmpx-out/classify", 1);
    add_model_opts(classify_cmd, classify_merge, &classify_opts.model, true);
    classify_merge.bind(classify_cmd->add_option("--image", classify_opts.image,
                                                 "Image file or directory of .ppm"),
                        "image", &classify_opts.image);
    classify_merge.bind(
        classify_cmd->add_option("--ckpt", classify_opts.ckpt, "Checkpoint file"),
        "ckpt", &classify_opts.ckpt);
    classify_merge.bind(classify_cmd
                            ->add_option("--classes", classify_opts.classes,
                                         "Class names, comma separated")
                            ->delimiter(','),
                        "classes", &classify_opts.classes);
    classify_merge.bind(classify_cmd
                            ->add_option("--topk", classify_opts.topk,
                                         "Report only the k best classes")
                            ->capture_default_str(),
                        "topk", &classify_opts.topk);
    classify_cmd->callback([&] {
        classify_merge.apply(classify_opts.common.config_file);
        json manifest = manifest_base("classify", classify_opts.common, classify_merge);
        exit_code = run_classify(classify_opts, manifest);
    });

    // gradcam ---------------------------------------------------------------
    GradcamOpts gradcam_opts;
    ConfigMerger gradcam_merge;
    CLI::App* gradcam_cmd =
        app.add_subcommand("gradcam", "Class-activation heatmap for one image");
    add_common_opts(gradcam_cmd, gradcam_merge, &gradcam_opts.common,
                    "fmpx-out/gradcam", 1);
    add_model_opts(gradcam_cmd, gradcam_merge, &gradcam_opts.model, true);
    gradcam_merge.bind(
        gradcam_cmd->add_option("--image", gradcam_opts.image, "Input image"),
        "image", &gradcam_opts.image);
    gradcam_merge.bind(
        gradcam_cmd->add_option("--ckpt", gradcam_opts.ckpt, "Checkpoint file"),
        "ckpt", &gradcam_opts.ckpt);
    gradcam_merge.bind(gradcam_cmd
                           ->add_option("--layer", gradcam_opts.layer,
                                        "stage2|stage3|stage4|stage5|fusion")
                           ->capture_default_str()
                           ->check(CLI::IsMember({"stage2", "stage3", "stage4",
                                                  "stage5", "fusion"})),
                       "layer", &gradcam_opts.layer);
    gradcam_merge.bind(gradcam_cmd
                           ->add_option("--class", gradcam_opts.target_class,
                                        "Target class (-1: predicted)")
                           ->capture_default_str(),
                       "class", &gradcam_opts.target_class);
    gradcam_merge.bind(gradcam_cmd
                           ->add_option("--alpha", gradcam_opts.alpha,
                                        "Overlay blend weight")
                           ->capture_default_str(),
                       "alpha", &gradcam_opts.alpha);
    gradcam_merge.bind(
        gradcam_cmd->add_flag("--csv", gradcam_opts.csv, "Also dump raw heatmap CSV"),
        "csv", &gradcam_opts.csv);
    gradcam_cmd->callback([&] {
        gradcam_merge.apply(gradcam_opts.common.config_file);
        json manifest = manifest_base("gradcam", gradcam_opts.common, gradcam_merge);
        exit_code = run_gradcam(gradcam_opts, manifest);
    });

    // augment ---------------------------------------------------------------
    AugmentOpts augment_opts;
    ConfigMerger augment_merge;
    CLI::App* augment_cmd = app.add_subcommand(
        "augment", "Expand a dataset with the 12-strategy augmentation pool");
    add_common_opts(augment_cmd, augment_merge, &augment_opts.common,
                    "fmpx-out/augment",
                    std::max(1u, std::thread::hardware_concurrency()));
    augment_merge.bind(
        augment_cmd->add_option("--data", augment_opts.data, "Dataset root"), "data",
        &augment_opts.data);
    augment_merge.bind(augment_cmd
                           ->add_option("--target", augment_opts.target,
                                        "Expand every class to at least this count")
                           ->capture_default_str(),
                       "target", &augment_opts.target);
    augment_merge.bind(augment_cmd
                           ->add_option("--targets", augment_opts.targets,
                                        "Per-class expansion counts")
                           ->delimiter(','),
                       "targets", &augment_opts.targets);
    augment_cmd->callback([&] {
        augment_merge.apply(augment_opts.common.config_file);
        json manifest = manifest_base("augment", augment_opts.common, augment_merge);
        exit_code = run_augment(augment_opts, manifest);
    });

    // score -----------------------------------------------------------------
    ScoreOpts score_opts;
    ConfigMerger score_merge;
    CLI::App* score_cmd = app.add_subcommand(
        "score", "Rank models by the weighted min-max practicality score");
    add_common_opts(score_cmd, score_merge, &score_opts.common, "fmpx-out/score", 1);
    score_merge.bind(score_cmd->add_option("--in", score_opts.in,
                                           "CSV: name,accuracy,fps,recall,specificity"),
                     "in", &score_opts.in);
    score_cmd->callback([&] {
        score_merge.apply(score_opts.common.config_file);
        json manifest = manifest_base("score", score_opts.common, score_merge);
        exit_code = run_score(score_opts, manifest);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitBadInput;
    } catch (const CheckpointError& e) {
        std::cerr << "fmpx: error: " << e.what() << "\n";
        return kExitBadInput;
    } catch (const std::invalid_argument& e) {
        std::cerr << "fmpx: error: " << e.what() << "\n";
        return kExitBadInput;
    } catch (const std::exception& e) {
        std::cerr << "fmpx: internal error: " << e.what() << "\n";
        return kExitInternal;
    }
    return exit_code;
}
