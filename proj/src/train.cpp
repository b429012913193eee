#include "fmpx/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "fmpx/checkpoint.hpp"
#include "fmpx/nn.hpp"
#include "fmpx/preprocess.hpp"
#include "fmpx/rng.hpp"
#include "json.hpp"

namespace fmpx {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

int argmax_row(std::span<const float> row) {
    int best = 0;
    for (size_t i = 1; i < row.size(); ++i)
        if (row[i] > row[best]) best = static_cast<int>(i);
    return best;
}

// Splits ids into batches; a trailing singleton is merged into the previous
// batch because batch statistics are undefined for one sample.
std::vector<std::vector<int>> make_batches(const std::vector<int>& ids, int batch_size) {
    std::vector<std::vector<int>> batches;
    for (size_t i = 0; i < ids.size(); i += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(ids.size(), i + static_cast<size_t>(batch_size));
        batches.emplace_back(ids.begin() + static_cast<ptrdiff_t>(i),
                             ids.begin() + static_cast<ptrdiff_t>(end));
    }
    if (batches.size() > 1 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back()[0]);
        batches.pop_back();
    }
    return batches;
}

void check_ids(const Dataset& data, const std::vector<int>& ids, const std::string& what) {
    for (int id : ids)
        require(id >= 0 && id < static_cast<int>(data.samples.size()),
                what + ": sample id out of range");
}

}  // namespace

void TrainConfig::validate() const {
    require(lr >= 0.0 && std::isfinite(lr), "train config: bad learning rate");
    require(batch_size >= 1, "train config: batch size must be positive");
    require(epochs >= 1, "train config: epochs must be positive");
    require(lambda1 >= 0.0 && lambda2 >= 0.0, "train config: negative aux-loss weight");
    require(beta1 >= 0.0 && beta1 < 1.0, "train config: beta1 outside [0,1)");
    require(beta2 >= 0.0 && beta2 < 1.0, "train config: beta2 outside [0,1)");
    require(eps > 0.0, "train config: eps must be positive");
    require(early_stop_train_accuracy >= 0.0 && early_stop_train_accuracy <= 1.0,
            "train config: early-stop accuracy outside [0,1]");
}

Tensor total_loss(const Tensor& logits3, const std::optional<Tensor>& logits1,
                  const std::optional<Tensor>& logits2, const std::vector<int>& labels,
                  double lambda1, double lambda2) {
    require(lambda1 >= 0.0 && lambda2 >= 0.0, "total_loss: negative aux-loss weight");
    for (const auto& aux : {&logits1, &logits2})
        if (aux->has_value())
            require((*aux)->shape() == logits3.shape(),
                    "total_loss: head logits shapes disagree");
    Tensor loss = softmax_cross_entropy(logits3, labels);
    if (logits1.has_value() && lambda1 > 0.0)
        loss = add(loss, scale(softmax_cross_entropy(*logits1, labels),
                               static_cast<float>(lambda1)));
    if (logits2.has_value() && lambda2 > 0.0)
        loss = add(loss, scale(softmax_cross_entropy(*logits2, labels),
                               static_cast<float>(lambda2)));
    return loss;
}

void adam_step(const std::vector<std::pair<std::string, Tensor>>& params,
               AdamState& state, const TrainConfig& config) {
    config.validate();
    state.t += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
    for (const auto& [name, param] : params) {
        Tensor p = param;
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m.assign(p.numel(), 0.0f);
        if (v.empty()) v.assign(p.numel(), 0.0f);
        if (m.size() != p.numel() || v.size() != p.numel())
            throw std::invalid_argument("adam_step: state shape mismatch for " + name);
        const bool has_grad = p.has_grad();
        const std::span<const float> grad =
            has_grad ? std::span<const float>(p.grad()) : std::span<const float>();
        std::span<float> data = p.data();
        for (size_t i = 0; i < data.size(); ++i) {
            const double g = has_grad ? static_cast<double>(grad[i]) : 0.0;
            if (!std::isfinite(g))
                throw std::runtime_error("adam_step: non-finite gradient in " + name);
            const double mi = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            const double vi = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double update =
                config.lr * (mi / bc1) / (std::sqrt(vi / bc2) + config.eps);
            data[i] = static_cast<float>(data[i] - update);
        }
    }
}

EvalOutput evaluate(FastMpoxModel& model, const Dataset& data,
                    const std::vector<int>& ids, int batch_size) {
    require(!ids.empty(), "evaluate: no sample ids");
    require(batch_size >= 1, "evaluate: batch size must be positive");
    check_ids(data, ids, "evaluate");
    model.set_training(false);
    NoGradGuard guard;
    EvalOutput out;
    int64_t correct = 0;
    for (size_t i = 0; i < ids.size(); i += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(ids.size(), i + static_cast<size_t>(batch_size));
        std::vector<Tensor> images;
        for (size_t j = i; j < end; ++j)
            images.push_back(preprocess_eval(data.samples[ids[j]].image));
        const ForwardResult r = model.forward(stack_batch(images));
        const std::vector<float> probs = softmax_rows(r.logits3);
        const int k = r.logits3.dim(1);
        for (size_t j = i; j < end; ++j) {
            const auto* row = probs.data() + (j - i) * static_cast<size_t>(k);
            out.probabilities.emplace_back(row, row + k);
            const int pred = argmax_row({row, static_cast<size_t>(k)});
            out.predictions.push_back(pred);
            correct += pred == data.samples[ids[j]].label;
        }
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(ids.size());
    return out;
}

TrainResult train(FastMpoxModel& model, const Dataset& data, const FoldPlan::Fold& fold,
                  const TrainConfig& config, const std::string& checkpoint_path,
                  std::ostream* log) {
    config.validate();
    require(!fold.train_ids.empty(), "train: empty training fold");
    check_ids(data, fold.train_ids, "train");
    check_ids(data, fold.test_ids, "train");
    require(fold.train_ids.size() >= 2,
            "train: need at least 2 training samples for batch statistics");

    TrainResult result;
    result.checkpoint_path = checkpoint_path;
    AdamState state;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        model.set_training(true);
        std::vector<int> order = fold.train_ids;
        if (config.shuffle) {
            Rng perm_rng(mix64(config.seed, static_cast<uint64_t>(epoch)));
            perm_rng.shuffle(order);
        }
        double loss_sum = 0.0;
        int64_t correct = 0;
        for (const auto& batch : make_batches(order, config.batch_size)) {
            std::vector<Tensor> images;
            std::vector<int> labels;
            for (int id : batch) {
                Rng aug_rng(mix64(config.seed, static_cast<uint64_t>(epoch),
                                  static_cast<uint64_t>(id)));
                images.push_back(
                    preprocess(data.samples[id].image, PreprocessMode::Train, aug_rng));
                labels.push_back(data.samples[id].label);
            }
            const ForwardResult r = model.forward(stack_batch(images));
            Tensor loss = total_loss(r.logits3, r.logits1, r.logits2, labels,
                                     config.lambda1, config.lambda2);
            const double loss_val = loss.item();
            if (!std::isfinite(loss_val))
                throw std::runtime_error(
                    "train: non-finite loss at epoch " + std::to_string(epoch) +
                    "; last checkpoint retained at " + checkpoint_path);
            loss_sum += loss_val * static_cast<double>(batch.size());
            for (size_t j = 0; j < batch.size(); ++j) {
                const auto row = r.logits3.data().subspan(
                    j * static_cast<size_t>(r.logits3.dim(1)),
                    static_cast<size_t>(r.logits3.dim(1)));
                correct += argmax_row(row) == labels[j];
            }
            model.zero_grad();
            loss.backward();
            adam_step(model.parameters(), state, config);
        }

        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = loss_sum / static_cast<double>(fold.train_ids.size());
        record.train_accuracy =
            static_cast<double>(correct) / static_cast<double>(fold.train_ids.size());
        record.eval_accuracy = std::numeric_limits<double>::quiet_NaN();
        if (!fold.test_ids.empty())
            record.eval_accuracy =
                evaluate(model, data, fold.test_ids, config.batch_size).accuracy;
        result.epochs.push_back(record);

        if (log) {
            nlohmann::json line = {{"epoch", record.epoch},
                                   {"train_loss", record.train_loss},
                                   {"train_accuracy", record.train_accuracy}};
            line["eval_accuracy"] = std::isnan(record.eval_accuracy)
                                        ? nlohmann::json(nullptr)
                                        : nlohmann::json(record.eval_accuracy);
            (*log) << line.dump() << '\n' << std::flush;
        }
        save_checkpoint(model, checkpoint_path);
        if (config.early_stop_train_accuracy > 0.0 &&
            record.train_accuracy >= config.early_stop_train_accuracy)
            break;
    }
    model.set_training(false);
    return result;
}

CrossValidationResult cross_validate(const Dataset& data, const ModelConfig& model_config,
                                     const TrainConfig& train_config, int k,
                                     const std::string& out_dir, std::ostream* log) {
    model_config.validate();
    train_config.validate();
    const FoldPlan plan = make_folds(data, k, train_config.seed);
    std::filesystem::create_directories(out_dir);

    CrossValidationResult result;
    std::vector<double> accuracies;
    for (int f = 0; f < k; ++f) {
        FastMpoxModel model =
            build_model(model_config, mix64(train_config.seed, static_cast<uint64_t>(f)));
        const std::string path =
            (std::filesystem::path(out_dir) / ("fold" + std::to_string(f + 1) + ".fmpx"))
                .string();
        FoldOutcome outcome;
        outcome.fold = f + 1;
        outcome.checkpoint_path = path;
        outcome.epochs = train(model, data, plan.folds[f], train_config, path, log).epochs;

        const EvalOutput eval =
            evaluate(model, data, plan.folds[f].test_ids, train_config.batch_size);
        std::vector<int> labels;
        for (int id : plan.folds[f].test_ids) labels.push_back(data.samples[id].label);
        outcome.metrics = per_class_metrics(
            confusion(eval.predictions, labels, model_config.num_classes));
        outcome.accuracy = eval.accuracy * 100.0;
        accuracies.push_back(outcome.accuracy);
        result.folds.push_back(std::move(outcome));
    }
    const auto [mean, stddev] = mean_std(accuracies);
    result.mean_accuracy = mean;
    result.std_accuracy = stddev;
    result.summary = format_mean_std(mean, stddev);
    return result;
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
    require(!xs.empty(), "mean_std: empty input");
    const double mean =
        std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size());
    return {mean, std::sqrt(var)};
}

std::string format_mean_std(double mean_pct, double std_pct) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f%%(±%.2f)", mean_pct, std_pct);
    return buf;
}

bool parse_mean_std(const std::string& text, double* mean_pct, double* std_pct) {
    const size_t pct = text.find("%(");
    const size_t close = text.rfind(')');
    if (pct == std::string::npos || close == std::string::npos || close < pct)
        return false;
    std::string pm = text.substr(pct + 2, close - pct - 2);
    // strip the leading "±" (UTF-8) or a bare +/-... keep a leading minus.
    const std::string plus_minus = "±";
    if (pm.rfind(plus_minus, 0) == 0) pm = pm.substr(plus_minus.size());
    try {
        size_t used = 0;
        *mean_pct = std::stod(text.substr(0, pct), &used);
        if (used != pct) return false;
        *std_pct = std::stod(pm, &used);
        if (used != pm.size()) return false;
    } catch (const std::exception&) {
        return false;
    }
    return true;
}

}  // namespace fmpx
