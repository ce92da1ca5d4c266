#pragma once

// Weighted cross-entropy training with AdamW, early stopping on validation
// micro-F1, evaluation metrics and the component ablation harness.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crosgrps/corpus.hpp"
#include "crosgrps/error.hpp"
#include "crosgrps/graphbuild.hpp"
#include "crosgrps/model.hpp"
#include "crosgrps/numkit.hpp"
#include "crosgrps/random.hpp"

namespace crosgrps::train {

using num::Matrix;
using num::Var;
using model::ModelConfig;
using model::ModelParams;
using model::PreparedInstance;

enum class Optimizer { adam, adamw };
enum class ClassWeighting { none, weighted };

inline std::string_view to_string(Optimizer o) { return o == Optimizer::adam ? "adam" : "adamw"; }
inline std::string_view to_string(ClassWeighting w)
{
    return w == ClassWeighting::none ? "none" : "weighted";
}

struct TrainConfig {
    std::size_t epochs = 20;
    double learning_rate = 2e-5;
    std::size_t batch_size = 1;
    Optimizer optimizer = Optimizer::adamw;
    double weight_decay = 1e-2;
    std::size_t early_stop_patience = 5;
    std::uint64_t seed = 42;
    std::size_t max_length = 128;
    ClassWeighting class_weighting = ClassWeighting::weighted;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 5.0;  // global L2 norm; 0 disables
    std::size_t min_freq = 1;

    void validate() const
    {
        if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
        if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
        if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
        if (early_stop_patience == 0) throw ConfigError("train.early_stop_patience must be >= 1");
        if (max_length < 5) throw ConfigError("train.max_length must be >= 5");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
            throw ConfigError("train betas must lie in [0,1)");
        }
        if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps must be > 0");
        if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0");
        if (min_freq == 0) throw ConfigError("train.min_freq must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

using ClassWeights = std::array<double, corpus::num_polarities>;

inline ClassWeights unit_weights() { return {1.0, 1.0, 1.0}; }

// -w[label] * log softmax(logits)[label], via log-sum-exp.
inline Var cross_entropy_loss(const Var& logits, std::size_t label, const ClassWeights& weights)
{
    if (logits.rows() != 1 || logits.cols() != weights.size()) {
        throw DimensionError("cross_entropy_loss: logits " + logits.value().shape() +
                             " for " + std::to_string(weights.size()) + " classes");
    }
    if (label >= weights.size()) {
        throw ContractError("cross_entropy_loss: label " + std::to_string(label) +
                            " outside [0," + std::to_string(weights.size()) + ")");
    }
    const Matrix& z = logits.value();
    double mx = z[0];
    for (std::size_t i = 1; i < z.size(); ++i) mx = std::max(mx, z[i]);
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) total += std::exp(z[i] - mx);
    const double lse = mx + std::log(total);
    const double w = weights[label];
    Matrix probs(1, z.size());
    for (std::size_t i = 0; i < z.size(); ++i) probs[i] = std::exp(z[i] - lse);

    return num::make_node(
        Matrix(1, 1, w * (lse - z[label])), {logits},
        [probs, label, w](num::DiffNode& self) {
            auto& parent = *self.parents[0];
            if (!parent.requires_grad) return;
            const double g = self.grad[0];
            Matrix d = probs;
            d[label] -= 1.0;
            parent.accumulate(num::scale(d, w * g));
        },
        "cross_entropy_loss");
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
    std::map<std::string, Matrix> m;
    std::map<std::string, Matrix> v;
    std::size_t step = 0;
};

struct AdamSettings {
    double lr = 2e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    bool decoupled = true;  // AdamW; false folds decay into the gradient (L2)
};

// One update over every parameter, reading the gradients stored on the nodes.
inline void adam_step(ModelParams& params, AdamState& state, const AdamSettings& s)
{
    ++state.step;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
    for (auto& entry : params.entries()) {
        Var p = entry.var;
        Matrix& value = p.mutable_value();
        const Matrix& grad = p.grad();
        auto [mit, m_new] = state.m.try_emplace(entry.name, value.rows(), value.cols());
        auto [vit, v_new] = state.v.try_emplace(entry.name, value.rows(), value.cols());
        Matrix& m = mit->second;
        Matrix& v = vit->second;
        for (std::size_t i = 0; i < value.size(); ++i) {
            double g = grad.size() == 0 ? 0.0 : grad[i];
            if (!s.decoupled) g += s.weight_decay * value[i];
            m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
            v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            double update = m_hat / (std::sqrt(v_hat) + s.eps);
            if (s.decoupled) update += s.weight_decay * value[i];
            value[i] -= s.lr * update;
        }
    }
}

inline double global_grad_norm(const ModelParams& params)
{
    double sq = 0.0;
    for (const auto& entry : params.entries()) {
        for (double g : entry.var.grad().values()) sq += g * g;
    }
    return std::sqrt(sq);
}

// Rescales all gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
inline double clip_grad_norm(ModelParams& params, double max_norm)
{
    const double norm = global_grad_norm(params);
    if (max_norm > 0.0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& entry : params.entries()) {
            Var v = entry.var;
            for (double& g : v.mutable_grad().values()) g *= f;
        }
    }
    return norm;
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

// Epochs are 1-based. Only strict improvements move the best epoch.
class EarlyStopper {
public:
    explicit EarlyStopper(std::size_t patience) : patience_(patience)
    {
        if (patience == 0) throw ConfigError("early-stopping patience must be >= 1");
    }

    // Records the epoch's score; true when it is the new best.
    bool update(std::size_t epoch, double score)
    {
        last_epoch_ = epoch;
        if (best_epoch_ == 0 || score > best_score_) {
            best_epoch_ = epoch;
            best_score_ = score;
            return true;
        }
        return false;
    }

    bool should_stop() const { return best_epoch_ > 0 && last_epoch_ - best_epoch_ >= patience_; }

    std::size_t best_epoch() const { return best_epoch_; }
    double best_score() const { return best_score_; }

private:
    std::size_t patience_;
    std::size_t best_epoch_ = 0;
    std::size_t last_epoch_ = 0;
    double best_score_ = -std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct EvalMetrics {
    std::size_t count = 0;
    double accuracy = 0.0;
    double micro_f1 = 0.0;
    double macro_f1 = 0.0;
    std::array<double, corpus::num_polarities> per_class_f1{};
    // confusion[gold][predicted]
    std::array<std::array<std::size_t, corpus::num_polarities>, corpus::num_polarities> confusion{};
};

// Per-class F1 is 0 when the class is neither predicted nor present.
inline EvalMetrics compute_metrics(const std::vector<std::size_t>& gold,
                                   const std::vector<std::size_t>& predicted)
{
    constexpr std::size_t c = corpus::num_polarities;
    if (gold.size() != predicted.size()) {
        throw DimensionError("compute_metrics: " + std::to_string(gold.size()) + " labels vs " +
                             std::to_string(predicted.size()) + " predictions");
    }
    if (gold.empty()) throw EmptyInputError("empty split");
    EvalMetrics out;
    out.count = gold.size();
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (gold[i] >= c || predicted[i] >= c) {
            throw ContractError("compute_metrics: class index out of range");
        }
        ++out.confusion[gold[i]][predicted[i]];
    }
    std::size_t correct = 0;
    std::size_t tp_sum = 0, fp_sum = 0, fn_sum = 0;
    double f1_sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
        const std::size_t tp = out.confusion[k][k];
        std::size_t fp = 0, fn = 0;
        for (std::size_t j = 0; j < c; ++j) {
            if (j == k) continue;
            fp += out.confusion[j][k];
            fn += out.confusion[k][j];
        }
        correct += tp;
        tp_sum += tp;
        fp_sum += fp;
        fn_sum += fn;
        const std::size_t denom = 2 * tp + fp + fn;
        out.per_class_f1[k] = denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
        f1_sum += out.per_class_f1[k];
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(gold.size());
    const std::size_t micro_denom = 2 * tp_sum + fp_sum + fn_sum;
    out.micro_f1 = micro_denom == 0 ? 0.0
                                    : 2.0 * static_cast<double>(tp_sum) / static_cast<double>(micro_denom);
    out.macro_f1 = f1_sum / static_cast<double>(c);
    return out;
}

struct Predictions {
    std::vector<std::size_t> gold;
    std::vector<std::size_t> predicted;
};

inline Predictions predict_split(const std::vector<PreparedInstance>& split, const ModelParams& params,
                                 const ModelConfig& cfg, const graph::GraphConfig& gcfg)
{
    Predictions out;
    for (const auto& inst : split) {
        auto tr = model::forward(inst, params, cfg, gcfg);
        out.gold.push_back(corpus::index_of(inst.encoded.label));
        out.predicted.push_back(model::predict(tr.logits.value()));
    }
    return out;
}

inline EvalMetrics evaluate(const std::vector<PreparedInstance>& split, const ModelParams& params,
                            const ModelConfig& cfg, const graph::GraphConfig& gcfg)
{
    if (split.empty()) throw EmptyInputError("empty split");
    auto p = predict_split(split, params, cfg, gcfg);
    return compute_metrics(p.gold, p.predicted);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct PreparedSplits {
    std::vector<PreparedInstance> train;
    std::vector<PreparedInstance> validation;
    std::vector<PreparedInstance> test;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double grad_norm = 0.0;  // mean pre-clip norm over steps
    EvalMetrics validation;
};

struct RunMetrics {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    bool stopped_early = false;
    EvalMetrics test;
};

struct TrainResult {
    ModelParams best;
    RunMetrics metrics;
};

inline ClassWeights weights_for(const std::vector<PreparedInstance>& train,
                                ClassWeighting weighting)
{
    if (weighting == ClassWeighting::none) return unit_weights();
    std::vector<corpus::Polarity> labels;
    labels.reserve(train.size());
    for (const auto& inst : train) labels.push_back(inst.encoded.label);
    return corpus::class_weights(labels);
}

// Called after each epoch with the record just appended.
using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train(const ModelConfig& cfg, ModelParams params, const PreparedSplits& splits,
                         const TrainConfig& tcfg, const graph::GraphConfig& gcfg,
                         const EpochCallback& on_epoch = {})
{
    tcfg.validate();
    gcfg.validate();
    if (splits.train.empty()) throw EmptyInputError("empty split: train");
    if (splits.validation.empty()) throw EmptyInputError("empty split: validation");

    const ClassWeights weights = weights_for(splits.train, tcfg.class_weighting);
    const AdamSettings adam{tcfg.learning_rate, tcfg.beta1,       tcfg.beta2,
                            tcfg.adam_eps,      tcfg.weight_decay, tcfg.optimizer == Optimizer::adamw};
    AdamState state;
    Rng order_rng = Rng::derive(tcfg.seed, "shuffle");
    Rng dropout_rng = Rng::derive(tcfg.seed, "dropout");
    EarlyStopper stopper(tcfg.early_stop_patience);

    std::vector<std::size_t> order(splits.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainResult result;
    result.best = params.clone();
    for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_total = 0.0;
        double norm_total = 0.0;
        std::size_t steps = 0;
        params.zero_grad();
        for (std::size_t pos = 0; pos < order.size(); ++pos) {
            const PreparedInstance& inst = splits.train[order[pos]];
            double loss_value = 0.0;
            try {
                auto tr = model::forward(inst, params, cfg, gcfg, &dropout_rng);
                Var loss = cross_entropy_loss(tr.logits, corpus::index_of(inst.encoded.label), weights);
                loss_value = loss.value()[0];
                if (!std::isfinite(loss_value)) throw NumericError("loss is not finite");
                if (tcfg.batch_size > 1) loss = num::scale(loss, 1.0 / static_cast<double>(tcfg.batch_size));
                num::backward(loss);
            } catch (const NumericError& e) {
                throw TrainingError("non-finite value at epoch " + std::to_string(epoch) +
                                    ", instance '" + inst.encoded.instance_id + "': " + e.what());
            }
            loss_total += loss_value;
            const bool last = pos + 1 == order.size();
            if ((pos + 1) % tcfg.batch_size == 0 || last) {
                norm_total += clip_grad_norm(params, tcfg.grad_clip);
                ++steps;
                adam_step(params, state, adam);
                params.zero_grad();
            }
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_total / static_cast<double>(order.size());
        rec.grad_norm = norm_total / static_cast<double>(steps);
        rec.validation = evaluate(splits.validation, params, cfg, gcfg);
        if (stopper.update(epoch, rec.validation.micro_f1)) {
            result.best.copy_values_from(params);
        }
        result.metrics.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (stopper.should_stop() && epoch < tcfg.epochs) {
            result.metrics.stopped_early = true;
            break;
        }
    }
    result.metrics.best_epoch = stopper.best_epoch();
    if (!splits.test.empty()) {
        result.metrics.test = evaluate(splits.test, result.best, cfg, gcfg);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

struct SplitSources {
    corpus::DatasetSplit train;
    corpus::DatasetSplit validation;
    corpus::DatasetSplit test;
};

struct PrepareOptions {
    graph::SyntaxRuleSet rules = graph::SyntaxRuleSet::defaults();
    // Optional per-instance syntactic edges keyed by instance id.
    const std::map<std::string, graph::EdgeList>* edges = nullptr;
    const model::PrecomputedEmbeddings* embeddings = nullptr;
};

inline std::vector<PreparedInstance> prepare_split(const corpus::DatasetSplit& split,
                                                   const corpus::Vocab& vocab, std::size_t max_length,
                                                   const graph::GraphConfig& gcfg,
                                                   const PrepareOptions& opt = {})
{
    std::vector<PreparedInstance> out;
    out.reserve(split.size());
    for (const auto& inst : split.instances) {
        const graph::EdgeList* edges = nullptr;
        if (opt.edges != nullptr) {
            auto it = opt.edges->find(inst.id);
            if (it != opt.edges->end()) edges = &it->second;
        }
        out.push_back(model::prepare_instance(inst, vocab, max_length, gcfg, opt.rules, edges,
                                              opt.embeddings));
    }
    return out;
}

inline PreparedSplits prepare_splits(const SplitSources& src, const corpus::Vocab& vocab,
                                     std::size_t max_length, const graph::GraphConfig& gcfg,
                                     const PrepareOptions& opt = {})
{
    return {prepare_split(src.train, vocab, max_length, gcfg, opt),
            prepare_split(src.validation, vocab, max_length, gcfg, opt),
            prepare_split(src.test, vocab, max_length, gcfg, opt)};
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

struct AblationSetting {
    std::string label;
    std::string flag;  // empty for the base row
};

// Ablation table rows, in report order.
inline const std::vector<AblationSetting>& ablation_settings()
{
    static const std::vector<AblationSetting> rows = {
        {"No Syntax Graph", "no_syntax_graph"},
        {"No Semantic Graph", "no_semantic_graph"},
        {"No Graph Branches", "no_graph_branches"},
        {"No Cross-Attention", "no_cross_attention"},
        {"No Transformer", "no_transformer_refine"},
        {"No Highway Gate", "no_highway_gate"},
        {"No Aspect Embedding", "no_aspect_embedding"},
        {"Fixed Adjacency", "fixed_adjacency"},
        {"CrosGrpsABS Base", ""},
    };
    return rows;
}

struct AblationDataset {
    std::string name;
    const PreparedSplits* splits = nullptr;
    std::size_t vocab_size = 0;  // 0 keeps the base config's value
};

struct AblationCell {
    std::string dataset;
    EvalMetrics test;
    std::size_t best_epoch = 0;
};

struct AblationRow {
    std::string label;
    std::string flag;
    std::vector<AblationCell> cells;  // dataset order
};

struct AblationTable {
    std::vector<std::string> datasets;
    std::vector<AblationRow> rows;
};

inline ModelConfig with_flag(ModelConfig cfg, const std::string& flag)
{
    if (!flag.empty()) {
        model::flag_ref(cfg.flags, flag) = true;
    }
    cfg.normalize();
    cfg.validate();
    return cfg;
}

// One model per row, all from the same seed and data order. `only`, when
// non-empty, keeps the listed flags plus the base row.
inline AblationTable run_ablation(const ModelConfig& base, const TrainConfig& tcfg,
                                  const graph::GraphConfig& gcfg,
                                  const std::vector<AblationDataset>& datasets,
                                  const std::vector<std::string>& only = {})
{
    if (datasets.empty()) throw ConfigError("ablation needs at least one dataset");
    for (const auto& f : only) {
        model::AblationFlags probe;
        (void)model::flag_ref(probe, f);
    }
    if (base.flags != model::AblationFlags{}) {
        throw ConfigError("ablation base config must not set ablation flags");
    }
    AblationTable table;
    for (const auto& ds : datasets) table.datasets.push_back(ds.name);
    for (const auto& setting : ablation_settings()) {
        if (!setting.flag.empty() && !only.empty() &&
            std::find(only.begin(), only.end(), setting.flag) == only.end()) {
            continue;
        }
        AblationRow row{setting.label, setting.flag, {}};
        for (const auto& ds : datasets) {
            ModelConfig ds_cfg = base;
            if (ds.vocab_size != 0) ds_cfg.vocab_size = ds.vocab_size;
            ds_cfg = with_flag(ds_cfg, setting.flag);
            auto params = model::init_params(ds_cfg, tcfg.seed);
            auto result = train(ds_cfg, std::move(params), *ds.splits, tcfg, gcfg);
            row.cells.push_back({ds.name, result.metrics.test, result.metrics.best_epoch});
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

}  // namespace crosgrps::train
