#pragma once

// JSON documents: resolved run configuration, checkpoints, run metrics and
// the ablation table (JSON and CSV).

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crosgrps/corpus.hpp"
#include "crosgrps/error.hpp"
#include "crosgrps/graphbuild.hpp"
#include "crosgrps/model.hpp"
#include "crosgrps/train.hpp"

namespace crosgrps::io {

using json = nlohmann::ordered_json;

inline constexpr std::string_view checkpoint_format = "crosgrps-checkpoint";
inline constexpr int checkpoint_version = 1;

struct RunConfig {
    model::ModelConfig model;
    graph::GraphConfig graph;
    train::TrainConfig train;

    void validate() const
    {
        model.validate();
        graph.validate();
        train.validate();
    }
};

namespace detail {

inline void reject_unknown(const json& obj, const std::string& section,
                           std::initializer_list<std::string_view> allowed)
{
    if (!obj.is_object()) {
        throw ConfigError("config section '" + section + "' must be an object");
    }
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool known = false;
        for (auto a : allowed) known = known || it.key() == a;
        if (!known) {
            throw ConfigError("unknown config key '" + section + "." + it.key() + "'");
        }
    }
}

template <typename T>
void read(const json& obj, const std::string& section, std::string_view key, T& out)
{
    auto it = obj.find(std::string(key));
    if (it == obj.end()) return;
    try {
        out = it->template get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config key '" + section + "." + std::string(key) + "' has the wrong type");
    }
}

inline void read_count(const json& obj, const std::string& section, std::string_view key,
                       std::size_t& out)
{
    auto it = obj.find(std::string(key));
    if (it == obj.end()) return;
    if (!it->is_number_unsigned() && !(it->is_number_integer() && it->get<long long>() >= 0)) {
        throw ConfigError("config key '" + section + "." + std::string(key) +
                          "' must be a non-negative integer");
    }
    out = it->get<std::size_t>();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

inline json to_json(const model::AblationFlags& f)
{
    json j = json::object();
    model::AblationFlags copy = f;
    for (const auto& name : model::ablation_flag_names()) j[name] = model::flag_ref(copy, name);
    return j;
}

inline json to_json(const model::ModelConfig& c)
{
    return json{{"vocab_size", c.vocab_size},
                {"embed_dim", c.embed_dim},
                {"hidden_dim", c.hidden_dim},
                {"num_classes", c.num_classes},
                {"gat_layers", c.gat_layers},
                {"refine_heads", c.refine_heads},
                {"refine_layers", c.refine_layers},
                {"leaky_slope", c.leaky_slope},
                {"dropout_rate", c.dropout_rate},
                {"embedding_source",
                 c.embedding_source == model::EmbeddingSource::trainable ? "trainable" : "precomputed"},
                {"ablation", to_json(c.flags)}};
}

inline json to_json(const graph::GraphConfig& g)
{
    return json{{"window_radius", g.window_radius},
                {"top_k", g.top_k},
                {"threshold", g.threshold},
                {"aspect_radius", g.aspect_radius},
                {"aspect_mode", g.aspect_mode == graph::AspectGraphMode::proximity ? "proximity" : "syntax"},
                {"fixed_radius", g.fixed_radius}};
}

inline json to_json(const train::TrainConfig& t)
{
    return json{{"epochs", t.epochs},
                {"learning_rate", t.learning_rate},
                {"batch_size", t.batch_size},
                {"optimizer", train::to_string(t.optimizer)},
                {"weight_decay", t.weight_decay},
                {"early_stop_patience", t.early_stop_patience},
                {"seed", t.seed},
                {"max_length", t.max_length},
                {"class_weighting", train::to_string(t.class_weighting)},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_eps", t.adam_eps},
                {"grad_clip", t.grad_clip},
                {"min_freq", t.min_freq}};
}

inline json to_json(const RunConfig& c)
{
    return json{{"model", to_json(c.model)}, {"graph", to_json(c.graph)}, {"train", to_json(c.train)}};
}

inline void apply(const json& j, model::AblationFlags& f)
{
    detail::reject_unknown(j, "model.ablation",
                           {"no_syntax_graph", "no_semantic_graph", "no_graph_branches",
                            "no_cross_attention", "no_transformer_refine", "no_highway_gate",
                            "no_aspect_embedding", "fixed_adjacency"});
    for (const auto& name : model::ablation_flag_names()) {
        detail::read(j, "model.ablation", name, model::flag_ref(f, name));
    }
}

inline void apply(const json& j, model::ModelConfig& c)
{
    const std::string s = "model";
    detail::reject_unknown(j, s,
                           {"vocab_size", "embed_dim", "hidden_dim", "num_classes", "gat_layers",
                            "refine_heads", "refine_layers", "leaky_slope", "dropout_rate",
                            "embedding_source", "ablation"});
    detail::read_count(j, s, "vocab_size", c.vocab_size);
    detail::read_count(j, s, "embed_dim", c.embed_dim);
    detail::read_count(j, s, "hidden_dim", c.hidden_dim);
    detail::read_count(j, s, "num_classes", c.num_classes);
    detail::read_count(j, s, "gat_layers", c.gat_layers);
    detail::read_count(j, s, "refine_heads", c.refine_heads);
    detail::read_count(j, s, "refine_layers", c.refine_layers);
    detail::read(j, s, "leaky_slope", c.leaky_slope);
    detail::read(j, s, "dropout_rate", c.dropout_rate);
    if (j.contains("embedding_source")) {
        std::string src;
        detail::read(j, s, "embedding_source", src);
        if (src == "trainable") c.embedding_source = model::EmbeddingSource::trainable;
        else if (src == "precomputed") c.embedding_source = model::EmbeddingSource::precomputed;
        else throw ConfigError("model.embedding_source must be 'trainable' or 'precomputed'");
    }
    if (j.contains("ablation")) apply(j.at("ablation"), c.flags);
}

inline void apply(const json& j, graph::GraphConfig& g)
{
    const std::string s = "graph";
    detail::reject_unknown(j, s, {"window_radius", "top_k", "threshold", "aspect_radius",
                                  "aspect_mode", "fixed_radius"});
    detail::read_count(j, s, "window_radius", g.window_radius);
    detail::read_count(j, s, "top_k", g.top_k);
    detail::read(j, s, "threshold", g.threshold);
    detail::read_count(j, s, "aspect_radius", g.aspect_radius);
    detail::read_count(j, s, "fixed_radius", g.fixed_radius);
    if (j.contains("aspect_mode")) {
        std::string mode;
        detail::read(j, s, "aspect_mode", mode);
        if (mode == "proximity") g.aspect_mode = graph::AspectGraphMode::proximity;
        else if (mode == "syntax") g.aspect_mode = graph::AspectGraphMode::syntax;
        else throw ConfigError("graph.aspect_mode must be 'proximity' or 'syntax'");
    }
}

inline void apply(const json& j, train::TrainConfig& t)
{
    const std::string s = "train";
    detail::reject_unknown(j, s,
                           {"epochs", "learning_rate", "batch_size", "optimizer", "weight_decay",
                            "early_stop_patience", "seed", "max_length", "class_weighting", "beta1",
                            "beta2", "adam_eps", "grad_clip", "min_freq"});
    detail::read_count(j, s, "epochs", t.epochs);
    detail::read(j, s, "learning_rate", t.learning_rate);
    detail::read_count(j, s, "batch_size", t.batch_size);
    detail::read(j, s, "weight_decay", t.weight_decay);
    detail::read_count(j, s, "early_stop_patience", t.early_stop_patience);
    if (j.contains("seed")) {
        if (!j.at("seed").is_number_unsigned()) throw ConfigError("train.seed must be a non-negative integer");
        t.seed = j.at("seed").get<std::uint64_t>();
    }
    detail::read_count(j, s, "max_length", t.max_length);
    detail::read(j, s, "beta1", t.beta1);
    detail::read(j, s, "beta2", t.beta2);
    detail::read(j, s, "adam_eps", t.adam_eps);
    detail::read(j, s, "grad_clip", t.grad_clip);
    detail::read_count(j, s, "min_freq", t.min_freq);
    if (j.contains("optimizer")) {
        std::string o;
        detail::read(j, s, "optimizer", o);
        if (o == "adam") t.optimizer = train::Optimizer::adam;
        else if (o == "adamw") t.optimizer = train::Optimizer::adamw;
        else throw ConfigError("train.optimizer must be 'adam' or 'adamw'");
    }
    if (j.contains("class_weighting")) {
        std::string w;
        detail::read(j, s, "class_weighting", w);
        if (w == "none") t.class_weighting = train::ClassWeighting::none;
        else if (w == "weighted") t.class_weighting = train::ClassWeighting::weighted;
        else throw ConfigError("train.class_weighting must be 'none' or 'weighted'");
    }
}

// Missing keys keep their defaults; unknown keys are errors.
inline RunConfig parse_config(const json& j)
{
    RunConfig c;
    detail::reject_unknown(j, "<root>", {"model", "graph", "train"});
    if (j.contains("model")) apply(j.at("model"), c.model);
    if (j.contains("graph")) apply(j.at("graph"), c.graph);
    if (j.contains("train")) apply(j.at("train"), c.train);
    c.model.normalize();
    // The vocabulary size comes from the data, so it is checked later.
    model::ModelConfig probe = c.model;
    probe.vocab_size = std::max(probe.vocab_size, corpus::Vocab::num_reserved + 1);
    probe.validate();
    c.graph.validate();
    c.train.validate();
    return c;
}

inline json read_json_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": malformed JSON: " + e.what());
    }
}

inline void write_text_file(const std::string& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << text;
    if (!out) throw IoError("failed writing " + path);
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline RunConfig load_config(const std::string& path) { return parse_config(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

struct Checkpoint {
    RunConfig config;
    corpus::Vocab vocab;
    model::ModelParams params;
};

inline json to_json(const model::ModelParams& params)
{
    json out = json::object();
    for (const auto& entry : params.entries()) {
        const auto& m = entry.var.value();
        out[entry.name] = json{{"shape", {m.rows(), m.cols()}}, {"values", m.values()}};
    }
    return out;
}

inline json checkpoint_json(const RunConfig& cfg, const corpus::Vocab& vocab,
                            const model::ModelParams& params)
{
    return json{{"format", checkpoint_format},
                {"version", checkpoint_version},
                {"config", to_json(cfg)},
                {"vocab", vocab.tokens()},
                {"params", to_json(params)}};
}

// Validates format, version, tensor shapes and values against the config
// stored in the file, or against `override_model` when given.
inline Checkpoint parse_checkpoint(const json& j, const model::ModelConfig* override_model = nullptr)
{
    try {
        if (!j.is_object() || j.value("format", std::string()) != checkpoint_format) {
            throw ContractError("not a checkpoint (format tag missing)");
        }
        if (j.at("version").get<int>() != checkpoint_version) {
            throw ContractError("unsupported checkpoint version " + j.at("version").dump());
        }
        Checkpoint ck;
        ck.config = parse_config(j.at("config"));
        ck.vocab = corpus::Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
        if (override_model != nullptr) {
            ck.config.model = *override_model;
            // A config file without a vocabulary size adopts the checkpoint's.
            if (ck.config.model.vocab_size <= corpus::Vocab::num_reserved) {
                ck.config.model.vocab_size = ck.vocab.size();
            }
        }
        ck.config.validate();
        if (ck.config.model.embedding_source == model::EmbeddingSource::trainable &&
            ck.config.model.vocab_size != ck.vocab.size()) {
            throw ContractError("checkpoint vocabulary has " + std::to_string(ck.vocab.size()) +
                                " entries, config expects " + std::to_string(ck.config.model.vocab_size));
        }
        for (const auto& [name, t] : j.at("params").items()) {
            const auto shape = t.at("shape").get<std::vector<std::size_t>>();
            if (shape.size() != 2) throw ContractError("tensor '" + name + "' needs a 2-d shape");
            const auto values = t.at("values");
            std::vector<double> data;
            data.reserve(values.size());
            for (const auto& v : values) {
                if (!v.is_number()) throw NumericError("tensor '" + name + "' holds a non-numeric value");
                data.push_back(v.get<double>());
            }
            if (data.size() != shape[0] * shape[1]) {
                throw DimensionError("tensor '" + name + "' has " + std::to_string(data.size()) +
                                     " values for shape " + num::Matrix::shape_of(shape[0], shape[1]));
            }
            ck.params.insert(name, num::Matrix(shape[0], shape[1], std::move(data)));
        }
        model::validate_params(ck.params, ck.config.model);
        return ck;
    } catch (const json::exception& e) {
        throw ContractError(std::string("malformed checkpoint: ") + e.what());
    }
}

inline Checkpoint load_checkpoint(const std::string& path,
                                  const model::ModelConfig* override_model = nullptr)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ContractError(path + ": corrupted checkpoint: " + e.what());
    }
    try {
        return parse_checkpoint(j, override_model);
    } catch (const IoError&) {
        throw;
    } catch (const Error& e) {
        throw ContractError(path + ": checkpoint validation failed: " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline json to_json(const train::EvalMetrics& m)
{
    json per_class = json::object();
    json confusion = json::array();
    for (std::size_t k = 0; k < corpus::num_polarities; ++k) {
        const auto name = std::string(corpus::to_string(static_cast<corpus::Polarity>(k)));
        per_class[name] = m.per_class_f1[k];
        confusion.push_back(m.confusion[k]);
    }
    json labels = json::array();
    for (std::size_t k = 0; k < corpus::num_polarities; ++k) {
        labels.push_back(corpus::to_string(static_cast<corpus::Polarity>(k)));
    }
    return json{{"count", m.count},
                {"accuracy", m.accuracy},
                {"micro_f1", m.micro_f1},
                {"macro_f1", m.macro_f1},
                {"per_class_f1", per_class},
                {"confusion", {{"labels", labels}, {"rows_are", "gold"}, {"matrix", confusion}}}};
}

inline json to_json(const train::RunMetrics& r)
{
    json epochs = json::array();
    for (const auto& e : r.epochs) {
        epochs.push_back(json{{"epoch", e.epoch},
                              {"train_loss", e.train_loss},
                              {"grad_norm", e.grad_norm},
                              {"validation", to_json(e.validation)}});
    }
    return json{{"epochs", epochs},
                {"best_epoch", r.best_epoch},
                {"stopped_early", r.stopped_early},
                {"test", r.test.count == 0 ? json(nullptr) : to_json(r.test)}};
}

// ---------------------------------------------------------------------------
// Ablation table
// ---------------------------------------------------------------------------

inline json to_json(const train::AblationTable& t)
{
    json rows = json::array();
    for (const auto& row : t.rows) {
        json cells = json::object();
        for (const auto& c : row.cells) {
            cells[c.dataset] = json{{"accuracy", c.test.accuracy},
                                    {"micro_f1", c.test.micro_f1},
                                    {"macro_f1", c.test.macro_f1},
                                    {"best_epoch", c.best_epoch}};
        }
        rows.push_back(json{{"setting", row.label},
                            {"flag", row.flag.empty() ? json(nullptr) : json(row.flag)},
                            {"datasets", cells}});
    }
    return json{{"datasets", t.datasets}, {"rows", rows}};
}

inline std::string percent(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

// Settings column, then "<dataset> Acc", "<dataset> F1" (micro) and
// "<dataset> Macro-F1" per dataset; values in percent.
inline std::string ablation_csv(const train::AblationTable& t)
{
    std::ostringstream out;
    out << "Settings";
    for (const auto& ds : t.datasets) {
        out << ',' << graph::csv_escape(ds + " Acc") << ',' << graph::csv_escape(ds + " F1") << ','
            << graph::csv_escape(ds + " Macro-F1");
    }
    out << '\n';
    for (const auto& row : t.rows) {
        out << graph::csv_escape(row.label);
        for (const auto& c : row.cells) {
            out << ',' << percent(c.test.accuracy) << ',' << percent(c.test.micro_f1) << ','
                << percent(c.test.macro_f1);
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace crosgrps::io
