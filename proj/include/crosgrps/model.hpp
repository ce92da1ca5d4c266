#pragma once

// The dual-graph aspect sentiment network: context encoder, syntactic and
// semantic GAT branches, per-branch cross-attention, refinement encoder,
// aspect GAT pooling, highway gate and linear classifier.
//
// Row convention: token representations are rows, so every projection is
// applied on the right (H * W).

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "crosgrps/corpus.hpp"
#include "crosgrps/error.hpp"
#include "crosgrps/graphbuild.hpp"
#include "crosgrps/numkit.hpp"
#include "crosgrps/random.hpp"

namespace crosgrps::model {

using num::Matrix;
using num::Var;
using graph::AdjacencyMatrix;
using corpus::EncodedInstance;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct AblationFlags {
    bool no_syntax_graph = false;
    bool no_semantic_graph = false;
    bool no_graph_branches = false;
    bool no_cross_attention = false;
    bool no_transformer_refine = false;
    bool no_highway_gate = false;
    bool no_aspect_embedding = false;
    bool fixed_adjacency = false;

    bool syntax_branch_off() const { return no_syntax_graph || no_graph_branches; }
    bool semantic_branch_off() const { return no_semantic_graph || no_graph_branches; }

    bool operator==(const AblationFlags&) const = default;
};

// The eight single-component ablations, keyed by flag name.
inline const std::vector<std::string>& ablation_flag_names()
{
    static const std::vector<std::string> names = {
        "no_syntax_graph",       "no_semantic_graph", "no_graph_branches",
        "no_cross_attention",    "no_transformer_refine", "no_highway_gate",
        "no_aspect_embedding",   "fixed_adjacency",
    };
    return names;
}

inline bool& flag_ref(AblationFlags& f, const std::string& name)
{
    if (name == "no_syntax_graph") return f.no_syntax_graph;
    if (name == "no_semantic_graph") return f.no_semantic_graph;
    if (name == "no_graph_branches") return f.no_graph_branches;
    if (name == "no_cross_attention") return f.no_cross_attention;
    if (name == "no_transformer_refine") return f.no_transformer_refine;
    if (name == "no_highway_gate") return f.no_highway_gate;
    if (name == "no_aspect_embedding") return f.no_aspect_embedding;
    if (name == "fixed_adjacency") return f.fixed_adjacency;
    throw ConfigError("unknown ablation flag '" + name + "'");
}

enum class EmbeddingSource { trainable, precomputed };

struct ModelConfig {
    std::size_t vocab_size = corpus::Vocab::num_reserved;
    std::size_t embed_dim = 32;
    std::size_t hidden_dim = 32;
    std::size_t num_classes = corpus::num_polarities;
    std::size_t gat_layers = 1;
    std::size_t refine_heads = 4;
    std::size_t refine_layers = 1;
    double leaky_slope = 0.2;
    double dropout_rate = 0.1;
    AblationFlags flags;
    EmbeddingSource embedding_source = EmbeddingSource::trainable;

    // no_graph_branches and the pair (no_syntax_graph, no_semantic_graph)
    // imply each other.
    void normalize()
    {
        if (flags.no_graph_branches) {
            flags.no_syntax_graph = true;
            flags.no_semantic_graph = true;
        } else if (flags.no_syntax_graph && flags.no_semantic_graph) {
            flags.no_graph_branches = true;
        }
    }

    void validate() const
    {
        if (embed_dim == 0 || hidden_dim == 0) {
            throw ConfigError("model dimensions must be positive");
        }
        if (num_classes != corpus::num_polarities) {
            throw ConfigError("num_classes must be 3");
        }
        if (refine_heads == 0 || hidden_dim % refine_heads != 0) {
            throw ConfigError("hidden_dim " + std::to_string(hidden_dim) +
                              " is not divisible by refine_heads " + std::to_string(refine_heads));
        }
        if (gat_layers == 0) {
            throw ConfigError("gat_layers must be >= 1");
        }
        if (refine_layers == 0) {
            throw ConfigError("refine_layers must be >= 1");
        }
        num::require_slope(leaky_slope);
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
            throw ConfigError("dropout_rate must lie in [0,1)");
        }
        if (embedding_source == EmbeddingSource::trainable &&
            vocab_size <= corpus::Vocab::num_reserved) {
            throw ConfigError("trainable embeddings need a vocabulary beyond the reserved tokens");
        }
        if (flags.no_graph_branches != (flags.no_syntax_graph && flags.no_semantic_graph)) {
            throw ConfigError("no_graph_branches must coincide with no_syntax_graph + no_semantic_graph");
        }
    }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

enum class Init { glorot, embedding, zeros, ones, gate_bias };

struct ParamSpec {
    std::string name;
    std::size_t rows;
    std::size_t cols;
    Init init;
};

// Every tensor the configuration needs, and nothing a disabled component owns.
inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg)
{
    const std::size_t de = cfg.embed_dim;
    const std::size_t d = cfg.hidden_dim;
    std::vector<ParamSpec> specs;
    auto add = [&](std::string name, std::size_t r, std::size_t c, Init init) {
        specs.push_back({std::move(name), r, c, init});
    };
    auto add_block = [&](const std::string& p, std::size_t width) {
        add(p + ".Wq", width, width, Init::glorot);
        add(p + ".Wk", width, width, Init::glorot);
        add(p + ".Wv", width, width, Init::glorot);
        add(p + ".Wo", width, width, Init::glorot);
        add(p + ".ln1.g", 1, width, Init::ones);
        add(p + ".ln1.b", 1, width, Init::zeros);
        add(p + ".ff1.W", width, 2 * width, Init::glorot);
        add(p + ".ff1.b", 1, 2 * width, Init::zeros);
        add(p + ".ff2.W", 2 * width, width, Init::glorot);
        add(p + ".ff2.b", 1, width, Init::zeros);
        add(p + ".ln2.g", 1, width, Init::ones);
        add(p + ".ln2.b", 1, width, Init::zeros);
    };
    auto add_gat = [&](const std::string& p) {
        add(p + ".W", d, d, Init::glorot);
        add(p + ".a", 2 * d, 1, Init::glorot);
    };

    if (cfg.embedding_source == EmbeddingSource::trainable) {
        add("embed.E", cfg.vocab_size, de, Init::embedding);
        add_block("encoder", de);
    }
    add("encoder.proj.W", de, d, Init::glorot);
    add("encoder.proj.b", 1, d, Init::zeros);

    for (std::size_t l = 0; l < cfg.gat_layers; ++l) {
        if (!cfg.flags.syntax_branch_off()) {
            add_gat("gat_syn." + std::to_string(l));
        }
    }
    for (std::size_t l = 0; l < cfg.gat_layers; ++l) {
        if (!cfg.flags.semantic_branch_off()) {
            add_gat("gat_sem." + std::to_string(l));
        }
    }
    if (!cfg.flags.no_cross_attention) {
        for (const char* branch : {"xattn_syn", "xattn_sem"}) {
            add(std::string(branch) + ".Wq", d, d, Init::glorot);
            add(std::string(branch) + ".Wk", d, d, Init::glorot);
            add(std::string(branch) + ".Wv", d, d, Init::glorot);
        }
    }
    add("refine.in.W", 2 * d, d, Init::glorot);
    add("refine.in.b", 1, d, Init::zeros);
    if (!cfg.flags.no_transformer_refine) {
        for (std::size_t l = 0; l < cfg.refine_layers; ++l) {
            add_block("refine." + std::to_string(l), d);
        }
    }
    if (!cfg.flags.no_aspect_embedding) {
        add_gat("gat_aspect");
    }
    if (!cfg.flags.no_highway_gate) {
        add("highway.gate.W", 2 * d, 2 * d, Init::glorot);
        add("highway.gate.b", 1, 2 * d, Init::gate_bias);
        add("highway.transform.W", 2 * d, 2 * d, Init::glorot);
        add("highway.transform.b", 1, 2 * d, Init::zeros);
    }
    add("classifier.W", 2 * d, cfg.num_classes, Init::glorot);
    add("classifier.b", 1, cfg.num_classes, Init::zeros);
    return specs;
}

inline Matrix initial_value(const ParamSpec& spec, std::uint64_t seed)
{
    Matrix m(spec.rows, spec.cols);
    switch (spec.init) {
        case Init::zeros:
            break;
        case Init::ones:
            m.fill(1.0);
            break;
        case Init::gate_bias:
            m.fill(-1.0);
            break;
        case Init::glorot:
        case Init::embedding: {
            const double limit =
                spec.init == Init::glorot
                    ? std::sqrt(6.0 / static_cast<double>(spec.rows + spec.cols))
                    : std::sqrt(3.0 / static_cast<double>(spec.cols));
            Rng rng = Rng::derive(seed, spec.name);
            for (double& v : m.values()) {
                v = rng.uniform(-limit, limit);
            }
            break;
        }
    }
    return m;
}

// Named differentiable tensors. Lookups of tensors a configuration disabled
// fail loudly rather than silently allocating.
class ModelParams {
public:
    void insert(const std::string& name, Matrix value)
    {
        params_.insert_or_assign(name, num::parameter(std::move(value)));
    }

    bool contains(const std::string& name) const { return params_.count(name) > 0; }

    const Var& at(const std::string& name) const
    {
        auto it = params_.find(name);
        if (it == params_.end()) {
            throw ContractError("parameter '" + name + "' is not present in this model");
        }
        return it->second;
    }

    std::size_t size() const { return params_.size(); }

    std::size_t scalar_count() const
    {
        std::size_t n = 0;
        for (const auto& [_, v] : params_) {
            n += v.value().size();
        }
        return n;
    }

    // Sorted by name.
    std::vector<num::NamedVar> entries() const
    {
        std::vector<num::NamedVar> out;
        out.reserve(params_.size());
        for (const auto& [name, v] : params_) {
            out.push_back({name, v});
        }
        return out;
    }

    void zero_grad()
    {
        for (auto& [_, v] : params_) {
            v.zero_grad();
        }
    }

    // Deep copy of current values into fresh leaves.
    ModelParams clone() const
    {
        ModelParams out;
        for (const auto& [name, v] : params_) {
            out.insert(name, v.value());
        }
        return out;
    }

    void copy_values_from(const ModelParams& other)
    {
        for (auto& [name, v] : params_) {
            v.mutable_value() = other.at(name).value();
        }
    }

private:
    std::map<std::string, Var> params_;
};

// Each tensor draws from its own stream derived from (seed, name), so adding
// or removing a component never perturbs the others.
inline ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed)
{
    ModelParams params;
    for (const auto& spec : param_specs(cfg)) {
        params.insert(spec.name, initial_value(spec, seed));
    }
    return params;
}

// Checks names and shapes against the configuration.
inline void validate_params(const ModelParams& params, const ModelConfig& cfg)
{
    const auto specs = param_specs(cfg);
    for (const auto& spec : specs) {
        if (!params.contains(spec.name)) {
            throw ContractError("missing parameter '" + spec.name + "'");
        }
        const Matrix& v = params.at(spec.name).value();
        if (v.rows() != spec.rows || v.cols() != spec.cols) {
            throw DimensionError("parameter '" + spec.name + "' has shape " + v.shape() +
                                 ", config expects " + Matrix::shape_of(spec.rows, spec.cols));
        }
        if (!num::all_finite(v)) {
            throw NumericError("parameter '" + spec.name + "' holds non-finite values");
        }
    }
    if (params.size() != specs.size()) {
        throw ContractError("checkpoint holds " + std::to_string(params.size()) +
                            " tensors, config expects " + std::to_string(specs.size()));
    }
}

// ---------------------------------------------------------------------------
// Precomputed embeddings
// ---------------------------------------------------------------------------

// File lines: instance_id<TAB>position<TAB>space-separated reals.
class PrecomputedEmbeddings {
public:
    static PrecomputedEmbeddings parse(std::istream& in, std::string_view source = "<stream>")
    {
        PrecomputedEmbeddings out;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            if (line.empty() || line.front() == '#') {
                continue;
            }
            auto where = [&] { return std::string(source) + ":" + std::to_string(line_no); };
            auto t1 = line.find('\t');
            auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
            if (t2 == std::string::npos) {
                throw DataError(where() + ": expected id<TAB>position<TAB>vector");
            }
            std::string id = line.substr(0, t1);
            std::size_t pos = 0;
            try {
                std::size_t used = 0;
                pos = std::stoul(line.substr(t1 + 1, t2 - t1 - 1), &used);
                if (used != t2 - t1 - 1) {
                    throw std::invalid_argument("trailing");
                }
            } catch (const std::exception&) {
                throw DataError(where() + ": bad position");
            }
            std::istringstream values(line.substr(t2 + 1));
            std::vector<double> vec;
            double v = 0.0;
            while (values >> v) {
                vec.push_back(v);
            }
            if (!values.eof() || vec.empty()) {
                throw DataError(where() + ": bad vector");
            }
            if (out.dim_ == 0) {
                out.dim_ = vec.size();
            } else if (vec.size() != out.dim_) {
                throw DataError(where() + ": vector has " + std::to_string(vec.size()) +
                                " values, expected " + std::to_string(out.dim_));
            }
            out.vectors_[id][pos] = std::move(vec);
        }
        return out;
    }

    static PrecomputedEmbeddings load(const std::string& path)
    {
        std::ifstream in(path);
        if (!in) {
            throw IoError("cannot open embedding file " + path);
        }
        return parse(in, path);
    }

    std::size_t dim() const { return dim_; }

    // T x dim matrix over the encoded sequence; [PAD] rows are zero.
    Matrix matrix_for(const EncodedInstance& enc) const
    {
        auto it = vectors_.find(enc.instance_id);
        if (it == vectors_.end()) {
            throw DataError("no precomputed embeddings for instance '" + enc.instance_id + "'");
        }
        Matrix out(enc.length(), dim_);
        for (std::size_t p = 0; p < enc.length(); ++p) {
            if (!enc.pad_mask[p]) {
                continue;
            }
            auto v = it->second.find(p);
            if (v == it->second.end()) {
                throw DataError("precomputed embeddings for instance '" + enc.instance_id +
                                "' lack position " + std::to_string(p));
            }
            std::copy(v->second.begin(), v->second.end(), out.row(p).begin());
        }
        return out;
    }

private:
    std::size_t dim_ = 0;
    std::unordered_map<std::string, std::map<std::size_t, std::vector<double>>> vectors_;
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

inline Matrix sinusoidal_positions(std::size_t t, std::size_t dim)
{
    Matrix pe(t, dim);
    for (std::size_t pos = 0; pos < t; ++pos) {
        for (std::size_t i = 0; i < dim; ++i) {
            const double rate =
                std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
            const double angle = static_cast<double>(pos) / rate;
            pe(pos, i) = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    }
    return pe;
}

// Column mask admitting real-token keys for every query row.
inline Matrix key_mask(const std::vector<bool>& real)
{
    Matrix m(real.size(), real.size());
    for (std::size_t i = 0; i < real.size(); ++i) {
        for (std::size_t j = 0; j < real.size(); ++j) {
            m(i, j) = real[j] ? 1.0 : 0.0;
        }
    }
    return m;
}

inline Var dropout(const Var& x, double rate, Rng* rng)
{
    if (rng == nullptr || rate <= 0.0) {
        return x;
    }
    Matrix mask(x.rows(), x.cols());
    const double keep_scale = 1.0 / (1.0 - rate);
    for (double& v : mask.values()) {
        v = rng->uniform() < rate ? 0.0 : keep_scale;
    }
    return num::hadamard(x, num::constant(std::move(mask)));
}

struct GatOutput {
    Var h;
    Matrix attention;
};

// Graph attention over each node's neighbours: score every edge with a leaky
// relu of the projected source/destination halves, softmax per row, relu the
// weighted sum. A node with no neighbours gets a zero attention row and a zero output row.
inline GatOutput gat_layer(const Var& h, const AdjacencyMatrix& adj, const Var& w, const Var& a,
                           double slope)
{
    const std::size_t t = h.rows();
    if (adj.size() != t) {
        throw ContractError("gat_layer: adjacency of size " + std::to_string(adj.size()) +
                            " for " + std::to_string(t) + " nodes");
    }
    const std::size_t width = w.cols();
    if (a.rows() != 2 * width || a.cols() != 1) {
        throw DimensionError("gat_layer: attention vector " + a.value().shape() + " for width " +
                             std::to_string(width));
    }
    Var g = num::matmul(h, w);
    Var src = num::matmul(g, num::slice_rows(a, 0, width));
    Var dst = num::matmul(g, num::slice_rows(a, width, width));
    Var ones = num::constant(Matrix::ones(t, 1));
    Var scores = num::add(num::matmul(src, num::transpose(ones)),
                          num::matmul(ones, num::transpose(dst)));
    Matrix mask(t, t);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = adj.weights[i] > 0.0 ? 1.0 : 0.0;
    }
    Var weights = num::masked_softmax_rows(num::leaky_relu(scores, slope), mask);
    Var out = num::relu(num::matmul(weights, g));
    return {out, weights.value()};
}

struct AttentionOutput {
    Var c;
    Matrix attention;
};

// Scaled dot-product attention: queries from h, keys and values from the graph
// branch. Only real-token keys are attended.
inline AttentionOutput cross_attention(const Var& h, const Var& h_graph, const Var& wq,
                                       const Var& wk, const Var& wv,
                                       const std::vector<bool>& real = {})
{
    if (h.rows() != h_graph.rows()) {
        throw DimensionError("cross_attention: " + h.value().shape() + " vs " +
                             h_graph.value().shape());
    }
    std::vector<bool> mask_vec = real.empty() ? std::vector<bool>(h.rows(), true) : real;
    if (mask_vec.size() != h.rows()) {
        throw DimensionError("cross_attention: mask length mismatch");
    }
    Var q = num::matmul(h, wq);
    Var k = num::matmul(h_graph, wk);
    Var v = num::matmul(h_graph, wv);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(wq.cols()));
    Var scores = num::scale(num::matmul(q, num::transpose(k)), inv_sqrt_d);
    Var p = num::masked_softmax_rows(scores, key_mask(mask_vec));
    return {num::matmul(p, v), p.value()};
}

inline Var fuse(const Var& syn, const Var& sem)
{
    if (!syn.value().same_shape(sem.value())) {
        throw DimensionError("fuse: " + syn.value().shape() + " vs " + sem.value().shape());
    }
    return num::concat_cols({syn, sem});
}

struct BlockOutput {
    Var h;
    std::vector<Matrix> attention;  // one per head
};

// Post-norm transformer block: multi-head masked self-attention and a ReLU
// feed-forward, each wrapped in residual + layer norm. [PAD] rows are zeroed.
inline BlockOutput encoder_block(const Var& x, const ModelParams& p, const std::string& prefix,
                                 std::size_t heads, const std::vector<bool>& real,
                                 double dropout_rate, Rng* rng)
{
    const std::size_t width = x.cols();
    if (heads == 0 || width % heads != 0) {
        throw ConfigError("width " + std::to_string(width) + " is not divisible by " +
                          std::to_string(heads) + " heads");
    }
    const std::size_t dh = width / heads;
    Var q = num::matmul(x, p.at(prefix + ".Wq"));
    Var k = num::matmul(x, p.at(prefix + ".Wk"));
    Var v = num::matmul(x, p.at(prefix + ".Wv"));
    const Matrix mask = key_mask(real);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    BlockOutput out;
    std::vector<Var> head_out;
    for (std::size_t hd = 0; hd < heads; ++hd) {
        Var qh = heads == 1 ? q : num::slice_cols(q, hd * dh, dh);
        Var kh = heads == 1 ? k : num::slice_cols(k, hd * dh, dh);
        Var vh = heads == 1 ? v : num::slice_cols(v, hd * dh, dh);
        Var att = num::masked_softmax_rows(
            num::scale(num::matmul(qh, num::transpose(kh)), inv_sqrt), mask);
        out.attention.push_back(att.value());
        head_out.push_back(num::matmul(att, vh));
    }
    Var mixed = heads == 1 ? head_out.front() : num::concat_cols(head_out);
    Var attn = dropout(num::matmul(mixed, p.at(prefix + ".Wo")), dropout_rate, rng);
    Var h1 = num::add_row(num::mul_row(num::layer_norm_rows(num::add(x, attn)),
                                       p.at(prefix + ".ln1.g")),
                          p.at(prefix + ".ln1.b"));
    Var ff = num::relu(num::add_row(num::matmul(h1, p.at(prefix + ".ff1.W")),
                                    p.at(prefix + ".ff1.b")));
    ff = dropout(num::add_row(num::matmul(ff, p.at(prefix + ".ff2.W")), p.at(prefix + ".ff2.b")),
                 dropout_rate, rng);
    Var h2 = num::add_row(num::mul_row(num::layer_norm_rows(num::add(h1, ff)),
                                       p.at(prefix + ".ln2.g")),
                          p.at(prefix + ".ln2.b"));
    out.h = num::mask_rows(h2, real);
    return out;
}

struct HighwayOutput {
    Var z;
    Var gate;
};

// Sigmoid gate mixes a relu transform of x with x itself.
inline HighwayOutput highway_gate(const Var& x, const Var& gate_w, const Var& gate_b,
                                  const Var& transform_w, const Var& transform_b)
{
    Var gate = num::sigmoid(num::add_row(num::matmul(x, gate_w), gate_b));
    Var candidate = num::relu(num::add_row(num::matmul(x, transform_w), transform_b));
    Var carry = num::sub(num::constant(Matrix::ones(gate.rows(), gate.cols())), gate);
    Var z = num::add(num::hadamard(gate, candidate), num::hadamard(carry, x));
    return {z, gate};
}

// Mean over real-token rows.
inline Var masked_mean(const Var& h, const std::vector<bool>& real)
{
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < real.size(); ++i) {
        if (real[i]) {
            rows.push_back(i);
        }
    }
    if (rows.empty()) {
        throw EmptyInputError("masked_mean: no real tokens");
    }
    return num::mean_rows(num::gather_rows(h, std::move(rows)));
}

// Masked mean of the refined rows, joined with the aspect vector, then the gate.
inline HighwayOutput highway_fuse(const Var& h_refined, const std::vector<bool>& real,
                                  const Var& aspect_vector, const ModelParams& p)
{
    Var pooled = masked_mean(h_refined, real);
    Var joint = num::concat_cols({pooled, aspect_vector});
    return highway_gate(joint, p.at("highway.gate.W"), p.at("highway.gate.b"),
                        p.at("highway.transform.W"), p.at("highway.transform.b"));
}

struct AspectOutput {
    Var h_aspect;
    Var aspect_vector;
    Matrix attention;
};

inline AspectOutput aspect_extract(const Var& h_refined, const AdjacencyMatrix& a_aspect,
                                   const ModelParams& p, const EncodedInstance& enc,
                                   double slope)
{
    if (enc.aspect_positions.empty()) {
        throw ContractError("aspect_extract: empty aspect span in '" + enc.instance_id + "'");
    }
    auto g = gat_layer(h_refined, a_aspect, p.at("gat_aspect.W"), p.at("gat_aspect.a"), slope);
    Var z = num::mean_rows(num::gather_rows(g.h, enc.aspect_positions));
    return {g.h, z, std::move(g.attention)};
}

// Argmax; ties go to the lowest class index.
inline std::size_t predict(const Matrix& logits)
{
    if (logits.size() == 0) {
        throw EmptyInputError("predict: empty logits");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) {
            best = i;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Full pass
// ---------------------------------------------------------------------------

struct Adjacencies {
    AdjacencyMatrix syntactic;
    AdjacencyMatrix aspect;
    // Shared position-only graph used by both branches under fixed_adjacency.
    std::optional<AdjacencyMatrix> fixed;
    // When absent the semantic graph is built from H on every pass.
    std::optional<AdjacencyMatrix> semantic;
};

struct ForwardOptions {
    graph::GraphConfig graph;
    Rng* dropout_rng = nullptr;  // non-null enables dropout (training mode)
    const Matrix* precomputed = nullptr;  // T x embed_dim, precomputed embedding mode
};

struct ForwardTrace {
    Var h;
    Var h_syntax;
    Var h_semantic;
    std::vector<Matrix> gat_syntax_attention;   // one per GAT layer
    std::vector<Matrix> gat_semantic_attention;
    AdjacencyMatrix semantic_graph;
    Var cross_syn;
    Var cross_sem;
    Matrix cross_syn_attention;
    Matrix cross_sem_attention;
    Var h_cat;
    Var h_refined;
    std::vector<Matrix> encoder_attention;
    std::vector<Matrix> refine_attention;  // layer-major, then head
    Var h_aspect;
    Matrix gat_aspect_attention;
    Var aspect_vector;
    Var pooled;
    Var joint;
    Var gate;
    Var fused;
    Var logits;
};

// Contextual token matrix H (T x hidden_dim), [PAD] rows zero.
inline Var context_encode(const EncodedInstance& enc, const ModelParams& p,
                          const ModelConfig& cfg, const ForwardOptions& opt,
                          std::vector<Matrix>* attention_out = nullptr)
{
    const std::vector<bool>& real = enc.pad_mask;
    Var x;
    if (cfg.embedding_source == EmbeddingSource::trainable) {
        for (std::size_t id : enc.ids) {
            if (id >= cfg.vocab_size) {
                throw ContractError("token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(cfg.vocab_size) + " in '" + enc.instance_id +
                                    "'");
            }
        }
        Var e = num::gather_rows(p.at("embed.E"), enc.ids);
        e = num::add(e, num::constant(sinusoidal_positions(enc.length(), cfg.embed_dim)));
        auto block = encoder_block(e, p, "encoder", 1, real, cfg.dropout_rate, opt.dropout_rng);
        if (attention_out != nullptr) {
            *attention_out = std::move(block.attention);
        }
        x = block.h;
    } else {
        if (opt.precomputed == nullptr) {
            throw DataError("instance '" + enc.instance_id + "' has no precomputed embeddings");
        }
        if (opt.precomputed->rows() != enc.length() || opt.precomputed->cols() != cfg.embed_dim) {
            throw DimensionError("precomputed embeddings for '" + enc.instance_id + "' are " +
                                 opt.precomputed->shape() + ", expected " +
                                 Matrix::shape_of(enc.length(), cfg.embed_dim));
        }
        x = num::constant(*opt.precomputed);
    }
    Var h = num::add_row(num::matmul(x, p.at("encoder.proj.W")), p.at("encoder.proj.b"));
    h = dropout(h, cfg.dropout_rate, opt.dropout_rng);
    return num::mask_rows(h, real);
}

inline ForwardTrace forward(const EncodedInstance& enc, const ModelParams& p,
                            const ModelConfig& cfg, const Adjacencies& adj,
                            const ForwardOptions& opt = {})
{
    const std::size_t t = enc.length();
    const std::vector<bool>& real = enc.pad_mask;
    if (adj.syntactic.size() != t || adj.aspect.size() != t) {
        throw ContractError("forward: adjacency size does not match T = " + std::to_string(t) +
                            " for '" + enc.instance_id + "'");
    }
    const auto& flags = cfg.flags;
    ForwardTrace tr;
    tr.h = context_encode(enc, p, cfg, opt, &tr.encoder_attention);

    const AdjacencyMatrix* syn_graph = &adj.syntactic;
    const AdjacencyMatrix* sem_graph = nullptr;
    if (flags.fixed_adjacency) {
        if (!adj.fixed) {
            throw ContractError("fixed_adjacency is set but no fixed adjacency was supplied");
        }
        syn_graph = &*adj.fixed;
        sem_graph = &*adj.fixed;
    } else if (!flags.semantic_branch_off()) {
        if (adj.semantic) {
            sem_graph = &*adj.semantic;
        } else {
            std::size_t real_count = 0;
            for (bool r : real) {
                real_count += r ? 1 : 0;
            }
            const std::size_t k = std::min(opt.graph.top_k, real_count > 1 ? real_count - 1 : 1);
            tr.semantic_graph = graph::build_semantic(tr.h.value(), std::min(k, t - 1),
                                                      opt.graph.threshold, real);
            sem_graph = &tr.semantic_graph;
        }
    }
    if (sem_graph != nullptr && sem_graph != &tr.semantic_graph) {
        tr.semantic_graph = *sem_graph;
    }

    auto run_branch = [&](const std::string& prefix, const AdjacencyMatrix& a,
                          std::vector<Matrix>& attention_maps) {
        Var x = tr.h;
        for (std::size_t l = 0; l < cfg.gat_layers; ++l) {
            const std::string name = prefix + "." + std::to_string(l);
            auto g = gat_layer(x, a, p.at(name + ".W"), p.at(name + ".a"), cfg.leaky_slope);
            attention_maps.push_back(std::move(g.attention));
            x = num::mask_rows(g.h, real);
        }
        return x;
    };
    tr.h_syntax = flags.syntax_branch_off() ? tr.h : run_branch("gat_syn", *syn_graph, tr.gat_syntax_attention);
    tr.h_semantic =
        flags.semantic_branch_off() ? tr.h : run_branch("gat_sem", *sem_graph, tr.gat_semantic_attention);

    if (flags.no_cross_attention) {
        tr.h_cat = fuse(tr.h_syntax, tr.h_semantic);
    } else {
        auto cs = cross_attention(tr.h, tr.h_syntax, p.at("xattn_syn.Wq"), p.at("xattn_syn.Wk"),
                                  p.at("xattn_syn.Wv"), real);
        auto cm = cross_attention(tr.h, tr.h_semantic, p.at("xattn_sem.Wq"),
                                  p.at("xattn_sem.Wk"), p.at("xattn_sem.Wv"), real);
        tr.cross_syn = num::mask_rows(cs.c, real);
        tr.cross_sem = num::mask_rows(cm.c, real);
        tr.cross_syn_attention = std::move(cs.attention);
        tr.cross_sem_attention = std::move(cm.attention);
        tr.h_cat = fuse(tr.cross_syn, tr.cross_sem);
    }

    Var x = num::mask_rows(
        num::add_row(num::matmul(tr.h_cat, p.at("refine.in.W")), p.at("refine.in.b")), real);
    if (!flags.no_transformer_refine) {
        for (std::size_t l = 0; l < cfg.refine_layers; ++l) {
            auto block = encoder_block(x, p, "refine." + std::to_string(l), cfg.refine_heads,
                                       real, cfg.dropout_rate, opt.dropout_rng);
            for (auto& a : block.attention) {
                tr.refine_attention.push_back(std::move(a));
            }
            x = block.h;
        }
    }
    tr.h_refined = x;

    tr.pooled = masked_mean(tr.h_refined, real);
    if (flags.no_aspect_embedding) {
        tr.aspect_vector = tr.pooled;
    } else {
        auto asp = aspect_extract(tr.h_refined, adj.aspect, p, enc, cfg.leaky_slope);
        tr.h_aspect = asp.h_aspect;
        tr.aspect_vector = asp.aspect_vector;
        tr.gat_aspect_attention = std::move(asp.attention);
    }
    tr.joint = num::concat_cols({tr.pooled, tr.aspect_vector});
    if (flags.no_highway_gate) {
        tr.fused = tr.joint;
    } else {
        auto hw = highway_gate(tr.joint, p.at("highway.gate.W"), p.at("highway.gate.b"),
                               p.at("highway.transform.W"), p.at("highway.transform.b"));
        tr.fused = hw.z;
        tr.gate = hw.gate;
    }
    tr.logits = num::add_row(num::matmul(tr.fused, p.at("classifier.W")), p.at("classifier.b"));
    return tr;
}

// ---------------------------------------------------------------------------
// Instance preparation
// ---------------------------------------------------------------------------

struct PreparedInstance {
    corpus::Instance source;
    EncodedInstance encoded;  // [PAD] tail removed
    Adjacencies graphs;
    std::optional<Matrix> precomputed;
};

// Encodes, trims the padding and builds the instance-independent graphs.
// `edges` overrides the rule-based syntactic graph when given.
inline PreparedInstance prepare_instance(const corpus::Instance& inst, const corpus::Vocab& vocab,
                                         std::size_t max_length, const graph::GraphConfig& gcfg,
                                         const graph::SyntaxRuleSet& rules,
                                         const graph::EdgeList* edges = nullptr,
                                         const PrecomputedEmbeddings* embeddings = nullptr)
{
    PreparedInstance out;
    out.source = inst;
    out.encoded = corpus::encode(inst, vocab, max_length).trimmed();
    const auto& enc = out.encoded;
    if (edges != nullptr) {
        out.graphs.syntactic = graph::syntactic_from_edges(*edges, enc);
    } else {
        graph::SyntaxRuleSet r = rules;
        r.window_radius = gcfg.window_radius;
        out.graphs.syntactic =
            graph::build_syntactic(corpus::kept_sentence_tokens(inst, enc), enc, r);
    }
    out.graphs.aspect = gcfg.aspect_mode == graph::AspectGraphMode::proximity
                            ? graph::build_aspect(enc.length(), enc, gcfg.aspect_radius)
                            : graph::build_aspect_from_syntax(out.graphs.syntactic, enc);
    out.graphs.fixed = graph::fixed_band(enc, gcfg.fixed_radius);
    if (embeddings != nullptr) {
        out.precomputed = embeddings->matrix_for(enc);
    }
    return out;
}

inline ForwardTrace forward(const PreparedInstance& inst, const ModelParams& p,
                            const ModelConfig& cfg, const graph::GraphConfig& gcfg,
                            Rng* dropout_rng = nullptr)
{
    ForwardOptions opt;
    opt.graph = gcfg;
    opt.dropout_rng = dropout_rng;
    opt.precomputed = inst.precomputed ? &*inst.precomputed : nullptr;
    return forward(inst.encoded, p, cfg, inst.graphs, opt);
}

}  // namespace crosgrps::model
