// crosgrps command-line tool: train, eval, ablate, export-attention, graph-stats.
// Exit codes: 0 success, 1 contract/validation failure, 2 I/O failure.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "crosgrps/corpus.hpp"
#include "crosgrps/error.hpp"
#include "crosgrps/graphbuild.hpp"
#include "crosgrps/io.hpp"
#include "crosgrps/model.hpp"
#include "crosgrps/train.hpp"

namespace fs = std::filesystem;
using namespace crosgrps;
using io::json;

namespace {

constexpr const char* tool_version = CROSGRPS_VERSION;

std::string sha256_file(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw IoError("sha256 failed for " + path);
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xF];
    }
    return out;
}

std::string absolute(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

void ensure_dir(const std::string& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir);
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

struct DatasetFiles {
    std::string name;
    std::string dir;
    std::string train, validation, test;
};

// "Name=dir" or plain "dir" (name taken from the directory).
DatasetFiles dataset_files(const std::string& spec)
{
    DatasetFiles f;
    const auto eq = spec.find('=');
    f.dir = eq == std::string::npos ? spec : spec.substr(eq + 1);
    if (eq != std::string::npos) {
        f.name = spec.substr(0, eq);
    } else {
        fs::path p = fs::path(f.dir).lexically_normal();
        if (!p.has_filename()) p = p.parent_path();
        f.name = p.filename().string();
    }
    if (f.name.empty()) throw ConfigError("cannot derive a dataset name from '" + spec + "'");
    f.train = join(f.dir, "train.tsv");
    f.validation = join(f.dir, "validation.tsv");
    f.test = join(f.dir, "test.tsv");
    return f;
}

corpus::DatasetSplit load_split(const std::string& path, corpus::SplitName name)
{
    auto res = corpus::load_tabular(path, name);
    for (const auto& d : res.diagnostics) {
        std::cerr << "warning: " << path << ":" << d.line << ": " << d.message << " (row skipped)\n";
    }
    return std::move(res.split);
}

train::SplitSources load_sources(const DatasetFiles& f)
{
    return {load_split(f.train, corpus::SplitName::train), load_split(f.validation, corpus::SplitName::validation),
            load_split(f.test, corpus::SplitName::test)};
}

// Directory of `<instance id>.edges` files.
std::map<std::string, graph::EdgeList> load_edges_dir(const std::string& dir)
{
    if (!fs::is_directory(dir)) throw IoError("syntax edge directory not found: " + dir);
    std::map<std::string, graph::EdgeList> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() != ".edges") continue;
        out.emplace(entry.path().stem().string(), graph::load_edge_list(entry.path().string()));
    }
    return out;
}

json edges_digest(const std::string& dir)
{
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() == ".edges") files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    json out = json::object();
    for (const auto& f : files) out[fs::path(f).filename().string()] = sha256_file(f);
    return out;
}

json file_entry(const std::string& path) { return json{{"path", absolute(path)}, {"sha256", sha256_file(path)}}; }

struct ExtraInputs {
    std::string embeddings;
    std::string syntax_edges;
    std::optional<model::PrecomputedEmbeddings> emb;
    std::map<std::string, graph::EdgeList> edges;

    void load()
    {
        if (!embeddings.empty()) emb = model::PrecomputedEmbeddings::load(embeddings);
        if (!syntax_edges.empty()) edges = load_edges_dir(syntax_edges);
    }

    train::PrepareOptions options() const
    {
        train::PrepareOptions opt;
        if (!syntax_edges.empty()) opt.edges = &edges;
        if (emb) opt.embeddings = &*emb;
        return opt;
    }

    // Precomputed vectors switch the model to the projection-only encoder.
    void apply_to(model::ModelConfig& cfg) const
    {
        if (emb) {
            cfg.embedding_source = model::EmbeddingSource::precomputed;
            cfg.embed_dim = emb->dim();
        } else if (cfg.embedding_source == model::EmbeddingSource::precomputed) {
            throw ConfigError("config selects precomputed embeddings but --embeddings was not given");
        }
    }
};

io::RunConfig resolve_config(const std::string& path, std::optional<std::uint64_t> seed,
                             std::optional<std::size_t> epochs)
{
    io::RunConfig rc = path.empty() ? io::RunConfig{} : io::load_config(path);
    if (seed) rc.train.seed = *seed;
    if (epochs) rc.train.epochs = *epochs;
    rc.train.validate();
    return rc;
}

std::string summary(const train::EvalMetrics& m)
{
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(4);
    out << "accuracy " << m.accuracy << "  micro-F1 " << m.micro_f1 << "  macro-F1 " << m.macro_f1 << "  (n="
        << m.count << ")";
    return out.str();
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config, data, out, manifest, embeddings, syntax_edges;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
};

int cmd_train(const TrainArgs& a)
{
    io::RunConfig rc;
    DatasetFiles files;
    ExtraInputs extra;
    json replay;
    if (!a.manifest.empty()) {
        if (!a.config.empty() || !a.data.empty() || a.seed || a.epochs || !a.embeddings.empty() ||
            !a.syntax_edges.empty()) {
            throw ConfigError("--manifest replays a recorded run and cannot be combined with other inputs");
        }
        replay = io::read_json_file(a.manifest);
        try {
            rc = io::parse_config(replay.at("config"));
            const auto& in = replay.at("inputs");
            files.name = replay.at("dataset").get<std::string>();
            files.train = in.at("train").at("path").get<std::string>();
            files.validation = in.at("validation").at("path").get<std::string>();
            files.test = in.at("test").at("path").get<std::string>();
            if (in.contains("embeddings")) extra.embeddings = in.at("embeddings").at("path").get<std::string>();
            if (in.contains("syntax_edges")) extra.syntax_edges = in.at("syntax_edges").at("path").get<std::string>();
        } catch (const json::exception& e) {
            throw ContractError(a.manifest + ": malformed manifest: " + e.what());
        }
    } else {
        if (a.data.empty()) throw ConfigError("train needs --data <dir> or --manifest <path>");
        rc = resolve_config(a.config, a.seed, a.epochs);
        files = dataset_files(a.data);
        extra.embeddings = a.embeddings;
        extra.syntax_edges = a.syntax_edges;
    }

    auto sources = load_sources(files);
    extra.load();
    const auto vocab = corpus::build_vocab(sources.train, rc.train.min_freq);
    rc.model.vocab_size = vocab.size();
    extra.apply_to(rc.model);
    rc.model.normalize();
    rc.validate();

    json inputs{{"train", file_entry(files.train)},
                {"validation", file_entry(files.validation)},
                {"test", file_entry(files.test)}};
    if (!extra.embeddings.empty()) inputs["embeddings"] = file_entry(extra.embeddings);
    if (!extra.syntax_edges.empty()) {
        inputs["syntax_edges"] = json{{"path", absolute(extra.syntax_edges)}, {"files", edges_digest(extra.syntax_edges)}};
    }
    if (!replay.is_null()) {
        if (inputs != replay.at("inputs")) {
            throw ContractError("input files changed since the manifest was written (digest mismatch)");
        }
        if (io::to_json(rc) != replay.at("config")) {
            throw ContractError("resolved config differs from the manifest");
        }
    }

    ensure_dir(a.out);
    const std::string manifest_path = join(a.out, "manifest.json");
    const std::string checkpoint_path = join(a.out, "checkpoint.json");
    const std::string metrics_path = join(a.out, "metrics.json");
    const json manifest{{"tool", "crosgrps"},
                        {"version", tool_version},
                        {"command", "train"},
                        {"dataset", files.name},
                        {"seed", rc.train.seed},
                        {"config", io::to_json(rc)},
                        {"inputs", inputs},
                        {"artifacts",
                         {{"checkpoint", absolute(checkpoint_path)}, {"metrics", absolute(metrics_path)}}}};
    io::write_text_file(manifest_path, io::dump(manifest));

    const auto splits = train::prepare_splits(sources, vocab, rc.train.max_length, rc.graph, extra.options());
    auto params = model::init_params(rc.model, rc.train.seed);
    auto result = train::train(rc.model, std::move(params), splits, rc.train, rc.graph, [](const train::EpochRecord& r) {
        std::cerr << "epoch " << r.epoch << "  loss " << r.train_loss << "  validation " << summary(r.validation)
                  << "\n";
    });

    io::write_text_file(checkpoint_path, io::dump(io::checkpoint_json(rc, vocab, result.best)));
    io::write_text_file(metrics_path, io::dump(io::to_json(result.metrics)));
    std::cout << "best epoch " << result.metrics.best_epoch << "\n";
    if (result.metrics.test.count > 0) std::cout << "test " << summary(result.metrics.test) << "\n";
    std::cout << "wrote " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Checkpoint-based commands
// ---------------------------------------------------------------------------

io::Checkpoint open_checkpoint(const std::string& path, const std::string& config_path, const ExtraInputs& extra)
{
    if (path.empty()) throw ConfigError("--checkpoint is required");
    if (config_path.empty()) {
        auto ck = io::load_checkpoint(path);
        if (ck.config.model.embedding_source == model::EmbeddingSource::precomputed && !extra.emb) {
            throw ConfigError("checkpoint uses precomputed embeddings; pass --embeddings");
        }
        return ck;
    }
    // The config's model section must describe the stored tensors.
    io::RunConfig rc = io::load_config(config_path);
    extra.apply_to(rc.model);
    return io::load_checkpoint(path, &rc.model);
}

struct EvalArgs {
    std::string config, data, input, out, checkpoint, embeddings, syntax_edges;
};

int cmd_eval(const EvalArgs& a)
{
    ExtraInputs extra{a.embeddings, a.syntax_edges, {}, {}};
    extra.load();
    auto ck = open_checkpoint(a.checkpoint, a.config, extra);
    std::string path = a.input;
    if (path.empty()) {
        if (a.data.empty()) throw ConfigError("eval needs --data <dir> or --input <file>");
        path = dataset_files(a.data).test;
    }
    auto split = load_split(path, corpus::SplitName::test);
    if (split.empty()) throw EmptyInputError("empty split: " + path);
    auto prepared = train::prepare_split(split, ck.vocab, ck.config.train.max_length, ck.config.graph, extra.options());
    auto metrics = train::evaluate(prepared, ck.params, ck.config.model, ck.config.graph);
    const std::string text = io::dump(io::to_json(metrics));
    if (!a.out.empty()) {
        ensure_dir(a.out);
        io::write_text_file(join(a.out, "eval.json"), text);
    }
    std::cerr << summary(metrics) << "\n";
    std::cout << text;
    return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateArgs {
    std::string config, out;
    std::vector<std::string> data, only;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
};

int cmd_ablate(const AblateArgs& a)
{
    if (a.data.empty()) throw ConfigError("ablate needs at least one --data <dir>");
    io::RunConfig rc = resolve_config(a.config, a.seed, a.epochs);
    if (rc.model.embedding_source != model::EmbeddingSource::trainable) {
        throw ConfigError("ablate runs with trainable embeddings only");
    }
    if (rc.model.flags != model::AblationFlags{}) {
        throw ConfigError("ablate config must not set ablation flags");
    }

    struct Loaded {
        DatasetFiles files;
        train::PreparedSplits splits;
        std::size_t vocab_size = 0;
    };
    std::vector<Loaded> loaded;
    json inputs = json::object();
    for (const auto& spec : a.data) {
        Loaded l;
        l.files = dataset_files(spec);
        auto sources = load_sources(l.files);
        auto vocab = corpus::build_vocab(sources.train, rc.train.min_freq);
        l.vocab_size = vocab.size();
        l.splits = train::prepare_splits(sources, vocab, rc.train.max_length, rc.graph);
        if (inputs.contains(l.files.name)) throw ConfigError("dataset name '" + l.files.name + "' given twice");
        inputs[l.files.name] = json{{"train", file_entry(l.files.train)},
                                    {"validation", file_entry(l.files.validation)},
                                    {"test", file_entry(l.files.test)}};
        loaded.push_back(std::move(l));
    }
    std::vector<train::AblationDataset> datasets;
    for (const auto& l : loaded) datasets.push_back({l.files.name, &l.splits, l.vocab_size});

    {
        model::ModelConfig probe = rc.model;
        probe.vocab_size = std::max(probe.vocab_size, loaded.front().vocab_size);
        probe.validate();
    }

    ensure_dir(a.out);
    const std::string csv_path = join(a.out, "ablation.csv");
    const std::string json_path = join(a.out, "ablation.json");
    const json manifest{{"tool", "crosgrps"},
                        {"version", tool_version},
                        {"command", "ablate"},
                        {"seed", rc.train.seed},
                        {"config", io::to_json(rc)},
                        {"only", a.only},
                        {"inputs", inputs},
                        {"artifacts", {{"csv", absolute(csv_path)}, {"json", absolute(json_path)}}}};
    io::write_text_file(join(a.out, "manifest.json"), io::dump(manifest));

    auto table = train::run_ablation(rc.model, rc.train, rc.graph, datasets, a.only);
    io::write_text_file(csv_path, io::ablation_csv(table));
    io::write_text_file(json_path, io::dump(io::to_json(table)));
    std::cout << io::ablation_csv(table);
    return 0;
}

// ---------------------------------------------------------------------------
// export-attention
// ---------------------------------------------------------------------------

struct ExportArgs {
    std::string checkpoint, config, data, id, text, out, embeddings, syntax_edges;
    std::optional<std::size_t> aspect_start, aspect_end;
};

corpus::Instance find_instance(const DatasetFiles& f, const std::string& id)
{
    const std::vector<std::pair<std::string, corpus::SplitName>> order = {
        {f.test, corpus::SplitName::test},
        {f.validation, corpus::SplitName::validation},
        {f.train, corpus::SplitName::train}};
    for (const auto& [path, name] : order) {
        if (!fs::exists(path)) continue;
        auto split = load_split(path, name);
        for (const auto& inst : split.instances) {
            if (inst.id == id) return inst;
        }
    }
    throw DataError("unknown instance id '" + id + "' in " + f.dir);
}

// Header labels: the original token strings in encoded order.
std::vector<std::string> position_labels(const corpus::Instance& inst, const corpus::EncodedInstance& enc)
{
    std::vector<std::string> labels(enc.length());
    labels[0] = "[CLS]";
    const auto kept = corpus::kept_sentence_tokens(inst, enc);
    for (std::size_t i = 0; i < kept.size(); ++i) labels[enc.sentence_region.start + i] = kept[i];
    labels[enc.sentence_region.end] = "[SEP]";
    for (std::size_t i = 0; i < enc.aspect_tail.size(); ++i) {
        labels[enc.aspect_tail.start + i] = inst.tokens[inst.aspect.start + i];
    }
    labels[enc.aspect_tail.end] = "[SEP]";
    return labels;
}

void write_matrix(const std::string& path, const num::Matrix& m, const std::vector<std::string>& labels)
{
    std::ostringstream out;
    graph::write_matrix_csv(out, m, labels);
    io::write_text_file(path, out.str());
}

int cmd_export(const ExportArgs& a)
{
    ExtraInputs extra{a.embeddings, a.syntax_edges, {}, {}};
    extra.load();
    auto ck = open_checkpoint(a.checkpoint, a.config, extra);
    const auto& cfg = ck.config;
    if (cfg.model.flags.no_cross_attention) {
        throw ContractError("checkpoint was trained without cross-attention; nothing to export");
    }

    corpus::Instance inst;
    if (!a.id.empty()) {
        if (a.data.empty()) throw ConfigError("--id needs --data <dir>");
        inst = find_instance(dataset_files(a.data), a.id);
    } else if (!a.text.empty()) {
        if (!a.aspect_start || !a.aspect_end) throw ConfigError("inline text needs --aspect-start and --aspect-end");
        inst.id = "inline";
        inst.tokens = corpus::tokenize(a.text);
        inst.aspect = {*a.aspect_start, *a.aspect_end};
        inst.polarity = corpus::Polarity::neutral;  // unused for export
        corpus::validate(inst);
    } else {
        throw ConfigError("export-attention needs --id or --text");
    }

    const graph::EdgeList* edges = nullptr;
    if (auto it = extra.edges.find(inst.id); it != extra.edges.end()) edges = &it->second;
    auto prepared = model::prepare_instance(inst, ck.vocab, cfg.train.max_length, cfg.graph,
                                            graph::SyntaxRuleSet::defaults(), edges, extra.emb ? &*extra.emb : nullptr);
    auto tr = model::forward(prepared, ck.params, cfg.model, cfg.graph);
    const auto& enc = prepared.encoded;
    const auto labels = position_labels(inst, enc);

    ensure_dir(a.out);
    std::vector<const num::Matrix*> cross;
    if (!cfg.model.flags.syntax_branch_off()) {
        write_matrix(join(a.out, "cross_attention_syntax.csv"), tr.cross_syn_attention, labels);
        cross.push_back(&tr.cross_syn_attention);
        for (std::size_t l = 0; l < tr.gat_syntax_attention.size(); ++l) {
            write_matrix(join(a.out, "gat_syntax_layer" + std::to_string(l + 1) + ".csv"), tr.gat_syntax_attention[l], labels);
        }
    }
    if (!cfg.model.flags.semantic_branch_off()) {
        write_matrix(join(a.out, "cross_attention_semantic.csv"), tr.cross_sem_attention, labels);
        cross.push_back(&tr.cross_sem_attention);
        for (std::size_t l = 0; l < tr.gat_semantic_attention.size(); ++l) {
            write_matrix(join(a.out, "gat_semantic_layer" + std::to_string(l + 1) + ".csv"), tr.gat_semantic_attention[l],
                         labels);
        }
    }
    if (!cfg.model.flags.no_aspect_embedding) write_matrix(join(a.out, "gat_aspect.csv"), tr.gat_aspect_attention, labels);
    if (cross.empty()) throw ContractError("no cross-attention matrices in this configuration");

    // Column means over real query rows, averaged across branches, then
    // restricted to sentence tokens and renormalized.
    const auto& region = enc.sentence_region;
    std::vector<double> score(region.size(), 0.0);
    const double rows = static_cast<double>(enc.real_length());
    for (const auto* m : cross) {
        for (std::size_t j = region.start; j < region.end; ++j) {
            double col = 0.0;
            for (std::size_t i = 0; i < enc.length(); ++i) {
                if (enc.pad_mask[i]) col += (*m)(i, j);
            }
            score[j - region.start] += col / rows / static_cast<double>(cross.size());
        }
    }
    double total = 0.0;
    for (double s : score) total += s;
    std::ostringstream imp;
    imp << "token,score\n";
    for (std::size_t k = 0; k < score.size(); ++k) {
        imp << graph::csv_escape(labels[region.start + k]) << ',' << graph::format_real(total > 0 ? score[k] / total : 0.0)
            << '\n';
    }
    io::write_text_file(join(a.out, "token_importance.csv"), imp.str());

    const auto& z = tr.logits.value();
    const std::size_t pred = model::predict(z);
    json info{{"id", inst.id},
              {"tokens", labels},
              {"aspect_positions", enc.aspect_positions},
              {"logits", z.values()},
              {"predicted", corpus::to_string(static_cast<corpus::Polarity>(pred))}};
    if (!a.id.empty()) info["gold"] = corpus::to_string(inst.polarity);
    io::write_text_file(join(a.out, "prediction.json"), io::dump(info));
    std::cout << "predicted " << info["predicted"].get<std::string>() << "; wrote " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// graph-stats
// ---------------------------------------------------------------------------

struct StatsArgs {
    std::string checkpoint, config, embeddings, syntax_edges, out;
    std::vector<std::string> data;
};

int cmd_graph_stats(const StatsArgs& a)
{
    if (a.data.empty()) throw ConfigError("graph-stats needs at least one --data <dir>");
    if (a.checkpoint.empty() && a.embeddings.empty()) {
        throw ConfigError("graph-stats needs --checkpoint or --embeddings for the semantic distances");
    }
    ExtraInputs extra{a.embeddings, a.syntax_edges, {}, {}};
    extra.load();
    std::optional<io::Checkpoint> ck;
    io::RunConfig rc;
    corpus::Vocab vocab;
    if (!a.checkpoint.empty()) {
        ck = open_checkpoint(a.checkpoint, a.config, extra);
        rc = ck->config;
        vocab = ck->vocab;
    } else if (!a.config.empty()) {
        rc = io::load_config(a.config);
    }
    graph::SyntaxRuleSet rules = graph::SyntaxRuleSet::defaults();
    rules.window_radius = rc.graph.window_radius;

    std::ostringstream csv;
    csv << "dataset,syntactic,semantic\n";
    json report = json::array();
    for (const auto& spec : a.data) {
        const auto files = dataset_files(spec);
        auto sources = load_sources(files);
        double syn_sum = 0.0, sem_sum = 0.0, cov_sum = 0.0;
        std::size_t used = 0, skipped = 0;
        for (const auto* split : {&sources.train, &sources.validation, &sources.test}) {
            for (const auto& inst : split->instances) {
                const graph::EdgeList* edges = nullptr;
                if (auto it = extra.edges.find(inst.id); it != extra.edges.end()) edges = &it->second;
                auto prepared = model::prepare_instance(inst, vocab, rc.train.max_length, rc.graph, rules, edges,
                                                        extra.emb ? &*extra.emb : nullptr);
                num::Matrix h;
                if (ck) {
                    model::ForwardOptions opt;
                    opt.graph = rc.graph;
                    opt.precomputed = prepared.precomputed ? &*prepared.precomputed : nullptr;
                    h = model::context_encode(prepared.encoded, ck->params, rc.model, opt).value();
                } else {
                    h = *prepared.precomputed;
                }
                auto st = graph::graph_stats(prepared.graphs.syntactic, graph::cosine_matrix(h), prepared.encoded);
                if (st.pair_count == 0) {
                    ++skipped;
                    continue;
                }
                syn_sum += st.mean_syntactic_distance;
                sem_sum += st.mean_semantic_distance;
                cov_sum += st.coverage;
                ++used;
            }
        }
        if (used == 0) throw EmptyInputError("no instance in " + files.dir + " has a reachable aspect pair");
        const double n = static_cast<double>(used);
        csv << graph::csv_escape(files.name) << ',' << graph::format_real(syn_sum / n) << ','
            << graph::format_real(sem_sum / n) << '\n';
        report.push_back(json{{"dataset", files.name},
                              {"syntactic", syn_sum / n},
                              {"semantic", sem_sum / n},
                              {"mean_coverage", cov_sum / n},
                              {"instances", used},
                              {"skipped_no_pairs", skipped}});
    }
    if (!a.out.empty()) {
        ensure_dir(a.out);
        io::write_text_file(join(a.out, "graph_stats.csv"), csv.str());
        io::write_text_file(join(a.out, "graph_stats.json"), io::dump(report));
    }
    std::cout << csv.str();
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Aspect-level sentiment with cross-attended syntactic and semantic graphs"};
    app.set_version_flag("--version", std::string(tool_version));
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a model and write manifest, checkpoint and metrics");
    train_cmd->add_option("--config", ta.config, "JSON config file");
    train_cmd->add_option("--data", ta.data, "dataset directory with train/validation/test .tsv");
    train_cmd->add_option("--out", ta.out, "output directory")->required();
    train_cmd->add_option("--seed", ta.seed, "override train.seed");
    train_cmd->add_option("--epochs", ta.epochs, "override train.epochs");
    train_cmd->add_option("--manifest", ta.manifest, "replay the run recorded in a manifest");
    train_cmd->add_option("--embeddings", ta.embeddings, "precomputed contextual embeddings file");
    train_cmd->add_option("--syntax-edges", ta.syntax_edges, "directory of <id>.edges files");

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a test split");
    eval_cmd->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--config", ea.config, "config whose model section must match the checkpoint");
    eval_cmd->add_option("--data", ea.data, "dataset directory (test.tsv is used)");
    eval_cmd->add_option("--input", ea.input, "explicit .tsv file to evaluate");
    eval_cmd->add_option("--out", ea.out, "directory for eval.json");
    eval_cmd->add_option("--embeddings", ea.embeddings, "precomputed contextual embeddings file");
    eval_cmd->add_option("--syntax-edges", ea.syntax_edges, "directory of <id>.edges files");

    AblateArgs aa;
    auto* ablate_cmd = app.add_subcommand("ablate", "train one model per ablation setting");
    ablate_cmd->add_option("--config", aa.config, "JSON config file");
    ablate_cmd->add_option("--data", aa.data, "dataset directory, optionally Name=dir (repeatable)")->required();
    ablate_cmd->add_option("--out", aa.out, "output directory")->required();
    ablate_cmd->add_option("--seed", aa.seed, "override train.seed");
    ablate_cmd->add_option("--epochs", aa.epochs, "override train.epochs");
    ablate_cmd->add_option("--only", aa.only, "keep only these flags plus the base row (repeatable)");

    ExportArgs xa;
    auto* export_cmd = app.add_subcommand("export-attention", "write attention matrices and token importance");
    export_cmd->add_option("--checkpoint", xa.checkpoint, "checkpoint file")->required();
    export_cmd->add_option("--config", xa.config, "config whose model section must match the checkpoint");
    export_cmd->add_option("--data", xa.data, "dataset directory searched for --id");
    export_cmd->add_option("--id", xa.id, "instance id");
    export_cmd->add_option("--text", xa.text, "inline sentence");
    export_cmd->add_option("--aspect-start", xa.aspect_start, "first aspect token index of --text");
    export_cmd->add_option("--aspect-end", xa.aspect_end, "one past the last aspect token index");
    export_cmd->add_option("--out", xa.out, "output directory")->required();
    export_cmd->add_option("--embeddings", xa.embeddings, "precomputed contextual embeddings file");
    export_cmd->add_option("--syntax-edges", xa.syntax_edges, "directory of <id>.edges files");

    StatsArgs sa;
    auto* stats_cmd = app.add_subcommand("graph-stats", "mean syntactic and semantic aspect distances");
    stats_cmd->add_option("--data", sa.data, "dataset directory, optionally Name=dir (repeatable)")->required();
    stats_cmd->add_option("--checkpoint", sa.checkpoint, "checkpoint providing contextual embeddings");
    stats_cmd->add_option("--config", sa.config, "JSON config file");
    stats_cmd->add_option("--embeddings", sa.embeddings, "precomputed contextual embeddings file");
    stats_cmd->add_option("--syntax-edges", sa.syntax_edges, "directory of <id>.edges files");
    stats_cmd->add_option("--out", sa.out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*train_cmd) return cmd_train(ta);
        if (*eval_cmd) return cmd_eval(ea);
        if (*ablate_cmd) return cmd_ablate(aa);
        if (*export_cmd) return cmd_export(xa);
        if (*stats_cmd) return cmd_graph_stats(sa);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
