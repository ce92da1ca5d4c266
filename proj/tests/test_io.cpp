#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "crosgrps/io.hpp"
#include "fixtures.hpp"

using namespace crosgrps;
using io::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    fs::path dir = fs::temp_directory_path() / "crosgrps_test_io";
    fs::create_directories(dir);
    return dir / name;
}

io::RunConfig small_run(std::size_t vocab_size)
{
    io::RunConfig rc;
    rc.model = fixture::small_config(vocab_size, 8);
    rc.graph = fixture::small_graph_config();
    return rc;
}

}  // namespace

TEST(Config, RoundTrip)
{
    io::RunConfig rc = small_run(20);
    rc.model.flags.no_highway_gate = true;
    rc.train.optimizer = train::Optimizer::adam;
    rc.train.class_weighting = train::ClassWeighting::none;
    rc.graph.aspect_mode = graph::AspectGraphMode::syntax;
    const json j = io::to_json(rc);
    const io::RunConfig back = io::parse_config(j);
    EXPECT_EQ(io::dump(io::to_json(back)), io::dump(j));
    EXPECT_TRUE(back.model.flags.no_highway_gate);
}

TEST(Config, PartialUsesDefaults)
{
    auto rc = io::parse_config(json::parse(R"({"train": {"epochs": 3}})"));
    EXPECT_EQ(rc.train.epochs, 3u);
    EXPECT_EQ(rc.train.learning_rate, 2e-5);
    EXPECT_EQ(rc.model.hidden_dim, model::ModelConfig{}.hidden_dim);
}

TEST(Config, UnknownKeysAndBadValuesRejected)
{
    EXPECT_THROW(io::parse_config(json::parse(R"({"modle": {}})")), ConfigError);
    EXPECT_THROW(io::parse_config(json::parse(R"({"train": {"epoch": 3}})")), ConfigError);
    EXPECT_THROW(io::parse_config(json::parse(R"({"model": {"ablation": {"no_graphs": true}}})")), ConfigError);
    EXPECT_THROW(io::parse_config(json::parse(R"({"train": {"epochs": -1}})")), ConfigError);
    EXPECT_THROW(io::parse_config(json::parse(R"({"train": {"optimizer": "sgd"}})")), ConfigError);
    EXPECT_THROW(io::parse_config(json::parse(R"({"model": {"hidden_dim": 30, "refine_heads": 4}})")),
                 ConfigError);
}

TEST(Config, MissingFileIsIoError)
{
    EXPECT_THROW(io::load_config("/nonexistent/config.json"), IoError);
    auto p = scratch("broken.json");
    io::write_text_file(p.string(), "{ not json");
    EXPECT_THROW(io::load_config(p.string()), ConfigError);
}

TEST(Config, SampleConfigParses)
{
    EXPECT_NO_THROW(io::load_config(std::string(CROSGRPS_SAMPLES_DIR) + "/config.json"));
}

TEST(Checkpoint, RoundTripIsExact)
{
    auto vocab = fixture::full_vocab();
    auto rc = small_run(vocab.size());
    auto params = model::init_params(rc.model, 5);
    auto p = scratch("ck.json");
    io::write_text_file(p.string(), io::dump(io::checkpoint_json(rc, vocab, params)));
    auto ck = io::load_checkpoint(p.string());
    EXPECT_EQ(ck.vocab.tokens(), vocab.tokens());
    ASSERT_EQ(ck.params.size(), params.size());
    for (const auto& e : params.entries()) EXPECT_EQ(ck.params.at(e.name).value(), e.var.value()) << e.name;

    Rng rng(3);
    auto inst = fixture::prepare(fixture::random_instance(rng, "c", 6, 1), vocab, 32, rc.graph);
    EXPECT_EQ(model::forward(inst, params, rc.model, rc.graph).logits.value(),
              model::forward(inst, ck.params, ck.config.model, ck.config.graph).logits.value());
}

TEST(Checkpoint, ShapeMismatchAgainstConfig)
{
    auto vocab = fixture::full_vocab();
    auto rc = small_run(vocab.size());
    auto j = io::checkpoint_json(rc, vocab, model::init_params(rc.model, 5));
    model::ModelConfig other = rc.model;
    other.hidden_dim = 12;
    other.refine_heads = 4;
    EXPECT_THROW(io::parse_checkpoint(j, &other), DimensionError);
    auto p = scratch("shape.json");
    io::write_text_file(p.string(), io::dump(j));
    try {
        io::load_checkpoint(p.string(), &other);
        FAIL() << "expected ContractError";
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find("encoder.proj.W"), std::string::npos) << e.what();
    }

    auto truncated = j;
    truncated["params"]["classifier.b"]["values"].erase(0);
    EXPECT_THROW(io::parse_checkpoint(truncated), DimensionError);

    auto missing = j;
    missing["params"].erase("highway.gate.W");
    EXPECT_THROW(io::parse_checkpoint(missing), ContractError);
}

TEST(Checkpoint, CorruptedOrForeignFiles)
{
    auto p = scratch("corrupt.json");
    io::write_text_file(p.string(), "{\"format\": \"crosgrps-checkpoint\", \"version\": 1, \"config\"");
    EXPECT_THROW(io::load_checkpoint(p.string()), ContractError);
    io::write_text_file(p.string(), "{\"hello\": 1}");
    EXPECT_THROW(io::load_checkpoint(p.string()), ContractError);
    EXPECT_THROW(io::load_checkpoint("/nonexistent/ck.json"), IoError);

    auto vocab = fixture::full_vocab();
    auto rc = small_run(vocab.size());
    auto j = io::checkpoint_json(rc, vocab, model::init_params(rc.model, 5));
    j["params"]["classifier.b"]["values"][0] = "nan";
    io::write_text_file(p.string(), io::dump(j));
    EXPECT_THROW(io::load_checkpoint(p.string()), ContractError);
}

TEST(MetricsJson, StableAndComplete)
{
    auto m = train::compute_metrics({0, 1, 2, 1}, {0, 1, 1, 1});
    const auto a = io::dump(io::to_json(m)), b = io::dump(io::to_json(m));
    EXPECT_EQ(a, b);
    auto j = io::to_json(m);
    EXPECT_EQ(j["confusion"]["rows_are"], "gold");
    EXPECT_EQ(j["confusion"]["matrix"][2][1], 1);
    EXPECT_EQ(j["count"], 4);
    EXPECT_TRUE(j["per_class_f1"].contains("neutral"));
    // Keys keep insertion order rather than alphabetical order.
    EXPECT_EQ(j.begin().key(), "count");
}

TEST(AblationCsv, HeaderAndPercentages)
{
    train::AblationTable t;
    t.datasets = {"Car", "Movie"};
    train::AblationRow row{"No Transformer", "no_transformer_refine", {}};
    train::EvalMetrics m;
    m.accuracy = 0.91234;
    m.micro_f1 = 0.91234;
    m.macro_f1 = 0.5;
    row.cells = {{"Car", m, 3}, {"Movie", m, 4}};
    t.rows.push_back(row);
    const std::string csv = io::ablation_csv(t);
    EXPECT_EQ(csv,
              "Settings,Car Acc,Car F1,Car Macro-F1,Movie Acc,Movie F1,Movie Macro-F1\n"
              "No Transformer,91.23,91.23,50.00,91.23,91.23,50.00\n");
    auto j = io::to_json(t);
    EXPECT_EQ(j["rows"][0]["datasets"]["Movie"]["best_epoch"], 4);
    EXPECT_EQ(j["rows"][0]["flag"], "no_transformer_refine");
}
