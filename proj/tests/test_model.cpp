#include <sstream>

#include <gtest/gtest.h>

#include "crosgrps/model.hpp"
#include "crosgrps/train.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace crosgrps;
using namespace crosgrps::model;
using num::Matrix;
using num::Var;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0)
{
    Matrix m(r, c);
    for (double& v : m.values()) v = rng.uniform(-scale, scale);
    return m;
}

std::vector<double> row_vec(const Matrix& m)
{
    return {m.values().begin(), m.values().end()};
}

bool rows_sum_to_one_or_zero(const Matrix& p, double tol)
{
    for (std::size_t i = 0; i < p.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < p.cols(); ++j) s += p(i, j);
        if (std::abs(s - 1.0) > tol && s != 0.0) return false;
    }
    return true;
}

struct Scene {
    corpus::Vocab vocab = fixture::full_vocab();
    graph::GraphConfig gcfg = fixture::small_graph_config();
    ModelConfig cfg;
    PreparedInstance inst;

    explicit Scene(std::uint64_t seed, std::size_t n = 6, std::size_t d = 8)
    {
        Rng rng(seed);
        cfg = fixture::small_config(vocab.size(), d);
        inst = fixture::prepare(fixture::random_instance(rng, "m" + std::to_string(seed), n, 2), vocab, 64, gcfg);
    }
};

}  // namespace

TEST(Config, Validation)
{
    ModelConfig cfg = fixture::small_config(30, 10);
    cfg.refine_heads = 4;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.refine_heads = 5;
    EXPECT_NO_THROW(cfg.validate());
    cfg.leaky_slope = 1.5;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Config, GraphFlagsNormalize)
{
    ModelConfig a;
    a.flags.no_graph_branches = true;
    a.normalize();
    EXPECT_TRUE(a.flags.no_syntax_graph && a.flags.no_semantic_graph);
    ModelConfig b;
    b.flags.no_syntax_graph = b.flags.no_semantic_graph = true;
    b.normalize();
    EXPECT_TRUE(b.flags.no_graph_branches);
    EXPECT_EQ(a.flags, b.flags);
}

TEST(Params, InitRules)
{
    ModelConfig cfg = fixture::small_config(30, 8);
    auto p = init_params(cfg, 1);
    EXPECT_EQ(p.at("highway.gate.b").value(), Matrix(1, 16, -1.0));
    EXPECT_EQ(p.at("classifier.b").value(), Matrix(1, 3));
    EXPECT_EQ(p.at("refine.0.ln1.g").value(), Matrix(1, 8, 1.0));
    const double limit = std::sqrt(6.0 / 16.0);
    for (double v : p.at("gat_syn.0.W").value().values()) EXPECT_LE(std::abs(v), limit);
    EXPECT_THROW(p.at("nope"), ContractError);
    EXPECT_NO_THROW(validate_params(p, cfg));
}

TEST(Params, DisabledComponentsNotAllocated)
{
    ModelConfig cfg = fixture::small_config(30, 8);
    cfg.flags.no_cross_attention = true;
    cfg.flags.no_highway_gate = true;
    cfg.flags.no_aspect_embedding = true;
    cfg.flags.no_transformer_refine = true;
    cfg.flags.no_graph_branches = true;
    cfg.normalize();
    auto p = init_params(cfg, 1);
    for (const auto& e : p.entries()) {
        EXPECT_EQ(e.name.find("xattn"), std::string::npos);
        EXPECT_EQ(e.name.find("highway"), std::string::npos);
        EXPECT_EQ(e.name.find("gat_"), std::string::npos);
        EXPECT_EQ(e.name.rfind("refine.0", 0), std::string::npos);
    }
    EXPECT_TRUE(p.contains("refine.in.W"));
}

TEST(Gat, MatchesDirectEvaluation)
{
    Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.below(6), din = 1 + rng.below(5), d = 1 + rng.below(5);
        Matrix h = random_matrix(rng, n, din), w = random_matrix(rng, din, d), a = random_matrix(rng, 2 * d, 1);
        graph::AdjacencyMatrix adj{Matrix(n, n), graph::AdjacencyKind::syntactic};
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) adj.weights(i, j) = rng.uniform() < 0.5 ? 1.0 : 0.0;
        auto out = gat_layer(num::constant(h), adj, num::constant(w), num::constant(a), 0.2);
        auto ref = oracle::gat(oracle::rows_of(h), oracle::rows_of(adj.weights), oracle::rows_of(w), row_vec(a), 0.2);
        ASSERT_LE(oracle::max_diff(ref.out, out.h.value()), 1e-10);
        ASSERT_LE(oracle::max_diff(ref.attention, out.attention), 1e-10);
    }
}

TEST(Gat, IsolatedNodeOutputsZero)
{
    Rng rng(32);
    graph::AdjacencyMatrix adj{Matrix::identity(3), graph::AdjacencyKind::syntactic};
    adj.weights(1, 1) = 0.0;
    auto out = gat_layer(num::constant(random_matrix(rng, 3, 2)), adj, num::constant(random_matrix(rng, 2, 2)),
                         num::constant(random_matrix(rng, 4, 1)), 0.2);
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(out.h.value()(1, c), 0.0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out.attention(1, j), 0.0);
}

TEST(Gat, ShapeContracts)
{
    graph::AdjacencyMatrix adj{Matrix::identity(3), graph::AdjacencyKind::syntactic};
    EXPECT_THROW(gat_layer(num::constant(Matrix(4, 2)), adj, num::constant(Matrix(2, 2)),
                           num::constant(Matrix(4, 1)), 0.2),
                 ContractError);
    EXPECT_THROW(gat_layer(num::constant(Matrix(3, 2)), adj, num::constant(Matrix(2, 2)),
                           num::constant(Matrix(3, 1)), 0.2),
                 DimensionError);
}

TEST(CrossAttention, MatchesDirectEvaluation)
{
    Rng rng(33);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.below(6), d = 1 + rng.below(6);
        Matrix h = random_matrix(rng, n, d), hg = random_matrix(rng, n, d);
        Matrix wq = random_matrix(rng, d, d), wk = random_matrix(rng, d, d), wv = random_matrix(rng, d, d);
        std::vector<bool> real(n, true);
        real[n - 1] = trial % 2 == 0;
        auto out = cross_attention(num::constant(h), num::constant(hg), num::constant(wq), num::constant(wk),
                                   num::constant(wv), real);
        auto ref = oracle::cross_attention(oracle::rows_of(h), oracle::rows_of(hg), oracle::rows_of(wq),
                                           oracle::rows_of(wk), oracle::rows_of(wv), real);
        ASSERT_LE(oracle::max_diff(ref.out, out.c.value()), 1e-12);
        ASSERT_LE(oracle::max_diff(ref.weights, out.attention), 1e-12);
        ASSERT_TRUE(rows_sum_to_one_or_zero(out.attention, 1e-12));
    }
}

TEST(Fuse, ConcatenatesAndChecksShape)
{
    Var a = num::constant(Matrix(3, 2, 1.0)), b = num::constant(Matrix(3, 2, 2.0));
    Var c = fuse(a, b);
    EXPECT_EQ(c.cols(), 4u);
    EXPECT_EQ(c.value()(2, 3), 2.0);
    EXPECT_THROW(fuse(a, num::constant(Matrix(2, 2))), DimensionError);
}

TEST(Highway, SaturatedGateCarriesInput)
{
    Rng rng(34);
    const std::size_t n = 6;
    Matrix x = random_matrix(rng, 1, n);
    auto out = highway_gate(num::constant(x), num::constant(Matrix(n, n)), num::constant(Matrix(1, n, -40.0)),
                            num::constant(random_matrix(rng, n, n)), num::constant(random_matrix(rng, 1, n)));
    EXPECT_LE(num::max_abs_diff(out.z.value(), x), 1e-6);
}

TEST(Highway, ZeroGateIsExactHalfMix)
{
    Rng rng(35);
    const std::size_t n = 6;
    Matrix x = random_matrix(rng, 1, n), transform_w = random_matrix(rng, n, n), transform_b = random_matrix(rng, 1, n);
    auto out = highway_gate(num::constant(x), num::constant(Matrix(n, n)), num::constant(Matrix(1, n)),
                            num::constant(transform_w), num::constant(transform_b));
    Matrix hx = num::relu(num::add(num::matmul(x, transform_w), transform_b));
    for (std::size_t c = 0; c < n; ++c) EXPECT_EQ(out.z.value()(0, c), 0.5 * hx(0, c) + 0.5 * x(0, c));
}

TEST(Highway, MatchesFormula)
{
    Rng rng(36);
    const std::size_t n = 8;
    Matrix x = random_matrix(rng, 1, n), gate_w = random_matrix(rng, n, n), gate_b = random_matrix(rng, 1, n);
    Matrix transform_w = random_matrix(rng, n, n), transform_b = random_matrix(rng, 1, n);
    auto out = highway_gate(num::constant(x), num::constant(gate_w), num::constant(gate_b), num::constant(transform_w), num::constant(transform_b));
    auto ref = oracle::highway(row_vec(x), oracle::rows_of(gate_w), row_vec(gate_b), oracle::rows_of(transform_w), row_vec(transform_b));
    EXPECT_LE(oracle::max_diff({ref}, out.z.value()), 1e-12);
}

TEST(Aspect, PoolingCases)
{
    Scene s(37, 6);
    auto params = init_params(s.cfg, 3);
    const auto& enc = s.inst.encoded;
    Rng rng(3);
    Var h = num::constant(random_matrix(rng, enc.length(), s.cfg.hidden_dim));
    auto out = aspect_extract(h, s.inst.graphs.aspect, params, enc, 0.2);
    Matrix mean(1, s.cfg.hidden_dim);
    for (std::size_t p : enc.aspect_positions)
        for (std::size_t c = 0; c < mean.cols(); ++c) mean(0, c) += out.h_aspect.value()(p, c) / 2.0;
    EXPECT_LE(num::max_abs_diff(mean, out.aspect_vector.value()), 1e-15);

    auto single = enc;
    single.aspect_positions.resize(1);
    auto one = aspect_extract(h, s.inst.graphs.aspect, params, single, 0.2);
    for (std::size_t c = 0; c < mean.cols(); ++c)
        EXPECT_EQ(one.aspect_vector.value()(0, c), one.h_aspect.value()(single.aspect_positions[0], c));

    single.aspect_positions.clear();
    EXPECT_THROW(aspect_extract(h, s.inst.graphs.aspect, params, single, 0.2), ContractError);
}

TEST(Predict, ArgmaxTiesAndShift)
{
    EXPECT_EQ(predict(Matrix::from_rows({{0.1, 0.9, 0.0}})), 1u);
    EXPECT_EQ(predict(Matrix::from_rows({{0.5, 0.5, 0.5}})), 0u);
    Rng rng(38);
    for (int k = 0; k < 100; ++k) {
        Matrix z = random_matrix(rng, 1, 3);
        Matrix shifted = z;
        const double c = rng.uniform(-10, 10);
        for (double& v : shifted.values()) v += c;
        EXPECT_EQ(predict(z), predict(shifted));
    }
}

TEST(Forward, LogitsShapeUnderEveryFlag)
{
    Scene s(39);
    for (const auto& name : ablation_flag_names()) {
        ModelConfig cfg = train::with_flag(s.cfg, name);
        auto params = init_params(cfg, 5);
        auto tr = forward(s.inst, params, cfg, s.gcfg);
        EXPECT_EQ(tr.logits.rows(), 1u) << name;
        EXPECT_EQ(tr.logits.cols(), 3u) << name;
    }
}

TEST(Forward, AttentionRowsNormalized)
{
    Scene s(40, 9);
    auto params = init_params(s.cfg, 5);
    auto tr = forward(s.inst, params, s.cfg, s.gcfg);
    for (const auto& a : tr.gat_syntax_attention) EXPECT_TRUE(rows_sum_to_one_or_zero(a, 1e-12));
    for (const auto& a : tr.gat_semantic_attention) EXPECT_TRUE(rows_sum_to_one_or_zero(a, 1e-12));
    EXPECT_TRUE(rows_sum_to_one_or_zero(tr.cross_syn_attention, 1e-12));
    EXPECT_TRUE(rows_sum_to_one_or_zero(tr.cross_sem_attention, 1e-12));
    EXPECT_EQ(tr.refine_attention.size(), s.cfg.refine_heads);
    for (const auto& a : tr.refine_attention) EXPECT_TRUE(rows_sum_to_one_or_zero(a, 1e-12));
}

TEST(Forward, NoHighwayMeansCarryThrough)
{
    Scene s(41);
    ModelConfig cfg = train::with_flag(s.cfg, "no_highway_gate");
    auto params = init_params(cfg, 5);
    auto tr = forward(s.inst, params, cfg, s.gcfg);
    EXPECT_EQ(tr.fused.value(), tr.joint.value());
}

TEST(Forward, GraphFlagPairEqualsNoGraphBranches)
{
    Scene s(42);
    ModelConfig pair = s.cfg;
    pair.flags.no_syntax_graph = pair.flags.no_semantic_graph = true;
    pair.normalize();
    ModelConfig both = train::with_flag(s.cfg, "no_graph_branches");
    auto tp = forward(s.inst, init_params(pair, 9), pair, s.gcfg);
    auto tb = forward(s.inst, init_params(both, 9), both, s.gcfg);
    EXPECT_EQ(tp.logits.value(), tb.logits.value());
}

TEST(Forward, FlagsRemoveComputation)
{
    // A flagged model evaluated on the full parameter set must equal the same
    // model on a store that lacks the disabled tensors (which would throw if
    // touched), and shared tensors must initialize identically.
    Scene s(43);
    auto full = init_params(s.cfg, 11);
    for (const auto& name : ablation_flag_names()) {
        ModelConfig cfg = train::with_flag(s.cfg, name);
        auto pruned = init_params(cfg, 11);
        for (const auto& e : pruned.entries()) ASSERT_EQ(e.var.value(), full.at(e.name).value()) << e.name;
        if (name != "fixed_adjacency") {
            EXPECT_LT(pruned.size(), full.size()) << name;
        }
        auto a = forward(s.inst, full, cfg, s.gcfg);
        auto b = forward(s.inst, pruned, cfg, s.gcfg);
        EXPECT_EQ(a.logits.value(), b.logits.value()) << name;
    }
}

TEST(Forward, VocabularyPermutationInvariance)
{
    Scene s(44);
    auto params = init_params(s.cfg, 12);
    auto base = forward(s.inst, params, s.cfg, s.gcfg);

    // Swap two non-reserved ids in both the encoded input and the table.
    const std::size_t a = 5, b = s.vocab.size() - 1;
    auto swapped = s.inst;
    for (auto& id : swapped.encoded.ids) id = id == a ? b : id == b ? a : id;
    auto p2 = params.clone();
    Matrix table = p2.at("embed.E").value();
    for (std::size_t c = 0; c < table.cols(); ++c) std::swap(table(a, c), table(b, c));
    Var e = p2.at("embed.E");
    e.mutable_value() = table;
    auto perm = forward(swapped, p2, s.cfg, s.gcfg);
    EXPECT_EQ(base.logits.value(), perm.logits.value());
}

TEST(Forward, DropoutOnlyInTraining)
{
    Scene s(45);
    s.cfg.dropout_rate = 0.3;
    auto params = init_params(s.cfg, 13);
    auto e1 = forward(s.inst, params, s.cfg, s.gcfg);
    auto e2 = forward(s.inst, params, s.cfg, s.gcfg);
    EXPECT_EQ(e1.logits.value(), e2.logits.value());
    Rng rng(1);
    auto t1 = forward(s.inst, params, s.cfg, s.gcfg, &rng);
    EXPECT_NE(e1.logits.value(), t1.logits.value());
}

TEST(Forward, FullModelGradientCheck)
{
    Scene s(46, 4, 8);
    auto params = init_params(s.cfg, 14);
    auto loss = [&] {
        auto tr = forward(s.inst, params, s.cfg, s.gcfg);
        return train::cross_entropy_loss(tr.logits, corpus::index_of(s.inst.encoded.label), train::unit_weights());
    };
    auto entries = params.entries();
    auto report = num::finite_diff_check(loss, entries);
    const auto* worst = report.worst();
    ASSERT_NE(worst, nullptr);
    EXPECT_LT(report.max_rel_error(), 1e-5) << worst->name << "[" << worst->worst_index << "]";
}

TEST(Precomputed, ParseAndProject)
{
    std::istringstream in("p1\t0\t1 2\np1\t1\t3 4\np1\t2\t5 6\np1\t3\t0 1\np1\t4\t1 0\np1\t5\t2 2\n");
    auto emb = PrecomputedEmbeddings::parse(in);
    EXPECT_EQ(emb.dim(), 2u);
    corpus::Vocab v;
    auto inst = fixture::make_instance("p1", {"x", "y"}, 0, 1, corpus::Polarity::positive);
    auto enc = corpus::encode(inst, v, 8);
    Matrix m = emb.matrix_for(enc);
    EXPECT_EQ(m.rows(), 8u);
    EXPECT_EQ(m(2, 1), 6.0);
    EXPECT_EQ(m(6, 0), 0.0);

    auto other = fixture::make_instance("p2", {"x"}, 0, 1, corpus::Polarity::positive);
    try {
        emb.matrix_for(corpus::encode(other, v, 8));
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("p2"), std::string::npos);
    }
    std::istringstream ragged("a\t0\t1 2\na\t1\t3\n");
    EXPECT_THROW(PrecomputedEmbeddings::parse(ragged), DataError);
}

TEST(Precomputed, ForwardUsesProjectionOnly)
{
    corpus::Vocab v;
    auto inst = fixture::make_instance("q", {"a", "b", "c"}, 1, 2, corpus::Polarity::negative);
    std::ostringstream text;
    Rng rng(47);
    for (std::size_t p = 0; p < 7; ++p) {
        text << "q\t" << p << "\t";
        for (int c = 0; c < 6; ++c) text << rng.uniform(-1, 1) << (c == 5 ? "\n" : " ");
    }
    std::istringstream in(text.str());
    auto emb = PrecomputedEmbeddings::parse(in);
    ModelConfig cfg = fixture::small_config(4, 8);
    cfg.embed_dim = 6;
    cfg.embedding_source = EmbeddingSource::precomputed;
    auto params = init_params(cfg, 1);
    EXPECT_FALSE(params.contains("embed.E"));
    EXPECT_FALSE(params.contains("encoder.Wq"));
    auto g = fixture::small_graph_config();
    auto prepared = prepare_instance(inst, v, 16, g, graph::SyntaxRuleSet::defaults(), nullptr, &emb);
    auto tr = forward(prepared, params, cfg, g);
    EXPECT_EQ(tr.logits.cols(), 3u);
}
