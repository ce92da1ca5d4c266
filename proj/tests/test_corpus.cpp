#include <sstream>

#include <gtest/gtest.h>

#include "crosgrps/corpus.hpp"
#include "fixtures.hpp"

using namespace crosgrps;
using namespace crosgrps::corpus;
using V = std::vector<std::string>;

TEST(Tokenize, DetachesPunctuation)
{
    EXPECT_EQ(tokenize("good food!"), (V{"good", "food", "!"}));
    EXPECT_EQ(tokenize("\"great\" service..."), (V{"\"", "great", "\"", "service", ".", ".", "."}));
    EXPECT_EQ(tokenize("don't stop"), (V{"don't", "stop"}));
}

TEST(Tokenize, EmptyAndWhitespaceOnly)
{
    EXPECT_TRUE(tokenize("").empty());
    EXPECT_TRUE(tokenize(" \t\n ").empty());
}

TEST(Tokenize, BengaliDandaSeparated)
{
    const auto toks = tokenize("খাবার খুব ভালো।");
    ASSERT_EQ(toks.size(), 4u);
    EXPECT_EQ(toks.back(), "।");
    EXPECT_EQ(toks[2], "ভালো");
}

TEST(Tokenize, NfcNormalizes)
{
    // "e" + combining acute accent composes to U+00E9.
    const auto toks = tokenize("cafe\xCC\x81");
    ASSERT_EQ(toks.size(), 1u);
    EXPECT_EQ(toks[0], "caf\xC3\xA9");
}

TEST(Vocab, ReservedIds)
{
    Vocab v;
    EXPECT_EQ(v.size(), 4u);
    EXPECT_EQ(v.token(Vocab::pad), "[PAD]");
    EXPECT_EQ(v.token(Vocab::unk), "[UNK]");
    EXPECT_EQ(v.token(Vocab::cls), "[CLS]");
    EXPECT_EQ(v.token(Vocab::sep), "[SEP]");
    EXPECT_EQ(v.index("never-seen"), Vocab::unk);
    EXPECT_THROW(Vocab::from_tokens({"[PAD]", "[CLS]", "[UNK]", "[SEP]"}), DataError);
}

TEST(BuildVocab, MinFreqThreshold)
{
    DatasetSplit train;
    train.instances.push_back(fixture::make_instance("1", {"a", "a", "b"}, 0, 1, Polarity::positive));
    Vocab v2 = build_vocab(train, 2);
    EXPECT_TRUE(v2.contains("a"));
    EXPECT_FALSE(v2.contains("b"));
    Vocab v1 = build_vocab(train, 1);
    EXPECT_EQ(v1.index("a"), 4u);
    EXPECT_EQ(v1.index("b"), 5u);
    EXPECT_THROW(build_vocab(train, 0), ConfigError);
    EXPECT_THROW(build_vocab(DatasetSplit{}, 1), EmptyInputError);
}

TEST(BuildVocab, ValidationOnlyTokenIsUnk)
{
    DatasetSplit train;
    train.instances.push_back(fixture::make_instance("1", {"x", "y"}, 0, 1, Polarity::neutral));
    Vocab v = build_vocab(train, 1);
    auto val = fixture::make_instance("2", {"x", "zzz"}, 1, 2, Polarity::neutral);
    auto enc = encode(val, v, 16);
    EXPECT_EQ(enc.ids[2], Vocab::unk);
}

TEST(Encode, LayoutArithmetic)
{
    Vocab v = Vocab::from_tokens({"[PAD]", "[UNK]", "[CLS]", "[SEP]", "the", "food", "rocks"});
    auto inst = fixture::make_instance("i", {"the", "food", "rocks"}, 1, 2, Polarity::positive);
    auto enc = encode(inst, v, 10);
    EXPECT_EQ(enc.real_length(), 7u);
    EXPECT_EQ(enc.length(), 10u);
    EXPECT_EQ(enc.ids[0], Vocab::cls);
    EXPECT_EQ(enc.ids[4], Vocab::sep);
    EXPECT_EQ(enc.ids[6], Vocab::sep);
    EXPECT_EQ(enc.ids[5], v.index("food"));
    EXPECT_EQ(enc.aspect_positions, std::vector<std::size_t>{2});
    EXPECT_EQ(enc.ids[enc.aspect_positions[0]], enc.ids[5]);
    EXPECT_FALSE(enc.pad_mask[7]);
    EXPECT_TRUE(enc.pad_mask[6]);
    EXPECT_EQ(enc.trimmed().length(), 7u);
}

TEST(Encode, TruncatesSentenceKeepsAspect)
{
    V tokens;
    for (int i = 0; i < 200; ++i) tokens.push_back("w" + std::to_string(i));
    Vocab v = Vocab::from_tokens([&] {
        V t{"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
        t.insert(t.end(), tokens.begin(), tokens.end());
        return t;
    }());
    // Aspect early: plain right truncation.
    auto early = encode(fixture::make_instance("a", tokens, 3, 7, Polarity::positive), v, 128);
    EXPECT_EQ(early.sentence_region.size(), 121u);
    EXPECT_EQ(early.real_length(), 128u);
    EXPECT_EQ(early.ids[early.aspect_positions[0]], v.index("w3"));
    // Aspect late: the window slides to end at the aspect.
    auto late = encode(fixture::make_instance("b", tokens, 190, 192, Polarity::positive), v, 128);
    EXPECT_EQ(late.sentence_region.size(), 123u);
    EXPECT_EQ(late.sentence_offset, 69u);
    EXPECT_EQ(late.real_length(), 128u);
    EXPECT_EQ(late.ids[late.aspect_positions[0]], v.index("w190"));
    EXPECT_EQ(late.ids[late.aspect_positions[1]], v.index("w191"));
    EXPECT_EQ(late.ids[late.aspect_tail.start], v.index("w190"));
}

TEST(Encode, UnencodableAspect)
{
    Vocab v;
    auto inst = fixture::make_instance("long", V(10, "x"), 0, 7, Polarity::positive);
    EXPECT_THROW(encode(inst, v, 10), DataError);
    EXPECT_NO_THROW(encode(fixture::make_instance("ok", V(10, "x"), 0, 6, Polarity::positive), v, 10));
}

TEST(Encode, RoundTripAndSepCountProperty)
{
    Rng rng(11);
    Vocab v = fixture::full_vocab();
    for (int k = 0; k < 50; ++k) {
        auto inst = fixture::random_instance(rng, "r" + std::to_string(k), 1 + rng.below(12), 1);
        auto enc = encode(inst, v, 12);
        auto dec = decode(enc.trimmed(), v);
        ASSERT_EQ(dec.front(), "[CLS]");
        ASSERT_EQ(std::count(dec.begin(), dec.end(), "[SEP]"), 2);
        auto kept = kept_sentence_tokens(inst, enc);
        for (std::size_t i = 0; i < kept.size(); ++i) ASSERT_EQ(dec[1 + i], kept[i]);
        for (std::size_t i = 0; i < inst.aspect.size(); ++i)
            ASSERT_EQ(dec[enc.aspect_tail.start + i], inst.tokens[inst.aspect.start + i]);
    }
}

TEST(Tabular, ParsesWithDiagnostics)
{
    std::istringstream in("\xEF\xBB\xBFid\ttokens\taspect_start\taspect_end\tpolarity\r\n"
                          "# comment\n"
                          "1\tthe food is great\t1\t2\tpositive\n"
                          "2\tbad service\t5\t6\tnegative\n"
                          "3\tso so place\t2\t3\tneutral\n");
    auto res = parse_tabular(in, SplitName::test);
    EXPECT_EQ(res.split.size(), 2u);
    ASSERT_EQ(res.diagnostics.size(), 1u);
    EXPECT_EQ(res.diagnostics[0].line, 4u);
    EXPECT_EQ(res.split.instances[0].aspect_tokens(), V{"food"});
    auto counts = res.label_counts();
    EXPECT_EQ(counts[index_of(Polarity::positive)], 1u);
    EXPECT_EQ(counts[index_of(Polarity::neutral)], 1u);
}

TEST(Tabular, HeaderRequiredAndDuplicateIds)
{
    std::istringstream no_header("1\ta b\t0\t1\tpositive\n");
    EXPECT_THROW(parse_tabular(no_header, SplitName::train), DataError);
    std::istringstream dup("id\ttokens\taspect_start\taspect_end\tpolarity\n"
                           "1\ta b\t0\t1\tpositive\n1\tc d\t0\t1\tnegative\n");
    EXPECT_THROW(parse_tabular(dup, SplitName::train), DataError);
    std::istringstream empty("");
    EXPECT_TRUE(parse_tabular(empty, SplitName::train).split.empty());
}

TEST(Tabular, BadPolarityAndSpanAreDiagnostics)
{
    std::istringstream in("id\ttokens\taspect_start\taspect_end\tpolarity\n"
                          "1\ta b\t0\t1\tgreat\n"
                          "2\ta b\t1\t1\tpositive\n"
                          "3\ta b\tx\t1\tpositive\n"
                          "4\ta b\t0\t1\n");
    auto res = parse_tabular(in, SplitName::train);
    EXPECT_TRUE(res.split.empty());
    EXPECT_EQ(res.diagnostics.size(), 4u);
}

TEST(Tabular, MissingFileIsIoError)
{
    EXPECT_THROW(load_tabular("/nonexistent/train.tsv"), IoError);
}

TEST(Tabular, SampleDatasetLoads)
{
    auto res = load_tabular(std::string(CROSGRPS_SAMPLES_DIR) + "/restaurant/train.tsv");
    EXPECT_TRUE(res.diagnostics.empty());
    EXPECT_GT(res.split.size(), 20u);
}

TEST(ClassWeights, Formula)
{
    using P = Polarity;
    auto w = class_weights({P::positive, P::negative, P::neutral});
    for (double x : w) EXPECT_DOUBLE_EQ(x, 1.0);
    auto u = class_weights({P::positive, P::positive, P::negative, P::neutral});
    EXPECT_DOUBLE_EQ(u[0], 4.0 / 6.0);
    EXPECT_DOUBLE_EQ(u[1], 4.0 / 3.0);
    EXPECT_DOUBLE_EQ(u[2], 4.0 / 3.0);
    try {
        class_weights({P::positive, P::positive});
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("negative"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("neutral"), std::string::npos);
    }
}
