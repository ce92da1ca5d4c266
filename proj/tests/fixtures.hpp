#pragma once

// Shared synthetic data for the unit and acceptance tests.

#include <string>
#include <vector>

#include "crosgrps/corpus.hpp"
#include "crosgrps/graphbuild.hpp"
#include "crosgrps/model.hpp"
#include "crosgrps/random.hpp"
#include "crosgrps/train.hpp"

namespace fixture {

using namespace crosgrps;

inline corpus::Instance make_instance(std::string id, std::vector<std::string> tokens, std::size_t a_begin,
                                      std::size_t a_end, corpus::Polarity p)
{
    corpus::Instance inst;
    inst.id = std::move(id);
    inst.tokens = std::move(tokens);
    inst.aspect = {a_begin, a_end};
    inst.polarity = p;
    return inst;
}

inline const std::vector<std::string>& filler_words()
{
    static const std::vector<std::string> w = {"the", "food", "was", "service", "staff", "really",
                                               "quite", "menu", "very", "and", "is", "place"};
    return w;
}

inline const std::vector<std::vector<std::string>>& cue_words()
{
    static const std::vector<std::vector<std::string>> w = {
        {"great", "good", "excellent", "superb"},
        {"bad", "awful", "poor", "terrible"},
        {"okay", "average", "plain", "standard"},
    };
    return w;
}

// Random sentence of `n` tokens with a single-token aspect at `aspect_at`.
inline corpus::Instance random_instance(Rng& rng, const std::string& id, std::size_t n, std::size_t aspect_len = 1)
{
    std::vector<std::string> tokens;
    const auto& fill = filler_words();
    for (std::size_t i = 0; i < n; ++i) {
        if (rng.below(3) == 0) {
            const auto& cues = cue_words()[rng.below(3)];
            tokens.push_back(cues[rng.below(cues.size())]);
        } else {
            tokens.push_back(fill[rng.below(fill.size())]);
        }
    }
    const std::size_t start = rng.below(n - aspect_len + 1);
    return make_instance(id, tokens, start, start + aspect_len,
                         static_cast<corpus::Polarity>(rng.below(3)));
}

// Every filler and cue word, so any random instance encodes without [UNK].
inline corpus::Vocab full_vocab()
{
    corpus::Vocab v;
    for (const auto& w : filler_words()) v.add(w);
    for (const auto& cls : cue_words())
        for (const auto& w : cls) v.add(w);
    return v;
}

// Three classes, each marked by a class-specific cue word somewhere in the
// sentence: separable by a bag-of-words indicator.
inline corpus::DatasetSplit separable_split(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    corpus::DatasetSplit split;
    const auto& fill = filler_words();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t label = i % 3;
        const std::size_t len = 4 + rng.below(3);
        std::vector<std::string> tokens;
        for (std::size_t k = 0; k < len; ++k) tokens.push_back(fill[rng.below(fill.size())]);
        const auto& cues = cue_words()[label];
        tokens[rng.below(len)] = cues[rng.below(cues.size())];
        std::size_t aspect = rng.below(len);
        while (tokens[aspect] == cues[0] || tokens[aspect] == cues[1] || tokens[aspect] == cues[2] ||
               tokens[aspect] == cues[3]) {
            aspect = (aspect + 1) % len;
        }
        split.instances.push_back(make_instance("s" + std::to_string(i), tokens, aspect, aspect + 1,
                                                static_cast<corpus::Polarity>(label)));
    }
    return split;
}

inline model::ModelConfig small_config(std::size_t vocab_size, std::size_t d = 16)
{
    model::ModelConfig cfg;
    cfg.vocab_size = vocab_size;
    cfg.embed_dim = d;
    cfg.hidden_dim = d;
    cfg.refine_heads = 4;
    cfg.dropout_rate = 0.0;
    return cfg;
}

inline graph::GraphConfig small_graph_config()
{
    graph::GraphConfig g;
    g.top_k = 3;
    g.threshold = 0.0;
    return g;
}

inline model::PreparedInstance prepare(const corpus::Instance& inst, const corpus::Vocab& vocab,
                                       std::size_t max_length = 64,
                                       const graph::GraphConfig& g = small_graph_config())
{
    return model::prepare_instance(inst, vocab, max_length, g, graph::SyntaxRuleSet::defaults());
}

}  // namespace fixture
