#pragma once

// Token-level adjacency over an encoded sequence: a rule-based syntactic graph,
// a pruned cosine-similarity graph, and an aspect-proximity graph, plus the
// hop/cosine distance statistics used to compare them.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstddef>
#include <deque>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "crosgrps/corpus.hpp"
#include "crosgrps/error.hpp"
#include "crosgrps/numkit.hpp"

namespace crosgrps::graph {

using num::Matrix;
using corpus::EncodedInstance;

enum class AdjacencyKind { syntactic, semantic, aspect };

inline std::string_view to_string(AdjacencyKind k)
{
    switch (k) {
        case AdjacencyKind::syntactic: return "syntactic";
        case AdjacencyKind::semantic: return "semantic";
        case AdjacencyKind::aspect: return "aspect";
    }
    return "unknown";
}

struct AdjacencyMatrix {
    Matrix weights;
    AdjacencyKind kind = AdjacencyKind::syntactic;

    std::size_t size() const { return weights.rows(); }
    bool has_edge(std::size_t i, std::size_t j) const { return weights(i, j) > 0.0; }
};

// ---------------------------------------------------------------------------
// Coarse token classes and the rule set
// ---------------------------------------------------------------------------

enum class CoarseClass { noun, verb, modifier, particle, other };

inline std::string_view to_string(CoarseClass c)
{
    switch (c) {
        case CoarseClass::noun: return "NOUN";
        case CoarseClass::verb: return "VERB";
        case CoarseClass::modifier: return "MODIFIER";
        case CoarseClass::particle: return "PARTICLE";
        case CoarseClass::other: return "OTHER";
    }
    return "OTHER";
}

struct SuffixRule {
    std::string suffix;
    CoarseClass cls = CoarseClass::noun;
    std::size_t min_stem = 2;  // code points that must precede the suffix
};

// Rule (from, to): every `from` token links to the nearest `to` token on its
// right; with `bidirectional` also to the nearest `to` token on its left.
struct LinkRule {
    CoarseClass from = CoarseClass::modifier;
    CoarseClass to = CoarseClass::noun;
    bool bidirectional = true;
};

struct Lexicon {
    std::unordered_map<std::string, CoarseClass> words;
    std::vector<SuffixRule> suffixes;  // first match wins

    CoarseClass classify(std::string_view token) const;
};

struct SyntaxRuleSet {
    std::size_t window_radius = 2;
    std::vector<LinkRule> link_rules;
    Lexicon lexicon;

    static SyntaxRuleSet defaults();
};

namespace detail {

inline std::string ascii_lower(std::string_view s)
{
    std::string out(s);
    for (char& c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

inline std::size_t count_code_points(std::string_view s)
{
    std::size_t n = 0;
    for (char c : s) {
        if ((static_cast<unsigned char>(c) & 0xC0) != 0x80) {
            ++n;
        }
    }
    return n;
}

}  // namespace detail

inline CoarseClass Lexicon::classify(std::string_view token) const
{
    const std::string key = detail::ascii_lower(token);
    if (auto it = words.find(key); it != words.end()) {
        return it->second;
    }
    const auto cps = corpus::detail::decode(key);
    bool any_letter = false;
    for (const auto& cp : cps) {
        if (cp.cp >= 0 && u_isalpha(cp.cp)) {
            any_letter = true;
            break;
        }
    }
    if (!any_letter) {
        return CoarseClass::other;
    }
    const std::size_t len = cps.size();
    for (const auto& rule : suffixes) {
        if (key.size() > rule.suffix.size() &&
            key.compare(key.size() - rule.suffix.size(), rule.suffix.size(), rule.suffix) == 0 &&
            len >= detail::count_code_points(rule.suffix) + rule.min_stem) {
            return rule.cls;
        }
    }
    return CoarseClass::noun;
}

inline SyntaxRuleSet SyntaxRuleSet::defaults()
{
    SyntaxRuleSet rules;
    rules.window_radius = 2;
    rules.link_rules = {
        {CoarseClass::modifier, CoarseClass::noun, true},
        {CoarseClass::verb, CoarseClass::noun, true},
        {CoarseClass::particle, CoarseClass::verb, true},
    };
    auto& w = rules.lexicon.words;
    for (const char* t : {"is", "are", "was", "were", "be", "been", "am", "has", "have", "had",
                          "do", "does", "did", "seems", "looks", "feel", "feels", "like",
                          "love", "loved", "hate", "recommend", "need", "needs", "got", "get",
                          "আছে", "ছিল", "হয়", "হয়েছে", "করে", "করেছে", "লাগে", "লাগলো", "দেয়",
                          "পেয়েছি", "চাই"}) {
        w.emplace(t, CoarseClass::verb);
    }
    for (const char* t : {"good", "bad", "great", "poor", "nice", "excellent", "terrible",
                          "awful", "best", "worst", "slow", "fast", "cheap", "expensive",
                          "fine", "okay", "ok", "average", "very", "too", "so", "really",
                          "quite", "friendly", "rude", "fresh", "delicious", "broken",
                          "ভালো", "ভাল", "খারাপ", "অনেক", "খুব", "সুন্দর", "দারুণ", "বাজে",
                          "চমৎকার", "দামি", "সস্তা", "ধীর", "ভয়ংকর"}) {
        w.emplace(t, CoarseClass::modifier);
    }
    for (const char* t : {"the", "a", "an", "of", "to", "in", "on", "at", "for", "with",
                          "and", "or", "but", "not", "no", "never", "it", "this", "that",
                          "না", "নয়", "নেই", "ও", "এবং", "কিন্তু", "তবে", "এই", "সেই",
                          "যে", "কি", "তো", "ই"}) {
        w.emplace(t, CoarseClass::particle);
    }
    rules.lexicon.suffixes = {
        {"ly", CoarseClass::modifier, 3},   {"ful", CoarseClass::modifier, 3},
        {"less", CoarseClass::modifier, 3}, {"ous", CoarseClass::modifier, 3},
        {"ive", CoarseClass::modifier, 3},  {"able", CoarseClass::modifier, 3},
        {"ing", CoarseClass::verb, 3},      {"ed", CoarseClass::verb, 3},
        {"েছে", CoarseClass::verb, 2},      {"েছি", CoarseClass::verb, 2},
        {"চ্ছে", CoarseClass::verb, 2},     {"লাম", CoarseClass::verb, 2},
        {"বে", CoarseClass::verb, 2},
    };
    return rules;
}

inline std::vector<CoarseClass> classify_tokens(const std::vector<std::string>& tokens,
                                                const Lexicon& lexicon)
{
    std::vector<CoarseClass> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) {
        out.push_back(lexicon.classify(t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Syntactic graph
// ---------------------------------------------------------------------------

namespace detail {

inline Matrix self_loops(const EncodedInstance& enc)
{
    Matrix w(enc.length(), enc.length());
    for (std::size_t i = 0; i < enc.length(); ++i) {
        if (enc.pad_mask[i]) {
            w(i, i) = 1.0;
        }
    }
    return w;
}

inline void link(Matrix& w, std::size_t i, std::size_t j)
{
    w(i, j) = 1.0;
    w(j, i) = 1.0;
}

}  // namespace detail

// Sentence-relative edges (k, l) produced by the window and link rules.
inline std::vector<std::pair<std::size_t, std::size_t>> rule_edges(
    const std::vector<std::string>& tokens, const SyntaxRuleSet& rules)
{
    if (rules.window_radius < 1) {
        throw ConfigError("syntax window_radius must be >= 1");
    }
    const std::size_t n = tokens.size();
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t l = k + 1; l < n && l - k <= rules.window_radius; ++l) {
            edges.emplace_back(k, l);
        }
    }
    const auto classes = classify_tokens(tokens, rules.lexicon);
    for (const auto& rule : rules.link_rules) {
        for (std::size_t k = 0; k < n; ++k) {
            if (classes[k] != rule.from) {
                continue;
            }
            for (std::size_t l = k + 1; l < n; ++l) {
                if (classes[l] == rule.to) {
                    edges.emplace_back(k, l);
                    break;
                }
            }
            if (rule.bidirectional) {
                for (std::size_t l = k; l-- > 0;) {
                    if (classes[l] == rule.to) {
                        edges.emplace_back(l, k);
                        break;
                    }
                }
            }
        }
    }
    return edges;
}

// Binary symmetric adjacency over the full encoded length. Only sentence
// positions receive rule edges; specials and the aspect tail keep self-loops.
inline AdjacencyMatrix build_syntactic(const std::vector<std::string>& tokens,
                                       const EncodedInstance& enc, const SyntaxRuleSet& rules)
{
    if (tokens.size() != enc.sentence_region.size()) {
        throw ContractError("build_syntactic: " + std::to_string(tokens.size()) +
                            " tokens for a sentence region of " +
                            std::to_string(enc.sentence_region.size()) + " in '" +
                            enc.instance_id + "'");
    }
    AdjacencyMatrix adj{detail::self_loops(enc), AdjacencyKind::syntactic};
    const std::size_t base = enc.sentence_region.start;
    for (auto [k, l] : rule_edges(tokens, rules)) {
        if (k != l) {
            detail::link(adj.weights, base + k, base + l);
        }
    }
    return adj;
}

// Precomputed syntactic edges: header `#edges T=<n>` then one `i j` pair per
// line, 0-based sentence-token indices.
struct EdgeList {
    std::size_t num_tokens = 0;
    std::vector<std::pair<std::size_t, std::size_t>> edges;
};

inline EdgeList parse_edge_list(std::istream& in, std::string_view source = "<stream>")
{
    EdgeList list;
    std::string line;
    std::size_t line_no = 0;
    bool header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        auto where = [&] { return std::string(source) + ":" + std::to_string(line_no); };
        if (!header) {
            constexpr std::string_view prefix = "#edges T=";
            if (line.rfind(prefix, 0) != 0) {
                throw DataError(where() + ": expected header '#edges T=<n>'");
            }
            auto digits = std::string_view(line).substr(prefix.size());
            auto [ptr, ec] =
                std::from_chars(digits.data(), digits.data() + digits.size(), list.num_tokens);
            if (ec != std::errc() || ptr != digits.data() + digits.size() || list.num_tokens == 0) {
                throw DataError(where() + ": bad token count in header");
            }
            header = true;
            continue;
        }
        if (line.front() == '#') {
            continue;
        }
        std::istringstream fields(line);
        long long i = -1;
        long long j = -1;
        std::string extra;
        if (!(fields >> i >> j) || (fields >> extra) || i < 0 || j < 0 ||
            static_cast<std::size_t>(i) >= list.num_tokens ||
            static_cast<std::size_t>(j) >= list.num_tokens) {
            throw DataError(where() + ": expected 'i j' with 0 <= i,j < " +
                            std::to_string(list.num_tokens));
        }
        list.edges.emplace_back(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    }
    if (!header) {
        throw DataError(std::string(source) + ": missing '#edges T=<n>' header");
    }
    return list;
}

inline EdgeList load_edge_list(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open edge list " + path);
    }
    return parse_edge_list(in, path);
}

// Syntactic adjacency from a precomputed edge list. Edges touching tokens cut
// by truncation are dropped.
inline AdjacencyMatrix syntactic_from_edges(const EdgeList& list, const EncodedInstance& enc)
{
    if (list.num_tokens < enc.sentence_offset + enc.sentence_region.size()) {
        throw ContractError("edge list for '" + enc.instance_id + "' covers " +
                            std::to_string(list.num_tokens) + " tokens, sentence needs " +
                            std::to_string(enc.sentence_offset + enc.sentence_region.size()));
    }
    AdjacencyMatrix adj{detail::self_loops(enc), AdjacencyKind::syntactic};
    auto position = [&](std::size_t k) -> std::optional<std::size_t> {
        if (k < enc.sentence_offset || k >= enc.sentence_offset + enc.sentence_region.size()) {
            return std::nullopt;
        }
        return enc.sentence_region.start + (k - enc.sentence_offset);
    };
    for (auto [k, l] : list.edges) {
        auto pi = position(k);
        auto pj = position(l);
        if (pi && pj && *pi != *pj) {
            detail::link(adj.weights, *pi, *pj);
        }
    }
    return adj;
}

// ---------------------------------------------------------------------------
// Semantic graph
// ---------------------------------------------------------------------------

// Full pairwise cosine matrix (zero-norm rows give 0 similarity).
inline Matrix cosine_matrix(const Matrix& h)
{
    const std::size_t t = h.rows();
    Matrix out(t, t);
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = i; j < t; ++j) {
            const double s = num::cosine_similarity(h.row(i), h.row(j));
            out(i, j) = s;
            out(j, i) = s;
        }
    }
    return out;
}

// Clamp negatives to 0, keep per row the top_k largest off-diagonal entries
// that reach `threshold` (ties to the lower index), then set the diagonal to 1.
// [PAD] rows and columns are excluded. The result is not re-symmetrized.
inline AdjacencyMatrix build_semantic(const Matrix& h, std::size_t top_k, double threshold,
                                      const std::vector<bool>& real = {})
{
    const std::size_t t = h.rows();
    if (top_k < 1) {
        throw ConfigError("semantic top_k must be >= 1");
    }
    if (top_k >= t) {
        throw ConfigError("semantic top_k " + std::to_string(top_k) + " must be < T = " +
                          std::to_string(t));
    }
    if (!(threshold >= -1.0 && threshold <= 1.0)) {
        throw ConfigError("semantic threshold must lie in [-1,1]");
    }
    if (!real.empty() && real.size() != t) {
        throw DimensionError("build_semantic: mask length " + std::to_string(real.size()) +
                             " for T = " + std::to_string(t));
    }
    auto is_real = [&](std::size_t i) { return real.empty() || real[i]; };

    std::vector<std::size_t> real_idx;
    for (std::size_t i = 0; i < t; ++i) {
        if (is_real(i)) {
            real_idx.push_back(i);
        }
    }
    Matrix raw(t, t);
    for (std::size_t a = 0; a < real_idx.size(); ++a) {
        for (std::size_t b = a; b < real_idx.size(); ++b) {
            const std::size_t i = real_idx[a];
            const std::size_t j = real_idx[b];
            const double s = num::cosine_similarity(h.row(i), h.row(j));
            raw(i, j) = s;
            raw(j, i) = s;
        }
    }

    AdjacencyMatrix adj{Matrix(t, t), AdjacencyKind::semantic};
    std::vector<std::pair<double, std::size_t>> candidates;
    for (std::size_t i : real_idx) {
        candidates.clear();
        for (std::size_t j : real_idx) {
            if (j == i) {
                continue;
            }
            const double w = std::max(raw(i, j), 0.0);
            if (w > 0.0 && w >= threshold) {
                candidates.emplace_back(w, j);
            }
        }
        const std::size_t keep = std::min(top_k, candidates.size());
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                          candidates.end(), [](const auto& x, const auto& y) {
                              return x.first != y.first ? x.first > y.first : x.second < y.second;
                          });
        for (std::size_t k = 0; k < keep; ++k) {
            adj.weights(i, candidates[k].second) = candidates[k].first;
        }
        adj.weights(i, i) = 1.0;
    }
    return adj;
}

// ---------------------------------------------------------------------------
// Aspect graph
// ---------------------------------------------------------------------------

// Aspect tokens link to every sentence position within `radius` and to each
// other; every real token keeps a self-loop.
inline AdjacencyMatrix build_aspect(std::size_t t, const EncodedInstance& enc, std::size_t radius)
{
    if (t != enc.length()) {
        throw ContractError("build_aspect: T = " + std::to_string(t) + " but encoded length is " +
                            std::to_string(enc.length()));
    }
    AdjacencyMatrix adj{detail::self_loops(enc), AdjacencyKind::aspect};
    const auto& region = enc.sentence_region;
    for (std::size_t i : enc.aspect_positions) {
        for (std::size_t j = region.start; j < region.end; ++j) {
            const std::size_t dist = i > j ? i - j : j - i;
            if (dist <= radius) {
                detail::link(adj.weights, i, j);
            }
        }
        for (std::size_t j : enc.aspect_positions) {
            detail::link(adj.weights, i, j);
        }
    }
    return adj;
}

// Variant that reuses the syntactic graph restricted to edges incident to an
// aspect token, plus the aspect clique.
inline AdjacencyMatrix build_aspect_from_syntax(const AdjacencyMatrix& syn,
                                                const EncodedInstance& enc)
{
    if (syn.size() != enc.length()) {
        throw ContractError("build_aspect_from_syntax: size mismatch");
    }
    AdjacencyMatrix adj{detail::self_loops(enc), AdjacencyKind::aspect};
    for (std::size_t i : enc.aspect_positions) {
        for (std::size_t j = 0; j < syn.size(); ++j) {
            if (syn.has_edge(i, j) || syn.has_edge(j, i)) {
                detail::link(adj.weights, i, j);
            }
        }
        for (std::size_t j : enc.aspect_positions) {
            detail::link(adj.weights, i, j);
        }
    }
    return adj;
}

// Position-only band graph shared by every instance (the fixed-adjacency
// ablation): |i - j| <= radius over real tokens.
inline AdjacencyMatrix fixed_band(const EncodedInstance& enc, std::size_t radius)
{
    AdjacencyMatrix adj{detail::self_loops(enc), AdjacencyKind::syntactic};
    for (std::size_t i = 0; i < enc.length(); ++i) {
        for (std::size_t j = i + 1; j < enc.length() && j - i <= radius; ++j) {
            if (enc.pad_mask[i] && enc.pad_mask[j]) {
                detail::link(adj.weights, i, j);
            }
        }
    }
    return adj;
}

// ---------------------------------------------------------------------------
// Graph settings shared by training, export and statistics
// ---------------------------------------------------------------------------

enum class AspectGraphMode { proximity, syntax };

struct GraphConfig {
    std::size_t window_radius = 2;
    std::size_t top_k = 5;
    double threshold = 0.2;
    std::size_t aspect_radius = 3;
    AspectGraphMode aspect_mode = AspectGraphMode::proximity;
    std::size_t fixed_radius = 2;  // band radius of the shared fixed adjacency

    void validate() const
    {
        if (window_radius < 1) {
            throw ConfigError("graph.window_radius must be >= 1");
        }
        if (top_k < 1) {
            throw ConfigError("graph.top_k must be >= 1");
        }
        if (!(threshold >= -1.0 && threshold <= 1.0)) {
            throw ConfigError("graph.threshold must lie in [-1,1]");
        }
    }
};

// ---------------------------------------------------------------------------
// Distance statistics
// ---------------------------------------------------------------------------

struct GraphStats {
    double mean_syntactic_distance = 0.0;
    double mean_semantic_distance = 0.0;
    double coverage = 0.0;       // reachable pairs / all (aspect, other) pairs
    std::size_t pair_count = 0;  // reachable pairs
    std::size_t total_pairs = 0;
};

// Unweighted BFS hop counts from `source`; unreachable nodes map to SIZE_MAX.
inline std::vector<std::size_t> bfs_hops(const AdjacencyMatrix& adj, std::size_t source)
{
    constexpr auto unreached = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> dist(adj.size(), unreached);
    std::deque<std::size_t> queue{source};
    dist[source] = 0;
    while (!queue.empty()) {
        const std::size_t u = queue.front();
        queue.pop_front();
        for (std::size_t v = 0; v < adj.size(); ++v) {
            if (v != u && dist[v] == unreached && adj.has_edge(u, v)) {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    return dist;
}

// Pairs are (aspect token, non-aspect sentence token). Unreachable pairs are
// excluded from both means and reported through `coverage`.
inline GraphStats graph_stats(const AdjacencyMatrix& syn, const Matrix& sem_raw,
                              const EncodedInstance& enc)
{
    if (enc.aspect_positions.empty()) {
        throw ContractError("graph_stats: instance '" + enc.instance_id + "' has no aspect tokens");
    }
    if (syn.size() != enc.length() || sem_raw.rows() != enc.length() ||
        sem_raw.cols() != enc.length()) {
        throw DimensionError("graph_stats: matrices must be sized T = " +
                             std::to_string(enc.length()));
    }
    GraphStats stats;
    double syn_total = 0.0;
    double sem_total = 0.0;
    for (std::size_t a : enc.aspect_positions) {
        const auto hops = bfs_hops(syn, a);
        for (std::size_t j = enc.sentence_region.start; j < enc.sentence_region.end; ++j) {
            if (enc.is_aspect_position(j)) {
                continue;
            }
            ++stats.total_pairs;
            if (hops[j] == std::numeric_limits<std::size_t>::max()) {
                continue;
            }
            ++stats.pair_count;
            syn_total += static_cast<double>(hops[j]);
            sem_total += 1.0 - sem_raw(a, j);
        }
    }
    if (stats.pair_count > 0) {
        stats.mean_syntactic_distance = syn_total / static_cast<double>(stats.pair_count);
        stats.mean_semantic_distance = sem_total / static_cast<double>(stats.pair_count);
    }
    stats.coverage = stats.total_pairs == 0
                         ? 0.0
                         : static_cast<double>(stats.pair_count) /
                               static_cast<double>(stats.total_pairs);
    return stats;
}

// ---------------------------------------------------------------------------
// CSV export
// ---------------------------------------------------------------------------

// Shortest round-trip decimal form.
inline std::string format_real(double v)
{
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline std::string csv_escape(std::string_view field)
{
    if (field.find_first_of(",\"\n\r") == std::string_view::npos) {
        return std::string(field);
    }
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    out += '"';
    return out;
}

// One matrix row per line. With labels, a header row and a leading label
// column are added.
inline void write_matrix_csv(std::ostream& out, const Matrix& m,
                             const std::vector<std::string>& labels = {})
{
    const bool labelled = !labels.empty();
    if (labelled && (labels.size() != m.rows() || m.rows() != m.cols())) {
        throw DimensionError("write_matrix_csv: labels do not match " + m.shape());
    }
    if (labelled) {
        out << "token";
        for (const auto& l : labels) {
            out << ',' << csv_escape(l);
        }
        out << '\n';
    }
    for (std::size_t i = 0; i < m.rows(); ++i) {
        if (labelled) {
            out << csv_escape(labels[i]) << ',';
        }
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (j > 0) {
                out << ',';
            }
            out << format_real(m(i, j));
        }
        out << '\n';
    }
}

}  // namespace crosgrps::graph
