#pragma once

// Dataset ingestion, word-level tokenization, vocabulary and the
// [CLS] sentence [SEP] aspect [SEP] input layout.

#include <array>
#include <cstddef>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include "crosgrps/error.hpp"

namespace crosgrps::corpus {

enum class Polarity : std::size_t { positive = 0, negative = 1, neutral = 2 };

inline constexpr std::size_t num_polarities = 3;

inline std::string_view to_string(Polarity p)
{
    switch (p) {
        case Polarity::positive: return "positive";
        case Polarity::negative: return "negative";
        case Polarity::neutral: return "neutral";
    }
    return "unknown";
}

inline std::optional<Polarity> parse_polarity(std::string_view s)
{
    if (s == "positive") return Polarity::positive;
    if (s == "negative") return Polarity::negative;
    if (s == "neutral") return Polarity::neutral;
    return std::nullopt;
}

inline std::size_t index_of(Polarity p) { return static_cast<std::size_t>(p); }

// Half-open token range [start, end).
struct Span {
    std::size_t start = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - start; }
    bool contains(std::size_t i) const { return i >= start && i < end; }
    bool operator==(const Span&) const = default;
};

struct Instance {
    std::string id;
    std::vector<std::string> tokens;
    Span aspect;
    Polarity polarity = Polarity::neutral;

    std::vector<std::string> aspect_tokens() const
    {
        return {tokens.begin() + static_cast<std::ptrdiff_t>(aspect.start),
                tokens.begin() + static_cast<std::ptrdiff_t>(aspect.end)};
    }
};

inline void validate(const Instance& inst)
{
    if (inst.tokens.empty()) {
        throw DataError("instance '" + inst.id + "' has no tokens");
    }
    for (const auto& t : inst.tokens) {
        if (t.empty()) {
            throw DataError("instance '" + inst.id + "' has an empty token");
        }
    }
    if (!(inst.aspect.start < inst.aspect.end && inst.aspect.end <= inst.tokens.size())) {
        throw DataError("instance '" + inst.id + "' aspect span [" +
                        std::to_string(inst.aspect.start) + "," + std::to_string(inst.aspect.end) +
                        ") invalid for " + std::to_string(inst.tokens.size()) + " tokens");
    }
}

enum class SplitName { train, validation, test };

inline std::string_view to_string(SplitName s)
{
    switch (s) {
        case SplitName::train: return "train";
        case SplitName::validation: return "validation";
        case SplitName::test: return "test";
    }
    return "unknown";
}

struct DatasetSplit {
    SplitName name = SplitName::train;
    std::vector<Instance> instances;

    std::size_t size() const { return instances.size(); }
    bool empty() const { return instances.empty(); }

    std::array<std::size_t, num_polarities> label_counts() const
    {
        std::array<std::size_t, num_polarities> counts{};
        for (const auto& inst : instances) {
            ++counts[index_of(inst.polarity)];
        }
        return counts;
    }
};

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

inline std::string nfc(std::string_view text)
{
    UErrorCode status = U_ZERO_ERROR;
    const icu::Normalizer2* norm = icu::Normalizer2::getNFCInstance(status);
    if (U_FAILURE(status)) {
        throw Error("ICU NFC normalizer unavailable");
    }
    icu::UnicodeString src = icu::UnicodeString::fromUTF8(
        icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
    icu::UnicodeString dst = norm->normalize(src, status);
    if (U_FAILURE(status)) {
        throw DataError("NFC normalization failed");
    }
    std::string out;
    dst.toUTF8String(out);
    return out;
}

namespace detail {

struct CodePoint {
    UChar32 cp;
    std::size_t begin;
    std::size_t end;
};

inline std::vector<CodePoint> decode(std::string_view s)
{
    std::vector<CodePoint> out;
    int32_t i = 0;
    const auto len = static_cast<int32_t>(s.size());
    const auto* bytes = reinterpret_cast<const uint8_t*>(s.data());
    while (i < len) {
        int32_t start = i;
        UChar32 c;
        U8_NEXT(bytes, i, len, c);
        out.push_back({c, static_cast<std::size_t>(start), static_cast<std::size_t>(i)});
    }
    return out;
}

inline bool is_punct(UChar32 c) { return c >= 0 && u_ispunct(c); }
inline bool is_space(UChar32 c) { return c >= 0 && u_isUWhiteSpace(c); }

}  // namespace detail

// NFC-normalize, split on whitespace, and detach leading/trailing punctuation
// (one token per punctuation code point). Never emits empty tokens.
inline std::vector<std::string> tokenize(std::string_view text)
{
    const std::string norm = nfc(text);
    const auto cps = detail::decode(norm);
    std::vector<std::string> tokens;

    auto emit_chunk = [&](std::size_t lo, std::size_t hi) {
        // cps[lo, hi) is one whitespace-free chunk.
        std::size_t a = lo;
        while (a < hi && detail::is_punct(cps[a].cp)) {
            tokens.push_back(norm.substr(cps[a].begin, cps[a].end - cps[a].begin));
            ++a;
        }
        std::size_t b = hi;
        while (b > a && detail::is_punct(cps[b - 1].cp)) {
            --b;
        }
        if (a < b) {
            tokens.push_back(norm.substr(cps[a].begin, cps[b - 1].end - cps[a].begin));
        }
        for (std::size_t k = b; k < hi; ++k) {
            tokens.push_back(norm.substr(cps[k].begin, cps[k].end - cps[k].begin));
        }
    };

    std::size_t i = 0;
    while (i < cps.size()) {
        while (i < cps.size() && detail::is_space(cps[i].cp)) {
            ++i;
        }
        std::size_t j = i;
        while (j < cps.size() && !detail::is_space(cps[j].cp)) {
            ++j;
        }
        if (j > i) {
            emit_chunk(i, j);
        }
        i = j;
    }
    return tokens;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class Vocab {
public:
    static constexpr std::size_t pad = 0;
    static constexpr std::size_t unk = 1;
    static constexpr std::size_t cls = 2;
    static constexpr std::size_t sep = 3;
    static constexpr std::size_t num_reserved = 4;

    Vocab() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[SEP]"}
    {
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            index_.emplace(tokens_[i], i);
        }
    }

    // Rebuild from a stored token list (reserved entries first).
    static Vocab from_tokens(const std::vector<std::string>& tokens)
    {
        Vocab v;
        if (tokens.size() < num_reserved) {
            throw DataError("vocabulary lacks reserved entries");
        }
        for (std::size_t i = 0; i < num_reserved; ++i) {
            if (tokens[i] != v.tokens_[i]) {
                throw DataError("vocabulary reserved entry " + std::to_string(i) + " is '" +
                                tokens[i] + "'");
            }
        }
        for (std::size_t i = num_reserved; i < tokens.size(); ++i) {
            if (!v.add(tokens[i])) {
                throw DataError("vocabulary repeats token '" + tokens[i] + "'");
            }
        }
        return v;
    }

    std::size_t size() const { return tokens_.size(); }

    std::size_t index(std::string_view token) const
    {
        auto it = index_.find(std::string(token));
        return it == index_.end() ? unk : it->second;
    }

    bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

    const std::string& token(std::size_t id) const
    {
        if (id >= tokens_.size()) {
            throw ContractError("vocabulary id " + std::to_string(id) + " out of range");
        }
        return tokens_[id];
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

    bool add(const std::string& token)
    {
        auto [it, inserted] = index_.emplace(token, tokens_.size());
        if (inserted) {
            tokens_.push_back(token);
        }
        return inserted;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Tokens reaching min_freq in the training split get ids >= 4 in first-seen
// order. Only the training split is consulted.
inline Vocab build_vocab(const DatasetSplit& train, std::size_t min_freq)
{
    if (min_freq < 1) {
        throw ConfigError("min_freq must be >= 1");
    }
    if (train.empty()) {
        throw EmptyInputError("build_vocab: training split is empty");
    }
    std::unordered_map<std::string, std::size_t> freq;
    std::vector<std::string> order;
    for (const auto& inst : train.instances) {
        for (const auto& t : inst.tokens) {
            if (freq[t]++ == 0) {
                order.push_back(t);
            }
        }
    }
    Vocab vocab;
    for (const auto& t : order) {
        if (freq[t] >= min_freq) {
            vocab.add(t);
        }
    }
    return vocab;
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

struct EncodedInstance {
    std::string instance_id;
    std::vector<std::size_t> ids;
    std::vector<bool> pad_mask;  // true = real token
    Span sentence_region;        // positions of w_1..w_n within ids
    Span aspect_tail;            // positions of a_1..a_m after the first [SEP]
    std::vector<std::size_t> aspect_positions;  // aspect tokens inside sentence_region
    std::size_t sentence_offset = 0;  // source index of the first kept sentence token
    Polarity label = Polarity::neutral;

    std::size_t length() const { return ids.size(); }

    std::size_t real_length() const { return aspect_tail.end + 1; }

    std::vector<std::size_t> real_positions() const
    {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < pad_mask.size(); ++i) {
            if (pad_mask[i]) {
                out.push_back(i);
            }
        }
        return out;
    }

    bool is_aspect_position(std::size_t pos) const
    {
        return pos >= aspect_positions.front() && pos <= aspect_positions.back();
    }

    // Same instance with the [PAD] tail dropped.
    EncodedInstance trimmed() const
    {
        EncodedInstance out = *this;
        out.ids.resize(real_length());
        out.pad_mask.resize(real_length());
        return out;
    }
};

// Layout [CLS] w_1..w_n [SEP] a_1..a_m [SEP] [PAD]... up to max_length.
// Over-long sentences are truncated from the right; when that would cut into
// the aspect, the kept window slides left just enough to end at the aspect.
inline EncodedInstance encode(const Instance& inst, const Vocab& vocab, std::size_t max_length)
{
    validate(inst);
    const std::size_t m = inst.aspect.size();
    if (max_length < 4 || m > max_length - 4) {
        throw DataError("instance '" + inst.id + "' is unencodable: aspect of " +
                        std::to_string(m) + " tokens exceeds max_length - 4 = " +
                        std::to_string(max_length < 4 ? 0 : max_length - 4));
    }
    const std::size_t n = inst.tokens.size();
    const std::size_t budget = max_length - m - 3;
    std::size_t keep_begin = 0;
    std::size_t keep_end = n;
    if (n > budget) {
        keep_end = budget;
        if (inst.aspect.end > keep_end) {
            keep_end = inst.aspect.end;
            keep_begin = keep_end - budget;
        }
    }
    const std::size_t kept = keep_end - keep_begin;

    EncodedInstance enc;
    enc.instance_id = inst.id;
    enc.label = inst.polarity;
    enc.sentence_offset = keep_begin;
    enc.ids.reserve(max_length);
    enc.ids.push_back(Vocab::cls);
    for (std::size_t i = keep_begin; i < keep_end; ++i) {
        enc.ids.push_back(vocab.index(inst.tokens[i]));
    }
    enc.ids.push_back(Vocab::sep);
    for (std::size_t i = inst.aspect.start; i < inst.aspect.end; ++i) {
        enc.ids.push_back(vocab.index(inst.tokens[i]));
    }
    enc.ids.push_back(Vocab::sep);
    const std::size_t real = enc.ids.size();
    enc.ids.resize(max_length, Vocab::pad);
    enc.pad_mask.assign(max_length, false);
    std::fill(enc.pad_mask.begin(), enc.pad_mask.begin() + static_cast<std::ptrdiff_t>(real), true);
    enc.sentence_region = {1, 1 + kept};
    enc.aspect_tail = {kept + 2, kept + 2 + m};
    for (std::size_t i = inst.aspect.start; i < inst.aspect.end; ++i) {
        enc.aspect_positions.push_back(1 + i - keep_begin);
    }
    return enc;
}

// Sentence tokens that survived truncation, aligned with sentence_region.
inline std::vector<std::string> kept_sentence_tokens(const Instance& inst,
                                                     const EncodedInstance& enc)
{
    const auto begin = static_cast<std::ptrdiff_t>(enc.sentence_offset);
    const auto count = static_cast<std::ptrdiff_t>(enc.sentence_region.size());
    if (enc.sentence_offset + enc.sentence_region.size() > inst.tokens.size()) {
        throw ContractError("encoded instance '" + enc.instance_id +
                            "' does not align with its source tokens");
    }
    return {inst.tokens.begin() + begin, inst.tokens.begin() + begin + count};
}

// Token strings for every real position, specials included.
inline std::vector<std::string> decode(const EncodedInstance& enc, const Vocab& vocab)
{
    std::vector<std::string> out;
    for (std::size_t i = 0; i < enc.length(); ++i) {
        out.push_back(vocab.token(enc.ids[i]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tabular loader
// ---------------------------------------------------------------------------

inline constexpr std::string_view tabular_header = "id\ttokens\taspect_start\taspect_end\tpolarity";

struct RowDiagnostic {
    std::size_t line = 0;
    std::string message;
};

struct LoadResult {
    DatasetSplit split;
    std::vector<RowDiagnostic> diagnostics;

    std::array<std::size_t, num_polarities> label_counts() const { return split.label_counts(); }
};

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line)
{
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find('\t', start);
        if (pos == std::string::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

inline std::optional<std::size_t> parse_index(const std::string& s)
{
    if (s.empty() || s.size() > 18) {
        return std::nullopt;
    }
    std::size_t v = 0;
    for (char c : s) {
        if (c < '0' || c > '9') {
            return std::nullopt;
        }
        v = v * 10 + static_cast<std::size_t>(c - '0');
    }
    return v;
}

inline std::vector<std::string> split_space(const std::string& s)
{
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string tok;
    while (in >> tok) {
        out.push_back(nfc(tok));
    }
    return out;
}

}  // namespace detail

// Parses a dataset stream. Malformed rows are skipped and reported with their
// 1-based line number; a duplicate id aborts the load.
inline LoadResult parse_tabular(std::istream& in, SplitName name, std::string_view source = "<stream>")
{
    LoadResult result;
    result.split.name = name;
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty() || line.front() == '#') {
            continue;
        }
        if (!header_seen) {
            if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF &&
                static_cast<unsigned char>(line[1]) == 0xBB &&
                static_cast<unsigned char>(line[2]) == 0xBF) {
                line.erase(0, 3);
            }
            if (line != tabular_header) {
                throw DataError(std::string(source) + ":" + std::to_string(line_no) +
                                ": expected header '" + std::string(tabular_header) + "'");
            }
            header_seen = true;
            continue;
        }
        auto fields = detail::split_tabs(line);
        auto reject = [&](const std::string& why) {
            result.diagnostics.push_back({line_no, why});
        };
        if (fields.size() != 5) {
            reject("expected 5 tab-separated fields, found " + std::to_string(fields.size()));
            continue;
        }
        Instance inst;
        inst.id = fields[0];
        if (inst.id.empty()) {
            reject("empty id");
            continue;
        }
        inst.tokens = detail::split_space(fields[1]);
        if (inst.tokens.empty()) {
            reject("no tokens");
            continue;
        }
        auto start = detail::parse_index(fields[2]);
        auto end = detail::parse_index(fields[3]);
        if (!start || !end) {
            reject("aspect bounds are not non-negative integers");
            continue;
        }
        if (!(*start < *end && *end <= inst.tokens.size())) {
            reject("aspect span [" + fields[2] + "," + fields[3] + ") cannot be resolved in " +
                   std::to_string(inst.tokens.size()) + " tokens");
            continue;
        }
        inst.aspect = {*start, *end};
        auto pol = parse_polarity(fields[4]);
        if (!pol) {
            reject("unknown polarity '" + fields[4] + "'");
            continue;
        }
        inst.polarity = *pol;
        if (!seen.insert(inst.id).second) {
            throw DataError(std::string(source) + ":" + std::to_string(line_no) +
                            ": duplicate instance id '" + inst.id + "'");
        }
        result.split.instances.push_back(std::move(inst));
    }
    return result;
}

inline LoadResult load_tabular(const std::string& path, SplitName name = SplitName::train)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open dataset file " + path);
    }
    return parse_tabular(in, name, path);
}

// ---------------------------------------------------------------------------
// Class weights
// ---------------------------------------------------------------------------

// Inverse-frequency weights N / (C * count_c); they average to 1 over classes.
inline std::array<double, num_polarities> class_weights(const std::vector<Polarity>& labels)
{
    std::array<std::size_t, num_polarities> counts{};
    for (auto p : labels) {
        ++counts[index_of(p)];
    }
    std::string missing;
    for (std::size_t c = 0; c < num_polarities; ++c) {
        if (counts[c] == 0) {
            if (!missing.empty()) {
                missing += ", ";
            }
            missing += to_string(static_cast<Polarity>(c));
        }
    }
    if (!missing.empty()) {
        throw DataError("class_weights: absent classes: " + missing);
    }
    std::array<double, num_polarities> w{};
    const double n = static_cast<double>(labels.size());
    for (std::size_t c = 0; c < num_polarities; ++c) {
        w[c] = n / (static_cast<double>(num_polarities) * static_cast<double>(counts[c]));
    }
    return w;
}

inline std::vector<Polarity> labels_of(const DatasetSplit& split)
{
    std::vector<Polarity> out;
    out.reserve(split.size());
    for (const auto& inst : split.instances) {
        out.push_back(inst.polarity);
    }
    return out;
}

}  // namespace crosgrps::corpus
