#pragma once

// Byte-level BPE: training from a word-count map, greedy rank-ordered
// encoding, and the three-file on-disk layout (vocab.txt, merges.txt,
// special_tokens.txt).

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lexforge/error.hpp"
#include "lexforge/hash.hpp"
#include "lexforge/parallel.hpp"
#include "lexforge/unicode.hpp"

namespace lexforge {

using TokenId = std::int32_t;

struct SpecialTagSet {
    std::string label_tag = "<|label|>";
    std::string end_tag = "<|endoftext|>";
    std::string pad_tag = "<|pad|>";

    std::array<std::string_view, 3> all() const { return {label_tag, end_tag, pad_tag}; }

    void validate() const {
        const auto tags = all();
        for (std::size_t i = 0; i < tags.size(); ++i) {
            if (tags[i].empty()) throw ConfigError("special tags must be non-empty");
            if (tags[i].find_first_of("\t\r\n") != std::string_view::npos)
                throw ConfigError("special tag contains a tab or newline: " + std::string(tags[i]));
            for (std::size_t j = i + 1; j < tags.size(); ++j)
                if (tags[i] == tags[j]) throw ConfigError("special tags must be distinct: " + std::string(tags[i]));
        }
    }

    bool operator==(const SpecialTagSet&) const = default;
};

namespace base64 {

inline constexpr std::string_view kAlphabet =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string encode(std::string_view bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t v = (std::uint32_t(std::uint8_t(bytes[i])) << 16) |
                                (std::uint32_t(std::uint8_t(bytes[i + 1])) << 8) | std::uint8_t(bytes[i + 2]);
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += kAlphabet[v & 63];
    }
    const std::size_t rest = bytes.size() - i;
    if (rest == 1) {
        const std::uint32_t v = std::uint32_t(std::uint8_t(bytes[i])) << 16;
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += "==";
    } else if (rest == 2) {
        const std::uint32_t v = (std::uint32_t(std::uint8_t(bytes[i])) << 16) |
                                (std::uint32_t(std::uint8_t(bytes[i + 1])) << 8);
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

/// Strict decoder: padded input only, no whitespace. nullopt on malformed text.
inline std::optional<std::string> decode(std::string_view text) {
    if (text.size() % 4 != 0) return std::nullopt;
    auto value = [](char c) -> int {
        const auto pos = kAlphabet.find(c);
        return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
    };
    std::string out;
    for (std::size_t i = 0; i < text.size(); i += 4) {
        const bool last = i + 4 == text.size();
        int v[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = text[i + k];
            if (c == '=' && last && k >= 2) {
                v[k] = 0;
                ++pad;
            } else {
                if (pad > 0) return std::nullopt;
                v[k] = value(c);
                if (v[k] < 0) return std::nullopt;
            }
        }
        const std::uint32_t n = (std::uint32_t(v[0]) << 18) | (std::uint32_t(v[1]) << 12) |
                                (std::uint32_t(v[2]) << 6) | std::uint32_t(v[3]);
        out += static_cast<char>((n >> 16) & 0xFF);
        if (pad < 2) out += static_cast<char>((n >> 8) & 0xFF);
        if (pad < 1) out += static_cast<char>(n & 0xFF);
    }
    return out;
}

} // namespace base64

enum class DecodeMode {
    Bytes,   ///< raw concatenated bytes
    Display, ///< ill-formed UTF-8 replaced by U+FFFD
};

/// Trained byte-level BPE model. Immutable once built; every query is const
/// and safe to call concurrently.
class Tokenizer {
public:
    struct Merge {
        TokenId left;
        TokenId right;
        bool operator==(const Merge&) const = default;
    };

    /// Assembles and validates a model. `vocab[id]` is the byte spelling of id;
    /// `special_ids` gives the ids of (label, end, pad) in that order.
    Tokenizer(std::vector<std::string> vocab, std::vector<Merge> merges, SpecialTagSet tags,
              std::array<TokenId, 3> special_ids)
        : vocab_(std::move(vocab)), merges_(std::move(merges)), tags_(std::move(tags)), special_ids_(special_ids) {
        tags_.validate();
        build_indexes();
    }

    std::size_t vocab_size() const noexcept { return vocab_.size(); }
    const std::string& token_bytes(TokenId id) const { return vocab_.at(static_cast<std::size_t>(id)); }
    std::span<const std::string> vocab() const noexcept { return vocab_; }
    std::span<const Merge> merges() const noexcept { return merges_; }
    const SpecialTagSet& tags() const noexcept { return tags_; }

    TokenId label_id() const noexcept { return special_ids_[0]; }
    TokenId end_id() const noexcept { return special_ids_[1]; }
    TokenId pad_id() const noexcept { return special_ids_[2]; }
    bool is_special(TokenId id) const noexcept {
        return id == special_ids_[0] || id == special_ids_[1] || id == special_ids_[2];
    }

    /// Special tags are cut out first (earliest occurrence, longest tag on a
    /// tie); every remaining span is pre-tokenized and each unit is merged
    /// greedily by rank.
    std::vector<TokenId> encode(std::string_view text) const {
        std::vector<TokenId> out;
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t best = std::string_view::npos;
            std::size_t best_tag = 0;
            const auto tags = tags_.all();
            for (std::size_t t = 0; t < tags.size(); ++t) {
                const auto hit = text.find(tags[t], pos);
                if (hit == std::string_view::npos) continue;
                if (hit < best || (hit == best && tags[t].size() > tags[best_tag].size())) {
                    best = hit;
                    best_tag = t;
                }
            }
            const std::size_t stop = best == std::string_view::npos ? text.size() : best;
            encode_plain(text.substr(pos, stop - pos), out);
            if (best == std::string_view::npos) break;
            out.push_back(special_ids_[best_tag]);
            pos = best + tags[best_tag].size();
        }
        return out;
    }

    std::string decode(std::span<const TokenId> ids, DecodeMode mode = DecodeMode::Bytes) const {
        std::string out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const TokenId id = ids[i];
            if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size())
                throw InputError("token id " + std::to_string(id) + " at position " + std::to_string(i) +
                                 " is outside the vocabulary of size " + std::to_string(vocab_.size()));
            out += vocab_[static_cast<std::size_t>(id)];
        }
        return mode == DecodeMode::Display ? unicode::sanitize_utf8(out) : out;
    }

    /// Serialized file contents: vocab.txt, merges.txt, special_tokens.txt.
    struct Files {
        std::string vocab;
        std::string merges;
        std::string special;
    };

    Files serialize() const {
        Files f;
        for (std::size_t id = 0; id < vocab_.size(); ++id)
            f.vocab += base64::encode(vocab_[id]) + "\t" + std::to_string(id) + "\n";
        for (const auto& m : merges_)
            f.merges += base64::encode(token_bytes(m.left)) + " " + base64::encode(token_bytes(m.right)) + "\n";
        static constexpr std::array<std::string_view, 3> roles{"label", "end", "pad"};
        const auto tags = tags_.all();
        for (std::size_t k = 0; k < 3; ++k)
            f.special += std::string(roles[k]) + "\t" + std::to_string(special_ids_[k]) + "\t" + std::string(tags[k]) + "\n";
        return f;
    }

    /// FNV-1a over the canonical serialization; identifies the exact model.
    std::uint64_t fingerprint() const {
        const auto f = serialize();
        Fnv1a h;
        h.update(f.vocab);
        h.update("\x1f");
        h.update(f.merges);
        h.update("\x1f");
        h.update(f.special);
        return h.digest();
    }

    bool operator==(const Tokenizer& o) const {
        return vocab_ == o.vocab_ && merges_ == o.merges_ && tags_ == o.tags_ && special_ids_ == o.special_ids_;
    }

private:
    static std::uint64_t pair_key(TokenId l, TokenId r) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(l)) << 32) | static_cast<std::uint32_t>(r);
    }

    void build_indexes() {
        const std::size_t n = vocab_.size();
        for (std::size_t k = 0; k < 3; ++k) {
            const TokenId id = special_ids_[k];
            if (id < 0 || static_cast<std::size_t>(id) >= n)
                throw InputError("special tag id " + std::to_string(id) + " outside the vocabulary");
            if (vocab_[static_cast<std::size_t>(id)] != tags_.all()[k])
                throw InputError("special tag id " + std::to_string(id) + " is not spelled " + std::string(tags_.all()[k]));
        }
        if (special_ids_[0] == special_ids_[1] || special_ids_[0] == special_ids_[2] || special_ids_[1] == special_ids_[2])
            throw InputError("special tags must map to distinct ids");

        for (std::size_t id = 0; id < n; ++id) {
            if (is_special(static_cast<TokenId>(id))) continue;
            if (vocab_[id].empty()) throw InputError("token " + std::to_string(id) + " is empty");
            if (!by_bytes_.emplace(vocab_[id], static_cast<TokenId>(id)).second)
                throw InputError("duplicate token spelling for id " + std::to_string(id));
        }
        for (int b = 0; b < 256; ++b) {
            const auto it = by_bytes_.find(std::string(1, static_cast<char>(b)));
            if (it == by_bytes_.end()) throw InputError("byte token " + std::to_string(b) + " missing");
            byte_ids_[static_cast<std::size_t>(b)] = it->second;
        }

        // Merges must be applicable in order: both parts exist by the time the
        // rule is reached, and each rule appears once.
        std::vector<char> available(n, 0);
        for (int b = 0; b < 256; ++b) available[static_cast<std::size_t>(byte_ids_[static_cast<std::size_t>(b)])] = 1;
        std::vector<char> produced(n, 0);
        for (std::size_t rank = 0; rank < merges_.size(); ++rank) {
            const auto& m = merges_[rank];
            auto valid = [&](TokenId id) {
                return id >= 0 && static_cast<std::size_t>(id) < n && !is_special(id) && available[static_cast<std::size_t>(id)];
            };
            if (!valid(m.left) || !valid(m.right))
                throw InputError("merge " + std::to_string(rank) + " uses a token not yet available");
            const auto it = by_bytes_.find(vocab_[static_cast<std::size_t>(m.left)] + vocab_[static_cast<std::size_t>(m.right)]);
            if (it == by_bytes_.end())
                throw InputError("merge " + std::to_string(rank) + " produces a token missing from the vocabulary");
            if (!rank_.emplace(pair_key(m.left, m.right), MergeInfo{rank, it->second}).second)
                throw InputError("duplicate merge at rank " + std::to_string(rank));
            available[static_cast<std::size_t>(it->second)] = 1;
            produced[static_cast<std::size_t>(it->second)] = 1;
        }
        for (std::size_t id = 0; id < n; ++id) {
            if (is_special(static_cast<TokenId>(id)) || vocab_[id].size() == 1) continue;
            if (!produced[id]) throw InputError("token " + std::to_string(id) + " is not produced by any merge");
        }
    }

    void encode_plain(std::string_view text, std::vector<TokenId>& out) const {
        std::vector<TokenId> sym;
        for (const auto unit : unicode::pretokenize(text)) {
            sym.clear();
            for (const char c : unit) sym.push_back(byte_ids_[static_cast<std::uint8_t>(c)]);
            while (sym.size() > 1) {
                std::size_t best_rank = SIZE_MAX;
                MergeInfo best{};
                for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
                    const auto it = rank_.find(pair_key(sym[i], sym[i + 1]));
                    if (it != rank_.end() && it->second.rank < best_rank) {
                        best_rank = it->second.rank;
                        best = it->second;
                    }
                }
                if (best_rank == SIZE_MAX) break;
                const auto& m = merges_[best_rank];
                std::size_t w = 0;
                for (std::size_t r = 0; r < sym.size();) {
                    if (r + 1 < sym.size() && sym[r] == m.left && sym[r + 1] == m.right) {
                        sym[w++] = best.result;
                        r += 2;
                    } else {
                        sym[w++] = sym[r++];
                    }
                }
                sym.resize(w);
            }
            out.insert(out.end(), sym.begin(), sym.end());
        }
    }

    struct MergeInfo {
        std::size_t rank;
        TokenId result;
    };

    std::vector<std::string> vocab_;
    std::vector<Merge> merges_;
    SpecialTagSet tags_;
    std::array<TokenId, 3> special_ids_;
    std::unordered_map<std::string, TokenId> by_bytes_;
    std::array<TokenId, 256> byte_ids_{};
    std::unordered_map<std::uint64_t, MergeInfo> rank_;
};

/// Accumulates pre-token multiplicities over a document stream. Special tag
/// spellings are cut out of documents and never counted.
class WordCounter {
public:
    explicit WordCounter(SpecialTagSet tags = {}) : tags_(std::move(tags)) { tags_.validate(); }

    void add(std::string_view doc) {
        ++documents_;
        bytes_ += doc.size();
        std::size_t pos = 0;
        while (pos < doc.size()) {
            std::size_t best = std::string_view::npos;
            std::size_t len = 0;
            for (const auto tag : tags_.all()) {
                const auto hit = doc.find(tag, pos);
                if (hit != std::string_view::npos && (hit < best || (hit == best && tag.size() > len))) {
                    best = hit;
                    len = tag.size();
                }
            }
            const std::size_t stop = best == std::string_view::npos ? doc.size() : best;
            for (const auto unit : unicode::pretokenize(doc.substr(pos, stop - pos))) ++counts_[std::string(unit)];
            if (best == std::string_view::npos) break;
            pos = best + len;
        }
    }

    /// Adds all documents, counting over up to `threads` workers and summing
    /// the partial maps. Counts are order-independent, so the result does not
    /// depend on the worker count.
    void add_all(std::span<const std::string> docs, std::size_t threads = thread_count()) {
        threads = std::max<std::size_t>(1, std::min(threads, docs.size()));
        std::vector<WordCounter> parts(threads, WordCounter(tags_));
        const std::size_t block = (docs.size() + threads - 1) / threads;
        parallel_for(
            threads,
            [&](std::size_t w) {
                for (std::size_t i = w * block; i < std::min(docs.size(), (w + 1) * block); ++i) parts[w].add(docs[i]);
            },
            threads);
        for (auto& p : parts) merge(p);
    }

    void merge(const WordCounter& other) {
        documents_ += other.documents_;
        bytes_ += other.bytes_;
        for (const auto& [w, c] : other.counts_) counts_[w] += c;
    }

    const std::unordered_map<std::string, std::uint64_t>& counts() const noexcept { return counts_; }
    const SpecialTagSet& tags() const noexcept { return tags_; }
    std::size_t documents() const noexcept { return documents_; }
    std::size_t bytes() const noexcept { return bytes_; }

private:
    SpecialTagSet tags_;
    std::unordered_map<std::string, std::uint64_t> counts_;
    std::size_t documents_ = 0;
    std::size_t bytes_ = 0;
};

struct BpeTrainOptions {
    std::size_t threads = thread_count();
    std::function<void(const std::string&)> warn;
};

/// Trains merges until the vocabulary (bytes + merged tokens + 3 tags) reaches
/// `target_vocab_size`, or until no adjacent pair occurs at least twice.
///
/// Selection: highest pair count; ties go to the pair whose concatenated bytes
/// compare lexicographically smallest, then to the smaller left part. A merge
/// whose concatenation already names a token reuses that id.
inline Tokenizer train_bpe(const WordCounter& counter, std::size_t target_vocab_size,
                           const BpeTrainOptions& options = {}) {
    const SpecialTagSet& tags = counter.tags();
    if (target_vocab_size < 256 + 3)
        throw ConfigError("target vocabulary size " + std::to_string(target_vocab_size) +
                          " is below 256 byte tokens + 3 special tags");
    if (counter.documents() == 0 || counter.bytes() == 0) throw InputError("corpus is empty");

    std::vector<std::string> vocab;
    vocab.reserve(target_vocab_size);
    std::unordered_map<std::string, TokenId> by_bytes;
    for (int b = 0; b < 256; ++b) {
        vocab.emplace_back(1, static_cast<char>(b));
        by_bytes.emplace(vocab.back(), b);
    }
    const std::size_t merge_budget = target_vocab_size - 3;

    // Words in lexicographic order so every downstream structure is
    // independent of hash-map iteration order.
    std::vector<std::pair<std::string, std::uint64_t>> sorted(counter.counts().begin(), counter.counts().end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::vector<TokenId>> words(sorted.size());
    std::vector<std::uint64_t> freq(sorted.size());
    for (std::size_t w = 0; w < sorted.size(); ++w) {
        freq[w] = sorted[w].second;
        for (const char c : sorted[w].first) words[w].push_back(static_cast<std::uint8_t>(c));
    }

    auto key = [](TokenId l, TokenId r) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(l)) << 32) | static_cast<std::uint32_t>(r);
    };
    std::unordered_map<std::uint64_t, std::int64_t> pair_count;
    std::unordered_map<std::uint64_t, std::unordered_set<std::uint32_t>> where;
    auto account = [&](std::size_t w, std::int64_t sign) {
        const auto& s = words[w];
        for (std::size_t i = 0; i + 1 < s.size(); ++i) {
            const auto k = key(s[i], s[i + 1]);
            pair_count[k] += sign * static_cast<std::int64_t>(freq[w]);
            if (sign > 0) where[k].insert(static_cast<std::uint32_t>(w));
        }
    };
    for (std::size_t w = 0; w < words.size(); ++w) account(w, +1);

    struct Candidate {
        std::int64_t count;
        TokenId left;
        TokenId right;
    };
    // True when a ranks below b (b is preferred).
    auto worse = [&](const Candidate& a, const Candidate& b) {
        if (a.count != b.count) return a.count < b.count;
        const std::string ca = vocab[static_cast<std::size_t>(a.left)] + vocab[static_cast<std::size_t>(a.right)];
        const std::string cb = vocab[static_cast<std::size_t>(b.left)] + vocab[static_cast<std::size_t>(b.right)];
        if (ca != cb) return ca > cb;
        return vocab[static_cast<std::size_t>(a.left)] > vocab[static_cast<std::size_t>(b.left)];
    };
    std::priority_queue<Candidate, std::vector<Candidate>, decltype(worse)> heap(worse);
    for (const auto& [k, c] : pair_count)
        if (c > 0) heap.push({c, static_cast<TokenId>(k >> 32), static_cast<TokenId>(k & 0xFFFFFFFFu)});

    std::vector<Tokenizer::Merge> merges;
    while (vocab.size() < merge_budget) {
        std::optional<Candidate> best;
        while (!heap.empty()) {
            const Candidate top = heap.top();
            heap.pop();
            const auto it = pair_count.find(key(top.left, top.right));
            if (it != pair_count.end() && it->second == top.count && top.count > 0) {
                best = top;
                break;
            }
        }
        if (!best || best->count < 2) {
            if (options.warn)
                options.warn("corpus exhausted after " + std::to_string(merges.size()) +
                             " merges: no adjacent pair repeats; vocabulary has " +
                             std::to_string(vocab.size() + 3) + " of the requested " +
                             std::to_string(target_vocab_size) + " ids");
            break;
        }
        const TokenId left = best->left;
        const TokenId right = best->right;
        const std::string joined = vocab[static_cast<std::size_t>(left)] + vocab[static_cast<std::size_t>(right)];
        TokenId result;
        if (const auto it = by_bytes.find(joined); it != by_bytes.end()) {
            result = it->second;
        } else {
            result = static_cast<TokenId>(vocab.size());
            vocab.push_back(joined);
            by_bytes.emplace(joined, result);
        }
        merges.push_back({left, right});

        const auto k = key(left, right);
        std::vector<std::uint32_t> affected(where[k].begin(), where[k].end());
        std::sort(affected.begin(), affected.end());
        std::unordered_set<std::uint64_t> touched;
        for (const auto w : affected) {
            auto& s = words[w];
            bool present = false;
            for (std::size_t i = 0; i + 1 < s.size(); ++i)
                if (s[i] == left && s[i + 1] == right) present = true;
            if (!present) continue;
            account(w, -1);
            for (std::size_t i = 0; i + 1 < s.size(); ++i) touched.insert(key(s[i], s[i + 1]));
            std::size_t out = 0;
            for (std::size_t r = 0; r < s.size();) {
                if (r + 1 < s.size() && s[r] == left && s[r + 1] == right) {
                    s[out++] = result;
                    r += 2;
                } else {
                    s[out++] = s[r++];
                }
            }
            s.resize(out);
            account(w, +1);
            for (std::size_t i = 0; i + 1 < s.size(); ++i) touched.insert(key(s[i], s[i + 1]));
        }
        pair_count.erase(k);
        where.erase(k);
        std::vector<std::uint64_t> order(touched.begin(), touched.end());
        std::sort(order.begin(), order.end());
        for (const auto t : order) {
            const auto it = pair_count.find(t);
            if (it == pair_count.end()) continue;
            if (it->second <= 0) {
                pair_count.erase(it);
                where.erase(t);
                continue;
            }
            heap.push({it->second, static_cast<TokenId>(t >> 32), static_cast<TokenId>(t & 0xFFFFFFFFu)});
        }
    }

    std::array<TokenId, 3> special_ids{};
    const auto all = tags.all();
    for (std::size_t t = 0; t < 3; ++t) {
        special_ids[t] = static_cast<TokenId>(vocab.size());
        vocab.emplace_back(all[t]);
    }
    return Tokenizer(std::move(vocab), std::move(merges), tags, special_ids);
}

inline Tokenizer train_bpe(std::span<const std::string> corpus, std::size_t target_vocab_size,
                           const SpecialTagSet& tags = {}, const BpeTrainOptions& options = {}) {
    if (target_vocab_size < 256 + 3)
        throw ConfigError("target vocabulary size " + std::to_string(target_vocab_size) +
                          " is below 256 byte tokens + 3 special tags");
    WordCounter counter(tags);
    counter.add_all(corpus, options.threads);
    return train_bpe(counter, target_vocab_size, options);
}

namespace detail {

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, std::string_view content) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("write failed for " + p.string());
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto nl = text.find('\n', pos);
        const auto end = nl == std::string_view::npos ? text.size() : nl;
        lines.push_back(text.substr(pos, end - pos));
        pos = end + 1;
    }
    return lines;
}

inline long long parse_int(std::string_view s, const std::string& file, std::size_t line) {
    if (s.empty()) throw ParseError(file, line, "expected an integer");
    long long v = 0;
    for (const char c : s) {
        if (c < '0' || c > '9') throw ParseError(file, line, "expected an integer, got '" + std::string(s) + "'");
        v = v * 10 + (c - '0');
        if (v > INT32_MAX) throw ParseError(file, line, "integer out of range");
    }
    return v;
}

} // namespace detail

inline void save_tokenizer(const Tokenizer& tok, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto f = tok.serialize();
    detail::write_file(dir / "vocab.txt", f.vocab);
    detail::write_file(dir / "merges.txt", f.merges);
    detail::write_file(dir / "special_tokens.txt", f.special);
}

inline Tokenizer load_tokenizer(const std::filesystem::path& dir) {
    const std::string vocab_path = (dir / "vocab.txt").string();
    const std::string merges_path = (dir / "merges.txt").string();
    const std::string special_path = (dir / "special_tokens.txt").string();

    std::vector<std::string> vocab;
    std::unordered_map<std::string, TokenId> lookup;
    {
        const auto text = detail::read_file(vocab_path);
        const auto lines = detail::split_lines(text);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            const auto tab = lines[i].find('\t');
            if (tab == std::string_view::npos) throw ParseError(vocab_path, i + 1, "expected '<base64>\\t<id>'");
            const auto bytes = base64::decode(lines[i].substr(0, tab));
            if (!bytes) throw ParseError(vocab_path, i + 1, "malformed base64");
            const auto id = detail::parse_int(lines[i].substr(tab + 1), vocab_path, i + 1);
            if (static_cast<std::size_t>(id) != i)
                throw ParseError(vocab_path, i + 1, "ids must be dense and ascending; expected " + std::to_string(i));
            vocab.push_back(*bytes);
        }
    }

    SpecialTagSet tags;
    std::array<TokenId, 3> special_ids{-1, -1, -1};
    {
        const auto text = detail::read_file(special_path);
        const auto lines = detail::split_lines(text);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            const auto t1 = lines[i].find('\t');
            const auto t2 = t1 == std::string_view::npos ? t1 : lines[i].find('\t', t1 + 1);
            if (t2 == std::string_view::npos) throw ParseError(special_path, i + 1, "expected '<role>\\t<id>\\t<tag>'");
            const auto role = lines[i].substr(0, t1);
            const auto id = static_cast<TokenId>(detail::parse_int(lines[i].substr(t1 + 1, t2 - t1 - 1), special_path, i + 1));
            const std::string tag(lines[i].substr(t2 + 1));
            std::size_t slot;
            if (role == "label") {
                slot = 0, tags.label_tag = tag;
            } else if (role == "end") {
                slot = 1, tags.end_tag = tag;
            } else if (role == "pad") {
                slot = 2, tags.pad_tag = tag;
            } else {
                throw ParseError(special_path, i + 1, "unknown role '" + std::string(role) + "'");
            }
            if (special_ids[slot] != -1) throw ParseError(special_path, i + 1, "role listed twice");
            special_ids[slot] = id;
        }
        for (const auto id : special_ids)
            if (id == -1) throw ParseError(special_path, lines.size() + 1, "missing label/end/pad role");
    }
    for (std::size_t id = 0; id < vocab.size(); ++id) {
        const bool special = std::find(special_ids.begin(), special_ids.end(), static_cast<TokenId>(id)) != special_ids.end();
        if (!special) lookup.emplace(vocab[id], static_cast<TokenId>(id));
    }

    std::vector<Tokenizer::Merge> merges;
    {
        std::unordered_set<std::uint64_t> seen;
        const auto text = detail::read_file(merges_path);
        const auto lines = detail::split_lines(text);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            const auto sp = lines[i].find(' ');
            if (sp == std::string_view::npos) throw ParseError(merges_path, i + 1, "expected '<left> <right>'");
            const auto l = base64::decode(lines[i].substr(0, sp));
            const auto r = base64::decode(lines[i].substr(sp + 1));
            if (!l || !r) throw ParseError(merges_path, i + 1, "malformed base64");
            const auto li = lookup.find(*l);
            const auto ri = lookup.find(*r);
            if (li == lookup.end() || ri == lookup.end())
                throw ParseError(merges_path, i + 1, "merge refers to a token missing from the vocabulary");
            const auto k = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(li->second)) << 32) |
                           static_cast<std::uint32_t>(ri->second);
            if (!seen.insert(k).second) throw ParseError(merges_path, i + 1, "duplicate merge");
            merges.push_back({li->second, ri->second});
        }
    }
    try {
        return Tokenizer(std::move(vocab), std::move(merges), std::move(tags), special_ids);
    } catch (const InputError& e) {
        throw ParseError(dir.string(), 0, e.what());
    }
}

} // namespace lexforge
