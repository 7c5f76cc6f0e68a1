#pragma once

// Corpus ingestion into tokenized binary shards, deterministic window
// sampling for pre-training, and token-coverage arithmetic.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lexforge/binary_io.hpp"
#include "lexforge/error.hpp"
#include "lexforge/hash.hpp"
#include "lexforge/parallel.hpp"
#include "lexforge/rng.hpp"
#include "lexforge/tokenizer.hpp"
#include "lexforge/trainer.hpp"
#include "lexforge/unicode.hpp"

namespace lexforge {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Shards

struct TokenShard {
    static constexpr char kMagic[4] = {'L', 'E', 'X', 'D'};
    static constexpr std::uint32_t kVersion = 1;

    std::uint64_t fingerprint = 0;
    std::vector<std::uint32_t> ids;
};

inline std::string serialize_shard(const TokenShard& s) {
    binary::Writer w;
    w.put_bytes(std::string_view(TokenShard::kMagic, 4));
    w.put(TokenShard::kVersion);
    w.put(s.fingerprint);
    w.put(static_cast<std::uint64_t>(s.ids.size()));
    for (const auto id : s.ids) w.put(id);
    return w.take();
}

inline TokenShard parse_shard(std::string_view data, const std::string& origin) {
    if (data.size() < 4 || data.substr(0, 4) != std::string_view(TokenShard::kMagic, 4))
        throw IntegrityError(origin + ": not a token shard (bad magic)");
    binary::Reader r(data, origin);
    r.get_bytes(4);
    const auto version = r.get<std::uint32_t>();
    if (version != TokenShard::kVersion) throw VersionError(origin + ": unsupported shard format", version, TokenShard::kVersion);
    TokenShard s;
    s.fingerprint = r.get<std::uint64_t>();
    const auto count = r.get<std::uint64_t>();
    if (r.remaining() != count * 4)
        throw IntegrityError(origin + ": header declares " + std::to_string(count) + " tokens but payload holds " +
                             std::to_string(r.remaining()) + " bytes");
    s.ids.resize(count);
    for (auto& id : s.ids) id = r.get<std::uint32_t>();
    return s;
}

inline void write_shard(const fs::path& path, const TokenShard& s) { detail::write_file(path, serialize_shard(s)); }

inline TokenShard read_shard(const fs::path& path) { return parse_shard(detail::read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Index

struct ShardEntry {
    std::string path; ///< relative to the index file's directory
    std::uint64_t count = 0;
    std::uint64_t offset = 0; ///< cumulative tokens before this shard
};

struct DatasetIndex {
    std::vector<ShardEntry> shards;
    std::uint64_t total_tokens = 0;
    fs::path root; ///< directory the shard paths are relative to

    /// `path<TAB>count` per shard, then a `# total<TAB>N` footer.
    std::string serialize() const {
        std::string out;
        for (const auto& s : shards) out += s.path + "\t" + std::to_string(s.count) + "\n";
        out += "# total\t" + std::to_string(total_tokens) + "\n";
        return out;
    }

    static DatasetIndex parse(std::string_view text, const fs::path& root, const std::string& origin) {
        DatasetIndex idx;
        idx.root = root;
        const auto lines = detail::split_lines(text);
        std::optional<std::uint64_t> footer;
        for (std::size_t i = 0; i < lines.size(); ++i) {
            const std::string_view line = lines[i];
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string_view::npos) throw ParseError(origin, i + 1, "expected 'path<TAB>count'");
            const auto field = line.substr(tab + 1);
            std::uint64_t count = 0;
            const auto res = std::from_chars(field.data(), field.data() + field.size(), count);
            if (field.empty() || res.ec != std::errc() || res.ptr != field.data() + field.size())
                throw ParseError(origin, i + 1, "bad token count '" + std::string(field) + "'");
            if (line.substr(0, tab) == "# total") {
                footer = count;
                continue;
            }
            if (footer) throw ParseError(origin, i + 1, "shard listed after the totals footer");
            if (count == 0) throw ParseError(origin, i + 1, "empty shard");
            idx.shards.push_back({std::string(line.substr(0, tab)), count, idx.total_tokens});
            idx.total_tokens += count;
        }
        if (!footer) throw ParseError(origin, lines.size(), "missing '# total' footer");
        if (*footer != idx.total_tokens)
            throw ParseError(origin, lines.size(),
                             "footer total " + std::to_string(*footer) + " != sum of shard counts " + std::to_string(idx.total_tokens));
        return idx;
    }
};

inline DatasetIndex load_index(const fs::path& path) {
    return DatasetIndex::parse(detail::read_file(path), path.parent_path(), path.string());
}

// ---------------------------------------------------------------------------
// Ingest

struct IngestOptions {
    std::uint64_t shard_size_tokens = 1u << 24;
    std::size_t threads = thread_count();
    std::function<void(const std::string&)> warn;
};

struct IngestResult {
    DatasetIndex index;
    std::size_t documents = 0;
    std::size_t skipped_files = 0;
    fs::path index_path;
};

/// .txt and .jsonl files under `dir`, sorted by path.
inline std::vector<fs::path> discover_corpus(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("corpus directory " + dir.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const auto ext = e.path().extension();
        if (ext == ".txt" || ext == ".jsonl") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

/// Documents in one corpus file: the whole file for .txt, the `text` field of
/// every record for .jsonl. Throws InputError when the file cannot be decoded.
inline std::vector<std::string> read_documents(const fs::path& file) {
    const std::string raw = detail::read_file(file);
    std::vector<std::string> docs;
    if (file.extension() == ".jsonl") {
        const auto lines = detail::split_lines(raw);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            if (lines[i].find_first_not_of(" \t\r") == std::string_view::npos) continue;
            nlohmann::json rec;
            try {
                rec = nlohmann::json::parse(lines[i]);
            } catch (const nlohmann::json::exception& e) {
                throw InputError(file.string() + ":" + std::to_string(i + 1) + ": invalid JSON (" + e.what() + ")");
            }
            if (!rec.is_object() || !rec.contains("text") || !rec["text"].is_string())
                throw InputError(file.string() + ":" + std::to_string(i + 1) + ": record has no string 'text' field");
            docs.push_back(rec["text"].get<std::string>());
        }
    } else {
        if (!unicode::is_valid_utf8(raw)) throw InputError(file.string() + ": not valid UTF-8");
        docs.push_back(raw);
    }
    return docs;
}

/// Tokenizes every document, appends the end-tag id after each, and streams
/// the ids into shards of at most shard_size_tokens. Files are tokenized in
/// parallel but written in sorted order, so output is deterministic.
inline IngestResult ingest(const fs::path& input_dir, const Tokenizer& tok, const fs::path& out_dir,
                           const IngestOptions& opts = {}) {
    if (opts.shard_size_tokens == 0) throw ConfigError("shard_size_tokens must be positive");
    const auto files = discover_corpus(input_dir);
    fs::create_directories(out_dir);
    const std::uint64_t fp = tok.fingerprint();
    const auto end_id = static_cast<std::uint32_t>(tok.end_id());

    IngestResult result;
    TokenShard current{fp, {}};
    auto flush = [&] {
        if (current.ids.empty()) return;
        char name[32];
        std::snprintf(name, sizeof name, "shard_%05zu.bin", result.index.shards.size());
        write_shard(out_dir / name, current);
        result.index.shards.push_back({name, current.ids.size(), result.index.total_tokens});
        result.index.total_tokens += current.ids.size();
        current.ids.clear();
    };

    constexpr std::size_t kGroup = 64; // files tokenized concurrently
    for (std::size_t lo = 0; lo < files.size(); lo += kGroup) {
        const std::size_t hi = std::min(files.size(), lo + kGroup);
        std::vector<std::vector<std::vector<TokenId>>> encoded(hi - lo);
        std::vector<std::string> failures(hi - lo);
        parallel_for(
            hi - lo,
            [&](std::size_t i) {
                try {
                    for (const auto& doc : read_documents(files[lo + i]))
                        if (!doc.empty()) encoded[i].push_back(tok.encode(doc));
                } catch (const Error& e) {
                    encoded[i].clear();
                    failures[i] = e.what();
                }
            },
            opts.threads);
        for (std::size_t i = 0; i < hi - lo; ++i) {
            if (!failures[i].empty()) {
                ++result.skipped_files;
                if (opts.warn) opts.warn("skipping " + failures[i]);
                continue;
            }
            for (const auto& ids : encoded[i]) {
                ++result.documents;
                auto emit = [&](std::uint32_t id) {
                    current.ids.push_back(id);
                    if (current.ids.size() == opts.shard_size_tokens) flush();
                };
                for (const auto id : ids) emit(static_cast<std::uint32_t>(id));
                emit(end_id);
            }
        }
    }
    flush();
    if (result.documents == 0)
        throw InputError("no usable documents under " + input_dir.string() + " (" + std::to_string(result.skipped_files) +
                         " file(s) skipped)");
    result.index.root = out_dir;
    result.index_path = out_dir / "index.tsv";
    detail::write_file(result.index_path, result.index.serialize());
    return result;
}

// ---------------------------------------------------------------------------
// Sampling

/// All shard tokens of an index, concatenated in index order. Without an
/// expected fingerprint, every shard must match the first one.
inline std::vector<std::int32_t> load_tokens(const DatasetIndex& index, std::optional<std::uint64_t> expected,
                                             std::size_t vocab_size) {
    std::vector<std::int32_t> tokens;
    tokens.reserve(index.total_tokens);
    for (const auto& e : index.shards) {
        const auto path = index.root / e.path;
        const auto shard = read_shard(path);
        if (!expected) expected = shard.fingerprint;
        if (shard.fingerprint != *expected)
            throw InputError(path.string() + " was tokenized with tokenizer " + to_hex(shard.fingerprint) +
                             ", expected " + to_hex(*expected));
        if (shard.ids.size() != e.count)
            throw IntegrityError(path.string() + " holds " + std::to_string(shard.ids.size()) + " tokens but the index lists " +
                                 std::to_string(e.count));
        for (const auto id : shard.ids) {
            if (id >= vocab_size)
                throw InputError(path.string() + ": token id " + std::to_string(id) + " outside vocabulary of size " +
                                 std::to_string(vocab_size));
            tokens.push_back(static_cast<std::int32_t>(id));
        }
    }
    return tokens;
}

/// Contiguous windows of seq_len + 1 tokens aligned to multiples of
/// seq_len + 1, visited in a seeded permutation per epoch. The cursor counts
/// windows handed out so far; epoch e uses seed + e.
class WindowSampler final : public BatchSource {
public:
    WindowSampler(std::vector<std::int32_t> tokens, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed)
        : tokens_(std::move(tokens)), batch_(batch_size), window_(seq_len + 1), seed_(seed) {
        if (batch_size == 0 || seq_len == 0) throw ConfigError("batch_size and seq_len must be positive");
        windows_ = tokens_.size() / window_;
        if (windows_ < batch_) {
            std::size_t fits = tokens_.size() / batch_;
            throw InputError("corpus of " + std::to_string(tokens_.size()) + " tokens cannot fill a batch of " +
                             std::to_string(batch_) + " windows of " + std::to_string(window_) +
                             " tokens; use seq_len <= " + std::to_string(fits > 1 ? fits - 1 : 0));
        }
    }

    std::size_t windows_per_epoch() const noexcept { return windows_; }

    /// Start offset of the window handed out at position `cursor`.
    std::size_t window_start(std::uint64_t cursor) {
        const std::uint64_t epoch = cursor / windows_;
        if (epoch != perm_epoch_ || perm_.empty()) {
            perm_.resize(windows_);
            for (std::size_t i = 0; i < windows_; ++i) perm_[i] = i;
            Rng rng(seed_ + epoch);
            rng.shuffle(perm_);
            perm_epoch_ = epoch;
        }
        return perm_[cursor % windows_] * window_;
    }

    /// ids[batch, seq_len + 1] starting at `cursor`; returns the next cursor.
    std::pair<Batch, std::uint64_t> sample(std::uint64_t cursor) {
        Batch b;
        b.batch = batch_;
        b.seq = window_;
        b.ids.reserve(batch_ * window_);
        for (std::size_t i = 0; i < batch_; ++i) {
            const auto start = window_start(cursor + i);
            b.ids.insert(b.ids.end(), tokens_.begin() + static_cast<std::ptrdiff_t>(start),
                         tokens_.begin() + static_cast<std::ptrdiff_t>(start + window_));
        }
        return {std::move(b), cursor + batch_};
    }

    Batch next() override {
        auto [b, c] = sample(cursor_);
        cursor_ = c;
        return b;
    }
    std::uint64_t cursor() const override { return cursor_; }
    void seek(std::uint64_t c) override { cursor_ = c; }

private:
    std::vector<std::int32_t> tokens_;
    std::size_t batch_, window_;
    std::uint64_t seed_;
    std::size_t windows_ = 0;
    std::vector<std::size_t> perm_;
    std::uint64_t perm_epoch_ = 0;
    std::uint64_t cursor_ = 0;
};

/// Fraction of a corpus consumed by total_steps * batch_size * seq_len tokens.
inline double coverage(std::uint64_t total_steps, std::uint64_t batch_size, std::uint64_t seq_len, double total_tokens) {
    if (total_steps == 0 || batch_size == 0 || seq_len == 0 || !(total_tokens > 0))
        throw InputError("coverage needs positive arguments");
    return static_cast<double>(total_steps) * static_cast<double>(batch_size) * static_cast<double>(seq_len) / total_tokens;
}

/// Token budget of the published regime against both stated corpus sizes.
/// The stated corpus size (about 60 billion tokens) and coverage (about
/// 10.6%) cannot both hold; the text reports both rather than picking one.
inline std::string published_coverage_note() {
    constexpr std::uint64_t steps = 350000, batch = 8, seq = 2048;
    const double budget = static_cast<double>(steps * batch * seq);
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "%llu steps x %llu x %llu = %.0f tokens: %.2f%% of a 54.1e9-token corpus, %.2f%% of a 60e9-token "
                  "corpus. The stated coverage (about 10.6%%) implies about %.1fe9 corpus tokens, not the stated "
                  "60e9; both figures are kept as published.",
                  static_cast<unsigned long long>(steps), static_cast<unsigned long long>(batch),
                  static_cast<unsigned long long>(seq), budget, 100 * coverage(steps, batch, seq, 54.1e9),
                  100 * coverage(steps, batch, seq, 60e9), budget / 0.106 / 1e9);
    return buf;
}

} // namespace lexforge
