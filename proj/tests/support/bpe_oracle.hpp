#pragma once

// Brute-force BPE reference: keeps every pre-token occurrence separately and
// recounts all adjacent pairs from scratch after each fusion.

#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lexforge/tokenizer.hpp"
#include "lexforge/unicode.hpp"

namespace lexforge::testing {

using StringMerge = std::pair<std::string, std::string>;

inline std::vector<StringMerge> brute_force_merges(const std::vector<std::string>& docs, std::size_t target_vocab_size,
                                                   const SpecialTagSet& tags = {}) {
    std::vector<std::vector<std::string>> units;
    for (const auto& doc : docs) {
        // Cut tag spellings out, then pre-tokenize what remains.
        std::vector<std::string_view> pieces;
        std::string_view rest = doc;
        while (!rest.empty()) {
            std::size_t cut = std::string_view::npos, len = 0;
            for (const auto tag : tags.all()) {
                const auto hit = rest.find(tag);
                if (hit != std::string_view::npos && (hit < cut || (hit == cut && tag.size() > len))) cut = hit, len = tag.size();
            }
            if (cut == std::string_view::npos) {
                pieces.push_back(rest);
                break;
            }
            pieces.push_back(rest.substr(0, cut));
            rest = rest.substr(cut + len);
        }
        for (const auto piece : pieces)
            for (const auto unit : unicode::pretokenize(piece)) {
                std::vector<std::string> symbols;
                for (const char c : unit) symbols.emplace_back(1, c);
                units.push_back(std::move(symbols));
            }
    }

    std::set<std::string> vocab;
    for (int b = 0; b < 256; ++b) vocab.insert(std::string(1, static_cast<char>(b)));
    std::vector<StringMerge> merges;
    while (vocab.size() < target_vocab_size - 3) {
        std::map<StringMerge, long> counts;
        for (const auto& u : units)
            for (std::size_t i = 0; i + 1 < u.size(); ++i) ++counts[{u[i], u[i + 1]}];
        const StringMerge* best = nullptr;
        long best_count = 0;
        for (const auto& [pair, count] : counts) {
            bool better = false;
            if (count > best_count) {
                better = true;
            } else if (count == best_count) {
                const auto joined = pair.first + pair.second;
                const auto best_joined = best->first + best->second;
                better = joined < best_joined || (joined == best_joined && pair.first < best->first);
            }
            if (better) best = &pair, best_count = count;
        }
        if (best == nullptr || best_count < 2) break;
        const StringMerge chosen = *best;
        merges.push_back(chosen);
        vocab.insert(chosen.first + chosen.second);
        for (auto& u : units) {
            std::vector<std::string> next;
            for (std::size_t i = 0; i < u.size();) {
                if (i + 1 < u.size() && u[i] == chosen.first && u[i + 1] == chosen.second) {
                    next.push_back(chosen.first + chosen.second);
                    i += 2;
                } else {
                    next.push_back(u[i++]);
                }
            }
            u = std::move(next);
        }
    }
    return merges;
}

inline std::vector<StringMerge> merges_as_strings(const Tokenizer& tok) {
    std::vector<StringMerge> out;
    for (const auto& m : tok.merges()) out.emplace_back(tok.token_bytes(m.left), tok.token_bytes(m.right));
    return out;
}

} // namespace lexforge::testing
