#pragma once

// Classification by fine-tuning an unmodified language model on
// `(text)<|label|>(label)` sequences and scoring label continuations, plus the
// multiple-choice to multiple-binary conversion.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "lexforge/error.hpp"
#include "lexforge/model.hpp"
#include "lexforge/parallel.hpp"
#include "lexforge/rng.hpp"
#include "lexforge/tokenizer.hpp"
#include "lexforge/trainer.hpp"

namespace lexforge {

struct LabeledExample {
    std::string text;
    std::string label;
    std::size_t line = 0; ///< source line, 0 when not read from a file
};

struct MultipleChoiceExample {
    static constexpr std::size_t kChoices = 5;
    std::string context;
    std::array<std::string, kChoices> choices;
    std::size_t answer = 0;
    std::size_t line = 0; ///< source line, 0 when not read from a file

    void validate() const {
        if (answer >= kChoices) throw InputError("answer index " + std::to_string(answer) + " is outside 0-4");
        for (std::size_t i = 0; i < kChoices; ++i)
            for (std::size_t j = i + 1; j < kChoices; ++j)
                if (choices[i] == choices[j])
                    throw InputError("choices " + std::to_string(i) + " and " + std::to_string(j) + " are identical");
    }
};

inline constexpr std::string_view kTrueLabel = "True";
inline constexpr std::string_view kFalseLabel = "False";

/// Ordered candidate labels with their cached tokenizations. Order is the
/// manifest order and decides ties.
class LabelSet {
public:
    LabelSet(std::vector<std::string> labels, const Tokenizer& tok) : labels_(std::move(labels)) {
        std::unordered_set<std::string> seen;
        for (const auto& l : labels_) {
            if (!seen.insert(l).second) throw InputError("duplicate label '" + l + "'");
            ids_.push_back(tok.encode(l));
            if (ids_.back().empty()) throw InputError("label '" + l + "' tokenizes to nothing");
            longest_ = std::max(longest_, ids_.back().size());
        }
    }

    std::size_t size() const noexcept { return labels_.size(); }
    bool empty() const noexcept { return labels_.empty(); }
    const std::string& label(std::size_t i) const { return labels_.at(i); }
    const std::vector<std::string>& labels() const noexcept { return labels_; }
    const std::vector<std::vector<TokenId>>& token_ids() const noexcept { return ids_; }
    std::size_t longest() const noexcept { return longest_; }

    std::optional<std::size_t> index_of(std::string_view l) const {
        const auto it = std::find(labels_.begin(), labels_.end(), l);
        if (it == labels_.end()) return std::nullopt;
        return static_cast<std::size_t>(it - labels_.begin());
    }

private:
    std::vector<std::string> labels_;
    std::vector<std::vector<TokenId>> ids_;
    std::size_t longest_ = 0;
};

namespace detail {

// encode(text) with its head dropped so that `reserve` more ids fit in seq_len.
inline std::vector<TokenId> tail_tokens(const Tokenizer& tok, std::string_view text, std::size_t seq_len,
                                        std::size_t reserve) {
    if (reserve > seq_len)
        throw InputError("label and tags need " + std::to_string(reserve) + " tokens but seq_len is " +
                         std::to_string(seq_len));
    auto ids = tok.encode(text);
    const std::size_t room = seq_len - reserve;
    if (ids.size() > room) ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(room));
    return ids;
}

} // namespace detail

/// encode(text') ++ [label tag] ++ encode(label) ++ [end tag], where text' keeps
/// only as many trailing text tokens as fit in seq_len.
inline std::vector<TokenId> format_example(const Tokenizer& tok, const LabeledExample& ex, std::size_t seq_len) {
    const auto label = tok.encode(ex.label);
    if (label.empty()) throw InputError("label '" + ex.label + "' tokenizes to nothing");
    auto ids = detail::tail_tokens(tok, ex.text, seq_len, label.size() + 2);
    ids.push_back(tok.label_id());
    ids.insert(ids.end(), label.begin(), label.end());
    ids.push_back(tok.end_id());
    return ids;
}

/// The prompt `(text')<|label|>` used for prediction. The text is truncated as
/// format_example would truncate it for the longest candidate label.
inline std::vector<TokenId> format_prompt(const Tokenizer& tok, std::string_view text, const LabelSet& labels,
                                          std::size_t seq_len) {
    auto ids = detail::tail_tokens(tok, text, seq_len, labels.longest() + 2);
    ids.push_back(tok.label_id());
    return ids;
}

/// Five binary instances: context, a single space, then choice i; labelled
/// True for the answer and False otherwise.
inline std::vector<LabeledExample> convert_multiple_choice(const MultipleChoiceExample& ex) {
    std::vector<LabeledExample> out;
    out.reserve(MultipleChoiceExample::kChoices);
    for (std::size_t i = 0; i < MultipleChoiceExample::kChoices; ++i)
        out.push_back({ex.context + " " + ex.choices[i], std::string(i == ex.answer ? kTrueLabel : kFalseLabel), ex.line});
    return out;
}

/// Formatted examples served as padded batches. Each example is one row; rows
/// are padded with the pad id to the longest row of the batch. The cursor
/// counts examples; epoch e visits them in an order shuffled with seed + e.
class ExampleBatches final : public BatchSource {
public:
    ExampleBatches(std::vector<std::vector<TokenId>> rows, std::size_t batch_size, TokenId pad_id, std::uint64_t seed)
        : rows_(std::move(rows)), batch_(batch_size), pad_(pad_id), seed_(seed) {
        if (rows_.empty()) throw InputError("no training examples");
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        for (const auto& r : rows_)
            if (r.size() < 2) throw InputError("formatted example shorter than two tokens");
    }

    Batch next() override {
        std::vector<const std::vector<TokenId>*> picked;
        std::size_t longest = 0;
        for (std::size_t i = 0; i < batch_; ++i) {
            picked.push_back(&rows_[row_at(cursor_ + i)]);
            longest = std::max(longest, picked.back()->size());
        }
        cursor_ += batch_;
        Batch b;
        b.batch = batch_;
        b.seq = longest;
        b.ids.assign(batch_ * longest, pad_);
        for (std::size_t i = 0; i < batch_; ++i) std::copy(picked[i]->begin(), picked[i]->end(), b.ids.begin() + i * longest);
        return b;
    }
    std::uint64_t cursor() const override { return cursor_; }
    void seek(std::uint64_t c) override { cursor_ = c; }

private:
    std::size_t row_at(std::uint64_t position) {
        const std::uint64_t epoch = position / rows_.size();
        if (order_.empty() || epoch != order_epoch_) {
            order_.resize(rows_.size());
            for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
            Rng rng(seed_ + epoch);
            rng.shuffle(order_);
            order_epoch_ = epoch;
        }
        return order_[position % rows_.size()];
    }

    std::vector<std::vector<TokenId>> rows_;
    std::size_t batch_;
    TokenId pad_;
    std::uint64_t seed_;
    std::vector<std::size_t> order_;
    std::uint64_t order_epoch_ = 0;
    std::uint64_t cursor_ = 0;
};

/// Fine-tunes with the ordinary language-model objective over every non-pad
/// position of the formatted sequences. Sequences are formatted to
/// cfg.seq_len, which must fit the model context. The model gains no
/// parameters; only the trainer updates its weights.
template <typename T>
Checkpoint finetune_classifier(LanguageModel<T>& model, const Tokenizer& tok, const std::vector<LabeledExample>& examples,
                               const TrainConfig& cfg, TrainSinks sinks = {}, TrainProgress progress = {},
                               const AdamState<T>* resume_state = nullptr) {
    cfg.validate();
    if (examples.empty()) throw InputError("fine-tuning needs at least one example");
    if (tok.vocab_size() != model.config().vocab_size)
        throw InputError("tokenizer vocabulary " + std::to_string(tok.vocab_size()) + " does not match model vocabulary " +
                         std::to_string(model.config().vocab_size));
    if (cfg.seq_len > model.config().max_seq_len)
        throw ConfigError("seq_len " + std::to_string(cfg.seq_len) + " exceeds the model context " +
                          std::to_string(model.config().max_seq_len));
    std::vector<std::vector<TokenId>> rows;
    rows.reserve(examples.size());
    for (const auto& ex : examples) rows.push_back(format_example(tok, ex, cfg.seq_len));
    ExampleBatches data(std::move(rows), cfg.batch_size, tok.pad_id(), cfg.seed);
    auto state = resume_state ? *resume_state : AdamState<T>::for_parameters(model.parameters());
    sinks.ignore_id = tok.pad_id();
    if (!progress.tokenizer_fingerprint) progress.tokenizer_fingerprint = tok.fingerprint();
    return train_loop(model, state, data, cfg, sinks, progress);
}

struct ScoringOptions {
    bool length_normalize = true; ///< mean log-prob per label token instead of the sum
};

struct LabelPrediction {
    std::size_t index = 0;
    std::string label;
    std::vector<double> scores; ///< per label, in LabelSet order
};

/// Scores every candidate label as the continuation of `(text')<|label|>` and
/// returns the best; ties go to the lowest LabelSet index.
template <typename T>
LabelPrediction predict_label(const LanguageModel<T>& model, const Tokenizer& tok, std::string_view text,
                              const LabelSet& labels, const ScoringOptions& opts = {}) {
    if (labels.empty()) throw InputError("label set is empty");
    const auto prompt = format_prompt(tok, text, labels, model.config().max_seq_len);
    LabelPrediction p;
    p.scores = model.score_continuations(prompt, labels.token_ids());
    if (opts.length_normalize)
        for (std::size_t i = 0; i < labels.size(); ++i) p.scores[i] /= static_cast<double>(labels.token_ids()[i].size());
    p.index = static_cast<std::size_t>(std::max_element(p.scores.begin(), p.scores.end()) - p.scores.begin());
    p.label = labels.label(p.index);
    return p;
}

struct ChoicePrediction {
    std::size_t index = 0;
    std::array<double, MultipleChoiceExample::kChoices> probabilities{};
};

/// p_i is the True entry of a softmax over the True/False scores of binary
/// instance i; the prediction is the first i with the largest p_i.
template <typename T>
ChoicePrediction predict_choice(const LanguageModel<T>& model, const Tokenizer& tok, const MultipleChoiceExample& ex,
                                const ScoringOptions& opts = {}) {
    const LabelSet binary({std::string(kTrueLabel), std::string(kFalseLabel)}, tok);
    const auto instances = convert_multiple_choice(ex);
    ChoicePrediction out;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const auto s = predict_label(model, tok, instances[i].text, binary, opts).scores;
        out.probabilities[i] = 1.0 / (1.0 + std::exp(s[1] - s[0]));
    }
    out.index = static_cast<std::size_t>(std::max_element(out.probabilities.begin(), out.probabilities.end()) -
                                         out.probabilities.begin());
    return out;
}

// ---------------------------------------------------------------------------
// Files

namespace detail {

inline nlohmann::json parse_record(std::string_view line, const std::string& path, std::size_t lineno) {
    try {
        auto rec = nlohmann::json::parse(line);
        if (!rec.is_object()) throw InputError(path + ":" + std::to_string(lineno) + ": record is not a JSON object");
        return rec;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ":" + std::to_string(lineno) + ": invalid JSON (" + e.what() + ")");
    }
}

inline std::string string_field(const nlohmann::json& rec, const char* key, const std::string& where) {
    if (!rec.contains(key) || !rec[key].is_string()) throw InputError(where + ": missing string field '" + key + "'");
    return rec[key].get<std::string>();
}

// Calls fn(record, "path:line", line) for every non-blank line.
template <typename Fn>
void for_each_record(const std::filesystem::path& path, Fn&& fn) {
    const auto text = read_file(path);
    const auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (lines[i].find_first_not_of(" \t\r") == std::string_view::npos) continue;
        fn(parse_record(lines[i], path.string(), i + 1), path.string() + ":" + std::to_string(i + 1), i + 1);
    }
}

} // namespace detail

/// `{"text": ..., "label": ...}` per line. Labels outside `labels` (when given)
/// are rejected with the line number. With require_label false, records may
/// omit the label (prediction inputs).
inline std::vector<LabeledExample> read_labeled_jsonl(const std::filesystem::path& path,
                                                      const std::vector<std::string>* labels = nullptr,
                                                      bool require_label = true) {
    std::vector<LabeledExample> out;
    detail::for_each_record(path, [&](const nlohmann::json& rec, const std::string& where, std::size_t line) {
        const bool has_label = require_label || rec.contains("label");
        LabeledExample ex{detail::string_field(rec, "text", where),
                          has_label ? detail::string_field(rec, "label", where) : std::string(), line};
        if (ex.text.empty()) throw InputError(where + ": empty text");
        if (has_label && labels && std::find(labels->begin(), labels->end(), ex.label) == labels->end())
            throw InputError(where + ": label '" + ex.label + "' is not in the label manifest");
        out.push_back(std::move(ex));
    });
    if (out.empty()) throw InputError(path.string() + " holds no examples");
    return out;
}

/// `{"context": ..., "choices": [5 strings], "answer": int}` per line.
inline std::vector<MultipleChoiceExample> read_choice_jsonl(const std::filesystem::path& path) {
    std::vector<MultipleChoiceExample> out;
    detail::for_each_record(path, [&](const nlohmann::json& rec, const std::string& where, std::size_t line) {
        MultipleChoiceExample ex;
        ex.line = line;
        ex.context = detail::string_field(rec, "context", where);
        const auto& choices = rec.contains("choices") ? rec["choices"] : nlohmann::json();
        if (!choices.is_array() || choices.size() != MultipleChoiceExample::kChoices)
            throw InputError(where + ": 'choices' must be an array of 5 strings");
        for (std::size_t i = 0; i < MultipleChoiceExample::kChoices; ++i) {
            if (!choices[i].is_string()) throw InputError(where + ": choice " + std::to_string(i) + " is not a string");
            ex.choices[i] = choices[i].get<std::string>();
        }
        if (!rec.contains("answer") || !rec["answer"].is_number_integer())
            throw InputError(where + ": missing integer field 'answer'");
        const auto answer = rec["answer"].get<long long>();
        if (answer < 0 || answer >= static_cast<long long>(MultipleChoiceExample::kChoices))
            throw InputError(where + ": answer " + std::to_string(answer) + " is outside 0-4");
        ex.answer = static_cast<std::size_t>(answer);
        try {
            ex.validate();
        } catch (const InputError& e) {
            throw InputError(where + ": " + e.what());
        }
        out.push_back(std::move(ex));
    });
    if (out.empty()) throw InputError(path.string() + " holds no examples");
    return out;
}

/// One label per line, in order; blank lines are ignored.
inline std::vector<std::string> read_label_manifest(const std::filesystem::path& path) {
    std::vector<std::string> labels;
    const auto text = detail::read_file(path);
    for (auto line : detail::split_lines(text)) {
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (!line.empty()) labels.emplace_back(line);
    }
    if (labels.empty()) throw InputError(path.string() + " lists no labels");
    return labels;
}

inline std::string write_label_manifest(const std::vector<std::string>& labels) {
    std::string out;
    for (const auto& l : labels) out += l + "\n";
    return out;
}

/// Labels in order of first appearance.
inline std::vector<std::string> labels_in_order(const std::vector<LabeledExample>& examples) {
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (const auto& ex : examples)
        if (seen.insert(ex.label).second) out.push_back(ex.label);
    return out;
}

inline std::string prediction_json(const LabelPrediction& p, const LabelSet& labels) {
    nlohmann::ordered_json scores = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < labels.size(); ++i) scores[labels.label(i)] = p.scores[i];
    return nlohmann::ordered_json{{"predicted", p.label}, {"scores", scores}}.dump();
}

inline std::string prediction_json(const ChoicePrediction& p) {
    nlohmann::ordered_json scores = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < p.probabilities.size(); ++i) scores[std::to_string(i)] = p.probabilities[i];
    return nlohmann::ordered_json{{"predicted", p.index}, {"scores", scores}}.dump();
}

} // namespace lexforge
