#pragma once

// Classification metrics, dataset evaluation and JSON report files.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lexforge/classify.hpp"
#include "lexforge/error.hpp"
#include "lexforge/hash.hpp"
#include "lexforge/parallel.hpp"

namespace lexforge {

/// (gold, predicted)
using LabelPair = std::pair<std::string, std::string>;

struct ClassStats {
    std::string label;
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    std::uint64_t support = 0; ///< gold occurrences
};

struct EvalReport {
    std::uint64_t n_examples = 0;
    double accuracy = 0;
    double micro_f1 = 0;
    double macro_f1 = 0;
    std::vector<std::string> labels;
    std::vector<ClassStats> per_class;               ///< in label order
    std::vector<std::vector<std::uint64_t>> confusion; ///< [gold][predicted]
};

namespace detail {

inline double ratio(std::uint64_t num, std::uint64_t den) { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); }

// F1 from counts; 0 when the class never occurs in gold or predictions.
inline double f1_from(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) { return ratio(2 * tp, 2 * tp + fp + fn); }

} // namespace detail

/// Report over `labels`; every gold and predicted label must be listed there.
inline EvalReport build_report(const std::vector<LabelPair>& pairs, const std::vector<std::string>& labels) {
    if (pairs.empty()) throw InputError("no predictions to evaluate");
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (!index.emplace(labels[i], i).second) throw InputError("duplicate label '" + labels[i] + "'");
    auto lookup = [&](const std::string& l) {
        const auto it = index.find(l);
        if (it == index.end()) throw InputError("label '" + l + "' is not in the label set");
        return it->second;
    };

    const std::size_t k = labels.size();
    EvalReport r;
    r.n_examples = pairs.size();
    r.labels = labels;
    r.confusion.assign(k, std::vector<std::uint64_t>(k, 0));
    for (const auto& [gold, pred] : pairs) ++r.confusion[lookup(gold)][lookup(pred)];

    std::uint64_t tp_all = 0, fp_all = 0, fn_all = 0;
    double f1_sum = 0;
    for (std::size_t c = 0; c < k; ++c) {
        std::uint64_t row = 0, col = 0;
        for (std::size_t j = 0; j < k; ++j) {
            row += r.confusion[c][j];
            col += r.confusion[j][c];
        }
        const std::uint64_t tp = r.confusion[c][c], fp = col - tp, fn = row - tp;
        ClassStats s{labels[c], detail::ratio(tp, tp + fp), detail::ratio(tp, tp + fn), detail::f1_from(tp, fp, fn), row};
        f1_sum += s.f1;
        r.per_class.push_back(std::move(s));
        tp_all += tp;
        fp_all += fp;
        fn_all += fn;
    }
    r.accuracy = detail::ratio(tp_all, r.n_examples);
    r.micro_f1 = detail::f1_from(tp_all, fp_all, fn_all);
    r.macro_f1 = k == 0 ? 0.0 : f1_sum / static_cast<double>(k);
    return r;
}

/// Labels in order of first appearance, gold before predicted.
inline std::vector<std::string> labels_seen(const std::vector<LabelPair>& pairs) {
    std::vector<std::string> out;
    std::unordered_map<std::string, bool> seen;
    for (const auto& [g, p] : pairs)
        for (const auto* l : {&g, &p})
            if (seen.emplace(*l, true).second) out.push_back(*l);
    return out;
}

inline double accuracy(const std::vector<LabelPair>& pairs) { return build_report(pairs, labels_seen(pairs)).accuracy; }

/// F1 over TP/FP/FN pooled across all classes.
inline double micro_f1(const std::vector<LabelPair>& pairs) { return build_report(pairs, labels_seen(pairs)).micro_f1; }

/// Unweighted mean of per-class F1 over `labels`. A listed class that is never
/// gold and never predicted contributes F1 = 0.
inline double macro_f1(const std::vector<LabelPair>& pairs, const std::vector<std::string>& labels) {
    return build_report(pairs, labels).macro_f1;
}

// ---------------------------------------------------------------------------
// Evaluation over datasets

template <typename P>
struct Evaluation {
    EvalReport report;
    std::vector<P> predictions; ///< in dataset order
};

namespace detail {

// Runs fn(i) over n examples in parallel; the first failing example (in
// dataset order) is rethrown with its source line.
template <typename Fn, typename LineOf>
void predict_all(std::size_t n, Fn&& fn, LineOf&& line_of, std::size_t threads) {
    std::vector<std::string> errors(n);
    parallel_for(
        n,
        [&](std::size_t i) {
            try {
                fn(i);
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        },
        threads);
    for (std::size_t i = 0; i < n; ++i)
        if (!errors[i].empty())
            throw InputError("prediction failed for the example on line " + std::to_string(line_of(i)) + ": " + errors[i]);
}

} // namespace detail

template <typename T>
Evaluation<LabelPrediction> evaluate(const LanguageModel<T>& model, const Tokenizer& tok,
                                     const std::vector<LabeledExample>& dataset, const LabelSet& labels,
                                     const ScoringOptions& opts = {}, std::size_t threads = thread_count()) {
    if (dataset.empty()) throw InputError("evaluation dataset is empty");
    Evaluation<LabelPrediction> out;
    out.predictions.resize(dataset.size());
    detail::predict_all(
        dataset.size(), [&](std::size_t i) { out.predictions[i] = predict_label(model, tok, dataset[i].text, labels, opts); },
        [&](std::size_t i) { return dataset[i].line ? dataset[i].line : i + 1; }, threads);
    std::vector<LabelPair> pairs;
    for (std::size_t i = 0; i < dataset.size(); ++i) pairs.emplace_back(dataset[i].label, out.predictions[i].label);
    out.report = build_report(pairs, labels.labels());
    return out;
}

/// Multiple-choice evaluation; classes are the choice positions "0".."4".
template <typename T>
Evaluation<ChoicePrediction> evaluate(const LanguageModel<T>& model, const Tokenizer& tok,
                                      const std::vector<MultipleChoiceExample>& dataset, const ScoringOptions& opts = {},
                                      std::size_t threads = thread_count()) {
    if (dataset.empty()) throw InputError("evaluation dataset is empty");
    Evaluation<ChoicePrediction> out;
    out.predictions.resize(dataset.size());
    detail::predict_all(
        dataset.size(), [&](std::size_t i) { out.predictions[i] = predict_choice(model, tok, dataset[i], opts); },
        [&](std::size_t i) { return dataset[i].line ? dataset[i].line : i + 1; }, threads);
    std::vector<LabelPair> pairs;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        pairs.emplace_back(std::to_string(dataset[i].answer), std::to_string(out.predictions[i].index));
    out.report = build_report(pairs, {"0", "1", "2", "3", "4"});
    return out;
}

// ---------------------------------------------------------------------------
// Report files

struct ReportMetadata {
    std::string task;                 ///< "single-label" or "multiple-choice"
    std::uint64_t model_config_digest = 0;
    std::uint64_t dataset_digest = 0;
    std::string timestamp;            ///< ISO 8601 UTC
};

/// SOURCE_DATE_EPOCH when set (reproducible reports), otherwise the clock.
inline std::string report_timestamp() {
    std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    if (const char* env = std::getenv("SOURCE_DATE_EPOCH")) {
        char* end = nullptr;
        const long long v = std::strtoll(env, &end, 10);
        if (end != env && *end == '\0') t = static_cast<std::time_t>(v);
    }
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Full-scale results of the original 456M and 1.6B models, carried in every
/// report so that small local runs are not read as reproductions.
inline nlohmann::ordered_json published_reference() {
    return {
        {"note", "full-scale results of 456M/1.6B models pre-trained for 350000 steps; not expected from local runs"},
        {"ledgar",
         {{"456M", {{"micro_f1", 0.835}, {"macro_f1", 0.724}}}, {"1.6B", {{"micro_f1", 0.839}, {"macro_f1", 0.740}}}}},
        {"casehold", {{"456M", {{"accuracy", 0.496}}}, {"1.6B", {{"accuracy", 0.276}}}, {"chance", 0.2}}},
    };
}

inline nlohmann::ordered_json report_json(const EvalReport& r, const ReportMetadata& meta) {
    nlohmann::ordered_json per_class = nlohmann::ordered_json::array();
    for (const auto& c : r.per_class)
        per_class.push_back(
            {{"label", c.label}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}});
    return {
        {"n_examples", r.n_examples},
        {"accuracy", r.accuracy},
        {"micro_f1", r.micro_f1},
        {"macro_f1", r.macro_f1},
        {"labels", r.labels},
        {"per_class", per_class},
        {"confusion", r.confusion},
        {"published_reference", published_reference()},
        {"metadata",
         {{"task", meta.task},
          {"model_config_digest", to_hex(meta.model_config_digest)},
          {"dataset_digest", to_hex(meta.dataset_digest)},
          {"timestamp", meta.timestamp}}},
    };
}

inline void write_report(const std::filesystem::path& path, const EvalReport& r, const ReportMetadata& meta) {
    detail::write_file(path, report_json(r, meta).dump(2) + "\n");
}

} // namespace lexforge
