// lexforge command-line interface: one subcommand per pipeline stage.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lexforge/classify.hpp"
#include "lexforge/data.hpp"
#include "lexforge/eval.hpp"
#include "lexforge/hash.hpp"
#include "lexforge/kv_config.hpp"
#include "lexforge/loss_curve.hpp"
#include "lexforge/model.hpp"
#include "lexforge/parallel.hpp"
#include "lexforge/tokenizer.hpp"
#include "lexforge/trainer.hpp"

namespace fs = std::filesystem;
using namespace lexforge;
using json = nlohmann::ordered_json;

namespace {

/// Bad flags or contradictory settings; exits with status 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

void require_file(const fs::path& p, const char* what) {
    if (!fs::is_regular_file(p)) throw IoError(std::string(what) + " " + p.string() + " does not exist");
}

void require_dir(const fs::path& p, const char* what) {
    if (!fs::is_directory(p)) throw IoError(std::string(what) + " " + p.string() + " does not exist");
}

/// Record of one invocation, written beside its outputs. Holds no timestamps
/// so that equal runs produce equal manifests.
class RunManifest {
public:
    explicit RunManifest(std::string subcommand) { j_["subcommand"] = std::move(subcommand); }

    void config(const KeyValueConfig& kv) {
        json c = json::object();
        for (const auto& [k, v] : kv.values()) c[k] = v;
        j_["config"] = c;
    }
    void set(const std::string& key, json v) { j_[key] = std::move(v); }
    void input(const std::string& name, const fs::path& p) { j_["inputs"][name] = p.string(); }
    void output(const std::string& name, const fs::path& p) { outputs_.emplace_back(name, p); }

    void write(const fs::path& path) {
        for (const auto& [name, p] : outputs_) {
            j_["outputs"][name] = p.string();
            if (fs::is_regular_file(p)) j_["digests"][name] = to_hex(file_digest(p.string()));
        }
        detail::write_file(path, j_.dump(2) + "\n");
    }

private:
    json j_ = json::object();
    std::vector<std::pair<std::string, fs::path>> outputs_;
};

// ---------------------------------------------------------------------------
// Model and training settings shared by pretrain and finetune

/// Binds flags to default-initialised configs so --help shows the defaults,
/// and turns the flags actually given into config overrides.
struct ConfigFlags {
    std::string config_file;
    std::vector<std::string> sets;
    std::vector<std::pair<CLI::Option*, std::string>> bound;
    ModelConfig model_defaults;
    TrainConfig train_defaults;
    std::string preset = "tiny";

    void attach(CLI::App* app, bool with_model) {
        app->add_option("--config", config_file, "Flat key = value config file (flags override it)");
        if (with_model) {
            bind(app, "--preset", "preset", preset, "Model preset: tiny, 456M, 1.6B or 6B");
            bind(app, "--n-layers", "n_layers", model_defaults.n_layers, "Transformer blocks");
            bind(app, "--d-model", "d_model", model_defaults.d_model, "Hidden width");
            bind(app, "--n-heads", "n_heads", model_defaults.n_heads, "Attention heads");
            bind(app, "--rotary-dim", "rotary_dim", model_defaults.rotary_dim, "Rotary channels per head");
            bind(app, "--max-seq-len", "max_seq_len", model_defaults.max_seq_len, "Model context length");
        }
        bind(app, "--steps", "total_steps", train_defaults.total_steps, "Total optimizer steps");
        bind(app, "--batch-size", "batch_size", train_defaults.batch_size, "Sequences per step");
        bind(app, "--seq-len", "seq_len", train_defaults.seq_len, "Tokens per training sequence");
        bind(app, "--lr-max", "lr_max", train_defaults.lr_max, "Peak learning rate");
        bind(app, "--lr-min", "lr_min", train_defaults.lr_min, "Final learning rate");
        bind(app, "--warmup", "warmup_steps", train_defaults.warmup_steps, "Linear warmup steps");
        bind(app, "--clip-norm", "clip_norm", train_defaults.clip_norm, "Global gradient-norm clip");
        bind(app, "--weight-decay", "weight_decay", train_defaults.weight_decay, "Decoupled weight decay");
        bind(app, "--seed", "seed", train_defaults.seed, "Initialisation and data-order seed");
        bind(app, "--checkpoint-every", "checkpoint_every", train_defaults.checkpoint_every, "Steps between checkpoints");
        bind(app, "--log-every", "log_every", train_defaults.log_every, "Steps between loss-log rows");
        app->add_option("--set", sets, "Extra key=value config override (repeatable)");
    }

    template <typename V>
    void bind(CLI::App* app, const std::string& flag, const std::string& key, V& target, const std::string& help) {
        bound.emplace_back(app->add_option(flag, target, help)->capture_default_str(), key);
    }

    /// Config file, then --set entries, then explicit flags.
    KeyValueConfig resolve(const std::set<std::string>& allowed) const {
        KeyValueConfig kv;
        if (!config_file.empty()) {
            require_file(config_file, "config file");
            kv = KeyValueConfig::parse(detail::read_file(config_file), config_file);
        }
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
            kv.set(s.substr(0, eq), s.substr(eq + 1));
        }
        for (const auto& [opt, key] : bound)
            if (opt->count()) kv.set(key, opt->as<std::string>());
        for (const auto& [k, v] : kv.values())
            if (!allowed.count(k)) throw UsageError("unknown config key '" + k + "'");
        return kv;
    }
};

std::set<std::string> model_keys() {
    KeyValueConfig kv;
    ModelConfig{}.write(kv);
    std::set<std::string> keys{"preset"};
    for (const auto& [k, v] : kv.values()) keys.insert(k);
    return keys;
}

std::set<std::string> train_keys() {
    KeyValueConfig kv;
    TrainConfig{}.write(kv);
    std::set<std::string> keys;
    for (const auto& [k, v] : kv.values()) keys.insert(k);
    return keys;
}

std::set<std::string> all_keys() {
    auto keys = model_keys();
    keys.merge(train_keys());
    return keys;
}

/// Appends to an existing log (a resumed run) or starts one with a header.
std::ofstream open_loss_log(const fs::path& path, bool append) {
    const bool fresh = !append || !fs::exists(path);
    std::ofstream out(path, fresh ? std::ios::trunc : std::ios::app);
    if (!out) throw IoError("cannot write loss log " + path.string());
    if (fresh) out << kLossLogHeader << '\n';
    return out;
}

TrainSinks checkpoint_sinks(std::ostream& log, const fs::path& dir) {
    TrainSinks sinks;
    sinks.loss_log = &log;
    sinks.on_checkpoint = [dir](const Checkpoint& c) {
        char name[48];
        std::snprintf(name, sizeof name, "step_%08llu.lexf",
                      static_cast<unsigned long long>(c.meta.get<std::uint64_t>("step", 0)));
        save_checkpoint(c, dir / name);
    };
    return sinks;
}

void log_progress(const LossRecord& r, std::uint64_t total) {
    if (r.step == 1 || r.step % 50 == 0 || r.step == total)
        std::cerr << "step " << r.step << "/" << total << " loss " << r.loss << " ema " << r.ema_loss << " lr " << r.lr
                  << "\n";
}

// ---------------------------------------------------------------------------
// Subcommands

struct TokenizerArgs {
    std::string corpus, out;
    std::size_t vocab_size = 50257;
};

int run_train_tokenizer(const TokenizerArgs& a) {
    require_dir(a.corpus, "corpus directory");
    if (a.vocab_size < 259) throw UsageError("--vocab-size must be at least 259 (256 bytes + 3 special tags)");
    std::vector<std::string> docs;
    std::size_t skipped = 0;
    for (const auto& f : discover_corpus(a.corpus)) {
        try {
            for (auto& d : read_documents(f)) docs.push_back(std::move(d));
        } catch (const InputError& e) {
            ++skipped;
            warn(std::string("skipping ") + e.what());
        }
    }
    BpeTrainOptions opts;
    opts.warn = warn;
    const auto tok = train_bpe(docs, a.vocab_size, SpecialTagSet{}, opts);
    fs::create_directories(a.out);
    save_tokenizer(tok, a.out);

    RunManifest m("train-tokenizer");
    m.input("corpus", a.corpus);
    m.set("vocab_size_requested", a.vocab_size);
    m.set("vocab_size", tok.vocab_size());
    m.set("merges", tok.merges().size());
    m.set("documents", docs.size());
    m.set("skipped_files", skipped);
    m.set("fingerprint", to_hex(tok.fingerprint()));
    for (const char* f : {"vocab.txt", "merges.txt", "special_tokens.txt"}) m.output(f, fs::path(a.out) / f);
    m.write(fs::path(a.out) / "manifest.json");
    std::cout << "tokenizer: " << tok.vocab_size() << " tokens, " << tok.merges().size() << " merges, fingerprint "
              << to_hex(tok.fingerprint()) << "\n";
    return 0;
}

struct IngestArgs {
    std::string corpus, tokenizer, out;
    std::uint64_t shard_size = 1u << 24;
};

int run_ingest(const IngestArgs& a) {
    require_dir(a.corpus, "corpus directory");
    require_dir(a.tokenizer, "tokenizer directory");
    if (a.shard_size == 0) throw UsageError("--shard-size must be positive");
    const auto tok = load_tokenizer(a.tokenizer);
    IngestOptions opts;
    opts.shard_size_tokens = a.shard_size;
    opts.warn = warn;
    const auto res = ingest(a.corpus, tok, a.out, opts);

    RunManifest m("ingest");
    m.input("corpus", a.corpus);
    m.input("tokenizer", a.tokenizer);
    m.set("shard_size_tokens", a.shard_size);
    m.set("documents", res.documents);
    m.set("skipped_files", res.skipped_files);
    m.set("total_tokens", res.index.total_tokens);
    m.set("tokenizer_fingerprint", to_hex(tok.fingerprint()));
    m.output("index", res.index_path);
    for (const auto& s : res.index.shards) m.output(s.path, fs::path(a.out) / s.path);
    m.write(fs::path(a.out) / "manifest.json");
    std::cout << "ingested " << res.documents << " documents, " << res.index.total_tokens << " tokens in "
              << res.index.shards.size() << " shard(s)";
    if (res.skipped_files) std::cout << ", skipped " << res.skipped_files << " file(s)";
    std::cout << "\n";
    return 0;
}

struct PretrainArgs {
    ConfigFlags flags;
    std::string data, tokenizer, out = "pretrain-out", resume;
};

int run_pretrain(PretrainArgs& a) {
    const auto kv = a.flags.resolve(all_keys());
    require_file(a.data, "dataset index");
    if (!a.tokenizer.empty()) require_dir(a.tokenizer, "tokenizer directory");
    if (!a.resume.empty()) require_file(a.resume, "checkpoint");

    std::optional<Tokenizer> tok;
    std::optional<std::uint64_t> fingerprint;
    if (!a.tokenizer.empty()) {
        tok = load_tokenizer(a.tokenizer);
        fingerprint = tok->fingerprint();
    }

    std::optional<Checkpoint> resume;
    ModelConfig mc;
    TrainConfig tc;
    TrainProgress progress;
    if (resume = a.resume.empty() ? std::nullopt : std::optional(load_checkpoint(a.resume, fingerprint)); resume) {
        for (const auto& k : model_keys())
            if (kv.has(k)) throw UsageError("model setting '" + k + "' cannot change when resuming");
        mc = checkpoint_model_config(*resume);
        tc = TrainConfig::read(kv, checkpoint_train_config(*resume));
        progress = checkpoint_progress(*resume);
        if (!fingerprint) fingerprint = progress.tokenizer_fingerprint;
    } else {
        KeyValueConfig model_kv = kv;
        if (tok && !kv.has("vocab_size")) model_kv.set("vocab_size", tok->vocab_size());
        mc = ModelConfig::read(model_kv);
        tc = TrainConfig::read(kv);
    }
    if (tok && tok->vocab_size() != mc.vocab_size)
        throw UsageError("vocab_size " + std::to_string(mc.vocab_size) + " does not match the tokenizer's " +
                         std::to_string(tok->vocab_size()));
    if (tc.seq_len > mc.max_seq_len)
        throw UsageError("seq_len " + std::to_string(tc.seq_len) + " exceeds max_seq_len " + std::to_string(mc.max_seq_len));
    if (progress.step >= tc.total_steps)
        throw UsageError("checkpoint is at step " + std::to_string(progress.step) + ", nothing left of " +
                         std::to_string(tc.total_steps) + " steps");

    const auto index = load_index(a.data);
    auto tokens = load_tokens(index, fingerprint, mc.vocab_size);
    if (!fingerprint) fingerprint = read_shard(index.root / index.shards.at(0).path).fingerprint;
    progress.tokenizer_fingerprint = fingerprint;
    WindowSampler data(std::move(tokens), tc.batch_size, tc.seq_len, tc.seed);

    LanguageModel<float> model(mc, tc.seed);
    AdamState<float> state = AdamState<float>::for_parameters(model.parameters());
    if (resume) {
        restore_parameters(*resume, model);
        state = restore_optimizer(*resume, model);
    }

    const fs::path out = a.out;
    fs::create_directories(out / "checkpoints");
    auto log = open_loss_log(out / "loss.csv", resume.has_value());
    auto sinks = checkpoint_sinks(log, out / "checkpoints");
    sinks.on_record = [&](const LossRecord& r) { log_progress(r, tc.total_steps); };
    const double cov = coverage(tc.total_steps, tc.batch_size, tc.seq_len, static_cast<double>(index.total_tokens));
    std::cerr << "pretraining " << model.parameter_count() << " parameters for " << tc.total_steps << " steps of "
              << tc.batch_size << " x " << tc.seq_len << " tokens (" << format_double(cov) << " x corpus of "
              << index.total_tokens << " tokens)\n";
    const auto final = train_loop(model, state, data, tc, sinks, progress);
    save_checkpoint(final, out / "model.lexf");

    KeyValueConfig resolved;
    mc.write(resolved);
    tc.write(resolved);
    RunManifest m("pretrain");
    m.config(resolved);
    m.input("data", a.data);
    if (!a.tokenizer.empty()) m.input("tokenizer", a.tokenizer);
    if (!a.resume.empty()) m.input("resume", a.resume);
    m.set("seed", tc.seed);
    m.set("parameters", model.parameter_count());
    m.set("corpus_tokens", index.total_tokens);
    m.set("coverage", cov);
    m.set("published_regime", published_coverage_note());
    m.set("tokenizer_fingerprint", to_hex(*fingerprint));
    m.set("final_loss", checkpoint_progress(final).ema_loss);
    m.output("loss_log", out / "loss.csv");
    m.output("model", out / "model.lexf");
    m.write(out / "manifest.json");
    return 0;
}

enum class Task { SingleLabel, MultipleChoice };

Task parse_task(const std::string& s) { return s == "multiple-choice" ? Task::MultipleChoice : Task::SingleLabel; }

const char* task_name(Task t) { return t == Task::MultipleChoice ? "multiple-choice" : "single-label"; }

struct FinetuneArgs {
    ConfigFlags flags;
    std::string train, tokenizer, init, labels, out = "finetune-out", task = "single-label";
};

int run_finetune(FinetuneArgs& a) {
    const auto kv = a.flags.resolve(all_keys());
    require_file(a.train, "training data");
    require_dir(a.tokenizer, "tokenizer directory");
    if (!a.init.empty()) require_file(a.init, "checkpoint");
    if (!a.labels.empty()) require_file(a.labels, "label manifest");
    const Task task = parse_task(a.task);
    const auto tok = load_tokenizer(a.tokenizer);

    std::optional<Checkpoint> init;
    if (!a.init.empty()) {
        for (const auto& k : model_keys())
            if (kv.has(k)) throw UsageError("model setting '" + k + "' conflicts with --init");
        init = load_checkpoint(a.init, tok.fingerprint());
    }
    KeyValueConfig model_kv = kv;
    if (!kv.has("vocab_size")) model_kv.set("vocab_size", tok.vocab_size());
    const ModelConfig mc = init ? checkpoint_model_config(*init) : ModelConfig::read(model_kv);
    const TrainConfig tc = TrainConfig::read(kv);
    if (mc.vocab_size != tok.vocab_size())
        throw UsageError("model vocabulary " + std::to_string(mc.vocab_size) + " does not match the tokenizer's " +
                         std::to_string(tok.vocab_size()));
    if (tc.seq_len > mc.max_seq_len)
        throw UsageError("seq_len " + std::to_string(tc.seq_len) + " exceeds max_seq_len " + std::to_string(mc.max_seq_len));

    std::vector<LabeledExample> examples;
    std::vector<std::string> labels;
    if (task == Task::MultipleChoice) {
        for (const auto& ex : read_choice_jsonl(a.train))
            for (auto& inst : convert_multiple_choice(ex)) examples.push_back(std::move(inst));
        labels = {std::string(kTrueLabel), std::string(kFalseLabel)};
    } else if (!a.labels.empty()) {
        labels = read_label_manifest(a.labels);
        examples = read_labeled_jsonl(a.train, &labels);
    } else {
        examples = read_labeled_jsonl(a.train);
        labels = labels_in_order(examples);
    }
    const LabelSet label_set(labels, tok);

    LanguageModel<float> model(mc, tc.seed);
    if (init) restore_parameters(*init, model);
    const auto manifest_before = model.manifest();

    const fs::path out = a.out;
    fs::create_directories(out / "checkpoints");
    auto log = open_loss_log(out / "loss.csv", false);
    auto sinks = checkpoint_sinks(log, out / "checkpoints");
    sinks.on_record = [&](const LossRecord& r) { log_progress(r, tc.total_steps); };
    std::cerr << "fine-tuning on " << examples.size() << " sequences, " << label_set.size() << " labels\n";
    const auto final = finetune_classifier(model, tok, examples, tc, sinks);
    if (model.manifest() != manifest_before) throw NumericError("fine-tuning changed the parameter manifest");
    save_checkpoint(final, out / "model.lexf");
    detail::write_file(out / "labels.txt", write_label_manifest(labels));

    KeyValueConfig resolved;
    mc.write(resolved);
    tc.write(resolved);
    RunManifest m("finetune");
    m.config(resolved);
    m.set("task", task_name(task));
    m.input("train", a.train);
    m.input("tokenizer", a.tokenizer);
    if (!a.init.empty()) m.input("init", a.init);
    if (!a.labels.empty()) m.input("labels", a.labels);
    m.set("seed", tc.seed);
    m.set("examples", examples.size());
    m.set("tokenizer_fingerprint", to_hex(tok.fingerprint()));
    m.output("loss_log", out / "loss.csv");
    m.output("model", out / "model.lexf");
    m.output("labels", out / "labels.txt");
    m.write(out / "manifest.json");
    return 0;
}

struct ScoringArgs {
    std::string model, tokenizer, input, labels, out, task = "single-label";
    bool raw_scores = false;
};

struct LoadedClassifier {
    Tokenizer tok;
    LanguageModel<float> model;
};

void require_scoring_inputs(const ScoringArgs& a) {
    require_file(a.model, "model checkpoint");
    require_dir(a.tokenizer, "tokenizer directory");
    require_file(a.input, "input data");
}

LoadedClassifier load_classifier(const ScoringArgs& a) {
    auto tok = load_tokenizer(a.tokenizer);
    const auto ckpt = load_checkpoint(a.model, tok.fingerprint());
    LanguageModel<float> model(checkpoint_model_config(ckpt), 0);
    restore_parameters(ckpt, model);
    if (model.config().vocab_size != tok.vocab_size()) throw InputError("model and tokenizer vocabularies differ");
    return {std::move(tok), std::move(model)};
}

fs::path label_manifest_path(const ScoringArgs& a) {
    const fs::path p = a.labels.empty() ? fs::path(a.model).parent_path() / "labels.txt" : fs::path(a.labels);
    require_file(p, "label manifest");
    return p;
}

int run_predict(const ScoringArgs& a) {
    require_scoring_inputs(a);
    const Task task = parse_task(a.task);
    const fs::path labels_path = task == Task::SingleLabel ? label_manifest_path(a) : fs::path();
    auto c = load_classifier(a);
    const ScoringOptions opts{!a.raw_scores};
    const fs::path out = a.out;
    fs::create_directories(out);
    std::string lines;
    std::size_t n = 0;
    if (task == Task::MultipleChoice) {
        const auto data = read_choice_jsonl(a.input);
        std::vector<ChoicePrediction> preds(data.size());
        detail::predict_all(
            data.size(), [&](std::size_t i) { preds[i] = predict_choice(c.model, c.tok, data[i], opts); },
            [&](std::size_t i) { return data[i].line; }, thread_count());
        for (const auto& p : preds) lines += prediction_json(p) + "\n";
        n = data.size();
    } else {
        const auto manifest = read_label_manifest(labels_path);
        const LabelSet labels(manifest, c.tok);
        const auto data = read_labeled_jsonl(a.input, nullptr, false);
        std::vector<LabelPrediction> preds(data.size());
        detail::predict_all(
            data.size(), [&](std::size_t i) { preds[i] = predict_label(c.model, c.tok, data[i].text, labels, opts); },
            [&](std::size_t i) { return data[i].line; }, thread_count());
        for (const auto& p : preds) lines += prediction_json(p, labels) + "\n";
        n = data.size();
    }
    detail::write_file(out / "predictions.jsonl", lines);

    RunManifest m("predict");
    m.set("task", task_name(task));
    m.set("length_normalized", !a.raw_scores);
    m.input("model", a.model);
    m.input("tokenizer", a.tokenizer);
    m.input("input", a.input);
    if (task == Task::SingleLabel) m.input("labels", labels_path);
    m.set("examples", n);
    m.output("predictions", out / "predictions.jsonl");
    m.write(out / "manifest.json");
    return 0;
}

int run_evaluate(const ScoringArgs& a) {
    require_scoring_inputs(a);
    const Task task = parse_task(a.task);
    const fs::path labels_path = task == Task::SingleLabel ? label_manifest_path(a) : fs::path();
    auto c = load_classifier(a);
    const ScoringOptions opts{!a.raw_scores};
    const fs::path out = a.out;
    fs::create_directories(out);
    EvalReport report;
    std::string lines;
    if (task == Task::MultipleChoice) {
        const auto e = evaluate(c.model, c.tok, read_choice_jsonl(a.input), opts);
        report = e.report;
        for (const auto& p : e.predictions) lines += prediction_json(p) + "\n";
    } else {
        const auto manifest = read_label_manifest(labels_path);
        const LabelSet labels(manifest, c.tok);
        const auto e = evaluate(c.model, c.tok, read_labeled_jsonl(a.input, &manifest), labels, opts);
        report = e.report;
        for (const auto& p : e.predictions) lines += prediction_json(p, labels) + "\n";
    }
    const ReportMetadata meta{task_name(task), c.model.config().digest(), file_digest(a.input), report_timestamp()};
    write_report(out / "report.json", report, meta);
    detail::write_file(out / "predictions.jsonl", lines);

    RunManifest m("evaluate");
    m.set("task", task_name(task));
    m.set("length_normalized", !a.raw_scores);
    m.input("model", a.model);
    m.input("tokenizer", a.tokenizer);
    m.input("data", a.input);
    if (task == Task::SingleLabel) m.input("labels", labels_path);
    m.set("accuracy", report.accuracy);
    m.set("micro_f1", report.micro_f1);
    m.set("macro_f1", report.macro_f1);
    m.output("report", out / "report.json");
    m.output("predictions", out / "predictions.jsonl");
    m.write(out / "manifest.json");
    std::cout << "n=" << report.n_examples << " accuracy=" << report.accuracy << " micro_f1=" << report.micro_f1
              << " macro_f1=" << report.macro_f1 << "\n";
    return 0;
}

struct CurveArgs {
    std::vector<std::string> logs, names;
    std::string out;
    std::size_t points = 500;
    std::string title = "Training loss";
};

int run_loss_curve(const CurveArgs& a) {
    if (!a.names.empty() && a.names.size() != a.logs.size())
        throw UsageError("--names needs one name per loss log");
    if (a.points == 0) throw UsageError("--points must be positive");
    for (const auto& l : a.logs) require_file(l, "loss log");
    std::vector<LossSeries> series;
    for (std::size_t i = 0; i < a.logs.size(); ++i) {
        auto s = read_loss_log(a.logs[i]);
        if (!a.names.empty()) s.name = a.names[i];
        s.records = downsample(s.records, a.points);
        series.push_back(std::move(s));
    }
    const fs::path svg = a.out;
    if (svg.has_parent_path()) fs::create_directories(svg.parent_path());
    fs::path csv = svg;
    csv.replace_extension(".csv");
    fs::path manifest = svg;
    manifest.replace_extension(".manifest.json");
    detail::write_file(svg, loss_curve_svg(series, a.title));
    detail::write_file(csv, downsampled_csv(series));

    RunManifest m("loss-curve");
    for (std::size_t i = 0; i < a.logs.size(); ++i) m.input(series[i].name, a.logs[i]);
    m.set("points", a.points);
    m.output("svg", svg);
    m.output("csv", csv);
    m.write(manifest);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"lexforge: domain-adapted GPT-style language models and no-code classifiers"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "lexforge 0.1.0");

    TokenizerArgs tk;
    auto* c_tok = app.add_subcommand("train-tokenizer", "Train a byte-level BPE tokenizer on a corpus directory");
    c_tok->add_option("--corpus", tk.corpus, "Directory of .txt / .jsonl files")->required();
    c_tok->add_option("--vocab-size", tk.vocab_size, "Target vocabulary size including 3 special tags")->capture_default_str();
    c_tok->add_option("--out", tk.out, "Output directory")->required();

    IngestArgs in;
    auto* c_ing = app.add_subcommand("ingest", "Tokenize a corpus into binary shards with an index");
    c_ing->add_option("--corpus", in.corpus, "Directory of .txt / .jsonl files")->required();
    c_ing->add_option("--tokenizer", in.tokenizer, "Tokenizer directory")->required();
    c_ing->add_option("--out", in.out, "Output directory")->required();
    c_ing->add_option("--shard-size", in.shard_size, "Maximum tokens per shard")->capture_default_str();

    PretrainArgs pt;
    auto* c_pre = app.add_subcommand("pretrain", "Pre-train a language model on an ingested corpus");
    c_pre->add_option("--data", pt.data, "Dataset index (index.tsv)")->required();
    c_pre->add_option("--tokenizer", pt.tokenizer, "Tokenizer directory; checks the shard fingerprint");
    c_pre->add_option("--resume", pt.resume, "Continue from this checkpoint");
    c_pre->add_option("--out", pt.out, "Output directory")->capture_default_str();
    pt.flags.attach(c_pre, true);

    FinetuneArgs ft;
    auto* c_ft = app.add_subcommand("finetune", "Fine-tune a classifier on (text)<|label|>(label) sequences");
    c_ft->add_option("--train", ft.train, "Training JSONL")->required();
    c_ft->add_option("--tokenizer", ft.tokenizer, "Tokenizer directory")->required();
    c_ft->add_option("--init", ft.init, "Start from this pre-trained checkpoint");
    c_ft->add_option("--labels", ft.labels, "Label manifest (one label per line); default: order of appearance");
    c_ft->add_option("--task", ft.task, "single-label or multiple-choice")
        ->check(CLI::IsMember({"single-label", "multiple-choice"}))
        ->capture_default_str();
    c_ft->add_option("--out", ft.out, "Output directory")->capture_default_str();
    ft.flags.attach(c_ft, true);

    ScoringArgs pr;
    auto* c_pred = app.add_subcommand("predict", "Predict labels or choices for a JSONL file");
    ScoringArgs ev;
    auto* c_eval = app.add_subcommand("evaluate", "Score predictions against gold labels and write a report");
    for (auto [cmd, args, input_flag] : {std::tuple{c_pred, &pr, "--input"}, std::tuple{c_eval, &ev, "--data"}}) {
        cmd->add_option("--model", args->model, "Fine-tuned checkpoint")->required();
        cmd->add_option("--tokenizer", args->tokenizer, "Tokenizer directory")->required();
        cmd->add_option(input_flag, args->input, "Input JSONL")->required();
        cmd->add_option("--labels", args->labels, "Label manifest; default: labels.txt beside the model");
        cmd->add_option("--task", args->task, "single-label or multiple-choice")
            ->check(CLI::IsMember({"single-label", "multiple-choice"}))
            ->capture_default_str();
        cmd->add_flag("--raw-scores", args->raw_scores, "Sum label log-probabilities instead of averaging per token");
        cmd->add_option("--out", args->out, "Output directory")->required();
    }

    CurveArgs lc;
    auto* c_lc = app.add_subcommand("loss-curve", "Plot loss logs as an SVG chart plus a downsampled CSV");
    c_lc->add_option("logs", lc.logs, "Loss-log CSV files, one series each")->required();
    c_lc->add_option("--out", lc.out, "Output SVG path; the CSV and manifest are written beside it")->required();
    c_lc->add_option("--names", lc.names, "Series names (default: file stems)");
    c_lc->add_option("--points", lc.points, "Maximum points per series")->capture_default_str();
    c_lc->add_option("--title", lc.title, "Chart title")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*c_tok) return run_train_tokenizer(tk);
        if (*c_ing) return run_ingest(in);
        if (*c_pre) return run_pretrain(pt);
        if (*c_ft) return run_finetune(ft);
        if (*c_pred) return run_predict(pr);
        if (*c_eval) return run_evaluate(ev);
        if (*c_lc) return run_loss_curve(lc);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
