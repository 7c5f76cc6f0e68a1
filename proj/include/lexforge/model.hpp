#pragma once

// GPT-J-style decoder: rotary attention and a feed-forward network reading one
// shared pre-layer-norm and adding into the residual in parallel.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lexforge/error.hpp"
#include "lexforge/hash.hpp"
#include "lexforge/kv_config.hpp"
#include "lexforge/ops.hpp"
#include "lexforge/rng.hpp"
#include "lexforge/tensor.hpp"

namespace lexforge {

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t rotary_dim = 16;
    std::size_t vocab_size = 2048;
    std::size_t max_seq_len = 256;
    bool tie_embeddings = false;

    std::size_t d_head() const { return d_model / n_heads; }
    std::size_t d_ff() const { return 4 * d_model; }

    void validate() const {
        if (n_layers == 0 || d_model == 0 || n_heads == 0 || vocab_size == 0)
            throw ConfigError("n_layers, d_model, n_heads and vocab_size must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
        if (rotary_dim % 2 != 0) throw ConfigError("rotary_dim must be even, got " + std::to_string(rotary_dim));
        if (rotary_dim > d_head())
            throw ConfigError("rotary_dim " + std::to_string(rotary_dim) + " exceeds d_head " + std::to_string(d_head()));
        if (max_seq_len < 2) throw ConfigError("max_seq_len must be at least 2");
    }

    /// Closed form: V*d (embedding) + L*(12 d^2 + 7 d) (blocks: layer norm 2d,
    /// q/k/v/out 4d^2, fc_in 4d^2 + 4d, fc_out 4d^2 + d) + 2d (final norm)
    /// + d*V (untied head weight) + V (head bias).
    std::size_t param_count() const {
        const std::size_t d = d_model, v = vocab_size;
        return v * d + n_layers * (12 * d * d + 7 * d) + 2 * d + (tie_embeddings ? 0 : d * v) + v;
    }

    /// `tiny` is the desk-scale tier. The larger tiers are non-normative
    /// guesses sized to land near 456M / 1.6B / 6B parameters; `6B` follows
    /// the published GPT-J-6B shape.
    static ModelConfig preset(std::string_view name) {
        ModelConfig c;
        if (name == "tiny") {
            c = {4, 128, 4, 16, 2048, 256, false};
        } else if (name == "456M") {
            c = {28, 1024, 16, 32, 50257, 2048, false};
        } else if (name == "1.6B") {
            c = {28, 2048, 16, 64, 50257, 2048, false};
        } else if (name == "6B") {
            c = {28, 4096, 16, 64, 50400, 2048, false};
        } else {
            throw ConfigError("unknown model preset '" + std::string(name) + "' (expected tiny, 456M, 1.6B or 6B)");
        }
        return c;
    }

    void write(KeyValueConfig& kv) const {
        kv.set("n_layers", n_layers);
        kv.set("d_model", d_model);
        kv.set("n_heads", n_heads);
        kv.set("rotary_dim", rotary_dim);
        kv.set("vocab_size", vocab_size);
        kv.set("max_seq_len", max_seq_len);
        kv.set("tie_embeddings", tie_embeddings);
    }

    static ModelConfig read(const KeyValueConfig& kv) { return read(kv, ModelConfig{}); }

    static ModelConfig read(const KeyValueConfig& kv, ModelConfig base) {
        if (kv.has("preset")) base = preset(kv.get<std::string>("preset", "tiny"));
        base.n_layers = kv.get("n_layers", base.n_layers);
        base.d_model = kv.get("d_model", base.d_model);
        base.n_heads = kv.get("n_heads", base.n_heads);
        base.rotary_dim = kv.get("rotary_dim", base.rotary_dim);
        base.vocab_size = kv.get("vocab_size", base.vocab_size);
        base.max_seq_len = kv.get("max_seq_len", base.max_seq_len);
        base.tie_embeddings = kv.get("tie_embeddings", base.tie_embeddings);
        base.validate();
        return base;
    }

    std::string to_string() const {
        KeyValueConfig kv;
        write(kv);
        return kv.to_string();
    }

    std::uint64_t digest() const { return fnv1a(to_string()); }

    bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

/// Per-layer keys/values ([B, heads, S, d_head]) accumulated by incremental
/// decoding.
template <typename T>
struct KVCache {
    std::vector<Tensor<T>> keys;
    std::vector<Tensor<T>> values;
    std::size_t length = 0;
};

enum class SampleMode { Greedy, Temperature };

struct GenerateOptions {
    SampleMode mode = SampleMode::Greedy;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    std::optional<std::int32_t> stop_id; ///< typically the end tag
    bool use_cache = true;
};

template <typename T>
class LanguageModel {
public:
    LanguageModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
        config_.validate();
        const std::size_t d = config_.d_model, v = config_.vocab_size, ff = config_.d_ff();
        Rng rng(seed);
        const double residual_std = 0.02 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
        auto normal = [&](Shape s, double stddev) {
            std::vector<T> vals(numel(s));
            for (auto& x : vals) x = static_cast<T>(rng.normal(0.0, stddev));
            return Tensor<T>(std::move(s), std::move(vals), true);
        };
        auto zeros = [](Shape s) { return Tensor<T>::zeros(std::move(s), true); };
        auto ones = [](Shape s) {
            auto t = Tensor<T>::full(std::move(s), T(1));
            t.set_requires_grad(true);
            return t;
        };

        add("wte", normal({v, d}, 0.02));
        for (std::size_t l = 0; l < config_.n_layers; ++l) {
            const std::string p = "blocks." + std::to_string(l) + ".";
            add(p + "ln.gain", ones({d}));
            add(p + "ln.bias", zeros({d}));
            add(p + "attn.q", normal({d, d}, 0.02));
            add(p + "attn.k", normal({d, d}, 0.02));
            add(p + "attn.v", normal({d, d}, 0.02));
            add(p + "attn.out", normal({d, d}, residual_std));
            add(p + "mlp.fc_in.weight", normal({d, ff}, 0.02));
            add(p + "mlp.fc_in.bias", zeros({ff}));
            add(p + "mlp.fc_out.weight", normal({ff, d}, residual_std));
            add(p + "mlp.fc_out.bias", zeros({d}));
        }
        add("ln_f.gain", ones({d}));
        add("ln_f.bias", zeros({d}));
        if (!config_.tie_embeddings) add("head.weight", normal({d, v}, 0.02));
        add("head.bias", zeros({v}));
    }

    const ModelConfig& config() const noexcept { return config_; }

    std::vector<NamedTensor<T>>& parameters() noexcept { return params_; }
    const std::vector<NamedTensor<T>>& parameters() const noexcept { return params_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    /// Names and shapes in a fixed order.
    std::vector<std::pair<std::string, Shape>> manifest() const {
        std::vector<std::pair<std::string, Shape>> out;
        for (const auto& p : params_) out.emplace_back(p.name, p.tensor.shape());
        return out;
    }

    const Tensor<T>& param(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return p.tensor;
        throw InputError("no parameter named " + name);
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    /// ids is row-major [batch, seq]; returns logits [batch, seq, vocab]. With
    /// a cache, positions continue from cache->length and the new keys/values
    /// are appended (inference only).
    Tensor<T> forward(Tape<T>& tape, std::span<const std::int32_t> ids, std::size_t batch, std::size_t seq,
                      KVCache<T>* cache = nullptr) const {
        const std::size_t past = cache ? cache->length : 0;
        if (ids.size() != batch * seq || batch == 0 || seq == 0)
            throw ShapeError("forward: " + std::to_string(ids.size()) + " ids do not form [" + std::to_string(batch) +
                             "," + std::to_string(seq) + "]");
        if (past + seq > config_.max_seq_len)
            throw InputError("sequence length " + std::to_string(past + seq) + " exceeds max_seq_len " +
                             std::to_string(config_.max_seq_len));
        if (cache && tape.recording()) throw InputError("forward with a KV cache is inference-only");
        if (cache && cache->keys.empty()) {
            cache->keys.resize(config_.n_layers);
            cache->values.resize(config_.n_layers);
        }
        const std::size_t d = config_.d_model, h = config_.n_heads, dh = config_.d_head();
        const T attn_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

        std::size_t idx = 0;
        Tensor<T> x = ops::embedding(tape, params_[idx++].tensor, ids, Shape{batch, seq});
        for (std::size_t l = 0; l < config_.n_layers; ++l) {
            const auto& ln_g = params_[idx++].tensor;
            const auto& ln_b = params_[idx++].tensor;
            const auto& wq = params_[idx++].tensor;
            const auto& wk = params_[idx++].tensor;
            const auto& wv = params_[idx++].tensor;
            const auto& wo = params_[idx++].tensor;
            const auto& fc_in_w = params_[idx++].tensor;
            const auto& fc_in_b = params_[idx++].tensor;
            const auto& fc_out_w = params_[idx++].tensor;
            const auto& fc_out_b = params_[idx++].tensor;

            const auto hn = ops::layer_norm(tape, x, ln_g, ln_b);
            auto heads = [&](const Tensor<T>& w, bool rotate) {
                auto t = ops::reshape(tape, ops::matmul(tape, hn, w), Shape{batch, seq, h, dh});
                if (rotate) t = ops::rotary(tape, t, config_.rotary_dim, 10000.0, past);
                return ops::permute(tape, t, {0, 2, 1, 3}); // [B, h, T, dh]
            };
            auto q = heads(wq, true);
            auto k = heads(wk, true);
            auto v = heads(wv, false);
            if (cache) {
                k = append_seq(cache->keys[l], k);
                v = append_seq(cache->values[l], v);
                cache->keys[l] = k;
                cache->values[l] = v;
            }
            const auto scores = ops::matmul(tape, q, ops::transpose(tape, k));
            const auto probs = ops::causal_softmax(tape, scores, past, attn_scale);
            const auto ctx = ops::reshape(tape, ops::permute(tape, ops::matmul(tape, probs, v), {0, 2, 1, 3}),
                                          Shape{batch, seq, d});
            const auto attn = ops::matmul(tape, ctx, wo);
            const auto mlp = ops::add(
                tape, ops::matmul(tape, ops::gelu(tape, ops::add(tape, ops::matmul(tape, hn, fc_in_w), fc_in_b)), fc_out_w),
                fc_out_b);
            x = ops::add(tape, x, ops::add(tape, attn, mlp));
        }
        const auto& lnf_g = params_[idx++].tensor;
        const auto& lnf_b = params_[idx++].tensor;
        const auto xf = ops::layer_norm(tape, x, lnf_g, lnf_b);
        Tensor<T> logits;
        if (config_.tie_embeddings) {
            logits = ops::matmul(tape, xf, ops::transpose(tape, params_[0].tensor));
        } else {
            logits = ops::matmul(tape, xf, params_[idx++].tensor);
        }
        logits = ops::add(tape, logits, params_[idx++].tensor);
        if (cache) cache->length += seq;
        return logits;
    }

    /// Mean next-token cross-entropy of ids[:, 1:] given ids[:, :-1], skipping
    /// targets equal to ignore_id.
    Tensor<T> lm_loss(Tape<T>& tape, std::span<const std::int32_t> ids, std::size_t batch, std::size_t seq,
                      std::int32_t ignore_id = -1) const {
        if (seq < 2) throw InputError("lm_loss needs sequences of length >= 2");
        if (ids.size() != batch * seq) throw ShapeError("lm_loss: ids do not form the stated [batch, seq]");
        std::vector<std::int32_t> inputs(batch * (seq - 1)), targets(batch * (seq - 1));
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t + 1 < seq; ++t) {
                inputs[b * (seq - 1) + t] = ids[b * seq + t];
                targets[b * (seq - 1) + t] = ids[b * seq + t + 1];
            }
        const auto logits = forward(tape, inputs, batch, seq - 1);
        return ops::cross_entropy(tape, logits, targets, ignore_id);
    }

    /// Autoregressive continuation of a single prompt.
    std::vector<std::int32_t> generate(std::span<const std::int32_t> prompt, std::size_t max_new,
                                       const GenerateOptions& opts = {}) const {
        if (prompt.empty()) throw InputError("generate needs a non-empty prompt");
        if (prompt.size() + max_new > config_.max_seq_len)
            throw InputError("prompt length " + std::to_string(prompt.size()) + " + " + std::to_string(max_new) +
                             " new tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
        std::vector<std::int32_t> out(prompt.begin(), prompt.end());
        if (max_new == 0) return out;
        Rng rng(opts.seed);
        Tape<T> tape(false);
        KVCache<T> cache;
        Tensor<T> logits = opts.use_cache ? forward(tape, out, 1, out.size(), &cache) : forward(tape, out, 1, out.size());
        for (std::size_t step = 0; step < max_new; ++step) {
            const std::size_t v = config_.vocab_size;
            const auto row = logits.data().subspan(logits.numel() - v, v);
            const std::int32_t next = pick(row, opts, rng);
            out.push_back(next);
            if (opts.stop_id && next == *opts.stop_id) break;
            if (step + 1 == max_new) break;
            if (opts.use_cache) {
                const std::int32_t tok[1] = {next};
                logits = forward(tape, tok, 1, 1, &cache);
            } else {
                logits = forward(tape, out, 1, out.size());
            }
        }
        return out;
    }

    /// Teacher-forced sum of log p(continuation[t] | prefix, continuation[<t]).
    double score_continuation(std::span<const std::int32_t> prefix, std::span<const std::int32_t> continuation) const {
        if (continuation.empty()) throw InputError("score_continuation needs a non-empty continuation");
        if (prefix.empty()) throw InputError("score_continuation needs a non-empty prefix");
        std::vector<std::int32_t> seq(prefix.begin(), prefix.end());
        seq.insert(seq.end(), continuation.begin(), continuation.end());
        if (seq.size() - 1 > config_.max_seq_len)
            throw InputError("prefix + continuation of length " + std::to_string(seq.size()) + " exceeds max_seq_len");
        seq.pop_back(); // the last token is only ever a target
        Tape<T> tape(false);
        const auto logits = forward(tape, seq, 1, seq.size());
        double total = 0;
        for (std::size_t t = 0; t < continuation.size(); ++t)
            total += log_softmax_at(logits, prefix.size() - 1 + t, continuation[t]);
        return total;
    }

    /// score_continuation for several continuations sharing one prefix; the
    /// prefix is run once and its cache reused.
    std::vector<double> score_continuations(std::span<const std::int32_t> prefix,
                                            const std::vector<std::vector<std::int32_t>>& continuations) const {
        if (prefix.empty()) throw InputError("score_continuations needs a non-empty prefix");
        std::size_t longest = 0;
        for (const auto& c : continuations) {
            if (c.empty()) throw InputError("score_continuations: empty continuation");
            longest = std::max(longest, c.size());
        }
        if (prefix.size() + longest - 1 > config_.max_seq_len)
            throw InputError("prefix + continuation exceeds max_seq_len " + std::to_string(config_.max_seq_len));
        Tape<T> tape(false);
        KVCache<T> base;
        const auto prefix_logits = forward(tape, prefix, 1, prefix.size(), &base);
        std::vector<double> scores;
        scores.reserve(continuations.size());
        for (const auto& c : continuations) {
            double total = log_softmax_at(prefix_logits, prefix.size() - 1, c[0]);
            if (c.size() > 1) {
                KVCache<T> cache = base;
                const auto logits = forward(tape, std::span(c).first(c.size() - 1), 1, c.size() - 1, &cache);
                for (std::size_t t = 1; t < c.size(); ++t) total += log_softmax_at(logits, t - 1, c[t]);
            }
            scores.push_back(total);
        }
        return scores;
    }

private:
    void add(std::string name, Tensor<T> t) { params_.push_back({std::move(name), std::move(t)}); }

    // Concatenates along the sequence axis of [B, h, S, dh] tensors.
    static Tensor<T> append_seq(const Tensor<T>& past, const Tensor<T>& now) {
        if (!past.defined()) return now;
        const std::size_t b = now.dim(0), h = now.dim(1), s0 = past.dim(2), s1 = now.dim(2), dh = now.dim(3);
        Buffer<T> out(b * h * (s0 + s1) * dh);
        for (std::size_t i = 0; i < b * h; ++i) {
            std::copy_n(past.data().data() + i * s0 * dh, s0 * dh, out.data() + i * (s0 + s1) * dh);
            std::copy_n(now.data().data() + i * s1 * dh, s1 * dh, out.data() + i * (s0 + s1) * dh + s0 * dh);
        }
        return Tensor<T>(Shape{b, h, s0 + s1, dh}, std::move(out));
    }

    double log_softmax_at(const Tensor<T>& logits, std::size_t position, std::int32_t token) const {
        const std::size_t v = config_.vocab_size;
        if (token < 0 || static_cast<std::size_t>(token) >= v)
            throw InputError("token " + std::to_string(token) + " outside vocabulary of size " + std::to_string(v));
        const T* row = logits.data().data() + position * v;
        const double mx = *std::max_element(row, row + v);
        double s = 0;
        for (std::size_t i = 0; i < v; ++i) s += std::exp(static_cast<double>(row[i]) - mx);
        return static_cast<double>(row[token]) - mx - std::log(s);
    }

    static std::int32_t pick(std::span<const T> row, const GenerateOptions& opts, Rng& rng) {
        if (opts.mode == SampleMode::Greedy) {
            // First maximum wins ties.
            return static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
        }
        if (!(opts.temperature > 0)) throw ConfigError("temperature must be positive");
        const double mx = *std::max_element(row.begin(), row.end());
        std::vector<double> p(row.size());
        double total = 0;
        for (std::size_t i = 0; i < row.size(); ++i) total += p[i] = std::exp((row[i] - mx) / opts.temperature);
        double u = rng.uniform() * total;
        for (std::size_t i = 0; i < p.size(); ++i) {
            u -= p[i];
            if (u < 0) return static_cast<std::int32_t>(i);
        }
        return static_cast<std::int32_t>(p.size() - 1);
    }

    ModelConfig config_;
    std::vector<NamedTensor<T>> params_;
};

} // namespace lexforge
