#pragma once

// Adam training loop with warmup + cosine learning-rate schedule, global-norm
// clipping, CSV loss logging and resumable checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "lexforge/binary_io.hpp"
#include "lexforge/error.hpp"
#include "lexforge/hash.hpp"
#include "lexforge/kv_config.hpp"
#include "lexforge/model.hpp"

namespace lexforge {

struct TrainConfig {
    std::uint64_t total_steps = 350000;
    std::size_t batch_size = 8;
    std::size_t seq_len = 2048;
    double lr_max = 0.6e-4;
    double lr_min = 0.6e-5;
    std::uint64_t warmup_steps = 3000;
    double clip_norm = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t checkpoint_every = 10000;
    std::uint64_t log_every = 1;

    void validate() const {
        if (total_steps == 0 || batch_size == 0 || seq_len == 0) throw ConfigError("total_steps, batch_size and seq_len must be positive");
        if (!(lr_max > 0) || !(lr_min > 0)) throw ConfigError("learning rates must be positive");
        if (lr_min > lr_max)
            throw ConfigError("lr_min " + format_double(lr_min) + " exceeds lr_max " + format_double(lr_max));
        if (warmup_steps >= total_steps)
            throw ConfigError("warmup_steps " + std::to_string(warmup_steps) + " must be below total_steps " +
                              std::to_string(total_steps));
        if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
        if (!(eps > 0)) throw ConfigError("Adam eps must be positive");
        if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
        if (log_every == 0 || checkpoint_every == 0) throw ConfigError("log_every and checkpoint_every must be positive");
    }

    void write(KeyValueConfig& kv) const {
        kv.set("total_steps", total_steps);
        kv.set("batch_size", batch_size);
        kv.set("seq_len", seq_len);
        kv.set("lr_max", lr_max);
        kv.set("lr_min", lr_min);
        kv.set("warmup_steps", warmup_steps);
        kv.set("clip_norm", clip_norm);
        kv.set("beta1", beta1);
        kv.set("beta2", beta2);
        kv.set("eps", eps);
        kv.set("weight_decay", weight_decay);
        kv.set("seed", seed);
        kv.set("checkpoint_every", checkpoint_every);
        kv.set("log_every", log_every);
    }

    static TrainConfig read(const KeyValueConfig& kv) { return read(kv, TrainConfig{}); }

    static TrainConfig read(const KeyValueConfig& kv, TrainConfig c) {
        c.total_steps = kv.get("total_steps", c.total_steps);
        c.batch_size = kv.get("batch_size", c.batch_size);
        c.seq_len = kv.get("seq_len", c.seq_len);
        c.lr_max = kv.get("lr_max", c.lr_max);
        c.lr_min = kv.get("lr_min", c.lr_min);
        c.warmup_steps = kv.get("warmup_steps", c.warmup_steps);
        c.clip_norm = kv.get("clip_norm", c.clip_norm);
        c.beta1 = kv.get("beta1", c.beta1);
        c.beta2 = kv.get("beta2", c.beta2);
        c.eps = kv.get("eps", c.eps);
        c.weight_decay = kv.get("weight_decay", c.weight_decay);
        c.seed = kv.get("seed", c.seed);
        c.checkpoint_every = kv.get("checkpoint_every", c.checkpoint_every);
        c.log_every = kv.get("log_every", c.log_every);
        c.validate();
        return c;
    }

    bool operator==(const TrainConfig&) const = default;
};

/// Linear ramp 0 -> lr_max over warmup_steps, then cosine decay reaching
/// lr_min at total_steps. Both endpoints return the configured values exactly.
inline double lr_at(const TrainConfig& c, std::uint64_t step) {
    if (step > c.total_steps)
        throw InputError("step " + std::to_string(step) + " outside schedule [0, " + std::to_string(c.total_steps) + "]");
    if (step == c.total_steps) return c.lr_min;
    if (step < c.warmup_steps) return c.lr_max * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
    if (step == c.warmup_steps) return c.lr_max;
    const double progress =
        static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.total_steps - c.warmup_steps);
    return c.lr_min + 0.5 * (c.lr_max - c.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

/// First and second Adam moments, one buffer per parameter in manifest order.
template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::uint64_t step = 0;

    static AdamState for_parameters(const std::vector<NamedTensor<T>>& params) {
        AdamState s;
        for (const auto& p : params) {
            s.m.emplace_back(p.tensor.numel(), T(0));
            s.v.emplace_back(p.tensor.numel(), T(0));
        }
        return s;
    }
};

/// Global L2 norm of all parameter gradients (missing buffers count as zero).
template <typename T>
double global_grad_norm(const std::vector<NamedTensor<T>>& params) {
    double sq = 0;
    for (const auto& p : params)
        if (p.tensor.has_grad())
            for (const T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(sq);
}

/// Rescales all gradients so their global norm is at most max_norm. Returns
/// the norm before clipping.
template <typename T>
double clip_grad_norm(std::vector<NamedTensor<T>>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& p : params)
            if (p.tensor.has_grad())
                for (T& g : p.tensor.mutable_grad()) g = static_cast<T>(g * scale);
    }
    return norm;
}

/// One bias-corrected Adam update with decoupled weight decay. Parameters
/// without a gradient buffer are left untouched.
template <typename T>
void adam_update(std::vector<NamedTensor<T>>& params, AdamState<T>& state, const TrainConfig& c, double lr) {
    if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match the parameter list");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].tensor;
        if (!p.has_grad()) continue;
        auto w = p.mutable_data();
        const auto g = p.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g[j];
            const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double update = (mj / bc1) / (std::sqrt(vj / bc2) + c.eps) + c.weight_decay * w[j];
            w[j] = static_cast<T>(w[j] - lr * update);
        }
    }
}

struct StepResult {
    double loss = 0;
    double grad_norm = 0;
    double lr = 0;
};

/// Loss, backward, clip, Adam at lr_at(step). ids is [batch, seq] and the
/// returned loss is the pre-update value.
template <typename T>
StepResult train_step(LanguageModel<T>& model, AdamState<T>& state, std::span<const std::int32_t> ids,
                      std::size_t batch, std::size_t seq, const TrainConfig& c, std::uint64_t step,
                      std::int32_t ignore_id = -1) {
    StepResult r;
    r.lr = lr_at(c, step);
    model.zero_grad();
    Tape<T> tape;
    Tensor<T> loss;
    try {
        loss = model.lm_loss(tape, ids, batch, seq, ignore_id);
    } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    r.loss = static_cast<double>(loss.item());
    tape.backward(loss);
    r.grad_norm = clip_grad_norm(model.parameters(), c.clip_norm);
    if (!std::isfinite(r.loss) || !std::isfinite(r.grad_norm)) {
        double max_abs = 0;
        for (const auto& p : model.parameters())
            if (p.tensor.has_grad())
                for (const T g : p.tensor.grad()) max_abs = std::max(max_abs, std::abs(static_cast<double>(g)));
        throw NumericError("step " + std::to_string(step) + ": non-finite loss or gradient (loss " +
                           format_double(r.loss) + ", max |grad| " + format_double(max_abs) + ")");
    }
    adam_update(model.parameters(), state, c, r.lr);
    return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct StoredTensor {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::string bytes; ///< little-endian payload
};

/// Named-tensor container plus flat metadata (configs, step, cursor, ...).
struct Checkpoint {
    static constexpr char kMagic[4] = {'L', 'E', 'X', 'F'};
    static constexpr std::uint32_t kVersion = 1;

    KeyValueConfig meta;
    std::vector<StoredTensor> tensors;

    const StoredTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }

    /// Layout: magic, u32 version, metadata text, u32 entry count, entries of
    /// (name, u8 dtype, u8 rank, u64 dims, u64 payload offset, u64 payload
    /// bytes), payloads, then the FNV-1a digest of everything before it.
    std::string serialize() const {
        binary::Writer head;
        head.put_bytes(std::string_view(kMagic, 4));
        head.put(kVersion);
        head.put_string(meta.to_string());
        head.put(static_cast<std::uint32_t>(tensors.size()));
        std::uint64_t offset = 0;
        for (const auto& t : tensors) {
            head.put_string(t.name);
            head.put(static_cast<std::uint8_t>(t.dtype));
            head.put(static_cast<std::uint8_t>(t.shape.size()));
            for (const auto d : t.shape) head.put(static_cast<std::uint64_t>(d));
            head.put(offset);
            head.put(static_cast<std::uint64_t>(t.bytes.size()));
            offset += t.bytes.size();
        }
        std::string out = head.take();
        for (const auto& t : tensors) out += t.bytes;
        binary::Writer tail;
        tail.put(fnv1a(out));
        return out + tail.bytes();
    }

    static Checkpoint deserialize(std::string_view data, const std::string& origin = "checkpoint") {
        if (data.size() < 16 || data.substr(0, 4) != std::string_view(kMagic, 4))
            throw IntegrityError(origin + ": not a checkpoint (bad magic)");
        binary::Reader tail(data.substr(data.size() - 8), origin);
        const auto stored = tail.get<std::uint64_t>();
        const auto body = data.substr(0, data.size() - 8);
        binary::Reader r(body, origin);
        r.get_bytes(4);
        const auto version = r.get<std::uint32_t>();
        if (version != kVersion) throw VersionError(origin + ": unsupported checkpoint format", version, kVersion);
        if (fnv1a(body) != stored) throw IntegrityError(origin + ": digest mismatch (file truncated or corrupted)");
        Checkpoint c;
        c.meta = KeyValueConfig::parse(r.get_string(), origin + " metadata");
        const auto count = r.get<std::uint32_t>();
        std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
        for (std::uint32_t i = 0; i < count; ++i) {
            StoredTensor t;
            t.name = r.get_string();
            const auto dt = r.get<std::uint8_t>();
            if (dt > 1) throw IntegrityError(origin + ": unknown dtype for " + t.name);
            t.dtype = static_cast<DType>(dt);
            const auto rank = r.get<std::uint8_t>();
            for (std::uint8_t k = 0; k < rank; ++k) t.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
            const auto off = r.get<std::uint64_t>();
            const auto len = r.get<std::uint64_t>();
            if (len != numel(t.shape) * (t.dtype == DType::F32 ? 4 : 8))
                throw IntegrityError(origin + ": payload size of " + t.name + " disagrees with its shape");
            spans.emplace_back(off, len);
            c.tensors.push_back(std::move(t));
        }
        const auto payload = body.substr(r.position());
        for (std::size_t i = 0; i < spans.size(); ++i) {
            const auto [off, len] = spans[i];
            if (off > payload.size() || len > payload.size() - off)
                throw IntegrityError(origin + ": payload of " + c.tensors[i].name + " lies outside the file");
            c.tensors[i].bytes = std::string(payload.substr(off, len));
        }
        return c;
    }
};

template <typename T>
StoredTensor store_tensor(std::string name, const Shape& shape, std::span<const T> values) {
    StoredTensor s;
    s.name = std::move(name);
    s.dtype = std::is_same_v<T, float> ? DType::F32 : DType::F64;
    s.shape = shape;
    binary::Writer w;
    for (const T v : values) {
        if constexpr (std::is_same_v<T, float>)
            w.put_f32(v);
        else
            w.put_f64(v);
    }
    s.bytes = w.take();
    return s;
}

template <typename T>
void load_values(const StoredTensor& s, std::span<T> out) {
    const DType want = std::is_same_v<T, float> ? DType::F32 : DType::F64;
    if (s.dtype != want) throw ShapeError("tensor " + s.name + " is stored with a different dtype");
    binary::Reader r(s.bytes, s.name);
    for (auto& v : out) {
        if constexpr (std::is_same_v<T, float>)
            v = r.get_f32();
        else
            v = r.get_f64();
    }
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        const auto bytes = c.serialize();
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("cannot write checkpoint " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

/// Reads and verifies a checkpoint. When a tokenizer fingerprint is supplied
/// it must match the one recorded at training time.
inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  std::optional<std::uint64_t> tokenizer_fingerprint = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto c = Checkpoint::deserialize(data, path.string());
    if (tokenizer_fingerprint) {
        const auto recorded = c.meta.raw("tokenizer_fingerprint");
        if (recorded && *recorded != to_hex(*tokenizer_fingerprint))
            throw InputError(path.string() + " was trained with tokenizer " + *recorded + " but tokenizer " +
                             to_hex(*tokenizer_fingerprint) + " was supplied; refusing to mix vocabularies");
    }
    return c;
}

/// Training position carried across a resume.
struct TrainProgress {
    std::uint64_t step = 0; ///< completed steps
    std::uint64_t cursor = 0; ///< data-source position
    double ema_loss = 0;
    std::uint64_t tokens_seen = 0;
    std::optional<std::uint64_t> tokenizer_fingerprint;
};

template <typename T>
Checkpoint make_checkpoint(const LanguageModel<T>& model, const AdamState<T>& state, const TrainConfig& cfg,
                           const TrainProgress& progress) {
    Checkpoint c;
    model.config().write(c.meta);
    KeyValueConfig tc;
    cfg.write(tc);
    for (const auto& [k, v] : tc.values()) c.meta.set("train." + k, v);
    c.meta.set("step", progress.step);
    c.meta.set("cursor", progress.cursor);
    c.meta.set("ema_loss", format_double(progress.ema_loss));
    c.meta.set("tokens_seen", progress.tokens_seen);
    c.meta.set("adam_step", state.step);
    if (progress.tokenizer_fingerprint) c.meta.set("tokenizer_fingerprint", to_hex(*progress.tokenizer_fingerprint));
    const auto& params = model.parameters();
    for (const auto& p : params) c.tensors.push_back(store_tensor<T>(p.name, p.tensor.shape(), p.tensor.data()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        c.tensors.push_back(store_tensor<T>("adam.m." + params[i].name, params[i].tensor.shape(), state.m[i]));
        c.tensors.push_back(store_tensor<T>("adam.v." + params[i].name, params[i].tensor.shape(), state.v[i]));
    }
    return c;
}

inline ModelConfig checkpoint_model_config(const Checkpoint& c) { return ModelConfig::read(c.meta); }

inline TrainConfig checkpoint_train_config(const Checkpoint& c) {
    KeyValueConfig kv;
    for (const auto& [k, v] : c.meta.values())
        if (k.rfind("train.", 0) == 0) kv.set(k.substr(6), v);
    return TrainConfig::read(kv);
}

inline TrainProgress checkpoint_progress(const Checkpoint& c) {
    TrainProgress p;
    p.step = c.meta.get<std::uint64_t>("step", 0);
    p.cursor = c.meta.get<std::uint64_t>("cursor", 0);
    p.ema_loss = c.meta.get<double>("ema_loss", 0.0);
    p.tokens_seen = c.meta.get<std::uint64_t>("tokens_seen", 0);
    if (const auto fp = c.meta.raw("tokenizer_fingerprint")) p.tokenizer_fingerprint = std::stoull(*fp, nullptr, 16);
    return p;
}

/// Copies stored parameters into `model`; ShapeError names the first tensor
/// that is missing or shaped differently.
template <typename T>
void restore_parameters(const Checkpoint& c, LanguageModel<T>& model) {
    for (auto& p : model.parameters()) {
        const auto* s = c.find(p.name);
        if (!s) throw ShapeError("checkpoint has no tensor " + p.name);
        if (s->shape != p.tensor.shape())
            throw ShapeError("tensor " + p.name + ": checkpoint shape " + shape_str(s->shape) + " vs model shape " +
                             shape_str(p.tensor.shape()));
        load_values<T>(*s, p.tensor.mutable_data());
    }
}

template <typename T>
AdamState<T> restore_optimizer(const Checkpoint& c, const LanguageModel<T>& model) {
    auto state = AdamState<T>::for_parameters(model.parameters());
    const auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (const char* which : {"adam.m.", "adam.v."}) {
            const auto name = which + params[i].name;
            const auto* s = c.find(name);
            if (!s) throw ShapeError("checkpoint has no tensor " + name);
            if (s->shape != params[i].tensor.shape()) throw ShapeError("tensor " + name + " has shape " + shape_str(s->shape));
            load_values<T>(*s, std::span<T>(which[5] == 'm' ? state.m[i] : state.v[i]));
        }
    }
    state.step = c.meta.get<std::uint64_t>("adam_step", 0);
    return state;
}

// ---------------------------------------------------------------------------
// Loop

struct Batch {
    std::vector<std::int32_t> ids; ///< row-major [batch, seq]
    std::size_t batch = 0;
    std::size_t seq = 0;
};

/// Deterministic stream of batches addressed by an integer cursor.
class BatchSource {
public:
    virtual ~BatchSource() = default;
    virtual Batch next() = 0;
    virtual std::uint64_t cursor() const = 0;
    virtual void seek(std::uint64_t cursor) = 0;
};

/// Cycles through a fixed list of batches.
class RepeatBatches final : public BatchSource {
public:
    explicit RepeatBatches(std::vector<Batch> batches) : batches_(std::move(batches)) {
        if (batches_.empty()) throw InputError("RepeatBatches needs at least one batch");
    }
    Batch next() override { return batches_[cursor_++ % batches_.size()]; }
    std::uint64_t cursor() const override { return cursor_; }
    void seek(std::uint64_t c) override { cursor_ = c; }

private:
    std::vector<Batch> batches_;
    std::uint64_t cursor_ = 0;
};

struct LossRecord {
    std::uint64_t step;
    double loss;
    double ema_loss;
    double lr;
    std::uint64_t tokens_seen;
};

inline constexpr const char* kLossLogHeader = "step,loss,ema_loss,lr,tokens_seen";

inline std::string format_loss_record(const LossRecord& r) {
    return std::to_string(r.step) + "," + format_double(r.loss) + "," + format_double(r.ema_loss) + "," +
           format_double(r.lr) + "," + std::to_string(r.tokens_seen);
}

struct TrainSinks {
    std::ostream* loss_log = nullptr; ///< CSV rows; the header is written by the caller
    std::function<void(const Checkpoint&)> on_checkpoint;
    std::function<void(const LossRecord&)> on_record;
    std::int32_t ignore_id = -1; ///< targets skipped by the loss (the pad id)
    double ema_alpha = 0.01;
};

/// Runs steps progress.step+1 .. total_steps and returns the final checkpoint.
/// A loss-log write failure stops training after the current state has been
/// handed to on_checkpoint.
template <typename T>
Checkpoint train_loop(LanguageModel<T>& model, AdamState<T>& state, BatchSource& data, const TrainConfig& cfg,
                      TrainSinks& sinks, TrainProgress progress = {}) {
    cfg.validate();
    data.seek(progress.cursor);
    while (progress.step < cfg.total_steps) {
        const Batch b = data.next();
        const std::uint64_t step = progress.step + 1;
        const auto r = train_step(model, state, b.ids, b.batch, b.seq, cfg, step, sinks.ignore_id);
        progress.step = step;
        progress.cursor = data.cursor();
        progress.tokens_seen += static_cast<std::uint64_t>(b.batch) * (b.seq - 1);
        progress.ema_loss = step == 1 ? r.loss : (1.0 - sinks.ema_alpha) * progress.ema_loss + sinks.ema_alpha * r.loss;
        const LossRecord rec{step, r.loss, progress.ema_loss, r.lr, progress.tokens_seen};
        if (sinks.on_record) sinks.on_record(rec);
        if (sinks.loss_log && (step % cfg.log_every == 0 || step == cfg.total_steps)) {
            *sinks.loss_log << format_loss_record(rec) << '\n';
            if (!sinks.loss_log->good()) {
                if (sinks.on_checkpoint) sinks.on_checkpoint(make_checkpoint(model, state, cfg, progress));
                throw IoError("loss log write failed at step " + std::to_string(step));
            }
        }
        if (step % cfg.checkpoint_every == 0 && step != cfg.total_steps && sinks.on_checkpoint)
            sinks.on_checkpoint(make_checkpoint(model, state, cfg, progress));
    }
    if (sinks.loss_log) sinks.loss_log->flush();
    auto final = make_checkpoint(model, state, cfg, progress);
    if (sinks.on_checkpoint) sinks.on_checkpoint(final);
    return final;
}

} // namespace lexforge
