#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "lexforge/model.hpp"

using namespace lexforge;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.rotary_dim = 4;
    c.vocab_size = 37;
    c.max_seq_len = 32;
    return c;
}

std::vector<std::int32_t> random_ids(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
    std::uniform_int_distribution<std::int32_t> pick(0, static_cast<std::int32_t>(vocab) - 1);
    std::vector<std::int32_t> ids(n);
    for (auto& id : ids) id = pick(rng);
    return ids;
}

using Mat = std::vector<std::vector<double>>;

Mat weight(const LanguageModel<float>& m, const std::string& name) {
    const auto& t = m.param(name);
    const std::size_t rows = t.dim(0), cols = t.dim(1);
    Mat w(rows, std::vector<double>(cols));
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) w[i][j] = t.data()[i * cols + j];
    return w;
}

std::vector<double> vec(const LanguageModel<float>& m, const std::string& name) {
    const auto d = m.param(name).data();
    return {d.begin(), d.end()};
}

std::vector<double> times(const std::vector<double>& x, const Mat& w) {
    std::vector<double> y(w[0].size(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = 0; j < y.size(); ++j) y[j] += x[i] * w[i][j];
    return y;
}

std::vector<double> norm(const std::vector<double>& x, const std::vector<double>& g, const std::vector<double>& b) {
    const double n = static_cast<double>(x.size());
    double mean = 0, var = 0;
    for (const double v : x) mean += v / n;
    for (const double v : x) var += (v - mean) * (v - mean) / n;
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * g[i] + b[i];
    return y;
}

void rotate(std::vector<double>& v, std::size_t head, std::size_t dh, std::size_t rot, std::size_t pos) {
    for (std::size_t i = 0; i < rot / 2; ++i) {
        const double theta = static_cast<double>(pos) * std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(rot));
        double& a = v[head * dh + 2 * i];
        double& b = v[head * dh + 2 * i + 1];
        const double x = a, y = b;
        a = x * std::cos(theta) - y * std::sin(theta);
        b = x * std::sin(theta) + y * std::cos(theta);
    }
}

// Second implementation of the forward pass for one sequence, written as
// plain loops in double with no tape.
Mat reference_forward(const LanguageModel<float>& m, const std::vector<std::int32_t>& ids) {
    const auto& c = m.config();
    const std::size_t T = ids.size(), d = c.d_model, h = c.n_heads, dh = c.d_head();
    const Mat wte = weight(m, "wte");
    Mat x(T);
    for (std::size_t t = 0; t < T; ++t) x[t] = wte[static_cast<std::size_t>(ids[t])];
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        const auto g = vec(m, p + "ln.gain"), b = vec(m, p + "ln.bias");
        const Mat wq = weight(m, p + "attn.q"), wk = weight(m, p + "attn.k"), wv = weight(m, p + "attn.v"),
                  wo = weight(m, p + "attn.out"), w1 = weight(m, p + "mlp.fc_in.weight"), w2 = weight(m, p + "mlp.fc_out.weight");
        const auto b1 = vec(m, p + "mlp.fc_in.bias"), b2 = vec(m, p + "mlp.fc_out.bias");
        Mat hn(T), q(T), k(T), v(T);
        for (std::size_t t = 0; t < T; ++t) {
            hn[t] = norm(x[t], g, b);
            q[t] = times(hn[t], wq);
            k[t] = times(hn[t], wk);
            v[t] = times(hn[t], wv);
            for (std::size_t hh = 0; hh < h; ++hh) {
                rotate(q[t], hh, dh, c.rotary_dim, t);
                rotate(k[t], hh, dh, c.rotary_dim, t);
            }
        }
        Mat next = x;
        for (std::size_t t = 0; t < T; ++t) {
            std::vector<double> ctx(d, 0.0);
            for (std::size_t hh = 0; hh < h; ++hh) {
                std::vector<double> s(t + 1);
                for (std::size_t j = 0; j <= t; ++j) {
                    double dot = 0;
                    for (std::size_t e = 0; e < dh; ++e) dot += q[t][hh * dh + e] * k[j][hh * dh + e];
                    s[j] = dot / std::sqrt(static_cast<double>(dh));
                }
                const double mx = *std::max_element(s.begin(), s.end());
                double z = 0;
                for (auto& e : s) z += e = std::exp(e - mx);
                for (std::size_t j = 0; j <= t; ++j)
                    for (std::size_t e = 0; e < dh; ++e) ctx[hh * dh + e] += s[j] / z * v[j][hh * dh + e];
            }
            const auto attn = times(ctx, wo);
            auto mid = times(hn[t], w1);
            for (std::size_t i = 0; i < mid.size(); ++i) {
                const double u = mid[i] + b1[i];
                mid[i] = 0.5 * u * (1 + std::tanh(std::sqrt(2 / M_PI) * (u + 0.044715 * u * u * u)));
            }
            const auto mlp = times(mid, w2);
            for (std::size_t i = 0; i < d; ++i) next[t][i] += attn[i] + mlp[i] + b2[i];
        }
        x = next;
    }
    const auto gf = vec(m, "ln_f.gain"), bf = vec(m, "ln_f.bias"), hb = vec(m, "head.bias");
    const Mat head = weight(m, "head.weight");
    Mat logits(T);
    for (std::size_t t = 0; t < T; ++t) {
        logits[t] = times(norm(x[t], gf, bf), head);
        for (std::size_t i = 0; i < hb.size(); ++i) logits[t][i] += hb[i];
    }
    return logits;
}

} // namespace

TEST_CASE("config validation and parameter count", "[model]") {
    for (const char* name : {"tiny", "456M", "1.6B", "6B"}) {
        const auto c = ModelConfig::preset(name);
        CHECK_NOTHROW(c.validate());
        const std::size_t d = c.d_model, v = c.vocab_size, L = c.n_layers;
        CHECK(c.param_count() == v * d + L * (12 * d * d + 7 * d) + 2 * d + d * v + v);
    }
    const auto tiny = ModelConfig::preset("tiny");
    CHECK(LanguageModel<float>(tiny, 1).parameter_count() == tiny.param_count());
    auto tied = small_config();
    tied.tie_embeddings = true;
    CHECK(LanguageModel<float>(tied, 1).parameter_count() == tied.param_count());

    // GPT-J-6B shape lands near its published 6.05B parameters.
    CHECK(std::abs(static_cast<double>(ModelConfig::preset("6B").param_count()) - 6.05e9) < 0.05e9);

    auto bad = small_config();
    bad.n_heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small_config();
    bad.rotary_dim = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.rotary_dim = 10;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small_config();
    bad.max_seq_len = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(ModelConfig::preset("huge"), ConfigError);
}

TEST_CASE("config key/value round-trip", "[model]") {
    const auto c = small_config();
    const auto back = ModelConfig::read(KeyValueConfig::parse(c.to_string()));
    CHECK(back == c);
    const auto from_preset = ModelConfig::read(KeyValueConfig::parse("preset = tiny\nmax_seq_len = 64\n"));
    CHECK(from_preset.d_model == 128);
    CHECK(from_preset.max_seq_len == 64);
}

TEST_CASE("forward matches a straight-line reference", "[model]") {
    const LanguageModel<float> model(small_config(), 5);
    std::mt19937_64 rng(5);
    const auto ids = random_ids(rng, 9, 37);
    Tape<float> tape(false);
    const auto logits = model.forward(tape, ids, 1, ids.size());
    REQUIRE(logits.shape() == Shape{1, 9, 37});
    const auto ref = reference_forward(model, ids);
    double worst = 0;
    for (std::size_t t = 0; t < 9; ++t)
        for (std::size_t i = 0; i < 37; ++i) worst = std::max(worst, std::abs(ref[t][i] - logits.data()[t * 37 + i]));
    CHECK(worst < 1e-5);

    const std::vector<std::int32_t> one{3};
    CHECK(model.forward(tape, one, 1, 1).shape() == Shape{1, 1, 37});
}

TEST_CASE("logits are causal", "[model]") {
    const LanguageModel<float> model(small_config(), 6);
    std::mt19937_64 rng(6);
    auto ids = random_ids(rng, 16, 37);
    Tape<float> tape(false);
    const auto base = model.forward(tape, ids, 1, 16);
    for (std::size_t t = 4; t < 16; ++t) ids[t] = (ids[t] + 11) % 37;
    const auto changed = model.forward(tape, ids, 1, 16);
    for (std::size_t i = 0; i < 4 * 37; ++i) REQUIRE(base.data()[i] == changed.data()[i]);
}

TEST_CASE("permuting batch rows permutes logits", "[model]") {
    const LanguageModel<double> model(small_config(), 7);
    std::mt19937_64 rng(7);
    const auto ids = random_ids(rng, 3 * 6, 37);
    std::vector<std::int32_t> swapped(ids.begin() + 12, ids.end());
    swapped.insert(swapped.end(), ids.begin(), ids.begin() + 12);
    Tape<double> tape(false);
    const auto a = model.forward(tape, ids, 3, 6);
    const auto b = model.forward(tape, swapped, 3, 6);
    const std::size_t row = 6 * 37;
    for (std::size_t i = 0; i < row; ++i) {
        CHECK(a.data()[2 * row + i] == Catch::Approx(b.data()[i]).margin(1e-12));
        CHECK(a.data()[i] == Catch::Approx(b.data()[row + i]).margin(1e-12));
    }
}

TEST_CASE("input limits", "[model]") {
    const LanguageModel<float> model(small_config(), 8);
    Tape<float> tape(false);
    const std::vector<std::int32_t> long_ids(33, 1);
    CHECK_THROWS_AS(model.forward(tape, long_ids, 1, 33), InputError);
    const std::vector<std::int32_t> overflow{1, 37};
    CHECK_THROWS_AS(model.forward(tape, overflow, 1, 2), InputError);
    const std::vector<std::int32_t> pads(8, 36);
    CHECK_THROWS_AS(model.lm_loss(tape, pads, 2, 4, 36), InputError);
    const std::vector<std::int32_t> prompt{1, 2};
    CHECK_THROWS_AS(model.generate(prompt, 31), InputError);
    CHECK(model.generate(prompt, 0) == prompt);
}

TEST_CASE("initial loss is near ln V", "[model]") {
    const auto cfg = ModelConfig::preset("tiny");
    const LanguageModel<float> model(cfg, 11);
    std::mt19937_64 rng(11);
    const auto ids = random_ids(rng, 2 * 64, cfg.vocab_size);
    Tape<float> tape(false);
    const double loss = model.lm_loss(tape, ids, 2, 64).item();
    CHECK(std::abs(loss - std::log(2048.0)) < 0.15 * std::log(2048.0));
}

TEST_CASE("cached generation matches full re-forward", "[model]") {
    const LanguageModel<float> model(small_config(), 9);
    const std::vector<std::int32_t> prompt{4, 8, 15, 16};
    GenerateOptions cached, full;
    full.use_cache = false;
    const auto a = model.generate(prompt, 20, cached);
    CHECK(a == model.generate(prompt, 20, full));
    CHECK(a == model.generate(prompt, 20, cached));

    GenerateOptions hot;
    hot.mode = SampleMode::Temperature;
    hot.temperature = 1.5;
    hot.seed = 3;
    auto hot_full = hot;
    hot_full.use_cache = false;
    CHECK(model.generate(prompt, 20, hot) == model.generate(prompt, 20, hot_full));

    GenerateOptions stop;
    stop.stop_id = a[prompt.size()];
    CHECK(model.generate(prompt, 20, stop).size() == prompt.size() + 1);

    // Step-by-step cache logits agree with the full forward.
    Tape<float> tape(false);
    KVCache<float> cache;
    std::vector<std::int32_t> seq = a;
    const auto ref = model.forward(tape, seq, 1, seq.size());
    double worst = 0;
    for (std::size_t t = 0; t < seq.size(); ++t) {
        const auto step = model.forward(tape, std::span(seq).subspan(t, 1), 1, 1, &cache);
        for (std::size_t i = 0; i < 37; ++i) worst = std::max(worst, double(std::abs(step.data()[i] - ref.data()[t * 37 + i])));
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("continuation scores", "[model]") {
    const LanguageModel<double> model(small_config(), 10);
    const std::vector<std::int32_t> prefix{1, 2, 3};
    const std::vector<std::int32_t> cont{7, 9, 11};

    // Oracle: log-softmax of a fresh full forward at each step.
    double expected = 0;
    std::vector<std::int32_t> seq = prefix;
    for (const auto tok : cont) {
        Tape<double> tape(false);
        const auto logits = model.forward(tape, seq, 1, seq.size());
        const auto row = logits.data().subspan((seq.size() - 1) * 37, 37);
        double z = 0;
        for (const double v : row) z += std::exp(v);
        expected += row[static_cast<std::size_t>(tok)] - std::log(z);
        seq.push_back(tok);
    }
    const double score = model.score_continuation(prefix, cont);
    CHECK(score == Catch::Approx(expected).margin(1e-10));
    CHECK(score <= 0);

    const std::vector<std::vector<std::int32_t>> many{cont, {5}, {9, 9}};
    const auto batch = model.score_continuations(prefix, many);
    REQUIRE(batch.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(batch[i] == Catch::Approx(model.score_continuation(prefix, many[i])).margin(1e-10));
    const std::vector<std::int32_t> empty;
    CHECK_THROWS_AS(model.score_continuation(prefix, empty), InputError);
}
