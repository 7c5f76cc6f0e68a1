#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <fstream>
#include <random>
#include <sstream>
#include <vector>

#include "lexforge/trainer.hpp"
#include "support/temp_dir.hpp"

using namespace lexforge;

namespace {

TrainConfig schedule(double hi, double lo) {
    TrainConfig c;
    c.lr_max = hi;
    c.lr_min = lo;
    return c;
}

ModelConfig micro_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 2;
    c.rotary_dim = 4;
    c.vocab_size = 29;
    c.max_seq_len = 16;
    return c;
}

Batch random_batch(std::mt19937_64& rng, std::size_t b, std::size_t t, std::size_t vocab) {
    Batch out;
    out.batch = b;
    out.seq = t;
    for (std::size_t i = 0; i < b * t; ++i) out.ids.push_back(static_cast<std::int32_t>(rng() % vocab));
    return out;
}

std::string bytes_of(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("defaults reproduce the published regime", "[trainer]") {
    const TrainConfig c;
    CHECK(c.total_steps == 350000);
    CHECK(c.batch_size == 8);
    CHECK(c.seq_len == 2048);
    CHECK(c.lr_max == 0.6e-4);
    CHECK(c.lr_min == 0.6e-5);
    CHECK(c.total_steps * c.batch_size * c.seq_len == 5734400000ULL);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config validation", "[trainer]") {
    auto c = schedule(1e-4, 2e-4);
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.warmup_steps = c.total_steps;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    TrainConfig t;
    t.total_steps = 77;
    t.lr_max = 3e-3;
    t.warmup_steps = 5;
    KeyValueConfig kv;
    t.write(kv);
    CHECK(TrainConfig::read(KeyValueConfig::parse(kv.to_string())) == t);
}

TEST_CASE("learning-rate schedule", "[trainer]") {
    for (const auto& c : {schedule(1.2e-4, 1.2e-5), schedule(0.6e-4, 0.6e-5)}) {
        CHECK(lr_at(c, c.warmup_steps) == c.lr_max);
        CHECK(lr_at(c, c.total_steps) == c.lr_min);
        CHECK(lr_at(c, 0) == 0.0);
        CHECK(lr_at(c, c.warmup_steps / 2) == Catch::Approx(c.lr_max / 2).epsilon(1e-15));
        const auto mid = c.warmup_steps + (c.total_steps - c.warmup_steps) / 2;
        CHECK(std::abs(lr_at(c, mid) - (c.lr_max + c.lr_min) / 2) <= 1e-12);
        // Non-increasing after warmup, and no jump larger than the cosine's
        // Lipschitz bound pi/2 * (lr_max - lr_min) / decay_steps per step.
        const double lipschitz = std::numbers::pi / 2 * (c.lr_max - c.lr_min) / static_cast<double>(c.total_steps - c.warmup_steps);
        double prev = lr_at(c, c.warmup_steps);
        for (std::uint64_t s = c.warmup_steps + 1; s <= c.total_steps; s += 997) {
            const double lr = lr_at(c, s);
            CHECK(lr <= prev);
            CHECK(prev - lr <= lipschitz * 997 * (1 + 1e-9));
            prev = lr;
        }
        CHECK(c.lr_max - lr_at(c, c.warmup_steps - 1) <= c.lr_max / static_cast<double>(c.warmup_steps) * (1 + 1e-12));
        CHECK(lr_at(c, c.total_steps - 1) - c.lr_min <= lipschitz);
        CHECK_THROWS_AS(lr_at(c, c.total_steps + 1), InputError);
    }
}

TEST_CASE("Adam matches a hand-stepped oracle", "[trainer]") {
    TrainConfig c;
    c.weight_decay = 0.01;
    std::vector<NamedTensor<double>> params;
    params.push_back({"a", Tensor<double>({1}, {0.5}, true)});
    params.push_back({"b", Tensor<double>({1}, {-1.5}, true)});
    auto state = AdamState<double>::for_parameters(params);

    // Oracle: loss = a^2 * b + 3 b, stepped with the textbook formulas.
    double a = 0.5, b = -1.5, ma = 0, va = 0, mb = 0, vb = 0;
    for (int t = 1; t <= 10; ++t) {
        const double lr = 1e-2 * t;
        const double ga = 2 * a * b, gb = a * a + 3;
        params[0].tensor.zero_grad();
        params[1].tensor.zero_grad();
        params[0].tensor.mutable_grad()[0] = 2 * params[0].tensor.data()[0] * params[1].tensor.data()[0];
        params[1].tensor.mutable_grad()[0] = params[0].tensor.data()[0] * params[0].tensor.data()[0] + 3;
        adam_update(params, state, c, lr);

        ma = 0.9 * ma + 0.1 * ga;
        va = 0.999 * va + 0.001 * ga * ga;
        mb = 0.9 * mb + 0.1 * gb;
        vb = 0.999 * vb + 0.001 * gb * gb;
        const double c1 = 1 - std::pow(0.9, t), c2 = 1 - std::pow(0.999, t);
        a -= lr * ((ma / c1) / (std::sqrt(va / c2) + 1e-8) + 0.01 * a);
        b -= lr * ((mb / c1) / (std::sqrt(vb / c2) + 1e-8) + 0.01 * b);
        CHECK(std::abs(params[0].tensor.data()[0] - a) < 1e-12);
        CHECK(std::abs(params[1].tensor.data()[0] - b) < 1e-12);
    }
    CHECK(state.step == 10);
}

TEST_CASE("Adam drives a quadratic to its minimum", "[trainer]") {
    TrainConfig c;
    std::vector<NamedTensor<double>> params;
    params.push_back({"w", Tensor<double>({1}, {1.0}, true)});
    auto state = AdamState<double>::for_parameters(params);
    for (int t = 0; t < 2000; ++t) {
        params[0].tensor.zero_grad();
        params[0].tensor.mutable_grad()[0] = 2 * params[0].tensor.data()[0];
        adam_update(params, state, c, 1e-2);
    }
    CHECK(std::abs(params[0].tensor.data()[0]) < 1e-3);
}

TEST_CASE("zero gradients leave parameters unchanged", "[trainer]") {
    TrainConfig c;
    std::vector<NamedTensor<float>> params;
    params.push_back({"w", Tensor<float>({3}, {1.0f, -2.0f, 3.0f}, true)});
    params[0].tensor.zero_grad();
    auto state = AdamState<float>::for_parameters(params);
    adam_update(params, state, c, 0.1);
    CHECK(std::vector<float>(params[0].tensor.data().begin(), params[0].tensor.data().end()) == std::vector<float>{1.0f, -2.0f, 3.0f});
}

TEST_CASE("global-norm clipping", "[trainer]") {
    std::vector<NamedTensor<double>> params;
    params.push_back({"a", Tensor<double>({2}, {0, 0}, true)});
    params.push_back({"b", Tensor<double>({1}, {0}, true)});
    auto ga = params[0].tensor.mutable_grad();
    ga[0] = 6;
    ga[1] = 0;
    params[1].tensor.mutable_grad()[0] = 8; // norm 10
    CHECK(clip_grad_norm(params, 1.0) == Catch::Approx(10.0));
    CHECK(params[0].tensor.grad()[0] == Catch::Approx(0.6));
    CHECK(params[1].tensor.grad()[0] == Catch::Approx(0.8));
    CHECK(clip_grad_norm(params, 5.0) == Catch::Approx(1.0));
    CHECK(params[1].tensor.grad()[0] == Catch::Approx(0.8));
}

TEST_CASE("checkpoint container", "[trainer][checkpoint]") {
    lexforge::testing::TempDir dir;
    LanguageModel<float> model(micro_config(), 3);
    auto state = AdamState<float>::for_parameters(model.parameters());
    TrainConfig cfg;
    cfg.total_steps = 10;
    cfg.warmup_steps = 2;
    TrainProgress progress{4, 32, 2.5, 1234, 0xfeedULL};
    const auto ckpt = make_checkpoint(model, state, cfg, progress);

    const auto p1 = dir.path() / "a.ckpt", p2 = dir.path() / "b.ckpt";
    save_checkpoint(ckpt, p1);
    const auto loaded = load_checkpoint(p1, 0xfeedULL);
    save_checkpoint(loaded, p2);
    CHECK(bytes_of(p1) == bytes_of(p2));
    CHECK(checkpoint_model_config(loaded) == micro_config());
    CHECK(checkpoint_train_config(loaded) == cfg);
    const auto back = checkpoint_progress(loaded);
    CHECK(back.step == 4);
    CHECK(back.cursor == 32);
    CHECK(back.ema_loss == 2.5);
    CHECK(back.tokenizer_fingerprint == 0xfeedULL);

    LanguageModel<float> other(micro_config(), 99);
    restore_parameters(loaded, other);
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
        const auto a = model.parameters()[i].tensor.data(), b = other.parameters()[i].tensor.data();
        REQUIRE(std::equal(a.begin(), a.end(), b.begin()));
    }

    CHECK_THROWS_AS(load_checkpoint(p1, 0xbeefULL), InputError);

    auto bytes = bytes_of(p1);
    {
        std::ofstream out(dir.path() / "trunc.ckpt", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 100));
    }
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "trunc.ckpt"), IntegrityError);

    bytes[4] = 9; // version field
    {
        std::ofstream out(dir.path() / "v9.ckpt", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    try {
        load_checkpoint(dir.path() / "v9.ckpt");
        FAIL("expected a version error");
    } catch (const VersionError& e) {
        CHECK(e.found() == 9);
    }

    auto wider = micro_config();
    wider.d_model = 32;
    LanguageModel<float> mismatched(wider, 1);
    CHECK_THROWS_WITH(restore_parameters(loaded, mismatched), Catch::Matchers::ContainsSubstring("wte"));
    CHECK_THROWS_AS(restore_parameters(loaded, mismatched), ShapeError);
}

TEST_CASE("resume reproduces the uninterrupted loss sequence", "[trainer][checkpoint]") {
    std::mt19937_64 rng(5);
    std::vector<Batch> batches;
    for (int i = 0; i < 3; ++i) batches.push_back(random_batch(rng, 2, 9, 29));
    TrainConfig cfg;
    cfg.total_steps = 30;
    cfg.warmup_steps = 3;
    cfg.lr_max = 1e-2;
    cfg.lr_min = 1e-3;
    cfg.checkpoint_every = 12;

    std::vector<double> full;
    std::optional<Checkpoint> mid;
    {
        LanguageModel<float> model(micro_config(), 8);
        auto state = AdamState<float>::for_parameters(model.parameters());
        RepeatBatches data(batches);
        TrainSinks sinks;
        sinks.on_record = [&](const LossRecord& r) { full.push_back(r.loss); };
        sinks.on_checkpoint = [&](const Checkpoint& c) {
            if (!mid) mid = c;
        };
        train_loop(model, state, data, cfg, sinks);
    }
    REQUIRE(mid);
    REQUIRE(full.size() == 30);

    const auto reloaded = Checkpoint::deserialize(mid->serialize());
    LanguageModel<float> model(checkpoint_model_config(reloaded), 1234);
    restore_parameters(reloaded, model);
    auto state = restore_optimizer(reloaded, model);
    RepeatBatches data(batches);
    std::vector<double> resumed;
    std::ostringstream log;
    TrainSinks sinks;
    sinks.loss_log = &log;
    sinks.on_record = [&](const LossRecord& r) { resumed.push_back(r.loss); };
    train_loop(model, state, data, checkpoint_train_config(reloaded), sinks, checkpoint_progress(reloaded));
    REQUIRE(resumed.size() == 18);
    for (std::size_t i = 0; i < 18; ++i) {
        INFO("resumed step " << 13 + i);
        CHECK(resumed[i] == full[12 + i]);
    }
    CHECK(log.str().rfind("13,", 0) == 0);
}

TEST_CASE("loss records", "[trainer]") {
    CHECK(std::string(kLossLogHeader) == "step,loss,ema_loss,lr,tokens_seen");
    CHECK(format_loss_record({3, 1.5, 2.25, 0.25, 96}) == "3,1.5,2.25,0.25,96");
    // Shortest round-trip formatting keeps logged values exact.
    const double lr = lr_at(schedule(1.2e-4, 1.2e-5), 123457);
    const auto row = format_loss_record({1, 0.1, 0.1, lr, 1});
    const auto begin = row.find(',', row.find(',', 2) + 1) + 1;
    const auto field = row.substr(begin, row.rfind(',') - begin);
    CHECK(std::stod(field) == lr);
}

TEST_CASE("non-finite loss aborts with the step number", "[trainer]") {
    LanguageModel<float> model(micro_config(), 4);
    model.parameters()[0].tensor.mutable_data()[5 * 16] = std::numeric_limits<float>::infinity(); // row of id 5
    auto state = AdamState<float>::for_parameters(model.parameters());
    TrainConfig cfg;
    cfg.total_steps = 10;
    cfg.warmup_steps = 1;
    const std::vector<std::int32_t> ids{5, 1, 2, 3};
    CHECK_THROWS_WITH(train_step(model, state, ids, 1, 4, cfg, 7), Catch::Matchers::ContainsSubstring("step 7"));
}
