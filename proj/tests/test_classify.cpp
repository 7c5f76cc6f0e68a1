#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <string>
#include <vector>

#include "lexforge/classify.hpp"
#include "support/temp_dir.hpp"

using namespace lexforge;
using lexforge::testing::TempDir;

namespace {

const Tokenizer& tokenizer() {
    static const Tokenizer tok = [] {
        const std::vector<std::string> corpus{"the court held that the contract was void alpha beta",
                                              "the parties agree to arbitrate any dispute True False",
                                              "notice shall be given in writing to the other party A B"};
        return train_bpe(corpus, 320);
    }();
    return tok;
}

ModelConfig micro(std::size_t vocab, std::size_t ctx = 48) {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 32;
    c.n_heads = 2;
    c.rotary_dim = 8;
    c.vocab_size = vocab;
    c.max_seq_len = ctx;
    return c;
}

std::vector<TokenId> concat(std::vector<TokenId> a, const std::vector<TokenId>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

void put(const std::filesystem::path& p, std::string_view content) {
    std::ofstream out(p, std::ios::binary);
    out << content;
}

} // namespace

TEST_CASE("format_example lays out text, tag, label and end", "[classify]") {
    const auto& tok = tokenizer();
    const auto ids = format_example(tok, {"hello", "A"}, 1000);
    auto expected = tok.encode("hello");
    expected.push_back(tok.label_id());
    expected = concat(expected, tok.encode("A"));
    expected.push_back(tok.end_id());
    CHECK(ids == expected);
    CHECK(tok.decode(ids).find("<|label|>A") != std::string::npos);
    CHECK(tok.decode(ids) == "hello<|label|>A<|endoftext|>");
}

TEST_CASE("format_example keeps the tail of long text", "[classify]") {
    const auto& tok = tokenizer();
    const std::size_t seq_len = 24;
    std::string text;
    while (tok.encode(text).size() < 10 * seq_len) text += "the court held that ";
    text += "FINAL";
    const auto label = tok.encode("beta");
    const auto ids = format_example(tok, {text, "beta"}, seq_len);
    REQUIRE(ids.size() == seq_len);
    CHECK(ids.back() == tok.end_id());
    CHECK(std::equal(label.begin(), label.end(), ids.end() - 1 - static_cast<std::ptrdiff_t>(label.size())));
    CHECK(ids[seq_len - label.size() - 2] == tok.label_id());
    const auto text_ids = tok.encode(text);
    CHECK(std::equal(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(seq_len - label.size() - 2),
                     text_ids.end() - static_cast<std::ptrdiff_t>(seq_len - label.size() - 2)));

    // Any length that still fits the label ends the same way.
    for (std::size_t n = label.size() + 2; n < 40; ++n) {
        const auto cut = format_example(tok, {text, "beta"}, n);
        CHECK(cut.size() == n);
        CHECK(cut.back() == tok.end_id());
    }
    CHECK_THROWS_AS(format_example(tok, {"x", "beta"}, label.size() + 1), InputError);
}

TEST_CASE("multiple choice converts to five binary instances", "[classify]") {
    MultipleChoiceExample ex{"the court held", {"a", "b", "c", "d", "e"}, 2};
    const auto inst = convert_multiple_choice(ex);
    REQUIRE(inst.size() == 5);
    std::vector<std::string> labels;
    for (const auto& i : inst) labels.push_back(i.label);
    CHECK(labels == std::vector<std::string>{"False", "False", "True", "False", "False"});
    CHECK(inst[3].text == "the court held d");

    const auto& tok = tokenizer();
    const LabelSet binary({"True", "False"}, tok);
    const auto prompt = tok.decode(format_prompt(tok, inst[0].text, binary, 64));
    CHECK(prompt.ends_with("a<|label|>"));

    // A long context loses its head, never the choice.
    std::string context;
    for (int i = 0; i < 60; ++i) context += "notice shall be given ";
    MultipleChoiceExample long_ex{context, {"alpha", "beta", "writing", "party", "void"}, 0};
    const auto cut = tok.decode(format_prompt(tok, convert_multiple_choice(long_ex)[0].text, binary, 20));
    CHECK(cut.ends_with(" alpha<|label|>"));

    CHECK_THROWS_AS((MultipleChoiceExample{"c", {"a", "a", "c", "d", "e"}, 0}.validate()), InputError);
    CHECK_THROWS_AS((MultipleChoiceExample{"c", {"a", "b", "c", "d", "e"}, 5}.validate()), InputError);
}

TEST_CASE("label sets reject duplicates and keep order", "[classify]") {
    const auto& tok = tokenizer();
    CHECK_THROWS_AS(LabelSet({"A", "B", "A"}, tok), InputError);
    CHECK_THROWS_AS(LabelSet({""}, tok), InputError);
    const LabelSet s({"beta", "alpha"}, tok);
    CHECK(s.index_of("alpha") == 1u);
    CHECK_FALSE(s.index_of("gamma"));
}

TEST_CASE("padded example batches", "[classify]") {
    std::vector<std::vector<TokenId>> rows{{1, 2, 3}, {4, 5}, {6, 7, 8, 9}};
    ExampleBatches a(rows, 2, 99, 5), b(rows, 2, 99, 5);
    std::multiset<std::vector<TokenId>> epoch;
    for (int i = 0; i < 3; ++i) {
        const auto x = a.next();
        CHECK(x.ids == b.next().ids);
        CHECK(x.batch == 2);
        for (std::size_t r = 0; r < 2; ++r) {
            std::vector<TokenId> row(x.ids.begin() + r * x.seq, x.ids.begin() + (r + 1) * x.seq);
            while (row.back() == 99) row.pop_back();
            epoch.insert(row);
        }
    }
    // Six rows drawn over two epochs: each example exactly twice.
    for (const auto& r : rows) CHECK(epoch.count(r) == 2);
    b.seek(2);
    a.seek(2);
    CHECK(a.next().ids == b.next().ids);
}

TEST_CASE("predictions are total and per-label independent", "[classify]") {
    const auto& tok = tokenizer();
    LanguageModel<float> model(micro(tok.vocab_size()), 3);

    const LabelSet single({"alpha"}, tok);
    for (const char* text : {"x", "the court held", "beta beta beta"}) CHECK(predict_label(model, tok, text, single).label == "alpha");
    CHECK_THROWS_AS(predict_label(model, tok, "x", LabelSet({}, tok)), InputError);

    const LabelSet fwd({"A", "beta", "void"}, tok), rev({"void", "beta", "A"}, tok);
    const auto p = predict_label(model, tok, "the contract", fwd);
    const auto q = predict_label(model, tok, "the contract", rev);
    for (std::size_t i = 0; i < 3; ++i) CHECK(p.scores[i] == q.scores[2 - i]);
    CHECK(p.label == q.label);

    // Length normalization divides by the label's token count.
    const auto raw = predict_label(model, tok, "the contract", fwd, ScoringOptions{false});
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(p.scores[i] == Catch::Approx(raw.scores[i] / static_cast<double>(fwd.token_ids()[i].size())).epsilon(1e-12));

    MultipleChoiceExample ex{"the court held", {"alpha", "beta", "void", "party", "notice"}, 1};
    const auto c = predict_choice(model, tok, ex);
    CHECK(c.index < 5);
    for (const double pr : c.probabilities) CHECK((pr > 0 && pr < 1));
    auto edited = ex;
    edited.choices[3] = "writing";
    const auto c2 = predict_choice(model, tok, edited);
    for (std::size_t i : {0, 1, 2, 4}) CHECK(c2.probabilities[i] == c.probabilities[i]);
}

TEST_CASE("fine-tuning overfits one example without changing the architecture", "[classify][finetune]") {
    const auto& tok = tokenizer();
    LanguageModel<float> model(micro(tok.vocab_size()), 11);
    const auto before = model.manifest();
    const std::size_t count = model.parameter_count();
    TrainConfig cfg;
    cfg.total_steps = 300;
    cfg.warmup_steps = 10;
    cfg.batch_size = 1;
    cfg.seq_len = 48;
    cfg.lr_max = 3e-3;
    cfg.lr_min = 3e-4;
    std::vector<double> losses;
    TrainSinks sinks;
    sinks.on_record = [&](const LossRecord& r) { losses.push_back(r.loss); };
    const auto ckpt = finetune_classifier(model, tok, {{"the parties agree to arbitrate", "beta"}}, cfg, sinks);
    CHECK(losses.back() < 0.05);
    CHECK(model.manifest() == before);
    CHECK(model.parameter_count() == count);
    CHECK(checkpoint_progress(ckpt).tokenizer_fingerprint == tok.fingerprint());

    // Sequence loss oracle: recompute teacher-forced loss over the formatted row.
    const auto ids = format_example(tok, {"the parties agree to arbitrate", "beta"}, 48);
    const double lp = model.score_continuation(std::span(ids).first(1), std::span(ids).subspan(1));
    CHECK(-lp / static_cast<double>(ids.size() - 1) < 0.05);

    const LabelSet labels({"alpha", "beta"}, tok);
    CHECK(predict_label(model, tok, "the parties agree to arbitrate", labels).label == "beta");

    cfg.seq_len = 64;
    CHECK_THROWS_AS(finetune_classifier(model, tok, {{"x", "A"}}, cfg), ConfigError);
    cfg.seq_len = 48;
    CHECK_THROWS_AS(finetune_classifier(model, tok, {}, cfg), InputError);
}

TEST_CASE("pad positions are excluded from the fine-tuning loss", "[classify][finetune]") {
    const auto& tok = tokenizer();
    LanguageModel<double> model(micro(tok.vocab_size()), 2);
    const auto short_row = format_example(tok, {"alpha", "A"}, 48);
    auto padded = short_row;
    padded.resize(short_row.size() + 6, tok.pad_id());
    Tape<double> t1, t2;
    const double unpadded = model.lm_loss(t1, short_row, 1, short_row.size(), tok.pad_id()).item();
    const double with_pad = model.lm_loss(t2, padded, 1, padded.size(), tok.pad_id()).item();
    CHECK(with_pad == Catch::Approx(unpadded).epsilon(1e-12));
}

TEST_CASE("dataset files", "[classify][io]") {
    TempDir dir;
    const auto p = dir.path() / "train.jsonl";
    put(p, "{\"text\": \"a b\", \"label\": \"A\"}\n\n{\"text\": \"c\", \"label\": \"B\"}\n");
    const auto ex = read_labeled_jsonl(p);
    REQUIRE(ex.size() == 2);
    CHECK(ex[1].label == "B");
    CHECK(labels_in_order(ex) == std::vector<std::string>{"A", "B"});

    const std::vector<std::string> only_a{"A"};
    CHECK_THROWS_WITH(read_labeled_jsonl(p, &only_a), Catch::Matchers::ContainsSubstring("train.jsonl:3"));
    put(p, "{\"text\": \"a\"}\n");
    CHECK_THROWS_WITH(read_labeled_jsonl(p), Catch::Matchers::ContainsSubstring("label"));
    put(p, "not json\n");
    CHECK_THROWS_WITH(read_labeled_jsonl(p), Catch::Matchers::ContainsSubstring("train.jsonl:1"));

    const auto m = dir.path() / "labels.txt";
    put(m, write_label_manifest({"B", "A"}));
    CHECK(read_label_manifest(m) == std::vector<std::string>{"B", "A"});

    const auto mc = dir.path() / "mc.jsonl";
    put(mc, "{\"context\": \"c\", \"choices\": [\"a\",\"b\",\"c\",\"d\",\"e\"], \"answer\": 4}\n");
    const auto choices = read_choice_jsonl(mc);
    REQUIRE(choices.size() == 1);
    CHECK(choices[0].answer == 4);
    put(mc, "{\"context\": \"c\", \"choices\": [\"a\",\"b\"], \"answer\": 0}\n");
    CHECK_THROWS_AS(read_choice_jsonl(mc), InputError);
    put(mc, "{\"context\": \"c\", \"choices\": [\"a\",\"b\",\"c\",\"d\",\"e\"], \"answer\": 7}\n");
    CHECK_THROWS_AS(read_choice_jsonl(mc), InputError);

    const auto& tok = tokenizer();
    const LabelSet labels({"alpha", "beta"}, tok);
    LabelPrediction pred{1, "beta", {-2.5, -0.5}};
    const auto line = nlohmann::json::parse(prediction_json(pred, labels));
    CHECK(line["predicted"] == "beta");
    CHECK(line["scores"]["alpha"] == -2.5);
    ChoicePrediction cp{3, {0.1, 0.2, 0.3, 0.9, 0.4}};
    CHECK(nlohmann::json::parse(prediction_json(cp))["predicted"] == 3);
}
