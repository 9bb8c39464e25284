#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sheetcoder/checkpoint.hpp"
#include "sheetcoder/model.hpp"
#include "support/gradcheck.hpp"
#include "support/toy_model.hpp"

using namespace sheetcoder;
using namespace sheetcoder::testing;

namespace {

struct Fixture {
    std::vector<ExampleRecord> records = tiny_records();
    VocabSet vocabs = build_vocab(records, 1, 2);
};

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "sheetcoder_test_model";
    std::filesystem::create_directories(dir);
    return dir / name;
}

void check_stream_discipline(const Prediction& p) {
    bool after = false;
    for (const auto& t : p.tokens) {
        bool range_token = t == kRangeBegin || t == kRangeSep || t == kRangeEnd || t == kEof ||
                           parse_row_token(t) || parse_col_token(t);
        if (after) CHECK(range_token);
        else CHECK_FALSE(range_token);
        if (t == kEndSketch) after = true;
    }
    CHECK(after);
    CHECK(p.ir.tokens() == p.tokens);
    CHECK_NOTHROW(p.ir.validate());
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());
    c.rows_per_bundle = 2;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.seq_len = 129;  // 129 * 4 > 512
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("max_positions"), std::invalid_argument);
    c = ModelConfig{};
    c.hidden = 10;
    c.heads = 4;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.use_rows = c.use_cols = false;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);

    auto t = tiny_config();
    auto j = t.to_json();
    CHECK(ModelConfig::from_json(j).to_json() == j);
    j["bogus"] = 1;
    CHECK_THROWS_WITH_AS(ModelConfig::from_json(j), doctest::Contains("bogus"), std::invalid_argument);
}

TEST_CASE("full-scale shape: the data bank covers every valid window token") {
    Fixture f;
    auto cfg = tiny_config();
    Model m(cfg, f.vocabs);
    for (const auto& r : f.records) {
        auto b = m.bundles_for(r.window);
        ad::Tape tape(false);
        auto st = m.encode(tape, b, nullptr);
        size_t header = 0, data = 0;
        for (auto v : b.header_row.mask) header += v;
        for (const auto& row : b.rows)
            for (auto v : row.mask) data += v;
        for (const auto& col : b.cols)
            for (auto v : col.mask) data += v;
        CHECK(st.header_tokens == header);
        CHECK(st.data_tokens == data);
        REQUIRE(st.data_bank);
        CHECK(st.data_bank->rows() == data);
        CHECK(st.data_bank->cols() == static_cast<size_t>(cfg.token_dim()));
        CHECK(st.data_bank->value().all_finite());
    }
}

TEST_CASE("an empty context yields finite outputs and grammatical predictions") {
    Fixture f;
    Model m(tiny_config(), f.vocabs);
    Sheet empty("blank", 0);
    empty.extend_bounds(5, 5);
    auto b = m.bundles_for(extract_window(empty, {3, 3}, 2));
    ad::Tape tape(false);
    auto st = m.encode(tape, b, nullptr);
    CHECK_FALSE(st.header_bank);
    CHECK_FALSE(st.data_bank);
    ad::Tape t2(false);
    auto loss = m.example_loss(t2, b, m.gold_ids(f.records[0].gold), nullptr);
    CHECK(std::isfinite(loss.value().item()));
    auto res = m.beam_decode(b, 4);
    REQUIRE_FALSE(res.predictions.empty());
    for (const auto& p : res.predictions) check_stream_discipline(p);
}

TEST_CASE("SUM example splits into 3 sketch steps and 8 range steps") {
    Fixture f;
    auto ir = ir_from_text("SUM RANGE $ENDSKETCH$ $R$ R[-2] C[0] $SEP$ R[-1] C[0] $ENDR$ EOF");
    Model m(tiny_config(), f.vocabs);
    auto g = m.gold_ids(ir);
    CHECK(g.sketch.size() == 3);
    CHECK(g.range.size() == 8);
    auto bad = ir_from_text("LEN RANGE $ENDSKETCH$ $R$ R[-2] C[0] $ENDR$ EOF");
    CHECK_THROWS_WITH_AS(m.gold_ids(bad), doctest::Contains("'LEN'"), DataError);
}

TEST_CASE("untrained loss is close to the uniform-softmax expectation") {
    Fixture f;
    auto cfg = tiny_config();
    Model m(cfg, f.vocabs);
    double vs = static_cast<double>(f.vocabs.sketch.size());
    double vr = static_cast<double>(f.vocabs.range.size());
    for (const auto& r : f.records) {
        auto g = m.gold_ids(r.gold);
        double ns = static_cast<double>(g.sketch.size()), nr = static_cast<double>(g.range.size());
        double expect = (ns * std::log(vs) + nr * std::log(vr)) / (ns + nr);
        ad::Tape tape(false);
        double loss = m.example_loss(tape, m.bundles_for(r.window), g, nullptr).value().item();
        CHECK(std::abs(loss - expect) <= 0.2 * expect);
    }
}

TEST_CASE("encoding is deterministic for a fixed seed") {
    Fixture f;
    Model a(tiny_config(), f.vocabs), b(tiny_config(), f.vocabs);
    const auto& r = f.records[0];
    ad::Tape ta(false), tb(false);
    auto la = a.example_loss(ta, a.bundles_for(r.window), a.gold_ids(r.gold), nullptr);
    auto lb = b.example_loss(tb, b.bundles_for(r.window), b.gold_ids(r.gold), nullptr);
    CHECK(la.value() == lb.value());
    auto cfg = tiny_config();
    cfg.seed = 4;
    Model c(cfg, f.vocabs);
    ad::Tape tc(false);
    auto lc = c.example_loss(tc, c.bundles_for(r.window), c.gold_ids(r.gold), nullptr);
    CHECK(la.value().item() != lc.value().item());
}

TEST_CASE("full model gradients agree with central differences") {
    Fixture f;
    const auto& r = f.records[0];
    for (int mode = 0; mode < 3; ++mode) {
        auto cfg = tiny_config();
        cfg.hidden = 4;
        cfg.seq_len = 4;
        if (mode == 1) cfg.two_stage = false;
        if (mode == 2) cfg.use_context = false;
        Model m(cfg, f.vocabs);
        auto b = m.bundles_for(r.window);
        auto g = m.gold_ids(r.gold);
        auto res = grad_check(m.params(), [&](ad::Tape& t) { return m.example_loss(t, b, g, nullptr); });
        INFO("mode " << mode << " worst " << res.worst_param << "[" << res.worst_index << "] " << res.analytic << " vs "
                     << res.numeric);
        CHECK(res.max_rel_error <= 1e-3);
    }
}

TEST_CASE("beam of one equals greedy decoding and outputs are well formed") {
    Fixture f;
    for (uint64_t seed = 1; seed <= 6; ++seed) {
        auto cfg = tiny_config();
        cfg.seed = seed;
        Model m(cfg, f.vocabs);
        for (const auto& r : f.records) {
            auto b = m.bundles_for(r.window);
            auto greedy = m.greedy_decode(b);
            auto beam1 = m.beam_decode(b, 1);
            REQUIRE(greedy.predictions.size() == 1);
            REQUIRE(beam1.predictions.size() == 1);
            CHECK(greedy.predictions[0].tokens == beam1.predictions[0].tokens);
            CHECK(greedy.predictions[0].log_prob == beam1.predictions[0].log_prob);

            auto beam = m.beam_decode(b, 5);
            CHECK(beam.predictions.size() <= 5);
            for (size_t i = 0; i < beam.predictions.size(); ++i) {
                check_stream_discipline(beam.predictions[i]);
                if (i) CHECK_FALSE(prediction_before(beam.predictions[i], beam.predictions[i - 1]));
            }
        }
    }
}

TEST_CASE("top-1 log-prob never drops when the beam widens by one") {
    Fixture f;
    for (uint64_t seed = 1; seed <= 4; ++seed) {
        auto cfg = tiny_config();
        cfg.seed = seed;
        Model m(cfg, f.vocabs);
        for (const auto& r : f.records) {
            auto b = m.bundles_for(r.window);
            double prev = -std::numeric_limits<double>::infinity();
            for (int width = 1; width <= 10; ++width) {
                auto res = m.beam_decode(b, width);
                REQUIRE_FALSE(res.predictions.empty());
                CHECK(res.predictions.front().log_prob >= prev);
                prev = res.predictions.front().log_prob;
            }
        }
    }
}

TEST_CASE("ablation modes build and decode") {
    Fixture f;
    const auto& r = f.records[2];
    for (int mode = 0; mode < 5; ++mode) {
        auto cfg = tiny_config();
        if (mode == 0) cfg.use_cols = false;
        if (mode == 1) cfg.use_rows = false;
        if (mode == 2) cfg.shared_encoder = true;
        if (mode == 3) cfg.two_stage = false;
        if (mode == 4) cfg.use_context = false;
        Model m(cfg, f.vocabs);
        CHECK(m.params().contains("row_enc.tok") == (cfg.use_context && cfg.use_rows && !cfg.shared_encoder));
        CHECK(m.params().contains("col_enc.tok") == (cfg.use_context && cfg.use_cols && !cfg.shared_encoder));
        CHECK(m.params().contains("dec.joint.w") == !cfg.two_stage);
        auto res = m.beam_decode(m.bundles_for(r.window), 3);
        REQUIRE_FALSE(res.predictions.empty());
        for (const auto& p : res.predictions) check_stream_discipline(p);
    }
}

TEST_CASE("checkpoints round-trip and reject mismatched configs") {
    Fixture f;
    Model m(tiny_config(), f.vocabs);
    m.params().get("dec.lstm.b")[0] = 0.25;
    auto path = temp_path("model.ckpt");
    m.save(path, true);
    Model back = Model::load(path);
    for (const auto& [name, p] : m.params().all()) CHECK(back.params().get(name) == p.value);
    CHECK(back.vocabs() == m.vocabs());
    auto b = m.bundles_for(f.records[0].window);
    auto p1 = m.beam_decode(b, 4).predictions;
    auto p2 = back.beam_decode(b, 4).predictions;
    REQUIRE(p1.size() == p2.size());
    for (size_t i = 0; i < p1.size(); ++i) {
        CHECK(p1[i].tokens == p2[i].tokens);
        CHECK(p1[i].log_prob == p2[i].log_prob);
    }

    auto other = tiny_config();
    other.hidden = 6;
    Model wrong(other, f.vocabs);
    auto bad = temp_path("bad.ckpt");
    write_checkpoint(bad, m.checkpoint_meta(), wrong.params(), false);
    CHECK_THROWS_WITH_AS(Model::load(bad), doctest::Contains("mismatch"), CheckpointError);

    {
        std::ofstream os(temp_path("junk.ckpt"), std::ios::binary);
        os << "not a checkpoint";
    }
    CHECK_THROWS_AS(Model::load(temp_path("junk.ckpt")), CheckpointError);
}

TEST_CASE("bundles from a different radius are rejected") {
    Fixture f;
    Model m(tiny_config(), f.vocabs);
    Sheet s("x", 1);
    s.extend_bounds(4, 4);
    CHECK_THROWS_AS(m.bundles_for(extract_window(s, {2, 2}, 3)), DataError);
}
