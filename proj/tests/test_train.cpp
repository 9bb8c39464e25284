#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "sheetcoder/train.hpp"
#include "support/toy_model.hpp"

using namespace sheetcoder;
using namespace sheetcoder::testing;
namespace fs = std::filesystem;

namespace {

std::vector<PreparedExample> prepare(const Model& m, const std::vector<ExampleRecord>& recs) {
    std::vector<PreparedExample> out;
    for (const auto& r : recs) out.push_back(prepare_example(m, r.window, r.gold));
    return out;
}

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "sheetcoder_test_train" / name;
    fs::remove_all(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("minibatches walk seeded epoch permutations") {
    std::set<size_t> epoch;
    for (int64_t step = 0; step < 5; ++step)
        for (size_t i : batch_indices(10, 2, 4, step)) epoch.insert(i);
    CHECK(epoch.size() == 10);
    CHECK(batch_indices(10, 3, 4, 7) == batch_indices(10, 3, 4, 7));
    CHECK(batch_indices(10, 10, 4, 0) != batch_indices(10, 10, 4, 1));
    CHECK(batch_indices(10, 10, 4, 0) != batch_indices(10, 10, 5, 0));
    CHECK_THROWS_AS(batch_indices(0, 2, 1, 0), std::invalid_argument);
}

TEST_CASE("overfitting one example recovers its formula") {
    auto recs = tiny_records();
    auto vocabs = build_vocab(recs, 1, 2);
    Model m(tiny_config(), vocabs);
    auto ex = prepare(m, {recs[0]});
    TrainOptions opt;
    opt.steps = 150;
    opt.batch_size = 1;
    opt.learning_rate = 1e-2;
    opt.eval_every = 50;
    auto res = train_model(m, ex, ex, opt);
    REQUIRE_FALSE(res.diverged);
    auto beam = m.beam_decode(ex[0].bundles, 4);
    REQUIRE_FALSE(beam.predictions.empty());
    CHECK(beam.predictions[0].ir == recs[0].gold);
    CHECK(res.log.back().valid_top1 == 1.0);
}

TEST_CASE("loss falls from the uniform baseline over the first 100 steps") {
    auto recs = tiny_records();
    auto vocabs = build_vocab(recs, 1, 2);
    auto cfg = tiny_config();
    cfg.dropout = 0.1;
    Model m(cfg, vocabs);
    auto ex = prepare(m, recs);
    auto before = evaluate_examples(m, ex, 100).first;
    TrainOptions opt;
    opt.steps = 100;
    opt.batch_size = 2;
    opt.eval_every = 100;
    auto res = train_model(m, ex, ex, opt);
    CHECK(res.log.back().valid_loss < 0.75 * before);
}

TEST_CASE("same seed, same metrics log; resume replays the trajectory") {
    auto recs = tiny_records();
    auto vocabs = build_vocab(recs, 1, 2);
    auto cfg = tiny_config();
    cfg.dropout = 0.1;
    TrainOptions opt;
    opt.steps = 20;
    opt.batch_size = 2;
    opt.eval_every = 10;
    opt.seed = 7;

    auto run = [&](const fs::path& dir) {
        Model m(cfg, vocabs);
        auto ex = prepare(m, recs);
        auto o = opt;
        o.out_dir = dir;
        train_model(m, ex, ex, o);
        return m;
    };
    auto a = run(fresh_dir("a"));
    auto b = run(fresh_dir("b"));
    CHECK(slurp(fresh_dir("a").parent_path() / "a" / "metrics.jsonl") ==
          slurp(fresh_dir("b").parent_path() / "b" / "metrics.jsonl"));
    for (const auto& [name, p] : a.params().all()) CHECK(b.params().get(name) == p.value);

    // stop at step 10, then resume from the checkpoint written there
    auto dir = fresh_dir("resume");
    {
        Model m(cfg, vocabs);
        auto ex = prepare(m, recs);
        auto o = opt;
        o.steps = 10;
        o.out_dir = dir;
        train_model(m, ex, ex, o);
    }
    Model resumed = Model::load(dir / "last.ckpt");
    CHECK(resumed.params().step() == 10);
    auto ex = prepare(resumed, recs);
    train_model(resumed, ex, ex, opt);
    CHECK(resumed.params().step() == 20);
    for (const auto& [name, p] : a.params().all()) CHECK(resumed.params().get(name) == p.value);
    CHECK(fs::exists(dir / "best.ckpt"));
}

TEST_CASE("a non-finite loss stops training and keeps the last checkpoint") {
    auto recs = tiny_records();
    auto vocabs = build_vocab(recs, 1, 2);
    Model m(tiny_config(), vocabs);
    auto ex = prepare(m, recs);
    auto dir = fresh_dir("nan");
    TrainOptions opt;
    opt.steps = 4;
    opt.batch_size = 1;
    opt.eval_every = 2;
    opt.out_dir = dir;
    train_model(m, ex, ex, opt);
    REQUIRE(fs::exists(dir / "last.ckpt"));
    auto saved = Model::load(dir / "last.ckpt");
    m.params().get("dec.sketch.b")[0] = std::numeric_limits<double>::quiet_NaN();
    opt.steps = 8;
    auto res = train_model(m, ex, ex, opt);
    CHECK(res.diverged);
    CHECK(res.final_step == 4);
    auto still = Model::load(dir / "last.ckpt");
    CHECK(still.params().step() == saved.params().step());
}
