#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "sheetcoder/dataset.hpp"
#include "support/toy_corpus.hpp"

using namespace sheetcoder;
using namespace sheetcoder::testing;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "sheetcoder_test_dataset" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// One formula for each filter reason plus eligible ones, with the expected
// bucket of every cell tracked independently of the miner.
Sheet trigger_sheet(std::map<std::string, int64_t>& expect) {
    Sheet s("Triggers", 1);
    s.set({1, 1}, CellValue::text("Header"));
    for (int r = 2; r <= 30; ++r) s.set({r, 1}, CellValue::number(std::to_string(r)));
    auto put = [&](int row, int col, const std::string& src, const std::string& bucket) {
        s.set({row, col}, CellValue::formula(src, "0"));
        ++expect[bucket];
    };
    put(5, 3, "=HYPERLINK(\"http://example.com\")", "hyperlink_literal_url");
    put(6, 3, "=Other!A1+1", "cross_sheet_ref");
    put(7, 3, "=SUM(A1:A30)", "out_of_window");
    put(8, 3, "=$A$2+1", "absolute_ref");
    put(9, 3, "=VLOOKUP(A2,A3,1)", "unsupported_token");
    put(10, 3, "=SUM(A2:", std::string(kParseErrorReason));
    put(11, 3, "=SUM(A2:A10)", "emitted");
    put(12, 3, "=A12*2", "emitted");
    return s;
}

}  // namespace

TEST_CASE("a column of 10,000 dragged formulas yields exactly ten records") {
    Sheet s("Drag", 0);
    for (int r = 1; r <= 10000; ++r) {
        s.set({r, 1}, CellValue::number(std::to_string(r)));
        s.set({r, 2}, CellValue::formula("=A" + std::to_string(r) + "*2", "0"));
    }
    CorpusMiner miner(10);
    std::vector<ExampleRecord> out;
    miner.mine_sheet(s, "drag.grid.json", out);
    REQUIRE(out.size() == 10);
    for (int i = 0; i < 10; ++i) CHECK(out[static_cast<size_t>(i)].target == "B" + std::to_string(i + 1));
    CHECK(miner.stats().dedup_dropped == 9990);
    CHECK(miner.stats().formulas == 10000);
}

TEST_CASE("filter counts reconcile with the formula total") {
    std::map<std::string, int64_t> expect;
    Sheet s = trigger_sheet(expect);
    CorpusMiner miner(10);
    std::vector<ExampleRecord> out;
    miner.mine_sheet(s, "t.grid.json", out);
    const auto& st = miner.stats();
    CHECK(static_cast<int64_t>(out.size()) == expect["emitted"]);
    for (const auto& [bucket, n] : expect) {
        if (bucket == "emitted") continue;
        CAPTURE(bucket);
        CHECK(st.filtered.at(bucket) == n);
    }
    CHECK(st.formulas == st.emitted + st.dedup_dropped + st.filtered_total());
    for (const auto& r : out) {
        CHECK(r.sketch_len == sketch_length(r.gold));
        CHECK(ir_from_text(r.gold.text()) == r.gold);
    }
}

TEST_CASE("a sheet without formulas yields nothing") {
    Sheet s("Plain", 1);
    s.set({1, 1}, CellValue::text("a"));
    s.set({2, 1}, CellValue::number("1"));
    CorpusMiner miner(10);
    std::vector<ExampleRecord> out;
    miner.mine_sheet(s, "p", out);
    CHECK(out.empty());
    CHECK(miner.stats().formulas == 0);
}

TEST_CASE("corpus mining skips corrupt files and keeps going") {
    auto dir = fresh_dir("corpus");
    std::mt19937_64 rng(1);
    save_grid_file(dir / "a.grid.json", {row_aggregate_sheet("S", "Total", "SUM", 2, 3, rng)});
    std::ofstream(dir / "b.grid.json") << "{ not json";
    std::ofstream(dir / "notes.txt") << "ignored";
    auto res = mine_corpus(dir, 10);
    CHECK(res.stats.files == 2);
    CHECK(res.stats.corrupt_files == 1);
    REQUIRE(res.stats.errors.size() == 1);
    CHECK(res.stats.errors[0].find("b.grid.json") != std::string::npos);
    CHECK(res.records.size() == 3);
}

TEST_CASE("split_corpus is deterministic, file-disjoint and sized by ratio") {
    std::vector<fs::path> files;
    for (int i = 0; i < 10; ++i) files.push_back("f" + std::to_string(i) + ".grid.json");
    auto a = split_corpus(files, {0.8, 0.1, 0.1}, 7);
    auto b = split_corpus(files, {0.8, 0.1, 0.1}, 7);
    CHECK(a == b);
    CHECK(a[0].size() == 8);
    CHECK(a[1].size() == 1);
    CHECK(a[2].size() == 1);
    std::set<fs::path> all;
    for (const auto& part : a) all.insert(part.begin(), part.end());
    CHECK(all.size() == 10);
    auto c = split_corpus(files, {0.8, 0.1, 0.1}, 8);
    CHECK(c != a);
    CHECK_THROWS_AS(split_corpus({"x", "y"}, {0.8, 0.1, 0.1}, 1), std::invalid_argument);
    CHECK_THROWS_AS(split_corpus(files, {0.5, 0.1, 0.1}, 1), std::invalid_argument);
}

TEST_CASE("vocabulary min-count: a token seen nine times maps to UNK") {
    std::vector<ExampleRecord> recs;
    auto make = [](const std::string& formula_stream) {
        ExampleRecord r;
        r.window.radius = 0;
        r.window.header = {{}};
        r.window.header_valid = {1};
        r.window.cells = {{}};
        r.window.valid = {1};
        r.gold = ir_from_text(formula_stream);
        r.sketch_len = sketch_length(r.gold);
        return r;
    };
    for (int i = 0; i < 10; ++i) recs.push_back(make("SUM RANGE $ENDSKETCH$ $R$ R[0] C[0] $ENDR$ EOF"));
    for (int i = 0; i < 9; ++i) recs.push_back(make("LEN RANGE $ENDSKETCH$ $R$ R[0] C[0] $ENDR$ EOF"));
    recs[0].window.cells[0] = {"str", "common"};
    auto v = build_vocab(recs, 10, 10);
    CHECK(v.sketch.contains("SUM"));
    CHECK_FALSE(v.sketch.contains("LEN"));
    CHECK(v.sketch.id("LEN") == *v.sketch.unk_id());
    CHECK(v.sketch.contains("RANGE"));
    CHECK(v.input.contains(kSepToken));
    CHECK_FALSE(v.input.contains("common"));
    CHECK(v.range.size() == 46);

    auto all = build_vocab(recs, 1, 10);
    CHECK(all.sketch.contains("LEN"));
    CHECK(all.input.contains("common"));

    size_t dropped = drop_unknown_gold(recs, v.sketch);
    CHECK(dropped == 9);
    CHECK(recs.size() == 10);
    CHECK_THROWS_AS(build_vocab({}, 1, 10), std::invalid_argument);
}

TEST_CASE("range vocabulary is the closed set") {
    auto v = range_vocabulary(10);
    CHECK(v.size() == 2 * 21 + 4);
    CHECK(v.contains("R[-10]"));
    CHECK(v.contains("C[10]"));
    CHECK_FALSE(v.contains("R[11]"));
    CHECK(range_vocabulary(2).size() == 14);
}

TEST_CASE("records and vocabularies round-trip through files") {
    auto dir = fresh_dir("records");
    std::mt19937_64 rng(3);
    auto recs = mine_sheets({col_aggregate_sheet("C", "Total", "SUM", 3, rng)}, 10);
    REQUIRE(recs.size() == 1);
    write_records(dir / "r.jsonl", recs);
    CHECK(read_records(dir / "r.jsonl") == recs);
    auto v = build_vocab(recs, 1, 10);
    save_vocabs(dir, v);
    CHECK(load_vocabs(dir) == v);
    std::ofstream(dir / "bad.jsonl") << "{\"file\":1}\n";
    CHECK_THROWS_WITH_AS(read_records(dir / "bad.jsonl"), doctest::Contains("bad.jsonl:1"), std::runtime_error);
}

TEST_CASE("preprocess writes splits, vocabularies and reconciled stats") {
    auto corpus = fresh_dir("pp_corpus");
    auto out = fresh_dir("pp_out");
    std::mt19937_64 rng(9);
    for (int i = 0; i < 10; ++i) {
        const auto& lf = aggregate_functions()[static_cast<size_t>(i) % 2];
        save_grid_file(corpus / ("s" + std::to_string(i) + ".grid.json"),
                       {row_aggregate_sheet("S", lf.label, lf.fn, 2 + i % 3, 3, rng)});
    }
    PreprocessOptions opt;
    opt.corpus = corpus;
    opt.out = out;
    opt.radius = 10;
    opt.min_count = 1;
    opt.seed = 7;
    auto stats = run_preprocess(opt);
    for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl", "vocab.input.tsv", "vocab.sketch.tsv",
                          "vocab.range.tsv", "stats.json"})
        CHECK(fs::exists(out / f));
    CHECK(stats["splits"]["train"]["files"] == 8);
    const auto& t = stats["total"];
    int64_t filtered = 0;
    for (const auto& [_, n] : t["filtered"].items()) filtered += n.get<int64_t>();
    CHECK(t["formulas"].get<int64_t>() == t["emitted"].get<int64_t>() + t["dedup_dropped"].get<int64_t>() + filtered);
    CHECK(stats["vocab_sizes"]["range"] == 46);
    auto again = fresh_dir("pp_out2");
    opt.out = again;
    run_preprocess(opt);
    CHECK(read_records(out / "train.jsonl") == read_records(again / "train.jsonl"));
}
