#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sheetcoder/context.hpp"
#include "sheetcoder/formula.hpp"
#include "sheetcoder/grid.hpp"
#include "sheetcoder/vocab.hpp"

namespace sheetcoder {

/// One mined (context, formula) sample.
struct ExampleRecord {
    std::string file;
    std::string sheet;
    std::string target;  // A1
    ContextWindow window;
    FormulaIR gold;
    size_t sketch_len = 0;

    nlohmann::json to_json() const;
    static ExampleRecord from_json(const nlohmann::json& j);
    bool operator==(const ExampleRecord&) const = default;
};

inline constexpr size_t kDedupKeep = 10;
inline constexpr std::string_view kParseErrorReason = "parse_error";

/// Every formula cell lands in exactly one bucket:
/// formulas = emitted + dedup_dropped + sum(filtered).
struct MineStats {
    int64_t files = 0;
    int64_t corrupt_files = 0;
    int64_t sheets = 0;
    int64_t formulas = 0;
    int64_t emitted = 0;
    int64_t dedup_dropped = 0;
    std::map<std::string, int64_t> filtered;  // reason name -> count, including parse errors
    std::vector<std::string> errors;

    int64_t filtered_total() const;
    nlohmann::json to_json() const;
};

/// Key under which dragged copies of one formula are counted.
struct DedupKey {
    std::string file;
    std::string sheet;
    int col = 0;
    std::string stream;
    auto operator<=>(const DedupKey&) const = default;
};

class CorpusMiner {
public:
    explicit CorpusMiner(int radius) : radius_(radius) {}

    /// Mines one sheet; cells are visited in row order.
    void mine_sheet(const Sheet& sheet, const std::string& file, std::vector<ExampleRecord>& out);
    void mine_file(const std::filesystem::path& path, std::vector<ExampleRecord>& out);

    const MineStats& stats() const { return stats_; }

private:
    int radius_;
    MineStats stats_;
    std::map<DedupKey, size_t> seen_;
};

/// Grid files (*.grid.json) under dir, recursively, in sorted order.
std::vector<std::filesystem::path> list_grid_files(const std::filesystem::path& dir);

struct MineResult {
    std::vector<ExampleRecord> records;
    MineStats stats;
};

MineResult mine_files(const std::vector<std::filesystem::path>& files, int radius);
MineResult mine_corpus(const std::filesystem::path& dir, int radius);

using SplitFiles = std::array<std::vector<std::filesystem::path>, 3>;

/// Seeded shuffle at file granularity, then train/valid/test slices of sizes
/// round(ratio * n) (test takes the remainder).
SplitFiles split_corpus(std::vector<std::filesystem::path> files, const std::array<double, 3>& ratios, uint64_t seed);

/// Counts come from the given (training) records only. Input and sketch
/// tokens seen fewer than min_count times are dropped; reserved entries stay.
VocabSet build_vocab(const std::vector<ExampleRecord>& train, int64_t min_count, int radius);

/// Removes records whose gold sketch contains a token missing from the sketch
/// vocabulary. Returns the number removed.
size_t drop_unknown_gold(std::vector<ExampleRecord>& records, const Vocabulary& sketch_vocab);

void write_records(const std::filesystem::path& path, const std::vector<ExampleRecord>& records);
std::vector<ExampleRecord> read_records(const std::filesystem::path& path);

void save_vocabs(const std::filesystem::path& dir, const VocabSet& vocabs);
VocabSet load_vocabs(const std::filesystem::path& dir);

struct PreprocessOptions {
    std::filesystem::path corpus;
    std::filesystem::path out;
    int radius = 10;
    int64_t min_count = 10;
    std::array<double, 3> ratios{0.8, 0.1, 0.1};
    uint64_t seed = 1;
};

/// Mines, splits, builds vocabularies and writes train/valid/test.jsonl,
/// vocab.{input,sketch,range}.tsv and stats.json. Returns the stats document.
nlohmann::json run_preprocess(const PreprocessOptions& options);

}  // namespace sheetcoder
