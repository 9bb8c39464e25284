#include "sheetcoder/dataset.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace sheetcoder {

namespace {

nlohmann::json window_to_json(const ContextWindow& w) {
    return {{"radius", w.radius},
            {"header", w.header},
            {"header_valid", w.header_valid},
            {"cells", w.cells},
            {"valid", w.valid}};
}

ContextWindow window_from_json(const nlohmann::json& j) {
    ContextWindow w;
    w.radius = j.at("radius").get<int>();
    w.header = j.at("header").get<std::vector<CellTokens>>();
    w.header_valid = j.at("header_valid").get<std::vector<uint8_t>>();
    w.cells = j.at("cells").get<std::vector<CellTokens>>();
    w.valid = j.at("valid").get<std::vector<uint8_t>>();
    auto width = static_cast<size_t>(w.width());
    if (w.radius < 0 || w.header.size() != width || w.header_valid.size() != width ||
        w.cells.size() != width * width || w.valid.size() != width * width) {
        throw std::invalid_argument("context window arrays do not match radius " + std::to_string(w.radius));
    }
    return w;
}

}  // namespace

nlohmann::json ExampleRecord::to_json() const {
    return {{"file", file},     {"sheet", sheet}, {"target", target}, {"sketch_len", sketch_len},
            {"gold", gold.text()}, {"window", window_to_json(window)}};
}

ExampleRecord ExampleRecord::from_json(const nlohmann::json& j) {
    ExampleRecord r;
    r.file = j.at("file").get<std::string>();
    r.sheet = j.at("sheet").get<std::string>();
    r.target = j.at("target").get<std::string>();
    r.gold = ir_from_text(j.at("gold").get<std::string>());
    r.sketch_len = j.at("sketch_len").get<size_t>();
    if (r.sketch_len != sketch_length(r.gold)) {
        throw std::invalid_argument("sketch_len " + std::to_string(r.sketch_len) + " disagrees with gold stream");
    }
    r.window = window_from_json(j.at("window"));
    return r;
}

int64_t MineStats::filtered_total() const {
    int64_t n = 0;
    for (const auto& [_, c] : filtered) n += c;
    return n;
}

nlohmann::json MineStats::to_json() const {
    return {{"files", files},
            {"corrupt_files", corrupt_files},
            {"sheets", sheets},
            {"formulas", formulas},
            {"emitted", emitted},
            {"dedup_dropped", dedup_dropped},
            {"filtered", filtered},
            {"errors", errors}};
}

void CorpusMiner::mine_sheet(const Sheet& sheet, const std::string& file, std::vector<ExampleRecord>& out) {
    ++stats_.sheets;
    for (const auto& [addr, cell] : sheet.cells()) {
        if (cell.kind != CellKind::Formula) continue;
        ++stats_.formulas;
        FormulaAst ast;
        try {
            ast = parse_formula(cell.formula_source.value_or(""));
        } catch (const ParseError&) {
            ++stats_.filtered[std::string(kParseErrorReason)];
            continue;
        }
        auto cls = classify_formula(ast, addr, radius_);
        if (!cls.eligible()) {
            ++stats_.filtered[std::string(reason_name(*cls.reason))];
            continue;
        }
        FormulaIR ir = to_ir(ast, addr, radius_);
        DedupKey key{file, sheet.name(), addr.col, ir.text()};
        if (++seen_[key] > kDedupKeep) {
            ++stats_.dedup_dropped;
            continue;
        }
        ExampleRecord rec;
        rec.file = file;
        rec.sheet = sheet.name();
        rec.target = render_a1(addr);
        rec.window = extract_window(sheet, addr, radius_);
        rec.sketch_len = sketch_length(ir);
        rec.gold = std::move(ir);
        out.push_back(std::move(rec));
        ++stats_.emitted;
    }
}

void CorpusMiner::mine_file(const std::filesystem::path& path, std::vector<ExampleRecord>& out) {
    ++stats_.files;
    std::vector<Sheet> sheets;
    try {
        sheets = load_grid_file(path);
    } catch (const std::exception& e) {
        ++stats_.corrupt_files;
        stats_.errors.push_back(path.string() + ": " + e.what());
        return;
    }
    for (const auto& s : sheets) mine_sheet(s, path.filename().string(), out);
}

std::vector<std::filesystem::path> list_grid_files(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw std::invalid_argument("corpus directory not found: " + dir.string());
    std::vector<std::filesystem::path> out;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto name = entry.path().filename().string();
        if (name.size() > 10 && name.ends_with(".grid.json")) out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

MineResult mine_files(const std::vector<std::filesystem::path>& files, int radius) {
    CorpusMiner miner(radius);
    MineResult r;
    for (const auto& f : files) miner.mine_file(f, r.records);
    r.stats = miner.stats();
    return r;
}

MineResult mine_corpus(const std::filesystem::path& dir, int radius) { return mine_files(list_grid_files(dir), radius); }

SplitFiles split_corpus(std::vector<std::filesystem::path> files, const std::array<double, 3>& ratios, uint64_t seed) {
    double total = 0;
    for (double r : ratios) {
        if (r < 0) throw std::invalid_argument("split ratios must be non-negative");
        total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");
    if (files.size() < ratios.size()) {
        throw std::invalid_argument("cannot split " + std::to_string(files.size()) + " files into " +
                                    std::to_string(ratios.size()) + " splits");
    }
    std::sort(files.begin(), files.end());
    std::mt19937_64 rng(seed);
    for (size_t i = files.size(); i > 1; --i) std::swap(files[i - 1], files[rng() % i]);
    const auto n = static_cast<double>(files.size());
    size_t n_train = static_cast<size_t>(std::llround(ratios[0] * n));
    size_t n_valid = static_cast<size_t>(std::llround(ratios[1] * n));
    n_train = std::min(n_train, files.size());
    n_valid = std::min(n_valid, files.size() - n_train);
    SplitFiles out;
    out[0].assign(files.begin(), files.begin() + static_cast<long>(n_train));
    out[1].assign(files.begin() + static_cast<long>(n_train), files.begin() + static_cast<long>(n_train + n_valid));
    out[2].assign(files.begin() + static_cast<long>(n_train + n_valid), files.end());
    return out;
}

VocabSet build_vocab(const std::vector<ExampleRecord>& train, int64_t min_count, int radius) {
    if (train.empty()) throw std::invalid_argument("cannot build vocabularies from an empty training set");
    std::map<std::string, int64_t> input_counts;
    std::map<std::string, int64_t> sketch_counts;
    for (const auto& r : train) {
        for (const auto& cell : r.window.header)
            for (const auto& t : cell) ++input_counts[t];
        for (const auto& cell : r.window.cells)
            for (const auto& t : cell) ++input_counts[t];
        for (const auto& t : r.gold.sketch) ++sketch_counts[t.text];
    }
    VocabSet v;
    v.input = Vocabulary::build(input_counts, {kPadToken, kUnkToken, kSepToken}, min_count);
    v.input.set_unk(kUnkToken);
    v.sketch = Vocabulary::build(sketch_counts, sketch_reserved_tokens(), min_count);
    v.sketch.set_unk(kUnkToken);
    v.range = range_vocabulary(radius);
    return v;
}

size_t drop_unknown_gold(std::vector<ExampleRecord>& records, const Vocabulary& sketch_vocab) {
    auto unk = sketch_vocab.unk_id();
    auto known = [&](const ExampleRecord& r) {
        for (const auto& t : r.gold.sketch) {
            auto id = sketch_vocab.find(t.text);
            if (!id || (unk && *id == *unk)) return false;
        }
        return true;
    };
    size_t before = records.size();
    records.erase(std::remove_if(records.begin(), records.end(), [&](const ExampleRecord& r) { return !known(r); }),
                  records.end());
    return before - records.size();
}

void write_records(const std::filesystem::path& path, const std::vector<ExampleRecord>& records) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    for (const auto& r : records) os << r.to_json().dump() << "\n";
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::vector<ExampleRecord> read_records(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::vector<ExampleRecord> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(ExampleRecord::from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void save_vocabs(const std::filesystem::path& dir, const VocabSet& vocabs) {
    std::filesystem::create_directories(dir);
    vocabs.input.save(dir / "vocab.input.tsv");
    vocabs.sketch.save(dir / "vocab.sketch.tsv");
    vocabs.range.save(dir / "vocab.range.tsv");
}

VocabSet load_vocabs(const std::filesystem::path& dir) {
    VocabSet v;
    v.input = Vocabulary::load(dir / "vocab.input.tsv");
    v.input.set_unk(kUnkToken);
    v.sketch = Vocabulary::load(dir / "vocab.sketch.tsv");
    v.sketch.set_unk(kUnkToken);
    v.range = Vocabulary::load(dir / "vocab.range.tsv");
    return v;
}

nlohmann::json run_preprocess(const PreprocessOptions& options) {
    auto files = list_grid_files(options.corpus);
    auto splits = split_corpus(files, options.ratios, options.seed);
    static const char* names[3] = {"train", "valid", "test"};
    std::array<MineResult, 3> mined;
    for (size_t i = 0; i < 3; ++i) mined[i] = mine_files(splits[i], options.radius);
    if (mined[0].records.empty()) throw std::runtime_error("no training examples were mined");
    VocabSet vocabs = build_vocab(mined[0].records, options.min_count, options.radius);

    std::filesystem::create_directories(options.out);
    nlohmann::json stats;
    stats["radius"] = options.radius;
    stats["min_count"] = options.min_count;
    stats["seed"] = options.seed;
    stats["ratios"] = options.ratios;
    MineStats total;
    for (size_t i = 0; i < 3; ++i) {
        size_t unk = drop_unknown_gold(mined[i].records, vocabs.sketch);
        write_records(options.out / (std::string(names[i]) + ".jsonl"), mined[i].records);
        const auto& s = mined[i].stats;
        stats["splits"][names[i]] = {{"files", splits[i].size()},
                                     {"records", mined[i].records.size()},
                                     {"unk_gold_dropped", unk},
                                     {"mining", s.to_json()}};
        total.files += s.files;
        total.corrupt_files += s.corrupt_files;
        total.sheets += s.sheets;
        total.formulas += s.formulas;
        total.emitted += s.emitted;
        total.dedup_dropped += s.dedup_dropped;
        for (const auto& [k, c] : s.filtered) total.filtered[k] += c;
        total.errors.insert(total.errors.end(), s.errors.begin(), s.errors.end());
    }
    stats["total"] = total.to_json();
    stats["vocab_sizes"] = {{"input", vocabs.input.size()}, {"sketch", vocabs.sketch.size()}, {"range", vocabs.range.size()}};
    save_vocabs(options.out, vocabs);
    std::ofstream os(options.out / "stats.json", std::ios::trunc);
    os << stats.dump(2) << "\n";
    return stats;
}

}  // namespace sheetcoder
