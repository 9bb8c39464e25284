#include "sheetcoder/metrics.hpp"

#include <algorithm>
#include <iomanip>
#include <set>
#include <sstream>

namespace sheetcoder {

bool match_formula(const FormulaIR& pred, const FormulaIR& gold) { return pred.tokens() == gold.tokens(); }

bool match_sketch(const FormulaIR& pred, const FormulaIR& gold) { return pred.sketch_texts() == gold.sketch_texts(); }

bool match_ranges(const FormulaIR& pred, const FormulaIR& gold) { return pred.ranges == gold.ranges; }

std::vector<FormulaIR> dedup_ranked(const std::vector<FormulaIR>& ranked) {
    std::set<std::vector<std::string>> seen;
    std::vector<FormulaIR> out;
    for (const auto& ir : ranked)
        if (seen.insert(ir.tokens()).second) out.push_back(ir);
    return out;
}

bool topk_hit(const std::vector<FormulaIR>& ranked, const FormulaIR& gold, int k, const Matcher& match) {
    if (k < 1) throw std::invalid_argument("top-k needs k >= 1, got " + std::to_string(k));
    size_t n = std::min(ranked.size(), static_cast<size_t>(k));
    for (size_t i = 0; i < n; ++i)
        if (match(ranked[i], gold)) return true;
    return false;
}

double topk_accuracy(const std::vector<std::vector<FormulaIR>>& ranked, const std::vector<FormulaIR>& gold, int k,
                     const Matcher& match) {
    if (ranked.size() != gold.size()) throw std::invalid_argument("prediction and gold counts differ");
    if (k < 1) throw std::invalid_argument("top-k needs k >= 1, got " + std::to_string(k));
    if (gold.empty()) return 0.0;
    size_t hits = 0;
    for (size_t i = 0; i < gold.size(); ++i) hits += topk_hit(dedup_ranked(ranked[i]), gold[i], k, match);
    return static_cast<double>(hits) / static_cast<double>(gold.size());
}

std::string sketch_bucket(size_t n) {
    if (n <= 1) return "1";
    if (n == 2) return "2";
    if (n == 3) return "3";
    if (n <= 5) return "4-5";
    return "6+";
}

const std::vector<std::string>& sketch_buckets() {
    static const std::vector<std::string> b{"1", "2", "3", "4-5", "6+"};
    return b;
}

EvalReport evaluate_rankings(const std::vector<std::vector<FormulaIR>>& ranked, const std::vector<FormulaIR>& gold,
                             std::vector<int> ks) {
    if (ranked.size() != gold.size()) throw std::invalid_argument("prediction and gold counts differ");
    std::sort(ks.begin(), ks.end());
    ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
    for (int k : ks)
        if (k < 1) throw std::invalid_argument("top-k needs k >= 1, got " + std::to_string(k));
    const std::vector<std::pair<std::string, Matcher>> matchers{
        {"formula", match_formula}, {"sketch", match_sketch}, {"range", match_ranges}};
    EvalReport r;
    r.ks = ks;
    r.examples = static_cast<int64_t>(gold.size());
    for (const auto& b : sketch_buckets()) r.buckets[b];
    for (size_t i = 0; i < gold.size(); ++i) {
        auto list = dedup_ranked(ranked[i]);
        for (const auto& [name, m] : matchers) {
            for (int k : ks) {
                auto& c = r.topk[name][k];
                ++c.total;
                c.hits += topk_hit(list, gold[i], k, m);
            }
        }
        auto& b = r.buckets[sketch_bucket(sketch_length(gold[i]))];
        ++b.total;
        b.hits += topk_hit(list, gold[i], 1, match_formula);
    }
    return r;
}

double bucket_weighted_top1(const EvalReport& report) {
    double num = 0;
    int64_t den = 0;
    for (const auto& [_, c] : report.buckets) {
        num += c.accuracy() * static_cast<double>(c.total);
        den += c.total;
    }
    return den ? num / static_cast<double>(den) : 0.0;
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["examples"] = examples;
    j["ks"] = ks;
    for (const auto& [name, per_k] : topk)
        for (const auto& [k, c] : per_k)
            j["accuracy"][name]["top" + std::to_string(k)] = {{"hits", c.hits}, {"total", c.total}, {"accuracy", c.accuracy()}};
    for (const auto& b : sketch_buckets()) {
        const auto& c = buckets.at(b);
        j["sketch_length_top1"][b] = {{"hits", c.hits}, {"total", c.total}, {"accuracy", c.accuracy()}};
    }
    if (!extra.is_null()) j["pipeline"] = extra;
    return j;
}

std::string EvalReport::to_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "examples: " << examples << "\n\n";
    os << std::left << std::setw(10) << "metric";
    for (int k : ks) os << std::right << std::setw(10) << ("top-" + std::to_string(k));
    os << "\n";
    for (const char* name : {"formula", "sketch", "range"}) {
        auto it = topk.find(name);
        if (it == topk.end()) continue;
        os << std::left << std::setw(10) << name;
        for (int k : ks) os << std::right << std::setw(9) << 100.0 * it->second.at(k).accuracy() << "%";
        os << "\n";
    }
    os << "\ntop-1 formula accuracy by sketch length\n";
    for (const auto& b : sketch_buckets()) {
        const auto& c = buckets.at(b);
        os << std::left << std::setw(10) << b << std::right << std::setw(8) << c.total << std::setw(9)
           << 100.0 * c.accuracy() << "%\n";
    }
    return os.str();
}

}  // namespace sheetcoder
