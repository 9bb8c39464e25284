#pragma once

#include <array>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sheetcoder/formula.hpp"

namespace sheetcoder {

/// Token-stream equality.
bool match_formula(const FormulaIR& pred, const FormulaIR& gold);
/// Sketch equality, literals included, ranges ignored.
bool match_sketch(const FormulaIR& pred, const FormulaIR& gold);
/// Ordered range-list equality; differing counts never match.
bool match_ranges(const FormulaIR& pred, const FormulaIR& gold);

using Matcher = std::function<bool(const FormulaIR&, const FormulaIR&)>;

/// Keeps the first (highest-ranked) copy of each token stream.
std::vector<FormulaIR> dedup_ranked(const std::vector<FormulaIR>& ranked);

/// True iff one of the first k entries matches. Throws std::invalid_argument for k < 1.
bool topk_hit(const std::vector<FormulaIR>& ranked, const FormulaIR& gold, int k, const Matcher& match);

double topk_accuracy(const std::vector<std::vector<FormulaIR>>& ranked, const std::vector<FormulaIR>& gold, int k,
                     const Matcher& match);

/// Sketch-length bucket label: "1", "2", "3", "4-5" or "6+".
std::string sketch_bucket(size_t sketch_len);
const std::vector<std::string>& sketch_buckets();

struct MetricCounts {
    int64_t hits = 0;
    int64_t total = 0;
    double accuracy() const { return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0; }
};

struct EvalReport {
    std::vector<int> ks;
    // metric name ("formula", "sketch", "range") -> k -> counts
    std::map<std::string, std::map<int, MetricCounts>> topk;
    std::map<std::string, MetricCounts> buckets;  // top-1 formula accuracy per sketch-length bucket
    int64_t examples = 0;
    nlohmann::json extra;  // pipeline counts carried into the report

    nlohmann::json to_json() const;
    std::string to_table() const;
};

/// ranked[i] is the beam output for gold[i] (rank order, may contain duplicates).
EvalReport evaluate_rankings(const std::vector<std::vector<FormulaIR>>& ranked, const std::vector<FormulaIR>& gold,
                             std::vector<int> ks);

/// Overall top-1 formula accuracy recomputed as the count-weighted mean of the buckets.
double bucket_weighted_top1(const EvalReport& report);

}  // namespace sheetcoder
