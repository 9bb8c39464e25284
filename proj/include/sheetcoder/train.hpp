#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "sheetcoder/model.hpp"

namespace sheetcoder {

/// An example ready for the model: encoder input plus gold ids.
struct PreparedExample {
    BundleSet bundles;
    GoldIds gold;
    FormulaIR ir;
};

PreparedExample prepare_example(const Model& model, const ContextWindow& window, const FormulaIR& gold);

struct TrainOptions {
    int64_t steps = 2000;
    size_t batch_size = 8;
    double learning_rate = 1e-3;
    double clip_norm = 1.0;
    int64_t eval_every = 200;
    size_t valid_limit = 200;      // validation examples scored per evaluation
    uint64_t seed = 1;
    std::optional<std::filesystem::path> out_dir;  // best.ckpt, last.ckpt, metrics.jsonl
    bool quiet = true;
};

struct MetricRecord {
    int64_t step = 0;
    double train_loss = 0.0;
    double valid_loss = 0.0;
    double valid_top1 = 0.0;

    nlohmann::json to_json() const;
};

struct TrainResult {
    std::vector<MetricRecord> log;
    double best_valid_loss = 0.0;
    int64_t best_step = 0;
    int64_t final_step = 0;
    bool diverged = false;
};

/// Positions of the examples that form minibatch `step`: consecutive slices of
/// a per-epoch permutation seeded by (seed, epoch). Independent of history, so
/// a resumed run sees the same batches.
std::vector<size_t> batch_indices(size_t n_examples, size_t batch_size, uint64_t seed, int64_t step);

/// Fisher-Yates over 0..n-1 driven by a 64-bit Mersenne Twister.
std::vector<size_t> seeded_permutation(size_t n, std::mt19937_64& rng);

/// Mean loss and greedy top-1 formula accuracy without dropout.
std::pair<double, double> evaluate_examples(const Model& model, const std::vector<PreparedExample>& examples,
                                            size_t limit);

/// Runs Adam with global-norm clipping from the model's current optimizer step
/// up to options.steps. Stops early, keeping the last good checkpoint, when a
/// loss becomes non-finite.
TrainResult train_model(Model& model, const std::vector<PreparedExample>& train,
                        const std::vector<PreparedExample>& valid, const TrainOptions& options,
                        const std::function<void(const MetricRecord&)>& on_eval = {});

}  // namespace sheetcoder
