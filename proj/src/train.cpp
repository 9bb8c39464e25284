#include "sheetcoder/train.hpp"

#include <cmath>
#include <fstream>
#include <iostream>

namespace sheetcoder {

PreparedExample prepare_example(const Model& model, const ContextWindow& window, const FormulaIR& gold) {
    PreparedExample ex;
    ex.bundles = model.bundles_for(window);
    ex.gold = model.gold_ids(gold);
    ex.ir = gold;
    return ex;
}

nlohmann::json MetricRecord::to_json() const {
    return {{"step", step}, {"train_loss", train_loss}, {"valid_loss", valid_loss}, {"valid_top1", valid_top1}};
}

std::vector<size_t> seeded_permutation(size_t n, std::mt19937_64& rng) {
    std::vector<size_t> out(n);
    for (size_t i = 0; i < n; ++i) out[i] = i;
    for (size_t i = n; i > 1; --i) std::swap(out[i - 1], out[rng() % i]);
    return out;
}

std::vector<size_t> batch_indices(size_t n_examples, size_t batch_size, uint64_t seed, int64_t step) {
    if (n_examples == 0) throw std::invalid_argument("no training examples");
    std::vector<size_t> out;
    uint64_t first = static_cast<uint64_t>(step) * batch_size;
    int64_t cached_epoch = -1;
    std::vector<size_t> perm;
    for (uint64_t k = first; k < first + batch_size; ++k) {
        auto epoch = static_cast<int64_t>(k / n_examples);
        if (epoch != cached_epoch) {
            std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                              static_cast<uint32_t>(epoch), static_cast<uint32_t>(static_cast<uint64_t>(epoch) >> 32)};
            std::mt19937_64 rng(seq);
            perm = seeded_permutation(n_examples, rng);
            cached_epoch = epoch;
        }
        out.push_back(perm[k % n_examples]);
    }
    return out;
}

std::pair<double, double> evaluate_examples(const Model& model, const std::vector<PreparedExample>& examples,
                                            size_t limit) {
    size_t n = std::min(limit, examples.size());
    if (n == 0) return {0.0, 0.0};
    double loss = 0;
    size_t correct = 0;
    for (size_t i = 0; i < n; ++i) {
        const auto& ex = examples[i];
        ad::Tape tape(false);
        loss += model.example_loss(tape, ex.bundles, ex.gold, nullptr).value().item();
        auto res = model.greedy_decode(ex.bundles);
        if (!res.predictions.empty() && res.predictions[0].ir == ex.ir) ++correct;
    }
    return {loss / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
}

TrainResult train_model(Model& model, const std::vector<PreparedExample>& train,
                        const std::vector<PreparedExample>& valid, const TrainOptions& options,
                        const std::function<void(const MetricRecord&)>& on_eval) {
    if (train.empty()) throw std::invalid_argument("no training examples");
    if (options.batch_size == 0) throw std::invalid_argument("batch size must be positive");
    ad::AdamOptions adam;
    adam.lr = options.learning_rate;

    std::ofstream metrics;
    if (options.out_dir) {
        std::filesystem::create_directories(*options.out_dir);
        metrics.open(*options.out_dir / "metrics.jsonl", model.params().step() > 0 ? std::ios::app : std::ios::trunc);
    }

    TrainResult result;
    result.best_valid_loss = std::numeric_limits<double>::infinity();
    double running = 0;
    int64_t running_n = 0;
    const double inv_batch = 1.0 / static_cast<double>(options.batch_size);

    auto evaluate = [&](int64_t step) {
        MetricRecord rec;
        rec.step = step;
        rec.train_loss = running_n ? running / static_cast<double>(running_n) : 0.0;
        const auto& scored = valid.empty() ? train : valid;
        auto [vl, top1] = evaluate_examples(model, scored, options.valid_limit);
        rec.valid_loss = vl;
        rec.valid_top1 = top1;
        running = 0;
        running_n = 0;
        result.log.push_back(rec);
        if (metrics.is_open()) metrics << rec.to_json().dump() << "\n" << std::flush;
        if (on_eval) on_eval(rec);
        if (!options.quiet) {
            std::cerr << "step " << rec.step << " train_loss " << rec.train_loss << " valid_loss " << rec.valid_loss
                      << " valid_top1 " << rec.valid_top1 << "\n";
        }
        if (std::isfinite(vl) && vl < result.best_valid_loss) {
            result.best_valid_loss = vl;
            result.best_step = step;
            if (options.out_dir) model.save(*options.out_dir / "best.ckpt", false);
        }
        if (options.out_dir) model.save(*options.out_dir / "last.ckpt", true);
    };

    for (int64_t step = model.params().step(); step < options.steps; ++step) {
        std::seed_seq seq{static_cast<uint32_t>(options.seed), static_cast<uint32_t>(options.seed >> 32),
                          static_cast<uint32_t>(step), 0x64726f70u};
        std::mt19937_64 drop(seq);
        ad::Gradients grads;
        double batch_loss = 0;
        for (size_t idx : batch_indices(train.size(), options.batch_size, options.seed, step)) {
            const auto& ex = train[idx];
            ad::Tape tape;
            ad::Var loss = model.example_loss(tape, ex.bundles, ex.gold, &drop);
            batch_loss += loss.value().item();
            tape.backward(loss);
            ad::accumulate(grads, tape.param_grads(), inv_batch);
        }
        batch_loss *= inv_batch;
        double norm = ad::global_norm(grads);
        if (!std::isfinite(batch_loss) || !std::isfinite(norm)) {
            result.diverged = true;
            result.final_step = step;
            if (!options.quiet) std::cerr << "loss diverged at step " << step << "; keeping the last good checkpoint\n";
            return result;
        }
        ad::clip_global_norm(grads, options.clip_norm);
        ad::adam_step(model.params(), grads, adam);
        running += batch_loss;
        ++running_n;
        int64_t done = step + 1;
        if (done % options.eval_every == 0 || done == options.steps) evaluate(done);
    }
    result.final_step = std::max<int64_t>(model.params().step(), 0);
    return result;
}

}  // namespace sheetcoder
