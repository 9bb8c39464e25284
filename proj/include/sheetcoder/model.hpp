#pragma once

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "sheetcoder/autodiff.hpp"
#include "sheetcoder/context.hpp"
#include "sheetcoder/decode_grammar.hpp"
#include "sheetcoder/formula.hpp"
#include "sheetcoder/vocab.hpp"

namespace sheetcoder {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ModelConfig {
    int radius = 10;
    int rows_per_bundle = 3;
    int seq_len = 128;
    int max_positions = 512;

    int layers = 2;
    int heads = 4;
    int hidden = 128;
    int ffn = 0;          // 0: 4 * hidden
    int conv_dim = 0;     // 0: hidden

    int decoder_hidden = 128;
    int decoder_embed = 0;   // 0: decoder_hidden
    int attention_dim = 0;   // 0: decoder_hidden

    double dropout = 0.1;
    int beam = 64;
    int max_sketch_tokens = 64;
    int max_ranges = 8;
    uint64_t seed = 1;

    bool use_context = true;     // false: decoder only, no encoder banks
    bool two_stage = true;       // false: one joint output head
    bool use_rows = true;
    bool use_cols = true;
    bool shared_encoder = false;

    int ffn_dim() const { return ffn > 0 ? ffn : 4 * hidden; }
    int conv_out() const { return conv_dim > 0 ? conv_dim : hidden; }
    int embed_dim() const { return decoder_embed > 0 ? decoder_embed : decoder_hidden; }
    int attn_dim() const { return attention_dim > 0 ? attention_dim : decoder_hidden; }
    /// Width of a final token embedding: aggregated conv features plus encoder output.
    int token_dim() const { return conv_out() + hidden; }
    bool has_header_bank() const { return use_context && use_rows; }
    bool has_data_bank() const { return use_context && (use_rows || use_cols); }

    /// Throws std::invalid_argument on inconsistent settings, including a
    /// bundle tiling that does not partition the window.
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

/// Attention banks produced by the encoder. Rows are the valid token
/// positions only; header and data banks are disjoint.
struct EncodedStates {
    std::optional<ad::Var> header_bank;
    std::optional<ad::Var> data_bank;
    size_t header_tokens = 0;
    size_t data_tokens = 0;
};

/// Gold stream split by stage, in the stage vocabularies.
struct GoldIds {
    std::vector<int> sketch;  // ends with $ENDSKETCH$
    std::vector<int> range;   // ends with EOF
};

struct Prediction {
    std::vector<std::string> tokens;
    FormulaIR ir;
    double log_prob = 0.0;
};

struct DecodeResult {
    std::vector<Prediction> predictions;
    std::string diagnostic;
};

/// Orders predictions by log-probability descending, then shorter stream,
/// then lexicographic token order.
bool prediction_before(const Prediction& a, const Prediction& b);

class Model {
public:
    Model(ModelConfig config, VocabSet vocabs);

    const ModelConfig& config() const { return config_; }
    const VocabSet& vocabs() const { return vocabs_; }
    ad::ParamStore& params() { return params_; }
    const ad::ParamStore& params() const { return params_; }

    BundleSet bundles_for(const ContextWindow& window) const;

    /// rng non-null enables dropout (training).
    EncodedStates encode(ad::Tape& tape, const BundleSet& bundles, std::mt19937_64* rng) const;

    GoldIds gold_ids(const FormulaIR& gold) const;

    /// Mean token cross-entropy of the gold stream under teacher forcing.
    ad::Var loss(ad::Tape& tape, const EncodedStates& states, const GoldIds& gold, std::mt19937_64* rng) const;
    ad::Var example_loss(ad::Tape& tape, const BundleSet& bundles, const GoldIds& gold, std::mt19937_64* rng) const;

    DecodeResult beam_decode(const BundleSet& bundles, int beam) const;
    DecodeResult greedy_decode(const BundleSet& bundles) const;

    nlohmann::json checkpoint_meta() const;
    void save(const std::filesystem::path& path, bool include_optimizer_state) const;
    /// Rebuilds the model from a checkpoint; parameter names and shapes must
    /// match those the stored config implies.
    static Model load(const std::filesystem::path& path);

private:
    struct DecoderContext;
    struct StepOutput;

    void init_params();
    void init_encoder(const std::string& prefix, std::mt19937_64& rng);
    void init_conv(const std::string& prefix, int units, std::mt19937_64& rng);
    ad::Var run_encoder(ad::Tape& tape, const std::string& prefix, const std::vector<Bundle>& bundles,
                        std::mt19937_64* rng) const;
    ad::Var aggregate(ad::Tape& tape, const std::string& prefix, ad::Var x, size_t units) const;
    std::string encoder_prefix(bool row_side) const;

    DecoderContext decoder_context(ad::Tape& tape, const EncodedStates& states) const;
    ad::Var output_features(ad::Tape& tape, const DecoderContext& ctx, ad::Var h) const;
    DecodeResult search(const BundleSet& bundles, int beam, bool greedy) const;

    ModelConfig config_;
    VocabSet vocabs_;
    StreamGrammar grammar_;
    ad::ParamStore params_;
    int go_id_ = 0;
};

}  // namespace sheetcoder
