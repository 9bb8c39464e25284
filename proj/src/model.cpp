#include "sheetcoder/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sheetcoder/checkpoint.hpp"

namespace sheetcoder {

using ad::DenseArray;
using ad::Tape;
using ad::Var;

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw std::invalid_argument("model config: " + msg);
    };
    need(radius >= 1, "radius must be at least 1");
    need(seq_len >= 1, "seq_len must be positive");
    need(rows_per_bundle >= 1, "rows_per_bundle must be positive");
    check_tiling_partition(radius, rows_per_bundle);
    need(seq_len * (rows_per_bundle + 1) <= max_positions,
         "seq_len * (rows_per_bundle + 1) = " + std::to_string(seq_len * (rows_per_bundle + 1)) +
             " exceeds max_positions " + std::to_string(max_positions));
    need(layers >= 1 && heads >= 1 && hidden >= 1, "encoder layers, heads and hidden must be positive");
    need(hidden % heads == 0, "hidden " + std::to_string(hidden) + " is not divisible by heads " + std::to_string(heads));
    need(decoder_hidden >= 1 && embed_dim() >= 1 && attn_dim() >= 1 && conv_out() >= 1 && ffn_dim() >= 1,
         "decoder sizes must be positive");
    need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
    need(beam >= 1, "beam must be at least 1");
    need(max_sketch_tokens >= 1 && max_ranges >= 0, "decode length limits must be positive");
    need(!use_context || use_rows || use_cols, "a context model needs the row side, the column side, or both");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"radius", radius},
            {"rows_per_bundle", rows_per_bundle},
            {"seq_len", seq_len},
            {"max_positions", max_positions},
            {"layers", layers},
            {"heads", heads},
            {"hidden", hidden},
            {"ffn", ffn},
            {"conv_dim", conv_dim},
            {"decoder_hidden", decoder_hidden},
            {"decoder_embed", decoder_embed},
            {"attention_dim", attention_dim},
            {"dropout", dropout},
            {"beam", beam},
            {"max_sketch_tokens", max_sketch_tokens},
            {"max_ranges", max_ranges},
            {"seed", seed},
            {"use_context", use_context},
            {"two_stage", two_stage},
            {"use_rows", use_rows},
            {"use_cols", use_cols},
            {"shared_encoder", shared_encoder}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    static const std::vector<std::string> known{
        "radius", "rows_per_bundle", "seq_len", "max_positions", "layers", "heads", "hidden", "ffn",
        "conv_dim", "decoder_hidden", "decoder_embed", "attention_dim", "dropout", "beam", "max_sketch_tokens",
        "max_ranges", "seed", "use_context", "two_stage", "use_rows", "use_cols", "shared_encoder"};
    if (!j.is_object()) throw std::invalid_argument("model config must be an object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw std::invalid_argument("model config: unknown field '" + key + "'");
        }
    }
    c.radius = j.value("radius", c.radius);
    c.rows_per_bundle = j.value("rows_per_bundle", c.rows_per_bundle);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.hidden = j.value("hidden", c.hidden);
    c.ffn = j.value("ffn", c.ffn);
    c.conv_dim = j.value("conv_dim", c.conv_dim);
    c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
    c.decoder_embed = j.value("decoder_embed", c.decoder_embed);
    c.attention_dim = j.value("attention_dim", c.attention_dim);
    c.dropout = j.value("dropout", c.dropout);
    c.beam = j.value("beam", c.beam);
    c.max_sketch_tokens = j.value("max_sketch_tokens", c.max_sketch_tokens);
    c.max_ranges = j.value("max_ranges", c.max_ranges);
    c.seed = j.value("seed", c.seed);
    c.use_context = j.value("use_context", c.use_context);
    c.two_stage = j.value("two_stage", c.two_stage);
    c.use_rows = j.value("use_rows", c.use_rows);
    c.use_cols = j.value("use_cols", c.use_cols);
    c.shared_encoder = j.value("shared_encoder", c.shared_encoder);
    c.validate();
    return c;
}

bool prediction_before(const Prediction& a, const Prediction& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
    return a.tokens < b.tokens;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

DenseArray ones(size_t n) { return DenseArray(1, n, 1.0); }
DenseArray zeros(size_t n) { return DenseArray(1, n, 0.0); }

}  // namespace

Model::Model(ModelConfig config, VocabSet vocabs)
    : config_(std::move(config)),
      vocabs_(std::move(vocabs)),
      grammar_((config_.validate(), vocabs_.sketch), vocabs_.range, config_.radius, config_.max_sketch_tokens,
               config_.max_ranges) {
    if (vocabs_.input.size() == 0 || vocabs_.sketch.size() == 0 || vocabs_.range.size() == 0) {
        throw std::invalid_argument("model vocabularies must be non-empty");
    }
    go_id_ = static_cast<int>(vocabs_.sketch.size() + vocabs_.range.size());
    init_params();
}

std::string Model::encoder_prefix(bool row_side) const {
    if (config_.shared_encoder) return "enc";
    return row_side ? "row_enc" : "col_enc";
}

void Model::init_encoder(const std::string& p, std::mt19937_64& rng) {
    const size_t h = static_cast<size_t>(config_.hidden);
    const size_t f = static_cast<size_t>(config_.ffn_dim());
    const size_t positions = static_cast<size_t>((config_.rows_per_bundle + 1) * config_.seq_len);
    params_.add(p + ".tok", ad::uniform(vocabs_.input.size(), h, 0.1, rng));
    params_.add(p + ".pos", ad::uniform(positions, h, 0.1, rng));
    params_.add(p + ".seg", ad::uniform(2, h, 0.1, rng));
    params_.add(p + ".ln0.g", ones(h));
    params_.add(p + ".ln0.b", zeros(h));
    for (int l = 0; l < config_.layers; ++l) {
        std::string q = p + ".l" + std::to_string(l);
        params_.add(q + ".qkv.w", ad::glorot(h, 3 * h, rng));
        params_.add(q + ".qkv.b", zeros(3 * h));
        params_.add(q + ".out.w", ad::glorot(h, h, rng));
        params_.add(q + ".out.b", zeros(h));
        params_.add(q + ".ln1.g", ones(h));
        params_.add(q + ".ln1.b", zeros(h));
        params_.add(q + ".ffn1.w", ad::glorot(h, f, rng));
        params_.add(q + ".ffn1.b", zeros(f));
        params_.add(q + ".ffn2.w", ad::glorot(f, h, rng));
        params_.add(q + ".ffn2.b", zeros(h));
        params_.add(q + ".ln2.g", ones(h));
        params_.add(q + ".ln2.b", zeros(h));
    }
}

void Model::init_conv(const std::string& p, int units, std::mt19937_64& rng) {
    const size_t h = static_cast<size_t>(config_.hidden);
    const size_t c = static_cast<size_t>(config_.conv_out());
    const size_t len = static_cast<size_t>(config_.seq_len);
    params_.add(p + ".unit.w", ad::glorot(len * h, c, rng));
    params_.add(p + ".unit.b", zeros(c));
    params_.add(p + ".pos.w", ad::glorot(static_cast<size_t>(units) * h, c, rng));
    params_.add(p + ".pos.b", zeros(c));
}

void Model::init_params() {
    std::mt19937_64 rng(config_.seed);
    const int width = 2 * config_.radius + 1;
    if (config_.use_context) {
        if (config_.shared_encoder) {
            init_encoder("enc", rng);
        } else {
            if (config_.use_rows) init_encoder("row_enc", rng);
            if (config_.use_cols) init_encoder("col_enc", rng);
        }
        if (config_.use_rows) init_conv("row_conv", width + 1, rng);
        if (config_.use_cols) init_conv("col_conv", width, rng);
    }
    const size_t hd = static_cast<size_t>(config_.decoder_hidden);
    const size_t ed = static_cast<size_t>(config_.embed_dim());
    const size_t a = static_cast<size_t>(config_.attn_dim());
    const size_t e = static_cast<size_t>(config_.token_dim());
    const size_t vs = vocabs_.sketch.size();
    const size_t vr = vocabs_.range.size();
    params_.add("dec.embed", ad::uniform(vs + vr + 1, ed, 0.1, rng));
    params_.add("dec.lstm.w", ad::glorot(ed + hd, 4 * hd, rng));
    DenseArray bias(1, 4 * hd);
    for (size_t i = hd; i < 2 * hd; ++i) bias[i] = 1.0;  // forget gate
    params_.add("dec.lstm.b", std::move(bias));
    size_t features = hd;
    for (auto [flag, name] : {std::pair{config_.has_header_bank(), "dec.att_h"}, {config_.has_data_bank(), "dec.att_d"}}) {
        if (!flag) continue;
        params_.add(std::string(name) + ".q", ad::glorot(hd, a, rng));
        params_.add(std::string(name) + ".k", ad::glorot(e, a, rng));
        params_.add(std::string(name) + ".v", ad::glorot(a, 1, rng));
        features += e;
    }
    if (config_.two_stage) {
        params_.add("dec.sketch.w", ad::glorot(features, vs, rng));
        params_.add("dec.sketch.b", zeros(vs));
        params_.add("dec.range.w", ad::glorot(features, vr, rng));
        params_.add("dec.range.b", zeros(vr));
    } else {
        params_.add("dec.joint.w", ad::glorot(features, vs + vr, rng));
        params_.add("dec.joint.b", zeros(vs + vr));
    }
}

// ---------------------------------------------------------------------------
// Encoder

BundleSet Model::bundles_for(const ContextWindow& window) const {
    if (window.radius != config_.radius) {
        throw DataError("context window radius " + std::to_string(window.radius) + " does not match model radius " +
                        std::to_string(config_.radius));
    }
    return build_bundles(window, vocabs_.input, config_.rows_per_bundle, static_cast<size_t>(config_.seq_len));
}

Var Model::run_encoder(Tape& tape, const std::string& p, const std::vector<Bundle>& bundles,
                       std::mt19937_64* rng) const {
    const size_t span = static_cast<size_t>((config_.rows_per_bundle + 1) * config_.seq_len);
    std::vector<int> ids, positions, segments;
    std::vector<uint8_t> mask;
    for (const auto& b : bundles) {
        if (b.ids.size() != span || b.segments.size() != span || b.mask.size() != span) {
            throw DataError("bundle " + std::to_string(b.index) + " has " + std::to_string(b.ids.size()) +
                            " positions, model expects " + std::to_string(span));
        }
        ids.insert(ids.end(), b.ids.begin(), b.ids.end());
        segments.insert(segments.end(), b.segments.begin(), b.segments.end());
        mask.insert(mask.end(), b.mask.begin(), b.mask.end());
        for (size_t i = 0; i < span; ++i) positions.push_back(static_cast<int>(i));
    }
    auto P = [&](const std::string& name) { return tape.param(params_, p + name); };
    const double rate = rng ? config_.dropout : 0.0;
    std::mt19937_64 unused;
    auto& drng = rng ? *rng : unused;

    Var x = ad::add(ad::add(ad::embedding(P(".tok"), ids), ad::embedding(P(".pos"), positions)),
                    ad::embedding(P(".seg"), segments));
    x = ad::dropout(ad::layer_norm(x, P(".ln0.g"), P(".ln0.b")), rate, drng);
    const size_t h = static_cast<size_t>(config_.hidden);
    for (int l = 0; l < config_.layers; ++l) {
        std::string q = ".l" + std::to_string(l);
        Var qkv = ad::add_bias(ad::matmul(x, P(q + ".qkv.w")), P(q + ".qkv.b"));
        Var att = ad::scaled_dot_attention(ad::slice_cols(qkv, 0, h), ad::slice_cols(qkv, h, h),
                                           ad::slice_cols(qkv, 2 * h, h), static_cast<size_t>(config_.heads), span, mask);
        att = ad::add_bias(ad::matmul(att, P(q + ".out.w")), P(q + ".out.b"));
        x = ad::layer_norm(ad::add(x, ad::dropout(att, rate, drng)), P(q + ".ln1.g"), P(q + ".ln1.b"));
        Var f = ad::gelu(ad::add_bias(ad::matmul(x, P(q + ".ffn1.w")), P(q + ".ffn1.b")));
        f = ad::add_bias(ad::matmul(f, P(q + ".ffn2.w")), P(q + ".ffn2.b"));
        x = ad::layer_norm(ad::add(x, ad::dropout(f, rate, drng)), P(q + ".ln2.g"), P(q + ".ln2.b"));
    }
    return x;
}

Var Model::aggregate(Tape& tape, const std::string& p, Var x, size_t units) const {
    const size_t len = static_cast<size_t>(config_.seq_len);
    Var per_unit = ad::conv_1xL(x, tape.param(params_, p + ".unit.w"), tape.param(params_, p + ".unit.b"), units, len);
    Var per_pos = ad::conv_Kx1(x, tape.param(params_, p + ".pos.w"), tape.param(params_, p + ".pos.b"), units, len);
    return ad::concat_cols({ad::outer_add(per_unit, per_pos), x});
}

namespace {

std::vector<int> valid_rows(const std::vector<uint8_t>& mask, size_t begin, size_t end) {
    std::vector<int> out;
    for (size_t i = begin; i < end; ++i)
        if (mask[i]) out.push_back(static_cast<int>(i));
    return out;
}

}  // namespace

EncodedStates Model::encode(Tape& tape, const BundleSet& bundles, std::mt19937_64* rng) const {
    EncodedStates out;
    if (!config_.use_context) return out;
    if (bundles.radius != config_.radius || bundles.rows_per_bundle != config_.rows_per_bundle ||
        bundles.seq_len != config_.seq_len) {
        throw DataError("bundles built for D=" + std::to_string(bundles.radius) + " N=" +
                        std::to_string(bundles.rows_per_bundle) + " L=" + std::to_string(bundles.seq_len) +
                        " but the model expects D=" + std::to_string(config_.radius) + " N=" +
                        std::to_string(config_.rows_per_bundle) + " L=" + std::to_string(config_.seq_len));
    }
    const size_t width = static_cast<size_t>(2 * config_.radius + 1);
    const size_t len = static_cast<size_t>(config_.seq_len);
    const size_t span = static_cast<size_t>(config_.rows_per_bundle + 1) * len;
    const size_t member_rows = static_cast<size_t>(config_.rows_per_bundle) * len;
    const size_t n_bundles = width / static_cast<size_t>(config_.rows_per_bundle);
    if (bundles.row_bundles.size() != n_bundles || bundles.col_bundles.size() != n_bundles ||
        bundles.rows.size() != width || bundles.cols.size() != width) {
        throw DataError("bundle set does not cover the " + std::to_string(width) + "-wide window");
    }

    std::vector<Var> data_parts;
    if (config_.use_rows) {
        Var x = run_encoder(tape, encoder_prefix(true), bundles.row_bundles, rng);
        std::vector<Var> headers;
        std::vector<Var> grid;
        for (size_t b = 0; b < n_bundles; ++b) headers.push_back(ad::slice_rows(x, b * span, len));
        grid.push_back(ad::mean_of(headers));
        for (size_t b = 0; b < n_bundles; ++b) grid.push_back(ad::slice_rows(x, b * span + len, member_rows));
        std::vector<uint8_t> mask = bundles.header_row.mask;
        for (const auto& r : bundles.rows) mask.insert(mask.end(), r.mask.begin(), r.mask.end());
        Var e = aggregate(tape, "row_conv", ad::mask_rows(ad::concat_rows(grid), mask), width + 1);
        auto header_idx = valid_rows(mask, 0, len);
        auto data_idx = valid_rows(mask, len, mask.size());
        if (!header_idx.empty()) {
            out.header_bank = ad::embedding(e, header_idx);
            out.header_tokens = header_idx.size();
        }
        if (!data_idx.empty()) {
            data_parts.push_back(ad::embedding(e, data_idx));
            out.data_tokens += data_idx.size();
        }
    }
    if (config_.use_cols) {
        // The shared header column H_c only serves as bundle context here; its
        // data-role copy is the member C_0 of the middle bundle.
        Var x = run_encoder(tape, encoder_prefix(false), bundles.col_bundles, rng);
        std::vector<Var> grid;
        for (size_t b = 0; b < n_bundles; ++b) grid.push_back(ad::slice_rows(x, b * span + len, member_rows));
        std::vector<uint8_t> mask;
        for (const auto& c : bundles.cols) mask.insert(mask.end(), c.mask.begin(), c.mask.end());
        Var e = aggregate(tape, "col_conv", ad::mask_rows(ad::concat_rows(grid), mask), width);
        auto idx = valid_rows(mask, 0, mask.size());
        if (!idx.empty()) {
            data_parts.push_back(ad::embedding(e, idx));
            out.data_tokens += idx.size();
        }
    }
    if (!data_parts.empty()) out.data_bank = data_parts.size() == 1 ? data_parts[0] : ad::concat_rows(data_parts);
    return out;
}

// ---------------------------------------------------------------------------
// Decoder

struct Model::DecoderContext {
    struct Bank {
        bool wanted = false;
        std::optional<Var> values;
        std::optional<Var> keys;
        std::vector<uint8_t> mask;
        std::string prefix;
    };
    Bank header;
    Bank data;
};

Model::DecoderContext Model::decoder_context(Tape& tape, const EncodedStates& states) const {
    DecoderContext ctx;
    auto fill = [&](DecoderContext::Bank& bank, bool wanted, const std::optional<Var>& values, const char* prefix) {
        bank.wanted = wanted;
        bank.prefix = prefix;
        if (!wanted || !values) return;
        bank.values = *values;
        bank.keys = ad::matmul(*values, tape.param(params_, bank.prefix + ".k"));
        bank.mask.assign(values->rows(), 1);
    };
    fill(ctx.header, config_.has_header_bank(), states.header_bank, "dec.att_h");
    fill(ctx.data, config_.has_data_bank(), states.data_bank, "dec.att_d");
    return ctx;
}

Var Model::output_features(Tape& tape, const DecoderContext& ctx, Var h) const {
    std::vector<Var> parts{h};
    for (const auto* bank : {&ctx.header, &ctx.data}) {
        if (!bank->wanted) continue;
        if (!bank->values) {
            parts.push_back(tape.constant(DenseArray(h.rows(), static_cast<size_t>(config_.token_dim()))));
            continue;
        }
        Var q = ad::matmul(h, tape.param(params_, bank->prefix + ".q"));
        parts.push_back(ad::additive_attention(q, *bank->keys, *bank->values, tape.param(params_, bank->prefix + ".v"),
                                               bank->mask));
    }
    return parts.size() == 1 ? h : ad::concat_cols(parts);
}

GoldIds Model::gold_ids(const FormulaIR& gold) const {
    try {
        gold.validate();
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("malformed gold formula: ") + e.what());
    }
    GoldIds out;
    auto stream = gold.tokens();
    for (size_t i = 0; i < stream.size(); ++i) {
        bool sketch_stage = i < gold.sketch.size();
        const auto& vocab = sketch_stage ? vocabs_.sketch : vocabs_.range;
        auto id = vocab.find(stream[i]);
        if (!id || (sketch_stage && vocab.unk_id() && *id == *vocab.unk_id())) {
            throw DataError("gold token '" + stream[i] + "' is not in the " + (sketch_stage ? "sketch" : "range") +
                            " vocabulary");
        }
        (sketch_stage ? out.sketch : out.range).push_back(*id);
    }
    return out;
}

Var Model::loss(Tape& tape, const EncodedStates& states, const GoldIds& gold, std::mt19937_64* rng) const {
    if (gold.sketch.empty() || gold.range.empty()) throw DataError("gold stream must contain both stages");
    const size_t ns = gold.sketch.size();
    const size_t nr = gold.range.size();
    const size_t steps = ns + nr;
    const int vs = static_cast<int>(vocabs_.sketch.size());
    const double rate = rng ? config_.dropout : 0.0;
    std::mt19937_64 unused;
    auto& drng = rng ? *rng : unused;

    std::vector<int> joint;
    for (int id : gold.sketch) joint.push_back(id);
    for (int id : gold.range) joint.push_back(vs + id);
    std::vector<int> inputs{go_id_};
    inputs.insert(inputs.end(), joint.begin(), joint.end() - 1);

    auto ctx = decoder_context(tape, states);
    Var emb = ad::dropout(ad::embedding(tape.param(params_, "dec.embed"), inputs), rate, drng);
    const size_t hd = static_cast<size_t>(config_.decoder_hidden);
    ad::LstmState st{tape.constant(DenseArray(1, hd)), tape.constant(DenseArray(1, hd))};
    Var w = tape.param(params_, "dec.lstm.w");
    Var b = tape.param(params_, "dec.lstm.b");
    std::vector<Var> hs;
    for (size_t t = 0; t < steps; ++t) {
        st = ad::lstm_step(ad::slice_rows(emb, t, 1), st, w, b);
        hs.push_back(st.h);
    }
    Var features = ad::dropout(output_features(tape, ctx, ad::concat_rows(hs)), rate, drng);

    if (!config_.two_stage) {
        Var logits = ad::add_bias(ad::matmul(features, tape.param(params_, "dec.joint.w")),
                                  tape.param(params_, "dec.joint.b"));
        return ad::cross_entropy(logits, joint);
    }
    Var ls = ad::add_bias(ad::matmul(ad::slice_rows(features, 0, ns), tape.param(params_, "dec.sketch.w")),
                          tape.param(params_, "dec.sketch.b"));
    Var lr = ad::add_bias(ad::matmul(ad::slice_rows(features, ns, nr), tape.param(params_, "dec.range.w")),
                          tape.param(params_, "dec.range.b"));
    double total = static_cast<double>(steps);
    return ad::add(ad::scale(ad::cross_entropy(ls, gold.sketch), static_cast<double>(ns) / total),
                   ad::scale(ad::cross_entropy(lr, gold.range), static_cast<double>(nr) / total));
}

Var Model::example_loss(Tape& tape, const BundleSet& bundles, const GoldIds& gold, std::mt19937_64* rng) const {
    return loss(tape, encode(tape, bundles, rng), gold, rng);
}

// ---------------------------------------------------------------------------
// Search

namespace {

struct Hyp {
    std::vector<std::string> tokens;
    int last_input = 0;
    StreamGrammar::State state;
    double log_prob = 0.0;
    // Smallest beam width whose search contains this hypothesis.
    size_t level = 1;
    std::vector<double> h;
    std::vector<double> c;
};

struct Candidate {
    double score;
    size_t hyp;
    int id;
    const std::string* token;
};

void log_softmax_row(const double* in, size_t n, std::vector<double>& out) {
    double mx = *std::max_element(in, in + n);
    double z = 0;
    for (size_t i = 0; i < n; ++i) z += std::exp(in[i] - mx);
    double lse = mx + std::log(z);
    out.resize(n);
    for (size_t i = 0; i < n; ++i) out[i] = in[i] - lse;
}

}  // namespace

DecodeResult Model::beam_decode(const BundleSet& bundles, int beam) const {
    if (beam < 1) throw std::invalid_argument("beam size must be at least 1");
    return search(bundles, beam, false);
}

DecodeResult Model::greedy_decode(const BundleSet& bundles) const { return search(bundles, 1, true); }

DecodeResult Model::search(const BundleSet& bundles, int beam, bool greedy) const {
    Tape tape(false);
    auto states = encode(tape, bundles, nullptr);
    auto ctx = decoder_context(tape, states);
    const size_t hd = static_cast<size_t>(config_.decoder_hidden);
    const size_t vs = vocabs_.sketch.size();
    const size_t vr = vocabs_.range.size();
    const size_t max_steps = static_cast<size_t>(config_.max_sketch_tokens + 2 + 7 * config_.max_ranges);
    Var embed = tape.param(params_, "dec.embed");
    Var lw = tape.param(params_, "dec.lstm.w");
    Var lb = tape.param(params_, "dec.lstm.b");

    std::vector<Hyp> live(1);
    live[0].last_input = go_id_;
    live[0].h.assign(hd, 0.0);
    live[0].c.assign(hd, 0.0);
    std::vector<Prediction> finished;
    size_t rejected = 0;
    const size_t width = static_cast<size_t>(beam);

    auto finish = [&](Hyp&& hyp) {
        Prediction p;
        p.log_prob = hyp.log_prob;
        p.tokens = std::move(hyp.tokens);
        try {
            p.ir = ir_from_tokens(p.tokens);
            finished.push_back(std::move(p));
        } catch (const std::exception&) {
            ++rejected;
        }
    };

    for (size_t step = 0; step < max_steps && !live.empty(); ++step) {
        // One decoder step per hypothesis: batching rows through one GEMM would
        // make a hypothesis's score depend on the beam width in the last bits.
        const size_t k = live.size();
        std::vector<DenseArray> next_h(k), next_c(k), logits(k);
        for (size_t i = 0; i < k; ++i) {
            Var h0 = tape.constant(DenseArray::from({1, hd}, live[i].h));
            Var c0 = tape.constant(DenseArray::from({1, hd}, live[i].c));
            auto st = ad::lstm_step(ad::embedding(embed, {live[i].last_input}), {h0, c0}, lw, lb);
            Var features = output_features(tape, ctx, st.h);
            const char* head = !config_.two_stage ? "dec.joint"
                               : live[i].state.stage == DecodeStage::Sketch ? "dec.sketch"
                                                                             : "dec.range";
            Var lg = ad::add_bias(ad::matmul(features, tape.param(params_, std::string(head) + ".w")),
                                  tape.param(params_, std::string(head) + ".b"));
            next_h[i] = st.h.value();
            next_c[i] = st.c.value();
            logits[i] = lg.value();
        }

        std::vector<Candidate> cands;
        std::vector<double> logp;
        for (size_t i = 0; i < k; ++i) {
            bool sketch_stage = live[i].state.stage == DecodeStage::Sketch;
            size_t offset = 0;
            if (config_.two_stage) {
                log_softmax_row(logits[i].data(), logits[i].size(), logp);
            } else {
                std::vector<double> full;
                log_softmax_row(logits[i].data(), logits[i].size(), full);
                offset = sketch_stage ? 0 : vs;
                logp.assign(full.begin() + static_cast<long>(offset),
                            full.begin() + static_cast<long>(offset + (sketch_stage ? vs : vr)));
            }
            const auto& vocab = sketch_stage ? vocabs_.sketch : vocabs_.range;
            for (size_t j = 0; j < logp.size(); ++j) {
                int id = static_cast<int>(j);
                bool ok = sketch_stage ? grammar_.allows_sketch(live[i].state, id)
                                       : grammar_.allows_range(live[i].state, id);
                if (ok) cands.push_back({live[i].log_prob + logp[j], i, id, &vocab.token(id)});
            }
        }
        if (cands.empty()) break;

        auto better = [&](const Candidate& a, const Candidate& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.hyp != b.hyp) {
                const auto& ta = live[a.hyp].tokens;
                const auto& tb = live[b.hyp].tokens;
                if (ta != tb) return ta < tb;
            }
            return *a.token < *b.token;
        };
        // Slot j takes the best unused expansion of hypotheses at level <= j, so
        // the level <= j part of this search is exactly the width-j search and
        // widening the beam only adds hypotheses.
        std::vector<std::pair<size_t, size_t>> picks;  // candidate index, level
        if (greedy) {
            auto best = std::min_element(cands.begin(), cands.end(), better);
            picks.emplace_back(static_cast<size_t>(best - cands.begin()), 1);
        } else {
            std::sort(cands.begin(), cands.end(), better);
            std::vector<uint8_t> used(cands.size(), 0);
            size_t first_free = 0;
            for (size_t level = 1; level <= width; ++level) {
                while (first_free < cands.size() && used[first_free]) ++first_free;
                for (size_t n = first_free; n < cands.size(); ++n) {
                    if (used[n] || live[cands[n].hyp].level > level) continue;
                    used[n] = 1;
                    picks.emplace_back(n, level);
                    break;
                }
            }
        }

        std::vector<Hyp> next;
        for (auto [n, level] : picks) {
            const auto& cd = cands[n];
            const Hyp& parent = live[cd.hyp];
            Hyp child;
            child.level = level;
            child.tokens = parent.tokens;
            child.tokens.push_back(*cd.token);
            child.log_prob = cd.score;
            bool sketch_stage = parent.state.stage == DecodeStage::Sketch;
            child.state = sketch_stage ? grammar_.advance_sketch(parent.state, cd.id)
                                       : grammar_.advance_range(parent.state, cd.id);
            child.last_input = sketch_stage ? cd.id : static_cast<int>(vs) + cd.id;
            if (child.state.finished) {
                finish(std::move(child));
                continue;
            }
            child.h = next_h[cd.hyp].vec();
            child.c = next_c[cd.hyp].vec();
            next.push_back(std::move(child));
        }
        live = std::move(next);

        if (finished.size() >= width && !live.empty()) {
            std::sort(finished.begin(), finished.end(), prediction_before);
            double worst_kept = finished[width - 1].log_prob;
            double best_live = live.front().log_prob;
            for (const auto& hyp : live) best_live = std::max(best_live, hyp.log_prob);
            if (best_live < worst_kept) break;
        }
    }

    DecodeResult out;
    std::sort(finished.begin(), finished.end(), prediction_before);
    if (finished.size() > width) finished.resize(width);
    out.predictions = std::move(finished);
    if (out.predictions.empty()) out.diagnostic = "no hypothesis finished within the length limits";
    if (rejected) out.diagnostic += (out.diagnostic.empty() ? "" : "; ") + std::to_string(rejected) + " malformed streams dropped";
    return out;
}

// ---------------------------------------------------------------------------
// Persistence

nlohmann::json Model::checkpoint_meta() const {
    return {{"kind", "sheetcoder-model"}, {"config", config_.to_json()}, {"vocabs", vocabs_.to_json()}};
}

void Model::save(const std::filesystem::path& path, bool include_optimizer_state) const {
    write_checkpoint(path, checkpoint_meta(), params_, include_optimizer_state);
}

Model Model::load(const std::filesystem::path& path) {
    auto data = read_checkpoint(path);
    if (data.meta.value("kind", "") != "sheetcoder-model") {
        throw CheckpointError(path.string() + ": not a model checkpoint");
    }
    ModelConfig config;
    VocabSet vocabs;
    try {
        config = ModelConfig::from_json(data.meta.at("config"));
        vocabs = VocabSet::from_json(data.meta.at("vocabs"));
    } catch (const std::exception& e) {
        throw CheckpointError(path.string() + ": bad config echo: " + e.what());
    }
    Model model(config, std::move(vocabs));
    for (const auto& [name, p] : model.params_.all()) {
        if (!data.params.contains(name)) {
            throw CheckpointError(path.string() + ": checkpoint/config mismatch: missing parameter '" + name + "'");
        }
        const auto& stored = data.params.get(name);
        if (stored.shape() != p.value.shape()) {
            throw CheckpointError(path.string() + ": checkpoint/config mismatch: parameter '" + name + "' has shape " +
                                  stored.shape_string() + ", config implies " + p.value.shape_string());
        }
    }
    if (data.params.all().size() != model.params_.all().size()) {
        for (const auto& [name, _] : data.params.all()) {
            if (!model.params_.contains(name)) {
                throw CheckpointError(path.string() + ": checkpoint/config mismatch: unexpected parameter '" + name + "'");
            }
        }
    }
    model.params_ = std::move(data.params);
    return model;
}

}  // namespace sheetcoder
