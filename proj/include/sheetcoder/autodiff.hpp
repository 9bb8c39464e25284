#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace sheetcoder::ad {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Row-major array of doubles. Most ops view it as rows x cols where rows is
/// the leading dimension and cols the product of the rest.
class DenseArray {
public:
    DenseArray() = default;
    explicit DenseArray(std::vector<size_t> shape, double fill = 0.0);
    DenseArray(size_t rows, size_t cols, double fill = 0.0) : DenseArray(std::vector<size_t>{rows, cols}, fill) {}
    static DenseArray from(std::vector<size_t> shape, std::vector<double> data);
    static DenseArray scalar(double v) { return from({1, 1}, {v}); }

    const std::vector<size_t>& shape() const { return shape_; }
    size_t size() const { return data_.size(); }
    size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
    size_t cols() const { return shape_.empty() || rows() == 0 ? 0 : size() / rows(); }
    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    const std::vector<double>& vec() const { return data_; }
    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }
    double& at(size_t r, size_t c) { return data_[r * cols() + c]; }
    double at(size_t r, size_t c) const { return data_[r * cols() + c]; }
    double item() const;

    std::string shape_string() const;
    bool all_finite() const;
    void fill(double v);
    void reshape(std::vector<size_t> shape);

    bool operator==(const DenseArray&) const = default;

private:
    std::vector<size_t> shape_;
    std::vector<double> data_;
};

class ParamStore;
class Tape;

/// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    uint32_t id = 0;

    const DenseArray& value() const;
    const DenseArray& grad() const;
    size_t rows() const { return value().rows(); }
    size_t cols() const { return value().cols(); }
    bool valid() const { return tape != nullptr; }
};

using Gradients = std::map<std::string, DenseArray>;

/// Records every operation of one forward pass so that backward() can replay
/// them in exact reverse order. A tape created with record=false keeps only
/// values (inference).
class Tape {
public:
    using Backward = std::function<void(Tape&, uint32_t self)>;

    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(DenseArray value);
    /// Leaf bound to a stored parameter; repeated calls return the same node.
    Var param(const ParamStore& store, const std::string& name);

    Var push(DenseArray value, std::vector<uint32_t> inputs, Backward backward);

    const DenseArray& value(uint32_t id) const;
    const DenseArray& grad(uint32_t id) const;
    /// Gradient buffer of an input, allocated on first use.
    DenseArray& grad_buffer(uint32_t id);
    bool requires_grad(uint32_t id) const { return nodes_[id].requires_grad; }
    bool recording() const { return record_; }
    size_t size() const { return nodes_.size(); }

    void backward(Var loss);
    Gradients param_grads() const;

private:
    struct Node {
        DenseArray value;
        const DenseArray* external = nullptr;
        DenseArray grad;
        std::vector<uint32_t> inputs;
        Backward backward;
        bool requires_grad = false;
    };
    std::deque<Node> nodes_;  // stable references across push
    std::unordered_map<std::string, uint32_t> params_;
    bool record_;
    bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Operations. All take and return 2-D views (rows x cols).

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// a[m x n] + bias[1 x n] broadcast over rows.
Var add_bias(Var a, Var bias);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
/// tanh-approximation GELU.
Var gelu(Var a);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, size_t begin, size_t count);
Var slice_cols(Var a, size_t begin, size_t count);
Var reshape(Var a, size_t rows, size_t cols);
/// Gathers table rows: out[i] = table[ids[i]].
Var embedding(Var table, const std::vector<int>& ids);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Row-wise softmax; positions with mask 0 get weight 0. A row without any
/// unmasked position is all zeros.
Var softmax(Var x, const std::vector<uint8_t>* mask = nullptr);
/// Mean negative log-likelihood of targets under row-wise softmax(logits).
Var cross_entropy(Var logits, const std::vector<int>& targets);
Var sum(Var a);
Var mean(Var a);
Var mean_of(const std::vector<Var>& parts);
/// Multiplies row i by mask[i] (0 or 1).
Var mask_rows(Var a, const std::vector<uint8_t>& mask);
/// Inverted dropout; identity when rate == 0.
Var dropout(Var a, double rate, std::mt19937_64& rng);
/// out[u*L + l] = unit[u] + pos[l].
Var outer_add(Var unit, Var pos);
/// Reorders a (U*L) x H block from unit-major to position-major: out[l*U + u] = x[u*L + l].
Var permute_units(Var x, size_t units, size_t len);

/// Full-extent 1 x L convolution over a units x L x H activation stored as
/// (U*L) x H. weight is (L*H) x C, bias 1 x C; the result is U x C.
Var conv_1xL(Var x, Var weight, Var bias, size_t units, size_t len);
/// Full-extent K x 1 convolution (K = units) over the same layout; weight is
/// (U*H) x C and the result is L x C.
Var conv_Kx1(Var x, Var weight, Var bias, size_t units, size_t len);

/// Multi-head scaled dot-product self-attention applied independently to
/// consecutive blocks of `block` rows. key_mask has one entry per row.
Var scaled_dot_attention(Var q, Var k, Var v, size_t heads, size_t block, const std::vector<uint8_t>& key_mask);

/// Additive attention: score[t][j] = w . tanh(keys[j] + queries[t]) over the
/// positions with mask 1; returns weights-by-values, T x E. Rows with no
/// unmasked position yield zeros.
Var additive_attention(Var queries, Var keys, Var values, Var w, const std::vector<uint8_t>& mask);
/// Attention weights for inspection (no gradient).
DenseArray additive_attention_weights(const DenseArray& queries, const DenseArray& keys, const DenseArray& w,
                                      const std::vector<uint8_t>& mask);

struct LstmState {
    Var h;
    Var c;
};
/// One LSTM step for a batch of rows. weight is (in + hidden) x 4*hidden with
/// gate blocks ordered input, forget, candidate, output.
LstmState lstm_step(Var x, LstmState state, Var weight, Var bias);

// ---------------------------------------------------------------------------
// Parameters and optimisation

struct Param {
    DenseArray value;
    DenseArray m;
    DenseArray v;
};

class ParamStore {
public:
    DenseArray& add(const std::string& name, DenseArray init);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    const DenseArray& get(const std::string& name) const;
    DenseArray& get(const std::string& name);
    Param& param(const std::string& name);
    const Param& param(const std::string& name) const;
    const std::map<std::string, Param>& all() const { return params_; }
    std::map<std::string, Param>& all() { return params_; }
    size_t total_size() const;
    int64_t step() const { return step_; }
    void set_step(int64_t s) { step_ = s; }

private:
    std::map<std::string, Param> params_;
    int64_t step_ = 0;
};

struct AdamOptions {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam; parameters without a gradient entry are untouched.
void adam_step(ParamStore& store, const Gradients& grads, const AdamOptions& opts);

/// Rescales every gradient by max_norm / ||g|| when the global norm exceeds
/// max_norm. Returns the norm before clipping.
double clip_global_norm(Gradients& grads, double max_norm);
double global_norm(const Gradients& grads);
void accumulate(Gradients& into, const Gradients& from, double weight = 1.0);

/// Deterministic uniform draw in [0, 1) from a 64-bit engine.
double uniform01(std::mt19937_64& rng);
/// Glorot-style uniform initialisation with limit sqrt(6 / (fan_in + fan_out)).
DenseArray glorot(size_t rows, size_t cols, std::mt19937_64& rng);
DenseArray uniform(size_t rows, size_t cols, double limit, std::mt19937_64& rng);

}  // namespace sheetcoder::ad
