#include "sheetcoder/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace sheetcoder::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

namespace {

// exp-based tanh; libm's expm1 path dominates the profile otherwise. Absolute
// error stays near machine epsilon.
inline double tanh_fast(double x) {
    double ax = std::abs(x);
    if (ax > 20.0) return std::copysign(1.0, x);
    double t = std::exp(-2.0 * ax);
    return std::copysign((1.0 - t) / (1.0 + t), x);
}

MatMap as_mat(DenseArray& a) {
    return MatMap(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}

ConstMatMap as_mat(const DenseArray& a) {
    return ConstMatMap(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
    throw ShapeError(std::string(op) + ": shape mismatch " + detail);
}

std::string shapes(const DenseArray& a, const DenseArray& b) {
    return a.shape_string() + " vs " + b.shape_string();
}

Tape& tape_of(Var a) {
    if (!a.tape) throw std::invalid_argument("operation on an unbound variable");
    return *a.tape;
}

Tape& tape_of(Var a, Var b) {
    if (a.tape != b.tape || !a.tape) throw std::invalid_argument("operands live on different tapes");
    return *a.tape;
}

}  // namespace

// ---------------------------------------------------------------------------
// DenseArray

DenseArray::DenseArray(std::vector<size_t> shape, double fill) : shape_(std::move(shape)) {
    size_t n = shape_.empty() ? 0 : 1;
    for (auto d : shape_) n *= d;
    data_.assign(n, fill);
}

DenseArray DenseArray::from(std::vector<size_t> shape, std::vector<double> data) {
    DenseArray a;
    size_t n = shape.empty() ? 0 : 1;
    for (auto d : shape) n *= d;
    if (n != data.size()) {
        throw ShapeError("DenseArray: data length " + std::to_string(data.size()) +
                         " does not match shape product " + std::to_string(n));
    }
    a.shape_ = std::move(shape);
    a.data_ = std::move(data);
    return a;
}

double DenseArray::item() const {
    if (size() != 1) throw ShapeError("item() on array of shape " + shape_string());
    return data_[0];
}

std::string DenseArray::shape_string() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << ']';
    return os.str();
}

bool DenseArray::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void DenseArray::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void DenseArray::reshape(std::vector<size_t> shape) {
    size_t n = shape.empty() ? 0 : 1;
    for (auto d : shape) n *= d;
    if (n != data_.size()) throw ShapeError("reshape " + shape_string() + " to incompatible shape");
    shape_ = std::move(shape);
}

// ---------------------------------------------------------------------------
// Tape

const DenseArray& Var::value() const { return tape->value(id); }
const DenseArray& Var::grad() const { return tape->grad(id); }

Var Tape::constant(DenseArray value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, static_cast<uint32_t>(nodes_.size() - 1)};
}

Var Tape::param(const ParamStore& store, const std::string& name) {
    if (auto it = params_.find(name); it != params_.end()) return {this, it->second};
    Node n;
    n.external = &store.get(name);
    n.requires_grad = record_;
    nodes_.push_back(std::move(n));
    auto id = static_cast<uint32_t>(nodes_.size() - 1);
    params_.emplace(name, id);
    return {this, id};
}

Var Tape::push(DenseArray value, std::vector<uint32_t> inputs, Backward backward) {
    Node n;
    n.value = std::move(value);
#ifndef NDEBUG
    if (!n.value.all_finite()) throw std::runtime_error("non-finite value produced on tape");
#endif
    if (record_) {
        n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                      [&](uint32_t i) { return nodes_[i].requires_grad; });
        if (n.requires_grad) {
            n.inputs = std::move(inputs);
            n.backward = std::move(backward);
        }
    }
    nodes_.push_back(std::move(n));
    return {this, static_cast<uint32_t>(nodes_.size() - 1)};
}

const DenseArray& Tape::value(uint32_t id) const {
    const auto& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
}

const DenseArray& Tape::grad(uint32_t id) const { return nodes_.at(id).grad; }

DenseArray& Tape::grad_buffer(uint32_t id) {
    auto& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = DenseArray(value(id).shape(), 0.0);
    return n.grad;
}

void Tape::backward(Var loss) {
    if (nodes_.empty() || loss.tape != this) throw std::logic_error("backward called before any forward pass");
    if (!record_) throw std::logic_error("backward on a tape that does not record");
    if (backward_done_) throw std::logic_error("backward already ran on this tape");
    if (value(loss.id).size() != 1) {
        throw ShapeError("backward: loss must be a scalar, got " + value(loss.id).shape_string());
    }
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad_buffer(loss.id)[0] = 1.0;
    for (uint32_t id = loss.id + 1; id-- > 0;) {
        auto& n = nodes_[id];
        if (!n.backward || n.grad.size() == 0) continue;
        n.backward(*this, id);
    }
}

Gradients Tape::param_grads() const {
    Gradients out;
    for (const auto& [name, id] : params_) {
        const auto& n = nodes_[id];
        out[name] = n.grad.size() ? n.grad : DenseArray(n.external->shape(), 0.0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const auto& A = a.value();
    const auto& B = b.value();
    if (A.cols() != B.rows()) shape_fail("matmul", shapes(A, B));
    DenseArray C(A.rows(), B.cols());
    as_mat(C).noalias() = as_mat(A) * as_mat(B);
    return t.push(std::move(C), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        if (t.requires_grad(a)) as_mat(t.grad_buffer(a)).noalias() += as_mat(G) * as_mat(t.value(b)).transpose();
        if (t.requires_grad(b)) as_mat(t.grad_buffer(b)).noalias() += as_mat(t.value(a)).transpose() * as_mat(G);
    });
}

namespace {

template <typename Fwd, typename Bwd>
Var binary_elementwise(const char* name, Var a, Var b, Fwd fwd, Bwd bwd) {
    Tape& t = tape_of(a, b);
    const auto& A = a.value();
    const auto& B = b.value();
    if (A.rows() != B.rows() || A.cols() != B.cols()) shape_fail(name, shapes(A, B));
    DenseArray C(A.shape());
    for (size_t i = 0; i < C.size(); ++i) C[i] = fwd(A[i], B[i]);
    return t.push(std::move(C), {a.id, b.id}, [a = a.id, b = b.id, bwd](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        const auto& A = t.value(a);
        const auto& B = t.value(b);
        DenseArray* ga = t.requires_grad(a) ? &t.grad_buffer(a) : nullptr;
        DenseArray* gb = t.requires_grad(b) ? &t.grad_buffer(b) : nullptr;
        for (size_t i = 0; i < G.size(); ++i) {
            auto [da, db] = bwd(A[i], B[i], G[i]);
            if (ga) (*ga)[i] += da;
            if (gb) (*gb)[i] += db;
        }
    });
}

template <typename Fwd, typename Bwd>
Var unary_elementwise(Var a, Fwd fwd, Bwd bwd) {
    Tape& t = tape_of(a);
    const auto& A = a.value();
    DenseArray C(A.shape());
    for (size_t i = 0; i < C.size(); ++i) C[i] = fwd(A[i]);
    // bwd(x, y, g) -> dx
    return t.push(std::move(C), {a.id}, [a = a.id, bwd](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        const auto& X = t.value(a);
        const auto& Y = t.value(self);
        auto& ga = t.grad_buffer(a);
        for (size_t i = 0; i < G.size(); ++i) ga[i] += bwd(X[i], Y[i], G[i]);
    });
}

}  // namespace

Var add(Var a, Var b) {
    return binary_elementwise("add", a, b, [](double x, double y) { return x + y; },
                              [](double, double, double g) { return std::pair{g, g}; });
}

Var sub(Var a, Var b) {
    return binary_elementwise("sub", a, b, [](double x, double y) { return x - y; },
                              [](double, double, double g) { return std::pair{g, -g}; });
}

Var mul(Var a, Var b) {
    return binary_elementwise("mul", a, b, [](double x, double y) { return x * y; },
                              [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Var scale(Var a, double s) {
    return unary_elementwise(a, [s](double x) { return x * s; }, [s](double, double, double g) { return g * s; });
}

Var tanh(Var a) {
    return unary_elementwise(a, [](double x) { return tanh_fast(x); },
                             [](double, double y, double g) { return g * (1.0 - y * y); });
}

Var sigmoid(Var a) {
    return unary_elementwise(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                             [](double, double y, double g) { return g * y * (1.0 - y); });
}

Var relu(Var a) {
    return unary_elementwise(a, [](double x) { return x > 0 ? x : 0.0; },
                             [](double x, double, double g) { return x > 0 ? g : 0.0; });
}

Var gelu(Var a) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double c = 0.044715;
    return unary_elementwise(
        a, [](double x) { return 0.5 * x * (1.0 + tanh_fast(k * (x + c * x * x * x))); },
        [](double x, double, double g) {
            double th = tanh_fast(k * (x + c * x * x * x));
            double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * k * (1.0 + 3.0 * c * x * x);
            return g * d;
        });
}

Var add_bias(Var a, Var bias) {
    Tape& t = tape_of(a, bias);
    const auto& A = a.value();
    const auto& B = bias.value();
    if (B.rows() != 1 || B.cols() != A.cols()) shape_fail("add_bias", shapes(A, B));
    DenseArray C = A;
    as_mat(C).rowwise() += as_mat(B).row(0);
    return t.push(std::move(C), {a.id, bias.id}, [a = a.id, b = bias.id](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        if (t.requires_grad(a)) as_mat(t.grad_buffer(a)) += as_mat(G);
        if (t.requires_grad(b)) as_mat(t.grad_buffer(b)).row(0) += as_mat(G).colwise().sum();
    });
}

// ---------------------------------------------------------------------------
// Structural ops

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    Tape& t = tape_of(parts[0]);
    size_t rows = parts[0].rows();
    size_t cols = 0;
    std::vector<uint32_t> ids;
    for (const auto& p : parts) {
        tape_of(parts[0], p);
        if (p.rows() != rows) shape_fail("concat_cols", shapes(parts[0].value(), p.value()));
        cols += p.cols();
        ids.push_back(p.id);
    }
    DenseArray C(rows, cols);
    size_t off = 0;
    for (const auto& p : parts) {
        as_mat(C).middleCols(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(p.cols())) = as_mat(p.value());
        off += p.cols();
    }
    return t.push(std::move(C), ids, [ids](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        size_t off = 0;
        for (auto id : ids) {
            auto w = static_cast<Eigen::Index>(t.value(id).cols());
            if (t.requires_grad(id)) as_mat(t.grad_buffer(id)) += as_mat(G).middleCols(static_cast<Eigen::Index>(off), w);
            off += static_cast<size_t>(w);
        }
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    Tape& t = tape_of(parts[0]);
    size_t cols = parts[0].cols();
    size_t rows = 0;
    std::vector<uint32_t> ids;
    for (const auto& p : parts) {
        tape_of(parts[0], p);
        if (p.cols() != cols) shape_fail("concat_rows", shapes(parts[0].value(), p.value()));
        rows += p.rows();
        ids.push_back(p.id);
    }
    DenseArray C(rows, cols);
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data(), p.value().data() + p.value().size(), C.data() + off);
        off += p.value().size();
    }
    return t.push(std::move(C), ids, [ids](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        size_t off = 0;
        for (auto id : ids) {
            size_t n = t.value(id).size();
            if (t.requires_grad(id)) {
                auto& g = t.grad_buffer(id);
                for (size_t i = 0; i < n; ++i) g[i] += G[off + i];
            }
            off += n;
        }
    });
}

Var slice_rows(Var a, size_t begin, size_t count) {
    Tape& t = tape_of(a);
    const auto& A = a.value();
    if (begin + count > A.rows()) {
        shape_fail("slice_rows", A.shape_string() + " rows [" + std::to_string(begin) + ", " +
                                     std::to_string(begin + count) + ")");
    }
    size_t cols = A.cols();
    DenseArray C(count, cols);
    std::copy(A.data() + begin * cols, A.data() + (begin + count) * cols, C.data());
    return t.push(std::move(C), {a.id}, [a = a.id, begin, cols](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        auto& ga = t.grad_buffer(a);
        for (size_t i = 0; i < G.size(); ++i) ga[begin * cols + i] += G[i];
    });
}

Var slice_cols(Var a, size_t begin, size_t count) {
    Tape& t = tape_of(a);
    const auto& A = a.value();
    if (begin + count > A.cols()) {
        shape_fail("slice_cols", A.shape_string() + " cols [" + std::to_string(begin) + ", " +
                                     std::to_string(begin + count) + ")");
    }
    DenseArray C(A.rows(), count);
    as_mat(C) = as_mat(A).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
    return t.push(std::move(C), {a.id}, [a = a.id, begin, count](Tape& t, uint32_t self) {
        as_mat(t.grad_buffer(a)).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) +=
            as_mat(t.grad(self));
    });
}

Var reshape(Var a, size_t rows, size_t cols) {
    Tape& t = tape_of(a);
    const auto& A = a.value();
    if (rows * cols != A.size()) shape_fail("reshape", A.shape_string() + " to " + std::to_string(rows) + "x" + std::to_string(cols));
    DenseArray C = A;
    C.reshape({rows, cols});
    return t.push(std::move(C), {a.id}, [a = a.id](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        auto& ga = t.grad_buffer(a);
        for (size_t i = 0; i < G.size(); ++i) ga[i] += G[i];
    });
}

Var embedding(Var table, const std::vector<int>& ids) {
    Tape& t = tape_of(table);
    const auto& T = table.value();
    size_t h = T.cols();
    DenseArray C(ids.size(), h);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<size_t>(ids[i]) >= T.rows()) {
            throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                                    std::to_string(T.rows()) + " rows");
        }
        std::copy(T.data() + ids[i] * h, T.data() + (ids[i] + 1) * h, C.data() + i * h);
    }
    return t.push(std::move(C), {table.id}, [tb = table.id, ids, h](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        auto& g = t.grad_buffer(tb);
        for (size_t i = 0; i < ids.size(); ++i) {
            double* dst = g.data() + static_cast<size_t>(ids[i]) * h;
            const double* src = G.data() + i * h;
            for (size_t k = 0; k < h; ++k) dst[k] += src[k];
        }
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Tape& t = tape_of(x, gamma);
    tape_of(x, beta);
    const auto& X = x.value();
    size_t n = X.rows(), d = X.cols();
    if (gamma.value().size() != d || beta.value().size() != d) {
        shape_fail("layer_norm", shapes(X, gamma.value()));
    }
    auto xhat = std::make_shared<DenseArray>(n, d);
    auto inv_std = std::make_shared<std::vector<double>>(n);
    DenseArray Y(n, d);
    const double* g = gamma.value().data();
    const double* b = beta.value().data();
    for (size_t r = 0; r < n; ++r) {
        const double* row = X.data() + r * d;
        double mu = std::accumulate(row, row + d, 0.0) / static_cast<double>(d);
        double var = 0;
        for (size_t k = 0; k < d; ++k) var += (row[k] - mu) * (row[k] - mu);
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (size_t k = 0; k < d; ++k) {
            double xh = (row[k] - mu) * is;
            xhat->at(r, k) = xh;
            Y.at(r, k) = xh * g[k] + b[k];
        }
    }
    return t.push(std::move(Y), {x.id, gamma.id, beta.id},
                  [x = x.id, gm = gamma.id, bt = beta.id, xhat, inv_std, n, d](Tape& t, uint32_t self) {
                      const auto& G = t.grad(self);
                      const double* g = t.value(gm).data();
                      if (t.requires_grad(gm) || t.requires_grad(bt)) {
                          auto* dg = t.requires_grad(gm) ? t.grad_buffer(gm).data() : nullptr;
                          auto* db = t.requires_grad(bt) ? t.grad_buffer(bt).data() : nullptr;
                          for (size_t r = 0; r < n; ++r) {
                              for (size_t k = 0; k < d; ++k) {
                                  if (dg) dg[k] += G.at(r, k) * xhat->at(r, k);
                                  if (db) db[k] += G.at(r, k);
                              }
                          }
                      }
                      if (!t.requires_grad(x)) return;
                      auto& dx = t.grad_buffer(x);
                      std::vector<double> dxh(d);
                      for (size_t r = 0; r < n; ++r) {
                          double m1 = 0, m2 = 0;
                          for (size_t k = 0; k < d; ++k) {
                              dxh[k] = G.at(r, k) * g[k];
                              m1 += dxh[k];
                              m2 += dxh[k] * xhat->at(r, k);
                          }
                          m1 /= static_cast<double>(d);
                          m2 /= static_cast<double>(d);
                          for (size_t k = 0; k < d; ++k) {
                              dx.at(r, k) += (*inv_std)[r] * (dxh[k] - m1 - xhat->at(r, k) * m2);
                          }
                      }
                  });
}

namespace {

// Softmax of `row` restricted to mask; writes zeros when nothing is unmasked.
void masked_softmax_row(const double* in, double* out, size_t n, const uint8_t* mask) {
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < n; ++j)
        if (!mask || mask[j]) mx = std::max(mx, in[j]);
    if (!std::isfinite(mx)) {
        std::fill(out, out + n, 0.0);
        return;
    }
    double z = 0;
    for (size_t j = 0; j < n; ++j) {
        out[j] = (!mask || mask[j]) ? std::exp(in[j] - mx) : 0.0;
        z += out[j];
    }
    for (size_t j = 0; j < n; ++j) out[j] /= z;
}

}  // namespace

Var softmax(Var x, const std::vector<uint8_t>* mask) {
    Tape& t = tape_of(x);
    const auto& X = x.value();
    size_t n = X.rows(), d = X.cols();
    if (mask && mask->size() != d) shape_fail("softmax", "mask of " + std::to_string(mask->size()) + " for " + X.shape_string());
    DenseArray Y(n, d);
    for (size_t r = 0; r < n; ++r) masked_softmax_row(X.data() + r * d, Y.data() + r * d, d, mask ? mask->data() : nullptr);
    return t.push(std::move(Y), {x.id}, [x = x.id, n, d](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        const auto& Y = t.value(self);
        auto& dx = t.grad_buffer(x);
        for (size_t r = 0; r < n; ++r) {
            double dot = 0;
            for (size_t k = 0; k < d; ++k) dot += G.at(r, k) * Y.at(r, k);
            for (size_t k = 0; k < d; ++k) dx.at(r, k) += Y.at(r, k) * (G.at(r, k) - dot);
        }
    });
}

Var cross_entropy(Var logits, const std::vector<int>& targets) {
    Tape& t = tape_of(logits);
    const auto& X = logits.value();
    size_t n = X.rows(), v = X.cols();
    if (targets.size() != n) shape_fail("cross_entropy", X.shape_string() + " with " + std::to_string(targets.size()) + " targets");
    if (n == 0) throw ShapeError("cross_entropy: no rows");
    auto probs = std::make_shared<DenseArray>(n, v);
    double loss = 0;
    for (size_t r = 0; r < n; ++r) {
        if (targets[r] < 0 || static_cast<size_t>(targets[r]) >= v) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " outside " + std::to_string(v) + " classes");
        }
        const double* row = X.data() + r * v;
        double mx = *std::max_element(row, row + v);
        double z = 0;
        for (size_t k = 0; k < v; ++k) z += std::exp(row[k] - mx);
        double lse = mx + std::log(z);
        for (size_t k = 0; k < v; ++k) probs->at(r, k) = std::exp(row[k] - lse);
        loss += lse - row[targets[r]];
    }
    loss /= static_cast<double>(n);
    return t.push(DenseArray::scalar(loss), {logits.id}, [x = logits.id, probs, targets, n, v](Tape& t, uint32_t self) {
        double g = t.grad(self)[0] / static_cast<double>(n);
        auto& dx = t.grad_buffer(x);
        for (size_t r = 0; r < n; ++r) {
            for (size_t k = 0; k < v; ++k) dx.at(r, k) += g * probs->at(r, k);
            dx.at(r, static_cast<size_t>(targets[r])) -= g;
        }
    });
}

Var sum(Var a) {
    Tape& t = tape_of(a);
    const auto& A = a.value();
    double s = std::accumulate(A.vec().begin(), A.vec().end(), 0.0);
    return t.push(DenseArray::scalar(s), {a.id}, [a = a.id](Tape& t, uint32_t self) {
        double g = t.grad(self)[0];
        auto& ga = t.grad_buffer(a);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Var mean(Var a) {
    size_t n = a.value().size();
    if (n == 0) throw ShapeError("mean of an empty array");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var mean_of(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("mean_of: no inputs");
    Var acc = parts[0];
    for (size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
    return parts.size() == 1 ? acc : scale(acc, 1.0 / static_cast<double>(parts.size()));
}

Var mask_rows(Var a, const std::vector<uint8_t>& mask) {
    Tape& t = tape_of(a);
    const auto& A = a.value();
    if (mask.size() != A.rows()) shape_fail("mask_rows", A.shape_string() + " with mask of " + std::to_string(mask.size()));
    DenseArray C = A;
    size_t d = A.cols();
    for (size_t r = 0; r < A.rows(); ++r)
        if (!mask[r]) std::fill(C.data() + r * d, C.data() + (r + 1) * d, 0.0);
    return t.push(std::move(C), {a.id}, [a = a.id, mask, d](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        auto& ga = t.grad_buffer(a);
        for (size_t r = 0; r < mask.size(); ++r)
            if (mask[r])
                for (size_t k = 0; k < d; ++k) ga[r * d + k] += G[r * d + k];
    });
}

Var dropout(Var a, double rate, std::mt19937_64& rng) {
    if (rate <= 0.0) return a;
    if (rate >= 1.0) throw std::invalid_argument("dropout rate must be below 1");
    Tape& t = tape_of(a);
    const auto& A = a.value();
    auto keep = std::make_shared<std::vector<double>>(A.size());
    double s = 1.0 / (1.0 - rate);
    DenseArray C(A.shape());
    for (size_t i = 0; i < A.size(); ++i) {
        (*keep)[i] = uniform01(rng) >= rate ? s : 0.0;
        C[i] = A[i] * (*keep)[i];
    }
    return t.push(std::move(C), {a.id}, [a = a.id, keep](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        auto& ga = t.grad_buffer(a);
        for (size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * (*keep)[i];
    });
}

Var outer_add(Var unit, Var pos) {
    Tape& t = tape_of(unit, pos);
    const auto& U = unit.value();
    const auto& P = pos.value();
    if (U.cols() != P.cols()) shape_fail("outer_add", shapes(U, P));
    size_t nu = U.rows(), nl = P.rows(), c = U.cols();
    DenseArray C(nu * nl, c);
    for (size_t u = 0; u < nu; ++u)
        for (size_t l = 0; l < nl; ++l)
            for (size_t k = 0; k < c; ++k) C.at(u * nl + l, k) = U.at(u, k) + P.at(l, k);
    return t.push(std::move(C), {unit.id, pos.id}, [u_id = unit.id, p_id = pos.id, nu, nl, c](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        DenseArray* gu = t.requires_grad(u_id) ? &t.grad_buffer(u_id) : nullptr;
        DenseArray* gp = t.requires_grad(p_id) ? &t.grad_buffer(p_id) : nullptr;
        for (size_t u = 0; u < nu; ++u)
            for (size_t l = 0; l < nl; ++l)
                for (size_t k = 0; k < c; ++k) {
                    double g = G.at(u * nl + l, k);
                    if (gu) gu->at(u, k) += g;
                    if (gp) gp->at(l, k) += g;
                }
    });
}

Var permute_units(Var x, size_t units, size_t len) {
    Tape& t = tape_of(x);
    const auto& X = x.value();
    if (X.rows() != units * len) shape_fail("permute_units", X.shape_string() + " for " + std::to_string(units) + "x" + std::to_string(len));
    size_t h = X.cols();
    DenseArray C(X.rows(), h);
    for (size_t u = 0; u < units; ++u)
        for (size_t l = 0; l < len; ++l)
            std::copy(X.data() + (u * len + l) * h, X.data() + (u * len + l + 1) * h, C.data() + (l * units + u) * h);
    return t.push(std::move(C), {x.id}, [x = x.id, units, len, h](Tape& t, uint32_t self) {
        const auto& G = t.grad(self);
        auto& gx = t.grad_buffer(x);
        for (size_t u = 0; u < units; ++u)
            for (size_t l = 0; l < len; ++l)
                for (size_t k = 0; k < h; ++k) gx[(u * len + l) * h + k] += G[(l * units + u) * h + k];
    });
}

Var conv_1xL(Var x, Var weight, Var bias, size_t units, size_t len) {
    const auto& X = x.value();
    if (X.rows() != units * len || weight.rows() != len * X.cols()) {
        shape_fail("conv_1xL", X.shape_string() + " with kernel " + weight.value().shape_string() + " for " +
                                   std::to_string(units) + " units of length " + std::to_string(len));
    }
    return add_bias(matmul(reshape(x, units, len * X.cols()), weight), bias);
}

Var conv_Kx1(Var x, Var weight, Var bias, size_t units, size_t len) {
    const auto& X = x.value();
    if (X.rows() != units * len || weight.rows() != units * X.cols()) {
        shape_fail("conv_Kx1", X.shape_string() + " with kernel " + weight.value().shape_string() + " for " +
                                   std::to_string(units) + " units of length " + std::to_string(len));
    }
    size_t h = X.cols();
    return add_bias(matmul(reshape(permute_units(x, units, len), len, units * h), weight), bias);
}

// ---------------------------------------------------------------------------
// Attention

Var scaled_dot_attention(Var q, Var k, Var v, size_t heads, size_t block, const std::vector<uint8_t>& key_mask) {
    Tape& t = tape_of(q, k);
    tape_of(q, v);
    const auto& Q = q.value();
    const auto& K = k.value();
    const auto& V = v.value();
    size_t rows = Q.rows(), width = Q.cols();
    if (K.rows() != rows || V.rows() != rows || K.cols() != width || V.cols() != width || heads == 0 ||
        width % heads != 0 || block == 0 || rows % block != 0 || key_mask.size() != rows) {
        shape_fail("scaled_dot_attention", Q.shape_string() + " " + K.shape_string() + " " + V.shape_string() +
                                               " heads=" + std::to_string(heads) + " block=" + std::to_string(block));
    }
    size_t dh = width / heads;
    size_t blocks = rows / block;
    double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    auto probs = std::make_shared<std::vector<RowMat>>(blocks * heads);
    DenseArray O(rows, width);
    auto Qm = as_mat(Q);
    auto Km = as_mat(K);
    auto Vm = as_mat(V);
    auto Om = as_mat(O);
    auto B = static_cast<Eigen::Index>(block);
    auto D = static_cast<Eigen::Index>(dh);
    for (size_t b = 0; b < blocks; ++b) {
        auto r0 = static_cast<Eigen::Index>(b * block);
        const uint8_t* mask = key_mask.data() + b * block;
        for (size_t h = 0; h < heads; ++h) {
            auto c0 = static_cast<Eigen::Index>(h * dh);
            RowMat S = (Qm.block(r0, c0, B, D) * Km.block(r0, c0, B, D).transpose()) * inv;
            RowMat P(B, B);
            for (Eigen::Index i = 0; i < B; ++i) masked_softmax_row(S.row(i).data(), P.row(i).data(), block, mask);
            Om.block(r0, c0, B, D).noalias() = P * Vm.block(r0, c0, B, D);
            (*probs)[b * heads + h] = std::move(P);
        }
    }
    return t.push(std::move(O), {q.id, k.id, v.id},
                  [q = q.id, k = k.id, v = v.id, probs, heads, block, blocks, dh, inv](Tape& t, uint32_t self) {
                      auto G = as_mat(t.grad(self));
                      auto Qm = as_mat(t.value(q));
                      auto Km = as_mat(t.value(k));
                      auto Vm = as_mat(t.value(v));
                      auto* gq = t.requires_grad(q) ? &t.grad_buffer(q) : nullptr;
                      auto* gk = t.requires_grad(k) ? &t.grad_buffer(k) : nullptr;
                      auto* gv = t.requires_grad(v) ? &t.grad_buffer(v) : nullptr;
                      auto B = static_cast<Eigen::Index>(block);
                      auto D = static_cast<Eigen::Index>(dh);
                      for (size_t b = 0; b < blocks; ++b) {
                          auto r0 = static_cast<Eigen::Index>(b * block);
                          for (size_t h = 0; h < heads; ++h) {
                              auto c0 = static_cast<Eigen::Index>(h * dh);
                              const RowMat& P = (*probs)[b * heads + h];
                              auto Gb = G.block(r0, c0, B, D);
                              if (gv) as_mat(*gv).block(r0, c0, B, D).noalias() += P.transpose() * Gb;
                              if (!gq && !gk) continue;
                              RowMat dP = Gb * Vm.block(r0, c0, B, D).transpose();
                              RowMat dS(B, B);
                              for (Eigen::Index i = 0; i < B; ++i) {
                                  double dot = P.row(i).dot(dP.row(i));
                                  dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
                              }
                              dS *= inv;
                              if (gq) as_mat(*gq).block(r0, c0, B, D).noalias() += dS * Km.block(r0, c0, B, D);
                              if (gk) as_mat(*gk).block(r0, c0, B, D).noalias() += dS.transpose() * Qm.block(r0, c0, B, D);
                          }
                      }
                  });
}

namespace {

std::vector<size_t> valid_positions(const std::vector<uint8_t>& mask) {
    std::vector<size_t> out;
    for (size_t j = 0; j < mask.size(); ++j)
        if (mask[j]) out.push_back(j);
    return out;
}

void check_additive(const DenseArray& Q, const DenseArray& K, const DenseArray& W, const std::vector<uint8_t>& mask) {
    if (Q.cols() != K.cols() || W.size() != K.cols() || mask.size() != K.rows()) {
        shape_fail("additive_attention", Q.shape_string() + " " + K.shape_string() + " w" + W.shape_string() +
                                             " mask " + std::to_string(mask.size()));
    }
}

// weights over the valid positions only: T x |valid|
RowMat additive_weights(const DenseArray& Q, const DenseArray& K, const DenseArray& W, const std::vector<size_t>& valid) {
    size_t T = Q.rows(), A = Q.cols();
    RowMat alpha(static_cast<Eigen::Index>(T), static_cast<Eigen::Index>(valid.size()));
    std::vector<double> scores(valid.size());
    for (size_t t = 0; t < T; ++t) {
        const double* qt = Q.data() + t * A;
        for (size_t j = 0; j < valid.size(); ++j) {
            const double* kj = K.data() + valid[j] * A;
            double s = 0;
            for (size_t a = 0; a < A; ++a) s += W[a] * tanh_fast(kj[a] + qt[a]);
            scores[j] = s;
        }
        if (!valid.empty()) masked_softmax_row(scores.data(), alpha.row(static_cast<Eigen::Index>(t)).data(), valid.size(), nullptr);
    }
    return alpha;
}

}  // namespace

DenseArray additive_attention_weights(const DenseArray& queries, const DenseArray& keys, const DenseArray& w,
                                      const std::vector<uint8_t>& mask) {
    check_additive(queries, keys, w, mask);
    auto valid = valid_positions(mask);
    RowMat alpha = additive_weights(queries, keys, w, valid);
    DenseArray out(queries.rows(), keys.rows());
    for (size_t t = 0; t < queries.rows(); ++t)
        for (size_t j = 0; j < valid.size(); ++j) out.at(t, valid[j]) = alpha(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j));
    return out;
}

Var additive_attention(Var queries, Var keys, Var values, Var w, const std::vector<uint8_t>& mask) {
    Tape& t = tape_of(queries, keys);
    tape_of(queries, values);
    tape_of(queries, w);
    const auto& Q = queries.value();
    const auto& K = keys.value();
    const auto& V = values.value();
    check_additive(Q, K, w.value(), mask);
    if (V.rows() != K.rows()) shape_fail("additive_attention", "values " + V.shape_string() + " for keys " + K.shape_string());
    auto valid = std::make_shared<std::vector<size_t>>(valid_positions(mask));
    auto alpha = std::make_shared<RowMat>(additive_weights(Q, K, w.value(), *valid));
    size_t T = Q.rows(), E = V.cols();
    DenseArray C(T, E);
    for (size_t tt = 0; tt < T; ++tt)
        for (size_t j = 0; j < valid->size(); ++j) {
            double a = (*alpha)(static_cast<Eigen::Index>(tt), static_cast<Eigen::Index>(j));
            const double* vj = V.data() + (*valid)[j] * E;
            double* ct = C.data() + tt * E;
            for (size_t e = 0; e < E; ++e) ct[e] += a * vj[e];
        }
    return t.push(std::move(C), {queries.id, keys.id, values.id, w.id},
                  [qi = queries.id, ki = keys.id, vi = values.id, wi = w.id, valid, alpha](Tape& t, uint32_t self) {
                      const auto& G = t.grad(self);
                      const auto& Q = t.value(qi);
                      const auto& K = t.value(ki);
                      const auto& V = t.value(vi);
                      const auto& W = t.value(wi);
                      size_t T = Q.rows(), A = Q.cols(), E = V.cols(), n = valid->size();
                      auto* gq = t.requires_grad(qi) ? &t.grad_buffer(qi) : nullptr;
                      auto* gk = t.requires_grad(ki) ? &t.grad_buffer(ki) : nullptr;
                      auto* gv = t.requires_grad(vi) ? &t.grad_buffer(vi) : nullptr;
                      auto* gw = t.requires_grad(wi) ? &t.grad_buffer(wi) : nullptr;
                      std::vector<double> dalpha(n), ds(n);
                      for (size_t tt = 0; tt < T; ++tt) {
                          const double* gt = G.data() + tt * E;
                          double dot = 0;
                          for (size_t j = 0; j < n; ++j) {
                              const double* vj = V.data() + (*valid)[j] * E;
                              double a = (*alpha)(static_cast<Eigen::Index>(tt), static_cast<Eigen::Index>(j));
                              double d = 0;
                              for (size_t e = 0; e < E; ++e) d += gt[e] * vj[e];
                              dalpha[j] = d;
                              dot += a * d;
                              if (gv) {
                                  double* dv = gv->data() + (*valid)[j] * E;
                                  for (size_t e = 0; e < E; ++e) dv[e] += a * gt[e];
                              }
                          }
                          if (!gq && !gk && !gw) continue;
                          const double* qt = Q.data() + tt * A;
                          for (size_t j = 0; j < n; ++j) {
                              double a = (*alpha)(static_cast<Eigen::Index>(tt), static_cast<Eigen::Index>(j));
                              double sj = a * (dalpha[j] - dot);
                              if (sj == 0.0) continue;
                              const double* kj = K.data() + (*valid)[j] * A;
                              for (size_t c = 0; c < A; ++c) {
                                  double u = tanh_fast(kj[c] + qt[c]);
                                  double gpre = sj * W[c] * (1.0 - u * u);
                                  if (gq) (*gq)[tt * A + c] += gpre;
                                  if (gk) (*gk)[(*valid)[j] * A + c] += gpre;
                                  if (gw) (*gw)[c] += sj * u;
                              }
                          }
                      }
                  });
}

LstmState lstm_step(Var x, LstmState state, Var weight, Var bias) {
    size_t hidden = state.h.cols();
    if (weight.rows() != x.cols() + hidden || weight.cols() != 4 * hidden) {
        shape_fail("lstm_step", "input " + x.value().shape_string() + " hidden " + state.h.value().shape_string() +
                                    " weight " + weight.value().shape_string());
    }
    Var z = add_bias(matmul(concat_cols({x, state.h}), weight), bias);
    Var i = sigmoid(slice_cols(z, 0, hidden));
    Var f = sigmoid(slice_cols(z, hidden, hidden));
    Var g = tanh(slice_cols(z, 2 * hidden, hidden));
    Var o = sigmoid(slice_cols(z, 3 * hidden, hidden));
    Var c = add(mul(f, state.c), mul(i, g));
    Var h = mul(o, tanh(c));
    return {h, c};
}

// ---------------------------------------------------------------------------
// Parameters

DenseArray& ParamStore::add(const std::string& name, DenseArray init) {
    if (contains(name)) throw std::invalid_argument("parameter '" + name + "' already exists");
    Param p;
    p.m = DenseArray(init.shape(), 0.0);
    p.v = DenseArray(init.shape(), 0.0);
    p.value = std::move(init);
    return params_.emplace(name, std::move(p)).first->second.value;
}

const DenseArray& ParamStore::get(const std::string& name) const { return param(name).value; }
DenseArray& ParamStore::get(const std::string& name) { return param(name).value; }

Param& ParamStore::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
}

const Param& ParamStore::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
}

size_t ParamStore::total_size() const {
    size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
}

void adam_step(ParamStore& store, const Gradients& grads, const AdamOptions& opts) {
    store.set_step(store.step() + 1);
    double t = static_cast<double>(store.step());
    double c1 = 1.0 - std::pow(opts.beta1, t);
    double c2 = 1.0 - std::pow(opts.beta2, t);
    for (const auto& [name, g] : grads) {
        Param& p = store.param(name);
        if (g.size() != p.value.size()) {
            throw ShapeError("adam_step: gradient " + g.shape_string() + " for parameter '" + name + "' of shape " +
                             p.value.shape_string());
        }
        for (size_t i = 0; i < g.size(); ++i) {
            p.m[i] = opts.beta1 * p.m[i] + (1.0 - opts.beta1) * g[i];
            p.v[i] = opts.beta2 * p.v[i] + (1.0 - opts.beta2) * g[i] * g[i];
            double mhat = p.m[i] / c1;
            double vhat = p.v[i] / c2;
            p.value[i] -= opts.lr * mhat / (std::sqrt(vhat) + opts.eps);
        }
    }
}

double global_norm(const Gradients& grads) {
    double s = 0;
    for (const auto& [_, g] : grads)
        for (double v : g.vec()) s += v * v;
    return std::sqrt(s);
}

double clip_global_norm(Gradients& grads, double max_norm) {
    double norm = global_norm(grads);
    if (norm > max_norm && norm > 0) {
        double f = max_norm / norm;
        for (auto& [_, g] : grads)
            for (auto& v : g.values()) v *= f;
    }
    return norm;
}

void accumulate(Gradients& into, const Gradients& from, double weight) {
    for (const auto& [name, g] : from) {
        auto it = into.find(name);
        if (it == into.end()) {
            DenseArray scaled = g;
            for (auto& v : scaled.values()) v *= weight;
            into.emplace(name, std::move(scaled));
            continue;
        }
        if (it->second.size() != g.size()) throw ShapeError("accumulate: gradient shape mismatch for '" + name + "'");
        for (size_t i = 0; i < g.size(); ++i) it->second[i] += weight * g[i];
    }
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

DenseArray uniform(size_t rows, size_t cols, double limit, std::mt19937_64& rng) {
    DenseArray a(rows, cols);
    for (auto& v : a.values()) v = (2.0 * uniform01(rng) - 1.0) * limit;
    return a;
}

DenseArray glorot(size_t rows, size_t cols, std::mt19937_64& rng) {
    return uniform(rows, cols, std::sqrt(6.0 / static_cast<double>(rows + cols)), rng);
}

}  // namespace sheetcoder::ad
