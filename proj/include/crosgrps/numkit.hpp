#pragma once

// Dense row-major matrices and a tape-free reverse-mode differentiation graph.
//
// Every differentiable op returns a Var whose node keeps shared ownership of
// its parents, so a graph lives exactly as long as its output handle. The
// graph is rebuilt on every forward pass.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <iostream>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "crosgrps/error.hpp"

namespace crosgrps::num {

class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill)
    { }

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values))
    {
        if (values_.size() != rows_ * cols_) {
            throw DimensionError("matrix " + shape_of(rows_, cols_) + " built from " +
                                 std::to_string(values_.size()) + " values");
        }
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows)
    {
        std::size_t r = rows.size();
        std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<double> values;
        values.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw DimensionError("ragged initializer for matrix");
            }
            values.insert(values.end(), row.begin(), row.end());
        }
        return Matrix(r, c, std::move(values));
    }

    static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, 0.0); }
    static Matrix ones(std::size_t rows, std::size_t cols) { return Matrix(rows, cols, 1.0); }

    static Matrix identity(std::size_t n)
    {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0;
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }

    bool same_shape(const Matrix& other) const
    {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    std::string shape() const { return shape_of(rows_, cols_); }

    void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

    bool operator==(const Matrix& other) const = default;

    static std::string shape_of(std::size_t r, std::size_t c)
    {
        return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

inline bool all_finite(const Matrix& m)
{
    return std::all_of(m.values().begin(), m.values().end(),
                       [](double v) { return std::isfinite(v); });
}

inline void require_finite(const Matrix& m, std::string_view op)
{
    if (!all_finite(m)) {
        throw NumericError("non-finite value produced by " + std::string(op));
    }
}

// Largest absolute elementwise difference; shapes must match.
inline double max_abs_diff(const Matrix& a, const Matrix& b)
{
    if (!a.same_shape(b)) {
        throw DimensionError("max_abs_diff: " + a.shape() + " vs " + b.shape());
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

namespace detail {

inline void require_same_shape(const Matrix& a, const Matrix& b, std::string_view op)
{
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
    }
}

inline std::atomic<std::size_t>& zero_norm_counter()
{
    static std::atomic<std::size_t> count{0};
    return count;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Plain (non-differentiable) kernels
// ---------------------------------------------------------------------------

inline Matrix matmul(const Matrix& a, const Matrix& b)
{
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: " + a.shape() + " x " + b.shape());
    }
    Matrix out(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* out_row = out.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) {
                continue;
            }
            const double* b_row = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    return out;
}

// a^T * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b)
{
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn: " + a.shape() + "^T x " + b.shape());
    }
    Matrix out(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k) {
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) {
                continue;
            }
            double* out_row = out.row(i).data();
            const double* b_row = b.row(k).data();
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out_row[j] += aki * b_row[j];
            }
        }
    }
    return out;
}

// a * b^T without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b)
{
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: " + a.shape() + " x " + b.shape() + "^T");
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* a_row = a.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* b_row = b.row(j).data();
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) {
                acc += a_row[k] * b_row[k];
            }
            out(i, j) = acc;
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& m)
{
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out(j, i) = m(i, j);
        }
    }
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b)
{
    detail::require_same_shape(a, b, "add");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += b[i];
    }
    return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b)
{
    detail::require_same_shape(a, b, "sub");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= b[i];
    }
    return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b)
{
    detail::require_same_shape(a, b, "hadamard");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= b[i];
    }
    return out;
}

inline Matrix scale(const Matrix& m, double s)
{
    Matrix out = m;
    for (double& v : out.values()) {
        v *= s;
    }
    return out;
}

inline Matrix concat_cols(std::span<const Matrix> parts)
{
    if (parts.empty()) {
        throw EmptyInputError("concat_cols: no inputs");
    }
    std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) {
            throw DimensionError("concat_cols: row mismatch " + parts.front().shape() + " vs " +
                                 p.shape());
        }
        cols += p.cols();
    }
    Matrix out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
            std::copy(p.row(r).begin(), p.row(r).end(), out.row(r).begin() + offset);
            offset += p.cols();
        }
    }
    return out;
}

inline Matrix relu(const Matrix& m)
{
    Matrix out = m;
    for (double& v : out.values()) {
        v = v > 0.0 ? v : 0.0;
    }
    return out;
}

inline void require_slope(double slope)
{
    if (!(slope > 0.0 && slope < 1.0)) {
        throw ConfigError("leaky_relu slope must lie in (0,1), got " + std::to_string(slope));
    }
}

inline Matrix leaky_relu(const Matrix& m, double slope)
{
    require_slope(slope);
    Matrix out = m;
    for (double& v : out.values()) {
        v = v >= 0.0 ? v : slope * v;
    }
    return out;
}

inline double sigmoid(double x)
{
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Matrix sigmoid(const Matrix& m)
{
    Matrix out = m;
    for (double& v : out.values()) {
        v = sigmoid(v);
    }
    return out;
}

// Row-wise softmax restricted to entries where mask > 0. Masked entries get
// probability 0; a row with no admissible entry is all zero.
inline Matrix masked_softmax_rows(const Matrix& m, const Matrix* mask)
{
    if (mask != nullptr) {
        detail::require_same_shape(m, *mask, "masked_softmax_rows");
    }
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        double max_v = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (mask == nullptr || (*mask)(i, j) > 0.0) {
                max_v = std::max(max_v, m(i, j));
            }
        }
        if (max_v == -std::numeric_limits<double>::infinity()) {
            continue;
        }
        double total = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) {
            if (mask == nullptr || (*mask)(i, j) > 0.0) {
                out(i, j) = std::exp(m(i, j) - max_v);
                total += out(i, j);
            }
        }
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out(i, j) /= total;
        }
    }
    return out;
}

inline Matrix softmax_rows(const Matrix& m) { return masked_softmax_rows(m, nullptr); }

inline Matrix mean_rows(const Matrix& m)
{
    if (m.rows() == 0) {
        throw EmptyInputError("mean_rows: matrix has zero rows");
    }
    Matrix out(1, m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            out(0, j) += m(i, j);
        }
    }
    const double inv = 1.0 / static_cast<double>(m.rows());
    for (double& v : out.values()) {
        v *= inv;
    }
    return out;
}

// Number of zero-norm inputs seen by cosine_similarity in this process.
inline std::size_t zero_norm_cosine_count() { return detail::zero_norm_counter().load(); }

// Zero-norm inputs yield 0. The first occurrence is logged to stderr; later
// ones are only counted.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v)
{
    if (u.size() != v.size()) {
        throw DimensionError("cosine_similarity: lengths " + std::to_string(u.size()) + " and " +
                             std::to_string(v.size()));
    }
    double dot = 0.0;
    double nu = 0.0;
    double nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) {
        if (detail::zero_norm_counter().fetch_add(1) == 0) {
            std::clog << "warning: cosine similarity of a zero-norm vector treated as 0\n";
        }
        return 0.0;
    }
    const double sim = dot / (std::sqrt(nu) * std::sqrt(nv));
    return std::clamp(sim, -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Differentiation graph
// ---------------------------------------------------------------------------

struct DiffNode;
using NodePtr = std::shared_ptr<DiffNode>;
using BackwardFn = std::function<void(DiffNode&)>;

struct DiffNode {
    Matrix value;
    Matrix grad;
    std::vector<NodePtr> parents;
    BackwardFn backward_fn;
    bool requires_grad = false;

    // Accumulate into grad if this node participates in differentiation.
    void accumulate(const Matrix& g)
    {
        if (!requires_grad) {
            return;
        }
        for (std::size_t i = 0; i < grad.size(); ++i) {
            grad[i] += g[i];
        }
    }
};

class Var {
public:
    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) { }

    const Matrix& value() const { return node_->value; }
    // Only meaningful on leaves (parameters); interior values are fixed once built.
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    Matrix& mutable_grad() { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }
    bool valid() const { return node_ != nullptr; }

    void zero_grad()
    {
        if (node_->requires_grad) {
            node_->grad.fill(0.0);
        }
    }

    DiffNode& node() const { return *node_; }
    const NodePtr& ptr() const { return node_; }

private:
    NodePtr node_;
};

inline Var parameter(Matrix value)
{
    require_finite(value, "parameter");
    auto node = std::make_shared<DiffNode>();
    node->grad = Matrix(value.rows(), value.cols());
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

inline Var constant(Matrix value)
{
    require_finite(value, "constant");
    auto node = std::make_shared<DiffNode>();
    node->value = std::move(value);
    return Var(std::move(node));
}

// Builds an interior node. The backward function receives the node and must
// push node.grad into each parent that requires grad.
inline Var make_node(Matrix value, std::vector<Var> parents, BackwardFn backward_fn,
                     std::string_view op)
{
    require_finite(value, op);
    auto node = std::make_shared<DiffNode>();
    bool needs = false;
    node->parents.reserve(parents.size());
    for (auto& p : parents) {
        needs = needs || p.requires_grad();
        node->parents.push_back(p.ptr());
    }
    node->requires_grad = needs;
    if (needs) {
        node->grad = Matrix(value.rows(), value.cols());
        node->backward_fn = std::move(backward_fn);
    }
    node->value = std::move(value);
    return Var(std::move(node));
}

// Reverse-topological traversal from a scalar output. Each reachable node is
// visited once; leaf grads accumulate across calls.
inline void backward(const Var& output)
{
    if (output.rows() != 1 || output.cols() != 1) {
        throw ContractError("backward: output must be 1x1, got " + output.value().shape());
    }
    if (!output.requires_grad()) {
        return;
    }
    std::vector<DiffNode*> order;
    std::unordered_set<DiffNode*> visited;
    std::vector<std::pair<DiffNode*, std::size_t>> stack;
    stack.emplace_back(&output.node(), 0);
    visited.insert(&output.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            DiffNode* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    output.node().grad(0, 0) = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) {
            (*it)->backward_fn(**it);
        }
    }
}

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b)
{
    return make_node(matmul(a.value(), b.value()), {a, b}, [](DiffNode& self) {
        DiffNode& pa = *self.parents[0];
        DiffNode& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.accumulate(matmul_nt(self.grad, pb.value));
        }
        if (pb.requires_grad) {
            pb.accumulate(matmul_tn(pa.value, self.grad));
        }
    }, "matmul");
}

inline Var add(const Var& a, const Var& b)
{
    return make_node(add(a.value(), b.value()), {a, b}, [](DiffNode& self) {
        self.parents[0]->accumulate(self.grad);
        self.parents[1]->accumulate(self.grad);
    }, "add");
}

inline Var sub(const Var& a, const Var& b)
{
    return make_node(sub(a.value(), b.value()), {a, b}, [](DiffNode& self) {
        self.parents[0]->accumulate(self.grad);
        self.parents[1]->accumulate(scale(self.grad, -1.0));
    }, "sub");
}

inline Var hadamard(const Var& a, const Var& b)
{
    return make_node(hadamard(a.value(), b.value()), {a, b}, [](DiffNode& self) {
        DiffNode& pa = *self.parents[0];
        DiffNode& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.accumulate(hadamard(self.grad, pb.value));
        }
        if (pb.requires_grad) {
            pb.accumulate(hadamard(self.grad, pa.value));
        }
    }, "hadamard");
}

inline Var scale(const Var& m, double s)
{
    return make_node(scale(m.value(), s), {m}, [s](DiffNode& self) {
        self.parents[0]->accumulate(scale(self.grad, s));
    }, "scale");
}

inline Var transpose(const Var& m)
{
    return make_node(transpose(m.value()), {m}, [](DiffNode& self) {
        self.parents[0]->accumulate(transpose(self.grad));
    }, "transpose");
}

inline Var concat_cols(const std::vector<Var>& parts)
{
    std::vector<Matrix> values;
    values.reserve(parts.size());
    for (const auto& p : parts) {
        values.push_back(p.value());
    }
    return make_node(concat_cols(values), parts, [](DiffNode& self) {
        std::size_t offset = 0;
        for (auto& parent : self.parents) {
            const std::size_t c = parent->value.cols();
            if (parent->requires_grad) {
                for (std::size_t r = 0; r < self.grad.rows(); ++r) {
                    for (std::size_t j = 0; j < c; ++j) {
                        parent->grad(r, j) += self.grad(r, offset + j);
                    }
                }
            }
            offset += c;
        }
    }, "concat_cols");
}

inline Var slice_cols(const Var& m, std::size_t start, std::size_t count)
{
    if (start + count > m.cols() || count == 0) {
        throw DimensionError("slice_cols: [" + std::to_string(start) + "," +
                             std::to_string(start + count) + ") out of " + m.value().shape());
    }
    Matrix out(m.rows(), count);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t j = 0; j < count; ++j) {
            out(r, j) = m.value()(r, start + j);
        }
    }
    return make_node(std::move(out), {m}, [start, count](DiffNode& self) {
        DiffNode& p = *self.parents[0];
        for (std::size_t r = 0; r < self.grad.rows(); ++r) {
            for (std::size_t j = 0; j < count; ++j) {
                p.grad(r, start + j) += self.grad(r, j);
            }
        }
    }, "slice_cols");
}

inline Var slice_rows(const Var& m, std::size_t start, std::size_t count)
{
    if (start + count > m.rows() || count == 0) {
        throw DimensionError("slice_rows: [" + std::to_string(start) + "," +
                             std::to_string(start + count) + ") out of " + m.value().shape());
    }
    const std::size_t c = m.cols();
    Matrix out(count, c);
    std::copy_n(m.value().values().begin() + static_cast<std::ptrdiff_t>(start * c), count * c,
                out.values().begin());
    return make_node(std::move(out), {m}, [start](DiffNode& self) {
        DiffNode& p = *self.parents[0];
        const std::size_t c = self.grad.cols();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            p.grad[start * c + i] += self.grad[i];
        }
    }, "slice_rows");
}

// Row lookup (embedding gather); repeated indices accumulate gradient.
inline Var gather_rows(const Var& m, std::vector<std::size_t> indices)
{
    if (indices.empty()) {
        throw EmptyInputError("gather_rows: no indices");
    }
    Matrix out(indices.size(), m.cols());
    for (std::size_t r = 0; r < indices.size(); ++r) {
        if (indices[r] >= m.rows()) {
            throw DimensionError("gather_rows: index " + std::to_string(indices[r]) +
                                 " out of " + m.value().shape());
        }
        std::copy(m.value().row(indices[r]).begin(), m.value().row(indices[r]).end(),
                  out.row(r).begin());
    }
    return make_node(std::move(out), {m}, [idx = std::move(indices)](DiffNode& self) {
        DiffNode& p = *self.parents[0];
        for (std::size_t r = 0; r < idx.size(); ++r) {
            for (std::size_t j = 0; j < self.grad.cols(); ++j) {
                p.grad(idx[r], j) += self.grad(r, j);
            }
        }
    }, "gather_rows");
}

// Zero the rows where keep[r] is false.
inline Var mask_rows(const Var& m, const std::vector<bool>& keep)
{
    if (keep.size() != m.rows()) {
        throw DimensionError("mask_rows: mask length " + std::to_string(keep.size()) + " for " +
                             m.value().shape());
    }
    Matrix out = m.value();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        if (!keep[r]) {
            std::fill(out.row(r).begin(), out.row(r).end(), 0.0);
        }
    }
    return make_node(std::move(out), {m}, [keep](DiffNode& self) {
        DiffNode& p = *self.parents[0];
        for (std::size_t r = 0; r < self.grad.rows(); ++r) {
            if (keep[r]) {
                for (std::size_t j = 0; j < self.grad.cols(); ++j) {
                    p.grad(r, j) += self.grad(r, j);
                }
            }
        }
    }, "mask_rows");
}

// m + row, with row (1 x cols) added to every row of m.
inline Var add_row(const Var& m, const Var& row)
{
    if (row.rows() != 1 || row.cols() != m.cols()) {
        throw DimensionError("add_row: " + m.value().shape() + " + " + row.value().shape());
    }
    Matrix out = m.value();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t j = 0; j < out.cols(); ++j) {
            out(r, j) += row.value()(0, j);
        }
    }
    return make_node(std::move(out), {m, row}, [](DiffNode& self) {
        self.parents[0]->accumulate(self.grad);
        DiffNode& pr = *self.parents[1];
        if (pr.requires_grad) {
            for (std::size_t r = 0; r < self.grad.rows(); ++r) {
                for (std::size_t j = 0; j < self.grad.cols(); ++j) {
                    pr.grad(0, j) += self.grad(r, j);
                }
            }
        }
    }, "add_row");
}

// m * row elementwise, broadcasting row (1 x cols) over every row of m.
inline Var mul_row(const Var& m, const Var& row)
{
    if (row.rows() != 1 || row.cols() != m.cols()) {
        throw DimensionError("mul_row: " + m.value().shape() + " * " + row.value().shape());
    }
    Matrix out = m.value();
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t j = 0; j < out.cols(); ++j) {
            out(r, j) *= row.value()(0, j);
        }
    }
    return make_node(std::move(out), {m, row}, [](DiffNode& self) {
        DiffNode& pm = *self.parents[0];
        DiffNode& pr = *self.parents[1];
        for (std::size_t r = 0; r < self.grad.rows(); ++r) {
            for (std::size_t j = 0; j < self.grad.cols(); ++j) {
                const double g = self.grad(r, j);
                if (pm.requires_grad) {
                    pm.grad(r, j) += g * pr.value(0, j);
                }
                if (pr.requires_grad) {
                    pr.grad(0, j) += g * pm.value(r, j);
                }
            }
        }
    }, "mul_row");
}

inline Var relu(const Var& m)
{
    return make_node(relu(m.value()), {m}, [](DiffNode& self) {
        DiffNode& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (p.value[i] > 0.0) {
                p.grad[i] += self.grad[i];
            }
        }
    }, "relu");
}

inline Var leaky_relu(const Var& m, double slope)
{
    return make_node(leaky_relu(m.value(), slope), {m}, [slope](DiffNode& self) {
        DiffNode& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            p.grad[i] += p.value[i] >= 0.0 ? self.grad[i] : slope * self.grad[i];
        }
    }, "leaky_relu");
}

inline Var sigmoid(const Var& m)
{
    return make_node(sigmoid(m.value()), {m}, [](DiffNode& self) {
        DiffNode& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double y = self.value[i];
            p.grad[i] += self.grad[i] * y * (1.0 - y);
        }
    }, "sigmoid");
}

namespace detail {

inline void softmax_backward(DiffNode& self)
{
    DiffNode& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < self.grad.cols(); ++j) {
            dot += self.value(i, j) * self.grad(i, j);
        }
        for (std::size_t j = 0; j < self.grad.cols(); ++j) {
            p.grad(i, j) += self.value(i, j) * (self.grad(i, j) - dot);
        }
    }
}

}  // namespace detail

inline Var softmax_rows(const Var& m)
{
    return make_node(softmax_rows(m.value()), {m}, detail::softmax_backward, "softmax_rows");
}

// The mask is structural (not differentiated); masked entries carry zero
// probability and receive zero gradient.
inline Var masked_softmax_rows(const Var& m, const Matrix& mask)
{
    return make_node(masked_softmax_rows(m.value(), &mask), {m}, detail::softmax_backward,
                     "masked_softmax_rows");
}

inline Var mean_rows(const Var& m)
{
    return make_node(mean_rows(m.value()), {m}, [](DiffNode& self) {
        DiffNode& p = *self.parents[0];
        const double inv = 1.0 / static_cast<double>(p.value.rows());
        for (std::size_t r = 0; r < p.value.rows(); ++r) {
            for (std::size_t j = 0; j < p.value.cols(); ++j) {
                p.grad(r, j) += self.grad(0, j) * inv;
            }
        }
    }, "mean_rows");
}

inline Var sum(const Var& m)
{
    double total = 0.0;
    for (double v : m.value().values()) {
        total += v;
    }
    return make_node(Matrix(1, 1, total), {m}, [](DiffNode& self) {
        DiffNode& p = *self.parents[0];
        const double g = self.grad(0, 0);
        for (double& v : p.grad.values()) {
            v += g;
        }
    }, "sum");
}

// Per-row standardization (x - mean) / sqrt(var + eps), no affine part.
inline Var layer_norm_rows(const Var& m, double eps = 1e-5)
{
    const Matrix& x = m.value();
    const std::size_t n = x.cols();
    Matrix out(x.rows(), n);
    std::vector<double> inv_std(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double mean = 0.0;
        for (double v : x.row(r)) {
            mean += v;
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : x.row(r)) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            out(r, j) = (x(r, j) - mean) * inv_std[r];
        }
    }
    return make_node(std::move(out), {m}, [inv_std = std::move(inv_std)](DiffNode& self) {
        DiffNode& p = *self.parents[0];
        const std::size_t n = self.value.cols();
        for (std::size_t r = 0; r < self.value.rows(); ++r) {
            double mean_g = 0.0;
            double mean_gx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                mean_g += self.grad(r, j);
                mean_gx += self.grad(r, j) * self.value(r, j);
            }
            mean_g /= static_cast<double>(n);
            mean_gx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
                p.grad(r, j) +=
                    inv_std[r] * (self.grad(r, j) - mean_g - self.value(r, j) * mean_gx);
            }
        }
    }, "layer_norm_rows");
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return matmul(a, b); }

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

struct NamedVar {
    std::string name;
    Var var;
};

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;

    double max_rel_error() const
    {
        double worst = 0.0;
        for (const auto& e : entries) {
            worst = std::max(worst, e.max_rel_error);
        }
        return worst;
    }

    const GradCheckEntry* worst() const
    {
        const GradCheckEntry* w = nullptr;
        for (const auto& e : entries) {
            if (w == nullptr || e.max_rel_error > w->max_rel_error) {
                w = &e;
            }
        }
        return w;
    }
};

struct GradCheckOptions {
    double epsilon = 1e-6;
    // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
    // Central differences carry ~1e-10 absolute roundoff at epsilon 1e-6, so
    // gradients below the floor are compared on an absolute scale.
    double relative_floor = 1e-4;
    // 0 checks every entry; otherwise at most this many entries per parameter
    // (evenly strided).
    std::size_t max_entries_per_param = 0;
};

// Compares backward() against central differences for every entry of every
// parameter. `loss` must rebuild the graph from the current parameter values
// on each call and return a 1x1 Var.
inline GradCheckReport finite_diff_check(const std::function<Var()>& loss,
                                         std::span<const NamedVar> params,
                                         const GradCheckOptions& options = {})
{
    for (const auto& p : params) {
        Var v = p.var;
        v.zero_grad();
    }
    {
        Var out = loss();
        backward(out);
    }
    std::vector<Matrix> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        analytic.push_back(p.var.grad());
    }

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Var var = params[pi].var;
        Matrix& value = var.mutable_value();
        GradCheckEntry entry;
        entry.name = params[pi].name;
        std::size_t stride = 1;
        if (options.max_entries_per_param > 0 && value.size() > options.max_entries_per_param) {
            stride = (value.size() + options.max_entries_per_param - 1) /
                     options.max_entries_per_param;
        }
        for (std::size_t i = 0; i < value.size(); i += stride) {
            const double saved = value[i];
            value[i] = saved + options.epsilon;
            const double plus = loss().value()(0, 0);
            value[i] = saved - options.epsilon;
            const double minus = loss().value()(0, 0);
            value[i] = saved;
            const double numeric = (plus - minus) / (2.0 * options.epsilon);
            const double a = analytic[pi][i];
            const double abs_err = std::abs(a - numeric);
            const double denom =
                std::max({std::abs(a), std::abs(numeric), options.relative_floor});
            const double rel = abs_err / denom;
            entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
            if (rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_index = i;
                entry.analytic_at_worst = a;
                entry.numeric_at_worst = numeric;
            }
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace crosgrps::num
