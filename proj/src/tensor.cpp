#include "mupmoe/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace mupmoe {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

std::atomic<std::uint64_t> g_next_id{1};

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> value,
                                       bool requires_grad) {
    if (shape_size(shape) != value.size()) {
        throw std::invalid_argument("tensor: shape " + shape_str(shape) + " holds " +
                                    std::to_string(shape_size(shape)) + " values, got " +
                                    std::to_string(value.size()));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

ConstMatMap as_mat(const detail::Node& n) {
    const std::size_t c = n.shape.empty() ? 1 : n.shape.back();
    return {n.value.data(), static_cast<Eigen::Index>(c ? n.value.size() / c : 0),
            static_cast<Eigen::Index>(c)};
}

MatMap as_mat(std::vector<double>& buf, std::size_t rows, std::size_t cols) {
    return {buf.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

void require_defined(const DiffTensor& t, const char* op) {
    require(t.defined(), std::string(op) + ": undefined tensor");
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

std::vector<double>& detail::Node::ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
}

// ---- DiffTensor -----------------------------------------------------------

DiffTensor DiffTensor::constant(Shape shape, std::vector<double> values) {
    return from_node(new_node(std::move(shape), std::move(values), false));
}

DiffTensor DiffTensor::variable(Shape shape, std::vector<double> values) {
    return from_node(new_node(std::move(shape), std::move(values), true));
}

DiffTensor DiffTensor::zeros(Shape shape, bool requires_grad) {
    std::vector<double> v(shape_size(shape), 0.0);
    return from_node(new_node(std::move(shape), std::move(v), requires_grad));
}

DiffTensor DiffTensor::scalar(double v, bool requires_grad) {
    return from_node(new_node(Shape{1}, {v}, requires_grad));
}

const Shape& DiffTensor::shape() const { return node_->shape; }
std::size_t DiffTensor::size() const { return node_->value.size(); }
std::size_t DiffTensor::dim(std::size_t i) const { return node_->shape.at(i); }

std::size_t DiffTensor::cols() const {
    return node_->shape.empty() ? 1 : node_->shape.back();
}

std::size_t DiffTensor::rows() const {
    const auto c = cols();
    return c ? size() / c : 0;
}

std::span<const double> DiffTensor::values() const { return node_->value; }
std::span<double> DiffTensor::mutable_values() { return node_->value; }

double DiffTensor::item() const {
    require(size() == 1, "item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
}

bool DiffTensor::requires_grad() const { return node_->requires_grad; }
bool DiffTensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> DiffTensor::grad() const { return node_->grad; }
std::span<double> DiffTensor::mutable_grad() { return node_->ensure_grad(); }

std::vector<double> DiffTensor::grad_or_zero() const {
    if (has_grad()) return node_->grad;
    return std::vector<double>(size(), 0.0);
}

void DiffTensor::zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void DiffTensor::clear_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
}

std::uint64_t DiffTensor::node_id() const { return node_->id; }

DiffTensor DiffTensor::detach() const {
    return from_node(new_node(node_->shape, node_->value, false));
}

DiffTensor detail::make_result(Shape shape, std::vector<double> value,
                               std::vector<DiffTensor> parents,
                               std::function<void(Node&)> backward) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    auto n = new_node(std::move(shape), std::move(value), rg);
    if (rg) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward);
    }
    return DiffTensor::from_node(std::move(n));
}

// ---- backward -------------------------------------------------------------

void backward(const DiffTensor& root) {
    require_defined(root, "backward");
    require(root.size() == 1,
            "backward: root must be scalar, got shape " + shape_str(root.shape()));
    if (!root.requires_grad()) return;

    // Iterative post-order DFS; reversed it is a valid reverse-topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.raw(), 0);
    seen.insert(root.raw());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior gradients belong to this pass only; leaves accumulate.
    for (auto* n : order) {
        if (n->backward) n->grad.assign(n->value.size(), 0.0);
    }
    root.raw()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward) n->backward(*n);
    }
}

// ---- primitives -----------------------------------------------------------

DiffTensor matmul(const DiffTensor& a, const DiffTensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    require(b.ndim() == 2, "matmul: right operand must be a matrix, got " + shape_str(b.shape()));
    require(a.cols() == b.dim(0), "matmul: inner extents differ: " + shape_str(a.shape()) +
                                      " * " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), p = b.dim(1);
    std::vector<double> out(m * p);
    as_mat(out, m, p).noalias() = as_mat(*a.raw()) * as_mat(*b.raw());
    Shape shape = a.shape();
    shape.back() = p;
    return detail::make_result(std::move(shape), std::move(out), {a, b},
                               [m, k, p](detail::Node& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        auto G = as_mat(self.grad, m, p);
        if (A.requires_grad)
            as_mat(A.ensure_grad(), m, k).noalias() += G * as_mat(B).transpose();
        if (B.requires_grad)
            as_mat(B.ensure_grad(), k, p).noalias() += as_mat(A).transpose() * G;
    });
}

namespace {

// y = x W^T with every element summed over k in ascending order, so a row's
// value does not depend on which other rows share the call.
void rowwise_product(const double* x, const double* w, double* y, std::size_t m,
                     std::size_t in, std::size_t out) {
    constexpr std::size_t kOutTile = 512, kInTile = 128;
    std::vector<double> wt(in * out);
    for (std::size_t o = 0; o < out; ++o)
        for (std::size_t k = 0; k < in; ++k) wt[k * out + o] = w[o * in + k];
    std::fill(y, y + m * out, 0.0);
    for (std::size_t o0 = 0; o0 < out; o0 += kOutTile) {
        const std::size_t o1 = std::min(out, o0 + kOutTile);
        for (std::size_t k0 = 0; k0 < in; k0 += kInTile) {
            const std::size_t k1 = std::min(in, k0 + kInTile);
            for (std::size_t r = 0; r < m; ++r) {
                double* yr = y + r * out;
                const double* xr = x + r * in;
                for (std::size_t k = k0; k < k1; ++k) {
                    const double a = xr[k];
                    const double* wk = wt.data() + k * out;
                    for (std::size_t o = o0; o < o1; ++o) yr[o] += a * wk[o];
                }
            }
        }
    }
}

DiffTensor linear_impl(const DiffTensor& x, const DiffTensor& weight, bool rowwise,
                       const char* name) {
    require_defined(x, name);
    require_defined(weight, name);
    require(weight.ndim() == 2, std::string(name) + ": weight must be a matrix, got " +
                                    shape_str(weight.shape()));
    require(x.cols() == weight.dim(1), std::string(name) + ": input width " +
                                           std::to_string(x.cols()) + " does not match weight " +
                                           shape_str(weight.shape()));
    const std::size_t m = x.rows(), in = x.cols(), out_dim = weight.dim(0);
    std::vector<double> out(m * out_dim);
    if (rowwise)
        rowwise_product(x.raw()->value.data(), weight.raw()->value.data(), out.data(), m, in,
                        out_dim);
    else
        as_mat(out, m, out_dim).noalias() = as_mat(*x.raw()) * as_mat(*weight.raw()).transpose();
    Shape shape = x.shape();
    shape.back() = out_dim;
    return detail::make_result(std::move(shape), std::move(out), {x, weight},
                               [m, in, out_dim](detail::Node& self) {
        auto& X = *self.parents[0];
        auto& W = *self.parents[1];
        auto G = as_mat(self.grad, m, out_dim);
        if (X.requires_grad) as_mat(X.ensure_grad(), m, in).noalias() += G * as_mat(W);
        if (W.requires_grad)
            as_mat(W.ensure_grad(), out_dim, in).noalias() += G.transpose() * as_mat(X);
    });
}

}  // namespace

DiffTensor linear(const DiffTensor& x, const DiffTensor& weight) {
    return linear_impl(x, weight, false, "linear");
}

DiffTensor linear_rowwise(const DiffTensor& x, const DiffTensor& weight) {
    return linear_impl(x, weight, true, "linear_rowwise");
}

DiffTensor add(const DiffTensor& a, const DiffTensor& b) {
    require_defined(a, "add");
    require_defined(b, "add");
    require(a.shape() == b.shape(),
            "add: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    const auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

DiffTensor scale(const DiffTensor& x, double c) {
    require_defined(x, "scale");
    std::vector<double> out(x.values().begin(), x.values().end());
    for (double& v : out) v *= c;
    return detail::make_result(x.shape(), std::move(out), {x}, [c](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
    });
}

DiffTensor relu(const DiffTensor& x) {
    require_defined(x, "relu");
    std::vector<double> out(x.values().begin(), x.values().end());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    return detail::make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
        auto& X = *self.parents[0];
        auto& g = X.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (X.value[i] > 0.0) g[i] += self.grad[i];
    });
}

DiffTensor sum(const DiffTensor& x) {
    require_defined(x, "sum");
    double s = 0.0;
    for (double v : x.values()) s += v;
    return detail::make_result(Shape{1}, {s}, {x}, [](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (double& v : g) v += self.grad[0];
    });
}

DiffTensor mean(const DiffTensor& x) {
    require_defined(x, "mean");
    require(x.size() > 0, "mean: empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

namespace {

// Numerically stable softmax of `n` values in place.
void softmax_inplace(double* v, std::size_t n) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, v[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = std::exp(v[i] - mx);
        z += v[i];
    }
    for (std::size_t i = 0; i < n; ++i) v[i] /= z;
}

DiffTensor softmax_impl(const DiffTensor& logits, std::size_t rows, std::size_t cols) {
    std::vector<double> out(logits.values().begin(), logits.values().end());
    for (std::size_t r = 0; r < rows; ++r) softmax_inplace(out.data() + r * cols, cols);
    return detail::make_result(logits.shape(), std::move(out), {logits},
                               [rows, cols](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * cols;
            const double* gy = self.grad.data() + r * cols;
            double dot = 0.0;
            for (std::size_t i = 0; i < cols; ++i) dot += y[i] * gy[i];
            for (std::size_t i = 0; i < cols; ++i) g[r * cols + i] += y[i] * (gy[i] - dot);
        }
    });
}

}  // namespace

DiffTensor softmax(const DiffTensor& logits) {
    require_defined(logits, "softmax");
    require(logits.size() > 0, "softmax: empty input");
    return softmax_impl(logits, 1, logits.size());
}

DiffTensor softmax_rows(const DiffTensor& logits) {
    require_defined(logits, "softmax_rows");
    require(logits.size() > 0, "softmax_rows: empty input");
    return softmax_impl(logits, logits.rows(), logits.cols());
}

DiffTensor reshape(const DiffTensor& x, Shape shape) {
    require_defined(x, "reshape");
    require(shape_size(shape) == x.size(),
            "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<double> out(x.values().begin(), x.values().end());
    return detail::make_result(std::move(shape), std::move(out), {x}, [](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

DiffTensor cross_entropy_logits(const DiffTensor& logits, std::span<const int> targets) {
    require_defined(logits, "cross_entropy_logits");
    const std::size_t rows = logits.rows(), vocab = logits.cols();
    require(rows > 0 && vocab > 0, "cross_entropy_logits: empty logits");
    require(targets.size() == rows, "cross_entropy_logits: " + std::to_string(targets.size()) +
                                        " targets for " + std::to_string(rows) + " rows");
    for (int t : targets) {
        require(t >= 0 && static_cast<std::size_t>(t) < vocab,
                "cross_entropy_logits: target " + std::to_string(t) + " outside [0, " +
                    std::to_string(vocab) + ")");
    }
    auto probs = std::make_shared<std::vector<double>>(logits.values().begin(),
                                                       logits.values().end());
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = logits.values().data() + r * vocab;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < vocab; ++i) mx = std::max(mx, x[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < vocab; ++i) z += std::exp(x[i] - mx);
        const double lse = mx + std::log(z);
        loss += lse - x[targets[r]];
        softmax_inplace(probs->data() + r * vocab, vocab);
    }
    loss /= static_cast<double>(rows);
    std::vector<int> tg(targets.begin(), targets.end());
    return detail::make_result(Shape{1}, {loss}, {logits},
                               [probs, tg = std::move(tg), rows, vocab](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        const double s = self.grad[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < vocab; ++i) g[r * vocab + i] += s * (*probs)[r * vocab + i];
            g[r * vocab + static_cast<std::size_t>(tg[r])] -= s;
        }
    });
}

DiffTensor embedding(const DiffTensor& table, std::span<const int> ids, Shape out_shape) {
    require_defined(table, "embedding");
    require(table.ndim() == 2, "embedding: table must be a matrix");
    const std::size_t vocab = table.dim(0), width = table.dim(1);
    require(shape_size(out_shape) == ids.size() * width && !out_shape.empty() &&
                out_shape.back() == width,
            "embedding: output shape " + shape_str(out_shape) + " does not fit " +
                std::to_string(ids.size()) + " rows of width " + std::to_string(width));
    std::vector<double> out(ids.size() * width);
    const auto tv = table.values();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < vocab,
                "embedding: id " + std::to_string(ids[i]) + " outside [0, " +
                    std::to_string(vocab) + ")");
        std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * width), width,
                    out.begin() + static_cast<std::ptrdiff_t>(i * width));
    }
    std::vector<int> id_copy(ids.begin(), ids.end());
    return detail::make_result(std::move(out_shape), std::move(out), {table},
                               [ids = std::move(id_copy), width](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            double* dst = g.data() + static_cast<std::size_t>(ids[i]) * width;
            const double* src = self.grad.data() + i * width;
            for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
        }
    });
}

DiffTensor layer_norm(const DiffTensor& x, const DiffTensor& gain, double eps) {
    require_defined(x, "layer_norm");
    require_defined(gain, "layer_norm");
    const std::size_t rows = x.rows(), n = x.cols();
    require(gain.size() == n, "layer_norm: gain has " + std::to_string(gain.size()) +
                                  " entries for width " + std::to_string(n));
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    std::vector<double> out(x.size());
    const auto xv = x.values();
    const auto gv = gain.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(n);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xr[j] - mu) * rs;
            (*xhat)[r * n + j] = h;
            out[r * n + j] = h * gv[j];
        }
    }
    return detail::make_result(x.shape(), std::move(out), {x, gain},
                               [xhat, rstd, rows, n](detail::Node& self) {
        auto& X = *self.parents[0];
        auto& Gn = *self.parents[1];
        if (Gn.requires_grad) {
            auto& gg = Gn.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j)
                    gg[j] += self.grad[r * n + j] * (*xhat)[r * n + j];
        }
        if (!X.requires_grad) return;
        auto& gx = X.ensure_grad();
        std::vector<double> dh(n);
        for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                dh[j] = self.grad[r * n + j] * Gn.value[j];
                m1 += dh[j];
                m2 += dh[j] * (*xhat)[r * n + j];
            }
            m1 /= static_cast<double>(n);
            m2 /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j)
                gx[r * n + j] += (*rstd)[r] * (dh[j] - m1 - (*xhat)[r * n + j] * m2);
        }
    });
}

DiffTensor causal_attention(const DiffTensor& q, const DiffTensor& k, const DiffTensor& v,
                            std::size_t batch, std::size_t seq, std::size_t n_heads,
                            double logit_scale) {
    require_defined(q, "causal_attention");
    require(q.shape() == k.shape() && q.shape() == v.shape(),
            "causal_attention: q, k, v shapes differ");
    const std::size_t width = q.cols();
    require(q.rows() == batch * seq, "causal_attention: " + std::to_string(q.rows()) +
                                         " rows for batch*seq = " + std::to_string(batch * seq));
    require(n_heads > 0 && width % n_heads == 0,
            "causal_attention: width " + std::to_string(width) + " not divisible into " +
                std::to_string(n_heads) + " heads");
    const std::size_t hd = width / n_heads;
    const auto T = static_cast<Eigen::Index>(seq);
    const auto D = static_cast<Eigen::Index>(hd);
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));

    // Attention probabilities per (batch, head), kept for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(batch * n_heads * seq * seq, 0.0);
    std::vector<double> out(q.size(), 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = b * seq * width + h * hd;
            ConstStridedMap Q(q.values().data() + off, T, D, stride);
            ConstStridedMap K(k.values().data() + off, T, D, stride);
            ConstStridedMap V(v.values().data() + off, T, D, stride);
            double* P = probs->data() + (b * n_heads + h) * seq * seq;
            MatMap Pm(P, T, T);
            Pm.noalias() = logit_scale * (Q * K.transpose());
            for (std::size_t i = 0; i < seq; ++i) {
                softmax_inplace(P + i * seq, i + 1);
                std::fill(P + i * seq + i + 1, P + (i + 1) * seq, 0.0);
            }
            StridedMap O(out.data() + off, T, D, stride);
            O.noalias() = Pm * V;
        }
    }
    return detail::make_result(q.shape(), std::move(out), {q, k, v},
                               [probs, batch, seq, n_heads, hd, width,
                                logit_scale](detail::Node& self) {
        auto& Qn = *self.parents[0];
        auto& Kn = *self.parents[1];
        auto& Vn = *self.parents[2];
        const auto T = static_cast<Eigen::Index>(seq);
        const auto D = static_cast<Eigen::Index>(hd);
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));
        double* gq = Qn.requires_grad ? Qn.ensure_grad().data() : nullptr;
        double* gk = Kn.requires_grad ? Kn.ensure_grad().data() : nullptr;
        double* gv = Vn.requires_grad ? Vn.ensure_grad().data() : nullptr;
        RowMat dP(T, T);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t off = b * seq * width + h * hd;
                ConstStridedMap Q(Qn.value.data() + off, T, D, stride);
                ConstStridedMap K(Kn.value.data() + off, T, D, stride);
                ConstStridedMap V(Vn.value.data() + off, T, D, stride);
                ConstStridedMap dO(self.grad.data() + off, T, D, stride);
                ConstMatMap P(probs->data() + (b * n_heads + h) * seq * seq, T, T);
                if (gv) StridedMap(gv + off, T, D, stride).noalias() += P.transpose() * dO;
                if (!gq && !gk) continue;
                dP.noalias() = dO * V.transpose();
                // dS = P * (dP - rowsum(P * dP)); masked entries have P = 0.
                for (Eigen::Index i = 0; i < T; ++i) {
                    double dot = 0.0;
                    for (Eigen::Index j = 0; j <= i; ++j) dot += P(i, j) * dP(i, j);
                    for (Eigen::Index j = 0; j < T; ++j)
                        dP(i, j) = j <= i ? logit_scale * P(i, j) * (dP(i, j) - dot) : 0.0;
                }
                if (gq) StridedMap(gq + off, T, D, stride).noalias() += dP * K;
                if (gk) StridedMap(gk + off, T, D, stride).noalias() += dP.transpose() * Q;
            }
        }
    });
}

DiffTensor gather_rows(const DiffTensor& x, std::span<const std::size_t> rows) {
    require_defined(x, "gather_rows");
    const std::size_t n = x.cols(), total = x.rows();
    std::vector<double> out(rows.size() * n);
    const auto xv = x.values();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] < total, "gather_rows: row " + std::to_string(rows[i]) + " of " +
                                     std::to_string(total));
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * n), n,
                    out.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return detail::make_result(Shape{rows.size(), n}, std::move(out), {x},
                               [idx = std::move(idx), n](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += self.grad[i * n + j];
    });
}

std::vector<TopKEntry> top_k(std::span<const double> logits, std::size_t k) {
    require(k >= 1 && k <= logits.size(),
            "top_k: k = " + std::to_string(k) + " outside [1, " +
                std::to_string(logits.size()) + "]");
    std::vector<std::size_t> idx(logits.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (logits[a] != logits[b]) return logits[a] > logits[b];
                          return a < b;
                      });
    std::vector<TopKEntry> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back({idx[i], logits[idx[i]]});
    return out;
}

}  // namespace mupmoe
