#pragma once

// Dense float64 tensors with reverse-mode differentiation.
//
// A DiffTensor is a cheap handle onto a graph node. Operations build a fresh
// graph every step; parameters are long-lived leaves that never point at their
// consumers, so dropping the loss handle releases the whole step graph.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mupmoe {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until a gradient reaches this node
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(Node&)> backward;
    bool requires_grad = false;
    std::uint64_t id = 0;

    std::vector<double>& ensure_grad();
};

}  // namespace detail

class DiffTensor {
public:
    DiffTensor() = default;

    /// Tensor that does not receive gradients.
    static DiffTensor constant(Shape shape, std::vector<double> values);
    /// Leaf that receives gradients (model weights, checked inputs).
    static DiffTensor variable(Shape shape, std::vector<double> values);
    static DiffTensor zeros(Shape shape, bool requires_grad = false);
    static DiffTensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t size() const;
    std::size_t dim(std::size_t i) const;
    std::size_t ndim() const { return shape().size(); }
    /// Rows when viewed as a matrix whose columns are the last extent.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const;
    /// Mutable view; only meaningful for leaves (optimizers, initializers).
    std::span<double> mutable_values();
    double item() const;
    double at(std::size_t flat) const { return values()[flat]; }

    bool requires_grad() const;
    bool has_grad() const;
    /// Empty span when no gradient has reached this tensor.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    std::vector<double> grad_or_zero() const;
    void zero_grad();
    /// Releases the gradient buffer (equivalent to a zero gradient).
    void clear_grad();

    std::uint64_t node_id() const;

    /// Same values, new leaf without history.
    DiffTensor detach() const;

    detail::Node* raw() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node() const { return node_; }

    static DiffTensor from_node(std::shared_ptr<detail::Node> n) {
        DiffTensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Builds an op result. The result requires grad iff any parent does; the
/// backward closure is dropped otherwise.
DiffTensor make_result(Shape shape, std::vector<double> value,
                       std::vector<DiffTensor> parents,
                       std::function<void(Node&)> backward);

}  // namespace detail

/// Populates gradients of every tensor reachable from a scalar root.
/// Gradients accumulate into existing buffers.
void backward(const DiffTensor& root);

// ---- primitives ----------------------------------------------------------

/// [m x k] * [k x p]. Higher-rank inputs are viewed as matrices over the
/// last extent.
DiffTensor matmul(const DiffTensor& a, const DiffTensor& b);
/// x [m x in] times W^T where W is [out x in]; the usual weight layout.
DiffTensor linear(const DiffTensor& x, const DiffTensor& weight);
/// Same as linear, but each output row is computed independently of the others
/// (bit-identical whatever rows are batched with it). Slower.
DiffTensor linear_rowwise(const DiffTensor& x, const DiffTensor& weight);
DiffTensor add(const DiffTensor& a, const DiffTensor& b);
DiffTensor scale(const DiffTensor& x, double c);
DiffTensor relu(const DiffTensor& x);
DiffTensor sum(const DiffTensor& x);
DiffTensor mean(const DiffTensor& x);
/// Softmax of a vector (any shape, treated flat).
DiffTensor softmax(const DiffTensor& logits);
/// Softmax over the last extent.
DiffTensor softmax_rows(const DiffTensor& logits);
/// Reshape without copying semantics visible to callers.
DiffTensor reshape(const DiffTensor& x, Shape shape);

/// Mean negative log-likelihood of `targets` under row-wise softmax.
DiffTensor cross_entropy_logits(const DiffTensor& logits,
                                std::span<const int> targets);

/// Row lookup: out[i] = table[ids[i]].
DiffTensor embedding(const DiffTensor& table, std::span<const int> ids,
                     Shape out_shape);
/// Row-wise layer norm over the last extent with a learned gain, no bias.
DiffTensor layer_norm(const DiffTensor& x, const DiffTensor& gain,
                      double eps = 1e-5);
/// Multi-head causal attention. q, k, v are [batch*seq x width] with heads
/// laid out contiguously along the width.
DiffTensor causal_attention(const DiffTensor& q, const DiffTensor& k,
                            const DiffTensor& v, std::size_t batch,
                            std::size_t seq, std::size_t n_heads,
                            double logit_scale);
/// Selected rows of a matrix.
DiffTensor gather_rows(const DiffTensor& x, std::span<const std::size_t> rows);

struct TopKEntry {
    std::size_t index;
    double value;
    bool operator==(const TopKEntry&) const = default;
};

/// The k largest entries, ordered by descending value then ascending index.
std::vector<TopKEntry> top_k(std::span<const double> logits, std::size_t k);

}  // namespace mupmoe
