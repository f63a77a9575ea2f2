#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ord2seq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One node of the autodiff tape. The tape is rebuilt on every forward pass;
// `backprop` reads this node's grad and accumulates into the inputs' grads.
struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::string name;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::function<void()> backprop;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

// Value-semantic handle to a shared tape node. Copies alias the same storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double fill);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double v);
    // Trainable leaf: participates in backward() and Adam updates.
    static Tensor param(Shape shape, std::vector<double> values, std::string name);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    double item() const;
    std::span<const double> values() const { return node_->value; }
    std::span<double> values_mut() { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }
    bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::string& name() const { return node_->name; }

    void zero_grad() { if (node_) node_->grad.assign(node_->value.size(), 0.0); }
    void drop_grad() { if (node_) node_->grad.clear(); }

    // Reverse pass from a scalar. Seeds d(self)/d(self)=1 and accumulates
    // gradients on every reachable node with requires_grad set.
    void backward() const;

    detail::TensorNode* node() const { return node_.get(); }
    std::shared_ptr<detail::TensorNode> shared_node() const { return node_; }

    static Tensor wrap(std::shared_ptr<detail::TensorNode> node) { return Tensor(std::move(node)); }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;
};

// ---- elementwise and linear algebra ops -----------------------------------
// All ops validate shapes eagerly and throw std::invalid_argument naming the
// offending shapes. Forward values are computed immediately; each op installs
// the matching analytic backward on the tape.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
// a is (r x c), bias is (c); bias broadcasts across rows.
Tensor add_rows(const Tensor& a, const Tensor& bias);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor log(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor softmax_rows(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, std::size_t row0, std::size_t row1);
Tensor concat_rows(const std::vector<Tensor>& xs);
// out row i = x row indices[i]; backward scatter-adds into x.
Tensor gather_rows(const Tensor& x, std::vector<std::size_t> indices);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps = 1e-5);

// Multi-head scaled dot-product attention over `batch` independent row blocks.
// q is (batch*tq x w), k and v are (batch*tk x w), w % heads == 0. With
// `causal` set, query row i of a block attends to key rows 0..i of the same
// block. Returns (batch*tq x w).
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t heads, std::size_t batch, bool causal);

// Mean over rows of (logsumexp(row) - row[label]).
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels);

}  // namespace ord2seq
