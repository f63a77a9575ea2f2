#include "ord2seq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace ord2seq {

namespace {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kMaskedScore = -1e30;

NodePtr make_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank2(const std::string& op, const Tensor& t) {
    if (t.shape().size() != 2)
        throw std::invalid_argument(op + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

// C (r x c) += A (r x k) * B (k x c), all row-major contiguous.
void matmul_nn_acc(const double* a, const double* b, double* c,
                   std::size_t r, std::size_t k, std::size_t cc) {
    for (std::size_t i = 0; i < r; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * cc;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * cc;
            for (std::size_t j = 0; j < cc; ++j) ci[j] += av * bp[j];
        }
    }
}

// C (r x k) += A (r x c) * B^T, where B is (k x c).
void matmul_nt_acc(const double* a, const double* b, double* c,
                   std::size_t r, std::size_t cdim, std::size_t k) {
    for (std::size_t i = 0; i < r; ++i) {
        const double* ai = a + i * cdim;
        double* ci = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * cdim;
            double acc = 0.0;
            for (std::size_t j = 0; j < cdim; ++j) acc += ai[j] * bp[j];
            ci[p] += acc;
        }
    }
}

// C (k x c) += A^T * B, where A is (r x k), B is (r x c).
void matmul_tn_acc(const double* a, const double* b, double* c,
                   std::size_t r, std::size_t k, std::size_t cc) {
    for (std::size_t i = 0; i < r; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * cc;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            double* cp = c + p * cc;
            for (std::size_t j = 0; j < cc; ++j) cp[j] += av * bi[j];
        }
    }
}

Tensor unary_op(const Tensor& x, const char* /*unused*/, std::vector<double> value,
                std::function<void(const TensorNode&, TensorNode&)> grad_fn) {
    auto out = make_node(x.shape(), std::move(value));
    auto xs = x.shared_node();
    out->requires_grad = xs->requires_grad;
    if (out->requires_grad) {
        out->inputs = {xs};
        TensorNode* self = out.get();
        out->backprop = [self, xs, grad_fn = std::move(grad_fn)]() {
            xs->ensure_grad();
            grad_fn(*self, *xs);
        };
    }
    return Tensor::wrap(out);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor Tensor::zeros(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0)));
}

Tensor Tensor::full(Shape shape, double fill) {
    const std::size_t n = shape_numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, fill)));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
        throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                    " values do not fill shape " + shape_str(shape));
    return Tensor(make_node(std::move(shape), std::move(values)));
}

Tensor Tensor::scalar(double v) { return Tensor(make_node(Shape{}, {v})); }

Tensor Tensor::param(Shape shape, std::vector<double> values, std::string name) {
    Tensor t = from(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    t.node_->name = std::move(name);
    return t;
}

std::size_t Tensor::rows() const {
    require_rank2("rows", *this);
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    require_rank2("cols", *this);
    return node_->shape[1];
}

double Tensor::item() const {
    if (numel() != 1)
        throw std::invalid_argument("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
}

void Tensor::backward() const {
    if (!defined() || numel() != 1)
        throw std::invalid_argument("backward: loss must be a defined scalar tensor");
    if (!node_->requires_grad)
        throw std::invalid_argument("backward: loss does not depend on any parameter");

    // Iterative post-order DFS; reverse of the resulting order is a valid
    // topological order for the reverse pass.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            TensorNode* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second)
                stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop();
    }
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2("matmul", a);
    require_rank2("matmul", b);
    if (a.cols() != b.rows()) shape_fail("matmul", a.shape(), b.shape());
    const std::size_t r = a.rows(), k = a.cols(), c = b.cols();

    auto out = make_node({r, c}, std::vector<double>(r * c, 0.0));
    matmul_nn_acc(a.values().data(), b.values().data(), out->value.data(), r, k, c);

    auto an = a.shared_node(), bn = b.shared_node();
    out->requires_grad = an->requires_grad || bn->requires_grad;
    if (out->requires_grad) {
        out->inputs = {an, bn};
        TensorNode* self = out.get();
        out->backprop = [self, an, bn, r, k, c]() {
            if (an->requires_grad) {
                an->ensure_grad();
                matmul_nt_acc(self->grad.data(), bn->value.data(), an->grad.data(), r, c, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                matmul_tn_acc(an->value.data(), self->grad.data(), bn->grad.data(), r, k, c);
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];

    auto out = make_node(a.shape(), std::move(v));
    auto an = a.shared_node(), bn = b.shared_node();
    out->requires_grad = an->requires_grad || bn->requires_grad;
    if (out->requires_grad) {
        out->inputs = {an, bn};
        TensorNode* self = out.get();
        out->backprop = [self, an, bn]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i) bn->grad[i] += self->grad[i];
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor add_rows(const Tensor& a, const Tensor& bias) {
    require_rank2("add_rows", a);
    if (bias.numel() != a.cols()) shape_fail("add_rows", a.shape(), bias.shape());
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) v[i * c + j] = a.values()[i * c + j] + bias.values()[j];

    auto out = make_node(a.shape(), std::move(v));
    auto an = a.shared_node(), bn = bias.shared_node();
    out->requires_grad = an->requires_grad || bn->requires_grad;
    if (out->requires_grad) {
        out->inputs = {an, bn};
        TensorNode* self = out.get();
        out->backprop = [self, an, bn, r, c]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) bn->grad[j] += self->grad[i * c + j];
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] - b.values()[i];

    auto out = make_node(a.shape(), std::move(v));
    auto an = a.shared_node(), bn = b.shared_node();
    out->requires_grad = an->requires_grad || bn->requires_grad;
    if (out->requires_grad) {
        out->inputs = {an, bn};
        TensorNode* self = out.get();
        out->backprop = [self, an, bn]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i) an->grad[i] += self->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i) bn->grad[i] -= self->grad[i];
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * b.values()[i];

    auto out = make_node(a.shape(), std::move(v));
    auto an = a.shared_node(), bn = b.shared_node();
    out->requires_grad = an->requires_grad || bn->requires_grad;
    if (out->requires_grad) {
        out->inputs = {an, bn};
        TensorNode* self = out.get();
        out->backprop = [self, an, bn]() {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i)
                    an->grad[i] += self->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < self->grad.size(); ++i)
                    bn->grad[i] += self->grad[i] * an->value[i];
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * c;
    return unary_op(a, "scale", std::move(v), [c](const TensorNode& self, TensorNode& x) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) x.grad[i] += c * self.grad[i];
    });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double t = x.values()[i];
        v[i] = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
    }
    return unary_op(x, "sigmoid", std::move(v), [](const TensorNode& self, TensorNode& x) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double y = self.value[i];
            x.grad[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

Tensor gelu(const Tensor& x) {
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double t = x.values()[i];
        v[i] = 0.5 * t * (1.0 + std::erf(t * kInvSqrt2));
    }
    return unary_op(x, "gelu", std::move(v), [](const TensorNode& self, TensorNode& x) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double t = x.value[i];
            const double cdf = 0.5 * (1.0 + std::erf(t * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * t * t);
            x.grad[i] += self.grad[i] * (cdf + t * pdf);
        }
    });
}

Tensor log(const Tensor& x) {
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log(x.values()[i]);
    return unary_op(x, "log", std::move(v), [](const TensorNode& self, TensorNode& x) {
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            x.grad[i] += self.grad[i] / x.value[i];
    });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double t = x.values()[i];
        v[i] = std::isnan(t) ? t : std::min(hi, std::max(lo, t));
    }
    return unary_op(x, "clamp", std::move(v), [lo, hi](const TensorNode& self, TensorNode& x) {
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (x.value[i] > lo && x.value[i] < hi) x.grad[i] += self.grad[i];
    });
}

Tensor softmax_rows(const Tensor& x) {
    require_rank2("softmax_rows", x);
    const std::size_t r = x.rows(), c = x.cols();
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < r; ++i) {
        const double* xi = x.values().data() + i * c;
        double* vi = v.data() + i * c;
        double m = xi[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, xi[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += (vi[j] = std::exp(xi[j] - m));
        for (std::size_t j = 0; j < c; ++j) vi[j] /= s;
    }
    return unary_op(x, "softmax_rows", std::move(v), [r, c](const TensorNode& self, TensorNode& x) {
        for (std::size_t i = 0; i < r; ++i) {
            const double* y = self.value.data() + i * c;
            const double* dy = self.grad.data() + i * c;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
            for (std::size_t j = 0; j < c; ++j) x.grad[i * c + j] += y[j] * (dy[j] - dot);
        }
    });
}

Tensor mean(const Tensor& x) {
    const std::size_t n = x.numel();
    if (n == 0) throw std::invalid_argument("mean: empty tensor");
    double s = 0.0;
    for (double v : x.values()) s += v;
    auto out = make_node(Shape{}, {s / static_cast<double>(n)});
    auto xn = x.shared_node();
    out->requires_grad = xn->requires_grad;
    if (out->requires_grad) {
        out->inputs = {xn};
        TensorNode* self = out.get();
        out->backprop = [self, xn, n]() {
            xn->ensure_grad();
            const double g = self->grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g;
        };
    }
    return Tensor::wrap(out);
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    auto out = make_node(Shape{}, {s});
    auto xn = x.shared_node();
    out->requires_grad = xn->requires_grad;
    if (out->requires_grad) {
        out->inputs = {xn};
        TensorNode* self = out.get();
        out->backprop = [self, xn]() {
            xn->ensure_grad();
            const double g = self->grad[0];
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
        };
    }
    return Tensor::wrap(out);
}

Tensor transpose(const Tensor& x) {
    require_rank2("transpose", x);
    const std::size_t r = x.rows(), c = x.cols();
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) v[j * r + i] = x.values()[i * c + j];

    auto out = make_node({c, r}, std::move(v));
    auto xn = x.shared_node();
    out->requires_grad = xn->requires_grad;
    if (out->requires_grad) {
        out->inputs = {xn};
        TensorNode* self = out.get();
        out->backprop = [self, xn, r, c]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) xn->grad[i * c + j] += self->grad[j * r + i];
        };
    }
    return Tensor::wrap(out);
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(shape));
    auto out = make_node(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
    auto xn = x.shared_node();
    out->requires_grad = xn->requires_grad;
    if (out->requires_grad) {
        out->inputs = {xn};
        TensorNode* self = out.get();
        out->backprop = [self, xn]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i) xn->grad[i] += self->grad[i];
        };
    }
    return Tensor::wrap(out);
}

Tensor slice_rows(const Tensor& x, std::size_t row0, std::size_t row1) {
    require_rank2("slice_rows", x);
    if (row0 > row1 || row1 > x.rows())
        throw std::invalid_argument("slice_rows: range [" + std::to_string(row0) + "," +
                                    std::to_string(row1) + ") out of " + shape_str(x.shape()));
    const std::size_t c = x.cols();
    std::vector<double> v(x.values().begin() + static_cast<std::ptrdiff_t>(row0 * c),
                          x.values().begin() + static_cast<std::ptrdiff_t>(row1 * c));
    auto out = make_node({row1 - row0, c}, std::move(v));
    auto xn = x.shared_node();
    out->requires_grad = xn->requires_grad;
    if (out->requires_grad) {
        out->inputs = {xn};
        TensorNode* self = out.get();
        out->backprop = [self, xn, row0, c]() {
            xn->ensure_grad();
            for (std::size_t i = 0; i < self->grad.size(); ++i)
                xn->grad[row0 * c + i] += self->grad[i];
        };
    }
    return Tensor::wrap(out);
}

Tensor concat_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const std::size_t c = xs.front().cols();
    std::size_t r = 0;
    bool need_grad = false;
    for (const auto& x : xs) {
        if (x.cols() != c) shape_fail("concat_rows", xs.front().shape(), x.shape());
        r += x.rows();
        need_grad = need_grad || x.requires_grad();
    }
    std::vector<double> v;
    v.reserve(r * c);
    for (const auto& x : xs) v.insert(v.end(), x.values().begin(), x.values().end());

    auto out = make_node({r, c}, std::move(v));
    out->requires_grad = need_grad;
    if (need_grad) {
        std::vector<NodePtr> parts;
        for (const auto& x : xs) parts.push_back(x.shared_node());
        out->inputs = parts;
        TensorNode* self = out.get();
        out->backprop = [self, parts]() {
            std::size_t offset = 0;
            for (const auto& p : parts) {
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < p->value.size(); ++i)
                        p->grad[i] += self->grad[offset + i];
                }
                offset += p->value.size();
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor gather_rows(const Tensor& x, std::vector<std::size_t> indices) {
    require_rank2("gather_rows", x);
    const std::size_t c = x.cols();
    for (auto i : indices)
        if (i >= x.rows())
            throw std::invalid_argument("gather_rows: row " + std::to_string(i) + " out of " +
                                        shape_str(x.shape()));
    std::vector<double> v(indices.size() * c);
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::copy_n(x.values().data() + indices[r] * c, c, v.data() + r * c);

    auto out = make_node({indices.size(), c}, std::move(v));
    auto xn = x.shared_node();
    out->requires_grad = xn->requires_grad;
    if (out->requires_grad) {
        out->inputs = {xn};
        TensorNode* self = out.get();
        out->backprop = [self, xn, c, idx = std::move(indices)]() {
            xn->ensure_grad();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t j = 0; j < c; ++j)
                    xn->grad[idx[r] * c + j] += self->grad[r * c + j];
        };
    }
    return Tensor::wrap(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps) {
    require_rank2("layer_norm", x);
    const std::size_t r = x.rows(), c = x.cols();
    if (gain.numel() != c) shape_fail("layer_norm", x.shape(), gain.shape());
    if (offset.numel() != c) shape_fail("layer_norm", x.shape(), offset.shape());

    std::vector<double> v(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* xi = x.values().data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xi[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (xi[j] - mu) * is;
            xhat[i * c + j] = h;
            v[i * c + j] = gain.values()[j] * h + offset.values()[j];
        }
    }

    auto out = make_node(x.shape(), std::move(v));
    auto xn = x.shared_node(), gn = gain.shared_node(), on = offset.shared_node();
    out->requires_grad = xn->requires_grad || gn->requires_grad || on->requires_grad;
    if (out->requires_grad) {
        out->inputs = {xn, gn, on};
        TensorNode* self = out.get();
        out->backprop = [self, xn, gn, on, r, c, xhat = std::move(xhat),
                         inv_std = std::move(inv_std)]() {
            if (gn->requires_grad) gn->ensure_grad();
            if (on->requires_grad) on->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (std::size_t i = 0; i < r; ++i) {
                const double* dy = self->grad.data() + i * c;
                const double* h = xhat.data() + i * c;
                if (gn->requires_grad || on->requires_grad) {
                    for (std::size_t j = 0; j < c; ++j) {
                        if (gn->requires_grad) gn->grad[j] += dy[j] * h[j];
                        if (on->requires_grad) on->grad[j] += dy[j];
                    }
                }
                if (xn->requires_grad) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dh = dy[j] * gn->value[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= static_cast<double>(c);
                    mean_dh_h /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dh = dy[j] * gn->value[j];
                        xn->grad[i * c + j] += inv_std[i] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t heads, std::size_t batch, bool causal) {
    require_rank2("attention", q);
    require_rank2("attention", k);
    require_rank2("attention", v);
    const std::size_t w = q.cols();
    if (k.cols() != w || v.cols() != w) shape_fail("attention", q.shape(), k.shape());
    if (k.rows() != v.rows()) shape_fail("attention", k.shape(), v.shape());
    if (heads == 0 || w % heads != 0)
        throw std::invalid_argument("attention: width " + std::to_string(w) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    if (batch == 0 || q.rows() % batch != 0 || k.rows() % batch != 0)
        throw std::invalid_argument("attention: rows not divisible by batch " +
                                    std::to_string(batch));
    const std::size_t tq = q.rows() / batch;
    const std::size_t tk = k.rows() / batch;
    const std::size_t dk = w / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dk));
    if (causal && tq != tk)
        throw std::invalid_argument("attention: causal requires square blocks, got " +
                                    shape_str(q.shape()) + " vs " + shape_str(k.shape()));

    // Softmax weights are kept for the backward pass: batch*heads blocks of tq x tk.
    std::vector<double> weights(batch * heads * tq * tk);
    std::vector<double> out_v(q.numel(), 0.0);

    const double* qd = q.values().data();
    const double* kd = k.values().data();
    const double* vd = v.values().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* wblock = weights.data() + (b * heads + h) * tq * tk;
            const std::size_t col0 = h * dk;
            for (std::size_t i = 0; i < tq; ++i) {
                const double* qi = qd + (b * tq + i) * w + col0;
                double* wi = wblock + i * tk;
                for (std::size_t j = 0; j < tk; ++j) {
                    const double* kj = kd + (b * tk + j) * w + col0;
                    double s = 0.0;
                    for (std::size_t d = 0; d < dk; ++d) s += qi[d] * kj[d];
                    wi[j] = (causal && j > i) ? kMaskedScore : s * inv_scale;
                }
                double m = wi[0];
                for (std::size_t j = 1; j < tk; ++j) m = std::max(m, wi[j]);
                double denom = 0.0;
                for (std::size_t j = 0; j < tk; ++j) denom += (wi[j] = std::exp(wi[j] - m));
                for (std::size_t j = 0; j < tk; ++j) wi[j] /= denom;

                double* oi = out_v.data() + (b * tq + i) * w + col0;
                for (std::size_t j = 0; j < tk; ++j) {
                    const double p = wi[j];
                    const double* vj = vd + (b * tk + j) * w + col0;
                    for (std::size_t d = 0; d < dk; ++d) oi[d] += p * vj[d];
                }
            }
        }
    }

    auto out = make_node(q.shape(), std::move(out_v));
    auto qn = q.shared_node(), kn = k.shared_node(), vn = v.shared_node();
    out->requires_grad = qn->requires_grad || kn->requires_grad || vn->requires_grad;
    if (out->requires_grad) {
        out->inputs = {qn, kn, vn};
        TensorNode* self = out.get();
        out->backprop = [self, qn, kn, vn, heads, batch, tq, tk, dk, w, inv_scale,
                         weights = std::move(weights)]() {
            qn->ensure_grad();
            kn->ensure_grad();
            vn->ensure_grad();
            std::vector<double> dscore(tk);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* wblock = weights.data() + (b * heads + h) * tq * tk;
                    const std::size_t col0 = h * dk;
                    for (std::size_t i = 0; i < tq; ++i) {
                        const double* wi = wblock + i * tk;
                        const double* doi = self->grad.data() + (b * tq + i) * w + col0;

                        // dV and dP, then dS = P .* (dP - sum(dP .* P)).
                        double dot = 0.0;
                        for (std::size_t j = 0; j < tk; ++j) {
                            const double* vj = vn->value.data() + (b * tk + j) * w + col0;
                            double dp = 0.0;
                            for (std::size_t d = 0; d < dk; ++d) dp += doi[d] * vj[d];
                            dscore[j] = dp;
                            dot += dp * wi[j];
                        }
                        for (std::size_t j = 0; j < tk; ++j)
                            dscore[j] = wi[j] * (dscore[j] - dot) * inv_scale;

                        double* dqi = qn->grad.data() + (b * tq + i) * w + col0;
                        const double* qi = qn->value.data() + (b * tq + i) * w + col0;
                        for (std::size_t j = 0; j < tk; ++j) {
                            const double ds = dscore[j];
                            const double p = wi[j];
                            const double* kj = kn->value.data() + (b * tk + j) * w + col0;
                            double* dkj = kn->grad.data() + (b * tk + j) * w + col0;
                            double* dvj = vn->grad.data() + (b * tk + j) * w + col0;
                            for (std::size_t d = 0; d < dk; ++d) {
                                dqi[d] += ds * kj[d];
                                dkj[d] += ds * qi[d];
                                dvj[d] += p * doi[d];
                            }
                        }
                    }
                }
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& labels) {
    require_rank2("cross_entropy", logits);
    const std::size_t r = logits.rows(), c = logits.cols();
    if (labels.size() != r)
        throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for " + shape_str(logits.shape()));
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= c)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(l) +
                                        " out of range for " + std::to_string(c) + " classes");

    double total = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        const double* li = logits.values().data() + i * c;
        double m = li[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, li[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(li[j] - m);
        total += m + std::log(s) - li[labels[i]];
    }

    auto out = make_node(Shape{}, {total / static_cast<double>(r)});
    auto ln = logits.shared_node();
    out->requires_grad = ln->requires_grad;
    if (out->requires_grad) {
        out->inputs = {ln};
        TensorNode* self = out.get();
        out->backprop = [self, ln, r, c, labels]() {
            ln->ensure_grad();
            const double g = self->grad[0] / static_cast<double>(r);
            for (std::size_t i = 0; i < r; ++i) {
                const double* li = ln->value.data() + i * c;
                double m = li[0];
                for (std::size_t j = 1; j < c; ++j) m = std::max(m, li[j]);
                double s = 0.0;
                for (std::size_t j = 0; j < c; ++j) s += std::exp(li[j] - m);
                for (std::size_t j = 0; j < c; ++j) {
                    double p = std::exp(li[j] - m) / s;
                    if (j == static_cast<std::size_t>(labels[i])) p -= 1.0;
                    ln->grad[i * c + j] += g * p;
                }
            }
        };
    }
    return Tensor::wrap(out);
}

}  // namespace ord2seq
