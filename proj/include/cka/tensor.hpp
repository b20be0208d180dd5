#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace cka {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // sized lazily, zero-filled on creation
    bool requires_grad = false;
    std::string name;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Node&)> backward_fn;

    std::size_t size() const { return values.size(); }

    std::vector<double>& grad_buffer() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

// Dense real tensor of rank <= 2 participating in reverse-mode differentiation.
// Value semantics on the handle; the node (values, grad, graph edges) is shared.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (shape_size(shape) != values.size())
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(values.size()) + " values");
        node_->shape = std::move(shape);
        node_->values = std::move(values);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, double fill, bool requires_grad = false)
        : Tensor(shape, std::vector<double>(shape_size(shape), fill), requires_grad) {}

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
    }

    bool valid() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->values.size(); }
    std::size_t rows() const { return rank() == 2 ? node_->shape[0] : (rank() == 1 ? 1 : 1); }
    std::size_t cols() const {
        return rank() == 2 ? node_->shape[1] : (rank() == 1 ? node_->shape[0] : 1);
    }

    const std::vector<double>& values() const { return node_->values; }
    std::vector<double>& raw_values() { return node_->values; }

    double item() const {
        if (size() != 1) throw std::runtime_error("item(): tensor has " + std::to_string(size()) + " elements");
        return node_->values[0];
    }

    double at(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    // Gradient accumulated by the last backward pass; zeros if none reached this leaf.
    std::vector<double> grad() const {
        if (node_->grad.size() == node_->values.size()) return node_->grad;
        return std::vector<double>(node_->values.size(), 0.0);
    }

    bool has_grad() const { return node_->grad.size() == node_->values.size(); }

    void zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

    void set_name(std::string n) { node_->name = std::move(n); }
    const std::string& name() const { return node_->name; }

    // Reverse-mode pass from a scalar output. Visits each node exactly once in
    // reverse topological order; gradients accumulate into every reachable
    // parent that requires them.
    void backward() const {
        if (size() != 1)
            throw std::runtime_error("backward(): output must be scalar, got shape " + shape_str(shape()));
        std::vector<detail::Node*> order = topo_order();
        // ops with zero local derivative may never write a parent's buffer,
        // so every differentiable node gets one up front
        for (detail::Node* n : order)
            if (n->requires_grad) n->grad_buffer();
        node_->grad_buffer()[0] += 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node* n = *it;
            if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
        }
    }

    std::shared_ptr<detail::Node> node() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::vector<detail::Node*> topo_order() const {
        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> seen;
        // iterative post-order DFS; parents visited before the node itself
        std::vector<std::pair<detail::Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                detail::Node* p = n->parents[next++].get();
                if (seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        return order;
    }

    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> values,
                      std::vector<Tensor> parents,
                      std::function<void(const Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    for (const Tensor& p : parents) {
        n->parents.push_back(p.node());
        if (p.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return Tensor(std::move(n));
}

inline void accumulate(const std::shared_ptr<Node>& parent, std::size_t i, double v) {
    if (parent->requires_grad) parent->grad_buffer()[i] += v;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got shape " +
                                    shape_str(t.shape()));
}

inline void require_finite(const Tensor& t, const char* op) {
    for (double v : t.values())
        if (!std::isfinite(v))
            throw std::runtime_error(std::string(op) + ": non-finite input value");
}

// Permutation-invariant sum: addends sorted ascending before accumulation, so
// any reordering of the inputs produces the bit-identical total.
inline double sorted_sum(std::vector<double>& scratch) {
    std::sort(scratch.begin(), scratch.end());
    double s = 0.0;
    for (double v : scratch) s += v;
    return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](const detail::Node& n) {
        for (std::size_t i = 0; i < n.size(); ++i) {
            detail::accumulate(pa, i, n.grad[i]);
            detail::accumulate(pb, i, n.grad[i]);
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](const detail::Node& n) {
        for (std::size_t i = 0; i < n.size(); ++i) {
            detail::accumulate(pa, i, n.grad[i]);
            detail::accumulate(pb, i, -n.grad[i]);
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [pa, pb](const detail::Node& n) {
        for (std::size_t i = 0; i < n.size(); ++i) {
            detail::accumulate(pa, i, n.grad[i] * pb->values[i]);
            detail::accumulate(pb, i, n.grad[i] * pa->values[i]);
        }
    });
}

inline Tensor scalar_mul(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa, s](const detail::Node& n) {
        for (std::size_t i = 0; i < n.size(); ++i) detail::accumulate(pa, i, n.grad[i] * s);
    });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + s;
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa](const detail::Node& n) {
        for (std::size_t i = 0; i < n.size(); ++i) detail::accumulate(pa, i, n.grad[i]);
    });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const std::size_t r = a.shape()[0], k = a.shape()[1], c = b.shape()[1];
    std::vector<double> out(r * c, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = av[i * k + kk];
            const double* brow = bv + kk * c;
            double* orow = out.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) orow[j] += aik * brow[j];
        }
    auto pa = a.node(), pb = b.node();
    return detail::make_op({r, c}, std::move(out), {a, b}, [pa, pb, r, k, c](const detail::Node& n) {
        const double* g = n.grad.data();
        if (pa->requires_grad) {
            double* ga = pa->grad_buffer().data();
            const double* bv = pb->values.data();
            // dA = G * B^T
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    const double gij = g[i * c + j];
                    const double* bcol = bv + j;
                    for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += gij * bcol[kk * c];
                }
        }
        if (pb->requires_grad) {
            double* gb = pb->grad_buffer().data();
            const double* av = pa->values.data();
            // dB = A^T * G
            for (std::size_t kk = 0; kk < k; ++kk)
                for (std::size_t i = 0; i < r; ++i) {
                    const double aik = av[i * k + kk];
                    const double* grow = g + i * c;
                    double* gbrow = gb + kk * c;
                    for (std::size_t j = 0; j < c; ++j) gbrow[j] += aik * grow[j];
                }
        }
    });
}

// X {r,c} + bias broadcast across rows; bias is rank-1 {c}.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank2(x, "add_row_bias");
    if (bias.rank() != 1 || bias.shape()[0] != x.shape()[1])
        throw std::invalid_argument("add_row_bias: shape mismatch " + shape_str(x.shape()) +
                                    " vs " + shape_str(bias.shape()));
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] + bias.values()[j];
    auto px = x.node(), pbias = bias.node();
    return detail::make_op({r, c}, std::move(out), {x, bias}, [px, pbias, r, c](const detail::Node& n) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                detail::accumulate(px, i * c + j, n.grad[i * c + j]);
                detail::accumulate(pbias, j, n.grad[i * c + j]);
            }
    });
}

inline Tensor exp(const Tensor& a) {
    detail::require_finite(a, "exp");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(a.values()[i]);
        if (!std::isfinite(out[i])) throw std::runtime_error("exp: overflow to non-finite value");
    }
    auto pa = a.node();
    std::vector<double> cached = out;
    return detail::make_op(a.shape(), std::move(out), {a}, [pa, cached](const detail::Node& n) {
        for (std::size_t i = 0; i < n.size(); ++i) detail::accumulate(pa, i, n.grad[i] * cached[i]);
    });
}

inline Tensor log(const Tensor& a) {
    for (double v : a.values())
        if (!std::isfinite(v) || v <= 0.0)
            throw std::runtime_error("log: input not finite-positive");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.values()[i]);
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa](const detail::Node& n) {
        for (std::size_t i = 0; i < n.size(); ++i) detail::accumulate(pa, i, n.grad[i] / pa->values[i]);
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    auto pa = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [pa](const detail::Node& n) {
        for (std::size_t i = 0; i < n.size(); ++i)
            if (pa->values[i] > 0.0) detail::accumulate(pa, i, n.grad[i]);
    });
}

// Row-wise softmax with per-row max shift. Normalizer addends are summed in
// sorted order, making the output invariant under row/column permutation of
// the input down to the last bit.
inline Tensor row_softmax(const Tensor& x) {
    detail::require_rank2(x, "row_softmax");
    detail::require_finite(x, "row_softmax");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<double> out(r * c);
    std::vector<double> scratch(c);
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = x.values().data() + i * c;
        double m = row[0];
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        for (std::size_t j = 0; j < c; ++j) scratch[j] = std::exp(row[j] - m);
        std::copy(scratch.begin(), scratch.end(), out.begin() + i * c);
        const double denom = detail::sorted_sum(scratch);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= denom;
    }
    auto px = x.node();
    std::vector<double> y = out;
    return detail::make_op({r, c}, std::move(out), {x}, [px, y, r, c](const detail::Node& n) {
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += n.grad[i * c + j] * y[i * c + j];
            for (std::size_t j = 0; j < c; ++j)
                detail::accumulate(px, i * c + j, y[i * c + j] * (n.grad[i * c + j] - dot));
        }
    });
}

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto pa = a.node();
    return detail::make_op({}, {s}, {a}, [pa](const detail::Node& n) {
        for (std::size_t i = 0; i < pa->values.size(); ++i) detail::accumulate(pa, i, n.grad[0]);
    });
}

inline Tensor mean_all(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.size());
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto pa = a.node();
    return detail::make_op({}, {s * inv}, {a}, [pa, inv](const detail::Node& n) {
        for (std::size_t i = 0; i < pa->values.size(); ++i) detail::accumulate(pa, i, n.grad[0] * inv);
    });
}

// axis 0 collapses rows -> {cols}; axis 1 collapses columns -> {rows}
inline Tensor sum_axis(const Tensor& x, int axis, bool mean = false) {
    detail::require_rank2(x, "sum_axis");
    if (axis != 0 && axis != 1) throw std::invalid_argument("sum_axis: axis must be 0 or 1");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    const std::size_t out_n = axis == 0 ? c : r;
    const double inv = mean ? 1.0 / static_cast<double>(axis == 0 ? r : c) : 1.0;
    std::vector<double> out(out_n, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[axis == 0 ? j : i] += x.values()[i * c + j];
    if (mean)
        for (double& v : out) v *= inv;
    auto px = x.node();
    return detail::make_op({out_n}, std::move(out), {x}, [px, axis, r, c, inv](const detail::Node& n) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
                detail::accumulate(px, i * c + j, n.grad[axis == 0 ? j : i] * inv);
    });
}

inline Tensor mean_axis(const Tensor& x, int axis) { return sum_axis(x, axis, true); }

inline Tensor row_l2norm(const Tensor& x) {
    detail::require_rank2(x, "row_l2norm");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<double> out(r);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double v = x.values()[i * c + j];
            s += v * v;
        }
        out[i] = std::sqrt(s);
    }
    auto px = x.node();
    std::vector<double> norms = out;
    return detail::make_op({r}, std::move(out), {x}, [px, norms, r, c](const detail::Node& n) {
        for (std::size_t i = 0; i < r; ++i) {
            if (norms[i] == 0.0) continue;  // subgradient 0 at the origin
            for (std::size_t j = 0; j < c; ++j)
                detail::accumulate(px, i * c + j, n.grad[i] * px->values[i * c + j] / norms[i]);
        }
    });
}

inline Tensor row_normalize(const Tensor& x) {
    detail::require_rank2(x, "row_normalize");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<double> out(r * c);
    std::vector<double> norms(r);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double v = x.values()[i * c + j];
            s += v * v;
        }
        norms[i] = std::sqrt(s);
        if (norms[i] == 0.0)
            throw std::runtime_error("row_normalize: zero-norm row " + std::to_string(i));
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] / norms[i];
    }
    auto px = x.node();
    std::vector<double> y = out;
    return detail::make_op({r, c}, std::move(out), {x}, [px, y, norms, r, c](const detail::Node& n) {
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += n.grad[i * c + j] * y[i * c + j];
            for (std::size_t j = 0; j < c; ++j)
                detail::accumulate(px, i * c + j, (n.grad[i * c + j] - dot * y[i * c + j]) / norms[i]);
        }
    });
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank2(x, "transpose");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.values()[i * c + j];
    auto px = x.node();
    return detail::make_op({c, r}, std::move(out), {x}, [px, r, c](const detail::Node& n) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) detail::accumulate(px, i * c + j, n.grad[j * r + i]);
    });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_size(shape) != x.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(shape));
    auto px = x.node();
    return detail::make_op(std::move(shape), x.values(), {x}, [px](const detail::Node& n) {
        for (std::size_t i = 0; i < n.size(); ++i) detail::accumulate(px, i, n.grad[i]);
    });
}

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
    detail::require_rank2(x, "gather_rows");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<double> out;
    out.reserve(rows.size() * c);
    for (std::size_t ri : rows) {
        if (ri >= r) throw std::invalid_argument("gather_rows: row index out of range");
        out.insert(out.end(), x.values().begin() + ri * c, x.values().begin() + (ri + 1) * c);
    }
    auto px = x.node();
    return detail::make_op({rows.size(), c}, std::move(out), {x}, [px, rows, c](const detail::Node& n) {
        for (std::size_t k = 0; k < rows.size(); ++k)
            for (std::size_t j = 0; j < c; ++j)
                detail::accumulate(px, rows[k] * c + j, n.grad[k * c + j]);
    });
}

// axis 0 stacks along rows (rank-1 inputs concatenate end to end);
// axis 1 places rank-2 blocks side by side.
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: empty input list");
    const std::size_t rank = parts[0].rank();
    for (const Tensor& p : parts)
        if (p.rank() != rank)
            throw std::invalid_argument("concat: mixed ranks " + shape_str(parts[0].shape()) +
                                        " vs " + shape_str(p.shape()));
    if (rank == 1) {
        if (axis != 0) throw std::invalid_argument("concat: rank-1 tensors only support axis 0");
        std::vector<double> out;
        std::vector<std::size_t> offsets;
        for (const Tensor& p : parts) {
            offsets.push_back(out.size());
            out.insert(out.end(), p.values().begin(), p.values().end());
        }
        std::vector<std::shared_ptr<detail::Node>> nodes;
        for (const Tensor& p : parts) nodes.push_back(p.node());
        return detail::make_op({out.size()}, std::move(out), parts,
                               [nodes, offsets](const detail::Node& n) {
                                   for (std::size_t k = 0; k < nodes.size(); ++k)
                                       for (std::size_t i = 0; i < nodes[k]->values.size(); ++i)
                                           detail::accumulate(nodes[k], i, n.grad[offsets[k] + i]);
                               });
    }
    if (rank != 2) throw std::invalid_argument("concat: rank must be 1 or 2");
    if (axis == 0) {
        const std::size_t c = parts[0].shape()[1];
        std::size_t r = 0;
        std::vector<double> out;
        std::vector<std::size_t> offsets;
        for (const Tensor& p : parts) {
            if (p.shape()[1] != c)
                throw std::invalid_argument("concat axis 0: column mismatch " +
                                            shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
            offsets.push_back(out.size());
            out.insert(out.end(), p.values().begin(), p.values().end());
            r += p.shape()[0];
        }
        std::vector<std::shared_ptr<detail::Node>> nodes;
        for (const Tensor& p : parts) nodes.push_back(p.node());
        return detail::make_op({r, c}, std::move(out), parts,
                               [nodes, offsets](const detail::Node& n) {
                                   for (std::size_t k = 0; k < nodes.size(); ++k)
                                       for (std::size_t i = 0; i < nodes[k]->values.size(); ++i)
                                           detail::accumulate(nodes[k], i, n.grad[offsets[k] + i]);
                               });
    }
    if (axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
    const std::size_t r = parts[0].shape()[0];
    std::size_t c = 0;
    std::vector<std::size_t> col_offsets;
    for (const Tensor& p : parts) {
        if (p.shape()[0] != r)
            throw std::invalid_argument("concat axis 1: row mismatch " + shape_str(parts[0].shape()) +
                                        " vs " + shape_str(p.shape()));
        col_offsets.push_back(c);
        c += p.shape()[1];
    }
    std::vector<double> out(r * c);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const std::size_t pc = parts[k].shape()[1];
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < pc; ++j)
                out[i * c + col_offsets[k] + j] = parts[k].values()[i * pc + j];
    }
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    return detail::make_op({r, c}, std::move(out), parts,
                           [nodes, col_offsets, r, c](const detail::Node& n) {
                               for (std::size_t k = 0; k < nodes.size(); ++k) {
                                   const std::size_t pc = nodes[k]->shape[1];
                                   for (std::size_t i = 0; i < r; ++i)
                                       for (std::size_t j = 0; j < pc; ++j)
                                           detail::accumulate(nodes[k], i * pc + j,
                                                              n.grad[i * c + col_offsets[k] + j]);
                               }
                           });
}

// Pairwise euclidean distances between rows: out[i,j] = ||x_i - x_j||.
// The diagonal is exactly zero and each (i,j)/(j,i) pair shares one
// computation, so the result is symmetric to the bit. Gradient at coincident
// rows is taken as zero.
inline Tensor pairwise_euclidean(const Tensor& x) {
    detail::require_rank2(x, "pairwise_euclidean");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<double> out(r * r, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = i + 1; j < r; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < c; ++k) {
                const double d = x.values()[i * c + k] - x.values()[j * c + k];
                s += d * d;
            }
            const double dist = std::sqrt(s);
            out[i * r + j] = dist;
            out[j * r + i] = dist;
        }
    auto px = x.node();
    std::vector<double> dv = out;
    return detail::make_op({r, r}, std::move(out), {x}, [px, dv, r, c](const detail::Node& n) {
        double* g = px->grad_buffer().data();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < r; ++j) {
                if (i == j || dv[i * r + j] == 0.0) continue;
                const double w = n.grad[i * r + j] / dv[i * r + j];
                if (w == 0.0) continue;
                for (std::size_t k = 0; k < c; ++k) {
                    const double d = px->values[i * c + k] - px->values[j * c + k];
                    g[i * c + k] += w * d;
                    g[j * c + k] -= w * d;
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| scaled by
// max(1, |analytic|, |central difference|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                         double epsilon) {
    if (!(epsilon > 0.0 && epsilon <= 1e-3))
        throw std::invalid_argument("grad_check: epsilon must lie in (0, 1e-3]");
    Tensor x(point.shape(), point.values(), true);
    Tensor out = f(x);
    const double f0 = out.item();
    if (!std::isfinite(f0)) throw std::runtime_error("grad_check: non-finite function value");
    out.backward();
    const std::vector<double> analytic = x.grad();

    std::vector<double> probe = point.values();
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + epsilon;
        const double fp = f(Tensor(point.shape(), probe)).item();
        probe[i] = orig - epsilon;
        const double fm = f(Tensor(point.shape(), probe)).item();
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("grad_check: non-finite function value at probe point");
        const double fd = (fp - fm) / (2.0 * epsilon);
        const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(fd)});
        worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
    }
    return worst;
}

}  // namespace cka
