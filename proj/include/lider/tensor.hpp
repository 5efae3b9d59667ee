#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lider/errors.hpp"
#include "lider/linalg.hpp"

namespace lider {

class Tape;

// Dense 64-bit float array with shape. Values are immutable; "updating" a
// parameter means building a new Tensor. A Tensor may reference a node on a
// recording tape (graph.node >= 0), in which case losses derived from it can
// be backpropagated.
class Tensor {
public:
    struct GraphRef {
        const Tape* tape = nullptr;
        int node = -1;
    };

    Tensor() : shape_{}, data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data, bool grad_enabled = false)
        : shape_(std::move(shape)),
          data_(std::make_shared<const std::vector<double>>(std::move(data))),
          grad_enabled_(grad_enabled) {
        if (numel(shape_) != data_->size())
            throw ShapeError("tensor data length does not match shape");
    }

    static Tensor scalar(double v, bool grad_enabled = false) {
        return Tensor({}, {v}, grad_enabled);
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                         bool grad_enabled = false) {
        return Tensor({rows, cols}, std::move(data), grad_enabled);
    }

    static Tensor zeros(std::vector<std::size_t> shape) {
        const std::size_t n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    const std::vector<double>& data() const { return *data_; }
    std::shared_ptr<const std::vector<double>> data_ptr() const { return data_; }
    std::size_t size() const { return data_->size(); }
    bool grad_enabled() const { return grad_enabled_; }

    std::size_t rank() const { return shape_.size(); }
    std::size_t rows() const { return rank() == 2 ? shape_[0] : throw ShapeError("not a matrix"); }
    std::size_t cols() const { return rank() == 2 ? shape_[1] : throw ShapeError("not a matrix"); }

    double value() const {
        if (size() != 1) throw ShapeError("value() requires a single-element tensor");
        return (*data_)[0];
    }

    double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }

    // Identity key for gradient lookup: two Tensors naming the same buffer
    // are the same leaf.
    const void* id() const { return static_cast<const void*>(data_.get()); }

    static std::size_t numel(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }

    GraphRef graph;  // set by tape ops; default = not recorded

private:
    std::vector<std::size_t> shape_;
    std::shared_ptr<const std::vector<double>> data_;
    bool grad_enabled_ = false;
};

// Same values, no tape reference, no gradient tracking.
inline Tensor detach(const Tensor& t) {
    Tensor out = t;
    out.graph = {};
    if (out.grad_enabled()) {
        // rebuild without the grad flag; shares the same data buffer
        return Tensor(t.shape(), t.data(), false);
    }
    return out;
}

// Gradient map produced by one backward pass, keyed by leaf identity.
class Gradients {
public:
    void insert(const void* leaf, Tensor grad) { by_leaf_.emplace(leaf, std::move(grad)); }

    bool contains(const Tensor& leaf) const { return by_leaf_.count(leaf.id()) > 0; }

    // Gradient of the loss w.r.t. `leaf`; zeros when the leaf was not
    // reachable from the loss.
    Tensor get(const Tensor& leaf) const {
        auto it = by_leaf_.find(leaf.id());
        if (it != by_leaf_.end()) return it->second;
        return Tensor::zeros(leaf.shape());
    }

private:
    std::unordered_map<const void*, Tensor> by_leaf_;
};

// Recording of operations for one forward pass. Single-threaded; one
// backward pass per recording.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    struct Node {
        const char* op;
        std::vector<int> inputs;
        std::vector<std::size_t> shape;
        std::size_t size;
        std::vector<double> grad;  // allocated on first touch during backward
        std::function<void(Tape&, const std::vector<double>&)> back;  // null for leaves
    };

    bool consumed() const { return consumed_; }
    std::size_t num_nodes() const { return nodes_.size(); }

    // True when an op involving `t` must be recorded.
    bool tracked(const Tensor& t) const {
        if (t.graph.node >= 0) {
            if (t.graph.tape != this)
                throw TapeError("tensor belongs to a different tape");
            return true;
        }
        return t.grad_enabled();
    }

    // Node id for an input tensor, registering it as a leaf on first use.
    int input_id(const Tensor& t) {
        if (!tracked(t)) return -1;
        if (t.graph.node >= 0) return t.graph.node;
        auto it = leaf_by_data_.find(t.id());
        if (it != leaf_by_data_.end()) return it->second;
        const int id = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{"leaf", {}, t.shape(), t.size(), {}, nullptr});
        leaf_by_data_.emplace(t.id(), id);
        leaves_.push_back({t.id(), t.shape(), id, t.grad_enabled()});
        return id;
    }

    Tensor emit(const char* op, std::vector<std::size_t> shape, std::vector<double> data,
                std::vector<int> inputs,
                std::function<void(Tape&, const std::vector<double>&)> back) {
        const int id = static_cast<int>(nodes_.size());
        const std::size_t size = Tensor::numel(shape);
        nodes_.push_back(Node{op, std::move(inputs), shape, size, {}, std::move(back)});
        Tensor out(std::move(shape), std::move(data));
        out.graph = {this, id};
        return out;
    }

    std::vector<double>& grad_buffer(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.empty()) n.grad.assign(n.size, 0.0);
        return n.grad;
    }

    void accumulate(int id, const std::vector<double>& g) {
        if (id < 0) return;
        std::vector<double>& buf = grad_buffer(id);
        for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
    }

    Gradients backward(const Tensor& loss) {
        if (consumed_) throw TapeError("backward already ran on this tape");
        if (loss.graph.tape != this || loss.graph.node < 0)
            throw TapeError("loss is not a live recording on this tape");
        if (loss.size() != 1) throw ShapeError("backward expects a scalar loss");
        consumed_ = true;
        grad_buffer(loss.graph.node)[0] = 1.0;
        for (int i = loss.graph.node; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.grad.empty() && n.back) n.back(*this, n.grad);
        }
        Gradients grads;
        for (const Leaf& leaf : leaves_) {
            if (!leaf.grad_enabled) continue;
            Node& n = nodes_[static_cast<std::size_t>(leaf.node)];
            if (n.grad.empty()) continue;  // unreachable from loss; reads as zeros
            grads.insert(leaf.data, Tensor(leaf.shape, n.grad));
        }
        return grads;
    }

private:
    struct Leaf {
        const void* data;
        std::vector<std::size_t> shape;
        int node;
        bool grad_enabled;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaf_by_data_;
    std::vector<Leaf> leaves_;
    bool consumed_ = false;
};

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---- differentiable operations ----

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions do not agree");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n);
    matmul_kernel(a.data().data(), b.data().data(), out.data(), m, k, n);

    const int ia = tape.input_id(a), ib = tape.input_id(b);
    if (ia < 0 && ib < 0) return Tensor::matrix(m, n, std::move(out));
    auto a_data = a.data_ptr();
    auto b_data = b.data_ptr();
    return tape.emit("matmul", {m, n}, std::move(out), {ia, ib},
                     [ia, ib, a_data, b_data, m, k, n](Tape& t, const std::vector<double>& g) {
                         if (ia >= 0) {  // dA = G * B^T
                             std::vector<double>& da = t.grad_buffer(ia);
                             const double* b_ = b_data->data();
                             for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t p = 0; p < k; ++p) {
                                     double s = 0.0;
                                     for (std::size_t j = 0; j < n; ++j)
                                         s += g[i * n + j] * b_[p * n + j];
                                     da[i * k + p] += s;
                                 }
                         }
                         if (ib >= 0) {  // dB = A^T * G
                             std::vector<double>& db = t.grad_buffer(ib);
                             const double* a_ = a_data->data();
                             for (std::size_t p = 0; p < k; ++p)
                                 for (std::size_t j = 0; j < n; ++j) {
                                     double s = 0.0;
                                     for (std::size_t i = 0; i < m; ++i)
                                         s += a_[i * k + p] * g[i * n + j];
                                     db[p * n + j] += s;
                                 }
                         }
                     });
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: rank-2 tensor required");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];

    const int ia = tape.input_id(a);
    if (ia < 0) return Tensor::matrix(n, m, std::move(out));
    return tape.emit("transpose", {n, m}, std::move(out), {ia},
                     [ia, m, n](Tape& t, const std::vector<double>& g) {
                         std::vector<double>& da = t.grad_buffer(ia);
                         for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[j * m + i];
                     });
}

inline Tensor relu(Tape& tape, const Tensor& a) {
    std::vector<double> out(a.size());
    relu_kernel(a.data().data(), out.data(), a.size());

    const int ia = tape.input_id(a);
    if (ia < 0) return Tensor(a.shape(), std::move(out));
    auto x = a.data_ptr();
    return tape.emit("relu", a.shape(), std::move(out), {ia},
                     [ia, x](Tape& t, const std::vector<double>& g) {
                         std::vector<double>& da = t.grad_buffer(ia);
                         for (std::size_t i = 0; i < g.size(); ++i)
                             if ((*x)[i] > 0.0) da[i] += g[i];
                     });
}

inline Tensor l2_normalize_rows(Tape& tape, const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("l2_normalize_rows: rank-2 tensor required");
    const std::size_t rows = a.rows(), cols = a.cols();
    std::vector<double> out(a.size());
    l2_normalize_rows_kernel(a.data().data(), out.data(), rows, cols);

    const int ia = tape.input_id(a);
    if (ia < 0) return Tensor(a.shape(), std::move(out));
    // save per-row denominators and the normalized rows for the backward pass
    auto denoms = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r)
        (*denoms)[r] = std::max(l2_norm(a.data().data() + r * cols, cols), kRowNormEps);
    auto y = std::make_shared<std::vector<double>>(out);
    return tape.emit("l2_normalize_rows", a.shape(), std::move(out), {ia},
                     [ia, denoms, y, rows, cols](Tape& t, const std::vector<double>& g) {
                         std::vector<double>& da = t.grad_buffer(ia);
                         for (std::size_t r = 0; r < rows; ++r) {
                             const double* gr = g.data() + r * cols;
                             const double* yr = y->data() + r * cols;
                             const double inv = 1.0 / (*denoms)[r];
                             const double gy = dot(gr, yr, cols);
                             for (std::size_t c = 0; c < cols; ++c)
                                 da[r * cols + c] += (gr[c] - gy * yr[c]) * inv;
                         }
                     });
}

// Mean negative log softmax probability of the true class. When `mask` is
// given the softmax runs over the masked class subset only, so masked-out
// logits get exactly zero gradient.
inline Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                                    const std::vector<int>& labels,
                                    const std::optional<std::vector<int>>& mask = std::nullopt) {
    if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be B x C");
    const std::size_t batch = logits.rows(), classes = logits.cols();
    if (labels.size() != batch)
        throw ShapeError("softmax_cross_entropy: one label per row required");

    std::vector<int> active;
    if (mask) {
        active = *mask;
        std::sort(active.begin(), active.end());
        active.erase(std::unique(active.begin(), active.end()), active.end());
        if (active.empty()) throw ConfigError("softmax_cross_entropy: empty class mask");
        for (int c : active)
            if (c < 0 || static_cast<std::size_t>(c) >= classes)
                throw ConfigError("softmax_cross_entropy: mask class out of range");
    } else {
        active.resize(classes);
        for (std::size_t c = 0; c < classes; ++c) active[c] = static_cast<int>(c);
    }

    auto probs = std::make_shared<std::vector<double>>(batch * classes, 0.0);
    double loss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        const int y = labels[b];
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw ConfigError("softmax_cross_entropy: label out of range");
        if (mask && !std::binary_search(active.begin(), active.end(), y))
            throw ConfigError("softmax_cross_entropy: label outside class mask");
        const double* row = logits.data().data() + b * classes;
        double mx = row[active[0]];
        for (int c : active) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (int c : active) z += std::exp(row[c] - mx);
        for (int c : active)
            (*probs)[b * classes + static_cast<std::size_t>(c)] = std::exp(row[c] - mx) / z;
        loss -= row[y] - mx - std::log(z);
    }
    loss /= static_cast<double>(batch);

    const int il = tape.input_id(logits);
    if (il < 0) return Tensor::scalar(loss);
    auto lbl = std::make_shared<std::vector<int>>(labels);
    return tape.emit("softmax_cross_entropy", {}, {loss}, {il},
                     [il, probs, lbl, batch, classes](Tape& t, const std::vector<double>& g) {
                         std::vector<double>& dl = t.grad_buffer(il);
                         const double scale = g[0] / static_cast<double>(batch);
                         for (std::size_t b = 0; b < batch; ++b) {
                             for (std::size_t c = 0; c < classes; ++c) {
                                 double d = (*probs)[b * classes + c];
                                 if (static_cast<std::size_t>((*lbl)[b]) == c) d -= 1.0;
                                 dl[b * classes + c] += scale * d;
                             }
                         }
                     });
}

inline Tensor mse(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mse");
    const std::size_t n = a.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.data()[i] - b.data()[i];
        loss += d * d;
    }
    loss /= static_cast<double>(n);

    const int ia = tape.input_id(a), ib = tape.input_id(b);
    if (ia < 0 && ib < 0) return Tensor::scalar(loss);
    auto a_data = a.data_ptr();
    auto b_data = b.data_ptr();
    return tape.emit("mse", {}, {loss}, {ia, ib},
                     [ia, ib, a_data, b_data, n](Tape& t, const std::vector<double>& g) {
                         const double scale = 2.0 * g[0] / static_cast<double>(n);
                         if (ia >= 0) {
                             std::vector<double>& da = t.grad_buffer(ia);
                             for (std::size_t i = 0; i < n; ++i)
                                 da[i] += scale * ((*a_data)[i] - (*b_data)[i]);
                         }
                         if (ib >= 0) {
                             std::vector<double>& db = t.grad_buffer(ib);
                             for (std::size_t i = 0; i < n; ++i)
                                 db[i] -= scale * ((*a_data)[i] - (*b_data)[i]);
                         }
                     });
}

namespace detail {
inline double sign_or_zero(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }
}  // namespace detail

// Mean absolute value; subgradient at 0 is 0.
inline Tensor abs_mean(Tape& tape, const Tensor& a) {
    const std::size_t n = a.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) loss += std::abs(a.data()[i]);
    loss /= static_cast<double>(n);

    const int ia = tape.input_id(a);
    if (ia < 0) return Tensor::scalar(loss);
    auto x = a.data_ptr();
    return tape.emit("abs_mean", {}, {loss}, {ia},
                     [ia, x, n](Tape& t, const std::vector<double>& g) {
                         std::vector<double>& da = t.grad_buffer(ia);
                         const double scale = g[0] / static_cast<double>(n);
                         for (std::size_t i = 0; i < n; ++i)
                             da[i] += scale * detail::sign_or_zero((*x)[i]);
                     });
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];

    const int ia = tape.input_id(a), ib = tape.input_id(b);
    if (ia < 0 && ib < 0) return Tensor(a.shape(), std::move(out));
    return tape.emit("add", a.shape(), std::move(out), {ia, ib},
                     [ia, ib](Tape& t, const std::vector<double>& g) {
                         t.accumulate(ia, g);
                         t.accumulate(ib, g);
                     });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];

    const int ia = tape.input_id(a), ib = tape.input_id(b);
    if (ia < 0 && ib < 0) return Tensor(a.shape(), std::move(out));
    return tape.emit("sub", a.shape(), std::move(out), {ia, ib},
                     [ia, ib](Tape& t, const std::vector<double>& g) {
                         t.accumulate(ia, g);
                         if (ib >= 0) {
                             std::vector<double>& db = t.grad_buffer(ib);
                             for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
                         }
                     });
}

inline Tensor scale(Tape& tape, const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;

    const int ia = tape.input_id(a);
    if (ia < 0) return Tensor(a.shape(), std::move(out));
    return tape.emit("scale", a.shape(), std::move(out), {ia},
                     [ia, s](Tape& t, const std::vector<double>& g) {
                         std::vector<double>& da = t.grad_buffer(ia);
                         for (std::size_t i = 0; i < g.size(); ++i) da[i] += s * g[i];
                     });
}

inline Tensor sum(Tape& tape, const Tensor& a) {
    double total = 0.0;
    for (double x : a.data()) total += x;

    const int ia = tape.input_id(a);
    if (ia < 0) return Tensor::scalar(total);
    const std::size_t n = a.size();
    return tape.emit("sum", {}, {total}, {ia},
                     [ia, n](Tape& t, const std::vector<double>& g) {
                         std::vector<double>& da = t.grad_buffer(ia);
                         for (std::size_t i = 0; i < n; ++i) da[i] += g[0];
                     });
}

inline Tensor abs_elem(Tape& tape, const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(a.data()[i]);

    const int ia = tape.input_id(a);
    if (ia < 0) return Tensor(a.shape(), std::move(out));
    auto x = a.data_ptr();
    return tape.emit("abs", a.shape(), std::move(out), {ia},
                     [ia, x](Tape& t, const std::vector<double>& g) {
                         std::vector<double>& da = t.grad_buffer(ia);
                         for (std::size_t i = 0; i < g.size(); ++i)
                             da[i] += g[i] * detail::sign_or_zero((*x)[i]);
                     });
}

// Rank-1 tensor from K scalar tensors; gradients route back per component.
inline Tensor stack_scalars(Tape& tape, const std::vector<Tensor>& parts) {
    std::vector<double> out(parts.size());
    std::vector<int> ids(parts.size());
    bool any = false;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (parts[i].size() != 1) throw ShapeError("stack_scalars: all parts must be scalars");
        out[i] = parts[i].value();
        ids[i] = tape.input_id(parts[i]);
        any = any || ids[i] >= 0;
    }
    if (!any) return Tensor({parts.size()}, std::move(out));
    return tape.emit("stack_scalars", {parts.size()}, std::move(out), ids,
                     [ids](Tape& t, const std::vector<double>& g) {
                         for (std::size_t i = 0; i < ids.size(); ++i)
                             if (ids[i] >= 0) t.grad_buffer(ids[i])[0] += g[i];
                     });
}

// v^T M v for a constant vector v. The gradient w.r.t. M is g * v v^T; v is
// treated as a fixed direction.
inline Tensor quadratic_form(Tape& tape, const Tensor& m, const std::vector<double>& v) {
    if (m.rank() != 2 || m.rows() != m.cols())
        throw ShapeError("quadratic_form: square matrix required");
    const std::size_t n = m.rows();
    if (v.size() != n) throw ShapeError("quadratic_form: vector length mismatch");
    std::vector<double> mv(n);
    matvec(m.data().data(), v.data(), mv.data(), n);
    const double val = dot(v.data(), mv.data(), n);

    const int im = tape.input_id(m);
    if (im < 0) return Tensor::scalar(val);
    auto vc = std::make_shared<std::vector<double>>(v);
    return tape.emit("quadratic_form", {}, {val}, {im},
                     [im, vc, n](Tape& t, const std::vector<double>& g) {
                         std::vector<double>& dm = t.grad_buffer(im);
                         for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < n; ++j)
                                 dm[i * n + j] += g[0] * (*vc)[i] * (*vc)[j];
                     });
}

inline Gradients backward(Tape& tape, const Tensor& loss) { return tape.backward(loss); }

// One plain SGD step: p <- p - lr * g for each parameter. Throws NumericError
// on non-finite gradients so callers can surface runtime blow-ups.
inline void sgd_step(const std::vector<Tensor*>& params, const Gradients& grads, double lr) {
    if (!(lr > 0.0)) throw ConfigError("sgd_step: learning rate must be positive");
    for (Tensor* p : params) {
        const Tensor g = grads.get(*p);
        std::vector<double> next(p->size());
        for (std::size_t i = 0; i < next.size(); ++i) {
            if (!std::isfinite(g.data()[i]))
                throw NumericError("sgd_step: non-finite gradient");
            next[i] = p->data()[i] - lr * g.data()[i];
        }
        *p = Tensor(p->shape(), std::move(next), true);
    }
}

}  // namespace lider
