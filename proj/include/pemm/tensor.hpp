#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace pemm {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << " x ";
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // allocated iff requires_grad
    bool requires_grad = false;
    bool leaf = true;
};

} // namespace detail

/// Dense float64 tensor. Copying a Tensor copies a handle: both copies share
/// storage and gradient, which is what lets backward closures reach the
/// forward pass's buffers. Leaf tensors (anything built via the factory
/// functions) accumulate gradient across backward calls until zero_grad();
/// op outputs get a fresh gradient on every backward.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return make(std::move(shape), requires_grad, true, 0.0, nullptr);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        return make(std::move(shape), requires_grad, true, value, nullptr);
    }

    static Tensor ones(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 1.0, requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> values,
                       bool requires_grad = false) {
        if (values.size() != shape_numel(shape))
            throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(shape));
        return make(std::move(shape), requires_grad, true, 0.0, &values);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    static Tensor vec(std::vector<double> values, bool requires_grad = false) {
        Shape s{values.size()};
        return from(std::move(s), std::move(values), requires_grad);
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false) {
        std::size_t m = rows.size();
        std::size_t n = m ? rows.begin()->size() : 0;
        std::vector<double> v;
        v.reserve(m * n);
        for (const auto& r : rows) {
            if (r.size() != n)
                throw ShapeError("Tensor::matrix: ragged rows");
            v.insert(v.end(), r.begin(), r.end());
        }
        return from({m, n}, std::move(v), requires_grad);
    }

    /// Internal: output node of an op (non-leaf when gradients are tracked).
    static Tensor op_node(Shape shape, bool requires_grad) {
        Tensor t = make(std::move(shape), requires_grad, !requires_grad, 0.0, nullptr);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl().shape; }
    std::size_t rank() const { return impl().shape.size(); }
    std::size_t dim(std::size_t i) const { return impl().shape.at(i); }
    std::size_t size() const { return impl().data.size(); }
    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    bool is_leaf() const { return impl().leaf; }

    std::vector<double>& values() { return impl().data; }
    const std::vector<double>& values() const { return impl().data; }

    /// Value of a one-element tensor.
    double value() const {
        if (size() != 1)
            throw ContractError("Tensor::value: tensor has " +
                                std::to_string(size()) + " elements");
        return impl().data[0];
    }

    double at(std::size_t i) const { return impl().data.at(i); }

    double at(std::size_t i, std::size_t j) const {
        const auto& s = impl().shape;
        if (s.size() != 2)
            throw ContractError("Tensor::at(i,j) on rank-" +
                                std::to_string(s.size()) + " tensor");
        if (i >= s[0] || j >= s[1])
            throw ContractError("Tensor::at: index out of range");
        return impl().data[i * s[1] + j];
    }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }

    /// Gradient buffer. Mutable through const handles: a Tensor is a shared
    /// handle, and gradient accumulation is interior state reached from
    /// backward closures that hold such handles.
    std::vector<double>& grad() const {
        require_grad_storage();
        return impl_->grad;
    }

    void zero_grad() const {
        if (has_grad())
            std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    /// Copy of the data as a fresh gradient-free leaf.
    Tensor detached() const {
        return from(shape(), values(), false);
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    static Tensor make(Shape shape, bool requires_grad, bool leaf, double fill,
                       std::vector<double>* steal) {
        for (std::size_t d : shape)
            if (d == 0)
                throw ShapeError("zero-sized dimension in shape " + shape_str(shape));
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = std::move(shape);
        std::size_t n = shape_numel(t.impl_->shape);
        if (steal)
            t.impl_->data = std::move(*steal);
        else
            t.impl_->data.assign(n, fill);
        t.impl_->requires_grad = requires_grad;
        t.impl_->leaf = leaf;
        if (requires_grad)
            t.impl_->grad.assign(n, 0.0);
        return t;
    }

    detail::TensorImpl& impl() {
        if (!impl_) throw ContractError("use of default-constructed tensor");
        return *impl_;
    }
    const detail::TensorImpl& impl() const {
        if (!impl_) throw ContractError("use of default-constructed tensor");
        return *impl_;
    }
    void require_grad_storage() const {
        if (!impl_ || impl_->grad.empty())
            throw ContractError("tensor has no gradient storage");
    }

    std::shared_ptr<detail::TensorImpl> impl_;
};

/// Records backward closures during a forward pass and replays them in
/// reverse. One tape per training step; clear() drops the retained graph.
class Tape {
public:
    void record(Tensor output, std::function<void()> pullback) {
        entries_.push_back({std::move(output), std::move(pullback)});
    }

    std::size_t node_count() const { return entries_.size(); }

    void clear() { entries_.clear(); }

    /// Seeds d(loss)=1 and runs all recorded pullbacks newest-first.
    /// Intermediate gradients are reset here; leaf gradients accumulate.
    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.size() != 1)
            throw ContractError("backward: loss must be a scalar tensor");
        if (!loss.requires_grad())
            throw ContractError(
                "backward: loss does not track gradients (no recorded graph)");
        for (auto& e : entries_)
            if (!e.out.is_leaf()) e.out.zero_grad();
        loss.grad()[0] = 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
            it->fn();
    }

private:
    struct Entry {
        Tensor out;
        std::function<void()> fn;
    };
    std::vector<Entry> entries_;
};

inline Tape*& detail_tape_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
}

/// Tape currently capturing ops on this thread, or nullptr.
inline Tape* active_tape() { return detail_tape_slot(); }

/// RAII activation of a tape. Ops run while a scope is alive are recorded.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : prev_(detail_tape_slot()) {
        detail_tape_slot() = &tape;
    }
    ~TapeScope() { detail_tape_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

/// backward() through the active tape.
inline void backward(const Tensor& loss) {
    Tape* t = active_tape();
    if (!t) throw StateError("backward: no active tape");
    t->backward(loss);
}

namespace detail {

inline bool track(std::initializer_list<const Tensor*> parents) {
    if (!active_tape()) return false;
    for (const Tensor* p : parents)
        if (p->requires_grad()) return true;
    return false;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("add", a, b);
    bool rg = detail::track({&a, &b});
    Tensor out = Tensor::op_node(a.shape(), rg);
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (rg)
        active_tape()->record(out, [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("sub", a, b);
    bool rg = detail::track({&a, &b});
    Tensor out = Tensor::op_node(a.shape(), rg);
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (rg)
        active_tape()->record(out, [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("mul", a, b);
    bool rg = detail::track({&a, &b});
    Tensor out = Tensor::op_node(a.shape(), rg);
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (rg)
        active_tape()->record(out, [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                const auto& bv2 = b.values();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                const auto& av2 = a.values();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
            }
        });
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    bool rg = detail::track({&a});
    Tensor out = Tensor::op_node(a.shape(), rg);
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
    if (rg)
        active_tape()->record(out, [a, out, s]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        });
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 operands, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1);
    const std::size_t k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner dimensions disagree: " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
    bool rg = detail::track({&a, &b});
    Tensor out = Tensor::op_node({m, n}, rg);
    {
        const double* av = a.values().data();
        const double* bv = b.values().data();
        double* ov = out.values().data();
        for (std::size_t i = 0; i < m; ++i) {
            double* orow = ov + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = av[i * k + p];
                const double* brow = bv + p * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
            }
        }
    }
    if (rg)
        active_tape()->record(out, [a, b, out, m, k, n]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* ga = a.grad().data();
                const double* bv = b.values().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* grow = g + i * n;
                        const double* brow = bv + p * n;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + p] += acc;
                    }
            }
            if (b.requires_grad()) {
                double* gb = b.grad().data();
                const double* av = a.values().data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = av[i * k + p];
                        const double* grow = g + i * n;
                        double* gbrow = gb + p * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                    }
            }
        });
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2)
        throw ShapeError("transpose: expected rank-2, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    bool rg = detail::track({&a});
    Tensor out = Tensor::op_node({n, m}, rg);
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
    if (rg)
        active_tape()->record(out, [a, out, m, n]() mutable {
            const auto& g = out.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    return out;
}

/// Sum of all elements, as a 1-element tensor.
inline Tensor sum(const Tensor& a) {
    bool rg = detail::track({&a});
    Tensor out = Tensor::op_node({1}, rg);
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    out.values()[0] = acc;
    if (rg)
        active_tape()->record(out, [a, out]() mutable {
            const double g = out.grad()[0];
            auto& ga = a.grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    return out;
}

// ---------------------------------------------------------------------------
// Activations and row softmax
// ---------------------------------------------------------------------------

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
    bool rg = detail::track({&a});
    Tensor out = Tensor::op_node(a.shape(), rg);
    const auto& av = a.values();
    auto& ov = out.values();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (std::size_t i = 0; i < ov.size(); ++i) {
        const double x = av[i];
        ov[i] = x * 0.5 * (1.0 + std::erf(x * inv_sqrt2));
    }
    if (rg)
        active_tape()->record(out, [a, out]() mutable {
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            const auto& g = out.grad();
            const auto& av2 = a.values();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double x = av2[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                ga[i] += g[i] * (cdf + x * pdf);
            }
        });
    return out;
}

/// Row-wise softmax of a rank-2 tensor, max-shifted for stability.
inline Tensor softmax_rows(const Tensor& a) {
    if (a.rank() != 2)
        throw ShapeError("softmax_rows: expected rank-2, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    bool rg = detail::track({&a});
    Tensor out = Tensor::op_node({m, n}, rg);
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = av.data() + i * n;
        double* orow = ov.data() + i * n;
        double mx = row[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            z += orow[j];
        }
        const double inv = 1.0 / z;
        for (std::size_t j = 0; j < n; ++j) orow[j] *= inv;
    }
    if (rg)
        active_tape()->record(out, [a, out, m, n]() mutable {
            const auto& g = out.grad();
            const auto& y = out.values();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = g.data() + i * n;
                const double* yrow = y.data() + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += grow[j] * yrow[j];
                double* garow = ga.data() + i * n;
                for (std::size_t j = 0; j < n; ++j)
                    garow[j] += yrow[j] * (grow[j] - dot);
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling on CHW images
// ---------------------------------------------------------------------------

namespace detail {

inline void pad_chw(const std::vector<double>& x, std::size_t c, std::size_t h,
                    std::size_t w, std::size_t p, std::vector<double>& out) {
    const std::size_t ph = h + 2 * p, pw = w + 2 * p;
    out.assign(c * ph * pw, 0.0);
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t y = 0; y < h; ++y) {
            const double* src = x.data() + (ci * h + y) * w;
            double* dst = out.data() + (ci * ph + y + p) * pw + p;
            std::copy(src, src + w, dst);
        }
}

} // namespace detail

/// 2-D convolution: input [C_in x H x W], weight [C_out x C_in x KH x KW].
/// Zero padding, integer stride; output geometry must divide evenly.
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
                     std::size_t pad = 0) {
    if (x.rank() != 3)
        throw ShapeError("conv2d: input must be [C x H x W], got " +
                         shape_str(x.shape()));
    if (w.rank() != 4)
        throw ShapeError("conv2d: weight must be [Co x Ci x KH x KW], got " +
                         shape_str(w.shape()));
    const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const std::size_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != ci)
        throw ShapeError("conv2d: weight expects " + std::to_string(w.dim(1)) +
                         " input channels, image has " + std::to_string(ci));
    if (stride == 0) throw GeometryError("conv2d: stride must be positive");
    if (kh % 2 == 0 || kw % 2 == 0)
        throw GeometryError("conv2d: kernel dims must be odd, got " +
                            std::to_string(kh) + "x" + std::to_string(kw));
    const std::size_t ph = h + 2 * pad, pw = wd + 2 * pad;
    if (ph < kh || pw < kw)
        throw GeometryError("conv2d: kernel " + std::to_string(kh) + "x" +
                            std::to_string(kw) + " exceeds padded input " +
                            std::to_string(ph) + "x" + std::to_string(pw));
    if ((ph - kh) % stride != 0 || (pw - kw) % stride != 0)
        throw GeometryError("conv2d: stride " + std::to_string(stride) +
                            " does not evenly cover padded input " +
                            std::to_string(ph) + "x" + std::to_string(pw));
    const std::size_t ho = (ph - kh) / stride + 1;
    const std::size_t wo = (pw - kw) / stride + 1;

    bool rg = detail::track({&x, &w});
    Tensor out = Tensor::op_node({co, ho, wo}, rg);
    std::vector<double> padded;
    detail::pad_chw(x.values(), ci, h, wd, pad, padded);
    {
        const double* wv = w.values().data();
        double* ov = out.values().data();
        for (std::size_t oc = 0; oc < co; ++oc)
            for (std::size_t ic = 0; ic < ci; ++ic)
                for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const double wval = wv[((oc * ci + ic) * kh + ky) * kw + kx];
                        for (std::size_t oy = 0; oy < ho; ++oy) {
                            const double* prow =
                                padded.data() + (ic * ph + oy * stride + ky) * pw + kx;
                            double* orow = ov + (oc * ho + oy) * wo;
                            if (stride == 1)
                                for (std::size_t ox = 0; ox < wo; ++ox)
                                    orow[ox] += wval * prow[ox];
                            else
                                for (std::size_t ox = 0; ox < wo; ++ox)
                                    orow[ox] += wval * prow[ox * stride];
                        }
                    }
    }
    if (rg)
        active_tape()->record(out, [x, w, out, stride, pad, ci, h, wd, co, kh, kw,
                                    ph, pw, ho, wo]() mutable {
            const double* g = out.grad().data();
            std::vector<double> padded2;
            detail::pad_chw(x.values(), ci, h, wd, pad, padded2);
            if (w.requires_grad()) {
                double* gw = w.grad().data();
                for (std::size_t oc = 0; oc < co; ++oc)
                    for (std::size_t ic = 0; ic < ci; ++ic)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                double acc = 0.0;
                                for (std::size_t oy = 0; oy < ho; ++oy) {
                                    const double* prow = padded2.data() +
                                        (ic * ph + oy * stride + ky) * pw + kx;
                                    const double* grow = g + (oc * ho + oy) * wo;
                                    if (stride == 1)
                                        for (std::size_t ox = 0; ox < wo; ++ox)
                                            acc += prow[ox] * grow[ox];
                                    else
                                        for (std::size_t ox = 0; ox < wo; ++ox)
                                            acc += prow[ox * stride] * grow[ox];
                                }
                                gw[((oc * ci + ic) * kh + ky) * kw + kx] += acc;
                            }
            }
            if (x.requires_grad()) {
                std::vector<double> gpad(ci * ph * pw, 0.0);
                const double* wv = w.values().data();
                for (std::size_t oc = 0; oc < co; ++oc)
                    for (std::size_t ic = 0; ic < ci; ++ic)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const double wval =
                                    wv[((oc * ci + ic) * kh + ky) * kw + kx];
                                for (std::size_t oy = 0; oy < ho; ++oy) {
                                    double* prow = gpad.data() +
                                        (ic * ph + oy * stride + ky) * pw + kx;
                                    const double* grow = g + (oc * ho + oy) * wo;
                                    if (stride == 1)
                                        for (std::size_t ox = 0; ox < wo; ++ox)
                                            prow[ox] += wval * grow[ox];
                                    else
                                        for (std::size_t ox = 0; ox < wo; ++ox)
                                            prow[ox * stride] += wval * grow[ox];
                                }
                            }
                auto& gx = x.grad();
                for (std::size_t ic = 0; ic < ci; ++ic)
                    for (std::size_t y = 0; y < h; ++y) {
                        const double* src =
                            gpad.data() + (ic * ph + y + pad) * pw + pad;
                        double* dst = gx.data() + (ic * h + y) * wd;
                        for (std::size_t xcol = 0; xcol < wd; ++xcol)
                            dst[xcol] += src[xcol];
                    }
            }
        });
    return out;
}

/// Adds a per-channel bias to a [C x H x W] tensor.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 3)
        throw ShapeError("add_channel_bias: input must be [C x H x W], got " +
                         shape_str(x.shape()));
    if (b.rank() != 1 || b.dim(0) != x.dim(0))
        throw ShapeError("add_channel_bias: bias " + shape_str(b.shape()) +
                         " does not match " + std::to_string(x.dim(0)) + " channels");
    const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
    bool rg = detail::track({&x, &b});
    Tensor out = Tensor::op_node(x.shape(), rg);
    const auto& xv = x.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t ci = 0; ci < c; ++ci) {
        const double bias = bv[ci];
        for (std::size_t p = 0; p < plane; ++p)
            ov[ci * plane + p] = xv[ci * plane + p] + bias;
    }
    if (rg)
        active_tape()->record(out, [x, b, out, c, plane]() mutable {
            const auto& g = out.grad();
            if (x.requires_grad()) {
                auto& gx = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t ci = 0; ci < c; ++ci) {
                    double acc = 0.0;
                    for (std::size_t p = 0; p < plane; ++p) acc += g[ci * plane + p];
                    gb[ci] += acc;
                }
            }
        });
    return out;
}

/// 2x2 average pooling with stride 2; spatial dims must be even.
inline Tensor avgpool2(const Tensor& x) {
    if (x.rank() != 3)
        throw ShapeError("avgpool2: input must be [C x H x W], got " +
                         shape_str(x.shape()));
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % 2 != 0 || w % 2 != 0)
        throw GeometryError("avgpool2: spatial dims " + std::to_string(h) + "x" +
                            std::to_string(w) + " are not divisible by 2");
    const std::size_t ho = h / 2, wo = w / 2;
    bool rg = detail::track({&x});
    Tensor out = Tensor::op_node({c, ho, wo}, rg);
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const std::size_t base = (ci * h + 2 * oy) * w + 2 * ox;
                ov[(ci * ho + oy) * wo + ox] =
                    0.25 * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
            }
    if (rg)
        active_tape()->record(out, [x, out, c, h, w, ho, wo]() mutable {
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (std::size_t ci = 0; ci < c; ++ci)
                for (std::size_t oy = 0; oy < ho; ++oy)
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const double gv = 0.25 * g[(ci * ho + oy) * wo + ox];
                        const std::size_t base = (ci * h + 2 * oy) * w + 2 * ox;
                        gx[base] += gv;
                        gx[base + 1] += gv;
                        gx[base + w] += gv;
                        gx[base + w + 1] += gv;
                    }
        });
    return out;
}

/// Global average pooling: [C x H x W] -> [C].
inline Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 3)
        throw ShapeError("global_avg_pool: input must be [C x H x W], got " +
                         shape_str(x.shape()));
    const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
    bool rg = detail::track({&x});
    Tensor out = Tensor::op_node({c}, rg);
    const auto& xv = x.values();
    auto& ov = out.values();
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t ci = 0; ci < c; ++ci) {
        double acc = 0.0;
        for (std::size_t p = 0; p < plane; ++p) acc += xv[ci * plane + p];
        ov[ci] = acc * inv;
    }
    if (rg)
        active_tape()->record(out, [x, out, c, plane, inv]() mutable {
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (std::size_t ci = 0; ci < c; ++ci) {
                const double gv = g[ci] * inv;
                for (std::size_t p = 0; p < plane; ++p) gx[ci * plane + p] += gv;
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// Layout changes between CHW images and token matrices
// ---------------------------------------------------------------------------

/// [C x H x W] -> [(H*W) x C]: one token per spatial position.
inline Tensor tokens_from_chw(const Tensor& x) {
    if (x.rank() != 3)
        throw ShapeError("tokens_from_chw: input must be [C x H x W], got " +
                         shape_str(x.shape()));
    const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
    bool rg = detail::track({&x});
    Tensor out = Tensor::op_node({plane, c}, rg);
    const auto& xv = x.values();
    auto& ov = out.values();
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t p = 0; p < plane; ++p) ov[p * c + ci] = xv[ci * plane + p];
    if (rg)
        active_tape()->record(out, [x, out, c, plane]() mutable {
            const auto& g = out.grad();
            auto& gx = x.grad();
            for (std::size_t ci = 0; ci < c; ++ci)
                for (std::size_t p = 0; p < plane; ++p)
                    gx[ci * plane + p] += g[p * c + ci];
        });
    return out;
}

/// [(H*W) x C] -> [C x H x W]; inverse of tokens_from_chw.
inline Tensor chw_from_tokens(const Tensor& t, std::size_t h, std::size_t w) {
    if (t.rank() != 2)
        throw ShapeError("chw_from_tokens: input must be [N x C], got " +
                         shape_str(t.shape()));
    if (t.dim(0) != h * w)
        throw ShapeError("chw_from_tokens: " + std::to_string(t.dim(0)) +
                         " tokens cannot tile " + std::to_string(h) + "x" +
                         std::to_string(w));
    const std::size_t c = t.dim(1), plane = h * w;
    bool rg = detail::track({&t});
    Tensor out = Tensor::op_node({c, h, w}, rg);
    const auto& tv = t.values();
    auto& ov = out.values();
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t p = 0; p < plane; ++p) ov[ci * plane + p] = tv[p * c + ci];
    if (rg)
        active_tape()->record(out, [t, out, c, plane]() mutable {
            const auto& g = out.grad();
            auto& gt = t.grad();
            for (std::size_t ci = 0; ci < c; ++ci)
                for (std::size_t p = 0; p < plane; ++p)
                    gt[p * c + ci] += g[ci * plane + p];
        });
    return out;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Stacks B rank-1 tensors of equal length into a [B x d] matrix.
inline Tensor stack_rows(std::span<const Tensor> rows) {
    if (rows.empty()) throw ShapeError("stack_rows: no rows");
    const std::size_t d = rows[0].size();
    for (const Tensor& r : rows) {
        if (r.rank() != 1)
            throw ShapeError("stack_rows: rows must be rank-1, got " +
                             shape_str(r.shape()));
        if (r.size() != d)
            throw ShapeError("stack_rows: row lengths differ (" + std::to_string(d) +
                             " vs " + std::to_string(r.size()) + ")");
    }
    bool rg = false;
    if (active_tape())
        for (const Tensor& r : rows)
            if (r.requires_grad()) {
                rg = true;
                break;
            }
    Tensor out = Tensor::op_node({rows.size(), d}, rg);
    auto& ov = out.values();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& rv = rows[i].values();
        std::copy(rv.begin(), rv.end(), ov.begin() + i * d);
    }
    if (rg) {
        std::vector<Tensor> kept(rows.begin(), rows.end());
        active_tape()->record(out, [kept = std::move(kept), out, d]() mutable {
            const auto& g = out.grad();
            for (std::size_t i = 0; i < kept.size(); ++i) {
                if (!kept[i].requires_grad()) continue;
                auto& gr = kept[i].grad();
                for (std::size_t j = 0; j < d; ++j) gr[j] += g[i * d + j];
            }
        });
    }
    return out;
}

/// Concatenates two [m x p] / [m x q] matrices into [m x (p+q)].
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw ShapeError("concat_cols: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
    bool rg = detail::track({&a, &b});
    Tensor out = Tensor::op_node({m, p + q}, rg);
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < m; ++i) {
        std::copy(av.begin() + i * p, av.begin() + (i + 1) * p,
                  ov.begin() + i * (p + q));
        std::copy(bv.begin() + i * q, bv.begin() + (i + 1) * q,
                  ov.begin() + i * (p + q) + p);
    }
    if (rg)
        active_tape()->record(out, [a, b, out, m, p, q]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < p; ++j)
                        ga[i * p + j] += g[i * (p + q) + j];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < q; ++j)
                        gb[i * q + j] += g[i * (p + q) + p + j];
            }
        });
    return out;
}

/// Adds a length-n row vector to every row of an [m x n] matrix.
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
        throw ShapeError("add_rowvec: incompatible shapes " + shape_str(x.shape()) +
                         " and " + shape_str(b.shape()));
    const std::size_t m = x.dim(0), n = x.dim(1);
    bool rg = detail::track({&x, &b});
    Tensor out = Tensor::op_node({m, n}, rg);
    const auto& xv = x.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ov[i * n + j] = xv[i * n + j] + bv[j];
    if (rg)
        active_tape()->record(out, [x, b, out, m, n]() mutable {
            const auto& g = out.grad();
            if (x.requires_grad()) {
                auto& gx = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// Classification loss
// ---------------------------------------------------------------------------

/// Mean cross-entropy of [B x K] logits against integer labels,
/// computed via a max-shifted log-sum-exp.
inline Tensor softmax_cross_entropy(const Tensor& logits,
                                    std::span<const int> labels) {
    if (logits.rank() != 2)
        throw ShapeError("softmax_cross_entropy: logits must be [B x K], got " +
                         shape_str(logits.shape()));
    const std::size_t bsz = logits.dim(0), k = logits.dim(1);
    if (labels.size() != bsz)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(bsz) + " rows");
    for (int lab : labels)
        if (lab < 0 || static_cast<std::size_t>(lab) >= k)
            throw DataError("softmax_cross_entropy: label " + std::to_string(lab) +
                            " outside [0, " + std::to_string(k) + ")");
    bool rg = detail::track({&logits});
    Tensor out = Tensor::op_node({1}, rg);
    const auto& lv = logits.values();
    double total = 0.0;
    for (std::size_t i = 0; i < bsz; ++i) {
        const double* row = lv.data() + i * k;
        double mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
        total += mx + std::log(z) - row[static_cast<std::size_t>(labels[i])];
    }
    out.values()[0] = total / static_cast<double>(bsz);
    if (rg) {
        std::vector<int> labs(labels.begin(), labels.end());
        active_tape()->record(out, [logits, out, labs = std::move(labs), bsz,
                                    k]() mutable {
            const double g = out.grad()[0] / static_cast<double>(bsz);
            const auto& lv2 = logits.values();
            auto& gl = logits.grad();
            for (std::size_t i = 0; i < bsz; ++i) {
                const double* row = lv2.data() + i * k;
                double mx = row[0];
                for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
                double z = 0.0;
                for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
                const double inv = 1.0 / z;
                double* grow = gl.data() + i * k;
                for (std::size_t j = 0; j < k; ++j) {
                    double p = std::exp(row[j] - mx) * inv;
                    grow[j] += g * (p - (static_cast<std::size_t>(labs[i]) == j));
                }
            }
        });
    }
    return out;
}

} // namespace pemm
