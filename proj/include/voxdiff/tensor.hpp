#pragma once

#include <algorithm>
#include <atomic>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>

#include "voxdiff/common.hpp"

namespace voxdiff {

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<Scalar> data;
    std::vector<Scalar> grad;  // sized lazily, same layout as data
    bool needs_grad = false;   // leaf flag set by user, derived for op outputs
    bool is_leaf = true;
    uint64_t seq = 0;  // creation order; defines the backward schedule
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void()> backward_fn;

    int64_t numel() const { return shape_numel(shape); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

inline std::atomic<uint64_t>& seq_counter() {
    static std::atomic<uint64_t> c{0};
    return c;
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool& finite_check_flag() {
#ifdef NDEBUG
    static bool enabled = false;
#else
    static bool enabled = true;
#endif
    return enabled;
}

}  // namespace detail

/// Disables graph construction for the enclosing scope (inference paths).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Toggle post-op NaN/Inf scanning (on by default in debug builds).
inline void set_finite_checks(bool on) { detail::finite_check_flag() = on; }
inline bool finite_checks_enabled() { return detail::finite_check_flag(); }

/// Dense row-major tensor with reverse-mode autodiff.
///
/// A Tensor is a cheap value handle onto a shared node. Operations record
/// themselves onto the implicit graph whenever grad mode is on and an input
/// needs gradients; Tensor::backward() replays nodes in reverse creation
/// order, which makes gradient accumulation deterministic.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }
    static Tensor ones(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 1.0, requires_grad);
    }
    static Tensor filled(Shape shape, Scalar value, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        check_shape(shape);
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(static_cast<size_t>(t.impl_->numel()), value);
        t.impl_->needs_grad = requires_grad;
        t.impl_->seq = detail::seq_counter()++;
        return t;
    }
    static Tensor from_data(Shape shape, std::vector<Scalar> values, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        check_shape(shape);
        if (shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("from_data: " + format_shape(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        t.impl_->needs_grad = requires_grad;
        t.impl_->seq = detail::seq_counter()++;
        return t;
    }
    static Tensor scalar(Scalar value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }
    static Tensor randn(Shape shape, Rng& rng, Scalar stddev = 1.0, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.impl_->data) v = rng.normal() * stddev;
        return t;
    }
    static Tensor rand_uniform(Shape shape, Rng& rng, Scalar lo, Scalar hi,
                               bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.impl_->data) v = rng.uniform(lo, hi);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
    int64_t extent(int64_t axis) const { return impl_->shape[static_cast<size_t>(axis)]; }
    int64_t numel() const { return impl_->numel(); }

    Scalar* data() { return impl_->data.data(); }
    const Scalar* data() const { return impl_->data.data(); }
    std::vector<Scalar>& vec() { return impl_->data; }
    const std::vector<Scalar>& vec() const { return impl_->data; }
    Scalar item() const {
        if (numel() != 1) throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->needs_grad; }
    Tensor& set_requires_grad(bool on) {
        if (!impl_->is_leaf) throw ContractError("set_requires_grad: only valid on leaf tensors");
        impl_->needs_grad = on;
        return *this;
    }
    bool is_leaf() const { return impl_->is_leaf; }

    /// Accumulated gradient, same shape as the tensor (zeros if untouched).
    std::vector<Scalar> grad() const {
        if (impl_->grad.empty()) return std::vector<Scalar>(impl_->data.size(), 0.0);
        return impl_->grad;
    }
    std::vector<Scalar>& grad_ref() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate (+=) into every
    /// reachable tensor that needs them; call zero_grad between steps.
    void backward() const {
        if (numel() != 1) throw ContractError("backward: loss must be scalar, got " + format_shape(shape()));
        // Collect reachable nodes, then run in reverse creation order.
        std::vector<detail::TensorImpl*> nodes;
        std::unordered_set<detail::TensorImpl*> seen;
        std::vector<detail::TensorImpl*> stack{impl_.get()};
        seen.insert(impl_.get());
        while (!stack.empty()) {
            detail::TensorImpl* n = stack.back();
            stack.pop_back();
            nodes.push_back(n);
            for (auto& p : n->parents) {
                if (p->needs_grad && !seen.count(p.get())) {
                    seen.insert(p.get());
                    stack.push_back(p.get());
                }
            }
        }
        std::sort(nodes.begin(), nodes.end(),
                  [](const detail::TensorImpl* a, const detail::TensorImpl* b) { return a->seq > b->seq; });
        impl_->ensure_grad();
        impl_->grad[0] += 1.0;
        for (detail::TensorImpl* n : nodes) {
            if (n->backward_fn) n->backward_fn();
        }
    }

    /// Detached copy: same data, no graph history.
    Tensor detach() const {
        Tensor t = from_data(shape(), impl_->data, false);
        return t;
    }

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

private:
    static void check_shape(const Shape& s) {
        for (int64_t e : s)
            if (e < 1) throw ShapeError("extents must be >= 1, got " + format_shape(s));
    }

    std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
    if (!finite_check_flag()) return;
    for (Scalar v : t.vec()) {
        if (!std::isfinite(v))
            throw ContractError(std::string(op) + " produced a non-finite value");
    }
}

inline void attach(Tensor& out, std::vector<Tensor> parents, std::function<void()> fn) {
    if (!grad_mode()) return;
    bool any = false;
    for (const auto& p : parents)
        if (p.requires_grad()) any = true;
    if (!any) return;
    auto impl = out.impl();
    impl->needs_grad = true;
    impl->is_leaf = false;
    impl->parents.reserve(parents.size());
    for (auto& p : parents) impl->parents.push_back(p.impl());
    impl->backward_fn = std::move(fn);
}

// Right-aligned broadcast of two shapes (NumPy rules).
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        int64_t ea = i < r - ra ? 1 : a[i - (r - ra)];
        int64_t eb = i < r - rb ? 1 : b[i - (r - rb)];
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + format_shape(a) + " vs " +
                             format_shape(b));
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Row-major strides, with 0 on axes the source broadcasts over.
inline std::vector<int64_t> broadcast_strides(const Shape& src, const Shape& out) {
    size_t r = out.size(), rs = src.size();
    std::vector<int64_t> strides(r, 0);
    int64_t acc = 1;
    for (size_t i = rs; i-- > 0;) {
        size_t oi = i + (r - rs);
        strides[oi] = (src[i] == 1 && out[oi] != 1) ? 0 : acc;
        acc *= src[i];
    }
    return strides;
}

// Walks an output shape while tracking a strided offset into a source.
struct Odometer {
    explicit Odometer(const Shape& out, std::vector<int64_t> strides)
        : extents(out), strides(std::move(strides)), idx(out.size(), 0) {}
    int64_t offset = 0;
    void step() {
        for (size_t i = extents.size(); i-- > 0;) {
            offset += strides[i];
            if (++idx[i] < extents[i]) return;
            offset -= strides[i] * extents[i];
            idx[i] = 0;
        }
    }
    Shape extents;
    std::vector<int64_t> strides;
    std::vector<int64_t> idx;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (broadcasting)

namespace detail {

template <class Fwd, class BwdA, class BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, BwdA bwd_a,
                 BwdB bwd_b) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
    Tensor out = Tensor::zeros(out_shape);
    const int64_t n = out.numel();
    const Scalar* pa = a.data();
    const Scalar* pb = b.data();
    Scalar* po = out.data();
    if (a.shape() == out_shape && b.shape() == out_shape) {
        for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else {
        Odometer oa(out_shape, broadcast_strides(a.shape(), out_shape));
        Odometer ob(out_shape, broadcast_strides(b.shape(), out_shape));
        for (int64_t i = 0; i < n; ++i) {
            po[i] = fwd(pa[oa.offset], pb[ob.offset]);
            oa.step();
            ob.step();
        }
    }
    check_finite(out, name);
    attach(out, {a, b}, [ai = a.impl(), bi = b.impl(), oi = out.impl().get(), out_shape, bwd_a,
                         bwd_b]() {
        const int64_t n = oi->numel();
        const Scalar* g = oi->grad.data();
        const Scalar* pa = ai->data.data();
        const Scalar* pb = bi->data.data();
        const bool same_a = ai->shape == out_shape;
        const bool same_b = bi->shape == out_shape;
        if (ai->needs_grad) {
            ai->ensure_grad();
            Scalar* ga = ai->grad.data();
            if (same_a && same_b) {
                for (int64_t i = 0; i < n; ++i) ga[i] += bwd_a(g[i], pa[i], pb[i]);
            } else {
                Odometer oa(out_shape, broadcast_strides(ai->shape, out_shape));
                Odometer ob(out_shape, broadcast_strides(bi->shape, out_shape));
                for (int64_t i = 0; i < n; ++i) {
                    ga[oa.offset] += bwd_a(g[i], pa[oa.offset], pb[ob.offset]);
                    oa.step();
                    ob.step();
                }
            }
        }
        if (bi->needs_grad) {
            bi->ensure_grad();
            Scalar* gb = bi->grad.data();
            if (same_a && same_b) {
                for (int64_t i = 0; i < n; ++i) gb[i] += bwd_b(g[i], pa[i], pb[i]);
            } else {
                Odometer oa(out_shape, broadcast_strides(ai->shape, out_shape));
                Odometer ob(out_shape, broadcast_strides(bi->shape, out_shape));
                for (int64_t i = 0; i < n; ++i) {
                    gb[ob.offset] += bwd_b(g[i], pa[oa.offset], pb[ob.offset]);
                    oa.step();
                    ob.step();
                }
            }
        }
    });
    return out;
}

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
    Tensor out = Tensor::zeros(x.shape());
    const int64_t n = x.numel();
    const Scalar* px = x.data();
    Scalar* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    check_finite(out, name);
    attach(out, {x}, [xi = x.impl(), oi = out.impl().get(), bwd]() {
        if (!xi->needs_grad) return;
        xi->ensure_grad();
        const int64_t n = xi->numel();
        const Scalar* g = oi->grad.data();
        const Scalar* px = xi->data.data();
        const Scalar* po = oi->data.data();
        Scalar* gx = xi->grad.data();
        for (int64_t i = 0; i < n; ++i) gx[i] += bwd(g[i], px[i], po[i]);
    });
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "add", [](Scalar x, Scalar y) { return x + y; },
        [](Scalar g, Scalar, Scalar) { return g; }, [](Scalar g, Scalar, Scalar) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "sub", [](Scalar x, Scalar y) { return x - y; },
        [](Scalar g, Scalar, Scalar) { return g; }, [](Scalar g, Scalar, Scalar) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        a, b, "mul", [](Scalar x, Scalar y) { return x * y; },
        [](Scalar g, Scalar, Scalar y) { return g * y; },
        [](Scalar g, Scalar x, Scalar) { return g * x; });
}

inline Tensor scale(const Tensor& x, Scalar c) {
    return detail::unary_op(
        x, "scale", [c](Scalar v) { return c * v; },
        [c](Scalar g, Scalar, Scalar) { return c * g; });
}

inline Tensor vexp(const Tensor& x) {
    return detail::unary_op(
        x, "exp", [](Scalar v) { return std::exp(v); },
        [](Scalar g, Scalar, Scalar y) { return g * y; });
}

inline Tensor vlog(const Tensor& x) {
    return detail::unary_op(
        x, "log", [](Scalar v) { return std::log(v); },
        [](Scalar g, Scalar v, Scalar) { return g / v; });
}

inline Tensor vsin(const Tensor& x) {
    return detail::unary_op(
        x, "sin", [](Scalar v) { return std::sin(v); },
        [](Scalar g, Scalar v, Scalar) { return g * std::cos(v); });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary_op(
        x, "relu", [](Scalar v) { return v > 0 ? v : 0; },
        [](Scalar g, Scalar v, Scalar) { return v > 0 ? g : 0; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_op(
        x, "sigmoid", [](Scalar v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](Scalar g, Scalar, Scalar y) { return g * y * (1.0 - y); });
}

namespace detail {
inline constexpr Scalar kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

/// tanh-approximation GELU.
inline Tensor gelu(const Tensor& x) {
    return detail::unary_op(
        x, "gelu",
        [](Scalar v) {
            Scalar u = detail::kGeluC * (v + 0.044715 * v * v * v);
            return 0.5 * v * (1.0 + std::tanh(u));
        },
        [](Scalar g, Scalar v, Scalar) {
            Scalar u = detail::kGeluC * (v + 0.044715 * v * v * v);
            Scalar t = std::tanh(u);
            Scalar du = detail::kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
            return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
        });
}

// Convenience compositions (not primitive ops).
inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }
inline Tensor square(const Tensor& x) { return mul(x, x); }
/// max(x, c) and min(x, c) through relu, so clamping stays differentiable.
inline Tensor clamp_min(const Tensor& x, Scalar c) {
    return add(relu(add(x, Tensor::scalar(-c))), Tensor::scalar(c));
}
inline Tensor clamp_max(const Tensor& x, Scalar c) {
    return sub(Tensor::scalar(c), relu(sub(Tensor::scalar(c), x)));
}
inline Tensor clamp(const Tensor& x, Scalar lo, Scalar hi) {
    return clamp_max(clamp_min(x, lo), hi);
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
    Tensor out = Tensor::zeros({1});
    const Scalar* px = x.data();
    Scalar acc = 0.0;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    out.data()[0] = acc;
    detail::attach(out, {x}, [xi = x.impl(), oi = out.impl().get()]() {
        if (!xi->needs_grad) return;
        xi->ensure_grad();
        const Scalar g = oi->grad[0];
        for (auto& v : xi->grad) v += g;
    });
    return out;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<Scalar>(x.numel())); }

namespace detail {
inline void reduce_axis_layout(const Shape& s, int64_t axis, int64_t& outer, int64_t& mid,
                               int64_t& inner) {
    outer = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    mid = s[static_cast<size_t>(axis)];
    inner = 1;
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}
inline int64_t normalize_axis(const Shape& s, int64_t axis, const char* op) {
    int64_t r = static_cast<int64_t>(s.size());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw ShapeError(std::string(op) + ": axis out of range for " + format_shape(s));
    return axis;
}
}  // namespace detail

inline Tensor sum_axis(const Tensor& x, int64_t axis, bool keepdim = false) {
    axis = detail::normalize_axis(x.shape(), axis, "sum_axis");
    int64_t outer, mid, inner;
    detail::reduce_axis_layout(x.shape(), axis, outer, mid, inner);
    Shape out_shape = x.shape();
    if (keepdim)
        out_shape[static_cast<size_t>(axis)] = 1;
    else
        out_shape.erase(out_shape.begin() + axis);
    if (out_shape.empty()) out_shape = {1};
    Tensor out = Tensor::zeros(out_shape);
    const Scalar* px = x.data();
    Scalar* po = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t m = 0; m < mid; ++m) {
            const Scalar* src = px + (o * mid + m) * inner;
            Scalar* dst = po + o * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    detail::attach(out, {x}, [xi = x.impl(), oi = out.impl().get(), outer, mid, inner]() {
        if (!xi->needs_grad) return;
        xi->ensure_grad();
        const Scalar* g = oi->grad.data();
        Scalar* gx = xi->grad.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t m = 0; m < mid; ++m) {
                Scalar* dst = gx + (o * mid + m) * inner;
                const Scalar* src = g + o * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
    return out;
}

inline Tensor mean_axis(const Tensor& x, int64_t axis, bool keepdim = false) {
    int64_t ax = detail::normalize_axis(x.shape(), axis, "mean_axis");
    return scale(sum_axis(x, ax, keepdim), 1.0 / static_cast<Scalar>(x.extent(ax)));
}

/// Max over one axis; gradient routes to the first max position per slice.
inline Tensor reduce_max(const Tensor& x, int64_t axis, bool keepdim = false) {
    axis = detail::normalize_axis(x.shape(), axis, "reduce_max");
    int64_t outer, mid, inner;
    detail::reduce_axis_layout(x.shape(), axis, outer, mid, inner);
    Shape out_shape = x.shape();
    if (keepdim)
        out_shape[static_cast<size_t>(axis)] = 1;
    else
        out_shape.erase(out_shape.begin() + axis);
    if (out_shape.empty()) out_shape = {1};
    Tensor out = Tensor::zeros(out_shape);
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(outer * inner));
    const Scalar* px = x.data();
    Scalar* po = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            Scalar best = px[(o * mid) * inner + i];
            int64_t best_m = 0;
            for (int64_t m = 1; m < mid; ++m) {
                Scalar v = px[(o * mid + m) * inner + i];
                if (v > best) {
                    best = v;
                    best_m = m;
                }
            }
            po[o * inner + i] = best;
            (*argmax)[static_cast<size_t>(o * inner + i)] = best_m;
        }
    detail::attach(out, {x}, [xi = x.impl(), oi = out.impl().get(), argmax, outer, mid, inner]() {
        if (!xi->needs_grad) return;
        xi->ensure_grad();
        const Scalar* g = oi->grad.data();
        Scalar* gx = xi->grad.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
                int64_t m = (*argmax)[static_cast<size_t>(o * inner + i)];
                gx[(o * mid + m) * inner + i] += g[o * inner + i];
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: " + format_shape(x.shape()) + " vs " + format_shape(new_shape));
    Tensor out = Tensor::from_data(std::move(new_shape), x.vec());
    detail::attach(out, {x}, [xi = x.impl(), oi = out.impl().get()]() {
        if (!xi->needs_grad) return;
        xi->ensure_grad();
        const int64_t n = xi->numel();
        for (int64_t i = 0; i < n; ++i) xi->grad[static_cast<size_t>(i)] += oi->grad[static_cast<size_t>(i)];
    });
    return out;
}

inline Tensor permute(const Tensor& x, const std::vector<int64_t>& perm) {
    const size_t r = x.shape().size();
    if (perm.size() != r) throw ShapeError("permute: rank mismatch");
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[static_cast<size_t>(perm[i])];
    Tensor out = Tensor::zeros(out_shape);
    // out strides of the source axes
    std::vector<int64_t> xstr(r, 1);
    for (size_t i = r - 1; i-- > 0;) xstr[i] = xstr[i + 1] * x.shape()[i + 1];
    std::vector<int64_t> src_strides(r);
    for (size_t i = 0; i < r; ++i) src_strides[i] = xstr[static_cast<size_t>(perm[i])];
    detail::Odometer od(out_shape, src_strides);
    const Scalar* px = x.data();
    Scalar* po = out.data();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) {
        po[i] = px[od.offset];
        od.step();
    }
    detail::attach(out, {x},
                   [xi = x.impl(), oi = out.impl().get(), out_shape, src_strides]() {
                       if (!xi->needs_grad) return;
                       xi->ensure_grad();
                       detail::Odometer od(out_shape, src_strides);
                       const Scalar* g = oi->grad.data();
                       Scalar* gx = xi->grad.data();
                       const int64_t n = oi->numel();
                       for (int64_t i = 0; i < n; ++i) {
                           gx[od.offset] += g[i];
                           od.step();
                       }
                   });
    return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    axis = detail::normalize_axis(parts[0].shape(), axis, "concat");
    Shape out_shape = parts[0].shape();
    int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != parts[0].rank()) throw ShapeError("concat: rank mismatch");
        for (int64_t d = 0; d < p.rank(); ++d)
            if (d != axis && p.extent(d) != out_shape[static_cast<size_t>(d)])
                throw ShapeError("concat: " + format_shape(p.shape()) + " vs " +
                                 format_shape(parts[0].shape()));
        total += p.extent(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor out = Tensor::zeros(out_shape);
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
    Scalar* po = out.data();
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t m = p.extent(axis);
        const Scalar* pp = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(po + (o * total + off) * inner, pp + o * m * inner,
                        static_cast<size_t>(m * inner) * sizeof(Scalar));
        off += m;
    }
    std::vector<Tensor> parents = parts;
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (auto& p : parts) impls.push_back(p.impl());
    detail::attach(out, parents, [impls, oi = out.impl().get(), outer, inner, total, axis]() {
        const Scalar* g = oi->grad.data();
        int64_t off = 0;
        for (auto& pi : impls) {
            const int64_t m = pi->shape[static_cast<size_t>(axis)];
            if (pi->needs_grad) {
                pi->ensure_grad();
                Scalar* gp = pi->grad.data();
                for (int64_t o = 0; o < outer; ++o) {
                    const Scalar* src = g + (o * total + off) * inner;
                    Scalar* dst = gp + o * m * inner;
                    for (int64_t i = 0; i < m * inner; ++i) dst[i] += src[i];
                }
            }
            off += m;
        }
    });
    return out;
}

inline Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len) {
    axis = detail::normalize_axis(x.shape(), axis, "slice");
    if (start < 0 || len < 1 || start + len > x.extent(axis))
        throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") invalid for " + format_shape(x.shape()));
    int64_t outer, mid, inner;
    detail::reduce_axis_layout(x.shape(), axis, outer, mid, inner);
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out = Tensor::zeros(out_shape);
    const Scalar* px = x.data();
    Scalar* po = out.data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(po + o * len * inner, px + (o * mid + start) * inner,
                    static_cast<size_t>(len * inner) * sizeof(Scalar));
    detail::attach(out, {x}, [xi = x.impl(), oi = out.impl().get(), outer, mid, inner, start, len]() {
        if (!xi->needs_grad) return;
        xi->ensure_grad();
        const Scalar* g = oi->grad.data();
        Scalar* gx = xi->grad.data();
        for (int64_t o = 0; o < outer; ++o) {
            const Scalar* src = g + o * len * inner;
            Scalar* dst = gx + (o * mid + start) * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
    });
    return out;
}

/// Materialized broadcast to a larger shape (backward sums over new axes).
inline Tensor expand(const Tensor& x, const Shape& target) {
    Shape bs = detail::broadcast_shape(x.shape(), target, "expand");
    if (bs != target)
        throw ShapeError("expand: " + format_shape(x.shape()) + " vs " + format_shape(target));
    Tensor out = Tensor::zeros(target);
    detail::Odometer od(target, detail::broadcast_strides(x.shape(), target));
    const Scalar* px = x.data();
    Scalar* po = out.data();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) {
        po[i] = px[od.offset];
        od.step();
    }
    detail::attach(out, {x}, [xi = x.impl(), oi = out.impl().get(), target]() {
        if (!xi->needs_grad) return;
        xi->ensure_grad();
        detail::Odometer od(target, detail::broadcast_strides(xi->shape, target));
        const Scalar* g = oi->grad.data();
        Scalar* gx = xi->grad.data();
        const int64_t n = oi->numel();
        for (int64_t i = 0; i < n; ++i) {
            gx[od.offset] += g[i];
            od.step();
        }
    });
    return out;
}

/// Gather rows along axis 0: out[i, ...] = x[idx[i], ...].
inline Tensor take_rows(const Tensor& x, const std::vector<int64_t>& idx) {
    if (x.rank() < 1) throw ShapeError("take_rows: rank-0 input");
    const int64_t rows = x.extent(0);
    int64_t inner = x.numel() / rows;
    Shape out_shape = x.shape();
    out_shape[0] = static_cast<int64_t>(idx.size());
    Tensor out = Tensor::zeros(out_shape);
    const Scalar* px = x.data();
    Scalar* po = out.data();
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= rows)
            throw ContractError("take_rows: index " + std::to_string(idx[i]) + " out of range");
        std::memcpy(po + static_cast<int64_t>(i) * inner, px + idx[i] * inner,
                    static_cast<size_t>(inner) * sizeof(Scalar));
    }
    auto idx_copy = std::make_shared<std::vector<int64_t>>(idx);
    detail::attach(out, {x}, [xi = x.impl(), oi = out.impl().get(), idx_copy, inner]() {
        if (!xi->needs_grad) return;
        xi->ensure_grad();
        const Scalar* g = oi->grad.data();
        Scalar* gx = xi->grad.data();
        for (size_t i = 0; i < idx_copy->size(); ++i) {
            Scalar* dst = gx + (*idx_copy)[i] * inner;
            const Scalar* src = g + static_cast<int64_t>(i) * inner;
            for (int64_t j = 0; j < inner; ++j) dst[j] += src[j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Matrix multiply with broadcastable batch dims

namespace detail {

// C[M,P] += A[M,K] * B[K,P]
inline void gemm_nn(const Scalar* __restrict a, const Scalar* __restrict b, Scalar* __restrict c,
                    int64_t M, int64_t K, int64_t P) {
    for (int64_t m = 0; m < M; ++m) {
        Scalar* crow = c + m * P;
        const Scalar* arow = a + m * K;
        for (int64_t k = 0; k < K; ++k) {
            const Scalar av = arow[k];
            if (av == 0.0) continue;
            const Scalar* brow = b + k * P;
            for (int64_t p = 0; p < P; ++p) crow[p] += av * brow[p];
        }
    }
}

// C[M,K] += A[M,P] * B[K,P]^T
inline void gemm_nt(const Scalar* __restrict a, const Scalar* __restrict b, Scalar* __restrict c,
                    int64_t M, int64_t P, int64_t K) {
    for (int64_t m = 0; m < M; ++m) {
        const Scalar* arow = a + m * P;
        Scalar* crow = c + m * K;
        for (int64_t k = 0; k < K; ++k) {
            const Scalar* brow = b + k * P;
            Scalar acc = 0.0;
            for (int64_t p = 0; p < P; ++p) acc += arow[p] * brow[p];
            crow[k] += acc;
        }
    }
}

// C[K,P] += A[M,K]^T * B[M,P]
inline void gemm_tn(const Scalar* __restrict a, const Scalar* __restrict b, Scalar* __restrict c,
                    int64_t M, int64_t K, int64_t P) {
    for (int64_t m = 0; m < M; ++m) {
        const Scalar* arow = a + m * K;
        const Scalar* brow = b + m * P;
        for (int64_t k = 0; k < K; ++k) {
            const Scalar av = arow[k];
            if (av == 0.0) continue;
            Scalar* crow = c + k * P;
            for (int64_t p = 0; p < P; ++p) crow[p] += av * brow[p];
        }
    }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul: need rank >= 2, got " + format_shape(a.shape()) + " vs " +
                         format_shape(b.shape()));
    const int64_t M = a.extent(a.rank() - 2), Ka = a.extent(a.rank() - 1);
    const int64_t Kb = b.extent(b.rank() - 2), P = b.extent(b.rank() - 1);
    if (Ka != Kb)
        throw ShapeError("matmul: inner dims disagree, " + format_shape(a.shape()) + " vs " +
                         format_shape(b.shape()));
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    Shape obatch = detail::broadcast_shape(abatch, bbatch, "matmul");
    Shape out_shape = obatch;
    out_shape.push_back(M);
    out_shape.push_back(P);
    Tensor out = Tensor::zeros(out_shape);

    const int64_t nbatch = shape_numel(obatch);
    auto astr = detail::broadcast_strides(abatch, obatch);
    auto bstr = detail::broadcast_strides(bbatch, obatch);
    detail::Odometer oa(obatch, astr), ob(obatch, bstr);
    const int64_t asz = M * Ka, bsz = Kb * P, osz = M * P;
    const Scalar* pa = a.data();
    const Scalar* pb = b.data();
    Scalar* po = out.data();
    for (int64_t n = 0; n < nbatch; ++n) {
        detail::gemm_nn(pa + oa.offset * asz, pb + ob.offset * bsz, po + n * osz, M, Ka, P);
        oa.step();
        ob.step();
    }
    detail::check_finite(out, "matmul");
    detail::attach(out, {a, b},
                   [ai = a.impl(), bi = b.impl(), oi = out.impl().get(), obatch, abatch, bbatch, M,
                    P, K = Ka]() {
                       const int64_t nbatch = shape_numel(obatch);
                       detail::Odometer oa(obatch, detail::broadcast_strides(abatch, obatch));
                       detail::Odometer ob(obatch, detail::broadcast_strides(bbatch, obatch));
                       const int64_t asz = M * K, bsz = K * P, osz = M * P;
                       const Scalar* g = oi->grad.data();
                       if (ai->needs_grad) ai->ensure_grad();
                       if (bi->needs_grad) bi->ensure_grad();
                       for (int64_t n = 0; n < nbatch; ++n) {
                           if (ai->needs_grad)
                               detail::gemm_nt(g + n * osz, bi->data.data() + ob.offset * bsz,
                                               ai->grad.data() + oa.offset * asz, M, P, K);
                           if (bi->needs_grad)
                               detail::gemm_tn(ai->data.data() + oa.offset * asz, g + n * osz,
                                               bi->grad.data() + ob.offset * bsz, M, K, P);
                           oa.step();
                           ob.step();
                       }
                   });
    return out;
}

// ---------------------------------------------------------------------------
// softmax / layer_norm

/// Numerically stable softmax along one axis (max subtraction).
inline Tensor softmax(const Tensor& x, int64_t axis) {
    axis = detail::normalize_axis(x.shape(), axis, "softmax");
    int64_t outer, mid, inner;
    detail::reduce_axis_layout(x.shape(), axis, outer, mid, inner);
    Tensor out = Tensor::zeros(x.shape());
    const Scalar* px = x.data();
    Scalar* po = out.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * mid * inner + i;
            Scalar mx = px[base];
            for (int64_t m = 1; m < mid; ++m) mx = std::max(mx, px[base + m * inner]);
            Scalar z = 0.0;
            for (int64_t m = 0; m < mid; ++m) {
                Scalar e = std::exp(px[base + m * inner] - mx);
                po[base + m * inner] = e;
                z += e;
            }
            const Scalar rz = 1.0 / z;
            for (int64_t m = 0; m < mid; ++m) po[base + m * inner] *= rz;
        }
    detail::attach(out, {x}, [xi = x.impl(), oi = out.impl().get(), outer, mid, inner]() {
        if (!xi->needs_grad) return;
        xi->ensure_grad();
        const Scalar* g = oi->grad.data();
        const Scalar* y = oi->data.data();
        Scalar* gx = xi->grad.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < inner; ++i) {
                const int64_t base = o * mid * inner + i;
                Scalar dot = 0.0;
                for (int64_t m = 0; m < mid; ++m) dot += g[base + m * inner] * y[base + m * inner];
                for (int64_t m = 0; m < mid; ++m)
                    gx[base + m * inner] += y[base + m * inner] * (g[base + m * inner] - dot);
            }
    });
    return out;
}

inline constexpr Scalar kLayerNormEps = 1e-5;

/// Layer normalization over the last axis, then elementwise affine.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
    const int64_t D = x.extent(x.rank() - 1);
    if (gain.numel() != D || bias.numel() != D)
        throw ShapeError("layer_norm: gain/bias " + format_shape(gain.shape()) + "/" +
                         format_shape(bias.shape()) + " vs last axis " + std::to_string(D));
    const int64_t rows = x.numel() / D;
    Tensor out = Tensor::zeros(x.shape());
    auto stats = std::make_shared<std::vector<Scalar>>(static_cast<size_t>(rows) * 2);
    const Scalar* px = x.data();
    const Scalar* pg = gain.data();
    const Scalar* pb = bias.data();
    Scalar* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const Scalar* row = px + r * D;
        Scalar m = 0.0;
        for (int64_t d = 0; d < D; ++d) m += row[d];
        m /= static_cast<Scalar>(D);
        Scalar var = 0.0;
        for (int64_t d = 0; d < D; ++d) {
            Scalar c = row[d] - m;
            var += c * c;
        }
        var /= static_cast<Scalar>(D);
        Scalar rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        (*stats)[static_cast<size_t>(r) * 2] = m;
        (*stats)[static_cast<size_t>(r) * 2 + 1] = rstd;
        Scalar* orow = po + r * D;
        for (int64_t d = 0; d < D; ++d) orow[d] = (row[d] - m) * rstd * pg[d] + pb[d];
    }
    detail::attach(out, {x, gain, bias},
                   [xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl().get(), stats,
                    rows, D]() {
                       const Scalar* g = oi->grad.data();
                       const Scalar* px = xi->data.data();
                       const Scalar* pg = gi->data.data();
                       if (xi->needs_grad) xi->ensure_grad();
                       if (gi->needs_grad) gi->ensure_grad();
                       if (bi->needs_grad) bi->ensure_grad();
                       for (int64_t r = 0; r < rows; ++r) {
                           const Scalar m = (*stats)[static_cast<size_t>(r) * 2];
                           const Scalar rstd = (*stats)[static_cast<size_t>(r) * 2 + 1];
                           const Scalar* row = px + r * D;
                           const Scalar* grow = g + r * D;
                           if (gi->needs_grad || bi->needs_grad) {
                               for (int64_t d = 0; d < D; ++d) {
                                   Scalar xhat = (row[d] - m) * rstd;
                                   if (gi->needs_grad) gi->grad[static_cast<size_t>(d)] += grow[d] * xhat;
                                   if (bi->needs_grad) bi->grad[static_cast<size_t>(d)] += grow[d];
                               }
                           }
                           if (xi->needs_grad) {
                               Scalar sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                               for (int64_t d = 0; d < D; ++d) {
                                   Scalar xhat = (row[d] - m) * rstd;
                                   Scalar dxhat = grow[d] * pg[d];
                                   sum_dxhat += dxhat;
                                   sum_dxhat_xhat += dxhat * xhat;
                               }
                               const Scalar invD = 1.0 / static_cast<Scalar>(D);
                               Scalar* gx = xi->grad.data() + r * D;
                               for (int64_t d = 0; d < D; ++d) {
                                   Scalar xhat = (row[d] - m) * rstd;
                                   Scalar dxhat = grow[d] * pg[d];
                                   gx[d] += rstd * (dxhat - invD * sum_dxhat - xhat * invD * sum_dxhat_xhat);
                               }
                           }
                       }
                   });
    return out;
}

// ---------------------------------------------------------------------------
// Bilinear sampling

namespace detail {
// One bilinear tap set for (u, v) into an HxW grid; taps outside the image
// carry weight but no contribution (zero padding).
struct BilinearTaps {
    int64_t u0, v0;
    Scalar fu, fv;
    bool in(int64_t u, int64_t v, int64_t W, int64_t H) const {
        return u >= 0 && u < W && v >= 0 && v < H;
    }
};
inline BilinearTaps bilinear_taps(Scalar u, Scalar v) {
    BilinearTaps t;
    Scalar fu0 = std::floor(u), fv0 = std::floor(v);
    t.u0 = static_cast<int64_t>(fu0);
    t.v0 = static_cast<int64_t>(fv0);
    t.fu = u - fu0;
    t.fv = v - fv0;
    return t;
}
}  // namespace detail

/// Bilinear interpolation of feat [H, W, C] at continuous pixel coordinates
/// uv [..., 2] (u = column, v = row). Out-of-bounds taps read as zero.
/// Differentiable with respect to both feat and uv.
inline Tensor bilinear_sample(const Tensor& feat, const Tensor& uv) {
    if (feat.rank() != 3) throw ShapeError("bilinear_sample: feat must be [H, W, C], got " +
                                           format_shape(feat.shape()));
    if (uv.rank() < 1 || uv.extent(uv.rank() - 1) != 2)
        throw ShapeError("bilinear_sample: uv must end in extent 2, got " + format_shape(uv.shape()));
    const int64_t H = feat.extent(0), W = feat.extent(1), C = feat.extent(2);
    const int64_t npts = uv.numel() / 2;
    Shape out_shape(uv.shape().begin(), uv.shape().end() - 1);
    out_shape.push_back(C);
    Tensor out = Tensor::zeros(out_shape);
    const Scalar* pf = feat.data();
    const Scalar* pu = uv.data();
    Scalar* po = out.data();
    auto at = [&](int64_t v, int64_t u, int64_t c) { return pf[(v * W + u) * C + c]; };
    for (int64_t i = 0; i < npts; ++i) {
        auto t = detail::bilinear_taps(pu[i * 2], pu[i * 2 + 1]);
        const Scalar w00 = (1 - t.fu) * (1 - t.fv), w10 = t.fu * (1 - t.fv);
        const Scalar w01 = (1 - t.fu) * t.fv, w11 = t.fu * t.fv;
        Scalar* orow = po + i * C;
        for (int64_t c = 0; c < C; ++c) {
            Scalar acc = 0.0;
            if (t.in(t.u0, t.v0, W, H)) acc += w00 * at(t.v0, t.u0, c);
            if (t.in(t.u0 + 1, t.v0, W, H)) acc += w10 * at(t.v0, t.u0 + 1, c);
            if (t.in(t.u0, t.v0 + 1, W, H)) acc += w01 * at(t.v0 + 1, t.u0, c);
            if (t.in(t.u0 + 1, t.v0 + 1, W, H)) acc += w11 * at(t.v0 + 1, t.u0 + 1, c);
            orow[c] = acc;
        }
    }
    detail::attach(out, {feat, uv}, [fi = feat.impl(), ui = uv.impl(), oi = out.impl().get(), H, W,
                                     C, npts]() {
        const Scalar* g = oi->grad.data();
        const Scalar* pf = fi->data.data();
        const Scalar* pu = ui->data.data();
        if (fi->needs_grad) fi->ensure_grad();
        if (ui->needs_grad) ui->ensure_grad();
        auto at = [&](int64_t v, int64_t u, int64_t c) { return pf[(v * W + u) * C + c]; };
        for (int64_t i = 0; i < npts; ++i) {
            auto t = detail::bilinear_taps(pu[i * 2], pu[i * 2 + 1]);
            const Scalar w00 = (1 - t.fu) * (1 - t.fv), w10 = t.fu * (1 - t.fv);
            const Scalar w01 = (1 - t.fu) * t.fv, w11 = t.fu * t.fv;
            const bool i00 = t.in(t.u0, t.v0, W, H), i10 = t.in(t.u0 + 1, t.v0, W, H);
            const bool i01 = t.in(t.u0, t.v0 + 1, W, H), i11 = t.in(t.u0 + 1, t.v0 + 1, W, H);
            const Scalar* grow = g + i * C;
            if (fi->needs_grad) {
                Scalar* gf = fi->grad.data();
                for (int64_t c = 0; c < C; ++c) {
                    const Scalar gc = grow[c];
                    if (i00) gf[(t.v0 * W + t.u0) * C + c] += w00 * gc;
                    if (i10) gf[(t.v0 * W + t.u0 + 1) * C + c] += w10 * gc;
                    if (i01) gf[((t.v0 + 1) * W + t.u0) * C + c] += w01 * gc;
                    if (i11) gf[((t.v0 + 1) * W + t.u0 + 1) * C + c] += w11 * gc;
                }
            }
            if (ui->needs_grad) {
                Scalar du = 0.0, dv = 0.0;
                for (int64_t c = 0; c < C; ++c) {
                    const Scalar f00 = i00 ? at(t.v0, t.u0, c) : 0.0;
                    const Scalar f10 = i10 ? at(t.v0, t.u0 + 1, c) : 0.0;
                    const Scalar f01 = i01 ? at(t.v0 + 1, t.u0, c) : 0.0;
                    const Scalar f11 = i11 ? at(t.v0 + 1, t.u0 + 1, c) : 0.0;
                    const Scalar gc = grow[c];
                    du += gc * ((f10 - f00) * (1 - t.fv) + (f11 - f01) * t.fv);
                    dv += gc * ((f01 - f00) * (1 - t.fu) + (f11 - f10) * t.fu);
                }
                ui->grad[static_cast<size_t>(i * 2)] += du;
                ui->grad[static_cast<size_t>(i * 2 + 1)] += dv;
            }
        }
    });
    return out;
}

}  // namespace voxdiff
