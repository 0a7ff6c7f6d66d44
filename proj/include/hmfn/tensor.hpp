#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <utility>
#include <vector>

#include "hmfn/common.hpp"

namespace hmfn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<Real> values;
    std::vector<Real> grad;  // empty until touched by backward
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), Real(0));
    }
};

}  // namespace detail

// Dense row-major tensor with shared storage. Copies are shallow; gradients
// accumulate into the shared impl during Tape::backward.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), Real(0), requires_grad);
    }

    static Tensor filled(Shape shape, Real value, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->values.assign(shape_numel(t.impl_->shape), value);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from_values(Shape shape, std::vector<Real> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                                 std::to_string(values.size()) + " values");
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->values = std::move(values);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(Real value, bool requires_grad = false) {
        return from_values({1}, {value}, requires_grad);
    }

    static Tensor rand_uniform(Shape shape, Rng& rng, Real lo, Real hi, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.impl_->values) v = static_cast<Real>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t size() const { return impl_->values.size(); }

    std::vector<Real>& values() { return impl_->values; }
    const std::vector<Real>& values() const { return impl_->values; }
    Real* data() { return impl_->values.data(); }
    const Real* data() const { return impl_->values.data(); }

    Real item() const {
        if (size() != 1) throw ContractError("item: tensor is not scalar, shape " + shape_str(shape()));
        return impl_->values[0];
    }

    Real& operator()(std::size_t i) { return impl_->values[i]; }
    Real operator()(std::size_t i) const { return impl_->values[i]; }
    Real& operator()(std::size_t i, std::size_t j) { return impl_->values[i * dim(1) + j]; }
    Real operator()(std::size_t i, std::size_t j) const { return impl_->values[i * dim(1) + j]; }
    Real& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return impl_->values[(i * dim(1) + j) * dim(2) + k];
    }
    Real operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return impl_->values[(i * dim(1) + j) * dim(2) + k];
    }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        impl_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return impl_ && impl_->grad.size() == impl_->values.size(); }
    std::vector<Real>& grad() {
        impl_->ensure_grad();
        return impl_->grad;
    }
    const std::vector<Real>& grad() const {
        impl_->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() {
        if (impl_) impl_->grad.assign(impl_->values.size(), Real(0));
    }

    detail::TensorImpl* impl() const { return impl_.get(); }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Per-step record of executed ops. Constructing a Tape makes it current;
// ops record a backward closure only while a tape is active and some input
// requires a gradient. The tape is discarded after backward.
class Tape {
public:
    Tape() : prev_(current_slot()) { current_slot() = this; }
    ~Tape() { current_slot() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_slot(); }

    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return nodes_.size(); }

    // Seeds dLoss/dLoss = 1 and replays every recorded op exactly once,
    // newest first (execution order is already topological).
    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.size() != 1)
            throw ContractError("backward: loss must be a scalar tensor");
        if (nodes_.empty()) throw ContractError("backward: tape is empty");
        loss.impl()->ensure_grad();
        loss.impl()->grad[0] += Real(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

private:
    static Tape*& current_slot() {
        thread_local Tape* t = nullptr;
        return t;
    }

    std::vector<std::function<void()>> nodes_;
    Tape* prev_;
};

namespace detail {

inline bool tracing(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::current()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// b broadcasts against a when its shape is a trailing suffix of a's shape
// (leading-dimension expansion; no other broadcasting is supported).
inline bool suffix_broadcast(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
    (void)name;
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out(i) = fwd(a(i));
    if (tracing({&a})) {
        out.set_requires_grad();
        Tensor ain = a, o = out;
        Tape::current()->record([ain, o, bwd]() mutable {
            auto& ga = ain.grad();
            const auto& go = o.grad();
            for (std::size_t i = 0; i < ain.size(); ++i) ga[i] += bwd(ain(i), o(i), go[i]);
        });
    }
    return out;
}

enum class BinKind { Add, Sub, Mul };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    if (!suffix_broadcast(a.shape(), b.shape()))
        throw DimensionError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " are not compatible");
    const std::size_t nb = b.size() == 0 ? 1 : b.size();
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Real x = a(i), y = b(i % nb);
        out(i) = kind == BinKind::Add ? x + y : kind == BinKind::Sub ? x - y : x * y;
    }
    if (tracing({&a, &b})) {
        out.set_requires_grad();
        Tensor ain = a, bin = b, o = out;
        Tape::current()->record([ain, bin, o, kind, nb]() mutable {
            const auto& go = o.grad();
            const std::size_t n = ain.size();
            if (ain.requires_grad()) {
                auto& ga = ain.grad();
                for (std::size_t i = 0; i < n; ++i) {
                    switch (kind) {
                        case BinKind::Add:
                        case BinKind::Sub: ga[i] += go[i]; break;
                        case BinKind::Mul: ga[i] += go[i] * bin(i % nb); break;
                    }
                }
            }
            if (bin.requires_grad()) {
                auto& gb = bin.grad();
                for (std::size_t i = 0; i < n; ++i) {
                    switch (kind) {
                        case BinKind::Add: gb[i % nb] += go[i]; break;
                        case BinKind::Sub: gb[i % nb] -= go[i]; break;
                        case BinKind::Mul: gb[i % nb] += go[i] * ain(i); break;
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinKind::Add, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinKind::Sub, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinKind::Mul, "mul");
}

inline Tensor add_scalar(const Tensor& a, Real c) {
    return detail::unary_op(a, "add_scalar", [c](Real x) { return x + c; },
                            [](Real, Real, Real g) { return g; });
}

inline Tensor mul_scalar(const Tensor& a, Real c) {
    return detail::unary_op(a, "mul_scalar", [c](Real x) { return x * c; },
                            [c](Real, Real, Real g) { return g * c; });
}

// c - a
inline Tensor rsub_scalar(Real c, const Tensor& a) {
    return detail::unary_op(a, "rsub_scalar", [c](Real x) { return c - x; },
                            [](Real, Real, Real g) { return -g; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(a, "relu", [](Real x) { return x > 0 ? x : Real(0); },
                            [](Real x, Real, Real g) { return x > 0 ? g : Real(0); });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(a, "sigmoid", [](Real x) { return Real(1) / (Real(1) + std::exp(-x)); },
                            [](Real, Real y, Real g) { return g * y * (Real(1) - y); });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(a, "exp", [](Real x) { return std::exp(x); },
                            [](Real, Real y, Real g) { return g * y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary_op(a, "log", [](Real x) { return std::log(x); },
                            [](Real x, Real, Real g) { return g / x; });
}

inline Tensor abs(const Tensor& a) {
    return detail::unary_op(a, "abs", [](Real x) { return std::fabs(x); },
                            [](Real x, Real, Real g) { return x >= 0 ? g : -g; });
}

// Gradient is passed through inside [lo, hi] and zero outside.
inline Tensor clamp(const Tensor& a, Real lo, Real hi) {
    return detail::unary_op(a, "clamp", [lo, hi](Real x) { return std::min(hi, std::max(lo, x)); },
                            [lo, hi](Real x, Real, Real g) { return (x >= lo && x <= hi) ? g : Real(0); });
}

inline Tensor sum(const Tensor& a) {
    Real acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a(i);
    Tensor out = Tensor::scalar(acc);
    if (detail::tracing({&a})) {
        out.set_requires_grad();
        Tensor ain = a, o = out;
        Tape::current()->record([ain, o]() mutable {
            const Real g = o.grad()[0];
            auto& ga = ain.grad();
            for (std::size_t i = 0; i < ain.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

inline Tensor softmax(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank())
        throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(a.shape()));
    const Shape& s = a.shape();
    const std::size_t axis_len = s[axis];
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];

    Tensor out = Tensor::zeros(s);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * axis_len * inner + in;
            Real mx = a(base);
            for (std::size_t k = 1; k < axis_len; ++k) mx = std::max(mx, a(base + k * inner));
            Real z = 0;
            for (std::size_t k = 0; k < axis_len; ++k) {
                const Real e = std::exp(a(base + k * inner) - mx);
                out(base + k * inner) = e;
                z += e;
            }
            for (std::size_t k = 0; k < axis_len; ++k) out(base + k * inner) /= z;
        }
    }
    if (detail::tracing({&a})) {
        out.set_requires_grad();
        Tensor ain = a, o = out;
        Tape::current()->record([ain, o, axis_len, inner, outer]() mutable {
            auto& ga = ain.grad();
            const auto& go = o.grad();
            for (std::size_t ot = 0; ot < outer; ++ot) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = ot * axis_len * inner + in;
                    Real dot = 0;
                    for (std::size_t k = 0; k < axis_len; ++k)
                        dot += go[base + k * inner] * o(base + k * inner);
                    for (std::size_t k = 0; k < axis_len; ++k)
                        ga[base + k * inner] += o(base + k * inner) * (go[base + k * inner] - dot);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra / convolution
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = a(i, p);
            if (av == Real(0)) continue;
            for (std::size_t j = 0; j < n; ++j) out(i, j) += av * b(p, j);
        }
    if (detail::tracing({&a, &b})) {
        out.set_requires_grad();
        Tensor ain = a, bin = b, o = out;
        Tape::current()->record([ain, bin, o, m, k, n]() mutable {
            const auto& go = o.grad();
            if (ain.requires_grad()) {
                auto& ga = ain.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        Real acc = 0;
                        for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * bin(p, j);
                        ga[i * k + p] += acc;
                    }
            }
            if (bin.requires_grad()) {
                auto& gb = bin.grad();
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t i = 0; i < m; ++i) {
                        const Real av = ain(i, p);
                        if (av == Real(0)) continue;
                        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * go[i * n + j];
                    }
            }
        });
    }
    return out;
}

inline std::size_t conv_out_len(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k) return 0;
    return (in + 2 * pad - k) / stride + 1;
}

// input [C_in, H, W], kernel [C_out, C_in, k, k] with odd k.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1,
                     std::size_t pad = 0) {
    if (input.rank() != 3 || kernel.rank() != 4)
        throw DimensionError("conv2d: expected input [C,H,W] and kernel [O,C,k,k], got " +
                             shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kernel.dim(1) != cin)
        throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                             " input channels, input has " + std::to_string(cin));
    if (kh % 2 == 0 || kw % 2 == 0) throw ContractError("conv2d: kernel size must be odd");
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    if (h + 2 * pad < kh || w + 2 * pad < kw)
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                             " larger than padded input " + shape_str(input.shape()));
    const std::size_t ho = conv_out_len(h, kh, stride, pad);
    const std::size_t wo = conv_out_len(w, kw, stride, pad);

    Tensor out = Tensor::zeros({cout, ho, wo});
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t u = 0; u < kh; ++u)
                for (std::size_t v = 0; v < kw; ++v) {
                    const Real kv = kernel(((co * cin + ci) * kh + u) * kw + v);
                    if (kv == Real(0)) continue;
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(oy * stride + u) - static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + v) - static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            out((co * ho + oy) * wo + ox) +=
                                kv * input((ci * h + static_cast<std::size_t>(iy)) * w +
                                           static_cast<std::size_t>(ix));
                        }
                    }
                }

    if (detail::tracing({&input, &kernel})) {
        out.set_requires_grad();
        Tensor in = input, kn = kernel, o = out;
        Tape::current()->record([in, kn, o, cin, h, w, cout, kh, kw, ho, wo, stride, pad]() mutable {
            const auto& go = o.grad();
            const bool gi = in.requires_grad(), gk = kn.requires_grad();
            auto* gin = gi ? in.grad().data() : nullptr;
            auto* gkn = gk ? kn.grad().data() : nullptr;
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (std::size_t u = 0; u < kh; ++u)
                        for (std::size_t v = 0; v < kw; ++v) {
                            const std::size_t kidx = ((co * cin + ci) * kh + u) * kw + v;
                            const Real kv = kn(kidx);
                            Real kacc = 0;
                            for (std::size_t oy = 0; oy < ho; ++oy) {
                                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + u) -
                                                          static_cast<std::ptrdiff_t>(pad);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t ox = 0; ox < wo; ++ox) {
                                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + v) -
                                                              static_cast<std::ptrdiff_t>(pad);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                    const Real g = go[(co * ho + oy) * wo + ox];
                                    const std::size_t iidx = (ci * h + static_cast<std::size_t>(iy)) * w +
                                                             static_cast<std::size_t>(ix);
                                    if (gi) gin[iidx] += kv * g;
                                    if (gk) kacc += in(iidx) * g;
                                }
                            }
                            if (gk) gkn[kidx] += kacc;
                        }
        });
    }
    return out;
}

// x [C, H, W] plus a per-channel bias [C].
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 3 || bias.rank() != 1 || bias.dim(0) != x.dim(0))
        throw DimensionError("add_channel_bias: shapes " + shape_str(x.shape()) + " and " +
                             shape_str(bias.shape()));
    const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t i = 0; i < hw; ++i) out(ci * hw + i) = x(ci * hw + i) + bias(ci);
    if (detail::tracing({&x, &bias})) {
        out.set_requires_grad();
        Tensor xin = x, bin = bias, o = out;
        Tape::current()->record([xin, bin, o, c, hw]() mutable {
            const auto& go = o.grad();
            if (xin.requires_grad()) {
                auto& gx = xin.grad();
                for (std::size_t i = 0; i < c * hw; ++i) gx[i] += go[i];
            }
            if (bin.requires_grad()) {
                auto& gb = bin.grad();
                for (std::size_t ci = 0; ci < c; ++ci) {
                    Real acc = 0;
                    for (std::size_t i = 0; i < hw; ++i) acc += go[ci * hw + i];
                    gb[ci] += acc;
                }
            }
        });
    }
    return out;
}

inline Tensor max_pool2d(const Tensor& x, std::size_t k, std::size_t stride) {
    if (x.rank() != 3) throw DimensionError("max_pool2d: expected [C,H,W], got " + shape_str(x.shape()));
    if (k < 1 || stride < 1) throw ContractError("max_pool2d: k and stride must be >= 1");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h < k || w < k) throw DimensionError("max_pool2d: window larger than input");
    const std::size_t ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
    Tensor out = Tensor::zeros({c, ho, wo});
    std::vector<std::size_t> argmax(c * ho * wo);
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                Real best = x((ci * h + oy * stride) * w + ox * stride);
                std::size_t bidx = (ci * h + oy * stride) * w + ox * stride;
                for (std::size_t u = 0; u < k; ++u)
                    for (std::size_t v = 0; v < k; ++v) {
                        const std::size_t idx = (ci * h + oy * stride + u) * w + ox * stride + v;
                        if (x(idx) > best) {
                            best = x(idx);
                            bidx = idx;
                        }
                    }
                out((ci * ho + oy) * wo + ox) = best;
                argmax[(ci * ho + oy) * wo + ox] = bidx;
            }
    if (detail::tracing({&x})) {
        out.set_requires_grad();
        Tensor xin = x, o = out;
        Tape::current()->record([xin, o, argmax]() mutable {
            auto& gx = xin.grad();
            const auto& go = o.grad();
            for (std::size_t i = 0; i < o.size(); ++i) gx[argmax[i]] += go[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

inline Tensor nearest_upsample(const Tensor& x, std::size_t factor) {
    if (x.rank() != 3) throw DimensionError("nearest_upsample: expected [C,H,W]");
    if (factor < 1) throw ContractError("nearest_upsample: factor must be >= 1");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t ho = h * factor, wo = w * factor;
    Tensor out = Tensor::zeros({c, ho, wo});
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox)
                out((ci * ho + oy) * wo + ox) = x((ci * h + oy / factor) * w + ox / factor);
    if (detail::tracing({&x})) {
        out.set_requires_grad();
        Tensor xin = x, o = out;
        Tape::current()->record([xin, o, c, h, w, ho, wo, factor]() mutable {
            auto& gx = xin.grad();
            const auto& go = o.grad();
            for (std::size_t ci = 0; ci < c; ++ci)
                for (std::size_t oy = 0; oy < ho; ++oy)
                    for (std::size_t ox = 0; ox < wo; ++ox)
                        gx[(ci * h + oy / factor) * w + ox / factor] += go[(ci * ho + oy) * wo + ox];
        });
    }
    return out;
}

// General bilinear resize with half-pixel sample centers, so a constant field
// stays constant and any rational ratio (up or down) is supported.
inline Tensor bilinear_resize(const Tensor& x, std::size_t ho, std::size_t wo) {
    if (x.rank() != 3) throw DimensionError("bilinear_resize: expected [C,H,W]");
    if (ho < 1 || wo < 1) throw ContractError("bilinear_resize: output dims must be >= 1");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);

    struct Tap {
        std::size_t lo, hi;
        Real frac;
    };
    auto taps = [](std::size_t out_len, std::size_t in_len) {
        std::vector<Tap> t(out_len);
        const Real scale = static_cast<Real>(in_len) / static_cast<Real>(out_len);
        for (std::size_t i = 0; i < out_len; ++i) {
            Real src = (static_cast<Real>(i) + Real(0.5)) * scale - Real(0.5);
            src = std::max(Real(0), std::min(src, static_cast<Real>(in_len - 1)));
            const std::size_t lo = static_cast<std::size_t>(src);
            t[i] = {lo, std::min(lo + 1, in_len - 1), src - static_cast<Real>(lo)};
        }
        return t;
    };
    const auto ty = taps(ho, h), tx = taps(wo, w);

    Tensor out = Tensor::zeros({c, ho, wo});
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const auto& a = ty[oy];
                const auto& b = tx[ox];
                const Real v00 = x((ci * h + a.lo) * w + b.lo), v01 = x((ci * h + a.lo) * w + b.hi);
                const Real v10 = x((ci * h + a.hi) * w + b.lo), v11 = x((ci * h + a.hi) * w + b.hi);
                out((ci * ho + oy) * wo + ox) = (Real(1) - a.frac) * ((Real(1) - b.frac) * v00 + b.frac * v01) +
                                                a.frac * ((Real(1) - b.frac) * v10 + b.frac * v11);
            }
    if (detail::tracing({&x})) {
        out.set_requires_grad();
        Tensor xin = x, o = out;
        Tape::current()->record([xin, o, ty, tx, c, h, w, ho, wo]() mutable {
            auto& gx = xin.grad();
            const auto& go = o.grad();
            for (std::size_t ci = 0; ci < c; ++ci)
                for (std::size_t oy = 0; oy < ho; ++oy)
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const auto& a = ty[oy];
                        const auto& b = tx[ox];
                        const Real g = go[(ci * ho + oy) * wo + ox];
                        gx[(ci * h + a.lo) * w + b.lo] += g * (Real(1) - a.frac) * (Real(1) - b.frac);
                        gx[(ci * h + a.lo) * w + b.hi] += g * (Real(1) - a.frac) * b.frac;
                        gx[(ci * h + a.hi) * w + b.lo] += g * a.frac * (Real(1) - b.frac);
                        gx[(ci * h + a.hi) * w + b.hi] += g * a.frac * b.frac;
                    }
        });
    }
    return out;
}

inline Tensor bilinear_upsample(const Tensor& x, std::size_t factor) {
    if (factor < 1) throw ContractError("bilinear_upsample: factor must be >= 1");
    if (x.rank() != 3) throw DimensionError("bilinear_upsample: expected [C,H,W]");
    return bilinear_resize(x, x.dim(1) * factor, x.dim(2) * factor);
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const Shape& base = parts[0].shape();
    if (axis >= base.size()) throw DimensionError("concat: axis out of range");
    std::size_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != base.size()) throw DimensionError("concat: rank mismatch");
        for (std::size_t d = 0; d < base.size(); ++d)
            if (d != axis && p.dim(d) != base[d])
                throw DimensionError("concat: shape mismatch at axis " + std::to_string(d));
        axis_total += p.dim(axis);
    }
    Shape out_shape = base;
    out_shape[axis] = axis_total;

    std::size_t inner = 1, outer = 1;
    for (std::size_t d = axis + 1; d < base.size(); ++d) inner *= base[d];
    for (std::size_t d = 0; d < axis; ++d) outer *= base[d];

    Tensor out = Tensor::zeros(out_shape);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t alen = p.dim(axis);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < alen; ++k)
                for (std::size_t in = 0; in < inner; ++in)
                    out((o * axis_total + offset + k) * inner + in) = p((o * alen + k) * inner + in);
        offset += alen;
    }

    bool any_grad = false;
    for (const auto& p : parts) any_grad |= p.requires_grad();
    if (Tape::current() && any_grad) {
        out.set_requires_grad();
        std::vector<Tensor> ins = parts;
        Tensor o = out;
        Tape::current()->record([ins, o, axis_total, inner, outer]() mutable {
            const auto& go = o.grad();
            std::size_t offset = 0;
            for (auto& p : ins) {
                const std::size_t len = p.size() / (inner * outer);
                if (p.requires_grad()) {
                    auto& gp = p.grad();
                    for (std::size_t ot = 0; ot < outer; ++ot)
                        for (std::size_t k = 0; k < len; ++k)
                            for (std::size_t in = 0; in < inner; ++in)
                                gp[(ot * len + k) * inner + in] +=
                                    go[(ot * axis_total + offset + k) * inner + in];
                }
                offset += len;
            }
        });
    }
    return out;
}

// View-like selection of index i along axis 0 (copying, with gradient).
inline Tensor select0(const Tensor& x, std::size_t i) {
    if (x.rank() < 2) throw DimensionError("select0: rank must be >= 2");
    if (i >= x.dim(0)) throw DimensionError("select0: index out of range");
    Shape out_shape(x.shape().begin() + 1, x.shape().end());
    const std::size_t inner = shape_numel(out_shape);
    Tensor out = Tensor::zeros(out_shape);
    for (std::size_t k = 0; k < inner; ++k) out(k) = x(i * inner + k);
    if (detail::tracing({&x})) {
        out.set_requires_grad();
        Tensor xin = x, o = out;
        Tape::current()->record([xin, o, i, inner]() mutable {
            auto& gx = xin.grad();
            const auto& go = o.grad();
            for (std::size_t k = 0; k < inner; ++k) gx[i * inner + k] += go[k];
        });
    }
    return out;
}

}  // namespace hmfn
