#pragma once

#include <functional>

#include "hmfn/tensor.hpp"

namespace hmfn {

// Central-difference gradient estimate of a scalar-valued function. This is
// the independent oracle the reverse-mode engine is checked against; it never
// touches the tape.
template <typename F>
Tensor finite_difference_grad(F f, Tensor x, Real eps = Real(1e-5)) {
    if (eps <= 0) throw ContractError("finite_difference_grad: eps must be > 0");
    Tensor g = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const Real saved = x(i);
        x(i) = saved + eps;
        const Real fp = f(x);
        x(i) = saved - eps;
        const Real fm = f(x);
        x(i) = saved;
        g(i) = (fp - fm) / (2 * eps);
    }
    return g;
}

// max_i |a_i - b_i| / max(1, |a_i|, |b_i|)
inline Real max_rel_err(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("max_rel_err: shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Real worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const Real denom = std::max(Real(1), std::max(std::fabs(a(i)), std::fabs(b(i))));
        worst = std::max(worst, std::fabs(a(i) - b(i)) / denom);
    }
    return worst;
}

// Runs f under a fresh tape, backpropagates, and compares the tape gradient
// of `param` against finite differences. f must be a pure function of the
// tensor contents.
template <typename F>
Real gradcheck(F f, Tensor param, Real eps = Real(1e-5)) {
    param.set_requires_grad();
    param.zero_grad();
    {
        Tape tape;
        Tensor loss = f(param);
        tape.backward(loss);
    }
    Tensor ad = Tensor::from_values(param.shape(), param.grad());
    param.set_requires_grad(false);
    Tensor fd = finite_difference_grad([&](Tensor& x) { return f(x).item(); }, param, eps);
    return max_rel_err(ad, fd);
}

}  // namespace hmfn
