#pragma once

// Central finite-difference oracle for the autodiff engine. Runs at double
// precision; the relative error denominator is floored at 1e-4 so negligible
// gradients compare on an absolute scale instead of blowing up the ratio.

#include <functional>

#include "vfmtok/ops.hpp"

namespace vfmtok {

template <typename S>
using ScalarFn = std::function<Tensor<S>(const Tensor<S>&)>;

template <typename S>
S rel_err(S a, S n) {
    const S denom = std::max({std::abs(a), std::abs(n), S(1e-4)});
    return std::abs(a - n) / denom;
}

// Max relative error between autodiff and central differences over every
// element of x. f must be deterministic.
template <typename S>
S finite_diff_gradcheck(const ScalarFn<S>& f, Tensor<S> x, S step = S(1e-5)) {
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor<S> loss = f(x);
    loss.backward();
    std::vector<S> analytic = x.grad();

    S worst = 0;
    for (size_t i = 0; i < x.data().size(); ++i) {
        const S orig = x.data()[i];
        x.data()[i] = orig + step;
        S up;
        {
            NoGradGuard ng;
            up = f(x).item();
        }
        x.data()[i] = orig - step;
        S down;
        {
            NoGradGuard ng;
            down = f(x).item();
        }
        x.data()[i] = orig;
        const S numeric = (up - down) / (2 * step);
        worst = std::max(worst, rel_err(analytic[i], numeric));
    }
    return worst;
}

// Same check against a set of named parameters: perturbs each parameter of a
// zero-argument scalar model function. Returns the max relative error and the
// name of the worst parameter.
template <typename S>
std::pair<S, std::string> finite_diff_gradcheck_params(
    const std::function<Tensor<S>()>& f,
    const std::vector<std::pair<std::string, Tensor<S>>>& params, S step = S(1e-5)) {
    for (auto& [name, p] : params) const_cast<Tensor<S>&>(p).zero_grad();
    Tensor<S> loss = f();
    loss.backward();

    S worst = 0;
    std::string worst_name;
    for (auto& [name, pc] : params) {
        Tensor<S>& p = const_cast<Tensor<S>&>(pc);
        const std::vector<S> analytic = p.has_grad() ? p.grad() : std::vector<S>(p.data().size(), S(0));
        for (size_t i = 0; i < p.data().size(); ++i) {
            const S orig = p.data()[i];
            p.data()[i] = orig + step;
            S up;
            {
                NoGradGuard ng;
                up = f().item();
            }
            p.data()[i] = orig - step;
            S down;
            {
                NoGradGuard ng;
                down = f().item();
            }
            p.data()[i] = orig;
            const S numeric = (up - down) / (2 * step);
            const S e = rel_err(analytic[i], numeric);
            if (e > worst) {
                worst = e;
                worst_name = name;
            }
        }
    }
    return {worst, worst_name};
}

}  // namespace vfmtok
