#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "tensor.hpp"

namespace pemm {

/// Compares the analytic gradient of `loss_fn` (a pure scalar function of the
/// tracked tensor `x`, typically a lambda closing over fixed co-inputs)
/// against central finite differences, element by element. Returns
/// max_i |analytic_i - numeric_i| / max(1, |numeric_i|): relative error for
/// large gradients, absolute for small ones, so near-zero gradients cannot
/// blow the ratio up.
template <typename F>
inline double grad_check(F&& loss_fn, Tensor& x, double eps = 1e-5) {
    if (!x.requires_grad())
        throw ContractError("grad_check: x does not require gradients");

    Tape tape;
    {
        TapeScope scope(tape);
        Tensor loss = loss_fn();
        if (loss.size() != 1)
            throw ContractError("grad_check: loss_fn must return a scalar");
        x.zero_grad();
        tape.backward(loss);
    }
    std::vector<double> analytic = x.grad();
    tape.clear();

    double max_rel = 0.0;
    auto& xv = x.values();
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double keep = xv[i];
        xv[i] = keep + eps;
        const double fp = loss_fn().value();
        xv[i] = keep - eps;
        const double fm = loss_fn().value();
        xv[i] = keep;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double denom = std::max(1.0, std::abs(numeric));
        max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
    }
    return max_rel;
}

} // namespace pemm
