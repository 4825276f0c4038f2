#ifndef DIMR_GRADCHECK_HPP
#define DIMR_GRADCHECK_HPP

#include <cmath>
#include <functional>

#include "dimr/autodiff.hpp"
#include "dimr/ops.hpp"

namespace dimr {

// Central finite differences against the recorded reverse-mode gradient.
// Relative error uses max(|a|,|b|) + 1e-3 in the denominator so near-zero
// gradients are compared absolutely at a sane scale.

template <typename T>
double rel_err(double a, double b) {
    return std::fabs(a - b) / (std::max(std::fabs(a), std::fabs(b)) + 1e-3);
}

// Core check: `loss` rebuilds the scalar objective from current tensor
// contents; `target` is the leaf whose gradient is probed (an input or a
// parameter). `max_probes` strides over elements when the leaf is large.
template <typename T>
double grad_check_leaf(const std::function<Var<T>()>& loss, const Var<T>& target, double step,
                       size_t max_probes = size_t(-1)) {
    target->requires_grad = true;
    target->zero_grad();
    auto root = loss();
    if (!std::isfinite(double(root->value.data[0]))) throw NumericError("grad_check: non-finite objective");
    backward(root);
    Tensor<T> analytic = target->grad.size() ? target->grad : Tensor<T>::zeros(target->value.shape);

    size_t n = target->value.size();
    size_t stride = 1;
    if (max_probes != size_t(-1) && max_probes > 0 && n > max_probes) stride = (n + max_probes - 1) / max_probes;

    double worst = 0;
    NoGradGuard ng;
    for (size_t i = 0; i < n; i += stride) {
        T saved = target->value.data[i];
        target->value.data[i] = saved + T(step);
        double fp = double(loss()->value.data[0]);
        target->value.data[i] = saved - T(step);
        double fm = double(loss()->value.data[0]);
        target->value.data[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("grad_check: non-finite objective at probe");
        double fd = (fp - fm) / (2.0 * step);
        worst = std::max(worst, rel_err<T>(double(analytic.data[i]), fd));
    }
    return worst;
}

// convenience entry point: scalar function of one tensor input
template <typename T>
double grad_check(const std::function<Var<T>(const Var<T>&)>& f, const Tensor<T>& x, double step,
                  size_t max_probes = size_t(-1)) {
    auto leaf = make_leaf(x, true);
    return grad_check_leaf<T>([&]() { return f(leaf); }, leaf, step, max_probes);
}

} // namespace dimr

#endif
