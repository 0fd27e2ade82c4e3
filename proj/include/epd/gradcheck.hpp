#pragma once

// Central finite-difference gradient checking. Used by the unit tests, the
// acceptance suite and the `gradcheck` CLI subcommand. Meaningful tolerances
// require T = double.

#include <functional>
#include <string>
#include <vector>

#include "epd/autograd.hpp"

namespace epd {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t checked_elements = 0;
};

// |a - n| scaled by max(1, |a|, |n|): relative for large grads, absolute near 0
inline double grad_rel_err(double analytic, double numeric) {
    double scale = std::max(1.0, std::max(std::abs(analytic), std::abs(numeric)));
    return std::abs(analytic - numeric) / scale;
}

// Compares reverse-mode gradients of loss_fn against central differences for
// every element of every named parameter. loss_fn must rebuild its graph per
// call and be a pure function of the parameter values.
template <class T>
GradCheckResult check_gradients(const std::function<Tensor<T>()>& loss_fn,
                                std::vector<std::pair<std::string, Tensor<T>>> params,
                                double step = 1e-4) {
    for (auto& [name, p] : params) p.zero_grad();
    Tensor<T> loss = loss_fn();
    backward(loss);

    // freeze analytic grads before perturbing
    std::vector<std::vector<T>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params)
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<T>(size_t(p.numel()), T(0)));

    GradCheckResult res;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi].second;
        for (int64_t i = 0; i < p.numel(); ++i) {
            T orig = p.ptr()[i];
            p.ptr()[i] = orig + T(step);
            double lp;
            {
                NoGradGuard ng;
                lp = double(loss_fn().item());
            }
            p.ptr()[i] = orig - T(step);
            double lm;
            {
                NoGradGuard ng;
                lm = double(loss_fn().item());
            }
            p.ptr()[i] = orig;
            double numeric = (lp - lm) / (2.0 * step);
            double err = grad_rel_err(double(analytic[pi][size_t(i)]), numeric);
            ++res.checked_elements;
            if (err > res.max_rel_err) {
                res.max_rel_err = err;
                res.worst_param = strcat(params[pi].first, "[", i, "]");
            }
        }
    }
    return res;
}

}  // namespace epd
