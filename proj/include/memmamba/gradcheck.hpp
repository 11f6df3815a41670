#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "memmamba/tensor.hpp"

namespace memmamba {

// Central-difference gradient verification. f must be a deterministic map
// from one tensor to a scalar tensor; it is handed a tape-linked copy of x
// for the analytic pass and unlinked perturbed copies for the numeric one.
// Returns max over entries of |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
template <typename F>
double finite_diff_check(F&& f, const Tensor<double>& x, double h) {
    auto tape = Tape<double>::create();
    Tensor<double> xw = x.clone();
    tape->watch(xw);
    Tensor<double> loss = f(static_cast<const Tensor<double>&>(xw));
    if (loss.numel() != 1) {
        throw ContractError("finite_diff_check requires a scalar-valued function");
    }
    tape->backward(loss);
    Tensor<double> analytic = tape->grad(xw);

    double max_rel = 0.0;
    Tensor<double> probe = x.clone();
    auto pv = probe.values();
    auto av = analytic.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double keep = pv[i];
        pv[i] = keep + h;
        const double up = f(static_cast<const Tensor<double>&>(probe)).item();
        pv[i] = keep - h;
        const double down = f(static_cast<const Tensor<double>&>(probe)).item();
        pv[i] = keep;
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max(1e-12, std::abs(av[i]) + std::abs(numeric));
        max_rel = std::max(max_rel, std::abs(av[i] - numeric) / denom);
    }
    return max_rel;
}

// Same check for a scalar loss over a set of named parameters: one analytic
// backward, then central differences entry by entry. loss_fn must re-evaluate
// the full forward pass from the current parameter values.
struct ParamCheckResult {
    std::string name;
    double max_rel_err;
};

inline std::vector<ParamCheckResult> finite_diff_check_params(
    const std::function<Tensor<double>()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor<double>*>>& params, double h) {
    auto tape = Tape<double>::create();
    for (auto& [name, p] : params) tape->watch(*p);
    Tensor<double> loss = loss_fn();
    tape->backward(loss);

    std::vector<Tensor<double>> grads;
    grads.reserve(params.size());
    for (auto& [name, p] : params) grads.push_back(tape->grad(*p));
    for (auto& [name, p] : params) p->unlink();

    std::vector<ParamCheckResult> results;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto values = params[pi].second->values();
        auto av = grads[pi].values();
        double max_rel = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double keep = values[i];
            values[i] = keep + h;
            const double up = loss_fn().item();
            values[i] = keep - h;
            const double down = loss_fn().item();
            values[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double denom = std::max(1e-12, std::abs(av[i]) + std::abs(numeric));
            max_rel = std::max(max_rel, std::abs(av[i] - numeric) / denom);
        }
        results.push_back({params[pi].first, max_rel});
    }
    return results;
}

}  // namespace memmamba
