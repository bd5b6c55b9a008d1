#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "habmap/error.hpp"
#include "habmap/nnet/layers.hpp"

namespace habmap::nnet {

/// Bias-corrected Adam moments for one list of parameters.
template <class T>
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// One Adam update of every trainable parameter from its accumulated gradient.
template <class T>
void adam_step(const std::vector<Param<T>*>& params, AdamState<T>& state, double lr) {
    if (state.m.empty()) {
        for (const auto* p : params) {
            state.m.emplace_back(p->value.size(), 0.0);
            state.v.emplace_back(p->value.size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw DataError("adam_step: parameter list changed shape");
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto* p = params[i];
        if (!p->trainable) continue;
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p->value.size()) throw DataError("adam_step: accumulator shape mismatch");
        auto values = p->value.values();
        const auto grads = p->grad.values();
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double g = grads[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            values[j] = static_cast<T>(values[j] - lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

} // namespace habmap::nnet
