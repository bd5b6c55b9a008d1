#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "habmap/nnet/loss.hpp"
#include "habmap/nnet/network.hpp"
#include "habmap/random.hpp"

namespace habmap::test_support {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

/// Central finite differences on every parameter component of a 64-bit
/// network against the analytic backward pass.
inline GradCheckResult gradient_check(nnet::Network<double>& net, const nnet::Tensor<double>& input,
                                      const std::vector<int>& labels, double step = 1e-6,
                                      double abs_floor = 1e-7) {
    auto loss_at = [&] {
        auto logits = net.forward(input, nnet::Mode::train);
        return nnet::cross_entropy(logits, std::span<const int>(labels)).loss;
    };
    net.zero_grad();
    auto logits = net.forward(input, nnet::Mode::train);
    auto loss = nnet::cross_entropy(logits, std::span<const int>(labels));
    net.backward(loss.grad);

    GradCheckResult r;
    for (auto* p : net.parameters()) {
        if (!p->trainable) continue;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value[i];
            p->value[i] = orig + step;
            const double up = loss_at();
            p->value[i] = orig - step;
            const double down = loss_at();
            p->value[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = p->grad[i];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), abs_floor});
            const double rel = std::abs(numeric - analytic) / denom;
            ++r.checked;
            if (rel > r.max_rel_error) {
                r.max_rel_error = rel;
                r.worst_param = p->name;
                r.worst_index = i;
            }
        }
    }
    return r;
}

inline nnet::Tensor<double> random_input(std::size_t b, std::size_t c, std::size_t side, std::uint64_t seed) {
    nnet::Tensor<double> t({b, c, side, side});
    Rng rng(seed);
    for (auto& v : t.values()) v = rng.normal();
    return t;
}

} // namespace habmap::test_support
