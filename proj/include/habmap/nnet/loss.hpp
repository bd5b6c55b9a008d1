#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "habmap/error.hpp"
#include "habmap/nnet/tensor.hpp"

namespace habmap::nnet {

template <class T>
std::vector<T> softmax(std::span<const T> logits) {
    if (logits.empty()) return {};
    T hi = logits[0];
    for (T v : logits) {
        if (std::isnan(v)) throw NumericalError("softmax: NaN logit");
        hi = std::max(hi, v);
    }
    std::vector<T> out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double e = std::exp(static_cast<double>(logits[i]) - static_cast<double>(hi));
        out[i] = static_cast<T>(e);
        total += e;
    }
    for (auto& v : out) v = static_cast<T>(static_cast<double>(v) / total);
    return out;
}

template <class T>
std::vector<T> softmax(const std::vector<T>& logits) {
    return softmax(std::span<const T>(logits));
}

/// Row-wise softmax of a (B, K) tensor.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
    Tensor<T> out(logits.shape());
    const auto k = logits.dim(1);
    for (std::size_t b = 0; b < logits.dim(0); ++b) {
        const auto p = softmax(logits.row(b));
        std::copy(p.begin(), p.end(), out.values().begin() + static_cast<std::ptrdiff_t>(b * k));
    }
    return out;
}

template <class T>
struct LossResult {
    double loss = 0.0;
    /// d(loss)/d(logits), same shape as the logits.
    Tensor<T> grad;
};

inline constexpr double kSoftTargetTolerance = 1e-4;

/// Mean over the batch of -sum(target * log softmax(logits)) for soft
/// target distributions (rows of `targets`).
template <class T>
LossResult<T> cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets) {
    if (logits.rank() != 2 || targets.shape() != logits.shape()) {
        throw DataError("cross_entropy: targets shape " + shape_string(targets.shape()) + " != logits shape " +
                        shape_string(logits.shape()));
    }
    const auto bsz = logits.dim(0);
    const auto k = logits.dim(1);
    LossResult<T> r{0.0, Tensor<T>(logits.shape())};
    for (std::size_t b = 0; b < bsz; ++b) {
        const auto row = logits.row(b);
        const auto tgt = targets.row(b);
        double tsum = 0.0;
        for (T t : tgt) {
            if (!(t >= T{0})) throw DataError("cross_entropy: negative or NaN soft target");
            tsum += t;
        }
        if (std::abs(tsum - 1.0) > kSoftTargetTolerance) throw DataError("cross_entropy: soft target row does not sum to 1");
        std::size_t top = 0;
        for (std::size_t i = 0; i < k; ++i) {
            if (std::isnan(row[i])) throw NumericalError("cross_entropy: NaN logit");
            if (row[i] > row[top]) top = i;
        }
        const double hi = row[top];
        double rest = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            if (i != top) rest += std::exp(static_cast<double>(row[i]) - hi);
        }
        for (std::size_t i = 0; i < k; ++i) {
            const double logp = (static_cast<double>(row[i]) - hi) - std::log1p(rest);
            r.loss -= static_cast<double>(tgt[i]) * logp;
            r.grad.at(b, i) = static_cast<T>((std::exp(logp) - static_cast<double>(tgt[i])) / static_cast<double>(bsz));
        }
    }
    r.loss /= static_cast<double>(bsz);
    return r;
}

template <class T>
Tensor<T> one_hot(std::span<const int> labels, std::size_t k) {
    Tensor<T> t({labels.size(), k});
    for (std::size_t b = 0; b < labels.size(); ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= k) throw DataError("class index out of range");
        t.at(b, static_cast<std::size_t>(labels[b])) = T{1};
    }
    return t;
}

/// Hard-label form: targets are class indices.
template <class T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || labels.size() != logits.dim(0)) throw DataError("cross_entropy: label count mismatch");
    return cross_entropy(logits, one_hot<T>(labels, logits.dim(1)));
}

} // namespace habmap::nnet
