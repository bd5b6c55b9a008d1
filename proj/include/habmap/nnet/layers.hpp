#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "habmap/nnet/gemm.hpp"
#include "habmap/nnet/tensor.hpp"
#include "habmap/random.hpp"

namespace habmap::nnet {

enum class Mode { train, eval };

/// Learnable tensor with its gradient. `conv_stack` marks parameters that
/// belong to the feature extractor (everything except the classifier head).
template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
    bool conv_stack = true;

    Param() = default;
    Param(std::string n, std::vector<std::size_t> shape, bool in_conv_stack = true)
        : name(std::move(n)), value(shape), grad(shape), trainable(true), conv_stack(in_conv_stack) {}
};

/// Activation map in (C, B, H, W) order, so every channel is one contiguous
/// block of B*H*W samples.
template <class T>
struct Activation {
    std::size_t c = 0;
    std::size_t b = 0;
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<T> v;

    Activation() = default;
    Activation(std::size_t c_, std::size_t b_, std::size_t h_, std::size_t w_)
        : c(c_), b(b_), h(h_), w(w_), v(c_ * b_ * h_ * w_, T{0}) {}
    std::size_t per_channel() const { return b * h * w; }
};

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride) {
    const std::size_t pad = kernel / 2;
    return (in + 2 * pad - kernel) / stride + 1;
}

/// Square convolution without bias. Borders are padded by replicating the
/// edge sample, so a constant input yields a constant output.
template <class T>
struct Conv2d {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    Param<T> weight;

    Conv2d() = default;
    Conv2d(std::string name, std::size_t in_c, std::size_t out_c, std::size_t k, std::size_t s)
        : in(in_c), out(out_c), kernel(k), stride(s), weight(name + ".weight", {out_c, in_c, k, k}) {}

    void init(Rng& rng) {
        const double std = std::sqrt(2.0 / static_cast<double>(in * kernel * kernel));
        for (auto& v : weight.value.values()) v = static_cast<T>(rng.normal(0.0, std));
    }

    std::size_t col_rows() const { return in * kernel * kernel; }

    void im2col(const Activation<T>& x, std::size_t ho, std::size_t wo, std::vector<T>& col) const {
        const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
        const std::size_t cols = x.b * ho * wo;
        col.resize(col_rows() * cols);
        const auto hmax = static_cast<std::ptrdiff_t>(x.h) - 1;
        const auto wmax = static_cast<std::ptrdiff_t>(x.w) - 1;
        for (std::size_t ci = 0; ci < in; ++ci) {
            const T* plane = x.v.data() + ci * x.per_channel();
            for (std::size_t ki = 0; ki < kernel; ++ki) {
                for (std::size_t kj = 0; kj < kernel; ++kj) {
                    T* dst = col.data() + ((ci * kernel + ki) * kernel + kj) * cols;
                    for (std::size_t bi = 0; bi < x.b; ++bi) {
                        const T* img = plane + bi * x.h * x.w;
                        for (std::size_t oy = 0; oy < ho; ++oy) {
                            const auto iy = std::clamp<std::ptrdiff_t>(
                                static_cast<std::ptrdiff_t>(oy * stride + ki) - pad, 0, hmax);
                            const T* src_row = img + static_cast<std::size_t>(iy) * x.w;
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                                const auto ix = std::clamp<std::ptrdiff_t>(
                                    static_cast<std::ptrdiff_t>(ox * stride + kj) - pad, 0, wmax);
                                *dst++ = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    void col2im(const std::vector<T>& dcol, Activation<T>& dx, std::size_t ho, std::size_t wo) const {
        const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
        const std::size_t cols = dx.b * ho * wo;
        const auto hmax = static_cast<std::ptrdiff_t>(dx.h) - 1;
        const auto wmax = static_cast<std::ptrdiff_t>(dx.w) - 1;
        for (std::size_t ci = 0; ci < in; ++ci) {
            T* plane = dx.v.data() + ci * dx.per_channel();
            for (std::size_t ki = 0; ki < kernel; ++ki) {
                for (std::size_t kj = 0; kj < kernel; ++kj) {
                    const T* src = dcol.data() + ((ci * kernel + ki) * kernel + kj) * cols;
                    for (std::size_t bi = 0; bi < dx.b; ++bi) {
                        T* img = plane + bi * dx.h * dx.w;
                        for (std::size_t oy = 0; oy < ho; ++oy) {
                            const auto iy = std::clamp<std::ptrdiff_t>(
                                static_cast<std::ptrdiff_t>(oy * stride + ki) - pad, 0, hmax);
                            T* dst_row = img + static_cast<std::size_t>(iy) * dx.w;
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                                const auto ix = std::clamp<std::ptrdiff_t>(
                                    static_cast<std::ptrdiff_t>(ox * stride + kj) - pad, 0, wmax);
                                dst_row[ix] += *src++;
                            }
                        }
                    }
                }
            }
        }
    }

    /// `col` receives the unfolded input for a later backward pass.
    Activation<T> forward(const Activation<T>& x, std::vector<T>& col) const {
        const auto ho = conv_out_size(x.h, kernel, stride);
        const auto wo = conv_out_size(x.w, kernel, stride);
        im2col(x, ho, wo, col);
        Activation<T> y(out, x.b, ho, wo);
        gemm<T>(false, false, out, y.per_channel(), col_rows(), T{1}, weight.value.data(), col.data(), T{0},
                y.v.data());
        return y;
    }

    /// Accumulates the weight gradient (when trainable) and, if `dx` is
    /// given, the input gradient.
    void backward(const Activation<T>& dy, const std::vector<T>& col, Activation<T>* dx) {
        const auto cols = dy.per_channel();
        if (weight.trainable) {
            gemm<T>(false, true, out, col_rows(), cols, T{1}, dy.v.data(), col.data(), T{1}, weight.grad.data());
        }
        if (dx) {
            std::vector<T> dcol(col_rows() * cols);
            gemm<T>(true, false, col_rows(), cols, out, T{1}, weight.value.data(), dy.v.data(), T{0}, dcol.data());
            col2im(dcol, *dx, dy.h, dy.w);
        }
    }
};

template <class T>
struct BatchNormCache {
    std::vector<T> xhat;
    std::vector<T> inv_std;
    bool batch_stats = false;
};

/// Per-channel batch normalization with running statistics.
template <class T>
struct BatchNorm2d {
    std::size_t channels = 0;
    Param<T> gamma;
    Param<T> beta;
    std::vector<T> running_mean;
    std::vector<T> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    BatchNorm2d() = default;
    BatchNorm2d(std::string name, std::size_t c)
        : channels(c), gamma(name + ".weight", {c}), beta(name + ".bias", {c}), running_mean(c, T{0}),
          running_var(c, T{1}) {
        gamma.value.fill(T{1});
    }

    /// Frozen normalization layers always use running statistics.
    bool uses_batch_stats(Mode mode) const { return mode == Mode::train && gamma.trainable; }

    void forward_inplace(Activation<T>& x, Mode mode, BatchNormCache<T>* cache) {
        const auto n = x.per_channel();
        const bool batch = uses_batch_stats(mode);
        if (cache) {
            cache->xhat.resize(x.v.size());
            cache->inv_std.resize(channels);
            cache->batch_stats = batch;
        }
        for (std::size_t c = 0; c < channels; ++c) {
            T* v = x.v.data() + c * n;
            double mean;
            double var;
            if (batch) {
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) s += v[i];
                mean = s / static_cast<double>(n);
                double ss = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = v[i] - mean;
                    ss += d * d;
                }
                var = ss / static_cast<double>(n);
                const double unbiased = n > 1 ? ss / static_cast<double>(n - 1) : var;
                running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mean);
                running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbiased);
            } else {
                mean = running_mean[c];
                var = running_var[c];
            }
            const T inv = static_cast<T>(1.0 / std::sqrt(var + eps));
            const T g = gamma.value[c];
            const T bt = beta.value[c];
            const T m = static_cast<T>(mean);
            if (cache) {
                cache->inv_std[c] = inv;
                T* xh = cache->xhat.data() + c * n;
                for (std::size_t i = 0; i < n; ++i) {
                    xh[i] = (v[i] - m) * inv;
                    v[i] = g * xh[i] + bt;
                }
            } else {
                for (std::size_t i = 0; i < n; ++i) v[i] = g * ((v[i] - m) * inv) + bt;
            }
        }
    }

    /// Turns dy into dx in place, accumulating gamma/beta gradients.
    void backward_inplace(Activation<T>& dy, const BatchNormCache<T>& cache) {
        const auto n = dy.per_channel();
        for (std::size_t c = 0; c < channels; ++c) {
            T* d = dy.v.data() + c * n;
            const T* xh = cache.xhat.data() + c * n;
            double dg = 0.0;
            double db = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                dg += static_cast<double>(d[i]) * xh[i];
                db += d[i];
            }
            if (gamma.trainable) {
                gamma.grad[c] += static_cast<T>(dg);
                beta.grad[c] += static_cast<T>(db);
            }
            const T g = gamma.value[c];
            const T inv = cache.inv_std[c];
            if (cache.batch_stats) {
                const T scale = g * inv / static_cast<T>(n);
                const T nn = static_cast<T>(n);
                const T dbt = static_cast<T>(db);
                const T dgt = static_cast<T>(dg);
                for (std::size_t i = 0; i < n; ++i) d[i] = scale * (nn * d[i] - dbt - xh[i] * dgt);
            } else {
                const T scale = g * inv;
                for (std::size_t i = 0; i < n; ++i) d[i] *= scale;
            }
        }
    }
};

template <class T>
void relu_inplace(Activation<T>& x) {
    for (auto& v : x.v) v = v > T{0} ? v : T{0};
}

/// Zeroes gradient entries where the post-activation output was not positive.
template <class T>
void relu_backward_inplace(Activation<T>& dy, const Activation<T>& out) {
    for (std::size_t i = 0; i < dy.v.size(); ++i) {
        if (!(out.v[i] > T{0})) dy.v[i] = T{0};
    }
}

} // namespace habmap::nnet
