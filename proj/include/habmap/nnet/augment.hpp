#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "habmap/error.hpp"
#include "habmap/nnet/tensor.hpp"
#include "habmap/random.hpp"
#include "habmap/raster.hpp"

namespace habmap::nnet {

inline Patch hflip(const Patch& p) {
    Patch out = p;
    for (std::size_t c = 0; c < p.channels; ++c)
        for (std::size_t r = 0; r < p.size; ++r)
            for (std::size_t k = 0; k < p.size; ++k) out.at(c, r, k) = p.at(c, r, p.size - 1 - k);
    return out;
}

inline Patch vflip(const Patch& p) {
    Patch out = p;
    for (std::size_t c = 0; c < p.channels; ++c)
        for (std::size_t r = 0; r < p.size; ++r)
            for (std::size_t k = 0; k < p.size; ++k) out.at(c, r, k) = p.at(c, p.size - 1 - r, k);
    return out;
}

inline std::vector<double> gaussian_kernel(double sigma) {
    if (!(sigma > 0.0)) throw UsageError("blur sigma must be > 0");
    const auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double total = 0.0;
    for (std::size_t i = 0; i < k.size(); ++i) {
        const double d = static_cast<double>(i) - static_cast<double>(radius);
        k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
        total += k[i];
    }
    for (auto& v : k) v /= total;
    return k;
}

/// Separable per-channel Gaussian blur with mirrored borders.
inline Patch gaussian_blur(const Patch& p, double sigma) {
    const auto kernel = gaussian_kernel(sigma);
    const auto radius = static_cast<std::int64_t>(kernel.size() / 2);
    const auto n = p.size;
    Patch tmp = p;
    Patch out = p;
    for (std::size_t c = 0; c < p.channels; ++c) {
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t k = 0; k < n; ++k) {
                double s = 0.0;
                for (std::int64_t t = -radius; t <= radius; ++t) {
                    s += kernel[static_cast<std::size_t>(t + radius)] *
                         p.at(c, r, reflect_index(static_cast<std::int64_t>(k) + t, n));
                }
                tmp.at(c, r, k) = static_cast<float>(s);
            }
        }
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t k = 0; k < n; ++k) {
                double s = 0.0;
                for (std::int64_t t = -radius; t <= radius; ++t) {
                    s += kernel[static_cast<std::size_t>(t + radius)] *
                         tmp.at(c, reflect_index(static_cast<std::int64_t>(r) + t, n), k);
                }
                out.at(c, r, k) = static_cast<float>(s);
            }
        }
    }
    return out;
}

/// Central (side x side) window; the centre pixel stays at the centre.
inline Patch center_crop(const Patch& p, std::size_t side) {
    if (side % 2 == 0 || side < 1) throw UsageError("crop side must be odd");
    if (p.size % 2 == 0) throw UsageError("patch side must be odd");
    if (side > p.size) throw UsageError("crop side " + std::to_string(side) + " exceeds patch side " + std::to_string(p.size));
    if (side == p.size) return p;
    Patch out = p;
    out.size = side;
    out.values.assign(p.channels * side * side, 0.0f);
    const auto off = (p.size - side) / 2;
    for (std::size_t c = 0; c < p.channels; ++c)
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t k = 0; k < side; ++k) out.at(c, r, k) = p.at(c, r + off, k + off);
    return out;
}

/// Random augmentation set. Flips and blur fire independently with their
/// probabilities; the crop side is drawn uniformly from {crop_min,
/// crop_min+2, ..., crop_max}.
struct AugmentOps {
    bool hflip = false;
    bool vflip = false;
    bool blur = false;
    bool center_crop = false;
    double flip_probability = 0.5;
    double blur_probability = 0.5;
    double blur_sigma_min = 0.1;
    double blur_sigma_max = 2.0;
    std::size_t crop_min = 3;
    std::size_t crop_max = 19;

    bool empty() const { return !hflip && !vflip && !blur && !center_crop; }

    /// Flips and blur; the default test-time set.
    static AugmentOps flips_and_blur() {
        AugmentOps ops;
        ops.hflip = ops.vflip = ops.blur = true;
        return ops;
    }

    void validate() const {
        if (center_crop) {
            if (crop_min % 2 == 0 || crop_max % 2 == 0) throw UsageError("crop sizes must be odd");
            if (crop_max < crop_min) throw UsageError("crop_max < crop_min");
        }
        if (blur && !(blur_sigma_min > 0.0 && blur_sigma_max >= blur_sigma_min)) throw UsageError("bad blur sigma range");
    }
};

inline std::size_t draw_crop_side(const AugmentOps& ops, Rng& rng) {
    const auto choices = (ops.crop_max - ops.crop_min) / 2 + 1;
    return ops.crop_min + 2 * static_cast<std::size_t>(rng.below(choices));
}

/// Spatial augmentations only; cropping is applied separately per batch.
inline Patch augment_pixels(const Patch& p, const AugmentOps& ops, Rng& rng) {
    Patch out = p;
    if (ops.hflip && rng.coin(ops.flip_probability)) out = hflip(out);
    if (ops.vflip && rng.coin(ops.flip_probability)) out = vflip(out);
    if (ops.blur && rng.coin(ops.blur_probability)) {
        out = gaussian_blur(out, rng.uniform(ops.blur_sigma_min, ops.blur_sigma_max));
    }
    return out;
}

inline Patch augment(const Patch& p, const AugmentOps& ops, Rng& rng) {
    ops.validate();
    if (p.size % 2 == 0) throw UsageError("patch side must be odd");
    auto out = augment_pixels(p, ops, rng);
    if (ops.center_crop) {
        AugmentOps bounded = ops;
        bounded.crop_max = std::min(ops.crop_max, p.size);
        if (bounded.crop_max < bounded.crop_min) throw UsageError("patch smaller than crop_min");
        out = center_crop(out, draw_crop_side(bounded, rng));
    }
    return out;
}

/// (B, C, side, side) tensor from centre crops of the given patches.
template <class T>
Tensor<T> make_batch(std::span<const Patch> patches, std::size_t side) {
    if (patches.empty()) throw DataError("make_batch: no patches");
    const auto c = patches.front().channels;
    Tensor<T> t({patches.size(), c, side, side});
    const auto per = c * side * side;
    for (std::size_t b = 0; b < patches.size(); ++b) {
        const auto& p = patches[b];
        if (p.channels != c) throw DataError("make_batch: channel count mismatch");
        const Patch cropped = p.size == side ? p : center_crop(p, side);
        for (std::size_t i = 0; i < per; ++i) t[b * per + i] = static_cast<T>(cropped.values[i]);
    }
    return t;
}

} // namespace habmap::nnet
