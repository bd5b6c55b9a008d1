#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "habmap/dataset.hpp"
#include "habmap/error.hpp"
#include "habmap/random.hpp"
#include "habmap/raster.hpp"

namespace habmap::synth {

/// Two-sample Kolmogorov-Smirnov statistic.
inline double ks_distance(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) throw DataError("ks_distance: empty sample");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::size_t i = 0;
    std::size_t j = 0;
    double d = 0.0;
    while (i < a.size() && j < b.size()) {
        const double v = std::min(a[i], b[j]);
        while (i < a.size() && a[i] == v) ++i;
        while (j < b.size() && b[j] == v) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / static_cast<double>(a.size()) -
                                 static_cast<double>(j) / static_cast<double>(b.size())));
    }
    return d;
}

// --- two-texture corpus ------------------------------------------------------------

/// Texture 0 has horizontal stripes, texture 1 vertical stripes; both with
/// random phase and pixel noise. Period 4, so flips keep the orientation.
inline float stripe_value(int texture, std::size_t row, std::size_t col, std::size_t phase) {
    const auto t = texture == 0 ? row : col;
    return ((t + phase) % 4) < 2 ? 1.0f : -1.0f;
}

inline std::vector<Patch> two_texture_patches(std::size_t n, std::size_t side, std::size_t channels, double noise,
                                              std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Patch> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int texture = static_cast<int>(i % 2);
        const auto phase = static_cast<std::size_t>(rng.below(4));
        Patch p;
        p.channels = channels;
        p.size = side;
        p.values.resize(channels * side * side);
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t r = 0; r < side; ++r) {
                for (std::size_t k = 0; k < side; ++k) {
                    p.at(c, r, k) = stripe_value(texture, r, k, phase) + static_cast<float>(rng.normal(0.0, noise));
                }
            }
        }
        p.center_class = texture;
        p.source_point = "t" + std::to_string(i);
        out.push_back(std::move(p));
    }
    return out;
}

/// Standardized raster whose columns < `boundary_col` carry texture 0 and
/// the rest texture 1.
inline RasterStack two_texture_raster(std::size_t height, std::size_t width, std::size_t boundary_col,
                                      std::size_t channels, double noise, std::uint64_t seed) {
    Rng rng(seed);
    auto r = RasterStack::zeros(channels, height, width);
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t row = 0; row < height; ++row) {
            for (std::size_t col = 0; col < width; ++col) {
                r.at(c, row, col) =
                    stripe_value(col < boundary_col ? 0 : 1, row, col, 0) + static_cast<float>(rng.normal(0.0, noise));
            }
        }
    }
    r.mark_standardized();
    return r;
}

// --- long-tailed benchmark -----------------------------------------------------------

/// Layout: the raster is a grid of square tiles, one annotation point per
/// tile. A tile is filled with a random "surround" class and holds a square
/// core of the point's class around the (jittered) point. Classes 0 and 1
/// are the context pair: every pixel is either a "mound" (probability 0.25)
/// or background sample drawn from the same two distributions for both
/// classes; class 0 arranges mounds as 2x2 blocks on a 4x4 lattice, class 1
/// scatters them independently. Other classes are spectrally distinct.
struct BenchmarkConfig {
    std::size_t n_classes = 8;
    std::size_t channels = 4;
    /// Points of the most frequent classes (both context classes use it).
    /// With the default imbalance the rarest class is a singleton.
    std::size_t max_count = 472;
    /// Largest:smallest class count ratio.
    double imbalance = 472.0;
    std::size_t patch_size = 15;
    double pixel_size = 10.0;
    /// Extra tiles annotated only with coarse classes (pretraining corpus).
    std::size_t coarse_points = 600;
    /// Pixel noise relative to the spacing of class means.
    double noise = 0.6;
    /// Largest half-width of the square around points of non-context classes.
    std::size_t spectral_core_radius = 2;
    /// Maximum offset of the point from its tile centre.
    std::size_t jitter = 2;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_classes < 3) throw UsageError("benchmark needs at least 3 classes");
        if (channels < 1) throw UsageError("benchmark needs at least 1 channel");
        if (!(imbalance >= 1.0)) throw UsageError("imbalance ratio must be >= 1");
        if (patch_size < 5 || patch_size % 2 == 0) throw UsageError("patch_size must be odd and >= 5");
        if (max_count < 1) throw UsageError("max_count must be >= 1");
        if (!(pixel_size > 0.0)) throw UsageError("pixel_size must be > 0");
    }
};

struct Benchmark {
    RasterStack raster;
    Taxonomy taxonomy;
    std::vector<AnnotationPoint> points;
    Taxonomy coarse_taxonomy;
    std::vector<AnnotationPoint> coarse_points;
    /// Fine class index -> coarse class index.
    std::vector<int> coarse_of;
    std::vector<std::size_t> class_counts;
};

/// Per-class point counts: both context classes at max_count, the rest
/// falling geometrically to max_count / imbalance (at least 1).
inline std::vector<std::size_t> long_tail_counts(const BenchmarkConfig& cfg) {
    std::vector<std::size_t> counts(cfg.n_classes);
    counts[0] = cfg.max_count;
    const auto tail = cfg.n_classes - 1;
    for (std::size_t i = 1; i < cfg.n_classes; ++i) {
        const double frac = tail > 1 ? static_cast<double>(i - 1) / static_cast<double>(tail - 1) : 0.0;
        const double v = static_cast<double>(cfg.max_count) * std::pow(cfg.imbalance, -frac);
        counts[i] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(v)));
    }
    return counts;
}

inline std::string fine_code(std::size_t k) {
    return "H" + std::string(k < 10 ? "0" : "") + std::to_string(k);
}

/// Context classes keep their own coarse class; the others merge in pairs.
inline std::vector<int> coarse_mapping(std::size_t n_classes) {
    std::vector<int> m(n_classes);
    m[0] = 0;
    m[1] = 1;
    for (std::size_t k = 2; k < n_classes; ++k) m[k] = 2 + static_cast<int>((k - 2) / 2);
    return m;
}

namespace detail {

struct Spectra {
    std::vector<std::vector<float>> mean; // per class, per channel
    std::vector<float> mound;
    std::vector<float> ground;
};

inline Spectra draw_spectra(const BenchmarkConfig& cfg, Rng& rng) {
    Spectra s;
    auto vec = [&](double scale) {
        std::vector<float> v(cfg.channels);
        for (auto& x : v) x = static_cast<float>(rng.normal(0.0, scale));
        return v;
    };
    s.mound = vec(1.0);
    s.ground = vec(1.0);
    s.mean.resize(cfg.n_classes);
    for (std::size_t k = 2; k < cfg.n_classes; ++k) s.mean[k] = vec(1.0);
    return s;
}

} // namespace detail

/// All channels of one pixel of class k at raster (row, col). The class-0
/// block lattice is shifted by (phase_r, phase_c); class-1 mounds are drawn
/// independently per pixel.
inline void render_pixel(const detail::Spectra& s, std::size_t k, std::size_t row, std::size_t col,
                         std::size_t phase_r, std::size_t phase_c, double noise, Rng& rng, std::span<float> out) {
    const std::vector<float>* base = &s.ground;
    if (k == 0) {
        if (((row + phase_r) % 4) < 2 && ((col + phase_c) % 4) < 2) base = &s.mound;
    } else if (k == 1) {
        if (rng.coin(0.25)) base = &s.mound;
    } else {
        base = &s.mean[k];
    }
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = (*base)[c] + static_cast<float>(rng.normal(0.0, noise));
}

/// Channel `channel` of n pixels from each context class, each pixel at a
/// random position in a tile with a random lattice phase, drawn through the
/// same renderer the benchmark uses.
inline std::pair<std::vector<double>, std::vector<double>> context_pair_samples(const BenchmarkConfig& cfg,
                                                                                std::size_t n, std::size_t channel,
                                                                                std::uint64_t seed) {
    cfg.validate();
    Rng spectra_rng(cfg.seed);
    const auto spectra = detail::draw_spectra(cfg, spectra_rng);
    Rng rng(seed);
    std::vector<float> px(cfg.channels);
    std::pair<std::vector<double>, std::vector<double>> out;
    for (std::size_t k = 0; k < 2; ++k) {
        auto& dst = k == 0 ? out.first : out.second;
        dst.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = static_cast<std::size_t>(rng.below(1 << 16));
            const auto col = static_cast<std::size_t>(rng.below(1 << 16));
            const auto pr = static_cast<std::size_t>(rng.below(4));
            const auto pc = static_cast<std::size_t>(rng.below(4));
            render_pixel(spectra, k, row, col, pr, pc, cfg.noise, rng, px);
            dst.push_back(px[channel]);
        }
    }
    return out;
}

inline Benchmark make_benchmark(const BenchmarkConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const auto spectra = detail::draw_spectra(cfg, rng);
    Benchmark bm;
    bm.class_counts = long_tail_counts(cfg);
    std::vector<std::string> codes;
    for (std::size_t k = 0; k < cfg.n_classes; ++k) codes.push_back(fine_code(k));
    bm.taxonomy = Taxonomy("synthetic", codes);
    bm.coarse_of = coarse_mapping(cfg.n_classes);
    const auto n_coarse = static_cast<std::size_t>(*std::max_element(bm.coarse_of.begin(), bm.coarse_of.end())) + 1;
    std::vector<std::string> coarse_codes;
    for (std::size_t g = 0; g < n_coarse; ++g) coarse_codes.push_back("G" + std::to_string(g));
    bm.coarse_taxonomy = Taxonomy("synthetic_coarse", coarse_codes);

    // Tile classes: fine points first, then balanced coarse-corpus points.
    std::vector<int> tile_class;
    for (std::size_t k = 0; k < cfg.n_classes; ++k) tile_class.insert(tile_class.end(), bm.class_counts[k], static_cast<int>(k));
    const auto n_fine = tile_class.size();
    for (std::size_t i = 0; i < cfg.coarse_points; ++i) tile_class.push_back(static_cast<int>(i % cfg.n_classes));
    std::vector<bool> is_fine(tile_class.size(), false);
    std::fill(is_fine.begin(), is_fine.begin() + static_cast<std::ptrdiff_t>(n_fine), true);
    auto order = iota_indices(tile_class.size());
    rng.shuffle(order);

    const std::size_t tile = cfg.patch_size + 1;
    const auto grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(tile_class.size()))));
    // One ring of filler tiles so every patch lies inside the raster.
    const auto side = (grid + 2) * tile;
    const GeoTransform gt{0.0, static_cast<double>(side) * cfg.pixel_size, cfg.pixel_size, cfg.pixel_size};
    std::vector<std::string> names;
    for (std::size_t c = 0; c < cfg.channels; ++c) names.push_back("band" + std::to_string(c + 1));
    bm.raster = RasterStack(cfg.channels, side, side, gt, -9999.0f, names, std::vector<float>(cfg.channels * side * side));

    const auto half = cfg.patch_size / 2;
    std::vector<float> px(cfg.channels);
    for (std::size_t tr = 0; tr < grid + 2; ++tr) {
        for (std::size_t tc = 0; tc < grid + 2; ++tc) {
            const bool inner = tr >= 1 && tc >= 1 && tr <= grid && tc <= grid;
            const auto slot = inner ? (tr - 1) * grid + (tc - 1) : std::size_t(-1);
            const bool has_point = inner && slot < order.size();
            const auto surround = 2 + static_cast<std::size_t>(rng.below(cfg.n_classes - 2));
            const auto sr = static_cast<std::size_t>(rng.below(4));
            const auto sc = static_cast<std::size_t>(rng.below(4));
            // Core placement.
            std::size_t k = surround;
            std::size_t core_lo_r = 0, core_hi_r = 0, core_lo_c = 0, core_hi_c = 0;
            std::size_t prow = 0, pcol = 0;
            if (has_point) {
                k = static_cast<std::size_t>(tile_class[order[slot]]);
                const auto j = static_cast<std::int64_t>(cfg.jitter);
                const auto jr = static_cast<std::int64_t>(rng.below(2 * cfg.jitter + 1)) - j;
                const auto jc = static_cast<std::int64_t>(rng.below(2 * cfg.jitter + 1)) - j;
                prow = static_cast<std::size_t>(static_cast<std::int64_t>(tile / 2) + jr);
                pcol = static_cast<std::size_t>(static_cast<std::int64_t>(tile / 2) + jc);
                // Context classes need room to show their arrangement; the
                // other classes occupy small patches around the point.
                const std::size_t lo = k < 2 ? std::min<std::size_t>(4, half) : 0;
                const std::size_t hi = k < 2 ? half : std::min(cfg.spectral_core_radius, half);
                const auto radius = lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
                core_lo_r = prow >= radius ? prow - radius : 0;
                core_lo_c = pcol >= radius ? pcol - radius : 0;
                core_hi_r = std::min(tile - 1, prow + radius);
                core_hi_c = std::min(tile - 1, pcol + radius);
            }
            for (std::size_t r = 0; r < tile; ++r) {
                for (std::size_t c2 = 0; c2 < tile; ++c2) {
                    const bool in_core =
                        has_point && r >= core_lo_r && r <= core_hi_r && c2 >= core_lo_c && c2 <= core_hi_c;
                    const auto cls = in_core ? k : surround;
                    const auto grow = tr * tile + r;
                    const auto gcol = tc * tile + c2;
                    render_pixel(spectra, cls, grow, gcol, sr, sc, cfg.noise, rng, px);
                    for (std::size_t ch = 0; ch < cfg.channels; ++ch) bm.raster.at(ch, grow, gcol) = px[ch];
                }
            }
            if (has_point) {
                const auto [x, y] = pixel_center_to_world(gt, static_cast<std::int64_t>(tr * tile + prow),
                                                          static_cast<std::int64_t>(tc * tile + pcol));
                const auto idx = order[slot];
                if (is_fine[idx]) {
                    bm.points.push_back({"p" + std::to_string(idx), x, y, fine_code(k)});
                } else {
                    bm.coarse_points.push_back({"c" + std::to_string(idx), x, y, coarse_codes[static_cast<std::size_t>(bm.coarse_of[k])]});
                }
            }
        }
    }
    auto by_id = [](const AnnotationPoint& a, const AnnotationPoint& b) { return a.id.size() != b.id.size() ? a.id.size() < b.id.size() : a.id < b.id; };
    std::sort(bm.points.begin(), bm.points.end(), by_id);
    std::sort(bm.coarse_points.begin(), bm.coarse_points.end(), by_id);
    return bm;
}

} // namespace habmap::synth
