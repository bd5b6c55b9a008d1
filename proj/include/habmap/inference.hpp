#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "habmap/error.hpp"
#include "habmap/forest.hpp"
#include "habmap/metrics.hpp"
#include "habmap/nnet/augment.hpp"
#include "habmap/nnet/loss.hpp"
#include "habmap/nnet/network.hpp"
#include "habmap/parallel.hpp"
#include "habmap/random.hpp"
#include "habmap/raster.hpp"

namespace habmap::inference {

struct EnsembleConfig {
    /// Weight of the forest; the CNN gets 1 - alpha.
    double alpha = 0.5;
    std::size_t tta_rounds = 5;
    nnet::AugmentOps tta_ops = nnet::AugmentOps::flips_and_blur();

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw UsageError("ensemble alpha must lie in [0, 1]");
        if (tta_rounds < 1) throw UsageError("tta_rounds must be >= 1");
        if (tta_ops.center_crop) throw UsageError("center_crop is not a test-time augmentation");
        tta_ops.validate();
    }
};

/// Centre pixel's channel values, the forest's feature vector.
inline std::vector<float> pixel_features(const Patch& p) {
    std::vector<float> f(p.channels);
    for (std::size_t c = 0; c < p.channels; ++c) f[c] = p.at(c, p.center(), p.center());
    return f;
}

/// Mean softmax over `rounds` augmented copies of each patch. Patch i draws
/// its augmentations from its own seed, so results do not depend on how
/// patches are grouped into calls.
template <class T>
metrics::ScoreMatrix tta_predict_batch(const nnet::Network<T>& net, std::span<const Patch> patches, std::size_t side,
                                       std::size_t rounds, const nnet::AugmentOps& ops,
                                       std::span<const std::uint64_t> seeds) {
    if (rounds < 1) throw UsageError("tta rounds must be >= 1");
    if (seeds.size() != patches.size()) throw UsageError("one seed per patch required");
    metrics::ScoreMatrix out;
    out.k = net.config().n_classes;
    out.values.assign(patches.size() * out.k, 0.0);
    if (patches.empty()) return out;
    std::vector<Patch> views;
    views.reserve(patches.size() * rounds);
    for (std::size_t i = 0; i < patches.size(); ++i) {
        Rng rng(seeds[i]);
        const Patch base = patches[i].size == side ? patches[i] : nnet::center_crop(patches[i], side);
        for (std::size_t r = 0; r < rounds; ++r) views.push_back(nnet::augment_pixels(base, ops, rng));
    }
    const auto probs = nnet::softmax_rows(net.predict(nnet::make_batch<T>(views, side)));
    for (std::size_t i = 0; i < patches.size(); ++i) {
        for (std::size_t r = 0; r < rounds; ++r) {
            const auto row = probs.row(i * rounds + r);
            for (std::size_t k = 0; k < out.k; ++k) out.values[i * out.k + k] += static_cast<double>(row[k]);
        }
        for (std::size_t k = 0; k < out.k; ++k) out.values[i * out.k + k] /= static_cast<double>(rounds);
    }
    return out;
}

template <class T>
std::vector<double> tta_predict(const nnet::Network<T>& net, const Patch& patch, std::size_t side, std::size_t rounds,
                                const nnet::AugmentOps& ops, std::uint64_t seed) {
    const std::uint64_t seeds[] = {seed};
    const auto m = tta_predict_batch(net, std::span<const Patch>(&patch, 1), side, rounds, ops, seeds);
    return m.values;
}

/// alpha * rf + (1 - alpha) * cnn, elementwise.
inline std::vector<double> combine(std::span<const double> rf, std::span<const double> cnn, double alpha) {
    if (rf.size() != cnn.size()) {
        throw DataError("ensemble class count mismatch: forest " + std::to_string(rf.size()) + ", network " +
                        std::to_string(cnn.size()));
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw UsageError("ensemble alpha must lie in [0, 1]");
    std::vector<double> y(rf.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = alpha * rf[i] + (1.0 - alpha) * cnn[i];
    return y;
}

template <class T>
std::vector<double> ensemble_predict(const forest::RandomForestModel& rf, const nnet::Network<T>& net,
                                     std::span<const float> pixel, const Patch& patch, std::size_t side,
                                     const EnsembleConfig& config, std::uint64_t seed) {
    config.validate();
    if (rf.n_classes != net.config().n_classes) throw DataError("ensemble class count mismatch");
    const auto y_rf = forest::predict_proba(rf, pixel);
    const auto y_cnn = tta_predict(net, patch, side, config.tta_rounds, config.tta_ops, seed);
    return combine(y_rf, y_cnn, config.alpha);
}

/// Row-wise combination of two score matrices.
inline metrics::ScoreMatrix combine(const metrics::ScoreMatrix& rf, const metrics::ScoreMatrix& cnn, double alpha) {
    if (rf.k != cnn.k || rf.rows() != cnn.rows()) throw DataError("ensemble score matrices differ in shape");
    metrics::ScoreMatrix out;
    out.k = rf.k;
    out.values.resize(rf.values.size());
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = alpha * rf.values[i] + (1.0 - alpha) * cnn.values[i];
    return out;
}

inline metrics::ScoreMatrix forest_scores(const forest::RandomForestModel& rf, std::span<const Patch> patches,
                                          std::size_t workers = default_workers()) {
    metrics::ScoreMatrix out;
    out.k = rf.n_classes;
    out.values.assign(patches.size() * out.k, 0.0);
    parallel_for(patches.size(), [&](std::size_t i) {
        const auto y = forest::predict_proba(rf, pixel_features(patches[i]));
        std::copy(y.begin(), y.end(), out.values.begin() + static_cast<std::ptrdiff_t>(i * out.k));
    }, workers);
    return out;
}

// --- map production ------------------------------------------------------------

inline constexpr float kUnclassified = 255.0f;

struct ClassificationMaps {
    /// Class index per pixel as f32; kUnclassified where the centre is nodata.
    RasterStack class_map;
    /// One channel per class.
    RasterStack probabilities;
    RasterStack confidence;

    std::size_t n_classes() const { return probabilities.channels(); }
};

struct MapModels {
    const forest::RandomForestModel* rf = nullptr;
    const nnet::Network<float>* net = nullptr;
    EnsembleConfig ensemble;
    /// Side of the window fed to the network.
    std::size_t patch_size = 19;
};

struct MapOptions {
    std::size_t stride = 1;
    std::uint64_t seed = 0;
    /// Output tile side; 0 processes the whole raster as one tile.
    std::size_t tile_size = 64;
    std::size_t workers = default_workers();
};

/// Predictions are computed in runs of this many output columns aligned to
/// a global grid, so the batching is the same for every tiling.
inline constexpr std::size_t kMapRunWidth = 32;

namespace detail {

struct Tile {
    std::size_t row0, rows, col0, cols; // output coordinates
};

inline std::vector<Tile> make_tiles(std::size_t out_h, std::size_t out_w, std::size_t tile_size) {
    std::vector<Tile> tiles;
    if (tile_size == 0) {
        tiles.push_back({0, out_h, 0, out_w});
        return tiles;
    }
    const auto tw = ((tile_size + kMapRunWidth - 1) / kMapRunWidth) * kMapRunWidth;
    for (std::size_t r = 0; r < out_h; r += tile_size) {
        for (std::size_t c = 0; c < out_w; c += tw) {
            tiles.push_back({r, std::min(tile_size, out_h - r), c, std::min(tw, out_w - c)});
        }
    }
    return tiles;
}

} // namespace detail

/// Wall-to-wall classification of a standardized raster. Tiles carry a halo
/// of (patch_size - 1) / 2 pixels so each tile's windows match those of a
/// single full-raster pass, including reflected borders.
inline ClassificationMaps classify_map(const MapModels& models, const RasterStack& raster, const MapOptions& options) {
    if (!models.rf && !models.net) throw UsageError("classify_map: no model configured");
    if (!raster.standardized()) throw DataError("classify_map: raster must be standardized");
    if (options.stride < 1) throw UsageError("stride must be >= 1");
    if (models.patch_size < 1 || models.patch_size % 2 == 0) throw UsageError("patch_size must be odd");
    // The forest alone only reads the centre pixel.
    const auto patch = models.net ? models.patch_size : std::size_t{1};
    std::size_t k = 0;
    if (models.rf) {
        if (models.rf->n_features != raster.channels()) throw DataError("forest feature count != raster channels");
        k = models.rf->n_classes;
    }
    if (models.net) {
        if (models.net->config().in_channels != raster.channels()) throw DataError("network channels != raster channels");
        if (k && models.net->config().n_classes != k) throw DataError("ensemble class count mismatch");
        k = models.net->config().n_classes;
        models.ensemble.validate();
    }
    const auto s = options.stride;
    const auto out_h = (raster.height() + s - 1) / s;
    const auto out_w = (raster.width() + s - 1) / s;
    const auto& gt = raster.geotransform();
    const GeoTransform out_gt{gt.origin_x, gt.origin_y, gt.pixel_size_x * static_cast<double>(s),
                              gt.pixel_size_y * static_cast<double>(s)};
    const float nodata = raster.nodata();
    const auto plane = out_h * out_w;

    std::vector<float> cls(plane, kUnclassified);
    std::vector<float> prob(k * plane, nodata);
    std::vector<float> conf(plane, nodata);
    const auto half = patch / 2;

    const auto tiles = detail::make_tiles(out_h, out_w, options.tile_size);
    parallel_for(
        tiles.size(),
        [&](std::size_t ti) {
            const auto& t = tiles[ti];
            // Raster window covering the tile's centres plus the halo.
            const auto r_first = t.row0 * s;
            const auto r_last = (t.row0 + t.rows - 1) * s;
            const auto c_first = t.col0 * s;
            const auto c_last = (t.col0 + t.cols - 1) * s;
            const auto wr0 = r_first > half ? r_first - half : 0;
            const auto wc0 = c_first > half ? c_first - half : 0;
            const auto wr1 = std::min(raster.height(), r_last + half + 1);
            const auto wc1 = std::min(raster.width(), c_last + half + 1);
            const auto window = crop_raster(raster, wr0, wc0, wr1 - wr0, wc1 - wc0);

            for (std::size_t orow = t.row0; orow < t.row0 + t.rows; ++orow) {
                for (std::size_t run = t.col0; run < t.col0 + t.cols; run += kMapRunWidth) {
                    const auto run_end = std::min(run + kMapRunWidth, t.col0 + t.cols);
                    std::vector<Patch> patches;
                    std::vector<std::size_t> outputs;
                    std::vector<std::uint64_t> seeds;
                    for (std::size_t ocol = run; ocol < run_end; ++ocol) {
                        const auto rr = orow * s;
                        const auto cc = ocol * s;
                        if (!raster.pixel_valid(rr, cc)) continue;
                        patches.push_back(extract_patch_reflect(window, static_cast<std::int64_t>(rr - wr0),
                                                                static_cast<std::int64_t>(cc - wc0), patch));
                        outputs.push_back(orow * out_w + ocol);
                        seeds.push_back(derive_seed(options.seed, rr * raster.width() + cc));
                    }
                    if (patches.empty()) continue;
                    metrics::ScoreMatrix y;
                    if (models.net) {
                        const auto rounds = models.ensemble.tta_rounds;
                        y = tta_predict_batch(*models.net, patches, patch, rounds, models.ensemble.tta_ops, seeds);
                        if (models.rf) y = combine(forest_scores(*models.rf, patches, 1), y, models.ensemble.alpha);
                    } else {
                        y = forest_scores(*models.rf, patches, 1);
                    }
                    for (std::size_t i = 0; i < outputs.size(); ++i) {
                        const auto row = y.row(i);
                        const auto best = metrics::argmax(row);
                        const auto o = outputs[i];
                        cls[o] = static_cast<float>(best);
                        conf[o] = static_cast<float>(row[static_cast<std::size_t>(best)]);
                        for (std::size_t c = 0; c < k; ++c) prob[c * plane + o] = static_cast<float>(row[c]);
                    }
                }
            }
        },
        options.workers);

    std::vector<std::string> names;
    for (std::size_t c = 0; c < k; ++c) names.push_back("class" + std::to_string(c));
    ClassificationMaps maps{RasterStack(1, out_h, out_w, out_gt, kUnclassified, {"class"}, std::move(cls)),
                            RasterStack(k, out_h, out_w, out_gt, nodata, std::move(names), std::move(prob)),
                            RasterStack(1, out_h, out_w, out_gt, nodata, {"confidence"}, std::move(conf))};
    return maps;
}

/// Probability raster of one class.
inline RasterStack class_heatmap(const ClassificationMaps& maps, std::size_t class_index) {
    const auto& p = maps.probabilities;
    if (class_index >= p.channels()) {
        throw UsageError("class index " + std::to_string(class_index) + " out of range (" +
                         std::to_string(p.channels()) + " classes)");
    }
    const auto n = p.plane_size();
    std::vector<float> data(p.data().begin() + static_cast<std::ptrdiff_t>(class_index * n),
                            p.data().begin() + static_cast<std::ptrdiff_t>((class_index + 1) * n));
    return RasterStack(1, p.height(), p.width(), p.geotransform(), p.nodata(), {p.channel_names()[class_index]},
                       std::move(data));
}

/// class_map.msrs, probabilities.msrs, confidence.msrs and classes.txt
/// (one "index,code" line per class).
inline std::vector<std::filesystem::path> write_maps(const std::filesystem::path& dir, const ClassificationMaps& maps,
                                                     const std::vector<std::string>& class_codes) {
    if (!class_codes.empty() && class_codes.size() != maps.n_classes()) {
        throw DataError("class code list does not match map class count");
    }
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> written{dir / "class_map.msrs", dir / "probabilities.msrs",
                                               dir / "confidence.msrs", dir / "classes.txt"};
    write_raster(written[0], maps.class_map);
    write_raster(written[1], maps.probabilities);
    write_raster(written[2], maps.confidence);
    std::ofstream out(written[3]);
    if (!out) throw DataError("cannot write " + written[3].string());
    for (std::size_t c = 0; c < maps.n_classes(); ++c) {
        out << c << ',' << (class_codes.empty() ? std::to_string(c) : class_codes[c]) << '\n';
    }
    return written;
}

} // namespace habmap::inference
