#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include "habmap/inference.hpp"
#include "habmap/nnet/train.hpp"
#include "habmap/synth.hpp"

using namespace habmap;
using namespace habmap::inference;

namespace {

nnet::NetworkConfig small_config(std::size_t channels, std::size_t classes) {
    nnet::NetworkConfig c;
    c.in_channels = channels;
    c.stage_widths = {8};
    c.n_classes = classes;
    return c;
}

std::vector<double> random_simplex(Rng& rng, std::size_t k) {
    std::vector<double> p(k);
    double s = 0;
    for (auto& v : p) s += v = std::exp(2.0 * rng.normal());
    for (auto& v : p) v /= s;
    return p;
}

Patch random_patch(Rng& rng, std::size_t channels, std::size_t side) {
    Patch p;
    p.channels = channels;
    p.size = side;
    p.values.resize(channels * side * side);
    for (auto& v : p.values) v = static_cast<float>(rng.normal());
    return p;
}

forest::RandomForestModel small_forest(std::size_t channels, std::size_t classes, std::uint64_t seed) {
    Rng rng(seed);
    forest::TrainingSet t;
    t.n_features = channels;
    t.n_classes = classes;
    for (std::size_t i = 0; i < 60; ++i) {
        std::vector<float> x(channels);
        const int y = static_cast<int>(i % classes);
        for (std::size_t c = 0; c < channels; ++c) x[c] = static_cast<float>(rng.normal(c == y % channels ? 2.0 : 0.0, 1.0));
        t.add(x, y);
    }
    forest::ForestParams p;
    p.n_trees = 10;
    p.seed = seed;
    return forest::fit_forest(t, p);
}

RasterStack random_raster(std::size_t channels, std::size_t h, std::size_t w, std::uint64_t seed) {
    Rng rng(seed);
    auto r = RasterStack::zeros(channels, h, w);
    for (auto& v : r.mutable_data()) v = static_cast<float>(rng.normal());
    r.mark_standardized();
    return r;
}

void expect_map_invariants(const ClassificationMaps& m) {
    const auto k = m.n_classes();
    for (std::size_t r = 0; r < m.class_map.height(); ++r) {
        for (std::size_t c = 0; c < m.class_map.width(); ++c) {
            const float cls = m.class_map.at(0, r, c);
            if (cls == kUnclassified) continue;
            std::vector<double> row(k);
            for (std::size_t j = 0; j < k; ++j) row[j] = m.probabilities.at(j, r, c);
            ASSERT_EQ(static_cast<float>(metrics::argmax(row)), cls);
            ASSERT_EQ(m.confidence.at(0, r, c), m.probabilities.at(static_cast<std::size_t>(cls), r, c));
            ASSERT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-6);
        }
    }
}

} // namespace

TEST(Combine, Examples) {
    EXPECT_EQ(combine(std::vector<double>{1, 0}, std::vector<double>{0, 1}, 0.5), (std::vector<double>{0.5, 0.5}));
    const std::vector<double> y{0.2, 0.3, 0.5};
    for (double a : {0.0, 0.3, 0.5, 1.0}) {
        const auto out = combine(y, y, a);
        for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(out[i], y[i], 1e-15);
    }
    EXPECT_THROW(combine(std::vector<double>{1, 0}, std::vector<double>{1, 0, 0}, 0.5), DataError);
    EXPECT_THROW(combine(y, y, 1.5), UsageError);
}

TEST(Combine, SimplexAndArgmaxAgreement) {
    Rng rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto k = 2 + rng.below(10);
        const auto rf = random_simplex(rng, k);
        const auto cnn = random_simplex(rng, k);
        const double a = rng.uniform();
        const auto y = combine(rf, cnn, a);
        EXPECT_NEAR(std::accumulate(y.begin(), y.end(), 0.0), 1.0, 1e-6);
        for (double v : y) EXPECT_GE(v, 0.0);
        if (metrics::argmax(rf) == metrics::argmax(cnn)) {
            EXPECT_EQ(metrics::argmax(y), metrics::argmax(rf));
        }
    }
}

TEST(Combine, MonotoneInForestScores) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const auto rf = random_simplex(rng, 4);
        const auto cnn = random_simplex(rng, 4);
        auto bigger = rf;
        for (auto& v : bigger) v += rng.uniform(0.0, 0.2);
        const auto lo = combine(rf, cnn, 0.5);
        const auto hi = combine(bigger, cnn, 0.5);
        for (std::size_t i = 0; i < 4; ++i) EXPECT_GE(hi[i], lo[i]);
    }
}

TEST(TtaPredict, IdentityOpsEqualPlainSoftmax) {
    Rng rng(3);
    nnet::Network<float> net(small_config(3, 4), 1);
    const auto p = random_patch(rng, 3, 7);
    const auto plain = nnet::softmax_rows(net.predict(nnet::make_batch<float>(std::vector<Patch>{p}, 7)));
    const auto y = tta_predict(net, p, 7, 1, nnet::AugmentOps{}, 9);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(y[k], static_cast<double>(plain[k]));
}

TEST(TtaPredict, SymmetricPatchUnderFlipsIsExact) {
    // Double precision: batch size changes float GEMM rounding.
    Rng rng(4);
    nnet::Network<double> net(small_config(2, 3), 2);
    auto p = random_patch(rng, 2, 7);
    for (std::size_t c = 0; c < 2; ++c) {
        for (std::size_t r = 0; r < 7; ++r) {
            for (std::size_t k = 0; k < 7; ++k) {
                p.at(c, r, k) = p.at(c, std::min(r, 6 - r), std::min(k, 6 - k));
            }
        }
    }
    nnet::AugmentOps flips;
    flips.hflip = flips.vflip = true;
    const auto plain = tta_predict(net, p, 7, 1, nnet::AugmentOps{}, 0);
    const auto y = tta_predict(net, p, 7, 5, flips, 17);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(y[k], plain[k], 1e-12);
}

TEST(TtaPredict, AveragesStayOnSimplexAndBatchEqualsSingle) {
    Rng rng(5);
    nnet::Network<float> net(small_config(2, 5), 3);
    std::vector<Patch> ps;
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < 12; ++i) {
        ps.push_back(random_patch(rng, 2, 9));
        seeds.push_back(100 + static_cast<std::uint64_t>(i));
    }
    const auto ops = nnet::AugmentOps::flips_and_blur();
    const auto batch = tta_predict_batch(net, std::span<const Patch>(ps), 9, 5, ops, seeds);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto row = batch.row(i);
        EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-6);
        const auto single = tta_predict(net, ps[i], 9, 5, ops, seeds[i]);
        for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(single[k], row[k], 1e-6);
    }
    EXPECT_THROW(tta_predict(net, ps[0], 9, 0, ops, 0), UsageError);
}

TEST(EnsemblePredict, AlphaOneIsForestAndMismatchThrows) {
    Rng rng(6);
    const auto rf = small_forest(2, 3, 1);
    nnet::Network<float> net(small_config(2, 3), 1);
    const auto p = random_patch(rng, 2, 7);
    const auto pixel = pixel_features(p);
    EnsembleConfig cfg;
    cfg.alpha = 1.0;
    EXPECT_EQ(ensemble_predict(rf, net, pixel, p, 7, cfg, 3), forest::predict_proba(rf, pixel));

    cfg.alpha = 0.5;
    const auto y = ensemble_predict(rf, net, pixel, p, 7, cfg, 3);
    const auto expected = combine(forest::predict_proba(rf, pixel), tta_predict(net, p, 7, 5, cfg.tta_ops, 3), 0.5);
    EXPECT_EQ(y, expected);

    nnet::Network<float> four(small_config(2, 4), 1);
    EXPECT_THROW(ensemble_predict(rf, four, pixel, p, 7, cfg, 3), DataError);
}

TEST(ClassifyMap, Errors) {
    const auto raster = random_raster(2, 5, 5, 1);
    const auto rf = small_forest(2, 3, 1);
    nnet::Network<float> net(small_config(2, 3), 1);
    EXPECT_THROW(classify_map(MapModels{}, raster, {}), UsageError);

    auto raw = raster;
    raw.mark_standardized(false);
    EXPECT_THROW(classify_map(MapModels{&rf, nullptr, {}, 3}, raw, {}), DataError);
    EXPECT_THROW(classify_map(MapModels{nullptr, &net, {}, 4}, raster, {}), UsageError);

    const auto other = small_forest(3, 3, 1);
    EXPECT_THROW(classify_map(MapModels{&other, nullptr, {}, 3}, raster, {}), DataError);
    nnet::Network<float> four(small_config(2, 4), 1);
    EXPECT_THROW(classify_map(MapModels{&rf, &four, {}, 3}, raster, {}), DataError);
}

TEST(ClassifyMap, SinglePixelForestOnly) {
    auto raster = RasterStack::zeros(2, 1, 1);
    raster.at(0, 0, 0) = 1.5f;
    raster.at(1, 0, 0) = -0.5f;
    raster.mark_standardized();
    const auto rf = small_forest(2, 3, 2);
    const auto maps = classify_map(MapModels{&rf, nullptr, {}, 3}, raster, {});
    ASSERT_EQ(maps.class_map.height(), 1u);
    ASSERT_EQ(maps.class_map.width(), 1u);
    const auto y = forest::predict_proba(rf, std::vector<float>{1.5f, -0.5f});
    EXPECT_EQ(maps.class_map.at(0, 0, 0), static_cast<float>(metrics::argmax(y)));
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(maps.probabilities.at(k, 0, 0), static_cast<float>(y[k]));
}

TEST(ClassifyMap, ConstantRasterGivesConstantMaps) {
    auto raster = RasterStack::zeros(2, 9, 11);
    for (std::size_t r = 0; r < 9; ++r) {
        for (std::size_t c = 0; c < 11; ++c) {
            raster.at(0, r, c) = 0.7f;
            raster.at(1, r, c) = -1.2f;
        }
    }
    raster.mark_standardized();
    const auto rf = small_forest(2, 3, 3);
    nnet::Network<float> net(small_config(2, 3), 3);
    MapModels models{&rf, &net, {}, 5};
    models.ensemble.tta_ops = nnet::AugmentOps{};
    models.ensemble.tta_ops.hflip = models.ensemble.tta_ops.vflip = true;
    const auto maps = classify_map(models, raster, {});
    for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t r = 0; r < 9; ++r) {
            for (std::size_t c = 0; c < 11; ++c) {
                EXPECT_EQ(maps.probabilities.at(ch, r, c), maps.probabilities.at(ch, 0, 0));
            }
        }
    }
    expect_map_invariants(maps);
}

TEST(ClassifyMap, TwoTextureBoundaryWithinHalfPatch) {
    constexpr std::size_t side = 7, half = side / 2, boundary = 24;
    const auto train_set = synth::two_texture_patches(512, side, 2, 0.5, 1);
    nnet::Network<float> net(small_config(2, 2), 1);
    nnet::TrainConfig tc;
    tc.epochs = 10;
    tc.batch_size = 32;
    tc.lr = 3e-3;
    tc.input_size = side;
    tc.augment = nnet::AugmentOps::flips_and_blur();
    tc.seed = 1;
    nnet::train(net, std::span<const Patch>(train_set), {}, tc);

    const auto raster = synth::two_texture_raster(24, 48, boundary, 2, 0.3, 7);
    const auto maps = classify_map(MapModels{nullptr, &net, {}, side}, raster, {});
    expect_map_invariants(maps);
    // Reflection at the raster edge breaks the stripe period, so only windows
    // lying fully inside the raster are used. Per row, the boundary estimate
    // is the step position that disagrees with the fewest predictions.
    std::size_t correct = 0, counted = 0;
    for (std::size_t r = half; r + half < raster.height(); ++r) {
        std::size_t best_step = 0, best_errors = raster.width() + 1;
        for (std::size_t step = half; step <= raster.width() - half; ++step) {
            std::size_t errors = 0;
            for (std::size_t c = half; c + half < raster.width(); ++c) {
                errors += maps.class_map.at(0, r, c) != (c < step ? 0.0f : 1.0f);
            }
            if (errors < best_errors) {
                best_errors = errors;
                best_step = step;
            }
        }
        EXPECT_LE(best_step, boundary + half) << "row " << r;
        EXPECT_GE(best_step, boundary - half) << "row " << r;
        for (std::size_t c = half; c + half < raster.width(); ++c) {
            if (c + half < boundary || c >= boundary + half) {
                correct += maps.class_map.at(0, r, c) == (c < boundary ? 0.0f : 1.0f);
                ++counted;
            }
        }
    }
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(counted), 0.95);
}

TEST(ClassifyMap, NodataCentresAreUnclassified) {
    auto raster = random_raster(2, 6, 6, 4);
    raster.at(1, 2, 3) = raster.nodata();
    const auto rf = small_forest(2, 3, 4);
    nnet::Network<float> net(small_config(2, 3), 4);
    const auto maps = classify_map(MapModels{&rf, &net, {}, 3}, raster, {});
    EXPECT_EQ(maps.class_map.at(0, 2, 3), kUnclassified);
    EXPECT_EQ(maps.confidence.at(0, 2, 3), raster.nodata());
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(class_heatmap(maps, k).at(0, 2, 3), raster.nodata());
    EXPECT_NE(maps.class_map.at(0, 2, 2), kUnclassified);
}

TEST(ClassifyMap, HeatmapsSumToOneAndMatchConfidence) {
    const auto raster = random_raster(2, 10, 12, 5);
    const auto rf = small_forest(2, 4, 5);
    nnet::Network<float> net(small_config(2, 4), 5);
    const auto maps = classify_map(MapModels{&rf, &net, {}, 5}, raster, {});
    std::vector<RasterStack> heat;
    for (std::size_t k = 0; k < 4; ++k) heat.push_back(class_heatmap(maps, k));
    for (std::size_t r = 0; r < 10; ++r) {
        for (std::size_t c = 0; c < 12; ++c) {
            double s = 0;
            for (const auto& h : heat) s += h.at(0, r, c);
            EXPECT_NEAR(s, 1.0, 1e-6);
            const auto cls = static_cast<std::size_t>(maps.class_map.at(0, r, c));
            EXPECT_EQ(heat[cls].at(0, r, c), maps.confidence.at(0, r, c));
        }
    }
    EXPECT_THROW(class_heatmap(maps, 4), UsageError);
}

TEST(ClassifyMap, TilingAndWorkersDoNotChangeOutput) {
    const auto raster = random_raster(2, 40, 70, 6);
    const auto rf = small_forest(2, 3, 6);
    nnet::Network<float> net(small_config(2, 3), 6);
    const MapModels models{&rf, &net, {}, 5};
    MapOptions single;
    single.tile_size = 0;
    single.workers = 1;
    single.seed = 8;
    MapOptions tiled = single;
    tiled.tile_size = 16;
    tiled.workers = 4;
    const auto a = classify_map(models, raster, single);
    const auto b = classify_map(models, raster, tiled);
    EXPECT_TRUE(std::ranges::equal(a.class_map.data(), b.class_map.data()));
    EXPECT_TRUE(std::ranges::equal(a.probabilities.data(), b.probabilities.data()));
    EXPECT_TRUE(std::ranges::equal(a.confidence.data(), b.confidence.data()));
    expect_map_invariants(a);
}

TEST(ClassifyMap, StrideShrinksGrid) {
    const auto raster = random_raster(2, 10, 11, 7);
    const auto rf = small_forest(2, 3, 7);
    MapOptions o;
    o.stride = 3;
    const auto maps = classify_map(MapModels{&rf, nullptr, {}, 3}, raster, o);
    EXPECT_EQ(maps.class_map.height(), 4u);
    EXPECT_EQ(maps.class_map.width(), 4u);
    EXPECT_EQ(maps.class_map.geotransform().pixel_size_x, 3.0);
    const auto y = forest::predict_proba(rf, std::vector<float>{raster.at(0, 3, 6), raster.at(1, 3, 6)});
    EXPECT_EQ(maps.probabilities.at(0, 1, 2), static_cast<float>(y[0]));
    o.stride = 0;
    EXPECT_THROW(classify_map(MapModels{&rf, nullptr, {}, 3}, raster, o), UsageError);
}

TEST(WriteMaps, FilesAndSidecar) {
    const auto raster = random_raster(2, 4, 5, 8);
    const auto rf = small_forest(2, 3, 8);
    const auto maps = classify_map(MapModels{&rf, nullptr, {}, 1}, raster, {});
    const auto dir = std::filesystem::temp_directory_path() / "habmap_write_maps_test";
    std::filesystem::remove_all(dir);
    const auto files = write_maps(dir, maps, {"4060", "6170", "8110"});
    ASSERT_EQ(files.size(), 4u);
    for (const auto& f : files) EXPECT_TRUE(std::filesystem::exists(f));
    const auto back = read_raster(dir / "class_map.msrs");
    EXPECT_TRUE(std::ranges::equal(back.data(), maps.class_map.data()));
    EXPECT_EQ(read_raster(dir / "probabilities.msrs").channels(), 3u);
    std::ifstream side(dir / "classes.txt");
    std::string all((std::istreambuf_iterator<char>(side)), {});
    EXPECT_EQ(all, "0,4060\n1,6170\n2,8110\n");
    EXPECT_THROW(write_maps(dir, maps, {"a"}), DataError);
    std::filesystem::remove_all(dir);
}
