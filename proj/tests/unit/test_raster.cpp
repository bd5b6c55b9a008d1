#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "habmap/random.hpp"
#include "habmap/raster.hpp"

using namespace habmap;

namespace {

RasterStack one_channel(std::size_t h, std::size_t w, std::vector<float> values, float nodata = -9999.0f) {
    return RasterStack(1, h, w, GeoTransform{}, nodata, {"b"}, std::move(values));
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("habmap_raster_" + name);
}

} // namespace

TEST(RasterStack, RejectsInconsistentShapes) {
    EXPECT_THROW(RasterStack(1, 2, 2, {}, 0.0f, {"a"}, std::vector<float>(3)), DataError);
    EXPECT_THROW(RasterStack(2, 1, 1, {}, 0.0f, {"a"}, std::vector<float>(2)), DataError);
    EXPECT_THROW(RasterStack(0, 1, 1, {}, 0.0f, {}, {}), DataError);
    EXPECT_THROW(RasterStack(1, 1, 1, GeoTransform{0, 0, 0, 1}, 0.0f, {"a"}, {1.0f}), DataError);
}

TEST(ChannelStats, ConstantChannelClampsStd) {
    const auto s = compute_channel_stats(one_channel(1, 3, {2, 2, 2}));
    EXPECT_DOUBLE_EQ(s.mean[0], 2.0);
    EXPECT_DOUBLE_EQ(s.stddev[0], 1e-6);
}

TEST(ChannelStats, PopulationStd) {
    auto s = compute_channel_stats(one_channel(1, 2, {-1, 1}));
    EXPECT_DOUBLE_EQ(s.mean[0], 0.0);
    EXPECT_DOUBLE_EQ(s.stddev[0], 1.0);
    s = compute_channel_stats(one_channel(2, 2, {1, 2, 3, 4}));
    EXPECT_DOUBLE_EQ(s.mean[0], 2.5);
    EXPECT_NEAR(s.stddev[0], std::sqrt(1.25), 1e-12);
}

TEST(ChannelStats, SkipsNodataAndRejectsEmptyChannel) {
    const auto s = compute_channel_stats(one_channel(1, 3, {1, -9999, 3}));
    EXPECT_DOUBLE_EQ(s.mean[0], 2.0);
    auto r = RasterStack(2, 1, 2, {}, -9999.0f, {"ok", "gone"}, {1, 2, -9999, -9999});
    try {
        compute_channel_stats(r);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("gone"), std::string::npos);
    }
}

TEST(Standardize, Examples) {
    auto z = standardize(one_channel(1, 3, {4, 4, 4}), compute_channel_stats(one_channel(1, 3, {4, 4, 4})));
    for (float v : z.data()) EXPECT_EQ(v, 0.0f);
    EXPECT_TRUE(z.standardized());

    const ChannelStats identity{{0.0}, {1.0}};
    auto same = standardize(one_channel(1, 2, {-1, 1}), identity);
    EXPECT_EQ(same.at(0, 0, 0), -1.0f);
    EXPECT_EQ(same.at(0, 0, 1), 1.0f);

    auto five = standardize(one_channel(1, 1, {5}), ChannelStats{{3.0}, {2.0}});
    EXPECT_FLOAT_EQ(five.at(0, 0, 0), 1.0f);

    EXPECT_THROW(standardize(one_channel(1, 1, {5}), ChannelStats{{0, 0}, {1, 1}}), DataError);
}

TEST(Standardize, NodataBecomesMaskedZero) {
    auto r = one_channel(1, 3, {1, -9999, 3});
    auto z = standardize(r, compute_channel_stats(r));
    EXPECT_EQ(z.at(0, 0, 1), 0.0f);
    EXPECT_TRUE(z.is_nodata(0, 0, 1));
    EXPECT_FALSE(z.is_nodata(0, 0, 0));
}

TEST(Standardize, MeanZeroStdOneProperty) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t c = 1 + rng.below(3), h = 2 + rng.below(6), w = 2 + rng.below(6);
        auto r = RasterStack::zeros(c, h, w);
        for (auto& v : r.mutable_data()) v = static_cast<float>(rng.normal(rng.uniform(-50, 50), rng.uniform(0.1, 20)));
        for (std::size_t i = 0; i < r.data().size(); i += 7) r.mutable_data()[i] = r.nodata();
        const auto z = standardize(r, compute_channel_stats(r));
        for (std::size_t ch = 0; ch < c; ++ch) {
            double sum = 0, ss = 0;
            std::size_t n = 0;
            for (std::size_t i = ch * h * w; i < (ch + 1) * h * w; ++i) {
                if (z.is_nodata_at(i)) continue;
                sum += z.data()[i];
                ++n;
            }
            const double mean = sum / static_cast<double>(n);
            for (std::size_t i = ch * h * w; i < (ch + 1) * h * w; ++i) {
                if (!z.is_nodata_at(i)) ss += (z.data()[i] - mean) * (z.data()[i] - mean);
            }
            EXPECT_NEAR(mean, 0.0, 1e-6);
            EXPECT_NEAR(std::sqrt(ss / static_cast<double>(n)), 1.0, 1e-3);
        }
    }
}

TEST(Ndvi, Examples) {
    EXPECT_EQ(ndvi(0.5f, 0.5f), 0.0f);
    EXPECT_EQ(ndvi(1.0f, 0.0f), 1.0f);
    EXPECT_FLOAT_EQ(ndvi(0.6f, 0.2f), 0.5f);
    EXPECT_EQ(ndvi(0.0f, 0.0f), 0.0f);
    EXPECT_EQ(ndvi(1e-10f, -1e-10f), 0.0f);
}

TEST(Ndvi, BoundedForNonNegativeInputs) {
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        const auto nir = static_cast<float>(rng.uniform(0, 10));
        const auto red = static_cast<float>(rng.uniform(0, 10));
        const float v = ndvi(nir, red);
        EXPECT_GE(v, -1.0f);
        EXPECT_LE(v, 1.0f);
    }
}

TEST(Ndvi, RasterPropagatesNodata) {
    auto nir = one_channel(1, 2, {0.6f, -9999});
    auto red = one_channel(1, 2, {0.2f, 0.1f});
    auto out = ndvi_raster(nir, red);
    EXPECT_FLOAT_EQ(out.at(0, 0, 0), 0.5f);
    EXPECT_TRUE(out.is_nodata(0, 0, 1));
}

TEST(NdviAggregates, Examples) {
    std::vector<RasterStack> one{one_channel(1, 2, {0.2f, 0.7f})};
    auto a = ndvi_aggregates(one);
    EXPECT_EQ(a.amplitude.at(0, 0, 0), 0.0f);
    EXPECT_EQ(a.sum.at(0, 0, 1), 0.7f);
    EXPECT_EQ(a.maximum.at(0, 0, 0), 0.2f);

    std::vector<RasterStack> series{one_channel(1, 2, {0.1f, -9999}), one_channel(1, 2, {0.5f, -9999}),
                                    one_channel(1, 2, {0.3f, -9999})};
    auto b = ndvi_aggregates(series);
    EXPECT_NEAR(b.amplitude.at(0, 0, 0), 0.4, 1e-6);
    EXPECT_NEAR(b.sum.at(0, 0, 0), 0.9, 1e-6);
    EXPECT_NEAR(b.maximum.at(0, 0, 0), 0.5, 1e-6);
    EXPECT_TRUE(b.amplitude.is_nodata(0, 0, 1));
    EXPECT_TRUE(b.sum.is_nodata(0, 0, 1));
    EXPECT_TRUE(b.maximum.is_nodata(0, 0, 1));
}

TEST(NdviAggregates, PartialNodataExcludesStep) {
    std::vector<RasterStack> series{one_channel(1, 1, {0.2f}), one_channel(1, 1, {-9999}), one_channel(1, 1, {0.6f})};
    auto a = ndvi_aggregates(series);
    EXPECT_NEAR(a.sum.at(0, 0, 0), 0.8, 1e-6);
    EXPECT_NEAR(a.amplitude.at(0, 0, 0), 0.4, 1e-6);
}

TEST(NdviAggregates, Errors) {
    EXPECT_THROW(ndvi_aggregates(std::vector<RasterStack>{}), DataError);
    std::vector<RasterStack> bad{one_channel(1, 2, {0, 0}), one_channel(2, 1, {0, 0})};
    EXPECT_THROW(ndvi_aggregates(bad), DataError);
}

TEST(NdviAggregates, AmplitudeNonNegativeAndMaxAboveMean) {
    Rng rng(8);
    std::vector<RasterStack> series;
    for (int t = 0; t < 6; ++t) {
        std::vector<float> v(25);
        for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
        series.push_back(one_channel(5, 5, v));
    }
    auto a = ndvi_aggregates(series);
    for (std::size_t i = 0; i < 25; ++i) {
        EXPECT_GE(a.amplitude.data()[i], 0.0f);
        EXPECT_GE(a.maximum.data()[i], a.sum.data()[i] / 6.0f - 1e-6f);
    }
}

TEST(WorldToPixel, Examples) {
    const GeoTransform gt{0, 1000, 10, 10};
    EXPECT_EQ(world_to_pixel(gt, 105, 995), (PixelIndex{0, 10}));
    EXPECT_EQ(world_to_pixel(gt, 0, 1000), (PixelIndex{0, 0}));
    EXPECT_EQ(world_to_pixel(gt, 0, 990), (PixelIndex{1, 0}));
}

TEST(WorldToPixel, CenterRoundTrip) {
    const GeoTransform gt{123.5, 9876.25, 10, 7.5};
    for (std::int64_t r = 0; r < 40; ++r) {
        for (std::int64_t c = 0; c < 40; ++c) {
            const auto [x, y] = pixel_center_to_world(gt, r, c);
            EXPECT_EQ(world_to_pixel(gt, x, y), (PixelIndex{r, c}));
        }
    }
}

TEST(ExtractPatch, SinglePixel) {
    auto r = one_channel(2, 2, {1, 2, 3, 4});
    auto p = extract_patch(r, 1, 0, 1);
    ASSERT_EQ(p.values.size(), 1u);
    EXPECT_EQ(p.values[0], 3.0f);
    EXPECT_EQ(p.nodata_fraction, 0.0);
}

TEST(ExtractPatch, ExactCover) {
    auto r = RasterStack::zeros(2, 49, 49);
    for (std::size_t i = 0; i < r.data().size(); ++i) r.mutable_data()[i] = static_cast<float>(i);
    auto p = extract_patch(r, 24, 24, 49);
    EXPECT_EQ(p.nodata_fraction, 0.0);
    EXPECT_EQ(p.values, std::vector<float>(r.data().begin(), r.data().end()));
    EXPECT_EQ(p.center(), 24u);
}

TEST(ExtractPatch, CornerFillsFiveOfNine) {
    auto r = RasterStack::zeros(2, 4, 4);
    for (auto& v : r.mutable_data()) v = 7.0f;
    auto p = extract_patch(r, 0, 0, 3);
    EXPECT_DOUBLE_EQ(p.nodata_fraction, 5.0 / 9.0);
    EXPECT_EQ(p.at(0, 0, 0), 0.0f);
    EXPECT_EQ(p.at(1, 1, 1), 7.0f);
    EXPECT_EQ(p.at(1, 2, 2), 7.0f);
}

TEST(ExtractPatch, Errors) {
    auto r = one_channel(2, 2, {1, -9999, 3, 4});
    EXPECT_THROW(extract_patch(r, 0, 1, 3), DataError);
    EXPECT_THROW(extract_patch(r, 2, 0, 3), DataError);
    EXPECT_THROW(extract_patch(r, -1, 0, 3), DataError);
    EXPECT_THROW(extract_patch(r, 0, 0, 2), DataError);
    auto p = extract_patch(r, 1, 0, 3);
    EXPECT_EQ(p.at(0, 0, 2), 0.0f); // nodata neighbour
}

TEST(ExtractPatch, CenterMatchesRaster) {
    Rng rng(2);
    auto r = RasterStack::zeros(3, 9, 11);
    for (auto& v : r.mutable_data()) v = static_cast<float>(rng.normal());
    for (std::int64_t row = 0; row < 9; ++row) {
        for (std::int64_t col = 0; col < 11; ++col) {
            auto p = extract_patch(r, row, col, 5);
            for (std::size_t c = 0; c < 3; ++c) {
                EXPECT_EQ(p.at(c, 2, 2), r.at(c, static_cast<std::size_t>(row), static_cast<std::size_t>(col)));
            }
        }
    }
}

TEST(ExtractPatchReflect, MirrorsWithoutEdgeRepeat) {
    EXPECT_EQ(reflect_index(-1, 5), 1u);
    EXPECT_EQ(reflect_index(-2, 5), 2u);
    EXPECT_EQ(reflect_index(5, 5), 3u);
    EXPECT_EQ(reflect_index(3, 1), 0u);
    auto r = one_channel(1, 3, {1, 2, 3});
    auto p = extract_patch_reflect(r, 0, 0, 3);
    EXPECT_EQ(p.at(0, 1, 0), 2.0f);
    EXPECT_EQ(p.at(0, 1, 1), 1.0f);
    EXPECT_EQ(p.at(0, 0, 2), 2.0f);
    EXPECT_EQ(p.nodata_fraction, 0.0);
}

TEST(CropRaster, ShiftsGeotransform) {
    auto r = RasterStack::zeros(1, 4, 4, GeoTransform{100, 200, 10, 10});
    r.at(0, 2, 3) = 9.0f;
    auto c = crop_raster(r, 2, 1, 2, 3);
    EXPECT_EQ(c.at(0, 0, 2), 9.0f);
    EXPECT_DOUBLE_EQ(c.geotransform().origin_x, 110.0);
    EXPECT_DOUBLE_EQ(c.geotransform().origin_y, 180.0);
    EXPECT_THROW(crop_raster(r, 3, 0, 2, 1), DataError);
}

TEST(StackChannels, ConcatenatesAndRewritesNodata) {
    auto a = one_channel(1, 2, {1, 2}, -1.0f);
    auto b = one_channel(1, 2, {-5, 4}, -5.0f);
    std::vector<RasterStack> parts{a, b};
    auto s = stack_channels(parts);
    EXPECT_EQ(s.channels(), 2u);
    EXPECT_TRUE(s.is_nodata(1, 0, 0));
    EXPECT_EQ(s.at(1, 0, 1), 4.0f);
}

TEST(RasterFile, ByteLayout) {
    RasterStack r(2, 1, 2, GeoTransform{1.5, 2.5, 10, 20}, -1.0f, {"ab", "c"}, {1, 2, 3, 4});
    std::stringstream buf;
    write_raster(buf, r);
    const auto bytes = buf.str();
    ASSERT_EQ(bytes.size(), 4 + 2 + 2 + 4 + 4 + 32 + 4 + (2 + 2) + (2 + 1) + 16);
    EXPECT_EQ(bytes.substr(0, 4), "MSRS");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);
    EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 0);
    EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 2); // channels
    EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1); // height
    EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 2); // width
    double ox = 0;
    std::memcpy(&ox, bytes.data() + 16, 8);
    EXPECT_EQ(ox, 1.5);
    EXPECT_EQ(bytes.substr(52, 2), std::string("\x02\x00", 2));
    EXPECT_EQ(bytes.substr(54, 2), "ab");
    float last = 0;
    std::memcpy(&last, bytes.data() + bytes.size() - 4, 4);
    EXPECT_EQ(last, 4.0f);
}

TEST(RasterFile, RoundTripWritesMaskAsSentinel) {
    auto r = RasterStack(2, 3, 2, GeoTransform{5, 6, 2, 3}, -7.0f, {"x", "y"}, {1, 2, 3, 4, 5, 6, -7, 8, 9, 10, 11, 12});
    const auto path = temp_path("rt.msrs");
    write_raster(path, r);
    auto back = read_raster(path);
    EXPECT_EQ(back.geotransform(), r.geotransform());
    EXPECT_EQ(back.channel_names(), r.channel_names());
    EXPECT_EQ(std::vector<float>(back.data().begin(), back.data().end()), std::vector<float>(r.data().begin(), r.data().end()));
    EXPECT_TRUE(back.is_nodata(1, 0, 0));

    auto z = standardize(r, compute_channel_stats(r));
    write_raster(path, z);
    EXPECT_EQ(read_raster(path).at(1, 0, 0), -7.0f);
    std::filesystem::remove(path);
}

TEST(RasterFile, RejectsCorruption) {
    std::stringstream bad_magic("MSRX\x01\x00");
    EXPECT_THROW(read_raster(bad_magic), DataError);
    std::stringstream buf;
    write_raster(buf, one_channel(2, 2, {1, 2, 3, 4}));
    auto truncated = buf.str().substr(0, buf.str().size() - 3);
    std::stringstream t(truncated);
    EXPECT_THROW(read_raster(t), DataError);
    auto wrong_version = buf.str();
    wrong_version[4] = 9;
    std::stringstream v(wrong_version);
    EXPECT_THROW(read_raster(v), DataError);
    EXPECT_THROW(read_raster(temp_path("missing.msrs")), DataError);
}

TEST(TextMatrix, ImportsAndValidates) {
    const auto path = temp_path("m.txt");
    {
        std::ofstream out(path);
        out << "1 2 3\n4 5 6\n\n";
    }
    auto r = import_text_matrix(path);
    EXPECT_EQ(r.height(), 2u);
    EXPECT_EQ(r.width(), 3u);
    EXPECT_EQ(r.at(0, 1, 2), 6.0f);
    {
        std::ofstream out(path);
        out << "1 2\n3\n";
    }
    EXPECT_THROW(import_text_matrix(path), DataError);
    {
        std::ofstream out(path);
        out << "1 x\n";
    }
    EXPECT_THROW(import_text_matrix(path), DataError);
    std::filesystem::remove(path);
}
