#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "habmap/binary_io.hpp"
#include "habmap/error.hpp"

namespace habmap {

/// North-up affine placement of a grid: world x grows east with columns,
/// world y shrinks south with rows.
struct GeoTransform {
    double origin_x = 0.0;
    double origin_y = 0.0;
    double pixel_size_x = 1.0;
    double pixel_size_y = 1.0;

    void validate() const {
        if (!(pixel_size_x > 0.0) || !(pixel_size_y > 0.0)) {
            throw DataError("geotransform pixel sizes must be strictly positive");
        }
    }

    bool operator==(const GeoTransform&) const = default;
};

struct PixelIndex {
    std::int64_t row = 0;
    std::int64_t col = 0;
    bool operator==(const PixelIndex&) const = default;
};

inline PixelIndex world_to_pixel(const GeoTransform& gt, double x, double y) {
    return {static_cast<std::int64_t>(std::floor((gt.origin_y - y) / gt.pixel_size_y)),
            static_cast<std::int64_t>(std::floor((x - gt.origin_x) / gt.pixel_size_x))};
}

inline std::pair<double, double> pixel_center_to_world(const GeoTransform& gt, std::int64_t row,
                                                       std::int64_t col) {
    return {gt.origin_x + (static_cast<double>(col) + 0.5) * gt.pixel_size_x,
            gt.origin_y - (static_cast<double>(row) + 0.5) * gt.pixel_size_y};
}

/// Multi-channel grid of float samples stored channel-major (C, H, W).
///
/// Missing samples are identified by the `nodata` sentinel. Standardization
/// overwrites missing samples with 0, so a standardized stack carries an
/// explicit per-sample mask instead; `is_nodata` consults whichever applies.
class RasterStack {
public:
    RasterStack() = default;

    RasterStack(std::size_t channels, std::size_t height, std::size_t width, GeoTransform gt,
                float nodata, std::vector<std::string> channel_names, std::vector<float> data)
        : channels_(channels), height_(height), width_(width), gt_(gt), nodata_(nodata),
          names_(std::move(channel_names)), data_(std::move(data)) {
        if (channels_ < 1) throw DataError("raster needs at least one channel");
        if (channels_ > 0xFFFF) throw DataError("raster channel count exceeds u16");
        if (names_.size() != channels_) throw DataError("channel_names length != channel count");
        if (data_.size() != channels_ * height_ * width_) {
            throw DataError("raster data length != C*H*W");
        }
        gt_.validate();
    }

    /// Zero-filled stack with default channel names.
    static RasterStack zeros(std::size_t channels, std::size_t height, std::size_t width,
                             GeoTransform gt = {}, float nodata = -9999.0f) {
        std::vector<std::string> names;
        for (std::size_t c = 0; c < channels; ++c) names.push_back("band" + std::to_string(c + 1));
        return RasterStack(channels, height, width, gt, nodata, std::move(names),
                           std::vector<float>(channels * height * width, 0.0f));
    }

    std::size_t channels() const { return channels_; }
    std::size_t height() const { return height_; }
    std::size_t width() const { return width_; }
    std::size_t plane_size() const { return height_ * width_; }
    const GeoTransform& geotransform() const { return gt_; }
    float nodata() const { return nodata_; }
    const std::vector<std::string>& channel_names() const { return names_; }
    bool standardized() const { return standardized_; }

    std::span<const float> data() const { return data_; }
    std::span<float> mutable_data() { return data_; }

    std::size_t offset(std::size_t c, std::size_t row, std::size_t col) const {
        return (c * height_ + row) * width_ + col;
    }
    float at(std::size_t c, std::size_t row, std::size_t col) const { return data_[offset(c, row, col)]; }
    float& at(std::size_t c, std::size_t row, std::size_t col) { return data_[offset(c, row, col)]; }

    bool in_bounds(std::int64_t row, std::int64_t col) const {
        return row >= 0 && col >= 0 && row < static_cast<std::int64_t>(height_) &&
               col < static_cast<std::int64_t>(width_);
    }

    bool is_nodata_at(std::size_t index) const {
        if (!mask_.empty()) return mask_[index] != 0;
        const float v = data_[index];
        return std::isnan(nodata_) ? std::isnan(v) : v == nodata_;
    }
    bool is_nodata(std::size_t c, std::size_t row, std::size_t col) const {
        return is_nodata_at(offset(c, row, col));
    }
    /// True when every channel holds a valid sample at (row, col).
    bool pixel_valid(std::size_t row, std::size_t col) const {
        for (std::size_t c = 0; c < channels_; ++c) {
            if (is_nodata(c, row, col)) return false;
        }
        return true;
    }

    /// Channel values at one pixel (the per-pixel feature vector).
    std::vector<float> pixel(std::size_t row, std::size_t col) const {
        std::vector<float> v(channels_);
        for (std::size_t c = 0; c < channels_; ++c) v[c] = at(c, row, col);
        return v;
    }

    void set_nodata_mask(std::vector<std::uint8_t> mask) {
        if (!mask.empty() && mask.size() != data_.size()) throw DataError("nodata mask size mismatch");
        mask_ = std::move(mask);
    }
    const std::vector<std::uint8_t>& nodata_mask() const { return mask_; }
    void mark_standardized(bool flag = true) { standardized_ = flag; }

private:
    std::size_t channels_ = 0;
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    GeoTransform gt_{};
    float nodata_ = -9999.0f;
    std::vector<std::string> names_;
    std::vector<float> data_;
    std::vector<std::uint8_t> mask_;
    bool standardized_ = false;
};

inline constexpr double kStdFloor = 1e-6;

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stddev;
    std::size_t channels() const { return mean.size(); }
};

/// Population mean and standard deviation per channel over valid samples.
inline ChannelStats compute_channel_stats(const RasterStack& raster) {
    if (raster.plane_size() == 0) throw DataError("cannot compute statistics of an empty raster");
    ChannelStats stats;
    const auto plane = raster.plane_size();
    for (std::size_t c = 0; c < raster.channels(); ++c) {
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
            if (raster.is_nodata_at(i)) continue;
            sum += raster.data()[i];
            ++n;
        }
        if (n == 0) {
            throw DataError("channel " + std::to_string(c) + " ('" + raster.channel_names()[c] +
                            "') is entirely nodata");
        }
        const double mean = sum / static_cast<double>(n);
        double ss = 0.0;
        for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
            if (raster.is_nodata_at(i)) continue;
            const double d = raster.data()[i] - mean;
            ss += d * d;
        }
        stats.mean.push_back(mean);
        stats.stddev.push_back(std::max(std::sqrt(ss / static_cast<double>(n)), kStdFloor));
    }
    return stats;
}

inline RasterStack standardize(const RasterStack& raster, const ChannelStats& stats) {
    if (stats.mean.size() != raster.channels() || stats.stddev.size() != raster.channels()) {
        throw DataError("channel stats count (" + std::to_string(stats.mean.size()) +
                        ") != raster channel count (" + std::to_string(raster.channels()) + ")");
    }
    std::vector<float> out(raster.data().size());
    std::vector<std::uint8_t> mask(raster.data().size(), 0);
    const auto plane = raster.plane_size();
    for (std::size_t c = 0; c < raster.channels(); ++c) {
        for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
            if (raster.is_nodata_at(i)) {
                out[i] = 0.0f;
                mask[i] = 1;
            } else {
                out[i] = static_cast<float>((raster.data()[i] - stats.mean[c]) / stats.stddev[c]);
            }
        }
    }
    RasterStack result(raster.channels(), raster.height(), raster.width(), raster.geotransform(),
                       raster.nodata(), raster.channel_names(), std::move(out));
    result.set_nodata_mask(std::move(mask));
    result.mark_standardized();
    return result;
}

inline float ndvi(float nir, float red) {
    const double denom = static_cast<double>(nir) + static_cast<double>(red);
    if (std::abs(denom) < 1e-9) return 0.0f;
    return static_cast<float>((static_cast<double>(nir) - red) / denom);
}

/// Per-pixel NDVI raster from single-channel NIR and red rasters. Nodata in
/// either input propagates.
inline RasterStack ndvi_raster(const RasterStack& nir, const RasterStack& red) {
    if (nir.height() != red.height() || nir.width() != red.width()) {
        throw DataError("ndvi inputs differ in shape");
    }
    auto out = RasterStack::zeros(1, nir.height(), nir.width(), nir.geotransform(), nir.nodata());
    for (std::size_t r = 0; r < nir.height(); ++r) {
        for (std::size_t c = 0; c < nir.width(); ++c) {
            out.at(0, r, c) = (nir.is_nodata(0, r, c) || red.is_nodata(0, r, c))
                                  ? nir.nodata()
                                  : ndvi(nir.at(0, r, c), red.at(0, r, c));
        }
    }
    return out;
}

struct NdviAggregates {
    RasterStack amplitude;
    RasterStack sum;
    RasterStack maximum;
};

/// Seasonal aggregates over an ordered NDVI series (channel 0 of each step).
inline NdviAggregates ndvi_aggregates(std::span<const RasterStack> series) {
    if (series.empty()) throw DataError("ndvi_aggregates: empty series");
    const auto h = series.front().height();
    const auto w = series.front().width();
    for (const auto& r : series) {
        if (r.height() != h || r.width() != w) throw DataError("ndvi_aggregates: shape mismatch");
    }
    const auto& gt = series.front().geotransform();
    const float nd = series.front().nodata();
    auto make = [&](const char* name) {
        return RasterStack(1, h, w, gt, nd, {name}, std::vector<float>(h * w, 0.0f));
    };
    NdviAggregates out{make("ndvi_amplitude"), make("ndvi_sum"), make("ndvi_max")};
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            double lo = std::numeric_limits<double>::infinity();
            double hi = -lo;
            double total = 0.0;
            std::size_t valid = 0;
            for (const auto& step : series) {
                if (step.is_nodata(0, r, c)) continue;
                const double v = step.at(0, r, c);
                lo = std::min(lo, v);
                hi = std::max(hi, v);
                total += v;
                ++valid;
            }
            if (valid == 0) {
                out.amplitude.at(0, r, c) = nd;
                out.sum.at(0, r, c) = nd;
                out.maximum.at(0, r, c) = nd;
            } else {
                out.amplitude.at(0, r, c) = static_cast<float>(hi - lo);
                out.sum.at(0, r, c) = static_cast<float>(total);
                out.maximum.at(0, r, c) = static_cast<float>(hi);
            }
        }
    }
    return out;
}

/// Concatenates same-shape stacks along the channel axis. Geotransform and
/// nodata come from the first stack; nodata samples of later stacks are
/// rewritten to that sentinel.
inline RasterStack stack_channels(std::span<const RasterStack> parts) {
    if (parts.empty()) throw DataError("stack_channels: no inputs");
    const auto& first = parts.front();
    std::vector<std::string> names;
    std::vector<float> data;
    std::size_t channels = 0;
    for (const auto& p : parts) {
        if (p.height() != first.height() || p.width() != first.width()) {
            throw DataError("stack_channels: shape mismatch");
        }
        for (std::size_t i = 0; i < p.data().size(); ++i) {
            data.push_back(p.is_nodata_at(i) ? first.nodata() : p.data()[i]);
        }
        names.insert(names.end(), p.channel_names().begin(), p.channel_names().end());
        channels += p.channels();
    }
    return RasterStack(channels, first.height(), first.width(), first.geotransform(), first.nodata(),
                       std::move(names), std::move(data));
}

/// Square multi-channel window (C, S, S), S odd, around a labelled pixel.
struct Patch {
    std::size_t channels = 0;
    std::size_t size = 0;
    std::vector<float> values;
    std::optional<int> center_class;
    std::optional<std::string> source_point;
    double nodata_fraction = 0.0;

    float at(std::size_t c, std::size_t row, std::size_t col) const {
        return values[(c * size + row) * size + col];
    }
    float& at(std::size_t c, std::size_t row, std::size_t col) {
        return values[(c * size + row) * size + col];
    }
    std::size_t center() const { return (size - 1) / 2; }
};

inline constexpr double kDefaultMaxNodataFraction = 0.5;

/// Window of side `size` centred at (row, col). Out-of-bounds and nodata
/// samples are filled with 0 and counted into `nodata_fraction`.
inline Patch extract_patch(const RasterStack& raster, std::int64_t row, std::int64_t col,
                           std::size_t size) {
    if (size < 1 || size % 2 == 0) throw DataError("patch size must be odd and >= 1");
    if (!raster.in_bounds(row, col)) {
        throw DataError("patch center (" + std::to_string(row) + ", " + std::to_string(col) +
                        ") is outside the raster");
    }
    if (!raster.pixel_valid(static_cast<std::size_t>(row), static_cast<std::size_t>(col))) {
        throw DataError("patch center (" + std::to_string(row) + ", " + std::to_string(col) +
                        ") is nodata");
    }
    Patch p;
    p.channels = raster.channels();
    p.size = size;
    p.values.assign(p.channels * size * size, 0.0f);
    const auto half = static_cast<std::int64_t>(size / 2);
    std::size_t filled = 0;
    for (std::size_t c = 0; c < p.channels; ++c) {
        for (std::int64_t dr = -half; dr <= half; ++dr) {
            for (std::int64_t dc = -half; dc <= half; ++dc) {
                const auto r = row + dr;
                const auto cc = col + dc;
                const auto pr = static_cast<std::size_t>(dr + half);
                const auto pc = static_cast<std::size_t>(dc + half);
                if (!raster.in_bounds(r, cc) ||
                    raster.is_nodata(c, static_cast<std::size_t>(r), static_cast<std::size_t>(cc))) {
                    ++filled;
                    continue;
                }
                p.at(c, pr, pc) = raster.at(c, static_cast<std::size_t>(r), static_cast<std::size_t>(cc));
            }
        }
    }
    p.nodata_fraction = static_cast<double>(filled) / static_cast<double>(p.values.size());
    return p;
}

/// Index folding for mirror padding without edge repetition
/// (..., 2, 1, 0, 1, 2, ..., n-1, n-2, ...).
inline std::size_t reflect_index(std::int64_t i, std::size_t n) {
    if (n == 1) return 0;
    const auto period = static_cast<std::int64_t>(2 * (n - 1));
    i %= period;
    if (i < 0) i += period;
    if (i >= static_cast<std::int64_t>(n)) i = period - i;
    return static_cast<std::size_t>(i);
}

/// Window of side `size` with reflected borders; nodata samples inside the
/// window read as 0. Used for wall-to-wall map production.
inline Patch extract_patch_reflect(const RasterStack& raster, std::int64_t row, std::int64_t col,
                                   std::size_t size) {
    if (size < 1 || size % 2 == 0) throw DataError("patch size must be odd and >= 1");
    Patch p;
    p.channels = raster.channels();
    p.size = size;
    p.values.assign(p.channels * size * size, 0.0f);
    const auto half = static_cast<std::int64_t>(size / 2);
    std::size_t filled = 0;
    for (std::size_t c = 0; c < p.channels; ++c) {
        for (std::int64_t dr = -half; dr <= half; ++dr) {
            const auto r = reflect_index(row + dr, raster.height());
            for (std::int64_t dc = -half; dc <= half; ++dc) {
                const auto cc = reflect_index(col + dc, raster.width());
                float& dst = p.at(c, static_cast<std::size_t>(dr + half), static_cast<std::size_t>(dc + half));
                if (raster.is_nodata(c, r, cc)) {
                    ++filled;
                } else {
                    dst = raster.at(c, r, cc);
                }
            }
        }
    }
    p.nodata_fraction = static_cast<double>(filled) / static_cast<double>(p.values.size());
    return p;
}

/// Sub-window copy [row0, row0+h) x [col0, col0+w); geotransform shifted.
inline RasterStack crop_raster(const RasterStack& raster, std::size_t row0, std::size_t col0,
                               std::size_t h, std::size_t w) {
    if (row0 + h > raster.height() || col0 + w > raster.width()) throw DataError("crop exceeds raster");
    const auto& gt = raster.geotransform();
    GeoTransform sub{gt.origin_x + static_cast<double>(col0) * gt.pixel_size_x,
                     gt.origin_y - static_cast<double>(row0) * gt.pixel_size_y, gt.pixel_size_x,
                     gt.pixel_size_y};
    std::vector<float> data(raster.channels() * h * w);
    std::vector<std::uint8_t> mask;
    const bool has_mask = !raster.nodata_mask().empty();
    if (has_mask) mask.resize(data.size());
    for (std::size_t c = 0; c < raster.channels(); ++c) {
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t k = 0; k < w; ++k) {
                const auto dst = (c * h + r) * w + k;
                const auto src = raster.offset(c, row0 + r, col0 + k);
                data[dst] = raster.data()[src];
                if (has_mask) mask[dst] = raster.nodata_mask()[src];
            }
        }
    }
    RasterStack out(raster.channels(), h, w, sub, raster.nodata(), raster.channel_names(), std::move(data));
    out.set_nodata_mask(std::move(mask));
    out.mark_standardized(raster.standardized());
    return out;
}

// ---------------------------------------------------------------------------
// Container file "MSRS" v1, little-endian:
//   magic[4] version:u16 channels:u16 height:u32 width:u32
//   origin_x:f64 origin_y:f64 pixel_size_x:f64 pixel_size_y:f64 nodata:f32
//   C x (name_len:u16 name:utf8) then C*H*W f32 samples, channel-major.
// Masked samples are written as the nodata sentinel.

inline constexpr std::uint16_t kRasterFormatVersion = 1;

inline void write_raster(std::ostream& out, const RasterStack& r) {
    io::put_magic(out, "MSRS");
    io::put_u16(out, kRasterFormatVersion);
    io::put_u16(out, static_cast<std::uint16_t>(r.channels()));
    io::put_u32(out, static_cast<std::uint32_t>(r.height()));
    io::put_u32(out, static_cast<std::uint32_t>(r.width()));
    const auto& gt = r.geotransform();
    io::put_f64(out, gt.origin_x);
    io::put_f64(out, gt.origin_y);
    io::put_f64(out, gt.pixel_size_x);
    io::put_f64(out, gt.pixel_size_y);
    io::put_f32(out, r.nodata());
    for (const auto& name : r.channel_names()) io::put_string16(out, name);
    for (std::size_t i = 0; i < r.data().size(); ++i) {
        io::put_f32(out, r.is_nodata_at(i) ? r.nodata() : r.data()[i]);
    }
}

inline RasterStack read_raster(std::istream& in) {
    io::expect_magic(in, "MSRS");
    const auto version = io::get_u16(in);
    if (version != kRasterFormatVersion) {
        throw DataError("unsupported raster format version " + std::to_string(version));
    }
    const std::size_t channels = io::get_u16(in);
    const std::size_t height = io::get_u32(in);
    const std::size_t width = io::get_u32(in);
    GeoTransform gt;
    gt.origin_x = io::get_f64(in);
    gt.origin_y = io::get_f64(in);
    gt.pixel_size_x = io::get_f64(in);
    gt.pixel_size_y = io::get_f64(in);
    const float nodata = io::get_f32(in);
    std::vector<std::string> names;
    for (std::size_t c = 0; c < channels; ++c) names.push_back(io::get_string16(in));
    std::vector<float> data(channels * height * width);
    for (auto& v : data) v = io::get_f32(in);
    return RasterStack(channels, height, width, gt, nodata, std::move(names), std::move(data));
}

inline void write_raster(const std::filesystem::path& path, const RasterStack& r) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write raster: " + path.string());
    write_raster(out, r);
}

inline RasterStack read_raster(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open raster: " + path.string());
    try {
        return read_raster(in);
    } catch (const DataError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

/// One channel from a whitespace-separated text matrix (one row per line).
inline RasterStack import_text_matrix(const std::filesystem::path& path, GeoTransform gt = {},
                                      float nodata = -9999.0f) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open text matrix: " + path.string());
    std::vector<float> data;
    std::size_t width = 0;
    std::size_t height = 0;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream row(line);
        std::size_t n = 0;
        std::string tok;
        while (row >> tok) {
            try {
                std::size_t used = 0;
                data.push_back(std::stof(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw DataError(path.string() + ": row " + std::to_string(height + 1) +
                                ": non-numeric value '" + tok + "'");
            }
            ++n;
        }
        if (n == 0) continue;
        if (height == 0) width = n;
        if (n != width) {
            throw DataError(path.string() + ": row " + std::to_string(height + 1) + " has " +
                            std::to_string(n) + " values, expected " + std::to_string(width));
        }
        ++height;
    }
    if (height == 0) throw DataError(path.string() + ": empty text matrix");
    return RasterStack(1, height, width, gt, nodata, {path.stem().string()}, std::move(data));
}

} // namespace habmap
