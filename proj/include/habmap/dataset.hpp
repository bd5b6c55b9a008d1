#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "habmap/error.hpp"
#include "habmap/random.hpp"
#include "habmap/raster.hpp"

namespace habmap {

struct AnnotationPoint {
    std::string id;
    double x = 0.0;
    double y = 0.0;
    std::string class_code;
    bool operator==(const AnnotationPoint&) const = default;
};

/// Ordered set of class codes with a contiguous index.
class Taxonomy {
public:
    Taxonomy() = default;
    Taxonomy(std::string name, std::vector<std::string> codes) : name_(std::move(name)), codes_(std::move(codes)) {
        for (std::size_t i = 0; i < codes_.size(); ++i) {
            if (!index_.emplace(codes_[i], static_cast<int>(i)).second) {
                throw DataError("taxonomy '" + name_ + "': duplicate code '" + codes_[i] + "'");
            }
        }
    }

    const std::string& name() const { return name_; }
    const std::vector<std::string>& codes() const { return codes_; }
    std::size_t size() const { return codes_.size(); }
    bool contains(const std::string& code) const { return index_.count(code) != 0; }
    std::optional<int> find(const std::string& code) const {
        auto it = index_.find(code);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }
    int index(const std::string& code) const {
        auto it = index_.find(code);
        if (it == index_.end()) throw DataError("code '" + code + "' not in taxonomy '" + name_ + "'");
        return it->second;
    }
    const std::string& code(std::size_t index) const { return codes_.at(index); }

private:
    std::string name_;
    std::vector<std::string> codes_;
    std::unordered_map<std::string, int> index_;
};

/// Taxonomy file: one code per line (optionally "code,description");
/// blank lines and '#' comments ignored. The file stem names the taxonomy.
inline Taxonomy load_taxonomy(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open taxonomy: " + path.string());
    std::vector<std::string> codes;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        codes.push_back(line.substr(0, line.find(',')));
    }
    return Taxonomy(path.stem().string(), std::move(codes));
}

inline void write_taxonomy(const std::filesystem::path& path, const Taxonomy& t) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write taxonomy: " + path.string());
    out << "# taxonomy " << t.name() << "\n";
    for (const auto& c : t.codes()) out << c << "\n";
}

/// The 25 Natura2000 habitat codes of the Lapland field survey and their
/// sample counts, kept as a reference class-imbalance profile.
inline const std::vector<std::pair<std::string, std::size_t>>& natura2000_reference_counts() {
    static const std::vector<std::pair<std::string, std::size_t>> counts = {
        {"3110", 28}, {"3160", 1},   {"3220", 4},   {"4060", 472}, {"4080", 9},
        {"6150", 121}, {"6270", 1},  {"6430", 13},  {"6450", 46},  {"7140", 165},
        {"7160", 104}, {"7220", 8},  {"7230", 26},  {"7240", 2},   {"7310", 27},
        {"7320", 17},  {"8110", 7},  {"8210", 2},   {"8220", 64},  {"9010", 271},
        {"9040", 453}, {"9050", 58}, {"9080", 12},  {"91D0", 19},  {"91E0", 106},
    };
    return counts;
}

inline Taxonomy natura2000_taxonomy() {
    std::vector<std::string> codes;
    for (const auto& [code, n] : natura2000_reference_counts()) codes.push_back(code);
    return Taxonomy("natura2000", std::move(codes));
}

// --- annotation CSV --------------------------------------------------------

struct RowRejection {
    std::size_t row = 0; // 1-based data row (header excluded)
    std::string reason;
};

struct AnnotationSet {
    std::vector<AnnotationPoint> points;
    std::vector<RowRejection> rejections;
};

namespace detail {

inline std::string trim(std::string s) {
    const auto ws = " \t\r\n";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream s(line);
    while (std::getline(s, cell, ',')) cells.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
}

inline std::optional<double> parse_double(const std::string& s) {
    if (s.empty()) return std::nullopt;
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size() || !std::isfinite(v)) return std::nullopt;
        return v;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

} // namespace detail

/// Reads `id,x,y,class_code` rows. Unknown codes are reported, not fatal;
/// malformed rows and duplicate ids are errors.
inline AnnotationSet read_annotations(std::istream& in, const Taxonomy& taxonomy,
                                      const std::string& source = "annotations") {
    AnnotationSet out;
    std::string line;
    if (!std::getline(in, line)) throw DataError(source + ": missing header");
    const auto header = detail::split_csv(line);
    if (header != std::vector<std::string>{"id", "x", "y", "class_code"}) {
        throw DataError(source + ": header must be 'id,x,y,class_code'");
    }
    std::unordered_set<std::string> seen;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (detail::trim(line).empty()) continue;
        const auto cells = detail::split_csv(line);
        const auto where = source + ": row " + std::to_string(row);
        if (cells.size() != 4) {
            throw DataError(where + ": expected 4 columns, got " + std::to_string(cells.size()));
        }
        const auto x = detail::parse_double(cells[1]);
        const auto y = detail::parse_double(cells[2]);
        if (!x || !y) throw DataError(where + ": non-numeric coordinate");
        if (cells[0].empty()) throw DataError(where + ": empty id");
        if (!seen.insert(cells[0]).second) throw DataError(where + ": duplicate id '" + cells[0] + "'");
        if (!taxonomy.contains(cells[3])) {
            out.rejections.push_back({row, "unknown class code '" + cells[3] + "'"});
            continue;
        }
        out.points.push_back({cells[0], *x, *y, cells[3]});
    }
    return out;
}

inline AnnotationSet load_annotations(const std::filesystem::path& path, const Taxonomy& taxonomy) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open annotations: " + path.string());
    return read_annotations(in, taxonomy, path.string());
}

inline void write_annotations(const std::filesystem::path& path, const std::vector<AnnotationPoint>& points) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write annotations: " + path.string());
    out.precision(17);
    out << "id,x,y,class_code\n";
    for (const auto& p : points) out << p.id << ',' << p.x << ',' << p.y << ',' << p.class_code << '\n';
}

inline void write_rejections(const std::filesystem::path& path, const std::vector<RowRejection>& rej) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write report: " + path.string());
    out << "row,reason\n";
    for (const auto& r : rej) out << r.row << ',' << r.reason << '\n';
}

inline std::vector<std::size_t> class_histogram(const std::vector<AnnotationPoint>& points,
                                                const Taxonomy& taxonomy) {
    std::vector<std::size_t> counts(taxonomy.size(), 0);
    for (const auto& p : points) ++counts[static_cast<std::size_t>(taxonomy.index(p.class_code))];
    return counts;
}

// --- overlap-aware splitting ----------------------------------------------

/// Square patches of side `patch_size` around two points share at least one
/// pixel on the common grid anchored at the world origin.
inline bool patches_overlap(const AnnotationPoint& a, const AnnotationPoint& b, std::size_t patch_size,
                            double pixel_size) {
    const GeoTransform grid{0.0, 0.0, pixel_size, pixel_size};
    const auto pa = world_to_pixel(grid, a.x, a.y);
    const auto pb = world_to_pixel(grid, b.x, b.y);
    const auto reach = static_cast<std::int64_t>(patch_size) - 1;
    return std::max(std::abs(pa.row - pb.row), std::abs(pa.col - pb.col)) <= reach;
}

struct SplitResult {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
    std::vector<std::string> dropped_ids;
    std::uint64_t seed = 0;
    std::size_t patch_size = 0;
    double pixel_size = 0.0;
    std::size_t fold = 0;
    std::size_t fold_count = 1;
    /// Sub-seed for models trained on this split.
    std::uint64_t fold_seed = 0;

    bool operator==(const SplitResult&) const = default;
};

namespace detail {

inline SplitResult assemble_split(const std::vector<AnnotationPoint>& points, const std::vector<bool>& is_test,
                                  std::size_t patch_size, double pixel_size) {
    SplitResult out;
    std::vector<std::size_t> test_idx;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (is_test[i]) test_idx.push_back(i);
    }
    // Bucket test points by patch-sized grid blocks; any overlapping pair lies
    // in the same or an adjacent block.
    const GeoTransform grid{0.0, 0.0, pixel_size, pixel_size};
    const auto block = static_cast<std::int64_t>(patch_size);
    auto key = [](std::int64_t r, std::int64_t c) {
        return (static_cast<std::uint64_t>(r) << 32) ^ static_cast<std::uint64_t>(c & 0xFFFFFFFF);
    };
    auto floordiv = [](std::int64_t a, std::int64_t b) { return a >= 0 ? a / b : -((-a + b - 1) / b); };
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> buckets;
    for (auto t : test_idx) {
        const auto p = world_to_pixel(grid, points[t].x, points[t].y);
        buckets[key(floordiv(p.row, block), floordiv(p.col, block))].push_back(t);
    }
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (is_test[i]) {
            out.test_ids.push_back(points[i].id);
            continue;
        }
        const auto p = world_to_pixel(grid, points[i].x, points[i].y);
        const auto br = floordiv(p.row, block);
        const auto bc = floordiv(p.col, block);
        bool overlaps = false;
        for (std::int64_t dr = -1; dr <= 1 && !overlaps; ++dr) {
            for (std::int64_t dc = -1; dc <= 1 && !overlaps; ++dc) {
                auto it = buckets.find(key(br + dr, bc + dc));
                if (it == buckets.end()) continue;
                for (auto t : it->second) {
                    if (patches_overlap(points[i], points[t], patch_size, pixel_size)) {
                        overlaps = true;
                        break;
                    }
                }
            }
        }
        (overlaps ? out.dropped_ids : out.train_ids).push_back(points[i].id);
    }
    out.patch_size = patch_size;
    out.pixel_size = pixel_size;
    return out;
}

inline void check_split_args(std::size_t patch_size, double pixel_size) {
    if (patch_size < 1 || patch_size % 2 == 0) throw UsageError("patch_size must be odd and >= 1");
    if (!(pixel_size > 0.0)) throw UsageError("pixel_size must be > 0");
}

} // namespace detail

/// Random test subset of round(fraction*N) points; training points whose
/// patches overlap any test patch are dropped.
inline SplitResult random_test_split(const std::vector<AnnotationPoint>& points, double test_fraction,
                                     std::size_t patch_size, double pixel_size, std::uint64_t seed) {
    detail::check_split_args(patch_size, pixel_size);
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw UsageError("test_fraction must be in (0, 1)");
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(points.size())));
    if (n_test == 0) throw DataError("test set would be empty for " + std::to_string(points.size()) + " points");
    Rng rng(seed);
    auto order = iota_indices(points.size());
    rng.shuffle(order);
    std::vector<bool> is_test(points.size(), false);
    for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;
    auto out = detail::assemble_split(points, is_test, patch_size, pixel_size);
    out.seed = seed;
    out.fold_seed = derive_seed(seed, 0);
    if (out.train_ids.empty()) {
        throw DataError("all non-test points overlap the test set; training set is empty");
    }
    return out;
}

/// k folds whose test sets partition the points; each fold's train set is the
/// complement minus points overlapping that fold's test patches.
inline std::vector<SplitResult> kfold_split(const std::vector<AnnotationPoint>& points, std::size_t k,
                                            std::size_t patch_size, double pixel_size, std::uint64_t seed) {
    detail::check_split_args(patch_size, pixel_size);
    if (k < 2) throw UsageError("k must be >= 2");
    if (points.size() < k) {
        throw DataError("k-fold needs at least k points (" + std::to_string(points.size()) + " < " +
                        std::to_string(k) + ")");
    }
    Rng rng(seed);
    auto order = iota_indices(points.size());
    rng.shuffle(order);
    std::vector<SplitResult> folds;
    const auto n = points.size();
    std::size_t start = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t len = n / k + (f < n % k ? 1 : 0);
        std::vector<bool> is_test(n, false);
        for (std::size_t i = start; i < start + len; ++i) is_test[order[i]] = true;
        start += len;
        auto split = detail::assemble_split(points, is_test, patch_size, pixel_size);
        split.seed = seed;
        split.fold = f;
        split.fold_count = k;
        split.fold_seed = derive_seed(seed, f);
        if (split.train_ids.empty()) {
            throw DataError("fold " + std::to_string(f) + ": training set is empty after overlap removal");
        }
        folds.push_back(std::move(split));
    }
    return folds;
}

inline void write_split(std::ostream& out, const SplitResult& s) {
    out.precision(17);
    out << "# habmap split v1\n"
        << "rng " << Rng::kAlgorithm << "\n"
        << "seed " << s.seed << "\n"
        << "fold " << s.fold << "\n"
        << "fold_count " << s.fold_count << "\n"
        << "fold_seed " << s.fold_seed << "\n"
        << "patch_size " << s.patch_size << "\n"
        << "pixel_size " << s.pixel_size << "\n";
    auto list = [&](const char* name, const std::vector<std::string>& ids) {
        out << name << ' ' << ids.size() << "\n";
        for (const auto& id : ids) out << id << "\n";
    };
    list("train", s.train_ids);
    list("test", s.test_ids);
    list("dropped", s.dropped_ids);
}

inline SplitResult read_split(std::istream& in) {
    SplitResult s;
    std::string key;
    auto read_list = [&](std::vector<std::string>& ids) {
        std::size_t n = 0;
        in >> n;
        ids.resize(n);
        for (auto& id : ids) in >> id;
    };
    std::string line;
    while (in >> key) {
        if (key.front() == '#') {
            std::getline(in, line);
        } else if (key == "rng") {
            in >> line;
            if (line != Rng::kAlgorithm) throw DataError("split written with unknown rng '" + line + "'");
        } else if (key == "seed") {
            in >> s.seed;
        } else if (key == "fold") {
            in >> s.fold;
        } else if (key == "fold_count") {
            in >> s.fold_count;
        } else if (key == "fold_seed") {
            in >> s.fold_seed;
        } else if (key == "patch_size") {
            in >> s.patch_size;
        } else if (key == "pixel_size") {
            in >> s.pixel_size;
        } else if (key == "train") {
            read_list(s.train_ids);
        } else if (key == "test") {
            read_list(s.test_ids);
        } else if (key == "dropped") {
            read_list(s.dropped_ids);
        } else {
            throw DataError("split file: unknown key '" + key + "'");
        }
        if (!in) throw DataError("split file: malformed value for '" + key + "'");
    }
    return s;
}

inline void write_split(const std::filesystem::path& path, const SplitResult& s) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write split: " + path.string());
    write_split(out, s);
}

inline SplitResult read_split(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open split: " + path.string());
    return read_split(in);
}

// --- spaced random sampling ------------------------------------------------

struct WorldExtent {
    double xmin = 0.0;
    double ymin = 0.0;
    double xmax = 0.0;
    double ymax = 0.0;
};

struct WorldPoint {
    double x = 0.0;
    double y = 0.0;
};

/// Uniform points with pairwise Euclidean distance >= min_dist, by rejection
/// sampling against a hash grid. Gives up after `max_attempts` consecutive
/// rejections.
inline std::vector<WorldPoint> min_distance_sample(const WorldExtent& extent, std::size_t n, double min_dist,
                                                   std::uint64_t seed, std::size_t max_attempts = 10000) {
    if (n < 1) throw UsageError("min_distance_sample: n must be >= 1");
    if (min_dist < 0.0) throw UsageError("min_distance_sample: min_dist must be >= 0");
    if (!(extent.xmax > extent.xmin) || !(extent.ymax > extent.ymin)) {
        throw UsageError("min_distance_sample: degenerate extent");
    }
    Rng rng(seed);
    std::vector<WorldPoint> out;
    out.reserve(n);
    const double cell = min_dist > 0.0 ? min_dist : 1.0;
    auto cell_of = [&](double v, double lo) { return static_cast<std::int64_t>(std::floor((v - lo) / cell)); };
    auto key = [](std::int64_t cx, std::int64_t cy) {
        return (static_cast<std::uint64_t>(cx) << 32) ^ static_cast<std::uint64_t>(cy & 0xFFFFFFFF);
    };
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> grid;
    const double d2 = min_dist * min_dist;
    std::size_t rejections = 0;
    while (out.size() < n) {
        const WorldPoint p{rng.uniform(extent.xmin, extent.xmax), rng.uniform(extent.ymin, extent.ymax)};
        const auto cx = cell_of(p.x, extent.xmin);
        const auto cy = cell_of(p.y, extent.ymin);
        bool ok = true;
        if (min_dist > 0.0) {
            for (std::int64_t dx = -1; dx <= 1 && ok; ++dx) {
                for (std::int64_t dy = -1; dy <= 1 && ok; ++dy) {
                    auto it = grid.find(key(cx + dx, cy + dy));
                    if (it == grid.end()) continue;
                    for (auto j : it->second) {
                        const double ex = out[j].x - p.x;
                        const double ey = out[j].y - p.y;
                        if (ex * ex + ey * ey < d2) {
                            ok = false;
                            break;
                        }
                    }
                }
            }
        }
        if (!ok) {
            if (++rejections >= max_attempts) {
                throw DataError("min_distance_sample: placed " + std::to_string(out.size()) + " of " +
                                std::to_string(n) + " points before " + std::to_string(max_attempts) +
                                " consecutive rejections; extent too small for min_dist");
            }
            continue;
        }
        rejections = 0;
        grid[key(cx, cy)].push_back(out.size());
        out.push_back(p);
    }
    return out;
}

// --- point patches -------------------------------------------------------------

struct PointSkip {
    std::string id;
    std::string reason;
};

struct PointPatches {
    std::vector<Patch> patches;
    std::vector<PointSkip> skipped;
};

/// One labeled patch per annotation point. Points outside the raster, on a
/// nodata centre, or whose window is more than `max_nodata_fraction` missing
/// are reported in `skipped`.
inline PointPatches extract_point_patches(const RasterStack& raster, const std::vector<AnnotationPoint>& points,
                                          const Taxonomy& taxonomy, std::size_t size,
                                          double max_nodata_fraction = kDefaultMaxNodataFraction) {
    PointPatches out;
    for (const auto& pt : points) {
        const auto px = world_to_pixel(raster.geotransform(), pt.x, pt.y);
        if (!raster.in_bounds(px.row, px.col)) {
            out.skipped.push_back({pt.id, "outside raster"});
            continue;
        }
        if (!raster.pixel_valid(static_cast<std::size_t>(px.row), static_cast<std::size_t>(px.col))) {
            out.skipped.push_back({pt.id, "nodata centre pixel"});
            continue;
        }
        auto patch = extract_patch(raster, px.row, px.col, size);
        if (patch.nodata_fraction > max_nodata_fraction) {
            out.skipped.push_back({pt.id, "nodata fraction " + std::to_string(patch.nodata_fraction)});
            continue;
        }
        patch.center_class = taxonomy.index(pt.class_code);
        patch.source_point = pt.id;
        out.patches.push_back(std::move(patch));
    }
    return out;
}

// Patch archive "PTCH" v1, little-endian:
//   magic[4] version:u16 n_patches:u32 channels:u32 size:u32
//   per patch: id:str16 class:i32 (-1 unlabeled) nodata_fraction:f32
//   values:f32[channels*size*size]

inline constexpr std::uint16_t kPatchArchiveVersion = 1;

inline void write_patch_archive(std::ostream& out, const std::vector<Patch>& patches) {
    const std::size_t channels = patches.empty() ? 0 : patches.front().channels;
    const std::size_t size = patches.empty() ? 0 : patches.front().size;
    io::put_magic(out, "PTCH");
    io::put_u16(out, kPatchArchiveVersion);
    io::put_u32(out, static_cast<std::uint32_t>(patches.size()));
    io::put_u32(out, static_cast<std::uint32_t>(channels));
    io::put_u32(out, static_cast<std::uint32_t>(size));
    for (const auto& p : patches) {
        if (p.channels != channels || p.size != size) throw DataError("patch archive: patches differ in shape");
        io::put_string16(out, p.source_point.value_or(""));
        io::put_u32(out, static_cast<std::uint32_t>(static_cast<std::int32_t>(p.center_class.value_or(-1))));
        io::put_f32(out, static_cast<float>(p.nodata_fraction));
        for (float v : p.values) io::put_f32(out, v);
    }
}

inline std::vector<Patch> read_patch_archive(std::istream& in) {
    io::expect_magic(in, "PTCH");
    if (io::get_u16(in) != kPatchArchiveVersion) throw DataError("unsupported patch archive version");
    const auto n = io::get_u32(in);
    const auto channels = io::get_u32(in);
    const auto size = io::get_u32(in);
    std::vector<Patch> out;
    out.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        Patch p;
        p.channels = channels;
        p.size = size;
        p.source_point = io::get_string16(in);
        const auto cls = static_cast<std::int32_t>(io::get_u32(in));
        if (cls >= 0) p.center_class = cls;
        p.nodata_fraction = io::get_f32(in);
        p.values.resize(static_cast<std::size_t>(channels) * size * size);
        for (auto& v : p.values) v = io::get_f32(in);
        out.push_back(std::move(p));
    }
    return out;
}

inline void write_patch_archive(const std::filesystem::path& path, const std::vector<Patch>& patches) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write patch archive: " + path.string());
    write_patch_archive(out, patches);
}

inline std::vector<Patch> read_patch_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open patch archive: " + path.string());
    return read_patch_archive(in);
}

/// Patches whose source id is in `ids`, in the order of `ids`.
inline std::vector<Patch> select_patches(const std::vector<Patch>& patches, const std::vector<std::string>& ids) {
    std::unordered_map<std::string, const Patch*> by_id;
    for (const auto& p : patches) by_id.emplace(p.source_point.value_or(""), &p);
    std::vector<Patch> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it != by_id.end()) out.push_back(*it->second);
    }
    return out;
}

} // namespace habmap
