#pragma once

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "habmap/dataset.hpp"
#include "habmap/error.hpp"
#include "habmap/forest.hpp"
#include "habmap/hash.hpp"
#include "habmap/inference.hpp"
#include "habmap/metrics.hpp"
#include "habmap/nnet/train.hpp"
#include "habmap/raster.hpp"
#include "habmap/ssl.hpp"
#include "habmap/synth.hpp"

namespace habmap::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";
/// Only consulted for the default config file path.
inline constexpr const char* kConfigEnvVar = "HABMAP_CONFIG";

// --- settings ----------------------------------------------------------------------

struct SettingSpec {
    const char* key;
    const char* value;
    const char* help;
};

inline const std::vector<SettingSpec>& setting_specs() {
    static const std::vector<SettingSpec> specs = {
        {"seed", "0", "root seed; stages and folds derive their own"},
        {"patch_size", "49", "side of archived patches, also used by the overlap-aware split"},
        {"input_size", "19", "network input side; larger patches are centre-cropped"},
        {"crop_min", "3", "smallest side drawn by random crop augmentation (largest is input_size)"},
        {"epochs", "500", "epochs for train-cnn and distill"},
        {"pretrain_epochs", "50", "epochs for pretrain"},
        {"batch_size", "128", ""},
        {"lr", "0.0001", "Adam learning rate"},
        {"widths", "32,64,128", "residual stage widths"},
        {"blocks_per_stage", "1", ""},
        {"tta_rounds", "5", "test-time augmentation rounds; 0 disables"},
        {"alpha", "0.5", "forest weight in the ensemble"},
        {"n_trees", "100", ""},
        {"folds", "5", "cross-validation folds; 1 makes a single random test split"},
        {"test_fraction", "0.2", "test share when folds = 1"},
        {"iic_clusters", "44", "IIC head size"},
        {"iic_restarts", "3", "independent IIC runs; the lowest final loss is kept"},
        {"max_nodata_fraction", "0.5", "patches with more missing pixels are skipped"},
        {"tile_size", "64", "map tile side; 0 = one tile"},
        {"stride", "1", "map output stride"},
        {"workers", "0", "threads; 0 = hardware concurrency"},
    };
    return specs;
}

class Settings {
public:
    Settings() {
        for (const auto& s : setting_specs()) values_[s.key] = s.value;
    }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) throw UsageError("unknown setting '" + key + "'");
        values_[key] = value;
    }

    /// "key=value"
    void apply(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos) throw UsageError("expected key=value, got '" + assignment + "'");
        set(detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
    }

    const std::string& raw(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw UsageError("unknown setting '" + key + "'");
        return it->second;
    }

    std::uint64_t u64(const std::string& key) const {
        const auto& v = raw(key);
        std::uint64_t out = 0;
        const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc{} || end != v.data() + v.size()) {
            throw UsageError("setting '" + key + "': expected a non-negative integer, got '" + v + "'");
        }
        return out;
    }
    std::size_t count(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

    double real(const std::string& key) const {
        const auto& v = raw(key);
        const auto parsed = detail::parse_double(v);
        if (!parsed) throw UsageError("setting '" + key + "': expected a number, got '" + v + "'");
        return *parsed;
    }

    std::vector<std::size_t> list(const std::string& key) const {
        std::vector<std::size_t> out;
        for (const auto& cell : detail::split_csv(raw(key))) {
            Settings tmp;
            tmp.values_["seed"] = detail::trim(cell);
            try {
                out.push_back(tmp.count("seed"));
            } catch (const UsageError&) {
                throw UsageError("setting '" + key + "': expected comma-separated integers, got '" + raw(key) + "'");
            }
        }
        return out;
    }

    std::size_t workers() const {
        const auto w = count("workers");
        return w == 0 ? default_workers() : w;
    }

    json to_json() const {
        json j = json::object();
        for (const auto& [k, v] : values_) j[k] = v;
        return j;
    }

private:
    std::map<std::string, std::string> values_;
};

/// `key = value` lines; blank lines and '#' comments ignored.
inline void read_config(std::istream& in, Settings& settings, const std::string& source) {
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        if (detail::trim(line).empty()) continue;
        try {
            settings.apply(line);
        } catch (const UsageError& e) {
            throw UsageError(source + ":" + std::to_string(n) + ": " + e.what());
        }
    }
}

/// Defaults, then the config file (explicit path, else $HABMAP_CONFIG if
/// set), then `key=value` overrides in order.
inline Settings load_settings(const std::optional<fs::path>& explicit_path, const std::vector<std::string>& overrides) {
    Settings s;
    std::optional<fs::path> path = explicit_path;
    if (!path) {
        if (const char* env = std::getenv(kConfigEnvVar); env && *env) path = fs::path(env);
    }
    if (path) {
        std::ifstream in(*path);
        if (!in) throw UsageError("cannot open config file " + path->string());
        read_config(in, s, path->string());
    }
    for (const auto& o : overrides) s.apply(o);
    return s;
}

// --- Model attribute grid --------------------------------------------------------------

enum class Pretraining { none, unsupervised, coarse };

inline const char* pretrain_mode_name(Pretraining p) {
    switch (p) {
        case Pretraining::unsupervised: return "iic";
        case Pretraining::coarse: return "coarse";
        case Pretraining::none: break;
    }
    return "none";
}

struct ModelAttributes {
    Pretraining pretraining = Pretraining::none;
    bool freeze_conv = false;
    bool crop_augment = false;
    bool semi_supervised = false;
};

/// Row name for an attribute combination: base / pt / upt / ns, then
/// "-crop", then "-no-freeze" for pretrained models that train all layers.
inline std::string model_name(const ModelAttributes& a) {
    std::string name;
    if (a.semi_supervised) {
        name = "ns";
        if (a.pretraining == Pretraining::none) name += "-base";
        if (a.pretraining == Pretraining::unsupervised) name += "-upt";
    } else {
        name = a.pretraining == Pretraining::none ? "base" : a.pretraining == Pretraining::coarse ? "pt" : "upt";
    }
    if (a.crop_augment) name += "-crop";
    if (a.pretraining != Pretraining::none && !a.freeze_conv) name += "-no-freeze";
    return name;
}

/// The eleven CNN rows; the forest baseline is the separate row "rf".
inline const std::vector<ModelAttributes>& grid_rows() {
    using P = Pretraining;
    static const std::vector<ModelAttributes> rows = {
        {P::none, false, false, false},  {P::none, false, true, false},  {P::coarse, true, false, true},
        {P::coarse, true, true, true},   {P::coarse, false, true, true}, {P::coarse, false, false, true},
        {P::coarse, true, false, false}, {P::coarse, true, true, false}, {P::coarse, false, true, false},
        {P::coarse, false, false, false}, {P::unsupervised, true, false, false},
    };
    return rows;
}

inline std::vector<std::string> pipeline_row_names() {
    std::vector<std::string> names;
    for (const auto& r : grid_rows()) names.push_back(model_name(r));
    names.push_back("rf");
    return names;
}

inline std::optional<ModelAttributes> find_grid_row(const std::string& name) {
    for (const auto& r : grid_rows()) {
        if (model_name(r) == name) return r;
    }
    return std::nullopt;
}

// --- run context and manifest --------------------------------------------------------

struct Context {
    fs::path dir = ".";
    Settings settings;
    bool force = false;
    std::vector<std::string> argv;
    std::ostream* log = &std::cout;
};

inline fs::path manifest_path(const fs::path& dir) { return dir / "manifest.json"; }

/// One command's record: what it read, what it wrote (with hashes), the
/// settings in force and the wall time. Appended to manifest.json in the
/// working directory when the command succeeds.
class Stage {
public:
    Stage(const Context& ctx, std::string name)
        : ctx_(ctx), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}

    /// Artifact of an earlier stage; missing ones name the stage to run.
    fs::path need(const fs::path& rel, const std::string& producer) {
        const auto p = ctx_.dir / rel;
        if (!fs::exists(p)) {
            throw UsageError(name_ + ": missing " + rel.generic_string() + "; run `habmap " + producer + "` first");
        }
        inputs_[rel.generic_string()] = hash_file(p);
        return p;
    }

    /// User-supplied input file outside the stage graph.
    fs::path external(const fs::path& p) {
        if (!fs::exists(p)) throw DataError(name_ + ": input not found: " + p.string());
        inputs_[p.string()] = hash_file(p);
        return p;
    }

    /// Output path; existing artifacts are kept unless --force.
    fs::path produce(const fs::path& rel) {
        const auto p = ctx_.dir / rel;
        if (fs::exists(p) && !ctx_.force) {
            throw UsageError(name_ + ": " + rel.generic_string() + " already exists; pass --force to overwrite");
        }
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        outputs_.push_back(rel);
        return p;
    }

    void note(const std::string& key, json value) { notes_[key] = std::move(value); }

    json finish() {
        json rec;
        rec["stage"] = name_;
        rec["tool_version"] = kToolVersion;
        rec["argv"] = ctx_.argv;
        rec["settings"] = ctx_.settings.to_json();
        rec["inputs"] = inputs_;
        json outs = json::object();
        for (const auto& rel : outputs_) outs[rel.generic_string()] = hash_file(ctx_.dir / rel);
        rec["outputs"] = outs;
        if (!notes_.empty()) rec["details"] = notes_;
        rec["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();

        const auto path = manifest_path(ctx_.dir);
        json manifest = {{"tool", "habmap"}, {"runs", json::array()}};
        if (fs::exists(path)) {
            std::ifstream in(path);
            try {
                manifest = json::parse(in);
            } catch (const json::exception& e) {
                throw DataError("corrupt manifest " + path.string() + ": " + e.what());
            }
        }
        manifest["runs"].push_back(rec);
        std::ofstream out(path);
        if (!out) throw DataError("cannot write " + path.string());
        out << manifest.dump(2) << '\n';
        return rec;
    }

private:
    const Context& ctx_;
    std::string name_;
    std::chrono::steady_clock::time_point start_;
    json inputs_ = json::object();
    std::vector<fs::path> outputs_;
    json notes_ = json::object();
};

// --- shared helpers -------------------------------------------------------------------

namespace files {
inline const fs::path stack{"stack.msrs"};
inline const fs::path raster_info{"raster.json"};
inline const fs::path taxonomy{"taxonomy.txt"};
inline const fs::path points{"points.csv"};
inline const fs::path patches{"patches.bin"};
inline const fs::path skipped{"skipped.csv"};
inline const fs::path coarse_taxonomy{"coarse_taxonomy.txt"};
inline const fs::path coarse_patches{"coarse_patches.bin"};
inline fs::path fold(std::size_t i) { return fs::path("splits") / ("fold_" + std::to_string(i) + ".txt"); }
inline fs::path forest(std::size_t i) { return fs::path("models") / ("rf_fold" + std::to_string(i) + ".rfor"); }
inline fs::path pretrained(Pretraining p) {
    return fs::path("models") / (std::string("pretrain_") + pretrain_mode_name(p) + ".nnet");
}
inline fs::path network(const std::string& name, std::size_t i) {
    return fs::path("models") / (name + "_fold" + std::to_string(i) + ".nnet");
}
inline fs::path pseudo(const std::string& name, std::size_t i) {
    return fs::path("models") / (name + "_fold" + std::to_string(i) + ".pslb");
}
inline fs::path report_dir(const std::string& name) { return fs::path("reports") / name; }
inline fs::path map_dir(const std::string& model, std::size_t fold) {
    return fs::path("maps") / (model + "_fold" + std::to_string(fold));
}
} // namespace files

// Seed streams, combined with the root or fold seed through derive_seed.
enum SeedStream : std::uint64_t {
    kSeedNetInit = 1,
    kSeedTraining = 2,
    kSeedForest = 3,
    kSeedEvalTta = 4,
    kSeedPseudo = 5,
    kSeedMap = 6,
    kSeedPretrainInit = 11,
    kSeedPretrainTraining = 12,
};


inline std::vector<SplitResult> load_folds(Stage& st) {
    std::vector<SplitResult> folds;
    folds.push_back(read_split(st.need(files::fold(0), "split")));
    for (std::size_t i = 1; i < folds.front().fold_count; ++i) folds.push_back(read_split(st.need(files::fold(i), "split")));
    return folds;
}

inline nnet::NetworkConfig network_config(const Settings& s, std::size_t channels, std::size_t classes) {
    nnet::NetworkConfig c;
    c.in_channels = channels;
    c.stage_widths = s.list("widths");
    c.blocks_per_stage = s.count("blocks_per_stage");
    c.n_classes = classes;
    c.validate();
    return c;
}

inline nnet::TrainConfig train_config(const Settings& s, std::size_t epochs, std::uint64_t seed, bool freeze,
                                      bool crop) {
    nnet::TrainConfig c;
    c.epochs = epochs;
    c.batch_size = s.count("batch_size");
    c.lr = s.real("lr");
    c.augment = nnet::AugmentOps::flips_and_blur();
    c.augment.crop_min = s.count("crop_min");
    c.augment.crop_max = s.count("input_size");
    c.crop_augment = crop;
    c.freeze_conv = freeze;
    c.seed = seed;
    c.input_size = s.count("input_size");
    c.validate();
    return c;
}

/// TTA rounds and ops from the setting; 0 rounds means one plain pass.
inline std::pair<std::size_t, nnet::AugmentOps> tta_setup(const Settings& s) {
    const auto rounds = s.count("tta_rounds");
    if (rounds == 0) return {1, nnet::AugmentOps{}};
    return {rounds, nnet::AugmentOps::flips_and_blur()};
}

inline RasterStack load_standardized_stack(Stage& st) {
    const auto raw = read_raster(st.need(files::stack, "ingest"));
    std::ifstream in(st.need(files::raster_info, "ingest"));
    ChannelStats stats;
    try {
        const auto info = json::parse(in);
        stats.mean = info.at("mean").get<std::vector<double>>();
        stats.stddev = info.at("stddev").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw DataError(std::string("raster.json: ") + e.what());
    }
    return standardize(raw, stats);
}

inline std::vector<Patch> labeled_patches(const fs::path& path) {
    auto patches = read_patch_archive(path);
    for (const auto& p : patches) {
        if (!p.center_class) throw DataError(path.string() + ": patch without a class label");
    }
    return patches;
}

inline void every_epoch(std::ostream& log, const std::string& what, std::size_t epoch, std::size_t total, double loss) {
    const auto step = std::max<std::size_t>(1, total / 10);
    if (epoch % step == 0 || epoch == total) {
        log << "  " << what << " epoch " << epoch << "/" << total << " loss " << loss << '\n';
    }
}

inline void save_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

inline void save_json(const fs::path& path, const json& j) { save_text(path, j.dump(2) + "\n"); }

// --- commands -------------------------------------------------------------------------

inline void cmd_synth(const Context& ctx, const synth::BenchmarkConfig& cfg) {
    Stage st(ctx, "synth");
    const auto raster = st.produce("raster.msrs");
    const auto annotations = st.produce("annotations.csv");
    const auto taxonomy = st.produce("synthetic.txt");
    const auto coarse_ann = st.produce("coarse_annotations.csv");
    const auto coarse_tax = st.produce("synthetic_coarse.txt");
    const auto info = st.produce("benchmark.json");
    const auto bm = synth::make_benchmark(cfg);
    write_raster(raster, bm.raster);
    write_annotations(annotations, bm.points);
    write_taxonomy(taxonomy, bm.taxonomy);
    write_annotations(coarse_ann, bm.coarse_points);
    write_taxonomy(coarse_tax, bm.coarse_taxonomy);
    json j;
    j["n_classes"] = cfg.n_classes;
    j["channels"] = cfg.channels;
    j["max_count"] = cfg.max_count;
    j["imbalance"] = cfg.imbalance;
    j["patch_size"] = cfg.patch_size;
    j["pixel_size"] = cfg.pixel_size;
    j["coarse_points"] = cfg.coarse_points;
    j["noise"] = cfg.noise;
    j["seed"] = cfg.seed;
    j["class_counts"] = bm.class_counts;
    j["coarse_of"] = bm.coarse_of;
    j["context_pair"] = {bm.taxonomy.code(0), bm.taxonomy.code(1)};
    save_json(info, j);
    st.finish();
    *ctx.log << "synth: " << bm.raster.channels() << "x" << bm.raster.height() << "x" << bm.raster.width()
             << " raster, " << bm.points.size() << " points in " << cfg.n_classes << " classes, "
             << bm.coarse_points.size() << " coarse points\n";
}

struct IngestInputs {
    std::vector<fs::path> rasters;
    fs::path annotations;
    std::string taxonomy;
    std::optional<fs::path> coarse_annotations;
    std::optional<fs::path> coarse_taxonomy;
};

inline RasterStack read_any_raster(const fs::path& p) {
    if (p.extension() == ".msrs") return read_raster(p);
    return import_text_matrix(p);
}

inline void cmd_ingest(const Context& ctx, const IngestInputs& in) {
    if (in.rasters.empty()) throw UsageError("ingest: at least one --raster is required");
    if (in.coarse_annotations.has_value() != in.coarse_taxonomy.has_value()) {
        throw UsageError("ingest: --coarse-annotations and --coarse-taxonomy go together");
    }
    const auto& s = ctx.settings;
    const auto patch_size = s.count("patch_size");
    const auto max_nodata = s.real("max_nodata_fraction");
    Stage st(ctx, "ingest");

    std::vector<RasterStack> parts;
    for (const auto& r : in.rasters) parts.push_back(read_any_raster(st.external(r)));
    const auto stacked = stack_channels(parts);
    const auto stats = compute_channel_stats(stacked);
    const auto standardized = standardize(stacked, stats);

    Taxonomy taxonomy = in.taxonomy == "natura2000" ? natura2000_taxonomy() : load_taxonomy(st.external(in.taxonomy));
    const auto ann = load_annotations(st.external(in.annotations), taxonomy);

    const auto stack_path = st.produce(files::stack);
    const auto info_path = st.produce(files::raster_info);
    const auto tax_path = st.produce(files::taxonomy);
    const auto points_path = st.produce(files::points);
    const auto patches_path = st.produce(files::patches);
    const auto skipped_path = st.produce(files::skipped);
    std::optional<fs::path> coarse_tax_path, coarse_patches_path;
    if (in.coarse_annotations) {
        coarse_tax_path = st.produce(files::coarse_taxonomy);
        coarse_patches_path = st.produce(files::coarse_patches);
    }

    // Raw samples keep the nodata sentinel; consumers re-standardize with
    // the stats stored in raster.json.
    write_raster(stack_path, stacked);
    const auto& gt = standardized.geotransform();
    json info;
    info["channels"] = standardized.channels();
    info["height"] = standardized.height();
    info["width"] = standardized.width();
    info["pixel_size"] = gt.pixel_size_x;
    info["channel_names"] = standardized.channel_names();
    info["mean"] = stats.mean;
    info["stddev"] = stats.stddev;
    save_json(info_path, info);
    write_taxonomy(tax_path, taxonomy);

    const auto pp = extract_point_patches(standardized, ann.points, taxonomy, patch_size, max_nodata);
    std::vector<AnnotationPoint> kept;
    {
        std::unordered_set<std::string> have;
        for (const auto& p : pp.patches) have.insert(*p.source_point);
        for (const auto& p : ann.points) {
            if (have.count(p.id)) kept.push_back(p);
        }
    }
    write_annotations(points_path, kept);
    write_patch_archive(patches_path, pp.patches);

    std::ofstream skip(skipped_path);
    skip << "source,item,reason\n";
    for (const auto& r : ann.rejections) skip << "annotations,data row " << r.row << ',' << r.reason << '\n';
    for (const auto& r : pp.skipped) skip << "annotations," << r.id << ',' << r.reason << '\n';
    std::size_t coarse_count = 0;
    if (in.coarse_annotations) {
        const auto coarse_tax = load_taxonomy(st.external(*in.coarse_taxonomy));
        const auto coarse_ann = load_annotations(st.external(*in.coarse_annotations), coarse_tax);
        const auto cp = extract_point_patches(standardized, coarse_ann.points, coarse_tax, patch_size, max_nodata);
        for (const auto& r : coarse_ann.rejections) skip << "coarse,data row " << r.row << ',' << r.reason << '\n';
        for (const auto& r : cp.skipped) skip << "coarse," << r.id << ',' << r.reason << '\n';
        write_taxonomy(*coarse_tax_path, coarse_tax);
        write_patch_archive(*coarse_patches_path, cp.patches);
        coarse_count = cp.patches.size();
    }
    skip.close();
    st.note("patches", pp.patches.size());
    st.note("skipped", pp.skipped.size() + ann.rejections.size());
    st.finish();
    *ctx.log << "ingest: " << pp.patches.size() << " patches of (" << standardized.channels() << ", " << patch_size
             << ", " << patch_size << "); " << pp.skipped.size() + ann.rejections.size()
             << " annotations skipped (see skipped.csv)";
    if (in.coarse_annotations) *ctx.log << "; " << coarse_count << " coarse patches";
    *ctx.log << '\n';
}

inline void cmd_split(const Context& ctx) {
    const auto& s = ctx.settings;
    Stage st(ctx, "split");
    const auto taxonomy = load_taxonomy(st.need(files::taxonomy, "ingest"));
    const auto points = load_annotations(st.need(files::points, "ingest"), taxonomy).points;
    std::ifstream info_in(st.need(files::raster_info, "ingest"));
    const double pixel_size = json::parse(info_in).at("pixel_size").get<double>();
    const auto k = s.count("folds");
    if (k == 0) throw UsageError("folds must be >= 1");
    std::vector<SplitResult> folds;
    if (k == 1) {
        folds.push_back(random_test_split(points, s.real("test_fraction"), s.count("patch_size"), pixel_size, s.u64("seed")));
    } else {
        folds = kfold_split(points, k, s.count("patch_size"), pixel_size, s.u64("seed"));
    }
    std::vector<fs::path> paths;
    for (std::size_t i = 0; i < folds.size(); ++i) paths.push_back(st.produce(files::fold(i)));
    for (std::size_t i = 0; i < folds.size(); ++i) {
        write_split(paths[i], folds[i]);
        *ctx.log << "split: fold " << i << " train " << folds[i].train_ids.size() << " test " << folds[i].test_ids.size()
                 << " dropped " << folds[i].dropped_ids.size() << '\n';
    }
    st.finish();
}

inline forest::TrainingSet pixel_training_set(const std::vector<Patch>& patches, std::size_t n_classes) {
    if (patches.empty()) throw DataError("no training patches");
    forest::TrainingSet t;
    t.n_features = patches.front().channels;
    t.n_classes = n_classes;
    for (const auto& p : patches) t.add(inference::pixel_features(p), *p.center_class);
    return t;
}

inline void cmd_train_rf(const Context& ctx) {
    const auto& s = ctx.settings;
    Stage st(ctx, "train-rf");
    const auto taxonomy = load_taxonomy(st.need(files::taxonomy, "ingest"));
    const auto patches = labeled_patches(st.need(files::patches, "ingest"));
    const auto folds = load_folds(st);
    std::vector<fs::path> outs;
    for (std::size_t i = 0; i < folds.size(); ++i) outs.push_back(st.produce(files::forest(i)));
    for (std::size_t i = 0; i < folds.size(); ++i) {
        const auto train = select_patches(patches, folds[i].train_ids);
        forest::ForestParams fp;
        fp.n_trees = s.count("n_trees");
        fp.seed = derive_seed(folds[i].fold_seed, kSeedForest);
        const auto model = forest::fit_forest(pixel_training_set(train, taxonomy.size()), fp);
        forest::write_forest(outs[i], model);
        *ctx.log << "train-rf: fold " << i << " " << fp.n_trees << " trees on " << train.size() << " pixels\n";
    }
    st.finish();
}

inline void cmd_pretrain(const Context& ctx, Pretraining mode) {
    if (mode == Pretraining::none) throw UsageError("pretrain: --mode must be iic or coarse");
    const auto& s = ctx.settings;
    Stage st(ctx, std::string("pretrain-") + pretrain_mode_name(mode));
    const auto corpus = labeled_patches(st.need(files::coarse_patches, "ingest --coarse-annotations ... --coarse-taxonomy ..."));
    if (corpus.empty()) throw DataError("pretrain: coarse corpus is empty");
    const auto out = st.produce(files::pretrained(mode));
    const auto channels = corpus.front().channels;
    const auto epochs = s.count("pretrain_epochs");
    const auto root = s.u64("seed");
    if (mode == Pretraining::coarse) {
        const auto coarse = load_taxonomy(st.need(files::coarse_taxonomy, "ingest"));
        nnet::Network<float> net(network_config(s, channels, coarse.size()), derive_seed(root, kSeedPretrainInit));
        const auto tc = train_config(s, epochs, derive_seed(root, kSeedPretrainTraining), false, false);
        nnet::train<float>(net, corpus, {}, tc, [&](const nnet::EpochLog& e) {
            every_epoch(*ctx.log, "pretrain coarse", e.epoch, epochs, e.train_loss);
        });
        nnet::save_network(out, net);
    } else {
        const auto clusters = s.count("iic_clusters");
        nnet::Network<float> net(network_config(s, channels, clusters), derive_seed(root, kSeedPretrainInit));
        ssl::IicConfig ic;
        ic.n_clusters = clusters;
        ic.epochs = epochs;
        ic.batch_size = s.count("batch_size");
        ic.lr = s.real("lr");
        ic.input_size = s.count("input_size");
        ic.seed = derive_seed(root, kSeedPretrainTraining);
        ic.restarts = s.count("iic_restarts");
        const auto unlabeled = ssl::strip_labels(corpus);
        std::size_t run = 0;
        const auto log = ssl::iic_pretrain(net, std::span<const ssl::UnlabeledPatch>(unlabeled), ic,
                                           [&](std::size_t e, double loss) {
                                               if (e == 1) ++run;
                                               every_epoch(*ctx.log, "pretrain iic run " + std::to_string(run), e, epochs, loss);
                                           });
        st.note("final_loss", log.back());
        nnet::save_network(out, net);
    }
    st.finish();
    *ctx.log << "pretrain: wrote " << files::pretrained(mode).generic_string() << '\n';
}

inline nnet::Network<float> initial_network(const Context& ctx, Stage& st, Pretraining init, bool freeze,
                                            std::size_t channels, std::size_t classes, std::uint64_t seed) {
    if (init == Pretraining::none) {
        if (freeze) throw UsageError("--freeze-conv needs a pretrained model (--init coarse or iic)");
        return nnet::Network<float>(network_config(ctx.settings, channels, classes), seed);
    }
    const auto pre = nnet::load_network<float>(
        st.need(files::pretrained(init), std::string("pretrain --mode ") + pretrain_mode_name(init)));
    if (pre.config().in_channels != channels) throw DataError("pretrained network channel count != patch channels");
    return nnet::transfer(pre, classes, freeze, seed);
}

struct CnnOptions {
    Pretraining init = Pretraining::none;
    bool freeze_conv = false;
    bool crop_augment = false;
    std::string name; // empty: derived from the attributes
};

inline std::string cnn_name(const CnnOptions& o, bool semi_supervised) {
    if (!o.name.empty()) return o.name;
    return model_name({o.init, o.freeze_conv, o.crop_augment, semi_supervised});
}

inline std::string cmd_train_cnn(const Context& ctx, const CnnOptions& o) {
    const auto& s = ctx.settings;
    const auto name = cnn_name(o, false);
    if (name == "rf") throw UsageError("model name 'rf' is reserved for the forest");
    Stage st(ctx, "train-cnn");
    st.note("model", name);
    const auto taxonomy = load_taxonomy(st.need(files::taxonomy, "ingest"));
    const auto patches = labeled_patches(st.need(files::patches, "ingest"));
    const auto folds = load_folds(st);
    std::vector<fs::path> outs;
    for (std::size_t i = 0; i < folds.size(); ++i) outs.push_back(st.produce(files::network(name, i)));
    const auto epochs = s.count("epochs");
    for (std::size_t i = 0; i < folds.size(); ++i) {
        const auto train = select_patches(patches, folds[i].train_ids);
        if (train.empty()) throw DataError("fold " + std::to_string(i) + " has no training patches");
        auto net = initial_network(ctx, st, o.init, o.freeze_conv, train.front().channels, taxonomy.size(),
                                   derive_seed(folds[i].fold_seed, kSeedNetInit));
        const auto tc = train_config(s, epochs, derive_seed(folds[i].fold_seed, kSeedTraining), o.freeze_conv, o.crop_augment);
        nnet::train<float>(net, train, {}, tc, [&](const nnet::EpochLog& e) {
            every_epoch(*ctx.log, name + " fold " + std::to_string(i), e.epoch, epochs, e.train_loss);
        });
        nnet::save_network(outs[i], net);
    }
    st.finish();
    *ctx.log << "train-cnn: " << name << " trained on " << folds.size() << " fold(s)\n";
    return name;
}

inline std::string cmd_distill(const Context& ctx, const std::string& teacher, const CnnOptions& o) {
    const auto& s = ctx.settings;
    const auto name = cnn_name(o, true);
    if (name == teacher) throw UsageError("distill: student name equals the teacher's");
    Stage st(ctx, "distill");
    st.note("model", name);
    st.note("teacher", teacher);
    const auto taxonomy = load_taxonomy(st.need(files::taxonomy, "ingest"));
    const auto patches = labeled_patches(st.need(files::patches, "ingest"));
    const auto unlabeled = ssl::strip_labels(
        read_patch_archive(st.need(files::coarse_patches, "ingest --coarse-annotations ... --coarse-taxonomy ...")));
    const auto folds = load_folds(st);
    std::vector<nnet::Network<float>> teachers;
    for (std::size_t i = 0; i < folds.size(); ++i) {
        teachers.push_back(nnet::load_network<float>(st.need(files::network(teacher, i), "train-cnn (model " + teacher + ")")));
    }
    std::vector<fs::path> nets, pseudos;
    for (std::size_t i = 0; i < folds.size(); ++i) {
        pseudos.push_back(st.produce(files::pseudo(name, i)));
        nets.push_back(st.produce(files::network(name, i)));
    }
    const auto epochs = s.count("epochs");
    const auto [rounds, ops] = tta_setup(s);
    for (std::size_t i = 0; i < folds.size(); ++i) {
        const auto labeled = select_patches(patches, folds[i].train_ids);
        if (labeled.empty()) throw DataError("fold " + std::to_string(i) + " has no training patches");
        if (teachers[i].config().n_classes != taxonomy.size()) throw DataError("teacher class count != taxonomy size");
        const auto pseudo = ssl::pseudo_label(teachers[i], std::span<const ssl::UnlabeledPatch>(unlabeled),
                                              s.count("input_size"), rounds == 1 && !ops.hflip ? 0 : rounds, ops,
                                              derive_seed(folds[i].fold_seed, kSeedPseudo));
        ssl::write_pseudo_labels(pseudos[i], pseudo);
        auto student = initial_network(ctx, st, o.init, o.freeze_conv, labeled.front().channels, taxonomy.size(),
                                       derive_seed(folds[i].fold_seed, kSeedNetInit));
        const auto tc = train_config(s, epochs, derive_seed(folds[i].fold_seed, kSeedTraining), o.freeze_conv, o.crop_augment);
        ssl::noisy_student_train(student, std::span<const Patch>(labeled), std::span<const ssl::UnlabeledPatch>(unlabeled),
                                 pseudo, {}, tc, [&](const nnet::EpochLog& e) {
                                     every_epoch(*ctx.log, name + " fold " + std::to_string(i), e.epoch, epochs, e.train_loss);
                                 });
        nnet::save_network(nets[i], student);
    }
    st.finish();
    *ctx.log << "distill: " << name << " from teacher " << teacher << " with " << unlabeled.size()
             << " pseudo-labeled patches\n";
    return name;
}

struct EvaluateOptions {
    std::vector<std::string> models; // "rf" and/or network names
    std::string name = "eval";
};

/// Scalar summary columns of the comparison table.
inline const std::vector<std::pair<std::string, std::string>>& comparison_columns() {
    static const std::vector<std::pair<std::string, std::string>> cols = {
        {"f1_weighted", "F1 weighted"},
        {"precision_weighted", "Prec. weighted"},
        {"recall_weighted", "Rec. weighted/Acc"},
        {"top3_accuracy", "Top 3 Acc"},
    };
    return cols;
}

inline metrics::FoldAggregate aggregate_reports(const std::vector<metrics::MetricsReport>& reports) {
    if (reports.size() >= 2) return metrics::crossfold_aggregate(reports);
    metrics::FoldAggregate a;
    a.folds = 1;
    for (const auto& [k, v] : reports.front().scalars()) {
        a.mean[k] = v;
        a.stddev[k] = 0.0;
    }
    return a;
}

inline void cmd_evaluate(const Context& ctx, const EvaluateOptions& o) {
    if (o.models.empty()) throw UsageError("evaluate: name at least one model (--models rf,pt,...)");
    const auto& s = ctx.settings;
    const double alpha = s.real("alpha");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw UsageError("alpha must lie in [0, 1]");
    const auto [rounds, ops] = tta_setup(s);
    const auto input = s.count("input_size");
    Stage st(ctx, "evaluate");
    const auto taxonomy = load_taxonomy(st.need(files::taxonomy, "ingest"));
    const auto patches = labeled_patches(st.need(files::patches, "ingest"));
    const auto folds = load_folds(st);

    std::vector<std::string> nets;
    for (const auto& m : o.models) {
        if (m != "rf") nets.push_back(m);
    }
    // Rows: the forest, each network alone, each network ensembled with the forest.
    std::vector<std::string> rows{"rf"};
    for (const auto& m : nets) rows.push_back(m);
    for (const auto& m : nets) rows.push_back(m + "+rf");
    std::map<std::string, std::vector<metrics::MetricsReport>> reports;

    for (std::size_t i = 0; i < folds.size(); ++i) {
        const auto test = select_patches(patches, folds[i].test_ids);
        if (test.empty()) throw DataError("fold " + std::to_string(i) + " has no test patches");
        const auto truth = nnet::labels_of(test);
        const auto rf = forest::read_forest(st.need(files::forest(i), "train-rf"));
        const auto rf_scores = inference::forest_scores(rf, test, s.workers());
        reports["rf"].push_back(metrics::evaluate(rf_scores, truth));
        for (const auto& m : nets) {
            const auto net = nnet::load_network<float>(st.need(files::network(m, i), "train-cnn or distill (model " + m + ")"));
            std::vector<std::uint64_t> seeds(test.size());
            for (std::size_t j = 0; j < seeds.size(); ++j) seeds[j] = derive_seed(derive_seed(folds[i].fold_seed, kSeedEvalTta), j);
            const auto cnn = inference::tta_predict_batch(net, std::span<const Patch>(test), input, rounds, ops, seeds);
            reports[m].push_back(metrics::evaluate(cnn, truth));
            reports[m + "+rf"].push_back(metrics::evaluate(inference::combine(rf_scores, cnn, alpha), truth));
        }
    }

    const auto dir = files::report_dir(o.name);
    std::vector<std::pair<fs::path, std::string>> texts;
    std::vector<metrics::SvgSeries> pr;
    std::ostringstream csv, md;
    csv << "model";
    md << "| Model |";
    for (const auto& [key, label] : comparison_columns()) {
        csv << ',' << key << "_mean," << key << "_std";
        md << ' ' << label << " |";
    }
    csv << '\n';
    md << "\n|---|";
    for (std::size_t c = 0; c < comparison_columns().size(); ++c) md << "---|";
    md << '\n';
    csv.precision(6);
    md << std::fixed << std::setprecision(3);
    for (const auto& row : rows) {
        const auto& rs = reports.at(row);
        for (std::size_t i = 0; i < rs.size(); ++i) {
            const auto base = dir / row / ("fold" + std::to_string(i));
            texts.emplace_back(base.string() + ".json", metrics::to_json(rs[i], taxonomy.codes()).dump(2) + "\n");
            texts.emplace_back(base.string() + "_confusion.svg", metrics::render_confusion_svg(rs[i].confusion, taxonomy.codes()));
        }
        const auto agg = aggregate_reports(rs);
        texts.emplace_back((dir / row / "aggregate.json").string(), metrics::to_json(agg).dump(2) + "\n");
        metrics::SvgSeries series{row, rs.front().pr_macro.grid, std::vector<double>(rs.front().pr_macro.grid.size(), 0.0)};
        for (const auto& r : rs) {
            for (std::size_t g = 0; g < series.y.size(); ++g) series.y[g] += r.pr_macro.values[g] / static_cast<double>(rs.size());
        }
        pr.push_back(std::move(series));
        csv << row;
        md << "| " << row << " |";
        for (const auto& [key, label] : comparison_columns()) {
            if (agg.mean.count(key)) {
                csv << ',' << agg.mean.at(key) << ',' << agg.stddev.at(key);
                md << ' ' << agg.mean.at(key) << " ± " << agg.stddev.at(key) << " |";
            } else {
                csv << ",,";
                md << " n/a |";
            }
        }
        csv << '\n';
        md << '\n';
    }
    texts.emplace_back((dir / "comparison.csv").string(), csv.str());
    texts.emplace_back((dir / "comparison.md").string(), md.str());
    texts.emplace_back((dir / "pr_macro.svg").string(),
                       metrics::render_curves_svg("Macro precision-recall (fold mean)", "recall", "precision", pr));

    std::vector<fs::path> outs;
    for (const auto& [rel, text] : texts) {
        (void)text;
        outs.push_back(st.produce(fs::path(rel).lexically_relative(".")));
    }
    for (std::size_t i = 0; i < texts.size(); ++i) save_text(outs[i], texts[i].second);
    st.note("models", o.models);
    st.finish();
    *ctx.log << "evaluate: " << folds.size() << " fold(s), TTA rounds " << (ops.hflip ? rounds : 0) << ", alpha "
             << alpha << "\n" << md.str();
}

struct MapRequest {
    std::string model = "rf"; // "rf" or a network name
    std::size_t fold = 0;
    bool ensemble = true;
    std::vector<std::string> heatmaps; // class codes
};

inline void cmd_predict_map(const Context& ctx, const MapRequest& r) {
    const auto& s = ctx.settings;
    Stage st(ctx, "predict-map");
    const auto taxonomy = load_taxonomy(st.need(files::taxonomy, "ingest"));
    const auto raster = load_standardized_stack(st);
    std::optional<forest::RandomForestModel> rf;
    std::optional<nnet::Network<float>> net;
    if (r.model == "rf" || r.ensemble) rf = forest::read_forest(st.need(files::forest(r.fold), "train-rf"));
    if (r.model != "rf") {
        net = nnet::load_network<float>(st.need(files::network(r.model, r.fold), "train-cnn or distill (model " + r.model + ")"));
    }
    inference::MapModels models;
    models.rf = rf ? &*rf : nullptr;
    models.net = net ? &*net : nullptr;
    models.ensemble.alpha = s.real("alpha");
    std::tie(models.ensemble.tta_rounds, models.ensemble.tta_ops) = tta_setup(s);
    models.patch_size = s.count("input_size");
    inference::MapOptions mo;
    mo.stride = s.count("stride");
    mo.seed = derive_seed(s.u64("seed"), kSeedMap);
    mo.tile_size = s.count("tile_size");
    mo.workers = s.workers();

    std::vector<std::size_t> heat_idx;
    for (const auto& code : r.heatmaps) {
        const auto idx = taxonomy.find(code);
        if (!idx) throw UsageError("--heatmap: class code '" + code + "' is not in the taxonomy");
        heat_idx.push_back(static_cast<std::size_t>(*idx));
    }
    const auto label = (r.model == "rf" || !r.ensemble) ? r.model : r.model + "+rf";
    const auto dir = files::map_dir(label, r.fold);
    for (const auto* f : {"class_map.msrs", "probabilities.msrs", "confidence.msrs", "classes.txt"}) st.produce(dir / f);
    std::vector<fs::path> heat_paths;
    for (const auto& code : r.heatmaps) heat_paths.push_back(st.produce(dir / ("heatmap_" + code + ".msrs")));

    const auto maps = inference::classify_map(models, raster, mo);
    inference::write_maps(ctx.dir / dir, maps, taxonomy.codes());
    for (std::size_t i = 0; i < heat_idx.size(); ++i) write_raster(heat_paths[i], inference::class_heatmap(maps, heat_idx[i]));
    st.note("model", label);
    st.finish();
    *ctx.log << "predict-map: " << label << " fold " << r.fold << " -> " << dir.generic_string() << " ("
             << maps.class_map.height() << "x" << maps.class_map.width() << ")\n";
}

/// Chains the stages for one grid row (or "rf"), reusing artifacts
/// that already exist unless --force.
inline void cmd_pipeline(const Context& ctx, const std::string& row) {
    const bool is_rf = row == "rf";
    const auto attrs = find_grid_row(row);
    if (!is_rf && !attrs) {
        std::string names;
        for (const auto& n : pipeline_row_names()) names += (names.empty() ? "" : ", ") + n;
        throw UsageError("unknown model row '" + row + "'; choose one of: " + names);
    }
    auto have = [&](const fs::path& rel) { return !ctx.force && fs::exists(ctx.dir / rel); };
    if (!fs::exists(ctx.dir / files::patches)) throw UsageError("pipeline: missing patches.bin; run `habmap ingest` first");
    if (!have(files::fold(0))) cmd_split(ctx);
    if (!have(files::forest(0))) cmd_train_rf(ctx);
    EvaluateOptions eval;
    eval.name = "pipeline_" + row;
    eval.models = {"rf"};
    if (!is_rf) {
        const auto& a = *attrs;
        if (a.pretraining != Pretraining::none && !have(files::pretrained(a.pretraining))) cmd_pretrain(ctx, a.pretraining);
        CnnOptions o{a.pretraining, a.freeze_conv, a.crop_augment, ""};
        if (a.semi_supervised) {
            const auto teacher = model_name({a.pretraining, a.freeze_conv, a.crop_augment, false});
            if (!have(files::network(teacher, 0))) cmd_train_cnn(ctx, o);
            if (!have(files::network(row, 0))) cmd_distill(ctx, teacher, o);
        } else if (!have(files::network(row, 0))) {
            cmd_train_cnn(ctx, o);
        }
        eval.models.push_back(row);
    }
    cmd_evaluate(ctx, eval);
}

// --- entry point ------------------------------------------------------------------------

inline Pretraining parse_init(const std::string& v) {
    if (v == "none") return Pretraining::none;
    if (v == "coarse") return Pretraining::coarse;
    if (v == "iic") return Pretraining::unsupervised;
    throw UsageError("init must be none, coarse or iic");
}

/// Runs one command line; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"habmap: habitat classification from sparse point annotations"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", kToolVersion);
    std::string dir = ".";
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    bool force = false;
    app.add_option("-C,--dir", dir, "working directory holding the artifacts")->capture_default_str();
    app.add_option("--config", config_path, std::string("key=value config file (default: $") + kConfigEnvVar + ")");
    app.add_option("--set", overrides, "setting override key=value (repeatable)");
    app.add_option("--seed", seed, "root seed (same as --set seed=N)");
    app.add_flag("--force", force, "overwrite existing artifacts");

    auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic benchmark");
    synth::BenchmarkConfig bcfg;
    synth_cmd->add_option("--classes", bcfg.n_classes)->capture_default_str();
    synth_cmd->add_option("--channels", bcfg.channels)->capture_default_str();
    synth_cmd->add_option("--max-count", bcfg.max_count, "points of the most frequent classes")->capture_default_str();
    synth_cmd->add_option("--imbalance", bcfg.imbalance, "largest:smallest class ratio")->capture_default_str();
    synth_cmd->add_option("--tile-patch", bcfg.patch_size, "patch side the tiles are laid out for")->capture_default_str();
    synth_cmd->add_option("--pixel-size", bcfg.pixel_size)->capture_default_str();
    synth_cmd->add_option("--coarse-points", bcfg.coarse_points)->capture_default_str();
    synth_cmd->add_option("--noise", bcfg.noise)->capture_default_str();

    auto* ingest_cmd = app.add_subcommand("ingest", "standardize rasters and extract labeled patches");
    IngestInputs ing;
    std::string coarse_ann, coarse_tax;
    ingest_cmd->add_option("--raster", ing.rasters, "raster file(s), stacked in order (.msrs or text matrix)")->required();
    ingest_cmd->add_option("--annotations", ing.annotations, "id,x,y,class_code CSV")->required();
    ingest_cmd->add_option("--taxonomy", ing.taxonomy, "taxonomy file, or 'natura2000'")->required();
    ingest_cmd->add_option("--coarse-annotations", coarse_ann, "coarse-labeled points for pretraining");
    ingest_cmd->add_option("--coarse-taxonomy", coarse_tax);

    auto* split_cmd = app.add_subcommand("split", "overlap-aware k-fold (or single) train/test split");
    auto* rf_cmd = app.add_subcommand("train-rf", "train the pixel random forest per fold");

    auto* pre_cmd = app.add_subcommand("pretrain", "pretrain a network on the coarse corpus");
    std::string mode;
    pre_cmd->add_option("--mode", mode, "iic or coarse")->required()->check(CLI::IsMember({"iic", "coarse"}));

    CnnOptions cnn;
    std::string init = "none";
    auto* cnn_cmd = app.add_subcommand("train-cnn", "train the centre-pixel network per fold");
    cnn_cmd->add_option("--init", init, "none, coarse or iic")->capture_default_str();
    cnn_cmd->add_flag("--freeze-conv", cnn.freeze_conv, "train only the head");
    cnn_cmd->add_flag("--crop-augment", cnn.crop_augment, "random centre crop augmentation");
    cnn_cmd->add_option("--name", cnn.name, "model name (default from the attributes)");

    auto* ns_cmd = app.add_subcommand("distill", "Noisy Student training from a teacher model");
    std::string teacher;
    std::string ns_init = "coarse";
    ns_cmd->add_option("--teacher", teacher, "teacher model name")->required();
    ns_cmd->add_option("--init", ns_init, "student initialization: none, coarse or iic")->capture_default_str();
    ns_cmd->add_flag("--freeze-conv", cnn.freeze_conv);
    ns_cmd->add_flag("--crop-augment", cnn.crop_augment);
    ns_cmd->add_option("--name", cnn.name, "student name (default from the attributes)");

    auto* eval_cmd = app.add_subcommand("evaluate", "cross-fold metrics for the forest, networks and ensembles");
    EvaluateOptions eval;
    std::optional<std::size_t> tta;
    std::optional<double> alpha;
    eval_cmd->add_option("--models", eval.models, "rf and/or network names")->delimiter(',')->required();
    eval_cmd->add_option("--tta", tta, "test-time augmentation rounds (0 = off)");
    eval_cmd->add_option("--ensemble-alpha", alpha, "forest weight");
    eval_cmd->add_option("--name", eval.name, "report directory name")->capture_default_str();

    auto* map_cmd = app.add_subcommand("predict-map", "wall-to-wall class, probability and confidence maps");
    MapRequest mr;
    bool cnn_only = false;
    map_cmd->add_option("--model", mr.model, "rf or a network name")->capture_default_str();
    map_cmd->add_option("--fold", mr.fold, "which fold's models to use")->capture_default_str();
    map_cmd->add_flag("--cnn-only", cnn_only, "do not ensemble the network with the forest");
    map_cmd->add_option("--heatmap", mr.heatmaps, "also write this class's probability raster (repeatable)");
    map_cmd->add_option("--tta", tta, "test-time augmentation rounds (0 = off)");
    map_cmd->add_option("--ensemble-alpha", alpha, "forest weight");

    auto* pipe_cmd = app.add_subcommand("pipeline", "run every stage for one model row");
    std::string row;
    std::string rows_help = "one of:";
    for (const auto& n : pipeline_row_names()) rows_help += " " + n;
    pipe_cmd->add_option("--attributes", row, rows_help)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << kToolVersion << '\n';
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\nrun with --help for usage\n";
        return 1;
    }

    try {
        Context ctx;
        ctx.dir = dir;
        ctx.force = force;
        ctx.log = &out;
        for (int i = 0; i < argc; ++i) ctx.argv.emplace_back(argv[i]);
        ctx.settings = load_settings(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path), overrides);
        if (seed) ctx.settings.set("seed", std::to_string(*seed));
        if (tta) ctx.settings.set("tta_rounds", std::to_string(*tta));
        if (alpha) {
            std::ostringstream a;
            a << std::setprecision(17) << *alpha;
            ctx.settings.set("alpha", a.str());
        }
        fs::create_directories(ctx.dir);

        if (*synth_cmd) {
            bcfg.seed = ctx.settings.u64("seed");
            cmd_synth(ctx, bcfg);
        } else if (*ingest_cmd) {
            if (!coarse_ann.empty()) ing.coarse_annotations = coarse_ann;
            if (!coarse_tax.empty()) ing.coarse_taxonomy = coarse_tax;
            cmd_ingest(ctx, ing);
        } else if (*split_cmd) {
            cmd_split(ctx);
        } else if (*rf_cmd) {
            cmd_train_rf(ctx);
        } else if (*pre_cmd) {
            cmd_pretrain(ctx, parse_init(mode));
        } else if (*cnn_cmd) {
            cnn.init = parse_init(init);
            cmd_train_cnn(ctx, cnn);
        } else if (*ns_cmd) {
            cnn.init = parse_init(ns_init);
            cmd_distill(ctx, teacher, cnn);
        } else if (*eval_cmd) {
            cmd_evaluate(ctx, eval);
        } else if (*map_cmd) {
            mr.ensemble = !cnn_only && mr.model != "rf";
            cmd_predict_map(ctx, mr);
        } else if (*pipe_cmd) {
            cmd_pipeline(ctx, row);
        }
        return 0;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return 2;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "data error: " << e.what() << '\n';
        return 2;
    }
}

} // namespace habmap::cli
