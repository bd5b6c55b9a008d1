#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "habmap/binary_io.hpp"
#include "habmap/error.hpp"
#include "habmap/parallel.hpp"
#include "habmap/random.hpp"

namespace habmap::forest {

/// Row-major (n, d) matrix of per-pixel feature vectors with class labels.
struct TrainingSet {
    std::size_t n_features = 0;
    std::size_t n_classes = 0;
    std::vector<float> features;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::span<const float> row(std::size_t i) const {
        return std::span<const float>(features).subspan(i * n_features, n_features);
    }
    void add(std::span<const float> x, int label) {
        if (x.size() != n_features) throw DataError("feature vector dimension mismatch");
        features.insert(features.end(), x.begin(), x.end());
        labels.push_back(label);
    }
};

inline double gini(std::span<const std::size_t> counts) {
    double total = 0.0;
    for (auto c : counts) total += static_cast<double>(c);
    if (total <= 0.0) throw DataError("gini: all-zero class counts");
    double sq = 0.0;
    for (auto c : counts) {
        const double p = static_cast<double>(c) / total;
        sq += p * p;
    }
    return 1.0 - sq;
}

struct Split {
    std::size_t feature = 0;
    float threshold = 0.0f;
    double impurity_decrease = 0.0;
};

/// Two impurity decreases closer than this are treated as equal, so the
/// (lower feature, lower threshold) tie-break is not decided by rounding.
inline constexpr double kDecreaseTolerance = 1e-12;

/// Midpoint of two consecutive distinct values, kept strictly below `hi` so
/// that `value <= threshold` sends `lo` left and `hi` right.
inline float split_midpoint(float lo, float hi) {
    const float mid = lo + (hi - lo) * 0.5f;
    return mid < hi ? mid : lo;
}

/// Exhaustive weighted-Gini split search over `candidate_features` for the
/// samples listed in `indices`. Returns nothing when no threshold strictly
/// reduces impurity.
inline std::optional<Split> best_split(const TrainingSet& data, std::span<const std::size_t> indices,
                                       std::span<const std::size_t> candidate_features) {
    const auto n = indices.size();
    if (n < 2) return std::nullopt;
    const auto k = data.n_classes;
    std::vector<std::int64_t> parent(k, 0);
    for (auto i : indices) ++parent[static_cast<std::size_t>(data.labels[i])];
    std::int64_t parent_sq = 0;
    for (auto c : parent) parent_sq += c * c;
    const double nn = static_cast<double>(n);
    const double parent_gini = 1.0 - static_cast<double>(parent_sq) / (nn * nn);
    if (parent_gini <= 0.0) return std::nullopt;

    std::vector<std::size_t> features(candidate_features.begin(), candidate_features.end());
    std::sort(features.begin(), features.end());

    std::optional<Split> best;
    std::vector<std::pair<float, int>> column(n);
    std::vector<std::int64_t> left(k), right(k);
    for (auto f : features) {
        for (std::size_t j = 0; j < n; ++j) {
            column[j] = {data.features[indices[j] * data.n_features + f], data.labels[indices[j]]};
        }
        std::sort(column.begin(), column.end());
        std::fill(left.begin(), left.end(), 0);
        right = parent;
        std::int64_t left_sq = 0;
        std::int64_t right_sq = parent_sq;
        for (std::size_t j = 1; j < n; ++j) {
            const auto c = static_cast<std::size_t>(column[j - 1].second);
            left_sq += 2 * left[c] + 1;
            right_sq -= 2 * right[c] - 1;
            ++left[c];
            --right[c];
            if (!(column[j - 1].first < column[j].first)) continue;
            const double nl = static_cast<double>(j);
            const double nr = nn - nl;
            const double child =
                (nn - static_cast<double>(left_sq) / nl - static_cast<double>(right_sq) / nr) / nn;
            const double decrease = parent_gini - child;
            if (decrease <= kDecreaseTolerance) continue;
            if (!best || decrease > best->impurity_decrease + kDecreaseTolerance) {
                best = Split{f, split_midpoint(column[j - 1].first, column[j].first), decrease};
            }
        }
    }
    return best;
}

struct SplitNode {
    std::uint32_t feature = 0;
    float threshold = 0.0f;
    std::uint32_t left = 0;
    std::uint32_t right = 0;
};

struct LeafNode {
    std::vector<double> distribution;
};

using TreeNode = std::variant<SplitNode, LeafNode>;

/// Nodes stored in preorder; nodes[0] is the root.
struct DecisionTree {
    std::vector<TreeNode> nodes;

    const std::vector<double>& leaf(std::span<const float> x) const {
        std::size_t at = 0;
        for (;;) {
            if (const auto* s = std::get_if<SplitNode>(&nodes[at])) {
                at = x[s->feature] <= s->threshold ? s->left : s->right;
            } else {
                return std::get<LeafNode>(nodes[at]).distribution;
            }
        }
    }
};

struct TreeParams {
    std::optional<std::size_t> max_depth;
    std::size_t min_samples_split = 2;
    /// 0 means every feature is a candidate at every node.
    std::size_t features_per_split = 0;
    std::uint64_t seed = 0;
};

namespace detail {

class TreeBuilder {
public:
    TreeBuilder(const TrainingSet& data, const TreeParams& params)
        : data_(data), params_(params), rng_(params.seed) {
        const auto d = data.n_features;
        mtry_ = params.features_per_split == 0 ? d : std::min(params.features_per_split, d);
        all_features_ = iota_indices(d);
    }

    DecisionTree build(std::vector<std::size_t> indices) {
        DecisionTree tree;
        grow(tree, indices, 0);
        return tree;
    }

private:
    std::uint32_t grow(DecisionTree& tree, std::span<std::size_t> indices, std::size_t depth) {
        const auto at = static_cast<std::uint32_t>(tree.nodes.size());
        tree.nodes.emplace_back(LeafNode{});
        std::optional<Split> split;
        const bool depth_ok = !params_.max_depth || depth < *params_.max_depth;
        if (depth_ok && indices.size() >= std::max<std::size_t>(params_.min_samples_split, 2)) {
            split = best_split(data_, indices, draw_features());
        }
        if (!split) {
            tree.nodes[at] = LeafNode{distribution(indices)};
            return at;
        }
        auto mid = std::partition(indices.begin(), indices.end(), [&](std::size_t i) {
            return data_.features[i * data_.n_features + split->feature] <= split->threshold;
        });
        const auto n_left = static_cast<std::size_t>(mid - indices.begin());
        SplitNode node{static_cast<std::uint32_t>(split->feature), split->threshold, 0, 0};
        node.left = grow(tree, indices.first(n_left), depth + 1);
        node.right = grow(tree, indices.subspan(n_left), depth + 1);
        tree.nodes[at] = node;
        return at;
    }

    std::vector<std::size_t> draw_features() {
        if (mtry_ == all_features_.size()) return all_features_;
        auto pool = all_features_;
        for (std::size_t i = 0; i < mtry_; ++i) {
            const auto j = i + static_cast<std::size_t>(rng_.below(pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(mtry_);
        return pool;
    }

    std::vector<double> distribution(std::span<const std::size_t> indices) const {
        std::vector<double> dist(data_.n_classes, 0.0);
        for (auto i : indices) dist[static_cast<std::size_t>(data_.labels[i])] += 1.0;
        for (auto& v : dist) v /= static_cast<double>(indices.size());
        return dist;
    }

    const TrainingSet& data_;
    TreeParams params_;
    Rng rng_;
    std::size_t mtry_ = 0;
    std::vector<std::size_t> all_features_;
};

inline void check_training_set(const TrainingSet& data) {
    if (data.size() == 0) throw DataError("cannot fit on an empty sample set");
    if (data.n_classes < 1) throw DataError("training set declares no classes");
    if (data.features.size() != data.size() * data.n_features) throw DataError("feature matrix size mismatch");
    for (auto y : data.labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= data.n_classes) throw DataError("label out of range");
    }
}

} // namespace detail

inline DecisionTree fit_tree(const TrainingSet& data, const TreeParams& params,
                             std::vector<std::size_t> sample_indices) {
    detail::check_training_set(data);
    if (sample_indices.empty()) throw DataError("cannot fit a tree on an empty sample set");
    return detail::TreeBuilder(data, params).build(std::move(sample_indices));
}

inline DecisionTree fit_tree(const TrainingSet& data, const TreeParams& params) {
    return fit_tree(data, params, iota_indices(data.size()));
}

struct RandomForestModel {
    std::vector<DecisionTree> trees;
    std::size_t n_classes = 0;
    std::size_t n_features = 0;
    std::size_t features_per_split = 0;
    std::uint64_t seed = 0;
};

struct ForestParams {
    std::size_t n_trees = 100;
    /// 0 selects floor(sqrt(n_features)).
    std::size_t features_per_split = 0;
    std::optional<std::size_t> max_depth;
    std::size_t min_samples_split = 2;
    bool bootstrap = true;
    std::uint64_t seed = 0;
};

inline RandomForestModel fit_forest(const TrainingSet& data, const ForestParams& params) {
    detail::check_training_set(data);
    if (params.n_trees < 1) throw UsageError("forest needs at least one tree");
    RandomForestModel model;
    model.n_classes = data.n_classes;
    model.n_features = data.n_features;
    model.features_per_split =
        params.features_per_split == 0
            ? std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(data.n_features)))))
            : std::min(params.features_per_split, data.n_features);
    model.seed = params.seed;
    model.trees.resize(params.n_trees);
    parallel_for(params.n_trees, [&](std::size_t t) {
        const auto tree_seed = derive_seed(params.seed, t);
        std::vector<std::size_t> sample;
        if (params.bootstrap) {
            Rng boot(derive_seed(tree_seed, 1));
            sample.resize(data.size());
            for (auto& s : sample) s = static_cast<std::size_t>(boot.below(data.size()));
        } else {
            sample = iota_indices(data.size());
        }
        TreeParams tp{params.max_depth, params.min_samples_split, model.features_per_split, tree_seed};
        model.trees[t] = fit_tree(data, tp, std::move(sample));
    });
    return model;
}

/// Mean of the leaf distributions reached in every tree.
inline std::vector<double> predict_proba(const RandomForestModel& model, std::span<const float> x) {
    if (x.size() != model.n_features) {
        throw DataError("feature dimension " + std::to_string(x.size()) + " != model dimension " +
                        std::to_string(model.n_features));
    }
    std::vector<double> out(model.n_classes, 0.0);
    for (const auto& tree : model.trees) {
        const auto& leaf = tree.leaf(x);
        for (std::size_t k = 0; k < out.size(); ++k) out[k] += leaf[k];
    }
    for (auto& v : out) v /= static_cast<double>(model.trees.size());
    return out;
}

// Binary model file "RFOR" v1:
//   magic[4] version:u16 n_classes:u32 n_trees:u32 n_features:u32
//   features_per_split:u32 seed:u64, then per tree a preorder node stream:
//   tag:u8 (1 = split: feature:u32 threshold:f32, 0 = leaf: n_classes x f32).

inline constexpr std::uint16_t kForestFormatVersion = 1;

namespace detail {

inline void write_subtree(std::ostream& out, const DecisionTree& tree, std::size_t at) {
    if (const auto* s = std::get_if<SplitNode>(&tree.nodes[at])) {
        io::put_u8(out, 1);
        io::put_u32(out, s->feature);
        io::put_f32(out, s->threshold);
        write_subtree(out, tree, s->left);
        write_subtree(out, tree, s->right);
    } else {
        io::put_u8(out, 0);
        for (double p : std::get<LeafNode>(tree.nodes[at]).distribution) io::put_f32(out, static_cast<float>(p));
    }
}

inline std::uint32_t read_subtree(std::istream& in, DecisionTree& tree, std::size_t n_classes,
                                  std::size_t n_features) {
    const auto at = static_cast<std::uint32_t>(tree.nodes.size());
    tree.nodes.emplace_back(LeafNode{});
    const auto tag = io::get_u8(in);
    if (tag == 1) {
        SplitNode s;
        s.feature = io::get_u32(in);
        if (s.feature >= n_features) throw DataError("forest file: split feature out of range");
        s.threshold = io::get_f32(in);
        s.left = read_subtree(in, tree, n_classes, n_features);
        s.right = read_subtree(in, tree, n_classes, n_features);
        tree.nodes[at] = s;
    } else if (tag == 0) {
        LeafNode leaf{std::vector<double>(n_classes)};
        double total = 0.0;
        for (auto& p : leaf.distribution) {
            p = io::get_f32(in);
            total += p;
        }
        if (!(total > 0.0)) throw DataError("forest file: empty leaf distribution");
        for (auto& p : leaf.distribution) p /= total;
        tree.nodes[at] = std::move(leaf);
    } else {
        throw DataError("forest file: bad node tag");
    }
    return at;
}

} // namespace detail

inline void write_forest(std::ostream& out, const RandomForestModel& m) {
    io::put_magic(out, "RFOR");
    io::put_u16(out, kForestFormatVersion);
    io::put_u32(out, static_cast<std::uint32_t>(m.n_classes));
    io::put_u32(out, static_cast<std::uint32_t>(m.trees.size()));
    io::put_u32(out, static_cast<std::uint32_t>(m.n_features));
    io::put_u32(out, static_cast<std::uint32_t>(m.features_per_split));
    io::put_u64(out, m.seed);
    for (const auto& t : m.trees) detail::write_subtree(out, t, 0);
}

inline RandomForestModel read_forest(std::istream& in) {
    io::expect_magic(in, "RFOR");
    if (io::get_u16(in) != kForestFormatVersion) throw DataError("unsupported forest format version");
    RandomForestModel m;
    m.n_classes = io::get_u32(in);
    const auto n_trees = io::get_u32(in);
    m.n_features = io::get_u32(in);
    m.features_per_split = io::get_u32(in);
    m.seed = io::get_u64(in);
    if (n_trees == 0) throw DataError("forest file has no trees");
    m.trees.resize(n_trees);
    for (auto& t : m.trees) detail::read_subtree(in, t, m.n_classes, m.n_features);
    return m;
}

inline void write_forest(const std::filesystem::path& path, const RandomForestModel& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write forest: " + path.string());
    write_forest(out, m);
}

inline RandomForestModel read_forest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open forest: " + path.string());
    return read_forest(in);
}

} // namespace habmap::forest
