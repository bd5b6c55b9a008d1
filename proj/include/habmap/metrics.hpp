#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "habmap/error.hpp"

namespace habmap::metrics {

/// K x K counts; rows are true classes, columns predictions.
struct ConfusionMatrix {
    std::size_t k = 0;
    std::vector<std::uint64_t> counts;

    explicit ConfusionMatrix(std::size_t classes = 0) : k(classes), counts(classes * classes, 0) {}
    std::uint64_t at(std::size_t t, std::size_t p) const { return counts[t * k + p]; }
    std::uint64_t& at(std::size_t t, std::size_t p) { return counts[t * k + p]; }
    std::uint64_t total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

    /// Each row divided by its sum; empty rows stay zero.
    std::vector<double> normalized() const {
        std::vector<double> out(counts.size(), 0.0);
        for (std::size_t t = 0; t < k; ++t) {
            std::uint64_t row = 0;
            for (std::size_t p = 0; p < k; ++p) row += at(t, p);
            if (row == 0) continue;
            for (std::size_t p = 0; p < k; ++p) out[t * k + p] = static_cast<double>(at(t, p)) / static_cast<double>(row);
        }
        return out;
    }
};

inline ConfusionMatrix confusion_matrix(std::span<const int> y_true, std::span<const int> y_pred, std::size_t k) {
    if (y_true.size() != y_pred.size()) throw DataError("confusion_matrix: length mismatch");
    ConfusionMatrix cm(k);
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        if (y_true[i] < 0 || y_pred[i] < 0 || static_cast<std::size_t>(y_true[i]) >= k ||
            static_cast<std::size_t>(y_pred[i]) >= k) {
            throw DataError("confusion_matrix: class index out of range at sample " + std::to_string(i));
        }
        ++cm.at(static_cast<std::size_t>(y_true[i]), static_cast<std::size_t>(y_pred[i]));
    }
    return cm;
}

/// Index of the largest score; ties go to the lowest index.
template <class T>
int argmax(std::span<const T> scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) best = i;
    }
    return static_cast<int>(best);
}

template <class T>
int argmax(const std::vector<T>& scores) {
    return argmax(std::span<const T>(scores));
}

enum class Averaging { weighted, macro, micro };

inline const char* averaging_name(Averaging a) {
    switch (a) {
        case Averaging::weighted: return "weighted";
        case Averaging::macro: return "macro";
        case Averaging::micro: return "micro";
    }
    return "?";
}

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::uint64_t support = 0;
    /// Set when precision or recall was 0/0 and reported as 0.
    bool zero_division = false;
};

struct PrfResult {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::vector<ClassScores> per_class;
    bool zero_division = false;
};

inline std::vector<ClassScores> per_class_scores(const ConfusionMatrix& cm) {
    std::vector<ClassScores> out(cm.k);
    for (std::size_t c = 0; c < cm.k; ++c) {
        std::uint64_t tp = cm.at(c, c);
        std::uint64_t pred = 0;
        std::uint64_t actual = 0;
        for (std::size_t j = 0; j < cm.k; ++j) {
            pred += cm.at(j, c);
            actual += cm.at(c, j);
        }
        auto& s = out[c];
        s.support = actual;
        if (pred == 0 || actual == 0) s.zero_division = true;
        s.precision = pred ? static_cast<double>(tp) / static_cast<double>(pred) : 0.0;
        s.recall = actual ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
        s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    }
    return out;
}

inline PrfResult precision_recall_f1(const ConfusionMatrix& cm, Averaging averaging) {
    if (cm.k == 0) throw DataError("precision_recall_f1: empty confusion matrix");
    PrfResult r;
    r.per_class = per_class_scores(cm);
    for (const auto& s : r.per_class) r.zero_division = r.zero_division || s.zero_division;
    const auto total = cm.total();
    switch (averaging) {
        case Averaging::micro: {
            std::uint64_t tp = 0;
            for (std::size_t c = 0; c < cm.k; ++c) tp += cm.at(c, c);
            // Single-label: every sample is one prediction, so pooled FP = pooled FN.
            const double v = total ? static_cast<double>(tp) / static_cast<double>(total) : 0.0;
            r.precision = r.recall = r.f1 = v;
            break;
        }
        case Averaging::macro: {
            for (const auto& s : r.per_class) {
                r.precision += s.precision;
                r.recall += s.recall;
                r.f1 += s.f1;
            }
            const auto n = static_cast<double>(cm.k);
            r.precision /= n;
            r.recall /= n;
            r.f1 /= n;
            break;
        }
        case Averaging::weighted: {
            if (total == 0) break;
            for (const auto& s : r.per_class) {
                const double w = static_cast<double>(s.support) / static_cast<double>(total);
                r.precision += w * s.precision;
                r.recall += w * s.recall;
                r.f1 += w * s.f1;
            }
            break;
        }
    }
    return r;
}

/// Row-major (N, K) score matrix.
struct ScoreMatrix {
    std::size_t k = 0;
    std::vector<double> values;
    std::size_t rows() const { return k ? values.size() / k : 0; }
    std::span<const double> row(std::size_t i) const { return std::span<const double>(values).subspan(i * k, k); }
    void add(std::span<const double> r) {
        if (k == 0) k = r.size();
        if (r.size() != k) throw DataError("score row width mismatch");
        values.insert(values.end(), r.begin(), r.end());
    }
};

/// Fraction of rows whose true class ranks within the top k scores; ties
/// rank the lower class index first.
inline double topk_accuracy(const ScoreMatrix& scores, std::span<const int> y_true, std::size_t k) {
    if (k == 0 || k > scores.k) throw DataError("topk_accuracy: k must be in [1, K]");
    if (scores.rows() != y_true.size()) throw DataError("topk_accuracy: row count mismatch");
    if (y_true.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        const auto row = scores.row(i);
        const auto t = static_cast<std::size_t>(y_true[i]);
        std::size_t rank = 0;
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (row[j] > row[t] || (row[j] == row[t] && j < t)) ++rank;
        }
        if (rank < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(y_true.size());
}

struct CurvePoint {
    double threshold = 0.0;
    double x = 0.0;
    double y = 0.0;
};

struct ApResult {
    double ap = 0.0;
    /// (threshold, recall, precision), one point per distinct score.
    std::vector<CurvePoint> curve;
};

struct AucResult {
    double auc = 0.0;
    /// (threshold, false-positive rate, true-positive rate), starting at (0, 0).
    std::vector<CurvePoint> curve;
};

namespace detail {

/// Cumulative (tp, fp) at each distinct threshold, scores descending.
struct Sweep {
    std::vector<double> thresholds;
    std::vector<std::uint64_t> tp;
    std::vector<std::uint64_t> fp;
    std::uint64_t positives = 0;
    std::uint64_t negatives = 0;
};

inline Sweep sweep(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw DataError("score/label length mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    Sweep s;
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (labels[order[i]] ? tp : fp) += 1;
        const bool last_of_group = i + 1 == order.size() || scores[order[i + 1]] != scores[order[i]];
        if (last_of_group) {
            s.thresholds.push_back(scores[order[i]]);
            s.tp.push_back(tp);
            s.fp.push_back(fp);
        }
    }
    s.positives = tp;
    s.negatives = fp;
    return s;
}

} // namespace detail

/// Step-rule average precision: sum over thresholds of (R_n - R_{n-1}) * P_n.
/// Undefined (nullopt) without positive labels.
inline std::optional<ApResult> average_precision(std::span<const double> scores, std::span<const int> labels) {
    const auto s = detail::sweep(scores, labels);
    if (s.positives == 0) return std::nullopt;
    ApResult r;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < s.thresholds.size(); ++i) {
        const double recall = static_cast<double>(s.tp[i]) / static_cast<double>(s.positives);
        const double precision = static_cast<double>(s.tp[i]) / static_cast<double>(s.tp[i] + s.fp[i]);
        r.ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        r.curve.push_back({s.thresholds[i], recall, precision});
    }
    return r;
}

/// Trapezoidal ROC area; undefined (nullopt) unless both classes occur.
inline std::optional<AucResult> roc_auc(std::span<const double> scores, std::span<const int> labels) {
    const auto s = detail::sweep(scores, labels);
    if (s.positives == 0 || s.negatives == 0) return std::nullopt;
    AucResult r;
    r.curve.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    double px = 0.0;
    double py = 0.0;
    for (std::size_t i = 0; i < s.thresholds.size(); ++i) {
        const double x = static_cast<double>(s.fp[i]) / static_cast<double>(s.negatives);
        const double y = static_cast<double>(s.tp[i]) / static_cast<double>(s.positives);
        r.auc += (x - px) * (y + py) * 0.5;
        px = x;
        py = y;
        r.curve.push_back({s.thresholds[i], x, y});
    }
    return r;
}

inline constexpr std::size_t kCurveGridPoints = 101;

/// Averaged one-vs-rest curves on a shared grid of 101 x-values in [0, 1].
/// Micro pools every (sample, class) pair; macro averages the per-class
/// interpolated curves over classes that have a defined curve.
struct AveragedCurve {
    std::vector<double> grid;
    std::vector<double> values;
    double area = 0.0;
};

namespace detail {

/// Precision envelope at recall r: max precision over points with recall >= r.
inline double interp_pr(const std::vector<CurvePoint>& curve, double r) {
    double best = 0.0;
    for (const auto& p : curve) {
        if (p.x >= r - 1e-12) best = std::max(best, p.y);
    }
    return best;
}

/// Step interpolation of TPR at FPR f: max TPR among points with FPR <= f.
inline double interp_roc(const std::vector<CurvePoint>& curve, double f) {
    double best = 0.0;
    for (const auto& p : curve) {
        if (p.x <= f + 1e-12) best = std::max(best, p.y);
    }
    return best;
}

inline std::vector<double> unit_grid() {
    std::vector<double> g(kCurveGridPoints);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(i) / static_cast<double>(g.size() - 1);
    return g;
}

inline double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
    double a = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i) a += (x[i] - x[i - 1]) * (y[i] + y[i - 1]) * 0.5;
    return a;
}

inline std::vector<int> binary_labels(std::span<const int> y_true, std::size_t cls) {
    std::vector<int> b(y_true.size());
    for (std::size_t i = 0; i < y_true.size(); ++i) b[i] = y_true[i] == static_cast<int>(cls) ? 1 : 0;
    return b;
}

inline std::vector<double> column(const ScoreMatrix& s, std::size_t cls) {
    std::vector<double> c(s.rows());
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = s.values[i * s.k + cls];
    return c;
}

} // namespace detail

enum class CurveKind { precision_recall, roc };

inline AveragedCurve averaged_curve(const ScoreMatrix& scores, std::span<const int> y_true, Averaging averaging,
                                    CurveKind kind) {
    AveragedCurve out;
    out.grid = detail::unit_grid();
    out.values.assign(out.grid.size(), 0.0);
    auto interp = [&](const std::vector<CurvePoint>& curve, double g) {
        return kind == CurveKind::precision_recall ? detail::interp_pr(curve, g) : detail::interp_roc(curve, g);
    };
    auto curve_of = [&](std::span<const double> s, std::span<const int> l) -> std::optional<std::vector<CurvePoint>> {
        if (kind == CurveKind::precision_recall) {
            auto r = average_precision(s, l);
            if (!r) return std::nullopt;
            return r->curve;
        }
        auto r = roc_auc(s, l);
        if (!r) return std::nullopt;
        return r->curve;
    };
    if (averaging == Averaging::micro) {
        std::vector<double> s;
        std::vector<int> l;
        for (std::size_t i = 0; i < scores.rows(); ++i) {
            for (std::size_t c = 0; c < scores.k; ++c) {
                s.push_back(scores.values[i * scores.k + c]);
                l.push_back(y_true[i] == static_cast<int>(c) ? 1 : 0);
            }
        }
        if (auto curve = curve_of(s, l)) {
            for (std::size_t g = 0; g < out.grid.size(); ++g) out.values[g] = interp(*curve, out.grid[g]);
        }
    } else {
        std::size_t used = 0;
        for (std::size_t c = 0; c < scores.k; ++c) {
            const auto s = detail::column(scores, c);
            const auto l = detail::binary_labels(y_true, c);
            auto curve = curve_of(s, l);
            if (!curve) continue;
            ++used;
            for (std::size_t g = 0; g < out.grid.size(); ++g) out.values[g] += interp(*curve, out.grid[g]);
        }
        if (used) {
            for (auto& v : out.values) v /= static_cast<double>(used);
        }
    }
    out.area = detail::trapezoid(out.grid, out.values);
    return out;
}

struct ClassThresholdMetrics {
    std::optional<double> ap;
    std::optional<double> roc_auc;
    std::vector<CurvePoint> pr_curve;
    std::vector<CurvePoint> roc_curve;
};

struct MetricsReport {
    std::size_t n_classes = 0;
    std::size_t n_samples = 0;
    ConfusionMatrix confusion;
    std::vector<ClassScores> per_class;
    std::map<std::string, PrfResult> averaged; // keyed by averaging name
    std::map<std::size_t, double> topk;         // k -> accuracy
    std::vector<ClassThresholdMetrics> per_class_threshold;
    AveragedCurve pr_macro, pr_micro, roc_macro, roc_micro;

    double accuracy() const { return topk.at(1); }
    const PrfResult& weighted() const { return averaged.at("weighted"); }

    /// Flat scalar view used for cross-fold aggregation and tables.
    std::map<std::string, double> scalars() const {
        std::map<std::string, double> m;
        for (const auto& [name, prf] : averaged) {
            m["precision_" + name] = prf.precision;
            m["recall_" + name] = prf.recall;
            m["f1_" + name] = prf.f1;
        }
        for (const auto& [k, v] : topk) m["top" + std::to_string(k) + "_accuracy"] = v;
        m["ap_macro_curve"] = pr_macro.area;
        m["ap_micro_curve"] = pr_micro.area;
        m["roc_auc_macro_curve"] = roc_macro.area;
        m["roc_auc_micro_curve"] = roc_micro.area;
        return m;
    }
};

/// Full evaluation of probability rows against true labels; predictions are
/// the row argmax.
inline MetricsReport evaluate(const ScoreMatrix& scores, std::span<const int> y_true) {
    if (scores.rows() != y_true.size()) throw DataError("evaluate: row count mismatch");
    MetricsReport r;
    r.n_classes = scores.k;
    r.n_samples = y_true.size();
    std::vector<int> pred(y_true.size());
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = argmax(scores.row(i));
    r.confusion = confusion_matrix(y_true, pred, scores.k);
    for (auto a : {Averaging::weighted, Averaging::macro, Averaging::micro}) {
        r.averaged[averaging_name(a)] = precision_recall_f1(r.confusion, a);
    }
    r.per_class = r.averaged["weighted"].per_class;
    for (std::size_t k : {1, 3, 5}) {
        if (k <= scores.k) r.topk[k] = topk_accuracy(scores, y_true, k);
    }
    for (std::size_t c = 0; c < scores.k; ++c) {
        const auto s = detail::column(scores, c);
        const auto l = detail::binary_labels(y_true, c);
        ClassThresholdMetrics t;
        if (auto ap = average_precision(s, l)) {
            t.ap = ap->ap;
            t.pr_curve = std::move(ap->curve);
        }
        if (auto auc = roc_auc(s, l)) {
            t.roc_auc = auc->auc;
            t.roc_curve = std::move(auc->curve);
        }
        r.per_class_threshold.push_back(std::move(t));
    }
    r.pr_macro = averaged_curve(scores, y_true, Averaging::macro, CurveKind::precision_recall);
    r.pr_micro = averaged_curve(scores, y_true, Averaging::micro, CurveKind::precision_recall);
    r.roc_macro = averaged_curve(scores, y_true, Averaging::macro, CurveKind::roc);
    r.roc_micro = averaged_curve(scores, y_true, Averaging::micro, CurveKind::roc);
    return r;
}

struct FoldAggregate {
    std::size_t folds = 0;
    std::map<std::string, double> mean;
    std::map<std::string, double> stddev;
};

/// Unweighted mean and population standard deviation of each scalar metric.
inline FoldAggregate crossfold_aggregate(const std::vector<std::map<std::string, double>>& folds) {
    if (folds.size() < 2) throw DataError("crossfold_aggregate needs at least 2 folds");
    FoldAggregate agg;
    agg.folds = folds.size();
    for (const auto& f : folds) {
        if (f.size() != folds.front().size()) throw DataError("crossfold_aggregate: inconsistent metric sets");
        for (const auto& [name, v] : folds.front()) {
            if (!f.count(name)) throw DataError("crossfold_aggregate: fold missing metric '" + name + "'");
        }
    }
    const auto n = static_cast<double>(folds.size());
    for (const auto& [name, unused] : folds.front()) {
        double s = 0.0;
        for (const auto& f : folds) s += f.at(name);
        const double mean = s / n;
        double ss = 0.0;
        for (const auto& f : folds) ss += (f.at(name) - mean) * (f.at(name) - mean);
        agg.mean[name] = mean;
        agg.stddev[name] = std::sqrt(ss / n);
    }
    return agg;
}

inline FoldAggregate crossfold_aggregate(const std::vector<MetricsReport>& reports) {
    std::vector<std::map<std::string, double>> flat;
    for (const auto& r : reports) flat.push_back(r.scalars());
    return crossfold_aggregate(flat);
}

// --- serialization -----------------------------------------------------------

inline nlohmann::json to_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const MetricsReport& r, const std::vector<std::string>& class_codes = {}) {
    using nlohmann::json;
    auto code = [&](std::size_t c) { return c < class_codes.size() ? class_codes[c] : std::to_string(c); };
    json j;
    j["n_classes"] = r.n_classes;
    j["n_samples"] = r.n_samples;
    for (const auto& [name, prf] : r.averaged) {
        j["averaged"][name] = {{"precision", prf.precision}, {"recall", prf.recall}, {"f1", prf.f1},
                               {"zero_division", prf.zero_division}};
    }
    for (const auto& [k, v] : r.topk) j["topk_accuracy"][std::to_string(k)] = v;
    json classes = json::array();
    for (std::size_t c = 0; c < r.per_class.size(); ++c) {
        const auto& s = r.per_class[c];
        const auto& t = r.per_class_threshold[c];
        classes.push_back({{"class", code(c)},
                           {"precision", s.precision},
                           {"recall", s.recall},
                           {"f1", s.f1},
                           {"support", s.support},
                           {"zero_division", s.zero_division},
                           {"ap", to_json(t.ap)},
                           {"roc_auc", to_json(t.roc_auc)}});
    }
    j["per_class"] = classes;
    j["confusion_matrix"] = json::array();
    for (std::size_t t = 0; t < r.confusion.k; ++t) {
        json row = json::array();
        for (std::size_t p = 0; p < r.confusion.k; ++p) row.push_back(r.confusion.at(t, p));
        j["confusion_matrix"].push_back(row);
    }
    j["curves"] = {{"pr_macro_area", r.pr_macro.area},
                   {"pr_micro_area", r.pr_micro.area},
                   {"roc_macro_area", r.roc_macro.area},
                   {"roc_micro_area", r.roc_micro.area}};
    return j;
}

inline nlohmann::json to_json(const FoldAggregate& a) {
    nlohmann::json j;
    j["folds"] = a.folds;
    for (const auto& [name, m] : a.mean) j["metrics"][name] = {{"mean", m}, {"std", a.stddev.at(name)}};
    return j;
}

inline void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& curve) {
    out.precision(10);
    out << "threshold,x,y\n";
    for (const auto& p : curve) out << p.threshold << ',' << p.x << ',' << p.y << '\n';
}

inline void write_curve_csv(std::ostream& out, const AveragedCurve& c) {
    out.precision(10);
    out << "threshold,x,y\n";
    for (std::size_t i = 0; i < c.grid.size(); ++i) out << "nan," << c.grid[i] << ',' << c.values[i] << '\n';
}

// --- SVG rendering ----------------------------------------------------------

struct SvgSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

/// Line plot on the unit square.
inline std::string render_curves_svg(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                                     const std::vector<SvgSeries>& series) {
    static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
    const double w = 420, h = 360, ml = 50, mt = 30, pw = 340, ph = 280;
    std::ostringstream s;
    s.precision(5);
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << w / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n"
      << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n"
      << "<text x=\"" << ml + pw / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\" font-size=\"12\">" << xlabel
      << "</text>\n"
      << "<text x=\"14\" y=\"" << mt + ph / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 " << mt + ph / 2
      << ")\" text-anchor=\"middle\">" << ylabel << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto& sr = series[i];
        s << "<polyline fill=\"none\" stroke=\"" << colors[i % 6] << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t j = 0; j < sr.x.size(); ++j) {
            s << ml + sr.x[j] * pw << ',' << mt + (1.0 - sr.y[j]) * ph << ' ';
        }
        s << "\"/>\n<text x=\"" << ml + pw - 5 << "\" y=\"" << mt + ph - 10 - 14 * static_cast<double>(i)
          << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << colors[i % 6] << "\">" << sr.label << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

/// Row-normalized confusion matrix as a grey-scale heat map.
inline std::string render_confusion_svg(const ConfusionMatrix& cm, const std::vector<std::string>& labels) {
    const auto norm = cm.normalized();
    const double cell = 22, margin = 60;
    const double size = margin + cell * static_cast<double>(cm.k) + 10;
    std::ostringstream s;
    s.precision(4);
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    for (std::size_t t = 0; t < cm.k; ++t) {
        const auto label = t < labels.size() ? labels[t] : std::to_string(t);
        s << "<text x=\"" << margin - 4 << "\" y=\"" << margin + cell * (static_cast<double>(t) + 0.7)
          << "\" text-anchor=\"end\" font-size=\"9\">" << label << "</text>\n";
        s << "<text x=\"" << margin + cell * (static_cast<double>(t) + 0.5) << "\" y=\"" << margin - 4
          << "\" text-anchor=\"middle\" font-size=\"9\">" << label << "</text>\n";
        for (std::size_t p = 0; p < cm.k; ++p) {
            const int g = static_cast<int>(std::lround(255.0 * (1.0 - norm[t * cm.k + p])));
            s << "<rect x=\"" << margin + cell * static_cast<double>(p) << "\" y=\""
              << margin + cell * static_cast<double>(t) << "\" width=\"" << cell << "\" height=\"" << cell
              << "\" fill=\"rgb(" << g << ',' << g << ',' << g << ")\" stroke=\"#ccc\"/>\n";
        }
    }
    s << "</svg>\n";
    return s.str();
}

} // namespace habmap::metrics
