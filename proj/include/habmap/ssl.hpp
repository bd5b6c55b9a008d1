#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "habmap/binary_io.hpp"
#include "habmap/error.hpp"
#include "habmap/inference.hpp"
#include "habmap/nnet/train.hpp"

namespace habmap::ssl {

/// Patch pixels without any class field; constructing one drops the label.
class UnlabeledPatch {
public:
    explicit UnlabeledPatch(Patch p, std::string id = {}) : patch_(std::move(p)), id_(std::move(id)) {
        patch_.center_class.reset();
        patch_.source_point.reset();
    }
    const Patch& pixels() const { return patch_; }
    const std::string& id() const { return id_; }

private:
    Patch patch_;
    std::string id_;
};

inline std::vector<UnlabeledPatch> strip_labels(std::span<const Patch> patches) {
    std::vector<UnlabeledPatch> out;
    out.reserve(patches.size());
    for (const auto& p : patches) out.emplace_back(p, p.source_point.value_or(""));
    return out;
}

// --- IIC objective ---------------------------------------------------------------

inline constexpr double kJointFloor = 1e-12;

template <class T>
struct IicLoss {
    /// Negated mutual information of the symmetrized joint.
    double loss = 0.0;
    /// Symmetrized C x C joint, row-major, before clamping.
    std::vector<double> joint;
    nnet::Tensor<T> grad_z;
    nnet::Tensor<T> grad_z_prime;
};

/// Mutual-information loss between the cluster distributions of paired
/// views. Gradients treat the 1e-12 clamp as identity.
template <class T>
IicLoss<T> iic_loss(const nnet::Tensor<T>& z, const nnet::Tensor<T>& z_prime) {
    if (z.rank() != 2 || z.shape() != z_prime.shape()) throw DataError("iic_loss: views must have equal (B, C) shape");
    const auto bsz = z.dim(0);
    const auto c = z.dim(1);
    if (bsz == 0 || c < 2) throw DataError("iic_loss: need B >= 1 and C >= 2");
    for (const auto* m : {&z, &z_prime}) {
        for (std::size_t b = 0; b < bsz; ++b) {
            double s = 0.0;
            for (T v : m->row(b)) {
                if (!(v >= T{0})) throw DataError("iic_loss: negative or NaN probability");
                s += v;
            }
            if (std::abs(s - 1.0) > nnet::kSoftTargetTolerance) throw DataError("iic_loss: row does not sum to 1");
        }
    }
    std::vector<double> p(c * c, 0.0);
    for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t i = 0; i < c; ++i) {
            const double zi = z.at(b, i);
            for (std::size_t j = 0; j < c; ++j) p[i * c + j] += zi * z_prime.at(b, j);
        }
    }
    for (auto& v : p) v /= static_cast<double>(bsz);
    std::vector<double> sym(c * c);
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < c; ++j) sym[i * c + j] = 0.5 * (p[i * c + j] + p[j * c + i]);
    }
    std::vector<double> marginal(c, 0.0);
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < c; ++j) marginal[i] += sym[i * c + j];
    }
    std::vector<double> log_m(c);
    for (std::size_t i = 0; i < c; ++i) log_m[i] = std::log(std::max(marginal[i], kJointFloor));

    IicLoss<T> r;
    // d(-I)/dP for the symmetrized joint; symmetric, so it equals its own
    // symmetrization and passes back to the raw joint unchanged.
    std::vector<double> g(c * c);
    double mi = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const double pij = std::max(sym[i * c + j], kJointFloor);
            const double pmi = std::log(pij) - log_m[i] - log_m[j];
            mi += pij * pmi;
            g[i * c + j] = -(pmi - 1.0);
        }
    }
    r.loss = -mi;
    r.joint = std::move(sym);
    r.grad_z = nnet::Tensor<T>(z.shape());
    r.grad_z_prime = nnet::Tensor<T>(z.shape());
    const double inv_b = 1.0 / static_cast<double>(bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
        for (std::size_t i = 0; i < c; ++i) {
            double gz = 0.0;
            double gzp = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                gz += g[i * c + j] * z_prime.at(b, j);
                gzp += g[j * c + i] * z.at(b, j);
            }
            r.grad_z.at(b, i) = static_cast<T>(gz * inv_b);
            r.grad_z_prime.at(b, i) = static_cast<T>(gzp * inv_b);
        }
    }
    return r;
}

/// d(loss)/d(logits) from d(loss)/d(softmax) for each row.
template <class T>
nnet::Tensor<T> softmax_backward(const nnet::Tensor<T>& probs, const nnet::Tensor<T>& dprobs) {
    nnet::Tensor<T> out(probs.shape());
    for (std::size_t b = 0; b < probs.dim(0); ++b) {
        const auto p = probs.row(b);
        const auto d = dprobs.row(b);
        double dot = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) dot += static_cast<double>(p[i]) * d[i];
        for (std::size_t i = 0; i < p.size(); ++i) out.at(b, i) = static_cast<T>(p[i] * (d[i] - dot));
    }
    return out;
}

struct IicConfig {
    /// Must equal the network's head size.
    std::size_t n_clusters = 44;
    std::size_t epochs = 50;
    std::size_t batch_size = 128;
    double lr = 1e-4;
    nnet::AugmentOps augment = nnet::AugmentOps::flips_and_blur();
    std::size_t input_size = 19;
    std::uint64_t seed = 0;
    /// Head weights are multiplied by this before training. A near-zero head
    /// starts every cluster near equal mass; a full-size random head often
    /// starts lopsided and collapses to a single cluster.
    double head_init_scale = 0.01;
    /// Independent runs; the one with the lowest final-epoch loss is kept.
    /// Run 0 starts from the given network, run r from a fresh network
    /// seeded with derive_seed(seed, r).
    std::size_t restarts = 3;

    void validate() const {
        if (n_clusters < 2) throw UsageError("IIC needs at least 2 clusters");
        if (restarts == 0) throw UsageError("restarts must be positive");
        if (!(head_init_scale > 0.0)) throw UsageError("head_init_scale must be positive");
        if (epochs == 0 || batch_size == 0) throw UsageError("epochs and batch_size must be positive");
        if (!(lr > 0.0)) throw UsageError("learning rate must be positive");
        if (input_size < 3 || input_size % 2 == 0) throw UsageError("input_size must be odd and >= 3");
        if (augment.center_crop) throw UsageError("IIC views do not use cropping");
        augment.validate();
    }
};

namespace detail {

template <class T>
std::vector<double> iic_run(nnet::Network<T>& net, std::span<const UnlabeledPatch> patches, const IicConfig& config,
                            std::uint64_t seed, const std::function<void(std::size_t, double)>& on_epoch) {
    net.set_conv_trainable(true);
    net.scale_head(static_cast<T>(config.head_init_scale));
    Rng rng(seed);
    nnet::AdamState<T> adam;
    std::vector<double> log;
    const auto side = config.input_size;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        auto order = iota_indices(patches.size());
        rng.shuffle(order);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size) {
            const auto hi = std::min(order.size(), lo + config.batch_size);
            const auto bsz = hi - lo;
            std::vector<Patch> views;
            views.reserve(2 * bsz);
            for (std::size_t i = lo; i < hi; ++i) {
                const auto& src = patches[order[i]].pixels();
                views.push_back(src.size == side ? src : nnet::center_crop(src, side));
            }
            for (std::size_t i = 0; i < bsz; ++i) views.push_back(nnet::augment_pixels(views[i], config.augment, rng));
            const auto logits = net.forward(nnet::make_batch<T>(views, side), nnet::Mode::train);
            const auto probs = nnet::softmax_rows(logits);
            const auto k = config.n_clusters;
            nnet::Tensor<T> z({bsz, k});
            nnet::Tensor<T> zp({bsz, k});
            std::copy_n(probs.data(), bsz * k, z.data());
            std::copy_n(probs.data() + bsz * k, bsz * k, zp.data());
            const auto res = iic_loss(z, zp);
            if (!std::isfinite(res.loss)) throw NumericalError("IIC pretraining diverged at epoch " + std::to_string(epoch + 1));
            nnet::Tensor<T> dprobs(probs.shape());
            std::copy_n(res.grad_z.data(), bsz * k, dprobs.data());
            std::copy_n(res.grad_z_prime.data(), bsz * k, dprobs.data() + bsz * k);
            net.zero_grad();
            net.backward(softmax_backward(probs, dprobs));
            nnet::adam_step(net.parameters(), adam, config.lr);
            total += res.loss;
            ++batches;
        }
        log.push_back(total / static_cast<double>(batches));
        if (on_epoch) on_epoch(epoch + 1, log.back());
    }
    return log;
}

} // namespace detail

/// Trains `net` (head sized to the cluster count) so that each patch and
/// an augmented view of it land in the same cluster. Both views of a batch
/// pass through the network together. Returns the mean loss per epoch of
/// the kept run; `on_epoch` sees every run's epochs in order.
template <class T>
std::vector<double> iic_pretrain(nnet::Network<T>& net, std::span<const UnlabeledPatch> patches,
                                 const IicConfig& config, const std::function<void(std::size_t, double)>& on_epoch = {}) {
    config.validate();
    if (patches.empty()) throw DataError("iic_pretrain: no patches");
    if (net.config().n_classes != config.n_clusters) {
        throw UsageError("network head has " + std::to_string(net.config().n_classes) + " outputs, expected " +
                         std::to_string(config.n_clusters) + " clusters");
    }
    std::vector<double> best_log = detail::iic_run(net, patches, config, config.seed, on_epoch);
    for (std::size_t r = 1; r < config.restarts; ++r) {
        nnet::Network<T> candidate(net.config(), derive_seed(config.seed, r));
        auto log = detail::iic_run(candidate, patches, config, derive_seed(config.seed, r), on_epoch);
        if (log.back() < best_log.back()) {
            net = std::move(candidate);
            best_log = std::move(log);
        }
    }
    return best_log;
}

/// Cluster index (argmax) per patch.
template <class T>
std::vector<int> cluster_assignments(const nnet::Network<T>& net, std::span<const UnlabeledPatch> patches,
                                     std::size_t side) {
    std::vector<Patch> px;
    px.reserve(patches.size());
    for (const auto& p : patches) px.push_back(p.pixels());
    const auto scores = nnet::predict_proba(net, px, side);
    std::vector<int> out(patches.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = metrics::argmax(scores.row(i));
    return out;
}

// --- pseudo-labels -----------------------------------------------------------------

struct PseudoLabelSet {
    std::vector<std::string> ids;
    std::size_t n_classes = 0;
    /// Row-major (ids.size(), n_classes).
    std::vector<float> probabilities;
    std::string teacher_hash;

    std::size_t size() const { return ids.size(); }
    std::span<const float> row(std::size_t i) const {
        return std::span<const float>(probabilities).subspan(i * n_classes, n_classes);
    }
};

inline constexpr double kPseudoRowTolerance = 1e-6;

/// Soft teacher predictions for every unlabeled patch; `tta_rounds` = 0
/// uses a single unaugmented pass.
template <class T>
PseudoLabelSet pseudo_label(const nnet::Network<T>& teacher, std::span<const UnlabeledPatch> patches,
                            std::size_t side, std::size_t tta_rounds, const nnet::AugmentOps& tta_ops,
                            std::uint64_t seed) {
    PseudoLabelSet set;
    set.n_classes = teacher.config().n_classes;
    set.teacher_hash = teacher.hash();
    set.probabilities.resize(patches.size() * set.n_classes);
    std::vector<Patch> px;
    px.reserve(patches.size());
    for (const auto& p : patches) {
        if (p.pixels().channels != teacher.config().in_channels) throw DataError("pseudo_label: channel mismatch");
        px.push_back(p.pixels());
        set.ids.push_back(p.id());
    }
    constexpr std::size_t chunk = 128;
    const auto rounds = std::max<std::size_t>(tta_rounds, 1);
    const auto ops = tta_rounds == 0 ? nnet::AugmentOps{} : tta_ops;
    const auto chunks = (px.size() + chunk - 1) / chunk;
    parallel_for(chunks, [&](std::size_t ci) {
        const auto lo = ci * chunk;
        const auto n = std::min(chunk, px.size() - lo);
        std::vector<std::uint64_t> seeds(n);
        for (std::size_t i = 0; i < n; ++i) seeds[i] = derive_seed(seed, lo + i);
        const auto y = inference::tta_predict_batch(teacher, std::span<const Patch>(px).subspan(lo, n), side, rounds,
                                                    ops, seeds);
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = y.row(i);
            double s = 0.0;
            for (double v : row) s += v;
            for (std::size_t k = 0; k < set.n_classes; ++k) {
                set.probabilities[(lo + i) * set.n_classes + k] = static_cast<float>(row[k] / s);
            }
        }
    });
    return set;
}

// Pseudo-label file "PSLB" v1, little-endian:
//   magic[4] version:u16 n_rows:u32 n_classes:u32 teacher_hash:str16
//   n_rows x id:str16, then n_rows*n_classes f32 probabilities.

inline constexpr std::uint16_t kPseudoFormatVersion = 1;

inline void write_pseudo_labels(std::ostream& out, const PseudoLabelSet& s) {
    io::put_magic(out, "PSLB");
    io::put_u16(out, kPseudoFormatVersion);
    io::put_u32(out, static_cast<std::uint32_t>(s.size()));
    io::put_u32(out, static_cast<std::uint32_t>(s.n_classes));
    io::put_string16(out, s.teacher_hash);
    for (const auto& id : s.ids) io::put_string16(out, id);
    for (float v : s.probabilities) io::put_f32(out, v);
}

inline PseudoLabelSet read_pseudo_labels(std::istream& in) {
    io::expect_magic(in, "PSLB");
    if (io::get_u16(in) != kPseudoFormatVersion) throw DataError("unsupported pseudo-label format version");
    PseudoLabelSet s;
    const auto rows = io::get_u32(in);
    s.n_classes = io::get_u32(in);
    if (s.n_classes < 2) throw DataError("pseudo-label file: fewer than 2 classes");
    s.teacher_hash = io::get_string16(in);
    s.ids.reserve(rows);
    for (std::uint32_t i = 0; i < rows; ++i) s.ids.push_back(io::get_string16(in));
    s.probabilities.resize(static_cast<std::size_t>(rows) * s.n_classes);
    for (auto& v : s.probabilities) v = io::get_f32(in);
    for (std::size_t i = 0; i < rows; ++i) {
        double sum = 0.0;
        for (float v : s.row(i)) sum += v;
        if (std::abs(sum - 1.0) > 1e-4) throw DataError("pseudo-label row " + std::to_string(i) + " does not sum to 1");
    }
    return s;
}

inline void write_pseudo_labels(const std::filesystem::path& path, const PseudoLabelSet& s) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    write_pseudo_labels(out, s);
}

inline PseudoLabelSet read_pseudo_labels(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return read_pseudo_labels(in);
}

// --- Noisy Student -------------------------------------------------------------------

/// Trains `student` on labeled batches (hard targets) interleaved 1:1 with
/// pseudo-labeled batches (soft targets); both streams are augmented. With
/// no unlabeled patches this is exactly nnet::train.
template <class T>
std::vector<nnet::EpochLog> noisy_student_train(nnet::Network<T>& student, std::span<const Patch> labeled,
                                                std::span<const UnlabeledPatch> unlabeled,
                                                const PseudoLabelSet& pseudo, std::span<const Patch> val,
                                                const nnet::TrainConfig& config,
                                                const nnet::EpochCallback& on_epoch = {}) {
    if (labeled.empty()) throw DataError("noisy_student_train: empty labeled set");
    if (pseudo.size() != unlabeled.size()) throw DataError("pseudo-label count != unlabeled patch count");
    const auto k = student.config().n_classes;
    if (!unlabeled.empty() && pseudo.n_classes != k) throw DataError("pseudo-label class count != student head size");
    std::vector<Patch> upx;
    upx.reserve(unlabeled.size());
    for (const auto& u : unlabeled) upx.push_back(u.pixels());

    nnet::Trainer<T> trainer(student, config);
    std::vector<nnet::EpochLog> log;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto lb = nnet::shuffled_batches<T>(labeled, config.batch_size, trainer.rng());
        const auto ub = nnet::shuffled_batches<T>(std::span<const Patch>(upx), config.batch_size, trainer.rng());
        double total = 0.0;
        std::size_t seen = 0;
        for (std::size_t i = 0; i < std::max(lb.size(), ub.size()); ++i) {
            if (i < lb.size()) {
                total += trainer.step_hard(lb[i]) * static_cast<double>(lb[i].size());
                seen += lb[i].size();
            }
            if (i < ub.size()) {
                const auto& batch = ub[i];
                nnet::Tensor<T> targets({batch.size(), k});
                for (std::size_t b = 0; b < batch.size(); ++b) {
                    const auto row = pseudo.row(static_cast<std::size_t>(batch[b] - upx.data()));
                    for (std::size_t c = 0; c < k; ++c) targets.at(b, c) = static_cast<T>(row[c]);
                }
                total += trainer.step(batch, targets) * static_cast<double>(batch.size());
                seen += batch.size();
            }
        }
        nnet::EpochLog e{epoch + 1, total / static_cast<double>(seen), std::nullopt};
        if (!val.empty()) e.val_weighted_f1 = nnet::weighted_f1(student, val, config.input_size);
        log.push_back(e);
        if (on_epoch) on_epoch(e);
    }
    return log;
}

/// Pseudo-labels `unlabeled` with the teacher, then trains the student.
template <class T>
std::vector<nnet::EpochLog> noisy_student_train(const nnet::Network<T>& teacher, nnet::Network<T>& student,
                                                std::span<const Patch> labeled,
                                                std::span<const UnlabeledPatch> unlabeled, std::span<const Patch> val,
                                                const nnet::TrainConfig& config, std::size_t tta_rounds = 0,
                                                const nnet::EpochCallback& on_epoch = {}) {
    if (teacher.config().n_classes != student.config().n_classes) throw DataError("teacher/student class count mismatch");
    const auto pseudo = pseudo_label(teacher, unlabeled, config.input_size, tta_rounds,
                                     nnet::AugmentOps::flips_and_blur(), derive_seed(config.seed, 0x5eed));
    return noisy_student_train(student, labeled, unlabeled, pseudo, val, config, on_epoch);
}

} // namespace habmap::ssl
