#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "habmap/error.hpp"
#include "habmap/metrics.hpp"
#include "habmap/nnet/adam.hpp"
#include "habmap/nnet/augment.hpp"
#include "habmap/nnet/loss.hpp"
#include "habmap/nnet/network.hpp"
#include "habmap/parallel.hpp"
#include "habmap/random.hpp"
#include "habmap/raster.hpp"

namespace habmap::nnet {

struct TrainConfig {
    std::size_t epochs = 500;
    std::size_t batch_size = 128;
    double lr = 1e-4;
    /// Per-sample flips and blur.
    AugmentOps augment;
    /// Random odd input side in [augment.crop_min, input_size], one per batch.
    bool crop_augment = false;
    bool freeze_conv = false;
    std::uint64_t seed = 0;
    /// Side the network sees without crop augmentation; larger patches are
    /// centre-cropped to it.
    std::size_t input_size = 19;

    void validate() const {
        if (epochs == 0) throw UsageError("epochs must be positive");
        if (batch_size == 0) throw UsageError("batch_size must be positive");
        if (!(lr > 0.0)) throw UsageError("learning rate must be positive");
        if (input_size < 3 || input_size % 2 == 0) throw UsageError("input_size must be odd and >= 3");
        if (crop_augment && (augment.crop_min % 2 == 0 || augment.crop_min > input_size)) {
            throw UsageError("crop_min must be odd and <= input_size");
        }
        augment.validate();
    }
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    std::optional<double> val_weighted_f1;
};

using EpochCallback = std::function<void(const EpochLog&)>;

inline std::vector<int> labels_of(std::span<const Patch> patches) {
    std::vector<int> out;
    out.reserve(patches.size());
    for (const auto& p : patches) {
        if (!p.center_class) throw DataError("patch has no class label");
        out.push_back(*p.center_class);
    }
    return out;
}

/// Softmax rows for every patch, centre-cropped to `side`; eval mode.
template <class T>
metrics::ScoreMatrix predict_proba(const Network<T>& net, std::span<const Patch> patches, std::size_t side,
                                   std::size_t chunk = 256) {
    metrics::ScoreMatrix out;
    out.k = net.config().n_classes;
    out.values.assign(patches.size() * out.k, 0.0);
    const auto chunks = (patches.size() + chunk - 1) / chunk;
    parallel_for(chunks, [&](std::size_t ci) {
        const auto lo = ci * chunk;
        const auto n = std::min(chunk, patches.size() - lo);
        const auto logits = net.predict(make_batch<T>(patches.subspan(lo, n), side));
        const auto probs = softmax_rows(logits);
        for (std::size_t i = 0; i < probs.size(); ++i) out.values[lo * out.k + i] = static_cast<double>(probs[i]);
    });
    return out;
}

template <class T>
double weighted_f1(const Network<T>& net, std::span<const Patch> patches, std::size_t side) {
    const auto scores = predict_proba(net, patches, side);
    const auto truth = labels_of(patches);
    std::vector<int> pred(truth.size());
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = metrics::argmax(scores.row(i));
    const auto cm = metrics::confusion_matrix(truth, pred, scores.k);
    return metrics::precision_recall_f1(cm, metrics::Averaging::weighted).f1;
}

template <class T>
double accuracy(const Network<T>& net, std::span<const Patch> patches, std::size_t side) {
    const auto scores = predict_proba(net, patches, side);
    const auto truth = labels_of(patches);
    if (truth.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hits += metrics::argmax(scores.row(i)) == truth[i];
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

/// One optimizer step per call on augmented copies of the given patches.
template <class T>
class Trainer {
public:
    Trainer(Network<T>& net, const TrainConfig& config) : net_(net), config_(config), rng_(config.seed) {
        config_.validate();
        net_.set_conv_trainable(!config_.freeze_conv);
    }

    Rng& rng() { return rng_; }
    const TrainConfig& config() const { return config_; }

    std::size_t draw_side() {
        if (!config_.crop_augment) return config_.input_size;
        AugmentOps ops = config_.augment;
        ops.center_crop = true;
        ops.crop_max = config_.input_size;
        return draw_crop_side(ops, rng_);
    }

    /// `targets` is (B, K) with soft rows.
    double step(std::span<const Patch* const> batch, const Tensor<T>& targets) {
        const auto side = draw_side();
        std::vector<Patch> views;
        views.reserve(batch.size());
        for (const Patch* p : batch) {
            const Patch base = p->size > config_.input_size ? center_crop(*p, config_.input_size) : *p;
            views.push_back(augment_pixels(base, config_.augment, rng_));
        }
        const auto input = make_batch<T>(views, side);
        const auto logits = net_.forward(input, Mode::train);
        auto loss = cross_entropy(logits, targets);
        if (!std::isfinite(loss.loss)) {
            throw NumericalError("training diverged: non-finite loss at optimizer step " + std::to_string(state_.step + 1));
        }
        net_.zero_grad();
        net_.backward(loss.grad);
        adam_step(net_.parameters(), state_, config_.lr);
        return loss.loss;
    }

    double step_hard(std::span<const Patch* const> batch) {
        std::vector<int> labels;
        labels.reserve(batch.size());
        for (const Patch* p : batch) {
            if (!p->center_class) throw DataError("training patch has no class label");
            labels.push_back(*p->center_class);
        }
        return step(batch, one_hot<T>(labels, net_.config().n_classes));
    }

private:
    Network<T>& net_;
    TrainConfig config_;
    Rng rng_;
    AdamState<T> state_;
};

template <class T>
std::vector<std::vector<const Patch*>> shuffled_batches(std::span<const Patch> set, std::size_t batch_size, Rng& rng) {
    auto order = iota_indices(set.size());
    rng.shuffle(order);
    std::vector<std::vector<const Patch*>> out;
    for (std::size_t lo = 0; lo < order.size(); lo += batch_size) {
        std::vector<const Patch*> b;
        for (std::size_t i = lo; i < std::min(order.size(), lo + batch_size); ++i) b.push_back(&set[order[i]]);
        out.push_back(std::move(b));
    }
    return out;
}

/// Supervised training with hard labels. Returns one log entry per epoch;
/// the validation F1 is present when `val` is nonempty.
template <class T>
std::vector<EpochLog> train(Network<T>& net, std::span<const Patch> train_set, std::span<const Patch> val,
                            const TrainConfig& config, const EpochCallback& on_epoch = {}) {
    if (train_set.empty()) throw DataError("train: empty training set");
    Trainer<T> trainer(net, config);
    std::vector<EpochLog> log;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        double total = 0.0;
        std::size_t seen = 0;
        for (const auto& batch : shuffled_batches<T>(train_set, config.batch_size, trainer.rng())) {
            total += trainer.step_hard(batch) * static_cast<double>(batch.size());
            seen += batch.size();
        }
        EpochLog e{epoch + 1, total / static_cast<double>(seen), std::nullopt};
        if (!val.empty()) e.val_weighted_f1 = weighted_f1(net, val, config.input_size);
        log.push_back(e);
        if (on_epoch) on_epoch(e);
    }
    return log;
}

} // namespace habmap::nnet
