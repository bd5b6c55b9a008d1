#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "habmap/binary_io.hpp"
#include "habmap/error.hpp"
#include "habmap/hash.hpp"
#include "habmap/nnet/layers.hpp"
#include "habmap/nnet/tensor.hpp"
#include "habmap/random.hpp"

namespace habmap::nnet {

struct NetworkConfig {
    std::size_t in_channels = 14;
    std::vector<std::size_t> stage_widths = {32, 64, 128};
    std::size_t blocks_per_stage = 1;
    std::size_t n_classes = 25;

    void validate() const {
        if (in_channels < 1) throw UsageError("network needs at least one input channel");
        if (stage_widths.empty()) throw UsageError("network needs at least one stage");
        for (auto w : stage_widths) {
            if (w == 0) throw UsageError("stage widths must be > 0");
        }
        if (blocks_per_stage < 1) throw UsageError("blocks_per_stage must be >= 1");
        if (n_classes < 2) throw UsageError("n_classes must be >= 2");
    }
    bool operator==(const NetworkConfig&) const = default;
};

template <class T>
struct ResidualBlock {
    Conv2d<T> conv1;
    BatchNorm2d<T> bn1;
    Conv2d<T> conv2;
    BatchNorm2d<T> bn2;
    std::optional<Conv2d<T>> proj;
    std::optional<BatchNorm2d<T>> proj_bn;
};

template <class T>
struct BlockCache {
    std::vector<T> col1;
    std::vector<T> col2;
    std::vector<T> colp;
    BatchNormCache<T> bn1;
    BatchNormCache<T> bn2;
    BatchNormCache<T> bnp;
    Activation<T> mid; // after the first ReLU
    Activation<T> out; // block output after the final ReLU
    std::size_t in_c = 0;
    std::size_t in_h = 0;
    std::size_t in_w = 0;
};

template <class T>
struct ForwardCache {
    std::size_t batch = 0;
    std::vector<T> stem_col;
    BatchNormCache<T> stem_bn;
    Activation<T> stem_out;
    std::vector<BlockCache<T>> blocks;
    Tensor<T> pooled; // (B, width)
    bool valid = false;
};

/// Residual convolutional classifier for the centre pixel of a square patch.
///
/// Stem conv-BN-ReLU, then residual stages (stride-2 projection shortcut at the
/// start of every stage after the first), global average pooling and a fully
/// connected head. Global pooling makes the network accept any spatial size.
template <class T>
class Network {
public:
    Network() = default;

    Network(const NetworkConfig& config, std::uint64_t seed) : config_(config) {
        config_.validate();
        build();
        Rng rng(seed);
        stem_.init(rng);
        for (auto& b : blocks_) {
            b.conv1.init(rng);
            b.conv2.init(rng);
            if (b.proj) b.proj->init(rng);
        }
        init_head(rng);
    }

    const NetworkConfig& config() const { return config_; }
    std::size_t feature_width() const { return config_.stage_widths.back(); }

    /// Parameters in declaration order.
    std::vector<Param<T>*> parameters() {
        std::vector<Param<T>*> out;
        collect(out);
        return out;
    }
    std::vector<const Param<T>*> parameters() const {
        std::vector<Param<T>*> tmp;
        const_cast<Network*>(this)->collect(tmp);
        return {tmp.begin(), tmp.end()};
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto* p : parameters()) n += p->value.size();
        return n;
    }

    /// Marks every feature-extractor parameter (convolutions and their
    /// normalization layers) trainable or frozen.
    void set_conv_trainable(bool trainable) {
        for (auto* p : parameters()) {
            if (p->conv_stack) p->trainable = trainable;
        }
    }
    bool conv_frozen() const {
        for (const auto* p : parameters()) {
            if (p->conv_stack && p->trainable) return false;
        }
        return true;
    }

    void zero_grad() {
        for (auto* p : parameters()) p->grad.fill(T{0});
    }

    /// Fresh head of `n_classes` outputs; all other weights kept.
    void replace_head(std::size_t n_classes, std::uint64_t seed) {
        if (n_classes < 2) throw UsageError("head needs at least 2 classes");
        config_.n_classes = n_classes;
        head_w_ = Param<T>("head.weight", {n_classes, feature_width()}, false);
        head_b_ = Param<T>("head.bias", {n_classes}, false);
        Rng rng(seed);
        init_head(rng);
    }

    void zero_head() {
        head_w_.value.fill(T{0});
        head_b_.value.fill(T{0});
    }

    void scale_head(T factor) {
        for (auto& v : head_w_.value.values()) v *= factor;
        for (auto& v : head_b_.value.values()) v *= factor;
    }

    /// Logits (B, n_classes) for a (B, C, S, S) batch. Train mode uses batch
    /// statistics in trainable normalization layers and records what the
    /// following backward() needs.
    Tensor<T> forward(const Tensor<T>& batch, Mode mode) {
        if (mode == Mode::eval) return predict(batch);
        return run(batch, Mode::train, &cache_);
    }

    /// Eval-mode forward; does not touch any network state.
    Tensor<T> predict(const Tensor<T>& batch) const {
        return const_cast<Network*>(this)->run(batch, Mode::eval, nullptr);
    }

    /// Accumulates d(loss)/d(param) for every trainable parameter, given
    /// d(loss)/d(logits) for the most recent train-mode forward.
    void backward(const Tensor<T>& dlogits) {
        if (!cache_.valid) throw UsageError("backward() requires a preceding train-mode forward()");
        const auto bsz = cache_.batch;
        const auto k = config_.n_classes;
        const auto f = feature_width();
        if (dlogits.shape() != std::vector<std::size_t>{bsz, k}) throw DataError("backward: gradient shape mismatch");
        if (head_w_.trainable) {
            gemm<T>(true, false, k, f, bsz, T{1}, dlogits.data(), cache_.pooled.data(), T{1}, head_w_.grad.data());
            for (std::size_t b = 0; b < bsz; ++b) {
                for (std::size_t i = 0; i < k; ++i) head_b_.grad[i] += dlogits.at(b, i);
            }
        }
        if (conv_frozen()) return;

        Tensor<T> dpooled({bsz, f});
        gemm<T>(false, false, bsz, f, k, T{1}, dlogits.data(), head_w_.value.data(), T{0}, dpooled.data());
        const Activation<T>& last = blocks_.empty() ? cache_.stem_out : cache_.blocks.back().out;
        Activation<T> d(last.c, last.b, last.h, last.w);
        const T inv_area = T{1} / static_cast<T>(last.h * last.w);
        const auto area = last.h * last.w;
        for (std::size_t c = 0; c < last.c; ++c) {
            for (std::size_t b = 0; b < bsz; ++b) {
                const T g = dpooled.at(b, c) * inv_area;
                T* dst = d.v.data() + (c * bsz + b) * area;
                for (std::size_t i = 0; i < area; ++i) dst[i] = g;
            }
        }
        for (std::size_t i = blocks_.size(); i-- > 0;) d = block_backward(blocks_[i], cache_.blocks[i], d);
        relu_backward_inplace(d, cache_.stem_out);
        stem_bn_.backward_inplace(d, cache_.stem_bn);
        stem_.backward(d, cache_.stem_col, nullptr);
    }

    void serialize(std::ostream& out) const;
    static Network deserialize(std::istream& in);

    /// Fingerprint of the serialized network.
    std::string hash() const {
        std::ostringstream s;
        serialize(s);
        return hash_bytes(s.str());
    }

    template <class U>
    Network<U> cast() const {
        std::stringstream s;
        serialize(s);
        return Network<U>::deserialize(s);
    }

private:
    template <class U>
    friend class Network;

    void build() {
        const auto& w = config_.stage_widths;
        stem_ = Conv2d<T>("stem.conv", config_.in_channels, w[0], 3, 1);
        stem_bn_ = BatchNorm2d<T>("stem.bn", w[0]);
        std::size_t in = w[0];
        for (std::size_t s = 0; s < w.size(); ++s) {
            for (std::size_t j = 0; j < config_.blocks_per_stage; ++j) {
                const auto stride = (s > 0 && j == 0) ? std::size_t{2} : std::size_t{1};
                const auto name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(j + 1);
                ResidualBlock<T> b;
                b.conv1 = Conv2d<T>(name + ".conv1", in, w[s], 3, stride);
                b.bn1 = BatchNorm2d<T>(name + ".bn1", w[s]);
                b.conv2 = Conv2d<T>(name + ".conv2", w[s], w[s], 3, 1);
                b.bn2 = BatchNorm2d<T>(name + ".bn2", w[s]);
                if (stride != 1 || in != w[s]) {
                    b.proj = Conv2d<T>(name + ".proj", in, w[s], 1, stride);
                    b.proj_bn = BatchNorm2d<T>(name + ".proj_bn", w[s]);
                }
                blocks_.push_back(std::move(b));
                in = w[s];
            }
        }
        head_w_ = Param<T>("head.weight", {config_.n_classes, feature_width()}, false);
        head_b_ = Param<T>("head.bias", {config_.n_classes}, false);
    }

    void init_head(Rng& rng) {
        const double std = std::sqrt(1.0 / static_cast<double>(feature_width()));
        for (auto& v : head_w_.value.values()) v = static_cast<T>(rng.normal(0.0, std));
        head_b_.value.fill(T{0});
    }

    void collect(std::vector<Param<T>*>& out) {
        out.push_back(&stem_.weight);
        out.push_back(&stem_bn_.gamma);
        out.push_back(&stem_bn_.beta);
        for (auto& b : blocks_) {
            out.push_back(&b.conv1.weight);
            out.push_back(&b.bn1.gamma);
            out.push_back(&b.bn1.beta);
            out.push_back(&b.conv2.weight);
            out.push_back(&b.bn2.gamma);
            out.push_back(&b.bn2.beta);
            if (b.proj) {
                out.push_back(&b.proj->weight);
                out.push_back(&b.proj_bn->gamma);
                out.push_back(&b.proj_bn->beta);
            }
        }
        out.push_back(&head_w_);
        out.push_back(&head_b_);
    }

    std::vector<BatchNorm2d<T>*> norms() {
        std::vector<BatchNorm2d<T>*> out{&stem_bn_};
        for (auto& b : blocks_) {
            out.push_back(&b.bn1);
            out.push_back(&b.bn2);
            if (b.proj_bn) out.push_back(&*b.proj_bn);
        }
        return out;
    }

    Activation<T> to_activation(const Tensor<T>& batch) const {
        if (batch.rank() != 4) throw DataError("network input must be (B, C, S, S), got " + shape_string(batch.shape()));
        const auto bsz = batch.dim(0);
        const auto c = batch.dim(1);
        const auto h = batch.dim(2);
        const auto w = batch.dim(3);
        if (c != config_.in_channels) {
            throw DataError("network expects " + std::to_string(config_.in_channels) + " channels, got " +
                            std::to_string(c));
        }
        if (h != w || h < 3 || h % 2 == 0) {
            throw DataError("network input must be square with odd side >= 3, got " + shape_string(batch.shape()));
        }
        if (bsz == 0) throw DataError("empty batch");
        Activation<T> a(c, bsz, h, w);
        const auto area = h * w;
        for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t ci = 0; ci < c; ++ci) {
                std::copy_n(batch.data() + (b * c + ci) * area, area, a.v.data() + (ci * bsz + b) * area);
            }
        }
        return a;
    }

    Tensor<T> run(const Tensor<T>& batch, Mode mode, ForwardCache<T>* cache) {
        auto x = to_activation(batch);
        const auto bsz = x.b;
        std::vector<T> scratch;
        std::vector<T>& stem_col = cache ? cache->stem_col : scratch;
        auto a = stem_.forward(x, stem_col);
        stem_bn_.forward_inplace(a, mode, cache ? &cache->stem_bn : nullptr);
        relu_inplace(a);
        if (cache) {
            cache->batch = bsz;
            cache->stem_out = a;
            cache->blocks.resize(blocks_.size());
        }
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            a = block_forward(blocks_[i], a, mode, cache ? &cache->blocks[i] : nullptr);
        }
        const auto f = a.c;
        const auto area = a.h * a.w;
        Tensor<T> pooled({bsz, f});
        for (std::size_t c = 0; c < f; ++c) {
            for (std::size_t b = 0; b < bsz; ++b) {
                const T* src = a.v.data() + (c * bsz + b) * area;
                T s{0};
                for (std::size_t i = 0; i < area; ++i) s += src[i];
                pooled.at(b, c) = s / static_cast<T>(area);
            }
        }
        const auto k = config_.n_classes;
        Tensor<T> logits({bsz, k});
        for (std::size_t b = 0; b < bsz; ++b) {
            for (std::size_t i = 0; i < k; ++i) logits.at(b, i) = head_b_.value[i];
        }
        gemm<T>(false, true, bsz, k, f, T{1}, pooled.data(), head_w_.value.data(), T{1}, logits.data());
        if (cache) {
            cache->pooled = std::move(pooled);
            cache->valid = true;
        }
        return logits;
    }

    Activation<T> block_forward(ResidualBlock<T>& blk, const Activation<T>& x, Mode mode, BlockCache<T>* cache) {
        std::vector<T> s1, s2, sp;
        BlockCache<T> local;
        BlockCache<T>& bc = cache ? *cache : local;
        const bool keep = cache != nullptr;
        bc.in_c = x.c;
        bc.in_h = x.h;
        bc.in_w = x.w;
        auto h = blk.conv1.forward(x, keep ? bc.col1 : s1);
        blk.bn1.forward_inplace(h, mode, keep ? &bc.bn1 : nullptr);
        relu_inplace(h);
        auto y = blk.conv2.forward(h, keep ? bc.col2 : s2);
        blk.bn2.forward_inplace(y, mode, keep ? &bc.bn2 : nullptr);
        if (blk.proj) {
            auto sc = blk.proj->forward(x, keep ? bc.colp : sp);
            blk.proj_bn->forward_inplace(sc, mode, keep ? &bc.bnp : nullptr);
            for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += sc.v[i];
        } else {
            for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += x.v[i];
        }
        relu_inplace(y);
        if (keep) {
            bc.mid = std::move(h);
            bc.out = y;
        }
        return y;
    }

    Activation<T> block_backward(ResidualBlock<T>& blk, BlockCache<T>& bc, Activation<T> d) {
        relu_backward_inplace(d, bc.out);
        Activation<T> dx(bc.in_c, d.b, bc.in_h, bc.in_w);
        if (blk.proj) {
            Activation<T> dsc = d;
            blk.proj_bn->backward_inplace(dsc, bc.bnp);
            blk.proj->backward(dsc, bc.colp, &dx);
        } else {
            dx.v = d.v;
        }
        blk.bn2.backward_inplace(d, bc.bn2);
        Activation<T> dmid(bc.mid.c, bc.mid.b, bc.mid.h, bc.mid.w);
        blk.conv2.backward(d, bc.col2, &dmid);
        relu_backward_inplace(dmid, bc.mid);
        blk.bn1.backward_inplace(dmid, bc.bn1);
        blk.conv1.backward(dmid, bc.col1, &dx);
        return dx;
    }

    NetworkConfig config_;
    Conv2d<T> stem_;
    BatchNorm2d<T> stem_bn_;
    std::vector<ResidualBlock<T>> blocks_;
    Param<T> head_w_;
    Param<T> head_b_;
    ForwardCache<T> cache_;
};

/// Copy of `source` with a freshly initialized head of `n_new_classes`
/// outputs; feature-extractor parameters are frozen when `freeze_conv`.
template <class T>
Network<T> transfer(const Network<T>& source, std::size_t n_new_classes, bool freeze_conv, std::uint64_t seed) {
    if (n_new_classes < 2) throw UsageError("transfer: n_new_classes must be >= 2");
    Network<T> net = source;
    net.replace_head(n_new_classes, seed);
    net.set_conv_trainable(!freeze_conv);
    return net;
}

// Network file "NNET" v1, little-endian:
//   magic[4] version:u16 in_channels:u32 n_stages:u32 widths:u32[n_stages]
//   blocks_per_stage:u32 n_classes:u32 n_tensors:u32
//   then per tensor, in declaration order (each normalization layer's
//   running mean/var follow its bias):
//   kind:u8 (0 parameter, 1 running statistic) trainable:u8 rank:u8
//   dims:u32[rank] values:f32[prod(dims)]

inline constexpr std::uint16_t kNetworkFormatVersion = 1;

namespace detail {

template <class T>
void put_tensor(std::ostream& out, std::uint8_t kind, bool trainable, const std::vector<std::size_t>& shape,
                std::span<const T> values) {
    io::put_u8(out, kind);
    io::put_u8(out, trainable ? 1 : 0);
    io::put_u8(out, static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) io::put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : values) io::put_f32(out, static_cast<float>(v));
}

template <class T>
void get_tensor(std::istream& in, std::uint8_t kind, bool* trainable, const std::vector<std::size_t>& shape,
                std::span<T> values) {
    if (io::get_u8(in) != kind) throw DataError("network file: tensor kind mismatch");
    const bool tr = io::get_u8(in) != 0;
    if (trainable) *trainable = tr;
    const auto rank = io::get_u8(in);
    if (rank != shape.size()) throw DataError("network file: tensor rank mismatch");
    for (auto d : shape) {
        if (io::get_u32(in) != d) throw DataError("network file: tensor shape mismatch");
    }
    for (auto& v : values) v = static_cast<T>(io::get_f32(in));
}

} // namespace detail

template <class T>
void Network<T>::serialize(std::ostream& out) const {
    auto* self = const_cast<Network*>(this);
    io::put_magic(out, "NNET");
    io::put_u16(out, kNetworkFormatVersion);
    io::put_u32(out, static_cast<std::uint32_t>(config_.in_channels));
    io::put_u32(out, static_cast<std::uint32_t>(config_.stage_widths.size()));
    for (auto w : config_.stage_widths) io::put_u32(out, static_cast<std::uint32_t>(w));
    io::put_u32(out, static_cast<std::uint32_t>(config_.blocks_per_stage));
    io::put_u32(out, static_cast<std::uint32_t>(config_.n_classes));
    const auto params = self->parameters();
    const auto bns = self->norms();
    io::put_u32(out, static_cast<std::uint32_t>(params.size() + 2 * bns.size()));
    std::size_t bn_at = 0;
    for (const auto* p : params) {
        detail::put_tensor<T>(out, 0, p->trainable, p->value.shape(), p->value.values());
        if (bn_at < bns.size() && p == &bns[bn_at]->beta) {
            const auto* bn = bns[bn_at++];
            detail::put_tensor<T>(out, 1, false, {bn->channels}, bn->running_mean);
            detail::put_tensor<T>(out, 1, false, {bn->channels}, bn->running_var);
        }
    }
}

template <class T>
Network<T> Network<T>::deserialize(std::istream& in) {
    io::expect_magic(in, "NNET");
    if (io::get_u16(in) != kNetworkFormatVersion) throw DataError("unsupported network format version");
    NetworkConfig cfg;
    cfg.in_channels = io::get_u32(in);
    const auto stages = io::get_u32(in);
    if (stages == 0 || stages > 64) throw DataError("network file: implausible stage count");
    cfg.stage_widths.resize(stages);
    for (auto& w : cfg.stage_widths) w = io::get_u32(in);
    cfg.blocks_per_stage = io::get_u32(in);
    cfg.n_classes = io::get_u32(in);
    try {
        cfg.validate();
    } catch (const UsageError& e) {
        throw DataError(std::string("network file: ") + e.what());
    }
    Network net;
    net.config_ = cfg;
    net.build();
    const auto params = net.parameters();
    const auto bns = net.norms();
    if (io::get_u32(in) != params.size() + 2 * bns.size()) throw DataError("network file: tensor count mismatch");
    std::size_t bn_at = 0;
    for (auto* p : params) {
        detail::get_tensor<T>(in, 0, &p->trainable, p->value.shape(), p->value.values());
        if (bn_at < bns.size() && p == &bns[bn_at]->beta) {
            auto* bn = bns[bn_at++];
            detail::get_tensor<T>(in, 1, nullptr, {bn->channels}, std::span<T>(bn->running_mean));
            detail::get_tensor<T>(in, 1, nullptr, {bn->channels}, std::span<T>(bn->running_var));
        }
    }
    return net;
}

template <class T>
void save_network(const std::filesystem::path& path, const Network<T>& net) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write network: " + path.string());
    net.serialize(out);
}

template <class T = float>
Network<T> load_network(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open network: " + path.string());
    return Network<T>::deserialize(in);
}

} // namespace habmap::nnet
