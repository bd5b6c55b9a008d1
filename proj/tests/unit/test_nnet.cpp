#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "habmap/nnet/train.hpp"
#include "support/gradcheck.hpp"

using namespace habmap;
using namespace habmap::nnet;

namespace {

NetworkConfig tiny_config(std::vector<std::size_t> widths = {4}, std::size_t k = 3, std::size_t channels = 2) {
    NetworkConfig cfg;
    cfg.in_channels = channels;
    cfg.stage_widths = std::move(widths);
    cfg.n_classes = k;
    return cfg;
}

Patch constant_patch(std::size_t channels, std::size_t side, float value, std::optional<int> label = {}) {
    Patch p;
    p.channels = channels;
    p.size = side;
    p.values.assign(channels * side * side, value);
    p.center_class = label;
    return p;
}

Patch random_patch(std::size_t channels, std::size_t side, Rng& rng) {
    Patch p = constant_patch(channels, side, 0.0f);
    for (auto& v : p.values) v = static_cast<float>(rng.normal());
    return p;
}

/// Two classes separated by the sign of the channel means.
std::vector<Patch> separable_set(std::size_t n, std::size_t side, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Patch> out;
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        Patch p = random_patch(2, side, rng);
        for (auto& v : p.values) v = 0.3f * v + (label ? 1.0f : -1.0f);
        p.center_class = label;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<float> conv_bytes(Network<float>& net) {
    std::vector<float> out;
    for (auto* p : net.parameters()) {
        if (p->conv_stack) out.insert(out.end(), p->value.values().begin(), p->value.values().end());
    }
    return out;
}

} // namespace

TEST(Forward, DefaultShapeAtCropMax) {
    NetworkConfig cfg;
    cfg.n_classes = 25;
    Network<float> net(cfg, 1);
    Tensor<float> x({2, 14, 19, 19}, 0.5f);
    const auto y = net.forward(x, Mode::eval);
    EXPECT_EQ(y.shape(), (std::vector<std::size_t>{2, 25}));
}

TEST(Forward, MinimumCropSize) {
    NetworkConfig cfg;
    cfg.n_classes = 25;
    Network<float> net(cfg, 2);
    Tensor<float> x({1, 14, 3, 3}, 0.1f);
    EXPECT_EQ(net.forward(x, Mode::train).shape(), (std::vector<std::size_t>{1, 25}));
}

TEST(Forward, ZeroHeadGivesZeroLogits) {
    Network<float> net(tiny_config({4, 8}), 3);
    net.zero_head();
    const auto x = test_support::random_input(3, 2, 7, 5);
    Tensor<float> xf({3, 2, 7, 7});
    for (std::size_t i = 0; i < xf.size(); ++i) xf[i] = static_cast<float>(x[i]);
    const auto logits = net.forward(xf, Mode::eval);
    for (float v : logits.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Forward, RejectsBadInputs) {
    Network<float> net(tiny_config(), 1);
    EXPECT_THROW(net.forward(Tensor<float>({1, 3, 5, 5}), Mode::eval), DataError);
    EXPECT_THROW(net.forward(Tensor<float>({1, 2, 4, 4}), Mode::eval), DataError);
    EXPECT_THROW(net.forward(Tensor<float>({1, 2, 1, 1}), Mode::eval), DataError);
}

TEST(Forward, EvalIsDeterministic) {
    Network<double> net(tiny_config({4, 6}), 9);
    const auto x = test_support::random_input(4, 2, 9, 1);
    net.forward(x, Mode::train); // move running stats away from init
    EXPECT_EQ(net.forward(x, Mode::eval), net.forward(x, Mode::eval));
    EXPECT_EQ(net.predict(x), net.forward(x, Mode::eval));
}

TEST(Forward, AdaptivePoolingIsSizeInvariantOnConstantInput) {
    Network<double> net(tiny_config({5}, 4), 11);
    net.forward(test_support::random_input(4, 2, 7, 2), Mode::train);
    const auto small = net.predict(Tensor<double>({1, 2, 3, 3}, 0.7));
    const auto large = net.predict(Tensor<double>({1, 2, 19, 19}, 0.7));
    for (std::size_t i = 0; i < small.size(); ++i) EXPECT_NEAR(small[i], large[i], 1e-12);
}

TEST(Softmax, Examples) {
    const auto half = softmax(std::vector<double>{0.0, 0.0});
    EXPECT_DOUBLE_EQ(half[0], 0.5);
    EXPECT_DOUBLE_EQ(half[1], 0.5);
    const auto q = softmax(std::vector<double>{std::log(1.0), std::log(3.0)});
    EXPECT_NEAR(q[0], 0.25, 1e-15);
    EXPECT_NEAR(q[1], 0.75, 1e-15);
    const auto a = softmax(std::vector<double>{0.3, -1.2, 2.0});
    const auto b = softmax(std::vector<double>{100.3, 98.8, 102.0});
    double sum = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_NEAR(a[i], b[i], 1e-12);
        EXPECT_GE(a[i], 0.0);
        sum += a[i];
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_THROW(softmax(std::vector<double>{0.0, std::nan("")}), NumericalError);
}

TEST(CrossEntropy, UniformPrediction) {
    Tensor<double> logits({1, 2}, 0.0);
    const std::vector<int> y{0};
    EXPECT_NEAR(cross_entropy(logits, std::span<const int>(y)).loss, std::log(2.0), 1e-15);
}

TEST(CrossEntropy, SaturatedLogits) {
    Tensor<double> logits({1, 2}, std::vector<double>{10.0, -10.0});
    const std::vector<int> y{0};
    const double expected = std::log1p(std::exp(-20.0));
    EXPECT_NEAR(cross_entropy(logits, std::span<const int>(y)).loss, expected, 1e-20);
    EXPECT_NEAR(expected, 2.06e-9, 0.01e-9);
}

TEST(CrossEntropy, SoftTargetEqualToPredictionGivesEntropy) {
    Tensor<double> logits({1, 3}, std::vector<double>{0.2, 1.1, -0.4});
    const auto p = softmax(logits.row(0));
    Tensor<double> target({1, 3}, p);
    double entropy = 0.0;
    for (double v : p) entropy -= v * std::log(v);
    EXPECT_NEAR(cross_entropy(logits, target).loss, entropy, 1e-12);
}

TEST(CrossEntropy, RejectsInvalidSoftTargets) {
    Tensor<double> logits({1, 2}, 0.0);
    EXPECT_THROW(cross_entropy(logits, Tensor<double>({1, 2}, std::vector<double>{0.7, 0.7})), DataError);
    EXPECT_THROW(cross_entropy(logits, Tensor<double>({1, 2}, std::vector<double>{1.5, -0.5})), DataError);
}

TEST(Backward, GradientCheckSingleStage) {
    Network<double> net(tiny_config({4}), 7);
    const auto x = test_support::random_input(3, 2, 5, 13);
    const auto r = test_support::gradient_check(net, x, {0, 2, 1});
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "]";
    EXPECT_EQ(r.checked, net.parameter_count());
}

TEST(Backward, GradientCheckWithDownsampling) {
    Network<double> net(tiny_config({3, 4}), 8);
    const auto x = test_support::random_input(4, 2, 7, 14);
    const auto r = test_support::gradient_check(net, x, {2, 0, 1, 1});
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "]";
}

TEST(Backward, SaturatedTargetGivesVanishingGradient) {
    Network<double> net(tiny_config({4}, 2), 4);
    for (auto* p : net.parameters()) {
        if (p->name == "head.weight") p->value.fill(0.0);
        if (p->name == "head.bias") {
            p->value[0] = 60.0;
            p->value[1] = -60.0;
        }
    }
    const auto x = test_support::random_input(2, 2, 5, 3);
    const std::vector<int> y{0, 0};
    net.zero_grad();
    const auto loss = cross_entropy(net.forward(x, Mode::train), std::span<const int>(y));
    net.backward(loss.grad);
    double norm = 0.0;
    for (const auto* p : net.parameters()) {
        for (double g : p->grad.values()) norm += g * g;
    }
    EXPECT_LT(std::sqrt(norm), 1e-6);
}

TEST(Backward, FrozenStackOnlyHeadGradients) {
    Network<double> net(tiny_config({4, 4}), 5);
    net.set_conv_trainable(false);
    const auto x = test_support::random_input(3, 2, 5, 6);
    const std::vector<int> y{0, 1, 2};
    net.zero_grad();
    net.backward(cross_entropy(net.forward(x, Mode::train), std::span<const int>(y)).grad);
    bool head_nonzero = false;
    for (const auto* p : net.parameters()) {
        for (double g : p->grad.values()) {
            if (p->conv_stack) {
                ASSERT_EQ(g, 0.0) << p->name;
            } else if (g != 0.0) {
                head_nonzero = true;
            }
        }
    }
    EXPECT_TRUE(head_nonzero);
}

TEST(Adam, FirstStepClosedForm) {
    Param<double> p("w", {3});
    p.grad[0] = 1.0;
    p.grad[1] = 0.0;
    p.grad[2] = -0.003;
    AdamState<double> state;
    adam_step<double>({&p}, state, 1e-4);
    EXPECT_NEAR(p.value[0], -1e-4, 1e-11);
    EXPECT_EQ(p.value[1], 0.0);
    EXPECT_GT(p.value[2], 0.0);
}

TEST(Adam, SkipsFrozenParameters) {
    Param<double> p("w", {2});
    p.grad.fill(1.0);
    p.trainable = false;
    AdamState<double> state;
    adam_step<double>({&p}, state, 1e-2);
    EXPECT_EQ(p.value[0], 0.0);
}

TEST(Augment, HflipIsInvolution) {
    Rng rng(3);
    const auto p = random_patch(3, 7, rng);
    EXPECT_EQ(hflip(hflip(p)).values, p.values);
    EXPECT_EQ(vflip(vflip(p)).values, p.values);
    EXPECT_NE(hflip(p).values, p.values);
}

TEST(Augment, HflipPreservesChannelMeans) {
    Rng rng(4);
    const auto p = random_patch(2, 9, rng);
    const auto f = hflip(p);
    for (std::size_t c = 0; c < 2; ++c) {
        std::vector<float> a(p.values.begin() + c * 81, p.values.begin() + (c + 1) * 81);
        std::vector<float> b(f.values.begin() + c * 81, f.values.begin() + (c + 1) * 81);
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        EXPECT_EQ(a, b);
    }
}

TEST(Augment, BlurKeepsConstantPatch) {
    const auto p = constant_patch(2, 9, 1.25f);
    for (double sigma : {0.1, 0.7, 2.0}) {
        const auto b = gaussian_blur(p, sigma);
        for (float v : b.values) EXPECT_NEAR(v, 1.25f, 1e-6f);
    }
    const auto k = gaussian_kernel(1.2);
    EXPECT_EQ(k.size(), 2 * 4 + 1u);
}

TEST(Augment, CenterCropRangeAndCenter) {
    Rng rng(5);
    auto p = random_patch(1, 49, rng);
    AugmentOps ops;
    ops.center_crop = true;
    ops.crop_max = 19;
    std::set<std::size_t> seen;
    for (int i = 0; i < 400; ++i) {
        const auto c = augment(p, ops, rng);
        ASSERT_EQ(c.size % 2, 1u);
        ASSERT_GE(c.size, 3u);
        ASSERT_LE(c.size, 19u);
        ASSERT_EQ(c.at(0, c.center(), c.center()), p.at(0, 24, 24));
        seen.insert(c.size);
    }
    EXPECT_EQ(seen.size(), 9u);
}

TEST(Augment, RejectsBadSizes) {
    Rng rng(1);
    AugmentOps ops;
    ops.center_crop = true;
    ops.crop_min = 7;
    ops.crop_max = 5;
    EXPECT_THROW(augment(constant_patch(1, 9, 0.0f), ops, rng), UsageError);
    ops.crop_min = 3;
    ops.crop_max = 5;
    EXPECT_THROW(augment(constant_patch(1, 8, 0.0f), ops, rng), UsageError);
}

TEST(Train, OverfitsSeparableToySet) {
    Network<float> net(tiny_config({4}, 2), 21);
    const auto data = separable_set(20, 5, 1);
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 5;
    cfg.lr = 1e-3;
    cfg.input_size = 5;
    cfg.seed = 3;
    train<float>(net, data, {}, cfg);
    EXPECT_EQ(accuracy(net, std::span<const Patch>(data), 5), 1.0);
}

TEST(Train, FreezeKeepsConvolutionBytes) {
    Network<float> net(tiny_config({4, 4}, 2), 22);
    const auto before = conv_bytes(net);
    const auto data = separable_set(16, 5, 2);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 4;
    cfg.lr = 1e-2;
    cfg.input_size = 5;
    cfg.freeze_conv = true;
    cfg.augment = AugmentOps::flips_and_blur();
    const auto head_before = net.parameters().back()->value;
    train<float>(net, data, {}, cfg);
    EXPECT_EQ(conv_bytes(net), before);
    EXPECT_NE(net.parameters().back()->value, head_before);
}

TEST(Train, SeededRunsRepeat) {
    const auto data = separable_set(12, 7, 3);
    const auto val = separable_set(6, 7, 4);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 4;
    cfg.lr = 1e-3;
    cfg.input_size = 7;
    cfg.crop_augment = true;
    cfg.augment = AugmentOps::flips_and_blur();
    cfg.seed = 17;
    auto run = [&] {
        Network<float> net(tiny_config({4}, 2), 30);
        auto log = train<float>(net, data, val, cfg);
        return std::make_pair(log, net.hash());
    };
    const auto a = run();
    const auto b = run();
    ASSERT_EQ(a.first.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(a.first[i].train_loss, b.first[i].train_loss);
        EXPECT_TRUE(a.first[i].val_weighted_f1.has_value());
        EXPECT_EQ(a.first[i].val_weighted_f1, b.first[i].val_weighted_f1);
    }
    EXPECT_EQ(a.second, b.second);
}

TEST(Train, EmptySetRejected) {
    Network<float> net(tiny_config(), 1);
    EXPECT_THROW(train<float>(net, {}, {}, TrainConfig{}), DataError);
}

TEST(Transfer, SameSizeDiffersOnlyByHead) {
    Network<double> src(tiny_config({4, 4}), 40);
    src.forward(test_support::random_input(4, 2, 5, 8), Mode::train);
    auto dst = transfer(src, 3, false, 99);
    EXPECT_FALSE(dst.conv_frozen());
    const auto x = test_support::random_input(2, 2, 7, 9);
    EXPECT_NE(dst.predict(x), src.predict(x));
    auto sp = src.parameters();
    auto dp = dst.parameters();
    for (std::size_t i = 0; i < sp.size(); ++i) {
        if (sp[i]->conv_stack) {
            EXPECT_EQ(sp[i]->value, dp[i]->value);
        } else {
            dp[i]->value = sp[i]->value;
        }
    }
    EXPECT_EQ(dst.predict(x), src.predict(x));
}

TEST(Transfer, CoarseToFineHead) {
    Network<float> src(tiny_config({4}, 44), 1);
    auto dst = transfer(src, 25, true, 2);
    EXPECT_EQ(dst.config().n_classes, 25u);
    EXPECT_TRUE(dst.conv_frozen());
    EXPECT_EQ(dst.predict(Tensor<float>({1, 2, 3, 3}, 0.0f)).shape(), (std::vector<std::size_t>{1, 25}));
    EXPECT_THROW(transfer(src, 1, false, 2), UsageError);
}

TEST(NetworkFile, RoundTrip) {
    Network<float> net(tiny_config({4, 8}, 5), 50);
    net.forward(Tensor<float>({2, 2, 5, 5}, 0.3f), Mode::train);
    net.set_conv_trainable(false);
    std::stringstream s;
    net.serialize(s);
    const auto bytes = s.str();
    EXPECT_EQ(bytes.substr(0, 4), "NNET");
    auto back = Network<float>::deserialize(s);
    EXPECT_TRUE(back.conv_frozen());
    EXPECT_EQ(back.hash(), net.hash());
    Tensor<float> x({1, 2, 5, 5}, -0.2f);
    EXPECT_EQ(back.predict(x), net.predict(x));
}

TEST(NetworkFile, RejectsCorruption) {
    std::stringstream s("NNXT....");
    EXPECT_THROW(Network<float>::deserialize(s), DataError);
    Network<float> net(tiny_config(), 1);
    std::stringstream good;
    net.serialize(good);
    std::stringstream truncated(good.str().substr(0, good.str().size() / 2));
    EXPECT_THROW(Network<float>::deserialize(truncated), DataError);
}
