#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "habmap/ssl.hpp"
#include "habmap/synth.hpp"

using namespace habmap;
using namespace habmap::ssl;
using nnet::Tensor;

namespace {

Tensor<double> random_simplex_rows(Rng& rng, std::size_t b, std::size_t c, double sharpness = 1.0) {
    Tensor<double> t({b, c});
    for (std::size_t i = 0; i < b; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < c; ++j) {
            t.at(i, j) = std::exp(sharpness * rng.normal());
            s += t.at(i, j);
        }
        for (std::size_t j = 0; j < c; ++j) t.at(i, j) /= s;
    }
    return t;
}

nnet::NetworkConfig small_config(std::size_t channels, std::size_t classes) {
    nnet::NetworkConfig c;
    c.in_channels = channels;
    c.stage_widths = {8};
    c.n_classes = classes;
    return c;
}

double best_permutation_agreement(const std::vector<int>& clusters, const std::vector<Patch>& patches) {
    std::size_t same = 0;
    for (std::size_t i = 0; i < clusters.size(); ++i) same += clusters[i] == *patches[i].center_class;
    const double a = static_cast<double>(same) / static_cast<double>(clusters.size());
    return std::max(a, 1.0 - a);
}

std::string net_bytes(const nnet::Network<float>& n) {
    std::ostringstream s;
    n.serialize(s);
    return s.str();
}

} // namespace

TEST(IicLoss, UniformRowsGiveZero) {
    Tensor<double> z({6, 3}, 1.0 / 3.0);
    const auto r = iic_loss(z, z);
    EXPECT_NEAR(r.loss, 0.0, 1e-12);
    for (double v : r.joint) EXPECT_NEAR(v, 1.0 / 9.0, 1e-15);
}

TEST(IicLoss, DiagonalJointGivesLn2) {
    Tensor<double> z({4, 2}, 0.0);
    z.at(0, 0) = z.at(1, 0) = 1.0;
    z.at(2, 1) = z.at(3, 1) = 1.0;
    const auto r = iic_loss(z, z);
    EXPECT_NEAR(-r.loss, std::numbers::ln2, 1e-6);
    EXPECT_NEAR(r.joint[0], 0.5, 1e-15);
    EXPECT_NEAR(r.joint[1], 0.0, 1e-15);
}

TEST(IicLoss, MutualInformationBoundsAndJointShape) {
    Rng rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto c = 2 + rng.below(6);
        const auto b = 1 + rng.below(20);
        const double sharp = rng.uniform(0.1, 6.0);
        const auto z = random_simplex_rows(rng, b, c, sharp);
        const auto zp = random_simplex_rows(rng, b, c, sharp);
        const auto r = iic_loss(z, zp);
        EXPECT_GE(-r.loss, -1e-12);
        EXPECT_LE(-r.loss, std::log(static_cast<double>(c)) + 1e-9);
        double total = 0;
        for (std::size_t i = 0; i < c; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                EXPECT_GE(r.joint[i * c + j], 0.0);
                EXPECT_EQ(r.joint[i * c + j], r.joint[j * c + i]);
                total += r.joint[i * c + j];
            }
        }
        EXPECT_NEAR(total, 1.0, 1e-6);
        EXPECT_EQ(iic_loss(zp, z).loss, r.loss);
    }
}

TEST(IicLoss, RejectsInvalidRows) {
    Tensor<double> z({2, 2}, 0.5);
    Tensor<double> bad({2, 2}, 0.7);
    EXPECT_THROW(iic_loss(z, bad), DataError);
    EXPECT_THROW(iic_loss(z, Tensor<double>({2, 3}, 1.0 / 3.0)), DataError);
    EXPECT_THROW(iic_loss(Tensor<double>({2, 1}, 1.0), Tensor<double>({2, 1}, 1.0)), DataError);
}

TEST(IicLoss, GradientMatchesFiniteDifferences) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto c = 2 + rng.below(4);
        const auto b = 2 + rng.below(6);
        auto z = random_simplex_rows(rng, b, c);
        auto zp = random_simplex_rows(rng, b, c);
        const auto r = iic_loss(z, zp);
        const double h = 1e-7;
        for (std::size_t i = 0; i < b * c; ++i) {
            for (auto* which : {&z, &zp}) {
                const double keep = (*which)[i];
                (*which)[i] = keep + h;
                const double up = iic_loss(z, zp).loss;
                (*which)[i] = keep - h;
                const double down = iic_loss(z, zp).loss;
                (*which)[i] = keep;
                const double numeric = (up - down) / (2 * h);
                const double analytic = which == &z ? r.grad_z[i] : r.grad_z_prime[i];
                EXPECT_NEAR(analytic, numeric, 1e-6 * std::max(1.0, std::abs(numeric)));
            }
        }
    }
}

TEST(SoftmaxBackward, MatchesFiniteDifferences) {
    Rng rng(3);
    Tensor<double> logits({3, 4});
    Tensor<double> upstream({3, 4});
    for (std::size_t i = 0; i < 12; ++i) {
        logits[i] = rng.normal();
        upstream[i] = rng.normal();
    }
    auto objective = [&](const Tensor<double>& l) {
        const auto p = nnet::softmax_rows(l);
        double s = 0;
        for (std::size_t i = 0; i < 12; ++i) s += p[i] * upstream[i];
        return s;
    };
    const auto grad = softmax_backward(nnet::softmax_rows(logits), upstream);
    for (std::size_t i = 0; i < 12; ++i) {
        auto up = logits, down = logits;
        up[i] += 1e-6;
        down[i] -= 1e-6;
        EXPECT_NEAR(grad[i], (objective(up) - objective(down)) / 2e-6, 1e-8);
    }
}

static IicConfig two_texture_iic(std::size_t epochs) {
    IicConfig c;
    c.n_clusters = 2;
    c.epochs = epochs;
    c.batch_size = 64;
    c.lr = 3e-3;
    c.input_size = 9;
    c.seed = 3;
    return c;
}

TEST(UnlabeledPatch, DropsLabelAndKeepsId) {
    const auto patches = synth::two_texture_patches(4, 5, 2, 0.1, 1);
    const auto un = strip_labels(patches);
    ASSERT_EQ(un.size(), 4u);
    for (std::size_t i = 0; i < un.size(); ++i) {
        EXPECT_FALSE(un[i].pixels().center_class.has_value());
        EXPECT_FALSE(un[i].pixels().source_point.has_value());
        EXPECT_EQ(un[i].pixels().values, patches[i].values);
        EXPECT_EQ(un[i].id(), *patches[i].source_point);
    }
}

TEST(IicPretrain, ClustersTwoTextures) {
    const auto patches = synth::two_texture_patches(256, 9, 2, 0.5, 1);
    const auto un = strip_labels(patches);
    nnet::Network<float> net(small_config(2, 2), 3);
    const auto log = iic_pretrain(net, std::span<const UnlabeledPatch>(un), two_texture_iic(30));
    ASSERT_EQ(log.size(), 30u);
    EXPECT_LT(log.back(), log.front());
    EXPECT_GE(best_permutation_agreement(cluster_assignments(net, std::span<const UnlabeledPatch>(un), 9), patches), 0.9);
}

TEST(IicPretrain, SeededRunIsByteIdentical) {
    const auto patches = synth::two_texture_patches(64, 9, 2, 0.5, 2);
    const auto un = strip_labels(patches);
    auto cfg = two_texture_iic(2);
    cfg.restarts = 2;
    nnet::Network<float> a(small_config(2, 2), 1), b(small_config(2, 2), 1);
    const auto la = iic_pretrain(a, std::span<const UnlabeledPatch>(un), cfg);
    const auto lb = iic_pretrain(b, std::span<const UnlabeledPatch>(un), cfg);
    EXPECT_EQ(la, lb);
    EXPECT_EQ(net_bytes(a), net_bytes(b));
}

TEST(IicPretrain, KeepsLowestFinalLossRun) {
    const auto patches = synth::two_texture_patches(64, 9, 2, 0.5, 2);
    const auto un = strip_labels(patches);
    auto cfg = two_texture_iic(3);
    cfg.restarts = 3;
    std::vector<std::vector<double>> runs;
    nnet::Network<float> net(small_config(2, 2), 1);
    const auto kept = iic_pretrain(net, std::span<const UnlabeledPatch>(un), cfg, [&](std::size_t e, double loss) {
        if (e == 1) runs.emplace_back();
        runs.back().push_back(loss);
    });
    ASSERT_EQ(runs.size(), 3u);
    for (const auto& r : runs) ASSERT_EQ(r.size(), 3u);
    double best = runs[0].back();
    for (const auto& r : runs) best = std::min(best, r.back());
    EXPECT_EQ(kept.back(), best);
}

TEST(IicPretrain, RejectsBadConfig) {
    const auto un = strip_labels(synth::two_texture_patches(8, 9, 2, 0.5, 1));
    nnet::Network<float> net(small_config(2, 3), 1);
    EXPECT_THROW(iic_pretrain(net, std::span<const UnlabeledPatch>(un), two_texture_iic(1)), UsageError);
    nnet::Network<float> two(small_config(2, 2), 1);
    EXPECT_THROW(iic_pretrain(two, std::span<const UnlabeledPatch>(), two_texture_iic(1)), DataError);
    auto cfg = two_texture_iic(1);
    cfg.restarts = 0;
    EXPECT_THROW(iic_pretrain(two, std::span<const UnlabeledPatch>(un), cfg), UsageError);
}

TEST(PseudoLabel, ZeroHeadTeacherGivesUniformRows) {
    const auto un = strip_labels(synth::two_texture_patches(10, 7, 2, 0.5, 1));
    nnet::Network<float> teacher(small_config(2, 4), 1);
    teacher.zero_head();
    const auto set = pseudo_label(teacher, std::span<const UnlabeledPatch>(un), 7, 3, nnet::AugmentOps::flips_and_blur(), 9);
    ASSERT_EQ(set.size(), 10u);
    EXPECT_EQ(set.teacher_hash, teacher.hash());
    for (std::size_t i = 0; i < set.size(); ++i) {
        EXPECT_EQ(set.ids[i], un[i].id());
        for (float v : set.row(i)) EXPECT_NEAR(v, 0.25f, 1e-6f);
    }
}

TEST(PseudoLabel, RowsAreDistributionsAndDeterministic) {
    const auto un = strip_labels(synth::two_texture_patches(200, 7, 2, 0.5, 1));
    nnet::Network<float> teacher(small_config(2, 3), 4);
    const auto ops = nnet::AugmentOps::flips_and_blur();
    const auto a = pseudo_label(teacher, std::span<const UnlabeledPatch>(un), 7, 4, ops, 11);
    const auto b = pseudo_label(teacher, std::span<const UnlabeledPatch>(un), 7, 4, ops, 11);
    EXPECT_EQ(a.probabilities, b.probabilities);
    for (std::size_t i = 0; i < a.size(); ++i) {
        double s = 0;
        for (float v : a.row(i)) {
            EXPECT_GE(v, 0.0f);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, kPseudoRowTolerance);
    }
    nnet::Network<float> wrong(small_config(3, 3), 4);
    EXPECT_THROW(pseudo_label(wrong, std::span<const UnlabeledPatch>(un), 7, 0, ops, 1), DataError);
}

TEST(PseudoLabelFile, RoundTripAndCorruption) {
    const auto un = strip_labels(synth::two_texture_patches(5, 7, 2, 0.5, 1));
    nnet::Network<float> teacher(small_config(2, 3), 4);
    const auto set = pseudo_label(teacher, std::span<const UnlabeledPatch>(un), 7, 0, {}, 0);
    std::stringstream buf;
    write_pseudo_labels(buf, set);
    const auto bytes = buf.str();
    EXPECT_EQ(bytes.substr(0, 4), "PSLB");
    std::stringstream in(bytes);
    const auto back = read_pseudo_labels(in);
    EXPECT_EQ(back.ids, set.ids);
    EXPECT_EQ(back.n_classes, 3u);
    EXPECT_EQ(back.probabilities, set.probabilities);
    EXPECT_EQ(back.teacher_hash, set.teacher_hash);

    std::stringstream cut(bytes.substr(0, bytes.size() - 1));
    EXPECT_THROW(read_pseudo_labels(cut), DataError);
    auto skewed = bytes;
    skewed[skewed.size() - 2] = 0x7f; // last probability no longer sums with its row
    std::stringstream bad(skewed);
    EXPECT_THROW(read_pseudo_labels(bad), DataError);
    auto magic = bytes;
    magic[0] = 'X';
    std::stringstream wrong(magic);
    EXPECT_THROW(read_pseudo_labels(wrong), DataError);
}

static nnet::TrainConfig toy_train_config() {
    nnet::TrainConfig c;
    c.epochs = 8;
    c.batch_size = 32;
    c.lr = 3e-3;
    c.input_size = 7;
    c.augment = nnet::AugmentOps::flips_and_blur();
    c.seed = 5;
    return c;
}

TEST(NoisyStudent, EmptyUnlabeledSetMatchesPlainTraining) {
    const auto labeled = synth::two_texture_patches(40, 7, 2, 0.5, 1);
    auto cfg = toy_train_config();
    cfg.epochs = 3;
    nnet::Network<float> a(small_config(2, 2), 2), b(small_config(2, 2), 2);
    const auto la = nnet::train(a, std::span<const Patch>(labeled), {}, cfg);
    PseudoLabelSet none;
    none.n_classes = 2;
    const auto lb = noisy_student_train(b, std::span<const Patch>(labeled), {}, none, {}, cfg);
    ASSERT_EQ(la.size(), lb.size());
    for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i].train_loss, lb[i].train_loss);
    EXPECT_EQ(net_bytes(a), net_bytes(b));
}

TEST(NoisyStudent, StudentLearnsToyTask) {
    const auto labeled = synth::two_texture_patches(64, 7, 2, 0.5, 1);
    const auto unlabeled = strip_labels(synth::two_texture_patches(256, 7, 2, 0.5, 2));
    const auto test = synth::two_texture_patches(200, 7, 2, 0.5, 3);
    const auto cfg = toy_train_config();
    nnet::Network<float> teacher(small_config(2, 2), 1);
    nnet::train(teacher, std::span<const Patch>(labeled), {}, cfg);
    nnet::Network<float> student(small_config(2, 2), 2);
    const auto log = noisy_student_train(teacher, student, std::span<const Patch>(labeled),
                                         std::span<const UnlabeledPatch>(unlabeled), std::span<const Patch>(test), cfg, 2);
    ASSERT_EQ(log.size(), cfg.epochs);
    ASSERT_TRUE(log.back().val_weighted_f1.has_value());
    EXPECT_GE(nnet::accuracy(student, std::span<const Patch>(test), 7), 0.95);
}

TEST(NoisyStudent, RejectsMismatchedInputs) {
    const auto labeled = synth::two_texture_patches(8, 7, 2, 0.5, 1);
    const auto unlabeled = strip_labels(synth::two_texture_patches(4, 7, 2, 0.5, 2));
    nnet::Network<float> student(small_config(2, 2), 2);
    PseudoLabelSet short_set;
    short_set.n_classes = 2;
    EXPECT_THROW(noisy_student_train(student, std::span<const Patch>(labeled), std::span<const UnlabeledPatch>(unlabeled),
                                     short_set, {}, toy_train_config()),
                 DataError);
    nnet::Network<float> teacher(small_config(2, 3), 1);
    EXPECT_THROW(noisy_student_train(teacher, student, std::span<const Patch>(labeled),
                                     std::span<const UnlabeledPatch>(unlabeled), {}, toy_train_config()),
                 DataError);
}
