#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "rfd/adversarial.hpp"
#include "support/fd_check.hpp"
#include "support/stats.hpp"

using namespace rfd;
using rfd::testing::binomial_interval;

namespace {

NetConfig small_net() {
    NetConfig c;
    c.width = 8;
    c.depth = 12;
    c.time_dim = 4;
    c.cond_dim = 4;
    return c;
}

DiscConfig small_disc() {
    DiscConfig d;
    d.hidden = 6;
    d.pool_group = 4;
    return d;
}

Conditions cycle_conditions(std::size_t n) {
    Conditions c(n);
    for (std::size_t r = 0; r < n; ++r) c[r] = r % 3 == 0 ? Condition::null() : Condition::of(r % 8);
    return c;
}

void zero_last_layer(DiscriminatorBank& bank) {
    for (std::size_t h = 0; h < bank.size(); ++h)
        for (auto& p : bank.head(h).params())
            if (p.name == "l7.w") p.value = Tensor::zeros_like(p.value);
}

LevelFeatures constant_features(const DiscriminatorBank& bank, std::size_t rows, std::size_t width, double v) {
    return LevelFeatures(bank.num_levels(), std::vector<Tensor>(bank.num_taps(), Tensor::matrix(rows, width, v)));
}

} // namespace

TEST(Bank, HeadCountIsTapsTimesLevels) {
    Rng rng(1);
    DiscriminatorBank bank(DiscConfig{}, 64, rng);
    EXPECT_EQ(bank.size(), 35u);
    EXPECT_EQ(bank.head(0).params().size(), 8u * 2 + 7u * 2);
    EXPECT_EQ(bank.head_index(4, 6), 34u);
    DiscConfig three;
    three.t_star_levels = {0.9, 0.5, 0.1};
    three.taps.layers = {1, 2};
    EXPECT_EQ(DiscriminatorBank(three, 8, rng).size(), 6u);
}

TEST(Bank, RejectsInvalidConfig) {
    Rng rng(1);
    DiscConfig bad;
    bad.t_star_levels = {1.0};
    EXPECT_THROW(DiscriminatorBank(bad, 8, rng), Error);
    bad = DiscConfig{};
    bad.refresh_p = 1.5;
    EXPECT_THROW(DiscriminatorBank(bad, 8, rng), Error);
}

TEST(Features, SevenTapsPerLevelAndDeterministic) {
    Rng init(2);
    const VelocityNet proxy(small_net(), init);
    Rng data(3);
    const Tensor x0 = data.normal_tensor({16, 2});
    const Conditions c = cycle_conditions(16);
    Rng a(5), b(5);
    const LevelFeatures fa = extract_disc_features(proxy, x0, c, DiscConfig{}, a);
    const LevelFeatures fb = extract_disc_features(proxy, x0, c, DiscConfig{}, b);
    ASSERT_EQ(fa.size(), 5u);
    for (std::size_t l = 0; l < fa.size(); ++l) {
        ASSERT_EQ(fa[l].size(), 7u);
        for (std::size_t k = 0; k < 7; ++k) {
            EXPECT_EQ(fa[l][k].shape(), (Shape{16, 8}));
            EXPECT_EQ(fa[l][k], fb[l][k]);
        }
    }
    DiscConfig zero = DiscConfig{};
    zero.t_star_levels = {0.0};
    EXPECT_THROW(extract_disc_features(proxy, x0, c, zero, a), Error);
}

TEST(Features, RecordedPathMatchesValuesAndReachesX0) {
    Rng init(2);
    const VelocityNet proxy(small_net(), init);
    Rng data(3);
    const Tensor x0 = data.normal_tensor({8, 2});
    const Conditions c = cycle_conditions(8);
    Rng a(7), b(7);
    const LevelFeatures plain = extract_disc_features(proxy, x0, c, DiscConfig{}, a);
    Tape tape;
    auto bound = proxy.bind(tape, false);
    Var x = tape.leaf(x0);
    auto recorded = extract_disc_features(tape, proxy, bound, x, c, DiscConfig{}, b);
    for (std::size_t l = 0; l < plain.size(); ++l)
        for (std::size_t k = 0; k < plain[l].size(); ++k)
            EXPECT_LT(max_abs_diff(plain[l][k], recorded[l][k].value()), 1e-12);
    tape.backward(sum(recorded[0][3]));
    EXPECT_GT(squared_norm(x.grad()), 0.0);
    for (const Var& p : bound) EXPECT_FALSE(p.requires_grad());
}

TEST(DiscLoss, ZeroLogitsGiveTwoLn2PerHead) {
    Rng rng(4);
    DiscriminatorBank bank(small_disc(), 5, rng);
    zero_last_layer(bank);
    Rng f(5);
    LevelFeatures real = constant_features(bank, 8, 5, 0.0), fake = real;
    for (auto& level : real)
        for (auto& t : level) t = f.normal_tensor({8, 5});
    EXPECT_NEAR(bank.disc_loss(real, fake), 35.0 * 2.0 * std::numbers::ln2, 1e-12);
    Tape tape;
    std::vector<std::vector<Var>> fv;
    for (auto& level : fake) {
        fv.emplace_back();
        for (auto& t : level) fv.back().push_back(tape.constant(t));
    }
    EXPECT_NEAR(bank.gen_loss(tape, fv).value().item(), 35.0 * std::numbers::ln2, 1e-12);
}

TEST(DiscLoss, SaturatedLogits) {
    Tape tape;
    Var real = tape.constant(Tensor::matrix(4, 1, 20.0));
    Var fake = tape.constant(Tensor::matrix(4, 1, -20.0));
    const double separated = disc_loss_from_logits(real, fake).value().item();
    EXPECT_GE(separated, 0.0);
    EXPECT_LT(separated, 1e-8);
    EXPECT_LT(gen_loss_from_logits(real).value().item(), 1e-8);
    EXPECT_NEAR(gen_loss_from_logits(tape.constant(Tensor::matrix(3, 1))).value().item(), std::numbers::ln2, 1e-15);
}

TEST(DiscLoss, LogDifferenceFormHandValues) {
    Tape tape;
    Var zero = tape.constant(Tensor::matrix(2, 1));
    EXPECT_EQ(log_difference_disc_loss(zero, zero).value().item(), 0.0);
    Var r = tape.constant(Tensor::matrix(1, 1, 1.0));
    Var f = tape.constant(Tensor::matrix(1, 1, -2.0));
    const double expected = std::log1p(std::exp(-1.0)) - std::log1p(std::exp(2.0));
    EXPECT_NEAR(log_difference_disc_loss(r, f).value().item(), expected, 1e-14);
}

TEST(DiscLoss, HeadParameterGradientMatchesFiniteDifferences) {
    Rng rng(6);
    const DiscriminatorHead head(5, 6, rng);
    std::vector<Tensor> inputs;
    for (const auto& p : head.params()) inputs.push_back(p.value);
    const std::size_t np = inputs.size();
    inputs.push_back(rng.normal_tensor({8, 5}));
    inputs.push_back(rng.normal_tensor({8, 5}));
    std::vector<bool> diff(inputs.size(), true);
    diff[np] = diff[np + 1] = false;
    auto f = [&](Tape&, const std::vector<Var>& v) {
        std::span<const Var> bound(v.data(), np);
        return disc_loss_from_logits(head.forward(bound, v[np], 4), head.forward(bound, v[np + 1], 4));
    };
    const auto r = rfd::testing::check_gradients(f, inputs, 1e-5, diff);
    EXPECT_GT(r.checked, 300u);
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GenLoss, FeatureGradientMatchesFiniteDifferences) {
    Rng rng(7);
    const DiscriminatorHead head(5, 6, rng);
    std::vector<Tensor> inputs;
    for (const auto& p : head.params()) inputs.push_back(p.value);
    const std::size_t np = inputs.size();
    inputs.push_back(rng.normal_tensor({8, 5}));
    std::vector<bool> diff(inputs.size(), false);
    diff[np] = true;
    auto f = [&](Tape&, const std::vector<Var>& v) {
        return gen_loss_from_logits(head.forward(std::span<const Var>(v.data(), np), v[np], 4));
    };
    const auto r = rfd::testing::check_gradients(f, inputs, 1e-5, diff);
    EXPECT_EQ(r.checked, 40u);
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(DiscLoss, StructureMismatchThrows) {
    Rng rng(8);
    DiscriminatorBank bank(small_disc(), 5, rng);
    LevelFeatures ok = constant_features(bank, 8, 5, 0.1);
    LevelFeatures short_levels(ok.begin(), ok.end() - 1);
    EXPECT_THROW(bank.disc_loss(ok, short_levels), Error);
    LevelFeatures wide = constant_features(bank, 8, 6, 0.1);
    EXPECT_THROW(bank.disc_step(ok, wide), Error);
    // Rows must fill whole pool groups.
    LevelFeatures ragged = constant_features(bank, 6, 5, 0.1);
    EXPECT_THROW(bank.disc_loss(ragged, ragged), Error);
}

TEST(DiscStep, DescendsOnSeparableBatch) {
    Rng rng(9);
    DiscConfig cfg = small_disc();
    cfg.t_star_levels = {0.5};
    cfg.taps.layers = {0, 1};
    DiscriminatorBank bank(cfg, 3, rng);
    Rng f(10);
    LevelFeatures real(1), fake(1);
    for (std::size_t k = 0; k < 2; ++k) {
        Tensor r = f.normal_tensor({16, 3}), g = f.normal_tensor({16, 3});
        for (double& v : r.storage()) v += 1.5;
        for (double& v : g.storage()) v -= 1.5;
        real[0].push_back(r);
        fake[0].push_back(g);
    }
    const double before = bank.disc_loss(real, fake);
    for (int i = 0; i < 60; ++i) bank.disc_step(real, fake);
    const double after = bank.disc_loss(real, fake);
    EXPECT_LT(after, 0.5 * before);
    for (const HeadStats& s : bank.last_stats()) EXPECT_GT(s.real_logit, s.fake_logit);
}

TEST(Passes, EachLeavesTheOtherNetworksUntouched) {
    Rng init(11);
    const VelocityNet proxy(small_net(), init);
    VelocityNet student(small_net(), init);
    DiscConfig cfg;
    cfg.hidden = 6;
    cfg.pool_group = 4;
    DiscriminatorBank bank(cfg, 8, init);
    Rng data(12);
    const Tensor x0 = data.normal_tensor({8, 2});
    const Conditions c = cycle_conditions(8);
    const auto proxy_hash = proxy.params().hash();
    const auto student_hash = student.params().hash();

    const LevelFeatures real = extract_disc_features(proxy, x0, c, cfg, data);
    const LevelFeatures fake = extract_disc_features(proxy, student.velocity(x0, std::vector<double>{0.5}, c), c, cfg, data);
    const auto bank_before = bank.hash();
    bank.disc_step(real, fake);
    EXPECT_NE(bank.hash(), bank_before);
    EXPECT_EQ(proxy.params().hash(), proxy_hash);
    EXPECT_EQ(student.params().hash(), student_hash);

    const auto bank_hash = bank.hash();
    Tape tape;
    auto sb = student.bind(tape, true);
    auto pb = proxy.bind(tape, false);
    const double ts[1] = {1.0};
    Var x = student.forward(tape, sb, tape.constant(x0), ts, c).velocity;
    Var loss = bank.gen_loss(tape, extract_disc_features(tape, proxy, pb, x, c, cfg, data));
    tape.backward(loss);
    EXPECT_EQ(bank.hash(), bank_hash);
    EXPECT_EQ(proxy.params().hash(), proxy_hash);
    EXPECT_GT(global_norm(collect_grads(tape, sb)), 0.0);
}

TEST(Refresh, ZeroProbabilityTouchesNothing) {
    Rng rng(13);
    DiscConfig cfg = small_disc();
    cfg.refresh_p = 0.0;
    DiscriminatorBank bank(cfg, 4, rng);
    const auto h = bank.hash();
    for (int i = 0; i < 100; ++i) EXPECT_EQ(bank.refresh(rng), 0u);
    EXPECT_EQ(bank.hash(), h);
}

TEST(Refresh, FullProbabilityResetsEveryHeadAndItsMoments) {
    Rng rng(14);
    DiscConfig cfg = small_disc();
    cfg.refresh_p = 1.0;
    DiscriminatorBank bank(cfg, 4, rng);
    LevelFeatures real = constant_features(bank, 8, 4, 0.0), fake = real;
    Rng f(15);
    for (auto* side : {&real, &fake})
        for (auto& level : *side)
            for (auto& t : level) t = f.normal_tensor({8, 4});
    bank.disc_step(real, fake);
    std::vector<std::uint64_t> before;
    for (std::size_t h = 0; h < bank.size(); ++h) {
        EXPECT_FALSE(bank.optimizer(h).moments_zero());
        before.push_back(bank.head(h).params().hash());
    }
    EXPECT_EQ(bank.refresh(rng), bank.size());
    for (std::size_t h = 0; h < bank.size(); ++h) {
        EXPECT_TRUE(bank.optimizer(h).moments_zero());
        EXPECT_NE(bank.head(h).params().hash(), before[h]);
    }
}

TEST(Refresh, CountFollowsBinomial) {
    Rng rng(16);
    DiscConfig cfg;
    cfg.hidden = 2;
    DiscriminatorBank bank(cfg, 2, rng);
    ASSERT_EQ(bank.size(), 35u);
    std::size_t total = 0;
    Rng draws(17);
    for (int i = 0; i < 10000; ++i) total += bank.refresh(draws);
    const auto [lo, hi] = binomial_interval(350000, 0.005, 0.99);
    EXPECT_LE(lo, 1750u);
    EXPECT_GE(hi, 1750u);
    EXPECT_GE(total, lo);
    EXPECT_LE(total, hi);
}

TEST(Stats, OneCsvRowPerHead) {
    Rng rng(18);
    DiscriminatorBank bank(small_disc(), 4, rng);
    const LevelFeatures feats = constant_features(bank, 8, 4, 0.3);
    bank.disc_step(feats, feats);
    io::CsvWriter csv(DiscriminatorBank::stats_header());
    bank.append_stats(csv, 7);
    EXPECT_EQ(csv.size(), 35u);
    for (const HeadStats& s : bank.last_stats()) {
        EXPECT_TRUE(std::isfinite(s.real_logit));
        EXPECT_EQ(s.real_logit, s.fake_logit);
    }
}
