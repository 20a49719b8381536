#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "rfd/eval.hpp"
#include "rfd/ndcore/rng.hpp"
#include "rfd/teacher.hpp"

using namespace rfd;

namespace {

Tensor shuffled(const Tensor& a, std::uint64_t seed) {
    std::vector<std::size_t> idx(a.rows());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
    return gather_rows(a, idx);
}

} // namespace

TEST(Mmd, IdenticalSetsGiveZero) {
    Rng rng(1);
    const Tensor a = rng.normal_tensor({300, 2});
    EXPECT_NEAR(mmd_rbf(a, a), 0.0, 1e-12);
    EXPECT_NEAR(mmd_rbf(a, shuffled(a, 2)), 0.0, 1e-12);
}

TEST(Mmd, DistantPointMassesApproachTwo) {
    const Tensor a = Tensor::matrix(3, 2, {0, 0, 0, 0, 0, 0});
    const Tensor b = Tensor::matrix(2, 2, {50, 0, 50, 0});
    const double h = 1.0;
    const double expected = 2.0 * (1.0 - std::exp(-2500.0 / (2.0 * h * h)));
    EXPECT_NEAR(mmd_rbf(a, b, h), expected, 1e-12);
    // Moderate separation against the closed form 2 (1 - exp(-d^2 / 2h^2)).
    const Tensor c = Tensor::matrix(1, 2, {1.5, 0});
    EXPECT_NEAR(mmd_rbf(Tensor::matrix(1, 2, {0, 0}), c, 1.0), 2.0 * (1.0 - std::exp(-1.125)), 1e-12);
}

TEST(Mmd, PermutationInvariantBitExact) {
    Rng rng(3);
    const Tensor a = rng.normal_tensor({257, 2});
    const Tensor b = rng.normal_tensor({311, 2});
    const double ref = mmd_rbf(a, b);
    EXPECT_EQ(mmd_rbf(shuffled(a, 4), shuffled(b, 5)), ref);
    EXPECT_EQ(mmd_rbf(b, a), ref);
}

TEST(Mmd, AffineScaleConsistency) {
    Rng rng(6);
    const Tensor a = rng.normal_tensor({120, 2});
    Tensor b = rng.normal_tensor({90, 2});
    for (double& v : b.storage()) v += 0.4;
    auto affine = [](const Tensor& x) {
        Tensor y = x;
        for (std::size_t r = 0; r < y.rows(); ++r) {
            y.at(r, 0) = 3.0 * y.at(r, 0) + 1.0;
            y.at(r, 1) = 3.0 * y.at(r, 1) - 2.0;
        }
        return y;
    };
    EXPECT_NEAR(mmd_rbf(a, b, 0.7), mmd_rbf(affine(a), affine(b), 2.1), 1e-12);
    // The median heuristic scales along with the data.
    EXPECT_NEAR(mmd_rbf(a, b), mmd_rbf(affine(a), affine(b)), 1e-12);
}

TEST(Mmd, NonNegativeAndRejectsEmpty) {
    Rng rng(7);
    for (int i = 0; i < 20; ++i) {
        const Tensor a = rng.normal_tensor({40, 2});
        const Tensor b = rng.normal_tensor({35, 2});
        EXPECT_GE(mmd_rbf(a, b), -1e-12);
    }
    EXPECT_THROW(mmd_rbf(Tensor::matrix(0, 2), Tensor::matrix(3, 2)), Error);
    EXPECT_THROW(mmd_rbf(Tensor::matrix(2, 2), Tensor::matrix(3, 3)), Error);
}

TEST(Bandwidth, MedianOfHandExample) {
    // Points on a line at 0, 1, 3: distances {1, 2, 3}, median 2.
    const Tensor a = Tensor::matrix(2, 2, {0, 0, 1, 0});
    const Tensor b = Tensor::matrix(1, 2, {3, 0});
    EXPECT_EQ(median_pairwise_distance(a, b), 2.0);
}

TEST(EnergyDistance, HandExampleAndIdentity) {
    const Tensor a = Tensor::matrix(1, 2, {0, 0});
    const Tensor b = Tensor::matrix(1, 2, {3, 4});
    EXPECT_DOUBLE_EQ(energy_distance(a, b), 10.0);
    Rng rng(8);
    const Tensor c = rng.normal_tensor({100, 2});
    EXPECT_NEAR(energy_distance(c, shuffled(c, 9)), 0.0, 1e-12);
}

TEST(ModeCoverage, SingleModeAndUniform) {
    const Tensor centers = DataSpec{}.centers();
    Tensor at0 = Tensor::matrix(800, 2);
    for (std::size_t r = 0; r < 800; ++r) {
        at0.at(r, 0) = centers.at(0, 0);
        at0.at(r, 1) = centers.at(0, 1);
    }
    EXPECT_DOUBLE_EQ(mode_coverage(at0, centers, 0.9), 1.0 / 8.0);
    Tensor uniform = Tensor::matrix(800, 2);
    for (std::size_t r = 0; r < 800; ++r) {
        uniform.at(r, 0) = centers.at(r % 8, 0);
        uniform.at(r, 1) = centers.at(r % 8, 1);
    }
    EXPECT_DOUBLE_EQ(mode_coverage(uniform, centers, 0.9), 1.0);
    // A mode holding 1% of the samples falls below the 2% threshold.
    for (std::size_t r = 0; r < 8; ++r) {
        uniform.at(r * 8, 0) = centers.at(0, 0);
        uniform.at(r * 8, 1) = centers.at(0, 1);
    }
    EXPECT_DOUBLE_EQ(mode_coverage(uniform, centers, 0.9, 0.2), 0.0);
}

TEST(ConditionalAccuracy, ExactCentersAndDerangement) {
    const Tensor centers = DataSpec{}.centers();
    Tensor x = Tensor::matrix(16, 2);
    Conditions c(16), shifted(16);
    for (std::size_t r = 0; r < 16; ++r) {
        x.at(r, 0) = centers.at(r % 8, 0);
        x.at(r, 1) = centers.at(r % 8, 1);
        c[r] = Condition::of(r % 8);
        shifted[r] = Condition::of((r + 1) % 8);
    }
    EXPECT_DOUBLE_EQ(conditional_accuracy(x, c, centers), 1.0);
    EXPECT_DOUBLE_EQ(conditional_accuracy(x, shifted, centers), 0.0);
    EXPECT_THROW(conditional_accuracy(x, Conditions(3), centers), Error);
}

TEST(Evaluate, ReportFieldsAreConsistent) {
    DataSpec spec;
    Rng rng(10);
    const Dataset a = gen_data(spec, 500, rng);
    const Dataset b = gen_data(spec, 500, rng);
    const MetricReport r = evaluate(a.x, a.c, b.x, spec.centers());
    EXPECT_EQ(r.n_samples, 500u);
    EXPECT_DOUBLE_EQ(r.mode_coverage, 1.0);
    EXPECT_DOUBLE_EQ(r.conditional_accuracy, 1.0);
    EXPECT_GE(r.mmd2, -1e-12);
    EXPECT_EQ(evaluate(a.x, a.c, b.x, spec.centers()).mmd2, r.mmd2);
}

TEST(Median, OddEvenAndEmpty) {
    EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
    EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
    EXPECT_THROW(median({}), Error);
}
