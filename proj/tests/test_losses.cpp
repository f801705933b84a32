#include <gtest/gtest.h>

#include "support.hpp"

using namespace udr;

namespace {

std::vector<int> random_ranks(std::mt19937_64& rng, std::size_t n) {
    std::vector<int> r(n);
    std::iota(r.begin(), r.end(), 1);
    std::shuffle(r.begin(), r.end(), rng);
    return r;
}

}  // namespace

TEST(PairWeight, TopVersusTenth) {
    EXPECT_NEAR(pair_weight(1, 10), 0.9, 1e-15);
    EXPECT_EQ(pair_weight(10, 1), 0.0);
    EXPECT_EQ(pair_weight(3, 3), 0.0);
}

TEST(LossRank, ClosedFormTwoCandidates) {
    std::vector<double> sims{1.0, 0.0};
    std::vector<int> ranks{1, 2};
    EXPECT_NEAR(loss_rank(sims, ranks).value, 0.5 * std::log(1 + std::exp(-1.0)), 1e-15);
    EXPECT_NEAR(loss_rank(sims, ranks).value, 0.156631, 1e-6);
}

TEST(LossRank, SingleCandidateIsZero) {
    std::vector<double> sims{0.3};
    std::vector<int> ranks{1};
    auto l = loss_rank(sims, ranks);
    EXPECT_EQ(l.value, 0.0);
    EXPECT_EQ(l.grad, (std::vector<double>{0.0}));
}

TEST(LossRank, RejectsNonPermutationRanks) {
    std::vector<double> sims{0.3, 0.1};
    std::vector<int> dup{1, 1}, out_of_range{1, 3};
    EXPECT_THROW(loss_rank(sims, dup), ContractError);
    EXPECT_THROW(loss_rank(sims, out_of_range), ContractError);
}

TEST(LossRank, MatchesReferenceAndFiniteDifferences) {
    std::mt19937_64 rng(31);
    std::normal_distribution<double> g(0, 2);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t n = 1 + rng() % 10;
        std::vector<double> sims(n);
        for (auto& s : sims) s = g(rng);
        auto ranks = random_ranks(rng, n);
        auto l = loss_rank(sims, ranks);
        EXPECT_NEAR(l.value, udr::testing::reference_rank_loss(sims, ranks), 1e-10);
        auto numeric = udr::testing::numeric_gradient(sims, [&](const std::vector<double>& x) {
            return udr::testing::reference_rank_loss(x, ranks);
        });
        for (std::size_t i = 0; i < n; ++i) ASSERT_LT(udr::testing::relative_error(l.grad[i], numeric[i]), 1e-4);
    }
}

TEST(LossRank, ShiftInvariantAndPermutationEquivariant) {
    std::mt19937_64 rng(32);
    std::normal_distribution<double> g(0, 1);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t n = 2 + rng() % 8;
        std::vector<double> sims(n);
        for (auto& s : sims) s = g(rng);
        auto ranks = random_ranks(rng, n);
        double base = loss_rank(sims, ranks).value;
        auto shifted = sims;
        for (auto& s : shifted) s += 3.7;
        EXPECT_NEAR(loss_rank(shifted, ranks).value, base, 1e-12);
        std::size_t a = rng() % n, b = rng() % n;
        auto ps = sims;
        auto pr = ranks;
        std::swap(ps[a], ps[b]);
        std::swap(pr[a], pr[b]);
        EXPECT_NEAR(loss_rank(ps, pr).value, base, 1e-12);
    }
}

TEST(LossRank, PositiveAndDecreasingInHigherRankedSim) {
    std::mt19937_64 rng(33);
    std::normal_distribution<double> g(0, 1);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t n = 2 + rng() % 8;
        std::vector<double> sims(n);
        for (auto& s : sims) s = g(rng);
        auto ranks = random_ranks(rng, n);
        auto l = loss_rank(sims, ranks);
        EXPECT_GT(l.value, 0.0);
        // The top-ranked candidate outranks every other, so raising its
        // similarity strictly lowers the loss.
        auto top = static_cast<std::size_t>(std::find(ranks.begin(), ranks.end(), 1) - ranks.begin());
        EXPECT_LT(l.grad[top], 0.0);
        auto up = sims;
        up[top] += 0.5;
        EXPECT_LT(loss_rank(up, ranks).value, l.value);
    }
    // Correctly ordered with a large margin: the loss approaches zero.
    std::vector<double> wide{40, 20, 0};
    std::vector<int> ranks{1, 2, 3};
    EXPECT_LT(loss_rank(wide, ranks).value, 1e-8);
}

TEST(LossInbatch, ClosedFormTwoColumns) {
    std::vector<double> sims{2.0, 0.0};
    std::vector<std::size_t> pos{0};
    EXPECT_NEAR(loss_inbatch(sims, 2, pos).value, std::log(1 + std::exp(-2.0)), 1e-15);
    EXPECT_NEAR(loss_inbatch(sims, 2, pos).value, 0.126928, 1e-6);
}

TEST(LossInbatch, SingletonAndUniform) {
    std::vector<double> one{1.7};
    std::vector<std::size_t> pos{0};
    EXPECT_NEAR(loss_inbatch(one, 1, pos).value, 0.0, 1e-15);
    for (std::size_t m : {2u, 5u, 13u}) {
        std::vector<double> u(m, 0.4);
        std::vector<std::size_t> p{m - 1};
        EXPECT_NEAR(loss_inbatch(u, m, p).value, std::log(double(m)), 1e-12);
    }
}

TEST(LossInbatch, PositiveOutOfRange) {
    std::vector<double> sims{1, 2};
    std::vector<std::size_t> pos{2};
    EXPECT_THROW(loss_inbatch(sims, 2, pos), ContractError);
}

TEST(LossInbatch, MatchesReferenceAndFiniteDifferences) {
    std::mt19937_64 rng(41);
    std::normal_distribution<double> g(0, 2);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t rows = 1 + rng() % 4, cols = 1 + rng() % 10;
        std::vector<double> sims(rows * cols);
        for (auto& s : sims) s = g(rng);
        std::vector<std::size_t> pos(rows);
        for (auto& p : pos) p = rng() % cols;
        auto l = loss_inbatch(sims, cols, pos);
        EXPECT_NEAR(l.value, udr::testing::reference_inbatch_loss(sims, cols, pos), 1e-10);
        auto numeric = udr::testing::numeric_gradient(sims, [&](const std::vector<double>& x) {
            return udr::testing::reference_inbatch_loss(x, cols, pos);
        });
        for (std::size_t i = 0; i < sims.size(); ++i) ASSERT_LT(udr::testing::relative_error(l.grad[i], numeric[i]), 1e-4);
    }
}

TEST(LossInbatch, ShiftInvariantPerRow) {
    std::vector<double> sims{0.3, -1.2, 2.0, 0.5, 0.1, -0.4};
    std::vector<std::size_t> pos{2, 0};
    auto shifted = sims;
    for (std::size_t c = 0; c < 3; ++c) shifted[c] += 5.0;
    EXPECT_NEAR(loss_inbatch(sims, 3, pos).value, loss_inbatch(shifted, 3, pos).value, 1e-12);
}

TEST(LossTotal, MixAndEndpoints) {
    double r = 0.5 * std::log(1 + std::exp(-1.0)), ib = std::log(1 + std::exp(-2.0));
    EXPECT_NEAR(loss_total(r, ib, 0.8), 0.150690, 1e-6);
    EXPECT_EQ(loss_total(r, ib, 1.0), r);
    EXPECT_EQ(loss_total(r, ib, 0.0), ib);
    EXPECT_THROW(loss_total(r, ib, 1.5), ContractError);
}

TEST(Softplus, StableAtExtremes) {
    EXPECT_NEAR(softplus(800), 800, 1e-9);
    EXPECT_NEAR(softplus(-800), 0, 1e-300);
    EXPECT_NEAR(sigmoid(-800), 0, 1e-300);
    EXPECT_NEAR(sigmoid(800), 1, 1e-15);
}
