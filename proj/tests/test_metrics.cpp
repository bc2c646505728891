#include "bisim/metrics.hpp"
#include "bisim/noise.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace bisim;

namespace {

GroundedModel two_obs_uniform() {
    GroundedModel g;
    g.transition = {Mat::Constant(2, 2, 0.5)};
    g.reward = Mat(2, 1);
    g.reward << 0.0, 1.0;
    g.state_of = {0, 1};
    return g;
}

// Fixed point of the PBSM/BSM operator with the min-cost-flow oracle in place
// of the library's transport solver.
Mat oracle_fixed_point(const GroundedModel& g, const std::optional<Policy>& pi, MetricSpec spec) {
    const int n = g.n_obs();
    std::vector<Mat> slices = g.transition;
    Mat reward = g.reward;
    if (pi) {
        Mat chain = Mat::Zero(n, n);
        Vec r = Vec::Zero(n);
        for (int a = 0; a < g.n_actions(); ++a) {
            chain += pi->table.col(a).asDiagonal() * g.transition[a];
            r += pi->table.col(a).cwiseProduct(g.reward.col(a));
        }
        slices = {chain};
        reward = r;
    }
    Mat d = Mat::Zero(n, n);
    for (int it = 0; it < 2000; ++it) {
        Mat next = Mat::Zero(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                if (i == j) continue;
                double best = 0.0;
                for (std::size_t a = 0; a < slices.size(); ++a) {
                    double w = oracle::transport_min_cost_flow(d, slices[a].row(i).transpose(),
                                                               slices[a].row(j).transpose());
                    best = std::max(best, spec.c_R * std::abs(reward(i, a) - reward(j, a)) + spec.c_T * w);
                }
                next(i, j) = best;
            }
        double delta = (next - d).cwiseAbs().maxCoeff();
        d = next;
        if (delta < 1e-12) break;
    }
    return d;
}

// MICo by a direct linear solve: vec(U) = c_R vec(D_R) + c_T (P kron P) vec(U).
Mat oracle_mico(const Mat& chain, const Vec& r, double c_R, double c_T) {
    const int n = static_cast<int>(r.size());
    Mat kron(n * n, n * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) kron.block(i * n, j * n, n, n) = chain(i, j) * chain;
    Vec rhs(n * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) rhs[i * n + j] = c_R * std::abs(r[i] - r[j]);
    Vec u = (Mat::Identity(n * n, n * n) - c_T * kron).fullPivLu().solve(rhs);
    Mat out(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) out(i, j) = u[i * n + j];
    return out;
}

void expect_triangle(const Mat& d, double slack) {
    const int n = static_cast<int>(d.rows());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) EXPECT_LE(d(i, k), d(i, j) + d(j, k) + slack);
}

void expect_contraction(const DistanceMatrix& dm) {
    for (std::size_t t = 0; t + 1 < dm.trace.size(); ++t)
        EXPECT_LE(dm.trace[t + 1], dm.spec.c_T * dm.trace[t] + 1e-12) << "step " << t;
}

}  // namespace

TEST(FixedPoint, BisimilarPairIsZero) {
    ExBmdp m = random_exbmdp(3, 3, 2, 1);
    m.task.transition[0].row(2) = m.task.transition[0].row(1);
    m.task.transition[1].row(2) = m.task.transition[1].row(1);
    m.task.reward.row(2) = m.task.reward.row(1);
    auto dm = metric_fixed_point(m, std::nullopt, {MetricSpec::Kind::Bsm, 1.0, 0.9});
    EXPECT_LT(dm(1, 2), 1e-12);
    EXPECT_GT(dm(0, 1), 0.0);
}

TEST(FixedPoint, PbsmTwoObsExample) {
    auto dm = metric_fixed_point(two_obs_uniform(), Policy::uniform(2, 1), {MetricSpec::Kind::Pbsm, 1.0, 0.5});
    EXPECT_NEAR(dm(0, 1), 1.0, 1e-10);
    EXPECT_EQ(dm(0, 0), 0.0);
    EXPECT_EQ(dm(1, 1), 0.0);
}

TEST(FixedPoint, MicoTwoObsExample) {
    auto dm = metric_fixed_point(two_obs_uniform(), Policy::uniform(2, 1), {MetricSpec::Kind::Mico, 1.0, 0.5});
    EXPECT_NEAR(dm(0, 0), 0.5, 1e-9);
    EXPECT_NEAR(dm(1, 1), 0.5, 1e-9);
    EXPECT_NEAR(dm(0, 1), 1.5, 1e-9);
    expect_contraction(dm);
}

TEST(FixedPoint, SimsrAliasIsBitwiseMico) {
    ExBmdp m = random_exbmdp(8, 2, 2, 2);
    Policy pi = Policy::uniform(m.n_obs(), 2);
    auto a = simsr_exact(m, pi, 1.0, 0.8);
    auto b = metric_fixed_point(m, pi, {MetricSpec::Kind::Mico, 1.0, 0.8});
    EXPECT_EQ(a.values, b.values);
}

TEST(FixedPoint, DeterministicChainZeroSelfDistance) {
    GroundedModel g;
    g.transition = {Mat(3, 3)};
    g.transition[0] << 0, 1, 0, 0, 0, 1, 1, 0, 0;
    g.reward = Mat(3, 1);
    g.reward << 0.0, 0.5, 1.0;
    g.state_of = {0, 1, 2};
    auto dm = metric_fixed_point(g, Policy::uniform(3, 1), {MetricSpec::Kind::Mico, 1.0, 0.9});
    for (int i = 0; i < 3; ++i) EXPECT_LT(dm(i, i), 1e-9);
}

TEST(FixedPoint, StochasticChainPositiveSelfDistance) {
    auto dm = metric_fixed_point(two_obs_uniform(), Policy::uniform(2, 1), {MetricSpec::Kind::Mico, 1.0, 0.5});
    EXPECT_GT(dm(0, 0), 0.1);
}

TEST(FixedPoint, PolicyRequirements) {
    auto g = two_obs_uniform();
    EXPECT_THROW(metric_fixed_point(g, std::nullopt, {MetricSpec::Kind::Pbsm, 1.0, 0.5}), PreconditionError);
    EXPECT_THROW(metric_fixed_point(g, Policy::uniform(3, 1), {MetricSpec::Kind::Mico, 1.0, 0.5}), ShapeError);
    EXPECT_THROW(metric_fixed_point(g, std::nullopt, {MetricSpec::Kind::Bsm, 1.0, 1.0}), PreconditionError);
}

TEST(FixedPoint, ConvergenceErrorCarriesTrace) {
    ExBmdp m = random_exbmdp(1, 3, 2, 2);
    try {
        metric_fixed_point(m, std::nullopt, {MetricSpec::Kind::Bsm, 1.0, 0.95}, 1e-10, 3);
        FAIL() << "expected ConvergenceError";
    } catch (const ConvergenceError& e) {
        EXPECT_EQ(e.trace().size(), 3u);
        EXPECT_GT(e.residual(), 1e-10);
    }
}

TEST(FixedPoint, OperatorEquationAndContraction) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        ExBmdp m = random_exbmdp(seed, 3, 2, 2, seed % 2 ? NoiseKind::FrameIndex : NoiseKind::IidDiscrete);
        GroundedModel g = make_grounded_model(m);
        Policy pi = epsilon_optimal_policy(m, 0.2);
        for (auto kind : {MetricSpec::Kind::Bsm, MetricSpec::Kind::Pbsm, MetricSpec::Kind::Mico}) {
            MetricSpec spec{kind, 1.0, 0.8};
            auto dm = metric_fixed_point(g, pi, spec);
            EXPECT_LE(dm.final_residual, 1e-10);
            EXPECT_LE(operator_residual(g, pi, spec, dm.values), 1e-10 / (1.0 - spec.c_T));
            expect_contraction(dm);
            EXPECT_LT((dm.values - dm.values.transpose()).cwiseAbs().maxCoeff(), 1e-12);
            EXPECT_GE(dm.values.minCoeff(), 0.0);
            if (kind != MetricSpec::Kind::Mico) {
                EXPECT_EQ(dm.values.diagonal().cwiseAbs().maxCoeff(), 0.0);
            }
            expect_triangle(dm.values, 1e-8);
        }
    }
}

TEST(FixedPoint, MatchesOracles) {
    for (std::uint64_t seed = 10; seed < 14; ++seed) {
        ExBmdp m = random_exbmdp(seed, 2, 2, 2, NoiseKind::Custom);
        GroundedModel g = make_grounded_model(m);
        Policy pi = Policy::deterministic(m, {0, 1, 1, 0});
        auto bsm = metric_fixed_point(g, std::nullopt, {MetricSpec::Kind::Bsm, 1.0, 0.7}, 1e-12);
        EXPECT_LT((bsm.values - oracle_fixed_point(g, std::nullopt, {MetricSpec::Kind::Bsm, 1.0, 0.7}))
                      .cwiseAbs()
                      .maxCoeff(),
                  1e-9);
        auto pbsm = metric_fixed_point(g, pi, {MetricSpec::Kind::Pbsm, 1.0, 0.7}, 1e-12);
        EXPECT_LT((pbsm.values - oracle_fixed_point(g, pi, {MetricSpec::Kind::Pbsm, 1.0, 0.7}))
                      .cwiseAbs()
                      .maxCoeff(),
                  1e-9);
        auto mico = metric_fixed_point(g, pi, {MetricSpec::Kind::Mico, 1.0, 0.7}, 1e-12);
        Mat want = oracle_mico(policy_chain(g.transition, pi), policy_reward(g.reward, pi), 1.0, 0.7);
        EXPECT_LT((mico.values - want).cwiseAbs().maxCoeff(), 1e-9);
    }
}

TEST(Denoising, BsmZeroOnAnchorPairs) {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        ExBmdp m = random_exbmdp(seed, 3, 2, 2 + seed % 2, static_cast<NoiseKind>(seed % 3));
        auto dm = metric_fixed_point(m, std::nullopt, {MetricSpec::Kind::Bsm, 1.0, 0.9});
        for (auto [x, y] : anchor_positive_pairs(m)) EXPECT_LT(dm(x, y), 1e-8);
    }
}

TEST(Denoising, PbsmExoFreeZeroOnAnchorPairs) {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        ExBmdp m = random_exbmdp(seed, 3, 2, 2 + seed % 2, static_cast<NoiseKind>(seed % 3));
        Policy pi = epsilon_optimal_policy(m, 0.3);
        ASSERT_TRUE(pi.exo_free);
        auto dm = metric_fixed_point(m, pi, {MetricSpec::Kind::Pbsm, 1.0, 0.9});
        for (auto [x, y] : anchor_positive_pairs(m)) EXPECT_LT(dm(x, y), 1e-8);
    }
}

TEST(AnchorPairs, Counts) {
    EXPECT_TRUE(anchor_positive_pairs(random_exbmdp(0, 3, 1, 1)).empty());
    EXPECT_EQ(anchor_positive_pairs(random_exbmdp(0, 2, 1, 2)).size(), 2u);
    auto pairs = anchor_positive_pairs(random_exbmdp(0, 3, 1, 3));
    EXPECT_EQ(pairs.size(), 9u);
    ExBmdp m = random_exbmdp(0, 3, 1, 3);
    for (auto [x, y] : pairs) {
        EXPECT_EQ(m.state_of(x), m.state_of(y));
        EXPECT_NE(m.noise_of(x), m.noise_of(y));
    }
    ExBmdp f = with_feature_emission(m, NoiseEmission{});
    EXPECT_THROW(anchor_positive_pairs(f), UnsupportedModeError);
}
