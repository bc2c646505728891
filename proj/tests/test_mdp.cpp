#include "bisim/mdp.hpp"
#include "bisim/noise.hpp"

#include <gtest/gtest.h>

using namespace bisim;

namespace {

FiniteLatentMDP two_state_task() {
    FiniteLatentMDP t;
    t.n_states = 2;
    t.n_actions = 1;
    t.transition = {Mat::Constant(2, 2, 0.5)};
    t.reward = Mat::Zero(2, 1);
    t.reward(1, 0) = 1.0;
    t.gamma = 0.9;
    return t;
}

ExBmdp product(const FiniteLatentMDP& task, const NoiseChain& noise) {
    ExBmdp m;
    m.task = task;
    m.noise = noise;
    m.emission.state_features = one_hot_features(task.n_states);
    return m;
}

}  // namespace

TEST(Validate, WellFormedIsEmpty) {
    ExBmdp m = product(two_state_task(), NoiseChain::iid(Vec::Constant(2, 0.5)));
    EXPECT_TRUE(validate(m).ok());
}

TEST(Validate, NamesBadRow) {
    ExBmdp m = product(two_state_task(), NoiseChain::iid(Vec::Constant(2, 0.5)));
    m.task.transition[0].row(1) << 0.45, 0.45;
    auto rep = validate(m);
    ASSERT_EQ(rep.issues.size(), 1u);
    EXPECT_NE(rep.issues[0].find("row 1"), std::string::npos);
}

TEST(Validate, FlagsDiscountOfOne) {
    ExBmdp m = product(two_state_task(), NoiseChain::iid(Vec::Constant(2, 0.5)));
    m.task.gamma = 1.0;
    auto rep = validate(m);
    ASSERT_EQ(rep.issues.size(), 1u);
    EXPECT_NE(rep.issues[0].find("discount"), std::string::npos);
}

TEST(Validate, FlagsBrokenFrameChainAndIidRows) {
    ExBmdp m = product(two_state_task(), NoiseChain::frame_index(3));
    m.noise.transition.setConstant(1.0 / 3.0);
    EXPECT_FALSE(validate(m).ok());

    ExBmdp m2 = product(two_state_task(), NoiseChain::iid(Vec::Constant(2, 0.5)));
    m2.noise.transition.row(1) << 0.9, 0.1;
    EXPECT_FALSE(validate(m2).ok());
}

TEST(GroundedTransition, Singleton) {
    FiniteLatentMDP t;
    t.n_states = 1;
    t.n_actions = 1;
    t.transition = {Mat::Ones(1, 1)};
    t.reward = Mat::Zero(1, 1);
    ExBmdp m = product(t, NoiseChain::iid(Vec::Ones(1)));
    auto p = grounded_transition(m);
    ASSERT_EQ(p.size(), 1u);
    EXPECT_EQ(p[0].rows(), 1);
    EXPECT_EQ(p[0](0, 0), 1.0);
}

TEST(GroundedTransition, DeterministicProductHasOneHotRows) {
    FiniteLatentMDP t = two_state_task();
    t.transition[0] << 0, 1, 1, 0;
    ExBmdp m = product(t, NoiseChain::frame_index(2));
    auto p = grounded_transition(m);
    for (int x = 0; x < 4; ++x) {
        EXPECT_EQ(p[0].row(x).maxCoeff(), 1.0);
        EXPECT_EQ(p[0].row(x).sum(), 1.0);
        EXPECT_EQ((p[0].row(x).array() == 1.0).count(), 1);
    }
}

TEST(GroundedTransition, UniformTimesUniformIsFlat) {
    ExBmdp m = product(two_state_task(), NoiseChain::iid(Vec::Constant(2, 0.5)));
    auto p = grounded_transition(m);
    EXPECT_TRUE(p[0].isApprox(Mat::Constant(4, 4, 0.25)));
}

TEST(GroundedTransition, RejectsNonTabular) {
    ExBmdp m = product(two_state_task(), NoiseChain::iid(Vec::Constant(2, 0.5)));
    m = with_feature_emission(m, NoiseEmission{});
    EXPECT_THROW(grounded_transition(m), UnsupportedModeError);
}

TEST(GroundedTransition, FactorsMarginalizeBack) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (auto kind : {NoiseKind::IidDiscrete, NoiseKind::FrameIndex, NoiseKind::Custom}) {
            ExBmdp m = random_exbmdp(seed, 3, 2, 3, kind);
            auto p = grounded_transition(m);
            for (int a = 0; a < m.n_actions(); ++a)
                for (int x = 0; x < m.n_obs(); ++x) {
                    int s = m.state_of(x), xi = m.noise_of(x);
                    for (int s2 = 0; s2 < m.n_states(); ++s2) {
                        double marg = 0.0;
                        for (int xi2 = 0; xi2 < m.n_noise(); ++xi2) marg += p[a](x, m.obs_index(s2, xi2));
                        EXPECT_NEAR(marg, m.task.transition[a](s, s2), 1e-12);
                    }
                    for (int xi2 = 0; xi2 < m.n_noise(); ++xi2) {
                        double marg = 0.0;
                        for (int s2 = 0; s2 < m.n_states(); ++s2) marg += p[a](x, m.obs_index(s2, xi2));
                        EXPECT_NEAR(marg, m.noise.transition(xi, xi2), 1e-12);
                    }
                }
        }
    }
}

TEST(PolicyChain, DeterministicSelectsSlice) {
    ExBmdp m = random_exbmdp(3, 2, 2, 2);
    auto p = grounded_transition(m);
    Policy pi = Policy::deterministic(m, {1, 1, 1, 1});
    EXPECT_TRUE(policy_chain(p, pi).isApprox(p[1]));
}

TEST(PolicyChain, UniformAverages) {
    ExBmdp m = random_exbmdp(4, 2, 2, 2);
    auto p = grounded_transition(m);
    Mat chain = policy_chain(p, Policy::uniform(m.n_obs(), 2));
    EXPECT_TRUE(chain.isApprox(0.5 * (p[0] + p[1])));
    for (int x = 0; x < m.n_obs(); ++x) EXPECT_NEAR(chain.row(x).sum(), 1.0, 1e-12);
}

TEST(PolicyChain, ExoFreeRowsFactorThroughTheNoiseChain) {
    // Row (s, xi) of P^pi equals outer(m_s, p(.|xi)) for a state marginal m_s
    // shared by every noise value.
    ExBmdp m = random_exbmdp(5, 2, 2, 2);
    Mat per_state(2, 2);
    per_state << 0.3, 0.7, 0.9, 0.1;
    Policy pi = Policy::from_state_table(m, per_state);
    Mat chain = policy_chain(grounded_transition(m), pi);
    for (int s = 0; s < 2; ++s) {
        Vec ms = per_state(s, 0) * m.task.transition[0].row(s).transpose() +
                 per_state(s, 1) * m.task.transition[1].row(s).transpose();
        for (int xi = 0; xi < 2; ++xi)
            for (int s2 = 0; s2 < 2; ++s2)
                for (int xi2 = 0; xi2 < 2; ++xi2)
                    EXPECT_NEAR(chain(m.obs_index(s, xi), m.obs_index(s2, xi2)),
                                ms[s2] * m.noise.transition(xi, xi2), 1e-15);
    }
}

TEST(PolicyChain, ShapeMismatchThrows) {
    ExBmdp m = random_exbmdp(5, 2, 2, 2);
    EXPECT_THROW(policy_chain(grounded_transition(m), Policy::uniform(3, 2)), ShapeError);
    EXPECT_THROW(policy_chain(grounded_transition(m), Policy::uniform(4, 3)), ShapeError);
}

TEST(Stationary, DoublyStochastic) {
    Vec rho = stationary_distribution(Mat::Constant(2, 2, 0.5));
    EXPECT_NEAR(rho[0], 0.5, 1e-12);
    EXPECT_NEAR(rho[1], 0.5, 1e-12);
}

TEST(Stationary, Absorbing) {
    Mat p(2, 2);
    p << 1, 0, 1, 0;
    Vec rho = stationary_distribution(p);
    EXPECT_NEAR(rho[0], 1.0, 1e-12);
    EXPECT_NEAR(rho[1], 0.0, 1e-12);
}

TEST(Stationary, PeriodicChainConverges) {
    Mat p(2, 2);
    p << 0, 1, 1, 0;
    Vec start(2);
    start << 1.0, 0.0;
    Vec rho = stationary_distribution(p, 1e-12, 1000, start);
    EXPECT_NEAR(rho[0], 0.5, 1e-12);
    EXPECT_NEAR(rho[1], 0.5, 1e-12);
}

TEST(Stationary, FixedPointOnRandomChains) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        ExBmdp m = random_exbmdp(seed, 3, 2, 3, NoiseKind::FrameIndex);
        Mat chain = policy_chain(grounded_transition(m), Policy::uniform(m.n_obs(), 2));
        Vec rho = stationary_distribution(chain, 1e-12);
        EXPECT_NEAR(rho.sum(), 1.0, 1e-12);
        EXPECT_LE((rho.transpose() * chain - rho.transpose()).lpNorm<1>(), 1e-12);
    }
}

TEST(Stationary, ReportsNonConvergence) {
    Mat p(3, 3);
    p << 0, 1, 0, 0, 0, 1, 1, 0, 0;
    Vec start = Vec::Unit(3, 0);
    try {
        stationary_distribution(p, 1e-14, 3, start);
        FAIL() << "expected ConvergenceError";
    } catch (const ConvergenceError& e) {
        EXPECT_GT(e.residual(), 1e-14);
    }
}

TEST(ValueIteration, GeometricSeries) {
    FiniteLatentMDP t;
    t.n_states = 1;
    t.n_actions = 1;
    t.transition = {Mat::Ones(1, 1)};
    t.reward = Mat::Ones(1, 1);
    t.gamma = 0.5;
    auto vr = value_iteration(t);
    EXPECT_NEAR(vr.v[0], 2.0, 1e-11);
}

TEST(ValueIteration, ZeroRewards) {
    ExBmdp m = random_exbmdp(1, 3, 2, 1);
    m.task.reward.setZero();
    auto vr = value_iteration(m.task);
    EXPECT_EQ(vr.v.cwiseAbs().maxCoeff(), 0.0);
    for (const auto& g : vr.greedy) EXPECT_EQ(g.size(), 2u);  // ties are kept
}

TEST(ValueIteration, SelfLoops) {
    FiniteLatentMDP t;
    t.n_states = 2;
    t.n_actions = 1;
    t.transition = {Mat::Identity(2, 2)};
    t.reward = Mat::Zero(2, 1);
    t.reward(1, 0) = 1.0;
    t.gamma = 0.9;
    auto vr = value_iteration(t, 1e-12);
    EXPECT_NEAR(vr.v[0], 0.0, 1e-10);
    EXPECT_NEAR(vr.v[1], 10.0, 1e-10);
    EXPECT_LE(vr.residual, 1e-12);
}

TEST(ValueIteration, ConstantRewardShift) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ExBmdp m = random_exbmdp(seed, 4, 3, 1);
        auto base = value_iteration(m.task, 1e-12);
        const double c = 0.7;
        m.task.reward.array() += c;
        auto shifted = value_iteration(m.task, 1e-12);
        for (int s = 0; s < 4; ++s)
            EXPECT_NEAR(shifted.v[s] - base.v[s], c / (1.0 - m.task.gamma), 1e-9);
    }
}

TEST(OracleEncode, Tabular) {
    ExBmdp m = random_exbmdp(0, 4, 1, 8);
    Vec x(2);
    x << 3, 7;
    EXPECT_EQ(oracle_encode(m, x), 3);
    x << 4, 0;
    EXPECT_THROW(oracle_encode(m, x), PreconditionError);
    EXPECT_EQ(oracle_encode(m, m.obs_index(2, 5)), 2);
    EXPECT_THROW(oracle_encode(m, m.n_obs()), PreconditionError);
}

TEST(OracleEncode, ProjectedIdentity) {
    ExBmdp m = random_exbmdp(0, 3, 1, 2);
    m = with_projected_emission(m, NoiseEmission{}, 1);
    const int d = m.obs_dim();
    m.emission.projection->matrix = Mat::Identity(d, d);
    m.emission.projection->inverse = Mat::Identity(d, d);
    Rng rng(1);
    for (int s = 0; s < 3; ++s) EXPECT_EQ(oracle_encode(m, emit_observation(m, s, 1, rng)), s);
}

TEST(OracleEncode, RoundTripAllModes) {
    NoiseEmission gauss{NoiseEmissionKind::Gaussian, 1.0, 0.0, 2.0, 3};
    ExBmdp base = random_exbmdp(2, 4, 2, 3);
    std::vector<ExBmdp> envs = {base, with_feature_emission(base, NoiseEmission{}),
                                with_feature_emission(base, gauss),
                                with_projected_emission(base, gauss, 9)};
    Rng rng(5);
    for (const auto& m : envs)
        for (int s = 0; s < m.n_states(); ++s)
            for (int xi = 0; xi < m.n_noise(); ++xi)
                EXPECT_EQ(oracle_encode(m, emit_observation(m, s, xi, rng)), s);
}

TEST(RandomExbmdp, DeterministicInSeed) {
    ExBmdp a = random_exbmdp(42, 3, 2, 2), b = random_exbmdp(42, 3, 2, 2);
    for (int act = 0; act < 2; ++act) EXPECT_EQ(a.task.transition[act], b.task.transition[act]);
    EXPECT_EQ(a.noise.transition, b.noise.transition);
    EXPECT_EQ(a.task.reward, b.task.reward);
}

TEST(RandomExbmdp, NoiseFreeWhenSingleNoise) {
    ExBmdp m = random_exbmdp(1, 5, 2, 1);
    EXPECT_EQ(m.n_obs(), 5);
    for (int x = 0; x < 5; ++x) EXPECT_EQ(m.state_of(x), x);
}

TEST(RandomExbmdp, PassesValidation) {
    EXPECT_TRUE(validate(random_exbmdp(7, 3, 2, 2)).ok());
    for (std::uint64_t seed = 0; seed < 20; ++seed)
        for (auto kind : {NoiseKind::IidDiscrete, NoiseKind::FrameIndex, NoiseKind::Custom})
            EXPECT_TRUE(validate(random_exbmdp(seed, 1 + seed % 4, 1 + seed % 3, 1 + seed % 5, kind)).ok());
}

TEST(Policy, ExoFreeDetection) {
    ExBmdp m = random_exbmdp(0, 2, 2, 2);
    EXPECT_TRUE(Policy::deterministic(m, {0, 0, 1, 1}).exo_free);
    EXPECT_FALSE(Policy::deterministic(m, {0, 1, 1, 1}).exo_free);
    EXPECT_TRUE(epsilon_optimal_policy(m, 0.1).exo_free);
}

TEST(PolicyEvaluation, MatchesValueIterationForGreedyPolicy) {
    ExBmdp m = random_exbmdp(11, 4, 3, 2);
    auto vr = value_iteration(m.task, 1e-13);
    Policy pi = epsilon_optimal_policy(m, 0.0);
    auto pv = evaluate_policy(make_grounded_model(m), pi, m.task.gamma);
    for (int x = 0; x < m.n_obs(); ++x) EXPECT_NEAR(pv.v[x], vr.v[m.state_of(x)], 1e-9);
}
