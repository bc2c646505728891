#include "bisim/denoise.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace bisim;

namespace {

BatchEncoder identity_encoder() {
    return [](const Mat& x) { return x; };
}

BatchEncoder constant_encoder(int k) {
    return [k](const Mat& x) { return Mat::Constant(k, x.cols(), 0.7); };
}

BatchEncoder scaled(BatchEncoder e, double c) {
    return [e, c](const Mat& x) { return Mat(c * e(x)); };
}

/// Two states that swap uniformly; stationary law is uniform.
ExBmdp two_state_uniform(int n_noise) {
    ExBmdp m = random_exbmdp(1, 2, 1, n_noise);
    m.task.transition[0] = Mat::Constant(2, 2, 0.5);
    return m;
}

double stddev(const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / (v.size() - 1));
}

}  // namespace

TEST(DfScores, DegenerateRule) {
    EXPECT_EQ(df_from_scores(0.0, 0.0), 0.0);
    EXPECT_EQ(df_from_scores(1e-13, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(df_from_scores(1.0, 3.0), 0.5);
    EXPECT_EQ(df_from_scores(0.0, 2.0), 1.0);
    EXPECT_EQ(df_from_scores(2.0, 0.0), -1.0);
}

TEST(DfScores, OracleEncoderIsOneOnGeneratedInstances) {
    for (int seed = 0; seed < 50; ++seed) {
        NoiseKind kind = static_cast<NoiseKind>(seed % 3);
        ExBmdp m = random_exbmdp(seed, 2 + seed % 3, 2, 2 + seed % 2, kind);
        if (seed % 2) m = with_feature_emission(m, NoiseEmission{NoiseEmissionKind::Gaussian, 1.0, 0.0, 1.0, 3});
        Policy pi = Policy::uniform(m.n_obs(), m.n_actions());
        EvalReport r = denoising_factor(oracle_encoder(m), m, pi, {64, 4, 4, std::uint64_t(seed)});
        EXPECT_EQ(r.pos, 0.0);
        EXPECT_GT(r.neg, 0.0);
        EXPECT_EQ(r.df, 1.0) << "seed " << seed;
    }
}

TEST(DfScores, ConstantEncoderIsZero) {
    ExBmdp m = random_exbmdp(3, 3, 2, 3);
    EvalReport r = denoising_factor(constant_encoder(4), m, Policy::uniform(m.n_obs(), m.n_actions()));
    EXPECT_EQ(r.pos, 0.0);
    EXPECT_EQ(r.neg, 0.0);
    EXPECT_EQ(r.df, 0.0);
}

TEST(DfScores, SingleObservationHasZeroNegativeScore) {
    ExBmdp m = random_exbmdp(4, 1, 2, 1);
    Policy pi = Policy::uniform(1, 2);
    Rng ra = make_rng(1, 0), rn = make_rng(1, 1);
    auto anchors = sample_anchors(m, pi, 32, ra);
    EXPECT_EQ(negative_score(identity_encoder(), m, pi, anchors, 8, rn), 0.0);
}

TEST(DfScores, EmptyAnchorSetIsAnError) {
    ExBmdp m = random_exbmdp(4, 2, 2, 2);
    Policy pi = Policy::uniform(m.n_obs(), 2);
    Rng rng = make_rng(1, 0);
    EXPECT_THROW(positive_score(identity_encoder(), m, {}, 4, rng), PreconditionError);
    EXPECT_THROW(negative_score(identity_encoder(), m, pi, {}, 4, rng), PreconditionError);
}

TEST(DfScores, OracleNegativeScoreOnTwoUniformStates) {
    ExBmdp m = two_state_uniform(1);
    Policy pi = Policy::uniform(m.n_obs(), 1);
    Rng ra = make_rng(2, 0), rn = make_rng(2, 1);
    auto anchors = sample_anchors(m, pi, 4000, ra);
    const double neg = negative_score(oracle_encoder(m), m, pi, anchors, 16, rn);
    // Per-anchor mean has standard deviation at most sqrt(2) * 0.5.
    const double se = std::sqrt(2.0) * 0.5 / std::sqrt(4000.0);
    EXPECT_NEAR(neg, std::sqrt(2.0) * 0.5, 4 * se);
}

TEST(DfScores, IdentityEncoderPositiveScoreMatchesEnumeration) {
    // Tabular observations are (s, xi); positives keep s and redraw xi, so the
    // distance is |xi - xi+|. Enumerate (s, xi, xi+) under the stationary law.
    ExBmdp m = random_exbmdp(5, 3, 2, 2);
    Policy pi = Policy::uniform(m.n_obs(), m.n_actions());
    Vec occ = latent_occupancy(m, pi);
    Vec rho = positive_noise_distribution(m);
    double expect = 0.0;
    for (int x = 0; x < m.n_obs(); ++x)
        for (int xp = 0; xp < m.n_noise(); ++xp) expect += occ[x] * rho[xp] * std::abs(m.noise_of(x) - xp);
    Rng ra = make_rng(3, 0), rp = make_rng(3, 1);
    auto anchors = sample_anchors(m, occ, 4000, ra);
    const double pos = positive_score(identity_encoder(), m, anchors, 16, rp);
    const double se = 0.5 / std::sqrt(4000.0);
    EXPECT_NEAR(pos, expect, 4 * se);
}

TEST(DfScores, NoiseOnlyEncoderHasNoDenoising) {
    ExBmdp m = with_feature_emission(random_exbmdp(6, 6, 2, 8), NoiseEmission{});
    Policy pi = epsilon_optimal_policy(m, 0.2);
    const int S = m.n_states();
    BatchEncoder noise_only = [S](const Mat& x) { return Mat(x.bottomRows(x.rows() - S)); };
    EvalReport r = denoising_factor(noise_only, m, pi, {512, 16, 16, 9});
    EXPECT_LE(r.df, 0.05);
    EXPECT_GE(r.df, -0.05);
}

TEST(DfScores, ScaleInvariance) {
    ExBmdp m = with_feature_emission(random_exbmdp(7, 4, 2, 3),
                                     NoiseEmission{NoiseEmissionKind::Gaussian, 1.0, 0.0, 0.5, 2});
    Policy pi = Policy::uniform(m.n_obs(), m.n_actions());
    Rng rng = make_rng(7, 7);
    EncoderConfig ec{m.obs_dim(), 6, 3};
    BatchEncoder base = params_encoder(ec, init_encoder(ec, rng));
    const EvalReport r0 = denoising_factor(base, m, pi, {128, 8, 8, 11});
    for (double c : {0.25, 2.0, 1024.0}) EXPECT_EQ(denoising_factor(scaled(base, c), m, pi, {128, 8, 8, 11}).df, r0.df);
    for (double c : {0.3, 3.0, 17.5})
        EXPECT_NEAR(denoising_factor(scaled(base, c), m, pi, {128, 8, 8, 11}).df, r0.df, 1e-12);
}

TEST(DfScores, StandardErrorShrinksWithSampleSize) {
    ExBmdp m = with_feature_emission(random_exbmdp(8, 4, 2, 4),
                                     NoiseEmission{NoiseEmissionKind::Gaussian, 1.0, 0.0, 0.5, 2});
    Policy pi = Policy::uniform(m.n_obs(), m.n_actions());
    Rng rng = make_rng(8, 8);
    EncoderConfig ec{m.obs_dim(), 6, 3};
    BatchEncoder enc = params_encoder(ec, init_encoder(ec, rng));
    std::vector<double> sds;
    for (int scale : {1, 2, 4, 8}) {
        std::vector<double> dfs;
        for (int seed = 0; seed < 20; ++seed)
            dfs.push_back(denoising_factor(enc, m, pi, {16 * scale, 2 * scale, 2 * scale, std::uint64_t(seed)}).df);
        sds.push_back(stddev(dfs));
    }
    for (std::size_t i = 1; i < sds.size(); ++i) EXPECT_LT(sds[i], sds[i - 1]) << "level " << i;
}

TEST(DfScores, ReportCarriesCountsAndKind) {
    ExBmdp m = random_exbmdp(9, 3, 2, 2);
    EvalReport r = denoising_factor(identity_encoder(), m, Policy::uniform(m.n_obs(), 2),
                                    {10, 3, 5, 1, PsiDistance::L1});
    EXPECT_EQ(r.n_anchors, 10);
    EXPECT_EQ(r.n_pos, 3);
    EXPECT_EQ(r.n_neg, 5);
    EXPECT_EQ(r.d_psi_kind, "l1");
    EXPECT_GE(r.df, -1.0);
    EXPECT_LE(r.df, 1.0);
}

TEST(DfScores, DrawsDoNotDependOnEncoder) {
    ExBmdp m = random_exbmdp(10, 3, 2, 3);
    Policy pi = Policy::uniform(m.n_obs(), 2);
    EvalReport a = denoising_factor(identity_encoder(), m, pi, {50, 4, 4, 3});
    EvalReport b = denoising_factor(scaled(identity_encoder(), 2.0), m, pi, {50, 4, 4, 3});
    EXPECT_EQ(2.0 * a.pos, b.pos);
    EXPECT_EQ(2.0 * a.neg, b.neg);
}

TEST(DfScores, FrameIndexPositivesAreUniform) {
    ExBmdp m = random_exbmdp(11, 2, 2, 4, NoiseKind::FrameIndex);
    Vec rho = positive_noise_distribution(m);
    EXPECT_LT((rho - Vec::Constant(4, 0.25)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(DfScores, PsiDistanceNamesRoundTrip) {
    for (PsiDistance d : {PsiDistance::L2, PsiDistance::L1, PsiDistance::Cosine})
        EXPECT_EQ(parse_psi_distance(to_string(d)), d);
    EXPECT_THROW(parse_psi_distance("linf"), Error);
}
