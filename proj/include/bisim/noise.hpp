#pragma once

// Emission-layer noise: discrete noise embeddings, fresh Gaussian draws, and
// the invertible random projection x = A [feature(s); noise].

#include "bisim/mdp.hpp"

namespace bisim {

/// Entries A_ij ~ N(mu_A, sigma_A^2). A draw is rejected when its LU
/// reciprocal condition estimate underflows or the inverse residual
/// ||A A^-1 - I||_max exceeds 1e-9; up to `max_retries` redraws are attempted.
inline ProjectionMatrix build_projection(std::uint64_t seed, int n, int m, double mu_A = 0.0,
                                         double sigma_A = 1.0, int max_retries = 8) {
    const int d = n + m;
    if (d < 1) throw PreconditionError("build_projection: n + m must be >= 1");
    for (int attempt = 0; attempt <= max_retries; ++attempt) {
        Rng rng = make_rng(seed, 0xA11 + attempt);
        std::normal_distribution<double> nd(mu_A, sigma_A);
        Mat a(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) a(i, j) = nd(rng);
        Eigen::PartialPivLU<Mat> lu(a);
        double rcond = lu.rcond();
        if (!(rcond > 1e-12)) continue;
        Mat inv = lu.inverse();
        if (!inv.allFinite()) continue;
        double residual = (a * inv - Mat::Identity(d, d)).cwiseAbs().maxCoeff();
        if (residual > 1e-9) continue;
        ProjectionMatrix p;
        p.matrix = std::move(a);
        p.inverse = std::move(inv);
        p.seed = seed;
        p.mu_A = mu_A;
        p.sigma_A = sigma_A;
        p.rcond = rcond;
        p.regenerations = attempt;
        return p;
    }
    throw Error("build_projection: " + std::to_string(max_retries + 1) +
                " consecutive singular draws");
}

/// Noise vector for latent noise value xi.
inline Vec noise_vector(const ExBmdp& m, int xi, Rng& rng) {
    const NoiseEmission& ne = m.emission.noise;
    if (ne.kind == NoiseEmissionKind::EmbedDiscrete) {
        Vec v = Vec::Zero(m.n_noise());
        v[xi] = ne.scale;
        return v;
    }
    std::normal_distribution<double> nd(ne.mu, ne.sigma);
    Vec v(ne.dim);
    for (int i = 0; i < ne.dim; ++i) v[i] = nd(rng);
    return v;
}

/// One observation of latent (s, xi). Tabular: the index pair. Feature:
/// [feature(s); noise]. Projected: A [feature(s); noise].
inline Vec emit_observation(const ExBmdp& m, int s, int xi, Rng& rng) {
    if (s < 0 || s >= m.n_states() || xi < 0 || xi >= m.n_noise())
        throw PreconditionError("emit_observation: latent index out of range");
    const EmissionSpec& e = m.emission;
    if (e.mode == EmissionMode::Tabular) {
        Vec x(2);
        x << s, xi;
        return x;
    }
    Vec nz = noise_vector(m, xi, rng);
    Vec z(e.feature_dim() + nz.size());
    z << e.state_features.row(s).transpose(), nz;
    if (e.mode == EmissionMode::Feature) return z;
    if (!e.projection) throw PreconditionError("emit_observation: projected mode without a matrix");
    return e.projection->matrix * z;
}

/// First n entries of A^-1 x: the state-feature block of a projected observation.
inline Vec recover_state(const ProjectionMatrix& proj, const Eigen::Ref<const Vec>& x, int n) {
    if (x.size() != proj.inverse.cols())
        throw ShapeError("recover_state: observation dimension does not match the projection");
    if (n < 0 || n > x.size()) throw ShapeError("recover_state: bad state block size");
    return (proj.inverse * x).head(n);
}

/// Shifted noise dynamics for out-of-distribution evaluation. iid-discrete
/// redraws the row distribution; frame-index keeps the cycle and redraws the
/// initial frame distribution; custom redraws every row and the initial law.
inline NoiseChain ood_variant(const NoiseChain& c, std::uint64_t shift_seed) {
    Rng rng = make_rng(shift_seed, 0x00D);
    const int n = c.n_noise();
    switch (c.kind) {
        case NoiseKind::IidDiscrete:
            return NoiseChain::iid(random_distribution(n, rng));
        case NoiseKind::FrameIndex:
            return NoiseChain::frame_index(n, random_distribution(n, rng));
        case NoiseKind::Custom: {
            Mat t(n, n);
            for (int i = 0; i < n; ++i) t.row(i) = random_distribution(n, rng).transpose();
            return NoiseChain::custom(t, random_distribution(n, rng));
        }
    }
    return c;
}

/// Gaussian noise gets its standard deviation scaled by `sigma_scale`;
/// discrete embeddings are left as they are.
inline EmissionSpec ood_variant(const EmissionSpec& e, std::uint64_t /*shift_seed*/,
                                double sigma_scale = 2.0) {
    EmissionSpec out = e;
    if (out.noise.kind == NoiseEmissionKind::Gaussian) out.noise.sigma *= sigma_scale;
    return out;
}

/// Same task factors, shifted noise chain and emission noise.
inline ExBmdp ood_variant(const ExBmdp& m, std::uint64_t shift_seed, double sigma_scale = 2.0) {
    ExBmdp out = m;
    out.noise = ood_variant(m.noise, shift_seed);
    out.emission = ood_variant(m.emission, shift_seed, sigma_scale);
    return out;
}

/// Switches an EX-BMDP to vector observations [feature(s); noise].
inline ExBmdp with_feature_emission(ExBmdp m, NoiseEmission noise,
                                    std::optional<Mat> features = std::nullopt) {
    m.emission.mode = EmissionMode::Feature;
    m.emission.state_features = features.value_or(one_hot_features(m.n_states()));
    m.emission.noise = noise;
    m.emission.projection.reset();
    return m;
}

/// Switches an EX-BMDP to projected observations A [feature(s); noise].
inline ExBmdp with_projected_emission(ExBmdp m, NoiseEmission noise, std::uint64_t projection_seed,
                                      double mu_A = 0.0, double sigma_A = 1.0) {
    m = with_feature_emission(std::move(m), noise);
    m.emission.mode = EmissionMode::Projected;
    m.emission.projection =
        build_projection(projection_seed, m.emission.feature_dim(), m.noise_dim(), mu_A, sigma_A);
    return m;
}

}  // namespace bisim
