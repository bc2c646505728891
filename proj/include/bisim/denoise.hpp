#pragma once

// Denoising factor of an encoder under a policy:
//   Pos = E ||phi(x) - phi(x+)||,  x ~ rho_pi, x+ shares phi*(x) with resampled noise
//   Neg = E ||phi(x) - phi(x-)||,  x, x- iid ~ rho_pi
//   DF  = (Neg - Pos) / (Neg + Pos)

#include "bisim/learner.hpp"
#include "bisim/mdp.hpp"
#include "bisim/noise.hpp"

#include <functional>
#include <string>
#include <vector>

namespace bisim {

/// Maps observation columns (d x N) to latent columns (k x N).
using BatchEncoder = std::function<Mat(const Mat&)>;

enum class PsiDistance { L2, L1, Cosine };

inline std::string to_string(PsiDistance d) {
    switch (d) {
        case PsiDistance::L2: return "l2";
        case PsiDistance::L1: return "l1";
        case PsiDistance::Cosine: return "cosine";
    }
    return "?";
}

inline PsiDistance parse_psi_distance(const std::string& s) {
    if (s == "l2") return PsiDistance::L2;
    if (s == "l1") return PsiDistance::L1;
    if (s == "cosine") return PsiDistance::Cosine;
    throw Error("unknown representation distance: " + s);
}

inline double psi_distance(PsiDistance kind, const Eigen::Ref<const Vec>& u, const Eigen::Ref<const Vec>& v) {
    switch (kind) {
        case PsiDistance::L2: return (u - v).norm();
        case PsiDistance::L1: return (u - v).lpNorm<1>();
        case PsiDistance::Cosine: return cosine_distance(u, v);
    }
    return 0.0;
}

struct DfConfig {
    int n_anchors = 256;
    int n_pos = 16;
    int n_neg = 16;
    std::uint64_t seed = 0;
    PsiDistance d_psi = PsiDistance::L2;
};

struct EvalReport {
    double pos = 0.0;
    double neg = 0.0;
    double df = 0.0;
    int n_anchors = 0;
    int n_pos = 0;
    int n_neg = 0;
    std::string d_psi_kind = "l2";
};

/// Below this, Pos + Neg counts as 0 and DF is reported as 0.
inline constexpr double kDfDegenerate = 1e-12;

inline double df_from_scores(double pos, double neg) {
    const double s = pos + neg;
    if (s < kDfDegenerate) return 0.0;
    return std::clamp((neg - pos) / s, -1.0, 1.0);
}

/// rho_pi over the latent grid: stationary law of the policy chain.
inline Vec latent_occupancy(const ExBmdp& m, const Policy& pi) {
    return stationary_distribution(policy_chain(latent_grid_transition(m), pi));
}

/// rho(xi+) as stored on the chain: the row law for iid noise, uniform over
/// frames for frame-index noise.
inline Vec positive_noise_distribution(const ExBmdp& m) {
    if (m.noise.resample.size() != m.n_noise()) throw ShapeError("noise chain has no resample distribution");
    return m.noise.resample;
}

struct Anchor {
    int s = 0;
    int xi = 0;
    Vec x;
};

inline std::vector<Anchor> sample_anchors(const ExBmdp& m, const Vec& occupancy, int n, Rng& rng) {
    std::vector<Anchor> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        int idx = sample_index(occupancy, rng);
        Anchor a{m.state_of(idx), m.noise_of(idx), {}};
        a.x = emit_observation(m, a.s, a.xi, rng);
        out.push_back(std::move(a));
    }
    return out;
}

inline std::vector<Anchor> sample_anchors(const ExBmdp& m, const Policy& pi, int n, Rng& rng) {
    return sample_anchors(m, latent_occupancy(m, pi), n, rng);
}

namespace detail {

inline Mat stack_columns(const std::vector<Vec>& xs) {
    Mat out(xs.front().size(), static_cast<Eigen::Index>(xs.size()));
    for (std::size_t i = 0; i < xs.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = xs[i];
    return out;
}

inline Mat encode_anchors(const BatchEncoder& enc, const std::vector<Anchor>& anchors) {
    std::vector<Vec> xs;
    xs.reserve(anchors.size());
    for (const auto& a : anchors) xs.push_back(a.x);
    return enc(stack_columns(xs));
}

}  // namespace detail

/// Mean distance between each anchor and `n_pos` positives x+ ~ q(.|phi*(x), xi+).
inline double positive_score(const BatchEncoder& enc, const ExBmdp& m, const std::vector<Anchor>& anchors,
                             int n_pos, Rng& rng, PsiDistance d = PsiDistance::L2) {
    if (anchors.empty()) throw PreconditionError("positive_score: empty anchor set");
    if (n_pos < 1) throw PreconditionError("positive_score: n_pos must be positive");
    const Vec rho = positive_noise_distribution(m);
    std::vector<Vec> xs;
    xs.reserve(anchors.size() * n_pos);
    for (const auto& a : anchors)
        for (int k = 0; k < n_pos; ++k) xs.push_back(emit_observation(m, a.s, sample_index(rho, rng), rng));
    Mat za = detail::encode_anchors(enc, anchors);
    Mat zp = enc(detail::stack_columns(xs));
    double total = 0.0;
    for (std::size_t i = 0; i < anchors.size(); ++i)
        for (int k = 0; k < n_pos; ++k)
            total += psi_distance(d, za.col(i), zp.col(static_cast<Eigen::Index>(i * n_pos + k)));
    return total / static_cast<double>(xs.size());
}

/// Mean distance between each anchor and `n_neg` independent draws x- ~ rho_pi.
inline double negative_score(const BatchEncoder& enc, const ExBmdp& m, const Vec& occupancy,
                             const std::vector<Anchor>& anchors, int n_neg, Rng& rng,
                             PsiDistance d = PsiDistance::L2) {
    if (anchors.empty()) throw PreconditionError("negative_score: empty anchor set");
    if (n_neg < 1) throw PreconditionError("negative_score: n_neg must be positive");
    std::vector<Anchor> negs = sample_anchors(m, occupancy, static_cast<int>(anchors.size()) * n_neg, rng);
    Mat za = detail::encode_anchors(enc, anchors);
    Mat zn = detail::encode_anchors(enc, negs);
    double total = 0.0;
    for (std::size_t i = 0; i < anchors.size(); ++i)
        for (int k = 0; k < n_neg; ++k)
            total += psi_distance(d, za.col(i), zn.col(static_cast<Eigen::Index>(i * n_neg + k)));
    return total / static_cast<double>(negs.size());
}

inline double negative_score(const BatchEncoder& enc, const ExBmdp& m, const Policy& pi,
                             const std::vector<Anchor>& anchors, int n_neg, Rng& rng,
                             PsiDistance d = PsiDistance::L2) {
    return negative_score(enc, m, latent_occupancy(m, pi), anchors, n_neg, rng, d);
}

/// Anchors, positives and negatives use separate streams of `cfg.seed`, so the
/// draws do not depend on the encoder.
inline EvalReport denoising_factor(const BatchEncoder& enc, const ExBmdp& m, const Policy& pi,
                                   const DfConfig& cfg = {}) {
    const Vec occ = latent_occupancy(m, pi);
    Rng ra = make_rng(cfg.seed, 0xA0), rp = make_rng(cfg.seed, 0xB0), rn = make_rng(cfg.seed, 0xC0);
    std::vector<Anchor> anchors = sample_anchors(m, occ, cfg.n_anchors, ra);
    EvalReport r;
    r.pos = positive_score(enc, m, anchors, cfg.n_pos, rp, cfg.d_psi);
    r.neg = negative_score(enc, m, occ, anchors, cfg.n_neg, rn, cfg.d_psi);
    r.df = df_from_scores(r.pos, r.neg);
    r.n_anchors = cfg.n_anchors;
    r.n_pos = cfg.n_pos;
    r.n_neg = cfg.n_neg;
    r.d_psi_kind = to_string(cfg.d_psi);
    return r;
}

/// phi*: one-hot of the oracle state.
inline BatchEncoder oracle_encoder(const ExBmdp& m) {
    return [m](const Mat& x) {
        Mat out = Mat::Zero(m.n_states(), x.cols());
        for (Eigen::Index j = 0; j < x.cols(); ++j) out(oracle_encode(m, Vec(x.col(j))), j) = 1.0;
        return out;
    };
}

inline BatchEncoder params_encoder(const EncoderConfig& ec, const Params& p) {
    return [ec, p](const Mat& x) { return encode_batch(ec, p, x); };
}

}  // namespace bisim
