#pragma once

// Finite exogenous block MDPs: a task MDP over states S, an independent noise
// chain over Xi, and an emission spec that turns a latent (s, xi) into an
// observation. The tabular observation set is the grid S x Xi, flattened as
// x = s * n_noise + xi.

#include "bisim/common.hpp"

#include <algorithm>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace bisim {

struct FiniteLatentMDP {
    int n_states = 0;
    int n_actions = 0;
    /// transition[a](s, s') = p(s' | s, a)
    std::vector<Mat> transition;
    /// reward(s, a) = R(s, a)
    Mat reward;
    double gamma = 0.9;
    /// p(s_0); empty means uniform.
    Vec initial;

    double prob(int s, int a, int s_next) const { return transition[a](s, s_next); }
};

enum class NoiseKind { IidDiscrete, FrameIndex, Custom };

struct NoiseChain {
    NoiseKind kind = NoiseKind::IidDiscrete;
    /// transition(xi, xi') = p(xi' | xi)
    Mat transition;
    Vec initial;
    /// rho(xi_+): distribution used to resample positives.
    Vec resample;

    int n_noise() const { return static_cast<int>(transition.rows()); }

    /// Every row equals `dist`; initial and resample distributions too.
    static NoiseChain iid(const Vec& dist) {
        NoiseChain c;
        c.kind = NoiseKind::IidDiscrete;
        c.transition = dist.transpose().replicate(dist.size(), 1);
        c.initial = dist;
        c.resample = dist;
        return c;
    }

    /// Cyclic frame counter xi' = (xi + 1) mod frames, resampled uniformly.
    static NoiseChain frame_index(int frames, std::optional<Vec> initial = std::nullopt) {
        NoiseChain c;
        c.kind = NoiseKind::FrameIndex;
        c.transition = Mat::Zero(frames, frames);
        for (int i = 0; i < frames; ++i) c.transition(i, (i + 1) % frames) = 1.0;
        Vec uniform = Vec::Constant(frames, 1.0 / frames);
        c.initial = initial.value_or(uniform);
        c.resample = uniform;
        return c;
    }

    /// Arbitrary chain; positives are resampled from `resample` or, if absent,
    /// from the initial distribution.
    static NoiseChain custom(const Mat& transition, const Vec& initial,
                             std::optional<Vec> resample = std::nullopt) {
        NoiseChain c;
        c.kind = NoiseKind::Custom;
        c.transition = transition;
        c.initial = initial;
        c.resample = resample.value_or(initial);
        return c;
    }
};

enum class EmissionMode { Tabular, Feature, Projected };
enum class NoiseEmissionKind { EmbedDiscrete, Gaussian };

/// How the noise coordinate becomes a vector. EmbedDiscrete emits
/// scale * one_hot(xi) (dimension n_noise); Gaussian emits a fresh draw from
/// N(mu, sigma^2 I) of dimension `dim` at every emission.
struct NoiseEmission {
    NoiseEmissionKind kind = NoiseEmissionKind::EmbedDiscrete;
    double scale = 1.0;
    double mu = 0.0;
    double sigma = 1.0;
    int dim = 0;
};

/// Invertible square matrix A with entries drawn from N(mu_A, sigma_A^2).
struct ProjectionMatrix {
    Mat matrix;
    Mat inverse;
    std::uint64_t seed = 0;
    double mu_A = 0.0;
    double sigma_A = 1.0;
    /// Reciprocal condition estimate of the accepted draw.
    double rcond = 0.0;
    /// Number of draws rejected as numerically singular.
    int regenerations = 0;
};

struct EmissionSpec {
    EmissionMode mode = EmissionMode::Tabular;
    /// Row s is the feature vector of state s (feature and projected modes).
    Mat state_features;
    NoiseEmission noise;
    std::optional<ProjectionMatrix> projection;

    int feature_dim() const { return static_cast<int>(state_features.cols()); }
};

struct ExBmdp {
    FiniteLatentMDP task;
    NoiseChain noise;
    EmissionSpec emission;

    int n_states() const { return task.n_states; }
    int n_actions() const { return task.n_actions; }
    int n_noise() const { return noise.n_noise(); }
    int n_obs() const { return n_states() * n_noise(); }

    int obs_index(int s, int xi) const { return s * n_noise() + xi; }
    int state_of(int x) const { return x / n_noise(); }
    int noise_of(int x) const { return x % n_noise(); }

    /// Dimension of the noise vector in feature/projected observations.
    int noise_dim() const {
        return emission.noise.kind == NoiseEmissionKind::EmbedDiscrete ? n_noise()
                                                                        : emission.noise.dim;
    }

    int obs_dim() const {
        if (emission.mode == EmissionMode::Tabular) return 2;
        return emission.feature_dim() + noise_dim();
    }
};

/// Stochastic policy over the tabular observation grid.
struct Policy {
    /// table(x, a) = pi(a | x)
    Mat table;
    bool exo_free = false;

    int n_obs() const { return static_cast<int>(table.rows()); }
    int n_actions() const { return static_cast<int>(table.cols()); }

    static Policy uniform(int n_obs, int n_actions) {
        return {Mat::Constant(n_obs, n_actions, 1.0 / n_actions), true};
    }

    /// Lifts a per-state table to the observation grid; exo-free by construction.
    static Policy from_state_table(const ExBmdp& m, const Mat& per_state) {
        Policy p;
        p.table.resize(m.n_obs(), m.n_actions());
        for (int x = 0; x < m.n_obs(); ++x) p.table.row(x) = per_state.row(m.state_of(x));
        p.exo_free = true;
        return p;
    }

    /// Deterministic policy from one action per observation. Flagged exo-free
    /// only when the choice agrees across every same-state block.
    static Policy deterministic(const ExBmdp& m, const std::vector<int>& actions);
};

/// True when pi(.|x1) == pi(.|x2) for every pair sharing a task state.
inline bool is_exo_free(const ExBmdp& m, const Policy& pi, double tol = 1e-12) {
    for (int x = 0; x < m.n_obs(); ++x) {
        int base = m.obs_index(m.state_of(x), 0);
        if ((pi.table.row(x) - pi.table.row(base)).cwiseAbs().maxCoeff() > tol) return false;
    }
    return true;
}

inline Policy Policy::deterministic(const ExBmdp& m, const std::vector<int>& actions) {
    if (static_cast<int>(actions.size()) != m.n_obs())
        throw ShapeError("deterministic policy needs one action per observation");
    Policy p;
    p.table = Mat::Zero(m.n_obs(), m.n_actions());
    for (int x = 0; x < m.n_obs(); ++x) {
        if (actions[x] < 0 || actions[x] >= m.n_actions())
            throw ShapeError("action index out of range");
        p.table(x, actions[x]) = 1.0;
    }
    p.exo_free = is_exo_free(m, p);
    return p;
}

// ---------------------------------------------------------------------------
// Validation

struct ValidationReport {
    std::vector<std::string> issues;

    bool ok() const { return issues.empty(); }
    void add(std::string s) { issues.push_back(std::move(s)); }
};

namespace detail {

inline void check_rows(const Mat& m, const std::string& name, ValidationReport& rep) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        if (!is_distribution(m.row(r).transpose())) {
            std::ostringstream os;
            os << name << " row " << r << " is not a distribution (sum " << m.row(r).sum() << ")";
            rep.add(os.str());
        }
    }
}

inline void check_dist(const Vec& v, int n, const std::string& name, ValidationReport& rep) {
    if (v.size() != n) {
        rep.add(name + " has wrong length");
    } else if (!is_distribution(v)) {
        rep.add(name + " is not a distribution");
    }
}

}  // namespace detail

inline ValidationReport validate(const FiniteLatentMDP& t) {
    ValidationReport rep;
    if (t.n_states < 1) rep.add("task: n_states must be >= 1");
    if (t.n_actions < 1) rep.add("task: n_actions must be >= 1");
    if (static_cast<int>(t.transition.size()) != t.n_actions) {
        rep.add("task: transition must have one matrix per action");
    } else {
        for (int a = 0; a < t.n_actions; ++a) {
            const Mat& p = t.transition[a];
            if (p.rows() != t.n_states || p.cols() != t.n_states) {
                rep.add("task: transition[" + std::to_string(a) + "] has wrong shape");
                continue;
            }
            detail::check_rows(p, "task: transition[a=" + std::to_string(a) + "]", rep);
        }
    }
    if (t.reward.rows() != t.n_states || t.reward.cols() != t.n_actions) {
        rep.add("task: reward has wrong shape");
    } else if (!t.reward.allFinite()) {
        rep.add("task: reward has non-finite entries");
    }
    if (!(t.gamma >= 0.0 && t.gamma < 1.0)) rep.add("task: discount gamma must lie in [0, 1)");
    if (t.initial.size() != 0) detail::check_dist(t.initial, t.n_states, "task: initial", rep);
    return rep;
}

inline ValidationReport validate(const ExBmdp& m) {
    ValidationReport rep = validate(m.task);
    const NoiseChain& c = m.noise;
    const int n = c.n_noise();
    if (n < 1 || c.transition.cols() != n) {
        rep.add("noise: transition must be square and non-empty");
        return rep;
    }
    detail::check_rows(c.transition, "noise: transition", rep);
    detail::check_dist(c.initial, n, "noise: initial", rep);
    detail::check_dist(c.resample, n, "noise: resample", rep);
    if (c.kind == NoiseKind::FrameIndex) {
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                double want = (j == (i + 1) % n) ? 1.0 : 0.0;
                if (c.transition(i, j) != want) {
                    rep.add("noise: frame-index chain must be the cyclic shift");
                    i = n;
                    break;
                }
            }
        }
    } else if (c.kind == NoiseKind::IidDiscrete) {
        for (int i = 1; i < n; ++i) {
            if ((c.transition.row(i) - c.transition.row(0)).cwiseAbs().maxCoeff() > kDistTol) {
                rep.add("noise: iid-discrete rows must be identical");
                break;
            }
        }
        if (c.resample.size() == n &&
            (c.resample.transpose() - c.transition.row(0)).cwiseAbs().maxCoeff() > kDistTol)
            rep.add("noise: iid-discrete resample distribution must equal the row distribution");
    }

    const EmissionSpec& e = m.emission;
    if (e.mode != EmissionMode::Tabular) {
        if (e.state_features.rows() != m.n_states() || e.state_features.cols() < 1)
            rep.add("emission: state_features must have one row per state");
        if (e.noise.kind == NoiseEmissionKind::Gaussian) {
            if (e.noise.dim < 0) rep.add("emission: gaussian noise dim must be >= 0");
            if (!(e.noise.sigma >= 0.0)) rep.add("emission: gaussian sigma must be >= 0");
        }
        // Distinct states must have distinct features or the block structure breaks.
        for (int s1 = 0; s1 < e.state_features.rows(); ++s1)
            for (int s2 = s1 + 1; s2 < e.state_features.rows(); ++s2)
                if (e.state_features.row(s1) == e.state_features.row(s2))
                    rep.add("emission: states " + std::to_string(s1) + " and " +
                            std::to_string(s2) + " share a feature vector");
    }
    if (e.mode == EmissionMode::Projected) {
        if (!e.projection) {
            rep.add("emission: projected mode needs a projection matrix");
        } else {
            const int d = m.obs_dim();
            const Mat& a = e.projection->matrix;
            const Mat& ai = e.projection->inverse;
            if (a.rows() != d || a.cols() != d || ai.rows() != d || ai.cols() != d) {
                rep.add("emission: projection must be (n+m)x(n+m)");
            } else if ((a * ai - Mat::Identity(d, d)).cwiseAbs().maxCoeff() > 1e-9) {
                rep.add("emission: projection inverse residual exceeds 1e-9");
            }
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Grounded dynamics over the observation grid

/// P[a](x, x') over the latent grid. Built only from the two factors, so the
/// product structure p(s'|s,a) p(xi'|xi) holds by construction.
inline std::vector<Mat> latent_grid_transition(const ExBmdp& m) {
    std::vector<Mat> out;
    out.reserve(m.n_actions());
    const Mat& noise = m.noise.transition;
    const int n = m.n_noise();
    for (int a = 0; a < m.n_actions(); ++a) {
        const Mat& task = m.task.transition[a];
        Mat p(m.n_obs(), m.n_obs());
        for (int s = 0; s < m.n_states(); ++s)
            for (int s2 = 0; s2 < m.n_states(); ++s2)
                p.block(s * n, s2 * n, n, n) = task(s, s2) * noise;
        out.push_back(std::move(p));
    }
    return out;
}

/// Grounded transition P(x'|x,a); only defined for the tabular emission.
inline std::vector<Mat> grounded_transition(const ExBmdp& m) {
    if (m.emission.mode != EmissionMode::Tabular)
        throw UnsupportedModeError("grounded_transition requires the tabular emission");
    return latent_grid_transition(m);
}

/// Grounded reward R(x, a) = R(phi*(x), a) over the grid.
inline Mat grounded_reward(const ExBmdp& m) {
    Mat r(m.n_obs(), m.n_actions());
    for (int x = 0; x < m.n_obs(); ++x) r.row(x) = m.task.reward.row(m.state_of(x));
    return r;
}

/// Everything the exact metrics need, decoupled from how it was produced so
/// that non-factored models can be fed in as negative controls.
struct GroundedModel {
    std::vector<Mat> transition;  ///< per action, n_obs x n_obs
    Mat reward;                   ///< n_obs x n_actions
    std::vector<int> state_of;    ///< phi*(x)

    int n_obs() const { return static_cast<int>(reward.rows()); }
    int n_actions() const { return static_cast<int>(reward.cols()); }
};

inline GroundedModel make_grounded_model(const ExBmdp& m) {
    GroundedModel g;
    g.transition = grounded_transition(m);
    g.reward = grounded_reward(m);
    g.state_of.resize(m.n_obs());
    for (int x = 0; x < m.n_obs(); ++x) g.state_of[x] = m.state_of(x);
    return g;
}

/// P^pi(x'|x) = E_{a~pi(.|x)} P(x'|x,a)
inline Mat policy_chain(const std::vector<Mat>& p, const Policy& pi) {
    if (p.empty() || static_cast<int>(p.size()) != pi.n_actions())
        throw ShapeError("policy_chain: action count mismatch");
    const Eigen::Index n = p.front().rows();
    if (pi.n_obs() != n) throw ShapeError("policy_chain: observation count mismatch");
    Mat out = Mat::Zero(n, n);
    for (std::size_t a = 0; a < p.size(); ++a) {
        if (p[a].rows() != n || p[a].cols() != n) throw ShapeError("policy_chain: bad matrix");
        out += pi.table.col(static_cast<Eigen::Index>(a)).asDiagonal() * p[a];
    }
    return out;
}

/// R^pi(x) = E_{a~pi(.|x)} R(x, a)
inline Vec policy_reward(const Mat& reward, const Policy& pi) {
    if (reward.rows() != pi.n_obs() || reward.cols() != pi.n_actions())
        throw ShapeError("policy_reward: shape mismatch");
    return pi.table.cwiseProduct(reward).rowwise().sum();
}

/// Stationary distribution of a Markov matrix. Iterates the averaged map
/// rho <- (rho + rho P) / 2, which shares its fixed points with P and is
/// aperiodic, so periodic chains converge too. Stops once ||rho P - rho||_1 <= tol.
inline Vec stationary_distribution(const Mat& chain, double tol = 1e-12, int max_iters = 1000000,
                                   std::optional<Vec> start = std::nullopt) {
    const Eigen::Index n = chain.rows();
    if (n == 0 || chain.cols() != n) throw ShapeError("stationary_distribution: chain must be square");
    for (Eigen::Index r = 0; r < n; ++r)
        if (!is_distribution(chain.row(r).transpose(), 1e-9))
            throw PreconditionError("stationary_distribution: row " + std::to_string(r) +
                                    " is not a distribution");
    Eigen::RowVectorXd rho = Eigen::RowVectorXd::Constant(n, 1.0 / n);
    if (start) {
        if (start->size() != n) throw ShapeError("stationary_distribution: start has the wrong size");
        rho = start->transpose();
    }
    double residual = std::numeric_limits<double>::infinity();
    for (int it = 0; it < max_iters; ++it) {
        Eigen::RowVectorXd next = rho * chain;
        residual = (next - rho).lpNorm<1>();
        if (residual <= tol) return rho.transpose() / rho.sum();
        rho = 0.5 * (rho + next);
        rho /= rho.sum();
    }
    throw ConvergenceError("stationary_distribution did not converge", residual);
}

struct ValueResult {
    Mat q;  ///< S x A
    Vec v;
    /// Every action within `tie_tol` of the maximum, per state; ties are kept.
    std::vector<std::vector<int>> greedy;
    int iterations = 0;
    double residual = 0.0;
};

/// Value iteration on the task MDP until ||T V - V||_inf <= tol.
inline ValueResult value_iteration(const FiniteLatentMDP& t, double tol = 1e-12,
                                   int max_iters = 1000000, double tie_tol = 1e-9) {
    const int ns = t.n_states, na = t.n_actions;
    Vec v = Vec::Zero(ns);
    Mat q(ns, na);
    ValueResult res;
    for (int it = 1; it <= max_iters; ++it) {
        for (int a = 0; a < na; ++a) q.col(a) = t.reward.col(a) + t.gamma * t.transition[a] * v;
        Vec next = q.rowwise().maxCoeff();
        double delta = (next - v).cwiseAbs().maxCoeff();
        v = std::move(next);
        if (delta <= tol) {
            res.iterations = it;
            break;
        }
        if (it == max_iters) throw ConvergenceError("value_iteration did not converge", delta);
    }
    for (int a = 0; a < na; ++a) q.col(a) = t.reward.col(a) + t.gamma * t.transition[a] * v;
    Vec tv = q.rowwise().maxCoeff();
    res.residual = (tv - v).cwiseAbs().maxCoeff();
    res.q = q;
    res.v = tv;
    res.greedy.resize(ns);
    for (int s = 0; s < ns; ++s)
        for (int a = 0; a < na; ++a)
            if (q(s, a) >= tv[s] - tie_tol) res.greedy[s].push_back(a);
    return res;
}

struct PolicyValue {
    Vec v;  ///< V^pi(x)
    Mat q;  ///< Q^pi(x, a)
};

/// Exact policy evaluation on a grounded model by a direct linear solve.
inline PolicyValue evaluate_policy(const GroundedModel& g, const Policy& pi, double gamma) {
    const int n = g.n_obs();
    Mat chain = policy_chain(g.transition, pi);
    Vec r = policy_reward(g.reward, pi);
    Mat lhs = Mat::Identity(n, n) - gamma * chain;
    PolicyValue out;
    out.v = lhs.partialPivLu().solve(r);
    out.q.resize(n, g.n_actions());
    for (int a = 0; a < g.n_actions(); ++a)
        out.q.col(a) = g.reward.col(a) + gamma * g.transition[a] * out.v;
    return out;
}

/// Epsilon-soft greedy policy: mass (1 - eps) spread over the co-optimal
/// actions of phi*(x), eps spread uniformly. Exo-free by construction.
inline Policy epsilon_optimal_policy(const ExBmdp& m, double eps) {
    ValueResult vr = value_iteration(m.task);
    Mat per_state = Mat::Constant(m.n_states(), m.n_actions(), eps / m.n_actions());
    for (int s = 0; s < m.n_states(); ++s) {
        const auto& best = vr.greedy[s];
        for (int a : best) per_state(s, a) += (1.0 - eps) / static_cast<double>(best.size());
    }
    return Policy::from_state_table(m, per_state);
}

// ---------------------------------------------------------------------------
// Oracle encoder

/// Index of the state whose feature row is nearest to `block`.
inline int nearest_state(const Mat& features, const Eigen::Ref<const Vec>& block) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int s = 0; s < features.rows(); ++s) {
        double d = (features.row(s).transpose() - block).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = s;
        }
    }
    return best;
}

/// phi*(x): the task state that generated observation x.
inline int oracle_encode(const ExBmdp& m, const Eigen::Ref<const Vec>& x) {
    if (x.size() != m.obs_dim()) throw ShapeError("oracle_encode: observation has wrong dimension");
    switch (m.emission.mode) {
        case EmissionMode::Tabular: {
            double s = x[0], xi = x[1];
            if (s != std::floor(s) || xi != std::floor(xi) || s < 0 || s >= m.n_states() ||
                xi < 0 || xi >= m.n_noise())
                throw PreconditionError("oracle_encode: observation outside the emission support");
            return static_cast<int>(s);
        }
        case EmissionMode::Feature:
            return nearest_state(m.emission.state_features, x.head(m.emission.feature_dim()));
        case EmissionMode::Projected: {
            Vec z = m.emission.projection->inverse * x;
            return nearest_state(m.emission.state_features, z.head(m.emission.feature_dim()));
        }
    }
    throw UnsupportedModeError("oracle_encode: unknown emission mode");
}

inline int oracle_encode(const ExBmdp& m, int flat_index) {
    if (flat_index < 0 || flat_index >= m.n_obs())
        throw PreconditionError("oracle_encode: observation index out of range");
    return m.state_of(flat_index);
}

// ---------------------------------------------------------------------------
// Random instances

inline Vec random_distribution(int n, Rng& rng) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    Vec p(n);
    for (int i = 0; i < n; ++i) p[i] = u(rng);
    return p / p.sum();
}

inline Mat one_hot_features(int n_states) { return Mat::Identity(n_states, n_states); }

/// Seeded random EX-BMDP with dense stochastic task dynamics, rewards in
/// [0, 1), gamma = 0.9 and a tabular emission.
inline ExBmdp random_exbmdp(std::uint64_t seed, int n_states, int n_actions, int n_noise,
                            NoiseKind kind = NoiseKind::IidDiscrete) {
    if (n_states < 1 || n_actions < 1 || n_noise < 1)
        throw PreconditionError("random_exbmdp: counts must be >= 1");
    Rng rng = make_rng(seed, 0xE7B);
    ExBmdp m;
    m.task.n_states = n_states;
    m.task.n_actions = n_actions;
    m.task.gamma = 0.9;
    for (int a = 0; a < n_actions; ++a) {
        Mat p(n_states, n_states);
        for (int s = 0; s < n_states; ++s) p.row(s) = random_distribution(n_states, rng).transpose();
        m.task.transition.push_back(std::move(p));
    }
    std::uniform_real_distribution<double> ur(0.0, 1.0);
    m.task.reward.resize(n_states, n_actions);
    for (int s = 0; s < n_states; ++s)
        for (int a = 0; a < n_actions; ++a) m.task.reward(s, a) = ur(rng);
    m.task.initial = Vec::Constant(n_states, 1.0 / n_states);

    switch (kind) {
        case NoiseKind::IidDiscrete:
            m.noise = NoiseChain::iid(random_distribution(n_noise, rng));
            break;
        case NoiseKind::FrameIndex:
            m.noise = NoiseChain::frame_index(n_noise);
            break;
        case NoiseKind::Custom: {
            Mat t(n_noise, n_noise);
            for (int i = 0; i < n_noise; ++i) t.row(i) = random_distribution(n_noise, rng).transpose();
            m.noise = NoiseChain::custom(t, random_distribution(n_noise, rng));
            break;
        }
    }
    m.emission.mode = EmissionMode::Tabular;
    m.emission.state_features = one_hot_features(n_states);
    return m;
}

inline std::string to_string(NoiseKind k) {
    switch (k) {
        case NoiseKind::IidDiscrete: return "iid-discrete";
        case NoiseKind::FrameIndex: return "frame-index";
        case NoiseKind::Custom: return "custom";
    }
    return "?";
}

inline NoiseKind parse_noise_kind(const std::string& s) {
    if (s == "iid-discrete" || s == "iid") return NoiseKind::IidDiscrete;
    if (s == "frame-index" || s == "frame") return NoiseKind::FrameIndex;
    if (s == "custom") return NoiseKind::Custom;
    throw Error("unknown noise kind: " + s);
}

inline std::string to_string(EmissionMode k) {
    switch (k) {
        case EmissionMode::Tabular: return "tabular";
        case EmissionMode::Feature: return "feature";
        case EmissionMode::Projected: return "projected";
    }
    return "?";
}

inline EmissionMode parse_emission_mode(const std::string& s) {
    if (s == "tabular") return EmissionMode::Tabular;
    if (s == "feature") return EmissionMode::Feature;
    if (s == "projected") return EmissionMode::Projected;
    throw Error("unknown emission mode: " + s);
}

}  // namespace bisim
