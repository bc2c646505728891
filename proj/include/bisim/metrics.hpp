#pragma once

// Exact behavioral metrics on tabular EX-BMDPs, computed by iterating the
// defining operator from the zero matrix until the sup-norm step is below tol.
//
//   BSM   d(x,y) = max_a [ c_R |R(x,a) - R(y,a)| + c_T W1(d)(P(.|x,a), P(.|y,a)) ]
//   PBSM  d(x,y) = c_R |R^pi(x) - R^pi(y)| + c_T W1(d)(P^pi(.|x), P^pi(.|y))
//   MICo  u(x,y) = c_R |R^pi(x) - R^pi(y)| + c_T E_{x'~P^pi(.|x), y'~P^pi(.|y)} u(x',y')

#include "bisim/distance.hpp"
#include "bisim/mdp.hpp"

#include <optional>
#include <utility>
#include <vector>

namespace bisim {

struct DistanceMatrix {
    Mat values;
    MetricSpec spec;
    int iterations = 0;
    double final_residual = 0.0;
    /// trace[t] = ||d_{t+1} - d_t||_inf
    std::vector<double> trace;

    int size() const { return static_cast<int>(values.rows()); }
    double operator()(int i, int j) const { return values(i, j); }
};

namespace detail {

inline bool rows_equal(const Mat& p, int i, int j) { return p.row(i) == p.row(j); }

inline double w1_rows(const Mat& d, const Mat& p, int i, int j) {
    if (rows_equal(p, i, j)) return 0.0;
    return wasserstein1(d, p.row(i).transpose(), p.row(j).transpose()).value;
}

inline void require_policy(const std::optional<Policy>& pi, const GroundedModel& g) {
    if (!pi) throw PreconditionError("PBSM and MICo need a policy");
    if (pi->n_obs() != g.n_obs() || pi->n_actions() != g.n_actions())
        throw ShapeError("policy shape does not match the model");
}

}  // namespace detail

/// One application of the metric operator to `d`.
inline Mat apply_metric_operator(const GroundedModel& g, const std::optional<Policy>& pi,
                                 const MetricSpec& spec, const Mat& d) {
    const int n = g.n_obs();
    Mat out = Mat::Zero(n, n);
    switch (spec.kind) {
        case MetricSpec::Kind::Bsm:
            for (int i = 0; i < n; ++i)
                for (int j = i + 1; j < n; ++j) {
                    double best = 0.0;
                    for (int a = 0; a < g.n_actions(); ++a) {
                        double v = spec.c_R * std::abs(g.reward(i, a) - g.reward(j, a)) +
                                   spec.c_T * detail::w1_rows(d, g.transition[a], i, j);
                        best = std::max(best, v);
                    }
                    out(i, j) = out(j, i) = best;
                }
            break;
        case MetricSpec::Kind::Pbsm: {
            detail::require_policy(pi, g);
            Mat chain = policy_chain(g.transition, *pi);
            Vec r = policy_reward(g.reward, *pi);
            for (int i = 0; i < n; ++i)
                for (int j = i + 1; j < n; ++j) {
                    double v = spec.c_R * std::abs(r[i] - r[j]) +
                               spec.c_T * detail::w1_rows(d, chain, i, j);
                    out(i, j) = out(j, i) = v;
                }
            break;
        }
        case MetricSpec::Kind::Mico: {
            detail::require_policy(pi, g);
            Mat chain = policy_chain(g.transition, *pi);
            Vec r = policy_reward(g.reward, *pi);
            Mat expect = chain * d * chain.transpose();
            for (int i = 0; i < n; ++i)
                for (int j = i; j < n; ++j) {
                    double v = spec.c_R * std::abs(r[i] - r[j]) +
                               spec.c_T * 0.5 * (expect(i, j) + expect(j, i));
                    out(i, j) = out(j, i) = v;
                }
            break;
        }
    }
    return out;
}

/// ||F(d) - d||_inf
inline double operator_residual(const GroundedModel& g, const std::optional<Policy>& pi,
                                const MetricSpec& spec, const Mat& d) {
    return (apply_metric_operator(g, pi, spec, d) - d).cwiseAbs().maxCoeff();
}

/// Fixed point of the metric operator. BSM ignores `pi`; PBSM and MICo need it.
inline DistanceMatrix metric_fixed_point(const GroundedModel& g, const std::optional<Policy>& pi,
                                         const MetricSpec& spec, double tol = 1e-10,
                                         int max_iters = 100000) {
    spec.check();
    if (spec.kind != MetricSpec::Kind::Bsm) detail::require_policy(pi, g);
    DistanceMatrix out;
    out.spec = spec;
    Mat d = Mat::Zero(g.n_obs(), g.n_obs());
    for (int it = 1; it <= max_iters; ++it) {
        Mat next = apply_metric_operator(g, pi, spec, d);
        double delta = (next - d).cwiseAbs().maxCoeff();
        out.trace.push_back(delta);
        d = std::move(next);
        if (delta <= tol) {
            out.values = std::move(d);
            out.iterations = it;
            out.final_residual = delta;
            return out;
        }
    }
    throw ConvergenceError("metric_fixed_point did not converge", out.trace.back(), out.trace);
}

inline DistanceMatrix metric_fixed_point(const ExBmdp& m, const std::optional<Policy>& pi,
                                         const MetricSpec& spec, double tol = 1e-10,
                                         int max_iters = 100000) {
    return metric_fixed_point(make_grounded_model(m), pi, spec, tol, max_iters);
}

/// SimSR distance with the true transition model: the MICo fixed point.
inline DistanceMatrix simsr_exact(const ExBmdp& m, const Policy& pi, double c_R, double c_T,
                                  double tol = 1e-10, int max_iters = 100000) {
    return metric_fixed_point(m, pi, MetricSpec::simsr(c_R, c_T), tol, max_iters);
}

/// Unordered observation pairs (x, x+) with phi*(x) == phi*(x+), x < x+.
inline std::vector<std::pair<int, int>> anchor_positive_pairs(const std::vector<int>& state_of) {
    std::vector<std::pair<int, int>> out;
    const int n = static_cast<int>(state_of.size());
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (state_of[i] == state_of[j]) out.emplace_back(i, j);
    return out;
}

inline std::vector<std::pair<int, int>> anchor_positive_pairs(const ExBmdp& m) {
    if (m.emission.mode != EmissionMode::Tabular)
        throw UnsupportedModeError("anchor_positive_pairs requires the tabular emission");
    std::vector<int> state_of(m.n_obs());
    for (int x = 0; x < m.n_obs(); ++x) state_of[x] = m.state_of(x);
    return anchor_positive_pairs(state_of);
}

}  // namespace bisim
