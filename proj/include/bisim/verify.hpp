#pragma once

// Numeric certificates for the denoising and isometry properties of the exact
// metrics, plus the PBSM counterexample with an exo-dependent optimal policy.

#include "bisim/metrics.hpp"

#include "json.hpp"

#include <map>
#include <numeric>
#include <string>

namespace bisim {

struct Certificate {
    std::string claim;
    std::string instance;
    double measured = 0.0;
    double threshold = 0.0;
    /// "<=" or ">": how `measured` must compare with `threshold`.
    std::string relation = "<=";
    bool passed = false;
    nlohmann::json details = nlohmann::json::object();

    void decide() { passed = relation == "<=" ? measured <= threshold : measured > threshold; }
};

namespace detail {

inline double max_over_anchor_pairs(const Mat& d, const std::vector<int>& state_of) {
    double worst = 0.0;
    for (auto [x, y] : anchor_positive_pairs(state_of)) worst = std::max(worst, d(x, y));
    return worst;
}

inline bool is_exo_free(const GroundedModel& g, const Policy& pi, double tol = 1e-12) {
    const int n = g.n_obs();
    for (int x = 0; x < n; ++x)
        for (int y = x + 1; y < n; ++y)
            if (g.state_of[x] == g.state_of[y] &&
                (pi.table.row(x) - pi.table.row(y)).cwiseAbs().maxCoeff() > tol)
                return false;
    return true;
}

}  // namespace detail

/// max BSM over same-state pairs <= tol. Takes a GroundedModel so non-factored
/// models can be checked as negative controls.
inline Certificate verify_bsm_denoising(const GroundedModel& g, double tol = 1e-8, double c_T = 0.9,
                                        const std::string& instance = "grounded") {
    Certificate c;
    c.claim = "bsm_denoising";
    c.instance = instance;
    c.threshold = tol;
    auto dm = metric_fixed_point(g, std::nullopt, {MetricSpec::Kind::Bsm, 1.0, c_T});
    c.measured = detail::max_over_anchor_pairs(dm.values, g.state_of);
    c.details["pairs"] = anchor_positive_pairs(g.state_of).size();
    c.details["iterations"] = dm.iterations;
    c.decide();
    return c;
}

inline Certificate verify_bsm_denoising(const ExBmdp& m, double tol = 1e-8, double c_T = 0.9,
                                        const std::string& instance = "exbmdp") {
    return verify_bsm_denoising(make_grounded_model(m), tol, c_T, instance);
}

/// max PBSM over same-state pairs <= tol for an exo-free policy.
inline Certificate verify_pbsm_exofree(const GroundedModel& g, const Policy& pi, double tol = 1e-8,
                                       double c_T = 0.9, const std::string& instance = "grounded") {
    if (!detail::is_exo_free(g, pi)) throw PreconditionError("verify_pbsm_exofree: policy is not exo-free");
    Certificate c;
    c.claim = "pbsm_exofree_denoising";
    c.instance = instance;
    c.threshold = tol;
    auto dm = metric_fixed_point(g, pi, {MetricSpec::Kind::Pbsm, 1.0, c_T});
    c.measured = detail::max_over_anchor_pairs(dm.values, g.state_of);
    c.details["pairs"] = anchor_positive_pairs(g.state_of).size();
    c.details["iterations"] = dm.iterations;
    c.decide();
    return c;
}

inline Certificate verify_pbsm_exofree(const ExBmdp& m, const Policy& pi, double tol = 1e-8, double c_T = 0.9,
                                       const std::string& instance = "exbmdp") {
    return verify_pbsm_exofree(make_grounded_model(m), pi, tol, c_T, instance);
}

struct Counterexample {
    ExBmdp model;
    Policy policy;          ///< optimal, exo-dependent
    Policy exo_free_policy;  ///< same instance, ties broken by state only
    Certificate certificate;
};

/// States s0, s1, s_end (absorbing, reward 0), gamma = 0.5, two iid uniform
/// noise values. From s0, a1 pays 1 and ends; a2 pays 0 and moves to s1, which
/// pays 1/gamma and ends. Both actions are optimal at s0 with Q* = 1. The
/// policy plays a1 at (s0, xi0) and a2 at (s0, xi1).
inline Counterexample construct_pbsm_counterexample(double c_T = 0.5) {
    const double gamma = 0.5;
    FiniteLatentMDP t;
    t.n_states = 3;
    t.n_actions = 2;
    Mat a1 = Mat::Zero(3, 3), a2 = Mat::Zero(3, 3);
    a1(0, 2) = 1.0;
    a2(0, 1) = 1.0;
    a1(1, 2) = a2(1, 2) = 1.0;
    a1(2, 2) = a2(2, 2) = 1.0;
    t.transition = {a1, a2};
    t.reward = Mat::Zero(3, 2);
    t.reward(0, 0) = 1.0;
    t.reward(1, 0) = t.reward(1, 1) = 1.0 / gamma;
    t.gamma = gamma;
    t.initial = Vec::Unit(3, 0);

    Counterexample ce;
    ce.model.task = t;
    ce.model.noise = NoiseChain::iid(Vec::Constant(2, 0.5));
    ce.model.emission.state_features = one_hot_features(3);
    const ExBmdp& m = ce.model;
    ce.policy = Policy::deterministic(m, {0, 1, 0, 0, 0, 0});
    ce.exo_free_policy = Policy::deterministic(m, {0, 0, 0, 0, 0, 0});

    // Optimality: the policy's value equals V* on every observation.
    ValueResult vr = value_iteration(t, 1e-14);
    GroundedModel g = make_grounded_model(m);
    PolicyValue pv = evaluate_policy(g, ce.policy, gamma);
    double opt_gap = 0.0;
    for (int x = 0; x < m.n_obs(); ++x) {
        opt_gap = std::max(opt_gap, std::abs(pv.v[x] - vr.v[m.state_of(x)]));
        for (int a = 0; a < m.n_actions(); ++a)
            if (ce.policy.table(x, a) > 0.0)
                opt_gap = std::max(opt_gap, std::abs(vr.q(m.state_of(x), a) - vr.v[m.state_of(x)]));
    }

    auto d = metric_fixed_point(g, ce.policy, {MetricSpec::Kind::Pbsm, 1.0, c_T});
    auto d_free = metric_fixed_point(g, ce.exo_free_policy, {MetricSpec::Kind::Pbsm, 1.0, c_T});

    Certificate& c = ce.certificate;
    c.claim = "pbsm_counterexample";
    c.instance = "three-state absorbing chain, two iid noise values";
    c.measured = detail::max_over_anchor_pairs(d.values, g.state_of);
    c.threshold = 0.01;
    c.relation = ">";
    c.details["optimality_gap"] = opt_gap;
    c.details["policy_exo_free"] = ce.policy.exo_free;
    c.details["exo_free_tie_break_distance"] = detail::max_over_anchor_pairs(d_free.values, g.state_of);
    c.details["pair_distance"] = d.values(m.obs_index(0, 0), m.obs_index(0, 1));
    c.decide();
    c.passed = c.passed && opt_gap <= 1e-9 && !ce.policy.exo_free;
    return ce;
}

/// Quotient classes of observations at (near) zero distance under `d`.
inline std::vector<int> zero_distance_classes(const Mat& d, double zero_tol) {
    const int n = static_cast<int>(d.rows());
    std::vector<int> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (d(i, j) <= zero_tol) parent[find(j)] = find(i);
    std::map<int, int> label;
    std::vector<int> cls(n);
    for (int i = 0; i < n; ++i) {
        int r = find(i);
        auto it = label.find(r);
        if (it == label.end()) it = label.emplace(r, static_cast<int>(label.size())).first;
        cls[i] = it->second;
    }
    return cls;
}

/// Pushes the PBSM through the quotient map that merges zero-distance
/// observations and compares, for every observation pair, the W1 and the
/// independent-coupling transition distances before and after the map.
inline Certificate verify_isometry_preservation(const GroundedModel& g, const Policy& pi, double tol = 1e-9,
                                                double c_T = 0.9, double zero_tol = 1e-9,
                                                const std::string& instance = "grounded") {
    auto dm = metric_fixed_point(g, pi, {MetricSpec::Kind::Pbsm, 1.0, c_T}, 1e-12);
    const Mat& d = dm.values;
    const int n = g.n_obs();
    std::vector<int> cls = zero_distance_classes(d, zero_tol);
    const int k = cls.empty() ? 0 : *std::max_element(cls.begin(), cls.end()) + 1;

    // Induced distance on classes; must agree with every member pair.
    Mat dq = Mat::Constant(k, k, -1.0);
    double inconsistency = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double& slot = dq(cls[i], cls[j]);
            if (slot < 0.0) slot = cls[i] == cls[j] ? 0.0 : d(i, j);
            inconsistency = std::max(inconsistency, std::abs(slot - d(i, j)));
        }
    if (inconsistency > std::max(tol, 2.0 * zero_tol))
        throw Error("verify_isometry_preservation: induced class distance is ill-defined (spread " +
                    std::to_string(inconsistency) + ")");

    Mat chain = policy_chain(g.transition, pi);
    Mat push = Mat::Zero(n, k);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) push(i, cls[j]) += chain(i, j);

    double w1_gap = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double lhs = wasserstein1(d, chain.row(i).transpose(), chain.row(j).transpose()).value;
            double rhs = wasserstein1(dq, push.row(i).transpose(), push.row(j).transpose()).value;
            w1_gap = std::max(w1_gap, std::abs(lhs - rhs));
        }
    Mat e_lhs = chain * d * chain.transpose();
    Mat e_rhs = push * dq * push.transpose();
    double sample_gap = (e_lhs - e_rhs).cwiseAbs().maxCoeff();

    Certificate c;
    c.claim = "isometry_preservation";
    c.instance = instance;
    c.measured = std::max(w1_gap, sample_gap);
    c.threshold = tol;
    c.details["classes"] = k;
    c.details["observations"] = n;
    c.details["nontrivial_quotient"] = k < n;
    c.details["w1_gap"] = w1_gap;
    c.details["sample_gap"] = sample_gap;
    c.details["class_inconsistency"] = inconsistency;
    c.decide();
    return c;
}

inline Certificate verify_isometry_preservation(const ExBmdp& m, const Policy& pi, double tol = 1e-9,
                                                double c_T = 0.9, const std::string& instance = "exbmdp") {
    return verify_isometry_preservation(make_grounded_model(m), pi, tol, c_T, 1e-9, instance);
}

/// Deterministic chains, or stochastic chains with equal rewards, must give a
/// zero MICo diagonal (<= 1e-8); stochastic chains with distinct rewards must
/// give some diagonal entry > 1e-3.
inline Certificate verify_mico_self_distance(const GroundedModel& g, const Policy& pi, double c_R = 1.0,
                                             double c_T = 0.9, const std::string& instance = "grounded") {
    Mat chain = policy_chain(g.transition, pi);
    Vec r = policy_reward(g.reward, pi);
    bool deterministic = true;
    for (int i = 0; i < chain.rows(); ++i)
        if (chain.row(i).maxCoeff() < 1.0 - 1e-12) deterministic = false;
    const bool equal_rewards = (r.array() - r[0]).abs().maxCoeff() <= 1e-12;
    auto dm = metric_fixed_point(g, pi, {MetricSpec::Kind::Mico, c_R, c_T});
    Certificate c;
    c.claim = "mico_self_distance";
    c.instance = instance;
    c.measured = dm.values.diagonal().maxCoeff();
    if (deterministic || equal_rewards) {
        c.threshold = 1e-8;
        c.relation = "<=";
    } else {
        c.threshold = 1e-3;
        c.relation = ">";
    }
    c.details["deterministic_chain"] = deterministic;
    c.details["equal_rewards"] = equal_rewards;
    c.decide();
    return c;
}

inline Certificate verify_mico_self_distance(const ExBmdp& m, const Policy& pi, double c_R = 1.0,
                                             double c_T = 0.9, const std::string& instance = "exbmdp") {
    return verify_mico_self_distance(make_grounded_model(m), pi, c_R, c_T, instance);
}

inline nlohmann::json to_json(const Certificate& c) {
    return {{"claim", c.claim},         {"instance", c.instance}, {"measured", c.measured},
            {"threshold", c.threshold}, {"relation", c.relation}, {"passed", c.passed},
            {"details", c.details}};
}

}  // namespace bisim
