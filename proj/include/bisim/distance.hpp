#pragma once

// Primitive distances shared by the exact metrics and the learned losses,
// plus the exact discrete 1-Wasserstein solver.

#include "bisim/common.hpp"

#include <algorithm>
#include <limits>
#include <numbers>
#include <queue>
#include <utility>

namespace bisim {

struct MetricSpec {
    enum class Kind { Bsm, Pbsm, Mico };
    Kind kind = Kind::Bsm;
    double c_R = 1.0;
    double c_T = 0.9;

    /// SimSR's recursion with the true transition is the MICo operator.
    static MetricSpec simsr(double c_R, double c_T) { return {Kind::Mico, c_R, c_T}; }

    void check() const {
        if (!(c_R >= 0.0)) throw PreconditionError("MetricSpec: c_R must be >= 0");
        if (!(c_T >= 0.0 && c_T < 1.0)) throw PreconditionError("MetricSpec: c_T must lie in [0, 1)");
    }
};

inline std::string to_string(MetricSpec::Kind k) {
    switch (k) {
        case MetricSpec::Kind::Bsm: return "bsm";
        case MetricSpec::Kind::Pbsm: return "pbsm";
        case MetricSpec::Kind::Mico: return "mico";
    }
    return "?";
}

inline MetricSpec::Kind parse_metric_kind(const std::string& s) {
    if (s == "bsm") return MetricSpec::Kind::Bsm;
    if (s == "pbsm") return MetricSpec::Kind::Pbsm;
    if (s == "mico" || s == "simsr") return MetricSpec::Kind::Mico;
    throw Error("unknown metric kind: " + s);
}

struct Coupling {
    Mat plan;
    double cost = 0.0;
};

struct W1Result {
    double value = 0.0;
    Coupling coupling;
};

namespace detail {

/// Transportation simplex on a balanced problem with strictly positive
/// supplies and demands. Basis cells form a spanning tree over the m + n
/// row/column nodes; pivots use Bland's rule so degenerate steps cannot cycle.
class TransportSimplex {
public:
    TransportSimplex(const Mat& cost, const Vec& supply, const Vec& demand)
        : c_(cost), m_(static_cast<int>(supply.size())), n_(static_cast<int>(demand.size())),
          x_(Mat::Zero(m_, n_)), basic_(m_, n_) {
        basic_.setConstant(false);
        northwest_corner(supply, demand);
        double cmax = c_.size() ? c_.cwiseAbs().maxCoeff() : 0.0;
        eps_ = 1e-12 * std::max(1.0, cmax);
    }

    const Mat& solve(int max_pivots = 100000) {
        Vec u(m_), v(n_);
        for (int pivot = 0; pivot < max_pivots; ++pivot) {
            potentials(u, v);
            int ei = -1, ej = -1;
            for (int i = 0; i < m_ && ei < 0; ++i)
                for (int j = 0; j < n_; ++j)
                    if (!basic_(i, j) && c_(i, j) - u[i] - v[j] < -eps_) {
                        ei = i;
                        ej = j;
                        break;
                    }
            if (ei < 0) return x_;
            pivot_on(ei, ej);
        }
        throw ConvergenceError("transportation simplex exceeded its pivot budget", 0.0);
    }

private:
    void northwest_corner(const Vec& supply, const Vec& demand) {
        Vec a = supply, b = demand;
        int i = 0, j = 0;
        for (;;) {
            double t = std::min(a[i], b[j]);
            x_(i, j) = t;
            basic_(i, j) = true;
            a[i] -= t;
            b[j] -= t;
            if (i == m_ - 1 && j == n_ - 1) break;
            if (i == m_ - 1) {
                ++j;
            } else if (j == n_ - 1) {
                ++i;
            } else if (a[i] <= b[j]) {
                ++i;
            } else {
                ++j;
            }
        }
    }

    // Solves u_i + v_j = c_ij on the basis tree with u_0 = 0.
    void potentials(Vec& u, Vec& v) const {
        std::vector<char> seen(m_ + n_, 0);
        std::vector<int> stack{0};
        u[0] = 0.0;
        seen[0] = 1;
        while (!stack.empty()) {
            int node = stack.back();
            stack.pop_back();
            if (node < m_) {
                for (int j = 0; j < n_; ++j)
                    if (basic_(node, j) && !seen[m_ + j]) {
                        v[j] = c_(node, j) - u[node];
                        seen[m_ + j] = 1;
                        stack.push_back(m_ + j);
                    }
            } else {
                int j = node - m_;
                for (int i = 0; i < m_; ++i)
                    if (basic_(i, j) && !seen[i]) {
                        u[i] = c_(i, j) - v[j];
                        seen[i] = 1;
                        stack.push_back(i);
                    }
            }
        }
    }

    // Tree path from column node `col` to row node `row`, as a list of cells.
    std::vector<std::pair<int, int>> tree_path(int col, int row) const {
        const int start = m_ + col, goal = row;
        std::vector<int> parent(m_ + n_, -2);
        std::queue<int> q;
        q.push(start);
        parent[start] = -1;
        while (!q.empty() && parent[goal] == -2) {
            int node = q.front();
            q.pop();
            if (node < m_) {
                for (int j = 0; j < n_; ++j)
                    if (basic_(node, j) && parent[m_ + j] == -2) {
                        parent[m_ + j] = node;
                        q.push(m_ + j);
                    }
            } else {
                int j = node - m_;
                for (int i = 0; i < m_; ++i)
                    if (basic_(i, j) && parent[i] == -2) {
                        parent[i] = node;
                        q.push(i);
                    }
            }
        }
        std::vector<std::pair<int, int>> cells;
        for (int node = goal; parent[node] != -1; node = parent[node]) {
            int prev = parent[node];
            if (node < m_) {
                cells.emplace_back(node, prev - m_);
            } else {
                cells.emplace_back(prev, node - m_);
            }
        }
        std::reverse(cells.begin(), cells.end());
        return cells;
    }

    void pivot_on(int ei, int ej) {
        // Cycle: entering (+), then the path from column ej back to row ei
        // alternates -, +, -, ...
        auto path = tree_path(ej, ei);
        double theta = std::numeric_limits<double>::infinity();
        int leave = -1;
        for (std::size_t k = 0; k < path.size(); k += 2) {
            auto [i, j] = path[k];
            int idx = i * n_ + j;
            if (x_(i, j) < theta || (x_(i, j) == theta && idx < leave)) {
                theta = x_(i, j);
                leave = idx;
            }
        }
        for (std::size_t k = 0; k < path.size(); ++k) {
            auto [i, j] = path[k];
            x_(i, j) += (k % 2 == 0) ? -theta : theta;
        }
        x_(ei, ej) = theta;
        basic_(ei, ej) = true;
        int li = leave / n_, lj = leave % n_;
        x_(li, lj) = 0.0;
        basic_(li, lj) = false;
    }

    const Mat& c_;
    int m_, n_;
    Mat x_;
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> basic_;
    double eps_ = 0.0;
};

}  // namespace detail

/// Exact 1-Wasserstein distance between discrete distributions p (rows of
/// `cost`) and q (columns) under ground cost `cost`, with an optimal coupling.
inline W1Result wasserstein1(const Mat& cost, const Vec& p, const Vec& q) {
    if (cost.rows() != p.size() || cost.cols() != q.size())
        throw ShapeError("wasserstein1: cost shape does not match the marginals");
    if (!cost.allFinite() || (cost.size() && cost.minCoeff() < 0.0))
        throw PreconditionError("wasserstein1: cost must be finite and nonnegative");
    if ((p.size() && p.minCoeff() < -1e-12) || (q.size() && q.minCoeff() < -1e-12))
        throw InfeasibleError("wasserstein1: negative mass");
    const double sp = p.sum(), sq = q.sum();
    if (std::abs(sp - sq) > 1e-9) throw InfeasibleError("wasserstein1: marginal masses differ");

    std::vector<int> rows, cols;
    for (Eigen::Index i = 0; i < p.size(); ++i)
        if (p[i] > 0.0) rows.push_back(static_cast<int>(i));
    for (Eigen::Index j = 0; j < q.size(); ++j)
        if (q[j] > 0.0) cols.push_back(static_cast<int>(j));

    W1Result out;
    out.coupling.plan = Mat::Zero(p.size(), q.size());
    if (rows.empty() || cols.empty()) return out;

    const int m = static_cast<int>(rows.size()), n = static_cast<int>(cols.size());
    Vec a(m), b(n);
    Mat c(m, n);
    for (int i = 0; i < m; ++i) a[i] = p[rows[i]];
    for (int j = 0; j < n; ++j) b[j] = q[cols[j]];
    b *= a.sum() / b.sum();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) c(i, j) = cost(rows[i], cols[j]);

    Mat plan;
    if (m == 1) {
        plan = b.transpose();
    } else if (n == 1) {
        plan = a;
    } else {
        detail::TransportSimplex solver(c, a, b);
        plan = solver.solve();
    }
    double value = 0.0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            out.coupling.plan(rows[i], cols[j]) = plan(i, j);
            value += plan(i, j) * c(i, j);
        }
    out.value = value;
    out.coupling.cost = value;
    return out;
}

// ---------------------------------------------------------------------------
// Closed-form kernels

namespace detail {
inline void require_same_dim(Eigen::Index a, Eigen::Index b, const char* who) {
    if (a != b) throw ShapeError(std::string(who) + ": dimension mismatch");
}
}  // namespace detail

/// sqrt(||mu1 - mu2||^2 + ||sigma1 - sigma2||^2); W2 between diagonal Gaussians.
inline double w2_gaussian_factorized(const Vec& mu1, const Vec& sigma1, const Vec& mu2,
                                     const Vec& sigma2) {
    detail::require_same_dim(mu1.size(), mu2.size(), "w2_gaussian_factorized");
    detail::require_same_dim(sigma1.size(), sigma2.size(), "w2_gaussian_factorized");
    detail::require_same_dim(mu1.size(), sigma1.size(), "w2_gaussian_factorized");
    if ((sigma1.size() && sigma1.minCoeff() < 0.0) || (sigma2.size() && sigma2.minCoeff() < 0.0))
        throw PreconditionError("w2_gaussian_factorized: negative sigma");
    return std::sqrt((mu1 - mu2).squaredNorm() + (sigma1 - sigma2).squaredNorm());
}

/// Elementwise smooth-L1 term: 0.5 d^2 if |d| < 1, else |d| - 0.5.
inline double huber_scalar(double d) {
    double ad = std::abs(d);
    return ad < 1.0 ? 0.5 * d * d : ad - 0.5;
}

/// Derivative of huber_scalar.
inline double huber_scalar_grad(double d) {
    if (std::abs(d) < 1.0) return d;
    return d > 0.0 ? 1.0 : -1.0;
}

inline double huber_distance(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& y) {
    detail::require_same_dim(x.size(), y.size(), "huber_distance");
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) s += huber_scalar(x[i] - y[i]);
    return s;
}

/// (1/k) huber_distance
inline double scaled_huber(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& y) {
    detail::require_same_dim(x.size(), y.size(), "scaled_huber");
    if (x.size() == 0) return 0.0;
    return huber_distance(x, y) / static_cast<double>(x.size());
}

/// Gradient of scaled_huber with respect to x; the y-gradient is its negation.
inline Vec scaled_huber_grad(const Eigen::Ref<const Vec>& x, const Eigen::Ref<const Vec>& y) {
    Vec g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) g[i] = huber_scalar_grad(x[i] - y[i]);
    return g / static_cast<double>(x.size());
}

struct RewardDistance {
    enum class Kind { Abs, Huber, Rap };
    Kind kind = Kind::Abs;
    double var1 = 0.0;  ///< Var[r_x1], rap only
    double var2 = 0.0;  ///< Var[r_x2], rap only

    static RewardDistance abs() { return {Kind::Abs, 0.0, 0.0}; }
    static RewardDistance huber() { return {Kind::Huber, 0.0, 0.0}; }
    static RewardDistance rap(double v1, double v2) { return {Kind::Rap, v1, v2}; }
};

/// Reward approximants: |r1 - r2|, huber(r1 - r2), or the variance-corrected
/// sqrt(max(0, (r1 - r2)^2 - var1 - var2)).
inline double reward_distance(double r1, double r2, RewardDistance v = RewardDistance::abs()) {
    const double d = r1 - r2;
    switch (v.kind) {
        case RewardDistance::Kind::Abs: return std::abs(d);
        case RewardDistance::Kind::Huber: return huber_scalar(d);
        case RewardDistance::Kind::Rap:
            if (v.var1 < 0.0 || v.var2 < 0.0)
                throw PreconditionError("reward_distance: variances must be >= 0");
            return std::sqrt(std::max(0.0, d * d - v.var1 - v.var2));
    }
    return 0.0;
}

/// (1/k) sum_i sqrt((mu1_i - mu2_i)^2 + (sigma1_i - sigma2_i)^2)
inline double dbc_transition_dist(const Vec& mu1, const Vec& sigma1, const Vec& mu2,
                                  const Vec& sigma2) {
    detail::require_same_dim(mu1.size(), mu2.size(), "dbc_transition_dist");
    detail::require_same_dim(sigma1.size(), sigma2.size(), "dbc_transition_dist");
    detail::require_same_dim(mu1.size(), sigma1.size(), "dbc_transition_dist");
    if (mu1.size() == 0) return 0.0;
    double s = 0.0;
    for (Eigen::Index i = 0; i < mu1.size(); ++i)
        s += std::hypot(mu1[i] - mu2[i], sigma1[i] - sigma2[i]);
    return s / static_cast<double>(mu1.size());
}

/// (1/k) (huber(mu1, mu2) + huber(sigma1, sigma2))
inline double dbcn_transition_dist(const Vec& mu1, const Vec& sigma1, const Vec& mu2,
                                   const Vec& sigma2) {
    detail::require_same_dim(mu1.size(), mu2.size(), "dbcn_transition_dist");
    detail::require_same_dim(sigma1.size(), sigma2.size(), "dbcn_transition_dist");
    detail::require_same_dim(mu1.size(), sigma1.size(), "dbcn_transition_dist");
    if (mu1.size() == 0) return 0.0;
    return (huber_distance(mu1, mu2) + huber_distance(sigma1, sigma2)) /
           static_cast<double>(mu1.size());
}

/// Norms below this are treated as zero by the angular kernels.
inline constexpr double kNormFloor = 1e-12;

/// Angle between u and v in [0, pi]; 0 when either vector is ~0. Uses
/// 2 atan2(|a - b|, |a + b|) on the unit vectors, which is exact at 0 and pi
/// where arccos of the cosine is not.
inline double angle_between(const Eigen::Ref<const Vec>& u, const Eigen::Ref<const Vec>& v) {
    detail::require_same_dim(u.size(), v.size(), "angle_between");
    double nu = u.norm(), nv = v.norm();
    if (nu < kNormFloor || nv < kNormFloor) return 0.0;
    Vec a = u / nu, b = v / nv;
    return 2.0 * std::atan2((a - b).norm(), (a + b).norm());
}

/// MICo representation distance U = (||u||^2 + ||v||^2) / 2 + beta * angle(u, v).
inline double mico_U(const Eigen::Ref<const Vec>& u, const Eigen::Ref<const Vec>& v, double beta) {
    detail::require_same_dim(u.size(), v.size(), "mico_U");
    return 0.5 * (u.squaredNorm() + v.squaredNorm()) + beta * angle_between(u, v);
}

/// 1 - cos(u, v); a zero vector is at distance 1 from everything.
inline double cosine_distance(const Eigen::Ref<const Vec>& u, const Eigen::Ref<const Vec>& v) {
    detail::require_same_dim(u.size(), v.size(), "cosine_distance");
    double nu = u.norm(), nv = v.norm();
    if (nu < kNormFloor || nv < kNormFloor) return 1.0;
    return 1.0 - std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

/// Gradients of cos(u, v) with respect to u and v (both nonzero).
inline std::pair<Vec, Vec> cosine_grad(const Eigen::Ref<const Vec>& u, const Eigen::Ref<const Vec>& v) {
    double nu = u.norm(), nv = v.norm();
    if (nu < kNormFloor || nv < kNormFloor) return {Vec::Zero(u.size()), Vec::Zero(v.size())};
    double c = u.dot(v) / (nu * nv);
    Vec gu = v / (nu * nv) - c * u / (nu * nu);
    Vec gv = u / (nu * nv) - c * v / (nv * nv);
    return {gu, gv};
}

/// Gradients of mico_U with respect to u and v. The angular part uses
/// d acos(c)/dc = -1/sqrt(1 - c^2) and is dropped where the clamp is active.
inline std::pair<Vec, Vec> mico_U_grad(const Eigen::Ref<const Vec>& u, const Eigen::Ref<const Vec>& v,
                                       double beta) {
    Vec gu = u, gv = v;
    double nu = u.norm(), nv = v.norm();
    if (beta != 0.0 && nu >= kNormFloor && nv >= kNormFloor) {
        double c = u.dot(v) / (nu * nv);
        double s2 = 1.0 - c * c;
        if (s2 > 1e-12) {
            auto [cu, cv] = cosine_grad(u, v);
            double k = -beta / std::sqrt(s2);
            gu += k * cu;
            gv += k * cv;
        }
    }
    return {gu, gv};
}

}  // namespace bisim
