#pragma once

// Independent reference computations used only by the tests. Nothing here may
// call into the library code path it is used to check.

#include <Eigen/Dense>

#include <algorithm>
#include <limits>
#include <utility>
#include <vector>

namespace oracle {

/// Min-cost flow on the bipartite transport graph by successive shortest
/// paths with Bellman-Ford on the residual graph. Returns the optimal cost.
inline double transport_min_cost_flow(const Eigen::MatrixXd& cost, const Eigen::VectorXd& p,
                                      const Eigen::VectorXd& q) {
    const int m = static_cast<int>(p.size()), n = static_cast<int>(q.size());
    const int src = m + n, dst = m + n + 1, nodes = m + n + 2;
    struct Edge {
        int to;
        double cap;
        double cost;
        int rev;
    };
    std::vector<std::vector<Edge>> g(nodes);
    auto add = [&](int u, int v, double cap, double c) {
        g[u].push_back({v, cap, c, static_cast<int>(g[v].size())});
        g[v].push_back({u, 0.0, -c, static_cast<int>(g[u].size()) - 1});
    };
    const double inf_cap = 1e30;
    for (int i = 0; i < m; ++i) add(src, i, p[i], 0.0);
    for (int j = 0; j < n; ++j) add(m + j, dst, q[j], 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) add(i, m + j, inf_cap, cost(i, j));

    const double cap_eps = 1e-15;
    double total = 0.0;
    double need = std::min(p.sum(), q.sum());
    while (need > 1e-14) {
        std::vector<double> dist(nodes, std::numeric_limits<double>::infinity());
        std::vector<std::pair<int, int>> prev(nodes, {-1, -1});
        dist[src] = 0.0;
        for (int round = 0; round < nodes; ++round) {
            bool changed = false;
            for (int u = 0; u < nodes; ++u) {
                if (dist[u] == std::numeric_limits<double>::infinity()) continue;
                for (int k = 0; k < static_cast<int>(g[u].size()); ++k) {
                    const Edge& e = g[u][k];
                    if (e.cap > cap_eps && dist[u] + e.cost < dist[e.to] - 1e-15) {
                        dist[e.to] = dist[u] + e.cost;
                        prev[e.to] = {u, k};
                        changed = true;
                    }
                }
            }
            if (!changed) break;
        }
        if (dist[dst] == std::numeric_limits<double>::infinity()) break;
        double push = need;
        for (int v = dst; v != src; v = prev[v].first) {
            const Edge& e = g[prev[v].first][prev[v].second];
            push = std::min(push, e.cap);
        }
        for (int v = dst; v != src; v = prev[v].first) {
            Edge& e = g[prev[v].first][prev[v].second];
            e.cap -= push;
            g[e.to][e.rev].cap += push;
            total += push * e.cost;
        }
        need -= push;
    }
    return total;
}

/// W1 between two distributions on the real line, integral of |F - G|.
inline double w1_line(const std::vector<double>& xs, const Eigen::VectorXd& p,
                      const std::vector<double>& ys, const Eigen::VectorXd& q) {
    std::vector<std::pair<double, double>> events;  // (position, signed mass)
    for (std::size_t i = 0; i < xs.size(); ++i) events.emplace_back(xs[i], p[i]);
    for (std::size_t j = 0; j < ys.size(); ++j) events.emplace_back(ys[j], -q[j]);
    std::sort(events.begin(), events.end());
    double diff = 0.0, total = 0.0;
    for (std::size_t k = 0; k + 1 < events.size(); ++k) {
        diff += events[k].second;
        total += std::abs(diff) * (events[k + 1].first - events[k].first);
    }
    return total;
}

/// Central finite-difference gradient of f at theta.
template <class F>
Eigen::VectorXd central_difference(F&& f, Eigen::VectorXd theta, double h = 1e-5) {
    Eigen::VectorXd g(theta.size());
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        const double keep = theta[i];
        theta[i] = keep + h;
        const double up = f(theta);
        theta[i] = keep - h;
        const double down = f(theta);
        theta[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
inline double max_relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric,
                                 double floor = 1e-4) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
        double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

}  // namespace oracle
