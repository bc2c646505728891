#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace bisim {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

/// Base class of every error thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class UnsupportedModeError : public Error {
public:
    using Error::Error;
};

class InfeasibleError : public Error {
public:
    using Error::Error;
};

class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Iterative procedure ran out of iterations. Carries the last residual and
/// the per-iteration trace so callers can inspect the failure.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double residual, std::vector<double> trace = {})
        : Error(what + " (residual " + std::to_string(residual) + ")"),
          residual_(residual),
          trace_(std::move(trace)) {}

    double residual() const { return residual_; }
    const std::vector<double>& trace() const { return trace_; }

private:
    double residual_;
    std::vector<double> trace_;
};

/// Tolerance for "this row is a probability distribution".
inline constexpr double kDistTol = 1e-12;

inline bool is_distribution(const Eigen::Ref<const Vec>& p, double tol = kDistTol) {
    if (p.size() == 0) return false;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (!std::isfinite(p[i]) || p[i] < 0.0) return false;
    }
    return std::abs(p.sum() - 1.0) <= tol;
}

/// Draws an index from a discrete distribution. The final bucket absorbs
/// rounding so the result is always a valid index.
inline int sample_index(const Eigen::Ref<const Vec>& p, Rng& rng) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    double u = unif(rng) * p.sum();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) return static_cast<int>(i);
    }
    for (Eigen::Index i = p.size() - 1; i >= 0; --i) {
        if (p[i] > 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(p.size() - 1);
}

/// splitmix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    return Rng(mix_seed(seed, stream));
}

}  // namespace bisim
