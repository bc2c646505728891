#pragma once

// Small encoders trained to embed behavioral metrics. Metric losses: DBC,
// DBC-normed, MICo, SimSR, RAP. Auxiliary losses: latent self-prediction (ZP)
// and reward prediction (RP). Every gradient is derived by hand and checked
// against finite differences in the tests.

#include "bisim/distance.hpp"
#include "bisim/mdp.hpp"
#include "bisim/noise.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace bisim {

// ---------------------------------------------------------------------------
// Named parameter tensors

/// Ordered map of named matrices. Iteration order (by name) fixes the flat
/// layout used by checkpoints and gradient checks.
struct Params {
    std::map<std::string, Mat> tensors;

    Mat& operator[](const std::string& name) { return tensors[name]; }
    const Mat& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw Error("missing parameter " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return tensors.count(name) > 0; }

    Params zeros_like() const {
        Params out;
        for (const auto& [k, v] : tensors) out.tensors[k] = Mat::Zero(v.rows(), v.cols());
        return out;
    }

    Eigen::Index size() const {
        Eigen::Index n = 0;
        for (const auto& [k, v] : tensors) n += v.size();
        return n;
    }

    Vec flatten() const {
        Vec out(size());
        Eigen::Index off = 0;
        for (const auto& [k, v] : tensors) {
            out.segment(off, v.size()) = v.reshaped();
            off += v.size();
        }
        return out;
    }

    void unflatten(const Vec& flat) {
        if (flat.size() != size()) throw ShapeError("Params::unflatten: size mismatch");
        Eigen::Index off = 0;
        for (auto& [k, v] : tensors) {
            v.reshaped() = flat.segment(off, v.size());
            off += v.size();
        }
    }

    /// Tensors whose name starts with `prefix`.
    Params subset(const std::string& prefix) const {
        Params out;
        for (const auto& [k, v] : tensors)
            if (k.rfind(prefix, 0) == 0) out.tensors[k] = v;
        return out;
    }

    double squared_norm(const std::string& prefix = "") const {
        double s = 0.0;
        for (const auto& [k, v] : tensors)
            if (k.rfind(prefix, 0) == 0) s += v.squaredNorm();
        return s;
    }

    /// this += alpha * other, over the tensors of `other`.
    void axpy(double alpha, const Params& other) {
        for (const auto& [k, v] : other.tensors) at_mut(k) += alpha * v;
    }

    bool operator==(const Params& o) const { return tensors == o.tensors; }

private:
    Mat& at_mut(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw Error("missing parameter " + name);
        return it->second;
    }
};

namespace detail {

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline Mat gaussian_init(int rows, int cols, double scale, Rng& rng) {
    std::normal_distribution<double> nd(0.0, scale);
    Mat m(rows, cols);
    for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) m(i, j) = nd(rng);
    return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder

enum class Normalization { None, MaxNorm, L2, LayerNorm };

inline std::string to_string(Normalization n) {
    switch (n) {
        case Normalization::None: return "none";
        case Normalization::MaxNorm: return "maxnorm";
        case Normalization::L2: return "l2";
        case Normalization::LayerNorm: return "layernorm";
    }
    return "?";
}

inline Normalization parse_normalization(const std::string& s) {
    if (s == "none") return Normalization::None;
    if (s == "maxnorm") return Normalization::MaxNorm;
    if (s == "l2") return Normalization::L2;
    if (s == "layernorm") return Normalization::LayerNorm;
    throw Error("unknown normalization: " + s);
}

struct EncoderConfig {
    int input_dim = 0;
    /// Width of the tanh hidden layer; 0 gives a single affine map.
    int hidden = 32;
    int latent = 8;
    Normalization norm = Normalization::None;
    double maxnorm_C = 1.0;
    double maxnorm_p = 2.0;
    double ln_eps = 1e-5;
    /// Initial LayerNorm gain; the bias starts at 0.
    double ln_alpha0 = 1.0;
};

/// MaxNorm bound C = c_R / (1 - c_T) * (R_max - R_min).
inline double maxnorm_bound(double c_R, double c_T, double r_min, double r_max) {
    return c_R / (1.0 - c_T) * (r_max - r_min);
}

inline Params init_encoder(const EncoderConfig& c, Rng& rng) {
    if (c.input_dim < 1 || c.latent < 1 || c.hidden < 0) throw PreconditionError("bad encoder shape");
    Params p;
    if (c.hidden > 0) {
        p["enc.W0"] = detail::gaussian_init(c.hidden, c.input_dim, 1.0 / std::sqrt(c.input_dim), rng);
        p["enc.b0"] = Mat::Zero(c.hidden, 1);
        p["enc.W1"] = detail::gaussian_init(c.latent, c.hidden, 1.0 / std::sqrt(c.hidden), rng);
        p["enc.b1"] = Mat::Zero(c.latent, 1);
    } else {
        p["enc.W0"] = detail::gaussian_init(c.latent, c.input_dim, 1.0 / std::sqrt(c.input_dim), rng);
        p["enc.b0"] = Mat::Zero(c.latent, 1);
    }
    if (c.norm == Normalization::LayerNorm) {
        p["enc.ln_alpha"] = Mat::Constant(c.latent, 1, c.ln_alpha0);
        p["enc.ln_beta"] = Mat::Zero(c.latent, 1);
    }
    return p;
}

struct EncoderForward {
    Mat input;   ///< d x B
    Mat hidden;  ///< tanh activations, h x B (empty without a hidden layer)
    Mat pre;     ///< pre-normalization latent, k x B
    Mat out;     ///< k x B
};

namespace detail {

inline double pnorm(const Eigen::Ref<const Vec>& z, double p) {
    if (p == 2.0) return z.norm();
    if (p == 1.0) return z.lpNorm<1>();
    return std::pow(z.array().abs().pow(p).sum(), 1.0 / p);
}

inline Mat normalize_forward(const EncoderConfig& c, const Params& p, const Mat& z) {
    Mat out = z;
    switch (c.norm) {
        case Normalization::None: break;
        case Normalization::MaxNorm: {
            const double half = 0.5 * c.maxnorm_C;
            for (Eigen::Index j = 0; j < z.cols(); ++j) {
                double r = pnorm(z.col(j), c.maxnorm_p);
                if (r >= half && r > 0.0) out.col(j) *= half / r;
            }
            break;
        }
        case Normalization::L2:
            for (Eigen::Index j = 0; j < z.cols(); ++j) out.col(j) /= std::max(z.col(j).norm(), kNormFloor);
            break;
        case Normalization::LayerNorm: {
            const Mat& alpha = p.at("enc.ln_alpha");
            const Mat& beta = p.at("enc.ln_beta");
            const double k = static_cast<double>(z.rows());
            for (Eigen::Index j = 0; j < z.cols(); ++j) {
                double mu = z.col(j).mean();
                Vec cz = z.col(j).array() - mu;
                double var = cz.squaredNorm() / k;
                out.col(j) = alpha.col(0).cwiseProduct(cz / std::sqrt(var + c.ln_eps)) + beta.col(0);
            }
            break;
        }
    }
    return out;
}

/// Gradient with respect to the pre-normalization latent; LayerNorm gain and
/// bias gradients are accumulated into `grads`.
inline Mat normalize_backward(const EncoderConfig& c, const Params& p, const Mat& z, const Mat& dout,
                              Params& grads) {
    Mat dz = dout;
    switch (c.norm) {
        case Normalization::None: break;
        case Normalization::MaxNorm: {
            const double half = 0.5 * c.maxnorm_C, pp = c.maxnorm_p;
            for (Eigen::Index j = 0; j < z.cols(); ++j) {
                Vec zj = z.col(j);
                double r = pnorm(zj, pp);
                if (!(r >= half && r > 0.0)) continue;
                // psi = half * z / r(z)
                Vec dr(zj.size());
                for (Eigen::Index i = 0; i < zj.size(); ++i) {
                    double a = std::abs(zj[i]);
                    double sgn = zj[i] > 0.0 ? 1.0 : (zj[i] < 0.0 ? -1.0 : 0.0);
                    dr[i] = sgn * std::pow(a, pp - 1.0) / std::pow(r, pp - 1.0);
                }
                Vec g = dout.col(j);
                dz.col(j) = (half / r) * g - (half / (r * r)) * zj.dot(g) * dr;
            }
            break;
        }
        case Normalization::L2:
            for (Eigen::Index j = 0; j < z.cols(); ++j) {
                double n = z.col(j).norm();
                if (n < kNormFloor) {
                    dz.col(j) = dout.col(j) / kNormFloor;
                    continue;
                }
                Vec u = z.col(j) / n;
                Vec g = dout.col(j);
                dz.col(j) = (g - u * u.dot(g)) / n;
            }
            break;
        case Normalization::LayerNorm: {
            const Mat& alpha = p.at("enc.ln_alpha");
            Mat& ga = grads["enc.ln_alpha"];
            Mat& gb = grads["enc.ln_beta"];
            const double k = static_cast<double>(z.rows());
            for (Eigen::Index j = 0; j < z.cols(); ++j) {
                double mu = z.col(j).mean();
                Vec cz = z.col(j).array() - mu;
                double var = cz.squaredNorm() / k;
                double s = std::sqrt(var + c.ln_eps);
                Vec zh = cz / s;
                Vec g = dout.col(j);
                ga.col(0) += g.cwiseProduct(zh);
                gb.col(0) += g;
                Vec dzh = g.cwiseProduct(alpha.col(0));
                dz.col(j) = (dzh.array() - dzh.mean() - zh.array() * (dzh.dot(zh) / k)) / s;
            }
            break;
        }
    }
    return dz;
}

}  // namespace detail

/// Encodes the columns of `x` (d x B).
inline EncoderForward encoder_forward(const EncoderConfig& c, const Params& p, const Mat& x) {
    if (x.rows() != c.input_dim) throw ShapeError("encoder input dimension mismatch");
    EncoderForward f;
    f.input = x;
    if (c.hidden > 0) {
        f.hidden = ((p.at("enc.W0") * x).colwise() + p.at("enc.b0").col(0)).array().tanh().matrix();
        f.pre = (p.at("enc.W1") * f.hidden).colwise() + p.at("enc.b1").col(0);
    } else {
        f.pre = (p.at("enc.W0") * x).colwise() + p.at("enc.b0").col(0);
    }
    f.out = detail::normalize_forward(c, p, f.pre);
    return f;
}

inline Mat encode_batch(const EncoderConfig& c, const Params& p, const Mat& x) {
    return encoder_forward(c, p, x).out;
}

inline Vec encode(const EncoderConfig& c, const Params& p, const Vec& x) {
    return encoder_forward(c, p, x).out.col(0);
}

/// Accumulates encoder parameter gradients for upstream gradient `dout` (k x B).
inline void encoder_backward(const EncoderConfig& c, const Params& p, const EncoderForward& f,
                             const Mat& dout, Params& grads) {
    Mat dz = detail::normalize_backward(c, p, f.pre, dout, grads);
    if (c.hidden > 0) {
        grads["enc.W1"] += dz * f.hidden.transpose();
        grads["enc.b1"] += dz.rowwise().sum();
        Mat dh = p.at("enc.W1").transpose() * dz;
        Mat da = dh.array() * (1.0 - f.hidden.array().square());
        grads["enc.W0"] += da * f.input.transpose();
        grads["enc.b0"] += da.rowwise().sum();
    } else {
        grads["enc.W0"] += dz * f.input.transpose();
        grads["enc.b0"] += dz.rowwise().sum();
    }
}

// ---------------------------------------------------------------------------
// Latent models

/// Per-action Gaussian transition model, per-action reward model, and the
/// action-free observation-reward model used by RAP.
struct ModelConfig {
    int latent = 8;
    int n_actions = 1;
    /// sigma = sigma_min + softplus(.) keeps the transition scale positive.
    double sigma_min = 0.01;
    /// Reward variance floor of the RAP model.
    double var_min = 1e-4;
};

inline std::string action_key(const char* what, int a) {
    return std::string(what) + ".a" + std::to_string(a);
}

inline Params init_models(const ModelConfig& c, Rng& rng) {
    Params p;
    const double s = 1.0 / std::sqrt(c.latent);
    for (int a = 0; a < c.n_actions; ++a) {
        p[action_key("trans", a) + ".Wmu"] = detail::gaussian_init(c.latent, c.latent, s, rng);
        p[action_key("trans", a) + ".bmu"] = Mat::Zero(c.latent, 1);
        p[action_key("trans", a) + ".Wsig"] = detail::gaussian_init(c.latent, c.latent, 0.1 * s, rng);
        p[action_key("trans", a) + ".bsig"] = Mat::Zero(c.latent, 1);
        p[action_key("rew", a) + ".w"] = detail::gaussian_init(1, c.latent, s, rng);
        p[action_key("rew", a) + ".b"] = Mat::Zero(1, 1);
    }
    p["rap.wm"] = detail::gaussian_init(1, c.latent, s, rng);
    p["rap.bm"] = Mat::Zero(1, 1);
    p["rap.wv"] = detail::gaussian_init(1, c.latent, 0.1 * s, rng);
    p["rap.bv"] = Mat::Zero(1, 1);
    return p;
}

struct TransitionOut {
    Mat mu;     ///< k x B
    Mat pre;    ///< pre-activation of sigma
    Mat sigma;  ///< k x B, > 0
};

inline TransitionOut transition_forward(const ModelConfig& c, const Params& p, const Mat& psi,
                                        const std::vector<int>& actions) {
    TransitionOut t;
    const Eigen::Index b = psi.cols();
    t.mu.resize(psi.rows(), b);
    t.pre.resize(psi.rows(), b);
    t.sigma.resize(psi.rows(), b);
    for (Eigen::Index i = 0; i < b; ++i) {
        const std::string key = action_key("trans", actions[i]);
        t.mu.col(i) = p.at(key + ".Wmu") * psi.col(i) + p.at(key + ".bmu").col(0);
        t.pre.col(i) = p.at(key + ".Wsig") * psi.col(i) + p.at(key + ".bsig").col(0);
        for (Eigen::Index r = 0; r < psi.rows(); ++r)
            t.sigma(r, i) = c.sigma_min + detail::softplus(t.pre(r, i));
    }
    return t;
}

/// Accumulates model gradients and returns the gradient with respect to psi.
inline Mat transition_backward(const Params& p, const Mat& psi, const std::vector<int>& actions,
                               const TransitionOut& t, const Mat& dmu, const Mat& dsigma, Params& grads) {
    Mat dpsi = Mat::Zero(psi.rows(), psi.cols());
    for (Eigen::Index i = 0; i < psi.cols(); ++i) {
        const std::string key = action_key("trans", actions[i]);
        Vec dpre(psi.rows());
        for (Eigen::Index r = 0; r < psi.rows(); ++r) dpre[r] = dsigma(r, i) * detail::sigmoid(t.pre(r, i));
        grads[key + ".Wmu"] += dmu.col(i) * psi.col(i).transpose();
        grads[key + ".bmu"] += dmu.col(i);
        grads[key + ".Wsig"] += dpre * psi.col(i).transpose();
        grads[key + ".bsig"] += dpre;
        dpsi.col(i) = p.at(key + ".Wmu").transpose() * dmu.col(i) + p.at(key + ".Wsig").transpose() * dpre;
    }
    return dpsi;
}

inline Vec reward_forward(const Params& p, const Mat& psi, const std::vector<int>& actions) {
    Vec r(psi.cols());
    for (Eigen::Index i = 0; i < psi.cols(); ++i) {
        const std::string key = action_key("rew", actions[i]);
        r[i] = (p.at(key + ".w") * psi.col(i))(0, 0) + p.at(key + ".b")(0, 0);
    }
    return r;
}

/// RAP observation-reward model: mean and variance of r_x from the latent.
struct RapRewardOut {
    Vec mean;
    Vec pre;  ///< pre-activation of the variance
    Vec var;
};

inline RapRewardOut rap_reward_forward(const ModelConfig& c, const Params& p, const Mat& psi) {
    RapRewardOut o;
    o.mean = ((p.at("rap.wm") * psi).transpose().array() + p.at("rap.bm")(0, 0)).matrix();
    o.pre = ((p.at("rap.wv") * psi).transpose().array() + p.at("rap.bv")(0, 0)).matrix();
    o.var.resize(psi.cols());
    for (Eigen::Index i = 0; i < psi.cols(); ++i) o.var[i] = c.var_min + detail::softplus(o.pre[i]);
    return o;
}

// ---------------------------------------------------------------------------
// Replay data

struct Transition {
    Vec obs;
    int action = 0;
    double reward = 0.0;
    Vec next_obs;
    int state = 0;
    int noise = 0;
    int next_state = 0;
    int next_noise = 0;
};

/// FIFO replay buffer. Sampling draws indices uniformly with replacement from
/// the generator passed in, so a fixed seed reproduces the batch sequence.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity = 100000) : capacity_(capacity) {
        if (capacity == 0) throw PreconditionError("ReplayBuffer capacity must be positive");
    }

    void push(Transition t) {
        if (data_.size() == capacity_) data_.pop_front();
        data_.push_back(std::move(t));
    }

    std::size_t size() const { return data_.size(); }
    std::size_t capacity() const { return capacity_; }
    const Transition& operator[](std::size_t i) const { return data_[i]; }

    std::vector<int> sample_indices(int batch_size, Rng& rng) const {
        if (batch_size < 1) throw PreconditionError("batch size must be positive");
        if (data_.size() < static_cast<std::size_t>(batch_size))
            throw PreconditionError("replay buffer holds fewer samples than the batch size");
        std::uniform_int_distribution<int> u(0, static_cast<int>(data_.size()) - 1);
        std::vector<int> idx(batch_size);
        for (auto& i : idx) i = u(rng);
        return idx;
    }

private:
    std::size_t capacity_;
    std::deque<Transition> data_;
};

/// Runs `pi` on the latent grid for `steps` transitions from the initial
/// distributions, emitting observations with the EX-BMDP's emission.
inline ReplayBuffer collect_rollouts(const ExBmdp& m, const Policy& pi, int steps, Rng& rng,
                                     std::size_t capacity = 0) {
    if (pi.n_obs() != m.n_obs() || pi.n_actions() != m.n_actions())
        throw ShapeError("collect_rollouts: policy shape does not match the EX-BMDP");
    ReplayBuffer buf(capacity ? capacity : std::max<std::size_t>(1, static_cast<std::size_t>(steps)));
    Vec init = m.task.initial.size() ? m.task.initial : Vec::Constant(m.n_states(), 1.0 / m.n_states());
    int s = sample_index(init, rng);
    int xi = sample_index(m.noise.initial, rng);
    Vec x = emit_observation(m, s, xi, rng);
    for (int t = 0; t < steps; ++t) {
        int a = sample_index(pi.table.row(m.obs_index(s, xi)).transpose(), rng);
        int s2 = sample_index(m.task.transition[a].row(s).transpose(), rng);
        int xi2 = sample_index(m.noise.transition.row(xi).transpose(), rng);
        Vec x2 = emit_observation(m, s2, xi2, rng);
        buf.push({x, a, m.task.reward(s, a), x2, s, xi, s2, xi2});
        s = s2;
        xi = xi2;
        x = std::move(x2);
    }
    return buf;
}

/// Metric-loss pairing and SimSR sampling noise travel with the batch so the
/// loss is a deterministic function of the parameters.
struct Batch {
    Mat obs;       ///< d x B
    Mat next_obs;  ///< d x B
    std::vector<int> actions;
    Vec rewards;
    std::vector<int> perm;  ///< sample i is paired with perm[i]
    Mat eps;                ///< k x B standard normal draws

    int size() const { return static_cast<int>(rewards.size()); }
};

inline Batch make_batch(const ReplayBuffer& buf, const std::vector<int>& idx, int latent, Rng& aux_rng) {
    if (idx.empty()) throw PreconditionError("empty batch");
    const int b = static_cast<int>(idx.size());
    const int d = static_cast<int>(buf[idx[0]].obs.size());
    Batch out;
    out.obs.resize(d, b);
    out.next_obs.resize(d, b);
    out.actions.resize(b);
    out.rewards.resize(b);
    for (int i = 0; i < b; ++i) {
        const Transition& t = buf[idx[i]];
        out.obs.col(i) = t.obs;
        out.next_obs.col(i) = t.next_obs;
        out.actions[i] = t.action;
        out.rewards[i] = t.reward;
    }
    out.perm.resize(b);
    for (int i = 0; i < b; ++i) out.perm[i] = i;
    std::shuffle(out.perm.begin(), out.perm.end(), aux_rng);
    out.eps = detail::gaussian_init(latent, b, 1.0, aux_rng);
    return out;
}

// ---------------------------------------------------------------------------
// Losses

enum class MetricVariant { None, Dbc, DbcNormed, Mico, Simsr, Rap };
enum class OuterLoss { Mse, Huber };

inline std::string to_string(MetricVariant v) {
    switch (v) {
        case MetricVariant::None: return "none";
        case MetricVariant::Dbc: return "dbc";
        case MetricVariant::DbcNormed: return "dbc-normed";
        case MetricVariant::Mico: return "mico";
        case MetricVariant::Simsr: return "simsr";
        case MetricVariant::Rap: return "rap";
    }
    return "?";
}

inline MetricVariant parse_metric_variant(const std::string& s) {
    if (s == "none") return MetricVariant::None;
    if (s == "dbc") return MetricVariant::Dbc;
    if (s == "dbc-normed") return MetricVariant::DbcNormed;
    if (s == "mico") return MetricVariant::Mico;
    if (s == "simsr") return MetricVariant::Simsr;
    if (s == "rap") return MetricVariant::Rap;
    throw Error("unknown metric variant: " + s);
}

inline std::string to_string(OuterLoss o) { return o == OuterLoss::Mse ? "mse" : "huber"; }

inline OuterLoss parse_outer_loss(const std::string& s) {
    if (s == "mse") return OuterLoss::Mse;
    if (s == "huber") return OuterLoss::Huber;
    throw Error("unknown outer loss: " + s);
}

struct LossConfig {
    MetricVariant variant = MetricVariant::Dbc;
    /// Unset: mse for dbc and dbc-normed, huber for the others.
    std::optional<OuterLoss> outer_loss;
    double lambda_M = 0.5;
    double lambda_ZP = 1.0;
    double lambda_RP = 1.0;
    double c_R = 1.0;
    double c_T = 0.99;
    bool use_target_trick = true;
    double tau_phi = 0.05;
    double beta_mico = 0.1;
    double beta_rap = 1e-6;

    OuterLoss outer() const {
        if (outer_loss) return *outer_loss;
        return (variant == MetricVariant::Dbc || variant == MetricVariant::DbcNormed) ? OuterLoss::Mse
                                                                                      : OuterLoss::Huber;
    }

    void check() const {
        if (lambda_M < 0 || lambda_ZP < 0 || lambda_RP < 0) throw PreconditionError("loss weights must be >= 0");
        if (c_R < 0 || c_T < 0 || c_T >= 1) throw PreconditionError("need c_R >= 0 and 0 <= c_T < 1");
        if (tau_phi < 0 || tau_phi > 1) throw PreconditionError("tau_phi must lie in [0, 1]");
    }
};

struct LossResult {
    double value = 0.0;
    Params grad;
};

namespace detail {

inline double outer_value(OuterLoss o, double e) { return o == OuterLoss::Mse ? e * e : huber_scalar(e); }
inline double outer_grad(OuterLoss o, double e) { return o == OuterLoss::Mse ? 2.0 * e : huber_scalar_grad(e); }

}  // namespace detail

/// Metric loss J_M = mean_i l(d_Psi(psi_i, psi_perm(i)) - target_i). The target
/// is computed entirely from `target` (encoder and latent models) and carries
/// no gradient; see detached_target.
inline LossResult metric_loss(const EncoderConfig& ec, const ModelConfig& mc, const LossConfig& lc,
                              const Params& params, const Params& target, const Batch& batch) {
    if (lc.variant == MetricVariant::None) throw PreconditionError("metric loss requested without a variant");
    const int b = batch.size();
    if (b == 0) throw PreconditionError("empty batch");
    const OuterLoss outer = lc.outer();

    LossResult res;
    res.grad = params.zeros_like();
    EncoderForward f = encoder_forward(ec, params, batch.obs);
    const Mat& psi = f.out;
    Mat dpsi = Mat::Zero(psi.rows(), b);

    // Detached quantities for the target side.
    Mat psi_bar = encode_batch(ec, target, batch.obs);
    std::optional<TransitionOut> pred;
    const bool needs_model = lc.variant == MetricVariant::Dbc || lc.variant == MetricVariant::DbcNormed ||
                             lc.variant == MetricVariant::Simsr || lc.variant == MetricVariant::Rap;
    if (needs_model) pred = transition_forward(mc, target, psi_bar, batch.actions);
    Mat next_bar;
    if (lc.variant == MetricVariant::Mico) next_bar = encode_batch(ec, target, batch.next_obs);
    Mat next_sample;
    if (lc.variant == MetricVariant::Simsr) next_sample = pred->mu + pred->sigma.cwiseProduct(batch.eps);
    std::optional<RapRewardOut> rap_bar;
    if (lc.variant == MetricVariant::Rap) rap_bar = rap_reward_forward(mc, target, psi_bar);

    double total = 0.0;
    for (int i = 0; i < b; ++i) {
        const int j = batch.perm[i];
        const double ri = batch.rewards[i], rj = batch.rewards[j];
        double d_psi = 0.0, tgt = 0.0;
        Vec gi, gj;
        switch (lc.variant) {
            case MetricVariant::Dbc:
            case MetricVariant::DbcNormed: {
                d_psi = scaled_huber(psi.col(i), psi.col(j));
                gi = scaled_huber_grad(psi.col(i), psi.col(j));
                gj = -gi;
                double dt = lc.variant == MetricVariant::Dbc
                                ? dbc_transition_dist(pred->mu.col(i), pred->sigma.col(i), pred->mu.col(j),
                                                      pred->sigma.col(j))
                                : dbcn_transition_dist(pred->mu.col(i), pred->sigma.col(i), pred->mu.col(j),
                                                       pred->sigma.col(j));
                tgt = lc.c_R * reward_distance(ri, rj, RewardDistance::huber()) + lc.c_T * dt;
                break;
            }
            case MetricVariant::Mico: {
                d_psi = mico_U(psi.col(i), psi.col(j), lc.beta_mico);
                std::tie(gi, gj) = mico_U_grad(psi.col(i), psi.col(j), lc.beta_mico);
                tgt = lc.c_R * std::abs(ri - rj) + lc.c_T * mico_U(next_bar.col(i), next_bar.col(j), lc.beta_mico);
                break;
            }
            case MetricVariant::Simsr: {
                d_psi = cosine_distance(psi.col(i), psi.col(j));
                auto [cu, cv] = cosine_grad(psi.col(i), psi.col(j));
                gi = -cu;
                gj = -cv;
                tgt = lc.c_R * std::abs(ri - rj) +
                      lc.c_T * cosine_distance(next_sample.col(i), next_sample.col(j));
                break;
            }
            case MetricVariant::Rap: {
                d_psi = mico_U(psi.col(i), psi.col(j), lc.beta_rap);
                std::tie(gi, gj) = mico_U_grad(psi.col(i), psi.col(j), lc.beta_rap);
                double dr = reward_distance(ri, rj, RewardDistance::rap(rap_bar->var[i], rap_bar->var[j]));
                double dt = dbc_transition_dist(pred->mu.col(i), pred->sigma.col(i), pred->mu.col(j),
                                                pred->sigma.col(j));
                tgt = lc.c_R * dr + lc.c_T * dt;
                break;
            }
            case MetricVariant::None: break;
        }
        const double e = d_psi - tgt;
        total += detail::outer_value(outer, e);
        const double w = detail::outer_grad(outer, e) / b;
        dpsi.col(i) += w * gi;
        dpsi.col(j) += w * gj;
    }
    res.value = total / b;

    if (lc.variant == MetricVariant::Rap) {
        // Gaussian NLL of the observation-reward model; trains the model and the encoder.
        RapRewardOut o = rap_reward_forward(mc, params, psi);
        const double log2pi = std::log(2.0 * std::numbers::pi);
        double nll = 0.0;
        Mat& gwm = res.grad["rap.wm"];
        Mat& gbm = res.grad["rap.bm"];
        Mat& gwv = res.grad["rap.wv"];
        Mat& gbv = res.grad["rap.bv"];
        for (int i = 0; i < b; ++i) {
            const double resid = batch.rewards[i] - o.mean[i], var = o.var[i];
            nll += 0.5 * (std::log(var) + resid * resid / var + log2pi);
            const double dm = -resid / var / b;
            const double dvar = 0.5 * (1.0 / var - resid * resid / (var * var)) / b;
            const double dl = dvar * detail::sigmoid(o.pre[i]);
            gwm += dm * psi.col(i).transpose();
            gbm(0, 0) += dm;
            gwv += dl * psi.col(i).transpose();
            gbv(0, 0) += dl;
            dpsi.col(i) += dm * params.at("rap.wm").row(0).transpose() + dl * params.at("rap.wv").row(0).transpose();
        }
        res.value += nll / b;
    }

    encoder_backward(ec, params, f, dpsi, res.grad);
    return res;
}

/// J_ZP = mean_i -log N(phi_bar(x'_i); mu_i, diag(sigma_i^2)) with (mu, sigma)
/// predicted from phi(x_i), a_i. phi_bar comes from `target` and is never
/// differentiated. With `detach_encoder` the online latent is detached too,
/// so only the transition model receives gradient.
inline LossResult zp_loss(const EncoderConfig& ec, const ModelConfig& mc, const Params& params,
                          const Params& target, const Batch& batch, bool detach_encoder = false) {
    const int b = batch.size();
    if (b == 0) throw PreconditionError("empty batch");
    LossResult res;
    res.grad = params.zeros_like();
    EncoderForward f = encoder_forward(ec, params, batch.obs);
    Mat y = encode_batch(ec, target, batch.next_obs);
    TransitionOut t = transition_forward(mc, params, f.out, batch.actions);
    const double half_log2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    Mat dmu(t.mu.rows(), b), dsig(t.mu.rows(), b);
    double total = 0.0;
    for (int i = 0; i < b; ++i)
        for (Eigen::Index r = 0; r < t.mu.rows(); ++r) {
            const double s = t.sigma(r, i), z = (y(r, i) - t.mu(r, i)) / s;
            total += 0.5 * z * z + std::log(s) + half_log2pi;
            dmu(r, i) = -z / s / b;
            dsig(r, i) = (1.0 / s - z * z / s) / b;
        }
    res.value = total / b;
    Mat dpsi = transition_backward(params, f.out, batch.actions, t, dmu, dsig, res.grad);
    if (!detach_encoder) encoder_backward(ec, params, f, dpsi, res.grad);
    return res;
}

/// J_RP = mean_i (R(phi(x_i), a_i) - r_i)^2
inline LossResult rp_loss(const EncoderConfig& ec, const ModelConfig& /*mc*/, const Params& params,
                          const Batch& batch, bool detach_encoder = false) {
    const int b = batch.size();
    if (b == 0) throw PreconditionError("empty batch");
    LossResult res;
    res.grad = params.zeros_like();
    EncoderForward f = encoder_forward(ec, params, batch.obs);
    Vec pred = reward_forward(params, f.out, batch.actions);
    Mat dpsi(f.out.rows(), b);
    double total = 0.0;
    for (int i = 0; i < b; ++i) {
        const double e = pred[i] - batch.rewards[i];
        total += e * e;
        const double g = 2.0 * e / b;
        const std::string key = action_key("rew", batch.actions[i]);
        res.grad[key + ".w"] += g * f.out.col(i).transpose();
        res.grad[key + ".b"](0, 0) += g;
        dpsi.col(i) = g * params.at(key + ".w").row(0).transpose();
    }
    res.value = total / b;
    if (!detach_encoder) encoder_backward(ec, params, f, dpsi, res.grad);
    return res;
}

// ---------------------------------------------------------------------------
// Training

struct OptimConfig {
    double lr = 0.01;
    double momentum = 0.9;
    int batch_size = 64;
    /// Global gradient-norm clip; 0 disables clipping.
    double grad_clip = 0.0;
};

struct TrainState {
    EncoderConfig encoder;
    ModelConfig models;
    LossConfig loss;
    OptimConfig optim;
    Params params;    ///< encoder ("enc.*") and latent models
    Params target;    ///< shadow encoder ("enc.*")
    Params velocity;  ///< momentum buffer
    int step = 0;
    /// Auxiliary losses (ZP, RP) send no gradient into the encoder.
    bool aux_detached = false;
};

struct LossRecord {
    int step = 0;
    double j_m = 0.0;
    double j_zp = 0.0;
    double j_rp = 0.0;
    double total = 0.0;
    /// ||d(lambda_ZP J_ZP + lambda_RP J_RP)/d enc||_2 for this step.
    double aux_encoder_grad_norm = 0.0;
};

inline TrainState make_train_state(const EncoderConfig& ec, const ModelConfig& mc, const LossConfig& lc,
                                   const OptimConfig& oc, std::uint64_t seed) {
    lc.check();
    if (mc.latent != ec.latent) throw ShapeError("model latent size must match the encoder");
    TrainState s;
    s.encoder = ec;
    s.models = mc;
    s.loss = lc;
    s.optim = oc;
    Rng rng = make_rng(seed, 0xE0C);
    s.params = init_encoder(ec, rng);
    Params models = init_models(mc, rng);
    for (auto& [k, v] : models.tensors) s.params.tensors[k] = std::move(v);
    s.target = s.params.subset("enc.");
    s.velocity = s.params.zeros_like();
    return s;
}

/// Parameters to encode the target side with: the shadow copy under the
/// target trick, else the online encoder itself.
inline const Params& target_side(const TrainState& s) {
    return s.loss.use_target_trick ? s.target : s.params;
}

/// Frozen snapshot for loss targets: target-side encoder plus the current
/// latent models.
inline Params detached_target(const TrainState& s) {
    Params out = target_side(s).subset("enc.");
    for (const auto& [k, v] : s.params.tensors)
        if (k.rfind("enc.", 0) != 0) out.tensors[k] = v;
    return out;
}

/// One gradient step on total = lambda_M J_M + lambda_ZP J_ZP + lambda_RP J_RP,
/// followed by the shadow-encoder update.
inline LossRecord train_step(TrainState& s, const Batch& batch) {
    const LossConfig& lc = s.loss;
    const Params tgt = detached_target(s);
    LossRecord rec;
    rec.step = s.step;
    Params grad = s.params.zeros_like();
    if (lc.variant != MetricVariant::None && lc.lambda_M > 0.0) {
        LossResult m = metric_loss(s.encoder, s.models, lc, s.params, tgt, batch);
        rec.j_m = m.value;
        grad.axpy(lc.lambda_M, m.grad);
    }
    Params aux = s.params.zeros_like();
    if (lc.lambda_ZP > 0.0) {
        LossResult z = zp_loss(s.encoder, s.models, s.params, tgt, batch, s.aux_detached);
        rec.j_zp = z.value;
        aux.axpy(lc.lambda_ZP, z.grad);
    }
    if (lc.lambda_RP > 0.0) {
        LossResult r = rp_loss(s.encoder, s.models, s.params, batch, s.aux_detached);
        rec.j_rp = r.value;
        aux.axpy(lc.lambda_RP, r.grad);
    }
    rec.aux_encoder_grad_norm = std::sqrt(aux.squared_norm("enc."));
    grad.axpy(1.0, aux);
    rec.total = lc.lambda_M * rec.j_m + lc.lambda_ZP * rec.j_zp + lc.lambda_RP * rec.j_rp;

    if (s.optim.grad_clip > 0.0) {
        double n = std::sqrt(grad.squared_norm());
        if (n > s.optim.grad_clip) {
            for (auto& [k, v] : grad.tensors) v *= s.optim.grad_clip / n;
        }
    }
    for (auto& [k, v] : s.velocity.tensors) {
        v = s.optim.momentum * v + grad.at(k);
        s.params[k] -= s.optim.lr * v;
    }
    if (lc.use_target_trick) {
        for (auto& [k, v] : s.target.tensors) v = (1.0 - lc.tau_phi) * v + lc.tau_phi * s.params.at(k);
    } else {
        s.target = s.params.subset("enc.");
    }
    ++s.step;
    return rec;
}

/// Samples a batch from `buf` (indices from `data_rng`, pairing and SimSR
/// noise from `aux_rng`) and takes one step.
inline LossRecord train_step(TrainState& s, const ReplayBuffer& buf, Rng& data_rng, Rng& aux_rng) {
    std::vector<int> idx = buf.sample_indices(s.optim.batch_size, data_rng);
    return train_step(s, make_batch(buf, idx, s.encoder.latent, aux_rng));
}

}  // namespace bisim
