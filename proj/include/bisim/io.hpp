#pragma once

// JSON documents for EX-BMDPs, policies, checkpoints and reports; CSV tables
// for distance matrices and curves. Doubles are written in their shortest
// round-trip form, so save -> load -> save reproduces the text exactly.

#include "bisim/denoise.hpp"
#include "bisim/learner.hpp"
#include "bisim/mdp.hpp"
#include "bisim/metrics.hpp"

#include "json.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

namespace bisim {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Text helpers

/// JSON has no NaN; nlohmann writes it as null, so read null back as NaN.
inline double number_or_nan(const json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw Error("format_double failed");
    return std::string(buf, end);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline void write_json(const std::filesystem::path& path, const json& j) { write_text(path, dump(j)); }

inline json read_json(const std::filesystem::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw Error("invalid JSON in " + path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Matrices

inline json to_json(const Mat& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json r = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
        rows.push_back(std::move(r));
    }
    return rows;
}

inline json to_json(const Vec& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline Mat mat_from_json(const json& j) {
    if (!j.is_array()) throw Error("expected a nested array");
    const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
    const Eigen::Index cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        if (!j[i].is_array() || static_cast<Eigen::Index>(j[i].size()) != cols)
            throw Error("ragged matrix in JSON");
        for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
    }
    return m;
}

inline Vec vec_from_json(const json& j) {
    if (!j.is_array()) throw Error("expected an array");
    Vec v(static_cast<Eigen::Index>(j.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = j[i].get<double>();
    return v;
}

// ---------------------------------------------------------------------------
// EX-BMDP

inline std::string to_string(NoiseEmissionKind k) { return k == NoiseEmissionKind::Gaussian ? "gaussian" : "embed"; }

inline NoiseEmissionKind parse_noise_emission_kind(const std::string& s) {
    if (s == "embed") return NoiseEmissionKind::EmbedDiscrete;
    if (s == "gaussian") return NoiseEmissionKind::Gaussian;
    throw Error("unknown noise emission kind: " + s);
}

inline json to_json(const ExBmdp& m) {
    json task;
    task["n_states"] = m.task.n_states;
    task["n_actions"] = m.task.n_actions;
    task["gamma"] = m.task.gamma;
    json tr = json::array();
    for (const auto& t : m.task.transition) tr.push_back(to_json(t));
    task["transition"] = tr;
    task["reward"] = to_json(m.task.reward);
    task["initial"] = to_json(m.task.initial);

    json noise;
    noise["kind"] = to_string(m.noise.kind);
    noise["n_noise"] = m.n_noise();
    noise["transition"] = to_json(m.noise.transition);
    noise["initial"] = to_json(m.noise.initial);
    noise["resample"] = to_json(m.noise.resample);

    json em;
    em["mode"] = to_string(m.emission.mode);
    em["state_features"] = to_json(m.emission.state_features);
    em["noise"] = {{"kind", to_string(m.emission.noise.kind)},
                   {"scale", m.emission.noise.scale},
                   {"mu", m.emission.noise.mu},
                   {"sigma", m.emission.noise.sigma},
                   {"dim", m.emission.noise.dim}};
    if (m.emission.projection) {
        const ProjectionMatrix& p = *m.emission.projection;
        em["projection"] = {{"seed", p.seed},       {"mu_A", p.mu_A},
                            {"sigma_A", p.sigma_A}, {"rcond", p.rcond},
                            {"regenerations", p.regenerations},
                            {"matrix", to_json(p.matrix)},
                            {"inverse", to_json(p.inverse)}};
    } else {
        em["projection"] = nullptr;
    }
    return {{"task", task}, {"noise", noise}, {"emission", em}};
}

inline ExBmdp exbmdp_from_json(const json& j) {
    try {
        ExBmdp m;
        const json& task = j.at("task");
        m.task.n_states = task.at("n_states").get<int>();
        m.task.n_actions = task.at("n_actions").get<int>();
        m.task.gamma = task.at("gamma").get<double>();
        for (const auto& t : task.at("transition")) m.task.transition.push_back(mat_from_json(t));
        m.task.reward = mat_from_json(task.at("reward"));
        m.task.initial = vec_from_json(task.at("initial"));

        const json& noise = j.at("noise");
        m.noise.kind = parse_noise_kind(noise.at("kind").get<std::string>());
        m.noise.transition = mat_from_json(noise.at("transition"));
        m.noise.initial = vec_from_json(noise.at("initial"));
        m.noise.resample = vec_from_json(noise.at("resample"));

        const json& em = j.at("emission");
        m.emission.mode = parse_emission_mode(em.at("mode").get<std::string>());
        m.emission.state_features = mat_from_json(em.at("state_features"));
        const json& ne = em.at("noise");
        m.emission.noise.kind = parse_noise_emission_kind(ne.at("kind").get<std::string>());
        m.emission.noise.scale = ne.at("scale").get<double>();
        m.emission.noise.mu = ne.at("mu").get<double>();
        m.emission.noise.sigma = ne.at("sigma").get<double>();
        m.emission.noise.dim = ne.at("dim").get<int>();
        if (em.contains("projection") && !em.at("projection").is_null()) {
            const json& pj = em.at("projection");
            ProjectionMatrix p;
            p.seed = pj.at("seed").get<std::uint64_t>();
            p.mu_A = pj.at("mu_A").get<double>();
            p.sigma_A = pj.at("sigma_A").get<double>();
            p.rcond = pj.at("rcond").get<double>();
            p.regenerations = pj.at("regenerations").get<int>();
            p.matrix = mat_from_json(pj.at("matrix"));
            p.inverse = mat_from_json(pj.at("inverse"));
            m.emission.projection = std::move(p);
        }
        return m;
    } catch (const json::exception& e) {
        throw Error(std::string("malformed EX-BMDP document: ") + e.what());
    }
}

inline void save_exbmdp(const std::filesystem::path& path, const ExBmdp& m) { write_json(path, to_json(m)); }
inline ExBmdp load_exbmdp(const std::filesystem::path& path) { return exbmdp_from_json(read_json(path)); }

// ---------------------------------------------------------------------------
// Policy, distance matrices, reports

inline json to_json(const Policy& p) { return {{"table", to_json(p.table)}, {"exo_free", p.exo_free}}; }

inline Policy policy_from_json(const json& j) {
    Policy p;
    p.table = mat_from_json(j.at("table"));
    p.exo_free = j.at("exo_free").get<bool>();
    return p;
}

inline std::string distance_csv(const DistanceMatrix& d) {
    std::string out = "row,col,value\n";
    for (int i = 0; i < d.size(); ++i)
        for (int j = 0; j < d.size(); ++j)
            out += std::to_string(i) + "," + std::to_string(j) + "," + format_double(d(i, j)) + "\n";
    return out;
}

inline json distance_summary(const DistanceMatrix& d) {
    return {{"kind", to_string(d.spec.kind)}, {"c_R", d.spec.c_R},         {"c_T", d.spec.c_T},
            {"size", d.size()},                {"iterations", d.iterations}, {"residual", d.final_residual}};
}

inline json to_json(const EvalReport& r) {
    return {{"pos", r.pos},       {"neg", r.neg},     {"df", r.df},     {"n_anchors", r.n_anchors},
            {"n_pos", r.n_pos},   {"n_neg", r.n_neg}, {"d_psi_kind", r.d_psi_kind}};
}

inline std::string eval_csv_header() { return "pos,neg,df,n_anchors,n_pos,n_neg,d_psi_kind\n"; }

inline std::string eval_csv_row(const EvalReport& r) {
    return format_double(r.pos) + "," + format_double(r.neg) + "," + format_double(r.df) + "," +
           std::to_string(r.n_anchors) + "," + std::to_string(r.n_pos) + "," + std::to_string(r.n_neg) + "," +
           r.d_psi_kind + "\n";
}

inline std::string loss_csv_header() { return "step,j_m,j_zp,j_rp,total\n"; }

inline std::string loss_csv_row(const LossRecord& r) {
    return std::to_string(r.step) + "," + format_double(r.j_m) + "," + format_double(r.j_zp) + "," +
           format_double(r.j_rp) + "," + format_double(r.total) + "\n";
}

// ---------------------------------------------------------------------------
// Configs and checkpoints

inline json to_json(const EncoderConfig& c) {
    return {{"input_dim", c.input_dim}, {"hidden", c.hidden},       {"latent", c.latent},
            {"norm", to_string(c.norm)}, {"maxnorm_C", c.maxnorm_C}, {"maxnorm_p", c.maxnorm_p},
            {"ln_eps", c.ln_eps},        {"ln_alpha0", c.ln_alpha0}};
}

inline EncoderConfig encoder_config_from_json(const json& j, EncoderConfig c = {}) {
    c.input_dim = j.value("input_dim", c.input_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.latent = j.value("latent", c.latent);
    if (j.contains("norm")) c.norm = parse_normalization(j.at("norm").get<std::string>());
    c.maxnorm_C = j.value("maxnorm_C", c.maxnorm_C);
    c.maxnorm_p = j.value("maxnorm_p", c.maxnorm_p);
    c.ln_eps = j.value("ln_eps", c.ln_eps);
    c.ln_alpha0 = j.value("ln_alpha0", c.ln_alpha0);
    return c;
}

inline json to_json(const LossConfig& c) {
    json j = {{"variant", to_string(c.variant)},
              {"outer_loss", to_string(c.outer())},
              {"lambda_M", c.lambda_M},
              {"lambda_ZP", c.lambda_ZP},
              {"lambda_RP", c.lambda_RP},
              {"c_R", c.c_R},
              {"c_T", c.c_T},
              {"use_target_trick", c.use_target_trick},
              {"tau_phi", c.tau_phi},
              {"beta_mico", c.beta_mico},
              {"beta_rap", c.beta_rap}};
    return j;
}

inline LossConfig loss_config_from_json(const json& j, LossConfig c = {}) {
    if (j.contains("variant")) c.variant = parse_metric_variant(j.at("variant").get<std::string>());
    if (j.contains("outer_loss")) c.outer_loss = parse_outer_loss(j.at("outer_loss").get<std::string>());
    c.lambda_M = j.value("lambda_M", c.lambda_M);
    c.lambda_ZP = j.value("lambda_ZP", c.lambda_ZP);
    c.lambda_RP = j.value("lambda_RP", c.lambda_RP);
    c.c_R = j.value("c_R", c.c_R);
    c.c_T = j.value("c_T", c.c_T);
    c.use_target_trick = j.value("use_target_trick", c.use_target_trick);
    c.tau_phi = j.value("tau_phi", c.tau_phi);
    c.beta_mico = j.value("beta_mico", c.beta_mico);
    c.beta_rap = j.value("beta_rap", c.beta_rap);
    return c;
}

inline json to_json(const OptimConfig& c) {
    return {{"lr", c.lr}, {"momentum", c.momentum}, {"batch_size", c.batch_size}, {"grad_clip", c.grad_clip}};
}

inline OptimConfig optim_config_from_json(const json& j, OptimConfig c = {}) {
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    return c;
}

inline json to_json(const ModelConfig& c) {
    return {{"latent", c.latent}, {"n_actions", c.n_actions}, {"sigma_min", c.sigma_min}, {"var_min", c.var_min}};
}

inline ModelConfig model_config_from_json(const json& j, ModelConfig c = {}) {
    c.latent = j.value("latent", c.latent);
    c.n_actions = j.value("n_actions", c.n_actions);
    c.sigma_min = j.value("sigma_min", c.sigma_min);
    c.var_min = j.value("var_min", c.var_min);
    return c;
}

/// Named parameter arrays: {"name": {"rows": r, "cols": c, "data": [column-major]}}.
inline json to_json(const Params& p) {
    json j = json::object();
    for (const auto& [k, v] : p.tensors) {
        json data = json::array();
        for (Eigen::Index i = 0; i < v.size(); ++i) data.push_back(v.reshaped()[i]);
        j[k] = {{"rows", v.rows()}, {"cols", v.cols()}, {"data", data}};
    }
    return j;
}

inline Params params_from_json(const json& j) {
    Params p;
    for (const auto& [k, v] : j.items()) {
        Mat m(v.at("rows").get<Eigen::Index>(), v.at("cols").get<Eigen::Index>());
        const json& data = v.at("data");
        if (static_cast<Eigen::Index>(data.size()) != m.size()) throw Error("checkpoint tensor " + k + " has bad size");
        for (Eigen::Index i = 0; i < m.size(); ++i) m.reshaped()[i] = data[i].get<double>();
        p.tensors[k] = std::move(m);
    }
    return p;
}

inline json checkpoint_json(const TrainState& s) {
    return {{"step", s.step},
            {"encoder", to_json(s.encoder)},
            {"models", to_json(s.models)},
            {"loss", to_json(s.loss)},
            {"optim", to_json(s.optim)},
            {"params", to_json(s.params)},
            {"target", to_json(s.target)},
            {"velocity", to_json(s.velocity)},
            {"aux_detached", s.aux_detached}};
}

inline TrainState train_state_from_json(const json& j) {
    TrainState s;
    s.step = j.at("step").get<int>();
    s.encoder = encoder_config_from_json(j.at("encoder"));
    s.models = model_config_from_json(j.at("models"));
    s.loss = loss_config_from_json(j.at("loss"));
    s.optim = optim_config_from_json(j.at("optim"));
    s.params = params_from_json(j.at("params"));
    s.target = params_from_json(j.at("target"));
    s.velocity = params_from_json(j.at("velocity"));
    s.aux_detached = j.value("aux_detached", false);
    return s;
}

}  // namespace bisim
