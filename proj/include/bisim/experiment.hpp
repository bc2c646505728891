#pragma once

// Seeded experiment runs: a trained encoder with its loss and DF curves, the
// isolated metric-encoder protocol, sweeps over noise levels and aggregation
// of finished runs into confidence intervals.

#include "bisim/denoise.hpp"
#include "bisim/io.hpp"
#include "bisim/learner.hpp"
#include "bisim/noise.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace bisim {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct ExbmdpSource {
    std::string file;  ///< load from here when non-empty
    std::uint64_t seed = 1;
    int n_states = 6;
    int n_actions = 2;
    int n_noise = 8;
    NoiseKind noise_kind = NoiseKind::IidDiscrete;
    EmissionMode emission = EmissionMode::Feature;
    NoiseEmission noise_emission;
    std::uint64_t projection_seed = 0;
};

struct PolicySpec {
    std::string kind = "epsilon-optimal";  ///< or "uniform"
    double epsilon = 0.3;
};

struct EvalSpec {
    int every = 1000;  ///< 0 evaluates only at the start and the end
    int n_anchors = 256;
    int n_pos = 16;
    int n_neg = 16;
    PsiDistance d_psi = PsiDistance::L2;
};

struct OodSpec {
    bool enabled = false;
    std::uint64_t shift_seed = 1;
    double sigma_scale = 2.0;
};

struct RunConfig {
    std::uint64_t seed = 0;
    ExbmdpSource exbmdp;
    PolicySpec policy;
    /// maxnorm_C <= 0 means c_R / (1 - c_T) * (R_max - R_min) of the task.
    EncoderConfig encoder{0, 32, 8, Normalization::None, 0.0};
    ModelConfig models{8, 2};
    LossConfig loss;
    OptimConfig optim{0.02, 0.9, 64, 10.0};
    int steps = 5000;
    int collect_steps = 20000;
    bool aux_detached = false;
    EvalSpec eval;
    std::vector<double> sweep_sigma;
    std::vector<int> sweep_noise_dim;
    OodSpec ood;
};

namespace detail {

template <class T>
void read_field(const json& j, const char* key, T& out, std::vector<std::string>& errors, const std::string& path) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        errors.push_back(path + key + ": wrong type");
    }
}

inline void check_keys(const json& j, const std::set<std::string>& allowed, std::vector<std::string>& errors,
                       const std::string& path) {
    if (!j.is_object()) {
        errors.push_back(path + ": expected an object");
        return;
    }
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) errors.push_back(path + k + ": unknown field");
}

template <class F>
void read_enum(const json& j, const char* key, F&& parse, std::vector<std::string>& errors, const std::string& path) {
    if (!j.contains(key)) return;
    try {
        parse(j.at(key).get<std::string>());
    } catch (const std::exception&) {
        errors.push_back(path + key + ": invalid value");
    }
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
    json ex = {{"file", c.exbmdp.file},
               {"seed", c.exbmdp.seed},
               {"n_states", c.exbmdp.n_states},
               {"n_actions", c.exbmdp.n_actions},
               {"n_noise", c.exbmdp.n_noise},
               {"noise_kind", to_string(c.exbmdp.noise_kind)},
               {"emission", to_string(c.exbmdp.emission)},
               {"noise_emission",
                {{"kind", to_string(c.exbmdp.noise_emission.kind)},
                 {"scale", c.exbmdp.noise_emission.scale},
                 {"mu", c.exbmdp.noise_emission.mu},
                 {"sigma", c.exbmdp.noise_emission.sigma},
                 {"dim", c.exbmdp.noise_emission.dim}}},
               {"projection_seed", c.exbmdp.projection_seed}};
    json enc = to_json(c.encoder);
    enc.erase("input_dim");
    json models = to_json(c.models);
    models.erase("latent");
    models.erase("n_actions");
    return {{"seed", c.seed},
            {"exbmdp", ex},
            {"policy", {{"kind", c.policy.kind}, {"epsilon", c.policy.epsilon}}},
            {"encoder", enc},
            {"models", models},
            {"loss", to_json(c.loss)},
            {"optim", to_json(c.optim)},
            {"training", {{"steps", c.steps}, {"collect_steps", c.collect_steps}, {"aux_detached", c.aux_detached}}},
            {"eval",
             {{"every", c.eval.every},
              {"n_anchors", c.eval.n_anchors},
              {"n_pos", c.eval.n_pos},
              {"n_neg", c.eval.n_neg},
              {"d_psi", to_string(c.eval.d_psi)}}},
            {"sweep", {{"sigma", c.sweep_sigma}, {"noise_dim", c.sweep_noise_dim}}},
            {"ood", {{"enabled", c.ood.enabled}, {"shift_seed", c.ood.shift_seed}, {"sigma_scale", c.ood.sigma_scale}}}};
}

/// Reads a config over the defaults. Every invalid or unknown field is
/// reported by name in one Error.
inline RunConfig run_config_from_json(const json& j) {
    using detail::read_field;
    RunConfig c;
    std::vector<std::string> errors;
    detail::check_keys(j,
                       {"seed", "exbmdp", "policy", "encoder", "models", "loss", "optim", "training", "eval", "sweep",
                        "ood"},
                       errors, "");
    read_field(j, "seed", c.seed, errors, "");

    if (j.contains("exbmdp")) {
        const json& e = j.at("exbmdp");
        const std::string p = "exbmdp.";
        detail::check_keys(e,
                           {"file", "seed", "n_states", "n_actions", "n_noise", "noise_kind", "emission",
                            "noise_emission", "projection_seed"},
                           errors, p);
        read_field(e, "file", c.exbmdp.file, errors, p);
        read_field(e, "seed", c.exbmdp.seed, errors, p);
        read_field(e, "n_states", c.exbmdp.n_states, errors, p);
        read_field(e, "n_actions", c.exbmdp.n_actions, errors, p);
        read_field(e, "n_noise", c.exbmdp.n_noise, errors, p);
        detail::read_enum(e, "noise_kind", [&](const std::string& s) { c.exbmdp.noise_kind = parse_noise_kind(s); },
                          errors, p);
        detail::read_enum(e, "emission", [&](const std::string& s) { c.exbmdp.emission = parse_emission_mode(s); },
                          errors, p);
        read_field(e, "projection_seed", c.exbmdp.projection_seed, errors, p);
        if (e.contains("noise_emission")) {
            const json& ne = e.at("noise_emission");
            const std::string q = p + "noise_emission.";
            detail::check_keys(ne, {"kind", "scale", "mu", "sigma", "dim"}, errors, q);
            detail::read_enum(
                ne, "kind",
                [&](const std::string& s) { c.exbmdp.noise_emission.kind = parse_noise_emission_kind(s); }, errors,
                q);
            read_field(ne, "scale", c.exbmdp.noise_emission.scale, errors, q);
            read_field(ne, "mu", c.exbmdp.noise_emission.mu, errors, q);
            read_field(ne, "sigma", c.exbmdp.noise_emission.sigma, errors, q);
            read_field(ne, "dim", c.exbmdp.noise_emission.dim, errors, q);
        }
    }
    if (j.contains("policy")) {
        const json& e = j.at("policy");
        detail::check_keys(e, {"kind", "epsilon"}, errors, "policy.");
        read_field(e, "kind", c.policy.kind, errors, "policy.");
        read_field(e, "epsilon", c.policy.epsilon, errors, "policy.");
    }
    if (j.contains("encoder")) {
        const json& e = j.at("encoder");
        detail::check_keys(e, {"hidden", "latent", "norm", "maxnorm_C", "maxnorm_p", "ln_eps", "ln_alpha0"}, errors,
                           "encoder.");
        try {
            c.encoder = encoder_config_from_json(e, c.encoder);
        } catch (const std::exception& ex) {
            errors.push_back(std::string("encoder: ") + ex.what());
        }
    }
    if (j.contains("models")) {
        const json& e = j.at("models");
        detail::check_keys(e, {"sigma_min", "var_min"}, errors, "models.");
        read_field(e, "sigma_min", c.models.sigma_min, errors, "models.");
        read_field(e, "var_min", c.models.var_min, errors, "models.");
    }
    if (j.contains("loss")) {
        const json& e = j.at("loss");
        detail::check_keys(e,
                           {"variant", "outer_loss", "lambda_M", "lambda_ZP", "lambda_RP", "c_R", "c_T",
                            "use_target_trick", "tau_phi", "beta_mico", "beta_rap"},
                           errors, "loss.");
        try {
            c.loss = loss_config_from_json(e, c.loss);
        } catch (const std::exception& ex) {
            errors.push_back(std::string("loss: ") + ex.what());
        }
    }
    if (j.contains("optim")) {
        const json& e = j.at("optim");
        detail::check_keys(e, {"lr", "momentum", "batch_size", "grad_clip"}, errors, "optim.");
        try {
            c.optim = optim_config_from_json(e, c.optim);
        } catch (const std::exception& ex) {
            errors.push_back(std::string("optim: ") + ex.what());
        }
    }
    if (j.contains("training")) {
        const json& e = j.at("training");
        detail::check_keys(e, {"steps", "collect_steps", "aux_detached"}, errors, "training.");
        read_field(e, "steps", c.steps, errors, "training.");
        read_field(e, "collect_steps", c.collect_steps, errors, "training.");
        read_field(e, "aux_detached", c.aux_detached, errors, "training.");
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        detail::check_keys(e, {"every", "n_anchors", "n_pos", "n_neg", "d_psi"}, errors, "eval.");
        read_field(e, "every", c.eval.every, errors, "eval.");
        read_field(e, "n_anchors", c.eval.n_anchors, errors, "eval.");
        read_field(e, "n_pos", c.eval.n_pos, errors, "eval.");
        read_field(e, "n_neg", c.eval.n_neg, errors, "eval.");
        detail::read_enum(e, "d_psi", [&](const std::string& s) { c.eval.d_psi = parse_psi_distance(s); }, errors,
                          "eval.");
    }
    if (j.contains("sweep")) {
        const json& e = j.at("sweep");
        detail::check_keys(e, {"sigma", "noise_dim"}, errors, "sweep.");
        read_field(e, "sigma", c.sweep_sigma, errors, "sweep.");
        read_field(e, "noise_dim", c.sweep_noise_dim, errors, "sweep.");
    }
    if (j.contains("ood")) {
        const json& e = j.at("ood");
        detail::check_keys(e, {"enabled", "shift_seed", "sigma_scale"}, errors, "ood.");
        read_field(e, "enabled", c.ood.enabled, errors, "ood.");
        read_field(e, "shift_seed", c.ood.shift_seed, errors, "ood.");
        read_field(e, "sigma_scale", c.ood.sigma_scale, errors, "ood.");
    }
    if (!errors.empty()) {
        std::string msg = "invalid config:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw Error(msg);
    }
    return c;
}

/// Field-level validation; throws one Error naming every bad field.
inline void validate(const RunConfig& c) {
    std::vector<std::string> errors;
    if (c.exbmdp.file.empty()) {
        if (c.exbmdp.n_states < 1) errors.push_back("exbmdp.n_states: must be >= 1");
        if (c.exbmdp.n_actions < 1) errors.push_back("exbmdp.n_actions: must be >= 1");
        if (c.exbmdp.n_noise < 1) errors.push_back("exbmdp.n_noise: must be >= 1");
    }
    if (c.policy.kind != "epsilon-optimal" && c.policy.kind != "uniform")
        errors.push_back("policy.kind: must be epsilon-optimal or uniform");
    if (!(c.policy.epsilon >= 0.0 && c.policy.epsilon <= 1.0)) errors.push_back("policy.epsilon: must lie in [0, 1]");
    if (c.encoder.hidden < 0) errors.push_back("encoder.hidden: must be >= 0");
    if (c.encoder.latent < 1) errors.push_back("encoder.latent: must be >= 1");
    if (!(c.models.sigma_min > 0.0)) errors.push_back("models.sigma_min: must be > 0");
    if (!(c.models.var_min > 0.0)) errors.push_back("models.var_min: must be > 0");
    try {
        c.loss.check();
    } catch (const std::exception& e) {
        errors.push_back(std::string("loss: ") + e.what());
    }
    if (!(c.optim.lr >= 0.0)) errors.push_back("optim.lr: must be >= 0");
    if (!(c.optim.momentum >= 0.0 && c.optim.momentum < 1.0)) errors.push_back("optim.momentum: must lie in [0, 1)");
    if (c.optim.batch_size < 1) errors.push_back("optim.batch_size: must be >= 1");
    if (c.optim.grad_clip < 0.0) errors.push_back("optim.grad_clip: must be >= 0");
    if (c.steps < 0) errors.push_back("training.steps: must be >= 0");
    if (c.collect_steps < c.optim.batch_size) errors.push_back("training.collect_steps: must be >= optim.batch_size");
    if (c.eval.every < 0) errors.push_back("eval.every: must be >= 0");
    if (c.eval.n_anchors < 1) errors.push_back("eval.n_anchors: must be >= 1");
    if (c.eval.n_pos < 1) errors.push_back("eval.n_pos: must be >= 1");
    if (c.eval.n_neg < 1) errors.push_back("eval.n_neg: must be >= 1");
    for (double s : c.sweep_sigma)
        if (!(s >= 0.0)) errors.push_back("sweep.sigma: values must be >= 0");
    for (int d : c.sweep_noise_dim)
        if (d < 1) errors.push_back("sweep.noise_dim: values must be >= 1");
    if (!errors.empty()) {
        std::string msg = "invalid config:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw Error(msg);
    }
}

// ---------------------------------------------------------------------------
// Building blocks

inline ExBmdp build_exbmdp(const ExbmdpSource& s) {
    if (!s.file.empty()) return load_exbmdp(s.file);
    ExBmdp m = random_exbmdp(s.seed, s.n_states, s.n_actions, s.n_noise, s.noise_kind);
    switch (s.emission) {
        case EmissionMode::Tabular: break;
        case EmissionMode::Feature: m = with_feature_emission(m, s.noise_emission); break;
        case EmissionMode::Projected: m = with_projected_emission(m, s.noise_emission, s.projection_seed); break;
    }
    ValidationReport rep = validate(m);
    if (!rep.ok()) throw Error("generated EX-BMDP is invalid: " + rep.issues.front());
    return m;
}

inline Policy build_policy(const ExBmdp& m, const PolicySpec& p) {
    if (p.kind == "uniform") return Policy::uniform(m.n_obs(), m.n_actions());
    if (p.kind == "epsilon-optimal") return epsilon_optimal_policy(m, p.epsilon);
    throw Error("unknown policy kind: " + p.kind);
}

inline DfConfig df_config(const EvalSpec& e, std::uint64_t seed) {
    return {e.n_anchors, e.n_pos, e.n_neg, seed, e.d_psi};
}

namespace detail {

inline bool is_eval_step(int step, int total, int every) {
    return step == 0 || step == total || (every > 0 && step % every == 0);
}

inline std::string df_csv_header(bool ood) {
    return ood ? "step,pos,neg,df,ood_pos,ood_neg,ood_df,df_gap\n" : "step,pos,neg,df\n";
}

inline std::string df_csv_row(int step, const EvalReport& r, const EvalReport* ood) {
    std::string row = std::to_string(step) + "," + format_double(r.pos) + "," + format_double(r.neg) + "," +
                      format_double(r.df);
    if (ood)
        row += "," + format_double(ood->pos) + "," + format_double(ood->neg) + "," + format_double(ood->df) + "," +
               format_double(r.df - ood->df);
    return row + "\n";
}

inline bool variant_needs_model(MetricVariant v) {
    return v == MetricVariant::Dbc || v == MetricVariant::DbcNormed || v == MetricVariant::Simsr ||
           v == MetricVariant::Rap;
}

/// Everything a run derives from its config before training.
struct RunSetup {
    ExBmdp model;
    std::optional<ExBmdp> ood_model;
    Policy policy;
    ReplayBuffer buffer{1};
    EncoderConfig encoder;
    ModelConfig models;
};

inline RunSetup prepare_run(const RunConfig& c) {
    validate(c);
    RunSetup s;
    s.model = build_exbmdp(c.exbmdp);
    if (c.ood.enabled) s.ood_model = ood_variant(s.model, c.ood.shift_seed, c.ood.sigma_scale);
    s.policy = build_policy(s.model, c.policy);
    Rng collect = make_rng(c.seed, 0xC011);
    s.buffer = collect_rollouts(s.model, s.policy, c.collect_steps, collect);
    s.encoder = c.encoder;
    s.encoder.input_dim = s.model.obs_dim();
    if (s.encoder.maxnorm_C <= 0.0)
        s.encoder.maxnorm_C = maxnorm_bound(c.loss.c_R, c.loss.c_T, s.model.task.reward.minCoeff(),
                                            s.model.task.reward.maxCoeff());
    s.models = c.models;
    s.models.latent = c.encoder.latent;
    s.models.n_actions = s.model.n_actions();
    return s;
}

/// Evaluates, logs and checkpoints one encoder as it trains.
struct Tracker {
    std::string name;
    fs::path dir;
    std::string loss_csv;
    std::string df_csv;
    EvalReport last;
    std::optional<EvalReport> last_ood;
    bool ood = false;

    Tracker(std::string n, fs::path d, bool with_ood)
        : name(std::move(n)), dir(std::move(d)), loss_csv(loss_csv_header()), df_csv(df_csv_header(with_ood)),
          ood(with_ood) {}

    void evaluate(const RunSetup& s, const TrainState& st, const EvalSpec& e, std::uint64_t seed) {
        BatchEncoder enc = params_encoder(st.encoder, st.params);
        last = denoising_factor(enc, s.model, s.policy, df_config(e, seed));
        if (s.ood_model) last_ood = denoising_factor(enc, *s.ood_model, s.policy, df_config(e, seed));
        df_csv += df_csv_row(st.step, last, last_ood ? &*last_ood : nullptr);
        write_json(dir / "checkpoints" / (name + "_step_" + std::to_string(st.step) + ".json"), checkpoint_json(st));
    }

    void log(const LossRecord& r) { loss_csv += loss_csv_row(r); }

    void flush() const {
        write_text(dir / (name.empty() ? "loss.csv" : "loss_" + name + ".csv"), loss_csv);
        write_text(dir / (name.empty() ? "df.csv" : "df_" + name + ".csv"), df_csv);
    }

    json final_json() const {
        json j = to_json(last);
        if (last_ood) j["ood"] = to_json(*last_ood);
        return j;
    }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Runs

inline constexpr const char* kRunSchema = "bisim.run/1";
inline constexpr const char* kIsolatedSchema = "bisim.isolated/1";
inline constexpr const char* kSweepSchema = "bisim.sweep/1";

namespace detail {

inline json run_single(const RunConfig& c, const fs::path& out) {
    fs::create_directories(out);
    write_json(out / "config.json", to_json(c));
    RunSetup s = prepare_run(c);
    save_exbmdp(out / "exbmdp.json", s.model);

    TrainState st = make_train_state(s.encoder, s.models, c.loss, c.optim, c.seed);
    st.aux_detached = c.aux_detached;
    Rng data = make_rng(c.seed, 0xDA7A), aux = make_rng(c.seed, 0xA11);
    const std::uint64_t eval_seed = mix_seed(c.seed, 0xE7A1);

    Tracker t("encoder", out, s.ood_model.has_value());
    t.evaluate(s, st, c.eval, eval_seed);
    while (st.step < c.steps) {
        t.log(train_step(st, s.buffer, data, aux));
        if (is_eval_step(st.step, c.steps, c.eval.every)) t.evaluate(s, st, c.eval, eval_seed);
    }
    write_text(out / "loss.csv", t.loss_csv);
    write_text(out / "df.csv", t.df_csv);
    json fin = {{"schema", kRunSchema},
                {"steps", c.steps},
                {"noise_level", {{"sigma", c.exbmdp.noise_emission.sigma}, {"noise_dim", c.exbmdp.noise_emission.dim}}},
                {"report", t.final_json()}};
    write_json(out / "final.json", fin);
    return fin;
}

inline std::string level_name(const char* key, double v) { return std::string(key) + "_" + format_double(v); }

}  // namespace detail

/// Runs `c` into `out`. Non-empty sweep lists fan out into one sibling run
/// directory per level with an index.json summarizing them.
inline json run_experiment(const RunConfig& c, const fs::path& out) {
    validate(c);
    if (c.sweep_sigma.empty() && c.sweep_noise_dim.empty()) return detail::run_single(c, out);

    fs::create_directories(out);
    write_json(out / "config.json", to_json(c));
    std::vector<double> sigmas = c.sweep_sigma;
    std::vector<int> dims = c.sweep_noise_dim;
    if (sigmas.empty()) sigmas.push_back(c.exbmdp.noise_emission.sigma);
    if (dims.empty()) dims.push_back(c.exbmdp.noise_emission.dim);
    const bool by_sigma = !c.sweep_sigma.empty(), by_dim = !c.sweep_noise_dim.empty();
    json runs = json::array();
    for (double sg : sigmas)
        for (int d : dims) {
            RunConfig child = c;
            child.sweep_sigma.clear();
            child.sweep_noise_dim.clear();
            child.exbmdp.noise_emission.sigma = sg;
            child.exbmdp.noise_emission.dim = d;
            std::string name;
            if (by_sigma) name += detail::level_name("sigma", sg);
            if (by_dim) name += std::string(name.empty() ? "" : "_") + "dim_" + std::to_string(d);
            json fin = detail::run_single(child, out / name);
            runs.push_back({{"dir", name}, {"sigma", sg}, {"noise_dim", d}, {"df", fin["report"]["df"]}});
        }
    json index = {{"schema", kSweepSchema}, {"runs", runs}};
    write_json(out / "index.json", index);
    return index;
}

// ---------------------------------------------------------------------------
// Isolated metric estimation

enum class AgentObjective { None, Zp, ZpRp };

inline std::string to_string(AgentObjective o) {
    switch (o) {
        case AgentObjective::None: return "none";
        case AgentObjective::Zp: return "zp";
        case AgentObjective::ZpRp: return "zp+rp";
    }
    return "?";
}

inline AgentObjective parse_agent_objective(const std::string& s) {
    if (s == "none") return AgentObjective::None;
    if (s == "zp") return AgentObjective::Zp;
    if (s == "zp+rp") return AgentObjective::ZpRp;
    throw Error("unknown agent objective: " + s);
}

struct IsolatedRunSpec {
    AgentObjective agent = AgentObjective::Zp;
    MetricVariant metric = MetricVariant::Mico;
    bool shared_data = true;
    /// Negative control: let the metric encoder's ZP gradient reach it.
    bool inject_aux_gradient = false;
};

class IsolationViolation : public Error {
public:
    IsolationViolation(int step, double norm)
        : Error("isolation violated at step " + std::to_string(step) + ": non-metric gradient norm " +
                format_double(norm)),
          step_(step), norm_(norm) {}
    int step() const { return step_; }
    double norm() const { return norm_; }

private:
    int step_;
    double norm_;
};

/// Loss setup of the isolated metric encoder: metric loss only, plus a ZP-fit
/// transition model that sends no gradient into the encoder.
inline LossConfig isolated_metric_loss(const LossConfig& base, MetricVariant v) {
    LossConfig lc = base;
    lc.variant = v;
    lc.lambda_RP = 0.0;
    lc.lambda_ZP = detail::variant_needs_model(v) ? 1.0 : 0.0;
    if (v == MetricVariant::None) lc.lambda_M = 0.0;
    return lc;
}

inline LossConfig agent_loss(const LossConfig& base, AgentObjective o) {
    LossConfig lc = base;
    lc.variant = MetricVariant::None;
    lc.lambda_M = 0.0;
    lc.lambda_ZP = o == AgentObjective::None ? 0.0 : 1.0;
    lc.lambda_RP = o == AgentObjective::ZpRp ? 1.0 : 0.0;
    return lc;
}

/// Trains an agent encoder and an isolated metric encoder on the same batch
/// stream and logs both DF curves. Throws IsolationViolation if any
/// non-metric gradient reaches the metric encoder.
inline json run_isolated(const RunConfig& c, const IsolatedRunSpec& spec, const fs::path& out) {
    fs::create_directories(out);
    json cfg = to_json(c);
    cfg["isolated"] = {{"agent", to_string(spec.agent)},
                       {"metric", to_string(spec.metric)},
                       {"shared_data", spec.shared_data},
                       {"inject_aux_gradient", spec.inject_aux_gradient}};
    write_json(out / "config.json", cfg);
    detail::RunSetup s = detail::prepare_run(c);
    save_exbmdp(out / "exbmdp.json", s.model);

    TrainState agent = make_train_state(s.encoder, s.models, agent_loss(c.loss, spec.agent), c.optim,
                                        mix_seed(c.seed, 0xA6E));
    TrainState metric = make_train_state(s.encoder, s.models, isolated_metric_loss(c.loss, spec.metric), c.optim,
                                         mix_seed(c.seed, 0x3E7));
    metric.aux_detached = !spec.inject_aux_gradient;
    // The negative control needs an auxiliary loss whose gradient can leak.
    if (spec.inject_aux_gradient) metric.loss.lambda_ZP = 1.0;

    Rng data = make_rng(c.seed, 0xDA7A), aux = make_rng(c.seed, 0xA11);
    Rng agent_data = make_rng(c.seed, 0xDA7B), agent_aux = make_rng(c.seed, 0xA12);
    const std::uint64_t eval_seed = mix_seed(c.seed, 0xE7A1);
    detail::Tracker ta("agent", out, s.ood_model.has_value());
    detail::Tracker tm("metric", out, s.ood_model.has_value());
    ta.evaluate(s, agent, c.eval, eval_seed);
    tm.evaluate(s, metric, c.eval, eval_seed);
    std::string isolation = "step,metric_aux_encoder_grad_norm\n";
    while (metric.step < c.steps) {
        Batch b = make_batch(s.buffer, s.buffer.sample_indices(c.optim.batch_size, data), s.encoder.latent, aux);
        LossRecord rm = train_step(metric, b);
        isolation += std::to_string(rm.step) + "," + format_double(rm.aux_encoder_grad_norm) + "\n";
        if (rm.aux_encoder_grad_norm != 0.0) {
            write_text(out / "isolation.csv", isolation);
            throw IsolationViolation(rm.step, rm.aux_encoder_grad_norm);
        }
        tm.log(rm);
        if (spec.shared_data) {
            ta.log(train_step(agent, b));
        } else {
            ta.log(train_step(agent, s.buffer, agent_data, agent_aux));
        }
        if (detail::is_eval_step(metric.step, c.steps, c.eval.every)) {
            ta.evaluate(s, agent, c.eval, eval_seed);
            tm.evaluate(s, metric, c.eval, eval_seed);
        }
    }
    ta.flush();
    tm.flush();
    write_text(out / "isolation.csv", isolation);
    json fin = {{"schema", kIsolatedSchema},
                {"steps", c.steps},
                {"agent_objective", to_string(spec.agent)},
                {"metric_variant", to_string(spec.metric)},
                {"noise_level", {{"sigma", c.exbmdp.noise_emission.sigma}, {"noise_dim", c.exbmdp.noise_emission.dim}}},
                {"isolation_verified", true},
                {"agent", ta.final_json()},
                {"metric", tm.final_json()},
                {"report", tm.final_json()}};
    write_json(out / "final.json", fin);
    return fin;
}

// ---------------------------------------------------------------------------
// Aggregation

struct Interval {
    double mean = 0.0;
    double half_width = 0.0;
    int n = 0;
};

/// Mean and two-sided 95% Student-t interval; zero width for n < 2.
inline Interval t_interval(const std::vector<double>& xs, double level = 0.95) {
    Interval iv;
    iv.n = static_cast<int>(xs.size());
    if (xs.empty()) throw PreconditionError("t_interval: no samples");
    // Offsets from the first sample keep a constant sample exact.
    double offset = 0.0;
    for (double x : xs) offset += x - xs.front();
    iv.mean = xs.front() + offset / iv.n;
    if (iv.n < 2) return iv;
    double ss = 0.0;
    for (double x : xs) ss += (x - iv.mean) * (x - iv.mean);
    const double sd = std::sqrt(ss / (iv.n - 1));
    boost::math::students_t dist(iv.n - 1);
    iv.half_width = boost::math::quantile(boost::math::complement(dist, (1.0 - level) / 2.0)) * sd / std::sqrt(iv.n);
    return iv;
}

/// Groups finished runs by noise level and reports df (and OOD df when all
/// runs have it) as mean with a 95% t-interval. Writes report.csv and
/// report.json into `out` when it is non-empty.
inline json report(const std::vector<fs::path>& dirs, const fs::path& out = {}) {
    if (dirs.empty()) throw PreconditionError("report: no run directories");
    std::string schema;
    std::map<std::pair<double, int>, std::vector<double>> df, ood_df;
    bool all_ood = true;
    for (const auto& d : dirs) {
        json fin = read_json(d / "final.json");
        const std::string sc = fin.value("schema", "");
        if (sc != kRunSchema && sc != kIsolatedSchema) throw Error("report: " + d.string() + " is not a run directory");
        if (schema.empty()) schema = sc;
        if (sc != schema) throw Error("report: mixed schemas " + schema + " and " + sc);
        const json& lvl = fin.at("noise_level");
        auto key = std::make_pair(lvl.at("sigma").get<double>(), lvl.at("noise_dim").get<int>());
        const json& r = fin.at("report");
        df[key].push_back(number_or_nan(r.at("df")));
        if (r.contains("ood")) {
            ood_df[key].push_back(number_or_nan(r.at("ood").at("df")));
        } else {
            all_ood = false;
        }
    }
    std::string csv = all_ood ? "sigma,noise_dim,n,df_mean,df_ci_low,df_ci_high,ood_df_mean,ood_df_ci_low,ood_df_ci_high\n"
                              : "sigma,noise_dim,n,df_mean,df_ci_low,df_ci_high\n";
    json levels = json::array();
    for (const auto& [key, vals] : df) {
        Interval iv = t_interval(vals);
        json lv = {{"sigma", key.first},
                   {"noise_dim", key.second},
                   {"n", iv.n},
                   {"df_mean", iv.mean},
                   {"df_ci", {iv.mean - iv.half_width, iv.mean + iv.half_width}}};
        csv += format_double(key.first) + "," + std::to_string(key.second) + "," + std::to_string(iv.n) + "," +
               format_double(iv.mean) + "," + format_double(iv.mean - iv.half_width) + "," +
               format_double(iv.mean + iv.half_width);
        if (all_ood) {
            Interval io = t_interval(ood_df.at(key));
            lv["ood_df_mean"] = io.mean;
            lv["ood_df_ci"] = {io.mean - io.half_width, io.mean + io.half_width};
            csv += "," + format_double(io.mean) + "," + format_double(io.mean - io.half_width) + "," +
                   format_double(io.mean + io.half_width);
        }
        csv += "\n";
        levels.push_back(lv);
    }
    json rep = {{"schema", schema}, {"confidence", 0.95}, {"levels", levels}};
    if (!out.empty()) {
        write_text(out / "report.csv", csv);
        write_json(out / "report.json", rep);
    }
    return rep;
}

}  // namespace bisim
