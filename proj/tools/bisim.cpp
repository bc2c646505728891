// bisim: command-line front end for generating EX-BMDPs, exact metrics,
// training runs, DF evaluation, certificates and reports.
//
// Exit codes: 0 success, 1 error, 2 at least one failed certificate.

#include "bisim/experiment.hpp"
#include "bisim/io.hpp"
#include "bisim/metrics.hpp"
#include "bisim/verify.hpp"

#include "CLI11.hpp"

#include <iostream>

using namespace bisim;

namespace {

struct GenOpts {
    std::uint64_t seed = 1;
    int states = 6, actions = 2, noise = 8;
    std::string noise_kind = "iid-discrete";
    std::string emission = "tabular";
    std::string noise_emission = "embed";
    double noise_scale = 1.0, noise_mu = 0.0, noise_sigma = 1.0;
    int noise_dim = 0;
    std::uint64_t projection_seed = 0;
    std::string out;
};

struct PolicyOpts {
    std::string kind = "uniform";
    double epsilon = 0.3;
};

struct RunOpts {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::optional<double> lr;
    std::optional<std::string> variant;
    std::optional<std::string> norm;
    std::optional<int> batch_size;
    std::optional<int> eval_every;
    bool ood = false;
};

void add_policy_flags(CLI::App* cmd, PolicyOpts& p) {
    cmd->add_option("--policy", p.kind, "uniform or epsilon-optimal")->check(CLI::IsMember({"uniform", "epsilon-optimal"}));
    cmd->add_option("--epsilon", p.epsilon, "exploration rate of the epsilon-optimal policy");
}

void add_run_flags(CLI::App* cmd, RunOpts& r) {
    cmd->add_option("--config", r.config, "run config JSON");
    cmd->add_option("--out", r.out, "output directory")->required();
    cmd->add_option("--seed", r.seed, "master seed");
    cmd->add_option("--steps", r.steps, "training steps");
    cmd->add_option("--lr", r.lr, "learning rate");
    cmd->add_option("--variant", r.variant, "metric loss variant");
    cmd->add_option("--norm", r.norm, "encoder normalization");
    cmd->add_option("--batch-size", r.batch_size, "batch size");
    cmd->add_option("--eval-every", r.eval_every, "evaluation period in steps");
    cmd->add_flag("--ood", r.ood, "also evaluate on the shifted-noise variant");
}

RunConfig load_run_config(const RunOpts& r) {
    RunConfig c = r.config.empty() ? RunConfig{} : run_config_from_json(read_json(r.config));
    if (r.seed) c.seed = *r.seed;
    if (r.steps) c.steps = *r.steps;
    if (r.lr) c.optim.lr = *r.lr;
    if (r.variant) c.loss.variant = parse_metric_variant(*r.variant);
    if (r.norm) c.encoder.norm = parse_normalization(*r.norm);
    if (r.batch_size) c.optim.batch_size = *r.batch_size;
    if (r.eval_every) c.eval.every = *r.eval_every;
    if (r.ood) c.ood.enabled = true;
    return c;
}

int cmd_gen(const GenOpts& o) {
    ExbmdpSource s;
    s.seed = o.seed;
    s.n_states = o.states;
    s.n_actions = o.actions;
    s.n_noise = o.noise;
    s.noise_kind = parse_noise_kind(o.noise_kind);
    s.emission = parse_emission_mode(o.emission);
    s.noise_emission = {parse_noise_emission_kind(o.noise_emission), o.noise_scale, o.noise_mu, o.noise_sigma,
                        o.noise_dim};
    s.projection_seed = o.projection_seed;
    save_exbmdp(o.out, build_exbmdp(s));
    return 0;
}

int cmd_exact(const std::string& model, const std::string& kind, const PolicyOpts& po, double c_R, double c_T,
              double tol, const std::string& out) {
    ExBmdp m = load_exbmdp(model);
    Policy pi = build_policy(m, {po.kind, po.epsilon});
    DistanceMatrix d;
    if (kind == "simsr") {
        d = simsr_exact(m, pi, c_R, c_T, tol);
    } else {
        MetricSpec spec{parse_metric_kind(kind), c_R, c_T};
        std::optional<Policy> p;
        if (spec.kind != MetricSpec::Kind::Bsm) p = pi;
        d = metric_fixed_point(m, p, spec, tol);
    }
    write_text(fs::path(out) / "distances.csv", distance_csv(d));
    json summary = distance_summary(d);
    summary["requested"] = kind;
    summary["policy"] = {{"kind", po.kind}, {"epsilon", po.epsilon}};
    write_json(fs::path(out) / "summary.json", summary);
    return 0;
}

int cmd_eval_df(const std::string& model, const std::string& checkpoint, const std::string& encoder,
                const PolicyOpts& po, const EvalSpec& e, std::uint64_t seed, const std::string& out) {
    ExBmdp m = load_exbmdp(model);
    Policy pi = build_policy(m, {po.kind, po.epsilon});
    BatchEncoder enc;
    if (!checkpoint.empty()) {
        TrainState st = train_state_from_json(read_json(checkpoint));
        enc = params_encoder(st.encoder, st.params);
    } else if (encoder == "oracle") {
        enc = oracle_encoder(m);
    } else if (encoder == "identity") {
        enc = [](const Mat& x) { return x; };
    } else {
        throw Error("eval-df needs --checkpoint or --encoder oracle|identity");
    }
    EvalReport r = denoising_factor(enc, m, pi, df_config(e, seed));
    write_json(fs::path(out) / "eval.json", to_json(r));
    write_text(fs::path(out) / "eval.csv", eval_csv_header() + eval_csv_row(r));
    std::cout << to_json(r).dump() << "\n";
    return 0;
}

int cmd_verify(const std::string& model, std::uint64_t seed, const std::string& out) {
    ExBmdp m = model.empty() ? random_exbmdp(seed, 3, 2, 3) : load_exbmdp(model);
    const std::string inst = model.empty() ? "random seed " + std::to_string(seed) : model;
    Policy uniform = Policy::uniform(m.n_obs(), m.n_actions());
    std::vector<Certificate> certs;
    certs.push_back(verify_bsm_denoising(m, 1e-8, 0.9, inst));
    certs.push_back(verify_pbsm_exofree(m, uniform, 1e-8, 0.9, inst + " / uniform policy"));
    certs.push_back(verify_pbsm_exofree(m, epsilon_optimal_policy(m, 0.0), 1e-8, 0.9, inst + " / greedy policy"));
    certs.push_back(construct_pbsm_counterexample().certificate);
    certs.push_back(verify_isometry_preservation(m, uniform, 1e-9, 0.9, inst + " / uniform policy"));
    certs.push_back(verify_mico_self_distance(m, uniform, 1.0, 0.9, inst + " / uniform policy"));
    bool all = true;
    for (std::size_t i = 0; i < certs.size(); ++i) {
        json j = to_json(certs[i]);
        std::cout << j.dump() << "\n";
        if (!out.empty())
            write_json(fs::path(out) / (std::to_string(i) + "_" + certs[i].claim + ".json"), j);
        all = all && certs[i].passed;
    }
    return all ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Behavioral metrics and denoising on tabular EX-BMDPs"};
    app.require_subcommand(1);

    GenOpts gen;
    auto* g = app.add_subcommand("gen", "write a seeded EX-BMDP");
    g->add_option("--seed", gen.seed);
    g->add_option("--states", gen.states);
    g->add_option("--actions", gen.actions);
    g->add_option("--noise", gen.noise, "number of noise values");
    g->add_option("--noise-kind", gen.noise_kind, "iid-discrete, frame-index or custom");
    g->add_option("--emission", gen.emission, "tabular, feature or projected");
    g->add_option("--noise-emission", gen.noise_emission, "embed or gaussian");
    g->add_option("--noise-scale", gen.noise_scale);
    g->add_option("--noise-mu", gen.noise_mu);
    g->add_option("--noise-sigma", gen.noise_sigma);
    g->add_option("--noise-dim", gen.noise_dim);
    g->add_option("--projection-seed", gen.projection_seed);
    g->add_option("--out", gen.out, "output JSON file")->required();

    std::string ex_model, ex_kind = "bsm", ex_out;
    double ex_cr = 1.0, ex_ct = 0.9, ex_tol = 1e-10;
    PolicyOpts ex_pol;
    auto* e = app.add_subcommand("exact", "exact metric fixed point as a CSV distance matrix");
    e->add_option("--model", ex_model)->required();
    e->add_option("--kind", ex_kind)->check(CLI::IsMember({"bsm", "pbsm", "mico", "simsr"}));
    add_policy_flags(e, ex_pol);
    e->add_option("--c-r", ex_cr);
    e->add_option("--c-t", ex_ct);
    e->add_option("--tol", ex_tol);
    e->add_option("--out", ex_out)->required();

    RunOpts train;
    auto* t = app.add_subcommand("train", "train an encoder and log loss and DF curves");
    add_run_flags(t, train);

    std::string df_model, df_ckpt, df_enc, df_out, df_dpsi = "l2";
    PolicyOpts df_pol;
    EvalSpec df_spec;
    std::uint64_t df_seed = 0;
    auto* d = app.add_subcommand("eval-df", "denoising factor of an encoder");
    d->add_option("--model", df_model)->required();
    d->add_option("--checkpoint", df_ckpt);
    d->add_option("--encoder", df_enc, "oracle or identity");
    add_policy_flags(d, df_pol);
    d->add_option("--n-anchors", df_spec.n_anchors);
    d->add_option("--n-pos", df_spec.n_pos);
    d->add_option("--n-neg", df_spec.n_neg);
    d->add_option("--d-psi", df_dpsi)->check(CLI::IsMember({"l2", "l1", "cosine"}));
    d->add_option("--seed", df_seed);
    d->add_option("--out", df_out)->required();

    RunOpts iso;
    std::string iso_agent = "zp", iso_metric = "mico";
    bool iso_negative = false, iso_separate = false;
    auto* i = app.add_subcommand("isolated", "agent encoder and isolated metric encoder on one data stream");
    add_run_flags(i, iso);
    i->add_option("--agent", iso_agent, "none, zp or zp+rp");
    i->add_option("--metric", iso_metric, "metric loss variant of the isolated encoder");
    i->add_flag("--negative-control", iso_negative, "let ZP gradients reach the metric encoder");
    i->add_flag("--separate-data", iso_separate, "draw the agent's batches from its own stream");

    std::string v_model, v_out;
    std::uint64_t v_seed = 1;
    auto* v = app.add_subcommand("verify", "numeric certificates; exit 2 if any fails");
    v->add_option("--model", v_model, "EX-BMDP file (default: seeded random 3x2x3)");
    v->add_option("--seed", v_seed);
    v->add_option("--out", v_out, "directory for one JSON per certificate");

    std::vector<std::string> r_dirs;
    std::string r_out;
    auto* r = app.add_subcommand("report", "aggregate run directories into means and 95% CIs");
    r->add_option("dirs", r_dirs)->required();
    r->add_option("--out", r_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        app.exit(ex);
        return 1;
    }

    try {
        if (*g) return cmd_gen(gen);
        if (*e) return cmd_exact(ex_model, ex_kind, ex_pol, ex_cr, ex_ct, ex_tol, ex_out);
        if (*t) {
            run_experiment(load_run_config(train), train.out);
            return 0;
        }
        if (*d) {
            df_spec.d_psi = parse_psi_distance(df_dpsi);
            return cmd_eval_df(df_model, df_ckpt, df_enc, df_pol, df_spec, df_seed, df_out);
        }
        if (*i) {
            IsolatedRunSpec spec{parse_agent_objective(iso_agent), parse_metric_variant(iso_metric), !iso_separate,
                                 iso_negative};
            run_isolated(load_run_config(iso), spec, iso.out);
            return 0;
        }
        if (*v) return cmd_verify(v_model, v_seed, v_out);
        if (*r) {
            std::vector<fs::path> dirs(r_dirs.begin(), r_dirs.end());
            json rep = report(dirs, r_out);
            std::cout << rep.dump() << "\n";
            return 0;
        }
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 1;
}
