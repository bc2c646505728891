// Exact metrics and the denoising factor on a small EX-BMDP, then a short
// DBC training run compared against the oracle encoder.

#include "bisim/denoise.hpp"
#include "bisim/learner.hpp"
#include "bisim/metrics.hpp"

#include <cstdio>

using namespace bisim;

int main() {
    ExBmdp m = random_exbmdp(7, 3, 2, 3);
    Policy pi = epsilon_optimal_policy(m, 0.2);

    DistanceMatrix bsm = metric_fixed_point(m, std::nullopt, {MetricSpec::Kind::Bsm, 1.0, 0.9});
    DistanceMatrix mico = metric_fixed_point(m, pi, {MetricSpec::Kind::Mico, 1.0, 0.9});
    std::printf("BSM  (s0,xi0)-(s0,xi1) = %.3g   (s0,xi0)-(s1,xi0) = %.3g\n", bsm(0, 1), bsm(0, m.n_noise()));
    std::printf("MICo (s0,xi0)-(s0,xi0) = %.3g   after %d iterations\n", mico(0, 0), mico.iterations);

    ExBmdp f = with_feature_emission(m, NoiseEmission{NoiseEmissionKind::Gaussian, 1.0, 0.0, 1.0, 4});
    Rng rng = make_rng(1, 0);
    ReplayBuffer buf = collect_rollouts(f, pi, 5000, rng);

    EncoderConfig ec{f.obs_dim(), 32, 4};
    ModelConfig mc{4, f.n_actions()};
    LossConfig lc;
    OptimConfig oc{0.02, 0.9, 64, 10.0};
    TrainState s = make_train_state(ec, mc, lc, oc, 1);
    Rng data = make_rng(1, 1), aux = make_rng(1, 2);
    const DfConfig dfc{256, 16, 16, 3};
    std::printf("df(oracle) = %.3f\n", denoising_factor(oracle_encoder(f), f, pi, dfc).df);
    for (int step = 0; step <= 2000; ++step) {
        if (step % 500 == 0)
            std::printf("step %4d  df = %.3f\n", step,
                        denoising_factor(params_encoder(ec, s.params), f, pi, dfc).df);
        train_step(s, buf, data, aux);
    }
}
