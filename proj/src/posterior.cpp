// SPDX-License-Identifier: Apache-2.0
#include "ckm/posterior.hpp"

#include <chrono>

namespace ckm {

void PosteriorConfig::validate() const {
    if (corrector_steps < 0) fail_data("PosteriorConfig: corrector steps must be >= 0");
    if (zeta < 0.0) fail_data("PosteriorConfig: zeta must be >= 0");
    if (!(snr_r > 0.0)) fail_data("PosteriorConfig: snr_r must be positive");
    if (sigma < 0.0) fail_data("PosteriorConfig: sigma must be >= 0");
}

nlohmann::json PosteriorConfig::to_json() const {
    return {
        {"corrector_steps", corrector_steps}, {"zeta", zeta},
        {"snr_r", snr_r},                     {"sigma", sigma},
        {"seed", seed},                       {"detach_score", detach_score},
    };
}

double epsilon_schedule(const Tensor& x, const Tensor& score, double snr_r, Rng& rng) {
    constexpr double kFloor = 1e-8;
    const Tensor z_ref = randn_like(rng, x);  // drawn unconditionally: keeps the stream stable
    const double score_norm = l2_norm(score);
    if (score_norm == 0.0) return kFloor;
    const double ratio = snr_r * l2_norm(z_ref) / score_norm;
    return std::max(2.0 * ratio * ratio, kFloor);
}

namespace {

// Residual and (optionally) the constraint gradient for the pre-predictor
// state recorded in `tape`. Returns ||y - A(x0_hat)||; leaves *grad empty
// when zeta is 0 or the residual is negligible.
double constraint_gradient(Tape& tape, const Tensor& x0_hat, const ScoreNetParams& params,
                           const NoiseSchedule& sched, int i, const Observation& obs,
                           double zeta, bool detach_score, Tensor* grad) {
    const Tensor yhat = obs.op.apply(x0_hat);
    require_same_shape(obs.y, yhat, "observation constraint");
    const Tensor r = lincomb(1.0f, obs.y, -1.0f, yhat);
    const double rnorm = l2_norm(r);
    if (grad) *grad = Tensor();
    if (zeta == 0.0 || rnorm < 1e-8 || !grad) return rnorm;

    // d||y - A(u)||^2 / du = -2 A'(u)^T r, then back through
    // x0_hat = (x_i + (1-abar_i) s(x_i)) / sqrt(abar_i)
    Tensor cot = Tensor::zeros_like(r);
    kernels::active().affine(r.size(), -2.0f, 0.0f, r.data(), cot.data());
    Tensor g_x0 = obs.op.vjp(x0_hat, cot);

    const double inv_sqrt_abar = 1.0 / sched.sqrt_alpha_bar(i);
    Tensor g;
    if (detach_score) {
        g = Tensor::zeros_like(g_x0);
        kernels::active().affine(g_x0.size(), static_cast<float>(inv_sqrt_abar), 0.0f, g_x0.data(), g.data());
    } else {
        const Tensor through_score = vjp_input(params, tape, g_x0);
        g = lincomb(static_cast<float>(inv_sqrt_abar), g_x0,
                    static_cast<float>((1.0 - sched.alpha_bar[i]) * inv_sqrt_abar), through_score);
    }
    if (!all_finite(g)) fail_numeric("observation constraint: non-finite gradient at timestep " + std::to_string(i));
    *grad = std::move(g);
    return rnorm;
}

}  // namespace

Tensor observation_constraint_step(const Tensor& x_prime, const Tensor& x_i,
                                   const ScoreNetParams& params, const NoiseSchedule& sched,
                                   int i, const Observation& obs, double zeta,
                                   bool detach_score) {
    TapePtr tape = make_tape();
    const Tensor score = forward(params, x_i, i, *tape);
    const Tensor x0_hat = progressive_estimate(x_i, score, i, sched);
    Tensor grad;
    const double rnorm =
        constraint_gradient(*tape, x0_hat, params, sched, i, obs, zeta, detach_score, &grad);
    if (grad.size() == 0) return x_prime;
    return lincomb(1.0f, x_prime, static_cast<float>(-zeta / rnorm), grad);
}

ConstructionResult dps_sample(const ScoreNetParams& params, const NoiseSchedule& sched,
                              const Observation& obs, const PosteriorConfig& cfg) {
    cfg.validate();
    if (params.n_timesteps != sched.n) fail_data("dps_sample: schedule does not match weights");
    if (obs.grid_h <= 0 || obs.grid_w <= 0) fail_data("dps_sample: observation lacks grid dimensions");
    {
        int oc, oh, ow;
        obs.op.out_shape(params.arch.in_channels, obs.grid_h, obs.grid_w, oc, oh, ow);
        if (obs.y.ch != oc || obs.y.h != oh || obs.y.w != ow)
            fail_data("dps_sample: observation shape " + obs.y.shape_str() + " inconsistent with operator");
    }

    const auto t0 = std::chrono::steady_clock::now();
    const int n = sched.n;
    Rng rng(cfg.seed);
    Tensor x = randn_like(rng, Tensor(params.arch.in_channels, obs.grid_h, obs.grid_w));

    ConstructionResult res;
    res.residual_trace.resize(n, 0.0);
    TapePtr tape = make_tape();

    for (int i = n; i >= 1; --i) {
        const Tensor score = forward(params, x, i, *tape);
        const Tensor x0_hat = progressive_estimate(x, score, i, sched);

        Tensor grad;
        const double rnorm = constraint_gradient(*tape, x0_hat, params, sched, i, obs, cfg.zeta,
                                                 cfg.detach_score, &grad);
        res.residual_trace[static_cast<size_t>(n - i)] = rnorm;

        const Tensor z = randn_like(rng, x);
        Tensor x_prime = ancestral_step(x, score, i - 1, z, sched);

        for (int j = 0; j < cfg.corrector_steps; ++j) {
            const Tensor score_c = forward(params, x_prime, i);
            const double eps = epsilon_schedule(x_prime, score_c, cfg.snr_r, rng);
            const Tensor zc = randn_like(rng, x_prime);
            x_prime = langevin_step(x_prime, score_c, eps, zc);
        }

        if (grad.size() > 0)
            x = lincomb(1.0f, x_prime, static_cast<float>(-cfg.zeta / rnorm), grad);
        else
            x = std::move(x_prime);

        if (!all_finite(x))
            fail_numeric("dps_sample: non-finite state after timestep " + std::to_string(i));
    }

    res.x_hat = std::move(x);
    res.runtime_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    res.config_echo = cfg.to_json();
    res.config_echo["N"] = n;
    res.config_echo["operator"] = obs.op.to_json();
    return res;
}

}  // namespace ckm
