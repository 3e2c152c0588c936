// SPDX-License-Identifier: Apache-2.0
//
// Plug-and-play posterior sampling: predictor-corrector prior
// regularization plus a norm-normalized, zeta-scaled observation
// constraint evaluated through the progressive estimate.
#pragma once

#include <nlohmann/json.hpp>

#include "ckm/forward_ops.hpp"
#include "ckm/scorenet.hpp"

namespace ckm {

struct PosteriorConfig {
    int corrector_steps = 1;  // M
    double zeta = 13.0;
    double snr_r = 0.16;   // corrector signal-to-noise target
    double sigma = 0.01;   // assumed measurement noise, carried for reporting
    uint64_t seed = 0;
    bool detach_score = false;  // drop the score-Jacobian term of dx0/dxi (ablation)

    void validate() const;
    nlohmann::json to_json() const;
};

struct ConstructionResult {
    Tensor x_hat;
    std::vector<double> residual_trace;  // ||y - A(x0_hat)||_2 per step, length N
    double runtime_ms = 0.0;
    nlohmann::json config_echo;
};

// Langevin step size from a target corrector SNR:
//   eps = 2 (snr_r ||z_ref|| / ||score||)^2, z_ref ~ N(0,I) drawn from rng.
// Floored at 1e-8 (also returned when the score vanishes).
double epsilon_schedule(const Tensor& x, const Tensor& score, double snr_r, Rng& rng);

// One observation-constraint update:
//   x_prime - zeta * grad_{x_i} ||y - A(x0_hat(x_i))||^2 / ||y - A(x0_hat(x_i))||
// with x0_hat computed from the pre-predictor state x_i. Skipped when the
// residual norm falls below 1e-8 or zeta = 0.
Tensor observation_constraint_step(const Tensor& x_prime, const Tensor& x_i,
                                   const ScoreNetParams& params, const NoiseSchedule& sched,
                                   int i, const Observation& obs, double zeta,
                                   bool detach_score = false);

ConstructionResult dps_sample(const ScoreNetParams& params, const NoiseSchedule& sched,
                              const Observation& obs, const PosteriorConfig& cfg);

}  // namespace ckm
