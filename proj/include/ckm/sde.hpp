// SPDX-License-Identifier: Apache-2.0
//
// Discretized VP-SDE machinery. Index convention: arrays run 1..N with
// alpha_bar[0] = 1, so the final reverse step (target index 0) is
// deterministic without a special case.
#pragma once

#include <vector>

#include "ckm/tensor.hpp"

namespace ckm {

struct NoiseSchedule {
    int n = 0;  // timestep count N
    double beta_min = 0.0, beta_max = 0.0;
    std::vector<double> beta;       // [0] unused, [1..N]
    std::vector<double> alpha;      // alpha[i] = 1 - beta[i], alpha[0] = 1
    std::vector<double> alpha_bar;  // running product, alpha_bar[0] = 1

    double sqrt_alpha_bar(int i) const { return std::sqrt(alpha_bar[i]); }
    double sqrt_one_minus_alpha_bar(int i) const { return std::sqrt(1.0 - alpha_bar[i]); }
};

// Linear beta ramp over N steps. Requires N >= 10, 0 < beta_min <= beta_max < 1
// and a terminal alpha_bar below 0.01 (otherwise x_N is not close to N(0,I)
// and sampling from a standard-normal start is unsound).
NoiseSchedule make_schedule(int n, double beta_min, double beta_max);

// Default beta_max for a given N: the 1000-step [1e-4, 0.02] ramp compressed
// in time so the total injected noise is preserved.
double default_beta_max(int n);

// x_i = sqrt(abar_i) x0 + sqrt(1-abar_i) z0, valid for i in [0, N]
Tensor perturb(const Tensor& x0, int i, const Tensor& z0, const NoiseSchedule& sched);

// Tweedie relation: score = -z0 / sqrt(1-abar_i), i in [1, N]
Tensor score_from_noise(const Tensor& z0, int i, const NoiseSchedule& sched);

// One reverse (ancestral) step producing x_i from x_{i+1}; i in [0, N-1].
// Noise coefficient vanishes at i = 0.
Tensor ancestral_step(const Tensor& x_next, const Tensor& score, int i, const Tensor& z,
                      const NoiseSchedule& sched);

// x + eps*score + sqrt(2 eps) z, eps > 0
Tensor langevin_step(const Tensor& x, const Tensor& score, double eps, const Tensor& z);

// x0_hat = (x_i + (1-abar_i) score) / sqrt(abar_i), i in [1, N]
Tensor progressive_estimate(const Tensor& x_i, const Tensor& score, int i,
                            const NoiseSchedule& sched);

}  // namespace ckm
