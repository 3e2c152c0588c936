// SPDX-License-Identifier: Apache-2.0
#include "ckm/sde.hpp"

namespace ckm {

NoiseSchedule make_schedule(int n, double beta_min, double beta_max) {
    if (n < 10) fail_data("make_schedule: N must be >= 10");
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
        fail_data("make_schedule: need 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.n = n;
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    s.beta.resize(n + 1, 0.0);
    s.alpha.resize(n + 1, 1.0);
    s.alpha_bar.resize(n + 1, 1.0);
    for (int i = 1; i <= n; ++i) {
        s.beta[i] = beta_min + (beta_max - beta_min) * static_cast<double>(i - 1) / (n - 1);
        s.alpha[i] = 1.0 - s.beta[i];
        s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
    }
    if (!(s.alpha_bar[n] < 0.01))
        fail_data("make_schedule: terminal alpha_bar " + std::to_string(s.alpha_bar[n]) +
                  " >= 0.01; increase N or beta_max");
    return s;
}

double default_beta_max(int n) {
    // 20/N reproduces beta_max = 0.02 at N = 1000
    return std::min(20.0 / n, 0.999);
}

namespace {
void check_index(int i, int lo, int hi, const char* what) {
    if (i < lo || i > hi)
        fail_data(std::string(what) + ": timestep " + std::to_string(i) + " outside [" +
                  std::to_string(lo) + "," + std::to_string(hi) + "]");
}
}  // namespace

// All per-element updates below run in double and round once: late reverse
// steps divide by sqrt(alpha_bar) which magnifies intermediate rounding.

Tensor perturb(const Tensor& x0, int i, const Tensor& z0, const NoiseSchedule& sched) {
    check_index(i, 0, sched.n, "perturb");
    require_same_shape(x0, z0, "perturb");
    return lincomb_dd(sched.sqrt_alpha_bar(i), x0, sched.sqrt_one_minus_alpha_bar(i), z0);
}

Tensor score_from_noise(const Tensor& z0, int i, const NoiseSchedule& sched) {
    check_index(i, 1, sched.n, "score_from_noise");
    const double denom = sched.sqrt_one_minus_alpha_bar(i);
    if (denom == 0.0) fail_data("score_from_noise: alpha_bar = 1 at this timestep");
    Tensor out = Tensor::zeros_like(z0);
    kernels::active().affine_dd(z0.size(), -1.0 / denom, 0.0, z0.data(), out.data());
    return out;
}

Tensor ancestral_step(const Tensor& x_next, const Tensor& score, int i, const Tensor& z,
                      const NoiseSchedule& sched) {
    check_index(i, 0, sched.n - 1, "ancestral_step");
    require_same_shape(x_next, score, "ancestral_step");
    require_same_shape(x_next, z, "ancestral_step");
    const int j = i + 1;  // source level
    const double a = sched.alpha[j];
    const double inv_sqrt_a = 1.0 / std::sqrt(a);
    Tensor out = lincomb_dd(inv_sqrt_a, x_next, (1.0 - a) * inv_sqrt_a, score);
    const double var = (1.0 - a) * (1.0 - sched.alpha_bar[i]) / (1.0 - sched.alpha_bar[j]);
    if (i > 0 && var > 0.0) out = lincomb_dd(1.0, out, std::sqrt(var), z);
    return out;
}

Tensor langevin_step(const Tensor& x, const Tensor& score, double eps, const Tensor& z) {
    if (!(eps > 0.0)) fail_data("langevin_step: step size must be positive");
    require_same_shape(x, score, "langevin_step");
    require_same_shape(x, z, "langevin_step");
    Tensor out = lincomb_dd(1.0, x, eps, score);
    return lincomb_dd(1.0, out, std::sqrt(2.0 * eps), z);
}

Tensor progressive_estimate(const Tensor& x_i, const Tensor& score, int i,
                            const NoiseSchedule& sched) {
    check_index(i, 1, sched.n, "progressive_estimate");
    require_same_shape(x_i, score, "progressive_estimate");
    const double inv = 1.0 / sched.sqrt_alpha_bar(i);
    return lincomb_dd(inv, x_i, (1.0 - sched.alpha_bar[i]) * inv, score);
}

}  // namespace ckm
