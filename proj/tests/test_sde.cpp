// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "ckm/sde.hpp"
#include "oracles.hpp"

using namespace ckm;

TEST_SUITE_BEGIN("sde");

TEST_CASE("schedule construction and invariants") {
    const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    CHECK(s.alpha_bar[0] == 1.0);
    CHECK(s.alpha_bar[1] == doctest::Approx(0.9999));
    for (int i = 1; i <= s.n; ++i) {
        CHECK(s.beta[i] > 0.0);
        CHECK(s.beta[i] < 1.0);
        CHECK(s.alpha[i] + s.beta[i] == doctest::Approx(1.0).epsilon(1e-15));
        if (i > 1) {
            CHECK(s.beta[i] >= s.beta[i - 1]);
            CHECK(s.alpha_bar[i] < s.alpha_bar[i - 1]);
        }
    }
    CHECK(s.alpha_bar[s.n] < 1e-4);
    CHECK(s.alpha_bar[s.n] ==
          doctest::Approx(oracles::alpha_bar_by_product(1000, 1e-4, 0.02)).epsilon(1e-12));
}

TEST_CASE("schedule rejects bad configurations") {
    CHECK_THROWS_AS(make_schedule(5, 1e-4, 0.02), Error);
    CHECK_THROWS_AS(make_schedule(1000, 0.0, 0.02), Error);
    CHECK_THROWS_AS(make_schedule(1000, 0.03, 0.02), Error);
    // terminal alpha_bar too large: the printed 1000-step ramp compressed to
    // 200 steps without rescaling beta_max leaves x_N far from N(0,I)
    CHECK_THROWS_AS(make_schedule(200, 1e-4, 0.02), Error);
    CHECK_NOTHROW(make_schedule(200, 1e-4, default_beta_max(200)));
}

TEST_CASE("perturb endpoints and derived value") {
    const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    Rng rng(3);
    const Tensor x0 = randn_like(rng, Tensor(2, 4, 4));
    const Tensor zero = Tensor::zeros_like(x0);

    SUBCASE("zero noise leaves the scaled signal") {
        const Tensor out = perturb(x0, 10, zero, s);
        const double root = s.sqrt_alpha_bar(10);
        for (size_t k = 0; k < out.size(); ++k)
            CHECK(out.v[k] == doctest::Approx(root * x0.v[k]).epsilon(1e-6));
    }
    SUBCASE("i = 0 is the identity") {
        Tensor z = randn_like(rng, x0);
        const Tensor out = perturb(x0, 0, z, s);
        for (size_t k = 0; k < out.size(); ++k) CHECK(out.v[k] == x0.v[k]);
    }
    SUBCASE("x0 = 0, unit noise at i = N gives the terminal coefficient") {
        Tensor ones = Tensor::zeros_like(x0);
        for (auto& f : ones.v) f = 1.0f;
        const Tensor out = perturb(zero, s.n, ones, s);
        const double expect = std::sqrt(1.0 - oracles::alpha_bar_by_product(1000, 1e-4, 0.02));
        for (size_t k = 0; k < out.size(); ++k)
            CHECK(out.v[k] == doctest::Approx(expect).epsilon(1e-6));
    }
    SUBCASE("shape mismatch is rejected") {
        CHECK_THROWS_AS(perturb(x0, 10, Tensor(2, 4, 8), s), Error);
    }
}

TEST_CASE("score_from_noise: zero, linearity, terminal behavior") {
    const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    Rng rng(4);
    const Tensor z = randn_like(rng, Tensor(2, 4, 4));
    const Tensor zero = Tensor::zeros_like(z);

    const Tensor s0 = score_from_noise(zero, 17, s);
    for (float f : s0.v) CHECK(f == 0.0f);

    const Tensor s1 = score_from_noise(z, 17, s);
    Tensor z2 = z;
    for (auto& f : z2.v) f *= 2.0f;
    const Tensor s2 = score_from_noise(z2, 17, s);
    for (size_t k = 0; k < z.size(); ++k) CHECK(s2.v[k] == doctest::Approx(2.0f * s1.v[k]));

    const Tensor sN = score_from_noise(z, s.n, s);
    for (size_t k = 0; k < z.size(); ++k)
        CHECK(sN.v[k] == doctest::Approx(-z.v[k]).epsilon(1e-3));  // sqrt(1-abar_N) ~ 1

    CHECK_THROWS_AS(score_from_noise(z, 0, s), Error);
}

TEST_CASE("ancestral_step: rescale, final-step determinism, identity limit") {
    const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    Rng rng(5);
    const Tensor x = randn_like(rng, Tensor(2, 4, 4));
    const Tensor zero = Tensor::zeros_like(x);

    SUBCASE("pure rescale when score and noise vanish") {
        const Tensor out = ancestral_step(x, zero, 10, zero, s);
        const double inv = 1.0 / std::sqrt(s.alpha[11]);
        for (size_t k = 0; k < x.size(); ++k)
            CHECK(out.v[k] == doctest::Approx(inv * x.v[k]).epsilon(1e-6));
    }
    SUBCASE("target index 0 ignores the noise argument") {
        const Tensor z1 = randn_like(rng, x);
        const Tensor z2 = randn_like(rng, x);
        const Tensor a = ancestral_step(x, zero, 0, z1, s);
        const Tensor b = ancestral_step(x, zero, 0, z2, s);
        CHECK(a.v == b.v);
    }
    SUBCASE("beta -> 0 limit approaches the identity") {
        const NoiseSchedule tiny = make_schedule(2000, 1e-9, default_beta_max(2000));
        const Tensor out = ancestral_step(x, zero, 0, zero, tiny);  // beta_1 = 1e-9
        for (size_t k = 0; k < x.size(); ++k)
            CHECK(out.v[k] == doctest::Approx(x.v[k]).epsilon(1e-6));
    }
}

TEST_CASE("langevin_step: fixed point, contraction, stationarity on a 1-D Gaussian") {
    Rng rng(6);
    const Tensor x = randn_like(rng, Tensor(1, 2, 2));
    const Tensor zero = Tensor::zeros_like(x);

    const Tensor fixed = langevin_step(x, zero, 0.5, zero);
    CHECK(fixed.v == x.v);

    Tensor neg = x;
    for (auto& f : neg.v) f = -f;
    const Tensor half = langevin_step(x, neg, 0.5, zero);
    for (size_t k = 0; k < x.size(); ++k) CHECK(half.v[k] == doctest::Approx(0.5f * x.v[k]));

    CHECK_THROWS_AS(langevin_step(x, zero, 0.0, zero), Error);

    // Langevin chain targeting N(0, sigma^2): score(x) = -x/sigma^2.
    // After burn-in the sample variance must approach sigma^2 within 5%.
    const double sigma2 = 0.49;
    const double eps = 0.02;
    const int chains = 10000, burn = 200;
    Rng crng(1234);
    std::vector<double> xs(chains, 0.0);
    for (int t = 0; t < burn; ++t)
        for (int c = 0; c < chains; ++c)
            xs[c] += eps * (-xs[c] / sigma2) + std::sqrt(2.0 * eps) * crng.normal();
    double var = 0.0;
    for (double v : xs) var += v * v;
    var /= chains;
    // discretization bias of ULA at this eps is ~eps/(2 sigma^2) ~ 2%
    CHECK(var == doctest::Approx(sigma2).epsilon(0.05));
}

TEST_CASE("progressive_estimate inverts the perturbation through Tweedie") {
    // The float32 state x_i is quantized to ~0.5 ulp; the inversion divides
    // by sqrt(alpha_bar_i), so the recovery error at step i is bounded by
    // 0.5 * ulp(|x_i|) / sqrt(alpha_bar_i). The strict 1e-5 check therefore
    // runs on a schedule whose terminal alpha_bar sits near the 0.01 type
    // bound; the aggressive default schedule is checked against the
    // quantization bound itself.
    Rng rng(7);
    const Tensor x0 = randn_like(rng, Tensor(2, 4, 4));

    SUBCASE("strict 1e-5 on a gentle terminal schedule") {
        const NoiseSchedule s = make_schedule(1000, 1e-4, 0.011);
        CHECK(s.alpha_bar[s.n] < 0.01);
        for (int i : {1, 500, 1000}) {
            const Tensor z0 = randn_like(rng, x0);
            const Tensor xi = perturb(x0, i, z0, s);
            const Tensor score = score_from_noise(z0, i, s);
            const Tensor rec = progressive_estimate(xi, score, i, s);
            for (size_t k = 0; k < x0.size(); ++k)
                CHECK(std::abs(rec.v[k] - x0.v[k]) < 1e-5);
        }
    }

    SUBCASE("default schedule respects the per-element quantization bound") {
        const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
        for (int i : {1, 500, 1000}) {
            const Tensor z0 = randn_like(rng, x0);
            const Tensor xi = perturb(x0, i, z0, s);
            const Tensor score = score_from_noise(z0, i, s);
            const Tensor rec = progressive_estimate(xi, score, i, s);
            for (size_t k = 0; k < x0.size(); ++k) {
                const double ulp = std::abs(xi.v[k]) * 1.2e-7 + 1e-9;
                const double bound = std::max(1e-5, 2.0 * ulp / s.sqrt_alpha_bar(i));
                CHECK(std::abs(rec.v[k] - x0.v[k]) < bound);
            }
        }
    }

    SUBCASE("zero score leaves the rescaled latent") {
        const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
        const Tensor zero = Tensor::zeros_like(x0);
        const Tensor xi = perturb(x0, 30, zero, s);
        const Tensor est = progressive_estimate(xi, zero, 30, s);
        const double inv = 1.0 / s.sqrt_alpha_bar(30);
        for (size_t k = 0; k < x0.size(); ++k)
            CHECK(est.v[k] == doctest::Approx(inv * xi.v[k]).epsilon(1e-6));
    }
}

TEST_CASE("perturbation kernel moments over many draws") {
    const NoiseSchedule s = make_schedule(200, 1e-4, default_beta_max(200));
    Rng rng(8);
    Tensor x0(1, 2, 2);
    for (auto& f : x0.v) f = 0.7f;
    const int draws = 10000;
    for (int i : {1, 100, 200}) {
        double mean = 0.0, var = 0.0;
        for (int d = 0; d < draws; ++d) {
            const Tensor z = randn_like(rng, x0);
            const Tensor xi = perturb(x0, i, z, s);
            for (float v : xi.v) mean += v;
        }
        mean /= draws * x0.size();
        Rng rng2(9);
        for (int d = 0; d < draws; ++d) {
            const Tensor z = randn_like(rng2, x0);
            const Tensor xi = perturb(x0, i, z, s);
            for (float v : xi.v) var += (v - mean) * (v - mean);
        }
        var /= draws * x0.size();
        const double expect_mean = s.sqrt_alpha_bar(i) * 0.7;
        const double expect_var = 1.0 - s.alpha_bar[i];
        const double se = std::sqrt(expect_var / (draws * x0.size()));
        CHECK(std::abs(mean - expect_mean) < 3.0 * se + 1e-12);
        CHECK(var == doctest::Approx(expect_var).epsilon(0.02));
    }
}

TEST_SUITE_END();
