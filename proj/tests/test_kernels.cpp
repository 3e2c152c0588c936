// SPDX-License-Identifier: Apache-2.0
//
// Scalar kernels are the semantics; every available SIMD table must agree
// with them (bit-exact for elementwise maps, tight tolerance for
// reductions, where only the summation order differs).
#include <doctest.h>

#include "ckm/kernels.hpp"
#include "ckm/util.hpp"

using namespace ckm;

namespace {

std::vector<float> random_vec(Rng& rng, size_t n, double scale = 1.0) {
    std::vector<float> v(n);
    for (auto& f : v) f = static_cast<float>(scale * rng.normal());
    return v;
}

std::vector<const kernels::Ops*> simd_tables() {
    std::vector<const kernels::Ops*> tables;
    if (const kernels::Ops* o = kernels::avx2_ops()) tables.push_back(o);
    if (const kernels::Ops* o = kernels::neon_ops()) tables.push_back(o);
    return tables;
}

}  // namespace

TEST_SUITE_BEGIN("kernels");

TEST_CASE("elementwise kernels match scalar bit-exactly") {
    Rng rng(42);
    const kernels::Ops& ref = kernels::scalar_ops();
    for (const kernels::Ops* ops : simd_tables()) {
        CAPTURE(ops->name);
        for (size_t n : {1u, 7u, 8u, 9u, 64u, 1000u}) {
            const std::vector<float> x = random_vec(rng, n);
            const std::vector<float> y = random_vec(rng, n);
            std::vector<float> a(n), b(n);

            a = y;
            b = y;
            ref.axpy(n, 1.7f, x.data(), a.data());
            ops->axpy(n, 1.7f, x.data(), b.data());
            // FMA contraction may differ from mul+add by one rounding
            for (size_t k = 0; k < n; ++k) CHECK(b[k] == doctest::Approx(a[k]).epsilon(1e-6));

            ref.lincomb(n, 0.3f, x.data(), -1.2f, y.data(), a.data());
            ops->lincomb(n, 0.3f, x.data(), -1.2f, y.data(), b.data());
            for (size_t k = 0; k < n; ++k) CHECK(b[k] == doctest::Approx(a[k]).epsilon(1e-6));

            ref.affine(n, 2.5f, 0.1f, x.data(), a.data());
            ops->affine(n, 2.5f, 0.1f, x.data(), b.data());
            for (size_t k = 0; k < n; ++k) CHECK(b[k] == doctest::Approx(a[k]).epsilon(1e-6));

            ref.mul(n, x.data(), y.data(), a.data());
            ops->mul(n, x.data(), y.data(), b.data());
            for (size_t k = 0; k < n; ++k) CHECK(b[k] == a[k]);

            // double-arithmetic variants round once, so they match exactly
            ref.lincomb_dd(n, 0.1234567891, x.data(), -3.0000000007, y.data(), a.data());
            ops->lincomb_dd(n, 0.1234567891, x.data(), -3.0000000007, y.data(), b.data());
            for (size_t k = 0; k < n; ++k) CHECK(b[k] == a[k]);

            ref.affine_dd(n, 163.99999999, 0.5, x.data(), a.data());
            ops->affine_dd(n, 163.99999999, 0.5, x.data(), b.data());
            for (size_t k = 0; k < n; ++k) CHECK(b[k] == a[k]);

            // transcendental kernels may use approximated exp
            std::vector<float> zwide(n);
            for (size_t k = 0; k < n; ++k) zwide[k] = static_cast<float>(rng.uniform(-30.0, 30.0));
            ref.silu(n, zwide.data(), a.data());
            ops->silu(n, zwide.data(), b.data());
            for (size_t k = 0; k < n; ++k)
                CHECK(std::abs(b[k] - a[k]) <= 1e-5 * std::max(1.0f, std::abs(a[k])));
            ref.silu_bwd(n, zwide.data(), x.data(), a.data());
            ops->silu_bwd(n, zwide.data(), x.data(), b.data());
            for (size_t k = 0; k < n; ++k)
                CHECK(std::abs(b[k] - a[k]) <= 1e-5 * std::max(1.0f, std::abs(a[k])));
        }
    }
}

TEST_CASE("reductions match scalar within reassociation tolerance") {
    Rng rng(7);
    const kernels::Ops& ref = kernels::scalar_ops();
    for (const kernels::Ops* ops : simd_tables()) {
        CAPTURE(ops->name);
        for (size_t n : {1u, 15u, 16u, 257u, 4096u}) {
            const std::vector<float> x = random_vec(rng, n);
            const std::vector<float> y = random_vec(rng, n);
            CHECK(ops->sum(n, x.data()) == doctest::Approx(ref.sum(n, x.data())).epsilon(1e-12));
            CHECK(ops->sumsq(n, x.data()) == doctest::Approx(ref.sumsq(n, x.data())).epsilon(1e-12));
            CHECK(ops->dot(n, x.data(), y.data()) ==
                  doctest::Approx(ref.dot(n, x.data(), y.data())).epsilon(1e-12));
        }
    }
}

namespace {

// brute-force 3x3 convolution on the unpadded input, double accumulation
std::vector<float> conv3x3_brute(const std::vector<float>& x, int cin, int h, int w,
                                 const std::vector<float>& wts, const std::vector<float>& bias,
                                 int cout) {
    std::vector<float> out(static_cast<size_t>(cout) * h * w, 0.0f);
    for (int oc = 0; oc < cout; ++oc)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                double acc = bias.empty() ? 0.0 : bias[oc];
                for (int ic = 0; ic < cin; ++ic)
                    for (int ky = -1; ky <= 1; ++ky)
                        for (int kx = -1; kx <= 1; ++kx) {
                            const int yy = y + ky, xc = xx + kx;
                            if (yy < 0 || yy >= h || xc < 0 || xc >= w) continue;
                            acc += static_cast<double>(
                                       wts[((oc * cin + ic) * 3 + (ky + 1)) * 3 + (kx + 1)]) *
                                   x[(static_cast<size_t>(ic) * h + yy) * w + xc];
                        }
                out[(static_cast<size_t>(oc) * h + y) * w + xx] = static_cast<float>(acc);
            }
    return out;
}

std::vector<float> pad_input(const std::vector<float>& x, int cin, int h, int w) {
    std::vector<float> xp(static_cast<size_t>(cin) * (h + 2) * (w + 2), 0.0f);
    for (int c = 0; c < cin; ++c)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                xp[(static_cast<size_t>(c) * (h + 2) + y + 1) * (w + 2) + xx + 1] =
                    x[(static_cast<size_t>(c) * h + y) * w + xx];
    return xp;
}

}  // namespace

TEST_CASE("conv3x3 agrees with brute force and across tables") {
    Rng rng(99);
    const kernels::Ops& ref = kernels::scalar_ops();
    for (auto [cin, cout, h, w] : {std::tuple{1, 1, 4, 4}, {3, 2, 8, 8}, {2, 5, 6, 23},
                                   {4, 4, 16, 16}, {2, 3, 5, 37}}) {
        const std::vector<float> x = random_vec(rng, static_cast<size_t>(cin) * h * w);
        const std::vector<float> wts = random_vec(rng, static_cast<size_t>(cout) * cin * 9, 0.3);
        const std::vector<float> bias = random_vec(rng, cout, 0.1);
        const std::vector<float> xp = pad_input(x, cin, h, w);

        const std::vector<float> expect = conv3x3_brute(x, cin, h, w, wts, bias, cout);
        std::vector<float> got(expect.size());
        ref.conv3x3(xp.data(), cin, h, w, wts.data(), bias.data(), got.data(), cout);
        for (size_t k = 0; k < expect.size(); ++k)
            CHECK(got[k] == doctest::Approx(expect[k]).epsilon(2e-5));

        for (const kernels::Ops* ops : simd_tables()) {
            CAPTURE(ops->name);
            std::vector<float> got2(expect.size());
            ops->conv3x3(xp.data(), cin, h, w, wts.data(), bias.data(), got2.data(), cout);
            for (size_t k = 0; k < expect.size(); ++k)
                CHECK(got2[k] == doctest::Approx(expect[k]).epsilon(2e-5));
        }
    }
}

TEST_CASE("conv3x3_wgrad agrees across tables and with the dot definition") {
    Rng rng(123);
    const kernels::Ops& ref = kernels::scalar_ops();
    const int cin = 3, cout = 2, h = 9, w = 11;
    const std::vector<float> x = random_vec(rng, static_cast<size_t>(cin) * h * w);
    const std::vector<float> gout = random_vec(rng, static_cast<size_t>(cout) * h * w);
    const std::vector<float> xp = pad_input(x, cin, h, w);

    std::vector<float> gw_ref(static_cast<size_t>(cout) * cin * 9, 0.0f), gb_ref(cout, 0.0f);
    ref.conv3x3_wgrad(xp.data(), cin, h, w, gout.data(), cout, gw_ref.data(), gb_ref.data());

    // definition check on one tap: dW[oc][ic][ky][kx] = <gout_oc, shifted x_ic>
    {
        const int oc = 1, ic = 2, ky = 0, kx = 2;
        double acc = 0.0;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                acc += static_cast<double>(gout[(static_cast<size_t>(oc) * h + y) * w + xx]) *
                       xp[(static_cast<size_t>(ic) * (h + 2) + y + ky) * (w + 2) + xx + kx];
        CHECK(gw_ref[((oc * cin + ic) * 3 + ky) * 3 + kx] == doctest::Approx(acc).epsilon(1e-5));
    }

    for (const kernels::Ops* ops : simd_tables()) {
        CAPTURE(ops->name);
        std::vector<float> gw(gw_ref.size(), 0.0f), gb(cout, 0.0f);
        ops->conv3x3_wgrad(xp.data(), cin, h, w, gout.data(), cout, gw.data(), gb.data());
        for (size_t k = 0; k < gw.size(); ++k)
            CHECK(gw[k] == doctest::Approx(gw_ref[k]).epsilon(1e-4));
        for (int k = 0; k < cout; ++k) CHECK(gb[k] == doctest::Approx(gb_ref[k]).epsilon(1e-6));
    }
}

TEST_CASE("active table is selectable") {
    const kernels::Ops& ops = kernels::active();
    CHECK(ops.name != nullptr);
    // accumulating kernels still work through the dispatch table
    float y[4] = {1, 2, 3, 4};
    const float x[4] = {1, 1, 1, 1};
    ops.axpy(4, 2.0f, x, y);
    CHECK(y[0] == 3.0f);
    CHECK(y[3] == 6.0f);
}

TEST_SUITE_END();
