// SPDX-License-Identifier: Apache-2.0
//
// Data-parallel inner loops behind the tensor math: one scalar reference
// implementation plus SIMD variants (AVX2 on x86-64, NEON on AArch64)
// selected once at startup. Every variant is equivalence-tested against
// the scalar kernels; reductions may differ by float reassociation only.
#pragma once

#include <cstddef>

namespace ckm::kernels {

struct Ops {
    const char* name;

    // y[k] += a * x[k]
    void (*axpy)(size_t n, float a, const float* x, float* y);
    // out[k] = a * x[k] + b * y[k]
    void (*lincomb)(size_t n, float a, const float* x, float b, const float* y, float* out);
    // out[k] = a * x[k] + b
    void (*affine)(size_t n, float a, float b, const float* x, float* out);
    // double-arithmetic variants, rounded once to float32: the reverse-SDE
    // updates divide by sqrt(alpha_bar) ~ 1e-2..1e-1, which amplifies any
    // intermediate rounding
    void (*lincomb_dd)(size_t n, double a, const float* x, double b, const float* y, float* out);
    void (*affine_dd)(size_t n, double a, double b, const float* x, float* out);
    // out[k] = x[k] * y[k]
    void (*mul)(size_t n, const float* x, const float* y, float* out);

    // out[k] = z[k] * sigmoid(z[k]); SIMD variants use a polynomial exp
    // accurate to a few float ulps (equivalence-tested at 1e-5)
    void (*silu)(size_t n, const float* z, float* out);
    // dz[k] = dout[k] * silu'(z[k])
    void (*silu_bwd)(size_t n, const float* z, const float* dout, float* dz);

    double (*sum)(size_t n, const float* x);
    double (*sumsq)(size_t n, const float* x);
    double (*dot)(size_t n, const float* x, const float* y);

    // 3x3 convolution, stride 1, over a zero-padded input.
    //   xpad: cin planes of (h+2) x (w+2), 1-pixel zero border
    //   wts:  (cout, cin, 3, 3), bias: (cout) or nullptr
    //   out:  (cout, h, w)
    void (*conv3x3)(const float* xpad, int cin, int h, int w, const float* wts,
                    const float* bias, float* out, int cout);
    // weight/bias gradient of the same convolution; accumulates into gw/gb
    //   gout: (cout, h, w), gw: (cout, cin, 3, 3), gb: (cout) or nullptr
    void (*conv3x3_wgrad)(const float* xpad, int cin, int h, int w, const float* gout,
                          int cout, float* gw, float* gb);
};

const Ops& scalar_ops();
// nullptr when the build or the running CPU lacks the extension
const Ops* avx2_ops();
const Ops* neon_ops();

// Runtime-selected table. Honors CKM_KERNELS={scalar,avx2,neon} for tests.
const Ops& active();

}  // namespace ckm::kernels
