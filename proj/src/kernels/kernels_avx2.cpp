// SPDX-License-Identifier: Apache-2.0
#include "ckm/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>

namespace ckm::kernels {
namespace {

void axpy_avx2(size_t n, float a, const float* x, float* y) {
    const __m256 va = _mm256_set1_ps(a);
    size_t k = 0;
    for (; k + 8 <= n; k += 8) {
        __m256 vy = _mm256_loadu_ps(y + k);
        vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + k), vy);
        _mm256_storeu_ps(y + k, vy);
    }
    for (; k < n; ++k) y[k] += a * x[k];
}

void lincomb_avx2(size_t n, float a, const float* x, float b, const float* y, float* out) {
    const __m256 va = _mm256_set1_ps(a);
    const __m256 vb = _mm256_set1_ps(b);
    size_t k = 0;
    for (; k + 8 <= n; k += 8) {
        __m256 r = _mm256_mul_ps(va, _mm256_loadu_ps(x + k));
        r = _mm256_fmadd_ps(vb, _mm256_loadu_ps(y + k), r);
        _mm256_storeu_ps(out + k, r);
    }
    for (; k < n; ++k) out[k] = a * x[k] + b * y[k];
}

void affine_avx2(size_t n, float a, float b, const float* x, float* out) {
    const __m256 va = _mm256_set1_ps(a);
    const __m256 vb = _mm256_set1_ps(b);
    size_t k = 0;
    for (; k + 8 <= n; k += 8)
        _mm256_storeu_ps(out + k, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + k), vb));
    for (; k < n; ++k) out[k] = a * x[k] + b;
}

void mul_avx2(size_t n, const float* x, const float* y, float* out) {
    size_t k = 0;
    for (; k + 8 <= n; k += 8)
        _mm256_storeu_ps(out + k, _mm256_mul_ps(_mm256_loadu_ps(x + k), _mm256_loadu_ps(y + k)));
    for (; k < n; ++k) out[k] = x[k] * y[k];
}

// mul + add, not fused: keeps results bit-identical to the scalar reference
void lincomb_dd_avx2(size_t n, double a, const float* x, double b, const float* y, float* out) {
    const __m256d va = _mm256_set1_pd(a);
    const __m256d vb = _mm256_set1_pd(b);
    size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        const __m256d xd = _mm256_cvtps_pd(_mm_loadu_ps(x + k));
        const __m256d yd = _mm256_cvtps_pd(_mm_loadu_ps(y + k));
        const __m256d r = _mm256_add_pd(_mm256_mul_pd(va, xd), _mm256_mul_pd(vb, yd));
        _mm_storeu_ps(out + k, _mm256_cvtpd_ps(r));
    }
    for (; k < n; ++k) out[k] = static_cast<float>(a * x[k] + b * y[k]);
}

void affine_dd_avx2(size_t n, double a, double b, const float* x, float* out) {
    const __m256d va = _mm256_set1_pd(a);
    const __m256d vb = _mm256_set1_pd(b);
    size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        const __m256d xd = _mm256_cvtps_pd(_mm_loadu_ps(x + k));
        _mm_storeu_ps(out + k, _mm256_cvtpd_ps(_mm256_add_pd(_mm256_mul_pd(va, xd), vb)));
    }
    for (; k < n; ++k) out[k] = static_cast<float>(a * x[k] + b);
}

// exp via 2^n * e^r with a degree-6 Taylor core on [-ln2/2, ln2/2];
// relative error a few float ulps
inline __m256 exp_avx2(__m256 x) {
    const __m256 log2e = _mm256_set1_ps(1.442695040888963f);
    const __m256 ln2_hi = _mm256_set1_ps(0.693359375f);
    const __m256 ln2_lo = _mm256_set1_ps(-2.12194440e-4f);
    x = _mm256_min_ps(x, _mm256_set1_ps(88.0f));
    x = _mm256_max_ps(x, _mm256_set1_ps(-87.0f));
    const __m256 nf = _mm256_round_ps(_mm256_mul_ps(x, log2e),
                                      _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m256 r = _mm256_fnmadd_ps(nf, ln2_hi, x);
    r = _mm256_fnmadd_ps(nf, ln2_lo, r);
    // e^r = 1 + r (1 + r/2 (1 + r/3 (1 + r/4 (1 + r/5 (1 + r/6)))))
    __m256 p = _mm256_fmadd_ps(r, _mm256_set1_ps(1.0f / 6.0f), _mm256_set1_ps(1.0f));
    p = _mm256_fmadd_ps(_mm256_mul_ps(r, p), _mm256_set1_ps(1.0f / 5.0f), _mm256_set1_ps(1.0f));
    p = _mm256_fmadd_ps(_mm256_mul_ps(r, p), _mm256_set1_ps(1.0f / 4.0f), _mm256_set1_ps(1.0f));
    p = _mm256_fmadd_ps(_mm256_mul_ps(r, p), _mm256_set1_ps(1.0f / 3.0f), _mm256_set1_ps(1.0f));
    p = _mm256_fmadd_ps(_mm256_mul_ps(r, p), _mm256_set1_ps(1.0f / 2.0f), _mm256_set1_ps(1.0f));
    p = _mm256_fmadd_ps(r, p, _mm256_set1_ps(1.0f));
    const __m256i n = _mm256_cvtps_epi32(nf);
    const __m256i pow2 = _mm256_slli_epi32(_mm256_add_epi32(n, _mm256_set1_epi32(127)), 23);
    return _mm256_mul_ps(p, _mm256_castsi256_ps(pow2));
}

void silu_avx2(size_t n, const float* z, float* out) {
    const __m256 one = _mm256_set1_ps(1.0f);
    size_t k = 0;
    for (; k + 8 <= n; k += 8) {
        const __m256 zv = _mm256_loadu_ps(z + k);
        const __m256 e = exp_avx2(_mm256_sub_ps(_mm256_setzero_ps(), zv));
        const __m256 s = _mm256_div_ps(one, _mm256_add_ps(one, e));
        _mm256_storeu_ps(out + k, _mm256_mul_ps(zv, s));
    }
    for (; k < n; ++k) {
        const float s = 1.0f / (1.0f + std::exp(-z[k]));
        out[k] = z[k] * s;
    }
}

void silu_bwd_avx2(size_t n, const float* z, const float* dout, float* dz) {
    const __m256 one = _mm256_set1_ps(1.0f);
    size_t k = 0;
    for (; k + 8 <= n; k += 8) {
        const __m256 zv = _mm256_loadu_ps(z + k);
        const __m256 e = exp_avx2(_mm256_sub_ps(_mm256_setzero_ps(), zv));
        const __m256 s = _mm256_div_ps(one, _mm256_add_ps(one, e));
        const __m256 d = _mm256_mul_ps(s, _mm256_fmadd_ps(zv, _mm256_sub_ps(one, s), one));
        _mm256_storeu_ps(dz + k, _mm256_mul_ps(_mm256_loadu_ps(dout + k), d));
    }
    for (; k < n; ++k) {
        const float s = 1.0f / (1.0f + std::exp(-z[k]));
        dz[k] = dout[k] * s * (1.0f + z[k] * (1.0f - s));
    }
}

inline double hsum_pd(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

// reductions accumulate in double, like the scalar reference
double sum_avx2(size_t n, const float* x) {
    __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
    size_t k = 0;
    for (; k + 8 <= n; k += 8) {
        __m256 v = _mm256_loadu_ps(x + k);
        acc0 = _mm256_add_pd(acc0, _mm256_cvtps_pd(_mm256_castps256_ps128(v)));
        acc1 = _mm256_add_pd(acc1, _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1)));
    }
    double s = hsum_pd(_mm256_add_pd(acc0, acc1));
    for (; k < n; ++k) s += x[k];
    return s;
}

double sumsq_avx2(size_t n, const float* x) {
    __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
    size_t k = 0;
    for (; k + 8 <= n; k += 8) {
        __m256 v = _mm256_loadu_ps(x + k);
        __m256d lo = _mm256_cvtps_pd(_mm256_castps256_ps128(v));
        __m256d hi = _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1));
        acc0 = _mm256_fmadd_pd(lo, lo, acc0);
        acc1 = _mm256_fmadd_pd(hi, hi, acc1);
    }
    double s = hsum_pd(_mm256_add_pd(acc0, acc1));
    for (; k < n; ++k) s += static_cast<double>(x[k]) * x[k];
    return s;
}

double dot_avx2(size_t n, const float* x, const float* y) {
    __m256d acc0 = _mm256_setzero_pd(), acc1 = _mm256_setzero_pd();
    size_t k = 0;
    for (; k + 8 <= n; k += 8) {
        __m256 vx = _mm256_loadu_ps(x + k);
        __m256 vy = _mm256_loadu_ps(y + k);
        acc0 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(vx)),
                               _mm256_cvtps_pd(_mm256_castps256_ps128(vy)), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(vx, 1)),
                               _mm256_cvtps_pd(_mm256_extractf128_ps(vy, 1)), acc1);
    }
    double s = hsum_pd(_mm256_add_pd(acc0, acc1));
    for (; k < n; ++k) s += static_cast<double>(x[k]) * y[k];
    return s;
}

// Keeps the output tile in registers across the input-channel loop;
// weight broadcasts come from L1 per (ic, tap).
void conv3x3_avx2(const float* xpad, int cin, int h, int w, const float* wts,
                  const float* bias, float* out, int cout) {
    const int wp = w + 2;
    const size_t plane_in = static_cast<size_t>(h + 2) * wp;
    const size_t plane_out = static_cast<size_t>(h) * w;
    for (int oc = 0; oc < cout; ++oc) {
        float* op = out + oc * plane_out;
        const float b = bias ? bias[oc] : 0.0f;
        const __m256 vb = _mm256_set1_ps(b);
        const float* wbase = wts + static_cast<size_t>(oc) * cin * 9;
        for (int y = 0; y < h; ++y) {
            int x = 0;
            for (; x + 16 <= w; x += 16) {
                // six accumulator chains (3 tap rows x 2 halves) keep the
                // FMA dependency chains short enough to hide latency
                __m256 a00 = vb, a01 = _mm256_setzero_ps(), a02 = _mm256_setzero_ps();
                __m256 a10 = vb, a11 = _mm256_setzero_ps(), a12 = _mm256_setzero_ps();
                for (int ic = 0; ic < cin; ++ic) {
                    const float* wk = wbase + ic * 9;
                    const float* ip = xpad + ic * plane_in + static_cast<size_t>(y) * wp + x;
                    const float* r0 = ip;
                    const float* r1 = ip + wp;
                    const float* r2 = ip + 2 * wp;
                    __m256 wv;
                    wv = _mm256_set1_ps(wk[0]);
                    a00 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r0 + 0), a00);
                    a10 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r0 + 8), a10);
                    wv = _mm256_set1_ps(wk[1]);
                    a01 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r0 + 1), a01);
                    a11 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r0 + 9), a11);
                    wv = _mm256_set1_ps(wk[2]);
                    a02 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r0 + 2), a02);
                    a12 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r0 + 10), a12);
                    wv = _mm256_set1_ps(wk[3]);
                    a00 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r1 + 0), a00);
                    a10 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r1 + 8), a10);
                    wv = _mm256_set1_ps(wk[4]);
                    a01 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r1 + 1), a01);
                    a11 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r1 + 9), a11);
                    wv = _mm256_set1_ps(wk[5]);
                    a02 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r1 + 2), a02);
                    a12 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r1 + 10), a12);
                    wv = _mm256_set1_ps(wk[6]);
                    a00 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r2 + 0), a00);
                    a10 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r2 + 8), a10);
                    wv = _mm256_set1_ps(wk[7]);
                    a01 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r2 + 1), a01);
                    a11 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r2 + 9), a11);
                    wv = _mm256_set1_ps(wk[8]);
                    a02 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r2 + 2), a02);
                    a12 = _mm256_fmadd_ps(wv, _mm256_loadu_ps(r2 + 10), a12);
                }
                _mm256_storeu_ps(op + y * w + x, _mm256_add_ps(a00, _mm256_add_ps(a01, a02)));
                _mm256_storeu_ps(op + y * w + x + 8, _mm256_add_ps(a10, _mm256_add_ps(a11, a12)));
            }
            for (; x + 8 <= w; x += 8) {
                __m256 acc = vb;
                for (int ic = 0; ic < cin; ++ic) {
                    const float* wk = wbase + ic * 9;
                    const float* ip = xpad + ic * plane_in + static_cast<size_t>(y) * wp + x;
                    for (int ky = 0; ky < 3; ++ky) {
                        const float* row = ip + ky * wp;
                        acc = _mm256_fmadd_ps(_mm256_set1_ps(wk[ky * 3 + 0]), _mm256_loadu_ps(row + 0), acc);
                        acc = _mm256_fmadd_ps(_mm256_set1_ps(wk[ky * 3 + 1]), _mm256_loadu_ps(row + 1), acc);
                        acc = _mm256_fmadd_ps(_mm256_set1_ps(wk[ky * 3 + 2]), _mm256_loadu_ps(row + 2), acc);
                    }
                }
                _mm256_storeu_ps(op + y * w + x, acc);
            }
            for (; x < w; ++x) {
                float acc = b;
                for (int ic = 0; ic < cin; ++ic) {
                    const float* wk = wbase + ic * 9;
                    const float* ip = xpad + ic * plane_in + static_cast<size_t>(y) * wp + x;
                    for (int ky = 0; ky < 3; ++ky) {
                        const float* row = ip + ky * wp;
                        acc += wk[ky * 3 + 0] * row[0] + wk[ky * 3 + 1] * row[1] + wk[ky * 3 + 2] * row[2];
                    }
                }
                op[y * w + x] = acc;
            }
        }
    }
}

void conv3x3_wgrad_avx2(const float* xpad, int cin, int h, int w, const float* gout,
                        int cout, float* gw, float* gb) {
    const int wp = w + 2;
    const size_t plane_in = static_cast<size_t>(h + 2) * wp;
    const size_t plane_out = static_cast<size_t>(h) * w;
    for (int oc = 0; oc < cout; ++oc) {
        const float* gp = gout + oc * plane_out;
        if (gb) gb[oc] += static_cast<float>(sum_avx2(plane_out, gp));
        for (int ic = 0; ic < cin; ++ic) {
            const float* ip = xpad + ic * plane_in;
            float* wk = gw + ((oc * cin) + ic) * 9;
            __m256 acc[9];
            for (auto& a : acc) a = _mm256_setzero_ps();
            float tail[9] = {0};
            for (int y = 0; y < h; ++y) {
                const float* grow = gp + y * w;
                int x = 0;
                for (; x + 8 <= w; x += 8) {
                    const __m256 g = _mm256_loadu_ps(grow + x);
                    for (int ky = 0; ky < 3; ++ky) {
                        const float* irow = ip + (y + ky) * wp + x;
                        acc[ky * 3 + 0] = _mm256_fmadd_ps(g, _mm256_loadu_ps(irow + 0), acc[ky * 3 + 0]);
                        acc[ky * 3 + 1] = _mm256_fmadd_ps(g, _mm256_loadu_ps(irow + 1), acc[ky * 3 + 1]);
                        acc[ky * 3 + 2] = _mm256_fmadd_ps(g, _mm256_loadu_ps(irow + 2), acc[ky * 3 + 2]);
                    }
                }
                for (; x < w; ++x) {
                    const float g = grow[x];
                    for (int ky = 0; ky < 3; ++ky) {
                        const float* irow = ip + (y + ky) * wp + x;
                        tail[ky * 3 + 0] += g * irow[0];
                        tail[ky * 3 + 1] += g * irow[1];
                        tail[ky * 3 + 2] += g * irow[2];
                    }
                }
            }
            for (int t = 0; t < 9; ++t) {
                __m128 lo = _mm256_castps256_ps128(acc[t]);
                __m128 hi = _mm256_extractf128_ps(acc[t], 1);
                lo = _mm_add_ps(lo, hi);
                lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
                lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
                wk[t] += _mm_cvtss_f32(lo) + tail[t];
            }
        }
    }
}

constexpr Ops kAvx2Ops = {
    "avx2",          axpy_avx2,      lincomb_avx2, affine_avx2,
    lincomb_dd_avx2, affine_dd_avx2, mul_avx2,     silu_avx2,
    silu_bwd_avx2,   sum_avx2,       sumsq_avx2,   dot_avx2,
    conv3x3_avx2,    conv3x3_wgrad_avx2,
};

}  // namespace

const Ops* avx2_ops() {
    if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return &kAvx2Ops;
    return nullptr;
}

}  // namespace ckm::kernels

#else

namespace ckm::kernels {
const Ops* avx2_ops() { return nullptr; }
}  // namespace ckm::kernels

#endif
