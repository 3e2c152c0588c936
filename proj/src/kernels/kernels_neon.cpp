// SPDX-License-Identifier: Apache-2.0
#include "ckm/kernels.hpp"

#if defined(__aarch64__) && defined(__ARM_NEON)

#include <arm_neon.h>

#include <cmath>

namespace ckm::kernels {
namespace {

void axpy_neon(size_t n, float a, const float* x, float* y) {
    const float32x4_t va = vdupq_n_f32(a);
    size_t k = 0;
    for (; k + 4 <= n; k += 4)
        vst1q_f32(y + k, vfmaq_f32(vld1q_f32(y + k), va, vld1q_f32(x + k)));
    for (; k < n; ++k) y[k] += a * x[k];
}

void lincomb_neon(size_t n, float a, const float* x, float b, const float* y, float* out) {
    const float32x4_t va = vdupq_n_f32(a);
    const float32x4_t vb = vdupq_n_f32(b);
    size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        float32x4_t r = vmulq_f32(va, vld1q_f32(x + k));
        r = vfmaq_f32(r, vb, vld1q_f32(y + k));
        vst1q_f32(out + k, r);
    }
    for (; k < n; ++k) out[k] = a * x[k] + b * y[k];
}

void affine_neon(size_t n, float a, float b, const float* x, float* out) {
    const float32x4_t va = vdupq_n_f32(a);
    const float32x4_t vb = vdupq_n_f32(b);
    size_t k = 0;
    for (; k + 4 <= n; k += 4) vst1q_f32(out + k, vfmaq_f32(vb, va, vld1q_f32(x + k)));
    for (; k < n; ++k) out[k] = a * x[k] + b;
}

void mul_neon(size_t n, const float* x, const float* y, float* out) {
    size_t k = 0;
    for (; k + 4 <= n; k += 4) vst1q_f32(out + k, vmulq_f32(vld1q_f32(x + k), vld1q_f32(y + k)));
    for (; k < n; ++k) out[k] = x[k] * y[k];
}

// mul + add, not fused: keeps results bit-identical to the scalar reference
void lincomb_dd_neon(size_t n, double a, const float* x, double b, const float* y, float* out) {
    const float64x2_t va = vdupq_n_f64(a);
    const float64x2_t vb = vdupq_n_f64(b);
    size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        const float32x4_t xf = vld1q_f32(x + k);
        const float32x4_t yf = vld1q_f32(y + k);
        const float64x2_t lo =
            vaddq_f64(vmulq_f64(va, vcvt_f64_f32(vget_low_f32(xf))),
                      vmulq_f64(vb, vcvt_f64_f32(vget_low_f32(yf))));
        const float64x2_t hi =
            vaddq_f64(vmulq_f64(va, vcvt_f64_f32(vget_high_f32(xf))),
                      vmulq_f64(vb, vcvt_f64_f32(vget_high_f32(yf))));
        vst1q_f32(out + k, vcombine_f32(vcvt_f32_f64(lo), vcvt_f32_f64(hi)));
    }
    for (; k < n; ++k) out[k] = static_cast<float>(a * x[k] + b * y[k]);
}

void affine_dd_neon(size_t n, double a, double b, const float* x, float* out) {
    const float64x2_t va = vdupq_n_f64(a);
    const float64x2_t vb = vdupq_n_f64(b);
    size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        const float32x4_t xf = vld1q_f32(x + k);
        const float64x2_t lo = vaddq_f64(vmulq_f64(va, vcvt_f64_f32(vget_low_f32(xf))), vb);
        const float64x2_t hi = vaddq_f64(vmulq_f64(va, vcvt_f64_f32(vget_high_f32(xf))), vb);
        vst1q_f32(out + k, vcombine_f32(vcvt_f32_f64(lo), vcvt_f32_f64(hi)));
    }
    for (; k < n; ++k) out[k] = static_cast<float>(a * x[k] + b);
}

// transcendental: plain loops (libm exp), the NEON win here is marginal
void silu_neon(size_t n, const float* z, float* out) {
    for (size_t k = 0; k < n; ++k) {
        const float s = 1.0f / (1.0f + std::exp(-z[k]));
        out[k] = z[k] * s;
    }
}

void silu_bwd_neon(size_t n, const float* z, const float* dout, float* dz) {
    for (size_t k = 0; k < n; ++k) {
        const float s = 1.0f / (1.0f + std::exp(-z[k]));
        dz[k] = dout[k] * s * (1.0f + z[k] * (1.0f - s));
    }
}

double sum_neon(size_t n, const float* x) {
    float64x2_t acc = vdupq_n_f64(0.0);
    size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        float32x4_t v = vld1q_f32(x + k);
        acc = vaddq_f64(acc, vcvt_f64_f32(vget_low_f32(v)));
        acc = vaddq_f64(acc, vcvt_f64_f32(vget_high_f32(v)));
    }
    double s = vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1);
    for (; k < n; ++k) s += x[k];
    return s;
}

double sumsq_neon(size_t n, const float* x) {
    float64x2_t acc = vdupq_n_f64(0.0);
    size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        float32x4_t v = vld1q_f32(x + k);
        float64x2_t lo = vcvt_f64_f32(vget_low_f32(v));
        float64x2_t hi = vcvt_f64_f32(vget_high_f32(v));
        acc = vfmaq_f64(acc, lo, lo);
        acc = vfmaq_f64(acc, hi, hi);
    }
    double s = vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1);
    for (; k < n; ++k) s += static_cast<double>(x[k]) * x[k];
    return s;
}

double dot_neon(size_t n, const float* x, const float* y) {
    float64x2_t acc = vdupq_n_f64(0.0);
    size_t k = 0;
    for (; k + 4 <= n; k += 4) {
        float32x4_t vx = vld1q_f32(x + k);
        float32x4_t vy = vld1q_f32(y + k);
        acc = vfmaq_f64(acc, vcvt_f64_f32(vget_low_f32(vx)), vcvt_f64_f32(vget_low_f32(vy)));
        acc = vfmaq_f64(acc, vcvt_f64_f32(vget_high_f32(vx)), vcvt_f64_f32(vget_high_f32(vy)));
    }
    double s = vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1);
    for (; k < n; ++k) s += static_cast<double>(x[k]) * y[k];
    return s;
}

void conv3x3_neon(const float* xpad, int cin, int h, int w, const float* wts,
                  const float* bias, float* out, int cout) {
    const int wp = w + 2;
    const size_t plane_in = static_cast<size_t>(h + 2) * wp;
    const size_t plane_out = static_cast<size_t>(h) * w;
    for (int oc = 0; oc < cout; ++oc) {
        float* op = out + oc * plane_out;
        const float b = bias ? bias[oc] : 0.0f;
        const float32x4_t vb = vdupq_n_f32(b);
        const float* wbase = wts + static_cast<size_t>(oc) * cin * 9;
        for (int y = 0; y < h; ++y) {
            int x = 0;
            for (; x + 4 <= w; x += 4) {
                float32x4_t acc = vb;
                for (int ic = 0; ic < cin; ++ic) {
                    const float* wk = wbase + ic * 9;
                    const float* ip = xpad + ic * plane_in + static_cast<size_t>(y) * wp + x;
                    for (int ky = 0; ky < 3; ++ky) {
                        const float* row = ip + ky * wp;
                        acc = vfmaq_n_f32(acc, vld1q_f32(row + 0), wk[ky * 3 + 0]);
                        acc = vfmaq_n_f32(acc, vld1q_f32(row + 1), wk[ky * 3 + 1]);
                        acc = vfmaq_n_f32(acc, vld1q_f32(row + 2), wk[ky * 3 + 2]);
                    }
                }
                vst1q_f32(op + y * w + x, acc);
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

void conv3x3_wgrad_neon(const float* xpad, int cin, int h, int w, const float* gout,
                        int cout, float* gw, float* gb) {
    const int wp = w + 2;
    const size_t plane_in = static_cast<size_t>(h + 2) * wp;
    const size_t plane_out = static_cast<size_t>(h) * w;
    for (int oc = 0; oc < cout; ++oc) {
        const float* gp = gout + oc * plane_out;
        if (gb) gb[oc] += static_cast<float>(sum_neon(plane_out, gp));
        for (int ic = 0; ic < cin; ++ic) {
            const float* ip = xpad + ic * plane_in;
            float* wk = gw + ((oc * cin) + ic) * 9;
            float32x4_t acc[9];
            for (auto& a : acc) a = vdupq_n_f32(0.0f);
            float tail[9] = {0};
            for (int y = 0; y < h; ++y) {
                const float* grow = gp + y * w;
                int x = 0;
                for (; x + 4 <= w; x += 4) {
                    const float32x4_t g = vld1q_f32(grow + x);
                    for (int ky = 0; ky < 3; ++ky) {
                        const float* irow = ip + (y + ky) * wp + x;
                        acc[ky * 3 + 0] = vfmaq_f32(acc[ky * 3 + 0], g, vld1q_f32(irow + 0));
                        acc[ky * 3 + 1] = vfmaq_f32(acc[ky * 3 + 1], g, vld1q_f32(irow + 1));
                        acc[ky * 3 + 2] = vfmaq_f32(acc[ky * 3 + 2], g, vld1q_f32(irow + 2));
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
            for (int t = 0; t < 9; ++t) wk[t] += vaddvq_f32(acc[t]) + tail[t];
        }
    }
}

constexpr Ops kNeonOps = {
    "neon",          axpy_neon,      lincomb_neon, affine_neon,
    lincomb_dd_neon, affine_dd_neon, mul_neon,     silu_neon,
    silu_bwd_neon,   sum_neon,       sumsq_neon,   dot_neon,
    conv3x3_neon,    conv3x3_wgrad_neon,
};

}  // namespace

const Ops* neon_ops() { return &kNeonOps; }

}  // namespace ckm::kernels

#else

namespace ckm::kernels {
const Ops* neon_ops() { return nullptr; }
}  // namespace ckm::kernels

#endif
