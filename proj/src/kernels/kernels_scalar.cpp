// SPDX-License-Identifier: Apache-2.0
//
// Reference kernels. Deliberately plain loops: these define the semantics
// the SIMD variants are tested against.
#include "ckm/kernels.hpp"

#include <cmath>

namespace ckm::kernels {
namespace {

void axpy_scalar(size_t n, float a, const float* x, float* y) {
    for (size_t k = 0; k < n; ++k) y[k] += a * x[k];
}

void lincomb_scalar(size_t n, float a, const float* x, float b, const float* y, float* out) {
    for (size_t k = 0; k < n; ++k) out[k] = a * x[k] + b * y[k];
}

void affine_scalar(size_t n, float a, float b, const float* x, float* out) {
    for (size_t k = 0; k < n; ++k) out[k] = a * x[k] + b;
}

void mul_scalar(size_t n, const float* x, const float* y, float* out) {
    for (size_t k = 0; k < n; ++k) out[k] = x[k] * y[k];
}

void lincomb_dd_scalar(size_t n, double a, const float* x, double b, const float* y, float* out) {
    for (size_t k = 0; k < n; ++k) out[k] = static_cast<float>(a * x[k] + b * y[k]);
}

void silu_scalar(size_t n, const float* z, float* out) {
    for (size_t k = 0; k < n; ++k) {
        const float s = 1.0f / (1.0f + std::exp(-z[k]));
        out[k] = z[k] * s;
    }
}

void silu_bwd_scalar(size_t n, const float* z, const float* dout, float* dz) {
    for (size_t k = 0; k < n; ++k) {
        const float s = 1.0f / (1.0f + std::exp(-z[k]));
        dz[k] = dout[k] * s * (1.0f + z[k] * (1.0f - s));
    }
}

void affine_dd_scalar(size_t n, double a, double b, const float* x, float* out) {
    for (size_t k = 0; k < n; ++k) out[k] = static_cast<float>(a * x[k] + b);
}

double sum_scalar(size_t n, const float* x) {
    double s = 0.0;
    for (size_t k = 0; k < n; ++k) s += x[k];
    return s;
}

double sumsq_scalar(size_t n, const float* x) {
    double s = 0.0;
    for (size_t k = 0; k < n; ++k) s += static_cast<double>(x[k]) * x[k];
    return s;
}

double dot_scalar(size_t n, const float* x, const float* y) {
    double s = 0.0;
    for (size_t k = 0; k < n; ++k) s += static_cast<double>(x[k]) * y[k];
    return s;
}

void conv3x3_scalar(const float* xpad, int cin, int h, int w, const float* wts,
                    const float* bias, float* out, int cout) {
    const int wp = w + 2;
    const size_t plane_in = static_cast<size_t>(h + 2) * wp;
    const size_t plane_out = static_cast<size_t>(h) * w;
    for (int oc = 0; oc < cout; ++oc) {
        float* op = out + oc * plane_out;
        const float b = bias ? bias[oc] : 0.0f;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) op[y * w + x] = b;
        for (int ic = 0; ic < cin; ++ic) {
            const float* ip = xpad + ic * plane_in;
            const float* wk = wts + ((oc * cin) + ic) * 9;
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    float acc = 0.0f;
                    for (int ky = 0; ky < 3; ++ky) {
                        const float* row = ip + (y + ky) * wp + x;
                        acc += wk[ky * 3 + 0] * row[0];
                        acc += wk[ky * 3 + 1] * row[1];
                        acc += wk[ky * 3 + 2] * row[2];
                    }
                    op[y * w + x] += acc;
                }
            }
        }
    }
}

void conv3x3_wgrad_scalar(const float* xpad, int cin, int h, int w, const float* gout,
                          int cout, float* gw, float* gb) {
    const int wp = w + 2;
    const size_t plane_in = static_cast<size_t>(h + 2) * wp;
    const size_t plane_out = static_cast<size_t>(h) * w;
    for (int oc = 0; oc < cout; ++oc) {
        const float* gp = gout + oc * plane_out;
        if (gb) {
            double s = 0.0;
            for (size_t k = 0; k < plane_out; ++k) s += gp[k];
            gb[oc] += static_cast<float>(s);
        }
        for (int ic = 0; ic < cin; ++ic) {
            const float* ip = xpad + ic * plane_in;
            float* wk = gw + ((oc * cin) + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    double s = 0.0;
                    for (int y = 0; y < h; ++y) {
                        const float* grow = gp + y * w;
                        const float* irow = ip + (y + ky) * wp + kx;
                        for (int x = 0; x < w; ++x) s += static_cast<double>(grow[x]) * irow[x];
                    }
                    wk[ky * 3 + kx] += static_cast<float>(s);
                }
            }
        }
    }
}

constexpr Ops kScalarOps = {
    "scalar",          axpy_scalar,      lincomb_scalar, affine_scalar,
    lincomb_dd_scalar, affine_dd_scalar, mul_scalar,     silu_scalar,
    silu_bwd_scalar,   sum_scalar,       sumsq_scalar,   dot_scalar,
    conv3x3_scalar,    conv3x3_wgrad_scalar,
};

}  // namespace

const Ops& scalar_ops() { return kScalarOps; }

}  // namespace ckm::kernels
