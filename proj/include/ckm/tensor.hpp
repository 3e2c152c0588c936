// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ckm/kernels.hpp"
#include "ckm/util.hpp"

namespace ckm {

// Dense CHW float32 tensor. The two-channel CKM convention is
// channel 0 = gain pixels, channel 1 = AoA-sine pixels.
struct Tensor {
    int ch = 0, h = 0, w = 0;
    std::vector<float> v;

    Tensor() = default;
    Tensor(int c_, int h_, int w_) : ch(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, 0.0f) {}

    size_t size() const { return v.size(); }
    size_t plane_size() const { return static_cast<size_t>(h) * w; }

    float* data() { return v.data(); }
    const float* data() const { return v.data(); }
    float* plane(int c) { return v.data() + static_cast<size_t>(c) * plane_size(); }
    const float* plane(int c) const { return v.data() + static_cast<size_t>(c) * plane_size(); }

    float& at(int c, int y, int x) { return v[(static_cast<size_t>(c) * h + y) * w + x]; }
    float at(int c, int y, int x) const { return v[(static_cast<size_t>(c) * h + y) * w + x]; }

    bool same_shape(const Tensor& o) const { return ch == o.ch && h == o.h && w == o.w; }
    std::string shape_str() const {
        return std::to_string(ch) + "x" + std::to_string(h) + "x" + std::to_string(w);
    }

    static Tensor zeros_like(const Tensor& o) { return Tensor(o.ch, o.h, o.w); }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        fail_data(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

inline Tensor randn_like(Rng& rng, const Tensor& shape) {
    Tensor t = Tensor::zeros_like(shape);
    rng.fill_normal(t.data(), t.size());
    return t;
}

inline double l2_norm(const Tensor& t) { return std::sqrt(kernels::active().sumsq(t.size(), t.data())); }
inline double dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    return kernels::active().dot(a.size(), a.data(), b.data());
}

// out = a*x + b*y elementwise
inline Tensor lincomb(float a, const Tensor& x, float b, const Tensor& y) {
    require_same_shape(x, y, "lincomb");
    Tensor out = Tensor::zeros_like(x);
    kernels::active().lincomb(x.size(), a, x.data(), b, y.data(), out.data());
    return out;
}

// double-arithmetic variant for rounding-sensitive combinations
inline Tensor lincomb_dd(double a, const Tensor& x, double b, const Tensor& y) {
    require_same_shape(x, y, "lincomb");
    Tensor out = Tensor::zeros_like(x);
    kernels::active().lincomb_dd(x.size(), a, x.data(), b, y.data(), out.data());
    return out;
}

inline bool all_finite(const Tensor& t) {
    for (float f : t.v)
        if (!std::isfinite(f)) return false;
    return true;
}

}  // namespace ckm
