// SPDX-License-Identifier: Apache-2.0
//
// Independent test oracles. Everything here derives expected values by a
// different route than the library code it checks: brute-force enumeration,
// naive summation, closed forms.
#pragma once

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ckm/data.hpp"
#include "ckm/tensor.hpp"

namespace oracles {

// Sector lookup by linear scan over explicitly enumerated boundaries
// theta_k = -180 + k*360/K, half-open [theta_k, theta_{k+1}); reported
// angle is the sector center.
inline double quantize_angle_by_enumeration(double theta_deg, int k_sectors) {
    if (theta_deg == 180.0) theta_deg = -180.0;
    const double delta = 360.0 / k_sectors;
    std::vector<double> bounds(k_sectors + 1);
    for (int k = 0; k <= k_sectors; ++k) bounds[k] = -180.0 + k * delta;
    int hit = k_sectors - 1;
    for (int k = 0; k < k_sectors; ++k) {
        if (theta_deg >= bounds[k] && theta_deg < bounds[k + 1]) {
            hit = k;
            break;
        }
    }
    return -180.0 + (hit + 0.5) * delta;
}

// Cumulative product of (1 - beta_i) over a linear ramp, the one-line
// schedule oracle.
inline double alpha_bar_by_product(int n, double beta_min, double beta_max) {
    double prod = 1.0;
    for (int i = 1; i <= n; ++i)
        prod *= 1.0 - (beta_min + (beta_max - beta_min) * static_cast<double>(i - 1) / (n - 1));
    return prod;
}

// Nearest-observed-neighbor fill: every unobserved cell copies the value of
// the closest observed cell (Euclidean on the grid; ties broken by scan
// order). `observed` has one flag per cell.
inline ckm::Tensor nearest_fill(const ckm::Tensor& y, const std::vector<uint8_t>& observed) {
    ckm::Tensor out = y;
    std::vector<std::pair<int, int>> obs_cells;
    for (int r = 0; r < y.h; ++r)
        for (int c = 0; c < y.w; ++c)
            if (observed[static_cast<size_t>(r) * y.w + c]) obs_cells.emplace_back(r, c);
    if (obs_cells.empty()) return out;
    for (int r = 0; r < y.h; ++r) {
        for (int c = 0; c < y.w; ++c) {
            const size_t k = static_cast<size_t>(r) * y.w + c;
            if (observed[k]) continue;
            long best = -1;
            long best_d = 0;
            for (size_t q = 0; q < obs_cells.size(); ++q) {
                const long dr = obs_cells[q].first - r;
                const long dc = obs_cells[q].second - c;
                const long d = dr * dr + dc * dc;
                if (best < 0 || d < best_d) {
                    best = static_cast<long>(q);
                    best_d = d;
                }
            }
            const size_t src = static_cast<size_t>(obs_cells[static_cast<size_t>(best)].first) * y.w +
                               obs_cells[static_cast<size_t>(best)].second;
            for (int ch = 0; ch < y.ch; ++ch) out.plane(ch)[k] = y.plane(ch)[src];
        }
    }
    return out;
}

// Score of N(mu, s0^2 I) pushed through the perturbation kernel at step i:
// x_i ~ N(sqrt(abar) mu, (abar s0^2 + 1 - abar) I).
inline ckm::Tensor analytic_perturbed_gaussian_score(const ckm::Tensor& x, const ckm::Tensor& mu,
                                                     double s0, double alpha_bar) {
    const double var = alpha_bar * s0 * s0 + 1.0 - alpha_bar;
    const double root = std::sqrt(alpha_bar);
    ckm::Tensor out = ckm::Tensor::zeros_like(x);
    for (size_t k = 0; k < x.size(); ++k)
        out.v[k] = static_cast<float>(-(x.v[k] - root * mu.v[k]) / var);
    return out;
}

// ---------------------------------------------------------------------------

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("ckm_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string str() const { return path.string(); }
    std::string file(const std::string& name) const { return (path / name).string(); }

  private:
    static int& counter() {
        static int c = 0;
        return c;
    }
};

inline ckm::CkmGrid small_test_grid(int size = 16, uint64_t seed = 11) {
    ckm::SynthParams p;
    p.size = size;
    p.buildings_min = 1;
    p.buildings_max = 3;
    p.seed = seed;
    return ckm::synth_generate(p);
}

}  // namespace oracles
