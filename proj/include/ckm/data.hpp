// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ckm/tensor.hpp"
#include "ckm/util.hpp"

namespace ckm {

// Pixel encodings. Gain: [-250,-50] dB maps linearly to [0,1].
// AoA: sin(theta) in [-1,1] maps linearly to [0.3,1]; pixel 0 is reserved
// for building cells and the gap (0,0.3) is an invalid encoding.
inline constexpr double kGainDbMin = -250.0;
inline constexpr double kGainDbMax = -50.0;
inline constexpr double kGainDbSpan = 200.0;
inline constexpr double kAoaPixelMin = 0.3;
// slack for float32 rounding of 0.35*s + 0.65 near s = -1
inline constexpr double kAoaPixelTol = 1e-6;

double gain_db_to_pixel(double g_db);
double pixel_to_gain_db(double p);
double aoa_sine_to_pixel(double s, bool is_building);
// nullopt is the building / no-signal marker (pixel 0)
std::optional<double> pixel_to_aoa_sine(double p);

bool valid_aoa_pixel(double p);

// ---------------------------------------------------------------------------

// Two-channel CKM over an H x W cell grid plus the building layout.
struct CkmGrid {
    int height = 0;
    int width = 0;
    std::vector<float> gain;       // H*W pixels in [0,1]; exactly 0 on buildings
    std::vector<float> aoa_sine;   // H*W pixels in {0} u [0.3,1]; 0 on buildings
    std::vector<uint8_t> building; // H*W, nonzero = building cell
    bool has_bs = false;
    uint32_t bs_row = 0, bs_col = 0;

    CkmGrid() = default;
    CkmGrid(int h, int w)
        : height(h), width(w), gain(static_cast<size_t>(h) * w, 0.0f),
          aoa_sine(static_cast<size_t>(h) * w, 0.0f), building(static_cast<size_t>(h) * w, 0) {}

    size_t cells() const { return static_cast<size_t>(height) * width; }
    bool is_building(int r, int c) const { return building[static_cast<size_t>(r) * width + c] != 0; }

    // throws Error(data) when any invariant is violated
    void validate() const;

    Tensor to_tensor() const;  // 2 x H x W: gain plane, aoa plane
};

// Clamp a raw 2-channel tensor back into a valid grid using a known building
// layout (construction outputs are unconstrained floats).
CkmGrid tensor_to_grid(const Tensor& t, const std::vector<uint8_t>& building,
                       bool has_bs = false, uint32_t bs_row = 0, uint32_t bs_col = 0);

// CKMG container (see README for the byte layout)
void save_grid(const CkmGrid& g, const std::string& path);
CkmGrid load_grid(const std::string& path);
std::vector<uint8_t> encode_grid(const CkmGrid& g);
CkmGrid decode_grid(const uint8_t* data, size_t n);

// ---------------------------------------------------------------------------

// Procedural stand-in for a real CKM dataset: log-distance pathloss with
// per-wall attenuation across rectangular buildings plus lognormal shadowing,
// AoA taken from the cell-to-BS geometry.
struct SynthParams {
    int size = 64;  // square grid, must be >= 16 and divisible by 4
    int buildings_min = 3;
    int buildings_max = 8;
    double pathloss_exponent = 2.0;
    double wall_db = 25.0;
    double shadow_db = 4.0;
    uint64_t seed = 0;

    void validate() const;
};

CkmGrid synth_generate(const SynthParams& params);

// ---------------------------------------------------------------------------

struct DatasetSplit {
    std::vector<CkmGrid> train;
    std::vector<CkmGrid> test;
    std::vector<int> train_region_ids;
    std::vector<int> test_region_ids;
};

// Region id of grids[k] is k; ids never appear on both sides.
DatasetSplit split_regions(std::vector<CkmGrid> grids, double ratio, uint64_t seed);

// All *.ckmg files under dir, sorted by filename.
std::vector<std::string> list_grid_files(const std::string& dir);
std::vector<CkmGrid> load_grid_dir(const std::string& dir);

}  // namespace ckm
