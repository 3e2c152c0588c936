// SPDX-License-Identifier: Apache-2.0
#include "ckm/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace ckm {

double gain_db_to_pixel(double g_db) {
    if (std::isnan(g_db)) fail_data("gain_db_to_pixel: NaN input");
    // saturated encoding: out-of-range gains clamp to the representable span
    g_db = std::clamp(g_db, kGainDbMin, kGainDbMax);
    return (g_db - kGainDbMin) / kGainDbSpan;
}

double pixel_to_gain_db(double p) {
    if (!(p >= 0.0 && p <= 1.0)) fail_data("pixel_to_gain_db: pixel out of [0,1]: " + std::to_string(p));
    return kGainDbMin + kGainDbSpan * p;
}

double aoa_sine_to_pixel(double s, bool is_building) {
    if (is_building) return 0.0;
    if (!(s >= -1.0 && s <= 1.0)) fail_data("aoa_sine_to_pixel: sine out of [-1,1]: " + std::to_string(s));
    return 0.35 * s + 0.65;
}

bool valid_aoa_pixel(double p) {
    return p == 0.0 || (p >= kAoaPixelMin - kAoaPixelTol && p <= 1.0 + kAoaPixelTol);
}

std::optional<double> pixel_to_aoa_sine(double p) {
    if (p == 0.0) return std::nullopt;
    if (!valid_aoa_pixel(p))
        fail_data("pixel_to_aoa_sine: pixel " + std::to_string(p) + " falls in the invalid encoding gap (0,0.3) or above 1");
    return std::clamp((p - 0.65) / 0.35, -1.0, 1.0);
}

// ---------------------------------------------------------------------------

void CkmGrid::validate() const {
    if (height < 1 || width < 1) fail_data("CkmGrid: empty grid");
    const size_t n = cells();
    if (gain.size() != n || aoa_sine.size() != n || building.size() != n)
        fail_data("CkmGrid: plane size mismatch");
    for (size_t k = 0; k < n; ++k) {
        const float g = gain[k];
        const float a = aoa_sine[k];
        if (!(g >= 0.0f && g <= 1.0f))
            fail_data("CkmGrid: gain pixel out of [0,1] at cell " + std::to_string(k));
        if (building[k]) {
            if (g != 0.0f) fail_data("CkmGrid: building cell with nonzero gain at cell " + std::to_string(k));
            if (a != 0.0f) fail_data("CkmGrid: building cell with nonzero aoa at cell " + std::to_string(k));
        } else {
            if (!valid_aoa_pixel(a) || a == 0.0f)
                fail_data("CkmGrid: aoa pixel " + std::to_string(a) + " invalid on non-building cell " + std::to_string(k));
        }
    }
    if (has_bs) {
        if (bs_row >= static_cast<uint32_t>(height) || bs_col >= static_cast<uint32_t>(width))
            fail_data("CkmGrid: BS index out of range");
        if (building[static_cast<size_t>(bs_row) * width + bs_col])
            fail_data("CkmGrid: BS placed on a building cell");
    }
}

Tensor CkmGrid::to_tensor() const {
    Tensor t(2, height, width);
    std::copy(gain.begin(), gain.end(), t.plane(0));
    std::copy(aoa_sine.begin(), aoa_sine.end(), t.plane(1));
    return t;
}

CkmGrid tensor_to_grid(const Tensor& t, const std::vector<uint8_t>& building,
                       bool has_bs, uint32_t bs_row, uint32_t bs_col) {
    if (t.ch != 2) fail_data("tensor_to_grid: expected 2 channels, got " + std::to_string(t.ch));
    if (building.size() != t.plane_size()) fail_data("tensor_to_grid: building plane size mismatch");
    CkmGrid g(t.h, t.w);
    g.building = building;
    g.has_bs = has_bs;
    g.bs_row = bs_row;
    g.bs_col = bs_col;
    const float* gp = t.plane(0);
    const float* ap = t.plane(1);
    for (size_t k = 0; k < g.cells(); ++k) {
        if (building[k]) {
            g.gain[k] = 0.0f;
            g.aoa_sine[k] = 0.0f;
        } else {
            g.gain[k] = std::clamp(gp[k], 0.0f, 1.0f);
            g.aoa_sine[k] = std::clamp(ap[k], static_cast<float>(kAoaPixelMin), 1.0f);
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// CKMG format:
//   "CKMG" | u16 version=1 | u16 channels=3 | u32 H | u32 W | u8 flags
//   [u32 bs_row u32 bs_col if flags&1] | f32 gain[H*W] | f32 aoa[H*W]
//   | u8 building[H*W] | u32 crc32(all preceding bytes)     (little-endian)

namespace {
constexpr char kGridMagic[4] = {'C', 'K', 'M', 'G'};
constexpr uint16_t kGridVersion = 1;
}  // namespace

std::vector<uint8_t> encode_grid(const CkmGrid& g) {
    g.validate();
    ByteWriter w;
    w.put_bytes(kGridMagic, 4);
    w.put_u16(kGridVersion);
    w.put_u16(3);
    w.put_u32(static_cast<uint32_t>(g.height));
    w.put_u32(static_cast<uint32_t>(g.width));
    w.put_u8(g.has_bs ? 1 : 0);
    if (g.has_bs) {
        w.put_u32(g.bs_row);
        w.put_u32(g.bs_col);
    }
    for (float f : g.gain) w.put_f32(f);
    for (float f : g.aoa_sine) w.put_f32(f);
    w.put_bytes(g.building.data(), g.building.size());
    w.put_u32(crc32_of(w.bytes().data(), w.size()));
    return w.take();
}

CkmGrid decode_grid(const uint8_t* data, size_t n) {
    if (n < 4 + 2 + 2 + 4 + 4 + 1 + 4) fail_data("CKMG: file too short");
    ByteReader r(data, n);
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::memcmp(magic, kGridMagic, 4) != 0) fail_data("CKMG: bad magic");
    const uint16_t version = r.get_u16();
    if (version != kGridVersion) fail_data("CKMG: unsupported version " + std::to_string(version));
    const uint16_t channels = r.get_u16();
    if (channels != 3) fail_data("CKMG: unexpected channel count " + std::to_string(channels));
    const uint32_t h = r.get_u32();
    const uint32_t w = r.get_u32();
    if (h == 0 || w == 0 || static_cast<uint64_t>(h) * w > (1u << 26))
        fail_data("CKMG: implausible grid size");
    const uint8_t flags = r.get_u8();
    CkmGrid g(static_cast<int>(h), static_cast<int>(w));
    if (flags & 1) {
        g.has_bs = true;
        g.bs_row = r.get_u32();
        g.bs_col = r.get_u32();
    }
    const size_t cells = g.cells();
    for (size_t k = 0; k < cells; ++k) g.gain[k] = r.get_f32();
    for (size_t k = 0; k < cells; ++k) g.aoa_sine[k] = r.get_f32();
    r.get_bytes(g.building.data(), cells);
    const size_t body = r.pos();
    const uint32_t stored = r.get_u32();
    const uint32_t computed = crc32_of(data, body);
    if (stored != computed) fail_data("CKMG: CRC mismatch");
    if (r.remaining() != 0) fail_data("CKMG: trailing bytes");
    g.validate();
    return g;
}

void save_grid(const CkmGrid& g, const std::string& path) {
    const std::vector<uint8_t> bytes = encode_grid(g);
    write_file(path, bytes.data(), bytes.size());
}

CkmGrid load_grid(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file(path);
    try {
        return decode_grid(bytes.data(), bytes.size());
    } catch (const Error& e) {
        throw Error(e.code(), path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------

void SynthParams::validate() const {
    if (size < 16) fail_data("SynthParams: size must be >= 16");
    if (size % 4 != 0) fail_data("SynthParams: size must be divisible by 4");
    if (buildings_min < 0 || buildings_max < buildings_min) fail_data("SynthParams: empty building count range");
    if (pathloss_exponent <= 0) fail_data("SynthParams: pathloss exponent must be positive");
    if (wall_db < 0 || shadow_db < 0) fail_data("SynthParams: attenuation/shadowing must be non-negative");
}

namespace {

// Count building-flag transitions along the cell-center segment (r0,c0)->(r1,c1).
int wall_crossings(const std::vector<uint8_t>& building, int width, int r0, int c0, int r1, int c1) {
    const int steps = 2 * std::max(std::abs(r1 - r0), std::abs(c1 - c0)) + 1;
    int crossings = 0;
    int prev_r = r0, prev_c = c0;
    bool prev_b = building[static_cast<size_t>(r0) * width + c0] != 0;
    for (int s = 1; s <= steps; ++s) {
        const double t = static_cast<double>(s) / steps;
        const int r = static_cast<int>(std::lround(r0 + t * (r1 - r0)));
        const int c = static_cast<int>(std::lround(c0 + t * (c1 - c0)));
        if (r == prev_r && c == prev_c) continue;
        const bool b = building[static_cast<size_t>(r) * width + c] != 0;
        if (b != prev_b) ++crossings;
        prev_r = r;
        prev_c = c;
        prev_b = b;
    }
    return crossings;
}

}  // namespace

CkmGrid synth_generate(const SynthParams& params) {
    params.validate();
    Rng rng(params.seed);
    const int n = params.size;
    CkmGrid g(n, n);

    const int count = static_cast<int>(rng.uniform_int(params.buildings_min, params.buildings_max));
    const int side_lo = std::max(2, n / 10);
    const int side_hi = std::max(3, n / 4);
    for (int b = 0; b < count; ++b) {
        const int bh = static_cast<int>(rng.uniform_int(side_lo, side_hi));
        const int bw = static_cast<int>(rng.uniform_int(side_lo, side_hi));
        const int top = static_cast<int>(rng.uniform_int(0, n - bh));
        const int left = static_cast<int>(rng.uniform_int(0, n - bw));
        for (int r = top; r < top + bh; ++r)
            for (int c = left; c < left + bw; ++c) g.building[static_cast<size_t>(r) * n + c] = 1;
    }

    size_t free_count = 0;
    for (uint8_t b : g.building) free_count += (b == 0);
    if (free_count == 0) fail_data("synth_generate: no free cell for BS placement");
    size_t pick = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(free_count) - 1));
    int bs_r = -1, bs_c = -1;
    for (int r = 0; r < n && bs_r < 0; ++r)
        for (int c = 0; c < n; ++c) {
            if (g.building[static_cast<size_t>(r) * n + c]) continue;
            if (pick-- == 0) {
                bs_r = r;
                bs_c = c;
                break;
            }
        }
    g.has_bs = true;
    g.bs_row = static_cast<uint32_t>(bs_r);
    g.bs_col = static_cast<uint32_t>(bs_c);

    for (int r = 0; r < n; ++r) {
        for (int c = 0; c < n; ++c) {
            const size_t k = static_cast<size_t>(r) * n + c;
            if (g.building[k]) continue;  // both planes stay 0
            const double dy = r - bs_r;
            const double dx = c - bs_c;
            const double d = std::sqrt(dy * dy + dx * dx);
            const int crossings = wall_crossings(g.building, n, bs_r, bs_c, r, c);
            double g_db = -30.0 - 10.0 * params.pathloss_exponent * std::log10(std::max(d, 1.0)) -
                          params.wall_db * crossings + params.shadow_db * rng.normal();
            g.gain[k] = static_cast<float>(gain_db_to_pixel(g_db));
            const double s = (d > 0.0) ? dy / d : 0.0;
            g.aoa_sine[k] = static_cast<float>(aoa_sine_to_pixel(s, false));
        }
    }
    g.validate();
    return g;
}

// ---------------------------------------------------------------------------

DatasetSplit split_regions(std::vector<CkmGrid> grids, double ratio, uint64_t seed) {
    if (grids.size() < 2) fail_data("split_regions: need at least 2 grids");
    if (!(ratio > 0.0 && ratio < 1.0)) fail_data("split_regions: ratio must lie in (0,1)");
    const size_t n = grids.size();
    std::vector<int> order(n);
    for (size_t k = 0; k < n; ++k) order[k] = static_cast<int>(k);
    Rng rng(seed);
    for (size_t k = n - 1; k > 0; --k) {
        const size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(k)));
        std::swap(order[k], order[j]);
    }
    const size_t n_train = static_cast<size_t>(std::floor(ratio * static_cast<double>(n)));
    DatasetSplit out;
    for (size_t k = 0; k < n; ++k) {
        const int id = order[k];
        if (k < n_train) {
            out.train.push_back(std::move(grids[id]));
            out.train_region_ids.push_back(id);
        } else {
            out.test.push_back(std::move(grids[id]));
            out.test_region_ids.push_back(id);
        }
    }
    return out;
}

std::vector<std::string> list_grid_files(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(dir, ec)) {
        if (e.is_regular_file() && e.path().extension() == ".ckmg") files.push_back(e.path().string());
    }
    if (ec) fail_data("cannot list directory " + dir + ": " + ec.message());
    std::sort(files.begin(), files.end());
    return files;
}

std::vector<CkmGrid> load_grid_dir(const std::string& dir) {
    std::vector<CkmGrid> grids;
    for (const std::string& f : list_grid_files(dir)) grids.push_back(load_grid(f));
    if (grids.empty()) fail_data("no .ckmg files found in " + dir);
    return grids;
}

}  // namespace ckm
