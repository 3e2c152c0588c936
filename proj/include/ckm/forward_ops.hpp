// SPDX-License-Identifier: Apache-2.0
//
// Degradation operators A(.) with apply and vector-Jacobian products.
// All operators are shape-stable except downsample; masked entries are
// zeroed, never removed, and observedness is tracked explicitly in the
// operator (never inferred from values, which would alias the building
// sentinel). Nonlinear AoA quantization backpropagates through a
// straight-through estimator.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckm/data.hpp"
#include "ckm/tensor.hpp"

namespace ckm {

enum class OpKind { identity, mask_box, mask_random, downsample, truncate_gain, quantize_aoa, jtqr };

const char* op_kind_name(OpKind k);

// Q_theta of the angular quantizer: theta in [-180,180] degrees, +180 wraps
// to -180; sectors are half-open [theta_k, theta_{k+1}); returns the sector
// center angle in degrees.
double quantize_angle_deg(double theta_deg, int k_sectors);

// Sine-axis quantization. A stored sine determines the angle only up to the
// principal branch, so sectors are restricted to [-90, 90] and looked up by
// pixel value against precomputed float32 interval boundaries; the reported
// value is the (pixel-encoded) sine of the full angular sector's center.
// Interval tables make re-application exactly idempotent.
class SineQuantizer {
  public:
    explicit SineQuantizer(int k_sectors);
    int sectors() const { return k_sectors_; }
    // total on arbitrary input: out-of-range pixels clamp to [0.3, 1]
    float quantize_pixel(float p) const;
    double quantize_sine(double s) const;
    const std::vector<float>& boundaries_px() const { return boundaries_px_; }
    const std::vector<float>& centers_px() const { return centers_px_; }

  private:
    int k_sectors_;
    std::vector<float> boundaries_px_;  // ascending lower edges, first = 0.3
    std::vector<float> centers_px_;
};

class ForwardOp {
  public:
    static ForwardOp identity();
    static ForwardOp mask_box(int top, int left, int box_h, int box_w);
    static ForwardOp mask_random(double ratio, uint64_t seed);
    static ForwardOp downsample(int factor);
    static ForwardOp truncate_gain(double a, double b);
    static ForwardOp quantize_aoa(int k_sectors);
    static ForwardOp jtqr(double a = 0.2, double b = 0.7, int k_sectors = 24);

    OpKind kind() const { return kind_; }
    bool needs_building() const { return kind_ == OpKind::quantize_aoa || kind_ == OpKind::jtqr; }
    bool has_building() const { return !building_.empty(); }
    void set_building(std::vector<uint8_t> mask, int h, int w);
    const std::vector<uint8_t>& building() const { return building_; }

    // deterministic; total on arbitrary float input (estimates during
    // sampling roam outside the valid encodings; values are clamped, and
    // encoding validity is enforced where grids are constructed or loaded)
    Tensor apply(const Tensor& x) const;
    // linear in the cotangent; for the quantizer this is the STE backward
    // (identity on non-building cells)
    Tensor vjp(const Tensor& x, const Tensor& cotangent) const;

    void out_shape(int ch, int h, int w, int& oc, int& oh, int& ow) const;

    nlohmann::json to_json() const;
    static ForwardOp from_json(const nlohmann::json& j);
    static ForwardOp from_json_text(const std::string& text);

    // parameters (meaningful per kind)
    int box_top = 0, box_left = 0, box_h = 0, box_w = 0;
    double ratio = 0.0;
    uint64_t mask_seed = 0;
    int factor = 2;
    double trunc_a = 0.2, trunc_b = 0.7;
    int k_sectors = 24;

  private:
    explicit ForwardOp(OpKind k) : kind_(k) {}
    void check_box(const Tensor& x) const;
    std::vector<uint8_t> masked_cells(int h, int w) const;  // 1 = zeroed
    OpKind kind_;
    std::vector<uint8_t> building_;
    int building_h_ = 0, building_w_ = 0;
};

// y = A(x) + sigma * z with seeded standard-normal z (applied to every
// observed entry, including the quantized AoA channel).
struct Observation {
    Tensor y;
    ForwardOp op;
    double sigma = 0.0;
    uint64_t seed = 0;
    int grid_h = 0, grid_w = 0;  // shape of the underlying x
    std::vector<uint8_t> building;  // side information carried with the observation

    Observation() : op(ForwardOp::identity()) {}
};

Observation observe(const CkmGrid& grid, ForwardOp op, double sigma, uint64_t seed);

// CKMO observation container
std::vector<uint8_t> encode_observation(const Observation& obs);
Observation decode_observation(const uint8_t* data, size_t n);
void save_observation(const Observation& obs, const std::string& path);
Observation load_observation(const std::string& path);

}  // namespace ckm
