// SPDX-License-Identifier: Apache-2.0
#include "ckm/forward_ops.hpp"

#include <algorithm>
#include <cmath>

namespace ckm {

namespace {
constexpr double kPi = 3.14159265358979323846;
}  // namespace

const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::identity: return "identity";
        case OpKind::mask_box: return "mask_box";
        case OpKind::mask_random: return "mask_random";
        case OpKind::downsample: return "downsample";
        case OpKind::truncate_gain: return "truncate_gain";
        case OpKind::quantize_aoa: return "quantize_aoa";
        case OpKind::jtqr: return "jtqr";
    }
    return "?";
}

double quantize_angle_deg(double theta_deg, int k_sectors) {
    if (k_sectors < 2) fail_data("quantize_angle_deg: need K >= 2");
    if (theta_deg == 180.0) theta_deg = -180.0;  // same physical direction
    if (!(theta_deg >= -180.0 && theta_deg <= 180.0))
        fail_data("quantize_angle_deg: angle out of [-180,180]: " + std::to_string(theta_deg));
    const double delta = 360.0 / k_sectors;
    int k = static_cast<int>(std::floor((theta_deg + 180.0) / delta));
    k = std::clamp(k, 0, k_sectors - 1);
    return -180.0 + (k + 0.5) * delta;
}

SineQuantizer::SineQuantizer(int k_sectors) : k_sectors_(k_sectors) {
    if (k_sectors < 2) fail_data("SineQuantizer: need K >= 2");
    const double delta = 360.0 / k_sectors;
    for (int k = 0; k < k_sectors; ++k) {
        const double lo = -180.0 + k * delta;
        const double hi = lo + delta;
        // sectors meeting the principal branch [-90, 90]; the branch is
        // closed at +90, sectors are half-open [lo, hi)
        if (hi <= -90.0 || lo > 90.0) continue;
        const double branch_lo = std::max(lo, -90.0);
        const double center = lo + 0.5 * delta;
        boundaries_px_.push_back(
            static_cast<float>(0.35 * std::sin(branch_lo * kPi / 180.0) + 0.65));
        centers_px_.push_back(static_cast<float>(0.35 * std::sin(center * kPi / 180.0) + 0.65));
    }
}

float SineQuantizer::quantize_pixel(float p) const {
    p = std::clamp(p, boundaries_px_.front(), 1.0f);
    // reported values are fixed points: when K is odd the center of a
    // partial branch sector folds exactly onto the neighbouring interval
    // edge, and the half-open lookup would otherwise move it
    if (std::binary_search(centers_px_.begin(), centers_px_.end(), p)) return p;
    const auto it = std::upper_bound(boundaries_px_.begin(), boundaries_px_.end(), p);
    const size_t j = static_cast<size_t>(it - boundaries_px_.begin()) - 1;
    return centers_px_[j];
}

double SineQuantizer::quantize_sine(double s) const {
    const float p = static_cast<float>(0.35 * std::clamp(s, -1.0, 1.0) + 0.65);
    return (static_cast<double>(quantize_pixel(p)) - 0.65) / 0.35;
}

// ---------------------------------------------------------------------------

ForwardOp ForwardOp::identity() { return ForwardOp(OpKind::identity); }

ForwardOp ForwardOp::mask_box(int top, int left, int box_h, int box_w) {
    if (top < 0 || left < 0 || box_h < 0 || box_w < 0) fail_data("mask_box: negative geometry");
    ForwardOp op(OpKind::mask_box);
    op.box_top = top;
    op.box_left = left;
    op.box_h = box_h;
    op.box_w = box_w;
    return op;
}

ForwardOp ForwardOp::mask_random(double ratio, uint64_t seed) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) fail_data("mask_random: ratio must lie in [0,1]");
    ForwardOp op(OpKind::mask_random);
    op.ratio = ratio;
    op.mask_seed = seed;
    return op;
}

ForwardOp ForwardOp::downsample(int factor) {
    if (factor < 1) fail_data("downsample: factor must be >= 1");
    ForwardOp op(OpKind::downsample);
    op.factor = factor;
    return op;
}

ForwardOp ForwardOp::truncate_gain(double a, double b) {
    if (!(a >= 0.0 && a < b && b <= 1.0)) fail_data("truncate_gain: need 0 <= a < b <= 1");
    ForwardOp op(OpKind::truncate_gain);
    op.trunc_a = a;
    op.trunc_b = b;
    return op;
}

ForwardOp ForwardOp::quantize_aoa(int k_sectors) {
    if (k_sectors < 2) fail_data("quantize_aoa: need K >= 2");
    ForwardOp op(OpKind::quantize_aoa);
    op.k_sectors = k_sectors;
    return op;
}

ForwardOp ForwardOp::jtqr(double a, double b, int k_sectors) {
    if (!(a >= 0.0 && a < b && b <= 1.0)) fail_data("jtqr: need 0 <= a < b <= 1");
    if (k_sectors < 2) fail_data("jtqr: need K >= 2");
    ForwardOp op(OpKind::jtqr);
    op.trunc_a = a;
    op.trunc_b = b;
    op.k_sectors = k_sectors;
    return op;
}

void ForwardOp::set_building(std::vector<uint8_t> mask, int h, int w) {
    if (mask.size() != static_cast<size_t>(h) * w) fail_data("set_building: plane size mismatch");
    building_ = std::move(mask);
    building_h_ = h;
    building_w_ = w;
}

void ForwardOp::check_box(const Tensor& x) const {
    if (box_h == 0 || box_w == 0) return;  // zero-area box is the identity
    if (box_top + box_h > x.h || box_left + box_w > x.w)
        fail_data("mask_box: box exceeds grid bounds");
}

std::vector<uint8_t> ForwardOp::masked_cells(int h, int w) const {
    const size_t n = static_cast<size_t>(h) * w;
    std::vector<uint8_t> masked(n, 0);
    const size_t m = static_cast<size_t>(std::floor(ratio * static_cast<double>(n)));
    std::vector<uint32_t> order(n);
    for (size_t k = 0; k < n; ++k) order[k] = static_cast<uint32_t>(k);
    Rng rng(mask_seed);
    for (size_t k = n - 1; k > 0; --k) {
        const size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(k)));
        std::swap(order[k], order[j]);
    }
    for (size_t k = 0; k < m; ++k) masked[order[k]] = 1;
    return masked;
}

void ForwardOp::out_shape(int ch, int h, int w, int& oc, int& oh, int& ow) const {
    oc = ch;
    oh = h;
    ow = w;
    if (kind_ == OpKind::downsample) {
        if (h % factor != 0 || w % factor != 0)
            fail_data("downsample: dims " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by factor " + std::to_string(factor));
        oh = h / factor;
        ow = w / factor;
    }
}

namespace {

void require_building(const ForwardOp& op, const Tensor& x) {
    if (!op.has_building())
        fail_data(std::string(op_kind_name(op.kind())) + ": building mask not attached");
    if (op.building().size() != x.plane_size())
        fail_data(std::string(op_kind_name(op.kind())) + ": building mask shape mismatch");
}

void quantize_plane(const float* in, float* out, const std::vector<uint8_t>& building,
                    size_t n, int k_sectors) {
    const SineQuantizer q(k_sectors);
    for (size_t k = 0; k < n; ++k)
        out[k] = building[k] ? 0.0f : q.quantize_pixel(in[k]);
}

void truncate_plane(const float* in, float* out, size_t n, double a, double b) {
    for (size_t k = 0; k < n; ++k)
        out[k] = std::clamp(in[k], static_cast<float>(a), static_cast<float>(b));
}

}  // namespace

Tensor ForwardOp::apply(const Tensor& x) const {
    switch (kind_) {
        case OpKind::identity:
            return x;
        case OpKind::mask_box: {
            check_box(x);
            Tensor y = x;
            for (int c = 0; c < x.ch; ++c)
                for (int r = box_top; r < box_top + box_h; ++r) {
                    float* row = y.plane(c) + static_cast<size_t>(r) * x.w + box_left;
                    std::fill(row, row + box_w, 0.0f);
                }
            return y;
        }
        case OpKind::mask_random: {
            const std::vector<uint8_t> masked = masked_cells(x.h, x.w);
            Tensor y = x;
            for (int c = 0; c < x.ch; ++c) {
                float* p = y.plane(c);
                for (size_t k = 0; k < y.plane_size(); ++k)
                    if (masked[k]) p[k] = 0.0f;
            }
            return y;
        }
        case OpKind::downsample: {
            int oc, oh, ow;
            out_shape(x.ch, x.h, x.w, oc, oh, ow);
            Tensor y(oc, oh, ow);
            const float inv = 1.0f / static_cast<float>(factor * factor);
            for (int c = 0; c < x.ch; ++c) {
                const float* ip = x.plane(c);
                float* op = y.plane(c);
                for (int r = 0; r < oh; ++r)
                    for (int q = 0; q < ow; ++q) {
                        float acc = 0.0f;
                        for (int dr = 0; dr < factor; ++dr)
                            for (int dq = 0; dq < factor; ++dq)
                                acc += ip[(static_cast<size_t>(r) * factor + dr) * x.w + q * factor + dq];
                        op[static_cast<size_t>(r) * ow + q] = acc * inv;
                    }
            }
            return y;
        }
        case OpKind::truncate_gain: {
            Tensor y = x;
            truncate_plane(x.plane(0), y.plane(0), x.plane_size(), trunc_a, trunc_b);
            return y;
        }
        case OpKind::quantize_aoa: {
            require_building(*this, x);
            Tensor y = x;
            if (x.ch < 2) fail_data("quantize_aoa: expected a 2-channel tensor");
            quantize_plane(x.plane(1), y.plane(1), building_, x.plane_size(), k_sectors);
            return y;
        }
        case OpKind::jtqr: {
            require_building(*this, x);
            if (x.ch < 2) fail_data("jtqr: expected a 2-channel tensor");
            Tensor y = x;
            truncate_plane(x.plane(0), y.plane(0), x.plane_size(), trunc_a, trunc_b);
            quantize_plane(x.plane(1), y.plane(1), building_, x.plane_size(), k_sectors);
            return y;
        }
    }
    fail_data("apply: unknown operator kind");
}

Tensor ForwardOp::vjp(const Tensor& x, const Tensor& cot) const {
    switch (kind_) {
        case OpKind::identity:
            return cot;
        case OpKind::mask_box: {
            check_box(x);
            require_same_shape(x, cot, "mask_box.vjp");
            Tensor g = cot;
            for (int c = 0; c < x.ch; ++c)
                for (int r = box_top; r < box_top + box_h; ++r) {
                    float* row = g.plane(c) + static_cast<size_t>(r) * x.w + box_left;
                    std::fill(row, row + box_w, 0.0f);
                }
            return g;
        }
        case OpKind::mask_random: {
            require_same_shape(x, cot, "mask_random.vjp");
            const std::vector<uint8_t> masked = masked_cells(x.h, x.w);
            Tensor g = cot;
            for (int c = 0; c < x.ch; ++c) {
                float* p = g.plane(c);
                for (size_t k = 0; k < g.plane_size(); ++k)
                    if (masked[k]) p[k] = 0.0f;
            }
            return g;
        }
        case OpKind::downsample: {
            int oc, oh, ow;
            out_shape(x.ch, x.h, x.w, oc, oh, ow);
            if (cot.ch != oc || cot.h != oh || cot.w != ow)
                fail_data("downsample.vjp: cotangent shape mismatch");
            Tensor g(x.ch, x.h, x.w);
            const float inv = 1.0f / static_cast<float>(factor * factor);
            for (int c = 0; c < x.ch; ++c) {
                const float* cp = cot.plane(c);
                float* gp = g.plane(c);
                for (int r = 0; r < oh; ++r)
                    for (int q = 0; q < ow; ++q) {
                        const float v = cp[static_cast<size_t>(r) * ow + q] * inv;
                        for (int dr = 0; dr < factor; ++dr)
                            for (int dq = 0; dq < factor; ++dq)
                                gp[(static_cast<size_t>(r) * factor + dr) * x.w + q * factor + dq] = v;
                    }
            }
            return g;
        }
        case OpKind::truncate_gain: {
            require_same_shape(x, cot, "truncate_gain.vjp");
            Tensor g = cot;
            const float* ip = x.plane(0);
            float* gp = g.plane(0);
            for (size_t k = 0; k < g.plane_size(); ++k) {
                const bool interior = ip[k] > static_cast<float>(trunc_a) && ip[k] < static_cast<float>(trunc_b);
                if (!interior) gp[k] = 0.0f;
            }
            return g;
        }
        case OpKind::quantize_aoa:
        case OpKind::jtqr: {
            require_building(*this, x);
            require_same_shape(x, cot, "quantize.vjp");
            Tensor g = cot;
            if (kind_ == OpKind::jtqr) {
                const float* ip = x.plane(0);
                float* gp = g.plane(0);
                for (size_t k = 0; k < g.plane_size(); ++k) {
                    const bool interior = ip[k] > static_cast<float>(trunc_a) && ip[k] < static_cast<float>(trunc_b);
                    if (!interior) gp[k] = 0.0f;
                }
            }
            // STE: the quantizer backward is the identity on non-building cells
            float* ap = g.plane(1);
            for (size_t k = 0; k < g.plane_size(); ++k)
                if (building_[k]) ap[k] = 0.0f;
            return g;
        }
    }
    fail_data("vjp: unknown operator kind");
}

nlohmann::json ForwardOp::to_json() const {
    nlohmann::json j;
    j["kind"] = op_kind_name(kind_);
    switch (kind_) {
        case OpKind::identity: break;
        case OpKind::mask_box:
            j["top"] = box_top;
            j["left"] = box_left;
            j["height"] = box_h;
            j["width"] = box_w;
            break;
        case OpKind::mask_random:
            j["ratio"] = ratio;
            j["seed"] = mask_seed;
            break;
        case OpKind::downsample:
            j["factor"] = factor;
            break;
        case OpKind::truncate_gain:
            j["a"] = trunc_a;
            j["b"] = trunc_b;
            break;
        case OpKind::quantize_aoa:
            j["k"] = k_sectors;
            break;
        case OpKind::jtqr:
            j["a"] = trunc_a;
            j["b"] = trunc_b;
            j["k"] = k_sectors;
            break;
    }
    return j;
}

ForwardOp ForwardOp::from_json(const nlohmann::json& j) {
    try {
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "identity") return identity();
        if (kind == "mask_box")
            return mask_box(j.at("top").get<int>(), j.at("left").get<int>(), j.at("height").get<int>(),
                            j.at("width").get<int>());
        if (kind == "mask_random") return mask_random(j.at("ratio").get<double>(), j.value("seed", 0ull));
        if (kind == "downsample") return downsample(j.at("factor").get<int>());
        if (kind == "truncate_gain") return truncate_gain(j.at("a").get<double>(), j.at("b").get<double>());
        if (kind == "quantize_aoa") return quantize_aoa(j.at("k").get<int>());
        if (kind == "jtqr")
            return jtqr(j.value("a", 0.2), j.value("b", 0.7), j.value("k", 24));
        fail_data("operator JSON: unknown kind '" + kind + "'");
    } catch (const nlohmann::json::exception& e) {
        fail_data(std::string("operator JSON: ") + e.what());
    }
}

ForwardOp ForwardOp::from_json_text(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) fail_data("operator JSON: parse error");
    return from_json(j);
}

// ---------------------------------------------------------------------------

Observation observe(const CkmGrid& grid, ForwardOp op, double sigma, uint64_t seed) {
    if (sigma < 0.0) fail_data("observe: sigma must be non-negative");
    grid.validate();
    if (op.needs_building() && !op.has_building())
        op.set_building(grid.building, grid.height, grid.width);

    Observation obs;
    obs.grid_h = grid.height;
    obs.grid_w = grid.width;
    obs.sigma = sigma;
    obs.seed = seed;
    obs.building = grid.building;

    const Tensor x = grid.to_tensor();
    obs.y = op.apply(x);
    if (sigma > 0.0) {
        Rng rng(seed);
        for (float& f : obs.y.v) f += static_cast<float>(sigma * rng.normal());
    }
    obs.op = std::move(op);
    return obs;
}

// ---------------------------------------------------------------------------
// CKMO format:
//   "CKMO" | u16 version=1 | u32 json_len | JSON header
//   | u32 yc,yh,yw | f32 y[...]
//   | u8 has_building | [u32 bh,bw | u8 building[...]]
//   | u32 crc32(all preceding)                         (little-endian)

namespace {
constexpr char kObsMagic[4] = {'C', 'K', 'M', 'O'};
constexpr uint16_t kObsVersion = 1;
}  // namespace

std::vector<uint8_t> encode_observation(const Observation& obs) {
    nlohmann::json hdr = {
        {"operator", obs.op.to_json()},
        {"sigma", obs.sigma},
        {"seed", obs.seed},
        {"grid", {{"height", obs.grid_h}, {"width", obs.grid_w}}},
    };
    const std::string hdr_str = hdr.dump();
    ByteWriter w;
    w.put_bytes(kObsMagic, 4);
    w.put_u16(kObsVersion);
    w.put_u32(static_cast<uint32_t>(hdr_str.size()));
    w.put_string(hdr_str);
    w.put_u32(static_cast<uint32_t>(obs.y.ch));
    w.put_u32(static_cast<uint32_t>(obs.y.h));
    w.put_u32(static_cast<uint32_t>(obs.y.w));
    for (float f : obs.y.v) w.put_f32(f);
    w.put_u8(obs.building.empty() ? 0 : 1);
    if (!obs.building.empty()) {
        w.put_u32(static_cast<uint32_t>(obs.grid_h));
        w.put_u32(static_cast<uint32_t>(obs.grid_w));
        w.put_bytes(obs.building.data(), obs.building.size());
    }
    w.put_u32(crc32_of(w.bytes().data(), w.size()));
    return w.take();
}

Observation decode_observation(const uint8_t* data, size_t n) {
    if (n < 4 + 2 + 4 + 12 + 1 + 4) fail_data("CKMO: file too short");
    const uint32_t stored_crc = [&] {
        ByteReader tail(data + n - 4, 4);
        return tail.get_u32();
    }();
    if (stored_crc != crc32_of(data, n - 4)) fail_data("CKMO: CRC mismatch");
    ByteReader r(data, n - 4);
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::memcmp(magic, kObsMagic, 4) != 0) fail_data("CKMO: bad magic");
    if (r.get_u16() != kObsVersion) fail_data("CKMO: unsupported version");
    const uint32_t hdr_len = r.get_u32();
    const std::string hdr_str = r.get_string(hdr_len);

    Observation obs;
    try {
        const nlohmann::json hdr = nlohmann::json::parse(hdr_str);
        obs.op = ForwardOp::from_json(hdr.at("operator"));
        obs.sigma = hdr.at("sigma").get<double>();
        obs.seed = hdr.at("seed").get<uint64_t>();
        obs.grid_h = hdr.at("grid").at("height").get<int>();
        obs.grid_w = hdr.at("grid").at("width").get<int>();
    } catch (const nlohmann::json::exception& e) {
        fail_data(std::string("CKMO: bad header JSON: ") + e.what());
    }
    const uint32_t yc = r.get_u32();
    const uint32_t yh = r.get_u32();
    const uint32_t yw = r.get_u32();
    if (yc == 0 || yc > 16 || static_cast<uint64_t>(yh) * yw > (1u << 26)) fail_data("CKMO: implausible y shape");
    obs.y = Tensor(static_cast<int>(yc), static_cast<int>(yh), static_cast<int>(yw));
    for (float& f : obs.y.v) f = r.get_f32();
    if (r.get_u8()) {
        const uint32_t bh = r.get_u32();
        const uint32_t bw = r.get_u32();
        if (bh != static_cast<uint32_t>(obs.grid_h) || bw != static_cast<uint32_t>(obs.grid_w))
            fail_data("CKMO: building plane shape disagrees with grid header");
        obs.building.resize(static_cast<size_t>(bh) * bw);
        r.get_bytes(obs.building.data(), obs.building.size());
    }
    if (r.remaining() != 0) fail_data("CKMO: trailing bytes");
    if (obs.op.needs_building()) {
        if (obs.building.empty()) fail_data("CKMO: operator requires a building plane but none stored");
        obs.op.set_building(obs.building, obs.grid_h, obs.grid_w);
    }
    return obs;
}

void save_observation(const Observation& obs, const std::string& path) {
    const std::vector<uint8_t> bytes = encode_observation(obs);
    write_file(path, bytes.data(), bytes.size());
}

Observation load_observation(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file(path);
    try {
        return decode_observation(bytes.data(), bytes.size());
    } catch (const Error& e) {
        throw Error(e.code(), path + ": " + e.what());
    }
}

}  // namespace ckm
