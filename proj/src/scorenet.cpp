// SPDX-License-Identifier: Apache-2.0
#include "ckm/scorenet.hpp"

#include <algorithm>
#include <cinttypes>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace ckm {

using kernels::active;

// ---------------------------------------------------------------------------
// Architecture descriptor

void ArchDesc::validate() const {
    if (in_channels < 1) fail_data("ArchDesc: in_channels must be >= 1");
    if (levels() < 2) fail_data("ArchDesc: need at least 2 resolutions");
    if (temb_dim < 4 || temb_dim % 2 != 0) fail_data("ArchDesc: temb_dim must be even and >= 4");
    for (int l = 0; l < levels(); ++l) {
        if (mults[l] < 1) fail_data("ArchDesc: channel multipliers must be >= 1");
        if (width(l) % kGnGroups != 0)
            fail_data("ArchDesc: width " + std::to_string(width(l)) + " not divisible by " +
                      std::to_string(kGnGroups) + " norm groups");
    }
}

std::string ArchDesc::to_string() const {
    std::string m;
    for (size_t k = 0; k < mults.size(); ++k) {
        if (k) m += "-";
        m += std::to_string(mults[k]);
    }
    return "unet_v1:in=" + std::to_string(in_channels) + ",base=" + std::to_string(base_width) +
           ",mults=" + m + ",temb=" + std::to_string(temb_dim);
}

ArchDesc ArchDesc::parse(const std::string& s) {
    const std::string prefix = "unet_v1:";
    if (s.rfind(prefix, 0) != 0) fail_data("ArchDesc: unknown architecture '" + s + "'");
    ArchDesc a;
    a.mults.clear();
    std::stringstream ss(s.substr(prefix.size()));
    std::string field;
    bool got_in = false, got_base = false, got_mults = false, got_temb = false;
    while (std::getline(ss, field, ',')) {
        const size_t eq = field.find('=');
        if (eq == std::string::npos) fail_data("ArchDesc: malformed field '" + field + "'");
        const std::string key = field.substr(0, eq);
        const std::string val = field.substr(eq + 1);
        try {
            if (key == "in") {
                a.in_channels = std::stoi(val);
                got_in = true;
            } else if (key == "base") {
                a.base_width = std::stoi(val);
                got_base = true;
            } else if (key == "temb") {
                a.temb_dim = std::stoi(val);
                got_temb = true;
            } else if (key == "mults") {
                std::stringstream ms(val);
                std::string tok;
                while (std::getline(ms, tok, '-')) a.mults.push_back(std::stoi(tok));
                got_mults = true;
            } else {
                fail_data("ArchDesc: unknown field '" + key + "'");
            }
        } catch (const std::invalid_argument&) {
            fail_data("ArchDesc: bad integer in '" + field + "'");
        } catch (const std::out_of_range&) {
            fail_data("ArchDesc: integer out of range in '" + field + "'");
        }
    }
    if (!(got_in && got_base && got_mults && got_temb)) fail_data("ArchDesc: missing fields in '" + s + "'");
    a.validate();
    return a;
}

// ---------------------------------------------------------------------------
// Parameter enumeration. Order is the serialization order and the init
// RNG draw order; both sides of save/load rebuild it from the descriptor.

namespace {

struct BlockSpec {
    std::string name;
    int cin = 0, cout = 0;
};

struct Plan {
    ArchDesc arch;
    std::vector<BlockSpec> blocks;  // traversal order: enc..., bot..., dec...
};

Plan make_plan(const ArchDesc& arch) {
    arch.validate();
    Plan p;
    p.arch = arch;
    const int L = arch.levels();
    int cur = arch.width(0);  // stem output width
    for (int l = 0; l <= L - 2; ++l) {
        p.blocks.push_back({"enc" + std::to_string(l) + ".0", cur, arch.width(l)});
        p.blocks.push_back({"enc" + std::to_string(l) + ".1", arch.width(l), arch.width(l)});
        cur = arch.width(l);
    }
    p.blocks.push_back({"bot.0", cur, arch.width(L - 1)});
    p.blocks.push_back({"bot.1", arch.width(L - 1), arch.width(L - 1)});
    cur = arch.width(L - 1);
    for (int l = L - 2; l >= 0; --l) {
        p.blocks.push_back({"dec" + std::to_string(l) + ".0", cur + arch.width(l), arch.width(l)});
        p.blocks.push_back({"dec" + std::to_string(l) + ".1", arch.width(l), arch.width(l)});
        cur = arch.width(l);
    }
    return p;
}

struct TensorSpec {
    std::string name;
    std::vector<int> shape;
};

std::vector<TensorSpec> enumerate_tensors(const ArchDesc& arch) {
    const Plan plan = make_plan(arch);
    const int te = arch.temb_dim;
    std::vector<TensorSpec> out;
    out.push_back({"time.fc1.w", {te, te}});
    out.push_back({"time.fc1.b", {te}});
    out.push_back({"time.fc2.w", {te, te}});
    out.push_back({"time.fc2.b", {te}});
    out.push_back({"stem.w", {arch.width(0), arch.in_channels, 3, 3}});
    out.push_back({"stem.b", {arch.width(0)}});
    for (const BlockSpec& b : plan.blocks) {
        out.push_back({b.name + ".conv.w", {b.cout, b.cin, 3, 3}});
        out.push_back({b.name + ".conv.b", {b.cout}});
        out.push_back({b.name + ".gn.g", {b.cout}});
        out.push_back({b.name + ".gn.b", {b.cout}});
        out.push_back({b.name + ".emb.w", {2 * b.cout, te}});
        out.push_back({b.name + ".emb.b", {2 * b.cout}});
    }
    out.push_back({"head.w", {arch.in_channels, arch.width(0), 3, 3}});
    out.push_back({"head.b", {arch.in_channels}});
    return out;
}

size_t shape_elems(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
}

}  // namespace

const ParamTensor& ScoreNetParams::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    fail_data("ScoreNetParams: missing tensor " + name);
}

ParamTensor& ScoreNetParams::find(const std::string& name) {
    for (auto& t : tensors)
        if (t.name == name) return t;
    fail_data("ScoreNetParams: missing tensor " + name);
}

size_t ScoreNetParams::total_params() const {
    size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
}

void ScoreNetParams::validate() const {
    arch.validate();
    if (n_timesteps < 10) fail_data("ScoreNetParams: bad timestep count");
    const std::vector<TensorSpec> expect = enumerate_tensors(arch);
    if (expect.size() != tensors.size())
        fail_data("ScoreNetParams: tensor count " + std::to_string(tensors.size()) + " != expected " +
                  std::to_string(expect.size()));
    for (size_t k = 0; k < expect.size(); ++k) {
        const auto& e = expect[k];
        const auto& t = tensors[k];
        if (t.name != e.name) fail_data("ScoreNetParams: tensor '" + t.name + "' where '" + e.name + "' expected");
        if (t.shape != e.shape || t.v.size() != shape_elems(e.shape))
            fail_data("ScoreNetParams: shape mismatch for tensor '" + t.name + "'");
        for (float f : t.v)
            if (!std::isfinite(f)) fail_data("ScoreNetParams: non-finite value in tensor '" + t.name + "'");
    }
}

ScoreNetParams init_params(const ArchDesc& arch, int n_timesteps, double beta_min,
                           double beta_max, uint64_t seed) {
    ScoreNetParams p;
    p.arch = arch;
    p.n_timesteps = n_timesteps;
    p.beta_min = beta_min;
    p.beta_max = beta_max;
    Rng rng(seed);
    for (const TensorSpec& spec : enumerate_tensors(arch)) {
        ParamTensor t;
        t.name = spec.name;
        t.shape = spec.shape;
        t.v.assign(shape_elems(spec.shape), 0.0f);
        const bool is_conv_w = spec.name.ends_with("conv.w") || spec.name == "stem.w";
        const bool is_fc_w = spec.name == "time.fc1.w" || spec.name == "time.fc2.w";
        const bool is_gn_gamma = spec.name.ends_with("gn.g");
        // zero-init: head (identity score at init), emb projections (blocks
        // start as plain norm->silu), all biases
        if (is_conv_w && spec.name != "head.w") {
            const double fan_in = static_cast<double>(spec.shape[1]) * spec.shape[2] * spec.shape[3];
            const double std = std::sqrt(1.0 / fan_in);
            for (float& f : t.v) f = static_cast<float>(std * rng.normal());
        } else if (is_fc_w) {
            const double std = std::sqrt(1.0 / spec.shape[1]);
            for (float& f : t.v) f = static_cast<float>(std * rng.normal());
        } else if (is_gn_gamma) {
            std::fill(t.v.begin(), t.v.end(), 1.0f);
        }
        p.tensors.push_back(std::move(t));
    }
    return p;
}

// ---------------------------------------------------------------------------
// Layer primitives

namespace {

void pad_chw(const Tensor& x, std::vector<float>& xpad) {
    const int wp = x.w + 2;
    const int hp = x.h + 2;
    xpad.assign(static_cast<size_t>(x.ch) * hp * wp, 0.0f);
    for (int c = 0; c < x.ch; ++c) {
        const float* src = x.plane(c);
        float* dst = xpad.data() + static_cast<size_t>(c) * hp * wp;
        for (int y = 0; y < x.h; ++y)
            std::memcpy(dst + (y + 1) * wp + 1, src + static_cast<size_t>(y) * x.w,
                        sizeof(float) * x.w);
    }
}

Tensor conv3x3_fwd(const Tensor& x, const ParamTensor& w, const ParamTensor& b,
                   std::vector<float>& scratch) {
    const int cout = w.shape[0];
    pad_chw(x, scratch);
    Tensor out(cout, x.h, x.w);
    active().conv3x3(scratch.data(), x.ch, x.h, x.w, w.v.data(), b.v.data(), out.data(), cout);
    return out;
}

// gradient w.r.t. the conv input: conv of the padded output-gradient with
// the channel-transposed, spatially flipped kernel
Tensor conv3x3_dgrad(const Tensor& dout, const ParamTensor& w, std::vector<float>& scratch,
                     std::vector<float>& wt_scratch) {
    const int cout = w.shape[0];
    const int cin = w.shape[1];
    wt_scratch.resize(static_cast<size_t>(cin) * cout * 9);
    for (int oc = 0; oc < cout; ++oc)
        for (int ic = 0; ic < cin; ++ic)
            for (int t = 0; t < 9; ++t)
                wt_scratch[(static_cast<size_t>(ic) * cout + oc) * 9 + (8 - t)] =
                    w.v[(static_cast<size_t>(oc) * cin + ic) * 9 + t];
    pad_chw(dout, scratch);
    Tensor dx(cin, dout.h, dout.w);
    active().conv3x3(scratch.data(), cout, dout.h, dout.w, wt_scratch.data(), nullptr, dx.data(), cin);
    return dx;
}

void silu_fwd(const Tensor& z, Tensor& out) { active().silu(z.size(), z.data(), out.data()); }

// dz = dout * silu'(z)
void silu_bwd(const Tensor& z, const Tensor& dout, Tensor& dz) {
    active().silu_bwd(z.size(), z.data(), dout.data(), dz.data());
}

void silu_fwd_vec(const std::vector<float>& z, std::vector<float>& out) {
    out.resize(z.size());
    active().silu(z.size(), z.data(), out.data());
}

Tensor avgpool2(const Tensor& x) {
    Tensor out(x.ch, x.h / 2, x.w / 2);
    for (int c = 0; c < x.ch; ++c) {
        const float* ip = x.plane(c);
        float* op = out.plane(c);
        for (int y = 0; y < out.h; ++y)
            for (int xx = 0; xx < out.w; ++xx) {
                const float* r0 = ip + (2 * y) * x.w + 2 * xx;
                const float* r1 = r0 + x.w;
                op[y * out.w + xx] = 0.25f * (r0[0] + r0[1] + r1[0] + r1[1]);
            }
    }
    return out;
}

Tensor avgpool2_bwd(const Tensor& dout, int h, int w) {
    Tensor dx(dout.ch, h, w);
    for (int c = 0; c < dout.ch; ++c) {
        const float* gp = dout.plane(c);
        float* dp = dx.plane(c);
        for (int y = 0; y < dout.h; ++y)
            for (int xx = 0; xx < dout.w; ++xx) {
                const float g = 0.25f * gp[y * dout.w + xx];
                float* r0 = dp + (2 * y) * w + 2 * xx;
                float* r1 = r0 + w;
                r0[0] = g;
                r0[1] = g;
                r1[0] = g;
                r1[1] = g;
            }
    }
    return dx;
}

Tensor upsample2(const Tensor& x) {
    Tensor out(x.ch, x.h * 2, x.w * 2);
    for (int c = 0; c < x.ch; ++c) {
        const float* ip = x.plane(c);
        float* op = out.plane(c);
        for (int y = 0; y < out.h; ++y) {
            const float* irow = ip + (y / 2) * x.w;
            float* orow = op + y * out.w;
            for (int xx = 0; xx < out.w; ++xx) orow[xx] = irow[xx / 2];
        }
    }
    return out;
}

Tensor upsample2_bwd(const Tensor& dout) {
    Tensor dx(dout.ch, dout.h / 2, dout.w / 2);
    for (int c = 0; c < dout.ch; ++c) {
        const float* gp = dout.plane(c);
        float* dp = dx.plane(c);
        for (int y = 0; y < dout.h; ++y) {
            const float* grow = gp + y * dout.w;
            float* drow = dp + (y / 2) * dx.w;
            for (int xx = 0; xx < dout.w; ++xx) drow[xx / 2] += grow[xx];
        }
    }
    return dx;
}

Tensor concat_ch(const Tensor& a, const Tensor& b) {
    Tensor out(a.ch + b.ch, a.h, a.w);
    std::memcpy(out.data(), a.data(), sizeof(float) * a.size());
    std::memcpy(out.data() + a.size(), b.data(), sizeof(float) * b.size());
    return out;
}

// y = W x + b, W is (out, in) row-major
void linear_fwd(const ParamTensor& w, const ParamTensor& b, const std::vector<float>& x,
                std::vector<float>& y) {
    const int nout = w.shape[0];
    const int nin = w.shape[1];
    y.resize(nout);
    for (int r = 0; r < nout; ++r)
        y[r] = b.v[r] + static_cast<float>(active().dot(nin, w.v.data() + static_cast<size_t>(r) * nin, x.data()));
}

std::vector<float> sinusoidal_embedding(int i, int dim) {
    const int half = dim / 2;
    std::vector<float> e(dim);
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / half);
        e[k] = static_cast<float>(std::sin(i * freq));
        e[half + k] = static_cast<float>(std::cos(i * freq));
    }
    return e;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

struct BlockTape {
    Tensor x_in;
    Tensor xhat;    // normalized, pre-affine
    Tensor gn_out;  // post gamma/beta
    Tensor z_pre;   // post scale/shift, pre-silu
    Tensor out;
    std::vector<float> inv_std;  // per group
    std::vector<float> scale;    // per-channel scale coefficient from emb
    std::vector<float> shift;
};

struct Tape {
    int i_step = 0;
    Tensor x;
    std::vector<float> t_sin, fc1_pre, fc1_out, temb;
    std::vector<BlockTape> blocks;
    Tensor head_in;
    Tensor out;
    // scratch reused across layers
    std::vector<float> pad_scratch;
    std::vector<float> wt_scratch;
};

Tape* tape_new() { return new Tape(); }
void tape_free(Tape* t) { delete t; }

// ---------------------------------------------------------------------------
// Forward

namespace {

struct ParamView {
    const ParamTensor* conv_w;
    const ParamTensor* conv_b;
    const ParamTensor* gn_g;
    const ParamTensor* gn_b;
    const ParamTensor* emb_w;
    const ParamTensor* emb_b;
};

ParamView block_params(const ScoreNetParams& p, size_t block_idx) {
    // tensors: 4 time + 2 stem + 6 per block + 2 head
    const size_t base = 6 + block_idx * 6;
    return {&p.tensors[base], &p.tensors[base + 1], &p.tensors[base + 2],
            &p.tensors[base + 3], &p.tensors[base + 4], &p.tensors[base + 5]};
}

// conv -> group norm -> time scale/shift -> silu
Tensor block_fwd(const ScoreNetParams& p, size_t block_idx, const Tensor& x,
                 const std::vector<float>& temb, Tape& tape) {
    const ParamView pv = block_params(p, block_idx);
    BlockTape& bt = tape.blocks[block_idx];
    bt.x_in = x;

    Tensor h = conv3x3_fwd(x, *pv.conv_w, *pv.conv_b, tape.pad_scratch);
    const int cout = h.ch;
    const size_t plane = h.plane_size();
    const int per_group = cout / kGnGroups;
    const size_t ng_elems = static_cast<size_t>(per_group) * plane;

    bt.xhat = Tensor(cout, h.h, h.w);
    bt.inv_std.assign(kGnGroups, 0.0f);
    for (int g = 0; g < kGnGroups; ++g) {
        const float* gp = h.plane(g * per_group);
        double mean = active().sum(ng_elems, gp) / static_cast<double>(ng_elems);
        float* xp = bt.xhat.plane(g * per_group);
        active().affine(ng_elems, 1.0f, static_cast<float>(-mean), gp, xp);
        const double var = active().sumsq(ng_elems, xp) / static_cast<double>(ng_elems);
        const float inv_std = static_cast<float>(1.0 / std::sqrt(var + kGnEps));
        bt.inv_std[g] = inv_std;
        active().affine(ng_elems, inv_std, 0.0f, xp, xp);
    }

    bt.gn_out = Tensor(cout, h.h, h.w);
    for (int c = 0; c < cout; ++c)
        active().affine(plane, pv.gn_g->v[c], pv.gn_b->v[c], bt.xhat.plane(c), bt.gn_out.plane(c));

    std::vector<float> emb_out;
    linear_fwd(*pv.emb_w, *pv.emb_b, temb, emb_out);
    bt.scale.assign(emb_out.begin(), emb_out.begin() + cout);
    bt.shift.assign(emb_out.begin() + cout, emb_out.end());

    bt.z_pre = Tensor(cout, h.h, h.w);
    for (int c = 0; c < cout; ++c)
        active().affine(plane, 1.0f + bt.scale[c], bt.shift[c], bt.gn_out.plane(c), bt.z_pre.plane(c));

    bt.out = Tensor(cout, h.h, h.w);
    silu_fwd(bt.z_pre, bt.out);
    return bt.out;
}

void check_input(const ScoreNetParams& p, const Tensor& x, int i) {
    if (x.ch != p.arch.in_channels)
        fail_data("forward: input has " + std::to_string(x.ch) + " channels, architecture expects " +
                  std::to_string(p.arch.in_channels));
    const int div = p.arch.spatial_divisor();
    if (x.h < div || x.w < div || x.h % div != 0 || x.w % div != 0)
        fail_data("forward: spatial dims " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                  " must be divisible by " + std::to_string(div));
    if (i < 1 || i > p.n_timesteps)
        fail_data("forward: timestep " + std::to_string(i) + " outside [1," +
                  std::to_string(p.n_timesteps) + "]");
}

}  // namespace

Tensor forward(const ScoreNetParams& p, const Tensor& x, int i, Tape& tape) {
    check_input(p, x, i);
    const Plan plan = make_plan(p.arch);
    const int L = p.arch.levels();
    tape.i_step = i;
    tape.x = x;
    tape.blocks.assign(plan.blocks.size(), BlockTape{});

    tape.t_sin = sinusoidal_embedding(i, p.arch.temb_dim);
    linear_fwd(p.find("time.fc1.w"), p.find("time.fc1.b"), tape.t_sin, tape.fc1_pre);
    silu_fwd_vec(tape.fc1_pre, tape.fc1_out);
    linear_fwd(p.find("time.fc2.w"), p.find("time.fc2.b"), tape.fc1_out, tape.temb);

    Tensor cur = conv3x3_fwd(x, p.find("stem.w"), p.find("stem.b"), tape.pad_scratch);

    size_t bi = 0;
    std::vector<Tensor> skips;
    for (int l = 0; l <= L - 2; ++l) {
        cur = block_fwd(p, bi++, cur, tape.temb, tape);
        cur = block_fwd(p, bi++, cur, tape.temb, tape);
        skips.push_back(cur);
        cur = avgpool2(cur);
    }
    cur = block_fwd(p, bi++, cur, tape.temb, tape);
    cur = block_fwd(p, bi++, cur, tape.temb, tape);
    for (int l = L - 2; l >= 0; --l) {
        cur = upsample2(cur);
        cur = concat_ch(cur, skips[l]);
        cur = block_fwd(p, bi++, cur, tape.temb, tape);
        cur = block_fwd(p, bi++, cur, tape.temb, tape);
    }
    tape.head_in = cur;
    Tensor out = conv3x3_fwd(cur, p.find("head.w"), p.find("head.b"), tape.pad_scratch);
    tape.out = out;
    return out;
}

Tensor forward(const ScoreNetParams& p, const Tensor& x, int i) {
    TapePtr tape = make_tape();
    return forward(p, x, i, *tape);
}

// ---------------------------------------------------------------------------
// Backward

GradBuffer GradBuffer::zeros_for(const ScoreNetParams& p) {
    GradBuffer b;
    b.g.reserve(p.tensors.size());
    for (const auto& t : p.tensors) b.g.emplace_back(t.size(), 0.0f);
    return b;
}

void GradBuffer::add(const GradBuffer& other) {
    for (size_t k = 0; k < g.size(); ++k)
        active().axpy(g[k].size(), 1.0f, other.g[k].data(), g[k].data());
}

void GradBuffer::scale(float a) {
    for (auto& t : g) active().affine(t.size(), a, 0.0f, t.data(), t.data());
}

namespace {

// returns d x_in; accumulates parameter grads into pg when non-null
Tensor block_bwd(const ScoreNetParams& p, size_t block_idx, const Tensor& dout,
                 GradBuffer* pg, std::vector<float>* dtemb, Tape& tape) {
    const ParamView pv = block_params(p, block_idx);
    BlockTape& bt = tape.blocks[block_idx];
    const int cout = bt.z_pre.ch;
    const size_t plane = bt.z_pre.plane_size();
    const size_t base = 6 + block_idx * 6;

    Tensor dz(cout, bt.z_pre.h, bt.z_pre.w);
    silu_bwd(bt.z_pre, dout, dz);

    // scale/shift
    Tensor dgn(cout, bt.z_pre.h, bt.z_pre.w);
    std::vector<float> demb(2 * static_cast<size_t>(cout));
    for (int c = 0; c < cout; ++c) {
        const float* dzc = dz.plane(c);
        if (pg || dtemb) {
            demb[c] = static_cast<float>(active().dot(plane, dzc, bt.gn_out.plane(c)));          // d scale
            demb[cout + c] = static_cast<float>(active().sum(plane, dzc));                        // d shift
        }
        active().affine(plane, 1.0f + bt.scale[c], 0.0f, dzc, dgn.plane(c));
    }
    if (pg) {
        // emb.w += demb (outer) temb ; emb.b += demb
        const int te = p.arch.temb_dim;
        std::vector<float>& gw = pg->g[base + 4];
        std::vector<float>& gb = pg->g[base + 5];
        for (int r = 0; r < 2 * cout; ++r) {
            active().axpy(te, demb[r], tape.temb.data(), gw.data() + static_cast<size_t>(r) * te);
            gb[r] += demb[r];
        }
    }
    if (dtemb) {
        const int te = p.arch.temb_dim;
        for (int r = 0; r < 2 * cout; ++r)
            active().axpy(te, demb[r], pv.emb_w->v.data() + static_cast<size_t>(r) * te, dtemb->data());
    }

    // group norm
    Tensor dxhat(cout, bt.z_pre.h, bt.z_pre.w);
    for (int c = 0; c < cout; ++c) {
        if (pg) {
            pg->g[base + 2][c] += static_cast<float>(active().dot(plane, dgn.plane(c), bt.xhat.plane(c)));
            pg->g[base + 3][c] += static_cast<float>(active().sum(plane, dgn.plane(c)));
        }
        active().affine(plane, pv.gn_g->v[c], 0.0f, dgn.plane(c), dxhat.plane(c));
    }
    const int per_group = cout / kGnGroups;
    const size_t ng_elems = static_cast<size_t>(per_group) * plane;
    Tensor dconv(cout, bt.z_pre.h, bt.z_pre.w);
    for (int g = 0; g < kGnGroups; ++g) {
        const float* dxp = dxhat.plane(g * per_group);
        const float* xhp = bt.xhat.plane(g * per_group);
        const double s1 = active().sum(ng_elems, dxp);
        const double s2 = active().dot(ng_elems, dxp, xhp);
        const float inv_std = bt.inv_std[g];
        const float a = inv_std;
        const float b = static_cast<float>(-inv_std * s2 / static_cast<double>(ng_elems));
        const float c0 = static_cast<float>(-inv_std * s1 / static_cast<double>(ng_elems));
        float* dcp = dconv.plane(g * per_group);
        active().lincomb(ng_elems, a, dxp, b, xhp, dcp);
        active().affine(ng_elems, 1.0f, c0, dcp, dcp);
    }

    // conv
    if (pg) {
        pad_chw(bt.x_in, tape.pad_scratch);
        active().conv3x3_wgrad(tape.pad_scratch.data(), bt.x_in.ch, bt.x_in.h, bt.x_in.w,
                               dconv.data(), cout, pg->g[base].data(), pg->g[base + 1].data());
    }
    return conv3x3_dgrad(dconv, *pv.conv_w, tape.pad_scratch, tape.wt_scratch);
}

// Walks the decoder/bottleneck/encoder wiring in reverse. dx_out may be null.
void backward(const ScoreNetParams& p, Tape& tape, const Tensor& dout_head,
              GradBuffer* pg, Tensor* dx_out) {
    const Plan plan = make_plan(p.arch);
    const int L = p.arch.levels();
    const size_t nblocks = plan.blocks.size();

    std::vector<float> dtemb_store(p.arch.temb_dim, 0.0f);
    std::vector<float>* dtemb = pg ? &dtemb_store : nullptr;

    // head conv
    if (pg) {
        const size_t head_w = p.tensors.size() - 2;
        pad_chw(tape.head_in, tape.pad_scratch);
        active().conv3x3_wgrad(tape.pad_scratch.data(), tape.head_in.ch, tape.head_in.h,
                               tape.head_in.w, dout_head.data(), dout_head.ch,
                               pg->g[head_w].data(), pg->g[head_w + 1].data());
    }
    Tensor cur = conv3x3_dgrad(dout_head, p.find("head.w"), tape.pad_scratch, tape.wt_scratch);

    size_t bi = nblocks;  // walk blocks in reverse traversal order
    std::vector<Tensor> dskip(static_cast<size_t>(L - 1));
    for (int l = 0; l <= L - 2; ++l) {
        cur = block_bwd(p, --bi, cur, pg, dtemb, tape);
        cur = block_bwd(p, --bi, cur, pg, dtemb, tape);
        // split concat: first part is the upsample branch, rest is the skip
        const int up_ch = p.arch.width(l + 1);
        Tensor dup(up_ch, cur.h, cur.w);
        Tensor dsk(cur.ch - up_ch, cur.h, cur.w);
        std::memcpy(dup.data(), cur.data(), sizeof(float) * dup.size());
        std::memcpy(dsk.data(), cur.data() + dup.size(), sizeof(float) * dsk.size());
        dskip[l] = std::move(dsk);
        cur = upsample2_bwd(dup);
    }
    cur = block_bwd(p, --bi, cur, pg, dtemb, tape);
    cur = block_bwd(p, --bi, cur, pg, dtemb, tape);
    for (int l = L - 2; l >= 0; --l) {
        Tensor d = avgpool2_bwd(cur, dskip[l].h, dskip[l].w);
        active().axpy(d.size(), 1.0f, dskip[l].data(), d.data());
        cur = block_bwd(p, --bi, d, pg, dtemb, tape);
        cur = block_bwd(p, --bi, cur, pg, dtemb, tape);
    }

    // stem conv
    if (pg) {
        pad_chw(tape.x, tape.pad_scratch);
        active().conv3x3_wgrad(tape.pad_scratch.data(), tape.x.ch, tape.x.h, tape.x.w, cur.data(),
                               cur.ch, pg->g[4].data(), pg->g[5].data());
    }
    if (dx_out) *dx_out = conv3x3_dgrad(cur, p.find("stem.w"), tape.pad_scratch, tape.wt_scratch);

    // time MLP
    if (pg) {
        const int te = p.arch.temb_dim;
        const ParamTensor& w2 = p.find("time.fc2.w");
        std::vector<float> dfc1_out(te, 0.0f);
        for (int r = 0; r < te; ++r) {
            const float d = dtemb_store[r];
            pg->g[3][r] += d;
            active().axpy(te, d, tape.fc1_out.data(), pg->g[2].data() + static_cast<size_t>(r) * te);
            active().axpy(te, d, w2.v.data() + static_cast<size_t>(r) * te, dfc1_out.data());
        }
        std::vector<float> dfc1_pre(te);
        for (int r = 0; r < te; ++r) {
            const float z = tape.fc1_pre[r];
            const float s = 1.0f / (1.0f + std::exp(-z));
            dfc1_pre[r] = dfc1_out[r] * s * (1.0f + z * (1.0f - s));
        }
        for (int r = 0; r < te; ++r) {
            pg->g[1][r] += dfc1_pre[r];
            active().axpy(te, dfc1_pre[r], tape.t_sin.data(), pg->g[0].data() + static_cast<size_t>(r) * te);
        }
    }
}

}  // namespace

Tensor vjp_input(const ScoreNetParams& p, Tape& tape, const Tensor& cotangent) {
    require_same_shape(tape.out, cotangent, "vjp_input");
    Tensor dx;
    backward(p, tape, cotangent, nullptr, &dx);
    return dx;
}

Tensor vjp_input(const ScoreNetParams& p, const Tensor& x, int i, const Tensor& cotangent) {
    TapePtr tape = make_tape();
    forward(p, x, i, *tape);
    return vjp_input(p, *tape, cotangent);
}

// ---------------------------------------------------------------------------
// Loss and training

double loss(const ScoreNetParams& p, const Tensor& x0, int i, const Tensor& z0,
            const NoiseSchedule& sched) {
    const Tensor x_i = perturb(x0, i, z0, sched);
    const Tensor target = score_from_noise(z0, i, sched);
    const Tensor pred = forward(p, x_i, i);
    const Tensor diff = lincomb(1.0f, pred, -1.0f, target);
    return active().sumsq(diff.size(), diff.data()) / static_cast<double>(diff.size());
}

namespace {

double sample_loss_and_grad(const ScoreNetParams& p, const TrainSample& s,
                            const NoiseSchedule& sched, GradBuffer& pg, Tape& tape) {
    const Tensor x_i = perturb(*s.x0, s.i, s.z0, sched);
    const Tensor target = score_from_noise(s.z0, s.i, sched);
    const Tensor pred = forward(p, x_i, s.i, tape);
    const Tensor diff = lincomb(1.0f, pred, -1.0f, target);
    const double l = active().sumsq(diff.size(), diff.data()) / static_cast<double>(diff.size());
    Tensor dout = Tensor::zeros_like(diff);
    active().affine(diff.size(), static_cast<float>(2.0 / diff.size()), 0.0f, diff.data(), dout.data());
    backward(p, tape, dout, &pg, nullptr);
    return l;
}

}  // namespace

double grad_params(const ScoreNetParams& p, const std::vector<TrainSample>& batch,
                   const NoiseSchedule& sched, GradBuffer& out, int threads) {
    if (batch.empty()) fail_data("grad_params: empty batch");
    out = GradBuffer::zeros_for(p);
    if (threads <= 0) threads = hardware_threads();
    const int t = static_cast<int>(std::min<size_t>(threads, batch.size()));
    std::vector<GradBuffer> partial(t);
    std::vector<double> losses(t, 0.0);
    parallel_chunks(batch.size(), t, [&](size_t begin, size_t end, int tid) {
        partial[tid] = GradBuffer::zeros_for(p);
        TapePtr tape = make_tape();
        for (size_t k = begin; k < end; ++k)
            losses[tid] += sample_loss_and_grad(p, batch[k], sched, partial[tid], *tape);
    });
    double total_loss = 0.0;
    for (int k = 0; k < t; ++k) {
        out.add(partial[k]);
        total_loss += losses[k];
    }
    const float inv = 1.0f / static_cast<float>(batch.size());
    out.scale(inv);
    return total_loss / static_cast<double>(batch.size());
}

void TrainConfig::validate() const {
    if (batch_size < 1) fail_data("TrainConfig: batch size must be >= 1");
    if (steps < 1) fail_data("TrainConfig: step count must be >= 1");
    if (!(lr > 0.0)) fail_data("TrainConfig: learning rate must be positive");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) fail_data("TrainConfig: EMA decay must lie in [0,1)");
}

ScoreNetParams train(const std::vector<Tensor>& data, const NoiseSchedule& sched,
                     const ArchDesc& arch, const TrainConfig& cfg, const ScoreNetParams* init) {
    cfg.validate();
    if (data.empty()) fail_data("train: empty dataset");
    for (const Tensor& t : data) {
        if (t.ch != arch.in_channels) fail_data("train: sample channel count mismatch");
        if (!t.same_shape(data.front())) fail_data("train: inconsistent sample shapes");
    }
    const int div = arch.spatial_divisor();
    if (data.front().h % div != 0 || data.front().w % div != 0)
        fail_data("train: sample dims must be divisible by " + std::to_string(div));

    uint64_t prior_steps = 0;
    ScoreNetParams params;
    if (init) {
        init->validate();
        if (!(init->arch == arch) || init->n_timesteps != sched.n)
            fail_data("train: init weights descriptor does not match requested configuration");
        params = *init;
        prior_steps = init->trained_steps;
    } else {
        params = init_params(arch, sched.n, sched.beta_min, sched.beta_max, cfg.seed);
    }
    ScoreNetParams ema = params;

    // Adam
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<std::vector<float>> m, v;
    for (const auto& t : params.tensors) {
        m.emplace_back(t.size(), 0.0f);
        v.emplace_back(t.size(), 0.0f);
    }

    Rng rng(derive_seed(cfg.seed, 0xB47C));
    std::ofstream csv;
    if (!cfg.loss_csv.empty()) {
        csv.open(cfg.loss_csv, std::ios::trunc);
        if (!csv) fail_data("train: cannot open loss csv " + cfg.loss_csv);
        csv << "step,loss\n";
    }

    GradBuffer grads;
    double first_loss = 0.0;
    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<TrainSample> batch;
        batch.reserve(cfg.batch_size);
        for (int k = 0; k < cfg.batch_size; ++k) {
            TrainSample s;
            s.x0 = &data[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(data.size()) - 1))];
            s.i = static_cast<int>(rng.uniform_int(1, sched.n));
            s.z0 = randn_like(rng, *s.x0);
            batch.push_back(std::move(s));
        }
        const double step_loss = grad_params(params, batch, sched, grads, cfg.threads);
        if (!std::isfinite(step_loss))
            fail_numeric("train: loss diverged (non-finite) at step " + std::to_string(step));
        if (step == 1) first_loss = step_loss;

        const double bc1 = 1.0 - std::pow(b1, step);
        const double bc2 = 1.0 - std::pow(b2, step);
        for (size_t ti = 0; ti < params.tensors.size(); ++ti) {
            float* w = params.tensors[ti].v.data();
            float* mt = m[ti].data();
            float* vt = v[ti].data();
            const float* g = grads.g[ti].data();
            const size_t n = params.tensors[ti].size();
            for (size_t k = 0; k < n; ++k) {
                mt[k] = static_cast<float>(b1 * mt[k] + (1.0 - b1) * g[k]);
                vt[k] = static_cast<float>(b2 * vt[k] + (1.0 - b2) * static_cast<double>(g[k]) * g[k]);
                const double mhat = mt[k] / bc1;
                const double vhat = vt[k] / bc2;
                w[k] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
        // warmup keeps the EMA from being pinned to the initialization on
        // short runs
        const float d = static_cast<float>(
            std::min(cfg.ema_decay, (1.0 + step) / (10.0 + step)));
        for (size_t ti = 0; ti < params.tensors.size(); ++ti)
            active().lincomb(ema.tensors[ti].size(), d, ema.tensors[ti].v.data(), 1.0f - d,
                             params.tensors[ti].v.data(), ema.tensors[ti].v.data());

        if (csv.is_open() && (step % cfg.log_every == 0 || step == 1 || step == cfg.steps))
            csv << step << "," << step_loss << "\n";
        if (step % cfg.log_every == 0 || step == cfg.steps)
            CKM_LOG_INFO("train step %d/%d loss %.6f", step, cfg.steps, step_loss);
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps) {
            ScoreNetParams snap = ema;
            snap.trained_steps = static_cast<uint64_t>(step);
            save_weights(snap, cfg.checkpoint_prefix + "-" + std::to_string(step) + ".ckmw");
        }
    }
    CKM_LOG_INFO("train done: initial loss %.6f", first_loss);
    ema.trained_steps = prior_steps + static_cast<uint64_t>(cfg.steps);
    return ema;
}

// ---------------------------------------------------------------------------
// CKMW weights container:
//   "CKMW" | u16 version=1 | u32 desc_len | UTF-8 JSON descriptor
//   | u32 tensor_count | per tensor: u16 name_len, name, u8 rank, u32 dims..., f32 data
//   | u32 crc32(all preceding bytes)                          (little-endian)

namespace {
constexpr char kWeightsMagic[4] = {'C', 'K', 'M', 'W'};
constexpr uint16_t kWeightsVersion = 1;
}  // namespace

std::vector<uint8_t> encode_weights(const ScoreNetParams& params) {
    params.validate();
    nlohmann::json desc = {
        {"arch", params.arch.to_string()},
        {"N", params.n_timesteps},
        {"beta_min", params.beta_min},
        {"beta_max", params.beta_max},
        {"channels", params.arch.in_channels},
        {"trained_steps", params.trained_steps},
        {"family", "VP"},
    };
    const std::string desc_str = desc.dump();
    ByteWriter w;
    w.put_bytes(kWeightsMagic, 4);
    w.put_u16(kWeightsVersion);
    w.put_u32(static_cast<uint32_t>(desc_str.size()));
    w.put_string(desc_str);
    w.put_u32(static_cast<uint32_t>(params.tensors.size()));
    for (const auto& t : params.tensors) {
        w.put_u16(static_cast<uint16_t>(t.name.size()));
        w.put_string(t.name);
        w.put_u8(static_cast<uint8_t>(t.shape.size()));
        for (int d : t.shape) w.put_u32(static_cast<uint32_t>(d));
        for (float f : t.v) w.put_f32(f);
    }
    w.put_u32(crc32_of(w.bytes().data(), w.size()));
    return w.take();
}

ScoreNetParams decode_weights(const uint8_t* data, size_t n) {
    if (n < 4 + 2 + 4 + 4 + 4) fail_data("CKMW: file too short");
    const uint32_t stored_crc = [&] {
        ByteReader tail(data + n - 4, 4);
        return tail.get_u32();
    }();
    if (stored_crc != crc32_of(data, n - 4)) fail_data("CKMW: CRC mismatch");

    ByteReader r(data, n - 4);
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::memcmp(magic, kWeightsMagic, 4) != 0) fail_data("CKMW: bad magic");
    const uint16_t version = r.get_u16();
    if (version != kWeightsVersion) fail_data("CKMW: unsupported version " + std::to_string(version));
    const uint32_t desc_len = r.get_u32();
    const std::string desc_str = r.get_string(desc_len);

    ScoreNetParams p;
    try {
        const nlohmann::json desc = nlohmann::json::parse(desc_str);
        p.arch = ArchDesc::parse(desc.at("arch").get<std::string>());
        p.n_timesteps = desc.at("N").get<int>();
        p.beta_min = desc.at("beta_min").get<double>();
        p.beta_max = desc.at("beta_max").get<double>();
        p.trained_steps = desc.at("trained_steps").get<uint64_t>();
        const std::string family = desc.value("family", "VP");
        if (family != "VP") fail_data("CKMW: unsupported SDE family '" + family + "'");
        if (desc.at("channels").get<int>() != p.arch.in_channels)
            fail_data("CKMW: descriptor channel count disagrees with architecture");
    } catch (const nlohmann::json::exception& e) {
        fail_data(std::string("CKMW: bad descriptor JSON: ") + e.what());
    }

    const uint32_t count = r.get_u32();
    for (uint32_t k = 0; k < count; ++k) {
        ParamTensor t;
        const uint16_t name_len = r.get_u16();
        t.name = r.get_string(name_len);
        const uint8_t rank = r.get_u8();
        size_t elems = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            const uint32_t dim = r.get_u32();
            if (dim == 0 || dim > (1u << 24)) fail_data("CKMW: implausible dimension in tensor '" + t.name + "'");
            t.shape.push_back(static_cast<int>(dim));
            elems *= dim;
        }
        t.v.resize(elems);
        for (size_t e = 0; e < elems; ++e) t.v[e] = r.get_f32();
        p.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) fail_data("CKMW: trailing bytes");
    p.validate();  // names/shapes against the descriptor, finiteness
    return p;
}

void save_weights(const ScoreNetParams& params, const std::string& path) {
    const std::vector<uint8_t> bytes = encode_weights(params);
    write_file(path, bytes.data(), bytes.size());
}

ScoreNetParams load_weights(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file(path);
    try {
        return decode_weights(bytes.data(), bytes.size());
    } catch (const Error& e) {
        throw Error(e.code(), path + ": " + e.what());
    }
}

}  // namespace ckm
