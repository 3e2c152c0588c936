// SPDX-License-Identifier: Apache-2.0
//
// Time-conditioned convolutional score network s_theta(x_i, i) with
// hand-rolled reverse-mode gradients: an input VJP for posterior sampling
// and full parameter gradients for training.
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ckm/sde.hpp"
#include "ckm/tensor.hpp"

namespace ckm {

inline constexpr int kGnGroups = 8;
inline constexpr double kGnEps = 1e-5;

// Fixed encoder-decoder topology; the descriptor only scales widths.
// Per resolution: two blocks of conv3x3 -> group norm -> per-channel
// scale/shift from the timestep embedding -> SiLU. 2x average-pool down,
// nearest-neighbor up, skip concatenation, zero-initialized output conv.
struct ArchDesc {
    int in_channels = 2;
    int base_width = 32;
    std::vector<int> mults = {1, 2, 2};
    int temb_dim = 64;

    int levels() const { return static_cast<int>(mults.size()); }
    int width(int level) const { return base_width * mults[level]; }
    int spatial_divisor() const { return 1 << (levels() - 1); }

    void validate() const;
    std::string to_string() const;  // e.g. "unet_v1:in=2,base=32,mults=1-2-2,temb=64"
    static ArchDesc parse(const std::string& s);
    bool operator==(const ArchDesc&) const = default;
};

struct ParamTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> v;

    size_t size() const { return v.size(); }
};

struct ScoreNetParams {
    ArchDesc arch;
    int n_timesteps = 0;  // schedule metadata travels with the weights
    double beta_min = 0.0, beta_max = 0.0;
    uint64_t trained_steps = 0;
    std::vector<ParamTensor> tensors;

    const ParamTensor& find(const std::string& name) const;
    ParamTensor& find(const std::string& name);
    size_t total_params() const;
    NoiseSchedule schedule() const { return make_schedule(n_timesteps, beta_min, beta_max); }
    void validate() const;  // shapes match the descriptor, all values finite
};

// Fresh parameters (zero-init head, zero-init embedding projections).
ScoreNetParams init_params(const ArchDesc& arch, int n_timesteps, double beta_min,
                           double beta_max, uint64_t seed);

// Activation record of one forward pass, consumed by the backward passes.
struct Tape;
Tape* tape_new();
void tape_free(Tape*);

struct TapeDeleter {
    void operator()(Tape* t) const { tape_free(t); }
};
using TapePtr = std::unique_ptr<Tape, TapeDeleter>;
inline TapePtr make_tape() { return TapePtr(tape_new()); }

Tensor forward(const ScoreNetParams& params, const Tensor& x, int i);
Tensor forward(const ScoreNetParams& params, const Tensor& x, int i, Tape& tape);

// cotangent^T * d forward / d x. Overload reusing a tape from forward().
Tensor vjp_input(const ScoreNetParams& params, const Tensor& x, int i, const Tensor& cotangent);
Tensor vjp_input(const ScoreNetParams& params, Tape& tape, const Tensor& cotangent);

// Gradient buffers parallel params.tensors.
struct GradBuffer {
    std::vector<std::vector<float>> g;

    static GradBuffer zeros_for(const ScoreNetParams& p);
    void add(const GradBuffer& other);
    void scale(float a);
};

// Score-matching loss for one sample: mean over elements of
// || score_from_noise(z0,i) - s_theta(perturb(x0,i,z0), i) ||^2
double loss(const ScoreNetParams& params, const Tensor& x0, int i, const Tensor& z0,
            const NoiseSchedule& sched);

struct TrainSample {
    const Tensor* x0;
    int i;
    Tensor z0;
};

// Mean-loss parameter gradients over a batch; also reports the mean loss.
double grad_params(const ScoreNetParams& params, const std::vector<TrainSample>& batch,
                   const NoiseSchedule& sched, GradBuffer& out, int threads = 1);

struct TrainConfig {
    int batch_size = 8;
    int steps = 2000;
    double lr = 2e-4;
    double ema_decay = 0.999;
    uint64_t seed = 0;
    int checkpoint_every = 0;        // 0 disables checkpoints
    std::string checkpoint_prefix;   // "<prefix>=NNN.ckmw"
    std::string loss_csv;            // step,loss rows every log_every steps
    int log_every = 50;
    int threads = 0;                 // 0 = hardware concurrency

    void validate() const;
};

// Algorithm: sample x0 from data, i ~ U{1..N}, z0 ~ N(0,I); regress the
// network on the Tweedie score target; Adam step; EMA of the weights is
// what gets returned. Deterministic for a fixed seed and thread count
// (per-sample gradients are reduced in sample order). Pass `init` to
// resume from existing weights (descriptor must match; Adam state is
// fresh).
ScoreNetParams train(const std::vector<Tensor>& data, const NoiseSchedule& sched,
                     const ArchDesc& arch, const TrainConfig& cfg,
                     const ScoreNetParams* init = nullptr);

// CKMW weights container
std::vector<uint8_t> encode_weights(const ScoreNetParams& params);
ScoreNetParams decode_weights(const uint8_t* data, size_t n);
void save_weights(const ScoreNetParams& params, const std::string& path);
ScoreNetParams load_weights(const std::string& path);

}  // namespace ckm
