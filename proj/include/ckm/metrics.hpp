// SPDX-License-Identifier: Apache-2.0
//
// Task configurations (IPbox, IPrandom, SR, JTQR), RMSE in physical units,
// zeta sweeps with paired seeds, and report emission.
#pragma once

#include <nlohmann/json.hpp>

#include "ckm/data.hpp"
#include "ckm/posterior.hpp"

namespace ckm {

// pixel-to-physical RMSE scalings
inline constexpr double kGainRmseScale = 200.0;      // (-50) - (-250)
inline constexpr double kAoaRmseScale = 20.0 / 7.0;  // (1 - (-1)) / (1 - 0.3)

double rmse_gain_db(const Tensor& x_hat, const Tensor& x_true, bool include_buildings,
                    const std::vector<uint8_t>& building = {});
double rmse_aoa_sine(const Tensor& x_hat, const Tensor& x_true, bool include_buildings,
                     const std::vector<uint8_t>& building = {});

enum class TaskKind { identity, ipbox, iprandom, sr, jtqr };
const char* task_name(TaskKind k);
TaskKind parse_task(const std::string& name);
double default_zeta(TaskKind k);  // 10 for JTQR, 13 otherwise

struct TaskConfig {
    TaskKind kind = TaskKind::ipbox;
    // box side lengths in pixels, sampled uniformly
    int box_min = 5, box_max = 50;
    // random-mask ratio range: [5x5/128^2, 50x50/128^2]
    double ratio_min = 25.0 / 16384.0, ratio_max = 2500.0 / 16384.0;
    int sr_factor = 2;
    double trunc_a = 0.2, trunc_b = 0.7;
    int quant_k = 24;
    double sigma = 0.01;
    double zeta = -1.0;  // negative = per-task default
    int corrector_steps = 1;
    double snr_r = 0.16;
    bool detach_score = false;
    bool include_buildings = true;  // Tables-style RMSE keeps building cells
    uint64_t seed = 0;
    int jobs = 0;  // parallel grid evaluations; 0 = hardware

    double effective_zeta() const { return zeta < 0.0 ? default_zeta(kind) : zeta; }
    void validate() const;
    nlohmann::json to_json() const;
};

struct GridMetrics {
    int index = 0;
    double gain_rmse_db = 0.0;
    double aoa_rmse = 0.0;
    double runtime_ms = 0.0;
};

struct MetricsReport {
    std::vector<GridMetrics> per_grid;
    double mean_gain_rmse_db = 0.0;
    double mean_aoa_rmse = 0.0;
    double runtime_ms = 0.0;
    nlohmann::json config_echo;

    nlohmann::json to_json() const;
};

// Operator instance for one test grid; rng supplies every random parameter.
ForwardOp draw_task_operator(const TaskConfig& cfg, int h, int w, Rng& rng);

// Optional per-grid sink (e.g. image dumps); invoked from worker threads,
// once per grid, with distinct indices.
using RunTaskSink =
    std::function<void(size_t index, const Observation& obs, const Tensor& truth, const Tensor& x_hat)>;

// Observe + construct + score every test grid. Per-grid randomness is
// derived from (cfg.seed, grid index) only, so two configs differing in
// zeta alone see identical operator instances and noise (paired seeds).
MetricsReport run_task(const TaskConfig& cfg, const ScoreNetParams& params,
                       const NoiseSchedule& sched, const std::vector<CkmGrid>& test_grids,
                       const RunTaskSink& sink = {});

struct SweepPoint {
    double zeta = 0.0;
    double gain_rmse_db = 0.0;
    double aoa_rmse = 0.0;
};

std::vector<SweepPoint> zeta_sweep(const TaskConfig& cfg, const ScoreNetParams& params,
                                   const NoiseSchedule& sched, const std::vector<CkmGrid>& grids,
                                   const std::vector<double>& zetas);

// rows sorted by zeta: results are keyed, not positional
void write_sweep_csv(const std::string& path, std::vector<SweepPoint> points);

// grayscale P5 dump of one [0,1] pixel plane
void write_pgm(const std::string& path, const float* plane, int h, int w);

}  // namespace ckm
