// SPDX-License-Identifier: Apache-2.0
#include "ckm/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>

namespace ckm {

namespace {

double pixel_rmse(const float* a, const float* b, size_t n, bool include_buildings,
                  const std::vector<uint8_t>& building) {
    double acc = 0.0;
    size_t count = 0;
    for (size_t k = 0; k < n; ++k) {
        if (!include_buildings && !building.empty() && building[k]) continue;
        const double d = static_cast<double>(a[k]) - b[k];
        acc += d * d;
        ++count;
    }
    if (count == 0) fail_data("rmse: empty cell selection");
    return std::sqrt(acc / static_cast<double>(count));
}

void check_rmse_inputs(const Tensor& x_hat, const Tensor& x_true,
                       const std::vector<uint8_t>& building) {
    require_same_shape(x_hat, x_true, "rmse");
    if (x_hat.ch < 2) fail_data("rmse: expected 2-channel tensors");
    if (!building.empty() && building.size() != x_hat.plane_size())
        fail_data("rmse: building plane size mismatch");
}

}  // namespace

double rmse_gain_db(const Tensor& x_hat, const Tensor& x_true, bool include_buildings,
                    const std::vector<uint8_t>& building) {
    check_rmse_inputs(x_hat, x_true, building);
    return kGainRmseScale *
           pixel_rmse(x_hat.plane(0), x_true.plane(0), x_hat.plane_size(), include_buildings, building);
}

double rmse_aoa_sine(const Tensor& x_hat, const Tensor& x_true, bool include_buildings,
                     const std::vector<uint8_t>& building) {
    check_rmse_inputs(x_hat, x_true, building);
    return kAoaRmseScale *
           pixel_rmse(x_hat.plane(1), x_true.plane(1), x_hat.plane_size(), include_buildings, building);
}

// ---------------------------------------------------------------------------

const char* task_name(TaskKind k) {
    switch (k) {
        case TaskKind::identity: return "identity";
        case TaskKind::ipbox: return "ipbox";
        case TaskKind::iprandom: return "iprandom";
        case TaskKind::sr: return "sr";
        case TaskKind::jtqr: return "jtqr";
    }
    return "?";
}

TaskKind parse_task(const std::string& name) {
    if (name == "identity") return TaskKind::identity;
    if (name == "ipbox") return TaskKind::ipbox;
    if (name == "iprandom") return TaskKind::iprandom;
    if (name == "sr") return TaskKind::sr;
    if (name == "jtqr") return TaskKind::jtqr;
    fail_usage("unknown task '" + name + "' (expected identity|ipbox|iprandom|sr|jtqr)");
}

double default_zeta(TaskKind k) { return k == TaskKind::jtqr ? 10.0 : 13.0; }

void TaskConfig::validate() const {
    if (box_min < 1 || box_max < box_min) fail_data("TaskConfig: empty box side range");
    if (!(ratio_min >= 0.0 && ratio_min <= ratio_max && ratio_max <= 1.0))
        fail_data("TaskConfig: bad mask ratio range");
    if (sr_factor < 1) fail_data("TaskConfig: bad SR factor");
    if (!(trunc_a >= 0.0 && trunc_a < trunc_b && trunc_b <= 1.0)) fail_data("TaskConfig: bad truncation thresholds");
    if (quant_k < 2) fail_data("TaskConfig: bad quantizer sector count");
    if (sigma < 0.0) fail_data("TaskConfig: bad sigma");
    if (corrector_steps < 0) fail_data("TaskConfig: bad corrector count");
    if (!(snr_r > 0.0)) fail_data("TaskConfig: bad snr_r");
}

nlohmann::json TaskConfig::to_json() const {
    return {
        {"task", task_name(kind)},
        {"box_min", box_min},
        {"box_max", box_max},
        {"ratio_min", ratio_min},
        {"ratio_max", ratio_max},
        {"sr_factor", sr_factor},
        {"trunc_a", trunc_a},
        {"trunc_b", trunc_b},
        {"quant_k", quant_k},
        {"sigma", sigma},
        {"zeta", effective_zeta()},
        {"corrector_steps", corrector_steps},
        {"snr_r", snr_r},
        {"detach_score", detach_score},
        {"include_buildings", include_buildings},
        {"seed", seed},
    };
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& g : per_grid)
        per.push_back({{"index", g.index},
                       {"gain_rmse_db", g.gain_rmse_db},
                       {"aoa_sine_rmse", g.aoa_rmse},
                       {"runtime_ms", g.runtime_ms}});
    return {
        {"per_grid", per},
        {"mean_gain_rmse_db", mean_gain_rmse_db},
        {"mean_aoa_sine_rmse", mean_aoa_rmse},
        {"runtime_ms", runtime_ms},
        {"config", config_echo},
    };
}

ForwardOp draw_task_operator(const TaskConfig& cfg, int h, int w, Rng& rng) {
    switch (cfg.kind) {
        case TaskKind::identity:
            return ForwardOp::identity();
        case TaskKind::ipbox: {
            const int hi_h = std::min(cfg.box_max, h);
            const int hi_w = std::min(cfg.box_max, w);
            const int lo_h = std::min(cfg.box_min, hi_h);
            const int lo_w = std::min(cfg.box_min, hi_w);
            const int bh = static_cast<int>(rng.uniform_int(lo_h, hi_h));
            const int bw = static_cast<int>(rng.uniform_int(lo_w, hi_w));
            const int top = static_cast<int>(rng.uniform_int(0, h - bh));
            const int left = static_cast<int>(rng.uniform_int(0, w - bw));
            return ForwardOp::mask_box(top, left, bh, bw);
        }
        case TaskKind::iprandom: {
            const double ratio = rng.uniform(cfg.ratio_min, cfg.ratio_max);
            return ForwardOp::mask_random(ratio, rng.next_u64());
        }
        case TaskKind::sr:
            return ForwardOp::downsample(cfg.sr_factor);
        case TaskKind::jtqr:
            return ForwardOp::jtqr(cfg.trunc_a, cfg.trunc_b, cfg.quant_k);
    }
    fail_data("draw_task_operator: unknown task kind");
}

MetricsReport run_task(const TaskConfig& cfg, const ScoreNetParams& params,
                       const NoiseSchedule& sched, const std::vector<CkmGrid>& test_grids,
                       const RunTaskSink& sink) {
    cfg.validate();
    if (test_grids.empty()) fail_data("run_task: empty test set");
    const auto t0 = std::chrono::steady_clock::now();

    MetricsReport report;
    report.per_grid.resize(test_grids.size());
    const double zeta = cfg.effective_zeta();

    parallel_chunks(test_grids.size(), cfg.jobs, [&](size_t begin, size_t end, int) {
        for (size_t k = begin; k < end; ++k) {
            const CkmGrid& grid = test_grids[k];
            Rng op_rng(derive_seed(cfg.seed, 4 * k + 1));
            ForwardOp op = draw_task_operator(cfg, grid.height, grid.width, op_rng);
            const Observation obs = observe(grid, std::move(op), cfg.sigma, derive_seed(cfg.seed, 4 * k + 2));

            PosteriorConfig pc;
            pc.corrector_steps = cfg.corrector_steps;
            pc.zeta = zeta;
            pc.snr_r = cfg.snr_r;
            pc.sigma = cfg.sigma;
            pc.detach_score = cfg.detach_score;
            pc.seed = derive_seed(cfg.seed, 4 * k + 3);
            const ConstructionResult res = dps_sample(params, sched, obs, pc);

            const Tensor truth = grid.to_tensor();
            GridMetrics m;
            m.index = static_cast<int>(k);
            m.gain_rmse_db = rmse_gain_db(res.x_hat, truth, cfg.include_buildings, grid.building);
            m.aoa_rmse = rmse_aoa_sine(res.x_hat, truth, cfg.include_buildings, grid.building);
            m.runtime_ms = res.runtime_ms;
            report.per_grid[k] = m;
            if (sink) sink(k, obs, truth, res.x_hat);
        }
    });

    double gsum = 0.0, asum = 0.0;
    for (const auto& g : report.per_grid) {
        gsum += g.gain_rmse_db;
        asum += g.aoa_rmse;
    }
    report.mean_gain_rmse_db = gsum / static_cast<double>(report.per_grid.size());
    report.mean_aoa_rmse = asum / static_cast<double>(report.per_grid.size());
    report.runtime_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    report.config_echo = cfg.to_json();
    return report;
}

std::vector<SweepPoint> zeta_sweep(const TaskConfig& cfg, const ScoreNetParams& params,
                                   const NoiseSchedule& sched, const std::vector<CkmGrid>& grids,
                                   const std::vector<double>& zetas) {
    if (zetas.size() < 3) fail_data("zeta_sweep: need at least 3 zeta values");
    std::vector<SweepPoint> points;
    points.reserve(zetas.size());
    for (double z : zetas) {
        TaskConfig c = cfg;
        c.zeta = z;
        const MetricsReport rep = run_task(c, params, sched, grids);
        points.push_back({z, rep.mean_gain_rmse_db, rep.mean_aoa_rmse});
        CKM_LOG_INFO("zeta sweep: zeta=%g gain_rmse=%.4f dB aoa_rmse=%.5f", z, rep.mean_gain_rmse_db,
                     rep.mean_aoa_rmse);
    }
    return points;
}

void write_sweep_csv(const std::string& path, std::vector<SweepPoint> points) {
    std::sort(points.begin(), points.end(),
              [](const SweepPoint& a, const SweepPoint& b) { return a.zeta < b.zeta; });
    std::string out = "zeta,gain_rmse_db,aoa_sine_rmse\n";
    char line[128];
    for (const auto& p : points) {
        std::snprintf(line, sizeof(line), "%.6g,%.9g,%.9g\n", p.zeta, p.gain_rmse_db, p.aoa_rmse);
        out += line;
    }
    write_file(path, out.data(), out.size());
}

void write_pgm(const std::string& path, const float* plane, int h, int w) {
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + static_cast<size_t>(h) * w);
    for (size_t k = 0; k < static_cast<size_t>(h) * w; ++k) {
        const float v = std::clamp(plane[k], 0.0f, 1.0f);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
    write_file(path, out.data(), out.size());
}

}  // namespace ckm
