// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "ckm/metrics.hpp"
#include "oracles.hpp"

using namespace ckm;

TEST_SUITE_BEGIN("metrics");

TEST_CASE("gain RMSE scaling anchors") {
    Tensor a(2, 4, 4), b(2, 4, 4);
    CHECK(rmse_gain_db(a, b, true) == 0.0);

    for (size_t k = 0; k < a.plane_size(); ++k) a.plane(0)[k] = 0.1f;
    CHECK(rmse_gain_db(a, b, true) == doctest::Approx(20.0));  // 0.1 x 200

    for (size_t k = 0; k < a.plane_size(); ++k) a.plane(0)[k] = 0.05f;
    CHECK(rmse_gain_db(a, b, true) == doctest::Approx(10.0));
}

TEST_CASE("aoa-sine RMSE scaling anchors") {
    Tensor a(2, 4, 4), b(2, 4, 4);
    CHECK(rmse_aoa_sine(a, b, true) == 0.0);

    for (size_t k = 0; k < a.plane_size(); ++k) a.plane(1)[k] = 0.07f;
    CHECK(rmse_aoa_sine(a, b, true) == doctest::Approx(0.2));  // 0.07 x 20/7

    for (size_t k = 0; k < a.plane_size(); ++k) a.plane(1)[k] = 0.7f;
    CHECK(rmse_aoa_sine(a, b, true) == doctest::Approx(2.0));  // full-range pixel error
}

TEST_CASE("building exclusion and empty selection") {
    Tensor a(2, 2, 2), b(2, 2, 2);
    a.plane(0)[0] = 0.2f;  // error only on cell 0
    std::vector<uint8_t> building = {1, 0, 0, 0};

    const double with_b = rmse_gain_db(a, b, true, building);
    const double without_b = rmse_gain_db(a, b, false, building);
    CHECK(with_b == doctest::Approx(200.0 * std::sqrt(0.04 / 4.0)));
    CHECK(without_b == 0.0);  // the only erroneous cell is a building

    const std::vector<uint8_t> all = {1, 1, 1, 1};
    CHECK_THROWS_AS(rmse_gain_db(a, b, false, all), Error);
}

TEST_CASE("hand-computed pixel RMSE oracle") {
    Rng rng(5);
    Tensor a(2, 4, 4), b(2, 4, 4);
    for (auto& f : a.v) f = static_cast<float>(rng.uniform());
    for (auto& f : b.v) f = static_cast<float>(rng.uniform());
    double acc = 0.0;
    for (size_t k = 0; k < a.plane_size(); ++k) {
        const double d = static_cast<double>(a.plane(0)[k]) - b.plane(0)[k];
        acc += d * d;
    }
    const double expect = 200.0 * std::sqrt(acc / 16.0);
    CHECK(rmse_gain_db(a, b, true) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("task parsing and zeta defaults") {
    CHECK(parse_task("ipbox") == TaskKind::ipbox);
    CHECK(parse_task("jtqr") == TaskKind::jtqr);
    CHECK_THROWS_AS(parse_task("blur"), Error);
    CHECK(default_zeta(TaskKind::jtqr) == 10.0);
    CHECK(default_zeta(TaskKind::ipbox) == 13.0);
    CHECK(default_zeta(TaskKind::sr) == 13.0);
    TaskConfig cfg;
    cfg.kind = TaskKind::jtqr;
    CHECK(cfg.effective_zeta() == 10.0);
    cfg.zeta = 4.5;
    CHECK(cfg.effective_zeta() == 4.5);
}

TEST_CASE("operator draws stay within configured ranges") {
    TaskConfig cfg;
    cfg.kind = TaskKind::ipbox;
    cfg.box_min = 3;
    cfg.box_max = 9;
    Rng rng(8);
    for (int t = 0; t < 50; ++t) {
        const ForwardOp op = draw_task_operator(cfg, 16, 16, rng);
        CHECK(op.kind() == OpKind::mask_box);
        CHECK(op.box_h >= 3);
        CHECK(op.box_h <= 9);
        CHECK(op.box_w >= 3);
        CHECK(op.box_w <= 9);
        CHECK(op.box_top + op.box_h <= 16);
        CHECK(op.box_left + op.box_w <= 16);
    }
    cfg.kind = TaskKind::iprandom;
    for (int t = 0; t < 50; ++t) {
        const ForwardOp op = draw_task_operator(cfg, 16, 16, rng);
        CHECK(op.ratio >= cfg.ratio_min);
        CHECK(op.ratio <= cfg.ratio_max);
    }
}

namespace {

ScoreNetParams quick_params(const NoiseSchedule& s) {
    ArchDesc a;
    a.base_width = 8;
    a.mults = {1, 1};
    a.temb_dim = 8;
    return init_params(a, s.n, s.beta_min, s.beta_max, 3);
}

}  // namespace

TEST_CASE("run_task: determinism, aggregate consistency, paired seeds across zeta") {
    const NoiseSchedule s = make_schedule(20, 0.05, 0.4);
    const ScoreNetParams params = quick_params(s);
    std::vector<CkmGrid> grids;
    for (int k = 0; k < 3; ++k) grids.push_back(oracles::small_test_grid(16, 40 + k));

    TaskConfig cfg;
    cfg.kind = TaskKind::ipbox;
    cfg.box_min = 3;
    cfg.box_max = 6;
    cfg.seed = 5;
    cfg.jobs = 2;
    cfg.corrector_steps = 0;

    const MetricsReport a = run_task(cfg, params, s, grids);
    const MetricsReport b = run_task(cfg, params, s, grids);
    CHECK(a.per_grid.size() == 3);
    for (size_t k = 0; k < 3; ++k) {
        CHECK(a.per_grid[k].gain_rmse_db == b.per_grid[k].gain_rmse_db);
        CHECK(a.per_grid[k].aoa_rmse == b.per_grid[k].aoa_rmse);
    }

    double gsum = 0.0;
    for (const auto& g : a.per_grid) gsum += g.gain_rmse_db;
    CHECK(a.mean_gain_rmse_db == doctest::Approx(gsum / 3.0).epsilon(1e-9));

    // paired-seed contract: changing zeta only cannot change the drawn
    // operators; verify via a zeta that is ignored (zeta=0 vs zeta=0 run
    // through the sweep path) and via draw_task_operator determinism
    TaskConfig c2 = cfg;
    c2.zeta = 0.0;
    const MetricsReport r0a = run_task(c2, params, s, grids);
    TaskConfig c3 = cfg;
    c3.zeta = 1e-12;  // effectively zero constraint, same seeds
    const MetricsReport r0b = run_task(c3, params, s, grids);
    for (size_t k = 0; k < 3; ++k)
        CHECK(r0a.per_grid[k].gain_rmse_db ==
              doctest::Approx(r0b.per_grid[k].gain_rmse_db).epsilon(1e-6));
}

TEST_CASE("zeta sweep emits keyed, order-invariant CSV") {
    oracles::TempDir dir("sweep");
    const NoiseSchedule s = make_schedule(20, 0.05, 0.4);
    const ScoreNetParams params = quick_params(s);
    std::vector<CkmGrid> grids;
    for (int k = 0; k < 2; ++k) grids.push_back(oracles::small_test_grid(16, 50 + k));

    TaskConfig cfg;
    cfg.kind = TaskKind::ipbox;
    cfg.box_min = 3;
    cfg.box_max = 6;
    cfg.seed = 5;
    cfg.jobs = 2;
    cfg.corrector_steps = 0;

    CHECK_THROWS_AS(zeta_sweep(cfg, params, s, grids, {1.0, 2.0}), Error);  // needs >= 3

    const auto fwd = zeta_sweep(cfg, params, s, grids, {0.0, 5.0, 13.0});
    const auto rev = zeta_sweep(cfg, params, s, grids, {13.0, 5.0, 0.0});
    CHECK(fwd.size() == 3);
    for (const auto& p : fwd) {
        const auto match = std::find_if(rev.begin(), rev.end(),
                                        [&](const SweepPoint& q) { return q.zeta == p.zeta; });
        REQUIRE(match != rev.end());
        CHECK(match->gain_rmse_db == p.gain_rmse_db);  // keyed by zeta, not position
    }

    const std::string csv_a = dir.file("a.csv");
    const std::string csv_b = dir.file("b.csv");
    write_sweep_csv(csv_a, fwd);
    write_sweep_csv(csv_b, rev);
    CHECK(read_file(csv_a) == read_file(csv_b));
}

TEST_CASE("pgm dump writes a valid header and payload") {
    oracles::TempDir dir("pgm");
    Tensor t(1, 2, 3);
    t.v = {0.0f, 0.5f, 1.0f, -0.2f, 1.4f, 0.25f};
    const std::string path = dir.file("x.pgm");
    write_pgm(path, t.plane(0), 2, 3);
    const auto bytes = read_file(path);
    const std::string head(bytes.begin(), bytes.begin() + 9);
    CHECK(head == "P5\n3 2\n25");  // "P5\n3 2\n255\n"
    CHECK(bytes.size() == 11 + 6);
    CHECK(bytes[11] == 0);
    CHECK(bytes[13] == 255);
    CHECK(bytes[14] == 0);    // clamped below
    CHECK(bytes[15] == 255);  // clamped above
}

TEST_SUITE_END();
