// SPDX-License-Identifier: Apache-2.0
//
// ckm — single entry point for the CKM construction workflow:
// synthesize data, train the prior, serve/publish/fetch weights,
// observe, construct, evaluate, sweep.
#include <CLI11.hpp>
#include <csignal>
#include <cstdio>

#include "ckm/cloud_edge.hpp"
#include "ckm/metrics.hpp"

using nlohmann::json;

namespace {

volatile std::sig_atomic_t g_stop_requested = 0;
void handle_signal(int) { g_stop_requested = 1; }

void write_echo(const std::string& path, const json& j) {
    const std::string text = j.dump(2) + "\n";
    ckm::write_file(path, text.data(), text.size());
}

std::string read_json_arg(const std::string& arg) {
    if (!arg.empty() && arg[0] == '@') {
        const auto bytes = ckm::read_file(arg.substr(1));
        return std::string(bytes.begin(), bytes.end());
    }
    return arg;
}

ckm::ArchDesc arch_from_flags(int base, const std::string& mults_csv, int temb) {
    ckm::ArchDesc arch;
    arch.base_width = base;
    arch.temb_dim = temb;
    arch.mults.clear();
    std::stringstream ss(mults_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) arch.mults.push_back(std::stoi(tok));
    arch.validate();
    return arch;
}

std::vector<double> parse_zetas(const std::string& csv) {
    std::vector<double> zetas;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) zetas.push_back(std::stod(tok));
    if (zetas.empty()) ckm::fail_usage("--zetas: empty list");
    return zetas;
}

// ---------------------------------------------------------------------------

int cmd_synth(int count, int size, uint64_t seed, const std::string& out_dir,
              int buildings_min, int buildings_max, double wall_db, double shadow_db,
              double exponent) {
    if (count < 1) ckm::fail_usage("count must be >= 1");
    ckm::make_dirs(out_dir);
    json files = json::array();
    for (int k = 0; k < count; ++k) {
        ckm::SynthParams sp;
        sp.size = size;
        sp.buildings_min = buildings_min;
        sp.buildings_max = buildings_max;
        sp.wall_db = wall_db;
        sp.shadow_db = shadow_db;
        sp.pathloss_exponent = exponent;
        sp.seed = ckm::derive_seed(seed, static_cast<uint64_t>(k));
        const ckm::CkmGrid g = ckm::synth_generate(sp);
        char name[32];
        std::snprintf(name, sizeof name, "grid_%04d.ckmg", k);
        ckm::save_grid(g, out_dir + "/" + name);
        files.push_back(name);
    }
    const json manifest = {{"count", count}, {"size", size}, {"seed", seed}, {"files", files}};
    write_echo(out_dir + "/manifest.json", manifest);
    const json echo = {{"command", "synth"},
                       {"count", count},
                       {"size", size},
                       {"seed", seed},
                       {"buildings_min", buildings_min},
                       {"buildings_max", buildings_max},
                       {"wall_db", wall_db},
                       {"shadow_db", shadow_db},
                       {"pathloss_exponent", exponent},
                       {"out", out_dir}};
    write_echo(out_dir + "/config.json", echo);
    CKM_LOG_INFO("synth: wrote %d grids to %s", count, out_dir.c_str());
    return 0;
}

int cmd_train(const std::string& data_dir, int steps, int batch, int n_timesteps,
              double beta_min, double beta_max, double lr, double ema, uint64_t seed,
              const std::string& out, const std::string& init_path, int jobs,
              int checkpoint_every, const ckm::ArchDesc& arch) {
    if (beta_max <= 0.0) beta_max = ckm::default_beta_max(n_timesteps);
    const ckm::NoiseSchedule sched = ckm::make_schedule(n_timesteps, beta_min, beta_max);

    const std::vector<ckm::CkmGrid> grids = ckm::load_grid_dir(data_dir);
    std::vector<ckm::Tensor> data;
    data.reserve(grids.size());
    for (const auto& g : grids) data.push_back(g.to_tensor());

    ckm::TrainConfig cfg;
    cfg.batch_size = batch;
    cfg.steps = steps;
    cfg.lr = lr;
    cfg.ema_decay = ema;
    cfg.seed = seed;
    cfg.threads = jobs;
    cfg.loss_csv = out + ".loss.csv";
    cfg.checkpoint_every = checkpoint_every;
    cfg.checkpoint_prefix = out;

    const ckm::ScoreNetParams* init = nullptr;
    ckm::ScoreNetParams init_storage;
    if (!init_path.empty()) {
        init_storage = ckm::load_weights(init_path);
        if (!(init_storage.arch == arch) || init_storage.n_timesteps != n_timesteps)
            ckm::fail_data("--init: descriptor mismatch (weights are " + init_storage.arch.to_string() +
                           ", N=" + std::to_string(init_storage.n_timesteps) + ")");
        init = &init_storage;
    }

    const ckm::ScoreNetParams params = ckm::train(data, sched, arch, cfg, init);
    ckm::save_weights(params, out);

    const json echo = {{"command", "train"},   {"data", data_dir},
                       {"steps", steps},       {"batch", batch},
                       {"n_timesteps", n_timesteps}, {"beta_min", beta_min},
                       {"beta_max", beta_max}, {"lr", lr},
                       {"ema", ema},           {"seed", seed},
                       {"arch", arch.to_string()}, {"init", init_path},
                       {"jobs", jobs},         {"out", out}};
    write_echo(out + ".config.json", echo);
    CKM_LOG_INFO("train: wrote %s (%zu parameters)", out.c_str(), params.total_params());
    return 0;
}

int cmd_observe(const std::string& grid_path, const std::string& op_json, double sigma,
                uint64_t seed, const std::string& out) {
    const ckm::CkmGrid grid = ckm::load_grid(grid_path);
    ckm::ForwardOp op = ckm::ForwardOp::from_json_text(read_json_arg(op_json));
    const ckm::Observation obs = ckm::observe(grid, std::move(op), sigma, seed);
    ckm::save_observation(obs, out);
    const json echo = {{"command", "observe"}, {"grid", grid_path},
                       {"operator", obs.op.to_json()}, {"sigma", sigma},
                       {"seed", seed},         {"out", out}};
    write_echo(out + ".config.json", echo);
    return 0;
}

int cmd_construct(const std::string& weights_path, const std::string& server,
                  const std::string& version, const std::string& obs_path,
                  const std::string& op_json, double zeta, int corrector_steps, double snr_r,
                  bool detach_score, uint64_t seed, const std::string& cache_dir,
                  const std::string& out) {
    if (!weights_path.empty() && !server.empty())
        ckm::fail_usage("--weights and --server are mutually exclusive");
    if (weights_path.empty() && server.empty())
        ckm::fail_usage("one of --weights or --server is required");

    ckm::Observation obs = ckm::load_observation(obs_path);
    const std::string op_text = op_json.empty() ? "" : read_json_arg(op_json);
    if (!op_text.empty()) {
        ckm::ForwardOp op = ckm::ForwardOp::from_json_text(op_text);
        if (op.needs_building()) {
            if (obs.building.empty())
                ckm::fail_data("operator requires a building plane but the observation has none");
            op.set_building(obs.building, obs.grid_h, obs.grid_w);
        }
        obs.op = std::move(op);
    }

    ckm::PosteriorConfig cfg;
    cfg.corrector_steps = corrector_steps;
    cfg.snr_r = snr_r;
    cfg.detach_score = detach_score;
    cfg.sigma = obs.sigma;
    cfg.seed = seed;
    // per-task default unless given: 10 for JTQR, 13 otherwise
    cfg.zeta = zeta >= 0.0 ? zeta : (obs.op.kind() == ckm::OpKind::jtqr ? 10.0 : 13.0);

    ckm::EdgeResult res;
    if (!weights_path.empty()) {
        const ckm::ScoreNetParams params = ckm::load_weights(weights_path);
        res = ckm::construct_to_files(params, obs, cfg, out);
    } else {
        res = ckm::edge_construct(server, version, obs_path, op_text, cfg, cache_dir, out);
    }

    const json echo = {{"command", "construct"}, {"weights", weights_path},
                       {"server", server},       {"version", version},
                       {"obs", obs_path},        {"operator", obs.op.to_json()},
                       {"zeta", cfg.zeta},       {"corrector_steps", corrector_steps},
                       {"snr_r", snr_r},         {"detach_score", detach_score},
                       {"seed", seed},           {"out", out}};
    write_echo(out + ".config.json", echo);
    return 0;
}

int cmd_eval(const std::string& weights_path, const std::string& testset, const std::string& task,
             double zeta, double sigma, int count, int corrector_steps, double snr_r,
             bool detach_score, bool exclude_buildings, uint64_t seed, int jobs,
             const std::string& out, const std::string& images_dir) {
    const ckm::ScoreNetParams params = ckm::load_weights(weights_path);
    const ckm::NoiseSchedule sched = params.schedule();
    std::vector<ckm::CkmGrid> grids = ckm::load_grid_dir(testset);
    if (count > 0 && static_cast<size_t>(count) < grids.size()) grids.resize(count);

    ckm::TaskConfig cfg;
    cfg.kind = ckm::parse_task(task);
    cfg.zeta = zeta;
    cfg.sigma = sigma;
    cfg.corrector_steps = corrector_steps;
    cfg.snr_r = snr_r;
    cfg.detach_score = detach_score;
    cfg.seed = seed;
    cfg.jobs = jobs;
    cfg.include_buildings = !exclude_buildings;

    ckm::RunTaskSink sink;
    if (!images_dir.empty()) {
        ckm::make_dirs(images_dir);
        sink = [&images_dir](size_t idx, const ckm::Observation& obs, const ckm::Tensor& truth,
                             const ckm::Tensor& x_hat) {
            char base[512];
            std::snprintf(base, sizeof base, "%s/grid_%04zu", images_dir.c_str(), idx);
            ckm::write_pgm(std::string(base) + "_obs_gain.pgm", obs.y.plane(0), obs.y.h, obs.y.w);
            ckm::write_pgm(std::string(base) + "_obs_aoa.pgm", obs.y.plane(1), obs.y.h, obs.y.w);
            ckm::write_pgm(std::string(base) + "_true_gain.pgm", truth.plane(0), truth.h, truth.w);
            ckm::write_pgm(std::string(base) + "_true_aoa.pgm", truth.plane(1), truth.h, truth.w);
            ckm::write_pgm(std::string(base) + "_recon_gain.pgm", x_hat.plane(0), x_hat.h, x_hat.w);
            ckm::write_pgm(std::string(base) + "_recon_aoa.pgm", x_hat.plane(1), x_hat.h, x_hat.w);
        };
    }

    const ckm::MetricsReport report = ckm::run_task(cfg, params, sched, grids, sink);
    write_echo(out, report.to_json());
    const json echo = {{"command", "eval"},   {"weights", weights_path}, {"testset", testset},
                       {"task", task},        {"zeta", cfg.effective_zeta()}, {"sigma", sigma},
                       {"count", count},      {"seed", seed},            {"jobs", jobs},
                       {"out", out},          {"images", images_dir}};
    write_echo(out + ".config.json", echo);
    std::printf("%s gain_rmse_db=%.6f aoa_sine_rmse=%.6f over %zu grids\n", task.c_str(),
                report.mean_gain_rmse_db, report.mean_aoa_rmse, report.per_grid.size());
    return 0;
}

int cmd_sweep(const std::string& weights_path, const std::string& testset, const std::string& task,
              const std::string& zetas_csv, double sigma, int count, int corrector_steps,
              double snr_r, uint64_t seed, int jobs, const std::string& out) {
    const ckm::ScoreNetParams params = ckm::load_weights(weights_path);
    const ckm::NoiseSchedule sched = params.schedule();
    std::vector<ckm::CkmGrid> grids = ckm::load_grid_dir(testset);
    if (count > 0 && static_cast<size_t>(count) < grids.size()) grids.resize(count);

    ckm::TaskConfig cfg;
    cfg.kind = ckm::parse_task(task);
    cfg.sigma = sigma;
    cfg.corrector_steps = corrector_steps;
    cfg.snr_r = snr_r;
    cfg.seed = seed;
    cfg.jobs = jobs;

    const std::vector<double> zetas = parse_zetas(zetas_csv);
    const auto points = ckm::zeta_sweep(cfg, params, sched, grids, zetas);
    ckm::write_sweep_csv(out, points);
    const json echo = {{"command", "sweep"}, {"weights", weights_path}, {"testset", testset},
                       {"task", task},       {"zetas", zetas},          {"sigma", sigma},
                       {"count", count},     {"seed", seed},            {"jobs", jobs},
                       {"out", out}};
    write_echo(out + ".config.json", echo);
    return 0;
}

int cmd_publish(const std::string& registry_dir, const std::string& weights_path,
                const std::string& version, int64_t timestamp) {
    auto registry = ckm::Registry::open(registry_dir);
    std::optional<int64_t> ts;
    if (timestamp >= 0) ts = timestamp;
    const ckm::ModelManifest m = registry->publish(weights_path, version, ts);
    std::printf("%s\n", m.to_json().dump().c_str());
    return 0;
}

int cmd_serve(const std::string& registry_dir, const std::string& bind) {
    auto registry = ckm::Registry::open(registry_dir);
    auto server = ckm::serve(registry, bind);
    std::printf("listening on port %u\n", server->port());
    std::fflush(stdout);
    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);
    while (!g_stop_requested) {
        struct timespec ts = {0, 100 * 1000 * 1000};
        nanosleep(&ts, nullptr);
    }
    CKM_LOG_INFO("shutting down");
    server->stop();
    return 0;
}

int cmd_fetch(const std::string& server, const std::string& version, const std::string& cache_dir) {
    const ckm::FetchResult res = ckm::fetch_model(server, version, cache_dir);
    const json out = {{"path", res.path},
                      {"manifest", res.manifest.to_json()},
                      {"bytes_sent", res.stats.bytes_sent},
                      {"bytes_received", res.stats.bytes_received},
                      {"payload_transferred", res.stats.payload_transferred},
                      {"offline_cache_hit", res.stats.offline_cache_hit}};
    std::printf("%s\n", out.dump().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CKM construction: score-based prior training in the cloud, "
                 "plug-and-play posterior construction at the edge"};
    app.require_subcommand(1);
    app.fallthrough();  // global --seed / --log-level may follow the subcommand

    uint64_t seed = 0;
    std::string log_level = "info";
    app.add_option("--seed", seed, "global RNG seed")->capture_default_str();
    app.add_option("--log-level", log_level, "debug|info|warn|error")->capture_default_str();

    // synth
    auto* synth = app.add_subcommand("synth", "generate synthetic CKM grids");
    int sy_count = 10, sy_size = 64, sy_bmin = 3, sy_bmax = 8;
    double sy_wall = 25.0, sy_shadow = 4.0, sy_exp = 2.0;
    std::string sy_out = "data";
    synth->add_option("--count", sy_count, "number of grids")->capture_default_str();
    synth->add_option("--size", sy_size, "grid side length (divisible by 4)")->capture_default_str();
    synth->add_option("--buildings-min", sy_bmin)->capture_default_str();
    synth->add_option("--buildings-max", sy_bmax)->capture_default_str();
    synth->add_option("--wall-db", sy_wall, "per-wall attenuation in dB")->capture_default_str();
    synth->add_option("--shadow-db", sy_shadow, "shadowing std in dB")->capture_default_str();
    synth->add_option("--exponent", sy_exp, "pathloss exponent")->capture_default_str();
    synth->add_option("--out", sy_out, "output directory")->capture_default_str();

    // train
    auto* train = app.add_subcommand("train", "train the score prior on unlabeled grids");
    std::string tr_data, tr_out = "model.ckmw", tr_init, tr_mults = "1,2,2";
    int tr_steps = 2000, tr_batch = 8, tr_n = 1000, tr_jobs = 0, tr_ckpt = 0, tr_base = 32, tr_temb = 64;
    double tr_bmin = 1e-4, tr_bmax = -1.0, tr_lr = 2e-4, tr_ema = 0.999;
    train->add_option("--data", tr_data, "directory of .ckmg files")->required();
    train->add_option("--steps", tr_steps)->capture_default_str();
    train->add_option("--batch", tr_batch)->capture_default_str();
    train->add_option("--n-timesteps", tr_n)->capture_default_str();
    train->add_option("--beta-min", tr_bmin)->capture_default_str();
    train->add_option("--beta-max", tr_bmax, "default scales 0.02 by 1000/N")->capture_default_str();
    train->add_option("--lr", tr_lr)->capture_default_str();
    train->add_option("--ema", tr_ema)->capture_default_str();
    train->add_option("--arch-base", tr_base, "base channel width")->capture_default_str();
    train->add_option("--arch-mults", tr_mults, "channel multipliers, csv")->capture_default_str();
    train->add_option("--temb-dim", tr_temb)->capture_default_str();
    train->add_option("--init", tr_init, "resume from weights with matching descriptor");
    train->add_option("--jobs", tr_jobs, "gradient worker threads (0 = hardware)")->capture_default_str();
    train->add_option("--checkpoint-every", tr_ckpt)->capture_default_str();
    train->add_option("--out", tr_out)->capture_default_str();

    // observe
    auto* observe = app.add_subcommand("observe", "apply a degradation operator to a grid");
    std::string ob_grid, ob_op, ob_out = "obs.ckmo";
    double ob_sigma = 0.01;
    observe->add_option("--grid", ob_grid, ".ckmg input")->required();
    observe->add_option("--op-json", ob_op, "operator JSON (inline or @file)")->required();
    observe->add_option("--sigma", ob_sigma, "measurement noise std (pixel units)")->capture_default_str();
    observe->add_option("--out", ob_out)->capture_default_str();

    // construct
    auto* construct = app.add_subcommand("construct", "posterior construction from an observation");
    std::string co_weights, co_server, co_version = "latest", co_obs, co_op, co_out = "recon.ckmg";
    std::string co_cache = ckm::default_cache_dir();
    double co_zeta = -1.0, co_snr = 0.16;
    int co_m = 1;
    bool co_detach = false;
    construct->add_option("--weights", co_weights, "local .ckmw weights");
    construct->add_option("--server", co_server, "host:port of a model registry");
    construct->add_option("--version", co_version, "model version or 'latest'")->capture_default_str();
    construct->add_option("--obs", co_obs, ".ckmo observation")->required();
    construct->add_option("--op-json", co_op, "override the embedded operator (inline or @file)");
    construct->add_option("--zeta", co_zeta, "constraint strength (default 13, JTQR 10)");
    construct->add_option("--corrector-steps", co_m)->capture_default_str();
    construct->add_option("--snr-r", co_snr)->capture_default_str();
    construct->add_flag("--detach-score", co_detach, "drop the score-Jacobian term (ablation)");
    construct->add_option("--cache-dir", co_cache)->capture_default_str();
    construct->add_option("--out", co_out)->capture_default_str();

    // eval
    auto* eval = app.add_subcommand("eval", "score a task configuration on a test set");
    std::string ev_weights, ev_testset, ev_task = "ipbox", ev_out = "report.json", ev_images;
    double ev_zeta = -1.0, ev_sigma = 0.01, ev_snr = 0.16;
    int ev_count = 0, ev_m = 1, ev_jobs = 0;
    bool ev_detach = false, ev_nobuild = false;
    eval->add_option("--weights", ev_weights)->required();
    eval->add_option("--testset", ev_testset, "directory of .ckmg files")->required();
    eval->add_option("--task", ev_task, "identity|ipbox|iprandom|sr|jtqr")->capture_default_str();
    eval->add_option("--zeta", ev_zeta, "constraint strength (default 13, JTQR 10)");
    eval->add_option("--sigma", ev_sigma)->capture_default_str();
    eval->add_option("--count", ev_count, "evaluate only the first N grids (0 = all)")->capture_default_str();
    eval->add_option("--corrector-steps", ev_m)->capture_default_str();
    eval->add_option("--snr-r", ev_snr)->capture_default_str();
    eval->add_flag("--detach-score", ev_detach);
    eval->add_flag("--exclude-buildings", ev_nobuild, "drop building cells from the RMSE");
    eval->add_option("--jobs", ev_jobs)->capture_default_str();
    eval->add_option("--out", ev_out, "report JSON path")->capture_default_str();
    eval->add_option("--images", ev_images, "directory for PGM obs/truth/recon dumps");

    // sweep
    auto* sweep = app.add_subcommand("sweep", "zeta sensitivity sweep (paired seeds)");
    std::string sw_weights, sw_testset, sw_task = "ipbox", sw_zetas = "0,5,10,13,20,100",
                sw_out = "sweep.csv";
    double sw_sigma = 0.01, sw_snr = 0.16;
    int sw_count = 0, sw_m = 1, sw_jobs = 0;
    sweep->add_option("--weights", sw_weights)->required();
    sweep->add_option("--testset", sw_testset)->required();
    sweep->add_option("--task", sw_task)->capture_default_str();
    sweep->add_option("--zetas", sw_zetas, "comma-separated zeta values")->capture_default_str();
    sweep->add_option("--sigma", sw_sigma)->capture_default_str();
    sweep->add_option("--count", sw_count)->capture_default_str();
    sweep->add_option("--corrector-steps", sw_m)->capture_default_str();
    sweep->add_option("--snr-r", sw_snr)->capture_default_str();
    sweep->add_option("--jobs", sw_jobs)->capture_default_str();
    sweep->add_option("--out", sw_out, "CSV path")->capture_default_str();

    // publish
    auto* publish = app.add_subcommand("publish", "add a weights file to a registry");
    std::string pb_registry, pb_weights, pb_version;
    int64_t pb_ts = -1;
    publish->add_option("--registry", pb_registry)->required();
    publish->add_option("--weights", pb_weights)->required();
    publish->add_option("--version", pb_version)->required();
    publish->add_option("--timestamp", pb_ts, "unix seconds (default: now)");

    // serve
    auto* serve = app.add_subcommand("serve", "serve a registry over the CKMP protocol");
    std::string sv_registry, sv_bind = "127.0.0.1:7447";
    serve->add_option("--registry", sv_registry)->required();
    serve->add_option("--bind", sv_bind, "host:port (port 0 = ephemeral)")->capture_default_str();

    // fetch
    auto* fetch = app.add_subcommand("fetch", "fetch model weights into the edge cache");
    std::string fe_server, fe_version = "latest", fe_cache = ckm::default_cache_dir();
    fetch->add_option("--server", fe_server, "host:port")->required();
    fetch->add_option("--version", fe_version)->capture_default_str();
    fetch->add_option("--cache-dir", fe_cache)->capture_default_str();

    try {
        app.parse(argc, argv);
        ckm::set_log_level(ckm::parse_log_level(log_level));

        if (*synth)
            return cmd_synth(sy_count, sy_size, seed, sy_out, sy_bmin, sy_bmax, sy_wall, sy_shadow, sy_exp);
        if (*train)
            return cmd_train(tr_data, tr_steps, tr_batch, tr_n, tr_bmin, tr_bmax, tr_lr, tr_ema, seed,
                             tr_out, tr_init, tr_jobs, tr_ckpt, arch_from_flags(tr_base, tr_mults, tr_temb));
        if (*observe) return cmd_observe(ob_grid, ob_op, ob_sigma, seed, ob_out);
        if (*construct)
            return cmd_construct(co_weights, co_server, co_version, co_obs, co_op, co_zeta, co_m,
                                 co_snr, co_detach, seed, co_cache, co_out);
        if (*eval)
            return cmd_eval(ev_weights, ev_testset, ev_task, ev_zeta, ev_sigma, ev_count, ev_m, ev_snr,
                            ev_detach, ev_nobuild, seed, ev_jobs, ev_out, ev_images);
        if (*sweep)
            return cmd_sweep(sw_weights, sw_testset, sw_task, sw_zetas, sw_sigma, sw_count, sw_m,
                             sw_snr, seed, sw_jobs, sw_out);
        if (*publish) return cmd_publish(pb_registry, pb_weights, pb_version, pb_ts);
        if (*serve) return cmd_serve(sv_registry, sv_bind);
        if (*fetch) return cmd_fetch(fe_server, fe_version, fe_cache);
        return 0;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ckm::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
