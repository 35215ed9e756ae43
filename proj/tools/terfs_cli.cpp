// terfs: command-line front end.
//
//   terfs synth      generate a ground-truth scene and its dataset
//   terfs train      fit a scene to a dataset
//   terfs render     render one spectrogram from a checkpoint
//   terfs eval       score a checkpoint on a dataset (CSV/JSON, ECDFs)
//   terfs gradcheck  finite-difference check of the analytic gradients
//   terfs convert    ingest an external CSV dataset
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include "terfs/terfs.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace terfs;

namespace {

struct Globals {
    std::string config;
    std::uint64_t seed = 1;
    std::string out = "out";
    int threads = default_thread_count();
    bool quiet = false;
};

std::ofstream open_out(const fs::path& p) {
    std::ofstream f(p);
    if (!f) throw Error("cannot write " + p.string());
    return f;
}

AngularGrid grid_of(int H, int W) {
    AngularGrid g;
    g.H = H;
    g.W = W;
    g.validate();
    return g;
}

std::pair<Dataset, Dataset> apply_split(const Dataset& ds, const std::string& mode, double fraction,
                                        std::uint64_t seed) {
    if (mode == "none") return {ds, ds};
    return split(ds, parse_split_mode(mode), fraction, seed);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Time-evolving radio-field synthesis with Gaussian primitives"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may also follow the subcommand
    Globals g;
    app.add_option("--config", g.config, "Training configuration file (key = value)");
    app.add_option("--seed", g.seed, "Random seed");
    app.add_option("--out", g.out, "Output path");
    app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
    app.add_flag("--quiet", g.quiet, "Only print errors");

    // synth
    SynthSpec spec;
    auto* synth = app.add_subcommand("synth", "Generate a ground-truth scene and dataset");
    synth->add_option("--static", spec.n_static, "Static primitives");
    synth->add_option("--kinematic", spec.n_kinematic, "Kinematic primitives");
    synth->add_option("--transient", spec.n_transient, "Transient primitives");
    synth->add_option("--lobes", spec.lobes, "Lobes per primitive");
    synth->add_option("--rx-nx", spec.rx_nx, "Receivers along x");
    synth->add_option("--rx-ny", spec.rx_ny, "Receivers along y");
    synth->add_option("--rx-spacing", spec.rx_spacing, "Receiver spacing (m)");
    synth->add_option("--frames", spec.frames, "Frame count");
    synth->add_option("--frame-rate", spec.frame_rate, "Frame rate (Hz)");
    synth->add_option("--noise-db", spec.noise_db, "Noise std in dB");
    synth->add_option("--max-speed", spec.max_speed, "Largest kinematic speed (m/s)");
    synth->add_option("--height", spec.grid.H, "Elevation bins");
    synth->add_option("--width", spec.grid.W, "Azimuth bins");

    // train
    std::string data_dir, init_path, split_mode = "none";
    double fraction = 0.8;
    int init_static = 32;
    auto* train_cmd = app.add_subcommand("train", "Fit a scene to a dataset");
    train_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    train_cmd->add_option("--init", init_path, "Initial scene checkpoint");
    train_cmd->add_option("--init-static", init_static, "Random static primitives when no --init is given");
    train_cmd->add_option("--split", split_mode, "Train on one side of a split: none, spatial or temporal")
        ->check(CLI::IsMember({"none", "spatial", "temporal"}));
    train_cmd->add_option("--fraction", fraction, "Training fraction of the split");

    // render
    std::string ckpt_path;
    std::vector<double> rx{0.0, 0.0, 1.0};
    double t = 0.0;
    int H = 0, W = 0;
    bool png = false;
    auto* render_cmd = app.add_subcommand("render", "Render one spectrogram");
    render_cmd->add_option("--checkpoint", ckpt_path, "Scene checkpoint")->required();
    render_cmd->add_option("--rx", rx, "Receiver position x y z (m)")->expected(3);
    render_cmd->add_option("--t", t, "Timestamp (s)");
    render_cmd->add_option("--height", H, "Elevation bins (default: checkpoint grid or 90)");
    render_cmd->add_option("--width", W, "Azimuth bins (default: checkpoint grid or 360)");
    render_cmd->add_flag("--png", png, "Also write a PNG heat map");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset");
    eval_cmd->add_option("--checkpoint", ckpt_path, "Scene checkpoint")->required();
    eval_cmd->add_option("--data", data_dir, "Dataset directory")->required();
    eval_cmd->add_option("--split", split_mode, "Evaluate the held-out side of a split: none, spatial or temporal")
        ->check(CLI::IsMember({"none", "spatial", "temporal"}));
    eval_cmd->add_option("--fraction", fraction, "Training fraction of the split");
    eval_cmd->add_flag("--png", png, "Also write an ECDF plot");

    // gradcheck
    int scenes = 1;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Verify analytic gradients against finite differences");
    gc_cmd->add_option("--scenes", scenes, "Number of seeded random scenes")->check(CLI::PositiveNumber);

    // convert
    std::string input;
    auto* conv_cmd = app.add_subcommand("convert", "Ingest a CSV dataset (rx_x,rx_y,rx_z,t,values...)");
    conv_cmd->add_option("--input", input, "CSV file")->required();
    conv_cmd->add_option("--height", H, "Elevation bins")->required();
    conv_cmd->add_option("--width", W, "Azimuth bins")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }
    spdlog::set_level(g.quiet ? spdlog::level::err : spdlog::level::info);
    spdlog::set_pattern("%v");

    try {
        if (*synth) {
            spec.seed = g.seed;
            const Scene truth = synth_scene(spec);
            const Dataset ds = generate_dataset(truth, spec, g.threads);
            fs::create_directories(g.out);
            save_checkpoint((fs::path(g.out) / "scene.trfs").string(), truth, spec.grid);
            save_dataset(ds, (fs::path(g.out) / "dataset").string());
            spdlog::info("wrote {} primitives and {} samples to {}", truth.size(), ds.size(), g.out);
        } else if (*train_cmd) {
            TrainConfig cfg;
            if (!g.config.empty()) {
                std::ifstream f(g.config);
                if (!f) throw Error("cannot open " + g.config);
                cfg = parse_train_config(f);
            }
            cfg.seed = g.seed;
            cfg.threads = g.threads;
            const Dataset all = load_dataset(data_dir);
            const Dataset data = apply_split(all, split_mode, fraction, g.seed).first;
            Scene init;
            if (!init_path.empty()) {
                const auto c = load_checkpoint(init_path);
                if (c.grid && !same_grid(*c.grid, data.manifest.grid)) throw Error("grid mismatch");
                init = c.scene;
            } else {
                SynthSpec s;
                s.n_static = init_static;
                s.seed = g.seed;
                s.frames = std::max(all.manifest.frame_count, 1);
                s.frame_rate = all.manifest.frame_rate > 0.0 ? all.manifest.frame_rate : 1.0;
                init = synth_scene(s);
                init.span = all.manifest.span;
                enforce_constraints(init, {cfg.delta_t});
            }
            fs::create_directories(g.out);
            TrainHooks hooks;
            hooks.on_checkpoint = [&](int iter, const Scene& s) {
                save_checkpoint((fs::path(g.out) / ("iter_" + std::to_string(iter) + ".trfs")).string(), s,
                                data.manifest.grid);
            };
            const TrainResult res = train(data, init, cfg, hooks);
            save_checkpoint((fs::path(g.out) / "scene.trfs").string(), res.scene, data.manifest.grid);
            auto f = open_out(fs::path(g.out) / "metrics.csv");
            write_metrics_csv(f, res.log);
            if (res.diverged) throw Error("training diverged; last good scene saved");
            spdlog::info("trained K = {} ({} transients, {} births, {} prunes)", res.scene.size(),
                         res.scene.count(PrimitiveKind::Transient), res.births, res.prunes);
        } else if (*render_cmd) {
            const auto c = load_checkpoint(ckpt_path);
            AngularGrid grid = c.grid.value_or(AngularGrid{});
            if (H > 0) grid.H = H;
            if (W > 0) grid.W = W;
            grid.validate();
            const auto out = render(c.scene, Vec3(rx[0], rx[1], rx[2]), t, grid, g.threads);
            const auto norm = normalize_spectrogram(grid, out.power_dbm);
            const auto& dbm = norm.spectrogram.values;
            if (const auto parent = fs::path(g.out).parent_path(); !parent.empty()) fs::create_directories(parent);
            auto f = open_out(g.out + ".csv");
            write_spectrogram_csv(f, grid, dbm);
            write_spectrogram_bin(g.out + ".bin", dbm);
            if (png) write_spectrogram_png(g.out + ".png", grid, dbm);
            spdlog::info("rss {:.3f} dBm", rss_from_spectrogram(dbm));
        } else if (*eval_cmd) {
            const auto c = load_checkpoint(ckpt_path);
            const Dataset all = load_dataset(data_dir);
            if (c.grid && !same_grid(*c.grid, all.manifest.grid)) throw Error("grid mismatch");
            const Dataset test = apply_split(all, split_mode, fraction, g.seed).second;
            const auto summary = evaluate(c.scene, test, g.threads);
            std::vector<TierSummary> tiers;
            try {
                tiers = stratify_by_dynamics(test, summary);
            } catch (const Error& e) {
                spdlog::info("no dynamics tiers: {}", e.what());
            }
            fs::create_directories(g.out);
            auto fs_ = open_out(fs::path(g.out) / "samples.csv");
            write_samples_csv(fs_, summary);
            auto fm = open_out(fs::path(g.out) / "ecdf_mse.csv");
            write_ecdf_csv(fm, summary.mse_ecdf);
            auto fr = open_out(fs::path(g.out) / "ecdf_rss_err.csv");
            write_ecdf_csv(fr, summary.rss_err_ecdf);
            auto fj = open_out(fs::path(g.out) / "summary.json");
            fj << summary_json(summary, tiers).dump(2) << '\n';
            if (png) write_ecdf_png((fs::path(g.out) / "ecdf_rss_err.png").string(), {summary.rss_err_ecdf});
            spdlog::info("mean MSE {:.3e}, mean PSNR {:.2f} dB, median RSS error {:.3f} dB", summary.mean_mse,
                         summary.mean_psnr, summary.median_rss_err);
        } else if (*gc_cmd) {
            GradcheckReport all;
            for (int s = 0; s < scenes; ++s) {
                const auto pb = random_gradcheck_problem(g.seed + static_cast<std::uint64_t>(s));
                const auto rep = finite_difference_check(pb);
                for (int k = 0; k < kParamClassCount; ++k) {
                    all.classes[k].checked += rep.classes[k].checked;
                    all.classes[k].excluded += rep.classes[k].excluded;
                    all.classes[k].max_rel_error = std::max(all.classes[k].max_rel_error, rep.classes[k].max_rel_error);
                }
                all.max_rel_error = std::max(all.max_rel_error, rep.max_rel_error);
            }
            write_gradcheck_table(std::cout, all);
            if (!(all.max_rel_error < 1e-4)) throw Error("gradient check failed: max relative error " +
                                                         std::to_string(all.max_rel_error));
        } else if (*conv_cmd) {
            std::ifstream f(input);
            if (!f) throw Error("cannot open " + input);
            Dataset ds = convert_csv(f, grid_of(H, W));
            ds.manifest.seed = g.seed;
            save_dataset(ds, g.out);
            spdlog::info("converted {} samples into {}", ds.size(), g.out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
