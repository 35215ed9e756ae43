#include "terfs/checkpoint.hpp"
#include "terfs/dataset.hpp"

#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace terfs;
namespace fs = std::filesystem;
using Catch::Matchers::ContainsSubstring;

namespace {

struct Run {
    int code = -1;
    std::string output;  // stdout and stderr
};

Run cli(const std::string& args) {
    const std::string cmd = std::string(TERFS_CLI_PATH) + " " + args + " 2>&1";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct Workdir {
    fs::path path;
    Workdir() {
        static int counter = 0;
        path = fs::temp_directory_path() / ("terfs_cli_test_" + std::to_string(counter++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~Workdir() { fs::remove_all(path); }
    std::string operator/(const std::string& s) const { return (path / s).string(); }
};

// A small dataset written once for the whole file.
const Workdir& shared() {
    static Workdir w;
    static bool made = false;
    if (!made) {
        const auto r = cli("synth --static 4 --kinematic 1 --rx-nx 2 --rx-ny 2 --frames 6 --height 8 --width 16 "
                           "--quiet --seed 3 --out " + (w / "synth"));
        REQUIRE(r.code == 0);
        made = true;
    }
    return w;
}

}  // namespace

TEST_CASE("usage errors exit with code 2", "[cli]") {
    auto r = cli("");
    CHECK(r.code == 2);
    r = cli("frobnicate");
    CHECK(r.code == 2);
    r = cli("gradcheck --bogus");
    CHECK(r.code == 2);
    CHECK_THAT(r.output, ContainsSubstring("--bogus"));
    CHECK_THAT(r.output, ContainsSubstring("Usage"));
    r = cli("--threads 0 gradcheck");
    CHECK(r.code == 2);
    r = cli("--help");
    CHECK(r.code == 0);
    for (const char* sub : {"synth", "train", "render", "eval", "gradcheck", "convert"})
        CHECK_THAT(r.output, ContainsSubstring(sub));
}

TEST_CASE("gradcheck subcommand", "[cli]") {
    const auto r = cli("gradcheck --seed 17");
    CHECK(r.code == 0);
    CHECK_THAT(r.output, ContainsSubstring("class,checked,excluded,max_rel_error"));
    std::istringstream in(r.output);
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
        if (line.rfind("class,", 0) == 0 || line.find(',') == std::string::npos) continue;
        ++rows;
        const double err = std::stod(line.substr(line.rfind(',') + 1));
        CHECK(err < 1e-4);
    }
    CHECK(rows == kParamClassCount);
}

TEST_CASE("synth writes a scene and dataset", "[cli]") {
    const auto& w = shared();
    const auto c = load_checkpoint(w / "synth/scene.trfs");
    CHECK(c.scene.size() == 5);
    REQUIRE(c.grid.has_value());
    CHECK(c.grid->H == 8);
    const auto ds = load_dataset(w / "synth/dataset");
    CHECK(ds.size() == 24);
    CHECK(ds.manifest.seed == 3);
}

TEST_CASE("render of an empty scene is all floor", "[cli]") {
    Workdir w;
    save_checkpoint(w / "empty.trfs", Scene{}, AngularGrid{6, 12});
    const auto r = cli("render --checkpoint " + (w / "empty.trfs") + " --rx 1 2 1 --t 0.5 --out " + (w / "img") +
                       " --quiet");
    REQUIRE(r.code == 0);
    const std::string bin = slurp(w / "img.bin");
    REQUIRE(bin.size() == 4 * 72);
    for (std::size_t i = 0; i < 72; ++i) {
        float v;
        std::memcpy(&v, bin.data() + 4 * i, 4);
        CHECK(v == -100.0f);
    }
    std::istringstream csv(slurp(w / "img.csv"));
    std::string line;
    int rows = 0;
    while (std::getline(csv, line)) {
        ++rows;
        CHECK(std::count(line.begin(), line.end(), ',') == 11);
        CHECK(line.find("-100,-100") == 0);
    }
    CHECK(rows == 6);
}

TEST_CASE("render matches the library", "[cli]") {
    const auto& w = shared();
    Workdir out;
    const auto r = cli("render --checkpoint " + (w / "synth/scene.trfs") + " --rx 0.5 -1 1 --t 0.3 --png --out " +
                       (out / "img") + " --quiet");
    REQUIRE(r.code == 0);
    CHECK(fs::exists(out / "img.png"));
    const auto c = load_checkpoint(w / "synth/scene.trfs");
    const auto ref = render(c.scene, Vec3(0.5, -1, 1), 0.3, *c.grid).power_dbm;
    const std::string bin = slurp(out / "img.bin");
    REQUIRE(bin.size() == 4 * ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
        float v;
        std::memcpy(&v, bin.data() + 4 * i, 4);
        CHECK(v == static_cast<float>(std::clamp(ref[i], -100.0, -40.0)));
    }
}

TEST_CASE("eval outputs and grid mismatch", "[cli]") {
    const auto& w = shared();
    Workdir out;
    auto r = cli("eval --checkpoint " + (w / "synth/scene.trfs") + " --data " + (w / "synth/dataset") +
                 " --split temporal --fraction 0.5 --png --quiet --out " + (out / "a"));
    REQUIRE(r.code == 0);
    for (const char* f : {"samples.csv", "ecdf_mse.csv", "ecdf_rss_err.csv", "summary.json", "ecdf_rss_err.png"})
        CHECK(fs::exists(fs::path(out / "a") / f));
    const std::string samples = slurp(fs::path(out / "a") / "samples.csv");
    CHECK(std::count(samples.begin(), samples.end(), '\n') == 1 + 12);
    CHECK_THAT(slurp(fs::path(out / "a") / "summary.json"), ContainsSubstring("\"tiers\""));

    r = cli("--threads 3 eval --checkpoint " + (w / "synth/scene.trfs") + " --data " + (w / "synth/dataset") +
            " --split temporal --fraction 0.5 --quiet --out " + (out / "b"));
    REQUIRE(r.code == 0);
    CHECK(slurp(fs::path(out / "b") / "samples.csv") == samples);
    CHECK(slurp(fs::path(out / "b") / "ecdf_mse.csv") == slurp(fs::path(out / "a") / "ecdf_mse.csv"));

    const auto c = load_checkpoint(w / "synth/scene.trfs");
    save_checkpoint(out / "wrong.trfs", c.scene, AngularGrid{9, 16});
    r = cli("eval --checkpoint " + (out / "wrong.trfs") + " --data " + (w / "synth/dataset") + " --out " +
            (out / "c"));
    CHECK(r.code == 1);
    CHECK_THAT(r.output, ContainsSubstring("grid mismatch"));
    CHECK(std::count(r.output.begin(), r.output.end(), '\n') == 1);
}

TEST_CASE("train subcommand", "[cli]") {
    const auto& w = shared();
    Workdir out;
    {
        std::ofstream cfg(out / "cfg.txt");
        cfg << "warmup_iters = 20\ngate_iters = 20\njoint_iters = 10\ndensify_interval = 10\nlog_interval = 10\n";
    }
    auto r = cli("--config " + (out / "cfg.txt") + " --quiet train --data " + (w / "synth/dataset") +
                 " --init-static 6 --split spatial --fraction 0.75 --out " + (out / "run"));
    REQUIRE(r.code == 0);
    const auto c = load_checkpoint(fs::path(out / "run") / "scene.trfs");
    CHECK(c.scene.count(PrimitiveKind::Static) == 6);
    CHECK(fs::exists(fs::path(out / "run") / "iter_50.trfs"));
    const std::string m = slurp(fs::path(out / "run") / "metrics.csv");
    CHECK(m.rfind("iter,stage,l1,ssim,fourier,td,gate,total,K,n_transients,wall_ms\n", 0) == 0);
    CHECK(std::count(m.begin(), m.end(), '\n') == 1 + 5);

    // Warm start from a checkpoint.
    r = cli("--config " + (out / "cfg.txt") + " --quiet train --data " + (w / "synth/dataset") + " --init " +
            (w / "synth/scene.trfs") + " --out " + (out / "warm"));
    CHECK(r.code == 0);

    {
        std::ofstream cfg(out / "bad.txt");
        cfg << "warmup_iters = 20\nspeed = 3\n";
    }
    r = cli("--config " + (out / "bad.txt") + " train --data " + (w / "synth/dataset") + " --out " + (out / "x"));
    CHECK(r.code == 1);
    CHECK_THAT(r.output, ContainsSubstring("unknown key 'speed'"));
    r = cli("train --data " + (out / "nowhere") + " --out " + (out / "x"));
    CHECK(r.code == 1);
    CHECK_THAT(r.output, ContainsSubstring("cannot open"));
}

TEST_CASE("convert subcommand", "[cli]") {
    Workdir w;
    {
        std::ofstream f(w / "in.csv");
        f << "0,0,1,0,-50,-60,-70,-80\n0,0,1,0.5,-55,-65,-75,-85\n3,0,1,0,-52,-62,-72,-82\n";
    }
    auto r = cli("convert --input " + (w / "in.csv") + " --height 2 --width 2 --quiet --out " + (w / "ds"));
    REQUIRE(r.code == 0);
    const auto ds = load_dataset(w / "ds");
    CHECK(ds.size() == 3);
    CHECK(ds.manifest.receiver_count == 2);
    CHECK(ds.samples[1].dbm[3] == -85.0);

    r = cli("convert --input " + (w / "in.csv") + " --height 3 --width 2 --out " + (w / "ds2"));
    CHECK(r.code == 1);
    CHECK_THAT(r.output, ContainsSubstring("expected 10 values"));
}
