#pragma once

// Observation datasets: synthetic ground-truth scenes, forward-model
// generation, on-disk persistence and train/test splits.
//
// On disk a dataset is a directory holding
//   manifest.json  metadata (format version, grid, time span, counts, seed)
//   samples.bin    N records of f32 rx_x, rx_y, rx_z, t, then H*W dBm values
//                  row-major; all little-endian.

#include "terfs/binary_io.hpp"
#include "terfs/checkpoint.hpp"
#include "terfs/render.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <random>
#include <sstream>

namespace terfs {

inline constexpr int kDatasetVersion = 1;

struct ObservationSample {
    Vec3 receiver = Vec3::Zero();
    double t = 0.0;
    std::vector<double> dbm;  // H*W, clamped to [-100, -40]
    double rss_dbm = kDbmMin;
};

struct DatasetManifest {
    int version = kDatasetVersion;
    AngularGrid grid;
    TimeSpan span;
    double frame_rate = 0.0;  // Hz, 0 when unknown
    int receiver_count = 0;
    int frame_count = 0;
    std::uint64_t seed = 0;
    double noise_db = 0.0;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<ObservationSample> samples;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SynthSpec {
    int n_static = 24;
    int n_kinematic = 0;
    int n_transient = 0;
    int lobes = 4;
    double room_half_extent = 6.0;  // m, primitives lie in [-e, e]^2
    double z_lo = 0.3;              // m
    double z_hi = 3.0;
    double scale_lo = 0.2;          // m
    double scale_hi = 0.8;
    double amp_lo = 3e-4;           // linear field amplitude, sqrt(mW)
    double amp_hi = 2e-3;
    double lambda_lo = 4.0;
    double lambda_hi = 40.0;
    double rho_lo = 0.15;
    double rho_hi = 0.5;
    double max_speed = 15.0;        // m/s
    double min_width = 0.1;         // s, shortest transient envelope
    // Receiver grid, frames and noise.
    int rx_nx = 4;
    int rx_ny = 4;
    double rx_spacing = 3.0;        // m
    double rx_height = 1.0;         // m
    int frames = 100;
    double frame_rate = 10.0;       // Hz
    double noise_db = 0.0;
    double eta = 1.0;               // m
    AngularGrid grid{30, 60};
    std::uint64_t seed = 1;

    void validate() const {
        if (n_static < 0 || n_kinematic < 0 || n_transient < 0) throw Error("primitive counts must be non-negative");
        if (n_static + n_kinematic + n_transient == 0) throw Error("synthetic scene needs at least one primitive");
        if (lobes < 1) throw Error("primitives need at least one lobe");
        if (!(frame_rate > 0.0)) throw Error("frame rate must be positive");
        if (frames < 1 || rx_nx < 1 || rx_ny < 1) throw Error("receiver grid and frame count must be positive");
        if (!(noise_db >= 0.0)) throw Error("noise level must be non-negative");
        grid.validate();
    }

    TimeSpan span() const { return {0.0, (frames - 1) / frame_rate}; }
};

/// Receiver positions on a centred horizontal grid, x-major.
inline std::vector<Vec3> receiver_grid(const SynthSpec& spec) {
    std::vector<Vec3> rx;
    const double x0 = -0.5 * (spec.rx_nx - 1) * spec.rx_spacing;
    const double y0 = -0.5 * (spec.rx_ny - 1) * spec.rx_spacing;
    for (int i = 0; i < spec.rx_nx; ++i)
        for (int j = 0; j < spec.rx_ny; ++j)
            rx.emplace_back(to_storage(x0 + i * spec.rx_spacing), to_storage(y0 + j * spec.rx_spacing),
                            to_storage(spec.rx_height));
    return rx;
}

inline std::vector<double> frame_times(const SynthSpec& spec) {
    std::vector<double> t(spec.frames);
    for (int f = 0; f < spec.frames; ++f) t[f] = to_storage(f / spec.frame_rate);
    return t;
}

namespace detail {

inline Vec3 random_unit(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (;;) {
        const Vec3 v(n(rng), n(rng), n(rng));
        if (v.norm() > 1e-6) return v.normalized();
    }
}

inline Vec4 random_quaternion(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vec4 q(n(rng), n(rng), n(rng), n(rng));
    if (q[0] < 0.0) q = -q;
    return q.normalized();
}

}  // namespace detail

/// Seeded random ground-truth scene. Lobes point from each primitive towards a
/// jittered point of the receiver area so that every path is observable.
inline Scene synth_scene(const SynthSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * U(rng); };
    auto log_uni = [&](double lo, double hi) { return std::exp(uni(std::log(lo), std::log(hi))); };

    Scene scene;
    scene.span = spec.span();
    scene.eta_raw = softplus_inverse(spec.eta);
    const double T = scene.span.length();
    const double t_mid = 0.5 * (scene.span.t_min + scene.span.t_max);
    const double rx_half = 0.5 * std::max(spec.rx_nx - 1, spec.rx_ny - 1) * spec.rx_spacing;
    const auto receivers = receiver_grid(spec);
    const double e = spec.room_half_extent;

    auto place = [&](GaussianPrimitive& p) {
        // Keep centres clear of every receiver.
        for (;;) {
            p.mu0 = Vec3(uni(-e, e), uni(-e, e), uni(spec.z_lo, spec.z_hi));
            double nearest = std::numeric_limits<double>::infinity();
            for (const auto& r : receivers) nearest = std::min(nearest, (p.mu0 - r).norm());
            if (nearest > 1.0) break;
        }
        for (int i = 0; i < 3; ++i) p.log_scale[i] = std::log(log_uni(spec.scale_lo, spec.scale_hi));
        p.rotation = detail::random_quaternion(rng);
        p.rho_logit = logit(uni(spec.rho_lo, spec.rho_hi));
    };
    auto make_lobe = [&](const GaussianPrimitive& p, double t_c, double t_w) {
        const Vec3 aim(uni(-rx_half, rx_half), uni(-rx_half, rx_half), spec.rx_height);
        const Vec3 v = (aim - p.mu0).normalized() + 0.3 * detail::random_unit(rng);
        return AsgLobe::make(v.normalized(), log_uni(spec.lambda_lo, spec.lambda_hi),
                             log_uni(spec.lambda_lo, spec.lambda_hi), log_uni(spec.amp_lo, spec.amp_hi),
                             uni(-kPi, kPi), t_c, t_w);
    };

    const double static_width = T > 0.0 ? 10.0 * T : 1e3;
    for (int i = 0; i < spec.n_static; ++i) {
        GaussianPrimitive p;
        p.kind = PrimitiveKind::Static;
        place(p);
        for (int m = 0; m < spec.lobes; ++m) p.lobes.push_back(make_lobe(p, t_mid, static_width));
        scene.primitives.push_back(std::move(p));
    }
    for (int i = 0; i < spec.n_kinematic; ++i) {
        GaussianPrimitive p;
        p.kind = PrimitiveKind::Kinematic;
        place(p);
        const Vec3 dir = Vec3(uni(-1, 1), uni(-1, 1), 0.0).normalized();
        p.velocity = dir * uni(0.0, spec.max_speed);
        // Start so the trajectory is centred on the sampled position.
        p.mu0 -= p.velocity * t_mid;
        for (int m = 0; m < spec.lobes; ++m) p.lobes.push_back(make_lobe(p, t_mid, static_width));
        scene.primitives.push_back(std::move(p));
    }
    const double max_width = std::max(spec.min_width, T / 10.0);
    for (int i = 0; i < spec.n_transient; ++i) {
        GaussianPrimitive p;
        p.kind = PrimitiveKind::Transient;
        place(p);
        const double t_c = uni(scene.span.t_min, scene.span.t_max);
        const double t_w = uni(spec.min_width, max_width);
        p.lobes.push_back(make_lobe(p, t_c, t_w));
        scene.primitives.push_back(std::move(p));
    }
    validate_scene(scene);
    return scene;
}

// ---------------------------------------------------------------------------
// Generation

/// Renders every (receiver, t) pair, receiver-major. Gaussian noise of
/// `noise_db` is added in the dBm domain before clamping; each sample draws
/// from its own seeded stream so results do not depend on `threads`.
/// Receivers, times and values are held at storage (f32) precision, so a
/// saved and reloaded dataset compares equal to the generated one.
inline Dataset generate_dataset(const Scene& truth, const std::vector<Vec3>& receivers,
                                const std::vector<double>& times, const AngularGrid& grid, double noise_db,
                                std::uint64_t seed, int threads = 1) {
    grid.validate();
    if (receivers.empty() || times.empty()) throw Error("no receivers or timestamps to render");
    Dataset ds;
    auto& m = ds.manifest;
    m.grid = grid;
    m.span = {*std::min_element(times.begin(), times.end()), *std::max_element(times.begin(), times.end())};
    m.frame_rate = times.size() > 1 ? (times.size() - 1) / m.span.length() : 0.0;
    m.receiver_count = static_cast<int>(receivers.size());
    m.frame_count = static_cast<int>(times.size());
    m.seed = seed;
    m.noise_db = noise_db;

    ds.samples.resize(receivers.size() * times.size());
    parallel_for(ds.samples.size(), threads, [&](std::size_t i) {
        auto& s = ds.samples[i];
        const Vec3& r = receivers[i / times.size()];
        s.receiver = {to_storage(r.x()), to_storage(r.y()), to_storage(r.z())};
        s.t = to_storage(times[i % times.size()]);
        auto out = render(truth, s.receiver, s.t, grid);
        if (noise_db > 0.0) {
            std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                              static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i >> 32)};
            std::mt19937_64 rng(seq);
            std::normal_distribution<double> n(0.0, noise_db);
            for (auto& v : out.power_dbm) v += n(rng);
        }
        s.dbm.resize(out.power_dbm.size());
        std::transform(out.power_dbm.begin(), out.power_dbm.end(), s.dbm.begin(),
                       [](double v) { return to_storage(std::clamp(v, kDbmMin, kDbmMax)); });
        s.rss_dbm = rss_from_spectrogram(s.dbm);
    });
    return ds;
}

/// Convenience: scene receivers and frames from a SynthSpec.
inline Dataset generate_dataset(const Scene& truth, const SynthSpec& spec, int threads = 1) {
    auto ds = generate_dataset(truth, receiver_grid(spec), frame_times(spec), spec.grid, spec.noise_db, spec.seed,
                               threads);
    ds.manifest.frame_rate = spec.frame_rate;
    return ds;
}

// ---------------------------------------------------------------------------
// Persistence

inline std::size_t sample_record_bytes(const AngularGrid& g) { return 4 * (4 + g.size()); }

inline nlohmann::json manifest_to_json(const DatasetManifest& m, std::size_t num_samples) {
    return {{"version", m.version},
            {"grid", {{"H", m.grid.H}, {"W", m.grid.W}, {"theta_lo", m.grid.theta_lo}, {"theta_hi", m.grid.theta_hi},
                      {"phi_lo", m.grid.phi_lo}, {"phi_hi", m.grid.phi_hi}}},
            {"t_min", m.span.t_min},
            {"t_max", m.span.t_max},
            {"frame_rate", m.frame_rate},
            {"receiver_count", m.receiver_count},
            {"frame_count", m.frame_count},
            {"seed", m.seed},
            {"noise_db", m.noise_db},
            {"num_samples", num_samples}};
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::size_t n = ds.manifest.grid.size();
    ByteWriter w;
    for (const auto& s : ds.samples) {
        if (s.dbm.size() != n) throw Error("sample size does not match grid");
        w.f32(s.receiver.x());
        w.f32(s.receiver.y());
        w.f32(s.receiver.z());
        w.f32(s.t);
        for (double v : s.dbm) {
            if (!std::isfinite(v)) throw Error("non-finite spectrogram value");
            w.f32(v);
        }
    }
    {
        std::ofstream f(fs::path(dir) / "samples.bin", std::ios::binary);
        if (!f) throw Error("cannot write " + dir + "/samples.bin");
        f.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    }
    std::ofstream f(fs::path(dir) / "manifest.json");
    if (!f) throw Error("cannot write " + dir + "/manifest.json");
    f << manifest_to_json(ds.manifest, ds.samples.size()).dump(2) << '\n';
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw Error("cannot open " + dir + "/manifest.json");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(mf);
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed manifest: ") + e.what());
    }
    Dataset ds;
    auto& m = ds.manifest;
    std::size_t num = 0;
    try {
        m.version = j.at("version").get<int>();
        if (m.version != kDatasetVersion)
            throw Error("dataset version mismatch: expected " + std::to_string(kDatasetVersion) + ", found " +
                        std::to_string(m.version));
        const auto& g = j.at("grid");
        m.grid.H = g.at("H").get<int>();
        m.grid.W = g.at("W").get<int>();
        m.grid.theta_lo = g.at("theta_lo").get<double>();
        m.grid.theta_hi = g.at("theta_hi").get<double>();
        m.grid.phi_lo = g.at("phi_lo").get<double>();
        m.grid.phi_hi = g.at("phi_hi").get<double>();
        m.span = {j.at("t_min").get<double>(), j.at("t_max").get<double>()};
        m.frame_rate = j.at("frame_rate").get<double>();
        m.receiver_count = j.at("receiver_count").get<int>();
        m.frame_count = j.at("frame_count").get<int>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.noise_db = j.at("noise_db").get<double>();
        num = j.at("num_samples").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed manifest: ") + e.what());
    }
    m.grid.validate();

    const auto bytes = read_file_bytes((fs::path(dir) / "samples.bin").string());
    const std::size_t rec = sample_record_bytes(m.grid);
    if (bytes.size() != num * rec) {
        // Whole records of some other length point at the grid, not the file.
        const bool other_grid = num > 0 && bytes.size() % num == 0 && bytes.size() / num > 16 &&
                                bytes.size() / num % 4 == 0;
        if (other_grid)
            throw Error("samples.bin size is inconsistent with H*W = " + std::to_string(m.grid.size()) +
                        ": records hold " + std::to_string(bytes.size() / num / 4 - 4) + " values");
        if (bytes.size() < num * rec) throw Error("samples.bin is truncated");
        throw Error("samples.bin has trailing bytes for H*W = " + std::to_string(m.grid.size()));
    }
    ByteReader r(bytes.data(), bytes.size());
    ds.samples.resize(num);
    for (auto& s : ds.samples) {
        const double x = r.f32(), y = r.f32(), z = r.f32();
        s.receiver = {x, y, z};
        s.t = r.f32();
        s.dbm.resize(m.grid.size());
        for (auto& v : s.dbm) {
            v = r.f32();
            if (!std::isfinite(v)) throw Error("non-finite value in samples.bin");
        }
        s.rss_dbm = rss_from_spectrogram(s.dbm);
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Splits

enum class SplitMode { Spatial, Temporal };

inline SplitMode parse_split_mode(const std::string& s) {
    if (s == "spatial") return SplitMode::Spatial;
    if (s == "temporal") return SplitMode::Temporal;
    throw Error("unknown split mode '" + s + "'");
}

/// Unit id per sample: distinct receiver positions (spatial) or distinct
/// timestamps (temporal), numbered in order of first appearance.
inline std::vector<int> split_units(const Dataset& ds, SplitMode mode, int& unit_count) {
    std::vector<int> unit(ds.size());
    if (mode == SplitMode::Spatial) {
        std::map<std::array<double, 3>, int> ids;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const auto& r = ds.samples[i].receiver;
            unit[i] = ids.try_emplace({r.x(), r.y(), r.z()}, static_cast<int>(ids.size())).first->second;
        }
        unit_count = static_cast<int>(ids.size());
    } else {
        std::map<double, int> ids;
        for (std::size_t i = 0; i < ds.size(); ++i)
            unit[i] = ids.try_emplace(ds.samples[i].t, static_cast<int>(ids.size())).first->second;
        unit_count = static_cast<int>(ids.size());
    }
    return unit;
}

/// Seeded partition of whole receivers or whole frames. The train side gets
/// round(fraction * units) units, at least one on each side.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, SplitMode mode, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw Error("split fraction must lie in (0, 1)");
    int units = 0;
    const auto unit = split_units(ds, mode, units);
    if (units < 2) throw Error("fewer than two units to split");
    std::vector<int> order(units);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    for (int i = units - 1; i > 0; --i) {
        std::uniform_int_distribution<int> pick(0, i);
        std::swap(order[i], order[pick(rng)]);
    }
    const int n_train = std::clamp(static_cast<int>(std::lround(fraction * units)), 1, units - 1);
    std::vector<char> is_train(units, 0);
    for (int i = 0; i < n_train; ++i) is_train[order[i]] = 1;

    Dataset train, test;
    train.manifest = test.manifest = ds.manifest;
    for (std::size_t i = 0; i < ds.size(); ++i) (is_train[unit[i]] ? train : test).samples.push_back(ds.samples[i]);
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// External ingestion

/// Reads a headerless CSV of rows "rx_x,rx_y,rx_z,t,v_0,...,v_{H*W-1}" with
/// values in dBm on `grid`. Lines starting with '#' are skipped.
inline Dataset convert_csv(std::istream& in, const AngularGrid& grid) {
    grid.validate();
    Dataset ds;
    ds.manifest.grid = grid;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::vector<double> vals;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                vals.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw Error("line " + std::to_string(lineno) + ": not a number '" + cell + "'");
            }
        }
        if (vals.size() != 4 + grid.size())
            throw Error("line " + std::to_string(lineno) + ": expected " + std::to_string(4 + grid.size()) +
                        " values, found " + std::to_string(vals.size()));
        ObservationSample s;
        s.receiver = {to_storage(vals[0]), to_storage(vals[1]), to_storage(vals[2])};
        s.t = to_storage(vals[3]);
        s.dbm.resize(grid.size());
        for (std::size_t k = 0; k < grid.size(); ++k) {
            if (!std::isfinite(vals[4 + k])) throw Error("line " + std::to_string(lineno) + ": non-finite value");
            s.dbm[k] = to_storage(std::clamp(vals[4 + k], kDbmMin, kDbmMax));
        }
        s.rss_dbm = rss_from_spectrogram(s.dbm);
        ds.samples.push_back(std::move(s));
    }
    if (ds.empty()) throw Error("no samples in input");
    int units = 0;
    split_units(ds, SplitMode::Spatial, units);
    ds.manifest.receiver_count = units;
    split_units(ds, SplitMode::Temporal, units);
    ds.manifest.frame_count = units;
    double lo = ds.samples[0].t, hi = lo;
    for (const auto& s : ds.samples) lo = std::min(lo, s.t), hi = std::max(hi, s.t);
    ds.manifest.span = {lo, hi};
    ds.manifest.frame_rate = units > 1 && hi > lo ? (units - 1) / (hi - lo) : 0.0;
    return ds;
}

}  // namespace terfs
