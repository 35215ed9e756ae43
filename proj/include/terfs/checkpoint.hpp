#pragma once

// Scene checkpoint file (version 1). All multi-byte fields little-endian.
//
//   header   char[4] "TRFS", u32 version, u32 K, u32 M (largest lobe count),
//            f32 eta_raw, f32 r_rx, f32 t_min, f32 t_max,
//            u32 grid_H, u32 grid_W, f32 theta_lo, f32 theta_hi  (grid_H = 0: no grid)
//   K records, each:
//            u32 kind, u32 lobe_count,
//            f32 mu0[3], f32 log_scale[3], f32 rotation[4] (w x y z), f32 rho_logit,
//            f32 velocity[3],
//            lobe_count x { f32 v_raw[3], f32 lambda_raw[2], f32 amp_raw, f32 psi,
//                           f32 t_c, f32 log_t_w }
//
// Parameters are stored raw (pre-activation) as 32-bit floats; loading a saved
// scene and saving it again reproduces the file byte for byte.

#include "terfs/binary_io.hpp"
#include "terfs/render.hpp"

#include <fstream>
#include <iterator>
#include <optional>

namespace terfs {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    Scene scene;
    std::optional<AngularGrid> grid;  // grid the scene was fitted on, if known
};

namespace detail {

/// Elevation bounds are stored as f32. The usual ones (0, +-pi/2) come back
/// exact so a loaded grid still validates and compares equal to the original.
inline double restore_bound(double stored) {
    for (double b : {0.0, kPi / 2.0, -kPi / 2.0})
        if (stored == to_storage(b)) return b;
    return stored;
}

}  // namespace detail

/// Grid equality at checkpoint precision.
inline bool same_grid(const AngularGrid& a, const AngularGrid& b) {
    return a.H == b.H && a.W == b.W && to_storage(a.theta_lo) == to_storage(b.theta_lo) &&
           to_storage(a.theta_hi) == to_storage(b.theta_hi) && a.phi_lo == b.phi_lo && a.phi_hi == b.phi_hi;
}

inline std::vector<char> encode_checkpoint(const Scene& scene, const std::optional<AngularGrid>& grid = {}) {
    ByteWriter w;
    w.raw("TRFS", 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(scene.primitives.size()));
    std::size_t max_lobes = 0;
    for (const auto& p : scene.primitives) max_lobes = std::max(max_lobes, p.lobes.size());
    w.u32(static_cast<std::uint32_t>(max_lobes));
    w.f32(scene.eta_raw);
    w.f32(scene.r_rx);
    w.f32(scene.span.t_min);
    w.f32(scene.span.t_max);
    w.u32(grid ? static_cast<std::uint32_t>(grid->H) : 0u);
    w.u32(grid ? static_cast<std::uint32_t>(grid->W) : 0u);
    w.f32(grid ? grid->theta_lo : 0.0);
    w.f32(grid ? grid->theta_hi : 0.0);
    for (const auto& p : scene.primitives) {
        w.u32(static_cast<std::uint32_t>(p.kind));
        w.u32(static_cast<std::uint32_t>(p.lobes.size()));
        for_each_param(p, [&](ParamClass, const double& v) { w.f32(v); });
    }
    return w.bytes();
}

inline Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
    ByteReader r(bytes.data(), bytes.size());
    if (r.chars(4) != "TRFS") throw Error("not a scene checkpoint");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    const std::uint32_t K = r.u32();
    r.u32();  // M, informational
    c.scene.eta_raw = r.f32();
    c.scene.r_rx = r.f32();
    c.scene.span.t_min = r.f32();
    c.scene.span.t_max = r.f32();
    const std::uint32_t H = r.u32(), W = r.u32();
    const double th_lo = r.f32(), th_hi = r.f32();
    if (H > 0) {
        AngularGrid g;
        g.H = static_cast<int>(H);
        g.W = static_cast<int>(W);
        g.theta_lo = detail::restore_bound(th_lo);
        g.theta_hi = detail::restore_bound(th_hi);
        c.grid = g;
    }
    c.scene.primitives.resize(K);
    for (auto& p : c.scene.primitives) {
        const std::uint32_t kind = r.u32();
        if (kind > 2) throw Error("invalid primitive kind in checkpoint");
        p.kind = static_cast<PrimitiveKind>(kind);
        p.lobes.resize(r.u32());
        for_each_param(p, [&](ParamClass, double& v) { v = r.f32(); });
    }
    if (r.remaining() != 0) throw Error("trailing bytes in checkpoint");
    return c;
}

/// Rounds every stored quantity to checkpoint precision.
inline Scene quantize_scene(const Scene& scene) {
    Scene q = scene;
    q.eta_raw = to_storage(q.eta_raw);
    q.r_rx = to_storage(q.r_rx);
    q.span.t_min = to_storage(q.span.t_min);
    q.span.t_max = to_storage(q.span.t_max);
    for (auto& p : q.primitives) for_each_param(p, [](ParamClass, double& v) { v = to_storage(v); });
    return q;
}

inline void save_checkpoint(const std::string& path, const Scene& scene, const std::optional<AngularGrid>& grid = {}) {
    const auto bytes = encode_checkpoint(scene, grid);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed: " + path);
}

inline std::vector<char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace terfs
