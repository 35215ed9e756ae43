#pragma once

// Forward splatting onto the receiver-centred observation sphere.
//
// Per frame: every primitive with an active lobe is projected to the angular
// domain, sorted near-to-far and binned into per-bin lists by its coverage
// radius. Each bin is then composited front-to-back in the complex domain.

#include "terfs/parallel.hpp"
#include "terfs/scene.hpp"

#include <algorithm>
#include <numeric>
#include <span>
#include <vector>

namespace terfs {

inline constexpr double kPowerFloorMw = 1e-10;  // -100 dBm
inline constexpr double kDbmMin = -100.0;
inline constexpr double kDbmMax = -40.0;
inline constexpr double kAlphaMax = 1.0 - 1e-4;
inline constexpr double kRhoCull = 1.0 / 255.0;
inline constexpr double kMinDepth = 0.1;  // m

/// Equirectangular bin layout. Rows run over elevation, columns over azimuth;
/// bin j = row * W + col.
struct AngularGrid {
    int H = 90;
    int W = 360;
    double theta_lo = 0.0;
    double theta_hi = kPi / 2.0;
    double phi_lo = -kPi;
    double phi_hi = kPi;

    double dtheta() const { return (theta_hi - theta_lo) / H; }
    double dphi() const { return (phi_hi - phi_lo) / W; }
    std::size_t size() const { return static_cast<std::size_t>(H) * static_cast<std::size_t>(W); }

    AngularCoord bin_center(int row, int col) const {
        return {phi_lo + (col + 0.5) * dphi(), theta_lo + (row + 0.5) * dtheta()};
    }
    AngularCoord bin_center(std::size_t j) const {
        return bin_center(static_cast<int>(j / W), static_cast<int>(j % W));
    }

    void validate() const {
        if (H <= 0 || W <= 0) throw Error("grid must have positive size");
        if (!(theta_hi > theta_lo) || theta_lo < -kPi / 2.0 || theta_hi > kPi / 2.0)
            throw Error("invalid elevation range");
        if (!(phi_hi > phi_lo) || phi_hi - phi_lo > 2.0 * kPi + 1e-12) throw Error("invalid azimuth range");
    }

    bool operator==(const AngularGrid&) const = default;
};

/// Power values in dBm clamped to the dataset range.
struct AngularSpectrogram {
    AngularGrid grid;
    std::vector<double> values;
};

struct RenderOutput {
    AngularGrid grid;
    std::vector<Complex> z;
    std::vector<double> power_dbm;
    double rss_dbm = kDbmMin;
};

struct ProjectedGaussian {
    AngularCoord mu2d;
    Mat2 sigma2d = Mat2::Identity();  // compensated, rad^2
    double depth = 0.0;
    double coverage_radius = 0.0;
    int primitive_index = -1;

    // Intermediate values kept for compositing and the backward pass.
    Mat2 sigma2d_geometric = Mat2::Identity();
    Mat2 inv_sigma = Mat2::Identity();
    double compensation = 1.0;
    double rho = 0.0;
    Vec3 center = Vec3::Zero();
    Vec3 offset = Vec3::Zero();
    SphericalJacobian jac;
};

// ---------------------------------------------------------------------------
// Spectrogram helpers

inline double dbm_from_power(double mw) { return 10.0 * std::log10(mw); }

inline double rss_from_spectrogram(std::span<const double> dbm) {
    double total = 0.0;
    for (double s : dbm) total += std::pow(10.0, s / 10.0);
    return 10.0 * std::log10(total);
}

inline double dbm_to_unit(double dbm) { return (std::clamp(dbm, kDbmMin, kDbmMax) - kDbmMin) / (kDbmMax - kDbmMin); }
inline double unit_to_dbm(double u) { return kDbmMin + u * (kDbmMax - kDbmMin); }

inline std::vector<double> unit_image(std::span<const double> dbm) {
    std::vector<double> u(dbm.size());
    std::transform(dbm.begin(), dbm.end(), u.begin(), dbm_to_unit);
    return u;
}

struct NormalizedSpectrogram {
    AngularSpectrogram spectrogram;
    std::vector<double> unit;
};

/// Clamps to [-100, -40] dBm and maps onto [0, 1].
inline NormalizedSpectrogram normalize_spectrogram(const AngularGrid& grid, std::span<const double> raw) {
    if (raw.size() != grid.size()) throw Error("spectrogram size does not match grid");
    NormalizedSpectrogram n;
    n.spectrogram.grid = grid;
    n.spectrogram.values.resize(raw.size());
    std::transform(raw.begin(), raw.end(), n.spectrogram.values.begin(),
                   [](double s) { return std::clamp(s, kDbmMin, kDbmMax); });
    n.unit = unit_image(n.spectrogram.values);
    return n;
}

// ---------------------------------------------------------------------------
// Projection

/// Point on the receiver sphere for an angular coordinate. Observation
/// directions are taken from primitive centres towards these points.
inline Vec3 sphere_point(const Vec3& receiver, double r_rx, const AngularCoord& q) {
    return receiver + r_rx * direction_of(q);
}

inline Vec3 observation_direction(const Vec3& center, const Vec3& bin_point) {
    return (bin_point - center).normalized();
}

inline std::vector<ProjectedGaussian> project_primitives(const Scene& scene, const Vec3& receiver, double t) {
    std::vector<ProjectedGaussian> out;
    out.reserve(scene.primitives.size());
    const double eta = scene.eta();
    for (std::size_t k = 0; k < scene.primitives.size(); ++k) {
        const auto& prim = scene.primitives[k];
        if (!any_lobe_active(prim, t)) continue;
        const double rho = prim.rho();
        if (rho < kRhoCull) continue;
        ProjectedGaussian g;
        g.center = center_at(prim, t);
        g.offset = g.center - receiver;
        g.depth = g.offset.norm();
        if (!(g.depth >= kMinDepth)) continue;
        g.primitive_index = static_cast<int>(k);
        g.rho = rho;
        g.jac = spherical_jacobian(g.offset);
        g.mu2d = spherical_coords(g.offset, scene.r_rx);
        g.sigma2d_geometric = project_covariance(covariance_of(prim), g.jac.J);
        g.compensation = near_field_factor(g.depth, eta);
        g.sigma2d = g.sigma2d_geometric * g.compensation;
        g.coverage_radius = coverage_radius(g.sigma2d);
        g.inv_sigma = g.sigma2d.inverse();
        out.push_back(g);
    }
    return out;
}

/// Near-to-far, ties by primitive index.
inline void depth_sort(std::vector<ProjectedGaussian>& projected) {
    std::vector<std::uint32_t> order(projected.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        const auto& ga = projected[a];
        const auto& gb = projected[b];
        if (ga.depth != gb.depth) return ga.depth < gb.depth;
        return ga.primitive_index < gb.primitive_index;
    });
    std::vector<ProjectedGaussian> sorted;
    sorted.reserve(projected.size());
    for (auto i : order) sorted.push_back(std::move(projected[i]));
    projected = std::move(sorted);
}

/// Angular offset from the projected centre, azimuth wrapped to (-pi, pi].
inline Vec2 angular_offset(const ProjectedGaussian& g, const AngularCoord& q) {
    return {wrap_angle(q.phi - g.mu2d.phi), q.theta - g.mu2d.theta};
}

/// True when q lies within the primitive's coverage radius. Outside it the
/// primitive contributes nothing to the bin.
inline bool covers(const ProjectedGaussian& g, const Vec2& dq) {
    return dq.squaredNorm() <= g.coverage_radius * g.coverage_radius;
}

inline double opacity_from_offset(const ProjectedGaussian& g, const Vec2& dq) {
    const double m = dq.dot(g.inv_sigma * dq);
    return std::min(g.rho * std::exp(-0.5 * m), kAlphaMax);
}

/// rho * exp(-1/2 dq^T Sigma'^-1 dq), clamped below one.
inline double opacity(const ProjectedGaussian& proj, double rho, const AngularCoord& q) {
    const double det = proj.sigma2d.determinant();
    if (!(det > 0.0) || !std::isfinite(det)) throw Error("singular projected covariance");
    ProjectedGaussian g = proj;
    g.rho = rho;
    g.inv_sigma = proj.sigma2d.inverse();
    return opacity_from_offset(g, angular_offset(g, q));
}

// ---------------------------------------------------------------------------
// Frame plan

/// Lobe state frozen for one timestamp.
struct PreparedLobe {
    Vec3 v = Vec3::UnitX();
    TangentFrame frame;
    double lambda_x = 1.0;
    double lambda_y = 1.0;
    Complex phase;          // e^{-j psi}
    Complex coeff;          // a(t) e^{-j psi}
    double amplitude = 0.0; // a(t)
    int lobe_index = 0;
};

struct FramePlan {
    AngularGrid grid;
    Vec3 receiver = Vec3::Zero();
    double t = 0.0;
    double r_rx = 1.0;
    std::vector<ProjectedGaussian> sorted;
    std::vector<PreparedLobe> lobes;
    std::vector<std::size_t> lobe_offsets;  // sorted.size() + 1
    std::size_t max_lobes = 0;              // most lobes on one entry
    std::vector<AngularCoord> bin_coords;
    std::vector<Vec3> bin_points;
    std::vector<std::size_t> bin_offsets;   // grid.size() + 1
    std::vector<int> bin_entries;           // indices into `sorted`, depth order per bin

    std::span<const PreparedLobe> lobes_of(std::size_t entry) const {
        return {lobes.data() + lobe_offsets[entry], lobe_offsets[entry + 1] - lobe_offsets[entry]};
    }
    std::span<const int> entries_of(std::size_t bin) const {
        return {bin_entries.data() + bin_offsets[bin], bin_offsets[bin + 1] - bin_offsets[bin]};
    }
};

namespace detail {

/// Indices of bin centres origin + (i + 1/2) step lying in [lo, hi].
inline void bin_range(double lo, double hi, double origin, double step, int& first, int& last) {
    constexpr double slack = 1e-9;
    first = static_cast<int>(std::ceil((lo - origin) / step - 0.5 - slack));
    last = static_cast<int>(std::floor((hi - origin) / step - 0.5 + slack));
}

inline void append_lobes(FramePlan& plan, const GaussianPrimitive& prim, double t) {
    for (std::size_t m = 0; m < prim.lobes.size(); ++m) {
        const auto& lobe = prim.lobes[m];
        if (!is_active(lobe, t)) continue;
        PreparedLobe p;
        const Direction v = lobe.direction();
        p.v = v.vec();
        p.frame = tangent_frame(v);
        p.lambda_x = lobe.lambda_x();
        p.lambda_y = lobe.lambda_y();
        p.amplitude = temporal_amplitude(lobe, t);
        p.phase = std::polar(1.0, -lobe.psi);
        p.coeff = p.amplitude * p.phase;
        p.lobe_index = static_cast<int>(m);
        plan.lobes.push_back(p);
    }
}

}  // namespace detail

/// Projects, sorts and bins the scene for one (receiver, t). Each bin lists
/// the primitives covering it; with `bin_by_coverage` false every primitive
/// is listed in every bin.
inline FramePlan prepare_frame(const Scene& scene, const Vec3& receiver, double t, const AngularGrid& grid,
                               bool bin_by_coverage = true) {
    grid.validate();
    FramePlan plan;
    plan.grid = grid;
    plan.receiver = receiver;
    plan.t = t;
    plan.r_rx = scene.r_rx;
    plan.sorted = project_primitives(scene, receiver, t);
    depth_sort(plan.sorted);

    std::size_t n_lobes = 0;
    for (const auto& g : plan.sorted) n_lobes += scene.primitives[g.primitive_index].lobes.size();
    plan.lobes.reserve(n_lobes);
    plan.lobe_offsets.reserve(plan.sorted.size() + 1);
    plan.lobe_offsets.push_back(0);
    for (const auto& g : plan.sorted) {
        detail::append_lobes(plan, scene.primitives[g.primitive_index], t);
        plan.max_lobes = std::max(plan.max_lobes, plan.lobes.size() - plan.lobe_offsets.back());
        plan.lobe_offsets.push_back(plan.lobes.size());
    }

    const std::size_t nbins = grid.size();
    plan.bin_coords.resize(nbins);
    plan.bin_points.resize(nbins);
    {
        // Same arithmetic as sphere_point(), with the trig hoisted per row and column.
        std::vector<AngularCoord> rows(grid.H), cols(grid.W);
        std::vector<double> cos_phi(grid.W), sin_phi(grid.W);
        for (int c = 0; c < grid.W; ++c) {
            cols[c] = grid.bin_center(0, c);
            cos_phi[c] = std::cos(cols[c].phi);
            sin_phi[c] = std::sin(cols[c].phi);
        }
        for (int r = 0; r < grid.H; ++r) {
            const double theta = grid.bin_center(r, 0).theta;
            const double ct = std::cos(theta), st = std::sin(theta);
            for (int c = 0; c < grid.W; ++c) {
                const std::size_t j = static_cast<std::size_t>(r) * grid.W + c;
                plan.bin_coords[j] = {cols[c].phi, theta};
                plan.bin_points[j] = receiver + scene.r_rx * Vec3(ct * cos_phi[c], ct * sin_phi[c], st);
            }
        }
    }

    plan.bin_offsets.assign(nbins + 1, 0);
    if (!bin_by_coverage) {
        const std::size_t n = plan.sorted.size();
        plan.bin_entries.resize(nbins * n);
        for (std::size_t j = 0; j < nbins; ++j) {
            std::iota(plan.bin_entries.begin() + j * n, plan.bin_entries.begin() + (j + 1) * n, 0);
            plan.bin_offsets[j + 1] = (j + 1) * n;
        }
        return plan;
    }

    // Entries touching each row, in depth order.
    std::vector<int> row_first(plan.sorted.size()), row_last(plan.sorted.size());
    std::vector<std::size_t> row_offsets(grid.H + 1, 0);
    for (std::size_t e = 0; e < plan.sorted.size(); ++e) {
        const auto& g = plan.sorted[e];
        const double r = g.coverage_radius;
        detail::bin_range(g.mu2d.theta - r, g.mu2d.theta + r, grid.theta_lo, grid.dtheta(), row_first[e], row_last[e]);
        row_first[e] = std::max(row_first[e], 0);
        row_last[e] = std::min(row_last[e], grid.H - 1);
        for (int row = row_first[e]; row <= row_last[e]; ++row) ++row_offsets[row + 1];
    }
    for (int row = 0; row < grid.H; ++row) row_offsets[row + 1] += row_offsets[row];
    std::vector<std::uint32_t> row_entries(row_offsets.back());
    {
        std::vector<std::size_t> cursor(row_offsets.begin(), row_offsets.end() - 1);
        for (std::size_t e = 0; e < plan.sorted.size(); ++e)
            for (int row = row_first[e]; row <= row_last[e]; ++row)
                row_entries[cursor[row]++] = static_cast<std::uint32_t>(e);
    }

    // Row by row: covered (column, entry) pairs in depth order, then a stable
    // counting sort by column keeps each bin's list near-to-far.
    plan.bin_entries.reserve(32 * plan.sorted.size());
    std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
    std::vector<std::size_t> col_count(grid.W + 1);
    for (int row = 0; row < grid.H; ++row) {
        const std::size_t base = static_cast<std::size_t>(row) * grid.W;
        const double theta = plan.bin_coords[base].theta;
        pairs.clear();
        for (std::size_t k = row_offsets[row]; k < row_offsets[row + 1]; ++k) {
            const std::uint32_t e = row_entries[k];
            const auto& g = plan.sorted[e];
            const double r = g.coverage_radius;
            // Chord of the coverage disc on this row, padded; covers() decides.
            const double dth = theta - g.mu2d.theta;
            const double w = std::sqrt(std::max(r * r - dth * dth, 0.0)) + 1e-9;
            int c0 = 0, c1 = grid.W - 1;
            if (w + grid.dphi() < kPi) {
                detail::bin_range(g.mu2d.phi - w, g.mu2d.phi + w, grid.phi_lo, grid.dphi(), c0, c1);
                if (c1 - c0 + 1 >= grid.W) c0 = 0, c1 = grid.W - 1;
            }
            for (int c = c0; c <= c1; ++c) {
                const int col = c < 0 ? c + grid.W : (c >= grid.W ? c - grid.W : c);
                if (covers(g, angular_offset(g, plan.bin_coords[base + col])))
                    pairs.emplace_back(static_cast<std::uint32_t>(col), e);
            }
        }
        std::fill(col_count.begin(), col_count.end(), 0);
        for (const auto& [c, e] : pairs) ++col_count[c + 1];
        const std::size_t start = plan.bin_entries.size();
        for (int c = 0; c < grid.W; ++c) {
            col_count[c + 1] += col_count[c];
            plan.bin_offsets[base + c + 1] = start + col_count[c + 1];
        }
        plan.bin_entries.resize(start + pairs.size());
        for (const auto& [c, e] : pairs) plan.bin_entries[start + col_count[c]++] = static_cast<int>(e);
    }
    return plan;
}

/// R_k(d, t) from the prepared lobes.
inline Complex prepared_response(std::span<const PreparedLobe> lobes, const Vec3& d) {
    Complex r{0.0, 0.0};
    for (const auto& l : lobes) r += l.coeff * asg_weight(l.v, l.frame, l.lambda_x, l.lambda_y, d);
    return r;
}

namespace detail {

/// Per-bin work arrays, reused across bins on a thread.
struct BinScratch {
    // Exponents go through Eigen's packet exp. An aligned buffer padded to
    // whole packets keeps every element on the packet path; a scalar head or
    // tail would round differently and make bins depend on buffer placement.
    static constexpr std::size_t kPad = 16;
    std::vector<int> entries;
    std::vector<double, Eigen::aligned_allocator<double>> expo;
    std::vector<unsigned char> front;  // lobe faces the observation direction
};

inline BinScratch& bin_scratch(std::size_t n_entries, std::size_t max_lobes) {
    thread_local BinScratch s;
    const std::size_t n_expo = n_entries * (1 + max_lobes) + BinScratch::kPad;
    if (s.entries.size() < n_entries) s.entries.resize(n_entries);
    if (s.expo.size() < n_expo) s.expo.resize(n_expo), s.front.resize(n_expo);
    return s;
}

}  // namespace detail

/// Front-to-back complex compositing of one bin. Exponents are gathered first
/// so they go through one vectorised exp.
inline Complex composite_bin(const FramePlan& plan, std::size_t bin) {
    using detail::BinScratch;
    const AngularCoord q = plan.bin_coords[bin];
    const Vec3& point = plan.bin_points[bin];
    const auto list = plan.entries_of(bin);
    auto& sc = detail::bin_scratch(list.size(), plan.max_lobes);
    int* ent = sc.entries.data();
    double* ex = sc.expo.data();
    unsigned char* front = sc.front.data();
    std::size_t n = 0, k = 0, m = 0;
    for (int e : list) {
        const ProjectedGaussian& g = plan.sorted[e];
        const Vec2 dq = angular_offset(g, q);
        if (!covers(g, dq)) continue;
        ent[n++] = e;
        ex[k++] = -0.5 * dq.dot(g.inv_sigma * dq);
        const Vec3 d = observation_direction(g.center, point);
        for (const auto& l : plan.lobes_of(e)) {
            // Back-facing lobes contribute exactly zero and take no exp slot.
            front[m] = d.dot(l.v) > 0.0;
            if (!front[m++]) continue;
            const double sx = d.dot(l.frame.x_axis);
            const double sy = d.dot(l.frame.y_axis);
            ex[k++] = -(l.lambda_x * sx * sx + l.lambda_y * sy * sy);
        }
    }
    const std::size_t padded = (k + BinScratch::kPad - 1) / BinScratch::kPad * BinScratch::kPad;
    std::fill(ex + k, ex + padded, 0.0);
    Eigen::Map<Eigen::ArrayXd, Eigen::AlignedMax> ev(ex, static_cast<Eigen::Index>(padded));
    ev = ev.exp();

    Complex z{0.0, 0.0};
    double T = 1.0;
    k = m = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const int e = ent[i];
        const double alpha = std::min(plan.sorted[e].rho * ex[k++], kAlphaMax);
        Complex r{0.0, 0.0};
        for (const auto& l : plan.lobes_of(e))
            if (front[m++]) r += l.coeff * ex[k++];
        z += T * alpha * r;
        T *= 1.0 - alpha;
    }
    return z;
}

/// Compositing of an already depth-sorted list, evaluating responses straight
/// from the scene.
inline Complex composite_bin(std::span<const ProjectedGaussian> sorted, const AngularCoord& q, const Vec3& receiver,
                             double t, const Scene& scene) {
    const Vec3 point = sphere_point(receiver, scene.r_rx, q);
    Complex z{0.0, 0.0};
    double T = 1.0;
    for (const auto& g : sorted) {
        const Vec2 dq = angular_offset(g, q);
        if (!covers(g, dq)) continue;
        const double alpha = opacity_from_offset(g, dq);
        const Direction d = Direction::normalized(point - g.center);
        z += T * alpha * directional_response(scene.primitives[g.primitive_index], d, t);
        T *= 1.0 - alpha;
    }
    return z;
}

inline RenderOutput render_plan(const FramePlan& plan, int threads = 1) {
    RenderOutput out;
    out.grid = plan.grid;
    const std::size_t nbins = plan.grid.size();
    out.z.resize(nbins);
    out.power_dbm.resize(nbins);
    const std::size_t W = plan.grid.W;
    parallel_for(static_cast<std::size_t>(plan.grid.H), threads, [&](std::size_t row) {
        for (std::size_t j = row * W; j < (row + 1) * W; ++j) {
            out.z[j] = composite_bin(plan, j);
            out.power_dbm[j] = dbm_from_power(std::norm(out.z[j]) + kPowerFloorMw);
        }
    });
    out.rss_dbm = rss_from_spectrogram(out.power_dbm);
    return out;
}

/// Renders the complex field, its power in dBm and the scalar RSS.
inline RenderOutput render(const Scene& scene, const Vec3& receiver, double t, const AngularGrid& grid,
                           int threads = 1) {
    return render_plan(prepare_frame(scene, receiver, t, grid), threads);
}

}  // namespace terfs
