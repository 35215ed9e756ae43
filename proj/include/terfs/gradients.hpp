#pragma once

// Reverse-mode gradients of a per-bin loss on the unit-scaled power image with
// respect to every raw scene parameter.
//
// The pass runs in two phases. Per bin, contributions are re-evaluated front to
// back, then walked back to front with a running suffix sum so transmittance
// derivatives need no stored prefix products. Results are accumulated in the
// projected domain (dL/dmu2d, dL/dSigma'^-1, dL/drho, per-lobe terms) per row
// chunk and merged in row order. Afterwards each primitive is chained back
// through compensation, covariance projection, the spherical Jacobian, drift and
// the raw parameterisations.

#include "terfs/render.hpp"

#include <string>

namespace terfs {

/// Gradient slots aligned with Scene storage, plus the per-lobe amplitude
/// gradients dL/da(t_b) of every sample in the batch (flat lobe order).
struct GradientBuffer {
    double eta = 0.0;
    std::vector<GaussianPrimitive> primitives;
    std::vector<std::vector<double>> amplitude_grads;

    static GradientBuffer zeros_like(const Scene& scene) {
        GradientBuffer g;
        g.primitives.reserve(scene.primitives.size());
        for (const auto& p : scene.primitives) g.primitives.push_back(terfs::zeros_like(p));
        return g;
    }

    void add(const GradientBuffer& other) {
        if (other.primitives.size() != primitives.size()) throw Error("gradient buffer shape mismatch");
        eta += other.eta;
        for (std::size_t k = 0; k < primitives.size(); ++k) {
            std::vector<double*> dst;
            for_each_param(primitives[k], [&](ParamClass, double& v) { dst.push_back(&v); });
            std::size_t i = 0;
            for_each_param(other.primitives[k], [&](ParamClass, const double& v) { *dst[i++] += v; });
        }
        amplitude_grads.insert(amplitude_grads.end(), other.amplitude_grads.begin(), other.amplitude_grads.end());
    }

    /// Throws naming the first parameter class holding a non-finite entry.
    void check_finite() const {
        if (!std::isfinite(eta)) throw Error("non-finite gradient in eta");
        for (const auto& p : primitives)
            for_each_param(p, [](ParamClass c, const double& v) {
                if (!std::isfinite(v)) throw Error("non-finite gradient in " + std::string(param_class_name(c)));
            });
    }
};

/// Offsets of each primitive's lobes in the flat lobe order.
inline std::vector<std::size_t> lobe_bases(const Scene& scene) {
    std::vector<std::size_t> base(scene.primitives.size() + 1, 0);
    for (std::size_t k = 0; k < scene.primitives.size(); ++k)
        base[k + 1] = base[k] + scene.primitives[k].lobes.size();
    return base;
}

namespace detail {

struct ProjectedGrad {
    Vec2 mu2d = Vec2::Zero();
    Mat2 inv_sigma = Mat2::Zero();
    double rho = 0.0;
    Vec3 center = Vec3::Zero();  // through observation directions

    void add(const ProjectedGrad& o) {
        mu2d += o.mu2d;
        inv_sigma += o.inv_sigma;
        rho += o.rho;
        center += o.center;
    }
};

struct LobeGrad {
    double amplitude = 0.0;  // dL/da(t)
    double psi = 0.0;
    double lambda_x = 0.0;
    double lambda_y = 0.0;
    Vec3 x_axis = Vec3::Zero();
    Vec3 v_direct = Vec3::Zero();

    void add(const LobeGrad& o) {
        amplitude += o.amplitude;
        psi += o.psi;
        lambda_x += o.lambda_x;
        lambda_y += o.lambda_y;
        x_axis += o.x_axis;
        v_direct += o.v_direct;
    }
};

/// Sparse accumulator for one row chunk, entries kept in first-touch order.
struct ChunkGrad {
    std::vector<int> entries;
    std::vector<ProjectedGrad> proj;
    std::vector<std::vector<LobeGrad>> lobes;
};

struct PairState {
    int entry;
    Vec2 dq;
    double alpha;
    double falloff;
    bool clamped;
    Vec3 d;
    double dist;
    Complex response;
};

/// d(loss)/d(dBm) -> d(loss)/dz for one bin. Zero where the dBm clamp saturates.
inline Complex field_gradient(const Complex& z, double grad_unit) {
    const double power = std::norm(z) + kPowerFloorMw;
    const double dbm = dbm_from_power(power);
    if (!(dbm > kDbmMin && dbm < kDbmMax)) return {0.0, 0.0};
    const double g_dbm = grad_unit / (kDbmMax - kDbmMin);
    const double g_power = g_dbm * 10.0 / (power * std::log(10.0));
    return 2.0 * g_power * z;
}

inline void backward_bin(const FramePlan& plan, std::size_t bin, double grad_unit, std::vector<int>& slot,
                         ChunkGrad& acc, std::vector<PairState>& pairs) {
    const AngularCoord q = plan.bin_coords[bin];
    const Vec3& point = plan.bin_points[bin];
    pairs.clear();
    Complex z{0.0, 0.0};
    double T = 1.0;
    for (int e : plan.entries_of(bin)) {
        const ProjectedGaussian& g = plan.sorted[e];
        const Vec2 dq = angular_offset(g, q);
        if (!covers(g, dq)) continue;
        PairState s;
        s.entry = e;
        s.dq = dq;
        s.falloff = std::exp(-0.5 * dq.dot(g.inv_sigma * dq));
        s.alpha = g.rho * s.falloff;
        s.clamped = s.alpha > kAlphaMax;
        if (s.clamped) s.alpha = kAlphaMax;
        const Vec3 w = point - g.center;
        s.dist = w.norm();
        s.d = w / s.dist;
        s.response = prepared_response(plan.lobes_of(e), s.d);
        z += T * s.alpha * s.response;
        T *= 1.0 - s.alpha;
        pairs.push_back(s);
    }
    if (pairs.empty()) return;
    const Complex gz = field_gradient(z, grad_unit);
    if (gz == Complex{0.0, 0.0}) return;

    Complex suffix{0.0, 0.0};
    for (auto it = pairs.rbegin(); it != pairs.rend(); ++it) {
        const PairState& s = *it;
        T /= 1.0 - s.alpha;  // transmittance in front of this entry
        const ProjectedGaussian& g = plan.sorted[s.entry];

        int& sl = slot[s.entry];
        if (sl < 0) {
            sl = static_cast<int>(acc.entries.size());
            acc.entries.push_back(s.entry);
            acc.proj.emplace_back();
            acc.lobes.emplace_back(plan.lobes_of(s.entry).size());
        }
        ProjectedGrad& pg = acc.proj[sl];
        auto& lg = acc.lobes[sl];

        const Complex dz_dalpha = T * s.response - suffix / (1.0 - s.alpha);
        const double g_alpha = (std::conj(gz) * dz_dalpha).real();
        const Complex g_response = gz * (T * s.alpha);
        suffix += T * s.alpha * s.response;

        if (!s.clamped) {
            pg.rho += g_alpha * s.falloff;
            const double g_m = -0.5 * s.alpha * g_alpha;
            pg.inv_sigma += g_m * s.dq * s.dq.transpose();
            pg.mu2d -= g_m * 2.0 * (g.inv_sigma * s.dq);
        }

        Vec3 g_d = Vec3::Zero();
        const auto lobes = plan.lobes_of(s.entry);
        for (std::size_t m = 0; m < lobes.size(); ++m) {
            const PreparedLobe& l = lobes[m];
            if (s.d.dot(l.v) <= 0.0) continue;
            const double sx = s.d.dot(l.frame.x_axis);
            const double sy = s.d.dot(l.frame.y_axis);
            const double w = std::exp(-(l.lambda_x * sx * sx + l.lambda_y * sy * sy));
            const Complex cg = std::conj(g_response);
            const double g_w = (cg * l.coeff).real();
            LobeGrad& o = lg[m];
            o.amplitude += w * (cg * l.phase).real();
            o.psi += (cg * Complex(0.0, -1.0) * l.coeff).real() * w;
            o.lambda_x += -g_w * w * sx * sx;
            o.lambda_y += -g_w * w * sy * sy;
            const double g_sx = -2.0 * g_w * w * l.lambda_x * sx;
            const double g_sy = -2.0 * g_w * w * l.lambda_y * sy;
            g_d += g_sx * l.frame.x_axis + g_sy * l.frame.y_axis;
            o.x_axis += g_sx * s.d + g_sy * s.d.cross(l.v);
            o.v_direct += g_sy * l.frame.x_axis.cross(s.d);
        }
        pg.center -= (g_d - g_d.dot(s.d) * s.d) / s.dist;
    }
}

/// Pulls a gradient on the unit lobe direction v back through the tangent frame
/// (only the x axis carries v-dependence beyond the direct term).
inline Vec3 frame_vjp(const Vec3& v, const Vec3& g_x) {
    Vec3 e = Vec3::Zero();
    e[tangent_seed_axis(v)] = 1.0;
    const Vec3 a = e - e.dot(v) * v;
    const double na = a.norm();
    const Vec3 x = a / na;
    const Vec3 g_a = (g_x - g_x.dot(x) * x) / na;
    return -g_a.dot(v) * e - e.dot(v) * g_a;
}

inline Vec4 quaternion_vjp(const Vec4& q_raw, const Mat3& G) {
    const double n = q_raw.norm();
    const Vec4 q = q_raw / n;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Vec4 g;
    g[0] = 2 * (-z * G(0, 1) + y * G(0, 2) + z * G(1, 0) - x * G(1, 2) - y * G(2, 0) + x * G(2, 1));
    g[1] = 2 * (y * G(0, 1) + z * G(0, 2) + y * G(1, 0) - 2 * x * G(1, 1) - w * G(1, 2) + z * G(2, 0) +
                w * G(2, 1) - 2 * x * G(2, 2));
    g[2] = 2 * (-2 * y * G(0, 0) + x * G(0, 1) + w * G(0, 2) + x * G(1, 0) + z * G(1, 2) - w * G(2, 0) +
                z * G(2, 1) - 2 * y * G(2, 2));
    g[3] = 2 * (-2 * z * G(0, 0) - w * G(0, 1) + x * G(0, 2) + w * G(1, 0) - 2 * z * G(1, 1) + y * G(1, 2) +
                x * G(2, 0) + y * G(2, 1));
    return (g - g.dot(q) * q) / n;
}

/// Exact (phi, theta) gradients with respect to the offset.
inline void angle_gradients(const Vec3& p, Vec3& g_phi, Vec3& g_theta) {
    const double rho2 = p.x() * p.x() + p.y() * p.y();
    const double rho = std::sqrt(rho2);
    const double d2 = rho2 + p.z() * p.z();
    if (rho2 > 0.0) {
        g_phi = Vec3(-p.y() / rho2, p.x() / rho2, 0.0);
        g_theta = Vec3(-p.x() * p.z() / (d2 * rho), -p.y() * p.z() / (d2 * rho), rho / d2);
    } else {
        g_phi.setZero();
        g_theta.setZero();
    }
}

inline void chain_primitive(const Scene& scene, const FramePlan& plan, int entry, const ProjectedGrad& pg,
                            const std::vector<LobeGrad>& lg, GradientBuffer& out, double* amp_out) {
    const ProjectedGaussian& g = plan.sorted[entry];
    const int k = g.primitive_index;
    const GaussianPrimitive& prim = scene.primitives[k];
    GaussianPrimitive& gp = out.primitives[k];
    const double t = plan.t;

    // Sigma' = c * Sigma2d, Sigma'^-1 = A.
    const Mat2& A = g.inv_sigma;
    const Mat2 g_sigma_c = -A.transpose() * pg.inv_sigma * A.transpose();
    const double g_c = (g_sigma_c.array() * g.sigma2d_geometric.array()).sum();
    Mat2 g_sigma2d = g.compensation * g_sigma_c;
    g_sigma2d = 0.5 * (g_sigma2d + g_sigma2d.transpose()).eval();

    const Mat3 sigma3d = covariance_of(prim);
    const Mat23& J = g.jac.J;
    const Mat3 g_sigma3d = J.transpose() * g_sigma2d * J;
    const Mat23 g_J = 2.0 * g_sigma2d * J * sigma3d;

    const double eta = scene.eta();
    const double D = g.depth;
    out.eta += g_c * 2.0 * eta / (D * D) * sigmoid(scene.eta_raw);
    const double g_depth = g_c * (-2.0 * eta * eta / (D * D * D));

    Vec3 g_phi, g_theta;
    angle_gradients(g.offset, g_phi, g_theta);
    Vec3 g_p = spherical_jacobian_vjp(g.jac, g_J, g.offset) + g_depth * g.offset / D + pg.mu2d.x() * g_phi +
               pg.mu2d.y() * g_theta;
    const Vec3 g_center = g_p + pg.center;
    gp.mu0 += g_center;
    if (prim.kind == PrimitiveKind::Kinematic) gp.velocity += t * g_center;

    gp.rho_logit += pg.rho * g.rho * (1.0 - g.rho);

    // Sigma = M M^T with M = R S.
    const Mat3 R = prim.rotation_matrix();
    const Vec3 s = prim.scale();
    const Mat3 M = R * s.asDiagonal();
    const Mat3 g_M = 2.0 * g_sigma3d * M;
    for (int i = 0; i < 3; ++i) gp.log_scale[i] += R.col(i).dot(g_M.col(i)) * s[i];
    const Mat3 g_R = g_M * s.asDiagonal();
    gp.rotation += quaternion_vjp(prim.rotation, g_R);

    const auto lobes = plan.lobes_of(entry);
    for (std::size_t i = 0; i < lobes.size(); ++i) {
        const PreparedLobe& pl = lobes[i];
        const LobeGrad& o = lg[i];
        const AsgLobe& lobe = prim.lobes[pl.lobe_index];
        AsgLobe& gl = gp.lobes[pl.lobe_index];
        if (amp_out) amp_out[pl.lobe_index] += o.amplitude;

        const double tw = lobe.t_w();
        const double dt = t - lobe.t_c;
        const double envelope = std::exp(-dt * dt / (2.0 * tw * tw));
        gl.amp_raw += o.amplitude * envelope * sigmoid(lobe.amp_raw);
        gl.t_c += o.amplitude * pl.amplitude * dt / (tw * tw);
        gl.log_t_w += o.amplitude * pl.amplitude * dt * dt / (tw * tw * tw) * tw;
        gl.psi += o.psi;
        gl.lambda_raw.x() += o.lambda_x * sigmoid(lobe.lambda_raw.x());
        gl.lambda_raw.y() += o.lambda_y * sigmoid(lobe.lambda_raw.y());

        const Vec3 g_v = o.v_direct + frame_vjp(pl.v, o.x_axis);
        const double vn = lobe.v_raw.norm();
        gl.v_raw += (g_v - g_v.dot(pl.v) * pl.v) / vn;
    }
}

}  // namespace detail

/// Accumulates the gradient of a loss whose derivative with respect to the
/// unit-scaled image of `plan` is `grad_unit`. If `amp_grads` is given it
/// receives this sample's dL/da(t) per lobe (flat lobe order, overwritten).
inline void backward_sample(const Scene& scene, const FramePlan& plan, std::span<const double> grad_unit,
                            GradientBuffer& out, std::vector<double>* amp_grads = nullptr, int threads = 1) {
    if (grad_unit.size() != plan.grid.size()) throw Error("gradient image does not match grid");
    if (out.primitives.size() != scene.primitives.size()) throw Error("gradient buffer shape mismatch");
    const std::size_t H = plan.grid.H, W = plan.grid.W;
    const std::size_t n = plan.sorted.size();

    std::vector<detail::ChunkGrad> chunks(H);
    parallel_for(H, threads, [&](std::size_t row) {
        std::vector<int> slot(n, -1);
        std::vector<detail::PairState> pairs;
        for (std::size_t j = row * W; j < (row + 1) * W; ++j) {
            if (grad_unit[j] == 0.0) continue;
            detail::backward_bin(plan, j, grad_unit[j], slot, chunks[row], pairs);
        }
    });

    std::vector<detail::ProjectedGrad> proj(n);
    std::vector<std::vector<detail::LobeGrad>> lobes(n);
    std::vector<char> touched(n, 0);
    for (std::size_t e = 0; e < n; ++e) lobes[e].resize(plan.lobes_of(e).size());
    for (const auto& c : chunks) {
        for (std::size_t i = 0; i < c.entries.size(); ++i) {
            const int e = c.entries[i];
            touched[e] = 1;
            proj[e].add(c.proj[i]);
            for (std::size_t m = 0; m < c.lobes[i].size(); ++m) lobes[e][m].add(c.lobes[i][m]);
        }
    }

    const auto base = lobe_bases(scene);
    if (amp_grads) amp_grads->assign(base.back(), 0.0);
    for (std::size_t e = 0; e < n; ++e) {
        if (!touched[e]) continue;
        double* amp = amp_grads ? amp_grads->data() + base[plan.sorted[e].primitive_index] : nullptr;
        detail::chain_primitive(scene, plan, static_cast<int>(e), proj[e], lobes[e], out, amp);
    }
}

}  // namespace terfs
