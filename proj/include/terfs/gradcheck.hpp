#pragma once

// Central finite-difference verification of the analytic gradients of the
// full training loss, per parameter class.
//
// A parameter is skipped when nudging it by +-h changes the discrete structure
// of the loss (which primitives and lobes are active, which primitives cover
// which bins, opacity and power clamps, and the sign pattern of the L1 and
// temporal-difference terms); the loss is not differentiable across those
// boundaries.

#include "terfs/train.hpp"

#include <functional>

namespace terfs {

struct GradcheckProblem {
    Scene scene;
    AngularGrid grid;
    std::vector<Vec3> receivers;  // one per batch item
    std::vector<double> times;
    std::vector<std::vector<double>> targets;  // unit images
    LossWeights weights{0.2, 0.1, 0.5, 0.1};

    std::vector<BatchItem> batch() const {
        std::vector<BatchItem> b;
        for (std::size_t i = 0; i < times.size(); ++i) b.push_back({receivers[i], times[i], targets[i]});
        return b;
    }
};

/// Random scene around a receiver at the origin with static, kinematic and
/// transient primitives, three timestamps inside every support, and random
/// target images.
inline GradcheckProblem random_gradcheck_problem(std::uint64_t seed, int K = 6, int M = 3,
                                                 AngularGrid grid = {16, 32}) {
    if (K < 3 || K > 8 || M < 1 || M > 4) throw Error("gradcheck scenes use 3 <= K <= 8 and 1 <= M <= 4");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * U(rng); };

    GradcheckProblem pb;
    pb.grid = grid;
    Scene& s = pb.scene;
    s.span = {0.0, 4.0};
    s.eta_raw = softplus_inverse(uni(0.5, 2.0));
    s.r_rx = 1.0;
    for (int k = 0; k < K; ++k) {
        GaussianPrimitive p;
        p.kind = k == 0 ? PrimitiveKind::Kinematic : (k == 1 ? PrimitiveKind::Transient : PrimitiveKind::Static);
        const double D = uni(2.0, 5.0);
        const double phi = uni(-kPi, kPi), theta = uni(0.15, 1.2);
        p.mu0 = D * direction_of({phi, theta});
        for (int i = 0; i < 3; ++i) p.log_scale[i] = std::log(uni(0.3, 0.9) * D / 3.0);
        p.rotation = detail::random_quaternion(rng);
        p.rho_logit = logit(uni(0.2, 0.7));
        if (p.kind == PrimitiveKind::Kinematic) p.velocity = Vec3(uni(-0.3, 0.3), uni(-0.3, 0.3), uni(-0.1, 0.1));
        const int lobes = p.kind == PrimitiveKind::Transient ? 1 : M;
        for (int m = 0; m < lobes; ++m) {
            const Vec3 toward = (-p.mu0).normalized() + 0.5 * detail::random_unit(rng);
            double t_c = uni(1.5, 2.5), t_w = uni(8.0, 12.0);
            if (p.kind == PrimitiveKind::Transient) t_w = uni(0.6, 1.0);
            else if (m > 0) t_c = uni(0.0, 4.0), t_w = uni(4.0, 10.0);
            p.lobes.push_back(AsgLobe::make(toward.normalized(), uni(2.0, 12.0), uni(2.0, 12.0), uni(0.004, 0.02),
                                            uni(-kPi, kPi), t_c, t_w));
        }
        s.primitives.push_back(std::move(p));
    }
    pb.times = {1.6, 2.0, 2.4};
    pb.receivers.assign(pb.times.size(), Vec3::Zero());
    for (std::size_t b = 0; b < pb.times.size(); ++b) {
        std::vector<double> t(grid.size());
        for (auto& v : t) v = uni(0.05, 0.95);
        pb.targets.push_back(std::move(t));
    }
    return pb;
}

inline double gradcheck_loss(const GradcheckProblem& pb, const Scene& scene, GradientBuffer* grad = nullptr) {
    return evaluate_batch(scene, pb.grid, pb.batch(), pb.weights, grad).total;
}

/// Discrete features the loss is piecewise smooth over.
inline std::vector<std::int64_t> structural_signature(const GradcheckProblem& pb, const Scene& scene) {
    std::vector<std::int64_t> sig;
    std::vector<std::vector<double>> preds;
    for (std::size_t b = 0; b < pb.times.size(); ++b) {
        const FramePlan plan = prepare_frame(scene, pb.receivers[b], pb.times[b], pb.grid);
        sig.push_back(static_cast<std::int64_t>(plan.sorted.size()));
        for (std::size_t e = 0; e < plan.sorted.size(); ++e) {
            sig.push_back(plan.sorted[e].primitive_index);
            for (const auto& l : plan.lobes_of(e)) sig.push_back(l.lobe_index);
        }
        for (std::size_t j = 0; j < pb.grid.size(); ++j) {
            std::int64_t code = 0;
            for (int e : plan.entries_of(j)) {
                const auto& g = plan.sorted[e];
                const Vec2 dq = angular_offset(g, plan.bin_coords[j]);
                const bool cov = covers(g, dq);
                const bool clamp = cov && opacity_from_offset(g, dq) >= kAlphaMax;
                code = code * 4 + (cov ? 1 : 0) + (clamp ? 2 : 0);
                code %= 1000000007;
            }
            sig.push_back(code);
        }
        const auto out = render_plan(plan);
        std::vector<double> u(out.power_dbm.size());
        for (std::size_t j = 0; j < u.size(); ++j) {
            const double d = out.power_dbm[j];
            sig.push_back(d <= kDbmMin ? -1 : (d >= kDbmMax ? 1 : 0));
            u[j] = dbm_to_unit(d);
            sig.push_back(u[j] > pb.targets[b][j] ? 1 : (u[j] < pb.targets[b][j] ? -1 : 0));
        }
        preds.push_back(std::move(u));
    }
    for (std::size_t b = 0; b < preds.size(); ++b)
        for (std::size_t c = b + 1; c < preds.size(); ++c)
            for (std::size_t j = 0; j < pb.grid.size(); ++j) {
                const double d = (preds[b][j] - pb.targets[b][j]) - (preds[c][j] - pb.targets[c][j]);
                sig.push_back(d > 0.0 ? 1 : (d < 0.0 ? -1 : 0));
            }
    return sig;
}

struct ParamCheck {
    std::size_t primitive = 0;  // scene size for the near-field scale
    ParamClass cls = ParamClass::Position;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
    bool excluded = false;
};

struct ClassSummary {
    std::size_t checked = 0;
    std::size_t excluded = 0;
    double max_rel_error = 0.0;
};

struct GradcheckReport {
    std::vector<ParamCheck> params;
    std::array<ClassSummary, kParamClassCount> classes{};
    double max_rel_error = 0.0;
};

inline constexpr double kGradcheckFloor = 1e-7;

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(std::abs(numeric), kGradcheckFloor);
}

/// Step for a raw parameter: relative to its magnitude, never below `h_min`.
inline double fd_step(double value, double rel_step = 1e-6, double h_min = 1e-7) {
    const double h = rel_step * std::max(1.0, std::abs(value));
    if (!(h >= h_min)) throw Error("step underflow");
    return h;
}

inline GradcheckReport finite_difference_check(const GradcheckProblem& pb, double rel_step = 3e-4) {
    GradcheckReport rep;
    GradientBuffer grad = GradientBuffer::zeros_like(pb.scene);
    gradcheck_loss(pb, pb.scene, &grad);
    const auto base_sig = structural_signature(pb, pb.scene);

    auto check = [&](std::size_t prim, ParamClass cls, double analytic, const std::function<double&(Scene&)>& slot) {
        ParamCheck pc;
        pc.primitive = prim;
        pc.cls = cls;
        pc.analytic = analytic;
        // Central differences at h and h/2 combined by Richardson extrapolation,
        // which cancels the O(h^2) truncation term. Parameters that move many
        // coverage edges at once (eta, velocity) may cross one at the first
        // step, so up to two ten-fold smaller steps are tried before excluding.
        Scene probe = pb.scene;
        const double value = slot(probe);
        auto central = [&](double step, bool& same) {
            Scene plus = pb.scene, minus = pb.scene;
            slot(plus) = value + step;
            slot(minus) = value - step;
            same = structural_signature(pb, plus) == base_sig && structural_signature(pb, minus) == base_sig;
            const double width = slot(plus) - slot(minus);
            return same ? (gradcheck_loss(pb, plus) - gradcheck_loss(pb, minus)) / width : 0.0;
        };
        pc.excluded = true;
        double rel = rel_step;
        for (int attempt = 0; attempt < 3 && pc.excluded; ++attempt, rel *= 0.1) {
            const double h = fd_step(value, rel, std::min(1e-7, 0.1 * rel));
            bool same_full = false, same_half = false;
            const double d_full = central(h, same_full);
            if (!same_full) continue;
            const double d_half = central(0.5 * h, same_half);
            if (!same_half) continue;
            pc.excluded = false;
            pc.numeric = (4.0 * d_half - d_full) / 3.0;
            pc.rel_error = relative_error(pc.analytic, pc.numeric);
        }
        auto& cs = rep.classes[static_cast<int>(cls)];
        if (pc.excluded) {
            ++cs.excluded;
        } else {
            ++cs.checked;
            cs.max_rel_error = std::max(cs.max_rel_error, pc.rel_error);
            rep.max_rel_error = std::max(rep.max_rel_error, pc.rel_error);
        }
        rep.params.push_back(pc);
    };

    for (std::size_t k = 0; k < pb.scene.primitives.size(); ++k) {
        std::vector<std::pair<ParamClass, double>> g;
        for_each_param(grad.primitives[k], [&](ParamClass c, const double& v) { g.emplace_back(c, v); });
        for (std::size_t i = 0; i < g.size(); ++i) {
            const auto cls = g[i].first;
            // Velocity only exists for kinematic primitives.
            if (cls == ParamClass::Velocity && pb.scene.primitives[k].kind != PrimitiveKind::Kinematic) continue;
            check(k, cls, g[i].second, [k, i](Scene& s) -> double& {
                std::size_t n = 0;
                double* out = nullptr;
                for_each_param(s.primitives[k], [&](ParamClass, double& v) {
                    if (n++ == i) out = &v;
                });
                return *out;
            });
        }
    }
    check(pb.scene.primitives.size(), ParamClass::NearField, grad.eta, [](Scene& s) -> double& { return s.eta_raw; });
    return rep;
}

inline void write_gradcheck_table(std::ostream& out, const GradcheckReport& rep) {
    out << "class,checked,excluded,max_rel_error\n";
    out.precision(6);
    for (int c = 0; c < kParamClassCount; ++c) {
        const auto& s = rep.classes[c];
        out << kParamClassNames[c] << ',' << s.checked << ',' << s.excluded << ',' << std::scientific
            << s.max_rel_error << std::defaultfloat << '\n';
    }
}

}  // namespace terfs
