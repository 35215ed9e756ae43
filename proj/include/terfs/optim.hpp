#pragma once

// Adam with per-class learning rates and per-(kind, class) masks. Optimiser
// moments live in containers shaped like the scene so that births and prunes
// can append or erase primitives alongside their state.

#include "terfs/gradients.hpp"

#include <spdlog/spdlog.h>

#include <type_traits>

namespace terfs {

struct LearningRates {
    std::array<double, kParamClassCount> by_class = {
        1.6e-4,  // mu
        5e-3,    // scale
        5e-3,    // rotation
        5e-2,    // rho
        5e-3,    // velocity
        1e-2,    // lobe_dir
        1e-2,    // lambda
        5e-2,    // a_bar
        1e-2,    // psi
        5e-3,    // t_c
        5e-3,    // t_w
        5e-3,    // eta
    };
    double operator[](ParamClass c) const { return by_class[static_cast<int>(c)]; }
    double& operator[](ParamClass c) { return by_class[static_cast<int>(c)]; }
};

/// Which parameter classes may move, per primitive kind. The near-field scale
/// is a scene-level parameter with its own switch.
struct ParamMask {
    std::array<std::array<bool, kParamClassCount>, 3> allowed{};
    bool eta = false;

    bool operator()(PrimitiveKind k, ParamClass c) const {
        return allowed[static_cast<int>(k)][static_cast<int>(c)];
    }
    void set(PrimitiveKind k, ParamClass c, bool on = true) {
        allowed[static_cast<int>(k)][static_cast<int>(c)] = on;
    }
    static ParamMask all() {
        ParamMask m;
        for (auto& row : m.allowed) row.fill(true);
        m.eta = true;
        return m;
    }
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Moments and per-parameter step counts. Counting steps per parameter keeps
/// the bias correction right for parameters that join the optimisation late.
struct AdamState {
    std::vector<GaussianPrimitive> m, v, steps;
    double eta_m = 0.0, eta_v = 0.0, eta_steps = 0.0;

    static AdamState zeros_like(const Scene& scene) {
        AdamState s;
        s.sync(scene);
        return s;
    }

    /// Appends zero state for primitives added at the end of the scene.
    void sync(const Scene& scene) {
        for (std::size_t k = m.size(); k < scene.primitives.size(); ++k) {
            const auto z = terfs::zeros_like(scene.primitives[k]);
            m.push_back(z);
            v.push_back(z);
            steps.push_back(z);
        }
    }

    /// Drops state of removed primitives; `removed` ascending.
    void erase(const std::vector<std::size_t>& removed) {
        for (auto it = removed.rbegin(); it != removed.rend(); ++it) {
            m.erase(m.begin() + static_cast<std::ptrdiff_t>(*it));
            v.erase(v.begin() + static_cast<std::ptrdiff_t>(*it));
            steps.erase(steps.begin() + static_cast<std::ptrdiff_t>(*it));
        }
    }
};

namespace detail {

inline void adam_update(double& p, double g, double& m, double& v, double& t, double lr, const AdamConfig& c) {
    t += 1.0;
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g * g;
    const double m_hat = m / (1.0 - std::pow(c.beta1, t));
    const double v_hat = v / (1.0 - std::pow(c.beta2, t));
    p -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
}

template <class Prim>
auto param_slots(Prim& p) {
    std::vector<std::conditional_t<std::is_const_v<Prim>, const double*, double*>> out;
    for_each_param(p, [&](ParamClass, auto& x) { out.push_back(&x); });
    return out;
}

}  // namespace detail

/// One bias-corrected Adam step over the masked parameters, then constraint
/// projection (which renormalises lobe directions). Parameters whose gradient
/// is non-finite are left untouched; the return value counts them.
inline std::size_t adam_step(Scene& scene, const GradientBuffer& grad, AdamState& state, const LearningRates& lr,
                             const ParamMask& mask, const AdamConfig& cfg = {}, const ConstraintLimits& limits = {}) {
    if (grad.primitives.size() != scene.primitives.size() || state.m.size() != scene.primitives.size())
        throw Error("optimiser state does not match scene");
    std::size_t skipped = 0;
    for (std::size_t k = 0; k < scene.primitives.size(); ++k) {
        auto& prim = scene.primitives[k];
        const auto gs = detail::param_slots(grad.primitives[k]);
        const auto ms = detail::param_slots(state.m[k]);
        const auto vs = detail::param_slots(state.v[k]);
        const auto ts = detail::param_slots(state.steps[k]);
        if (gs.size() != ms.size()) throw Error("optimiser state does not match scene");
        std::size_t i = 0;
        for_each_param(prim, [&](ParamClass c, double& p) {
            const std::size_t j = i++;
            if (!mask(prim.kind, c)) return;
            const double g = *gs[j];
            if (!std::isfinite(g)) {
                ++skipped;
                return;
            }
            detail::adam_update(p, g, *ms[j], *vs[j], *ts[j], lr[c], cfg);
        });
    }
    if (mask.eta) {
        if (std::isfinite(grad.eta))
            detail::adam_update(scene.eta_raw, grad.eta, state.eta_m, state.eta_v, state.eta_steps,
                                lr[ParamClass::NearField], cfg);
        else
            ++skipped;
    }
    if (skipped > 0) spdlog::warn("skipped {} parameters with non-finite gradients", skipped);
    enforce_constraints(scene, limits);
    return skipped;
}

}  // namespace terfs
