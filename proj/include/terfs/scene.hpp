#pragma once

// Scene parameter storage. Every learnable quantity is kept in its raw
// (pre-activation) form; accessors apply the activations.

#include "terfs/geometry.hpp"

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

namespace terfs {

inline constexpr double kLambdaMin = 1.0;
inline constexpr double kLambdaMax = 1e4;
inline constexpr double kSupportSigmas = 3.0;

enum class PrimitiveKind : std::uint32_t { Static = 0, Kinematic = 1, Transient = 2 };

inline std::string_view kind_name(PrimitiveKind k) {
    switch (k) {
        case PrimitiveKind::Static: return "static";
        case PrimitiveKind::Kinematic: return "kinematic";
        case PrimitiveKind::Transient: return "transient";
    }
    return "unknown";
}

struct TimeSpan {
    double t_min = 0.0;
    double t_max = 0.0;
    double length() const { return t_max - t_min; }
};

struct TemporalEnvelope {
    double t_c = 0.0;
    double t_w = 1.0;
    double support_lo() const { return t_c - kSupportSigmas * t_w; }
    double support_hi() const { return t_c + kSupportSigmas * t_w; }
};

struct AsgLobe {
    Vec3 v_raw = Vec3::UnitX();      // normalised on read
    Vec2 lambda_raw = Vec2::Zero();  // lambda = lambda_min + softplus(raw)
    double amp_raw = 0.0;            // a_bar = softplus(raw)
    double psi = 0.0;                // carrier phase, rad
    double t_c = 0.0;                // s
    double log_t_w = 0.0;            // t_w = exp(raw), s

    Direction direction() const { return Direction::normalized(v_raw); }
    double lambda_x() const { return kLambdaMin + softplus(lambda_raw.x()); }
    double lambda_y() const { return kLambdaMin + softplus(lambda_raw.y()); }
    double amplitude() const { return softplus(amp_raw); }
    double t_w() const { return std::exp(log_t_w); }
    TemporalEnvelope envelope() const { return {t_c, t_w()}; }

    static AsgLobe make(const Vec3& dir, double lambda_x, double lambda_y, double amplitude,
                        double psi, double t_c, double t_w) {
        AsgLobe l;
        l.v_raw = dir.normalized();
        l.lambda_raw = {softplus_inverse(lambda_x - kLambdaMin), softplus_inverse(lambda_y - kLambdaMin)};
        l.amp_raw = softplus_inverse(amplitude);
        l.psi = psi;
        l.t_c = t_c;
        l.log_t_w = std::log(t_w);
        return l;
    }
};

inline Mat3 quaternion_to_matrix(const Vec4& q_raw) {
    const Vec4 q = q_raw.normalized();
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 R;
    R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return R;
}

struct GaussianPrimitive {
    PrimitiveKind kind = PrimitiveKind::Static;
    Vec3 mu0 = Vec3::Zero();          // m, centre at t = 0
    Vec3 log_scale = Vec3::Zero();    // scale = exp(raw), m
    Vec4 rotation = Vec4(1, 0, 0, 0); // quaternion (w, x, y, z), normalised on read
    double rho_logit = 0.0;           // rho = logistic(raw)
    Vec3 velocity = Vec3::Zero();     // m/s, used only by kinematic primitives
    std::vector<AsgLobe> lobes;

    Vec3 scale() const { return log_scale.array().exp(); }
    double rho() const { return sigmoid(rho_logit); }
    Mat3 rotation_matrix() const { return quaternion_to_matrix(rotation); }
};

struct Scene {
    std::vector<GaussianPrimitive> primitives;
    double eta_raw = softplus_inverse(1.0);  // eta = softplus(raw), m
    double r_rx = 1.0;                       // m
    TimeSpan span;

    double eta() const { return softplus(eta_raw); }
    std::size_t size() const { return primitives.size(); }

    std::size_t count(PrimitiveKind k) const {
        std::size_t n = 0;
        for (const auto& p : primitives) n += p.kind == k;
        return n;
    }
    std::size_t lobe_count() const {
        std::size_t n = 0;
        for (const auto& p : primitives) n += p.lobes.size();
        return n;
    }
};

/// a_bar * exp(-(t - t_c)^2 / (2 t_w^2)), without the support gate.
inline double temporal_amplitude(const AsgLobe& lobe, double t) {
    const double tw = lobe.t_w();
    const double dt = t - lobe.t_c;
    return lobe.amplitude() * std::exp(-dt * dt / (2.0 * tw * tw));
}

/// Closed support [t_c - 3 t_w, t_c + 3 t_w].
inline bool is_active(const AsgLobe& lobe, double t) {
    const TemporalEnvelope e = lobe.envelope();
    return t >= e.support_lo() && t <= e.support_hi();
}

inline bool any_lobe_active(const GaussianPrimitive& prim, double t) {
    for (const auto& l : prim.lobes)
        if (is_active(l, t)) return true;
    return false;
}

inline Vec3 center_at(const GaussianPrimitive& prim, double t) {
    if (prim.kind != PrimitiveKind::Kinematic) return prim.mu0;
    return prim.mu0 + prim.velocity * t;
}

/// Sum over active lobes of a(t) e^{-j psi} w(d).
inline Complex directional_response(const GaussianPrimitive& prim, const Direction& d, double t) {
    Complex r{0.0, 0.0};
    for (const auto& lobe : prim.lobes) {
        if (!is_active(lobe, t)) continue;
        const double w = asg_weight(lobe.direction(), lobe.lambda_x(), lobe.lambda_y(), d);
        r += temporal_amplitude(lobe, t) * std::polar(1.0, -lobe.psi) * w;
    }
    return r;
}

/// R diag(scale^2) R^T.
inline Mat3 covariance_of(const GaussianPrimitive& prim) {
    const Mat3 R = prim.rotation_matrix();
    const Vec3 s = prim.scale();
    Mat3 sigma = R * s.array().square().matrix().asDiagonal() * R.transpose();
    return 0.5 * (sigma + sigma.transpose());
}

// ---------------------------------------------------------------------------
// Raw parameter enumeration

enum class ParamClass : int {
    Position = 0,
    Scale,
    Rotation,
    Opacity,
    Velocity,
    LobeDirection,
    Spread,
    Amplitude,
    Phase,
    TemporalCenter,
    TemporalWidth,
    NearField,
};
inline constexpr int kParamClassCount = 12;

inline constexpr std::array<std::string_view, kParamClassCount> kParamClassNames = {
    "mu", "scale", "rotation", "rho", "velocity", "lobe_dir",
    "lambda", "a_bar", "psi", "t_c", "t_w", "eta"};

inline std::string_view param_class_name(ParamClass c) { return kParamClassNames[static_cast<int>(c)]; }

/// Visits every raw parameter of a primitive in storage order. Works on any
/// GaussianPrimitive-shaped container, including gradient and optimiser slots.
template <class Prim, class Fn>
void for_each_param(Prim& p, Fn&& fn) {
    for (int i = 0; i < 3; ++i) fn(ParamClass::Position, p.mu0[i]);
    for (int i = 0; i < 3; ++i) fn(ParamClass::Scale, p.log_scale[i]);
    for (int i = 0; i < 4; ++i) fn(ParamClass::Rotation, p.rotation[i]);
    fn(ParamClass::Opacity, p.rho_logit);
    for (int i = 0; i < 3; ++i) fn(ParamClass::Velocity, p.velocity[i]);
    for (auto& l : p.lobes) {
        for (int i = 0; i < 3; ++i) fn(ParamClass::LobeDirection, l.v_raw[i]);
        for (int i = 0; i < 2; ++i) fn(ParamClass::Spread, l.lambda_raw[i]);
        fn(ParamClass::Amplitude, l.amp_raw);
        fn(ParamClass::Phase, l.psi);
        fn(ParamClass::TemporalCenter, l.t_c);
        fn(ParamClass::TemporalWidth, l.log_t_w);
    }
}

/// A zero-valued container with the same layout as `prim`.
inline GaussianPrimitive zeros_like(const GaussianPrimitive& prim) {
    GaussianPrimitive z = prim;
    for_each_param(z, [](ParamClass, double& v) { v = 0.0; });
    return z;
}

// ---------------------------------------------------------------------------
// Constraints

struct ConstraintLimits {
    double min_transient_width = 0.1;  // s, the frame interval
};

/// Projects raw parameters back onto the feasible set after an update: lobe
/// directions and quaternions are renormalised, spreads capped at lambda_max,
/// temporal widths kept within their kind's range and non-kinematic velocities zeroed.
inline void enforce_constraints(Scene& scene, const ConstraintLimits& limits = {}) {
    const double span = scene.span.length();
    const double lambda_raw_max = softplus_inverse(kLambdaMax - kLambdaMin);
    for (auto& p : scene.primitives) {
        const double qn = p.rotation.norm();
        if (qn > 0.0) p.rotation /= qn;
        if (p.kind != PrimitiveKind::Kinematic) p.velocity.setZero();
        for (auto& l : p.lobes) {
            const double vn = l.v_raw.norm();
            if (vn > 0.0) l.v_raw /= vn;
            l.lambda_raw = l.lambda_raw.cwiseMin(lambda_raw_max);
            if (span > 0.0) {
                if (p.kind == PrimitiveKind::Static) {
                    l.log_t_w = std::max(l.log_t_w, std::log(span));
                } else if (p.kind == PrimitiveKind::Transient) {
                    const double lo = std::log(limits.min_transient_width);
                    const double hi = std::log(std::max(span / 4.0, limits.min_transient_width));
                    l.log_t_w = std::clamp(l.log_t_w, lo, hi);
                }
            }
        }
    }
}

/// Throws on the first violated scene invariant.
inline void validate_scene(const Scene& scene) {
    if (!(scene.eta() >= 0.0) || !std::isfinite(scene.eta_raw)) throw Error("invalid near-field scale");
    if (!(scene.r_rx > 0.0)) throw Error("invalid sphere radius");
    const double span = scene.span.length();
    for (std::size_t k = 0; k < scene.primitives.size(); ++k) {
        const auto& p = scene.primitives[k];
        bool finite = true;
        for_each_param(p, [&](ParamClass, const double& v) { finite &= std::isfinite(v); });
        const std::string where = "primitive " + std::to_string(k) + ": ";
        if (!finite) throw Error(where + "non-finite parameter");
        if (!(p.rotation.norm() > 0.0)) throw Error(where + "zero quaternion");
        if (p.lobes.empty()) throw Error(where + "no lobes");
        if (p.kind != PrimitiveKind::Kinematic && p.velocity.norm() != 0.0)
            throw Error(where + "non-kinematic primitive with velocity");
        for (const auto& l : p.lobes) {
            if (!(l.v_raw.norm() > 0.0)) throw Error(where + "zero lobe direction");
            if (l.lambda_x() < kLambdaMin || l.lambda_x() > kLambdaMax * (1 + 1e-12) ||
                l.lambda_y() < kLambdaMin || l.lambda_y() > kLambdaMax * (1 + 1e-12))
                throw Error(where + "spread out of range");
            if (span > 0.0 && p.kind == PrimitiveKind::Static && l.t_w() < span * (1 - 1e-12))
                throw Error(where + "static lobe narrower than the time span");
            if (span > 0.0 && p.kind == PrimitiveKind::Transient && l.t_w() > span / 4.0 * (1 + 1e-12))
                throw Error(where + "transient lobe wider than a quarter span");
        }
    }
}

}  // namespace terfs
