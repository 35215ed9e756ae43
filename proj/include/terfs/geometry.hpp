#pragma once

// Angular and projective math on the receiver-centred observation sphere.

#include "terfs/common.hpp"

#include <algorithm>

namespace terfs {

inline constexpr double kUnitTolerance = 1e-9;
inline constexpr double kCovarianceFloor = 1e-8;  // rad^2, added to projected diagonals
inline constexpr double kPoleMargin = 1e-4;       // rad, elevation clamp for Jacobians

/// Unit 3-vector.
class Direction {
public:
    Direction() : v_(1.0, 0.0, 0.0) {}

    /// Accepts only vectors whose norm is within 1e-9 of one.
    static Direction from_unit(const Vec3& v) {
        if (!(std::abs(v.norm() - 1.0) <= kUnitTolerance)) throw Error("non-unit direction");
        return Direction(v);
    }

    static Direction normalized(const Vec3& v) {
        const double n = v.norm();
        if (!(n > 0.0) || !std::isfinite(n)) throw Error("degenerate direction");
        return Direction(v / n);
    }

    const Vec3& vec() const { return v_; }
    double x() const { return v_.x(); }
    double y() const { return v_.y(); }
    double z() const { return v_.z(); }
    double dot(const Direction& o) const { return v_.dot(o.v_); }

private:
    explicit Direction(const Vec3& v) : v_(v) {}
    Vec3 v_;
};

/// Azimuth phi in [-pi, pi), elevation theta in [-pi/2, pi/2].
struct AngularCoord {
    double phi = 0.0;
    double theta = 0.0;
};

struct TangentFrame {
    Vec3 x_axis;
    Vec3 y_axis;
};

/// Equirectangular coordinates of a point seen from the origin. r_rx only fixes
/// the sphere the point is radially projected onto, so it does not enter the angles.
inline AngularCoord spherical_coords(const Vec3& point, double r_rx = 1.0) {
    if (!(r_rx > 0.0)) throw Error("sphere radius must be positive");
    const double n = point.norm();
    if (!(n > 0.0)) throw Error("degenerate direction");
    AngularCoord c;
    c.phi = std::atan2(point.y(), point.x());
    if (c.phi >= kPi) c.phi -= 2.0 * kPi;
    c.theta = kPi / 2.0 - std::acos(std::clamp(point.z() / n, -1.0, 1.0));
    return c;
}

/// Unit vector for an angular coordinate.
inline Vec3 direction_of(const AngularCoord& q) {
    const double ct = std::cos(q.theta);
    return {ct * std::cos(q.phi), ct * std::sin(q.phi), std::sin(q.theta)};
}

/// Seed axis for the tangent frame: the world axis least aligned with v
/// (first one on ties).
inline int tangent_seed_axis(const Vec3& v) {
    int axis = 0;
    for (int i = 1; i < 3; ++i)
        if (std::abs(v[i]) < std::abs(v[axis])) axis = i;
    return axis;
}

/// Deterministic right-handed frame (x, y, v) around the unit vector v.
inline TangentFrame tangent_frame(const Direction& v) {
    const Vec3& n = v.vec();
    if (!(std::abs(n.norm() - 1.0) <= kUnitTolerance)) throw Error("non-unit direction");
    Vec3 e = Vec3::Zero();
    e[tangent_seed_axis(n)] = 1.0;
    TangentFrame f;
    f.x_axis = (e - e.dot(n) * n).normalized();
    f.y_axis = n.cross(f.x_axis);
    return f;
}

/// ASG gate with a precomputed frame. Directions behind the lobe get weight 0.
inline double asg_weight(const Vec3& lobe_dir, const TangentFrame& frame, double lambda_x,
                         double lambda_y, const Vec3& d) {
    if (d.dot(lobe_dir) <= 0.0) return 0.0;
    const double sx = d.dot(frame.x_axis);
    const double sy = d.dot(frame.y_axis);
    return std::exp(-(lambda_x * sx * sx + lambda_y * sy * sy));
}

inline double asg_weight(const Direction& lobe_dir, double lambda_x, double lambda_y,
                         const Direction& d) {
    if (!(lambda_x > 0.0) || !(lambda_y > 0.0)) throw Error("ASG spread must be positive");
    return asg_weight(lobe_dir.vec(), tangent_frame(lobe_dir), lambda_x, lambda_y, d.vec());
}

/// Jacobian of (phi, theta) with respect to the offset p = mu - receiver, plus
/// the quantities needed to differentiate it again.
struct SphericalJacobian {
    Mat23 J = Mat23::Zero();
    double phi = 0.0;
    double theta = 0.0;  // after the pole clamp
    double depth = 0.0;
    bool theta_clamped = false;
};

inline SphericalJacobian spherical_jacobian(const Vec3& p) {
    SphericalJacobian s;
    s.depth = p.norm();
    if (!(s.depth > 0.0)) throw Error("zero depth");
    s.phi = std::atan2(p.y(), p.x());
    const double limit = kPi / 2.0 - kPoleMargin;
    const double theta = std::asin(std::clamp(p.z() / s.depth, -1.0, 1.0));
    s.theta = std::clamp(theta, -limit, limit);
    s.theta_clamped = s.theta != theta;
    const double sp = std::sin(s.phi), cp = std::cos(s.phi);
    const double st = std::sin(s.theta), ct = std::cos(s.theta);
    const double D = s.depth;
    s.J << -sp / (D * ct), cp / (D * ct), 0.0,
           -st * cp / D, -st * sp / D, ct / D;
    return s;
}

/// d(phi, theta)/d(x, y, z) of the receiver-centred spherical map at mu.
inline Mat23 projection_jacobian(const Vec3& mu, const Vec3& receiver) {
    return spherical_jacobian(mu - receiver).J;
}

/// Pulls a gradient on the Jacobian entries back to the offset p.
inline Vec3 spherical_jacobian_vjp(const SphericalJacobian& s, const Mat23& gJ, const Vec3& p) {
    const double sp = std::sin(s.phi), cp = std::cos(s.phi);
    const double st = std::sin(s.theta), ct = std::cos(s.theta);
    const double D = s.depth;

    Mat23 dphi, dtheta;
    dphi << -cp / (D * ct), -sp / (D * ct), 0.0,
            st * sp / D, -st * cp / D, 0.0;
    dtheta << -sp * st / (D * ct * ct), cp * st / (D * ct * ct), 0.0,
              -ct * cp / D, -ct * sp / D, -st / D;
    const double g_phi = (gJ.array() * dphi.array()).sum();
    const double g_theta = s.theta_clamped ? 0.0 : (gJ.array() * dtheta.array()).sum();
    const double g_depth = -(gJ.array() * s.J.array()).sum() / D;

    // Unclamped angle gradients: rows of J when away from the pole.
    const double rho2 = p.x() * p.x() + p.y() * p.y();
    Vec3 grad_phi = Vec3::Zero();
    if (rho2 > 0.0) grad_phi = Vec3(-p.y() / rho2, p.x() / rho2, 0.0);
    const Vec3 grad_theta = s.J.row(1).transpose();
    return g_phi * grad_phi + g_theta * grad_theta + g_depth * p / D;
}

inline bool is_spd(const Mat3& m) {
    if (!m.allFinite()) return false;
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, m.cwiseAbs().maxCoeff()))
        return false;
    Eigen::LLT<Mat3> llt(m);
    return llt.info() == Eigen::Success;
}

/// J Sigma J^T, symmetrised, with `floor` added to the diagonal.
inline Mat2 project_covariance(const Mat3& sigma3d, const Mat23& J, double floor = kCovarianceFloor) {
    if (!is_spd(sigma3d)) throw Error("covariance is not symmetric positive-definite");
    Mat2 s = J * sigma3d * J.transpose();
    s = 0.5 * (s + s.transpose()).eval();
    s.diagonal().array() += floor;
    return s;
}

inline double near_field_factor(double depth, double eta) { return 1.0 + eta * eta / (depth * depth); }

/// Distance-aware widening of the projected covariance.
inline Mat2 compensate_covariance(const Mat2& sigma2d, double depth, double eta) {
    if (!(depth > 0.0)) throw Error("zero depth");
    if (!(eta >= 0.0)) throw Error("near-field scale must be non-negative");
    return sigma2d * near_field_factor(depth, eta);
}

inline double max_eigenvalue(const Mat2& s) {
    const double mean = 0.5 * (s(0, 0) + s(1, 1));
    const double half = 0.5 * (s(0, 0) - s(1, 1));
    const double off = 0.5 * (s(0, 1) + s(1, 0));
    return mean + std::sqrt(half * half + off * off);
}

inline double coverage_radius(const Mat2& sigma2d) { return 3.0 * std::sqrt(max_eigenvalue(sigma2d)); }

}  // namespace terfs
