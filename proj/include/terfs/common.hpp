#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>

namespace terfs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Complex = std::complex<double>;

inline constexpr double kPi = std::numbers::pi;

/// Library-wide error type. Messages are one-line diagnostics.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Wraps an angle difference into (-pi, pi].
inline double wrap_angle(double a) {
    if (a > -kPi && a <= kPi) return a;
    // One period off; exact, and what remainder() would return.
    if (a > kPi && a < 3.0 * kPi) return a - 2.0 * kPi;
    if (a <= -kPi && a > -3.0 * kPi) return a + 2.0 * kPi;
    a = std::remainder(a, 2.0 * kPi);
    if (a <= -kPi) a += 2.0 * kPi;
    return a;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double softplus(double x) {
    if (x > 30.0) return x;
    return std::log1p(std::exp(x));
}

inline double softplus_inverse(double y) {
    if (y > 30.0) return y;
    return std::log(std::expm1(y));
}

}  // namespace terfs
