#pragma once

// Training objectives on unit-scaled spectrogram images and on the lobe
// temporal gates. Each loss optionally writes its gradient.

#include "terfs/gradients.hpp"

#include <fftw3.h>

#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <utility>

namespace terfs {

struct ImageShape {
    int H = 0;
    int W = 0;
    std::size_t size() const { return static_cast<std::size_t>(H) * static_cast<std::size_t>(W); }
};

/// mean |pred - target|; subgradient 0 at equality.
inline double l1_loss(std::span<const double> pred, std::span<const double> target, std::span<double> grad = {},
                      double scale = 1.0) {
    if (pred.size() != target.size()) throw Error("image shapes differ");
    const double n = static_cast<double>(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        sum += std::abs(d);
        if (!grad.empty()) grad[i] += scale * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / n;
    }
    return sum / n;
}

// ---------------------------------------------------------------------------
// SSIM

namespace detail {

inline const std::array<double, 11>& ssim_kernel() {
    static const std::array<double, 11> k = [] {
        std::array<double, 11> w{};
        double s = 0.0;
        for (int i = 0; i < 11; ++i) {
            const double x = i - 5;
            w[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
            s += w[i];
        }
        for (auto& v : w) v /= s;
        return w;
    }();
    return k;
}

/// Separable 11-tap Gaussian filter, zero padded, same size. The kernel is
/// symmetric, so this operator is its own adjoint.
inline std::vector<double> gaussian_filter(const ImageShape& s, std::span<const double> img) {
    const auto& k = ssim_kernel();
    std::vector<double> tmp(s.size(), 0.0), out(s.size(), 0.0);
    for (int r = 0; r < s.H; ++r)
        for (int c = 0; c < s.W; ++c) {
            double acc = 0.0;
            for (int i = -5; i <= 5; ++i) {
                const int cc = c + i;
                if (cc >= 0 && cc < s.W) acc += k[i + 5] * img[r * s.W + cc];
            }
            tmp[r * s.W + c] = acc;
        }
    for (int r = 0; r < s.H; ++r)
        for (int c = 0; c < s.W; ++c) {
            double acc = 0.0;
            for (int i = -5; i <= 5; ++i) {
                const int rr = r + i;
                if (rr >= 0 && rr < s.H) acc += k[i + 5] * tmp[rr * s.W + c];
            }
            out[r * s.W + c] = acc;
        }
    return out;
}

}  // namespace detail

/// 1 - mean SSIM (Gaussian window 11, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2).
inline double ssim_loss(const ImageShape& s, std::span<const double> x, std::span<const double> y,
                        std::span<double> grad = {}, double scale = 1.0) {
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    const std::size_t n = s.size();
    if (x.size() != n || y.size() != n) throw Error("image shapes differ");
    std::vector<double> xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = detail::gaussian_filter(s, x);
    const auto my = detail::gaussian_filter(s, y);
    const auto exx = detail::gaussian_filter(s, xx);
    const auto eyy = detail::gaussian_filter(s, yy);
    const auto exy = detail::gaussian_filter(s, xy);

    double total = 0.0;
    std::vector<double> g_mx, g_exx, g_exy;
    if (!grad.empty()) {
        g_mx.assign(n, 0.0);
        g_exx.assign(n, 0.0);
        g_exy.assign(n, 0.0);
    }
    const double ds = -scale / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double vx = exx[i] - mx[i] * mx[i];
        const double vy = eyy[i] - my[i] * my[i];
        const double cxy = exy[i] - mx[i] * my[i];
        const double a1 = 2.0 * mx[i] * my[i] + C1, a2 = 2.0 * cxy + C2;
        const double b1 = mx[i] * mx[i] + my[i] * my[i] + C1, b2 = vx + vy + C2;
        const double ssim = a1 * a2 / (b1 * b2);
        total += ssim;
        if (!grad.empty()) {
            const double d_mx = 2.0 * my[i] * a2 / (b1 * b2) - ssim * 2.0 * mx[i] / b1;
            const double d_vx = -ssim / b2;
            const double d_cxy = 2.0 * a1 / (b1 * b2);
            g_mx[i] = ds * (d_mx - 2.0 * mx[i] * d_vx - my[i] * d_cxy);
            g_exx[i] = ds * d_vx;
            g_exy[i] = ds * d_cxy;
        }
    }
    if (!grad.empty()) {
        const auto f_mx = detail::gaussian_filter(s, g_mx);
        const auto f_exx = detail::gaussian_filter(s, g_exx);
        const auto f_exy = detail::gaussian_filter(s, g_exy);
        for (std::size_t i = 0; i < n; ++i) grad[i] += f_mx[i] + 2.0 * x[i] * f_exx[i] + y[i] * f_exy[i];
    }
    return 1.0 - total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Fourier magnitude loss

namespace detail {

/// FFTW plan pair with its own aligned buffers. Planning is serialised; execution
/// on distinct objects is thread-safe.
class FourierPlan {
public:
    explicit FourierPlan(const ImageShape& s) : shape_(s) {
        buffer_ = fftw_alloc_complex(s.size());
        std::lock_guard lock(planner_mutex());
        forward_ = fftw_plan_dft_2d(s.H, s.W, buffer_, buffer_, FFTW_FORWARD, FFTW_ESTIMATE);
        backward_ = fftw_plan_dft_2d(s.H, s.W, buffer_, buffer_, FFTW_BACKWARD, FFTW_ESTIMATE);
    }
    ~FourierPlan() {
        std::lock_guard lock(planner_mutex());
        fftw_destroy_plan(forward_);
        fftw_destroy_plan(backward_);
        fftw_free(buffer_);
    }
    FourierPlan(const FourierPlan&) = delete;
    FourierPlan& operator=(const FourierPlan&) = delete;

    std::complex<double>* data() { return reinterpret_cast<std::complex<double>*>(buffer_); }
    void forward() { fftw_execute(forward_); }
    void backward() { fftw_execute(backward_); }

    static FourierPlan& cached(const ImageShape& s) {
        thread_local std::map<std::pair<int, int>, std::unique_ptr<FourierPlan>> cache;
        auto& slot = cache[{s.H, s.W}];
        if (!slot) slot = std::make_unique<FourierPlan>(s);
        return *slot;
    }

private:
    static std::mutex& planner_mutex() {
        static std::mutex m;
        return m;
    }

    ImageShape shape_;
    fftw_complex* buffer_ = nullptr;
    fftw_plan forward_ = nullptr;
    fftw_plan backward_ = nullptr;
};

}  // namespace detail

/// Radial frequency weight 1 + f / f_max, f measured in cycles per sample with
/// signed (wrapped) indices.
inline std::vector<double> fourier_weights(const ImageShape& s) {
    std::vector<double> f(s.size());
    double fmax = 0.0;
    for (int r = 0; r < s.H; ++r)
        for (int c = 0; c < s.W; ++c) {
            const double fy = static_cast<double>(std::min(r, s.H - r)) / s.H;
            const double fx = static_cast<double>(std::min(c, s.W - c)) / s.W;
            f[r * s.W + c] = std::sqrt(fx * fx + fy * fy);
            fmax = std::max(fmax, f[r * s.W + c]);
        }
    for (auto& v : f) v = 1.0 + (fmax > 0.0 ? v / fmax : 0.0);
    return f;
}

/// mean_k w(f_k) |F(pred - target)_k| with F normalised by 1/(H W).
inline double fourier_loss(const ImageShape& s, std::span<const double> pred, std::span<const double> target,
                           std::span<double> grad = {}, double scale = 1.0) {
    const std::size_t n = s.size();
    if (pred.size() != n || target.size() != n) throw Error("image shapes differ");
    auto& plan = detail::FourierPlan::cached(s);
    auto* buf = plan.data();
    for (std::size_t i = 0; i < n; ++i) buf[i] = {pred[i] - target[i], 0.0};
    plan.forward();
    const auto weights = fourier_weights(s);
    const double nn = static_cast<double>(n);
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const std::complex<double> F = buf[k] / nn;
        const double mag = std::abs(F);
        total += weights[k] * mag;
        buf[k] = mag > 0.0 ? weights[k] * F / mag : std::complex<double>{0.0, 0.0};
    }
    if (!grad.empty()) {
        plan.backward();
        const double c = scale / (nn * nn);
        for (std::size_t i = 0; i < n; ++i) grad[i] += c * buf[i].real();
    }
    return total / nn;
}

// ---------------------------------------------------------------------------
// Reconstruction, temporal-difference and gate entropy

struct ReconTerms {
    double l1 = 0.0;
    double ssim = 0.0;  // 1 - SSIM
    double fourier = 0.0;
    double total = 0.0;
};

inline void check_recon_weights(double lambda_1, double lambda_2) {
    if (!(lambda_1 >= 0.0 && lambda_2 >= 0.0 && lambda_1 + lambda_2 < 1.0))
        throw Error("reconstruction weights must satisfy 0 <= lambda_1 + lambda_2 < 1");
}

/// (1 - l1 - l2) L1 + l1 (1 - SSIM) + l2 L_Fourier. Terms with zero weight are
/// still reported.
inline ReconTerms loss_recon(const ImageShape& s, std::span<const double> pred, std::span<const double> target,
                             double lambda_1, double lambda_2, std::span<double> grad = {}, double scale = 1.0) {
    check_recon_weights(lambda_1, lambda_2);
    ReconTerms r;
    const double w1 = 1.0 - lambda_1 - lambda_2;
    r.l1 = l1_loss(pred, target, grad, scale * w1);
    r.ssim = ssim_loss(s, pred, target, lambda_1 > 0.0 ? grad : std::span<double>{}, scale * lambda_1);
    r.fourier = fourier_loss(s, pred, target, lambda_2 > 0.0 ? grad : std::span<double>{}, scale * lambda_2);
    r.total = w1 * r.l1 + lambda_1 * r.ssim + lambda_2 * r.fourier;
    return r;
}

/// Pairwise temporal-difference loss with the inner norm taken as a mean over bins.
inline double loss_td(const std::vector<std::span<const double>>& preds,
                      const std::vector<std::span<const double>>& targets,
                      std::vector<std::span<double>>* grads = nullptr, double scale = 1.0) {
    const std::size_t B = preds.size();
    if (B < 2) throw Error("temporal-difference loss needs at least two timestamps");
    if (targets.size() != B) throw Error("prediction and target batches differ");
    const std::size_t n = preds[0].size();
    std::vector<std::vector<double>> err(B, std::vector<double>(n));
    for (std::size_t b = 0; b < B; ++b) {
        if (preds[b].size() != n || targets[b].size() != n) throw Error("image shapes differ");
        for (std::size_t i = 0; i < n; ++i) err[b][i] = preds[b][i] - targets[b][i];
    }
    const double norm = 1.0 / (static_cast<double>(B) * static_cast<double>(B - 1) * static_cast<double>(n));
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < B; ++c) {
            if (b == c) continue;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = err[b][i] - err[c][i];
                total += std::abs(d);
                if (grads) {
                    const double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                    (*grads)[b][i] += scale * norm * sg;
                    (*grads)[c][i] -= scale * norm * sg;
                }
            }
        }
    return total * norm;
}

/// Mean lobe-gate entropy over timestamps and primitives. If `grad` is given,
/// scale * dH/d(raw) is added to the t_c and log t_w slots.
inline double gate_entropy(const Scene& scene, std::span<const double> times, GradientBuffer* grad = nullptr,
                           double scale = 1.0) {
    const std::size_t K = scene.primitives.size();
    if (K == 0 || times.empty()) return 0.0;
    const double norm = 1.0 / (static_cast<double>(times.size()) * static_cast<double>(K));
    double total = 0.0;
    std::vector<double> xi, logp;
    for (double t : times) {
        for (std::size_t k = 0; k < K; ++k) {
            const auto& lobes = scene.primitives[k].lobes;
            const std::size_t M = lobes.size();
            if (M == 0) throw Error("primitive without lobes");
            xi.resize(M);
            logp.resize(M);
            double lo = std::numeric_limits<double>::infinity();
            for (std::size_t m = 0; m < M; ++m) {
                const double tw = lobes[m].t_w();
                const double dt = t - lobes[m].t_c;
                xi[m] = dt * dt / (2.0 * tw * tw);
                lo = std::min(lo, xi[m]);
            }
            double z = 0.0;
            for (std::size_t m = 0; m < M; ++m) z += std::exp(-(xi[m] - lo));
            const double log_z = std::log(z) - lo;
            double h = 0.0;
            for (std::size_t m = 0; m < M; ++m) {
                logp[m] = -xi[m] - log_z;
                h -= std::exp(logp[m]) * logp[m];
            }
            total += h;
            if (!grad) continue;
            for (std::size_t m = 0; m < M; ++m) {
                const double p = std::exp(logp[m]);
                const double g_xi = scale * norm * p * (logp[m] + h);
                const double tw = lobes[m].t_w();
                const double dt = t - lobes[m].t_c;
                auto& gl = grad->primitives[k].lobes[m];
                gl.t_c += g_xi * (-dt / (tw * tw));
                gl.log_t_w += g_xi * (-dt * dt / (tw * tw));
            }
        }
    }
    return total * norm;
}

}  // namespace terfs
