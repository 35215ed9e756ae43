#include "terfs/train.hpp"

#include <catch_amalgamated.hpp>

#include <random>

using namespace terfs;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

std::vector<double> random_image(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = U(rng);
    return v;
}

// Direct O(n^2) DFT version of the weighted magnitude loss.
double direct_fourier(const ImageShape& s, const std::vector<double>& a, const std::vector<double>& b) {
    const auto w = fourier_weights(s);
    double total = 0.0;
    for (int u = 0; u < s.H; ++u)
        for (int v = 0; v < s.W; ++v) {
            Complex F{0.0, 0.0};
            for (int r = 0; r < s.H; ++r)
                for (int c = 0; c < s.W; ++c)
                    F += (a[r * s.W + c] - b[r * s.W + c]) *
                         std::polar(1.0, -2.0 * kPi * (double(u * r) / s.H + double(v * c) / s.W));
            total += w[u * s.W + v] * std::abs(F) / static_cast<double>(s.size());
        }
    return total / static_cast<double>(s.size());
}

// Mean SSIM with an explicit 2D window, zero padded.
double direct_ssim(const ImageShape& s, const std::vector<double>& x, const std::vector<double>& y) {
    double g[11];
    double norm = 0.0;
    for (int i = 0; i < 11; ++i) norm += g[i] = std::exp(-(i - 5.0) * (i - 5.0) / (2 * 1.5 * 1.5));
    double total = 0.0;
    for (int r = 0; r < s.H; ++r)
        for (int c = 0; c < s.W; ++c) {
            double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
            for (int i = -5; i <= 5; ++i)
                for (int j = -5; j <= 5; ++j) {
                    const int rr = r + i, cc = c + j;
                    if (rr < 0 || rr >= s.H || cc < 0 || cc >= s.W) continue;
                    const double w = g[i + 5] * g[j + 5] / (norm * norm);
                    const double a = x[rr * s.W + cc], b = y[rr * s.W + cc];
                    mx += w * a, my += w * b, xx += w * a * a, yy += w * b * b, xy += w * a * b;
                }
            const double C1 = 1e-4, C2 = 9e-4;
            total += (2 * mx * my + C1) * (2 * (xy - mx * my) + C2) /
                     ((mx * mx + my * my + C1) * (xx - mx * mx + yy - my * my + C2));
        }
    return total / static_cast<double>(s.size());
}

template <class F>
double fd(std::vector<double> x, std::size_t i, F&& f, double h = 1e-6) {
    x[i] += h;
    const double a = f(x);
    x[i] -= 2 * h;
    return (a - f(x)) / (2 * h);
}

}  // namespace

TEST_CASE("reconstruction loss closed forms", "[losses]") {
    const ImageShape s{6, 10};
    std::mt19937_64 rng(1);
    const auto a = random_image(rng, s.size());
    const auto r0 = loss_recon(s, a, a, 0.2, 0.1);
    CHECK(r0.total == 0.0);
    CHECK(r0.l1 == 0.0);
    CHECK(r0.fourier == 0.0);
    CHECK_THAT(r0.ssim, WithinAbs(0.0, 1e-15));

    std::vector<double> b(a);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += (i % 2 ? 0.1 : -0.1);
    CHECK_THAT(loss_recon(s, b, a, 0.0, 0.0).total, WithinAbs(0.1, 1e-15));

    CHECK_THROWS(loss_recon(s, a, a, 0.6, 0.4));
    CHECK_THROWS(loss_recon(s, a, a, -0.1, 0.2));
    CHECK_THROWS(loss_recon(s, a, std::vector<double>(5), 0.2, 0.1));
}

TEST_CASE("Fourier loss against a direct DFT", "[losses][fourier]") {
    const ImageShape s{8, 8};
    const std::vector<double> zero(s.size(), 0.0), offset(s.size(), 0.25);
    // A constant offset only excites the DC bin, whose weight is 1.
    CHECK_THAT(fourier_loss(s, offset, zero), WithinRel(0.25 / 64.0, 1e-14));
    CHECK_THAT(direct_fourier(s, offset, zero), WithinRel(0.25 / 64.0, 1e-12));

    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        const auto a = random_image(rng, s.size()), b = random_image(rng, s.size());
        CHECK_THAT(fourier_loss(s, a, b), WithinRel(direct_fourier(s, a, b), 1e-12));
    }
    const ImageShape odd{5, 7};
    const auto a = random_image(rng, odd.size()), b = random_image(rng, odd.size());
    CHECK_THAT(fourier_loss(odd, a, b), WithinRel(direct_fourier(odd, a, b), 1e-12));

    const auto w = fourier_weights(s);
    CHECK(w[0] == 1.0);
    CHECK(*std::max_element(w.begin(), w.end()) == 2.0);
}

TEST_CASE("SSIM against a direct windowed sum", "[losses][ssim]") {
    const ImageShape s{9, 14};
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 3; ++trial) {
        const auto a = random_image(rng, s.size()), b = random_image(rng, s.size());
        CHECK_THAT(ssim_loss(s, a, b), WithinAbs(1.0 - direct_ssim(s, a, b), 1e-12));
    }
}

TEST_CASE("image loss gradients match finite differences", "[losses]") {
    const ImageShape s{7, 9};
    std::mt19937_64 rng(4);
    const auto a = random_image(rng, s.size()), b = random_image(rng, s.size());
    auto check = [&](auto&& loss, double tol) {
        std::vector<double> g(s.size(), 0.0);
        loss(a, std::span<double>(g));
        for (std::size_t i = 0; i < s.size(); i += 3) {
            const double n = fd(a, i, [&](const std::vector<double>& x) { return loss(x, std::span<double>{}); });
            CHECK_THAT(g[i], WithinAbs(n, tol * std::max(1.0, std::abs(n))));
        }
    };
    check([&](const std::vector<double>& x, std::span<double> g) { return ssim_loss(s, x, b, g, 1.0); }, 1e-7);
    check([&](const std::vector<double>& x, std::span<double> g) { return fourier_loss(s, x, b, g, 1.0); }, 1e-7);
    check([&](const std::vector<double>& x, std::span<double> g) { return l1_loss(x, b, g, 1.0); }, 1e-7);
    check([&](const std::vector<double>& x, std::span<double> g) { return loss_recon(s, x, b, 0.3, 0.2, g).total; },
          1e-7);
}

TEST_CASE("temporal-difference loss", "[losses][td]") {
    const std::size_t n = 20;
    std::mt19937_64 rng(5);
    std::vector<std::vector<double>> targets, preds;
    for (int b = 0; b < 4; ++b) targets.push_back(random_image(rng, n));
    auto spans = [](const std::vector<std::vector<double>>& v) {
        return std::vector<std::span<const double>>(v.begin(), v.end());
    };
    CHECK(loss_td(spans(targets), spans(targets)) == 0.0);

    // Gauge invariance: one constant image added to every frame.
    const auto offset = random_image(rng, n);
    preds = targets;
    for (auto& p : preds)
        for (std::size_t i = 0; i < n; ++i) p[i] += offset[i];
    CHECK_THAT(loss_td(spans(preds), spans(targets)), WithinAbs(0.0, 1e-15));
    for (auto& p : preds)
        for (auto& v : p) v += 0.3;
    CHECK_THAT(loss_td(spans(preds), spans(targets)), WithinAbs(0.0, 1e-15));

    // B = 2 with the frame difference off by c everywhere.
    std::vector<std::vector<double>> t2{targets[0], targets[1]}, p2 = t2;
    for (auto& v : p2[0]) v += 0.07;
    CHECK_THAT(loss_td(spans(p2), spans(t2)), WithinRel(0.07, 1e-12));

    CHECK_THROWS(loss_td(spans({targets[0]}), spans({targets[0]})));

    // Gradient.
    preds = targets;
    for (auto& p : preds)
        for (auto& v : p) v += 0.2 * (std::uniform_real_distribution<double>(-1, 1)(rng));
    std::vector<std::vector<double>> g(4, std::vector<double>(n, 0.0));
    std::vector<std::span<double>> gs(g.begin(), g.end());
    loss_td(spans(preds), spans(targets), &gs, 1.0);
    for (int b = 0; b < 4; ++b)
        for (std::size_t i = 0; i < n; i += 4) {
            auto p = preds;
            const double h = 1e-7;
            p[b][i] += h;
            const double up = loss_td(spans(p), spans(targets));
            p[b][i] -= 2 * h;
            const double down = loss_td(spans(p), spans(targets));
            CHECK_THAT(g[b][i], WithinAbs((up - down) / (2 * h), 1e-7));
        }
}

TEST_CASE("lobe-gate entropy", "[losses][gate]") {
    Scene s;
    GaussianPrimitive p;
    for (int m = 0; m < 4; ++m) p.lobes.push_back(AsgLobe::make({1, 0, 0}, 2, 2, 1e-3, 0, 1.0, 0.5));
    s.primitives.push_back(p);
    const std::vector<double> times{0.2, 1.0, 1.7};
    CHECK_THAT(gate_entropy(s, times), WithinAbs(std::log(4.0), 1e-12));
    CHECK_THAT(std::log(4.0), WithinAbs(1.38629, 5e-6));

    // One lobe 20 nats ahead of the others.
    Scene one = s;
    for (int m = 1; m < 4; ++m) one.primitives[0].lobes[m].t_c = 1.0 + std::sqrt(2 * 20.0) * 0.5 + 1e-9;
    const double h = gate_entropy(one, std::vector<double>{1.0});
    CHECK(h < 1e-6);
    CHECK(h >= 0.0);

    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        Scene r;
        for (int k = 0; k < 3; ++k) {
            GaussianPrimitive q;
            const int M = 1 + trial % 4;
            for (int m = 0; m < M; ++m)
                q.lobes.push_back(AsgLobe::make({1, 0, 0}, 2, 2, 1e-3, 0, 10 * U(rng), 0.05 + 3 * U(rng)));
            r.primitives.push_back(q);
        }
        const std::vector<double> t{10 * U(rng), 10 * U(rng)};
        const double H = gate_entropy(r, t);
        CHECK(H >= 0.0);
        CHECK(H <= std::log(1 + trial % 4) + 1e-12);
    }
}

TEST_CASE("gate entropy gradient", "[losses][gate]") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    Scene s;
    for (int k = 0; k < 2; ++k) {
        GaussianPrimitive q;
        for (int m = 0; m < 3; ++m) q.lobes.push_back(AsgLobe::make({1, 0, 0}, 2, 2, 1e-3, 0, 4 * U(rng), 0.5 + U(rng)));
        s.primitives.push_back(q);
    }
    const std::vector<double> t{0.5, 2.0, 3.1};
    GradientBuffer g = GradientBuffer::zeros_like(s);
    gate_entropy(s, t, &g, 1.0);
    for (int k = 0; k < 2; ++k)
        for (int m = 0; m < 3; ++m) {
            for (double AsgLobe::*field : {&AsgLobe::t_c, &AsgLobe::log_t_w}) {
                Scene a = s, b = s;
                a.primitives[k].lobes[m].*field += 1e-6;
                b.primitives[k].lobes[m].*field -= 1e-6;
                const double n = (gate_entropy(a, t) - gate_entropy(b, t)) / 2e-6;
                CHECK_THAT(g.primitives[k].lobes[m].*field, WithinAbs(n, 1e-8));
            }
        }
}

TEST_CASE("batch loss bookkeeping", "[losses]") {
    SynthSpec spec;
    spec.n_static = 6;
    spec.n_transient = 2;
    spec.grid = {12, 24};
    spec.frames = 10;
    const Scene scene = synth_scene(spec);
    const Vec3 rx(0, 0, 1);
    std::vector<std::vector<double>> targets;
    std::vector<double> times{0.1, 0.4, 0.5};
    std::mt19937_64 rng(7);
    for (double t : times) {
        auto u = unit_image(render(scene, rx, t, spec.grid).power_dbm);
        for (auto& v : u) v = std::clamp(v + 0.1 * (std::uniform_real_distribution<double>(-1, 1)(rng)), 0.0, 1.0);
        targets.push_back(u);
    }
    std::vector<BatchItem> batch;
    for (std::size_t b = 0; b < times.size(); ++b) batch.push_back({rx, times[b], targets[b]});

    const auto r = evaluate_batch(scene, spec.grid, batch, {0.2, 0.1, 0.5, 0.01});
    CHECK(std::abs(r.total - (r.recon + 0.5 * r.td + 0.01 * r.gate_entropy)) < 1e-12);
    CHECK(r.l1 > 0.0);
    CHECK(r.td > 0.0);
    CHECK(r.gate_entropy > 0.0);
    const auto plain = evaluate_batch(scene, spec.grid, batch, {0.2, 0.1, 0.0, 0.0});
    CHECK(plain.total == plain.recon);
    CHECK(plain.recon == r.recon);

    // Perfect prediction leaves only the entropy term.
    std::vector<std::vector<double>> exact;
    for (double t : times) exact.push_back(unit_image(render(scene, rx, t, spec.grid).power_dbm));
    std::vector<BatchItem> perfect;
    for (std::size_t b = 0; b < times.size(); ++b) perfect.push_back({rx, times[b], exact[b]});
    const auto p = evaluate_batch(scene, spec.grid, perfect, {0.2, 0.1, 0.5, 0.01});
    CHECK(p.recon < 1e-12);
    CHECK(p.td == 0.0);
    CHECK_THAT(p.total, WithinAbs(0.01 * gate_entropy(scene, times), 1e-12));
    CHECK(p.total > 0.0);
}
