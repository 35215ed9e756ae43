#include "reference.hpp"
#include "terfs/dataset.hpp"

#include <catch_amalgamated.hpp>

#include <random>

using namespace terfs;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

GaussianPrimitive isotropic(const Vec3& mu, double sigma, double rho) {
    GaussianPrimitive p;
    p.mu0 = mu;
    p.log_scale = Vec3::Constant(std::log(sigma));
    p.rho_logit = logit(rho);
    return p;
}

Scene random_scene(std::uint64_t seed, int K) {
    SynthSpec spec;
    spec.n_static = K - K / 3;
    spec.n_kinematic = K / 6;
    spec.n_transient = K / 3 - K / 6;
    spec.frames = 20;
    spec.seed = seed;
    return synth_scene(spec);
}

}  // namespace

TEST_CASE("projection composes the closed forms", "[render][project]") {
    const double D = 2.0, sigma = 0.1;
    Scene s;
    s.eta_raw = softplus_inverse(D);
    s.primitives.push_back(isotropic({D, 0, 0}, sigma, 0.5));
    s.primitives[0].lobes.push_back(AsgLobe::make({-1, 0, 0}, 50, 50, 1e-3, 0, 0, 100));
    const auto proj = project_primitives(s, Vec3::Zero(), 0.0);
    REQUIRE(proj.size() == 1);
    const double expected = 2.0 * (sigma * sigma / (D * D) + kCovarianceFloor);
    CHECK_THAT(proj[0].sigma2d(0, 0), WithinRel(expected, 1e-12));
    CHECK_THAT(proj[0].sigma2d(1, 1), WithinRel(expected, 1e-12));
    CHECK(std::abs(proj[0].sigma2d(0, 1)) < 1e-18);
    CHECK_THAT(proj[0].depth, WithinRel(D, 1e-15));

    // Gate: no active lobe at t = 1000.
    CHECK(project_primitives(s, Vec3::Zero(), 1000.0).empty());
    // Culling thresholds.
    s.primitives[0].rho_logit = logit(0.5 / 255.0);
    CHECK(project_primitives(s, Vec3::Zero(), 0.0).empty());
    s.primitives[0].rho_logit = logit(0.5);
    CHECK(project_primitives(s, Vec3(D - 0.05, 0, 0), 0.0).empty());
    CHECK(project_primitives(Scene{}, Vec3::Zero(), 0.0).empty());
}

TEST_CASE("coverage radii match an independent eigen solve", "[render][project]") {
    const Scene s = random_scene(21, 30);
    const auto proj = project_primitives(s, Vec3(0, 0, 1), 5.0);
    REQUIRE(proj.size() > 10);
    for (const auto& g : proj) {
        Eigen::SelfAdjointEigenSolver<Mat2> es(g.sigma2d);
        CHECK_THAT(g.coverage_radius, WithinRel(3.0 * std::sqrt(es.eigenvalues().maxCoeff()), 1e-12));
        CHECK(std::abs(g.sigma2d(0, 1) - g.sigma2d(1, 0)) <= 1e-12 * g.sigma2d.norm());
        CHECK(es.eigenvalues().minCoeff() > 0.0);
        CHECK(g.depth > 0.0);
    }
}

TEST_CASE("depth sort", "[render][sort]") {
    auto make = [](std::vector<double> depths) {
        std::vector<ProjectedGaussian> v(depths.size());
        for (std::size_t i = 0; i < depths.size(); ++i) v[i].depth = depths[i], v[i].primitive_index = static_cast<int>(i);
        return v;
    };
    auto a = make({5, 2, 9});
    depth_sort(a);
    CHECK(a[0].primitive_index == 1);
    CHECK(a[1].primitive_index == 0);
    CHECK(a[2].primitive_index == 2);

    auto b = make({3, 3, 3, 1});
    depth_sort(b);
    CHECK(b[0].primitive_index == 3);
    CHECK(b[1].primitive_index == 0);
    CHECK(b[2].primitive_index == 1);
    CHECK(b[3].primitive_index == 2);

    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> U(0.1, 50.0);
    std::vector<double> d(10000);
    for (auto& x : d) x = std::round(U(rng) * 100.0) / 100.0;  // force some ties
    auto c = make(d);
    depth_sort(c);
    std::vector<int> seen(d.size(), 0);
    for (std::size_t i = 0; i < c.size(); ++i) {
        ++seen[c[i].primitive_index];
        if (i > 0) {
            CHECK(c[i - 1].depth <= c[i].depth);
            if (c[i - 1].depth == c[i].depth) CHECK(c[i - 1].primitive_index < c[i].primitive_index);
        }
    }
    CHECK(std::all_of(seen.begin(), seen.end(), [](int n) { return n == 1; }));
}

TEST_CASE("opacity", "[render][opacity]") {
    ProjectedGaussian g;
    g.mu2d = {0.3, 0.2};
    g.sigma2d = Mat2::Identity();
    CHECK_THAT(opacity(g, 0.4, {0.3, 0.2}), WithinRel(0.4, 1e-15));
    CHECK_THAT(opacity(g, 0.4, {1.3, 0.2}), WithinRel(0.4 * std::exp(-0.5), 1e-15));
    CHECK(opacity(g, 1.0, {0.3, 0.2}) == kAlphaMax);

    // Azimuth wraps across the seam.
    g.mu2d = {kPi - 0.1, 0.0};
    g.sigma2d = 0.01 * Mat2::Identity();
    const Vec2 dq = angular_offset(g, {-kPi + 0.1, 0.0});
    CHECK_THAT(dq.x(), WithinAbs(0.2, 1e-12));
    CHECK_THAT(opacity(g, 0.5, {-kPi + 0.1, 0.0}), WithinRel(0.5 * std::exp(-0.5 * 0.04 / 0.01), 1e-10));

    g.sigma2d = Mat2::Zero();
    CHECK_THROWS(opacity(g, 0.5, {0.0, 0.0}));
}

TEST_CASE("compositing small cases", "[render][composite]") {
    Scene s;
    s.eta_raw = softplus_inverse(0.0 + 1e-9);
    auto p = isotropic({3, 0, 0.5}, 0.3, 0.4);
    p.lobes.push_back(AsgLobe::make({-1, 0, 0}, 5, 5, 1e-3, 0.7, 0, 100));
    s.primitives.push_back(p);
    const AngularGrid grid{16, 32};
    const FramePlan plan = prepare_frame(s, Vec3::Zero(), 0.0, grid);
    for (std::size_t j = 0; j < grid.size(); ++j) {
        const auto q = grid.bin_center(j);
        const Vec2 dq = angular_offset(plan.sorted[0], q);
        if (!covers(plan.sorted[0], dq)) {
            CHECK(composite_bin(plan, j) == Complex(0.0, 0.0));
            continue;
        }
        const double alpha = opacity(plan.sorted[0], 0.4, q);
        const Vec3 point = direction_of(q);
        const Complex R = directional_response(s.primitives[0], Direction::normalized(point - p.mu0), 0.0);
        CHECK(std::abs(composite_bin(plan, j) - alpha * R) <= 1e-15 * std::abs(alpha * R));
    }

    // An almost opaque front primitive leaves 1e-4 transmittance.
    std::vector<ProjectedGaussian> two(2);
    Scene s2 = s;
    s2.primitives.push_back(s.primitives[0]);
    s2.primitives[1].mu0 = {6, 0, 1.0};
    for (int i = 0; i < 2; ++i) {
        two[i].mu2d = spherical_coords(s2.primitives[i].mu0);
        two[i].sigma2d = 0.01 * Mat2::Identity();
        two[i].inv_sigma = two[i].sigma2d.inverse();
        two[i].coverage_radius = 0.3;
        two[i].rho = 0.5;
        two[i].center = s2.primitives[i].mu0;
        two[i].primitive_index = i;
    }
    two[0].mu2d = two[1].mu2d;
    two[0].rho = 1.0;  // clamped to 1 - 1e-4
    const AngularCoord q = two[1].mu2d;
    const Complex z_both = composite_bin(two, q, Vec3::Zero(), 0.0, s2);
    const Complex z_front = composite_bin(std::span(two).first(1), q, Vec3::Zero(), 0.0, s2);
    const Complex R1 = directional_response(s2.primitives[1], Direction::normalized(direction_of(q) - two[1].center), 0.0);
    CHECK(std::abs((z_both - z_front) - 1e-4 * 0.5 * R1) < 1e-12 * std::abs(R1));
}

TEST_CASE("transmittance with equal opacities", "[render][composite]") {
    // All alpha equal to a: contributions a (1 - a)^(k-1).
    Scene s;
    const double a = 0.3;
    std::vector<ProjectedGaussian> list(5);
    for (int k = 0; k < 5; ++k) {
        auto p = isotropic({2.0 + k, 0, 0}, 0.2, a);
        p.lobes.push_back(AsgLobe::make({-1, 0, 0}, 1.0 + 1e-12, 1.0 + 1e-12, 1.0 + k, 0, 0, 100));
        s.primitives.push_back(p);
        list[k].mu2d = {0.0, 0.0};
        list[k].sigma2d = list[k].inv_sigma = Mat2::Identity();
        list[k].coverage_radius = 3.0;
        list[k].rho = a;
        list[k].center = p.mu0;
        list[k].primitive_index = k;
    }
    const Complex z = composite_bin(list, {0.0, 0.0}, Vec3::Zero(), 0.0, s);
    Complex expected{0.0, 0.0};
    for (int k = 0; k < 5; ++k) {
        const Direction d = Direction::normalized(Vec3(1, 0, 0) - s.primitives[k].mu0);
        expected += a * std::pow(1 - a, k) * directional_response(s.primitives[k], d, 0.0);
    }
    CHECK(std::abs(z - expected) < 1e-13 * std::abs(expected));
}

TEST_CASE("binned renderer matches the naive reference", "[render][composite]") {
    const Scene s6 = random_scene(13, 6);
    const AngularGrid grid{45, 90};
    for (double t : {0.0, 0.9, 1.7}) {
        const auto fast = render(s6, Vec3(0, 0, 1), t, grid);
        const auto slow = testing::naive_render(s6, Vec3(0, 0, 1), t, grid);
        CHECK(testing::max_relative_field_error(fast.z, slow) < 1e-6);
    }
    // The all-bins plan gives the same field.
    const auto full = render_plan(prepare_frame(s6, Vec3(1, 2, 1), 0.5, grid, false));
    const auto binned = render(s6, Vec3(1, 2, 1), 0.5, grid);
    CHECK(testing::max_relative_field_error(binned.z, full.z) < 1e-6);
}

TEST_CASE("render basics", "[render]") {
    const AngularGrid grid{18, 36};
    const auto empty = render(Scene{}, Vec3::Zero(), 0.0, grid);
    for (double v : empty.power_dbm) CHECK(v == -100.0);
    CHECK_THAT(empty.rss_dbm, WithinAbs(-100.0 + 10.0 * std::log10(grid.size()), 1e-9));

    const Scene s = random_scene(2, 24);
    const auto a = render(s, Vec3(1, -1, 1), 3.0, grid);
    const auto b = render(s, Vec3(1, -1, 1), 3.0, grid);
    const auto c = render(s, Vec3(1, -1, 1), 3.0, grid, 4);
    CHECK(a.z == b.z);
    CHECK(a.z == c.z);
    CHECK(a.power_dbm == c.power_dbm);
    CHECK(a.rss_dbm == c.rss_dbm);
    CHECK(a.rss_dbm == rss_from_spectrogram(a.power_dbm));
    for (std::size_t j = 0; j < a.z.size(); ++j)
        CHECK(a.power_dbm[j] == 10.0 * std::log10(std::norm(a.z[j]) + kPowerFloorMw));
}

TEST_CASE("a single aimed lobe peaks in its own bin", "[render]") {
    const AngularGrid grid{30, 60};
    // Centre placed exactly on a bin centre.
    const AngularCoord q = grid.bin_center(12, 41);
    const Vec3 mu = 4.0 * direction_of(q);
    Scene s;
    auto p = isotropic(mu, 0.15, 0.6);
    p.lobes.push_back(AsgLobe::make(-mu, 30, 30, 5e-3, 0.2, 0, 100));
    s.primitives.push_back(p);
    const auto out = render(s, Vec3::Zero(), 0.0, grid);
    const auto it = std::max_element(out.power_dbm.begin(), out.power_dbm.end());
    CHECK(static_cast<std::size_t>(it - out.power_dbm.begin()) == static_cast<std::size_t>(12 * 60 + 41));
}

TEST_CASE("field magnitude is Lipschitz in opacity", "[render]") {
    // d|z|/drho_k <= sup|R_k| alone holds for an unoccluded primitive; with
    // primitives behind it the dimming of their light adds sup over l > k of |R_l|.
    const Scene s = random_scene(31, 12);
    const AngularGrid grid{15, 30};
    const Vec3 rx(0, 0, 1);
    const double t = 1.0;
    const auto base = render(s, rx, t, grid);
    auto sup_response = [&](std::size_t k) {
        double a = 0.0;
        for (const auto& l : s.primitives[k].lobes) a += l.amplitude();
        return a;
    };
    double sup_all = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k) sup_all = std::max(sup_all, sup_response(k));

    Scene one;
    one.primitives.push_back(s.primitives[0]);
    const auto base1 = render(one, rx, t, grid);
    Scene one_moved = one;
    one_moved.primitives[0].rho_logit = logit(one.primitives[0].rho() + 1e-3);
    const auto moved1 = render(one_moved, rx, t, grid);
    for (std::size_t j = 0; j < grid.size(); ++j)
        CHECK(std::abs(std::abs(moved1.z[j]) - std::abs(base1.z[j])) / 1e-3 <= sup_response(0) * (1 + 1e-6));

    for (std::size_t k = 0; k < s.size(); ++k) {
        const double bound = sup_response(k) + sup_all;
        Scene moved = s;
        const double rho = s.primitives[k].rho();
        const double drho = 1e-3;
        moved.primitives[k].rho_logit = logit(rho + drho);
        const auto out = render(moved, rx, t, grid);
        for (std::size_t j = 0; j < grid.size(); ++j)
            CHECK(std::abs(std::abs(out.z[j]) - std::abs(base.z[j])) / drho <= bound * (1 + 1e-6));
    }
}

TEST_CASE("spectrogram arithmetic", "[render][rss]") {
    CHECK_THAT(rss_from_spectrogram(std::vector<double>(8, -100.0)), WithinAbs(-90.969, 5e-4));
    std::vector<double> s(32400, -100.0);
    s[77] = -40.0;
    CHECK_THAT(rss_from_spectrogram(s), WithinAbs(-39.861, 1e-3));
    CHECK_THAT(rss_from_spectrogram(s), WithinAbs(-40.0 + 10 * std::log10(1 + 32399 * 1e-6), 1e-9));

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> U(-110.0, -30.0);
    for (int i = 0; i < 100; ++i) {
        std::vector<double> v(50);
        for (auto& x : v) x = U(rng);
        CHECK(rss_from_spectrogram(v) >= *std::max_element(v.begin(), v.end()));
    }
}

TEST_CASE("spectrogram normalisation", "[render][rss]") {
    const AngularGrid g{1, 5};
    const std::vector<double> raw{-100, -40, -70, -120, -10};
    const auto n = normalize_spectrogram(g, raw);
    CHECK(n.unit[0] == 0.0);
    CHECK(n.unit[1] == 1.0);
    CHECK_THAT(n.unit[2], WithinAbs(0.5, 1e-15));
    CHECK(n.unit[3] == 0.0);
    CHECK(n.unit[4] == 1.0);
    CHECK(n.spectrogram.values[3] == -100.0);
    CHECK(n.spectrogram.values[4] == -40.0);
    for (int i = 0; i <= 100; ++i) {
        const double u = i / 100.0;
        CHECK_THAT(dbm_to_unit(unit_to_dbm(u)), WithinAbs(u, 1e-15));
    }
    CHECK_THROWS(normalize_spectrogram(AngularGrid{2, 5}, raw));
}

TEST_CASE("grid layout", "[render]") {
    const AngularGrid g;
    CHECK(g.H == 90);
    CHECK(g.W == 360);
    const auto q = g.bin_center(0, 0);
    CHECK_THAT(q.phi, WithinAbs(-kPi + 0.5 * kPi / 180.0, 1e-15));
    CHECK_THAT(q.theta, WithinAbs(0.5 * kPi / 180.0, 1e-15));
    CHECK_THROWS((AngularGrid{0, 10}.validate()));
    CHECK_THROWS((AngularGrid{10, 10, 0.0, 2.0}.validate()));
}
