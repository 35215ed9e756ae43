#pragma once

// Evaluation metrics on unit-scaled spectrograms and RSS, ECDFs and the
// dynamics-stratified error table, plus their CSV/JSON writers.

#include "terfs/dataset.hpp"

#include <nlohmann/json.hpp>

#include <ostream>

namespace terfs {

inline constexpr double kPsnrCap = 100.0;       // dB
inline constexpr double kPsnrMseFloor = 1e-10;

/// 10 log10(1 / mse) on unit-range images, capped for near-exact matches.
inline double psnr_from_mse(double mse) {
    if (mse < kPsnrMseFloor) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

inline double mse_unit(std::span<const double> pred_dbm, std::span<const double> target_dbm) {
    if (pred_dbm.size() != target_dbm.size() || pred_dbm.empty()) throw Error("image shapes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < pred_dbm.size(); ++i) {
        const double d = dbm_to_unit(pred_dbm[i]) - dbm_to_unit(target_dbm[i]);
        s += d * d;
    }
    return s / static_cast<double>(pred_dbm.size());
}

/// Linear-interpolated quantile, q in [0, 1], of already sorted values.
inline double quantile_sorted(std::span<const double> v, double q) {
    if (v.empty()) throw Error("quantile of empty set");
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return quantile_sorted(v, 0.5);
}

inline double mean(std::span<const double> v) {
    if (v.empty()) throw Error("mean of empty set");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

struct EcdfPoint {
    double value = 0.0;
    double cum_fraction = 0.0;
};

/// Step ECDF: the i-th smallest value maps to i / n.
inline std::vector<EcdfPoint> ecdf(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::vector<EcdfPoint> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = {v[i], static_cast<double>(i + 1) / static_cast<double>(v.size())};
    return out;
}

struct SampleMetrics {
    std::size_t sample_id = 0;
    Vec3 receiver = Vec3::Zero();
    double t = 0.0;
    double mse = 0.0;
    double psnr = 0.0;
    double rss_err_db = 0.0;
};

inline constexpr std::array<double, 5> kPercentiles = {0.10, 0.25, 0.50, 0.75, 0.90};

struct MetricsSummary {
    std::vector<SampleMetrics> samples;
    double mean_mse = 0.0;
    double median_mse = 0.0;
    double mean_psnr = 0.0;
    double mean_rss_err = 0.0;
    double median_rss_err = 0.0;
    std::array<double, kPercentiles.size()> mse_percentiles{};
    std::array<double, kPercentiles.size()> rss_err_percentiles{};
    std::vector<EcdfPoint> mse_ecdf;
    std::vector<EcdfPoint> rss_err_ecdf;
};

inline MetricsSummary summarize(std::vector<SampleMetrics> samples) {
    if (samples.empty()) throw Error("empty test set");
    MetricsSummary m;
    std::vector<double> mse, psnr, rss;
    for (const auto& s : samples) {
        mse.push_back(s.mse);
        psnr.push_back(s.psnr);
        rss.push_back(s.rss_err_db);
    }
    m.mean_mse = mean(mse);
    m.mean_psnr = mean(psnr);
    m.mean_rss_err = mean(rss);
    m.mse_ecdf = ecdf(mse);
    m.rss_err_ecdf = ecdf(rss);
    std::sort(mse.begin(), mse.end());
    std::sort(rss.begin(), rss.end());
    m.median_mse = quantile_sorted(mse, 0.5);
    m.median_rss_err = quantile_sorted(rss, 0.5);
    for (std::size_t i = 0; i < kPercentiles.size(); ++i) {
        m.mse_percentiles[i] = quantile_sorted(mse, kPercentiles[i]);
        m.rss_err_percentiles[i] = quantile_sorted(rss, kPercentiles[i]);
    }
    m.samples = std::move(samples);
    return m;
}

/// Renders every test sample and scores it against its stored spectrogram.
inline MetricsSummary evaluate(const Scene& scene, const Dataset& test, int threads = 1) {
    if (test.empty()) throw Error("empty test set");
    const AngularGrid& grid = test.manifest.grid;
    for (const auto& s : test.samples)
        if (s.dbm.size() != grid.size()) throw Error("grid mismatch");
    std::vector<SampleMetrics> rows(test.size());
    parallel_for(test.size(), threads, [&](std::size_t i) {
        const auto& s = test.samples[i];
        const auto out = render(scene, s.receiver, s.t, grid);
        auto& r = rows[i];
        r.sample_id = i;
        r.receiver = s.receiver;
        r.t = s.t;
        r.mse = mse_unit(out.power_dbm, s.dbm);
        r.psnr = psnr_from_mse(r.mse);
        std::vector<double> clamped(out.power_dbm.size());
        std::transform(out.power_dbm.begin(), out.power_dbm.end(), clamped.begin(),
                       [](double v) { return std::clamp(v, kDbmMin, kDbmMax); });
        r.rss_err_db = std::abs(rss_from_spectrogram(clamped) - s.rss_dbm);
    });
    return summarize(std::move(rows));
}

// ---------------------------------------------------------------------------
// Dynamics stratification

struct TierSummary {
    int tier = 0;
    std::vector<int> receivers;  // unit ids in order of first appearance
    double std_lo = 0.0;         // range of temporal RSS std in the tier
    double std_hi = 0.0;
    std::size_t samples = 0;
    double mean_rss_err = 0.0;
    double median_rss_err = 0.0;
};

/// Groups receivers by the temporal standard deviation of their ground-truth
/// RSS into `tiers` equal-count tiers, low to high. Ties keep receiver order.
/// `summary` must come from evaluate() on the same set.
inline std::vector<TierSummary> stratify_by_dynamics(const Dataset& test, const MetricsSummary& summary,
                                                     int tiers = 3) {
    if (tiers < 1) throw Error("tier count must be positive");
    if (summary.samples.size() != test.size()) throw Error("summary does not match test set");
    int n_rx = 0;
    const auto rx = split_units(test, SplitMode::Spatial, n_rx);
    std::vector<std::vector<std::size_t>> members(n_rx);
    for (std::size_t i = 0; i < test.size(); ++i) members[rx[i]].push_back(i);
    bool temporal = false;
    for (const auto& m : members) temporal |= m.size() > 1;
    if (!temporal) throw Error("no temporal axis");
    if (n_rx < tiers) throw Error("fewer receivers than tiers");

    std::vector<double> sd(n_rx);
    for (int r = 0; r < n_rx; ++r) {
        double mu = 0.0;
        for (auto i : members[r]) mu += test.samples[i].rss_dbm;
        mu /= static_cast<double>(members[r].size());
        double var = 0.0;
        for (auto i : members[r]) var += (test.samples[i].rss_dbm - mu) * (test.samples[i].rss_dbm - mu);
        sd[r] = std::sqrt(var / static_cast<double>(members[r].size()));
    }
    std::vector<int> order(n_rx);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sd[a] < sd[b]; });

    std::vector<TierSummary> out(tiers);
    for (int k = 0; k < tiers; ++k) {
        auto& t = out[k];
        t.tier = k;
        const int lo = k * n_rx / tiers, hi = (k + 1) * n_rx / tiers;
        std::vector<double> err;
        for (int j = lo; j < hi; ++j) {
            const int r = order[j];
            t.receivers.push_back(r);
            for (auto i : members[r]) err.push_back(summary.samples[i].rss_err_db);
        }
        t.std_lo = sd[order[lo]];
        t.std_hi = sd[order[hi - 1]];
        t.samples = err.size();
        t.mean_rss_err = mean(err);
        t.median_rss_err = median(err);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Writers

inline void write_samples_csv(std::ostream& out, const MetricsSummary& m) {
    out << "sample_id,rx_x,rx_y,rx_z,t,mse,psnr,rss_err_db\n";
    out.precision(17);
    for (const auto& s : m.samples)
        out << s.sample_id << ',' << s.receiver.x() << ',' << s.receiver.y() << ',' << s.receiver.z() << ',' << s.t
            << ',' << s.mse << ',' << s.psnr << ',' << s.rss_err_db << '\n';
}

inline void write_ecdf_csv(std::ostream& out, const std::vector<EcdfPoint>& e) {
    out << "value,cum_fraction\n";
    out.precision(17);
    for (const auto& p : e) out << p.value << ',' << p.cum_fraction << '\n';
}

inline nlohmann::json summary_json(const MetricsSummary& m, const std::vector<TierSummary>& tiers = {}) {
    nlohmann::json j;
    j["num_samples"] = m.samples.size();
    j["mean_mse"] = m.mean_mse;
    j["median_mse"] = m.median_mse;
    j["mean_psnr_db"] = m.mean_psnr;
    j["mean_rss_err_db"] = m.mean_rss_err;
    j["median_rss_err_db"] = m.median_rss_err;
    auto& pct = j["percentiles"];
    for (std::size_t i = 0; i < kPercentiles.size(); ++i) {
        const std::string key = "p" + std::to_string(static_cast<int>(std::lround(kPercentiles[i] * 100)));
        pct["mse"][key] = m.mse_percentiles[i];
        pct["rss_err_db"][key] = m.rss_err_percentiles[i];
    }
    j["tiers"] = nlohmann::json::array();
    for (const auto& t : tiers)
        j["tiers"].push_back({{"tier", t.tier},
                              {"receivers", t.receivers.size()},
                              {"samples", t.samples},
                              {"rss_std_lo_db", t.std_lo},
                              {"rss_std_hi_db", t.std_hi},
                              {"mean_rss_err_db", t.mean_rss_err},
                              {"median_rss_err_db", t.median_rss_err}});
    return j;
}

}  // namespace terfs
