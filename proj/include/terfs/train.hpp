#pragma once

// Batch losses, the birth-and-death mechanism and the three-stage schedule:
//   1. static warm-up on the first frame (reconstruction only),
//   2. temporal gate fitting on per-receiver frame batches, with births and
//      prunes at every densify interval,
//   3. joint fine-tuning of everything.

#include "terfs/dataset.hpp"
#include "terfs/losses.hpp"
#include "terfs/optim.hpp"

#include <chrono>
#include <functional>
#include <istream>
#include <ostream>

namespace terfs {

struct TrainConfig {
    double lambda_1 = 0.2;
    double lambda_2 = 0.1;
    double lambda_td = 0.5;
    double lambda_gate = 0.01;
    int batch = 4;
    LearningRates lr;
    int warmup_iters = 2000;
    int gate_iters = 3000;
    int joint_iters = 3000;
    double tau = 0.0;          // birth threshold; 0 selects the adaptive rule
    double tau_factor = 50.0;  // adaptive tau = factor * median score of the first window
    double delta_t = 0.1;      // s
    int densify_interval = 200;
    int max_transients = 0;    // 0: four times the initial primitive count
    double a_prune = 1e-4;
    bool births = true;
    std::uint64_t seed = 1;
    int threads = 1;
    int log_interval = 50;

    void validate() const {
        check_recon_weights(lambda_1, lambda_2);
        if (lambda_td < 0.0 || lambda_gate < 0.0) throw Error("loss weights must be non-negative");
        if (batch < 2) throw Error("batch must hold at least two timestamps");
        if (warmup_iters < 0 || gate_iters < 0 || joint_iters < 0) throw Error("iteration counts must be non-negative");
        if (tau < 0.0 || !(tau_factor > 0.0)) throw Error("birth threshold must be positive");
        if (!(delta_t > 0.0)) throw Error("delta_t must be positive");
        if (densify_interval < 1) throw Error("densify_interval must be positive");
        if (max_transients < 0) throw Error("max_transients must be non-negative");
        if (a_prune < 0.0) throw Error("a_prune must be non-negative");
        if (threads < 1) throw Error("threads must be positive");
        if (log_interval < 1) throw Error("log_interval must be positive");
        for (double r : lr.by_class)
            if (!(r >= 0.0)) throw Error("learning rates must be non-negative");
    }
};

/// Reads "key = value" lines; '#' starts a comment. Unknown keys are errors.
/// Learning rates are keyed lr_<class>, e.g. lr_mu, lr_a_bar, lr_eta.
inline TrainConfig parse_train_config(std::istream& in, TrainConfig cfg = {}) {
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = "config line " + std::to_string(lineno) + ": ";
        if (eq == std::string::npos) throw Error(where + "expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        double x = 0.0;
        try {
            std::size_t used = 0;
            x = std::stod(val, &used);
            if (used != val.size()) throw std::invalid_argument(val);
        } catch (const std::exception&) {
            if (key == "births" && (val == "true" || val == "false")) {
                cfg.births = val == "true";
                continue;
            }
            throw Error(where + "bad value '" + val + "' for " + key);
        }
        auto as_int = [&]() {
            if (x != std::floor(x)) throw Error(where + key + " must be an integer");
            return static_cast<int>(x);
        };
        if (key == "lambda_1") cfg.lambda_1 = x;
        else if (key == "lambda_2") cfg.lambda_2 = x;
        else if (key == "lambda_td") cfg.lambda_td = x;
        else if (key == "lambda_gate") cfg.lambda_gate = x;
        else if (key == "batch") cfg.batch = as_int();
        else if (key == "warmup_iters") cfg.warmup_iters = as_int();
        else if (key == "gate_iters") cfg.gate_iters = as_int();
        else if (key == "joint_iters") cfg.joint_iters = as_int();
        else if (key == "tau") cfg.tau = x;
        else if (key == "tau_factor") cfg.tau_factor = x;
        else if (key == "delta_t") cfg.delta_t = x;
        else if (key == "densify_interval") cfg.densify_interval = as_int();
        else if (key == "max_transients") cfg.max_transients = as_int();
        else if (key == "a_prune") cfg.a_prune = x;
        else if (key == "births") cfg.births = x != 0.0;
        else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(as_int());
        else if (key == "threads") cfg.threads = as_int();
        else if (key == "log_interval") cfg.log_interval = as_int();
        else {
            bool found = false;
            for (int c = 0; c < kParamClassCount; ++c)
                if (key == "lr_" + std::string(kParamClassNames[c])) {
                    cfg.lr.by_class[c] = x;
                    found = true;
                }
            if (!found) throw Error(where + "unknown key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Batch loss

struct LossReport {
    double recon = 0.0;
    double l1 = 0.0;
    double ssim = 0.0;
    double fourier = 0.0;
    double td = 0.0;
    double gate_entropy = 0.0;
    double total = 0.0;
};

struct LossWeights {
    double lambda_1 = 0.2;
    double lambda_2 = 0.1;
    double lambda_td = 0.5;
    double lambda_gate = 0.01;
};

struct BatchItem {
    Vec3 receiver = Vec3::Zero();
    double t = 0.0;
    std::span<const double> target;  // unit image
};

/// Renders the batch, evaluates the weighted loss and, if `grad` is given,
/// accumulates its gradient. `amp_grads` receives one dL/da(t_b) vector per
/// item. Reconstruction terms are averaged over the batch; the
/// temporal-difference term needs at least two items.
inline LossReport evaluate_batch(const Scene& scene, const AngularGrid& grid, const std::vector<BatchItem>& batch,
                                 const LossWeights& w, GradientBuffer* grad = nullptr,
                                 std::vector<std::vector<double>>* amp_grads = nullptr, int threads = 1) {
    const std::size_t B = batch.size();
    if (B == 0) throw Error("empty batch");
    const ImageShape shape{grid.H, grid.W};
    std::vector<FramePlan> plans(B);
    std::vector<std::vector<double>> preds(B), gimg(B, std::vector<double>(grid.size(), 0.0));
    std::vector<double> times(B);
    for (std::size_t b = 0; b < B; ++b) {
        if (batch[b].target.size() != grid.size()) throw Error("grid mismatch");
        plans[b] = prepare_frame(scene, batch[b].receiver, batch[b].t, grid);
        preds[b] = unit_image(render_plan(plans[b], threads).power_dbm);
        times[b] = batch[b].t;
    }
    LossReport r;
    const double inv_b = 1.0 / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
        const auto terms = loss_recon(shape, preds[b], batch[b].target, w.lambda_1, w.lambda_2,
                                      grad ? std::span<double>(gimg[b]) : std::span<double>{}, inv_b);
        r.l1 += terms.l1 * inv_b;
        r.ssim += terms.ssim * inv_b;
        r.fourier += terms.fourier * inv_b;
        r.recon += terms.total * inv_b;
    }
    if (w.lambda_td > 0.0 && B >= 2) {
        std::vector<std::span<const double>> p(B), t(B);
        std::vector<std::span<double>> g(B);
        for (std::size_t b = 0; b < B; ++b) p[b] = preds[b], t[b] = batch[b].target, g[b] = gimg[b];
        r.td = loss_td(p, t, grad ? &g : nullptr, w.lambda_td);
    }
    if (w.lambda_gate > 0.0) r.gate_entropy = gate_entropy(scene, times, grad, w.lambda_gate);
    r.total = r.recon + w.lambda_td * r.td + w.lambda_gate * r.gate_entropy;

    if (amp_grads) amp_grads->assign(B, {});
    if (grad) {
        for (std::size_t b = 0; b < B; ++b)
            backward_sample(scene, plans[b], gimg[b], *grad, amp_grads ? &(*amp_grads)[b] : nullptr, threads);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Birth and death

/// Per-lobe amplitude-gradient scores over the current window (flat lobe
/// order). Only static lobes accumulate.
struct BirthScores {
    std::vector<double> gamma;
    std::vector<double> peak;    // largest single |dL/da| seen
    std::vector<double> peak_t;  // timestamp of that peak

    void reset(const Scene& scene) {
        const std::size_t n = scene.lobe_count();
        gamma.assign(n, 0.0);
        peak.assign(n, 0.0);
        peak_t.assign(n, 0.0);
    }

    /// Drops the lobes of removed primitives; `bases` is the flat lobe layout
    /// before removal, `removed` ascending.
    void erase(const std::vector<std::size_t>& bases, const std::vector<std::size_t>& removed) {
        for (auto it = removed.rbegin(); it != removed.rend(); ++it) {
            const auto lo = static_cast<std::ptrdiff_t>(bases[*it]), hi = static_cast<std::ptrdiff_t>(bases[*it + 1]);
            for (auto* v : {&gamma, &peak, &peak_t}) v->erase(v->begin() + lo, v->begin() + hi);
        }
    }
};

/// Gamma += sum_b |dL/da(t_b)| for static lobes, tracking the argmax timestamp.
inline void accumulate_birth_score(BirthScores& s, const Scene& scene,
                                   const std::vector<std::vector<double>>& amp_grads,
                                   std::span<const double> times) {
    if (s.gamma.size() != scene.lobe_count()) s.reset(scene);
    if (amp_grads.size() != times.size()) throw Error("amplitude gradients and timestamps differ");
    const auto base = lobe_bases(scene);
    for (std::size_t b = 0; b < times.size(); ++b) {
        if (amp_grads[b].empty()) continue;
        if (amp_grads[b].size() != s.gamma.size()) throw Error("amplitude gradient size mismatch");
        for (std::size_t k = 0; k < scene.primitives.size(); ++k) {
            if (scene.primitives[k].kind != PrimitiveKind::Static) continue;
            for (std::size_t i = base[k]; i < base[k + 1]; ++i) {
                const double g = std::abs(amp_grads[b][i]);
                s.gamma[i] += g;
                if (g > s.peak[i]) {
                    s.peak[i] = g;
                    s.peak_t[i] = times[b];
                }
            }
        }
    }
}

inline double median_static_score(const BirthScores& s, const Scene& scene) {
    std::vector<double> v;
    const auto base = lobe_bases(scene);
    for (std::size_t k = 0; k < scene.primitives.size(); ++k)
        if (scene.primitives[k].kind == PrimitiveKind::Static)
            for (std::size_t i = base[k]; i < base[k + 1]; ++i) v.push_back(s.gamma[i]);
    if (v.empty()) return 0.0;
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double m = v[mid];
    if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
    return m;
}

/// Spawns one transient per static lobe whose score exceeds tau, highest score
/// first, until the transient cap is reached. Scores are reset afterwards.
/// Returns the number of primitives appended.
inline std::size_t birth_transients(Scene& scene, BirthScores& scores, double tau, double delta_t,
                                    std::size_t max_transients) {
    if (scores.gamma.size() != scene.lobe_count()) {
        scores.reset(scene);
        return 0;
    }
    struct Candidate {
        double gamma;
        std::size_t prim, lobe, flat;
    };
    std::vector<Candidate> cand;
    const auto base = lobe_bases(scene);
    for (std::size_t k = 0; k < scene.primitives.size(); ++k) {
        if (scene.primitives[k].kind != PrimitiveKind::Static) continue;
        for (std::size_t i = base[k]; i < base[k + 1]; ++i)
            if (scores.gamma[i] > tau) cand.push_back({scores.gamma[i], k, i - base[k], i});
    }
    std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.gamma > b.gamma; });

    std::size_t n_trans = scene.count(PrimitiveKind::Transient);
    std::size_t born = 0;
    for (const auto& c : cand) {
        if (n_trans >= max_transients) {
            spdlog::info("transient cap {} reached, skipping {} birth candidates", max_transients,
                         cand.size() - born);
            break;
        }
        const auto& parent = scene.primitives[c.prim];
        const auto& pl = parent.lobes[c.lobe];
        GaussianPrimitive t;
        t.kind = PrimitiveKind::Transient;
        t.mu0 = parent.mu0;
        t.log_scale = parent.log_scale;
        t.rotation = parent.rotation;
        t.rho_logit = logit(0.5 * parent.rho());
        AsgLobe l = pl;
        l.amp_raw = softplus_inverse(0.1 * pl.amplitude());
        l.t_c = scores.peak_t[c.flat];
        l.log_t_w = std::log(delta_t);
        t.lobes.push_back(l);
        scene.primitives.push_back(std::move(t));
        ++n_trans;
        ++born;
    }
    scores.reset(scene);
    return born;
}

/// Removes transient primitives all of whose lobes either miss `span`
/// entirely or have amplitude below `a_prune`. Returns removed indices,
/// ascending.
inline std::vector<std::size_t> prune_transients(Scene& scene, const TimeSpan& span, double a_prune = 1e-4) {
    std::vector<std::size_t> removed;
    std::vector<GaussianPrimitive> kept;
    kept.reserve(scene.primitives.size());
    for (std::size_t k = 0; k < scene.primitives.size(); ++k) {
        auto& p = scene.primitives[k];
        bool dead = p.kind == PrimitiveKind::Transient;
        if (dead) {
            for (const auto& l : p.lobes) {
                const auto e = l.envelope();
                const bool outside = e.support_hi() < span.t_min || e.support_lo() > span.t_max;
                if (!(outside || l.amplitude() < a_prune)) dead = false;
            }
        }
        if (dead)
            removed.push_back(k);
        else
            kept.push_back(std::move(p));
    }
    scene.primitives = std::move(kept);
    return removed;
}

// ---------------------------------------------------------------------------
// Training driver

struct MetricsRow {
    int iter = 0;
    int stage = 0;
    LossReport loss;
    std::size_t K = 0;
    std::size_t n_transients = 0;
    double wall_ms = 0.0;
};

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
    out << "iter,stage,l1,ssim,fourier,td,gate,total,K,n_transients,wall_ms\n";
    out.precision(10);
    for (const auto& r : rows)
        out << r.iter << ',' << r.stage << ',' << r.loss.l1 << ',' << r.loss.ssim << ',' << r.loss.fourier << ','
            << r.loss.td << ',' << r.loss.gate_entropy << ',' << r.loss.total << ',' << r.K << ',' << r.n_transients
            << ',' << r.wall_ms << '\n';
}

struct TrainHooks {
    /// Called around every prune pass that removed something.
    std::function<void(const Scene& before, const Scene& after)> on_prune;
    /// Called at every densify boundary and at the end.
    std::function<void(int iter, const Scene&)> on_checkpoint;
};

struct TrainResult {
    Scene scene;
    std::vector<MetricsRow> log;
    std::vector<double> loss_history;  // total loss per iteration
    std::vector<int> stage_history;
    bool diverged = false;
    std::size_t births = 0;
    std::size_t prunes = 0;
    std::size_t peak_transients = 0;
    std::size_t transient_cap = 0;
    double tau = 0.0;
};

inline ParamMask stage_mask(int stage) {
    ParamMask m;
    using enum ParamClass;
    if (stage == 1) {
        for (auto c : {Position, Scale, Rotation, Opacity, LobeDirection, Spread, Amplitude, Phase})
            m.set(PrimitiveKind::Static, c);
        m.eta = true;
    } else if (stage == 2) {
        for (auto k : {PrimitiveKind::Static, PrimitiveKind::Kinematic, PrimitiveKind::Transient})
            for (auto c : {Amplitude, Phase, TemporalCenter, TemporalWidth}) m.set(k, c);
        m.set(PrimitiveKind::Kinematic, Velocity);
    } else {
        m = ParamMask::all();
    }
    return m;
}

/// Fits `init` to `data`. Stage 1 uses the samples at the earliest timestamp;
/// stages 2 and 3 draw one receiver and `batch` of its frames per iteration.
inline TrainResult train(const Dataset& data, const Scene& init, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    cfg.validate();
    if (data.empty()) throw Error("empty training set");
    const AngularGrid& grid = data.manifest.grid;
    for (const auto& s : data.samples)
        if (s.dbm.size() != grid.size()) throw Error("grid mismatch");

    TrainResult res;
    res.scene = init;
    Scene& scene = res.scene;
    const auto t_start = std::chrono::steady_clock::now();
    const int total_iters = cfg.warmup_iters + cfg.gate_iters + cfg.joint_iters;
    if (total_iters == 0) return res;

    std::vector<std::vector<double>> targets(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) targets[i] = unit_image(data.samples[i].dbm);

    // Frame-0 samples and per-receiver frame lists.
    double t0 = data.samples[0].t;
    for (const auto& s : data.samples) t0 = std::min(t0, s.t);
    std::vector<std::size_t> first_frame;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (data.samples[i].t == t0) first_frame.push_back(i);
    int n_rx = 0;
    const auto rx_of = split_units(data, SplitMode::Spatial, n_rx);
    std::vector<std::vector<std::size_t>> by_rx(n_rx);
    for (std::size_t i = 0; i < data.size(); ++i) by_rx[rx_of[i]].push_back(i);

    TimeSpan span = data.manifest.span;
    {
        double lo = data.samples[0].t, hi = lo;
        for (const auto& s : data.samples) lo = std::min(lo, s.t), hi = std::max(hi, s.t);
        span = {lo, hi};
    }
    const ConstraintLimits limits{cfg.delta_t};
    res.transient_cap = cfg.max_transients > 0 ? static_cast<std::size_t>(cfg.max_transients)
                                               : 4 * std::max<std::size_t>(init.size(), 1);

    std::mt19937_64 rng(cfg.seed);
    AdamState adam = AdamState::zeros_like(scene);
    BirthScores scores;
    scores.reset(scene);
    double tau = cfg.tau;
    Scene last_good = scene;
    LossReport last{};

    auto pick = [&](const std::vector<std::size_t>& pool, std::size_t n) {
        std::vector<std::size_t> idx = pool;
        const std::size_t take = std::min(n, idx.size());
        for (std::size_t i = 0; i < take; ++i) {
            std::uniform_int_distribution<std::size_t> d(i, idx.size() - 1);
            std::swap(idx[i], idx[d(rng)]);
        }
        idx.resize(take);
        return idx;
    };

    for (int it = 0; it < total_iters; ++it) {
        const int stage = it < cfg.warmup_iters ? 1 : (it < cfg.warmup_iters + cfg.gate_iters ? 2 : 3);
        LossWeights w{cfg.lambda_1, cfg.lambda_2, cfg.lambda_td, cfg.lambda_gate};
        std::vector<std::size_t> idx;
        if (stage == 1) {
            w.lambda_td = w.lambda_gate = 0.0;
            idx = pick(first_frame, static_cast<std::size_t>(cfg.batch));
        } else {
            std::uniform_int_distribution<int> d(0, n_rx - 1);
            idx = pick(by_rx[d(rng)], static_cast<std::size_t>(cfg.batch));
            std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return data.samples[a].t < data.samples[b].t; });
        }
        std::vector<BatchItem> batch;
        std::vector<double> times;
        for (auto i : idx) {
            batch.push_back({data.samples[i].receiver, data.samples[i].t, targets[i]});
            times.push_back(data.samples[i].t);
        }

        GradientBuffer grad = GradientBuffer::zeros_like(scene);
        std::vector<std::vector<double>> amp;
        const bool densify = stage == 2 && cfg.births;
        // A blown-up scene can fail inside the renderer before the loss goes NaN.
        bool finite = true;
        try {
            last = evaluate_batch(scene, grid, batch, w, &grad, densify ? &amp : nullptr, cfg.threads);
        } catch (const Error& e) {
            spdlog::error("iteration {}: {}", it, e.what());
            finite = false;
        }
        finite = finite && std::isfinite(last.total);
        if (finite) {
            try {
                grad.check_finite();
            } catch (const Error& e) {
                spdlog::error("iteration {}: {}", it, e.what());
                finite = false;
            }
        }
        if (!finite) {
            spdlog::error("training diverged at iteration {}; returning last good scene", it);
            res.diverged = true;
            res.scene = last_good;
            break;
        }
        res.loss_history.push_back(last.total);
        res.stage_history.push_back(stage);
        if (densify) accumulate_birth_score(scores, scene, amp, times);

        adam_step(scene, grad, adam, cfg.lr, stage_mask(stage), {}, limits);

        const bool boundary = (it + 1) % cfg.densify_interval == 0;
        if (densify && boundary) {
            if (tau <= 0.0) {
                tau = cfg.tau_factor * median_static_score(scores, scene);
                if (!(tau > 0.0)) tau = std::numeric_limits<double>::min();
                spdlog::debug("adaptive birth threshold tau = {}", tau);
            }
            Scene before;
            if (hooks.on_prune) before = scene;
            const auto bases = lobe_bases(scene);
            const auto removed = prune_transients(scene, span, cfg.a_prune);
            scores.erase(bases, removed);
            res.prunes += removed.size();
            if (!removed.empty() && hooks.on_prune) hooks.on_prune(before, scene);
            adam.erase(removed);
            // Newborns start at a tenth of the parent amplitude, often under
            // a_prune, so they get one window of training before being judged.
            const std::size_t born = birth_transients(scene, scores, tau, cfg.delta_t, res.transient_cap);
            res.births += born;
            adam.sync(scene);
            scores.reset(scene);
            if (born > 0 || !removed.empty())
                spdlog::debug("iteration {}: {} births, {} prunes, K = {}", it + 1, born, removed.size(), scene.size());
        }
        res.peak_transients = std::max(res.peak_transients, scene.count(PrimitiveKind::Transient));
        if (boundary) {
            last_good = scene;
            if (hooks.on_checkpoint) hooks.on_checkpoint(it + 1, scene);
        }
        if ((it + 1) % cfg.log_interval == 0 || it + 1 == total_iters) {
            MetricsRow row;
            row.iter = it + 1;
            row.stage = stage;
            row.loss = last;
            row.K = scene.size();
            row.n_transients = scene.count(PrimitiveKind::Transient);
            row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start).count();
            res.log.push_back(row);
            spdlog::info("iter {:5d} stage {} total {:.6f} l1 {:.6f} td {:.6f} K {}", row.iter, stage, last.total,
                         last.l1, last.td, row.K);
        }
    }
    res.tau = tau;
    if (hooks.on_checkpoint && !res.diverged) hooks.on_checkpoint(total_iters, res.scene);
    return res;
}

}  // namespace terfs
