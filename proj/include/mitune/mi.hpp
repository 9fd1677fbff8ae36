#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mitune/denoiser.hpp"
#include "mitune/gaussian_world.hpp"
#include "mitune/sampler.hpp"
#include "mitune/schedule.hpp"

namespace mitune {

// Point-wise mutual information estimate in nats. The value is the sum of
// the per-step contributions; each contribution is a nonnegative
// kappa_t * ||eps_cond - eps_uncond||^2 term already divided by the number
// of randomizations, so the sum is an expectation over t. Note the
// estimator is a sum of nonnegative terms, so it is always >= 0 even
// though true point-wise MI can be negative.
struct MiEstimate {
    double value = 0.0;
    std::vector<double> per_step;  // length T, indexed t-1
    int n_trajectories = 1;        // independent randomizations (trajectories
                                   // or forward draws)
    double stderr_ = 0.0;          // across randomizations when n > 1
    double step_sum = 0.0;         // raw accumulated sum before normalization
};

struct MiGenConfig {
    double guidance = 2.0;     // sampling trajectory guidance
    bool mi_on_guided = false; // score the guided eps instead of the plain
                               // conditional (ablation)
    std::uint64_t seed = 0;
};

// Fused generation + point-wise MI: one reverse trajectory, accumulating
// kappa_t * ||eps_theta(z_t,p,t) - eps_theta(z_t,0,t)||^2 / T at every
// step. The MI term uses the unguided conditional eps by default while the
// sampling step uses the configured guidance. Draws follow the same order
// as generate(), so the returned sample equals generate() under the same
// seed and guidance.
inline std::pair<Vec, MiEstimate> pointwise_mi_generate(const Denoiser& net,
                                                        const Condition& cond,
                                                        const NoiseSchedule& s,
                                                        const MiGenConfig& cfg) {
    if (is_null(cond))
        throw std::invalid_argument(
            "pointwise_mi_generate: condition must not be null");
    Rng rng(cfg.seed);
    const int d = net.data_dim();
    const int T = s.T;
    MiEstimate est;
    est.per_step.assign(T, 0.0);
    Vec z = draw_standard_normal(d, rng);
    for (int t = T; t >= 1; --t) {
        const Vec eps_cond = net.eval_eps(z, cond, t);
        const Vec eps_uncond = net.eval_eps(z, NullCond{}, t);
        const Vec& scored = cfg.mi_on_guided
                                ? guided_combine(eps_uncond, eps_cond,
                                                 cfg.guidance)
                                : eps_cond;
        const double contrib = s.kappa(t) * (scored - eps_uncond).squaredNorm();
        if (!std::isfinite(contrib))
            throw std::runtime_error(
                "pointwise_mi_generate: non-finite MI accumulation at t=" +
                std::to_string(t) + " (unconditional branch pathology?)");
        est.step_sum += contrib;
        est.per_step[t - 1] = contrib / T;
        const Vec eps_hat = guided_combine(eps_uncond, eps_cond, cfg.guidance);
        const Vec w = t > 1 ? draw_standard_normal(d, rng) : Vec::Zero(d);
        z = ddpm_step(z, t, eps_hat, w, s);
        if (!z.allFinite())
            throw std::runtime_error(
                "pointwise_mi_generate: non-finite state at t=" +
                std::to_string(t));
    }
    est.value = std::accumulate(est.per_step.begin(), est.per_step.end(), 0.0);
    est.n_trajectories = 1;
    est.stderr_ = 0.0;
    return {std::move(z), std::move(est)};
}

// Forward-noising estimator for an externally supplied clean sample:
// Monte Carlo over (t uniform in 1..T, eps standard normal) draws of
// kappa_t * ||eps_cond - eps_uncond||^2 at z_t = sqrt(ab) z0 + sqrt(1-ab) eps.
// Per-draw randomness order: t, then the noise vector.
inline MiEstimate pointwise_mi_forward(const Denoiser& net, const Vec& z0,
                                       const Condition& cond,
                                       const NoiseSchedule& s, int n_mc,
                                       std::uint64_t seed) {
    if (is_null(cond))
        throw std::invalid_argument(
            "pointwise_mi_forward: condition must not be null");
    if (n_mc < 1) throw std::invalid_argument("pointwise_mi_forward: n_mc >= 1");
    if (z0.size() != net.data_dim())
        throw std::invalid_argument("pointwise_mi_forward: dimension mismatch");
    Rng rng(seed);
    const int T = s.T;
    MiEstimate est;
    est.per_step.assign(T, 0.0);
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n_mc; ++i) {
        const int t = rng.uniform_int(1, T);
        const double ab = s.alpha_bar(t);
        Vec z_t(z0.size());
        for (Eigen::Index j = 0; j < z0.size(); ++j)
            z_t[j] = std::sqrt(ab) * z0[j] + std::sqrt(1.0 - ab) * rng.normal();
        const Vec diff =
            net.eval_eps(z_t, cond, t) - net.eval_eps(z_t, NullCond{}, t);
        const double v = s.kappa(t) * diff.squaredNorm();
        if (!std::isfinite(v))
            throw std::runtime_error(
                "pointwise_mi_forward: non-finite term at t=" +
                std::to_string(t));
        est.step_sum += v;
        est.per_step[t - 1] += v / n_mc;
        sum += v;
        sumsq += v * v;
    }
    est.value = std::accumulate(est.per_step.begin(), est.per_step.end(), 0.0);
    est.n_trajectories = n_mc;
    if (n_mc > 1) {
        const double var = (sumsq - sum * sum / n_mc) / (n_mc - 1.0);
        est.stderr_ = std::sqrt(std::max(0.0, var) / n_mc);
    }
    return est;
}

// Stable descending sort by MI value; ties keep the original order.
inline std::vector<int> rank_by_mi(const std::vector<double>& values) {
    if (values.empty()) throw std::invalid_argument("rank_by_mi: empty input");
    std::vector<int> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return values[a] > values[b]; });
    return order;
}

inline std::vector<int> rank_by_mi(const std::vector<MiEstimate>& scored) {
    std::vector<double> values;
    values.reserve(scored.size());
    for (const MiEstimate& e : scored) values.push_back(e.value);
    return rank_by_mi(values);
}

struct PopulationMi {
    double mean = 0.0;
    double stderr_ = 0.0;
    int n = 0;
};

inline PopulationMi summarize(const std::vector<double>& values) {
    PopulationMi out;
    out.n = static_cast<int>(values.size());
    if (values.empty()) return out;
    double sum = 0.0, sumsq = 0.0;
    for (double v : values) {
        sum += v;
        sumsq += v * v;
    }
    out.mean = sum / out.n;
    if (out.n > 1) {
        const double var = (sumsq - sum * sum / out.n) / (out.n - 1.0);
        out.stderr_ = std::sqrt(std::max(0.0, var) / out.n);
    }
    return out;
}

// Population mean of the forward estimator over joint world samples; the
// master correctness check compares this against the world's closed-form
// or numeric MI.
inline PopulationMi population_mi_forward(const Denoiser& net,
                                          const GaussianWorld& world,
                                          const NoiseSchedule& s, int n_samples,
                                          int n_mc, std::uint64_t seed) {
    const auto pairs = world.sample_joint(n_samples, derive_seed(seed, 0x5A));
    std::vector<double> values;
    values.reserve(pairs.size());
    int i = 0;
    for (const auto& [cond, z0] : pairs) {
        values.push_back(
            pointwise_mi_forward(net, z0, cond, s, n_mc, derive_seed(seed, 1, i))
                .value);
        ++i;
    }
    return summarize(values);
}

// Population mean of the fused estimator over conditions drawn from the
// world prior.
inline PopulationMi population_mi_generate(const Denoiser& net,
                                           const GaussianWorld& world,
                                           const NoiseSchedule& s, int n_samples,
                                           const MiGenConfig& base_cfg,
                                           std::uint64_t seed) {
    std::vector<double> values;
    values.reserve(n_samples);
    Rng cond_rng(derive_seed(seed, 0xC0));
    for (int i = 0; i < n_samples; ++i) {
        Condition cond;
        if (world.mode == WorldMode::labeled_mixture) {
            cond = LabelCond{cond_rng.uniform_int(0, world.num_labels - 1)};
        } else {
            cond = VectorCond{draw_standard_normal(world.dim, cond_rng)};
        }
        MiGenConfig cfg = base_cfg;
        cfg.seed = derive_seed(seed, 2, i);
        values.push_back(pointwise_mi_generate(net, cond, s, cfg).second.value);
    }
    return summarize(values);
}

}  // namespace mitune
