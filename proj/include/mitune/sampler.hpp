#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "mitune/denoiser.hpp"
#include "mitune/rng.hpp"
#include "mitune/schedule.hpp"

namespace mitune {

struct SamplerConfig {
    double guidance = 2.0;  // gamma; 1 = plain conditional, 0 = unconditional
    std::uint64_t seed = 0;
};

// eps_uncond + gamma * (eps_cond - eps_uncond), with the gamma = 0 and
// gamma = 1 endpoints returned exactly (no arithmetic applied).
inline Vec guided_combine(const Vec& eps_uncond, const Vec& eps_cond,
                          double gamma) {
    if (gamma == 1.0) return eps_cond;
    if (gamma == 0.0) return eps_uncond;
    return eps_uncond + gamma * (eps_cond - eps_uncond);
}

inline Vec guided_eps(const Denoiser& net, const Vec& z_t, const Condition& cond,
                      int t, double gamma) {
    if (is_null(cond)) return net.eval_eps(z_t, NullCond{}, t);
    if (gamma == 1.0) return net.eval_eps(z_t, cond, t);
    const Vec eps_uncond = net.eval_eps(z_t, NullCond{}, t);
    if (gamma == 0.0) return eps_uncond;
    return guided_combine(eps_uncond, net.eval_eps(z_t, cond, t), gamma);
}

// One ancestral reverse step:
//   z_{t-1} = (z_t - (1-alpha_t)/sqrt(1-alpha_bar_t) * eps_hat) / sqrt(alpha_t)
//             + sigma_t * w
// Callers pass w = 0 at the final step.
inline Vec ddpm_step(const Vec& z_t, int t, const Vec& eps_hat, const Vec& w,
                     const NoiseSchedule& s) {
    s.check_step(t);
    if (eps_hat.size() != z_t.size() || w.size() != z_t.size())
        throw std::invalid_argument("ddpm_step: dimension mismatch");
    const double a = s.alpha(t);
    const double ab = s.alpha_bar(t);
    return (z_t - (1.0 - a) / std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(a) +
           s.sigma(t) * w;
}

inline Vec draw_standard_normal(int dim, Rng& rng) {
    Vec v(dim);
    for (int i = 0; i < dim; ++i) v[i] = rng.normal();
    return v;
}

// Full reverse run from z_T ~ N(0, I); deterministic given cfg.seed.
// Randomness order: the initial latent, then one noise vector per step
// with t > 1.
inline Vec generate(const Denoiser& net, const Condition& cond,
                    const NoiseSchedule& s, const SamplerConfig& cfg) {
    Rng rng(cfg.seed);
    const int d = net.data_dim();
    Vec z = draw_standard_normal(d, rng);
    for (int t = s.T; t >= 1; --t) {
        const Vec eps_hat = guided_eps(net, z, cond, t, cfg.guidance);
        const Vec w = t > 1 ? draw_standard_normal(d, rng) : Vec::Zero(d);
        z = ddpm_step(z, t, eps_hat, w, s);
        if (!z.allFinite())
            throw std::runtime_error("sampler: non-finite state at t=" +
                                     std::to_string(t) +
                                     " (seed=" + std::to_string(cfg.seed) + ")");
    }
    return z;
}

}  // namespace mitune
