#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace mitune {

enum class ScheduleKind { linear };

inline const char* to_string(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::linear: return "linear";
    }
    return "?";
}

// Discrete-time noise schedule. Steps are indexed t = 1..T; t = 0 denotes
// clean data and is never indexed into the tables. All tables are doubles:
// kappa at t = 1 divides by 1 - alpha_bar_1 = beta_1, which is small for
// the default schedule.
//
//   alpha_t     = 1 - beta_t
//   alpha_bar_t = prod_{s<=t} alpha_s
//   sigma_t     = sqrt(beta_t)
//   kappa_t     = beta_t * T / (2 * alpha_t * (1 - alpha_bar_t))
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    ScheduleKind kind = ScheduleKind::linear;

    std::vector<double> betas;       // beta_t, t = 1..T
    std::vector<double> alphas;      // alpha_t
    std::vector<double> alpha_bars;  // alpha_bar_t
    std::vector<double> sigmas;      // sigma_t
    std::vector<double> kappas;      // kappa_t

    void check_step(int t) const {
        if (t < 1 || t > T)
            throw std::out_of_range("schedule: step t=" + std::to_string(t) +
                                    " outside 1.." + std::to_string(T));
    }

    double beta(int t) const { check_step(t); return betas[t - 1]; }
    double alpha(int t) const { check_step(t); return alphas[t - 1]; }
    double alpha_bar(int t) const { check_step(t); return alpha_bars[t - 1]; }
    double sigma(int t) const { check_step(t); return sigmas[t - 1]; }
    double kappa(int t) const { check_step(t); return kappas[t - 1]; }
};

// Rebuild the derived tables from a beta vector. build_schedule funnels
// through this, so a schedule rebuilt from its stored betas reproduces
// alphas/alpha_bars/kappas bit-identically (same summation order).
inline NoiseSchedule schedule_from_betas(std::vector<double> betas) {
    if (betas.empty()) throw std::invalid_argument("schedule: empty beta vector");
    NoiseSchedule s;
    s.T = static_cast<int>(betas.size());
    s.betas = std::move(betas);
    s.alphas.resize(s.T);
    s.alpha_bars.resize(s.T);
    s.sigmas.resize(s.T);
    s.kappas.resize(s.T);
    double running = 1.0;
    for (int i = 0; i < s.T; ++i) {
        const double b = s.betas[i];
        if (!(b > 0.0 && b < 1.0))
            throw std::invalid_argument("schedule: beta_t outside (0,1) at t=" +
                                        std::to_string(i + 1));
        const double a = 1.0 - b;
        running *= a;
        s.alphas[i] = a;
        s.alpha_bars[i] = running;
        s.sigmas[i] = std::sqrt(b);
        s.kappas[i] = b * static_cast<double>(s.T) / (2.0 * a * (1.0 - running));
    }
    s.beta_start = s.betas.front();
    s.beta_end = s.betas.back();
    return s;
}

inline NoiseSchedule build_schedule(int T, double beta_start, double beta_end,
                                    ScheduleKind kind = ScheduleKind::linear) {
    if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw std::invalid_argument(
            "schedule: need 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(T);
    if (T == 1) {
        betas[0] = beta_start;  // degenerate interpolation
    } else {
        const double step = (beta_end - beta_start) / (T - 1);
        for (int i = 0; i < T; ++i) betas[i] = beta_start + step * i;
    }
    NoiseSchedule s = schedule_from_betas(std::move(betas));
    s.kind = kind;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    return s;
}

inline double kappa_at(const NoiseSchedule& s, int t) { return s.kappa(t); }

}  // namespace mitune
