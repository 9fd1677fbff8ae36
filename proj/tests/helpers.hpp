#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mitune/denoiser.hpp"

namespace mitune::testing {

// Denoiser backed by an arbitrary function; test scaffolding for exact
// algebraic cases (zero predictors, identical-branch nets, ...).
class LambdaDenoiser final : public Denoiser {
  public:
    using Fn = std::function<Vec(const Vec&, const Condition&, int)>;
    LambdaDenoiser(int dim, Fn fn) : dim_(dim), fn_(std::move(fn)) {}
    Vec eval_eps(const Vec& z_t, const Condition& cond, int t) const override {
        return fn_(z_t, cond, t);
    }
    int data_dim() const override { return dim_; }

  private:
    int dim_;
    Fn fn_;
};

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1e-10, std::abs(a), std::abs(b)});
}

// exact (bitwise-value) equality; NaN-free inputs assumed
inline bool bits_equal(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) return false;
    for (Eigen::Index i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

// Max relative error between an analytic gradient and central finite
// differences of `f` over all entries of the given parameter blocks.
template <typename F>
double max_fd_rel_err(const std::vector<double*>& params,
                      const std::vector<Eigen::Index>& sizes,
                      const std::vector<const double*>& grads, F&& f,
                      double step = 1e-5) {
    double worst = 0.0;
    for (std::size_t b = 0; b < params.size(); ++b) {
        for (Eigen::Index i = 0; i < sizes[b]; ++i) {
            const double saved = params[b][i];
            params[b][i] = saved + step;
            const double up = f();
            params[b][i] = saved - step;
            const double down = f();
            params[b][i] = saved;
            const double fd = (up - down) / (2.0 * step);
            const double g = grads[b][i];
            const double denom = std::max({1.0, std::abs(fd), std::abs(g)});
            worst = std::max(worst, std::abs(fd - g) / denom);
        }
    }
    return worst;
}

inline double normal_cdf(double x, double mean = 0.0, double sd = 1.0) {
    return 0.5 * std::erfc(-(x - mean) / (sd * std::sqrt(2.0)));
}

// One-sample Kolmogorov-Smirnov statistic against an analytic CDF.
inline double ks_statistic(std::vector<double> xs,
                           const std::function<double(double)>& cdf) {
    std::sort(xs.begin(), xs.end());
    const double n = static_cast<double>(xs.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double F = cdf(xs[i]);
        worst = std::max(worst, std::abs(F - (i + 1) / n));
        worst = std::max(worst, std::abs(F - i / n));
    }
    return worst;
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / v.size();
}

inline double stderr_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / (v.size() - 1.0) / v.size());
}

}  // namespace mitune::testing
