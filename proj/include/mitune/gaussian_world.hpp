#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mitune/condition.hpp"
#include "mitune/rng.hpp"
#include "mitune/schedule.hpp"

namespace mitune {

enum class WorldMode { correlated_gaussian, labeled_mixture };

struct McValue {
    double value = 0.0;
    double stderr_ = 0.0;
    int n = 0;
};

// Analytic (condition, data) worlds with closed-form scores and known
// mutual information. Two modes:
//
//  correlated_gaussian: per dimension, (z, p) is bivariate normal with unit
//    marginals and correlation rho. Conditions are VectorCond. The MI is
//    -(d/2) * ln(1 - rho^2) nats.
//
//  labeled_mixture: z0 | label c ~ N(mu_c, sigma^2 I), labels uniform,
//    conditions are LabelCond. With label_noise eta > 0, sampled pairs carry
//    a uniformly random wrong label with probability eta, so the Bayes
//    conditional given a *reported* label c is the mixture with weights
//    (1 - eta) on mode c and eta/(C-1) on each other mode. MI has no closed
//    form; the Monte Carlo KL oracle below is the ground truth.
//
// All conditionals are isotropic Gaussians (or mixtures of them), so the
// step-t marginal of a mode with mean mu and variance s2 is
// N(sqrt(ab)*mu, (ab*s2 + 1 - ab) I) with ab = alpha_bar_t, and scores are
// analytic.
struct GaussianWorld {
    int dim = 1;
    WorldMode mode = WorldMode::correlated_gaussian;
    double rho = 0.0;            // correlated_gaussian
    int num_labels = 0;          // labeled_mixture
    std::vector<Vec> means;      // labeled_mixture, one per label
    double data_sigma = 1.0;     // within-mode std dev (labeled_mixture)
    double label_noise = 0.0;    // eta

    static GaussianWorld correlated(int dim, double rho) {
        GaussianWorld w;
        w.dim = dim;
        w.mode = WorldMode::correlated_gaussian;
        w.rho = rho;
        w.validate();
        return w;
    }

    static GaussianWorld mixture(std::vector<Vec> means, double data_sigma,
                                 double label_noise = 0.0) {
        GaussianWorld w;
        w.mode = WorldMode::labeled_mixture;
        w.means = std::move(means);
        w.num_labels = static_cast<int>(w.means.size());
        w.dim = w.means.empty() ? 0 : static_cast<int>(w.means.front().size());
        w.data_sigma = data_sigma;
        w.label_noise = label_noise;
        w.validate();
        return w;
    }

    // Mixture with means spread on a circle in the first two dimensions
    // (equally spaced points on [-radius, radius] when dim == 1).
    static GaussianWorld mixture_on_circle(int dim, int num_labels,
                                           double radius, double data_sigma,
                                           double label_noise = 0.0) {
        if (num_labels < 1) throw std::invalid_argument("world: num_labels >= 1");
        if (dim < 1) throw std::invalid_argument("world: dim >= 1");
        std::vector<Vec> means(num_labels, Vec::Zero(dim));
        for (int c = 0; c < num_labels; ++c) {
            if (dim == 1) {
                means[c][0] = num_labels == 1
                                  ? 0.0
                                  : -radius + 2.0 * radius * c / (num_labels - 1);
            } else {
                const double ang = 2.0 * M_PI * c / num_labels;
                means[c][0] = radius * std::cos(ang);
                means[c][1] = radius * std::sin(ang);
            }
        }
        return mixture(std::move(means), data_sigma, label_noise);
    }

    void validate() const {
        if (dim < 1) throw std::invalid_argument("world: dim must be positive");
        if (mode == WorldMode::correlated_gaussian) {
            if (!(rho > -1.0 && rho < 1.0))
                throw std::invalid_argument("world: rho must lie in (-1,1)");
            if (label_noise != 0.0)
                throw std::invalid_argument(
                    "world: label_noise applies to labeled_mixture only");
        } else {
            if (num_labels < 1 || means.empty())
                throw std::invalid_argument("world: mixture needs >= 1 label");
            for (const Vec& m : means)
                if (m.size() != dim)
                    throw std::invalid_argument("world: mean dimension mismatch");
            if (!(data_sigma > 0.0))
                throw std::invalid_argument("world: data_sigma must be positive");
            if (!(label_noise >= 0.0 && label_noise < 1.0))
                throw std::invalid_argument("world: label_noise in [0,1)");
            if (label_noise > 0.0 && num_labels < 2)
                throw std::invalid_argument(
                    "world: label_noise needs >= 2 labels");
        }
    }

    std::vector<Condition> label_conditions() const {
        require_mixture("label_conditions");
        std::vector<Condition> out;
        out.reserve(num_labels);
        for (int c = 0; c < num_labels; ++c) out.push_back(LabelCond{c});
        return out;
    }

    // n independent draws from the joint. In labeled_mixture mode each
    // pair's label is flipped to a uniformly random wrong label with
    // probability label_noise.
    std::vector<std::pair<Condition, Vec>> sample_joint(int n,
                                                        std::uint64_t seed) const {
        if (n < 1) throw std::invalid_argument("sample_joint: n >= 1");
        Rng rng(seed);
        std::vector<std::pair<Condition, Vec>> out;
        out.reserve(n);
        for (int i = 0; i < n; ++i) {
            if (mode == WorldMode::correlated_gaussian) {
                Vec p(dim), z(dim);
                const double w = std::sqrt(1.0 - rho * rho);
                for (int j = 0; j < dim; ++j) {
                    p[j] = rng.normal();
                    z[j] = rho * p[j] + w * rng.normal();
                }
                out.emplace_back(VectorCond{std::move(p)}, std::move(z));
            } else {
                const int true_label = rng.uniform_int(0, num_labels - 1);
                Vec z = means[true_label];
                for (int j = 0; j < dim; ++j) z[j] += data_sigma * rng.normal();
                int reported = true_label;
                if (label_noise > 0.0 && rng.uniform01() < label_noise) {
                    const int r = rng.uniform_int(0, num_labels - 2);
                    reported = r < true_label ? r : r + 1;
                }
                out.emplace_back(LabelCond{reported}, std::move(z));
            }
        }
        return out;
    }

    // Aligned draw from the true conditional (never flipped); the stand-in
    // for real captioned data in mixture experiments.
    Vec sample_data_given(const Condition& cond, Rng& rng) const {
        if (mode == WorldMode::correlated_gaussian) {
            const Vec& p = expect_vector(cond);
            Vec z(dim);
            const double w = std::sqrt(1.0 - rho * rho);
            for (int j = 0; j < dim; ++j) z[j] = rho * p[j] + w * rng.normal();
            return z;
        }
        const int c = expect_label(cond);
        Vec z = means[c];
        for (int j = 0; j < dim; ++j) z[j] += data_sigma * rng.normal();
        return z;
    }

    // log q_t(z_t | cond); t = 0 gives the clean-data density. Null
    // conditions give the unconditional marginal.
    double log_density_t(const Vec& z, const Condition& cond,
                         const NoiseSchedule& s, int t) const {
        const double ab = t == 0 ? 1.0 : s.alpha_bar(t);
        check_dim(z);
        if (mode == WorldMode::correlated_gaussian) {
            if (is_null(cond)) {
                // unit marginals diffuse to themselves
                return diag_gaussian_logpdf(z, Vec::Zero(dim), 1.0);
            }
            const Vec& p = expect_vector(cond);
            const double var = 1.0 - ab * rho * rho;
            return diag_gaussian_logpdf(z, std::sqrt(ab) * rho * p, var);
        }
        const std::vector<double> logw = mode_log_weights(cond);
        const double var = ab * data_sigma * data_sigma + (1.0 - ab);
        double best = -std::numeric_limits<double>::infinity();
        std::vector<double> terms(num_labels);
        for (int c = 0; c < num_labels; ++c) {
            terms[c] = logw[c] +
                       diag_gaussian_logpdf(z, std::sqrt(ab) * means[c], var);
            best = std::max(best, terms[c]);
        }
        double acc = 0.0;
        for (double v : terms) acc += std::exp(v - best);
        return best + std::log(acc);
    }

    double log_density(const Vec& z0, const Condition& cond) const {
        // schedule unused at t = 0
        static const NoiseSchedule dummy = build_schedule(1, 0.5, 0.5);
        return log_density_t(z0, cond, dummy, 0);
    }

    // Bayes-optimal noise prediction -sqrt(1-ab) * grad log q_t(z_t | cond).
    // For a single Gaussian mode this is sqrt(1-ab) * (z_t - sqrt(ab)*mu) / c_t^2
    // with c_t^2 the step-t marginal variance; for mixtures the gradient of
    // the log-sum-exp is taken analytically (posterior-weighted mode scores).
    Vec optimal_eps(const Vec& z_t, const Condition& cond,
                    const NoiseSchedule& s, int t) const {
        const double ab = s.alpha_bar(t);
        const double root1mab = std::sqrt(1.0 - ab);
        check_dim(z_t);
        if (mode == WorldMode::correlated_gaussian) {
            if (is_null(cond)) return root1mab * z_t;
            const Vec& p = expect_vector(cond);
            const double var = 1.0 - ab * rho * rho;
            return root1mab * (z_t - std::sqrt(ab) * rho * p) / var;
        }
        const std::vector<double> logw = mode_log_weights(cond);
        const double var = ab * data_sigma * data_sigma + (1.0 - ab);
        std::vector<double> logpost(num_labels);
        double best = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < num_labels; ++c) {
            logpost[c] = logw[c] +
                         diag_gaussian_logpdf(z_t, std::sqrt(ab) * means[c], var);
            best = std::max(best, logpost[c]);
        }
        double norm = 0.0;
        for (double v : logpost) norm += std::exp(v - best);
        Vec eps = Vec::Zero(dim);
        for (int c = 0; c < num_labels; ++c) {
            const double w = std::exp(logpost[c] - best) / norm;
            eps += w * (z_t - std::sqrt(ab) * means[c]);
        }
        return root1mab / var * eps;
    }

    // -(d/2) ln(1-rho^2) in correlated_gaussian mode; in labeled_mixture
    // mode falls back to the Monte Carlo KL oracle (its value only).
    double closed_form_mi() const {
        if (mode == WorldMode::correlated_gaussian)
            return -0.5 * dim * std::log(1.0 - rho * rho);
        return numeric_mi().value;
    }

    // Monte Carlo E_{(cond,z0)}[log q(z0|cond) - log q(z0)], reported with
    // standard error. Ground truth for mixture-mode MI.
    McValue numeric_mi(int n = 100000, std::uint64_t seed = 20240501) const {
        const auto pairs = sample_joint(n, seed);
        double sum = 0.0, sumsq = 0.0;
        for (const auto& [cond, z] : pairs) {
            const double v = log_density(z, cond) - log_density(z, NullCond{});
            sum += v;
            sumsq += v * v;
        }
        McValue r;
        r.n = n;
        r.value = sum / n;
        const double var = (sumsq - sum * sum / n) / (n - 1.0);
        r.stderr_ = std::sqrt(std::max(0.0, var) / n);
        return r;
    }

    int nearest_mean(const Vec& z0) const {
        require_mixture("nearest_mean");
        check_dim(z0);
        int best = 0;
        double best_d = (z0 - means[0]).squaredNorm();
        for (int c = 1; c < num_labels; ++c) {
            const double d2 = (z0 - means[c]).squaredNorm();
            if (d2 < best_d) {
                best_d = d2;
                best = c;
            }
        }
        return best;
    }

  private:
    void check_dim(const Vec& z) const {
        if (z.size() != dim)
            throw std::invalid_argument("world: data vector has dimension " +
                                        std::to_string(z.size()) + ", expected " +
                                        std::to_string(dim));
    }

    void require_mixture(const char* op) const {
        if (mode != WorldMode::labeled_mixture)
            throw std::logic_error(std::string(op) +
                                   ": labeled_mixture mode required");
    }

    const Vec& expect_vector(const Condition& cond) const {
        const auto* v = std::get_if<VectorCond>(&cond);
        if (!v || v->values.size() != dim)
            throw std::invalid_argument(
                "world: correlated_gaussian expects a vector condition of "
                "matching dimension");
        return v->values;
    }

    int expect_label(const Condition& cond) const {
        const auto* l = std::get_if<LabelCond>(&cond);
        if (!l || l->index < 0 || l->index >= num_labels)
            throw std::invalid_argument(
                "world: labeled_mixture expects a label condition in 0.." +
                std::to_string(num_labels - 1));
        return l->index;
    }

    // log-weights of each mode under the given (possibly Null) condition,
    // honoring label noise.
    std::vector<double> mode_log_weights(const Condition& cond) const {
        std::vector<double> logw(num_labels);
        if (is_null(cond)) {
            const double v = -std::log(static_cast<double>(num_labels));
            for (double& x : logw) x = v;
            return logw;
        }
        const int c = expect_label(cond);
        if (label_noise == 0.0 || num_labels == 1) {
            const double ninf = -std::numeric_limits<double>::infinity();
            for (double& x : logw) x = ninf;
            logw[c] = 0.0;
            return logw;
        }
        const double off = std::log(label_noise / (num_labels - 1));
        for (double& x : logw) x = off;
        logw[c] = std::log1p(-label_noise);
        return logw;
    }

    static double diag_gaussian_logpdf(const Vec& z, const Vec& mean,
                                       double var) {
        const double d = static_cast<double>(z.size());
        return -0.5 * (z - mean).squaredNorm() / var -
               0.5 * d * std::log(2.0 * M_PI * var);
    }
};

}  // namespace mitune
