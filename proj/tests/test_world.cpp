#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "mitune/gaussian_world.hpp"

using namespace mitune;

TEST_CASE("world validation", "[world]") {
    REQUIRE_THROWS_AS(GaussianWorld::correlated(0, 0.5), std::invalid_argument);
    REQUIRE_THROWS_AS(GaussianWorld::correlated(2, 1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(GaussianWorld::correlated(2, -1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(GaussianWorld::mixture({}, 0.5), std::invalid_argument);
    REQUIRE_THROWS_AS(
        GaussianWorld::mixture({Vec::Zero(2)}, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(GaussianWorld::mixture({Vec::Zero(2)}, 0.5, 0.3),
                      std::invalid_argument);  // label noise with one label
    REQUIRE_NOTHROW(GaussianWorld::mixture_on_circle(2, 4, 2.0, 0.5, 0.3));
}

TEST_CASE("closed-form MI values", "[world]") {
    REQUIRE(GaussianWorld::correlated(1, 0.0).closed_form_mi() == 0.0);
    REQUIRE(GaussianWorld::correlated(1, 0.5).closed_form_mi() ==
            Catch::Approx(-0.5 * std::log(0.75)).epsilon(1e-12));
    REQUIRE(GaussianWorld::correlated(1, 0.5).closed_form_mi() ==
            Catch::Approx(0.143841).epsilon(1e-4));
    REQUIRE(GaussianWorld::correlated(4, 0.8).closed_form_mi() ==
            Catch::Approx(-2.0 * std::log(0.36)).epsilon(1e-12));
    REQUIRE(GaussianWorld::correlated(4, 0.8).closed_form_mi() ==
            Catch::Approx(2.0433).epsilon(1e-4));
}

TEST_CASE("numeric KL oracle agrees with closed form", "[world]") {
    const GaussianWorld w = GaussianWorld::correlated(1, 0.5);
    const McValue mc = w.numeric_mi(100000, 99);
    REQUIRE(std::abs(mc.value - w.closed_form_mi()) < 4.0 * mc.stderr_);
    REQUIRE(mc.stderr_ > 0.0);
    REQUIRE(mc.stderr_ < 0.01);
}

TEST_CASE("rho=0 gives empirically uncorrelated pairs", "[world]") {
    const GaussianWorld w = GaussianWorld::correlated(1, 0.0);
    const auto pairs = w.sample_joint(20000, 7);
    double spz = 0.0, sp = 0.0, sz = 0.0, spp = 0.0, szz = 0.0;
    for (const auto& [cond, z] : pairs) {
        const double p = std::get<VectorCond>(cond).values[0];
        sp += p;
        sz += z[0];
        spz += p * z[0];
        spp += p * p;
        szz += z[0] * z[0];
    }
    const double n = pairs.size();
    const double corr = (spz - sp * sz / n) /
                        std::sqrt((spp - sp * sp / n) * (szz - sz * sz / n));
    REQUIRE(std::abs(corr) < 4.0 / std::sqrt(n));
}

TEST_CASE("mixture sampling respects labels and flips", "[world]") {
    SECTION("eta = 0, tiny sigma: nearest mean matches label") {
        const GaussianWorld w = GaussianWorld::mixture_on_circle(2, 3, 2.0, 1e-3);
        for (const auto& [cond, z] : w.sample_joint(500, 3))
            REQUIRE(w.nearest_mean(z) == std::get<LabelCond>(cond).index);
    }
    SECTION("eta = 0.3, C = 2: empirical flip rate is binomial") {
        const double eta = 0.3;
        const int n = 20000;
        const GaussianWorld w =
            GaussianWorld::mixture_on_circle(2, 2, 3.0, 1e-2, eta);
        int flips = 0;
        for (const auto& [cond, z] : w.sample_joint(n, 5))
            if (w.nearest_mean(z) != std::get<LabelCond>(cond).index) ++flips;
        const double rate = static_cast<double>(flips) / n;
        const double se = std::sqrt(eta * (1.0 - eta) / n);
        REQUIRE(std::abs(rate - eta) < 3.0 * se);
    }
}

TEST_CASE("optimal eps closed-form cases", "[world]") {
    const NoiseSchedule s = build_schedule(100, 1e-3, 0.05);

    SECTION("single mode at the scaled mean gives zero") {
        Vec mu(2);
        mu << 1.5, -0.5;
        const GaussianWorld w = GaussianWorld::mixture({mu}, 0.7);
        for (int t : {1, 17, 100}) {
            const Vec z = std::sqrt(s.alpha_bar(t)) * mu;
            const Vec eps = w.optimal_eps(z, LabelCond{0}, s, t);
            REQUIRE(eps.norm() == 0.0);
        }
    }

    SECTION("unit data sigma reduces to sqrt(1-ab)(z - sqrt(ab) mu)") {
        Vec mu(3);
        mu << 0.3, -1.0, 2.0;
        const GaussianWorld w = GaussianWorld::mixture({mu}, 1.0);
        Rng rng(11);
        for (int t : {1, 42, 100}) {
            const double ab = s.alpha_bar(t);
            Vec z(3);
            for (int i = 0; i < 3; ++i) z[i] = rng.normal();
            const Vec expect = std::sqrt(1.0 - ab) * (z - std::sqrt(ab) * mu);
            const Vec got = w.optimal_eps(z, LabelCond{0}, s, t);
            REQUIRE((got - expect).norm() < 1e-12);
        }
    }

    SECTION("two-mode symmetric mixture is zero at the midpoint") {
        Vec mu(2);
        mu << 2.0, 1.0;
        const GaussianWorld w = GaussianWorld::mixture({mu, -mu}, 0.5);
        const Vec mid = Vec::Zero(2);
        REQUIRE(w.optimal_eps(mid, NullCond{}, s, 33).norm() == 0.0);
    }

    SECTION("dimension mismatch is rejected") {
        const GaussianWorld w = GaussianWorld::correlated(2, 0.5);
        Vec p(2);
        p << 0.1, 0.2;
        REQUIRE_THROWS_AS(
            w.optimal_eps(Vec::Zero(3), VectorCond{p}, s, 10),
            std::invalid_argument);
    }
}

TEST_CASE("optimal eps matches finite-difference score", "[world]") {
    const NoiseSchedule s = build_schedule(120, 1e-3, 0.04);
    Rng rng(23);
    auto check = [&](const GaussianWorld& w, const Condition& cond) {
        for (int t : {1, 37, 120}) {
            const double ab = s.alpha_bar(t);
            Vec z(w.dim);
            for (int i = 0; i < w.dim; ++i) z[i] = 1.5 * rng.normal();
            const Vec eps = w.optimal_eps(z, cond, s, t);
            const double h = 1e-5;
            for (int i = 0; i < w.dim; ++i) {
                Vec zp = z, zm = z;
                zp[i] += h;
                zm[i] -= h;
                const double grad = (w.log_density_t(zp, cond, s, t) -
                                     w.log_density_t(zm, cond, s, t)) /
                                    (2.0 * h);
                const double expect = -std::sqrt(1.0 - ab) * grad;
                REQUIRE(eps[i] == Catch::Approx(expect).margin(1e-5));
            }
        }
    };
    check(GaussianWorld::correlated(2, 0.6), [] {
        Vec p(2);
        p << 0.4, -1.2;
        return Condition(VectorCond{p});
    }());
    check(GaussianWorld::correlated(2, 0.6), NullCond{});
    const GaussianWorld mix = GaussianWorld::mixture_on_circle(2, 3, 2.0, 0.7, 0.2);
    check(mix, LabelCond{1});
    check(mix, NullCond{});
}

TEST_CASE("forward-noised marginals match analytic moments", "[world]") {
    const NoiseSchedule s = build_schedule(200, 1e-3, 0.03);
    Vec mu(1);
    mu << 2.0;
    const double sigma = 0.6;
    const GaussianWorld w = GaussianWorld::mixture({mu}, sigma);
    const int t = 120;
    const double ab = s.alpha_bar(t);
    const int n = 20000;
    Rng rng(17);
    std::vector<double> xs;
    xs.reserve(n);
    for (int i = 0; i < n; ++i) {
        const Vec z0 = w.sample_data_given(LabelCond{0}, rng);
        xs.push_back(std::sqrt(ab) * z0[0] + std::sqrt(1.0 - ab) * rng.normal());
    }
    const double mean = testing::mean_of(xs);
    const double want_mean = std::sqrt(ab) * mu[0];
    const double want_var = ab * sigma * sigma + (1.0 - ab);
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    const double var = ss / (n - 1.0);
    const double mean_se = std::sqrt(want_var / n);
    const double var_se = want_var * std::sqrt(2.0 / (n - 1.0));
    REQUIRE(std::abs(mean - want_mean) < 4.0 * mean_se);
    REQUIRE(std::abs(var - want_var) < 4.0 * var_se);
}

TEST_CASE("mixture numeric MI is finite and positive when informative",
          "[world]") {
    const GaussianWorld w = GaussianWorld::mixture_on_circle(2, 4, 2.5, 0.5, 0.3);
    const McValue mc = w.numeric_mi(50000, 31);
    REQUIRE(mc.value > 0.0);
    // upper bound: label entropy ln(4)
    REQUIRE(mc.value < std::log(4.0));
    REQUIRE(mc.stderr_ > 0.0);
}
