#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mitune/gaussian_world.hpp"
#include "mitune/mi.hpp"

namespace mitune {

// Kendall tau-a between two strict rankings given as id sequences in rank
// order. Both arguments must be permutations of the same id set.
inline double kendall_tau(const std::vector<int>& a, const std::vector<int>& b) {
    const std::size_t n = a.size();
    if (n < 2 || b.size() != n)
        throw std::invalid_argument(
            "kendall_tau: rankings must have equal length >= 2");
    std::unordered_map<int, int> pos_b;
    pos_b.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        if (!pos_b.emplace(b[i], static_cast<int>(i)).second)
            throw std::invalid_argument("kendall_tau: duplicate id in ranking");
    std::unordered_set<int> seen_a;
    seen_a.reserve(n);
    for (int id : a)
        if (!seen_a.insert(id).second)
            throw std::invalid_argument("kendall_tau: duplicate id in ranking");
    long long concordant = 0, discordant = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto it_i = pos_b.find(a[i]);
        if (it_i == pos_b.end())
            throw std::invalid_argument(
                "kendall_tau: rankings are over different id sets");
        for (std::size_t j = i + 1; j < n; ++j) {
            const auto it_j = pos_b.find(a[j]);
            if (it_j == pos_b.end())
                throw std::invalid_argument(
                    "kendall_tau: rankings are over different id sets");
            if (it_i->second < it_j->second)
                ++concordant;
            else
                ++discordant;
        }
    }
    const double pairs = 0.5 * n * (n - 1.0);
    return (concordant - discordant) / pairs;
}

// Ranks item ids by score, descending, exact ties broken by lower id.
inline std::vector<int> rank_ids_by_score(const std::vector<double>& scores) {
    std::vector<int> ids(scores.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    std::sort(ids.begin(), ids.end(), [&](int x, int y) {
        if (scores[x] != scores[y]) return scores[x] > scores[y];
        return x < y;
    });
    return ids;
}

struct AgreementConfig {
    int n_prompts = 8;
    int M = 50;             // generations per prompt, >= 3
    double guidance = 1.0;  // evaluation uses the model's own conditional
    std::uint64_t seed = 0;
};

struct PairAgreement {
    std::string metric_a;
    std::string metric_b;
    double mean_tau = 0.0;
    double stderr_ = 0.0;
    int n = 0;
};

// Rank-agreement study: per prompt, generate M samples with fused MI,
// score each under several metrics, pick the MI-rank 1, ceil(M/2) and M
// representatives, re-rank that triplet under each metric and measure
// Kendall tau against the MI ordering, averaged over prompts.
//
// Metrics: "mi" (the fused estimate), "oracle_llr" (the world's
// log q(z0|p) - log q(z0)), "aligned" (nearest-mean indicator) and
// "random" (independent uniform scores, the null reference).
inline std::vector<PairAgreement> agreement_study(const Denoiser& net,
                                                  const GaussianWorld& world,
                                                  const NoiseSchedule& s,
                                                  const AgreementConfig& cfg) {
    if (world.mode != WorldMode::labeled_mixture)
        throw std::invalid_argument("agreement_study: labeled_mixture required");
    if (cfg.n_prompts < 1 || cfg.M < 3)
        throw std::invalid_argument("agreement_study: need n_prompts >= 1, M >= 3");

    const std::vector<std::string> metrics = {"mi", "oracle_llr", "aligned",
                                              "random"};
    std::unordered_map<std::string, std::vector<double>> taus;
    for (const auto& m : metrics) taus[m] = {};

    for (int i = 0; i < cfg.n_prompts; ++i) {
        const int label = i % world.num_labels;
        const Condition cond = LabelCond{label};
        std::unordered_map<std::string, std::vector<double>> scores;
        for (const auto& m : metrics) scores[m].resize(cfg.M);
        Rng noise_rng(derive_seed(cfg.seed, 0x4E, i));
        for (int j = 0; j < cfg.M; ++j) {
            MiGenConfig gen;
            gen.guidance = cfg.guidance;
            gen.seed = derive_seed(cfg.seed, 0x6E, i, j);
            const auto [z0, est] = pointwise_mi_generate(net, cond, s, gen);
            scores["mi"][j] = est.value;
            scores["oracle_llr"][j] =
                world.log_density(z0, cond) - world.log_density(z0, NullCond{});
            scores["aligned"][j] = world.nearest_mean(z0) == label ? 1.0 : 0.0;
            scores["random"][j] = noise_rng.uniform01();
        }
        const std::vector<int> mi_order = rank_ids_by_score(scores["mi"]);
        const std::vector<int> triplet = {mi_order.front(),
                                          mi_order[(cfg.M + 1) / 2 - 1],
                                          mi_order.back()};
        auto triplet_rank = [&](const std::vector<double>& sc) {
            std::vector<int> ids = triplet;
            std::sort(ids.begin(), ids.end(), [&](int x, int y) {
                if (sc[x] != sc[y]) return sc[x] > sc[y];
                return x < y;
            });
            return ids;
        };
        const std::vector<int> base_rank = triplet_rank(scores["mi"]);
        for (const auto& m : metrics)
            taus[m].push_back(kendall_tau(base_rank, triplet_rank(scores[m])));
    }

    std::vector<PairAgreement> out;
    for (const auto& m : metrics) {
        PairAgreement pa;
        pa.metric_a = "mi";
        pa.metric_b = m;
        const auto& v = taus[m];
        pa.n = static_cast<int>(v.size());
        double sum = 0.0, sumsq = 0.0;
        for (double x : v) {
            sum += x;
            sumsq += x * x;
        }
        pa.mean_tau = sum / pa.n;
        if (pa.n > 1) {
            const double var = (sumsq - sum * sum / pa.n) / (pa.n - 1.0);
            pa.stderr_ = std::sqrt(std::max(0.0, var) / pa.n);
        }
        out.push_back(std::move(pa));
    }
    return out;
}

}  // namespace mitune
