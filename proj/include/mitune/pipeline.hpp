#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mitune/adapter.hpp"
#include "mitune/denoiser.hpp"
#include "mitune/gaussian_world.hpp"
#include "mitune/mi.hpp"
#include "mitune/sampler.hpp"
#include "mitune/train.hpp"

namespace mitune {

enum class Provenance { generated, real };

inline const char* to_string(Provenance p) {
    return p == Provenance::generated ? "generated" : "real";
}

// One MI-selected fine-tuning pair. The seed regenerates the sample
// exactly (fused trajectory for generated entries, world draw for real
// ones).
struct FineTuneEntry {
    Condition cond;
    Vec z;
    double mi = 0.0;
    Provenance prov = Provenance::generated;
    std::uint64_t seed = 0;
    int cond_index = 0;
    int sample_index = 0;  // index within its pool
};

struct FineTuneSet {
    std::vector<FineTuneEntry> entries;
    int round_index = 0;
    int M = 0;
    int k = 0;

    std::vector<std::pair<Condition, Vec>> as_dataset() const {
        std::vector<std::pair<Condition, Vec>> d;
        d.reserve(entries.size());
        for (const auto& e : entries) d.emplace_back(e.cond, e.z);
        return d;
    }
};

// One row of the persisted pool score table.
struct PoolScore {
    int round_index = 0;
    int cond_index = 0;
    int sample_index = 0;
    std::uint64_t seed = 0;
    double mi = 0.0;
    double stderr_ = 0.0;
    double step_sum = 0.0;
    Provenance prov = Provenance::generated;
    bool retained = false;
};

struct AdapterConfig {
    int rank = 4;
    double scale = 4.0;
    AdapterVariant variant = AdapterVariant::magnitude_normalized;
    std::vector<int> layer_ids;  // empty -> all hidden linear layers
    std::uint64_t init_seed = 7;
};

struct PipelineConfig {
    std::vector<Condition> prompts;
    int M = 50;
    int k = 1;
    int rounds = 1;
    double real_mix_fraction = 0.0;  // fraction of retained entries taken
                                     // from MI-selected world draws
    TrainConfig finetune;
    AdapterConfig adapter;
    double guidance = 2.0;      // pool sampling guidance
    bool mi_on_guided = false;  // MI term stays unguided by default
    int real_mi_mc = 32;        // forward-MI draws for real candidates
    int threads = 1;
    int align_n_per_label = 1000;
    std::uint64_t seed = 0;

    void validate() const {
        if (prompts.empty())
            throw std::invalid_argument("pipeline: empty prompt set");
        if (M < 1 || k < 1 || k > M)
            throw std::invalid_argument("pipeline: need 1 <= k <= M");
        if (rounds < 1) throw std::invalid_argument("pipeline: rounds >= 1");
        if (!(real_mix_fraction >= 0.0 && real_mix_fraction <= 1.0))
            throw std::invalid_argument("pipeline: real_mix_fraction in [0,1]");
        if (threads < 1) throw std::invalid_argument("pipeline: threads >= 1");
        for (const Condition& c : prompts)
            if (is_null(c))
                throw std::invalid_argument("pipeline: null prompt not allowed");
    }
};

namespace seed_stream {
inline constexpr std::uint64_t kPool = 0x9001;
inline constexpr std::uint64_t kReal = 0x9002;
inline constexpr std::uint64_t kFinetune = 0x9003;
inline constexpr std::uint64_t kAlign = 0x9004;
}  // namespace seed_stream

struct BuildResult {
    FineTuneSet set;
    std::vector<PoolScore> scores;  // full pool, generated + real candidates
    double mean_pool_mi = 0.0;      // over the generated pool
};

// Pool generation, MI scoring and per-condition top-k selection. The pool
// loop over (condition, j) runs on cfg.threads workers with per-task
// seeds; serial and parallel runs produce identical results. Ties on MI
// break toward the lower sample index. With real_mix_fraction = x, a
// fraction x of the retained slots (spread evenly across the flattened
// entry list) is filled by MI-top-k world draws instead.
inline BuildResult build_set(const Denoiser& net, const PipelineConfig& cfg,
                             const NoiseSchedule& s,
                             const GaussianWorld* world = nullptr,
                             int round_index = 0) {
    cfg.validate();
    if (cfg.real_mix_fraction > 0.0 && world == nullptr)
        throw std::invalid_argument(
            "build_set: real_mix_fraction needs a world");

    const int P = static_cast<int>(cfg.prompts.size());
    const int n_tasks = P * cfg.M;
    struct PoolItem {
        Vec z;
        double mi = 0.0;
        double step_sum = 0.0;
        std::uint64_t seed = 0;
    };
    std::vector<PoolItem> pool(n_tasks);
    const std::uint64_t pool_base =
        derive_seed(cfg.seed, seed_stream::kPool, round_index);

    auto run_task = [&](int idx) {
        const int ci = idx / cfg.M;
        const int j = idx % cfg.M;
        MiGenConfig gen;
        gen.guidance = cfg.guidance;
        gen.mi_on_guided = cfg.mi_on_guided;
        gen.seed = derive_seed(pool_base, ci, j);
        auto [z, est] = pointwise_mi_generate(net, cfg.prompts[ci], s, gen);
        pool[idx] = {std::move(z), est.value, est.step_sum, gen.seed};
    };

    const int workers = std::min(cfg.threads, n_tasks);
    if (workers <= 1) {
        for (int i = 0; i < n_tasks; ++i) run_task(i);
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> ts;
        ts.reserve(workers);
        for (int w = 0; w < workers; ++w)
            ts.emplace_back([&] {
                for (int i = next.fetch_add(1); i < n_tasks;
                     i = next.fetch_add(1))
                    run_task(i);
            });
        for (auto& t : ts) t.join();
    }

    BuildResult out;
    out.set.round_index = round_index;
    out.set.M = cfg.M;
    out.set.k = cfg.k;

    double mi_sum = 0.0;
    for (const PoolItem& it : pool) mi_sum += it.mi;
    out.mean_pool_mi = mi_sum / n_tasks;

    // Even deterministic spread of real slots over the flattened
    // (condition-major) retained-entry list.
    const double x = cfg.real_mix_fraction;
    auto slot_is_real = [&](int global_slot) {
        return std::floor((global_slot + 1) * x) - std::floor(global_slot * x) >=
               1.0;
    };

    for (int ci = 0; ci < P; ++ci) {
        std::vector<double> mis(cfg.M);
        for (int j = 0; j < cfg.M; ++j) mis[j] = pool[ci * cfg.M + j].mi;
        const std::vector<int> order = rank_by_mi(mis);

        int n_real = 0;
        for (int slot = 0; slot < cfg.k; ++slot)
            if (slot_is_real(ci * cfg.k + slot)) ++n_real;
        const int n_gen = cfg.k - n_real;

        std::vector<bool> retained(cfg.M, false);
        for (int r = 0; r < n_gen; ++r) retained[order[r]] = true;
        for (int j = 0; j < cfg.M; ++j) {
            const PoolItem& it = pool[ci * cfg.M + j];
            out.scores.push_back({round_index, ci, j, it.seed, it.mi, 0.0,
                                  it.step_sum, Provenance::generated,
                                  retained[j]});
        }

        // Real candidates: aligned world draws scored by forward MI.
        std::vector<PoolItem> real_pool;
        std::vector<int> real_order;
        if (n_real > 0) {
            real_pool.resize(cfg.M);
            const std::uint64_t real_base =
                derive_seed(cfg.seed, seed_stream::kReal, round_index, ci);
            for (int j = 0; j < cfg.M; ++j) {
                const std::uint64_t sd = derive_seed(real_base, j);
                Rng rng(sd);
                Vec z = world->sample_data_given(cfg.prompts[ci], rng);
                const MiEstimate est = pointwise_mi_forward(
                    net, z, cfg.prompts[ci], s, cfg.real_mi_mc,
                    derive_seed(real_base, j, 1));
                real_pool[j] = {std::move(z), est.value, est.step_sum, sd};
            }
            std::vector<double> rmis(cfg.M);
            for (int j = 0; j < cfg.M; ++j) rmis[j] = real_pool[j].mi;
            real_order = rank_by_mi(rmis);
            std::vector<bool> rret(cfg.M, false);
            for (int r = 0; r < n_real; ++r) rret[real_order[r]] = true;
            for (int j = 0; j < cfg.M; ++j)
                out.scores.push_back({round_index, ci, j, real_pool[j].seed,
                                      real_pool[j].mi, 0.0,
                                      real_pool[j].step_sum, Provenance::real,
                                      rret[j]});
        }

        int gen_rank = 0, real_rank = 0;
        for (int slot = 0; slot < cfg.k; ++slot) {
            FineTuneEntry e;
            e.cond = cfg.prompts[ci];
            e.cond_index = ci;
            if (slot_is_real(ci * cfg.k + slot)) {
                const PoolItem& it = real_pool[real_order[real_rank]];
                e.z = it.z;
                e.mi = it.mi;
                e.seed = it.seed;
                e.sample_index = real_order[real_rank];
                e.prov = Provenance::real;
                ++real_rank;
            } else {
                const PoolItem& it = pool[ci * cfg.M + order[gen_rank]];
                e.z = it.z;
                e.mi = it.mi;
                e.seed = it.seed;
                e.sample_index = order[gen_rank];
                e.prov = Provenance::generated;
                ++gen_rank;
            }
            out.set.entries.push_back(std::move(e));
        }
    }
    return out;
}

// Trains only the adapter parameters on the fine-tune set; the frozen base
// weights are byte-identical before and after.
inline TrainResult finetune_adapters(AdaptedDenoiser& net,
                                     const FineTuneSet& set,
                                     const NoiseSchedule& s,
                                     const TrainConfig& cfg) {
    if (set.entries.empty())
        throw std::invalid_argument("finetune_adapters: empty fine-tune set");
    cfg.validate(s.T);
    const auto dataset = set.as_dataset();
    const TrainData data = TrainData::from_dataset(dataset);

    TrainResult result;
    const auto val_data =
        data.draw(std::min<int>(256, 8 * static_cast<int>(dataset.size())),
                  derive_seed(cfg.seed, seed_stream::kVal));
    const auto val_pack = make_eval_pack(
        val_data, s, cfg, derive_seed(cfg.seed, seed_stream::kVal, 1));
    result.val_initial = simple_loss_value(net, val_pack);

    auto params = adapter_param_blocks(net);
    AdamW opt(cfg, total_size(params));
    result.trace.reserve(cfg.iters);
    for (int it = 0; it < cfg.iters; ++it) {
        const auto batch =
            data.draw(cfg.batch, derive_seed(cfg.seed, seed_stream::kData, it));
        Rng rng(derive_seed(cfg.seed, seed_stream::kNoise, it));
        auto [loss, grads] = loss_simple_adapted(net, batch, s, cfg, rng);
        if (!std::isfinite(loss))
            throw std::runtime_error(
                "finetune_adapters: loss diverged at iteration " +
                std::to_string(it));
        auto gblocks = adapter_grad_blocks(net, grads);
        opt.step(params, gblocks);
        net.mark_dirty();
        result.trace.emplace_back(it, loss);
    }
    result.val_final = simple_loss_value(net, val_pack);
    return result;
}

struct AlignmentScore {
    double value = 0.0;
    double stderr_ = 0.0;
    int n = 0;
};

// Fraction of conditional generations whose nearest world mean matches the
// requested label, with binomial standard error. Evaluated at guidance 1
// by default so the score reflects the model's own conditional
// distribution rather than guidance sharpening.
inline AlignmentScore alignment_score(const Denoiser& net,
                                      const GaussianWorld& world,
                                      const NoiseSchedule& s, int n_per_label,
                                      std::uint64_t seed,
                                      double guidance = 1.0) {
    if (world.mode != WorldMode::labeled_mixture)
        throw std::invalid_argument("alignment_score: labeled_mixture required");
    if (n_per_label < 1)
        throw std::invalid_argument("alignment_score: n_per_label >= 1");
    long hits = 0;
    const long total = static_cast<long>(world.num_labels) * n_per_label;
    for (int c = 0; c < world.num_labels; ++c) {
        for (int i = 0; i < n_per_label; ++i) {
            SamplerConfig sc;
            sc.guidance = guidance;
            sc.seed = derive_seed(seed, seed_stream::kAlign, c, i);
            const Vec z0 = generate(net, LabelCond{c}, s, sc);
            if (world.nearest_mean(z0) == c) ++hits;
        }
    }
    AlignmentScore out;
    out.n = static_cast<int>(total);
    out.value = static_cast<double>(hits) / total;
    out.stderr_ = std::sqrt(out.value * (1.0 - out.value) / total);
    return out;
}

struct RoundMetrics {
    int round_index = 0;
    double align_pre = 0.0;
    double align_pre_stderr = 0.0;
    double align_post = 0.0;
    double align_post_stderr = 0.0;
    double mean_pool_mi = 0.0;
};

struct RoundResult {
    MlpDenoiser net;  // adapters merged into the base
    FineTuneSet set;
    std::vector<PoolScore> scores;
    RoundMetrics metrics;
    TrainResult finetune;
};

// One full cycle: build the MI-filtered set from the current net,
// fine-tune fresh adapters on it, merge, and report pre/post alignment.
// Each round renews the set from the latest model.
inline RoundResult run_round(const MlpDenoiser& net, const PipelineConfig& cfg,
                             const NoiseSchedule& s, const GaussianWorld& world,
                             int round_index) {
    cfg.validate();
    RoundResult out;
    out.metrics.round_index = round_index;

    const AlignmentScore pre =
        alignment_score(net, world, s, cfg.align_n_per_label,
                        derive_seed(cfg.seed, seed_stream::kAlign, round_index, 0));
    out.metrics.align_pre = pre.value;
    out.metrics.align_pre_stderr = pre.stderr_;

    BuildResult build = build_set(net, cfg, s, &world, round_index);
    out.set = std::move(build.set);
    out.scores = std::move(build.scores);
    out.metrics.mean_pool_mi = build.mean_pool_mi;

    const std::vector<int> targets = cfg.adapter.layer_ids.empty()
                                         ? net.hidden_layer_ids()
                                         : cfg.adapter.layer_ids;
    AdaptedDenoiser adapted =
        inject(net, targets, cfg.adapter.rank, cfg.adapter.scale,
               cfg.adapter.variant,
               derive_seed(cfg.adapter.init_seed, round_index));
    TrainConfig ft = cfg.finetune;
    ft.seed = derive_seed(cfg.seed, seed_stream::kFinetune, round_index);
    out.finetune = finetune_adapters(adapted, out.set, s, ft);
    out.net = adapted.merged();

    const AlignmentScore post =
        alignment_score(out.net, world, s, cfg.align_n_per_label,
                        derive_seed(cfg.seed, seed_stream::kAlign, round_index, 1));
    out.metrics.align_post = post.value;
    out.metrics.align_post_stderr = post.stderr_;
    return out;
}

}  // namespace mitune
