#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mitune/denoiser.hpp"
#include "mitune/gaussian_world.hpp"
#include "mitune/rng.hpp"
#include "mitune/schedule.hpp"

namespace mitune {

struct TrainConfig {
    double lr = 1e-3;
    int batch = 128;
    int iters = 1000;
    double p_drop = 0.1;  // conditioning dropout
    int t_lo = 1;
    int t_hi = 0;  // 0 -> schedule T
    double clip = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-2;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;

    int hi(int T) const { return t_hi == 0 ? T : t_hi; }

    void validate(int T) const {
        if (batch < 1) throw std::invalid_argument("train: batch >= 1");
        if (iters < 0) throw std::invalid_argument("train: iters >= 0");
        if (!(lr > 0.0)) throw std::invalid_argument("train: lr > 0");
        if (!(p_drop >= 0.0 && p_drop < 1.0))
            throw std::invalid_argument("train: p_drop in [0,1)");
        const int h = hi(T);
        if (t_lo < 1 || h > T || t_lo > h)
            throw std::invalid_argument(
                "train: timestep window must satisfy 1 <= t_lo <= t_hi <= T");
        if (!(clip > 0.0)) throw std::invalid_argument("train: clip > 0");
    }
};

// One forward-noised training item. Randomness order per item is fixed:
// t, dropout uniform, then the noise vector.
struct NoisedItem {
    Condition cond;
    int t = 1;
    Vec z_t;
    Vec eps;
};

inline NoisedItem make_noised(const Condition& cond, const Vec& z0,
                              const NoiseSchedule& s, const TrainConfig& cfg,
                              Rng& rng) {
    NoisedItem item;
    item.t = rng.uniform_int(cfg.t_lo, cfg.hi(s.T));
    item.cond = rng.uniform01() < cfg.p_drop ? Condition(NullCond{}) : cond;
    const double ab = s.alpha_bar(item.t);
    item.eps.resize(z0.size());
    for (Eigen::Index i = 0; i < z0.size(); ++i) item.eps[i] = rng.normal();
    item.z_t = std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * item.eps;
    return item;
}

// Mean over the batch of || eps - eps_theta(z_t, cond, t) ||^2 with exact
// reverse-mode gradients w.r.t. all weights and embedding rows.
inline std::pair<double, MlpGrads> loss_simple(
    const MlpDenoiser& net,
    const std::vector<std::pair<Condition, Vec>>& batch, const NoiseSchedule& s,
    const TrainConfig& cfg, Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("loss_simple: empty batch");
    MlpGrads grads = net.zero_grads();
    const auto views = net.layer_views();
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    MlpWorkspace ws;
    for (const auto& [cond, z0] : batch) {
        const NoisedItem item = make_noised(cond, z0, s, cfg, rng);
        const Vec out = net.forward(views, item.z_t, item.cond, item.t, ws);
        const Vec r = out - item.eps;
        loss += r.squaredNorm() * inv_n;
        const Vec d_out = 2.0 * inv_n * r;
        net.backward(views, ws, d_out, &grads.dW, &grads.db, &grads.d_cond_embed);
    }
    return {loss, std::move(grads)};
}

// Evaluation-only loss on a frozen pack of noised items; used for the
// fixed validation batches recorded by train().
inline double simple_loss_value(const Denoiser& net,
                                const std::vector<NoisedItem>& pack) {
    if (pack.empty()) throw std::invalid_argument("loss eval: empty pack");
    double loss = 0.0;
    for (const NoisedItem& item : pack)
        loss += (net.eval_eps(item.z_t, item.cond, item.t) - item.eps)
                    .squaredNorm();
    return loss / static_cast<double>(pack.size());
}

inline std::vector<NoisedItem> make_eval_pack(
    const std::vector<std::pair<Condition, Vec>>& data, const NoiseSchedule& s,
    const TrainConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<NoisedItem> pack;
    pack.reserve(data.size());
    for (const auto& [cond, z0] : data)
        pack.push_back(make_noised(cond, z0, s, cfg, rng));
    return pack;
}

// Contiguous view over one parameter (or gradient) tensor.
struct ParamBlock {
    double* p = nullptr;
    Eigen::Index n = 0;
};

inline std::vector<ParamBlock> mlp_param_blocks(MlpDenoiser& net) {
    std::vector<ParamBlock> blocks;
    blocks.push_back({net.cond_embed().data(), net.cond_embed().size()});
    for (auto& l : net.layers()) {
        blocks.push_back({l.W.data(), l.W.size()});
        blocks.push_back({l.b.data(), l.b.size()});
    }
    return blocks;
}

inline std::vector<ParamBlock> mlp_grad_blocks(MlpGrads& g) {
    std::vector<ParamBlock> blocks;
    blocks.push_back({g.d_cond_embed.data(), g.d_cond_embed.size()});
    for (std::size_t i = 0; i < g.dW.size(); ++i) {
        blocks.push_back({g.dW[i].data(), g.dW[i].size()});
        blocks.push_back({g.db[i].data(), g.db[i].size()});
    }
    return blocks;
}

// Decoupled-weight-decay adaptive optimizer with global gradient-norm
// clipping applied before the moment updates.
class AdamW {
  public:
    AdamW(const TrainConfig& cfg, Eigen::Index total)
        : lr_(cfg.lr),
          b1_(cfg.beta1),
          b2_(cfg.beta2),
          eps_(cfg.adam_eps),
          wd_(cfg.weight_decay),
          clip_(cfg.clip),
          m_(Vec::Zero(total)),
          v_(Vec::Zero(total)) {}

    void step(const std::vector<ParamBlock>& params,
              const std::vector<ParamBlock>& grads) {
        double norm_sq = 0.0;
        for (const ParamBlock& g : grads)
            norm_sq += Eigen::Map<const Vec>(g.p, g.n).squaredNorm();
        const double norm = std::sqrt(norm_sq);
        const double gscale = norm > clip_ ? clip_ / norm : 1.0;

        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        Eigen::Index off = 0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            Eigen::Map<Vec> p(params[i].p, params[i].n);
            Eigen::Map<const Vec> g(grads[i].p, grads[i].n);
            auto m = m_.segment(off, params[i].n);
            auto v = v_.segment(off, params[i].n);
            const Vec gc = gscale * g;
            m = b1_ * m + (1.0 - b1_) * gc;
            v = b2_ * v + (1.0 - b2_) * gc.cwiseProduct(gc);
            const Vec mhat = m / bc1;
            const Vec vhat = v / bc2;
            const Vec upd =
                (mhat.array() / (vhat.array().sqrt() + eps_)).matrix() + wd_ * p;
            p -= lr_ * upd;
            off += params[i].n;
        }
    }

  private:
    double lr_, b1_, b2_, eps_, wd_, clip_;
    long t_ = 0;
    Vec m_, v_;
};

inline Eigen::Index total_size(const std::vector<ParamBlock>& blocks) {
    Eigen::Index n = 0;
    for (const ParamBlock& b : blocks) n += b.n;
    return n;
}

// Training data source: a world (fresh joint samples every iteration) or a
// fixed dataset (uniform draws with replacement).
struct TrainData {
    const GaussianWorld* world = nullptr;
    const std::vector<std::pair<Condition, Vec>>* dataset = nullptr;

    static TrainData from_world(const GaussianWorld& w) { return {&w, nullptr}; }
    static TrainData from_dataset(
        const std::vector<std::pair<Condition, Vec>>& d) {
        return {nullptr, &d};
    }

    std::vector<std::pair<Condition, Vec>> draw(int n, std::uint64_t seed) const {
        if (world) return world->sample_joint(n, seed);
        if (!dataset || dataset->empty())
            throw std::invalid_argument("train: empty dataset");
        Rng rng(seed);
        std::vector<std::pair<Condition, Vec>> out;
        out.reserve(n);
        for (int i = 0; i < n; ++i)
            out.push_back((*dataset)[rng.uniform_int(
                0, static_cast<int>(dataset->size()) - 1)]);
        return out;
    }
};

struct TrainResult {
    std::vector<std::pair<int, double>> trace;  // (iteration, loss)
    double val_initial = 0.0;
    double val_final = 0.0;
};

namespace seed_stream {
inline constexpr std::uint64_t kData = 0x11;
inline constexpr std::uint64_t kNoise = 0x22;
inline constexpr std::uint64_t kVal = 0x33;
}  // namespace seed_stream

// Trains the net in place; deterministic given cfg.seed. Aborts if the
// loss becomes non-finite.
inline TrainResult train(MlpDenoiser& net, const TrainData& data,
                         const NoiseSchedule& s, const TrainConfig& cfg) {
    cfg.validate(s.T);
    TrainResult result;

    const auto val_data = data.draw(256, derive_seed(cfg.seed, seed_stream::kVal));
    const auto val_pack =
        make_eval_pack(val_data, s, cfg, derive_seed(cfg.seed, seed_stream::kVal, 1));
    result.val_initial = simple_loss_value(net, val_pack);

    auto params = mlp_param_blocks(net);
    AdamW opt(cfg, total_size(params));
    result.trace.reserve(cfg.iters);
    for (int it = 0; it < cfg.iters; ++it) {
        const auto batch =
            data.draw(cfg.batch, derive_seed(cfg.seed, seed_stream::kData, it));
        Rng rng(derive_seed(cfg.seed, seed_stream::kNoise, it));
        auto [loss, grads] = loss_simple(net, batch, s, cfg, rng);
        if (!std::isfinite(loss))
            throw std::runtime_error("train: loss diverged at iteration " +
                                     std::to_string(it));
        opt.step(params, mlp_grad_blocks(grads));
        result.trace.emplace_back(it, loss);
    }
    result.val_final = simple_loss_value(net, val_pack);
    return result;
}

}  // namespace mitune
