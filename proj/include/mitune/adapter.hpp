#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mitune/denoiser.hpp"
#include "mitune/train.hpp"

namespace mitune {

enum class AdapterVariant { plain, magnitude_normalized };

inline const char* to_string(AdapterVariant v) {
    return v == AdapterVariant::plain ? "plain" : "magnitude_normalized";
}

// Trainable low-rank update attached to one frozen linear layer.
//
//   plain:                W_eff = W + (scale / rank) * B * A
//   magnitude_normalized: each row of V = W + B * A is rescaled to unit
//                         norm and multiplied by a learned magnitude m,
//                         one entry per output unit, initialized to the
//                         row norms of W so the initial layer is exactly W.
//
// B starts at zero, so both variants evaluate identically to the frozen
// layer before any training step.
struct LowRankAdapter {
    int layer_id = 0;
    int rank = 0;
    double scale = 1.0;
    AdapterVariant variant = AdapterVariant::plain;
    Mat A;  // rank x in
    Mat B;  // out x rank
    Vec m;  // out (magnitude_normalized only)
};

struct AdapterGrads {
    std::vector<Mat> dA;
    std::vector<Mat> dB;
    std::vector<Vec> dm;
};

class AdaptedDenoiser final : public Denoiser {
  public:
    AdaptedDenoiser(MlpDenoiser base, std::vector<LowRankAdapter> adapters)
        : base_(std::move(base)), adapters_(std::move(adapters)) {
        slot_of_layer_.assign(base_.num_layers(), -1);
        for (std::size_t i = 0; i < adapters_.size(); ++i)
            slot_of_layer_[adapters_[i].layer_id] = static_cast<int>(i);
        unit_rows_.resize(adapters_.size());
        v_norms_.resize(adapters_.size());
        dirty_ = true;
    }

    int data_dim() const override { return base_.data_dim(); }
    const MlpDenoiser& base() const { return base_; }
    std::vector<LowRankAdapter>& adapters() { return adapters_; }
    const std::vector<LowRankAdapter>& adapters() const { return adapters_; }

    // Must be called after mutating adapter parameters directly.
    void mark_dirty() { dirty_ = true; }

    Eigen::Index trainable_parameter_count() const {
        Eigen::Index n = 0;
        for (const auto& ad : adapters_) {
            n += ad.A.size() + ad.B.size();
            if (ad.variant == AdapterVariant::magnitude_normalized)
                n += ad.m.size();
        }
        return n;
    }

    Vec eval_eps(const Vec& z_t, const Condition& cond, int t) const override {
        MlpWorkspace ws;
        return forward(z_t, cond, t, ws);
    }

    Vec forward(const Vec& z_t, const Condition& cond, int t,
                MlpWorkspace& ws) const {
        refresh_if_dirty();
        if (z_t.size() != base_.data_dim())
            throw std::invalid_argument("adapted: data dimension mismatch");
        if (t < 1) throw std::out_of_range("adapted: timestep must be >= 1");
        const auto& cfg = base_.config();
        ws.cond_row = base_.embedding_row(cond);
        ws.input.resize(cfg.input_dim());
        ws.input << z_t, time_features(t, cfg.time_dim),
            base_.cond_embed().row(ws.cond_row).transpose();
        const auto& layers = base_.layers();
        const int L = static_cast<int>(layers.size());
        ws.pre.assign(L, Vec());
        ws.act.assign(L, Vec());
        const Vec* x = &ws.input;
        for (int l = 0; l < L; ++l) {
            const int slot = slot_of_layer_[l];
            if (slot < 0) {
                ws.pre[l] = layers[l].W * (*x) + layers[l].b;
            } else {
                const LowRankAdapter& ad = adapters_[slot];
                if (ad.variant == AdapterVariant::plain) {
                    ws.pre[l] = layers[l].W * (*x) + layers[l].b +
                                (ad.scale / ad.rank) * (ad.B * (ad.A * (*x)));
                } else {
                    ws.pre[l] = ad.m.cwiseProduct(unit_rows_[slot] * (*x)) +
                                layers[l].b;
                }
            }
            if (l + 1 < L) {
                ws.act[l] = ws.pre[l].unaryExpr([](double v) { return silu(v); });
                x = &ws.act[l];
            }
        }
        const Vec& out = ws.pre.back();
        if (!out.allFinite())
            throw std::runtime_error("adapted: non-finite output");
        return out;
    }

    // Accumulates gradients w.r.t. adapter parameters only; the frozen base
    // receives nothing.
    void backward(const MlpWorkspace& ws, const Vec& d_out,
                  AdapterGrads& grads) const {
        refresh_if_dirty();
        const auto& layers = base_.layers();
        const int L = static_cast<int>(layers.size());
        Vec delta = d_out;
        for (int l = L - 1; l >= 0; --l) {
            const Vec& in = l == 0 ? ws.input : ws.act[l - 1];
            const int slot = slot_of_layer_[l];
            Vec d_in;
            if (slot < 0) {
                d_in = layers[l].W.transpose() * delta;
            } else {
                const LowRankAdapter& ad = adapters_[slot];
                if (ad.variant == AdapterVariant::plain) {
                    const double c = ad.scale / ad.rank;
                    const Vec bt_delta = ad.B.transpose() * delta;
                    grads.dA[slot].noalias() += c * bt_delta * in.transpose();
                    grads.dB[slot].noalias() +=
                        c * delta * (ad.A * in).transpose();
                    d_in = layers[l].W.transpose() * delta +
                           c * ad.A.transpose() * bt_delta;
                } else {
                    const Mat& uhat = unit_rows_[slot];
                    const Vec u = uhat * in;  // row-normalized responses
                    grads.dm[slot] += delta.cwiseProduct(u);
                    // coef_i = m_i / ||v_i||, zero where the row vanished
                    Vec coef(delta.size());
                    for (Eigen::Index i = 0; i < coef.size(); ++i)
                        coef[i] = v_norms_[slot][i] > 0.0
                                      ? ad.m[i] / v_norms_[slot][i]
                                      : 0.0;
                    const Vec cd = coef.cwiseProduct(delta);
                    Mat dV = cd * in.transpose();
                    dV.noalias() -= cd.cwiseProduct(u).asDiagonal() * uhat;
                    grads.dA[slot].noalias() += ad.B.transpose() * dV;
                    grads.dB[slot].noalias() += dV * ad.A.transpose();
                    d_in = uhat.transpose() * ad.m.cwiseProduct(delta);
                }
            }
            if (l == 0) break;
            delta = d_in.cwiseProduct(
                ws.pre[l - 1].unaryExpr([](double v) { return silu_grad(v); }));
        }
    }

    AdapterGrads zero_grads() const {
        AdapterGrads g;
        for (const auto& ad : adapters_) {
            g.dA.emplace_back(Mat::Zero(ad.A.rows(), ad.A.cols()));
            g.dB.emplace_back(Mat::Zero(ad.B.rows(), ad.B.cols()));
            g.dm.emplace_back(Vec::Zero(ad.m.size()));
        }
        return g;
    }

    // Materializes the effective weights into a standalone denoiser.
    MlpDenoiser merged() const {
        refresh_if_dirty();
        MlpDenoiser out = base_;
        for (std::size_t i = 0; i < adapters_.size(); ++i) {
            const LowRankAdapter& ad = adapters_[i];
            Mat& W = out.layers()[ad.layer_id].W;
            if (ad.variant == AdapterVariant::plain) {
                W += (ad.scale / ad.rank) * (ad.B * ad.A);
            } else {
                W = ad.m.asDiagonal() * unit_rows_[i];
            }
        }
        return out;
    }

  private:
    void refresh_if_dirty() const {
        if (!dirty_) return;
        for (std::size_t i = 0; i < adapters_.size(); ++i) {
            const LowRankAdapter& ad = adapters_[i];
            if (ad.variant != AdapterVariant::magnitude_normalized) continue;
            Mat v = base_.layers()[ad.layer_id].W + ad.B * ad.A;
            v_norms_[i].resize(v.rows());
            for (Eigen::Index r = 0; r < v.rows(); ++r) {
                const double n = v.row(r).norm();
                v_norms_[i][r] = n;
                if (n > 0.0) v.row(r) /= n;
            }
            unit_rows_[i] = std::move(v);
        }
        dirty_ = false;
    }

    MlpDenoiser base_;
    std::vector<LowRankAdapter> adapters_;
    std::vector<int> slot_of_layer_;
    mutable std::vector<Mat> unit_rows_;  // magnitude variant caches
    mutable std::vector<Vec> v_norms_;
    mutable bool dirty_ = true;
};

// Injects freshly initialized adapters into the given layers of a frozen
// base net. The adapted net evaluates identically to the base before any
// training step.
inline AdaptedDenoiser inject(const MlpDenoiser& net,
                              const std::vector<int>& layer_ids, int rank,
                              double scale, AdapterVariant variant,
                              std::uint64_t init_seed = 0x10ADULL) {
    if (layer_ids.empty())
        throw std::invalid_argument("inject: no target layers");
    if (rank < 1) throw std::invalid_argument("inject: rank >= 1");
    if (!(scale > 0.0)) throw std::invalid_argument("inject: scale > 0");
    std::set<int> seen;
    std::vector<LowRankAdapter> adapters;
    Rng rng(init_seed);
    for (int id : layer_ids) {
        if (id < 0 || id >= net.num_layers())
            throw std::invalid_argument("inject: layer id " +
                                        std::to_string(id) + " does not exist");
        if (!seen.insert(id).second)
            throw std::invalid_argument("inject: duplicate adapter on layer " +
                                        std::to_string(id));
        const Mat& W = net.layers()[id].W;
        const int out = static_cast<int>(W.rows());
        const int in = static_cast<int>(W.cols());
        if (rank > std::min(out, in))
            throw std::invalid_argument(
                "inject: rank " + std::to_string(rank) + " exceeds layer " +
                std::to_string(id) + " dims " + std::to_string(out) + "x" +
                std::to_string(in));
        LowRankAdapter ad;
        ad.layer_id = id;
        ad.rank = rank;
        ad.scale = scale;
        ad.variant = variant;
        ad.A = Mat::Zero(rank, in);
        const double a_scale = 1.0 / std::sqrt(static_cast<double>(in));
        for (int r = 0; r < rank; ++r)
            for (int c = 0; c < in; ++c) ad.A(r, c) = a_scale * rng.normal();
        ad.B = Mat::Zero(out, rank);
        if (variant == AdapterVariant::magnitude_normalized) {
            ad.m.resize(out);
            for (int r = 0; r < out; ++r) ad.m[r] = W.row(r).norm();
        }
        adapters.push_back(std::move(ad));
    }
    return AdaptedDenoiser(net, std::move(adapters));
}

inline std::vector<ParamBlock> adapter_param_blocks(AdaptedDenoiser& net) {
    std::vector<ParamBlock> blocks;
    for (auto& ad : net.adapters()) {
        blocks.push_back({ad.A.data(), ad.A.size()});
        blocks.push_back({ad.B.data(), ad.B.size()});
        if (ad.variant == AdapterVariant::magnitude_normalized)
            blocks.push_back({ad.m.data(), ad.m.size()});
    }
    return blocks;
}

inline std::vector<ParamBlock> adapter_grad_blocks(const AdaptedDenoiser& net,
                                                   AdapterGrads& g) {
    std::vector<ParamBlock> blocks;
    for (std::size_t i = 0; i < g.dA.size(); ++i) {
        blocks.push_back({g.dA[i].data(), g.dA[i].size()});
        blocks.push_back({g.dB[i].data(), g.dB[i].size()});
        if (net.adapters()[i].variant == AdapterVariant::magnitude_normalized)
            blocks.push_back({g.dm[i].data(), g.dm[i].size()});
    }
    return blocks;
}

// Eq.-style denoising loss restricted to a fixed (condition, sample) set,
// with gradients flowing into adapter parameters only.
inline std::pair<double, AdapterGrads> loss_simple_adapted(
    const AdaptedDenoiser& net,
    const std::vector<std::pair<Condition, Vec>>& batch, const NoiseSchedule& s,
    const TrainConfig& cfg, Rng& rng) {
    if (batch.empty())
        throw std::invalid_argument("loss_simple_adapted: empty batch");
    AdapterGrads grads = net.zero_grads();
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    MlpWorkspace ws;
    for (const auto& [cond, z0] : batch) {
        const NoisedItem item = make_noised(cond, z0, s, cfg, rng);
        const Vec out = net.forward(item.z_t, item.cond, item.t, ws);
        const Vec r = out - item.eps;
        loss += r.squaredNorm() * inv_n;
        net.backward(ws, 2.0 * inv_n * r, grads);
    }
    return {loss, std::move(grads)};
}

}  // namespace mitune
