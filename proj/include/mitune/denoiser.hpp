#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mitune/condition.hpp"
#include "mitune/gaussian_world.hpp"
#include "mitune/rng.hpp"
#include "mitune/schedule.hpp"

namespace mitune {

// Noise-prediction interface: eps(z_t, cond, t). Implementations must be
// deterministic and safe for concurrent reads once frozen.
class Denoiser {
  public:
    virtual ~Denoiser() = default;
    virtual Vec eval_eps(const Vec& z_t, const Condition& cond, int t) const = 0;
    virtual int data_dim() const = 0;
};

// Analytic denoiser backed by a GaussianWorld's closed-form scores.
class OracleDenoiser final : public Denoiser {
  public:
    OracleDenoiser(GaussianWorld world, NoiseSchedule schedule)
        : world_(std::move(world)), schedule_(std::move(schedule)) {}

    Vec eval_eps(const Vec& z_t, const Condition& cond, int t) const override {
        return world_.optimal_eps(z_t, cond, schedule_, t);
    }

    int data_dim() const override { return world_.dim; }

    const GaussianWorld& world() const { return world_; }
    const NoiseSchedule& schedule() const { return schedule_; }

  private:
    GaussianWorld world_;
    NoiseSchedule schedule_;
};

enum class Activation { silu };

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

// Sinusoidal features of the (integer) timestep, dimension must be even.
inline Vec time_features(int t, int time_dim) {
    Vec f(time_dim);
    const int half = time_dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        f[i] = std::sin(t * freq);
        f[half + i] = std::cos(t * freq);
    }
    return f;
}

struct MlpConfig {
    int data_dim = 2;
    std::vector<int> hidden = {64, 64};
    int time_dim = 16;            // even
    int cond_dim = 8;
    int num_labels = 2;           // embedding table has num_labels + 1 rows
    Activation act = Activation::silu;

    int input_dim() const { return data_dim + time_dim + cond_dim; }

    void validate() const {
        if (data_dim < 1) throw std::invalid_argument("mlp: data_dim >= 1");
        if (time_dim < 2 || time_dim % 2 != 0)
            throw std::invalid_argument("mlp: time_dim must be even and >= 2");
        if (cond_dim < 1) throw std::invalid_argument("mlp: cond_dim >= 1");
        if (num_labels < 1) throw std::invalid_argument("mlp: num_labels >= 1");
        for (int h : hidden)
            if (h < 1) throw std::invalid_argument("mlp: hidden width >= 1");
    }
};

// Activations cached by a forward pass, consumed by the backward pass.
struct MlpWorkspace {
    Vec input;                 // [z_t ; time features ; condition embedding]
    std::vector<Vec> pre;      // pre-activations per layer
    std::vector<Vec> act;      // post-activations per hidden layer
    int cond_row = -1;
};

// Gradients w.r.t. all MLP parameters, accumulated across a batch.
struct MlpGrads {
    Mat d_cond_embed;
    std::vector<Mat> dW;
    std::vector<Vec> db;
};

// Small conditional MLP predicting the injected noise from
// (z_t, t, condition). Conditions are labels or Null; Null routes to the
// last embedding row. Evaluation is deterministic given the weights.
class MlpDenoiser final : public Denoiser {
  public:
    struct Layer {
        Mat W;  // out x in
        Vec b;  // out
    };

    MlpDenoiser() = default;

    MlpDenoiser(MlpConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(init_seed);
        cond_embed_ = Mat::Zero(cfg_.num_labels + 1, cfg_.cond_dim);
        for (Eigen::Index i = 0; i < cond_embed_.rows(); ++i)
            for (Eigen::Index j = 0; j < cond_embed_.cols(); ++j)
                cond_embed_(i, j) = 0.5 * rng.normal();
        int in = cfg_.input_dim();
        for (std::size_t l = 0; l <= cfg_.hidden.size(); ++l) {
            const int out = l < cfg_.hidden.size() ? cfg_.hidden[l] : cfg_.data_dim;
            Layer layer;
            layer.W = Mat::Zero(out, in);
            const double scale = std::sqrt(2.0 / (in + out));
            for (int r = 0; r < out; ++r)
                for (int c = 0; c < in; ++c) layer.W(r, c) = scale * rng.normal();
            layer.b = Vec::Zero(out);
            layers_.push_back(std::move(layer));
            in = out;
        }
    }

    const MlpConfig& config() const { return cfg_; }
    int data_dim() const override { return cfg_.data_dim; }
    int num_layers() const { return static_cast<int>(layers_.size()); }

    std::vector<Layer>& layers() { return layers_; }
    const std::vector<Layer>& layers() const { return layers_; }
    Mat& cond_embed() { return cond_embed_; }
    const Mat& cond_embed() const { return cond_embed_; }

    // Hidden linear layers, the default adapter targets (output layer
    // excluded).
    std::vector<int> hidden_layer_ids() const {
        std::vector<int> ids;
        for (int l = 0; l + 1 < num_layers(); ++l) ids.push_back(l);
        return ids;
    }

    int embedding_row(const Condition& cond) const {
        if (is_null(cond)) return cfg_.num_labels;
        if (const auto* l = std::get_if<LabelCond>(&cond)) {
            if (l->index < 0 || l->index >= cfg_.num_labels)
                throw std::invalid_argument("mlp: label " +
                                            std::to_string(l->index) +
                                            " outside vocabulary");
            return l->index;
        }
        throw std::invalid_argument("mlp: vector conditions are not supported");
    }

    Vec eval_eps(const Vec& z_t, const Condition& cond, int t) const override {
        MlpWorkspace ws;
        return forward(*this_layer_views(), z_t, cond, t, ws);
    }

    // Forward pass through an arbitrary set of layer weights (own weights,
    // or adapter-modified ones) recording activations for backward.
    struct LayerView {
        const Mat* W;
        const Vec* b;
    };

    std::vector<LayerView> layer_views() const {
        std::vector<LayerView> v;
        v.reserve(layers_.size());
        for (const Layer& l : layers_) v.push_back({&l.W, &l.b});
        return v;
    }

    Vec forward(const std::vector<LayerView>& views, const Vec& z_t,
                const Condition& cond, int t, MlpWorkspace& ws) const {
        if (z_t.size() != cfg_.data_dim)
            throw std::invalid_argument("mlp: input has dimension " +
                                        std::to_string(z_t.size()) +
                                        ", expected " +
                                        std::to_string(cfg_.data_dim));
        if (t < 1) throw std::out_of_range("mlp: timestep must be >= 1");
        ws.cond_row = embedding_row(cond);
        ws.input.resize(cfg_.input_dim());
        ws.input << z_t, time_features(t, cfg_.time_dim),
            cond_embed_.row(ws.cond_row).transpose();
        ws.pre.assign(views.size(), Vec());
        ws.act.assign(views.size(), Vec());
        const Vec* x = &ws.input;
        for (std::size_t l = 0; l < views.size(); ++l) {
            ws.pre[l] = (*views[l].W) * (*x) + (*views[l].b);
            if (l + 1 < views.size()) {
                ws.act[l] = ws.pre[l].unaryExpr([](double v) { return silu(v); });
                x = &ws.act[l];
            }
        }
        const Vec& out = ws.pre.back();
        if (!out.allFinite())
            throw std::runtime_error("mlp: non-finite output (weights diverged?)");
        return out;
    }

    // Backward pass matching forward(); accumulates per-layer weight/bias
    // gradients and the used condition-embedding row. Returns nothing the
    // caller did not ask for: pass nullptr to skip a gradient sink.
    void backward(const std::vector<LayerView>& views, const MlpWorkspace& ws,
                  const Vec& d_out, std::vector<Mat>* dW, std::vector<Vec>* db,
                  Mat* d_cond_embed) const {
        const int L = static_cast<int>(views.size());
        Vec delta = d_out;
        for (int l = L - 1; l >= 0; --l) {
            const Vec& in = l == 0 ? ws.input : ws.act[l - 1];
            if (dW) (*dW)[l].noalias() += delta * in.transpose();
            if (db) (*db)[l] += delta;
            if (l == 0) {
                if (d_cond_embed) {
                    const Vec d_in = views[0].W->transpose() * delta;
                    d_cond_embed->row(ws.cond_row) +=
                        d_in.tail(cfg_.cond_dim).transpose();
                }
                break;
            }
            Vec d_act = views[l].W->transpose() * delta;
            delta = d_act.cwiseProduct(ws.pre[l - 1].unaryExpr(
                [](double v) { return silu_grad(v); }));
        }
    }

    MlpGrads zero_grads() const {
        MlpGrads g;
        g.d_cond_embed = Mat::Zero(cond_embed_.rows(), cond_embed_.cols());
        for (const Layer& l : layers_) {
            g.dW.emplace_back(Mat::Zero(l.W.rows(), l.W.cols()));
            g.db.emplace_back(Vec::Zero(l.b.size()));
        }
        return g;
    }

  private:
    // layer_views() returns by value; keep eval_eps allocation-light by
    // building views once per call.
    const std::vector<LayerView>* this_layer_views() const {
        thread_local std::vector<LayerView> v;
        v.clear();
        for (const Layer& l : layers_) v.push_back({&l.W, &l.b});
        return &v;
    }

    MlpConfig cfg_;
    Mat cond_embed_;
    std::vector<Layer> layers_;
};

// FNV-1a over the raw bytes of all weights; used by freeze contracts.
inline std::uint64_t weights_hash(const MlpDenoiser& net) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const double* p, Eigen::Index n) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p);
        for (Eigen::Index i = 0; i < n * static_cast<Eigen::Index>(sizeof(double));
             ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    };
    mix(net.cond_embed().data(), net.cond_embed().size());
    for (const auto& l : net.layers()) {
        mix(l.W.data(), l.W.size());
        mix(l.b.data(), l.b.size());
    }
    return h;
}

}  // namespace mitune
