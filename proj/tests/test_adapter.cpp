#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "mitune/adapter.hpp"
#include "mitune/gaussian_world.hpp"
#include "mitune/pipeline.hpp"
#include "mitune/sampler.hpp"

using namespace mitune;

namespace {

MlpConfig small_config() {
    MlpConfig cfg;
    cfg.data_dim = 2;
    cfg.hidden = {6, 5};
    cfg.time_dim = 4;
    cfg.cond_dim = 3;
    cfg.num_labels = 3;
    return cfg;
}

void randomize_adapters(AdaptedDenoiser& net, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& ad : net.adapters()) {
        for (Eigen::Index i = 0; i < ad.B.size(); ++i)
            ad.B.data()[i] = 0.3 * rng.normal();
        for (Eigen::Index i = 0; i < ad.A.size(); ++i)
            ad.A.data()[i] = 0.3 * rng.normal();
        if (ad.variant == AdapterVariant::magnitude_normalized)
            for (Eigen::Index i = 0; i < ad.m.size(); ++i)
                ad.m[i] *= 1.0 + 0.2 * rng.normal();
    }
    net.mark_dirty();
}

}  // namespace

TEST_CASE("injection produces an exact identity at initialization",
          "[adapter]") {
    const MlpDenoiser base(small_config(), 21);
    Rng rng(4);
    for (const AdapterVariant variant :
         {AdapterVariant::plain, AdapterVariant::magnitude_normalized}) {
        const AdaptedDenoiser adapted =
            inject(base, base.hidden_layer_ids(), 2, 2.0, variant);
        for (int i = 0; i < 100; ++i) {
            Vec z(2);
            z << rng.normal(), rng.normal();
            const int t = rng.uniform_int(1, 50);
            const Condition cond =
                i % 3 == 0 ? Condition(NullCond{})
                           : Condition(LabelCond{rng.uniform_int(0, 2)});
            const Vec a = adapted.eval_eps(z, cond, t);
            const Vec b = base.eval_eps(z, cond, t);
            if (variant == AdapterVariant::plain) {
                REQUIRE(testing::bits_equal(a, b));
            } else {
                REQUIRE((a - b).lpNorm<Eigen::Infinity>() < 1e-12);
            }
        }
    }
}

TEST_CASE("injection validation", "[adapter]") {
    const MlpDenoiser base(small_config(), 21);
    REQUIRE_THROWS_AS(inject(base, {0}, 100, 2.0, AdapterVariant::plain),
                      std::invalid_argument);  // rank > layer width
    REQUIRE_THROWS_AS(inject(base, {0, 0}, 2, 2.0, AdapterVariant::plain),
                      std::invalid_argument);  // duplicate
    REQUIRE_THROWS_AS(inject(base, {9}, 2, 2.0, AdapterVariant::plain),
                      std::invalid_argument);  // missing layer
    REQUIRE_THROWS_AS(inject(base, {}, 2, 2.0, AdapterVariant::plain),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(inject(base, {0}, 0, 2.0, AdapterVariant::plain),
                      std::invalid_argument);
}

TEST_CASE("nonzero adapters change the output", "[adapter]") {
    const MlpDenoiser base(small_config(), 21);
    AdaptedDenoiser adapted =
        inject(base, base.hidden_layer_ids(), 2, 2.0, AdapterVariant::plain);
    randomize_adapters(adapted, 77);
    Vec z(2);
    z << 0.4, -0.9;
    REQUIRE_FALSE(testing::bits_equal(adapted.eval_eps(z, LabelCond{0}, 7),
                                      base.eval_eps(z, LabelCond{0}, 7)));
}

TEST_CASE("trainable parameter count matches the analytic formula",
          "[adapter]") {
    const MlpDenoiser base(small_config(), 21);
    const int rank = 2;
    for (const AdapterVariant variant :
         {AdapterVariant::plain, AdapterVariant::magnitude_normalized}) {
        const AdaptedDenoiser adapted =
            inject(base, base.hidden_layer_ids(), rank, 2.0, variant);
        Eigen::Index expect = 0;
        for (int id : base.hidden_layer_ids()) {
            const auto& W = base.layers()[id].W;
            expect += rank * (W.rows() + W.cols());
            if (variant == AdapterVariant::magnitude_normalized)
                expect += W.rows();
        }
        REQUIRE(adapted.trainable_parameter_count() == expect);
    }
}

TEST_CASE("merged weights evaluate like the adapter form", "[adapter]") {
    const MlpDenoiser base(small_config(), 21);
    Rng rng(13);
    for (const AdapterVariant variant :
         {AdapterVariant::plain, AdapterVariant::magnitude_normalized}) {
        AdaptedDenoiser adapted =
            inject(base, base.hidden_layer_ids(), 2, 3.0, variant);
        randomize_adapters(adapted, 31);
        const MlpDenoiser merged = adapted.merged();
        for (int i = 0; i < 25; ++i) {
            Vec z(2);
            z << rng.normal(), rng.normal();
            const Vec a = adapted.eval_eps(z, LabelCond{1}, 9);
            const Vec b = merged.eval_eps(z, LabelCond{1}, 9);
            REQUIRE((a - b).lpNorm<Eigen::Infinity>() < 1e-10);
        }
    }
}

TEST_CASE("adapter gradients match finite differences", "[adapter]") {
    const NoiseSchedule s = build_schedule(40, 1e-3, 0.06);
    const GaussianWorld w = GaussianWorld::mixture_on_circle(2, 3, 2.0, 0.6);
    const auto batch = w.sample_joint(3, 303);
    const MlpDenoiser base(small_config(), 21);

    for (const AdapterVariant variant :
         {AdapterVariant::plain, AdapterVariant::magnitude_normalized}) {
        AdaptedDenoiser adapted =
            inject(base, base.hidden_layer_ids(), 2, 3.0, variant);
        randomize_adapters(adapted, 99);  // move off the B=0 saddle

        TrainConfig cfg;
        cfg.p_drop = 0.2;
        cfg.t_lo = 1;
        cfg.t_hi = 40;
        const std::uint64_t seed = 1234;
        Rng g(seed);
        auto [loss, grads] = loss_simple_adapted(adapted, batch, s, cfg, g);
        REQUIRE(std::isfinite(loss));

        std::vector<double*> params;
        std::vector<Eigen::Index> sizes;
        std::vector<const double*> gptr;
        for (std::size_t i = 0; i < adapted.adapters().size(); ++i) {
            auto& ad = adapted.adapters()[i];
            params.push_back(ad.A.data());
            sizes.push_back(ad.A.size());
            gptr.push_back(grads.dA[i].data());
            params.push_back(ad.B.data());
            sizes.push_back(ad.B.size());
            gptr.push_back(grads.dB[i].data());
            if (variant == AdapterVariant::magnitude_normalized) {
                params.push_back(ad.m.data());
                sizes.push_back(ad.m.size());
                gptr.push_back(grads.dm[i].data());
            }
        }
        auto f = [&] {
            adapted.mark_dirty();  // params were perturbed in place
            Rng rng(seed);
            return loss_simple_adapted(adapted, batch, s, cfg, rng).first;
        };
        REQUIRE(testing::max_fd_rel_err(params, sizes, gptr, f) < 1e-4);
        adapted.mark_dirty();
    }
}

TEST_CASE("finetune trains adapters only and freezes the base", "[adapter]") {
    const NoiseSchedule s = build_schedule(60, 1e-3, 0.08);
    const GaussianWorld w = GaussianWorld::mixture_on_circle(2, 3, 2.5, 0.5);
    MlpDenoiser base(small_config(), 21);

    FineTuneSet set;
    set.M = 4;
    set.k = 4;
    Rng rng(5);
    for (int i = 0; i < 8; ++i) {
        FineTuneEntry e;
        e.cond = LabelCond{i % 3};
        e.z = w.sample_data_given(e.cond, rng);
        set.entries.push_back(std::move(e));
    }

    TrainConfig cfg;
    cfg.batch = 8;
    cfg.iters = 40;
    cfg.p_drop = 0.0;
    cfg.seed = 99;

    SECTION("zero iterations is a no-op") {
        AdaptedDenoiser adapted = inject(base, base.hidden_layer_ids(), 2, 2.0,
                                         AdapterVariant::plain);
        TrainConfig zero = cfg;
        zero.iters = 0;
        Vec z(2);
        z << 0.2, 0.1;
        const Vec before = adapted.eval_eps(z, LabelCond{0}, 5);
        finetune_adapters(adapted, set, s, zero);
        REQUIRE(testing::bits_equal(adapted.eval_eps(z, LabelCond{0}, 5), before));
    }

    SECTION("frozen base hash is unchanged by a real run") {
        for (const AdapterVariant variant :
             {AdapterVariant::plain, AdapterVariant::magnitude_normalized}) {
            AdaptedDenoiser adapted =
                inject(base, base.hidden_layer_ids(), 2, 2.0, variant);
            const std::uint64_t before = weights_hash(adapted.base());
            const TrainResult r = finetune_adapters(adapted, set, s, cfg);
            REQUIRE(weights_hash(adapted.base()) == before);
            REQUIRE(r.trace.size() == 40);
            REQUIRE(std::isfinite(r.val_final));
        }
    }

    SECTION("empty set is rejected") {
        AdaptedDenoiser adapted = inject(base, base.hidden_layer_ids(), 2, 2.0,
                                         AdapterVariant::plain);
        REQUIRE_THROWS_AS(finetune_adapters(adapted, FineTuneSet{}, s, cfg),
                          std::invalid_argument);
    }
}

TEST_CASE("finetuning on one mode pulls conditional generation toward it",
          "[adapter][slow]") {
    const NoiseSchedule s = build_schedule(80, 5e-4, 0.1);
    const GaussianWorld w = GaussianWorld::mixture_on_circle(2, 2, 2.2, 0.5);

    // base trained briefly on a *uniform* mixture so label 0 is fuzzy
    MlpConfig mc;
    mc.data_dim = 2;
    mc.hidden = {32, 32};
    mc.num_labels = 2;
    MlpDenoiser base(mc, 3);
    TrainConfig pre;
    pre.batch = 64;
    pre.iters = 800;
    pre.seed = 17;
    const GaussianWorld noisy =
        GaussianWorld::mixture_on_circle(2, 2, 2.2, 0.5, 0.45);
    train(base, TrainData::from_world(noisy), s, pre);

    const int target = 0;
    FineTuneSet set;
    Rng rng(7);
    for (int i = 0; i < 6; ++i) {
        FineTuneEntry e;
        e.cond = LabelCond{target};
        e.z = w.sample_data_given(e.cond, rng);
        set.entries.push_back(std::move(e));
    }

    auto mean_dist = [&](const Denoiser& net) {
        double acc = 0.0;
        const int n = 300;
        for (int i = 0; i < n; ++i) {
            SamplerConfig sc;
            sc.guidance = 1.0;
            sc.seed = derive_seed(4242, i);
            acc += (generate(net, LabelCond{target}, s, sc) - w.means[target])
                       .norm();
        }
        return acc / n;
    };

    const double before = mean_dist(base);
    AdaptedDenoiser adapted = inject(base, base.hidden_layer_ids(), 4, 4.0,
                                     AdapterVariant::magnitude_normalized);
    TrainConfig ft;
    ft.batch = 16;
    ft.iters = 300;
    ft.p_drop = 0.0;
    ft.t_lo = s.T / 2;
    ft.seed = 21;
    finetune_adapters(adapted, set, s, ft);
    const double after = mean_dist(adapted.merged());
    REQUIRE(after < before);
}
