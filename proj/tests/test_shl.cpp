#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "anomalign/common.hpp"
#include "anomalign/shl.hpp"

#include <cmath>
#include <numeric>

using namespace anomalign;

namespace {

std::vector<Image> toy_normals(int count, int size, std::uint64_t seed) {
    // bright blob with an oriented stripe pattern on a dark background
    std::vector<Image> out;
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, "toy_normal", static_cast<std::uint64_t>(i)));
        Image img(size, size, 3, 0.2f);
        const double cx = size / 2.0 + rng.uniform(-1, 1);
        const double cy = size / 2.0 + rng.uniform(-1, 1);
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                const double d = std::hypot(x - cx, y - cy);
                if (d < size * 0.3) {
                    const float s = static_cast<float>(0.5 + 0.3 * std::sin(0.45 * x));
                    img.at(0, y, x) = s;
                    img.at(1, y, x) = 0.8f - s * 0.3f;
                    img.at(2, y, x) = 0.35f;
                }
            }
        }
        for (float& v : img.data) {
            v = std::clamp(v + static_cast<float>(rng.uniform(-0.01, 0.01)), 0.0f, 1.0f);
        }
        out.push_back(std::move(img));
    }
    return out;
}

ShlConfig small_cfg(std::uint64_t seed) {
    ShlConfig cfg;
    cfg.iterations = 40;
    cfg.checkpoint_every = 10;
    cfg.batch_size = 2;
    cfg.lr = 1e-3;
    cfg.input_size = 64;
    cfg.seed = seed;
    cfg.augmentation.category = AugmentCategory::None;
    return cfg;
}

} // namespace

TEST_CASE("shl_loss hand cases") {
    CornerDisplacement zero{};
    CHECK(shl_loss(zero, zero) == 0.0);

    CornerDisplacement ones;
    for (auto& p : ones.deltas) p = {1.0, 1.0};
    CHECK(shl_loss(ones, zero) == doctest::Approx(8.0).epsilon(1e-12));

    const CornerDisplacement ramp = CornerDisplacement::from_flat({1, 2, 3, 4, 5, 6, 7, 8});
    CHECK(shl_loss(zero, ramp) == doctest::Approx(204.0).epsilon(1e-12));

    // symmetric, nonnegative, zero iff equal
    CHECK(shl_loss(ramp, zero) == shl_loss(zero, ramp));
    CHECK(shl_loss(ramp, ramp) == 0.0);
    CHECK(shl_loss(ones, ramp) > 0.0);
}

TEST_CASE("config validation") {
    ShlConfig cfg;
    CHECK(cfg.iterations / cfg.checkpoint_every == 30); // default schedule
    CHECK_NOTHROW(cfg.validate());

    cfg.checkpoint_every = 7; // does not divide 3000
    CHECK_THROWS_AS(cfg.validate(), ValidationError);

    cfg = ShlConfig{};
    cfg.rho = 100.0; // above input_size/4
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("finetune: series layout, loss trend, determinism") {
    const std::vector<Image> normals = toy_normals(4, 64, 7);

    auto backbone = make_compact_cnn(11);
    ShlConfig cfg = small_cfg(21);
    cfg.iterations = 300;
    cfg.checkpoint_every = 100;
    const CheckpointSeries series = finetune_backbone(*backbone, normals, cfg);

    REQUIRE(series.entries.size() == 3);
    CHECK(series.entries[0].iteration == 100);
    CHECK(series.entries[2].iteration == 300);
    REQUIRE(series.loss_curve.size() == 300);

    const int decile = 30;
    const double first = std::accumulate(series.loss_curve.begin(),
                                         series.loss_curve.begin() + decile, 0.0) / decile;
    const double last = std::accumulate(series.loss_curve.end() - decile,
                                        series.loss_curve.end(), 0.0) / decile;
    CHECK(last < first);

    // same seed, fresh backbone with the same init: identical curve
    auto backbone2 = make_compact_cnn(11);
    const CheckpointSeries series2 = finetune_backbone(*backbone2, normals, cfg);
    REQUIRE(series2.loss_curve.size() == series.loss_curve.size());
    for (std::size_t i = 0; i < series.loss_curve.size(); ++i) {
        CHECK(series.loss_curve[i] == series2.loss_curve[i]);
    }
    CHECK(series.entries[2].weights == series2.entries[2].weights);
}

TEST_CASE("worker count does not change results") {
    const std::vector<Image> normals = toy_normals(3, 64, 9);
    ShlConfig cfg = small_cfg(5);
    cfg.batch_size = 4;
    cfg.iterations = 10;
    cfg.checkpoint_every = 5;

    auto serial = make_compact_cnn(2);
    const CheckpointSeries s1 = finetune_backbone(*serial, normals, cfg);

    cfg.workers = 2;
    auto parallel = make_compact_cnn(2);
    const CheckpointSeries s2 = finetune_backbone(*parallel, normals, cfg);

    CHECK(s1.loss_curve == s2.loss_curve);
    CHECK(s1.entries.back().weights == s2.entries.back().weights);
}

TEST_CASE("checkpoints have no lookahead: prefix runs match") {
    const std::vector<Image> normals = toy_normals(3, 64, 13);
    ShlConfig cfg = small_cfg(17);

    auto full = make_compact_cnn(4);
    const CheckpointSeries long_run = finetune_backbone(*full, normals, cfg); // 40 iters

    cfg.iterations = 20;
    auto half = make_compact_cnn(4);
    const CheckpointSeries short_run = finetune_backbone(*half, normals, cfg);

    REQUIRE(long_run.entries.size() == 4);
    REQUIRE(short_run.entries.size() == 2);
    CHECK(long_run.entries[0].weights == short_run.entries[0].weights);
    CHECK(long_run.entries[1].weights == short_run.entries[1].weights);
}

TEST_CASE("resume reproduces the uninterrupted run bit-exactly") {
    const std::vector<Image> normals = toy_normals(3, 64, 23);
    const ShlConfig cfg = small_cfg(29);

    auto reference = make_compact_cnn(6);
    ShlTrainer ref_trainer(*reference, normals, cfg);
    ref_trainer.run_to(40);

    auto interrupted = make_compact_cnn(6);
    ShlTrainer first_half(*interrupted, normals, cfg);
    first_half.run_to(20);
    const CheckpointData state = first_half.export_state();

    auto resumed = make_compact_cnn(999); // wrong init, restored from state
    ShlTrainer second_half(*resumed, normals, cfg);
    second_half.import_state(state);
    CHECK(second_half.iteration() == 20);
    second_half.run_to(40);

    CHECK(reference->snapshot() == resumed->snapshot());
    const auto& ref_curve = ref_trainer.series().loss_curve;
    const auto& res_curve = second_half.series().loss_curve;
    REQUIRE(res_curve.size() == 40);
    for (std::size_t i = 20; i < 40; ++i) CHECK(ref_curve[i] == res_curve[i]);
}

TEST_CASE("select_checkpoint: argmax with earliest-tie rule") {
    CheckpointSeries series;
    for (int i = 1; i <= 5; ++i) series.entries.push_back({i * 100, {}, 0.0});

    const auto monotone = [](const Checkpoint& c) { return static_cast<double>(c.iteration); };
    CHECK(select_checkpoint(series, monotone).iteration == 500);

    const auto constant = [](const Checkpoint&) { return 0.25; };
    CHECK(select_checkpoint(series, constant).iteration == 100);

    const std::vector<double> table = {0.8, 0.95, 0.95, 0.6, 0.9};
    const auto lookup = [&](const Checkpoint& c) {
        return table[static_cast<std::size_t>(c.iteration / 100 - 1)];
    };
    // brute-force argmax with earliest tie
    std::size_t best = 0;
    for (std::size_t i = 1; i < table.size(); ++i) {
        if (table[i] > table[best]) best = i;
    }
    CHECK(select_checkpoint(series, lookup).iteration == static_cast<int>((best + 1) * 100));

    // argmax is invariant under strictly monotone transforms
    const auto warped = [&](const Checkpoint& c) { return std::exp(3.0 * lookup(c)) - 2.0; };
    CHECK(select_checkpoint(series, warped).iteration == select_checkpoint(series, lookup).iteration);
}

TEST_CASE("head gradient check against central finite differences") {
    Rng rng(31);
    nn::Linear<float> head(24, 8);
    head.init_he(rng);

    std::vector<nn::Tensor<double>> probes;
    std::vector<CornerDisplacement> targets;
    for (int k = 0; k < 3; ++k) {
        nn::Tensor<double> t(24, 3, 3);
        for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
        probes.push_back(std::move(t));
        std::array<double, 8> flat;
        for (double& v : flat) v = rng.uniform(-16.0, 16.0);
        targets.push_back(CornerDisplacement::from_flat(flat));
    }
    CHECK(grad_check_head(head, probes, targets) < 1e-3);

    // zero-loss configuration: analytic gradient vanishes
    nn::Linear<double> lin(head.in_dim, head.out_dim);
    std::copy(head.weight.begin(), head.weight.end(), lin.weight.begin());
    std::copy(head.bias.begin(), head.bias.end(), lin.bias.begin());
    const nn::Tensor<double> pooled = nn::global_avg_pool(probes[0]);
    const std::vector<double> pred = lin.forward(pooled.data);
    std::vector<double> dpred(8);
    for (std::size_t i = 0; i < 8; ++i) dpred[i] = 2.0 * (pred[i] - pred[i]); // target == pred
    std::vector<double> dw(lin.weight.size(), 0.0), db(lin.bias.size(), 0.0);
    lin.backward(pooled.data, dpred, dw, db);
    for (const double g : dw) CHECK(std::abs(g) < 1e-8);
    for (const double g : db) CHECK(std::abs(g) < 1e-8);

    // doubling the loss scale doubles the gradient norm
    std::vector<double> dpred1(8), dpred2(8);
    for (std::size_t i = 0; i < 8; ++i) {
        dpred1[i] = 2.0 * pred[i];
        dpred2[i] = 4.0 * pred[i];
    }
    std::vector<double> dw1(lin.weight.size(), 0.0), db1(lin.bias.size(), 0.0);
    std::vector<double> dw2(lin.weight.size(), 0.0), db2(lin.bias.size(), 0.0);
    lin.backward(pooled.data, dpred1, dw1, db1);
    lin.backward(pooled.data, dpred2, dw2, db2);
    double n1 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < dw1.size(); ++i) {
        n1 += dw1[i] * dw1[i];
        n2 += dw2[i] * dw2[i];
    }
    CHECK(std::sqrt(n2) == doctest::Approx(2.0 * std::sqrt(n1)).epsilon(1e-6));
}

TEST_CASE("series persistence round trip") {
    const std::vector<Image> normals = toy_normals(2, 64, 3);
    ShlConfig cfg = small_cfg(41);
    cfg.iterations = 20;
    cfg.checkpoint_every = 10;
    auto backbone = make_compact_cnn(8);
    const CheckpointSeries series = finetune_backbone(*backbone, normals, cfg);

    const auto dir = std::filesystem::temp_directory_path() / "anomalign_tests" / "series";
    std::filesystem::remove_all(dir);
    save_checkpoint_series(series, "compact_cnn", "cfg_hash_demo", dir);

    std::string backbone_id, config_hash;
    const CheckpointSeries loaded = load_checkpoint_series(dir, &backbone_id, &config_hash);
    CHECK(backbone_id == "compact_cnn");
    CHECK(config_hash == "cfg_hash_demo");
    REQUIRE(loaded.entries.size() == series.entries.size());
    for (std::size_t i = 0; i < series.entries.size(); ++i) {
        CHECK(loaded.entries[i].iteration == series.entries[i].iteration);
        CHECK(loaded.entries[i].weights == series.entries[i].weights);
        CHECK(loaded.entries[i].loss == series.entries[i].loss);
    }
    CHECK(loaded.loss_curve == series.loss_curve);
}

TEST_CASE("augmentation hook observes the configured policy") {
    const std::vector<Image> normals = toy_normals(2, 64, 3);
    ShlConfig cfg = small_cfg(43);
    cfg.iterations = 5;
    cfg.checkpoint_every = 5;
    cfg.augmentation.category = AugmentCategory::Color;

    int calls = 0;
    TrainHooks hooks;
    hooks.on_augment = [&](const AugmentationPolicy& p) {
        CHECK(p.category == AugmentCategory::Color);
        ++calls;
    };
    auto backbone = make_compact_cnn(12);
    finetune_backbone(*backbone, normals, cfg, hooks);
    CHECK(calls == 5 * cfg.batch_size);
}

TEST_CASE("non-finite loss reports the step index") {
    const std::vector<Image> normals = toy_normals(2, 64, 3);
    ShlConfig cfg = small_cfg(47);
    cfg.lr = 1e30; // blows up immediately
    auto backbone = make_compact_cnn(13);
    try {
        finetune_backbone(*backbone, normals, cfg);
        // divergence with a finite loss is acceptable; force the throw check
        // only when it actually occurred
    } catch (const NonFiniteLoss& e) {
        CHECK(e.step() >= 1);
        return;
    }
    WARN_MESSAGE(true, "loss stayed finite under an absurd learning rate");
}
