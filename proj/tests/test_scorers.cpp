#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "anomalign/common.hpp"
#include "anomalign/scorers.hpp"

#include <cmath>
#include <filesystem>

using namespace anomalign;
namespace fs = std::filesystem;

namespace {

FeatureMap make_map(const std::string& layer, int channels, int h, int w, Rng& rng) {
    FeatureMap m{layer, channels, h, w, {}};
    m.values.resize(static_cast<std::size_t>(channels) * h * w);
    for (float& v : m.values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return m;
}

// single-tap feature sets with a fixed grid make the oracles easy to state
std::vector<std::vector<FeatureMap>> random_feature_sets(int n, int channels, int grid,
                                                         std::uint64_t seed) {
    std::vector<std::vector<FeatureMap>> sets;
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, "featset", static_cast<std::uint64_t>(i)));
        sets.push_back({make_map("t", channels, grid, grid, rng)});
    }
    return sets;
}

ModelMeta test_meta(int input = 8) {
    ModelMeta meta;
    meta.backbone_id = "compact_cnn";
    meta.checkpoint_id = "baseline";
    meta.config_hash = "hash0";
    meta.input_width = input;
    meta.input_height = input;
    return meta;
}

} // namespace

TEST_CASE("mahalanobis hand cases") {
    Eigen::VectorXd mu(2);
    mu << 1.0, 2.0;

    Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(2, 2);
    CHECK(mahalanobis(mu, mu, identity) == 0.0);

    Eigen::VectorXd x(2);
    x << 4.0, 6.0; // offset (3, 4): Euclidean distance 5 under identity
    CHECK(mahalanobis(x, mu, identity) == doctest::Approx(5.0).epsilon(1e-12));

    // covariance diag(2, 0.5): d^2 = 1/2 + 2 = 2.5
    Eigen::MatrixXd chol = Eigen::MatrixXd::Zero(2, 2);
    chol(0, 0) = std::sqrt(2.0);
    chol(1, 1) = std::sqrt(0.5);
    Eigen::VectorXd off(2);
    off << 2.0, 3.0; // x - mu = (1, 1)
    CHECK(std::abs(mahalanobis(off, mu, chol) - std::sqrt(2.5)) < 1e-8);

    Eigen::VectorXd wrong(3);
    CHECK_THROWS_AS(mahalanobis(wrong, mu, identity), DimensionMismatch);
}

TEST_CASE("padim: identical normals give eps-I covariance and zero member distance") {
    Rng rng(5);
    const FeatureMap shared = make_map("t", 6, 4, 4, rng);
    std::vector<std::vector<FeatureMap>> sets(5, {shared});

    PadimConfig cfg;
    cfg.channels = 6;
    cfg.smooth_sigma = 0.0;
    const PadimModel model = padim_fit(sets, cfg, test_meta(4));

    for (const Eigen::MatrixXd& cov : model.stats.covariance) {
        for (int r = 0; r < 6; ++r) {
            for (int c = 0; c < 6; ++c) {
                CHECK(cov(r, c) == (r == c ? cfg.eps : 0.0));
            }
        }
    }

    const ScoreResult result = padim_score(model, sets[0]);
    CHECK(result.image_score <= 1e-8);
    for (const float v : result.score_map.data) CHECK(v <= 1e-8f);
    CHECK(result.scorer_id == "padim");
}

TEST_CASE("padim: two-image 1x1 hand oracle and mahalanobis reduction") {
    FeatureMap a{"t", 2, 1, 1, {1.0f, 0.0f}};
    FeatureMap b{"t", 2, 1, 1, {3.0f, 4.0f}};
    const std::vector<std::vector<FeatureMap>> sets = {{a}, {b}};

    PadimConfig cfg;
    cfg.channels = 2;
    cfg.eps = 0.01;
    cfg.smooth_sigma = 0.0;
    const PadimModel model = padim_fit(sets, cfg, test_meta(1));

    REQUIRE(model.stats.mean.size() == 1);
    CHECK(model.stats.mean[0](0) == doctest::Approx(2.0));
    CHECK(model.stats.mean[0](1) == doctest::Approx(2.0));
    // sample covariance with N-1: [[2,4],[4,8]] + eps I
    CHECK(model.stats.covariance[0](0, 0) == doctest::Approx(2.01));
    CHECK(model.stats.covariance[0](0, 1) == doctest::Approx(4.0));
    CHECK(model.stats.covariance[0](1, 0) == doctest::Approx(4.0));
    CHECK(model.stats.covariance[0](1, 1) == doctest::Approx(8.01));

    FeatureMap probe{"t", 2, 1, 1, {2.5f, 1.0f}};
    const std::vector<FeatureMap> probe_set = {probe};
    const ScoreResult result = padim_score(model, probe_set);
    Eigen::VectorXd x(2);
    x << 2.5, 1.0;
    const double direct = mahalanobis(x, model.stats.mean[0], model.stats.chol[0]);
    CHECK(std::abs(result.image_score - direct) < 1e-8);
}

TEST_CASE("padim: perturbing one grid cell moves the pre-smoothing argmax there") {
    const auto sets = random_feature_sets(8, 5, 4, 99);
    PadimConfig cfg;
    cfg.channels = 5;
    cfg.smooth_sigma = 0.0; // map equals raw distances on a 4x4 canvas
    const PadimModel model = padim_fit(sets, cfg, test_meta(4));

    std::vector<FeatureMap> probe = sets[0];
    probe[0].at(2, 1, 3) += 25.0f;
    const ScoreResult result = padim_score(model, probe);
    float best = -1.0f;
    int best_y = -1, best_x = -1;
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
            if (result.score_map.at(0, y, x) > best) {
                best = result.score_map.at(0, y, x);
                best_y = y;
                best_x = x;
            }
        }
    }
    CHECK(best_y == 1);
    CHECK(best_x == 3);
}

TEST_CASE("padim: channel subset reproducible under seed; order invariance") {
    const auto sets = random_feature_sets(6, 12, 3, 7);
    PadimConfig cfg;
    cfg.channels = 5;
    cfg.seed = 21;
    cfg.smooth_sigma = 0.0;
    const PadimModel m1 = padim_fit(sets, cfg, test_meta(3));
    const PadimModel m2 = padim_fit(sets, cfg, test_meta(3));
    CHECK(m1.stats.channel_indices == m2.stats.channel_indices);

    cfg.seed = 22;
    const PadimModel m3 = padim_fit(sets, cfg, test_meta(3));
    CHECK(m1.stats.channel_indices != m3.stats.channel_indices);

    // fitting order of normals does not change scores
    auto shuffled = sets;
    std::swap(shuffled[0], shuffled[3]);
    std::swap(shuffled[1], shuffled[5]);
    cfg.seed = 21;
    const PadimModel m4 = padim_fit(shuffled, cfg, test_meta(3));
    const ScoreResult r1 = padim_score(m1, sets[2]);
    const ScoreResult r4 = padim_score(m4, sets[2]);
    CHECK(std::abs(r1.image_score - r4.image_score) < 1e-10);

    CHECK_THROWS_AS(padim_fit({sets[0]}, cfg, test_meta(3)), InsufficientNormals);
}

TEST_CASE("kcenter_greedy: hand trace, full ratio, oracle equivalence") {
    Eigen::MatrixXf line(3, 1);
    line << 0.0f, 1.0f, 10.0f;
    // find a seed whose starting index is 0
    std::uint64_t seed = 0;
    while (Rng(derive_seed(seed, "kcenter_start")).uniform_int(3) != 0) ++seed;
    const std::vector<int> picked = kcenter_greedy(line, 2, seed);
    REQUIRE(picked.size() == 2);
    CHECK(picked[0] == 0);
    CHECK(picked[1] == 2);

    const std::vector<int> all = kcenter_greedy(line, 3, seed);
    CHECK(all.size() == 3);
    std::vector<int> sorted_all = all;
    std::sort(sorted_all.begin(), sorted_all.end());
    CHECK(sorted_all == std::vector<int>{0, 1, 2});

    // oracle: independent brute-force greedy max-min with the same tie rule
    Rng rng(31);
    Eigen::MatrixXf pts(50, 4);
    for (int i = 0; i < 50; ++i)
        for (int j = 0; j < 4; ++j) pts(i, j) = static_cast<float>(rng.uniform(-1, 1));
    const std::vector<int> fast = kcenter_greedy(pts, 12, 77);

    std::vector<int> slow;
    slow.push_back(Rng(derive_seed(77, "kcenter_start")).uniform_int(50));
    while (slow.size() < 12) {
        int best = -1;
        double best_d = -1.0;
        for (int i = 0; i < 50; ++i) {
            double nearest = std::numeric_limits<double>::infinity();
            for (const int s : slow) {
                const double d = (pts.row(i).cast<double>() - pts.row(s).cast<double>()).squaredNorm();
                nearest = std::min(nearest, d);
            }
            if (nearest > best_d) {
                best_d = nearest;
                best = i;
            }
        }
        slow.push_back(best);
    }
    CHECK(fast == slow);

    CHECK(coreset_count(1.0, 120) == 120);
    CHECK(coreset_count(0.1, 120) == 12);
    CHECK(coreset_count(0.001, 120) == 1);
    CHECK_THROWS_AS(coreset_count(0.0, 10), ValidationError);
}

TEST_CASE("patchcore: bank size, member zero, single-vector field, determinism") {
    const auto sets = random_feature_sets(4, 6, 3, 13);
    PatchcoreConfig cfg;
    cfg.coreset_ratio = 1.0;
    cfg.smooth_sigma = 0.0;
    const MemoryBank bank = patchcore_fit(sets, cfg, test_meta(3));
    CHECK(bank.vectors.rows() == 4 * 9);
    CHECK(bank.dim == 6);

    // a member image's patches sit in the bank: score 0 everywhere
    const ScoreResult member = patchcore_score(bank, sets[1]);
    CHECK(member.image_score <= 1e-6);

    // constant feature maps collapse to identical bank vectors
    FeatureMap constant{"t", 3, 2, 2, std::vector<float>(12, 0.75f)};
    const std::vector<std::vector<FeatureMap>> const_sets(3, {constant});
    const MemoryBank const_bank = patchcore_fit(const_sets, cfg, test_meta(2));
    for (int r = 1; r < const_bank.vectors.rows(); ++r) {
        CHECK(const_bank.vectors.row(r) == const_bank.vectors.row(0));
    }

    // single-vector bank: the map is the distance field to that vector
    PatchcoreConfig tiny;
    tiny.coreset_ratio = 0.001;
    tiny.smooth_sigma = 0.0;
    tiny.neighborhood = 1;
    const MemoryBank single = patchcore_fit({sets[0]}, tiny, test_meta(3));
    REQUIRE(single.vectors.rows() == 1);
    const ScoreResult field = patchcore_score(single, sets[2]);
    const FeatureMap embed = embed_grid(sets[2], 3, 3);
    for (int p = 0; p < 9; ++p) {
        double sq = 0.0;
        for (int c = 0; c < 6; ++c) {
            const double d = static_cast<double>(embed.values[static_cast<std::size_t>(c) * 9 + p]) -
                             single.vectors(0, c);
            sq += d * d;
        }
        CHECK(field.score_map.at(0, p / 3, p % 3) ==
              doctest::Approx(std::sqrt(sq)).epsilon(1e-6));
    }

    // reproducible under seed
    PatchcoreConfig sub;
    sub.coreset_ratio = 0.3;
    sub.seed = 5;
    const MemoryBank b1 = patchcore_fit(sets, sub, test_meta(3));
    const MemoryBank b2 = patchcore_fit(sets, sub, test_meta(3));
    CHECK(b1.coreset_indices == b2.coreset_indices);
}

TEST_CASE("spade: member image zero, identical normals, brute-force map oracle") {
    const auto sets = random_feature_sets(5, 4, 3, 17);
    SpadeConfig cfg;
    cfg.k_neighbors = 1;
    cfg.smooth_sigma = 0.0;
    const SpadeModel k1 = spade_fit(sets, cfg, test_meta(3));
    const ScoreResult member = spade_score(k1, sets[2]);
    CHECK(member.image_score <= 1e-7);
    for (const float v : member.score_map.data) CHECK(v <= 1e-6f);

    // identical normals with K = all: image score equals the distance to the
    // common descriptor
    FeatureMap shared = make_map("t", 4, 3, 3, *std::make_unique<Rng>(3));
    const std::vector<std::vector<FeatureMap>> same(4, {shared});
    SpadeConfig all_cfg;
    all_cfg.k_neighbors = 50; // clamped to 4
    all_cfg.smooth_sigma = 0.0;
    const SpadeModel same_model = spade_fit(same, all_cfg, test_meta(3));
    const std::vector<FeatureMap> probe = {make_map("t", 4, 3, 3, *std::make_unique<Rng>(4))};
    const ScoreResult r = spade_score(same_model, probe);
    const double direct = (global_descriptor(probe) - global_descriptor(same[0])).norm();
    CHECK(r.image_score == doctest::Approx(direct).epsilon(1e-9));

    // map oracle on a small instance: brute-force per-position kNN over the
    // retrieved neighbors with radius-1 positions
    SpadeConfig cfg2;
    cfg2.k_neighbors = 3;
    cfg2.kappa = 2;
    cfg2.smooth_sigma = 0.0;
    const SpadeModel model = spade_fit(sets, cfg2, test_meta(3));
    const std::vector<FeatureMap>& test_set = sets[4];
    const ScoreResult scored = spade_score(model, test_set);

    const Eigen::VectorXd desc = global_descriptor(test_set);
    std::vector<std::pair<double, int>> by_dist;
    for (int i = 0; i < 5; ++i) {
        by_dist.push_back({(desc - model.globals.row(i).transpose()).norm(), i});
    }
    std::sort(by_dist.begin(), by_dist.end());
    const FeatureMap test_embed = embed_grid(test_set, 3, 3);
    for (int py = 0; py < 3; ++py) {
        for (int px = 0; px < 3; ++px) {
            std::vector<double> cand;
            for (int i = 0; i < 3; ++i) {
                const auto& grid = model.grids[static_cast<std::size_t>(by_dist[static_cast<std::size_t>(i)].second)];
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int qy = py + dy, qx = px + dx;
                        if (qy < 0 || qy >= 3 || qx < 0 || qx >= 3) continue;
                        double sq = 0.0;
                        for (int c = 0; c < 4; ++c) {
                            const double d =
                                static_cast<double>(test_embed.values[static_cast<std::size_t>(c) * 9 + py * 3 + px]) -
                                grid(qy * 3 + qx, c);
                            sq += d * d;
                        }
                        cand.push_back(std::sqrt(sq));
                    }
                }
            }
            std::sort(cand.begin(), cand.end());
            const double expect = (cand[0] + cand[1]) / 2.0;
            CHECK(std::abs(scored.score_map.at(0, py, px) - expect) < 1e-6);
        }
    }
}

TEST_CASE("mahad: zero at the mean, hand case, empty map") {
    const auto sets = random_feature_sets(3, 5, 2, 23);
    MahadConfig cfg;
    const MahadModel model = mahad_fit(sets, cfg, test_meta(2));

    // descriptor exactly at the mean scores zero
    CHECK(model.mean.size() == 5);
    Eigen::VectorXd at_mean = model.mean;
    CHECK(mahalanobis(at_mean, model.mean, model.chol) == 0.0);

    // scoring matches a direct mahalanobis on the pooled descriptor
    const ScoreResult r = mahad_score(model, sets[0]);
    const double direct = mahalanobis(global_descriptor(sets[0]), model.mean, model.chol);
    CHECK(std::abs(r.image_score - direct) < 1e-12);
    CHECK(r.score_map.empty());

    // order invariance
    auto shuffled = sets;
    std::swap(shuffled[0], shuffled[2]);
    const MahadModel m2 = mahad_fit(shuffled, cfg, test_meta(2));
    CHECK(std::abs(mahad_score(m2, sets[0]).image_score - r.image_score) < 1e-10);

    CHECK_THROWS_AS(mahad_fit({sets[0]}, cfg, test_meta(2)), InsufficientNormals);
}

TEST_CASE("score maps are nonnegative with fit-resolution dims") {
    const auto sets = random_feature_sets(4, 6, 4, 29);
    PadimConfig cfg;
    cfg.channels = 6;
    const ModelMeta meta = test_meta(16);
    const PadimModel model = padim_fit(sets, cfg, meta);
    const ScoreResult r = padim_score(model, sets[0]);
    CHECK(r.score_map.width == 16);
    CHECK(r.score_map.height == 16);
    CHECK(r.image_score >= 0.0);
    for (const float v : r.score_map.data) CHECK(v >= 0.0f);
}

TEST_CASE("model persistence round trips and refuses mismatched extractors") {
    const fs::path dir = fs::temp_directory_path() / "anomalign_tests" / "models";
    fs::remove_all(dir);

    const auto sets = random_feature_sets(4, 5, 3, 31);
    const ModelMeta meta = test_meta(3);

    PadimConfig pcfg;
    pcfg.channels = 4;
    pcfg.smooth_sigma = 0.0;
    const PadimModel padim = padim_fit(sets, pcfg, meta);
    save_padim_model(padim, dir / "padim");
    const PadimModel padim2 = load_padim_model(dir / "padim", meta);
    const double s1 = padim_score(padim, sets[1]).image_score;
    const double s2 = padim_score(padim2, sets[1]).image_score;
    CHECK(s1 == doctest::Approx(s2).epsilon(1e-12));

    ModelMeta stale = meta;
    stale.config_hash = "other";
    CHECK_THROWS_AS(load_padim_model(dir / "padim", stale), ConfigHashMismatch);

    PatchcoreConfig bcfg;
    bcfg.coreset_ratio = 0.5;
    bcfg.smooth_sigma = 0.0;
    const MemoryBank bank = patchcore_fit(sets, bcfg, meta);
    save_memory_bank(bank, dir / "bank");
    const MemoryBank bank2 = load_memory_bank(dir / "bank", meta);
    CHECK(bank2.vectors == bank.vectors);
    CHECK(bank2.coreset_indices == bank.coreset_indices);

    const MahadModel mahad = mahad_fit(sets, MahadConfig{}, meta);
    save_mahad_model(mahad, dir / "mahad");
    const MahadModel mahad2 = load_mahad_model(dir / "mahad", meta);
    CHECK(mahad_score(mahad2, sets[0]).image_score ==
          doctest::Approx(mahad_score(mahad, sets[0]).image_score).epsilon(1e-12));
}

TEST_CASE("embed_grid and neighborhood_average basics") {
    Rng rng(37);
    const FeatureMap a = make_map("a", 2, 4, 4, rng);
    const FeatureMap b = make_map("b", 3, 2, 2, rng);
    const std::vector<FeatureMap> maps = {a, b};
    const FeatureMap embed = embed_grid(maps, 4, 4);
    CHECK(embed.channels == 5);
    CHECK(embed.height == 4);
    // first block is the identity copy of map a
    for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(embed.values[i] == a.values[i]);

    // constant map is unchanged by neighborhood averaging
    FeatureMap constant{"c", 1, 3, 3, std::vector<float>(9, 0.5f)};
    const FeatureMap averaged = neighborhood_average(constant, 3);
    for (const float v : averaged.values) CHECK(v == doctest::Approx(0.5f));

    // corner of a delta map averages over its in-bounds 2x2 neighborhood
    FeatureMap delta{"d", 1, 3, 3, std::vector<float>(9, 0.0f)};
    delta.at(0, 0, 0) = 4.0f;
    const FeatureMap spread = neighborhood_average(delta, 3);
    CHECK(spread.at(0, 0, 0) == doctest::Approx(1.0f));
    CHECK(spread.at(0, 2, 2) == doctest::Approx(0.0f));
}
