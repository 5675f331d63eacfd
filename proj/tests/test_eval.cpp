#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "anomalign/common.hpp"
#include "anomalign/eval.hpp"
#include "anomalign/hash.hpp"

#include <cmath>
#include <filesystem>

using namespace anomalign;
namespace fs = std::filesystem;

namespace {

// O(n^2) pair-counting oracle with half-credit ties
double auroc_oracle(std::span<const double> scores, std::span<const int> labels) {
    double wins = 0.0;
    long pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 0) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "anomalign_tests" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

} // namespace

TEST_CASE("auroc basics") {
    const std::vector<double> separated = {0.1, 0.2, 0.3, 0.8, 0.9};
    const std::vector<int> labels = {0, 0, 0, 1, 1};
    CHECK(auroc(separated, labels) == 1.0);

    const std::vector<double> constant = {0.5, 0.5, 0.5, 0.5};
    const std::vector<int> half = {0, 1, 0, 1};
    CHECK(auroc(constant, half) == 0.5);

    const std::vector<double> inverted = {0.9, 0.8, 0.1, 0.2};
    const std::vector<int> inv_labels = {0, 0, 1, 1};
    CHECK(auroc(inverted, inv_labels) == 0.0);

    const std::vector<int> single(4, 1);
    CHECK_THROWS_AS(auroc(constant, single), SingleClass);
}

TEST_CASE("auroc equals the pair-counting oracle on 100 seeded instances") {
    Rng rng(20240811);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + rng.uniform_int(199);
        std::vector<double> scores;
        std::vector<int> labels;
        bool has0 = false, has1 = false;
        for (int i = 0; i < n; ++i) {
            // quantized scores force plenty of ties
            scores.push_back(rng.uniform_int(12) / 4.0);
            const int l = rng.uniform01() < 0.4 ? 1 : 0;
            labels.push_back(l);
            (l ? has1 : has0) = true;
        }
        if (!has0 || !has1) {
            labels[0] = has0 ? 1 : 0;
        }
        CHECK(auroc(scores, labels) == auroc_oracle(scores, labels));
    }
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
    Rng rng(9);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 64; ++i) {
        scores.push_back(rng.uniform(0, 4));
        labels.push_back(i % 3 == 0 ? 1 : 0);
    }
    std::vector<double> warped;
    for (const double s : scores) warped.push_back(std::exp(2.0 * s) - 3.0);
    CHECK(auroc(scores, labels) == auroc(warped, labels));
}

TEST_CASE("pixel_auroc: exact mask match, inversion, oracle, single-image reduction") {
    Image map(8, 8, 1, 0.0f);
    Image mask(8, 8, 1, 0.0f);
    for (int y = 2; y < 5; ++y)
        for (int x = 3; x < 7; ++x) {
            map.at(0, y, x) = 1.0f;
            mask.at(0, y, x) = 1.0f;
        }
    const std::vector<Image> maps = {map};
    const std::vector<Image> masks = {mask};
    CHECK(pixel_auroc(maps, masks) == 1.0);

    Image inverted(8, 8, 1, 1.0f);
    for (int y = 2; y < 5; ++y)
        for (int x = 3; x < 7; ++x) inverted.at(0, y, x) = 0.0f;
    const std::vector<Image> inv_maps = {inverted};
    CHECK(pixel_auroc(inv_maps, masks) == 0.0);

    Rng rng(5);
    Image rmap(8, 8, 1);
    Image rmask(8, 8, 1, 0.0f);
    std::vector<double> flat_scores;
    std::vector<int> flat_labels;
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            rmap.at(0, y, x) = static_cast<float>(rng.uniform_int(5)) / 4.0f;
            rmask.at(0, y, x) = rng.uniform01() < 0.3 ? 1.0f : 0.0f;
            flat_scores.push_back(rmap.at(0, y, x));
            flat_labels.push_back(rmask.at(0, y, x) > 0.5f ? 1 : 0);
        }
    rmask.at(0, 0, 0) = 1.0f;
    flat_labels[0] = 1;
    rmask.at(0, 7, 7) = 0.0f;
    flat_labels[63] = 0;
    const std::vector<Image> rmaps = {rmap};
    const std::vector<Image> rmasks = {rmask};
    CHECK(pixel_auroc(rmaps, rmasks) == auroc_oracle(flat_scores, flat_labels));
    CHECK(pixel_auroc(rmaps, rmasks) == auroc(flat_scores, flat_labels));
}

TEST_CASE("heatmap rendering: layout and golden bytes") {
    const int n = 32;
    Image img(n, n, 3);
    Image map(n, n, 1);
    Image mask(n, n, 1, 0.0f);
    Rng rng(13);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            img.at(0, y, x) = static_cast<float>(0.3 + 0.2 * std::sin(0.3 * x));
            img.at(1, y, x) = 0.4f;
            img.at(2, y, x) = static_cast<float>(0.5 + 0.2 * std::cos(0.2 * y));
            map.at(0, y, x) = static_cast<float>(std::exp(-0.02 * ((x - 20) * (x - 20) + (y - 9) * (y - 9))));
            if (std::hypot(x - 20, y - 9) < 4.0) mask.at(0, y, x) = 1.0f;
        }

    const fs::path dir = temp_dir("heatmap");
    render_heatmap(map, img, &mask, dir / "panel.png");
    const Image panel = load_png(dir / "panel.png");
    CHECK(panel.width == 3 * n + 8);
    CHECK(panel.height == n);

    // the overlay runs much hotter at the map peak than far away from it
    const auto redness = [&](int x, int y) {
        return panel.at(0, y, x + n + 4) - panel.at(2, y, x + n + 4);
    };
    CHECK(redness(20, 9) > redness(4, 28) + 0.4f);
    CHECK(redness(20, 9) > redness(28, 28) + 0.4f);

    // zero map renders the uniform low end of the colormap
    Image zero_map(n, n, 1, 0.0f);
    render_heatmap(zero_map, img, nullptr, dir / "zero.png");
    const Image zero_panel = load_png(dir / "zero.png");
    CHECK(zero_panel.width == 2 * n + 4);

    // frozen golden file guards the full rendering path
    const fs::path golden = fs::path(ANOMALIGN_TEST_DATA_DIR) / "golden_heatmap.png";
    if (fs::exists(golden)) {
        CHECK(sha256_file_hex(golden) == sha256_file_hex(dir / "panel.png"));
    } else {
        fs::create_directories(golden.parent_path());
        fs::copy_file(dir / "panel.png", golden);
        WARN_MESSAGE(true, "golden heatmap seeded on first run");
    }
}

TEST_CASE("experiment aggregates equal per-class means; zero deltas for equal conditions") {
    ExperimentResult result;
    result.study = "alignment";
    result.seeds = {1, 2};
    result.class_kinds = {{"a", "object"}, {"b", "texture"}};
    const auto add = [&](const std::string& cond, const std::string& cls, int seed, double img,
                         double pix) {
        StudyCell cell;
        cell.scorer = "padim";
        cell.condition = cond;
        cell.class_name = cls;
        cell.seed = seed;
        cell.image_auroc = img;
        cell.pixel_score = pix;
        result.cells.push_back(cell);
    };
    add("original", "a", 1, 0.90, 0.95);
    add("original", "a", 2, 0.92, 0.97);
    add("original", "b", 1, 0.70, 0.80);
    add("original", "b", 2, 0.74, 0.82);
    add("aligned", "a", 1, 0.90, 0.95);
    add("aligned", "a", 2, 0.92, 0.97);
    add("aligned", "b", 1, 0.70, 0.80);
    add("aligned", "b", 2, 0.74, 0.82);

    const Aggregate all = result.mean("padim", "original");
    const double class_a = (0.90 + 0.92) / 2.0;
    const double class_b = (0.70 + 0.74) / 2.0;
    CHECK(std::abs(all.image_auroc - (class_a + class_b) / 2.0) < 1e-12);
    REQUIRE(all.pixel_score.has_value());
    CHECK(std::abs(*all.pixel_score - ((0.95 + 0.97) / 2.0 + (0.80 + 0.82) / 2.0) / 2.0) < 1e-12);

    CHECK(result.mean("padim", "original", "object").image_auroc == doctest::Approx(class_a));
    CHECK(result.mean("padim", "original", "texture").image_auroc == doctest::Approx(class_b));

    // identical conditions produce zero deltas
    CHECK(condition_delta(result, "padim", "aligned", "original") == 0.0);
    CHECK(condition_delta(result, "padim", "aligned", "original", "object") == 0.0);

    // JSON round trip preserves cells and schema version
    const nlohmann::json j = experiment_to_json(result);
    CHECK(j["schema_version"] == 1);
    const ExperimentResult back = experiment_from_json(j);
    REQUIRE(back.cells.size() == result.cells.size());
    CHECK(back.cells[0].image_auroc == result.cells[0].image_auroc);
    CHECK(back.study == "alignment");

    const std::string md = experiment_to_markdown(result);
    CHECK(md.find("| padim |") != std::string::npos);
    CHECK(md.find("original") != std::string::npos);
}

TEST_CASE("hl study wiring on a tiny toy dataset") {
    ToySpec spec = default_toy_spec();
    spec.train_count = 6;
    spec.test_good_count = 3;
    spec.test_defect_count = 3;
    spec.classes = {{"widget", "object", 0.0, {"spot", "scratch"}},
                    {"weave", "texture", 0.0, {"spot"}}};
    const fs::path data_dir = temp_dir("hl_data");
    const DatasetManifest manifest = generate_toy_dataset(spec, data_dir, 71);

    HlStudyConfig cfg;
    cfg.scorers = {"padim", "mahad"};
    cfg.seeds = {1};
    cfg.shl.iterations = 20;
    cfg.shl.checkpoint_every = 10;
    cfg.shl.batch_size = 2;
    cfg.shl.lr = 1e-3;
    cfg.eval.input_size = 64;
    cfg.eval.padim.channels = 24;
    cfg.workers = 2;

    const fs::path work = temp_dir("hl_work");
    const ExperimentResult result = run_hl_study(manifest, cfg, work);

    // 2 scorers x 2 conditions x 2 classes x 1 seed
    CHECK(result.cells.size() == 8);
    for (const StudyCell& cell : result.cells) {
        INFO(cell.scorer, "/", cell.condition, "/", cell.class_name, ": ", cell.error);
        CHECK(!cell.failed);
        CHECK(cell.image_auroc >= 0.0);
        CHECK(cell.image_auroc <= 1.0);
        if (cell.scorer == "mahad") CHECK(!cell.pixel_score.has_value());
        if (cell.scorer == "padim") CHECK(cell.pixel_score.has_value());
    }
    CHECK(result.mean("padim", "pad", "object").cell_count == 1);
    CHECK(result.class_kinds.at("weave") == "texture");

    // rerunning reproduces the same numbers (determinism of the study path)
    const ExperimentResult again = run_hl_study(manifest, cfg, temp_dir("hl_work2"));
    REQUIRE(again.cells.size() == result.cells.size());
    for (std::size_t i = 0; i < result.cells.size(); ++i) {
        CHECK(again.cells[i].image_auroc == result.cells[i].image_auroc);
    }
}

TEST_CASE("alignment study wiring on a tiny toy dataset") {
    ToySpec spec = default_toy_spec();
    spec.train_count = 6;
    spec.test_good_count = 3;
    spec.test_defect_count = 3;
    const fs::path data_dir = temp_dir("align_data");
    const DatasetManifest manifest = generate_toy_dataset(spec, data_dir, 72);

    AlignmentStudyConfig cfg;
    cfg.scorers = {"padim"};
    cfg.seeds = {1};
    cfg.classes = {"rotor"};
    cfg.aligner.iterations = 30;
    cfg.aligner.batch_size = 2;
    cfg.eval.input_size = 64;
    cfg.eval.padim.channels = 24;
    cfg.workers = 2;

    const fs::path work = temp_dir("align_work");
    const ExperimentResult result = run_alignment_study(manifest, cfg, work);

    CHECK(result.cells.size() == 3); // padim x {original, misaligned, aligned}
    for (const StudyCell& cell : result.cells) {
        INFO(cell.condition, ": ", cell.error);
        CHECK(!cell.failed);
    }
    const auto conditions = result.conditions();
    CHECK(std::find(conditions.begin(), conditions.end(), "aligned") != conditions.end());
    // variant trees recorded transforms
    const DatasetManifest mis =
        load_manifest(work / "variants" / "seed1" / "rotor" / "misaligned");
    int with_transform = 0;
    for (const auto& rec : mis.classes[0].images) {
        if (rec.transform) ++with_transform;
    }
    CHECK(with_transform == static_cast<int>(mis.classes[0].images.size()));
}

TEST_CASE("backbone study marks unavailable backbones per cell") {
    ToySpec spec = default_toy_spec();
    spec.train_count = 4;
    spec.test_good_count = 2;
    spec.test_defect_count = 2;
    spec.classes = {{"widget", "object", 0.0, {"spot"}}, {"weave", "texture", 0.0, {"spot"}}};
    const fs::path data_dir = temp_dir("bb_data");
    const DatasetManifest manifest = generate_toy_dataset(spec, data_dir, 73);

    BackboneStudyConfig cfg;
    cfg.backbone_ids = {"compact_cnn", "efficientnet_b5"};
    cfg.base.scorers = {"mahad"};
    cfg.base.seeds = {1};
    cfg.base.classes = {"widget"};
    cfg.base.shl.iterations = 10;
    cfg.base.shl.checkpoint_every = 10;
    cfg.base.shl.batch_size = 2;
    cfg.base.eval.input_size = 64;

    const ExperimentResult result = run_backbone_study(manifest, cfg, temp_dir("bb_work"));
    int ok = 0, failed = 0;
    for (const StudyCell& cell : result.cells) {
        if (cell.failed) {
            ++failed;
            CHECK(cell.condition.find("efficientnet_b5") != std::string::npos);
            CHECK(cell.error.find("efficientnet_b5") != std::string::npos);
        } else {
            ++ok;
        }
    }
    CHECK(ok == 2);     // compact pad + pad_hl
    CHECK(failed == 2); // efficientnet pad + pad_hl
}
