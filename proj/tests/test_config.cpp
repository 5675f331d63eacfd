#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "anomalign/common.hpp"
#include "anomalign/config.hpp"

using namespace anomalign;
using nlohmann::json;

TEST_CASE("defaults materialize and round-trip") {
    const RunConfig cfg = parse_run_config(json::object());
    CHECK(cfg.seed == 0);
    CHECK(cfg.profile == "serial");
    CHECK(cfg.backbone_id == "compact_cnn");
    CHECK(cfg.shl.iterations == 3000);
    CHECK(cfg.shl.checkpoint_every == 100);
    CHECK(cfg.aligner.iterations == 2000);
    CHECK(cfg.padim.channels == 100);
    CHECK(cfg.padim.eps == 0.01);
    CHECK(cfg.toy.classes.size() == 3);
    CHECK(cfg.workers() == 1);

    const json effective = run_config_to_json(cfg);
    const RunConfig again = parse_run_config(effective);
    CHECK(run_config_to_json(again) == effective);
    CHECK(config_hash(cfg) == config_hash(again));
}

TEST_CASE("unknown keys are rejected with their path") {
    json doc;
    doc["seler"] = "typo";
    CHECK_THROWS_WITH_AS(parse_run_config(doc), "config: unknown key seler", ValidationError);

    json nested;
    nested["shl"]["iterattions"] = 5;
    CHECK_THROWS_WITH_AS(parse_run_config(nested), "config: unknown key shl.iterattions",
                         ValidationError);

    json bad_type;
    bad_type["seed"] = "seven";
    CHECK_THROWS_AS(parse_run_config(bad_type), ValidationError);

    json bad_scorer;
    bad_scorer["scorers"] = {"padim", "resnet"};
    CHECK_THROWS_AS(parse_run_config(bad_scorer), ValidationError);

    json bad_study;
    bad_study["study"]["name"] = "mystery";
    CHECK_THROWS_AS(parse_run_config(bad_study), ValidationError);

    json bad_profile;
    bad_profile["profile"] = "gpu";
    CHECK_THROWS_AS(parse_run_config(bad_profile), ValidationError);
}

TEST_CASE("values flow into derived configs") {
    json doc;
    doc["seed"] = 41;
    doc["profile"] = "parallel";
    doc["dataset"]["input_size"] = 96;
    doc["shl"]["iterations"] = 600;
    doc["shl"]["checkpoint_every"] = 200;
    doc["augmentation"]["category"] = "shape";
    doc["aligner"]["max_rotation_deg"] = 45.0;
    doc["study"]["seeds"] = {4, 5};
    const RunConfig cfg = parse_run_config(doc);

    CHECK(cfg.workers() >= 1);
    const ShlConfig shl = cfg.shl_config();
    CHECK(shl.iterations == 600);
    CHECK(shl.checkpoint_every == 200);
    CHECK(shl.input_size == 96);
    CHECK(shl.seed == 41);
    CHECK(shl.augmentation.category == AugmentCategory::Shape);

    const AlignerConfig aligner = cfg.aligner_config();
    CHECK(aligner.max_rotation_deg == 45.0);
    CHECK(aligner.input_size == 96);

    const HlStudyConfig hl = cfg.hl_study_config();
    CHECK(hl.seeds == std::vector<int>{4, 5});
    CHECK(hl.eval.input_size == 96);

    const AlignmentStudyConfig align = cfg.alignment_study_config();
    CHECK(align.aligner.max_rotation_deg == 45.0);
}

TEST_CASE("config hash tracks content") {
    json a, b;
    a["seed"] = 1;
    b["seed"] = 2;
    CHECK(config_hash(parse_run_config(a)) != config_hash(parse_run_config(b)));
    CHECK(config_hash(parse_run_config(a)) == config_hash(parse_run_config(a)));
}

TEST_CASE("snapshot file reproduces the config") {
    const auto dir = std::filesystem::temp_directory_path() / "anomalign_tests" / "config_snap";
    std::filesystem::remove_all(dir);
    json doc;
    doc["seed"] = 9;
    doc["scorers"] = {"padim", "mahad"};
    const RunConfig cfg = parse_run_config(doc);
    write_config_snapshot(cfg, dir);
    const RunConfig loaded = load_run_config(dir / "config_snapshot.json");
    CHECK(config_hash(loaded) == config_hash(cfg));
    CHECK(loaded.scorers == cfg.scorers);
}

TEST_CASE("invalid nested values are rejected by the module validators") {
    json doc;
    doc["augmentation"]["pepper_rate"] = 0.5; // above the 0.2 ceiling
    CHECK_THROWS_AS(parse_run_config(doc), ValidationError);

    json mis;
    mis["misalignment"]["foreground_margin"] = 0.7;
    CHECK_THROWS_AS(parse_run_config(mis), ValidationError);

    json toy;
    toy["toy"]["classes"] = json::array({json{{"name", "x"}, {"kind", "object"},
                                              {"defects", json::array({"bogus"})}}});
    CHECK_THROWS_AS(parse_run_config(toy), InvalidSpec);
}
