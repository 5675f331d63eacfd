#pragma once

#include "anomalign/alignment.hpp"
#include "anomalign/eval.hpp"
#include "anomalign/shl.hpp"
#include "anomalign/synthesis.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace anomalign {

/// One run configuration document drives every command. Loading validates
/// against a strict schema (unknown keys are rejected with their path) and
/// materializes all defaults, so the emitted snapshot reproduces the run.
struct RunConfig {
    int schema_version = 1;
    std::uint64_t seed = 0;
    std::string profile = "serial"; // "serial" | "parallel"
    std::string output_dir = "out";
    std::string asset_dir;

    struct Dataset {
        std::string root;
        std::vector<std::string> classes; // empty -> all
        int input_size = 128;
    } dataset;

    std::string backbone_id = "compact_cnn";
    std::vector<std::string> scorers = {"padim"};

    PadimConfig padim;
    PatchcoreConfig patchcore;
    SpadeConfig spade;
    MahadConfig mahad;
    AugmentationPolicy augmentation;

    struct Shl {
        double rho = 0.0;
        int iterations = 3000;
        int checkpoint_every = 100;
        int batch_size = 8;
        double lr = 1e-4;
        bool paper_protocol = false;
        int val_holdout = 0;
    } shl;

    struct Aligner {
        std::string mode = "pairwise_rotation";
        int iterations = 2000;
        int batch_size = 8;
        double lr = 1e-4;
        double rho = 0.0;
        double max_rotation_deg = 60.0;
        int template_index = -1;
        double snap_deg = 0.5;
        int input_size = 0; // 0 -> dataset.input_size
    } aligner;

    MisalignmentParams misalignment;
    ToySpec toy;

    struct Study {
        std::string name = "score"; // score | alignment | hl | augmentation | backbone
        std::vector<int> seeds = {1, 2, 3};
        std::vector<std::string> categories = {"shape_color", "shape", "color"};
        std::vector<std::string> backbone_ids = {"compact_cnn"};
    } study;

    bool heatmaps = false;
    int heatmap_limit = 4;

    // ---- derived views ----
    int workers() const;
    ShlConfig shl_config() const;
    AlignerConfig aligner_config() const;
    EvalConfig eval_config() const;
    HlStudyConfig hl_study_config() const;
    AlignmentStudyConfig alignment_study_config() const;
};

/// Strict validation; throws ValidationError naming the offending path.
void validate_config_json(const nlohmann::json& j);

RunConfig parse_run_config(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& cfg);

RunConfig load_run_config(const std::filesystem::path& path);

/// Hash of the effective (defaults-materialized) configuration.
std::string config_hash(const RunConfig& cfg);

/// Writes <output_dir>/config_snapshot.json.
void write_config_snapshot(const RunConfig& cfg, const std::filesystem::path& output_dir);

} // namespace anomalign
