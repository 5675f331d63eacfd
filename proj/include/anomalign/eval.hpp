#pragma once

#include "anomalign/alignment.hpp"
#include "anomalign/backbone.hpp"
#include "anomalign/manifest.hpp"
#include "anomalign/scorers.hpp"
#include "anomalign/shl.hpp"
#include "anomalign/synthesis.hpp"

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace anomalign {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Rank-statistic AUROC (Mann-Whitney); ties contribute 1/2. Labels are
/// 0/1; both classes must be present or SingleClass is thrown.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// AUROC over the flattened pixels of all (map, mask) pairs. Masks binarize
/// at 0.5; shapes must match pairwise.
double pixel_auroc(std::span<const Image> maps, std::span<const Image> masks);

/// Side-by-side panel (input | overlay | mask when provided) with a per-image
/// min-max normalized color map at alpha 0.5.
void render_heatmap(const Image& score_map, const Image& img, const Image* mask,
                    const std::filesystem::path& out_path);

// ---------------------------------------------------------------------------
// Evaluation cells
// ---------------------------------------------------------------------------

/// Scorer stack configuration shared by the studies and the CLI.
struct EvalConfig {
    std::vector<std::string> scorers = {"padim"};
    int input_size = 128;
    std::vector<std::string> taps; // empty -> the backbone's default taps
    PadimConfig padim;
    PatchcoreConfig patchcore;
    SpadeConfig spade;
    MahadConfig mahad;
    bool heatmaps = false;
    int heatmap_limit = 4;
};

struct CellResult {
    double image_auroc = 0.0;
    std::optional<double> pixel_score; // absent for image-level-only scorers
};

/// Fits `scorer` on the class's train-good images and scores its test split.
/// Optionally renders heatmap panels under heatmap_dir.
CellResult evaluate_class(const Backbone& backbone, const std::string& checkpoint_id,
                          const DatasetManifest& manifest, const std::string& class_name,
                          const std::string& scorer, const EvalConfig& cfg,
                          const std::filesystem::path& heatmap_dir = {});

// ---------------------------------------------------------------------------
// Experiment results
// ---------------------------------------------------------------------------

struct StudyCell {
    std::string scorer;
    std::string condition;
    std::string class_name;
    int seed = 0;
    double image_auroc = 0.0;
    std::optional<double> pixel_score;
    bool failed = false;
    std::string error;
};

struct Aggregate {
    double image_auroc = 0.0;
    std::optional<double> pixel_score;
    int cell_count = 0;
};

struct ExperimentResult {
    std::string study;
    std::vector<int> seeds;
    std::vector<StudyCell> cells;
    std::map<std::string, std::string> class_kinds; // class -> object|texture
    nlohmann::json config_snapshot;
    double wall_clock_s = 0.0; // reported separately, never in results.json

    /// Mean over seeds and the matching classes ("" kind = all classes).
    Aggregate mean(const std::string& scorer, const std::string& condition,
                   const std::string& kind = "") const;
    std::vector<std::string> class_names() const;
    std::vector<std::string> conditions() const;
};

/// Mean image-AUROC difference between two conditions (e.g. aligned vs
/// original), over the classes matching `kind`.
double condition_delta(const ExperimentResult& result, const std::string& scorer,
                       const std::string& condition, const std::string& reference,
                       const std::string& kind = "");

/// Deterministic results document (schema_version 1; excludes wall clock).
nlohmann::json experiment_to_json(const ExperimentResult& result);
ExperimentResult experiment_from_json(const nlohmann::json& j);

/// Human-readable tables in the shape of the study.
std::string experiment_to_markdown(const ExperimentResult& result);

// ---------------------------------------------------------------------------
// Studies
// ---------------------------------------------------------------------------

struct AlignmentStudyConfig {
    std::vector<std::string> scorers = {"padim"};
    std::vector<int> seeds = {1, 2, 3};
    std::vector<std::string> classes; // empty -> all classes in the manifest
    MisalignmentParams misalignment;
    AlignerConfig aligner; // pairwise rotation
    EvalConfig eval;
    std::string backbone_id = "compact_cnn";
    std::string asset_dir;
    int workers = 1;
};

/// Per scorer x {misaligned, original, aligned}: fit on train-good, score
/// the test split; deltas reported against the original condition.
ExperimentResult run_alignment_study(const DatasetManifest& source,
                                     const AlignmentStudyConfig& cfg,
                                     const std::filesystem::path& work_dir);

struct HlStudyConfig {
    std::vector<std::string> scorers = {"padim"};
    std::vector<int> seeds = {1, 2, 3};
    std::vector<std::string> classes;
    ShlConfig shl;
    bool paper_protocol = false; // checkpoint selection on the test split
    int val_holdout = 0;         // 0 -> max(2, 20% of train)
    EvalConfig eval;
    std::string backbone_id = "compact_cnn";
    std::string asset_dir;
    int workers = 1;
};

/// Baseline backbone vs the selected fine-tuned checkpoint, with
/// object/texture/total splits taken from the manifest kinds.
ExperimentResult run_hl_study(const DatasetManifest& manifest, const HlStudyConfig& cfg,
                              const std::filesystem::path& work_dir);

struct AugmentationStudyConfig {
    HlStudyConfig base;
    std::vector<AugmentCategory> categories = {AugmentCategory::ShapeColor, AugmentCategory::Shape,
                                               AugmentCategory::Color};
};

ExperimentResult run_augmentation_study(const DatasetManifest& manifest,
                                        const AugmentationStudyConfig& cfg,
                                        const std::filesystem::path& work_dir);

struct BackboneStudyConfig {
    HlStudyConfig base;
    std::vector<std::string> backbone_ids = {"compact_cnn"};
};

ExperimentResult run_backbone_study(const DatasetManifest& manifest,
                                    const BackboneStudyConfig& cfg,
                                    const std::filesystem::path& work_dir);

/// Default checkpoint-selection evaluator: PaDiM image AUROC on a held-out
/// slice of the normals plus synthetic spot/scratch anomalies injected onto
/// them. The paper-protocol variant fits on all normals and averages image
/// (and pixel, when available) AUROC on the real test split.
std::function<double(const Checkpoint&)> make_checkpoint_evaluator(
    const TrainableBackbone& prototype, const std::vector<Image>& train_images,
    const std::vector<Image>& test_images, const std::vector<int>& test_labels,
    const std::vector<Image>& test_masks, const EvalConfig& eval_cfg, bool paper_protocol,
    int val_holdout, std::uint64_t seed);

} // namespace anomalign
