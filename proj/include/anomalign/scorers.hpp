#pragma once

#include "anomalign/backbone.hpp"
#include "anomalign/checkpoint.hpp"
#include "anomalign/image.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <vector>

namespace anomalign {

// The four distance-from-normal scoring methods over backbone features:
// per-position Gaussians (padim), coreset memory bank (patchcore), two-stage
// kNN (spade) and a global Mahalanobis (mahad).

/// Provenance recorded with every fitted model; scoring against an extractor
/// with a different config hash is refused at load.
struct ModelMeta {
    std::string scorer_id;
    std::string backbone_id;
    std::string checkpoint_id; // e.g. "baseline" or "shl_iter_1200"
    std::string config_hash;   // hash of the extractor configuration
    int input_width = 0;
    int input_height = 0;
};

void require_compatible(const ModelMeta& model, const ModelMeta& extractor);

struct ScoreResult {
    double image_score = 0.0;
    Image score_map; // empty for image-level-only scorers
    std::string scorer_id;
    std::string backbone_id;
    std::string checkpoint_id;
};

// ---------------------------------------------------------------------------
// Feature assembly
// ---------------------------------------------------------------------------

/// Extraction wrapper; validates tap names and grid/stride consistency.
std::vector<FeatureMap> extract_features(const Backbone& backbone, const Image& img,
                                         std::span<const std::string> taps);

/// Bilinear-resizes every map to (grid_h, grid_w) and concatenates channels.
FeatureMap embed_grid(std::span<const FeatureMap> maps, int grid_h, int grid_w);

/// Concatenated per-channel spatial means over all maps (the image's global
/// descriptor).
Eigen::VectorXd global_descriptor(std::span<const FeatureMap> maps);

/// Same-size box average over a p x p neighborhood (in-bounds samples only).
FeatureMap neighborhood_average(const FeatureMap& map, int p);

// ---------------------------------------------------------------------------
// Mahalanobis
// ---------------------------------------------------------------------------

/// sqrt((x-mean)' Sigma^-1 (x-mean)) given the lower Cholesky factor of
/// Sigma. Dimensions must agree.
double mahalanobis(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                   const Eigen::MatrixXd& chol_lower);

// ---------------------------------------------------------------------------
// PaDiM
// ---------------------------------------------------------------------------

struct PadimConfig {
    int channels = 100; // random channel subset size (all if fewer available)
    double eps = 0.01;  // covariance regularizer
    double smooth_sigma = 4.0;
    std::uint64_t seed = 0;
};

struct GaussianStats {
    int grid_h = 0, grid_w = 0, dim = 0;
    double eps = 0.0;
    std::vector<int> channel_indices;
    std::vector<Eigen::VectorXd> mean;       // per grid position
    std::vector<Eigen::MatrixXd> covariance; // regularized (+eps I)
    std::vector<Eigen::MatrixXd> chol;       // lower factors, built at fit/load
};

struct PadimModel {
    GaussianStats stats;
    double smooth_sigma = 4.0;
    ModelMeta meta;
};

/// Per-position mean/covariance over the normal images on the first tap's
/// grid. Hard floor of 2 normals; below dim+1 a warning is emitted.
PadimModel padim_fit(const std::vector<std::vector<FeatureMap>>& normal_features,
                     const PadimConfig& cfg, const ModelMeta& meta);

/// Mahalanobis map upsampled to the fit resolution and smoothed; the image
/// score is the max over unsmoothed position distances.
ScoreResult padim_score(const PadimModel& model, std::span<const FeatureMap> features);

// ---------------------------------------------------------------------------
// PatchCore
// ---------------------------------------------------------------------------

struct PatchcoreConfig {
    int neighborhood = 3;
    double coreset_ratio = 0.1;
    double smooth_sigma = 4.0;
    std::uint64_t seed = 0;
};

struct MemoryBank {
    Eigen::MatrixXf vectors; // bank_size x dim
    std::vector<int> coreset_indices;
    int neighborhood = 3;
    int grid_h = 0, grid_w = 0, dim = 0;
    double smooth_sigma = 4.0;
    ModelMeta meta;
};

/// Greedy max-min selection: start from a seeded index, repeatedly add the
/// point farthest from the selected set. Ties take the lowest index.
std::vector<int> kcenter_greedy(const Eigen::MatrixXf& points, int count, std::uint64_t seed);

/// Count form of the ratio: max(1, round(ratio * n)).
int coreset_count(double ratio, int n);

MemoryBank patchcore_fit(const std::vector<std::vector<FeatureMap>>& normal_features,
                         const PatchcoreConfig& cfg, const ModelMeta& meta);

ScoreResult patchcore_score(const MemoryBank& bank, std::span<const FeatureMap> features);

// ---------------------------------------------------------------------------
// SPADE
// ---------------------------------------------------------------------------

struct SpadeConfig {
    int k_neighbors = 50; // clamped to the number of normals
    int kappa = 1;        // per-position nearest features averaged
    double smooth_sigma = 4.0;
};

struct SpadeModel {
    Eigen::MatrixXd globals;          // n x descriptor_dim
    std::vector<Eigen::MatrixXf> grids; // per image: positions x dim
    int grid_h = 0, grid_w = 0, dim = 0;
    int k_neighbors = 50, kappa = 1;
    double smooth_sigma = 4.0;
    ModelMeta meta;
};

SpadeModel spade_fit(const std::vector<std::vector<FeatureMap>>& normal_features,
                     const SpadeConfig& cfg, const ModelMeta& meta);

/// Image score: mean distance to the K nearest global descriptors. Map: per
/// position, mean of the kappa nearest same-or-adjacent-position features
/// among the K retrieved neighbors.
ScoreResult spade_score(const SpadeModel& model, std::span<const FeatureMap> features);

// ---------------------------------------------------------------------------
// Mah.AD (image level only)
// ---------------------------------------------------------------------------

struct MahadConfig {
    double eps = 0.01;
};

struct MahadModel {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
    Eigen::MatrixXd chol;
    double eps = 0.01;
    ModelMeta meta;
};

MahadModel mahad_fit(const std::vector<std::vector<FeatureMap>>& normal_features,
                     const MahadConfig& cfg, const ModelMeta& meta);

/// score_map stays empty: this method has no pixel-level output.
ScoreResult mahad_score(const MahadModel& model, std::span<const FeatureMap> features);

// ---------------------------------------------------------------------------
// Persistence (container + meta; loading verifies the extractor hash)
// ---------------------------------------------------------------------------

void save_padim_model(const PadimModel& model, const std::filesystem::path& base);
PadimModel load_padim_model(const std::filesystem::path& base, const ModelMeta& extractor);

void save_memory_bank(const MemoryBank& bank, const std::filesystem::path& base);
MemoryBank load_memory_bank(const std::filesystem::path& base, const ModelMeta& extractor);

void save_mahad_model(const MahadModel& model, const std::filesystem::path& base);
MahadModel load_mahad_model(const std::filesystem::path& base, const ModelMeta& extractor);

} // namespace anomalign
