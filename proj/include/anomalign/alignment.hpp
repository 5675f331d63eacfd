#pragma once

#include "anomalign/backbone.hpp"
#include "anomalign/shl.hpp"
#include "anomalign/synthesis.hpp"

#include <memory>
#include <utility>

namespace anomalign {

enum class AlignerMode { Template, PairwiseRotation };

std::string to_string(AlignerMode m);
AlignerMode aligner_mode_from_string(const std::string& s);

struct AlignerConfig {
    AlignerMode mode = AlignerMode::PairwiseRotation;
    int iterations = 2000;
    int batch_size = 8;
    double lr = 1e-4;
    double rho = 0.0;               // template mode; 0 -> 25% of input_size
    double max_rotation_deg = 60.0; // pairwise mode
    AugmentationPolicy augmentation;
    std::uint64_t seed = 0;
    int input_size = 128;
    int template_index = -1; // -1 -> drawn from the seed
    double snap_deg = 0.5;   // corrections below this act as identity
    int workers = 1;
    std::string backbone_id = "compact_cnn";

    double effective_rho() const { return rho > 0.0 ? rho : input_size * 0.25; }
    void validate() const;
};

/// Trained deep homography estimator. Template mode consumes a single image
/// and regresses its displacement relative to the training template;
/// pairwise mode consumes (reference, image) concatenated along channels and
/// regresses the rotation displacement between them.
struct AlignerModel {
    std::unique_ptr<TrainableBackbone> backbone;
    nn::Linear<float> head;
    AlignerMode mode = AlignerMode::PairwiseRotation;
    int input_size = 128;
    int template_index = -1;
    double snap_deg = 0.5;
    std::vector<double> loss_curve;
    nlohmann::json config_snapshot;
};

AlignerModel train_template_aligner(const std::vector<Image>& normals, const Image& template_img,
                                    const AlignerConfig& cfg, const TrainHooks& hooks = {});

AlignerModel train_pairwise_aligner(const std::vector<Image>& normals, const AlignerConfig& cfg,
                                    const TrainHooks& hooks = {});

/// Raw head output plus its homography (displacement_to_homography of the
/// prediction). Deterministic; reference is required exactly in pairwise
/// mode. Throws DegenerateCorrespondence when the predicted quad collapses.
std::pair<CornerDisplacement, HomographyMatrix> estimate_alignment(const AlignerModel& model,
                                                                   const Image& img,
                                                                   const Image* reference = nullptr);

/// The correction homography used to align `img`: pairwise mode projects the
/// prediction onto a pure rotation and inverts it (identity below snap_deg);
/// template mode inverts the full predicted homography. Failures surface as
/// AlignmentFailure.
HomographyMatrix alignment_correction(const AlignerModel& model, const Image& img,
                                      const Image* reference);

/// Seed-determined template choice among the train-good images of a class.
int pick_template_index(std::uint64_t seed, int n_train);

/// Warps every image of the manifest by its predicted correction (pairwise
/// aligners rotate toward template_img's pose). Masks follow nearest-neighbor.
BuildResult build_aligned_dataset(const DatasetManifest& src, const AlignerModel& model,
                                  const Image& template_img, const std::filesystem::path& out_dir);

void save_aligner(const AlignerModel& model, const std::filesystem::path& base);
AlignerModel load_aligner(const std::filesystem::path& base);

} // namespace anomalign
