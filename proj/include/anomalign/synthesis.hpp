#pragma once

#include "anomalign/geometry.hpp"
#include "anomalign/image.hpp"
#include "anomalign/manifest.hpp"
#include "anomalign/rng.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace anomalign {

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

enum class AugmentCategory { None, Color, Shape, ShapeColor };

std::string to_string(AugmentCategory c);
AugmentCategory augment_category_from_string(const std::string& s);

/// Training-time photometric/shape augmentation. Hue and brightness are the
/// color group; pepper and salt are the shape group. The category decides
/// which groups are active.
struct AugmentationPolicy {
    double hue_shift = 0.1;    // max fraction of the hue circle
    double brightness = 0.2;   // max multiplicative delta
    double pepper_rate = 0.02; // fraction of pixels forced to min
    double salt_rate = 0.02;   // fraction of pixels forced to max
    AugmentCategory category = AugmentCategory::ShapeColor;

    void validate() const;
    bool color_active() const {
        return category == AugmentCategory::Color || category == AugmentCategory::ShapeColor;
    }
    bool shape_active() const {
        return category == AugmentCategory::Shape || category == AugmentCategory::ShapeColor;
    }
};

/// Rotation / translation / isotropic-scale misalignment ranges. Sampled
/// transforms must keep the central foreground box inside the frame.
struct MisalignmentParams {
    double max_rotation_deg = 30.0;
    double max_translation = 0.1;  // fraction of the respective side
    double max_scale_delta = 0.1;  // scale in [1-d, 1+d]
    double foreground_margin = 0.2;

    void validate() const;
};

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// Uniform inward corner perturbation: each corner moves into the frame by
/// up to rho pixels per axis, so the perturbed quad never leaves the image.
/// Resamples on the measure-zero degenerate quad.
CornerDisplacement sample_inward_perturbation(Rng& rng, double rho, const ImageFrame& frame);

/// translation ∘ rotation-about-center ∘ isotropic-scale with uniform
/// components, rejected until the foreground box maps inside the frame.
/// Throws InfeasibleParams after 1000 consecutive rejections.
HomographyMatrix sample_misalignment(Rng& rng, const MisalignmentParams& params, const ImageFrame& frame);

/// Applies the policy: hue rotation, brightness scaling (clamped), then
/// exact-count pepper and salt (sampled without replacement).
Image augment(const Image& img, const AugmentationPolicy& policy, Rng& rng);

// ---------------------------------------------------------------------------
// Dataset builders
// ---------------------------------------------------------------------------

struct BuildFailure {
    std::string path;
    std::string error;
};

struct BuildResult {
    DatasetManifest manifest;
    std::vector<BuildFailure> failures;
};

/// Warps every image (train and test) by an independently sampled
/// misalignment with reflection fill; masks are warped with the same
/// homography using nearest-neighbor sampling. Per-file I/O errors are
/// collected, not fatal.
BuildResult build_misaligned_dataset(const DatasetManifest& src, const MisalignmentParams& params,
                                     std::uint64_t seed, const std::filesystem::path& out_dir);

/// Alignment callback: returns the correction homography for an image, or
/// throws AlignmentFailure. Used to keep this module free of model types;
/// the alignment module provides the typed wrapper.
using AlignFn = std::function<HomographyMatrix(const Image&)>;

/// Warps every image by its predicted correction with reflection fill; masks
/// identically (nearest-neighbor). On AlignmentFailure the image is copied
/// unmodified and flagged in its meta record.
BuildResult build_aligned_dataset_with(const DatasetManifest& src, const AlignFn& align,
                                       const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Procedural toy dataset
// ---------------------------------------------------------------------------

struct ToyClassSpec {
    std::string name;
    std::string kind;                  // "object" | "texture"
    double pose_jitter_deg = 0.0;      // uniform ± rotation baked into rendering
    std::vector<std::string> defects;  // subset of {"spot", "scratch", "structural"}
    double defect_strength = 1.0;      // per-class multiplier on the global dial
};

struct ToySpec {
    int image_size = 128;
    int train_count = 40;
    int test_good_count = 20;
    int test_defect_count = 20;
    double defect_strength = 1.0; // global contrast dial for injected defects
    std::vector<ToyClassSpec> classes;

    void validate() const;
};

/// widget: canonically posed object; rotor: object with ±30° pose jitter;
/// weave: tileable texture.
ToySpec default_toy_spec();

/// Renders the dataset in MVTec-style layout under out_dir and returns the
/// manifest (also written to out_dir/manifest.json). Fully seeded.
DatasetManifest generate_toy_dataset(const ToySpec& spec, const std::filesystem::path& out_dir,
                                     std::uint64_t seed);

struct DefectResult {
    Image image;
    Image mask; // single channel {0,1}
};

/// Standalone injectors ("spot", "scratch") usable on any image, e.g. for
/// building synthetic validation anomalies. Placement is center-biased.
DefectResult inject_defect(const Image& img, const std::string& kind, Rng& rng,
                           double strength = 1.0);

} // namespace anomalign
