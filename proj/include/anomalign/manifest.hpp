#pragma once

#include "anomalign/geometry.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace anomalign {

/// Record of the 2D transform a dataset builder applied to an image.
struct TransformRecord {
    HomographyMatrix h;
    std::string fill = "reflection"; // "reflection" | "constant"
};

struct ImageRecord {
    std::string path;                 // relative to the manifest directory
    std::string split;                // "train" | "test"
    std::string label;                // "good" or a defect name
    std::string mask_path;            // empty when absent
    std::string alignment = "original"; // "original" | "misaligned" | "aligned"
    std::optional<TransformRecord> transform;
    nlohmann::json meta;              // generator extras, free-form

    bool is_good() const { return label == "good"; }
};

struct ClassRecord {
    std::string name;
    std::string kind; // "object" | "texture"
    std::vector<ImageRecord> images;
};

struct DatasetManifest {
    int schema_version = 1;
    std::filesystem::path root; // directory holding manifest.json
    std::vector<ClassRecord> classes;

    const ClassRecord& find_class(const std::string& name) const;
    std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
};

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& root);

/// Writes <dir>/manifest.json.
void save_manifest(const DatasetManifest& m, const std::filesystem::path& dir);
DatasetManifest load_manifest(const std::filesystem::path& dir);

/// Structural validation: train split holds only "good" labels, referenced
/// files exist; with `deep`, also checks that every mask matches its image's
/// dimensions.
void validate_manifest(const DatasetManifest& m, bool deep = false);

/// Builds a manifest from an MVTec-style tree
/// (class/train/good, class/test/<label>, class/ground_truth/<label>).
/// Class kinds follow the published MVTec texture/object split.
DatasetManifest scan_mvtec_layout(const std::filesystem::path& dir,
                                  const std::vector<std::string>& classes = {});

// JSON helpers shared by manifests, checkpoints and results.
nlohmann::json homography_to_json(const HomographyMatrix& h);
HomographyMatrix homography_from_json(const nlohmann::json& j);
nlohmann::json displacement_to_json(const CornerDisplacement& d);
CornerDisplacement displacement_from_json(const nlohmann::json& j);

} // namespace anomalign
