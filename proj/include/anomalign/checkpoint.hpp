#pragma once

#include <json.hpp>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace anomalign {

/// On-disk weights container: a binary blob of named float32 tensors plus a
/// JSON sidecar carrying ids and hashes. A checkpoint at <base> consists of
/// <base>.weights and <base>.json; the sidecar stores the content hash of
/// the blob so mismatches are detected at load.
struct CheckpointData {
    std::vector<std::pair<std::string, std::vector<float>>> tensors;
    std::vector<std::pair<std::string, std::vector<double>>> tensors64;
    nlohmann::json sidecar;

    const std::vector<float>& tensor(const std::string& name) const;
    const std::vector<double>& tensor64(const std::string& name) const;
    bool has_tensor(const std::string& name) const;
    bool has_tensor64(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& base, const CheckpointData& data);

/// Verifies the sidecar content hash against the blob.
CheckpointData load_checkpoint(const std::filesystem::path& base);

} // namespace anomalign
