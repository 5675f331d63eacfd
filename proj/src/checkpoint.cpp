#include "anomalign/checkpoint.hpp"

#include "anomalign/common.hpp"
#include "anomalign/hash.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace anomalign {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'A', 'N', 'L', 'W', 'G', 'T', '0', '1'};

template <typename T>
void write_pod(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T read_pod(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw IoError("weights blob truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

} // namespace

const std::vector<float>& CheckpointData::tensor(const std::string& name) const {
    const auto it = std::find_if(tensors.begin(), tensors.end(),
                                 [&](const auto& kv) { return kv.first == name; });
    if (it == tensors.end()) throw IoError("checkpoint tensor missing: " + name);
    return it->second;
}

const std::vector<double>& CheckpointData::tensor64(const std::string& name) const {
    const auto it = std::find_if(tensors64.begin(), tensors64.end(),
                                 [&](const auto& kv) { return kv.first == name; });
    if (it == tensors64.end()) throw IoError("checkpoint f64 tensor missing: " + name);
    return it->second;
}

bool CheckpointData::has_tensor(const std::string& name) const {
    return std::any_of(tensors.begin(), tensors.end(),
                       [&](const auto& kv) { return kv.first == name; });
}

bool CheckpointData::has_tensor64(const std::string& name) const {
    return std::any_of(tensors64.begin(), tensors64.end(),
                       [&](const auto& kv) { return kv.first == name; });
}

void save_checkpoint(const fs::path& base, const CheckpointData& data) {
    if (base.has_parent_path()) fs::create_directories(base.parent_path());

    std::string blob;
    blob.append(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(blob,
                             static_cast<std::uint32_t>(data.tensors.size() + data.tensors64.size()));
    const auto append_tensor = [&blob](const std::string& name, const auto& values,
                                       std::uint8_t dtype) {
        write_pod<std::uint32_t>(blob, static_cast<std::uint32_t>(name.size()));
        blob.append(name);
        write_pod<std::uint8_t>(blob, dtype);
        write_pod<std::uint64_t>(blob, static_cast<std::uint64_t>(values.size()));
        using Elem = typename std::decay_t<decltype(values)>::value_type;
        const std::size_t off = blob.size();
        blob.resize(off + values.size() * sizeof(Elem));
        std::memcpy(blob.data() + off, values.data(), values.size() * sizeof(Elem));
    };
    for (const auto& [name, values] : data.tensors) append_tensor(name, values, 0);
    for (const auto& [name, values] : data.tensors64) append_tensor(name, values, 1);

    const fs::path weights_path = base.string() + ".weights";
    {
        std::ofstream out(weights_path, std::ios::binary);
        if (!out) throw IoError("cannot write " + weights_path.string());
        out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }

    nlohmann::json sidecar = data.sidecar;
    sidecar["format_version"] = 1;
    sidecar["content_hash"] = sha256_hex(blob);
    std::ofstream out(base.string() + ".json");
    if (!out) throw IoError("cannot write checkpoint sidecar for " + base.string());
    out << sidecar.dump(2) << "\n";
}

CheckpointData load_checkpoint(const fs::path& base) {
    const fs::path weights_path = base.string() + ".weights";
    std::ifstream in(weights_path, std::ios::binary);
    if (!in) throw IoError("cannot open " + weights_path.string());
    const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    CheckpointData data;
    {
        std::ifstream sidecar_in(base.string() + ".json");
        if (!sidecar_in) throw IoError("missing checkpoint sidecar for " + base.string());
        sidecar_in >> data.sidecar;
    }
    if (data.sidecar.contains("content_hash") &&
        data.sidecar["content_hash"].get<std::string>() != sha256_hex(blob)) {
        throw ConfigHashMismatch("checkpoint blob does not match its sidecar hash: " + base.string());
    }

    std::size_t pos = 0;
    if (blob.size() < sizeof(kMagic) || std::memcmp(blob.data(), kMagic, sizeof(kMagic)) != 0) {
        throw IoError("bad weights magic in " + weights_path.string());
    }
    pos += sizeof(kMagic);
    const std::uint32_t count = read_pod<std::uint32_t>(blob, pos);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_pod<std::uint32_t>(blob, pos);
        if (pos + name_len > blob.size()) throw IoError("weights blob truncated");
        std::string name(blob.data() + pos, name_len);
        pos += name_len;
        const std::uint8_t dtype = read_pod<std::uint8_t>(blob, pos);
        const std::uint64_t n = read_pod<std::uint64_t>(blob, pos);
        const std::size_t elem = dtype == 0 ? sizeof(float) : sizeof(double);
        if (dtype > 1) throw IoError("unknown tensor dtype in " + weights_path.string());
        if (pos + n * elem > blob.size()) throw IoError("weights blob truncated");
        if (dtype == 0) {
            std::vector<float> values(n);
            std::memcpy(values.data(), blob.data() + pos, n * elem);
            data.tensors.emplace_back(std::move(name), std::move(values));
        } else {
            std::vector<double> values(n);
            std::memcpy(values.data(), blob.data() + pos, n * elem);
            data.tensors64.emplace_back(std::move(name), std::move(values));
        }
        pos += n * elem;
    }
    return data;
}

} // namespace anomalign
