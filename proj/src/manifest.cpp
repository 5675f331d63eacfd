#include "anomalign/manifest.hpp"

#include "anomalign/common.hpp"
#include "anomalign/image.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace anomalign {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// The published texture classes; everything else in the layout is an object
// class. Used only when scanning a bare directory tree.
const std::set<std::string> kTextureClasses = {"carpet", "leather", "tile", "wood", "weave"};

} // namespace

const ClassRecord& DatasetManifest::find_class(const std::string& name) const {
    const auto it = std::find_if(classes.begin(), classes.end(),
                                 [&](const ClassRecord& c) { return c.name == name; });
    if (it == classes.end()) throw ValidationError("unknown class in manifest: " + name);
    return *it;
}

json homography_to_json(const HomographyMatrix& h) {
    json arr = json::array();
    for (const double v : h.raw()) arr.push_back(v);
    return arr;
}

HomographyMatrix homography_from_json(const json& j) {
    if (!j.is_array() || j.size() != 9) throw ValidationError("homography must be 9 numbers");
    std::array<double, 9> v;
    for (std::size_t i = 0; i < 9; ++i) v[i] = j[i].get<double>();
    return HomographyMatrix::from_raw(v);
}

json displacement_to_json(const CornerDisplacement& d) {
    json arr = json::array();
    for (const double v : d.flat()) arr.push_back(v);
    return arr;
}

CornerDisplacement displacement_from_json(const json& j) {
    if (!j.is_array() || j.size() != 8) throw ValidationError("displacement must be 8 numbers");
    std::array<double, 8> v;
    for (std::size_t i = 0; i < 8; ++i) v[i] = j[i].get<double>();
    return CornerDisplacement::from_flat(v);
}

json manifest_to_json(const DatasetManifest& m) {
    json j;
    j["schema_version"] = m.schema_version;
    json classes = json::array();
    for (const ClassRecord& cls : m.classes) {
        json jc;
        jc["name"] = cls.name;
        jc["kind"] = cls.kind;
        json images = json::array();
        for (const ImageRecord& rec : cls.images) {
            json jr;
            jr["path"] = rec.path;
            jr["split"] = rec.split;
            jr["label"] = rec.label;
            if (!rec.mask_path.empty()) jr["mask"] = rec.mask_path;
            jr["alignment"] = rec.alignment;
            if (rec.transform) {
                jr["transform"] = {{"h", homography_to_json(rec.transform->h)},
                                   {"fill", rec.transform->fill}};
            }
            if (!rec.meta.is_null() && !rec.meta.empty()) jr["meta"] = rec.meta;
            images.push_back(std::move(jr));
        }
        jc["images"] = std::move(images);
        classes.push_back(std::move(jc));
    }
    j["classes"] = std::move(classes);
    return j;
}

DatasetManifest manifest_from_json(const json& j, const fs::path& root) {
    DatasetManifest m;
    m.root = root;
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != 1) {
        throw ValidationError("unsupported manifest schema_version " + std::to_string(m.schema_version));
    }
    for (const json& jc : j.at("classes")) {
        ClassRecord cls;
        cls.name = jc.at("name").get<std::string>();
        cls.kind = jc.at("kind").get<std::string>();
        if (cls.kind != "object" && cls.kind != "texture") {
            throw ValidationError("class kind must be object or texture: " + cls.name);
        }
        for (const json& jr : jc.at("images")) {
            ImageRecord rec;
            rec.path = jr.at("path").get<std::string>();
            rec.split = jr.at("split").get<std::string>();
            rec.label = jr.at("label").get<std::string>();
            if (jr.contains("mask")) rec.mask_path = jr.at("mask").get<std::string>();
            if (jr.contains("alignment")) rec.alignment = jr.at("alignment").get<std::string>();
            if (jr.contains("transform")) {
                TransformRecord t;
                t.h = homography_from_json(jr.at("transform").at("h"));
                t.fill = jr.at("transform").at("fill").get<std::string>();
                rec.transform = t;
            }
            if (jr.contains("meta")) rec.meta = jr.at("meta");
            cls.images.push_back(std::move(rec));
        }
        m.classes.push_back(std::move(cls));
    }
    return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write manifest under " + dir.string());
    out << manifest_to_json(m).dump(2) << "\n";
}

DatasetManifest load_manifest(const fs::path& dir) {
    const fs::path file = fs::is_directory(dir) ? dir / "manifest.json" : dir;
    std::ifstream in(file);
    if (!in) throw IoError("cannot open manifest: " + file.string());
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw ValidationError(std::string("manifest parse error: ") + e.what());
    }
    return manifest_from_json(j, file.parent_path());
}

void validate_manifest(const DatasetManifest& m, bool deep) {
    for (const ClassRecord& cls : m.classes) {
        for (const ImageRecord& rec : cls.images) {
            if (rec.split != "train" && rec.split != "test") {
                throw ValidationError("bad split '" + rec.split + "' in class " + cls.name);
            }
            if (rec.split == "train" && !rec.is_good()) {
                throw ValidationError("train split of " + cls.name + " contains non-good label " + rec.label);
            }
            if (!fs::exists(m.resolve(rec.path))) {
                throw ValidationError("missing image file: " + rec.path);
            }
            if (!rec.mask_path.empty() && !fs::exists(m.resolve(rec.mask_path))) {
                throw ValidationError("missing mask file: " + rec.mask_path);
            }
            if (deep && !rec.mask_path.empty()) {
                const Image img = load_png(m.resolve(rec.path));
                const Image mask = load_png(m.resolve(rec.mask_path));
                if (img.width != mask.width || img.height != mask.height) {
                    throw ValidationError("mask dimensions differ from image: " + rec.path);
                }
            }
        }
    }
}

DatasetManifest scan_mvtec_layout(const fs::path& dir, const std::vector<std::string>& classes) {
    if (!fs::is_directory(dir)) throw IoError("not a dataset directory: " + dir.string());

    std::vector<std::string> names = classes;
    if (names.empty()) {
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.is_directory() && fs::exists(entry.path() / "train" / "good")) {
                names.push_back(entry.path().filename().string());
            }
        }
        std::sort(names.begin(), names.end());
    }
    if (names.empty()) throw InvalidSpec("no MVTec-style classes found under " + dir.string());

    const auto list_pngs = [](const fs::path& p) {
        std::vector<fs::path> files;
        if (!fs::is_directory(p)) return files;
        for (const auto& e : fs::directory_iterator(p)) {
            if (e.path().extension() == ".png") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        return files;
    };

    DatasetManifest m;
    m.root = dir;
    for (const std::string& name : names) {
        ClassRecord cls;
        cls.name = name;
        cls.kind = kTextureClasses.count(name) ? "texture" : "object";
        const fs::path class_dir = dir / name;

        for (const fs::path& f : list_pngs(class_dir / "train" / "good")) {
            ImageRecord rec;
            rec.path = fs::relative(f, dir).string();
            rec.split = "train";
            rec.label = "good";
            cls.images.push_back(std::move(rec));
        }
        if (fs::is_directory(class_dir / "test")) {
            std::vector<fs::path> label_dirs;
            for (const auto& e : fs::directory_iterator(class_dir / "test")) {
                if (e.is_directory()) label_dirs.push_back(e.path());
            }
            std::sort(label_dirs.begin(), label_dirs.end());
            for (const fs::path& label_dir : label_dirs) {
                const std::string label = label_dir.filename().string();
                for (const fs::path& f : list_pngs(label_dir)) {
                    ImageRecord rec;
                    rec.path = fs::relative(f, dir).string();
                    rec.split = "test";
                    rec.label = label;
                    if (label != "good") {
                        // MVTec convention: ground_truth/<label>/<stem>_mask.png
                        const fs::path mask = class_dir / "ground_truth" / label /
                                              (f.stem().string() + "_mask.png");
                        if (fs::exists(mask)) rec.mask_path = fs::relative(mask, dir).string();
                    }
                    cls.images.push_back(std::move(rec));
                }
            }
        }
        if (cls.images.empty()) throw InvalidSpec("class has no images: " + name);
        m.classes.push_back(std::move(cls));
    }
    return m;
}

} // namespace anomalign
