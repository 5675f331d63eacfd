#include "anomalign/config.hpp"

#include "anomalign/common.hpp"
#include "anomalign/hash.hpp"

#include <fstream>
#include <thread>

namespace anomalign {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Schema prototype: leaves carry a type tag, arrays carry a single element
// prototype. Every key present in a document must exist here.
const json& schema() {
    static const json s = {
        {"schema_version", "int"},
        {"seed", "uint"},
        {"profile", "string"},
        {"output_dir", "string"},
        {"asset_dir", "string"},
        {"dataset",
         {{"root", "string"}, {"classes", json::array({"string"})}, {"input_size", "int"}}},
        {"backbone", {{"id", "string"}}},
        {"scorers", json::array({"string"})},
        {"padim", {{"channels", "int"}, {"eps", "number"}, {"smooth_sigma", "number"}, {"seed", "uint"}}},
        {"patchcore",
         {{"neighborhood", "int"},
          {"coreset_ratio", "number"},
          {"smooth_sigma", "number"},
          {"seed", "uint"}}},
        {"spade", {{"k_neighbors", "int"}, {"kappa", "int"}, {"smooth_sigma", "number"}}},
        {"mahad", {{"eps", "number"}}},
        {"augmentation",
         {{"category", "string"},
          {"hue_shift", "number"},
          {"brightness", "number"},
          {"pepper_rate", "number"},
          {"salt_rate", "number"}}},
        {"shl",
         {{"rho", "number"},
          {"iterations", "int"},
          {"checkpoint_every", "int"},
          {"batch_size", "int"},
          {"lr", "number"},
          {"paper_protocol", "bool"},
          {"val_holdout", "int"}}},
        {"aligner",
         {{"mode", "string"},
          {"iterations", "int"},
          {"batch_size", "int"},
          {"lr", "number"},
          {"rho", "number"},
          {"max_rotation_deg", "number"},
          {"template_index", "int"},
          {"snap_deg", "number"},
          {"input_size", "int"}}},
        {"misalignment",
         {{"max_rotation_deg", "number"},
          {"max_translation", "number"},
          {"max_scale_delta", "number"},
          {"foreground_margin", "number"}}},
        {"toy",
         {{"image_size", "int"},
          {"train_count", "int"},
          {"test_good_count", "int"},
          {"test_defect_count", "int"},
          {"defect_strength", "number"},
          {"classes", json::array({json{{"name", "string"},
                                        {"kind", "string"},
                                        {"pose_jitter_deg", "number"},
                                        {"defects", json::array({"string"})},
                                        {"defect_strength", "number"}}})}}},
        {"study",
         {{"name", "string"},
          {"seeds", json::array({"int"})},
          {"categories", json::array({"string"})},
          {"backbone_ids", json::array({"string"})}}},
        {"heatmaps", "bool"},
        {"heatmap_limit", "int"},
    };
    return s;
}

bool type_matches(const json& value, const std::string& tag) {
    if (tag == "int") return value.is_number_integer();
    if (tag == "uint") return value.is_number_unsigned() || (value.is_number_integer() && value.get<long long>() >= 0);
    if (tag == "number") return value.is_number();
    if (tag == "string") return value.is_string();
    if (tag == "bool") return value.is_boolean();
    return false;
}

void validate_node(const json& value, const json& proto, const std::string& path) {
    if (proto.is_string()) {
        if (!type_matches(value, proto.get<std::string>())) {
            throw ValidationError("config: " + path + " must be of type " + proto.get<std::string>());
        }
        return;
    }
    if (proto.is_array()) {
        if (!value.is_array()) throw ValidationError("config: " + path + " must be an array");
        for (std::size_t i = 0; i < value.size(); ++i) {
            validate_node(value[i], proto[0], path + "[" + std::to_string(i) + "]");
        }
        return;
    }
    if (!value.is_object()) throw ValidationError("config: " + path + " must be an object");
    for (const auto& [key, sub] : value.items()) {
        if (!proto.contains(key)) {
            throw ValidationError("config: unknown key " + (path.empty() ? key : path + "." + key));
        }
        validate_node(sub, proto.at(key), path.empty() ? key : path + "." + key);
    }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace

void validate_config_json(const json& j) {
    validate_node(j, schema(), "");
    if (j.contains("schema_version") && j.at("schema_version").get<int>() != 1) {
        throw ValidationError("config: unsupported schema_version");
    }
}

RunConfig parse_run_config(const json& j) {
    validate_config_json(j);
    RunConfig cfg;
    maybe(j, "seed", cfg.seed);
    maybe(j, "profile", cfg.profile);
    if (cfg.profile != "serial" && cfg.profile != "parallel") {
        throw ValidationError("config: profile must be serial or parallel");
    }
    maybe(j, "output_dir", cfg.output_dir);
    maybe(j, "asset_dir", cfg.asset_dir);
    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        maybe(d, "root", cfg.dataset.root);
        maybe(d, "classes", cfg.dataset.classes);
        maybe(d, "input_size", cfg.dataset.input_size);
    }
    if (j.contains("backbone")) maybe(j.at("backbone"), "id", cfg.backbone_id);
    maybe(j, "scorers", cfg.scorers);
    for (const std::string& s : cfg.scorers) {
        if (s != "padim" && s != "patchcore" && s != "spade" && s != "mahad") {
            throw ValidationError("config: unknown scorer " + s);
        }
    }
    if (j.contains("padim")) {
        const json& p = j.at("padim");
        maybe(p, "channels", cfg.padim.channels);
        maybe(p, "eps", cfg.padim.eps);
        maybe(p, "smooth_sigma", cfg.padim.smooth_sigma);
        maybe(p, "seed", cfg.padim.seed);
    }
    if (j.contains("patchcore")) {
        const json& p = j.at("patchcore");
        maybe(p, "neighborhood", cfg.patchcore.neighborhood);
        maybe(p, "coreset_ratio", cfg.patchcore.coreset_ratio);
        maybe(p, "smooth_sigma", cfg.patchcore.smooth_sigma);
        maybe(p, "seed", cfg.patchcore.seed);
    }
    if (j.contains("spade")) {
        const json& p = j.at("spade");
        maybe(p, "k_neighbors", cfg.spade.k_neighbors);
        maybe(p, "kappa", cfg.spade.kappa);
        maybe(p, "smooth_sigma", cfg.spade.smooth_sigma);
    }
    if (j.contains("mahad")) maybe(j.at("mahad"), "eps", cfg.mahad.eps);
    if (j.contains("augmentation")) {
        const json& a = j.at("augmentation");
        if (a.contains("category")) {
            cfg.augmentation.category = augment_category_from_string(a.at("category").get<std::string>());
        }
        maybe(a, "hue_shift", cfg.augmentation.hue_shift);
        maybe(a, "brightness", cfg.augmentation.brightness);
        maybe(a, "pepper_rate", cfg.augmentation.pepper_rate);
        maybe(a, "salt_rate", cfg.augmentation.salt_rate);
        cfg.augmentation.validate();
    }
    if (j.contains("shl")) {
        const json& s = j.at("shl");
        maybe(s, "rho", cfg.shl.rho);
        maybe(s, "iterations", cfg.shl.iterations);
        maybe(s, "checkpoint_every", cfg.shl.checkpoint_every);
        maybe(s, "batch_size", cfg.shl.batch_size);
        maybe(s, "lr", cfg.shl.lr);
        maybe(s, "paper_protocol", cfg.shl.paper_protocol);
        maybe(s, "val_holdout", cfg.shl.val_holdout);
    }
    if (j.contains("aligner")) {
        const json& a = j.at("aligner");
        maybe(a, "mode", cfg.aligner.mode);
        aligner_mode_from_string(cfg.aligner.mode); // validates
        maybe(a, "iterations", cfg.aligner.iterations);
        maybe(a, "batch_size", cfg.aligner.batch_size);
        maybe(a, "lr", cfg.aligner.lr);
        maybe(a, "rho", cfg.aligner.rho);
        maybe(a, "max_rotation_deg", cfg.aligner.max_rotation_deg);
        maybe(a, "template_index", cfg.aligner.template_index);
        maybe(a, "snap_deg", cfg.aligner.snap_deg);
        maybe(a, "input_size", cfg.aligner.input_size);
    }
    if (j.contains("misalignment")) {
        const json& m = j.at("misalignment");
        maybe(m, "max_rotation_deg", cfg.misalignment.max_rotation_deg);
        maybe(m, "max_translation", cfg.misalignment.max_translation);
        maybe(m, "max_scale_delta", cfg.misalignment.max_scale_delta);
        maybe(m, "foreground_margin", cfg.misalignment.foreground_margin);
        cfg.misalignment.validate();
    }
    cfg.toy = default_toy_spec();
    if (j.contains("toy")) {
        const json& t = j.at("toy");
        maybe(t, "image_size", cfg.toy.image_size);
        maybe(t, "train_count", cfg.toy.train_count);
        maybe(t, "test_good_count", cfg.toy.test_good_count);
        maybe(t, "test_defect_count", cfg.toy.test_defect_count);
        maybe(t, "defect_strength", cfg.toy.defect_strength);
        if (t.contains("classes")) {
            cfg.toy.classes.clear();
            for (const json& c : t.at("classes")) {
                ToyClassSpec spec;
                spec.name = c.at("name").get<std::string>();
                spec.kind = c.at("kind").get<std::string>();
                if (c.contains("pose_jitter_deg")) spec.pose_jitter_deg = c.at("pose_jitter_deg").get<double>();
                if (c.contains("defects")) spec.defects = c.at("defects").get<std::vector<std::string>>();
                if (c.contains("defect_strength")) spec.defect_strength = c.at("defect_strength").get<double>();
                cfg.toy.classes.push_back(std::move(spec));
            }
        }
        cfg.toy.validate();
    }
    if (j.contains("study")) {
        const json& s = j.at("study");
        maybe(s, "name", cfg.study.name);
        maybe(s, "seeds", cfg.study.seeds);
        maybe(s, "categories", cfg.study.categories);
        for (const std::string& c : cfg.study.categories) augment_category_from_string(c);
        maybe(s, "backbone_ids", cfg.study.backbone_ids);
        static const std::vector<std::string> kStudies = {"score", "alignment", "hl",
                                                          "augmentation", "backbone"};
        if (std::find(kStudies.begin(), kStudies.end(), cfg.study.name) == kStudies.end()) {
            throw ValidationError("config: unknown study " + cfg.study.name);
        }
        if (cfg.study.seeds.empty()) throw ValidationError("config: study.seeds must be nonempty");
    }
    maybe(j, "heatmaps", cfg.heatmaps);
    maybe(j, "heatmap_limit", cfg.heatmap_limit);
    return cfg;
}

json run_config_to_json(const RunConfig& cfg) {
    json t_classes = json::array();
    for (const ToyClassSpec& c : cfg.toy.classes) {
        t_classes.push_back({{"name", c.name},
                             {"kind", c.kind},
                             {"pose_jitter_deg", c.pose_jitter_deg},
                             {"defects", c.defects},
                             {"defect_strength", c.defect_strength}});
    }
    return json{
        {"schema_version", cfg.schema_version},
        {"seed", cfg.seed},
        {"profile", cfg.profile},
        {"output_dir", cfg.output_dir},
        {"asset_dir", cfg.asset_dir},
        {"dataset",
         {{"root", cfg.dataset.root},
          {"classes", cfg.dataset.classes},
          {"input_size", cfg.dataset.input_size}}},
        {"backbone", {{"id", cfg.backbone_id}}},
        {"scorers", cfg.scorers},
        {"padim",
         {{"channels", cfg.padim.channels},
          {"eps", cfg.padim.eps},
          {"smooth_sigma", cfg.padim.smooth_sigma},
          {"seed", cfg.padim.seed}}},
        {"patchcore",
         {{"neighborhood", cfg.patchcore.neighborhood},
          {"coreset_ratio", cfg.patchcore.coreset_ratio},
          {"smooth_sigma", cfg.patchcore.smooth_sigma},
          {"seed", cfg.patchcore.seed}}},
        {"spade",
         {{"k_neighbors", cfg.spade.k_neighbors},
          {"kappa", cfg.spade.kappa},
          {"smooth_sigma", cfg.spade.smooth_sigma}}},
        {"mahad", {{"eps", cfg.mahad.eps}}},
        {"augmentation",
         {{"category", to_string(cfg.augmentation.category)},
          {"hue_shift", cfg.augmentation.hue_shift},
          {"brightness", cfg.augmentation.brightness},
          {"pepper_rate", cfg.augmentation.pepper_rate},
          {"salt_rate", cfg.augmentation.salt_rate}}},
        {"shl",
         {{"rho", cfg.shl.rho},
          {"iterations", cfg.shl.iterations},
          {"checkpoint_every", cfg.shl.checkpoint_every},
          {"batch_size", cfg.shl.batch_size},
          {"lr", cfg.shl.lr},
          {"paper_protocol", cfg.shl.paper_protocol},
          {"val_holdout", cfg.shl.val_holdout}}},
        {"aligner",
         {{"mode", cfg.aligner.mode},
          {"iterations", cfg.aligner.iterations},
          {"batch_size", cfg.aligner.batch_size},
          {"lr", cfg.aligner.lr},
          {"rho", cfg.aligner.rho},
          {"max_rotation_deg", cfg.aligner.max_rotation_deg},
          {"template_index", cfg.aligner.template_index},
          {"snap_deg", cfg.aligner.snap_deg},
          {"input_size", cfg.aligner.input_size}}},
        {"misalignment",
         {{"max_rotation_deg", cfg.misalignment.max_rotation_deg},
          {"max_translation", cfg.misalignment.max_translation},
          {"max_scale_delta", cfg.misalignment.max_scale_delta},
          {"foreground_margin", cfg.misalignment.foreground_margin}}},
        {"toy",
         {{"image_size", cfg.toy.image_size},
          {"train_count", cfg.toy.train_count},
          {"test_good_count", cfg.toy.test_good_count},
          {"test_defect_count", cfg.toy.test_defect_count},
          {"defect_strength", cfg.toy.defect_strength},
          {"classes", t_classes}}},
        {"study",
         {{"name", cfg.study.name},
          {"seeds", cfg.study.seeds},
          {"categories", cfg.study.categories},
          {"backbone_ids", cfg.study.backbone_ids}}},
        {"heatmaps", cfg.heatmaps},
        {"heatmap_limit", cfg.heatmap_limit},
    };
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw ValidationError(std::string("config parse error: ") + e.what());
    }
    return parse_run_config(j);
}

std::string config_hash(const RunConfig& cfg) {
    return sha256_hex(run_config_to_json(cfg).dump());
}

void write_config_snapshot(const RunConfig& cfg, const fs::path& output_dir) {
    fs::create_directories(output_dir);
    std::ofstream out(output_dir / "config_snapshot.json");
    if (!out) throw IoError("cannot write config snapshot under " + output_dir.string());
    out << run_config_to_json(cfg).dump(2) << "\n";
}

int RunConfig::workers() const {
    if (profile == "parallel") {
        return std::max(1u, std::thread::hardware_concurrency());
    }
    return 1;
}

ShlConfig RunConfig::shl_config() const {
    ShlConfig c;
    c.rho = shl.rho;
    c.iterations = shl.iterations;
    c.checkpoint_every = shl.checkpoint_every;
    c.batch_size = shl.batch_size;
    c.lr = shl.lr;
    c.augmentation = augmentation;
    c.seed = seed;
    c.backbone_id = backbone_id;
    c.input_size = dataset.input_size;
    c.workers = workers();
    return c;
}

AlignerConfig RunConfig::aligner_config() const {
    AlignerConfig c;
    c.mode = aligner_mode_from_string(aligner.mode);
    c.iterations = aligner.iterations;
    c.batch_size = aligner.batch_size;
    c.lr = aligner.lr;
    c.rho = aligner.rho;
    c.max_rotation_deg = aligner.max_rotation_deg;
    c.augmentation = augmentation;
    c.seed = seed;
    c.input_size = aligner.input_size > 0 ? aligner.input_size : dataset.input_size;
    c.template_index = aligner.template_index;
    c.snap_deg = aligner.snap_deg;
    c.workers = workers();
    c.backbone_id = backbone_id;
    return c;
}

EvalConfig RunConfig::eval_config() const {
    EvalConfig c;
    c.scorers = scorers;
    c.input_size = dataset.input_size;
    c.padim = padim;
    c.patchcore = patchcore;
    c.spade = spade;
    c.mahad = mahad;
    c.heatmaps = heatmaps;
    c.heatmap_limit = heatmap_limit;
    return c;
}

HlStudyConfig RunConfig::hl_study_config() const {
    HlStudyConfig c;
    c.scorers = scorers;
    c.seeds = study.seeds;
    c.classes = dataset.classes;
    c.shl = shl_config();
    c.paper_protocol = shl.paper_protocol;
    c.val_holdout = shl.val_holdout;
    c.eval = eval_config();
    c.backbone_id = backbone_id;
    c.asset_dir = asset_dir;
    c.workers = workers();
    return c;
}

AlignmentStudyConfig RunConfig::alignment_study_config() const {
    AlignmentStudyConfig c;
    c.scorers = scorers;
    c.seeds = study.seeds;
    c.classes = dataset.classes;
    c.misalignment = misalignment;
    c.aligner = aligner_config();
    c.eval = eval_config();
    c.backbone_id = backbone_id;
    c.asset_dir = asset_dir;
    c.workers = workers();
    return c;
}

} // namespace anomalign
