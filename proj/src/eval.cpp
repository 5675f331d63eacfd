#include "anomalign/eval.hpp"

#include "anomalign/common.hpp"
#include "anomalign/hash.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace anomalign {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

double auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw DimensionMismatch("auroc: size mismatch");
    std::size_t n_pos = 0, n_neg = 0;
    for (const int l : labels) (l != 0 ? n_pos : n_neg) += 1;
    if (n_pos == 0 || n_neg == 0) {
        throw SingleClass("auroc needs both classes present");
    }

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // average ranks over tie groups (1-based ranks)
    double pos_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) {
            if (labels[order[k]] != 0) pos_rank_sum += avg_rank;
        }
        i = j + 1;
    }
    const double u = pos_rank_sum - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double pixel_auroc(std::span<const Image> maps, std::span<const Image> masks) {
    if (maps.size() != masks.size() || maps.empty()) {
        throw DimensionMismatch("pixel_auroc: need matching nonempty map/mask lists");
    }
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const Image& map = maps[i];
        const Image& mask = masks[i];
        if (map.width != mask.width || map.height != mask.height || map.channels != 1 ||
            mask.channels != 1) {
            throw DimensionMismatch("pixel_auroc: map/mask shapes differ");
        }
        for (std::size_t p = 0; p < map.data.size(); ++p) {
            scores.push_back(map.data[p]);
            labels.push_back(mask.data[p] > 0.5f ? 1 : 0);
        }
    }
    return auroc(scores, labels);
}

namespace {

void jet_color(float v, float& r, float& g, float& b) {
    v = std::clamp(v, 0.0f, 1.0f);
    r = std::clamp(1.5f - std::abs(4.0f * v - 3.0f), 0.0f, 1.0f);
    g = std::clamp(1.5f - std::abs(4.0f * v - 2.0f), 0.0f, 1.0f);
    b = std::clamp(1.5f - std::abs(4.0f * v - 1.0f), 0.0f, 1.0f);
}

Image to_rgb(const Image& img) {
    if (img.channels == 3) return img;
    Image out(img.width, img.height, 3);
    for (int c = 0; c < 3; ++c)
        std::copy(img.data.begin(), img.data.end(),
                  out.data.begin() + static_cast<std::ptrdiff_t>(c) * img.width * img.height);
    return out;
}

} // namespace

void render_heatmap(const Image& score_map, const Image& img, const Image* mask,
                    const fs::path& out_path) {
    if (score_map.width != img.width || score_map.height != img.height) {
        throw DimensionMismatch("heatmap: score map and image dims differ");
    }
    float lo = score_map.data.empty() ? 0.0f : score_map.data[0];
    float hi = lo;
    for (const float v : score_map.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const float range = hi - lo;

    const Image rgb = to_rgb(img);
    Image overlay(img.width, img.height, 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const float v = range > 0.0f ? (score_map.at(0, y, x) - lo) / range : 0.0f;
            float r, g, b;
            jet_color(v, r, g, b);
            overlay.at(0, y, x) = 0.5f * rgb.at(0, y, x) + 0.5f * r;
            overlay.at(1, y, x) = 0.5f * rgb.at(1, y, x) + 0.5f * g;
            overlay.at(2, y, x) = 0.5f * rgb.at(2, y, x) + 0.5f * b;
        }
    }

    const int panels = mask ? 3 : 2;
    const int gap = 4;
    Image panel(img.width * panels + gap * (panels - 1), img.height, 3, 1.0f);
    const auto blit = [&](const Image& src, int x_off) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < src.height; ++y)
                for (int x = 0; x < src.width; ++x) panel.at(c, y, x + x_off) = src.at(c, y, x);
    };
    blit(rgb, 0);
    blit(overlay, img.width + gap);
    if (mask) blit(to_rgb(*mask), 2 * (img.width + gap));
    save_png(panel, out_path);
}

// ---------------------------------------------------------------------------
// Evaluation cells
// ---------------------------------------------------------------------------

namespace {

Image load_resized(const fs::path& path, int size, bool nearest) {
    const Image img = load_png(path);
    if (img.width == size && img.height == size) return img;
    return nearest ? resize_nearest(img, size, size) : resize_bilinear(img, size, size);
}

std::string extractor_hash(const Backbone& backbone, const std::string& checkpoint_id,
                           std::span<const std::string> taps, int input_size) {
    nlohmann::json j;
    j["backbone_id"] = backbone.id();
    j["checkpoint_id"] = checkpoint_id;
    j["taps"] = taps;
    j["input_size"] = input_size;
    return sha256_hex(j.dump());
}

} // namespace

CellResult evaluate_class(const Backbone& backbone, const std::string& checkpoint_id,
                          const DatasetManifest& manifest, const std::string& class_name,
                          const std::string& scorer, const EvalConfig& cfg,
                          const fs::path& heatmap_dir) {
    const ClassRecord& cls = manifest.find_class(class_name);
    const std::vector<std::string> taps = cfg.taps.empty() ? default_taps(backbone) : cfg.taps;

    ModelMeta meta;
    meta.backbone_id = backbone.id();
    meta.checkpoint_id = checkpoint_id;
    meta.config_hash = extractor_hash(backbone, checkpoint_id, taps, cfg.input_size);
    meta.input_width = cfg.input_size;
    meta.input_height = cfg.input_size;

    std::vector<std::vector<FeatureMap>> train_features;
    for (const ImageRecord& rec : cls.images) {
        if (rec.split != "train") continue;
        const Image img = load_resized(manifest.resolve(rec.path), cfg.input_size, false);
        train_features.push_back(extract_features(backbone, img, taps));
    }

    // fit the requested scorer
    std::optional<PadimModel> padim;
    std::optional<MemoryBank> bank;
    std::optional<SpadeModel> spade;
    std::optional<MahadModel> mahad;
    if (scorer == "padim") {
        padim = padim_fit(train_features, cfg.padim, meta);
    } else if (scorer == "patchcore") {
        bank = patchcore_fit(train_features, cfg.patchcore, meta);
    } else if (scorer == "spade") {
        spade = spade_fit(train_features, cfg.spade, meta);
    } else if (scorer == "mahad") {
        mahad = mahad_fit(train_features, cfg.mahad, meta);
    } else {
        throw ValidationError("unknown scorer: " + scorer);
    }
    train_features.clear();
    train_features.shrink_to_fit();

    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<Image> maps;
    std::vector<Image> masks;
    int rendered = 0;
    for (const ImageRecord& rec : cls.images) {
        if (rec.split != "test") continue;
        const Image img = load_resized(manifest.resolve(rec.path), cfg.input_size, false);
        const std::vector<FeatureMap> features = extract_features(backbone, img, taps);
        ScoreResult result;
        if (padim) result = padim_score(*padim, features);
        else if (bank) result = patchcore_score(*bank, features);
        else if (spade) result = spade_score(*spade, features);
        else result = mahad_score(*mahad, features);

        scores.push_back(result.image_score);
        labels.push_back(rec.is_good() ? 0 : 1);
        if (!result.score_map.empty()) {
            Image mask(cfg.input_size, cfg.input_size, 1, 0.0f);
            if (!rec.mask_path.empty()) {
                mask = load_resized(manifest.resolve(rec.mask_path), cfg.input_size, true);
            }
            if (cfg.heatmaps && !heatmap_dir.empty() && rendered < cfg.heatmap_limit &&
                !rec.is_good()) {
                const fs::path out = heatmap_dir / (class_name + "_" + scorer + "_" +
                                                    std::to_string(rendered) + ".png");
                render_heatmap(result.score_map, img, rec.mask_path.empty() ? nullptr : &mask, out);
                ++rendered;
            }
            maps.push_back(std::move(result.score_map));
            masks.push_back(std::move(mask));
        }
    }

    CellResult cell;
    cell.image_auroc = auroc(scores, labels);
    if (!maps.empty()) {
        cell.pixel_score = pixel_auroc(maps, masks);
    }
    return cell;
}

// ---------------------------------------------------------------------------
// Experiment results
// ---------------------------------------------------------------------------

Aggregate ExperimentResult::mean(const std::string& scorer, const std::string& condition,
                                 const std::string& kind) const {
    // mean over seeds per class first, then over classes, so every class
    // carries equal weight regardless of per-class failures elsewhere
    std::map<std::string, std::pair<double, int>> image_acc;
    std::map<std::string, std::pair<double, int>> pixel_acc;
    for (const StudyCell& cell : cells) {
        if (cell.failed || cell.scorer != scorer || cell.condition != condition) continue;
        if (!kind.empty()) {
            const auto it = class_kinds.find(cell.class_name);
            if (it == class_kinds.end() || it->second != kind) continue;
        }
        auto& ia = image_acc[cell.class_name];
        ia.first += cell.image_auroc;
        ia.second += 1;
        if (cell.pixel_score) {
            auto& pa = pixel_acc[cell.class_name];
            pa.first += *cell.pixel_score;
            pa.second += 1;
        }
    }
    Aggregate agg;
    for (const auto& [cls, acc] : image_acc) {
        agg.image_auroc += acc.first / acc.second;
        agg.cell_count += acc.second;
    }
    if (!image_acc.empty()) agg.image_auroc /= static_cast<double>(image_acc.size());
    if (!pixel_acc.empty()) {
        double p = 0.0;
        for (const auto& [cls, acc] : pixel_acc) p += acc.first / acc.second;
        agg.pixel_score = p / static_cast<double>(pixel_acc.size());
    }
    return agg;
}

std::vector<std::string> ExperimentResult::class_names() const {
    std::vector<std::string> names;
    for (const StudyCell& cell : cells) {
        if (std::find(names.begin(), names.end(), cell.class_name) == names.end()) {
            names.push_back(cell.class_name);
        }
    }
    return names;
}

std::vector<std::string> ExperimentResult::conditions() const {
    std::vector<std::string> names;
    for (const StudyCell& cell : cells) {
        if (std::find(names.begin(), names.end(), cell.condition) == names.end()) {
            names.push_back(cell.condition);
        }
    }
    return names;
}

nlohmann::json experiment_to_json(const ExperimentResult& result) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["study"] = result.study;
    j["seeds"] = result.seeds;
    j["class_kinds"] = result.class_kinds;
    j["config"] = result.config_snapshot;
    nlohmann::json cells = nlohmann::json::array();
    for (const StudyCell& cell : result.cells) {
        nlohmann::json jc;
        jc["scorer"] = cell.scorer;
        jc["condition"] = cell.condition;
        jc["class"] = cell.class_name;
        jc["seed"] = cell.seed;
        if (cell.failed) {
            jc["failed"] = true;
            jc["error"] = cell.error;
        } else {
            jc["image_auroc"] = cell.image_auroc;
            if (cell.pixel_score) jc["pixel_auroc"] = *cell.pixel_score;
        }
        cells.push_back(std::move(jc));
    }
    j["cells"] = std::move(cells);

    nlohmann::json aggregates = nlohmann::json::object();
    std::vector<std::string> scorers;
    for (const StudyCell& c : result.cells) {
        if (std::find(scorers.begin(), scorers.end(), c.scorer) == scorers.end()) {
            scorers.push_back(c.scorer);
        }
    }
    for (const std::string& scorer : scorers) {
        for (const std::string& condition : result.conditions()) {
            for (const std::string& kind : {std::string(), std::string("object"), std::string("texture")}) {
                const Aggregate agg = result.mean(scorer, condition, kind);
                if (agg.cell_count == 0) continue;
                nlohmann::json ja;
                ja["image_auroc"] = agg.image_auroc;
                if (agg.pixel_score) ja["pixel_auroc"] = *agg.pixel_score;
                ja["cells"] = agg.cell_count;
                const std::string key =
                    scorer + "|" + condition + (kind.empty() ? "" : "|" + kind);
                aggregates[key] = std::move(ja);
            }
        }
    }
    j["aggregates"] = std::move(aggregates);
    return j;
}

ExperimentResult experiment_from_json(const nlohmann::json& j) {
    if (j.at("schema_version").get<int>() != 1) {
        throw ValidationError("unsupported results schema_version");
    }
    ExperimentResult result;
    result.study = j.at("study").get<std::string>();
    result.seeds = j.at("seeds").get<std::vector<int>>();
    result.class_kinds = j.value("class_kinds", std::map<std::string, std::string>{});
    result.config_snapshot = j.value("config", nlohmann::json::object());
    for (const nlohmann::json& jc : j.at("cells")) {
        StudyCell cell;
        cell.scorer = jc.at("scorer").get<std::string>();
        cell.condition = jc.at("condition").get<std::string>();
        cell.class_name = jc.at("class").get<std::string>();
        cell.seed = jc.at("seed").get<int>();
        cell.failed = jc.value("failed", false);
        if (cell.failed) {
            cell.error = jc.value("error", "");
        } else {
            cell.image_auroc = jc.at("image_auroc").get<double>();
            if (jc.contains("pixel_auroc")) cell.pixel_score = jc.at("pixel_auroc").get<double>();
        }
        result.cells.push_back(std::move(cell));
    }
    return result;
}

std::string experiment_to_markdown(const ExperimentResult& result) {
    std::string md = "# Study: " + result.study + "\n\n";
    std::vector<std::string> scorers;
    for (const StudyCell& c : result.cells) {
        if (std::find(scorers.begin(), scorers.end(), c.scorer) == scorers.end()) {
            scorers.push_back(c.scorer);
        }
    }
    const std::vector<std::string> conditions = result.conditions();

    const auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.4f", v);
        return std::string(buf);
    };

    for (const std::string& metric : {std::string("image"), std::string("pixel")}) {
        md += "## " + metric + "-level AUROC\n\n| scorer |";
        for (const std::string& c : conditions) md += " " + c + " |";
        md += "\n|---|";
        for (std::size_t i = 0; i < conditions.size(); ++i) md += "---|";
        md += "\n";
        for (const std::string& scorer : scorers) {
            std::string row = "| " + scorer + " |";
            bool any = false;
            for (const std::string& condition : conditions) {
                const Aggregate agg = result.mean(scorer, condition);
                if (agg.cell_count == 0) {
                    row += " - |";
                    continue;
                }
                if (metric == "image") {
                    row += " " + fmt(agg.image_auroc) + " |";
                    any = true;
                } else if (agg.pixel_score) {
                    row += " " + fmt(*agg.pixel_score) + " |";
                    any = true;
                } else {
                    row += " - |";
                }
            }
            if (any) md += row + "\n";
        }
        md += "\n";
    }

    // per-class image table with a max column
    md += "## per-class image AUROC\n\n| class |";
    for (const std::string& s : scorers)
        for (const std::string& c : conditions) md += " " + s + ":" + c + " |";
    md += " max |\n|---|";
    for (std::size_t i = 0; i < scorers.size() * conditions.size() + 1; ++i) md += "---|";
    md += "\n";
    for (const std::string& cls : result.class_names()) {
        std::string row = "| " + cls + " |";
        double best = 0.0;
        for (const std::string& s : scorers) {
            for (const std::string& c : conditions) {
                double acc = 0.0;
                int n = 0;
                for (const StudyCell& cell : result.cells) {
                    if (!cell.failed && cell.scorer == s && cell.condition == c &&
                        cell.class_name == cls) {
                        acc += cell.image_auroc;
                        ++n;
                    }
                }
                if (n == 0) {
                    row += " - |";
                } else {
                    row += " " + fmt(acc / n) + " |";
                    best = std::max(best, acc / n);
                }
            }
        }
        md += row + " " + fmt(best) + " |\n";
    }
    md += "\n";
    return md;
}

} // namespace anomalign
