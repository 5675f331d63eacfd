#include "anomalign/common.hpp"
#include "anomalign/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace anomalign {

namespace fs = std::filesystem;

double condition_delta(const ExperimentResult& result, const std::string& scorer,
                       const std::string& condition, const std::string& reference,
                       const std::string& kind) {
    return result.mean(scorer, condition, kind).image_auroc -
           result.mean(scorer, reference, kind).image_auroc;
}

namespace {

using Clock = std::chrono::steady_clock;

DatasetManifest subset_manifest(const DatasetManifest& src, const std::vector<std::string>& classes) {
    if (classes.empty()) return src;
    DatasetManifest out;
    out.schema_version = src.schema_version;
    out.root = src.root;
    for (const std::string& name : classes) out.classes.push_back(src.find_class(name));
    return out;
}

std::vector<std::string> manifest_class_names(const DatasetManifest& m) {
    std::vector<std::string> names;
    for (const ClassRecord& c : m.classes) names.push_back(c.name);
    return names;
}

std::map<std::string, std::string> manifest_kinds(const DatasetManifest& m) {
    std::map<std::string, std::string> kinds;
    for (const ClassRecord& c : m.classes) kinds[c.name] = c.kind;
    return kinds;
}

struct ClassData {
    std::vector<Image> train;
    std::vector<Image> test;
    std::vector<int> labels;
    std::vector<Image> masks; // empty images for good/maskless records
};

ClassData load_class(const DatasetManifest& manifest, const std::string& name, int size) {
    ClassData data;
    for (const ImageRecord& rec : manifest.find_class(name).images) {
        Image img = load_png(manifest.resolve(rec.path));
        if (img.width != size || img.height != size) img = resize_bilinear(img, size, size);
        if (rec.split == "train") {
            data.train.push_back(std::move(img));
        } else {
            data.test.push_back(std::move(img));
            data.labels.push_back(rec.is_good() ? 0 : 1);
            Image mask;
            if (!rec.mask_path.empty()) {
                mask = load_png(manifest.resolve(rec.mask_path));
                if (mask.width != size || mask.height != size) {
                    mask = resize_nearest(mask, size, size);
                }
            }
            data.masks.push_back(std::move(mask));
        }
    }
    return data;
}

StudyCell make_cell(const std::string& scorer, const std::string& condition,
                    const std::string& class_name, int seed) {
    StudyCell cell;
    cell.scorer = scorer;
    cell.condition = condition;
    cell.class_name = class_name;
    cell.seed = seed;
    return cell;
}

// evaluate every scorer for one (condition, class, seed) against a manifest
void evaluate_cells(const Backbone& backbone, const std::string& checkpoint_id,
                    const DatasetManifest& manifest, const std::string& class_name,
                    const std::vector<std::string>& scorers, const EvalConfig& eval_cfg,
                    const std::string& condition, int seed, const fs::path& heatmap_dir,
                    std::vector<StudyCell>& out) {
    for (const std::string& scorer : scorers) {
        StudyCell cell = make_cell(scorer, condition, class_name, seed);
        try {
            const CellResult r =
                evaluate_class(backbone, checkpoint_id, manifest, class_name, scorer, eval_cfg,
                               heatmap_dir);
            cell.image_auroc = r.image_auroc;
            cell.pixel_score = r.pixel_score;
        } catch (const std::exception& e) {
            cell.failed = true;
            cell.error = e.what();
        }
        out.push_back(std::move(cell));
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Checkpoint selection
// ---------------------------------------------------------------------------

std::function<double(const Checkpoint&)> make_checkpoint_evaluator(
    const TrainableBackbone& prototype, const std::vector<Image>& train_images,
    const std::vector<Image>& test_images, const std::vector<int>& test_labels,
    const std::vector<Image>& test_masks, const EvalConfig& eval_cfg, bool paper_protocol,
    int val_holdout, std::uint64_t seed) {
    auto proto = prototype.clone();
    const std::vector<std::string> taps =
        eval_cfg.taps.empty() ? default_taps(prototype) : eval_cfg.taps;

    if (!paper_protocol) {
        const int n = static_cast<int>(train_images.size());
        int holdout = val_holdout > 0 ? val_holdout
                                      : std::max(2, static_cast<int>(std::lround(0.2 * n)));
        holdout = std::min(holdout, n - 2);
        if (holdout < 1) {
            throw InsufficientNormals("checkpoint selection needs at least 3 normal images");
        }
        auto fit_set = std::make_shared<std::vector<Image>>(train_images.begin(),
                                                            train_images.end() - holdout);
        auto val = std::make_shared<std::vector<Image>>();
        auto labels = std::make_shared<std::vector<int>>();
        for (int i = n - holdout; i < n; ++i) {
            val->push_back(train_images[static_cast<std::size_t>(i)]);
            labels->push_back(0);
        }
        static const char* kValKinds[3] = {"dent", "spot", "scratch"};
        for (int i = n - holdout; i < n; ++i) {
            Rng rng(derive_seed(seed, "val_defect", static_cast<std::uint64_t>(i)));
            const std::string kind = kValKinds[i % 3];
            val->push_back(inject_defect(train_images[static_cast<std::size_t>(i)], kind, rng).image);
            labels->push_back(1);
        }

        return [proto = std::shared_ptr<TrainableBackbone>(std::move(proto)), fit_set, val, labels,
                eval_cfg, taps](const Checkpoint& ckpt) {
            proto->restore(ckpt.weights);
            ModelMeta meta;
            meta.backbone_id = proto->id();
            meta.checkpoint_id = "selection";
            meta.config_hash = "selection";
            meta.input_width = fit_set->front().width;
            meta.input_height = fit_set->front().height;
            std::vector<std::vector<FeatureMap>> features;
            for (const Image& img : *fit_set) features.push_back(extract_features(*proto, img, taps));
            const PadimModel model = padim_fit(features, eval_cfg.padim, meta);
            std::vector<double> scores;
            for (const Image& img : *val) {
                scores.push_back(padim_score(model, extract_features(*proto, img, taps)).image_score);
            }
            return auroc(scores, *labels);
        };
    }

    auto train = std::make_shared<std::vector<Image>>(train_images);
    auto test = std::make_shared<std::vector<Image>>(test_images);
    auto labels = std::make_shared<std::vector<int>>(test_labels);
    auto masks = std::make_shared<std::vector<Image>>(test_masks);
    return [proto = std::shared_ptr<TrainableBackbone>(std::move(proto)), train, test, labels,
            masks, eval_cfg, taps](const Checkpoint& ckpt) {
        proto->restore(ckpt.weights);
        ModelMeta meta;
        meta.backbone_id = proto->id();
        meta.checkpoint_id = "selection";
        meta.config_hash = "selection";
        meta.input_width = train->front().width;
        meta.input_height = train->front().height;
        std::vector<std::vector<FeatureMap>> features;
        for (const Image& img : *train) features.push_back(extract_features(*proto, img, taps));
        const PadimModel model = padim_fit(features, eval_cfg.padim, meta);
        std::vector<double> scores;
        std::vector<Image> maps;
        std::vector<Image> mask_list;
        for (std::size_t i = 0; i < test->size(); ++i) {
            ScoreResult r = padim_score(model, extract_features(*proto, (*test)[i], taps));
            scores.push_back(r.image_score);
            maps.push_back(std::move(r.score_map));
            Image mask = (*masks)[i];
            if (mask.empty()) mask = Image(maps.back().width, maps.back().height, 1, 0.0f);
            mask_list.push_back(std::move(mask));
        }
        double value = auroc(scores, *labels);
        int metrics = 1;
        bool any_positive_pixel = false;
        for (const Image& m : mask_list) {
            for (const float v : m.data) {
                if (v > 0.5f) {
                    any_positive_pixel = true;
                    break;
                }
            }
            if (any_positive_pixel) break;
        }
        if (any_positive_pixel) {
            value += pixel_auroc(maps, mask_list);
            ++metrics;
        }
        return value / metrics;
    };
}

// ---------------------------------------------------------------------------
// Alignment study
// ---------------------------------------------------------------------------

ExperimentResult run_alignment_study(const DatasetManifest& source,
                                     const AlignmentStudyConfig& cfg, const fs::path& work_dir) {
    const auto start = Clock::now();
    const DatasetManifest base = subset_manifest(source, cfg.classes);
    const std::vector<std::string> classes = manifest_class_names(base);

    ExperimentResult result;
    result.study = "alignment";
    result.seeds = cfg.seeds;
    result.class_kinds = manifest_kinds(base);

    const fs::path heatmap_dir = cfg.eval.heatmaps ? work_dir / "heatmaps" : fs::path();

    for (const int seed : cfg.seeds) {
        const auto backbone = create_backbone(
            cfg.backbone_id, derive_seed(static_cast<std::uint64_t>(seed), "study_backbone"), 3,
            cfg.asset_dir);
        for (std::size_t ci = 0; ci < classes.size(); ++ci) {
            const std::string& cls = classes[ci];
            const DatasetManifest single = subset_manifest(base, {cls});
            const fs::path seed_dir = work_dir / "variants" / ("seed" + std::to_string(seed)) / cls;

            // original condition scores the source data directly
            evaluate_cells(*backbone, "baseline", single, cls, cfg.scorers, cfg.eval, "original",
                           seed, heatmap_dir, result.cells);

            try {
                const BuildResult misaligned = build_misaligned_dataset(
                    single, cfg.misalignment,
                    derive_seed(static_cast<std::uint64_t>(seed), "misalign", ci),
                    seed_dir / "misaligned");
                evaluate_cells(*backbone, "baseline", misaligned.manifest, cls, cfg.scorers,
                               cfg.eval, "misaligned", seed, heatmap_dir, result.cells);
            } catch (const std::exception& e) {
                for (const std::string& scorer : cfg.scorers) {
                    StudyCell cell = make_cell(scorer, "misaligned", cls, seed);
                    cell.failed = true;
                    cell.error = e.what();
                    result.cells.push_back(std::move(cell));
                }
            }

            try {
                ClassData data = load_class(single, cls, cfg.eval.input_size);
                AlignerConfig aligner_cfg = cfg.aligner;
                aligner_cfg.mode = AlignerMode::PairwiseRotation;
                aligner_cfg.workers = cfg.workers;
                aligner_cfg.seed = derive_seed(static_cast<std::uint64_t>(seed), "aligner", ci);
                if (aligner_cfg.template_index < 0) {
                    aligner_cfg.template_index =
                        pick_template_index(aligner_cfg.seed, static_cast<int>(data.train.size()));
                }
                const AlignerModel model = train_pairwise_aligner(data.train, aligner_cfg);
                const Image& tpl = data.train[static_cast<std::size_t>(aligner_cfg.template_index)];
                const BuildResult aligned =
                    build_aligned_dataset(single, model, tpl, seed_dir / "aligned");
                evaluate_cells(*backbone, "baseline", aligned.manifest, cls, cfg.scorers, cfg.eval,
                               "aligned", seed, heatmap_dir, result.cells);
            } catch (const std::exception& e) {
                for (const std::string& scorer : cfg.scorers) {
                    StudyCell cell = make_cell(scorer, "aligned", cls, seed);
                    cell.failed = true;
                    cell.error = e.what();
                    result.cells.push_back(std::move(cell));
                }
            }
        }
    }

    result.wall_clock_s = std::chrono::duration<double>(Clock::now() - start).count();
    return result;
}

// ---------------------------------------------------------------------------
// HL study (and the augmentation/backbone grids over it)
// ---------------------------------------------------------------------------

namespace {

void hl_seed_cells(const DatasetManifest& manifest, const HlStudyConfig& cfg,
                   const std::string& backbone_id, int seed, bool include_baseline,
                   const std::string& baseline_condition, const std::string& hl_condition,
                   AugmentCategory category, const fs::path& work_dir,
                   std::vector<StudyCell>& out) {
    const std::vector<std::string> classes = manifest_class_names(manifest);
    const fs::path heatmap_dir = cfg.eval.heatmaps ? work_dir / "heatmaps" : fs::path();

    std::unique_ptr<TrainableBackbone> baseline;
    try {
        baseline = create_backbone(backbone_id,
                                   derive_seed(static_cast<std::uint64_t>(seed), "study_init"), 3,
                                   cfg.asset_dir);
    } catch (const std::exception& e) {
        for (const std::string& cls : classes) {
            for (const std::string& scorer : cfg.scorers) {
                if (include_baseline) {
                    StudyCell cell = make_cell(scorer, baseline_condition, cls, seed);
                    cell.failed = true;
                    cell.error = e.what();
                    out.push_back(std::move(cell));
                }
                StudyCell cell = make_cell(scorer, hl_condition, cls, seed);
                cell.failed = true;
                cell.error = e.what();
                out.push_back(std::move(cell));
            }
        }
        return;
    }

    for (std::size_t ci = 0; ci < classes.size(); ++ci) {
        const std::string& cls = classes[ci];
        if (include_baseline) {
            evaluate_cells(*baseline, "baseline", manifest, cls, cfg.scorers, cfg.eval,
                           baseline_condition, seed, heatmap_dir, out);
        }

        try {
            const ClassData data = load_class(manifest, cls, cfg.eval.input_size);
            ShlConfig shl_cfg = cfg.shl;
            shl_cfg.seed = derive_seed(static_cast<std::uint64_t>(seed), "shl", ci);
            shl_cfg.workers = cfg.workers;
            shl_cfg.input_size = cfg.eval.input_size;
            shl_cfg.augmentation.category = category;

            auto tuned = baseline->clone();
            const CheckpointSeries series = finetune_backbone(*tuned, data.train, shl_cfg);
            const auto evaluator = make_checkpoint_evaluator(
                *baseline, data.train, data.test, data.labels, data.masks, cfg.eval,
                cfg.paper_protocol, cfg.val_holdout,
                derive_seed(static_cast<std::uint64_t>(seed), "val", ci));
            const Checkpoint& best = select_checkpoint(series, evaluator);
            tuned->restore(best.weights);
            evaluate_cells(*tuned, "shl_" + std::to_string(best.iteration), manifest, cls,
                           cfg.scorers, cfg.eval, hl_condition, seed, heatmap_dir, out);
        } catch (const std::exception& e) {
            for (const std::string& scorer : cfg.scorers) {
                StudyCell cell = make_cell(scorer, hl_condition, cls, seed);
                cell.failed = true;
                cell.error = e.what();
                out.push_back(std::move(cell));
            }
        }
    }
}

} // namespace

ExperimentResult run_hl_study(const DatasetManifest& manifest, const HlStudyConfig& cfg,
                              const fs::path& work_dir) {
    const auto start = Clock::now();
    const DatasetManifest base = subset_manifest(manifest, cfg.classes);

    ExperimentResult result;
    result.study = "hl";
    result.seeds = cfg.seeds;
    result.class_kinds = manifest_kinds(base);
    for (const int seed : cfg.seeds) {
        hl_seed_cells(base, cfg, cfg.backbone_id, seed, true, "pad", "pad_hl",
                      cfg.shl.augmentation.category, work_dir, result.cells);
    }
    result.wall_clock_s = std::chrono::duration<double>(Clock::now() - start).count();
    return result;
}

ExperimentResult run_augmentation_study(const DatasetManifest& manifest,
                                        const AugmentationStudyConfig& cfg,
                                        const fs::path& work_dir) {
    const auto start = Clock::now();
    const DatasetManifest base = subset_manifest(manifest, cfg.base.classes);

    ExperimentResult result;
    result.study = "augmentation";
    result.seeds = cfg.base.seeds;
    result.class_kinds = manifest_kinds(base);
    for (const int seed : cfg.base.seeds) {
        bool first = true;
        for (const AugmentCategory category : cfg.categories) {
            hl_seed_cells(base, cfg.base, cfg.base.backbone_id, seed, first, "pad",
                          "hl_" + to_string(category), category, work_dir, result.cells);
            first = false;
        }
    }
    result.wall_clock_s = std::chrono::duration<double>(Clock::now() - start).count();
    return result;
}

ExperimentResult run_backbone_study(const DatasetManifest& manifest,
                                    const BackboneStudyConfig& cfg, const fs::path& work_dir) {
    const auto start = Clock::now();
    const DatasetManifest base = subset_manifest(manifest, cfg.base.classes);

    ExperimentResult result;
    result.study = "backbone";
    result.seeds = cfg.base.seeds;
    result.class_kinds = manifest_kinds(base);
    for (const std::string& backbone_id : cfg.backbone_ids) {
        for (const int seed : cfg.base.seeds) {
            hl_seed_cells(base, cfg.base, backbone_id, seed, true, backbone_id + ":pad",
                          backbone_id + ":pad_hl", cfg.base.shl.augmentation.category, work_dir,
                          result.cells);
        }
    }
    result.wall_clock_s = std::chrono::duration<double>(Clock::now() - start).count();
    return result;
}

} // namespace anomalign
