#include "anomalign/cli.hpp"

#include "anomalign/common.hpp"
#include "anomalign/config.hpp"
#include "anomalign/eval.hpp"
#include "anomalign/hash.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>

namespace anomalign {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets; // generic key.path=value overrides
    std::string out;
    std::string dataset;
    std::string profile;
    long long seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "run configuration JSON");
    cmd->add_option("--set", opts.sets, "override a config value: key.path=value");
    cmd->add_option("--out", opts.out, "output directory (overrides output_dir)");
    cmd->add_option("--dataset", opts.dataset, "dataset root (overrides dataset.root)");
    cmd->add_option("--profile", opts.profile, "serial or parallel");
    cmd->add_option("--seed", opts.seed, "base seed");
}

void apply_set(json& doc, const std::string& expr) {
    const auto eq = expr.find('=');
    if (eq == std::string::npos) throw ValidationError("--set expects key.path=value: " + expr);
    const std::string path = expr.substr(0, eq);
    const std::string raw = expr.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw; // unquoted strings stay strings
    }
    json* node = &doc;
    std::size_t pos = 0;
    while (true) {
        const std::size_t dot = path.find('.', pos);
        const std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (key.empty()) throw ValidationError("--set has an empty path segment: " + expr);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        pos = dot + 1;
    }
}

RunConfig resolve_config(const CommonOpts& opts) {
    json doc = json::object();
    if (!opts.config_path.empty()) {
        std::ifstream in(opts.config_path);
        if (!in) throw ValidationError("cannot open config: " + opts.config_path);
        try {
            in >> doc;
        } catch (const json::parse_error& e) {
            throw ValidationError(std::string("config parse error: ") + e.what());
        }
    }
    for (const std::string& expr : opts.sets) apply_set(doc, expr);
    if (!opts.out.empty()) doc["output_dir"] = opts.out;
    if (!opts.dataset.empty()) doc["dataset"]["root"] = opts.dataset;
    if (!opts.profile.empty()) doc["profile"] = opts.profile;
    if (opts.seed >= 0) doc["seed"] = static_cast<std::uint64_t>(opts.seed);
    return parse_run_config(doc);
}

DatasetManifest resolve_dataset(const RunConfig& cfg) {
    if (cfg.dataset.root.empty()) {
        throw ValidationError("dataset.root is required for this command");
    }
    const fs::path root = cfg.dataset.root;
    if (fs::exists(root / "manifest.json")) return load_manifest(root);
    return scan_mvtec_layout(root, cfg.dataset.classes);
}

std::vector<std::string> selected_classes(const RunConfig& cfg, const DatasetManifest& manifest) {
    if (!cfg.dataset.classes.empty()) return cfg.dataset.classes;
    std::vector<std::string> names;
    for (const ClassRecord& c : manifest.classes) names.push_back(c.name);
    return names;
}

struct ClassImages {
    std::vector<Image> train;
    std::vector<Image> test;
    std::vector<int> labels;
    std::vector<Image> masks;
};

ClassImages load_class_images(const DatasetManifest& manifest, const std::string& name, int size) {
    ClassImages data;
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
                if (mask.width != size || mask.height != size) mask = resize_nearest(mask, size, size);
            }
            data.masks.push_back(std::move(mask));
        }
    }
    return data;
}

void write_run_meta(const RunConfig& cfg, const std::string& command, double wall_clock_s) {
    json meta;
    meta["command"] = command;
    meta["wall_clock_s"] = wall_clock_s;
    std::ofstream out(fs::path(cfg.output_dir) / "run_meta.json");
    out << meta.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// synthesize
// ---------------------------------------------------------------------------

int cmd_synthesize(const RunConfig& cfg, bool toy, const std::string& variant) {
    const auto start = Clock::now();
    write_config_snapshot(cfg, cfg.output_dir);
    const fs::path dataset_dir = fs::path(cfg.output_dir) / "dataset";

    if (toy) {
        const DatasetManifest manifest = generate_toy_dataset(cfg.toy, dataset_dir, cfg.seed);
        validate_manifest(manifest);
        std::cout << "toy dataset: " << manifest.classes.size() << " classes under "
                  << dataset_dir.string() << "\n";
    } else if (variant == "misaligned") {
        const DatasetManifest source = resolve_dataset(cfg);
        DatasetManifest subset = source;
        if (!cfg.dataset.classes.empty()) {
            subset.classes.clear();
            for (const std::string& name : cfg.dataset.classes) {
                subset.classes.push_back(source.find_class(name));
            }
        }
        const BuildResult built =
            build_misaligned_dataset(subset, cfg.misalignment, cfg.seed, dataset_dir);
        std::cout << "misaligned variant under " << dataset_dir.string() << "\n";
        if (!built.failures.empty()) {
            std::cerr << built.failures.size() << " file(s) failed:\n";
            for (const BuildFailure& f : built.failures) {
                std::cerr << "  " << f.path << ": " << f.error << "\n";
            }
            write_run_meta(cfg, "synthesize",
                           std::chrono::duration<double>(Clock::now() - start).count());
            return 2;
        }
    } else {
        throw ValidationError("synthesize needs --toy or --variant misaligned "
                              "(aligned variants come from `align --apply`)");
    }
    write_run_meta(cfg, "synthesize", std::chrono::duration<double>(Clock::now() - start).count());
    return 0;
}

// ---------------------------------------------------------------------------
// align
// ---------------------------------------------------------------------------

int cmd_align(const RunConfig& cfg, bool train, bool apply, const std::string& checkpoint) {
    const auto start = Clock::now();
    if (!train && !apply) throw ValidationError("align needs --train and/or --apply");
    write_config_snapshot(cfg, cfg.output_dir);

    const DatasetManifest source = resolve_dataset(cfg);
    const std::vector<std::string> classes = selected_classes(cfg, source);
    if (classes.size() != 1) {
        throw ValidationError("align works on exactly one class; set dataset.classes");
    }
    const std::string& cls = classes[0];
    const ClassImages data = load_class_images(source, cls, cfg.dataset.input_size);
    if (data.train.empty()) throw ValidationError("class has no train images: " + cls);

    AlignerConfig aligner_cfg = cfg.aligner_config();
    if (aligner_cfg.template_index >= static_cast<int>(data.train.size())) {
        throw ValidationError("template index out of range for class " + cls);
    }
    const fs::path model_base = fs::path(cfg.output_dir) / "aligner" / cls;

    if (train) {
        if (aligner_cfg.template_index < 0) {
            aligner_cfg.template_index =
                pick_template_index(aligner_cfg.seed, static_cast<int>(data.train.size()));
        }
        AlignerModel model;
        if (aligner_cfg.mode == AlignerMode::Template) {
            model = train_template_aligner(
                data.train, data.train[static_cast<std::size_t>(aligner_cfg.template_index)],
                aligner_cfg);
        } else {
            model = train_pairwise_aligner(data.train, aligner_cfg);
        }
        save_aligner(model, model_base);
        std::cout << "aligner saved: " << model_base.string() << ".weights (final loss "
                  << model.loss_curve.back() << ")\n";
    }

    if (apply) {
        const fs::path base = !checkpoint.empty() ? fs::path(checkpoint) : model_base;
        if (!fs::exists(base.string() + ".weights")) {
            throw ValidationError("align --apply requires a trained checkpoint (" +
                                  base.string() + ".weights not found)");
        }
        const AlignerModel model = load_aligner(base);
        if (model.template_index < 0 ||
            model.template_index >= static_cast<int>(data.train.size())) {
            throw ValidationError("aligner checkpoint lacks a valid template index");
        }
        DatasetManifest subset = source;
        subset.classes = {source.find_class(cls)};
        const BuildResult built =
            build_aligned_dataset(subset, model,
                                  data.train[static_cast<std::size_t>(model.template_index)],
                                  fs::path(cfg.output_dir) / "dataset");
        std::cout << "aligned variant under " << (fs::path(cfg.output_dir) / "dataset").string()
                  << "\n";
        if (!built.failures.empty()) {
            for (const BuildFailure& f : built.failures) {
                std::cerr << "  " << f.path << ": " << f.error << "\n";
            }
            return 2;
        }
    }
    write_run_meta(cfg, "align", std::chrono::duration<double>(Clock::now() - start).count());
    return 0;
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

int cmd_finetune(const RunConfig& cfg, bool resume) {
    const auto start = Clock::now();
    write_config_snapshot(cfg, cfg.output_dir);
    const DatasetManifest manifest = resolve_dataset(cfg);
    const std::string hash = config_hash(cfg);

    for (const std::string& cls : selected_classes(cfg, manifest)) {
        const fs::path class_dir = fs::path(cfg.output_dir) / "checkpoints" / cls;
        const ClassImages data = load_class_images(manifest, cls, cfg.dataset.input_size);
        const ShlConfig shl_cfg = cfg.shl_config();

        auto backbone = create_backbone(cfg.backbone_id,
                                        derive_seed(cfg.seed, "finetune_init"), 3, cfg.asset_dir);
        const auto prototype = backbone->clone(); // baseline weights for selection
        ShlTrainer trainer(*backbone, data.train, shl_cfg);

        CheckpointSeries full_series;
        if (resume && fs::exists(class_dir / "train_state.weights")) {
            trainer.import_state(load_checkpoint(class_dir / "train_state"));
            full_series = load_checkpoint_series(class_dir);
            // drop anything past the restored iteration
            while (!full_series.entries.empty() &&
                   full_series.entries.back().iteration > trainer.iteration()) {
                full_series.entries.pop_back();
            }
            full_series.loss_curve.resize(static_cast<std::size_t>(trainer.iteration()));
            std::cout << cls << ": resuming at iteration " << trainer.iteration() << "\n";
        }

        while (trainer.iteration() < shl_cfg.iterations) {
            const int target = trainer.iteration() + shl_cfg.checkpoint_every;
            trainer.run_to(target);
            full_series.entries.push_back(trainer.series().entries.back());
            full_series.loss_curve = trainer.series().loss_curve;
            save_checkpoint(class_dir / "train_state", trainer.export_state());
            save_checkpoint_series(full_series, cfg.backbone_id, hash, class_dir);
            std::cout << cls << ": iteration " << target << " loss "
                      << full_series.entries.back().loss << "\n";
        }

        // checkpoint selection
        const auto evaluator = make_checkpoint_evaluator(
            *prototype, data.train, data.test, data.labels, data.masks, cfg.eval_config(),
            cfg.shl.paper_protocol, cfg.shl.val_holdout, derive_seed(cfg.seed, "selection"));
        json scores = json::array();
        const Checkpoint* best = nullptr;
        double best_score = 0.0;
        for (const Checkpoint& ckpt : full_series.entries) {
            const double score = evaluator(ckpt);
            scores.push_back({{"iteration", ckpt.iteration}, {"score", score}});
            if (best == nullptr || score > best_score) {
                best = &ckpt;
                best_score = score;
            }
        }
        CheckpointData selected;
        selected.tensors.emplace_back("backbone.params", best->weights);
        selected.sidecar["iteration"] = best->iteration;
        selected.sidecar["backbone_id"] = cfg.backbone_id;
        selected.sidecar["config_hash"] = hash;
        save_checkpoint(class_dir / "selected", selected);
        json selection;
        selection["selected_iteration"] = best->iteration;
        selection["paper_protocol"] = cfg.shl.paper_protocol;
        selection["scores"] = std::move(scores);
        std::ofstream out(class_dir / "selection.json");
        out << selection.dump(2) << "\n";
        std::cout << cls << ": selected iteration " << best->iteration << " (score " << best_score
                  << ")\n";
    }
    write_run_meta(cfg, "finetune", std::chrono::duration<double>(Clock::now() - start).count());
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

int cmd_evaluate(const RunConfig& cfg) {
    const auto start = Clock::now();
    write_config_snapshot(cfg, cfg.output_dir);
    const DatasetManifest manifest = resolve_dataset(cfg);
    const fs::path out_dir = cfg.output_dir;

    ExperimentResult result;
    if (cfg.study.name == "score") {
        result.study = "score";
        result.seeds = {static_cast<int>(cfg.seed)};
        for (const ClassRecord& c : manifest.classes) result.class_kinds[c.name] = c.kind;
        const auto backbone =
            create_backbone(cfg.backbone_id, derive_seed(cfg.seed, "score_backbone"), 3,
                            cfg.asset_dir);
        const EvalConfig eval_cfg = cfg.eval_config();
        for (const std::string& cls : selected_classes(cfg, manifest)) {
            for (const std::string& scorer : cfg.scorers) {
                StudyCell cell;
                cell.scorer = scorer;
                cell.condition = "score";
                cell.class_name = cls;
                cell.seed = static_cast<int>(cfg.seed);
                try {
                    const CellResult r =
                        evaluate_class(*backbone, "baseline", manifest, cls, scorer, eval_cfg,
                                       cfg.heatmaps ? out_dir / "heatmaps" : fs::path());
                    cell.image_auroc = r.image_auroc;
                    cell.pixel_score = r.pixel_score;
                } catch (const std::exception& e) {
                    cell.failed = true;
                    cell.error = e.what();
                }
                result.cells.push_back(std::move(cell));
            }
        }
    } else if (cfg.study.name == "alignment") {
        result = run_alignment_study(manifest, cfg.alignment_study_config(), out_dir);
    } else if (cfg.study.name == "hl") {
        result = run_hl_study(manifest, cfg.hl_study_config(), out_dir);
    } else if (cfg.study.name == "augmentation") {
        AugmentationStudyConfig acfg;
        acfg.base = cfg.hl_study_config();
        acfg.categories.clear();
        for (const std::string& c : cfg.study.categories) {
            acfg.categories.push_back(augment_category_from_string(c));
        }
        result = run_augmentation_study(manifest, acfg, out_dir);
    } else if (cfg.study.name == "backbone") {
        BackboneStudyConfig bcfg;
        bcfg.base = cfg.hl_study_config();
        bcfg.backbone_ids = cfg.study.backbone_ids;
        result = run_backbone_study(manifest, bcfg, out_dir);
    } else {
        throw ValidationError("unknown study: " + cfg.study.name);
    }

    result.config_snapshot = run_config_to_json(cfg);
    result.config_snapshot.erase("output_dir"); // run location, not experiment identity
    {
        std::ofstream out(out_dir / "results.json");
        out << experiment_to_json(result).dump(2) << "\n";
    }
    {
        std::ofstream out(out_dir / "tables.md");
        out << experiment_to_markdown(result);
    }
    write_run_meta(cfg, "evaluate", std::chrono::duration<double>(Clock::now() - start).count());

    int failed = 0;
    for (const StudyCell& cell : result.cells) {
        if (cell.failed) {
            ++failed;
            std::cerr << "cell failed: " << cell.scorer << "/" << cell.condition << "/"
                      << cell.class_name << " seed " << cell.seed << ": " << cell.error << "\n";
        }
    }
    std::cout << "results: " << (out_dir / "results.json").string() << " (" << result.cells.size()
              << " cells, " << failed << " failed)\n";
    return failed == 0 ? 0 : 2;
}

} // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"homography-aligned anomaly detection toolkit"};
    app.require_subcommand(1);

    CommonOpts synth_opts, align_opts, finetune_opts, eval_opts;
    bool toy = false;
    std::string variant;
    CLI::App* synth = app.add_subcommand("synthesize", "generate toy datasets or variants");
    add_common(synth, synth_opts);
    synth->add_flag("--toy", toy, "generate the procedural toy dataset");
    synth->add_option("--variant", variant, "build a dataset variant: misaligned");

    bool do_train = false, do_apply = false;
    std::string checkpoint;
    CLI::App* align = app.add_subcommand("align", "train and/or apply an aligner");
    add_common(align, align_opts);
    align->add_flag("--train", do_train, "train the aligner");
    align->add_flag("--apply", do_apply, "apply an aligner to the dataset");
    align->add_option("--checkpoint", checkpoint, "aligner checkpoint base path");

    bool resume = false, paper_protocol = false;
    CLI::App* finetune = app.add_subcommand("finetune", "fine-tune the backbone");
    add_common(finetune, finetune_opts);
    finetune->add_flag("--resume", resume, "resume from the last checkpoint");
    finetune->add_flag("--paper-protocol", paper_protocol,
                       "select checkpoints on the test split");

    std::string study;
    CLI::App* evaluate = app.add_subcommand("evaluate", "run scoring or a study");
    add_common(evaluate, eval_opts);
    evaluate->add_option("--study", study, "score|alignment|hl|augmentation|backbone");

    std::vector<std::string> argv_vec = args;
    try {
        std::vector<const char*> argv;
        argv.push_back("anomalign");
        for (const std::string& a : argv_vec) argv.push_back(a.c_str());
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return 0; // --help
        std::cerr << e.what() << "\n";
        return 1;
    }

    try {
        if (synth->parsed()) {
            return cmd_synthesize(resolve_config(synth_opts), toy, variant);
        }
        if (align->parsed()) {
            return cmd_align(resolve_config(align_opts), do_train, do_apply, checkpoint);
        }
        if (finetune->parsed()) {
            CommonOpts opts = finetune_opts;
            if (paper_protocol) opts.sets.push_back("shl.paper_protocol=true");
            return cmd_finetune(resolve_config(opts), resume);
        }
        if (evaluate->parsed()) {
            CommonOpts opts = eval_opts;
            if (!study.empty()) opts.sets.push_back("study.name=" + study);
            return cmd_evaluate(resolve_config(opts));
        }
        return 1;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 1;
    } catch (const InvalidSpec& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

} // namespace anomalign
