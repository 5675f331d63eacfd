#include "anomalign/alignment.hpp"

#include "anomalign/common.hpp"

#include <cmath>

namespace anomalign {

namespace fs = std::filesystem;

std::string to_string(AlignerMode m) {
    return m == AlignerMode::Template ? "template" : "pairwise_rotation";
}

AlignerMode aligner_mode_from_string(const std::string& s) {
    if (s == "template") return AlignerMode::Template;
    if (s == "pairwise_rotation") return AlignerMode::PairwiseRotation;
    throw ValidationError("unknown aligner mode: " + s);
}

void AlignerConfig::validate() const {
    if (iterations < 1 || batch_size < 1) throw ValidationError("aligner iterations/batch must be positive");
    if (lr <= 0.0) throw ValidationError("lr must be positive");
    if (input_size < 8) throw ValidationError("input_size must be at least 8");
    if (mode == AlignerMode::Template) {
        const double r = effective_rho();
        if (r <= 0.0 || r > input_size / 4.0) throw ValidationError("rho must lie in (0, input_size/4]");
    } else {
        if (max_rotation_deg <= 0.0 || max_rotation_deg > 180.0) {
            throw ValidationError("max_rotation_deg must lie in (0, 180]");
        }
    }
    if (snap_deg < 0.0) throw ValidationError("snap_deg must be nonnegative");
    augmentation.validate();
}

namespace {

std::vector<Image> fit_images(std::vector<Image> images, int size) {
    for (Image& img : images) {
        if (img.width != size || img.height != size) img = resize_bilinear(img, size, size);
    }
    return images;
}

AlignerModel finish_model(std::unique_ptr<TrainableBackbone> backbone, RegressionTrainer& trainer,
                          const AlignerConfig& cfg, std::vector<double> loss_curve) {
    AlignerModel model;
    model.backbone = std::move(backbone);
    model.head = trainer.head();
    model.mode = cfg.mode;
    model.input_size = cfg.input_size;
    model.template_index = cfg.template_index;
    model.snap_deg = cfg.snap_deg;
    model.loss_curve = std::move(loss_curve);
    model.config_snapshot = {{"mode", to_string(cfg.mode)},
                             {"iterations", cfg.iterations},
                             {"batch_size", cfg.batch_size},
                             {"lr", cfg.lr},
                             {"rho", cfg.effective_rho()},
                             {"max_rotation_deg", cfg.max_rotation_deg},
                             {"seed", cfg.seed},
                             {"input_size", cfg.input_size},
                             {"template_index", cfg.template_index},
                             {"snap_deg", cfg.snap_deg},
                             {"backbone_id", cfg.backbone_id},
                             {"augmentation_category", to_string(cfg.augmentation.category)}};
    return model;
}

} // namespace

int pick_template_index(std::uint64_t seed, int n_train) {
    if (n_train < 1) throw InsufficientNormals("template selection needs at least one normal");
    Rng rng(derive_seed(seed, "template_choice"));
    return rng.uniform_int(n_train);
}

AlignerModel train_template_aligner(const std::vector<Image>& normals, const Image& template_img,
                                    const AlignerConfig& cfg, const TrainHooks& hooks) {
    cfg.validate();
    if (normals.empty()) throw InsufficientNormals("template aligner needs normal images");

    const Image tpl = fit_images({template_img}, cfg.input_size)[0];
    const ImageFrame frame(cfg.input_size, cfg.input_size);
    const double rho = cfg.effective_rho();

    std::unique_ptr<TrainableBackbone> backbone =
        create_backbone(cfg.backbone_id, derive_seed(cfg.seed, "aligner_backbone"), 3);
    RegressionTrainer trainer(*backbone, cfg.lr, cfg.batch_size, cfg.workers, cfg.seed,
                              "template_aligner", cfg.input_size / 4.0);

    std::vector<double> loss_curve;
    const RegressionTrainer::BatchSampler sampler =
        [&](int, Rng& rng, std::vector<Image>& inputs, std::vector<std::array<double, 8>>& targets) {
            for (int b = 0; b < cfg.batch_size; ++b) {
                Image img = augment(tpl, cfg.augmentation, rng);
                if (hooks.on_augment) hooks.on_augment(cfg.augmentation);
                const CornerDisplacement d = sample_inward_perturbation(rng, rho, frame);
                inputs.push_back(warp_image(img, displacement_to_homography(d, frame),
                                            Fill::reflection()));
                targets.push_back(d.flat());
            }
        };

    for (int iter = 1; iter <= cfg.iterations; ++iter) {
        const double loss = trainer.step(iter, sampler);
        loss_curve.push_back(loss);
        if (hooks.on_progress) hooks.on_progress(iter, loss);
    }
    return finish_model(std::move(backbone), trainer, cfg, std::move(loss_curve));
}

AlignerModel train_pairwise_aligner(const std::vector<Image>& normals, const AlignerConfig& cfg,
                                    const TrainHooks& hooks) {
    cfg.validate();
    if (cfg.mode != AlignerMode::PairwiseRotation) {
        throw ValidationError("train_pairwise_aligner requires pairwise_rotation mode");
    }
    if (normals.empty()) throw InsufficientNormals("pairwise aligner needs normal images");

    const std::vector<Image> images = fit_images(normals, cfg.input_size);
    const ImageFrame frame(cfg.input_size, cfg.input_size);

    std::unique_ptr<TrainableBackbone> backbone =
        create_backbone(cfg.backbone_id, derive_seed(cfg.seed, "aligner_backbone"), 6);
    RegressionTrainer trainer(*backbone, cfg.lr, cfg.batch_size, cfg.workers, cfg.seed,
                              "pairwise_aligner", cfg.input_size / 4.0);

    std::vector<double> loss_curve;
    const RegressionTrainer::BatchSampler sampler =
        [&](int, Rng& rng, std::vector<Image>& inputs, std::vector<std::array<double, 8>>& targets) {
            for (int b = 0; b < cfg.batch_size; ++b) {
                const int idx = rng.uniform_int(static_cast<int>(images.size()));
                const Image& base = images[static_cast<std::size_t>(idx)];
                // the halves are augmented independently so appearance
                // differences between reference and target do not mislead
                Image first = augment(base, cfg.augmentation, rng);
                Image second = augment(base, cfg.augmentation, rng);
                if (hooks.on_augment) hooks.on_augment(cfg.augmentation);
                const double angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
                second = warp_image(second, rotation_about_center(angle, frame), Fill::reflection());
                inputs.push_back(concat_channels(first, second));
                targets.push_back(rotation_to_displacement(angle, frame).flat());
            }
        };

    for (int iter = 1; iter <= cfg.iterations; ++iter) {
        const double loss = trainer.step(iter, sampler);
        loss_curve.push_back(loss);
        if (hooks.on_progress) hooks.on_progress(iter, loss);
    }
    return finish_model(std::move(backbone), trainer, cfg, std::move(loss_curve));
}

std::pair<CornerDisplacement, HomographyMatrix> estimate_alignment(const AlignerModel& model,
                                                                   const Image& img,
                                                                   const Image* reference) {
    const bool pairwise = model.mode == AlignerMode::PairwiseRotation;
    if (pairwise && reference == nullptr) {
        throw ValidationError("pairwise aligner needs a reference image");
    }
    if (!pairwise && reference != nullptr) {
        throw ValidationError("template aligner takes no reference image");
    }

    Image input = img;
    if (input.width != model.input_size || input.height != model.input_size) {
        input = resize_bilinear(input, model.input_size, model.input_size);
    }
    if (pairwise) {
        Image ref = *reference;
        if (ref.width != model.input_size || ref.height != model.input_size) {
            ref = resize_bilinear(ref, model.input_size, model.input_size);
        }
        input = concat_channels(ref, input);
    }

    TrainContext ctx;
    const std::vector<float> embed = model.backbone->forward_embed(model.backbone->preprocess(input), ctx);
    const std::vector<float> out = model.head.forward(embed);
    const double scale = model.input_size / 4.0;
    std::array<double, 8> flat;
    for (std::size_t i = 0; i < 8; ++i) flat[i] = scale * out[i];
    const CornerDisplacement d = CornerDisplacement::from_flat(flat);
    const ImageFrame frame(model.input_size, model.input_size);
    return {d, displacement_to_homography(d, frame)};
}

HomographyMatrix alignment_correction(const AlignerModel& model, const Image& img,
                                      const Image* reference) {
    try {
        const auto [d, h] = estimate_alignment(model, img, reference);
        const ImageFrame model_frame(model.input_size, model.input_size);
        if (model.mode == AlignerMode::PairwiseRotation) {
            // the angle is resolution-free; rebuild the rotation about the
            // actual image center
            const double angle = rotation_from_displacement(d, model_frame);
            if (std::abs(angle) < model.snap_deg) return HomographyMatrix::identity();
            return rotation_about_center(-angle, ImageFrame(img.width, img.height));
        }
        HomographyMatrix correction = invert(h);
        if (img.width != model.input_size || img.height != model.input_size) {
            // conjugate into the image frame: S^-1 * H * S with S mapping
            // image pixel centers onto the model grid
            const double sx = static_cast<double>(model.input_size - 1) / (img.width - 1);
            const double sy = static_cast<double>(model.input_size - 1) / (img.height - 1);
            const HomographyMatrix to_model =
                HomographyMatrix::from_raw({sx, 0, 0, 0, sy, 0, 0, 0, 1});
            correction = compose(invert(to_model), compose(correction, to_model));
        }
        return correction;
    } catch (const DegenerateCorrespondence& e) {
        throw AlignmentFailure(std::string("degenerate prediction: ") + e.what());
    } catch (const PointAtInfinity& e) {
        throw AlignmentFailure(std::string("prediction at infinity: ") + e.what());
    }
}

BuildResult build_aligned_dataset(const DatasetManifest& src, const AlignerModel& model,
                                  const Image& template_img, const fs::path& out_dir) {
    const Image* reference = model.mode == AlignerMode::PairwiseRotation ? &template_img : nullptr;
    return build_aligned_dataset_with(
        src, [&](const Image& img) { return alignment_correction(model, img, reference); }, out_dir);
}

void save_aligner(const AlignerModel& model, const fs::path& base) {
    CheckpointData data;
    data.tensors.emplace_back("backbone.params", model.backbone->snapshot());
    data.tensors.emplace_back("head.weight", model.head.weight);
    data.tensors.emplace_back("head.bias", model.head.bias);
    data.sidecar["kind"] = "aligner";
    data.sidecar["mode"] = to_string(model.mode);
    data.sidecar["input_size"] = model.input_size;
    data.sidecar["template_index"] = model.template_index;
    data.sidecar["snap_deg"] = model.snap_deg;
    data.sidecar["backbone_id"] = model.backbone->id();
    data.sidecar["loss_curve"] = model.loss_curve;
    data.sidecar["config"] = model.config_snapshot;
    save_checkpoint(base, data);
}

AlignerModel load_aligner(const fs::path& base) {
    const CheckpointData data = load_checkpoint(base);
    if (data.sidecar.value("kind", "") != "aligner") {
        throw ValidationError("checkpoint is not an aligner: " + base.string());
    }
    AlignerModel model;
    model.mode = aligner_mode_from_string(data.sidecar.at("mode").get<std::string>());
    model.input_size = data.sidecar.at("input_size").get<int>();
    model.template_index = data.sidecar.value("template_index", -1);
    model.snap_deg = data.sidecar.value("snap_deg", 0.5);
    if (data.sidecar.contains("loss_curve")) {
        model.loss_curve = data.sidecar.at("loss_curve").get<std::vector<double>>();
    }
    model.config_snapshot = data.sidecar.value("config", nlohmann::json::object());

    const std::string backbone_id = data.sidecar.at("backbone_id").get<std::string>();
    const int in_ch = model.mode == AlignerMode::PairwiseRotation ? 6 : 3;
    model.backbone = create_backbone(backbone_id, 0, in_ch);
    model.backbone->restore(data.tensor("backbone.params"));
    model.head = nn::Linear<float>(model.backbone->embed_dim(), 8);
    model.head.weight = data.tensor("head.weight");
    model.head.bias = data.tensor("head.bias");
    return model;
}

} // namespace anomalign
