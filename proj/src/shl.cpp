#include "anomalign/shl.hpp"

#include "anomalign/common.hpp"
#include "anomalign/hash.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace anomalign {

namespace fs = std::filesystem;

double shl_loss(std::span<const double, 8> pred, std::span<const double, 8> target) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
        const double d = target[i] - pred[i];
        if (!std::isfinite(d)) throw Error("shl_loss requires finite inputs");
        acc += d * d;
    }
    return acc;
}

double shl_loss(const CornerDisplacement& pred, const CornerDisplacement& target) {
    const std::array<double, 8> p = pred.flat();
    const std::array<double, 8> t = target.flat();
    return shl_loss(std::span<const double, 8>(p), std::span<const double, 8>(t));
}

void ShlConfig::validate() const {
    if (iterations < 1 || checkpoint_every < 1 || iterations % checkpoint_every != 0) {
        throw ValidationError("checkpoint_every must divide iterations");
    }
    if (batch_size < 1) throw ValidationError("batch_size must be positive");
    if (lr <= 0.0) throw ValidationError("lr must be positive");
    if (input_size < 8) throw ValidationError("input_size must be at least 8");
    const double r = effective_rho();
    if (r <= 0.0 || r > input_size / 4.0) {
        throw ValidationError("rho must lie in (0, input_size/4]");
    }
    augmentation.validate();
}

// ---------------------------------------------------------------------------
// RegressionTrainer
// ---------------------------------------------------------------------------

RegressionTrainer::RegressionTrainer(TrainableBackbone& backbone, double lr, int batch_size,
                                     int workers, std::uint64_t seed, std::string stream_tag,
                                     double output_scale)
    : backbone_(backbone), head_(backbone.embed_dim(), 8), adam_(lr),
      batch_size_(batch_size), workers_(workers), seed_(seed), tag_(std::move(stream_tag)),
      output_scale_(output_scale) {
    Rng rng(derive_seed(seed_, tag_ + "/head_init"));
    head_.init_he(rng);
}

double RegressionTrainer::step(int iteration, const BatchSampler& sampler) {
    Rng rng(derive_seed(seed_, tag_ + "/iter", static_cast<std::uint64_t>(iteration)));
    std::vector<Image> inputs;
    std::vector<std::array<double, 8>> targets;
    inputs.reserve(static_cast<std::size_t>(batch_size_));
    targets.reserve(static_cast<std::size_t>(batch_size_));
    sampler(iteration, rng, inputs, targets);
    if (inputs.size() != targets.size() || inputs.empty()) {
        throw Error("batch sampler produced a malformed batch");
    }
    const int n = static_cast<int>(inputs.size());

    std::vector<double> losses(static_cast<std::size_t>(n), 0.0);
    std::vector<std::vector<std::vector<float>>> backbone_grads(static_cast<std::size_t>(n));
    std::vector<std::vector<float>> head_dw(static_cast<std::size_t>(n));
    std::vector<std::vector<float>> head_db(static_cast<std::size_t>(n));

    nn::parallel_for(n, workers_, [&](int k) {
        TrainContext ctx;
        const nn::Tensor<float> x = backbone_.preprocess(inputs[static_cast<std::size_t>(k)]);
        const std::vector<float> embed = backbone_.forward_embed(x, ctx);
        const std::vector<float> pred = head_.forward(embed);

        std::array<double, 8> pred_d;
        for (std::size_t i = 0; i < 8; ++i) pred_d[i] = output_scale_ * pred[i];
        losses[static_cast<std::size_t>(k)] =
            shl_loss(std::span<const double, 8>(pred_d),
                     std::span<const double, 8>(targets[static_cast<std::size_t>(k)]));

        // d(mean loss)/d(head_i) = 2 (pred_i - target_i) * scale / n
        std::vector<float> dpred(8);
        for (std::size_t i = 0; i < 8; ++i) {
            dpred[i] = static_cast<float>(2.0 * (pred_d[i] - targets[static_cast<std::size_t>(k)][i]) *
                                          output_scale_ / n);
        }
        head_dw[static_cast<std::size_t>(k)].assign(head_.weight.size(), 0.0f);
        head_db[static_cast<std::size_t>(k)].assign(head_.bias.size(), 0.0f);
        const std::vector<float> dembed =
            head_.backward(embed, dpred, head_dw[static_cast<std::size_t>(k)],
                           head_db[static_cast<std::size_t>(k)]);

        backbone_grads[static_cast<std::size_t>(k)] = backbone_.make_grad_buffers();
        backbone_.backward_embed(dembed, ctx, backbone_grads[static_cast<std::size_t>(k)]);
    });

    double mean_loss = 0.0;
    for (const double l : losses) mean_loss += l;
    mean_loss /= n;
    if (!std::isfinite(mean_loss)) {
        throw NonFiniteLoss("training loss left the reals", iteration);
    }

    // fixed-order reduction keeps results independent of worker count
    std::vector<nn::ParamRef<float>> refs = backbone_.params();
    refs.push_back({"head.weight", &head_.weight, &head_.dweight});
    refs.push_back({"head.bias", &head_.bias, &head_.dbias});
    nn::zero_grads(refs);
    const std::size_t n_backbone = refs.size() - 2;
    for (int k = 0; k < n; ++k) {
        for (std::size_t p = 0; p < n_backbone; ++p) {
            std::vector<float>& dst = *refs[p].grad;
            const std::vector<float>& src = backbone_grads[static_cast<std::size_t>(k)][p];
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
        for (std::size_t i = 0; i < head_.dweight.size(); ++i) {
            head_.dweight[i] += head_dw[static_cast<std::size_t>(k)][i];
        }
        for (std::size_t i = 0; i < head_.dbias.size(); ++i) {
            head_.dbias[i] += head_db[static_cast<std::size_t>(k)][i];
        }
    }
    adam_.step(refs);
    return mean_loss;
}

std::vector<double> RegressionTrainer::predict(const Image& input) const {
    TrainContext ctx;
    const std::vector<float> embed = backbone_.forward_embed(backbone_.preprocess(input), ctx);
    const std::vector<float> out = head_.forward(embed);
    std::vector<double> scaled(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) scaled[i] = output_scale_ * out[i];
    return scaled;
}

CheckpointData RegressionTrainer::export_state(int iteration) const {
    CheckpointData state;
    state.tensors.emplace_back("backbone.params",
                               const_cast<TrainableBackbone&>(backbone_).snapshot());
    state.tensors.emplace_back("head.weight", head_.weight);
    state.tensors.emplace_back("head.bias", head_.bias);
    const auto& m = adam_.first_moments();
    const auto& v = adam_.second_moments();
    for (std::size_t i = 0; i < m.size(); ++i) {
        state.tensors.emplace_back("adam.m." + std::to_string(i), m[i]);
        state.tensors.emplace_back("adam.v." + std::to_string(i), v[i]);
    }
    state.sidecar["iteration"] = iteration;
    state.sidecar["adam_t"] = adam_.step_count();
    state.sidecar["backbone_id"] = backbone_.id();
    return state;
}

void RegressionTrainer::import_state(const CheckpointData& state) {
    backbone_.restore(state.tensor("backbone.params"));
    head_.weight = state.tensor("head.weight");
    head_.bias = state.tensor("head.bias");
    std::vector<std::vector<float>> m, v;
    for (std::size_t i = 0; state.has_tensor("adam.m." + std::to_string(i)); ++i) {
        m.push_back(state.tensor("adam.m." + std::to_string(i)));
        v.push_back(state.tensor("adam.v." + std::to_string(i)));
    }
    adam_.restore(state.sidecar.at("adam_t").get<long>(), std::move(m), std::move(v));
}

// ---------------------------------------------------------------------------
// ShlTrainer
// ---------------------------------------------------------------------------

namespace {

std::vector<Image> fit_images(std::vector<Image> images, int size) {
    for (Image& img : images) {
        if (img.width != size || img.height != size) img = resize_bilinear(img, size, size);
    }
    return images;
}

} // namespace

ShlTrainer::ShlTrainer(TrainableBackbone& backbone, std::vector<Image> normals,
                       const ShlConfig& cfg, TrainHooks hooks)
    : backbone_(backbone), normals_(fit_images(std::move(normals), cfg.input_size)), cfg_(cfg),
      hooks_(std::move(hooks)),
      trainer_(backbone, cfg.lr, cfg.batch_size, cfg.workers, cfg.seed, "shl",
               cfg.input_size / 4.0) {
    cfg_.validate();
    if (normals_.empty()) throw InsufficientNormals("fine-tuning needs at least one normal image");
}

void ShlTrainer::run_to(int target) {
    const ImageFrame frame(cfg_.input_size, cfg_.input_size);
    const double rho = cfg_.effective_rho();
    const RegressionTrainer::BatchSampler sampler =
        [&](int, Rng& rng, std::vector<Image>& inputs, std::vector<std::array<double, 8>>& targets) {
            for (int b = 0; b < cfg_.batch_size; ++b) {
                const int idx = rng.uniform_int(static_cast<int>(normals_.size()));
                Image img = augment(normals_[static_cast<std::size_t>(idx)], cfg_.augmentation, rng);
                if (hooks_.on_augment) hooks_.on_augment(cfg_.augmentation);
                const CornerDisplacement d = sample_inward_perturbation(rng, rho, frame);
                inputs.push_back(warp_image(img, displacement_to_homography(d, frame),
                                            Fill::reflection()));
                targets.push_back(d.flat());
            }
        };

    while (iteration_ < target) {
        const int iter = ++iteration_;
        const double loss = trainer_.step(iter, sampler);
        series_.loss_curve.push_back(loss);
        if (hooks_.on_progress) hooks_.on_progress(iter, loss);
        if (iter % cfg_.checkpoint_every == 0) {
            series_.entries.push_back({iter, backbone_.snapshot(), loss});
        }
    }
}

CheckpointData ShlTrainer::export_state() const {
    CheckpointData state = trainer_.export_state(iteration_);
    state.sidecar["loss_curve"] = series_.loss_curve;
    return state;
}

void ShlTrainer::import_state(const CheckpointData& state) {
    trainer_.import_state(state);
    iteration_ = state.sidecar.at("iteration").get<int>();
    series_.loss_curve.clear();
    if (state.sidecar.contains("loss_curve")) {
        series_.loss_curve = state.sidecar.at("loss_curve").get<std::vector<double>>();
    }
    series_.entries.clear();
}

CheckpointSeries finetune_backbone(TrainableBackbone& backbone, const std::vector<Image>& normals,
                                   const ShlConfig& cfg, const TrainHooks& hooks) {
    ShlTrainer trainer(backbone, normals, cfg, hooks);
    trainer.run_to(cfg.iterations);
    return trainer.series();
}

const Checkpoint& select_checkpoint(const CheckpointSeries& series,
                                    const std::function<double(const Checkpoint&)>& evaluator) {
    if (series.entries.empty()) throw Error("cannot select from an empty checkpoint series");
    std::size_t best = 0;
    double best_score = evaluator(series.entries[0]);
    for (std::size_t i = 1; i < series.entries.size(); ++i) {
        const double score = evaluator(series.entries[i]);
        if (score > best_score) { // strict: ties keep the earliest
            best = i;
            best_score = score;
        }
    }
    return series.entries[best];
}

// ---------------------------------------------------------------------------
// Gradient validation
// ---------------------------------------------------------------------------

double grad_check_head(const nn::Linear<float>& head,
                       std::span<const nn::Tensor<double>> probe_features,
                       std::span<const CornerDisplacement> targets, double step) {
    if (probe_features.size() != targets.size() || probe_features.empty()) {
        throw DimensionMismatch("grad check needs matching probe features and targets");
    }
    nn::Linear<double> lin(head.in_dim, head.out_dim);
    std::copy(head.weight.begin(), head.weight.end(), lin.weight.begin());
    std::copy(head.bias.begin(), head.bias.end(), lin.bias.begin());

    const auto total_loss = [&] {
        double acc = 0.0;
        for (std::size_t k = 0; k < probe_features.size(); ++k) {
            const nn::Tensor<double> pooled = nn::global_avg_pool(probe_features[k]);
            const std::vector<double> pred = lin.forward(pooled.data);
            std::array<double, 8> pred_a;
            std::copy(pred.begin(), pred.end(), pred_a.begin());
            const std::array<double, 8> t = targets[k].flat();
            acc += shl_loss(std::span<const double, 8>(pred_a), std::span<const double, 8>(t));
        }
        return acc / static_cast<double>(probe_features.size());
    };

    // analytic gradients through the same templated code path
    std::vector<double> dw(lin.weight.size(), 0.0), db(lin.bias.size(), 0.0);
    for (std::size_t k = 0; k < probe_features.size(); ++k) {
        const nn::Tensor<double> pooled = nn::global_avg_pool(probe_features[k]);
        const std::vector<double> pred = lin.forward(pooled.data);
        const std::array<double, 8> t = targets[k].flat();
        std::vector<double> dpred(8);
        for (std::size_t i = 0; i < 8; ++i) {
            dpred[i] = 2.0 * (pred[i] - t[i]) / static_cast<double>(probe_features.size());
        }
        lin.backward(pooled.data, dpred, dw, db);
    }

    double max_rel = 0.0;
    const auto check = [&](std::vector<double>& param, const std::vector<double>& analytic) {
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double keep = param[i];
            param[i] = keep + step;
            const double up = total_loss();
            param[i] = keep - step;
            const double down = total_loss();
            param[i] = keep;
            const double fd = (up - down) / (2.0 * step);
            const double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-8});
            max_rel = std::max(max_rel, std::abs(fd - analytic[i]) / denom);
        }
    };
    check(lin.weight, dw);
    check(lin.bias, db);
    return max_rel;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void save_checkpoint_series(const CheckpointSeries& series, const std::string& backbone_id,
                            const std::string& config_hash, const fs::path& dir) {
    fs::create_directories(dir);
    nlohmann::json index;
    index["schema_version"] = 1;
    index["backbone_id"] = backbone_id;
    index["config_hash"] = config_hash;
    index["loss_curve"] = series.loss_curve;
    nlohmann::json entries = nlohmann::json::array();
    for (const Checkpoint& ckpt : series.entries) {
        char name[32];
        std::snprintf(name, sizeof(name), "ckpt_%06d", ckpt.iteration);
        CheckpointData data;
        data.tensors.emplace_back("backbone.params", ckpt.weights);
        data.sidecar["iteration"] = ckpt.iteration;
        data.sidecar["loss"] = ckpt.loss;
        data.sidecar["backbone_id"] = backbone_id;
        data.sidecar["config_hash"] = config_hash;
        save_checkpoint(dir / name, data);
        entries.push_back({{"iteration", ckpt.iteration}, {"loss", ckpt.loss}, {"file", name}});
    }
    index["entries"] = std::move(entries);
    std::ofstream out(dir / "series.json");
    if (!out) throw IoError("cannot write series index under " + dir.string());
    out << index.dump(2) << "\n";
}

CheckpointSeries load_checkpoint_series(const fs::path& dir, std::string* backbone_id,
                                        std::string* config_hash) {
    std::ifstream in(dir / "series.json");
    if (!in) throw IoError("missing series index: " + (dir / "series.json").string());
    nlohmann::json index;
    in >> index;
    if (backbone_id) *backbone_id = index.value("backbone_id", "");
    if (config_hash) *config_hash = index.value("config_hash", "");

    CheckpointSeries series;
    series.loss_curve = index.value("loss_curve", std::vector<double>{});
    for (const nlohmann::json& entry : index.at("entries")) {
        const CheckpointData data = load_checkpoint(dir / entry.at("file").get<std::string>());
        series.entries.push_back({entry.at("iteration").get<int>(),
                                  data.tensor("backbone.params"),
                                  entry.at("loss").get<double>()});
    }
    return series;
}

} // namespace anomalign
