#pragma once

#include "anomalign/backbone.hpp"
#include "anomalign/checkpoint.hpp"
#include "anomalign/geometry.hpp"
#include "anomalign/synthesis.hpp"

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace anomalign {

/// Corner-regression loss: the sum over the four corners of the squared
/// Euclidean norm of (target - prediction), i.e. eight scalar squares.
double shl_loss(const CornerDisplacement& pred, const CornerDisplacement& target);
double shl_loss(std::span<const double, 8> pred, std::span<const double, 8> target);

struct ShlConfig {
    double rho = 0.0; // 0 -> 25% of input_size
    int iterations = 3000;
    int checkpoint_every = 100;
    int batch_size = 8;
    double lr = 1e-4;
    AugmentationPolicy augmentation;
    std::uint64_t seed = 0;
    std::string backbone_id = "compact_cnn";
    int input_size = 128;
    int workers = 1;

    double effective_rho() const { return rho > 0.0 ? rho : input_size * 0.25; }
    void validate() const;
};

struct Checkpoint {
    int iteration = 0;
    std::vector<float> weights; // backbone snapshot
    double loss = 0.0;
};

struct CheckpointSeries {
    std::vector<Checkpoint> entries;
    std::vector<double> loss_curve; // one entry per iteration
};

struct TrainHooks {
    std::function<void(int iteration, double loss)> on_progress;
    std::function<void(const AugmentationPolicy&)> on_augment; // instrumentation
};

// ---------------------------------------------------------------------------
// Shared regression trainer (used by SHL and the aligners)
// ---------------------------------------------------------------------------

/// One optimizer step owns: backbone + an 8-output linear head on the pooled
/// embedding. Per-iteration randomness derives from (seed, tag, iteration),
/// so runs are resumable and independent of worker count.
class RegressionTrainer {
public:
    /// output_scale maps the head's normalized outputs to raw pixel
    /// displacements (predictions = scale * head(x)); the loss is computed
    /// on the raw scale.
    RegressionTrainer(TrainableBackbone& backbone, double lr, int batch_size, int workers,
                      std::uint64_t seed, std::string stream_tag, double output_scale = 1.0);

    /// Fills `inputs`/`targets` (batch_size each) for one iteration.
    using BatchSampler =
        std::function<void(int iteration, Rng& rng, std::vector<Image>& inputs,
                           std::vector<std::array<double, 8>>& targets)>;

    /// Runs iteration `iteration` (1-based); returns the mean batch loss.
    /// Throws NonFiniteLoss with the step index when the loss leaves R.
    double step(int iteration, const BatchSampler& sampler);

    const nn::Linear<float>& head() const { return head_; }
    std::vector<double> predict(const Image& input) const;

    /// Full continuation state: head + optimizer moments + backbone weights.
    CheckpointData export_state(int iteration) const;
    void import_state(const CheckpointData& state);

private:
    TrainableBackbone& backbone_;
    nn::Linear<float> head_;
    nn::Adam<float> adam_;
    int batch_size_;
    int workers_;
    std::uint64_t seed_;
    std::string tag_;
    double output_scale_;
};

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

/// Incremental fine-tuning driver so the CLI can checkpoint/resume.
class ShlTrainer {
public:
    /// Normal images are resized to cfg.input_size on construction; they are
    /// assumed aligned by the caller.
    ShlTrainer(TrainableBackbone& backbone, std::vector<Image> normals, const ShlConfig& cfg,
               TrainHooks hooks = {});

    /// Advances training through iteration `target` (inclusive), snapshotting
    /// at every multiple of checkpoint_every.
    void run_to(int target);

    int iteration() const { return iteration_; }
    const CheckpointSeries& series() const { return series_; }

    CheckpointData export_state() const;
    /// Restores a run mid-flight; series entries up to the state's iteration
    /// must be re-attached by the caller (the CLI reloads them from disk).
    void import_state(const CheckpointData& state);

private:
    TrainableBackbone& backbone_;
    std::vector<Image> normals_;
    ShlConfig cfg_;
    TrainHooks hooks_;
    RegressionTrainer trainer_;
    CheckpointSeries series_;
    int iteration_ = 0;
};

/// Runs the full schedule and returns the checkpoint series.
CheckpointSeries finetune_backbone(TrainableBackbone& backbone, const std::vector<Image>& normals,
                                   const ShlConfig& cfg, const TrainHooks& hooks = {});

/// Argmax of the evaluator over checkpoints; ties break toward the earliest
/// iteration.
const Checkpoint& select_checkpoint(const CheckpointSeries& series,
                                    const std::function<double(const Checkpoint&)>& evaluator);

// ---------------------------------------------------------------------------
// Gradient validation
// ---------------------------------------------------------------------------

/// Validates the analytic gradient of the regression pathway (GAP -> linear
/// head -> loss) against central finite differences with the given step, in
/// double precision. Returns the max relative error over all head params.
double grad_check_head(const nn::Linear<float>& head,
                       std::span<const nn::Tensor<double>> probe_features,
                       std::span<const CornerDisplacement> targets, double step = 1e-4);

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Directory layout: series.json index plus one container per checkpoint.
void save_checkpoint_series(const CheckpointSeries& series, const std::string& backbone_id,
                            const std::string& config_hash, const std::filesystem::path& dir);
CheckpointSeries load_checkpoint_series(const std::filesystem::path& dir,
                                        std::string* backbone_id = nullptr,
                                        std::string* config_hash = nullptr);

} // namespace anomalign
