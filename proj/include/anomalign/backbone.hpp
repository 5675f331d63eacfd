#pragma once

#include "anomalign/image.hpp"
#include "anomalign/nn.hpp"

#include <memory>
#include <string>
#include <vector>

namespace anomalign {

/// Spatial grid of feature vectors from one backbone tap.
struct FeatureMap {
    std::string layer;
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> values; // [c][y][x]

    float& at(int c, int y, int x) {
        return values[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return values[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
};

struct TapInfo {
    std::string name;
    int channels = 0;
    int stride = 0; // input resolution divided by grid resolution
};

/// Feature extractor contract shared by all backbones. Implementations keep
/// `features` pure so fitted models can score concurrently.
class Backbone {
public:
    virtual ~Backbone() = default;

    virtual std::string id() const = 0;
    virtual int input_channels() const = 0;
    virtual const std::vector<TapInfo>& taps() const = 0;
    virtual int embed_dim() const = 0;

    /// Inference-mode activations at the requested taps, in request order.
    /// Throws UnknownLayer for a tap the backbone does not expose.
    virtual std::vector<FeatureMap> features(const Image& img,
                                             std::span<const std::string> tap_names) const = 0;

    const TapInfo& tap_info(const std::string& name) const;
};

/// Opaque per-call activation store for forward/backward pairs.
struct TrainContext {
    std::vector<nn::Tensor<float>> acts;
    std::vector<std::vector<float>> cols;
    std::vector<std::vector<int>> argmax;
    void clear() {
        acts.clear();
        cols.clear();
        argmax.clear();
    }
};

/// Backbone that supports gradient updates (fine-tuning).
class TrainableBackbone : public Backbone {
public:
    /// Image -> input tensor with the backbone's normalization.
    virtual nn::Tensor<float> preprocess(const Image& img) const = 0;

    /// Forward to the pooled embedding ([embed_dim] values), caching
    /// activations in ctx for the matching backward call.
    virtual std::vector<float> forward_embed(const nn::Tensor<float>& x, TrainContext& ctx) const = 0;

    /// Backward from d(embedding). Gradients accumulate into grad_out
    /// (parallel to params() order), so batch items can run concurrently
    /// with private buffers and reduce in a fixed order afterwards.
    virtual void backward_embed(std::span<const float> dembed, const TrainContext& ctx,
                                std::vector<std::vector<float>>& grad_out) const = 0;

    virtual std::vector<nn::ParamRef<float>> params() = 0;

    /// Zeroed buffers shaped like params(), for backward_embed.
    std::vector<std::vector<float>> make_grad_buffers();

    /// Flat snapshot of all parameters (concatenated in params() order).
    std::vector<float> snapshot();
    void restore(std::span<const float> flat);

    virtual std::unique_ptr<TrainableBackbone> clone() const = 0;
};

/// Five conv stages (stride 2 each) with ReLU taps; compact enough to
/// fine-tune on a CPU. Tap names: stage1..stage5.
std::unique_ptr<TrainableBackbone> make_compact_cnn(std::uint64_t init_seed, int input_channels = 3);

/// Known backbone ids. compact_cnn is built in; the ImageNet families load
/// converted weight containers from the asset directory (ANOMALIGN_ASSETS or
/// an explicit path). Throws BackboneUnavailable when weights are missing.
const std::vector<std::string>& known_backbone_ids();

std::unique_ptr<TrainableBackbone> create_backbone(const std::string& id, std::uint64_t init_seed,
                                                   int input_channels = 3,
                                                   const std::string& asset_dir = "");

/// Default tap set for scoring: the first three stages.
std::vector<std::string> default_taps(const Backbone& backbone);

} // namespace anomalign
