#include "anomalign/backbone.hpp"

#include "anomalign/common.hpp"

#include <algorithm>
#include <cstdlib>

namespace anomalign {

const TapInfo& Backbone::tap_info(const std::string& name) const {
    for (const TapInfo& t : taps()) {
        if (t.name == name) return t;
    }
    throw UnknownLayer("backbone " + id() + " has no tap named " + name);
}

std::vector<float> TrainableBackbone::snapshot() {
    std::vector<float> flat;
    for (const nn::ParamRef<float>& r : params()) {
        flat.insert(flat.end(), r.value->begin(), r.value->end());
    }
    return flat;
}

void TrainableBackbone::restore(std::span<const float> flat) {
    std::size_t pos = 0;
    for (const nn::ParamRef<float>& r : params()) {
        if (pos + r.value->size() > flat.size()) {
            throw DimensionMismatch("snapshot size does not match backbone parameters");
        }
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                  flat.begin() + static_cast<std::ptrdiff_t>(pos + r.value->size()),
                  r.value->begin());
        pos += r.value->size();
    }
    if (pos != flat.size()) {
        throw DimensionMismatch("snapshot size does not match backbone parameters");
    }
}

std::vector<std::vector<float>> TrainableBackbone::make_grad_buffers() {
    std::vector<std::vector<float>> buffers;
    for (const nn::ParamRef<float>& r : params()) {
        buffers.emplace_back(r.value->size(), 0.0f);
    }
    return buffers;
}

// ---------------------------------------------------------------------------
// compact_cnn
// ---------------------------------------------------------------------------

namespace {

constexpr int kStageChannels[5] = {16, 32, 64, 96, 128};

class CompactCnn final : public TrainableBackbone {
public:
    CompactCnn(std::uint64_t init_seed, int input_channels) : in_ch_(input_channels) {
        int in = input_channels;
        Rng rng(derive_seed(init_seed, "compact_cnn_init"));
        for (int s = 0; s < 5; ++s) {
            convs_[static_cast<std::size_t>(s)] = nn::Conv2d<float>(in, kStageChannels[s], 3, 2, 1);
            convs_[static_cast<std::size_t>(s)].init_he(rng);
            in = kStageChannels[s];
        }
        taps_.clear();
        for (int s = 0; s < 5; ++s) {
            taps_.push_back({"stage" + std::to_string(s + 1), kStageChannels[s], 1 << (s + 1)});
        }
    }

    std::string id() const override { return "compact_cnn"; }
    int input_channels() const override { return in_ch_; }
    const std::vector<TapInfo>& taps() const override { return taps_; }
    int embed_dim() const override { return kStageChannels[4]; }

    nn::Tensor<float> preprocess(const Image& img) const override {
        Image src = img;
        if (img.channels == 1 && in_ch_ == 3) {
            src = Image(img.width, img.height, 3);
            for (int c = 0; c < 3; ++c)
                std::copy(img.data.begin(), img.data.end(),
                          src.data.begin() + static_cast<std::ptrdiff_t>(c * img.width * img.height));
        }
        if (src.channels != in_ch_) {
            throw DimensionMismatch("backbone expects " + std::to_string(in_ch_) + " channels, got " +
                                    std::to_string(src.channels));
        }
        nn::Tensor<float> x(src.channels, src.height, src.width);
        for (std::size_t i = 0; i < src.data.size(); ++i) {
            x.data[i] = (src.data[i] - 0.5f) * 2.0f;
        }
        return x;
    }

    std::vector<FeatureMap> features(const Image& img,
                                     std::span<const std::string> tap_names) const override {
        for (const std::string& name : tap_names) tap_info(name); // validate first
        nn::Tensor<float> x = preprocess(img);
        std::vector<FeatureMap> by_stage(5);
        for (int s = 0; s < 5; ++s) {
            x = nn::relu(convs_[static_cast<std::size_t>(s)].forward(x));
            by_stage[static_cast<std::size_t>(s)] =
                FeatureMap{"stage" + std::to_string(s + 1), x.channels, x.height, x.width, x.data};
        }
        std::vector<FeatureMap> out;
        out.reserve(tap_names.size());
        for (const std::string& name : tap_names) {
            const int idx = name[5] - '1';
            out.push_back(by_stage[static_cast<std::size_t>(idx)]);
        }
        return out;
    }

    std::vector<float> forward_embed(const nn::Tensor<float>& x, TrainContext& ctx) const override {
        ctx.clear();
        ctx.acts.reserve(11);
        ctx.cols.resize(5);
        ctx.acts.push_back(x);
        nn::Tensor<float> cur = x;
        for (int s = 0; s < 5; ++s) {
            nn::Tensor<float> pre = convs_[static_cast<std::size_t>(s)].forward(cur, &ctx.cols[static_cast<std::size_t>(s)]);
            ctx.acts.push_back(pre);
            cur = nn::relu(pre);
            ctx.acts.push_back(cur);
        }
        const nn::Tensor<float> pooled = nn::global_avg_pool(cur);
        return pooled.data;
    }

    void backward_embed(std::span<const float> dembed, const TrainContext& ctx,
                        std::vector<std::vector<float>>& grad_out) const override {
        const nn::Tensor<float>& last = ctx.acts.back();
        nn::Tensor<float> dpool(last.channels, 1, 1);
        std::copy(dembed.begin(), dembed.end(), dpool.data.begin());
        nn::Tensor<float> d = nn::global_avg_pool_backward(last.height, last.width, dpool);
        for (int s = 4; s >= 0; --s) {
            const nn::Tensor<float>& pre = ctx.acts[static_cast<std::size_t>(1 + 2 * s)];
            const nn::Tensor<float>& input = ctx.acts[static_cast<std::size_t>(2 * s)];
            d = nn::relu_backward(pre, d);
            d = convs_[static_cast<std::size_t>(s)].backward(
                input, ctx.cols[static_cast<std::size_t>(s)], d,
                grad_out[static_cast<std::size_t>(2 * s)], grad_out[static_cast<std::size_t>(2 * s + 1)]);
        }
    }

    std::vector<nn::ParamRef<float>> params() override {
        std::vector<nn::ParamRef<float>> refs;
        for (int s = 0; s < 5; ++s) {
            nn::Conv2d<float>& conv = convs_[static_cast<std::size_t>(s)];
            refs.push_back({"conv" + std::to_string(s + 1) + ".weight", &conv.weight, &conv.dweight});
            refs.push_back({"conv" + std::to_string(s + 1) + ".bias", &conv.bias, &conv.dbias});
        }
        return refs;
    }

    std::unique_ptr<TrainableBackbone> clone() const override {
        return std::make_unique<CompactCnn>(*this);
    }

private:
    int in_ch_;
    std::array<nn::Conv2d<float>, 5> convs_;
    std::vector<TapInfo> taps_;
};

} // namespace

std::unique_ptr<TrainableBackbone> make_compact_cnn(std::uint64_t init_seed, int input_channels) {
    return std::make_unique<CompactCnn>(init_seed, input_channels);
}

// defined in resnet.cpp
std::unique_ptr<TrainableBackbone> make_resnet_backbone(const std::string& id,
                                                        const std::string& asset_dir,
                                                        int input_channels);

const std::vector<std::string>& known_backbone_ids() {
    static const std::vector<std::string> ids = {"compact_cnn", "resnet18", "wideresnet50",
                                                 "efficientnet_b5"};
    return ids;
}

std::unique_ptr<TrainableBackbone> create_backbone(const std::string& id, std::uint64_t init_seed,
                                                   int input_channels, const std::string& asset_dir) {
    if (std::find(known_backbone_ids().begin(), known_backbone_ids().end(), id) ==
        known_backbone_ids().end()) {
        throw ValidationError("unknown backbone id: " + id);
    }
    if (id == "compact_cnn") return make_compact_cnn(init_seed, input_channels);

    std::string assets = asset_dir;
    if (assets.empty()) {
        if (const char* env = std::getenv("ANOMALIGN_ASSETS")) assets = env;
    }
    if (id == "efficientnet_b5") {
        throw BackboneUnavailable("no executor ships for efficientnet_b5; use resnet18, "
                                  "wideresnet50 or compact_cnn");
    }
    return make_resnet_backbone(id, assets, input_channels);
}

std::vector<std::string> default_taps(const Backbone& backbone) {
    std::vector<std::string> names;
    const auto& all = backbone.taps();
    for (std::size_t i = 0; i < std::min<std::size_t>(3, all.size()); ++i) {
        names.push_back(all[i].name);
    }
    return names;
}

} // namespace anomalign
