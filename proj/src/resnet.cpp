#include "anomalign/backbone.hpp"
#include "anomalign/checkpoint.hpp"
#include "anomalign/common.hpp"

#include <filesystem>
#include <optional>

namespace anomalign {

namespace fs = std::filesystem;

// Executors for the ImageNet-pretrained families. Weights come from a
// converted container (tools/convert_backbone.py); batch norms arrive folded
// into per-channel affine layers.

namespace {

constexpr float kImagenetMean[3] = {0.485f, 0.456f, 0.406f};
constexpr float kImagenetStd[3] = {0.229f, 0.224f, 0.225f};

struct ConvBn {
    nn::Conv2d<float> conv;
    nn::ChannelAffine<float> bn;
    int grad_base = 0; // index of conv.weight within params() order

    ConvBn() = default;
    ConvBn(int in, int out, int k, int stride, int pad)
        : conv(in, out, k, stride, pad), bn(out) {}

    nn::Tensor<float> fwd_infer(const nn::Tensor<float>& x) const {
        return bn.forward(conv.forward(x));
    }

    nn::Tensor<float> fwd_train(const nn::Tensor<float>& x, TrainContext& ctx) const {
        ctx.acts.push_back(x);
        ctx.cols.emplace_back();
        nn::Tensor<float> conv_out = conv.forward(x, &ctx.cols.back());
        ctx.acts.push_back(conv_out);
        return bn.forward(conv_out);
    }

    nn::Tensor<float> bwd(const nn::Tensor<float>& d, const TrainContext& ctx, std::size_t& acts_top,
                          std::size_t& cols_top, std::vector<std::vector<float>>& grads) const {
        const nn::Tensor<float>& conv_out = ctx.acts[--acts_top];
        const nn::Tensor<float> d_conv = bn.backward(
            conv_out, d, grads[static_cast<std::size_t>(grad_base + 2)],
            grads[static_cast<std::size_t>(grad_base + 3)]);
        const std::vector<float>& cols = ctx.cols[--cols_top];
        const nn::Tensor<float>& conv_in = ctx.acts[--acts_top];
        return conv.backward(conv_in, cols, d_conv, grads[static_cast<std::size_t>(grad_base)],
                             grads[static_cast<std::size_t>(grad_base + 1)]);
    }
};

struct Block {
    std::optional<ConvBn> down; // 1x1 projection when shape changes
    std::vector<ConvBn> convs;  // 2 (basic) or 3 (bottleneck); relu between, none after last
};

nn::Tensor<float> add_tensors(const nn::Tensor<float>& a, const nn::Tensor<float>& b) {
    nn::Tensor<float> out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

class ResNetBackbone final : public TrainableBackbone {
public:
    ResNetBackbone(std::string id, bool bottleneck, const std::vector<int>& depths,
                   const std::vector<int>& planes, int width_factor, const CheckpointData& weights)
        : id_(std::move(id)), bottleneck_(bottleneck), stem_(3, 64, 7, 2, 3) {
        int inplanes = 64;
        const int expansion = bottleneck_ ? 4 : 1;
        for (std::size_t stage = 0; stage < 4; ++stage) {
            std::vector<Block> blocks;
            for (int b = 0; b < depths[stage]; ++b) {
                const int stride = (stage > 0 && b == 0) ? 2 : 1;
                const int out_ch = planes[stage] * expansion;
                Block block;
                if (stride != 1 || inplanes != out_ch) {
                    block.down = ConvBn(inplanes, out_ch, 1, stride, 0);
                }
                if (bottleneck_) {
                    const int width = planes[stage] * width_factor;
                    block.convs.emplace_back(inplanes, width, 1, 1, 0);
                    block.convs.emplace_back(width, width, 3, stride, 1);
                    block.convs.emplace_back(width, out_ch, 1, 1, 0);
                } else {
                    block.convs.emplace_back(inplanes, planes[stage], 3, stride, 1);
                    block.convs.emplace_back(planes[stage], planes[stage], 3, 1, 1);
                }
                inplanes = out_ch;
                blocks.push_back(std::move(block));
            }
            stages_[stage] = std::move(blocks);
            taps_.push_back({"layer" + std::to_string(stage + 1), inplanes,
                             4 * (1 << static_cast<int>(stage))});
        }
        embed_dim_ = inplanes;
        assign_grad_bases();
        load_weights(weights);
    }

    std::string id() const override { return id_; }
    int input_channels() const override { return 3; }
    const std::vector<TapInfo>& taps() const override { return taps_; }
    int embed_dim() const override { return embed_dim_; }

    nn::Tensor<float> preprocess(const Image& img) const override {
        if (img.channels != 3) {
            throw DimensionMismatch(id_ + " expects RGB input, got " +
                                    std::to_string(img.channels) + " channels");
        }
        nn::Tensor<float> x(3, img.height, img.width);
        const std::size_t hw = static_cast<std::size_t>(img.height) * img.width;
        for (int c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < hw; ++i) {
                x.data[c * hw + i] = (img.data[c * hw + i] - kImagenetMean[c]) / kImagenetStd[c];
            }
        }
        return x;
    }

    std::vector<FeatureMap> features(const Image& img,
                                     std::span<const std::string> tap_names) const override {
        for (const std::string& name : tap_names) tap_info(name);
        nn::Tensor<float> x = nn::relu(stem_.fwd_infer(preprocess(img)));
        x = pool_.forward(x);
        std::vector<FeatureMap> by_stage(4);
        for (std::size_t stage = 0; stage < 4; ++stage) {
            for (const Block& block : stages_[stage]) {
                const nn::Tensor<float> skip = block.down ? block.down->fwd_infer(x) : x;
                nn::Tensor<float> h = x;
                for (std::size_t i = 0; i + 1 < block.convs.size(); ++i) {
                    h = nn::relu(block.convs[i].fwd_infer(h));
                }
                h = block.convs.back().fwd_infer(h);
                x = nn::relu(add_tensors(h, skip));
            }
            by_stage[stage] = FeatureMap{"layer" + std::to_string(stage + 1), x.channels, x.height,
                                         x.width, x.data};
        }
        std::vector<FeatureMap> out;
        for (const std::string& name : tap_names) {
            out.push_back(by_stage[static_cast<std::size_t>(name[5] - '1')]);
        }
        return out;
    }

    std::vector<float> forward_embed(const nn::Tensor<float>& x0, TrainContext& ctx) const override {
        ctx.clear();
        nn::Tensor<float> pre = stem_.fwd_train(x0, ctx);
        ctx.acts.push_back(pre); // pre-relu
        nn::Tensor<float> x = nn::relu(pre);
        ctx.acts.push_back(x); // pool input
        ctx.argmax.emplace_back();
        x = pool_.forward(x, &ctx.argmax.back());
        for (std::size_t stage = 0; stage < 4; ++stage) {
            for (const Block& block : stages_[stage]) {
                const nn::Tensor<float> skip = block.down ? block.down->fwd_train(x, ctx) : x;
                nn::Tensor<float> h = x;
                for (std::size_t i = 0; i + 1 < block.convs.size(); ++i) {
                    nn::Tensor<float> p = block.convs[i].fwd_train(h, ctx);
                    ctx.acts.push_back(p); // pre-relu
                    h = nn::relu(p);
                }
                h = block.convs.back().fwd_train(h, ctx);
                nn::Tensor<float> sum = add_tensors(h, skip);
                ctx.acts.push_back(sum); // pre-relu
                x = nn::relu(sum);
            }
        }
        ctx.acts.push_back(x); // embed source (for dims)
        return nn::global_avg_pool(x).data;
    }

    void backward_embed(std::span<const float> dembed, const TrainContext& ctx,
                        std::vector<std::vector<float>>& grads) const override {
        std::size_t acts_top = ctx.acts.size();
        std::size_t cols_top = ctx.cols.size();
        std::size_t argmax_top = ctx.argmax.size();

        const nn::Tensor<float>& last = ctx.acts[--acts_top];
        nn::Tensor<float> dpool(last.channels, 1, 1);
        std::copy(dembed.begin(), dembed.end(), dpool.data.begin());
        nn::Tensor<float> d = nn::global_avg_pool_backward(last.height, last.width, dpool);

        for (int stage = 3; stage >= 0; --stage) {
            const std::vector<Block>& blocks = stages_[static_cast<std::size_t>(stage)];
            for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
                const Block& block = *it;
                const nn::Tensor<float>& sum = ctx.acts[--acts_top];
                d = nn::relu_backward(sum, d);
                nn::Tensor<float> d_main = d; // d doubles as d_skip below
                for (std::size_t ri = block.convs.size(); ri-- > 0;) {
                    d_main = block.convs[ri].bwd(d_main, ctx, acts_top, cols_top, grads);
                    if (ri > 0) {
                        const nn::Tensor<float>& pre = ctx.acts[--acts_top];
                        d_main = nn::relu_backward(pre, d_main);
                    }
                }
                if (block.down) {
                    const nn::Tensor<float> d_skip =
                        block.down->bwd(d, ctx, acts_top, cols_top, grads);
                    d = add_tensors(d_main, d_skip);
                } else {
                    d = add_tensors(d_main, d);
                }
            }
        }

        const nn::Tensor<float>& pool_in = ctx.acts[--acts_top];
        d = pool_.backward(pool_in, d, ctx.argmax[--argmax_top]);
        const nn::Tensor<float>& stem_pre = ctx.acts[--acts_top];
        d = nn::relu_backward(stem_pre, d);
        stem_.bwd(d, ctx, acts_top, cols_top, grads);
    }

    std::vector<nn::ParamRef<float>> params() override {
        std::vector<nn::ParamRef<float>> refs;
        for_each_convbn([&](ConvBn& cb, const std::string& prefix) {
            refs.push_back({prefix + ".weight", &cb.conv.weight, &cb.conv.dweight});
            refs.push_back({prefix + ".bias", &cb.conv.bias, &cb.conv.dbias});
            refs.push_back({prefix + ".scale", &cb.bn.scale, &cb.bn.dscale});
            refs.push_back({prefix + ".shift", &cb.bn.shift, &cb.bn.dshift});
        });
        return refs;
    }

    std::unique_ptr<TrainableBackbone> clone() const override {
        return std::make_unique<ResNetBackbone>(*this);
    }

private:
    template <typename Fn>
    void for_each_convbn(Fn&& fn) {
        fn(stem_, std::string("stem"));
        for (std::size_t stage = 0; stage < 4; ++stage) {
            for (std::size_t b = 0; b < stages_[stage].size(); ++b) {
                Block& block = stages_[stage][b];
                const std::string base =
                    "layer" + std::to_string(stage + 1) + "." + std::to_string(b);
                for (std::size_t i = 0; i < block.convs.size(); ++i) {
                    fn(block.convs[i], base + ".conv" + std::to_string(i + 1));
                }
                if (block.down) fn(*block.down, base + ".downsample");
            }
        }
    }

    void assign_grad_bases() {
        int index = 0;
        for_each_convbn([&](ConvBn& cb, const std::string&) {
            cb.grad_base = index;
            index += 4;
        });
    }

    void load_weights(const CheckpointData& weights) {
        for_each_convbn([&](ConvBn& cb, const std::string& prefix) {
            const std::vector<float>& w = weights.tensor(prefix + ".weight");
            if (w.size() != cb.conv.weight.size()) {
                throw DimensionMismatch("weights size mismatch for " + prefix + ".weight");
            }
            cb.conv.weight = w;
            const std::vector<float>& scale = weights.tensor(prefix + ".scale");
            const std::vector<float>& shift = weights.tensor(prefix + ".shift");
            if (scale.size() != cb.bn.scale.size() || shift.size() != cb.bn.shift.size()) {
                throw DimensionMismatch("affine size mismatch for " + prefix);
            }
            cb.bn.scale = scale;
            cb.bn.shift = shift;
        });
    }

    std::string id_;
    bool bottleneck_;
    ConvBn stem_;
    nn::MaxPool<float> pool_{3, 2, 1};
    std::array<std::vector<Block>, 4> stages_;
    std::vector<TapInfo> taps_;
    int embed_dim_ = 0;
};

} // namespace

std::unique_ptr<TrainableBackbone> make_resnet_backbone(const std::string& id,
                                                        const std::string& asset_dir,
                                                        int input_channels);

std::unique_ptr<TrainableBackbone> make_resnet_backbone(const std::string& id,
                                                        const std::string& asset_dir,
                                                        int input_channels) {
    if (input_channels != 3) {
        throw BackboneUnavailable(id + " is only available with 3 input channels");
    }
    if (asset_dir.empty() || !fs::exists(fs::path(asset_dir) / (id + ".weights"))) {
        throw BackboneUnavailable("no converted weights for '" + id + "' under asset directory '" +
                                  asset_dir + "' (run tools/convert_backbone.py)");
    }
    const CheckpointData weights = load_checkpoint(fs::path(asset_dir) / id);
    if (weights.sidecar.contains("backbone_id") &&
        weights.sidecar["backbone_id"].get<std::string>() != id) {
        throw ConfigHashMismatch("weight container was converted for '" +
                                 weights.sidecar["backbone_id"].get<std::string>() +
                                 "', requested '" + id + "'");
    }
    if (id == "resnet18") {
        return std::make_unique<ResNetBackbone>(id, false, std::vector<int>{2, 2, 2, 2},
                                                std::vector<int>{64, 128, 256, 512}, 1, weights);
    }
    if (id == "wideresnet50") {
        return std::make_unique<ResNetBackbone>(id, true, std::vector<int>{3, 4, 6, 3},
                                                std::vector<int>{64, 128, 256, 512}, 2, weights);
    }
    throw BackboneUnavailable("no executor for backbone id: " + id);
}

} // namespace anomalign
