#include "anomalign/scorers.hpp"

#include "anomalign/common.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace anomalign {

namespace fs = std::filesystem;

void require_compatible(const ModelMeta& model, const ModelMeta& extractor) {
    if (model.config_hash != extractor.config_hash) {
        throw ConfigHashMismatch("model was fitted under config " + model.config_hash +
                                 " but the extractor reports " + extractor.config_hash);
    }
    if (model.backbone_id != extractor.backbone_id || model.checkpoint_id != extractor.checkpoint_id) {
        throw ConfigHashMismatch("model provenance (" + model.backbone_id + "/" + model.checkpoint_id +
                                 ") does not match the extractor (" + extractor.backbone_id + "/" +
                                 extractor.checkpoint_id + ")");
    }
    if (model.input_width != extractor.input_width || model.input_height != extractor.input_height) {
        throw DimensionMismatch("model input resolution differs from the extractor");
    }
}

// ---------------------------------------------------------------------------
// Feature assembly
// ---------------------------------------------------------------------------

std::vector<FeatureMap> extract_features(const Backbone& backbone, const Image& img,
                                         std::span<const std::string> taps) {
    std::vector<FeatureMap> maps = backbone.features(img, taps);
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const int stride = backbone.tap_info(taps[i]).stride;
        const int want_w = (img.width + stride - 1) / stride;
        const int want_h = (img.height + stride - 1) / stride;
        if (maps[i].width != want_w || maps[i].height != want_h) {
            throw DimensionMismatch("tap " + taps[i] + " grid does not match its stride table");
        }
    }
    return maps;
}

namespace {

FeatureMap resize_map(const FeatureMap& map, int grid_h, int grid_w) {
    if (map.height == grid_h && map.width == grid_w) return map;
    Image img;
    img.width = map.width;
    img.height = map.height;
    img.channels = map.channels;
    img.data = map.values;
    const Image resized = resize_bilinear(img, grid_w, grid_h);
    return FeatureMap{map.layer, map.channels, grid_h, grid_w, resized.data};
}

// positions x dim matrix of an embedded grid (row-major positions)
Eigen::MatrixXf grid_matrix(const FeatureMap& embed) {
    const int positions = embed.height * embed.width;
    Eigen::MatrixXf m(positions, embed.channels);
    for (int c = 0; c < embed.channels; ++c) {
        for (int p = 0; p < positions; ++p) {
            m(p, c) = embed.values[static_cast<std::size_t>(c) * positions + p];
        }
    }
    return m;
}

Image render_score_map(const std::vector<double>& grid, int grid_h, int grid_w, int out_w,
                       int out_h, double sigma) {
    Image map(grid_w, grid_h, 1);
    for (int p = 0; p < grid_h * grid_w; ++p) {
        map.data[static_cast<std::size_t>(p)] = static_cast<float>(grid[static_cast<std::size_t>(p)]);
    }
    Image up = resize_bilinear(map, out_w, out_h);
    return sigma > 0.0 ? gaussian_blur(up, sigma) : up;
}

std::vector<int> subset_channels(int total, int want, std::uint64_t seed) {
    if (want >= total) {
        std::vector<int> all(static_cast<std::size_t>(total));
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    Rng rng(derive_seed(seed, "channel_subset"));
    std::vector<int> perm = rng.permutation(total);
    perm.resize(static_cast<std::size_t>(want));
    std::sort(perm.begin(), perm.end());
    return perm;
}

FeatureMap select_channels(const FeatureMap& embed, const std::vector<int>& idx) {
    if (static_cast<int>(idx.size()) == embed.channels) return embed;
    FeatureMap out{embed.layer, static_cast<int>(idx.size()), embed.height, embed.width, {}};
    const std::size_t hw = static_cast<std::size_t>(embed.height) * embed.width;
    out.values.resize(idx.size() * hw);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const float* src = embed.values.data() + static_cast<std::size_t>(idx[i]) * hw;
        std::copy(src, src + hw, out.values.data() + i * hw);
    }
    return out;
}

} // namespace

FeatureMap embed_grid(std::span<const FeatureMap> maps, int grid_h, int grid_w) {
    if (maps.empty()) throw DimensionMismatch("embed_grid needs at least one feature map");
    FeatureMap out;
    out.layer = "embed";
    out.height = grid_h;
    out.width = grid_w;
    out.channels = 0;
    for (const FeatureMap& map : maps) {
        const FeatureMap r = resize_map(map, grid_h, grid_w);
        out.values.insert(out.values.end(), r.values.begin(), r.values.end());
        out.channels += r.channels;
    }
    return out;
}

Eigen::VectorXd global_descriptor(std::span<const FeatureMap> maps) {
    int total = 0;
    for (const FeatureMap& m : maps) total += m.channels;
    Eigen::VectorXd desc(total);
    int offset = 0;
    for (const FeatureMap& m : maps) {
        const std::size_t hw = static_cast<std::size_t>(m.height) * m.width;
        for (int c = 0; c < m.channels; ++c) {
            double acc = 0.0;
            const float* p = m.values.data() + static_cast<std::size_t>(c) * hw;
            for (std::size_t i = 0; i < hw; ++i) acc += p[i];
            desc(offset + c) = acc / static_cast<double>(hw);
        }
        offset += m.channels;
    }
    return desc;
}

FeatureMap neighborhood_average(const FeatureMap& map, int p) {
    if (p <= 1) return map;
    const int r = p / 2;
    FeatureMap out = map;
    for (int c = 0; c < map.channels; ++c) {
        for (int y = 0; y < map.height; ++y) {
            for (int x = 0; x < map.width; ++x) {
                double acc = 0.0;
                int count = 0;
                for (int dy = -r; dy <= r; ++dy) {
                    const int yy = y + dy;
                    if (yy < 0 || yy >= map.height) continue;
                    for (int dx = -r; dx <= r; ++dx) {
                        const int xx = x + dx;
                        if (xx < 0 || xx >= map.width) continue;
                        acc += map.at(c, yy, xx);
                        ++count;
                    }
                }
                out.at(c, y, x) = static_cast<float>(acc / count);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mahalanobis
// ---------------------------------------------------------------------------

double mahalanobis(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                   const Eigen::MatrixXd& chol_lower) {
    if (x.size() != mean.size() || chol_lower.rows() != x.size() || chol_lower.cols() != x.size()) {
        throw DimensionMismatch("mahalanobis: dimensions disagree");
    }
    const Eigen::VectorXd solved =
        chol_lower.triangularView<Eigen::Lower>().solve(x - mean);
    return std::sqrt(solved.squaredNorm());
}

// ---------------------------------------------------------------------------
// PaDiM
// ---------------------------------------------------------------------------

PadimModel padim_fit(const std::vector<std::vector<FeatureMap>>& normal_features,
                     const PadimConfig& cfg, const ModelMeta& meta) {
    const int n = static_cast<int>(normal_features.size());
    if (n < 2) throw InsufficientNormals("padim needs at least 2 normal images");

    const int grid_h = normal_features[0][0].height;
    const int grid_w = normal_features[0][0].width;
    int total_channels = 0;
    for (const FeatureMap& m : normal_features[0]) total_channels += m.channels;

    PadimModel model;
    model.smooth_sigma = cfg.smooth_sigma;
    model.meta = meta;
    model.meta.scorer_id = "padim";
    GaussianStats& stats = model.stats;
    stats.grid_h = grid_h;
    stats.grid_w = grid_w;
    stats.eps = cfg.eps;
    stats.channel_indices = subset_channels(total_channels, cfg.channels, cfg.seed);
    stats.dim = static_cast<int>(stats.channel_indices.size());
    if (n < stats.dim + 1) {
        std::fprintf(stderr,
                     "[padim] warning: %d normals for %d channels; covariance rests on the "
                     "regularizer\n",
                     n, stats.dim);
    }

    const int positions = grid_h * grid_w;
    // gather embeddings once: per image a positions x dim matrix
    std::vector<Eigen::MatrixXf> embeds;
    embeds.reserve(static_cast<std::size_t>(n));
    for (const std::vector<FeatureMap>& maps : normal_features) {
        const FeatureMap embed = select_channels(embed_grid(maps, grid_h, grid_w), stats.channel_indices);
        if (embed.height != grid_h || embed.width != grid_w) {
            throw DimensionMismatch("padim_fit: inconsistent feature grids");
        }
        embeds.push_back(grid_matrix(embed));
    }

    stats.mean.resize(static_cast<std::size_t>(positions));
    stats.covariance.resize(static_cast<std::size_t>(positions));
    stats.chol.resize(static_cast<std::size_t>(positions));
    Eigen::MatrixXd x(n, stats.dim);
    for (int p = 0; p < positions; ++p) {
        for (int i = 0; i < n; ++i) {
            x.row(i) = embeds[static_cast<std::size_t>(i)].row(p).cast<double>();
        }
        Eigen::VectorXd mu = x.colwise().mean();
        Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
        Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
        cov.diagonal().array() += cfg.eps;
        Eigen::LLT<Eigen::MatrixXd> llt(cov);
        if (llt.info() != Eigen::Success) {
            throw Error("padim covariance is not positive definite despite regularization");
        }
        stats.mean[static_cast<std::size_t>(p)] = std::move(mu);
        stats.chol[static_cast<std::size_t>(p)] = llt.matrixL();
        stats.covariance[static_cast<std::size_t>(p)] = std::move(cov);
    }
    return model;
}

ScoreResult padim_score(const PadimModel& model, std::span<const FeatureMap> features) {
    const GaussianStats& stats = model.stats;
    const FeatureMap embed =
        select_channels(embed_grid(features, stats.grid_h, stats.grid_w), stats.channel_indices);
    if (embed.channels != stats.dim) {
        throw DimensionMismatch("padim_score: channel count differs from the fitted stats");
    }
    const Eigen::MatrixXf grid = grid_matrix(embed);
    const int positions = stats.grid_h * stats.grid_w;

    std::vector<double> dists(static_cast<std::size_t>(positions));
    double max_dist = 0.0;
    for (int p = 0; p < positions; ++p) {
        const Eigen::VectorXd x = grid.row(p).cast<double>();
        const double d = mahalanobis(x, stats.mean[static_cast<std::size_t>(p)],
                                     stats.chol[static_cast<std::size_t>(p)]);
        dists[static_cast<std::size_t>(p)] = d;
        max_dist = std::max(max_dist, d);
    }

    ScoreResult result;
    result.image_score = max_dist;
    result.score_map = render_score_map(dists, stats.grid_h, stats.grid_w, model.meta.input_width,
                                        model.meta.input_height, model.smooth_sigma);
    result.scorer_id = "padim";
    result.backbone_id = model.meta.backbone_id;
    result.checkpoint_id = model.meta.checkpoint_id;
    return result;
}

// ---------------------------------------------------------------------------
// PatchCore
// ---------------------------------------------------------------------------

int coreset_count(double ratio, int n) {
    if (ratio <= 0.0 || ratio > 1.0) throw ValidationError("coreset ratio must lie in (0, 1]");
    return std::max(1, static_cast<int>(std::lround(ratio * n)));
}

std::vector<int> kcenter_greedy(const Eigen::MatrixXf& points, int count, std::uint64_t seed) {
    const int n = static_cast<int>(points.rows());
    if (n == 0) throw InsufficientNormals("kcenter_greedy on an empty point set");
    count = std::clamp(count, 1, n);

    std::vector<int> selected;
    selected.reserve(static_cast<std::size_t>(count));
    Rng rng(derive_seed(seed, "kcenter_start"));
    int current = rng.uniform_int(n);
    selected.push_back(current);

    std::vector<double> min_sq(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    for (int iter = 1; iter < count; ++iter) {
        // fold the latest selection into the min-distance field
        for (int i = 0; i < n; ++i) {
            const double d = (points.row(i).cast<double>() - points.row(current).cast<double>())
                                 .squaredNorm();
            if (d < min_sq[static_cast<std::size_t>(i)]) min_sq[static_cast<std::size_t>(i)] = d;
        }
        int best = 0;
        double best_d = -1.0;
        for (int i = 0; i < n; ++i) {
            if (min_sq[static_cast<std::size_t>(i)] > best_d) {
                best_d = min_sq[static_cast<std::size_t>(i)];
                best = i;
            }
        }
        current = best;
        selected.push_back(current);
    }
    return selected;
}

MemoryBank patchcore_fit(const std::vector<std::vector<FeatureMap>>& normal_features,
                         const PatchcoreConfig& cfg, const ModelMeta& meta) {
    if (normal_features.empty()) throw InsufficientNormals("patchcore needs at least 1 normal image");

    // neighborhood-aware aggregation at each tap's own grid, then embed on
    // the coarsest tap grid
    const std::vector<FeatureMap>& first = normal_features[0];
    const int grid_h = first.back().height;
    const int grid_w = first.back().width;

    std::vector<Eigen::MatrixXf> per_image;
    int dim = 0;
    for (const std::vector<FeatureMap>& maps : normal_features) {
        std::vector<FeatureMap> pooled;
        pooled.reserve(maps.size());
        for (const FeatureMap& m : maps) pooled.push_back(neighborhood_average(m, cfg.neighborhood));
        const FeatureMap embed = embed_grid(pooled, grid_h, grid_w);
        dim = embed.channels;
        per_image.push_back(grid_matrix(embed));
    }

    const int positions = grid_h * grid_w;
    Eigen::MatrixXf pool(static_cast<int>(per_image.size()) * positions, dim);
    for (std::size_t i = 0; i < per_image.size(); ++i) {
        pool.middleRows(static_cast<int>(i) * positions, positions) = per_image[i];
    }

    MemoryBank bank;
    bank.neighborhood = cfg.neighborhood;
    bank.grid_h = grid_h;
    bank.grid_w = grid_w;
    bank.dim = dim;
    bank.smooth_sigma = cfg.smooth_sigma;
    bank.meta = meta;
    bank.meta.scorer_id = "patchcore";
    bank.coreset_indices = kcenter_greedy(pool, coreset_count(cfg.coreset_ratio,
                                                              static_cast<int>(pool.rows())),
                                          cfg.seed);
    bank.vectors.resize(static_cast<int>(bank.coreset_indices.size()), dim);
    for (std::size_t i = 0; i < bank.coreset_indices.size(); ++i) {
        bank.vectors.row(static_cast<int>(i)) = pool.row(bank.coreset_indices[i]);
    }
    return bank;
}

ScoreResult patchcore_score(const MemoryBank& bank, std::span<const FeatureMap> features) {
    std::vector<FeatureMap> pooled;
    for (const FeatureMap& m : features) pooled.push_back(neighborhood_average(m, bank.neighborhood));
    const FeatureMap embed = embed_grid(pooled, bank.grid_h, bank.grid_w);
    if (embed.channels != bank.dim) {
        throw DimensionMismatch("patchcore_score: channel count differs from the bank");
    }
    const Eigen::MatrixXf grid = grid_matrix(embed);

    const int positions = bank.grid_h * bank.grid_w;
    std::vector<double> dists(static_cast<std::size_t>(positions));
    double max_dist = 0.0;
    for (int p = 0; p < positions; ++p) {
        double best = std::numeric_limits<double>::infinity();
        for (int b = 0; b < bank.vectors.rows(); ++b) {
            const double d =
                (grid.row(p).cast<double>() - bank.vectors.row(b).cast<double>()).squaredNorm();
            if (d < best) best = d;
        }
        const double dist = std::sqrt(best);
        dists[static_cast<std::size_t>(p)] = dist;
        max_dist = std::max(max_dist, dist);
    }

    ScoreResult result;
    result.image_score = max_dist;
    result.score_map = render_score_map(dists, bank.grid_h, bank.grid_w, bank.meta.input_width,
                                        bank.meta.input_height, bank.smooth_sigma);
    result.scorer_id = "patchcore";
    result.backbone_id = bank.meta.backbone_id;
    result.checkpoint_id = bank.meta.checkpoint_id;
    return result;
}

// ---------------------------------------------------------------------------
// SPADE
// ---------------------------------------------------------------------------

SpadeModel spade_fit(const std::vector<std::vector<FeatureMap>>& normal_features,
                     const SpadeConfig& cfg, const ModelMeta& meta) {
    const int n = static_cast<int>(normal_features.size());
    if (n < 2) throw InsufficientNormals("spade needs at least 2 normal images");

    SpadeModel model;
    model.k_neighbors = cfg.k_neighbors;
    model.kappa = cfg.kappa;
    model.smooth_sigma = cfg.smooth_sigma;
    model.meta = meta;
    model.meta.scorer_id = "spade";
    model.grid_h = normal_features[0][0].height;
    model.grid_w = normal_features[0][0].width;

    model.globals.resize(n, global_descriptor(normal_features[0]).size());
    for (int i = 0; i < n; ++i) {
        model.globals.row(i) = global_descriptor(normal_features[static_cast<std::size_t>(i)]);
        const FeatureMap embed =
            embed_grid(normal_features[static_cast<std::size_t>(i)], model.grid_h, model.grid_w);
        model.dim = embed.channels;
        model.grids.push_back(grid_matrix(embed));
    }
    return model;
}

ScoreResult spade_score(const SpadeModel& model, std::span<const FeatureMap> features) {
    const int n = static_cast<int>(model.globals.rows());
    const int k = std::min(model.k_neighbors, n);

    const Eigen::VectorXd desc = global_descriptor(features);
    if (desc.size() != model.globals.cols()) {
        throw DimensionMismatch("spade_score: descriptor size differs from the fitted model");
    }
    std::vector<std::pair<double, int>> by_dist(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        by_dist[static_cast<std::size_t>(i)] = {(desc - model.globals.row(i).transpose()).norm(), i};
    }
    std::sort(by_dist.begin(), by_dist.end());

    double image_score = 0.0;
    for (int i = 0; i < k; ++i) image_score += by_dist[static_cast<std::size_t>(i)].first;
    image_score /= k;

    const FeatureMap embed = embed_grid(features, model.grid_h, model.grid_w);
    if (embed.channels != model.dim) {
        throw DimensionMismatch("spade_score: channel count differs from the fitted model");
    }
    const Eigen::MatrixXf grid = grid_matrix(embed);

    const int positions = model.grid_h * model.grid_w;
    std::vector<double> dists(static_cast<std::size_t>(positions));
    std::vector<double> candidates;
    for (int p = 0; p < positions; ++p) {
        const int py = p / model.grid_w;
        const int px = p % model.grid_w;
        candidates.clear();
        for (int i = 0; i < k; ++i) {
            const Eigen::MatrixXf& neighbor = model.grids[static_cast<std::size_t>(
                by_dist[static_cast<std::size_t>(i)].second)];
            for (int dy = -1; dy <= 1; ++dy) {
                const int qy = py + dy;
                if (qy < 0 || qy >= model.grid_h) continue;
                for (int dx = -1; dx <= 1; ++dx) {
                    const int qx = px + dx;
                    if (qx < 0 || qx >= model.grid_w) continue;
                    const int q = qy * model.grid_w + qx;
                    candidates.push_back(
                        (grid.row(p).cast<double>() - neighbor.row(q).cast<double>()).norm());
                }
            }
        }
        const int kappa = std::min<int>(model.kappa, static_cast<int>(candidates.size()));
        std::partial_sort(candidates.begin(), candidates.begin() + kappa, candidates.end());
        double acc = 0.0;
        for (int i = 0; i < kappa; ++i) acc += candidates[static_cast<std::size_t>(i)];
        dists[static_cast<std::size_t>(p)] = acc / kappa;
    }

    ScoreResult result;
    result.image_score = image_score;
    result.score_map = render_score_map(dists, model.grid_h, model.grid_w, model.meta.input_width,
                                        model.meta.input_height, model.smooth_sigma);
    result.scorer_id = "spade";
    result.backbone_id = model.meta.backbone_id;
    result.checkpoint_id = model.meta.checkpoint_id;
    return result;
}

// ---------------------------------------------------------------------------
// Mah.AD
// ---------------------------------------------------------------------------

MahadModel mahad_fit(const std::vector<std::vector<FeatureMap>>& normal_features,
                     const MahadConfig& cfg, const ModelMeta& meta) {
    const int n = static_cast<int>(normal_features.size());
    if (n < 2) throw InsufficientNormals("mahad needs at least 2 normal images");

    MahadModel model;
    model.eps = cfg.eps;
    model.meta = meta;
    model.meta.scorer_id = "mahad";

    const int dim = static_cast<int>(global_descriptor(normal_features[0]).size());
    Eigen::MatrixXd x(n, dim);
    for (int i = 0; i < n; ++i) {
        x.row(i) = global_descriptor(normal_features[static_cast<std::size_t>(i)]);
    }
    model.mean = x.colwise().mean();
    const Eigen::MatrixXd centered = x.rowwise() - model.mean.transpose();
    model.covariance = (centered.transpose() * centered) / static_cast<double>(n - 1);
    model.covariance.diagonal().array() += cfg.eps;
    Eigen::LLT<Eigen::MatrixXd> llt(model.covariance);
    if (llt.info() != Eigen::Success) {
        throw Error("mahad covariance is not positive definite despite regularization");
    }
    model.chol = llt.matrixL();
    return model;
}

ScoreResult mahad_score(const MahadModel& model, std::span<const FeatureMap> features) {
    ScoreResult result;
    result.image_score = mahalanobis(global_descriptor(features), model.mean, model.chol);
    result.scorer_id = "mahad";
    result.backbone_id = model.meta.backbone_id;
    result.checkpoint_id = model.meta.checkpoint_id;
    return result; // score_map intentionally left empty
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

namespace {

void write_meta(nlohmann::json& sidecar, const ModelMeta& meta) {
    sidecar["scorer_id"] = meta.scorer_id;
    sidecar["backbone_id"] = meta.backbone_id;
    sidecar["checkpoint_id"] = meta.checkpoint_id;
    sidecar["config_hash"] = meta.config_hash;
    sidecar["input_width"] = meta.input_width;
    sidecar["input_height"] = meta.input_height;
}

ModelMeta read_meta(const nlohmann::json& sidecar) {
    ModelMeta meta;
    meta.scorer_id = sidecar.at("scorer_id").get<std::string>();
    meta.backbone_id = sidecar.at("backbone_id").get<std::string>();
    meta.checkpoint_id = sidecar.at("checkpoint_id").get<std::string>();
    meta.config_hash = sidecar.at("config_hash").get<std::string>();
    meta.input_width = sidecar.at("input_width").get<int>();
    meta.input_height = sidecar.at("input_height").get<int>();
    return meta;
}

} // namespace

void save_padim_model(const PadimModel& model, const fs::path& base) {
    const GaussianStats& stats = model.stats;
    const int positions = stats.grid_h * stats.grid_w;
    std::vector<double> mean(static_cast<std::size_t>(positions) * stats.dim);
    std::vector<double> cov(static_cast<std::size_t>(positions) * stats.dim * stats.dim);
    for (int p = 0; p < positions; ++p) {
        Eigen::Map<Eigen::VectorXd>(mean.data() + static_cast<std::size_t>(p) * stats.dim, stats.dim) =
            stats.mean[static_cast<std::size_t>(p)];
        Eigen::Map<Eigen::MatrixXd>(cov.data() + static_cast<std::size_t>(p) * stats.dim * stats.dim,
                                    stats.dim, stats.dim) = stats.covariance[static_cast<std::size_t>(p)];
    }
    CheckpointData data;
    data.tensors64.emplace_back("mean", std::move(mean));
    data.tensors64.emplace_back("covariance", std::move(cov));
    write_meta(data.sidecar, model.meta);
    data.sidecar["grid_h"] = stats.grid_h;
    data.sidecar["grid_w"] = stats.grid_w;
    data.sidecar["dim"] = stats.dim;
    data.sidecar["eps"] = stats.eps;
    data.sidecar["channel_indices"] = stats.channel_indices;
    data.sidecar["smooth_sigma"] = model.smooth_sigma;
    save_checkpoint(base, data);
}

PadimModel load_padim_model(const fs::path& base, const ModelMeta& extractor) {
    const CheckpointData data = load_checkpoint(base);
    PadimModel model;
    model.meta = read_meta(data.sidecar);
    require_compatible(model.meta, extractor);
    model.smooth_sigma = data.sidecar.at("smooth_sigma").get<double>();
    GaussianStats& stats = model.stats;
    stats.grid_h = data.sidecar.at("grid_h").get<int>();
    stats.grid_w = data.sidecar.at("grid_w").get<int>();
    stats.dim = data.sidecar.at("dim").get<int>();
    stats.eps = data.sidecar.at("eps").get<double>();
    stats.channel_indices = data.sidecar.at("channel_indices").get<std::vector<int>>();

    const std::vector<double>& mean = data.tensor64("mean");
    const std::vector<double>& cov = data.tensor64("covariance");
    const int positions = stats.grid_h * stats.grid_w;
    stats.mean.resize(static_cast<std::size_t>(positions));
    stats.covariance.resize(static_cast<std::size_t>(positions));
    stats.chol.resize(static_cast<std::size_t>(positions));
    for (int p = 0; p < positions; ++p) {
        stats.mean[static_cast<std::size_t>(p)] = Eigen::Map<const Eigen::VectorXd>(
            mean.data() + static_cast<std::size_t>(p) * stats.dim, stats.dim);
        stats.covariance[static_cast<std::size_t>(p)] = Eigen::Map<const Eigen::MatrixXd>(
            cov.data() + static_cast<std::size_t>(p) * stats.dim * stats.dim, stats.dim, stats.dim);
        Eigen::LLT<Eigen::MatrixXd> llt(stats.covariance[static_cast<std::size_t>(p)]);
        if (llt.info() != Eigen::Success) throw IoError("persisted covariance is not SPD");
        stats.chol[static_cast<std::size_t>(p)] = llt.matrixL();
    }
    return model;
}

void save_memory_bank(const MemoryBank& bank, const fs::path& base) {
    CheckpointData data;
    std::vector<float> vectors(static_cast<std::size_t>(bank.vectors.rows()) * bank.dim);
    Eigen::Map<nn::MatrixRM<float>>(vectors.data(), bank.vectors.rows(), bank.dim) = bank.vectors;
    data.tensors.emplace_back("vectors", std::move(vectors));
    write_meta(data.sidecar, bank.meta);
    data.sidecar["coreset_indices"] = bank.coreset_indices;
    data.sidecar["neighborhood"] = bank.neighborhood;
    data.sidecar["grid_h"] = bank.grid_h;
    data.sidecar["grid_w"] = bank.grid_w;
    data.sidecar["dim"] = bank.dim;
    data.sidecar["smooth_sigma"] = bank.smooth_sigma;
    save_checkpoint(base, data);
}

MemoryBank load_memory_bank(const fs::path& base, const ModelMeta& extractor) {
    const CheckpointData data = load_checkpoint(base);
    MemoryBank bank;
    bank.meta = read_meta(data.sidecar);
    require_compatible(bank.meta, extractor);
    bank.coreset_indices = data.sidecar.at("coreset_indices").get<std::vector<int>>();
    bank.neighborhood = data.sidecar.at("neighborhood").get<int>();
    bank.grid_h = data.sidecar.at("grid_h").get<int>();
    bank.grid_w = data.sidecar.at("grid_w").get<int>();
    bank.dim = data.sidecar.at("dim").get<int>();
    bank.smooth_sigma = data.sidecar.at("smooth_sigma").get<double>();
    const std::vector<float>& vectors = data.tensor("vectors");
    const int rows = static_cast<int>(vectors.size()) / bank.dim;
    bank.vectors = Eigen::Map<const nn::MatrixRM<float>>(vectors.data(), rows, bank.dim);
    return bank;
}

void save_mahad_model(const MahadModel& model, const fs::path& base) {
    CheckpointData data;
    const int dim = static_cast<int>(model.mean.size());
    std::vector<double> mean(model.mean.data(), model.mean.data() + dim);
    std::vector<double> cov(static_cast<std::size_t>(dim) * dim);
    Eigen::Map<Eigen::MatrixXd>(cov.data(), dim, dim) = model.covariance;
    data.tensors64.emplace_back("mean", std::move(mean));
    data.tensors64.emplace_back("covariance", std::move(cov));
    write_meta(data.sidecar, model.meta);
    data.sidecar["eps"] = model.eps;
    save_checkpoint(base, data);
}

MahadModel load_mahad_model(const fs::path& base, const ModelMeta& extractor) {
    const CheckpointData data = load_checkpoint(base);
    MahadModel model;
    model.meta = read_meta(data.sidecar);
    require_compatible(model.meta, extractor);
    model.eps = data.sidecar.at("eps").get<double>();
    const std::vector<double>& mean = data.tensor64("mean");
    const int dim = static_cast<int>(mean.size());
    model.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), dim);
    const std::vector<double>& cov = data.tensor64("covariance");
    model.covariance = Eigen::Map<const Eigen::MatrixXd>(cov.data(), dim, dim);
    Eigen::LLT<Eigen::MatrixXd> llt(model.covariance);
    if (llt.info() != Eigen::Success) throw IoError("persisted covariance is not SPD");
    model.chol = llt.matrixL();
    return model;
}

} // namespace anomalign
