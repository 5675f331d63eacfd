#include "anomalign/synthesis.hpp"

#include "anomalign/common.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <set>

namespace anomalign {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

std::string to_string(AugmentCategory c) {
    switch (c) {
        case AugmentCategory::None: return "none";
        case AugmentCategory::Color: return "color";
        case AugmentCategory::Shape: return "shape";
        case AugmentCategory::ShapeColor: return "shape_color";
    }
    return "none";
}

AugmentCategory augment_category_from_string(const std::string& s) {
    if (s == "none") return AugmentCategory::None;
    if (s == "color") return AugmentCategory::Color;
    if (s == "shape") return AugmentCategory::Shape;
    if (s == "shape_color") return AugmentCategory::ShapeColor;
    throw ValidationError("unknown augmentation category: " + s);
}

void AugmentationPolicy::validate() const {
    if (pepper_rate < 0.0 || pepper_rate > 0.2 || salt_rate < 0.0 || salt_rate > 0.2) {
        throw ValidationError("pepper/salt rates must lie in [0, 0.2]");
    }
    if (hue_shift < 0.0 || hue_shift > 0.5) throw ValidationError("hue_shift must lie in [0, 0.5]");
    if (brightness < 0.0 || brightness >= 1.0) throw ValidationError("brightness must lie in [0, 1)");
}

void MisalignmentParams::validate() const {
    if (max_rotation_deg < 0.0 || max_translation < 0.0 || max_scale_delta < 0.0 ||
        foreground_margin < 0.0) {
        throw ValidationError("misalignment parameters must be nonnegative");
    }
    if (foreground_margin >= 0.5) throw ValidationError("foreground_margin must be below 0.5");
    if (max_scale_delta >= 1.0) throw ValidationError("max_scale_delta must be below 1");
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

namespace {

bool is_strictly_convex(const std::array<Point, 4>& q) {
    double sign = 0.0;
    for (int i = 0; i < 4; ++i) {
        const Point& a = q[static_cast<std::size_t>(i)];
        const Point& b = q[static_cast<std::size_t>((i + 1) % 4)];
        const Point& c = q[static_cast<std::size_t>((i + 2) % 4)];
        const double cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if (std::abs(cross) < 1e-9) return false;
        if (sign == 0.0) {
            sign = cross > 0 ? 1.0 : -1.0;
        } else if (cross * sign < 0) {
            return false;
        }
    }
    return true;
}

} // namespace

CornerDisplacement sample_inward_perturbation(Rng& rng, double rho, const ImageFrame& frame) {
    if (rho <= 0.0 || rho > std::min(frame.width, frame.height) / 4.0) {
        throw InvalidSpec("rho must lie in (0, min(w,h)/4]");
    }
    // Inward sign pattern per corner: TL(+,+) TR(-,+) BR(-,-) BL(+,-).
    static constexpr double kSignX[4] = {1, -1, -1, 1};
    static constexpr double kSignY[4] = {1, 1, -1, -1};
    const std::array<Point, 4> corners = frame.corners();
    while (true) {
        CornerDisplacement d;
        for (int i = 0; i < 4; ++i) {
            d.deltas[static_cast<std::size_t>(i)] = {kSignX[i] * rng.uniform(0, rho),
                                                     kSignY[i] * rng.uniform(0, rho)};
        }
        std::array<Point, 4> quad;
        for (std::size_t i = 0; i < 4; ++i) {
            quad[i] = {corners[i].x + d.deltas[i].x, corners[i].y + d.deltas[i].y};
        }
        if (is_strictly_convex(quad)) return d;
    }
}

HomographyMatrix sample_misalignment(Rng& rng, const MisalignmentParams& params,
                                     const ImageFrame& frame) {
    params.validate();
    const Point ctr = frame.center();
    const double side = std::min(frame.width, frame.height);
    const double half_box = (1.0 - 2.0 * params.foreground_margin) * side / 2.0;
    const std::array<Point, 4> box = {Point{ctr.x - half_box, ctr.y - half_box},
                                      Point{ctr.x + half_box, ctr.y - half_box},
                                      Point{ctr.x + half_box, ctr.y + half_box},
                                      Point{ctr.x - half_box, ctr.y + half_box}};

    for (int attempt = 0; attempt < 1000; ++attempt) {
        const double angle = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg);
        const double tx = rng.uniform(-params.max_translation, params.max_translation) * frame.width;
        const double ty = rng.uniform(-params.max_translation, params.max_translation) * frame.height;
        const double scale = 1.0 + rng.uniform(-params.max_scale_delta, params.max_scale_delta);

        const HomographyMatrix s = HomographyMatrix::from_raw(
            {scale, 0, ctr.x * (1.0 - scale), 0, scale, ctr.y * (1.0 - scale), 0, 0, 1});
        const HomographyMatrix h = compose(HomographyMatrix::translation(tx, ty),
                                           compose(rotation_about_center(angle, frame), s));

        bool ok = true;
        for (const Point& p : box) {
            const Point m = apply_homography(h, p);
            if (m.x < 0.0 || m.x > frame.width - 1 || m.y < 0.0 || m.y > frame.height - 1) {
                ok = false;
                break;
            }
        }
        if (ok) return h;
    }
    throw InfeasibleParams("misalignment sampler exceeded 1000 consecutive rejections");
}

Image augment(const Image& img, const AugmentationPolicy& policy, Rng& rng) {
    policy.validate();
    if (policy.category == AugmentCategory::None) return img;

    Image out = img;
    if (policy.color_active()) {
        if (policy.hue_shift > 0.0) {
            out = rotate_hue(out, rng.uniform(-policy.hue_shift, policy.hue_shift));
        }
        if (policy.brightness > 0.0) {
            const float gain = static_cast<float>(
                rng.uniform(1.0 - policy.brightness, 1.0 + policy.brightness));
            for (float& v : out.data) v = std::clamp(v * gain, 0.0f, 1.0f);
        }
    }
    if (policy.shape_active()) {
        const int n_pixels = out.width * out.height;
        const int n_pepper = static_cast<int>(std::lround(policy.pepper_rate * n_pixels));
        const int n_salt = static_cast<int>(std::lround(policy.salt_rate * n_pixels));
        const std::vector<int> pepper = rng.sample_without_replacement(n_pixels, n_pepper);
        const std::vector<int> salt = rng.sample_without_replacement(n_pixels, n_salt);
        const auto paint = [&](const std::vector<int>& idx, float value) {
            for (const int i : idx) {
                const int y = i / out.width;
                const int x = i % out.width;
                for (int c = 0; c < out.channels; ++c) out.at(c, y, x) = value;
            }
        };
        paint(pepper, 0.0f);
        paint(salt, 1.0f);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset builders
// ---------------------------------------------------------------------------

namespace {

struct VariantWriter {
    const DatasetManifest& src;
    fs::path out_dir;
    BuildResult result;

    explicit VariantWriter(const DatasetManifest& s, const fs::path& out) : src(s), out_dir(out) {
        result.manifest.schema_version = src.schema_version;
        result.manifest.root = out;
    }

    // Applies `transform(img, mask)` to one record and mirrors it into the
    // output tree; exceptions become per-file failures.
    template <typename Fn>
    void process(const ClassRecord& cls, const ImageRecord& rec, ClassRecord& out_cls, Fn&& fn) {
        (void)cls;
        try {
            const Image img = load_png(src.resolve(rec.path));
            std::optional<Image> mask;
            if (!rec.mask_path.empty()) mask = load_png(src.resolve(rec.mask_path));

            ImageRecord out_rec = rec;
            fn(img, mask, out_rec);
            out_cls.images.push_back(std::move(out_rec));
        } catch (const std::exception& e) {
            result.failures.push_back({rec.path, e.what()});
        }
    }
};

} // namespace

BuildResult build_misaligned_dataset(const DatasetManifest& src, const MisalignmentParams& params,
                                     std::uint64_t seed, const fs::path& out_dir) {
    params.validate();
    VariantWriter writer(src, out_dir);
    std::uint64_t stream = 0;
    for (const ClassRecord& cls : src.classes) {
        ClassRecord out_cls;
        out_cls.name = cls.name;
        out_cls.kind = cls.kind;
        for (const ImageRecord& rec : cls.images) {
            const std::uint64_t index = stream++;
            writer.process(cls, rec, out_cls,
                           [&](const Image& img, const std::optional<Image>& mask, ImageRecord& out_rec) {
                               Rng rng(derive_seed(seed, "misalign", index));
                               const ImageFrame frame(img.width, img.height);
                               const HomographyMatrix h = sample_misalignment(rng, params, frame);
                               save_png(warp_image(img, h, Fill::reflection()), out_dir / rec.path);
                               if (mask) {
                                   save_png(warp_mask(*mask, h, Fill::reflection()),
                                            out_dir / rec.mask_path);
                               }
                               out_rec.transform = TransformRecord{h, "reflection"};
                               out_rec.alignment = "misaligned";
                           });
        }
        writer.result.manifest.classes.push_back(std::move(out_cls));
    }
    save_manifest(writer.result.manifest, out_dir);
    return std::move(writer.result);
}

BuildResult build_aligned_dataset_with(const DatasetManifest& src, const AlignFn& align,
                                       const fs::path& out_dir) {
    VariantWriter writer(src, out_dir);
    for (const ClassRecord& cls : src.classes) {
        ClassRecord out_cls;
        out_cls.name = cls.name;
        out_cls.kind = cls.kind;
        for (const ImageRecord& rec : cls.images) {
            writer.process(cls, rec, out_cls,
                           [&](const Image& img, const std::optional<Image>& mask, ImageRecord& out_rec) {
                               try {
                                   const HomographyMatrix h = align(img);
                                   save_png(warp_image(img, h, Fill::reflection()), out_dir / rec.path);
                                   if (mask) {
                                       save_png(warp_mask(*mask, h, Fill::reflection()),
                                                out_dir / rec.mask_path);
                                   }
                                   out_rec.transform = TransformRecord{h, "reflection"};
                                   out_rec.alignment = "aligned";
                               } catch (const AlignmentFailure& e) {
                                   save_png(img, out_dir / rec.path);
                                   if (mask) save_png(*mask, out_dir / rec.mask_path);
                                   out_rec.meta["alignment_failed"] = true;
                                   out_rec.meta["alignment_error"] = e.what();
                               }
                           });
        }
        writer.result.manifest.classes.push_back(std::move(out_cls));
    }
    save_manifest(writer.result.manifest, out_dir);
    return std::move(writer.result);
}

// ---------------------------------------------------------------------------
// Procedural toy dataset
// ---------------------------------------------------------------------------

namespace {

constexpr double kTau = 2.0 * std::numbers::pi;

struct Rgb {
    float r, g, b;
};

struct ObjectStyle {
    double base_radius;    // fraction of image size
    double lobe1;          // k=1 amplitude (orientation signature)
    double lobe3;          // k=3 amplitude
    double lobe5;          // k=5 amplitude
    double stripe_period;  // px
    double stripe_angle;   // rad, in object frame
    double stripe_mix;
    Rgb body, stripe, background;
    bool orientation_dot;
};

ObjectStyle style_for(const std::string& name) {
    if (name == "rotor") {
        return {.base_radius = 0.30,
                .lobe1 = 0.38,
                .lobe3 = 0.05,
                .lobe5 = 0.0,
                .stripe_period = 11.0,
                .stripe_angle = 0.35,
                .stripe_mix = 0.45,
                .body = {0.62f, 0.47f, 0.22f},
                .stripe = {0.42f, 0.30f, 0.12f},
                .background = {0.30f, 0.33f, 0.38f},
                .orientation_dot = true};
    }
    // canonical object
    return {.base_radius = 0.32,
            .lobe1 = 0.0,
            .lobe3 = 0.10,
            .lobe5 = 0.06,
            .stripe_period = 9.0,
            .stripe_angle = -0.55,
            .stripe_mix = 0.40,
            .body = {0.66f, 0.40f, 0.24f},
            .stripe = {0.36f, 0.22f, 0.14f},
            .background = {0.32f, 0.36f, 0.40f},
            .orientation_dot = false};
}

struct Notch {
    double phi;    // center angle in object frame
    double depth;  // fraction of radius removed
    double width;  // gaussian width, radians
};

struct RenderSetup {
    int size;
    double theta;      // pose angle, radians
    double cx, cy;     // object center
    double stripe_phase;
    double brightness;
    std::uint64_t noise_seed;
};

double wrap_pi(double a) {
    while (a > std::numbers::pi) a -= kTau;
    while (a < -std::numbers::pi) a += kTau;
    return a;
}

double radius_at(const ObjectStyle& st, double phi, double scale, const Notch* notch) {
    double r = 1.0 + st.lobe1 * std::cos(phi) + st.lobe3 * std::cos(3.0 * phi + 0.8) +
               st.lobe5 * std::cos(5.0 * phi + 2.1);
    if (notch) {
        const double d = wrap_pi(phi - notch->phi);
        r *= 1.0 - notch->depth * std::exp(-0.5 * d * d / (notch->width * notch->width));
    }
    return r * st.base_radius * scale;
}

void add_pixel_noise(Image& img, std::uint64_t seed, double sigma) {
    Rng rng(seed);
    for (float& v : img.data) {
        v = std::clamp(v + static_cast<float>(sigma * rng.normal()), 0.0f, 1.0f);
    }
}

Image render_object(const ObjectStyle& st, const RenderSetup& rp, const Notch* notch,
                    Image* silhouette_out = nullptr) {
    const int n = rp.size;
    Image img(n, n, 3);
    if (silhouette_out) *silhouette_out = Image(n, n, 1, 0.0f);
    const double ct = std::cos(rp.theta), snt = std::sin(rp.theta);
    const double sa = st.stripe_angle;
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double dx = x - rp.cx;
            const double dy = y - rp.cy;
            // into the object frame (inverse pose rotation)
            const double u = ct * dx + snt * dy;
            const double v = -snt * dx + ct * dy;
            const double rho = std::hypot(u, v);
            const double phi = std::atan2(v, u);
            const double r = radius_at(st, phi, n, notch);

            const double alpha = std::clamp((r - rho) / 1.5, 0.0, 1.0);
            Rgb c = st.background;
            if (alpha > 0.0) {
                const double s =
                    0.5 + 0.5 * std::sin(kTau * (u * std::cos(sa) + v * std::sin(sa)) / st.stripe_period +
                                         rp.stripe_phase);
                const double mix = st.stripe_mix * s;
                Rgb body{static_cast<float>(st.body.r * (1 - mix) + st.stripe.r * mix),
                         static_cast<float>(st.body.g * (1 - mix) + st.stripe.g * mix),
                         static_cast<float>(st.body.b * (1 - mix) + st.stripe.b * mix)};
                if (rho > 0.90 * r) { // rim shading
                    body.r *= 0.72f;
                    body.g *= 0.72f;
                    body.b *= 0.72f;
                }
                c = {static_cast<float>(st.background.r * (1 - alpha) + body.r * alpha),
                     static_cast<float>(st.background.g * (1 - alpha) + body.g * alpha),
                     static_cast<float>(st.background.b * (1 - alpha) + body.b * alpha)};
                if (silhouette_out && alpha >= 0.5) silhouette_out->at(0, y, x) = 1.0f;
            }
            img.at(0, y, x) = c.r;
            img.at(1, y, x) = c.g;
            img.at(2, y, x) = c.b;
        }
    }
    if (st.orientation_dot) {
        // off-axis dot disambiguates the full rotation circle
        const double dphi = 0.7, drad = 0.16 * n;
        const double ox = rp.cx + drad * std::cos(rp.theta + dphi);
        const double oy = rp.cy + drad * std::sin(rp.theta + dphi);
        const double dot_r = 0.045 * n;
        for (int y = std::max(0, static_cast<int>(oy - dot_r - 2));
             y <= std::min(n - 1, static_cast<int>(oy + dot_r + 2)); ++y) {
            for (int x = std::max(0, static_cast<int>(ox - dot_r - 2));
                 x <= std::min(n - 1, static_cast<int>(ox + dot_r + 2)); ++x) {
                const double d = std::hypot(x - ox, y - oy);
                const double a = std::clamp((dot_r - d) / 1.2, 0.0, 1.0);
                if (a > 0) {
                    img.at(0, y, x) = static_cast<float>(img.at(0, y, x) * (1 - a) + 0.12 * a);
                    img.at(1, y, x) = static_cast<float>(img.at(1, y, x) * (1 - a) + 0.14 * a);
                    img.at(2, y, x) = static_cast<float>(img.at(2, y, x) * (1 - a) + 0.38 * a);
                }
            }
        }
    }
    for (float& vv : img.data) vv = std::clamp(vv * static_cast<float>(rp.brightness), 0.0f, 1.0f);
    add_pixel_noise(img, rp.noise_seed, 0.02);
    return img;
}

Image render_texture(const RenderSetup& rp) {
    const int n = rp.size;
    Image img(n, n, 3);
    Rng rng(derive_seed(rp.noise_seed, "texture_phase"));
    const double p1 = rng.uniform(0, kTau), p2 = rng.uniform(0, kTau), p3 = rng.uniform(0, kTau);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            const double wx = std::sin(kTau * x / 13.0 + p1);
            const double wy = std::sin(kTau * y / 17.0 + p2);
            const double diag = std::sin(kTau * (x + y) / 23.0 + p3);
            const double v = 0.52 + 0.14 * wx + 0.14 * wy + 0.06 * diag;
            img.at(0, y, x) = static_cast<float>(v * 0.55);
            img.at(1, y, x) = static_cast<float>(v * 0.72);
            img.at(2, y, x) = static_cast<float>(v * 0.60);
        }
    }
    for (float& vv : img.data) vv = std::clamp(vv * static_cast<float>(rp.brightness), 0.0f, 1.0f);
    add_pixel_noise(img, rp.noise_seed, 0.012);
    return img;
}

// Spot/scratch injectors shared between the generator and inject_defect().
// `region` returns true where defects may be centered.
DefectResult apply_spot(const Image& img, Rng& rng, double strength,
                        const std::function<bool(int, int)>& region) {
    DefectResult out{img, Image(img.width, img.height, 1, 0.0f)};
    int cx = 0, cy = 0;
    for (int attempt = 0; attempt < 256; ++attempt) {
        cx = rng.uniform_int(img.width);
        cy = rng.uniform_int(img.height);
        if (region(cx, cy)) break;
    }
    const double radius = rng.uniform(2.5, 4.5) * img.width / 128.0;
    const double hue_delta = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * rng.uniform(25.0, 45.0);
    for (int y = std::max(0, static_cast<int>(cy - radius - 2));
         y <= std::min(img.height - 1, static_cast<int>(cy + radius + 2)); ++y) {
        for (int x = std::max(0, static_cast<int>(cx - radius - 2));
             x <= std::min(img.width - 1, static_cast<int>(cx + radius + 2)); ++x) {
            const double d = std::hypot(x - cx, y - cy);
            const double a = std::clamp((radius - d) / 1.5, 0.0, 1.0) * strength;
            if (a <= 0) continue;
            float h, s, v;
            rgb_to_hsv(out.image.at(0, y, x), out.image.at(1, y, x), out.image.at(2, y, x), h, s, v);
            float r, g, b;
            hsv_to_rgb(h + static_cast<float>(hue_delta), std::min(1.0f, s + 0.12f), v, r, g, b);
            out.image.at(0, y, x) = static_cast<float>(out.image.at(0, y, x) * (1 - a) + r * a);
            out.image.at(1, y, x) = static_cast<float>(out.image.at(1, y, x) * (1 - a) + g * a);
            out.image.at(2, y, x) = static_cast<float>(out.image.at(2, y, x) * (1 - a) + b * a);
            if (a >= 0.5) out.mask.at(0, y, x) = 1.0f;
        }
    }
    return out;
}

DefectResult apply_dent(const Image& img, Rng& rng, double strength,
                        const std::function<bool(int, int)>& region) {
    DefectResult out{img, Image(img.width, img.height, 1, 0.0f)};
    int cx = 0, cy = 0;
    for (int attempt = 0; attempt < 256; ++attempt) {
        cx = rng.uniform_int(img.width);
        cy = rng.uniform_int(img.height);
        if (region(cx, cy)) break;
    }
    const double radius = rng.uniform(6.0, 10.0) * img.width / 128.0;
    const double shift = rng.uniform(2.5, 4.5) * strength * img.width / 128.0;
    const double dir = rng.uniform(0, kTau);
    const double dx = shift * std::cos(dir), dy = shift * std::sin(dir);
    for (int y = std::max(0, static_cast<int>(cy - radius - 1));
         y <= std::min(img.height - 1, static_cast<int>(cy + radius + 1)); ++y) {
        for (int x = std::max(0, static_cast<int>(cx - radius - 1));
             x <= std::min(img.width - 1, static_cast<int>(cx + radius + 1)); ++x) {
            const double d = std::hypot(x - cx, y - cy);
            if (d >= radius) continue;
            const double fall = 0.5 * (1.0 + std::cos(kTau / 2.0 * d / radius));
            const double sx = x - fall * dx;
            const double sy = y - fall * dy;
            const int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, img.width - 2);
            const int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, img.height - 2);
            const double fx = std::clamp(sx - x0, 0.0, 1.0);
            const double fy = std::clamp(sy - y0, 0.0, 1.0);
            for (int c = 0; c < img.channels; ++c) {
                const double top = (1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x0 + 1);
                const double bot = (1 - fx) * img.at(c, y0 + 1, x0) + fx * img.at(c, y0 + 1, x0 + 1);
                out.image.at(c, y, x) = static_cast<float>((1 - fy) * top + fy * bot);
            }
            if (fall * shift > 0.75) out.mask.at(0, y, x) = 1.0f;
        }
    }
    return out;
}

DefectResult apply_scratch(const Image& img, Rng& rng, double strength,
                           const std::function<bool(int, int)>& region) {
    DefectResult out{img, Image(img.width, img.height, 1, 0.0f)};
    double px = 0, py = 0;
    for (int attempt = 0; attempt < 256; ++attempt) {
        px = rng.uniform(0, img.width - 1.0);
        py = rng.uniform(0, img.height - 1.0);
        if (region(static_cast<int>(px), static_cast<int>(py))) break;
    }
    double dir = rng.uniform(0, kTau);
    const double width = rng.uniform(0.7, 1.1) * img.width / 128.0;
    const bool dark = rng.uniform01() < 0.5;
    const int segments = 3;
    for (int s = 0; s < segments; ++s) {
        const double len = rng.uniform(8.0, 14.0) * img.width / 128.0;
        const double qx = px + len * std::cos(dir);
        const double qy = py + len * std::sin(dir);
        const int x0 = std::max(0, static_cast<int>(std::min(px, qx) - width - 2));
        const int x1 = std::min(img.width - 1, static_cast<int>(std::max(px, qx) + width + 2));
        const int y0 = std::max(0, static_cast<int>(std::min(py, qy) - width - 2));
        const int y1 = std::min(img.height - 1, static_cast<int>(std::max(py, qy) + width + 2));
        const double vx = qx - px, vy = qy - py;
        const double vv = vx * vx + vy * vy;
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double t = vv > 0 ? std::clamp(((x - px) * vx + (y - py) * vy) / vv, 0.0, 1.0) : 0.0;
                const double d = std::hypot(x - (px + t * vx), y - (py + t * vy));
                const double a = std::clamp((width - d) / 0.8, 0.0, 1.0) * strength;
                if (a <= 0) continue;
                for (int c = 0; c < 3; ++c) {
                    const float v0 = out.image.at(c, y, x);
                    const float target = dark ? v0 * 0.72f : std::min(1.0f, v0 * 1.30f + 0.06f);
                    out.image.at(c, y, x) = static_cast<float>(v0 * (1 - a) + target * a);
                }
                if (a >= 0.5) out.mask.at(0, y, x) = 1.0f;
            }
        }
        px = qx;
        py = qy;
        dir += rng.uniform(-0.5, 0.5);
    }
    return out;
}

} // namespace

void ToySpec::validate() const {
    if (image_size < 32) throw InvalidSpec("toy image_size must be >= 32");
    if (train_count < 1 || test_good_count < 1 || test_defect_count < 0) {
        throw InvalidSpec("toy counts must be positive (defect count nonnegative)");
    }
    if (classes.empty()) throw InvalidSpec("toy spec needs at least one class");
    bool has_object = false, has_texture = false;
    const std::set<std::string> known = {"spot", "scratch", "structural"};
    for (const ToyClassSpec& c : classes) {
        if (c.kind == "object") {
            has_object = true;
        } else if (c.kind == "texture") {
            has_texture = true;
        } else {
            throw InvalidSpec("toy class kind must be object or texture: " + c.name);
        }
        if (test_defect_count > 0 && c.defects.empty()) {
            throw InvalidSpec("toy class needs defect injectors: " + c.name);
        }
        for (const std::string& d : c.defects) {
            if (!known.count(d)) throw InvalidSpec("unknown defect injector: " + d);
            if (d == "structural" && c.kind != "object") {
                throw InvalidSpec("structural defects need an object silhouette: " + c.name);
            }
        }
    }
    if (!has_object || !has_texture) {
        throw InvalidSpec("toy spec needs at least one object and one texture class");
    }
}

ToySpec default_toy_spec() {
    ToySpec spec;
    spec.classes = {
        {"widget", "object", 0.0, {"structural", "spot", "structural", "scratch"}, 0.85},
        {"rotor", "object", 30.0, {"spot", "scratch", "structural"}, 1.75},
        {"weave", "texture", 0.0, {"spot", "scratch"}, 1.6},
    };
    return spec;
}

DatasetManifest generate_toy_dataset(const ToySpec& spec, const fs::path& out_dir,
                                     std::uint64_t seed) {
    spec.validate();
    DatasetManifest manifest;
    manifest.root = out_dir;

    for (const ToyClassSpec& cls : spec.classes) {
        ClassRecord record;
        record.name = cls.name;
        record.kind = cls.kind;
        const ObjectStyle style = style_for(cls.name);

        const auto setup_for = [&](std::uint64_t img_seed) {
            Rng rng(img_seed);
            RenderSetup rp;
            rp.size = spec.image_size;
            rp.theta = cls.pose_jitter_deg > 0
                           ? rng.uniform(-cls.pose_jitter_deg, cls.pose_jitter_deg) * std::numbers::pi / 180.0
                           : 0.0;
            rp.cx = (spec.image_size - 1) / 2.0 + rng.uniform(-2.5, 2.5);
            rp.cy = (spec.image_size - 1) / 2.0 + rng.uniform(-2.5, 2.5);
            rp.stripe_phase = rng.uniform(0, kTau);
            rp.brightness = rng.uniform(0.93, 1.07);
            rp.noise_seed = rng.next_u64();
            return rp;
        };

        const auto render_good = [&](const RenderSetup& rp, Image* silhouette) {
            return cls.kind == "object" ? render_object(style, rp, nullptr, silhouette)
                                        : render_texture(rp);
        };

        const auto emit = [&](const Image& img, const std::string& rel, const std::string& split,
                              const std::string& label, const Image* mask, const std::string& mask_rel,
                              const RenderSetup& rp) {
            save_png(img, out_dir / rel);
            ImageRecord rec;
            rec.path = rel;
            rec.split = split;
            rec.label = label;
            if (mask) {
                save_png(*mask, out_dir / mask_rel);
                rec.mask_path = mask_rel;
            }
            if (cls.pose_jitter_deg > 0) {
                rec.meta["pose_angle_deg"] = rp.theta * 180.0 / std::numbers::pi;
            }
            record.images.push_back(std::move(rec));
        };

        char buf[64];
        for (int i = 0; i < spec.train_count; ++i) {
            const RenderSetup rp = setup_for(derive_seed(seed, cls.name + "/train", static_cast<std::uint64_t>(i)));
            std::snprintf(buf, sizeof(buf), "%s/train/good/%03d.png", cls.name.c_str(), i);
            emit(render_good(rp, nullptr), buf, "train", "good", nullptr, "", rp);
        }
        for (int i = 0; i < spec.test_good_count; ++i) {
            const RenderSetup rp = setup_for(derive_seed(seed, cls.name + "/test_good", static_cast<std::uint64_t>(i)));
            std::snprintf(buf, sizeof(buf), "%s/test/good/%03d.png", cls.name.c_str(), i);
            emit(render_good(rp, nullptr), buf, "test", "good", nullptr, "", rp);
        }
        for (int i = 0; i < spec.test_defect_count; ++i) {
            const std::uint64_t img_seed = derive_seed(seed, cls.name + "/test_defect", static_cast<std::uint64_t>(i));
            const RenderSetup rp = setup_for(img_seed);
            const std::string kind = cls.defects[static_cast<std::size_t>(i) % cls.defects.size()];
            Rng defect_rng(derive_seed(img_seed, "defect"));

            const double strength = spec.defect_strength * cls.defect_strength;
            DefectResult defect;
            if (kind == "structural") {
                Notch notch;
                notch.phi = defect_rng.uniform(0, kTau);
                notch.depth = (0.18 + 0.10 * defect_rng.uniform01()) * strength;
                notch.width = 0.35;
                Image clean_sil;
                const Image clean = render_object(style, rp, nullptr, &clean_sil);
                (void)clean;
                Image notched_sil;
                defect.image = render_object(style, rp, &notch, &notched_sil);
                defect.mask = Image(spec.image_size, spec.image_size, 1, 0.0f);
                for (std::size_t p = 0; p < defect.mask.data.size(); ++p) {
                    defect.mask.data[p] = clean_sil.data[p] != notched_sil.data[p] ? 1.0f : 0.0f;
                }
            } else {
                Image silhouette;
                const Image clean = render_good(rp, &silhouette);
                const auto region = [&](int x, int y) {
                    if (cls.kind == "texture") {
                        const int m = spec.image_size / 8;
                        return x >= m && y >= m && x < spec.image_size - m && y < spec.image_size - m;
                    }
                    return silhouette.at(0, y, x) > 0.5f;
                };
                defect = kind == "spot"
                             ? apply_spot(clean, defect_rng, strength, region)
                             : apply_scratch(clean, defect_rng, strength, region);
            }

            std::snprintf(buf, sizeof(buf), "%s/test/%s/%03d.png", cls.name.c_str(), kind.c_str(), i);
            const std::string rel = buf;
            std::snprintf(buf, sizeof(buf), "%s/ground_truth/%s/%03d_mask.png", cls.name.c_str(),
                          kind.c_str(), i);
            emit(defect.image, rel, "test", kind, &defect.mask, buf, rp);
        }
        manifest.classes.push_back(std::move(record));
    }

    save_manifest(manifest, out_dir);
    return manifest;
}

DefectResult inject_defect(const Image& img, const std::string& kind, Rng& rng, double strength) {
    const int mx = img.width / 4, my = img.height / 4;
    const auto center_region = [&](int x, int y) {
        return x >= mx && y >= my && x < img.width - mx && y < img.height - my;
    };
    if (kind == "spot") return apply_spot(img, rng, strength, center_region);
    if (kind == "scratch") return apply_scratch(img, rng, strength, center_region);
    if (kind == "dent") return apply_dent(img, rng, strength, center_region);
    throw InvalidSpec("inject_defect supports spot, scratch and dent, got: " + kind);
}

} // namespace anomalign
