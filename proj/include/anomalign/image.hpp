#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace anomalign {

/// Planar float image, values in [0, 1], layout [channel][row][col].
/// Integer coordinates address pixel centers.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h, int c, float fill = 0.0f)
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * h * c, fill) {}

    bool empty() const { return width == 0 || height == 0 || channels == 0; }

    float& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }

    std::size_t size() const { return data.size(); }
};

/// Reflect an index into [0, n) without repeating the edge sample.
/// For n == 1 everything maps to 0.
int reflect_index(int i, int n);

/// Decode an 8-bit PNG into a 1- or 3-channel float image.
Image load_png(const std::filesystem::path& path);

/// Encode as 8-bit PNG (gray for 1 channel, RGB for 3). Output bytes are
/// deterministic for identical pixel content.
void save_png(const Image& img, const std::filesystem::path& path);

Image resize_bilinear(const Image& img, int out_w, int out_h);
Image resize_nearest(const Image& img, int out_w, int out_h);

/// Separable Gaussian blur, radius 3*sigma, reflected borders.
Image gaussian_blur(const Image& img, double sigma);

/// Cyclic hue rotation of an RGB image; `fraction` is a turn of the hue
/// circle in [-1, 1]. Gray images are returned unchanged.
Image rotate_hue(const Image& img, double fraction);

/// Convert one RGB pixel to HSV (h in [0,360), s,v in [0,1]) and back.
void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v);
void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b);

/// Mean absolute difference over all pixels/channels. Dims must match.
double mean_abs_diff(const Image& a, const Image& b);

/// Concatenate along channels (dims must match spatially).
Image concat_channels(const Image& a, const Image& b);

} // namespace anomalign
