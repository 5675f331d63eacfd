#include "anomalign/geometry.hpp"

#include "anomalign/common.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <numbers>

namespace anomalign {

namespace {

constexpr double kH33Floor = 1e-12;
constexpr double kInfinityFloor = 1e-12;
constexpr double kConditionLimit = 1e12;

Eigen::Matrix3d to_eigen(const HomographyMatrix& h) {
    Eigen::Matrix3d m;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) m(r, c) = h(r, c);
    return m;
}

HomographyMatrix from_eigen(const Eigen::Matrix3d& m) {
    std::array<double, 9> v;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(r) * 3 + c] = m(r, c);
    return HomographyMatrix::from_raw(v);
}

double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

} // namespace

HomographyMatrix::HomographyMatrix() : h_{1, 0, 0, 0, 1, 0, 0, 0, 1} {}

HomographyMatrix HomographyMatrix::from_raw(const std::array<double, 9>& values) {
    for (const double v : values) {
        if (!std::isfinite(v)) throw DegenerateCorrespondence("non-finite homography entry");
    }
    const double h33 = values[8];
    if (std::abs(h33) < kH33Floor) {
        throw DegenerateCorrespondence("homography h33 below normalization floor");
    }
    HomographyMatrix out;
    for (std::size_t i = 0; i < 9; ++i) out.h_[i] = values[i] / h33;
    out.h_[8] = 1.0; // exact after normalization

    const Eigen::Matrix3d m = to_eigen(out);
    if (std::abs(m.determinant()) < kH33Floor) {
        throw DegenerateCorrespondence("homography is singular");
    }
    return out;
}

HomographyMatrix HomographyMatrix::translation(double tx, double ty) {
    return from_raw({1, 0, tx, 0, 1, ty, 0, 0, 1});
}

std::array<double, 8> CornerDisplacement::flat() const {
    return {deltas[0].x, deltas[0].y, deltas[1].x, deltas[1].y,
            deltas[2].x, deltas[2].y, deltas[3].x, deltas[3].y};
}

CornerDisplacement CornerDisplacement::from_flat(const std::array<double, 8>& v) {
    CornerDisplacement d;
    for (int i = 0; i < 4; ++i) {
        d.deltas[static_cast<std::size_t>(i)] = {v[static_cast<std::size_t>(2 * i)],
                                                 v[static_cast<std::size_t>(2 * i + 1)]};
    }
    return d;
}

double CornerDisplacement::norm() const {
    double s = 0.0;
    for (const Point& p : deltas) s += p.x * p.x + p.y * p.y;
    return std::sqrt(s);
}

ImageFrame::ImageFrame(int w, int h) : width(w), height(h) {
    if (w < 8 || h < 8) throw InvalidSpec("ImageFrame requires width and height >= 8");
}

std::array<Point, 4> ImageFrame::corners() const {
    const double w = width - 1;
    const double h = height - 1;
    return {Point{0, 0}, Point{w, 0}, Point{w, h}, Point{0, h}};
}

HomographyMatrix dlt_solve(std::span<const Point, 4> src, std::span<const Point, 4> dst) {
    // Two equations per correspondence with h33 pinned to 1:
    //   x*h11 + y*h12 + h13 - x'x*h31 - x'y*h32 = x'
    //   x*h21 + y*h22 + h23 - y'x*h31 - y'y*h32 = y'
    Eigen::Matrix<double, 8, 8> a = Eigen::Matrix<double, 8, 8>::Zero();
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
        const double x = src[i].x, y = src[i].y;
        const double xp = dst[i].x, yp = dst[i].y;
        a(2 * i, 0) = x;
        a(2 * i, 1) = y;
        a(2 * i, 2) = 1.0;
        a(2 * i, 6) = -xp * x;
        a(2 * i, 7) = -xp * y;
        a(2 * i + 1, 3) = x;
        a(2 * i + 1, 4) = y;
        a(2 * i + 1, 5) = 1.0;
        a(2 * i + 1, 6) = -yp * x;
        a(2 * i + 1, 7) = -yp * y;
        b(2 * i) = xp;
        b(2 * i + 1) = yp;
    }

    Eigen::JacobiSVD<Eigen::Matrix<double, 8, 8>> svd(a, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    if (sv(7) <= 0.0 || sv(0) / sv(7) > kConditionLimit) {
        throw DegenerateCorrespondence("DLT system is singular or ill-conditioned");
    }
    const Eigen::Matrix<double, 8, 1> h = svd.solve(b);
    return HomographyMatrix::from_raw({h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0});
}

HomographyMatrix dlt_solve(const std::array<Point, 4>& src, const std::array<Point, 4>& dst) {
    return dlt_solve(std::span<const Point, 4>(src), std::span<const Point, 4>(dst));
}

Point apply_homography(const HomographyMatrix& h, const Point& p) {
    const double w = h(2, 0) * p.x + h(2, 1) * p.y + h(2, 2);
    if (std::abs(w) <= kInfinityFloor) {
        throw PointAtInfinity("homogeneous coordinate vanished during projection");
    }
    return {(h(0, 0) * p.x + h(0, 1) * p.y + h(0, 2)) / w,
            (h(1, 0) * p.x + h(1, 1) * p.y + h(1, 2)) / w};
}

std::vector<Point> apply_homography(const HomographyMatrix& h, std::span<const Point> pts) {
    std::vector<Point> out;
    out.reserve(pts.size());
    for (const Point& p : pts) out.push_back(apply_homography(h, p));
    return out;
}

std::array<Point, 4> apply_homography(const HomographyMatrix& h, const std::array<Point, 4>& pts) {
    std::array<Point, 4> out;
    for (std::size_t i = 0; i < 4; ++i) out[i] = apply_homography(h, pts[i]);
    return out;
}

HomographyMatrix displacement_to_homography(const CornerDisplacement& d, const ImageFrame& frame) {
    const std::array<Point, 4> src = frame.corners();
    std::array<Point, 4> dst;
    for (std::size_t i = 0; i < 4; ++i) {
        dst[i] = {src[i].x + d.deltas[i].x, src[i].y + d.deltas[i].y};
    }
    return dlt_solve(src, dst);
}

CornerDisplacement homography_to_displacement(const HomographyMatrix& h, const ImageFrame& frame) {
    const std::array<Point, 4> src = frame.corners();
    const std::array<Point, 4> mapped = apply_homography(h, src);
    CornerDisplacement d;
    for (std::size_t i = 0; i < 4; ++i) {
        d.deltas[i] = {mapped[i].x - src[i].x, mapped[i].y - src[i].y};
    }
    return d;
}

HomographyMatrix rotation_about_center(double angle_deg, const ImageFrame& frame) {
    const double a = deg_to_rad(angle_deg);
    const double c = std::cos(a), s = std::sin(a);
    const Point ctr = frame.center();
    // T(center) * R * T(-center)
    return HomographyMatrix::from_raw({c, -s, ctr.x - c * ctr.x + s * ctr.y,
                                       s, c, ctr.y - s * ctr.x - c * ctr.y,
                                       0, 0, 1});
}

CornerDisplacement rotation_to_displacement(double angle_deg, const ImageFrame& frame) {
    const HomographyMatrix r = rotation_about_center(angle_deg, frame);
    return homography_to_displacement(r, frame);
}

double rotation_from_displacement(const CornerDisplacement& d, const ImageFrame& frame) {
    // Best-fit angle in the Procrustes sense over centered corner vectors.
    const std::array<Point, 4> corners = frame.corners();
    const Point ctr = frame.center();
    double dot = 0.0, cross = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        const double ux = corners[i].x - ctr.x;
        const double uy = corners[i].y - ctr.y;
        const double vx = ux + d.deltas[i].x;
        const double vy = uy + d.deltas[i].y;
        dot += ux * vx + uy * vy;
        cross += ux * vy - uy * vx;
    }
    return std::atan2(cross, dot) * 180.0 / std::numbers::pi;
}

HomographyMatrix compose(const HomographyMatrix& a, const HomographyMatrix& b) {
    return from_eigen(to_eigen(a) * to_eigen(b));
}

HomographyMatrix invert(const HomographyMatrix& h) {
    const Eigen::Matrix3d m = to_eigen(h);
    if (std::abs(m.determinant()) < kH33Floor) {
        throw DegenerateCorrespondence("cannot invert singular homography");
    }
    return from_eigen(Eigen::Matrix3d(m.inverse()));
}

namespace {

float sample_at(const Image& img, int c, int x, int y, const Fill& fill) {
    if (x >= 0 && x < img.width && y >= 0 && y < img.height) return img.at(c, y, x);
    if (fill.mode == FillMode::Constant) return fill.value;
    return img.at(c, reflect_index(y, img.height), reflect_index(x, img.width));
}

template <typename Sampler>
Image warp_common(const Image& img, const HomographyMatrix& h, const Fill& fill, Sampler sample) {
    if (img.empty()) throw DimensionMismatch("warp of empty image");
    const HomographyMatrix hinv = invert(h);
    Image out(img.width, img.height, img.channels);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const double w = hinv(2, 0) * x + hinv(2, 1) * y + hinv(2, 2);
            if (std::abs(w) <= kInfinityFloor) {
                for (int c = 0; c < img.channels; ++c) out.at(c, y, x) = fill.value;
                continue;
            }
            const double sx = (hinv(0, 0) * x + hinv(0, 1) * y + hinv(0, 2)) / w;
            const double sy = (hinv(1, 0) * x + hinv(1, 1) * y + hinv(1, 2)) / w;
            sample(out, sx, sy, x, y);
        }
    }
    return out;
}

} // namespace

Image warp_image(const Image& img, const HomographyMatrix& h, const Fill& fill) {
    return warp_common(img, h, fill, [&](Image& out, double sx, double sy, int x, int y) {
        const double fx = std::floor(sx);
        const double fy = std::floor(sy);
        const int x0 = static_cast<int>(fx);
        const int y0 = static_cast<int>(fy);
        const double dx = sx - fx;
        const double dy = sy - fy;
        for (int c = 0; c < img.channels; ++c) {
            const double v00 = sample_at(img, c, x0, y0, fill);
            const double v10 = sample_at(img, c, x0 + 1, y0, fill);
            const double v01 = sample_at(img, c, x0, y0 + 1, fill);
            const double v11 = sample_at(img, c, x0 + 1, y0 + 1, fill);
            const double top = (1.0 - dx) * v00 + dx * v10;
            const double bot = (1.0 - dx) * v01 + dx * v11;
            out.at(c, y, x) = static_cast<float>((1.0 - dy) * top + dy * bot);
        }
    });
}

Image warp_mask(const Image& mask, const HomographyMatrix& h, const Fill& fill) {
    return warp_common(mask, h, fill, [&](Image& out, double sx, double sy, int x, int y) {
        const int xn = static_cast<int>(std::lround(sx));
        const int yn = static_cast<int>(std::lround(sy));
        for (int c = 0; c < mask.channels; ++c) {
            out.at(c, y, x) = sample_at(mask, c, xn, yn, fill);
        }
    });
}

} // namespace anomalign
