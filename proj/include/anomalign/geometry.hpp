#pragma once

#include "anomalign/image.hpp"

#include <array>
#include <span>
#include <vector>

namespace anomalign {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

/// 3x3 planar projective transform over pixel coordinates. Normalized so the
/// bottom-right entry is exactly 1; construction rejects matrices whose
/// pre-normalization h33 is (almost) zero or that are singular.
class HomographyMatrix {
public:
    /// Identity.
    HomographyMatrix();

    /// Row-major 9 values; normalizes and validates.
    static HomographyMatrix from_raw(const std::array<double, 9>& values);

    static HomographyMatrix identity() { return HomographyMatrix(); }
    static HomographyMatrix translation(double tx, double ty);

    double operator()(int row, int col) const { return h_[static_cast<std::size_t>(row) * 3 + col]; }

    /// Row-major values, h[8] == 1.
    const std::array<double, 9>& raw() const { return h_; }

private:
    std::array<double, 9> h_;
};

/// The eight corner deltas (dx_i, dy_i), fixed order: top-left, top-right,
/// bottom-right, bottom-left.
struct CornerDisplacement {
    std::array<Point, 4> deltas{};

    /// Flat [dx1, dy1, dx2, dy2, dx3, dy3, dx4, dy4] in canonical order.
    std::array<double, 8> flat() const;
    static CornerDisplacement from_flat(const std::array<double, 8>& v);

    /// Euclidean norm over all eight scalars.
    double norm() const;
};

/// Axis-aligned pixel frame; corners are derived from (width, height) only.
struct ImageFrame {
    int width = 0;
    int height = 0;

    ImageFrame(int w, int h);

    /// TL, TR, BR, BL at pixel centers: (0,0), (w-1,0), (w-1,h-1), (0,h-1).
    std::array<Point, 4> corners() const;
    Point center() const { return {(width - 1) / 2.0, (height - 1) / 2.0}; }
};

// ---------------------------------------------------------------------------
// Solving and applying
// ---------------------------------------------------------------------------

/// Homography from 4 point correspondences via the determined 8x8 linear
/// system (h33 pinned to 1). Throws DegenerateCorrespondence when the system
/// condition number exceeds 1e12.
HomographyMatrix dlt_solve(std::span<const Point, 4> src, std::span<const Point, 4> dst);
HomographyMatrix dlt_solve(const std::array<Point, 4>& src, const std::array<Point, 4>& dst);

/// Projective action with dehomogenization; throws PointAtInfinity when the
/// homogeneous third coordinate magnitude falls below 1e-12.
Point apply_homography(const HomographyMatrix& h, const Point& p);
std::vector<Point> apply_homography(const HomographyMatrix& h, std::span<const Point> pts);
std::array<Point, 4> apply_homography(const HomographyMatrix& h, const std::array<Point, 4>& pts);

HomographyMatrix displacement_to_homography(const CornerDisplacement& d, const ImageFrame& frame);
CornerDisplacement homography_to_displacement(const HomographyMatrix& h, const ImageFrame& frame);

/// Corner deltas of a rotation about the frame center. Positive angles turn
/// x toward y in pixel coordinates. Total on (-180, 180].
CornerDisplacement rotation_to_displacement(double angle_deg, const ImageFrame& frame);

/// Analytic rotation-about-center homography for the same convention.
HomographyMatrix rotation_about_center(double angle_deg, const ImageFrame& frame);

/// Least-squares rotation angle (degrees) explaining a corner displacement,
/// assuming rotation about the frame center.
double rotation_from_displacement(const CornerDisplacement& d, const ImageFrame& frame);

HomographyMatrix compose(const HomographyMatrix& a, const HomographyMatrix& b);
HomographyMatrix invert(const HomographyMatrix& h);

// ---------------------------------------------------------------------------
// Warping
// ---------------------------------------------------------------------------

enum class FillMode { Reflection, Constant };

struct Fill {
    FillMode mode = FillMode::Reflection;
    float value = 0.0f;

    static Fill reflection() { return {FillMode::Reflection, 0.0f}; }
    static Fill constant(float v) { return {FillMode::Constant, v}; }
};

/// Inverse-mapped bilinear warp: out[p] samples img at invert(h)·p.
/// Out-of-bounds samples resolve per fill mode; back-projections at infinity
/// take the fill value instead of aborting.
Image warp_image(const Image& img, const HomographyMatrix& h, const Fill& fill);

/// Same mapping with nearest-neighbor sampling; keeps binary masks binary.
Image warp_mask(const Image& mask, const HomographyMatrix& h, const Fill& fill);

} // namespace anomalign
