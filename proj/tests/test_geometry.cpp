#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "anomalign/common.hpp"
#include "anomalign/geometry.hpp"
#include "anomalign/rng.hpp"

#include <cmath>

using namespace anomalign;

namespace {

// Inward corner box sampler local to the tests; mirrors the documented sign
// convention so geometry tests do not depend on the synthesis module.
CornerDisplacement random_inward(Rng& rng, double rho, const ImageFrame& frame) {
    (void)frame;
    CornerDisplacement d;
    d.deltas[0] = {rng.uniform(0, rho), rng.uniform(0, rho)};
    d.deltas[1] = {-rng.uniform(0, rho), rng.uniform(0, rho)};
    d.deltas[2] = {-rng.uniform(0, rho), -rng.uniform(0, rho)};
    d.deltas[3] = {rng.uniform(0, rho), -rng.uniform(0, rho)};
    return d;
}

double max_corner_error(const std::array<Point, 4>& a, const std::array<Point, 4>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        m = std::max(m, std::hypot(a[i].x - b[i].x, a[i].y - b[i].y));
    }
    return m;
}

} // namespace

TEST_CASE("homography normalization and validation") {
    auto h = HomographyMatrix::from_raw({2, 0, 0, 0, 2, 0, 0, 0, 2});
    CHECK(h(0, 0) == doctest::Approx(1.0));
    CHECK(h(2, 2) == 1.0);

    CHECK_THROWS_AS(HomographyMatrix::from_raw({1, 0, 0, 0, 1, 0, 0, 0, 1e-13}),
                    DegenerateCorrespondence);
    // singular after normalization
    CHECK_THROWS_AS(HomographyMatrix::from_raw({1, 1, 0, 1, 1, 0, 0, 0, 1}),
                    DegenerateCorrespondence);
}

TEST_CASE("dlt_solve identity and translation") {
    const ImageFrame frame(128, 128);
    const auto corners = frame.corners();

    const HomographyMatrix ident = dlt_solve(corners, corners);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            CHECK(std::abs(ident(r, c) - (r == c ? 1.0 : 0.0)) < 1e-9);

    std::array<Point, 4> shifted;
    for (std::size_t i = 0; i < 4; ++i) shifted[i] = {corners[i].x + 10.0, corners[i].y + 5.0};
    const HomographyMatrix t = dlt_solve(corners, shifted);
    CHECK(t(0, 2) == doctest::Approx(10.0).epsilon(1e-9));
    CHECK(t(1, 2) == doctest::Approx(5.0).epsilon(1e-9));
    CHECK(t(0, 0) == doctest::Approx(1.0));
    CHECK(t(0, 1) == doctest::Approx(0.0).scale(1.0));
    CHECK(t(2, 0) == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("dlt_solve throws on collinear points") {
    const std::array<Point, 4> degenerate = {Point{0, 0}, Point{10, 0}, Point{20, 0}, Point{0, 10}};
    const std::array<Point, 4> square = {Point{0, 0}, Point{10, 0}, Point{10, 10}, Point{0, 10}};
    CHECK_THROWS_AS(dlt_solve(degenerate, square), DegenerateCorrespondence);
}

TEST_CASE("dlt_solve round-trips 1000 seeded inward perturbations") {
    const ImageFrame frame(128, 128);
    const auto src = frame.corners();
    Rng rng(20240811);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const CornerDisplacement d = random_inward(rng, 32.0, frame);
        std::array<Point, 4> dst;
        for (std::size_t i = 0; i < 4; ++i) {
            dst[i] = {src[i].x + d.deltas[i].x, src[i].y + d.deltas[i].y};
        }
        const HomographyMatrix h = dlt_solve(src, dst);
        worst = std::max(worst, max_corner_error(apply_homography(h, src), dst));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("apply_homography basics") {
    const HomographyMatrix t = HomographyMatrix::translation(10, 5);
    const Point origin{0, 0};
    const Point p = apply_homography(t, origin);
    CHECK(p.x == doctest::Approx(10.0));
    CHECK(p.y == doctest::Approx(5.0));

    // point mapped to infinity
    const auto h = HomographyMatrix::from_raw({1, 0, 0, 0, 1, 0, -1, 0, 1});
    const Point at_infinity{1.0, 0.0};
    CHECK_THROWS_AS(apply_homography(h, at_infinity), PointAtInfinity);
}

TEST_CASE("displacement <-> homography round trip") {
    const ImageFrame frame(128, 128);

    const CornerDisplacement zero{};
    const HomographyMatrix ident = displacement_to_homography(zero, frame);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            CHECK(std::abs(ident(r, c) - (r == c ? 1.0 : 0.0)) < 1e-9);

    CornerDisplacement shift;
    for (auto& p : shift.deltas) p = {3.0, 3.0};
    const HomographyMatrix t = displacement_to_homography(shift, frame);
    CHECK(t(0, 2) == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(t(1, 2) == doctest::Approx(3.0).epsilon(1e-9));

    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        const CornerDisplacement d = random_inward(rng, 32.0, frame);
        const HomographyMatrix h = displacement_to_homography(d, frame);
        const CornerDisplacement back = homography_to_displacement(h, frame);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(std::abs(back.deltas[i].x - d.deltas[i].x) < 1e-9);
            CHECK(std::abs(back.deltas[i].y - d.deltas[i].y) < 1e-9);
        }
    }
}

TEST_CASE("homography_to_displacement of a translation") {
    const ImageFrame frame(100, 100);
    const CornerDisplacement d =
        homography_to_displacement(HomographyMatrix::translation(10, 5), frame);
    for (const Point& p : d.deltas) {
        CHECK(p.x == doctest::Approx(10.0));
        CHECK(p.y == doctest::Approx(5.0));
    }
}

TEST_CASE("rotation_to_displacement matches hand cases") {
    const ImageFrame frame(100, 100);

    const CornerDisplacement z = rotation_to_displacement(0.0, frame);
    for (const Point& p : z.deltas) {
        CHECK(p.x == doctest::Approx(0.0).scale(1.0));
        CHECK(p.y == doctest::Approx(0.0).scale(1.0));
    }

    // 180 degrees: every corner maps to the diagonally opposite one.
    const CornerDisplacement half = rotation_to_displacement(180.0, frame);
    CHECK(half.deltas[0].x == doctest::Approx(99.0).epsilon(1e-9));
    CHECK(half.deltas[0].y == doctest::Approx(99.0).epsilon(1e-9));
    CHECK(half.deltas[2].x == doctest::Approx(-99.0).epsilon(1e-9));
    CHECK(half.deltas[2].y == doctest::Approx(-99.0).epsilon(1e-9));
}

TEST_CASE("rotation displacement agrees with analytic rotation matrix") {
    const ImageFrame frame(100, 100);
    const auto corners = frame.corners();
    for (const double angle : {-90.0, -45.0, 0.0, 30.0, 90.0, 180.0}) {
        const CornerDisplacement d = rotation_to_displacement(angle, frame);
        const double rad = angle * M_PI / 180.0;
        const double cx = 49.5, cy = 49.5;
        for (std::size_t i = 0; i < 4; ++i) {
            const double ux = corners[i].x - cx;
            const double uy = corners[i].y - cy;
            const double ex = cx + std::cos(rad) * ux - std::sin(rad) * uy;
            const double ey = cy + std::sin(rad) * ux + std::cos(rad) * uy;
            CHECK(std::abs(corners[i].x + d.deltas[i].x - ex) < 1e-9);
            CHECK(std::abs(corners[i].y + d.deltas[i].y - ey) < 1e-9);
        }
    }
}

TEST_CASE("rotation_from_displacement recovers the angle") {
    const ImageFrame frame(128, 128);
    for (const double angle : {-60.0, -12.5, 0.0, 7.75, 45.0, 120.0}) {
        const CornerDisplacement d = rotation_to_displacement(angle, frame);
        CHECK(std::abs(rotation_from_displacement(d, frame) - angle) < 1e-9);
    }
}

TEST_CASE("compose and invert") {
    const HomographyMatrix t = HomographyMatrix::translation(10, 5);

    const HomographyMatrix composed = compose(HomographyMatrix::identity(), t);
    CHECK(composed(0, 2) == doctest::Approx(10.0));

    const HomographyMatrix ti = invert(t);
    CHECK(ti(0, 2) == doctest::Approx(-10.0));
    CHECK(ti(1, 2) == doctest::Approx(-5.0));

    const ImageFrame frame(128, 128);
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const HomographyMatrix h = displacement_to_homography(random_inward(rng, 30.0, frame), frame);
        const HomographyMatrix round = compose(h, invert(h));
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
                CHECK(std::abs(round(r, c) - (r == c ? 1.0 : 0.0)) < 1e-9);
    }
}

TEST_CASE("compose is associative on random triples") {
    const ImageFrame frame(128, 128);
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        const auto h1 = displacement_to_homography(random_inward(rng, 20.0, frame), frame);
        const auto h2 = displacement_to_homography(random_inward(rng, 20.0, frame), frame);
        const auto h3 = displacement_to_homography(random_inward(rng, 20.0, frame), frame);
        const auto left = compose(compose(h1, h2), h3);
        const auto right = compose(h1, compose(h2, h3));
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c)
                CHECK(std::abs(left(r, c) - right(r, c)) < 1e-9);
    }
}

TEST_CASE("warp_image with identity is bit-exact") {
    Rng rng(5);
    Image img(64, 48, 3);
    for (float& v : img.data) v = static_cast<float>(rng.uniform01());

    const Image out = warp_image(img, HomographyMatrix::identity(), Fill::reflection());
    REQUIRE(out.data.size() == img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(out.data[i] == img.data[i]);
}

TEST_CASE("warp of a constant image stays constant under reflection fill") {
    Image img(64, 64, 1, 0.375f);
    const ImageFrame frame(64, 64);
    const HomographyMatrix h = rotation_about_center(33.0, frame);
    const Image out = warp_image(img, h, Fill::reflection());
    for (const float v : out.data) CHECK(v == doctest::Approx(0.375f).epsilon(1e-6));
}

TEST_CASE("warp round trip on a smooth gradient stays close on the interior") {
    const int n = 96;
    Image img(n, n, 1);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            img.at(0, y, x) = static_cast<float>(0.5 + 0.4 * std::sin(x * 0.11) * std::cos(y * 0.07));

    const ImageFrame frame(n, n);
    Rng rng(31);
    const HomographyMatrix h = displacement_to_homography(random_inward(rng, 12.0, frame), frame);
    const Image once = warp_image(img, h, Fill::reflection());
    const Image back = warp_image(once, invert(h), Fill::reflection());

    double err = 0.0;
    int count = 0;
    for (int y = 8; y < n - 8; ++y) {
        for (int x = 8; x < n - 8; ++x) {
            err += std::abs(back.at(0, y, x) - img.at(0, y, x));
            ++count;
        }
    }
    // interior mean absolute error, in 8-bit intensity levels
    CHECK(err / count * 255.0 < 1.0);
}

TEST_CASE("warp_mask keeps masks binary") {
    Image mask(64, 64, 1, 0.0f);
    for (int y = 20; y < 40; ++y)
        for (int x = 25; x < 45; ++x) mask.at(0, y, x) = 1.0f;

    const ImageFrame frame(64, 64);
    const HomographyMatrix h = rotation_about_center(28.0, frame);
    const Image out = warp_mask(mask, h, Fill::constant(0.0f));
    for (const float v : out.data) CHECK((v == 0.0f || v == 1.0f));
}

TEST_CASE("reflect_index mirrors without repeating the edge") {
    CHECK(reflect_index(-1, 4) == 1);
    CHECK(reflect_index(-2, 4) == 2);
    CHECK(reflect_index(4, 4) == 2);
    CHECK(reflect_index(5, 4) == 1);
    CHECK(reflect_index(6, 4) == 0);
    CHECK(reflect_index(-5, 4) == 1);
    CHECK(reflect_index(0, 1) == 0);
    CHECK(reflect_index(7, 1) == 0);
}

TEST_CASE("frame validation") {
    CHECK_THROWS_AS(ImageFrame(7, 64), InvalidSpec);
    CHECK_THROWS_AS(ImageFrame(64, 4), InvalidSpec);
    const ImageFrame f(16, 12);
    const auto c = f.corners();
    CHECK(c[2].x == 15.0);
    CHECK(c[2].y == 11.0);
}
