#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "spectract/geometry.hpp"
#include "test_helpers.hpp"

using namespace spectract;
using spectract::testing::disk_image;
using spectract::testing::psnr_db;

namespace {

// Independent chord oracle: intersect the infinite line with the four box
// edges, keep the in-box hits, clip to the segment.
double chord_oracle(const ImageGrid& g, const Ray& ray) {
    const double dx = ray.end.x - ray.start.x;
    const double dy = ray.end.y - ray.start.y;
    std::vector<double> hits;
    auto on_box = [&](double a) {
        const double x = ray.start.x + a * dx;
        const double y = ray.start.y + a * dy;
        const double tol = 1e-9;
        return x >= g.x_min() - tol && x <= g.x_max() + tol && y >= g.y_min() - tol && y <= g.y_max() + tol;
    };
    for (double xe : {g.x_min(), g.x_max()})
        if (dx != 0.0) {
            const double a = (xe - ray.start.x) / dx;
            if (on_box(a)) hits.push_back(a);
        }
    for (double ye : {g.y_min(), g.y_max()})
        if (dy != 0.0) {
            const double a = (ye - ray.start.y) / dy;
            if (on_box(a)) hits.push_back(a);
        }
    if (hits.size() < 2) return 0.0;
    double lo = *std::min_element(hits.begin(), hits.end());
    double hi = *std::max_element(hits.begin(), hits.end());
    lo = std::clamp(lo, 0.0, 1.0);
    hi = std::clamp(hi, 0.0, 1.0);
    return std::max(0.0, hi - lo) * std::hypot(dx, dy);
}

FanBeamGeometry toy_fan(std::size_t views, std::size_t dets) {
    FanBeamGeometry g;
    g.source_to_detector_mm = 500.0;
    g.source_to_object_mm = 250.0;
    g.detector_width_mm = 300.0;
    g.n_detectors = dets;
    g.n_views = views;
    return g;
}

double dot(const Image& a, const Image& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

}  // namespace

TEST_CASE("siddon: horizontal ray through one row") {
    const ImageGrid grid{1, 7, 1.0, {}};
    const Ray ray{{-10.0, 0.1}, {10.0, 0.1}};
    const auto path = siddon_path(grid, ray);
    REQUIRE(path.size() == 7);
    for (std::size_t k = 0; k < path.size(); ++k) {
        CHECK(path[k].col == k);
        CHECK(path[k].row == 0);
        CHECK(path[k].length_mm == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("siddon: diagonal through a single unit pixel") {
    const ImageGrid grid{1, 1, 1.0, {}};
    const Ray ray{{-0.5, -0.5}, {0.5, 0.5}};
    const auto path = siddon_path(grid, ray);
    REQUIRE(path.size() == 1);
    CHECK(path[0].length_mm == doctest::Approx(1.41421356).epsilon(1e-8));
}

TEST_CASE("siddon: miss gives empty path, coincident endpoints throw") {
    const ImageGrid grid{4, 4, 1.0, {}};
    CHECK(siddon_path(grid, {{-10.0, 5.0}, {10.0, 5.0}}).empty());
    CHECK(siddon_path(grid, {{3.0, 3.0}, {4.0, 4.0}}).empty());
    CHECK_THROWS_AS(siddon_path(grid, {{1.0, 1.0}, {1.0, 1.0}}), GeometryError);
}

TEST_CASE("siddon: ray on a shared edge goes to the lower-index cell") {
    const ImageGrid grid{4, 4, 1.0, {}};
    // y = -1 separates rows 0 and 1.
    const auto path = siddon_path(grid, {{-3.0, -1.0}, {3.0, -1.0}});
    REQUIRE(path.size() == 4);
    for (const auto& s : path) CHECK(s.row == 0);
    const auto vpath = siddon_path(grid, {{0.0, 3.0}, {0.0, -3.0}});
    REQUIRE(vpath.size() == 4);
    for (const auto& s : vpath) CHECK(s.col == 1);
}

TEST_CASE("siddon: chord identity and ordering on random rays") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-20.0, 20.0);
    const ImageGrid grid{13, 17, 0.7, {0.3, -0.2}};
    int checked = 0;
    for (int i = 0; i < 2000; ++i) {
        const Ray ray{{u(rng), u(rng)}, {u(rng), u(rng)}};
        const auto path = siddon_path(grid, ray);
        const double chord = chord_oracle(grid, ray);
        double sum = 0.0;
        for (const auto& s : path) {
            CHECK(s.length_mm >= 0.0);
            CHECK(s.row < grid.n_rows);
            CHECK(s.col < grid.n_cols);
            sum += s.length_mm;
        }
        if (chord > 0.0) {
            ++checked;
            CHECK(std::abs(sum - chord) <= 1e-9 * chord);
            CHECK(std::abs(sum - box_chord_length(grid, ray)) <= 1e-9 * chord);
        }
        // Consecutive cells are distinct and their centers advance along the ray.
        const double dx = ray.end.x - ray.start.x;
        const double dy = ray.end.y - ray.start.y;
        for (std::size_t k = 1; k < path.size(); ++k) {
            CHECK_FALSE((path[k].row == path[k - 1].row && path[k].col == path[k - 1].col));
            const auto c0 = grid.pixel_center(path[k - 1].row, path[k - 1].col);
            const auto c1 = grid.pixel_center(path[k].row, path[k].col);
            CHECK((c1.x - c0.x) * dx + (c1.y - c0.y) * dy > 0.0);
        }
    }
    CHECK(checked > 500);
}

TEST_CASE("forward_project: zero, linearity, non-negativity, dimension errors") {
    const ImageGrid grid{32, 32, 4.0, {}};
    const auto geom = toy_fan(24, 40);
    CHECK(forward_project(grid.blank(), grid, geom) == Image(24, 40));

    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image x = grid.blank();
    Image y = grid.blank();
    for (auto& v : x.data) v = u(rng);
    for (auto& v : y.data) v = u(rng);
    const double a = 1.7;
    const double b = -0.4;
    Image axby = grid.blank();
    for (std::size_t i = 0; i < axby.size(); ++i) axby.data[i] = a * x.data[i] + b * y.data[i];
    const auto px = forward_project(x, grid, geom);
    const auto py = forward_project(y, grid, geom);
    const auto pxy = forward_project(axby, grid, geom);
    for (std::size_t i = 0; i < pxy.size(); ++i) {
        CHECK(std::abs(pxy.data[i] - (a * px.data[i] + b * py.data[i])) <= 1e-9 * (1.0 + std::abs(pxy.data[i])));
        CHECK(px.data[i] >= 0.0);
    }
    CHECK_THROWS_AS(forward_project(Image(31, 32), grid, geom), DimensionError);
}

TEST_CASE("forward_project: disk chord oracle in the parallel limit") {
    const ImageGrid grid{256, 256, 0.5, {}};
    FanBeamGeometry geom;
    geom.beam = BeamKind::Parallel;
    geom.n_views = 4;
    geom.n_detectors = 41;
    geom.detector_width_mm = 100.0;
    const double r = 40.0;
    const double mu = 0.02;
    const auto sino = forward_project(disk_image(grid, r, mu), grid, geom);
    for (std::size_t v = 0; v < geom.n_views; ++v) {
        for (std::size_t d = 0; d < geom.n_detectors; ++d) {
            const double s = geom.detector_offset_mm(d);
            if (std::abs(s) > 0.9 * r) continue;
            const double expected = 2.0 * mu * std::sqrt(r * r - s * s);
            CHECK(sino(v, d) == doctest::Approx(expected).epsilon(0.01));
        }
    }
}

TEST_CASE("forward_project: centered disk sinogram is invariant under quarter turns") {
    const ImageGrid grid{48, 48, 2.0, {}};
    const auto geom = toy_fan(16, 50);
    const auto sino = forward_project(disk_image(grid, 30.0, 1.0), grid, geom);
    for (std::size_t v = 0; v < 4; ++v)
        for (std::size_t q = 1; q < 4; ++q)
            for (std::size_t d = 0; d < geom.n_detectors; ++d)
                CHECK(std::abs(sino(v, d) - sino(v + 4 * q, d)) <= 1e-6);
}

TEST_CASE("back_project and SystemMatrix are adjoint to the projector") {
    const ImageGrid grid{40, 36, 3.0, {1.0, -2.0}};
    const auto geom = toy_fan(30, 44);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n(0.0, 1.0);
    Image x = grid.blank();
    Image y(geom.n_views, geom.n_detectors);
    for (auto& v : x.data) v = n(rng);
    for (auto& v : y.data) v = n(rng);
    const double lhs = dot(forward_project(x, grid, geom), y);
    const double rhs = dot(x, back_project(y, grid, geom));
    CHECK(std::abs(lhs - rhs) <= 1e-6 * std::abs(lhs));

    const SystemMatrix A(grid, geom);
    const auto ax = A.forward(x);
    const auto ref = forward_project(x, grid, geom);
    for (std::size_t i = 0; i < ax.size(); ++i) CHECK(ax.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-12));
    CHECK(std::abs(dot(ax, y) - dot(x, A.adjoint(y))) <= 1e-6 * std::abs(lhs));
}

TEST_CASE("fbp: zero sinogram, view-count and shape errors") {
    const ImageGrid grid{16, 16, 4.0, {}};
    auto geom = toy_fan(8, 20);
    CHECK(fbp_reconstruct(Image(8, 20), grid, geom) == grid.blank());
    CHECK_THROWS_AS(fbp_reconstruct(Image(7, 20), grid, geom), DimensionError);
    geom.n_views = 1;
    CHECK_THROWS_AS(fbp_reconstruct(Image(1, 20), grid, geom), GeometryError);
}

TEST_CASE("fbp: clinical detector layout accepted") {
    const auto geom = FanBeamGeometry::clinical_preset(360);
    CHECK(geom.n_detectors == 512);
    CHECK(geom.angular_range_rad == doctest::Approx(2.0 * std::numbers::pi));
    const ImageGrid grid{64, 64, 4.0, {}};
    const auto img = fbp_reconstruct(Image(360, 512), grid, geom);
    CHECK(img.rows == 64);
}

TEST_CASE("fbp: round trip on 256^2 disk phantoms with 512 views") {
    const ImageGrid grid{256, 256, 1.0, {}};
    FanBeamGeometry geom = toy_fan(512, 512);
    geom.source_to_object_mm = 500.0;
    geom.source_to_detector_mm = 1000.0;
    geom.detector_width_mm = 800.0;

    SUBCASE("single disk") {
        const auto phantom = disk_image(grid, 80.0, 1.0);
        const auto rec = fbp_reconstruct(forward_project(phantom, grid, geom), grid, geom);
        CHECK(psnr_db(rec, phantom, 1.0) >= 30.0);
    }
    SUBCASE("two disks, Hann window") {
        auto phantom = disk_image(grid, 90.0, 1.0);
        const auto inner = disk_image(grid, 25.0, 0.5, {30.0, -20.0});
        for (std::size_t i = 0; i < phantom.size(); ++i) phantom.data[i] += inner.data[i];
        const auto sino = forward_project(phantom, grid, geom);
        CHECK(psnr_db(fbp_reconstruct(sino, grid, geom), phantom, 1.5) >= 30.0);
        CHECK(psnr_db(fbp_reconstruct(sino, grid, geom, RampWindow::Hann), phantom, 1.5) >= 30.0);
    }
    SUBCASE("parallel beam") {
        FanBeamGeometry par = geom;
        par.beam = BeamKind::Parallel;
        par.detector_width_mm = 300.0;
        const auto phantom = disk_image(grid, 80.0, 1.0);
        const auto rec = fbp_reconstruct(forward_project(phantom, grid, par), grid, par);
        CHECK(psnr_db(rec, phantom, 1.0) >= 30.0);
    }
}

TEST_CASE("geometry JSON round trip") {
    auto geom = toy_fan(90, 33);
    geom.beam = BeamKind::Parallel;
    const nlohmann::json j = geom;
    CHECK(j.at("n_detectors") == 33);
    CHECK(j.get<FanBeamGeometry>() == geom);
    const ImageGrid grid{3, 5, 0.25, {1.0, 2.0}};
    CHECK(nlohmann::json(grid).get<ImageGrid>() == grid);
    nlohmann::json bad = j;
    bad["source_to_object_mm"] = 900.0;
    CHECK_THROWS_AS(bad.get<FanBeamGeometry>(), GeometryError);
}
