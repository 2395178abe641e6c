#include "spectract/phantom.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "spectract/rng.hpp"

namespace spectract {

void paint_ellipse(Image& img, const ImageGrid& grid, const Ellipse& e) {
    const double half_w = 0.5 * static_cast<double>(grid.n_cols) * grid.pixel_size_mm;
    const double half_h = 0.5 * static_cast<double>(grid.n_rows) * grid.pixel_size_mm;
    const double c = std::cos(e.angle);
    const double s = std::sin(e.angle);
    for (std::size_t r = 0; r < grid.n_rows; ++r) {
        for (std::size_t col = 0; col < grid.n_cols; ++col) {
            int inside = 0;
            for (int a = 0; a < 2; ++a) {
                for (int b = 0; b < 2; ++b) {
                    const double x = (grid.x_min() + (static_cast<double>(col) + 0.25 + 0.5 * a) * grid.pixel_size_mm -
                                      grid.origin.x) / half_w - e.cx;
                    const double y = (grid.y_min() + (static_cast<double>(r) + 0.25 + 0.5 * b) * grid.pixel_size_mm -
                                      grid.origin.y) / half_h - e.cy;
                    const double u = (c * x + s * y) / e.ax;
                    const double v = (-s * x + c * y) / e.ay;
                    if (u * u + v * v <= 1.0) ++inside;
                }
            }
            if (inside > 0) {
                const double f = inside / 4.0;
                img(r, col) = (1.0 - f) * img(r, col) + f * e.density;
            }
        }
    }
}

MaterialPhantom make_phantom(const ImageGrid& grid, std::uint64_t seed) {
    grid.validate();
    Rng rng(mix_seed(seed));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

    MaterialPhantom p{grid.blank(), grid.blank()};
    const double tilt = uni(-0.15, 0.15);
    const double body_ax = uni(0.78, 0.9);
    const double body_ay = uni(0.58, 0.72);

    paint_ellipse(p.soft_tissue, grid, {0.0, 0.0, body_ax, body_ay, tilt, 1.0});
    // Subcutaneous fat ring.
    paint_ellipse(p.soft_tissue, grid, {0.0, 0.0, body_ax - 0.06, body_ay - 0.06, tilt, 0.92});
    paint_ellipse(p.soft_tissue, grid, {0.0, 0.0, body_ax - 0.1, body_ay - 0.1, tilt, 1.02});

    // Lungs or bowel gas, mirrored with jitter.
    if (u(rng) < 0.7) {
        const double lx = uni(0.3, 0.42);
        const double ly = uni(0.0, 0.15);
        const double ax = uni(0.16, 0.26);
        const double ay = uni(0.22, 0.36);
        const double rho = uni(0.25, 0.45);
        paint_ellipse(p.soft_tissue, grid, {-lx, ly, ax, ay, uni(-0.3, 0.3), rho});
        paint_ellipse(p.soft_tissue, grid, {lx + uni(-0.05, 0.05), ly + uni(-0.05, 0.05), ax * uni(0.85, 1.15),
                                            ay * uni(0.85, 1.15), uni(-0.3, 0.3), rho});
    }
    // Organs.
    const int organs = 2 + static_cast<int>(u(rng) * 3.0);
    for (int i = 0; i < organs; ++i) {
        paint_ellipse(p.soft_tissue, grid,
                      {uni(-0.45, 0.45), uni(-0.35, 0.3), uni(0.08, 0.22), uni(0.06, 0.18),
                       uni(0.0, std::numbers::pi), uni(0.95, 1.12)});
    }
    // Low-contrast lesions.
    const int lesions = static_cast<int>(u(rng) * 3.0);
    for (int i = 0; i < lesions; ++i) {
        paint_ellipse(p.soft_tissue, grid,
                      {uni(-0.4, 0.4), uni(-0.3, 0.3), uni(0.03, 0.06), uni(0.03, 0.06), 0.0, uni(1.06, 1.15)});
    }

    // Bone: spine, ribs, calcifications.
    std::vector<Ellipse> bones;
    const double spine_y = -body_ay + uni(0.16, 0.24);
    bones.push_back({uni(-0.03, 0.03), spine_y, uni(0.08, 0.12), uni(0.07, 0.1), uni(-0.2, 0.2), uni(1.5, 1.85)});
    bones.push_back({bones[0].cx, spine_y - uni(0.08, 0.11), uni(0.03, 0.05), uni(0.05, 0.07), 0.0, uni(1.6, 1.9)});
    const int ribs = 4 + static_cast<int>(u(rng) * 5.0);
    for (int i = 0; i < ribs; ++i) {
        const double phi = uni(0.15, std::numbers::pi - 0.15);
        const double side = (i % 2 == 0) ? 1.0 : -1.0;
        const double px = side * std::cos(phi) * (body_ax - 0.13);
        const double py = std::sin(phi) * (body_ay - 0.13) * (u(rng) < 0.5 ? 1.0 : -0.6);
        bones.push_back({px, py, uni(0.025, 0.05), uni(0.02, 0.035), phi, uni(1.3, 1.8)});
    }
    const int calc = static_cast<int>(u(rng) * 3.0);
    for (int i = 0; i < calc; ++i) {
        const double r = uni(0.015, 0.03);
        bones.push_back({uni(-0.35, 0.35), uni(-0.25, 0.3), r, r, 0.0, uni(1.2, 1.6)});
    }
    Image coverage = grid.blank();
    for (auto b : bones) {
        paint_ellipse(p.bone, grid, b);
        b.density = 1.0;
        paint_ellipse(coverage, grid, b);
    }
    // Bone displaces soft tissue in proportion to its area fraction.
    for (std::size_t i = 0; i < coverage.size(); ++i) p.soft_tissue.data[i] *= 1.0 - coverage.data[i];
    return p;
}

}  // namespace spectract
