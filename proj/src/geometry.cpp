#include "spectract/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <string>

#include <fftw3.h>

#include "spectract/parallel.hpp"

namespace spectract {

namespace {

// Fixed partition count for scatter-style adjoints, so the floating-point
// summation order does not depend on the worker count.
constexpr std::size_t kScatterChunks = 8;

std::size_t cell_index(double v, std::size_t n) {
    double f = std::floor(v);
    // On an exact cell edge the lower index wins.
    if (v == f && f > 0.0) f -= 1.0;
    if (f < 0.0) return 0;
    const auto i = static_cast<std::size_t>(f);
    return std::min(i, n - 1);
}

// Parametric [lo, hi] of the ray segment inside the closed grid box.
bool clip_to_box(const ImageGrid& grid, const Ray& ray, double& lo, double& hi) {
    const double dx = ray.end.x - ray.start.x;
    const double dy = ray.end.y - ray.start.y;
    lo = 0.0;
    hi = 1.0;
    auto slab = [&](double p0, double d, double mn, double mx) {
        if (d == 0.0) return p0 >= mn && p0 <= mx;
        double a0 = (mn - p0) / d;
        double a1 = (mx - p0) / d;
        if (a0 > a1) std::swap(a0, a1);
        lo = std::max(lo, a0);
        hi = std::min(hi, a1);
        return true;
    };
    if (!slab(ray.start.x, dx, grid.x_min(), grid.x_max())) return false;
    if (!slab(ray.start.y, dy, grid.y_min(), grid.y_max())) return false;
    return hi > lo;
}

// Plane crossings of one axis strictly inside (lo, hi), in increasing alpha.
void plane_crossings(double p0, double d, double mn, double pitch, std::size_t n, double lo, double hi,
                     std::vector<double>& out) {
    out.clear();
    if (d == 0.0) return;
    const double u_lo = (p0 + lo * d - mn) / pitch;
    const double u_hi = (p0 + hi * d - mn) / pitch;
    const double u_min = std::min(u_lo, u_hi);
    const double u_max = std::max(u_lo, u_hi);
    const long first = std::max(0L, static_cast<long>(std::ceil(u_min)));
    const long last = std::min(static_cast<long>(n), static_cast<long>(std::floor(u_max)));
    for (long i = first; i <= last; ++i) {
        const double a = (mn + static_cast<double>(i) * pitch - p0) / d;
        if (a > lo && a < hi) out.push_back(a);
    }
    if (d < 0.0) std::reverse(out.begin(), out.end());
}

void validate_image(const Image& image, const ImageGrid& grid) {
    if (image.rows != grid.n_rows || image.cols != grid.n_cols)
        throw DimensionError("image dimensions do not match the grid");
}

void validate_sinogram(const Image& sino, const FanBeamGeometry& geom) {
    if (sino.rows != geom.n_views || sino.cols != geom.n_detectors)
        throw DimensionError("sinogram dimensions do not match the geometry");
}

}  // namespace

void FanBeamGeometry::validate() const {
    if (!(source_to_detector_mm > 0.0) || !(source_to_object_mm > 0.0) || !(detector_width_mm > 0.0))
        throw GeometryError("geometry lengths must be positive");
    if (n_detectors < 2) throw GeometryError("need at least two detector elements");
    if (n_views < 2) throw GeometryError("need at least two views");
    if (!(source_to_object_mm < source_to_detector_mm))
        throw GeometryError("source-to-object distance must be below source-to-detector distance");
    if (!(angular_range_rad > 0.0)) throw GeometryError("angular range must be positive");
}

FanBeamGeometry FanBeamGeometry::clinical_preset(std::size_t n_views) {
    FanBeamGeometry g;
    g.source_to_detector_mm = 500.0;
    g.source_to_object_mm = 250.0;
    g.detector_width_mm = 720.0;
    g.n_detectors = 512;
    g.n_views = n_views;
    return g;
}

FanBeamGeometry FanBeamGeometry::small_animal_preset(std::size_t n_detectors, std::size_t n_views) {
    FanBeamGeometry g;
    g.source_to_detector_mm = 256.0;
    g.source_to_object_mm = 156.0;
    g.detector_width_mm = 0.110 * static_cast<double>(n_detectors);
    g.n_detectors = n_detectors;
    g.n_views = n_views;
    return g;
}

void ImageGrid::validate() const {
    if (n_rows < 1 || n_cols < 1) throw GeometryError("grid must have at least one cell");
    if (!(pixel_size_mm > 0.0)) throw GeometryError("pixel size must be positive");
}

Ray detector_ray(const FanBeamGeometry& geom, std::size_t view, std::size_t detector) {
    const double theta = geom.view_angle(view);
    const Point2 e{std::cos(theta), std::sin(theta)};  // isocenter -> source
    const Point2 u{-e.y, e.x};                         // detector axis
    const double sod = geom.source_to_object_mm;
    const double odd = geom.source_to_detector_mm - sod;
    const double off = geom.detector_offset_mm(detector);
    if (geom.beam == BeamKind::Parallel) {
        return {{off * u.x + sod * e.x, off * u.y + sod * e.y}, {off * u.x - odd * e.x, off * u.y - odd * e.y}};
    }
    return {{sod * e.x, sod * e.y}, {off * u.x - odd * e.x, off * u.y - odd * e.y}};
}

RayPath siddon_path(const ImageGrid& grid, const Ray& ray) {
    const double dx = ray.end.x - ray.start.x;
    const double dy = ray.end.y - ray.start.y;
    const double length = std::hypot(dx, dy);
    if (length == 0.0) throw GeometryError("ray endpoints coincide");

    RayPath path;
    double lo = 0.0;
    double hi = 0.0;
    if (!clip_to_box(grid, ray, lo, hi)) return path;

    const double p = grid.pixel_size_mm;
    thread_local std::vector<double> ax;
    thread_local std::vector<double> ay;
    thread_local std::vector<double> alphas;
    plane_crossings(ray.start.x, dx, grid.x_min(), p, grid.n_cols, lo, hi, ax);
    plane_crossings(ray.start.y, dy, grid.y_min(), p, grid.n_rows, lo, hi, ay);
    alphas.clear();
    alphas.reserve(ax.size() + ay.size() + 2);
    alphas.push_back(lo);
    std::merge(ax.begin(), ax.end(), ay.begin(), ay.end(), std::back_inserter(alphas));
    alphas.push_back(hi);

    path.reserve(alphas.size());
    const double xmin = grid.x_min();
    const double ymin = grid.y_min();
    const double eps = 1e-13;
    for (std::size_t k = 0; k + 1 < alphas.size(); ++k) {
        const double a0 = alphas[k];
        const double a1 = alphas[k + 1];
        if (a1 - a0 <= eps) continue;  // corner crossing: x and y planes coincide
        const double mid = 0.5 * (a0 + a1);
        const double x = ray.start.x + mid * dx;
        const double y = ray.start.y + mid * dy;
        PathSegment seg;
        seg.col = cell_index((x - xmin) / p, grid.n_cols);
        seg.row = cell_index((y - ymin) / p, grid.n_rows);
        seg.length_mm = (a1 - a0) * length;
        if (!path.empty() && path.back().row == seg.row && path.back().col == seg.col)
            path.back().length_mm += seg.length_mm;
        else
            path.push_back(seg);
    }
    return path;
}

double box_chord_length(const ImageGrid& grid, const Ray& ray) {
    double lo = 0.0;
    double hi = 0.0;
    if (!clip_to_box(grid, ray, lo, hi)) return 0.0;
    return (hi - lo) * std::hypot(ray.end.x - ray.start.x, ray.end.y - ray.start.y);
}

Image forward_project(const Image& image, const ImageGrid& grid, const FanBeamGeometry& geom) {
    grid.validate();
    geom.validate();
    validate_image(image, grid);
    Image sino(geom.n_views, geom.n_detectors);
    parallel_for(geom.n_views, [&](std::size_t v) {
        for (std::size_t d = 0; d < geom.n_detectors; ++d) {
            double acc = 0.0;
            for (const auto& s : siddon_path(grid, detector_ray(geom, v, d))) acc += image(s.row, s.col) * s.length_mm;
            sino(v, d) = acc;
        }
    });
    return sino;
}

Image back_project(const Image& sinogram, const ImageGrid& grid, const FanBeamGeometry& geom) {
    grid.validate();
    geom.validate();
    validate_sinogram(sinogram, geom);
    std::vector<Image> partial(kScatterChunks, grid.blank());
    parallel_for(kScatterChunks, [&](std::size_t chunk) {
        Image& acc = partial[chunk];
        for (std::size_t v = chunk; v < geom.n_views; v += kScatterChunks) {
            for (std::size_t d = 0; d < geom.n_detectors; ++d) {
                const double val = sinogram(v, d);
                if (val == 0.0) continue;
                for (const auto& s : siddon_path(grid, detector_ray(geom, v, d))) acc(s.row, s.col) += val * s.length_mm;
            }
        }
    });
    Image out = grid.blank();
    for (const auto& p : partial)
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += p.data[i];
    return out;
}

namespace {

// Frequency response of the band-limited ramp kernel sampled at spacing ds,
// zero-padded to n (even) taps.
std::vector<double> ramp_response(std::size_t n, double ds, RampWindow window) {
    std::vector<double> kernel(n, 0.0);
    const double pi2 = std::numbers::pi * std::numbers::pi;
    kernel[0] = 1.0 / (4.0 * ds * ds);
    for (std::size_t k = 1; k < n / 2; ++k) {
        if (k % 2 == 1) {
            const double v = -1.0 / (static_cast<double>(k * k) * pi2 * ds * ds);
            kernel[k] = v;
            kernel[n - k] = v;
        }
    }
    std::vector<std::complex<double>> spectrum(n / 2 + 1);
    fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(n), kernel.data(),
                                          reinterpret_cast<fftw_complex*>(spectrum.data()), FFTW_ESTIMATE);
    fftw_execute(plan);
    fftw_destroy_plan(plan);
    std::vector<double> response(n / 2 + 1);
    for (std::size_t k = 0; k <= n / 2; ++k) {
        double h = spectrum[k].real();
        if (window == RampWindow::Hann)
            h *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(k) / static_cast<double>(n / 2)));
        response[k] = h;
    }
    return response;
}

}  // namespace

Image fbp_reconstruct(const Image& sinogram, const ImageGrid& grid, const FanBeamGeometry& geom, RampWindow window) {
    if (geom.n_views < 2) throw GeometryError("FBP needs at least two views");
    geom.validate();
    grid.validate();
    validate_sinogram(sinogram, geom);

    const bool fan = geom.beam == BeamKind::Fan;
    const double sod = geom.source_to_object_mm;
    const double sdd = geom.source_to_detector_mm;
    // Detector coordinates rescaled to a virtual detector through the isocenter.
    const double mag = fan ? sod / sdd : 1.0;
    const double ds = geom.detector_pitch_mm() * mag;
    const std::size_t nd = geom.n_detectors;

    std::size_t n_fft = 1;
    while (n_fft < 2 * nd) n_fft <<= 1;
    const auto response = ramp_response(n_fft, ds, window);

    // Weight and filter each view.
    Image filtered(geom.n_views, nd);
    std::vector<double> line(n_fft);
    std::vector<std::complex<double>> spec(n_fft / 2 + 1);
    fftw_plan fwd = fftw_plan_dft_r2c_1d(static_cast<int>(n_fft), line.data(),
                                         reinterpret_cast<fftw_complex*>(spec.data()), FFTW_ESTIMATE);
    fftw_plan inv = fftw_plan_dft_c2r_1d(static_cast<int>(n_fft), reinterpret_cast<fftw_complex*>(spec.data()),
                                         line.data(), FFTW_ESTIMATE);
    for (std::size_t v = 0; v < geom.n_views; ++v) {
        std::fill(line.begin(), line.end(), 0.0);
        for (std::size_t d = 0; d < nd; ++d) {
            const double s = geom.detector_offset_mm(d) * mag;
            const double w = fan ? sod / std::sqrt(sod * sod + s * s) : 1.0;
            line[d] = sinogram(v, d) * w;
        }
        fftw_execute(fwd);
        for (std::size_t k = 0; k < spec.size(); ++k) spec[k] *= response[k];
        fftw_execute(inv);
        // c2r is unnormalized; ds turns the discrete sum into the convolution integral.
        const double scale = ds / static_cast<double>(n_fft);
        for (std::size_t d = 0; d < nd; ++d) filtered(v, d) = line[d] * scale;
    }
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(inv);

    std::vector<double> cos_t(geom.n_views);
    std::vector<double> sin_t(geom.n_views);
    for (std::size_t v = 0; v < geom.n_views; ++v) {
        cos_t[v] = std::cos(geom.view_angle(v));
        sin_t[v] = std::sin(geom.view_angle(v));
    }
    // Each ray is seen twice over a full circle; the pi/V weight covers both
    // the full-circle fan case and the half-circle parallel case.
    const double angle_weight = std::numbers::pi / static_cast<double>(geom.n_views);
    const double center = 0.5 * static_cast<double>(nd - 1);

    Image out = grid.blank();
    parallel_for(grid.n_rows, [&](std::size_t r) {
        for (std::size_t c = 0; c < grid.n_cols; ++c) {
            const Point2 p = grid.pixel_center(r, c);
            double acc = 0.0;
            for (std::size_t v = 0; v < geom.n_views; ++v) {
                const double along = p.x * cos_t[v] + p.y * sin_t[v];   // toward the source
                const double across = -p.x * sin_t[v] + p.y * cos_t[v];  // detector axis
                double s = across;
                double weight = 1.0;
                if (fan) {
                    const double l = sod - along;
                    s = sod * across / l;
                    const double u = l / sod;
                    weight = 1.0 / (u * u);
                }
                const double idx = s / ds + center;
                if (idx < 0.0 || idx > static_cast<double>(nd - 1)) continue;
                const auto i0 = static_cast<std::size_t>(idx);
                const std::size_t i1 = std::min(i0 + 1, nd - 1);
                const double f = idx - static_cast<double>(i0);
                acc += weight * ((1.0 - f) * filtered(v, i0) + f * filtered(v, i1));
            }
            out(r, c) = acc * angle_weight;
        }
    });
    return out;
}

SystemMatrix::SystemMatrix(const ImageGrid& grid, const FanBeamGeometry& geom) : grid_(grid), geom_(geom) {
    grid.validate();
    geom.validate();
    const std::size_t n_rays = geom.n_views * geom.n_detectors;
    std::vector<RayPath> paths(n_rays);
    parallel_for(geom.n_views, [&](std::size_t v) {
        for (std::size_t d = 0; d < geom.n_detectors; ++d)
            paths[v * geom.n_detectors + d] = siddon_path(grid, detector_ray(geom, v, d));
    });
    row_start_.resize(n_rays + 1, 0);
    for (std::size_t i = 0; i < n_rays; ++i) row_start_[i + 1] = row_start_[i] + paths[i].size();
    cells_.resize(row_start_.back());
    lengths_.resize(row_start_.back());
    for (std::size_t i = 0; i < n_rays; ++i) {
        std::size_t k = row_start_[i];
        for (const auto& s : paths[i]) {
            cells_[k] = static_cast<std::uint32_t>(s.row * grid.n_cols + s.col);
            lengths_[k] = s.length_mm;
            ++k;
        }
    }
}

Image SystemMatrix::forward(const Image& image) const {
    validate_image(image, grid_);
    Image sino(geom_.n_views, geom_.n_detectors);
    const std::size_t nd = geom_.n_detectors;
    parallel_for(geom_.n_views, [&](std::size_t v) {
        for (std::size_t d = 0; d < nd; ++d) {
            const std::size_t ray = v * nd + d;
            double acc = 0.0;
            for (std::size_t k = row_start_[ray]; k < row_start_[ray + 1]; ++k) acc += image.data[cells_[k]] * lengths_[k];
            sino.data[ray] = acc;
        }
    });
    return sino;
}

Image SystemMatrix::adjoint(const Image& sinogram) const {
    validate_sinogram(sinogram, geom_);
    const std::size_t n_rays = sinogram.size();
    std::vector<Image> partial(kScatterChunks, grid_.blank());
    const std::size_t per = (n_rays + kScatterChunks - 1) / kScatterChunks;
    parallel_for(kScatterChunks, [&](std::size_t chunk) {
        auto& acc = partial[chunk].data;
        const std::size_t end = std::min(n_rays, (chunk + 1) * per);
        for (std::size_t ray = chunk * per; ray < end; ++ray) {
            const double val = sinogram.data[ray];
            for (std::size_t k = row_start_[ray]; k < row_start_[ray + 1]; ++k) acc[cells_[k]] += val * lengths_[k];
        }
    });
    Image out = grid_.blank();
    for (const auto& p : partial)
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += p.data[i];
    return out;
}

void to_json(nlohmann::json& j, const FanBeamGeometry& g) {
    j = nlohmann::json{{"source_to_detector_mm", g.source_to_detector_mm},
                       {"source_to_object_mm", g.source_to_object_mm},
                       {"detector_width_mm", g.detector_width_mm},
                       {"n_detectors", g.n_detectors},
                       {"n_views", g.n_views},
                       {"angular_range_rad", g.angular_range_rad},
                       {"beam", g.beam == BeamKind::Fan ? "fan" : "parallel"}};
}

void from_json(const nlohmann::json& j, FanBeamGeometry& g) {
    g = FanBeamGeometry{};
    j.at("source_to_detector_mm").get_to(g.source_to_detector_mm);
    j.at("source_to_object_mm").get_to(g.source_to_object_mm);
    j.at("detector_width_mm").get_to(g.detector_width_mm);
    j.at("n_detectors").get_to(g.n_detectors);
    j.at("n_views").get_to(g.n_views);
    if (j.contains("angular_range_rad")) j.at("angular_range_rad").get_to(g.angular_range_rad);
    const std::string beam = j.value("beam", std::string("fan"));
    if (beam == "fan")
        g.beam = BeamKind::Fan;
    else if (beam == "parallel")
        g.beam = BeamKind::Parallel;
    else
        throw GeometryError("unknown beam kind '" + beam + "'");
    g.validate();
}

void to_json(nlohmann::json& j, const ImageGrid& g) {
    j = nlohmann::json{{"n_rows", g.n_rows},
                       {"n_cols", g.n_cols},
                       {"pixel_size_mm", g.pixel_size_mm},
                       {"origin", {g.origin.x, g.origin.y}}};
}

void from_json(const nlohmann::json& j, ImageGrid& g) {
    g = ImageGrid{};
    j.at("n_rows").get_to(g.n_rows);
    j.at("n_cols").get_to(g.n_cols);
    j.at("pixel_size_mm").get_to(g.pixel_size_mm);
    if (j.contains("origin")) {
        g.origin.x = j.at("origin").at(0).get<double>();
        g.origin.y = j.at("origin").at(1).get<double>();
    }
    g.validate();
}

}  // namespace spectract
