#pragma once

#include <cstddef>
#include <cstdint>
#include <numbers>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectract/image.hpp"

namespace spectract {

enum class BeamKind { Fan, Parallel };

// Flat-detector fan-beam acquisition. Views are evenly spaced over
// angular_range_rad starting at angle zero. In Parallel mode the detector
// width is measured at the isocenter and the distances only place the ray
// endpoints outside the field of view.
struct FanBeamGeometry {
    double source_to_detector_mm = 500.0;
    double source_to_object_mm = 250.0;
    double detector_width_mm = 720.0;
    std::size_t n_detectors = 512;
    std::size_t n_views = 512;
    double angular_range_rad = 2.0 * std::numbers::pi;
    BeamKind beam = BeamKind::Fan;

    void validate() const;

    double detector_pitch_mm() const { return detector_width_mm / static_cast<double>(n_detectors); }
    double view_angle(std::size_t view) const {
        return angular_range_rad * static_cast<double>(view) / static_cast<double>(n_views);
    }
    // Signed detector-plane coordinate of element j, zero at the central ray.
    double detector_offset_mm(std::size_t j) const {
        return (static_cast<double>(j) - 0.5 * static_cast<double>(n_detectors - 1)) * detector_pitch_mm();
    }

    // 50 cm source-to-detector, 72 cm wide 512-element detector, full circle.
    static FanBeamGeometry clinical_preset(std::size_t n_views = 512);
    // 156 mm source-to-object, 256 mm source-to-detector, 0.110 mm pixels.
    static FanBeamGeometry small_animal_preset(std::size_t n_detectors, std::size_t n_views);

    bool operator==(const FanBeamGeometry&) const = default;
};

struct Point2 {
    double x = 0.0;
    double y = 0.0;
    bool operator==(const Point2&) const = default;
};

// Square-pixel reconstruction grid centered on `origin`. Row r, column c
// covers x in [x_min + c*p, x_min + (c+1)*p] and y in [y_min + r*p, ...].
struct ImageGrid {
    std::size_t n_rows = 1;
    std::size_t n_cols = 1;
    double pixel_size_mm = 1.0;
    Point2 origin{};

    void validate() const;

    double x_min() const { return origin.x - 0.5 * static_cast<double>(n_cols) * pixel_size_mm; }
    double y_min() const { return origin.y - 0.5 * static_cast<double>(n_rows) * pixel_size_mm; }
    double x_max() const { return x_min() + static_cast<double>(n_cols) * pixel_size_mm; }
    double y_max() const { return y_min() + static_cast<double>(n_rows) * pixel_size_mm; }
    Point2 pixel_center(std::size_t row, std::size_t col) const {
        return {x_min() + (static_cast<double>(col) + 0.5) * pixel_size_mm,
                y_min() + (static_cast<double>(row) + 0.5) * pixel_size_mm};
    }
    Image blank() const { return Image(n_rows, n_cols); }

    bool operator==(const ImageGrid&) const = default;
};

struct Ray {
    Point2 start;
    Point2 end;
};

struct PathSegment {
    std::size_t row = 0;
    std::size_t col = 0;
    double length_mm = 0.0;
};

// Ordered cell intersections of one ray, from start to end.
using RayPath = std::vector<PathSegment>;

Ray detector_ray(const FanBeamGeometry& geom, std::size_t view, std::size_t detector);

// Exact intersection lengths of `ray` with the cells of `grid`. A ray lying on
// a shared cell edge is charged to the lower-index cell. Misses give an empty
// path.
RayPath siddon_path(const ImageGrid& grid, const Ray& ray);

// Length of the part of the ray segment inside the closed bounding box.
double box_chord_length(const ImageGrid& grid, const Ray& ray);

// Line-integral sinogram (views x detectors) of `image` sampled on `grid`.
Image forward_project(const Image& image, const ImageGrid& grid, const FanBeamGeometry& geom);

// Exact adjoint of forward_project (unfiltered, length-weighted backprojection).
Image back_project(const Image& sinogram, const ImageGrid& grid, const FanBeamGeometry& geom);

enum class RampWindow { Ramp, Hann };

Image fbp_reconstruct(const Image& sinogram, const ImageGrid& grid, const FanBeamGeometry& geom,
                      RampWindow window = RampWindow::Ramp);

// Precomputed ray paths in compressed-row form. Only worth it when the same
// geometry is projected many times (iterative solvers, dataset generation).
class SystemMatrix {
public:
    SystemMatrix(const ImageGrid& grid, const FanBeamGeometry& geom);

    Image forward(const Image& image) const;
    Image adjoint(const Image& sinogram) const;

    const ImageGrid& grid() const { return grid_; }
    const FanBeamGeometry& geometry() const { return geom_; }
    std::size_t nonzeros() const { return cells_.size(); }

private:
    ImageGrid grid_;
    FanBeamGeometry geom_;
    std::vector<std::size_t> row_start_;
    std::vector<std::uint32_t> cells_;
    std::vector<double> lengths_;
};

void to_json(nlohmann::json& j, const FanBeamGeometry& g);
void from_json(const nlohmann::json& j, FanBeamGeometry& g);
void to_json(nlohmann::json& j, const ImageGrid& g);
void from_json(const nlohmann::json& j, ImageGrid& g);

}  // namespace spectract
