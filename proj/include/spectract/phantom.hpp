#pragma once

#include <cstdint>
#include <vector>

#include "spectract/geometry.hpp"

namespace spectract {

// Two-material density maps in g/cm^3. Where bone is present the soft-tissue
// map is zero.
struct MaterialPhantom {
    Image soft_tissue;
    Image bone;

    std::vector<Image> maps() const { return {soft_tissue, bone}; }
};

struct Ellipse {
    double cx = 0.0;  // in units of the grid half-extent
    double cy = 0.0;
    double ax = 0.0;
    double ay = 0.0;
    double angle = 0.0;
    double density = 0.0;
};

// Area-weighted rasterization (2x2 supersampling); later ellipses overwrite
// earlier ones.
void paint_ellipse(Image& img, const ImageGrid& grid, const Ellipse& e);

// Procedural torso-like slice: soft-tissue body with organs and lung
// cavities, a spine, ribs and small calcifications. Scales with the grid.
MaterialPhantom make_phantom(const ImageGrid& grid, std::uint64_t seed);

}  // namespace spectract
