#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "spectract/geometry.hpp"
#include "spectract/image.hpp"

namespace spectract {

// Incident photons per ray for the two low-dose protocols.
inline constexpr double kPhotonsUltraLow = 3.0e3;
inline constexpr double kPhotonsLow = 1.2e4;

// Default clamp applied to counts before the log transform.
inline constexpr double kCountFloor = 0.5;

// Piecewise-linear curve over ascending abscissae; clamps outside the range.
struct TabulatedCurve {
    std::vector<double> x;
    std::vector<double> y;

    double operator()(double at) const;
};

// Two-column whitespace-separated text (keV, value); '#' starts a comment.
TabulatedCurve load_two_column(const std::filesystem::path& path);

// Resolves a bundled data file: $SPECTRACT_DATA_DIR if set, else the
// directory baked in at build time.
std::filesystem::path data_file(const std::string& name);

struct EnergySpectrum {
    std::vector<double> energies_keV;
    std::vector<double> weights;

    void validate() const;
    // Same energies, weights scaled to sum to one.
    EnergySpectrum normalized() const;

    static EnergySpectrum from_curve(const TabulatedCurve& curve);
    // Bundled 120 kVp tungsten-anode spectrum at 1 keV spacing.
    static EnergySpectrum tungsten_120kvp();
};

struct Material {
    std::string name;
    TabulatedCurve mass_attenuation_cm2_g;
    double density_g_cm3 = 1.0;
};

// Materials in the order the density maps are supplied.
struct AttenuationTable {
    std::vector<Material> materials;

    void validate() const;
    double mass_attenuation(std::size_t material, double energy_keV) const {
        return materials.at(material).mass_attenuation_cm2_g(energy_keV);
    }

    // {soft tissue, cortical bone} from the bundled tables.
    static AttenuationTable soft_tissue_and_bone();
};

struct EnergyBin {
    double lo_keV = 0.0;
    double hi_keV = 0.0;
    bool operator==(const EnergyBin&) const = default;
};

// Contiguous ascending bins. Bins are half-open [lo, hi) except the last,
// which also includes its upper edge.
struct EnergyBinSet {
    std::vector<EnergyBin> bins;

    void validate() const;
    std::size_t size() const { return bins.size(); }
    bool contains(std::size_t bin, double energy_keV) const;

    // [52,64], [64,73], [73,80], [80,87], [87,99], [99,120] keV.
    static EnergyBinSet paper_six();
    // "paper6" or a comma-separated edge list such as "52,64,73".
    static EnergyBinSet parse(const std::string& text);
};

// Per-bin line integrals (views x detectors) with flat-field counts.
struct SinogramStack {
    std::vector<Image> bins;
    std::vector<double> flat;

    void validate() const;
    std::size_t size() const { return bins.size(); }
    // flat * exp(-y) per bin.
    std::vector<Image> expected_counts() const;
};

// Clean polychromatic projections from per-material path integrals
// (density-weighted lengths, g/cm^3 * mm), one sinogram per material.
SinogramStack polychromatic_from_paths(const std::vector<Image>& material_paths, const EnergySpectrum& spectrum,
                                       const EnergyBinSet& bins, const AttenuationTable& table,
                                       double photons_per_ray);

// Projects the density maps (g/cm^3) with the Siddon projector and applies
// the discrete Beer-Lambert model. photons_per_ray is the whole-spectrum
// incident count; each bin receives its spectral share.
SinogramStack polychromatic_sinogram(const std::vector<Image>& density_maps, const EnergySpectrum& spectrum,
                                     const EnergyBinSet& bins, const ImageGrid& grid, const FanBeamGeometry& geom,
                                     const AttenuationTable& table, double photons_per_ray);

// Independent Poisson draw per entry; reproducible for a fixed seed.
Image poisson_corrupt(const Image& clean_counts, std::uint64_t seed);
std::vector<Image> poisson_corrupt(const std::vector<Image>& clean_counts, std::uint64_t seed);

Image counts_to_lineintegral(const Image& counts, double flat, double floor = kCountFloor);

// Log-mean-exp fusion of the per-bin line integrals into one
// full-spectrum projection.
Image fuse_full_spectrum(const SinogramStack& stack);
Image fuse_full_spectrum(const std::vector<Image>& bins);

}  // namespace spectract
