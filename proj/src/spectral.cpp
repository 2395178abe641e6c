#include "spectract/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "spectract/parallel.hpp"
#include "spectract/rng.hpp"

namespace spectract {

double TabulatedCurve::operator()(double at) const {
    if (x.empty()) throw ConfigError("empty tabulated curve");
    if (at <= x.front()) return y.front();
    if (at >= x.back()) return y.back();
    const auto it = std::upper_bound(x.begin(), x.end(), at);
    const std::size_t i = static_cast<std::size_t>(it - x.begin());
    const double t = (at - x[i - 1]) / (x[i] - x[i - 1]);
    return y[i - 1] + t * (y[i] - y[i - 1]);
}

TabulatedCurve load_two_column(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open table " + path.string());
    TabulatedCurve curve;
    std::string line;
    while (std::getline(in, line)) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ss(line);
        double a = 0.0;
        double b = 0.0;
        if (!(ss >> a)) continue;
        if (!(ss >> b)) throw ConfigError("malformed row in " + path.string() + ": '" + line + "'");
        curve.x.push_back(a);
        curve.y.push_back(b);
    }
    if (curve.x.empty()) throw ConfigError("no rows in " + path.string());
    for (std::size_t i = 1; i < curve.x.size(); ++i)
        if (!(curve.x[i] > curve.x[i - 1])) throw ConfigError("abscissae not ascending in " + path.string());
    return curve;
}

std::filesystem::path data_file(const std::string& name) {
    if (const char* env = std::getenv("SPECTRACT_DATA_DIR")) return std::filesystem::path(env) / name;
    return std::filesystem::path(SPECTRACT_DATA_DIR) / name;
}

void EnergySpectrum::validate() const {
    if (energies_keV.empty() || energies_keV.size() != weights.size())
        throw ConfigError("spectrum needs matching, non-empty energy and weight lists");
    for (std::size_t i = 1; i < energies_keV.size(); ++i)
        if (!(energies_keV[i] > energies_keV[i - 1])) throw ConfigError("spectrum energies must be strictly ascending");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("spectrum weights must be non-negative");
        total += w;
    }
    if (!(total > 0.0)) throw ConfigError("spectrum has zero total weight");
}

EnergySpectrum EnergySpectrum::normalized() const {
    validate();
    EnergySpectrum out = *this;
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    for (double& w : out.weights) w /= total;
    return out;
}

EnergySpectrum EnergySpectrum::from_curve(const TabulatedCurve& curve) {
    EnergySpectrum s{curve.x, curve.y};
    return s.normalized();
}

EnergySpectrum EnergySpectrum::tungsten_120kvp() {
    return from_curve(load_two_column(data_file("spectrum_w120kvp.txt")));
}

void AttenuationTable::validate() const {
    if (materials.empty()) throw ConfigError("attenuation table has no materials");
    for (const auto& m : materials) {
        if (m.mass_attenuation_cm2_g.x.empty()) throw ConfigError("material " + m.name + " has no attenuation data");
        for (double v : m.mass_attenuation_cm2_g.y)
            if (!(v > 0.0)) throw ConfigError("material " + m.name + " has non-positive attenuation");
        if (!(m.density_g_cm3 > 0.0)) throw ConfigError("material " + m.name + " has non-positive density");
    }
}

AttenuationTable AttenuationTable::soft_tissue_and_bone() {
    AttenuationTable t;
    t.materials.push_back({"soft_tissue", load_two_column(data_file("soft_tissue.txt")), 1.06});
    t.materials.push_back({"cortical_bone", load_two_column(data_file("cortical_bone.txt")), 1.92});
    return t;
}

void EnergyBinSet::validate() const {
    if (bins.empty()) throw ConfigError("no energy bins");
    for (std::size_t i = 0; i < bins.size(); ++i) {
        if (!(bins[i].hi_keV > bins[i].lo_keV)) throw ConfigError("energy bin edges must ascend");
        if (i > 0 && bins[i].lo_keV != bins[i - 1].hi_keV) throw ConfigError("energy bins must be contiguous");
    }
}

bool EnergyBinSet::contains(std::size_t bin, double e) const {
    const auto& b = bins.at(bin);
    if (bin + 1 == bins.size()) return e >= b.lo_keV && e <= b.hi_keV;
    return e >= b.lo_keV && e < b.hi_keV;
}

EnergyBinSet EnergyBinSet::paper_six() {
    EnergyBinSet s;
    const double edges[] = {52, 64, 73, 80, 87, 99, 120};
    for (std::size_t i = 0; i + 1 < std::size(edges); ++i) s.bins.push_back({edges[i], edges[i + 1]});
    return s;
}

EnergyBinSet EnergyBinSet::parse(const std::string& text) {
    if (text == "paper6") return paper_six();
    std::vector<double> edges;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            edges.push_back(std::stod(tok));
        } catch (...) {
            throw ConfigError("bad energy bin edge '" + tok + "'");
        }
    }
    if (edges.size() < 2) throw ConfigError("need at least two bin edges");
    EnergyBinSet s;
    for (std::size_t i = 0; i + 1 < edges.size(); ++i) s.bins.push_back({edges[i], edges[i + 1]});
    s.validate();
    return s;
}

void SinogramStack::validate() const {
    if (bins.empty()) throw DomainError("empty sinogram stack");
    if (flat.size() != bins.size()) throw DimensionError("flat-field count list does not match bin count");
    for (std::size_t b = 0; b < bins.size(); ++b) {
        if (!bins[b].same_shape(bins[0])) throw DimensionError("sinogram bins differ in shape");
        if (!(flat[b] > 0.0)) throw DomainError("flat-field counts must be positive");
        for (double v : bins[b].data)
            if (!std::isfinite(v)) throw DomainError("non-finite line integral");
    }
}

std::vector<Image> SinogramStack::expected_counts() const {
    std::vector<Image> out;
    out.reserve(bins.size());
    for (std::size_t b = 0; b < bins.size(); ++b) {
        Image c = bins[b];
        for (double& v : c.data) v = flat[b] * std::exp(-v);
        out.push_back(std::move(c));
    }
    return out;
}

SinogramStack polychromatic_from_paths(const std::vector<Image>& material_paths, const EnergySpectrum& spectrum,
                                       const EnergyBinSet& bins, const AttenuationTable& table,
                                       double photons_per_ray) {
    bins.validate();
    table.validate();
    if (!(photons_per_ray > 0.0)) throw ConfigError("photons per ray must be positive");
    if (material_paths.size() != table.materials.size())
        throw DimensionError("one path-integral sinogram per material is required");
    for (const auto& p : material_paths)
        if (!p.same_shape(material_paths.front())) throw DimensionError("material sinograms differ in shape");
    const auto spec = spectrum.normalized();

    const std::size_t n_mat = material_paths.size();
    SinogramStack stack;
    for (std::size_t b = 0; b < bins.size(); ++b) {
        // Energies, spectral weights and per-material attenuation (1/mm per g/cm^3) inside the bin.
        std::vector<double> weights;
        std::vector<std::vector<double>> mu;  // [energy][material]
        for (std::size_t e = 0; e < spec.energies_keV.size(); ++e) {
            const double energy = spec.energies_keV[e];
            if (!bins.contains(b, energy)) continue;
            weights.push_back(spec.weights[e]);
            std::vector<double> m(n_mat);
            // cm^2/g * (g/cm^3 * mm) * 0.1 cm/mm
            for (std::size_t k = 0; k < n_mat; ++k) m[k] = 0.1 * table.mass_attenuation(k, energy);
            mu.push_back(std::move(m));
        }
        if (weights.empty())
            throw ConfigError("energy bin [" + std::to_string(bins.bins[b].lo_keV) + ", " +
                              std::to_string(bins.bins[b].hi_keV) + "] keV contains no spectrum samples");
        const double share = std::accumulate(weights.begin(), weights.end(), 0.0);
        if (!(share > 0.0)) throw ConfigError("energy bin receives no photons");

        Image y(material_paths.front().rows, material_paths.front().cols);
        for (std::size_t i = 0; i < y.size(); ++i) {
            // Transmitted fraction relative to the bin's flat field.
            double transmitted = 0.0;
            for (std::size_t e = 0; e < weights.size(); ++e) {
                double exponent = 0.0;
                for (std::size_t k = 0; k < n_mat; ++k) exponent += mu[e][k] * material_paths[k].data[i];
                transmitted += weights[e] * std::exp(-exponent);
            }
            y.data[i] = -std::log(transmitted / share);
        }
        stack.bins.push_back(std::move(y));
        stack.flat.push_back(photons_per_ray * share);
    }
    return stack;
}

SinogramStack polychromatic_sinogram(const std::vector<Image>& density_maps, const EnergySpectrum& spectrum,
                                     const EnergyBinSet& bins, const ImageGrid& grid, const FanBeamGeometry& geom,
                                     const AttenuationTable& table, double photons_per_ray) {
    if (density_maps.empty()) throw DimensionError("no material maps");
    for (const auto& m : density_maps)
        if (m.rows != grid.n_rows || m.cols != grid.n_cols) throw DimensionError("material maps must share one grid");
    std::vector<Image> paths;
    paths.reserve(density_maps.size());
    for (const auto& m : density_maps) paths.push_back(forward_project(m, grid, geom));
    return polychromatic_from_paths(paths, spectrum, bins, table, photons_per_ray);
}

Image poisson_corrupt(const Image& clean_counts, std::uint64_t seed) {
    Rng rng(seed);
    Image out = clean_counts;
    for (double& v : out.data) {
        if (!(v >= 0.0)) throw DomainError("Poisson mean must be non-negative");
        if (v == 0.0) continue;
        std::poisson_distribution<long long> dist(v);
        v = static_cast<double>(dist(rng));
    }
    return out;
}

std::vector<Image> poisson_corrupt(const std::vector<Image>& clean_counts, std::uint64_t seed) {
    std::vector<Image> out(clean_counts.size());
    parallel_for(clean_counts.size(),
                 [&](std::size_t b) { out[b] = poisson_corrupt(clean_counts[b], derive_seed(seed, {b})); });
    return out;
}

Image counts_to_lineintegral(const Image& counts, double flat, double floor) {
    if (!(flat > 0.0)) throw DomainError("flat-field counts must be positive");
    Image y = counts;
    for (double& v : y.data) v = -std::log(std::max(v, floor) / flat);
    return y;
}

Image fuse_full_spectrum(const std::vector<Image>& bins) {
    if (bins.empty()) throw DomainError("cannot fuse an empty stack");
    for (const auto& b : bins)
        if (!b.same_shape(bins.front())) throw DimensionError("bins differ in shape");
    const double n = static_cast<double>(bins.size());
    Image out(bins.front().rows, bins.front().cols);
    for (std::size_t i = 0; i < out.size(); ++i) {
        double lo = std::numeric_limits<double>::infinity();
        for (const auto& b : bins) lo = std::min(lo, b.data[i]);
        // -ln(mean(exp(-y))) shifted by the smallest y for stability.
        double acc = 0.0;
        for (const auto& b : bins) acc += std::exp(-(b.data[i] - lo));
        out.data[i] = lo - std::log(acc / n);
    }
    return out;
}

Image fuse_full_spectrum(const SinogramStack& stack) {
    if (stack.bins.empty()) throw DomainError("cannot fuse an empty stack");
    return fuse_full_spectrum(stack.bins);
}

}  // namespace spectract
