#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectract/image.hpp"
#include "spectract/pipeline.hpp"

namespace spectract {

namespace fs = std::filesystem;

// Row-major little-endian payload `<stem>.<dtype>` with sidecar `<stem>.json`.
// Data arrays are f32; parameter checkpoints use f64 so a reload is exact.
struct ArrayContainer {
    std::vector<std::size_t> shape;
    std::string dtype = "f32";
    std::vector<std::string> axes;
    std::string units;
    std::string creator = "spectract";
    std::uint64_t seed = 0;
    nlohmann::json attributes = nlohmann::json::object();
    std::vector<double> values;

    std::size_t element_count() const;
    void validate() const;
};

// `path` may name the stem or either file of the pair.
void save_array(const fs::path& path, const ArrayContainer& a);
// IntegrityError when the payload length disagrees with the sidecar.
ArrayContainer load_array(const fs::path& path);

// [n, rows, cols] from equal-shape images, and back.
ArrayContainer stack_array(const std::vector<Image>& images, std::vector<std::string> axes, std::string units);
std::vector<Image> unstack_array(const ArrayContainer& a);

// Noisy and clean sinogram stacks of a set of slices: <dir>/noisy_<i>, <dir>/clean_<i>
// with shape [bins, views, detectors]; flat-field counts go in the sidecar attributes.
void save_slices(const fs::path& dir, const std::vector<Slice>& slices, std::uint64_t seed);
std::vector<Slice> load_slices(const fs::path& dir);

// Models, normalization and profile in one directory.
void save_models(const fs::path& dir, const ModelSet& models);
ModelSet load_models(const fs::path& dir);
// Single-domain checkpoint: <dir>/<name>.json plus parameter arrays.
void save_domain_model(const fs::path& dir, const std::string& name, const DomainModel& m);
DomainModel load_domain_model(const fs::path& dir, const std::string& name);

struct RunManifest {
    std::string command;
    std::vector<std::string> arguments;  // argv after the subcommand
    std::vector<std::string> config_paths;
    std::vector<std::uint64_t> seeds;
    std::string git_describe;
    std::string started;
    std::string finished;
    std::vector<std::string> outputs;

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

std::string build_describe();
std::string utc_timestamp();

void write_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

struct DisplayWindow {
    double lo = 0.0;
    double hi = 1.0;
    void validate() const;
    // "lo,hi"
    static DisplayWindow parse(const std::string& text);
};

// Linear map of [lo, hi] to 0..255 with clamping.
std::vector<std::uint8_t> to_gray8(const Image& img, const DisplayWindow& w);
void write_png(const fs::path& path, const Image& img, const DisplayWindow& w);
// 8-bit grayscale PNG back to raw byte values (for tests).
std::vector<std::uint8_t> read_png_gray(const fs::path& path, std::size_t& rows, std::size_t& cols);

struct RenderedFigure {
    std::string name;
    fs::path image;
    fs::path residual;  // empty for the reference itself
};

// One panel per image and one |reference - image| panel per non-reference image.
std::vector<RenderedFigure> render_figures(const fs::path& dir, const Image& reference,
                                           const std::vector<std::pair<std::string, Image>>& images,
                                           const DisplayWindow& window, const DisplayWindow& residual_window);

struct PlotSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
};

// Line chart with markers as a standalone SVG document.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<PlotSeries>& series, bool log_x = false);

}  // namespace spectract
