#include "spectract/io.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include <png.h>

#include "spectract/errors.hpp"

#ifndef SPECTRACT_GIT_DESCRIBE
#define SPECTRACT_GIT_DESCRIBE "unknown"
#endif

namespace spectract {

static_assert(std::endian::native == std::endian::little, "payloads are written in host order");

// ---------------------------------------------------------------------------
// Arrays

std::size_t ArrayContainer::element_count() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

void ArrayContainer::validate() const {
    if (dtype != "f32" && dtype != "f64") throw ConfigError("unsupported dtype '" + dtype + "'");
    if (shape.empty()) throw DimensionError("array needs at least one axis");
    if (!axes.empty() && axes.size() != shape.size()) throw DimensionError("one axis label per dimension required");
    if (values.size() != element_count())
        throw DimensionError("array holds " + std::to_string(values.size()) + " values, shape needs " +
                             std::to_string(element_count()));
}

namespace {

fs::path stem_of(const fs::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".json" || ext == ".f32" || ext == ".f64") return path.parent_path() / path.stem();
    return path;
}

fs::path with_suffix(const fs::path& stem, const std::string& suffix) { return fs::path(stem.string() + suffix); }

}  // namespace

void save_array(const fs::path& path, const ArrayContainer& a) {
    a.validate();
    const fs::path stem = stem_of(path);
    if (!stem.parent_path().empty()) fs::create_directories(stem.parent_path());
    const fs::path payload = with_suffix(stem, "." + a.dtype);
    std::ofstream out(payload, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + payload.string());
    if (a.dtype == "f32") {
        std::vector<float> buf(a.values.begin(), a.values.end());
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
        out.write(reinterpret_cast<const char*>(a.values.data()),
                  static_cast<std::streamsize>(a.values.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("short write to " + payload.string());
    nlohmann::json side = {{"shape", a.shape},   {"dtype", a.dtype},     {"axes", a.axes},
                           {"units", a.units},   {"creator", a.creator}, {"seed", a.seed},
                           {"attributes", a.attributes}};
    write_json(with_suffix(stem, ".json"), side);
}

ArrayContainer load_array(const fs::path& path) {
    const fs::path stem = stem_of(path);
    const fs::path sidecar = with_suffix(stem, ".json");
    if (!fs::exists(sidecar)) throw IntegrityError("missing sidecar " + sidecar.string());
    ArrayContainer a;
    try {
        const auto j = read_json(sidecar);
        a.shape = j.at("shape").get<std::vector<std::size_t>>();
        a.dtype = j.at("dtype").get<std::string>();
        a.axes = j.value("axes", std::vector<std::string>{});
        a.units = j.value("units", std::string());
        a.creator = j.value("creator", std::string());
        a.seed = j.value("seed", std::uint64_t{0});
        a.attributes = j.value("attributes", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("malformed sidecar " + sidecar.string() + ": " + e.what());
    }
    if (a.dtype != "f32" && a.dtype != "f64") throw IntegrityError("unsupported dtype '" + a.dtype + "'");
    const fs::path payload = with_suffix(stem, "." + a.dtype);
    if (!fs::exists(payload)) throw IntegrityError("missing payload " + payload.string());
    const std::size_t width = a.dtype == "f32" ? 4 : 8;
    const auto bytes = fs::file_size(payload);
    if (bytes != a.element_count() * width)
        throw IntegrityError(payload.string() + " holds " + std::to_string(bytes) + " bytes, sidecar shape needs " +
                             std::to_string(a.element_count() * width));
    std::ifstream in(payload, std::ios::binary);
    a.values.resize(a.element_count());
    if (width == 4) {
        std::vector<float> buf(a.values.size());
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
        std::copy(buf.begin(), buf.end(), a.values.begin());
    } else {
        in.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(bytes));
    }
    if (!in) throw IntegrityError("short read from " + payload.string());
    return a;
}

ArrayContainer stack_array(const std::vector<Image>& images, std::vector<std::string> axes, std::string units) {
    if (images.empty()) throw DimensionError("no images to stack");
    ArrayContainer a;
    a.shape = {images.size(), images.front().rows, images.front().cols};
    a.axes = std::move(axes);
    a.units = std::move(units);
    for (const auto& img : images) {
        if (!img.same_shape(images.front())) throw DimensionError("stacked images differ in shape");
        a.values.insert(a.values.end(), img.data.begin(), img.data.end());
    }
    return a;
}

std::vector<Image> unstack_array(const ArrayContainer& a) {
    if (a.shape.size() == 2) {
        Image img(a.shape[0], a.shape[1]);
        img.data = a.values;
        return {img};
    }
    if (a.shape.size() != 3) throw DimensionError("expected a rank-2 or rank-3 array");
    std::vector<Image> out;
    const std::size_t plane = a.shape[1] * a.shape[2];
    for (std::size_t k = 0; k < a.shape[0]; ++k) {
        Image img(a.shape[1], a.shape[2]);
        std::copy_n(a.values.begin() + static_cast<long>(k * plane), plane, img.data.begin());
        out.push_back(std::move(img));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Slices and models

void save_slices(const fs::path& dir, const std::vector<Slice>& slices, std::uint64_t seed) {
    fs::create_directories(dir);
    for (std::size_t i = 0; i < slices.size(); ++i) {
        for (const auto& [name, stack] : {std::pair{"noisy", &slices[i].noisy}, std::pair{"clean", &slices[i].clean}}) {
            auto a = stack_array(stack->bins, {"bin", "view", "detector"}, "line integral");
            a.seed = seed;
            a.attributes["flat_counts"] = stack->flat;
            a.attributes["slice"] = i;
            save_array(dir / (std::string(name) + "_" + std::to_string(i)), a);
        }
    }
    write_json(dir / "slices.json", {{"count", slices.size()}, {"seed", seed}});
}

std::vector<Slice> load_slices(const fs::path& dir) {
    const auto j = read_json(dir / "slices.json");
    const auto n = j.at("count").get<std::size_t>();
    std::vector<Slice> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (const auto& [name, stack] : {std::pair{"noisy", &out[i].noisy}, std::pair{"clean", &out[i].clean}}) {
            const auto a = load_array(dir / (std::string(name) + "_" + std::to_string(i)));
            stack->bins = unstack_array(a);
            stack->flat = a.attributes.at("flat_counts").get<std::vector<double>>();
            stack->validate();
        }
    }
    return out;
}

namespace {

ArrayContainer param_array(const nn::ParamStore& store) {
    ArrayContainer a;
    a.dtype = "f64";
    a.shape = {store.size()};
    a.axes = {"parameter"};
    a.values = store.values();
    a.attributes["layout"] = store.layout();
    return a;
}

void load_params(nn::ParamStore& store, const ArrayContainer& a, const std::string& what) {
    if (a.values.size() != store.size())
        throw IntegrityError(what + ": checkpoint has " + std::to_string(a.values.size()) + " parameters, model needs " +
                             std::to_string(store.size()));
    store.values() = a.values;
}

}  // namespace

void save_domain_model(const fs::path& dir, const std::string& name, const DomainModel& m) {
    fs::create_directories(dir);
    save_array(dir / (name + "_codec"), param_array(m.codec.params()));
    save_array(dir / (name + "_denoiser"), param_array(m.denoiser.params()));
    ArrayContainer w;
    w.dtype = "f64";
    w.shape = {m.weights.weights.rows, m.weights.weights.cols};
    w.axes = {"row", "col"};
    w.values = m.weights.weights.data;
    save_array(dir / (name + "_weights"), w);
    write_json(dir / (name + ".json"), {{"codec", m.codec.config()}, {"denoiser", m.denoiser.config()}, {"schedule", m.schedule}});
}

DomainModel load_domain_model(const fs::path& dir, const std::string& name) {
    const auto j = read_json(dir / (name + ".json"));
    Codec codec = Codec::create(j.at("codec").get<CodecConfig>(), 0);
    Denoiser den = Denoiser::create(j.at("denoiser").get<DenoiserConfig>(), 0);
    load_params(codec.params(), load_array(dir / (name + "_codec")), name + " codec");
    load_params(den.params(), load_array(dir / (name + "_denoiser")), name + " denoiser");
    const auto w = load_array(dir / (name + "_weights"));
    if (w.shape.size() != 2) throw IntegrityError(name + ": weight map must be rank 2");
    WeightMap wm{Image(w.shape[0], w.shape[1])};
    wm.weights.data = w.values;
    wm.validate();
    return DomainModel{std::move(codec), std::move(den), j.at("schedule").get<NoiseSchedule>(), std::move(wm)};
}

void save_models(const fs::path& dir, const ModelSet& m) {
    fs::create_directories(dir);
    std::vector<std::string> variants;
    if (m.projection) save_domain_model(dir, "projection", *m.projection);
    for (const auto& [v, model] : m.image) {
        save_domain_model(dir, "image_" + to_string(v), model);
        variants.push_back(to_string(v));
    }
    write_json(dir / "models.json", {{"profile", m.profile},
                                     {"normalization", m.norm},
                                     {"projection", m.projection.has_value()},
                                     {"image_variants", variants},
                                     {"logs", m.logs}});
}

ModelSet load_models(const fs::path& dir) {
    const auto j = read_json(dir / "models.json");
    ModelSet m;
    m.profile = j.at("profile").get<AcquisitionProfile>();
    m.norm = j.at("normalization").get<Normalization>();
    m.norm.validate(m.profile.bins.size());
    if (j.at("projection").get<bool>()) m.projection = load_domain_model(dir, "projection");
    for (const auto& v : j.at("image_variants").get<std::vector<std::string>>())
        m.image.emplace(parse_variant(v), load_domain_model(dir, "image_" + v));
    m.logs = j.value("logs", nlohmann::json::object());
    return m;
}

// ---------------------------------------------------------------------------
// Manifests and text

nlohmann::json RunManifest::to_json() const {
    return {{"command", command},           {"arguments", arguments}, {"config_paths", config_paths},
            {"seeds", seeds},               {"git_describe", git_describe}, {"started", started},
            {"finished", finished},         {"outputs", outputs}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.arguments = j.at("arguments").get<std::vector<std::string>>();
    m.config_paths = j.value("config_paths", std::vector<std::string>{});
    m.seeds = j.value("seeds", std::vector<std::uint64_t>{});
    m.git_describe = j.value("git_describe", std::string());
    m.started = j.value("started", std::string());
    m.finished = j.value("finished", std::string());
    m.outputs = j.value("outputs", std::vector<std::string>{});
    return m;
}

std::string build_describe() { return SPECTRACT_GIT_DESCRIBE; }

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream s;
    s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return s.str();
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw IntegrityError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

// ---------------------------------------------------------------------------
// Images

void DisplayWindow::validate() const {
    if (!(lo < hi)) throw ConfigError("display window needs lo < hi");
}

DisplayWindow DisplayWindow::parse(const std::string& text) {
    const auto comma = text.find(',');
    if (comma == std::string::npos) throw ConfigError("window must be given as lo,hi");
    DisplayWindow w;
    try {
        w.lo = std::stod(text.substr(0, comma));
        w.hi = std::stod(text.substr(comma + 1));
    } catch (const std::exception&) {
        throw ConfigError("window must be given as lo,hi");
    }
    w.validate();
    return w;
}

std::vector<std::uint8_t> to_gray8(const Image& img, const DisplayWindow& w) {
    w.validate();
    std::vector<std::uint8_t> out(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double t = std::clamp((img.data[i] - w.lo) / (w.hi - w.lo), 0.0, 1.0);
        out[i] = static_cast<std::uint8_t>(std::lround(255.0 * t));
    }
    return out;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

}  // namespace

void write_png(const fs::path& path, const Image& img, const DisplayWindow& w) {
    const auto gray = to_gray8(img, w);
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("PNG encoding failed for " + path.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.cols), static_cast<png_uint_32>(img.rows), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    // Row 0 of the grid is the lowest y; write top row first.
    for (std::size_t r = img.rows; r-- > 0;) png_write_row(png, gray.data() + r * img.cols);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_png_gray(const fs::path& path, std::size_t& rows, std::size_t& cols) {
    std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("cannot read " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IntegrityError("PNG decoding failed for " + path.string());
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IntegrityError(path.string() + " is not 8-bit grayscale");
    }
    cols = png_get_image_width(png, info);
    rows = png_get_image_height(png, info);
    std::vector<std::uint8_t> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) png_read_row(png, out.data() + r * cols, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

std::vector<RenderedFigure> render_figures(const fs::path& dir, const Image& reference,
                                           const std::vector<std::pair<std::string, Image>>& images,
                                           const DisplayWindow& window, const DisplayWindow& residual_window) {
    window.validate();
    residual_window.validate();
    fs::create_directories(dir);
    std::vector<RenderedFigure> out;
    RenderedFigure ref{"reference", dir / "reference.png", {}};
    write_png(ref.image, reference, window);
    out.push_back(ref);
    for (const auto& [name, img] : images) {
        require_same_shape(img, reference, "render_figures");
        RenderedFigure fig{name, dir / (name + ".png"), dir / (name + "_residual.png")};
        write_png(fig.image, img, window);
        Image res(img.rows, img.cols);
        for (std::size_t i = 0; i < img.size(); ++i) res.data[i] = std::abs(reference.data[i] - img.data[i]);
        write_png(fig.residual, res, residual_window);
        out.push_back(fig);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Plots

namespace {

std::string escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        if (c == '<') o += "&lt;";
        else if (c == '>') o += "&gt;";
        else if (c == '&') o += "&amp;";
        else o += c;
    }
    return o;
}

std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(4) << v;
    return s.str();
}

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<PlotSeries>& series, bool log_x) {
    const double W = 640, H = 400, left = 70, right = 150, top = 40, bottom = 50;
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    auto tx = [&](double x) { return log_x ? std::log2(x) : x; };
    for (const auto& s : series) {
        if (s.x.size() != s.y.size()) throw DimensionError("plot series '" + s.label + "' has unequal x and y lengths");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, tx(s.x[i]));
            x1 = std::max(x1, tx(s.x[i]));
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    const double pad = y1 > y0 ? 0.08 * (y1 - y0) : 0.5;
    y0 -= pad;
    y1 += pad;
    auto px = [&](double x) { return left + (tx(x) - x0) / (x1 - x0) * (W - left - right); };
    auto py = [&](double y) { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); };
    static const char* colors[] = {"#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6a4c93", "#00798c", "#555555"};

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
    o << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
      << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
      << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double y = y0 + (y1 - y0) * k / 4.0;
        o << "<text x=\"" << left - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << fmt(y) << "</text>\n";
        o << "<line x1=\"" << left << "\" y1=\"" << py(y) << "\" x2=\"" << W - right << "\" y2=\"" << py(y)
          << "\" stroke=\"#dddddd\"/>\n";
    }
    std::vector<double> ticks;
    for (const auto& s : series)
        for (double x : s.x) ticks.push_back(x);
    std::sort(ticks.begin(), ticks.end());
    ticks.erase(std::unique(ticks.begin(), ticks.end()), ticks.end());
    for (double x : ticks)
        o << "<text x=\"" << px(x) << "\" y=\"" << H - bottom + 16 << "\" text-anchor=\"middle\">" << fmt(x)
          << "</text>\n";
    o << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">"
      << escape(x_label) << "</text>\n";
    o << "<text transform=\"translate(16," << (top + H - bottom) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(y_label) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* c = colors[k % 7];
        o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            if (std::isfinite(s.y[i])) o << px(s.x[i]) << "," << py(s.y[i]) << " ";
        o << "\"/>\n";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            if (std::isfinite(s.y[i]))
                o << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"" << c << "\"/>\n";
        const double ly = top + 16 * static_cast<double>(k);
        o << "<line x1=\"" << W - right + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - right + 30 << "\" y2=\"" << ly
          << "\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << W - right + 36 << "\" y=\"" << ly + 4 << "\">" << escape(s.label) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

}  // namespace spectract
