#include <doctest.h>

#include <cmath>
#include <fstream>

#include "spectract/errors.hpp"
#include "spectract/io.hpp"
#include "spectract/pipeline.hpp"

using namespace spectract;
using nn::Tensor;

namespace {

AcquisitionProfile tiny_profile() {
    auto p = AcquisitionProfile::toy(32);
    p.geometry.n_views = 32;
    p.geometry.n_detectors = 48;
    return p;
}

CodecConfig tiny_codec(std::size_t channels) {
    CodecConfig c;
    c.in_channels = channels;
    c.latent_channels = 4;
    c.unshuffle = 4;
    c.encoder_width = 8;
    c.encoder_blocks = 1;
    c.widths = {4, 6, 8};
    c.down_blocks = {1, 1, 1};
    c.up_blocks = {1, 1};
    return c;
}

DomainModel untrained(std::size_t channels, std::size_t rows, std::size_t cols, std::uint64_t seed) {
    const auto cc = tiny_codec(channels);
    return DomainModel{Codec::create(cc, seed), Denoiser::create(DenoiserConfig{cc.latent_dim(), 16, 1, 8}, seed + 1),
                       make_schedule(4), WeightMap::constant(rows, cols, 1.0)};
}

struct Fixture {
    AcquisitionProfile profile = tiny_profile();
    std::vector<Slice> slices = simulate_slices(profile, 5, 0, 2);
    Normalization norm = Normalization::fit(slices, profile);

    ModelSet models() const {
        ModelSet m;
        m.profile = profile;
        m.norm = norm;
        m.projection = untrained(1, profile.geometry.n_views, profile.geometry.n_detectors, 3);
        for (Variant v : {Variant::I, Variant::IP, Variant::FSP})
            m.image.emplace(v, untrained(image_channels(v), profile.grid.n_rows, profile.grid.n_cols, 10 + image_channels(v)));
        return m;
    }
};

Image ramp_image(std::size_t rows, std::size_t cols, double offset) {
    Image img(rows, cols);
    for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = offset + 0.001 * static_cast<double>(i);
    return img;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("spectract_test_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("variant names and channel counts") {
    for (Variant v : all_variants()) CHECK(parse_variant(to_string(v)) == v);
    CHECK_THROWS_AS(parse_variant("XP"), ConfigError);
    CHECK(image_channels(Variant::FSP) == 3);
    CHECK(image_channels(Variant::IP) == 2);
    CHECK(image_channels(Variant::I) == 1);
    CHECK_FALSE(uses_projection_stage(Variant::I));
    CHECK(uses_projection_stage(Variant::P));
}

TEST_CASE("three-channel input is ordered noisy, full-spectrum, projection-restored") {
    const Image xn = ramp_image(4, 4, 0.0), xf = ramp_image(4, 4, 1.0), xt = ramp_image(4, 4, 2.0);
    const Tensor t = build_three_channel(xn, xf, xt);
    REQUIRE(t.c == 3);
    CHECK(t.channel_image(0) == xn);
    CHECK(t.channel_image(1) == xf);
    CHECK(t.channel_image(2) == xt);

    const Tensor ip = build_image_input(Variant::IP, xn, xf, xt);
    REQUIRE(ip.c == 2);
    CHECK(ip.channel_image(0) == xn);
    CHECK(ip.channel_image(1) == xt);
    const Tensor i = build_image_input(Variant::I, xn, xf, xt);
    REQUIRE(i.c == 1);
    CHECK(i.channel_image(0) == xn);
    CHECK_THROWS_AS(build_image_input(Variant::P, xn, xf, xt), ConfigError);
}

TEST_CASE("profile, normalization and recipe survive JSON") {
    const auto p = tiny_profile();
    const auto back = nlohmann::json(p).get<AcquisitionProfile>();
    CHECK(nlohmann::json(back) == nlohmann::json(p));
    CHECK(back.bins.size() == 6);

    Normalization n{{1.0, 2.0}, {3.0, 4.0}, 5.0};
    CHECK(nlohmann::json(n).get<Normalization>() == n);
    Normalization bad = n;
    bad.image[1] = 0.0;
    CHECK_THROWS_AS(bad.validate(2), ConfigError);
    CHECK_THROWS_AS(n.validate(3), ConfigError);

    const auto r = TrainingRecipe::toy();
    CHECK(nlohmann::json(nlohmann::json(r).get<TrainingRecipe>()) == nlohmann::json(r));
    auto broken = r;
    broken.denoiser.latent_dim += 1;
    CHECK_THROWS_AS(broken.validate(), ConfigError);
}

TEST_CASE("simulated slices are seeded and shaped bins x views x detectors") {
    const auto p = tiny_profile();
    const Slice a = simulate_slice(p, 9), b = simulate_slice(p, 9), c = simulate_slice(p, 10);
    REQUIRE(a.noisy.size() == 6);
    for (const auto& img : a.noisy.bins) {
        CHECK(img.rows == p.geometry.n_views);
        CHECK(img.cols == p.geometry.n_detectors);
    }
    CHECK(a.noisy.bins == b.noisy.bins);
    CHECK(a.clean.bins == b.clean.bins);
    CHECK_FALSE(a.noisy.bins == c.noisy.bins);
    // Poisson noise moves the noisy stack off the clean one.
    CHECK_FALSE(a.noisy.bins[0] == a.clean.bins[0]);
}

TEST_CASE("normalization maps clean references to unit peak") {
    Fixture f;
    double peak = 0.0;
    for (const auto& s : f.slices)
        for (const auto& img : reference_images(s, f.profile, f.norm))
            for (double v : img.data) peak = std::max(peak, v);
    CHECK(peak == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bundles name the missing component") {
    Fixture f;
    const ModelSet m = f.models();
    PipelineBundle b{f.profile, f.norm, Variant::FSP, std::nullopt, m.image.at(Variant::FSP)};
    try {
        b.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("projection") != std::string::npos);
    }
    b.projection = m.projection;
    b.image.reset();
    try {
        b.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("image") != std::string::npos);
    }
    b.image = m.image.at(Variant::IP);
    CHECK_THROWS_AS(b.validate(), ConfigError);  // two-channel codec on the three-channel variant
    CHECK_NOTHROW(m.bundle(Variant::P));
    ModelSet partial = m;
    partial.image.erase(Variant::IP);
    CHECK_THROWS_AS(partial.bundle(Variant::IP), ConfigError);
}

TEST_CASE("full reconstruction gives per-bin images and is seeded") {
    Fixture f;
    const ModelSet m = f.models();
    const auto& g = f.profile.grid;
    for (Variant v : all_variants()) {
        CAPTURE(to_string(v));
        const auto bundle = m.bundle(v);
        const ImageStack a = reconstruct_full(f.slices[0].noisy, bundle, 77);
        const ImageStack b = reconstruct_full(f.slices[0].noisy, bundle, 77);
        REQUIRE(a.final_images.size() == 6);
        CHECK(a.noisy_fbp.size() == 6);
        CHECK(a.full_spectrum.rows == g.n_rows);
        CHECK(a.projection_fbp.size() == (uses_projection_stage(v) ? 6u : 0u));
        for (const auto& img : a.final_images) {
            CHECK(img.rows == g.n_rows);
            CHECK(img.cols == g.n_cols);
        }
        CHECK(a.final_images == b.final_images);
        if (v == Variant::P) CHECK(a.final_images == a.projection_fbp);
    }
    SinogramStack short_stack = f.slices[0].noisy;
    short_stack.bins.pop_back();
    short_stack.flat.pop_back();
    CHECK_THROWS_AS(reconstruct_full(short_stack, m.bundle(Variant::FSP), 1), DimensionError);
}

TEST_CASE("projection stage rejects sinograms from another geometry") {
    Fixture f;
    const auto bundle = f.models().bundle(Variant::P);
    CHECK_THROWS_AS(projection_stage(Image(8, 8), 0, bundle, 1), GeometryError);
    CHECK_THROWS_AS(projection_stage(f.slices[0].noisy.bins[0], 6, bundle, 1), DimensionError);
}

TEST_CASE("training pairs line up with slices and bins") {
    Fixture f;
    const ModelSet m = f.models();
    const auto proj = projection_pairs(f.slices, f.norm);
    CHECK(proj.size() == 12);
    CHECK(proj.domain == Domain::Projection);
    CHECK(proj.pairs[7].degraded.channel_image(0).rows == f.profile.geometry.n_views);
    const auto fsp = image_pairs(f.slices, f.profile, f.norm, Variant::FSP, m.projection, 4);
    CHECK(fsp.size() == 12);
    CHECK(fsp.domain == Domain::Image);
    CHECK(fsp.pairs[0].degraded.c == 3);
    CHECK(fsp.pairs[0].target.c == 1);
    // Pair k is slice k / 6, bin k % 6; its target is that bin's reference.
    CHECK(fsp.pairs[7].target.channel_image(0) == reference_images(f.slices[1], f.profile, f.norm)[1]);
    CHECK_THROWS_AS(image_pairs(f.slices, f.profile, f.norm, Variant::IP, std::nullopt, 4), ConfigError);
    CHECK_THROWS_AS(image_pairs(f.slices, f.profile, f.norm, Variant::P, m.projection, 4), ConfigError);
}

// ---------------------------------------------------------------------------
// Storage

TEST_CASE("arrays round-trip through payload and sidecar") {
    const auto dir = scratch("array");
    ArrayContainer a;
    a.shape = {2, 3};
    a.axes = {"row", "col"};
    a.units = "1/mm";
    a.seed = 42;
    a.attributes["note"] = "x";
    a.values = {0.1, -2.5, 3.0, 1e-3, 7.0, 0.0};
    save_array(dir / "a", a);
    CHECK(fs::file_size(dir / "a.f32") == 24);
    for (const auto& path : {dir / "a", dir / "a.json", dir / "a.f32"}) {
        const auto b = load_array(path);
        CHECK(b.shape == a.shape);
        CHECK(b.axes == a.axes);
        CHECK(b.units == a.units);
        CHECK(b.seed == 42);
        CHECK(b.attributes["note"] == "x");
        for (std::size_t i = 0; i < a.values.size(); ++i)
            CHECK(b.values[i] == static_cast<double>(static_cast<float>(a.values[i])));
    }
    a.dtype = "f64";
    save_array(dir / "d", a);
    CHECK(load_array(dir / "d").values == a.values);

    a.values.pop_back();
    CHECK_THROWS_AS(save_array(dir / "bad", a), DimensionError);
}

TEST_CASE("corrupted payloads raise IntegrityError") {
    const auto dir = scratch("corrupt");
    ArrayContainer a;
    a.shape = {4};
    a.values = {1, 2, 3, 4};
    save_array(dir / "a", a);
    fs::resize_file(dir / "a.f32", 12);
    CHECK_THROWS_AS(load_array(dir / "a"), IntegrityError);
    fs::remove(dir / "a.f32");
    CHECK_THROWS_AS(load_array(dir / "a"), IntegrityError);
    CHECK_THROWS_AS(load_array(dir / "missing"), IntegrityError);
    std::ofstream(dir / "b.json") << "{\"shape\": [";
    std::ofstream(dir / "b.f32") << "abcd";
    CHECK_THROWS_AS(load_array(dir / "b"), IntegrityError);
}

TEST_CASE("slices are stored as [bins, views, detectors] with flat counts") {
    Fixture f;
    const auto dir = scratch("slices");
    save_slices(dir, f.slices, 5);
    const auto a = load_array(dir / "noisy_1");
    CHECK(a.shape == std::vector<std::size_t>{6, f.profile.geometry.n_views, f.profile.geometry.n_detectors});
    CHECK(a.axes == std::vector<std::string>{"bin", "view", "detector"});
    const auto back = load_slices(dir);
    REQUIRE(back.size() == 2);
    CHECK(back[1].noisy.flat == f.slices[1].noisy.flat);
    CHECK(back[1].clean.bins[3].data[100] == static_cast<double>(static_cast<float>(f.slices[1].clean.bins[3].data[100])));
}

TEST_CASE("saved models reconstruct identically") {
    Fixture f;
    const ModelSet m = f.models();
    const auto dir = scratch("models");
    save_models(dir, m);
    const ModelSet back = load_models(dir);
    CHECK(back.norm == m.norm);
    CHECK(back.image.size() == 3);
    CHECK(back.projection->codec.params() == m.projection->codec.params());
    const auto a = reconstruct_full(f.slices[1].noisy, m.bundle(Variant::FSP), 3);
    const auto b = reconstruct_full(f.slices[1].noisy, back.bundle(Variant::FSP), 3);
    CHECK(a.final_images == b.final_images);

    fs::resize_file(dir / "image_IP_codec.f64", 16);
    CHECK_THROWS_AS(load_models(dir), IntegrityError);
}

TEST_CASE("display windows map linearly and clamp") {
    Image img(1, 5);
    img.data = {-1.0, 0.0, 0.5, 1.0, 2.0};
    const auto g = to_gray8(img, {0.0, 1.0});
    CHECK(g == std::vector<std::uint8_t>{0, 0, 128, 255, 255});
    CHECK(to_gray8(img, {-1.0, 3.0})[1] == 64);
    CHECK(DisplayWindow::parse("-0.5,2").lo == -0.5);
    CHECK_THROWS_AS(DisplayWindow::parse("1,1"), ConfigError);
    CHECK_THROWS_AS(DisplayWindow::parse("abc"), ConfigError);
}

TEST_CASE("rendered panels decode to the windowed values and identical images leave a black residual") {
    const auto dir = scratch("render");
    Image ref(3, 4, 0.5);
    ref(0, 0) = 1.0;  // bottom-left pixel
    const auto figs = render_figures(dir, ref, {{"same", ref}}, {0.0, 1.0}, {0.0, 0.1});
    REQUIRE(figs.size() == 2);
    std::size_t rows = 0, cols = 0;
    const auto px = read_png_gray(figs[0].image, rows, cols);
    CHECK(rows == 3);
    CHECK(cols == 4);
    CHECK(px[1] == 128);
    CHECK(px[2 * 4] == 255);  // grid row 0 is the last PNG row
    const auto res = read_png_gray(figs[1].residual, rows, cols);
    for (auto v : res) CHECK(v == 0);
    CHECK_THROWS_AS(render_figures(dir, ref, {{"small", Image(2, 2)}}, {0.0, 1.0}, {0.0, 0.1}), DimensionError);
}

TEST_CASE("line charts carry every series and reject ragged data") {
    const auto svg = line_chart_svg("psnr", "steps", "dB", {{"FSP", {1, 4, 32}, {20, 25, 25.2}}, {"TV", {1, 4, 32}, {24, 24, 24}}}, true);
    CHECK(svg.find("<svg") == 0);
    CHECK(svg.find(">FSP<") != std::string::npos);
    CHECK(svg.find(">TV<") != std::string::npos);
    CHECK(svg.find("<polyline") != std::string::npos);
    CHECK_THROWS_AS(line_chart_svg("t", "x", "y", {{"a", {1, 2}, {1}}}), DimensionError);
}

TEST_CASE("run manifests round-trip") {
    RunManifest m;
    m.command = "fuse";
    m.arguments = {"--input", "x"};
    m.seeds = {1, 2};
    m.git_describe = build_describe();
    m.started = utc_timestamp();
    m.outputs = {"out/fused"};
    const auto back = RunManifest::from_json(m.to_json());
    CHECK(back.to_json() == m.to_json());
    CHECK(m.started.size() == 20);
    CHECK_FALSE(m.git_describe.empty());
}
