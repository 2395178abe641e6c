#include "spectract/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "spectract/errors.hpp"
#include "spectract/parallel.hpp"
#include "spectract/phantom.hpp"

namespace spectract {

using nn::Tensor;

std::string to_string(Variant v) {
    switch (v) {
        case Variant::I: return "I";
        case Variant::P: return "P";
        case Variant::IP: return "IP";
        case Variant::FSP: return "FSP";
    }
    return "?";
}

Variant parse_variant(const std::string& s) {
    if (s == "I" || s == "i") return Variant::I;
    if (s == "P" || s == "p") return Variant::P;
    if (s == "IP" || s == "ip") return Variant::IP;
    if (s == "FSP" || s == "fsp") return Variant::FSP;
    throw ConfigError("unknown variant '" + s + "' (expected I, P, IP or FSP)");
}

std::vector<Variant> all_variants() { return {Variant::I, Variant::P, Variant::IP, Variant::FSP}; }

std::size_t image_channels(Variant v) {
    switch (v) {
        case Variant::I: return 1;
        case Variant::P: return 0;
        case Variant::IP: return 2;
        case Variant::FSP: return 3;
    }
    return 0;
}

bool uses_projection_stage(Variant v) { return v != Variant::I; }

// ---------------------------------------------------------------------------
// Acquisition

void AcquisitionProfile::validate() const {
    grid.validate();
    geometry.validate();
    bins.validate();
    if (!(photons > 0.0)) throw ConfigError("photon count must be positive");
}

AcquisitionProfile AcquisitionProfile::toy(std::size_t size) {
    AcquisitionProfile p;
    p.grid = ImageGrid{size, size, 192.0 / static_cast<double>(size), {}};
    p.geometry.source_to_object_mm = 250.0;
    p.geometry.source_to_detector_mm = 500.0;
    p.geometry.detector_width_mm = 420.0;
    p.geometry.n_detectors = 80;
    p.geometry.n_views = 96;
    p.bins = EnergyBinSet::paper_six();
    p.photons = kPhotonsUltraLow;
    return p;
}

namespace {

std::string window_name(RampWindow w) { return w == RampWindow::Hann ? "hann" : "ramp"; }

RampWindow parse_window(const std::string& s) {
    if (s == "hann") return RampWindow::Hann;
    if (s == "ramp") return RampWindow::Ramp;
    throw ConfigError("unknown filter window '" + s + "'");
}

std::vector<double> bin_edges(const EnergyBinSet& b) {
    std::vector<double> e;
    for (const auto& bin : b.bins) e.push_back(bin.lo_keV);
    if (!b.bins.empty()) e.push_back(b.bins.back().hi_keV);
    return e;
}

}  // namespace

void to_json(nlohmann::json& j, const AcquisitionProfile& p) {
    j = {{"grid", p.grid},       {"geometry", p.geometry},          {"bin_edges_keV", bin_edges(p.bins)},
         {"photons", p.photons}, {"window", window_name(p.window)}};
}

void from_json(const nlohmann::json& j, AcquisitionProfile& p) {
    p.grid = j.at("grid").get<ImageGrid>();
    p.geometry = j.at("geometry").get<FanBeamGeometry>();
    const auto edges = j.at("bin_edges_keV").get<std::vector<double>>();
    std::string text;
    for (std::size_t i = 0; i < edges.size(); ++i) text += (i ? "," : "") + std::to_string(edges[i]);
    p.bins = EnergyBinSet::parse(text);
    p.photons = j.at("photons").get<double>();
    p.window = parse_window(j.value("window", std::string("hann")));
    p.validate();
}

Slice simulate_slice(const AcquisitionProfile& profile, std::uint64_t seed) {
    profile.validate();
    static const EnergySpectrum spectrum = EnergySpectrum::tungsten_120kvp();
    static const AttenuationTable table = AttenuationTable::soft_tissue_and_bone();
    const MaterialPhantom ph = make_phantom(profile.grid, derive_seed(seed, {0}));
    Slice s;
    s.clean = polychromatic_sinogram(ph.maps(), spectrum, profile.bins, profile.grid, profile.geometry, table,
                                     profile.photons);
    const auto counts = poisson_corrupt(s.clean.expected_counts(), derive_seed(seed, {1}));
    s.noisy.flat = s.clean.flat;
    for (std::size_t b = 0; b < counts.size(); ++b)
        s.noisy.bins.push_back(counts_to_lineintegral(counts[b], s.clean.flat[b]));
    return s;
}

std::vector<Slice> simulate_slices(const AcquisitionProfile& profile, std::uint64_t seed, std::size_t first,
                                   std::size_t count) {
    std::vector<Slice> out(count);
    parallel_for(count, [&](std::size_t i) { out[i] = simulate_slice(profile, derive_seed(seed, {first + i})); });
    return out;
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

Image scaled(Image img, double s) {
    for (double& v : img.data) v *= s;
    return img;
}

double max_value(const Image& img) { return *std::max_element(img.data.begin(), img.data.end()); }

}  // namespace

Normalization Normalization::fit(const std::vector<Slice>& train, const AcquisitionProfile& profile) {
    if (train.empty()) throw DomainError("no slices to fit the normalization");
    const std::size_t B = train.front().clean.size();
    Normalization n;
    n.projection.assign(B, 0.0);
    n.image.assign(B, 0.0);
    double fused_max = 0.0;
    std::vector<std::vector<double>> fbp_max(train.size(), std::vector<double>(B + 1, 0.0));
    parallel_for(train.size(), [&](std::size_t i) {
        const auto& s = train[i];
        for (std::size_t b = 0; b < B; ++b)
            fbp_max[i][b] = max_value(fbp_reconstruct(s.clean.bins[b], profile.grid, profile.geometry));
        fbp_max[i][B] = max_value(fbp_reconstruct(fuse_full_spectrum(s.clean), profile.grid, profile.geometry));
    });
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<double> all;
        double m = 0.0;
        for (std::size_t i = 0; i < train.size(); ++i) {
            const auto& d = train[i].clean.bins[b].data;
            all.insert(all.end(), d.begin(), d.end());
            m = std::max(m, fbp_max[i][b]);
        }
        const auto k = static_cast<std::size_t>(0.99 * static_cast<double>(all.size() - 1));
        std::nth_element(all.begin(), all.begin() + static_cast<long>(k), all.end());
        if (!(all[k] > 0.0) || !(m > 0.0)) throw DomainError("training slices carry no attenuation");
        n.projection[b] = 1.0 / all[k];
        n.image[b] = 1.0 / m;
    }
    for (const auto& row : fbp_max) fused_max = std::max(fused_max, row[B]);
    n.full_spectrum = 1.0 / fused_max;
    return n;
}

void Normalization::validate(std::size_t bins) const {
    if (projection.size() != bins || image.size() != bins)
        throw ConfigError("normalization has " + std::to_string(image.size()) + " bins, data has " +
                          std::to_string(bins));
    for (double v : projection)
        if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("normalization factors must be positive");
    for (double v : image)
        if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("normalization factors must be positive");
    if (!(full_spectrum > 0.0) || !std::isfinite(full_spectrum)) throw ConfigError("normalization factors must be positive");
}

void to_json(nlohmann::json& j, const Normalization& n) {
    j = {{"projection", n.projection}, {"image", n.image}, {"full_spectrum", n.full_spectrum}};
}

void from_json(const nlohmann::json& j, Normalization& n) {
    n.projection = j.at("projection").get<std::vector<double>>();
    n.image = j.at("image").get<std::vector<double>>();
    n.full_spectrum = j.at("full_spectrum").get<double>();
    n.validate(n.image.size());
}

std::vector<Image> reference_images(const Slice& slice, const AcquisitionProfile& profile, const Normalization& norm) {
    norm.validate(slice.clean.size());
    std::vector<Image> out;
    for (std::size_t b = 0; b < slice.clean.size(); ++b)
        out.push_back(scaled(fbp_reconstruct(slice.clean.bins[b], profile.grid, profile.geometry), norm.image[b]));
    return out;
}

// ---------------------------------------------------------------------------
// Stages

void PipelineBundle::validate() const {
    profile.validate();
    norm.validate(profile.bins.size());
    if (uses_projection_stage(variant)) {
        if (!projection) throw ConfigError("variant " + to_string(variant) + " needs the projection-domain model");
        if (projection->codec.config().in_channels != 1)
            throw ConfigError("projection-domain codec must take one channel");
    }
    if (variant != Variant::P) {
        if (!image) throw ConfigError("variant " + to_string(variant) + " needs the image-domain model");
        if (image->codec.config().in_channels != image_channels(variant))
            throw ConfigError("image-domain codec takes " + std::to_string(image->codec.config().in_channels) +
                              " channels, variant " + to_string(variant) + " supplies " +
                              std::to_string(image_channels(variant)));
    }
}

namespace {

Tensor single(const Image& img) { return Tensor::from_images({img}); }

Image run_model(const DomainModel& m, const Tensor& input, std::uint64_t seed) {
    return restore(m.codec, m.denoiser, m.schedule, m.weights, input, seed).channel_image(0);
}

}  // namespace

ProjectionOutput projection_stage(const Image& noisy_sinogram, std::size_t bin, const PipelineBundle& bundle,
                                  std::uint64_t seed) {
    if (!bundle.projection) throw ConfigError("projection stage needs the projection-domain model");
    const auto& g = bundle.profile.geometry;
    if (noisy_sinogram.rows != g.n_views || noisy_sinogram.cols != g.n_detectors)
        throw GeometryError("sinogram shape differs from the acquisition geometry");
    if (bin >= bundle.norm.projection.size()) throw DimensionError("bin index out of range");
    const double s = bundle.norm.projection[bin];
    const Image restored = run_model(*bundle.projection, single(scaled(noisy_sinogram, s)), seed);
    ProjectionOutput out;
    out.sinogram = scaled(restored, 1.0 / s);
    out.fbp = scaled(fbp_reconstruct(out.sinogram, bundle.profile.grid, g, bundle.profile.window), bundle.norm.image[bin]);
    return out;
}

Tensor build_three_channel(const Image& noisy_fbp, const Image& full_spectrum, const Image& projection_fbp) {
    return Tensor::from_images({noisy_fbp, full_spectrum, projection_fbp});
}

Tensor build_image_input(Variant v, const Image& noisy_fbp, const Image& full_spectrum, const Image& projection_fbp) {
    switch (v) {
        case Variant::FSP: return build_three_channel(noisy_fbp, full_spectrum, projection_fbp);
        case Variant::IP: return Tensor::from_images({noisy_fbp, projection_fbp});
        case Variant::I: return single(noisy_fbp);
        case Variant::P: break;
    }
    throw ConfigError("variant P has no image stage");
}

Image full_spectrum_image(const SinogramStack& noisy, const AcquisitionProfile& profile, const Normalization& norm) {
    return scaled(fbp_reconstruct(fuse_full_spectrum(noisy), profile.grid, profile.geometry, profile.window),
                  norm.full_spectrum);
}

ImageStack reconstruct_full(const SinogramStack& noisy, const PipelineBundle& bundle, std::uint64_t seed) {
    bundle.validate();
    noisy.validate();
    const std::size_t B = bundle.profile.bins.size();
    if (noisy.size() != B) throw DimensionError("stack has " + std::to_string(noisy.size()) + " bins, profile " + std::to_string(B));
    const auto& p = bundle.profile;
    ImageStack out;
    out.full_spectrum = full_spectrum_image(noisy, p, bundle.norm);
    out.noisy_fbp.resize(B);
    out.final_images.resize(B);
    if (uses_projection_stage(bundle.variant)) out.projection_fbp.resize(B);
    parallel_for(B, [&](std::size_t b) {
        out.noisy_fbp[b] = scaled(fbp_reconstruct(noisy.bins[b], p.grid, p.geometry, p.window), bundle.norm.image[b]);
        if (uses_projection_stage(bundle.variant))
            out.projection_fbp[b] = projection_stage(noisy.bins[b], b, bundle, derive_seed(seed, {b, 1})).fbp;
        if (bundle.variant == Variant::P) {
            out.final_images[b] = out.projection_fbp[b];
            return;
        }
        const Image empty;
        const Tensor input = build_image_input(bundle.variant, out.noisy_fbp[b], out.full_spectrum,
                                               out.projection_fbp.empty() ? empty : out.projection_fbp[b]);
        out.final_images[b] = run_model(*bundle.image, input, derive_seed(seed, {b, 2}));
    });
    return out;
}

// ---------------------------------------------------------------------------
// Training

void TrainingRecipe::validate() const {
    projection_codec.validate();
    image_codec.validate();
    denoiser.validate();
    if (denoiser.latent_dim != projection_codec.latent_dim() || denoiser.latent_dim != image_codec.latent_dim())
        throw ConfigError("denoiser latent length differs from the codec latent length");
    if (steps == 0) throw ConfigError("diffusion needs at least one step");
    codec.validate();
    diffusion.validate();
    joint.validate();
}

TrainingRecipe TrainingRecipe::toy() {
    TrainingRecipe r;
    r.projection_codec = CodecConfig::toy(1);
    r.image_codec = CodecConfig::toy(3);
    r.denoiser = DenoiserConfig{r.image_codec.latent_dim(), r.image_codec.latent_dim(), 3, 16, true, {}};
    r.steps = 4;
    r.codec.stage = Stage::Codec;
    r.codec.epochs = 30;
    r.codec.learning_rate = 1e-3;
    r.codec.batch_size = 4;
    r.codec.augment = true;
    r.diffusion.stage = Stage::Diffusion;
    r.diffusion.epochs = 150;
    r.diffusion.learning_rate = 1e-3;
    r.diffusion.batch_size = 8;
    r.joint.stage = Stage::Joint;
    r.joint.epochs = 8;
    r.joint.learning_rate = 2e-4;
    r.joint.batch_size = 4;
    r.joint.augment = true;
    return r;
}

void to_json(nlohmann::json& j, const TrainingRecipe& r) {
    j = {{"projection_codec", r.projection_codec},
         {"image_codec", r.image_codec},
         {"denoiser", r.denoiser},
         {"steps", r.steps},
         {"codec", r.codec},
         {"diffusion", r.diffusion},
         {"joint", r.joint},
         {"seed", r.seed}};
}

void from_json(const nlohmann::json& j, TrainingRecipe& r) {
    r = TrainingRecipe::toy();
    if (j.contains("projection_codec")) r.projection_codec = j.at("projection_codec").get<CodecConfig>();
    if (j.contains("image_codec")) r.image_codec = j.at("image_codec").get<CodecConfig>();
    if (j.contains("denoiser")) r.denoiser = j.at("denoiser").get<DenoiserConfig>();
    r.steps = j.value("steps", r.steps);
    if (j.contains("codec")) r.codec = j.at("codec").get<TrainingConfig>();
    if (j.contains("diffusion")) r.diffusion = j.at("diffusion").get<TrainingConfig>();
    if (j.contains("joint")) r.joint = j.at("joint").get<TrainingConfig>();
    r.seed = j.value("seed", r.seed);
    r.validate();
}

nlohmann::json DomainLogs::to_json() const {
    return {{"codec", codec.to_json()}, {"diffusion", diffusion.to_json()}, {"joint", joint.to_json()}};
}

DomainModel train_domain(const PairedDataset& data, const CodecConfig& codec_config, const TrainingRecipe& recipe,
                         std::uint64_t seed, DomainLogs* logs) {
    DomainLogs local;
    DomainLogs& l = logs ? *logs : local;
    const NoiseSchedule schedule = make_schedule(recipe.steps);
    const DomainTask task{data, codec_config, seed};
    Codec codec = pretrain_codec(data, codec_config, stage_config(recipe.codec, task, 1), &l.codec);
    Denoiser den = train_diffusion(data, codec, schedule, recipe.denoiser, stage_config(recipe.diffusion, task, 2),
                                   &l.diffusion);
    if (recipe.joint.epochs > 0) {
        auto m = joint_finetune(codec, den, data, schedule, stage_config(recipe.joint, task, 3), &l.joint);
        codec = std::move(m.codec);
        den = std::move(m.denoiser);
    }
    return DomainModel{std::move(codec), std::move(den), schedule, data.weights};
}

PairedDataset projection_pairs(const std::vector<Slice>& slices, const Normalization& norm) {
    if (slices.empty()) throw DomainError("no slices");
    PairedDataset d;
    d.domain = Domain::Projection;
    std::vector<Image> samples;
    for (const auto& s : slices) {
        norm.validate(s.noisy.size());
        for (std::size_t b = 0; b < s.noisy.size(); ++b) {
            const Image lq = scaled(s.noisy.bins[b], norm.projection[b]);
            d.pairs.push_back({single(lq), single(scaled(s.clean.bins[b], norm.projection[b]))});
            samples.push_back(lq);
        }
    }
    d.weights = WeightMap::from_percentile(samples);
    return d;
}

PairedDataset image_pairs(const std::vector<Slice>& slices, const AcquisitionProfile& profile,
                          const Normalization& norm, Variant v, const std::optional<DomainModel>& projection,
                          std::uint64_t seed) {
    if (slices.empty()) throw DomainError("no slices");
    if (v == Variant::P) throw ConfigError("variant P has no image stage");
    PipelineBundle bundle{profile, norm, v, projection, std::nullopt};
    if (uses_projection_stage(v) && !projection) throw ConfigError("variant " + to_string(v) + " needs the projection-domain model");
    const std::size_t B = profile.bins.size();
    PairedDataset d;
    d.domain = Domain::Image;
    d.pairs.resize(slices.size() * B);
    parallel_for(slices.size() * B, [&](std::size_t k) {
        const std::size_t i = k / B, b = k % B;
        const auto& s = slices[i];
        const Image xn = scaled(fbp_reconstruct(s.noisy.bins[b], profile.grid, profile.geometry, profile.window), norm.image[b]);
        const Image xf = v == Variant::FSP ? full_spectrum_image(s.noisy, profile, norm) : Image{};
        const Image xt = uses_projection_stage(v)
                             ? projection_stage(s.noisy.bins[b], b, bundle, derive_seed(seed, {i, b, 1})).fbp
                             : Image{};
        const Image ref = scaled(fbp_reconstruct(s.clean.bins[b], profile.grid, profile.geometry), norm.image[b]);
        d.pairs[k] = {build_image_input(v, xn, xf, xt), single(ref)};
    });
    std::vector<Image> samples;
    for (const auto& p : d.pairs) samples.push_back(p.degraded.channel_image(0));
    d.weights = WeightMap::from_percentile(samples);
    return d;
}

PipelineBundle ModelSet::bundle(Variant v) const {
    PipelineBundle b{profile, norm, v, std::nullopt, std::nullopt};
    if (uses_projection_stage(v)) b.projection = projection;
    if (v != Variant::P) {
        const auto it = image.find(v);
        if (it == image.end()) throw ConfigError("variant " + to_string(v) + " has no trained image-domain model");
        b.image = it->second;
    }
    b.validate();
    return b;
}

ModelSet train_models(const std::vector<Slice>& train, const AcquisitionProfile& profile,
                      const TrainingRecipe& recipe, const std::vector<Variant>& variants) {
    recipe.validate();
    ModelSet m;
    m.profile = profile;
    m.norm = Normalization::fit(train, profile);
    const bool need_projection = std::any_of(variants.begin(), variants.end(), uses_projection_stage);
    if (need_projection) {
        DomainLogs logs;
        const auto task = projection_task(train, m.norm, recipe);
        m.projection = train_domain(task.data, task.codec, recipe, task.seed, &logs);
        m.logs["projection"] = logs.to_json();
    }
    for (Variant v : variants) {
        if (v == Variant::P) continue;
        const auto task = image_task(train, profile, m.norm, recipe, v, m.projection);
        DomainLogs logs;
        m.image.emplace(v, train_domain(task.data, task.codec, recipe, task.seed, &logs));
        m.logs["image_" + to_string(v)] = logs.to_json();
    }
    return m;
}

DomainTask projection_task(const std::vector<Slice>& train, const Normalization& norm, const TrainingRecipe& recipe) {
    return DomainTask{projection_pairs(train, norm), recipe.projection_codec, derive_seed(recipe.seed, {0x9e0})};
}

DomainTask image_task(const std::vector<Slice>& train, const AcquisitionProfile& profile, const Normalization& norm,
                      const TrainingRecipe& recipe, Variant v, const std::optional<DomainModel>& projection) {
    CodecConfig cc = recipe.image_codec;
    cc.in_channels = image_channels(v);
    return DomainTask{image_pairs(train, profile, norm, v, projection, derive_seed(recipe.seed, {0x1a9})), cc,
                      derive_seed(recipe.seed, {0x13a, image_channels(v)})};
}

TrainingConfig stage_config(const TrainingConfig& base, const DomainTask& task, std::uint64_t stage_key) {
    TrainingConfig c = base;
    c.seed = derive_seed(task.seed, {stage_key});
    c.domain = task.data.domain;
    return c;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

void add_metrics(MetricReport& r, const std::vector<Image>& out, const std::vector<Image>& ref) {
    for (std::size_t b = 0; b < out.size(); ++b) {
        const Psnr p = psnr(out[b], ref[b], 1.0);
        r.add(b, p.db, ssim(out[b], ref[b]));
    }
}

MetricReport collect(const std::string& method, const std::vector<Slice>& test, const AcquisitionProfile& profile,
                     const Normalization& norm, const std::function<std::vector<Image>(std::size_t)>& run) {
    if (test.empty()) throw DomainError("no test slices");
    std::vector<std::vector<Image>> outputs(test.size()), refs(test.size());
    parallel_for(test.size(), [&](std::size_t i) {
        outputs[i] = run(i);
        refs[i] = reference_images(test[i], profile, norm);
    });
    MetricReport r;
    r.method = method;
    for (std::size_t i = 0; i < test.size(); ++i) add_metrics(r, outputs[i], refs[i]);
    return r;
}

}  // namespace

MetricReport evaluate_variant(const std::vector<Slice>& test, const PipelineBundle& bundle, std::uint64_t seed) {
    bundle.validate();
    return collect(to_string(bundle.variant), test, bundle.profile, bundle.norm, [&](std::size_t i) {
        return reconstruct_full(test[i].noisy, bundle, derive_seed(seed, {i})).final_images;
    });
}

MetricReport ablate(Variant v, const std::vector<Slice>& test, const std::map<Variant, PipelineBundle>& bundles,
                    std::uint64_t seed) {
    const auto it = bundles.find(v);
    if (it == bundles.end()) throw ConfigError("variant " + to_string(v) + " has no trained bundle");
    if (it->second.variant != v) throw ConfigError("bundle registered under " + to_string(v) + " runs " + to_string(it->second.variant));
    return evaluate_variant(test, it->second, seed);
}

MetricReport evaluate_fbp(const std::vector<Slice>& test, const AcquisitionProfile& profile,
                          const Normalization& norm, RampWindow window) {
    return collect("FBP-" + window_name(window), test, profile, norm, [&](std::size_t i) {
        std::vector<Image> out;
        for (std::size_t b = 0; b < test[i].noisy.size(); ++b)
            out.push_back(scaled(fbp_reconstruct(test[i].noisy.bins[b], profile.grid, profile.geometry, window), norm.image[b]));
        return out;
    });
}

void to_json(nlohmann::json& j, const TvSettings& s) {
    j = {{"lambda", s.lambda}, {"iterations", s.iterations}, {"epsilon", s.epsilon}};
}

void from_json(const nlohmann::json& j, TvSettings& s) {
    s.lambda = j.at("lambda").get<std::vector<double>>();
    s.iterations = j.value("iterations", 100);
    s.epsilon = j.value("epsilon", 1e-4);
    for (double l : s.lambda)
        if (!(l >= 0.0)) throw ConfigError("TV weight must be non-negative");
}

Image tv_bin(const Image& noisy_sinogram, const SystemMatrix& A, const AcquisitionProfile& profile, double lambda,
             int iterations, double epsilon) {
    TvOptions o;
    o.lambda = lambda;
    o.iterations = iterations;
    o.epsilon = epsilon;
    o.initial = fbp_reconstruct(noisy_sinogram, profile.grid, profile.geometry, profile.window);
    return tv_reconstruct(noisy_sinogram, A, o).image;
}

TvSettings tune_tv(const std::vector<Slice>& validation, const AcquisitionProfile& profile, const Normalization& norm,
                   const std::vector<double>& lambdas, int iterations) {
    if (validation.empty() || lambdas.empty()) throw DomainError("TV tuning needs slices and candidate weights");
    const SystemMatrix A(profile.grid, profile.geometry);
    const std::size_t B = profile.bins.size();
    const std::size_t L = lambdas.size();
    // score[b][l][i]
    std::vector<double> score(B * L * validation.size());
    std::vector<std::vector<Image>> refs(validation.size());
    parallel_for(validation.size(), [&](std::size_t i) { refs[i] = reference_images(validation[i], profile, norm); });
    parallel_for(score.size(), [&](std::size_t k) {
        const std::size_t i = k % validation.size();
        const std::size_t l = (k / validation.size()) % L;
        const std::size_t b = k / (validation.size() * L);
        const Image x = scaled(tv_bin(validation[i].noisy.bins[b], A, profile, lambdas[l], iterations, 1e-4), norm.image[b]);
        score[k] = psnr(x, refs[i][b], 1.0).db;
    });
    TvSettings s;
    s.iterations = iterations;
    for (std::size_t b = 0; b < B; ++b) {
        double best = -1e300;
        double pick = lambdas.front();
        for (std::size_t l = 0; l < L; ++l) {
            const auto first = score.begin() + static_cast<long>((b * L + l) * validation.size());
            const double m = median(std::vector<double>(first, first + static_cast<long>(validation.size())));
            if (m > best) {
                best = m;
                pick = lambdas[l];
            }
        }
        s.lambda.push_back(pick);
    }
    return s;
}

MetricReport evaluate_tv(const std::vector<Slice>& test, const AcquisitionProfile& profile, const Normalization& norm,
                         const TvSettings& tv) {
    if (tv.lambda.size() != profile.bins.size()) throw ConfigError("one TV weight per bin required");
    const SystemMatrix A(profile.grid, profile.geometry);
    return collect("TV", test, profile, norm, [&](std::size_t i) {
        std::vector<Image> out;
        for (std::size_t b = 0; b < test[i].noisy.size(); ++b)
            out.push_back(scaled(tv_bin(test[i].noisy.bins[b], A, profile, tv.lambda[b], tv.iterations, tv.epsilon),
                                 norm.image[b]));
        return out;
    });
}

// ---------------------------------------------------------------------------
// Step-count sweep

std::vector<SweepPoint> sweep_steps(const ModelSet& models, const std::vector<Slice>& train,
                                    const std::vector<Slice>& test, const TrainingRecipe& recipe,
                                    const std::vector<std::size_t>& values, std::uint64_t seed) {
    if (!models.projection) throw ConfigError("step sweep needs the projection-domain model");
    const auto it = models.image.find(Variant::FSP);
    if (it == models.image.end()) throw ConfigError("step sweep needs the full-variant image-domain model");
    const PairedDataset proj_data = projection_pairs(train, models.norm);
    std::vector<SweepPoint> out;
    for (std::size_t T : values) {
        if (T == 0) throw ConfigError("step counts must be positive");
        const NoiseSchedule schedule = make_schedule(T);
        auto cfg = recipe.diffusion;
        cfg.seed = derive_seed(recipe.seed, {0x57e9, T});
        DomainModel proj = *models.projection;
        proj.schedule = schedule;
        cfg.domain = Domain::Projection;
        proj.denoiser = train_diffusion(proj_data, proj.codec, schedule, recipe.denoiser, cfg);
        const auto img_data = image_pairs(train, models.profile, models.norm, Variant::FSP, proj,
                                          derive_seed(recipe.seed, {0x1a9}));
        DomainModel img = it->second;
        img.schedule = schedule;
        cfg.domain = Domain::Image;
        img.denoiser = train_diffusion(img_data, img.codec, schedule, recipe.denoiser, cfg);
        PipelineBundle bundle{models.profile, models.norm, Variant::FSP, proj, img};
        SweepPoint p;
        p.steps = T;
        const auto t0 = std::chrono::steady_clock::now();
        p.report = evaluate_variant(test, bundle, seed);
        p.report.method = "FSP-T" + std::to_string(T);
        p.seconds_per_slice = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() /
                              static_cast<double>(test.size());
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace spectract
