#pragma once

// Dual-domain spectral reconstruction: per-bin projection-domain latent
// diffusion, FBP, then an image-domain latent diffusion on a stack of the
// noisy FBP, the full-spectrum FBP and the projection-denoised FBP. Also the
// reduced variants used for ablation and the FBP / TV baselines.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectract/codec.hpp"
#include "spectract/diffusion.hpp"
#include "spectract/geometry.hpp"
#include "spectract/metrics.hpp"
#include "spectract/spectral.hpp"
#include "spectract/training.hpp"

namespace spectract {

// I: image stage on the noisy FBP only. P: projection stage + FBP only.
// IP: both stages, image stage without the full-spectrum channel. FSP: full.
enum class Variant { I, P, IP, FSP };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);
std::vector<Variant> all_variants();
// Input channels of the image stage; 0 for P.
std::size_t image_channels(Variant v);
bool uses_projection_stage(Variant v);

struct AcquisitionProfile {
    ImageGrid grid;
    FanBeamGeometry geometry;
    EnergyBinSet bins;
    double photons = kPhotonsUltraLow;
    // Filter for every FBP inside the pipeline and for the FBP baseline.
    // References always use the pure ramp on noiseless data.
    RampWindow window = RampWindow::Hann;

    void validate() const;

    // size x size grid of 3 mm pixels (size 64 covers 192 mm), 250/500 mm
    // fan, 96 views, 80 detectors over 420 mm, six paper bins, 3e3 photons.
    static AcquisitionProfile toy(std::size_t size = 64);
};
void to_json(nlohmann::json& j, const AcquisitionProfile& p);
void from_json(const nlohmann::json& j, AcquisitionProfile& p);

struct Slice {
    SinogramStack clean;  // noiseless line integrals
    SinogramStack noisy;  // line integrals of Poisson counts
};

// Phantom from derive_seed(seed, {0}); counts from derive_seed(seed, {1}).
Slice simulate_slice(const AcquisitionProfile& profile, std::uint64_t seed);
// Slice i uses derive_seed(seed, {first + i}).
std::vector<Slice> simulate_slices(const AcquisitionProfile& profile, std::uint64_t seed, std::size_t first,
                                   std::size_t count);

// Multipliers mapping each domain to roughly unit range. Pipeline images and
// metrics are in these normalized units with peak 1.
struct Normalization {
    std::vector<double> projection;  // per bin, line integrals
    std::vector<double> image;       // per bin, FBP images
    double full_spectrum = 1.0;      // fused FBP

    // projection: 1 / 99th percentile of clean line integrals; image: 1 / max
    // of clean FBP; full_spectrum: 1 / max of the clean fused FBP.
    static Normalization fit(const std::vector<Slice>& train, const AcquisitionProfile& profile);
    void validate(std::size_t bins) const;
    bool operator==(const Normalization&) const = default;
};
void to_json(nlohmann::json& j, const Normalization& n);
void from_json(const nlohmann::json& j, Normalization& n);

// Normalized clean ramp FBP of every bin.
std::vector<Image> reference_images(const Slice& slice, const AcquisitionProfile& profile, const Normalization& norm);

struct DomainModel {
    Codec codec;
    Denoiser denoiser;
    NoiseSchedule schedule;
    WeightMap weights;
};

struct PipelineBundle {
    AcquisitionProfile profile;
    Normalization norm;
    Variant variant = Variant::FSP;
    std::optional<DomainModel> projection;
    std::optional<DomainModel> image;

    // ConfigError naming the missing or mismatched component.
    void validate() const;
};

// Per-bin images of one slice, normalized units. full_spectrum is shared by
// all bins; projection_fbp is empty for variant I.
struct ImageStack {
    std::vector<Image> noisy_fbp;       // x^n
    Image full_spectrum;                // x^F
    std::vector<Image> projection_fbp;  // x_T
    std::vector<Image> final_images;    // x_0
};

struct ProjectionOutput {
    Image sinogram;  // restored line integrals, original units
    Image fbp;       // normalized x_T
};

// Restores one bin's noisy line integrals and reconstructs them.
ProjectionOutput projection_stage(const Image& noisy_sinogram, std::size_t bin, const PipelineBundle& bundle,
                                  std::uint64_t seed);

// Channel order (x^n, x^F, x_T).
nn::Tensor build_three_channel(const Image& noisy_fbp, const Image& full_spectrum, const Image& projection_fbp);
// Image-stage input of a variant: FSP (x^n, x^F, x_T), IP (x^n, x_T), I (x^n).
nn::Tensor build_image_input(Variant v, const Image& noisy_fbp, const Image& full_spectrum,
                             const Image& projection_fbp);

// FBP of the fused noisy projections, normalized.
Image full_spectrum_image(const SinogramStack& noisy, const AcquisitionProfile& profile, const Normalization& norm);

// Runs the bundle's variant on one noisy stack. Bin b draws its projection
// latent from derive_seed(seed, {b, 1}) and its image latent from
// derive_seed(seed, {b, 2}).
ImageStack reconstruct_full(const SinogramStack& noisy, const PipelineBundle& bundle, std::uint64_t seed);

// Training schedule for every model of the pipeline.
struct TrainingRecipe {
    CodecConfig projection_codec;
    CodecConfig image_codec;  // in_channels is set per variant
    DenoiserConfig denoiser;
    std::size_t steps = 4;
    TrainingConfig codec;
    TrainingConfig diffusion;
    TrainingConfig joint;
    std::uint64_t seed = 0;

    void validate() const;
    static TrainingRecipe toy();
};
void to_json(nlohmann::json& j, const TrainingRecipe& r);
void from_json(const nlohmann::json& j, TrainingRecipe& r);

struct DomainLogs {
    TrainingLog codec;
    TrainingLog diffusion;
    TrainingLog joint;
    nlohmann::json to_json() const;
};

// Pretrain the codec, train the denoiser with the codec frozen, then
// fine-tune both jointly. Zero joint epochs skips the last stage.
DomainModel train_domain(const PairedDataset& data, const CodecConfig& codec_config, const TrainingRecipe& recipe,
                         std::uint64_t seed, DomainLogs* logs = nullptr);

// (noisy, clean) normalized line integrals, one pair per slice and bin.
PairedDataset projection_pairs(const std::vector<Slice>& slices, const Normalization& norm);

// (variant input, clean reference) per slice and bin. Variants other than I
// run the projection stage with derive_seed(seed, {slice, b, 1}).
PairedDataset image_pairs(const std::vector<Slice>& slices, const AcquisitionProfile& profile,
                          const Normalization& norm, Variant v, const std::optional<DomainModel>& projection,
                          std::uint64_t seed);

// Training data, codec layout and root seed of one domain model, exactly as
// train_models builds them, so the stages can also be run one at a time.
struct DomainTask {
    PairedDataset data;
    CodecConfig codec;
    std::uint64_t seed = 0;
};

DomainTask projection_task(const std::vector<Slice>& train, const Normalization& norm, const TrainingRecipe& recipe);
DomainTask image_task(const std::vector<Slice>& train, const AcquisitionProfile& profile, const Normalization& norm,
                      const TrainingRecipe& recipe, Variant v, const std::optional<DomainModel>& projection);
// Stage key 1 codec, 2 diffusion, 3 joint.
TrainingConfig stage_config(const TrainingConfig& base, const DomainTask& task, std::uint64_t stage_key);

// Every model needed by the four variants.
struct ModelSet {
    AcquisitionProfile profile;
    Normalization norm;
    std::optional<DomainModel> projection;
    std::map<Variant, DomainModel> image;
    nlohmann::json logs;

    PipelineBundle bundle(Variant v) const;
};

ModelSet train_models(const std::vector<Slice>& train, const AcquisitionProfile& profile,
                      const TrainingRecipe& recipe, const std::vector<Variant>& variants);

// Per-bin metrics of a variant against the normalized clean references.
// Slice i reconstructs with derive_seed(seed, {i}).
MetricReport evaluate_variant(const std::vector<Slice>& test, const PipelineBundle& bundle, std::uint64_t seed);
MetricReport ablate(Variant v, const std::vector<Slice>& test, const std::map<Variant, PipelineBundle>& bundles,
                    std::uint64_t seed);

MetricReport evaluate_fbp(const std::vector<Slice>& test, const AcquisitionProfile& profile,
                          const Normalization& norm, RampWindow window);

struct TvSettings {
    std::vector<double> lambda;  // per bin
    int iterations = 100;
    double epsilon = 1e-4;
};
void to_json(nlohmann::json& j, const TvSettings& s);
void from_json(const nlohmann::json& j, TvSettings& s);

// Per-bin lambda with the best median PSNR on the validation slices.
TvSettings tune_tv(const std::vector<Slice>& validation, const AcquisitionProfile& profile, const Normalization& norm,
                   const std::vector<double>& lambdas, int iterations);
// Starts from the pipeline-window FBP.
Image tv_bin(const Image& noisy_sinogram, const SystemMatrix& A, const AcquisitionProfile& profile, double lambda,
             int iterations, double epsilon);
MetricReport evaluate_tv(const std::vector<Slice>& test, const AcquisitionProfile& profile, const Normalization& norm,
                         const TvSettings& tv);

struct SweepPoint {
    std::size_t steps = 0;
    MetricReport report;
    double seconds_per_slice = 0.0;  // reconstruction wall time
};

// For each step count, retrains both denoisers on the fixed codecs of
// `models` and evaluates the full variant on the test slices.
std::vector<SweepPoint> sweep_steps(const ModelSet& models, const std::vector<Slice>& train,
                                    const std::vector<Slice>& test, const TrainingRecipe& recipe,
                                    const std::vector<std::size_t>& values, std::uint64_t seed);

}  // namespace spectract
