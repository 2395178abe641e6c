#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectract/codec.hpp"
#include "spectract/diffusion.hpp"

namespace spectract {

enum class Domain { Projection, Image };
enum class Stage { Codec, Diffusion, Joint };
enum class OptimizerKind { Sgd, Adam };

std::string to_string(Domain d);
std::string to_string(Stage s);
Domain parse_domain(const std::string& s);

struct TrainingConfig {
    Stage stage = Stage::Codec;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::Adam;
    std::size_t batch_size = 8;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    double ssim_lambda = 0.2;
    Domain domain = Domain::Projection;
    // An epoch that raises the full-set loss is undone and the rate scaled by this.
    double backoff = 0.5;
    // Codec and joint stages draw one acquisition symmetry per sample and step.
    bool augment = false;

    void validate() const;
    bool operator==(const TrainingConfig&) const = default;
};
void to_json(nlohmann::json& j, const TrainingConfig& c);
void from_json(const nlohmann::json& j, TrainingConfig& c);

struct PairedSample {
    nn::Tensor degraded;
    nn::Tensor target;
};

struct PairedDataset {
    std::vector<PairedSample> pairs;
    WeightMap weights;
    Domain domain = Domain::Projection;

    void validate() const;
    std::size_t size() const { return pairs.size(); }
};

// Full-set loss before training, then after every accepted epoch.
struct TrainingLog {
    std::vector<double> loss;
    std::vector<double> learning_rate;
    std::size_t rejected_epochs = 0;

    nlohmann::json to_json() const;
};

// Exact symmetries of the acquisition. Images: the eight rotations and
// reflections of the grid, k in [0, 8) (bit 0 mirrors columns, bit 1 rows,
// bit 2 transposes; transposes need square planes). Sinograms with rows =
// views over a full circle and a centred detector: a cyclic view shift,
// optionally after the mirror p(k, d) -> p(-k mod V, D-1-d), which is the
// sinogram of the object reflected top to bottom.
nn::Tensor grid_symmetry(const nn::Tensor& x, unsigned k);
nn::Tensor sinogram_symmetry(const nn::Tensor& x, std::size_t shift, bool mirror);
// One symmetry drawn from `draw`, applied to both sides of the pair and to w.
PairedSample augment_pair(const PairedSample& s, const WeightMap& w, Domain domain, std::uint64_t draw,
                          WeightMap& w_out);

Codec pretrain_codec(const PairedDataset& data, const Codec& init, const TrainingConfig& config,
                     TrainingLog* log = nullptr);
Codec pretrain_codec(const PairedDataset& data, const CodecConfig& codec_config, const TrainingConfig& config,
                     TrainingLog* log = nullptr);

// Mean reconstruction loss of decode(encode_pair(target, input), input).
double codec_loss(const PairedDataset& data, const Codec& codec, double ssim_lambda);

// Codec stays fixed. Targets are encode_pair latents, conditions encode_condition latents.
Denoiser train_diffusion(const PairedDataset& data, const Codec& codec, const NoiseSchedule& schedule,
                         const Denoiser& init, const TrainingConfig& config, TrainingLog* log = nullptr);
Denoiser train_diffusion(const PairedDataset& data, const Codec& codec, const NoiseSchedule& schedule,
                         const DenoiserConfig& denoiser_config, const TrainingConfig& config,
                         TrainingLog* log = nullptr);

// Noise-prediction loss with one fixed (t, noise) draw per sample derived from seed.
double diffusion_eval_loss(const PairedDataset& data, const Codec& codec, const Denoiser& denoiser,
                           const NoiseSchedule& schedule, std::uint64_t seed);

struct JointModel {
    Codec codec;
    Denoiser denoiser;
};

// Minimizes reconstruction loss on decode(sampled latent, input) plus the
// noise-prediction loss, end to end through the sampler. The noise target's
// clean latent is held fixed within each step.
JointModel joint_finetune(const Codec& codec, const Denoiser& denoiser, const PairedDataset& data,
                          const NoiseSchedule& schedule, const TrainingConfig& config, TrainingLog* log = nullptr);

// Combined loss with fixed starting points and noise draws derived from seed.
double joint_loss(const PairedDataset& data, const Codec& codec, const Denoiser& denoiser,
                  const NoiseSchedule& schedule, double ssim_lambda, std::uint64_t seed);

// Restored output with a sampled latent: decode(sample(encode_condition(x)), x).
nn::Tensor restore(const Codec& codec, const Denoiser& denoiser, const NoiseSchedule& schedule, const WeightMap& w,
                   const nn::Tensor& degraded, std::uint64_t seed);

enum class GradComponent {
    Linear,
    Conv3x3,
    Conv1x1,
    Silu,
    ModulatedBlock,
    Encoder,
    Decoder,
    Denoiser,
    LossRes,
    JointChain,
};

std::vector<GradComponent> all_grad_components();
std::string to_string(GradComponent c);

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
    std::string worst;  // parameter block of the largest error
};

// Central differences with step 1e-5 * max(1, |p|) against the analytic
// gradient on a probe of at most 16x16 pixels. Entries of the L1 term whose
// prediction is within 1e-6 of the target are skipped.
GradCheckReport grad_check(GradComponent component, std::uint64_t probe_seed = 1);

// Generic harness: loss(values) evaluated at perturbed entries of values.
GradCheckReport finite_difference_check(std::vector<double>& values, std::span<const double> analytic,
                                        const std::function<double()>& loss, const std::vector<std::size_t>& indices,
                                        const std::function<std::string(std::size_t)>& label = {});

// Up to per_block evenly spread indices from every block of the store.
std::vector<std::size_t> probe_indices(const nn::ParamStore& store, std::size_t per_block);

}  // namespace spectract
