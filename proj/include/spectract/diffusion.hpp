#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectract/nn.hpp"
#include "spectract/rng.hpp"

namespace spectract {

using Latent = std::vector<double>;

// Per-step quantities, stored 0-based: entry t-1 belongs to step t.
struct NoiseSchedule {
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    // Posterior variance (1 - abar_{t-1}) / (1 - abar_t) * beta_t, with abar_0 = 1.
    std::vector<double> sigma2;

    std::size_t steps() const { return beta.size(); }
    void validate() const;
    bool operator==(const NoiseSchedule&) const = default;
};

enum class BetaSpacing { Linear, Geometric };

// T >= 1; 0 < beta_start <= beta_end < 1. T == 1 uses beta_end.
NoiseSchedule make_schedule(std::size_t steps, double beta_start = 0.1, double beta_end = 0.99,
                            BetaSpacing spacing = BetaSpacing::Linear);
// Any beta list in (0, 1); an empty list gives the zero-step schedule.
NoiseSchedule schedule_from_betas(const std::vector<double>& betas);

void to_json(nlohmann::json& j, const NoiseSchedule& s);
void from_json(const nlohmann::json& j, NoiseSchedule& s);

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise.
Latent forward_sample(const Latent& z0, std::size_t t, const NoiseSchedule& schedule, const Latent& noise);

struct ForwardDraw {
    Latent z_t;
    Latent noise;
};
ForwardDraw forward_sample(const Latent& z0, std::size_t t, const NoiseSchedule& schedule, Rng& rng);

// z_{t-1} = keep * z_t - eps_scale * eps_pred.
struct StepCoefficients {
    double keep = 1.0;       // 1 / sqrt(alpha_t)
    double eps_scale = 0.0;  // (1 - alpha_t) / (sqrt(alpha_t) sqrt(1 - abar_t))
};
StepCoefficients step_coefficients(std::size_t t, const NoiseSchedule& schedule);

// Deterministic mean update. With posterior_noise set, sqrt(sigma2_t) times
// that draw is added (steps t > 1 only).
Latent reverse_step(const Latent& z_t, std::size_t t, const Latent& eps_pred, const NoiseSchedule& schedule,
                    const Latent* posterior_noise = nullptr);

// Mean absolute difference.
double diffusion_loss(const Latent& eps_pred, const Latent& eps_true);

// eps = f(z_t, t, condition)
using DenoiserFn = std::function<Latent(const Latent&, std::size_t, const Latent&)>;

struct SamplerOptions {
    bool stochastic = false;
};

// Starts from z_T ~ N(0, I) drawn from `seed` and applies reverse_step for
// t = T..1.
Latent sample_latent(const DenoiserFn& denoiser, const Latent& condition, const NoiseSchedule& schedule,
                     std::uint64_t seed, const SamplerOptions& options = {});
// Same from an explicit starting point; `seed` only feeds posterior noise.
Latent sample_latent_from(const DenoiserFn& denoiser, const Latent& condition, const NoiseSchedule& schedule,
                          Latent z_T, std::uint64_t seed = 0, const SamplerOptions& options = {});

// Sinusoidal features of the step index.
std::vector<double> timestep_embedding(std::size_t t, std::size_t dim = 16);

struct DenoiserConfig {
    std::size_t latent_dim = 64;
    std::size_t hidden = 64;
    std::size_t blocks = 3;
    std::size_t embed_dim = 16;
    // The network estimates the clean latent and the noise is recovered from
    // z_t with the cumulative products below (one per step, 1-based by t).
    bool predict_clean = false;
    std::vector<double> alpha_bar;

    void validate() const;
    // Copy with alpha_bar taken from the schedule when predict_clean is set.
    DenoiserConfig for_schedule(const NoiseSchedule& schedule) const;
    bool operator==(const DenoiserConfig&) const = default;
};
void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

// Residual MLP on (z_t, condition, embedding(t)) predicting the injected noise.
class Denoiser {
public:
    struct Tape {
        std::vector<double> input;
        std::vector<std::vector<double>> h;  // blocks + 1 residual-stream states
        std::vector<std::vector<double>> inner;
        std::vector<std::vector<double>> inner_act;
        std::size_t t = 0;
    };

    static Denoiser create(const DenoiserConfig& config, std::uint64_t seed);

    Latent operator()(const Latent& z_t, std::size_t t, const Latent& condition) const;
    Latent forward(const Latent& z_t, std::size_t t, const Latent& condition, Tape& tape) const;
    // Accumulates parameter gradients into grads (skipped when empty); writes
    // input gradients when the spans are non-empty.
    void backward(const Tape& tape, const Latent& d_out, nn::Grads grads, std::span<double> d_z,
                  std::span<double> d_condition) const;

    DenoiserFn function() const;

    const DenoiserConfig& config() const { return config_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

private:
    DenoiserConfig config_;
    nn::ParamStore params_;
    nn::Linear in_;
    std::vector<nn::Linear> first_;
    std::vector<nn::Linear> second_;
    nn::Linear out_;
};

}  // namespace spectract
