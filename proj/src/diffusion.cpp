#include "spectract/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "spectract/errors.hpp"

namespace spectract {

void NoiseSchedule::validate() const {
    const std::size_t n = beta.size();
    if (alpha.size() != n || alpha_bar.size() != n || sigma2.size() != n)
        throw ConfigError("schedule arrays differ in length");
    for (std::size_t i = 0; i < n; ++i) {
        if (!(beta[i] > 0.0 && beta[i] < 1.0)) throw ConfigError("beta must lie in (0, 1)");
        if (i > 0 && alpha_bar[i] > alpha_bar[i - 1]) throw ConfigError("alpha_bar must not increase");
    }
    if (n > 0 && !(alpha_bar.back() > 0.0 && alpha_bar.back() < 1.0)) throw ConfigError("alpha_bar_T must lie in (0, 1)");
}

NoiseSchedule schedule_from_betas(const std::vector<double>& betas) {
    NoiseSchedule s;
    double running = 1.0;
    for (double b : betas) {
        if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta must lie in (0, 1)");
        const double prev = running;
        running *= 1.0 - b;
        s.beta.push_back(b);
        s.alpha.push_back(1.0 - b);
        s.alpha_bar.push_back(running);
        s.sigma2.push_back((1.0 - prev) / (1.0 - running) * b);
    }
    s.validate();
    return s;
}

NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end, BetaSpacing spacing) {
    if (steps == 0) throw ConfigError("schedule needs at least one step");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ConfigError("need 0 < beta_start <= beta_end < 1");
    std::vector<double> betas(steps);
    if (steps == 1) {
        betas[0] = beta_end;
    } else {
        for (std::size_t i = 0; i < steps; ++i) {
            const double f = static_cast<double>(i) / static_cast<double>(steps - 1);
            betas[i] = spacing == BetaSpacing::Linear ? beta_start + f * (beta_end - beta_start)
                                                      : beta_start * std::pow(beta_end / beta_start, f);
        }
    }
    return schedule_from_betas(betas);
}

void to_json(nlohmann::json& j, const NoiseSchedule& s) { j = {{"T", s.steps()}, {"beta", s.beta}}; }

void from_json(const nlohmann::json& j, NoiseSchedule& s) {
    s = schedule_from_betas(j.at("beta").get<std::vector<double>>());
    if (j.contains("T") && j.at("T").get<std::size_t>() != s.steps()) throw ConfigError("schedule T disagrees with beta list");
}

namespace {

void check_step(std::size_t t, const NoiseSchedule& s) {
    if (t < 1 || t > s.steps()) throw ConfigError("step index " + std::to_string(t) + " outside [1, T]");
}

}  // namespace

Latent forward_sample(const Latent& z0, std::size_t t, const NoiseSchedule& schedule, const Latent& noise) {
    check_step(t, schedule);
    if (noise.size() != z0.size()) throw DimensionError("noise length differs from latent length");
    const double a = std::sqrt(schedule.alpha_bar[t - 1]);
    const double b = std::sqrt(1.0 - schedule.alpha_bar[t - 1]);
    Latent z(z0.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = a * z0[i] + b * noise[i];
    return z;
}

ForwardDraw forward_sample(const Latent& z0, std::size_t t, const NoiseSchedule& schedule, Rng& rng) {
    ForwardDraw d;
    d.noise = standard_normal(z0.size(), rng);
    d.z_t = forward_sample(z0, t, schedule, d.noise);
    return d;
}

StepCoefficients step_coefficients(std::size_t t, const NoiseSchedule& schedule) {
    check_step(t, schedule);
    const double alpha = schedule.alpha[t - 1];
    const double abar = schedule.alpha_bar[t - 1];
    return {1.0 / std::sqrt(alpha), (1.0 - alpha) / (std::sqrt(alpha) * std::sqrt(1.0 - abar))};
}

Latent reverse_step(const Latent& z_t, std::size_t t, const Latent& eps_pred, const NoiseSchedule& schedule,
                    const Latent* posterior_noise) {
    const auto c = step_coefficients(t, schedule);
    if (eps_pred.size() != z_t.size()) throw ContractError("noise prediction length differs from latent length");
    Latent z(z_t.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = c.keep * z_t[i] - c.eps_scale * eps_pred[i];
    if (posterior_noise && t > 1) {
        if (posterior_noise->size() != z.size()) throw DimensionError("posterior noise length differs");
        const double sd = std::sqrt(schedule.sigma2[t - 1]);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += sd * (*posterior_noise)[i];
    }
    return z;
}

double diffusion_loss(const Latent& eps_pred, const Latent& eps_true) {
    if (eps_pred.size() != eps_true.size()) throw DimensionError("diffusion_loss: length mismatch");
    if (eps_pred.empty()) throw DimensionError("diffusion_loss: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < eps_pred.size(); ++i) acc += std::abs(eps_pred[i] - eps_true[i]);
    return acc / static_cast<double>(eps_pred.size());
}

Latent sample_latent_from(const DenoiserFn& denoiser, const Latent& condition, const NoiseSchedule& schedule, Latent z,
                          std::uint64_t seed, const SamplerOptions& options) {
    Rng rng(seed);
    for (std::size_t t = schedule.steps(); t >= 1; --t) {
        const Latent eps = denoiser(z, t, condition);
        if (eps.size() != z.size())
            throw ContractError("denoiser returned " + std::to_string(eps.size()) + " values for a latent of length " +
                                std::to_string(z.size()));
        if (options.stochastic) {
            const Latent noise = standard_normal(z.size(), rng);
            z = reverse_step(z, t, eps, schedule, &noise);
        } else {
            z = reverse_step(z, t, eps, schedule);
        }
    }
    return z;
}

Latent sample_latent(const DenoiserFn& denoiser, const Latent& condition, const NoiseSchedule& schedule,
                     std::uint64_t seed, const SamplerOptions& options) {
    schedule.validate();
    Rng rng(seed);
    Latent z = standard_normal(condition.size(), rng);
    return sample_latent_from(denoiser, condition, schedule, std::move(z), derive_seed(seed, {1}), options);
}

std::vector<double> timestep_embedding(std::size_t t, std::size_t dim) {
    std::vector<double> e(dim);
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(100.0, -static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(half, 1)));
        e[i] = std::sin(static_cast<double>(t) * freq);
        e[half + i] = std::cos(static_cast<double>(t) * freq);
    }
    return e;
}

void DenoiserConfig::validate() const {
    if (latent_dim == 0 || hidden == 0) throw ConfigError("denoiser sizes must be positive");
    if (embed_dim % 2 != 0) throw ConfigError("timestep embedding size must be even");
    for (double a : alpha_bar)
        if (!(a > 0.0 && a < 1.0)) throw ConfigError("denoiser alpha_bar entries must lie in (0, 1)");
}

DenoiserConfig DenoiserConfig::for_schedule(const NoiseSchedule& schedule) const {
    DenoiserConfig c = *this;
    c.alpha_bar = predict_clean ? schedule.alpha_bar : std::vector<double>{};
    return c;
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
    j = {{"latent_dim", c.latent_dim}, {"hidden", c.hidden}, {"blocks", c.blocks}, {"embed_dim", c.embed_dim},
         {"predict_clean", c.predict_clean}};
    if (!c.alpha_bar.empty()) j["alpha_bar"] = c.alpha_bar;
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.blocks = j.at("blocks").get<std::size_t>();
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.predict_clean = j.value("predict_clean", false);
    c.alpha_bar = j.value("alpha_bar", std::vector<double>{});
    c.validate();
}

Denoiser Denoiser::create(const DenoiserConfig& config, std::uint64_t seed) {
    config.validate();
    Denoiser d;
    d.config_ = config;
    Rng rng(seed);
    const std::size_t in = 2 * config.latent_dim + config.embed_dim;
    d.in_ = nn::Linear::create(d.params_, "in", in, config.hidden, rng);
    for (std::size_t k = 0; k < config.blocks; ++k) {
        d.first_.push_back(nn::Linear::create(d.params_, "block" + std::to_string(k) + ".fc1", config.hidden,
                                              config.hidden, rng));
        d.second_.push_back(nn::Linear::create(d.params_, "block" + std::to_string(k) + ".fc2", config.hidden,
                                               config.hidden, rng, 0.5));
    }
    d.out_ = nn::Linear::create(d.params_, "out", config.hidden, config.latent_dim, rng);
    return d;
}

Latent Denoiser::forward(const Latent& z_t, std::size_t t, const Latent& condition, Tape& tape) const {
    const std::size_t D = config_.latent_dim;
    const std::size_t H = config_.hidden;
    if (z_t.size() != D || condition.size() != D)
        throw DimensionError("denoiser expects latents of length " + std::to_string(D));
    if (config_.predict_clean && (t < 1 || t > config_.alpha_bar.size()))
        throw ConfigError("clean-predicting denoiser has no alpha_bar for step " + std::to_string(t));
    tape.t = t;
    const auto p = nn::Params(params_.values());
    tape.input.assign(z_t.begin(), z_t.end());
    tape.input.insert(tape.input.end(), condition.begin(), condition.end());
    const auto emb = timestep_embedding(t, config_.embed_dim);
    tape.input.insert(tape.input.end(), emb.begin(), emb.end());

    tape.h.assign(config_.blocks + 1, std::vector<double>(H));
    tape.inner.assign(config_.blocks, std::vector<double>(H));
    tape.inner_act.assign(config_.blocks, std::vector<double>(H));
    in_.forward(p, tape.input, tape.h[0]);
    std::vector<double> act(H), branch(H);
    for (std::size_t k = 0; k < config_.blocks; ++k) {
        nn::silu(tape.h[k], act);
        first_[k].forward(p, act, tape.inner[k]);
        nn::silu(tape.inner[k], tape.inner_act[k]);
        second_[k].forward(p, tape.inner_act[k], branch);
        for (std::size_t i = 0; i < H; ++i) tape.h[k + 1][i] = tape.h[k][i] + branch[i];
    }
    nn::silu(tape.h.back(), act);
    Latent out(D);
    out_.forward(p, act, out);
    if (config_.predict_clean) {
        // eps = (z_t - sqrt(abar) z0_hat) / sqrt(1 - abar)
        const double abar = config_.alpha_bar[t - 1];
        const double inv = 1.0 / std::sqrt(1.0 - abar);
        const double c = std::sqrt(abar) * inv;
        for (std::size_t i = 0; i < D; ++i) out[i] = inv * z_t[i] - c * out[i];
    }
    return out;
}

Latent Denoiser::operator()(const Latent& z_t, std::size_t t, const Latent& condition) const {
    Tape tape;
    return forward(z_t, t, condition, tape);
}

void Denoiser::backward(const Tape& tape, const Latent& d_out, nn::Grads grads, std::span<double> d_z,
                        std::span<double> d_condition) const {
    const std::size_t D = config_.latent_dim;
    const std::size_t H = config_.hidden;
    const auto p = nn::Params(params_.values());
    std::vector<double> act(H), d_act(H), dh(H), tmp(H), d_inner(H);
    double skip = 0.0;
    Latent d_net = d_out;
    if (config_.predict_clean) {
        const double abar = config_.alpha_bar[tape.t - 1];
        skip = 1.0 / std::sqrt(1.0 - abar);
        for (double& v : d_net) v *= -std::sqrt(abar) * skip;
    }
    nn::silu(tape.h.back(), act);
    out_.backward(p, act, d_net, grads, d_act);
    nn::silu_backward(tape.h.back(), d_act, dh);
    for (std::size_t k = config_.blocks; k-- > 0;) {
        // h_{k+1} = h_k + fc2(silu(fc1(silu(h_k))))
        second_[k].backward(p, tape.inner_act[k], dh, grads, tmp);
        nn::silu_backward(tape.inner[k], tmp, d_inner);
        nn::silu(tape.h[k], act);
        first_[k].backward(p, act, d_inner, grads, d_act);
        nn::silu_backward(tape.h[k], d_act, tmp);
        for (std::size_t i = 0; i < H; ++i) dh[i] += tmp[i];
    }
    std::vector<double> d_input(tape.input.size());
    in_.backward(p, tape.input, dh, grads, d_input);
    if (!d_z.empty())
        for (std::size_t i = 0; i < D; ++i) d_z[i] = d_input[i] + skip * d_out[i];
    if (!d_condition.empty()) std::copy_n(d_input.begin() + static_cast<long>(D), D, d_condition.begin());
}

DenoiserFn Denoiser::function() const {
    return [this](const Latent& z, std::size_t t, const Latent& c) { return (*this)(z, t, c); };
}

}  // namespace spectract
