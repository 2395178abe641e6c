#include "spectract/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "spectract/errors.hpp"
#include "spectract/metrics.hpp"
#include "spectract/parallel.hpp"

namespace spectract {

using nn::Tensor;

std::string to_string(Domain d) { return d == Domain::Projection ? "projection" : "image"; }

std::string to_string(Stage s) {
    switch (s) {
        case Stage::Codec: return "codec";
        case Stage::Diffusion: return "diffusion";
        case Stage::Joint: return "joint";
    }
    return "?";
}

Domain parse_domain(const std::string& s) {
    if (s == "projection") return Domain::Projection;
    if (s == "image") return Domain::Image;
    throw ConfigError("unknown domain '" + s + "' (expected projection or image)");
}

void TrainingConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (!(backoff > 0.0 && backoff < 1.0)) throw ConfigError("backoff factor must lie in (0, 1)");
    if (!(ssim_lambda >= 0.0)) throw ConfigError("ssim weight must be non-negative");
}

void to_json(nlohmann::json& j, const TrainingConfig& c) {
    j = {{"stage", to_string(c.stage)},
         {"learning_rate", c.learning_rate},
         {"optimizer", c.optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"seed", c.seed},
         {"ssim_lambda", c.ssim_lambda},
         {"domain", to_string(c.domain)},
         {"backoff", c.backoff},
         {"augment", c.augment}};
}

void from_json(const nlohmann::json& j, TrainingConfig& c) {
    c = TrainingConfig{};
    const auto stage = j.value("stage", std::string("codec"));
    if (stage == "codec") c.stage = Stage::Codec;
    else if (stage == "diffusion") c.stage = Stage::Diffusion;
    else if (stage == "joint") c.stage = Stage::Joint;
    else throw ConfigError("unknown stage '" + stage + "'");
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    const auto opt = j.value("optimizer", std::string("adam"));
    if (opt == "adam") c.optimizer = OptimizerKind::Adam;
    else if (opt == "sgd") c.optimizer = OptimizerKind::Sgd;
    else throw ConfigError("unknown optimizer '" + opt + "'");
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.ssim_lambda = j.value("ssim_lambda", c.ssim_lambda);
    c.domain = parse_domain(j.value("domain", std::string("projection")));
    c.backoff = j.value("backoff", c.backoff);
    c.augment = j.value("augment", c.augment);
    c.validate();
}

void PairedDataset::validate() const {
    if (pairs.empty()) throw DomainError("empty paired dataset");
    const auto& first = pairs.front();
    for (const auto& p : pairs) {
        if (!p.degraded.same_shape(first.degraded) || !p.target.same_shape(first.target))
            throw DimensionError("dataset pairs differ in shape");
        if (p.degraded.h != p.target.h || p.degraded.w != p.target.w)
            throw DimensionError("input and target differ in size");
    }
    weights.validate();
    if (weights.weights.rows != first.degraded.h || weights.weights.cols != first.degraded.w)
        throw DimensionError("weight map shape differs from dataset");
}

nlohmann::json TrainingLog::to_json() const {
    return {{"loss", loss}, {"learning_rate", learning_rate}, {"rejected_epochs", rejected_epochs}};
}

namespace {

// Per-sample loss; gradients accumulate into one buffer per parameter group.
using SampleGradient = std::function<double(std::size_t sample, std::uint64_t draw_seed, std::vector<std::vector<double>>& grads)>;

struct Optimizer {
    OptimizerKind kind;
    nn::Adam adam;
    nn::Sgd sgd;

    void set_lr(double lr) {
        adam.lr = lr;
        sgd.lr = lr;
    }
    void step(std::vector<double>& values, std::span<const double> g) {
        if (kind == OptimizerKind::Adam) adam.step(values, g);
        else sgd.step(values, g);
    }
};

bool all_finite(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Mini-batch descent over every parameter group. After each epoch the
// full-set loss is evaluated; an epoch that raises it is undone and the rate
// is reduced, so the accepted trajectory never increases.
void run_epochs(const std::vector<nn::ParamStore*>& groups, std::size_t n_samples, const TrainingConfig& config,
                const SampleGradient& sample_gradient, const std::function<double()>& evaluate, TrainingLog* log) {
    config.validate();
    TrainingLog local;
    TrainingLog& out = log ? *log : local;
    out = TrainingLog{};
    double lr = config.learning_rate;
    double current = evaluate();
    out.loss.push_back(current);
    out.learning_rate.push_back(lr);
    if (!std::isfinite(current)) throw TrainingError("initial loss is not finite", out.loss);
    if (config.epochs == 0) return;

    std::vector<Optimizer> opts(groups.size(), Optimizer{config.optimizer, {}, {}});
    for (auto& o : opts) o.set_lr(lr);

    std::vector<std::size_t> order(n_samples);
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<std::vector<double>> snapshot;
        for (auto* g : groups) snapshot.push_back(g->values());
        const std::vector<Optimizer> opt_snapshot = opts;

        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(config.seed, {epoch, 0x5eedULL}));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        for (std::size_t start = 0; start < n_samples; start += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, n_samples - start);
            std::vector<std::vector<std::vector<double>>> per_sample(count);
            std::vector<double> losses(count);
            parallel_for(count, [&](std::size_t k) {
                auto& g = per_sample[k];
                for (auto* grp : groups) g.emplace_back(grp->size(), 0.0);
                const std::size_t idx = order[start + k];
                losses[k] = sample_gradient(idx, derive_seed(config.seed, {epoch, idx, 1}), g);
            });
            for (std::size_t gi = 0; gi < groups.size(); ++gi) {
                std::vector<double> total(groups[gi]->size(), 0.0);
                for (std::size_t k = 0; k < count; ++k)
                    for (std::size_t i = 0; i < total.size(); ++i) total[i] += per_sample[k][gi][i];
                for (double& v : total) v /= static_cast<double>(count);
                if (!all_finite(total)) {
                    auto traj = out.loss;
                    traj.push_back(std::numeric_limits<double>::quiet_NaN());
                    throw TrainingError("non-finite gradient in epoch " + std::to_string(epoch), traj);
                }
                opts[gi].step(groups[gi]->values(), total);
            }
        }

        const double next = evaluate();
        if (!std::isfinite(next)) {
            auto traj = out.loss;
            traj.push_back(next);
            throw TrainingError("loss became non-finite in epoch " + std::to_string(epoch), traj);
        }
        if (next > current) {
            for (std::size_t gi = 0; gi < groups.size(); ++gi) groups[gi]->values() = snapshot[gi];
            opts = opt_snapshot;
            lr *= config.backoff;
            for (auto& o : opts) o.set_lr(lr);
            ++out.rejected_epochs;
            continue;
        }
        current = next;
        out.loss.push_back(current);
        out.learning_rate.push_back(lr);
    }
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Noise-prediction draw for one sample.
struct NoiseDraw {
    std::size_t t;
    Latent noise;
};

NoiseDraw draw_noise(std::uint64_t seed, std::size_t dim, std::size_t steps) {
    Rng rng(seed);
    NoiseDraw d;
    d.t = 1 + static_cast<std::size_t>(rng() % steps);
    d.noise = standard_normal(dim, rng);
    return d;
}

// L1 noise loss and its gradient w.r.t. the prediction. `smooth` swaps in half
// the squared error.
double noise_loss(const Latent& pred, const Latent& truth, Latent& d_pred, bool smooth) {
    const double n = static_cast<double>(pred.size());
    d_pred.assign(pred.size(), 0.0);
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - truth[i];
        if (smooth) {
            acc += 0.5 * d * d;
            d_pred[i] = d / n;
        } else {
            acc += std::abs(d);
            d_pred[i] = sign(d) / n;
        }
    }
    return acc / n;
}

// Reconstruction loss with an optional smooth replacement of the L1 term.
double reconstruction_loss(const Tensor& target, const Tensor& out, double lambda, Tensor& d_out, bool smooth) {
    if (!smooth) return loss_res_with_gradient(target, out, lambda, d_out);
    const double n = static_cast<double>(out.size());
    d_out = Tensor(out.c, out.h, out.w);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double d = out.data[i] - target.data[i];
        acc += 0.5 * d * d;
        d_out.data[i] = d / n;
    }
    Image g;
    const double s = ssim_with_gradient(out.channel_image(0), target.channel_image(0), {}, g);
    for (std::size_t i = 0; i < g.size(); ++i) d_out.data[i] -= lambda * g.data[i];
    return acc / n + lambda * (1.0 - s);
}

// One joint sample: reconstruction through the sampler plus the noise loss.
// Gradients go to the codec (grads[0]) and the denoiser (grads[1]) when
// `grads` is non-null.
double joint_sample(const Codec& codec, const Denoiser& den, const NoiseSchedule& schedule, const WeightMap& w,
                    const PairedSample& s, double lambda, std::uint64_t draw_seed,
                    std::vector<std::vector<double>>* grads, bool smooth, const Latent* fixed_z0 = nullptr) {
    const std::size_t D = codec.config().latent_dim();
    const std::size_t T = schedule.steps();
    Codec::EncoderTape cond_tape;
    const Latent B = codec.encode_condition(s.degraded, w, cond_tape);
    const Latent z0 = fixed_z0 ? *fixed_z0 : codec.encode_pair(s.target, s.degraded, w);

    Rng start_rng(derive_seed(draw_seed, {1}));
    std::vector<Latent> z(T + 1);
    z[T] = standard_normal(D, start_rng);
    std::vector<Denoiser::Tape> tapes(T + 1);
    for (std::size_t t = T; t >= 1; --t) {
        const Latent eps = den.forward(z[t], t, B, tapes[t]);
        z[t - 1] = reverse_step(z[t], t, eps, schedule);
    }
    Codec::DecoderTape dec_tape;
    const Tensor out = codec.decode(z[0], s.degraded, dec_tape);
    Tensor d_out;
    const double l_res = reconstruction_loss(s.target, out, lambda, d_out, smooth);

    const NoiseDraw nd = draw_noise(derive_seed(draw_seed, {2}), D, T);
    const Latent z_t = forward_sample(z0, nd.t, schedule, nd.noise);
    Denoiser::Tape diff_tape;
    const Latent eps_pred = den.forward(z_t, nd.t, B, diff_tape);
    Latent d_eps;
    const double l_diff = noise_loss(eps_pred, nd.noise, d_eps, smooth);
    if (!grads) return l_res + l_diff;

    auto& g_codec = (*grads)[0];
    auto& g_den = (*grads)[1];
    Latent dz(D), dB(D, 0.0), tmp_z(D), tmp_b(D);
    codec.decode_backward(z[0], dec_tape, d_out, g_codec, dz);
    for (std::size_t t = 1; t <= T; ++t) {
        // z_{t-1} = keep z_t - eps_scale eps(z_t, t, B)
        const auto c = step_coefficients(t, schedule);
        Latent d_eps_t(D);
        for (std::size_t i = 0; i < D; ++i) d_eps_t[i] = -c.eps_scale * dz[i];
        den.backward(tapes[t], d_eps_t, g_den, tmp_z, tmp_b);
        for (std::size_t i = 0; i < D; ++i) {
            dz[i] = c.keep * dz[i] + tmp_z[i];
            dB[i] += tmp_b[i];
        }
    }
    den.backward(diff_tape, d_eps, g_den, {}, tmp_b);
    for (std::size_t i = 0; i < D; ++i) dB[i] += tmp_b[i];
    codec.encode_backward(cond_tape, dB, g_codec);
    return l_res + l_diff;
}

double mean_over(std::size_t n, const std::function<double(std::size_t)>& f) {
    std::vector<double> v(n);
    parallel_for(n, [&](std::size_t i) { v[i] = f(i); });
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(n);
}

}  // namespace

double codec_loss(const PairedDataset& data, const Codec& codec, double ssim_lambda) {
    data.validate();
    return mean_over(data.size(), [&](std::size_t i) {
        const auto& s = data.pairs[i];
        const Latent z = codec.encode_pair(s.target, s.degraded, data.weights);
        return loss_res(s.target, codec.decode(z, s.degraded), ssim_lambda);
    });
}

Tensor grid_symmetry(const Tensor& x, unsigned k) {
    if (k >= 8) throw ConfigError("grid symmetry index must lie in [0, 8)");
    const bool transpose = (k & 4U) != 0;
    if (transpose && x.h != x.w) throw DimensionError("transposing symmetries need square planes");
    Tensor y(x.c, x.h, x.w);
    for (std::size_t c = 0; c < x.c; ++c)
        for (std::size_t r = 0; r < x.h; ++r)
            for (std::size_t q = 0; q < x.w; ++q) {
                std::size_t rr = (k & 2U) ? x.h - 1 - r : r;
                std::size_t qq = (k & 1U) ? x.w - 1 - q : q;
                if (transpose) std::swap(rr, qq);
                y.at(c, r, q) = x.at(c, rr, qq);
            }
    return y;
}

Tensor sinogram_symmetry(const Tensor& x, std::size_t shift, bool mirror) {
    const std::size_t V = x.h, D = x.w;
    Tensor y(x.c, V, D);
    for (std::size_t c = 0; c < x.c; ++c)
        for (std::size_t k = 0; k < V; ++k) {
            const std::size_t src = (k + shift) % V;
            const std::size_t view = mirror ? (V - src) % V : src;
            for (std::size_t d = 0; d < D; ++d) y.at(c, k, d) = x.at(c, view, mirror ? D - 1 - d : d);
        }
    return y;
}

PairedSample augment_pair(const PairedSample& s, const WeightMap& w, Domain domain, std::uint64_t draw,
                          WeightMap& w_out) {
    Rng rng(draw);
    std::function<Tensor(const Tensor&)> f;
    if (domain == Domain::Image) {
        const auto k = static_cast<unsigned>(rng() % (s.degraded.h == s.degraded.w ? 8 : 4));
        f = [k](const Tensor& x) { return grid_symmetry(x, k); };
    } else {
        const std::size_t shift = rng() % s.degraded.h;
        const bool mirror = (rng() & 1U) != 0;
        f = [shift, mirror](const Tensor& x) { return sinogram_symmetry(x, shift, mirror); };
    }
    Tensor wt(1, w.weights.rows, w.weights.cols);
    wt.data = w.weights.data;
    w_out = WeightMap{Image(w.weights.rows, w.weights.cols)};
    w_out.weights.data = f(wt).data;
    return {f(s.degraded), f(s.target)};
}

Codec pretrain_codec(const PairedDataset& data, const Codec& init, const TrainingConfig& config, TrainingLog* log) {
    data.validate();
    Codec codec = init;
    auto grad = [&](std::size_t i, std::uint64_t draw, std::vector<std::vector<double>>& g) {
        WeightMap w = data.weights;
        const PairedSample s = config.augment ? augment_pair(data.pairs[i], data.weights, data.domain,
                                                             derive_seed(draw, {0xa06}), w)
                                              : data.pairs[i];
        Codec::EncoderTape et;
        const Latent z = codec.encode_pair(s.target, s.degraded, w, et);
        Codec::DecoderTape dt;
        const Tensor out = codec.decode(z, s.degraded, dt);
        Tensor d_out;
        const double loss = loss_res_with_gradient(s.target, out, config.ssim_lambda, d_out);
        Latent dz(z.size());
        codec.decode_backward(z, dt, d_out, g[0], dz);
        codec.encode_backward(et, dz, g[0]);
        return loss;
    };
    run_epochs({&codec.params()}, data.size(), config, grad,
               [&] { return codec_loss(data, codec, config.ssim_lambda); }, log);
    return codec;
}

Codec pretrain_codec(const PairedDataset& data, const CodecConfig& codec_config, const TrainingConfig& config,
                     TrainingLog* log) {
    return pretrain_codec(data, Codec::create(codec_config, derive_seed(config.seed, {0xc0dec})), config, log);
}

namespace {

void check_denoiser_schedule(const Denoiser& den, const NoiseSchedule& schedule) {
    if (den.config().predict_clean && den.config().alpha_bar != schedule.alpha_bar)
        throw ConfigError("clean-predicting denoiser was built for a different schedule");
}

struct LatentPairs {
    std::vector<Latent> z0;
    std::vector<Latent> cond;
};

LatentPairs encode_all(const PairedDataset& data, const Codec& codec) {
    LatentPairs lp;
    lp.z0.resize(data.size());
    lp.cond.resize(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
        const auto& s = data.pairs[i];
        lp.z0[i] = codec.encode_pair(s.target, s.degraded, data.weights);
        lp.cond[i] = codec.encode_condition(s.degraded, data.weights);
    });
    return lp;
}

double diffusion_eval(const LatentPairs& lp, const Denoiser& den, const NoiseSchedule& schedule, std::uint64_t seed) {
    return mean_over(lp.z0.size(), [&](std::size_t i) {
        const NoiseDraw nd = draw_noise(derive_seed(seed, {i, 0xe7a1ULL}), lp.z0[i].size(), schedule.steps());
        const Latent z_t = forward_sample(lp.z0[i], nd.t, schedule, nd.noise);
        return diffusion_loss(den(z_t, nd.t, lp.cond[i]), nd.noise);
    });
}

}  // namespace

double diffusion_eval_loss(const PairedDataset& data, const Codec& codec, const Denoiser& denoiser,
                           const NoiseSchedule& schedule, std::uint64_t seed) {
    data.validate();
    return diffusion_eval(encode_all(data, codec), denoiser, schedule, seed);
}

Denoiser train_diffusion(const PairedDataset& data, const Codec& codec, const NoiseSchedule& schedule,
                         const Denoiser& init, const TrainingConfig& config, TrainingLog* log) {
    data.validate();
    schedule.validate();
    if (schedule.steps() == 0) throw ConfigError("diffusion training needs at least one step");
    if (init.config().latent_dim != codec.config().latent_dim())
        throw DimensionError("denoiser latent length differs from codec latent length");
    check_denoiser_schedule(init, schedule);
    const LatentPairs lp = encode_all(data, codec);
    Denoiser den = init;
    auto grad = [&](std::size_t i, std::uint64_t draw, std::vector<std::vector<double>>& g) {
        const NoiseDraw nd = draw_noise(draw, lp.z0[i].size(), schedule.steps());
        const Latent z_t = forward_sample(lp.z0[i], nd.t, schedule, nd.noise);
        Denoiser::Tape tape;
        const Latent pred = den.forward(z_t, nd.t, lp.cond[i], tape);
        Latent d_pred;
        const double loss = noise_loss(pred, nd.noise, d_pred, false);
        den.backward(tape, d_pred, g[0], {}, {});
        return loss;
    };
    run_epochs({&den.params()}, data.size(), config, grad,
               [&] { return diffusion_eval(lp, den, schedule, config.seed); }, log);
    return den;
}

Denoiser train_diffusion(const PairedDataset& data, const Codec& codec, const NoiseSchedule& schedule,
                         const DenoiserConfig& denoiser_config, const TrainingConfig& config, TrainingLog* log) {
    return train_diffusion(data, codec, schedule,
                           Denoiser::create(denoiser_config.for_schedule(schedule), derive_seed(config.seed, {0xde9})),
                           config, log);
}

double joint_loss(const PairedDataset& data, const Codec& codec, const Denoiser& denoiser,
                  const NoiseSchedule& schedule, double ssim_lambda, std::uint64_t seed) {
    data.validate();
    return mean_over(data.size(), [&](std::size_t i) {
        return joint_sample(codec, denoiser, schedule, data.weights, data.pairs[i], ssim_lambda,
                            derive_seed(seed, {i, 0x10147ULL}), nullptr, false);
    });
}

JointModel joint_finetune(const Codec& codec, const Denoiser& denoiser, const PairedDataset& data,
                          const NoiseSchedule& schedule, const TrainingConfig& config, TrainingLog* log) {
    data.validate();
    schedule.validate();
    if (schedule.steps() == 0) throw ConfigError("joint fine-tuning needs at least one step");
    check_denoiser_schedule(denoiser, schedule);
    JointModel m{codec, denoiser};
    auto grad = [&](std::size_t i, std::uint64_t draw, std::vector<std::vector<double>>& g) {
        if (!config.augment)
            return joint_sample(m.codec, m.denoiser, schedule, data.weights, data.pairs[i], config.ssim_lambda, draw,
                                &g, false);
        WeightMap w;
        const PairedSample s = augment_pair(data.pairs[i], data.weights, data.domain, derive_seed(draw, {0xa06}), w);
        return joint_sample(m.codec, m.denoiser, schedule, w, s, config.ssim_lambda, draw, &g, false);
    };
    run_epochs({&m.codec.params(), &m.denoiser.params()}, data.size(), config, grad,
               [&] { return joint_loss(data, m.codec, m.denoiser, schedule, config.ssim_lambda, config.seed); }, log);
    return m;
}

Tensor restore(const Codec& codec, const Denoiser& denoiser, const NoiseSchedule& schedule, const WeightMap& w,
               const Tensor& degraded, std::uint64_t seed) {
    const Latent B = codec.encode_condition(degraded, w);
    const Latent z = sample_latent(denoiser.function(), B, schedule, seed);
    return codec.decode(z, degraded);
}

// ---------------------------------------------------------------------------
// Gradient checks

std::vector<GradComponent> all_grad_components() {
    return {GradComponent::Linear,  GradComponent::Conv3x3,  GradComponent::Conv1x1,
            GradComponent::Silu,    GradComponent::ModulatedBlock, GradComponent::Encoder,
            GradComponent::Decoder, GradComponent::Denoiser, GradComponent::LossRes,
            GradComponent::JointChain};
}

std::string to_string(GradComponent c) {
    switch (c) {
        case GradComponent::Linear: return "linear";
        case GradComponent::Conv3x3: return "conv3x3";
        case GradComponent::Conv1x1: return "conv1x1";
        case GradComponent::Silu: return "silu";
        case GradComponent::ModulatedBlock: return "modulated_block";
        case GradComponent::Encoder: return "encoder";
        case GradComponent::Decoder: return "decoder";
        case GradComponent::Denoiser: return "denoiser";
        case GradComponent::LossRes: return "loss_res";
        case GradComponent::JointChain: return "joint_chain";
    }
    return "?";
}

std::vector<std::size_t> probe_indices(const nn::ParamStore& store, std::size_t per_block) {
    std::vector<std::size_t> idx;
    for (const auto& b : store.blocks()) {
        const std::size_t k = std::min(per_block, b.size);
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t off = k == 1 ? 0 : j * (b.size - 1) / (k - 1);
            idx.push_back(b.offset + off);
        }
    }
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    return idx;
}

GradCheckReport finite_difference_check(std::vector<double>& values, std::span<const double> analytic,
                                        const std::function<double()>& loss, const std::vector<std::size_t>& indices,
                                        const std::function<std::string(std::size_t)>& label) {
    if (analytic.size() != values.size()) throw DimensionError("analytic gradient length differs from parameters");
    if (!std::all_of(analytic.begin(), analytic.end(), [](double v) { return std::isfinite(v); }))
        throw TrainingError("non-finite analytic gradient", {});
    double scale = 0.0;
    for (std::size_t i : indices) scale = std::max(scale, std::abs(analytic[i]));
    GradCheckReport r;
    for (std::size_t i : indices) {
        const double saved = values[i];
        const double h = 1e-5 * std::max(1.0, std::abs(saved));
        values[i] = saved + h;
        const double up = loss();
        values[i] = saved - h;
        const double down = loss();
        values[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) throw TrainingError("non-finite loss during gradient check", {});
        const double numeric = (up - down) / (2.0 * h);
        // Entries far below the probe's gradient scale are compared against that scale.
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6 * scale, 1e-300});
        const double err = std::abs(analytic[i] - numeric) / denom;
        ++r.checked;
        if (err > r.max_rel_error) {
            r.max_rel_error = err;
            r.worst = label ? label(i) : std::to_string(i);
        }
    }
    return r;
}

namespace {

// Entries in [0.5, 1.5] * scale: no gradient entry of an affine probe cancels to near zero.
std::vector<double> positive_vector(std::size_t n, Rng& rng, double scale = 1.0) {
    std::uniform_real_distribution<double> u(0.5, 1.5);
    std::vector<double> v(n);
    for (double& x : v) x = scale * u(rng);
    return v;
}

std::vector<double> random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
    auto v = standard_normal(n, rng);
    for (double& x : v) x *= scale;
    return v;
}

Tensor random_tensor(std::size_t c, std::size_t h, std::size_t w, Rng& rng, double scale = 1.0) {
    Tensor t(c, h, w);
    t.data = random_vector(t.size(), rng, scale);
    return t;
}

std::function<std::string(std::size_t)> block_label(const nn::ParamStore& store, const std::string& extra = "input") {
    return [&store, extra](std::size_t i) {
        for (const auto& b : store.blocks())
            if (i >= b.offset && i < b.offset + b.size) return b.name + "[" + std::to_string(i - b.offset) + "]";
        return extra + "[" + std::to_string(i - store.size()) + "]";
    };
}

// Linear probe functional: sum r_i y_i.
double linear_probe(std::span<const double> y, std::span<const double> r, std::span<double> dy) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        acc += r[i] * y[i];
        if (!dy.empty()) dy[i] = r[i];
    }
    return acc;
}

// Smooth probe functional: sum r_i y_i + 0.5 sum y_i^2. Writes dL/dy.
double probe(std::span<const double> y, std::span<const double> r, std::span<double> dy) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        acc += r[i] * y[i] + 0.5 * y[i] * y[i];
        if (!dy.empty()) dy[i] = r[i] + y[i];
    }
    return acc;
}

std::vector<std::size_t> all_indices(std::size_t from, std::size_t to, std::size_t max_count) {
    std::vector<std::size_t> idx;
    const std::size_t n = to - from;
    const std::size_t k = std::min(n, max_count);
    for (std::size_t j = 0; j < k; ++j) idx.push_back(from + (k == 1 ? 0 : j * (n - 1) / (k - 1)));
    return idx;
}

// Appends an input vector to the parameter values so one check covers both.
struct Packed {
    std::vector<double> values;
    std::size_t n_params = 0;
};

GradCheckReport check_conv(std::size_t k, Rng& rng) {
    nn::ParamStore store;
    const auto conv = nn::Conv2d::create(store, "conv", 3, 4, k, rng);
    store.values() = positive_vector(store.size(), rng, 1.0 / static_cast<double>(3 * k * k));
    Tensor x0(3, 6, 5);
    x0.data = positive_vector(x0.size(), rng);
    const auto r = positive_vector(4 * 6 * 5, rng);
    Packed pk{store.values(), store.size()};
    pk.values.insert(pk.values.end(), x0.data.begin(), x0.data.end());
    auto unpack_x = [&] {
        Tensor x(3, 6, 5);
        std::copy(pk.values.begin() + static_cast<long>(pk.n_params), pk.values.end(), x.data.begin());
        return x;
    };
    auto loss = [&] {
        const Tensor y = conv.forward(nn::Params(pk.values.data(), pk.n_params), unpack_x());
        return linear_probe(y.data, r, {});
    };
    std::vector<double> g(pk.values.size(), 0.0);
    const Tensor x = unpack_x();
    const Tensor y = conv.forward(nn::Params(pk.values.data(), pk.n_params), x);
    Tensor dy(y.c, y.h, y.w);
    linear_probe(y.data, r, dy.data);
    const Tensor dx = conv.backward(nn::Params(pk.values.data(), pk.n_params), x, dy,
                                    nn::Grads(g.data(), pk.n_params), true);
    std::copy(dx.data.begin(), dx.data.end(), g.begin() + static_cast<long>(pk.n_params));
    std::vector<std::size_t> idx = all_indices(0, pk.values.size(), 400);
    return finite_difference_check(pk.values, g, loss, idx, block_label(store));
}

CodecConfig probe_codec_config(std::size_t in_channels) {
    CodecConfig c;
    c.in_channels = in_channels;
    c.latent_channels = 2;
    c.unshuffle = 4;
    c.encoder_width = 6;
    c.encoder_blocks = 2;
    c.widths = {3, 4, 5, 6};
    c.down_blocks = {1, 1, 1, 2};
    c.up_blocks = {1, 2, 1};
    return c;
}

// Perturbs every parameter so biases and zero-initialized entries are generic.
void jitter(nn::ParamStore& store, Rng& rng, double scale) {
    std::normal_distribution<double> n(0.0, scale);
    for (double& v : store.values()) v += n(rng);
}

}  // namespace

GradCheckReport grad_check(GradComponent component, std::uint64_t probe_seed) {
    Rng rng(derive_seed(probe_seed, {static_cast<std::uint64_t>(component)}));
    switch (component) {
        case GradComponent::Linear: {
            nn::ParamStore store;
            const auto lin = nn::Linear::create(store, "linear", 7, 5, rng);
            store.values() = positive_vector(store.size(), rng, 1.0 / 7.0);
            const auto x = positive_vector(7, rng);
            const auto r = positive_vector(5, rng);
            Packed pk{store.values(), store.size()};
            pk.values.insert(pk.values.end(), x.begin(), x.end());
            auto forward = [&](std::vector<double>& y) {
                lin.forward(nn::Params(pk.values.data(), pk.n_params),
                            std::span<const double>(pk.values.data() + pk.n_params, 7), y);
            };
            auto loss = [&] {
                std::vector<double> y(5);
                forward(y);
                return linear_probe(y, r, {});
            };
            std::vector<double> y(5), dy(5), g(pk.values.size(), 0.0);
            forward(y);
            linear_probe(y, r, dy);
            lin.backward(nn::Params(pk.values.data(), pk.n_params),
                         std::span<const double>(pk.values.data() + pk.n_params, 7), dy,
                         nn::Grads(g.data(), pk.n_params), std::span<double>(g.data() + pk.n_params, 7));
            return finite_difference_check(pk.values, g, loss, all_indices(0, pk.values.size(), 1000),
                                           block_label(store));
        }
        case GradComponent::Conv3x3: return check_conv(3, rng);
        case GradComponent::Conv1x1: return check_conv(1, rng);
        case GradComponent::Silu: {
            auto x = random_vector(40, rng, 2.0);
            const auto r = random_vector(40, rng);
            auto loss = [&] {
                std::vector<double> y(x.size());
                nn::silu(x, y);
                return probe(y, r, {});
            };
            std::vector<double> y(x.size()), dy(x.size()), g(x.size());
            nn::silu(x, y);
            probe(y, r, dy);
            nn::silu_backward(x, dy, g);
            return finite_difference_check(x, g, loss, all_indices(0, x.size(), 40));
        }
        case GradComponent::ModulatedBlock: {
            nn::ParamStore store;
            const std::size_t D = 6;
            const auto block = ModulatedBlock::create(store, "block", 3, D, rng);
            jitter(store, rng, 0.2);
            const Tensor h0 = random_tensor(3, 5, 6, rng);
            const Latent z0 = random_vector(D, rng);
            const Tensor r = random_tensor(3, 5, 6, rng);
            Packed pk{store.values(), store.size()};
            pk.values.insert(pk.values.end(), z0.begin(), z0.end());
            pk.values.insert(pk.values.end(), h0.data.begin(), h0.data.end());
            auto unpack = [&](Latent& z, Tensor& h) {
                z.assign(pk.values.begin() + static_cast<long>(pk.n_params),
                         pk.values.begin() + static_cast<long>(pk.n_params + D));
                h = Tensor(3, 5, 6);
                std::copy(pk.values.begin() + static_cast<long>(pk.n_params + D), pk.values.end(), h.data.begin());
            };
            auto loss = [&] {
                Latent z;
                Tensor h;
                unpack(z, h);
                ModulatedBlockTape tape;
                const Tensor y = modulated_block_forward(block, nn::Params(pk.values.data(), pk.n_params), h, z, tape);
                return probe(y.data, r.data, {});
            };
            Latent z;
            Tensor h;
            unpack(z, h);
            ModulatedBlockTape tape;
            const auto p = nn::Params(pk.values.data(), pk.n_params);
            const Tensor y = modulated_block_forward(block, p, h, z, tape);
            Tensor dy(y.c, y.h, y.w);
            probe(y.data, r.data, dy.data);
            std::vector<double> g(pk.values.size(), 0.0);
            const Tensor dh = modulated_block_backward(block, p, tape, dy, z, nn::Grads(g.data(), pk.n_params),
                                                       std::span<double>(g.data() + pk.n_params, D));
            std::copy(dh.data.begin(), dh.data.end(), g.begin() + static_cast<long>(pk.n_params + D));
            return finite_difference_check(pk.values, g, loss, all_indices(0, pk.values.size(), 600),
                                           block_label(store));
        }
        case GradComponent::Encoder: {
            Codec codec = Codec::create(probe_codec_config(2), rng());
            jitter(codec.params(), rng, 0.05);
            const Tensor lq = random_tensor(2, 16, 16, rng);
            const Tensor gt = random_tensor(1, 16, 16, rng);
            const WeightMap w = WeightMap::constant(16, 16, 0.7);
            const auto r1 = random_vector(codec.config().latent_dim(), rng);
            const auto r2 = random_vector(codec.config().latent_dim(), rng);
            auto loss = [&] {
                return probe(codec.encode_pair(gt, lq, w), r1, {}) + probe(codec.encode_condition(lq, w), r2, {});
            };
            std::vector<double> g(codec.params().size(), 0.0);
            Codec::EncoderTape ta, tb;
            const Latent za = codec.encode_pair(gt, lq, w, ta);
            const Latent zb = codec.encode_condition(lq, w, tb);
            Latent da(za.size()), db(zb.size());
            probe(za, r1, da);
            probe(zb, r2, db);
            codec.encode_backward(ta, da, g);
            codec.encode_backward(tb, db, g);
            std::vector<std::size_t> idx;
            for (std::size_t i : probe_indices(codec.params(), 12))
                if (codec.params().values().size() > i &&
                    block_label(codec.params())(i).rfind("enc.", 0) == 0)
                    idx.push_back(i);
            return finite_difference_check(codec.params().values(), g, loss, idx, block_label(codec.params()));
        }
        case GradComponent::Decoder: {
            Codec codec = Codec::create(probe_codec_config(2), rng());
            jitter(codec.params(), rng, 0.05);
            const Tensor lq = random_tensor(2, 16, 16, rng);
            const Tensor r = random_tensor(1, 16, 16, rng);
            const Latent z0 = random_vector(codec.config().latent_dim(), rng);
            auto& P = codec.params().values();
            const std::size_t n_params = P.size();
            P.insert(P.end(), z0.begin(), z0.end());
            auto latent = [&] { return Latent(P.begin() + static_cast<long>(n_params), P.end()); };
            // The store's own view excludes the appended latent.
            auto loss = [&] { return probe(codec.decode(latent(), lq).data, r.data, {}); };
            Codec::DecoderTape tape;
            const Latent z = latent();
            const Tensor y = codec.decode(z, lq, tape);
            Tensor dy(y.c, y.h, y.w);
            probe(y.data, r.data, dy.data);
            std::vector<double> g(P.size(), 0.0);
            codec.decode_backward(z, tape, dy, nn::Grads(g.data(), n_params),
                                  std::span<double>(g.data() + n_params, z.size()));
            std::vector<std::size_t> idx;
            const auto label = block_label(codec.params(), "latent");
            for (std::size_t i : probe_indices(codec.params(), 12))
                if (i < n_params && label(i).rfind("dec.", 0) == 0) idx.push_back(i);
            for (std::size_t i = n_params; i < P.size(); ++i) idx.push_back(i);
            auto report = finite_difference_check(P, g, loss, idx, label);
            P.resize(n_params);
            return report;
        }
        case GradComponent::Denoiser: {
            DenoiserConfig cfg{8, 12, 2, 6, true, {}};
            cfg = cfg.for_schedule(make_schedule(3));
            Denoiser den = Denoiser::create(cfg, rng());
            jitter(den.params(), rng, 0.1);
            auto& P = den.params().values();
            const std::size_t n_params = P.size();
            const auto zc = random_vector(16, rng);
            P.insert(P.end(), zc.begin(), zc.end());
            const auto r = random_vector(8, rng);
            auto split = [&](Latent& z, Latent& c) {
                z.assign(P.begin() + static_cast<long>(n_params), P.begin() + static_cast<long>(n_params + 8));
                c.assign(P.begin() + static_cast<long>(n_params + 8), P.end());
            };
            auto loss = [&] {
                Latent z, c;
                split(z, c);
                return probe(den(z, 2, c), r, {});
            };
            Latent z, c;
            split(z, c);
            Denoiser::Tape tape;
            const Latent y = den.forward(z, 2, c, tape);
            Latent dy(8);
            probe(y, r, dy);
            std::vector<double> g(P.size(), 0.0);
            den.backward(tape, dy, nn::Grads(g.data(), n_params), std::span<double>(g.data() + n_params, 8),
                         std::span<double>(g.data() + n_params + 8, 8));
            auto report = finite_difference_check(P, g, loss, all_indices(0, P.size(), 800),
                                                  block_label(den.params()));
            P.resize(n_params);
            return report;
        }
        case GradComponent::LossRes: {
            const Tensor target = random_tensor(1, 16, 16, rng, 0.3);
            Tensor out = target;
            std::vector<std::size_t> idx;
            std::bernoulli_distribution keep(0.1);
            std::uniform_real_distribution<double> mag(0.01, 0.2);
            for (std::size_t i = 0; i < out.size(); ++i) {
                if (keep(rng)) continue;  // exact match: L1 kink
                out.data[i] += (rng() % 2 ? 1.0 : -1.0) * mag(rng);
            }
            GradCheckReport skipped;
            for (std::size_t i = 0; i < out.size(); ++i) {
                if (std::abs(out.data[i] - target.data[i]) < 1e-6) ++skipped.skipped;
                else idx.push_back(i);
            }
            auto loss = [&] { return loss_res(target, out, 0.2); };
            Tensor d;
            loss_res_with_gradient(target, out, 0.2, d);
            auto report = finite_difference_check(out.data, d.data, loss, idx);
            report.skipped = skipped.skipped;
            return report;
        }
        case GradComponent::JointChain: {
            Codec codec = Codec::create(probe_codec_config(1), rng());
            jitter(codec.params(), rng, 0.05);
            const NoiseSchedule schedule = make_schedule(3);
            Denoiser den = Denoiser::create(DenoiserConfig{codec.config().latent_dim(), 10, 2, 4, true, {}}.for_schedule(schedule), rng());
            jitter(den.params(), rng, 0.1);
            PairedSample s{random_tensor(1, 16, 16, rng, 0.5), random_tensor(1, 16, 16, rng, 0.5)};
            const WeightMap w = WeightMap::constant(16, 16, 1.0);
            const std::uint64_t draw = rng();
            // Both parameter sets packed into one vector for the check.
            const std::size_t nc = codec.params().size();
            std::vector<double> packed = codec.params().values();
            packed.insert(packed.end(), den.params().values().begin(), den.params().values().end());
            auto sync = [&] {
                std::copy_n(packed.begin(), nc, codec.params().values().begin());
                std::copy(packed.begin() + static_cast<long>(nc), packed.end(), den.params().values().begin());
            };
            // The noise target's clean latent is a constant of the objective.
            const Latent z0 = codec.encode_pair(s.target, s.degraded, w);
            auto loss = [&] {
                sync();
                return joint_sample(codec, den, schedule, w, s, 0.2, draw, nullptr, true, &z0);
            };
            std::vector<std::vector<double>> grads{std::vector<double>(nc, 0.0),
                                                   std::vector<double>(den.params().size(), 0.0)};
            joint_sample(codec, den, schedule, w, s, 0.2, draw, &grads, true, &z0);
            std::vector<double> g = grads[0];
            g.insert(g.end(), grads[1].begin(), grads[1].end());
            std::vector<std::size_t> idx = probe_indices(codec.params(), 3);
            for (std::size_t i : probe_indices(den.params(), 4)) idx.push_back(nc + i);
            auto label = [&](std::size_t i) {
                return i < nc ? block_label(codec.params())(i) : "denoiser:" + block_label(den.params())(i - nc);
            };
            return finite_difference_check(packed, g, loss, idx, label);
        }
    }
    throw ConfigError("unknown gradient component");
}

}  // namespace spectract
