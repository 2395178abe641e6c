#include "spectract/codec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "spectract/errors.hpp"
#include "spectract/metrics.hpp"

namespace spectract {

using nn::Tensor;

WeightMap WeightMap::constant(std::size_t rows, std::size_t cols, double value) {
    WeightMap w{Image(rows, cols, value)};
    w.validate();
    return w;
}

WeightMap WeightMap::from_percentile(const std::vector<Image>& samples, double percentile) {
    if (samples.empty()) throw DomainError("no samples for weight map");
    if (!(percentile > 0.0 && percentile <= 1.0)) throw ConfigError("percentile must lie in (0, 1]");
    std::vector<double> all;
    for (const auto& s : samples) all.insert(all.end(), s.data.begin(), s.data.end());
    for (double& v : all) v = std::abs(v);
    const auto k = static_cast<std::size_t>(std::floor(percentile * static_cast<double>(all.size() - 1)));
    std::nth_element(all.begin(), all.begin() + static_cast<long>(k), all.end());
    const double p = all[k];
    if (!(p > 0.0)) throw DomainError("percentile of the samples is zero");
    return constant(samples.front().rows, samples.front().cols, 1.0 / p);
}

void WeightMap::validate() const {
    if (weights.size() == 0) throw DimensionError("empty weight map");
    for (double v : weights.data)
        if (!(v > 0.0) || !std::isfinite(v)) throw DomainError("weights must be positive and finite");
}

double WeightMap::scalar() const {
    if (weights.size() == 0) throw DimensionError("empty weight map");
    return weights.data.front();
}

Tensor WeightMap::apply(const Tensor& x) const {
    if (x.h != weights.rows || x.w != weights.cols) throw DimensionError("weight map shape differs from input");
    Tensor out = x;
    for (std::size_t k = 0; k < x.c; ++k) {
        auto ch = out.channel(k);
        for (std::size_t i = 0; i < ch.size(); ++i) ch[i] *= weights.data[i];
    }
    return out;
}

std::size_t CodecConfig::side_multiple() const {
    const std::size_t dec = std::size_t{2} << (widths.size() - 1);
    return std::lcm(dec, unshuffle);
}

void CodecConfig::validate() const {
    if (in_channels == 0 || target_channels == 0 || latent_channels == 0) throw ConfigError("codec channel counts must be positive");
    if (unshuffle == 0 || encoder_width == 0) throw ConfigError("codec encoder sizes must be positive");
    if (widths.size() < 2) throw ConfigError("decoder needs at least two levels");
    if (down_blocks.size() != widths.size()) throw ConfigError("one down-block count per level required");
    if (up_blocks.size() + 1 != widths.size()) throw ConfigError("one up-block count per non-bottleneck level required");
    for (auto w : widths)
        if (w == 0) throw ConfigError("decoder widths must be positive");
    if (!(ssim_lambda >= 0.0)) throw ConfigError("ssim weight must be non-negative");
}

CodecConfig CodecConfig::reference(std::size_t in_channels) {
    CodecConfig c;
    c.in_channels = in_channels;
    c.latent_channels = 64;
    c.unshuffle = 8;
    c.encoder_width = 64;
    c.encoder_blocks = 6;
    c.widths = {48, 96, 192, 384};
    c.down_blocks = {6, 5, 5, 4};
    c.up_blocks = {6, 5, 5};
    return c;
}

CodecConfig CodecConfig::toy(std::size_t in_channels) {
    CodecConfig c;
    c.in_channels = in_channels;
    return c;
}

void to_json(nlohmann::json& j, const CodecConfig& c) {
    j = {{"in_channels", c.in_channels},       {"target_channels", c.target_channels},
         {"latent_channels", c.latent_channels}, {"unshuffle", c.unshuffle},
         {"encoder_width", c.encoder_width},   {"encoder_blocks", c.encoder_blocks},
         {"widths", c.widths},                 {"down_blocks", c.down_blocks},
         {"up_blocks", c.up_blocks},           {"ssim_lambda", c.ssim_lambda}};
}

void from_json(const nlohmann::json& j, CodecConfig& c) {
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.target_channels = j.at("target_channels").get<std::size_t>();
    c.latent_channels = j.at("latent_channels").get<std::size_t>();
    c.unshuffle = j.at("unshuffle").get<std::size_t>();
    c.encoder_width = j.at("encoder_width").get<std::size_t>();
    c.encoder_blocks = j.at("encoder_blocks").get<std::size_t>();
    c.widths = j.at("widths").get<std::vector<std::size_t>>();
    c.down_blocks = j.at("down_blocks").get<std::vector<std::size_t>>();
    c.up_blocks = j.at("up_blocks").get<std::vector<std::size_t>>();
    c.ssim_lambda = j.at("ssim_lambda").get<double>();
    c.validate();
}

Codec Codec::create(const CodecConfig& config, std::uint64_t seed) {
    config.validate();
    Codec c;
    c.config_ = config;
    Rng rng(seed);
    auto& P = c.params_;
    const std::size_t r2 = config.unshuffle * config.unshuffle;
    const std::size_t ew = config.encoder_width;
    const std::size_t D = config.latent_dim();

    c.enc_stem_ = nn::Conv2d::create(P, "enc.stem", (config.target_channels + config.in_channels) * r2, ew, 3, rng);
    for (std::size_t k = 0; k < config.encoder_blocks; ++k) {
        const std::string n = "enc.block" + std::to_string(k);
        c.enc_conv1_.push_back(nn::Conv2d::create(P, n + ".conv1", ew, ew, 3, rng, 1.4));
        c.enc_conv2_.push_back(nn::Conv2d::create(P, n + ".conv2", ew, ew, 3, rng, 0.5));
    }
    c.enc_fc1_ = nn::Linear::create(P, "enc.fc1", ew, D, rng, 1.4);
    c.enc_fc2_ = nn::Linear::create(P, "enc.fc2", D, D, rng);

    const auto& W = config.widths;
    const std::size_t L = W.size();
    auto make_block = [&](const std::string& n, std::size_t w) { return ModulatedBlock::create(P, n, w, D, rng); };
    c.dec_stem_ = nn::Conv2d::create(P, "dec.stem", 4 * config.in_channels, W[0], 3, rng);
    c.dec_down_.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t b = 0; b < config.down_blocks[l]; ++b)
            c.dec_down_[l].push_back(make_block("dec.down" + std::to_string(l) + "." + std::to_string(b), W[l]));
        if (l + 1 < L)
            c.dec_downsample_.push_back(
                nn::Conv2d::create(P, "dec.downsample" + std::to_string(l), 4 * W[l], W[l + 1], 1, rng));
    }
    c.dec_up_.resize(L - 1);
    for (std::size_t l = 0; l + 1 < L; ++l) {
        c.dec_upsample_.push_back(nn::Conv2d::create(P, "dec.upsample" + std::to_string(l), W[l + 1], 4 * W[l], 1, rng));
        for (std::size_t b = 0; b < config.up_blocks[l]; ++b)
            c.dec_up_[l].push_back(make_block("dec.up" + std::to_string(l) + "." + std::to_string(b), W[l]));
    }
    c.dec_head_ = nn::Conv2d::create(P, "dec.head", W[0], 4, 3, rng, 0.1);
    c.dec_skip_ = nn::Linear::create(P, "dec.skip", config.latent_dim(), config.in_channels, rng, 0.1);
    P.values()[c.dec_skip_.bias] = 1.0;
    return c;
}

Latent Codec::encode(const Tensor& u, std::size_t in_offset, EncoderTape& tape) const {
    const auto p = nn::Params(params_.values());
    tape.input = u;
    tape.stem = enc_stem_.forward(p, u, in_offset);
    Tensor h = nn::silu(tape.stem);
    tape.block_in.clear();
    tape.block_mid.clear();
    for (std::size_t k = 0; k < enc_conv1_.size(); ++k) {
        tape.block_in.push_back(h);
        tape.block_mid.push_back(enc_conv1_[k].forward(p, h));
        const Tensor branch = enc_conv2_[k].forward(p, nn::silu(tape.block_mid.back()));
        for (std::size_t i = 0; i < h.size(); ++i) h.data[i] += branch.data[i];
    }
    tape.trunk = h;
    tape.pooled.assign(h.c, 0.0);
    for (std::size_t k = 0; k < h.c; ++k) {
        const auto ch = h.channel(k);
        tape.pooled[k] = std::accumulate(ch.begin(), ch.end(), 0.0) / static_cast<double>(h.plane());
    }
    const std::size_t D = config_.latent_dim();
    tape.hidden.assign(D, 0.0);
    enc_fc1_.forward(p, tape.pooled, tape.hidden);
    std::vector<double> act(D);
    nn::silu(tape.hidden, act);
    Latent z(D);
    enc_fc2_.forward(p, act, z);
    return z;
}

Latent Codec::encode_pair(const Tensor& target, const Tensor& degraded, const WeightMap& w, EncoderTape& tape) const {
    if (target.c != config_.target_channels || degraded.c != config_.in_channels)
        throw DimensionError("encode_pair: channel counts differ from codec configuration");
    if (target.h != degraded.h || target.w != degraded.w) throw DimensionError("encode_pair: target and input differ in shape");
    Tensor cat(target.c + degraded.c, target.h, target.w);
    const Tensor a = w.apply(target);
    const Tensor b = w.apply(degraded);
    std::copy(a.data.begin(), a.data.end(), cat.data.begin());
    std::copy(b.data.begin(), b.data.end(), cat.data.begin() + static_cast<long>(a.size()));
    tape.pair = true;
    return encode(nn::pixel_unshuffle(cat, config_.unshuffle), 0, tape);
}

Latent Codec::encode_condition(const Tensor& degraded, const WeightMap& w, EncoderTape& tape) const {
    if (degraded.c != config_.in_channels) throw DimensionError("encode_condition: channel count differs from codec configuration");
    tape.pair = false;
    const std::size_t r2 = config_.unshuffle * config_.unshuffle;
    return encode(nn::pixel_unshuffle(w.apply(degraded), config_.unshuffle), config_.target_channels * r2, tape);
}

Latent Codec::encode_pair(const Tensor& target, const Tensor& degraded, const WeightMap& w) const {
    EncoderTape tape;
    return encode_pair(target, degraded, w, tape);
}

Latent Codec::encode_condition(const Tensor& degraded, const WeightMap& w) const {
    EncoderTape tape;
    return encode_condition(degraded, w, tape);
}

void Codec::encode_backward(const EncoderTape& tape, const Latent& d_latent, nn::Grads grads) const {
    const auto p = nn::Params(params_.values());
    const std::size_t D = config_.latent_dim();
    std::vector<double> act(D), d_act(D), d_hidden(D);
    nn::silu(tape.hidden, act);
    enc_fc2_.backward(p, act, d_latent, grads, d_act);
    nn::silu_backward(tape.hidden, d_act, d_hidden);
    std::vector<double> d_pooled(tape.pooled.size());
    enc_fc1_.backward(p, tape.pooled, d_hidden, grads, d_pooled);
    Tensor dh(tape.trunk.c, tape.trunk.h, tape.trunk.w);
    const double inv = 1.0 / static_cast<double>(dh.plane());
    for (std::size_t k = 0; k < dh.c; ++k)
        for (double& v : dh.channel(k)) v = d_pooled[k] * inv;
    for (std::size_t k = enc_conv1_.size(); k-- > 0;) {
        const Tensor ds = enc_conv2_[k].backward(p, nn::silu(tape.block_mid[k]), dh, grads, true);
        const Tensor dmid = nn::silu_backward(tape.block_mid[k], ds);
        const Tensor dx = enc_conv1_[k].backward(p, tape.block_in[k], dmid, grads, true);
        for (std::size_t i = 0; i < dh.size(); ++i) dh.data[i] += dx.data[i];
    }
    const Tensor dstem = nn::silu_backward(tape.stem, dh);
    const std::size_t offset = tape.pair ? 0 : config_.target_channels * config_.unshuffle * config_.unshuffle;
    enc_stem_.backward(p, tape.input, dstem, grads, false, offset);
}

ModulatedBlock ModulatedBlock::create(nn::ParamStore& store, const std::string& name, std::size_t width,
                                     std::size_t latent_dim, Rng& rng) {
    ModulatedBlock b;
    b.conv1 = nn::Conv2d::create(store, name + ".conv1", width, width, 3, rng, 1.4);
    b.modulation = nn::Linear::create(store, name + ".mod", latent_dim, 2 * width, rng, 0.2);
    b.conv2 = nn::Conv2d::create(store, name + ".conv2", width, width, 3, rng, 0.2);
    return b;
}

Tensor modulated_block_forward(const ModulatedBlock& b, nn::Params p, const Tensor& h, const Latent& z,
                               ModulatedBlockTape& tape) {
    const std::size_t w = h.c;
    tape.in = h;
    tape.conv1 = b.conv1.forward(p, h);
    tape.scale_shift.assign(2 * w, 0.0);
    b.modulation.forward(p, z, tape.scale_shift);
    tape.modulated = tape.conv1;
    for (std::size_t k = 0; k < w; ++k) {
        const double g = 1.0 + tape.scale_shift[k];
        const double s = tape.scale_shift[w + k];
        for (double& v : tape.modulated.channel(k)) v = v * g + s;
    }
    tape.activated = nn::silu(tape.modulated);
    Tensor out = b.conv2.forward(p, tape.activated);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += h.data[i];
    return out;
}

Tensor modulated_block_backward(const ModulatedBlock& b, nn::Params p, const ModulatedBlockTape& tape,
                                const Tensor& d_out, const Latent& z, nn::Grads grads, std::span<double> d_latent) {
    const std::size_t w = tape.in.c;
    const Tensor ds = b.conv2.backward(p, tape.activated, d_out, grads, true);
    Tensor dm = nn::silu_backward(tape.modulated, ds);
    std::vector<double> d_ss(2 * w, 0.0);
    for (std::size_t k = 0; k < w; ++k) {
        const auto dmk = dm.channel(k);
        const auto ak = tape.conv1.channel(k);
        double dg = 0.0, dsh = 0.0;
        for (std::size_t i = 0; i < dmk.size(); ++i) {
            dg += dmk[i] * ak[i];
            dsh += dmk[i];
        }
        d_ss[k] = dg;
        d_ss[w + k] = dsh;
        const double g = 1.0 + tape.scale_shift[k];
        for (double& v : dmk) v *= g;
    }
    std::vector<double> dz(z.size());
    b.modulation.backward(p, z, d_ss, grads, dz);
    for (std::size_t i = 0; i < dz.size(); ++i) d_latent[i] += dz[i];
    Tensor dh = b.conv1.backward(p, tape.in, dm, grads, true);
    for (std::size_t i = 0; i < dh.size(); ++i) dh.data[i] += d_out.data[i];
    return dh;
}

void Codec::check_decoder_input(const Latent& z, const Tensor& degraded) const {
    if (z.size() != config_.latent_dim())
        throw DimensionError("decode: latent length " + std::to_string(z.size()) + ", expected " +
                             std::to_string(config_.latent_dim()));
    if (degraded.c != config_.in_channels) throw DimensionError("decode: channel count differs from codec configuration");
    const std::size_t m = std::size_t{2} << (config_.widths.size() - 1);
    if (degraded.h % m != 0 || degraded.w % m != 0)
        throw DimensionError("decode: image sides must be multiples of " + std::to_string(m));
}

Tensor Codec::decode(const Latent& z, const Tensor& degraded, DecoderTape& tape) const {
    check_decoder_input(z, degraded);
    const auto p = nn::Params(params_.values());
    const std::size_t L = config_.widths.size();
    tape.stem_in = nn::pixel_unshuffle(degraded, 2);
    Tensor h = dec_stem_.forward(p, tape.stem_in);
    std::vector<Tensor> skips(L - 1);
    tape.down.assign(L, {});
    tape.down_in.assign(L - 1, {});
    for (std::size_t l = 0; l < L; ++l) {
        tape.down[l].resize(dec_down_[l].size());
        for (std::size_t b = 0; b < dec_down_[l].size(); ++b) h = modulated_block_forward(dec_down_[l][b], p, h, z, tape.down[l][b]);
        if (l + 1 < L) {
            skips[l] = h;
            tape.down_in[l] = nn::pixel_unshuffle(h, 2);
            h = dec_downsample_[l].forward(p, tape.down_in[l]);
        }
    }
    tape.up.assign(L - 1, {});
    tape.up_in.assign(L - 1, {});
    for (std::size_t l = L - 1; l-- > 0;) {
        tape.up_in[l] = h;
        h = nn::pixel_shuffle(dec_upsample_[l].forward(p, h), 2);
        for (std::size_t i = 0; i < h.size(); ++i) h.data[i] += skips[l].data[i];
        tape.up[l].resize(dec_up_[l].size());
        for (std::size_t b = 0; b < dec_up_[l].size(); ++b) h = modulated_block_forward(dec_up_[l][b], p, h, z, tape.up[l][b]);
    }
    tape.head_in = h;
    Tensor out = nn::pixel_shuffle(dec_head_.forward(p, nn::silu(h)), 2);
    tape.degraded = degraded;
    tape.skip_mix.assign(config_.in_channels, 0.0);
    dec_skip_.forward(p, z, tape.skip_mix);
    for (std::size_t c = 0; c < config_.in_channels; ++c) {
        const auto src = degraded.channel(c);
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += tape.skip_mix[c] * src[i];
    }
    return out;
}

Tensor Codec::decode(const Latent& z, const Tensor& degraded) const {
    DecoderTape tape;
    return decode(z, degraded, tape);
}

void Codec::decode_backward(const Latent& z, const DecoderTape& tape, const Tensor& d_out, nn::Grads grads,
                            std::span<double> d_latent) const {
    const auto p = nn::Params(params_.values());
    const std::size_t L = config_.widths.size();
    std::fill(d_latent.begin(), d_latent.end(), 0.0);
    std::vector<double> d_mix(config_.in_channels, 0.0), dz(z.size());
    for (std::size_t c = 0; c < config_.in_channels; ++c) {
        const auto src = tape.degraded.channel(c);
        for (std::size_t i = 0; i < src.size(); ++i) d_mix[c] += d_out.data[i] * src[i];
    }
    dec_skip_.backward(p, z, d_mix, grads, dz);
    for (std::size_t i = 0; i < dz.size(); ++i) d_latent[i] += dz[i];
    Tensor dh = nn::silu_backward(
        tape.head_in, dec_head_.backward(p, nn::silu(tape.head_in), nn::pixel_unshuffle(d_out, 2), grads, true));
    std::vector<Tensor> d_skip(L - 1);
    for (std::size_t l = 0; l + 1 < L; ++l) {
        for (std::size_t b = dec_up_[l].size(); b-- > 0;)
            dh = modulated_block_backward(dec_up_[l][b], p, tape.up[l][b], dh, z, grads, d_latent);
        d_skip[l] = dh;
        dh = dec_upsample_[l].backward(p, tape.up_in[l], nn::pixel_unshuffle(dh, 2), grads, true);
    }
    for (std::size_t l = L; l-- > 0;) {
        if (l + 1 < L) {
            Tensor g = nn::pixel_shuffle(dec_downsample_[l].backward(p, tape.down_in[l], dh, grads, true), 2);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += d_skip[l].data[i];
            dh = std::move(g);
        }
        for (std::size_t b = dec_down_[l].size(); b-- > 0;)
            dh = modulated_block_backward(dec_down_[l][b], p, tape.down[l][b], dh, z, grads, d_latent);
    }
    dec_stem_.backward(p, tape.stem_in, dh, grads, false);
}

namespace {

void check_single(const Tensor& target, const Tensor& output) {
    if (!target.same_shape(output)) throw DimensionError("loss_res: shape mismatch");
    if (target.c != 1) throw DimensionError("loss_res: single-channel maps expected");
}

}  // namespace

double loss_res(const Tensor& target, const Tensor& output, double lambda) {
    check_single(target, output);
    double l1 = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) l1 += std::abs(output.data[i] - target.data[i]);
    l1 /= static_cast<double>(target.size());
    if (lambda == 0.0) return l1;
    return l1 + lambda * (1.0 - ssim(output.channel_image(0), target.channel_image(0)));
}

double loss_res_with_gradient(const Tensor& target, const Tensor& output, double lambda, Tensor& d_output) {
    check_single(target, output);
    const double n = static_cast<double>(target.size());
    d_output = Tensor(output.c, output.h, output.w);
    double l1 = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double d = output.data[i] - target.data[i];
        l1 += std::abs(d);
        d_output.data[i] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / n;
    }
    l1 /= n;
    if (lambda == 0.0) return l1;
    Image grad;
    const double s = ssim_with_gradient(output.channel_image(0), target.channel_image(0), {}, grad);
    for (std::size_t i = 0; i < grad.size(); ++i) d_output.data[i] -= lambda * grad.data[i];
    return l1 + lambda * (1.0 - s);
}

}  // namespace spectract
