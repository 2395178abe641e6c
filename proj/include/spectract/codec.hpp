#pragma once

// Latent codec: a prior encoder that compresses (target, degraded) pairs or
// degraded-only inputs into a 4C-long latent, and a U-shaped decoder whose
// residual blocks are scaled and shifted per channel by that latent.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectract/diffusion.hpp"
#include "spectract/image.hpp"
#include "spectract/nn.hpp"

namespace spectract {

// Per-pixel multiplicative input weights, shared by every channel.
struct WeightMap {
    Image weights;

    static WeightMap constant(std::size_t rows, std::size_t cols, double value);
    // Constant chosen so the 99th-percentile value of the samples maps to 1.
    static WeightMap from_percentile(const std::vector<Image>& samples, double percentile = 0.99);

    void validate() const;
    double scalar() const;  // first weight; all equal for constant maps
    nn::Tensor apply(const nn::Tensor& x) const;
};

struct CodecConfig {
    std::size_t in_channels = 1;      // degraded-input channels
    std::size_t target_channels = 1;  // ground-truth channels fed to the pair encoder
    std::size_t latent_channels = 16;  // latent length is 4x this
    std::size_t unshuffle = 4;
    std::size_t encoder_width = 32;
    std::size_t encoder_blocks = 2;
    std::vector<std::size_t> widths{8, 16, 24, 32};
    std::vector<std::size_t> down_blocks{1, 1, 1, 1};  // per level on the way down (last = bottleneck)
    std::vector<std::size_t> up_blocks{1, 1, 1};       // per level on the way up
    double ssim_lambda = 0.2;

    std::size_t latent_dim() const { return 4 * latent_channels; }
    // Image sides must be multiples of this.
    std::size_t side_multiple() const;
    void validate() const;

    // Full-size layout: C = 64, r = 8, four levels with [6, 5, 5, 4] blocks.
    static CodecConfig reference(std::size_t in_channels);
    // Desk-scale layout: C = 16, r = 4.
    static CodecConfig toy(std::size_t in_channels);

    bool operator==(const CodecConfig&) const = default;
};
void to_json(nlohmann::json& j, const CodecConfig& c);
void from_json(const nlohmann::json& j, CodecConfig& c);

// out = h + conv2(silu(conv1(h) * (1 + scale) + shift)), (scale, shift) = modulation(latent)
struct ModulatedBlock {
    nn::Conv2d conv1;
    nn::Conv2d conv2;
    nn::Linear modulation;

    static ModulatedBlock create(nn::ParamStore& store, const std::string& name, std::size_t width,
                                 std::size_t latent_dim, Rng& rng);
};

struct ModulatedBlockTape {
    nn::Tensor in;
    nn::Tensor conv1;
    nn::Tensor modulated;
    nn::Tensor activated;
    std::vector<double> scale_shift;
};

nn::Tensor modulated_block_forward(const ModulatedBlock& b, nn::Params p, const nn::Tensor& h, const Latent& z,
                                   ModulatedBlockTape& tape);
// Returns d h; parameter gradients accumulate into grads and latent gradients into d_latent.
nn::Tensor modulated_block_backward(const ModulatedBlock& b, nn::Params p, const ModulatedBlockTape& tape,
                                    const nn::Tensor& d_out, const Latent& z, nn::Grads grads,
                                    std::span<double> d_latent);

class Codec {
public:
    struct EncoderTape {
        bool pair = false;
        nn::Tensor input;  // weighted, unshuffled
        nn::Tensor stem;   // pre-activation
        std::vector<nn::Tensor> block_in;
        std::vector<nn::Tensor> block_mid;  // pre-activation inside each block
        nn::Tensor trunk;
        std::vector<double> pooled;
        std::vector<double> hidden;  // pre-activation
    };

    using BlockTape = ModulatedBlockTape;

    struct DecoderTape {
        nn::Tensor stem_in;
        std::vector<std::vector<BlockTape>> down;  // [level][block]
        std::vector<nn::Tensor> down_in;           // unshuffled input of each down projection
        std::vector<nn::Tensor> up_in;             // input of each up projection
        std::vector<std::vector<BlockTape>> up;
        nn::Tensor head_in;  // pre-activation
        nn::Tensor degraded;
        std::vector<double> skip_mix;  // per input channel
    };

    static Codec create(const CodecConfig& config, std::uint64_t seed);

    Latent encode_pair(const nn::Tensor& target, const nn::Tensor& degraded, const WeightMap& w) const;
    Latent encode_condition(const nn::Tensor& degraded, const WeightMap& w) const;
    nn::Tensor decode(const Latent& z, const nn::Tensor& degraded) const;

    Latent encode_pair(const nn::Tensor& target, const nn::Tensor& degraded, const WeightMap& w,
                       EncoderTape& tape) const;
    Latent encode_condition(const nn::Tensor& degraded, const WeightMap& w, EncoderTape& tape) const;
    nn::Tensor decode(const Latent& z, const nn::Tensor& degraded, DecoderTape& tape) const;

    // Parameter gradients accumulate into grads; d_latent is overwritten.
    void decode_backward(const Latent& z, const DecoderTape& tape, const nn::Tensor& d_out, nn::Grads grads,
                         std::span<double> d_latent) const;
    void encode_backward(const EncoderTape& tape, const Latent& d_latent, nn::Grads grads) const;

    const CodecConfig& config() const { return config_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

private:
    Latent encode(const nn::Tensor& unshuffled, std::size_t in_offset, EncoderTape& tape) const;
    void check_decoder_input(const Latent& z, const nn::Tensor& degraded) const;

    CodecConfig config_;
    nn::ParamStore params_;
    // Encoder
    nn::Conv2d enc_stem_;
    std::vector<nn::Conv2d> enc_conv1_;
    std::vector<nn::Conv2d> enc_conv2_;
    nn::Linear enc_fc1_;
    nn::Linear enc_fc2_;
    // Decoder
    nn::Conv2d dec_stem_;
    std::vector<std::vector<ModulatedBlock>> dec_down_;
    std::vector<nn::Conv2d> dec_downsample_;
    std::vector<nn::Conv2d> dec_upsample_;
    std::vector<std::vector<ModulatedBlock>> dec_up_;
    nn::Conv2d dec_head_;
    // Output adds sum_c mix_c * degraded_c with mix = bias + weight * latent;
    // the bias starts on the first channel.
    nn::Linear dec_skip_;
};

// L1 + lambda (1 - SSIM) between single-channel maps of equal shape.
double loss_res(const nn::Tensor& target, const nn::Tensor& output, double lambda);
// Same value; writes d loss / d output.
double loss_res_with_gradient(const nn::Tensor& target, const nn::Tensor& output, double lambda, nn::Tensor& d_output);

}  // namespace spectract
