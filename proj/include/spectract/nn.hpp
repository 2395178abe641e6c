#pragma once

// Small dense-network toolkit with hand-written backward passes. All layers
// read their weights from a flat parameter vector and accumulate gradients
// into a buffer of the same layout, so one sample's gradient can be computed
// independently of every other sample.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectract/errors.hpp"
#include "spectract/image.hpp"
#include "spectract/rng.hpp"

namespace spectract::nn {

// Channel-major (c, h, w) feature map.
struct Tensor {
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::size_t channels, std::size_t height, std::size_t width, double fill = 0.0)
        : c(channels), h(height), w(width), data(channels * height * width, fill) {}

    std::size_t plane() const { return h * w; }
    std::size_t size() const { return data.size(); }
    double& at(std::size_t k, std::size_t y, std::size_t x) { return data[(k * h + y) * w + x]; }
    double at(std::size_t k, std::size_t y, std::size_t x) const { return data[(k * h + y) * w + x]; }
    std::span<double> channel(std::size_t k) { return {data.data() + k * plane(), plane()}; }
    std::span<const double> channel(std::size_t k) const { return {data.data() + k * plane(), plane()}; }
    bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
    bool operator==(const Tensor&) const = default;

    static Tensor from_images(const std::vector<Image>& channels);
    Image channel_image(std::size_t k) const;
};

// Space-to-channel: (c, h, w) -> (c*r*r, h/r, w/r). Output channel
// ci*r*r + dy*r + dx holds input pixel (y*r + dy, x*r + dx).
Tensor pixel_unshuffle(const Tensor& x, std::size_t r);
// Exact inverse of pixel_unshuffle.
Tensor pixel_shuffle(const Tensor& x, std::size_t r);

Tensor silu(const Tensor& x);
// d silu(x) given upstream dy.
Tensor silu_backward(const Tensor& x, const Tensor& dy);
void silu(std::span<const double> x, std::span<double> y);
void silu_backward(std::span<const double> x, std::span<const double> dy, std::span<double> dx);

// Named blocks in one flat vector of parameters.
class ParamStore {
public:
    struct Block {
        std::string name;
        std::vector<std::size_t> shape;
        std::size_t offset = 0;
        std::size_t size = 0;
        bool operator==(const Block&) const = default;
    };

    // Appends a zero-initialized block and returns its offset.
    std::size_t add(const std::string& name, const std::vector<std::size_t>& shape);

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }
    const std::vector<Block>& blocks() const { return blocks_; }
    std::size_t size() const { return values_.size(); }
    const Block& block(const std::string& name) const;

    nlohmann::json layout() const;
    bool operator==(const ParamStore&) const = default;

private:
    std::vector<Block> blocks_;
    std::vector<double> values_;
};

using Params = std::span<const double>;
using Grads = std::span<double>;

struct Linear {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t weight = 0;  // offset of (out, in) row-major matrix
    std::size_t bias = 0;

    // Normal init with std = gain / sqrt(in); zero bias.
    static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                         double gain = 1.0);

    void forward(Params p, std::span<const double> x, std::span<double> y) const;
    // Accumulates into g (skipped when empty); writes dx when non-empty.
    void backward(Params p, std::span<const double> x, std::span<const double> dy, Grads g,
                  std::span<double> dx) const;
};

// Stride-1 "same" convolution with odd square kernel.
struct Conv2d {
    std::size_t cin = 0;
    std::size_t cout = 0;
    std::size_t k = 3;
    std::size_t weight = 0;  // (cout, cin, k, k)
    std::size_t bias = 0;

    static Conv2d create(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout,
                         std::size_t k, Rng& rng, double gain = 1.0);

    // x holds `x.c` channels that meet input channels [in_offset, in_offset + x.c).
    Tensor forward(Params p, const Tensor& x, std::size_t in_offset = 0) const;
    // Accumulates parameter gradients into g (skipped when empty) and returns
    // dx when need_dx is set.
    Tensor backward(Params p, const Tensor& x, const Tensor& dy, Grads g, bool need_dx,
                    std::size_t in_offset = 0) const;
};

// Adaptive-moment optimizer over one flat parameter vector.
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<double> m;
    std::vector<double> v;
    long step_count = 0;

    void step(std::vector<double>& values, std::span<const double> grads);
};

// Plain gradient descent, for comparison runs.
struct Sgd {
    double lr = 1e-2;
    void step(std::vector<double>& values, std::span<const double> grads) const;
};

}  // namespace spectract::nn
