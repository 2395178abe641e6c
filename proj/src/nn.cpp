#include "spectract/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Core>

namespace spectract::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using ConstMapRow = Eigen::Map<const RowMat>;
using OuterStride = Eigen::OuterStride<>;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// (x.c * k * k) x (h * w) patch matrix for a same-padded stride-1 kernel.
void im2col(const Tensor& x, std::size_t k, std::vector<double>& cols) {
    const std::size_t pad = k / 2;
    const std::size_t hw = x.plane();
    cols.assign(x.c * k * k * hw, 0.0);
    for (std::size_t ci = 0; ci < x.c; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* row = cols.data() + ((ci * k + ky) * k + kx) * hw;
                for (std::size_t y = 0; y < x.h; ++y) {
                    const long sy = static_cast<long>(y + ky) - static_cast<long>(pad);
                    if (sy < 0 || sy >= static_cast<long>(x.h)) continue;
                    const double* src = x.data.data() + (ci * x.h + static_cast<std::size_t>(sy)) * x.w;
                    double* dst = row + y * x.w;
                    const long shift = static_cast<long>(kx) - static_cast<long>(pad);
                    const std::size_t x0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                    const std::size_t x1 = shift > 0 ? x.w - static_cast<std::size_t>(shift) : x.w;
                    for (std::size_t xx = x0; xx < x1; ++xx) dst[xx] = src[static_cast<long>(xx) + shift];
                }
            }
}

void col2im(const std::vector<double>& cols, std::size_t k, Tensor& dx) {
    const std::size_t pad = k / 2;
    const std::size_t hw = dx.plane();
    for (std::size_t ci = 0; ci < dx.c; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const double* row = cols.data() + ((ci * k + ky) * k + kx) * hw;
                for (std::size_t y = 0; y < dx.h; ++y) {
                    const long sy = static_cast<long>(y + ky) - static_cast<long>(pad);
                    if (sy < 0 || sy >= static_cast<long>(dx.h)) continue;
                    double* dst = dx.data.data() + (ci * dx.h + static_cast<std::size_t>(sy)) * dx.w;
                    const double* src = row + y * dx.w;
                    const long shift = static_cast<long>(kx) - static_cast<long>(pad);
                    const std::size_t x0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                    const std::size_t x1 = shift > 0 ? dx.w - static_cast<std::size_t>(shift) : dx.w;
                    for (std::size_t xx = x0; xx < x1; ++xx) dst[static_cast<long>(xx) + shift] += src[xx];
                }
            }
}

}  // namespace

Tensor Tensor::from_images(const std::vector<Image>& channels) {
    if (channels.empty()) throw DimensionError("no channels");
    Tensor t(channels.size(), channels.front().rows, channels.front().cols);
    for (std::size_t k = 0; k < channels.size(); ++k) {
        if (!channels[k].same_shape(channels.front())) throw DimensionError("channel images differ in shape");
        std::copy(channels[k].data.begin(), channels[k].data.end(), t.data.begin() + static_cast<long>(k * t.plane()));
    }
    return t;
}

Image Tensor::channel_image(std::size_t k) const {
    if (k >= c) throw DimensionError("channel index out of range");
    Image img(h, w);
    std::copy_n(data.begin() + static_cast<long>(k * plane()), plane(), img.data.begin());
    return img;
}

Tensor pixel_unshuffle(const Tensor& x, std::size_t r) {
    if (r == 0 || x.h % r != 0 || x.w % r != 0) throw DimensionError("pixel_unshuffle: sides not divisible by factor");
    Tensor out(x.c * r * r, x.h / r, x.w / r);
    for (std::size_t ci = 0; ci < x.c; ++ci)
        for (std::size_t dy = 0; dy < r; ++dy)
            for (std::size_t dx = 0; dx < r; ++dx) {
                const std::size_t co = (ci * r + dy) * r + dx;
                for (std::size_t y = 0; y < out.h; ++y)
                    for (std::size_t xx = 0; xx < out.w; ++xx) out.at(co, y, xx) = x.at(ci, y * r + dy, xx * r + dx);
            }
    return out;
}

Tensor pixel_shuffle(const Tensor& x, std::size_t r) {
    if (r == 0 || x.c % (r * r) != 0) throw DimensionError("pixel_shuffle: channels not divisible by factor^2");
    Tensor out(x.c / (r * r), x.h * r, x.w * r);
    for (std::size_t ci = 0; ci < out.c; ++ci)
        for (std::size_t dy = 0; dy < r; ++dy)
            for (std::size_t dx = 0; dx < r; ++dx) {
                const std::size_t cs = (ci * r + dy) * r + dx;
                for (std::size_t y = 0; y < x.h; ++y)
                    for (std::size_t xx = 0; xx < x.w; ++xx) out.at(ci, y * r + dy, xx * r + dx) = x.at(cs, y, xx);
            }
    return out;
}

void silu(std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
}

void silu_backward(std::span<const double> x, std::span<const double> dy, std::span<double> dx) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = sigmoid(x[i]);
        dx[i] = dy[i] * s * (1.0 + x[i] * (1.0 - s));
    }
}

Tensor silu(const Tensor& x) {
    Tensor y(x.c, x.h, x.w);
    silu(x.data, y.data);
    return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& dy) {
    Tensor dx(x.c, x.h, x.w);
    silu_backward(x.data, dy.data, dx.data);
    return dx;
}

std::size_t ParamStore::add(const std::string& name, const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    Block b{name, shape, values_.size(), n};
    blocks_.push_back(b);
    values_.resize(values_.size() + n, 0.0);
    return b.offset;
}

const ParamStore::Block& ParamStore::block(const std::string& name) const {
    for (const auto& b : blocks_)
        if (b.name == name) return b;
    throw ConfigError("no parameter block named '" + name + "'");
}

nlohmann::json ParamStore::layout() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& b : blocks_) j.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", b.offset}});
    return j;
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                      double gain) {
    Linear l;
    l.in = in;
    l.out = out;
    l.weight = store.add(name + ".weight", {out, in});
    l.bias = store.add(name + ".bias", {out});
    std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(in)));
    auto& v = store.values();
    for (std::size_t i = 0; i < in * out; ++i) v[l.weight + i] = dist(rng);
    return l;
}

void Linear::forward(Params p, std::span<const double> x, std::span<double> y) const {
    if (x.size() != in || y.size() != out) throw DimensionError("linear: size mismatch");
    ConstMapRow W(p.data() + weight, static_cast<long>(out), static_cast<long>(in));
    Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<long>(in));
    Eigen::Map<const Eigen::VectorXd> b(p.data() + bias, static_cast<long>(out));
    Eigen::Map<Eigen::VectorXd> yv(y.data(), static_cast<long>(out));
    yv.noalias() = W * xv + b;
}

void Linear::backward(Params p, std::span<const double> x, std::span<const double> dy, Grads g,
                      std::span<double> dx) const {
    Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<long>(in));
    Eigen::Map<const Eigen::VectorXd> dyv(dy.data(), static_cast<long>(out));
    if (!g.empty()) {
        MapRow gW(g.data() + weight, static_cast<long>(out), static_cast<long>(in));
        Eigen::Map<Eigen::VectorXd> gb(g.data() + bias, static_cast<long>(out));
        gW.noalias() += dyv * xv.transpose();
        gb += dyv;
    }
    if (!dx.empty()) {
        ConstMapRow W(p.data() + weight, static_cast<long>(out), static_cast<long>(in));
        Eigen::Map<Eigen::VectorXd> dxv(dx.data(), static_cast<long>(in));
        dxv.noalias() = W.transpose() * dyv;
    }
}

Conv2d Conv2d::create(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                      Rng& rng, double gain) {
    if (k % 2 == 0) throw ConfigError("conv kernel must be odd");
    Conv2d c;
    c.cin = cin;
    c.cout = cout;
    c.k = k;
    c.weight = store.add(name + ".weight", {cout, cin, k, k});
    c.bias = store.add(name + ".bias", {cout});
    const double fan_in = static_cast<double>(cin * k * k);
    std::normal_distribution<double> dist(0.0, gain / std::sqrt(fan_in));
    auto& v = store.values();
    for (std::size_t i = 0; i < cout * cin * k * k; ++i) v[c.weight + i] = dist(rng);
    return c;
}

Tensor Conv2d::forward(Params p, const Tensor& x, std::size_t in_offset) const {
    if (in_offset + x.c > cin) throw DimensionError("conv: input channel range exceeds layer");
    const std::size_t kk = k * k;
    const std::size_t hw = x.plane();
    Tensor y(cout, x.h, x.w);
    Eigen::Map<const RowMat, 0, OuterStride> W(p.data() + weight + in_offset * kk, static_cast<long>(cout),
                                               static_cast<long>(x.c * kk), OuterStride(static_cast<long>(cin * kk)));
    MapRow Y(y.data.data(), static_cast<long>(cout), static_cast<long>(hw));
    if (k == 1) {
        ConstMapRow X(x.data.data(), static_cast<long>(x.c), static_cast<long>(hw));
        Y.noalias() = W * X;
    } else {
        thread_local std::vector<double> cols;
        im2col(x, k, cols);
        ConstMapRow X(cols.data(), static_cast<long>(x.c * kk), static_cast<long>(hw));
        Y.noalias() = W * X;
    }
    Eigen::Map<const Eigen::VectorXd> b(p.data() + bias, static_cast<long>(cout));
    Y.colwise() += b;
    return y;
}

Tensor Conv2d::backward(Params p, const Tensor& x, const Tensor& dy, Grads g, bool need_dx,
                        std::size_t in_offset) const {
    const std::size_t kk = k * k;
    const std::size_t hw = x.plane();
    ConstMapRow dY(dy.data.data(), static_cast<long>(cout), static_cast<long>(hw));
    thread_local std::vector<double> cols;
    const double* xcols = x.data.data();
    if (k != 1) {
        im2col(x, k, cols);
        xcols = cols.data();
    }
    ConstMapRow X(xcols, static_cast<long>(x.c * kk), static_cast<long>(hw));
    if (!g.empty()) {
        Eigen::Map<RowMat, 0, OuterStride> gW(g.data() + weight + in_offset * kk, static_cast<long>(cout),
                                              static_cast<long>(x.c * kk), OuterStride(static_cast<long>(cin * kk)));
        gW.noalias() += dY * X.transpose();
        Eigen::Map<Eigen::VectorXd> gb(g.data() + bias, static_cast<long>(cout));
        gb += dY.rowwise().sum();
    }
    Tensor dx;
    if (need_dx) {
        Eigen::Map<const RowMat, 0, OuterStride> W(p.data() + weight + in_offset * kk, static_cast<long>(cout),
                                                   static_cast<long>(x.c * kk),
                                                   OuterStride(static_cast<long>(cin * kk)));
        dx = Tensor(x.c, x.h, x.w);
        if (k == 1) {
            MapRow dX(dx.data.data(), static_cast<long>(x.c), static_cast<long>(hw));
            dX.noalias() = W.transpose() * dY;
        } else {
            std::vector<double> dcols(x.c * kk * hw);
            MapRow dC(dcols.data(), static_cast<long>(x.c * kk), static_cast<long>(hw));
            dC.noalias() = W.transpose() * dY;
            col2im(dcols, k, dx);
        }
    }
    return dx;
}

void Adam::step(std::vector<double>& values, std::span<const double> grads) {
    if (m.size() != values.size()) {
        m.assign(values.size(), 0.0);
        v.assign(values.size(), 0.0);
        step_count = 0;
    }
    ++step_count;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < values.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        values[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
    }
}

void Sgd::step(std::vector<double>& values, std::span<const double> grads) const {
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * grads[i];
}

}  // namespace spectract::nn
