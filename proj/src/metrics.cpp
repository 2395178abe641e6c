#include "spectract/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace spectract {

Psnr psnr(const Image& x, const Image& ref, double peak) {
    require_same_shape(x, ref, "psnr");
    if (!(peak > 0.0)) throw DomainError("psnr peak must be positive");
    double mse = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x.data[i] - ref.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(x.size());
    if (mse == 0.0) return {std::numeric_limits<double>::infinity(), true};
    return {10.0 * std::log10(peak * peak / mse), false};
}

namespace {

std::vector<double> gaussian_taps(int window, double sigma) {
    std::vector<double> g(static_cast<std::size_t>(window));
    const int half = window / 2;
    double total = 0.0;
    for (int i = 0; i < window; ++i) {
        const double d = i - half;
        g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        total += g[static_cast<std::size_t>(i)];
    }
    for (double& v : g) v /= total;
    return g;
}

// Separable "valid" correlation with the 1D taps along rows and columns.
Image filter_valid(const Image& in, const std::vector<double>& g) {
    const std::size_t w = g.size();
    const std::size_t out_r = in.rows - w + 1;
    const std::size_t out_c = in.cols - w + 1;
    Image tmp(in.rows, out_c);
    for (std::size_t r = 0; r < in.rows; ++r)
        for (std::size_t c = 0; c < out_c; ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < w; ++k) acc += g[k] * in(r, c + k);
            tmp(r, c) = acc;
        }
    Image out(out_r, out_c);
    for (std::size_t r = 0; r < out_r; ++r)
        for (std::size_t c = 0; c < out_c; ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < w; ++k) acc += g[k] * tmp(r + k, c);
            out(r, c) = acc;
        }
    return out;
}

// Adjoint of filter_valid: scatters a valid-size map back to full size.
Image filter_valid_adjoint(const Image& in, const std::vector<double>& g, std::size_t rows, std::size_t cols) {
    const std::size_t w = g.size();
    Image tmp(rows, in.cols);
    for (std::size_t r = 0; r < in.rows; ++r)
        for (std::size_t c = 0; c < in.cols; ++c)
            for (std::size_t k = 0; k < w; ++k) tmp(r + k, c) += g[k] * in(r, c);
    Image out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < in.cols; ++c)
            for (std::size_t k = 0; k < w; ++k) out(r, c + k) += g[k] * tmp(r, c);
    return out;
}

Image product(const Image& a, const Image& b) {
    Image out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    return out;
}

double ssim_impl(const Image& x, const Image& ref, const SsimParams& p, Image* grad_x) {
    require_same_shape(x, ref, "ssim");
    if (p.window < 1 || p.window % 2 == 0) throw ConfigError("ssim window must be odd");
    const auto w = static_cast<std::size_t>(p.window);
    if (w > x.rows || w > x.cols) throw DimensionError("ssim window larger than image");
    const auto g = gaussian_taps(p.window, p.sigma);
    const double c1 = (p.k1 * p.peak) * (p.k1 * p.peak);
    const double c2 = (p.k2 * p.peak) * (p.k2 * p.peak);

    const Image mx = filter_valid(x, g);
    const Image mr = filter_valid(ref, g);
    const Image exx = filter_valid(product(x, x), g);
    const Image err = filter_valid(product(ref, ref), g);
    const Image exr = filter_valid(product(x, ref), g);

    const std::size_t n = mx.size();
    Image d_mx(mx.rows, mx.cols);
    Image d_exx(mx.rows, mx.cols);
    Image d_exr(mx.rows, mx.cols);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double ux = mx.data[i];
        const double ur = mr.data[i];
        const double vx = exx.data[i] - ux * ux;
        const double vr = err.data[i] - ur * ur;
        const double cxr = exr.data[i] - ux * ur;
        const double a1 = 2.0 * ux * ur + c1;
        const double a2 = 2.0 * cxr + c2;
        const double b1 = ux * ux + ur * ur + c1;
        const double b2 = vx + vr + c2;
        const double s = (a1 * a2) / (b1 * b2);
        total += s;
        if (grad_x) {
            const double inv = 1.0 / (b1 * b2);
            d_mx.data[i] = (2.0 * ur * a2 - 2.0 * ur * a1) * inv - s * (2.0 * ux / b1 - 2.0 * ux / b2);
            d_exx.data[i] = -s / b2;
            d_exr.data[i] = 2.0 * a1 * inv;
        }
    }
    const double mean = total / static_cast<double>(n);
    if (grad_x) {
        const double scale = 1.0 / static_cast<double>(n);
        const Image gm = filter_valid_adjoint(d_mx, g, x.rows, x.cols);
        const Image ge = filter_valid_adjoint(d_exx, g, x.rows, x.cols);
        const Image gr = filter_valid_adjoint(d_exr, g, x.rows, x.cols);
        *grad_x = Image(x.rows, x.cols);
        for (std::size_t i = 0; i < x.size(); ++i)
            grad_x->data[i] = scale * (gm.data[i] + 2.0 * x.data[i] * ge.data[i] + ref.data[i] * gr.data[i]);
    }
    return mean;
}

}  // namespace

double ssim(const Image& x, const Image& ref, const SsimParams& params) { return ssim_impl(x, ref, params, nullptr); }

double ssim_with_gradient(const Image& x, const Image& ref, const SsimParams& params, Image& grad_x) {
    return ssim_impl(x, ref, params, &grad_x);
}

double median(std::vector<double> values) {
    if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
    const std::size_t mid = values.size() / 2;
    std::nth_element(values.begin(), values.begin() + static_cast<long>(mid), values.end());
    const double hi = values[mid];
    if (values.size() % 2 == 1) return hi;
    const double lo = *std::max_element(values.begin(), values.begin() + static_cast<long>(mid));
    return 0.5 * (lo + hi);
}

void MetricReport::add(std::size_t bin, double psnr_value, double ssim_value) {
    if (bin >= psnr_db.size()) {
        psnr_db.resize(bin + 1);
        ssim.resize(bin + 1);
    }
    psnr_db[bin].push_back(psnr_value);
    ssim[bin].push_back(ssim_value);
}

namespace {
double mean_of(const std::vector<double>& v) {
    return v.empty() ? std::numeric_limits<double>::quiet_NaN()
                     : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}
std::vector<double> pooled(const std::vector<std::vector<double>>& per_bin) {
    std::vector<double> all;
    for (const auto& b : per_bin) all.insert(all.end(), b.begin(), b.end());
    return all;
}
}  // namespace

double MetricReport::mean_psnr(std::size_t bin) const { return mean_of(psnr_db.at(bin)); }
double MetricReport::median_psnr(std::size_t bin) const { return median(psnr_db.at(bin)); }
double MetricReport::mean_ssim(std::size_t bin) const { return mean_of(ssim.at(bin)); }
double MetricReport::median_ssim(std::size_t bin) const { return median(ssim.at(bin)); }
double MetricReport::median_psnr() const { return median(pooled(psnr_db)); }
double MetricReport::median_ssim() const { return median(pooled(ssim)); }

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os << "method,bin,sample,psnr_db,ssim\n" << std::setprecision(10);
    for (std::size_t b = 0; b < psnr_db.size(); ++b)
        for (std::size_t s = 0; s < psnr_db[b].size(); ++s) {
            os << method << ',' << b + 1 << ',' << s << ',';
            if (std::isinf(psnr_db[b][s]))
                os << "identical";
            else
                os << psnr_db[b][s];
            os << ',' << ssim[b][s] << '\n';
        }
    return os.str();
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json bins_json = nlohmann::json::array();
    for (std::size_t b = 0; b < psnr_db.size(); ++b) {
        nlohmann::json psnr_list = nlohmann::json::array();
        for (double v : psnr_db[b]) psnr_list.push_back(std::isinf(v) ? nlohmann::json("identical") : nlohmann::json(v));
        bins_json.push_back({{"bin", b + 1},
                             {"psnr_db", psnr_list},
                             {"ssim", ssim[b]},
                             {"mean_psnr_db", mean_psnr(b)},
                             {"median_psnr_db", median_psnr(b)},
                             {"mean_ssim", mean_ssim(b)},
                             {"median_ssim", median_ssim(b)}});
    }
    return {{"method", method},
            {"bins", bins_json},
            {"median_psnr_db", median_psnr()},
            {"median_ssim", median_ssim()}};
}

std::string format_metric_table(const std::vector<MetricReport>& reports) {
    std::ostringstream os;
    os << std::fixed;
    os << "bin";
    std::size_t bins = 0;
    for (const auto& r : reports) {
        os << '\t' << r.method;
        bins = std::max(bins, r.bins());
    }
    os << '\n';
    for (std::size_t b = 0; b < bins; ++b) {
        os << "bin" << b + 1;
        for (const auto& r : reports) {
            os << '\t';
            if (b < r.bins())
                os << std::setprecision(2) << r.mean_psnr(b) << '/' << std::setprecision(4) << r.mean_ssim(b);
            else
                os << '-';
        }
        os << '\n';
    }
    return os.str();
}

namespace {

// Smoothed isotropic TV with forward differences; the last row/column has
// zero outward difference.
double tv_value_and_gradient(const Image& x, double eps, Image* grad) {
    const std::size_t R = x.rows;
    const std::size_t C = x.cols;
    if (grad) *grad = Image(R, C);
    double total = 0.0;
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) {
            const double gx = c + 1 < C ? x(r, c + 1) - x(r, c) : 0.0;
            const double gy = r + 1 < R ? x(r + 1, c) - x(r, c) : 0.0;
            const double mag = std::sqrt(gx * gx + gy * gy + eps * eps);
            total += mag;
            if (grad) {
                const double ux = gx / mag;
                const double uy = gy / mag;
                if (c + 1 < C) {
                    (*grad)(r, c + 1) += ux;
                    (*grad)(r, c) -= ux;
                }
                if (r + 1 < R) {
                    (*grad)(r + 1, c) += uy;
                    (*grad)(r, c) -= uy;
                }
            }
        }
    return total;
}

double data_term(const Image& x, const Image& y, const SystemMatrix& A, Image* residual) {
    Image ax = A.forward(x);
    double total = 0.0;
    for (std::size_t i = 0; i < ax.size(); ++i) {
        ax.data[i] -= y.data[i];
        total += ax.data[i] * ax.data[i];
    }
    if (residual) *residual = std::move(ax);
    return 0.5 * total;
}

}  // namespace

double tv_objective(const Image& x, const Image& sinogram, const SystemMatrix& A, double lambda, double epsilon) {
    return data_term(x, sinogram, A, nullptr) + lambda * tv_value_and_gradient(x, epsilon, nullptr);
}

TvResult tv_reconstruct(const Image& sinogram, const SystemMatrix& A, const TvOptions& options) {
    if (!(options.lambda >= 0.0)) throw DomainError("TV weight must be non-negative");
    if (!(options.epsilon > 0.0)) throw DomainError("TV smoothing must be positive");
    const ImageGrid& grid = A.grid();
    if (sinogram.rows != A.geometry().n_views || sinogram.cols != A.geometry().n_detectors)
        throw DimensionError("sinogram does not match the system matrix");

    TvResult result;
    result.image = options.initial.size() ? options.initial : grid.blank();
    require_same_shape(result.image, grid.blank(), "tv initial image");
    Image& x = result.image;

    auto evaluate = [&](const Image& at, Image* gradient) {
        Image residual;
        Image tv_grad;
        const double f = data_term(at, sinogram, A, gradient ? &residual : nullptr) +
                         options.lambda * tv_value_and_gradient(at, options.epsilon, gradient ? &tv_grad : nullptr);
        if (gradient) {
            *gradient = A.adjoint(residual);
            for (std::size_t i = 0; i < gradient->size(); ++i) gradient->data[i] += options.lambda * tv_grad.data[i];
        }
        return f;
    };

    Image g;
    double f = evaluate(x, &g);
    result.objective.push_back(f);
    if (!std::isfinite(f)) throw TrainingError("TV objective is not finite", result.objective);

    // Initial step from the Rayleigh quotient of A^T A along the gradient.
    double step = 0.0;
    {
        const Image ag = A.forward(g);
        double num = 0.0;
        double den = 0.0;
        for (double v : g.data) num += v * v;
        for (double v : ag.data) den += v * v;
        step = den > 0.0 ? num / den : 1.0;
    }

    Image trial(x.rows, x.cols);
    for (int it = 0; it < options.iterations; ++it) {
        double gnorm2 = 0.0;
        for (double v : g.data) gnorm2 += v * v;
        if (gnorm2 == 0.0) break;
        step *= 2.0;
        double f_trial = 0.0;
        bool accepted = false;
        for (int tries = 0; tries < 60; ++tries) {
            for (std::size_t i = 0; i < x.size(); ++i) trial.data[i] = x.data[i] - step * g.data[i];
            f_trial = evaluate(trial, nullptr);
            if (std::isfinite(f_trial) && f_trial <= f - 0.5 * step * gnorm2) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // no sufficient decrease at machine precision: converged
        std::swap(x, trial);
        f = evaluate(x, &g);
        if (!std::isfinite(f)) throw TrainingError("TV objective diverged", result.objective);
        result.objective.push_back(f);
    }
    return result;
}

}  // namespace spectract
