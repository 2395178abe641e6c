#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "spectract/geometry.hpp"
#include "spectract/image.hpp"

namespace spectract {

// PSNR in dB. Identical inputs have no finite value: `identical` is set and
// `db` is +infinity.
struct Psnr {
    double db = 0.0;
    bool identical = false;
};

Psnr psnr(const Image& x, const Image& ref, double peak = 1.0);

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double peak = 1.0;
};

// Gaussian-windowed SSIM averaged over all positions where the window fits.
double ssim(const Image& x, const Image& ref, const SsimParams& params = {});

// Same value; also writes d(mean SSIM)/dx into grad_x.
double ssim_with_gradient(const Image& x, const Image& ref, const SsimParams& params, Image& grad_x);

// PSNR/SSIM samples per energy bin for one method.
struct MetricReport {
    std::string method;
    std::vector<std::vector<double>> psnr_db;  // [bin][sample]; +inf marks identical
    std::vector<std::vector<double>> ssim;

    void add(std::size_t bin, double psnr_value, double ssim_value);
    std::size_t bins() const { return psnr_db.size(); }

    double mean_psnr(std::size_t bin) const;
    double median_psnr(std::size_t bin) const;
    double mean_ssim(std::size_t bin) const;
    double median_ssim(std::size_t bin) const;
    // Pooled over every bin and sample.
    double median_psnr() const;
    double median_ssim() const;

    // One row per (bin, sample): method,bin,sample,psnr_db,ssim
    std::string to_csv() const;
    nlohmann::json to_json() const;
};

// Per-bin rows, one "PSNR/SSIM" column per method (mean values).
std::string format_metric_table(const std::vector<MetricReport>& reports);

double median(std::vector<double> values);

struct TvOptions {
    double lambda = 0.0;
    int iterations = 100;
    double epsilon = 1e-4;
    // Starting image; zero when empty.
    Image initial;
};

struct TvResult {
    Image image;
    // Objective before the first step, then after every accepted step.
    std::vector<double> objective;
};

// Smoothed-TV regularized least squares,
//   0.5 * ||A x - y||^2 + lambda * sum sqrt(|grad x|^2 + eps^2),
// by gradient descent with backtracking line search.
TvResult tv_reconstruct(const Image& sinogram, const SystemMatrix& A, const TvOptions& options);

// Objective value used by tv_reconstruct (exposed for tests).
double tv_objective(const Image& x, const Image& sinogram, const SystemMatrix& A, double lambda, double epsilon);

}  // namespace spectract
