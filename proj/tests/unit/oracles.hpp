#pragma once

// Closed-form references for the latent diffusion tests.

#include <cmath>
#include <cstddef>
#include <vector>

#include "spectract/diffusion.hpp"
#include "spectract/rng.hpp"

namespace spectract::testing {

// Prior N(mu0, s^2 I). For z_t = sqrt(ab) z0 + sqrt(1 - ab) e the posterior
// mean of e given z_t is sqrt(1 - ab) (z_t - sqrt(ab) mu0) / (ab s^2 + 1 - ab).
inline DenoiserFn gaussian_noise_oracle(double mu0, double s, const NoiseSchedule& schedule) {
    return [=](const Latent& z, std::size_t t, const Latent&) {
        const double ab = schedule.alpha_bar[t - 1];
        const double k = std::sqrt(1.0 - ab) / (ab * s * s + 1.0 - ab);
        Latent e(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) e[i] = k * (z[i] - std::sqrt(ab) * mu0);
        return e;
    };
}

// Mean of the deterministic sampler output for a start z_T with mean zero:
// each update is affine, so the mean follows m <- a m + b exactly.
inline double oracle_sampler_mean(double mu0, double s, const NoiseSchedule& schedule) {
    double m = 0.0;
    for (std::size_t t = schedule.steps(); t >= 1; --t) {
        const auto c = step_coefficients(t, schedule);
        const double ab = schedule.alpha_bar[t - 1];
        const double k = std::sqrt(1.0 - ab) / (ab * s * s + 1.0 - ab);
        m = (c.keep - c.eps_scale * k) * m + c.eps_scale * k * std::sqrt(ab) * mu0;
    }
    return m;
}

// Variance of the sampler output for z_T ~ N(0, I): v <- a^2 v (+ sigma2_t
// for t > 1 when posterior noise is drawn).
inline double oracle_sampler_variance(double s, const NoiseSchedule& schedule, bool stochastic) {
    double v = 1.0;
    for (std::size_t t = schedule.steps(); t >= 1; --t) {
        const auto c = step_coefficients(t, schedule);
        const double ab = schedule.alpha_bar[t - 1];
        const double a = c.keep - c.eps_scale * std::sqrt(1.0 - ab) / (ab * s * s + 1.0 - ab);
        v = a * a * v + (stochastic && t > 1 ? schedule.sigma2[t - 1] : 0.0);
    }
    return v;
}

// z_t by t single steps z <- sqrt(alpha) z + sqrt(beta) e.
inline double one_step_chain(double z0, std::size_t t, const NoiseSchedule& schedule, Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    double z = z0;
    for (std::size_t i = 0; i < t; ++i) z = std::sqrt(schedule.alpha[i]) * z + std::sqrt(schedule.beta[i]) * n(rng);
    return z;
}

struct Moments {
    double mean = 0.0;
    double var = 0.0;
};

inline Moments moments(const std::vector<double>& v) {
    Moments m;
    for (double x : v) m.mean += x;
    m.mean /= double(v.size());
    for (double x : v) m.var += (x - m.mean) * (x - m.mean);
    m.var /= double(v.size() - 1);
    return m;
}

}  // namespace spectract::testing
