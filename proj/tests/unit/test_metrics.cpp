#include <doctest.h>

#include <cmath>
#include <random>

#include "spectract/metrics.hpp"
#include "spectract/rng.hpp"
#include "test_helpers.hpp"

using namespace spectract;

namespace {

Image random_image(std::size_t r, std::size_t c, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Image img(r, c);
    for (double& v : img.data) v = u(rng);
    return img;
}

FanBeamGeometry small_fan(std::size_t views, double width = 300.0) {
    FanBeamGeometry g;
    g.source_to_object_mm = 250.0;
    g.source_to_detector_mm = 500.0;
    g.n_detectors = 64;
    g.detector_width_mm = width;
    g.n_views = views;
    return g;
}

}  // namespace

TEST_CASE("PSNR reference values") {
    Image ref(10, 10, 0.5);
    Image x = ref;
    for (double& v : x.data) v += 0.1;  // MSE 0.01
    CHECK(psnr(x, ref, 1.0).db == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(psnr(x, ref, 2.0).db == doctest::Approx(20.0 + 20.0 * std::log10(2.0)).epsilon(1e-12));
    const auto same = psnr(ref, ref, 1.0);
    CHECK(same.identical);
    CHECK(std::isinf(same.db));
    CHECK_THROWS_AS(psnr(Image(2, 2), Image(2, 3)), DimensionError);
    CHECK_THROWS_AS(psnr(ref, ref, 0.0), DomainError);
}

TEST_CASE("SSIM of an image with itself is one") {
    const Image x = random_image(32, 32, 1);
    CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    const Image flat(16, 16, 0.3);
    CHECK(ssim(flat, flat) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("SSIM is symmetric, bounded, and negative for anti-correlated content") {
    const Image x = random_image(24, 24, 2);
    const Image y = random_image(24, 24, 3);
    CHECK(ssim(x, y) == doctest::Approx(ssim(y, x)).epsilon(1e-12));
    CHECK(ssim(x, y) < 1.0);
    CHECK(ssim(x, y) > -1.0);
    Image neg = x;
    for (double& v : neg.data) v = 1.0 - v;
    CHECK(ssim(neg, x) < 0.0);
    CHECK_THROWS_AS(ssim(Image(8, 8), Image(8, 8)), DimensionError);
}

TEST_CASE("SSIM gradient matches central differences") {
    const Image ref = random_image(16, 16, 4);
    Image x = random_image(16, 16, 5);
    Image grad;
    ssim_with_gradient(x, ref, {}, grad);
    double scale = 0.0;
    for (double g : grad.data) scale = std::max(scale, std::abs(g));
    const double h = 1e-6;
    for (std::size_t i : {0u, 17u, 100u, 135u, 255u}) {
        Image p = x, m = x;
        p.data[i] += h;
        m.data[i] -= h;
        const double fd = (ssim(p, ref) - ssim(m, ref)) / (2.0 * h);
        CHECK(std::abs(grad.data[i] - fd) <= 1e-6 * scale);
    }
}

TEST_CASE("metric report aggregates per bin and pooled") {
    MetricReport r;
    r.method = "fbp";
    r.add(0, 30.0, 0.8);
    r.add(0, 32.0, 0.9);
    r.add(1, 20.0, 0.5);
    CHECK(r.bins() == 2);
    CHECK(r.mean_psnr(0) == doctest::Approx(31.0));
    CHECK(r.median_psnr(0) == doctest::Approx(31.0));
    CHECK(r.median_psnr() == doctest::Approx(30.0));
    CHECK(r.median_ssim() == doctest::Approx(0.8));
    CHECK(r.to_csv().find("fbp,1,0,") != std::string::npos);
    const auto table = format_metric_table({r});
    CHECK(table.find("fbp") != std::string::npos);
    CHECK(median({3.0, 1.0, 2.0, 10.0}) == doctest::Approx(2.5));
}

TEST_CASE("TV objective never increases") {
    const ImageGrid grid{32, 32, 4.0, {}};
    const SystemMatrix A(grid, small_fan(48));
    const Image truth = spectract::testing::disk_image(grid, 40.0, 0.02);
    Image y = A.forward(truth);
    Rng rng(9);
    std::normal_distribution<double> n(0.0, 0.05);
    for (double& v : y.data) v += n(rng);
    for (double lambda : {0.0, 0.5, 5.0}) {
        TvOptions opt;
        opt.lambda = lambda;
        opt.iterations = 40;
        const auto res = tv_reconstruct(y, A, opt);
        REQUIRE(res.objective.size() >= 2);
        for (std::size_t k = 1; k < res.objective.size(); ++k) CHECK(res.objective[k] <= res.objective[k - 1]);
        CHECK(res.objective.back() ==
              doctest::Approx(tv_objective(res.image, y, A, lambda, opt.epsilon)).epsilon(1e-12));
    }
}

TEST_CASE("TV suppresses noise relative to FBP on a flat disk") {
    const ImageGrid grid{48, 48, 4.0, {}};
    const auto geom = small_fan(96, 420.0);
    const SystemMatrix A(grid, geom);
    const Image truth = spectract::testing::disk_image(grid, 60.0, 0.02);
    Image y = A.forward(truth);
    Rng rng(10);
    std::normal_distribution<double> n(0.0, 0.03);
    for (double& v : y.data) v += n(rng);
    const Image fbp = fbp_reconstruct(y, grid, geom);
    TvOptions opt;
    opt.lambda = 1.0;
    opt.iterations = 150;
    opt.initial = fbp;
    const auto tv = tv_reconstruct(y, A, opt);
    auto interior_std = [&](const Image& img) {
        double s = 0.0, s2 = 0.0;
        int count = 0;
        for (std::size_t r = 20; r < 28; ++r)
            for (std::size_t c = 20; c < 28; ++c) {
                s += img(r, c);
                s2 += img(r, c) * img(r, c);
                ++count;
            }
        const double m = s / count;
        return std::sqrt(s2 / count - m * m);
    };
    CHECK(interior_std(tv.image) < 0.5 * interior_std(fbp));
    CHECK(psnr(tv.image, truth, 0.02).db > psnr(fbp, truth, 0.02).db);
}
