#include <gtest/gtest.h>

#include <random>

#include "dicke/fitting.hpp"

using namespace dicke;

namespace {

Spectrum two_peaks(double noise, std::uint64_t seed) {
    Spectrum s{make_grid(-40, 40, 0.25), {}, 2.0};
    s.psd.resize(s.size());
    for (std::size_t k = 0; k < s.size(); ++k)
        s.psd[k] = gaussian(s.freq_khz[k], -8.0, 1.0, 2.0) + gaussian(s.freq_khz[k], 9.5, 0.6, 2.5);
    add_noise(s, noise, seed);
    return s;
}

} // namespace

TEST(LeastSquares, RecoversExponential) {
    const RVector x = RVector::LinSpaced(30, 0, 3);
    const RVector y = (2.5 * (-1.3 * x.array()).exp()).matrix();
    auto res = [&](const RVector& p) { return RVector((p[0] * (-p[1] * x.array()).exp()).matrix() - y); };
    const FitResult r = least_squares(res, (RVector(2) << 1.0, 0.5).finished());
    EXPECT_TRUE(r.converged);
    EXPECT_NEAR(r.params[0], 2.5, 1e-8);
    EXPECT_NEAR(r.params[1], 1.3, 1e-8);
    EXPECT_LT(r.residual_norm, 1e-8);
}

TEST(Gaussians, NoiselessTwoPeakFit) {
    const Spectrum s = two_peaks(0.0, 0);
    const FitResult fr = fit_gaussians(s, {{-7, 0.8, 1.5, 0}, {10, 0.5, 2, 0}});
    const PeakList p = peaks_from_fit(fr);
    ASSERT_EQ(p.size(), 2u);
    EXPECT_NEAR(p[0].center_khz, -8.0, 1e-7);
    EXPECT_NEAR(p[0].height, 1.0, 1e-7);
    EXPECT_NEAR(p[1].width_khz, 2.5, 1e-7);
    EXPECT_NEAR(p[1].center_khz, 9.5, 1e-7);
}

TEST(Gaussians, ErrorBarsCoverTruth) {
    // About 68% of seeds should land within 1 sigma of the true center.
    int within = 0;
    const int seeds = 200;
    for (int seed = 0; seed < seeds; ++seed) {
        const Spectrum s = two_peaks(0.05, static_cast<std::uint64_t>(seed));
        const PeakList p = peaks_from_fit(fit_gaussians(s, {{-8, 1, 2, 0}, {9.5, 0.6, 2.5, 0}}));
        within += std::abs(p[0].center_khz + 8.0) < p[0].center_err_khz;
    }
    EXPECT_GT(within, 0.58 * seeds);
    EXPECT_LT(within, 0.78 * seeds);
}

TEST(Gaussians, RejectsBadWindows) {
    const Spectrum s = two_peaks(0.0, 0);
    EXPECT_THROW(fit_gaussians(s, {}), ValidationError);
    EXPECT_THROW(fit_gaussians(s, {{0, 1, 1, 0}}, 10, 10), ValidationError);
    EXPECT_THROW(fit_gaussians(s, {{0, 1, 1, 0}}, 0, 3), ValidationError);
}

TEST(Noise, EstimateMatchesInjectedSigma) {
    Spectrum s = two_peaks(0.0, 0);
    EXPECT_LT(estimate_noise(s), 0.01);
    add_noise(s, 0.1, 3);
    EXPECT_NEAR(estimate_noise(s), 0.1, 0.015);
}

TEST(Line, ExactUnweighted) {
    const LineFit f = fit_line({{0, 1, 0}, {1, 3, 0}, {2, 5, 0}});
    EXPECT_NEAR(f.slope, 2.0, 1e-14);
    EXPECT_NEAR(f.intercept, 1.0, 1e-14);
    EXPECT_EQ(f.dof, 1);
    EXPECT_NEAR(f.slope_err, 0.0, 1e-7);
}

TEST(Line, WeightedCovarianceClosedForm) {
    // Points on an exact line with sigma = 1: cov = (X^T X)^-1.
    const LineFit f = fit_line({{0, 0, 1}, {1, 1, 1}, {2, 2, 1}, {3, 3, 1}});
    const double S = 4, Sx = 6, Sxx = 14, det = S * Sxx - Sx * Sx;
    EXPECT_NEAR(f.slope_err, std::sqrt(S / det), 1e-14);
    EXPECT_NEAR(f.intercept_err, std::sqrt(Sxx / det), 1e-14);
    EXPECT_NEAR(f.covariance, -Sx / det, 1e-14);
}

TEST(Line, TwoPointsAndDegenerate) {
    const LineFit f = fit_line({{0, 0, 0}, {2, 4, 0}});
    EXPECT_EQ(f.dof, 0);
    EXPECT_NEAR(f.slope, 2.0, 1e-14);
    EXPECT_TRUE(std::isfinite(f.slope_err));
    EXPECT_THROW(fit_line({{1, 0, 0}}), ValidationError);
    EXPECT_THROW(fit_line({{1, 0, 0}, {1, 2, 0}}), ValidationError);
}

TEST(Line, PullDistribution) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0.0, 0.2);
    double chi = 0;
    const int trials = 400;
    for (int t = 0; t < trials; ++t) {
        std::vector<LinePoint> pts;
        for (int k = 0; k < 8; ++k) pts.push_back({double(k), -0.7 * k + 3 + n(rng), 0.2});
        const LineFit f = fit_line(pts);
        const double z = (f.slope + 0.7) / f.slope_err;
        chi += z * z;
    }
    // Inflation by chi2/dof only ever widens the bars, so the mean pull^2 is <= 1.
    EXPECT_GT(chi / trials, 0.6);
    EXPECT_LT(chi / trials, 1.15);
}
