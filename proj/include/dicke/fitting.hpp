// fitting.hpp: least-squares machinery for Gaussian-sum peak fits, a generic
// small-problem fitter, and weighted straight-line fits.

#pragma once

#include <algorithm>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include <unsupported/Eigen/LevenbergMarquardt>

#include "dicke/spectra.hpp"

namespace dicke {

struct FitResult {
    RVector params;
    RVector sigma;       // 1 sigma, residual-scaled covariance
    double residual_norm = 0;
    bool converged = false;
    int iterations = 0;
};

struct Peak {
    double center_khz = 0;
    double height = 0;
    double width_khz = 0; // Gaussian sigma
    double center_err_khz = 0;
};

using PeakList = std::vector<Peak>;

struct LsqOptions {
    double ftol = 1e-10; // relative cost decrease
    double xtol = 1e-12; // relative step norm
    int max_evaluations = 4000;
};

namespace detail {

struct CallbackFunctor : Eigen::DenseFunctor<double> {
    std::function<RVector(const RVector&)> residual;
    std::function<RMatrix(const RVector&)> jacobian;

    CallbackFunctor(int inputs, int values) : Eigen::DenseFunctor<double>(inputs, values) {}

    int operator()(const InputType& x, ValueType& fvec) const {
        fvec = residual(x);
        return 0;
    }
    int df(const InputType& x, JacobianType& fjac) const {
        fjac = jacobian(x);
        return 0;
    }
};

inline RMatrix numeric_jacobian(const std::function<RVector(const RVector&)>& f, const RVector& x) {
    const RVector f0 = f(x);
    RMatrix J(f0.size(), x.size());
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        const double h = 1e-6 * std::max(std::abs(x[k]), 1e-3);
        RVector xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        J.col(k) = (f(xp) - f(xm)) / (2 * h);
    }
    return J;
}

// 1 sigma from s^2 (J^T J)^-1 with s^2 = |r|^2 / (N - P).
inline RVector covariance_sigma(const RMatrix& J, const RVector& r) {
    const auto n = J.rows(), p = J.cols();
    RVector sig = RVector::Constant(p, std::numeric_limits<double>::infinity());
    if (n <= p) return sig;
    const double s2 = r.squaredNorm() / static_cast<double>(n - p);
    Eigen::CompleteOrthogonalDecomposition<RMatrix> cod(J.transpose() * J);
    if (cod.rank() < p) return sig;
    const RMatrix cov = s2 * cod.pseudoInverse();
    for (Eigen::Index k = 0; k < p; ++k) sig[k] = std::sqrt(std::max(cov(k, k), 0.0));
    return sig;
}

} // namespace detail

// Minimizes |residual(p)|^2 with damped Gauss-Newton (Levenberg-Marquardt).
// Without a jacobian callback a central-difference Jacobian is used.
inline FitResult least_squares(std::function<RVector(const RVector&)> residual, const RVector& p0,
                               std::function<RMatrix(const RVector&)> jacobian = nullptr,
                               const LsqOptions& opt = {}) {
    const RVector r0 = residual(p0);
    require(r0.size() >= p0.size(), "least_squares: fewer residuals than parameters");
    if (!jacobian) jacobian = [residual](const RVector& x) { return detail::numeric_jacobian(residual, x); };

    detail::CallbackFunctor functor(static_cast<int>(p0.size()), static_cast<int>(r0.size()));
    functor.residual = residual;
    functor.jacobian = jacobian;
    Eigen::LevenbergMarquardt<detail::CallbackFunctor> lm(functor);
    lm.setFtol(opt.ftol);
    lm.setXtol(opt.xtol);
    lm.setMaxfev(opt.max_evaluations);

    RVector p = p0;
    const auto status = lm.minimize(p);
    using namespace Eigen::LevenbergMarquardtSpace;
    FitResult out;
    out.params = p;
    const RVector r = residual(p);
    out.residual_norm = r.norm();
    out.iterations = static_cast<int>(lm.iterations());
    out.converged = status != ImproperInputParameters && status != TooManyFunctionEvaluation &&
                    status != UserAsked && p.allFinite();
    out.sigma = detail::covariance_sigma(jacobian(p), r);
    return out;
}

inline double gaussian(double x, double center, double height, double width) {
    const double d = (x - center) / width;
    return height * std::exp(-0.5 * d * d);
}

// Least-squares fit of a sum of Gaussians (center, height, width per peak) to the
// samples in [first, last) of the spectrum. Parameters are packed as
// [c0, h0, w0, c1, h1, w1, ...].
inline FitResult fit_gaussians(const Spectrum& s, const PeakList& initial, std::size_t first = 0,
                               std::size_t last = std::numeric_limits<std::size_t>::max()) {
    require(!initial.empty(), "fit_gaussians: need at least one initial peak");
    last = std::min(last, s.size());
    require(last > first, "fit_gaussians: empty fit window");
    const auto n = static_cast<Eigen::Index>(last - first);
    const auto np = static_cast<Eigen::Index>(3 * initial.size());
    require(n > np, "fit_gaussians: not enough samples for the number of peaks");

    RVector x(n), y(n);
    for (Eigen::Index k = 0; k < n; ++k) {
        x[k] = s.freq_khz[first + static_cast<std::size_t>(k)];
        y[k] = s.psd[first + static_cast<std::size_t>(k)];
    }
    RVector p0(np);
    for (std::size_t k = 0; k < initial.size(); ++k) {
        p0[3 * k] = initial[k].center_khz;
        p0[3 * k + 1] = initial[k].height;
        p0[3 * k + 2] = initial[k].width_khz > 0 ? initial[k].width_khz : std::max(s.linewidth_khz, s.step_khz());
    }

    auto residual = [&](const RVector& p) {
        RVector r = -y;
        for (Eigen::Index k = 0; k < np; k += 3)
            for (Eigen::Index i = 0; i < n; ++i) r[i] += gaussian(x[i], p[k], p[k + 1], p[k + 2]);
        return r;
    };
    auto jacobian = [&](const RVector& p) {
        RMatrix J(n, np);
        for (Eigen::Index k = 0; k < np; k += 3) {
            const double c = p[k], h = p[k + 1], w = p[k + 2];
            for (Eigen::Index i = 0; i < n; ++i) {
                const double d = (x[i] - c) / w;
                const double e = std::exp(-0.5 * d * d);
                J(i, k) = h * e * d / w;
                J(i, k + 1) = e;
                J(i, k + 2) = h * e * d * d / w;
            }
        }
        return J;
    };
    FitResult fr = least_squares(residual, p0, jacobian);
    for (Eigen::Index k = 2; k < np; k += 3) fr.params[k] = std::abs(fr.params[k]);
    return fr;
}

inline PeakList peaks_from_fit(const FitResult& fr) {
    PeakList out;
    for (Eigen::Index k = 0; k + 2 < fr.params.size(); k += 3)
        out.push_back({fr.params[k], fr.params[k + 1], fr.params[k + 2], fr.sigma[k]});
    return out;
}

// Robust white-noise level of a sampled spectrum: the median absolute first
// difference, scaled to a Gaussian sigma. Smooth features contribute little as
// long as the grid oversamples the linewidth.
inline double estimate_noise(const Spectrum& s) {
    if (s.size() < 3) return 0.0;
    std::vector<double> d(s.size() - 1);
    for (std::size_t k = 1; k < s.size(); ++k) d[k - 1] = std::abs(s.psd[k] - s.psd[k - 1]);
    auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    return 1.4826 * *mid / std::sqrt(2.0);
}

struct LinePoint {
    double x = 0, y = 0;
    double sigma = 0; // <= 0 means unknown
};

struct LineFit {
    double slope = 0, intercept = 0;
    double slope_err = 0, intercept_err = 0;
    double covariance = 0; // cov(slope, intercept)
    double chi2 = 0;
    int dof = 0;
};

// Weighted straight-line fit y = slope x + intercept in closed form.
// With known sigmas the covariance is (X^T W X)^-1, inflated by chi2/dof when
// that exceeds one. With unknown sigmas unit weights are used and the
// covariance is scaled by chi2/dof; for exactly two points (dof = 0) there is
// no residual information and the unscaled unit-weight covariance is returned.
inline LineFit fit_line(const std::vector<LinePoint>& pts) {
    require(pts.size() >= 2, "fit_line: need at least two points");
    const bool weighted = std::all_of(pts.begin(), pts.end(), [](const LinePoint& p) { return p.sigma > 0; });
    double S = 0, Sx = 0, Sy = 0, Sxx = 0, Sxy = 0;
    for (const auto& p : pts) {
        const double w = weighted ? 1.0 / (p.sigma * p.sigma) : 1.0;
        S += w;
        Sx += w * p.x;
        Sy += w * p.y;
        Sxx += w * p.x * p.x;
        Sxy += w * p.x * p.y;
    }
    const double det = S * Sxx - Sx * Sx;
    if (!(std::abs(det) > 1e-12 * std::max(1.0, S * Sxx)))
        throw ValidationError("fit_line: degenerate abscissae");

    LineFit f;
    f.slope = (S * Sxy - Sx * Sy) / det;
    f.intercept = (Sxx * Sy - Sx * Sxy) / det;
    f.dof = static_cast<int>(pts.size()) - 2;
    for (const auto& p : pts) {
        const double r = (p.y - f.slope * p.x - f.intercept) / (weighted ? p.sigma : 1.0);
        f.chi2 += r * r;
    }
    double scale = 1.0;
    if (f.dof > 0) {
        const double red = f.chi2 / f.dof;
        scale = weighted ? std::max(1.0, red) : red;
    }
    f.slope_err = std::sqrt(scale * S / det);
    f.intercept_err = std::sqrt(scale * Sxx / det);
    f.covariance = -scale * Sx / det;
    return f;
}

} // namespace dicke
