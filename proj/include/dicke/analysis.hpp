// analysis.hpp: Zeeman-splitting scans, peak extraction, avoided-crossing gaps,
// the calibration pipeline (trap frequencies, Zeeman map, couplings), model
// comparison and the tune-out line fit.

#pragma once

#include <array>
#include <memory>
#include <mutex>
#include <numeric>
#include <thread>

#include "dicke/fitting.hpp"

namespace dicke {

// ---------------------------------------------------------------------------
// Spectrum synthesis for one parameter set

struct SpectrumConfig {
    ThermalState thermal;
    double eta_x = 0.1;
    double eta_y = 0.15;
    std::optional<double> eta_z;
    std::vector<double> grid = make_grid(-400.0, 400.0, 0.5); // kHz
    double linewidth_khz = 2.0;
    bool include_carrier = true;
};

inline TransitionTable model_transitions(const ModelParams& p, const SpectrumConfig& cfg) {
    const auto es = eigh(build_two_mode(p));
    const auto V = emission_operator(cfg.eta_x, cfg.eta_y, cfg.eta_z, p.F, p.n_max);
    TransitionOptions opt;
    opt.include_carrier = cfg.include_carrier;
    opt.omega_z = p.omega_z;
    return transitions(es, cfg.thermal, V, p.F, p.n_max, opt);
}

// build_two_mode -> eigh -> transitions -> render.
inline Spectrum synthesize(const ModelParams& p, const SpectrumConfig& cfg) {
    return render(model_transitions(p, cfg), cfg.grid, cfg.linewidth_khz);
}

// Runs f(0..n-1) on up to `threads` workers. Each index writes only its own
// output slot, so results do not depend on the thread count.
template <typename F>
void parallel_for(std::size_t n, int threads, F&& f) {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) f(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Delta scans

struct DeltaScan {
    std::vector<double> deltas;  // nominal Zeeman splitting of each point, rad/s, ascending
    std::vector<double> b_field; // offset field of each point, G
    std::vector<Spectrum> spectra;
    ModelParams params;          // generating template (delta is per point)
    double nominal_scale = 0;    // rad/s per G used to label the points

    std::size_t size() const { return deltas.size(); }
};

struct ScanOptions {
    // The Hamiltonian sees delta + delta_offset while the point is labeled by
    // delta; models stray real and fictitious fields.
    double delta_offset = 0;
    int threads = 1;
    PhysicalConstants constants;
};

inline DeltaScan scan_delta(const ModelParams& tmpl, std::vector<double> deltas, const SpectrumConfig& cfg,
                            const ScanOptions& opt = {}) {
    require(!deltas.empty(), "scan_delta: empty delta list");
    std::sort(deltas.begin(), deltas.end());
    require(std::adjacent_find(deltas.begin(), deltas.end()) == deltas.end(),
            "scan_delta: duplicate delta values");
    DeltaScan scan;
    scan.params = tmpl;
    scan.deltas = deltas;
    scan.nominal_scale = zeeman_splitting(1.0, opt.constants);
    require(scan.nominal_scale > 0, "scan_delta: g_F must be positive to label points by field");
    scan.spectra.resize(deltas.size());
    scan.b_field.resize(deltas.size());
    for (std::size_t k = 0; k < deltas.size(); ++k) scan.b_field[k] = deltas[k] / scan.nominal_scale;
    parallel_for(deltas.size(), opt.threads, [&](std::size_t k) {
        ModelParams p = tmpl;
        p.delta = std::max(0.0, deltas[k] + opt.delta_offset);
        scan.spectra[k] = synthesize(p, cfg);
    });
    return scan;
}

// ---------------------------------------------------------------------------
// Peak finding

struct PeakSearch {
    double min_height_fraction = 0.05; // of the largest PSD value in [f_lo, f_hi]
    double min_separation_khz = 5.0;
    double f_lo_khz = -std::numeric_limits<double>::infinity();
    double f_hi_khz = std::numeric_limits<double>::infinity();
    double min_height = 0.0;           // absolute floor, e.g. a multiple of the noise
};

namespace detail {

// Single-Gaussian refinement of a local maximum at index k. Returns nullopt if
// the fit wanders off.
inline std::optional<Peak> refine_peak(const Spectrum& s, std::size_t k) {
    const double sigma = std::max(s.linewidth_khz, s.step_khz());
    const double half = 2.5 * sigma;
    const double c0 = s.freq_khz[k];
    const auto lo = static_cast<std::size_t>(
        std::lower_bound(s.freq_khz.begin(), s.freq_khz.end(), c0 - half) - s.freq_khz.begin());
    const auto hi = static_cast<std::size_t>(
        std::upper_bound(s.freq_khz.begin(), s.freq_khz.end(), c0 + half) - s.freq_khz.begin());
    if (hi <= lo + 3) return std::nullopt;
    const FitResult fr = fit_gaussians(s, {{c0, s.psd[k], s.linewidth_khz, 0}}, lo, hi);
    if (!fr.converged) return std::nullopt;
    const Peak p = peaks_from_fit(fr).front();
    if (!(std::abs(p.center_khz - c0) <= sigma) || !(p.height > 0) || !(p.width_khz < 6 * sigma) ||
        !std::isfinite(p.center_err_khz))
        return std::nullopt;
    return p;
}

} // namespace detail

// Local maxima above the threshold, accepted greedily by height so that no two
// are closer than min_separation_khz, each refined by a local Gaussian fit.
// Peaks closer than the separation (or unresolved by the profile) come back as
// one. Output is sorted by center.
inline PeakList find_peaks(const Spectrum& s, const PeakSearch& q) {
    require(q.min_height_fraction > 0 && q.min_height_fraction <= 1, "find_peaks: fraction must be in (0, 1]");
    require(q.min_separation_khz > 0, "find_peaks: separation must be > 0");
    double top = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k)
        if (s.freq_khz[k] >= q.f_lo_khz && s.freq_khz[k] <= q.f_hi_khz) top = std::max(top, s.psd[k]);
    const double threshold = std::max(q.min_height_fraction * top, q.min_height);
    if (!(top > 0)) return {};

    std::vector<std::size_t> maxima;
    for (std::size_t k = 1; k + 1 < s.size(); ++k) {
        if (s.freq_khz[k] < q.f_lo_khz || s.freq_khz[k] > q.f_hi_khz) continue;
        if (s.psd[k] > s.psd[k - 1] && s.psd[k] >= s.psd[k + 1] && s.psd[k] >= threshold && s.psd[k] > 0)
            maxima.push_back(k);
    }
    std::stable_sort(maxima.begin(), maxima.end(),
                     [&](std::size_t a, std::size_t b) { return s.psd[a] > s.psd[b]; });

    PeakList out;
    std::vector<double> taken;
    for (std::size_t k : maxima) {
        const double f = s.freq_khz[k];
        if (std::any_of(taken.begin(), taken.end(),
                        [&](double t) { return std::abs(t - f) < q.min_separation_khz; }))
            continue;
        taken.push_back(f);
        if (auto p = detail::refine_peak(s, k))
            out.push_back(*p);
        else
            out.push_back({f, s.psd[k], s.linewidth_khz, s.step_khz()});
    }
    std::sort(out.begin(), out.end(), [](const Peak& a, const Peak& b) { return a.center_khz < b.center_khz; });
    return out;
}

inline PeakList find_peaks(const Spectrum& s, double min_height_fraction, double min_separation_khz) {
    PeakSearch q;
    q.min_height_fraction = min_height_fraction;
    q.min_separation_khz = min_separation_khz;
    return find_peaks(s, q);
}

struct FeatureSearch {
    double min_snr = 4.0;              // matched-filter peak over its own noise level
    double min_relative_height = 1e-4; // of the tallest non-carrier feature
    double carrier_guard_khz = 12.0;
};

// Convolution with a unit-area Gaussian of the spectrum's linewidth, plus the
// factor by which it scales white noise.
inline std::pair<Spectrum, double> matched_filter(const Spectrum& s) {
    Spectrum out = s;
    const double step = s.step_khz();
    if (s.size() < 3 || !(step > 0)) return {out, 1.0};
    const int half = static_cast<int>(std::ceil(4 * s.linewidth_khz / step));
    std::vector<double> w(static_cast<std::size_t>(2 * half + 1));
    for (int k = -half; k <= half; ++k) w[static_cast<std::size_t>(k + half)] = gaussian(k * step, 0, 1, s.linewidth_khz);
    const double sum = std::accumulate(w.begin(), w.end(), 0.0);
    double sum2 = 0;
    for (double& x : w) {
        x /= sum;
        sum2 += x * x;
    }
    const auto n = static_cast<long>(s.size());
    for (long i = 0; i < n; ++i) {
        double acc = 0;
        for (long k = -half; k <= half; ++k) {
            const long j = std::clamp(i + k, 0L, n - 1);
            acc += w[static_cast<std::size_t>(k + half)] * s.psd[static_cast<std::size_t>(j)];
        }
        out.psd[static_cast<std::size_t>(i)] = acc;
    }
    return {out, std::sqrt(sum2)};
}

// Tallest significant peak in [f_lo, f_hi] (kHz), or nullopt. Candidates are
// local maxima of the matched-filtered spectrum; the winner is refined by a
// Gaussian fit to the raw samples. Candidates within exclusion_khz of any
// entry of `avoid` (kHz) are skipped.
inline std::optional<Peak> locate_peak(const Spectrum& s, double f_lo_khz, double f_hi_khz,
                                       const FeatureSearch& fs = {}, const std::vector<double>& avoid = {},
                                       double exclusion_khz = 0) {
    const auto [sm, gain] = matched_filter(s);
    const double threshold = std::max(fs.min_snr * gain * estimate_noise(s),
                                      fs.min_relative_height * sideband_reference(sm, fs.carrier_guard_khz));
    std::optional<std::size_t> best;
    for (std::size_t k = 1; k + 1 < sm.size(); ++k) {
        const double f = sm.freq_khz[k];
        if (f < f_lo_khz || f > f_hi_khz) continue;
        if (!(sm.psd[k] > sm.psd[k - 1] && sm.psd[k] >= sm.psd[k + 1] && sm.psd[k] > threshold)) continue;
        if (std::any_of(avoid.begin(), avoid.end(), [&](double a) { return std::abs(f - a) < exclusion_khz; }))
            continue;
        if (!best || sm.psd[k] > sm.psd[*best]) best = k;
    }
    if (!best) return std::nullopt;
    if (auto p = detail::refine_peak(s, *best)) return p;
    return Peak{sm.freq_khz[*best], s.psd[*best], s.linewidth_khz, s.linewidth_khz};
}

// ---------------------------------------------------------------------------
// Avoided-crossing gap

struct BranchWindow {
    double delta_lo = 0, delta_hi = 0; // rad/s, which scan points to use
    double f_lo_khz = 0, f_hi_khz = 0; // spectral window holding both branches
    double min_height_fraction = 0.05;
    double min_separation_khz = 5.0;
};

struct GapResult {
    double delta_star = 0; // rad/s
    double gap = 0;        // rad/s
    std::vector<double> deltas, gaps;
};

// Vertex of the parabola through three points; nullopt if it opens downward
// or the points are degenerate.
inline std::optional<std::pair<double, double>> parabola_vertex(std::array<double, 3> x, std::array<double, 3> y) {
    const double d = (x[0] - x[1]) * (x[0] - x[2]) * (x[1] - x[2]);
    if (d == 0) return std::nullopt;
    const double a = (x[2] * (y[1] - y[0]) + x[1] * (y[0] - y[2]) + x[0] * (y[2] - y[1])) / d;
    const double b = (x[2] * x[2] * (y[0] - y[1]) + x[1] * x[1] * (y[2] - y[0]) + x[0] * x[0] * (y[1] - y[2])) / d;
    const double c = (x[1] * x[2] * (x[1] - x[2]) * y[0] + x[2] * x[0] * (x[2] - x[0]) * y[1] +
                      x[0] * x[1] * (x[0] - x[1]) * y[2]) / d;
    if (!(a > 0)) return std::nullopt;
    const double xv = -b / (2 * a);
    return std::make_pair(xv, c - b * b / (4 * a));
}

// For each scan point in the delta window, the distance between the two
// tallest peaks in the spectral window; the minimum over delta comes from a
// parabola through the three smallest samples.
inline GapResult min_gap(const DeltaScan& scan, const BranchWindow& w) {
    GapResult r;
    for (std::size_t k = 0; k < scan.size(); ++k) {
        if (scan.deltas[k] < w.delta_lo || scan.deltas[k] > w.delta_hi) continue;
        PeakSearch q;
        q.f_lo_khz = w.f_lo_khz;
        q.f_hi_khz = w.f_hi_khz;
        q.min_height_fraction = w.min_height_fraction;
        q.min_separation_khz = w.min_separation_khz;
        PeakList peaks = find_peaks(scan.spectra[k], q);
        if (peaks.size() < 2) continue;
        std::partial_sort(peaks.begin(), peaks.begin() + 2, peaks.end(),
                          [](const Peak& a, const Peak& b) { return a.height > b.height; });
        r.deltas.push_back(scan.deltas[k]);
        r.gaps.push_back(khz_to_rad(std::abs(peaks[0].center_khz - peaks[1].center_khz)));
    }
    if (r.gaps.size() < 3) throw FitError("min_gap: fewer than three scan points show both branches");

    std::vector<std::size_t> idx(r.gaps.size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    std::partial_sort(idx.begin(), idx.begin() + 3, idx.end(),
                      [&](std::size_t a, std::size_t b) { return r.gaps[a] < r.gaps[b]; });
    r.delta_star = r.deltas[idx[0]];
    r.gap = r.gaps[idx[0]];
    const auto v = parabola_vertex({r.deltas[idx[0]], r.deltas[idx[1]], r.deltas[idx[2]]},
                                   {r.gaps[idx[0]], r.gaps[idx[1]], r.gaps[idx[2]]});
    const auto [lo, hi] = std::minmax({r.deltas[idx[0]], r.deltas[idx[1]], r.deltas[idx[2]]});
    if (v && v->first >= lo && v->first <= hi && v->second > 0 && v->second <= r.gap) {
        r.delta_star = v->first;
        r.gap = v->second;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Calibration

// How observed peak positions are related to the bare parameters.
//   none        peaks sit at the bare values (omega_i, Delta, Omega_i)
//   simplified  eigenvalues of the four-level model
//   full        eigenvalues of the two-mode model
//   forward     peak positions found in the noiseless two-mode spectrum, which
//               also captures the thermal blend of each line
enum class Dressing { none, simplified, full, forward };

struct Measured {
    double value = std::numeric_limits<double>::quiet_NaN();
    double sigma = std::numeric_limits<double>::quiet_NaN();
};

// Current parameter estimate; all rad/s, Zeeman map Delta = scale B + offset.
struct CalibrationEstimate {
    double omega_x = 0, omega_y = 0, omega_z = 0;
    double Omega_x = 0, Omega_y = 0;
    double scale = 0, offset = 0;

    double delta_at(double b_gauss) const { return scale * b_gauss + offset; }
};

// Predicted positions (rad/s) of the features the pipeline fits, for a given
// true delta and estimate.
struct FeaturePositions {
    double sideband_x = 0, sideband_y = 0; // |g> -> |x>, |g> -> |y>
    double spin = 0;                        // |g> -> |e>
    double inter_x = 0, inter_y = 0;        // between the two dressed states of each mode
};

class DressingModel {
public:
    // `spectrum` describes the measurement (thermal state, Lamb-Dicke factors,
    // grid, linewidth) and is only used by the forward model.
    explicit DressingModel(Dressing kind = Dressing::simplified, Spin F = Spin(8), int n_max = 5,
                           SpectrumConfig spectrum = {})
        : kind_(kind), F_(F), n_max_(n_max), spectrum_(std::move(spectrum)) {}

    Dressing kind() const { return kind_; }

    FeaturePositions predict(double delta, const CalibrationEstimate& th) const {
        delta = std::max(delta, 0.0);
        if (kind_ == Dressing::none)
            return {th.omega_x, th.omega_y, delta, th.Omega_x, th.Omega_y};
        const SimplifiedParams sp{delta, th.omega_x, th.omega_y, th.Omega_x, th.Omega_y};
        const FeaturePositions simple = features(eigh(build_simplified(sp)), kG, kE, kX, kY);
        if (kind_ == Dressing::simplified) return simple;

        ModelParams p;
        p.F = F_;
        p.n_max = n_max_;
        p.omega_x = th.omega_x;
        p.omega_y = th.omega_y;
        p.omega_z = th.omega_z;
        p.delta = delta;
        p.g_x = 0.5 * th.Omega_x;
        p.g_y = 0.5 * th.Omega_y;
        if (kind_ == Dressing::full)
            return features(eigh(build_two_mode(p)), two_mode_index(p, 0, 0, 0), two_mode_index(p, 0, 0, 1),
                            two_mode_index(p, 1, 0, 0), two_mode_index(p, 0, 1, 0));

        TransitionOptions topt;
        topt.include_carrier = spectrum_.include_carrier;
        topt.omega_z = p.omega_z;
        const TransitionTable table = transitions(eigh(build_two_mode(p)), spectrum_.thermal, emission(), F_, n_max_, topt);
        const double lw = spectrum_.linewidth_khz;
        const double half = 1.5 * lw;
        // Rendering only a slice around each feature keeps the matched filter
        // and the refinement window identical to a full-grid search.
        auto seen = [&](double f) {
            const double fk = rad_to_khz(f);
            const double reach = half + 8 * lw;
            std::vector<double> slice;
            for (double x : spectrum_.grid)
                if (x >= fk - reach && x <= fk + reach) slice.push_back(x);
            if (slice.size() < 3) return f;
            const auto pk = locate_peak(render(table, std::move(slice), lw), fk - half, fk + half);
            return pk ? khz_to_rad(pk->center_khz) : f;
        };
        return {seen(simple.sideband_x), seen(simple.sideband_y), seen(simple.spin), seen(simple.inter_x),
                seen(simple.inter_y)};
    }

private:
    const EmissionOperator& emission() const {
        std::call_once(*emission_once_, [&] {
            *emission_ = emission_operator(spectrum_.eta_x, spectrum_.eta_y, spectrum_.eta_z, F_, n_max_);
        });
        return *emission_;
    }

    static FeaturePositions features(const EigenSystem<double>& es, int g, int e, int x, int y) {
        auto dominant = [&](int bare) {
            Eigen::Index k = 0;
            es.states.row(bare).cwiseAbs2().maxCoeff(&k);
            return es.energies[k];
        };
        auto dressed_pair = [&](int mode) {
            const RVector w = es.states.row(e).cwiseAbs2() + es.states.row(mode).cwiseAbs2();
            Eigen::Index a = 0;
            w.maxCoeff(&a);
            RVector rest = w;
            rest[a] = -1;
            Eigen::Index b = 0;
            rest.maxCoeff(&b);
            return std::abs(es.energies[a] - es.energies[b]);
        };
        const double e0 = dominant(g);
        return {dominant(x) - e0, dominant(y) - e0, dominant(e) - e0, dressed_pair(x), dressed_pair(y)};
    }

    Dressing kind_;
    Spin F_;
    int n_max_;
    SpectrumConfig spectrum_;
    std::shared_ptr<std::once_flag> emission_once_ = std::make_shared<std::once_flag>();
    std::shared_ptr<EmissionOperator> emission_ = std::make_shared<EmissionOperator>();
};


namespace detail {

inline double floor_sigma(double s) { return std::max(s, khz_to_rad(1e-6)); }

// Weighted mean; sigma is the larger of the statistical error and the
// scatter-based error.
inline Measured weighted_mean(const std::vector<double>& v, const std::vector<double>& s) {
    Measured m;
    if (v.empty()) return m;
    double sw = 0, swx = 0;
    for (std::size_t k = 0; k < v.size(); ++k) {
        const double w = 1.0 / (floor_sigma(s[k]) * floor_sigma(s[k]));
        sw += w;
        swx += w * v[k];
    }
    m.value = swx / sw;
    double stat = 1.0 / std::sqrt(sw);
    if (v.size() > 1) {
        double ss = 0;
        for (std::size_t k = 0; k < v.size(); ++k) {
            const double w = 1.0 / (floor_sigma(s[k]) * floor_sigma(s[k]));
            ss += w * (v[k] - m.value) * (v[k] - m.value);
        }
        stat = std::max(stat, std::sqrt(ss / (static_cast<double>(v.size() - 1) * sw)));
    }
    m.sigma = stat;
    return m;
}


} // namespace detail

struct TrapOptions {
    double delta_lo = khz_to_rad(250), delta_hi = khz_to_rad(330); // far-detuned window
    double search_halfwidth = khz_to_rad(15);
    double search_halfwidth_z = khz_to_rad(25);
    double crossing_guard = khz_to_rad(40); // min |Delta - omega_i| inside the window
    bool fit_z = true;
    FeatureSearch search;
};

struct TrapCalibration {
    Measured omega_x, omega_y, omega_z;
    int points = 0;
};

// Trap frequencies from the motional sidebands at large Delta. Each per-point
// sideband center is corrected by the dressing shift predicted from the current
// estimate before averaging.
inline TrapCalibration calibrate_traps(const DeltaScan& scan, const CalibrationEstimate& th,
                                       const DressingModel& model, const TrapOptions& opt = {}) {
    std::vector<double> vx, sx, vy, sy, vz, sz;
    int used = 0;
    for (std::size_t k = 0; k < scan.size(); ++k) {
        const double delta = th.delta_at(scan.b_field[k]);
        if (delta < opt.delta_lo || delta > opt.delta_hi) continue;
        if (std::abs(delta - th.omega_x) < opt.crossing_guard || std::abs(delta - th.omega_y) < opt.crossing_guard)
            throw ValidationError("calibrate_traps: far-detuned window overlaps an avoided crossing");
        ++used;
        const Spectrum& s = scan.spectra[k];
        const FeaturePositions pred = model.predict(delta, th);
        // Spin-flip lines that sweep with delta through the sideband windows.
        std::vector<double> avoid;
        for (double f : {pred.spin, pred.spin - th.omega_x, pred.spin - th.omega_y, pred.spin + th.omega_x,
                         pred.spin + th.omega_y})
            avoid.push_back(rad_to_khz(f));
        const double exclusion = 3 * s.linewidth_khz;
        auto take = [&](double predicted, double bare, std::vector<double>& v, std::vector<double>& sig,
                        double halfwidth = 0) {
            if (halfwidth <= 0) halfwidth = opt.search_halfwidth;
            const auto pk = locate_peak(s, rad_to_khz(predicted - halfwidth), rad_to_khz(predicted + halfwidth),
                                        opt.search, avoid, exclusion);
            if (!pk) return;
            v.push_back(khz_to_rad(pk->center_khz) - (predicted - bare));
            sig.push_back(khz_to_rad(pk->center_err_khz));
        };
        take(pred.sideband_x, th.omega_x, vx, sx);
        take(pred.sideband_y, th.omega_y, vy, sy);
        if (opt.fit_z && th.omega_z > 0) take(th.omega_z, th.omega_z, vz, sz, opt.search_halfwidth_z);
    }
    if (used == 0) throw FitError("calibrate_traps: no scan points inside the far-detuned window");
    if (vx.empty() || vy.empty()) throw FitError("calibrate_traps: motional sidebands not found");
    return {detail::weighted_mean(vx, sx), detail::weighted_mean(vy, sy), detail::weighted_mean(vz, sz), used};
}

struct ZeemanOptions {
    double delta_min = khz_to_rad(270);
    double search_halfwidth = khz_to_rad(10);
    int iterations = 8;
    double tolerance = khz_to_rad(1e-4); // on offset plus scale times 1 G
    FeatureSearch search;
};

struct ZeemanCalibration {
    Measured scale;  // rad/s per G
    Measured offset; // rad/s
    int points = 0;
    LineFit line;
};

// Linear map Delta = scale B_0 + offset from the |g> -> |e> line at large Delta.
inline ZeemanCalibration calibrate_zeeman(const DeltaScan& scan, const CalibrationEstimate& th,
                                          const DressingModel& model, const ZeemanOptions& opt = {}) {
    // Points are chosen once with the incoming map; the dressing correction is
    // then re-evaluated at the refitted map until it stops moving.
    std::vector<std::size_t> chosen;
    for (std::size_t k = 0; k < scan.size(); ++k)
        if (th.delta_at(scan.b_field[k]) >= opt.delta_min) chosen.push_back(k);

    CalibrationEstimate cur = th;
    ZeemanCalibration z;
    for (int it = 0; it < std::max(opt.iterations, 1); ++it) {
        std::vector<LinePoint> pts;
        for (std::size_t k : chosen) {
            const double delta = cur.delta_at(scan.b_field[k]);
            const double predicted = model.predict(delta, cur).spin;
            const auto pk = locate_peak(scan.spectra[k], rad_to_khz(predicted - opt.search_halfwidth),
                                        rad_to_khz(predicted + opt.search_halfwidth), opt.search);
            if (!pk) continue;
            const double observed = khz_to_rad(pk->center_khz) - (predicted - delta);
            pts.push_back({scan.b_field[k], observed, detail::floor_sigma(khz_to_rad(pk->center_err_khz))});
        }
        if (pts.size() < 3) throw FitError("calibrate_zeeman: fewer than 3 usable |g> -> |e> peaks");
        z.line = fit_line(pts);
        z.scale = {z.line.slope, z.line.slope_err};
        z.offset = {z.line.intercept, z.line.intercept_err};
        z.points = static_cast<int>(pts.size());
        const double moved = std::abs(z.offset.value - cur.offset) + std::abs(z.scale.value - cur.scale);
        cur.scale = z.scale.value;
        cur.offset = z.offset.value;
        if (moved < opt.tolerance) break;
    }
    return z;
}

struct CouplingOptions {
    double resonance_halfwidth = khz_to_rad(10); // |Delta - omega_i| for points used
    double search_halfwidth = khz_to_rad(10);
    double min_sensitivity = 0.2; // d(peak)/d(Omega) below which a point is skipped
    FeatureSearch search;
};

struct CouplingCalibration {
    Measured Omega_x, Omega_y; // rad/s
    int points_x = 0, points_y = 0;

    Measured g_x() const { return {0.5 * Omega_x.value, 0.5 * Omega_x.sigma}; }
    Measured g_y() const { return {0.5 * Omega_y.value, 0.5 * Omega_y.sigma}; }
};

// Rabi splittings from the peak between the two dressed states near each
// resonance; g_i = Omega_i / 2.
inline CouplingCalibration fit_couplings(const DeltaScan& scan, const CalibrationEstimate& th,
                                         const DressingModel& model, const CouplingOptions& opt = {}) {
    CouplingCalibration out;
    for (int mode = 0; mode < 2; ++mode) {
        const double omega = mode == 0 ? th.omega_x : th.omega_y;
        const double Omega = mode == 0 ? th.Omega_x : th.Omega_y;
        auto inter = [&](const CalibrationEstimate& e, double delta) {
            const auto f = model.predict(delta, e);
            return mode == 0 ? f.inter_x : f.inter_y;
        };
        std::vector<double> v, sig;
        for (std::size_t k = 0; k < scan.size(); ++k) {
            const double delta = th.delta_at(scan.b_field[k]);
            if (std::abs(delta - omega) > opt.resonance_halfwidth) continue;
            const Spectrum& s = scan.spectra[k];
            const double predicted = inter(th, delta);
            const double lo = std::max(rad_to_khz(predicted - opt.search_halfwidth), opt.search.carrier_guard_khz);
            const auto pk = locate_peak(s, lo, rad_to_khz(predicted + opt.search_halfwidth),
                                        opt.search);
            if (!pk) continue;
            const double h = 0.01 * std::max(Omega, khz_to_rad(1));
            CalibrationEstimate up = th, dn = th;
            (mode == 0 ? up.Omega_x : up.Omega_y) += h;
            (mode == 0 ? dn.Omega_x : dn.Omega_y) = std::max(0.0, Omega - h);
            const double slope = (inter(up, delta) - inter(dn, delta)) / (Omega + h - std::max(0.0, Omega - h));
            if (!(slope >= opt.min_sensitivity)) continue;
            v.push_back(Omega + (khz_to_rad(pk->center_khz) - predicted) / slope);
            sig.push_back(khz_to_rad(pk->center_err_khz) / slope);
        }
        if (v.empty())
            throw FitError(std::string("fit_couplings: dressed-state peak not found for the ") +
                           (mode == 0 ? "x" : "y") + " mode");
        (mode == 0 ? out.Omega_x : out.Omega_y) = detail::weighted_mean(v, sig);
        (mode == 0 ? out.points_x : out.points_y) = static_cast<int>(v.size());
    }
    return out;
}

struct CalibrationOptions {
    Dressing dressing = Dressing::simplified;
    Spin F{8};
    int n_max = 5;
    // Assumed thermal state and Lamb-Dicke factors for the forward model; grid
    // and linewidth are taken from the scan.
    SpectrumConfig measurement;
    // Starting point; the trap guesses only place the sideband search windows.
    double guess_omega_x = khz_to_rad(145), guess_omega_y = khz_to_rad(95), guess_omega_z = khz_to_rad(228);
    double guess_g_over_omega = 0.15;
    double nominal_offset = 0; // rad/s, used until the Zeeman stage succeeds
    bool calibrate_zeeman = true;
    int max_passes = 20;
    double tolerance = khz_to_rad(1e-3);
    TrapOptions traps;
    ZeemanOptions zeeman;
    CouplingOptions couplings;
};

struct CalibrationResult {
    Measured omega_x, omega_y, omega_z;
    Measured zeeman_scale, zeeman_offset;
    bool zeeman_calibrated = false;
    Measured g_x, g_y;
    int passes = 0;
    Dressing dressing = Dressing::simplified;
    // True when the sigmas include the uncertainty each stage inherits from
    // the others; false if only the per-stage statistical errors are given.
    bool propagated = false;

    // Ratios are always derived from the members above.
    Measured g_over_omega_x() const { return ratio(g_x, omega_x); }
    Measured g_over_omega_y() const { return ratio(g_y, omega_y); }
    Measured Omega_over_omega_x() const { return scaled(ratio(g_x, omega_x), 2.0); }
    Measured Omega_over_omega_y() const { return scaled(ratio(g_y, omega_y), 2.0); }

private:
    static Measured ratio(Measured a, Measured b) {
        const double r = a.value / b.value;
        const double ra = a.sigma / a.value, rb = b.sigma / b.value;
        return {r, std::abs(r) * std::sqrt(ra * ra + rb * rb)};
    }
    static Measured scaled(Measured m, double f) { return {f * m.value, f * m.sigma}; }
};

namespace detail {

// Parameter order of the joint covariance.
enum CalIndex : int { kOmegaX, kOmegaY, kOmegaZ, kRabiX, kRabiY, kScale, kOffset, kCalParams };

struct StageResults {
    TrapCalibration traps;
    std::optional<ZeemanCalibration> zeeman;
    CouplingCalibration couplings;
    CalibrationEstimate out;
};

// One pass over the three stages. Sequential passes feed each stage's result
// to the next; otherwise every stage sees `in`.
inline StageResults run_stages(const DeltaScan& scan, const CalibrationEstimate& in, const DressingModel& model,
                               const CalibrationOptions& opt, bool sequential) {
    StageResults r;
    CalibrationEstimate cur = in;
    r.out = in;
    r.traps = calibrate_traps(scan, cur, model, opt.traps);
    r.out.omega_x = r.traps.omega_x.value;
    r.out.omega_y = r.traps.omega_y.value;
    if (std::isfinite(r.traps.omega_z.value)) r.out.omega_z = r.traps.omega_z.value;
    if (sequential) cur = r.out;

    r.out.scale = scan.nominal_scale;
    r.out.offset = opt.nominal_offset;
    if (opt.calibrate_zeeman) {
        try {
            r.zeeman = calibrate_zeeman(scan, cur, model, opt.zeeman);
            r.out.scale = r.zeeman->scale.value;
            r.out.offset = r.zeeman->offset.value;
        } catch (const FitError&) {
        }
    }
    if (sequential) cur = r.out;

    r.couplings = fit_couplings(scan, cur, model, opt.couplings);
    r.out.Omega_x = r.couplings.Omega_x.value;
    r.out.Omega_y = r.couplings.Omega_y.value;
    return r;
}

inline Eigen::Matrix<double, kCalParams, 1> as_vector(const CalibrationEstimate& e) {
    Eigen::Matrix<double, kCalParams, 1> v;
    v << e.omega_x, e.omega_y, e.omega_z, e.Omega_x, e.Omega_y, e.scale, e.offset;
    return v;
}

inline CalibrationEstimate from_vector(const Eigen::Matrix<double, kCalParams, 1>& v) {
    return {v[kOmegaX], v[kOmegaY], v[kOmegaZ], v[kRabiX], v[kRabiY], v[kScale], v[kOffset]};
}

// Joint covariance at the fixed point theta* = T(theta*) of the one-pass
// map, with T evaluated stage-parallel. Linearizing,
//   d theta = J d theta + e  =>  cov = (I - J)^-1 D (I - J)^-T,
// where D holds the statistical covariance of each stage's own output.
inline std::optional<RMatrix> propagate_covariance(const DeltaScan& scan, const CalibrationEstimate& fixed,
                                                   const DressingModel& model, const CalibrationOptions& opt) {
    try {
        const StageResults base = run_stages(scan, fixed, model, opt, false);
        std::vector<int> free = {kOmegaX, kOmegaY, kRabiX, kRabiY};
        if (std::isfinite(base.traps.omega_z.sigma)) free.push_back(kOmegaZ);
        if (base.zeeman) {
            free.push_back(kScale);
            free.push_back(kOffset);
        }
        std::sort(free.begin(), free.end());
        const auto n = static_cast<Eigen::Index>(free.size());

        RMatrix D = RMatrix::Zero(kCalParams, kCalParams);
        auto var = [](double s) { return floor_sigma(s) * floor_sigma(s); };
        D(kOmegaX, kOmegaX) = var(base.traps.omega_x.sigma);
        D(kOmegaY, kOmegaY) = var(base.traps.omega_y.sigma);
        if (std::isfinite(base.traps.omega_z.sigma)) D(kOmegaZ, kOmegaZ) = var(base.traps.omega_z.sigma);
        D(kRabiX, kRabiX) = var(base.couplings.Omega_x.sigma);
        D(kRabiY, kRabiY) = var(base.couplings.Omega_y.sigma);
        if (base.zeeman) {
            const LineFit& l = base.zeeman->line;
            D(kScale, kScale) = l.slope_err * l.slope_err;
            D(kOffset, kOffset) = l.intercept_err * l.intercept_err;
            D(kScale, kOffset) = D(kOffset, kScale) = l.covariance;
        }

        const auto t0 = as_vector(base.out);
        const auto x0 = as_vector(fixed);
        RMatrix J = RMatrix::Zero(n, n);
        for (Eigen::Index c = 0; c < n; ++c) {
            const int j = free[static_cast<std::size_t>(c)];
            const double h = j == kScale ? 1e-4 * std::abs(x0[j]) : khz_to_rad(0.05);
            auto x = x0;
            x[j] += h;
            const auto t = as_vector(run_stages(scan, from_vector(x), model, opt, false).out);
            for (Eigen::Index r = 0; r < n; ++r)
                J(r, c) = (t[free[static_cast<std::size_t>(r)]] - t0[free[static_cast<std::size_t>(r)]]) / h;
        }
        RMatrix Dn(n, n);
        for (Eigen::Index r = 0; r < n; ++r)
            for (Eigen::Index c = 0; c < n; ++c)
                Dn(r, c) = D(free[static_cast<std::size_t>(r)], free[static_cast<std::size_t>(c)]);
        const RMatrix A = RMatrix::Identity(n, n) - J;
        Eigen::FullPivLU<RMatrix> lu(A);
        if (!lu.isInvertible()) return std::nullopt;
        const RMatrix Ainv = lu.inverse();
        const RMatrix cov_n = Ainv * Dn * Ainv.transpose();
        RMatrix cov = RMatrix::Constant(kCalParams, kCalParams, std::numeric_limits<double>::quiet_NaN());
        for (Eigen::Index r = 0; r < n; ++r)
            for (Eigen::Index c = 0; c < n; ++c)
                cov(free[static_cast<std::size_t>(r)], free[static_cast<std::size_t>(c)]) = cov_n(r, c);
        if (!cov_n.allFinite()) return std::nullopt;
        return cov;
    } catch (const FitError&) {
        return std::nullopt;
    }
}

} // namespace detail

// Trap frequencies, Zeeman map and couplings, repeated until the estimate
// stops moving, so that each stage sees the dressing implied by the others.
// If the |g> -> |e> line cannot be measured, the nominal map (scan labels plus
// nominal_offset) is kept and zeeman_calibrated is false.
inline CalibrationResult calibrate(const DeltaScan& scan, const CalibrationOptions& opt = {}) {
    require(scan.size() > 0, "calibrate: empty scan");
    require(scan.nominal_scale > 0, "calibrate: scan has no field labels");
    SpectrumConfig measurement = opt.measurement;
    measurement.grid = scan.spectra.front().freq_khz;
    measurement.linewidth_khz = scan.spectra.front().linewidth_khz;
    const DressingModel model(opt.dressing, opt.F, opt.n_max, measurement);
    CalibrationEstimate th;
    th.omega_x = opt.guess_omega_x;
    th.omega_y = opt.guess_omega_y;
    th.omega_z = opt.guess_omega_z;
    th.Omega_x = 2 * opt.guess_g_over_omega * th.omega_x;
    th.Omega_y = 2 * opt.guess_g_over_omega * th.omega_y;
    th.scale = scan.nominal_scale;
    th.offset = opt.nominal_offset;

    // Noisy scans can leave the pass map with a slope just beyond -1, which
    // shows up as a slowly growing alternation; the step is halved whenever
    // the residual grows.
    double step = 1.0, last_change = std::numeric_limits<double>::infinity();
    for (int pass = 1; pass <= opt.max_passes; ++pass) {
        const CalibrationEstimate prev = th;
        const detail::StageResults st = detail::run_stages(scan, th, model, opt, true);
        const CalibrationEstimate& out = st.out;
        const double change = std::max({std::abs(out.omega_x - prev.omega_x), std::abs(out.omega_y - prev.omega_y),
                                        std::abs(out.Omega_x - prev.Omega_x), std::abs(out.Omega_y - prev.Omega_y),
                                        std::abs(out.delta_at(1.0) - prev.delta_at(1.0)),
                                        std::abs(out.offset - prev.offset)});
        if (change > last_change) step = std::max(0.25, 0.5 * step);
        last_change = change;
        th = detail::from_vector(detail::as_vector(prev) + step * (detail::as_vector(out) - detail::as_vector(prev)));
        if (opt.dressing == Dressing::none ? pass < 2 : change >= opt.tolerance) continue;
        th = out;

        CalibrationResult r;
        r.dressing = opt.dressing;
        r.passes = pass;
        r.omega_x = st.traps.omega_x;
        r.omega_y = st.traps.omega_y;
        r.omega_z = st.traps.omega_z;
        r.g_x = st.couplings.g_x();
        r.g_y = st.couplings.g_y();
        r.zeeman_calibrated = st.zeeman.has_value();
        const double nan = std::numeric_limits<double>::quiet_NaN();
        r.zeeman_scale = st.zeeman ? st.zeeman->scale : Measured{th.scale, nan};
        r.zeeman_offset = st.zeeman ? st.zeeman->offset : Measured{th.offset, nan};
        if (const auto cov = detail::propagate_covariance(scan, th, model, opt)) {
            using namespace detail;
            auto sd = [&](int k) { return std::sqrt((*cov)(k, k)); };
            r.propagated = true;
            r.omega_x.sigma = sd(kOmegaX);
            r.omega_y.sigma = sd(kOmegaY);
            if (std::isfinite(r.omega_z.sigma)) r.omega_z.sigma = sd(kOmegaZ);
            r.g_x.sigma = 0.5 * sd(kRabiX);
            r.g_y.sigma = 0.5 * sd(kRabiY);
            if (r.zeeman_calibrated) {
                r.zeeman_scale.sigma = sd(kScale);
                r.zeeman_offset.sigma = sd(kOffset);
            }
        }
        return r;
    }
    throw FitError("calibrate: estimate did not settle within " + std::to_string(opt.max_passes) + " passes");
}

// ---------------------------------------------------------------------------
// Simplified versus full model

inline constexpr int compared_transitions = 4;

struct CompareRow {
    double delta = 0; // rad/s
    // g->1, g->2, g->3 and 1->2 of the four-level model, in kHz.
    std::array<double, compared_transitions> line_khz{};
    std::array<double, compared_transitions> ridge_khz{};
    std::array<double, compared_transitions> deviation_khz{};
    std::array<bool, compared_transitions> matched{};
};

struct CompareReport {
    std::vector<CompareRow> rows;
    std::array<double, compared_transitions> max_deviation_khz{};
    double max_deviation = 0; // kHz, over matched lines
    int unmatched = 0;
};

struct CompareOptions {
    double gate_khz = 10.0;
    double tie_khz = 0.25;
    double min_height_fraction = 1e-3;
    double min_separation_khz = 3.0;
    int threads = 1;
};

// Four-level transition lines against the peak ridges of full-model spectra.
// Each line is matched to the nearest peak within the gate; near-ties go to the
// peak closest to the previous delta's match.
inline CompareReport compare_models(const ModelParams& params, std::vector<double> deltas, SpectrumConfig cfg,
                                    const CompareOptions& opt = {}) {
    require(!deltas.empty(), "compare_models: empty delta list");
    std::sort(deltas.begin(), deltas.end());
    cfg.include_carrier = false;
    std::vector<PeakList> ridges(deltas.size());
    parallel_for(deltas.size(), opt.threads, [&](std::size_t k) {
        ModelParams p = params;
        p.delta = deltas[k];
        PeakSearch q;
        q.min_height_fraction = opt.min_height_fraction;
        q.min_separation_khz = opt.min_separation_khz;
        q.f_lo_khz = 0.5 * opt.min_separation_khz;
        ridges[k] = find_peaks(synthesize(p, cfg), q);
    });

    CompareReport rep;
    std::array<double, compared_transitions> prev;
    prev.fill(std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < deltas.size(); ++k) {
        const SimplifiedParams sp{deltas[k], params.omega_x, params.omega_y, 2 * params.g_x, 2 * params.g_y};
        const RVector E = eigh(build_simplified(sp)).energies;
        CompareRow row;
        row.delta = deltas[k];
        row.line_khz = {rad_to_khz(E[1] - E[0]), rad_to_khz(E[2] - E[0]), rad_to_khz(E[3] - E[0]),
                        rad_to_khz(E[2] - E[1])};
        for (int t = 0; t < compared_transitions; ++t) {
            std::vector<const Peak*> cand;
            for (const auto& pk : ridges[k])
                if (std::abs(pk.center_khz - row.line_khz[t]) <= opt.gate_khz) cand.push_back(&pk);
            std::sort(cand.begin(), cand.end(), [&](const Peak* a, const Peak* b) {
                return std::abs(a->center_khz - row.line_khz[t]) < std::abs(b->center_khz - row.line_khz[t]);
            });
            row.ridge_khz[t] = std::numeric_limits<double>::quiet_NaN();
            row.deviation_khz[t] = std::numeric_limits<double>::quiet_NaN();
            if (cand.empty()) {
                ++rep.unmatched;
                continue;
            }
            const Peak* pick = cand.front();
            if (cand.size() > 1 && std::isfinite(prev[t]) &&
                std::abs(cand[1]->center_khz - row.line_khz[t]) - std::abs(pick->center_khz - row.line_khz[t]) <
                    opt.tie_khz &&
                std::abs(cand[1]->center_khz - prev[t]) < std::abs(pick->center_khz - prev[t]))
                pick = cand[1];
            row.matched[t] = true;
            row.ridge_khz[t] = pick->center_khz;
            row.deviation_khz[t] = std::abs(pick->center_khz - row.line_khz[t]);
            prev[t] = pick->center_khz;
            rep.max_deviation_khz[t] = std::max(rep.max_deviation_khz[t], row.deviation_khz[t]);
            rep.max_deviation = std::max(rep.max_deviation, row.deviation_khz[t]);
        }
        rep.rows.push_back(row);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Tune-out laser: Rabi splitting versus tune-out power

struct TuneoutPoint {
    double power_uw = 0;
    double omega_khz = 0;     // Omega_y / (2 pi)
    double omega_err_khz = 0; // 1 sigma, <= 0 if unknown
};

struct TuneoutFit {
    LineFit line; // slope in kHz/uW, intercept in kHz
    int used = 0;
    int excluded = 0;
};

// Straight-line fit of Omega_y(P). Points above max_power_uw are dropped since
// the peak runs into the carrier there.
inline TuneoutFit fit_tuneout(const std::vector<TuneoutPoint>& pts,
                              double max_power_uw = std::numeric_limits<double>::infinity()) {
    std::vector<LinePoint> lp;
    TuneoutFit f;
    for (const auto& p : pts) {
        if (p.power_uw > max_power_uw) {
            ++f.excluded;
            continue;
        }
        lp.push_back({p.power_uw, p.omega_khz, p.omega_err_khz});
    }
    f.used = static_cast<int>(lp.size());
    f.line = fit_line(lp);
    return f;
}

struct TuneoutSynthesis {
    double slope_khz_per_uw = -0.120;
    double intercept_khz = 35.0;
    double p_max_uw = 100.0;
    int points = 11;
    double sigma_khz = 0.4;
};

// Evenly spaced powers on [0, p_max] with Gaussian scatter on Omega.
inline std::vector<TuneoutPoint> synthesize_tuneout(const TuneoutSynthesis& t, std::uint64_t seed) {
    require(t.points >= 2 && t.p_max_uw > 0 && t.sigma_khz >= 0, "synthesize_tuneout: invalid settings");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<TuneoutPoint> out;
    for (int k = 0; k < t.points; ++k) {
        const double P = t.p_max_uw * k / (t.points - 1);
        const double err = t.sigma_khz > 0 ? t.sigma_khz * noise(rng) : 0.0;
        out.push_back({P, t.intercept_khz + t.slope_khz_per_uw * P + err, t.sigma_khz});
    }
    return out;
}

} // namespace dicke
