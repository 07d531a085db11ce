// spectra.hpp: fluorescence spectrum synthesis from an eigensystem.
//
// A transition |i> -> |j> between eigenstates contributes a Gaussian peak with
// amplitude p_i |<j|V|i>|^2. Peaks are placed on the omega_S - omega_I axis at
// E_j - E_i: processes that leave energy in the atom (blue sidebands) sit at
// positive frequency, so a cold atom shows its tall sidebands on the positive
// side and the |g> -> |e> spin-flip line sits at +Delta.

#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "dicke/model.hpp"

namespace dicke {

// p_n ∝ q^n, q = mean_n / (1 + mean_n), renormalized on n < n_max.
inline RVector thermal_populations(double mean_n, int n_max) {
    require(mean_n >= 0, "thermal_populations: mean_n must be >= 0");
    require(n_max >= 1, "thermal_populations: n_max must be >= 1");
    const double q = mean_n / (1.0 + mean_n);
    RVector p(n_max);
    double w = 1.0;
    for (int n = 0; n < n_max; ++n, w *= q) p[n] = w;
    return p / p.sum();
}

struct ThermalState {
    double mean_n_x = 0.5;
    double mean_n_y = 0.5;
    double mean_n_z = 0.5;
    // Distribution over m_F = -F..F. Empty means everything in m_F = -F.
    RVector spin_population;

    RVector spin_distribution(Spin F) const {
        if (spin_population.size() == 0) {
            RVector p = RVector::Zero(F.dim());
            p[0] = 1.0;
            return p;
        }
        require(spin_population.size() == F.dim(), "spin population has wrong dimension");
        require(spin_population.minCoeff() >= 0 && spin_population.sum() > 0,
                "spin population must be non-negative and non-zero");
        return spin_population / spin_population.sum();
    }

    // Populations of the bare product states of build_two_mode's space.
    RVector bare_populations(Spin F, int n_max) const {
        const RVector px = thermal_populations(mean_n_x, n_max);
        const RVector py = thermal_populations(mean_n_y, n_max);
        const RVector ps = spin_distribution(F);
        RVector p(n_max * n_max * F.dim());
        Eigen::Index k = 0;
        for (int nx = 0; nx < n_max; ++nx)
            for (int ny = 0; ny < n_max; ++ny)
                for (int s = 0; s < F.dim(); ++s) p[k++] = px[nx] * py[ny] * ps[s];
        return p;
    }
};

namespace detail {

inline double factorial(int n) {
    double r = 1.0;
    for (int k = 2; k <= n; ++k) r *= k;
    return r;
}

} // namespace detail

// <J M | j1 m1; j2 m2> with every argument given as twice its value (Racah formula,
// Condon-Shortley phases).
inline double clebsch_gordan(int j1, int m1, int j2, int m2, int J, int M) {
    if (m1 + m2 != M) return 0.0;
    if (std::abs(m1) > j1 || std::abs(m2) > j2 || std::abs(M) > J) return 0.0;
    if (J < std::abs(j1 - j2) || J > j1 + j2) return 0.0;
    if ((j1 + m1) % 2 || (j2 + m2) % 2 || (J + M) % 2 || (j1 + j2 + J) % 2) return 0.0;

    using detail::factorial;
    const int a = (J + j1 - j2) / 2, b = (J - j1 + j2) / 2, c = (j1 + j2 - J) / 2;
    const int s = (j1 + j2 + J) / 2 + 1;
    const double pre = std::sqrt((J + 1) * factorial(a) * factorial(b) * factorial(c) / factorial(s) *
                                 factorial((J + M) / 2) * factorial((J - M) / 2) *
                                 factorial((j1 - m1) / 2) * factorial((j1 + m1) / 2) *
                                 factorial((j2 - m2) / 2) * factorial((j2 + m2) / 2));
    double sum = 0.0;
    for (int k = 0;; ++k) {
        const int d1 = c - k, d2 = (j1 - m1) / 2 - k, d3 = (j2 + m2) / 2 - k;
        const int d4 = (J - j2 + m1) / 2 + k, d5 = (J - j1 - m2) / 2 + k;
        if (d1 < 0 || d2 < 0 || d3 < 0) break;
        if (d4 < 0 || d5 < 0) continue;
        const double term = 1.0 / (factorial(k) * factorial(d1) * factorial(d2) * factorial(d3) *
                                   factorial(d4) * factorial(d5));
        sum += (k % 2 ? -term : term);
    }
    return pre * sum;
}

// Generalized sigma^- lowering operator on the ground manifold F:
//   S_- = sum_m c_m |F, m-1><F, m|,  c_m = <F', m-1 | F, m; 1, -1>,
// for the cycling transition F -> F' = F + 1.
inline RMatrix sigma_minus(Spin F, Spin F_excited) {
    require(F_excited.twice() == F.twice() + 2, "sigma_minus: F' must equal F + 1");
    const int d = F.dim();
    RMatrix S = RMatrix::Zero(d, d);
    for (int k = 1; k < d; ++k) {
        const int twice_m = 2 * k - F.twice();
        S(k - 1, k) = clebsch_gordan(F.twice(), twice_m, 2, -2, F_excited.twice(), twice_m - 2);
    }
    return S;
}

inline RMatrix sigma_minus(Spin F) { return sigma_minus(F, Spin(F.twice() + 2)); }

// V = (1 + eta_x (a_x + a_x^+) + eta_y (a_y + a_y^+)) (x) S_- S_-^+ on
// mode_x (x) mode_y (x) spin. The optional z term acts on a spectator mode that
// is never built explicitly; transitions() accounts for it analytically.
struct EmissionOperator {
    double eta_x = 0, eta_y = 0;
    std::optional<double> eta_z;
    RMatrix V;         // full operator on the two-mode space
    RMatrix spin_part; // I (x) I (x) S_- S_-^+

    bool outside_lamb_dicke() const {
        constexpr double limit = 0.3;
        return eta_x > limit || eta_y > limit || eta_z.value_or(0.0) > limit;
    }
};

inline EmissionOperator emission_operator(double eta_x, double eta_y, std::optional<double> eta_z,
                                          Spin F, int n_max) {
    require(eta_x >= 0 && eta_y >= 0 && eta_z.value_or(0.0) >= 0,
            "emission_operator: Lamb-Dicke parameters must be >= 0");
    const auto m = mode_operators(n_max);
    const RMatrix Sm = sigma_minus(F);
    const RMatrix SS = Sm * Sm.transpose();
    const RMatrix I = m.identity();
    EmissionOperator op;
    op.eta_x = eta_x;
    op.eta_y = eta_y;
    op.eta_z = eta_z;
    op.spin_part = tensor(I, I, SS);
    op.V = op.spin_part + eta_x * tensor(m.position(), I, SS) + eta_y * tensor(I, m.position(), SS);
    return op;
}

struct Transition {
    double omega = 0;     // position on the omega_S - omega_I axis, rad/s
    double amplitude = 0; // p_i |<j|V|i>|^2
    int initial = 0;      // eigenstate index i
    int final_ = 0;       // eigenstate index j
    int z_quanta = 0;     // change of the spectator z occupation (-1, 0, +1)
};

using TransitionTable = std::vector<Transition>;

struct TransitionOptions {
    bool include_carrier = true; // i == j terms (without z quanta)
    double omega_z = 0;          // needed when the emission operator has eta_z
    int n_max_z = 5;
};

// Eigenstate populations p_i = sum_b p_b |<i|b>|^2.
inline RVector eigenstate_populations(const EigenSystem<double>& es, const RVector& bare) {
    require(bare.size() == es.states.rows(), "populations: dimension mismatch");
    return es.states.cwiseAbs2().transpose() * bare;
}

inline TransitionTable transitions(const EigenSystem<double>& es, const RVector& bare_populations,
                                   const EmissionOperator& V, double mean_n_z = 0.5,
                                   const TransitionOptions& opt = {}) {
    const Eigen::Index D = es.states.rows();
    require(V.V.rows() == D && V.V.cols() == D, "transitions: emission operator dimension mismatch");
    const RVector p = eigenstate_populations(es, bare_populations);
    const RMatrix M = es.states.transpose() * V.V * es.states; // M(j, i) = <j|V|i>

    double up = 0, down = 0;
    RMatrix Ms;
    if (V.eta_z && *V.eta_z > 0) {
        require(opt.omega_z > 0, "transitions: eta_z set but omega_z is not positive");
        const RVector pz = thermal_populations(mean_n_z, opt.n_max_z);
        for (int n = 0; n < opt.n_max_z; ++n) {
            if (n + 1 < opt.n_max_z) up += pz[n] * (n + 1);
            down += pz[n] * n;
        }
        const double eta2 = *V.eta_z * *V.eta_z;
        up *= eta2;
        down *= eta2;
        Ms = es.states.transpose() * V.spin_part * es.states;
    }

    TransitionTable table;
    table.reserve(static_cast<std::size_t>(D * D * (Ms.size() ? 3 : 1)));
    for (Eigen::Index i = 0; i < D; ++i) {
        for (Eigen::Index j = 0; j < D; ++j) {
            const double w = es.energies[j] - es.energies[i];
            const int ii = static_cast<int>(i), jj = static_cast<int>(j);
            if (i != j || opt.include_carrier)
                table.push_back({w, p[i] * M(j, i) * M(j, i), ii, jj, 0});
            if (Ms.size()) {
                const double s2 = Ms(j, i) * Ms(j, i);
                table.push_back({w + opt.omega_z, p[i] * up * s2, ii, jj, +1});
                table.push_back({w - opt.omega_z, p[i] * down * s2, ii, jj, -1});
            }
        }
    }
    return table;
}

inline TransitionTable transitions(const EigenSystem<double>& es, const ThermalState& th,
                                   const EmissionOperator& V, Spin F, int n_max,
                                   TransitionOptions opt = {}) {
    opt.n_max_z = n_max;
    return transitions(es, th.bare_populations(F, n_max), V, th.mean_n_z, opt);
}

struct Spectrum {
    std::vector<double> freq_khz; // omega_S - omega_I
    std::vector<double> psd;
    double linewidth_khz = 0;     // Gaussian sigma

    std::size_t size() const { return freq_khz.size(); }
    double step_khz() const { return size() > 1 ? freq_khz[1] - freq_khz[0] : 0.0; }
};

inline std::vector<double> make_grid(double f_min_khz, double f_max_khz, double step_khz) {
    require(step_khz > 0 && f_max_khz > f_min_khz, "frequency grid: need f_max > f_min and step > 0");
    const auto n = static_cast<std::size_t>(std::floor((f_max_khz - f_min_khz) / step_khz + 1e-9)) + 1;
    std::vector<double> g(n);
    for (std::size_t k = 0; k < n; ++k) g[k] = f_min_khz + static_cast<double>(k) * step_khz;
    return g;
}

// Peaks further than this many sigma from a grid point are not evaluated there
// (exp(-50) relative).
inline constexpr double render_cutoff_sigma = 10.0;

// PSD(f) = sum_k A_k exp(-(f - f_k)^2 / (2 sigma^2)), sigma = linewidth_khz.
inline Spectrum render(const TransitionTable& table, std::vector<double> grid, double linewidth_khz) {
    require(!grid.empty(), "render: empty frequency grid");
    require(linewidth_khz > 0, "render: linewidth must be > 0");
    for (std::size_t k = 1; k < grid.size(); ++k)
        require(grid[k] > grid[k - 1], "render: grid must be strictly ascending");

    Spectrum s{std::move(grid), {}, linewidth_khz};
    s.psd.assign(s.freq_khz.size(), 0.0);
    const double inv2s2 = 1.0 / (2.0 * linewidth_khz * linewidth_khz);
    const double reach = render_cutoff_sigma * linewidth_khz;
    for (const auto& t : table) {
        if (!(t.amplitude > 0)) continue;
        const double fk = rad_to_khz(t.omega);
        auto lo = std::lower_bound(s.freq_khz.begin(), s.freq_khz.end(), fk - reach);
        auto hi = std::upper_bound(lo, s.freq_khz.end(), fk + reach);
        for (auto it = lo; it != hi; ++it) {
            const double d = *it - fk;
            s.psd[static_cast<std::size_t>(it - s.freq_khz.begin())] += t.amplitude * std::exp(-d * d * inv2s2);
        }
    }
    return s;
}

// Trapezoidal integral of the PSD over the grid.
inline double integrate(const Spectrum& s) {
    double acc = 0.0;
    for (std::size_t k = 1; k < s.size(); ++k)
        acc += 0.5 * (s.psd[k] + s.psd[k - 1]) * (s.freq_khz[k] - s.freq_khz[k - 1]);
    return acc;
}

// Largest PSD value at |f| >= guard_khz, i.e. the tallest non-carrier feature.
inline double sideband_reference(const Spectrum& s, double guard_khz) {
    double ref = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k)
        if (std::abs(s.freq_khz[k]) >= guard_khz) ref = std::max(ref, s.psd[k]);
    return ref;
}

// Additive white Gaussian noise with absolute standard deviation sigma.
inline void add_noise(Spectrum& s, double sigma, std::uint64_t seed) {
    require(sigma >= 0, "add_noise: sigma must be >= 0");
    if (sigma == 0) return;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sigma);
    for (auto& v : s.psd) v += n(rng);
}

} // namespace dicke
