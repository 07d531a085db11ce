// model.hpp: lab-parameter mappings and Hamiltonian builders for the
// spin-motion Dicke model of a trapped atom.
//
// All Hamiltonians are returned as H/hbar in rad/s. They are real in the
// product basis used here, so they are built as real symmetric matrices.

#pragma once

#include <array>
#include <optional>

#include "dicke/qops.hpp"

namespace dicke {

// SI constants plus the atomic data of the species (cesium 6S1/2, F=4 by default).
struct PhysicalConstants {
    double hbar = 1.054571817e-34;  // J s
    double mu_B = 9.2740100783e-28; // J / G
    double mass = 2.20695e-25;      // kg, 133Cs
    double g_F = 0.25;              // hyperfine Lande factor of the F=4 ground state

    void validate() const {
        require(hbar > 0 && mu_B > 0 && mass > 0, "physical constants must be positive");
        require(std::isfinite(g_F), "g_F must be finite");
    }
};

struct ModelParams {
    Spin F{8};
    double omega_x = 0, omega_y = 0, omega_z = 0; // rad/s
    double delta = 0;                             // Zeeman splitting, rad/s
    double g_x = 0, g_y = 0;                      // spin-motion couplings, rad/s
    int n_max = 5;                                // Fock states per mode
    std::optional<double> B_0;                    // G, when delta was derived from a field
    std::optional<double> b_y;                    // G/m

    void validate() const {
        require(omega_x >= 0 && omega_y >= 0 && omega_z >= 0, "trap frequencies must be >= 0");
        require(delta >= 0, "Zeeman splitting must be >= 0");
        require(g_x >= 0 && g_y >= 0, "couplings must be >= 0");
        require(n_max >= 2, "n_max must be >= 2");
    }
};

// Parameters of the four-level model spanned by |g>, |e>, |x>, |y>.
struct SimplifiedParams {
    double delta = 0, omega_x = 0, omega_y = 0; // rad/s
    double Omega_x = 0, Omega_y = 0;            // Rabi frequencies 2 g_i, rad/s

    void validate() const {
        require(delta >= 0 && omega_x >= 0 && omega_y >= 0 && Omega_x >= 0 && Omega_y >= 0,
                "simplified-model parameters must be >= 0");
    }
};

// hbar Delta = g_F mu_B B_0
inline double zeeman_splitting(double B_0, const PhysicalConstants& c = {}) {
    require(B_0 >= 0, "zeeman_splitting: B_0 must be >= 0");
    return c.g_F * c.mu_B * B_0 / c.hbar;
}

// Ground-state extent y_0 = sqrt(hbar / (2 M omega)).
inline double oscillator_length(double omega, const PhysicalConstants& c = {}) {
    require(omega > 0, "oscillator_length: omega must be > 0");
    return std::sqrt(c.hbar / (2.0 * c.mass * omega));
}

// Coupling produced by a fictitious-field gradient b_y (G/m):
//   hbar g_y / sqrt(2F) = g_F mu_B b_y y_0 / 2.
// This normalization is the one for which the lab Hamiltonian and build_dicke
// have the same spectrum for every F.
inline double coupling_from_gradient(double b_y, double omega_y, Spin F,
                                     const PhysicalConstants& c = {}) {
    const double y0 = oscillator_length(omega_y, c);
    return c.g_F * c.mu_B * b_y * y0 * std::sqrt(static_cast<double>(F.twice())) / (2.0 * c.hbar);
}

inline double rabi_from_coupling(double g) {
    require(g >= 0, "rabi_from_coupling: g must be >= 0");
    return 2.0 * g;
}

namespace detail {

inline double coupling_prefactor(Spin F) { return 1.0 / std::sqrt(static_cast<double>(F.twice())); }

} // namespace detail

// Single-mode model on mode_y (x) spin:
//   omega_y n + Delta F_z + g_y/sqrt(2F) (a + a^+)(F_+ + F_-)
inline RMatrix build_dicke(const ModelParams& p) {
    p.validate();
    const auto s = spin_operators(p.F);
    const auto m = mode_operators(p.n_max);
    const RMatrix Is = RMatrix::Identity(s.dim(), s.dim());
    RMatrix H = p.omega_y * tensor(m.n, Is) + p.delta * tensor(m.identity(), s.Fz.real()) +
                p.g_y * detail::coupling_prefactor(p.F) * tensor(m.position(), s.ladder_sum());
    return H;
}

// Basis index of |m_F = -F + spin_index, n> in build_dicke's space.
inline int dicke_index(const ModelParams& p, int n, int spin_index) {
    return n * p.F.dim() + spin_index;
}

// 2 |<b|H|a>| with |a> = |-F, n=1>, |b> = |-F+1, n=0>, read off the built matrix.
inline double rabi_matrix_element(const ModelParams& p) {
    const RMatrix H = build_dicke(p);
    return 2.0 * std::abs(H(dicke_index(p, 0, 1), dicke_index(p, 1, 0)));
}

// Two-mode model on mode_x (x) mode_y (x) spin.
inline RMatrix build_two_mode(const ModelParams& p) {
    p.validate();
    const auto s = spin_operators(p.F);
    const auto m = mode_operators(p.n_max);
    const RMatrix Is = RMatrix::Identity(s.dim(), s.dim());
    const RMatrix Im = m.identity();
    const RMatrix Fsum = s.ladder_sum();
    const double k = detail::coupling_prefactor(p.F);
    RMatrix H = p.omega_x * tensor(m.n, Im, Is) + p.omega_y * tensor(Im, m.n, Is) +
                p.delta * tensor(Im, Im, s.Fz.real()) +
                p.g_x * k * tensor(m.position(), Im, Fsum) +
                p.g_y * k * tensor(Im, m.position(), Fsum);
    return H;
}

// Basis index of |m_F = -F + spin_index, n_x, n_y> in build_two_mode's space.
inline int two_mode_index(const ModelParams& p, int n_x, int n_y, int spin_index) {
    return (n_x * p.n_max + n_y) * p.F.dim() + spin_index;
}

// Simplified-model basis order.
enum SimplifiedState : int { kG = 0, kE = 1, kX = 2, kY = 3 };

inline RMatrix build_simplified(const SimplifiedParams& p) {
    p.validate();
    RMatrix H = RMatrix::Zero(4, 4);
    H(kE, kE) = p.delta;
    H(kX, kX) = p.omega_x;
    H(kY, kY) = p.omega_y;
    H(kE, kX) = H(kX, kE) = 0.5 * p.Omega_x;
    H(kE, kY) = H(kY, kE) = 0.5 * p.Omega_y;
    return H;
}

// The trapped-atom Hamiltonian written directly in lab quantities:
//   hbar omega_y a^+a + g_F mu_B B_0 F_z + g_F mu_B b_y y_0 (a + a^+) F_x,
// divided by hbar. Only p.F, p.omega_y and p.n_max are used.
inline RMatrix build_lab_hamiltonian(double B_0, double b_y, const ModelParams& p,
                                     const PhysicalConstants& c = {}) {
    c.validate();
    require(B_0 >= 0, "build_lab_hamiltonian: B_0 must be >= 0");
    require(p.omega_y > 0, "build_lab_hamiltonian: omega_y must be > 0");
    const auto s = spin_operators(p.F);
    const auto m = mode_operators(p.n_max);
    const double y0 = oscillator_length(p.omega_y, c);
    const RMatrix Is = RMatrix::Identity(s.dim(), s.dim());
    const RMatrix Hj = c.hbar * p.omega_y * tensor(m.n, Is) +
                       c.g_F * c.mu_B * B_0 * tensor(m.identity(), s.Fz.real()) +
                       c.g_F * c.mu_B * b_y * y0 * tensor(m.position(), s.Fx.real());
    return Hj / c.hbar;
}

// Model parameters with delta and g_y derived from (B_0, b_y).
inline ModelParams mapped_params(double B_0, double b_y, ModelParams p,
                                 const PhysicalConstants& c = {}) {
    p.delta = zeeman_splitting(B_0, c);
    p.g_y = std::abs(coupling_from_gradient(b_y, p.omega_y, p.F, c));
    p.B_0 = B_0;
    p.b_y = b_y;
    return p;
}

} // namespace dicke
