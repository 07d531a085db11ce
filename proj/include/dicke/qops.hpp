// qops.hpp: spin and truncated-mode operator algebra, Kronecker products and a
// dense Hermitian eigensolver.

#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "dicke/common.hpp"

namespace dicke {

using cplx = std::complex<double>;
using CMatrix = Eigen::MatrixXcd;
using RMatrix = Eigen::MatrixXd;
using RVector = Eigen::VectorXd;

// Half-integer spin quantum number, stored as 2F.
class Spin {
public:
    constexpr Spin() = default;
    explicit constexpr Spin(int twice_f) : twice_(twice_f) {}

    static Spin from_value(double f) {
        const double twice = 2.0 * f;
        const double rounded = std::round(twice);
        if (!(rounded >= 1.0) || std::abs(twice - rounded) > 1e-9)
            throw ValidationError("spin must be a positive half-integer, got " + std::to_string(f));
        return Spin(static_cast<int>(rounded));
    }

    constexpr int twice() const { return twice_; }
    constexpr double value() const { return 0.5 * twice_; }
    constexpr int dim() const { return twice_ + 1; }
    // m_F of basis index k; basis order is m = -F, ..., +F.
    constexpr double m(int k) const { return -value() + k; }

    friend constexpr bool operator==(Spin, Spin) = default;

private:
    int twice_ = 1;
};

// Spin matrices in the basis diagonalizing the quantization axis. The
// quantization axis is called z here; in the trapped-atom models it is the
// direction of the offset field B_0. Fx is the transverse component that the
// fictitious field couples to.
struct SpinAlgebra {
    Spin F;
    CMatrix Fx, Fy, Fz, Fplus, Fminus;

    int dim() const { return F.dim(); }
    // Fplus + Fminus, which is real in this basis.
    RMatrix ladder_sum() const { return (Fplus + Fminus).real(); }
};

inline SpinAlgebra spin_operators(Spin F) {
    require(F.twice() >= 1, "spin_operators: 2F must be a positive integer");
    const int d = F.dim();
    const double f = F.value();
    SpinAlgebra s{F, CMatrix::Zero(d, d), CMatrix::Zero(d, d), CMatrix::Zero(d, d),
                  CMatrix::Zero(d, d), CMatrix::Zero(d, d)};
    for (int k = 0; k < d; ++k) {
        const double m = F.m(k);
        s.Fz(k, k) = m;
        if (k + 1 < d) s.Fplus(k + 1, k) = std::sqrt(f * (f + 1) - m * (m + 1));
    }
    s.Fminus = s.Fplus.adjoint();
    s.Fx = 0.5 * (s.Fplus + s.Fminus);
    s.Fy = cplx(0.0, -0.5) * (s.Fplus - s.Fminus);
    return s;
}

inline SpinAlgebra spin_operators(double f) { return spin_operators(Spin::from_value(f)); }

// Ladder operators on the Fock states |0>, ..., |n_max - 1>.
struct ModeAlgebra {
    int n_max = 0;
    RMatrix a, adag, n;

    RMatrix position() const { return a + adag; } // a + a^dagger
    RMatrix identity() const { return RMatrix::Identity(n_max, n_max); }
};

inline ModeAlgebra mode_operators(int n_max) {
    require(n_max >= 2, "mode_operators: n_max must be >= 2");
    ModeAlgebra m{n_max, RMatrix::Zero(n_max, n_max), {}, {}};
    for (int k = 1; k < n_max; ++k) m.a(k - 1, k) = std::sqrt(static_cast<double>(k));
    m.adag = m.a.transpose();
    m.n = m.adag * m.a;
    return m;
}

// Kronecker product; the left factor is the slow index.
template <typename DA, typename DB>
auto tensor(const Eigen::MatrixBase<DA>& A, const Eigen::MatrixBase<DB>& B) {
    using Scalar = typename Eigen::ScalarBinaryOpTraits<typename DA::Scalar,
                                                        typename DB::Scalar>::ReturnType;
    using Out = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    const Eigen::Index ar = A.rows(), ac = A.cols(), br = B.rows(), bc = B.cols();
    Out K(ar * br, ac * bc);
    for (Eigen::Index i = 0; i < ar; ++i)
        for (Eigen::Index j = 0; j < ac; ++j)
            K.block(i * br, j * bc, br, bc) = (A(i, j) * B).template cast<Scalar>();
    return K;
}

template <typename DA, typename DB, typename DC>
auto tensor(const Eigen::MatrixBase<DA>& A, const Eigen::MatrixBase<DB>& B,
            const Eigen::MatrixBase<DC>& C) {
    return tensor(tensor(A, B), C);
}

// Eigen-decomposition of a Hermitian matrix. Energies ascend; states are the
// matching columns; labels[i] is the basis index with the largest |overlap|^2
// with eigenstate i.
template <typename Scalar>
struct EigenSystem {
    RVector energies;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> states;
    std::vector<int> labels;

    int size() const { return static_cast<int>(energies.size()); }
};

inline constexpr double hermiticity_tolerance = 1e-9;

template <typename Derived>
auto eigh(const Eigen::MatrixBase<Derived>& H) {
    using Scalar = typename Derived::Scalar;
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    if (H.rows() != H.cols()) throw ValidationError("eigh: matrix is not square");

    Mat A = H;
    const double norm = A.norm();
    const double asym = (A - A.adjoint()).norm();
    if (asym > hermiticity_tolerance * norm)
        throw ValidationError("eigh: matrix is not Hermitian (|H - H^+| = " +
                              std::to_string(asym) + ")");
    A = 0.5 * (A + A.adjoint()).eval();

    Eigen::SelfAdjointEigenSolver<Mat> solver(A);
    if (solver.info() != Eigen::Success) throw FitError("eigh: eigensolver failed");

    EigenSystem<Scalar> es{solver.eigenvalues(), solver.eigenvectors(), {}};
    es.labels.resize(static_cast<std::size_t>(es.size()));
    for (int i = 0; i < es.size(); ++i) {
        Eigen::Index best = 0;
        es.states.col(i).cwiseAbs2().maxCoeff(&best);
        es.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return es;
}

} // namespace dicke
