#include <gtest/gtest.h>

#include <random>

#include "dicke/qops.hpp"

using namespace dicke;

namespace {

double max_abs(const CMatrix& m) { return m.cwiseAbs().maxCoeff(); }

} // namespace

TEST(Spin, FromValueAcceptsHalfIntegers) {
    EXPECT_EQ(Spin::from_value(0.5).twice(), 1);
    EXPECT_EQ(Spin::from_value(4).twice(), 8);
    EXPECT_EQ(Spin::from_value(4).dim(), 9);
    EXPECT_DOUBLE_EQ(Spin::from_value(4).m(0), -4.0);
    EXPECT_DOUBLE_EQ(Spin::from_value(1.5).m(3), 1.5);
}

TEST(Spin, FromValueRejectsOthers) {
    EXPECT_THROW(Spin::from_value(0.0), ValidationError);
    EXPECT_THROW(Spin::from_value(-1.0), ValidationError);
    EXPECT_THROW(Spin::from_value(0.3), ValidationError);
}

TEST(SpinOperators, AngularMomentumAlgebra) {
    for (int twice = 1; twice <= 10; ++twice) {
        const auto s = spin_operators(Spin(twice));
        const double f = 0.5 * twice;
        const cplx I(0, 1);
        EXPECT_LT(max_abs(s.Fx * s.Fy - s.Fy * s.Fx - I * s.Fz), 1e-12) << "2F=" << twice;
        EXPECT_LT(max_abs(s.Fy * s.Fz - s.Fz * s.Fy - I * s.Fx), 1e-12);
        EXPECT_LT(max_abs(s.Fz * s.Fx - s.Fx * s.Fz - I * s.Fy), 1e-12);
        const CMatrix casimir = s.Fx * s.Fx + s.Fy * s.Fy + s.Fz * s.Fz;
        EXPECT_LT(max_abs(casimir - f * (f + 1) * CMatrix::Identity(s.dim(), s.dim())), 1e-12);
        EXPECT_LT(max_abs(s.Fx - s.Fx.adjoint()), 1e-15);
        EXPECT_LT(max_abs(s.Fy - s.Fy.adjoint()), 1e-15);
    }
}

TEST(SpinOperators, RaisingElementsForSpinOne) {
    const auto s = spin_operators(1.0);
    EXPECT_NEAR(s.Fplus(1, 0).real(), std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(s.Fplus(2, 1).real(), std::sqrt(2.0), 1e-15);
    EXPECT_EQ(s.Fplus(0, 1), cplx(0, 0));
    EXPECT_LT(max_abs(s.ladder_sum().cast<cplx>() - 2.0 * s.Fx), 1e-15);
}

TEST(ModeOperators, LadderStructure) {
    const auto m = mode_operators(6);
    for (int k = 0; k < 6; ++k) EXPECT_DOUBLE_EQ(m.n(k, k), k);
    const RMatrix comm = m.a * m.adag - m.adag * m.a;
    // Exact identity except in the last Fock state, where truncation bites.
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(comm(k, k), 1.0, 1e-14);
    EXPECT_NEAR(comm(5, 5), -5.0, 1e-14);
    EXPECT_NEAR(m.position()(1, 2), std::sqrt(2.0), 1e-15);
    EXPECT_THROW(mode_operators(1), ValidationError);
}

TEST(Tensor, LeftFactorIsSlowIndex) {
    RMatrix a = RMatrix::Zero(2, 2), b = RMatrix::Zero(3, 3);
    a(1, 0) = 1;
    b(2, 1) = 1;
    const RMatrix k = tensor(a, b);
    ASSERT_EQ(k.rows(), 6);
    EXPECT_EQ(k(1 * 3 + 2, 0 * 3 + 1), 1.0);
    EXPECT_EQ(k.sum(), 1.0);
    const RMatrix k3 = tensor(RMatrix::Identity(2, 2), a, b);
    EXPECT_EQ(k3.rows(), 12);
    EXPECT_EQ(k3(6 + 5, 6 + 1), 1.0);
}

TEST(Tensor, MixedScalarPromotesToComplex) {
    const auto s = spin_operators(0.5);
    const auto k = tensor(RMatrix::Identity(2, 2), s.Fy);
    static_assert(std::is_same_v<decltype(k)::Scalar, cplx>);
    EXPECT_EQ(k.rows(), 4);
}

TEST(Eigh, TwoByTwoClosedForm) {
    RMatrix h(2, 2);
    h << 1.0, 2.0, 2.0, -3.0;
    const auto es = eigh(h);
    const double mid = -1.0, r = std::sqrt(4.0 + 4.0);
    EXPECT_NEAR(es.energies[0], mid - r, 1e-12);
    EXPECT_NEAR(es.energies[1], mid + r, 1e-12);
    EXPECT_EQ(es.size(), 2);
}

TEST(Eigh, ComplexHermitianReconstructs) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n;
    CMatrix a(6, 6);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) a(i, j) = cplx(n(rng), n(rng));
    const CMatrix h = a + a.adjoint();
    const auto es = eigh(h);
    const CMatrix back = es.states * es.energies.cast<cplx>().asDiagonal() * es.states.adjoint();
    EXPECT_LT(max_abs(back - h), 1e-11);
    for (int k = 1; k < 6; ++k) EXPECT_LE(es.energies[k - 1], es.energies[k]);
}

TEST(Eigh, LabelsPickDominantBasisState) {
    RMatrix h = RMatrix::Zero(3, 3);
    h(0, 0) = 5;
    h(1, 1) = -1;
    h(2, 2) = 2;
    h(0, 2) = h(2, 0) = 0.01;
    const auto es = eigh(h);
    EXPECT_EQ(es.labels, (std::vector<int>{1, 2, 0}));
}

TEST(Eigh, RejectsBadInput) {
    RMatrix ns(2, 3);
    ns.setZero();
    EXPECT_THROW(eigh(ns), ValidationError);
    RMatrix asym(2, 2);
    asym << 1, 2, 0, 1;
    EXPECT_THROW(eigh(asym), ValidationError);
}
