#include <koopeig/spectral.hpp>

#include <gtest/gtest.h>

#include <unsupported/Eigen/MatrixFunctions>

#include <random>

using namespace koopeig;

namespace {

Mat random_matrix(Index r, Index c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    Mat M(r, c);
    for (Index i = 0; i < M.size(); ++i) M.data()[i] = nd(rng);
    return M;
}

EigenvalueSet closure_exact() { return EigenvalueSet({{-0.1, 0.0, true}, {-1.0, 0.0, true}, {-0.2, 0.0, false}}); }

}  // namespace

TEST(Ridge, MatchesNormalEquations) {
    const Mat A = random_matrix(6, 40, 1);
    const Mat Y = random_matrix(40, 3, 2);
    for (double lambda : {1e-8, 1e-3, 1.0}) {
        Mat G = A * A.transpose();
        G.diagonal().array() += lambda;
        const Mat oracle = G.ldlt().solve(A * Y);
        const Mat got = ridge_solve(A, Y, lambda);
        EXPECT_LT((got - oracle).norm() / oracle.norm(), 1e-8) << lambda;
    }
}

TEST(Ridge, ZeroWeightIsLeastSquares) {
    const Mat A = random_matrix(4, 30, 3);
    const Mat Y = random_matrix(30, 2, 4);
    const Mat oracle = (A * A.transpose()).ldlt().solve(A * Y);
    EXPECT_LT((ridge_solve(A, Y, 0.0) - oracle).norm() / oracle.norm(), 1e-8);
}

TEST(Ridge, RankDeficientWithoutRidgeThrows) {
    Mat A = random_matrix(3, 20, 5);
    A.row(2) = A.row(0);
    EXPECT_THROW(ridge_solve(A, random_matrix(20, 1, 6), 0.0), ConditioningError);
    EXPECT_NO_THROW(ridge_solve(A, random_matrix(20, 1, 6), 1e-6));
}

TEST(Ridge, NegativeWeightRejected) {
    EXPECT_THROW(RidgeProjector(Mat::Identity(2, 2), -1.0), ConfigError);
}

TEST(Ridge, FitRecoversLinearMap) {
    const Mat F = random_matrix(3, 50, 7);
    const Mat W = random_matrix(2, 3, 8);
    EXPECT_LT((ridge_fit(F, W * F, 1e-12) - W).norm(), 1e-8);
}

TEST(Eigenvalues, ImagFloorZeroesSmallImaginaryParts) {
    const EigenvalueSet e({{-0.5, 0.005}, {-0.3, 0.2}, {-1.0, -0.4}});
    EXPECT_EQ(e.pairs()[0].im, 0.0);
    EXPECT_EQ(e.pairs()[2].im, 0.4);
    EXPECT_EQ(e.n_phi(), 5);
    EXPECT_EQ(e.spectrum().size(), 5u);
}

TEST(Eigenvalues, FromFreeKeepsFixedFirst) {
    Vec free(4);
    free << -0.2, 0.0, -0.7, 1.5;
    const auto e = EigenvalueSet::from_free({{-0.1, 0.0}}, free);
    ASSERT_EQ(e.size(), 3u);
    EXPECT_TRUE(e.pairs()[0].fixed);
    EXPECT_FALSE(e.pairs()[1].fixed);
    EXPECT_EQ(e.free_vector(), free);
    EXPECT_THROW(EigenvalueSet::from_free({}, Vec::Zero(3)), ConfigError);
}

TEST(Eigenvalues, BlockExponentialMatchesMatrixExponential) {
    const EigenvalueSet e({{-0.3, 1.2}, {-0.7, 0.0}, {0.0, 0.8}});
    const Mat L = e.lambda_matrix();
    for (double t : {0.0, 0.37, 2.5}) {
        const Mat oracle = (L * t).exp();
        EXPECT_LT((lambda_exponential(e, t) - oracle).norm(), 1e-12);
    }
}

TEST(Basis, FundamentalBasisSolvesGenerator) {
    // E(t) = e^{Lambda t} * E(0) column-wise, with E(0) = [1, 1] per complex block
    const EigenvalueSet e({{-0.2, 0.9}, {-0.5, 0.0}});
    const Vec t = linspace(0.0, 3.0, 31);
    const Mat E = build_fundamental_basis(e, t);
    const Vec e0 = E.col(0);
    EXPECT_EQ(e0, Vec::Ones(3));
    for (Index k = 0; k < t.size(); ++k) EXPECT_LT((E.col(k) - lambda_exponential(e, t(k)) * e0).norm(), 1e-12);
}

TEST(Basis, ProjectionBasisReconstructsTrajectory) {
    const EigenvalueSet e({{-0.2, 0.9}, {-0.5, 0.0}});
    const Mat C = random_matrix(2, 3, 9);
    const Vec phi0 = random_matrix(3, 1, 10).col(0);
    const Vec t = linspace(0.0, 3.0, 25);
    const Mat B = build_projection_basis(C, e, t);
    const Mat x = reconstruct(C, e, phi0, t);
    EXPECT_LT((B.transpose() * phi0 - flatten_trajectory(x)).norm(), 1e-12);
    EXPECT_LT((project_trajectory(x, B, 0.0) - phi0).norm(), 1e-9);
}

TEST(Temporal, ExactClosureSpectrumFitsData) {
    const SimGrid g = SimGrid::square(-1.0, 1.0, 9);
    Vec ref(2);
    ref << -1.0, -1.0;
    const auto ens = simulate_ensemble(closure_system(), g, 0.2, 100, ref);
    const auto fit = fit_temporal(ens, ens.flattened(), select_subgrid(g), closure_exact(), 1e-10);
    EXPECT_LT(fit.j_temp, 1e-6);
    // Phi_0 of the reference trajectory is normalized to one
    EXPECT_LT((fit.phi0.col(ens.reference_index) - Vec::Ones(3)).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Temporal, WrongSpectrumCostsMore) {
    const SimGrid g = SimGrid::square(-1.0, 1.0, 9);
    Vec ref(2);
    ref << -1.0, -1.0;
    const auto ens = simulate_ensemble(closure_system(), g, 0.2, 100, ref);
    const auto flat = ens.flattened();
    const auto sub = select_subgrid(g);
    const double good = fit_temporal(ens, flat, sub, closure_exact(), 1e-6).j_temp;
    const double bad =
        fit_temporal(ens, flat, sub, EigenvalueSet({{-0.1, 0.0}, {-1.0, 0.0}, {-0.6, 0.0}}), 1e-6).j_temp;
    EXPECT_GT(bad, 10.0 * good);
}

TEST(Temporal, OverloadsAgree) {
    const SimGrid g = SimGrid::square(-1.0, 1.0, 5);
    const auto ens = simulate_ensemble(closure_system(), g, 0.2, 50, g.node(0));
    const auto fit = fit_temporal(ens, ens.flattened(), select_subgrid(g), closure_exact(), 1e-6);
    EXPECT_NEAR(temporal_cost(ens, select_subgrid(g), fit.modes.C_ref, closure_exact(), fit.phi0), fit.j_temp,
                1e-14);
}

TEST(Frequency, RecoversSineFrequency) {
    TrajectoryEnsemble ens;
    ens.dt = 0.01;
    ens.n_samples = 3000;
    ens.initial_conditions = Mat::Zero(2, 1);
    for (double phase : {0.1, 1.0}) {
        Mat s(1, ens.n_samples);
        for (Index k = 0; k < ens.n_samples; ++k) s(0, k) = std::sin(0.824 * 0.01 * static_cast<double>(k) + phase);
        ens.states.push_back(s);
    }
    EXPECT_NEAR(estimate_fundamental_frequency(ens), 0.824, 1e-4);
}

TEST(Frequency, NoCrossingsThrows) {
    TrajectoryEnsemble ens;
    ens.dt = 0.1;
    ens.n_samples = 100;
    ens.initial_conditions = Mat::Zero(1, 1);
    ens.states.push_back(Mat::Ones(1, 100));
    EXPECT_THROW(estimate_fundamental_frequency(ens), InsufficientDataError);
}
