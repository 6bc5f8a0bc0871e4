#include <koopeig/spatial.hpp>

#include <gtest/gtest.h>

#include <cmath>

using namespace koopeig;

namespace {

Mat sample(const SimGrid& g, const std::function<Vec(const Vec&)>& f, Index rows) {
    Mat out(rows, g.size());
    for (Index k = 0; k < g.size(); ++k) out.col(k) = f(g.node(k));
    return out;
}

Vec closure_eigenfunctions(const Vec& x) {
    Vec p(3);
    p << x(0), x(0) * x(0), x(1) - 1.25 * x(0) * x(0);
    return p;
}

}  // namespace

TEST(Gradient, ExactOnQuadraticsEverywhere) {
    const SimGrid g({{-1.0, 2.0}, {-0.5, 1.5}}, {11, 9});
    const auto f = [](const Vec& x) {
        Vec v(1);
        v << 3.0 * x(0) * x(0) - 2.0 * x(0) * x(1) + 0.5 * x(1) * x(1) + x(0) - 4.0;
        return v;
    };
    const Mat vals = sample(g, f, 1);
    const auto grad = gradient_central_diff(g, vals);
    for (Index k = 0; k < g.size(); ++k) {
        const Vec x = g.node(k);
        EXPECT_NEAR(grad[0](0, k), 6.0 * x(0) - 2.0 * x(1) + 1.0, 1e-10);
        EXPECT_NEAR(grad[1](0, k), -2.0 * x(0) + x(1), 1e-10);
    }
}

TEST(Gradient, TwoPointAxisFallsBackToFirstOrder) {
    const SimGrid g({{0.0, 1.0}, {0.0, 1.0}}, {2, 3});
    Mat vals(1, g.size());
    for (Index k = 0; k < g.size(); ++k) vals(0, k) = 2.0 * g.node(k)(0);
    const auto grad = gradient_central_diff(g, vals);
    for (Index k = 0; k < g.size(); ++k) EXPECT_NEAR(grad[0](0, k), 2.0, 1e-12);
}

TEST(Spline, NotAKnotReproducesBicubics) {
    const SimGrid coarse = SimGrid::square(-1.0, 1.0, 7);
    const SimGrid fine = SimGrid::square(-1.0, 1.0, 23);
    const auto f = [](const Vec& x) {
        Vec v(2);
        v << std::pow(x(0), 3) * x(1) - x(1) * x(1), std::pow(x(0) * x(1), 3);
        return v;
    };
    const EigenfunctionField field = interpolate_field(coarse, sample(coarse, f, 2), fine);
    const Mat truth = sample(fine, f, 2);
    EXPECT_LT((field.values - truth).cwiseAbs().maxCoeff(), 1e-10);
    for (auto m : field.mask) EXPECT_EQ(m, 0);
}

TEST(Spline, SmoothingKeepsLinearFunctions) {
    const SimGrid coarse = SimGrid::square(0.0, 1.0, 9);
    const SimGrid fine = SimGrid::square(0.0, 1.0, 17);
    const auto f = [](const Vec& x) { return Vec::Constant(1, 2.0 * x(0) - x(1) + 0.3); };
    const EigenfunctionField field = interpolate_field(coarse, sample(coarse, f, 1), fine, 0.7);
    EXPECT_LT((field.values - sample(fine, f, 1)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Spline, TargetsOutsideSamplesAreMasked) {
    const SimGrid coarse = SimGrid::square(0.0, 1.0, 5);
    const SimGrid wide = SimGrid::square(-1.0, 2.0, 13);
    const auto f = [](const Vec& x) { return Vec::Constant(1, x(0)); };
    const EigenfunctionField field = interpolate_field(coarse, sample(coarse, f, 1), wide);
    for (Index k = 0; k < wide.size(); ++k) EXPECT_EQ(field.masked(k), !coarse.contains(wide.node(k)));
}

TEST(Spline, InvalidSmoothingRejected) {
    EXPECT_THROW(spline_operator(linspace(0, 1, 5), linspace(0, 1, 3), 0.0), ConfigError);
    EXPECT_THROW(spline_operator(linspace(0, 1, 5), linspace(0, 1, 3), 1.5), ConfigError);
}

TEST(Kpde, AnalyticClosureEigenfunctionsHaveZeroResidual) {
    const SimGrid g = SimGrid::square(-1.0, 1.0, 31);
    EigenfunctionField field;
    field.grid = g;
    field.values = sample(g, closure_eigenfunctions, 3);
    gradient_central_diff(field);
    const EigenvalueSet eigs({{-0.1, 0.0}, {-0.2, 0.0}, {-1.0, 0.0}});
    const Mat r = kpde_residual(field, eigs, drift_at_nodes(closure_system(), g));
    EXPECT_LT(r.cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT(kpde_cost(r, kpde_active_nodes(field)), 1e-20);
}

TEST(Kpde, WrongEigenvalueLeavesResidual) {
    const SimGrid g = SimGrid::square(-1.0, 1.0, 21);
    EigenfunctionField field;
    field.grid = g;
    field.values = sample(g, closure_eigenfunctions, 3);
    gradient_central_diff(field);
    const EigenvalueSet eigs({{-0.1, 0.0}, {-0.3, 0.0}, {-1.0, 0.0}});
    const Mat r = kpde_residual(field, eigs, drift_at_nodes(closure_system(), g));
    EXPECT_GT(kpde_cost(r, kpde_active_nodes(field)), 1e-4);
}

TEST(Kpde, RingExclusionAndClamp) {
    const SimGrid g = SimGrid::square(0.0, 1.0, 5);
    EigenfunctionField field;
    field.grid = g;
    field.values = Mat::Zero(1, g.size());
    const auto active = kpde_active_nodes(field, true);
    EXPECT_EQ(static_cast<Index>(std::count(active.begin(), active.end(), 1)), 9);
    Mat r = Mat::Constant(1, g.size(), 3.0);
    EXPECT_DOUBLE_EQ(kpde_cost(r, active), 9.0);
    EXPECT_DOUBLE_EQ(kpde_cost(r, active, 1.0), 1.0);
}

TEST(Kpde, NeedsGradient) {
    EigenfunctionField field;
    field.grid = SimGrid::square(0.0, 1.0, 3);
    field.values = Mat::Zero(1, 9);
    EXPECT_THROW(kpde_residual(field, EigenvalueSet({{-1.0, 0.0}}), Mat::Zero(2, 9)), StateError);
}

TEST(PointEval, BilinearIsExactOnBilinearData) {
    const SimGrid g({{0.0, 2.0}, {-1.0, 1.0}}, {5, 9});
    const auto f = [](const Vec& x) { return Vec::Constant(1, 1.0 + x(0) - 2.0 * x(1) + 0.5 * x(0) * x(1)); };
    const Mat vals = sample(g, f, 1);
    Vec x(2);
    x << 1.23, 0.37;
    bool outside = true;
    EXPECT_NEAR(sample_nodes(g, vals, x, &outside)(0), f(x)(0), 1e-12);
    EXPECT_FALSE(outside);
    x << 3.0, 0.0;
    sample_nodes(g, vals, x, &outside);
    EXPECT_TRUE(outside);
}

TEST(Separatrix, BimodalIndicatorSplitsAtMidpoint) {
    const SimGrid g = SimGrid::square(-1.0, 1.0, 41);
    Vec ind(g.size());
    for (Index k = 0; k < g.size(); ++k) {
        const Vec x = g.node(k);
        ind(k) = 0.2 + 0.8 * (std::tanh(15.0 * (x(0) + 0.3 * x(1))) > 0 ? 1.0 : 0.0) +
                 0.01 * std::tanh(15.0 * (x(0) + 0.3 * x(1)));
    }
    const auto est = separatrix_mask(ind, 0.1);
    ASSERT_TRUE(est.bimodal);
    EXPECT_NEAR(est.midpoint, 0.6, 0.05);
    const auto labels = classify_basins(ind, est);
    for (Index k = 0; k < g.size(); ++k) {
        const Vec x = g.node(k);
        if (std::abs(x(0) + 0.3 * x(1)) > 1e-9) {
            EXPECT_EQ(labels[static_cast<std::size_t>(k)], x(0) + 0.3 * x(1) > 0);
        }
    }
}

TEST(Separatrix, UnimodalIndicatorGivesEmptyMask) {
    std::vector<std::string> warnings;
    log::set_warning_handler([&](const std::string& m) { warnings.push_back(m); });
    const Vec ind = linspace(0.0, 1.0, 400).array().square();
    const auto est = separatrix_mask(ind, 0.1);
    log::set_warning_handler([](const std::string& m) { std::cerr << "warning: " << m << '\n'; });
    EXPECT_FALSE(est.bimodal);
    for (auto m : est.mask) EXPECT_EQ(m, 0);
    EXPECT_FALSE(warnings.empty());
}

TEST(Basins, DuffingOracleLabelsKnownPoints) {
    Mat pts(2, 4);
    pts << 1.0, -1.0, 0.3, -0.3, 0.0, 0.0, 0.1, -0.1;
    const auto lab = basin_oracle(duffing(), pts, 40.0);
    EXPECT_EQ(lab[0], 1);
    EXPECT_EQ(lab[1], 0);
    EXPECT_EQ(lab[2], 1);
    EXPECT_EQ(lab[3], 0);
}

TEST(Basins, SeparatrixDistanceOnALine) {
    Mat fine(1, 11);
    std::vector<std::uint8_t> fl(11);
    for (Index j = 0; j < 11; ++j) {
        fine(0, j) = 0.1 * static_cast<double>(j);
        fl[static_cast<std::size_t>(j)] = j >= 5;
    }
    Mat pts(1, 2);
    pts << 0.1, 0.9;
    const Vec d = separatrix_distance(pts, {0, 1}, fine, fl);
    EXPECT_NEAR(d(0), 0.4, 1e-12);
    EXPECT_NEAR(d(1), 0.5, 1e-12);
}

TEST(Refine, ProjectedFieldMatchesAnalyticEigenfunctions) {
    const SimGrid g = SimGrid::square(-1.0, 1.0, 9);
    Vec ref(2);
    ref << -1.0, -1.0;
    const EigenvalueSet eigs({{-0.1, 0.0}, {-0.2, 0.0}, {-1.0, 0.0}});
    const auto ens = simulate_ensemble(closure_system(), g, 0.05, 400, ref);
    const auto fit = fit_temporal(ens, ens.flattened(), select_subgrid(g), eigs, 1e-10);
    RefinementConfig rc;
    rc.sample_grid = SimGrid::square(-1.0, 1.0, 13);
    rc.interp_grid = SimGrid::square(-1.0, 1.0, 25);
    rc.dt = 0.05;
    rc.n_samples = 400;
    rc.ridge = 1e-10;
    const auto field = refine_field(closure_system(), eigs, fit.modes.C_ref, rc);
    // normalized at the reference corner: x1 -> -x1, x1^2 -> x1^2, phi3 / phi3(ref)
    for (Index k = 0; k < rc.interp_grid.size(); ++k) {
        const Vec x = rc.interp_grid.node(k);
        EXPECT_NEAR(field.values(0, k), -x(0), 1e-3);
        EXPECT_NEAR(field.values(1, k), x(0) * x(0), 1e-3);
        EXPECT_NEAR(field.values(2, k), (x(1) - 1.25 * x(0) * x(0)) / -2.25, 1e-3);
    }
}
