#include <koopeig/control.hpp>

#include <gtest/gtest.h>

#include <cmath>
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

Mat spd(Index n, std::uint64_t seed) {
    const Mat M = random_matrix(n, n, seed);
    return M * M.transpose() + Mat::Identity(n, n);
}

/// x' = -x + u, one state, one input.
DynSystem first_order_plant() {
    DynSystem s;
    s.name = "lag";
    s.state_dim = 1;
    s.input_dim = 1;
    s.drift = [](const Vec& x) { return Vec(-x); };
    s.input_field = [](const Vec&) { return Mat::Ones(1, 1).eval(); };
    return s;
}

ClosedLoopConfig loop_config(double lo, double hi) {
    ClosedLoopConfig c;
    c.dt = 0.01;
    c.horizon = 20.0;
    c.actuator.time_constants = Vec::Constant(1, 0.05);
    c.actuator.lower = Vec::Constant(1, lo);
    c.actuator.upper = Vec::Constant(1, hi);
    c.setpoints = {{1.0, Vec::Constant(1, 0.8)}};
    return c;
}

}  // namespace

TEST(Care, ScalarClosedForm) {
    // -2P - P^2 + 1 = 0 gives P = sqrt(2) - 1
    Mat A(1, 1), B(1, 1), Q(1, 1), R(1, 1);
    A << -1.0;
    B << 1.0;
    Q << 1.0;
    R << 1.0;
    const auto s = solve_care({A, B, Q, R});
    EXPECT_NEAR(s.P(0, 0), std::sqrt(2.0) - 1.0, 1e-12);
    EXPECT_LE(s.residual, 1e-9);
}

TEST(Care, ResidualSmallOnRandomProblems) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Index n = 6, p = 2;
        const RiccatiProblem prob{random_matrix(n, n, seed), random_matrix(n, p, seed + 100), spd(n, seed + 200),
                                  spd(p, seed + 300)};
        const auto s = solve_care(prob);
        EXPECT_LE(care_residual(prob, s.P).norm(), 1e-9) << seed;
        EXPECT_LT(max_real_part(prob.A - prob.B * s.K), 0.0);
        EXPECT_LT((s.P - s.P.transpose()).norm(), 1e-12);
    }
}

TEST(Care, UnstabilizableRejected) {
    Mat A = Mat::Identity(2, 2);
    Mat B(2, 1);
    B << 1.0, 0.0;
    EXPECT_THROW(solve_care({A, B, Mat::Identity(2, 2), Mat::Identity(1, 1)}), SolverError);
    EXPECT_FALSE(is_stabilizable(A, B));
}

TEST(Care, IndefiniteRRejected) {
    EXPECT_THROW(solve_care({-Mat::Identity(1, 1), Mat::Ones(1, 1), Mat::Ones(1, 1), -Mat::Ones(1, 1)}), SolverError);
}

TEST(Lyapunov, ResidualVanishes) {
    Mat A = random_matrix(5, 5, 7);
    A.diagonal().array() -= 4.0;
    const Mat W = spd(5, 8);
    const Mat X = solve_lyapunov(A, W);
    EXPECT_LT((A.transpose() * X + X * A + W).norm(), 1e-10);
}

TEST(Kalman, DualOfLqr) {
    const Mat L = random_matrix(4, 4, 21) - 2.0 * Mat::Identity(4, 4);
    const Mat C = random_matrix(2, 4, 22);
    const Mat Qo = spd(4, 23), Ro = spd(2, 24);
    const Mat Lk = design_kalman(L, C, Qo, Ro);
    const Mat K = design_lqr(L.transpose(), C.transpose(), Qo, Ro);
    EXPECT_LE((Lk - K.transpose()).norm(), 1e-10);
    EXPECT_LT(max_real_part(L - Lk * C), 0.0);
}

TEST(Kalman, UndetectableRejected) {
    Mat L = Mat::Identity(2, 2);
    Mat C(1, 2);
    C << 1.0, 0.0;
    EXPECT_THROW(design_kalman(L, C, Mat::Identity(2, 2), Mat::Identity(1, 1)), DesignError);
}

TEST(Noise, CovarianceOfKnownResiduals) {
    const Index N = 20000;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0.0, 0.1);
    Mat x(1, N), phi = Mat::Zero(1, N);
    for (Index k = 0; k < N; ++k) x(0, k) = nd(rng);
    const auto nc = estimate_noise_covariances(x, Mat::Ones(1, 1), phi, phi, phi, 0.1);
    EXPECT_NEAR(nc.measurement(0, 0), 0.01, 5e-4);
    EXPECT_NEAR(nc.process(0, 0), 0.0, 1e-15);
    EXPECT_THROW(estimate_noise_covariances(x.leftCols(5), Mat::Ones(1, 1), phi.leftCols(5), phi.leftCols(5),
                                            phi.leftCols(5), 0.1),
                 InsufficientDataError);
}

TEST(Noise, PsdFloorClipsNegativeEigenvalues) {
    Mat S(2, 2);
    S << 1.0, 0.0, 0.0, -0.5;
    const Mat P = psd_floor(S);
    EXPECT_NEAR(P(1, 1), 0.0, 1e-15);
    EXPECT_NEAR(P(0, 0), 1.0, 1e-15);
}

TEST(Allocation, SteadyStateSatisfiesBlockEquations) {
    Mat lambda(2, 2), gamma(2, 1), C(2, 2);
    lambda << -1.0, 0.5, 0.0, -2.0;
    gamma << 1.0, 0.3;
    C << 1.0, 0.0, 0.4, 1.0;
    Mat S(1, 2);
    S << 1.0, 0.0;
    Vec xr(2);
    xr << 0.7, 0.0;
    const auto ss = steady_state_targets(lambda, gamma, C, xr, S);
    EXPECT_LT((lambda * ss.phi + gamma * ss.u).norm(), 1e-12);
    EXPECT_NEAR((C * ss.phi)(0), 0.7, 1e-12);
}

TEST(Allocation, NonSquareTrackingRejected) {
    EXPECT_THROW(steady_state_targets(-Mat::Identity(2, 2), Mat::Ones(2, 1), Mat::Identity(2, 2), Vec::Ones(2)),
                 AllocationError);
}

TEST(Reduce, DropsConservativeBlocksIntoOffset) {
    const EigenvalueSet eigs({{0.0, 0.0}, {-0.5, 1.0}});
    Mat C(2, 3);
    C << 0.2, 1.0, 0.0, -0.1, 0.0, 1.0;
    const auto m = reduce_conservative(eigs, C, constant_input_dynamics(Mat::Ones(3, 1)));
    EXPECT_EQ(m.n(), 2);
    EXPECT_EQ(m.offset, C.col(0));
    EXPECT_EQ(m.gamma.gamma(Vec::Zero(2)).rows(), 2);
    EXPECT_EQ(m.lambda, eigs.lambda_matrix().bottomRightCorner(2, 2));
}

TEST(Augment, ActuatorLagBlocks) {
    Mat A, B;
    augmented_system(-Mat::Identity(2, 2), Mat::Ones(2, 1), Vec::Constant(1, 0.5), A, B);
    EXPECT_EQ(A.rows(), 3);
    EXPECT_DOUBLE_EQ(A(2, 2), -2.0);
    EXPECT_DOUBLE_EQ(B(2, 0), 2.0);
    EXPECT_DOUBLE_EQ(A(0, 2), 1.0);
}

TEST(Metrics, FirstOrderStepResponse) {
    const Vec t = linspace(0.0, 10.0, 1001);
    Vec y(t.size());
    for (Index k = 0; k < t.size(); ++k) y(k) = t(k) < 1.0 ? 0.0 : 1.0 - std::exp(-(t(k) - 1.0));
    const auto m = step_metrics(t, y, 1.0, 0.0, 1.0);
    EXPECT_NEAR(m.settling_time, std::log(50.0), 0.011);
    EXPECT_NEAR(m.overshoot, 0.0, 1e-12);
    EXPECT_TRUE(m.settled);
}

TEST(Metrics, OvershootOfUnderdampedResponse) {
    const Vec t = linspace(0.0, 30.0, 3001);
    const double z = 0.3, wn = 1.0, wd = wn * std::sqrt(1 - z * z);
    Vec y(t.size());
    for (Index k = 0; k < t.size(); ++k)
        y(k) = 1.0 - std::exp(-z * wn * t(k)) * (std::cos(wd * t(k)) + z / std::sqrt(1 - z * z) * std::sin(wd * t(k)));
    const auto m = step_metrics(t, y, 0.0, 0.0, 1.0);
    EXPECT_NEAR(m.overshoot, 100.0 * std::exp(-z * M_PI / std::sqrt(1 - z * z)), 0.05);
}

TEST(Pi, IntegralActionRemovesSteadyStateError) {
    const DynSystem plant = first_order_plant();
    PiController pi{Vec::Constant(1, 2.0), Vec::Constant(1, 2.0), Vec::Zero(1)};
    const auto run = simulate_pi(plant, pi, loop_config(-5.0, 5.0), Vec::Zero(1));
    const auto m = step_metrics(run.t, Vec(run.x.row(0).transpose()), 1.0, 0.0, 0.8);
    EXPECT_LT(m.steady_state_error, 1e-6);
    EXPECT_TRUE(m.settled);
}

TEST(AntiWindup, ClampingReducesOvershoot) {
    const DynSystem plant = first_order_plant();
    PiController pi{Vec::Constant(1, 1.0), Vec::Constant(1, 3.0), Vec::Zero(1)};
    auto with = loop_config(-1.0, 1.0);
    auto without = with;
    without.anti_windup = false;
    const auto a = simulate_pi(plant, pi, with, Vec::Zero(1));
    const auto b = simulate_pi(plant, pi, without, Vec::Zero(1));
    const auto ma = step_metrics(a.t, Vec(a.x.row(0).transpose()), 1.0, 0.0, 0.8);
    const auto mb = step_metrics(b.t, Vec(b.x.row(0).transpose()), 1.0, 0.0, 0.8);
    EXPECT_LT(ma.overshoot, mb.overshoot);
    EXPECT_LE((a.u_comm.array().abs() - 1.0).maxCoeff(), 1e-15);
}

TEST(Lqg, TracksLinearPlantWithIntegralAction) {
    // identity lifting of x' = -x + u: Lambda = -1, C = 1, Gamma = 1
    const DynSystem plant = first_order_plant();
    LqgController ctl;
    ctl.model.lambda = -Mat::Identity(1, 1);
    ctl.model.C = Mat::Identity(1, 1);
    ctl.model.offset = Vec::Zero(1);
    ctl.model.gamma = constant_input_dynamics(Mat::Ones(1, 1));
    ctl.L = design_kalman(ctl.model.lambda, ctl.model.C, 0.1 * Mat::Identity(1, 1), 0.01 * Mat::Identity(1, 1));
    SigmoidSurrogate basis;
    basis.w1 = Mat::Ones(1, 2);
    basis.b1 = Vec::Zero(2);
    basis.x_center = Vec::Zero(1);
    basis.x_scale = Vec::Ones(1);
    ActuatorConfig act{Vec::Constant(1, 0.05), Vec::Constant(1, -5.0), Vec::Constant(1, 5.0)};
    LqrWeights w{10.0 * Mat::Identity(1, 1), Mat::Identity(1, 1), Mat::Identity(1, 1), 0.0};
    std::vector<Vec> points{Vec::Constant(1, -1.0), Vec::Constant(1, 0.0), Vec::Constant(1, 1.0)};
    ctl.schedule = design_lqr_grid(ctl.model, act, w, points, basis);
    EXPECT_LT(ctl.schedule.fit_residual, 1e-6);
    for (double re : ctl.schedule.max_closed_loop_re) EXPECT_LT(re, 0.0);
    auto cfg = loop_config(-5.0, 5.0);
    cfg.K_i = Mat::Constant(1, 1, -2.0);
    const auto run = simulate_closed_loop(plant, ctl, cfg, Vec::Zero(1), Vec::Zero(1), Vec::Zero(1));
    const auto m = step_metrics(run.t, Vec(run.x.row(0).transpose()), 1.0, 0.0, 0.8);
    EXPECT_LT(m.steady_state_error, 1e-4);
    EXPECT_TRUE(m.settled);
}

TEST(Schedule, JumpIsZeroForConstantGains) {
    GainSchedule gs;
    gs.basis.w1 = Mat::Ones(2, 3);
    gs.basis.b1 = Vec::Zero(3);
    gs.basis.x_center = Vec::Zero(2);
    gs.basis.x_scale = Vec::Ones(2);
    gs.W_K = Mat::Zero(2, 3);
    gs.B_K = Vec::Ones(2);
    gs.rows = 1;
    gs.cols = 2;
    EXPECT_EQ(schedule_jump(gs, SimGrid::square(-1.0, 1.0, 5)), 0.0);
}
