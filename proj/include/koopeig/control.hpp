#pragma once

#include <koopeig/common.hpp>
#include <koopeig/inputdyn.hpp>
#include <koopeig/spectral.hpp>
#include <koopeig/systems.hpp>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace koopeig {

using CMat = Eigen::MatrixXcd;
using CVec = Eigen::VectorXcd;

// ============================================================================
// Lyapunov and Riccati solvers
// ============================================================================

/// Solves A^T X + X A + W = 0 by complex Schur reduction (Bartels-Stewart).
/// Requires lambda_i(A) + conj(lambda_j(A)) != 0.
inline Mat solve_lyapunov(const Mat& A, const Mat& W) {
    const Index n = A.rows();
    if (A.cols() != n || W.rows() != n || W.cols() != n) throw ConfigError("Lyapunov: shape mismatch");
    Eigen::ComplexSchur<CMat> schur(A.cast<std::complex<double>>());
    const CMat& T = schur.matrixT();
    const CMat& U = schur.matrixU();
    // T^H Y + Y T = C with Y = U^H X U
    const CMat C = -(U.adjoint() * W.cast<std::complex<double>>() * U);
    CMat Y = CMat::Zero(n, n);
    for (Index j = 0; j < n; ++j) {
        for (Index i = 0; i < n; ++i) {
            std::complex<double> acc = C(i, j);
            for (Index k = 0; k < i; ++k) acc -= std::conj(T(k, i)) * Y(k, j);
            for (Index k = 0; k < j; ++k) acc -= Y(i, k) * T(k, j);
            const std::complex<double> den = std::conj(T(i, i)) + T(j, j);
            if (std::abs(den) < 1e-14 * (1.0 + std::abs(T(i, i)) + std::abs(T(j, j))))
                throw SolverError("Lyapunov equation is singular");
            Y(i, j) = acc / den;
        }
    }
    Mat X = (U * Y * U.adjoint()).real();
    return 0.5 * (X + X.transpose());
}

/// Eigenvalues of a real square matrix.
inline CVec eigenvalues_of(const Mat& A) { return Eigen::EigenSolver<Mat>(A, false).eigenvalues(); }

inline double max_real_part(const Mat& A) {
    if (A.size() == 0) return -std::numeric_limits<double>::infinity();
    return eigenvalues_of(A).real().maxCoeff();
}

/// Symmetric PSD square root.
inline Mat psd_sqrt(const Mat& Q) {
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (Q + Q.transpose()));
    const Vec d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

/// Projects a symmetric matrix onto the PSD cone (eigenvalue floor 0).
inline Mat psd_floor(const Mat& S) {
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (S + S.transpose()));
    const Vec d = es.eigenvalues().cwiseMax(0.0);
    Mat out = es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
    return 0.5 * (out + out.transpose());
}

/// PBH test: every eigenvalue of A with Re >= -margin must be controllable
/// through B (rank [A - lambda I, B] = n).
inline bool is_stabilizable(const Mat& A, const Mat& B, double margin = 1e-10) {
    const Index n = A.rows();
    const CVec ev = eigenvalues_of(A);
    for (Index i = 0; i < ev.size(); ++i) {
        if (ev(i).real() < -margin) continue;
        CMat M(n, n + B.cols());
        M.leftCols(n) = A.cast<std::complex<double>>() - ev(i) * CMat::Identity(n, n);
        M.rightCols(B.cols()) = B.cast<std::complex<double>>();
        Eigen::JacobiSVD<CMat> svd(M);
        const double smax = svd.singularValues()(0);
        const double smin = svd.singularValues()(n - 1);
        if (smin <= 1e-9 * std::max(1.0, smax)) return false;
    }
    return true;
}

inline bool is_detectable(const Mat& A, const Mat& C, double margin = 1e-10) {
    return is_stabilizable(A.transpose(), C.transpose(), margin);
}

struct RiccatiProblem {
    Mat A;
    Mat B;
    Mat Q;
    Mat R;
};

struct CareSolution {
    Mat P;
    Mat K;  // R^{-1} B^T P
    double residual = 0.0;           // Frobenius norm of the Riccati residual
    double relative_residual = 0.0;  // residual / max(||Q||_F, 1) when Q = 0, else / ||Q||_F
    double max_closed_loop_re = 0.0;
};

inline Mat care_residual(const RiccatiProblem& p, const Mat& P) {
    const Mat Rinv_Bt = p.R.ldlt().solve(p.B.transpose());
    return p.A.transpose() * P + P * p.A - P * p.B * Rinv_Bt * P + p.Q;
}

namespace detail {

/// Swaps diagonal entries k and k+1 of the upper-triangular T with a unitary
/// similarity, accumulating into U.
inline void swap_schur(CMat& T, CMat& U, Index k) {
    const std::complex<double> t11 = T(k, k), t22 = T(k + 1, k + 1), t12 = T(k, k + 1);
    CVec v(2);
    v << t12, t22 - t11;
    const double nv = v.norm();
    if (nv == 0.0) return;
    v /= nv;
    CMat Z(2, 2);
    Z << v(0), -std::conj(v(1)), v(1), std::conj(v(0));
    T.middleRows(k, 2) = Z.adjoint() * T.middleRows(k, 2);
    T.middleCols(k, 2) = T.middleCols(k, 2) * Z;
    U.middleCols(k, 2) = U.middleCols(k, 2) * Z;
    T(k + 1, k) = 0.0;
    T(k, k) = t22;
    T(k + 1, k + 1) = t11;
}

}  // namespace detail

/// Stabilizing solution of A^T P + P A - P B R^{-1} B^T P + Q = 0 from the
/// ordered complex Schur form of the Hamiltonian, polished by Newton-Kleinman.
inline CareSolution solve_care(const RiccatiProblem& p, double tol = 1e-9, int newton_steps = 8) {
    const Index n = p.A.rows();
    if (p.A.cols() != n || p.B.rows() != n || p.Q.rows() != n || p.Q.cols() != n || p.R.rows() != p.B.cols() ||
        p.R.cols() != p.B.cols())
        throw ConfigError("Riccati problem has inconsistent shapes");
    if (!p.A.allFinite() || !p.B.allFinite() || !p.Q.allFinite() || !p.R.allFinite())
        throw SolverError("Riccati problem has non-finite data");
    Eigen::LDLT<Mat> rl(p.R);
    if (rl.info() != Eigen::Success || !rl.isPositive() || rl.vectorD().minCoeff() <= 0.0)
        throw SolverError("R must be symmetric positive definite");
    if (!is_stabilizable(p.A, p.B)) throw SolverError("(A, B) is not stabilizable");
    if (!is_detectable(p.A, psd_sqrt(p.Q))) throw SolverError("(A, Q^(1/2)) is not detectable");

    const Mat G = p.B * rl.solve(p.B.transpose());
    Mat H(2 * n, 2 * n);
    H << p.A, -G, -p.Q, -p.A.transpose();
    Eigen::ComplexSchur<CMat> schur(H.cast<std::complex<double>>());
    if (schur.info() != Eigen::Success) throw SolverError("Schur decomposition of the Hamiltonian failed");
    CMat T = schur.matrixT();
    CMat U = schur.matrixU();
    Index placed = 0;
    for (Index i = 0; i < 2 * n; ++i) {
        if (T(i, i).real() < 0.0) {
            for (Index k = i - 1; k >= placed; --k) detail::swap_schur(T, U, k);
            ++placed;
        }
    }
    if (placed != n) throw SolverError("Hamiltonian has eigenvalues on the imaginary axis");
    const CMat U11 = U.topLeftCorner(n, n), U21 = U.bottomLeftCorner(n, n);
    Eigen::FullPivLU<CMat> lu(U11);
    if (!lu.isInvertible()) throw SolverError("stable invariant subspace is not a graph");
    Mat P = (U21 * lu.inverse()).real();
    P = 0.5 * (P + P.transpose());

    double res = care_residual(p, P).norm();
    for (int it = 0; it < newton_steps; ++it) {
        const Mat K = rl.solve(p.B.transpose() * P);
        const Mat Ak = p.A - p.B * K;
        if (max_real_part(Ak) >= 0.0) break;
        Mat Pn;
        try {
            Pn = solve_lyapunov(Ak, p.Q + K.transpose() * p.R * K);
        } catch (const SolverError&) {
            break;
        }
        const double rn = care_residual(p, Pn).norm();
        if (!(rn < res)) break;
        P = Pn;
        res = rn;
    }

    CareSolution s;
    s.P = P;
    s.K = rl.solve(p.B.transpose() * P);
    s.residual = res;
    const double qn = p.Q.norm();
    s.relative_residual = res / (qn > 0.0 ? qn : 1.0);
    s.max_closed_loop_re = max_real_part(p.A - p.B * s.K);
    if (!(s.relative_residual <= tol) && res > tol)
        throw SolverError("Riccati residual above tolerance", s.relative_residual);
    if (!(s.max_closed_loop_re < 0.0)) throw SolverError("Riccati solution is not stabilizing", res);
    return s;
}

inline Mat design_lqr(const Mat& A, const Mat& B, const Mat& Q, const Mat& R) { return solve_care({A, B, Q, R}).K; }

/// Steady-state Kalman gain L = P C^T R_o^{-1} from the dual Riccati equation.
inline Mat design_kalman(const Mat& lambda, const Mat& C, const Mat& Qo, const Mat& Ro) {
    if (!is_detectable(lambda, C)) throw DesignError("(Lambda, C) is not detectable");
    try {
        return solve_care({lambda.transpose(), C.transpose(), Qo, Ro}).K.transpose();
    } catch (const SolverError& e) {
        throw DesignError(std::string("Kalman design failed: ") + e.what());
    }
}

// ============================================================================
// Noise covariances
// ============================================================================

inline Mat sample_covariance(const Mat& X) {
    const Mat c = X.colwise() - X.rowwise().mean();
    return c * c.transpose() / static_cast<double>(std::max<Index>(1, X.cols() - 1));
}

struct NoiseCovariances {
    Mat measurement;  // Sigma_x^2
    Mat process;      // Sigma_p^2
};

/// Sigma_x^2 = Cov(x - C Phi_pred) and Sigma_p^2 = Cov(dPhi_filt/dt - Phi'_pred)
/// with the central difference (Phi_{k+1} - Phi_{k-1}) / (2 dt), or / dt when
/// `literal_dt` is set. All series are column-aligned in time.
inline NoiseCovariances estimate_noise_covariances(const Mat& x_measured, const Mat& C, const Mat& phi_predicted,
                                                   const Mat& phi_filtered, const Mat& phi_dot_predicted, double dt,
                                                   bool literal_dt = false) {
    const Index N = x_measured.cols();
    if (N < 10) throw InsufficientDataError("noise covariance estimation needs at least 10 samples");
    if (phi_predicted.cols() != N || phi_filtered.cols() != N || phi_dot_predicted.cols() != N)
        throw ConfigError("noise covariance series differ in length");
    NoiseCovariances out;
    out.measurement = psd_floor(sample_covariance(x_measured - C * phi_predicted));
    const double denom = literal_dt ? dt : 2.0 * dt;
    Mat d(phi_filtered.rows(), N - 2);
    for (Index k = 1; k < N - 1; ++k)
        d.col(k - 1) = (phi_filtered.col(k + 1) - phi_filtered.col(k - 1)) / denom - phi_dot_predicted.col(k);
    out.process = psd_floor(sample_covariance(d));
    return out;
}

// ============================================================================
// Control model and gain schedule
// ============================================================================

/// Eigenfunction-space plant model used for control: x = offset + C Phi,
/// Phi' = Lambda Phi + Gamma(x) u. Conservative modes are folded into offset.
struct ControlModel {
    Mat lambda;
    Mat C;
    Vec offset;
    InputDynamics gamma;

    Index n() const { return lambda.rows(); }
    Index m() const { return C.rows(); }

    Vec state(const Vec& phi) const { return offset + C * phi; }
};

/// Drops blocks with lambda = 0 whose input coupling vanishes, folding their
/// constant contribution (mode column times Phi value) into the offset.
inline ControlModel reduce_conservative(const EigenvalueSet& eigs, const Mat& C_ref, const InputDynamics& gamma,
                                        const Vec& conservative_values = Vec()) {
    std::vector<Index> keep, drop;
    for (std::size_t i = 0; i < eigs.size(); ++i) {
        const auto& p = eigs.pairs()[i];
        const Index o = eigs.block_offset(i);
        if (p.re == 0.0 && p.im == 0.0)
            drop.push_back(o);
        else
            for (Index b = 0; b < eigs.block_size(i); ++b) keep.push_back(o + b);
    }
    ControlModel m;
    const Mat L = eigs.lambda_matrix();
    m.lambda.resize(static_cast<Index>(keep.size()), static_cast<Index>(keep.size()));
    m.C.resize(C_ref.rows(), static_cast<Index>(keep.size()));
    for (std::size_t a = 0; a < keep.size(); ++a) {
        m.C.col(static_cast<Index>(a)) = C_ref.col(keep[a]);
        for (std::size_t b = 0; b < keep.size(); ++b)
            m.lambda(static_cast<Index>(a), static_cast<Index>(b)) = L(keep[a], keep[b]);
    }
    m.offset = Vec::Zero(C_ref.rows());
    for (std::size_t d = 0; d < drop.size(); ++d) {
        const double v = conservative_values.size() > static_cast<Index>(d) ? conservative_values(static_cast<Index>(d)) : 1.0;
        m.offset += v * C_ref.col(drop[d]);
    }
    auto g = gamma;
    m.gamma.hull_lo = gamma.hull_lo;
    m.gamma.hull_hi = gamma.hull_hi;
    m.gamma.gamma = [g, keep](const Vec& x) {
        const Mat full = g.gamma(x);
        Mat out(static_cast<Index>(keep.size()), full.cols());
        for (std::size_t a = 0; a < keep.size(); ++a) out.row(static_cast<Index>(a)) = full.row(keep[a]);
        return out;
    };
    return m;
}

struct ActuatorConfig {
    Vec time_constants;  // per input channel, > 0
    Vec lower;           // limiter bounds on the commanded input
    Vec upper;

    void validate(Index p) const {
        if (time_constants.size() != p || lower.size() != p || upper.size() != p)
            throw ConfigError("actuator settings must have one entry per input");
        if ((time_constants.array() <= 0.0).any()) throw ConfigError("actuator time constants must be positive");
        if ((lower.array() >= upper.array()).any()) throw ConfigError("actuator limits need lo < hi");
    }
};

/// Augmented plant [Phi; u] with first-order actuator lags.
inline void augmented_system(const Mat& lambda, const Mat& gamma, const Vec& T, Mat& A, Mat& B) {
    const Index n = lambda.rows(), p = gamma.cols();
    A = Mat::Zero(n + p, n + p);
    B = Mat::Zero(n + p, p);
    A.topLeftCorner(n, n) = lambda;
    A.topRightCorner(n, p) = gamma;
    for (Index j = 0; j < p; ++j) {
        A(n + j, n + j) = -1.0 / T(j);
        B(n + j, j) = 1.0 / T(j);
    }
}

/// K(x) = reshape(W_K sigma(x) + B_K) with the hidden layer of the input
/// surrogate as basis. Gains are p x (n + p) acting on [Phi - Phi_ss; u - u_ss].
struct GainSchedule {
    SigmoidSurrogate basis;  // only w1, b1, x_center, x_scale are used
    Mat W_K;
    Vec B_K;
    Index rows = 0;
    Index cols = 0;
    std::vector<Vec> design_points;
    std::vector<Mat> raw_gains;
    std::vector<std::uint8_t> failed;
    std::vector<double> max_closed_loop_re;  // with the scheduled gain
    double fit_residual = 0.0;               // max abs entry error at design points

    Mat evaluate(const Vec& x) const {
        const Vec f = W_K * basis.hidden_activation(x) + B_K;
        return Eigen::Map<const Mat>(f.data(), rows, cols);
    }
};

struct LqrWeights {
    Mat Q_x;  // output weight, Q_Phi = C^T Q_x C
    Mat Q_u;  // weight on u - u_ss
    Mat R;
    double phi_regularization = 0.0;  // added to the diagonal of Q_Phi
};

/// Per-point CARE on the augmented model, then a ridge fit of the gains onto
/// the sigmoid basis. Refuses when more than 5% of the points fail.
inline GainSchedule design_lqr_grid(const ControlModel& model, const ActuatorConfig& act, const LqrWeights& w,
                                    const std::vector<Vec>& points, const SigmoidSurrogate& basis,
                                    double fit_ridge = 1e-10) {
    const Index n = model.n(), p = model.gamma.gamma(points.at(0)).cols();
    act.validate(p);
    Mat Q = Mat::Zero(n + p, n + p);
    Q.topLeftCorner(n, n) = model.C.transpose() * w.Q_x * model.C;
    Q.topLeftCorner(n, n).diagonal().array() += w.phi_regularization;
    Q.bottomRightCorner(p, p) = w.Q_u;

    GainSchedule gs;
    gs.basis = basis;
    gs.rows = p;
    gs.cols = n + p;
    gs.design_points = points;
    gs.raw_gains.assign(points.size(), Mat());
    gs.failed.assign(points.size(), 0);
    std::vector<std::string> errors(points.size());
    parallel_for(static_cast<Index>(points.size()), [&](Index i) {
        Mat A, B;
        augmented_system(model.lambda, model.gamma.gamma(points[static_cast<std::size_t>(i)]), act.time_constants, A,
                         B);
        try {
            gs.raw_gains[static_cast<std::size_t>(i)] = solve_care({A, B, Q, w.R}).K;
        } catch (const Error& e) {
            gs.failed[static_cast<std::size_t>(i)] = 1;
            errors[static_cast<std::size_t>(i)] = e.what();
        }
    });
    Index n_failed = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (!gs.failed[i]) continue;
        ++n_failed;
        std::ostringstream os;
        os << "LQR design failed at (" << points[i].transpose() << "): " << errors[i];
        log::warn(os.str());
    }
    if (static_cast<double>(n_failed) > 0.05 * static_cast<double>(points.size()))
        throw DesignError("LQR design failed at more than 5% of the scheduling points");

    std::vector<Index> ok;
    for (std::size_t i = 0; i < points.size(); ++i)
        if (!gs.failed[i]) ok.push_back(static_cast<Index>(i));
    Mat H(basis.hidden(), static_cast<Index>(ok.size()));
    Mat Kt(p * (n + p), static_cast<Index>(ok.size()));
    for (std::size_t a = 0; a < ok.size(); ++a) {
        const auto i = static_cast<std::size_t>(ok[a]);
        H.col(static_cast<Index>(a)) = basis.hidden_activation(points[i]);
        Kt.col(static_cast<Index>(a)) = Eigen::Map<const Vec>(gs.raw_gains[i].data(), p * (n + p));
    }
    const Vec hm = H.rowwise().mean();
    const Vec km = Kt.rowwise().mean();
    gs.W_K = ridge_fit(H.colwise() - hm, Kt.colwise() - km, fit_ridge * static_cast<double>(H.cols()));
    gs.B_K = km - gs.W_K * hm;

    gs.max_closed_loop_re.assign(points.size(), 0.0);
    for (std::size_t i = 0; i < points.size(); ++i) {
        Mat A, B;
        augmented_system(model.lambda, model.gamma.gamma(points[i]), act.time_constants, A, B);
        const Mat K = gs.evaluate(points[i]);
        gs.max_closed_loop_re[i] = max_real_part(A - B * K);
        if (!gs.failed[i]) gs.fit_residual = std::max(gs.fit_residual, (K - gs.raw_gains[i]).cwiseAbs().maxCoeff());
    }
    return gs;
}

/// Largest entrywise change of the scheduled gain between horizontally or
/// vertically adjacent nodes of a regular grid.
inline double schedule_jump(const GainSchedule& gs, const SimGrid& grid) {
    double jump = 0.0;
    for (Index k = 0; k < grid.size(); ++k) {
        const auto idx = grid.multi_index(k);
        const Mat K0 = gs.evaluate(grid.node(k));
        for (std::size_t d = 0; d < idx.size(); ++d) {
            if (idx[d] + 1 >= grid.counts[d]) continue;
            auto nb = idx;
            nb[d] += 1;
            jump = std::max(jump, (gs.evaluate(grid.node(grid.linear_index(nb))) - K0).cwiseAbs().maxCoeff());
        }
    }
    return jump;
}

// ============================================================================
// Steady-state allocation
// ============================================================================

struct SteadyState {
    Vec phi;
    Vec u;
};

/// Solves [Lambda Gamma; S C 0] [Phi; u] = [0; S (x_r - offset)]. S selects the
/// tracked outputs (identity when empty) and must have as many rows as inputs.
inline SteadyState steady_state_targets(const Mat& lambda, const Mat& gamma, const Mat& C, const Vec& x_r,
                                        const Mat& select = Mat(), const Vec& offset = Vec()) {
    const Index n = lambda.rows(), p = gamma.cols();
    const Mat S = select.size() ? select : Mat::Identity(C.rows(), C.rows());
    if (S.rows() != p) throw AllocationError("tracked output count must equal the input count");
    Mat M = Mat::Zero(n + p, n + p);
    M.topLeftCorner(n, n) = lambda;
    M.topRightCorner(n, p) = gamma;
    M.bottomLeftCorner(p, n) = S * C;
    Vec rhs = Vec::Zero(n + p);
    const Vec target = offset.size() ? Vec(x_r - offset) : x_r;
    rhs.tail(p) = S * target;
    Eigen::FullPivLU<Mat> lu(M);
    lu.setThreshold(1e-12);
    if (!lu.isInvertible()) throw AllocationError("steady-state block matrix is singular");
    const Vec sol = lu.solve(rhs);
    if (!sol.allFinite()) throw AllocationError("steady-state solution is not finite");
    return {sol.head(n), sol.tail(p)};
}

/// Steady state with Gamma evaluated at the model's own steady-state estimate
/// (a few fixed-point passes starting from the setpoint).
inline SteadyState scheduled_steady_state(const ControlModel& model, const Vec& x_r, const Mat& select, int passes = 4) {
    Vec x_eval = x_r;
    SteadyState ss;
    for (int i = 0; i < passes; ++i) {
        ss = steady_state_targets(model.lambda, model.gamma.gamma(x_eval), model.C, x_r, select, model.offset);
        x_eval = model.state(ss.phi);
    }
    return ss;
}

// ============================================================================
// Closed-loop simulation
// ============================================================================

struct Setpoint {
    double time = 0.0;
    Vec value;  // full state-space setpoint; only tracked components matter
};

struct ClosedLoopConfig {
    double dt = 0.01;
    double horizon = 10.0;
    ActuatorConfig actuator;
    Mat K_i;                     // p x p integral gains
    Mat select;                  // tracked outputs (p x m); identity when empty
    std::vector<Setpoint> setpoints;
    bool anti_windup = true;
    double measurement_noise_variance = 0.0;
    std::uint64_t seed = 1;
    double blowup_norm = 1e6;
};

struct ClosedLoopRun {
    Vec t;
    Mat x;        // plant state
    Mat u;        // actual (lagged) input
    Mat u_comm;   // limited command
    Mat x_hat;    // estimated state
    Mat eta;      // integral states
    Mat r;        // tracked setpoint
    Mat innovation;
};

/// Tracking LQG: Kalman filter, scheduled LQR gain, steady-state allocation and
/// integral action with clamping anti-windup.
struct LqgController {
    ControlModel model;
    Mat L;  // n x m Kalman gain
    GainSchedule schedule;
};

/// Decoupled PI baseline: u = u0 + Kp e + Ki int(e), e = S (r - x).
struct PiController {
    Vec kp;
    Vec ki;
    Vec u0;
};

namespace detail {

inline Mat tracked_selection(const ClosedLoopConfig& cfg, Index m) {
    return cfg.select.size() ? cfg.select : Mat(Mat::Identity(m, m));
}

inline Vec setpoint_at(const ClosedLoopConfig& cfg, double t, const Vec& fallback) {
    Vec r = fallback;
    for (const auto& s : cfg.setpoints)
        if (t + 1e-12 >= s.time) r = s.value;
    return r;
}

/// Channel-wise clamp; sat(j) = +1 / -1 when the upper / lower bound was hit.
inline Vec limit(const Vec& u, const ActuatorConfig& a, Eigen::VectorXi& sat) {
    Vec out = u;
    sat = Eigen::VectorXi::Zero(u.size());
    for (Index j = 0; j < u.size(); ++j) {
        if (u(j) > a.upper(j)) {
            out(j) = a.upper(j);
            sat(j) = 1;
        } else if (u(j) < a.lower(j)) {
            out(j) = a.lower(j);
            sat(j) = -1;
        }
    }
    return out;
}

inline void allocate_run(ClosedLoopRun& run, Index N, Index m, Index p, Index q) {
    run.t.resize(N);
    run.x.resize(m, N);
    run.u.resize(p, N);
    run.u_comm.resize(p, N);
    run.x_hat.resize(m, N);
    run.eta.resize(q, N);
    run.r.resize(q, N);
    run.innovation.resize(m, N);
}

}  // namespace detail

/// Generic sampled loop. `law(k, y, r, u, eta, x_hat, innovation)` returns the
/// raw command and fills the two outputs; the loop applies the limiter, anti-windup, actuator lag and plant.
template <typename Law>
ClosedLoopRun run_loop(const DynSystem& plant, const ClosedLoopConfig& cfg, const Vec& x0, const Vec& u0, Law&& law) {
    const Index m = plant.state_dim, p = plant.input_dim;
    cfg.actuator.validate(p);
    const Mat S = detail::tracked_selection(cfg, m);
    const Index q = S.rows();
    if (cfg.K_i.size() && (cfg.K_i.rows() != p || cfg.K_i.cols() != q)) throw ConfigError("K_i must be p x q");
    const Index N = static_cast<Index>(std::llround(cfg.horizon / cfg.dt)) + 1;
    ClosedLoopRun run;
    detail::allocate_run(run, N, m, p, q);
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> nd(0.0, std::sqrt(std::max(0.0, cfg.measurement_noise_variance)));
    const Vec lag = (-cfg.dt * cfg.actuator.time_constants.cwiseInverse()).array().exp();

    Vec x = x0, u = u0, eta = Vec::Zero(q);
    for (Index k = 0; k < N; ++k) {
        const double t = static_cast<double>(k) * cfg.dt;
        Vec y = x;
        if (cfg.measurement_noise_variance > 0.0)
            for (Index i = 0; i < m; ++i) y(i) += nd(rng);
        const Vec r_full = detail::setpoint_at(cfg, t, x0);
        const Vec r = S * r_full;
        Vec x_hat(m), innov(m);
        const Vec raw = law(k, y, r_full, u, eta, x_hat, innov);
        Eigen::VectorXi sat;
        const Vec cmd = detail::limit(raw, cfg.actuator, sat);

        run.t(k) = t;
        run.x.col(k) = x;
        run.u.col(k) = u;
        run.u_comm.col(k) = cmd;
        run.x_hat.col(k) = x_hat;
        run.eta.col(k) = eta;
        run.r.col(k) = r;
        run.innovation.col(k) = innov;
        if (k + 1 == N) break;

        // integral state; clamping freezes channels pushed further into saturation
        const Vec e = r - S * y;
        for (Index j = 0; j < q; ++j) {
            bool freeze = false;
            if (cfg.anti_windup && cfg.K_i.size() && j < p && sat(j) != 0) {
                const double push = -(cfg.K_i.row(j).dot(e));  // d(command)/dt from the integrator
                freeze = push * static_cast<double>(sat(j)) > 0.0;
            }
            if (!freeze) eta(j) += cfg.dt * e(j);
        }
        x = heun_step(plant, x, u, cfg.dt);
        u = cmd + lag.cwiseProduct(u - cmd);
        if (!x.allFinite() || x.norm() > cfg.blowup_norm)
            throw SimulationError("closed-loop state diverged at t = " + std::to_string(t + cfg.dt));
    }
    return run;
}

/// Closed loop with the tracking LQG. The filter starts at phi_init.
inline ClosedLoopRun simulate_closed_loop(const DynSystem& plant, const LqgController& ctl, const ClosedLoopConfig& cfg,
                                          const Vec& x0, const Vec& u0, const Vec& phi_init) {
    const Index m = plant.state_dim;
    const Mat S = detail::tracked_selection(cfg, m);
    const Index n = ctl.model.n(), p = plant.input_dim;
    if (ctl.L.rows() != n || ctl.L.cols() != m) throw ConfigError("Kalman gain shape mismatch");
    Vec phi = phi_init;
    Vec last_r;
    SteadyState ss;
    return run_loop(plant, cfg, x0, u0, [&](Index, const Vec& y, const Vec& r_full, const Vec& u, const Vec& eta,
                                             Vec& x_hat, Vec& innov) {
        // correct with the current measurement, then propagate with the applied input
        x_hat = ctl.model.state(phi);
        innov = y - x_hat;
        if (last_r.size() == 0 || (r_full - last_r).norm() > 0.0) {
            ss = scheduled_steady_state(ctl.model, r_full, S);
            last_r = r_full;
        }
        const Mat K = ctl.schedule.evaluate(x_hat);
        Vec raw = ss.u - K.leftCols(n) * (phi - ss.phi) - K.rightCols(p) * (u - ss.u);
        if (cfg.K_i.size()) raw -= cfg.K_i * eta;
        const Vec dphi = ctl.model.lambda * phi + ctl.model.gamma.gamma(x_hat) * u + ctl.L * innov;
        phi += cfg.dt * dphi;
        return raw;
    });
}

inline ClosedLoopRun simulate_pi(const DynSystem& plant, const PiController& pi, const ClosedLoopConfig& cfg,
                                 const Vec& x0) {
    const Mat S = detail::tracked_selection(cfg, plant.state_dim);
    ClosedLoopConfig c = cfg;
    c.K_i = -Mat(pi.ki.asDiagonal());  // command = u0 + Kp e + Ki eta, i.e. K_i = -diag(ki)
    return run_loop(plant, c, x0, pi.u0, [&](Index, const Vec& y, const Vec& r_full, const Vec&, const Vec& eta,
                                              Vec& x_hat, Vec& innov) {
        x_hat = y;
        innov = Vec::Zero(y.size());
        const Vec e = S * r_full - S * y;
        return Vec(pi.u0 + pi.kp.cwiseProduct(e) + pi.ki.cwiseProduct(eta));
    });
}

// ============================================================================
// Step-response metrics
// ============================================================================

struct StepMetrics {
    double settling_time = 0.0;  // s after the step, +-2% of the step size
    double overshoot = 0.0;      // % of step size, carries the step's sign
    double steady_state_error = 0.0;
    bool settled = false;
};

/// Metrics of output y (time series) for a step from y0 to target at t_step.
inline StepMetrics step_metrics(const Vec& t, const Vec& y, double t_step, double y0, double target,
                                double band = 0.02) {
    StepMetrics s;
    const double step = target - y0;
    const double tol = band * std::abs(step);
    const double dir = step >= 0.0 ? 1.0 : -1.0;
    double peak = 0.0;
    Index last_out = -1;
    Index first = -1;
    for (Index k = 0; k < t.size(); ++k) {
        if (t(k) + 1e-12 < t_step) continue;
        if (first < 0) first = k;
        peak = std::max(peak, dir * (y(k) - target));
        if (std::abs(y(k) - target) > tol) last_out = k;
    }
    if (first < 0) throw ConfigError("step time lies beyond the run");
    s.overshoot = step != 0.0 ? dir * 100.0 * peak / std::abs(step) : 0.0;
    s.settled = last_out + 1 < t.size();
    s.settling_time = s.settled ? (last_out < first ? 0.0 : t(last_out + 1) - t_step)
                                : std::numeric_limits<double>::infinity();
    const Index tail = std::max<Index>(1, (t.size() - first) / 20);
    s.steady_state_error = std::abs(y.tail(tail).mean() - target);
    return s;
}

}  // namespace koopeig
