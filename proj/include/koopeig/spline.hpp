#pragma once

#include <koopeig/common.hpp>

#include <Eigen/LU>

#include <cmath>
#include <vector>

namespace koopeig {

// ============================================================================
// 1-D cubic spline operators
// ============================================================================

/// Linear map from samples on strictly increasing knots to spline values at
/// target abscissae. weights(j, i) is the contribution of sample i to target j.
/// Targets outside [knots.front(), knots.back()] are evaluated with the end
/// polynomial and flagged.
struct SplineOperator {
    Mat weights;
    std::vector<std::uint8_t> outside;
};

namespace detail {

inline void check_knots(const Vec& x) {
    if (x.size() < 2) throw ConfigError("spline needs at least 2 knots");
    for (Index i = 1; i < x.size(); ++i)
        if (!(x(i) > x(i - 1))) throw ConfigError("spline knots must be strictly increasing");
}

/// Second-derivative operator S (n x n): M = S y for the not-a-knot
/// interpolating cubic.
inline Mat not_a_knot_moments(const Vec& x) {
    const Index n = x.size();
    Mat S = Mat::Zero(n, n);
    if (n == 2) return S;
    Vec h = x.tail(n - 1) - x.head(n - 1);
    Mat A = Mat::Zero(n, n), D = Mat::Zero(n, n);
    if (n == 3) {
        // single parabola: constant second derivative
        A(0, 0) = 1.0;
        A(0, 1) = -1.0;
        A(2, 1) = 1.0;
        A(2, 2) = -1.0;
    } else {
        // continuity of the third derivative at the second and penultimate knots
        A(0, 0) = -h(1);
        A(0, 1) = h(0) + h(1);
        A(0, 2) = -h(0);
        A(n - 1, n - 3) = -h(n - 2);
        A(n - 1, n - 2) = h(n - 3) + h(n - 2);
        A(n - 1, n - 1) = -h(n - 3);
    }
    for (Index i = 1; i < n - 1; ++i) {
        A(i, i - 1) = h(i - 1);
        A(i, i) = 2.0 * (h(i - 1) + h(i));
        A(i, i + 1) = h(i);
        D(i, i - 1) = 6.0 / h(i - 1);
        D(i, i) = -6.0 / h(i - 1) - 6.0 / h(i);
        D(i, i + 1) = 6.0 / h(i);
    }
    return A.fullPivLu().solve(D);
}

/// Evaluates the piecewise cubic with knot values V (n x n_samples operator
/// rows) and knot second derivatives M (same shape) at t.
inline void spline_row(const Vec& x, const Mat& V, const Mat& M, double t, Eigen::Ref<Vec> row, bool& outside) {
    const Index n = x.size();
    outside = t < x(0) - 1e-12 * std::abs(x(n - 1) - x(0)) || t > x(n - 1) + 1e-12 * std::abs(x(n - 1) - x(0));
    Index i = static_cast<Index>(std::upper_bound(x.data(), x.data() + n, t) - x.data()) - 1;
    i = std::clamp<Index>(i, 0, n - 2);
    const double h = x(i + 1) - x(i);
    const double a = (x(i + 1) - t) / h;
    const double b = 1.0 - a;
    const double ca = (a * a * a - a) * h * h / 6.0;
    const double cb = (b * b * b - b) * h * h / 6.0;
    row = a * V.row(i).transpose() + b * V.row(i + 1).transpose() + ca * M.row(i).transpose() +
          cb * M.row(i + 1).transpose();
}

}  // namespace detail

/// Cubic smoothing spline operator with parameter p in (0, 1]. p = 1 gives the
/// not-a-knot interpolant; p < 1 gives the natural smoothing spline minimising
/// p sum (y_i - s(x_i))^2 + (1 - p) int s''(x)^2 dx.
inline SplineOperator spline_operator(const Vec& knots, const Vec& targets, double p = 1.0) {
    detail::check_knots(knots);
    if (!(p > 0.0 && p <= 1.0)) throw ConfigError("smoothing parameter must lie in (0, 1]");
    const Index n = knots.size();
    Mat V = Mat::Identity(n, n);
    Mat M;
    if (p == 1.0 || n < 3) {
        M = detail::not_a_knot_moments(knots);
    } else {
        // Reinsch form: (R + a Q^T Q) g = Q^T y, values = y - a Q g.
        const double alpha = (1.0 - p) / p;
        Vec h = knots.tail(n - 1) - knots.head(n - 1);
        Mat Q = Mat::Zero(n, n - 2), R = Mat::Zero(n - 2, n - 2);
        for (Index j = 1; j < n - 1; ++j) {
            const Index c = j - 1;
            Q(j - 1, c) = 1.0 / h(j - 1);
            Q(j, c) = -1.0 / h(j - 1) - 1.0 / h(j);
            Q(j + 1, c) = 1.0 / h(j);
            R(c, c) = (h(j - 1) + h(j)) / 3.0;
            if (c + 1 < n - 2) {
                R(c, c + 1) = h(j) / 6.0;
                R(c + 1, c) = h(j) / 6.0;
            }
        }
        const Mat G = (R + alpha * Q.transpose() * Q).ldlt().solve(Q.transpose());
        V = Mat::Identity(n, n) - alpha * Q * G;
        M = Mat::Zero(n, n);
        M.middleRows(1, n - 2) = G;
    }
    SplineOperator op;
    op.weights.resize(targets.size(), n);
    op.outside.assign(static_cast<std::size_t>(targets.size()), 0);
    Vec row(n);
    for (Index j = 0; j < targets.size(); ++j) {
        bool out = false;
        detail::spline_row(knots, V, M, targets(j), row, out);
        op.weights.row(j) = row.transpose();
        op.outside[static_cast<std::size_t>(j)] = out ? 1 : 0;
    }
    return op;
}

/// Applies operators along dimension 0 (rows) and dimension 1 (columns) of a
/// sample array Y (n0 x n1): Z = W0 Y W1^T.
inline Mat tensor_apply(const SplineOperator& op0, const SplineOperator& op1, const Mat& Y) {
    return op0.weights * Y * op1.weights.transpose();
}

}  // namespace koopeig
