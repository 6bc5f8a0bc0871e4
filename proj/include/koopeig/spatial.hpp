#pragma once

#include <koopeig/common.hpp>
#include <koopeig/spectral.hpp>
#include <koopeig/spline.hpp>
#include <koopeig/systems.hpp>

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace koopeig {

// ============================================================================
// Eigenfunction fields
// ============================================================================

/// Eigenfunction samples on a regular 2-D grid. values is n_phi x n_nodes in
/// the grid's node order; gradient[j] holds d/dx_j with the same layout.
/// mask(k) != 0 excludes node k (extrapolated or near a separatrix).
struct EigenfunctionField {
    SimGrid grid;
    Mat values;
    std::vector<Mat> gradient;
    double smoothing = 1.0;
    std::vector<std::uint8_t> mask;

    Index n_phi() const { return values.rows(); }
    bool has_gradient() const { return !gradient.empty(); }

    /// Gradient at node k as n_phi x m.
    Mat gradient_at(Index k) const {
        if (!has_gradient()) throw StateError("field gradient not computed");
        Mat g(n_phi(), grid.dims());
        for (Index j = 0; j < grid.dims(); ++j) g.col(j) = gradient[static_cast<std::size_t>(j)].col(k);
        return g;
    }

    bool masked(Index k) const { return !mask.empty() && mask[static_cast<std::size_t>(k)] != 0; }
};

namespace detail {
inline void require_2d(const SimGrid& g) {
    if (g.dims() != 2) throw ConfigError("spatial operations support 2-D grids only");
}
}  // namespace detail

/// Tensor-product cubic smoothing-spline surface through samples given on the
/// regular sampling grid `samples_grid` (values: n_phi x n_samples), evaluated on
/// `target`. Target nodes outside the sampling hull are masked.
inline EigenfunctionField interpolate_field(const SimGrid& samples_grid, const Mat& samples, const SimGrid& target,
                                            double smoothing = 1.0) {
    detail::require_2d(samples_grid);
    detail::require_2d(target);
    if (samples.cols() != samples_grid.size()) throw ConfigError("sample count differs from sampling grid size");
    const SplineOperator op0 = spline_operator(samples_grid.axis(0), target.axis(0), smoothing);
    const SplineOperator op1 = spline_operator(samples_grid.axis(1), target.axis(1), smoothing);
    const Index n0 = samples_grid.counts[0], n1 = samples_grid.counts[1];
    const Index t0 = target.counts[0], t1 = target.counts[1];

    EigenfunctionField f;
    f.grid = target;
    f.smoothing = smoothing;
    f.values.resize(samples.rows(), target.size());
    parallel_for(samples.rows(), [&](Index r) {
        const Vec row = samples.row(r).transpose();
        const Mat Y = Eigen::Map<const Mat>(row.data(), n0, n1);
        const Mat Z = tensor_apply(op0, op1, Y);
        f.values.row(r) = Eigen::Map<const Vec>(Z.data(), t0 * t1).transpose();
    });
    f.mask.assign(static_cast<std::size_t>(target.size()), 0);
    for (Index k = 0; k < target.size(); ++k) {
        const Index i0 = k % t0, i1 = k / t0;
        if (op0.outside[static_cast<std::size_t>(i0)] || op1.outside[static_cast<std::size_t>(i1)])
            f.mask[static_cast<std::size_t>(k)] = 1;
    }
    return f;
}

/// Neighbour differences on the field grid: central in the interior,
/// one-sided second order at the boundary (first order when only 2 points).
inline std::vector<Mat> gradient_central_diff(const SimGrid& grid, const Mat& values) {
    detail::require_2d(grid);
    const Index n0 = grid.counts[0], n1 = grid.counts[1];
    std::vector<Mat> grad(2, Mat(values.rows(), values.cols()));
    for (Index dim = 0; dim < 2; ++dim) {
        const double h = grid.spacing(dim);
        const Index n = grid.counts[static_cast<std::size_t>(dim)];
        const Index stride = dim == 0 ? 1 : n0;
        Mat& g = grad[static_cast<std::size_t>(dim)];
        parallel_for(values.cols(), [&](Index k) {
            const Index i = dim == 0 ? k % n0 : k / n0;
            if (i > 0 && i < n - 1) {
                g.col(k) = (values.col(k + stride) - values.col(k - stride)) / (2.0 * h);
            } else if (n == 2) {
                g.col(k) = i == 0 ? (values.col(k + stride) - values.col(k)) / h
                                  : (values.col(k) - values.col(k - stride)) / h;
            } else if (i == 0) {
                g.col(k) = (-3.0 * values.col(k) + 4.0 * values.col(k + stride) - values.col(k + 2 * stride)) /
                           (2.0 * h);
            } else {
                g.col(k) = (3.0 * values.col(k) - 4.0 * values.col(k - stride) + values.col(k - 2 * stride)) /
                           (2.0 * h);
            }
        });
        (void)n1;
    }
    return grad;
}

inline void gradient_central_diff(EigenfunctionField& field) {
    field.gradient = gradient_central_diff(field.grid, field.values);
}

/// Drift F evaluated at every grid node (m x n_nodes).
inline Mat drift_at_nodes(const DynSystem& sys, const SimGrid& grid) {
    Mat F(sys.state_dim, grid.size());
    parallel_for(grid.size(), [&](Index k) { F.col(k) = sys.drift(grid.node(k)); });
    return F;
}

/// grad(Phi) . F - Lambda Phi per node (n_phi x n_nodes). Masked nodes are
/// set to zero; kpde_active_nodes tells which entries count.
inline Mat kpde_residual(const EigenfunctionField& field, const EigenvalueSet& eigs, const Mat& drift) {
    if (!field.has_gradient()) throw StateError("KPDE residual needs the field gradient");
    if (eigs.n_phi() != field.n_phi()) throw ConfigError("eigenvalue set does not match the field");
    if (drift.cols() != field.grid.size()) throw ConfigError("drift samples do not match the field grid");
    Mat lhs = Mat::Zero(field.n_phi(), field.grid.size());
    for (Index j = 0; j < field.grid.dims(); ++j)
        lhs += field.gradient[static_cast<std::size_t>(j)] * drift.row(j).asDiagonal();
    Mat r = lhs - eigs.lambda_matrix() * field.values;
    for (Index k = 0; k < r.cols(); ++k)
        if (field.masked(k)) r.col(k).setZero();
    return r;
}

/// Unmasked nodes that are not on the outermost ring of the grid.
inline std::vector<std::uint8_t> kpde_active_nodes(const EigenfunctionField& field, bool exclude_ring = true) {
    const SimGrid& g = field.grid;
    std::vector<std::uint8_t> active(static_cast<std::size_t>(g.size()), 1);
    for (Index k = 0; k < g.size(); ++k) {
        if (field.masked(k)) {
            active[static_cast<std::size_t>(k)] = 0;
            continue;
        }
        if (!exclude_ring) continue;
        const auto idx = g.multi_index(k);
        for (std::size_t d = 0; d < idx.size(); ++d)
            if (idx[d] == 0 || idx[d] == g.counts[d] - 1) active[static_cast<std::size_t>(k)] = 0;
    }
    return active;
}

/// Mean of squared residual entries over active nodes, optionally clamping each
/// entry to [-clamp, clamp] first.
inline double kpde_cost(const Mat& residual, const std::vector<std::uint8_t>& active,
                        std::optional<double> clamp = std::nullopt) {
    double acc = 0.0;
    Index count = 0;
    for (Index k = 0; k < residual.cols(); ++k) {
        if (!active.empty() && !active[static_cast<std::size_t>(k)]) continue;
        for (Index r = 0; r < residual.rows(); ++r) {
            double v = residual(r, k);
            if (clamp) v = std::clamp(v, -*clamp, *clamp);
            acc += v * v;
        }
        ++count;
    }
    if (count == 0) throw ConfigError("KPDE cost has no active nodes");
    return acc / static_cast<double>(count * residual.rows());
}

// ============================================================================
// Point evaluation
// ============================================================================

/// Bilinear interpolation of a per-node quantity (rows x n_nodes) at x; x is
/// clamped into the grid box. `outside` reports whether clamping happened.
inline Vec sample_nodes(const SimGrid& grid, const Mat& data, const Vec& x, bool* outside = nullptr) {
    detail::require_2d(grid);
    double f[2];
    Index i[2];
    bool out = false;
    for (Index d = 0; d < 2; ++d) {
        const double h = grid.spacing(d);
        double u = (x(d) - grid.ranges[static_cast<std::size_t>(d)].lo) / h;
        const double top = static_cast<double>(grid.counts[static_cast<std::size_t>(d)] - 1);
        if (u < 0.0 || u > top) {
            out = true;
            u = std::clamp(u, 0.0, top);
        }
        i[d] = std::min<Index>(static_cast<Index>(u), grid.counts[static_cast<std::size_t>(d)] - 2);
        f[d] = u - static_cast<double>(i[d]);
    }
    if (outside) *outside = out;
    const Index n0 = grid.counts[0];
    const Index k00 = i[0] + n0 * i[1];
    return (1 - f[0]) * (1 - f[1]) * data.col(k00) + f[0] * (1 - f[1]) * data.col(k00 + 1) +
           (1 - f[0]) * f[1] * data.col(k00 + n0) + f[0] * f[1] * data.col(k00 + n0 + 1);
}

inline Vec evaluate_field(const EigenfunctionField& field, const Vec& x, bool* outside = nullptr) {
    return sample_nodes(field.grid, field.values, x, outside);
}

// ============================================================================
// Refinement
// ============================================================================

struct RefinementConfig {
    SimGrid sample_grid;  // trajectory initial conditions
    SimGrid interp_grid;  // field evaluation grid
    double dt = 0.1;
    Index n_samples = 200;
    double ridge = 1e-6;
    double smoothing = 1.0;
    std::optional<Vec> shift;  // subtract before projection (fixed point)
};

/// Phi_0 for every trajectory started on `cfg.sample_grid`, projected with the
/// given modes, then interpolated onto `cfg.interp_grid` with gradients.
inline EigenfunctionField refine_field(const DynSystem& sys, const EigenvalueSet& eigs, const Mat& C_ref,
                                       const RefinementConfig& cfg, Mat* phi0_out = nullptr) {
    TrajectoryEnsemble ens =
        simulate_ensemble(sys, cfg.sample_grid, cfg.dt, cfg.n_samples, cfg.sample_grid.node(0));
    if (cfg.shift) ens = ens.shift_by(*cfg.shift);
    const Mat B = build_projection_basis(C_ref, eigs, ens.time_axis());
    const Mat phi0 = project_all(ens.flattened(), B, cfg.ridge);
    ens.states.clear();
    EigenfunctionField f = interpolate_field(cfg.sample_grid, phi0, cfg.interp_grid, cfg.smoothing);
    gradient_central_diff(f);
    if (phi0_out) *phi0_out = phi0;
    return f;
}

// ============================================================================
// Separatrix detection
// ============================================================================

struct SeparatrixEstimate {
    std::vector<std::uint8_t> mask;
    double low_level = 0.0;
    double high_level = 0.0;
    double midpoint = 0.0;
    bool bimodal = false;
};

/// Locates the two plateau levels of an indicator eigenfunction from its
/// value histogram and masks nodes whose value lies within `margin` of the
/// midpoint. A unimodal indicator yields an empty mask and a warning.
inline SeparatrixEstimate separatrix_mask(const Vec& indicator, double margin, int bins = 64) {
    SeparatrixEstimate est;
    est.mask.assign(static_cast<std::size_t>(indicator.size()), 0);
    if (indicator.size() == 0) throw ConfigError("empty indicator field");
    // robust range: ignore the extreme 0.5% tails
    std::vector<double> sorted(indicator.data(), indicator.data() + indicator.size());
    std::sort(sorted.begin(), sorted.end());
    const auto q = [&](double p) { return sorted[static_cast<std::size_t>(p * static_cast<double>(sorted.size() - 1))]; };
    const double lo = q(0.005), hi = q(0.995);
    if (!(hi - lo > 1e-12)) {
        log::warn("indicator eigenfunction is constant; no separatrix");
        return est;
    }
    std::vector<double> hist(static_cast<std::size_t>(bins), 0.0);
    const double w = (hi - lo) / bins;
    for (Index k = 0; k < indicator.size(); ++k) {
        const double v = indicator(k);
        if (v < lo || v > hi) continue;
        const int b = std::min(bins - 1, static_cast<int>((v - lo) / w));
        hist[static_cast<std::size_t>(b)] += 1.0;
    }
    std::vector<double> smooth(hist.size(), 0.0);
    for (int b = 0; b < bins; ++b) {
        double s = 0.0, n = 0.0;
        for (int o = -1; o <= 1; ++o)
            if (b + o >= 0 && b + o < bins) {
                s += hist[static_cast<std::size_t>(b + o)];
                n += 1.0;
            }
        smooth[static_cast<std::size_t>(b)] = s / n;
    }
    std::vector<int> peaks;
    for (int b = 0; b < bins; ++b) {
        const double left = b > 0 ? smooth[static_cast<std::size_t>(b - 1)] : -1.0;
        const double right = b + 1 < bins ? smooth[static_cast<std::size_t>(b + 1)] : -1.0;
        if (smooth[static_cast<std::size_t>(b)] > left && smooth[static_cast<std::size_t>(b)] >= right) peaks.push_back(b);
    }
    std::sort(peaks.begin(), peaks.end(),
              [&](int a, int b) { return smooth[static_cast<std::size_t>(a)] > smooth[static_cast<std::size_t>(b)]; });
    const double total = static_cast<double>(indicator.size());
    int p1 = -1, p2 = -1;
    if (!peaks.empty()) p1 = peaks[0];
    for (std::size_t i = 1; i < peaks.size(); ++i) {
        const int c = peaks[i];
        if (std::abs(c - p1) < 3) continue;
        const int a = std::min(c, p1), b = std::max(c, p1);
        double valley = smooth[static_cast<std::size_t>(a)];
        for (int k = a; k <= b; ++k) valley = std::min(valley, smooth[static_cast<std::size_t>(k)]);
        if (valley < 0.5 * smooth[static_cast<std::size_t>(c)]) {
            p2 = c;
            break;
        }
    }
    // the weaker plateau must still hold a visible share of the nodes
    if (p2 < 0 || smooth[static_cast<std::size_t>(p2)] * 3.0 < 0.01 * total) {
        log::warn("indicator eigenfunction is unimodal; separatrix mask left empty");
        return est;
    }
    const double l1 = lo + (p1 + 0.5) * w, l2 = lo + (p2 + 0.5) * w;
    est.low_level = std::min(l1, l2);
    est.high_level = std::max(l1, l2);
    est.midpoint = 0.5 * (l1 + l2);
    est.bimodal = true;
    for (Index k = 0; k < indicator.size(); ++k)
        if (std::abs(indicator(k) - est.midpoint) < margin) est.mask[static_cast<std::size_t>(k)] = 1;
    return est;
}

/// Basin label by thresholding the indicator at the plateau midpoint: 1 on the
/// high_level side, 0 on the low side.
inline std::vector<std::uint8_t> classify_basins(const Vec& indicator, const SeparatrixEstimate& est) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(indicator.size()));
    for (Index k = 0; k < indicator.size(); ++k) out[static_cast<std::size_t>(k)] = indicator(k) > est.midpoint;
    return out;
}

/// Long-horizon basin oracle: integrates every point for `horizon` seconds and
/// labels it by the sign of state component `component` at the end.
inline std::vector<std::uint8_t> basin_oracle(const DynSystem& sys, const Mat& points, double horizon, double dt = 0.05,
                                              Index component = 0) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(points.cols()));
    const Index steps = static_cast<Index>(std::llround(horizon / dt));
    const Vec u0 = Vec::Zero(sys.input_dim);
    parallel_for(points.cols(), [&](Index k) {
        Vec x = points.col(k);
        for (Index s = 0; s < steps; ++s) x = heun_step(sys, x, u0, dt);
        if (!x.allFinite()) throw IntegrationOverflowError(k, steps);
        out[static_cast<std::size_t>(k)] = x(component) > 0.0;
    });
    return out;
}

/// Distance from each point to the nearest fine-grid node whose oracle label
/// differs from the point's own label (an upper bound on the distance to the
/// oracle separatrix, tight to the fine spacing).
inline Vec separatrix_distance(const Mat& points, const std::vector<std::uint8_t>& labels, const Mat& fine,
                               const std::vector<std::uint8_t>& fine_labels) {
    Vec d(points.cols());
    parallel_for(points.cols(), [&](Index k) {
        double best = std::numeric_limits<double>::infinity();
        for (Index j = 0; j < fine.cols(); ++j)
            if (fine_labels[static_cast<std::size_t>(j)] != labels[static_cast<std::size_t>(k)])
                best = std::min(best, (fine.col(j) - points.col(k)).norm());
        d(k) = best;
    });
    return d;
}

}  // namespace koopeig
