#pragma once

#include <koopeig/common.hpp>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <complex>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace koopeig {

// ============================================================================
// Dynamical systems
// ============================================================================

/// Control-affine system x' = F(x) + G(x) u. Both callables must be pure.
struct DynSystem {
    std::string name;
    Index state_dim = 0;
    Index input_dim = 0;
    std::function<Vec(const Vec&)> drift;
    std::function<Mat(const Vec&)> input_field;  // state_dim x input_dim
    std::vector<Vec> known_fixed_points;
    std::vector<std::complex<double>> principal_eigenvalues;

    Vec rhs(const Vec& x, const Vec& u) const {
        Vec dx = drift(x);
        if (input_dim > 0 && u.size() > 0) dx.noalias() += input_field(x) * u;
        return dx;
    }

    Mat G(const Vec& x) const {
        if (input_dim == 0 || !input_field) return Mat::Zero(state_dim, 0);
        return input_field(x);
    }
};

/// Checks the DynSystem invariants: drift vanishes at listed fixed points and
/// G has shape state_dim x input_dim at the probe points.
inline void validate_system(const DynSystem& sys, const std::vector<Vec>& probes = {}) {
    if (sys.state_dim <= 0 || !sys.drift) throw ConfigError("system '" + sys.name + "' has no drift");
    for (const auto& fp : sys.known_fixed_points) {
        if (fp.size() != sys.state_dim) throw ConfigError("fixed point dimension mismatch");
        if (sys.drift(fp).norm() >= 1e-8)
            throw ConfigError("drift does not vanish at a listed fixed point of '" + sys.name + "'");
    }
    std::vector<Vec> pts = probes;
    if (pts.empty()) pts.push_back(Vec::Zero(sys.state_dim));
    for (const auto& p : pts) {
        const Mat g = sys.G(p);
        if (g.rows() != sys.state_dim || g.cols() != sys.input_dim)
            throw ConfigError("input field of '" + sys.name + "' has inconsistent shape");
    }
}

/// Numerical Jacobian of the drift by central differences.
inline Mat drift_jacobian(const DynSystem& sys, const Vec& x, double h = 1e-6) {
    Mat J(sys.state_dim, sys.state_dim);
    for (Index j = 0; j < sys.state_dim; ++j) {
        Vec xp = x, xm = x;
        xp(j) += h;
        xm(j) -= h;
        J.col(j) = (sys.drift(xp) - sys.drift(xm)) / (2.0 * h);
    }
    return J;
}

/// Newton iteration on the drift, for fixed points without closed forms.
inline Vec refine_fixed_point(const DynSystem& sys, Vec x, int iterations = 50) {
    for (int k = 0; k < iterations; ++k) {
        const Vec f = sys.drift(x);
        if (f.norm() < 1e-15) break;
        x -= drift_jacobian(sys, x, 1e-7).fullPivLu().solve(f);
    }
    return x;
}

inline std::vector<std::complex<double>> jacobian_eigenvalues(const DynSystem& sys, const Vec& x) {
    Eigen::EigenSolver<Mat> es(drift_jacobian(sys, x));
    std::vector<std::complex<double>> out;
    for (Index i = 0; i < es.eigenvalues().size(); ++i) out.push_back(es.eigenvalues()(i));
    std::sort(out.begin(), out.end(), [](auto a, auto b) {
        return a.real() != b.real() ? a.real() > b.real() : a.imag() > b.imag();
    });
    return out;
}

using ParamMap = std::map<std::string, double>;

namespace detail {
inline double param(const ParamMap& p, const std::string& key, double fallback) {
    auto it = p.find(key);
    return it == p.end() ? fallback : it->second;
}
}  // namespace detail

/// x1' = mu x1, x2' = nu (x2 - x1^2). Finite Koopman closure with
/// eigenfunctions x1, x1^2 and x2 - nu/(nu - 2 mu) x1^2.
inline DynSystem closure_system(double mu = -0.1, double nu = -1.0) {
    DynSystem s;
    s.name = "closure";
    s.state_dim = 2;
    s.input_dim = 0;
    s.drift = [mu, nu](const Vec& x) {
        Vec dx(2);
        dx << mu * x(0), nu * (x(1) - x(0) * x(0));
        return dx;
    };
    s.input_field = [](const Vec&) { return Mat::Zero(2, 0).eval(); };
    s.known_fixed_points = {Vec::Zero(2)};
    s.principal_eigenvalues = {mu, nu};
    return s;
}

/// Control-affine FitzHugh-Nagumo model with G(x) = (1, cos x1^2)^T.
inline DynSystem fitzhugh_nagumo(double alpha = 0.5, double beta = 0.05, double gamma = 0.2, double delta = 1.0) {
    DynSystem s;
    s.name = "fhn";
    s.state_dim = 2;
    s.input_dim = 1;
    s.drift = [=](const Vec& x) {
        Vec dx(2);
        dx << -x(1) - x(0) * (x(0) - 1.0) * (x(0) - alpha) + beta, gamma * (x(0) - delta * x(1));
        return dx;
    };
    s.input_field = [](const Vec& x) {
        Mat g(2, 1);
        g << 1.0, std::cos(x(0) * x(0));
        return g;
    };
    Vec guess(2);
    guess << 0.0345, 0.0345;
    Vec fp = refine_fixed_point(s, guess);
    s.known_fixed_points = {fp};
    s.principal_eigenvalues = jacobian_eigenvalues(s, fp);
    return s;
}

/// x1' = x2, x2' = mu (1 - x1^2) x2 - x1.
inline DynSystem van_der_pol(double mu = 2.0) {
    DynSystem s;
    s.name = "vdp";
    s.state_dim = 2;
    s.input_dim = 0;
    s.drift = [mu](const Vec& x) {
        Vec dx(2);
        dx << x(1), mu * (1.0 - x(0) * x(0)) * x(1) - x(0);
        return dx;
    };
    s.input_field = [](const Vec&) { return Mat::Zero(2, 0).eval(); };
    s.known_fixed_points = {Vec::Zero(2)};
    return s;
}

/// x1' = x2, x2' = -delta x2 - x1 (b + a x1^2).
inline DynSystem duffing(double delta = 0.5, double a = 1.0, double b = -1.0) {
    DynSystem s;
    s.name = "duffing";
    s.state_dim = 2;
    s.input_dim = 0;
    s.drift = [=](const Vec& x) {
        Vec dx(2);
        dx << x(1), -delta * x(1) - x(0) * (b + a * x(0) * x(0));
        return dx;
    };
    s.input_field = [](const Vec&) { return Mat::Zero(2, 0).eval(); };
    s.known_fixed_points = {Vec::Zero(2)};
    if (-b / a > 0) {
        const double r = std::sqrt(-b / a);
        Vec p(2), n(2);
        p << r, 0.0;
        n << -r, 0.0;
        s.known_fixed_points.push_back(p);
        s.known_fixed_points.push_back(n);
        // stable pair first, then the saddle
        auto st = jacobian_eigenvalues(s, p);
        auto un = jacobian_eigenvalues(s, Vec::Zero(2));
        s.principal_eigenvalues = st;
        s.principal_eigenvalues.insert(s.principal_eigenvalues.end(), un.begin(), un.end());
    }
    return s;
}

/// Two-state, two-input control-affine surrogate with a stable focus at the
/// origin, used to exercise the square (2 outputs / 2 inputs) tracking path.
inline DynSystem spool_surrogate() {
    DynSystem s;
    s.name = "spool2";
    s.state_dim = 2;
    s.input_dim = 2;
    s.drift = [](const Vec& x) {
        Vec dx(2);
        dx << -2.5 * x(0) + 1.0 * x(1) - 0.6 * x(0) * x(1), -1.5 * x(0) - 3.0 * x(1) + 0.5 * x(0) * x(0);
        return dx;
    };
    s.input_field = [](const Vec& x) {
        Mat g(2, 2);
        g << 1.0 + 0.3 * x(1), -0.4, 0.6 + 0.2 * x(0), 0.5;
        return g;
    };
    s.known_fixed_points = {Vec::Zero(2)};
    s.principal_eigenvalues = jacobian_eigenvalues(s, Vec::Zero(2));
    return s;
}

/// Builds a registered benchmark by name; unknown parameters are ignored.
inline DynSystem make_system(const std::string& name, const ParamMap& p = {}) {
    using detail::param;
    if (name == "closure") return closure_system(param(p, "mu", -0.1), param(p, "nu", -1.0));
    if (name == "fhn" || name == "fitzhugh_nagumo")
        return fitzhugh_nagumo(param(p, "alpha", 0.5), param(p, "beta", 0.05), param(p, "gamma", 0.2),
                               param(p, "delta", 1.0));
    if (name == "vdp" || name == "van_der_pol") return van_der_pol(param(p, "mu", 2.0));
    if (name == "duffing") return duffing(param(p, "delta", 0.5), param(p, "a", 1.0), param(p, "b", -1.0));
    if (name == "spool2") return spool_surrogate();
    throw ConfigError("unknown system '" + name + "'");
}

inline std::vector<std::string> registered_systems() { return {"closure", "fhn", "vdp", "duffing", "spool2"}; }

// ============================================================================
// Integration
// ============================================================================

/// One Heun (explicit trapezoidal) step with the input held over the step.
inline Vec heun_step(const DynSystem& sys, const Vec& x, const Vec& u, double dt) {
    if (!(dt > 0.0)) throw ConfigError("heun_step: dt must be positive");
    const Vec k1 = sys.rhs(x, u);
    const Vec x1 = x + dt * k1;
    const Vec k2 = sys.rhs(x1, u);
    return x + 0.5 * dt * (k1 + k2);
}

// ============================================================================
// Grids
// ============================================================================

/// Subgrid selector: indices offset, offset+stride, ... in every dimension.
/// The default (stride 4, offset 0) keeps every second odd row/column when rows
/// are counted from 1, i.e. 6 of 21.
struct SubgridRule {
    Index stride = 4;
    Index offset = 0;
};

struct Range {
    double lo = 0.0;
    double hi = 1.0;
};

/// Regular rectangular grid. Node k has multi-index (i0, i1, ...) with
/// k = i0 + n0 * (i1 + n1 * (...)): dimension 0 varies fastest.
struct SimGrid {
    std::vector<Range> ranges;
    std::vector<Index> counts;
    SubgridRule subgrid;

    SimGrid() = default;
    SimGrid(std::vector<Range> r, std::vector<Index> c, SubgridRule rule = {})
        : ranges(std::move(r)), counts(std::move(c)), subgrid(rule) {
        validate();
    }

    static SimGrid square(double lo, double hi, Index n, Index dims = 2, SubgridRule rule = {}) {
        return SimGrid(std::vector<Range>(static_cast<std::size_t>(dims), Range{lo, hi}),
                       std::vector<Index>(static_cast<std::size_t>(dims), n), rule);
    }

    void validate() const {
        if (ranges.size() != counts.size() || ranges.empty()) throw ConfigError("grid: ranges/counts mismatch");
        for (std::size_t d = 0; d < ranges.size(); ++d) {
            if (counts[d] < 2) throw ConfigError("grid: need at least 2 points per dimension");
            if (!(ranges[d].lo < ranges[d].hi)) throw ConfigError("grid: need lo < hi per dimension");
        }
        if (subgrid.stride < 1 || subgrid.offset < 0) throw ConfigError("grid: invalid subgrid rule");
    }

    Index dims() const { return static_cast<Index>(counts.size()); }

    Index size() const {
        Index n = 1;
        for (auto c : counts) n *= c;
        return n;
    }

    double spacing(Index d) const {
        const auto& r = ranges[static_cast<std::size_t>(d)];
        return (r.hi - r.lo) / static_cast<double>(counts[static_cast<std::size_t>(d)] - 1);
    }

    Vec axis(Index d) const {
        const auto& r = ranges[static_cast<std::size_t>(d)];
        return linspace(r.lo, r.hi, counts[static_cast<std::size_t>(d)]);
    }

    std::vector<Index> multi_index(Index k) const {
        std::vector<Index> idx(counts.size());
        for (std::size_t d = 0; d < counts.size(); ++d) {
            idx[d] = k % counts[d];
            k /= counts[d];
        }
        return idx;
    }

    Index linear_index(const std::vector<Index>& idx) const {
        Index k = 0;
        for (std::size_t d = counts.size(); d-- > 0;) k = k * counts[d] + idx[d];
        return k;
    }

    Vec node(Index k) const {
        const auto idx = multi_index(k);
        Vec x(dims());
        for (std::size_t d = 0; d < counts.size(); ++d)
            x(static_cast<Index>(d)) = ranges[d].lo + static_cast<double>(idx[d]) * spacing(static_cast<Index>(d));
        return x;
    }

    /// All nodes as a dims x size matrix.
    Mat nodes() const {
        Mat out(dims(), size());
        for (Index k = 0; k < size(); ++k) out.col(k) = node(k);
        return out;
    }

    /// Index of the node equal to x (within 1e-9 of the spacing), if any.
    std::optional<Index> find_node(const Vec& x) const {
        if (x.size() != dims()) return std::nullopt;
        std::vector<Index> idx(counts.size());
        for (std::size_t d = 0; d < counts.size(); ++d) {
            const double h = spacing(static_cast<Index>(d));
            const double f = (x(static_cast<Index>(d)) - ranges[d].lo) / h;
            const double r = std::round(f);
            if (std::abs(f - r) > 1e-9 || r < 0 || r >= static_cast<double>(counts[d])) return std::nullopt;
            idx[d] = static_cast<Index>(r);
        }
        return linear_index(idx);
    }

    bool contains(const Vec& x, double tol = 1e-12) const {
        for (std::size_t d = 0; d < counts.size(); ++d)
            if (x(static_cast<Index>(d)) < ranges[d].lo - tol || x(static_cast<Index>(d)) > ranges[d].hi + tol)
                return false;
        return true;
    }
};

/// Node indices retained by the grid's subgrid rule, in grid order.
inline std::vector<Index> select_subgrid(const SimGrid& grid) {
    grid.validate();
    std::vector<std::vector<Index>> keep(grid.counts.size());
    for (std::size_t d = 0; d < grid.counts.size(); ++d) {
        for (Index i = grid.subgrid.offset; i < grid.counts[d]; i += grid.subgrid.stride) keep[d].push_back(i);
        if (keep[d].empty()) throw ConfigError("subgrid rule selects nothing along a dimension");
    }
    std::vector<Index> out;
    std::vector<std::size_t> pos(grid.counts.size(), 0);
    while (true) {
        std::vector<Index> idx(grid.counts.size());
        for (std::size_t d = 0; d < idx.size(); ++d) idx[d] = keep[d][pos[d]];
        out.push_back(grid.linear_index(idx));
        std::size_t d = 0;
        while (d < pos.size() && ++pos[d] == keep[d].size()) pos[d++] = 0;
        if (d == pos.size()) break;
    }
    return out;
}

// ============================================================================
// Trajectory ensembles
// ============================================================================

/// Uniformly sampled autonomous trajectories. Each trajectory is an m x N
/// block; the flattened form used for projection concatenates the state rows
/// (x_1(t_0..t_{N-1}), x_2(t_0..t_{N-1}), ...).
struct TrajectoryEnsemble {
    double dt = 0.0;
    Index n_samples = 0;
    Mat initial_conditions;  // n_t x m
    std::vector<Mat> states;
    Index reference_index = 0;

    Index size() const { return static_cast<Index>(states.size()); }
    Index state_dim() const { return initial_conditions.cols(); }

    Vec time_axis() const {
        Vec t(n_samples);
        for (Index k = 0; k < n_samples; ++k) t(k) = static_cast<double>(k) * dt;
        return t;
    }

    const Mat& reference() const { return states.at(static_cast<std::size_t>(reference_index)); }

    /// All trajectories flattened into columns: (m N) x n_t.
    Mat flattened() const {
        const Index m = state_dim();
        Mat X(m * n_samples, size());
        for (Index i = 0; i < size(); ++i)
            for (Index s = 0; s < m; ++s)
                X.block(s * n_samples, i, n_samples, 1) = states[static_cast<std::size_t>(i)].row(s).transpose();
        return X;
    }

    /// New ensemble with x_fp subtracted from every sample.
    TrajectoryEnsemble shift_by(const Vec& x_fp) const {
        TrajectoryEnsemble out = *this;
        for (auto& s : out.states) s.colwise() -= x_fp;
        out.initial_conditions.rowwise() -= x_fp.transpose();
        return out;
    }

    void validate() const {
        if (states.empty()) throw StateError("empty ensemble");
        if (reference_index < 0 || reference_index >= size()) throw StateError("reference index out of range");
        for (const auto& s : states)
            if (s.cols() != n_samples || s.rows() != state_dim()) throw StateError("ragged ensemble");
    }
};

inline Vec flatten_trajectory(const Mat& x) {
    Vec out(x.size());
    for (Index s = 0; s < x.rows(); ++s) out.segment(s * x.cols(), x.cols()) = x.row(s).transpose();
    return out;
}

inline Mat unflatten_trajectory(const Vec& flat, Index m) {
    const Index n = flat.size() / m;
    Mat x(m, n);
    for (Index s = 0; s < m; ++s) x.row(s) = flat.segment(s * n, n).transpose();
    return x;
}

struct NoiseSpec {
    double variance = 0.0;
    std::uint64_t seed = 0;
};

/// Integrates one autonomous trajectory; traj_id only labels errors.
inline Mat integrate_autonomous(const DynSystem& sys, const Vec& x0, double dt, Index n_samples, Index traj_id = -1) {
    Mat out(sys.state_dim, n_samples);
    const Vec u0 = Vec::Zero(sys.input_dim);
    Vec x = x0;
    out.col(0) = x;
    for (Index k = 1; k < n_samples; ++k) {
        x = heun_step(sys, x, u0, dt);
        if (!x.allFinite()) throw IntegrationOverflowError(traj_id, k);
        out.col(k) = x;
    }
    return out;
}

/// One trajectory per grid node, integrated concurrently. Optional additive
/// Gaussian measurement noise is applied after integration (sample 0 included,
/// so initial_conditions keep the clean grid values).
inline TrajectoryEnsemble simulate_ensemble(const DynSystem& sys, const SimGrid& grid, double dt, Index n_samples,
                                            const Vec& reference_ic, const NoiseSpec& noise = {}) {
    grid.validate();
    if (grid.dims() != sys.state_dim) throw ConfigError("grid dimension differs from the system state dimension");
    if (n_samples < 2) throw ConfigError("need at least 2 samples per trajectory");
    const auto ref = grid.find_node(reference_ic);
    if (!ref) throw ConfigError("reference initial condition is not a grid node");

    TrajectoryEnsemble ens;
    ens.dt = dt;
    ens.n_samples = n_samples;
    ens.reference_index = *ref;
    ens.initial_conditions.resize(grid.size(), sys.state_dim);
    ens.states.resize(static_cast<std::size_t>(grid.size()));
    for (Index i = 0; i < grid.size(); ++i) ens.initial_conditions.row(i) = grid.node(i).transpose();

    parallel_for(grid.size(), [&](Index i) {
        ens.states[static_cast<std::size_t>(i)] =
            integrate_autonomous(sys, ens.initial_conditions.row(i).transpose(), dt, n_samples, i);
    });

    if (noise.variance > 0.0) {
        const double sd = std::sqrt(noise.variance);
        // one stream per trajectory keeps the draw independent of thread count
        parallel_for(grid.size(), [&](Index i) {
            std::seed_seq seq{static_cast<std::uint64_t>(noise.seed), static_cast<std::uint64_t>(i), std::uint64_t{0x6e6f697365}};
            std::mt19937_64 rng(seq);
            std::normal_distribution<double> nd(0.0, sd);
            auto& s = ens.states[static_cast<std::size_t>(i)];
            for (Index c = 0; c < s.cols(); ++c)
                for (Index r = 0; r < s.rows(); ++r) s(r, c) += nd(rng);
        });
    }
    return ens;
}

/// Input-driven trajectory with u held piecewise constant over each step.
/// `inputs` is input_dim x N; column k is applied on [t_k, t_{k+1}).
inline Mat simulate_driven(const DynSystem& sys, const Vec& x0, const Mat& inputs, double dt) {
    const Index n = inputs.cols();
    Mat out(sys.state_dim, n);
    Vec x = x0;
    out.col(0) = x;
    for (Index k = 1; k < n; ++k) {
        x = heun_step(sys, x, inputs.col(k - 1), dt);
        if (!x.allFinite()) throw IntegrationOverflowError(-1, k);
        out.col(k) = x;
    }
    return out;
}

/// Random piecewise-constant excitation: a new level, uniform in
/// [-amplitude, amplitude], every `hold` seconds.
inline Mat piecewise_constant_input(Index input_dim, Index n_samples, double dt, double hold, double amplitude,
                                    std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ud(-amplitude, amplitude);
    const Index per = std::max<Index>(1, static_cast<Index>(std::llround(hold / dt)));
    Mat u(input_dim, n_samples);
    Vec level(input_dim);
    for (Index k = 0; k < n_samples; ++k) {
        if (k % per == 0)
            for (Index j = 0; j < input_dim; ++j) level(j) = ud(rng);
        u.col(k) = level;
    }
    return u;
}

}  // namespace koopeig
