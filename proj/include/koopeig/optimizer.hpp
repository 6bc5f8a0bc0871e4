#pragma once

#include <koopeig/common.hpp>
#include <koopeig/spatial.hpp>
#include <koopeig/spectral.hpp>
#include <koopeig/systems.hpp>

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace koopeig {

// ============================================================================
// Search space and cost configuration
// ============================================================================

struct SearchSpace {
    Index n_free_pairs = 0;
    double re_min = -2.0;
    double re_max = -0.1;
    double im_min = 0.0;
    double im_max = 1.0;
    std::vector<EigenPair> fixed;
    double d_min = 0.05;
    double penalty_weight = 1.0;

    Index dim() const { return 2 * n_free_pairs; }

    Vec lower() const {
        Vec v(dim());
        for (Index i = 0; i < n_free_pairs; ++i) v.segment(2 * i, 2) << re_min, im_min;
        return v;
    }

    Vec upper() const {
        Vec v(dim());
        for (Index i = 0; i < n_free_pairs; ++i) v.segment(2 * i, 2) << re_max, im_max;
        return v;
    }

    void validate() const {
        if (n_free_pairs < 0) throw ConfigError("negative free pair count");
        for (double b : {re_min, re_max, im_min, im_max})
            if (!std::isfinite(b)) throw ConfigError("search bounds must be finite");
        if (!(re_min <= re_max) || !(im_min <= im_max) || im_min < 0.0)
            throw ConfigError("search bounds must satisfy lo <= hi and im >= 0");
        if (d_min < 0.0 || penalty_weight < 0.0) throw ConfigError("distance penalty settings must be >= 0");
    }
};

struct CostConfig {
    double ridge = 1e-6;
    double gamma = 1e-4;
    double imag_floor = EigenvalueSet::kDefaultImagFloor;
    std::optional<double> clamp;
    double smoothing = 1.0;
    bool exclude_ring = true;
    double failure_cost = 1e6;

    void validate() const {
        if (!(ridge >= 0.0) || !(gamma >= 0.0)) throw ConfigError("ridge and gamma must be >= 0");
        if (!(smoothing > 0.0 && smoothing <= 1.0)) throw ConfigError("smoothing must lie in (0, 1]");
        if (clamp && !(*clamp > 0.0)) throw ConfigError("clamp must be positive");
    }
};

struct CostBreakdown {
    double J = 0.0;
    double j_temp = 0.0;
    double j_kpde = 0.0;
    double penalty = 0.0;
    bool failed = false;
};

/// Soft penalty weight * (d_min - min distance) when any two eigenvalues
/// (upper half-plane representatives) are closer than d_min; 0 otherwise.
inline double distance_penalty(const EigenvalueSet& eigs, double d_min, double weight = 1.0) {
    const auto& p = eigs.pairs();
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = i + 1; j < p.size(); ++j)
            dmin = std::min(dmin, std::hypot(p[i].re - p[j].re, p[i].im - p[j].im));
    if (!(dmin < d_min)) return 0.0;
    return weight * (d_min - dmin);
}

// ============================================================================
// Total cost
// ============================================================================

/// Full diagnostic output of one cost evaluation.
struct CostDetail {
    EigenvalueSet eigs;
    TemporalFit fit;
    EigenfunctionField field;
    Mat residual;
    CostBreakdown cost;
};

/// Evaluates J = J_temp + gamma J_KPDE (+ distance penalty) for candidate
/// spectra on one ensemble. Immutable after construction and safe to call from
/// several threads.
class CostEvaluator {
public:
    /// `ens` holds the (possibly shifted) identification data; `sample_grid`
    /// is the initial-condition grid and `interp_grid` the KPDE grid. The
    /// drift is evaluated on interp_grid in the original coordinates.
    CostEvaluator(const DynSystem& sys, const TrajectoryEnsemble& ens, const SimGrid& sample_grid,
                  const SimGrid& interp_grid, CostConfig cfg, SearchSpace space)
        : ens_(ens), sample_grid_(sample_grid), interp_grid_(interp_grid), cfg_(cfg), space_(std::move(space)) {
        cfg_.validate();
        space_.validate();
        ens_.validate();
        if (ens_.size() != sample_grid_.size()) throw ConfigError("ensemble does not match its sampling grid");
        flat_ = ens_.flattened();
        subgrid_ = select_subgrid(sample_grid_);
        flat_sub_.resize(flat_.rows(), static_cast<Index>(subgrid_.size()));
        for (std::size_t i = 0; i < subgrid_.size(); ++i) flat_sub_.col(static_cast<Index>(i)) = flat_.col(subgrid_[i]);
        drift_ = drift_at_nodes(sys, interp_grid_);
    }

    const SearchSpace& space() const { return space_; }
    const CostConfig& config() const { return cfg_; }
    const TrajectoryEnsemble& ensemble() const { return ens_; }
    const Mat& flattened() const { return flat_; }
    const std::vector<Index>& subgrid() const { return subgrid_; }
    const SimGrid& sample_grid() const { return sample_grid_; }
    const SimGrid& interp_grid() const { return interp_grid_; }

    EigenvalueSet decode(const Vec& free_flat) const {
        return EigenvalueSet::from_free(space_.fixed, free_flat, cfg_.imag_floor);
    }

    CostBreakdown operator()(const Vec& free_flat) const { return evaluate(decode(free_flat)); }

    /// Scalar cost used by the search; failed solves map to failure_cost.
    CostBreakdown evaluate(const EigenvalueSet& eigs) const {
        CostBreakdown c;
        try {
            c = evaluate_unpenalized(eigs);
        } catch (const Error&) {
            c.failed = true;
        }
        if (c.failed || !std::isfinite(c.J)) {
            c = CostBreakdown{};
            c.failed = true;
            c.J = cfg_.failure_cost;
        }
        c.penalty = distance_penalty(eigs, space_.d_min, space_.penalty_weight);
        c.J += c.penalty;
        return c;
    }

    /// Full pipeline with every intermediate kept; errors propagate.
    CostDetail detail(const EigenvalueSet& eigs) const {
        CostDetail d;
        d.eigs = eigs;
        d.fit = fit_temporal(ens_, flat_, subgrid_, eigs, cfg_.ridge);
        d.cost.j_temp = d.fit.j_temp;
        d.field = interpolate_field(sample_grid_, d.fit.phi0, interp_grid_, cfg_.smoothing);
        gradient_central_diff(d.field);
        d.residual = kpde_residual(d.field, eigs, drift_);
        d.cost.j_kpde = kpde_cost(d.residual, kpde_active_nodes(d.field, cfg_.exclude_ring), cfg_.clamp);
        d.cost.penalty = distance_penalty(eigs, space_.d_min, space_.penalty_weight);
        d.cost.J = d.cost.j_temp + cfg_.gamma * d.cost.j_kpde + d.cost.penalty;
        return d;
    }

private:
    CostBreakdown evaluate_unpenalized(const EigenvalueSet& eigs) const {
        CostBreakdown c;
        const Vec t = ens_.time_axis();
        const Mat E = build_fundamental_basis(eigs, t);
        const ModeMatrix mm = fit_reference_modes(ens_.reference(), E, cfg_.ridge);
        const Mat B = build_projection_basis(mm.C_ref, eigs, t);
        const RidgeProjector proj(B, cfg_.ridge);
        if (cfg_.gamma > 0.0) {
            const Mat phi0 = proj.solve(flat_);
            c.j_temp = temporal_cost(flat_, subgrid_, B, phi0);
            EigenfunctionField f = interpolate_field(sample_grid_, phi0, interp_grid_, cfg_.smoothing);
            gradient_central_diff(f);
            const Mat r = kpde_residual(f, eigs, drift_);
            c.j_kpde = kpde_cost(r, kpde_active_nodes(f, cfg_.exclude_ring), cfg_.clamp);
        } else {
            const Mat phi0 = proj.solve(flat_sub_);
            c.j_temp = (flat_sub_ - B.transpose() * phi0).squaredNorm() / static_cast<double>(flat_sub_.size());
        }
        c.J = c.j_temp + cfg_.gamma * c.j_kpde;
        return c;
    }

    TrajectoryEnsemble ens_;
    SimGrid sample_grid_;
    SimGrid interp_grid_;
    CostConfig cfg_;
    SearchSpace space_;
    Mat flat_;
    Mat flat_sub_;
    std::vector<Index> subgrid_;
    Mat drift_;
};

/// (J, J_temp, J_KPDE) for one candidate with the given configuration.
inline CostBreakdown total_cost(const EigenvalueSet& eigs, const CostEvaluator& evaluator) {
    return evaluator.evaluate(eigs);
}

// ============================================================================
// Optimizer trace
// ============================================================================

struct TraceRow {
    std::string phase;
    Index iteration = 0;
    CostBreakdown cost;
    Vec best;
    Index evaluations = 0;
    double wall_seconds = 0.0;
};

struct OptimizerTrace {
    std::vector<TraceRow> rows;

    void append(const OptimizerTrace& other) { rows.insert(rows.end(), other.rows.begin(), other.rows.end()); }
};

struct SearchResult {
    Vec best;
    CostBreakdown cost;
    OptimizerTrace trace;
    Index evaluations = 0;
};

using CostFunction = std::function<CostBreakdown(const Vec&)>;

/// Wraps a scalar objective for the optimizers.
inline CostFunction scalar_cost(std::function<double(const Vec&)> f) {
    return [f = std::move(f)](const Vec& x) {
        CostBreakdown c;
        c.J = f(x);
        return c;
    };
}

// ============================================================================
// Particle swarm
// ============================================================================

struct PsoSettings {
    Index population = 50;
    Index generations = 200;
    double inertia = 0.73;
    double cognitive = 1.5;
    double social = 1.5;
    double velocity_clamp = 0.2;  // fraction of the bound range
    std::uint64_t seed = 1;
    std::vector<Vec> warm_start;  // replace the first particles
    int threads = 0;
};

/// Latin hypercube sample of n points in [lower, upper].
inline std::vector<Vec> latin_hypercube(Index n, const Vec& lower, const Vec& upper, std::mt19937_64& rng) {
    const Index d = lower.size();
    std::vector<Vec> pts(static_cast<std::size_t>(n), Vec(d));
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    std::vector<Index> perm(static_cast<std::size_t>(n));
    for (Index j = 0; j < d; ++j) {
        std::iota(perm.begin(), perm.end(), Index{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        for (Index i = 0; i < n; ++i) {
            const double u = (static_cast<double>(perm[static_cast<std::size_t>(i)]) + ud(rng)) / static_cast<double>(n);
            pts[static_cast<std::size_t>(i)](j) = lower(j) + u * (upper(j) - lower(j));
        }
    }
    return pts;
}

/// Global-best PSO with bound clipping. Particles are evaluated in parallel;
/// the best-so-far reduction runs in particle order, so results depend only on
/// the seed.
inline SearchResult pso_search(const Vec& lower, const Vec& upper, const CostFunction& cost, const PsoSettings& s) {
    if (s.population < 2) throw ConfigError("PSO population must be >= 2");
    if (lower.size() != upper.size()) throw ConfigError("PSO bounds differ in size");
    const Index d = lower.size();
    const auto t0 = std::chrono::steady_clock::now();
    const Vec range = upper - lower;
    const Vec vmax = s.velocity_clamp * range;

    std::mt19937_64 master(s.seed);
    std::vector<Vec> x = latin_hypercube(s.population, lower, upper, master);
    for (std::size_t i = 0; i < s.warm_start.size() && i < x.size(); ++i)
        x[i] = s.warm_start[i].cwiseMax(lower).cwiseMin(upper);
    std::vector<Vec> v(x.size(), Vec::Zero(d));
    std::vector<std::mt19937_64> rngs;
    for (Index i = 0; i < s.population; ++i) {
        std::seed_seq seq{static_cast<std::uint64_t>(s.seed), static_cast<std::uint64_t>(i)};
        rngs.emplace_back(seq);
        std::uniform_real_distribution<double> ud(-1.0, 1.0);
        for (Index j = 0; j < d; ++j) v[static_cast<std::size_t>(i)](j) = 0.5 * vmax(j) * ud(rngs.back());
    }

    std::vector<CostBreakdown> fx(x.size());
    const auto evaluate_all = [&] {
        parallel_for(s.population, [&](Index i) { fx[static_cast<std::size_t>(i)] = cost(x[static_cast<std::size_t>(i)]); },
                     s.threads);
    };
    evaluate_all();
    std::vector<Vec> pbest = x;
    std::vector<CostBreakdown> pcost = fx;
    std::size_t g = 0;
    for (std::size_t i = 1; i < x.size(); ++i)
        if (fx[i].J < fx[g].J) g = i;
    SearchResult res;
    res.best = x[g];
    res.cost = fx[g];
    res.evaluations = s.population;

    const auto record = [&](Index gen) {
        TraceRow row;
        row.phase = "pso";
        row.iteration = gen;
        row.cost = res.cost;
        row.best = res.best;
        row.evaluations = res.evaluations;
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.trace.rows.push_back(std::move(row));
    };
    record(0);

    for (Index gen = 1; gen <= s.generations; ++gen) {
        for (Index i = 0; i < s.population; ++i) {
            auto& xi = x[static_cast<std::size_t>(i)];
            auto& vi = v[static_cast<std::size_t>(i)];
            auto& rng = rngs[static_cast<std::size_t>(i)];
            std::uniform_real_distribution<double> ud(0.0, 1.0);
            for (Index j = 0; j < d; ++j) {
                const double r1 = ud(rng), r2 = ud(rng);
                double vj = s.inertia * vi(j) + s.cognitive * r1 * (pbest[static_cast<std::size_t>(i)](j) - xi(j)) +
                            s.social * r2 * (res.best(j) - xi(j));
                vj = std::clamp(vj, -vmax(j), vmax(j));
                double xj = xi(j) + vj;
                if (xj < lower(j)) {
                    xj = lower(j);
                    vj = 0.0;
                } else if (xj > upper(j)) {
                    xj = upper(j);
                    vj = 0.0;
                }
                vi(j) = vj;
                xi(j) = xj;
            }
        }
        evaluate_all();
        res.evaluations += s.population;
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (fx[i].J < pcost[i].J) {
                pcost[i] = fx[i];
                pbest[i] = x[i];
            }
            if (fx[i].J < res.cost.J) {
                res.cost = fx[i];
                res.best = x[i];
            }
        }
        record(gen);
    }
    return res;
}

// ============================================================================
// Nelder-Mead
// ============================================================================

struct NelderMeadSettings {
    Index max_iter = 1000;
    double reflection = 1.0;
    double expansion = 2.0;
    double contraction = 0.5;
    double shrink = 0.5;
    double ftol = 1e-16;
    double xtol = 1e-10;
};

/// Initial simplex: x0 plus 5% of each coordinate (0.00025 for zeros),
/// stepping inward when the step would leave the box.
inline std::vector<Vec> default_simplex(const Vec& x0, const Vec& lower, const Vec& upper) {
    std::vector<Vec> sx{x0};
    for (Index j = 0; j < x0.size(); ++j) {
        Vec p = x0;
        const double step = x0(j) != 0.0 ? 0.05 * std::abs(x0(j)) : 0.00025;
        p(j) = x0(j) + step <= upper(j) ? x0(j) + step : x0(j) - step;
        p(j) = std::clamp(p(j), lower(j), upper(j));
        sx.push_back(p);
    }
    return sx;
}

/// Nelder-Mead from an explicit simplex (dim + 1 vertices, first vertex is the
/// start point). Trial points are projected onto the box. Never returns a cost
/// above the start point's.
inline SearchResult nelder_mead_refine(std::vector<Vec> simplex, const Vec& lower, const Vec& upper,
                                       const CostFunction& cost, const NelderMeadSettings& s = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const Index d = lower.size();
    if (static_cast<Index>(simplex.size()) != d + 1) throw ConfigError("simplex needs dim + 1 vertices");
    const auto project = [&](Vec p) { return p.cwiseMax(lower).cwiseMin(upper).eval(); };
    for (auto& p : simplex) p = project(p);

    SearchResult res;
    std::vector<CostBreakdown> f(simplex.size());
    for (std::size_t i = 0; i < simplex.size(); ++i) f[i] = cost(simplex[i]);
    res.evaluations = d + 1;
    const Vec start = simplex[0];
    const CostBreakdown start_cost = f[0];

    std::vector<std::size_t> order(simplex.size());
    const auto sort_simplex = [&] {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return f[a].J < f[b].J; });
        std::vector<Vec> s2;
        std::vector<CostBreakdown> f2;
        for (auto i : order) {
            s2.push_back(simplex[i]);
            f2.push_back(f[i]);
        }
        simplex.swap(s2);
        f.swap(f2);
    };

    Index it = 0;
    for (; it < s.max_iter; ++it) {
        sort_simplex();
        double fspread = 0.0, xspread = 0.0;
        for (std::size_t i = 1; i < simplex.size(); ++i) {
            fspread = std::max(fspread, std::abs(f[i].J - f[0].J));
            xspread = std::max(xspread, (simplex[i] - simplex[0]).lpNorm<Eigen::Infinity>());
        }
        TraceRow row;
        row.phase = "nm";
        row.iteration = it;
        row.cost = f[0];
        row.best = simplex[0];
        row.evaluations = res.evaluations;
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.trace.rows.push_back(std::move(row));
        if (xspread <= s.xtol || (fspread <= s.ftol && xspread <= std::sqrt(s.xtol))) break;

        Vec centroid = Vec::Zero(d);
        for (Index i = 0; i < d; ++i) centroid += simplex[static_cast<std::size_t>(i)];
        centroid /= static_cast<double>(d);
        const Vec& worst = simplex.back();

        const Vec xr = project(centroid + s.reflection * (centroid - worst));
        const CostBreakdown fr = cost(xr);
        ++res.evaluations;
        if (fr.J < f[0].J) {
            const Vec xe = project(centroid + s.expansion * (xr - centroid));
            const CostBreakdown fe = cost(xe);
            ++res.evaluations;
            if (fe.J < fr.J) {
                simplex.back() = xe;
                f.back() = fe;
            } else {
                simplex.back() = xr;
                f.back() = fr;
            }
            continue;
        }
        if (fr.J < f[static_cast<std::size_t>(d - 1)].J) {
            simplex.back() = xr;
            f.back() = fr;
            continue;
        }
        const bool outside = fr.J < f.back().J;
        const Vec xc = outside ? project(centroid + s.contraction * (xr - centroid))
                               : project(centroid + s.contraction * (worst - centroid));
        const CostBreakdown fc = cost(xc);
        ++res.evaluations;
        if (fc.J < (outside ? fr.J : f.back().J)) {
            simplex.back() = xc;
            f.back() = fc;
            continue;
        }
        for (std::size_t i = 1; i < simplex.size(); ++i) {
            simplex[i] = project(simplex[0] + s.shrink * (simplex[i] - simplex[0]));
            f[i] = cost(simplex[i]);
            ++res.evaluations;
        }
    }
    sort_simplex();
    if (f[0].J <= start_cost.J) {
        res.best = simplex[0];
        res.cost = f[0];
    } else {
        res.best = start;
        res.cost = start_cost;
    }
    return res;
}

inline SearchResult nelder_mead_refine(const Vec& x0, const Vec& lower, const Vec& upper, const CostFunction& cost,
                                       const NelderMeadSettings& s = {}) {
    return nelder_mead_refine(default_simplex(x0, lower, upper), lower, upper, cost, s);
}

// ============================================================================
// Identification driver
// ============================================================================

struct IdentificationSettings {
    PsoSettings pso;
    NelderMeadSettings nm;
    bool temporal_first = false;  // PSO phase with gamma = 0, then NM with gamma
};

struct IdentificationResult {
    EigenvalueSet eigs;
    SearchResult pso;
    SearchResult nm;
    CostBreakdown cost;
    OptimizerTrace trace;
};

/// PSO over the free pairs followed by Nelder-Mead from the swarm's best.
/// With temporal_first the swarm sees J_temp only (the two-phase schedule) and
/// the refinement uses the full cost of `evaluator`.
inline IdentificationResult identify_eigenvalues(const CostEvaluator& evaluator, const IdentificationSettings& s,
                                                 const CostEvaluator* temporal_only = nullptr) {
    const SearchSpace& sp = evaluator.space();
    IdentificationResult out;
    const Vec lo = sp.lower(), hi = sp.upper();
    const CostEvaluator& phase1 = (s.temporal_first && temporal_only) ? *temporal_only : evaluator;
    const CostFunction f1 = [&phase1](const Vec& x) { return phase1(x); };
    const CostFunction f2 = [&evaluator](const Vec& x) { return evaluator(x); };
    if (sp.dim() == 0) {
        out.eigs = evaluator.decode(Vec());
        out.cost = evaluator.evaluate(out.eigs);
        return out;
    }
    out.pso = pso_search(lo, hi, f1, s.pso);
    out.nm = nelder_mead_refine(out.pso.best, lo, hi, f2, s.nm);
    out.eigs = evaluator.decode(out.nm.best);
    out.cost = out.nm.cost;
    out.trace = out.pso.trace;
    out.trace.append(out.nm.trace);
    return out;
}

// ============================================================================
// Conservative mode
// ============================================================================

struct ExtendedModel {
    EigenvalueSet eigs;
    Mat phi0;
    Mat C_ref;
};

/// Prepends lambda_0 = 0 with the constant eigenfunction 1 and mode column x_fp.
inline ExtendedModel concat_conservative_mode(const EigenvalueSet& eigs, const Mat& phi0, const Mat& C_ref,
                                              const Vec& fixed_point) {
    if (C_ref.rows() != fixed_point.size()) throw ConfigError("fixed point dimension differs from the mode matrix");
    ExtendedModel m;
    m.eigs = eigs.prepend(EigenPair{0.0, 0.0, true});
    m.phi0.resize(phi0.rows() + 1, phi0.cols());
    m.phi0.row(0).setOnes();
    m.phi0.bottomRows(phi0.rows()) = phi0;
    m.C_ref.resize(C_ref.rows(), C_ref.cols() + 1);
    m.C_ref.col(0) = fixed_point;
    m.C_ref.rightCols(C_ref.cols()) = C_ref;
    return m;
}

}  // namespace koopeig
