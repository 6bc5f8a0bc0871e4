#pragma once

// Stage runner: simulate -> optimize -> refine -> inputdyn -> control, with
// artifact output and parameter sweeps.

#include <koopeig/common.hpp>
#include <koopeig/config.hpp>
#include <koopeig/control.hpp>
#include <koopeig/inputdyn.hpp>
#include <koopeig/io.hpp>
#include <koopeig/optimizer.hpp>
#include <koopeig/spatial.hpp>
#include <koopeig/spectral.hpp>
#include <koopeig/systems.hpp>

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace koopeig {

inline constexpr const char* kVersion = "0.1.0";

enum class Stage { simulate = 0, optimize = 1, refine = 2, inputdyn = 3, control = 4 };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::simulate: return "simulate";
        case Stage::optimize: return "optimize";
        case Stage::refine: return "refine";
        case Stage::inputdyn: return "inputdyn";
        case Stage::control: return "control";
    }
    return "?";
}

inline Stage parse_stage(const std::string& s) {
    for (int i = 0; i <= 4; ++i)
        if (s == stage_name(static_cast<Stage>(i))) return static_cast<Stage>(i);
    throw ConfigError("unknown stage '" + s + "' (simulate, optimize, refine, inputdyn, control)");
}

/// Process exit code for a failure in stage s.
inline int stage_exit_code(Stage s) { return 10 + static_cast<int>(s); }

class StageFailure : public Error {
public:
    StageFailure(Stage s, const std::string& what)
        : Error(std::string(stage_name(s)) + " stage failed: " + what), stage(s) {}
    Stage stage;
};

struct RunOptions {
    Stage last = Stage::control;
    std::optional<std::filesystem::path> out;  // no artifacts when empty
};

struct InputDynResult {
    Mat inputs;
    Vec t;
    Mat x_true;
    LpvPrediction interp;
    LpvPrediction surrogate;
    double mae_interp = 0.0;
    double mae_surrogate = 0.0;
    SurrogateFit fit;
};

struct ControlRunMetrics {
    std::string run;
    Index output = 0;
    StepMetrics metrics;
};

struct ControlResult {
    ControlModel model;
    Mat Q_o;
    Mat R_o;
    Mat L;
    GainSchedule schedule;
    double max_closed_loop_re = 0.0;
    double schedule_jump = 0.0;
    double observer_max_re = 0.0;
    ClosedLoopRun lqg;
    ClosedLoopRun pi;
    ClosedLoopRun lqg_sat_aw;
    ClosedLoopRun lqg_sat_noaw;
    std::vector<ControlRunMetrics> metrics;
};

struct BasinResult {
    Mat nodes;
    Vec indicator;
    SeparatrixEstimate estimate;
    std::vector<std::uint8_t> predicted;
    std::vector<std::uint8_t> oracle;
    Vec distance;
    double agreement = 0.0;
    Index scored = 0;
    bool origin_in_band = false;
};

struct StageTiming {
    std::string stage;
    double seconds = 0.0;
    std::string status;
};

struct PipelineResult {
    ExperimentConfig cfg;
    DynSystem sys;
    SimGrid grid;
    TrajectoryEnsemble ensemble;        // as simulated (noisy when noise is configured)
    TrajectoryEnsemble clean;           // noise-free copy when noise is configured
    std::optional<Vec> fixed_point;     // set when the data were shifted
    std::optional<double> frequency;    // data-estimated limit-cycle frequency
    IdentificationResult ident;
    CostDetail detail;
    double clean_error = 0.0;           // reconstruction error against noise-free data
    ExtendedModel model;                // with the conservative mode when shifted
    EigenfunctionField field;           // final field (refined when enabled), model order
    std::optional<Mat> refined_phi0;
    std::optional<SimGrid> refined_grid;
    std::optional<BasinResult> basins;
    std::optional<InputDynResult> inputdyn;
    std::optional<ControlResult> control;
    std::vector<StageTiming> timings;
    std::vector<std::string> artifacts;
    Stage completed = Stage::simulate;
    bool any_completed = false;
};

namespace detail {

class Timer {
public:
    Timer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

inline Mat selection_matrix(const std::vector<Index>& tracked, Index m) {
    if (tracked.empty()) return Mat::Identity(m, m);
    Mat S = Mat::Zero(static_cast<Index>(tracked.size()), m);
    for (std::size_t i = 0; i < tracked.size(); ++i) {
        if (tracked[i] < 0 || tracked[i] >= m) throw ConfigError("tracked output index out of range");
        S(static_cast<Index>(i), tracked[i]) = 1.0;
    }
    return S;
}

inline std::vector<Index> nonconservative_rows(const EigenvalueSet& eigs) {
    std::vector<Index> keep;
    for (std::size_t i = 0; i < eigs.size(); ++i) {
        const auto& p = eigs.pairs()[i];
        if (p.re == 0.0 && p.im == 0.0) continue;
        for (Index b = 0; b < eigs.block_size(i); ++b) keep.push_back(eigs.block_offset(i) + b);
    }
    return keep;
}

inline Mat take_rows(const Mat& M, const std::vector<Index>& rows) {
    Mat out(static_cast<Index>(rows.size()), M.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = M.row(rows[i]);
    return out;
}

/// Mean square error of the identified model's reconstruction against a
/// reference ensemble (all trajectories).
inline double reconstruction_error(const TrajectoryEnsemble& truth, const Mat& C_ref, const EigenvalueSet& eigs,
                                   const Mat& phi0, const std::optional<Vec>& shift) {
    const Vec t = truth.time_axis();
    const Mat B = build_projection_basis(C_ref, eigs, t);
    double acc = 0.0;
    for (Index i = 0; i < truth.size(); ++i) {
        Mat x = truth.states[static_cast<std::size_t>(i)];
        if (shift) x.colwise() -= *shift;
        acc += (flatten_trajectory(x) - B.transpose() * phi0.col(i)).squaredNorm();
    }
    return acc / static_cast<double>(truth.size() * truth.state_dim() * truth.n_samples);
}

class ArtifactSink {
public:
    ArtifactSink(std::optional<std::filesystem::path> dir, std::vector<std::string>& list)
        : dir_(std::move(dir)), list_(list) {
        if (dir_) std::filesystem::create_directories(*dir_);
    }
    bool enabled() const { return dir_.has_value(); }
    std::filesystem::path operator()(const std::string& name) {
        if (std::find(list_.begin(), list_.end(), name) == list_.end()) list_.push_back(name);
        return *dir_ / name;
    }

private:
    std::optional<std::filesystem::path> dir_;
    std::vector<std::string>& list_;
};

inline json timings_json(const std::vector<StageTiming>& t) {
    json a = json::array();
    for (const auto& s : t) a.push_back({{"stage", s.stage}, {"status", s.status}, {"seconds", s.seconds}});
    return a;
}

}  // namespace detail

// ============================================================================
// Individual stages
// ============================================================================

inline void stage_simulate(PipelineResult& r) {
    const auto& c = r.cfg;
    r.grid = c.sim.grid();
    r.ensemble = simulate_ensemble(r.sys, r.grid, c.sim.dt, c.sim.n_samples, c.sim.reference,
                                   NoiseSpec{c.sim.noise_variance, c.seed});
    if (c.sim.noise_variance > 0.0)
        r.clean = simulate_ensemble(r.sys, r.grid, c.sim.dt, c.sim.n_samples, c.sim.reference);
    if (c.sim.shift_fixed_point) {
        if (c.sim.fixed_point)
            r.fixed_point = *c.sim.fixed_point;
        else if (!r.sys.known_fixed_points.empty())
            r.fixed_point = r.sys.known_fixed_points.front();
        else
            throw ConfigError("shift_fixed_point needs a fixed point");
    }
}

inline void stage_optimize(PipelineResult& r) {
    const auto& c = r.cfg;
    SearchSpace space = c.search.space;
    if (c.search.estimate_frequency) {
        r.frequency = estimate_fundamental_frequency(r.ensemble);
        space.fixed.insert(space.fixed.begin(), EigenPair{0.0, *r.frequency, true});
    }
    const TrajectoryEnsemble ens = r.fixed_point ? r.ensemble.shift_by(*r.fixed_point) : r.ensemble;
    const SimGrid interp(c.sim.ranges, c.interp_counts);
    const CostEvaluator evaluator(r.sys, ens, r.grid, interp, c.cost, space);
    std::optional<CostEvaluator> temporal;
    if (c.optimizer.temporal_first) {
        CostConfig tc = c.cost;
        tc.gamma = 0.0;
        temporal.emplace(r.sys, ens, r.grid, interp, tc, space);
    }
    r.ident = identify_eigenvalues(evaluator, c.optimizer, temporal ? &*temporal : nullptr);
    r.detail = evaluator.detail(r.ident.eigs);
    const TrajectoryEnsemble& truth = c.sim.noise_variance > 0.0 ? r.clean : r.ensemble;
    r.clean_error =
        detail::reconstruction_error(truth, r.detail.fit.modes.C_ref, r.ident.eigs, r.detail.fit.phi0, r.fixed_point);
    if (r.fixed_point)
        r.model = concat_conservative_mode(r.ident.eigs, r.detail.fit.phi0, r.detail.fit.modes.C_ref, *r.fixed_point);
    else
        r.model = ExtendedModel{r.ident.eigs, r.detail.fit.phi0, r.detail.fit.modes.C_ref};
    r.field = r.fixed_point ? extend_field_conservative(r.detail.field) : r.detail.field;
}

inline BasinResult basin_check(const PipelineResult& r, const SimGrid& grid, const Mat& phi0) {
    const auto& sx = r.cfg.separatrix;
    std::optional<Index> row;
    for (std::size_t i = 0; i < r.ident.eigs.size(); ++i) {
        const auto& p = r.ident.eigs.pairs()[i];
        if (p.re == 0.0 && p.im == 0.0) {
            row = r.ident.eigs.block_offset(i);
            break;
        }
    }
    if (!row) throw ConfigError("separatrix detection needs a zero eigenvalue in the spectrum");
    BasinResult b;
    b.nodes = grid.nodes();
    b.indicator = phi0.row(*row).transpose();
    b.estimate = separatrix_mask(b.indicator, sx.margin);
    b.predicted = classify_basins(b.indicator, b.estimate);
    b.oracle = basin_oracle(r.sys, b.nodes, sx.oracle_horizon);
    const SimGrid fine(grid.ranges, sx.oracle_counts);
    const Mat fine_nodes = fine.nodes();
    const auto fine_labels = basin_oracle(r.sys, fine_nodes, sx.oracle_horizon);
    b.distance = separatrix_distance(b.nodes, b.oracle, fine_nodes, fine_labels);
    // the indicator's sign convention is arbitrary: score the better of the two label maps
    Index agree = 0, scored = 0;
    for (Index k = 0; k < b.nodes.cols(); ++k) {
        if (b.distance(k) < sx.min_distance) continue;
        ++scored;
        agree += b.predicted[static_cast<std::size_t>(k)] == b.oracle[static_cast<std::size_t>(k)];
    }
    b.scored = scored;
    const double a = scored ? static_cast<double>(agree) / static_cast<double>(scored) : 0.0;
    b.agreement = b.estimate.bimodal ? std::max(a, 1.0 - a) : 0.0;
    Vec origin = Vec::Zero(grid.dims());
    if (grid.contains(origin)) {
        // the origin is usually between nodes: interpolate the indicator there
        const double v = sample_nodes(grid, b.indicator.transpose(), origin)(0);
        b.origin_in_band = b.estimate.bimodal && std::abs(v - b.estimate.midpoint) < sx.margin;
    }
    return b;
}

inline void stage_refine(PipelineResult& r) {
    const auto& c = r.cfg;
    EigenfunctionField refined;
    if (c.refine.enabled) {
        RefinementConfig rc;
        rc.sample_grid = SimGrid(c.refine.ranges, c.refine.counts);
        rc.interp_grid = SimGrid(c.refine.ranges, c.refine.interp_counts);
        rc.dt = c.sim.dt;
        rc.n_samples = c.sim.n_samples;
        rc.ridge = c.cost.ridge;
        rc.smoothing = c.cost.smoothing;
        rc.shift = r.fixed_point;
        Mat phi0;
        refined = refine_field(r.sys, r.ident.eigs, r.detail.fit.modes.C_ref, rc, &phi0);
        r.field = r.fixed_point ? extend_field_conservative(refined) : refined;
        r.refined_phi0 = phi0;
        r.refined_grid = rc.sample_grid;
    }
    if (c.separatrix.enabled) {
        // the interpolated field resolves the transition between sample nodes,
        // so the band traces the separatrix instead of isolated nodes
        const EigenfunctionField& f = c.refine.enabled ? refined : r.detail.field;
        r.basins = basin_check(r, f.grid, f.values);
    }
}

inline void stage_inputdyn(PipelineResult& r) {
    const auto& c = r.cfg;
    const auto& in = c.inputdyn;
    if (r.sys.input_dim == 0) throw ConfigError("input dynamics need a system with inputs");
    InputDynResult out;
    const LiftedInputField lifted = lifted_input_samples(r.field, r.sys);
    LiftedInputField train = lifted;
    if (!in.train_ranges.empty()) {
        if (static_cast<Index>(in.train_ranges.size()) != lifted.grid.dims())
            throw ConfigError("inputdyn.train_ranges must have one range per state");
        if (train.mask.empty()) train.mask.assign(static_cast<std::size_t>(train.grid.size()), 0);
        for (Index k = 0; k < train.grid.size(); ++k) {
            const Vec x = train.grid.node(k);
            for (Index j = 0; j < x.size(); ++j) {
                const auto& rg = in.train_ranges[static_cast<std::size_t>(j)];
                if (x(j) < rg.lo || x(j) > rg.hi) train.mask[static_cast<std::size_t>(k)] = 1;
            }
        }
    }
    SurrogateTraining tr = in.training;
    tr.seed = c.seed;
    out.fit = fit_sigmoid_surrogate(train, tr);

    const Vec x0 = in.x0.size() ? in.x0
                   : r.fixed_point ? *r.fixed_point
                   : (r.sys.known_fixed_points.empty() ? Vec(Vec::Zero(r.sys.state_dim)) : r.sys.known_fixed_points.front());
    out.inputs = piecewise_constant_input(r.sys.input_dim, in.n_samples, in.dt, in.hold, in.amplitude,
                                          c.seed + in.seed_offset);
    out.t = linspace(0.0, in.dt * static_cast<double>(in.n_samples - 1), in.n_samples);
    out.x_true = simulate_driven(r.sys, x0, out.inputs, in.dt);
    bool outside = false;
    const Vec phi_init = evaluate_field(r.field, x0, &outside);
    if (outside) throw ConfigError("input-driven validation starts outside the field grid");
    const Mat lambda = r.model.eigs.lambda_matrix();
    out.interp = predict_lpv(lambda, r.model.C_ref, input_dynamics_from(lifted), phi_init, out.inputs, in.dt);
    out.surrogate = predict_lpv(lambda, r.model.C_ref, input_dynamics_from(out.fit.model), phi_init, out.inputs, in.dt);
    out.mae_interp = sum_mae(out.x_true, out.interp.states);
    out.mae_surrogate = sum_mae(out.x_true, out.surrogate.states);
    r.inputdyn = std::move(out);
}

inline void stage_control(PipelineResult& r) {
    const auto& c = r.cfg;
    const auto& cc = c.control;
    if (!r.inputdyn) throw StateError("control needs the input-dynamics stage");
    const auto& id = *r.inputdyn;
    const Index m = r.sys.state_dim, p = r.sys.input_dim;
    ControlResult out;
    const InputDynamics gamma = input_dynamics_from(id.fit.model);
    out.model = reduce_conservative(r.model.eigs, r.model.C_ref, gamma);
    const Index n = out.model.n();

    // Kalman filter weights: configured, or estimated on the validation run
    const std::vector<Index> keep = detail::nonconservative_rows(r.model.eigs);
    if (cc.q_o.size() && cc.r_o.size()) {
        if (cc.q_o.size() != n || cc.r_o.size() != m) throw ConfigError("q_o / r_o sizes do not match the model");
        out.Q_o = cc.q_o.asDiagonal();
        out.R_o = cc.r_o.asDiagonal();
    } else {
        const Index N = id.x_true.cols();
        Mat phi_filt(r.model.eigs.n_phi(), N), phi_dot(r.model.eigs.n_phi(), N);
        const Mat lambda = r.model.eigs.lambda_matrix();
        for (Index k = 0; k < N; ++k) {
            const Vec x = id.x_true.col(k);
            phi_filt.col(k) = evaluate_field(r.field, x);
            phi_dot.col(k) = lambda * phi_filt.col(k) + id.fit.model.evaluate(x) * id.inputs.col(k);
        }
        const NoiseCovariances cov = estimate_noise_covariances(id.x_true, r.model.C_ref, id.surrogate.phi, phi_filt,
                                                                phi_dot, c.inputdyn.dt, cc.literal_dt);
        out.Q_o = detail::take_rows(detail::take_rows(cov.process, keep).transpose(), keep);
        out.R_o = cov.measurement;
        out.Q_o.diagonal().array() += cc.kf_floor;
        out.R_o.diagonal().array() += cc.kf_floor;
    }
    out.L = design_kalman(out.model.lambda, out.model.C, out.Q_o, out.R_o);
    out.observer_max_re = max_real_part(out.model.lambda - out.L * out.model.C);

    // gain schedule
    LqrWeights w;
    w.Q_x = cc.q_x.size() ? Mat(cc.q_x.asDiagonal()) : Mat(Mat::Identity(m, m));
    if (w.Q_x.rows() != m) throw ConfigError("q_x must have one entry per state");
    w.Q_u = cc.q_u.asDiagonal();
    w.R = cc.r.asDiagonal();
    w.phi_regularization = cc.phi_regularization;
    const SimGrid sched(cc.schedule_ranges, cc.schedule_counts);
    std::vector<Vec> points;
    for (Index k = 0; k < sched.size(); ++k) points.push_back(sched.node(k));
    out.schedule = design_lqr_grid(out.model, cc.actuator, w, points, id.fit.model);
    out.max_closed_loop_re = *std::max_element(out.schedule.max_closed_loop_re.begin(), out.schedule.max_closed_loop_re.end());
    out.schedule_jump = schedule_jump(out.schedule, sched);

    // closed-loop runs
    ClosedLoopConfig lc;
    lc.dt = cc.dt;
    lc.horizon = cc.horizon;
    lc.actuator = cc.actuator;
    lc.K_i = cc.K_i;
    lc.select = detail::selection_matrix(cc.tracked, m);
    lc.setpoints = cc.setpoints;
    lc.measurement_noise_variance = cc.measurement_noise_variance;
    lc.seed = c.seed;
    const Vec x0 = cc.x0.size() ? cc.x0
                   : r.fixed_point ? *r.fixed_point
                   : (r.sys.known_fixed_points.empty() ? Vec(Vec::Zero(m)) : r.sys.known_fixed_points.front());
    const SteadyState ss0 = scheduled_steady_state(out.model, x0, lc.select);
    const Vec u0 = Vec::Zero(p);
    const LqgController lqg{out.model, out.L, out.schedule};
    out.lqg = simulate_closed_loop(r.sys, lqg, lc, x0, u0, ss0.phi);
    out.pi = simulate_pi(r.sys, PiController{cc.pi.kp, cc.pi.ki, u0}, lc, x0);
    ClosedLoopConfig sat = lc;
    sat.actuator.lower = cc.saturated_lower;
    sat.actuator.upper = cc.saturated_upper;
    out.lqg_sat_aw = simulate_closed_loop(r.sys, lqg, sat, x0, u0, ss0.phi);
    sat.anti_windup = false;
    out.lqg_sat_noaw = simulate_closed_loop(r.sys, lqg, sat, x0, u0, ss0.phi);

    if (!cc.setpoints.empty()) {
        const Vec target = lc.select * cc.setpoints.front().value;
        const Vec start = lc.select * x0;
        const std::vector<std::pair<std::string, const ClosedLoopRun*>> runs{
            {"lqg", &out.lqg}, {"pi", &out.pi}, {"lqg_sat_aw", &out.lqg_sat_aw}, {"lqg_sat_noaw", &out.lqg_sat_noaw}};
        for (const auto& [name, run] : runs)
            for (Index j = 0; j < lc.select.rows(); ++j) {
                const Vec y = (lc.select.row(j) * run->x).transpose();
                out.metrics.push_back({name, j, step_metrics(run->t, y, cc.step_time, start(j), target(j))});
            }
    }
    r.control = std::move(out);
}

// ============================================================================
// Artifacts
// ============================================================================

namespace detail {

inline void write_stage_artifacts(const PipelineResult& r, Stage s, ArtifactSink& sink) {
    if (!sink.enabled()) return;
    const auto& c = r.cfg;
    switch (s) {
        case Stage::simulate:
            io::write_ensemble_csv(sink("ensemble.csv"), r.ensemble);
            break;
        case Stage::optimize: {
            json e = io::to_json(r.model.eigs);
            e["identified"] = io::to_json(r.ident.eigs);
            if (r.frequency) e["estimated_frequency"] = *r.frequency;
            if (r.fixed_point) e["fixed_point"] = io::to_json(*r.fixed_point);
            e["C_ref"] = io::to_json(r.model.C_ref);
            io::write_json(sink("eigenvalues.json"), e);
            io::write_grid_values_csv(sink("phi0.csv"), r.grid, r.model.phi0);
            io::write_trace_csv(sink("trace.csv"), r.ident.trace);
            json costs = io::to_json(r.detail.cost);
            costs["optimizer_best"] = io::to_json(r.ident.cost);
            costs["gamma"] = c.cost.gamma;
            costs["ridge"] = c.cost.ridge;
            costs["clean_error"] = r.clean_error;
            costs["evaluations"] = r.ident.pso.evaluations + r.ident.nm.evaluations;
            io::write_json(sink("costs.json"), costs);
            io::write_field_csv(sink("field.csv"), r.field, c.field_stride);
            io::write_gradients_csv(sink("gradients.csv"), r.field, c.field_stride);
            break;
        }
        case Stage::refine:
            if (r.refined_phi0) {
                const Mat phi = r.fixed_point ? extend_field_conservative(EigenfunctionField{*r.refined_grid, *r.refined_phi0, {}, 1.0, {}}).values
                                              : *r.refined_phi0;
                io::write_grid_values_csv(sink("phi0_refined.csv"), *r.refined_grid, phi);
                io::write_field_csv(sink("field.csv"), r.field, c.field_stride);
                io::write_gradients_csv(sink("gradients.csv"), r.field, c.field_stride);
            }
            if (r.basins) {
                const auto& b = *r.basins;
                io::CsvWriter w(sink("basins.csv"));
                w.header({"x1", "x2", "indicator", "band", "predicted", "oracle", "oracle_distance"});
                for (Index k = 0; k < b.nodes.cols(); ++k)
                    w.cell(Vec(b.nodes.col(k)))
                        .cell(b.indicator(k))
                        .cell(static_cast<int>(b.estimate.mask[static_cast<std::size_t>(k)]))
                        .cell(static_cast<int>(b.predicted[static_cast<std::size_t>(k)]))
                        .cell(static_cast<int>(b.oracle[static_cast<std::size_t>(k)]))
                        .cell(b.distance(k))
                        .end_row();
            }
            break;
        case Stage::inputdyn: {
            const auto& id = *r.inputdyn;
            const Index m = r.sys.state_dim, p = r.sys.input_dim;
            io::CsvWriter w(sink("predictions.csv"));
            w.header(io::concat(io::concat(io::concat(io::concat({"t"}, io::numbered("u", p)), io::numbered("x_true", m)),
                                           io::numbered("x_interp", m)),
                                io::numbered("x_surrogate", m)));
            for (Index k = 0; k < id.t.size(); ++k)
                w.cell(id.t(k))
                    .cell(Vec(id.inputs.col(k)))
                    .cell(Vec(id.x_true.col(k)))
                    .cell(Vec(id.interp.states.col(k)))
                    .cell(Vec(id.surrogate.states.col(k)))
                    .end_row();
            json sj = io::to_json(id.fit.model);
            sj["mse"] = id.fit.mse;
            sj["initial_mse"] = id.fit.initial_mse;
            io::write_json(sink("surrogate.json"), sj);
            break;
        }
        case Stage::control: {
            const auto& ct = *r.control;
            io::write_control_runs_csv(sink("control_runs.csv"), {{"lqg", &ct.lqg},
                                                                   {"pi", &ct.pi},
                                                                   {"lqg_sat_aw", &ct.lqg_sat_aw},
                                                                   {"lqg_sat_noaw", &ct.lqg_sat_noaw}});
            json d;
            d["lambda"] = io::to_json(ct.model.lambda);
            d["C"] = io::to_json(ct.model.C);
            d["offset"] = io::to_json(ct.model.offset);
            d["L"] = io::to_json(ct.L);
            d["Q_o"] = io::to_json(ct.Q_o);
            d["R_o"] = io::to_json(ct.R_o);
            d["W_K"] = io::to_json(ct.schedule.W_K);
            d["B_K"] = io::to_json(ct.schedule.B_K);
            d["K_rows"] = ct.schedule.rows;
            d["K_cols"] = ct.schedule.cols;
            d["K_i"] = io::to_json(c.control.K_i);
            d["lower"] = io::to_json(c.control.actuator.lower);
            d["upper"] = io::to_json(c.control.actuator.upper);
            d["time_constants"] = io::to_json(c.control.actuator.time_constants);
            d["basis"] = io::to_json(ct.schedule.basis);
            d["max_closed_loop_re"] = ct.max_closed_loop_re;
            d["schedule_fit_residual"] = ct.schedule.fit_residual;
            io::write_json(sink("design.json"), d);
            break;
        }
    }
}

inline void write_metrics(const PipelineResult& r, ArtifactSink& sink) {
    if (!sink.enabled()) return;
    io::CsvWriter w(sink("metrics.csv"));
    w.header({"section", "name", "metric", "value"});
    if (r.any_completed && r.completed >= Stage::optimize) {
        w.row("identification", "best", "J", r.detail.cost.J);
        w.row("identification", "best", "J_temp", r.detail.cost.j_temp);
        w.row("identification", "best", "J_KPDE", r.detail.cost.j_kpde);
        w.row("identification", "best", "clean_error", r.clean_error);
        if (r.frequency) w.row("identification", "best", "estimated_frequency", *r.frequency);
    }
    if (r.basins) {
        w.row("separatrix", "indicator", "bimodal", r.basins->estimate.bimodal ? 1.0 : 0.0);
        w.row("separatrix", "indicator", "agreement", r.basins->agreement);
        w.row("separatrix", "indicator", "scored_nodes", static_cast<double>(r.basins->scored));
        w.row("separatrix", "indicator", "origin_in_band", r.basins->origin_in_band ? 1.0 : 0.0);
    }
    if (r.inputdyn) {
        w.row("inputdyn", "interpolated", "sum_mae", r.inputdyn->mae_interp);
        w.row("inputdyn", "surrogate", "sum_mae", r.inputdyn->mae_surrogate);
        w.row("inputdyn", "surrogate", "train_mse", r.inputdyn->fit.mse);
    }
    if (r.control) {
        const auto& ct = *r.control;
        w.row("control", "schedule", "max_closed_loop_re", ct.max_closed_loop_re);
        w.row("control", "schedule", "fit_residual", ct.schedule.fit_residual);
        w.row("control", "schedule", "adjacent_jump", ct.schedule_jump);
        w.row("control", "observer", "max_re", ct.observer_max_re);
        for (const auto& m : ct.metrics) {
            const std::string suffix = "_y" + std::to_string(m.output + 1);
            w.row("control", m.run, "settling_time" + suffix, m.metrics.settling_time);
            w.row("control", m.run, "overshoot_pct" + suffix, m.metrics.overshoot);
            w.row("control", m.run, "steady_state_error" + suffix, m.metrics.steady_state_error);
        }
    }
}

inline void write_manifest(const PipelineResult& r, ArtifactSink& sink, const std::string& failure) {
    if (!sink.enabled()) return;
    io::write_json(sink("config.json"), r.cfg.raw);
    json m;
    m["name"] = r.cfg.name;
    m["version"] = kVersion;
    m["config_hash"] = config_hash(r.cfg.raw);
    m["seed"] = r.cfg.seed;
    m["threads"] = num_threads();
    m["stages"] = timings_json(r.timings);
    if (!failure.empty()) m["failure"] = failure;
    auto files = r.artifacts;
    files.push_back("manifest.json");
    m["artifacts"] = files;
    io::write_json(sink("manifest.json"), m);
}

}  // namespace detail

/// Runs the stages up to opts.last. On failure the artifacts of completed
/// stages and the manifest are kept and a StageFailure is thrown.
inline PipelineResult run_pipeline(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
    PipelineResult r;
    r.cfg = cfg;
    if (cfg.threads > 0) set_num_threads(cfg.threads);
    detail::ArtifactSink sink(opts.out, r.artifacts);
    const auto wanted = [&](Stage s) {
        if (s > opts.last) return false;
        switch (s) {
            case Stage::simulate:
            case Stage::optimize: return true;
            case Stage::refine: return cfg.refine.enabled || cfg.separatrix.enabled;
            case Stage::inputdyn: return cfg.inputdyn.enabled;
            case Stage::control: return cfg.control.enabled;
        }
        return false;
    };
    using StageFn = void (*)(PipelineResult&);
    const std::pair<Stage, StageFn> stages[] = {{Stage::simulate, stage_simulate},
                                                {Stage::optimize, stage_optimize},
                                                {Stage::refine, stage_refine},
                                                {Stage::inputdyn, stage_inputdyn},
                                                {Stage::control, stage_control}};
    for (const auto& [stage, fn] : stages) {
        if (!wanted(stage)) continue;
        detail::Timer timer;
        try {
            if (stage == Stage::simulate) r.sys = make_system(cfg.system, cfg.params);
            fn(r);
            detail::write_stage_artifacts(r, stage, sink);
        } catch (const std::exception& e) {
            r.timings.push_back({stage_name(stage), timer.seconds(), "failed"});
            try {
                detail::write_metrics(r, sink);
                detail::write_manifest(r, sink, e.what());
            } catch (const std::exception&) {
            }
            throw StageFailure(stage, e.what());
        }
        r.timings.push_back({stage_name(stage), timer.seconds(), "ok"});
        r.completed = stage;
        r.any_completed = true;
    }
    detail::write_metrics(r, sink);
    detail::write_manifest(r, sink, "");
    return r;
}

// ============================================================================
// Sweeps
// ============================================================================

struct SweepAxis {
    std::string key;   // dotted config key
    bool square = false;  // scalar n expands to [n, n]
};

/// Maps a sweep axis name to its config key. Short names cover the sensitivity
/// studies; any dotted key already present in the config is also accepted.
inline SweepAxis resolve_sweep_axis(const std::string& axis, const json& raw) {
    static const std::vector<std::pair<std::string, SweepAxis>> named{
        {"gamma", {"cost.gamma", false}},
        {"ridge", {"cost.ridge", false}},
        {"lambda_reg", {"cost.ridge", false}},
        {"subgrid", {"simulation.subgrid_stride", false}},
        {"grid", {"simulation.counts", true}},
        {"interp", {"cost.interp_counts", true}},
        {"noise", {"simulation.noise_variance", false}},
        {"n_lambda", {"search.n_free_pairs", false}},
    };
    for (const auto& [name, ax] : named)
        if (axis == name) return ax;
    const json* node = &raw;
    std::size_t start = 0;
    while (true) {
        const auto dot = axis.find('.', start);
        const std::string key = axis.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!node->is_object() || !node->contains(key)) break;
        node = &(*node)[key];
        if (dot == std::string::npos) {
            if (!node->is_number() && !node->is_boolean()) break;
            return {axis, false};
        }
        start = dot + 1;
    }
    throw ConfigError("invalid sweep axis '" + axis +
                      "' (gamma, ridge, subgrid, grid, interp, noise, n_lambda, or a numeric config key)");
}

struct SweepPoint {
    double value = 0.0;
    CostBreakdown cost;
    double clean_error = 0.0;
    double wall_seconds = 0.0;
    EigenvalueSet eigs;
    // gamma axis only: selection over the pooled candidates of all points
    double pooled_j_temp = 0.0;
    double pooled_j_kpde = 0.0;
    Index pooled_from = -1;
};

struct SweepResult {
    std::string axis;
    std::string key;
    std::vector<SweepPoint> points;
};

/// One pipeline run per value (sequential, isolated output subdirectories).
/// For the gamma axis each point also reports the best of all final candidates
/// under its own gamma, which makes the trade-off curve monotone by construction.
inline SweepResult run_sweep(const json& base, const std::string& axis, const std::vector<double>& values,
                             Stage last = Stage::optimize, const std::optional<std::filesystem::path>& out = {}) {
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    const SweepAxis ax = resolve_sweep_axis(axis, base);
    SweepResult res;
    res.axis = axis;
    res.key = ax.key;
    for (std::size_t i = 0; i < values.size(); ++i) {
        json raw = base;
        const double v = values[i];
        if (ax.square)
            set_config_value(raw, ax.key, json::array({static_cast<Index>(v), static_cast<Index>(v)}));
        else if (ax.key == "simulation.subgrid_stride" || ax.key == "search.n_free_pairs")
            set_config_value(raw, ax.key, static_cast<Index>(v));
        else
            set_config_value(raw, ax.key, v);
        const ExperimentConfig cfg = parse_experiment(raw);
        RunOptions opts;
        opts.last = last;
        if (out) opts.out = *out / ("point_" + std::to_string(i));
        detail::Timer timer;
        const PipelineResult r = run_pipeline(cfg, opts);
        SweepPoint p;
        p.value = v;
        p.cost = r.detail.cost;
        p.clean_error = r.clean_error;
        p.wall_seconds = timer.seconds();
        p.eigs = r.ident.eigs;
        res.points.push_back(p);
    }
    if (ax.key == "cost.gamma") {
        for (auto& p : res.points) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < res.points.size(); ++j) {
                const auto& q = res.points[j];
                const double J = q.cost.j_temp + p.value * q.cost.j_kpde + q.cost.penalty;
                if (J < best) {
                    best = J;
                    p.pooled_from = static_cast<Index>(j);
                    p.pooled_j_temp = q.cost.j_temp;
                    p.pooled_j_kpde = q.cost.j_kpde;
                }
            }
        }
    }
    if (out) {
        std::filesystem::create_directories(*out);
        io::CsvWriter w(*out / "sweep.csv");
        w.header({"axis", "value", "J", "J_temp", "J_KPDE", "clean_error", "wall_seconds", "pooled_J_temp",
                  "pooled_J_KPDE", "pooled_from"});
        for (const auto& p : res.points)
            w.cell(axis)
                .cell(p.value)
                .cell(p.cost.J)
                .cell(p.cost.j_temp)
                .cell(p.cost.j_kpde)
                .cell(p.clean_error)
                .cell(p.wall_seconds)
                .cell(p.pooled_j_temp)
                .cell(p.pooled_j_kpde)
                .cell(static_cast<long>(p.pooled_from))
                .end_row();
    }
    return res;
}

// ============================================================================
// Model export
// ============================================================================

/// Collects the model artifacts of a finished run directory into one document.
inline json export_model(const std::filesystem::path& run_dir) {
    namespace fs = std::filesystem;
    if (!fs::exists(run_dir / "eigenvalues.json"))
        throw ConfigError("no eigenvalues.json in " + run_dir.string() + " (run the optimize stage first)");
    json m;
    m["version"] = kVersion;
    m["eigenvalues"] = io::read_json(run_dir / "eigenvalues.json");
    for (const char* name : {"manifest", "costs", "surrogate", "design"}) {
        const fs::path p = run_dir / (std::string(name) + ".json");
        if (fs::exists(p)) m[name] = io::read_json(p);
    }
    return m;
}

}  // namespace koopeig
