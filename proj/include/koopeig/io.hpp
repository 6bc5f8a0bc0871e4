#pragma once

// CSV and JSON writers for pipeline artifacts. Every CSV is long-format with a
// header row; numbers are written with 17 significant digits so reruns are
// byte-comparable.

#include <koopeig/common.hpp>
#include <koopeig/control.hpp>
#include <koopeig/inputdyn.hpp>
#include <koopeig/optimizer.hpp>
#include <koopeig/spatial.hpp>
#include <koopeig/spectral.hpp>
#include <koopeig/systems.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

namespace koopeig::io {

using json = nlohmann::json;

class CsvWriter {
public:
    explicit CsvWriter(const std::filesystem::path& path) : out_(path) {
        if (!out_) throw Error("cannot write " + path.string());
        out_ << std::setprecision(17);
    }

    CsvWriter& header(const std::vector<std::string>& cols) {
        for (std::size_t i = 0; i < cols.size(); ++i) out_ << (i ? "," : "") << cols[i];
        out_ << '\n';
        return *this;
    }

    template <typename... Ts>
    CsvWriter& row(const Ts&... vals) {
        first_ = true;
        (cell(vals), ...);
        out_ << '\n';
        return *this;
    }

    CsvWriter& cell(double v) {
        sep();
        out_ << v;
        return *this;
    }
    CsvWriter& cell(int v) {
        sep();
        out_ << v;
        return *this;
    }
    CsvWriter& cell(long v) {
        sep();
        out_ << v;
        return *this;
    }
    CsvWriter& cell(long long v) {
        sep();
        out_ << v;
        return *this;
    }
    CsvWriter& cell(unsigned long v) {
        sep();
        out_ << v;
        return *this;
    }
    CsvWriter& cell(const std::string& v) {
        sep();
        out_ << v;
        return *this;
    }
    CsvWriter& cell(const char* v) { return cell(std::string(v)); }
    CsvWriter& cell(const Vec& v) {
        for (Index i = 0; i < v.size(); ++i) cell(v(i));
        return *this;
    }
    CsvWriter& end_row() {
        out_ << '\n';
        first_ = true;
        return *this;
    }

private:
    void sep() {
        if (!first_) out_ << ',';
        first_ = false;
    }
    std::ofstream out_;
    bool first_ = true;
};

inline std::vector<std::string> numbered(const std::string& prefix, Index n, Index base = 1) {
    std::vector<std::string> out;
    for (Index i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i + base));
    return out;
}

inline std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

inline json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path.string());
    return json::parse(in);
}

inline json to_json(const Mat& M) {
    json rows = json::array();
    for (Index r = 0; r < M.rows(); ++r) {
        json row = json::array();
        for (Index c = 0; c < M.cols(); ++c) row.push_back(M(r, c));
        rows.push_back(row);
    }
    return rows;
}

inline json to_json(const Vec& v) {
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

inline Mat mat_from_json(const json& j) {
    if (!j.is_array() || j.empty()) return Mat();
    Mat M(static_cast<Index>(j.size()), static_cast<Index>(j[0].size()));
    for (std::size_t r = 0; r < j.size(); ++r)
        for (std::size_t c = 0; c < j[r].size(); ++c) M(static_cast<Index>(r), static_cast<Index>(c)) = j[r][c].get<double>();
    return M;
}

inline Vec vec_from_json(const json& j) {
    Vec v(static_cast<Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = j[i].get<double>();
    return v;
}

inline json to_json(const EigenvalueSet& e) {
    json pairs = json::array();
    for (const auto& p : e.pairs()) pairs.push_back({{"re", p.re}, {"im", p.im}, {"fixed", p.fixed}});
    return {{"pairs", pairs}, {"imag_floor", e.imag_floor()}, {"n_phi", e.n_phi()}, {"lambda", to_json(e.lambda_matrix())}};
}

inline EigenvalueSet eigenvalues_from_json(const json& j) {
    std::vector<EigenPair> pairs;
    for (const auto& p : j.at("pairs")) pairs.push_back({p.at("re").get<double>(), p.at("im").get<double>(), p.value("fixed", false)});
    return EigenvalueSet(pairs, j.value("imag_floor", EigenvalueSet::kDefaultImagFloor));
}

inline json to_json(const CostBreakdown& c) {
    return {{"J", c.J}, {"J_temp", c.j_temp}, {"J_KPDE", c.j_kpde}, {"penalty", c.penalty}, {"failed", c.failed}};
}

inline json to_json(const SigmoidSurrogate& s) {
    return {{"w1", to_json(s.w1)},         {"b1", to_json(s.b1)},         {"W2", to_json(s.W2)},
            {"B2", to_json(s.B2)},         {"x_center", to_json(s.x_center)}, {"x_scale", to_json(s.x_scale)},
            {"hull_lo", to_json(s.hull_lo)}, {"hull_hi", to_json(s.hull_hi)}, {"n_phi", s.n_phi},
            {"input_dim", s.input_dim}};
}

inline SigmoidSurrogate surrogate_from_json(const json& j) {
    SigmoidSurrogate s;
    s.w1 = mat_from_json(j.at("w1"));
    s.b1 = vec_from_json(j.at("b1"));
    s.W2 = mat_from_json(j.at("W2"));
    s.B2 = vec_from_json(j.at("B2"));
    s.x_center = vec_from_json(j.at("x_center"));
    s.x_scale = vec_from_json(j.at("x_scale"));
    s.hull_lo = vec_from_json(j.at("hull_lo"));
    s.hull_hi = vec_from_json(j.at("hull_hi"));
    s.n_phi = j.at("n_phi").get<Index>();
    s.input_dim = j.at("input_dim").get<Index>();
    return s;
}

/// traj, t, x1..xm for every sample of every trajectory.
inline void write_ensemble_csv(const std::filesystem::path& path, const TrajectoryEnsemble& ens) {
    CsvWriter w(path);
    w.header(concat({"traj", "t"}, numbered("x", ens.state_dim())));
    const Vec t = ens.time_axis();
    for (Index i = 0; i < ens.size(); ++i) {
        const Mat& s = ens.states[static_cast<std::size_t>(i)];
        for (Index k = 0; k < ens.n_samples; ++k) {
            w.cell(static_cast<long>(i)).cell(t(k)).cell(Vec(s.col(k))).end_row();
        }
    }
}

/// node, x1..xm, phi1..phin over a grid, one row per node.
inline void write_grid_values_csv(const std::filesystem::path& path, const SimGrid& grid, const Mat& values,
                                  const std::string& prefix = "phi") {
    CsvWriter w(path);
    w.header(concat(concat({"node"}, numbered("x", grid.dims())), numbered(prefix, values.rows())));
    for (Index k = 0; k < grid.size(); ++k) w.cell(static_cast<long>(k)).cell(grid.node(k)).cell(Vec(values.col(k))).end_row();
}

inline bool on_stride(const SimGrid& g, Index k, Index stride) {
    if (stride <= 1) return true;
    for (Index i : g.multi_index(k))
        if (i % stride != 0) return false;
    return true;
}

/// x1, x2, phi1..phin, mask. Only every stride-th node per axis is written.
inline void write_field_csv(const std::filesystem::path& path, const EigenfunctionField& f, Index stride = 1) {
    CsvWriter w(path);
    w.header(concat(concat(numbered("x", f.grid.dims()), numbered("phi", f.n_phi())), {"mask"}));
    for (Index k = 0; k < f.grid.size(); ++k)
        if (on_stride(f.grid, k, stride)) w.cell(f.grid.node(k)).cell(Vec(f.values.col(k))).cell(static_cast<int>(f.masked(k))).end_row();
}

/// x1, x2, then d phi_i / d x_j for i = 1..n, j = 1..m (columns dphi<i>_dx<j>).
inline void write_gradients_csv(const std::filesystem::path& path, const EigenfunctionField& f, Index stride = 1) {
    if (!f.has_gradient()) throw StateError("field has no gradient");
    std::vector<std::string> cols = numbered("x", f.grid.dims());
    for (Index i = 0; i < f.n_phi(); ++i)
        for (Index j = 0; j < f.grid.dims(); ++j) cols.push_back("dphi" + std::to_string(i + 1) + "_dx" + std::to_string(j + 1));
    CsvWriter w(path);
    w.header(cols);
    for (Index k = 0; k < f.grid.size(); ++k) {
        if (!on_stride(f.grid, k, stride)) continue;
        w.cell(f.grid.node(k));
        for (Index i = 0; i < f.n_phi(); ++i)
            for (Index j = 0; j < f.grid.dims(); ++j) w.cell(f.gradient[static_cast<std::size_t>(j)](i, k));
        w.end_row();
    }
}

/// phase, iteration, J, J_temp, J_KPDE, penalty, evaluations, wall_seconds, free parameters.
inline void write_trace_csv(const std::filesystem::path& path, const OptimizerTrace& trace) {
    const Index d = trace.rows.empty() ? 0 : trace.rows.front().best.size();
    std::vector<std::string> cols{"phase", "iteration", "J", "J_temp", "J_KPDE", "penalty", "evaluations", "wall_seconds"};
    for (Index i = 0; i < d / 2; ++i) {
        cols.push_back("re" + std::to_string(i + 1));
        cols.push_back("im" + std::to_string(i + 1));
    }
    CsvWriter w(path);
    w.header(cols);
    for (const auto& r : trace.rows)
        w.cell(r.phase)
            .cell(static_cast<long>(r.iteration))
            .cell(r.cost.J)
            .cell(r.cost.j_temp)
            .cell(r.cost.j_kpde)
            .cell(r.cost.penalty)
            .cell(static_cast<long>(r.evaluations))
            .cell(r.wall_seconds)
            .cell(r.best)
            .end_row();
}

/// run, t, x.., x_hat.., u.., u_comm.., r.., eta.. for labelled closed-loop runs.
inline void write_control_runs_csv(const std::filesystem::path& path,
                                   const std::vector<std::pair<std::string, const ClosedLoopRun*>>& runs) {
    if (runs.empty()) return;
    const ClosedLoopRun& r0 = *runs.front().second;
    std::vector<std::string> cols{"run", "t"};
    cols = concat(cols, numbered("x", r0.x.rows()));
    cols = concat(cols, numbered("xhat", r0.x_hat.rows()));
    cols = concat(cols, numbered("u", r0.u.rows()));
    cols = concat(cols, numbered("ucomm", r0.u_comm.rows()));
    cols = concat(cols, numbered("r", r0.r.rows()));
    cols = concat(cols, numbered("eta", r0.eta.rows()));
    CsvWriter w(path);
    w.header(cols);
    for (const auto& [label, run] : runs)
        for (Index k = 0; k < run->t.size(); ++k)
            w.cell(label)
                .cell(run->t(k))
                .cell(Vec(run->x.col(k)))
                .cell(Vec(run->x_hat.col(k)))
                .cell(Vec(run->u.col(k)))
                .cell(Vec(run->u_comm.col(k)))
                .cell(Vec(run->r.col(k)))
                .cell(Vec(run->eta.col(k)))
                .end_row();
}

}  // namespace koopeig::io
