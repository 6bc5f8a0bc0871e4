#pragma once

// Experiment configuration. TOML files are converted to the JSON data model,
// so a .toml file and a .json file with the same tree are interchangeable.

#include <koopeig/common.hpp>
#include <koopeig/control.hpp>
#include <koopeig/optimizer.hpp>
#include <koopeig/systems.hpp>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace koopeig {

using json = nlohmann::json;

// ============================================================================
// Loading
// ============================================================================

namespace detail {

inline json toml_to_json(const toml::node& node) {
    if (auto t = node.as_table()) {
        json out = json::object();
        for (auto&& [k, v] : *t) out[std::string(k.str())] = toml_to_json(v);
        return out;
    }
    if (auto a = node.as_array()) {
        json out = json::array();
        for (auto&& v : *a) out.push_back(toml_to_json(v));
        return out;
    }
    if (auto v = node.as_integer()) return static_cast<std::int64_t>(v->get());
    if (auto v = node.as_floating_point()) return v->get();
    if (auto v = node.as_boolean()) return v->get();
    if (auto v = node.as_string()) return v->get();
    throw ConfigError("unsupported TOML value (dates and times are not used)");
}

}  // namespace detail

inline json parse_config_text(const std::string& text, bool is_toml) {
    if (is_toml) {
        try {
            return detail::toml_to_json(toml::parse(text));
        } catch (const toml::parse_error& e) {
            std::ostringstream os;
            os << "TOML parse error: " << e.description() << " at line " << e.source().begin.line;
            throw ConfigError(os.str());
        }
    }
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("JSON parse error: ") + e.what());
    }
}

inline json load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    const auto ext = path.extension().string();
    return parse_config_text(ss.str(), ext != ".json");
}

/// 64-bit FNV-1a of the canonical JSON dump (keys sorted).
inline std::string config_hash(const json& j) {
    const std::string s = j.dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
}

// ============================================================================
// Typed configuration
// ============================================================================

struct SimulationSettings {
    std::vector<Range> ranges;
    std::vector<Index> counts;
    double dt = 0.1;
    Index n_samples = 200;
    Vec reference;
    SubgridRule subgrid;
    double noise_variance = 0.0;
    bool shift_fixed_point = false;
    std::optional<Vec> fixed_point;

    SimGrid grid() const { return SimGrid(ranges, counts, subgrid); }
};

struct SearchSettings {
    SearchSpace space;
    bool estimate_frequency = false;  // prepend the data-estimated limit-cycle pair as fixed
};

struct RefineSettings {
    bool enabled = false;
    std::vector<Range> ranges;
    std::vector<Index> counts;
    std::vector<Index> interp_counts;
};

struct SeparatrixSettings {
    bool enabled = false;
    double margin = 0.25;
    double oracle_horizon = 60.0;
    std::vector<Index> oracle_counts{161, 161};
    double min_distance = 0.1;  // nodes closer than this to the oracle separatrix are not scored
};

struct InputDynSettings {
    bool enabled = false;
    SurrogateTraining training;
    double dt = 0.01;
    Index n_samples = 1000;
    double hold = 1.0;
    double amplitude = 0.05;
    Vec x0;
    std::uint64_t seed_offset = 101;
    std::vector<Range> train_ranges;  // surrogate training box (empty: whole field grid)
};

struct PiSettings {
    Vec kp;
    Vec ki;
};

struct ControlSettings {
    bool enabled = false;
    double dt = 0.01;
    double horizon = 40.0;
    ActuatorConfig actuator;
    Vec saturated_lower;  // tighter limits for the anti-windup comparison
    Vec saturated_upper;
    Mat K_i;
    std::vector<Index> tracked;
    Vec q_x;
    Vec q_u;
    Vec r;
    double phi_regularization = 1e-6;
    Vec q_o;  // KF process weights (diagonal, eigenfunction space); estimated when empty
    Vec r_o;  // KF measurement weights (diagonal)
    std::vector<Index> schedule_counts{21, 21};
    std::vector<Range> schedule_ranges;
    std::vector<Setpoint> setpoints;
    Vec x0;
    PiSettings pi;
    double measurement_noise_variance = 0.0;
    double step_time = 1.0;
    double kf_floor = 1e-6;     // added to the diagonals of estimated KF covariances
    bool literal_dt = false;    // process-noise difference over dt instead of 2 dt
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 0;
    int threads = 0;
    std::string system = "closure";
    ParamMap params;
    SimulationSettings sim;
    SearchSettings search;
    CostConfig cost;
    std::vector<Index> interp_counts{100, 100};
    IdentificationSettings optimizer;
    RefineSettings refine;
    SeparatrixSettings separatrix;
    InputDynSettings inputdyn;
    ControlSettings control;
    std::string output_dir = "out";
    Index field_stride = 1;  // write every k-th field node per axis
    json raw;
};

namespace detail {

inline Vec to_vec(const json& j) {
    if (!j.is_array()) throw ConfigError("expected an array of numbers");
    Vec v(static_cast<Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = j[i].get<double>();
    return v;
}

inline std::vector<Index> to_counts(const json& j) {
    std::vector<Index> out;
    for (const auto& v : j) out.push_back(v.get<Index>());
    return out;
}

inline std::vector<Range> to_ranges(const json& j) {
    std::vector<Range> out;
    for (const auto& r : j) {
        if (!r.is_array() || r.size() != 2) throw ConfigError("ranges must be [lo, hi] pairs");
        out.push_back({r[0].get<double>(), r[1].get<double>()});
    }
    return out;
}

inline Mat to_square_or_diag(const json& j, Index n) {
    if (j.is_number()) return Mat::Identity(n, n) * j.get<double>();
    if (j.is_array() && !j.empty() && j[0].is_array()) {
        Mat M(static_cast<Index>(j.size()), static_cast<Index>(j[0].size()));
        for (std::size_t r = 0; r < j.size(); ++r)
            for (std::size_t c = 0; c < j[r].size(); ++c) M(static_cast<Index>(r), static_cast<Index>(c)) = j[r][c].get<double>();
        return M;
    }
    return Mat(to_vec(j).asDiagonal());
}

template <typename T>
T value_or(const json& j, const char* key, T fallback) {
    if (!j.is_object() || !j.contains(key) || j[key].is_null()) return fallback;
    try {
        return j[key].get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
}

inline const json& section(const json& root, const char* key) {
    static const json empty = json::object();
    if (!root.contains(key)) return empty;
    if (!root[key].is_object()) throw ConfigError(std::string("config section '") + key + "' must be a table");
    return root[key];
}

}  // namespace detail

namespace detail {

inline ExperimentConfig parse_experiment_tree(const json& root) {
    using namespace detail;
    if (!root.is_object()) throw ConfigError("config root must be a table");
    ExperimentConfig c;
    c.raw = root;
    c.name = value_or<std::string>(root, "name", "experiment");
    if (!root.contains("seed")) throw ConfigError("config needs a 'seed' (all stochastic stages are seeded)");
    c.seed = root["seed"].get<std::uint64_t>();
    c.threads = value_or<int>(root, "threads", 0);

    const json& sys = section(root, "system");
    c.system = value_or<std::string>(sys, "name", "closure");
    if (sys.contains("params"))
        for (auto& [k, v] : sys["params"].items()) c.params[k] = v.get<double>();

    const json& sim = section(root, "simulation");
    if (!sim.contains("ranges") || !sim.contains("counts") || !sim.contains("reference"))
        throw ConfigError("[simulation] needs ranges, counts and reference");
    c.sim.ranges = to_ranges(sim["ranges"]);
    c.sim.counts = to_counts(sim["counts"]);
    c.sim.dt = value_or<double>(sim, "dt", 0.1);
    c.sim.n_samples = value_or<Index>(sim, "n_samples", 200);
    c.sim.reference = to_vec(sim["reference"]);
    c.sim.subgrid.stride = value_or<Index>(sim, "subgrid_stride", 4);
    c.sim.subgrid.offset = value_or<Index>(sim, "subgrid_offset", 0);
    c.sim.noise_variance = value_or<double>(sim, "noise_variance", 0.0);
    c.sim.shift_fixed_point = value_or<bool>(sim, "shift_fixed_point", false);
    if (sim.contains("fixed_point")) c.sim.fixed_point = to_vec(sim["fixed_point"]);
    if (!(c.sim.dt > 0.0)) throw ConfigError("simulation dt must be positive");
    if (c.sim.noise_variance < 0.0) throw ConfigError("noise variance must be >= 0");
    c.sim.grid().validate();

    const json& se = section(root, "search");
    auto& sp = c.search.space;
    sp.n_free_pairs = value_or<Index>(se, "n_free_pairs", 2);
    sp.re_min = value_or<double>(se, "re_min", -2.0);
    sp.re_max = value_or<double>(se, "re_max", -0.1);
    sp.im_min = value_or<double>(se, "im_min", 0.0);
    sp.im_max = value_or<double>(se, "im_max", 1.0);
    sp.d_min = value_or<double>(se, "d_min", 0.05);
    sp.penalty_weight = value_or<double>(se, "penalty_weight", 1.0);
    if (se.contains("fixed"))
        for (const auto& p : se["fixed"]) {
            if (!p.is_array() || p.empty() || p.size() > 2) throw ConfigError("fixed eigenvalues are [re] or [re, im]");
            sp.fixed.push_back({p[0].get<double>(), p.size() > 1 ? p[1].get<double>() : 0.0, true});
        }
    c.search.estimate_frequency = value_or<bool>(se, "estimate_frequency", false);
    sp.validate();

    const json& co = section(root, "cost");
    c.cost.ridge = value_or<double>(co, "ridge", 1e-6);
    c.cost.gamma = value_or<double>(co, "gamma", 1e-4);
    c.cost.imag_floor = value_or<double>(co, "imag_floor", EigenvalueSet::kDefaultImagFloor);
    if (co.contains("clamp")) c.cost.clamp = co["clamp"].get<double>();
    c.cost.smoothing = value_or<double>(co, "smoothing", 1.0);
    c.cost.exclude_ring = value_or<bool>(co, "exclude_ring", true);
    c.cost.failure_cost = value_or<double>(co, "failure_cost", 1e6);
    if (co.contains("interp_counts")) c.interp_counts = to_counts(co["interp_counts"]);
    c.cost.validate();

    const json& op = section(root, "optimizer");
    auto& ps = c.optimizer.pso;
    ps.population = value_or<Index>(op, "population", 50);
    ps.generations = value_or<Index>(op, "generations", 200);
    ps.inertia = value_or<double>(op, "inertia", 0.73);
    ps.cognitive = value_or<double>(op, "cognitive", 1.5);
    ps.social = value_or<double>(op, "social", 1.5);
    ps.velocity_clamp = value_or<double>(op, "velocity_clamp", 0.2);
    ps.seed = c.seed;
    c.optimizer.nm.max_iter = value_or<Index>(op, "nm_iterations", 1000);
    c.optimizer.nm.xtol = value_or<double>(op, "nm_xtol", 1e-10);
    c.optimizer.nm.ftol = value_or<double>(op, "nm_ftol", 1e-16);
    c.optimizer.temporal_first = value_or<bool>(op, "temporal_first", false);
    if (ps.population < 2 || ps.generations < 0 || c.optimizer.nm.max_iter < 0)
        throw ConfigError("optimizer budgets must be non-negative (population >= 2)");

    const json& re = section(root, "refine");
    c.refine.enabled = value_or<bool>(re, "enabled", false);
    c.refine.ranges = re.contains("ranges") ? to_ranges(re["ranges"]) : c.sim.ranges;
    c.refine.counts = re.contains("counts") ? to_counts(re["counts"]) : c.sim.counts;
    c.refine.interp_counts = re.contains("interp_counts") ? to_counts(re["interp_counts"]) : c.interp_counts;

    const json& sx = section(root, "separatrix");
    c.separatrix.enabled = value_or<bool>(sx, "enabled", false);
    c.separatrix.margin = value_or<double>(sx, "margin", 0.25);
    c.separatrix.oracle_horizon = value_or<double>(sx, "oracle_horizon", 60.0);
    if (sx.contains("oracle_counts")) c.separatrix.oracle_counts = to_counts(sx["oracle_counts"]);
    c.separatrix.min_distance = value_or<double>(sx, "min_distance", 0.1);

    const json& in = section(root, "inputdyn");
    c.inputdyn.enabled = value_or<bool>(in, "enabled", false);
    auto& tr = c.inputdyn.training;
    tr.hidden = value_or<Index>(in, "hidden", 15);
    tr.ridge = value_or<double>(in, "ridge", 1e-8);
    tr.weight_scale = value_or<double>(in, "weight_scale", 2.0);
    tr.bias_scale = value_or<double>(in, "bias_scale", 1.0);
    tr.adam_iterations = value_or<Index>(in, "adam_iterations", 0);
    tr.adam_step = value_or<double>(in, "adam_step", 1e-3);
    tr.max_samples = value_or<Index>(in, "max_samples", 20000);
    tr.seed = c.seed;
    c.inputdyn.dt = value_or<double>(in, "dt", c.sim.dt);
    c.inputdyn.n_samples = value_or<Index>(in, "n_samples", 1000);
    c.inputdyn.hold = value_or<double>(in, "hold", 1.0);
    c.inputdyn.amplitude = value_or<double>(in, "amplitude", 0.05);
    c.inputdyn.seed_offset = value_or<std::uint64_t>(in, "seed_offset", 101);
    if (in.contains("x0")) c.inputdyn.x0 = to_vec(in["x0"]);
    if (in.contains("train_ranges")) c.inputdyn.train_ranges = to_ranges(in["train_ranges"]);

    const json& ct = section(root, "control");
    auto& cc = c.control;
    cc.enabled = value_or<bool>(ct, "enabled", false);
    if (cc.enabled) {
        cc.dt = value_or<double>(ct, "dt", 0.01);
        cc.horizon = value_or<double>(ct, "horizon", 40.0);
        if (!ct.contains("time_constants") || !ct.contains("lower") || !ct.contains("upper"))
            throw ConfigError("[control] needs time_constants, lower and upper");
        cc.actuator.time_constants = to_vec(ct["time_constants"]);
        cc.actuator.lower = to_vec(ct["lower"]);
        cc.actuator.upper = to_vec(ct["upper"]);
        const Index p = cc.actuator.time_constants.size();
        cc.actuator.validate(p);
        cc.saturated_lower = ct.contains("saturated_lower") ? to_vec(ct["saturated_lower"]) : cc.actuator.lower;
        cc.saturated_upper = ct.contains("saturated_upper") ? to_vec(ct["saturated_upper"]) : cc.actuator.upper;
        cc.tracked.clear();
        if (ct.contains("tracked"))
            for (const auto& v : ct["tracked"]) cc.tracked.push_back(v.get<Index>());
        const Index q = cc.tracked.empty() ? p : static_cast<Index>(cc.tracked.size());
        cc.K_i = ct.contains("K_i") ? to_square_or_diag(ct["K_i"], q) : Mat::Zero(p, q);
        cc.q_x = ct.contains("q_x") ? to_vec(ct["q_x"]) : Vec();
        cc.q_u = ct.contains("q_u") ? to_vec(ct["q_u"]) : Vec::Constant(p, 1.0);
        cc.r = ct.contains("r") ? to_vec(ct["r"]) : Vec::Constant(p, 1.0);
        cc.phi_regularization = value_or<double>(ct, "phi_regularization", 1e-6);
        if (ct.contains("q_o")) cc.q_o = to_vec(ct["q_o"]);
        if (ct.contains("r_o")) cc.r_o = to_vec(ct["r_o"]);
        if (ct.contains("schedule_counts")) cc.schedule_counts = to_counts(ct["schedule_counts"]);
        cc.schedule_ranges = ct.contains("schedule_ranges") ? to_ranges(ct["schedule_ranges"]) : c.sim.ranges;
        if (ct.contains("setpoints"))
            for (const auto& s : ct["setpoints"]) cc.setpoints.push_back({s.at("time").get<double>(), to_vec(s.at("value"))});
        if (ct.contains("x0")) cc.x0 = to_vec(ct["x0"]);
        cc.measurement_noise_variance = value_or<double>(ct, "measurement_noise_variance", 0.0);
        cc.kf_floor = value_or<double>(ct, "kf_floor", 1e-6);
        cc.literal_dt = value_or<bool>(ct, "literal_dt", false);
        cc.step_time = cc.setpoints.empty() ? 0.0 : cc.setpoints.front().time;
        if (ct.contains("pi")) {
            cc.pi.kp = to_vec(ct["pi"].at("kp"));
            cc.pi.ki = to_vec(ct["pi"].at("ki"));
        } else {
            cc.pi.kp = Vec::Zero(p);
            cc.pi.ki = Vec::Zero(p);
        }
        if (!(cc.dt > 0.0) || !(cc.horizon > 0.0)) throw ConfigError("control dt and horizon must be positive");
        if (cc.K_i.rows() != p || cc.K_i.cols() != q) throw ConfigError("K_i must be inputs x tracked outputs");
    }

    const json& out = section(root, "output");
    c.output_dir = value_or<std::string>(out, "dir", "out/" + c.name);
    c.field_stride = std::max<Index>(1, value_or<Index>(out, "field_stride", 1));

    // the system must exist and match the grid
    const DynSystem s = make_system(c.system, c.params);
    if (static_cast<Index>(c.sim.counts.size()) != s.state_dim) throw ConfigError("grid dimension differs from the system");
    if (c.sim.reference.size() != s.state_dim) throw ConfigError("reference dimension differs from the system");
    if (!c.sim.grid().find_node(c.sim.reference)) throw ConfigError("reference initial condition is not a grid node");
    if (c.control.enabled && s.input_dim != c.control.actuator.time_constants.size())
        throw ConfigError("control settings do not match the system's input count");
    return c;
}

}  // namespace detail

/// Typed view of a configuration tree, with defaults and validation.
inline ExperimentConfig parse_experiment(const json& root) {
    try {
        return detail::parse_experiment_tree(root);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config value: ") + e.what());
    }
}

/// Sets a dotted key (e.g. "cost.gamma") in a config tree.
inline void set_config_value(json& root, const std::string& dotted, const json& value) {
    json* node = &root;
    std::size_t start = 0;
    while (true) {
        const auto dot = dotted.find('.', start);
        const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        if (!node->contains(key)) (*node)[key] = json::object();
        node = &(*node)[key];
        start = dot + 1;
    }
}

}  // namespace koopeig
