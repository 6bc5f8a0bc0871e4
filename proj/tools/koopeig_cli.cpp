// koopeig command-line runner.
//
//   koopeig run configs/closure.toml --out out/closure
//   koopeig run --stage simulate configs/duffing.toml
//   koopeig sweep configs/fhn.toml --axis gamma --values 1e-6,1e-4,1e-2
//   koopeig validate-config configs/vdp.toml
//   koopeig export-model out/fhn
//
// Exit codes: 0 success, 1 unexpected error, 2 configuration error,
// 10..14 failure in stage simulate, optimize, refine, inputdyn, control.

#include <koopeig/config.hpp>
#include <koopeig/pipeline.hpp>

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

using koopeig::json;

struct Common {
    std::string config;
    std::string stage;
    std::optional<std::uint64_t> seed;
    std::string out;
    int threads = 0;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool with_stage) {
    cmd->add_option("config", c.config, "experiment config (.toml or .json)")->required()->check(CLI::ExistingFile);
    if (with_stage)
        cmd->add_option("--stage", c.stage, "last stage to run (simulate, optimize, refine, inputdyn, control)");
    cmd->add_option("--seed", c.seed, "override the config seed");
    cmd->add_option("--out", c.out, "output directory (default: output.dir of the config)");
    cmd->add_option("--threads", c.threads, "worker threads (0 = all cores)");
    cmd->add_option("--set", c.overrides, "override a config value, key=value (value parsed as JSON)");
}

json load(const Common& c) {
    json raw = koopeig::load_config_file(c.config);
    if (c.seed) raw["seed"] = *c.seed;
    if (c.threads > 0) raw["threads"] = c.threads;
    for (const auto& kv : c.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw koopeig::ConfigError("--set expects key=value, got '" + kv + "'");
        const std::string key = kv.substr(0, eq), text = kv.substr(eq + 1);
        json value;
        try {
            value = json::parse(text);
        } catch (const json::exception&) {
            value = text;
        }
        koopeig::set_config_value(raw, key, value);
    }
    return raw;
}

std::filesystem::path output_dir(const Common& c, const koopeig::ExperimentConfig& cfg) {
    return c.out.empty() ? std::filesystem::path(cfg.output_dir) : std::filesystem::path(c.out);
}

void print_summary(const koopeig::PipelineResult& r) {
    std::cout << std::setprecision(6);
    for (const auto& t : r.timings) std::cout << "  " << std::left << std::setw(9) << t.stage << t.status << "  " << t.seconds << " s\n";
    if (r.any_completed && r.completed >= koopeig::Stage::optimize) {
        std::cout << "  eigenvalues:";
        for (const auto& p : r.model.eigs.pairs()) {
            std::cout << ' ' << p.re;
            if (p.im > 0.0) std::cout << "+-" << p.im << 'i';
        }
        std::cout << "\n  J = " << r.detail.cost.J << "  J_temp = " << r.detail.cost.j_temp
                  << "  J_KPDE = " << r.detail.cost.j_kpde << '\n';
        if (r.frequency) std::cout << "  estimated frequency = " << *r.frequency << " rad/s\n";
    }
    if (r.basins)
        std::cout << "  basin agreement = " << r.basins->agreement << " over " << r.basins->scored
                  << " nodes, origin in band = " << (r.basins->origin_in_band ? "yes" : "no") << '\n';
    if (r.inputdyn)
        std::cout << "  sum MAE: interpolated = " << r.inputdyn->mae_interp
                  << ", surrogate = " << r.inputdyn->mae_surrogate << '\n';
    if (r.control) {
        std::cout << "  max closed-loop Re = " << r.control->max_closed_loop_re << '\n';
        std::cout << "  run            output  settling[s]  overshoot[%]  sse\n";
        for (const auto& m : r.control->metrics)
            std::cout << "  " << std::left << std::setw(15) << m.run << std::setw(8) << m.output + 1 << std::setw(13)
                      << m.metrics.settling_time << std::setw(14) << m.metrics.overshoot << m.metrics.steady_state_error
                      << '\n';
    }
}

std::vector<double> parse_values(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw koopeig::ConfigError("sweep value '" + item + "' is not a number");
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Koopman eigenfunction identification and eigenfunction-space control"};
    app.require_subcommand(1);
    app.set_version_flag("--version", koopeig::kVersion);

    Common run_opts;
    auto* run = app.add_subcommand("run", "run the pipeline stages of an experiment");
    add_common(run, run_opts, true);

    Common sweep_opts;
    std::string axis, values;
    auto* sweep = app.add_subcommand("sweep", "rerun an experiment over values of one parameter");
    add_common(sweep, sweep_opts, true);
    sweep->add_option("--axis", axis, "gamma, ridge, subgrid, grid, interp, noise, n_lambda or a dotted config key")
        ->required();
    sweep->add_option("--values", values, "comma-separated values")->required();

    Common check_opts;
    auto* check = app.add_subcommand("validate-config", "parse and validate a config without running it");
    add_common(check, check_opts, false);

    std::string run_dir, model_out;
    auto* exp = app.add_subcommand("export-model", "bundle the model artifacts of a run directory into model.json");
    exp->add_option("run_dir", run_dir, "directory written by 'run'")->required()->check(CLI::ExistingDirectory);
    exp->add_option("--out", model_out, "output file (default: <run_dir>/model.json)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            const auto cfg = koopeig::parse_experiment(load(run_opts));
            koopeig::RunOptions opts;
            if (!run_opts.stage.empty()) opts.last = koopeig::parse_stage(run_opts.stage);
            opts.out = output_dir(run_opts, cfg);
            std::cout << cfg.name << " -> " << opts.out->string() << '\n';
            const auto r = koopeig::run_pipeline(cfg, opts);
            print_summary(r);
        } else if (*sweep) {
            const json raw = load(sweep_opts);
            const auto cfg = koopeig::parse_experiment(raw);
            const auto stage = sweep_opts.stage.empty() ? koopeig::Stage::optimize : koopeig::parse_stage(sweep_opts.stage);
            const auto out = output_dir(sweep_opts, cfg) / ("sweep_" + axis);
            const auto res = koopeig::run_sweep(raw, axis, parse_values(values), stage, out);
            std::cout << std::setprecision(6) << "value  J_temp  J_KPDE  clean_error  seconds\n";
            for (const auto& p : res.points)
                std::cout << p.value << "  " << p.cost.j_temp << "  " << p.cost.j_kpde << "  " << p.clean_error << "  "
                          << p.wall_seconds << '\n';
            std::cout << "table: " << (out / "sweep.csv").string() << '\n';
        } else if (*check) {
            const json raw = load(check_opts);
            const auto cfg = koopeig::parse_experiment(raw);
            std::cout << "ok: " << cfg.name << " (system " << cfg.system << ", seed " << cfg.seed << ", hash "
                      << koopeig::config_hash(raw) << ")\n";
        } else if (*exp) {
            const json m = koopeig::export_model(run_dir);
            const std::filesystem::path out = model_out.empty() ? std::filesystem::path(run_dir) / "model.json"
                                                                : std::filesystem::path(model_out);
            koopeig::io::write_json(out, m);
            std::cout << "wrote " << out.string() << '\n';
        }
    } catch (const koopeig::StageFailure& e) {
        std::cerr << "error: " << e.what() << '\n';
        return koopeig::stage_exit_code(e.stage);
    } catch (const koopeig::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
