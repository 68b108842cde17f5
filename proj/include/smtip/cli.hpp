#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <glob.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <smtip/config.hpp>
#include <smtip/experiment.hpp>
#include <smtip/gp_io.hpp>

#ifndef SMTIP_VERSION
#define SMTIP_VERSION "0.1.0"
#endif

namespace smtip::cli {

inline constexpr int exit_ok = 0;
inline constexpr int exit_validation = 1;
inline constexpr int exit_runtime = 2;

/// "0..9", "1,4,7" or a mix such as "0..3,8".
inline std::vector<std::int64_t> parse_seed_list(const std::string& text)
{
    std::vector<std::int64_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty())
            throw ConfigError("empty entry in seed list '" + text + "'");
        try {
            if (auto dots = item.find(".."); dots != std::string::npos) {
                std::size_t used_lo = 0, used_hi = 0;
                const std::string lo_s = item.substr(0, dots), hi_s = item.substr(dots + 2);
                const long long lo = std::stoll(lo_s, &used_lo), hi = std::stoll(hi_s, &used_hi);
                if (used_lo != lo_s.size() || used_hi != hi_s.size() || hi < lo)
                    throw ConfigError("bad seed range '" + item + "'");
                for (long long s = lo; s <= hi; ++s)
                    out.push_back(s);
            }
            else {
                std::size_t used = 0;
                out.push_back(std::stoll(item, &used));
                if (used != item.size())
                    throw ConfigError("bad seed '" + item + "'");
            }
        }
        catch (const std::logic_error&) {
            throw ConfigError("bad seed list '" + text + "'");
        }
    }
    if (out.empty())
        throw ConfigError("empty seed list");
    return out;
}

inline std::vector<double> parse_number_list(const std::string& text)
{
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(parse_double(item));
        }
        catch (const std::invalid_argument&) {
            throw ConfigError("bad number '" + item + "' in '" + text + "'");
        }
    }
    if (out.empty())
        throw ConfigError("empty number list");
    return out;
}

inline std::string resolve_output_dir(const std::string& flag, const std::string& fallback)
{
    if (!flag.empty())
        return flag;
    if (const char* env = std::getenv("SMTIP_OUTPUT_DIR"); env && *env)
        return env;
    return fallback;
}

inline std::vector<std::string> expand_glob(const std::string& pattern)
{
    glob_t g{};
    std::vector<std::string> out;
    if (::glob(pattern.c_str(), 0, nullptr, &g) == 0)
        for (std::size_t i = 0; i < g.gl_pathc; ++i)
            out.emplace_back(g.gl_pathv[i]);
    globfree(&g);
    return out;
}

inline nlohmann::json document_to_json(const config::Document& doc)
{
    std::function<nlohmann::json(const config::Value&)> conv = [&](const config::Value& v) -> nlohmann::json {
        return std::visit(
            [&](const auto& x) -> nlohmann::json {
                using T = std::decay_t<decltype(x)>;
                if constexpr (std::is_same_v<T, config::Array>) {
                    nlohmann::json a = nlohmann::json::array();
                    for (const auto& e : x)
                        a.push_back(conv(e));
                    return a;
                }
                else {
                    return x;
                }
            },
            v.data);
    };
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, sec] : doc)
        for (const auto& [k, v] : sec)
            j[name][k] = conv(v);
    return j;
}

struct RunOptions {
    std::string config_path;
    std::string seeds;
    int parallel = 1;
    std::string output;
    std::string mode;
    std::optional<int> t_max;
    bool quiet = false;
};

inline void apply_overrides(ExperimentConfig& cfg, const std::string& mode, std::optional<int> t_max)
{
    if (!mode.empty()) {
        try {
            cfg.mode = acquisition_mode_from_string(mode);
        }
        catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    if (t_max)
        cfg.t_max = *t_max;
    try {
        cfg.validate();
    }
    catch (const ConfigError&) {
        throw;
    }
    catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

/// Runs every seed of a config, writing per-trial CSVs and checkpoints, the
/// aggregate CSV and a manifest into the output directory.
inline int run_command(const RunOptions& opt, std::ostream& out, std::ostream& err)
{
    ExperimentConfig cfg = load_config(opt.config_path);
    if (!opt.seeds.empty())
        cfg.seeds = parse_seed_list(opt.seeds);
    apply_overrides(cfg, opt.mode, opt.t_max);
    if (opt.parallel < 1)
        throw ConfigError("--parallel must be >= 1");
    cfg.output_dir = resolve_output_dir(opt.output, cfg.output_dir);
    const std::filesystem::path dir(cfg.output_dir);
    std::filesystem::create_directories(dir);

    std::vector<TrialResult> results(cfg.seeds.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < cfg.seeds.size(); i = next++) {
            results[i] = run_trial(cfg, cfg.seeds[i]);
            if (!opt.quiet) {
                std::lock_guard lock(log_mutex);
                err << "trial seed=" << cfg.seeds[i] << (results[i].error ? " FAILED: " + *results[i].error : " done") << '\n';
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        const int n_threads = std::min<int>(opt.parallel, static_cast<int>(cfg.seeds.size()));
        for (int t = 0; t < n_threads; ++t)
            pool.emplace_back(worker);
    }

    std::vector<std::vector<TrialRecord>> ok;
    nlohmann::json failed = nlohmann::json::array();
    nlohmann::json files = nlohmann::json::array();
    for (const auto& r : results) {
        const std::string stem = "trial_" + std::to_string(r.seed);
        {
            std::ofstream f(dir / (stem + ".csv"));
            write_trial_csv(f, r.records);
        }
        files.push_back(stem + ".csv");
        if (r.error) {
            failed.push_back({{"seed", r.seed}, {"error", *r.error}, {"records", r.records.size()}});
            continue;
        }
        save_model(r.model, (dir / ("model_" + std::to_string(r.seed) + ".json")).string());
        files.push_back("model_" + std::to_string(r.seed) + ".json");
        ok.push_back(r.records);
    }
    if (!ok.empty()) {
        std::ofstream f(dir / "aggregate.csv");
        write_aggregate_csv(f, aggregate(ok), static_cast<int>(failed.size()));
        files.push_back("aggregate.csv");
    }
    const std::string toml = config_to_toml(cfg);
    {
        std::ofstream f(dir / "config.toml");
        f << toml;
    }
    nlohmann::json manifest;
    manifest["version"] = SMTIP_VERSION;
    manifest["config"] = document_to_json(config::parse(toml));
    manifest["seeds"] = cfg.seeds;
    manifest["failed_trials"] = failed;
    manifest["files"] = files;
    {
        std::ofstream f(dir / "manifest.json");
        f << manifest.dump(2) << '\n';
    }
    if (!opt.quiet)
        out << "wrote " << results.size() << " trials to " << dir.string() << '\n';
    return failed.empty() ? exit_ok : exit_runtime;
}

struct AutocorrOptions {
    std::string system = "lorenz";
    std::string config_path;
    int component = 3;
    std::string intensities = "0,5,10";
    int ensemble = 256;
    int horizon = 200;
    std::uint64_t seed = 0;
    std::string output;
};

inline int autocorr_command(const AutocorrOptions& opt, std::ostream& out)
{
    SystemSpec spec = opt.config_path.empty() ? make_system(system_kind_from_string(opt.system)) : load_config(opt.config_path).system;
    const auto intensities = parse_number_list(opt.intensities);
    if (opt.component < 1 || opt.component > spec.dim_state)
        throw ConfigError("--component must lie in 1.." + std::to_string(spec.dim_state));
    if (opt.ensemble < 2 || opt.horizon < 1)
        throw ConfigError("--ensemble must be >= 2 and --horizon >= 1");
    const std::filesystem::path dir(resolve_output_dir(opt.output, "."));
    std::filesystem::create_directories(dir);
    const auto series = autocorrelation_diagnostic(spec, intensities, opt.ensemble, opt.horizon, opt.component - 1, opt.seed);
    for (std::size_t i = 0; i < intensities.size(); ++i) {
        const auto path = dir / ("autocorr_" + std::string(to_string(spec.kind)) + "_x" + std::to_string(opt.component) + "_i" +
                                    format_double(intensities[i]) + ".csv");
        std::ofstream f(path);
        f << "k,value\n";
        for (std::size_t k = 0; k < series[i].size(); ++k)
            f << k << ',' << format_double(series[i][k]) << '\n';
        out << path.string() << '\n';
    }
    return exit_ok;
}

inline int aggregate_command(const std::string& pattern, const std::string& output, std::ostream& out)
{
    const auto paths = expand_glob(pattern);
    if (paths.empty())
        throw ConfigError("no files match '" + pattern + "'");
    std::vector<std::vector<TrialRecord>> trials;
    for (const auto& p : paths) {
        std::ifstream f(p);
        trials.push_back(read_trial_csv(f));
    }
    // trials that stopped early are treated as failed
    std::size_t longest = 0;
    for (const auto& t : trials)
        longest = std::max(longest, t.size());
    std::vector<std::vector<TrialRecord>> complete;
    for (auto& t : trials)
        if (t.size() == longest)
            complete.push_back(std::move(t));
    const int excluded = static_cast<int>(paths.size() - complete.size());
    const auto rows = aggregate(complete);
    if (output.empty() || output == "-") {
        write_aggregate_csv(out, rows, excluded);
    }
    else {
        std::ofstream f(output);
        write_aggregate_csv(f, rows, excluded);
    }
    return exit_ok;
}

inline int eval_command(const std::string& model_path, const std::string& config_path, std::uint64_t seed, std::ostream& out)
{
    const ExperimentConfig cfg = load_config(config_path);
    const GPModel model = load_model(model_path);
    if (model.state_dim() != cfg.system.dim_state || model.control_dim() != cfg.system.dim_control)
        throw ConfigError("checkpoint dimensions do not match the config's system");
    Rng rng = derive_stream({cfg.master_seed, seed, 4, 0});
    const double c = evaluate_policy(model, cfg.system, cfg.planner, cfg.eval_starts, cfg.eval_horizon, rng);
    out << "eval_cost," << format_double(c) << '\n';
    return exit_ok;
}

inline int print_config_command(const std::string& system, const std::string& config_path, const std::string& mode, std::optional<int> t_max,
    std::ostream& out)
{
    ExperimentConfig cfg = config_path.empty() ? default_config(system_kind_from_string(system)) : load_config(config_path);
    apply_overrides(cfg, mode, t_max);
    out << config_to_toml(cfg);
    return exit_ok;
}

/// Entry point shared by the executable and the tests.
inline int parse_and_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"Information-driven sampling for GP dynamics models with semi-Markov inter-decision times"};
    app.require_subcommand(1);
    app.set_version_flag("--version", SMTIP_VERSION);

    RunOptions run;
    auto* run_cmd = app.add_subcommand("run", "run every seed of an experiment config");
    run_cmd->add_option("--config", run.config_path, "experiment config file")->required();
    run_cmd->add_option("--seeds", run.seeds, "seed list, e.g. 0..9 or 1,3,5");
    run_cmd->add_option("--parallel", run.parallel, "concurrent trials");
    run_cmd->add_option("--output", run.output, "output directory (fallback: $SMTIP_OUTPUT_DIR, then config)");
    run_cmd->add_option("--mode", run.mode, "override acquisition mode: barl | tip | smtip");
    run_cmd->add_option("--t-max", run.t_max, "override the maximal inter-decision time");
    run_cmd->add_flag("--quiet", run.quiet, "no progress output");

    AutocorrOptions ac;
    auto* ac_cmd = app.add_subcommand("autocorr", "normalized autocovariance under random controls");
    ac_cmd->add_option("--system", ac.system, "lorenz | pendulum");
    ac_cmd->add_option("--config", ac.config_path, "take system settings from a config file");
    ac_cmd->add_option("--component", ac.component, "1-based state component");
    ac_cmd->add_option("--intensities", ac.intensities, "comma-separated control amplitudes");
    ac_cmd->add_option("--ensemble", ac.ensemble, "ensemble size");
    ac_cmd->add_option("--horizon", ac.horizon, "number of lags");
    ac_cmd->add_option("--seed", ac.seed, "random seed");
    ac_cmd->add_option("--output", ac.output, "output directory");

    std::string agg_input, agg_output;
    auto* agg_cmd = app.add_subcommand("aggregate", "aggregate trial CSVs into mean and standard error");
    agg_cmd->add_option("--input", agg_input, "glob of trial CSVs")->required();
    agg_cmd->add_option("--output", agg_output, "output CSV ('-' for stdout)");

    std::string eval_model, eval_config;
    std::uint64_t eval_seed = 0;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate the MPC policy of a model checkpoint");
    eval_cmd->add_option("--model", eval_model, "model checkpoint (JSON)")->required();
    eval_cmd->add_option("--config", eval_config, "experiment config")->required();
    eval_cmd->add_option("--seed", eval_seed, "evaluation seed");

    std::string pc_system = "lorenz", pc_config, pc_mode;
    std::optional<int> pc_tmax;
    auto* pc_cmd = app.add_subcommand("print-config", "print the fully resolved configuration");
    pc_cmd->add_option("--system", pc_system, "lorenz | pendulum");
    pc_cmd->add_option("--config", pc_config, "resolve this config instead of the defaults");
    pc_cmd->add_option("--mode", pc_mode, "override acquisition mode");
    pc_cmd->add_option("--t-max", pc_tmax, "override the maximal inter-decision time");

    try {
        app.parse(argc, argv);
    }
    catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_validation;
    }

    try {
        if (*run_cmd)
            return run_command(run, out, err);
        if (*ac_cmd)
            return autocorr_command(ac, out);
        if (*agg_cmd)
            return aggregate_command(agg_input, agg_output, out);
        if (*eval_cmd)
            return eval_command(eval_model, eval_config, eval_seed, out);
        if (*pc_cmd)
            return print_config_command(pc_system, pc_config, pc_mode, pc_tmax, out);
    }
    catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return exit_validation;
    }
    catch (const std::exception& e) {
        err << "runtime error: " << e.what() << '\n';
        return exit_runtime;
    }
    return exit_validation;
}

} // namespace smtip::cli
