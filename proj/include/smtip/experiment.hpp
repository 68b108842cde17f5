#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <smtip/acquisition.hpp>
#include <smtip/dynamics.hpp>
#include <smtip/gp.hpp>
#include <smtip/planner.hpp>

namespace smtip {

struct GPSettings {
    Eigen::VectorXd lengthscales;
    double signal_variance = 1.0;
    double noise_variance = 1e-4;
    /// Hyperparameters are refit whenever the dataset size is a multiple of this.
    int refit_every = 5;
    FitOptions fit;

    KernelParams initial_params() const { return KernelParams::from_values(lengthscales, signal_variance, noise_variance); }
};

struct ExperimentConfig {
    SystemSpec system;
    AcquisitionMode mode = AcquisitionMode::smtip;
    int t_max = 4;
    int n_max = 100;
    int m = 5;
    int n_candidates = 100;
    /// Start sampled optimal trajectories at the current state rather than at
    /// fresh initial-state draws.
    bool trajectories_from_current = false;
    /// Policy evaluated on the true system.
    PlannerConfig planner;
    /// Planner used inside posterior trajectory sampling.
    PlannerConfig acquisition_planner;
    GPSettings gp;
    int eval_every = 2;
    std::vector<StateVector> eval_starts;
    int eval_horizon = 200;
    std::vector<std::int64_t> seeds;
    std::uint64_t master_seed = 0;
    std::string output_dir = "runs";
    bool record_wall_time = false;

    void validate() const
    {
        smtip::validate(system);
        planner.validate();
        acquisition_planner.validate();
        if (t_max < 1)
            throw std::invalid_argument("mode.t_max must be >= 1");
        if (n_max < 1 || m < 1 || n_candidates < 1)
            throw std::invalid_argument("n_max, m and n_candidates must be >= 1");
        if (eval_every < 1 || eval_horizon < 1)
            throw std::invalid_argument("eval_every and eval_horizon must be >= 1");
        if (eval_starts.empty())
            throw std::invalid_argument("experiment.eval_starts must not be empty");
        for (const auto& s : eval_starts)
            if (s.size() != system.dim_state)
                throw std::invalid_argument("experiment.eval_starts entries must match the state dimension");
        if (gp.lengthscales.size() != system.dim_state + system.dim_control)
            throw std::invalid_argument("gp.lengthscales must have dim_state + dim_control entries");
        if (!(gp.signal_variance > 0.0) || !(gp.noise_variance > 0.0) || (gp.lengthscales.array() <= 0.0).any())
            throw std::invalid_argument("gp hyperparameters must be positive");
        if (gp.refit_every < 1 || gp.fit.restarts < 0 || gp.fit.max_iters < 0)
            throw std::invalid_argument("gp refit schedule is invalid");
    }
};

/// Evaluation starts drawn once from each system's initial distribution and
/// frozen here.
inline std::vector<StateVector> default_eval_starts(SystemKind kind)
{
    if (kind == SystemKind::lorenz)
        return {
            StateVector{{8.702053061845925, 7.9806512139966985, 26.444094897958912}},
            StateVector{{9.106784813060276, 7.077757176513063, 25.745994495853367}},
            StateVector{{7.874581484762804, 8.208755693079919, 26.806036884936}},
            StateVector{{10.635629800773739, 9.273937984341359, 26.76734655691722}},
            StateVector{{9.48024776450197, 8.413636307298205, 27.51698271988639}},
        };
    return {
        StateVector{{3.1189644609734, -0.03679502552517875}},
        StateVector{{3.1378222125927167, 0.02977936303069221}},
        StateVector{{3.1040458030929674, 0.025427860515312428}},
        StateVector{{3.0715405672706604, 0.020488169998233163}},
        StateVector{{3.139331687132291, -0.0563348525492454}},
    };
}

inline ExperimentConfig default_config(SystemKind kind)
{
    ExperimentConfig c;
    c.system = make_system(kind);
    if (kind == SystemKind::lorenz) {
        c.n_max = 100;
        c.planner.horizon = 25;
        c.planner.noise_beta = 2.0;
        c.gp.lengthscales = Eigen::VectorXd::Constant(6, 10.0);
        c.gp.signal_variance = 1.0;
    }
    else {
        c.n_max = 200;
        c.planner.horizon = 15;
        c.planner.noise_beta = 1.0;
        c.gp.lengthscales = Eigen::VectorXd{{1.0, 3.0, 2.0}};
        c.gp.signal_variance = 0.1;
    }
    c.gp.noise_variance = 1e-4;
    c.acquisition_planner = c.planner;
    c.acquisition_planner.population = 50;
    c.acquisition_planner.elites = 5;
    c.acquisition_planner.cem_iters = 3;
    c.eval_starts = default_eval_starts(kind);
    c.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    return c;
}

/// One sampling iteration. `k` is the decision epoch after the iteration.
struct TrialRecord {
    int n = 0;
    long k = 0;
    int tau = 1;
    double eig = 0.0;
    double eig_first_term = 0.0;
    /// Distance between the bootstrapped query state and the realized state.
    double bootstrap_err = 0.0;
    std::optional<double> eval_cost;
    std::optional<double> wall_ms;
};

struct TrialResult {
    std::int64_t seed = 0;
    std::vector<TrialRecord> records;
    GPModel model;
    /// Set when a numerical failure aborted the trial; records are partial.
    std::optional<std::string> error;
};

/// Mean total cost (k = 0..T inclusive) of the MPC policy planned on
/// `planning_model`, executed on the noisy true system from each start.
template <RolloutModel M>
double evaluate_policy(const M& planning_model, const SystemSpec& spec, const PlannerConfig& cfg, const std::vector<StateVector>& starts,
    int T, Rng& rng)
{
    if (starts.empty())
        throw std::invalid_argument("evaluate_policy: no starts");
    double total = 0.0;
    for (const auto& x0 : starts) {
        auto policy = mpc_policy(planning_model, cfg, Rng(rng()));
        StateVector x = x0;
        for (int k = 0; k <= T; ++k) {
            const ControlVector u = clip_control(spec, policy(x));
            total += cost(spec, x, u);
            if (k < T)
                x = step(spec, x, u, rng);
        }
    }
    return total / static_cast<double>(starts.size());
}

inline double evaluate_policy(const GPModel& model, const SystemSpec& spec, const PlannerConfig& cfg, const std::vector<StateVector>& starts,
    int T, Rng& rng)
{
    return evaluate_policy(GPMeanModel(model, spec), spec, cfg, starts, T, rng);
}

inline GPModel initial_model(const ExperimentConfig& cfg)
{
    return GPModel::shared_params(cfg.system.dim_state, cfg.system.dim_control, cfg.gp.initial_params(), cfg.system.periodic_state);
}

/// The sampling loop of one trial on one continuous system trajectory.
/// Random streams are derived from (master_seed, seed, purpose) so records up
/// to iteration n do not depend on n_max or on the evaluation schedule.
inline TrialResult run_trial(const ExperimentConfig& cfg, std::int64_t seed)
{
    cfg.validate();
    using clock = std::chrono::steady_clock;
    const auto s = static_cast<std::uint64_t>(seed);
    Rng sys_rng = derive_stream({cfg.master_seed, s, 1});
    Rng acq_rng = derive_stream({cfg.master_seed, s, 2});
    Rng fit_rng = derive_stream({cfg.master_seed, s, 3});
    const SystemSpec& spec = cfg.system;

    TrialResult out;
    out.seed = seed;
    out.model = initial_model(cfg);
    StateVector x = sample_initial(spec, sys_rng);
    long k = 0;
    try {
        for (int n = 1; n <= cfg.n_max; ++n) {
            const auto t0 = clock::now();
            const auto start = cfg.trajectories_from_current ? std::optional<StateVector>(x) : std::nullopt;
            const PosteriorTrajectorySet trajs =
                sample_optimal_trajectories(out.model, spec, cfg.acquisition_planner, cfg.m, start, acq_rng);
            const Candidate cand = select_action(cfg.mode, out.model, trajs, spec, x, cfg.n_candidates, cfg.t_max, acq_rng);

            TransitionTuple obs;
            double boot_err = 0.0;
            if (cfg.mode == AcquisitionMode::barl) {
                obs = {cand.bootstrapped_state, cand.u, step(spec, cand.bootstrapped_state, cand.u, sys_rng), 1, k};
                x = obs.x_next;
                k += 1;
            }
            else {
                const auto path = rollout_held(spec, x, cand.u, cand.tau, sys_rng);
                obs = {path[cand.tau - 1], clip_control(spec, cand.u), path[cand.tau], cand.tau, k + cand.tau - 1};
                StateVector diff = cand.bootstrapped_state - path[cand.tau - 1];
                wrap_state(spec.periodic_state, diff);
                boot_err = diff.norm();
                x = path[cand.tau];
                k += cand.tau;
            }

            const std::vector<TransitionTuple> added{obs};
            out.model = out.model.condition(added);
            if (n % cfg.gp.refit_every == 0) {
                const FitResult fit = fit_hyperparams(out.model, cfg.gp.fit, fit_rng);
                out.model = out.model.with_params(fit.params);
            }

            TrialRecord rec;
            rec.n = n;
            rec.k = k;
            rec.tau = cand.tau;
            rec.eig = cand.eig.estimate;
            rec.eig_first_term = cand.eig.first_term;
            rec.bootstrap_err = boot_err;
            if (n % cfg.eval_every == 0) {
                Rng eval_rng = derive_stream({cfg.master_seed, s, 4, static_cast<std::uint64_t>(n)});
                rec.eval_cost = evaluate_policy(out.model, spec, cfg.planner, cfg.eval_starts, cfg.eval_horizon, eval_rng);
            }
            if (cfg.record_wall_time)
                rec.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
            out.records.push_back(rec);
        }
    }
    catch (const std::exception& e) {
        out.error = e.what();
    }
    return out;
}

/// Normalized ensemble autocovariance Cov(X_0, X_k) / Var(X_0) of one state
/// component under i.i.d. uniform controls of amplitude `intensity`. All
/// intensities share the initial ensemble and the underlying random draws.
inline std::vector<std::vector<double>> autocorrelation_diagnostic(const SystemSpec& spec, const std::vector<double>& intensities,
    int ensemble, int horizon, int component, std::uint64_t seed)
{
    if (ensemble < 2)
        throw std::invalid_argument("autocorrelation_diagnostic: ensemble must be >= 2");
    if (component < 0 || component >= spec.dim_state)
        throw std::invalid_argument("autocorrelation_diagnostic: component out of range");
    std::vector<StateVector> x0(ensemble);
    {
        Rng init = derive_stream({seed, 0});
        for (auto& x : x0)
            x = sample_initial(spec, init);
    }
    std::vector<std::vector<double>> out;
    for (double intensity : intensities) {
        Rng control_rng = derive_stream({seed, 1});
        Rng noise_rng = derive_stream({seed, 2});
        std::uniform_real_distribution<double> unit(-1.0, 1.0);
        std::vector<StateVector> x = x0;
        Eigen::MatrixXd traj(horizon + 1, ensemble);
        for (int e = 0; e < ensemble; ++e)
            traj(0, e) = x[e][component];
        for (int t = 1; t <= horizon; ++t) {
            for (int e = 0; e < ensemble; ++e) {
                ControlVector u(spec.dim_control);
                for (int j = 0; j < spec.dim_control; ++j)
                    u[j] = intensity * unit(control_rng);
                x[e] = step(spec, x[e], clip_control(spec, u), noise_rng);
                traj(t, e) = x[e][component];
            }
        }
        const Eigen::VectorXd a = traj.row(0).transpose().array() - traj.row(0).mean();
        const double var0 = a.squaredNorm();
        std::vector<double> series(horizon + 1);
        for (int t = 0; t <= horizon; ++t) {
            const Eigen::VectorXd b = traj.row(t).transpose().array() - traj.row(t).mean();
            series[t] = a.dot(b) / var0;
        }
        out.push_back(std::move(series));
    }
    return out;
}

/// First lag whose absolute normalized autocovariance drops below `level`;
/// series.size() when it never does.
inline std::size_t first_crossing_below(const std::vector<double>& series, double level)
{
    for (std::size_t k = 0; k < series.size(); ++k)
        if (std::abs(series[k]) < level)
            return k;
    return series.size();
}

struct AggregateRecord {
    int n = 0;
    std::string metric;
    double mean = 0.0;
    double stderr_ = 0.0;
    int count = 0;
};

/// Per-iteration mean and standard error (sample std / sqrt(count)) over
/// trials for eig, tau and eval_cost. Trials must share the same n grid and
/// evaluation schedule.
inline std::vector<AggregateRecord> aggregate(const std::vector<std::vector<TrialRecord>>& trials)
{
    if (trials.empty())
        throw std::invalid_argument("aggregate: no trials");
    const auto& ref = trials.front();
    for (const auto& t : trials) {
        if (t.size() != ref.size())
            throw std::invalid_argument("aggregate: trials have different lengths");
        for (std::size_t i = 0; i < t.size(); ++i)
            if (t[i].n != ref[i].n || t[i].eval_cost.has_value() != ref[i].eval_cost.has_value())
                throw std::invalid_argument("aggregate: misaligned iteration grids");
    }
    auto summarize = [](std::vector<double> v, int n, const char* metric) {
        // sorted so the result does not depend on trial order
        std::sort(v.begin(), v.end());
        double mean = 0.0;
        for (double x : v)
            mean += x;
        mean /= static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v)
            ss += (x - mean) * (x - mean);
        const double c = static_cast<double>(v.size());
        const double se = v.size() > 1 ? std::sqrt(ss / (c - 1.0)) / std::sqrt(c) : 0.0;
        return AggregateRecord{n, metric, mean, se, static_cast<int>(v.size())};
    };
    std::vector<AggregateRecord> out;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        std::vector<double> eig, tau, ev;
        for (const auto& t : trials) {
            eig.push_back(t[i].eig);
            tau.push_back(t[i].tau);
            if (t[i].eval_cost)
                ev.push_back(*t[i].eval_cost);
        }
        out.push_back(summarize(eig, ref[i].n, "eig"));
        out.push_back(summarize(tau, ref[i].n, "tau"));
        if (!ev.empty())
            out.push_back(summarize(ev, ref[i].n, "eval_cost"));
    }
    return out;
}

// CSV encoding ---------------------------------------------------------------

/// Shortest decimal string that round-trips to the same double.
inline std::string format_double(double v)
{
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline double parse_double(std::string_view s)
{
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw std::invalid_argument("not a number: '" + std::string(s) + "'");
    return v;
}

inline constexpr const char* trial_csv_header = "n,k,tau,eig,eig_first_term,bootstrap_err,eval_cost,wall_ms";
inline constexpr const char* aggregate_csv_header = "n,metric,mean,stderr,count";

inline void write_trial_csv(std::ostream& os, const std::vector<TrialRecord>& records)
{
    os << trial_csv_header << '\n';
    for (const auto& r : records) {
        os << r.n << ',' << r.k << ',' << r.tau << ',' << format_double(r.eig) << ',' << format_double(r.eig_first_term) << ','
           << format_double(r.bootstrap_err) << ',' << (r.eval_cost ? format_double(*r.eval_cost) : "") << ','
           << (r.wall_ms ? format_double(*r.wall_ms) : "") << '\n';
    }
}

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        }
        else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

inline std::vector<TrialRecord> read_trial_csv(std::istream& is)
{
    std::string line;
    if (!std::getline(is, line) || line != trial_csv_header)
        throw std::invalid_argument("trial CSV: unexpected header");
    std::vector<TrialRecord> out;
    while (std::getline(is, line)) {
        if (line.empty())
            continue;
        const auto f = split_csv_line(line);
        if (f.size() != 8)
            throw std::invalid_argument("trial CSV: expected 8 fields");
        TrialRecord r;
        r.n = std::stoi(f[0]);
        r.k = std::stol(f[1]);
        r.tau = std::stoi(f[2]);
        r.eig = parse_double(f[3]);
        r.eig_first_term = parse_double(f[4]);
        r.bootstrap_err = parse_double(f[5]);
        if (!f[6].empty())
            r.eval_cost = parse_double(f[6]);
        if (!f[7].empty())
            r.wall_ms = parse_double(f[7]);
        out.push_back(r);
    }
    return out;
}

inline void write_aggregate_csv(std::ostream& os, const std::vector<AggregateRecord>& rows, int excluded_trials = 0)
{
    if (excluded_trials > 0)
        os << "# excluded_failed_trials=" << excluded_trials << '\n';
    os << aggregate_csv_header << '\n';
    for (const auto& r : rows)
        os << r.n << ',' << r.metric << ',' << format_double(r.mean) << ',' << format_double(r.stderr_) << ',' << r.count << '\n';
}

} // namespace smtip
