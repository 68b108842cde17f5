#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <vector>

#include <smtip/dynamics.hpp>
#include <smtip/gp.hpp>
#include <smtip/types.hpp>

namespace smtip {

struct PlannerConfig {
    int horizon = 25;
    int population = 200;
    int elites = 20;
    int cem_iters = 5;
    double noise_beta = 2.0;
    /// Initial sampling std per control dim; empty means a quarter of the
    /// control range.
    Eigen::VectorXd init_std;
    double decay = 0.9;
    double momentum = 0.1;
    double elite_keep_fraction = 0.3;
    int mc_rollouts_per_sequence = 1;

    void validate() const
    {
        if (horizon < 1 || population < 1 || elites < 1 || cem_iters < 1 || mc_rollouts_per_sequence < 1)
            throw std::invalid_argument("planner counts must be >= 1");
        if (elites > population)
            throw std::invalid_argument("planner.elites must not exceed planner.population");
        if (!(noise_beta >= 0.0))
            throw std::invalid_argument("planner.noise_beta must be >= 0");
        if (!(decay > 0.0 && decay <= 1.0))
            throw std::invalid_argument("planner.decay must lie in (0, 1]");
        if (!(momentum >= 0.0 && momentum < 1.0))
            throw std::invalid_argument("planner.momentum must lie in [0, 1)");
        if (!(elite_keep_fraction >= 0.0 && elite_keep_fraction < 1.0))
            throw std::invalid_argument("planner.elite_keep_fraction must lie in [0, 1)");
        if ((init_std.array() < 0.0).any())
            throw std::invalid_argument("planner.init_std must be non-negative");
    }
};

/// horizon x dim_control, one control per row.
using ControlSequence = Eigen::MatrixXd;

/// Frequency-domain synthesis of Gaussian noise with power spectral density
/// proportional to 1/f^beta along the time axis, normalized to unit marginal
/// variance. The DC bin takes the amplitude of the lowest frequency.
class ColoredNoise {
public:
    ColoredNoise(double beta, int horizon) : _horizon(horizon)
    {
        if (horizon < 1)
            throw std::invalid_argument("colored_noise: horizon must be >= 1");
        const int n_freq = horizon / 2 + 1;
        _amp.resize(n_freq);
        _has_sin.assign(n_freq, true);
        for (int k = 0; k < n_freq; ++k) {
            const double f = std::max(k, 1) / static_cast<double>(horizon);
            _amp[k] = std::pow(f, -beta / 2.0);
        }
        _has_sin[0] = false;
        if (horizon % 2 == 0)
            _has_sin[n_freq - 1] = false;
        double var = 0.0;
        for (int k = 0; k < n_freq; ++k)
            var += _amp[k] * _amp[k];
        _amp /= std::sqrt(var);
        _cos.resize(horizon, n_freq);
        _sin.resize(horizon, n_freq);
        for (int t = 0; t < horizon; ++t)
            for (int k = 0; k < n_freq; ++k) {
                const double phase = 2.0 * std::numbers::pi * k * t / horizon;
                _cos(t, k) = std::cos(phase);
                _sin(t, k) = std::sin(phase);
            }
    }

    Eigen::MatrixXd sample(int dim, Rng& rng) const
    {
        std::normal_distribution<double> normal(0.0, 1.0);
        const Eigen::Index n_freq = _amp.size();
        Eigen::MatrixXd a(n_freq, dim), b(n_freq, dim);
        for (int d = 0; d < dim; ++d)
            for (Eigen::Index k = 0; k < n_freq; ++k) {
                a(k, d) = _amp[k] * normal(rng);
                b(k, d) = _has_sin[k] ? _amp[k] * normal(rng) : 0.0;
            }
        return _cos * a - _sin * b;
    }

    int horizon() const { return _horizon; }

private:
    int _horizon;
    Eigen::VectorXd _amp;
    std::vector<bool> _has_sin;
    Eigen::MatrixXd _cos;
    Eigen::MatrixXd _sin;
};

inline Eigen::MatrixXd colored_noise(double beta, int horizon, int dim, Rng& rng)
{
    return ColoredNoise(beta, horizon).sample(dim, rng);
}

struct RolloutResult {
    std::vector<StateVector> states;
    double cost = 0.0;
};

/// Anything that can roll a control sequence forward from a state and score
/// it with the summed per-step cost.
template <typename M>
concept RolloutModel = requires(const M& m, const StateVector& x, const ControlSequence& seq, Rng& rng) {
    { m.rollout(x, seq, rng) } -> std::convertible_to<RolloutResult>;
    { m.control_lower() } -> std::convertible_to<ControlVector>;
    { m.control_upper() } -> std::convertible_to<ControlVector>;
    { m.stochastic() } -> std::convertible_to<bool>;
};

/// The real plant; noise-free unless `noisy` is set.
class TrueSystemModel {
public:
    explicit TrueSystemModel(SystemSpec spec, bool noisy = false) : _spec(std::move(spec)), _noisy(noisy) {}

    RolloutResult rollout(const StateVector& x0, const ControlSequence& seq, Rng& rng) const
    {
        RolloutResult r;
        r.states.reserve(seq.rows() + 1);
        r.states.push_back(x0);
        for (Eigen::Index k = 0; k < seq.rows(); ++k) {
            const ControlVector u = seq.row(k).transpose();
            const StateVector& x = r.states.back();
            r.cost += cost(_spec, x, u);
            if (stochastic()) {
                r.states.push_back(step(_spec, x, u, rng));
            }
            else {
                StateVector next = integrate(_spec, x, u);
                wrap_state(_spec.periodic_state, next);
                r.states.push_back(std::move(next));
            }
        }
        return r;
    }

    ControlVector control_lower() const { return _spec.u_lo; }
    ControlVector control_upper() const { return _spec.u_hi; }
    bool stochastic() const { return _noisy && _spec.sigma_process > 0.0; }
    const SystemSpec& spec() const { return _spec; }

private:
    SystemSpec _spec;
    bool _noisy;
};

/// Noise-free rollouts through the GP posterior mean.
class GPMeanModel {
public:
    GPMeanModel(std::shared_ptr<const GPModel> model, SystemSpec spec) : _model(std::move(model)), _spec(std::move(spec)) {}
    GPMeanModel(const GPModel& model, SystemSpec spec) : GPMeanModel(std::make_shared<const GPModel>(model), std::move(spec)) {}

    RolloutResult rollout(const StateVector& x0, const ControlSequence& seq, Rng&) const
    {
        RolloutResult r;
        r.states.reserve(seq.rows() + 1);
        r.states.push_back(x0);
        for (Eigen::Index k = 0; k < seq.rows(); ++k) {
            const ControlVector u = seq.row(k).transpose();
            r.cost += cost(_spec, r.states.back(), u);
            r.states.push_back(_model->posterior_mean(r.states.back(), u));
        }
        return r;
    }

    ControlVector control_lower() const { return _spec.u_lo; }
    ControlVector control_upper() const { return _spec.u_hi; }
    bool stochastic() const { return false; }
    const GPModel& model() const { return *_model; }

private:
    std::shared_ptr<const GPModel> _model;
    SystemSpec _spec;
};

/// Rollouts drawing each next state from the GP posterior predictive
/// independently per step (no conditioning along the path).
class GPSampleModel {
public:
    GPSampleModel(std::shared_ptr<const GPModel> model, SystemSpec spec) : _model(std::move(model)), _spec(std::move(spec)) {}
    GPSampleModel(const GPModel& model, SystemSpec spec) : GPSampleModel(std::make_shared<const GPModel>(model), std::move(spec)) {}

    RolloutResult rollout(const StateVector& x0, const ControlSequence& seq, Rng& rng) const
    {
        RolloutResult r;
        r.states.reserve(seq.rows() + 1);
        r.states.push_back(x0);
        for (Eigen::Index k = 0; k < seq.rows(); ++k) {
            const ControlVector u = seq.row(k).transpose();
            r.cost += cost(_spec, r.states.back(), u);
            const GaussianBelief b = _model->posterior(r.states.back(), u);
            StateVector next = b.mean + (b.variance.array().sqrt() * standard_normal(b.mean.size(), rng).array()).matrix();
            wrap_state(_spec.periodic_state, next);
            r.states.push_back(std::move(next));
        }
        return r;
    }

    ControlVector control_lower() const { return _spec.u_lo; }
    ControlVector control_upper() const { return _spec.u_hi; }
    bool stochastic() const { return true; }

private:
    std::shared_ptr<const GPModel> _model;
    SystemSpec _spec;
};

/// Deterministic model from plain callables; used for analytic test problems.
template <typename StepFn, typename CostFn>
class FunctionModel {
public:
    FunctionModel(StepFn step_fn, CostFn cost_fn, ControlVector lo, ControlVector hi)
        : _step(std::move(step_fn)), _cost(std::move(cost_fn)), _lo(std::move(lo)), _hi(std::move(hi)) {}

    RolloutResult rollout(const StateVector& x0, const ControlSequence& seq, Rng&) const
    {
        RolloutResult r;
        r.states.push_back(x0);
        for (Eigen::Index k = 0; k < seq.rows(); ++k) {
            const ControlVector u = seq.row(k).transpose();
            r.cost += _cost(r.states.back(), u);
            r.states.push_back(_step(r.states.back(), u));
        }
        return r;
    }

    ControlVector control_lower() const { return _lo; }
    ControlVector control_upper() const { return _hi; }
    bool stochastic() const { return false; }

private:
    StepFn _step;
    CostFn _cost;
    ControlVector _lo, _hi;
};

struct PlanResult {
    ControlSequence best;
    ControlVector first_action;
    double predicted_cost = std::numeric_limits<double>::infinity();
    ControlSequence mean;
    ControlSequence std;
    /// Best-ever cost after each CEM iteration.
    std::vector<double> best_cost_history;
};

namespace detail {

inline ControlSequence clip_rows(ControlSequence s, const ControlVector& lo, const ControlVector& hi)
{
    for (Eigen::Index k = 0; k < s.rows(); ++k)
        s.row(k) = s.row(k).cwiseMax(lo.transpose()).cwiseMin(hi.transpose());
    return s;
}

/// Previous solution advanced by one step; the vacated tail row gets the
/// centre of the control box.
inline ControlSequence shift_one(const ControlSequence& prev, const ControlVector& centre, int horizon)
{
    ControlSequence out(horizon, centre.size());
    for (int k = 0; k < horizon; ++k)
        if (k + 1 < prev.rows())
            out.row(k) = prev.row(k + 1);
        else
            out.row(k) = centre.transpose();
    return out;
}

} // namespace detail

/// Colored-noise cross-entropy planner with elite retention, momentum on the
/// sampling distribution and geometric decay of its std.
template <RolloutModel M>
PlanResult plan(const M& model, const StateVector& x, const PlannerConfig& cfg, Rng& rng,
    const std::optional<ControlSequence>& warm_start = std::nullopt, const ColoredNoise* noise = nullptr)
{
    cfg.validate();
    const ControlVector lo = model.control_lower();
    const ControlVector hi = model.control_upper();
    const int du = static_cast<int>(lo.size());
    const int T = cfg.horizon;
    const ControlVector centre = 0.5 * (lo + hi);

    std::optional<ColoredNoise> own_noise;
    if (!noise || noise->horizon() != T) {
        own_noise.emplace(cfg.noise_beta, T);
        noise = &*own_noise;
    }

    PlanResult res;
    res.mean = warm_start ? detail::shift_one(*warm_start, centre, T) : ControlSequence(centre.transpose().replicate(T, 1));
    Eigen::VectorXd s0 = cfg.init_std.size() == du ? cfg.init_std : Eigen::VectorXd(0.25 * (hi - lo));
    res.std = s0.transpose().replicate(T, 1);

    const int n_keep = static_cast<int>(cfg.elite_keep_fraction * cfg.elites);
    std::vector<ControlSequence> kept;
    const bool stochastic = model.stochastic();
    Rng scratch(0);

    for (int it = 0; it < cfg.cem_iters; ++it) {
        std::vector<ControlSequence> pop;
        pop.reserve(cfg.population + kept.size());
        for (int i = 0; i < cfg.population; ++i) {
            const Eigen::MatrixXd eps = noise->sample(du, rng);
            pop.push_back(detail::clip_rows(res.mean + (res.std.array() * eps.array()).matrix(), lo, hi));
        }
        for (auto& k : kept)
            pop.push_back(std::move(k));
        kept.clear();

        const std::uint64_t iter_seed = stochastic ? rng() : 0;
        std::vector<double> costs(pop.size());
        for (std::size_t i = 0; i < pop.size(); ++i) {
            double total = 0.0;
            const int reps = stochastic ? cfg.mc_rollouts_per_sequence : 1;
            for (int r = 0; r < reps; ++r) {
                Rng stream = stochastic ? derive_stream({iter_seed, i, static_cast<std::uint64_t>(r)}) : scratch;
                total += model.rollout(x, pop[i], stream).cost;
            }
            const double c = total / reps;
            costs[i] = std::isfinite(c) ? c : std::numeric_limits<double>::infinity();
        }
        std::vector<std::size_t> order(pop.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return costs[a] < costs[b]; });
        if (!std::isfinite(costs[order.front()]))
            throw NumericalError("planner: every rollout cost is non-finite");

        if (costs[order.front()] < res.predicted_cost) {
            res.predicted_cost = costs[order.front()];
            res.best = pop[order.front()];
        }
        // the sampling mean competes for best-ever but not for elite slots
        {
            const ControlSequence m = detail::clip_rows(res.mean, lo, hi);
            double total = 0.0;
            const int reps = stochastic ? cfg.mc_rollouts_per_sequence : 1;
            for (int r = 0; r < reps; ++r) {
                Rng stream = stochastic ? derive_stream({iter_seed, pop.size(), static_cast<std::uint64_t>(r)}) : scratch;
                total += model.rollout(x, m, stream).cost;
            }
            if (const double c = total / reps; std::isfinite(c) && c < res.predicted_cost) {
                res.predicted_cost = c;
                res.best = m;
            }
        }
        res.best_cost_history.push_back(res.predicted_cost);

        const int E = cfg.elites;
        ControlSequence elite_mean = ControlSequence::Zero(T, du);
        for (int e = 0; e < E; ++e)
            elite_mean += pop[order[e]];
        elite_mean /= E;
        ControlSequence elite_var = ControlSequence::Zero(T, du);
        for (int e = 0; e < E; ++e)
            elite_var.array() += (pop[order[e]] - elite_mean).array().square();
        elite_var /= E;

        res.mean = cfg.momentum * res.mean + (1.0 - cfg.momentum) * elite_mean;
        res.std = cfg.decay * (cfg.momentum * res.std + (1.0 - cfg.momentum) * ControlSequence(elite_var.array().sqrt()));

        for (int e = 0; e < n_keep && e < E; ++e)
            kept.push_back(pop[order[e]]);
    }
    res.first_action = res.best.row(0).transpose();
    return res;
}

/// Receding-horizon policy: replans at every call, warm-started from the
/// previous call's sampling mean.
template <RolloutModel M>
class MpcPolicy {
public:
    MpcPolicy(M model, PlannerConfig cfg, Rng rng)
        : _model(std::move(model)), _cfg(std::move(cfg)), _rng(std::move(rng)), _noise(_cfg.noise_beta, _cfg.horizon) {}

    ControlVector operator()(const StateVector& x)
    {
        _last = plan(_model, x, _cfg, _rng, _warm, &_noise);
        _warm = _last.mean;
        return _last.first_action;
    }

    void reset(Rng rng)
    {
        _rng = std::move(rng);
        _warm.reset();
    }

    const PlanResult& last_plan() const { return _last; }
    const M& model() const { return _model; }

private:
    M _model;
    PlannerConfig _cfg;
    Rng _rng;
    ColoredNoise _noise;
    std::optional<ControlSequence> _warm;
    PlanResult _last;
};

template <RolloutModel M>
MpcPolicy<M> mpc_policy(M model, const PlannerConfig& cfg, Rng rng)
{
    return MpcPolicy<M>(std::move(model), cfg, std::move(rng));
}

} // namespace smtip
