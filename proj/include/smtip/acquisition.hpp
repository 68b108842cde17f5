#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <smtip/dynamics.hpp>
#include <smtip/gp.hpp>
#include <smtip/planner.hpp>

namespace smtip {

/// barl queries anywhere in the state box; tip only at the current state;
/// smtip at a state reached after holding the control for tau - 1 steps.
enum class AcquisitionMode { barl, tip, smtip };

inline std::string_view to_string(AcquisitionMode m)
{
    switch (m) {
    case AcquisitionMode::barl: return "barl";
    case AcquisitionMode::tip: return "tip";
    default: return "smtip";
    }
}

inline AcquisitionMode acquisition_mode_from_string(std::string_view s)
{
    if (s == "barl")
        return AcquisitionMode::barl;
    if (s == "tip")
        return AcquisitionMode::tip;
    if (s == "smtip")
        return AcquisitionMode::smtip;
    throw std::invalid_argument("unknown acquisition mode '" + std::string(s) + "'");
}

/// Differential entropy (nats) of a diagonal Gaussian.
inline double gaussian_entropy(const Eigen::VectorXd& variances)
{
    double h = 0.0;
    for (Eigen::Index j = 0; j < variances.size(); ++j) {
        if (!(variances[j] > 0.0))
            throw std::invalid_argument("gaussian_entropy: variances must be positive");
        h += 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * variances[j]);
    }
    return h;
}

/// Monte-Carlo samples of the optimal trajectory under the current model,
/// with the model conditioned on each one. Valid for one sampling iteration.
struct PosteriorTrajectorySet {
    std::vector<std::vector<TransitionTuple>> trajectories;
    std::vector<GPModel> conditioned;

    std::size_t size() const { return trajectories.size(); }

    void add(const GPModel& model, std::vector<TransitionTuple> trajectory)
    {
        conditioned.push_back(model.condition(trajectory));
        trajectories.push_back(std::move(trajectory));
    }
};

/// Runs m receding-horizon episodes of length planner.horizon, each planning on
/// the GP posterior mean while the executed path is a trajectory-consistent
/// posterior sample. Starts are fresh initial-state draws unless `start` is
/// given.
inline PosteriorTrajectorySet sample_optimal_trajectories(const GPModel& model, const SystemSpec& spec, const PlannerConfig& planner,
    int m, const std::optional<StateVector>& start, Rng& rng)
{
    if (m < 1)
        throw std::invalid_argument("sample_optimal_trajectories: m must be >= 1");
    PosteriorTrajectorySet set;
    auto shared = std::make_shared<const GPModel>(model);
    for (int i = 0; i < m; ++i) {
        const StateVector x0 = start ? *start : sample_initial(spec, rng);
        auto policy = mpc_policy(GPMeanModel(shared, spec), planner, Rng(rng()));
        set.add(model, sample_rollout(model, x0, policy, planner.horizon, rng));
    }
    return set;
}

struct EIGReport {
    double first_term = 0.0;
    std::vector<double> conditioned_terms;
    double estimate = 0.0;
};

inline EIGReport eig_point(const GPModel& model, const PosteriorTrajectorySet& set, const StateVector& x, const ControlVector& u)
{
    if (set.conditioned.empty())
        throw std::invalid_argument("eig_point: empty trajectory set");
    EIGReport r;
    r.first_term = gaussian_entropy(model.posterior(x, u).variance);
    double sum = 0.0;
    for (const auto& cm : set.conditioned) {
        const double h = gaussian_entropy(cm.posterior(x, u).variance);
        r.conditioned_terms.push_back(h);
        sum += h;
    }
    r.estimate = r.first_term - sum / static_cast<double>(set.conditioned.size());
    return r;
}

/// Mean-model lookahead: tau - 1 steps holding u, so tau = 1 returns x.
inline StateVector bootstrap_future(const GPModel& model, const StateVector& x, const ControlVector& u, int tau)
{
    if (tau < 1)
        throw std::invalid_argument("bootstrap_future: tau must be >= 1");
    StateVector s = x;
    for (int i = 1; i < tau; ++i)
        s = model.posterior_mean(s, u);
    return s;
}

/// A proposed extended action with its information estimate. For barl the
/// state is the queried state; otherwise it is the bootstrapped state at which
/// u will be queried.
struct Candidate {
    ControlVector u;
    int tau = 1;
    StateVector bootstrapped_state;
    EIGReport eig;
};

inline Candidate eig_smtip(const GPModel& model, const PosteriorTrajectorySet& set, const StateVector& x_now, const ControlVector& u, int tau)
{
    Candidate c{u, tau, bootstrap_future(model, x_now, u, tau), {}};
    c.eig = eig_point(model, set, c.bootstrapped_state, u);
    return c;
}

/// A candidate before scoring. `state` is set for global-support queries.
struct Proposal {
    ControlVector u;
    int tau = 1;
    std::optional<StateVector> state;
};

/// Scores every proposal and returns the argmax; ties go to the lowest index.
inline Candidate select_best(const GPModel& model, const PosteriorTrajectorySet& set, const StateVector& x_now,
    const std::vector<Proposal>& proposals)
{
    if (proposals.empty())
        throw std::invalid_argument("select_best: no proposals");
    std::optional<Candidate> best;
    for (const auto& p : proposals) {
        Candidate c = p.state ? Candidate{p.u, p.tau, *p.state, eig_point(model, set, *p.state, p.u)}
                              : eig_smtip(model, set, x_now, p.u, p.tau);
        if (!best || c.eig.estimate > best->eig.estimate)
            best = std::move(c);
    }
    return *best;
}

inline ControlVector uniform_in_box(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi, Rng& rng)
{
    Eigen::VectorXd v(lo.size());
    for (Eigen::Index i = 0; i < lo.size(); ++i)
        v[i] = std::uniform_real_distribution<double>(lo[i], hi[i])(rng);
    return v;
}

/// Uniform candidate draws for the given mode. tip is smtip with t_max = 1,
/// so both share a random stream layout.
inline std::vector<Proposal> draw_proposals(AcquisitionMode mode, const SystemSpec& spec, int n_candidates, int t_max, Rng& rng)
{
    if (n_candidates < 1)
        throw std::invalid_argument("n_candidates must be >= 1");
    if (t_max < 1)
        throw std::invalid_argument("t_max must be >= 1");
    std::vector<Proposal> out;
    out.reserve(n_candidates);
    if (mode == AcquisitionMode::barl) {
        for (int i = 0; i < n_candidates; ++i) {
            StateVector x = uniform_in_box(spec.x_box_lo, spec.x_box_hi, rng);
            ControlVector u = uniform_in_box(spec.u_lo, spec.u_hi, rng);
            out.push_back({std::move(u), 1, std::move(x)});
        }
        return out;
    }
    const int tm = mode == AcquisitionMode::tip ? 1 : t_max;
    for (int i = 0; i < n_candidates; ++i) {
        ControlVector u = uniform_in_box(spec.u_lo, spec.u_hi, rng);
        const int tau = std::uniform_int_distribution<int>(1, tm)(rng);
        out.push_back({std::move(u), tau, std::nullopt});
    }
    return out;
}

inline Candidate select_action(AcquisitionMode mode, const GPModel& model, const PosteriorTrajectorySet& set, const SystemSpec& spec,
    const StateVector& x_now, int n_candidates, int t_max, Rng& rng)
{
    return select_best(model, set, x_now, draw_proposals(mode, spec, n_candidates, t_max, rng));
}

} // namespace smtip
