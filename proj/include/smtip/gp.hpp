#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <smtip/types.hpp>

namespace smtip {

/// Squared-exponential ARD hyperparameters, stored as logs.
struct KernelParams {
    Eigen::VectorXd log_lengthscales;
    double log_signal_variance = 0.0;
    double log_noise_variance = std::log(1e-4);

    static KernelParams from_values(const Eigen::VectorXd& lengthscales, double signal_variance, double noise_variance)
    {
        if ((lengthscales.array() <= 0.0).any() || !(signal_variance > 0.0) || !(noise_variance > 0.0))
            throw std::invalid_argument("kernel hyperparameters must be strictly positive");
        return {lengthscales.array().log().matrix(), std::log(signal_variance), std::log(noise_variance)};
    }

    Eigen::VectorXd lengthscales() const { return log_lengthscales.array().exp().matrix(); }
    double signal_variance() const { return std::exp(log_signal_variance); }
    double noise_variance() const { return std::exp(log_noise_variance); }

    /// [log lengthscales..., log signal variance, log noise variance]
    Eigen::VectorXd packed() const
    {
        Eigen::VectorXd v(log_lengthscales.size() + 2);
        v << log_lengthscales, log_signal_variance, log_noise_variance;
        return v;
    }

    static KernelParams unpacked(const Eigen::VectorXd& v)
    {
        const Eigen::Index p = v.size() - 2;
        return {v.head(p), v[p], v[p + 1]};
    }

    bool operator==(const KernelParams&) const = default;
};

/// Squared-exponential ARD kernel. Periodic input dimensions use the chord
/// distance 2 sin(d/2), which equals the Euclidean distance of the (cos, sin)
/// embedding and keeps the kernel positive definite on the circle.
inline double kernel_eval(const KernelParams& p, const Eigen::VectorXd& a, const Eigen::VectorXd& b, const DimMask& periodic = {})
{
    if (a.size() != b.size() || a.size() != p.log_lengthscales.size())
        throw DimensionError("kernel_eval: input width mismatch");
    double r2 = 0.0;
    for (Eigen::Index j = 0; j < a.size(); ++j) {
        double d = a[j] - b[j];
        if (j < static_cast<Eigen::Index>(periodic.size()) && periodic[j])
            d = 2.0 * std::sin(0.5 * d);
        const double s = d / std::exp(p.log_lengthscales[j]);
        r2 += s * s;
    }
    return p.signal_variance() * std::exp(-0.5 * r2);
}

struct GaussianBelief {
    Eigen::VectorXd mean;
    Eigen::VectorXd variance;
};

namespace detail {

inline constexpr std::array<double, 6> jitter_ladder{0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6};

/// Feature embedding: each periodic input becomes (cos, sin); every feature
/// remembers which lengthscale it uses.
struct Embedding {
    DimMask periodic_input;
    std::vector<int> feature_param;

    explicit Embedding(const DimMask& periodic = {}, int input_dim = 0) : periodic_input(periodic)
    {
        periodic_input.resize(input_dim, false);
        for (int j = 0; j < input_dim; ++j) {
            feature_param.push_back(j);
            if (periodic_input[j])
                feature_param.push_back(j);
        }
    }

    int features() const { return static_cast<int>(feature_param.size()); }

    Eigen::VectorXd operator()(const Eigen::VectorXd& in) const
    {
        Eigen::VectorXd f(features());
        int k = 0;
        for (Eigen::Index j = 0; j < in.size(); ++j) {
            if (periodic_input[j]) {
                f[k++] = std::cos(in[j]);
                f[k++] = std::sin(in[j]);
            }
            else {
                f[k++] = in[j];
            }
        }
        return f;
    }

    Eigen::VectorXd inverse_lengthscales(const KernelParams& p) const
    {
        Eigen::VectorXd inv(features());
        for (int k = 0; k < features(); ++k)
            inv[k] = std::exp(-p.log_lengthscales[feature_param[k]]);
        return inv;
    }
};

/// Latent Gram matrix (no noise) over embedded columns.
inline Eigen::MatrixXd latent_gram(const Eigen::MatrixXd& features, const Eigen::VectorXd& inv_ell, double sf2)
{
    const Eigen::MatrixXd scaled = inv_ell.asDiagonal() * features;
    const Eigen::Index n = features.cols();
    Eigen::MatrixXd K(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        K(i, i) = sf2;
        for (Eigen::Index k = 0; k < i; ++k) {
            const double r2 = (scaled.col(i) - scaled.col(k)).squaredNorm();
            K(i, k) = K(k, i) = sf2 * std::exp(-0.5 * r2);
        }
    }
    return K;
}

inline Eigen::MatrixXd cross_gram(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::VectorXd& inv_ell, double sf2)
{
    const Eigen::MatrixXd sa = inv_ell.asDiagonal() * a;
    const Eigen::MatrixXd sb = inv_ell.asDiagonal() * b;
    Eigen::MatrixXd K(a.cols(), b.cols());
    for (Eigen::Index i = 0; i < a.cols(); ++i)
        for (Eigen::Index k = 0; k < b.cols(); ++k)
            K(i, k) = sf2 * std::exp(-0.5 * (sa.col(i) - sb.col(k)).squaredNorm());
    return K;
}

inline bool try_cholesky(const Eigen::MatrixXd& A, Eigen::MatrixXd& L)
{
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success)
        return false;
    L = llt.matrixL();
    // pivots at round-off level relative to the diagonal count as singular
    const Eigen::ArrayXd piv = L.diagonal().array().square();
    return piv.allFinite() && (piv > 1e-13 * A.diagonal().array().abs()).all();
}

/// Factorizes latent + noise, escalating jitter from `start_jitter`.
inline double factorize(const Eigen::MatrixXd& latent, double noise, Eigen::MatrixXd& L, double start_jitter = 0.0)
{
    for (double jitter : jitter_ladder) {
        if (jitter < start_jitter)
            continue;
        Eigen::MatrixXd A = latent;
        A.diagonal().array() += noise + jitter;
        if (try_cholesky(A, L))
            return jitter;
    }
    throw NumericalError("Gram matrix is not positive definite after jitter escalation");
}

inline Eigen::VectorXd cholesky_solve(const Eigen::MatrixXd& L, const Eigen::VectorXd& y)
{
    Eigen::VectorXd z = L.triangularView<Eigen::Lower>().solve(y);
    return L.transpose().triangularView<Eigen::Upper>().solve(z);
}

/// Log marginal likelihood of one scalar output and, optionally, its gradient
/// with respect to the packed log-hyperparameters.
inline double output_lml(const Eigen::MatrixXd& features, const Embedding& emb, const Eigen::VectorXd& y, const KernelParams& p,
    Eigen::VectorXd* grad = nullptr)
{
    const Eigen::Index n = features.cols();
    const int n_params = static_cast<int>(p.log_lengthscales.size());
    if (n == 0)
        throw std::invalid_argument("log marginal likelihood needs a non-empty dataset");
    const Eigen::VectorXd inv_ell = emb.inverse_lengthscales(p);
    const double sf2 = p.signal_variance();
    const double sn2 = p.noise_variance();
    const Eigen::MatrixXd K = latent_gram(features, inv_ell, sf2);
    Eigen::MatrixXd L;
    factorize(K, sn2, L);
    const Eigen::VectorXd alpha = cholesky_solve(L, y);
    const double value =
        -0.5 * y.dot(alpha) - L.diagonal().array().log().sum() - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
    if (grad) {
        const Eigen::MatrixXd Kinv = L.transpose().triangularView<Eigen::Upper>().solve(
            L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(n, n)));
        const Eigen::MatrixXd W = alpha * alpha.transpose() - Kinv;
        grad->setZero(n_params + 2);
        const Eigen::MatrixXd scaled = inv_ell.asDiagonal() * features;
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index k = 0; k < n; ++k) {
                const double wk = W(i, k) * K(i, k);
                if (i == k)
                    continue;
                for (int f = 0; f < emb.features(); ++f) {
                    const double d = scaled(f, i) - scaled(f, k);
                    (*grad)[emb.feature_param[f]] += 0.5 * wk * d * d;
                }
            }
        }
        (*grad)[n_params] = 0.5 * (W.array() * K.array()).sum();
        (*grad)[n_params + 1] = 0.5 * sn2 * W.trace();
    }
    return value;
}

} // namespace detail

/// Gaussian-process model of a one-step transition kernel. The input is the
/// concatenated (state, control); each state coordinate has an independent
/// scalar GP on the increment x_next - x with zero prior mean.
///
/// Instances are immutable: conditioning and refitting return new models.
class GPModel {
public:
    GPModel() = default;

    GPModel(int state_dim, int control_dim, std::vector<KernelParams> params, DimMask periodic_state = {})
        : _state_dim(state_dim), _control_dim(control_dim), _params(std::move(params)), _periodic_state(std::move(periodic_state))
    {
        _periodic_state.resize(state_dim, false);
        if (static_cast<int>(_params.size()) != state_dim)
            throw DimensionError("GPModel: need one KernelParams per state dimension");
        for (const auto& p : _params)
            if (p.log_lengthscales.size() != input_dim())
                throw DimensionError("GPModel: lengthscale count must equal state_dim + control_dim");
        DimMask periodic_input = _periodic_state;
        periodic_input.resize(input_dim(), false);
        _embedding = detail::Embedding(periodic_input, input_dim());
        _features.resize(_embedding.features(), 0);
        _targets.resize(0, state_dim);
        _factors.resize(state_dim);
        for (int j = 0; j < state_dim; ++j)
            _factors[j].inv_ell = _embedding.inverse_lengthscales(_params[j]);
    }

    static GPModel shared_params(int state_dim, int control_dim, const KernelParams& p, DimMask periodic_state = {})
    {
        return GPModel(state_dim, control_dim, std::vector<KernelParams>(state_dim, p), std::move(periodic_state));
    }

    int state_dim() const { return _state_dim; }
    int control_dim() const { return _control_dim; }
    int input_dim() const { return _state_dim + _control_dim; }
    Eigen::Index size() const { return static_cast<Eigen::Index>(_dataset.size()); }
    bool empty() const { return _dataset.empty(); }
    const std::vector<TransitionTuple>& dataset() const { return _dataset; }
    const std::vector<KernelParams>& params() const { return _params; }
    const DimMask& periodic_state() const { return _periodic_state; }
    const DimMask& periodic_input() const { return _embedding.periodic_input; }
    double jitter(int output) const { return _factors.at(output).jitter; }

    /// Concatenated GP input (x, u).
    Eigen::VectorXd input(const StateVector& x, const ControlVector& u) const
    {
        if (x.size() != _state_dim || u.size() != _control_dim)
            throw DimensionError("GPModel: state/control dimension mismatch");
        Eigen::VectorXd in(input_dim());
        in << x, u;
        return in;
    }

    /// Increment target, with periodic coordinates wrapped.
    Eigen::VectorXd increment(const StateVector& x, const StateVector& x_next) const
    {
        Eigen::VectorXd d = x_next - x;
        wrap_state(_periodic_state, d);
        return d;
    }

    /// Training inputs, one row per observation.
    Eigen::MatrixXd inputs() const
    {
        Eigen::MatrixXd X(size(), input_dim());
        for (Eigen::Index i = 0; i < size(); ++i)
            X.row(i) = input(_dataset[i].x, _dataset[i].u).transpose();
        return X;
    }

    const Eigen::MatrixXd& targets() const { return _targets; }

    GPModel condition(std::span<const TransitionTuple> extra) const
    {
        GPModel out = *this;
        if (extra.empty())
            return out;
        const Eigen::Index n_old = size();
        const Eigen::Index m = static_cast<Eigen::Index>(extra.size());
        out._features.conservativeResize(Eigen::NoChange, n_old + m);
        out._targets.conservativeResize(n_old + m, Eigen::NoChange);
        for (Eigen::Index i = 0; i < m; ++i) {
            const auto& t = extra[i];
            if (t.x.size() != _state_dim || t.x_next.size() != _state_dim || t.u.size() != _control_dim)
                throw DimensionError("GPModel::condition: transition dimension mismatch");
            out._features.col(n_old + i) = _embedding(input(t.x, t.u));
            out._targets.row(n_old + i) = increment(t.x, t.x_next).transpose();
            out._dataset.push_back(t);
        }
        for (int j = 0; j < _state_dim; ++j)
            out.extend_factor(j, n_old);
        return out;
    }

    GPModel condition(const std::vector<TransitionTuple>& extra) const { return condition(std::span<const TransitionTuple>(extra)); }

    /// Same dataset under new hyperparameters (full refactorization).
    GPModel with_params(std::vector<KernelParams> params) const
    {
        GPModel out(_state_dim, _control_dim, std::move(params), _periodic_state);
        return out.condition(_dataset);
    }

    GaussianBelief posterior(const StateVector& x, const ControlVector& u) const
    {
        const Eigen::VectorXd q = _embedding(input(x, u));
        GaussianBelief b{x, Eigen::VectorXd(_state_dim)};
        for (int j = 0; j < _state_dim; ++j) {
            const auto& f = _factors[j];
            const double sf2 = _params[j].signal_variance();
            const double sn2 = _params[j].noise_variance();
            if (empty()) {
                b.variance[j] = sf2 + sn2;
                continue;
            }
            const Eigen::VectorXd ks = kstar(j, q);
            b.mean[j] += ks.dot(f.alpha);
            const Eigen::VectorXd v = f.L.triangularView<Eigen::Lower>().solve(ks);
            b.variance[j] = std::max(sf2 - v.squaredNorm(), 0.0) + sn2;
        }
        wrap_state(_periodic_state, b.mean);
        if (!b.mean.allFinite() || !b.variance.allFinite())
            throw NumericalError("GP posterior is not finite", b.mean);
        return b;
    }

    /// Posterior mean of the next state only; skips the variance solve.
    StateVector posterior_mean(const StateVector& x, const ControlVector& u) const
    {
        StateVector mean = x;
        if (!empty()) {
            const Eigen::VectorXd q = _embedding(input(x, u));
            for (int j = 0; j < _state_dim; ++j)
                mean[j] += kstar(j, q).dot(_factors[j].alpha);
        }
        wrap_state(_periodic_state, mean);
        return mean;
    }

    double log_marginal_likelihood(std::vector<Eigen::VectorXd>* gradients = nullptr) const
    {
        double total = 0.0;
        if (gradients)
            gradients->assign(_state_dim, Eigen::VectorXd());
        for (int j = 0; j < _state_dim; ++j)
            total += output_lml(j, _params[j], gradients ? &(*gradients)[j] : nullptr);
        return total;
    }

    /// Log marginal likelihood of output `j` under alternative hyperparameters.
    double output_lml(int j, const KernelParams& p, Eigen::VectorXd* grad = nullptr) const
    {
        return detail::output_lml(_features, _embedding, _targets.col(j), p, grad);
    }

private:
    struct Factor {
        Eigen::VectorXd inv_ell;
        Eigen::MatrixXd L;
        Eigen::VectorXd alpha;
        double jitter = 0.0;
    };

    Eigen::VectorXd kstar(int j, const Eigen::VectorXd& q) const
    {
        const auto& inv = _factors[j].inv_ell;
        const Eigen::ArrayXd r2 = (inv.asDiagonal() * (_features.colwise() - q)).colwise().squaredNorm().array();
        return (_params[j].signal_variance() * (-0.5 * r2).exp()).matrix();
    }

    /// Extends the Cholesky factor of output j with columns [n_old, n). Falls
    /// back to a full factorization when the Schur complement is not PD.
    void extend_factor(int j, Eigen::Index n_old)
    {
        auto& f = _factors[j];
        const Eigen::Index n = _features.cols();
        const double sf2 = _params[j].signal_variance();
        const double sn2 = _params[j].noise_variance();
        bool extended = false;
        if (n_old > 0) {
            const Eigen::MatrixXd old_cols = _features.leftCols(n_old);
            const Eigen::MatrixXd new_cols = _features.rightCols(n - n_old);
            const Eigen::MatrixXd K12 = detail::cross_gram(old_cols, new_cols, f.inv_ell, sf2);
            Eigen::MatrixXd S = detail::latent_gram(new_cols, f.inv_ell, sf2);
            S.diagonal().array() += sn2 + f.jitter;
            const Eigen::MatrixXd L21t = f.L.triangularView<Eigen::Lower>().solve(K12);
            S.noalias() -= L21t.transpose() * L21t;
            Eigen::MatrixXd L22;
            if (detail::try_cholesky(S, L22)) {
                Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
                L.topLeftCorner(n_old, n_old) = f.L;
                L.bottomLeftCorner(n - n_old, n_old) = L21t.transpose();
                L.bottomRightCorner(n - n_old, n - n_old) = L22;
                f.L = std::move(L);
                extended = true;
            }
        }
        if (!extended) {
            const Eigen::MatrixXd K = detail::latent_gram(_features, f.inv_ell, sf2);
            f.jitter = detail::factorize(K, sn2, f.L, f.jitter);
        }
        f.alpha = detail::cholesky_solve(f.L, _targets.col(j));
    }

    int _state_dim = 0;
    int _control_dim = 0;
    std::vector<KernelParams> _params;
    DimMask _periodic_state;
    detail::Embedding _embedding;
    std::vector<TransitionTuple> _dataset;
    Eigen::MatrixXd _features; // embedded inputs, one column per observation
    Eigen::MatrixXd _targets;  // increments, one row per observation
    std::vector<Factor> _factors;
};

struct FitOptions {
    int restarts = 3;
    int max_iters = 50;
    double restart_spread = 1.0; // std of log-space perturbation for restarts
    double min_lengthscale = 1e-2;
    double max_lengthscale = 1e3;
    double min_signal_variance = 1e-6;
    double max_signal_variance = 1e4;
    double min_noise_variance = 1e-8;
    double max_noise_variance = 1e2;
};

struct FitResult {
    std::vector<KernelParams> params;
    double initial_lml = 0.0;
    double final_lml = 0.0;
    /// Set when no start improved on the initial hyperparameters.
    bool warning = false;
};

namespace detail {

inline Eigen::VectorXd clamp_packed(Eigen::VectorXd v, const FitOptions& o)
{
    const Eigen::Index p = v.size() - 2;
    for (Eigen::Index i = 0; i < p; ++i)
        v[i] = std::clamp(v[i], std::log(o.min_lengthscale), std::log(o.max_lengthscale));
    v[p] = std::clamp(v[p], std::log(o.min_signal_variance), std::log(o.max_signal_variance));
    v[p + 1] = std::clamp(v[p + 1], std::log(o.min_noise_variance), std::log(o.max_noise_variance));
    return v;
}

/// Projected gradient ascent with an adaptive step and backtracking.
template <typename Objective>
std::pair<Eigen::VectorXd, double> ascend(Objective&& f, Eigen::VectorXd theta, int max_iters, const FitOptions& o)
{
    Eigen::VectorXd g;
    double value = f(theta, &g);
    double step = 0.5;
    for (int it = 0; it < max_iters; ++it) {
        const double gnorm = g.norm();
        if (!(gnorm > 1e-10) || !std::isfinite(gnorm))
            break;
        bool accepted = false;
        while (step > 1e-8) {
            const Eigen::VectorXd trial = clamp_packed(theta + (step / gnorm) * g, o);
            Eigen::VectorXd g_trial;
            double v_trial = -std::numeric_limits<double>::infinity();
            try {
                v_trial = f(trial, &g_trial);
            }
            catch (const NumericalError&) {
            }
            if (std::isfinite(v_trial) && v_trial > value) {
                const double gain = v_trial - value;
                theta = trial;
                value = v_trial;
                g = g_trial;
                step = std::min(2.0 * step, 2.0);
                accepted = gain > 1e-9;
                break;
            }
            step *= 0.5;
        }
        if (!accepted)
            break;
    }
    return {theta, value};
}

} // namespace detail

/// Multi-start maximization of the log marginal likelihood, independently per
/// output dimension. The first start is the current hyperparameters.
inline FitResult fit_hyperparams(const GPModel& model, const FitOptions& opt, Rng& rng)
{
    FitResult result;
    result.params = model.params();
    if (model.size() < 2 || opt.max_iters <= 0) {
        result.warning = opt.max_iters > 0;
        if (!model.empty())
            result.initial_lml = result.final_lml = model.log_marginal_likelihood();
        return result;
    }
    std::normal_distribution<double> normal(0.0, opt.restart_spread);
    bool any_improved = false;
    for (int j = 0; j < model.state_dim(); ++j) {
        const KernelParams init = model.params()[j];
        auto objective = [&](const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
            return model.output_lml(j, KernelParams::unpacked(theta), grad);
        };
        const double init_value = objective(init.packed(), nullptr);
        result.initial_lml += init_value;
        Eigen::VectorXd best = init.packed();
        double best_value = init_value;
        for (int start = 0; start <= opt.restarts; ++start) {
            Eigen::VectorXd theta0 = init.packed();
            if (start > 0) {
                for (Eigen::Index i = 0; i < theta0.size(); ++i)
                    theta0[i] += normal(rng);
            }
            theta0 = detail::clamp_packed(theta0, opt);
            try {
                auto [theta, value] = detail::ascend(objective, theta0, opt.max_iters, opt);
                if (value > best_value) {
                    best = theta;
                    best_value = value;
                }
            }
            catch (const NumericalError&) {
            }
        }
        if (best_value > init_value) {
            any_improved = true;
            result.params[j] = KernelParams::unpacked(best);
        }
        result.final_lml += best_value;
    }
    result.warning = !any_improved;
    return result;
}

/// Trajectory-consistent posterior sampling: each drawn transition is added to
/// the model before the next draw, so the path is a sample of one function.
/// The input model is left untouched.
template <typename Policy>
std::vector<TransitionTuple> sample_rollout(const GPModel& model, const StateVector& x0, Policy&& policy, int horizon, Rng& rng)
{
    if (horizon < 1)
        throw std::invalid_argument("sample_rollout: horizon must be >= 1");
    std::vector<TransitionTuple> trajectory;
    trajectory.reserve(horizon);
    GPModel current = model;
    StateVector x = x0;
    for (int k = 0; k < horizon; ++k) {
        const ControlVector u = policy(x);
        const GaussianBelief b = current.posterior(x, u);
        StateVector next = b.mean + (b.variance.array().sqrt() * standard_normal(model.state_dim(), rng).array()).matrix();
        wrap_state(model.periodic_state(), next);
        TransitionTuple t{x, u, next, 1, k};
        if (k + 1 < horizon)
            current = current.condition(std::span<const TransitionTuple>(&t, 1));
        trajectory.push_back(std::move(t));
        x = std::move(next);
    }
    return trajectory;
}

} // namespace smtip
