#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <smtip/types.hpp>

namespace smtip {

enum class SystemKind { lorenz, pendulum };

inline std::string_view to_string(SystemKind k) { return k == SystemKind::lorenz ? "lorenz" : "pendulum"; }

inline SystemKind system_kind_from_string(std::string_view s)
{
    if (s == "lorenz")
        return SystemKind::lorenz;
    if (s == "pendulum")
        return SystemKind::pendulum;
    throw std::invalid_argument("unknown system '" + std::string(s) + "'");
}

struct LorenzParams {
    double sigma = 10.0;
    double rho = 28.0;
    double beta = 8.0 / 3.0;
};

/// Angle measured from upright: theta = 0 is the unstable equilibrium.
struct PendulumParams {
    double mass = 1.0;
    double length = 1.0;
    double gravity = 10.0;
};

/// A controlled stochastic discrete-time system obtained by RK4 integration of
/// a continuous drift followed by additive Gaussian process noise.
struct SystemSpec {
    SystemKind kind = SystemKind::lorenz;
    int dim_state = 3;
    int dim_control = 3;
    double dt = 0.01;
    std::variant<LorenzParams, PendulumParams> drift_params = LorenzParams{};
    StateVector x_e;
    double sigma_e = 1.0;
    double sigma_process = 0.01;
    ControlVector u_lo;
    ControlVector u_hi;
    /// Box used by global-support acquisition to draw query states.
    StateVector x_box_lo;
    StateVector x_box_hi;
    DimMask periodic_state;
};

inline SystemSpec make_lorenz(double u_max = 10.0)
{
    SystemSpec s;
    s.kind = SystemKind::lorenz;
    s.dim_state = 3;
    s.dim_control = 3;
    s.dt = 0.01;
    LorenzParams p;
    s.drift_params = p;
    // Non-trivial equilibrium C+ = (sqrt(beta(rho-1)), sqrt(beta(rho-1)), rho-1).
    const double c = std::sqrt(p.beta * (p.rho - 1.0));
    s.x_e = StateVector{{c, c, p.rho - 1.0}};
    s.sigma_e = 1.0;
    s.sigma_process = 0.01;
    s.u_lo = ControlVector::Constant(3, -u_max);
    s.u_hi = ControlVector::Constant(3, u_max);
    s.x_box_lo = StateVector{{-20.0, -20.0, 0.0}};
    s.x_box_hi = StateVector{{20.0, 20.0, 50.0}};
    s.periodic_state = {false, false, false};
    return s;
}

inline SystemSpec make_pendulum(double torque_max = 2.0)
{
    SystemSpec s;
    s.kind = SystemKind::pendulum;
    s.dim_state = 2;
    s.dim_control = 1;
    s.dt = 0.05;
    s.drift_params = PendulumParams{};
    s.x_e = StateVector{{std::numbers::pi, 0.0}};
    s.sigma_e = 0.05;
    s.sigma_process = 0.01;
    s.u_lo = ControlVector::Constant(1, -torque_max);
    s.u_hi = ControlVector::Constant(1, torque_max);
    s.x_box_lo = StateVector{{-std::numbers::pi, -8.0}};
    s.x_box_hi = StateVector{{std::numbers::pi, 8.0}};
    s.periodic_state = {true, false};
    return s;
}

inline SystemSpec make_system(SystemKind kind) { return kind == SystemKind::lorenz ? make_lorenz() : make_pendulum(); }

inline void validate(const SystemSpec& s)
{
    if (!(s.dt > 0.0))
        throw std::invalid_argument("system.dt must be positive");
    if (!(s.sigma_e >= 0.0) || !(s.sigma_process >= 0.0))
        throw std::invalid_argument("system noise levels must be non-negative");
    if (s.x_e.size() != s.dim_state || s.u_lo.size() != s.dim_control || s.u_hi.size() != s.dim_control)
        throw std::invalid_argument("system dimensions are inconsistent");
    if (s.x_box_lo.size() != s.dim_state || s.x_box_hi.size() != s.dim_state)
        throw std::invalid_argument("system state box has wrong dimension");
    if (static_cast<int>(s.periodic_state.size()) != s.dim_state)
        throw std::invalid_argument("system periodic mask has wrong dimension");
    if ((s.u_hi.array() < s.u_lo.array()).any())
        throw std::invalid_argument("control bounds are inverted");
}

/// Saturates every component to the control box.
inline ControlVector clip_control(const SystemSpec& s, const ControlVector& u)
{
    return u.cwiseMax(s.u_lo).cwiseMin(s.u_hi);
}

inline StateVector drift(const SystemSpec& s, const StateVector& x, const ControlVector& u)
{
    if (x.size() != s.dim_state || u.size() != s.dim_control)
        throw DimensionError("drift: state/control dimension mismatch");
    StateVector dx(s.dim_state);
    if (const auto* p = std::get_if<LorenzParams>(&s.drift_params)) {
        dx[0] = p->sigma * (x[1] - x[0]) + u[0];
        dx[1] = x[0] * (p->rho - x[2]) - x[1] + u[1];
        dx[2] = x[0] * x[1] - p->beta * x[2] + u[2];
    }
    else {
        const auto& q = std::get<PendulumParams>(s.drift_params);
        dx[0] = x[1];
        dx[1] = 3.0 * q.gravity / (2.0 * q.length) * std::sin(x[0]) + 3.0 / (q.mass * q.length * q.length) * u[0];
    }
    return dx;
}

/// Noise-free RK4 step over one dt, controls saturated first.
inline StateVector integrate(const SystemSpec& s, const StateVector& x, const ControlVector& u_raw)
{
    const ControlVector u = clip_control(s, u_raw);
    const double h = s.dt;
    const StateVector k1 = drift(s, x, u);
    const StateVector k2 = drift(s, x + 0.5 * h * k1, u);
    const StateVector k3 = drift(s, x + 0.5 * h * k2, u);
    const StateVector k4 = drift(s, x + h * k3, u);
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

inline StateVector step(const SystemSpec& s, const StateVector& x, const ControlVector& u, Rng& rng)
{
    StateVector next = integrate(s, x, u);
    if (s.sigma_process > 0.0)
        next += s.sigma_process * standard_normal(s.dim_state, rng);
    if (!next.allFinite())
        throw NumericalError("step produced a non-finite state", next);
    wrap_state(s.periodic_state, next);
    return next;
}

/// Holds u constant for tau steps; returns tau + 1 states starting with x.
inline std::vector<StateVector> rollout_held(const SystemSpec& s, const StateVector& x, const ControlVector& u, int tau, Rng& rng)
{
    if (tau < 1)
        throw std::invalid_argument("rollout_held: tau must be >= 1");
    std::vector<StateVector> path;
    path.reserve(tau + 1);
    path.push_back(x);
    for (int i = 0; i < tau; ++i)
        path.push_back(step(s, path.back(), u, rng));
    return path;
}

inline StateVector sample_initial(const SystemSpec& s, Rng& rng)
{
    StateVector x = s.x_e + s.sigma_e * standard_normal(s.dim_state, rng);
    wrap_state(s.periodic_state, x);
    return x;
}

inline double cost(const SystemSpec& s, const StateVector& x, const ControlVector& u)
{
    if (x.size() != s.dim_state || u.size() != s.dim_control)
        throw DimensionError("cost: state/control dimension mismatch");
    if (s.kind == SystemKind::lorenz)
        return x.squaredNorm();
    const double th = wrap_angle(x[0]);
    return th * th + 0.1 * x[1] * x[1] + 0.001 * u[0] * u[0];
}

} // namespace smtip
