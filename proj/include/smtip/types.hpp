#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace smtip {

using StateVector = Eigen::VectorXd;
using ControlVector = Eigen::VectorXd;

/// Per-dimension flag marking angular coordinates that live on the circle.
using DimMask = std::vector<bool>;

using Rng = std::mt19937_64;

/// Derives an independent random stream from a tuple of integers. The same
/// tuple always yields the same stream, regardless of which thread asks.
inline Rng derive_stream(std::initializer_list<std::uint64_t> keys)
{
    std::vector<std::uint32_t> words;
    words.reserve(2 * keys.size());
    for (auto k : keys) {
        words.push_back(static_cast<std::uint32_t>(k & 0xffffffffu));
        words.push_back(static_cast<std::uint32_t>(k >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a)
{
    if (a > -std::numbers::pi && a <= std::numbers::pi)
        return a;
    constexpr double two_pi = 2.0 * std::numbers::pi;
    double r = std::fmod(a + std::numbers::pi, two_pi);
    if (r < 0.0)
        r += two_pi;
    r -= std::numbers::pi;
    if (r <= -std::numbers::pi)
        r += two_pi;
    return r;
}

/// Wraps periodic coordinates in place.
inline void wrap_state(const DimMask& periodic, StateVector& x)
{
    for (Eigen::Index i = 0; i < x.size(); ++i)
        if (i < static_cast<Eigen::Index>(periodic.size()) && periodic[i])
            x[i] = wrap_angle(x[i]);
}

inline Eigen::VectorXd standard_normal(Eigen::Index n, Rng& rng)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i)
        z[i] = normal(rng);
    return z;
}

/// One observed transition of the true system: the dataset atom.
struct TransitionTuple {
    StateVector x;
    ControlVector u;
    StateVector x_next;
    int tau = 1;
    long epoch = 0;
};

/// Raised when integration or prediction produces non-finite values.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, Eigen::VectorXd state = {})
        : std::runtime_error(what), _state(std::move(state)) {}

    const Eigen::VectorXd& state() const { return _state; }

private:
    Eigen::VectorXd _state;
};

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

} // namespace smtip
