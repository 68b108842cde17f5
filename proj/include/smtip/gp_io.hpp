#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include <smtip/gp.hpp>

namespace smtip {

inline constexpr int checkpoint_format_version = 1;

namespace detail {

inline nlohmann::json to_json_vector(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Eigen::VectorXd from_json_vector(const nlohmann::json& j)
{
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

} // namespace detail

/// Checkpoint layout: format version, dimensions, periodic state mask,
/// log-hyperparameters per output dim and the raw transition rows. Doubles are
/// written in shortest round-trip form, so reloading reproduces every bit.
inline nlohmann::json model_to_json(const GPModel& m)
{
    nlohmann::json j;
    j["format_version"] = checkpoint_format_version;
    j["state_dim"] = m.state_dim();
    j["control_dim"] = m.control_dim();
    j["periodic_state"] = std::vector<bool>(m.periodic_state().begin(), m.periodic_state().end());
    auto& params = j["params"] = nlohmann::json::array();
    for (const auto& p : m.params())
        params.push_back({{"log_lengthscales", detail::to_json_vector(p.log_lengthscales)},
            {"log_signal_variance", p.log_signal_variance},
            {"log_noise_variance", p.log_noise_variance}});
    auto& rows = j["dataset"] = nlohmann::json::array();
    for (const auto& t : m.dataset())
        rows.push_back({{"x", detail::to_json_vector(t.x)},
            {"u", detail::to_json_vector(t.u)},
            {"x_next", detail::to_json_vector(t.x_next)},
            {"tau", t.tau},
            {"epoch", t.epoch}});
    return j;
}

inline GPModel model_from_json(const nlohmann::json& j)
{
    if (j.at("format_version").get<int>() != checkpoint_format_version)
        throw std::invalid_argument("unsupported checkpoint format version");
    const int sd = j.at("state_dim").get<int>();
    const int cd = j.at("control_dim").get<int>();
    const auto mask = j.at("periodic_state").get<std::vector<bool>>();
    std::vector<KernelParams> params;
    for (const auto& p : j.at("params"))
        params.push_back({detail::from_json_vector(p.at("log_lengthscales")), p.at("log_signal_variance").get<double>(),
            p.at("log_noise_variance").get<double>()});
    std::vector<TransitionTuple> data;
    for (const auto& r : j.at("dataset"))
        data.push_back({detail::from_json_vector(r.at("x")), detail::from_json_vector(r.at("u")), detail::from_json_vector(r.at("x_next")),
            r.at("tau").get<int>(), r.at("epoch").get<long>()});
    return GPModel(sd, cd, std::move(params), DimMask(mask.begin(), mask.end())).condition(data);
}

inline void save_model(const GPModel& m, const std::string& path)
{
    std::ofstream out(path);
    if (!out)
        throw std::runtime_error("cannot write checkpoint '" + path + "'");
    out << model_to_json(m).dump(1) << '\n';
}

inline GPModel load_model(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw std::invalid_argument("cannot open checkpoint '" + path + "'");
    return model_from_json(nlohmann::json::parse(in));
}

} // namespace smtip
