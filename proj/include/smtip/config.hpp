#pragma once

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <smtip/experiment.hpp>

namespace smtip {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace config {

struct Value;
using Array = std::vector<Value>;

struct Value {
    std::variant<bool, std::int64_t, double, std::string, Array> data;

    bool is_number() const { return std::holds_alternative<std::int64_t>(data) || std::holds_alternative<double>(data); }
};

using Section = std::map<std::string, Value>;
using Document = std::map<std::string, Section>;

/// Parser for the subset of TOML the experiment files use: [section] headers,
/// `key = value` lines, # comments, booleans, integers, floats, double-quoted
/// strings and (nested) arrays. Arrays may span lines.
class Parser {
public:
    explicit Parser(std::string_view text) : _text(text) {}

    Document parse()
    {
        Document doc;
        std::string section;
        while (true) {
            skip_blank_lines();
            if (eof())
                break;
            if (peek() == '[') {
                ++_pos;
                section = bare_key();
                skip_inline_ws();
                expect(']');
                if (doc.count(section))
                    fail("duplicate section [" + section + "]");
                doc[section];
                end_of_line();
                continue;
            }
            if (section.empty())
                fail("key outside of any section");
            const std::string key = bare_key();
            skip_inline_ws();
            expect('=');
            skip_inline_ws();
            Value v = value();
            if (doc[section].count(key))
                fail("duplicate key '" + key + "'");
            doc[section][key] = std::move(v);
            end_of_line();
        }
        return doc;
    }

private:
    bool eof() const { return _pos >= _text.size(); }
    char peek() const { return eof() ? '\0' : _text[_pos]; }

    [[noreturn]] void fail(const std::string& msg) const
    {
        std::size_t line = 1;
        for (std::size_t i = 0; i < _pos && i < _text.size(); ++i)
            line += _text[i] == '\n';
        throw ConfigError("config line " + std::to_string(line) + ": " + msg);
    }

    void expect(char c)
    {
        if (peek() != c)
            fail(std::string("expected '") + c + "'");
        ++_pos;
    }

    void skip_inline_ws()
    {
        while (!eof() && (peek() == ' ' || peek() == '\t'))
            ++_pos;
    }

    void skip_comment()
    {
        if (peek() == '#')
            while (!eof() && peek() != '\n')
                ++_pos;
    }

    /// Whitespace, newlines and comments (inside arrays and between lines).
    void skip_all_ws()
    {
        while (!eof()) {
            const char c = peek();
            if (c == ' ' || c == '\t' || c == '\r' || c == '\n')
                ++_pos;
            else if (c == '#')
                skip_comment();
            else
                break;
        }
    }

    void skip_blank_lines() { skip_all_ws(); }

    void end_of_line()
    {
        skip_inline_ws();
        skip_comment();
        if (peek() == '\r')
            ++_pos;
        if (!eof() && peek() != '\n')
            fail("unexpected trailing characters");
    }

    std::string bare_key()
    {
        skip_inline_ws();
        const std::size_t start = _pos;
        while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-'))
            ++_pos;
        if (_pos == start)
            fail("expected a key");
        return std::string(_text.substr(start, _pos - start));
    }

    Value value()
    {
        const char c = peek();
        if (c == '"')
            return {string()};
        if (c == '[')
            return {array()};
        const std::size_t start = _pos;
        while (!eof() && peek() != ',' && peek() != ']' && peek() != '#' && peek() != '\n' && peek() != '\r' && peek() != ' ' &&
               peek() != '\t')
            ++_pos;
        const std::string_view tok = _text.substr(start, _pos - start);
        if (tok.empty())
            fail("expected a value");
        if (tok == "true")
            return {true};
        if (tok == "false")
            return {false};
        if (tok.find_first_of(".eEin") == std::string_view::npos) {
            std::int64_t i = 0;
            const char* b = tok.data() + (tok.front() == '+' ? 1 : 0);
            auto [p, ec] = std::from_chars(b, tok.data() + tok.size(), i);
            if (ec == std::errc() && p == tok.data() + tok.size())
                return {i};
        }
        else {
            double d = 0.0;
            const char* b = tok.data() + (tok.front() == '+' ? 1 : 0);
            auto [p, ec] = std::from_chars(b, tok.data() + tok.size(), d);
            if (ec == std::errc() && p == tok.data() + tok.size())
                return {d};
        }
        fail("invalid value '" + std::string(tok) + "'");
    }

    std::string string()
    {
        expect('"');
        std::string out;
        while (!eof() && peek() != '"') {
            char c = peek();
            if (c == '\n')
                fail("unterminated string");
            if (c == '\\') {
                ++_pos;
                c = peek();
                switch (c) {
                case 'n': c = '\n'; break;
                case 't': c = '\t'; break;
                case '"':
                case '\\': break;
                default: fail("unsupported escape");
                }
            }
            out.push_back(c);
            ++_pos;
        }
        expect('"');
        return out;
    }

    Array array()
    {
        expect('[');
        Array out;
        skip_all_ws();
        while (peek() != ']') {
            out.push_back(value());
            skip_all_ws();
            if (peek() == ',') {
                ++_pos;
                skip_all_ws();
            }
            else if (peek() != ']') {
                fail("expected ',' or ']' in array");
            }
        }
        expect(']');
        return out;
    }

    std::string_view _text;
    std::size_t _pos = 0;
};

inline Document parse(std::string_view text) { return Parser(text).parse(); }

} // namespace config

namespace detail {

/// Reads typed values out of one section and remembers which keys were used,
/// so that unknown keys can be rejected.
class SectionReader {
public:
    SectionReader(const config::Document& doc, const std::string& name) : _name(name)
    {
        if (auto it = doc.find(name); it != doc.end())
            _section = &it->second;
    }

    template <typename T>
    void read(const std::string& key, T& target)
    {
        const config::Value* v = find(key);
        if (!v)
            return;
        assign(key, *v, target);
    }

    void check_unknown() const
    {
        if (!_section)
            return;
        for (const auto& [k, v] : *_section)
            if (!_used.count(k))
                throw ConfigError("unknown key '" + k + "' in [" + _name + "]");
    }

private:
    const config::Value* find(const std::string& key)
    {
        _used.insert(key);
        if (!_section)
            return nullptr;
        auto it = _section->find(key);
        return it == _section->end() ? nullptr : &it->second;
    }

    [[noreturn]] void type_error(const std::string& key, const char* want) const
    {
        throw ConfigError("[" + _name + "] " + key + ": expected " + want);
    }

    double number(const std::string& key, const config::Value& v) const
    {
        if (auto* i = std::get_if<std::int64_t>(&v.data))
            return static_cast<double>(*i);
        if (auto* d = std::get_if<double>(&v.data))
            return *d;
        type_error(key, "a number");
    }

    void assign(const std::string& key, const config::Value& v, double& t) const { t = number(key, v); }

    void assign(const std::string& key, const config::Value& v, int& t) const
    {
        auto* i = std::get_if<std::int64_t>(&v.data);
        if (!i)
            type_error(key, "an integer");
        t = static_cast<int>(*i);
    }

    void assign(const std::string& key, const config::Value& v, std::uint64_t& t) const
    {
        auto* i = std::get_if<std::int64_t>(&v.data);
        if (!i || *i < 0)
            type_error(key, "a non-negative integer");
        t = static_cast<std::uint64_t>(*i);
    }

    void assign(const std::string& key, const config::Value& v, bool& t) const
    {
        auto* b = std::get_if<bool>(&v.data);
        if (!b)
            type_error(key, "a boolean");
        t = *b;
    }

    void assign(const std::string& key, const config::Value& v, std::string& t) const
    {
        auto* s = std::get_if<std::string>(&v.data);
        if (!s)
            type_error(key, "a string");
        t = *s;
    }

    void assign(const std::string& key, const config::Value& v, Eigen::VectorXd& t) const
    {
        auto* a = std::get_if<config::Array>(&v.data);
        if (!a)
            type_error(key, "an array of numbers");
        t.resize(static_cast<Eigen::Index>(a->size()));
        for (std::size_t i = 0; i < a->size(); ++i)
            t[static_cast<Eigen::Index>(i)] = number(key, (*a)[i]);
    }

    void assign(const std::string& key, const config::Value& v, std::vector<Eigen::VectorXd>& t) const
    {
        auto* a = std::get_if<config::Array>(&v.data);
        if (!a)
            type_error(key, "an array of arrays");
        t.clear();
        for (const auto& row : *a) {
            Eigen::VectorXd r;
            assign(key, row, r);
            t.push_back(std::move(r));
        }
    }

    void assign(const std::string& key, const config::Value& v, std::vector<std::int64_t>& t) const
    {
        auto* a = std::get_if<config::Array>(&v.data);
        if (!a)
            type_error(key, "an array of integers");
        t.clear();
        for (const auto& e : *a) {
            auto* i = std::get_if<std::int64_t>(&e.data);
            if (!i)
                type_error(key, "an array of integers");
            t.push_back(*i);
        }
    }

    std::string _name;
    const config::Section* _section = nullptr;
    std::set<std::string> _used;
};

inline void read_planner(SectionReader& r, PlannerConfig& p, const std::string& prefix = "")
{
    r.read(prefix + "horizon", p.horizon);
    r.read(prefix + "population", p.population);
    r.read(prefix + "elites", p.elites);
    r.read(prefix + "cem_iters", p.cem_iters);
}

} // namespace detail

inline const std::set<std::string>& config_sections()
{
    static const std::set<std::string> s{"system", "mode", "planner", "gp", "acquisition", "experiment"};
    return s;
}

/// Resolves a parsed document against the defaults of its system and
/// validates the result. Unknown sections or keys are errors.
inline ExperimentConfig config_from_document(const config::Document& doc)
{
    for (const auto& [name, sec] : doc)
        if (!config_sections().count(name))
            throw ConfigError("unknown section [" + name + "]");

    std::string system_name = "lorenz";
    if (auto it = doc.find("system"); it != doc.end())
        if (auto k = it->second.find("name"); k != it->second.end()) {
            auto* s = std::get_if<std::string>(&k->second.data);
            if (!s)
                throw ConfigError("[system] name: expected a string");
            system_name = *s;
        }
    SystemKind kind;
    try {
        kind = system_kind_from_string(system_name);
    }
    catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    ExperimentConfig c = default_config(kind);

    {
        detail::SectionReader r(doc, "system");
        std::string name;
        r.read("name", name);
        r.read("dt", c.system.dt);
        r.read("sigma_e", c.system.sigma_e);
        r.read("sigma_process", c.system.sigma_process);
        r.read("x_e", c.system.x_e);
        r.read("u_lo", c.system.u_lo);
        r.read("u_hi", c.system.u_hi);
        r.read("x_box_lo", c.system.x_box_lo);
        r.read("x_box_hi", c.system.x_box_hi);
        if (auto* p = std::get_if<LorenzParams>(&c.system.drift_params)) {
            r.read("sigma", p->sigma);
            r.read("rho", p->rho);
            r.read("beta", p->beta);
        }
        else {
            auto& q = std::get<PendulumParams>(c.system.drift_params);
            r.read("mass", q.mass);
            r.read("length", q.length);
            r.read("gravity", q.gravity);
        }
        r.check_unknown();
    }
    {
        detail::SectionReader r(doc, "mode");
        std::string name(to_string(c.mode));
        r.read("name", name);
        r.read("t_max", c.t_max);
        r.check_unknown();
        try {
            c.mode = acquisition_mode_from_string(name);
        }
        catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    {
        detail::SectionReader r(doc, "planner");
        detail::read_planner(r, c.planner);
        r.read("noise_beta", c.planner.noise_beta);
        r.read("init_std", c.planner.init_std);
        r.read("decay", c.planner.decay);
        r.read("momentum", c.planner.momentum);
        r.read("elite_keep_fraction", c.planner.elite_keep_fraction);
        r.read("mc_rollouts_per_sequence", c.planner.mc_rollouts_per_sequence);
        r.check_unknown();
    }
    {
        detail::SectionReader r(doc, "gp");
        r.read("lengthscales", c.gp.lengthscales);
        r.read("signal_variance", c.gp.signal_variance);
        r.read("noise_variance", c.gp.noise_variance);
        r.read("refit_every", c.gp.refit_every);
        r.read("restarts", c.gp.fit.restarts);
        r.read("max_iters", c.gp.fit.max_iters);
        r.read("restart_spread", c.gp.fit.restart_spread);
        r.read("min_lengthscale", c.gp.fit.min_lengthscale);
        r.read("max_lengthscale", c.gp.fit.max_lengthscale);
        r.read("min_signal_variance", c.gp.fit.min_signal_variance);
        r.read("max_signal_variance", c.gp.fit.max_signal_variance);
        r.read("min_noise_variance", c.gp.fit.min_noise_variance);
        r.read("max_noise_variance", c.gp.fit.max_noise_variance);
        r.check_unknown();
    }
    {
        // the trajectory planner inherits every [planner] setting it does not override
        const PlannerConfig base = c.acquisition_planner;
        c.acquisition_planner = c.planner;
        c.acquisition_planner.population = base.population;
        c.acquisition_planner.elites = base.elites;
        c.acquisition_planner.cem_iters = base.cem_iters;
        detail::SectionReader r(doc, "acquisition");
        r.read("m", c.m);
        r.read("n_candidates", c.n_candidates);
        std::string start = c.trajectories_from_current ? "current" : "initial";
        r.read("trajectory_start", start);
        detail::read_planner(r, c.acquisition_planner, "planner_");
        r.check_unknown();
        if (start != "initial" && start != "current")
            throw ConfigError("[acquisition] trajectory_start must be \"initial\" or \"current\"");
        c.trajectories_from_current = start == "current";
    }
    {
        detail::SectionReader r(doc, "experiment");
        r.read("n_max", c.n_max);
        r.read("eval_every", c.eval_every);
        r.read("eval_horizon", c.eval_horizon);
        r.read("eval_starts", c.eval_starts);
        r.read("seeds", c.seeds);
        r.read("master_seed", c.master_seed);
        r.read("output_dir", c.output_dir);
        r.read("record_wall_time", c.record_wall_time);
        r.check_unknown();
    }
    try {
        c.validate();
    }
    catch (const ConfigError&) {
        throw;
    }
    catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

inline ExperimentConfig parse_config(std::string_view text) { return config_from_document(config::parse(text)); }

inline ExperimentConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

namespace detail {

inline std::string toml_vector(const Eigen::VectorXd& v)
{
    std::string s = "[";
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (i)
            s += ", ";
        std::string d = format_double(v[i]);
        // keep floats visibly floats so integers stay integers on re-read
        if (d.find_first_of(".eEin") == std::string::npos)
            d += ".0";
        s += d;
    }
    return s + "]";
}

inline std::string toml_double(double v)
{
    std::string d = format_double(v);
    if (d.find_first_of(".eEin") == std::string::npos)
        d += ".0";
    return d;
}

inline std::string toml_string(const std::string& s)
{
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\')
            out.push_back('\\');
        if (c == '\n') {
            out += "\\n";
            continue;
        }
        out.push_back(c);
    }
    return out + "\"";
}

} // namespace detail

/// Fully resolved config as a config file; re-parsing it yields the same
/// settings.
inline std::string config_to_toml(const ExperimentConfig& c)
{
    using detail::toml_double;
    using detail::toml_vector;
    std::ostringstream o;
    o << "# Resolved experiment configuration. Every constant the method leaves open\n"
         "# is pinned here.\n\n";
    o << "[system]\n";
    o << "name = \"" << to_string(c.system.kind) << "\"\n";
    o << "dt = " << toml_double(c.system.dt) << "  # seconds per RK4 step\n";
    o << "sigma_e = " << toml_double(c.system.sigma_e) << "  # initial-state spread around x_e\n";
    o << "sigma_process = " << toml_double(c.system.sigma_process) << "  # additive Gaussian noise std per step\n";
    o << "x_e = " << toml_vector(c.system.x_e) << "  # fixed point\n";
    o << "u_lo = " << toml_vector(c.system.u_lo) << "\n";
    o << "u_hi = " << toml_vector(c.system.u_hi) << "\n";
    o << "x_box_lo = " << toml_vector(c.system.x_box_lo) << "  # state box for barl queries\n";
    o << "x_box_hi = " << toml_vector(c.system.x_box_hi) << "\n";
    if (auto* p = std::get_if<LorenzParams>(&c.system.drift_params)) {
        o << "sigma = " << toml_double(p->sigma) << "\n";
        o << "rho = " << toml_double(p->rho) << "\n";
        o << "beta = " << toml_double(p->beta) << "\n";
    }
    else {
        const auto& q = std::get<PendulumParams>(c.system.drift_params);
        o << "mass = " << toml_double(q.mass) << "\n";
        o << "length = " << toml_double(q.length) << "\n";
        o << "gravity = " << toml_double(q.gravity) << "\n";
    }
    o << "\n[mode]\n";
    o << "name = \"" << to_string(c.mode) << "\"  # barl | tip | smtip\n";
    o << "t_max = " << c.t_max << "  # inter-decision times drawn from 1..t_max\n";
    o << "\n[planner]  # evaluation policy (iCEM on the GP mean)\n";
    o << "horizon = " << c.planner.horizon << "\n";
    o << "population = " << c.planner.population << "\n";
    o << "elites = " << c.planner.elites << "\n";
    o << "cem_iters = " << c.planner.cem_iters << "\n";
    o << "noise_beta = " << toml_double(c.planner.noise_beta) << "  # colored-noise exponent\n";
    o << "init_std = " << toml_vector(c.planner.init_std) << "  # empty: quarter of the control range\n";
    o << "decay = " << toml_double(c.planner.decay) << "\n";
    o << "momentum = " << toml_double(c.planner.momentum) << "\n";
    o << "elite_keep_fraction = " << toml_double(c.planner.elite_keep_fraction) << "\n";
    o << "mc_rollouts_per_sequence = " << c.planner.mc_rollouts_per_sequence << "  # used only on stochastic models\n";
    o << "\n[gp]\n";
    o << "lengthscales = " << toml_vector(c.gp.lengthscales) << "  # initial, one per (state, control) input\n";
    o << "signal_variance = " << toml_double(c.gp.signal_variance) << "\n";
    o << "noise_variance = " << toml_double(c.gp.noise_variance) << "\n";
    o << "refit_every = " << c.gp.refit_every << "  # refit hyperparameters every this many observations\n";
    o << "restarts = " << c.gp.fit.restarts << "\n";
    o << "max_iters = " << c.gp.fit.max_iters << "\n";
    o << "restart_spread = " << toml_double(c.gp.fit.restart_spread) << "\n";
    o << "min_lengthscale = " << toml_double(c.gp.fit.min_lengthscale) << "\n";
    o << "max_lengthscale = " << toml_double(c.gp.fit.max_lengthscale) << "\n";
    o << "min_signal_variance = " << toml_double(c.gp.fit.min_signal_variance) << "\n";
    o << "max_signal_variance = " << toml_double(c.gp.fit.max_signal_variance) << "\n";
    o << "min_noise_variance = " << toml_double(c.gp.fit.min_noise_variance) << "\n";
    o << "max_noise_variance = " << toml_double(c.gp.fit.max_noise_variance) << "\n";
    o << "\n[acquisition]\n";
    o << "m = " << c.m << "  # sampled optimal trajectories per iteration\n";
    o << "n_candidates = " << c.n_candidates << "\n";
    o << "trajectory_start = \"" << (c.trajectories_from_current ? "current" : "initial") << "\"\n";
    o << "planner_horizon = " << c.acquisition_planner.horizon << "  # also the sampled trajectory length\n";
    o << "planner_population = " << c.acquisition_planner.population << "\n";
    o << "planner_elites = " << c.acquisition_planner.elites << "\n";
    o << "planner_cem_iters = " << c.acquisition_planner.cem_iters << "\n";
    o << "\n[experiment]\n";
    o << "n_max = " << c.n_max << "  # sampling budget\n";
    o << "eval_every = " << c.eval_every << "\n";
    o << "eval_horizon = " << c.eval_horizon << "\n";
    o << "eval_starts = [\n";
    for (const auto& s : c.eval_starts)
        o << "  " << toml_vector(s) << ",\n";
    o << "]\n";
    o << "seeds = [";
    for (std::size_t i = 0; i < c.seeds.size(); ++i)
        o << (i ? ", " : "") << c.seeds[i];
    o << "]\n";
    o << "master_seed = " << c.master_seed << "\n";
    o << "output_dir = " << detail::toml_string(c.output_dir) << "\n";
    o << "record_wall_time = " << (c.record_wall_time ? "true" : "false") << "  # wall_ms breaks byte-identical reruns\n";
    return o.str();
}

} // namespace smtip
