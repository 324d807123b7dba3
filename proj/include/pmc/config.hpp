#pragma once
// Run configuration: one JSON document with the sections model, grids,
// solver, experiment and output. Unknown keys are rejected; every optional
// key has a default (docs/config_schema.md lists them).

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmc/hjb.hpp"
#include "pmc/model_io.hpp"
#include "pmc/util.hpp"

namespace pmc {

struct ProbePoint {
    double t = 0.0;
    Vec x;
};

struct DeviationSpec {
    int agent = 0;
    Vec action;
};

struct RunConfig {
    ModelSpec model;

    // grids
    std::vector<int> nodes;        // per state dimension
    Vec lo, hi;                    // space box, defaults to the model's state box
    int time_steps = 100;
    int sim_steps = 50;

    // solver
    TimeScheme scheme = TimeScheme::imex;
    double cfl = 0.45;
    HamiltonianOptions ham{};
    int basis_degree = 2;
    double ridge = 1e-8;
    int policy_probes = 32;
    bool allow_value_point_near_face = false;
    bool allow_coarse_jumps = false;
    bool boundary_check = false;
    int workers = 1;

    // experiment
    std::string command;
    int n_paths = 10000;
    std::uint64_t seed = 1;
    std::vector<ProbePoint> probes;
    bool crosscheck = false;
    std::string policy = "equilibrium";  // simulate: equilibrium | base | constant
    Vec action;                          // simulate with policy = constant
    bool reweight = false;
    bool default_deviations = true;
    std::vector<DeviationSpec> deviations;
    int deviation_points = 9;
    double z_scale = 1.0;
    double noise_floor = 1e-9;
    int repeats = 1;

    // output
    std::string directory = "out";
    bool csv = true;
    bool json_out = true;
    int max_csv_paths = 1000;
    std::string cache;

    SpaceGrid space_grid() const { return SpaceGrid(lo, hi, nodes); }
    TimeGrid solve_grid() const { return TimeGrid(model.horizon, time_steps); }
    TimeGrid sim_grid() const { return TimeGrid(model.horizon, sim_steps); }

    HjbOptions hjb_options() const {
        HjbOptions o;
        o.scheme = scheme;
        o.cfl = cfl;
        o.ham = ham;
        o.workers = workers;
        o.allow_value_point_near_face = allow_value_point_near_face;
        return o;
    }
    SimOptions sim_options() const {
        SimOptions o;
        o.allow_coarse_jumps = allow_coarse_jumps;
        o.workers = workers;
        return o;
    }
};

namespace detail {

inline std::vector<int> read_nodes(const json& v, int D) {
    std::vector<int> n;
    if (v.is_number_integer()) {
        n.assign(static_cast<std::size_t>(D), v.get<int>());
    } else if (v.is_array() && static_cast<int>(v.size()) == D) {
        for (const auto& e : v) {
            if (!e.is_number_integer()) throw ConfigError("grids.nodes: expected integers");
            n.push_back(e.get<int>());
        }
    } else {
        throw ConfigError("grids.nodes: expected an integer or an array of " + std::to_string(D) + " integers");
    }
    return n;
}

inline json vec_json(const Vec& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline void positive_int(int v, const std::string& where) {
    if (v < 1) throw ConfigError(where + ": must be at least 1");
}

} // namespace detail

inline RunConfig run_config_from_json(const json& j) {
    detail::SpecReader top(j, "config");
    top.allow({"model", "grids", "solver", "experiment", "output"});
    RunConfig c;
    c.model = model_from_json(top.at("model"));
    const int D = c.model.state_dim();

    const json empty = json::object();
    const detail::SpecReader g(top.has("grids") ? top.at("grids") : empty, "grids");
    g.allow({"nodes", "lo", "hi", "time_steps", "sim_steps"});
    c.nodes = g.has("nodes") ? detail::read_nodes(g.at("nodes"), D) : std::vector<int>(static_cast<std::size_t>(D), 41);
    c.lo = g.has("lo") ? g.vec("lo", D) : c.model.box_lo;
    c.hi = g.has("hi") ? g.vec("hi", D) : c.model.box_hi;
    if (g.has("time_steps")) c.time_steps = g.integer("time_steps");
    if (g.has("sim_steps")) c.sim_steps = g.integer("sim_steps");
    detail::positive_int(c.time_steps, "grids.time_steps");
    detail::positive_int(c.sim_steps, "grids.sim_steps");

    const detail::SpecReader s(top.has("solver") ? top.at("solver") : empty, "solver");
    s.allow({"scheme", "cfl", "z_max", "h_max", "k_max", "tol", "max_sweeps", "multistart", "nash_tol", "nash_max_sweeps",
             "basis_degree", "ridge", "policy_probes", "allow_value_point_near_face", "allow_coarse_jumps", "boundary_check",
             "workers"});
    const std::string scheme = s.text("scheme", "imex");
    if (scheme == "imex")
        c.scheme = TimeScheme::imex;
    else if (scheme == "explicit")
        c.scheme = TimeScheme::explicit_euler;
    else
        throw ConfigError("solver.scheme: expected 'imex' or 'explicit', got '" + scheme + "'");
    c.cfl = s.number("cfl", c.cfl);
    c.ham.z_max = s.number("z_max", c.ham.z_max);
    c.ham.h_max = s.number("h_max", c.ham.h_max);
    c.ham.k_max = s.number("k_max", c.ham.k_max);
    c.ham.tol = s.number("tol", c.ham.tol);
    if (s.has("max_sweeps")) c.ham.max_sweeps = s.integer("max_sweeps");
    if (s.has("multistart")) c.ham.multistart = s.integer("multistart");
    c.ham.nash.tol = s.number("nash_tol", c.ham.nash.tol);
    if (s.has("nash_max_sweeps")) c.ham.nash.max_sweeps = s.integer("nash_max_sweeps");
    if (s.has("basis_degree")) c.basis_degree = s.integer("basis_degree");
    c.ridge = s.number("ridge", c.ridge);
    if (s.has("policy_probes")) c.policy_probes = s.integer("policy_probes");
    c.allow_value_point_near_face = s.boolean("allow_value_point_near_face", false);
    c.allow_coarse_jumps = s.boolean("allow_coarse_jumps", false);
    c.boundary_check = s.boolean("boundary_check", false);
    if (s.has("workers")) c.workers = s.integer("workers");
    if (!(c.cfl > 0.0)) throw ConfigError("solver.cfl: must be positive");
    if (!(c.ham.z_max > 0.0 && c.ham.h_max > 0.0 && c.ham.k_max > 0.0)) throw ConfigError("solver: search bounds must be positive");
    if (!(c.ham.tol > 0.0 && c.ham.nash.tol > 0.0)) throw ConfigError("solver: tolerances must be positive");
    detail::positive_int(c.ham.max_sweeps, "solver.max_sweeps");
    detail::positive_int(c.ham.multistart, "solver.multistart");
    detail::positive_int(c.ham.nash.max_sweeps, "solver.nash_max_sweeps");
    if (c.basis_degree < 1 || c.basis_degree > 4) throw ConfigError("solver.basis_degree: expected 1..4");
    if (!(c.ridge >= 0.0)) throw ConfigError("solver.ridge: must be non-negative");
    if (c.policy_probes < 0) throw ConfigError("solver.policy_probes: must be non-negative");
    if (c.workers < 0) throw ConfigError("solver.workers: must be non-negative (0 = all cores)");

    const detail::SpecReader e(top.has("experiment") ? top.at("experiment") : empty, "experiment");
    e.allow({"command", "n_paths", "seed", "probes", "crosscheck", "policy", "action", "reweight", "deviations",
             "deviation_points", "z_scale", "noise_floor", "repeats"});
    c.command = e.text("command", "");
    if (e.has("n_paths")) c.n_paths = e.integer("n_paths");
    detail::positive_int(c.n_paths, "experiment.n_paths");
    if (e.has("seed")) {
        const json& v = e.at("seed");
        if (!v.is_number_unsigned()) throw ConfigError("experiment.seed: expected a non-negative integer");
        c.seed = v.get<std::uint64_t>();
    }
    if (e.has("probes")) {
        const json& pj = e.at("probes");
        if (!pj.is_array()) throw ConfigError("experiment.probes: expected an array");
        for (std::size_t i = 0; i < pj.size(); ++i) {
            const detail::SpecReader r(pj[i], "experiment.probes[" + std::to_string(i) + "]");
            r.allow({"t", "x"});
            c.probes.push_back({r.number("t"), r.vec("x", D)});
        }
    }
    c.crosscheck = e.boolean("crosscheck", false);
    c.policy = e.text("policy", c.policy);
    if (c.policy != "equilibrium" && c.policy != "base" && c.policy != "constant")
        throw ConfigError("experiment.policy: expected 'equilibrium', 'base' or 'constant', got '" + c.policy + "'");
    if (c.policy == "constant") c.action = e.vec("action", c.model.action_dim());
    else if (e.has("action")) throw ConfigError("experiment.action: only used with policy 'constant'");
    c.reweight = e.boolean("reweight", false);
    if (c.reweight && c.policy == "base") throw ConfigError("experiment.reweight: the base policy has nothing to reweight");
    if (e.has("deviations")) {
        const json& dj = e.at("deviations");
        if (dj.is_string()) {
            if (dj.get<std::string>() != "default") throw ConfigError("experiment.deviations: expected 'default' or a list");
        } else if (dj.is_array()) {
            if (dj.empty()) throw ConfigError("experiment.deviations: the deviation list is empty");
            c.default_deviations = false;
            for (std::size_t i = 0; i < dj.size(); ++i) {
                const std::string where = "experiment.deviations[" + std::to_string(i) + "]";
                const detail::SpecReader r(dj[i], where);
                r.allow({"agent", "action"});
                DeviationSpec d;
                d.agent = r.integer("agent");
                if (d.agent < 0 || d.agent >= c.model.agents) throw ConfigError(where + ".agent: no such agent");
                d.action = r.vec("action", c.model.actions.dim(d.agent));
                c.deviations.push_back(std::move(d));
            }
        } else {
            throw ConfigError("experiment.deviations: expected 'default' or a list");
        }
    }
    if (e.has("deviation_points")) c.deviation_points = e.integer("deviation_points");
    if (c.deviation_points < 2) throw ConfigError("experiment.deviation_points: need at least 2");
    c.z_scale = e.number("z_scale", c.z_scale);
    c.noise_floor = e.number("noise_floor", c.noise_floor);
    if (!(c.noise_floor >= 0.0)) throw ConfigError("experiment.noise_floor: must be non-negative");
    if (e.has("repeats")) c.repeats = e.integer("repeats");
    detail::positive_int(c.repeats, "experiment.repeats");

    const detail::SpecReader o(top.has("output") ? top.at("output") : empty, "output");
    o.allow({"directory", "formats", "max_csv_paths", "cache"});
    c.directory = o.text("directory", c.directory);
    if (o.has("formats")) {
        const json& f = o.at("formats");
        if (!f.is_array()) throw ConfigError("output.formats: expected an array");
        c.csv = c.json_out = false;
        for (const auto& v : f) {
            const std::string s2 = v.is_string() ? v.get<std::string>() : "";
            if (s2 == "csv") c.csv = true;
            else if (s2 == "json") c.json_out = true;
            else throw ConfigError("output.formats: expected 'csv' and/or 'json'");
        }
    }
    if (o.has("max_csv_paths")) c.max_csv_paths = o.integer("max_csv_paths");
    c.cache = o.text("cache", "");
    return c;
}

inline RunConfig run_config_from_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return run_config_from_json(j);
}

inline RunConfig run_config_from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return run_config_from_text(ss.str());
}

/// Every setting that affects results, defaults filled in. Worker count and
/// output location are left out: results do not depend on them.
inline json canonical_json(const RunConfig& c) {
    json probes = json::array();
    for (const auto& p : c.probes) probes.push_back({{"t", p.t}, {"x", detail::vec_json(p.x)}});
    json devs;
    if (c.default_deviations) {
        devs = "default";
    } else {
        devs = json::array();
        for (const auto& d : c.deviations) devs.push_back({{"agent", d.agent}, {"action", detail::vec_json(d.action)}});
    }
    json nodes = json::array();
    for (int n : c.nodes) nodes.push_back(n);
    return {{"model", c.model.source},
            {"grids", {{"nodes", nodes}, {"lo", detail::vec_json(c.lo)}, {"hi", detail::vec_json(c.hi)},
                       {"time_steps", c.time_steps}, {"sim_steps", c.sim_steps}}},
            {"solver", {{"scheme", scheme_name(c.scheme)}, {"cfl", c.cfl}, {"z_max", c.ham.z_max}, {"h_max", c.ham.h_max},
                        {"k_max", c.ham.k_max}, {"tol", c.ham.tol}, {"max_sweeps", c.ham.max_sweeps},
                        {"multistart", c.ham.multistart}, {"nash_tol", c.ham.nash.tol},
                        {"nash_max_sweeps", c.ham.nash.max_sweeps}, {"basis_degree", c.basis_degree}, {"ridge", c.ridge},
                        {"policy_probes", c.policy_probes}, {"allow_value_point_near_face", c.allow_value_point_near_face},
                        {"allow_coarse_jumps", c.allow_coarse_jumps}, {"boundary_check", c.boundary_check}}},
            {"experiment", {{"command", c.command}, {"n_paths", c.n_paths}, {"seed", c.seed}, {"probes", probes},
                            {"crosscheck", c.crosscheck}, {"policy", c.policy},
                            {"action", c.policy == "constant" ? detail::vec_json(c.action) : json(nullptr)},
                            {"reweight", c.reweight}, {"deviations", devs}, {"deviation_points", c.deviation_points},
                            {"z_scale", c.z_scale}, {"noise_floor", c.noise_floor}, {"repeats", c.repeats}}}};
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a(canonical_json(c).dump())); }

} // namespace pmc
