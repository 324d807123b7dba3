#pragma once
// Config-driven pipelines behind the pmc command line tool. Each command
// writes its files into the output directory and returns a process exit
// code: 0 ok, 2 config/validation, 3 solver failure, 4 verification fail.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "pmc/config.hpp"
#include "pmc/contract.hpp"
#include "pmc/hjb.hpp"
#include "pmc/sim.hpp"

namespace pmc {

enum ExitCode : int { exit_ok = 0, exit_internal = 1, exit_config = 2, exit_solver = 3, exit_verify = 4 };

struct Overrides {
    std::optional<std::string> out;
    std::optional<int> workers;
    std::optional<std::uint64_t> seed;
};

inline void apply_overrides(RunConfig& c, const Overrides& o) {
    if (o.out) c.directory = *o.out;
    if (o.workers) {
        if (*o.workers < 0) throw ConfigError("--workers: must be non-negative (0 = all cores)");
        c.workers = *o.workers;
    }
    if (o.seed) c.seed = *o.seed;
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::filesystem::path output_dir(const RunConfig& c) {
    std::filesystem::path dir(c.directory);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw ConfigError("cannot create output directory '" + c.directory + "': " + ec.message());
    return dir;
}

template <class Writer>
void write_file(const std::filesystem::path& path, Writer&& write) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot write '" + path.string() + "'");
    write(os);
    if (!os) throw ConfigError("write to '" + path.string() + "' failed");
}

inline void write_json(const std::filesystem::path& path, const json& j) {
    write_file(path, [&](std::ostream& os) { os << j.dump(2) << "\n"; });
}

inline json estimate_json(const Estimate& e) { return {{"value", e.value}, {"stderr", e.se}}; }

inline json grid_json(const ValueSurface& s) {
    json nodes = json::array(), dx = json::array();
    for (int d = 0; d < s.grid.dim(); ++d) {
        nodes.push_back(s.grid.nodes(d));
        dx.push_back(s.grid.dx()[d]);
    }
    return {{"nodes", nodes}, {"lo", vec_json(s.grid.lo())}, {"hi", vec_json(s.grid.hi())}, {"dx", dx},
            {"time_steps", s.time.steps}, {"dt", s.time.dt()}, {"scheme", scheme_name(s.scheme)}, {"cfl_ratio", s.cfl_ratio}};
}

inline json quality_json(const PolicyQuality& q) {
    return {{"probes", q.probes}, {"worst_gap", q.worst_gap}, {"passed", q.passed}, {"warning", q.warning}};
}

} // namespace detail

/// Solve the grid problem, or read it from output.cache when the cache key
/// matches; a fresh solve refreshes the cache file.
inline std::shared_ptr<const ValueSurface> obtain_surface(const RunConfig& c, bool* from_cache = nullptr) {
    const SpaceGrid g = c.space_grid();
    const TimeGrid tg = c.solve_grid();
    const HjbOptions opt = c.hjb_options();
    if (from_cache) *from_cache = false;
    std::string key;
    if (!c.cache.empty()) {
        key = surface_cache_key(c.model, g, tg, opt);
        std::ifstream in(c.cache, std::ios::binary);
        if (in) {
            if (auto s = load_surface(in, key, c.model, c.ham)) {
                if (from_cache) *from_cache = true;
                return std::make_shared<const ValueSurface>(std::move(*s));
            }
        }
    }
    auto s = std::make_shared<const ValueSurface>(solve(c.model, g, tg, opt));
    if (!c.cache.empty()) {
        const std::filesystem::path p(c.cache);
        if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
        detail::write_file(p, [&](std::ostream& os) { save_surface(*s, key, os); });
    }
    return s;
}

/// surface.csv, policy.csv, summary.json.
inline int cmd_solve(const RunConfig& c, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    require_valid(c.model);
    const auto dir = detail::output_dir(c);
    bool cached = false;
    const auto s = obtain_surface(c, &cached);
    const double solve_time = detail::seconds_since(t0);
    const FeedbackPolicy pol = extract_policy(s, c.policy_probes);

    json probes = json::array();
    for (std::size_t i = 0; i < c.probes.size(); ++i) {
        const auto& pr = c.probes[i];
        if (!(pr.t >= 0.0 && pr.t <= c.model.horizon)) throw ConfigError("experiment.probes[" + std::to_string(i) + "].t lies outside [0, T]");
        const int k = pol.slice(pr.t);
        json row = {{"t", pr.t}, {"x", detail::vec_json(pr.x)}, {"v", s->interpolate(k, pr.x)}};
        if (c.crosscheck && pr.t < c.model.horizon) {
            const int steps = std::max(1, static_cast<int>(std::lround(c.sim_steps * (c.model.horizon - pr.t) / c.model.horizon)));
            const PathBundle B = crosscheck_bundle(c.model, pr.t, pr.x, steps, c.n_paths, c.seed + i, c.sim_options());
            FbsdeOptions fo;
            fo.degree = c.basis_degree;
            fo.ridge = c.ridge;
            fo.ham = c.ham;
            fo.workers = c.workers;
            const Estimate y = fbsde_crosscheck(c.model, pr.t, pr.x, B, fo);
            const double tol = std::max(5e-2, 3.0 * y.se);
            row["fbsde"] = detail::estimate_json(y);
            row["agree"] = std::abs(y.value - row["v"].get<double>()) <= tol;
        }
        probes.push_back(row);
    }

    json diag = {{"boundary_argmax", s->boundary_argmax},
                 {"budget_warnings", s->budget_warnings},
                 {"extrapolated_jumps", s->extrapolated_jumps},
                 {"skipped_cross_terms", s->skipped_cross_terms},
                 {"policy_quality", detail::quality_json(pol.quality())},
                 {"from_cache", cached}};
    if (c.boundary_check) diag["boundary_influence"] = boundary_influence(c.model, *s, c.hjb_options());

    const json summary = {{"command", "solve"},
                          {"config_hash", config_hash(c)},
                          {"model", c.model.name},
                          {"value_at_x0", s->value_at_x0},
                          {"reservation_shift", s->reservation_shift},
                          {"principal_value", s->principal_value},
                          {"grid", detail::grid_json(*s)},
                          {"diagnostics", diag},
                          {"probes", probes},
                          {"surface_hash", surface_hash(*s)},
                          {"solve_seconds", solve_time},
                          {"wall_seconds", detail::seconds_since(t0)}};
    if (c.csv) {
        detail::write_file(dir / "surface.csv", [&](std::ostream& os) { write_surface_csv(*s, os); });
        detail::write_file(dir / "policy.csv", [&](std::ostream& os) { write_policy_csv(*s, os); });
    }
    if (c.json_out) detail::write_json(dir / "summary.json", summary);
    if (!pol.quality().passed) log << "warning: " << pol.quality().warning << "\n";
    char buf[160];
    std::snprintf(buf, sizeof buf, "v(0,X0) = %.6f  V_P = %.6f  (%.2f s)\n", s->value_at_x0, s->principal_value,
                  detail::seconds_since(t0));
    log << buf;
    return exit_ok;
}

/// paths.csv, estimates.json.
inline int cmd_simulate(const RunConfig& c, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    require_valid(c.model);
    const auto dir = detail::output_dir(c);
    ActionPolicy play;
    if (c.policy == "constant") {
        if (!c.model.actions.contains(c.action)) throw ConfigError("experiment.action lies outside the action space");
        play = constant_policy(c.action);
    } else if (c.policy == "equilibrium") {
        play = extract_policy(obtain_surface(c), c.policy_probes).action_policy();
    }
    const TimeGrid tg = c.sim_grid();
    const PathBundle B = simulate_paths(c.model, play, tg, c.n_paths, c.seed, c.sim_options());
    const int D = c.model.state_dim();

    json drifted = json::array();
    for (int d = 0; d < D; ++d) drifted.push_back(detail::estimate_json(estimate_expectation(B, terminal_coordinate(d))));
    json est = {{"command", "simulate"},
                {"config_hash", config_hash(c)},
                {"model", c.model.name},
                {"policy", c.policy},
                {"paths", c.n_paths},
                {"steps", tg.steps},
                {"seed", c.seed},
                {"terminal_mean", drifted}};
    if (c.reweight) {
        const PathBundle B0 = simulate_paths(c.model, nullptr, tg, c.n_paths, c.seed, c.sim_options());
        const auto dens = girsanov_density(c.model, B0, play, c.workers);
        const PathFunctional one = [](const PathBundle&, int) { return 1.0; };
        json rw = json::array();
        bool consistent = true;
        for (int d = 0; d < D; ++d) {
            const Estimate a = estimate_expectation(B, terminal_coordinate(d));
            const Estimate b = estimate_expectation(B0, terminal_coordinate(d), &dens);
            consistent = consistent && std::abs(a.value - b.value) <= 3.0 * combined_se(a, b);
            rw.push_back(detail::estimate_json(b));
        }
        est["reweighted_terminal_mean"] = rw;
        est["density_mean"] = detail::estimate_json(estimate_expectation(B0, one, &dens));
        est["reweight_consistent"] = consistent;
    }
    est["wall_seconds"] = detail::seconds_since(t0);
    if (c.csv) detail::write_file(dir / "paths.csv", [&](std::ostream& os) { write_paths_csv(B, os, c.max_csv_paths); });
    if (c.json_out) detail::write_json(dir / "estimates.json", est);
    for (int d = 0; d < D; ++d) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "E[X_T[%d]] = %.6f +- %.6f\n", d, drifted[static_cast<std::size_t>(d)]["value"].get<double>(),
                      drifted[static_cast<std::size_t>(d)]["stderr"].get<double>());
        log << buf;
    }
    return exit_ok;
}

/// deviations.csv, report.json; exit 4 when some deviation pays.
inline int cmd_verify(const RunConfig& c, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    require_valid(c.model);
    const auto dir = detail::output_dir(c);
    std::vector<Deviation> devs;
    for (const auto& d : c.deviations) devs.push_back(constant_deviation(d.agent, d.action));

    const FeedbackPolicy pol = extract_policy(obtain_surface(c), c.policy_probes);
    ContractPolicy cp = contract_policy(pol);
    if (c.z_scale != 1.0) {
        const ControlPolicy base = cp.control;
        const double f = c.z_scale;
        cp.control = [base, f](double t, const Vec& x) {
            ControlPoint p = base(t, x);
            p.z *= f;
            return p;
        };
    }
    if (c.default_deviations) devs = default_deviations(c.model, cp.response, c.deviation_points);

    const PathBundle B = simulate_paths(c.model, cp.response, c.sim_grid(), c.n_paths, c.seed, c.sim_options());
    ContractOptions co;
    co.nash = c.ham.nash;
    co.workers = c.workers;
    const ContractOutcome outcome = synthesize_contract(c.model, cp, B, co);
    VerifyOptions vo;
    vo.nash = c.ham.nash;
    vo.workers = c.workers;
    vo.noise_floor = c.noise_floor;
    const DeviationReport rep = verify_incentive_compatibility(c.model, cp, outcome, devs, c.n_paths, c.seed, vo);

    Vec R0(c.model.agents);
    for (int i = 0; i < c.model.agents; ++i) R0[i] = c.model.agent[static_cast<std::size_t>(i)].reservation;
    const ParticipationCheck part = verify_participation(outcome, R0);
    json pj = json::array();
    for (int i = 0; i < c.model.agents; ++i)
        pj.push_back({{"agent", i},
                      {"ok", static_cast<bool>(part.ok[static_cast<std::size_t>(i)])},
                      {"margin", part.margin[static_cast<std::size_t>(i)]},
                      {"stderr", part.se[static_cast<std::size_t>(i)]}});

    const json report = {{"command", "verify"},
                         {"config_hash", config_hash(c)},
                         {"model", c.model.name},
                         {"verdict", rep.pass ? "pass" : "fail"},
                         {"z_scale", c.z_scale},
                         {"incentives", to_json(rep)},
                         {"contract", to_json(outcome)},
                         {"participation", pj},
                         {"policy_quality", detail::quality_json(pol.quality())},
                         {"wall_seconds", detail::seconds_since(t0)}};
    if (c.csv) detail::write_file(dir / "deviations.csv", [&](std::ostream& os) { write_deviations_csv(rep, os); });
    if (c.json_out) detail::write_json(dir / "report.json", report);

    for (const auto& r : rep.rows) {
        if (r.equilibrium) continue;
        char buf[200];
        std::snprintf(buf, sizeof buf, "agent %d  %-28s gain %+.5f +- %.5f\n", r.agent, r.description.c_str(), r.gain.value,
                      r.gain.se);
        log << buf;
    }
    log << "verdict: " << (rep.pass ? "pass" : "fail") << "\n";
    return rep.pass ? exit_ok : exit_verify;
}

/// bench.json: wall time of each pipeline stage, best of `repeats`.
inline int cmd_bench(const RunConfig& c, std::ostream& log) {
    require_valid(c.model);
    const auto dir = detail::output_dir(c);
    RunConfig nc = c;
    nc.cache.clear();
    double t_solve = 1e300, t_policy = 1e300, t_base = 1e300, t_eq = 1e300;
    long nodes = 0;
    for (int r = 0; r < c.repeats; ++r) {
        auto t0 = std::chrono::steady_clock::now();
        const auto s = obtain_surface(nc);
        t_solve = std::min(t_solve, detail::seconds_since(t0));
        nodes = s->nodes();
        t0 = std::chrono::steady_clock::now();
        const FeedbackPolicy pol = extract_policy(s, c.policy_probes);
        t_policy = std::min(t_policy, detail::seconds_since(t0));
        t0 = std::chrono::steady_clock::now();
        simulate_paths(c.model, nullptr, c.sim_grid(), c.n_paths, c.seed, c.sim_options());
        t_base = std::min(t_base, detail::seconds_since(t0));
        t0 = std::chrono::steady_clock::now();
        simulate_paths(c.model, pol.action_policy(), c.sim_grid(), c.n_paths, c.seed, c.sim_options());
        t_eq = std::min(t_eq, detail::seconds_since(t0));
    }
    const json bench = {{"command", "bench"},
                        {"config_hash", config_hash(c)},
                        {"model", c.model.name},
                        {"workers", resolve_workers(c.workers)},
                        {"repeats", c.repeats},
                        {"grid_nodes", nodes},
                        {"time_steps", c.time_steps},
                        {"paths", c.n_paths},
                        {"sim_steps", c.sim_steps},
                        {"seconds", {{"solve", t_solve}, {"extract_policy", t_policy}, {"simulate_base", t_base},
                                     {"simulate_equilibrium", t_eq}}}};
    detail::write_json(dir / "bench.json", bench);
    char buf[200];
    std::snprintf(buf, sizeof buf, "solve %.3f s  policy %.3f s  simulate %.3f s (base) %.3f s (equilibrium)\n", t_solve,
                  t_policy, t_base, t_eq);
    log << buf;
    return exit_ok;
}

/// Dispatch with the exit-code mapping; error messages go to `err`.
inline int run_command(const std::string& command, const RunConfig& c, std::ostream& log, std::ostream& err) {
    try {
        if (command == "solve") return cmd_solve(c, log);
        if (command == "simulate") return cmd_simulate(c, log);
        if (command == "verify") return cmd_verify(c, log);
        if (command == "bench") return cmd_bench(c, log);
        err << "error: unknown command '" << command << "' (solve, simulate, verify, bench)\n";
        return exit_config;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const ModelError& e) {
        err << "model error: " << e.what() << "\n";
        return exit_config;
    } catch (const DomainError& e) {
        err << "invalid input: " << e.what() << "\n";
        return exit_config;
    } catch (const SolverError& e) {
        err << "solver error: " << e.what() << "\n";
        return exit_solver;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return exit_internal;
    }
}

} // namespace pmc
