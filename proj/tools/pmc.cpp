// pmc: solve, simulate, verify or benchmark a contracting model from a JSON
// run config.
//
//   pmc solve --config configs/holmstrom_milgrom.json --out out/hm
//   pmc verify --config configs/holmstrom_milgrom.json --seed 7
//
// Exit codes: 0 ok, 2 config/validation, 3 solver failure, 4 verification
// verdict fail.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "pmc/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Principal-multiagent contracting with jump-diffusions"};
    app.set_version_flag("--version", "pmc 1.0.0");

    std::string command, config_path;
    std::string out;
    int workers = -1;
    std::uint64_t seed = 0;
    app.add_option("command", command, "solve | simulate | verify | bench (default: experiment.command)")
        ->check(CLI::IsMember({"solve", "simulate", "verify", "bench"}));
    app.add_option("-c,--config", config_path, "run config (JSON)")->required();
    auto* out_opt = app.add_option("-o,--out", out, "output directory (overrides output.directory)");
    auto* workers_opt = app.add_option("-w,--workers", workers, "worker threads, 0 = all cores (overrides solver.workers)");
    auto* seed_opt = app.add_option("-s,--seed", seed, "master seed (overrides experiment.seed)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : pmc::exit_config;
    }

    pmc::RunConfig cfg;
    try {
        cfg = pmc::run_config_from_file(config_path);
        pmc::Overrides ov;
        if (*out_opt) ov.out = out;
        if (*workers_opt) ov.workers = workers;
        if (*seed_opt) ov.seed = seed;
        pmc::apply_overrides(cfg, ov);
    } catch (const pmc::Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return pmc::exit_config;
    }
    if (command.empty()) command = cfg.command;
    if (command.empty()) {
        std::cerr << "config error: no command given and experiment.command is not set\n";
        return pmc::exit_config;
    }
    return pmc::run_command(command, cfg, std::cout, std::cerr);
}
