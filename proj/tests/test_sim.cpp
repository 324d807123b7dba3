#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "pmc/model_io.hpp"
#include "pmc/sim.hpp"

using namespace pmc;

namespace {

Vec v1(double a) { return Vec::Constant(1, a); }

ModelSpec frozen_model() {
    return model_from_json(json::parse(R"({"spec": {
        "agents": 1, "block_dim": 1, "noise_dim": 1, "horizon": 1.0,
        "x0": [0.7], "state_box": {"lo": [-4.0], "hi": [4.0]},
        "sigma": [["0"]], "drift": ["a0"],
        "actions": [{"lo": [0.0], "hi": [1.0]}],
        "agent_specs": [{"cara": true, "risk_aversion": 1.0, "reservation": -1.0}],
        "principal": {"liquidation": "x0"}}})"));
}

ModelSpec single_jump_model(double weight) {
    auto m = builtin_model("holmstrom_milgrom");
    m.jumps[0].atoms = {{1.0, weight, false}};
    m.jumps[0].size = [](double, const Vec&, double e) { return v1(-e); };
    m.jumps[0].intensity = [](double, const Vec&, const Vec&, double) { return 2.0; };
    return m;
}

} // namespace

TEST(Simulate, ZeroActionIsDriftlessWithUnitDensity) {
    auto m = builtin_model("holmstrom_milgrom", {{"sigma", 1.5}});
    auto B = simulate_paths(m, constant_policy(v1(0.0)), TimeGrid(1.0, 50), 4000, 11);
    for (double d : B.dens) EXPECT_EQ(d, 1.0);
    auto est = estimate_expectation(B, terminal_coordinate(0));
    EXPECT_LE(std::abs(est.value - m.x0[0]), 3.0 * est.se);
    // sd of X_T is sigma sqrt(T)
    EXPECT_NEAR(est.se * std::sqrt(4000.0), 1.5, 0.06);
}

TEST(Simulate, DegenerateModelStaysAtX0) {
    auto m = frozen_model();
    auto B = simulate_paths(m, constant_policy(v1(0.0)), TimeGrid(1.0, 20), 50, 3);
    for (int p = 0; p < B.n_paths; ++p)
        for (int k = 0; k < B.nodes(); ++k) EXPECT_EQ(B.x(p, k)[0], 0.7);
    auto est = estimate_expectation(B, terminal_coordinate(0));
    EXPECT_EQ(est.value, 0.7);
    EXPECT_EQ(est.se, 0.0);
}

TEST(Simulate, ConstantEffortMean) {
    auto m = builtin_model("holmstrom_milgrom");
    auto B = simulate_paths(m, constant_policy(v1(0.5)), TimeGrid(1.0, 50), 10000, 5);
    auto est = estimate_expectation(B, terminal_coordinate(0));
    EXPECT_LE(std::abs(est.value - (m.x0[0] + 0.5 * 1.0)), 3.0 * est.se) << est.value << " +- " << est.se;
}

TEST(Simulate, EulerRecursionIsReproducibleFromIncrements) {
    auto m = builtin_model("capponi_frei", {{"sigma", 0.8}});
    Vec a(2);
    a << 0.4, 1.2;
    auto B = simulate_paths(m, constant_policy(a), TimeGrid(1.0, 40), 200, 9);
    const double dt = B.grid.dt();
    for (int p = 0; p < B.n_paths; ++p) {
        Vec x = m.x0;
        for (int k = 0; k < B.grid.steps; ++k) {
            Vec nx = x + m.sigma(B.grid.t(k), x) * (m.drift(B.grid.t(k), x, a) * dt + Vec(B.dW(p, k)));
            for (const auto& ev : B.jumps[static_cast<std::size_t>(p)])
                if (ev.step == k) nx += ev.size;
            EXPECT_EQ(nx, Vec(B.x(p, k + 1)));
            x = nx;
        }
        for (int k = 0; k < B.nodes(); ++k) EXPECT_GT(B.density(p, k), 0.0);
    }
}

TEST(Simulate, BitIdenticalAcrossWorkerCounts) {
    auto m = builtin_model("capponi_frei");
    Vec a(2);
    a << 1.0, 0.8;
    SimOptions one, four;
    four.workers = 4;
    auto B1 = simulate_paths(m, constant_policy(a), TimeGrid(1.0, 30), 301, 77, one);
    auto B4 = simulate_paths(m, constant_policy(a), TimeGrid(1.0, 30), 301, 77, four);
    EXPECT_EQ(B1.xs, B4.xs);
    EXPECT_EQ(B1.dw, B4.dw);
    EXPECT_EQ(B1.dens, B4.dens);
    auto B5 = simulate_paths(m, constant_policy(a), TimeGrid(1.0, 30), 301, 78, one);
    EXPECT_NE(B1.xs, B5.xs);
}

TEST(Simulate, JumpProbabilityGuards) {
    auto m = single_jump_model(3.0);  // lambda w = 6 per unit time
    EXPECT_THROW(simulate_paths(m, constant_policy(v1(0.0)), TimeGrid(1.0, 20), 10, 1), SolverError);
    SimOptions coarse;
    coarse.allow_coarse_jumps = true;
    EXPECT_NO_THROW(simulate_paths(m, constant_policy(v1(0.0)), TimeGrid(1.0, 20), 10, 1, coarse));
    EXPECT_THROW(simulate_paths(m, constant_policy(v1(0.0)), TimeGrid(1.0, 5), 10, 1, coarse), SolverError);
    EXPECT_NO_THROW(simulate_paths(m, constant_policy(v1(0.0)), TimeGrid(1.0, 80), 10, 1));
}

TEST(Simulate, EulerBiasIsFirstOrder) {
    // dX = -X dt + 0.2 dW: E[X_T] = e^{-T} x0; Euler mean (1 - dt)^M x0.
    auto m = model_from_json(json::parse(R"({"spec": {
        "agents": 1, "block_dim": 1, "noise_dim": 1, "horizon": 1.0,
        "x0": [1.0], "state_box": {"lo": [-4.0], "hi": [4.0]},
        "sigma": [["0.2"]], "drift": ["-5*x0"],
        "actions": [{"lo": [0.0], "hi": [1.0]}],
        "agent_specs": [{"cara": true, "risk_aversion": 1.0, "reservation": -1.0}],
        "principal": {"liquidation": "x0"}}})"));
    std::vector<double> means;
    for (int M : {4, 8, 16}) {
        auto B = simulate_paths(m, constant_policy(v1(0.0)), TimeGrid(1.0, M), 100000, 21);
        means.push_back(estimate_expectation(B, terminal_coordinate(0)).value);
    }
    const double order = std::log2((means[0] - means[1]) / (means[1] - means[2]));
    EXPECT_GE(order, 0.8) << means[0] << " " << means[1] << " " << means[2];
}

TEST(Girsanov, IdentityChangeOfMeasure) {
    auto m = builtin_model("capponi_frei");
    auto B = simulate_paths(m, nullptr, TimeGrid(1.0, 40), 300, 4);
    Vec a(2);
    a << 0.0, 1.0;  // b = drift/sigma = 0 (drift param 0), lambda = 1
    auto M = girsanov_density(m, B, constant_policy(a));
    for (double d : M) EXPECT_DOUBLE_EQ(d, 1.0);
}

TEST(Girsanov, DensityIsMartingaleAtEveryNode) {
    auto m = builtin_model("holmstrom_milgrom");
    auto B = simulate_paths(m, nullptr, TimeGrid(1.0, 20), 10000, 8);
    auto M = girsanov_density(m, B, constant_policy(v1(0.8)));
    for (int k = 0; k < B.nodes(); ++k) {
        auto est = estimate_expectation(B, [&](const PathBundle& b, int p) { return M[static_cast<std::size_t>(p) * b.nodes() + k]; });
        if (k == 0) {
            EXPECT_EQ(est.value, 1.0);
            continue;
        }
        EXPECT_LE(std::abs(est.value - 1.0), (k == B.grid.steps ? 3.0 : 4.0) * est.se) << "node " << k;
    }
}

TEST(Girsanov, SingleJumpHandValue) {
    const double w = 0.5, T = 1.0;
    auto m = single_jump_model(w);
    auto B = simulate_paths(m, nullptr, TimeGrid(T, 100), 400, 12);
    auto M = girsanov_density(m, B, constant_policy(v1(0.0)));
    int checked = 0;
    for (int p = 0; p < B.n_paths; ++p) {
        if (B.jumps[static_cast<std::size_t>(p)].size() != 1) continue;
        const double got = M[static_cast<std::size_t>(p) * B.nodes() + B.grid.steps];
        EXPECT_NEAR(got, 2.0 * std::exp(-(2.0 - 1.0) * w * T), 1e-12);
        // step-by-step oracle
        double oracle = 1.0;
        for (int k = 0; k < B.grid.steps; ++k) {
            oracle *= std::exp(-(2.0 - 1.0) * w * B.grid.dt());
            if (B.jumps[static_cast<std::size_t>(p)][0].step == k) oracle *= 2.0;
        }
        EXPECT_NEAR(got, oracle, 1e-13);
        ++checked;
    }
    EXPECT_GT(checked, 10);
}

TEST(Girsanov, RejectsDriftedBundleAndBadIntensity) {
    auto m = single_jump_model(0.5);
    auto B = simulate_paths(m, constant_policy(v1(0.0)), TimeGrid(1.0, 50), 10, 1);
    EXPECT_THROW(girsanov_density(m, B, constant_policy(v1(0.0))), DomainError);
    auto base = simulate_paths(m, nullptr, TimeGrid(1.0, 50), 10, 1);
    m.jumps[0].intensity = [](double, const Vec&, const Vec&, double) { return -1.0; };
    EXPECT_THROW(girsanov_density(m, base, constant_policy(v1(0.0))), ModelError);
}

TEST(Estimate, ConstantFunctionalAndEmptyBundle) {
    auto m = builtin_model("holmstrom_milgrom");
    auto B = simulate_paths(m, nullptr, TimeGrid(1.0, 5), 100, 2);
    auto est = estimate_expectation(B, [](const PathBundle&, int) { return 3.25; });
    EXPECT_EQ(est.value, 3.25);
    EXPECT_EQ(est.se, 0.0);
    PathBundle empty;
    EXPECT_THROW(estimate_expectation(empty, terminal_coordinate(0)), DomainError);
}

TEST(Estimate, ReweightedMatchesDrifted) {
    for (const auto& name : {"holmstrom_milgrom", "capponi_frei"}) {
        auto m = builtin_model(name);
        Vec a = m.actions.center();
        a[0] = 0.5;
        auto base = simulate_paths(m, nullptr, TimeGrid(1.0, 50), 10000, 31);
        auto M = girsanov_density(m, base, constant_policy(a));
        auto rw = estimate_expectation(base, terminal_coordinate(0), &M);
        auto drifted = simulate_paths(m, constant_policy(a), TimeGrid(1.0, 50), 10000, 32);
        auto dr = estimate_expectation(drifted, terminal_coordinate(0));
        EXPECT_LE(std::abs(rw.value - dr.value), 3.0 * combined_se(rw, dr)) << name;
    }
}

TEST(Export, PathsCsvLayout) {
    auto m = builtin_model("market_maker");
    auto B = simulate_paths(m, nullptr, TimeGrid(1.0, 40), 3, 2);
    std::ostringstream os;
    write_paths_csv(B, os);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "path,node,t,x0,x1,x2,density");
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    EXPECT_EQ(rows, 3 * 41);
}
