#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "pmc/contract.hpp"
#include "pmc/model_io.hpp"

using namespace pmc;

namespace {

Vec v1(double a) { return Vec::Constant(1, a); }

HjbOptions imex() {
    HjbOptions o;
    o.scheme = TimeScheme::imex;
    return o;
}

// Desk solve shared by the tests of this file.
const FeedbackPolicy& hm_policy() {
    static const FeedbackPolicy pol = [] {
        auto m = builtin_model("holmstrom_milgrom");
        return extract_policy(solve(m, SpaceGrid::from_box(m, 81), TimeGrid(1.0, 100), imex()));
    }();
    return pol;
}

ModelSpec driftless() {
    return model_from_json(json::parse(R"({"spec": {
        "agents": 1, "block_dim": 1, "noise_dim": 1, "horizon": 1.0,
        "x0": [0.4], "state_box": {"lo": [-4.0], "hi": [4.0]},
        "sigma": [["1"]], "drift": ["a0"],
        "actions": [{"lo": [0.0], "hi": [1.0]}],
        "agent_specs": [{"cara": true, "risk_aversion": 1.0, "reservation": -1.0}],
        "principal": {"liquidation": "x0"}}})"));
}

ContractPolicy zero_policy(const ModelSpec& m) {
    return {[m](double, const Vec&) { return ControlPoint::zero(m); }, constant_policy(Vec::Zero(m.action_dim())), "zero"};
}

// Slope of the least-squares line of y on x.
double slope(const std::vector<double>& x, const std::vector<double>& y) {
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
    mx /= x.size();
    my /= y.size();
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) sxy += (x[i] - mx) * (y[i] - my), sxx += (x[i] - mx) * (x[i] - mx);
    return sxy / sxx;
}

} // namespace

TEST(Synthesize, ZeroPolicyPaysY0) {
    auto m = driftless();
    const auto B = simulate_paths(m, nullptr, TimeGrid(1.0, 20), 500, 5);
    const auto c = synthesize_contract(m, zero_policy(m), v1(0.3), B);
    for (int p = 0; p < c.n_paths; ++p) EXPECT_EQ(c.payment(p, 0), 0.3);
    // Principal: driftless X, constant pay.
    EXPECT_NEAR(c.principal.value, 0.4 - 0.3, 3.0 * c.principal.se);
}

TEST(Synthesize, HolmstromMilgromLinearContract) {
    auto m = builtin_model("holmstrom_milgrom");
    const auto& pol = hm_policy();
    const auto cpol = contract_policy(pol);
    const auto B = simulate_paths(m, cpol.response, TimeGrid(1.0, 50), 4000, 21);
    const auto c = synthesize_contract(m, cpol, B);
    std::vector<double> xt, xi;
    for (int p = 0; p < B.n_paths; ++p) {
        xt.push_back(B.x(p, 50)[0]);
        xi.push_back(c.payment(p, 0));
    }
    EXPECT_NEAR(slope(xt, xi), 0.5, 0.02);
    // Agent value: U_A(y0) = R_0 = -1.
    EXPECT_NEAR(c.agent_values[0].value, -1.0, 3.0 * c.agent_values[0].se);
    EXPECT_TRUE(c.reservation_ok[0]);
    // Principal value against the surface: v(0, X_0) - U_A^{-1}(R_0) = 0.25.
    EXPECT_NEAR(c.principal.value, pol.surface().principal_value, 3.0 * c.principal.se + 5e-3);
    EXPECT_NEAR(c.principal.value, 0.25, 3.0 * c.principal.se + 5e-3);
    EXPECT_TRUE(c.warning.empty());
    EXPECT_EQ(c.provenance, surface_hash(pol.surface()));

    // Shared path with forward_Y in cara_g mode.
    const auto Y = forward_Y(m, reservation_ce(m), cpol.control, B, GeneratorMode::cara_g);
    for (int p = 0; p < B.n_paths; ++p) EXPECT_NEAR(c.payment(p, 0), Y[static_cast<std::size_t>(p) * 51 + 50], 1e-12);

    // A larger certainty-equivalent offset moves the principal's value one for one.
    const auto c2 = synthesize_contract(m, cpol, reservation_ce(m) + v1(0.4), B);
    EXPECT_NEAR(c.principal.value - c2.principal.value, 0.4, 1e-12);
}

TEST(Synthesize, EquilibriumSelfConsistency) {
    auto m = builtin_model("holmstrom_milgrom");
    const auto& pol = hm_policy();
    const auto B = simulate_paths(m, pol.action_policy(), TimeGrid(1.0, 20), 200, 4);
    EXPECT_LT(equilibrium_consistency(m, pol, B), 1e-6);
}

TEST(Participation, Margins) {
    auto m = builtin_model("holmstrom_milgrom");
    const auto cpol = contract_policy(hm_policy());
    const auto B = simulate_paths(m, cpol.response, TimeGrid(1.0, 25), 4000, 8);
    const Vec R0 = v1(-1.0);
    const auto base = verify_participation(synthesize_contract(m, cpol, B), R0);
    EXPECT_TRUE(base.ok[0]);
    EXPECT_NEAR(base.margin[0], 0.0, 3.0 * base.se[0]);
    // U_A(y0 + 1) - U_A(y0) = |R_0| (1 - e^{-R_A}).
    const auto up = verify_participation(synthesize_contract(m, cpol, reservation_ce(m) + v1(1.0), B), R0);
    EXPECT_TRUE(up.ok[0]);
    EXPECT_NEAR(up.margin[0], 1.0 - std::exp(-1.0), 4.0 * up.se[0]);
    const auto down = verify_participation(synthesize_contract(m, cpol, reservation_ce(m) - v1(1.0), B), R0);
    EXPECT_FALSE(down.ok[0]);
    EXPECT_THROW(verify_participation(synthesize_contract(m, cpol, B), Vec::Zero(2)), DomainError);
}

TEST(Incentives, HolmstromMilgromOptimalContractPasses) {
    auto m = builtin_model("holmstrom_milgrom");
    const auto cpol = contract_policy(hm_policy());
    const auto B = simulate_paths(m, cpol.response, TimeGrid(1.0, 20), 200, 1);
    const auto c = synthesize_contract(m, cpol, B);
    std::vector<Deviation> devs;
    for (double a : {0.0, 0.25, 0.5, 0.75, 1.0}) devs.push_back(constant_deviation(0, v1(a)));
    const auto rep = verify_incentive_compatibility(m, cpol, c, devs, 4000, 99);
    EXPECT_TRUE(rep.pass);
    ASSERT_EQ(rep.rows.size(), 6u);
    EXPECT_TRUE(rep.rows[0].equilibrium);
    EXPECT_EQ(rep.rows[0].gain.value, 0.0);
    EXPECT_EQ(rep.rows[0].gain.se, 0.0);
    for (const auto& r : rep.rows) EXPECT_LE(r.gain.value, 3.0 * r.gain.se) << r.description;
    // a = 0.5 is the recommended action itself.
    EXPECT_NEAR(rep.rows[3].gain.value, 0.0, 1e-6);
}

TEST(Incentives, HalvedSensitivityIsDetected) {
    auto m = builtin_model("holmstrom_milgrom");
    const auto& pol = hm_policy();
    ContractPolicy mutant = contract_policy(pol);
    const ControlPolicy good = mutant.control;
    mutant.control = [good](double t, const Vec& x) {
        ControlPoint cp = good(t, x);
        cp.z *= 0.5;
        return cp;
    };
    const auto B = simulate_paths(m, mutant.response, TimeGrid(1.0, 20), 200, 1);
    const auto c = synthesize_contract(m, mutant, B);
    const auto rep = verify_incentive_compatibility(m, mutant, c, default_deviations(m, mutant.response), 4000, 99);
    EXPECT_FALSE(rep.pass);
    // The agent's own best reply to z = 0.25 is a = 0.25.
    double best = -1e300;
    std::string arg;
    for (const auto& r : rep.rows)
        if (r.gain.value > best) best = r.gain.value, arg = r.description;
    EXPECT_EQ(arg, constant_deviation(0, v1(0.25)).description);
}

TEST(Incentives, ConstantPayKillsEffort) {
    auto m = builtin_model("holmstrom_milgrom");
    const auto zp = zero_policy(m);
    const auto B = simulate_paths(m, zp.response, TimeGrid(1.0, 20), 200, 1);
    const auto c = synthesize_contract(m, zp, B);
    const auto rep = verify_incentive_compatibility(m, zp, c, default_deviations(m, zp.response), 2000, 5);
    EXPECT_TRUE(rep.pass);
    for (const auto& r : rep.rows) {
        if (r.equilibrium || r.description == constant_deviation(0, v1(0.0)).description) {
            EXPECT_NEAR(r.gain.value, 0.0, 1e-12) << r.description;
        } else {
            EXPECT_LT(r.gain.value, 0.0) << r.description;
        }
    }
}

TEST(Incentives, SymmetricAgentsAgree) {
    auto m = builtin_model("multi_agent_cara", {{"agents", 2}});
    const auto pol = extract_policy(solve(m, SpaceGrid::from_box(m, 9), TimeGrid(1.0, 12), imex()), 8);
    const auto cpol = contract_policy(pol);
    const auto B = simulate_paths(m, cpol.response, TimeGrid(1.0, 10), 100, 1);
    const auto c = synthesize_contract(m, cpol, B);
    std::vector<Deviation> devs;
    for (double a : {0.0, 1.0, 2.0})
        for (int i : {0, 1}) devs.push_back(constant_deviation(i, v1(a)));
    const auto rep = verify_incentive_compatibility(m, cpol, c, devs, 1500, 17);
    for (int q = 0; q < 3; ++q) {
        const auto& a0 = rep.rows[2 + 2 * q];
        const auto& a1 = rep.rows[3 + 2 * q];
        ASSERT_EQ(a0.agent, 0);
        ASSERT_EQ(a1.agent, 1);
        EXPECT_NEAR(a0.gain.value, a1.gain.value, 3.0 * std::hypot(a0.gain.se, a1.gain.se)) << q;
    }
}

TEST(Incentives, RejectsBadDeviationLists) {
    auto m = builtin_model("holmstrom_milgrom");
    const auto zp = zero_policy(m);
    const auto B = simulate_paths(m, zp.response, TimeGrid(1.0, 10), 50, 1);
    const auto c = synthesize_contract(m, zp, B);
    EXPECT_THROW(verify_incentive_compatibility(m, zp, c, {}, 100, 1), ConfigError);
    try {
        verify_incentive_compatibility(m, zp, c, {constant_deviation(0, v1(0.5)), constant_deviation(0, v1(3.0))}, 100, 1);
        FAIL() << "expected rejection";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("deviation 1"), std::string::npos) << e.what();
    }
    Deviation wild{0, "drifts out", [](double t, const Vec&) { return v1(5.0 * t); }, std::nullopt};
    EXPECT_THROW(verify_incentive_compatibility(m, zp, c, {wild}, 100, 1), DomainError);
}

TEST(Incentives, DefaultGrid) {
    auto cf = builtin_model("capponi_frei");
    const auto devs = default_deviations(cf, constant_policy(cf.actions.center()));
    // 9 effort levels + 9 intensity levels; zero is not admissible for lambda.
    EXPECT_EQ(devs.size(), 18u);
    auto hm = builtin_model("holmstrom_milgrom");
    EXPECT_EQ(default_deviations(hm, constant_policy(v1(0.5))).size(), 9u);
}

TEST(Export, JsonAndCsv) {
    auto m = driftless();
    const auto zp = zero_policy(m);
    const auto B = simulate_paths(m, nullptr, TimeGrid(1.0, 5), 3, 5);
    const auto c = synthesize_contract(m, zp, v1(0.3), B);
    const auto j = to_json(c);
    EXPECT_EQ(j["paths"], 3);
    EXPECT_EQ(j["policy_provenance"], "zero");
    std::ostringstream os;
    write_payments_csv(c, os);
    EXPECT_EQ(os.str(), "path,xi_0\n0,0.29999999999999999\n1,0.29999999999999999\n2,0.29999999999999999\n");
    const auto rep = verify_incentive_compatibility(m, zp, c, {constant_deviation(0, v1(1.0))}, 50, 2);
    std::ostringstream dv;
    write_deviations_csv(rep, dv);
    EXPECT_EQ(dv.str().substr(0, dv.str().find('\n')), "agent,deviation,value,stderr,gain,gain_stderr,equilibrium");
    EXPECT_EQ(to_json(rep)["rows"].size(), 2u);
}
