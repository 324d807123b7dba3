#pragma once
// Canonical JSON form of a model and construction from config text.
//
// A model description is either
//   {"builtin": "<name>", "params": {...}}
// or {"spec": {...}} with coefficient expressions; see docs/config_schema.md.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmc/builtin.hpp"
#include "pmc/expression.hpp"
#include "pmc/model.hpp"

namespace pmc {

using json = nlohmann::json;

namespace detail {

class SpecReader {
public:
    SpecReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    void allow(std::initializer_list<const char*> keys) const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            bool ok = false;
            for (const char* k : keys) ok = ok || it.key() == k;
            if (!ok) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
        }
    }
    bool has(const std::string& key) const { return j_.contains(key); }
    const json& at(const std::string& key) const {
        if (!j_.contains(key)) throw ConfigError("missing required key '" + path_ + "." + key + "'");
        return j_.at(key);
    }
    std::string where(const std::string& key) const { return path_ + "." + key; }

    double number(const std::string& key) const {
        const json& v = at(key);
        if (!v.is_number()) throw ConfigError(where(key) + ": expected a number");
        return v.get<double>();
    }
    double number(const std::string& key, double fallback) const { return has(key) ? number(key) : fallback; }
    int integer(const std::string& key) const {
        const json& v = at(key);
        if (!v.is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
        return v.get<int>();
    }
    bool boolean(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const json& v = at(key);
        if (!v.is_boolean()) throw ConfigError(where(key) + ": expected true/false");
        return v.get<bool>();
    }
    std::string text(const std::string& key, const std::string& fallback) const {
        if (!has(key)) return fallback;
        const json& v = at(key);
        if (!v.is_string()) throw ConfigError(where(key) + ": expected a string");
        return v.get<std::string>();
    }
    Vec vec(const std::string& key, Eigen::Index n) const {
        const json& v = at(key);
        if (!v.is_array() || static_cast<Eigen::Index>(v.size()) != n)
            throw ConfigError(where(key) + ": expected an array of " + std::to_string(n) + " numbers");
        Vec out(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (!v[static_cast<std::size_t>(i)].is_number()) throw ConfigError(where(key) + ": expected numbers");
            out[i] = v[static_cast<std::size_t>(i)].get<double>();
        }
        return out;
    }

private:
    const json& j_;
    std::string path_;
};

inline std::span<const double> sp(const Vec& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

struct Compiler {
    std::map<std::string, double> constants;
    int D = 0, A = 0, N = 0;

    Expression operator()(const json& j, const std::string& where) const {
        std::string text;
        if (j.is_number()) return Expression::constant(j.get<double>());
        if (!j.is_string()) throw ConfigError(where + ": expected an expression string or number");
        text = j.get<std::string>();
        Expression ex = Expression::parse(text, constants);
        if (ex.max_x_index() >= D) throw ConfigError(where + ": x" + std::to_string(ex.max_x_index()) + " exceeds state dimension " + std::to_string(D));
        if (ex.max_a_index() >= A) throw ConfigError(where + ": a" + std::to_string(ex.max_a_index()) + " exceeds action dimension " + std::to_string(A));
        if (ex.max_k_index() >= N) throw ConfigError(where + ": k" + std::to_string(ex.max_k_index()) + " exceeds agent count " + std::to_string(N));
        return ex;
    }
    Expression operator()(const SpecReader& r, const std::string& key, const std::string& fallback) const {
        if (!r.has(key)) return (*this)(json(fallback), r.where(key));
        return (*this)(r.at(key), r.where(key));
    }
};

inline void set_utility(AgentSpec& ag, const std::string& kind, double ra, const std::string& where) {
    if (kind == "exponential") {
        if (!(ra > 0.0)) throw ConfigError(where + ": exponential utility needs risk_aversion > 0");
        ag.terminal_utility = [ra](double y) { return -std::exp(-ra * y); };
        ag.terminal_utility_inverse = [ra](double u) { return -std::log(-u) / ra; };
    } else if (kind == "linear") {
        ag.terminal_utility = [](double y) { return y; };
        ag.terminal_utility_inverse = [](double u) { return u; };
    } else if (kind == "log") {
        ag.terminal_utility = [](double y) { return std::log(y); };
        ag.terminal_utility_inverse = [](double u) { return std::exp(u); };
        ag.utility_probes = {0.25, 0.5, 1.0, 2.0, 4.0};
    } else {
        throw ConfigError(where + ": unknown utility '" + kind + "' (exponential, linear, log)");
    }
}

inline ModelSpec model_from_spec(const json& spec) {
    SpecReader r(spec, "model.spec");
    r.allow({"name", "agents", "block_dim", "noise_dim", "horizon", "x0", "state_box", "constants", "sigma", "drift",
             "actions", "jumps", "agent_specs", "principal"});
    ModelSpec m;
    m.name = r.text("name", "custom");
    m.agents = r.integer("agents");
    m.block_dim = r.integer("block_dim");
    m.noise_dim = r.integer("noise_dim");
    if (m.agents < 1 || m.block_dim < 1 || m.noise_dim < 1)
        throw ConfigError("model.spec: agents, block_dim and noise_dim must be positive");
    m.horizon = r.number("horizon");
    const int N = m.agents, D = m.state_dim(), n = m.noise_dim;
    m.x0 = r.vec("x0", D);
    {
        SpecReader box(r.at("state_box"), r.where("state_box"));
        box.allow({"lo", "hi"});
        m.box_lo = box.vec("lo", D);
        m.box_hi = box.vec("hi", D);
    }

    Compiler cc;
    cc.N = N;
    cc.D = D;
    if (r.has("constants")) {
        const json& c = r.at("constants");
        if (!c.is_object()) throw ConfigError("model.spec.constants: expected an object");
        for (auto it = c.begin(); it != c.end(); ++it) {
            if (!it->is_number()) throw ConfigError("model.spec.constants." + it.key() + ": expected a number");
            cc.constants[it.key()] = it->get<double>();
        }
    }

    const json& acts = r.at("actions");
    if (!acts.is_array() || static_cast<int>(acts.size()) != N)
        throw ConfigError("model.spec.actions: expected one {lo, hi} box per agent");
    for (int i = 0; i < N; ++i) {
        SpecReader box(acts[static_cast<std::size_t>(i)], "model.spec.actions[" + std::to_string(i) + "]");
        box.allow({"lo", "hi"});
        const json& lo = box.at("lo");
        if (!lo.is_array()) throw ConfigError(box.where("lo") + ": expected an array");
        m.actions.lower.push_back(box.vec("lo", static_cast<Eigen::Index>(lo.size())));
        m.actions.upper.push_back(box.vec("hi", static_cast<Eigen::Index>(lo.size())));
    }
    cc.A = m.actions.total_dim();

    // Sigma: D rows of n expressions.
    const json& sj = r.at("sigma");
    if (!sj.is_array() || static_cast<int>(sj.size()) != D)
        throw ConfigError("model.spec.sigma: expected " + std::to_string(D) + " rows");
    std::vector<Expression> sig;
    for (int row = 0; row < D; ++row) {
        const json& rj = sj[static_cast<std::size_t>(row)];
        if (!rj.is_array() || static_cast<int>(rj.size()) != n)
            throw ConfigError("model.spec.sigma[" + std::to_string(row) + "]: expected " + std::to_string(n) + " entries");
        for (int c = 0; c < n; ++c)
            sig.push_back(cc(rj[static_cast<std::size_t>(c)], "model.spec.sigma[" + std::to_string(row) + "][" + std::to_string(c) + "]"));
    }
    m.sigma = [sig, D, n](double t, const Vec& x) {
        Mat S(D, n);
        ExprArgs ea;
        ea.t = t;
        ea.x = sp(x);
        for (int row = 0; row < D; ++row)
            for (int c = 0; c < n; ++c) S(row, c) = sig[static_cast<std::size_t>(row * n + c)](ea);
        return S;
    };

    const json& dj = r.at("drift");
    if (!dj.is_array() || static_cast<int>(dj.size()) != n)
        throw ConfigError("model.spec.drift: expected " + std::to_string(n) + " expressions");
    std::vector<Expression> drift;
    for (int c = 0; c < n; ++c) drift.push_back(cc(dj[static_cast<std::size_t>(c)], "model.spec.drift[" + std::to_string(c) + "]"));
    m.drift = [drift](double t, const Vec& x, const Vec& a) {
        Vec b(static_cast<Eigen::Index>(drift.size()));
        ExprArgs ea;
        ea.t = t;
        ea.x = sp(x);
        ea.a = sp(a);
        for (std::size_t c = 0; c < drift.size(); ++c) b[static_cast<Eigen::Index>(c)] = drift[c](ea);
        return b;
    };

    if (r.has("jumps")) {
        const json& jj = r.at("jumps");
        if (!jj.is_array() || static_cast<int>(jj.size()) != N)
            throw ConfigError("model.spec.jumps: expected one entry per agent");
        for (int i = 0; i < N; ++i) {
            const std::string base = "model.spec.jumps[" + std::to_string(i) + "]";
            SpecReader jr(jj[static_cast<std::size_t>(i)], base);
            jr.allow({"atoms", "size", "intensity"});
            JumpSpec js;
            const json& atoms = jr.has("atoms") ? jr.at("atoms") : json::array();
            if (!atoms.is_array()) throw ConfigError(base + ".atoms: expected an array");
            for (std::size_t j = 0; j < atoms.size(); ++j) {
                SpecReader ar(atoms[j], base + ".atoms[" + std::to_string(j) + "]");
                ar.allow({"mark", "weight", "inert"});
                js.atoms.push_back({ar.number("mark"), ar.number("weight"), ar.boolean("inert", false)});
            }
            std::vector<Expression> size;
            if (js.active()) {
                const json& szj = jr.at("size");
                if (!szj.is_array() || static_cast<int>(szj.size()) != m.block_dim)
                    throw ConfigError(base + ".size: expected " + std::to_string(m.block_dim) + " expressions");
                for (std::size_t c = 0; c < szj.size(); ++c) size.push_back(cc(szj[c], base + ".size[" + std::to_string(c) + "]"));
            } else {
                size.push_back(Expression::constant(0.0));
            }
            Expression lam = cc(jr, "intensity", "1");
            js.size = [size](double t, const Vec& x, double e) {
                Vec v(static_cast<Eigen::Index>(size.size()));
                ExprArgs ea;
                ea.t = t;
                ea.e = e;
                ea.x = sp(x);
                for (std::size_t c = 0; c < size.size(); ++c) v[static_cast<Eigen::Index>(c)] = size[c](ea);
                return v;
            };
            js.intensity = [lam](double t, const Vec& x, const Vec& a, double e) {
                ExprArgs ea;
                ea.t = t;
                ea.e = e;
                ea.x = sp(x);
                ea.a = sp(a);
                return lam(ea);
            };
            m.jumps.push_back(std::move(js));
        }
    } else {
        for (int i = 0; i < N; ++i) m.jumps.push_back(no_jumps());
    }

    const json& agj = r.at("agent_specs");
    if (!agj.is_array() || static_cast<int>(agj.size()) != N)
        throw ConfigError("model.spec.agent_specs: expected one entry per agent");
    for (int i = 0; i < N; ++i) {
        const std::string base = "model.spec.agent_specs[" + std::to_string(i) + "]";
        SpecReader ar(agj[static_cast<std::size_t>(i)], base);
        ar.allow({"cara", "risk_aversion", "discount", "cost", "flow_utility", "utility", "reservation"});
        AgentSpec ag;
        ag.cara = ar.boolean("cara", false);
        ag.risk_aversion = ar.number("risk_aversion", 0.0);
        ag.reservation = ar.number("reservation");
        Expression rho = cc(ar, "discount", "0");
        Expression cost = cc(ar, "cost", "0");
        Expression ua = cc(ar, "flow_utility", "0");
        ag.discount = [rho](double t, const Vec& x, const Vec& k, const Vec& a) {
            ExprArgs ea;
            ea.t = t;
            ea.x = sp(x);
            ea.k = sp(k);
            ea.a = sp(a);
            return rho(ea);
        };
        ag.cost = [cost](double t, const Vec& x, const Vec& a) {
            ExprArgs ea;
            ea.t = t;
            ea.x = sp(x);
            ea.a = sp(a);
            return cost(ea);
        };
        ag.flow_utility = [ua](const Vec& k) {
            ExprArgs ea;
            ea.k = sp(k);
            return ua(ea);
        };
        set_utility(ag, ar.text("utility", ag.cara ? "exponential" : "linear"), ag.risk_aversion, base);
        m.agent.push_back(std::move(ag));
    }

    {
        SpecReader pr(r.at("principal"), "model.spec.principal");
        pr.allow({"liquidation", "risk_neutral", "flow_disutility", "discount", "utility", "risk_aversion"});
        Expression liq = cc(pr.at("liquidation"), pr.where("liquidation"));
        std::string sum_k = "0";
        for (int i = 0; i < N; ++i) sum_k += " + k" + std::to_string(i);
        Expression up = cc(pr, "flow_disutility", sum_k);
        Expression disc = cc(pr, "discount", "0");
        m.principal.risk_neutral = pr.boolean("risk_neutral", true);
        m.principal.liquidation = [liq](const Vec& x) {
            ExprArgs ea;
            ea.x = sp(x);
            return liq(ea);
        };
        m.principal.flow_disutility = [up](const Vec& k) {
            ExprArgs ea;
            ea.k = sp(k);
            return up(ea);
        };
        m.principal.discount = [disc](double t, const Vec& x) {
            ExprArgs ea;
            ea.t = t;
            ea.x = sp(x);
            return disc(ea);
        };
        const std::string ukind = pr.text("utility", "identity");
        if (ukind == "identity") {
            m.principal.terminal_utility = [](double v) { return v; };
        } else if (ukind == "exponential") {
            const double rp = pr.number("risk_aversion");
            if (!(rp > 0.0)) throw ConfigError("model.spec.principal.risk_aversion must be positive");
            m.principal.terminal_utility = [rp](double v) { return -std::exp(-rp * v); };
        } else {
            throw ConfigError("model.spec.principal.utility: unknown '" + ukind + "' (identity, exponential)");
        }
    }
    m.source = {{"spec", spec}};
    return m;
}

} // namespace detail

/// Canonical serialization: the model's source description.
inline json model_to_json(const ModelSpec& m) { return m.source; }

inline ModelSpec model_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("model: expected an object");
    if (j.contains("builtin")) {
        for (auto it = j.begin(); it != j.end(); ++it)
            if (it.key() != "builtin" && it.key() != "params")
                throw ConfigError("model: unknown key '" + it.key() + "'");
        if (!j.at("builtin").is_string()) throw ConfigError("model.builtin: expected a string");
        Params p;
        if (j.contains("params")) {
            const json& pj = j.at("params");
            if (!pj.is_object()) throw ConfigError("model.params: expected an object");
            for (auto it = pj.begin(); it != pj.end(); ++it) {
                if (!it->is_number()) throw ConfigError("model.params." + it.key() + ": expected a number");
                p[it.key()] = it->get<double>();
            }
        }
        return builtin_model(j.at("builtin").get<std::string>(), p);
    }
    if (j.contains("spec")) {
        for (auto it = j.begin(); it != j.end(); ++it)
            if (it.key() != "spec") throw ConfigError("model: unknown key '" + it.key() + "'");
        return detail::model_from_spec(j.at("spec"));
    }
    throw ConfigError("model: need either 'builtin' or 'spec'");
}

inline std::string model_to_text(const ModelSpec& m) { return model_to_json(m).dump(2); }

inline ModelSpec model_from_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("model text is not valid JSON: ") + e.what());
    }
    return model_from_json(j);
}

} // namespace pmc
