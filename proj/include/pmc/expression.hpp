#pragma once
// Small infix expression language used by config-file models.
//
//   expr    := term   (('+' | '-') term)*
//   term    := unary  (('*' | '/') unary)*
//   unary   := '-' unary | power
//   power   := primary ('^' unary)?
//   primary := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//
// Identifiers: t, e, y, x<i>, a<i>, k<i> (zero-based) plus named constants
// bound at compile time. Functions: exp log sqrt abs tanh min max pow.

#include <cctype>
#include <cmath>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pmc/error.hpp"

namespace pmc {

/// Variable bindings for one evaluation. Unused spans may be empty.
struct ExprArgs {
    double t = 0.0;
    double e = 0.0;
    double y = 0.0;
    std::span<const double> x{};
    std::span<const double> a{};
    std::span<const double> k{};
};

class Expression {
public:
    Expression() = default;

    static Expression parse(const std::string& text,
                            const std::map<std::string, double>& constants = {}) {
        Parser p{text, 0, constants};
        Expression ex;
        ex.text_ = text;
        ex.root_ = p.parse_expr();
        p.skip_ws();
        if (p.pos != text.size())
            throw ConfigError("expression '" + text + "': unexpected '" +
                              text.substr(p.pos) + "'");
        ex.collect(*ex.root_);
        return ex;
    }

    static Expression constant(double v) {
        Expression ex;
        ex.text_ = std::to_string(v);
        ex.root_ = std::make_shared<Node>();
        ex.root_->kind = Kind::number;
        ex.root_->value = v;
        return ex;
    }

    double operator()(const ExprArgs& args) const {
        if (!root_) throw ModelError("evaluating an empty expression");
        return eval(*root_, args);
    }

    const std::string& text() const { return text_; }
    bool uses_t() const { return uses_t_; }
    int max_x_index() const { return max_x_; }
    int max_a_index() const { return max_a_; }
    int max_k_index() const { return max_k_; }

private:
    enum class Kind { number, var_t, var_e, var_y, var_x, var_a, var_k, neg, add, sub, mul, div, pow, call };

    struct Node {
        Kind kind = Kind::number;
        double value = 0.0;
        int index = 0;
        std::string fn;
        std::vector<std::shared_ptr<Node>> kids;
    };
    using NodePtr = std::shared_ptr<Node>;

    struct Parser {
        const std::string& s;
        std::size_t pos;
        const std::map<std::string, double>& constants;

        void skip_ws() {
            while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
        }
        bool accept(char c) {
            skip_ws();
            if (pos < s.size() && s[pos] == c) {
                ++pos;
                return true;
            }
            return false;
        }
        [[noreturn]] void fail(const std::string& what) const {
            throw ConfigError("expression '" + s + "': " + what + " at offset " + std::to_string(pos));
        }
        static NodePtr binary(Kind k, NodePtr l, NodePtr r) {
            auto n = std::make_shared<Node>();
            n->kind = k;
            n->kids = {std::move(l), std::move(r)};
            return n;
        }
        NodePtr parse_expr() {
            auto lhs = parse_term();
            for (;;) {
                if (accept('+')) lhs = binary(Kind::add, lhs, parse_term());
                else if (accept('-')) lhs = binary(Kind::sub, lhs, parse_term());
                else return lhs;
            }
        }
        NodePtr parse_term() {
            auto lhs = parse_unary();
            for (;;) {
                if (accept('*')) lhs = binary(Kind::mul, lhs, parse_unary());
                else if (accept('/')) lhs = binary(Kind::div, lhs, parse_unary());
                else return lhs;
            }
        }
        NodePtr parse_unary() {
            if (accept('-')) {
                auto n = std::make_shared<Node>();
                n->kind = Kind::neg;
                n->kids = {parse_unary()};
                return n;
            }
            if (accept('+')) return parse_unary();
            return parse_power();
        }
        NodePtr parse_power() {
            auto base = parse_primary();
            if (accept('^')) return binary(Kind::pow, base, parse_unary());
            return base;
        }
        NodePtr parse_primary() {
            skip_ws();
            if (pos >= s.size()) fail("unexpected end");
            char c = s[pos];
            if (c == '(') {
                ++pos;
                auto inner = parse_expr();
                if (!accept(')')) fail("missing ')'");
                return inner;
            }
            if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
                std::size_t used = 0;
                double v = 0.0;
                try {
                    v = std::stod(s.substr(pos), &used);
                } catch (const std::exception&) {
                    fail("bad number");
                }
                pos += used;
                auto n = std::make_shared<Node>();
                n->value = v;
                return n;
            }
            if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
                std::size_t start = pos;
                while (pos < s.size() &&
                       (std::isalnum(static_cast<unsigned char>(s[pos])) || s[pos] == '_'))
                    ++pos;
                std::string id = s.substr(start, pos - start);
                if (accept('(')) return parse_call(id);
                return make_ident(id);
            }
            fail(std::string("unexpected '") + c + "'");
        }
        NodePtr parse_call(const std::string& fn) {
            static const std::map<std::string, int> arity{
                {"exp", 1}, {"log", 1}, {"sqrt", 1}, {"abs", 1}, {"tanh", 1},
                {"min", 2}, {"max", 2}, {"pow", 2}};
            auto it = arity.find(fn);
            if (it == arity.end()) fail("unknown function '" + fn + "'");
            auto n = std::make_shared<Node>();
            n->kind = Kind::call;
            n->fn = fn;
            n->kids.push_back(parse_expr());
            while (accept(',')) n->kids.push_back(parse_expr());
            if (!accept(')')) fail("missing ')' after arguments of " + fn);
            if (static_cast<int>(n->kids.size()) != it->second)
                fail("function '" + fn + "' takes " + std::to_string(it->second) + " argument(s)");
            return n;
        }
        NodePtr make_ident(const std::string& id) {
            auto n = std::make_shared<Node>();
            if (id == "t") { n->kind = Kind::var_t; return n; }
            if (id == "e") { n->kind = Kind::var_e; return n; }
            if (id == "y") { n->kind = Kind::var_y; return n; }
            if (id.size() > 1 && (id[0] == 'x' || id[0] == 'a' || id[0] == 'k')) {
                bool digits = true;
                for (std::size_t i = 1; i < id.size(); ++i)
                    digits = digits && std::isdigit(static_cast<unsigned char>(id[i]));
                if (digits) {
                    n->kind = id[0] == 'x' ? Kind::var_x : id[0] == 'a' ? Kind::var_a : Kind::var_k;
                    n->index = std::stoi(id.substr(1));
                    return n;
                }
            }
            auto c = constants.find(id);
            if (c == constants.end()) fail("unknown identifier '" + id + "'");
            n->value = c->second;
            return n;
        }
    };

    static double at(std::span<const double> v, int i, char name) {
        if (i >= static_cast<int>(v.size()))
            throw ModelError(std::string("expression variable ") + name + std::to_string(i) +
                             " out of range (size " + std::to_string(v.size()) + ")");
        return v[static_cast<std::size_t>(i)];
    }

    static double eval(const Node& n, const ExprArgs& a) {
        switch (n.kind) {
        case Kind::number: return n.value;
        case Kind::var_t: return a.t;
        case Kind::var_e: return a.e;
        case Kind::var_y: return a.y;
        case Kind::var_x: return at(a.x, n.index, 'x');
        case Kind::var_a: return at(a.a, n.index, 'a');
        case Kind::var_k: return at(a.k, n.index, 'k');
        case Kind::neg: return -eval(*n.kids[0], a);
        case Kind::add: return eval(*n.kids[0], a) + eval(*n.kids[1], a);
        case Kind::sub: return eval(*n.kids[0], a) - eval(*n.kids[1], a);
        case Kind::mul: return eval(*n.kids[0], a) * eval(*n.kids[1], a);
        case Kind::div: return eval(*n.kids[0], a) / eval(*n.kids[1], a);
        case Kind::pow: return std::pow(eval(*n.kids[0], a), eval(*n.kids[1], a));
        case Kind::call: {
            double u = eval(*n.kids[0], a);
            if (n.fn == "exp") return std::exp(u);
            if (n.fn == "log") return std::log(u);
            if (n.fn == "sqrt") return std::sqrt(u);
            if (n.fn == "abs") return std::abs(u);
            if (n.fn == "tanh") return std::tanh(u);
            double w = eval(*n.kids[1], a);
            if (n.fn == "min") return std::min(u, w);
            if (n.fn == "max") return std::max(u, w);
            return std::pow(u, w);
        }
        }
        return 0.0;
    }

    void collect(const Node& n) {
        if (n.kind == Kind::var_t) uses_t_ = true;
        if (n.kind == Kind::var_x) max_x_ = std::max(max_x_, n.index);
        if (n.kind == Kind::var_a) max_a_ = std::max(max_a_, n.index);
        if (n.kind == Kind::var_k) max_k_ = std::max(max_k_, n.index);
        for (const auto& kid : n.kids) collect(*kid);
    }

    std::string text_;
    NodePtr root_;
    bool uses_t_ = false;
    int max_x_ = -1;
    int max_a_ = -1;
    int max_k_ = -1;
};

} // namespace pmc
