#include <doctest.h>

#include "homz/errors.hpp"
#include "homz/expression.hpp"

#include <cmath>
#include <numbers>
#include <vector>

using namespace homz;

namespace {

double eval1(const char* src, double x, double y = 0.0, double z = 0.0) {
    auto layout = VariableLayout::coefficient(1, 1);
    auto expr = Expression::compile(src, layout);
    std::vector<double> s = {x, y, z, 0.0};
    return expr.eval(s.data());
}

}  // namespace

TEST_CASE("arithmetic precedence and associativity") {
    CHECK(eval1("1 + 2*3", 0) == 7.0);
    CHECK(eval1("(1 + 2)*3", 0) == 9.0);
    CHECK(eval1("2^3^2", 0) == 512.0);
    CHECK(eval1("-2^2", 0) == -4.0);
    CHECK(eval1("8/4/2", 0) == 1.0);
    CHECK(eval1("1 - 2 - 3", 0) == -4.0);
    CHECK(eval1("2e-3*1000", 0) == doctest::Approx(2.0));
}

TEST_CASE("variables, aliases and functions") {
    CHECK(eval1("sin(2*pi*x)", 0.25) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(eval1("x1 + y1 + z11", 1, 2, 3) == 6.0);
    CHECK(eval1("x + y + z", 1, 2, 3) == 6.0);
    CHECK(eval1("sqrt(abs(-16))", 0) == 4.0);
    CHECK(eval1("max(x, y) + min(x, y)", 1, 5) == 6.0);
    CHECK(eval1("exp(log(3))", 0) == doctest::Approx(3.0));
    CHECK(eval1("x^-2", 2) == 0.25);
    CHECK(eval1("pow(x, 0.5)", 9) == doctest::Approx(3.0));
}

TEST_CASE("two-dimensional layout has no single-letter aliases") {
    auto layout = VariableLayout::coefficient(2, 1);
    CHECK_THROWS_AS(Expression::compile("x", layout), DefinitionError);
    auto e = Expression::compile("x1*x2 + z12", layout);
    CoefficientSlots cs{2, 1, 0};
    std::vector<double> s(cs.count(), 0.0);
    s[cs.x(0)] = 2;
    s[cs.x(1)] = 3;
    s[cs.z(0, 1)] = 1;
    CHECK(e.eval(s.data()) == 7.0);
}

TEST_CASE("dependency query") {
    auto layout = VariableLayout::coefficient(1, 1);
    CoefficientSlots cs{1, 1, 0};
    auto e = Expression::compile("sin(2*pi*x) * y", layout);
    CHECK(e.depends_on(cs.x(0)));
    CHECK(e.depends_on(cs.y(0)));
    CHECK_FALSE(e.depends_on(cs.z(0, 0)));
    CHECK_FALSE(e.depends_on(cs.t()));
}

TEST_CASE("constant folding") {
    auto layout = VariableLayout::coefficient(1, 1);
    auto e = Expression::compile("2*pi*0 + 1", layout);
    CHECK(e.is_constant());
    CHECK(e.eval(nullptr) == 1.0);
    CHECK_FALSE(Expression::compile("x*0", layout).is_constant());
}

TEST_CASE("syntax errors are definition errors") {
    auto layout = VariableLayout::coefficient(1, 1);
    CHECK_THROWS_AS(Expression::compile("", layout), DefinitionError);
    CHECK_THROWS_AS(Expression::compile("1 +", layout), DefinitionError);
    CHECK_THROWS_AS(Expression::compile("(1", layout), DefinitionError);
    CHECK_THROWS_AS(Expression::compile("foo(x)", layout), DefinitionError);
    CHECK_THROWS_AS(Expression::compile("w", layout), DefinitionError);
    CHECK_THROWS_AS(Expression::compile("1 2", layout), DefinitionError);
    CHECK_THROWS_AS(Expression::compile("min(1)", layout), DefinitionError);
}

TEST_CASE("deep expressions use a heap stack") {
    std::string src = "x";
    for (int i = 0; i < 40; ++i) src = "(1 + " + src + ")";
    std::string deep = "x";
    for (int i = 0; i < 40; ++i) deep = "x + (" + deep + ")";
    CHECK(eval1(src.c_str(), 1.0) == 41.0);
    CHECK(eval1(deep.c_str(), 1.0) == 41.0);
}
