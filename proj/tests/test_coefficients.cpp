#include <doctest.h>

#include "homz/coefficients.hpp"
#include "homz/errors.hpp"

#include <cmath>
#include <numbers>

using namespace homz;

namespace {

Eigen::VectorXd v1(double a) {
    Eigen::VectorXd v(1);
    v << a;
    return v;
}

CoefficientSources scalar_sources(const std::string& sigma, const std::string& b = "0") {
    CoefficientSources s;
    s.sigma = {sigma};
    s.b = {b};
    s.c = {"0"};
    s.e = {"0"};
    s.f = {"0"};
    s.H = {"sin(2*pi*x)"};
    s.constants = {2 * std::numbers::pi, 1.0, 4.0, {}};
    return s;
}

}  // namespace

TEST_CASE("eval_coefficient examples") {
    auto spec = preset("constant");
    CHECK(eval_coefficient(spec, Coefficient::sigma, v1(0.3), v1(0))(0, 0) == 1.0);

    auto harmonic = preset("harmonic-1d");
    CHECK(eval_coefficient(harmonic, Coefficient::a, v1(0.25), v1(0))(0, 0) == doctest::Approx(3.0).epsilon(1e-15));

    auto drift = CoefficientSpec::build(scalar_sources("1", "0.5*sin(2*pi*x)"));
    CHECK(eval_coefficient(drift, Coefficient::b, v1(0.75), v1(0))(0, 0) == doctest::Approx(-0.5).epsilon(1e-15));
}

TEST_CASE("eval_coefficient arity") {
    auto spec = preset("constant");
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(1, 1);
    CHECK_THROWS_AS(eval_coefficient(spec, Coefficient::c, v1(0), v1(0)), UsageError);
    CHECK_THROWS_AS(eval_coefficient(spec, Coefficient::b, v1(0), v1(0), z), UsageError);
    CHECK_NOTHROW(eval_coefficient(spec, Coefficient::f, v1(0), v1(0), z));
    CHECK_THROWS_AS(coefficient_from_name("q"), UsageError);
}

TEST_CASE("preset catalog") {
    auto c = preset("constant");
    CHECK(eval_coefficient(c, Coefficient::a, v1(0.1), v1(2))(0, 0) == 1.0);
    auto h = preset("harmonic-1d");
    CHECK(h.corrector_free());
    for (double x : {0.0, 0.1, 0.37}) {
        double a = eval_coefficient(h, Coefficient::a, v1(x), v1(0))(0, 0);
        CHECK(a == doctest::Approx(2 + std::sin(2 * std::numbers::pi * x)).epsilon(1e-14));
    }
    auto d = preset("divergence-form");
    for (double x : {0.0, 0.2, 0.61}) {
        double b = eval_coefficient(d, Coefficient::b, v1(x), v1(0))(0, 0);
        CHECK(b == doctest::Approx(std::numbers::pi * std::cos(2 * std::numbers::pi * x)).epsilon(1e-14));
    }
    CHECK(preset("quasilinear-demo").depends_on_y(Coefficient::sigma));
    CHECK_FALSE(preset("harmonic-1d").depends_on_y(Coefficient::sigma));
    CHECK_THROWS_AS(preset("nope"), UsageError);
}

TEST_CASE("every preset passes validation with its declared constants") {
    for (const auto& name : preset_names()) {
        CAPTURE(name);
        auto report = validate_assumptions(preset(name), 32);
        for (const auto& c : report.checks) {
            CAPTURE(c.id);
            CAPTURE(c.measured);
            CHECK(c.passed);
        }
    }
}

TEST_CASE("ellipticity check finds the minimum of a") {
    auto spec = CoefficientSpec::build(scalar_sources("sqrt(2 + sin(2*pi*x))"));
    auto report = validate_assumptions(spec, 64);
    const auto& h5 = report.at("H.5");
    CHECK(h5.passed);
    CHECK(h5.measured == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(h5.witness_x[0] == doctest::Approx(0.75));
}

TEST_CASE("degenerate diffusion fails ellipticity near x = 0") {
    auto src = scalar_sources("sin(2*pi*x)");
    src.constants.lambda = 0.1;
    auto report = validate_assumptions(CoefficientSpec::build(src), 64);
    const auto& h5 = report.at("H.5");
    CHECK_FALSE(h5.passed);
    CHECK(h5.measured == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(std::fabs(h5.witness_x[0]) < 1e-12);
    CHECK_FALSE(report.all_passed());
}

TEST_CASE("bound violation and definition errors") {
    auto src = scalar_sources("1", "10");
    auto report = validate_assumptions(CoefficientSpec::build(src), 16);
    CHECK_FALSE(report.at("H.4").passed);

    auto bad = scalar_sources("sqrt(");
    CHECK_THROWS_WITH_AS(CoefficientSpec::build(bad), doctest::Contains("sigma"), DefinitionError);
    auto hy = scalar_sources("1");
    hy.H = {"y"};
    CHECK_THROWS_AS(CoefficientSpec::build(hy), DefinitionError);
    auto wrong_size = scalar_sources("1");
    wrong_size.b = {"0", "0"};
    CHECK_THROWS_AS(CoefficientSpec::build(wrong_size), DefinitionError);
}

TEST_CASE("non-finite coefficient is a numeric error") {
    auto src = scalar_sources("1", "1/(x - 0.5)");
    CHECK_THROWS_AS(validate_assumptions(CoefficientSpec::build(src), 16), NumericError);
}

TEST_CASE("periodicity and symmetry on samples") {
    for (const auto& name : preset_names()) {
        auto spec = preset(name);
        const int P = spec.P();
        Eigen::VectorXd x = Eigen::VectorXd::Constant(P, 0.3141);
        Eigen::VectorXd y = Eigen::VectorXd::Constant(spec.Q(), 0.7);
        auto a = eval_coefficient(spec, Coefficient::a, x, y);
        CHECK((a - a.transpose()).norm() == 0.0);
        for (int i = 0; i < P; ++i) {
            Eigen::VectorXd x1 = x;
            x1[i] += 1.0;
            CHECK((eval_coefficient(spec, Coefficient::a, x1, y) - a).norm() <= 1e-12);
            CHECK((eval_coefficient(spec, Coefficient::H, x1, y) - eval_coefficient(spec, Coefficient::H, x, y))
                      .norm() <= 1e-12);
        }
    }
}
