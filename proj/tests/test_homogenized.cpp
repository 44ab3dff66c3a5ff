#include <doctest.h>

#include "homz/errors.hpp"
#include "homz/homogenized.hpp"

#include <cmath>
#include <numbers>

using namespace homz;

namespace {

constexpr double kPi = std::numbers::pi;

CoefficientSpec spec_1d(const std::string& sigma, const std::string& b, const std::string& c, const std::string& e,
                        const std::string& f) {
    CoefficientSources s;
    s.sigma = {sigma};
    s.b = {b};
    s.c = {c};
    s.e = {e};
    s.f = {f};
    s.H = {"sin(2*pi*x)"};
    s.constants = {1.0, 0.5, 10.0, {}};
    return CoefficientSpec::build(s);
}

Eigen::VectorXd vec1(double v) { return Eigen::VectorXd::Constant(1, v); }
Eigen::MatrixXd mat1(double v) { return Eigen::MatrixXd::Constant(1, 1, v); }

/// ∫_0^1 g by the composite midpoint rule on 20000 cells.
template <class F>
double midpoint(F&& g) {
    const int n = 20000;
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += g((i + 0.5) / n);
    return s / n;
}

}  // namespace

TEST_CASE("pointwise integrands") {
    auto g = make_grid(1, 64);
    SUBCASE("corrector-free coefficients reproduce c, f, a") {
        auto spec = spec_1d("sqrt(2 + sin(2*pi*x))", "0", "z + cos(2*pi*x)", "0", "y*z + sin(2*pi*x)");
        auto cell = solve_cell(spec, vec1(0.7), g);
        Eigen::VectorXd x = vec1(0.3);
        auto r = pointwise_integrands(spec, cell, x, mat1(1.5));
        CHECK(r.u[0] == doctest::Approx(1.5 + std::cos(2 * kPi * 0.3)).epsilon(1e-12));
        CHECK(r.v[0] == doctest::Approx(0.7 * 1.5 + std::sin(2 * kPi * 0.3)).epsilon(1e-12));
        CHECK(r.alpha(0, 0) == doctest::Approx(2 + std::sin(2 * kPi * 0.3)).epsilon(1e-12));
    }
    SUBCASE("zero z with vanishing c, f, e") {
        auto spec = spec_1d("sqrt(2 + sin(2*pi*x))", "pi*cos(2*pi*x)", "0", "0", "0");
        auto cell = solve_cell(spec, vec1(0.0), g);
        auto r = pointwise_integrands(spec, cell, vec1(0.41), mat1(0.0));
        CHECK(std::fabs(r.u[0]) < 1e-14);
        CHECK(std::fabs(r.v[0]) < 1e-14);
    }
    SUBCASE("alpha against a hand chain rule") {
        for (const char* name : {"harmonic-1d", "divergence-form"}) {
            auto spec = preset(name);
            auto cell = solve_cell(spec, vec1(0.0), g);
            Eigen::VectorXd db = diff_matrix(g, 0, 1) * cell.bhat.values.col(0);
            double a0 = 2 + std::sin(0.0);
            double hand = (1 + db[0]) * (1 + db[0]) * a0;
            auto r = pointwise_integrands(spec, cell, vec1(0.0), mat1(0.0));
            CAPTURE(name);
            CHECK(std::fabs(r.alpha(0, 0) - hand) < 1e-8);
        }
    }
    SUBCASE("missing derivative fields are rejected") {
        auto spec = preset("harmonic-1d");
        CellSolution partial;
        auto c = solve_correctors(spec, vec1(0.0), g, CenteringMode::strict);
        partial.y = vec1(0.0);
        partial.p = c.p;
        partial.grad_x_bhat = c.grad_x_bhat;
        CHECK_THROWS_AS(pointwise_integrands(spec, partial, vec1(0.0), mat1(0.0)), UsageError);
    }
}

TEST_CASE("averaged coefficients") {
    auto g = make_grid(1, 64);
    SUBCASE("harmonic mean") {
        auto cell = solve_cell(preset("harmonic-1d"), vec1(0.0), g);
        auto avg = average_coefficients(preset("harmonic-1d"), cell, mat1(0.0));
        CHECK(avg.alpha_bar(0, 0) == doctest::Approx(std::sqrt(3.0)).epsilon(1e-10));
        CHECK(average_alpha(preset("harmonic-1d"), cell)(0, 0) == doctest::Approx(1.7320508).epsilon(1e-7));
    }
    SUBCASE("constant diffusion") {
        auto spec = spec_1d("sqrt(2.5)", "0", "0", "0", "0");
        auto avg = average_coefficients(spec, solve_cell(spec, vec1(0.0), g), mat1(0.0));
        CHECK(avg.alpha_bar(0, 0) == doctest::Approx(2.5).epsilon(1e-12));
    }
    SUBCASE("mean of a cosine driver") {
        auto spec = spec_1d("1", "0", "0", "0", "cos(2*pi*x)");
        auto avg = average_coefficients(spec, solve_cell(spec, vec1(0.0), g), mat1(0.8));
        CHECK(std::fabs(avg.v_bar[0]) < 1e-12);
    }
    SUBCASE("one-dimensional harmonic-mean law") {
        const char* sigmas[] = {"sqrt(2 + sin(2*pi*x))", "sqrt(3 + cos(4*pi*x))", "exp(0.5*sin(2*pi*x))"};
        double (*as[])(double) = {[](double x) { return 2 + std::sin(2 * kPi * x); },
                                  [](double x) { return 3 + std::cos(4 * kPi * x); },
                                  [](double x) { return std::exp(std::sin(2 * kPi * x)); }};
        for (int i = 0; i < 3; ++i) {
            auto spec = spec_1d(sigmas[i], "0", "0", "0", "0");
            double expected = 1.0 / midpoint([&](double x) { return 1.0 / as[i](x); });
            auto avg = average_coefficients(spec, solve_cell(spec, vec1(0.0), g), mat1(0.0));
            CHECK(std::fabs(avg.alpha_bar(0, 0) - expected) < 1e-8);
        }
    }
    SUBCASE("corrector-free reduction to plain p-averages") {
        auto spec = spec_1d("sqrt(2 + sin(2*pi*x))", "0", "z*cos(2*pi*x) + y", "0", "z*z*sin(2*pi*x)");
        const double y = 0.3, z = 1.7;
        auto cell = solve_cell(spec, vec1(y), g);
        auto avg = average_coefficients(spec, cell, mat1(z));
        // p = √3/a, so ∫c p and ∫f p reduce to one-dimensional integrals.
        auto p = [](double x) { return std::sqrt(3.0) / (2 + std::sin(2 * kPi * x)); };
        double ubar = midpoint([&](double x) { return (z * std::cos(2 * kPi * x) + y) * p(x); });
        double vbar = midpoint([&](double x) { return z * z * std::sin(2 * kPi * x) * p(x); });
        CHECK(std::fabs(avg.u_bar[0] - ubar) < 1e-10);
        CHECK(std::fabs(avg.v_bar[0] - vbar) < 1e-10);
        CHECK(std::fabs(avg.alpha_bar(0, 0) - std::sqrt(3.0)) < 1e-10);
    }
    SUBCASE("affine in z for affine c and f") {
        auto spec = preset("quasilinear-demo");
        auto cell = solve_cell(spec, vec1(0.4), g);
        auto a0 = average_coefficients(spec, cell, mat1(-1.0));
        auto a1 = average_coefficients(spec, cell, mat1(0.5));
        auto a2 = average_coefficients(spec, cell, mat1(2.0));
        CHECK(std::fabs(a1.u_bar[0] - 0.5 * (a0.u_bar[0] + a2.u_bar[0])) < 1e-9);
        CHECK(std::fabs(a1.v_bar[0] - 0.5 * (a0.v_bar[0] + a2.v_bar[0])) < 1e-9);
    }
}

TEST_CASE("homogenized table") {
    auto g = make_grid(1, 64);
    SUBCASE("single node") {
        auto spec = preset("quasilinear-demo");
        auto cells = build_cell_table(spec, {{0.2, 0.2}}, 5, g);
        auto table = build_homogenized_table(spec, cells, {{0.7, 0.7}}, 3);
        auto direct = average_coefficients(spec, cells.node(0), mat1(0.7));
        CHECK(table.alpha(vec1(0.2))(0, 0) == doctest::Approx(direct.alpha_bar(0, 0)).epsilon(1e-14));
        CHECK(table.u_bar(vec1(0.2), mat1(0.7))[0] == doctest::Approx(direct.u_bar[0]).epsilon(1e-14));
        CHECK(table.v_bar(vec1(0.2), mat1(0.7))[0] == doctest::Approx(direct.v_bar[0]).epsilon(1e-14));
    }
    SUBCASE("linear c gives a z-linear drift") {
        auto spec = spec_1d("sqrt(2 + sin(2*pi*x))", "0", "z", "0", "0");
        auto cells = build_cell_table(spec, {{0.0, 0.0}}, 1, g);
        auto table = build_homogenized_table(spec, cells, {{-2.0, 2.0}}, 5);
        const auto& u = table.u_values();
        for (std::size_t i = 1; i + 1 < u.size(); ++i) CHECK(std::fabs(u[i] - 0.5 * (u[i - 1] + u[i + 1])) < 1e-9);
    }
    SUBCASE("midpoint interpolation and square roots on presets") {
        for (const char* name : {"harmonic-1d", "divergence-form", "quasilinear-demo", "separable-drift"}) {
            auto spec = preset(name);
            auto cells = build_cell_table(spec, {{-2.0, 2.0}}, 9, g);
            auto table = build_homogenized_table(spec, cells, {{-3.0, 3.0}}, 7);
            CAPTURE(name);
            for (std::size_t iy = 0; iy < table.y_grid().size(); ++iy) {
                Eigen::MatrixXd s = symmetric_sqrt(table.alpha_node(iy));
                CHECK((s * s - table.alpha_node(iy)).cwiseAbs().maxCoeff() < 1e-10);
            }
            const double y = cells.y_grid().axis(0).at(4), z = 0.5;
            auto direct = average_coefficients(spec, cells.node(4), mat1(z));
            CHECK(std::fabs(table.u_bar(vec1(y), mat1(z))[0] - direct.u_bar[0]) <= 1e-3);
            CHECK(std::fabs(table.v_bar(vec1(y), mat1(z))[0] - direct.v_bar[0]) <= 1e-3);
            CHECK(table.extrapolations() == 0);
            table.alpha(vec1(9.0));
            CHECK(table.extrapolations() == 1);
        }
    }
}

TEST_CASE("ellipticity check") {
    auto g = make_grid(1, 32);
    auto unit = spec_1d("1", "0", "0", "0", "0");
    auto t1 = build_homogenized_table(unit, build_cell_table(unit, {{-1.0, 1.0}}, 3, g), {{-1.0, 1.0}}, 2);
    auto r1 = check_ellipticity(t1, 1.0);
    CHECK(r1.passed);
    CHECK(r1.min_eigenvalue == doctest::Approx(1.0).epsilon(1e-12));
    auto spec = preset("harmonic-1d");
    auto t2 = build_homogenized_table(spec, build_cell_table(spec, {{-1.0, 1.0}}, 3, g), {{-1.0, 1.0}}, 2);
    CHECK(check_ellipticity(t2, 1.0).min_eigenvalue == doctest::Approx(std::sqrt(3.0)).epsilon(1e-9));
    t2.set_alpha_node(2, Eigen::MatrixXd::Zero(1, 1));
    auto r3 = check_ellipticity(t2, 1.0);
    CHECK_FALSE(r3.passed);
    CHECK(r3.argmin_y[0] == doctest::Approx(1.0));
    CHECK(r3.message.find("y=(1)") != std::string::npos);
}

TEST_CASE("two-dimensional averages") {
    auto spec = preset("harmonic-2d");
    auto g = make_grid(2, 16);
    auto cell = solve_cell(spec, vec1(0.0), g);
    auto avg = average_coefficients(spec, cell, Eigen::MatrixXd::Zero(1, 2));
    // Separable diagonal diffusion: each axis homogenizes to the harmonic mean √3.
    CHECK(avg.alpha_bar(0, 0) == doctest::Approx(std::sqrt(3.0)).epsilon(1e-9));
    CHECK(avg.alpha_bar(1, 1) == doctest::Approx(std::sqrt(3.0)).epsilon(1e-9));
    CHECK(std::fabs(avg.alpha_bar(0, 1)) < 1e-10);
}

TEST_CASE("auxiliary diffusion alpha_n") {
    auto g = make_grid(1, 32);
    SUBCASE("y-independent density") {
        auto spec = preset("divergence-form");
        auto cells = std::make_shared<const CellTable>(build_cell_table(spec, {{-2.0, 2.0}}, 9, g));
        MollifiedDensity pm(cells, 4);
        auto same = alpha_n(spec, pm, vec1(0.3), vec1(0.1), vec1(0.1));
        Eigen::MatrixXd alpha = alpha_field(spec, cells->interpolate(vec1(0.1)));
        CHECK(same.alpha_n(0, 0) == doctest::Approx(interpolate(PeriodicField(g, alpha), vec1(0.3))[0]).epsilon(1e-12));
        Eigen::MatrixXd abar = average_alpha(spec, cells->interpolate(vec1(0.1)));
        for (double yp : {-1.0, 0.0, 0.9}) {
            auto r = alpha_n(spec, pm, vec1(0.3), vec1(0.1), vec1(yp));
            CHECK(r.alpha_bar_n(0, 0) == doctest::Approx(abar(0, 0)).epsilon(1e-12));
        }
    }
    SUBCASE("both averaged forms agree across m") {
        auto spec = preset("quasilinear-demo");
        auto cells = std::make_shared<const CellTable>(build_cell_table(spec, {{-2.0, 2.0}}, 17, g));
        for (int m : {2, 4, 8, 16}) {
            MollifiedDensity pm(cells, m);
            auto r = alpha_n(spec, pm, vec1(0.2), vec1(0.3), vec1(-0.6));
            CHECK(std::fabs(r.alpha_bar_n(0, 0) - r.alpha_bar_n_alt(0, 0)) < 1e-10);
        }
        CHECK_THROWS_AS(alpha_n(spec, MollifiedDensity(cells, 2), vec1(0.0), vec1(0.0), vec1(1.9)), DomainError);
    }
}
