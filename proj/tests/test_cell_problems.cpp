#include <doctest.h>

#include "homz/cell_problems.hpp"
#include "homz/errors.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace homz;

namespace {

constexpr double kPi = std::numbers::pi;

CoefficientSpec scalar_spec(const std::string& sigma, const std::string& b, const std::string& e = "0") {
    CoefficientSources s;
    s.sigma = {sigma};
    s.b = {b};
    s.c = {"0"};
    s.e = {e};
    s.f = {"0"};
    s.H = {"0"};
    s.constants = {1.0, 0.5, 10.0, {}};
    return CoefficientSpec::build(s);
}

Eigen::VectorXd yv(double v) { return Eigen::VectorXd::Constant(1, v); }

Eigen::VectorXd nodal(const TorusGrid& g, double (*fn)(double)) {
    Eigen::VectorXd v(g.size());
    for (Eigen::Index k = 0; k < g.size(); ++k) v[k] = fn(g.coordinate(k, 0));
    return v;
}

double max_abs(const Eigen::MatrixXd& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

TEST_CASE("invariant density closed forms") {
    auto g = make_grid(1, 64);
    SUBCASE("Laplacian") {
        auto p = solve_invariant_density(scalar_spec("1", "0"), yv(0), g);
        CHECK(max_abs(p.values.array() - 1.0) < 1e-10);
    }
    SUBCASE("harmonic mean density") {
        auto p = solve_invariant_density(scalar_spec("sqrt(2 + sin(2*pi*x))", "0"), yv(0), g);
        Eigen::VectorXd exact = nodal(g, [](double x) { return std::sqrt(3.0) / (2 + std::sin(2 * kPi * x)); });
        CHECK(max_abs(p.values.col(0) - exact) < 1e-9);
        CHECK(p.values(16, 0) == doctest::Approx(0.5773503).epsilon(1e-7));
        CHECK(quadrature(p)[0] == doctest::Approx(1.0).epsilon(1e-10));
    }
    SUBCASE("divergence-form drift leaves the uniform density") {
        auto p = solve_invariant_density(scalar_spec("sqrt(2 + sin(2*pi*x))", "pi*cos(2*pi*x)"), yv(0), g);
        CHECK(max_abs(p.values.array() - 1.0) < 1e-9);
    }
}

TEST_CASE("Poisson solves") {
    auto g = make_grid(1, 64);
    auto spec = scalar_spec("1", "0");
    GeneratorMatrix L = assemble_generator(g, spec, yv(0));
    PeriodicField p(g, Eigen::VectorXd::Ones(g.size()));
    SUBCASE("zero right-hand side") {
        auto phihat = solve_poisson(L, PeriodicField(g, Eigen::VectorXd::Zero(g.size())), p);
        CHECK(max_abs(phihat.values) == 0.0);
    }
    SUBCASE("eigenfunction") {
        PeriodicField phi(g, nodal(g, [](double x) { return std::cos(2 * kPi * x); }));
        PoissonDiagnostics d;
        auto phihat = solve_poisson(L, phi, p, 1e-8, &d);
        CHECK(phihat.values(0, 0) == doctest::Approx(0.0506606).epsilon(1e-6));
        CHECK(max_abs(phihat.values.col(0) - phi.values.col(0) / (2 * kPi * kPi)) < 1e-12);
        CHECK(d.residual < 1e-9);
    }
    SUBCASE("uncentered input is rejected in strict mode") {
        PeriodicField phi(g, nodal(g, [](double x) { return 1.0 + std::cos(2 * kPi * x); }));
        CHECK_THROWS_AS(solve_poisson(L, phi, p), CompatibilityError);
        try {
            solve_poisson(L, phi, p);
        } catch (const CompatibilityError& err) {
            CHECK(std::string(err.what()).find("not centered against p") != std::string::npos);
        }
    }
    SUBCASE("adjoint operator is refused") {
        CHECK_THROWS_AS(PoissonSolver(assemble_adjoint(L), p.values.col(0)), UsageError);
    }
}

TEST_CASE("Poisson residual on random band-limited data") {
    auto spec = preset("quasilinear-demo");
    auto g = make_grid(1, 64);
    GeneratorMatrix L = assemble_generator(g, spec, yv(0.3));
    Eigen::VectorXd p = solve_invariant_density(L);
    PoissonSolver solver(L, p);
    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 5; ++trial) {
        Eigen::VectorXd phi = Eigen::VectorXd::Zero(g.size());
        for (int k = 1; k <= 6; ++k) {
            double a = nd(rng), b = nd(rng);
            for (Eigen::Index i = 0; i < g.size(); ++i) {
                double x = g.coordinate(i, 0);
                phi[i] += a * std::cos(2 * kPi * k * x) + b * std::sin(2 * kPi * k * x);
            }
        }
        phi.array() -= phi.dot(p) / static_cast<double>(g.size());
        PoissonDiagnostics d;
        Eigen::VectorXd phihat = solver.solve(phi, CenteringMode::strict, &d);
        CHECK((L.matrix * phihat + phi).cwiseAbs().maxCoeff() <= 1e-8);
        CHECK(std::fabs(phihat.mean()) < 1e-12);
    }
}

TEST_CASE("correctors") {
    auto g = make_grid(1, 64);
    SUBCASE("zero drift") {
        auto c = solve_correctors(scalar_spec("sqrt(2 + sin(2*pi*x))", "0"), yv(0), g, CenteringMode::strict);
        CHECK(max_abs(c.bhat.values) < 1e-14);
        CHECK(max_abs(c.grad_x_bhat.values) < 1e-12);
    }
    SUBCASE("eigenfunction corrector for e") {
        auto c = solve_correctors(scalar_spec("1", "0", "cos(2*pi*x)"), yv(0), g, CenteringMode::strict);
        Eigen::VectorXd exact = nodal(g, [](double x) { return std::cos(2 * kPi * x) / (2 * kPi * kPi); });
        CHECK(max_abs(c.ehat.values.col(0) - exact) < 1e-12);
    }
    SUBCASE("strict mode rejects uncentered drift, auto mode records the shift") {
        auto spec = scalar_spec("1", "0", "0.5 + cos(2*pi*x)");
        CHECK_THROWS_AS(solve_correctors(spec, yv(0), g, CenteringMode::strict), CompatibilityError);
        auto c = solve_correctors(spec, yv(0), g, CenteringMode::automatic);
        CHECK(c.e_shift[0] == doctest::Approx(0.5).epsilon(1e-10));
        CHECK(max_abs(quadrature(c.ehat)) < 1e-12);
    }
    SUBCASE("gradients integrate to zero and correctors are mean-free") {
        for (const auto& name : preset_names()) {
            auto spec = preset(name);
            auto gg = make_grid(spec.P(), spec.P() == 1 ? 64 : 16);
            Eigen::VectorXd y = Eigen::VectorXd::Constant(spec.Q(), 0.4);
            auto c = solve_correctors(spec, y, gg, CenteringMode::strict);
            CAPTURE(name);
            CHECK(max_abs(quadrature(c.grad_x_bhat)) < 1e-10);
            CHECK(max_abs(quadrature(c.grad_x_ehat)) < 1e-10);
            CHECK(max_abs(quadrature(c.bhat)) < 1e-10);
            CHECK(max_abs(quadrature(c.ehat)) < 1e-10);
            CHECK(std::fabs(quadrature(c.p)[0] - 1.0) < 1e-10);
            CHECK(c.p.values.minCoeff() >= 1e-3);
            CHECK(c.max_residual <= 1e-7);
        }
    }
}

TEST_CASE("corrector y-derivatives") {
    auto g = make_grid(1, 64);
    SUBCASE("y-independent coefficients") {
        auto d = corrector_y_derivatives(preset("harmonic-1d"), yv(0.7), g, 1e-3);
        CHECK(max_abs(d.dy_bhat.values) < 1e-10);
        CHECK(max_abs(d.dyy_bhat.values) < 1e-6);
        CHECK(max_abs(d.dxy_ehat.values) < 1e-8);
    }
    SUBCASE("separable drift closed form at y = 0") {
        auto d = corrector_y_derivatives(preset("separable-drift"), yv(0.0), g, 1e-3);
        Eigen::VectorXd exact = nodal(g, [](double x) { return std::sin(2 * kPi * x) / (2 * kPi * kPi); });
        CHECK(max_abs(d.dy_bhat.values.col(0) - exact) < 1e-8);
        Eigen::VectorXd dexact = nodal(g, [](double x) { return std::cos(2 * kPi * x) / kPi; });
        CHECK(max_abs(d.dxy_bhat.values.col(0) - dexact) < 1e-7);
    }
    SUBCASE("parameter-derivative route agrees with finite differences to second order") {
        auto spec = preset("separable-drift");
        const double y = 0.5;
        auto route = corrector_first_y_derivatives(spec, yv(y), g, 1e-3);
        std::vector<double> hs = {1e-2, 5e-3, 2.5e-3}, errs;
        for (double h : hs) {
            auto cp = solve_correctors(spec, yv(y + h), g, CenteringMode::strict);
            auto cm = solve_correctors(spec, yv(y - h), g, CenteringMode::strict);
            Eigen::VectorXd fd = (cp.bhat.values.col(0) - cm.bhat.values.col(0)) / (2 * h);
            errs.push_back(max_abs(fd - route.dy_bhat.values.col(0)));
        }
        double slope = std::log(errs[0] / errs[2]) / std::log(hs[0] / hs[2]);
        CAPTURE(errs[0]);
        CAPTURE(errs[2]);
        CHECK(slope >= 1.9);
    }
}

TEST_CASE("density y-derivative") {
    auto g = make_grid(1, 64);
    SUBCASE("y-independent coefficients") {
        auto d = density_y_derivative(preset("harmonic-1d"), yv(0.2), g, 1e-3);
        CHECK(max_abs(d.dy_p.values) < 1e-10);
    }
    SUBCASE("Lipschitz ratio is stable and derivative integrates to zero") {
        auto spec = preset("quasilinear-demo");
        const double y = 0.4;
        Eigen::VectorXd p0 = solve_invariant_density(spec, yv(y), g).values.col(0);
        std::vector<double> ratios;
        for (double h : {1e-1, 5e-2, 2.5e-2, 1e-2, 5e-3, 1e-3}) {
            Eigen::VectorXd ph = solve_invariant_density(spec, yv(y + h), g).values.col(0);
            ratios.push_back(l2_norm(ph - p0) / h);
        }
        double lo = *std::min_element(ratios.begin(), ratios.end());
        double hi = *std::max_element(ratios.begin(), ratios.end());
        CHECK(hi / lo - 1.0 < 0.10);
        auto d = density_y_derivative(spec, yv(y), g, 1e-3);
        CHECK(std::fabs(quadrature(d.dy_p)[0]) < 1e-8);
        CHECK(d.l2_norms[0] == doctest::Approx(ratios.back()).epsilon(0.01));
    }
}

TEST_CASE("cell tables") {
    auto g = make_grid(1, 32);
    SUBCASE("single-point box") {
        auto t = build_cell_table(preset("harmonic-1d"), {{0.5, 0.5}}, 9, g);
        CHECK(t.size() == 1);
    }
    SUBCASE("y-independent spec gives identical entries") {
        auto t = build_cell_table(preset("harmonic-1d"), {{-1.0, 1.0}}, 5, g);
        for (std::size_t i = 1; i < t.size(); ++i) {
            CHECK(max_abs(t.node(i).p.values - t.node(0).p.values) <= 1e-12);
            CHECK(max_abs(t.node(i).bhat.values - t.node(0).bhat.values) <= 1e-12);
        }
    }
    SUBCASE("midpoint interpolation on the quasilinear demo") {
        auto spec = preset("quasilinear-demo");
        auto g64 = make_grid(1, 64);
        auto t = build_cell_table(spec, {{-2.0, 2.0}}, 9, g64);
        double worst = 0.0;
        for (int k = 0; k < 8; ++k) {
            double y = -2.0 + 0.5 * k + 0.25;
            Eigen::VectorXd direct = solve_invariant_density(spec, yv(y), g64).values.col(0);
            bool clamped = true;
            Eigen::VectorXd interp = t.interpolate_field(CellField::p, yv(y), &clamped).col(0);
            CHECK_FALSE(clamped);
            worst = std::max(worst, max_abs(interp - direct));
        }
        CAPTURE(worst);
        CHECK(worst <= 1e-3);
    }
    SUBCASE("node failures name their y") {
        auto spec = scalar_spec("1", "0.5 + y*sin(2*pi*x)");
        try {
            build_cell_table(spec, {{0.0, 1.0}}, 3, g);
            FAIL("expected a failure");
        } catch (const Error& err) {
            CHECK(std::string(err.what()).find("y=(") != std::string::npos);
        }
    }
    SUBCASE("two-dimensional torus") {
        auto spec = preset("harmonic-2d");
        auto g2 = make_grid(2, 16);
        auto cell = solve_cell(spec, Eigen::VectorXd::Constant(1, 0.3), g2);
        CHECK(std::fabs(quadrature(cell.p)[0] - 1.0) < 1e-10);
        CHECK(cell.p.values.minCoeff() > 1e-3);
        CHECK(cell.max_residual <= 1e-7);
        CHECK(cell.grad_x_bhat.components() == 4);
        CHECK(cell.dxy_bhat.components() == 4);
    }
}

TEST_CASE("mollified density") {
    auto g = make_grid(1, 32);
    SUBCASE("y-independent density is reproduced") {
        auto t = std::make_shared<const CellTable>(build_cell_table(preset("harmonic-1d"), {{-1.0, 1.0}}, 5, g));
        auto pm = mollify_density(t, 2);
        CHECK(max_abs(pm.field(yv(0.1)) - t->node(0).p.values.col(0)) < 1e-12);
    }
    SUBCASE("convergence in m, unit mass and domain errors") {
        auto spec = preset("quasilinear-demo");
        auto t = std::make_shared<const CellTable>(build_cell_table(spec, {{-2.0, 2.0}}, 33, g));
        std::vector<double> sups;
        for (int m : {2, 4, 8, 16}) {
            auto pm = mollify_density(t, m);
            double sup = 0.0;
            for (double y : {-1.0, -0.3, 0.0, 0.6, 1.2}) {
                Eigen::VectorXd f = pm.field(yv(y));
                CHECK(std::fabs(f.mean() - 1.0) < 1e-8);
                CHECK(f.minCoeff() > 0.0);
                sup = std::max(sup, l2_norm(f - t->interpolate_field(CellField::p, yv(y)).col(0)));
            }
            sups.push_back(sup);
        }
        for (std::size_t i = 1; i < sups.size(); ++i) CHECK(sups[i] < sups[i - 1]);
        CHECK_THROWS_AS(mollify_density(t, 2).field(yv(1.8)), DomainError);
        CHECK_NOTHROW(mollify_density(t, 8).field(yv(1.8)));
    }
}
