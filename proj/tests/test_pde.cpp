#include <doctest.h>

#include "homz/errors.hpp"
#include "homz/pde.hpp"
#include "homz/spectral.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace homz;

namespace {

constexpr double kPi = std::numbers::pi;

/// Table with constant ᾱ, zero ū and v̄ = v0 + vy·y + vz·z on the given box.
std::shared_ptr<HomogenizedTable> affine_table(double alpha, double v0, double vy, double vz, double lo = -2.0,
                                               double hi = 2.0, int nodes = 9) {
    TensorGrid yg({UniformAxis{lo, hi, nodes}});
    TensorGrid zg({UniformAxis{lo, hi, nodes}});
    std::vector<double> a(yg.size(), alpha), u(yg.size() * zg.size(), 0.0), v(yg.size() * zg.size());
    for (std::size_t iy = 0; iy < yg.size(); ++iy)
        for (std::size_t iz = 0; iz < zg.size(); ++iz)
            v[iy * zg.size() + iz] = v0 + vy * yg.node(iy)[0] + vz * zg.node(iz)[0];
    return std::make_shared<HomogenizedTable>(yg, zg, 1, 1, a, u, v);
}

/// Single-node table: linear heat equation with diffusion alpha.
std::shared_ptr<HomogenizedTable> heat_table(double alpha) {
    TensorGrid one({UniformAxis{0.0, 0.0, 1}});
    return std::make_shared<HomogenizedTable>(one, one, 1, 1, std::vector<double>{alpha}, std::vector<double>{0.0},
                                              std::vector<double>{0.0});
}

Eigen::MatrixXd sin_nodes(const TorusGrid& g) {
    Eigen::MatrixXd h(g.size(), 1);
    for (Eigen::Index k = 0; k < g.size(); ++k) h(k, 0) = std::sin(2 * kPi * g.coordinate(k, 0));
    return h;
}

double sup_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return (a - b).cwiseAbs().maxCoeff(); }

CoefficientSpec spec_1d(const std::string& sigma, const std::string& b, const std::string& c, const std::string& e,
                        const std::string& f, const std::string& H = "sin(2*pi*x)") {
    CoefficientSources s;
    s.sigma = {sigma};
    s.b = {b};
    s.c = {c};
    s.e = {e};
    s.f = {f};
    s.H = {H};
    s.constants = {1.0, 0.5, 10.0, {}};
    return CoefficientSpec::build(s);
}

std::shared_ptr<const HomogenizedTable> preset_table(const CoefficientSpec& spec, const TorusGrid& cell_grid,
                                                     std::shared_ptr<const CellTable>* cells_out = nullptr) {
    auto cells = std::make_shared<CellTable>(build_cell_table(spec, {{-2.0, 2.0}}, 17, cell_grid));
    auto table = std::make_shared<HomogenizedTable>(build_homogenized_table(spec, *cells, {{-8.0, 8.0}}, 17));
    if (cells_out) *cells_out = cells;
    return table;
}

}  // namespace

TEST_CASE("spectral helpers") {
    SUBCASE("round trip and refinement") {
        for (int P : {1, 2, 3}) {
            const int M = P == 3 ? 8 : 16;
            SpectralGrid coarse(P, M), fine(P, 3 * M / 2);
            std::mt19937_64 rng(7);
            std::normal_distribution<double> n01;
            std::vector<double> x(coarse.real_size()), back(coarse.real_size());
            for (double& v : x) v = n01(rng);
            std::vector<cplx> h(coarse.complex_size()), h2(coarse.complex_size()), hf(fine.complex_size());
            coarse.forward(x.data(), h.data());
            coarse.backward(h.data(), back.data());
            double err = 0.0;
            for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, std::fabs(x[i] - back[i]));
            CAPTURE(P);
            CHECK(err < 1e-12);
            // Padding then truncation returns every non-Nyquist mode.
            coarse.pad_to(h.data(), fine, hf.data());
            coarse.truncate_from(fine, hf.data(), h2.data());
            double modes = 0.0;
            for (std::size_t c = 0; c < h.size(); ++c) {
                bool nyq = false;
                for (int d = 0; d < P; ++d) nyq = nyq || coarse.nyquist(c, d);
                if (!nyq) modes = std::max(modes, std::abs(h[c] - h2[c]));
            }
            CHECK(modes < 1e-14);
        }
    }
    SUBCASE("padding interpolates band-limited data") {
        SpectralGrid coarse(2, 8), fine(2, 24);
        std::vector<double> x(coarse.real_size()), xf(fine.real_size());
        auto f = [](double a, double b) { return std::cos(2 * kPi * 4 * a) + std::sin(2 * kPi * (a - 2 * b)); };
        for (int j = 0; j < 8; ++j)
            for (int i = 0; i < 8; ++i) x[static_cast<std::size_t>(i + 8 * j)] = f(i / 8.0, j / 8.0);
        std::vector<cplx> h(coarse.complex_size()), hf(fine.complex_size());
        coarse.forward(x.data(), h.data());
        coarse.pad_to(h.data(), fine, hf.data());
        fine.backward(hf.data(), xf.data());
        double err = 0.0;
        for (int j = 0; j < 24; ++j)
            for (int i = 0; i < 24; ++i)
                err = std::max(err, std::fabs(xf[static_cast<std::size_t>(i + 24 * j)] - f(i / 24.0, j / 24.0)));
        CHECK(err < 1e-12);
    }
    SUBCASE("invalid sizes") {
        CHECK_THROWS_AS(SpectralGrid(1, 7), UsageError);
        CHECK_THROWS_AS(SpectralGrid(4, 8), UsageError);
    }
}

TEST_CASE("field gradient and hessian") {
    auto g = make_grid(1, 32);
    Eigen::MatrixXd s = sin_nodes(g);
    auto gh = field_gradient_and_hessian(g, s);
    double eg = 0.0, eh = 0.0;
    for (Eigen::Index k = 0; k < g.size(); ++k) {
        const double x = g.coordinate(k, 0);
        eg = std::max(eg, std::fabs(gh.grad(k, 0) - 2 * kPi * std::cos(2 * kPi * x)));
        eh = std::max(eh, std::fabs(gh.hess(k, 0) + 4 * kPi * kPi * std::sin(2 * kPi * x)));
    }
    CHECK(eg < 1e-10);
    CHECK(eh < 1e-8);
    auto zero = field_gradient_and_hessian(g, Eigen::MatrixXd::Constant(g.size(), 1, 3.0));
    CHECK(zero.grad.cwiseAbs().maxCoeff() < 1e-12);
    CHECK(zero.hess.cwiseAbs().maxCoeff() < 1e-12);

    auto g2 = make_grid(2, 16);
    Eigen::MatrixXd f(g2.size(), 1);
    for (Eigen::Index k = 0; k < g2.size(); ++k)
        f(k, 0) = std::sin(2 * kPi * g2.coordinate(k, 0)) * std::cos(2 * kPi * g2.coordinate(k, 1));
    auto gh2 = field_gradient_and_hessian(g2, f);
    double emix = 0.0, esym = 0.0;
    for (Eigen::Index k = 0; k < g2.size(); ++k) {
        const double a = 2 * kPi * g2.coordinate(k, 0), b = 2 * kPi * g2.coordinate(k, 1);
        emix = std::max(emix, std::fabs(gh2.hess(k, 1) + 4 * kPi * kPi * std::cos(a) * std::sin(b)));
        esym = std::max(esym, std::fabs(gh2.hess(k, 1) - gh2.hess(k, 2)));
    }
    CHECK(emix < 1e-8);
    CHECK(esym == 0.0);
}

TEST_CASE("limit system") {
    auto g = make_grid(1, 32);
    SUBCASE("heat kernel amplitude") {
        auto field = solve_limit_system(heat_table(1.0), sin_nodes(g), 0.1, g);
        REQUIRE(field.slices() == 201);
        const double amp = std::exp(-2 * kPi * kPi * 0.1);
        CHECK(amp == doctest::Approx(0.138911).epsilon(1e-6));
        CHECK(sup_diff(field.theta[0], amp * sin_nodes(g)) < 1e-6);
        // Every slice against the closed form, including θ_t.
        double e = 0.0, et = 0.0;
        for (std::size_t s = 0; s < field.slices(); ++s) {
            const double a = std::exp(-2 * kPi * kPi * (0.1 - field.times[s]));
            e = std::max(e, sup_diff(field.theta[s], a * sin_nodes(g)));
            et = std::max(et, sup_diff(field.theta_t[s], 2 * kPi * kPi * a * sin_nodes(g)));
        }
        CHECK(e < 1e-7);
        CHECK(et < 1e-5);
        CHECK(field.theta.back() == sin_nodes(g));
        CHECK_FALSE(field.stats.dealiased);
    }
    SUBCASE("constants are equilibria") {
        Eigen::MatrixXd c = Eigen::MatrixXd::Constant(g.size(), 1, 0.7);
        auto field = solve_limit_system(affine_table(1.3, -0.7, 1.0, 0.0), c, 0.2, g);
        for (const auto& s : field.theta) CHECK(sup_diff(s, c) < 1e-12);
        CHECK(field.stats.dealiased);
    }
    SUBCASE("maximum-principle surrogate") {
        auto table = affine_table(1.0, 0.2, -0.3, 0.1);
        auto field = solve_limit_system(table, sin_nodes(g), 0.3, g);
        CHECK(field.sup_abs() <= 1.0 + 0.3 * table->sup_abs_v_bar());
        CHECK(field.theta.back() == sin_nodes(g));
    }
    SUBCASE("step-size underflow") {
        SolverSettings s;
        s.dt_min = 1e-3;
        s.dt_init = 1e-2;
        CHECK_THROWS_AS(solve_limit_system(heat_table(1.0), sin_nodes(make_grid(1, 64)), 0.1, make_grid(1, 64), s),
                        SolverError);
    }
}

TEST_CASE("epsilon system") {
    SUBCASE("resolution refusal") {
        CHECK_THROWS_AS(solve_epsilon_system(preset("harmonic-1d"), 4, 0.1, make_grid(1, 32)), DiscretizationError);
        CHECK_THROWS_AS(solve_epsilon_system(preset("harmonic-1d"), 0, 0.1, make_grid(1, 32)), UsageError);
    }
    SUBCASE("no fast variable means no oscillation") {
        auto spec = spec_1d("1.2", "0", "0.3", "0", "0.1*y");
        auto g = make_grid(1, 64);
        SolverSettings s;
        s.rtol = 1e-11;
        s.atol = 1e-13;
        auto eps = solve_epsilon_system(spec, 4, 0.1, g, s);
        auto lim = solve_limit_system(preset_table(spec, make_grid(1, 16)), sample_terminal(spec, g), 0.1, g, s);
        CHECK(sup_diff(eps.theta[0], lim.theta[0]) <= 1e-8);
        CHECK(eps.theta.back() == sample_terminal(spec, g));
    }
    SUBCASE("harmonic-1d approaches the homogenized heat flow") {
        auto spec = preset("harmonic-1d");
        double previous = 1e9;
        for (int k : {4, 8, 16}) {
            auto g = make_grid(1, 16 * k);
            auto eps = solve_epsilon_system(spec, k, 0.1, g);
            Eigen::MatrixXd lim = std::exp(-std::sqrt(3.0) * 2 * kPi * kPi * 0.1) * sin_nodes(g);
            const double err = sup_diff(eps.theta[0], lim);
            CAPTURE(k);
            CHECK(err < previous);
            previous = err;
        }
        CHECK(previous < 0.01);
    }
}

TEST_CASE("self-convergence in time") {
    // A coarse grid keeps the stability limit large enough for the temporal error to dominate roundoff.
    auto spec = preset("quasilinear-demo");
    auto g = make_grid(1, 8);
    auto table = preset_table(spec, make_grid(1, 32));
    Eigen::MatrixXd H = sample_terminal(spec, g);
    std::vector<Eigen::MatrixXd> out;
    for (double dt : {4e-3, 2e-3, 1e-3, 1.25e-4}) {
        SolverSettings s;
        s.fixed_dt = dt;
        s.n_out = 4;
        out.push_back(solve_limit_system(table, H, 0.4, g, s).theta[0]);
    }
    const double e0 = sup_diff(out[0], out[3]), e1 = sup_diff(out[1], out[3]), e2 = sup_diff(out[2], out[3]);
    MESSAGE("temporal errors " << e0 << " " << e1 << " " << e2);
    CHECK(sup_diff(out[1], out[2]) <= 1e-6);
    CHECK(std::log2(e0 / e1) >= 2.0);
    CHECK(std::log2(e1 / e2) >= 2.0);
}

TEST_CASE("mollified data") {
    auto g = make_grid(1, 64);
    SUBCASE("band-limited terminal decays with n") {
        auto table = affine_table(1.0, 0.0, 0.0, 0.0);
        double previous = 1e9;
        for (int n : {4, 8, 16}) {
            auto md = mollify_terminal_and_driver(table, sin_nodes(g), g, n);
            CAPTURE(n);
            CHECK(md.sup_H_change < previous);
            CHECK(md.sup_H_change * n <= 1.0);
            previous = md.sup_H_change;
        }
    }
    SUBCASE("constant terminal is unchanged") {
        Eigen::MatrixXd c = Eigen::MatrixXd::Constant(g.size(), 1, -1.25);
        auto md = mollify_terminal_and_driver(affine_table(1.0, 0.0, 0.0, 0.0), c, g, 3);
        CHECK(sup_diff(md.H_n, c) < 1e-14);
    }
    SUBCASE("affine driver is unchanged away from the edges") {
        auto table = affine_table(1.0, 0.3, 0.5, -0.2);
        auto md = mollify_terminal_and_driver(table, sin_nodes(g), g, 4);
        const auto& yg = table->y_grid();
        const auto& zg = table->z_grid();
        long interior = 0;
        for (std::size_t iy = 0; iy < yg.size(); ++iy)
            for (std::size_t iz = 0; iz < zg.size(); ++iz) {
                const double y = yg.node(iy)[0], z = zg.node(iz)[0];
                if (std::fabs(y) > 1.75 || std::fabs(z) > 1.75) continue;
                ++interior;
                CHECK(std::fabs(md.table_n->v_values()[iy * zg.size() + iz] - (0.3 + 0.5 * y - 0.2 * z)) < 1e-12);
            }
        CHECK(interior == 49);
        CHECK(md.truncated_nodes == 81 - 49);
        CHECK(md.table_n->alpha_values() == table->alpha_values());
        CHECK(md.table_n->u_values() == table->u_values());
    }
    SUBCASE("support wider than the box") {
        auto table = affine_table(1.0, 0.0, 1.0, 1.0, -0.4, 0.4, 5);
        CHECK_THROWS_AS(mollify_terminal_and_driver(table, sin_nodes(g), g, 1), DomainError);
        CHECK_NOTHROW(mollify_terminal_and_driver(table, sin_nodes(g), g, 4));
        CHECK_THROWS_AS(mollify_terminal_and_driver(table, sin_nodes(g), g, 0), UsageError);
    }
}

TEST_CASE("regularized systems") {
    auto spec = preset("quasilinear-demo");
    auto g = make_grid(1, 64);
    std::shared_ptr<const CellTable> cells;
    auto table = preset_table(spec, make_grid(1, 32), &cells);
    Eigen::MatrixXd H = sample_terminal(spec, g);
    const double T = 0.1;
    auto theta = solve_limit_system(table, H, T, g);

    SUBCASE("trivial mollification reproduces the limit") {
        MollifiedData md;
        md.n = 1;
        md.H_n = H;
        md.table_n = table;
        auto zeta = solve_regularized_system(md, T, g);
        CHECK(sup_diff(zeta.theta[0], theta.theta[0]) < 1e-10);
        CHECK(zeta.hess_sup.size() == zeta.slices());
    }
    SUBCASE("n sweep") {
        double previous = 1e9;
        for (int n : {4, 8, 16}) {
            auto md = mollify_terminal_and_driver(table, H, g, n);
            auto zeta = solve_regularized_system(md, T, g);
            double gap = 0.0;
            for (std::size_t s = 0; s < zeta.slices(); ++s) {
                gap = std::max(gap, sup_diff(zeta.theta[s], theta.theta[s]));
                CHECK(zeta.theta[s].cwiseAbs().maxCoeff() <=
                      md.H_n.cwiseAbs().maxCoeff() + (T - zeta.times[s]) * md.table_n->sup_abs_v_bar() + 1e-9);
            }
            CAPTURE(n);
            CHECK(gap < previous);
            CHECK(std::isfinite(zeta.sup_hessian()));
            previous = gap;
        }
    }
    SUBCASE("gradient sup is stable under refinement") {
        auto fine = solve_limit_system(table, sample_terminal(spec, make_grid(1, 128)), T, make_grid(1, 128));
        CHECK(std::fabs(fine.sup_grad() - theta.sup_grad()) <= 0.05 * fine.sup_grad());
    }
    SUBCASE("mollification index") {
        CHECK_THROWS_AS(select_mollification_index(cells, 1.0, 2, {}, 1.0), UsageError);
        auto zero = select_mollification_index(cells, 0.0, 4, {8, 16, 32}, 1.0);
        CHECK(zero.m == 4);
        CHECK_FALSE(zero.warning);
        // Larger Hessian sup at fixed gaps never lowers m.
        int last = 0;
        for (double h : {0.1, 1.0, 10.0, 100.0, 1e4, 1e8}) {
            auto c = select_mollification_index(cells, h, 2, {4, 8, 16}, 1.0);
            CAPTURE(h);
            CHECK(c.m >= last);
            last = c.m;
        }
        auto huge = select_mollification_index(cells, 1e12, 2, {4, 8}, 1.0);
        CHECK(huge.warning);
        CHECK(huge.m == 8);
        CHECK(huge.density_gaps.size() == 3);
        auto wide = select_mollification_index(cells, 1.0, 2, {4}, 5.0);
        CHECK(wide.ball_truncated);
    }
}

TEST_CASE("mollification index with a y-independent density") {
    auto spec = preset("harmonic-1d");
    auto cells = std::make_shared<CellTable>(build_cell_table(spec, {{-2.0, 2.0}}, 9, make_grid(1, 32)));
    auto c = select_mollification_index(cells, 1e6, 3, {4, 8}, 1.5);
    CHECK(c.m == 3);
    CHECK(c.density_gaps[0] < 1e-12);
}

TEST_CASE("field sampler") {
    auto g = make_grid(1, 32);
    auto field = solve_limit_system(heat_table(1.0), sin_nodes(g), 0.1, g);
    FieldSampler sampler(field);
    double err = 0.0, gerr = 0.0;
    for (double t : {0.0, 0.0337, 0.05, 0.0999, 0.1})
        for (double x : {0.0, 0.123, 0.5, 0.77, 1.31, -0.2}) {
            double th, gr;
            sampler.eval(t, &x, &th, &gr);
            const double a = std::exp(-2 * kPi * kPi * (0.1 - t));
            err = std::max(err, std::fabs(th - a * std::sin(2 * kPi * x)));
            gerr = std::max(gerr, std::fabs(gr - a * 2 * kPi * std::cos(2 * kPi * x)));
        }
    CHECK(err < 1e-7);
    CHECK(gerr < 1e-6);
}

TEST_CASE("Feynman-Kac oracle for a linear oscillatory system") {
    // dX = k b(kX) ds + σ(kX) dW, θ_ε(0, x) = E[H(X_T)].
    auto spec = spec_1d("sqrt(2 + sin(2*pi*x))", "0.5*cos(2*pi*x)", "0", "0", "0");
    const int k = 2;
    const double T = 0.1;
    auto g = make_grid(1, 64);
    auto field = solve_epsilon_system(spec, k, T, g);
    FieldSampler sampler(field);
    std::mt19937_64 rng(20240611);
    std::normal_distribution<double> n01;
    const int paths = 20000, steps = 400;
    const double h = T / steps, sh = std::sqrt(h);
    for (double x0 : {0.1, 0.35, 0.6, 0.85}) {
        double sum = 0.0, sum2 = 0.0;
        for (int p = 0; p < paths; ++p) {
            double x = x0;
            for (int s = 0; s < steps; ++s) {
                const double fx = 2 * kPi * k * x;
                x += k * 0.5 * std::cos(fx) * h + std::sqrt(2 + std::sin(fx)) * sh * n01(rng);
            }
            const double v = std::sin(2 * kPi * x);
            sum += v;
            sum2 += v * v;
        }
        const double mean = sum / paths, se = std::sqrt((sum2 / paths - mean * mean) / paths);
        double th;
        sampler.eval(0.0, &x0, &th, nullptr);
        CAPTURE(x0);
        CHECK(std::fabs(th - mean) <= 3 * se);
    }
}

TEST_CASE("gradient Hölder monitor") {
    auto g = make_grid(1, 64);
    auto field = solve_limit_system(heat_table(1.0), sin_nodes(g), 0.1, g);
    auto h = gradient_holder_monitor(field, 0.01);
    REQUIRE(h.increments.size() == 4);
    CHECK(h.exponent == doctest::Approx(1.0).epsilon(0.01));
    // Smooth field: the quotient is the sup of the second derivative on the admitted slices.
    const double hess = 4 * kPi * kPi * std::exp(-2 * kPi * kPi * 0.01);
    CHECK(h.quotient <= hess * 1.001);
    CHECK(h.quotient >= hess * 0.95);
    CHECK_THROWS_AS(gradient_holder_monitor(field, 0.01, 1), UsageError);
}
