#include "homz/mollifier.hpp"

#include "homz/errors.hpp"

#include <boost/math/quadrature/gauss.hpp>

#include <cmath>
#include <numbers>

namespace homz {

double bump_profile(double r2) {
    if (r2 >= 1.0) return 0.0;
    return std::exp(-1.0 / (1.0 - r2));
}

namespace {

template <int K>
void gauss_nodes(std::vector<double>& x, std::vector<double>& w) {
    const auto& a = boost::math::quadrature::gauss<double, K>::abscissa();
    const auto& wt = boost::math::quadrature::gauss<double, K>::weights();
    x.clear();
    w.clear();
    for (std::size_t i = a.size(); i-- > 0;) {
        if (a[i] == 0.0) continue;
        x.push_back(-a[i]);
        w.push_back(wt[i]);
    }
    if (K % 2 == 1) {
        x.push_back(0.0);
        w.push_back(wt[0]);
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == 0.0) continue;
        x.push_back(a[i]);
        w.push_back(wt[i]);
    }
}

void gauss_rule(int K, std::vector<double>& x, std::vector<double>& w) {
    switch (K) {
        case 8: gauss_nodes<8>(x, w); break;
        case 16: gauss_nodes<16>(x, w); break;
        case 24: gauss_nodes<24>(x, w); break;
        case 32: gauss_nodes<32>(x, w); break;
        default: throw UsageError("supported Gauss-Legendre orders are 8, 16, 24, 32");
    }
}

/// Radial integral ∫_0^1 g(r) dr by composite 8-point Gauss–Legendre on `panels` panels.
template <class F>
double composite(F&& g, int panels) {
    std::vector<double> x, w;
    gauss_nodes<8>(x, w);
    double acc = 0.0;
    for (int p = 0; p < panels; ++p) {
        double lo = static_cast<double>(p) / panels, half = 0.5 / panels;
        for (std::size_t i = 0; i < x.size(); ++i) acc += half * w[i] * g(lo + half * (1 + x[i]));
    }
    return acc;
}

double unnormalized_fourier(int dim, double omega) {
    const int panels = 64 + static_cast<int>(std::ceil(omega / 4.0));
    if (dim == 1) return 2.0 * composite([&](double r) { return bump_profile(r * r) * std::cos(omega * r); }, panels);
    // Hankel form: ρ̂(ω) = (2π)^{d/2} ω^{1−d/2} ∫ ρ(r) J_{d/2−1}(ωr) r^{d/2} dr, with the ω → 0 limit.
    const double nu = 0.5 * dim - 1.0;
    const double c = std::pow(2 * std::numbers::pi, 0.5 * dim);
    if (omega < 1e-12) {
        double surf = 2 * std::pow(std::numbers::pi, 0.5 * dim) / std::tgamma(0.5 * dim);
        return surf * composite([&](double r) { return bump_profile(r * r) * std::pow(r, dim - 1); }, panels);
    }
    return c * std::pow(omega, -nu) *
           composite([&](double r) { return bump_profile(r * r) * std::cyl_bessel_j(nu, omega * r) * std::pow(r, 0.5 * dim); },
                     panels);
}

}  // namespace

BallRule ball_rule(int dim, int points_per_axis) {
    if (dim < 1) throw UsageError("ball rule dimension must be positive");
    std::vector<double> x, w;
    gauss_rule(points_per_axis, x, w);
    BallRule rule;
    rule.dim = dim;
    const std::size_t K = x.size();
    std::vector<std::size_t> idx(static_cast<std::size_t>(dim), 0);
    double total = 0.0;
    for (;;) {
        double r2 = 0.0, weight = 1.0;
        Eigen::VectorXd u(dim);
        for (int d = 0; d < dim; ++d) {
            u[d] = x[idx[static_cast<std::size_t>(d)]];
            weight *= w[idx[static_cast<std::size_t>(d)]];
            r2 += u[d] * u[d];
        }
        double rho = bump_profile(r2);
        if (rho > 0.0) {
            rule.points.push_back(u);
            rule.weights.push_back(weight * rho);
            total += weight * rho;
        }
        int d = 0;
        while (d < dim) {
            if (++idx[static_cast<std::size_t>(d)] < K) break;
            idx[static_cast<std::size_t>(d)] = 0;
            ++d;
        }
        if (d == dim) break;
    }
    for (double& wt : rule.weights) wt /= total;
    return rule;
}

double bump_fourier(int dim, double omega_norm) {
    if (dim < 1) throw UsageError("dimension must be positive");
    return unnormalized_fourier(dim, std::fabs(omega_norm)) / unnormalized_fourier(dim, 0.0);
}

}  // namespace homz
