#pragma once

#include <Eigen/Dense>

#include <vector>

namespace homz {

/// Unnormalized bump exp(−1/(1−|u|²)) on the open unit ball, zero outside.
double bump_profile(double r2);

/// Symmetric quadrature for ∫ g(u) ρ_d(u) du over the unit ball, where ρ_d is the
/// unit-mass bump in dimension d. Weights sum to one.
struct BallRule {
    int dim = 1;
    std::vector<Eigen::VectorXd> points;
    std::vector<double> weights;
};

/// Tensor Gauss–Legendre rule (16 or 24 points per axis) restricted to the ball.
BallRule ball_rule(int dim, int points_per_axis = 16);

/// Fourier transform ρ̂_d(ω) = ∫ ρ_d(u) e^{−iω·u} du of the unit-mass bump (real, radial).
double bump_fourier(int dim, double omega_norm);

}  // namespace homz
