#pragma once

#include "homz/coefficients.hpp"

#include <Eigen/Dense>

#include <array>
#include <vector>

namespace homz {

/// Uniform grid on the unit torus T^P with N nodes per axis at k/N.
/// Flat node index: i = i_0 + N*i_1 + N^2*i_2 + ... (axis 0 fastest).
class TorusGrid {
public:
    TorusGrid() = default;
    TorusGrid(int P, int N);

    int P() const { return P_; }
    int N() const { return N_; }
    Eigen::Index size() const { return size_; }

    /// Coordinate of node `flat` along `axis`.
    double coordinate(Eigen::Index flat, int axis) const;
    /// Per-axis index of node `flat`.
    int axis_index(Eigen::Index flat, int axis) const;
    Eigen::VectorXd node(Eigen::Index flat) const;

    bool operator==(const TorusGrid& other) const { return P_ == other.P_ && N_ == other.N_; }

private:
    int P_ = 1;
    int N_ = 8;
    Eigen::Index size_ = 8;
};

/// Validates (N even, N ≥ 8, P ≥ 1) and builds the grid.
TorusGrid make_grid(int P, int N);

/// Largest node count for which dense operators are assembled.
constexpr Eigen::Index kMaxDenseNodes = 4096;

/// Samples of a vector-valued function on a TorusGrid; one column per component.
struct PeriodicField {
    TorusGrid grid;
    Eigen::MatrixXd values;

    PeriodicField() = default;
    PeriodicField(const TorusGrid& g, Eigen::Index components)
        : grid(g), values(Eigen::MatrixXd::Zero(g.size(), components)) {}
    PeriodicField(const TorusGrid& g, Eigen::MatrixXd v);

    Eigen::Index components() const { return values.cols(); }
};

/// Mean-value (trapezoidal on the torus) rule per component.
Eigen::VectorXd quadrature(const PeriodicField& field);
/// Uniform-weight mean of a nodal vector.
double quadrature(const Eigen::VectorXd& nodal);

/// One-dimensional Fourier differentiation matrix of order 1 or 2 on N nodes of [0,1).
/// Order 1 drops the Nyquist mode, order 2 keeps it (−(πN)² on the cos(πNx) mode).
Eigen::MatrixXd fourier_diff_1d(int N, int order);

/// Spectral ∂/∂x_axis (order 1) or ∂²/∂x_axis² (order 2) on the full grid.
Eigen::MatrixXd diff_matrix(const TorusGrid& grid, int axis, int order);
/// Spectral ∂²/∂x_i∂x_j; equals diff_matrix(grid, i, 2) when i == j.
Eigen::MatrixXd mixed_diff_matrix(const TorusGrid& grid, int i, int j);

/// Dense nodal matrix of L_y = ½Σ a_ij ∂²_ij + Σ b_i ∂_i, or its adjoint (transpose).
struct GeneratorMatrix {
    TorusGrid grid;
    Eigen::MatrixXd matrix;
    bool adjoint = false;
    Eigen::VectorXd y;
};

/// Coefficient samples of a (row-major P×P per node) and b (P per node) at the nodes for frozen y.
struct OperatorCoefficients {
    Eigen::MatrixXd a;  ///< N^P × P*P
    Eigen::MatrixXd b;  ///< N^P × P
};

OperatorCoefficients sample_operator_coefficients(const TorusGrid& grid, const CoefficientSpec& spec,
                                                  const Eigen::VectorXd& y);

/// Nodal assembly ½Σ diag(a_ij) D_ij + Σ diag(b_i) D_i from sampled coefficients.
Eigen::MatrixXd assemble_operator(const TorusGrid& grid, const OperatorCoefficients& coeffs);

GeneratorMatrix assemble_generator(const TorusGrid& grid, const CoefficientSpec& spec, const Eigen::VectorXd& y);
GeneratorMatrix assemble_adjoint(const GeneratorMatrix& L);

/// Samples every component of a coefficient on the grid at frozen y (and z for c, f).
PeriodicField sample_coefficient(const TorusGrid& grid, const CoefficientSpec& spec, Coefficient which,
                                 const Eigen::VectorXd& y, const Eigen::MatrixXd* z = nullptr);

/// Band-limited trigonometric interpolant of a PeriodicField.
///
/// Uses the real basis 1, cos(2πkx), sin(2πkx) (0 < k < N/2) and cos(πNx) per axis,
/// which is exact at the nodes and real-valued everywhere.
class TrigInterpolant {
public:
    explicit TrigInterpolant(const PeriodicField& field);

    /// All components at x (any real point; periodic).
    Eigen::VectorXd operator()(const Eigen::VectorXd& x) const;
    double operator()(const Eigen::VectorXd& x, Eigen::Index component) const;

private:
    void basis(double x, double* out) const;

    TorusGrid grid_;
    Eigen::MatrixXd coeffs_;  // N^P × components, tensor coefficients in the real basis
};

Eigen::VectorXd interpolate(const PeriodicField& field, const Eigen::VectorXd& x);

/// Analysis matrix mapping N nodal values to the N real-basis coefficients of TrigInterpolant.
Eigen::MatrixXd trig_analysis_matrix(int N);
/// Evaluates the N real-basis functions at x.
void trig_basis(int N, double x, double* out);

/// Band-limited resampling of every component onto a grid with Nf nodes per axis (Nf ≥ N).
Eigen::MatrixXd resample(const PeriodicField& field, int Nf);

}  // namespace homz
