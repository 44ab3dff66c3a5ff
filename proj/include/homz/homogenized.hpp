#pragma once

#include "homz/cell_problems.hpp"
#include "homz/coefficients.hpp"
#include "homz/interp.hpp"

#include <Eigen/Dense>

#include <atomic>
#include <memory>
#include <string>
#include <vector>

namespace homz {

/// Cell-field values at one torus point, stored row-major in the CellSolution component layouts.
struct CellPoint {
    int P = 1;
    int Q = 1;
    double p = 1.0;
    std::vector<double> bhat, ehat;      ///< P, Q
    std::vector<double> grad_x_bhat;     ///< (ℓ, i) → ℓ*P + i
    std::vector<double> grad_x_ehat;     ///< (m, i) → m*P + i
    std::vector<double> dy_bhat;         ///< (ℓ, j) → ℓ*Q + j
    std::vector<double> dy_ehat;         ///< (m, j) → m*Q + j
    std::vector<double> dxy_bhat;        ///< (ℓ, i, j) → (ℓ*P + i)*Q + j
    std::vector<double> dxy_ehat;        ///< (m, i, j) → (m*P + i)*Q + j

    void resize(int P, int Q);
};

/// Copies the values of every cell field at node k.
void gather_node(const CellSolution& cell, Eigen::Index k, CellPoint& out);
/// Trigonometric interpolation of every cell field at an arbitrary x.
CellPoint cell_point_at(const CellSolution& cell, const Eigen::VectorXd& x);

/// Scratch buffers for evaluate_integrands; reuse one per thread.
struct IntegrandWorkspace {
    std::vector<double> slots, a, c, e, f, zz, M;
    void resize(const CoefficientSpec& spec);
};

/// u(x,y,z), v(x,y,z) and α(x,y) from the cell values at x:
///   u = (I+∇ₓb̂) c(z+∇ₓê) − ∇_y b̂ e + ∇²_{xy} b̂ [a (z+∇ₓê)*]
///   v = f(z+∇ₓê) + ∇ₓê c(z+∇ₓê) − ∇_y ê e + ∇²_{xy} ê [a (z+∇ₓê)*]
///   α = (I+∇ₓb̂) a (I+∇ₓb̂)*
/// where B[M] = (Σ_{i,j} ∂²B_ℓ/∂x_i∂y_j M_{ij})_ℓ for a P×Q matrix M.
/// z is Q×P row-major; alpha is P×P row-major. Any output pointer may be null.
void evaluate_integrands(const CoefficientSpec& spec, const double* x, const double* y, const double* z,
                         const CellPoint& cell, IntegrandWorkspace& ws, double* u, double* v, double* alpha);

struct Integrands {
    Eigen::VectorXd u;      ///< P
    Eigen::VectorXd v;      ///< Q
    Eigen::MatrixXd alpha;  ///< P×P
};

/// Pointwise integrands at (x, cell.y, z); cell values at x come from trigonometric interpolation.
Integrands pointwise_integrands(const CoefficientSpec& spec, const CellSolution& cell, const Eigen::VectorXd& x,
                                const Eigen::MatrixXd& z);

struct Averages {
    Eigen::VectorXd u_bar;      ///< P
    Eigen::VectorXd v_bar;      ///< Q
    Eigen::MatrixXd alpha_bar;  ///< P×P
};

/// ū(y,z), v̄(y,z), ᾱ(y) by p-weighted quadrature; the integrands receive z(I+∇ₓb̂)(x,y).
Averages average_coefficients(const CoefficientSpec& spec, const CellSolution& cell, const Eigen::MatrixXd& z);
/// ᾱ(y) alone.
Eigen::MatrixXd average_alpha(const CoefficientSpec& spec, const CellSolution& cell);
/// Nodal α(·, y) as N^P × P² (row-major P×P per node).
Eigen::MatrixXd alpha_field(const CoefficientSpec& spec, const CellSolution& cell);

/// Symmetric positive semidefinite square root by eigendecomposition. Throws NumericError on a negative eigenvalue.
Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m);

/// ᾱ, ᾱ^{1/2} on a y-grid and ū, v̄ on the product (y, z)-grid, with multilinear interpolation.
/// Queries outside the box are clamped and counted.
class HomogenizedTable {
public:
    HomogenizedTable() = default;
    /// alpha: ny·P² (row-major per node); u: ny·nz·P; v: ny·nz·Q, both indexed (iy*nz + iz).
    HomogenizedTable(TensorGrid y_grid, TensorGrid z_grid, int P, int Q, std::vector<double> alpha,
                     std::vector<double> u, std::vector<double> v);
    HomogenizedTable(const HomogenizedTable& other);
    HomogenizedTable& operator=(const HomogenizedTable& other);

    int P() const { return P_; }
    int Q() const { return Q_; }
    const TensorGrid& y_grid() const { return y_grid_; }
    const TensorGrid& z_grid() const { return z_grid_; }
    const std::vector<double>& alpha_values() const { return alpha_; }
    const std::vector<double>& alpha_sqrt_values() const { return sqrt_; }
    const std::vector<double>& u_values() const { return u_; }
    const std::vector<double>& v_values() const { return v_; }

    Eigen::MatrixXd alpha_node(std::size_t iy) const;
    /// Replaces ᾱ at one y node (the square root is recomputed when possible, otherwise zeroed).
    void set_alpha_node(std::size_t iy, const Eigen::MatrixXd& value);

    void alpha(const double* y, double* out) const;
    void alpha_sqrt(const double* y, double* out) const;
    void uv_bar(const double* y, const double* z, double* u, double* v) const;

    Eigen::MatrixXd alpha(const Eigen::VectorXd& y) const;
    Eigen::MatrixXd alpha_sqrt(const Eigen::VectorXd& y) const;
    Eigen::VectorXd u_bar(const Eigen::VectorXd& y, const Eigen::MatrixXd& z) const;
    Eigen::VectorXd v_bar(const Eigen::VectorXd& y, const Eigen::MatrixXd& z) const;

    /// Largest |v̄| over all table nodes.
    double sup_abs_v_bar() const;

    /// Number of clamped queries since construction or the last reset.
    long extrapolations() const { return extrapolations_.load(std::memory_order_relaxed); }
    void reset_extrapolations() const { extrapolations_.store(0, std::memory_order_relaxed); }

    std::string provenance;  ///< content hash of the cell table it was built from

private:
    TensorGrid y_grid_, z_grid_;
    int P_ = 1;
    int Q_ = 1;
    std::vector<double> alpha_, sqrt_, u_, v_;
    mutable std::atomic<long> extrapolations_{0};
};

/// Builds the table from a cell table; z_box has one interval per entry of z (row-major Q×P).
/// Throws NumericError naming y when ᾱ(y) is not positive semidefinite.
HomogenizedTable build_homogenized_table(const CoefficientSpec& spec, const CellTable& cells, const YBox& z_box,
                                         int z_nodes_per_axis, int threads = 1);

struct EllipticityReport {
    bool passed = true;
    double min_eigenvalue = 0.0;
    Eigen::VectorXd argmin_y;
    double lambda = 0.0;     ///< structural constant of the coefficient model, for comparison
    double margin = 0.0;
    std::string message;
};

/// Smallest eigenvalue of ᾱ over the y nodes; fails when it does not exceed `margin`.
EllipticityReport check_ellipticity(const HomogenizedTable& table, double lambda, double margin = 1e-6);

struct AlphaN {
    Eigen::MatrixXd alpha_n;        ///< α_n(x, y, y′), P×P
    Eigen::MatrixXd alpha_bar_n;    ///< ∫ α_n(·,y,y′) p(·,y′) dx
    Eigen::MatrixXd alpha_bar_n_alt;///< ∫ α(·,y) p_m(·,y) p(·,y′)/p_m(·,y′) dx
    Eigen::MatrixXd alpha_n_nodal;  ///< α_n(·, y, y′) at the nodes, N^P × P²
};

/// α_n(x,y,y′) = p_m(x,y)/p_m(x,y′)·α(x,y) and both forms of its p(·,y′)-average.
/// Cell values at y and y′ come from the table interpolant. Throws NumericError when
/// p_m(·, y′) drops below `floor`.
AlphaN alpha_n(const CoefficientSpec& spec, const MollifiedDensity& density, const Eigen::VectorXd& x,
               const Eigen::VectorXd& y, const Eigen::VectorXd& y_prime, double floor = 1e-8);

}  // namespace homz
