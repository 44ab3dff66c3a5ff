#pragma once

#include "homz/coefficients.hpp"
#include "homz/interp.hpp"
#include "homz/mollifier.hpp"
#include "homz/torus.hpp"

#include <Eigen/Dense>

#include <memory>
#include <string>
#include <vector>

namespace homz {

enum class CenteringMode { strict, automatic };

CenteringMode centering_from_name(const std::string& name);
const char* centering_name(CenteringMode mode);

struct CellOptions {
    double comp_tol = 1e-8;          ///< relative tolerance of the centering test
    double residual_target = 1e-9;   ///< expected Poisson residual; 1000× this aborts
    double h_y = 1e-3;               ///< relative step for y finite differences
    CenteringMode centering = CenteringMode::strict;
};

/// Diagnostics of one Poisson solve.
struct PoissonDiagnostics {
    double residual = 0.0;       ///< ‖L φ̂ + (φ − shift)‖∞
    double shift = 0.0;          ///< ∫ φ p subtracted before solving
    double multiplier = 0.0;     ///< bordered-system Lagrange multiplier
};

/// Factorized bordered Poisson operator for one frozen y: [[L, 1], [1ᵀ, 0]].
class PoissonSolver {
public:
    PoissonSolver(const GeneratorMatrix& L, const Eigen::VectorXd& p, const CellOptions& options = {});

    /// Solves L φ̂ + φ = 0 with mean(φ̂) = 0.
    /// `mode == strict` rejects |∫φp| > comp_tol·‖φ‖∞; below the tolerance (or in automatic
    /// mode) φ is recentered by its p-average before solving.
    Eigen::VectorXd solve(const Eigen::VectorXd& phi, CenteringMode mode, PoissonDiagnostics* diag = nullptr,
                          const std::string& label = "phi") const;

    const Eigen::VectorXd& density() const { return p_; }

private:
    Eigen::MatrixXd L_;
    Eigen::VectorXd y_;
    Eigen::VectorXd p_;
    CellOptions options_;
    Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
};

/// Invariant density of L_y: L_y* p = 0 with mean(p) = 1, via the bordered adjoint system.
PeriodicField solve_invariant_density(const CoefficientSpec& spec, const Eigen::VectorXd& y, const TorusGrid& grid);
Eigen::VectorXd solve_invariant_density(const GeneratorMatrix& L);

/// Solves L φ̂ + φ = 0, mean(φ̂) = 0. Throws CompatibilityError when φ is not centered against p.
PeriodicField solve_poisson(const GeneratorMatrix& L, const PeriodicField& phi, const PeriodicField& p,
                            double comp_tol = 1e-8, PoissonDiagnostics* diag = nullptr);

/// Correctors b̂, ê and their x-gradients at one y.
/// Component layouts: grad_x_bhat(ℓ*P + i) = ∂b̂_ℓ/∂x_i, grad_x_ehat(j*P + i) = ∂ê_j/∂x_i.
struct Correctors {
    PeriodicField p;
    PeriodicField bhat, ehat, grad_x_bhat, grad_x_ehat;
    Eigen::VectorXd b_shift, e_shift;  ///< p-averages removed from b, e (automatic mode)
    double max_residual = 0.0;
};

Correctors solve_correctors(const CoefficientSpec& spec, const Eigen::VectorXd& y, const TorusGrid& grid,
                            CenteringMode mode, const CellOptions& options = {});

/// y-derivatives of the correctors.
/// Layouts: dy_bhat(ℓ*Q + j) = ∂b̂_ℓ/∂y_j, dyy_bhat((ℓ*Q + j)*Q + k) = ∂²b̂_ℓ/∂y_j∂y_k,
/// dxy_bhat((ℓ*P + i)*Q + j) = ∂²b̂_ℓ/∂x_i∂y_j; ê analogously with Q in place of the leading P.
struct CorrectorDerivatives {
    PeriodicField dy_bhat, dy_ehat, dyy_bhat, dyy_ehat, dxy_bhat, dxy_ehat;
    double max_residual = 0.0;
    double max_recentering = 0.0;
};

CorrectorDerivatives corrector_y_derivatives(const CoefficientSpec& spec, const Eigen::VectorXd& y,
                                             const TorusGrid& grid, double h_y, const CellOptions& options = {});

/// First y-derivatives ∇_y b̂, ∇_y ê at y through the parameter-derivative cell problem
/// L_y ∂φ̂/∂y_j + ∂φ/∂y_j + (∂L_y/∂y_j) φ̂ = 0 (right-hand side recentered against p).
struct FirstYDerivatives {
    PeriodicField dy_bhat, dy_ehat;
    double max_residual = 0.0;
    double max_recentering = 0.0;
};
FirstYDerivatives corrector_first_y_derivatives(const CoefficientSpec& spec, const Eigen::VectorXd& y,
                                                const TorusGrid& grid, double h_y, const CellOptions& options = {});

/// ∂p/∂y_j by central differences (one component per j), with the L² norms of each component.
struct DensityDerivative {
    PeriodicField dy_p;
    Eigen::VectorXd l2_norms;
};
DensityDerivative density_y_derivative(const CoefficientSpec& spec, const Eigen::VectorXd& y, const TorusGrid& grid,
                                       double h_y);

/// Every torus field attached to one frozen y.
struct CellSolution {
    Eigen::VectorXd y;
    PeriodicField p;
    PeriodicField bhat, ehat, grad_x_bhat, grad_x_ehat;
    PeriodicField dy_bhat, dy_ehat, dyy_bhat, dyy_ehat, dxy_bhat, dxy_ehat;
    PeriodicField dy_p;
    Eigen::VectorXd b_shift, e_shift;
    double max_residual = 0.0;
    double max_recentering = 0.0;
};

CellSolution solve_cell(const CoefficientSpec& spec, const Eigen::VectorXd& y, const TorusGrid& grid,
                        const CellOptions& options = {});

/// Identifiers of the fields stored in a CellSolution.
enum class CellField { p, bhat, ehat, grad_x_bhat, grad_x_ehat, dy_bhat, dy_ehat, dyy_bhat, dyy_ehat, dxy_bhat, dxy_ehat, dy_p };
constexpr int kCellFieldCount = 12;
const char* cell_field_name(CellField field);
const PeriodicField& cell_field(const CellSolution& cell, CellField field);
PeriodicField& cell_field(CellSolution& cell, CellField field);

/// Cell solutions on a rectangular y-grid with multilinear interpolation in y.
class CellTable {
public:
    CellTable() = default;
    CellTable(TensorGrid y_grid, TorusGrid grid, std::vector<CellSolution> nodes, int P, int Q);

    const TensorGrid& y_grid() const { return y_grid_; }
    const TorusGrid& grid() const { return grid_; }
    int P() const { return P_; }
    int Q() const { return Q_; }
    std::size_t size() const { return nodes_.size(); }
    const CellSolution& node(std::size_t i) const { return nodes_[i]; }
    const std::vector<CellSolution>& nodes() const { return nodes_; }

    /// Multilinear blend of every field at y (clamped to the box; `clamped` reports it).
    CellSolution interpolate(const Eigen::VectorXd& y, bool* clamped = nullptr) const;
    /// Multilinear blend of one field at y.
    Eigen::MatrixXd interpolate_field(CellField field, const Eigen::VectorXd& y, bool* clamped = nullptr) const;

private:
    TensorGrid y_grid_;
    TorusGrid grid_;
    std::vector<CellSolution> nodes_;
    int P_ = 1;
    int Q_ = 1;
};

/// Box [lo_j, hi_j] per y-axis.
using YBox = std::vector<std::pair<double, double>>;

CellTable build_cell_table(const CoefficientSpec& spec, const YBox& y_box, int nodes_per_axis, const TorusGrid& grid,
                           const CellOptions& options = {}, int threads = 1);

/// p_m(x, y) = ∫ p(x, y − u/m) ρ_Q(u) du, evaluated by ball quadrature over the table's y-interpolant.
class MollifiedDensity {
public:
    MollifiedDensity(std::shared_ptr<const CellTable> table, int m, int points_per_axis = 16);

    int m() const { return m_; }
    const CellTable& table() const { return *table_; }

    /// True when the full mollifier support around y lies inside the table's y-box.
    bool supported(const Eigen::VectorXd& y) const;
    /// Nodal values of p_m(·, y). Throws DomainError when the support leaves the y-box.
    Eigen::VectorXd field(const Eigen::VectorXd& y) const;

private:
    std::shared_ptr<const CellTable> table_;
    int m_;
    BallRule rule_;
};

MollifiedDensity mollify_density(std::shared_ptr<const CellTable> table, int m);

/// ‖f‖₂ on the torus (root mean square of nodal values).
double l2_norm(const Eigen::VectorXd& nodal);

}  // namespace homz
