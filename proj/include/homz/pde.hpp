#pragma once

#include "homz/cell_problems.hpp"
#include "homz/coefficients.hpp"
#include "homz/homogenized.hpp"
#include "homz/torus.hpp"

#include <Eigen/Dense>

#include <memory>
#include <string>
#include <vector>

namespace homz {

enum class Dealias { automatic, on, off };
Dealias dealias_from_name(const std::string& name);

struct SolverSettings {
    double dt_init = 1e-4;   ///< first trial step in reversed time
    double rtol = 1e-8;
    double atol = 1e-10;
    double dt_min = 1e-8;    ///< step-size underflow guard
    double fixed_dt = 0.0;   ///< > 0 selects fixed steps of at most this size (no error control)
    int n_out = 200;         ///< number of stored time intervals on [0, T]
    Dealias dealias = Dealias::automatic;
    bool record_hessian = false;
    long max_steps = 20'000'000;
};

struct SolverStats {
    long steps = 0;
    long rejected = 0;
    long rhs_evals = 0;
    double min_dt = 0.0;
    double max_dt = 0.0;
    bool dealiased = false;
};

/// θ on a uniform time grid t_k = k·T/n_out with spectral spatial derivatives.
/// Per slice: theta (M^P × Q), theta_t = ∂θ/∂t, grad (M^P × QP, column ℓ*P + i),
/// grad_t = ∂∇θ/∂t and optionally hess (M^P × QP², column (ℓ*P + i)*P + j).
struct DecouplingField {
    std::string system;
    TorusGrid grid;
    int Q = 1;
    double T = 0.0;
    std::vector<double> times;
    std::vector<Eigen::MatrixXd> theta, theta_t, grad, grad_t, hess;
    std::vector<double> hess_sup;  ///< per slice sup_x |∇²θ| (Frobenius), when recorded
    SolverStats stats;

    std::size_t slices() const { return times.size(); }
    double sup_abs() const;                 ///< sup over slices and nodes of |θ|
    double sup_grad() const;                ///< sup over slices and nodes of |∇θ| (Frobenius)
    double sup_hessian() const;             ///< sup of hess_sup
};

/// Coefficients of the reversed-time system θ_τ = ½ Σ A_ij ∂_ij θ + Σ B_i ∂_i θ + V.
class PdeModel {
public:
    virtual ~PdeModel() = default;
    virtual int P() const = 0;
    virtual int Q() const = 0;
    /// True when A, B or V depend on θ or ∇θ.
    virtual bool nonlinear() const = 0;
    /// Called once per evaluation grid before any coefficients() call; node coordinates are given row-wise.
    virtual void prepare(const Eigen::MatrixXd& nodes) = 0;
    /// Coefficients at prepared node k with values θ (Q) and ∇θ (Q×P row-major).
    /// A is P×P row-major, B has P entries, V has Q entries.
    virtual void coefficients(Eigen::Index k, const double* theta, const double* grad, double* A, double* B,
                              double* V) = 0;
    virtual std::string label() const = 0;
};

/// Oscillatory system: A = a(kx, θ), B = k b(kx, θ) + c(kx, θ, ∇θ), V = k e(kx, θ) + f(kx, θ, ∇θ).
/// Coefficients that do not depend on θ or ∇θ are cached per node.
class EpsilonModel : public PdeModel {
public:
    EpsilonModel(const CoefficientSpec& spec, int k);
    int P() const override { return spec_.P(); }
    int Q() const override { return spec_.Q(); }
    bool nonlinear() const override;
    void prepare(const Eigen::MatrixXd& nodes) override;
    void coefficients(Eigen::Index k, const double* theta, const double* grad, double* A, double* B,
                      double* V) override;
    std::string label() const override;

private:
    CoefficientSpec spec_;
    int k_;
    bool cache_a_, cache_b_, cache_c_, cache_e_, cache_f_;
    Eigen::MatrixXd nodes_;
    std::vector<double> ca_, cb_, cc_, ce_, cf_;
    std::vector<double> slots_, tmp_;
};

/// Homogenized system: A = ᾱ(θ), B = ū(θ, ∇θ), V = v̄(θ, ∇θ) from a table.
class LimitModel : public PdeModel {
public:
    explicit LimitModel(std::shared_ptr<const HomogenizedTable> table, std::string label = "limit");
    int P() const override { return table_->P(); }
    int Q() const override { return table_->Q(); }
    bool nonlinear() const override;
    void prepare(const Eigen::MatrixXd&) override {}
    void coefficients(Eigen::Index k, const double* theta, const double* grad, double* A, double* B,
                      double* V) override;
    std::string label() const override { return label_; }

private:
    std::shared_ptr<const HomogenizedTable> table_;
    std::string label_;
};

/// Method-of-lines solve with Dormand–Prince 5(4) stepping in reversed time from θ(T) = terminal.
DecouplingField solve_pde(PdeModel& model, const Eigen::MatrixXd& terminal, double T, const TorusGrid& grid,
                          const SolverSettings& settings);

/// H sampled at the grid nodes (M^P × Q).
Eigen::MatrixXd sample_terminal(const CoefficientSpec& spec, const TorusGrid& grid);

DecouplingField solve_limit_system(std::shared_ptr<const HomogenizedTable> table, const Eigen::MatrixXd& terminal,
                                   double T, const TorusGrid& grid, const SolverSettings& settings = {});

/// Requires M ≥ 16 k; throws DiscretizationError otherwise.
DecouplingField solve_epsilon_system(const CoefficientSpec& spec, int k, double T, const TorusGrid& grid,
                                     const SolverSettings& settings = {});

/// Regularized data: H_n = H * ρ_n on the grid and a table whose v̄ is replaced by v̄ * ρ_n in (y, z).
struct MollifiedData {
    int n = 1;
    Eigen::MatrixXd H_n;                               ///< M^P × Q
    std::shared_ptr<const HomogenizedTable> table_n;   ///< ᾱ, ū unchanged; v̄ mollified
    long truncated_nodes = 0;                          ///< table nodes whose kernel support left the box
    double sup_H_change = 0.0;                         ///< sup |H_n − H| at the nodes
};

MollifiedData mollify_terminal_and_driver(std::shared_ptr<const HomogenizedTable> table,
                                          const Eigen::MatrixXd& terminal, const TorusGrid& grid, int n,
                                          int points_per_axis = 16);

/// ζ_n with the Hessian recorded at every slice.
DecouplingField solve_regularized_system(const MollifiedData& data, double T, const TorusGrid& grid,
                                         SolverSettings settings = {});

/// Empirical spatial Hölder monitor of ∇ₓθ over the slices with t ≤ T − η.
/// increments[j] = sup |∇θ(t, x + s_j e_i) − ∇θ(t, x)| for shifts s_j = 2^j/M; the exponent is the
/// log-log slope between the smallest and largest shift and quotient = max_j increments[j] / s_j^exponent.
struct HolderMonitor {
    double eta = 0.0;
    std::vector<double> shifts, increments;
    double exponent = 0.0;
    double quotient = 0.0;
};
HolderMonitor gradient_holder_monitor(const DecouplingField& field, double eta, int levels = 4);

/// Spectral gradient (M^P × QP) and Hessian (M^P × QP²) of a nodal field (M^P × Q).
struct GradientHessian {
    Eigen::MatrixXd grad;
    Eigen::MatrixXd hess;
};
GradientHessian field_gradient_and_hessian(const TorusGrid& grid, const Eigen::MatrixXd& values);

struct MollificationChoice {
    int m = 1;
    bool warning = false;        ///< no candidate satisfied the inequality; the largest was returned
    double hessian_sup = 0.0;
    double y_bound = 0.0;
    bool ball_truncated = false; ///< part of the |y| ≤ y_bound ball lies outside the usable table region
    std::vector<int> candidates;
    std::vector<double> density_gaps;  ///< sup_y ‖p_m − p‖₂ per candidate
    std::vector<double> products;      ///< hessian_sup · gap per candidate
};

/// Smallest candidate m ≥ n with sup|∇²ζ_n| · sup_{|y| ≤ y_bound} ‖p_m(·,y) − p(·,y)‖₂ ≤ 1/n.
/// The y-supremum runs over table nodes inside the ball whose kernel support stays in the table box.
MollificationChoice select_mollification_index(std::shared_ptr<const CellTable> cells, double hessian_sup, int n,
                                               const std::vector<int>& m_candidates, double y_bound);
MollificationChoice select_mollification_index(std::shared_ptr<const CellTable> cells, const DecouplingField& zeta_n,
                                               int n, const std::vector<int>& m_candidates, double y_bound);

/// Evaluates a decoupling field at arbitrary (t, x): spectral upsampling of every slice,
/// 4-point Lagrange interpolation per axis and cubic Hermite interpolation in time.
class FieldSampler {
public:
    FieldSampler() = default;
    /// `fine_nodes` ≤ 0 picks max(1024, 4M) for P = 1 and max(64, M) otherwise.
    explicit FieldSampler(const DecouplingField& field, int fine_nodes = 0);

    int P() const { return P_; }
    int Q() const { return Q_; }
    double T() const { return T_; }
    /// θ (Q entries) and optionally ∇θ (Q×P row-major) at (t, x).
    void eval(double t, const double* x, double* theta, double* grad) const;

private:
    int P_ = 1, Q_ = 1, Mf_ = 0, slices_ = 0;
    double T_ = 0.0, dt_ = 0.0;
    std::size_t n_ = 0;
    // Per slice, node-major blocks of width Q (theta, theta_t) or QP (grad, grad_t).
    std::vector<double> theta_, theta_t_, grad_, grad_t_;
};

}  // namespace homz
