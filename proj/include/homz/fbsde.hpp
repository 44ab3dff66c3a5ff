#pragma once

#include "homz/cell_problems.hpp"
#include "homz/coefficients.hpp"
#include "homz/expression.hpp"
#include "homz/homogenized.hpp"
#include "homz/interp.hpp"
#include "homz/pde.hpp"

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace homz {

/// Smallest power of two n ≥ min_steps with span·k²/n ≤ fast_step (Euler step measured in fast time).
int euler_steps(int k, double span, double fast_step = 0.05, int min_steps = 64);

/// Torus fields tabulated on a y-grid: multilinear in y, 4-point Lagrange in x on a spectrally
/// refined grid. Queries outside the y-box are clamped and counted.
class TorusFieldTable {
public:
    TorusFieldTable() = default;
    /// node_values[i] holds the fields at y-node i as N^P × C nodal values on `grid`.
    /// `fine_nodes` ≤ 0 picks max(1024, 8N) for P = 1, 4N for P = 2 and 2N for P = 3.
    TorusFieldTable(TensorGrid y_grid, const TorusGrid& grid, const std::vector<Eigen::MatrixXd>& node_values,
                    int fine_nodes = 0);

    int P() const { return P_; }
    int components() const { return C_; }
    const TensorGrid& y_grid() const { return y_grid_; }
    /// All C components at (x, y); x is reduced modulo 1.
    void eval(const double* x, const double* y, double* out) const;
    /// Components [first, first + count) only.
    void eval(const double* x, const double* y, int first, int count, double* out) const;
    long clamped() const { return clamped_ ? clamped_->load(std::memory_order_relaxed) : 0; }
    /// Largest Euclidean norm of components [first, first + count) over the refined nodes.
    double sup_norm(int first, int count) const;

private:
    TensorGrid y_grid_;
    int P_ = 1, C_ = 0, Mf_ = 0;
    std::size_t n_ = 0;
    std::vector<double> values_;  ///< [(node * n_ + x) * C + c]
    std::shared_ptr<std::atomic<long>> clamped_;
};

/// Cell fields along paths, including ∇²_yy b̂ and ∇²_yy ê.
struct PathCellValues {
    CellPoint cell;
    std::vector<double> dyy_bhat;  ///< (ℓ*Q + j)*Q + k
    std::vector<double> dyy_ehat;  ///< (m*Q + j)*Q + k
};

/// Evaluates every CellSolution field of a cell table at (x̄, y).
class CellFieldSampler {
public:
    explicit CellFieldSampler(std::shared_ptr<const CellTable> cells, int fine_nodes = 0);

    int P() const { return P_; }
    int Q() const { return Q_; }
    const CellTable& cells() const { return *cells_; }
    /// p, b̂, ê and their x-gradients; with `derivatives` also every y-derivative field.
    void eval(const double* xbar, const double* y, PathCellValues& out, bool derivatives) const;
    long clamped() const { return table_.clamped(); }
    /// sup of |b̂| over the refined interpolation nodes.
    double sup_bhat() const { return sup_bhat_; }

private:
    std::shared_ptr<const CellTable> cells_;
    TorusFieldTable table_;
    int P_ = 1, Q_ = 1;
    int base_count_ = 0;  ///< components of p, b̂, ê, ∇ₓb̂, ∇ₓê
    double sup_bhat_ = 0.0;
};

/// p_m at the y-nodes of the density's cell table whose mollifier support fits in the box.
TorusFieldTable mollified_density_table(const MollifiedDensity& density);

struct Estimate {
    double mean = 0.0;
    double se = 0.0;
};

/// Per-path scalar functionals, one named column each.
class PathFunctionals {
public:
    std::size_t add(const std::string& name);
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    std::size_t index(const std::string& name) const;
    const std::vector<std::string>& names() const { return names_; }
    void allocate(int paths) { values_.setZero(paths, static_cast<Eigen::Index>(names_.size())); }
    double& at(int path, std::size_t column) { return values_(path, static_cast<Eigen::Index>(column)); }
    Eigen::VectorXd column(const std::string& name) const { return values_.col(static_cast<Eigen::Index>(index(name))); }
    Estimate estimate(const std::string& name) const;
    int paths() const { return static_cast<int>(values_.rows()); }
    const Eigen::MatrixXd& values() const { return values_; }

private:
    std::vector<std::string> names_;
    std::map<std::string, std::size_t> index_;
    Eigen::MatrixXd values_;
};

/// Mean and standard error of per-path samples.
Estimate estimate_of(const Eigen::VectorXd& samples);
/// Mean and standard error of a − b computed path by path (common random numbers).
Estimate paired_difference(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
/// Talay–Tubaro extrapolation of per-path samples at steps h, h/2 (, h/4): 2f₂ − f₁ or (8f₃ − 6f₂ + f₁)/3.
Estimate richardson(const std::vector<Eigen::VectorXd>& levels);

enum class Verdict { pass, fail, abstain };
const char* verdict_name(Verdict v);
/// pass when a − b > k·se, fail when b − a > k·se, abstain otherwise (se of the paired difference).
Verdict decrease_verdict(const Estimate& difference, double k = 2.0);
/// Decrease verdict from two independent estimates (combined standard error).
Verdict decrease_verdict(const Estimate& a, const Estimate& b, double k = 2.0);

/// Auxiliary SDE driven by ζ_n and p_{m(n)}.
struct AuxiliaryInput {
    int n = 1;
    int m = 1;
    const FieldSampler* zeta = nullptr;
    const TorusFieldTable* density = nullptr;  ///< p_{m(n)}(x, y)
    double floor = 1e-6;                       ///< smallest admissible p_m in the diffusion ratio
};

/// Companion process G in an ergodic statistic.
enum class Companion { x_hat, auxiliary, constant };

/// φ(t, x̄, y, g) over the layout x1..xP, y1..yQ, t, g1..gP (z slots unused).
struct ErgodicInput {
    std::string label;
    Expression phi;
    Companion companion = Companion::constant;
    int auxiliary = 0;          ///< index into SimInputs::auxiliary when companion == auxiliary
    Eigen::VectorXd g_constant; ///< companion value when companion == constant (defaults to x₀)
};

/// Compiles φ against the ergodic layout.
Expression compile_test_function(const std::string& source, int P, int Q);

struct SimConfig {
    int k = 1;                 ///< ε = 1/k
    double t0 = 0.0;
    double T = 1.0;
    Eigen::VectorXd x0;
    int n_paths = 1000;
    int n_steps = 64;          ///< Euler steps on [t0, T]
    int brownian_steps = 0;    ///< increments drawn on this finer grid and summed (0 = n_steps)
    std::uint64_t seed = 0;
    int record_paths = 0;      ///< paths whose node values are kept in full
};

struct SimInputs {
    const CoefficientSpec* spec = nullptr;
    const FieldSampler* theta_eps = nullptr;  ///< required: Y = θ_ε(t, X), Z = ∇θ_ε(t, X)
    const FieldSampler* theta = nullptr;      ///< limit field: convergence metrics and the limit simulation
    const CellFieldSampler* cells = nullptr;  ///< modified processes, remainders, martingales, auxiliary SDEs
    const HomogenizedTable* table = nullptr;  ///< with theta: limit FBSDE driven by the same increments
    bool remainders = true;
    std::vector<AuxiliaryInput> auxiliary;
    std::vector<ErgodicInput> ergodic;
};

/// Node values of one path (rows = time nodes).
struct RecordedPath {
    Eigen::VectorXd t;
    Eigen::MatrixXd X, Xbar, Y, Z, dB;
    Eigen::MatrixXd X_hat, Y_hat, Z_hat, bhat, ehat, grad_x_ehat;
    Eigen::MatrixXd R, R1, R2, S, S1, S2;   ///< R = R1 + R2 (drift and Itô parts), likewise S
    Eigen::MatrixXd N, M, QN, QM, QMN;      ///< quadratic variations row-major
    Eigen::MatrixXd theta_X, X_lim;
    std::vector<Eigen::MatrixXd> U, V, W, W_hat;
    std::vector<Eigen::VectorXd> ergodic;   ///< running integral per ergodic input
};

struct PathEnsemble {
    SimConfig config;
    double h = 0.0;
    PathFunctionals f;
    std::vector<RecordedPath> recorded;
    double sup_abs_Y = 0.0;        ///< over all paths and nodes
    double sup_abs_theta_eps = 0.0;
    long cell_clamps = 0;
    long density_clamps = 0;
    double min_density_ratio = 0.0;
};

/// Euler–Maruyama for the forward SDE through the decoupling field, with every derived process
/// accumulated along each path (Itô sums at left endpoints). Paths draw increments from
/// independent substreams of `seed`, so ensembles with equal seeds and Brownian grids share noise.
PathEnsemble simulate(const SimConfig& config, const SimInputs& inputs);

/// Column names written by simulate.
namespace fn {
std::string X_T(int i);
std::string X_T2(int i);
std::string Y_t0(int j);
std::string QN_T(int i, int j);
std::string QN_realized(int i, int j);
std::string QM_T(int i, int j);
std::string QMN_T(int i, int j);
std::string lim_X_T(int i);
std::string lim_X_T2(int i);
std::string lim_QN_T(int i, int j);
std::string aux(int a, const std::string& what);
std::string ergodic(int e);
inline const char* sup_X2 = "sup_X2";
inline const char* sup_abs_Y = "sup_abs_Y";
inline const char* int_Z2_sq = "int_Z2_sq";
inline const char* lemma_B1 = "lemma_B1";
inline const char* sup_Xhat_gap = "sup_Xhat_gap";
inline const char* sup_R2 = "sup_R2";
inline const char* sup_S2 = "sup_S2";
inline const char* int_R1_sq = "int_R1_sq";
inline const char* int_R2_sq = "int_R2_sq";
inline const char* int_S1_sq = "int_S1_sq";
inline const char* int_S2_sq = "int_S2_sq";
inline const char* sup_Y_theta2 = "sup_Y_theta2";
inline const char* int_Z_theta2 = "int_Z_theta2";
inline const char* local_sup_Y_theta2 = "local_sup_Y_theta2";
inline const char* local_int_Z_theta2 = "local_int_Z_theta2";
}  // namespace fn

}  // namespace homz
