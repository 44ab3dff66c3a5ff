#include "homz/cell_problems.hpp"

#include "homz/errors.hpp"

#include <cmath>
#include <sstream>
#include <thread>

namespace homz {

CenteringMode centering_from_name(const std::string& name) {
    if (name == "strict") return CenteringMode::strict;
    if (name == "auto" || name == "automatic") return CenteringMode::automatic;
    throw UsageError("centering mode must be 'strict' or 'auto', got '" + name + "'");
}

const char* centering_name(CenteringMode mode) { return mode == CenteringMode::strict ? "strict" : "auto"; }

double l2_norm(const Eigen::VectorXd& nodal) { return std::sqrt(nodal.squaredNorm() / static_cast<double>(nodal.size())); }

namespace {

std::string format_y(const Eigen::VectorXd& y) {
    std::ostringstream os;
    os << "y=(";
    for (Eigen::Index j = 0; j < y.size(); ++j) os << (j ? "," : "") << y[j];
    os << ")";
    return os.str();
}

/// Solves the square bordered system [[A, 1], [1ᵀ, 0]] used for both the invariant density and the Poisson problems.
Eigen::MatrixXd bordered(const Eigen::MatrixXd& A) {
    const Eigen::Index n = A.rows();
    Eigen::MatrixXd B(n + 1, n + 1);
    B.topLeftCorner(n, n) = A;
    B.topRightCorner(n, 1).setOnes();
    B.bottomLeftCorner(1, n).setOnes();
    B(n, n) = 0.0;
    return B;
}

}  // namespace

// ---------------------------------------------------------------------------
// Invariant density

Eigen::VectorXd solve_invariant_density(const GeneratorMatrix& L) {
    if (L.adjoint) throw UsageError("solve_invariant_density expects the generator, not its adjoint");
    const Eigen::Index n = L.matrix.rows();
    Eigen::MatrixXd B = bordered(L.matrix.transpose());
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + 1);
    rhs[n] = static_cast<double>(n);  // mean(p) = 1
    Eigen::VectorXd sol = B.partialPivLu().solve(rhs);
    if (!sol.allFinite())
        throw DiscretizationError("singular invariant-density system at " + format_y(L.y) + "; increase N");
    Eigen::VectorXd p = sol.head(n);
    double residual = (L.matrix.transpose() * p).cwiseAbs().maxCoeff();
    const double scale = L.matrix.cwiseAbs().rowwise().sum().maxCoeff() * p.cwiseAbs().maxCoeff();
    if (residual > 1e-8 * (1.0 + scale))
        throw DiscretizationError("invariant-density system not solved accurately at " + format_y(L.y) +
                                  " (residual " + std::to_string(residual) + "); increase N");
    if (p.minCoeff() <= 0.0)
        throw DiscretizationError("invariant density not positive at " + format_y(L.y) + " (min " +
                                  std::to_string(p.minCoeff()) + "); increase N");
    return p;
}

PeriodicField solve_invariant_density(const CoefficientSpec& spec, const Eigen::VectorXd& y, const TorusGrid& grid) {
    GeneratorMatrix L = assemble_generator(grid, spec, y);
    return PeriodicField(grid, solve_invariant_density(L));
}

// ---------------------------------------------------------------------------
// Poisson problems

PoissonSolver::PoissonSolver(const GeneratorMatrix& L, const Eigen::VectorXd& p, const CellOptions& options)
    : L_(L.matrix), y_(L.y), p_(p), options_(options) {
    if (L.adjoint) throw UsageError("Poisson problems need the generator, not its adjoint");
    if (p.size() != L.matrix.rows()) throw UsageError("density does not match the generator size");
    lu_.compute(bordered(L.matrix));
}

Eigen::VectorXd PoissonSolver::solve(const Eigen::VectorXd& phi, CenteringMode mode, PoissonDiagnostics* diag,
                                     const std::string& label) const {
    const Eigen::Index n = phi.size();
    if (!phi.allFinite()) throw NumericError("non-finite Poisson right-hand side " + label);
    const double integral = phi.dot(p_) / static_cast<double>(n);
    const double scale = phi.cwiseAbs().maxCoeff();
    if (mode == CenteringMode::strict && std::fabs(integral) > options_.comp_tol * std::max(scale, 1e-300)) {
        std::ostringstream os;
        os << label << " not centered against p at " << format_y(y_) << ": integral of phi*p = " << integral;
        throw CompatibilityError(os.str());
    }
    Eigen::VectorXd centered = phi.array() - integral;
    Eigen::VectorXd rhs(n + 1);
    rhs.head(n) = -centered;
    rhs[n] = 0.0;
    Eigen::VectorXd sol = lu_.solve(rhs);
    if (!sol.allFinite()) throw DiscretizationError("singular Poisson system at " + format_y(y_) + "; increase N");
    Eigen::VectorXd phihat = sol.head(n);
    double residual = (L_ * phihat + centered).cwiseAbs().maxCoeff();
    if (residual > 1e3 * options_.residual_target * (1.0 + scale))
        throw DiscretizationError("Poisson residual " + std::to_string(residual) + " for " + label + " at " +
                                  format_y(y_) + "; increase N");
    if (diag) {
        diag->residual = residual;
        diag->shift = integral;
        diag->multiplier = sol[n];
    }
    return phihat;
}

PeriodicField solve_poisson(const GeneratorMatrix& L, const PeriodicField& phi, const PeriodicField& p,
                            double comp_tol, PoissonDiagnostics* diag) {
    if (phi.components() != 1) throw UsageError("solve_poisson expects a scalar field");
    CellOptions opt;
    opt.comp_tol = comp_tol;
    PoissonSolver solver(L, p.values.col(0), opt);
    return PeriodicField(phi.grid, solver.solve(phi.values.col(0), CenteringMode::strict, diag));
}

// ---------------------------------------------------------------------------
// Correctors and their y-derivatives

namespace {

/// Generator, density, factorized solver and correctors at one y.
struct BaseCell {
    Eigen::VectorXd y;
    GeneratorMatrix L;
    Eigen::VectorXd p;
    std::unique_ptr<PoissonSolver> solver;
    Eigen::MatrixXd bhat, ehat;  // n × P, n × Q
    Eigen::VectorXd b_shift, e_shift;
    double max_residual = 0.0;
};

BaseCell make_base(const CoefficientSpec& spec, const Eigen::VectorXd& y, const TorusGrid& grid,
                   CenteringMode mode, const CellOptions& options) {
    BaseCell c;
    c.y = y;
    c.L = assemble_generator(grid, spec, y);
    c.p = solve_invariant_density(c.L);
    c.solver = std::make_unique<PoissonSolver>(c.L, c.p, options);
    PeriodicField b = sample_coefficient(grid, spec, Coefficient::b, y);
    PeriodicField e = sample_coefficient(grid, spec, Coefficient::e, y);
    const int P = spec.P(), Q = spec.Q();
    c.bhat.resize(grid.size(), P);
    c.ehat.resize(grid.size(), Q);
    c.b_shift = Eigen::VectorXd::Zero(P);
    c.e_shift = Eigen::VectorXd::Zero(Q);
    for (int l = 0; l < P; ++l) {
        PoissonDiagnostics d;
        c.bhat.col(l) = c.solver->solve(b.values.col(l), mode, &d, "b_" + std::to_string(l + 1));
        c.b_shift[l] = d.shift;
        c.max_residual = std::max(c.max_residual, d.residual);
    }
    for (int j = 0; j < Q; ++j) {
        PoissonDiagnostics d;
        c.ehat.col(j) = c.solver->solve(e.values.col(j), mode, &d, "e_" + std::to_string(j + 1));
        c.e_shift[j] = d.shift;
        c.max_residual = std::max(c.max_residual, d.residual);
    }
    return c;
}

double fd_step(double h_y, double yj) { return h_y * std::max(1.0, std::fabs(yj)); }

/// ∂/∂y_j of (a, b, e) at y by central differences, and the derivative operator ∂L_y/∂y_j.
struct CoefficientDerivative {
    Eigen::MatrixXd dL;
    Eigen::MatrixXd db;  // n × P
    Eigen::MatrixXd de;  // n × Q
};

CoefficientDerivative coefficient_derivative(const CoefficientSpec& spec, const Eigen::VectorXd& y,
                                             const TorusGrid& grid, int j, double h_y) {
    const double h = fd_step(h_y, y[j]);
    Eigen::VectorXd yp = y, ym = y;
    yp[j] += h;
    ym[j] -= h;
    OperatorCoefficients cp = sample_operator_coefficients(grid, spec, yp);
    OperatorCoefficients cm = sample_operator_coefficients(grid, spec, ym);
    OperatorCoefficients d;
    d.a = (cp.a - cm.a) / (2 * h);
    d.b = (cp.b - cm.b) / (2 * h);
    CoefficientDerivative out;
    out.dL = assemble_operator(grid, d);
    out.db = d.b;
    out.de = (sample_coefficient(grid, spec, Coefficient::e, yp).values -
              sample_coefficient(grid, spec, Coefficient::e, ym).values) /
             (2 * h);
    return out;
}

/// Parameter-derivative cell problem at the base point: returns (∇_y b̂, ∇_y ê) as n × PQ, n × QQ.
void first_derivatives(const CoefficientSpec& spec, const BaseCell& base, const TorusGrid& grid, double h_y,
                       Eigen::MatrixXd& dy_b, Eigen::MatrixXd& dy_e, double& max_residual, double& max_recenter) {
    const int P = spec.P(), Q = spec.Q();
    dy_b.resize(grid.size(), P * Q);
    dy_e.resize(grid.size(), Q * Q);
    for (int j = 0; j < Q; ++j) {
        CoefficientDerivative cd = coefficient_derivative(spec, base.y, grid, j, h_y);
        for (int l = 0; l < P; ++l) {
            Eigen::VectorXd rhs = cd.db.col(l) + cd.dL * base.bhat.col(l);
            PoissonDiagnostics d;
            dy_b.col(l * Q + j) = base.solver->solve(rhs, CenteringMode::automatic, &d, "d b_hat / d y");
            max_residual = std::max(max_residual, d.residual);
            max_recenter = std::max(max_recenter, std::fabs(d.shift));
        }
        for (int m = 0; m < Q; ++m) {
            Eigen::VectorXd rhs = cd.de.col(m) + cd.dL * base.ehat.col(m);
            PoissonDiagnostics d;
            dy_e.col(m * Q + j) = base.solver->solve(rhs, CenteringMode::automatic, &d, "d e_hat / d y");
            max_residual = std::max(max_residual, d.residual);
            max_recenter = std::max(max_recenter, std::fabs(d.shift));
        }
    }
}

/// Applies ∂/∂x_i to each column: input n × (R*Q) with layout r*Q + j, output layout (r*P + i)*Q + j.
Eigen::MatrixXd x_gradient_of(const std::vector<Eigen::MatrixXd>& D1, const Eigen::MatrixXd& f, int R, int P, int Q) {
    Eigen::MatrixXd out(f.rows(), R * P * Q);
    for (int r = 0; r < R; ++r)
        for (int i = 0; i < P; ++i)
            for (int j = 0; j < Q; ++j) out.col((r * P + i) * Q + j) = D1[static_cast<std::size_t>(i)] * f.col(r * Q + j);
    return out;
}

std::vector<Eigen::MatrixXd> first_derivative_matrices(const TorusGrid& grid) {
    std::vector<Eigen::MatrixXd> D1;
    for (int i = 0; i < grid.P(); ++i) D1.push_back(diff_matrix(grid, i, 1));
    return D1;
}

}  // namespace

Correctors solve_correctors(const CoefficientSpec& spec, const Eigen::VectorXd& y, const TorusGrid& grid,
                            CenteringMode mode, const CellOptions& options) {
    BaseCell base = make_base(spec, y, grid, mode, options);
    auto D1 = first_derivative_matrices(grid);
    const int P = spec.P(), Q = spec.Q();
    Correctors c;
    c.p = PeriodicField(grid, base.p);
    c.bhat = PeriodicField(grid, base.bhat);
    c.ehat = PeriodicField(grid, base.ehat);
    c.grad_x_bhat = PeriodicField(grid, x_gradient_of(D1, base.bhat, P, P, 1));
    c.grad_x_ehat = PeriodicField(grid, x_gradient_of(D1, base.ehat, Q, P, 1));
    c.b_shift = base.b_shift;
    c.e_shift = base.e_shift;
    c.max_residual = base.max_residual;
    return c;
}

FirstYDerivatives corrector_first_y_derivatives(const CoefficientSpec& spec, const Eigen::VectorXd& y,
                                                const TorusGrid& grid, double h_y, const CellOptions& options) {
    BaseCell base = make_base(spec, y, grid, options.centering, options);
    FirstYDerivatives out;
    Eigen::MatrixXd db, de;
    first_derivatives(spec, base, grid, h_y, db, de, out.max_residual, out.max_recentering);
    out.dy_bhat = PeriodicField(grid, db);
    out.dy_ehat = PeriodicField(grid, de);
    return out;
}

CorrectorDerivatives corrector_y_derivatives(const CoefficientSpec& spec, const Eigen::VectorXd& y,
                                             const TorusGrid& grid, double h_y, const CellOptions& options) {
    CellOptions opt = options;
    opt.h_y = h_y;
    CellSolution cell = solve_cell(spec, y, grid, opt);
    CorrectorDerivatives out;
    out.dy_bhat = cell.dy_bhat;
    out.dy_ehat = cell.dy_ehat;
    out.dyy_bhat = cell.dyy_bhat;
    out.dyy_ehat = cell.dyy_ehat;
    out.dxy_bhat = cell.dxy_bhat;
    out.dxy_ehat = cell.dxy_ehat;
    out.max_residual = cell.max_residual;
    out.max_recentering = cell.max_recentering;
    return out;
}

DensityDerivative density_y_derivative(const CoefficientSpec& spec, const Eigen::VectorXd& y, const TorusGrid& grid,
                                       double h_y) {
    const int Q = spec.Q();
    DensityDerivative out;
    out.dy_p = PeriodicField(grid, Q);
    out.l2_norms.resize(Q);
    for (int j = 0; j < Q; ++j) {
        const double h = fd_step(h_y, y[j]);
        Eigen::VectorXd yp = y, ym = y;
        yp[j] += h;
        ym[j] -= h;
        Eigen::VectorXd pp = solve_invariant_density(assemble_generator(grid, spec, yp));
        Eigen::VectorXd pm = solve_invariant_density(assemble_generator(grid, spec, ym));
        out.dy_p.values.col(j) = (pp - pm) / (2 * h);
        out.l2_norms[j] = l2_norm(out.dy_p.values.col(j));
    }
    return out;
}

CellSolution solve_cell(const CoefficientSpec& spec, const Eigen::VectorXd& y, const TorusGrid& grid,
                        const CellOptions& options) {
    if (grid.P() != spec.P()) throw UsageError("grid dimension does not match the coefficient dimension");
    if (y.size() != spec.Q()) throw UsageError("y has wrong dimension");
    const int P = spec.P(), Q = spec.Q();
    const double h_y = options.h_y;
    auto D1 = first_derivative_matrices(grid);

    CellSolution cell;
    cell.y = y;
    BaseCell base = make_base(spec, y, grid, options.centering, options);
    cell.p = PeriodicField(grid, base.p);
    cell.bhat = PeriodicField(grid, base.bhat);
    cell.ehat = PeriodicField(grid, base.ehat);
    cell.grad_x_bhat = PeriodicField(grid, x_gradient_of(D1, base.bhat, P, P, 1));
    cell.grad_x_ehat = PeriodicField(grid, x_gradient_of(D1, base.ehat, Q, P, 1));
    cell.b_shift = base.b_shift;
    cell.e_shift = base.e_shift;
    cell.max_residual = base.max_residual;

    Eigen::MatrixXd db, de;
    first_derivatives(spec, base, grid, h_y, db, de, cell.max_residual, cell.max_recentering);
    cell.dy_bhat = PeriodicField(grid, db);
    cell.dy_ehat = PeriodicField(grid, de);
    cell.dxy_bhat = PeriodicField(grid, x_gradient_of(D1, db, P, P, Q));
    cell.dxy_ehat = PeriodicField(grid, x_gradient_of(D1, de, Q, P, Q));

    // Second y-derivatives and ∂p/∂y from neighbouring base cells.
    Eigen::MatrixXd dyy_b(grid.size(), P * Q * Q), dyy_e(grid.size(), Q * Q * Q);
    cell.dy_p = PeriodicField(grid, Q);
    for (int k = 0; k < Q; ++k) {
        const double h = fd_step(h_y, y[k]);
        Eigen::VectorXd yp = y, ym = y;
        yp[k] += h;
        ym[k] -= h;
        BaseCell bp = make_base(spec, yp, grid, CenteringMode::automatic, options);
        BaseCell bm = make_base(spec, ym, grid, CenteringMode::automatic, options);
        Eigen::MatrixXd dbp, dep, dbm, dem;
        first_derivatives(spec, bp, grid, h_y, dbp, dep, cell.max_residual, cell.max_recentering);
        first_derivatives(spec, bm, grid, h_y, dbm, dem, cell.max_residual, cell.max_recentering);
        for (int r = 0; r < P * Q; ++r) dyy_b.col(r * Q + k) = (dbp.col(r) - dbm.col(r)) / (2 * h);
        for (int r = 0; r < Q * Q; ++r) dyy_e.col(r * Q + k) = (dep.col(r) - dem.col(r)) / (2 * h);
        cell.dy_p.values.col(k) = (bp.p - bm.p) / (2 * h);
    }
    cell.dyy_bhat = PeriodicField(grid, dyy_b);
    cell.dyy_ehat = PeriodicField(grid, dyy_e);
    return cell;
}

// ---------------------------------------------------------------------------
// Tables

const char* cell_field_name(CellField field) {
    static const char* names[] = {"p",       "bhat",    "ehat",     "grad_x_bhat", "grad_x_ehat", "dy_bhat",
                                  "dy_ehat", "dyy_bhat", "dyy_ehat", "dxy_bhat",    "dxy_ehat",    "dy_p"};
    return names[static_cast<int>(field)];
}

const PeriodicField& cell_field(const CellSolution& cell, CellField field) {
    return cell_field(const_cast<CellSolution&>(cell), field);
}

PeriodicField& cell_field(CellSolution& cell, CellField field) {
    switch (field) {
        case CellField::p: return cell.p;
        case CellField::bhat: return cell.bhat;
        case CellField::ehat: return cell.ehat;
        case CellField::grad_x_bhat: return cell.grad_x_bhat;
        case CellField::grad_x_ehat: return cell.grad_x_ehat;
        case CellField::dy_bhat: return cell.dy_bhat;
        case CellField::dy_ehat: return cell.dy_ehat;
        case CellField::dyy_bhat: return cell.dyy_bhat;
        case CellField::dyy_ehat: return cell.dyy_ehat;
        case CellField::dxy_bhat: return cell.dxy_bhat;
        case CellField::dxy_ehat: return cell.dxy_ehat;
        case CellField::dy_p: return cell.dy_p;
    }
    return cell.p;
}

CellTable::CellTable(TensorGrid y_grid, TorusGrid grid, std::vector<CellSolution> nodes, int P, int Q)
    : y_grid_(std::move(y_grid)), grid_(grid), nodes_(std::move(nodes)), P_(P), Q_(Q) {
    if (nodes_.size() != y_grid_.size()) throw UsageError("cell table node count does not match its y-grid");
}

Eigen::MatrixXd CellTable::interpolate_field(CellField field, const Eigen::VectorXd& y, bool* clamped) const {
    Stencil st;
    y_grid_.stencil(y.data(), st);
    if (clamped) *clamped = st.clamped;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(grid_.size(), cell_field(nodes_[st.index[0]], field).components());
    for (int c = 0; c < st.count; ++c) {
        if (st.weight[c] == 0.0) continue;
        out.noalias() += st.weight[c] * cell_field(nodes_[st.index[c]], field).values;
    }
    return out;
}

CellSolution CellTable::interpolate(const Eigen::VectorXd& y, bool* clamped) const {
    CellSolution out;
    out.y = y;
    for (int f = 0; f < kCellFieldCount; ++f) {
        auto field = static_cast<CellField>(f);
        cell_field(out, field) = PeriodicField(grid_, interpolate_field(field, y, clamped));
    }
    out.b_shift = Eigen::VectorXd::Zero(P_);
    out.e_shift = Eigen::VectorXd::Zero(Q_);
    return out;
}

CellTable build_cell_table(const CoefficientSpec& spec, const YBox& y_box, int nodes_per_axis, const TorusGrid& grid,
                           const CellOptions& options, int threads) {
    const int Q = spec.Q();
    if (static_cast<int>(y_box.size()) != Q) throw UsageError("y-box must have one interval per y dimension");
    if (nodes_per_axis < 1) throw UsageError("nodes_per_axis must be positive");
    std::vector<UniformAxis> axes;
    for (const auto& [lo, hi] : y_box) {
        if (hi < lo) throw UsageError("y-box interval is reversed");
        int n = (hi == lo) ? 1 : nodes_per_axis;
        if (n == 1 && hi != lo) throw UsageError("a nondegenerate y-interval needs at least two nodes");
        axes.push_back({lo, hi, n});
    }
    TensorGrid yg(axes);
    std::vector<CellSolution> nodes(yg.size());
    std::vector<std::string> failures(yg.size());
    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < yg.size(); i += stride) {
            std::vector<double> yv = yg.node(i);
            Eigen::VectorXd y = Eigen::Map<Eigen::VectorXd>(yv.data(), Q);
            try {
                nodes[i] = solve_cell(spec, y, grid, options);
            } catch (const std::exception& err) {
                failures[i] = "cell solve failed at " + format_y(y) + ": " + err.what();
            }
        }
    };
    const auto nthreads = static_cast<std::size_t>(std::max(1, threads));
    if (nthreads == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(work, t, nthreads);
        for (auto& th : pool) th.join();
    }
    for (const auto& f : failures)
        if (!f.empty()) throw DiscretizationError(f);
    return CellTable(yg, grid, std::move(nodes), spec.P(), Q);
}

// ---------------------------------------------------------------------------
// Mollified density

MollifiedDensity::MollifiedDensity(std::shared_ptr<const CellTable> table, int m, int points_per_axis)
    : table_(std::move(table)), m_(m) {
    if (!table_) throw UsageError("mollification needs a cell table");
    if (m < 1) throw UsageError("mollification index m must be positive");
    rule_ = ball_rule(table_->Q(), points_per_axis);
}

bool MollifiedDensity::supported(const Eigen::VectorXd& y) const {
    const double r = 1.0 / m_;
    const auto& yg = table_->y_grid();
    for (int j = 0; j < yg.dims(); ++j) {
        const UniformAxis& a = yg.axis(j);
        if (a.n == 1) continue;  // single-node axes are treated as y-independent
        double tol = 1e-12 * (1 + std::fabs(a.lo) + std::fabs(a.hi));
        if (y[j] - r < a.lo - tol || y[j] + r > a.hi + tol) return false;
    }
    return true;
}

Eigen::VectorXd MollifiedDensity::field(const Eigen::VectorXd& y) const {
    if (!supported(y)) {
        std::ostringstream os;
        os << "mollifier support of radius 1/" << m_ << " around " << format_y(y) << " leaves the table y-box";
        throw DomainError(os.str());
    }
    Eigen::VectorXd out = Eigen::VectorXd::Zero(table_->grid().size());
    Eigen::VectorXd yq(y.size());
    for (std::size_t k = 0; k < rule_.points.size(); ++k) {
        yq = y - rule_.points[k] / static_cast<double>(m_);
        out.noalias() += rule_.weights[k] * table_->interpolate_field(CellField::p, yq).col(0);
    }
    return out;
}

MollifiedDensity mollify_density(std::shared_ptr<const CellTable> table, int m) {
    return MollifiedDensity(std::move(table), m);
}

}  // namespace homz
