#include "homz/fbsde.hpp"

#include "homz/errors.hpp"
#include "homz/spectral.hpp"

#include <boost/random/normal_distribution.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace homz {

int euler_steps(int k, double span, double fast_step, int min_steps) {
    if (k < 1 || !(span >= 0) || !(fast_step > 0) || min_steps < 1) throw UsageError("invalid Euler step rule inputs");
    const double kk = static_cast<double>(k) * k;
    int n = 1;
    while (n < min_steps) n *= 2;
    while (span * kk / n > fast_step) {
        if (n > (1 << 28)) throw UsageError("Euler step rule asks for more than 2^28 steps");
        n *= 2;
    }
    return n;
}

namespace {

void lagrange4(double f, double* w) {
    w[0] = -f * (f - 1) * (f - 2) / 6;
    w[1] = (f + 1) * (f - 1) * (f - 2) / 2;
    w[2] = -(f + 1) * f * (f - 2) / 2;
    w[3] = (f + 1) * f * (f - 1) / 6;
}

std::string point_text(const double* v, int n) {
    std::ostringstream os;
    os << "(";
    for (int i = 0; i < n; ++i) os << (i ? "," : "") << v[i];
    os << ")";
    return os.str();
}

bool outside_box(const TensorGrid& g, const double* y) {
    for (int d = 0; d < g.dims(); ++d) {
        const UniformAxis& a = g.axis(d);
        if (a.n > 1 && (y[d] < a.lo || y[d] > a.hi || std::isnan(y[d]))) return true;
    }
    return false;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tabulated torus fields

TorusFieldTable::TorusFieldTable(TensorGrid y_grid, const TorusGrid& grid,
                                 const std::vector<Eigen::MatrixXd>& node_values, int fine_nodes)
    : y_grid_(std::move(y_grid)), P_(grid.P()), clamped_(std::make_shared<std::atomic<long>>(0)) {
    if (node_values.size() != y_grid_.size()) throw UsageError("one nodal field block per y-node is required");
    if (node_values.empty()) throw UsageError("field table needs at least one y-node");
    C_ = static_cast<int>(node_values.front().cols());
    const int N = grid.N();
    Mf_ = fine_nodes > 0 ? fine_nodes : (P_ == 1 ? std::max(1024, 8 * N) : (P_ == 2 ? 4 * N : 2 * N));
    if (Mf_ < N || Mf_ % 2 != 0) throw UsageError("refined grid must be even and at least as fine as the cell grid");
    SpectralGrid coarse(P_, N), fine(P_, Mf_);
    n_ = fine.real_size();
    values_.assign(node_values.size() * n_ * static_cast<std::size_t>(C_), 0.0);
    std::vector<cplx> hat(coarse.complex_size()), fhat(fine.complex_size());
    std::vector<double> buf(n_);
    for (std::size_t i = 0; i < node_values.size(); ++i) {
        const Eigen::MatrixXd& v = node_values[i];
        if (v.rows() != grid.size() || v.cols() != C_) throw UsageError("nodal field block has the wrong shape");
        for (int c = 0; c < C_; ++c) {
            Eigen::VectorXd col = v.col(c);
            coarse.forward(col.data(), hat.data());
            coarse.pad_to(hat.data(), fine, fhat.data());
            fine.backward(fhat.data(), buf.data());
            for (std::size_t e = 0; e < n_; ++e)
                values_[(i * n_ + e) * static_cast<std::size_t>(C_) + static_cast<std::size_t>(c)] = buf[e];
        }
    }
}

void TorusFieldTable::eval(const double* x, const double* y, double* out) const { eval(x, y, 0, C_, out); }

void TorusFieldTable::eval(const double* x, const double* y, int first, int count, double* out) const {
    int idx[3][4];
    double w[3][4];
    for (int d = 0; d < P_; ++d) {
        const double pos = (x[d] - std::floor(x[d])) * Mf_;
        const int i = static_cast<int>(std::floor(pos));
        lagrange4(pos - i, w[d]);
        for (int o = 0; o < 4; ++o) idx[d][o] = ((i + o - 1) % Mf_ + Mf_) % Mf_;
    }
    Stencil st;
    y_grid_.stencil(y, st);
    if (outside_box(y_grid_, y)) clamped_->fetch_add(1, std::memory_order_relaxed);
    std::fill(out, out + count, 0.0);
    const auto sC = static_cast<std::size_t>(C_);
    const int corners = 1 << (2 * P_);
    for (int s = 0; s < st.count; ++s) {
        const std::size_t base = st.index[s] * n_;
        for (int c = 0; c < corners; ++c) {
            double wt = st.weight[s];
            std::size_t node = 0, stride = 1;
            for (int d = 0; d < P_; ++d) {
                const int o = (c >> (2 * d)) & 3;
                wt *= w[d][o];
                node += stride * static_cast<std::size_t>(idx[d][o]);
                stride *= static_cast<std::size_t>(Mf_);
            }
            const double* src = &values_[(base + node) * sC + static_cast<std::size_t>(first)];
            for (int k = 0; k < count; ++k) out[k] += wt * src[k];
        }
    }
}

double TorusFieldTable::sup_norm(int first, int count) const {
    double best = 0.0;
    const auto sC = static_cast<std::size_t>(C_);
    for (std::size_t r = 0; r < values_.size() / sC; ++r) {
        double s = 0.0;
        for (int k = 0; k < count; ++k) s += values_[r * sC + static_cast<std::size_t>(first + k)] * values_[r * sC + static_cast<std::size_t>(first + k)];
        best = std::max(best, std::sqrt(s));
    }
    return best;
}

// ---------------------------------------------------------------------------
// Cell fields along paths

CellFieldSampler::CellFieldSampler(std::shared_ptr<const CellTable> cells, int fine_nodes) : cells_(std::move(cells)) {
    if (!cells_ || cells_->size() == 0) throw UsageError("cell field sampler needs a nonempty cell table");
    P_ = cells_->P();
    Q_ = cells_->Q();
    static const CellField order[] = {CellField::p,        CellField::bhat,     CellField::ehat,
                                      CellField::grad_x_bhat, CellField::grad_x_ehat, CellField::dy_bhat,
                                      CellField::dy_ehat,  CellField::dyy_bhat, CellField::dyy_ehat,
                                      CellField::dxy_bhat, CellField::dxy_ehat};
    base_count_ = 1 + P_ + Q_ + P_ * P_ + Q_ * P_;
    const int total = base_count_ + P_ * Q_ + Q_ * Q_ + P_ * Q_ * Q_ + Q_ * Q_ * Q_ + P_ * P_ * Q_ + Q_ * P_ * Q_;
    std::vector<Eigen::MatrixXd> blocks;
    blocks.reserve(cells_->size());
    for (std::size_t i = 0; i < cells_->size(); ++i) {
        const CellSolution& node = cells_->node(i);
        Eigen::MatrixXd b(cells_->grid().size(), total);
        Eigen::Index col = 0;
        for (CellField f : order) {
            const PeriodicField& pf = cell_field(node, f);
            if (pf.values.rows() != b.rows())
                throw UsageError(std::string("cell table lacks the field ") + cell_field_name(f));
            b.middleCols(col, pf.values.cols()) = pf.values;
            col += pf.values.cols();
        }
        if (col != total) throw UsageError("cell table fields have unexpected widths");
        blocks.push_back(std::move(b));
    }
    table_ = TorusFieldTable(cells_->y_grid(), cells_->grid(), blocks, fine_nodes);
    sup_bhat_ = table_.sup_norm(1, P_);
}

void CellFieldSampler::eval(const double* xbar, const double* y, PathCellValues& out, bool derivatives) const {
    CellPoint& c = out.cell;
    if (c.P != P_ || c.Q != Q_ || c.bhat.size() != static_cast<std::size_t>(P_)) c.resize(P_, Q_);
    const int count = derivatives ? table_.components() : base_count_;
    double buf[1024];
    std::vector<double> heap;
    double* v = buf;
    if (count > 1024) {
        heap.resize(static_cast<std::size_t>(count));
        v = heap.data();
    }
    table_.eval(xbar, y, 0, count, v);
    std::size_t o = 0;
    auto take = [&](std::vector<double>& dst, int n) {
        dst.assign(v + o, v + o + n);
        o += static_cast<std::size_t>(n);
    };
    c.p = v[o++];
    take(c.bhat, P_);
    take(c.ehat, Q_);
    take(c.grad_x_bhat, P_ * P_);
    take(c.grad_x_ehat, Q_ * P_);
    if (!derivatives) return;
    take(c.dy_bhat, P_ * Q_);
    take(c.dy_ehat, Q_ * Q_);
    take(out.dyy_bhat, P_ * Q_ * Q_);
    take(out.dyy_ehat, Q_ * Q_ * Q_);
    take(c.dxy_bhat, P_ * P_ * Q_);
    take(c.dxy_ehat, Q_ * P_ * Q_);
}

TorusFieldTable mollified_density_table(const MollifiedDensity& density) {
    const CellTable& cells = density.table();
    const TensorGrid& yg = cells.y_grid();
    const double r = 1.0 / density.m();
    std::vector<UniformAxis> axes;
    std::vector<std::pair<int, int>> ranges;
    for (int d = 0; d < yg.dims(); ++d) {
        const UniformAxis& a = yg.axis(d);
        if (a.n == 1) {
            axes.push_back(a);
            ranges.emplace_back(0, 0);
            continue;
        }
        int i0 = -1, i1 = -1;
        for (int i = 0; i < a.n; ++i) {
            const double v = a.at(i);
            if (v - r >= a.lo - 1e-12 && v + r <= a.hi + 1e-12) {
                if (i0 < 0) i0 = i;
                i1 = i;
            }
        }
        if (i0 < 0)
            throw DomainError("mollifier of radius 1/" + std::to_string(density.m()) +
                              " leaves the table y-box at every node of axis " + std::to_string(d + 1));
        axes.push_back(UniformAxis{a.at(i0), a.at(i1), i1 - i0 + 1});
        ranges.emplace_back(i0, i1);
    }
    TensorGrid sub(axes);
    std::vector<Eigen::MatrixXd> blocks;
    blocks.reserve(sub.size());
    for (std::size_t i = 0; i < sub.size(); ++i) {
        // Map the sub-grid node back to the parent grid so the query hits a table node exactly.
        std::size_t rest = i, parent = 0, stride = 1;
        for (int d = 0; d < yg.dims(); ++d) {
            const auto n = static_cast<std::size_t>(axes[static_cast<std::size_t>(d)].n);
            const std::size_t j = rest % n;
            rest /= n;
            parent += stride * (j + static_cast<std::size_t>(ranges[static_cast<std::size_t>(d)].first));
            stride *= static_cast<std::size_t>(yg.axis(d).n);
        }
        Eigen::VectorXd y = cells.node(parent).y;
        blocks.emplace_back(density.field(y));
    }
    return TorusFieldTable(sub, cells.grid(), blocks);
}

// ---------------------------------------------------------------------------
// Estimates

std::size_t PathFunctionals::add(const std::string& name) {
    auto it = index_.find(name);
    if (it != index_.end()) return it->second;
    names_.push_back(name);
    index_[name] = names_.size() - 1;
    return names_.size() - 1;
}

std::size_t PathFunctionals::index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("no path functional named '" + name + "'");
    return it->second;
}

Estimate PathFunctionals::estimate(const std::string& name) const { return estimate_of(column(name)); }

Estimate estimate_of(const Eigen::VectorXd& samples) {
    Estimate e;
    const auto n = samples.size();
    if (n == 0) return e;
    e.mean = samples.mean();
    if (n > 1) e.se = std::sqrt((samples.array() - e.mean).square().sum() / static_cast<double>(n - 1) / n);
    return e;
}

Estimate paired_difference(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size()) throw UsageError("paired difference needs equal path counts");
    return estimate_of(a - b);
}

Estimate richardson(const std::vector<Eigen::VectorXd>& levels) {
    if (levels.size() == 2) return estimate_of(2.0 * levels[1] - levels[0]);
    if (levels.size() == 3) return estimate_of((8.0 * levels[2] - 6.0 * levels[1] + levels[0]) / 3.0);
    throw UsageError("extrapolation supports two or three step levels");
}

const char* verdict_name(Verdict v) {
    switch (v) {
        case Verdict::pass: return "pass";
        case Verdict::fail: return "fail";
        case Verdict::abstain: return "abstain";
    }
    return "?";
}

Verdict decrease_verdict(const Estimate& d, double k) {
    if (d.mean > k * d.se) return Verdict::pass;
    if (-d.mean > k * d.se) return Verdict::fail;
    return Verdict::abstain;
}

Verdict decrease_verdict(const Estimate& a, const Estimate& b, double k) {
    return decrease_verdict(Estimate{a.mean - b.mean, std::hypot(a.se, b.se)}, k);
}

Expression compile_test_function(const std::string& source, int P, int Q) {
    return Expression::compile(source, VariableLayout::coefficient(P, Q, P));
}

namespace fn {
std::string X_T(int i) { return "X_T_" + std::to_string(i + 1); }
std::string X_T2(int i) { return "X_T_sq_" + std::to_string(i + 1); }
std::string Y_t0(int j) { return "Y_t0_" + std::to_string(j + 1); }
std::string QN_T(int i, int j) { return "QN_T_" + std::to_string(i + 1) + std::to_string(j + 1); }
std::string QN_realized(int i, int j) { return "QN_realized_" + std::to_string(i + 1) + std::to_string(j + 1); }
std::string QM_T(int i, int j) { return "QM_T_" + std::to_string(i + 1) + std::to_string(j + 1); }
std::string QMN_T(int i, int j) { return "QMN_T_" + std::to_string(i + 1) + std::to_string(j + 1); }
std::string lim_X_T(int i) { return "lim_X_T_" + std::to_string(i + 1); }
std::string lim_X_T2(int i) { return "lim_X_T_sq_" + std::to_string(i + 1); }
std::string lim_QN_T(int i, int j) { return "lim_QN_T_" + std::to_string(i + 1) + std::to_string(j + 1); }
std::string aux(int a, const std::string& what) { return "aux" + std::to_string(a) + "_" + what; }
std::string ergodic(int e) { return "ergodic_" + std::to_string(e); }
}  // namespace fn

// ---------------------------------------------------------------------------
// Simulation

namespace {

/// Row-major small matrix helpers.
void matmul(const double* A, const double* B, double* C, int n, int k, int m) {
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            double s = 0.0;
            for (int l = 0; l < k; ++l) s += A[i * k + l] * B[l * m + j];
            C[i * m + j] = s;
        }
}

double norm2(const double* v, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += v[i] * v[i];
    return s;
}

struct ErgodicPlan {
    bool tabulated = false;
    std::vector<double> phibar_nodes;  ///< per cell-table y-node
};

struct AuxState {
    std::vector<double> U, V, W, What, G, sig, Gs, u_drift;
    double sup_UX2 = 0, sup_VY2 = 0, int_WZ2 = 0, sup_abs_UX = 0, local_int_WZ2 = 0;
    PathCellValues cell;
};

}  // namespace

PathEnsemble simulate(const SimConfig& cfg, const SimInputs& in) {
    if (!in.spec || !in.theta_eps) throw UsageError("simulation needs a coefficient set and the field θ_ε");
    const CoefficientSpec& spec = *in.spec;
    const int P = spec.P(), Q = spec.Q();
    if (cfg.k < 1) throw UsageError("epsilon must be 1/k for a positive integer k");
    if (cfg.x0.size() != P) throw UsageError("x0 must have P = " + std::to_string(P) + " entries");
    if (!(cfg.t0 >= 0) || !(cfg.T >= cfg.t0)) throw UsageError("times must satisfy 0 <= t0 <= T");
    if (cfg.T > in.theta_eps->T() * (1 + 1e-12)) throw UsageError("θ_ε does not cover [t0, T]");
    if (cfg.n_paths < 1) throw UsageError("n_paths must be positive");
    const bool degenerate = cfg.T == cfg.t0;
    if (!degenerate && cfg.n_steps < 16) throw UsageError("n_steps must be at least 16");
    const int n = degenerate ? 0 : cfg.n_steps;
    const int fine = cfg.brownian_steps > 0 ? cfg.brownian_steps : std::max(n, 1);
    if (!degenerate && fine % n != 0) throw UsageError("brownian_steps must be a multiple of n_steps");
    const int ratio = degenerate ? 1 : fine / n;
    const double h = degenerate ? 0.0 : (cfg.T - cfg.t0) / n;
    const double hf = degenerate ? 0.0 : (cfg.T - cfg.t0) / fine;
    const double eps = 1.0 / cfg.k, kk = cfg.k;
    const double t_local = cfg.T - 0.5 * (cfg.T - cfg.t0);
    const bool terminal_exact = std::fabs(cfg.T - in.theta_eps->T()) <= 1e-12 * (1 + cfg.T);

    const CellFieldSampler* cells = in.cells;
    const bool have_theta = in.theta != nullptr;
    const bool limit_sim = have_theta && in.table != nullptr;
    const bool remainders = cells && in.remainders;
    const int n_aux = static_cast<int>(in.auxiliary.size());
    for (const auto& a : in.auxiliary)
        if (!a.zeta || !a.density || !cells) throw UsageError("auxiliary SDEs need ζ_n, p_m and the cell fields");
    for (const auto& e : in.ergodic) {
        if (!cells) throw UsageError("ergodic statistics need the cell fields for p");
        if (e.companion == Companion::x_hat && !cells) throw UsageError("companion X̂ needs the cell fields");
        if (e.companion == Companion::auxiliary && (e.auxiliary < 0 || e.auxiliary >= n_aux))
            throw UsageError("ergodic companion refers to a missing auxiliary process");
    }
    const bool derivatives = remainders || n_aux > 0;

    PathEnsemble out;
    out.config = cfg;
    out.h = h;
    out.min_density_ratio = std::numeric_limits<double>::infinity();
    PathFunctionals& F = out.f;
    std::vector<std::size_t> c_XT(P), c_XT2(P), c_Yt0(Q);
    for (int i = 0; i < P; ++i) c_XT[i] = F.add(fn::X_T(i)), c_XT2[i] = F.add(fn::X_T2(i));
    for (int j = 0; j < Q; ++j) c_Yt0[j] = F.add(fn::Y_t0(j));
    const std::size_t c_supX2 = F.add(fn::sup_X2), c_supY = F.add(fn::sup_abs_Y), c_intZ = F.add(fn::int_Z2_sq),
                      c_B1 = F.add(fn::lemma_B1);
    std::size_t c_xhat = 0, c_supR = 0, c_supS = 0, c_R1 = 0, c_R2 = 0, c_S1 = 0, c_S2 = 0;
    std::vector<std::size_t> c_QN, c_QNr, c_QM, c_QMN;
    if (cells) {
        c_xhat = F.add(fn::sup_Xhat_gap);
        for (int i = 0; i < P; ++i)
            for (int j = 0; j < P; ++j) c_QN.push_back(F.add(fn::QN_T(i, j))), c_QNr.push_back(F.add(fn::QN_realized(i, j)));
        for (int i = 0; i < Q; ++i)
            for (int j = 0; j < Q; ++j) c_QM.push_back(F.add(fn::QM_T(i, j)));
        for (int i = 0; i < Q; ++i)
            for (int j = 0; j < P; ++j) c_QMN.push_back(F.add(fn::QMN_T(i, j)));
    }
    if (remainders) {
        c_supR = F.add(fn::sup_R2), c_supS = F.add(fn::sup_S2);
        c_R1 = F.add(fn::int_R1_sq), c_R2 = F.add(fn::int_R2_sq), c_S1 = F.add(fn::int_S1_sq), c_S2 = F.add(fn::int_S2_sq);
    }
    std::size_t c_supYth = 0, c_intZth = 0, c_lsupYth = 0, c_lintZth = 0;
    if (have_theta) {
        c_supYth = F.add(fn::sup_Y_theta2), c_intZth = F.add(fn::int_Z_theta2);
        c_lsupYth = F.add(fn::local_sup_Y_theta2), c_lintZth = F.add(fn::local_int_Z_theta2);
    }
    std::vector<std::size_t> c_lXT(P), c_lXT2(P), c_lQN;
    if (limit_sim) {
        for (int i = 0; i < P; ++i) c_lXT[i] = F.add(fn::lim_X_T(i)), c_lXT2[i] = F.add(fn::lim_X_T2(i));
        for (int i = 0; i < P; ++i)
            for (int j = 0; j < P; ++j) c_lQN.push_back(F.add(fn::lim_QN_T(i, j)));
    }
    std::vector<std::array<std::size_t, 5>> c_aux(static_cast<std::size_t>(n_aux));
    for (int a = 0; a < n_aux; ++a)
        c_aux[a] = {F.add(fn::aux(a, "sup_UX2")), F.add(fn::aux(a, "sup_VY2")), F.add(fn::aux(a, "int_WZ2")),
                    F.add(fn::aux(a, "sup_abs_UX")), F.add(fn::aux(a, "local_int_WZ2"))};
    std::vector<std::size_t> c_erg;
    for (std::size_t e = 0; e < in.ergodic.size(); ++e) c_erg.push_back(F.add(fn::ergodic(static_cast<int>(e))));
    F.allocate(cfg.n_paths);

    // Ergodic averages: φ̄ at the table y-nodes when φ reads only x̄ (then the y-blend is exact).
    const CoefficientSlots eslots{P, Q, P};
    std::vector<ErgodicPlan> plans(in.ergodic.size());
    if (!in.ergodic.empty()) {
        const CellTable& ct = cells->cells();
        const TorusGrid& cg = ct.grid();
        for (std::size_t e = 0; e < in.ergodic.size(); ++e) {
            const Expression& phi = in.ergodic[e].phi;
            plans[e].tabulated = !phi.depends_on_range(eslots.y(0), eslots.count());
            if (!plans[e].tabulated) continue;
            std::vector<double> s(eslots.count(), 0.0);
            for (std::size_t i = 0; i < ct.size(); ++i) {
                const Eigen::VectorXd& p = ct.node(i).p.values.col(0);
                double acc = 0.0;
                for (Eigen::Index x = 0; x < cg.size(); ++x) {
                    for (int d = 0; d < P; ++d) s[eslots.x(d)] = cg.coordinate(x, d);
                    acc += phi.eval(s.data()) * p[x];
                }
                plans[e].phibar_nodes.push_back(acc / static_cast<double>(cg.size()));
            }
        }
    }

    const CoefficientSlots& sl = spec.slots();
    const auto sP = static_cast<std::size_t>(P), sQ = static_cast<std::size_t>(Q);
    std::vector<double> slots(sl.count(), 0.0), eslot(eslots.count(), 0.0);
    std::vector<double> X(sP), Xbar(sP), Y(sQ), Z(sQ * sP), dB(sP), sig(sP * sP), a(sP * sP), bb(sP), cc(sP),
        ee(sQ), ff(sQ), drift(sP);
    std::vector<double> G(sP * sP), Zhat(sQ * sP), Xhat(sP), Yhat(sQ), th(sQ), gth(sQ * sP), tmpQP(sQ * sP);
    std::vector<double> Rd(sP), Ri(sP), Sd(sQ), Si(sQ), R1(sP), R2(sP * sP), S1(sQ), S2(sQ * sP), ZaZ(sQ * sQ),
        ZQP(sQ * sP), tmpPP(sP * sP), tmpPQ(sP * sQ);
    std::vector<double> Nv(sP), Mv(sQ), QN(sP * sP), QNr(sP * sP), QM(sQ * sQ), QMN(sQ * sP), dN(sP), dM(sQ),
        Gs(sP * sP), Zs(sQ * sP), GaGt(sP * sP), aGt(sP * sP);
    std::vector<double> Xl(sP), Yl(sQ), Zl(sQ * sP), ul(sP), sql(sP * sP), al(sP * sP), QNl(sP * sP);
    std::vector<double> u_drift(sP), erg(in.ergodic.size()), erg_sup(in.ergodic.size()), gbuf(sP);
    std::vector<AuxState> aux(static_cast<std::size_t>(n_aux));
    for (auto& s : aux) {
        s.U.resize(sP), s.V.resize(sQ), s.W.resize(sQ * sP), s.What.resize(sQ * sP), s.G.resize(sP * sP);
        s.sig.resize(sP * sP), s.Gs.resize(sP * sP), s.u_drift.resize(sP);
    }
    PathCellValues cell;
    cell.cell.resize(P, Q);
    IntegrandWorkspace ws;
    ws.resize(spec);
    std::vector<double> pnodes;  // blended p(·, Y) for untabulated φ̄
    Stencil yst;
    const double sqrt_hf = std::sqrt(hf);

    const long cell_clamps0 = cells ? cells->clamped() : 0;
    std::vector<long> dens_clamps0;
    for (const auto& ai : in.auxiliary) dens_clamps0.push_back(ai.density->clamped());

    for (int path = 0; path < cfg.n_paths; ++path) {
        std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed & 0xffffffffu), static_cast<std::uint32_t>(cfg.seed >> 32),
                          static_cast<std::uint32_t>(path), 0x484f4d5au};
        std::mt19937_64 rng(seq);
        boost::random::normal_distribution<double> normal;
        const bool record = path < cfg.record_paths;
        RecordedPath rec;
        const Eigen::Index rows = n + 1;
        if (record) {
            rec.t.resize(rows);
            auto mk = [&](Eigen::MatrixXd& m, int w) { m.setZero(rows, w); };
            mk(rec.X, P), mk(rec.Xbar, P), mk(rec.Y, Q), mk(rec.Z, Q * P), mk(rec.dB, P);
            if (cells) {
                mk(rec.X_hat, P), mk(rec.Y_hat, Q), mk(rec.Z_hat, Q * P), mk(rec.bhat, P), mk(rec.ehat, Q),
                    mk(rec.grad_x_ehat, Q * P);
                mk(rec.N, P), mk(rec.M, Q), mk(rec.QN, P * P), mk(rec.QM, Q * Q), mk(rec.QMN, Q * P);
            }
            if (remainders) mk(rec.R, P), mk(rec.R1, P), mk(rec.R2, P), mk(rec.S, Q), mk(rec.S1, Q), mk(rec.S2, Q);
            if (have_theta) mk(rec.theta_X, Q);
            if (limit_sim) mk(rec.X_lim, P);
            rec.U.assign(static_cast<std::size_t>(n_aux), Eigen::MatrixXd::Zero(rows, P));
            rec.V.assign(static_cast<std::size_t>(n_aux), Eigen::MatrixXd::Zero(rows, Q));
            rec.W.assign(static_cast<std::size_t>(n_aux), Eigen::MatrixXd::Zero(rows, Q * P));
            rec.W_hat.assign(static_cast<std::size_t>(n_aux), Eigen::MatrixXd::Zero(rows, Q * P));
            rec.ergodic.assign(in.ergodic.size(), Eigen::VectorXd::Zero(rows));
        }
        for (int i = 0; i < P; ++i) X[i] = Xl[i] = cfg.x0[i];
        for (auto& s : aux) {
            for (int i = 0; i < P; ++i) s.U[i] = cfg.x0[i];
            s.sup_UX2 = s.sup_VY2 = s.int_WZ2 = s.sup_abs_UX = s.local_int_WZ2 = 0.0;
        }
        std::fill(Rd.begin(), Rd.end(), 0.0), std::fill(Ri.begin(), Ri.end(), 0.0);
        std::fill(Sd.begin(), Sd.end(), 0.0), std::fill(Si.begin(), Si.end(), 0.0);
        std::fill(Nv.begin(), Nv.end(), 0.0), std::fill(Mv.begin(), Mv.end(), 0.0);
        std::fill(QN.begin(), QN.end(), 0.0), std::fill(QNr.begin(), QNr.end(), 0.0);
        std::fill(QM.begin(), QM.end(), 0.0), std::fill(QMN.begin(), QMN.end(), 0.0);
        std::fill(QNl.begin(), QNl.end(), 0.0);
        std::fill(erg.begin(), erg.end(), 0.0), std::fill(erg_sup.begin(), erg_sup.end(), 0.0);
        double supX2 = 0, supY = 0, intZ2 = 0, B1 = 0, supXhat = 0, supR2 = 0, supS2 = 0, intR1 = 0, intR2 = 0,
               intS1 = 0, intS2 = 0, supYth = 0, intZth = 0, lsupYth = 0, lintZth = 0;

        for (int s = 0; s <= n; ++s) {
            const double t = s == n ? cfg.T : cfg.t0 + s * h;
            const bool step = s < n;
            if (step) {
                std::fill(dB.begin(), dB.end(), 0.0);
                for (int r = 0; r < ratio; ++r)
                    for (int i = 0; i < P; ++i) dB[i] += sqrt_hf * normal(rng);
            }
            for (int i = 0; i < P; ++i) {
                const double v = kk * X[i];
                Xbar[i] = v - std::floor(v);
            }
            in.theta_eps->eval(t, X.data(), Y.data(), Z.data());
            if (s == n && terminal_exact) {
                for (int i = 0; i < P; ++i) slots[sl.x(i)] = X[i];
                spec.H(slots.data(), Y.data());
            }
            for (int i = 0; i < P; ++i) slots[sl.x(i)] = Xbar[i];
            for (int j = 0; j < Q; ++j) slots[sl.y(j)] = Y[j];
            for (int j = 0; j < Q * P; ++j) slots[sl.z(j / P, j % P)] = Z[j];
            slots[sl.t()] = t;
            spec.sigma(slots.data(), sig.data());
            spec.a(slots.data(), a.data());
            spec.b(slots.data(), bb.data());
            spec.c(slots.data(), cc.data());
            spec.e(slots.data(), ee.data());
            spec.f(slots.data(), ff.data());

            supX2 = std::max(supX2, norm2(X.data(), P));
            supY = std::max(supY, std::sqrt(norm2(Y.data(), Q)));
            if (s == 0)
                for (int j = 0; j < Q; ++j) F.at(path, c_Yt0[j]) = Y[j];
            const double Z2 = norm2(Z.data(), Q * P);

            // Cell fields, modified processes and G = I + ∇ₓb̂.
            if (cells) {
                cells->eval(Xbar.data(), Y.data(), cell, derivatives);
                const CellPoint& cp = cell.cell;
                for (int l = 0; l < P; ++l)
                    for (int i = 0; i < P; ++i) G[l * P + i] = (l == i ? 1.0 : 0.0) + cp.grad_x_bhat[l * P + i];
                for (int r = 0; r < Q * P; ++r) Zhat[r] = Z[r] - cp.grad_x_ehat[r];
                for (int i = 0; i < P; ++i) Xhat[i] = X[i] + eps * cp.bhat[i];
                for (int j = 0; j < Q; ++j) Yhat[j] = Y[j] - eps * cp.ehat[j];
                double gap = 0.0;
                for (int i = 0; i < P; ++i) gap += (Xhat[i] - X[i]) * (Xhat[i] - X[i]);
                supXhat = std::max(supXhat, std::sqrt(gap));
            } else {
                for (int l = 0; l < P; ++l)
                    for (int i = 0; i < P; ++i) G[l * P + i] = l == i ? 1.0 : 0.0;
                Zhat = Z;
            }

            // Distance to the limit field.
            if (have_theta) {
                in.theta->eval(t, X.data(), th.data(), gth.data());
                double d = 0.0;
                for (int j = 0; j < Q; ++j) d += (Y[j] - th[j]) * (Y[j] - th[j]);
                supYth = std::max(supYth, d);
                if (t >= t_local - 1e-12 * (1 + std::fabs(t_local))) lsupYth = std::max(lsupYth, d);
                if (step) {
                    matmul(gth.data(), G.data(), tmpQP.data(), Q, P, P);
                    double z = 0.0;
                    for (int r = 0; r < Q * P; ++r) z += (Zhat[r] - tmpQP[r]) * (Zhat[r] - tmpQP[r]);
                    intZth += z * h;
                    if (t >= t_local - 1e-12 * (1 + std::fabs(t_local))) lintZth += z * h;
                }
            }

            // Auxiliary processes at the current node.
            if (n_aux > 0) {
                evaluate_integrands(spec, Xbar.data(), Y.data(), Zhat.data(), cell.cell, ws, u_drift.data(), nullptr,
                                    nullptr);
                for (int ai = 0; ai < n_aux; ++ai) {
                    AuxState& st = aux[static_cast<std::size_t>(ai)];
                    const AuxiliaryInput& inp = in.auxiliary[static_cast<std::size_t>(ai)];
                    inp.zeta->eval(t, st.U.data(), st.V.data(), st.W.data());
                    cells->eval(Xbar.data(), st.V.data(), st.cell, false);
                    for (int l = 0; l < P; ++l)
                        for (int i = 0; i < P; ++i)
                            st.G[l * P + i] = (l == i ? 1.0 : 0.0) + st.cell.cell.grad_x_bhat[l * P + i];
                    matmul(st.W.data(), st.G.data(), st.What.data(), Q, P, P);
                    double ux = 0.0, vy = 0.0, wz = 0.0;
                    for (int i = 0; i < P; ++i) ux += (st.U[i] - X[i]) * (st.U[i] - X[i]);
                    for (int j = 0; j < Q; ++j) vy += (st.V[j] - Y[j]) * (st.V[j] - Y[j]);
                    for (int r = 0; r < Q * P; ++r) wz += (st.What[r] - Zhat[r]) * (st.What[r] - Zhat[r]);
                    st.sup_UX2 = std::max(st.sup_UX2, ux);
                    st.sup_VY2 = std::max(st.sup_VY2, vy);
                    for (int i = 0; i < P; ++i) st.sup_abs_UX = std::max(st.sup_abs_UX, std::fabs(st.U[i] - X[i]));
                    if (step) {
                        st.int_WZ2 += wz * h;
                        if (t >= t_local - 1e-12 * (1 + std::fabs(t_local))) st.local_int_WZ2 += wz * h;
                    }
                    if (record) {
                        for (int i = 0; i < P; ++i) rec.U[ai](s, i) = st.U[i];
                        for (int j = 0; j < Q; ++j) rec.V[ai](s, j) = st.V[j];
                        for (int r = 0; r < Q * P; ++r) rec.W[ai](s, r) = st.W[r], rec.W_hat[ai](s, r) = st.What[r];
                    }
                    if (!step) continue;
                    double pv, py;
                    inp.density->eval(Xbar.data(), st.V.data(), &pv);
                    inp.density->eval(Xbar.data(), Y.data(), &py);
                    if (!(pv >= inp.floor) || !(py >= inp.floor)) {
                        std::ostringstream os;
                        os << "density ratio floor " << inp.floor << " violated at step " << s << " of path " << path
                           << ": p_m(x=" << point_text(Xbar.data(), P) << ", y=" << point_text(st.V.data(), Q)
                           << ")=" << pv << ", p_m(x, y=" << point_text(Y.data(), Q) << ")=" << py;
                        throw NumericError(os.str());
                    }
                    const double rho = std::sqrt(pv / py);
                    out.min_density_ratio = std::min(out.min_density_ratio, rho);
                    for (int i = 0; i < P; ++i) slots[sl.x(i)] = Xbar[i];
                    for (int j = 0; j < Q; ++j) slots[sl.y(j)] = st.V[j];
                    spec.sigma(slots.data(), st.sig.data());
                    for (int j = 0; j < Q; ++j) slots[sl.y(j)] = Y[j];
                    matmul(st.G.data(), st.sig.data(), st.Gs.data(), P, P, P);
                    for (int i = 0; i < P; ++i) {
                        double v = u_drift[i] * h;
                        for (int j = 0; j < P; ++j) v += rho * st.Gs[i * P + j] * dB[j];
                        st.U[i] += v;
                    }
                }
            }

            // Ergodic integrals: sup over nodes of |∫_{t0}^t (φ − φ̄) dr|.
            for (std::size_t e = 0; e < in.ergodic.size(); ++e) {
                erg_sup[e] = std::max(erg_sup[e], std::fabs(erg[e]));
                if (record) rec.ergodic[e][s] = erg[e];
                if (!step) continue;
                const ErgodicInput& ei = in.ergodic[e];
                const double* g = nullptr;
                if (ei.companion == Companion::x_hat) {
                    g = Xhat.data();
                } else if (ei.companion == Companion::auxiliary) {
                    g = aux[static_cast<std::size_t>(ei.auxiliary)].U.data();
                } else {
                    for (int i = 0; i < P; ++i) gbuf[i] = ei.g_constant.size() == P ? ei.g_constant[i] : cfg.x0[i];
                    g = gbuf.data();
                }
                for (int i = 0; i < P; ++i) eslot[eslots.x(i)] = Xbar[i];
                for (int j = 0; j < Q; ++j) eslot[eslots.y(j)] = Y[j];
                eslot[eslots.t()] = t;
                for (int i = 0; i < P; ++i) eslot[eslots.g(i)] = g[i];
                const double phi = ei.phi.eval(eslot.data());
                const CellTable& ct = cells->cells();
                ct.y_grid().stencil(Y.data(), yst);
                double phibar = 0.0;
                if (plans[e].tabulated) {
                    for (int c = 0; c < yst.count; ++c) phibar += yst.weight[c] * plans[e].phibar_nodes[yst.index[c]];
                } else {
                    const TorusGrid& cg = ct.grid();
                    pnodes.assign(static_cast<std::size_t>(cg.size()), 0.0);
                    for (int c = 0; c < yst.count; ++c) {
                        const Eigen::VectorXd& p = ct.node(yst.index[c]).p.values.col(0);
                        for (Eigen::Index x = 0; x < cg.size(); ++x) pnodes[static_cast<std::size_t>(x)] += yst.weight[c] * p[x];
                    }
                    std::vector<double> q = eslot;
                    for (Eigen::Index x = 0; x < cg.size(); ++x) {
                        for (int d = 0; d < P; ++d) q[eslots.x(d)] = cg.coordinate(x, d);
                        phibar += ei.phi.eval(q.data()) * pnodes[static_cast<std::size_t>(x)];
                    }
                    phibar /= static_cast<double>(cg.size());
                }
                erg[e] += (phi - phibar) * h;
            }

            // Remainders, martingales and their brackets.
            if (remainders) {
                double r2 = 0, s2 = 0;
                for (int i = 0; i < P; ++i) r2 += (Rd[i] + Ri[i]) * (Rd[i] + Ri[i]);
                for (int j = 0; j < Q; ++j) s2 += (Sd[j] + Si[j]) * (Sd[j] + Si[j]);
                supR2 = std::max(supR2, r2);
                supS2 = std::max(supS2, s2);
            }
            if (record) {
                rec.t[s] = t;
                for (int i = 0; i < P; ++i) rec.X(s, i) = X[i], rec.Xbar(s, i) = Xbar[i];
                for (int j = 0; j < Q; ++j) rec.Y(s, j) = Y[j];
                for (int r = 0; r < Q * P; ++r) rec.Z(s, r) = Z[r];
                if (step)
                    for (int i = 0; i < P; ++i) rec.dB(s, i) = dB[i];
                if (cells) {
                    const CellPoint& cp = cell.cell;
                    for (int i = 0; i < P; ++i) rec.X_hat(s, i) = Xhat[i], rec.bhat(s, i) = cp.bhat[i], rec.N(s, i) = Nv[i];
                    for (int j = 0; j < Q; ++j) rec.Y_hat(s, j) = Yhat[j], rec.ehat(s, j) = cp.ehat[j], rec.M(s, j) = Mv[j];
                    for (int r = 0; r < Q * P; ++r)
                        rec.Z_hat(s, r) = Zhat[r], rec.grad_x_ehat(s, r) = cp.grad_x_ehat[r], rec.QMN(s, r) = QMN[r];
                    for (int r = 0; r < P * P; ++r) rec.QN(s, r) = QN[r];
                    for (int r = 0; r < Q * Q; ++r) rec.QM(s, r) = QM[r];
                }
                if (remainders) {
                    for (int i = 0; i < P; ++i) rec.R(s, i) = Rd[i] + Ri[i], rec.R1(s, i) = Rd[i], rec.R2(s, i) = Ri[i];
                    for (int j = 0; j < Q; ++j) rec.S(s, j) = Sd[j] + Si[j], rec.S1(s, j) = Sd[j], rec.S2(s, j) = Si[j];
                }
                if (have_theta)
                    for (int j = 0; j < Q; ++j) rec.theta_X(s, j) = th[j];
                if (limit_sim)
                    for (int i = 0; i < P; ++i) rec.X_lim(s, i) = Xl[i];
            }
            if (!step) break;

            intZ2 += Z2 * h;
            B1 += (1 + std::sqrt(norm2(Y.data(), Q))) * Z2 * h;
            if (remainders) {
                const CellPoint& cp = cell.cell;
                // Z a Zᵀ (Q×Q).
                matmul(Z.data(), a.data(), ZQP.data(), Q, P, P);
                for (int j = 0; j < Q; ++j)
                    for (int m = 0; m < Q; ++m) {
                        double v = 0.0;
                        for (int i = 0; i < P; ++i) v += ZQP[j * P + i] * Z[m * P + i];
                        ZaZ[j * Q + m] = v;
                    }
                matmul(Z.data(), sig.data(), Zs.data(), Q, P, P);
                double r1n = 0.0, r2n = 0.0, s1n = 0.0, s2n = 0.0;
                for (int l = 0; l < P; ++l) {
                    double v = 0.0;
                    for (int j = 0; j < Q; ++j) v -= cp.dy_bhat[l * Q + j] * ff[j];
                    for (int j = 0; j < Q; ++j)
                        for (int m = 0; m < Q; ++m) v += 0.5 * cell.dyy_bhat[(l * Q + j) * Q + m] * ZaZ[j * Q + m];
                    R1[l] = eps * v;
                    r1n += R1[l] * R1[l];
                }
                matmul(cp.dy_bhat.data(), Zs.data(), R2.data(), P, Q, P);
                for (int l = 0; l < P; ++l) {
                    double di = 0.0;
                    for (int i = 0; i < P; ++i) {
                        R2[l * P + i] *= eps;
                        r2n += R2[l * P + i] * R2[l * P + i];
                        di += R2[l * P + i] * dB[i];
                    }
                    Rd[l] += R1[l] * h;
                    Ri[l] += di;
                }
                for (int m = 0; m < Q; ++m) {
                    double v = 0.0;
                    for (int j = 0; j < Q; ++j) v -= cp.dy_ehat[m * Q + j] * ff[j];
                    for (int j = 0; j < Q; ++j)
                        for (int q = 0; q < Q; ++q) v += 0.5 * cell.dyy_ehat[(m * Q + j) * Q + q] * ZaZ[j * Q + q];
                    S1[m] = eps * v;
                    s1n += S1[m] * S1[m];
                }
                matmul(cp.dy_ehat.data(), Zs.data(), S2.data(), Q, Q, P);
                for (int m = 0; m < Q; ++m) {
                    double di = 0.0;
                    for (int i = 0; i < P; ++i) {
                        S2[m * P + i] *= eps;
                        s2n += S2[m * P + i] * S2[m * P + i];
                        di += S2[m * P + i] * dB[i];
                    }
                    Sd[m] += S1[m] * h;
                    Si[m] += di;
                }
                intR1 += std::sqrt(r1n) * h;
                intR2 += r2n * h;
                intS1 += std::sqrt(s1n) * h;
                intS2 += s2n * h;
            }
            if (cells) {
                matmul(G.data(), sig.data(), Gs.data(), P, P, P);
                matmul(Zhat.data(), sig.data(), Zs.data(), Q, P, P);
                for (int i = 0; i < P; ++i) {
                    double v = 0.0;
                    for (int j = 0; j < P; ++j) v += Gs[i * P + j] * dB[j];
                    dN[i] = v;
                    Nv[i] += v;
                }
                for (int m = 0; m < Q; ++m) {
                    double v = 0.0;
                    for (int j = 0; j < P; ++j) v += Zs[m * P + j] * dB[j];
                    dM[m] = v;
                    Mv[m] += v;
                }
                // a Gᵀ, then G a Gᵀ, Ẑ a Ẑᵀ and Ẑ a Gᵀ.
                for (int i = 0; i < P; ++i)
                    for (int j = 0; j < P; ++j) {
                        double v = 0.0;
                        for (int l = 0; l < P; ++l) v += a[i * P + l] * G[j * P + l];
                        aGt[i * P + j] = v;
                    }
                matmul(G.data(), aGt.data(), GaGt.data(), P, P, P);
                for (int r = 0; r < P * P; ++r) QN[r] += GaGt[r] * h;
                for (int i = 0; i < P; ++i)
                    for (int j = 0; j < P; ++j) QNr[i * P + j] += dN[i] * dN[j];
                matmul(Zhat.data(), a.data(), ZQP.data(), Q, P, P);
                for (int m = 0; m < Q; ++m)
                    for (int q = 0; q < Q; ++q) {
                        double v = 0.0;
                        for (int i = 0; i < P; ++i) v += ZQP[m * P + i] * Zhat[q * P + i];
                        QM[m * Q + q] += v * h;
                    }
                matmul(Zhat.data(), aGt.data(), tmpQP.data(), Q, P, P);
                for (int r = 0; r < Q * P; ++r) QMN[r] += tmpQP[r] * h;
            }

            // Limit FBSDE on the same increments.
            if (limit_sim) {
                in.theta->eval(t, Xl.data(), Yl.data(), Zl.data());
                in.table->uv_bar(Yl.data(), Zl.data(), ul.data(), nullptr);
                in.table->alpha_sqrt(Yl.data(), sql.data());
                in.table->alpha(Yl.data(), al.data());
                for (int r = 0; r < P * P; ++r) QNl[r] += al[r] * h;
                for (int i = 0; i < P; ++i) {
                    double v = ul[i] * h;
                    for (int j = 0; j < P; ++j) v += sql[i * P + j] * dB[j];
                    Xl[i] += v;
                }
            }

            // Forward Euler step for X.
            for (int i = 0; i < P; ++i) {
                double v = (kk * bb[i] + cc[i]) * h;
                for (int j = 0; j < P; ++j) v += sig[i * P + j] * dB[j];
                X[i] += v;
            }
            for (int i = 0; i < P; ++i)
                if (!std::isfinite(X[i]))
                    throw NumericError("non-finite forward state at step " + std::to_string(s) + " of path " +
                                       std::to_string(path));
        }

        for (int i = 0; i < P; ++i) F.at(path, c_XT[i]) = X[i], F.at(path, c_XT2[i]) = X[i] * X[i];
        F.at(path, c_supX2) = supX2;
        F.at(path, c_supY) = supY;
        F.at(path, c_intZ) = intZ2 * intZ2;
        F.at(path, c_B1) = B1;
        out.sup_abs_Y = std::max(out.sup_abs_Y, supY);
        if (cells) {
            F.at(path, c_xhat) = supXhat;
            for (int r = 0; r < P * P; ++r) F.at(path, c_QN[r]) = QN[r], F.at(path, c_QNr[r]) = QNr[r];
            for (int r = 0; r < Q * Q; ++r) F.at(path, c_QM[r]) = QM[r];
            for (int r = 0; r < Q * P; ++r) F.at(path, c_QMN[r]) = QMN[r];
        }
        if (remainders) {
            F.at(path, c_supR) = supR2, F.at(path, c_supS) = supS2;
            F.at(path, c_R1) = intR1 * intR1, F.at(path, c_R2) = intR2 * intR2;
            F.at(path, c_S1) = intS1 * intS1, F.at(path, c_S2) = intS2 * intS2;
        }
        if (have_theta) {
            F.at(path, c_supYth) = supYth, F.at(path, c_intZth) = intZth;
            F.at(path, c_lsupYth) = lsupYth, F.at(path, c_lintZth) = lintZth;
        }
        if (limit_sim) {
            for (int i = 0; i < P; ++i) F.at(path, c_lXT[i]) = Xl[i], F.at(path, c_lXT2[i]) = Xl[i] * Xl[i];
            for (int r = 0; r < P * P; ++r) F.at(path, c_lQN[r]) = QNl[r];
        }
        for (int ai = 0; ai < n_aux; ++ai) {
            const AuxState& st = aux[static_cast<std::size_t>(ai)];
            const auto& c = c_aux[static_cast<std::size_t>(ai)];
            F.at(path, c[0]) = st.sup_UX2, F.at(path, c[1]) = st.sup_VY2, F.at(path, c[2]) = st.int_WZ2;
            F.at(path, c[3]) = st.sup_abs_UX, F.at(path, c[4]) = st.local_int_WZ2;
        }
        for (std::size_t e = 0; e < in.ergodic.size(); ++e) F.at(path, c_erg[e]) = erg_sup[e];
        if (record) out.recorded.push_back(std::move(rec));
    }
    if (cells) out.cell_clamps = cells->clamped() - cell_clamps0;
    for (std::size_t i = 0; i < in.auxiliary.size(); ++i)
        out.density_clamps += in.auxiliary[i].density->clamped() - dens_clamps0[i];
    if (n_aux == 0) out.min_density_ratio = 1.0;
    return out;
}

}  // namespace homz
