#include "homz/homogenized.hpp"

#include "homz/errors.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <thread>

namespace homz {

namespace {

std::string format_point(const double* y, int n) {
    std::ostringstream os;
    os << "y=(";
    for (int j = 0; j < n; ++j) os << (j ? "," : "") << y[j];
    os << ")";
    return os.str();
}

void copy_row(const PeriodicField& f, Eigen::Index k, std::vector<double>& out) {
    for (Eigen::Index c = 0; c < f.components(); ++c) out[static_cast<std::size_t>(c)] = f.values(k, c);
}

void require_derivatives(const CellSolution& cell, int P, int Q) {
    if (cell.dy_bhat.components() != P * Q || cell.dy_ehat.components() != Q * Q ||
        cell.dxy_bhat.components() != P * P * Q || cell.dxy_ehat.components() != Q * P * Q ||
        cell.grad_x_bhat.components() != P * P || cell.grad_x_ehat.components() != Q * P)
        throw UsageError("cell solution is missing derivative fields needed by the homogenized integrands");
}

/// Nodal α = (I+∇ₓb̂) a (I+∇ₓb̂)* from the x-gradient field at frozen y.
Eigen::MatrixXd alpha_nodal(const CoefficientSpec& spec, const Eigen::VectorXd& y, const TorusGrid& grid,
                            const Eigen::MatrixXd& grad_x_bhat) {
    const int P = spec.P();
    Eigen::MatrixXd out(grid.size(), P * P);
    std::vector<double> slots(spec.slots().count(), 0.0), a(static_cast<std::size_t>(P * P));
    for (int j = 0; j < spec.Q(); ++j) slots[spec.slots().y(j)] = y[j];
    Eigen::MatrixXd G(P, P), A(P, P);
    for (Eigen::Index k = 0; k < grid.size(); ++k) {
        for (int i = 0; i < P; ++i) slots[spec.slots().x(i)] = grid.coordinate(k, i);
        spec.a(slots.data(), a.data());
        for (int l = 0; l < P; ++l)
            for (int i = 0; i < P; ++i) {
                G(l, i) = (l == i ? 1.0 : 0.0) + grad_x_bhat(k, l * P + i);
                A(l, i) = a[static_cast<std::size_t>(l * P + i)];
            }
        Eigen::MatrixXd alpha = G * A * G.transpose();
        for (int l = 0; l < P; ++l)
            for (int i = 0; i < P; ++i) out(k, l * P + i) = alpha(l, i);
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pointwise integrands

void CellPoint::resize(int P_, int Q_) {
    P = P_;
    Q = Q_;
    auto sz = [](int n) { return static_cast<std::size_t>(n); };
    bhat.assign(sz(P), 0.0);
    ehat.assign(sz(Q), 0.0);
    grad_x_bhat.assign(sz(P * P), 0.0);
    grad_x_ehat.assign(sz(Q * P), 0.0);
    dy_bhat.assign(sz(P * Q), 0.0);
    dy_ehat.assign(sz(Q * Q), 0.0);
    dxy_bhat.assign(sz(P * P * Q), 0.0);
    dxy_ehat.assign(sz(Q * P * Q), 0.0);
}

void gather_node(const CellSolution& cell, Eigen::Index k, CellPoint& out) {
    const int P = cell.p.grid.P(), Q = static_cast<int>(cell.y.size());
    if (out.P != P || out.Q != Q || out.dxy_ehat.size() != static_cast<std::size_t>(Q * P * Q)) out.resize(P, Q);
    out.p = cell.p.values(k, 0);
    copy_row(cell.bhat, k, out.bhat);
    copy_row(cell.ehat, k, out.ehat);
    copy_row(cell.grad_x_bhat, k, out.grad_x_bhat);
    copy_row(cell.grad_x_ehat, k, out.grad_x_ehat);
    copy_row(cell.dy_bhat, k, out.dy_bhat);
    copy_row(cell.dy_ehat, k, out.dy_ehat);
    copy_row(cell.dxy_bhat, k, out.dxy_bhat);
    copy_row(cell.dxy_ehat, k, out.dxy_ehat);
}

CellPoint cell_point_at(const CellSolution& cell, const Eigen::VectorXd& x) {
    const int P = cell.p.grid.P(), Q = static_cast<int>(cell.y.size());
    CellPoint out;
    out.resize(P, Q);
    auto fill = [&](const PeriodicField& f, std::vector<double>& dst) {
        Eigen::VectorXd v = interpolate(f, x);
        for (Eigen::Index c = 0; c < v.size(); ++c) dst[static_cast<std::size_t>(c)] = v[c];
    };
    out.p = interpolate(cell.p, x)[0];
    fill(cell.bhat, out.bhat);
    fill(cell.ehat, out.ehat);
    fill(cell.grad_x_bhat, out.grad_x_bhat);
    fill(cell.grad_x_ehat, out.grad_x_ehat);
    fill(cell.dy_bhat, out.dy_bhat);
    fill(cell.dy_ehat, out.dy_ehat);
    fill(cell.dxy_bhat, out.dxy_bhat);
    fill(cell.dxy_ehat, out.dxy_ehat);
    return out;
}

void IntegrandWorkspace::resize(const CoefficientSpec& spec) {
    const auto P = static_cast<std::size_t>(spec.P()), Q = static_cast<std::size_t>(spec.Q());
    slots.assign(spec.slots().count(), 0.0);
    a.assign(P * P, 0.0);
    c.assign(P, 0.0);
    e.assign(Q, 0.0);
    f.assign(Q, 0.0);
    zz.assign(Q * P, 0.0);
    M.assign(P * Q, 0.0);
}

void evaluate_integrands(const CoefficientSpec& spec, const double* x, const double* y, const double* z,
                         const CellPoint& cell, IntegrandWorkspace& ws, double* u, double* v, double* alpha) {
    const int P = spec.P(), Q = spec.Q();
    if (ws.slots.size() != spec.slots().count() || ws.M.size() != static_cast<std::size_t>(P * Q)) ws.resize(spec);
    const CoefficientSlots& sl = spec.slots();
    double* s = ws.slots.data();
    for (int i = 0; i < P; ++i) s[sl.x(i)] = x[i];
    for (int j = 0; j < Q; ++j) s[sl.y(j)] = y[j];
    for (int j = 0; j < Q; ++j)
        for (int i = 0; i < P; ++i) {
            const int ji = j * P + i;
            ws.zz[static_cast<std::size_t>(ji)] = (z ? z[ji] : 0.0) + cell.grad_x_ehat[static_cast<std::size_t>(ji)];
            s[sl.z(j, i)] = ws.zz[static_cast<std::size_t>(ji)];
        }
    s[sl.t()] = 0.0;
    spec.a(s, ws.a.data());
    auto A = [&](int i, int k) { return ws.a[static_cast<std::size_t>(i * P + k)]; };
    auto G = [&](int l, int i) { return (l == i ? 1.0 : 0.0) + cell.grad_x_bhat[static_cast<std::size_t>(l * P + i)]; };

    if (alpha) {
        for (int l = 0; l < P; ++l)
            for (int k = 0; k < P; ++k) {
                double acc = 0.0;
                for (int i = 0; i < P; ++i)
                    for (int j = 0; j < P; ++j) acc += G(l, i) * A(i, j) * G(k, j);
                alpha[l * P + k] = acc;
            }
    }
    if (!u && !v) return;

    spec.c(s, ws.c.data());
    spec.e(s, ws.e.data());
    // M = a (z + ∇ₓê)*, a P×Q matrix.
    for (int i = 0; i < P; ++i)
        for (int j = 0; j < Q; ++j) {
            double acc = 0.0;
            for (int k = 0; k < P; ++k) acc += A(i, k) * ws.zz[static_cast<std::size_t>(j * P + k)];
            ws.M[static_cast<std::size_t>(i * Q + j)] = acc;
        }
    auto contract = [&](const std::vector<double>& dxy, int row) {
        double acc = 0.0;
        for (int i = 0; i < P; ++i)
            for (int j = 0; j < Q; ++j)
                acc += dxy[static_cast<std::size_t>((row * P + i) * Q + j)] * ws.M[static_cast<std::size_t>(i * Q + j)];
        return acc;
    };
    if (u) {
        for (int l = 0; l < P; ++l) {
            double acc = 0.0;
            for (int i = 0; i < P; ++i) acc += G(l, i) * ws.c[static_cast<std::size_t>(i)];
            for (int j = 0; j < Q; ++j)
                acc -= cell.dy_bhat[static_cast<std::size_t>(l * Q + j)] * ws.e[static_cast<std::size_t>(j)];
            u[l] = acc + contract(cell.dxy_bhat, l);
        }
    }
    if (v) {
        spec.f(s, ws.f.data());
        for (int m = 0; m < Q; ++m) {
            double acc = ws.f[static_cast<std::size_t>(m)];
            for (int i = 0; i < P; ++i)
                acc += cell.grad_x_ehat[static_cast<std::size_t>(m * P + i)] * ws.c[static_cast<std::size_t>(i)];
            for (int j = 0; j < Q; ++j)
                acc -= cell.dy_ehat[static_cast<std::size_t>(m * Q + j)] * ws.e[static_cast<std::size_t>(j)];
            v[m] = acc + contract(cell.dxy_ehat, m);
        }
    }
}

Integrands pointwise_integrands(const CoefficientSpec& spec, const CellSolution& cell, const Eigen::VectorXd& x,
                                const Eigen::MatrixXd& z) {
    const int P = spec.P(), Q = spec.Q();
    require_derivatives(cell, P, Q);
    if (x.size() != P || z.rows() != Q || z.cols() != P) throw UsageError("pointwise_integrands: wrong x or z shape");
    CellPoint cp = cell_point_at(cell, x);
    IntegrandWorkspace ws;
    ws.resize(spec);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> zr = z;
    Integrands out;
    out.u.resize(P);
    out.v.resize(Q);
    std::vector<double> alpha(static_cast<std::size_t>(P * P));
    evaluate_integrands(spec, x.data(), cell.y.data(), zr.data(), cp, ws, out.u.data(), out.v.data(), alpha.data());
    out.alpha = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(alpha.data(), P, P);
    return out;
}

namespace {

/// p-weighted averages at one z (row-major Q×P); alpha is skipped when `alpha_out` is null.
void average_at(const CoefficientSpec& spec, const CellSolution& cell, const double* z, IntegrandWorkspace& ws,
                CellPoint& cp, double* u_out, double* v_out, double* alpha_out) {
    const int P = spec.P(), Q = spec.Q();
    const TorusGrid& grid = cell.p.grid;
    const auto n = static_cast<double>(grid.size());
    std::vector<double> u(static_cast<std::size_t>(P)), v(static_cast<std::size_t>(Q)), al(static_cast<std::size_t>(P * P));
    std::vector<double> zt(static_cast<std::size_t>(Q * P)), x(static_cast<std::size_t>(P));
    if (u_out) std::fill(u_out, u_out + P, 0.0);
    if (v_out) std::fill(v_out, v_out + Q, 0.0);
    if (alpha_out) std::fill(alpha_out, alpha_out + P * P, 0.0);
    for (Eigen::Index k = 0; k < grid.size(); ++k) {
        gather_node(cell, k, cp);
        for (int i = 0; i < P; ++i) x[static_cast<std::size_t>(i)] = grid.coordinate(k, i);
        // z(I + ∇ₓb̂)
        for (int j = 0; j < Q; ++j)
            for (int i = 0; i < P; ++i) {
                double acc = z ? z[j * P + i] : 0.0;
                if (z)
                    for (int l = 0; l < P; ++l) acc += z[j * P + l] * cp.grad_x_bhat[static_cast<std::size_t>(l * P + i)];
                zt[static_cast<std::size_t>(j * P + i)] = acc;
            }
        evaluate_integrands(spec, x.data(), cell.y.data(), zt.data(), cp, ws, u_out ? u.data() : nullptr,
                            v_out ? v.data() : nullptr, alpha_out ? al.data() : nullptr);
        const double w = cp.p / n;
        if (u_out)
            for (int l = 0; l < P; ++l) u_out[l] += w * u[static_cast<std::size_t>(l)];
        if (v_out)
            for (int m = 0; m < Q; ++m) v_out[m] += w * v[static_cast<std::size_t>(m)];
        if (alpha_out)
            for (int r = 0; r < P * P; ++r) alpha_out[r] += w * al[static_cast<std::size_t>(r)];
    }
    if (alpha_out)  // symmetrize away rounding
        for (int i = 0; i < P; ++i)
            for (int j = i + 1; j < P; ++j) {
                double s = 0.5 * (alpha_out[i * P + j] + alpha_out[j * P + i]);
                alpha_out[i * P + j] = alpha_out[j * P + i] = s;
            }
}

}  // namespace

Averages average_coefficients(const CoefficientSpec& spec, const CellSolution& cell, const Eigen::MatrixXd& z) {
    const int P = spec.P(), Q = spec.Q();
    require_derivatives(cell, P, Q);
    if (z.rows() != Q || z.cols() != P) throw UsageError("average_coefficients: z must be Q×P");
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> zr = z;
    IntegrandWorkspace ws;
    ws.resize(spec);
    CellPoint cp;
    cp.resize(P, Q);
    Averages out;
    out.u_bar.resize(P);
    out.v_bar.resize(Q);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> al(P, P);
    average_at(spec, cell, zr.data(), ws, cp, out.u_bar.data(), out.v_bar.data(), al.data());
    out.alpha_bar = al;
    return out;
}

Eigen::MatrixXd average_alpha(const CoefficientSpec& spec, const CellSolution& cell) {
    const int P = spec.P();
    Eigen::MatrixXd field = alpha_field(spec, cell);
    Eigen::VectorXd mean = field.transpose() * cell.p.values.col(0) / static_cast<double>(field.rows());
    Eigen::MatrixXd out(P, P);
    for (int i = 0; i < P; ++i)
        for (int j = 0; j < P; ++j) out(i, j) = 0.5 * (mean[i * P + j] + mean[j * P + i]);
    return out;
}

Eigen::MatrixXd alpha_field(const CoefficientSpec& spec, const CellSolution& cell) {
    if (cell.grad_x_bhat.components() != spec.P() * spec.P()) throw UsageError("cell solution lacks grad_x_bhat");
    return alpha_nodal(spec, cell.y, cell.p.grid, cell.grad_x_bhat.values);
}

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues();
    const double tol = 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev[i] < -tol) throw NumericError("matrix has a negative eigenvalue " + std::to_string(ev[i]));
        ev[i] = std::sqrt(std::max(ev[i], 0.0));
    }
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

// ---------------------------------------------------------------------------
// Table

HomogenizedTable::HomogenizedTable(TensorGrid y_grid, TensorGrid z_grid, int P, int Q, std::vector<double> alpha,
                                   std::vector<double> u, std::vector<double> v)
    : y_grid_(std::move(y_grid)), z_grid_(std::move(z_grid)), P_(P), Q_(Q), alpha_(std::move(alpha)),
      u_(std::move(u)), v_(std::move(v)) {
    const std::size_t ny = y_grid_.size(), nz = z_grid_.size();
    const auto sP = static_cast<std::size_t>(P), sQ = static_cast<std::size_t>(Q);
    if (y_grid_.dims() != Q || z_grid_.dims() != P * Q) throw UsageError("homogenized table grids have wrong dimensions");
    if (alpha_.size() != ny * sP * sP || u_.size() != ny * nz * sP || v_.size() != ny * nz * sQ)
        throw UsageError("homogenized table value arrays have wrong sizes");
    sqrt_.assign(alpha_.size(), 0.0);
    for (std::size_t iy = 0; iy < ny; ++iy) {
        Eigen::MatrixXd s;
        try {
            s = symmetric_sqrt(alpha_node(iy));
        } catch (const NumericError&) {
            std::vector<double> yv = y_grid_.node(iy);
            throw NumericError("averaged diffusion is not positive semidefinite at " +
                               format_point(yv.data(), Q));
        }
        for (int i = 0; i < P; ++i)
            for (int j = 0; j < P; ++j) sqrt_[iy * sP * sP + static_cast<std::size_t>(i * P + j)] = s(i, j);
    }
}

HomogenizedTable::HomogenizedTable(const HomogenizedTable& o)
    : provenance(o.provenance), y_grid_(o.y_grid_), z_grid_(o.z_grid_), P_(o.P_), Q_(o.Q_), alpha_(o.alpha_),
      sqrt_(o.sqrt_), u_(o.u_), v_(o.v_), extrapolations_(o.extrapolations()) {}

HomogenizedTable& HomogenizedTable::operator=(const HomogenizedTable& o) {
    if (this == &o) return *this;
    provenance = o.provenance;
    y_grid_ = o.y_grid_;
    z_grid_ = o.z_grid_;
    P_ = o.P_;
    Q_ = o.Q_;
    alpha_ = o.alpha_;
    sqrt_ = o.sqrt_;
    u_ = o.u_;
    v_ = o.v_;
    extrapolations_.store(o.extrapolations());
    return *this;
}

Eigen::MatrixXd HomogenizedTable::alpha_node(std::size_t iy) const {
    Eigen::MatrixXd m(P_, P_);
    const auto stride = static_cast<std::size_t>(P_ * P_);
    for (int i = 0; i < P_; ++i)
        for (int j = 0; j < P_; ++j) m(i, j) = alpha_[iy * stride + static_cast<std::size_t>(i * P_ + j)];
    return m;
}

void HomogenizedTable::set_alpha_node(std::size_t iy, const Eigen::MatrixXd& value) {
    const auto stride = static_cast<std::size_t>(P_ * P_);
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(P_, P_);
    try {
        s = symmetric_sqrt(value);
    } catch (const NumericError&) {
    }
    for (int i = 0; i < P_; ++i)
        for (int j = 0; j < P_; ++j) {
            alpha_[iy * stride + static_cast<std::size_t>(i * P_ + j)] = value(i, j);
            sqrt_[iy * stride + static_cast<std::size_t>(i * P_ + j)] = s(i, j);
        }
}

namespace {

void blend(const TensorGrid& grid, const double* point, const std::vector<double>& values, int width, double* out,
           std::atomic<long>& counter) {
    Stencil st;
    grid.stencil(point, st);
    if (st.clamped) counter.fetch_add(1, std::memory_order_relaxed);
    std::fill(out, out + width, 0.0);
    for (int c = 0; c < st.count; ++c) {
        const double w = st.weight[c];
        if (w == 0.0) continue;
        const double* src = values.data() + st.index[c] * static_cast<std::size_t>(width);
        for (int r = 0; r < width; ++r) out[r] += w * src[r];
    }
}

}  // namespace

void HomogenizedTable::alpha(const double* y, double* out) const { blend(y_grid_, y, alpha_, P_ * P_, out, extrapolations_); }

void HomogenizedTable::alpha_sqrt(const double* y, double* out) const {
    blend(y_grid_, y, sqrt_, P_ * P_, out, extrapolations_);
}

void HomogenizedTable::uv_bar(const double* y, const double* z, double* u, double* v) const {
    Stencil sy, sz;
    y_grid_.stencil(y, sy);
    z_grid_.stencil(z, sz);
    if (sy.clamped || sz.clamped) extrapolations_.fetch_add(1, std::memory_order_relaxed);
    const std::size_t nz = z_grid_.size();
    if (u) std::fill(u, u + P_, 0.0);
    if (v) std::fill(v, v + Q_, 0.0);
    for (int a = 0; a < sy.count; ++a) {
        if (sy.weight[a] == 0.0) continue;
        for (int b = 0; b < sz.count; ++b) {
            const double w = sy.weight[a] * sz.weight[b];
            if (w == 0.0) continue;
            const std::size_t node = sy.index[a] * nz + sz.index[b];
            if (u)
                for (int l = 0; l < P_; ++l) u[l] += w * u_[node * static_cast<std::size_t>(P_) + static_cast<std::size_t>(l)];
            if (v)
                for (int m = 0; m < Q_; ++m) v[m] += w * v_[node * static_cast<std::size_t>(Q_) + static_cast<std::size_t>(m)];
        }
    }
}

Eigen::MatrixXd HomogenizedTable::alpha(const Eigen::VectorXd& y) const {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(P_, P_);
    alpha(y.data(), m.data());
    return m;
}

Eigen::MatrixXd HomogenizedTable::alpha_sqrt(const Eigen::VectorXd& y) const {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(P_, P_);
    alpha_sqrt(y.data(), m.data());
    return m;
}

Eigen::VectorXd HomogenizedTable::u_bar(const Eigen::VectorXd& y, const Eigen::MatrixXd& z) const {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> zr = z;
    Eigen::VectorXd u(P_);
    uv_bar(y.data(), zr.data(), u.data(), nullptr);
    return u;
}

Eigen::VectorXd HomogenizedTable::v_bar(const Eigen::VectorXd& y, const Eigen::MatrixXd& z) const {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> zr = z;
    Eigen::VectorXd v(Q_);
    uv_bar(y.data(), zr.data(), nullptr, v.data());
    return v;
}

double HomogenizedTable::sup_abs_v_bar() const {
    double s = 0.0;
    for (std::size_t node = 0; node * static_cast<std::size_t>(Q_) < v_.size(); ++node) {
        double n2 = 0.0;
        for (int m = 0; m < Q_; ++m) n2 += v_[node * static_cast<std::size_t>(Q_) + static_cast<std::size_t>(m)] *
                                           v_[node * static_cast<std::size_t>(Q_) + static_cast<std::size_t>(m)];
        s = std::max(s, std::sqrt(n2));
    }
    return s;
}

HomogenizedTable build_homogenized_table(const CoefficientSpec& spec, const CellTable& cells, const YBox& z_box,
                                         int z_nodes_per_axis, int threads) {
    const int P = spec.P(), Q = spec.Q();
    if (cells.P() != P || cells.Q() != Q) throw UsageError("cell table does not match the coefficient dimensions");
    if (static_cast<int>(z_box.size()) != P * Q) throw UsageError("z-box needs one interval per entry of z (Q×P)");
    std::vector<UniformAxis> axes;
    for (const auto& [lo, hi] : z_box) {
        if (hi < lo) throw UsageError("z-box interval is reversed");
        if (hi > lo && z_nodes_per_axis < 2) throw UsageError("a nondegenerate z-interval needs at least two nodes");
        axes.push_back({lo, hi, hi == lo ? 1 : z_nodes_per_axis});
    }
    TensorGrid zg(axes);
    const TensorGrid& yg = cells.y_grid();
    const std::size_t ny = yg.size(), nz = zg.size();
    const auto sP = static_cast<std::size_t>(P), sQ = static_cast<std::size_t>(Q);
    std::vector<double> alpha(ny * sP * sP), u(ny * nz * sP), v(ny * nz * sQ);
    for (std::size_t iy = 0; iy < ny; ++iy) require_derivatives(cells.node(iy), P, Q);

    auto work = [&](std::size_t begin, std::size_t stride) {
        IntegrandWorkspace ws;
        ws.resize(spec);
        CellPoint cp;
        cp.resize(P, Q);
        std::vector<double> z(sP * sQ);
        for (std::size_t iy = begin; iy < ny; iy += stride) {
            const CellSolution& cell = cells.node(iy);
            average_at(spec, cell, nullptr, ws, cp, nullptr, nullptr, alpha.data() + iy * sP * sP);
            for (std::size_t iz = 0; iz < nz; ++iz) {
                zg.node(iz, z.data());
                const std::size_t node = iy * nz + iz;
                average_at(spec, cell, z.data(), ws, cp, u.data() + node * sP, v.data() + node * sQ, nullptr);
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
    return HomogenizedTable(yg, zg, P, Q, std::move(alpha), std::move(u), std::move(v));
}

EllipticityReport check_ellipticity(const HomogenizedTable& table, double lambda, double margin) {
    EllipticityReport r;
    r.lambda = lambda;
    r.margin = margin;
    r.min_eigenvalue = std::numeric_limits<double>::infinity();
    const std::size_t ny = table.y_grid().size();
    for (std::size_t iy = 0; iy < ny; ++iy) {
        Eigen::MatrixXd a = table.alpha_node(iy);
        double ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(0.5 * (a + a.transpose())).eigenvalues().minCoeff();
        if (ev < r.min_eigenvalue) {
            r.min_eigenvalue = ev;
            std::vector<double> yv = table.y_grid().node(iy);
            r.argmin_y = Eigen::Map<Eigen::VectorXd>(yv.data(), static_cast<Eigen::Index>(yv.size()));
        }
    }
    r.passed = r.min_eigenvalue > margin;
    std::ostringstream os;
    os << "min eigenvalue of averaged diffusion " << r.min_eigenvalue << " at "
       << format_point(r.argmin_y.data(), static_cast<int>(r.argmin_y.size()));
    if (lambda > 0) os << " (" << r.min_eigenvalue / lambda << " x lambda)";
    if (!r.passed) os << " does not exceed margin " << margin;
    r.message = os.str();
    return r;
}

AlphaN alpha_n(const CoefficientSpec& spec, const MollifiedDensity& density, const Eigen::VectorXd& x,
               const Eigen::VectorXd& y, const Eigen::VectorXd& y_prime, double floor) {
    const CellTable& table = density.table();
    const TorusGrid& grid = table.grid();
    const int P = spec.P();
    Eigen::MatrixXd gx = table.interpolate_field(CellField::grad_x_bhat, y);
    Eigen::MatrixXd alpha = alpha_nodal(spec, y, grid, gx);
    Eigen::VectorXd pm_y = density.field(y);
    Eigen::VectorXd pm_yp = density.field(y_prime);
    if (pm_yp.minCoeff() < floor)
        throw NumericError("mollified density below positivity floor at " +
                           format_point(y_prime.data(), static_cast<int>(y_prime.size())));
    Eigen::VectorXd p_yp = table.interpolate_field(CellField::p, y_prime).col(0);
    const auto n = static_cast<double>(grid.size());

    AlphaN out;
    Eigen::VectorXd ratio = pm_y.cwiseQuotient(pm_yp);
    out.alpha_n_nodal = ratio.asDiagonal() * alpha;
    Eigen::VectorXd first = out.alpha_n_nodal.transpose() * p_yp / n;
    Eigen::VectorXd weight = pm_y.cwiseProduct(p_yp.cwiseQuotient(pm_yp));
    Eigen::VectorXd second = alpha.transpose() * weight / n;
    out.alpha_bar_n.resize(P, P);
    out.alpha_bar_n_alt.resize(P, P);
    for (int i = 0; i < P; ++i)
        for (int j = 0; j < P; ++j) {
            out.alpha_bar_n(i, j) = first[i * P + j];
            out.alpha_bar_n_alt(i, j) = second[i * P + j];
        }
    Eigen::VectorXd at_x = interpolate(PeriodicField(grid, out.alpha_n_nodal), x);
    out.alpha_n.resize(P, P);
    for (int i = 0; i < P; ++i)
        for (int j = 0; j < P; ++j) out.alpha_n(i, j) = at_x[i * P + j];
    return out;
}

}  // namespace homz
