#include "homz/torus.hpp"

#include "homz/errors.hpp"

#include <cmath>
#include <numbers>

namespace homz {

namespace {
constexpr double kPi = std::numbers::pi;
}

TorusGrid::TorusGrid(int P, int N) : P_(P), N_(N) {
    size_ = 1;
    for (int i = 0; i < P; ++i) size_ *= N;
}

double TorusGrid::coordinate(Eigen::Index flat, int axis) const {
    return static_cast<double>(axis_index(flat, axis)) / N_;
}

int TorusGrid::axis_index(Eigen::Index flat, int axis) const {
    for (int a = 0; a < axis; ++a) flat /= N_;
    return static_cast<int>(flat % N_);
}

Eigen::VectorXd TorusGrid::node(Eigen::Index flat) const {
    Eigen::VectorXd x(P_);
    for (int a = 0; a < P_; ++a) {
        x[a] = static_cast<double>(flat % N_) / N_;
        flat /= N_;
    }
    return x;
}

TorusGrid make_grid(int P, int N) {
    if (P < 1) throw UsageError("torus dimension P must be positive");
    if (N < 8 || N % 2 != 0) throw UsageError("points per axis must be even and at least 8, got " + std::to_string(N));
    return TorusGrid(P, N);
}

PeriodicField::PeriodicField(const TorusGrid& g, Eigen::MatrixXd v) : grid(g), values(std::move(v)) {
    if (values.rows() != g.size()) throw UsageError("field value count does not match the grid");
}

Eigen::VectorXd quadrature(const PeriodicField& field) {
    if (!field.values.allFinite()) throw NumericError("quadrature of a non-finite field");
    return field.values.colwise().mean().transpose();
}

double quadrature(const Eigen::VectorXd& nodal) { return nodal.mean(); }

Eigen::MatrixXd fourier_diff_1d(int N, int order) {
    Eigen::MatrixXd D(N, N);
    for (int j = 0; j < N; ++j) {
        for (int k = 0; k < N; ++k) {
            int d = j - k;
            double sign = (d % 2 == 0) ? 1.0 : -1.0;
            if (order == 1) {
                D(j, k) = d == 0 ? 0.0 : kPi * sign / std::tan(kPi * d / N);
            } else if (order == 2) {
                if (d == 0) {
                    D(j, k) = -kPi * kPi * (static_cast<double>(N) * N + 2.0) / 3.0;
                } else {
                    double s = std::sin(kPi * d / N);
                    D(j, k) = -2.0 * kPi * kPi * sign / (s * s);
                }
            } else {
                throw UsageError("differentiation order must be 1 or 2");
            }
        }
    }
    return D;
}

namespace {

void require_dense(const TorusGrid& grid) {
    if (grid.size() > kMaxDenseNodes)
        throw UsageError("grid with " + std::to_string(grid.size()) + " nodes exceeds the dense limit of " +
                         std::to_string(kMaxDenseNodes));
}

/// Tensor product over axes: factor[axis] applies along that axis, nullptr means identity.
Eigen::MatrixXd tensor_operator(const TorusGrid& grid, const std::vector<const Eigen::MatrixXd*>& factor) {
    require_dense(grid);
    const Eigen::Index n = grid.size();
    const int P = grid.P(), N = grid.N();
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
    std::vector<int> ri(static_cast<std::size_t>(P)), ci(static_cast<std::size_t>(P));
    for (Eigen::Index c = 0; c < n; ++c) {
        Eigen::Index cc = c;
        for (int a = 0; a < P; ++a) {
            ci[static_cast<std::size_t>(a)] = static_cast<int>(cc % N);
            cc /= N;
        }
        for (Eigen::Index r = 0; r < n; ++r) {
            Eigen::Index rr = r;
            double v = 1.0;
            for (int a = 0; a < P && v != 0.0; ++a) {
                int i = static_cast<int>(rr % N);
                rr /= N;
                const Eigen::MatrixXd* f = factor[static_cast<std::size_t>(a)];
                v *= f ? (*f)(i, ci[static_cast<std::size_t>(a)]) : (i == ci[static_cast<std::size_t>(a)] ? 1.0 : 0.0);
            }
            M(r, c) = v;
        }
    }
    return M;
}

}  // namespace

Eigen::MatrixXd diff_matrix(const TorusGrid& grid, int axis, int order) {
    if (axis < 0 || axis >= grid.P()) throw UsageError("axis out of range");
    Eigen::MatrixXd D = fourier_diff_1d(grid.N(), order);
    std::vector<const Eigen::MatrixXd*> factor(static_cast<std::size_t>(grid.P()), nullptr);
    factor[static_cast<std::size_t>(axis)] = &D;
    return tensor_operator(grid, factor);
}

Eigen::MatrixXd mixed_diff_matrix(const TorusGrid& grid, int i, int j) {
    if (i == j) return diff_matrix(grid, i, 2);
    if (i < 0 || j < 0 || i >= grid.P() || j >= grid.P()) throw UsageError("axis out of range");
    Eigen::MatrixXd D = fourier_diff_1d(grid.N(), 1);
    std::vector<const Eigen::MatrixXd*> factor(static_cast<std::size_t>(grid.P()), nullptr);
    factor[static_cast<std::size_t>(i)] = &D;
    factor[static_cast<std::size_t>(j)] = &D;
    return tensor_operator(grid, factor);
}

OperatorCoefficients sample_operator_coefficients(const TorusGrid& grid, const CoefficientSpec& spec,
                                                  const Eigen::VectorXd& y) {
    const int P = spec.P();
    if (grid.P() != P) throw UsageError("grid dimension does not match the coefficient dimension");
    if (!y.allFinite()) throw NumericError("non-finite y");
    const auto& cs = spec.slots();
    std::vector<double> s(cs.count(), 0.0);
    for (int j = 0; j < spec.Q(); ++j) s[cs.y(j)] = y[j];
    OperatorCoefficients out;
    out.a.resize(grid.size(), P * P);
    out.b.resize(grid.size(), P);
    std::vector<double> a(static_cast<std::size_t>(P * P)), b(static_cast<std::size_t>(P));
    for (Eigen::Index k = 0; k < grid.size(); ++k) {
        for (int i = 0; i < P; ++i) s[cs.x(i)] = grid.coordinate(k, i);
        spec.a(s.data(), a.data());
        spec.b(s.data(), b.data());
        for (int i = 0; i < P * P; ++i) out.a(k, i) = a[static_cast<std::size_t>(i)];
        for (int i = 0; i < P; ++i) out.b(k, i) = b[static_cast<std::size_t>(i)];
    }
    if (!out.a.allFinite() || !out.b.allFinite())
        throw NumericError("non-finite coefficient sample while assembling the generator");
    return out;
}

Eigen::MatrixXd assemble_operator(const TorusGrid& grid, const OperatorCoefficients& coeffs) {
    require_dense(grid);
    const int P = grid.P();
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(grid.size(), grid.size());
    for (int i = 0; i < P; ++i) {
        for (int j = i; j < P; ++j) {
            Eigen::VectorXd aij = coeffs.a.col(i * P + j);
            if (aij.isZero(0.0)) continue;
            double weight = (i == j) ? 0.5 : 1.0;  // ½(a_ij D_ij + a_ji D_ji) with a symmetric
            L.noalias() += (weight * aij).asDiagonal() * mixed_diff_matrix(grid, i, j);
        }
        Eigen::VectorXd bi = coeffs.b.col(i);
        if (!bi.isZero(0.0)) L.noalias() += bi.asDiagonal() * diff_matrix(grid, i, 1);
    }
    return L;
}

GeneratorMatrix assemble_generator(const TorusGrid& grid, const CoefficientSpec& spec, const Eigen::VectorXd& y) {
    require_dense(grid);
    GeneratorMatrix L;
    L.grid = grid;
    L.y = y;
    L.matrix = assemble_operator(grid, sample_operator_coefficients(grid, spec, y));
    return L;
}

GeneratorMatrix assemble_adjoint(const GeneratorMatrix& L) {
    GeneratorMatrix A;
    A.grid = L.grid;
    A.y = L.y;
    A.matrix = L.matrix.transpose();
    A.adjoint = !L.adjoint;
    return A;
}

PeriodicField sample_coefficient(const TorusGrid& grid, const CoefficientSpec& spec, Coefficient which,
                                 const Eigen::VectorXd& y, const Eigen::MatrixXd* z) {
    const int P = spec.P(), Q = spec.Q();
    const auto& cs = spec.slots();
    std::vector<double> s(cs.count(), 0.0);
    for (int j = 0; j < Q; ++j) s[cs.y(j)] = y[j];
    if (z)
        for (int j = 0; j < Q; ++j)
            for (int l = 0; l < P; ++l) s[cs.z(j, l)] = (*z)(j, l);
    Eigen::Index comps = 0;
    switch (which) {
        case Coefficient::a:
        case Coefficient::sigma: comps = P * P; break;
        case Coefficient::b:
        case Coefficient::c: comps = P; break;
        default: comps = Q; break;
    }
    PeriodicField field(grid, comps);
    std::vector<double> out(static_cast<std::size_t>(comps));
    for (Eigen::Index k = 0; k < grid.size(); ++k) {
        for (int i = 0; i < P; ++i) s[cs.x(i)] = grid.coordinate(k, i);
        switch (which) {
            case Coefficient::a: spec.a(s.data(), out.data()); break;
            case Coefficient::sigma: spec.sigma(s.data(), out.data()); break;
            case Coefficient::b: spec.b(s.data(), out.data()); break;
            case Coefficient::c: spec.c(s.data(), out.data()); break;
            case Coefficient::e: spec.e(s.data(), out.data()); break;
            case Coefficient::f: spec.f(s.data(), out.data()); break;
            case Coefficient::H: spec.H(s.data(), out.data()); break;
        }
        for (Eigen::Index c = 0; c < comps; ++c) field.values(k, c) = out[static_cast<std::size_t>(c)];
    }
    if (!field.values.allFinite())
        throw NumericError(std::string("non-finite sample of coefficient ") + coefficient_name(which));
    return field;
}

// ---------------------------------------------------------------------------
// Trigonometric interpolation

Eigen::MatrixXd trig_analysis_matrix(int N) {
    Eigen::MatrixXd A(N, N);
    for (int j = 0; j < N; ++j) {
        double xj = static_cast<double>(j) / N;
        A(0, j) = 1.0 / N;
        for (int k = 1; k < N / 2; ++k) {
            A(2 * k - 1, j) = 2.0 / N * std::cos(2 * kPi * k * xj);
            A(2 * k, j) = 2.0 / N * std::sin(2 * kPi * k * xj);
        }
        A(N - 1, j) = (j % 2 == 0 ? 1.0 : -1.0) / N;
    }
    return A;
}

void trig_basis(int N, double x, double* out) {
    out[0] = 1.0;
    // Recurrence on the unit circle keeps the cost at one sincos per call.
    const double c1 = std::cos(2 * kPi * x), s1 = std::sin(2 * kPi * x);
    double ck = 1.0, sk = 0.0;
    for (int k = 1; k < N / 2; ++k) {
        double cn = ck * c1 - sk * s1;
        double sn = sk * c1 + ck * s1;
        ck = cn;
        sk = sn;
        out[2 * k - 1] = ck;
        out[2 * k] = sk;
    }
    out[N - 1] = std::cos(kPi * N * x);
}

namespace {

/// Applies a per-axis linear map (rows_out × N) to every axis of a tensor array.
Eigen::MatrixXd apply_per_axis(const Eigen::MatrixXd& values, int P, int N, const Eigen::MatrixXd& map) {
    // values: (N^P) × comps with axis 0 fastest. Output: (R^P) × comps.
    const Eigen::Index R = map.rows();
    Eigen::MatrixXd cur = values;
    std::vector<Eigen::Index> dims(static_cast<std::size_t>(P), N);
    for (int axis = 0; axis < P; ++axis) {
        Eigen::Index inner = 1, outer = 1;
        for (int a = 0; a < axis; ++a) inner *= dims[static_cast<std::size_t>(a)];
        for (int a = axis + 1; a < P; ++a) outer *= dims[static_cast<std::size_t>(a)];
        Eigen::MatrixXd next(inner * R * outer, cur.cols());
        for (Eigen::Index c = 0; c < cur.cols(); ++c) {
            for (Eigen::Index o = 0; o < outer; ++o) {
                for (Eigen::Index in = 0; in < inner; ++in) {
                    Eigen::VectorXd line(N);
                    for (int k = 0; k < N; ++k) line[k] = cur(in + inner * (k + N * o), c);
                    Eigen::VectorXd mapped = map * line;
                    for (Eigen::Index r = 0; r < R; ++r) next(in + inner * (r + R * o), c) = mapped[r];
                }
            }
        }
        dims[static_cast<std::size_t>(axis)] = R;
        cur = std::move(next);
    }
    return cur;
}

}  // namespace

TrigInterpolant::TrigInterpolant(const PeriodicField& field) : grid_(field.grid) {
    if (!field.values.allFinite()) throw NumericError("cannot interpolate a non-finite field");
    coeffs_ = apply_per_axis(field.values, grid_.P(), grid_.N(), trig_analysis_matrix(grid_.N()));
}

void TrigInterpolant::basis(double x, double* out) const { trig_basis(grid_.N(), x, out); }

Eigen::VectorXd TrigInterpolant::operator()(const Eigen::VectorXd& x) const {
    const int P = grid_.P(), N = grid_.N();
    if (x.size() != P) throw UsageError("interpolation point has wrong dimension");
    std::vector<Eigen::VectorXd> phi(static_cast<std::size_t>(P), Eigen::VectorXd(N));
    for (int a = 0; a < P; ++a) basis(x[a] - std::floor(x[a]), phi[static_cast<std::size_t>(a)].data());
    Eigen::VectorXd result = Eigen::VectorXd::Zero(coeffs_.cols());
    for (Eigen::Index flat = 0; flat < coeffs_.rows(); ++flat) {
        Eigen::Index f = flat;
        double w = 1.0;
        for (int a = 0; a < P; ++a) {
            w *= phi[static_cast<std::size_t>(a)][f % N];
            f /= N;
        }
        result.noalias() += w * coeffs_.row(flat).transpose();
    }
    return result;
}

double TrigInterpolant::operator()(const Eigen::VectorXd& x, Eigen::Index component) const {
    return (*this)(x)[component];
}

Eigen::VectorXd interpolate(const PeriodicField& field, const Eigen::VectorXd& x) {
    return TrigInterpolant(field)(x);
}

Eigen::MatrixXd resample(const PeriodicField& field, int Nf) {
    const int N = field.grid.N();
    if (Nf < N) throw UsageError("resample target must not be coarser than the source grid");
    Eigen::MatrixXd B(Nf, N);
    std::vector<double> phi(static_cast<std::size_t>(N));
    for (int m = 0; m < Nf; ++m) {
        trig_basis(N, static_cast<double>(m) / Nf, phi.data());
        for (int k = 0; k < N; ++k) B(m, k) = phi[static_cast<std::size_t>(k)];
    }
    Eigen::MatrixXd map = B * trig_analysis_matrix(N);
    return apply_per_axis(field.values, field.grid.P(), N, map);
}

}  // namespace homz
