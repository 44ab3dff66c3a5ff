#include "homz/pde.hpp"

#include "homz/errors.hpp"
#include "homz/mollifier.hpp"
#include "homz/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

namespace homz {

Dealias dealias_from_name(const std::string& name) {
    if (name == "auto") return Dealias::automatic;
    if (name == "on" || name == "true") return Dealias::on;
    if (name == "off" || name == "false") return Dealias::off;
    throw UsageError("dealias must be 'auto', 'on' or 'off', got '" + name + "'");
}

namespace {

double frob_row_max(const std::vector<Eigen::MatrixXd>& slices) {
    double s = 0.0;
    for (const auto& m : slices)
        if (m.size()) s = std::max(s, m.rowwise().norm().maxCoeff());
    return s;
}

Eigen::MatrixXd node_coordinates(int P, int M) {
    std::size_t n = 1;
    for (int d = 0; d < P; ++d) n *= static_cast<std::size_t>(M);
    Eigen::MatrixXd nodes(static_cast<Eigen::Index>(n), P);
    for (std::size_t e = 0; e < n; ++e) {
        std::size_t rest = e;
        for (int d = 0; d < P; ++d) {
            nodes(static_cast<Eigen::Index>(e), d) = static_cast<double>(rest % static_cast<std::size_t>(M)) / M;
            rest /= static_cast<std::size_t>(M);
        }
    }
    return nodes;
}

}  // namespace

double DecouplingField::sup_abs() const { return frob_row_max(theta); }
double DecouplingField::sup_grad() const { return frob_row_max(grad); }
double DecouplingField::sup_hessian() const {
    return hess_sup.empty() ? 0.0 : *std::max_element(hess_sup.begin(), hess_sup.end());
}

HolderMonitor gradient_holder_monitor(const DecouplingField& field, double eta, int levels) {
    const TorusGrid& g = field.grid;
    const int M = g.N(), P = g.P();
    if (levels < 2 || (1 << (levels - 1)) >= M) throw UsageError("Holder monitor needs 2 <= levels with 2^(levels-1) < M");
    HolderMonitor out;
    out.eta = eta;
    out.increments.assign(static_cast<std::size_t>(levels), 0.0);
    for (int j = 0; j < levels; ++j) out.shifts.push_back(static_cast<double>(1 << j) / M);
    Eigen::Index stride = 1;
    for (int i = 0; i < P; ++i, stride *= M) {
        for (std::size_t s = 0; s < field.slices(); ++s) {
            if (field.times[s] > field.T - eta + 1e-12) continue;
            const Eigen::MatrixXd& G = field.grad[s];
            for (int j = 0; j < levels; ++j) {
                const int shift = 1 << j;
                double sup = 0.0;
                for (Eigen::Index k = 0; k < g.size(); ++k) {
                    const int a = g.axis_index(k, i);
                    const Eigen::Index other = k + (((a + shift) % M) - a) * stride;
                    sup = std::max(sup, (G.row(other) - G.row(k)).cwiseAbs().maxCoeff());
                }
                out.increments[static_cast<std::size_t>(j)] = std::max(out.increments[static_cast<std::size_t>(j)], sup);
            }
        }
    }
    const double lo = out.increments.front(), hi = out.increments.back();
    if (lo > 0.0 && hi > 0.0) out.exponent = std::log(hi / lo) / std::log(out.shifts.back() / out.shifts.front());
    for (int j = 0; j < levels; ++j)
        out.quotient = std::max(out.quotient, out.increments[static_cast<std::size_t>(j)] /
                                                  std::pow(out.shifts[static_cast<std::size_t>(j)], out.exponent));
    return out;
}

// ---------------------------------------------------------------------------
// Models

EpsilonModel::EpsilonModel(const CoefficientSpec& spec, int k) : spec_(spec), k_(k) {
    if (k < 1) throw UsageError("epsilon must be 1/k for a positive integer k");
    cache_a_ = !spec.depends_on_y(Coefficient::sigma);
    cache_b_ = !spec.depends_on_y(Coefficient::b);
    cache_e_ = !spec.depends_on_y(Coefficient::e);
    cache_c_ = !spec.depends_on_y(Coefficient::c) && !spec.depends_on_z(Coefficient::c);
    cache_f_ = !spec.depends_on_y(Coefficient::f) && !spec.depends_on_z(Coefficient::f);
    slots_.assign(spec.slots().count(), 0.0);
    tmp_.assign(static_cast<std::size_t>(spec.P() * spec.P() + spec.Q()), 0.0);
}

bool EpsilonModel::nonlinear() const { return !(cache_a_ && cache_b_ && cache_c_ && cache_e_ && cache_f_); }

std::string EpsilonModel::label() const { return "epsilon=1/" + std::to_string(k_); }

void EpsilonModel::prepare(const Eigen::MatrixXd& nodes) {
    nodes_ = nodes;
    const int P = spec_.P(), Q = spec_.Q();
    const auto n = static_cast<std::size_t>(nodes.rows());
    const auto sP = static_cast<std::size_t>(P), sQ = static_cast<std::size_t>(Q);
    ca_.assign(cache_a_ ? n * sP * sP : 0, 0.0);
    cb_.assign(cache_b_ ? n * sP : 0, 0.0);
    cc_.assign(cache_c_ ? n * sP : 0, 0.0);
    ce_.assign(cache_e_ ? n * sQ : 0, 0.0);
    cf_.assign(cache_f_ ? n * sQ : 0, 0.0);
    std::vector<double> s(spec_.slots().count(), 0.0);
    for (std::size_t e = 0; e < n; ++e) {
        for (int i = 0; i < P; ++i) s[spec_.slots().x(i)] = k_ * nodes(static_cast<Eigen::Index>(e), i);
        if (cache_a_) spec_.a(s.data(), ca_.data() + e * sP * sP);
        if (cache_b_) spec_.b(s.data(), cb_.data() + e * sP);
        if (cache_c_) spec_.c(s.data(), cc_.data() + e * sP);
        if (cache_e_) spec_.e(s.data(), ce_.data() + e * sQ);
        if (cache_f_) spec_.f(s.data(), cf_.data() + e * sQ);
    }
}

void EpsilonModel::coefficients(Eigen::Index k, const double* theta, const double* grad, double* A, double* B,
                                double* V) {
    const int P = spec_.P(), Q = spec_.Q();
    const auto e = static_cast<std::size_t>(k);
    const auto sP = static_cast<std::size_t>(P), sQ = static_cast<std::size_t>(Q);
    const CoefficientSlots& sl = spec_.slots();
    double* s = slots_.data();
    for (int i = 0; i < P; ++i) s[sl.x(i)] = k_ * nodes_(k, i);
    for (int j = 0; j < Q; ++j) s[sl.y(j)] = theta[j];
    for (int j = 0; j < Q; ++j)
        for (int i = 0; i < P; ++i) s[sl.z(j, i)] = grad[j * P + i];
    const double kk = k_;
    if (cache_a_)
        std::copy_n(ca_.data() + e * sP * sP, sP * sP, A);
    else
        spec_.a(s, A);
    if (cache_b_)
        for (int i = 0; i < P; ++i) B[i] = kk * cb_[e * sP + static_cast<std::size_t>(i)];
    else {
        spec_.b(s, B);
        for (int i = 0; i < P; ++i) B[i] *= kk;
    }
    double* tmp = tmp_.data();
    if (cache_c_)
        for (int i = 0; i < P; ++i) B[i] += cc_[e * sP + static_cast<std::size_t>(i)];
    else {
        spec_.c(s, tmp);
        for (int i = 0; i < P; ++i) B[i] += tmp[i];
    }
    if (cache_e_)
        for (int j = 0; j < Q; ++j) V[j] = kk * ce_[e * sQ + static_cast<std::size_t>(j)];
    else {
        spec_.e(s, V);
        for (int j = 0; j < Q; ++j) V[j] *= kk;
    }
    if (cache_f_)
        for (int j = 0; j < Q; ++j) V[j] += cf_[e * sQ + static_cast<std::size_t>(j)];
    else {
        spec_.f(s, tmp);
        for (int j = 0; j < Q; ++j) V[j] += tmp[j];
    }
}

LimitModel::LimitModel(std::shared_ptr<const HomogenizedTable> table, std::string label)
    : table_(std::move(table)), label_(std::move(label)) {
    if (!table_) throw UsageError("limit model needs a homogenized table");
}

bool LimitModel::nonlinear() const { return table_->y_grid().size() > 1 || table_->z_grid().size() > 1; }

void LimitModel::coefficients(Eigen::Index, const double* theta, const double* grad, double* A, double* B,
                              double* V) {
    table_->alpha(theta, A);
    table_->uv_bar(theta, grad, B, V);
}

// ---------------------------------------------------------------------------
// Right-hand side

namespace {

class RhsEvaluator {
public:
    RhsEvaluator(PdeModel& model, const TorusGrid& grid, bool dealias)
        : model_(model), P_(grid.P()), Q_(model.Q()), coarse_(grid.P(), grid.N()) {
        if (dealias) fine_ = std::make_unique<SpectralGrid>(P_, 3 * grid.N() / 2);
        const SpectralGrid& eval = fine_ ? *fine_ : coarse_;
        ne_ = static_cast<Eigen::Index>(eval.real_size());
        model_.prepare(node_coordinates(P_, eval.M()));
        hat_.resize(coarse_.complex_size() * static_cast<std::size_t>(Q_));
        work_.resize(coarse_.complex_size());
        fwork_.resize(fine_ ? fine_->complex_size() : 0);
        th_.resize(ne_, Q_);
        gr_.resize(ne_, Q_ * P_);
        hs_.resize(ne_, Q_ * P_ * P_);
        out_eval_.resize(ne_, Q_);
        A_.resize(static_cast<std::size_t>(P_ * P_));
        B_.resize(static_cast<std::size_t>(P_));
        V_.resize(static_cast<std::size_t>(Q_));
        tv_.resize(static_cast<std::size_t>(Q_));
        gv_.resize(static_cast<std::size_t>(Q_ * P_));
    }

    long evaluations = 0;

    void operator()(const Eigen::MatrixXd& theta, Eigen::MatrixXd& out) {
        ++evaluations;
        const std::size_t nc = coarse_.complex_size();
        for (int l = 0; l < Q_; ++l) coarse_.forward(theta.col(l).data(), hat_.data() + static_cast<std::size_t>(l) * nc);
        for (int l = 0; l < Q_; ++l) {
            const cplx* h = hat_.data() + static_cast<std::size_t>(l) * nc;
            to_eval(h, th_.col(l).data());
            for (int i = 0; i < P_; ++i) {
                coarse_.derivative(h, i, work_.data());
                to_eval(work_.data(), gr_.col(l * P_ + i).data());
            }
            for (int i = 0; i < P_; ++i)
                for (int j = i; j < P_; ++j) {
                    coarse_.second_derivative(h, i, j, work_.data());
                    to_eval(work_.data(), hs_.col((l * P_ + i) * P_ + j).data());
                    if (j != i) hs_.col((l * P_ + j) * P_ + i) = hs_.col((l * P_ + i) * P_ + j);
                }
        }
        for (Eigen::Index e = 0; e < ne_; ++e) {
            for (int l = 0; l < Q_; ++l) tv_[static_cast<std::size_t>(l)] = th_(e, l);
            for (int r = 0; r < Q_ * P_; ++r) gv_[static_cast<std::size_t>(r)] = gr_(e, r);
            model_.coefficients(e, tv_.data(), gv_.data(), A_.data(), B_.data(), V_.data());
            for (int l = 0; l < Q_; ++l) {
                double acc = V_[static_cast<std::size_t>(l)];
                for (int i = 0; i < P_; ++i) {
                    acc += B_[static_cast<std::size_t>(i)] * gr_(e, l * P_ + i);
                    for (int j = 0; j < P_; ++j)
                        acc += 0.5 * A_[static_cast<std::size_t>(i * P_ + j)] * hs_(e, (l * P_ + i) * P_ + j);
                }
                out_eval_(e, l) = acc;
            }
        }
        out.resize(theta.rows(), Q_);
        if (!fine_) {
            out = out_eval_;
            return;
        }
        for (int l = 0; l < Q_; ++l) {
            fine_->forward(out_eval_.col(l).data(), fwork_.data());
            coarse_.truncate_from(*fine_, fwork_.data(), work_.data());
            coarse_.backward(work_.data(), out.col(l).data());
        }
    }

    bool dealiased() const { return static_cast<bool>(fine_); }

private:
    void to_eval(const cplx* coeffs, double* dst) {
        if (!fine_) {
            coarse_.backward(coeffs, dst);
            return;
        }
        coarse_.pad_to(coeffs, *fine_, fwork_.data());
        fine_->backward(fwork_.data(), dst);
    }

    PdeModel& model_;
    int P_, Q_;
    SpectralGrid coarse_;
    std::unique_ptr<SpectralGrid> fine_;
    Eigen::Index ne_ = 0;
    std::vector<cplx> hat_, work_, fwork_;
    Eigen::MatrixXd th_, gr_, hs_, out_eval_;
    std::vector<double> A_, B_, V_, tv_, gv_;
};

// Dormand–Prince 5(4) coefficients.
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200, e6 = 22.0 / 525,
                 e7 = -1.0 / 40;

}  // namespace

GradientHessian field_gradient_and_hessian(const TorusGrid& grid, const Eigen::MatrixXd& values) {
    const int P = grid.P(), Q = static_cast<int>(values.cols());
    SpectralGrid sg(P, grid.N());
    std::vector<cplx> hat(sg.complex_size()), work(sg.complex_size());
    GradientHessian out;
    out.grad.resize(values.rows(), Q * P);
    out.hess.resize(values.rows(), Q * P * P);
    for (int l = 0; l < Q; ++l) {
        Eigen::VectorXd col = values.col(l);
        sg.forward(col.data(), hat.data());
        for (int i = 0; i < P; ++i) {
            sg.derivative(hat.data(), i, work.data());
            sg.backward(work.data(), out.grad.col(l * P + i).data());
            for (int j = i; j < P; ++j) {
                sg.second_derivative(hat.data(), i, j, work.data());
                sg.backward(work.data(), out.hess.col((l * P + i) * P + j).data());
                if (j != i) out.hess.col((l * P + j) * P + i) = out.hess.col((l * P + i) * P + j);
            }
        }
    }
    return out;
}

DecouplingField solve_pde(PdeModel& model, const Eigen::MatrixXd& terminal, double T, const TorusGrid& grid,
                          const SolverSettings& settings) {
    const int P = grid.P(), Q = model.Q();
    if (model.P() != P) throw UsageError("model and grid dimensions differ");
    if (terminal.rows() != grid.size() || terminal.cols() != Q) throw UsageError("terminal condition has wrong shape");
    if (!(T > 0)) throw UsageError("horizon T must be positive");
    if (settings.n_out < 1) throw UsageError("n_out must be positive");
    if (!terminal.allFinite()) throw NumericError("non-finite terminal condition");
    const bool dealias = settings.dealias == Dealias::on || (settings.dealias == Dealias::automatic && model.nonlinear());
    RhsEvaluator rhs(model, grid, dealias);

    DecouplingField field;
    field.system = model.label();
    field.grid = grid;
    field.Q = Q;
    field.T = T;
    const int n_out = settings.n_out;
    std::vector<Eigen::MatrixXd> states(static_cast<std::size_t>(n_out + 1)), rates(static_cast<std::size_t>(n_out + 1));

    Eigen::MatrixXd y = terminal, k1, k2, k3, k4, k5, k6, k7, tmp, ynew, err;
    rhs(y, k1);
    states[0] = y;
    rates[0] = k1;
    double tau = 0.0;
    double h = settings.fixed_dt > 0 ? settings.fixed_dt : settings.dt_init;
    double err_prev = 1e-4;
    SolverStats& st = field.stats;
    st.min_dt = std::numeric_limits<double>::infinity();
    st.dealiased = rhs.dealiased();

    for (int slot = 1; slot <= n_out; ++slot) {
        const double target = T * slot / n_out;
        int fixed_steps = 0;
        double fixed_h = 0.0;
        if (settings.fixed_dt > 0) {
            fixed_steps = static_cast<int>(std::ceil((target - tau) / settings.fixed_dt - 1e-9));
            fixed_steps = std::max(fixed_steps, 1);
            fixed_h = (target - tau) / fixed_steps;
        }
        int taken = 0;
        while (target - tau > 1e-13 * T) {
            if (st.steps + st.rejected >= settings.max_steps)
                throw SolverError("step budget exhausted at tau=" + std::to_string(tau) + " for " + field.system);
            const bool last = settings.fixed_dt > 0 ? (taken + 1 == fixed_steps) : (h >= target - tau);
            const double hs = settings.fixed_dt > 0 ? fixed_h : std::min(h, target - tau);
            tmp = y + hs * a21 * k1;
            rhs(tmp, k2);
            tmp = y + hs * (a31 * k1 + a32 * k2);
            rhs(tmp, k3);
            tmp = y + hs * (a41 * k1 + a42 * k2 + a43 * k3);
            rhs(tmp, k4);
            tmp = y + hs * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
            rhs(tmp, k5);
            tmp = y + hs * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
            rhs(tmp, k6);
            ynew = y + hs * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
            rhs(ynew, k7);
            double en = 0.0;
            if (!ynew.allFinite() || !k7.allFinite()) {
                en = std::numeric_limits<double>::infinity();
            } else if (settings.fixed_dt <= 0) {
                err = hs * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
                Eigen::ArrayXXd scale = settings.atol + settings.rtol * y.array().abs().max(ynew.array().abs());
                en = (err.array().abs() / scale).maxCoeff();
            }
            if (settings.fixed_dt > 0) {
                if (!std::isfinite(en))
                    throw SolverError("non-finite values with fixed step " + std::to_string(hs) + " at tau=" +
                                      std::to_string(tau) + " for " + field.system);
                y.swap(ynew);
                k1.swap(k7);
                tau = last ? target : tau + hs;
                ++taken;
                ++st.steps;
                st.min_dt = std::min(st.min_dt, hs);
                st.max_dt = std::max(st.max_dt, hs);
                continue;
            }
            if (en <= 1.0) {
                y.swap(ynew);
                k1.swap(k7);
                tau = last ? target : tau + hs;
                ++st.steps;
                st.min_dt = std::min(st.min_dt, hs);
                st.max_dt = std::max(st.max_dt, hs);
                double fac = 0.9 * std::pow(std::max(en, 1e-10), -0.7 / 5) * std::pow(err_prev, 0.4 / 5);
                fac = std::clamp(fac, 0.2, 5.0);
                err_prev = std::max(en, 1e-4);
                // A step shortened to hit the output time does not shrink the proposal.
                h = (last && hs < h) ? std::max(h, hs * fac) : hs * fac;
            } else {
                ++st.rejected;
                double fac = std::isfinite(en) ? std::max(0.2, 0.9 * std::pow(en, -0.2)) : 0.2;
                h = hs * fac;
                if (h < settings.dt_min) {
                    std::ostringstream os;
                    os << "step size underflow (" << h << " < " << settings.dt_min << ") at tau=" << tau << " for "
                       << field.system << (std::isfinite(en) ? "" : " after non-finite values") << "; " << st.steps
                       << " steps accepted, " << st.rejected << " rejected";
                    throw SolverError(os.str());
                }
            }
        }
        states[static_cast<std::size_t>(slot)] = y;
        rates[static_cast<std::size_t>(slot)] = k1;
    }
    st.rhs_evals = rhs.evaluations;

    // Store in ascending t: slice k holds t_k = k T / n_out, i.e. tau = T − t_k.
    field.times.resize(static_cast<std::size_t>(n_out + 1));
    field.theta.resize(field.times.size());
    field.theta_t.resize(field.times.size());
    field.grad.resize(field.times.size());
    field.grad_t.resize(field.times.size());
    if (settings.record_hessian) {
        field.hess.resize(field.times.size());
        field.hess_sup.resize(field.times.size());
    }
    for (int k = 0; k <= n_out; ++k) {
        const auto sk = static_cast<std::size_t>(k);
        const auto j = static_cast<std::size_t>(n_out - k);
        field.times[sk] = T * k / n_out;
        field.theta[sk] = states[j];
        field.theta_t[sk] = -rates[j];
        GradientHessian gh = field_gradient_and_hessian(grid, states[j]);
        field.grad[sk] = gh.grad;
        field.grad_t[sk] = field_gradient_and_hessian(grid, field.theta_t[sk]).grad;
        if (settings.record_hessian) {
            field.hess_sup[sk] = gh.hess.rowwise().norm().maxCoeff();
            field.hess[sk] = std::move(gh.hess);
        }
    }
    field.theta[static_cast<std::size_t>(n_out)] = terminal;
    return field;
}

Eigen::MatrixXd sample_terminal(const CoefficientSpec& spec, const TorusGrid& grid) {
    Eigen::MatrixXd out(grid.size(), spec.Q());
    std::vector<double> s(spec.slots().count(), 0.0), h(static_cast<std::size_t>(spec.Q()));
    for (Eigen::Index k = 0; k < grid.size(); ++k) {
        for (int i = 0; i < spec.P(); ++i) s[spec.slots().x(i)] = grid.coordinate(k, i);
        spec.H(s.data(), h.data());
        for (int l = 0; l < spec.Q(); ++l) out(k, l) = h[static_cast<std::size_t>(l)];
    }
    return out;
}

DecouplingField solve_limit_system(std::shared_ptr<const HomogenizedTable> table, const Eigen::MatrixXd& terminal,
                                   double T, const TorusGrid& grid, const SolverSettings& settings) {
    LimitModel model(std::move(table));
    return solve_pde(model, terminal, T, grid, settings);
}

DecouplingField solve_epsilon_system(const CoefficientSpec& spec, int k, double T, const TorusGrid& grid,
                                     const SolverSettings& settings) {
    if (k < 1) throw UsageError("epsilon must be 1/k for a positive integer k");
    if (grid.N() < 16 * k)
        throw DiscretizationError("grid of " + std::to_string(grid.N()) + " nodes per axis does not resolve epsilon=1/" +
                                  std::to_string(k) + " (needs at least " + std::to_string(16 * k) + ")");
    EpsilonModel model(spec, k);
    return solve_pde(model, sample_terminal(spec, grid), T, grid, settings);
}

// ---------------------------------------------------------------------------
// Mollification

MollifiedData mollify_terminal_and_driver(std::shared_ptr<const HomogenizedTable> table,
                                          const Eigen::MatrixXd& terminal, const TorusGrid& grid, int n,
                                          int points_per_axis) {
    if (n < 1) throw UsageError("mollification index n must be positive");
    if (!table) throw UsageError("mollification needs a homogenized table");
    const int P = grid.P(), Q = table->Q();
    MollifiedData out;
    out.n = n;

    // H_n through the Fourier multiplier ρ̂_P(2π|k|/n).
    SpectralGrid sg(P, grid.N());
    std::vector<cplx> hat(sg.complex_size());
    std::map<int, double> multiplier;
    out.H_n.resize(terminal.rows(), terminal.cols());
    for (Eigen::Index l = 0; l < terminal.cols(); ++l) {
        Eigen::VectorXd col = terminal.col(l);
        sg.forward(col.data(), hat.data());
        for (std::size_t c = 0; c < hat.size(); ++c) {
            const int k2 = sg.wave_norm2(c);
            auto it = multiplier.find(k2);
            if (it == multiplier.end())
                it = multiplier.emplace(k2, bump_fourier(P, 2 * std::numbers::pi * std::sqrt(double(k2)) / n)).first;
            hat[c] *= it->second;
        }
        sg.backward(hat.data(), out.H_n.col(l).data());
    }
    out.sup_H_change = (out.H_n - terminal).cwiseAbs().maxCoeff();

    // v̄_n on the (y, z) nodes by ball quadrature of the clamped table interpolant.
    const TensorGrid& yg = table->y_grid();
    const TensorGrid& zg = table->z_grid();
    const int Dy = yg.dims(), Dz = zg.dims(), D = Dy + Dz;
    const double r = 1.0 / n;
    auto axis_of = [&](int d) -> const UniformAxis& { return d < Dy ? yg.axis(d) : zg.axis(d - Dy); };
    for (int d = 0; d < D; ++d) {
        const UniformAxis& a = axis_of(d);
        if (a.n > 1 && 2 * r >= a.hi - a.lo)
            throw DomainError("mollifier support of radius 1/" + std::to_string(n) +
                              " does not fit in the table box (axis width " + std::to_string(a.hi - a.lo) + ")");
    }
    BallRule rule = ball_rule(D, points_per_axis);
    const std::size_t ny = yg.size(), nz = zg.size();
    std::vector<double> v(ny * nz * static_cast<std::size_t>(Q), 0.0);
    std::vector<double> q(static_cast<std::size_t>(D)), y(static_cast<std::size_t>(Dy)), z(static_cast<std::size_t>(Dz)),
        vq(static_cast<std::size_t>(Q));
    const long before = table->extrapolations();
    for (std::size_t iy = 0; iy < ny; ++iy)
        for (std::size_t iz = 0; iz < nz; ++iz) {
            yg.node(iy, q.data());
            zg.node(iz, q.data() + Dy);
            bool truncated = false;
            for (int d = 0; d < D; ++d) {
                const UniformAxis& a = axis_of(d);
                const double qd = q[static_cast<std::size_t>(d)];
                if (a.n > 1 && (qd - r < a.lo - 1e-12 || qd + r > a.hi + 1e-12)) truncated = true;
            }
            if (truncated) ++out.truncated_nodes;
            double* dst = v.data() + (iy * nz + iz) * static_cast<std::size_t>(Q);
            for (std::size_t k = 0; k < rule.points.size(); ++k) {
                for (int d = 0; d < Dy; ++d) y[static_cast<std::size_t>(d)] = q[static_cast<std::size_t>(d)] - rule.points[k][d] * r;
                for (int d = 0; d < Dz; ++d)
                    z[static_cast<std::size_t>(d)] = q[static_cast<std::size_t>(Dy + d)] - rule.points[k][Dy + d] * r;
                table->uv_bar(y.data(), z.data(), nullptr, vq.data());
                for (int l = 0; l < Q; ++l) dst[l] += rule.weights[k] * vq[static_cast<std::size_t>(l)];
            }
        }
    // Clamped queries while building v̄_n are reported through truncated_nodes instead.
    if (before == 0) table->reset_extrapolations();
    auto t = std::make_shared<HomogenizedTable>(yg, zg, table->P(), Q, table->alpha_values(), table->u_values(), std::move(v));
    t->provenance = table->provenance + ";vbar_n=" + std::to_string(n);
    out.table_n = std::move(t);
    return out;
}

DecouplingField solve_regularized_system(const MollifiedData& data, double T, const TorusGrid& grid,
                                         SolverSettings settings) {
    settings.record_hessian = true;
    LimitModel model(data.table_n, "regularized n=" + std::to_string(data.n));
    return solve_pde(model, data.H_n, T, grid, settings);
}

// ---------------------------------------------------------------------------
// m(n)

MollificationChoice select_mollification_index(std::shared_ptr<const CellTable> cells, double hessian_sup, int n,
                                               const std::vector<int>& m_candidates, double y_bound) {
    if (m_candidates.empty()) throw UsageError("m(n) selection needs at least one candidate");
    if (!cells) throw UsageError("m(n) selection needs a cell table");
    MollificationChoice out;
    out.hessian_sup = hessian_sup;
    out.y_bound = y_bound;
    out.candidates.push_back(n);
    for (int m : m_candidates)
        if (m > n) out.candidates.push_back(m);
    std::sort(out.candidates.begin(), out.candidates.end());
    out.candidates.erase(std::unique(out.candidates.begin(), out.candidates.end()), out.candidates.end());

    const TensorGrid& yg = cells->y_grid();
    for (int d = 0; d < yg.dims(); ++d)
        if (yg.axis(d).n > 1 && (yg.axis(d).lo > -y_bound || yg.axis(d).hi < y_bound)) out.ball_truncated = true;
    std::vector<std::size_t> in_ball;
    for (std::size_t i = 0; i < yg.size(); ++i) {
        std::vector<double> y = yg.node(i);
        double r2 = 0.0;
        for (double v : y) r2 += v * v;
        if (r2 <= y_bound * y_bound * (1 + 1e-12)) in_ball.push_back(i);
    }
    if (in_ball.empty()) throw DomainError("no table y-node lies within |y| <= " + std::to_string(y_bound));

    bool chosen = false;
    for (int m : out.candidates) {
        MollifiedDensity pm(cells, m);
        double gap = 0.0;
        int used = 0;
        for (std::size_t i : in_ball) {
            const CellSolution& node = cells->node(i);
            if (!pm.supported(node.y)) {
                out.ball_truncated = true;
                continue;
            }
            gap = std::max(gap, l2_norm(pm.field(node.y) - node.p.values.col(0)));
            ++used;
        }
        if (used == 0)
            throw DomainError("mollifier of radius 1/" + std::to_string(m) +
                              " leaves the table box at every y-node in the ball; widen the y-box");
        out.density_gaps.push_back(gap);
        out.products.push_back(hessian_sup * gap);
        if (!chosen && hessian_sup * gap <= 1.0 / n) {
            out.m = m;
            chosen = true;
        }
    }
    if (!chosen) {
        out.m = out.candidates.back();
        out.warning = true;
    }
    return out;
}

MollificationChoice select_mollification_index(std::shared_ptr<const CellTable> cells, const DecouplingField& zeta_n,
                                               int n, const std::vector<int>& m_candidates, double y_bound) {
    if (zeta_n.hess_sup.empty()) throw UsageError("decoupling field has no recorded Hessian");
    return select_mollification_index(std::move(cells), zeta_n.sup_hessian(), n, m_candidates, y_bound);
}

// ---------------------------------------------------------------------------
// Sampling

FieldSampler::FieldSampler(const DecouplingField& field, int fine_nodes) {
    P_ = field.grid.P();
    Q_ = field.Q;
    T_ = field.T;
    slices_ = static_cast<int>(field.slices());
    if (slices_ < 2) throw UsageError("field sampler needs at least two time slices");
    dt_ = T_ / (slices_ - 1);
    const int M = field.grid.N();
    Mf_ = fine_nodes > 0 ? fine_nodes : (P_ == 1 ? std::max(1024, 4 * M) : std::max(64, M));
    if (Mf_ < M || Mf_ % 2 != 0) throw UsageError("sampler grid must be even and at least as fine as the field grid");
    SpectralGrid coarse(P_, M), fine(P_, Mf_);
    n_ = fine.real_size();
    const auto sQ = static_cast<std::size_t>(Q_), sQP = static_cast<std::size_t>(Q_ * P_);
    const auto S = static_cast<std::size_t>(slices_);
    theta_.resize(S * n_ * sQ);
    theta_t_.resize(S * n_ * sQ);
    grad_.resize(S * n_ * sQP);
    grad_t_.resize(S * n_ * sQP);
    std::vector<cplx> hat(coarse.complex_size()), fhat(fine.complex_size());
    std::vector<double> buf(n_);
    auto upsample = [&](const Eigen::MatrixXd& src, int width, std::vector<double>& dst, std::size_t s) {
        for (int c = 0; c < width; ++c) {
            Eigen::VectorXd col = src.col(c);
            coarse.forward(col.data(), hat.data());
            coarse.pad_to(hat.data(), fine, fhat.data());
            fine.backward(fhat.data(), buf.data());
            for (std::size_t e = 0; e < n_; ++e)
                dst[(s * n_ + e) * static_cast<std::size_t>(width) + static_cast<std::size_t>(c)] = buf[e];
        }
    };
    for (std::size_t s = 0; s < S; ++s) {
        upsample(field.theta[s], Q_, theta_, s);
        upsample(field.theta_t[s], Q_, theta_t_, s);
        upsample(field.grad[s], Q_ * P_, grad_, s);
        upsample(field.grad_t[s], Q_ * P_, grad_t_, s);
    }
}

void FieldSampler::eval(double t, const double* x, double* theta, double* grad) const {
    double ts = t / dt_;
    int s = static_cast<int>(std::floor(ts));
    s = std::clamp(s, 0, slices_ - 2);
    const double u = std::clamp(ts - s, 0.0, 1.0);
    const double u2 = u * u, u3 = u2 * u;
    const double h00 = 2 * u3 - 3 * u2 + 1, h10 = (u3 - 2 * u2 + u) * dt_, h01 = -2 * u3 + 3 * u2, h11 = (u3 - u2) * dt_;

    // Tensor 4-point Lagrange stencil per axis.
    int idx[3][4];
    double w[3][4];
    for (int d = 0; d < P_; ++d) {
        double xd = x[d] - std::floor(x[d]);
        double pos = xd * Mf_;
        int i = static_cast<int>(std::floor(pos));
        double f = pos - i;
        w[d][0] = -f * (f - 1) * (f - 2) / 6;
        w[d][1] = (f + 1) * (f - 1) * (f - 2) / 2;
        w[d][2] = -(f + 1) * f * (f - 2) / 2;
        w[d][3] = (f + 1) * f * (f - 1) / 6;
        for (int o = 0; o < 4; ++o) idx[d][o] = ((i + o - 1) % Mf_ + Mf_) % Mf_;
    }
    const auto sQ = static_cast<std::size_t>(Q_), sQP = static_cast<std::size_t>(Q_ * P_);
    const std::size_t base0 = static_cast<std::size_t>(s) * n_, base1 = base0 + n_;
    if (theta) std::fill(theta, theta + Q_, 0.0);
    if (grad) std::fill(grad, grad + Q_ * P_, 0.0);
    const int corners = 1 << (2 * P_);
    for (int c = 0; c < corners; ++c) {
        double wt = 1.0;
        std::size_t node = 0, stride = 1;
        for (int d = 0; d < P_; ++d) {
            const int o = (c >> (2 * d)) & 3;
            wt *= w[d][o];
            node += stride * static_cast<std::size_t>(idx[d][o]);
            stride *= static_cast<std::size_t>(Mf_);
        }
        if (theta) {
            const double* a0 = &theta_[(base0 + node) * sQ];
            const double* a1 = &theta_[(base1 + node) * sQ];
            const double* b0 = &theta_t_[(base0 + node) * sQ];
            const double* b1 = &theta_t_[(base1 + node) * sQ];
            for (int l = 0; l < Q_; ++l) theta[l] += wt * (h00 * a0[l] + h10 * b0[l] + h01 * a1[l] + h11 * b1[l]);
        }
        if (grad) {
            const double* a0 = &grad_[(base0 + node) * sQP];
            const double* a1 = &grad_[(base1 + node) * sQP];
            const double* b0 = &grad_t_[(base0 + node) * sQP];
            const double* b1 = &grad_t_[(base1 + node) * sQP];
            for (int r = 0; r < Q_ * P_; ++r) grad[r] += wt * (h00 * a0[r] + h10 * b0[r] + h01 * a1[r] + h11 * b1[r]);
        }
    }
}

}  // namespace homz
