#include "homz/coefficients.hpp"

#include "homz/errors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <sstream>

namespace homz {

Coefficient coefficient_from_name(const std::string& name) {
    if (name == "a") return Coefficient::a;
    if (name == "b") return Coefficient::b;
    if (name == "c") return Coefficient::c;
    if (name == "e") return Coefficient::e;
    if (name == "f") return Coefficient::f;
    if (name == "sigma" || name == "σ") return Coefficient::sigma;
    if (name == "H") return Coefficient::H;
    throw UsageError("unknown coefficient '" + name + "'");
}

const char* coefficient_name(Coefficient which) {
    switch (which) {
        case Coefficient::a: return "a";
        case Coefficient::b: return "b";
        case Coefficient::c: return "c";
        case Coefficient::e: return "e";
        case Coefficient::f: return "f";
        case Coefficient::sigma: return "sigma";
        case Coefficient::H: return "H";
    }
    return "?";
}

std::optional<double> Constants::K_at(double r) const {
    if (K.empty()) return std::nullopt;
    if (r <= K.front().first) return K.front().second;
    for (std::size_t i = 1; i < K.size(); ++i) {
        if (r <= K[i].first) {
            double w = (r - K[i - 1].first) / (K[i].first - K[i - 1].first);
            return (1 - w) * K[i - 1].second + w * K[i].second;
        }
    }
    return K.back().second;
}

namespace {

std::vector<Expression> compile_block(const std::vector<std::string>& src, std::size_t expected, const char* name,
                                      const VariableLayout& layout, bool allow_y, bool allow_z) {
    if (src.size() != expected)
        throw DefinitionError(std::string("coefficient ") + name + ": expected " + std::to_string(expected) +
                              " entries, got " + std::to_string(src.size()));
    std::vector<Expression> out;
    out.reserve(src.size());
    for (const auto& s : src) {
        try {
            out.push_back(Expression::compile(s, layout));
        } catch (const DefinitionError& err) {
            throw DefinitionError(std::string("coefficient ") + name + ": " + err.what());
        }
    }
    // Forbidden dependencies are rejected at build time.
    std::size_t P = 0, Q = 0;
    while (layout.find("x" + std::to_string(P + 1)) != VariableLayout::npos) ++P;
    while (layout.find("y" + std::to_string(Q + 1)) != VariableLayout::npos) ++Q;
    CoefficientSlots cs{static_cast<int>(P), static_cast<int>(Q), 0};
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!allow_y && out[i].depends_on_range(cs.y(0), cs.y(0) + Q))
            throw DefinitionError(std::string("coefficient ") + name + " may not depend on y: \"" + src[i] + "\"");
        if (!allow_z && out[i].depends_on_range(cs.z(0, 0), cs.z(0, 0) + P * Q))
            throw DefinitionError(std::string("coefficient ") + name + " may not depend on z: \"" + src[i] + "\"");
        if (out[i].depends_on(cs.t()))
            throw DefinitionError(std::string("coefficient ") + name + " may not depend on t: \"" + src[i] + "\"");
    }
    return out;
}

inline void eval_all(const std::vector<Expression>& exprs, const double* s, double* out) {
    for (std::size_t i = 0; i < exprs.size(); ++i) out[i] = exprs[i].eval(s);
}

bool is_zero_expression(const Expression& e) { return e.is_constant() && e.eval(nullptr) == 0.0; }

}  // namespace

CoefficientSpec CoefficientSpec::build(const CoefficientSources& sources) {
    if (sources.P < 1 || sources.Q < 1) throw DefinitionError("dimensions P and Q must be positive");
    if (!(sources.constants.lambda > 0)) throw DefinitionError("lambda must be positive");
    CoefficientSpec spec;
    spec.sources_ = sources;
    const auto P = static_cast<std::size_t>(sources.P);
    const auto Q = static_cast<std::size_t>(sources.Q);
    spec.slots_ = CoefficientSlots{sources.P, sources.Q, 0};
    VariableLayout layout = VariableLayout::coefficient(sources.P, sources.Q);
    spec.sigma_ = compile_block(sources.sigma, P * P, "sigma", layout, true, false);
    spec.b_ = compile_block(sources.b, P, "b", layout, true, false);
    spec.c_ = compile_block(sources.c, P, "c", layout, true, true);
    spec.e_ = compile_block(sources.e, Q, "e", layout, true, false);
    spec.f_ = compile_block(sources.f, Q, "f", layout, true, true);
    spec.H_ = compile_block(sources.H, Q, "H", layout, false, false);
    return spec;
}

void CoefficientSpec::sigma(const double* s, double* out) const { eval_all(sigma_, s, out); }

void CoefficientSpec::a(const double* s, double* out) const {
    const int P = sources_.P;
    double sig[64];
    std::vector<double> big;
    double* sg = sig;
    if (P * P > 64) {
        big.resize(static_cast<std::size_t>(P * P));
        sg = big.data();
    }
    eval_all(sigma_, s, sg);
    for (int i = 0; i < P; ++i)
        for (int j = 0; j <= i; ++j) {
            double acc = 0.0;
            for (int k = 0; k < P; ++k) acc += sg[i * P + k] * sg[j * P + k];
            out[i * P + j] = acc;
            out[j * P + i] = acc;
        }
}

void CoefficientSpec::b(const double* s, double* out) const { eval_all(b_, s, out); }
void CoefficientSpec::c(const double* s, double* out) const { eval_all(c_, s, out); }
void CoefficientSpec::e(const double* s, double* out) const { eval_all(e_, s, out); }
void CoefficientSpec::f(const double* s, double* out) const { eval_all(f_, s, out); }
void CoefficientSpec::H(const double* s, double* out) const { eval_all(H_, s, out); }

const std::vector<Expression>& CoefficientSpec::expressions(Coefficient which) const {
    switch (which) {
        case Coefficient::a:
        case Coefficient::sigma: return sigma_;
        case Coefficient::b: return b_;
        case Coefficient::c: return c_;
        case Coefficient::e: return e_;
        case Coefficient::f: return f_;
        case Coefficient::H: return H_;
    }
    return sigma_;
}

bool CoefficientSpec::depends_on_x(Coefficient which) const {
    for (const auto& e : expressions(which))
        if (e.depends_on_range(slots_.x(0), slots_.x(0) + static_cast<std::size_t>(P()))) return true;
    return false;
}

bool CoefficientSpec::depends_on_y(Coefficient which) const {
    for (const auto& e : expressions(which))
        if (e.depends_on_range(slots_.y(0), slots_.y(0) + static_cast<std::size_t>(Q()))) return true;
    return false;
}

bool CoefficientSpec::depends_on_z(Coefficient which) const {
    for (const auto& e : expressions(which))
        if (e.depends_on_range(slots_.z(0, 0), slots_.z(0, 0) + static_cast<std::size_t>(P() * Q()))) return true;
    return false;
}

bool CoefficientSpec::corrector_free() const {
    return std::all_of(b_.begin(), b_.end(), is_zero_expression) &&
           std::all_of(e_.begin(), e_.end(), is_zero_expression);
}

Eigen::MatrixXd eval_coefficient(const CoefficientSpec& spec, Coefficient which, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& y, const std::optional<Eigen::MatrixXd>& z) {
    const int P = spec.P(), Q = spec.Q();
    const bool needs_z = which == Coefficient::c || which == Coefficient::f;
    if (needs_z != z.has_value())
        throw UsageError(std::string("coefficient ") + coefficient_name(which) +
                         (needs_z ? " requires a z argument" : " takes no z argument"));
    if (x.size() != P || y.size() != Q) throw UsageError("point has wrong dimension");
    if (z && (z->rows() != Q || z->cols() != P)) throw UsageError("z must be Q x P");
    const auto& cs = spec.slots();
    std::vector<double> s(cs.count(), 0.0);
    for (int i = 0; i < P; ++i) s[cs.x(i)] = x[i];
    for (int j = 0; j < Q; ++j) s[cs.y(j)] = y[j];
    if (z)
        for (int j = 0; j < Q; ++j)
            for (int l = 0; l < P; ++l) s[cs.z(j, l)] = (*z)(j, l);
    switch (which) {
        case Coefficient::a:
        case Coefficient::sigma: {
            std::vector<double> out(static_cast<std::size_t>(P * P));
            if (which == Coefficient::a)
                spec.a(s.data(), out.data());
            else
                spec.sigma(s.data(), out.data());
            Eigen::MatrixXd m(P, P);
            for (int i = 0; i < P; ++i)
                for (int j = 0; j < P; ++j) m(i, j) = out[static_cast<std::size_t>(i * P + j)];
            return m;
        }
        case Coefficient::b:
        case Coefficient::c: {
            Eigen::MatrixXd m(P, 1);
            if (which == Coefficient::b)
                spec.b(s.data(), m.data());
            else
                spec.c(s.data(), m.data());
            return m;
        }
        case Coefficient::e:
        case Coefficient::f:
        case Coefficient::H: {
            Eigen::MatrixXd m(Q, 1);
            if (which == Coefficient::e)
                spec.e(s.data(), m.data());
            else if (which == Coefficient::f)
                spec.f(s.data(), m.data());
            else
                spec.H(s.data(), m.data());
            return m;
        }
    }
    throw UsageError("unknown coefficient");
}

// ---------------------------------------------------------------------------
// Preset catalog

std::vector<std::string> preset_names() {
    return {"constant", "harmonic-1d", "divergence-form", "separable-drift", "quasilinear-demo", "harmonic-2d"};
}

CoefficientSources preset_sources(const std::string& name) {
    CoefficientSources s;
    s.name = name;
    if (name == "constant") {
        s.sigma = {"1"};
        s.b = {"0"};
        s.c = {"0"};
        s.e = {"0"};
        s.f = {"0"};
        s.H = {"sin(2*pi*x)"};
        s.constants = {2 * std::numbers::pi, 1.0, 2.0, {{0.0, 1.0}}};
    } else if (name == "harmonic-1d") {
        s.sigma = {"sqrt(2 + sin(2*pi*x))"};
        s.b = {"0"};
        s.c = {"0"};
        s.e = {"0"};
        s.f = {"0"};
        s.H = {"sin(2*pi*x)"};
        s.constants = {2 * std::numbers::pi, 1.0, 3.0, {{0.0, 1.0}}};
    } else if (name == "divergence-form") {
        s.sigma = {"sqrt(2 + sin(2*pi*x))"};
        s.b = {"pi*cos(2*pi*x)"};
        s.c = {"0"};
        s.e = {"0"};
        s.f = {"0"};
        s.H = {"sin(2*pi*x)"};
        s.constants = {2 * std::numbers::pi, 1.0, 6.0, {{0.0, 1.0}}};
    } else if (name == "separable-drift") {
        s.sigma = {"1"};
        s.b = {"y*sin(2*pi*x)"};
        s.c = {"0"};
        s.e = {"0"};
        s.f = {"0"};
        s.H = {"sin(2*pi*x)"};
        s.constants = {2 * std::numbers::pi, 1.0, 8.0, {{0.0, 32.0}}};
    } else if (name == "quasilinear-demo") {
        s.sigma = {"sqrt(2 + sin(2*pi*x) + 0.3*sin(0.5*y)*cos(2*pi*x))"};
        s.b = {"0.5*pi*cos(2*pi*x) - 0.15*pi*sin(0.5*y)*sin(2*pi*x)"};
        s.c = {"0.25*z + 0.1*cos(2*pi*x)"};
        s.e = {"0.5*cos(2*pi*x) - 0.15*sin(0.5*y)*sin(2*pi*x)"};
        s.f = {"-0.5*y + 0.5*z*sin(2*pi*x) + 0.2*cos(2*pi*x)"};
        s.H = {"sin(2*pi*x)"};
        s.constants = {2 * std::numbers::pi, 0.9, 5.0, {{0.0, 12.0}, {10.0, 12.0}}};
    } else if (name == "harmonic-2d") {
        s.P = 2;
        s.sigma = {"sqrt(2 + sin(2*pi*x1))", "0", "0", "sqrt(2 + sin(2*pi*x2))"};
        s.b = {"0", "0"};
        s.c = {"0", "0"};
        s.e = {"0"};
        s.f = {"0"};
        s.H = {"sin(2*pi*x1)*cos(2*pi*x2)"};
        s.constants = {4 * std::numbers::pi, 1.0, 4.0, {{0.0, 1.0}}};
    } else {
        std::string known;
        for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
        throw UsageError("unknown preset '" + name + "' (known: " + known + ")");
    }
    return s;
}

CoefficientSpec preset(const std::string& name) { return CoefficientSpec::build(preset_sources(name)); }

// ---------------------------------------------------------------------------
// Validation

bool ValidationReport::all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const HypothesisCheck& c) { return c.passed; });
}

const HypothesisCheck& ValidationReport::at(const std::string& id) const {
    for (const auto& c : checks)
        if (c.id == id) return c;
    throw UsageError("no check named " + id);
}

namespace {

struct Sampler {
    const CoefficientSpec& spec;
    const CoefficientSlots& cs;
    int P, Q;
    std::vector<double> s;

    explicit Sampler(const CoefficientSpec& sp)
        : spec(sp), cs(sp.slots()), P(sp.P()), Q(sp.Q()), s(sp.slots().count(), 0.0) {}

    void set(const std::vector<double>& x, const std::vector<double>& y, const std::vector<double>* z) {
        for (int i = 0; i < P; ++i) s[cs.x(i)] = x[static_cast<std::size_t>(i)];
        for (int j = 0; j < Q; ++j) s[cs.y(j)] = y[static_cast<std::size_t>(j)];
        for (int k = 0; k < P * Q; ++k) s[cs.z(0, 0) + static_cast<std::size_t>(k)] = z ? (*z)[static_cast<std::size_t>(k)] : 0.0;
    }

    std::vector<double> eval(Coefficient which) {
        std::size_t n = 0;
        switch (which) {
            case Coefficient::a:
            case Coefficient::sigma: n = static_cast<std::size_t>(P * P); break;
            case Coefficient::b:
            case Coefficient::c: n = static_cast<std::size_t>(P); break;
            default: n = static_cast<std::size_t>(Q); break;
        }
        std::vector<double> out(n);
        switch (which) {
            case Coefficient::a: spec.a(s.data(), out.data()); break;
            case Coefficient::sigma: spec.sigma(s.data(), out.data()); break;
            case Coefficient::b: spec.b(s.data(), out.data()); break;
            case Coefficient::c: spec.c(s.data(), out.data()); break;
            case Coefficient::e: spec.e(s.data(), out.data()); break;
            case Coefficient::f: spec.f(s.data(), out.data()); break;
            case Coefficient::H: spec.H(s.data(), out.data()); break;
        }
        for (double v : out) {
            if (!std::isfinite(v)) {
                std::ostringstream os;
                os << "coefficient " << coefficient_name(which) << " is not finite at x=(";
                for (int i = 0; i < P; ++i) os << (i ? "," : "") << s[cs.x(i)];
                os << "), y=(";
                for (int j = 0; j < Q; ++j) os << (j ? "," : "") << s[cs.y(j)];
                os << ")";
                throw NumericError(os.str());
            }
        }
        return out;
    }
};

double norm(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

std::vector<double> diff(const std::vector<double>& u, const std::vector<double>& v) {
    std::vector<double> d(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) d[i] = u[i] - v[i];
    return d;
}

/// Enumerates a tensor grid given per-axis point lists.
void for_each_tensor(int dims, const std::vector<double>& axis, const std::function<void(const std::vector<double>&)>& fn) {
    std::vector<double> point(static_cast<std::size_t>(dims));
    std::vector<std::size_t> idx(static_cast<std::size_t>(dims), 0);
    const std::size_t n = axis.size();
    if (dims == 0) {
        fn(point);
        return;
    }
    for (;;) {
        for (int d = 0; d < dims; ++d) point[static_cast<std::size_t>(d)] = axis[idx[static_cast<std::size_t>(d)]];
        fn(point);
        int d = 0;
        while (d < dims) {
            if (++idx[static_cast<std::size_t>(d)] < n) break;
            idx[static_cast<std::size_t>(d)] = 0;
            ++d;
        }
        if (d == dims) return;
    }
}

std::vector<double> linspace(double lo, double hi, int n) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = n == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / (n - 1);
    return v;
}

double min_eigenvalue(const std::vector<double>& a, int P) {
    if (P == 1) return a[0];
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(a.data(), P, P);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

}  // namespace

ValidationReport validate_assumptions(const CoefficientSpec& spec, int sample_density) {
    ValidationOptions opt;
    opt.sample_density = sample_density;
    return validate_assumptions(spec, opt);
}

ValidationReport validate_assumptions(const CoefficientSpec& spec, const ValidationOptions& opt) {
    if (opt.sample_density < 2) throw UsageError("sample_density must be at least 2");
    const int P = spec.P(), Q = spec.Q();
    const auto& K = spec.constants();
    Sampler smp(spec);

    int nx = opt.sample_density;
    if (P >= 2) nx = std::min(nx, 32);
    std::vector<double> xaxis(static_cast<std::size_t>(nx));
    for (int i = 0; i < nx; ++i) xaxis[static_cast<std::size_t>(i)] = static_cast<double>(i) / nx;
    const std::vector<double> yaxis = linspace(-opt.y_box, opt.y_box, opt.y_points);
    const std::vector<double> zaxis = linspace(-opt.z_box, opt.z_box, opt.z_points);
    std::vector<std::vector<double>> xs, ys, zs;
    for_each_tensor(P, xaxis, [&](const std::vector<double>& p) { xs.push_back(p); });
    for_each_tensor(Q, yaxis, [&](const std::vector<double>& p) { ys.push_back(p); });
    for_each_tensor(P * Q, zaxis, [&](const std::vector<double>& p) { zs.push_back(p); });
    // z-dependent checks visit a thinned x sample to bound the cost.
    const std::size_t xstride = std::max<std::size_t>(1, xs.size() * zs.size() / 4096);

    auto named = [](const char* id) {
        HypothesisCheck c;
        c.id = id;
        return c;
    };
    HypothesisCheck h1 = named("H.1"), h2 = named("H.2"), h3 = named("H.3"), h4 = named("H.4"), h5 = named("H.5"),
                    h6 = named("H.6"), h7 = named("H.7");
    h2.report_only = true;
    h3.report_only = true;
    h5.measured = std::numeric_limits<double>::infinity();
    h5.bound = K.lambda;
    h4.bound = K.Lambda;
    h3.bound = K.k;
    const double dx = 1.0 / nx;
    const double dy = (yaxis.size() > 1) ? (yaxis[1] - yaxis[0]) : 1.0;
    const double hy = 1e-3;

    auto shifted = [](std::vector<double> v, int axis, double by) {
        v[static_cast<std::size_t>(axis)] += by;
        return v;
    };
    auto record_max = [](HypothesisCheck& h, double value, const std::vector<double>& x, const std::vector<double>& y) {
        if (value > h.measured) {
            h.measured = value;
            h.witness_x = x;
            h.witness_y = y;
        }
    };

    double h4_growth = 0.0;
    double lip_sigma_H = 0.0;
    for (const auto& x : xs) {
        for (const auto& y : ys) {
            smp.set(x, y, nullptr);
            auto sig = smp.eval(Coefficient::sigma);
            auto bv = smp.eval(Coefficient::b);
            auto ev = smp.eval(Coefficient::e);
            auto Hv = smp.eval(Coefficient::H);
            auto av = smp.eval(Coefficient::a);

            double lam = min_eigenvalue(av, P);
            if (lam < h5.measured) {
                h5.measured = lam;
                h5.witness_x = x;
                h5.witness_y = y;
            }
            double bound_sum = norm(bv) + norm(ev) + norm(sig) + norm(Hv);
            record_max(h4, bound_sum, x, y);

            for (int i = 0; i < P; ++i) {
                // Periodicity and x-quotients.
                smp.set(shifted(x, i, 1.0), y, nullptr);
                double per = 0.0;
                for (auto which : {Coefficient::sigma, Coefficient::b, Coefficient::e, Coefficient::H}) {
                    auto base = which == Coefficient::sigma ? sig : which == Coefficient::b ? bv : which == Coefficient::e ? ev : Hv;
                    auto moved = smp.eval(which);
                    double scale = 1.0 + norm(base);
                    per = std::max(per, norm(diff(moved, base)) / scale);
                }
                record_max(h1, per, x, y);
                smp.set(shifted(x, i, dx), y, nullptr);
                auto b2 = smp.eval(Coefficient::b);
                auto s2 = smp.eval(Coefficient::sigma);
                auto H2 = smp.eval(Coefficient::H);
                record_max(h2, (b2[static_cast<std::size_t>(i)] - bv[static_cast<std::size_t>(i)]) / dx, x, y);
                lip_sigma_H = std::max(lip_sigma_H, (norm(diff(s2, sig)) + norm(diff(H2, Hv))) / dx);
            }
            for (int j = 0; j < Q; ++j) {
                smp.set(x, shifted(y, j, dy), nullptr);
                auto s2 = smp.eval(Coefficient::sigma);
                lip_sigma_H = std::max(lip_sigma_H, norm(diff(s2, sig)) / dy);
            }
            // y-derivatives of sigma, b, e by central differences.
            double deriv_sum = 0.0;
            bool finite_second = true;
            for (auto which : {Coefficient::sigma, Coefficient::b, Coefficient::e}) {
                smp.set(x, y, nullptr);
                auto g0 = smp.eval(which);
                double grad2 = 0.0, hess2 = 0.0;
                for (int j = 0; j < Q; ++j) {
                    smp.set(x, shifted(y, j, hy), nullptr);
                    auto gp = smp.eval(which);
                    smp.set(x, shifted(y, j, -hy), nullptr);
                    auto gm = smp.eval(which);
                    for (std::size_t k = 0; k < g0.size(); ++k) {
                        double d1 = (gp[k] - gm[k]) / (2 * hy);
                        grad2 += d1 * d1;
                    }
                    for (int jj = 0; jj < Q; ++jj) {
                        auto ypp = shifted(shifted(y, j, hy), jj, hy);
                        auto ypm = shifted(shifted(y, j, hy), jj, -hy);
                        auto ymp = shifted(shifted(y, j, -hy), jj, hy);
                        auto ymm = shifted(shifted(y, j, -hy), jj, -hy);
                        smp.set(x, ypp, nullptr);
                        auto vpp = smp.eval(which);
                        smp.set(x, ypm, nullptr);
                        auto vpm = smp.eval(which);
                        smp.set(x, ymp, nullptr);
                        auto vmp = smp.eval(which);
                        smp.set(x, ymm, nullptr);
                        auto vmm = smp.eval(which);
                        for (std::size_t k = 0; k < g0.size(); ++k) {
                            double d2 = (vpp[k] - vpm[k] - vmp[k] + vmm[k]) / (4 * hy * hy);
                            if (!std::isfinite(d2)) finite_second = false;
                            hess2 += d2 * d2;
                        }
                    }
                }
                deriv_sum += std::sqrt(grad2) + std::sqrt(hess2);
            }
            if (!finite_second) {
                h6.passed = false;
                h6.witness_x = x;
                h6.witness_y = y;
            }
            record_max(h7, deriv_sum, x, y);
        }
    }

    // z-dependent coefficients: growth bound, monotonicity and Lipschitz quotients.
    double lip_cf = 0.0;
    for (std::size_t ix = 0; ix < xs.size(); ix += xstride) {
        const auto& x = xs[ix];
        for (const auto& y : ys) {
            for (const auto& z : zs) {
                smp.set(x, y, &z);
                auto cv = smp.eval(Coefficient::c);
                auto fv = smp.eval(Coefficient::f);
                double growth = (norm(cv) + norm(fv)) / (1.0 + norm(y) + norm(z));
                if (growth > h4_growth) h4_growth = growth;
                for (int i = 0; i < P; ++i) {
                    smp.set(shifted(x, i, 1.0), y, &z);
                    double per = std::max(norm(diff(smp.eval(Coefficient::c), cv)) / (1 + norm(cv)),
                                          norm(diff(smp.eval(Coefficient::f), fv)) / (1 + norm(fv)));
                    record_max(h1, per, x, y);
                    smp.set(shifted(x, i, dx), y, &z);
                    auto c2 = smp.eval(Coefficient::c);
                    record_max(h2, (c2[static_cast<std::size_t>(i)] - cv[static_cast<std::size_t>(i)]) / dx, x, y);
                    lip_cf = std::max(lip_cf, norm(diff(smp.eval(Coefficient::f), fv)) / dx);
                }
                for (int j = 0; j < Q; ++j) {
                    smp.set(x, shifted(y, j, dy), &z);
                    auto f2 = smp.eval(Coefficient::f);
                    record_max(h2, (f2[static_cast<std::size_t>(j)] - fv[static_cast<std::size_t>(j)]) / dy, x, y);
                    lip_cf = std::max(lip_cf, norm(diff(smp.eval(Coefficient::c), cv)) / dy);
                }
            }
        }
    }

    h1.passed = h1.measured <= 1e-12;
    h1.note = "continuity by construction; measured = worst relative periodicity defect";

    h2.note = "sampled one-sided monotonicity constant (max of b, c in x and f in y); reported only";
    if (auto k0 = K.K_at(opt.y_box + opt.z_box)) h2.bound = *k0;

    h3.measured = lip_sigma_H;
    h3.note = "sampled Lipschitz quotient of sigma and H (compare with k); c, f quotient " + std::to_string(lip_cf) +
              "; reported only";

    double h4_abs = h4.measured;
    h4.measured = std::max(h4_abs, h4_growth);
    h4.passed = h4_abs <= K.Lambda * (1 + 1e-12) && h4_growth <= K.Lambda * (1 + 1e-12);
    h4.note = "max |b|+|e|+|sigma|+|H| = " + std::to_string(h4_abs) + ", max (|c|+|f|)/(1+|y|+|z|) = " +
              std::to_string(h4_growth);

    h5.passed = h5.measured >= K.lambda * (1 - 1e-12);
    h5.note = "minimum sampled eigenvalue of a";

    h6.note = "second y-differences of sigma, b, e finite on the sample";

    if (auto k0 = K.K_at(0.0)) {
        h7.bound = *k0;
        h7.passed = h7.measured <= *k0;
        h7.note = "sum of y-derivative norms of b, e, sigma (central differences) compared with K(0)";
    } else {
        h7.report_only = true;
        h7.note = "K not declared; sum of y-derivative norms reported only";
    }

    ValidationReport report;
    report.checks = {h1, h2, h3, h4, h5, h6, h7};
    return report;
}

}  // namespace homz
