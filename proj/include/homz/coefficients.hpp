#pragma once

#include "homz/expression.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace homz {

enum class Coefficient { a, b, c, e, f, sigma, H };

/// Parses "a", "b", "c", "e", "f", "sigma" (or "σ") and "H".
Coefficient coefficient_from_name(const std::string& name);
const char* coefficient_name(Coefficient which);

/// Structural constants of the coefficient set.
struct Constants {
    double k = 1.0;
    double lambda = 1.0;
    double Lambda = 1.0;
    /// Sampled nondecreasing function K as (radius, value) pairs; reporting only.
    std::vector<std::pair<double, double>> K;

    /// K(r) by piecewise-linear interpolation of the samples (clamped at the ends).
    std::optional<double> K_at(double r) const;
};

/// Textual definition of a coefficient set. Matrices are row-major.
struct CoefficientSources {
    std::string name;
    int P = 1;
    int Q = 1;
    std::vector<std::string> sigma;  // P*P
    std::vector<std::string> b;      // P
    std::vector<std::string> c;      // P
    std::vector<std::string> e;      // Q
    std::vector<std::string> f;      // Q
    std::vector<std::string> H;      // Q
    Constants constants;
};

/// Compiled, immutable coefficient set (σ, b, c, e, f, H) with a = σσ*.
///
/// Hot-path evaluators read a slot buffer laid out by CoefficientSlots:
/// x1..xP, y1..yQ, z11..zQP, t. Outputs are row-major.
class CoefficientSpec {
public:
    static CoefficientSpec build(const CoefficientSources& sources);

    int P() const { return sources_.P; }
    int Q() const { return sources_.Q; }
    const CoefficientSources& sources() const { return sources_; }
    const Constants& constants() const { return sources_.constants; }
    const CoefficientSlots& slots() const { return slots_; }

    void sigma(const double* s, double* out) const;
    void a(const double* s, double* out) const;
    void b(const double* s, double* out) const;
    void c(const double* s, double* out) const;
    void e(const double* s, double* out) const;
    void f(const double* s, double* out) const;
    void H(const double* s, double* out) const;

    const std::vector<Expression>& expressions(Coefficient which) const;

    bool depends_on_x(Coefficient which) const;
    bool depends_on_y(Coefficient which) const;
    bool depends_on_z(Coefficient which) const;
    /// True when b and e are identically zero expressions.
    bool corrector_free() const;

private:
    CoefficientSources sources_;
    CoefficientSlots slots_;
    std::vector<Expression> sigma_, b_, c_, e_, f_, H_;
};

/// Evaluates one coefficient at a point. `z` (Q×P) must be given iff which ∈ {c, f}.
/// Vectors are returned as column matrices.
Eigen::MatrixXd eval_coefficient(const CoefficientSpec& spec, Coefficient which, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& y, const std::optional<Eigen::MatrixXd>& z = std::nullopt);

/// Names accepted by preset().
std::vector<std::string> preset_names();
CoefficientSources preset_sources(const std::string& name);
CoefficientSpec preset(const std::string& name);

struct ValidationOptions {
    int sample_density = 64;  ///< x samples per axis
    double y_box = 5.0;       ///< |y_j| ≤ y_box
    double z_box = 5.0;       ///< |z_jl| ≤ z_box
    int y_points = 9;         ///< samples per y axis
    int z_points = 5;         ///< samples per z entry
};

struct HypothesisCheck {
    std::string id;          ///< "H.1" ... "H.7"
    bool passed = true;
    bool report_only = false;
    double measured = 0.0;   ///< worst sampled quantity
    double bound = 0.0;      ///< the declared constant it is compared with (0 when none)
    std::vector<double> witness_x;
    std::vector<double> witness_y;
    std::string note;
};

struct ValidationReport {
    std::vector<HypothesisCheck> checks;
    bool all_passed() const;
    const HypothesisCheck& at(const std::string& id) const;
};

ValidationReport validate_assumptions(const CoefficientSpec& spec, int sample_density);
ValidationReport validate_assumptions(const CoefficientSpec& spec, const ValidationOptions& options);

}  // namespace homz
