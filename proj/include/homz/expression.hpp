#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace homz {

/// Ordered set of named variable slots an expression may read.
///
/// Besides explicit names, a layout can carry aliases (e.g. `x` for `x1`).
class VariableLayout {
public:
    /// Adds a slot and returns its index.
    std::size_t add(const std::string& name);
    void add_alias(const std::string& alias, const std::string& target);

    /// Slot index for `name`, or npos when unknown.
    std::size_t find(std::string_view name) const;
    std::size_t size() const { return names_.size(); }
    const std::string& name(std::size_t slot) const { return names_[slot]; }

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    /// Layout used for every coefficient: x1..xP, y1..yQ, z11..zQP, t, g1..g_ng.
    /// Single-index aliases `x`, `y`, `z`, `g` exist when the matching range has one entry.
    static VariableLayout coefficient(int P, int Q, int n_g = 0);

private:
    std::vector<std::string> names_;
    std::vector<std::pair<std::string, std::size_t>> aliases_;
};

/// Slot offsets matching VariableLayout::coefficient.
struct CoefficientSlots {
    int P = 1;
    int Q = 1;
    int n_g = 0;
    std::size_t x(int i) const { return static_cast<std::size_t>(i); }
    std::size_t y(int j) const { return static_cast<std::size_t>(P + j); }
    std::size_t z(int j, int l) const { return static_cast<std::size_t>(P + Q + j * P + l); }
    std::size_t t() const { return static_cast<std::size_t>(P + Q + Q * P); }
    std::size_t g(int k) const { return t() + 1 + static_cast<std::size_t>(k); }
    std::size_t count() const { return t() + 1 + static_cast<std::size_t>(n_g); }
};

/// Arithmetic expression compiled to postfix bytecode.
///
/// Grammar: numbers, variables of the layout, `pi`, `e`, binary `+ - * / ^`,
/// unary minus, parentheses and the functions sin cos tan exp log sqrt abs tanh
/// atan (one argument) and min max pow atan2 (two arguments).
class Expression {
public:
    Expression() = default;

    /// Parses and compiles `source`. Throws DefinitionError on syntax errors or unknown names.
    static Expression compile(std::string_view source, const VariableLayout& layout);
    static Expression constant(double value);

    double eval(const double* slots) const;

    /// True when the compiled program reads slot `slot`.
    bool depends_on(std::size_t slot) const;
    /// True when the compiled program reads any slot in [first, last).
    bool depends_on_range(std::size_t first, std::size_t last) const;
    bool is_constant() const { return code_.size() == 1 && code_[0].op == Op::push_const; }
    const std::string& source() const { return source_; }

private:
    enum class Op : std::uint8_t {
        push_const, push_var, add, sub, mul, div, pow, pow_int, neg,
        sin, cos, tan, exp, log, sqrt, abs, tanh, atan, min, max, atan2
    };
    struct Instr {
        Op op;
        std::int32_t arg = 0;
        double value = 0.0;
    };
    friend class ExpressionParser;

    std::string source_;
    std::vector<Instr> code_;
    std::vector<std::uint64_t> used_;
    int max_depth_ = 0;
};

}  // namespace homz
