#include "homz/expression.hpp"

#include "homz/errors.hpp"

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <cmath>
#include <memory>
#include <numbers>

namespace homz {

std::size_t VariableLayout::add(const std::string& name) {
    names_.push_back(name);
    return names_.size() - 1;
}

void VariableLayout::add_alias(const std::string& alias, const std::string& target) {
    std::size_t slot = find(target);
    if (slot == npos) throw UsageError("alias target '" + target + "' is not a variable");
    aliases_.emplace_back(alias, slot);
}

std::size_t VariableLayout::find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return i;
    for (const auto& [alias, slot] : aliases_)
        if (alias == name) return slot;
    return npos;
}

VariableLayout VariableLayout::coefficient(int P, int Q, int n_g) {
    VariableLayout layout;
    for (int i = 1; i <= P; ++i) layout.add("x" + std::to_string(i));
    for (int j = 1; j <= Q; ++j) layout.add("y" + std::to_string(j));
    for (int j = 1; j <= Q; ++j)
        for (int l = 1; l <= P; ++l) layout.add("z" + std::to_string(j) + std::to_string(l));
    layout.add("t");
    for (int k = 1; k <= n_g; ++k) layout.add("g" + std::to_string(k));
    if (P == 1) layout.add_alias("x", "x1");
    if (Q == 1) layout.add_alias("y", "y1");
    if (P == 1 && Q == 1) layout.add_alias("z", "z11");
    if (n_g == 1) layout.add_alias("g", "g1");
    return layout;
}

namespace {

struct Node {
    enum Kind { constant, variable, unary, binary } kind;
    std::string fn;  // operator symbol or function name
    double value = 0.0;
    std::size_t slot = 0;
    std::unique_ptr<Node> a, b;
};

using NodePtr = std::unique_ptr<Node>;

NodePtr make_const(double v) {
    auto n = std::make_unique<Node>();
    n->kind = Node::constant;
    n->value = v;
    return n;
}

double apply_unary(const std::string& fn, double x) {
    if (fn == "neg") return -x;
    if (fn == "sin") return std::sin(x);
    if (fn == "cos") return std::cos(x);
    if (fn == "tan") return std::tan(x);
    if (fn == "exp") return std::exp(x);
    if (fn == "log") return std::log(x);
    if (fn == "sqrt") return std::sqrt(x);
    if (fn == "abs") return std::fabs(x);
    if (fn == "tanh") return std::tanh(x);
    if (fn == "atan") return std::atan(x);
    throw DefinitionError("unknown function '" + fn + "'");
}

double apply_binary(const std::string& fn, double x, double y) {
    if (fn == "+") return x + y;
    if (fn == "-") return x - y;
    if (fn == "*") return x * y;
    if (fn == "/") return x / y;
    if (fn == "^" || fn == "pow") return std::pow(x, y);
    if (fn == "min") return std::fmin(x, y);
    if (fn == "max") return std::fmax(x, y);
    if (fn == "atan2") return std::atan2(x, y);
    throw DefinitionError("unknown operator '" + fn + "'");
}

bool is_unary_function(const std::string& name) {
    return name == "sin" || name == "cos" || name == "tan" || name == "exp" || name == "log" ||
           name == "sqrt" || name == "abs" || name == "tanh" || name == "atan";
}

bool is_binary_function(const std::string& name) {
    return name == "min" || name == "max" || name == "pow" || name == "atan2";
}

}  // namespace

class ExpressionParser {
public:
    ExpressionParser(std::string_view src, const VariableLayout& layout) : src_(src), layout_(layout) {}

    Expression run() {
        NodePtr root = parse_sum();
        skip_ws();
        if (pos_ != src_.size()) fail("unexpected '" + std::string(1, src_[pos_]) + "'");
        fold(root);
        Expression expr;
        expr.source_ = std::string(src_);
        expr.used_.assign((layout_.size() + 63) / 64 + 1, 0);
        int depth = 0;
        emit(*root, expr, depth);
        return expr;
    }

private:
    [[noreturn]] void fail(const std::string& what) const {
        throw DefinitionError("expression \"" + std::string(src_) + "\" at offset " + std::to_string(pos_) +
                              ": " + what);
    }

    void skip_ws() {
        while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    }

    bool accept(char c) {
        skip_ws();
        if (pos_ < src_.size() && src_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    void expect(char c) {
        if (!accept(c)) fail(std::string("expected '") + c + "'");
    }

    NodePtr binary(const char* op, NodePtr a, NodePtr b) {
        auto n = std::make_unique<Node>();
        n->kind = Node::binary;
        n->fn = op;
        n->a = std::move(a);
        n->b = std::move(b);
        return n;
    }

    NodePtr unary(const std::string& fn, NodePtr a) {
        auto n = std::make_unique<Node>();
        n->kind = Node::unary;
        n->fn = fn;
        n->a = std::move(a);
        return n;
    }

    NodePtr parse_sum() {
        NodePtr lhs = parse_product();
        for (;;) {
            if (accept('+'))
                lhs = binary("+", std::move(lhs), parse_product());
            else if (accept('-'))
                lhs = binary("-", std::move(lhs), parse_product());
            else
                return lhs;
        }
    }

    NodePtr parse_product() {
        NodePtr lhs = parse_unary();
        for (;;) {
            if (accept('*'))
                lhs = binary("*", std::move(lhs), parse_unary());
            else if (accept('/'))
                lhs = binary("/", std::move(lhs), parse_unary());
            else
                return lhs;
        }
    }

    NodePtr parse_unary() {
        if (accept('-')) return unary("neg", parse_unary());
        if (accept('+')) return parse_unary();
        return parse_power();
    }

    NodePtr parse_power() {
        NodePtr base = parse_primary();
        if (accept('^')) return binary("^", std::move(base), parse_unary());
        return base;
    }

    NodePtr parse_primary() {
        skip_ws();
        if (pos_ >= src_.size()) fail("unexpected end of input");
        char c = src_[pos_];
        if (c == '(') {
            ++pos_;
            NodePtr inner = parse_sum();
            expect(')');
            return inner;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t start = pos_;
            while (pos_ < src_.size() &&
                   (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
                ++pos_;
            std::string name(src_.substr(start, pos_ - start));
            if (accept('(')) {
                NodePtr first = parse_sum();
                if (is_binary_function(name)) {
                    expect(',');
                    NodePtr second = parse_sum();
                    expect(')');
                    auto n = binary("", std::move(first), std::move(second));
                    n->fn = name;
                    return n;
                }
                if (!is_unary_function(name)) fail("unknown function '" + name + "'");
                expect(')');
                return unary(name, std::move(first));
            }
            if (name == "pi") return make_const(std::numbers::pi);
            if (name == "e") return make_const(std::numbers::e);
            std::size_t slot = layout_.find(name);
            if (slot == VariableLayout::npos) fail("unknown identifier '" + name + "'");
            auto n = std::make_unique<Node>();
            n->kind = Node::variable;
            n->slot = slot;
            return n;
        }
        fail(std::string("unexpected '") + c + "'");
    }

    NodePtr parse_number() {
        const char* begin = src_.data() + pos_;
        char* end = nullptr;
        double v = std::strtod(begin, &end);
        if (end == begin) fail("malformed number");
        pos_ += static_cast<std::size_t>(end - begin);
        return make_const(v);
    }

    static void fold(NodePtr& n) {
        if (n->a) fold(n->a);
        if (n->b) fold(n->b);
        if (n->kind == Node::unary && n->a->kind == Node::constant) {
            n = make_const(apply_unary(n->fn, n->a->value));
        } else if (n->kind == Node::binary && n->a->kind == Node::constant && n->b->kind == Node::constant) {
            n = make_const(apply_binary(n->fn, n->a->value, n->b->value));
        }
    }

    void emit(const Node& n, Expression& expr, int& depth) {
        using Op = Expression::Op;
        auto push = [&](Expression::Instr ins, int delta) {
            expr.code_.push_back(ins);
            depth += delta;
            if (depth > expr.max_depth_) expr.max_depth_ = depth;
        };
        switch (n.kind) {
            case Node::constant:
                push({Op::push_const, 0, n.value}, 1);
                return;
            case Node::variable:
                expr.used_[n.slot / 64] |= std::uint64_t{1} << (n.slot % 64);
                push({Op::push_var, static_cast<std::int32_t>(n.slot), 0.0}, 1);
                return;
            case Node::unary: {
                emit(*n.a, expr, depth);
                static const std::pair<const char*, Op> table[] = {
                    {"neg", Op::neg},   {"sin", Op::sin},   {"cos", Op::cos},   {"tan", Op::tan},
                    {"exp", Op::exp},   {"log", Op::log},   {"sqrt", Op::sqrt}, {"abs", Op::abs},
                    {"tanh", Op::tanh}, {"atan", Op::atan}};
                for (const auto& [name, op] : table)
                    if (n.fn == name) {
                        push({op, 0, 0.0}, 0);
                        return;
                    }
                fail("unknown function '" + n.fn + "'");
            }
            case Node::binary: {
                bool power = n.fn == "^" || n.fn == "pow";
                if (power && n.b->kind == Node::constant && n.b->value == std::round(n.b->value) &&
                    std::fabs(n.b->value) <= 16) {
                    emit(*n.a, expr, depth);
                    push({Op::pow_int, static_cast<std::int32_t>(n.b->value), 0.0}, 0);
                    return;
                }
                emit(*n.a, expr, depth);
                emit(*n.b, expr, depth);
                Op op = Op::add;
                if (n.fn == "+") op = Op::add;
                else if (n.fn == "-") op = Op::sub;
                else if (n.fn == "*") op = Op::mul;
                else if (n.fn == "/") op = Op::div;
                else if (power) op = Op::pow;
                else if (n.fn == "min") op = Op::min;
                else if (n.fn == "max") op = Op::max;
                else if (n.fn == "atan2") op = Op::atan2;
                else fail("unknown operator '" + n.fn + "'");
                push({op, 0, 0.0}, -1);
                return;
            }
        }
    }

    std::string_view src_;
    const VariableLayout& layout_;
    std::size_t pos_ = 0;
};

Expression Expression::compile(std::string_view source, const VariableLayout& layout) {
    return ExpressionParser(source, layout).run();
}

Expression Expression::constant(double value) {
    Expression expr;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    expr.source_ = buf;
    expr.code_.push_back({Op::push_const, 0, value});
    expr.used_.assign(1, 0);
    expr.max_depth_ = 1;
    return expr;
}

bool Expression::depends_on(std::size_t slot) const {
    if (slot / 64 >= used_.size()) return false;
    return (used_[slot / 64] >> (slot % 64)) & 1U;
}

bool Expression::depends_on_range(std::size_t first, std::size_t last) const {
    for (std::size_t s = first; s < last; ++s)
        if (depends_on(s)) return true;
    return false;
}

namespace {

inline double pow_int(double x, int n) {
    bool invert = n < 0;
    unsigned k = static_cast<unsigned>(invert ? -n : n);
    double result = 1.0;
    double base = x;
    while (k) {
        if (k & 1U) result *= base;
        base *= base;
        k >>= 1U;
    }
    return invert ? 1.0 / result : result;
}

}  // namespace

double Expression::eval(const double* slots) const {
    constexpr int kInline = 32;
    double inline_stack[kInline];
    std::vector<double> heap_stack;
    double* st = inline_stack;
    if (max_depth_ > kInline) {
        heap_stack.resize(static_cast<std::size_t>(max_depth_));
        st = heap_stack.data();
    }
    int top = -1;
    for (const Instr& ins : code_) {
        switch (ins.op) {
            case Op::push_const: st[++top] = ins.value; break;
            case Op::push_var: st[++top] = slots[ins.arg]; break;
            case Op::add: --top; st[top] += st[top + 1]; break;
            case Op::sub: --top; st[top] -= st[top + 1]; break;
            case Op::mul: --top; st[top] *= st[top + 1]; break;
            case Op::div: --top; st[top] /= st[top + 1]; break;
            case Op::pow: --top; st[top] = std::pow(st[top], st[top + 1]); break;
            case Op::min: --top; st[top] = std::fmin(st[top], st[top + 1]); break;
            case Op::max: --top; st[top] = std::fmax(st[top], st[top + 1]); break;
            case Op::atan2: --top; st[top] = std::atan2(st[top], st[top + 1]); break;
            case Op::pow_int: st[top] = pow_int(st[top], ins.arg); break;
            case Op::neg: st[top] = -st[top]; break;
            case Op::sin: st[top] = std::sin(st[top]); break;
            case Op::cos: st[top] = std::cos(st[top]); break;
            case Op::tan: st[top] = std::tan(st[top]); break;
            case Op::exp: st[top] = std::exp(st[top]); break;
            case Op::log: st[top] = std::log(st[top]); break;
            case Op::sqrt: st[top] = std::sqrt(st[top]); break;
            case Op::abs: st[top] = std::fabs(st[top]); break;
            case Op::tanh: st[top] = std::tanh(st[top]); break;
            case Op::atan: st[top] = std::atan(st[top]); break;
        }
    }
    return st[top];
}

}  // namespace homz
