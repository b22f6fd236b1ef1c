#ifndef SR_EXPR_HPP
#define SR_EXPR_HPP

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

namespace sr {

/// Raised when an evaluation hits an operator's epsilon domain guard.
class DomainError : public std::runtime_error {
public:
    DomainError(int node, std::string op, std::string msg)
        : std::runtime_error(std::move(msg)), node_(node), op_(std::move(op)) {}
    int node() const { return node_; }
    const std::string& op() const { return op_; }

private:
    int node_;
    std::string op_;
};

/// Raised when an intermediate value leaves [v_lo, v_up].
class RangeError : public std::runtime_error {
public:
    RangeError(int node, std::string msg) : std::runtime_error(std::move(msg)), node_(node) {}
    int node() const { return node_; }

private:
    int node_;
};

class ParseError : public std::runtime_error {
public:
    ParseError(std::size_t pos, std::string msg) : std::runtime_error(std::move(msg)), pos_(pos) {}
    std::size_t position() const { return pos_; }

private:
    std::size_t pos_;
};

/// Operator/operand assignable to a tree node. Binary: + - * /, unary:
/// sqrt exp log (argument is the right child), operands: x_j and cst.
class OpKind {
public:
    enum Tag : int { Plus, Minus, Times, Divide, Sqrt, Exp, Log, Var, Const };

    constexpr OpKind() : tag_(Const), var_(0) {}

    static constexpr OpKind plus() { return OpKind(Plus); }
    static constexpr OpKind minus() { return OpKind(Minus); }
    static constexpr OpKind times() { return OpKind(Times); }
    static constexpr OpKind divide() { return OpKind(Divide); }
    static constexpr OpKind sqrt() { return OpKind(Sqrt); }
    static constexpr OpKind exp() { return OpKind(Exp); }
    static constexpr OpKind log() { return OpKind(Log); }
    static constexpr OpKind constant() { return OpKind(Const); }
    static OpKind var(int j) {
        if (j < 1) throw std::invalid_argument("variable index must be >= 1");
        OpKind o(Var);
        o.var_ = j;
        return o;
    }

    Tag tag() const { return tag_; }
    int var_index() const { return var_; }

    bool is_binary() const { return tag_ <= Divide; }
    bool is_unary() const { return tag_ >= Sqrt && tag_ <= Log; }
    bool is_operand() const { return tag_ == Var || tag_ == Const; }
    bool is_var() const { return tag_ == Var; }
    bool is_const() const { return tag_ == Const; }
    int arity() const { return is_binary() ? 2 : (is_unary() ? 1 : 0); }

    std::string name() const;

    /// Canonical order: + - * / sqrt exp log, x1..xd, cst.
    int rank(int dim) const {
        if (tag_ == Var) return 7 + var_ - 1;
        if (tag_ == Const) return 7 + dim;
        return static_cast<int>(tag_);
    }

    friend bool operator==(const OpKind& a, const OpKind& b) {
        return a.tag_ == b.tag_ && a.var_ == b.var_;
    }
    friend bool operator!=(const OpKind& a, const OpKind& b) { return !(a == b); }
    friend bool operator<(const OpKind& a, const OpKind& b) {
        if (a.tag_ != b.tag_) return a.tag_ < b.tag_;
        return a.var_ < b.var_;
    }

private:
    constexpr explicit OpKind(Tag t) : tag_(t), var_(0) {}
    Tag tag_;
    int var_;
};

/// Ambient node universe. Children of n are 2n (left) and 2n+1 (right).
/// Valid sets contain the root, are parent-closed, and never hold a left
/// child without the matching right child (unary chains use right children).
class NodeSet {
public:
    NodeSet() : nodes_{1} {}

    static NodeSet perfect(int depth);
    static NodeSet of(std::vector<int> nodes);

    bool contains(int n) const;
    const std::vector<int>& nodes() const { return nodes_; }
    int size() const { return static_cast<int>(nodes_.size()); }
    int max_node() const { return nodes_.back(); }

    bool is_terminal(int n) const { return contains(n) && !contains(2 * n) && !contains(2 * n + 1); }
    std::vector<int> terminals() const;
    std::vector<int> internals() const;

    /// Subtree of n (within this set) is a perfect binary tree.
    bool is_perfect_at(int n) const;
    std::vector<int> perfect_nodes() const;

    bool is_full_binary() const;

    std::vector<int> descendants(int n) const;

    friend bool operator==(const NodeSet& a, const NodeSet& b) { return a.nodes_ == b.nodes_; }

private:
    explicit NodeSet(std::vector<int> sorted) : nodes_(std::move(sorted)) {}
    std::vector<int> nodes_;
    int subtree_height(int n) const;  // -1 when not perfect
};

struct EvalBounds {
    double v_lo = -10.0;
    double v_up = 10.0;
    double c_lo = -2.0;
    double c_up = 2.0;
    double epsilon = 0.01;

    void validate() const;
};

/// An expression tree: a partial operator assignment over an ambient shape
/// plus constant values at cst nodes. Immutable by convention once built.
struct ExpressionTree {
    NodeSet shape;
    std::map<int, OpKind> assign;
    std::map<int, double> consts;

    bool has(int n) const { return assign.count(n) != 0; }
    const OpKind& op(int n) const { return assign.at(n); }
    int node_count() const { return static_cast<int>(assign.size()); }
    bool has_variable() const;
    int max_var_index() const;

    /// Structural invariants: assignments sit inside the shape, a binary op
    /// has both children assigned, a unary op has exactly the right child,
    /// operands have none, and consts exist exactly at cst nodes.
    void validate() const;
    void validate(const EvalBounds& bounds) const;

    static ExpressionTree leaf_var(int j);
    static ExpressionTree leaf_const(double value);
};

struct Dataset {
    std::vector<std::vector<double>> x;  // n_data rows of d values
    std::vector<double> z;

    int n() const { return static_cast<int>(z.size()); }
    int dim() const { return x.empty() ? 0 : static_cast<int>(x[0].size()); }
    void validate() const;

    // sign profiles over variable indices 1..d
    std::vector<int> cols_positive() const;
    std::vector<int> cols_negative() const;
    std::vector<int> cols_zero() const;

    static Dataset read_csv(const std::string& path);
    void write_csv(const std::string& path) const;
};

struct EvalFailure {
    enum Kind { None, Domain, Range };
    Kind kind = None;
    int node = 0;
    OpKind op;
};

/// Flattened evaluation program for one tree; constants are slots so a
/// fitter can re-evaluate without touching the tree.
class EvalPlan {
public:
    EvalPlan(const ExpressionTree& tree, const EvalBounds& bounds);

    int const_count() const { return static_cast<int>(const_nodes_.size()); }
    const std::vector<int>& const_nodes() const { return const_nodes_; }
    std::vector<double> tree_consts() const { return tree_consts_; }

    bool run(std::span<const double> row, std::span<const double> consts, double& out,
             EvalFailure* fail = nullptr) const;
    /// Also reports the value of every active node (parallel to active_nodes()).
    bool run_all(std::span<const double> row, std::span<const double> consts,
                 std::vector<double>& node_values, EvalFailure* fail = nullptr) const;
    const std::vector<int>& active_nodes() const { return active_; }

private:
    struct Step {
        OpKind op;
        int node;
        int lhs;   // value index of left/only child, -1 for operands
        int rhs;   // value index of right child
        int slot;  // const slot for cst operands
    };
    std::vector<Step> steps_;
    std::vector<int> active_;      // node id per value index, postorder
    std::vector<int> const_nodes_;
    std::vector<double> tree_consts_;
    EvalBounds bounds_;
    bool exec(std::span<const double> row, std::span<const double> consts,
              std::vector<double>& vals, EvalFailure* fail) const;
};

double evaluate(const ExpressionTree& tree, const EvalBounds& bounds, std::span<const double> row);
bool try_evaluate(const ExpressionTree& tree, const EvalBounds& bounds, std::span<const double> row,
                  double& out, EvalFailure* fail = nullptr);

/// Structural distance: nodes whose assignment differs, counting cst as one
/// symbol regardless of its value, plus nodes active only in b.
int distance(const ExpressionTree& a, const ExpressionTree& b);

std::string render(const ExpressionTree& tree);
ExpressionTree parse_expression(std::string_view text, int dim);

std::string format_double(double v);

/// Trees of depth <= depth built from n_binary_ops binary operators and
/// dim variables only: T_0 = d, T_k = d + B*T_{k-1}^2.
boost::multiprecision::cpp_int count_trees(int dim, int n_binary_ops, int depth);

inline constexpr int kMaxDepth = 8;  // node ids stay below 2^(kMaxDepth+1)

}  // namespace sr

#endif
