#include "sr/expr.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace sr {

std::string OpKind::name() const {
    switch (tag_) {
        case Plus: return "+";
        case Minus: return "-";
        case Times: return "*";
        case Divide: return "/";
        case Sqrt: return "sqrt";
        case Exp: return "exp";
        case Log: return "log";
        case Const: return "cst";
        case Var: return "x" + std::to_string(var_);
    }
    return "?";
}

NodeSet NodeSet::perfect(int depth) {
    if (depth < 0 || depth > kMaxDepth) throw std::invalid_argument("depth out of range");
    std::vector<int> ns;
    for (int n = 1; n < (1 << (depth + 1)); ++n) ns.push_back(n);
    return NodeSet(std::move(ns));
}

NodeSet NodeSet::of(std::vector<int> nodes) {
    std::sort(nodes.begin(), nodes.end());
    nodes.erase(std::unique(nodes.begin(), nodes.end()), nodes.end());
    if (nodes.empty() || nodes.front() < 1) throw std::invalid_argument("node ids must be positive");
    if (nodes.back() >= (1 << (kMaxDepth + 1))) throw std::invalid_argument("node id exceeds depth cap");
    NodeSet s(std::move(nodes));
    if (!s.contains(1)) throw std::invalid_argument("root (node 1) missing");
    for (int n : s.nodes_) {
        if (n > 1 && !s.contains(n / 2))
            throw std::invalid_argument("node " + std::to_string(n) + " has no parent in the set");
        if (s.contains(2 * n) && !s.contains(2 * n + 1))
            throw std::invalid_argument("node " + std::to_string(n) +
                                        " has a left child but no right child");
    }
    return s;
}

bool NodeSet::contains(int n) const {
    return std::binary_search(nodes_.begin(), nodes_.end(), n);
}

std::vector<int> NodeSet::terminals() const {
    std::vector<int> t;
    for (int n : nodes_)
        if (is_terminal(n)) t.push_back(n);
    return t;
}

std::vector<int> NodeSet::internals() const {
    std::vector<int> t;
    for (int n : nodes_)
        if (!is_terminal(n)) t.push_back(n);
    return t;
}

int NodeSet::subtree_height(int n) const {
    bool l = contains(2 * n), r = contains(2 * n + 1);
    if (!l && !r) return 0;
    if (!l || !r) return -1;
    int hl = subtree_height(2 * n), hr = subtree_height(2 * n + 1);
    if (hl < 0 || hr < 0 || hl != hr) return -1;
    return hl + 1;
}

bool NodeSet::is_perfect_at(int n) const {
    return contains(n) && subtree_height(n) >= 0;
}

std::vector<int> NodeSet::perfect_nodes() const {
    std::vector<int> out;
    for (int n : nodes_)
        if (is_perfect_at(n)) out.push_back(n);
    return out;
}

bool NodeSet::is_full_binary() const {
    for (int n : nodes_)
        if (contains(2 * n + 1) && !contains(2 * n)) return false;
    return true;
}

std::vector<int> NodeSet::descendants(int n) const {
    std::vector<int> out, stack{2 * n, 2 * n + 1};
    while (!stack.empty()) {
        int m = stack.back();
        stack.pop_back();
        if (!contains(m)) continue;
        out.push_back(m);
        stack.push_back(2 * m);
        stack.push_back(2 * m + 1);
    }
    std::sort(out.begin(), out.end());
    return out;
}

void EvalBounds::validate() const {
    if (!(v_lo <= c_lo && c_lo <= 0.0 && 0.0 <= c_up && c_up <= v_up))
        throw std::invalid_argument("bounds must satisfy v_lo <= c_lo <= 0 <= c_up <= v_up");
    if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
}

bool ExpressionTree::has_variable() const {
    for (const auto& [n, o] : assign)
        if (o.is_var()) return true;
    return false;
}

int ExpressionTree::max_var_index() const {
    int m = 0;
    for (const auto& [n, o] : assign)
        if (o.is_var()) m = std::max(m, o.var_index());
    return m;
}

void ExpressionTree::validate() const {
    if (assign.empty()) throw std::invalid_argument("empty tree");
    if (!assign.count(1)) throw std::invalid_argument("root unassigned");
    for (const auto& [n, o] : assign) {
        if (!shape.contains(n)) throw std::invalid_argument("assignment outside shape");
        bool l = assign.count(2 * n), r = assign.count(2 * n + 1);
        if (o.is_binary() && !(l && r))
            throw std::invalid_argument("binary operator without both children at node " +
                                        std::to_string(n));
        if (o.is_unary() && (l || !r))
            throw std::invalid_argument("unary operator needs exactly the right child at node " +
                                        std::to_string(n));
        if (o.is_operand() && (l || r))
            throw std::invalid_argument("operand with children at node " + std::to_string(n));
        if (o.is_const() != (consts.count(n) != 0))
            throw std::invalid_argument("constant value set iff node is cst (node " +
                                        std::to_string(n) + ")");
    }
    for (const auto& [n, o] : assign) {
        if (n > 1 && !assign.count(n / 2))
            throw std::invalid_argument("active node with unassigned parent: " + std::to_string(n));
    }
}

void ExpressionTree::validate(const EvalBounds& bounds) const {
    validate();
    for (const auto& [n, c] : consts)
        if (c < bounds.c_lo || c > bounds.c_up)
            throw std::invalid_argument("constant out of [c_lo, c_up] at node " + std::to_string(n));
}

ExpressionTree ExpressionTree::leaf_var(int j) {
    ExpressionTree t;
    t.assign.emplace(1, OpKind::var(j));
    return t;
}

ExpressionTree ExpressionTree::leaf_const(double value) {
    ExpressionTree t;
    t.assign.emplace(1, OpKind::constant());
    t.consts.emplace(1, value);
    return t;
}

void Dataset::validate() const {
    if (z.empty() || x.size() != z.size()) throw std::invalid_argument("dataset shape mismatch");
    if (x[0].empty()) throw std::invalid_argument("dataset needs at least one variable");
    for (const auto& row : x)
        if (row.size() != x[0].size()) throw std::invalid_argument("ragged dataset");
}

std::vector<int> Dataset::cols_positive() const {
    std::vector<int> out;
    for (int j = 0; j < dim(); ++j)
        if (std::any_of(x.begin(), x.end(), [&](const auto& r) { return r[j] > 0.0; }))
            out.push_back(j + 1);
    return out;
}

std::vector<int> Dataset::cols_negative() const {
    std::vector<int> out;
    for (int j = 0; j < dim(); ++j)
        if (std::any_of(x.begin(), x.end(), [&](const auto& r) { return r[j] < 0.0; }))
            out.push_back(j + 1);
    return out;
}

std::vector<int> Dataset::cols_zero() const {
    std::vector<int> out;
    for (int j = 0; j < dim(); ++j)
        if (std::any_of(x.begin(), x.end(), [&](const auto& r) { return r[j] == 0.0; }))
            out.push_back(j + 1);
    return out;
}

Dataset Dataset::read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty dataset file " + path);
    // header: x1,...,xd,z
    int d = 0;
    {
        std::stringstream hs(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(hs, cell, ',')) cells.push_back(cell);
        if (cells.size() < 2 || cells.back() != "z")
            throw std::runtime_error("dataset header must be x1,...,xd,z");
        d = static_cast<int>(cells.size()) - 1;
        for (int j = 0; j < d; ++j)
            if (cells[j] != "x" + std::to_string(j + 1))
                throw std::runtime_error("dataset header must be x1,...,xd,z");
    }
    Dataset ds;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::string cell;
        std::vector<double> vals;
        while (std::getline(ls, cell, ',')) vals.push_back(std::stod(cell));
        if (static_cast<int>(vals.size()) != d + 1)
            throw std::runtime_error("dataset row with wrong arity");
        ds.z.push_back(vals.back());
        vals.pop_back();
        ds.x.push_back(std::move(vals));
    }
    ds.validate();
    return ds;
}

void Dataset::write_csv(const std::string& path) const {
    validate();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (int j = 1; j <= dim(); ++j) out << "x" << j << ",";
    out << "z\n";
    for (int i = 0; i < n(); ++i) {
        for (double v : x[i]) out << format_double(v) << ",";
        out << format_double(z[i]) << "\n";
    }
}

EvalPlan::EvalPlan(const ExpressionTree& tree, const EvalBounds& bounds) : bounds_(bounds) {
    tree.validate();
    bounds.validate();
    // postorder over active nodes
    std::map<int, int> value_index;
    std::vector<int> order;
    // iterative postorder: children (left, right) before node
    {
        std::vector<std::pair<int, bool>> st{{1, false}};
        while (!st.empty()) {
            auto [n, expanded] = st.back();
            st.pop_back();
            if (expanded) {
                order.push_back(n);
                continue;
            }
            st.emplace_back(n, true);
            if (tree.has(2 * n + 1)) st.emplace_back(2 * n + 1, false);
            if (tree.has(2 * n)) st.emplace_back(2 * n, false);
        }
    }
    for (int n : order) {
        const OpKind& o = tree.op(n);
        Step s;
        s.op = o;
        s.node = n;
        s.lhs = s.rhs = s.slot = -1;
        if (o.is_binary()) {
            s.lhs = value_index.at(2 * n);
            s.rhs = value_index.at(2 * n + 1);
        } else if (o.is_unary()) {
            s.rhs = value_index.at(2 * n + 1);
        } else if (o.is_const()) {
            s.slot = static_cast<int>(const_nodes_.size());
            const_nodes_.push_back(n);
            tree_consts_.push_back(tree.consts.at(n));
        }
        value_index[n] = static_cast<int>(steps_.size());
        steps_.push_back(s);
        active_.push_back(n);
    }
}

bool EvalPlan::exec(std::span<const double> row, std::span<const double> consts,
                    std::vector<double>& vals, EvalFailure* fail) const {
    const double eps = bounds_.epsilon;
    auto report = [&](EvalFailure::Kind k, const Step& s) {
        if (fail) {
            fail->kind = k;
            fail->node = s.node;
            fail->op = s.op;
        }
        return false;
    };
    vals.resize(steps_.size());
    for (std::size_t i = 0; i < steps_.size(); ++i) {
        const Step& s = steps_[i];
        double v = 0.0;
        switch (s.op.tag()) {
            case OpKind::Plus: v = vals[s.lhs] + vals[s.rhs]; break;
            case OpKind::Minus: v = vals[s.lhs] - vals[s.rhs]; break;
            case OpKind::Times: v = vals[s.lhs] * vals[s.rhs]; break;
            case OpKind::Divide: {
                double num = vals[s.lhs], den = vals[s.rhs];
                if (num * num < eps || den * den < eps) return report(EvalFailure::Domain, s);
                v = num / den;
                break;
            }
            case OpKind::Sqrt: {
                double u = vals[s.rhs];
                if (u < eps) return report(EvalFailure::Domain, s);
                v = std::sqrt(u);
                break;
            }
            case OpKind::Exp: v = std::exp(vals[s.rhs]); break;
            case OpKind::Log: {
                double u = vals[s.rhs];
                if (u < eps) return report(EvalFailure::Domain, s);
                v = std::log(u);
                break;
            }
            case OpKind::Var: {
                int j = s.op.var_index();
                if (j > static_cast<int>(row.size())) return report(EvalFailure::Range, s);
                v = row[j - 1];
                break;
            }
            case OpKind::Const: v = consts[s.slot]; break;
        }
        if (!(v >= bounds_.v_lo && v <= bounds_.v_up)) return report(EvalFailure::Range, s);
        vals[i] = v;
    }
    if (fail) fail->kind = EvalFailure::None;
    return true;
}

bool EvalPlan::run(std::span<const double> row, std::span<const double> consts, double& out,
                   EvalFailure* fail) const {
    thread_local std::vector<double> vals;
    if (!exec(row, consts, vals, fail)) return false;
    out = vals.back();
    return true;
}

bool EvalPlan::run_all(std::span<const double> row, std::span<const double> consts,
                       std::vector<double>& node_values, EvalFailure* fail) const {
    return exec(row, consts, node_values, fail);
}

double evaluate(const ExpressionTree& tree, const EvalBounds& bounds, std::span<const double> row) {
    EvalPlan plan(tree, bounds);
    double out = 0.0;
    EvalFailure f;
    auto consts = plan.tree_consts();
    if (plan.run(row, consts, out, &f)) return out;
    if (f.kind == EvalFailure::Domain)
        throw DomainError(f.node, f.op.name(),
                          "domain guard violated at node " + std::to_string(f.node) + " (" +
                              f.op.name() + ")");
    throw RangeError(f.node, "value out of [v_lo, v_up] at node " + std::to_string(f.node));
}

bool try_evaluate(const ExpressionTree& tree, const EvalBounds& bounds, std::span<const double> row,
                  double& out, EvalFailure* fail) {
    EvalPlan plan(tree, bounds);
    auto consts = plan.tree_consts();
    return plan.run(row, consts, out, fail);
}

int distance(const ExpressionTree& a, const ExpressionTree& b) {
    int d = 0;
    for (const auto& [n, oa] : a.assign) {
        auto it = b.assign.find(n);
        if (it == b.assign.end() || !(it->second == oa)) ++d;
    }
    for (const auto& [n, ob] : b.assign)
        if (!a.assign.count(n)) ++d;
    return d;
}

std::string format_double(double v) {
    char buf[40];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

namespace {

void render_node(const ExpressionTree& t, int n, std::string& out) {
    const OpKind& o = t.op(n);
    if (o.is_var()) {
        out += o.name();
    } else if (o.is_const()) {
        out += format_double(t.consts.at(n));
    } else if (o.is_unary()) {
        out += o.name();
        out += '(';
        render_node(t, 2 * n + 1, out);
        out += ')';
    } else {
        out += '(';
        render_node(t, 2 * n, out);
        out += o.name();
        render_node(t, 2 * n + 1, out);
        out += ')';
    }
}

struct Parser {
    std::string_view s;
    std::size_t pos = 0;
    int dim;

    // parsed structure before node ids are laid out
    struct Node {
        OpKind op;
        double cval = 0.0;
        int left = -1, right = -1;  // indices into pool
    };
    std::vector<Node> pool;

    void skip_ws() {
        while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    }
    char peek() {
        skip_ws();
        return pos < s.size() ? s[pos] : '\0';
    }
    [[noreturn]] void fail(const std::string& msg) { throw ParseError(pos, msg + " at position " + std::to_string(pos)); }

    int parse_expr() {
        int lhs = parse_term();
        while (true) {
            char c = peek();
            if (c != '+' && c != '-') return lhs;
            ++pos;
            int rhs = parse_term();
            Node n;
            n.op = (c == '+') ? OpKind::plus() : OpKind::minus();
            n.left = lhs;
            n.right = rhs;
            pool.push_back(n);
            lhs = static_cast<int>(pool.size()) - 1;
        }
    }

    int parse_term() {
        int lhs = parse_factor();
        while (true) {
            char c = peek();
            if (c != '*' && c != '/') return lhs;
            ++pos;
            int rhs = parse_factor();
            Node n;
            n.op = (c == '*') ? OpKind::times() : OpKind::divide();
            n.left = lhs;
            n.right = rhs;
            pool.push_back(n);
            lhs = static_cast<int>(pool.size()) - 1;
        }
    }

    int parse_factor() {
        char c = peek();
        if (c == '(') {
            ++pos;
            int e = parse_expr();
            if (peek() != ')') fail("expected ')'");
            ++pos;
            return e;
        }
        if (c == 'x') return parse_var();
        if (std::isalpha(static_cast<unsigned char>(c))) return parse_func();
        if (c == '-' || c == '.' || std::isdigit(static_cast<unsigned char>(c))) return parse_number();
        fail("unexpected character");
    }

    int parse_var() {
        ++pos;  // 'x'
        std::size_t start = pos;
        while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
        if (pos == start) fail("expected variable index");
        int j = std::stoi(std::string(s.substr(start, pos - start)));
        if (j < 1 || j > dim) fail("variable index out of range");
        Node n;
        n.op = OpKind::var(j);
        pool.push_back(n);
        return static_cast<int>(pool.size()) - 1;
    }

    int parse_func() {
        std::size_t start = pos;
        while (pos < s.size() && std::isalpha(static_cast<unsigned char>(s[pos]))) ++pos;
        std::string name(s.substr(start, pos - start));
        OpKind op = OpKind::sqrt();
        if (name == "sqrt") op = OpKind::sqrt();
        else if (name == "exp") op = OpKind::exp();
        else if (name == "log") op = OpKind::log();
        else { pos = start; fail("unknown function '" + name + "'"); }
        if (peek() != '(') fail("expected '(' after " + name);
        ++pos;
        int arg = parse_expr();
        if (peek() != ')') fail("expected ')'");
        ++pos;
        Node n;
        n.op = op;
        n.right = arg;
        pool.push_back(n);
        return static_cast<int>(pool.size()) - 1;
    }

    int parse_number() {
        skip_ws();
        std::size_t start = pos;
        if (pos < s.size() && s[pos] == '-') ++pos;
        bool any = false;
        while (pos < s.size() &&
               (std::isdigit(static_cast<unsigned char>(s[pos])) || s[pos] == '.')) {
            ++pos;
            any = true;
        }
        if (pos < s.size() && (s[pos] == 'e' || s[pos] == 'E')) {
            ++pos;
            if (pos < s.size() && (s[pos] == '+' || s[pos] == '-')) ++pos;
            while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) ++pos;
        }
        if (!any) fail("expected number");
        double v = 0.0;
        try {
            v = std::stod(std::string(s.substr(start, pos - start)));
        } catch (...) {
            fail("bad numeric literal");
        }
        Node n;
        n.op = OpKind::constant();
        n.cval = v;
        pool.push_back(n);
        return static_cast<int>(pool.size()) - 1;
    }

    void lay_out(int idx, int node, ExpressionTree& t, int depth) {
        if (depth > kMaxDepth) fail("expression deeper than the depth cap");
        const Node& n = pool[idx];
        t.assign.emplace(node, n.op);
        if (n.op.is_const()) t.consts.emplace(node, n.cval);
        if (n.left >= 0) lay_out(n.left, 2 * node, t, depth + 1);
        if (n.right >= 0) lay_out(n.right, 2 * node + 1, t, depth + 1);
    }
};

}  // namespace

std::string render(const ExpressionTree& tree) {
    tree.validate();
    std::string out;
    render_node(tree, 1, out);
    return out;
}

ExpressionTree parse_expression(std::string_view text, int dim) {
    Parser p;
    p.s = text;
    p.dim = dim;
    int root = p.parse_expr();
    p.skip_ws();
    if (p.pos != text.size()) p.fail("trailing input");
    ExpressionTree t;
    p.lay_out(root, 1, t, 0);
    std::vector<int> shape_nodes;
    for (const auto& [n, o] : t.assign) shape_nodes.push_back(n);
    t.shape = NodeSet::of(shape_nodes);
    t.validate();
    return t;
}

boost::multiprecision::cpp_int count_trees(int dim, int n_binary_ops, int depth) {
    if (dim < 1 || n_binary_ops < 0 || depth < 0) throw std::invalid_argument("bad count_trees arguments");
    boost::multiprecision::cpp_int t = dim;
    for (int k = 1; k <= depth; ++k) t = dim + n_binary_ops * t * t;
    return t;
}

}  // namespace sr
