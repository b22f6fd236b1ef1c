#include "sr/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace sr {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

void ModelInstance::validate() const {
    data.validate();
    bounds.validate();
    if (ops.empty()) throw ConfigError("operator set is empty");
    std::set<std::pair<int, int>> seen;
    bool any_operand = false;
    for (const OpKind& o : ops) {
        if (!seen.insert({o.tag(), o.var_index()}).second) throw ConfigError("duplicate operator");
        if (o.is_var() && o.var_index() > data.dim())
            throw ConfigError("operator " + o.name() + " exceeds dataset dimension");
        if (o.is_operand()) any_operand = true;
    }
    if (!any_operand) throw ConfigError("operator set has no operands");
}

std::vector<OpKind> ModelInstance::binaries() const {
    std::vector<OpKind> out;
    for (const OpKind& o : ops)
        if (o.is_binary()) out.push_back(o);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<OpKind> ModelInstance::unaries() const {
    std::vector<OpKind> out;
    for (const OpKind& o : ops)
        if (o.is_unary()) out.push_back(o);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<OpKind> ModelInstance::operands() const {
    std::vector<OpKind> vars, rest;
    for (const OpKind& o : ops) {
        if (o.is_var()) vars.push_back(o);
        if (o.is_const()) rest.push_back(o);
    }
    std::sort(vars.begin(), vars.end());
    vars.insert(vars.end(), rest.begin(), rest.end());
    return vars;
}

bool ModelInstance::has_op(OpKind o) const {
    return std::find(ops.begin(), ops.end(), o) != ops.end();
}

bool ModelInstance::has_any_variable() const {
    return std::any_of(ops.begin(), ops.end(), [](const OpKind& o) { return o.is_var(); });
}

std::vector<OpKind> ModelInstance::ops_at(int node) const {
    std::vector<OpKind> out;
    if (shape.is_terminal(node)) {
        out = operands();
    } else {
        out = binaries();
        auto u = unaries();
        out.insert(out.end(), u.begin(), u.end());
        auto l = operands();
        out.insert(out.end(), l.begin(), l.end());
    }
    return out;
}

std::vector<std::pair<int, OpKind>> ModelInstance::admissible_pairs() const {
    std::vector<std::pair<int, OpKind>> out;
    for (int n : shape.nodes())
        for (const OpKind& o : ops_at(n)) out.emplace_back(n, o);
    return out;
}

std::vector<OpKind> ModelInstance::default_ops(int dim) {
    std::vector<OpKind> ops{OpKind::plus(), OpKind::minus(), OpKind::times(), OpKind::divide(),
                            OpKind::sqrt()};
    for (int j = 1; j <= dim; ++j) ops.push_back(OpKind::var(j));
    ops.push_back(OpKind::constant());
    return ops;
}

int op_rank(const ModelInstance& inst, OpKind o) { return o.rank(inst.data.dim()); }

OpKind op_from_rank(const ModelInstance& inst, int rank) {
    int d = inst.data.dim();
    switch (rank) {
        case 0: return OpKind::plus();
        case 1: return OpKind::minus();
        case 2: return OpKind::times();
        case 3: return OpKind::divide();
        case 4: return OpKind::sqrt();
        case 5: return OpKind::exp();
        case 6: return OpKind::log();
        default:
            if (rank == 7 + d) return OpKind::constant();
            return OpKind::var(rank - 6);
    }
}

std::string family_name(Family f) {
    switch (f) {
        case Family::Grammar1: return "grammar1";
        case Family::Grammar2: return "grammar2";
        case Family::CozGrammar1: return "coz_grammar1";
        case Family::CozGrammar2: return "coz_grammar2";
        case Family::CozGrammar3: return "coz_grammar3";
        case Family::CozGrammar4: return "coz_grammar4";
        case Family::CozGrammar5: return "coz_grammar5";
        case Family::CozGrammar6: return "coz_grammar6";
        case Family::VarUb: return "varub";
        case Family::VarLb: return "varlb";
        case Family::NoneUb: return "noneub";
        case Family::NoneLb: return "nonelb";
        case Family::IndepUb: return "indepub";
        case Family::IndepLb: return "indeplb";
        case Family::CstUb: return "cstub";
        case Family::CstLb: return "cstlb";
        case Family::PlusUb: return "plusub";
        case Family::PlusLb: return "pluslb";
        case Family::MinusUb: return "minusub";
        case Family::MinusLb: return "minuslb";
        case Family::TimesUb: return "timesub";
        case Family::TimesLb: return "timeslb";
        case Family::DivUb: return "divub";
        case Family::DivLb: return "divlb";
        case Family::DivDomainL: return "divdomain_lch";
        case Family::DivDomainR: return "divdomain_rch";
        case Family::SqrtUb: return "sqrtub";
        case Family::SqrtLb: return "sqrtlb";
        case Family::SqrtDomain: return "sqrtdomain";
        case Family::ExpUb: return "expub";
        case Family::ExpLb: return "explb";
        case Family::LogUb: return "logub";
        case Family::LogLb: return "loglb";
        case Family::LogDomain: return "logdomain";
        case Family::Redun1: return "redun1";
        case Family::Redun2: return "redun2";
        case Family::Redun3: return "redun3";
        case Family::CozRedun1: return "coz_redun1";
        case Family::CozRedun2: return "coz_redun2";
        case Family::CozRedun3: return "coz_redun3";
        case Family::CozRedun4: return "coz_redun4";
        case Family::CozRedun5: return "coz_redun5";
        case Family::CozRedun6: return "coz_redun6";
        case Family::Impl1: return "impl1";
        case Family::Impl2: return "impl2";
        case Family::Impl4: return "impl4";
        case Family::ImplDepth2: return "impl_depth2";
        case Family::Symmetry: return "symmetry";
        case Family::Distance: return "distance";
        case Family::Bounds: return "bounds";
    }
    return "?";
}

bool is_value_family(Family f) {
    return f >= Family::VarUb && f <= Family::LogDomain;
}

double ModelPoint::get_y(int node, int rank) const {
    auto it = y.find({node, rank});
    return it == y.end() ? 0.0 : it->second;
}

double ModelPoint::get_c(int node) const {
    auto it = c.find(node);
    return it == c.end() ? 0.0 : it->second;
}

double ModelPoint::get_v(int i, int node) const {
    auto it = v.find({i, node});
    return it == v.end() ? 0.0 : it->second;
}

double Constraint::expr_value(const ModelPoint& p) const {
    double acc = constant;
    for (const auto& [n, r, coeff] : y_terms) acc += coeff * p.get_y(n, r);
    for (const auto& [n, coeff] : c_terms) acc += coeff * p.get_c(n);
    for (const auto& [i, n, coeff] : v_terms) acc += coeff * p.get_v(i, n);
    for (const NlTerm& t : nl_terms) {
        double va = p.get_v(t.a.first, t.a.second);
        switch (t.kind) {
            case NlTerm::ProdVV: acc += t.coeff * va * p.get_v(t.b.first, t.b.second); break;
            case NlTerm::Square: acc += t.coeff * va * va; break;
            case NlTerm::ExpOf: acc += t.coeff * std::exp(va); break;
        }
    }
    return acc;
}

double Constraint::violation(const ModelPoint& p) const {
    double e = expr_value(p);
    switch (sense) {
        case Sense::Le: return e > 0.0 ? e : 0.0;
        case Sense::Ge: return e < 0.0 ? -e : 0.0;
        case Sense::Eq: return std::abs(e);
    }
    return 0.0;
}

int ConstraintSystem::count(Family f) const {
    int c = 0;
    for (const Constraint& k : constraints)
        if (k.family == f) ++c;
    return c;
}

int ConstraintSystem::count_value_defining() const {
    int c = 0;
    for (const Constraint& k : constraints)
        if (is_value_family(k.family)) ++c;
    return c;
}

std::vector<const Constraint*> ConstraintSystem::family(Family f) const {
    std::vector<const Constraint*> out;
    for (const Constraint& k : constraints)
        if (k.family == f) out.push_back(&k);
    return out;
}

namespace {

struct Builder {
    const ModelInstance& inst;
    ConstraintSystem sys;
    std::vector<OpKind> bins, unas, operands, vars;
    bool has_cst;
    int n_data, d;

    explicit Builder(const ModelInstance& instance) : inst(instance) {
        bins = inst.binaries();
        unas = inst.unaries();
        operands = inst.operands();
        has_cst = inst.has_const();
        n_data = inst.data.n();
        d = inst.data.dim();
        for (const OpKind& o : operands)
            if (o.is_var()) vars.push_back(o);
    }

    int rank(OpKind o) const { return o.rank(d); }

    Constraint make(Family f, std::string id, Constraint::Sense s, int node, int di = -1) {
        Constraint c;
        c.family = f;
        c.id = std::move(id);
        c.sense = s;
        c.node = node;
        c.data_index = di;
        return c;
    }

    void add_y(Constraint& c, int node, OpKind o, double coeff) {
        c.y_terms.emplace_back(node, rank(o), coeff);
    }
    void add_ops(Constraint& c, int node, const std::vector<OpKind>& set, double coeff) {
        for (const OpKind& o : set) add_y(c, node, o, coeff);
    }
    void add_all_ops_at(Constraint& c, int node, double coeff) {
        add_ops(c, node, inst.ops_at(node), coeff);
    }

    void push(Constraint c) { sys.constraints.push_back(std::move(c)); }

    std::string nid(const char* fam, int n) { return std::string(fam) + "[n=" + std::to_string(n) + "]"; }
    std::string inid(const char* fam, int i, int n) {
        return std::string(fam) + "[i=" + std::to_string(i + 1) + ",n=" + std::to_string(n) + "]";
    }

    void tree_constraints() {
        const bool improved = inst.config.variant == Variant::Improved;
        if (improved) {
            for (int n : inst.shape.internals()) {
                Constraint c1 = make(Family::Grammar1, nid("grammar1", n), Constraint::Sense::Eq, n);
                add_ops(c1, n, bins, 1.0);
                add_ops(c1, n, unas, 1.0);
                add_all_ops_at(c1, 2 * n + 1, -1.0);
                push(std::move(c1));
                if (inst.shape.contains(2 * n)) {
                    Constraint c2 =
                        make(Family::Grammar2, nid("grammar2", n), Constraint::Sense::Eq, n);
                    add_ops(c2, n, bins, 1.0);
                    add_all_ops_at(c2, 2 * n, -1.0);
                    push(std::move(c2));
                } else if (!bins.empty()) {
                    Constraint c2 =
                        make(Family::Grammar2, nid("grammar2", n), Constraint::Sense::Eq, n);
                    add_ops(c2, n, bins, 1.0);
                    push(std::move(c2));
                }
            }
        }
        for (int n : inst.shape.nodes()) {
            Constraint c = make(Family::CozGrammar1, nid("coz_grammar1", n), Constraint::Sense::Le, n);
            add_all_ops_at(c, n, 1.0);
            c.constant = -1.0;
            push(std::move(c));
        }
        if (!vars.empty()) {
            Constraint c = make(Family::CozGrammar2, "coz_grammar2", Constraint::Sense::Ge, 0);
            for (int n : inst.shape.nodes())
                for (const OpKind& o : vars) add_y(c, n, o, 1.0);
            c.constant = -1.0;
            push(std::move(c));
        }
        if (!improved) {
            for (int n : inst.shape.internals()) {
                if (!bins.empty() || !unas.empty()) {
                    Constraint c =
                        make(Family::CozGrammar3, nid("coz_grammar3", n), Constraint::Sense::Le, n);
                    add_ops(c, n, bins, 1.0);
                    add_ops(c, n, unas, 1.0);
                    add_all_ops_at(c, 2 * n + 1, -1.0);
                    push(std::move(c));
                }
                if (!bins.empty()) {
                    Constraint c =
                        make(Family::CozGrammar4, nid("coz_grammar4", n), Constraint::Sense::Le, n);
                    add_ops(c, n, bins, 1.0);
                    if (inst.shape.contains(2 * n)) add_all_ops_at(c, 2 * n, -1.0);
                    push(std::move(c));
                }
                if (!unas.empty() && inst.shape.contains(2 * n)) {
                    Constraint c =
                        make(Family::CozGrammar5, nid("coz_grammar5", n), Constraint::Sense::Le, n);
                    add_ops(c, n, unas, 1.0);
                    add_all_ops_at(c, 2 * n, 1.0);
                    c.constant = -1.0;
                    push(std::move(c));
                }
                Constraint c6 =
                    make(Family::CozGrammar6, nid("coz_grammar6", n), Constraint::Sense::Le, n);
                add_ops(c6, n, operands, 1.0);
                add_all_ops_at(c6, 2 * n + 1, 1.0);
                c6.constant = -1.0;
                push(std::move(c6));
            }
        }
    }

    // parent-existence weight for node n at data point i: vars carry x, the rest v bounds
    void value_constraints() {
        const EvalBounds& b = inst.bounds;
        const bool improved = inst.config.variant == Variant::Improved;
        if (improved) {
            for (int n : inst.shape.nodes()) {
                for (int i = 0; i < n_data; ++i) {
                    Constraint ub = make(Family::VarUb, inid("varub", i, n), Constraint::Sense::Le, n, i);
                    ub.v_terms.emplace_back(i, n, 1.0);
                    for (const OpKind& o : vars) add_y(ub, n, o, -inst.data.x[i][o.var_index() - 1]);
                    for (const OpKind& o : inst.ops_at(n))
                        if (!o.is_var()) add_y(ub, n, o, -b.v_up);
                    push(std::move(ub));

                    Constraint lb = make(Family::VarLb, inid("varlb", i, n), Constraint::Sense::Ge, n, i);
                    lb.v_terms.emplace_back(i, n, 1.0);
                    for (const OpKind& o : vars) add_y(lb, n, o, -inst.data.x[i][o.var_index() - 1]);
                    for (const OpKind& o : inst.ops_at(n))
                        if (!o.is_var()) add_y(lb, n, o, -b.v_lo);
                    push(std::move(lb));
                }
            }
        } else {
            for (int n : inst.shape.nodes()) {
                for (int i = 0; i < n_data; ++i) {
                    Constraint ub = make(Family::NoneUb, inid("noneub", i, n), Constraint::Sense::Le, n, i);
                    ub.v_terms.emplace_back(i, n, 1.0);
                    add_all_ops_at(ub, n, -b.v_up);
                    push(std::move(ub));
                    Constraint lb = make(Family::NoneLb, inid("nonelb", i, n), Constraint::Sense::Ge, n, i);
                    lb.v_terms.emplace_back(i, n, 1.0);
                    add_all_ops_at(lb, n, -b.v_lo);
                    push(std::move(lb));
                }
            }
            for (int n : inst.shape.nodes()) {
                for (int i = 0; i < n_data; ++i) {
                    for (const OpKind& o : vars) {
                        int j = o.var_index();
                        double xij = inst.data.x[i][j - 1];
                        std::string suffix = "[i=" + std::to_string(i + 1) + ",n=" + std::to_string(n) +
                                             ",j=" + std::to_string(j) + "]";
                        Constraint ub = make(Family::IndepUb, "indepub" + suffix, Constraint::Sense::Le, n, i);
                        ub.v_terms.emplace_back(i, n, 1.0);
                        add_y(ub, n, o, b.v_up - xij);
                        ub.constant = -b.v_up;
                        push(std::move(ub));
                        Constraint lb = make(Family::IndepLb, "indeplb" + suffix, Constraint::Sense::Ge, n, i);
                        lb.v_terms.emplace_back(i, n, 1.0);
                        add_y(lb, n, o, b.v_lo - xij);
                        lb.constant = -b.v_lo;
                        push(std::move(lb));
                    }
                }
            }
        }
        if (has_cst) {
            const OpKind cst = OpKind::constant();
            for (int n : inst.shape.nodes()) {
                for (int i = 0; i < n_data; ++i) {
                    Constraint ub = make(Family::CstUb, inid("cstub", i, n), Constraint::Sense::Le, n, i);
                    ub.v_terms.emplace_back(i, n, 1.0);
                    ub.c_terms.emplace_back(n, -1.0);
                    add_y(ub, n, cst, b.v_up - b.c_lo);
                    ub.constant = -(b.v_up - b.c_lo);
                    push(std::move(ub));
                    Constraint lb = make(Family::CstLb, inid("cstlb", i, n), Constraint::Sense::Ge, n, i);
                    lb.v_terms.emplace_back(i, n, 1.0);
                    lb.c_terms.emplace_back(n, -1.0);
                    add_y(lb, n, cst, b.v_lo - b.c_up);
                    lb.constant = -(b.v_lo - b.c_up);
                    push(std::move(lb));
                }
            }
        }
        const double sq_min = std::min({b.v_lo * b.v_lo, b.v_lo * b.v_up, b.v_up * b.v_up});
        const double sq_max = std::max(b.v_lo * b.v_lo, b.v_up * b.v_up);
        for (const OpKind& o : bins) binary_value(o, sq_min, sq_max);
        for (const OpKind& o : unas) unary_value(o, sq_max);
    }

    void binary_value(OpKind o, double sq_min, double sq_max) {
        const EvalBounds& b = inst.bounds;
        for (int n : inst.shape.internals()) {
            if (!inst.shape.contains(2 * n)) continue;
            for (int i = 0; i < n_data; ++i) {
                switch (o.tag()) {
                    case OpKind::Plus: {
                        Constraint ub = make(Family::PlusUb, inid("plusub", i, n), Constraint::Sense::Le, n, i);
                        ub.v_terms = {{i, n, 1.0}, {i, 2 * n, -1.0}, {i, 2 * n + 1, -1.0}};
                        add_y(ub, n, o, b.v_up - 2 * b.v_lo);
                        ub.constant = -(b.v_up - 2 * b.v_lo);
                        push(std::move(ub));
                        Constraint lb = make(Family::PlusLb, inid("pluslb", i, n), Constraint::Sense::Ge, n, i);
                        lb.v_terms = {{i, n, 1.0}, {i, 2 * n, -1.0}, {i, 2 * n + 1, -1.0}};
                        add_y(lb, n, o, b.v_lo - 2 * b.v_up);
                        lb.constant = -(b.v_lo - 2 * b.v_up);
                        push(std::move(lb));
                        break;
                    }
                    case OpKind::Minus: {
                        Constraint ub = make(Family::MinusUb, inid("minusub", i, n), Constraint::Sense::Le, n, i);
                        ub.v_terms = {{i, n, 1.0}, {i, 2 * n, -1.0}, {i, 2 * n + 1, 1.0}};
                        add_y(ub, n, o, 2 * b.v_up - b.v_lo);
                        ub.constant = -(2 * b.v_up - b.v_lo);
                        push(std::move(ub));
                        Constraint lb = make(Family::MinusLb, inid("minuslb", i, n), Constraint::Sense::Ge, n, i);
                        lb.v_terms = {{i, n, 1.0}, {i, 2 * n, -1.0}, {i, 2 * n + 1, 1.0}};
                        add_y(lb, n, o, 2 * b.v_lo - b.v_up);
                        lb.constant = -(2 * b.v_lo - b.v_up);
                        push(std::move(lb));
                        break;
                    }
                    case OpKind::Times: {
                        Constraint ub = make(Family::TimesUb, inid("timesub", i, n), Constraint::Sense::Le, n, i);
                        ub.v_terms = {{i, n, 1.0}};
                        ub.nl_terms.push_back({Constraint::NlTerm::ProdVV, -1.0, {i, 2 * n}, {i, 2 * n + 1}});
                        add_y(ub, n, o, b.v_up - sq_min);
                        ub.constant = -(b.v_up - sq_min);
                        push(std::move(ub));
                        Constraint lb = make(Family::TimesLb, inid("timeslb", i, n), Constraint::Sense::Ge, n, i);
                        lb.v_terms = {{i, n, 1.0}};
                        lb.nl_terms.push_back({Constraint::NlTerm::ProdVV, -1.0, {i, 2 * n}, {i, 2 * n + 1}});
                        add_y(lb, n, o, b.v_lo - sq_max);
                        lb.constant = -(b.v_lo - sq_max);
                        push(std::move(lb));
                        break;
                    }
                    case OpKind::Divide: {
                        Constraint ub = make(Family::DivUb, inid("divub", i, n), Constraint::Sense::Le, n, i);
                        ub.nl_terms.push_back({Constraint::NlTerm::ProdVV, 1.0, {i, n}, {i, 2 * n + 1}});
                        ub.v_terms = {{i, 2 * n, -1.0}};
                        add_y(ub, n, o, sq_max - b.v_lo);
                        ub.constant = -(sq_max - b.v_lo);
                        push(std::move(ub));
                        Constraint lb = make(Family::DivLb, inid("divlb", i, n), Constraint::Sense::Ge, n, i);
                        lb.nl_terms.push_back({Constraint::NlTerm::ProdVV, 1.0, {i, n}, {i, 2 * n + 1}});
                        lb.v_terms = {{i, 2 * n, -1.0}};
                        add_y(lb, n, o, sq_min - b.v_up);
                        lb.constant = -(sq_min - b.v_up);
                        push(std::move(lb));
                        Constraint dl = make(Family::DivDomainL, inid("divdomain_lch", i, n), Constraint::Sense::Le, n, i);
                        add_y(dl, n, o, b.epsilon);
                        dl.nl_terms.push_back({Constraint::NlTerm::Square, -1.0, {i, 2 * n}, {}});
                        push(std::move(dl));
                        Constraint dr = make(Family::DivDomainR, inid("divdomain_rch", i, n), Constraint::Sense::Le, n, i);
                        add_y(dr, n, o, b.epsilon);
                        dr.nl_terms.push_back({Constraint::NlTerm::Square, -1.0, {i, 2 * n + 1}, {}});
                        push(std::move(dr));
                        break;
                    }
                    default: break;
                }
            }
        }
    }

    void unary_value(OpKind o, double sq_max) {
        const EvalBounds& b = inst.bounds;
        for (int n : inst.shape.internals()) {
            for (int i = 0; i < n_data; ++i) {
                switch (o.tag()) {
                    case OpKind::Sqrt: {
                        Constraint ub = make(Family::SqrtUb, inid("sqrtub", i, n), Constraint::Sense::Le, n, i);
                        ub.nl_terms.push_back({Constraint::NlTerm::Square, 1.0, {i, n}, {}});
                        ub.v_terms = {{i, 2 * n + 1, -1.0}};
                        add_y(ub, n, o, sq_max - b.v_lo);
                        ub.constant = -(sq_max - b.v_lo);
                        push(std::move(ub));
                        Constraint lb = make(Family::SqrtLb, inid("sqrtlb", i, n), Constraint::Sense::Ge, n, i);
                        lb.nl_terms.push_back({Constraint::NlTerm::Square, 1.0, {i, n}, {}});
                        lb.v_terms = {{i, 2 * n + 1, -1.0}};
                        add_y(lb, n, o, -b.v_up);
                        lb.constant = b.v_up;
                        push(std::move(lb));
                        Constraint dom = make(Family::SqrtDomain, inid("sqrtdomain", i, n), Constraint::Sense::Le, n, i);
                        dom.v_terms = {{i, 2 * n + 1, -1.0}};
                        add_y(dom, n, o, b.epsilon - b.v_lo);
                        dom.constant = b.epsilon - (b.epsilon - b.v_lo);
                        push(std::move(dom));
                        break;
                    }
                    case OpKind::Exp: {
                        Constraint ub = make(Family::ExpUb, inid("expub", i, n), Constraint::Sense::Le, n, i);
                        ub.v_terms = {{i, n, 1.0}};
                        ub.nl_terms.push_back({Constraint::NlTerm::ExpOf, -1.0, {i, 2 * n + 1}, {}});
                        add_y(ub, n, o, b.v_up);
                        ub.constant = -b.v_up;
                        push(std::move(ub));
                        Constraint lb = make(Family::ExpLb, inid("explb", i, n), Constraint::Sense::Ge, n, i);
                        lb.v_terms = {{i, n, 1.0}};
                        lb.nl_terms.push_back({Constraint::NlTerm::ExpOf, -1.0, {i, 2 * n + 1}, {}});
                        double m = b.v_lo - std::exp(b.v_up);
                        add_y(lb, n, o, m);
                        lb.constant = -m;
                        push(std::move(lb));
                        break;
                    }
                    case OpKind::Log: {
                        Constraint ub = make(Family::LogUb, inid("logub", i, n), Constraint::Sense::Le, n, i);
                        ub.nl_terms.push_back({Constraint::NlTerm::ExpOf, 1.0, {i, n}, {}});
                        ub.v_terms = {{i, 2 * n + 1, -1.0}};
                        double m = std::exp(b.v_up) - b.v_lo;
                        add_y(ub, n, o, m);
                        ub.constant = -m;
                        push(std::move(ub));
                        Constraint lb = make(Family::LogLb, inid("loglb", i, n), Constraint::Sense::Ge, n, i);
                        lb.nl_terms.push_back({Constraint::NlTerm::ExpOf, 1.0, {i, n}, {}});
                        lb.v_terms = {{i, 2 * n + 1, -1.0}};
                        add_y(lb, n, o, -b.v_up);
                        lb.constant = b.v_up;
                        push(std::move(lb));
                        Constraint dom = make(Family::LogDomain, inid("logdomain", i, n), Constraint::Sense::Le, n, i);
                        dom.v_terms = {{i, 2 * n + 1, -1.0}};
                        add_y(dom, n, o, b.epsilon - b.v_lo);
                        dom.constant = b.epsilon - (b.epsilon - b.v_lo);
                        push(std::move(dom));
                        break;
                    }
                    default: break;
                }
            }
        }
    }

    void redundancy_constraints() {
        const bool improved = inst.config.variant == Variant::Improved;
        const OpKind plus = OpKind::plus(), minus = OpKind::minus(), times = OpKind::times(),
                     divide = OpKind::divide(), cst = OpKind::constant();
        auto perfect = inst.shape.perfect_nodes();
        auto is_perfect = [&](int n) {
            return std::binary_search(perfect.begin(), perfect.end(), n);
        };
        if (improved) {
            for (int n : inst.shape.internals()) {
                int rch = 2 * n + 1;
                bool rch_internal = !inst.shape.is_terminal(rch);
                if (!is_perfect(n) && rch_internal && inst.has_op(plus) && inst.has_op(minus)) {
                    Constraint c = make(Family::Redun2, nid("redun2", n), Constraint::Sense::Le, n);
                    add_y(c, n, plus, 1.0);
                    add_y(c, rch, minus, 1.0);
                    c.constant = -1.0;
                    push(std::move(c));
                }
                if (!is_perfect(n) && rch_internal && inst.has_op(times) && inst.has_op(divide)) {
                    Constraint c = make(Family::Redun3, nid("redun3", n), Constraint::Sense::Le, n);
                    add_y(c, n, times, 1.0);
                    add_y(c, rch, divide, 1.0);
                    c.constant = -1.0;
                    push(std::move(c));
                }
                if (has_cst) {
                    Constraint c = make(Family::Redun1, nid("redun1", n), Constraint::Sense::Le, n);
                    add_y(c, rch, cst, 1.0);
                    if (inst.has_op(plus)) add_y(c, n, plus, -1.0);
                    if (inst.has_op(times)) add_y(c, n, times, -1.0);
                    push(std::move(c));
                }
            }
        } else {
            for (int n : inst.shape.internals()) {
                int rch = 2 * n + 1;
                if (has_cst && !unas.empty()) {
                    Constraint c = make(Family::CozRedun1, nid("coz_redun1", n), Constraint::Sense::Le, n);
                    add_y(c, rch, cst, 1.0);
                    add_ops(c, n, unas, 1.0);
                    c.constant = -1.0;
                    push(std::move(c));
                }
                if (has_cst && inst.has_op(minus)) {
                    Constraint c = make(Family::CozRedun2, nid("coz_redun2", n), Constraint::Sense::Le, n);
                    add_y(c, rch, cst, 1.0);
                    add_y(c, n, minus, 1.0);
                    c.constant = -1.0;
                    push(std::move(c));
                }
                if (has_cst && inst.has_op(divide)) {
                    Constraint c = make(Family::CozRedun3, nid("coz_redun3", n), Constraint::Sense::Le, n);
                    add_y(c, rch, cst, 1.0);
                    add_y(c, n, divide, 1.0);
                    c.constant = -1.0;
                    push(std::move(c));
                }
            }
        }
        // shared: constant folding at sibling pairs, inverse unary pairs
        for (int n : inst.shape.internals()) {
            int lch = 2 * n, rch = 2 * n + 1;
            if (has_cst && inst.shape.contains(lch)) {
                Constraint c = make(Family::CozRedun4, nid("coz_redun4", n), Constraint::Sense::Le, n);
                add_y(c, lch, cst, 1.0);
                add_y(c, rch, cst, 1.0);
                c.constant = -1.0;
                push(std::move(c));
            }
            if (inst.has_op(OpKind::exp()) && inst.has_op(OpKind::log()) &&
                !inst.shape.is_terminal(rch)) {
                Constraint c5 = make(Family::CozRedun5, nid("coz_redun5", n), Constraint::Sense::Le, n);
                add_y(c5, n, OpKind::exp(), 1.0);
                add_y(c5, rch, OpKind::log(), 1.0);
                c5.constant = -1.0;
                push(std::move(c5));
                Constraint c6 = make(Family::CozRedun6, nid("coz_redun6", n), Constraint::Sense::Le, n);
                add_y(c6, n, OpKind::log(), 1.0);
                add_y(c6, rch, OpKind::exp(), 1.0);
                c6.constant = -1.0;
                push(std::move(c6));
            }
        }
    }

    void implication_constraints() {
        auto zero = inst.data.cols_zero();
        auto nega = inst.data.cols_negative();
        auto posi = inst.data.cols_positive();
        auto in_ops = [&](int j) { return inst.has_op(OpKind::var(j)); };
        auto emit_pair = [&](Family f, const char* fam, OpKind op, int j) {
            for (int n : inst.shape.internals()) {
                Constraint c = make(f, std::string(fam) + "[n=" + std::to_string(n) +
                                           ",j=" + std::to_string(j) + "]",
                                    Constraint::Sense::Le, n);
                add_y(c, n, op, 1.0);
                add_y(c, 2 * n + 1, OpKind::var(j), 1.0);
                c.constant = -1.0;
                push(std::move(c));
            }
        };
        if (inst.has_op(OpKind::divide()))
            for (int j : zero)
                if (in_ops(j)) emit_pair(Family::Impl1, "impl1", OpKind::divide(), j);
        if (inst.has_op(OpKind::sqrt()))
            for (int j : nega)
                if (in_ops(j)) emit_pair(Family::Impl2, "impl2", OpKind::sqrt(), j);
        if (inst.has_op(OpKind::log())) {
            std::vector<int> nz = nega;
            for (int j : zero)
                if (!std::count(nz.begin(), nz.end(), j)) nz.push_back(j);
            std::sort(nz.begin(), nz.end());
            for (int j : nz)
                if (in_ops(j)) emit_pair(Family::Impl4, "impl4", OpKind::log(), j);
        }
        if (inst.has_op(OpKind::sqrt()) && inst.has_op(OpKind::times())) {
            for (int n : inst.shape.nodes()) {
                if (!inst.shape.contains(4 * n + 2) || !inst.shape.contains(4 * n + 3)) continue;
                for (int j : posi) {
                    if (!in_ops(j)) continue;
                    for (int k : nega) {
                        if (!in_ops(k) || j == k) continue;
                        Constraint c = make(Family::ImplDepth2,
                                            "impl_depth2[n=" + std::to_string(n) +
                                                ",j=" + std::to_string(j) + ",k=" + std::to_string(k) + "]",
                                            Constraint::Sense::Le, n);
                        add_y(c, n, OpKind::sqrt(), 1.0);
                        add_y(c, 2 * n + 1, OpKind::times(), 1.0);
                        add_y(c, 4 * n + 2, OpKind::var(j), 1.0);
                        add_y(c, 4 * n + 3, OpKind::var(k), 1.0);
                        c.constant = -3.0;
                        push(std::move(c));
                    }
                }
            }
        }
    }

    void symmetry_constraints() {
        const EvalBounds& b = inst.bounds;
        bool any = inst.has_op(OpKind::plus()) || inst.has_op(OpKind::times());
        if (!any) return;
        for (int n : inst.shape.internals()) {
            if (!inst.shape.is_perfect_at(n) || !inst.shape.contains(2 * n)) continue;
            Constraint c = make(Family::Symmetry, nid("sym", n), Constraint::Sense::Ge, n, 0);
            c.v_terms = {{0, 2 * n, 1.0}, {0, 2 * n + 1, -1.0}};
            double m = b.v_lo - b.v_up;
            if (inst.has_op(OpKind::plus())) add_y(c, n, OpKind::plus(), m);
            if (inst.has_op(OpKind::times())) add_y(c, n, OpKind::times(), m);
            c.constant = -m;
            push(std::move(c));
        }
    }
};

}  // namespace

ConstraintSystem build(const ModelInstance& instance) {
    instance.validate();
    Builder b(instance);
    b.tree_constraints();
    b.value_constraints();
    if (instance.config.redundancy) b.redundancy_constraints();
    if (instance.config.implication) b.implication_constraints();
    if (instance.config.symmetry) b.symmetry_constraints();
    return std::move(b.sys);
}

FeasibilityReport check_point(const ConstraintSystem& system, const ModelInstance& instance,
                              const ModelPoint& p, Integrality integrality, double tol) {
    FeasibilityReport rep;
    for (const Constraint& c : system.constraints) {
        double viol = c.violation(p);
        if (viol > tol) rep.violations.push_back({c.id, c.family, viol});
    }
    if (integrality == Integrality::Binary) {
        for (const auto& [n, o] : instance.admissible_pairs()) {
            double y = p.get_y(n, op_rank(instance, o));
            double frac = std::abs(y - std::round(y));
            if (frac > tol)
                rep.violations.push_back(
                    {"integrality[n=" + std::to_string(n) + "," + o.name() + "]", Family::Bounds, frac});
        }
    }
    return rep;
}

nlohmann::json FeasibilityReport::to_json() const {
    json arr = json::array();
    for (const auto& v : violations)
        arr.push_back({{"constraint", v.id}, {"family", family_name(v.family)}, {"residual", v.residual}});
    return arr;
}

double objective(const ModelInstance& instance, const ModelPoint& p) {
    double acc = 0.0;
    for (int i = 0; i < instance.data.n(); ++i) {
        double r = instance.data.z[i] - p.get_v(i, 1);
        acc += r * r;
    }
    acc /= instance.data.n();
    if (instance.config.lambda > 0.0) {
        double active = 0.0;
        for (const auto& [n, o] : instance.admissible_pairs())
            active += p.get_y(n, op_rank(instance, o));
        acc += instance.config.lambda * active;
    }
    return acc;
}

ModelPoint embed_tree(const ExpressionTree& tree, const ModelInstance& instance) {
    tree.validate(instance.bounds);
    ModelPoint p;
    for (const auto& [n, o] : tree.assign) {
        if (!instance.has_op(o))
            throw ConfigError("tree uses operator " + o.name() + " outside the instance op set");
        p.set_y(n, op_rank(instance, o), 1.0);
    }
    for (const auto& [n, c] : tree.consts) p.c[n] = c;
    EvalPlan plan(tree, instance.bounds);
    auto consts = plan.tree_consts();
    std::vector<double> vals;
    for (int i = 0; i < instance.data.n(); ++i) {
        EvalFailure f;
        if (!plan.run_all(instance.data.x[i], consts, vals, &f)) {
            std::string where = " at node " + std::to_string(f.node) + ", row " + std::to_string(i + 1);
            if (f.kind == EvalFailure::Domain) throw DomainError(f.node, f.op.name(), "domain guard" + where);
            throw RangeError(f.node, "value out of bounds" + where);
        }
        for (std::size_t k = 0; k < vals.size(); ++k) p.v[{i, plan.active_nodes()[k]}] = vals[k];
    }
    return p;
}

void add_distance_restriction(ConstraintSystem& system, const ModelInstance& instance,
                              const ExpressionTree& anchor, int k1, int k2) {
    if (k1 < 0 || k1 > k2) throw std::invalid_argument("need 0 <= k1 <= k2");
    auto delta_terms = [&](Constraint& c, double sign) {
        for (const auto& [n, o] : instance.admissible_pairs()) {
            auto it = anchor.assign.find(n);
            if (it != anchor.assign.end()) {
                if (it->second == o) c.y_terms.emplace_back(n, op_rank(instance, o), -sign);
            } else {
                c.y_terms.emplace_back(n, op_rank(instance, o), sign);
            }
        }
    };
    double active = 0.0;
    for (const auto& [n, o] : anchor.assign)
        if (instance.shape.contains(n)) active += 1.0;
    Constraint up;
    up.family = Family::Distance;
    up.id = "dist[up]";
    up.sense = Constraint::Sense::Le;
    up.constant = active - k2;
    delta_terms(up, 1.0);
    system.constraints.push_back(std::move(up));
    Constraint lo;
    lo.family = Family::Distance;
    lo.id = "dist[lo]";
    lo.sense = Constraint::Sense::Ge;
    lo.constant = active - k1;
    delta_terms(lo, 1.0);
    system.constraints.push_back(std::move(lo));
}

namespace {

std::string term_str(double coeff, const std::string& sym, bool first) {
    std::string out;
    double a = std::abs(coeff);
    if (first) {
        if (coeff < 0) out += "-";
    } else {
        out += coeff < 0 ? " - " : " + ";
    }
    if (a != 1.0) out += format_double(a) + "*";
    out += sym;
    return out;
}

std::string vname(int i, int n) {
    return "v[" + std::to_string(i + 1) + "," + std::to_string(n) + "]";
}

}  // namespace

std::string Constraint::expression_string(const ModelInstance& inst) const {
    std::string e;
    bool first = true;
    for (const auto& [i, n, coeff] : v_terms) {
        e += term_str(coeff, vname(i, n), first);
        first = false;
    }
    for (const NlTerm& t : nl_terms) {
        std::string sym;
        switch (t.kind) {
            case NlTerm::ProdVV: sym = vname(t.a.first, t.a.second) + "*" + vname(t.b.first, t.b.second); break;
            case NlTerm::Square: sym = vname(t.a.first, t.a.second) + "^2"; break;
            case NlTerm::ExpOf: sym = "exp(" + vname(t.a.first, t.a.second) + ")"; break;
        }
        e += term_str(t.coeff, sym, first);
        first = false;
    }
    for (const auto& [n, coeff] : c_terms) {
        e += term_str(coeff, "c[" + std::to_string(n) + "]", first);
        first = false;
    }
    for (const auto& [n, r, coeff] : y_terms) {
        OpKind o = op_from_rank(inst, r);
        e += term_str(coeff, "y[" + std::to_string(n) + "," + o.name() + "]", first);
        first = false;
    }
    if (constant != 0.0 || first) {
        e += term_str(1.0, format_double(constant), first);
    }
    switch (sense) {
        case Sense::Le: e += " <= 0"; break;
        case Sense::Ge: e += " >= 0"; break;
        case Sense::Eq: e += " == 0"; break;
    }
    return e;
}

nlohmann::ordered_json export_model(const ModelInstance& instance) {
    instance.validate();
    ConstraintSystem sys = build(instance);
    ordered_json doc;
    doc["format"] = "srmodel/1";
    doc["variant"] = instance.config.variant == Variant::Improved ? "improved" : "baseline";
    doc["n_data"] = instance.data.n();
    doc["dim"] = instance.data.dim();
    doc["lambda"] = instance.config.lambda;

    ordered_json vars = ordered_json::array();
    for (const auto& [n, o] : instance.admissible_pairs()) {
        ordered_json v;
        v["name"] = "y[" + std::to_string(n) + "," + o.name() + "]";
        v["type"] = "binary";
        vars.push_back(std::move(v));
    }
    if (instance.has_const()) {
        for (int n : instance.shape.nodes()) {
            ordered_json v;
            v["name"] = "c[" + std::to_string(n) + "]";
            v["type"] = "continuous";
            v["lo"] = instance.bounds.c_lo;
            v["up"] = instance.bounds.c_up;
            vars.push_back(std::move(v));
        }
    }
    for (int i = 0; i < instance.data.n(); ++i)
        for (int n : instance.shape.nodes()) {
            ordered_json v;
            v["name"] = vname(i, n);
            v["type"] = "continuous";
            v["lo"] = instance.bounds.v_lo;
            v["up"] = instance.bounds.v_up;
            vars.push_back(std::move(v));
        }
    doc["variables"] = std::move(vars);

    ordered_json obj;
    obj["type"] = "mean_squared_error";
    obj["z"] = instance.data.z;
    obj["regularization"] = instance.config.lambda;
    doc["objective"] = std::move(obj);

    ordered_json cons = ordered_json::array();
    for (const Constraint& c : sys.constraints) {
        ordered_json e;
        e["id"] = c.id;
        e["family"] = family_name(c.family);
        e["expr"] = c.expression_string(instance);
        cons.push_back(std::move(e));
    }
    if (instance.has_const()) {
        for (int n : instance.shape.nodes()) {
            ordered_json e;
            e["id"] = "cbox[n=" + std::to_string(n) + "]";
            e["family"] = "bounds";
            e["expr"] = format_double(instance.bounds.c_lo) + " <= c[" + std::to_string(n) +
                        "] <= " + format_double(instance.bounds.c_up);
            cons.push_back(std::move(e));
        }
    }
    for (int i = 0; i < instance.data.n(); ++i)
        for (int n : instance.shape.nodes()) {
            ordered_json e;
            e["id"] = "vbox[i=" + std::to_string(i + 1) + ",n=" + std::to_string(n) + "]";
            e["family"] = "bounds";
            e["expr"] = format_double(instance.bounds.v_lo) + " <= " + vname(i, n) +
                        " <= " + format_double(instance.bounds.v_up);
            cons.push_back(std::move(e));
        }
    doc["constraints"] = std::move(cons);
    return doc;
}

void write_model(const ModelInstance& instance, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << export_model(instance).dump(2) << "\n";
}

nlohmann::ordered_json read_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return ordered_json::parse(in);
}

}  // namespace sr
