#ifndef SR_MODEL_HPP
#define SR_MODEL_HPP

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sr/expr.hpp"

namespace sr {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Variant { Improved, Baseline };

struct FormulationConfig {
    Variant variant = Variant::Improved;
    bool redundancy = true;
    bool symmetry = true;
    bool implication = true;
    double lambda = 0.0;

    static FormulationConfig improved_full() { return {}; }
    static FormulationConfig improved_necessary() {
        return {Variant::Improved, false, false, false, 0.0};
    }
    static FormulationConfig baseline_full() { return {Variant::Baseline, true, true, true, 0.0}; }
    static FormulationConfig baseline_necessary() {
        return {Variant::Baseline, false, false, false, 0.0};
    }
};

struct ModelInstance {
    Dataset data;
    std::vector<OpKind> ops;  // 𝒫 ∪ ℒ
    NodeSet shape;
    EvalBounds bounds;
    FormulationConfig config;

    void validate() const;

    std::vector<OpKind> binaries() const;
    std::vector<OpKind> unaries() const;
    std::vector<OpKind> operands() const;  // vars then cst, canonical order
    bool has_op(OpKind o) const;
    bool has_const() const { return has_op(OpKind::constant()); }
    bool has_any_variable() const;

    /// 𝒴 in canonical order: node ascending, operator rank ascending.
    /// Internal nodes take every operator, terminals only operands.
    std::vector<std::pair<int, OpKind>> admissible_pairs() const;
    std::vector<OpKind> ops_at(int node) const;

    static std::vector<OpKind> default_ops(int dim);  // + - * / sqrt, x1..xd, cst
};

enum class Family {
    Grammar1, Grammar2,
    CozGrammar1, CozGrammar2, CozGrammar3, CozGrammar4, CozGrammar5, CozGrammar6,
    VarUb, VarLb, NoneUb, NoneLb, IndepUb, IndepLb,
    CstUb, CstLb,
    PlusUb, PlusLb, MinusUb, MinusLb, TimesUb, TimesLb,
    DivUb, DivLb, DivDomainL, DivDomainR,
    SqrtUb, SqrtLb, SqrtDomain,
    ExpUb, ExpLb, LogUb, LogLb, LogDomain,
    Redun1, Redun2, Redun3,
    CozRedun1, CozRedun2, CozRedun3, CozRedun4, CozRedun5, CozRedun6,
    Impl1, Impl2, Impl4, ImplDepth2,
    Symmetry,
    Distance,
    Bounds,
};

std::string family_name(Family f);
bool is_value_family(Family f);

/// A point in (y, c, v) space. Missing entries read as zero.
struct ModelPoint {
    std::map<std::pair<int, int>, double> y;  // (node, op rank) -> [0,1]
    std::map<int, double> c;
    std::map<std::pair<int, int>, double> v;  // (data index, node) -> value

    double get_y(int node, int op_rank) const;
    double get_c(int node) const;
    double get_v(int i, int node) const;
    void set_y(int node, int op_rank, double val) { y[{node, op_rank}] = val; }
};

/// One residual constraint, fully materialized: expr(point) (<=|>=|==) 0 with
/// expr = constant + linear(y) + linear(c) + linear(v) + nonlinear(v).
struct Constraint {
    enum class Sense { Le, Ge, Eq };
    struct NlTerm {
        enum Kind { ProdVV, Square, ExpOf } kind;
        double coeff;
        std::pair<int, int> a;  // (data index, node)
        std::pair<int, int> b;  // ProdVV only
    };

    Family family;
    std::string id;
    int node = 0;
    int data_index = -1;
    Sense sense = Sense::Le;
    double constant = 0.0;
    std::vector<std::tuple<int, int, double>> y_terms;   // (node, op rank, coeff)
    std::vector<std::pair<int, double>> c_terms;         // (node, coeff)
    std::vector<std::tuple<int, int, double>> v_terms;   // (data index, node, coeff)
    std::vector<NlTerm> nl_terms;

    double expr_value(const ModelPoint& p) const;
    /// Positive residual magnitude when violated, 0 otherwise.
    double violation(const ModelPoint& p) const;
    bool is_linear() const { return nl_terms.empty(); }
    bool y_only() const { return c_terms.empty() && v_terms.empty() && nl_terms.empty(); }
    std::string expression_string(const ModelInstance& inst) const;
};

struct ConstraintSystem {
    std::vector<Constraint> constraints;

    int count(Family f) const;
    int count_value_defining() const;
    std::vector<const Constraint*> family(Family f) const;
};

ConstraintSystem build(const ModelInstance& instance);

enum class Integrality { Binary, Relaxed };

struct FeasibilityViolation {
    std::string id;
    Family family;
    double residual;
};

struct FeasibilityReport {
    std::vector<FeasibilityViolation> violations;
    bool feasible() const { return violations.empty(); }
    nlohmann::json to_json() const;
};

FeasibilityReport check_point(const ConstraintSystem& system, const ModelInstance& instance,
                              const ModelPoint& p, Integrality integrality, double tol = 1e-9);

double objective(const ModelInstance& instance, const ModelPoint& p);

/// Binary point for a concrete tree: y from the assignment, c from consts,
/// v from bottom-up evaluation (zero at inactive nodes). Throws
/// DomainError/RangeError when some row cannot be evaluated.
ModelPoint embed_tree(const ExpressionTree& tree, const ModelInstance& instance);

void add_distance_restriction(ConstraintSystem& system, const ModelInstance& instance,
                              const ExpressionTree& anchor, int k1, int k2);

nlohmann::ordered_json export_model(const ModelInstance& instance);
void write_model(const ModelInstance& instance, const std::string& path);
nlohmann::ordered_json read_model(const std::string& path);

int op_rank(const ModelInstance& inst, OpKind o);

}  // namespace sr

#endif
