#ifndef SR_SEARCH_HPP
#define SR_SEARCH_HPP

#include <atomic>
#include <functional>
#include <limits>
#include <memory>
#include <optional>

#include <nlohmann/json_fwd.hpp>

#include "sr/model.hpp"

namespace sr {

class InstanceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class AllStartsFailed : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DistanceRestriction {
    ExpressionTree anchor;
    int k1 = 0;
    int k2 = 0;
};

struct SearchParams {
    std::optional<long long> node_limit;  // γ
    std::optional<double> time_limit_s;
    double improve_factor = 0.999;  // accept when error < factor * start error
    double epsilon_opt = 0.0;       // stop as soon as error < epsilon_opt
    std::optional<DistanceRestriction> distance;
    std::optional<int> fix_level;  // β, applied to the distance anchor
    std::uint64_t seed = 0;
    std::shared_ptr<std::atomic<bool>> stop;

    // test instrumentation: called for every fitted structure that passed
    // the structural cuts and the post-fit symmetry check
    std::function<void(const ExpressionTree&, double)> on_structure;
};

enum class SolveStatus { Optimal, ImprovedStop, NodeLimit, TimeLimit, Infeasible };

std::string status_name(SolveStatus s);

struct SolveResult {
    std::optional<ExpressionTree> tree;
    double train_error = std::numeric_limits<double>::infinity();
    SolveStatus status = SolveStatus::Infeasible;
    long long nodes_explored = 0;
    long long structures_explored = 0;

    nlohmann::json to_json() const;  // {expression, train_error, status, nodes_explored}
};

/// Depth-first branch-and-prune over (node, operator) assignments with
/// per-structure constant fitting. Deterministic for fixed inputs and seed.
SolveResult res_minlp(const ModelInstance& instance, const SearchParams& params,
                      const std::optional<ExpressionTree>& start = std::nullopt);

struct FitOutcome {
    std::vector<double> consts;  // slot order of the structure's cst nodes
    double train_error = std::numeric_limits<double>::infinity();
    bool ok = false;  // false when every start failed on every row
};

/// Multi-start damped Gauss-Newton over the cst slots; rows failing a domain
/// guard contribute (v_up - v_lo)^2 each. Throws AllStartsFailed when no
/// start evaluates on any row.
FitOutcome fit_constants(const ExpressionTree& structure, const ModelInstance& instance,
                         std::uint64_t seed);
FitOutcome fit_constants_noexc(const ExpressionTree& structure, const ModelInstance& instance,
                               std::uint64_t seed);

/// Anchor assignments at nodes with an assigned descendant beta generations
/// below; res_minlp treats these pairs as immutable.
std::map<int, OpKind> apply_fix_level(const ExpressionTree& anchor, int beta);

/// Training error of a fixed tree on the instance (MSE with domain-failure
/// penalty rows), plus the lambda regularization term.
double tree_objective(const ExpressionTree& tree, const ModelInstance& instance);

}  // namespace sr

#endif
