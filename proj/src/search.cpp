#include "sr/search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "sr/rng.hpp"

namespace sr {

using json = nlohmann::json;

std::string status_name(SolveStatus s) {
    switch (s) {
        case SolveStatus::Optimal: return "optimal";
        case SolveStatus::ImprovedStop: return "improved_stop";
        case SolveStatus::NodeLimit: return "node_limit";
        case SolveStatus::TimeLimit: return "time_limit";
        case SolveStatus::Infeasible: return "infeasible";
    }
    return "?";
}

json SolveResult::to_json() const {
    json j;
    j["expression"] = tree ? json(render(*tree)) : json(nullptr);
    j["train_error"] = train_error;
    j["status"] = status_name(status);
    j["nodes_explored"] = nodes_explored;
    return j;
}

double tree_objective(const ExpressionTree& tree, const ModelInstance& instance) {
    const EvalBounds& b = instance.bounds;
    EvalPlan plan(tree, b);
    auto consts = plan.tree_consts();
    const double penalty = (b.v_up - b.v_lo) * (b.v_up - b.v_lo);
    double acc = 0.0;
    for (int i = 0; i < instance.data.n(); ++i) {
        double v;
        if (plan.run(instance.data.x[i], consts, v)) {
            double r = instance.data.z[i] - v;
            acc += r * r;
        } else {
            acc += penalty;
        }
    }
    acc /= instance.data.n();
    acc += instance.config.lambda * tree.node_count();
    return acc;
}

std::map<int, OpKind> apply_fix_level(const ExpressionTree& anchor, int beta) {
    if (beta < 1) throw std::invalid_argument("fix level must be >= 1");
    std::map<int, OpKind> frozen;
    for (const auto& [m, om] : anchor.assign) {
        int a = m >> beta;
        if (a >= 1 && anchor.assign.count(a)) frozen.emplace(a, anchor.assign.at(a));
    }
    return frozen;
}

namespace {

struct Fitter {
    const ModelInstance& inst;
    const EvalPlan& plan;
    double penalty;

    double total_error(std::span<const double> c, int* valid_rows = nullptr) const {
        double acc = 0.0;
        int ok_rows = 0;
        for (int i = 0; i < inst.data.n(); ++i) {
            double v;
            if (plan.run(inst.data.x[i], c, v)) {
                double r = inst.data.z[i] - v;
                acc += r * r;
                ++ok_rows;
            } else {
                acc += penalty;
            }
        }
        if (valid_rows) *valid_rows = ok_rows;
        return acc / inst.data.n();
    }
};

// solve (A + mu I) x = b in place, A symmetric k x k
bool solve_damped(std::vector<double> A, std::vector<double> b, double mu, int k,
                  std::vector<double>& x) {
    for (int i = 0; i < k; ++i) A[i * k + i] += mu;
    // Gaussian elimination with partial pivoting
    std::vector<int> piv(k);
    for (int i = 0; i < k; ++i) piv[i] = i;
    for (int col = 0; col < k; ++col) {
        int best = col;
        for (int r = col + 1; r < k; ++r)
            if (std::abs(A[r * k + col]) > std::abs(A[best * k + col])) best = r;
        if (std::abs(A[best * k + col]) < 1e-300) return false;
        if (best != col) {
            for (int j = 0; j < k; ++j) std::swap(A[best * k + j], A[col * k + j]);
            std::swap(b[best], b[col]);
        }
        for (int r = col + 1; r < k; ++r) {
            double f = A[r * k + col] / A[col * k + col];
            for (int j = col; j < k; ++j) A[r * k + j] -= f * A[col * k + j];
            b[r] -= f * b[col];
        }
    }
    x.assign(k, 0.0);
    for (int i = k - 1; i >= 0; --i) {
        double s = b[i];
        for (int j = i + 1; j < k; ++j) s -= A[i * k + j] * x[j];
        x[i] = s / A[i * k + i];
    }
    return true;
}

}  // namespace

FitOutcome fit_constants_noexc(const ExpressionTree& structure, const ModelInstance& instance,
                               std::uint64_t seed) {
    const EvalBounds& b = instance.bounds;
    EvalPlan plan(structure, b);
    const int k = plan.const_count();
    Fitter fitter{instance, plan, (b.v_up - b.v_lo) * (b.v_up - b.v_lo)};

    FitOutcome out;
    if (k == 0) {
        int valid = 0;
        out.train_error = fitter.total_error({}, &valid);
        out.ok = valid > 0;
        return out;
    }

    std::vector<std::vector<double>> starts;
    for (double s : {0.0, b.c_lo, b.c_up, b.c_lo / 2.0, b.c_up / 2.0})
        starts.emplace_back(k, s);
    Rng rng(seed);
    for (int s = 0; s < 5; ++s) {
        std::vector<double> v(k);
        for (int j = 0; j < k; ++j) v[j] = rng.uniform(b.c_lo, b.c_up);
        starts.push_back(std::move(v));
    }

    auto clamp = [&](std::vector<double>& c) {
        for (double& x : c) x = std::clamp(x, b.c_lo, b.c_up);
    };

    const double h = 1e-6;
    const int max_iter = 200;
    std::vector<double> best_c;
    double best_err = std::numeric_limits<double>::infinity();
    bool any_valid_start = false;

    for (auto& c : starts) {
        clamp(c);
        int valid = 0;
        double err = fitter.total_error(c, &valid);
        if (valid > 0) any_valid_start = true;
        double mu = 1e-3;
        if (valid > 0) {
            for (int iter = 0; iter < max_iter; ++iter) {
                // residuals and numeric jacobian over currently valid rows
                std::vector<double> JtJ(k * k, 0.0), Jtr(k, 0.0);
                int used = 0;
                std::vector<double> cp(c), cm(c), grad(k);
                for (int i = 0; i < instance.data.n(); ++i) {
                    double v0;
                    if (!plan.run(instance.data.x[i], c, v0)) continue;
                    double r = v0 - instance.data.z[i];
                    bool row_ok = true;
                    for (int j = 0; j < k; ++j) {
                        cp[j] = c[j] + h;
                        cm[j] = c[j] - h;
                        double vp, vm;
                        bool okp = plan.run(instance.data.x[i], cp, vp);
                        bool okm = plan.run(instance.data.x[i], cm, vm);
                        cp[j] = c[j];
                        cm[j] = c[j];
                        if (okp && okm) grad[j] = (vp - vm) / (2 * h);
                        else if (okp) grad[j] = (vp - v0) / h;
                        else if (okm) grad[j] = (v0 - vm) / h;
                        else { row_ok = false; break; }
                    }
                    if (!row_ok) continue;
                    ++used;
                    for (int a = 0; a < k; ++a) {
                        Jtr[a] += grad[a] * r;
                        for (int bcol = 0; bcol < k; ++bcol) JtJ[a * k + bcol] += grad[a] * grad[bcol];
                    }
                }
                if (used == 0) break;
                std::vector<double> step;
                if (!solve_damped(JtJ, Jtr, mu, k, step)) break;
                for (double& s : step) s = -s;

                bool accepted = false;
                double alpha = 1.0, taken = 0.0;
                for (int ls = 0; ls < 8; ++ls, alpha *= 0.5) {
                    std::vector<double> cand(c);
                    for (int j = 0; j < k; ++j) cand[j] += alpha * step[j];
                    clamp(cand);
                    double cand_err = fitter.total_error(cand);
                    if (cand_err < err) {
                        taken = 0.0;
                        for (int j = 0; j < k; ++j) taken = std::max(taken, std::abs(cand[j] - c[j]));
                        c = std::move(cand);
                        err = cand_err;
                        accepted = true;
                        break;
                    }
                }
                if (accepted) {
                    mu = std::max(mu * 0.25, 1e-12);
                    if (taken < 1e-10) break;
                } else {
                    mu *= 10.0;
                    if (mu > 1e8) break;
                }
            }
        }
        if (err < best_err) {
            best_err = err;
            best_c = c;
        }
    }

    out.consts = std::move(best_c);
    out.train_error = best_err;
    out.ok = any_valid_start;
    return out;
}

FitOutcome fit_constants(const ExpressionTree& structure, const ModelInstance& instance,
                         std::uint64_t seed) {
    FitOutcome out = fit_constants_noexc(structure, instance, seed);
    if (!out.ok) throw AllStartsFailed("every constant start failed the domain guards on all rows");
    return out;
}

namespace {

struct Search {
    const ModelInstance& inst;
    const SearchParams& params;

    std::vector<OpKind> internal_ops, terminal_ops;
    std::vector<char> in_shape, terminal, perfect;
    std::vector<std::vector<int>> desc;  // shape descendants per node
    int max_node;

    enum State : char { Undecided, Assigned, Off };
    std::vector<State> state;
    std::vector<OpKind> op_at;
    std::set<int> pending;
    int undecided = 0;

    std::map<int, OpKind> frozen;

    bool has_dist = false;
    int k1 = 0, k2 = 0;
    std::vector<char> anchor_active;
    std::vector<OpKind> anchor_op;
    int delta_now = 0;

    bool vars_required;
    std::vector<char> col_zero, col_nega, col_posi;  // by var index
    bool assoc_cuts;

    std::optional<ExpressionTree> best;
    double best_err = std::numeric_limits<double>::infinity();
    double start_err = std::numeric_limits<double>::infinity();
    bool has_start = false;

    long long nodes_explored = 0, structures = 0;
    long long gamma = std::numeric_limits<long long>::max();
    std::chrono::steady_clock::time_point deadline;
    bool has_deadline = false;
    bool halted = false;
    SolveStatus halt_reason = SolveStatus::Optimal;

    explicit Search(const ModelInstance& instance, const SearchParams& p)
        : inst(instance), params(p) {
        internal_ops = inst.binaries();
        for (const OpKind& o : inst.unaries()) internal_ops.push_back(o);
        for (const OpKind& o : inst.operands()) internal_ops.push_back(o);
        terminal_ops = inst.operands();
        max_node = inst.shape.max_node();
        in_shape.assign(max_node + 2, 0);
        terminal.assign(max_node + 2, 0);
        perfect.assign(max_node + 2, 0);
        desc.assign(max_node + 2, {});
        for (int n : inst.shape.nodes()) {
            in_shape[n] = 1;
            terminal[n] = inst.shape.is_terminal(n);
            perfect[n] = inst.shape.is_perfect_at(n);
            desc[n] = inst.shape.descendants(n);
        }
        state.assign(max_node + 2, Undecided);
        op_at.assign(max_node + 2, OpKind::constant());
        for (int n : inst.shape.nodes()) (void)n;
        undecided = inst.shape.size();

        vars_required = inst.has_any_variable();
        int d = inst.data.dim();
        col_zero.assign(d + 1, 0);
        col_nega.assign(d + 1, 0);
        col_posi.assign(d + 1, 0);
        for (int j : inst.data.cols_zero()) col_zero[j] = 1;
        for (int j : inst.data.cols_negative()) col_nega[j] = 1;
        for (int j : inst.data.cols_positive()) col_posi[j] = 1;
        assoc_cuts = inst.config.variant == Variant::Improved;

        if (params.distance) {
            has_dist = true;
            k1 = params.distance->k1;
            k2 = params.distance->k2;
            anchor_active.assign(max_node + 2, 0);
            anchor_op.assign(max_node + 2, OpKind::constant());
            for (const auto& [n, o] : params.distance->anchor.assign) {
                if (n <= max_node) {
                    anchor_active[n] = 1;
                    anchor_op[n] = o;
                }
            }
        }
        if (params.fix_level) {
            if (!params.distance) throw InstanceError("fix level needs an anchor");
            frozen = apply_fix_level(params.distance->anchor, *params.fix_level);
        }
        if (params.node_limit) gamma = *params.node_limit;
        if (params.time_limit_s) {
            deadline = std::chrono::steady_clock::now() +
                       std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                           std::chrono::duration<double>(*params.time_limit_s));
            has_deadline = true;
        }
    }

    int node_contrib(int n, bool assigned, OpKind o) const {
        if (!has_dist) return 0;
        if (anchor_active[n]) return assigned && o == anchor_op[n] ? 0 : 1;
        return assigned ? 1 : 0;
    }

    bool halt_checks() {
        if (halted) return true;
        if (params.stop && params.stop->load()) {
            halted = true;
            halt_reason = SolveStatus::TimeLimit;
            return true;
        }
        if (has_deadline && std::chrono::steady_clock::now() >= deadline) {
            halted = true;
            halt_reason = SolveStatus::TimeLimit;
            return true;
        }
        if (nodes_explored >= gamma) {
            halted = true;
            halt_reason = SolveStatus::NodeLimit;
            return true;
        }
        return false;
    }

    bool admissible(int n, OpKind o) const {
        if (o.is_binary() && !in_shape[2 * n]) return false;
        int p = n / 2;
        bool is_right = (n % 2 == 1) && n > 1;
        if (inst.config.redundancy && n > 1) {
            const OpKind& po = op_at[p];
            if (is_right) {
                if (o.is_const() && !(po.tag() == OpKind::Plus || po.tag() == OpKind::Times))
                    return false;
                if (assoc_cuts && !perfect[p]) {
                    if (po.tag() == OpKind::Plus && o.tag() == OpKind::Minus) return false;
                    if (po.tag() == OpKind::Times && o.tag() == OpKind::Divide) return false;
                }
                if (po.tag() == OpKind::Exp && o.tag() == OpKind::Log) return false;
                if (po.tag() == OpKind::Log && o.tag() == OpKind::Exp) return false;
                if (o.is_const() && state[n - 1] == Assigned && op_at[n - 1].is_const()) return false;
            }
        }
        if (inst.config.implication && n > 1 && is_right && o.is_var()) {
            const OpKind& po = op_at[p];
            int j = o.var_index();
            if (po.tag() == OpKind::Divide && col_zero[j]) return false;
            if (po.tag() == OpKind::Sqrt && col_nega[j]) return false;
            if (po.tag() == OpKind::Log && (col_nega[j] || col_zero[j])) return false;
        }
        if (inst.config.implication && o.is_var() && n >= 7 && (n - 3) % 4 == 0) {
            // n = 4g+3: close the sqrt(xj*xk) pattern
            int g = (n - 3) / 4;
            if (g >= 1 && state[g] == Assigned && op_at[g].tag() == OpKind::Sqrt &&
                state[2 * g + 1] == Assigned && op_at[2 * g + 1].tag() == OpKind::Times &&
                state[4 * g + 2] == Assigned && op_at[4 * g + 2].is_var()) {
                int j = op_at[4 * g + 2].var_index(), k = o.var_index();
                if (j != k && col_posi[j] && col_nega[k]) return false;
            }
        }
        return true;
    }

    struct Undo {
        int node;
        std::vector<int> offed;
        std::vector<int> added_pending;
        int delta_delta = 0;
        int undecided_delta = 0;
    };

    void apply(int n, OpKind o, Undo& u) {
        u.node = n;
        state[n] = Assigned;
        op_at[n] = o;
        --undecided;
        --u.undecided_delta;
        int dd = node_contrib(n, true, o);
        delta_now += dd;
        u.delta_delta += dd;
        auto mark_off_subtree = [&](int root) {
            if (root > max_node || !in_shape[root]) return;
            std::vector<int> stack{root};
            while (!stack.empty()) {
                int m = stack.back();
                stack.pop_back();
                if (m > max_node || !in_shape[m] || state[m] != Undecided) continue;
                state[m] = Off;
                u.offed.push_back(m);
                --undecided;
                --u.undecided_delta;
                int c = node_contrib(m, false, o);
                delta_now += c;
                u.delta_delta += c;
                stack.push_back(2 * m);
                stack.push_back(2 * m + 1);
            }
        };
        if (o.is_binary()) {
            for (int c : {2 * n, 2 * n + 1}) {
                pending.insert(c);
                u.added_pending.push_back(c);
            }
        } else if (o.is_unary()) {
            pending.insert(2 * n + 1);
            u.added_pending.push_back(2 * n + 1);
            mark_off_subtree(2 * n);
        } else {
            mark_off_subtree(2 * n);
            mark_off_subtree(2 * n + 1);
        }
    }

    void undo(const Undo& u) {
        state[u.node] = Undecided;
        for (int m : u.offed) state[m] = Undecided;
        for (int c : u.added_pending) pending.erase(c);
        delta_now -= u.delta_delta;
        undecided -= u.undecided_delta;
    }

    ExpressionTree current_tree() const {
        ExpressionTree t;
        t.shape = inst.shape;
        for (int n : inst.shape.nodes()) {
            if (state[n] == Assigned) {
                t.assign.emplace(n, op_at[n]);
                if (op_at[n].is_const()) t.consts.emplace(n, 0.0);
            }
        }
        return t;
    }

    void handle_complete() {
        if (has_dist && (delta_now < k1 || delta_now > k2)) return;
        bool has_var = false;
        for (int n : inst.shape.nodes())
            if (state[n] == Assigned && op_at[n].is_var()) has_var = true;
        if (vars_required && !has_var) return;

        ExpressionTree t = current_tree();
        ++structures;
        FitOutcome fit = fit_constants_noexc(t, inst, params.seed);
        if (!fit.ok) return;
        const EvalPlan plan(t, inst.bounds);
        for (std::size_t s = 0; s < fit.consts.size(); ++s)
            t.consts[plan.const_nodes()[s]] = fit.consts[s];
        double err = fit.train_error + inst.config.lambda * t.node_count();

        if (inst.config.symmetry) {
            std::vector<double> vals;
            EvalPlan fitted(t, inst.bounds);
            auto consts = fitted.tree_consts();
            if (fitted.run_all(inst.data.x[0], consts, vals)) {
                std::vector<double> by_node(max_node + 2, 0.0);
                for (std::size_t i = 0; i < vals.size(); ++i) by_node[fitted.active_nodes()[i]] = vals[i];
                for (int n : inst.shape.nodes()) {
                    if (state[n] != Assigned) continue;
                    auto tag = op_at[n].tag();
                    if ((tag == OpKind::Plus || tag == OpKind::Times) && perfect[n] &&
                        in_shape[2 * n]) {
                        if (by_node[2 * n] < by_node[2 * n + 1]) return;  // symmetric twin survives
                    }
                }
            }
        }

        if (params.on_structure) params.on_structure(t, err);

        if (err < best_err) {
            best_err = err;
            best = std::move(t);
            if (has_start && best_err < params.improve_factor * start_err) {
                halted = true;
                halt_reason = SolveStatus::ImprovedStop;
            }
            if (best_err < params.epsilon_opt) {
                halted = true;
                halt_reason = SolveStatus::ImprovedStop;
            }
        }
    }

    void expand() {
        if (halt_checks()) return;
        ++nodes_explored;
        if (pending.empty()) {
            handle_complete();
            return;
        }
        int n = *pending.begin();
        pending.erase(pending.begin());
        const auto& candidates = terminal[n] ? terminal_ops : internal_ops;
        auto frozen_it = frozen.find(n);
        for (const OpKind& o : candidates) {
            if (frozen_it != frozen.end() && !(frozen_it->second == o)) continue;
            if (!admissible(n, o)) continue;
            Undo u;
            apply(n, o, u);
            bool ok = true;
            if (has_dist) {
                if (delta_now > k2) ok = false;
                if (delta_now + undecided < k1) ok = false;
            }
            if (ok) expand();
            undo(u);
            if (halted) break;
        }
        pending.insert(n);
    }

    SolveResult run(const std::optional<ExpressionTree>& start) {
        if (start) {
            start->validate(inst.bounds);
            has_start = true;
            start_err = tree_objective(*start, inst);
            best = *start;
            best_err = start_err;
        }
        pending.insert(1);
        expand();
        SolveResult r;
        r.nodes_explored = nodes_explored;
        r.structures_explored = structures;
        r.tree = best;
        r.train_error = best_err;
        if (halted) r.status = halt_reason;
        else r.status = best ? SolveStatus::Optimal : SolveStatus::Infeasible;
        if (!best) r.status = halted ? r.status : SolveStatus::Infeasible;
        return r;
    }
};

}  // namespace

SolveResult res_minlp(const ModelInstance& instance, const SearchParams& params,
                      const std::optional<ExpressionTree>& start) {
    instance.validate();
    if (params.distance && (params.distance->k1 < 0 || params.distance->k1 > params.distance->k2))
        throw InstanceError("need 0 <= k1 <= k2");
    if (params.fix_level && *params.fix_level < 1) throw InstanceError("fix level must be >= 1");
    Search s(instance, params);
    return s.run(start);
}

}  // namespace sr
