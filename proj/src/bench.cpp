#include "sr/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sr/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sr {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;
using clock_type = std::chrono::steady_clock;

EvalBounds wide_bounds() { return EvalBounds{-1e9, 1e9, -1e9, 1e9, 1e-12}; }

double rmse(const ExpressionTree& tree, const Dataset& data, const EvalBounds& bounds) {
    EvalPlan plan(tree, bounds);
    auto consts = plan.tree_consts();
    const double penalty = (bounds.v_up - bounds.v_lo) * (bounds.v_up - bounds.v_lo);
    double acc = 0.0;
    for (int i = 0; i < data.n(); ++i) {
        double v;
        if (plan.run(data.x[i], consts, v)) {
            double r = data.z[i] - v;
            acc += r * r;
        } else {
            acc += penalty;
        }
    }
    return std::sqrt(acc / data.n());
}

GeneratedData generate(const BenchmarkFormula& formula, const ExperimentConfig& config) {
    const EvalBounds wb = wide_bounds();
    EvalPlan plan(formula.expr, wb);
    auto consts = plan.tree_consts();
    Rng rng(Rng::derive(config.seed, std::hash<std::string>{}(formula.name) & 0xFFFF));

    auto sample = [&](int count, Dataset& out) {
        out.x.clear();
        out.z.clear();
        for (int i = 0; i < count; ++i) {
            bool ok = false;
            for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
                std::vector<double> row(formula.dim());
                for (int j = 0; j < formula.dim(); ++j)
                    row[j] = rng.uniform(formula.ranges[j].first, formula.ranges[j].second);
                double z;
                if (plan.run(row, consts, z)) {
                    out.x.push_back(std::move(row));
                    out.z.push_back(z);
                    ok = true;
                }
            }
            if (!ok)
                throw DomainError(1, "formula",
                                  "formula " + formula.name + " undefined on its ranges");
        }
    };

    GeneratedData g;
    sample(config.n_train, g.train);
    sample(config.n_valid, g.valid);
    sample(config.n_test, g.test);
    if (config.noise_level > 0.0)
        for (double& z : g.train.z) z *= 1.0 + rng.normal(config.noise_level);
    return g;
}

bool is_discovered(const ExpressionTree& candidate, const BenchmarkFormula& truth,
                   std::uint64_t seed) {
    const EvalBounds wb = wide_bounds();
    EvalPlan truth_plan(truth.expr, wb);
    EvalPlan cand_plan(candidate, wb);
    auto tc = truth_plan.tree_consts();
    auto cc = cand_plan.tree_consts();
    Rng rng(seed);
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> row(truth.dim());
        for (int j = 0; j < truth.dim(); ++j)
            row[j] = rng.uniform(truth.ranges[j].first, truth.ranges[j].second);
        double t, c;
        if (!truth_plan.run(row, tc, t)) continue;
        if (!cand_plan.run(row, cc, c)) return false;
        double rel = std::abs(c - t) / std::max(std::abs(t), 1e-9);
        if (rel >= 1e-6) return false;
    }
    return true;
}

std::vector<PortfolioItem> ExperimentConfig::default_portfolio() {
    std::vector<PortfolioItem> items;
    auto add = [&](std::string label, int depth, bool integer, PortfolioItem::Mode mode,
                   double c_lo, double c_up) {
        PortfolioItem it;
        it.label = std::move(label);
        it.depth = depth;
        it.integer_constants = integer;
        it.mode = mode;
        it.c_lo = c_lo;
        it.c_up = c_up;
        if (mode == PortfolioItem::Strech) it.time_limit_s = 240.0;
        items.push_back(std::move(it));
    };
    add("exact-d1-frac", 1, false, PortfolioItem::Exact, -2, 2);
    add("exact-d1-int", 1, true, PortfolioItem::Exact, -2, 2);
    add("exact-d2-frac", 2, false, PortfolioItem::Exact, -2, 2);
    add("exact-d2-int", 2, true, PortfolioItem::Exact, -2, 2);
    add("exact-d2-wide", 2, false, PortfolioItem::Exact, -8, 8);
    add("strech-d3-frac", 3, false, PortfolioItem::Strech, -2, 2);
    add("strech-d3-int", 3, true, PortfolioItem::Strech, -2, 2);
    return items;
}

namespace {

ExpressionTree snap_integer_constants(const ExpressionTree& tree, const ModelInstance& inst) {
    std::vector<int> const_nodes;
    for (const auto& [n, c] : tree.consts) const_nodes.push_back(n);
    if (const_nodes.empty()) return tree;

    auto clamp = [&](double v) { return std::clamp(v, inst.bounds.c_lo, inst.bounds.c_up); };
    ExpressionTree best = tree;
    double best_err = std::numeric_limits<double>::infinity();
    // floor/ceil per constant; cap the combinatorics at 2^6
    int k = static_cast<int>(const_nodes.size());
    int combos = k <= 6 ? (1 << k) : 1;
    for (int mask = 0; mask < combos; ++mask) {
        ExpressionTree cand = tree;
        for (int i = 0; i < k; ++i) {
            double c = tree.consts.at(const_nodes[i]);
            double v = combos == 1 ? std::round(c)
                                   : ((mask >> i & 1) ? std::ceil(c) : std::floor(c));
            cand.consts[const_nodes[i]] = clamp(v);
        }
        double err = tree_objective(cand, inst);
        if (err < best_err) {
            best_err = err;
            best = std::move(cand);
        }
    }
    return best;
}

CandidateResult run_item(const BenchmarkFormula& formula, const ExperimentConfig& config,
                         const PortfolioItem& item, int item_index, const GeneratedData& data) {
    CandidateResult out;
    out.item = item.label;
    auto t0 = clock_type::now();
    try {
        ModelInstance inst;
        inst.data = data.train;
        inst.ops = ModelInstance::default_ops(formula.dim());
        inst.shape = NodeSet::perfect(item.depth);
        inst.bounds = EvalBounds{item.v_lo, item.v_up, item.c_lo, item.c_up, item.epsilon};
        inst.config = item.config;

        SolveResult solved;
        if (item.mode == PortfolioItem::Exact) {
            SearchParams sp;
            sp.seed = Rng::derive(config.seed, 7000 + item_index);
            solved = res_minlp(inst, sp);
        } else {
            StrechParams st;
            st.full_shape = NodeSet::perfect(item.depth);
            st.init_shape = NodeSet::perfect(std::max(1, std::min(2, item.depth - 1)));
            st.gamma_init = item.gamma_init;
            st.gamma_max = item.gamma_max;
            st.time_limit_s = item.time_limit_s;
            st.seed = Rng::derive(config.seed, 7000 + item_index);
            auto [res, trace] = strech(inst, st);
            solved = res;
        }
        if (!solved.tree) {
            out.failed = true;
            out.note = "no structure found (" + status_name(solved.status) + ")";
        } else {
            ExpressionTree tree = *solved.tree;
            if (item.integer_constants) tree = snap_integer_constants(tree, inst);
            out.tree = tree;
            out.train_error = tree_objective(tree, inst);
            out.valid_rmse = rmse(tree, data.valid, inst.bounds);
        }
    } catch (const std::exception& e) {
        out.failed = true;
        out.note = e.what();
    }
    out.wall_s = std::chrono::duration<double>(clock_type::now() - t0).count();
    return out;
}

}  // namespace

BenchEntry run_portfolio(const BenchmarkFormula& formula, const ExperimentConfig& config) {
    BenchEntry entry;
    entry.formula = formula.name;
    entry.depth = formula.depth;
    auto t0 = clock_type::now();
    GeneratedData data = generate(formula, config);

    entry.candidates.resize(config.portfolio.size());
    for (std::size_t i = 0; i < config.portfolio.size(); ++i)
        entry.candidates[i] = run_item(formula, config, config.portfolio[i],
                                       static_cast<int>(i), data);

    int best = -1;
    for (std::size_t i = 0; i < entry.candidates.size(); ++i) {
        const CandidateResult& c = entry.candidates[i];
        if (c.failed || !c.tree) continue;
        if (best < 0 || c.valid_rmse < entry.candidates[best].valid_rmse)
            best = static_cast<int>(i);
    }
    if (best >= 0) {
        entry.best = entry.candidates[best].tree;
        entry.best_item = entry.candidates[best].item;
        entry.valid_rmse = entry.candidates[best].valid_rmse;
        entry.test_rmse = rmse(*entry.best, data.test, wide_bounds());
        entry.discovered = is_discovered(*entry.best, formula);
    }
    entry.wall_s = std::chrono::duration<double>(clock_type::now() - t0).count();
    return entry;
}

BenchReport run_benchmark(const std::vector<BenchmarkFormula>& catalog,
                          const ExperimentConfig& config) {
    BenchReport report;
    report.entries.resize(catalog.size());
    int workers = config.workers;
#ifdef _OPENMP
    if (workers <= 0) workers = omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(workers)
#endif
    for (int i = 0; i < static_cast<int>(catalog.size()); ++i)
        report.entries[i] = run_portfolio(catalog[i], config);
    return report;
}

std::vector<BenchReport::Bucket> BenchReport::depth_buckets() const {
    Bucket le2{"<=2", 0, 0}, d3{"3", 0, 0}, ge4{">=4", 0, 0};
    for (const BenchEntry& e : entries) {
        Bucket& b = e.depth <= 2 ? le2 : (e.depth == 3 ? d3 : ge4);
        ++b.n_formulas;
        if (e.discovered) ++b.n_discovered;
    }
    std::vector<Bucket> out;
    for (const Bucket& b : {le2, d3, ge4})
        if (b.n_formulas > 0) out.push_back(b);
    return out;
}

ordered_json BenchReport::to_json(bool include_times) const {
    ordered_json doc;
    ordered_json arr = ordered_json::array();
    for (const BenchEntry& e : entries) {
        ordered_json j;
        j["formula"] = e.formula;
        j["depth"] = e.depth;
        j["discovered"] = e.discovered;
        j["best_expression"] = e.best ? ordered_json(render(*e.best)) : ordered_json(nullptr);
        j["best_item"] = e.best_item;
        j["validation_rmse"] = e.valid_rmse;
        j["testing_rmse"] = e.test_rmse;
        if (include_times) j["wall_s"] = e.wall_s;
        ordered_json cands = ordered_json::array();
        for (const CandidateResult& c : e.candidates) {
            ordered_json cj;
            cj["item"] = c.item;
            cj["expression"] = c.tree ? ordered_json(render(*c.tree)) : ordered_json(nullptr);
            cj["train_error"] = c.train_error;
            cj["validation_rmse"] = c.valid_rmse;
            cj["failed"] = c.failed;
            if (!c.note.empty()) cj["note"] = c.note;
            if (include_times) cj["wall_s"] = c.wall_s;
            cands.push_back(std::move(cj));
        }
        j["candidates"] = std::move(cands);
        arr.push_back(std::move(j));
    }
    doc["results"] = std::move(arr);
    ordered_json buckets = ordered_json::array();
    for (const Bucket& b : depth_buckets()) {
        ordered_json bj;
        bj["depth"] = b.label;
        bj["n_formulas"] = b.n_formulas;
        bj["discovery_rate_percent"] = b.rate_percent();
        buckets.push_back(std::move(bj));
    }
    doc["discovery_rate"] = std::move(buckets);
    return doc;
}

std::string BenchReport::to_csv() const {
    std::ostringstream out;
    out << "depth,n_formulas,discovery_rate_percent\n";
    for (const Bucket& b : depth_buckets())
        out << b.label << "," << b.n_formulas << "," << format_double(b.rate_percent()) << "\n";
    return out.str();
}

namespace {

BenchmarkFormula make_formula(std::string name, const std::string& expr, int dim,
                              std::vector<std::pair<double, double>> ranges, int depth) {
    BenchmarkFormula f;
    f.name = std::move(name);
    f.expr = parse_expression(expr, dim);
    f.ranges = std::move(ranges);
    f.depth = depth;
    // catalog invariant: evaluable everywhere on a range sample
    Rng rng(42);
    const EvalBounds wb = wide_bounds();
    EvalPlan plan(f.expr, wb);
    auto consts = plan.tree_consts();
    for (int i = 0; i < 64; ++i) {
        std::vector<double> row(f.dim());
        for (int j = 0; j < f.dim(); ++j)
            row[j] = rng.uniform(f.ranges[j].first, f.ranges[j].second);
        double v;
        if (!plan.run(row, consts, v))
            throw CatalogError("catalog formula " + f.name + " not evaluable on its ranges");
    }
    return f;
}

}  // namespace

std::vector<BenchmarkFormula> builtin_catalog() {
    std::vector<BenchmarkFormula> cat;
    // depth 1
    cat.push_back(make_formula("feynman.I.12.1", "x1*x2", 2, {{1, 5}, {1, 5}}, 1));
    cat.push_back(make_formula("feynman.I.12.5", "x1*x2", 2, {{0.5, 4}, {0.5, 4}}, 1));
    cat.push_back(make_formula("feynman.I.25.13", "x1/x2", 2, {{1, 5}, {1, 5}}, 1));
    cat.push_back(make_formula("feynman.I.29.4", "x1/x2", 2, {{1, 6}, {1, 6}}, 1));
    cat.push_back(make_formula("synthetic.sum2", "x1+x2", 2, {{0.5, 3}, {0.5, 3}}, 1));
    // depth 2
    cat.push_back(make_formula("feynman.I.14.3", "(x1*x2)*x3", 3, {{1, 3}, {1, 3}, {1, 3}}, 2));
    cat.push_back(make_formula("feynman.I.43.31", "(x1*x2)*x3", 3, {{0.5, 2}, {0.5, 2}, {0.5, 2}}, 2));
    cat.push_back(make_formula("synthetic.scaled_product", "2*(x1*x2)", 2, {{1, 3}, {1, 3}}, 2));
    cat.push_back(make_formula("synthetic.geomean", "sqrt(x1*x2)", 2, {{0.5, 4}, {0.5, 4}}, 2));
    cat.push_back(make_formula("synthetic.ratio_sum", "(x1+x2)/x3", 3, {{1, 3}, {1, 3}, {1, 3}}, 2));
    // depth 3
    cat.push_back(make_formula("pendulum", "6.283185307179586*sqrt(x1/x2)", 2, {{1, 5}, {5, 15}}, 3));
    cat.push_back(make_formula("feynman.I.12.2", "((0.07957747154594767*x1)*x2)/(x3*(x4*x4))", 4,
                               {{1.5, 3}, {1.5, 3}, {1, 2}, {1, 2}}, 3));
    cat.push_back(make_formula("feynman.II.13.17", "(0.15915494309189535*x1)/((x2*x4)*(x3*x3))", 4,
                               {{1.5, 3}, {1, 2}, {1, 2}, {1, 2}}, 3));
    cat.push_back(make_formula("feynman.III.15.14", "(0.012665147955292222*(x1*x1))/(x2*(x3*x3))",
                               3, {{3.5, 6}, {1, 2}, {1, 2}}, 3));
    cat.push_back(make_formula("synthetic.inv_product3", "2/((x1*x2)*x3)", 3,
                               {{1, 2}, {1, 2}, {1, 2}}, 3));
    return cat;
}

ordered_json catalog_to_json(const std::vector<BenchmarkFormula>& catalog) {
    ordered_json arr = ordered_json::array();
    for (const BenchmarkFormula& f : catalog) {
        ordered_json j;
        j["name"] = f.name;
        j["expression"] = render(f.expr);
        ordered_json ranges = ordered_json::array();
        for (const auto& [lo, hi] : f.ranges) ranges.push_back(ordered_json::array({lo, hi}));
        j["ranges"] = std::move(ranges);
        j["depth"] = f.depth;
        arr.push_back(std::move(j));
    }
    return arr;
}

std::vector<BenchmarkFormula> load_catalog(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CatalogError("cannot open catalog " + path);
    json doc = json::parse(in);
    if (!doc.is_array()) throw CatalogError("catalog must be a JSON array");
    std::vector<BenchmarkFormula> out;
    for (const json& j : doc) {
        std::string name = j.at("name").get<std::string>();
        std::vector<std::pair<double, double>> ranges;
        for (const json& r : j.at("ranges"))
            ranges.emplace_back(r.at(0).get<double>(), r.at(1).get<double>());
        try {
            out.push_back(make_formula(name, j.at("expression").get<std::string>(),
                                       static_cast<int>(ranges.size()), std::move(ranges),
                                       j.at("depth").get<int>()));
        } catch (const ParseError& e) {
            throw CatalogError("catalog entry " + name + " uses an unsupported expression: " +
                               e.what());
        }
    }
    return out;
}

}  // namespace sr
