#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sr/bench.hpp"
#include "sr/lemmalab.hpp"
#include "sr/model.hpp"
#include "sr/search.hpp"
#include "sr/strech.hpp"

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

struct BoundsFlags {
    double v_lo = -10, v_up = 10, c_lo = -2, c_up = 2, epsilon = 0.01;

    void attach(CLI::App* cmd) {
        cmd->add_option("--v-lo", v_lo, "lower bound on intermediate values");
        cmd->add_option("--v-up", v_up, "upper bound on intermediate values");
        cmd->add_option("--c-lo", c_lo, "lower bound on constants");
        cmd->add_option("--c-up", c_up, "upper bound on constants");
        cmd->add_option("--epsilon", epsilon, "domain guard for /, sqrt, log");
    }
    sr::EvalBounds bounds() const { return {v_lo, v_up, c_lo, c_up, epsilon}; }
};

struct FormulationFlags {
    std::string variant = "improved";
    bool no_redundancy = false, no_symmetry = false, no_implication = false;
    double lambda = 0.0;

    void attach(CLI::App* cmd) {
        cmd->add_option("--variant", variant, "improved or baseline")
            ->check(CLI::IsMember({"improved", "baseline"}));
        cmd->add_flag("--no-redundancy", no_redundancy, "drop redundancy-eliminating constraints");
        cmd->add_flag("--no-symmetry", no_symmetry, "drop symmetry-breaking constraints");
        cmd->add_flag("--no-implication", no_implication, "drop implication cuts");
        cmd->add_option("--lambda", lambda, "regularization weight on active nodes");
    }
    sr::FormulationConfig config() const {
        sr::FormulationConfig c;
        c.variant = variant == "baseline" ? sr::Variant::Baseline : sr::Variant::Improved;
        c.redundancy = !no_redundancy;
        c.symmetry = !no_symmetry;
        c.implication = !no_implication;
        c.lambda = lambda;
        return c;
    }
};

std::vector<sr::OpKind> parse_ops(const std::string& spec, int dim, bool no_const) {
    std::vector<sr::OpKind> ops;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok == "+") ops.push_back(sr::OpKind::plus());
        else if (tok == "-") ops.push_back(sr::OpKind::minus());
        else if (tok == "*") ops.push_back(sr::OpKind::times());
        else if (tok == "/") ops.push_back(sr::OpKind::divide());
        else if (tok == "sqrt") ops.push_back(sr::OpKind::sqrt());
        else if (tok == "exp") ops.push_back(sr::OpKind::exp());
        else if (tok == "log") ops.push_back(sr::OpKind::log());
        else throw CLI::ValidationError("--ops", "unknown operator '" + tok + "'");
    }
    for (int j = 1; j <= dim; ++j) ops.push_back(sr::OpKind::var(j));
    if (!no_const) ops.push_back(sr::OpKind::constant());
    return ops;
}

std::string read_expr_arg(const std::string& arg) {
    if (!arg.empty() && arg[0] == '@') {
        std::ifstream in(arg.substr(1));
        if (!in) throw std::runtime_error("cannot open " + arg.substr(1));
        std::string s;
        std::getline(in, s);
        return s;
    }
    return arg;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

int cmd_solve(const std::string& data_path, int depth, const std::string& ops_spec, bool no_const,
              const BoundsFlags& bf, const FormulationFlags& ff, std::uint64_t seed,
              const std::string& anchor_arg, int k1, int k2, int beta, long long gamma,
              double time_limit, const std::string& out_path) {
    sr::Dataset data = sr::Dataset::read_csv(data_path);
    sr::ModelInstance inst;
    inst.data = data;
    inst.ops = parse_ops(ops_spec, data.dim(), no_const);
    inst.shape = sr::NodeSet::perfect(depth);
    inst.bounds = bf.bounds();
    inst.config = ff.config();

    sr::SearchParams sp;
    sp.seed = seed;
    if (gamma > 0) sp.node_limit = gamma;
    if (time_limit > 0) sp.time_limit_s = time_limit;
    if (!anchor_arg.empty()) {
        sr::ExpressionTree anchor = sr::parse_expression(read_expr_arg(anchor_arg), data.dim());
        anchor.shape = inst.shape;
        sp.distance = sr::DistanceRestriction{anchor, k1, k2};
        if (beta > 0) sp.fix_level = beta;
    }
    sr::SolveResult res = sr::res_minlp(inst, sp);
    json out = res.to_json();
    if (!out_path.empty()) write_text(out_path, out.dump(2) + "\n");
    else std::cout << out.dump(2) << "\n";
    return res.tree ? 0 : 2;
}

int cmd_strech(const std::string& data_path, int depth, int init_depth,
               const std::string& ops_spec, bool no_const, const BoundsFlags& bf,
               const FormulationFlags& ff, const sr::StrechParams& base, std::uint64_t seed,
               double time_limit, const std::string& out_path, const std::string& log_path) {
    sr::Dataset data = sr::Dataset::read_csv(data_path);
    sr::ModelInstance inst;
    inst.data = data;
    inst.ops = parse_ops(ops_spec, data.dim(), no_const);
    inst.shape = sr::NodeSet::perfect(depth);
    inst.bounds = bf.bounds();
    inst.config = ff.config();

    sr::StrechParams st = base;
    st.full_shape = inst.shape;
    st.init_shape = sr::NodeSet::perfect(init_depth);
    st.seed = seed;
    if (time_limit > 0) st.time_limit_s = time_limit;

    auto [res, trace] = sr::strech(inst, st);
    json out = res.to_json();
    out["trace"] = trace.to_json(false);
    if (!out_path.empty()) write_text(out_path, out.dump(2) + "\n");
    else std::cout << out.dump(2) << "\n";
    // timings go to the log stream, never into the result document
    if (!log_path.empty()) write_text(log_path, trace.to_json_lines(true));
    else std::cerr << trace.to_json_lines(true);
    return res.tree ? 0 : 2;
}

int cmd_export(const std::string& data_path, int depth, const std::string& ops_spec, bool no_const,
               const BoundsFlags& bf, const FormulationFlags& ff, const std::string& out_path) {
    sr::Dataset data = sr::Dataset::read_csv(data_path);
    sr::ModelInstance inst;
    inst.data = data;
    inst.ops = parse_ops(ops_spec, data.dim(), no_const);
    inst.shape = sr::NodeSet::perfect(depth);
    inst.bounds = bf.bounds();
    inst.config = ff.config();
    sr::write_model(inst, out_path);
    return 0;
}

int cmd_bench(const std::string& catalog_path, const std::string& out_path,
              const std::string& csv_path, const std::string& dump_path, std::uint64_t seed,
              int workers, double noise, int n_train, int n_valid, int n_test) {
    std::vector<sr::BenchmarkFormula> catalog =
        catalog_path.empty() ? sr::builtin_catalog() : sr::load_catalog(catalog_path);
    if (!dump_path.empty()) {
        write_text(dump_path, sr::catalog_to_json(catalog).dump(2) + "\n");
        return 0;
    }
    sr::ExperimentConfig config;
    config.seed = seed;
    config.workers = workers;
    config.noise_level = noise;
    config.n_train = n_train;
    config.n_valid = n_valid;
    config.n_test = n_test;
    config.portfolio = sr::ExperimentConfig::default_portfolio();
    sr::BenchReport report = sr::run_benchmark(catalog, config);
    if (!out_path.empty()) write_text(out_path, report.to_json(true).dump(2) + "\n");
    else std::cout << report.to_json(false).dump(2) << "\n";
    if (!csv_path.empty()) write_text(csv_path, report.to_csv());
    std::cout << report.to_csv();
    return 0;
}

int cmd_verify(std::uint64_t seed, bool serial, const std::string& out_path) {
    std::vector<sr::LemmaReport> reports =
        sr::verify_all(seed, serial ? sr::Exec::Serial : sr::Exec::Parallel);
    bool all_ok = true;
    json arr = json::array();
    for (const sr::LemmaReport& r : reports) {
        std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.claim;
        for (const std::string& n : r.notes) std::cout << "  (" << n << ")";
        std::cout << "\n";
        arr.push_back(r.to_json());
        all_ok = all_ok && r.passed;
    }
    if (!out_path.empty()) write_text(out_path, arr.dump(2) + "\n");
    return all_ok ? 0 : 3;
}

int cmd_eval(const std::string& data_path, const std::string& expr_arg, const BoundsFlags& bf) {
    sr::Dataset data = sr::Dataset::read_csv(data_path);
    sr::ExpressionTree tree = sr::parse_expression(read_expr_arg(expr_arg), data.dim());
    double r = sr::rmse(tree, data, bf.bounds());
    std::cout << sr::format_double(r) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"symbolic regression by branch-and-prune tree search"};
    app.require_subcommand(1);

    // solve
    auto* solve = app.add_subcommand("solve", "single restricted solve on a CSV dataset");
    std::string s_data, s_ops = "+,-,*,/,sqrt", s_anchor, s_out;
    int s_depth = 2, s_k1 = 0, s_k2 = 0, s_beta = 0;
    long long s_gamma = 0;
    double s_time = 0;
    std::uint64_t s_seed = 0;
    bool s_noconst = false;
    BoundsFlags s_bf;
    FormulationFlags s_ff;
    solve->add_option("--data", s_data, "dataset CSV (header x1,...,xd,z)")->required();
    solve->add_option("--depth", s_depth, "expression tree depth");
    solve->add_option("--ops", s_ops, "comma list from +,-,*,/,sqrt,exp,log");
    solve->add_flag("--no-const", s_noconst, "exclude the constant operand");
    solve->add_option("--seed", s_seed, "rng seed");
    solve->add_option("--anchor", s_anchor, "anchor expression (or @file)");
    solve->add_option("--k1", s_k1, "minimum distance from the anchor");
    solve->add_option("--k2", s_k2, "maximum distance from the anchor");
    solve->add_option("--beta", s_beta, "fix level relative to the anchor");
    solve->add_option("--gamma", s_gamma, "branch node limit");
    solve->add_option("--time-limit", s_time, "seconds");
    solve->add_option("--out", s_out, "result JSON path");
    s_bf.attach(solve);
    s_ff.attach(solve);

    // strech
    auto* stc = app.add_subcommand("strech", "sequential tree construction heuristic");
    std::string t_data, t_ops = "+,-,*,/,sqrt", t_out, t_log;
    int t_depth = 3, t_init_depth = 2;
    double t_time = 0;
    std::uint64_t t_seed = 0;
    bool t_noconst = false;
    BoundsFlags t_bf;
    FormulationFlags t_ff;
    sr::StrechParams t_params;
    stc->add_option("--data", t_data, "dataset CSV")->required();
    stc->add_option("--depth", t_depth, "full tree depth");
    stc->add_option("--init-depth", t_init_depth, "depth of the initial solve");
    stc->add_option("--ops", t_ops, "comma list from +,-,*,/,sqrt,exp,log");
    stc->add_flag("--no-const", t_noconst, "exclude the constant operand");
    stc->add_option("--seed", t_seed, "rng seed");
    stc->add_option("--k-init", t_params.k_init, "initial neighbor distance");
    stc->add_option("--k-max", t_params.k_max, "maximum neighbor distance");
    stc->add_option("--beta-init", t_params.beta_init, "initial fix level");
    stc->add_option("--beta-max", t_params.beta_max, "maximum fix level");
    stc->add_option("--gamma-init", t_params.gamma_init, "initial node limit");
    stc->add_option("--gamma-max", t_params.gamma_max, "maximum node limit");
    stc->add_option("--epsilon-opt", t_params.epsilon_opt, "stop when the error drops below");
    stc->add_option("--time-limit", t_time, "seconds");
    stc->add_option("--out", t_out, "result JSON path");
    stc->add_option("--log", t_log, "trace log with timings (default: stderr)");
    t_bf.attach(stc);
    t_ff.attach(stc);

    // export
    auto* exp = app.add_subcommand("export", "write the model document (.srmodel.json)");
    std::string e_data, e_ops = "+,-,*,/,sqrt", e_out;
    int e_depth = 2;
    bool e_noconst = false;
    BoundsFlags e_bf;
    FormulationFlags e_ff;
    exp->add_option("--data", e_data, "dataset CSV")->required();
    exp->add_option("--depth", e_depth, "expression tree depth");
    exp->add_option("--ops", e_ops, "comma list from +,-,*,/,sqrt,exp,log");
    exp->add_flag("--no-const", e_noconst, "exclude the constant operand");
    exp->add_option("--out", e_out, "output path")->required();
    e_bf.attach(exp);
    e_ff.attach(exp);

    // bench
    auto* ben = app.add_subcommand("bench", "portfolio benchmark over a formula catalog");
    std::string b_catalog, b_out, b_csv, b_dump;
    std::uint64_t b_seed = 0;
    int b_workers = 0, b_train = 10, b_valid = 30, b_test = 100;
    double b_noise = 1e-4;
    ben->add_option("--catalog", b_catalog, "catalog JSON (default: built-in)");
    ben->add_option("--out", b_out, "report JSON path");
    ben->add_option("--csv", b_csv, "summary CSV path");
    ben->add_option("--dump-catalog", b_dump, "write the catalog JSON and exit");
    ben->add_option("--seed", b_seed, "rng seed");
    ben->add_option("--workers", b_workers, "parallel workers (0 = auto)");
    ben->add_option("--noise", b_noise, "relative gaussian noise level on train z");
    ben->add_option("--n-train", b_train, "training points");
    ben->add_option("--n-valid", b_valid, "validation points");
    ben->add_option("--n-test", b_test, "testing points");

    // verify
    auto* ver = app.add_subcommand("verify", "run the formulation claim checks");
    std::uint64_t v_seed = 12345;
    bool v_serial = false;
    std::string v_out;
    ver->add_option("--seed", v_seed, "rng seed");
    ver->add_flag("--serial", v_serial, "run enumeration kernels serially");
    ver->add_option("--out", v_out, "report JSON path");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate an expression on a dataset, print RMSE");
    std::string x_data, x_expr;
    BoundsFlags x_bf;
    ev->add_option("--data", x_data, "dataset CSV")->required();
    ev->add_option("--expr", x_expr, "expression string (or @file)")->required();
    x_bf.attach(ev);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 64;
    }

    try {
        if (solve->parsed())
            return cmd_solve(s_data, s_depth, s_ops, s_noconst, s_bf, s_ff, s_seed, s_anchor, s_k1,
                             s_k2, s_beta, s_gamma, s_time, s_out);
        if (stc->parsed())
            return cmd_strech(t_data, t_depth, t_init_depth, t_ops, t_noconst, t_bf, t_ff, t_params,
                              t_seed, t_time, t_out, t_log);
        if (exp->parsed()) return cmd_export(e_data, e_depth, e_ops, e_noconst, e_bf, e_ff, e_out);
        if (ben->parsed())
            return cmd_bench(b_catalog, b_out, b_csv, b_dump, b_seed, b_workers, b_noise, b_train,
                             b_valid, b_test);
        if (ver->parsed()) return cmd_verify(v_seed, v_serial, v_out);
        if (ev->parsed()) return cmd_eval(x_data, x_expr, x_bf);
    } catch (const sr::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 64;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 64;
}
