#ifndef SR_BENCH_HPP
#define SR_BENCH_HPP

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sr/search.hpp"
#include "sr/strech.hpp"

namespace sr {

class CatalogError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct BenchmarkFormula {
    std::string name;
    ExpressionTree expr;
    std::vector<std::pair<double, double>> ranges;  // per variable
    int depth = 1;

    int dim() const { return static_cast<int>(ranges.size()); }
};

struct PortfolioItem {
    std::string label;
    FormulationConfig config;
    int depth = 2;
    bool integer_constants = false;
    double c_lo = -2.0, c_up = 2.0;
    double v_lo = -100.0, v_up = 100.0;
    double epsilon = 0.01;
    enum Mode { Exact, Strech } mode = Exact;
    long long gamma_init = 1000;
    long long gamma_max = 100000;
    std::optional<double> time_limit_s;
};

struct ExperimentConfig {
    int n_train = 10;
    int n_valid = 30;
    int n_test = 100;
    double noise_level = 1e-4;  // multiplicative relative gaussian on train z
    std::vector<PortfolioItem> portfolio;
    std::uint64_t seed = 0;
    int workers = 0;  // 0 = hardware default

    static std::vector<PortfolioItem> default_portfolio();
};

struct GeneratedData {
    Dataset train, valid, test;
};

GeneratedData generate(const BenchmarkFormula& formula, const ExperimentConfig& config);

struct CandidateResult {
    std::string item;
    std::optional<ExpressionTree> tree;
    double train_error = std::numeric_limits<double>::infinity();
    double valid_rmse = std::numeric_limits<double>::infinity();
    bool failed = false;
    std::string note;
    double wall_s = 0.0;
};

struct BenchEntry {
    std::string formula;
    int depth = 0;
    std::optional<ExpressionTree> best;
    std::string best_item;
    double valid_rmse = std::numeric_limits<double>::infinity();
    double test_rmse = std::numeric_limits<double>::infinity();
    bool discovered = false;
    double wall_s = 0.0;
    std::vector<CandidateResult> candidates;
};

BenchEntry run_portfolio(const BenchmarkFormula& formula, const ExperimentConfig& config);

/// Numeric equivalence on a seeded 1000-point sample of the truth's ranges:
/// max relative deviation < 1e-6.
bool is_discovered(const ExpressionTree& candidate, const BenchmarkFormula& truth,
                   std::uint64_t seed = 0xD15C0);

/// Root mean squared residual; rows failing a domain guard contribute
/// (v_up - v_lo)^2 to the mean.
double rmse(const ExpressionTree& tree, const Dataset& data, const EvalBounds& bounds);

/// Loose bounds for evaluating ground-truth formulas and equivalence checks.
EvalBounds wide_bounds();

std::vector<BenchmarkFormula> builtin_catalog();
std::vector<BenchmarkFormula> load_catalog(const std::string& path);
nlohmann::ordered_json catalog_to_json(const std::vector<BenchmarkFormula>& catalog);

struct BenchReport {
    std::vector<BenchEntry> entries;

    struct Bucket {
        std::string label;
        int n_formulas = 0;
        int n_discovered = 0;
        double rate_percent() const {
            return n_formulas == 0 ? 0.0 : 100.0 * n_discovered / n_formulas;
        }
    };
    std::vector<Bucket> depth_buckets() const;  // "<=2", "3", ">=4"

    nlohmann::ordered_json to_json(bool include_times) const;
    std::string to_csv() const;
};

BenchReport run_benchmark(const std::vector<BenchmarkFormula>& catalog,
                          const ExperimentConfig& config);

}  // namespace sr

#endif
