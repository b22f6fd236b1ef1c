#ifndef SR_STRECH_HPP
#define SR_STRECH_HPP

#include "sr/search.hpp"

namespace sr {

struct StrechParams {
    int k_init = 2;
    int k_max = 6;
    int beta_init = 1;
    int beta_max = 3;
    long long gamma_init = 1000;
    long long gamma_max = 100000;
    double epsilon_opt = 1e-12;
    std::optional<double> time_limit_s;
    NodeSet init_shape = NodeSet::perfect(2);
    NodeSet full_shape = NodeSet::perfect(3);
    double improve_factor = 0.999;
    std::uint64_t seed = 0;
    std::shared_ptr<std::atomic<bool>> stop;

    void validate() const;
};

struct TraceEntry {
    int iteration;
    std::string incumbent;
    std::string update;  // "initial", "constant", "structure(delta=k)"
    double train_error;
    double time_spent_s;
};

struct Trace {
    std::vector<TraceEntry> entries;

    /// One JSON object per line; timings only when include_time is set.
    std::string to_json_lines(bool include_time) const;
    nlohmann::json to_json(bool include_time) const;
};

/// One round of the local-branching escalation schedule around the incumbent:
/// distance windows (k1,k2] widened by 2 up to k_max, node budgets gamma
/// escalated x10 up to gamma_max, fix level beta deepened up to beta_max.
/// Returns the first strict improvement found, or the incumbent unchanged.
SolveResult improve(const ModelInstance& instance, const SolveResult& incumbent,
                    const StrechParams& params);

std::pair<SolveResult, Trace> strech(const ModelInstance& instance, const StrechParams& params);

}  // namespace sr

#endif
