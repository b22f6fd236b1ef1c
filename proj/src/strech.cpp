#include "sr/strech.hpp"

#include <chrono>

#include <nlohmann/json.hpp>

#include "sr/rng.hpp"

namespace sr {

using json = nlohmann::json;
using clock_type = std::chrono::steady_clock;

void StrechParams::validate() const {
    if (k_init > k_max || beta_init > beta_max || gamma_init > gamma_max)
        throw std::invalid_argument("schedule parameters out of order");
    if (k_init < 0 || beta_init < 1 || gamma_init < 1)
        throw std::invalid_argument("schedule parameters must be positive");
    for (int n : init_shape.nodes())
        if (!full_shape.contains(n))
            throw std::invalid_argument("init shape must be contained in the full shape");
}

std::string Trace::to_json_lines(bool include_time) const {
    std::string out;
    for (const TraceEntry& e : entries) {
        json j;
        j["iteration"] = e.iteration;
        j["incumbent"] = e.incumbent;
        j["update"] = e.update;
        j["train_error"] = e.train_error;
        if (include_time) j["time_spent_s"] = e.time_spent_s;
        out += j.dump();
        out += "\n";
    }
    return out;
}

json Trace::to_json(bool include_time) const {
    json arr = json::array();
    for (const TraceEntry& e : entries) {
        json j;
        j["iteration"] = e.iteration;
        j["incumbent"] = e.incumbent;
        j["update"] = e.update;
        j["train_error"] = e.train_error;
        if (include_time) j["time_spent_s"] = e.time_spent_s;
        arr.push_back(std::move(j));
    }
    return arr;
}

namespace {

struct ImproveCtx {
    std::uint64_t calls = 0;
    std::optional<clock_type::time_point> deadline;

    bool expired() const { return deadline && clock_type::now() >= *deadline; }
    std::optional<double> remaining() const {
        if (!deadline) return std::nullopt;
        double s = std::chrono::duration<double>(*deadline - clock_type::now()).count();
        return std::max(s, 0.0);
    }
};

SolveResult improve_impl(const ModelInstance& instance, const SolveResult& incumbent,
                         const StrechParams& params, ImproveCtx& ctx) {
    if (!incumbent.tree) throw InstanceError("improve needs an incumbent tree");
    ExpressionTree anchor = *incumbent.tree;
    anchor.shape = instance.shape;

    int k1 = 0, k2 = params.k_init, beta = params.beta_init;
    long long gamma = params.gamma_init;

    auto restricted = [&](int lo, int hi, std::optional<int> fix, long long nodes) {
        SearchParams sp;
        sp.node_limit = nodes;
        sp.time_limit_s = ctx.remaining();
        sp.improve_factor = params.improve_factor;
        sp.epsilon_opt = params.epsilon_opt;
        sp.distance = DistanceRestriction{anchor, lo, hi};
        sp.fix_level = fix;
        sp.seed = Rng::derive(params.seed, ctx.calls++);
        sp.stop = params.stop;
        return res_minlp(instance, sp, anchor);
    };

    while (true) {
        if (ctx.expired() || (params.stop && params.stop->load())) return incumbent;
        SolveResult r = restricted(k1, k2, beta, gamma);
        if (r.tree && r.train_error < incumbent.train_error) return r;
        if (r.status == SolveStatus::NodeLimit && 10 * gamma <= params.gamma_max) {
            gamma *= 10;
            continue;
        }
        // refit the incumbent's constants before moving the window
        SolveResult refit = restricted(0, 0, std::nullopt, params.gamma_max);
        if (refit.tree && refit.train_error < incumbent.train_error) return refit;
        k1 = k2;
        k2 = k2 + 2;
        if (k2 > params.k_max) {
            k1 = 0;
            k2 = params.k_init;
            beta += 1;
            if (beta > params.beta_max) return incumbent;
        }
    }
}

}  // namespace

SolveResult improve(const ModelInstance& instance, const SolveResult& incumbent,
                    const StrechParams& params) {
    params.validate();
    ImproveCtx ctx;
    if (params.time_limit_s)
        ctx.deadline = clock_type::now() + std::chrono::duration_cast<clock_type::duration>(
                                               std::chrono::duration<double>(*params.time_limit_s));
    return improve_impl(instance, incumbent, params, ctx);
}

std::pair<SolveResult, Trace> strech(const ModelInstance& instance, const StrechParams& params) {
    params.validate();
    instance.validate();
    auto t0 = clock_type::now();
    ImproveCtx ctx;
    if (params.time_limit_s)
        ctx.deadline = t0 + std::chrono::duration_cast<clock_type::duration>(
                                std::chrono::duration<double>(*params.time_limit_s));

    ModelInstance init_instance = instance;
    init_instance.shape = params.init_shape;

    SearchParams sp0;
    sp0.epsilon_opt = params.epsilon_opt;
    sp0.seed = Rng::derive(params.seed, ctx.calls++);
    sp0.stop = params.stop;
    sp0.time_limit_s = ctx.remaining();
    SolveResult inc = res_minlp(init_instance, sp0);

    Trace trace;
    auto spent = [&] { return std::chrono::duration<double>(clock_type::now() - t0).count(); };
    if (!inc.tree) return {inc, trace};

    {
        ExpressionTree widened = *inc.tree;
        widened.shape = instance.shape;
        inc.tree = widened;
    }
    trace.entries.push_back({1, render(*inc.tree), "initial", inc.train_error, spent()});

    int iteration = 1;
    while (true) {
        if (inc.train_error < params.epsilon_opt) break;
        if (ctx.expired() || (params.stop && params.stop->load())) break;
        auto it0 = clock_type::now();
        SolveResult next = improve_impl(instance, inc, params, ctx);
        double it_s = std::chrono::duration<double>(clock_type::now() - it0).count();
        if (!next.tree || !(next.train_error < inc.train_error)) break;
        ++iteration;
        int delta = distance(*inc.tree, *next.tree);
        std::string kind =
            delta == 0 ? "constant" : "structure(delta=" + std::to_string(delta) + ")";
        inc = next;
        trace.entries.push_back({iteration, render(*inc.tree), kind, inc.train_error, it_s});
    }
    return {inc, trace};
}

}  // namespace sr
