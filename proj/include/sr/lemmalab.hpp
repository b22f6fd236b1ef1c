#ifndef SR_LEMMALAB_HPP
#define SR_LEMMALAB_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sr/model.hpp"

namespace sr {

class UniverseTooLarge : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Exec { Serial, Parallel };

/// y-only linear constraint compiled to bit masks over the 𝒴 universe:
/// popcount(y & pos) - popcount(y & neg)  (<=|>=|==)  rhs.
struct MaskConstraint {
    std::uint64_t pos = 0;
    std::uint64_t neg = 0;
    int rhs = 0;
    int sense = 0;  // 0 <=, 1 >=, 2 ==
};

bool mask_feasible(const std::vector<MaskConstraint>& cs, std::uint64_t y);

/// Exhaustive scan of {0,1}^bits restricted to base-feasible points,
/// comparing feasibility under two extra systems. Deterministic for both
/// execution modes (counts are associative, witnesses are minima).
struct EnumPairStats {
    std::uint64_t universe = 0;
    std::uint64_t base_count = 0;
    std::uint64_t a_count = 0;
    std::uint64_t b_count = 0;
    std::uint64_t a_not_b = 0;
    std::uint64_t b_not_a = 0;
    std::uint64_t first_a_not_b = UINT64_MAX;
    std::uint64_t first_b_not_a = UINT64_MAX;
};

EnumPairStats enumerate_pair(const std::vector<MaskConstraint>& base,
                             const std::vector<MaskConstraint>& a,
                             const std::vector<MaskConstraint>& b, int bits, Exec exec);

/// 𝒴-indexed bit layout plus compilation of y-only constraints.
struct YUniverse {
    std::vector<std::pair<int, OpKind>> pairs;
    int bits() const { return static_cast<int>(pairs.size()); }
    int bit_of(int node, OpKind o) const;

    static YUniverse of(const ModelInstance& instance);
    std::vector<MaskConstraint> compile(const ConstraintSystem& sys, const ModelInstance& inst,
                                        const std::vector<Family>& families) const;
    std::string describe(std::uint64_t y) const;
};

struct BigMInstance {
    int m = 2;
    int k = 2;
    std::vector<double> w;
    double bigM = 1.0;

    void validate() const;
};

struct LemmaReport {
    std::string claim;
    std::uint64_t universe = 0;
    std::uint64_t lhs_count = 0;  // |S|
    std::uint64_t rhs_count = 0;  // |T|
    bool subset_holds = false;
    bool strict = false;
    bool equal = false;
    bool passed = false;
    std::vector<std::string> witnesses;
    std::vector<std::string> notes;

    nlohmann::json to_json() const;
};

/// Improved vs baseline tree-defining systems over all binary y.
LemmaReport verify_tree_lemma(const std::vector<OpKind>& ops, const NodeSet& shape,
                              Exec exec = Exec::Parallel);

/// Merged big-M constraint vs separated family: binary equality on unit
/// vectors, sampled continuous inclusion, and the explicit fractional witness.
LemmaReport verify_bigm_lemma(const BigMInstance& inst, int samples, std::uint64_t seed);

/// redun1 vs the three separated caps on y^cst_{2n+1}: binary equality over
/// the tree-feasible set plus a confirmed fractional separator.
LemmaReport verify_redundancy_lemma(const std::vector<OpKind>& ops, const NodeSet& shape,
                                    Exec exec = Exec::Parallel);

/// Rebuilds the single-data-point sqrt example and confirms the fractional
/// point is feasible without the implication cut and violates it by 0.8.
LemmaReport verify_implication_example();

/// Searches a fractional witness separating the merged value-defining
/// constraints from the separated baseline family. Reported, not asserted.
LemmaReport probe_valuedef_witness();

/// The full claim suite run by the verify subcommand.
std::vector<LemmaReport> verify_all(std::uint64_t seed, Exec exec = Exec::Parallel);

/// The instance behind verify_implication_example, exposed for reuse.
ModelInstance implication_example_instance(bool with_implication);
ModelPoint implication_example_point();

}  // namespace sr

#endif
