#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "sr/expr.hpp"

using namespace sr;

namespace {

ExpressionTree pendulum_tree() {
    // (2*pi) * sqrt(x1/x2)
    ExpressionTree t;
    t.shape = NodeSet::perfect(3);
    t.assign.emplace(1, OpKind::times());
    t.assign.emplace(2, OpKind::times());
    t.assign.emplace(3, OpKind::sqrt());
    t.assign.emplace(4, OpKind::constant());
    t.assign.emplace(5, OpKind::constant());
    t.assign.emplace(7, OpKind::divide());
    t.assign.emplace(14, OpKind::var(1));
    t.assign.emplace(15, OpKind::var(2));
    t.consts.emplace(4, 2.0);
    t.consts.emplace(5, 3.141592653589793);
    return t;
}

ExpressionTree ratio_tree(double c) {
    // c / x1
    ExpressionTree t;
    t.shape = NodeSet::perfect(1);
    t.assign.emplace(1, OpKind::divide());
    t.assign.emplace(2, OpKind::constant());
    t.assign.emplace(3, OpKind::var(1));
    t.consts.emplace(2, c);
    return t;
}

ExpressionTree ratio_product_tree(double c) {
    // c / (x1*x2)
    ExpressionTree t;
    t.shape = NodeSet::perfect(2);
    t.assign.emplace(1, OpKind::divide());
    t.assign.emplace(2, OpKind::constant());
    t.assign.emplace(3, OpKind::times());
    t.assign.emplace(6, OpKind::var(1));
    t.assign.emplace(7, OpKind::var(2));
    t.consts.emplace(2, c);
    return t;
}

}  // namespace

TEST_CASE("node sets") {
    CHECK_THROWS_AS(NodeSet::of({1, 2, 3, 4}), std::invalid_argument);
    CHECK_NOTHROW(NodeSet::of({1, 2, 3, 6, 7}));
    CHECK_NOTHROW(NodeSet::of({1, 3}));  // unary chain
    CHECK_THROWS_AS(NodeSet::of({2, 3}), std::invalid_argument);
    CHECK_THROWS_AS(NodeSet::of({1, 6, 7}), std::invalid_argument);

    NodeSet n7 = NodeSet::perfect(2);
    CHECK(n7.size() == 7);
    CHECK(n7.terminals() == std::vector<int>{4, 5, 6, 7});
    CHECK(n7.perfect_nodes() == std::vector<int>{1, 2, 3, 4, 5, 6, 7});

    NodeSet mixed = NodeSet::of({1, 2, 3, 6, 7});
    CHECK(mixed.terminals() == std::vector<int>{2, 6, 7});
    CHECK(mixed.perfect_nodes() == std::vector<int>{2, 3, 6, 7});
    CHECK(mixed.is_full_binary());
    CHECK_FALSE(NodeSet::of({1, 3}).is_full_binary());
}

TEST_CASE("evaluation follows the value semantics") {
    EvalBounds b{-10, 10, -10, 10, 0.01};
    ExpressionTree pend = pendulum_tree();
    pend.validate(b);

    std::vector<double> row{1.0, 9.8};
    double got = evaluate(pend, b, row);
    double expect = 2.0 * 3.141592653589793 * std::sqrt(1.0 / 9.8);
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    CHECK(got == doctest::Approx(2.00709).epsilon(1e-5));
    CHECK(evaluate(pend, b, row) == got);  // deterministic, bit-identical

    ExpressionTree five = ExpressionTree::leaf_const(5.0);
    CHECK(evaluate(five, b, row) == 5.0);

    // zero denominator trips the epsilon guard at the division node
    ExpressionTree ratio;
    ratio.shape = NodeSet::perfect(1);
    ratio.assign.emplace(1, OpKind::divide());
    ratio.assign.emplace(2, OpKind::var(1));
    ratio.assign.emplace(3, OpKind::var(2));
    std::vector<double> bad{1.0, 0.0};
    CHECK_THROWS_AS(evaluate(ratio, b, bad), DomainError);
    try {
        evaluate(ratio, b, bad);
    } catch (const DomainError& e) {
        CHECK(e.node() == 1);
        CHECK(e.op() == "/");
    }

    // both division children are guarded, numerator side included
    std::vector<double> tiny_num{0.05, 1.0};
    CHECK_THROWS_AS(evaluate(ratio, b, tiny_num), DomainError);

    ExpressionTree root;
    root.shape = NodeSet::of({1, 3});
    root.assign.emplace(1, OpKind::sqrt());
    root.assign.emplace(3, OpKind::var(1));
    std::vector<double> small{0.005};
    CHECK_THROWS_AS(evaluate(root, b, small), DomainError);
    std::vector<double> fine{0.04};
    CHECK(evaluate(root, b, fine) == doctest::Approx(0.2));

    ExpressionTree ex;
    ex.shape = NodeSet::of({1, 3});
    ex.assign.emplace(1, OpKind::exp());
    ex.assign.emplace(3, OpKind::var(1));
    std::vector<double> big{3.0};
    CHECK_THROWS_AS(evaluate(ex, b, big), RangeError);  // e^3 > v_up
    std::vector<double> ok{1.0};
    CHECK(evaluate(ex, b, ok) == doctest::Approx(std::exp(1.0)));
}

TEST_CASE("distance counts structural differences only") {
    ExpressionTree a = ratio_tree(2.0);
    a.shape = NodeSet::perfect(2);
    ExpressionTree bb = ratio_product_tree(1.5);
    CHECK(distance(a, bb) == 3);
    CHECK(distance(bb, a) == 3);
    CHECK(distance(a, a) == 0);

    ExpressionTree a2 = ratio_tree(7.5);
    a2.shape = a.shape;
    CHECK(distance(a, a2) == 0);  // constant value changes are free
}

TEST_CASE("distance is a pseudometric on the small universe") {
    // all trees on N = [3] over {+, x1, cst}
    std::vector<ExpressionTree> trees;
    {
        ExpressionTree t = ExpressionTree::leaf_var(1);
        t.shape = NodeSet::perfect(1);
        trees.push_back(t);
        ExpressionTree c = ExpressionTree::leaf_const(1.0);
        c.shape = NodeSet::perfect(1);
        trees.push_back(c);
        std::vector<OpKind> leaves{OpKind::var(1), OpKind::constant()};
        for (const OpKind& l : leaves)
            for (const OpKind& r : leaves) {
                ExpressionTree p;
                p.shape = NodeSet::perfect(1);
                p.assign.emplace(1, OpKind::plus());
                p.assign.emplace(2, l);
                p.assign.emplace(3, r);
                if (l.is_const()) p.consts.emplace(2, 0.5);
                if (r.is_const()) p.consts.emplace(3, 0.5);
                p.validate();
                trees.push_back(p);
            }
    }
    REQUIRE(trees.size() == 6);
    for (const auto& x : trees)
        for (const auto& y : trees) {
            CHECK(distance(x, y) == distance(y, x));
            if (&x == &y) CHECK(distance(x, y) == 0);
            for (const auto& z : trees)
                CHECK(distance(x, z) <= distance(x, y) + distance(y, z));
        }
    // zero distance iff identical structural assignment
    for (const auto& x : trees)
        for (const auto& y : trees) {
            bool same = x.assign.size() == y.assign.size();
            if (same)
                for (const auto& [n, o] : x.assign)
                    if (!y.assign.count(n) || !(y.assign.at(n) == o)) same = false;
            CHECK((distance(x, y) == 0) == same);
        }
}

TEST_CASE("render and parse") {
    ExpressionTree pend = pendulum_tree();
    CHECK(render(pend) == "((2*3.141592653589793)*sqrt((x1/x2)))");

    ExpressionTree back = parse_expression(render(pend), 2);
    CHECK(distance(pend, back) == 0);
    CHECK(back.consts.at(5) == 3.141592653589793);

    ExpressionTree v = parse_expression("x1", 3);
    CHECK(v.node_count() == 1);
    CHECK(v.op(1).is_var());
    CHECK(v.op(1).var_index() == 1);

    CHECK_THROWS_AS(parse_expression("sqrt(", 1), ParseError);
    CHECK_THROWS_AS(parse_expression("x9", 2), ParseError);
    CHECK_THROWS_AS(parse_expression("cbrt(x1)", 1), ParseError);
    CHECK_THROWS_AS(parse_expression("x1 +", 1), ParseError);

    // associativity normalization: a+b+c == (a+b)+c
    ExpressionTree left = parse_expression("x1+x2+x3", 3);
    ExpressionTree expl = parse_expression("(x1+x2)+x3", 3);
    CHECK(distance(left, expl) == 0);

    ExpressionTree neg = parse_expression("-1.5*x1", 1);
    EvalBounds b;
    std::vector<double> row{2.0};
    CHECK(evaluate(neg, b, row) == doctest::Approx(-3.0));
}

TEST_CASE("tree counting and the depth bound") {
    using boost::multiprecision::cpp_int;
    CHECK(count_trees(1, 1, 0) == 1);
    CHECK(count_trees(2, 2, 1) == 10);
    CHECK(count_trees(2, 2, 2) == 202);
    CHECK(count_trees(2, 2, 2) >= cpp_int(128));

    // bound T_D >= (B*d)^(2^D) / B for d, B in [1,3], D in [0,3]
    for (int d = 1; d <= 3; ++d)
        for (int B = 1; B <= 3; ++B)
            for (int D = 0; D <= 3; ++D) {
                cpp_int t = count_trees(d, B, D);
                cpp_int lhs = t * B;
                cpp_int rhs = 1;
                cpp_int base = B * d;
                for (int e = 0; e < (1 << D); ++e) rhs *= base;
                CHECK(lhs >= rhs);
            }

    // exhaustive cross-check at D <= 2: enumerate assignment trees directly
    auto enumerate = [](int d, int B, int D) {
        // trees of depth exactly <= D, binary ops + variable leaves
        std::function<long long(int)> count = [&](int depth) -> long long {
            long long leaves = d;
            if (depth == 0) return leaves;
            long long sub = count(depth - 1);
            return leaves + 1ll * B * sub * sub;
        };
        (void)count;
        // independent: explicit structure generation over the perfect shape
        std::function<std::vector<std::string>(int)> gen = [&](int depth) {
            std::vector<std::string> out;
            for (int j = 1; j <= d; ++j) out.push_back("x" + std::to_string(j));
            if (depth == 0) return out;
            auto sub = gen(depth - 1);
            for (int op = 0; op < B; ++op)
                for (const auto& l : sub)
                    for (const auto& r : sub)
                        out.push_back("(" + l + "#" + std::to_string(op) + r + ")");
            return out;
        };
        auto all = gen(D);
        std::set<std::string> uniq(all.begin(), all.end());
        return static_cast<long long>(uniq.size());
    };
    for (int d = 1; d <= 3; ++d)
        for (int B = 1; B <= 3; ++B)
            for (int D = 0; D <= 2; ++D)
                CHECK(count_trees(d, B, D) == cpp_int(enumerate(d, B, D)));
}

TEST_CASE("dataset csv and sign profiles") {
    Dataset ds;
    ds.x = {{1.0, -2.0, 0.0}, {3.0, -1.0, 2.0}};
    ds.z = {4.0, 5.0};
    CHECK(ds.cols_positive() == std::vector<int>{1, 3});
    CHECK(ds.cols_negative() == std::vector<int>{2});
    CHECK(ds.cols_zero() == std::vector<int>{3});

    auto path = std::filesystem::temp_directory_path() / "sr_test_ds.csv";
    ds.write_csv(path.string());
    Dataset back = Dataset::read_csv(path.string());
    CHECK(back.n() == 2);
    CHECK(back.dim() == 3);
    CHECK(back.x[0][1] == -2.0);
    CHECK(back.z[1] == 5.0);
    std::filesystem::remove(path);

    std::ofstream bad(path);
    bad << "a,b\n1,2\n";
    bad.close();
    CHECK_THROWS(Dataset::read_csv(path.string()));
    std::filesystem::remove(path);
}

TEST_CASE("tree validation") {
    ExpressionTree t;
    t.shape = NodeSet::perfect(1);
    t.assign.emplace(1, OpKind::plus());
    t.assign.emplace(2, OpKind::var(1));
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);  // binary missing right child
    t.assign.emplace(3, OpKind::var(1));
    CHECK_NOTHROW(t.validate());

    ExpressionTree c;
    c.shape = NodeSet::perfect(0);
    c.assign.emplace(1, OpKind::constant());
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);  // missing constant value
    c.consts.emplace(1, 5.0);
    CHECK_NOTHROW(c.validate());
    EvalBounds b;
    CHECK_THROWS_AS(c.validate(b), std::invalid_argument);  // 5 outside [-2, 2]
}
