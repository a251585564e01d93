#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "slicefine/eig.hpp"
#include "slicefine/optim.hpp"

using namespace slicefine;

namespace {

EntryList all_entries(std::size_t r, std::size_t c) {
    EntryList e;
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) e.emplace_back(i, j);
    return e;
}

}  // namespace

TEST(AdamW, FirstStepMovesAgainstGradient) {
    Matrix w(1, 1);
    Matrix g(1, 1);
    g(0, 0) = 0.7;
    AdamWState st;
    AdamWParams p;
    adamw_step_restricted(w, g, all_entries(1, 1), st, p);
    // w was 0, so decay contributes nothing; mhat/vhat cancel to sign(g)
    EXPECT_NEAR(w(0, 0), -p.lr * 0.7 / (0.7 + p.eps), 1e-15);
    EXPECT_LT(w(0, 0), 0.0);
}

TEST(AdamW, ZeroGradientAppliesOnlyDecay) {
    Matrix w(1, 1);
    w(0, 0) = 2.0;
    Matrix g(1, 1);
    AdamWState st;
    AdamWParams p;
    adamw_step_restricted(w, g, all_entries(1, 1), st, p);
    EXPECT_NEAR(w(0, 0), 2.0 * (1.0 - p.lr * p.weight_decay), 1e-15);
}

TEST(AdamW, ThreeStepsMatchScalarOracle) {
    // quadratic f(w) = 0.5*(w - 3)^2, gradient w - 3
    Matrix w(1, 1);
    w(0, 0) = 1.0;
    AdamWState st;
    AdamWParams p;
    oracles::ScalarAdamW oracle;  // same defaults
    double wo = 1.0;
    for (int step = 0; step < 3; ++step) {
        Matrix g(1, 1);
        g(0, 0) = w(0, 0) - 3.0;
        double go = wo - 3.0;
        adamw_step_restricted(w, g, all_entries(1, 1), st, p);
        wo = oracle.step(wo, go);
        ASSERT_NEAR(w(0, 0), wo, 1e-12) << "step " << step;
    }
}

TEST(AdamW, RestrictionNeverTouchesOutsideCoordinates) {
    Rng rng(40);
    Matrix w = oracles::random_matrix(rng, 5, 4);
    Matrix g = oracles::random_matrix(rng, 5, 4);
    Matrix before = w;
    EntryList entries = {{1, 0}, {1, 1}, {3, 2}};
    AdamWState st;
    AdamWParams p;
    Matrix inc(5, 4);
    for (int step = 0; step < 10; ++step) adamw_step_restricted(w, g, entries, st, p, &inc);
    std::size_t touched = 0;
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            bool in = (i == 1 && j <= 1) || (i == 3 && j == 2);
            if (in) {
                EXPECT_NE(w(i, j), before(i, j));
                EXPECT_NEAR(inc(i, j), w(i, j) - before(i, j), 1e-15);
                ++touched;
            } else {
                EXPECT_EQ(w(i, j), before(i, j));  // bit-identical
                EXPECT_EQ(inc(i, j), 0.0);
            }
        }
    EXPECT_EQ(touched, 3u);
    EXPECT_EQ(st.m1.size(), 3u);
    EXPECT_EQ(st.steps, 10);
}

TEST(AdamW, NonFiniteGradientThrowsWithStepIndex) {
    Matrix w(2, 2), g(2, 2);
    AdamWState st;
    AdamWParams p;
    adamw_step_restricted(w, g, all_entries(2, 2), st, p);
    g(1, 1) = std::nan("");
    try {
        adamw_step_restricted(w, g, all_entries(2, 2), st, p);
        FAIL() << "expected divergence error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("step 2"), std::string::npos);
    }
}

TEST(AdamW, VectorVariantTracksMatrixVariant) {
    // a 1-row matrix and a vector with the same data must evolve identically
    Matrix w(1, 3);
    Vector b = {0.5, -1.0, 2.0};
    for (std::size_t j = 0; j < 3; ++j) w(0, j) = b[j];
    Matrix gm(1, 3);
    Vector gv = {0.3, -0.2, 0.9};
    for (std::size_t j = 0; j < 3; ++j) gm(0, j) = gv[j];
    AdamWState s1, s2;
    AdamWParams p;
    for (int step = 0; step < 5; ++step) {
        adamw_step_restricted(w, gm, all_entries(1, 3), s1, p);
        adamw_step_vector(b, gv, s2, p);
    }
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(w(0, j), b[j]);
}

TEST(Sgd, PlainStepAndRestriction) {
    Matrix w(2, 2), g(2, 2);
    g(0, 0) = 1.0;
    g(1, 1) = -2.0;
    SgdParams p;
    p.lr = 0.1;
    Matrix inc(2, 2);
    sgd_step_restricted(w, g, {{0, 0}}, p, &inc);
    EXPECT_NEAR(w(0, 0), -0.1, 1e-15);
    EXPECT_EQ(w(1, 1), 0.0);  // not in the entry list
    EXPECT_NEAR(inc(0, 0), -0.1, 1e-15);
}

TEST(Sgd, DescentBelowInverseSmoothness) {
    // L(w) = 0.5 w^T A w with PSD A: smoothness = lambda_max(A); one SGD step
    // with lr < 1/lambda_max strictly decreases L from any nonzero start.
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng = Rng::derive(4200, seed);
        Matrix b = oracles::random_matrix(rng, 4, 4);
        Matrix A = matmul(b.transposed(), b);  // PSD
        EigResult e = sym_eig(A);
        double lmax = e.values[0];

        Matrix w(4, 1);
        for (std::size_t i = 0; i < 4; ++i) w(i, 0) = rng.normal();
        auto loss = [&](const Matrix& v) {
            Matrix av = matmul(A, v);
            double s = 0.0;
            for (std::size_t i = 0; i < 4; ++i) s += v(i, 0) * av(i, 0);
            return 0.5 * s;
        };
        Matrix grad = matmul(A, w);
        double before = loss(w);
        SgdParams p;
        p.lr = 0.9 / lmax;
        sgd_step_restricted(w, grad, all_entries(4, 1), p);
        EXPECT_LT(loss(w), before);
    }
}

TEST(Determinism, AdamWBitIdenticalReruns) {
    Rng rng(41);
    Matrix w0 = oracles::random_matrix(rng, 3, 3);
    Matrix g = oracles::random_matrix(rng, 3, 3);
    auto run = [&]() {
        Matrix w = w0;
        AdamWState st;
        AdamWParams p;
        for (int i = 0; i < 25; ++i) adamw_step_restricted(w, g, all_entries(3, 3), st, p);
        return w;
    };
    EXPECT_TRUE(run() == run());
}
