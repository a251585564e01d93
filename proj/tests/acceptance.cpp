// Acceptance gate for the library: thirteen end-to-end checks covering the
// kernel/PCA identity, gradient machinery, slice algebra, training
// equivalences, the geometric bounds, salience ranking, parameter accounting,
// and reproducibility. Run the binary directly to get one PASS/FAIL line per
// criterion; the whole suite is budgeted to finish within ten minutes.
#include "slicefine/diagnostics.hpp"
#include "slicefine/study.hpp"
#include "slicefine/trainer.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <cstdio>
#include <exception>

using namespace slicefine;

namespace {

const auto g_suite_start = std::chrono::steady_clock::now();

double suite_elapsed_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - g_suite_start)
        .count();
}

// Prints the criterion verdict when the test body finishes (including early
// ASSERT exits and unwinds), keyed off the test's recorded failures.
class Criterion {
   public:
    Criterion(int id, const char* name) : id_(id), name_(name) {}
    ~Criterion() {
        const bool ok =
            !::testing::Test::HasFailure() && std::uncaught_exceptions() == 0;
        std::printf("[CRITERION %02d] %s: %s\n", id_, name_, ok ? "PASS" : "FAIL");
        std::fflush(stdout);
    }

   private:
    int id_;
    const char* name_;
};

Vector restricted_grad(const Network& net, const Matrix& x, const Targets& tg,
                       std::size_t layer, const EntryList& entries) {
    ForwardTrace t = forward(net, x);
    BackwardResult b = backward(net, t, tg);
    Vector g(entries.size());
    for (std::size_t c = 0; c < entries.size(); ++c)
        g[c] = b.dW[layer](entries[c].first, entries[c].second);
    return g;
}

Vector column_of(const Matrix& m, std::size_t j) {
    Vector v(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) v[i] = m(i, j);
    return v;
}

// Source-task warm-up with strong weight decay: the backbone keeps only the
// feature directions the binary surrogate task needs, then gets a fresh head
// for the real labels. Leaves a deliberately narrow feature bottleneck.
Network collapse_pretrain(const Dataset& target, const std::vector<std::size_t>& dims,
                          std::uint64_t seed, std::size_t steps, double weight_decay) {
    Rng net_rng = Rng::derive(seed, 0x61636e);
    std::vector<Activation> acts(dims.size() - 1, Activation::Tanh);
    acts.back() = Activation::Identity;
    Network net = Network::init(dims, acts, net_rng);

    Dataset source = source_sign_dataset(target);
    Network src = net;
    replace_head(src, 2, Rng::derive(seed, 0x616373).bits());
    TrainConfig pcfg;
    pcfg.steps = steps;
    pcfg.batch_size = 32;
    pcfg.eval_every = 0;
    pcfg.opt.lr = 1e-2;
    pcfg.opt.weight_decay = weight_decay;
    pcfg.seed = Rng::derive(seed, 0x616370).bits();
    Network out = full_finetune(src, source, pcfg).net;
    replace_head(out, target.num_classes, Rng::derive(seed, 0x616368).bits());
    return out;
}

TrainConfig tune_config(std::size_t steps, std::size_t rank, PolicyKind kind,
                        std::uint64_t seed, std::size_t switch_every = 0) {
    TrainConfig cfg;
    cfg.steps = steps;
    cfg.batch_size = 32;
    cfg.eval_every = 0;
    cfg.opt.lr = 1e-2;
    cfg.opt.weight_decay = 1e-4;
    cfg.policy.kind = kind;
    cfg.policy.rank = rank;
    cfg.policy.mode = SliceMode::Row;
    cfg.policy.switch_every = switch_every == 0 ? steps : switch_every;
    cfg.policy.max_switches = 1000000000;
    cfg.managed = {0};
    cfg.head_trainable = true;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST(Acceptance, C01_KernelIdentity) {
    Criterion banner(1, "kernel_identity");
    Rng rng(101);
    double worst_identity = 0.0, worst_pair = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.index(63);   // samples
        const std::size_t d = 1 + rng.index(64);   // feature dimension
        const double scale = std::pow(10.0, rng.uniform(-2.0, 2.0));
        Matrix H(n, d);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) H(i, j) = scale * rng.normal();

        KernelReport rep = kernel_report(H);
        Matrix Hc = center_features(H);
        Matrix K = matmul(Hc, Hc.transposed());
        const double tol = 1e-10 * (1.0 + K.max_abs());
        EXPECT_LE(rep.identity_error_max, tol) << "n=" << n << " d=" << d;
        worst_identity = std::max(worst_identity, rep.identity_error_max / tol);

        // Matching nonzero spectra from the two independent eigensolves.
        const double lead = std::max(rep.lambda[0], rep.mu[0] / double(n - 1));
        const double cutoff = 1e-5 * lead;
        for (std::size_t i = 0; i < std::min(n, d); ++i) {
            if (rep.lambda[i] <= cutoff) break;
            const double expected = double(n - 1) * rep.lambda[i];
            const double rel = std::abs(rep.mu[i] - expected) / expected;
            EXPECT_LE(rel, 1e-8) << "n=" << n << " d=" << d << " i=" << i;
            worst_pair = std::max(worst_pair, rel);
        }
    }
    std::printf("  identity error <= %.3f of budget, eigenvalue pair rel <= %.2e\n",
                worst_identity, worst_pair);
}

TEST(Acceptance, C02_GradientExactness) {
    Criterion banner(2, "gradient_exactness");
    Rng rng(202);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t depth = 2 + rng.index(4);  // 2..5 layers
        std::vector<std::size_t> dims(depth + 1);
        for (auto& d : dims) d = 16 + rng.index(17);  // 16..32
        const bool classify = trial % 3 != 2;
        std::vector<Activation> acts(depth);
        for (std::size_t l = 0; l < depth; ++l)
            acts[l] = (rng.index(2) == 0) ? Activation::Tanh : Activation::Gelu;
        acts.back() = Activation::Identity;
        Rng net_rng = Rng::derive(303, trial);
        Network net = Network::init(dims, acts, net_rng);

        const std::size_t n = 6;
        Matrix x(dims[0], n);
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < n; ++j) x(i, j) = rng.normal();
        Targets tg;
        if (classify) {
            std::vector<std::size_t> y(n);
            for (auto& v : y) v = rng.index(dims.back());
            tg = Targets::classes(y);
        } else {
            Matrix vals(dims.back(), n);
            for (std::size_t i = 0; i < vals.rows(); ++i)
                for (std::size_t j = 0; j < n; ++j) vals(i, j) = rng.normal();
            tg = Targets::regression(vals);
        }

        ForwardTrace trace = forward(net, x);
        BackwardResult full = backward(net, trace, tg);
        double gmax = 0.0;
        for (const Matrix& g : full.dW) gmax = std::max(gmax, g.max_abs());
        const double skip_floor = 1e-4 * (1.0 + gmax);

        // Fourth-order central stencil: deep tanh/gelu stacks have third
        // derivatives large enough that the plain two-point rule stalls
        // around 1e-5 relative error.
        auto fd_entry = [&](std::size_t layer, std::size_t i, std::size_t j) {
            Network probe = net;
            const double w = probe.layers[layer].W(i, j);
            const double h = 1e-4 * (1.0 + std::abs(w));
            auto at = [&](double v) {
                probe.layers[layer].W(i, j) = v;
                return loss_on(probe, x, tg);
            };
            return (8.0 * (at(w + h) - at(w - h)) - (at(w + 2 * h) - at(w - 2 * h))) /
                   (12.0 * h);
        };

        // Full gradient against central differences on sampled coordinates.
        std::size_t checked = 0;
        for (int draw = 0; draw < 900 && checked < 200; ++draw) {
            const std::size_t layer = rng.index(depth);
            const std::size_t i = rng.index(net.layers[layer].out_dim());
            const std::size_t j = rng.index(net.layers[layer].in_dim());
            const double an = full.dW[layer](i, j);
            if (std::abs(an) < skip_floor) continue;  // below finite-difference noise
            const double fd = fd_entry(layer, i, j);
            const double rel = std::abs(fd - an) / std::max(std::abs(an), std::abs(fd));
            EXPECT_LE(rel, 1e-6) << "trial " << trial << " layer " << layer;
            ++checked;
        }
        EXPECT_GE(checked, 200u) << "trial " << trial << " found too few live coordinates";

        // Restricted gradient on a row band wide enough to give 200 entries.
        const std::size_t layer = rng.index(depth - 1);
        const std::size_t rows = net.layers[layer].out_dim();
        const std::size_t cols = net.layers[layer].in_dim();
        const std::size_t rank = std::min(rows, (200 + cols - 1) / cols);
        SliceMask mask{layer, SliceMode::Row, rng.index(rows - rank + 1), rank};
        EntryList entries = mask_entries(mask, net.layers[layer].W);
        Vector rg = restricted_grad(net, x, tg, layer, entries);
        std::size_t rchecked = 0;
        for (int draw = 0; draw < 4 * int(entries.size()) && rchecked < 200; ++draw) {
            const std::size_t c = rng.index(entries.size());
            if (std::abs(rg[c]) < skip_floor) continue;
            const double fd = fd_entry(layer, entries[c].first, entries[c].second);
            const double rel =
                std::abs(fd - rg[c]) / std::max(std::abs(rg[c]), std::abs(fd));
            EXPECT_LE(rel, 1e-6) << "trial " << trial << " restricted entry " << c;
            ++rchecked;
        }
        EXPECT_GE(rchecked, 150u) << "trial " << trial;

        // Chain identity: restricted gradient equals the per-sample feature
        // Jacobians applied to the feature gradient.
        Matrix gphi = feature_gradient(net, x, tg, layer);
        Vector via_chain(entries.size(), 0.0);
        for (std::size_t s = 0; s < n; ++s) {
            Matrix J = feature_jacobian_wrt_entries(net, column_of(x, s), layer, entries);
            for (std::size_t c = 0; c < entries.size(); ++c)
                for (std::size_t i = 0; i < J.rows(); ++i)
                    via_chain[c] += J(i, c) * gphi(i, s);
        }
        double num = 0.0, den = 0.0;
        for (std::size_t c = 0; c < entries.size(); ++c) {
            num += (via_chain[c] - rg[c]) * (via_chain[c] - rg[c]);
            den += rg[c] * rg[c];
        }
        EXPECT_LE(std::sqrt(num), 1e-8 * std::max(std::sqrt(den), 1e-30))
            << "trial " << trial;
    }
}

TEST(Acceptance, C03_SliceAlgebraExactness) {
    Criterion banner(3, "slice_algebra_exactness");
    Rng rng(404);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t out = 1 + rng.index(12);
        const std::size_t in = 1 + rng.index(12);
        Layer layer;
        layer.W = Matrix(out, in);
        layer.b = Vector(out);
        layer.act = Activation::Identity;
        for (std::size_t i = 0; i < out; ++i) {
            layer.b[i] = rng.normal();
            for (std::size_t j = 0; j < in; ++j) layer.W(i, j) = rng.normal();
        }
        SliceMask mask;
        mask.mode = rng.index(2) == 0 ? SliceMode::Row : SliceMode::Column;
        const std::size_t dim = slice_dim(layer.W, mask.mode);
        mask.rank = 1 + rng.index(dim);
        mask.position = rng.index(dim - mask.rank + 1);

        SlicedLayer split = partition(layer, mask);
        Layer back = reconstruct(split);
        for (std::size_t i = 0; i < out; ++i) {
            EXPECT_EQ(back.b[i], layer.b[i]);
            for (std::size_t j = 0; j < in; ++j) EXPECT_EQ(back.W(i, j), layer.W(i, j));
        }

        const std::size_t n = 1 + rng.index(4);
        Matrix x(in, n);
        for (std::size_t i = 0; i < in; ++i)
            for (std::size_t j = 0; j < n; ++j) x(i, j) = rng.normal();
        Matrix dense = matmul(layer.W, x);
        for (std::size_t i = 0; i < out; ++i)
            for (std::size_t j = 0; j < n; ++j) dense(i, j) += layer.b[i];
        Matrix split_y = sliced_forward(split, x);
        EXPECT_LE((split_y - dense).max_abs(), 1e-12);
    }
}

TEST(Acceptance, C04_FullRankMatchesFullFinetune) {
    Criterion banner(4, "full_rank_equals_full_finetune");
    Dataset data = gaussian_clusters(16, 4, 40, 5.0, 0.8, 11);
    Rng net_rng(12);
    Network net = Network::init({16, 12, 12, 4},
                                {Activation::Tanh, Activation::Tanh, Activation::Identity},
                                net_rng);
    TrainConfig cfg;
    cfg.steps = 500;
    cfg.batch_size = 32;
    cfg.eval_every = 0;
    cfg.policy.kind = PolicyKind::Static;
    cfg.policy.rank = 12;  // the full row count of both hidden layers
    cfg.policy.mode = SliceMode::Row;
    cfg.managed = {0, 1};
    cfg.head_trainable = true;
    cfg.seed = 77;

    TrainResult sliced = slicefine_train(net, data, cfg);
    TrainResult dense = full_finetune(net, data, cfg);
    double diff = 0.0;
    for (std::size_t l = 0; l < net.depth(); ++l) {
        diff = std::max(diff, (sliced.net.layers[l].W - dense.net.layers[l].W).max_abs());
        for (std::size_t i = 0; i < net.layers[l].b.size(); ++i)
            diff = std::max(diff,
                            std::abs(sliced.net.layers[l].b[i] - dense.net.layers[l].b[i]));
    }
    EXPECT_LE(diff, 1e-10);
    std::printf("  parameter divergence after 500 steps: %.3e\n", diff);
}

TEST(Acceptance, C05_SampledSlicesWinLocally) {
    Criterion banner(5, "local_winner_rate");
    Dataset data = gaussian_clusters(32, 4, 60, 4.0, 1.0, 21);
    Rng net_rng(22);
    Network net = Network::init({32, 24, 16, 4},
                                {Activation::Tanh, Activation::Tanh, Activation::Identity},
                                net_rng);
    // Short warm-up so the model sits mid-descent with live gradients.
    TrainConfig pcfg;
    pcfg.steps = 120;
    pcfg.batch_size = 32;
    pcfg.eval_every = 0;
    pcfg.opt.lr = 5e-3;
    pcfg.seed = 23;
    net = full_finetune(net, data, pcfg).net;

    // Band width from the 90% variance rank of calibration features.
    std::size_t r = 1;
    ForwardTrace trace = forward(net, data.calib.x);
    for (std::size_t l = 0; l + 1 < net.depth(); ++l) {
        KernelReport rep = kernel_report(trace.activations[l + 1].transposed());
        r = std::max(r, rep.k_task_90);
    }
    ASSERT_LE(r, 12u) << "feature rank unexpectedly high for a 4-cluster task";
    std::printf("  slice width r = %zu\n", r);

    const Matrix& x = data.train.x;
    Targets tg = Targets::classes(data.train.labels);
    const double loss0 = loss_on(net, x, tg);
    Rng pick(24);
    int winners = 0;
    for (int trial = 0; trial < 100; ++trial) {
        SliceMask mask;
        mask.layer = pick.index(net.depth() - 1);
        mask.mode = pick.index(2) == 0 ? SliceMode::Row : SliceMode::Column;
        const std::size_t dim = slice_dim(net.layers[mask.layer].W, mask.mode);
        mask.rank = std::min(r, dim);
        mask.position = pick.index(dim - mask.rank + 1);
        EntryList entries = mask_entries(mask, net.layers[mask.layer].W);

        const double L = restricted_smoothness_estimate(net, x, tg, mask.layer, entries);
        if (L <= 0.0) continue;  // dead slice: counts as a non-winner
        bool won = false;
        for (double lr = 0.5 / L; lr > 0.001 / L && !won; lr *= 0.25) {
            Network probe = net;
            for (int step = 0; step < 100; ++step) {
                Vector g = restricted_grad(probe, x, tg, mask.layer, entries);
                for (std::size_t c = 0; c < entries.size(); ++c)
                    probe.layers[mask.layer].W(entries[c].first, entries[c].second) -=
                        lr * g[c];
            }
            won = loss_on(probe, x, tg) < loss0;
        }
        winners += won ? 1 : 0;
    }
    EXPECT_GE(winners, 95);
    std::printf("  %d of 100 sampled slices reduced the full-batch loss\n", winners);
}

TEST(Acceptance, C06_AlignmentChainSlack) {
    Criterion banner(6, "alignment_bound_chain");
    Rng rng(606);
    double worst = 0.0;
    int done = 0;
    for (int trial = 0; trial < 100; ++trial) {
        AlignmentReport rep;
        bool usable = false;
        for (int attempt = 0; attempt < 5 && !usable; ++attempt) {
            const std::size_t d = 4 + rng.index(5);
            const std::size_t h = 4 + rng.index(5);
            const std::size_t c = 2 + rng.index(2);
            Rng net_rng = Rng::derive(707, trial * 8 + attempt);
            Network net = Network::init(
                {d, h, c}, {rng.index(2) == 0 ? Activation::Tanh : Activation::Gelu,
                            Activation::Identity},
                net_rng);
            const std::size_t n = 8 + rng.index(9);
            Matrix x(d, n);
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < n; ++j) x(i, j) = rng.normal();
            std::vector<std::size_t> y(n);
            for (auto& v : y) v = rng.index(c);
            SliceMask mask;
            mask.mode = rng.index(2) == 0 ? SliceMode::Row : SliceMode::Column;
            const std::size_t dim = slice_dim(net.layers[0].W, mask.mode);
            mask.rank = 1 + rng.index(std::min<std::size_t>(4, dim));
            mask.position = rng.index(dim - mask.rank + 1);
            EntryList entries = mask_entries(mask, net.layers[0].W);
            rep = alignment_report(net, x, Targets::classes(y), 0, entries);
            usable = !rep.vanishing_guarantee;
        }
        ASSERT_TRUE(usable) << "could not draw a non-degenerate instance";
        EXPECT_GE(rep.min_triangle_slack, -1e-9);
        EXPECT_GE(rep.min_sigma_slack, -1e-9);
        EXPECT_GE(rep.min_opnorm_slack, -1e-9);
        EXPECT_GE(rep.min_chain_slack, -1e-9);
        worst = std::min({worst, rep.min_triangle_slack, rep.min_sigma_slack,
                          rep.min_opnorm_slack, rep.min_chain_slack});
        ++done;
    }
    std::printf("  %d instances, worst normalized slack %.3e\n", done, worst);
}

TEST(Acceptance, C07_VarianceRankRule) {
    Criterion banner(7, "variance_rank_rule");
    const std::vector<std::size_t> ks{1, 2, 3, 5};
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

    // Part 1: the 99% variance rank of the inputs recovers the latent
    // dimension exactly.
    for (std::size_t k : ks) {
        for (std::uint64_t seed : seeds) {
            Dataset data = low_rank_task(32, k, 600, 1e-3, seed);
            KernelReport rep = kernel_report(data.calib.x.transposed());
            EXPECT_EQ(k_task_tau(rep.lambda, 0.99), k) << "k=" << k << " seed=" << seed;
        }
    }

    // Part 2: moving bands as wide as the latent rank keep up with dense
    // tuning; a band parked two rows narrower does not once the task needs
    // three or more directions.
    for (std::size_t k : ks) {
        std::vector<double> acc_full, acc_match, acc_narrow;
        for (std::uint64_t seed : seeds) {
            Dataset data = low_rank_task(32, k, 600, 1e-3, seed);
            Network start = collapse_pretrain(data, {32, 24, data.num_classes}, seed, 400, 0.3);

            TrainConfig fcfg = tune_config(1500, 1, PolicyKind::Static, 1000 + seed);
            acc_full.push_back(full_finetune(start, data, fcfg).log.final_val_accuracy);

            TrainConfig mcfg = tune_config(1500, k, PolicyKind::CyclicRow, 1000 + seed, 250);
            acc_match.push_back(slicefine_train(start, data, mcfg).log.final_val_accuracy);

            if (k >= 3) {
                TrainConfig ncfg = tune_config(1500, k - 2, PolicyKind::Static, 1000 + seed);
                acc_narrow.push_back(slicefine_train(start, data, ncfg).log.final_val_accuracy);
            }
        }
        const double full = stats::median(acc_full);
        const double match = stats::median(acc_match);
        EXPECT_GE(match, full - 0.02) << "k=" << k;
        std::printf("  k=%zu: full=%.3f r=k:%.3f", k, full, match);
        if (k >= 3) {
            const double narrow = stats::median(acc_narrow);
            EXPECT_LT(narrow, full - 0.02) << "k=" << k;
            std::printf(" r=k-2:%.3f", narrow);
        }
        std::printf("\n");
    }
}

TEST(Acceptance, C08_MovingBeatsParkedNarrowSlice) {
    Criterion banner(8, "dynamic_vs_static_trend");
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::vector<double> acc_static, acc_dynamic;
    for (std::uint64_t seed : seeds) {
        Dataset data = low_rank_task(32, 4, 600, 1e-3, seed);
        Network start = collapse_pretrain(data, {32, 24, data.num_classes}, seed, 400, 0.3);

        TrainConfig scfg = tune_config(600, 1, PolicyKind::Static, 2000 + seed);
        acc_static.push_back(slicefine_train(start, data, scfg).log.final_val_accuracy);

        TrainConfig dcfg = tune_config(600, 1, PolicyKind::CyclicRow, 2000 + seed, 75);
        acc_dynamic.push_back(slicefine_train(start, data, dcfg).log.final_val_accuracy);
    }
    const double s = stats::median(acc_static);
    const double d = stats::median(acc_dynamic);
    EXPECT_GE(d, s);
    std::printf("  width-1 slices: dynamic=%.3f static=%.3f gap=%+.3f\n", d, s, d - s);
}

TEST(Acceptance, C09_SalienceGuidedPruningDegrades) {
    Criterion banner(9, "pruning_monotone_trend");
    const std::vector<double> fractions{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::vector<std::vector<double>> acc_by_fraction(fractions.size());
    for (std::uint64_t seed : seeds) {
        Dataset data = gaussian_clusters(32, 4, 60, 5.0, 0.8, seed);
        Rng net_rng = Rng::derive(seed, 0x397072);
        Network net = Network::init({32, 24, 4}, {Activation::Tanh, Activation::Identity},
                                    net_rng);
        TrainConfig pcfg;
        pcfg.steps = 300;
        pcfg.batch_size = 32;
        pcfg.eval_every = 0;
        pcfg.seed = seed;
        net = full_finetune(net, data, pcfg).net;

        for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
            Network pruned = net;
            prune_backbone(pruned, fractions[fi], data.calib.x);
            Matrix logits = forward(pruned, data.val.x).logits();
            acc_by_fraction[fi].push_back(accuracy(logits, data.val.labels));
        }
    }
    std::vector<double> medians;
    for (auto& col : acc_by_fraction) medians.push_back(stats::median(col));
    const double tau = stats::kendall_tau(fractions, medians);
    EXPECT_LE(tau, 0.0);
    EXPECT_LT(medians.back(), medians.front() - 0.10);
    std::printf("  medians:");
    for (double m : medians) std::printf(" %.3f", m);
    std::printf("  kendall_tau=%+.3f\n", tau);
}

TEST(Acceptance, C10_SliceReinitInsensitivity) {
    Criterion banner(10, "slice_reinit_insensitivity");
    const std::vector<ReinitScheme> schemes{ReinitScheme::Zero, ReinitScheme::Xavier,
                                            ReinitScheme::Kaiming, ReinitScheme::Lecun};
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::vector<double> acc_keep;
    std::vector<std::vector<double>> acc_scheme(schemes.size());
    for (std::uint64_t seed : seeds) {
        Dataset data = gaussian_clusters(32, 4, 60, 5.0, 0.8, seed);
        Rng net_rng = Rng::derive(seed, 0x317265);
        Network net = Network::init({32, 24, 4}, {Activation::Tanh, Activation::Identity},
                                    net_rng);
        TrainConfig pcfg;
        pcfg.steps = 300;
        pcfg.batch_size = 32;
        pcfg.eval_every = 0;
        pcfg.seed = seed;
        net = full_finetune(net, data, pcfg).net;

        SliceMask mask{0, SliceMode::Row, 0, 3};
        TrainConfig cfg = tune_config(300, 3, PolicyKind::Static, 3000 + seed);
        acc_keep.push_back(slicefine_train(net, data, cfg).log.final_val_accuracy);
        for (std::size_t si = 0; si < schemes.size(); ++si) {
            Network fresh = net;
            reinit_slice(fresh, mask, schemes[si], 4000 + seed);
            acc_scheme[si].push_back(slicefine_train(fresh, data, cfg).log.final_val_accuracy);
        }
    }
    const double keep = stats::median(acc_keep);
    std::printf("  keep=%.3f", keep);
    for (std::size_t si = 0; si < schemes.size(); ++si) {
        const double m = stats::median(acc_scheme[si]);
        EXPECT_GE(m, keep - 0.02) << to_string(schemes[si]);
        std::printf(" %s=%.3f", to_string(schemes[si]), m);
    }
    std::printf("\n");
}

TEST(Acceptance, C11_SalienceInvariances) {
    Criterion banner(11, "salience_invariances");
    Rng rng(1111);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t out = 3 + rng.index(8);
        const std::size_t in = 3 + rng.index(8);
        const std::size_t n = 5 + rng.index(12);
        Matrix W(out, in), X(n, in);
        for (std::size_t i = 0; i < out; ++i)
            for (std::size_t j = 0; j < in; ++j) W(i, j) = rng.normal();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < in; ++j) X(i, j) = rng.normal();
        Matrix base = wanda_scores(W, X);

        // Power-of-two rescaling reproduces the scores bit for bit.
        for (double alpha : {0.125, 32.0}) {
            Matrix scaled = W;
            scaled *= alpha;
            Matrix s = wanda_scores(scaled, X);
            for (std::size_t i = 0; i < out; ++i)
                for (std::size_t j = 0; j < in; ++j)
                    EXPECT_EQ(s(i, j), alpha * base(i, j));
        }

        // Any positive rescaling leaves both band rankings unchanged.
        Matrix scaled = W;
        scaled *= 1.7;
        Matrix s = wanda_scores(scaled, X);
        for (SliceMode mode : {SliceMode::Row, SliceMode::Column}) {
            const std::size_t dim = mode == SliceMode::Row ? out : in;
            const std::size_t rank = 1 + rng.index(dim);
            EXPECT_EQ(wanda_slice_ranking(s, mode, rank).order,
                      wanda_slice_ranking(base, mode, rank).order);
        }
    }

    // The category sweep runs end to end: four records per seed, one per
    // selection strategy.
    StudyPlan plan;
    plan.study = "wanda_categories";
    plan.dataset.kind = "gaussian_clusters";
    plan.dataset.dim = 8;
    plan.dataset.classes = 3;
    plan.dataset.per_class = 20;
    plan.dataset.separation = 5.0;
    plan.dataset.noise = 0.5;
    plan.network.dims = {8, 10, 3};
    plan.network.activations = {"tanh", "identity"};
    plan.pretrain_enabled = false;
    plan.finetune.steps = 30;
    plan.finetune.switch_every = 15;
    plan.finetune.rank = 2;
    plan.finetune.managed = {0};
    plan.seeds = {1, 2};
    plan.raw = json{{"study", "wanda_categories"}};
    std::vector<StudyRecord> records = run_study(plan, 1);
    ASSERT_EQ(records.size(), 8u);
    for (std::uint64_t seed : plan.seeds) {
        std::vector<std::string> cats;
        for (const StudyRecord& r : records) {
            if (r.seed != seed) continue;
            ASSERT_FALSE(r.metrics.contains("error")) << r.metrics.dump();
            cats.push_back(r.metrics.at("category").get<std::string>());
        }
        EXPECT_EQ(cats, (std::vector<std::string>{"most", "least", "mixed", "random"}));
    }
}

TEST(Acceptance, C12_ParameterAccounting) {
    Criterion banner(12, "parameter_accounting");
    Rng rng(1212);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t matrices = 1 + rng.index(5);
        std::vector<std::pair<std::size_t, std::size_t>> shapes(matrices);
        std::size_t min_out = 64, min_in = 64;
        for (auto& [out, in] : shapes) {
            out = 1 + rng.index(64);
            in = 1 + rng.index(64);
            min_out = std::min(min_out, out);
            min_in = std::min(min_in, in);
        }

        for (MethodKind method : {MethodKind::SliceFineRow, MethodKind::SliceFineColumn,
                                  MethodKind::FullFinetune, MethodKind::LoraReference}) {
            std::size_t rank = 1;
            if (method == MethodKind::SliceFineRow) rank = 1 + rng.index(min_out);
            if (method == MethodKind::SliceFineColumn) rank = 1 + rng.index(min_in);
            if (method == MethodKind::LoraReference) rank = 1 + rng.index(8);
            ParamCount pc = trainable_param_count(shapes, method, rank);

            // Flag-count oracle: walk actual masks over actual matrices.
            std::size_t flags = 0, extra = 0;
            for (auto [out, in] : shapes) {
                Matrix W(out, in);
                switch (method) {
                    case MethodKind::SliceFineRow: {
                        SliceMask m{0, SliceMode::Row, rng.index(out - rank + 1), rank};
                        flags += mask_entries(m, W).size();
                        break;
                    }
                    case MethodKind::SliceFineColumn: {
                        SliceMask m{0, SliceMode::Column, rng.index(in - rank + 1), rank};
                        flags += mask_entries(m, W).size();
                        break;
                    }
                    case MethodKind::FullFinetune:
                        flags += out * in;
                        break;
                    case MethodKind::LoraReference:
                        flags += rank * (out + in);
                        extra += rank * (out + in);
                        break;
                }
            }
            EXPECT_EQ(pc.trainable, flags) << to_string(method) << " rank " << rank;
            EXPECT_EQ(pc.additional, extra) << to_string(method);
            if (method != MethodKind::LoraReference) EXPECT_EQ(pc.additional, 0u);
        }
    }
}

TEST(Acceptance, C13_DeterminismAndRuntime) {
    Criterion banner(13, "determinism_and_runtime");
    StudyPlan plan;
    plan.study = "rank_sweep";
    plan.dataset.kind = "gaussian_clusters";
    plan.dataset.dim = 8;
    plan.dataset.classes = 3;
    plan.dataset.per_class = 20;
    plan.dataset.separation = 5.0;
    plan.dataset.noise = 0.5;
    plan.network.dims = {8, 10, 3};
    plan.network.activations = {"tanh", "identity"};
    plan.pretrain_enabled = true;
    plan.pretrain.steps = 40;
    plan.finetune.steps = 30;
    plan.finetune.rank = 1;
    plan.finetune.managed = {0};
    plan.grid.ranks = {1, 2};
    plan.grid.include_full_baseline = true;
    plan.seeds = {1, 2};
    plan.raw = json{{"study", "rank_sweep"}};

    auto dump = [](const std::vector<StudyRecord>& rs) {
        std::string out;
        for (const StudyRecord& r : rs) out += record_to_json(r).dump() + "\n";
        return out;
    };
    std::string serial = dump(run_study(plan, 1));
    std::string again = dump(run_study(plan, 1));
    std::string parallel = dump(run_study(plan, 4));
    EXPECT_TRUE(records_equal_modulo_time(serial, again));
    EXPECT_TRUE(records_equal_modulo_time(serial, parallel));

    const double elapsed = suite_elapsed_s();
    EXPECT_LE(elapsed, 600.0);
    std::printf("  suite wall time %.1f s (budget 600 s)\n", elapsed);
}
