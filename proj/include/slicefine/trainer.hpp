#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "slicefine/data.hpp"
#include "slicefine/diagnostics.hpp"
#include "slicefine/matrix.hpp"
#include "slicefine/nn.hpp"
#include "slicefine/optim.hpp"
#include "slicefine/rng.hpp"
#include "slicefine/slice.hpp"

namespace slicefine {

// ---- configuration and logs -------------------------------------------------

struct TrainConfig {
    std::size_t steps = 1000;
    std::size_t batch_size = 32;
    std::size_t eval_every = 100;  // 0: only initial and final evaluations
    AdamWParams opt;
    SchedulePolicy policy;                // masks for the managed layers
    std::vector<std::size_t> managed;     // layer indices updated through masks
    bool head_trainable = true;           // update head weight + bias directly
    std::uint64_t seed = 0;               // drives batching and mask draws
};

struct EvalPoint {
    std::size_t step = 0;  // number of optimizer updates applied so far
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;  // zero for regression tasks
};

struct TrainLog {
    std::vector<EvalPoint> evals;
    double initial_train_loss = 0.0;
    double final_train_loss = 0.0;
    double final_val_loss = 0.0;
    double final_val_accuracy = 0.0;
    double committed_delta_sq = 0.0;  // energy folded into the base at commits
    std::size_t switches_done = 0;
    bool degraded_to_static = false;
    std::size_t steps_run = 0;
    bool head_trained = false;
};

struct TrainResult {
    Network net;
    TrainLog log;
};

namespace detail {

inline Targets subset_targets(const Targets& tg, const std::vector<std::size_t>& idx) {
    if (tg.kind == LossKind::CrossEntropy) {
        std::vector<std::size_t> labels(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) labels[k] = tg.labels[idx[k]];
        return Targets::classes(labels);
    }
    return Targets::regression(gather_columns(tg.values, idx));
}

// Deterministic epoch shuffling: a fresh permutation of the training columns
// every time the previous one is exhausted.
class BatchSampler {
   public:
    BatchSampler(std::size_t n, std::size_t batch, Rng rng)
        : n_(n), batch_(std::min(std::max<std::size_t>(batch, 1), n)), rng_(rng) {
        if (n == 0) throw std::invalid_argument("BatchSampler: empty training split");
        refill();
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> idx;
        idx.reserve(batch_);
        for (std::size_t k = 0; k < batch_; ++k) {
            if (cursor_ == order_.size()) refill();
            idx.push_back(order_[cursor_++]);
        }
        return idx;
    }

   private:
    void refill() {
        order_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
        rng_.shuffle(order_);
        cursor_ = 0;
    }

    std::size_t n_, batch_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

inline EvalPoint evaluate(const Network& net, const Dataset& data, std::size_t step) {
    EvalPoint e;
    e.step = step;
    e.train_loss = loss_on(net, data.train.x, data.train_targets());
    e.val_loss = loss_on(net, data.val.x, data.val_targets());
    if (data.loss == LossKind::CrossEntropy)
        e.val_accuracy = accuracy(forward(net, data.val.x).logits(), data.val.labels);
    return e;
}

// One shared inner loop. Both public entry points and the full fine-tuning
// baseline funnel through here with a prepared schedule state, so "full-rank
// static schedule" and "full fine-tune" are the same instruction stream.
inline TrainResult train_loop(Network net, const Dataset& data, const TrainConfig& cfg,
                              SliceTrainState ts, Rng mask_rng) {
    const std::size_t n_train = data.train.x.cols();
    BatchSampler sampler(n_train, cfg.batch_size, Rng::derive(cfg.seed, 0x6274));
    const Targets train_tg = data.train_targets();

    const std::size_t head_idx = net.depth() - 1;
    const bool head_in_managed =
        std::find(ts.schedule.managed.begin(), ts.schedule.managed.end(), head_idx) !=
        ts.schedule.managed.end();
    EntryList head_entries;
    if (cfg.head_trainable && !head_in_managed) {
        const Matrix& Wh = net.layers[head_idx].W;
        for (std::size_t i = 0; i < Wh.rows(); ++i)
            for (std::size_t j = 0; j < Wh.cols(); ++j) head_entries.push_back({i, j});
    }
    AdamWState head_w_state, head_b_state;

    TrainLog log;
    log.head_trained = cfg.head_trainable;
    log.evals.push_back(evaluate(net, data, 0));
    log.initial_train_loss = log.evals.front().train_loss;

    std::vector<EntryList> entries(ts.schedule.managed.size());
    auto refresh_entries = [&] {
        for (std::size_t k = 0; k < ts.schedule.managed.size(); ++k)
            entries[k] = active_entries(ts.schedule, net, k, cfg.policy);
    };
    refresh_entries();

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<std::size_t> idx = sampler.next();
        Matrix xb = gather_columns(data.train.x, idx);
        Targets tb = subset_targets(train_tg, idx);
        BackwardResult grads = backward(net, forward(net, xb), tb);

        for (std::size_t k = 0; k < ts.schedule.managed.size(); ++k) {
            std::size_t layer = ts.schedule.managed[k];
            adamw_step_restricted(net.layers[layer].W, grads.dW[layer], entries[k], ts.opt[k],
                                  cfg.opt, &ts.increment[k]);
        }
        if (cfg.head_trainable) {
            std::size_t h = head_idx;
            if (!head_in_managed)
                adamw_step_restricted(net.layers[h].W, grads.dW[h], head_entries,
                                      head_w_state, cfg.opt, nullptr);
            adamw_step_vector(net.layers[h].b, grads.db[h], head_b_state, cfg.opt);
        }

        // Commit boundaries stop once the switch budget is spent: from then on
        // the last mask trains statically, moments included.
        const bool budget_left = cfg.policy.max_switches > 0 &&
                                 ts.schedule.switches_done < cfg.policy.max_switches;
        if (cfg.policy.kind != PolicyKind::Static && cfg.policy.switch_every > 0 &&
            budget_left && (step + 1) % cfg.policy.switch_every == 0 &&
            step + 1 < cfg.steps) {
            commit_and_move(net, ts, cfg.policy, mask_rng);
            refresh_entries();
        }

        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps)
            log.evals.push_back(evaluate(net, data, step + 1));
    }

    // fold whatever the live slice accumulated since the last commit
    for (std::size_t k = 0; k < ts.increment.size(); ++k)
        ts.committed_delta_sq[k] +=
            ts.increment[k].frobenius() * ts.increment[k].frobenius();

    log.evals.push_back(evaluate(net, data, cfg.steps));
    log.final_train_loss = log.evals.back().train_loss;
    log.final_val_loss = log.evals.back().val_loss;
    log.final_val_accuracy = log.evals.back().val_accuracy;
    for (double d : ts.committed_delta_sq) log.committed_delta_sq += d;
    log.switches_done = ts.schedule.switches_done;
    log.degraded_to_static = cfg.policy.kind != PolicyKind::Static &&
                             cfg.policy.max_switches > 0 &&
                             ts.schedule.switches_done >= cfg.policy.max_switches;
    log.steps_run = cfg.steps;
    return {std::move(net), std::move(log)};
}

}  // namespace detail

// ---- public entry points ----------------------------------------------------

// Train moving (or static) weight slices of the managed layers, optionally
// together with the classifier head. The backbone outside the visited slices
// is never written.
inline TrainResult slicefine_train(const Network& net, const Dataset& data,
                                   const TrainConfig& cfg) {
    for (std::size_t layer : cfg.managed)
        if (layer >= net.depth())
            throw std::invalid_argument("slicefine_train: managed layer out of range");
    Rng mask_rng = Rng::derive(cfg.seed, 0x6d73);
    SliceTrainState ts = make_train_state(net, cfg.managed, cfg.policy, mask_rng);
    return detail::train_loop(net, data, cfg, std::move(ts), mask_rng);
}

// Update every weight matrix at full rank plus the head bias. Built as a
// static full-width schedule over all layers so it shares the slice code
// path instruction for instruction.
inline TrainResult full_finetune(const Network& net, const Dataset& data, TrainConfig cfg) {
    cfg.managed.clear();
    for (std::size_t l = 0; l < net.depth(); ++l) cfg.managed.push_back(l);
    cfg.policy.kind = PolicyKind::Static;
    cfg.head_trainable = true;  // the head weight runs through the mask path; bias here
    Rng mask_rng = Rng::derive(cfg.seed, 0x6d73);
    SliceTrainState ts;
    ts.schedule.managed = cfg.managed;
    for (std::size_t layer : cfg.managed) {
        const Matrix& W = net.layers[layer].W;
        LayerSchedule ls;
        ls.active = SliceMask{layer, SliceMode::Row, 0, W.rows()};
        ts.schedule.per_layer.push_back(ls);
        ts.increment.emplace_back(W.rows(), W.cols());
        ts.opt.push_back({});
        ts.committed_delta_sq.push_back(0.0);
    }
    return detail::train_loop(net, data, cfg, std::move(ts), mask_rng);
}

// ---- pretraining with feature-geometry audit --------------------------------

struct PretrainReport {
    TrainLog log;
    std::vector<std::size_t> feature_rank;  // per hidden layer, on calibration data
    std::vector<std::size_t> k_task;        // per hidden layer, 90% variance rank
};

// Full fine-tune on the source task, then measure how rich each hidden
// layer's calibration features are: numeric rank of the covariance spectrum
// and the 90%-variance rank.
inline std::pair<Network, PretrainReport> pretrain(const Network& net, const Dataset& data,
                                                   TrainConfig cfg) {
    TrainResult res = full_finetune(net, data, cfg);
    PretrainReport rep;
    rep.log = res.log;
    const Matrix& cx = data.calib.x.cols() > 0 ? data.calib.x : data.train.x;
    ForwardTrace trace = forward(res.net, cx);
    for (std::size_t l = 0; l + 1 < res.net.depth(); ++l) {
        KernelReport kr = kernel_report(trace.activations[l + 1].transposed());
        rep.feature_rank.push_back(numeric_rank(kr.lambda));
        rep.k_task.push_back(kr.k_task_90);
    }
    return {std::move(res.net), std::move(rep)};
}

// ---- pruning ----------------------------------------------------------------

// Zero out the lowest-salience fraction of the hidden weight entries, scored
// by |W_ij| times the input-activation column norm on the calibration batch.
// The head is never pruned. Ties break by (layer, row, column) so the same
// inputs always prune the same coordinates. Returns the number of zeroed
// entries.
inline std::size_t prune_backbone(Network& net, double fraction, const Matrix& calib_x) {
    if (!(fraction >= 0.0) || fraction > 1.0)
        throw std::invalid_argument("prune_backbone: fraction must lie in [0, 1]");
    if (net.depth() < 2) return 0;  // nothing but a head
    ForwardTrace trace = forward(net, calib_x);
    struct Entry {
        double score;
        std::size_t layer, row, col;
    };
    std::vector<Entry> pool;
    for (std::size_t l = 0; l + 1 < net.depth(); ++l) {
        Matrix S = wanda_scores(net.layers[l].W, trace.activations[l].transposed());
        for (std::size_t i = 0; i < S.rows(); ++i)
            for (std::size_t j = 0; j < S.cols(); ++j) pool.push_back({S(i, j), l, i, j});
    }
    std::size_t count = std::size_t(std::llround(fraction * double(pool.size())));
    count = std::min(count, pool.size());
    std::sort(pool.begin(), pool.end(), [](const Entry& a, const Entry& b) {
        if (a.score != b.score) return a.score < b.score;
        if (a.layer != b.layer) return a.layer < b.layer;
        if (a.row != b.row) return a.row < b.row;
        return a.col < b.col;
    });
    for (std::size_t k = 0; k < count; ++k)
        net.layers[pool[k].layer].W(pool[k].row, pool[k].col) = 0.0;
    return count;
}

// ---- slice re-initialization ------------------------------------------------

enum class ReinitScheme { Keep, Zero, Xavier, Kaiming, Lecun };

inline const char* to_string(ReinitScheme s) {
    switch (s) {
        case ReinitScheme::Keep: return "keep_pretrained";
        case ReinitScheme::Zero: return "zero";
        case ReinitScheme::Xavier: return "xavier";
        case ReinitScheme::Kaiming: return "kaiming";
        case ReinitScheme::Lecun: return "lecun";
    }
    return "?";
}

inline ReinitScheme reinit_from_string(const std::string& s) {
    if (s == "keep_pretrained") return ReinitScheme::Keep;
    if (s == "zero") return ReinitScheme::Zero;
    if (s == "xavier") return ReinitScheme::Xavier;
    if (s == "kaiming") return ReinitScheme::Kaiming;
    if (s == "lecun") return ReinitScheme::Lecun;
    throw std::invalid_argument("unknown reinitialization scheme: " + s);
}

// Overwrite one band of a layer with fresh draws (or zeros), leaving every
// other coordinate untouched. Fan sizes come from the full matrix, matching
// how the layer would have been initialized from scratch.
inline void reinit_slice(Network& net, const SliceMask& mask, ReinitScheme scheme,
                         std::uint64_t seed) {
    if (mask.layer >= net.depth())
        throw std::invalid_argument("reinit_slice: layer index out of range");
    if (scheme == ReinitScheme::Keep) return;
    Matrix& W = net.layers[mask.layer].W;
    const double fan_in = double(W.cols());
    const double fan_out = double(W.rows());
    double stddev = 0.0;
    switch (scheme) {
        case ReinitScheme::Xavier: stddev = std::sqrt(2.0 / (fan_in + fan_out)); break;
        case ReinitScheme::Kaiming: stddev = std::sqrt(2.0 / fan_in); break;
        case ReinitScheme::Lecun: stddev = std::sqrt(1.0 / fan_in); break;
        default: break;
    }
    Rng rng(seed);
    for (auto [i, j] : mask_entries(mask, W))
        W(i, j) = scheme == ReinitScheme::Zero ? 0.0 : rng.normal(0.0, stddev);
}

}  // namespace slicefine
