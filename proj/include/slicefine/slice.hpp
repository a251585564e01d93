#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "slicefine/matrix.hpp"
#include "slicefine/nn.hpp"
#include "slicefine/optim.hpp"
#include "slicefine/rng.hpp"

namespace slicefine {

enum class SliceMode { Row, Column };

inline const char* to_string(SliceMode m) { return m == SliceMode::Row ? "row" : "column"; }

inline SliceMode slice_mode_from_string(const std::string& s) {
    if (s == "row") return SliceMode::Row;
    if (s == "column") return SliceMode::Column;
    throw std::invalid_argument("unknown slice mode: '" + s + "'");
}

// A contiguous band of rows or columns of one layer's weight matrix. The
// stored position may exceed the admissible range; it is clamped to
// dim - rank wherever the mask is applied, never rejected.
struct SliceMask {
    std::size_t layer = 0;
    SliceMode mode = SliceMode::Row;
    std::size_t position = 0;
    std::size_t rank = 1;
};

// Dimension a mask slides along for a given weight matrix.
inline std::size_t slice_dim(const Matrix& W, SliceMode mode) {
    return mode == SliceMode::Row ? W.rows() : W.cols();
}

inline std::size_t clamp_position(std::size_t position, std::size_t dim, std::size_t rank) {
    if (rank == 0 || rank > dim)
        throw std::invalid_argument("slice rank must be in [1, dim]");
    return std::min(position, dim - rank);
}

// Slice entries in row-major order within the band; this ordering is the
// contract for gradient gathers, Jacobian columns and optimizer moments.
inline std::vector<std::pair<std::size_t, std::size_t>> mask_entries(const SliceMask& mask,
                                                                     const Matrix& W) {
    const std::size_t dim = slice_dim(W, mask.mode);
    const std::size_t p = clamp_position(mask.position, dim, mask.rank);
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (mask.mode == SliceMode::Row) {
        out.reserve(mask.rank * W.cols());
        for (std::size_t i = p; i < p + mask.rank; ++i)
            for (std::size_t j = 0; j < W.cols(); ++j) out.emplace_back(i, j);
    } else {
        out.reserve(W.rows() * mask.rank);
        for (std::size_t i = 0; i < W.rows(); ++i)
            for (std::size_t j = p; j < p + mask.rank; ++j) out.emplace_back(i, j);
    }
    return out;
}

// W split into the frozen block before the slice (A), the trainable band (T)
// and the frozen block after it (B), along the mask's mode axis.
struct SlicedLayer {
    Matrix A, T, B;
    Vector bias;
    SliceMode mode = SliceMode::Row;
    std::size_t a_end = 0;  // clamped slice start
    std::size_t t_end = 0;  // clamped slice end
    Activation act = Activation::Identity;
};

inline SlicedLayer partition(const Layer& layer, const SliceMask& mask) {
    const std::size_t dim = slice_dim(layer.W, mask.mode);
    const std::size_t p = clamp_position(mask.position, dim, mask.rank);
    SlicedLayer s;
    s.mode = mask.mode;
    s.a_end = p;
    s.t_end = p + mask.rank;
    s.bias = layer.b;
    s.act = layer.act;
    if (mask.mode == SliceMode::Row) {
        s.A = layer.W.block(0, s.a_end, 0, layer.W.cols());
        s.T = layer.W.block(s.a_end, s.t_end, 0, layer.W.cols());
        s.B = layer.W.block(s.t_end, layer.W.rows(), 0, layer.W.cols());
    } else {
        s.A = layer.W.block(0, layer.W.rows(), 0, s.a_end);
        s.T = layer.W.block(0, layer.W.rows(), s.a_end, s.t_end);
        s.B = layer.W.block(0, layer.W.rows(), s.t_end, layer.W.cols());
    }
    return s;
}

inline Layer reconstruct(const SlicedLayer& s) {
    Layer out;
    out.b = s.bias;
    out.act = s.act;
    if (s.mode == SliceMode::Row) {
        out.W = Matrix(s.A.rows() + s.T.rows() + s.B.rows(), s.T.cols());
        out.W.set_block(0, 0, s.A);
        out.W.set_block(s.a_end, 0, s.T);
        out.W.set_block(s.t_end, 0, s.B);
    } else {
        out.W = Matrix(s.T.rows(), s.A.cols() + s.T.cols() + s.B.cols());
        out.W.set_block(0, 0, s.A);
        out.W.set_block(0, s.a_end, s.T);
        out.W.set_block(0, s.t_end, s.B);
    }
    return out;
}

// Linear layer output from the three partial products, bias added once.
// Matches W x + b to rounding; activation stays with the caller.
inline Matrix sliced_forward(const SlicedLayer& s, const Matrix& x) {
    const std::size_t n = x.cols();
    Matrix y;
    if (s.mode == SliceMode::Column) {
        if (x.rows() != s.A.cols() + s.T.cols() + s.B.cols())
            throw std::invalid_argument("sliced_forward: input rows mismatch");
        y = Matrix(s.T.rows(), n);
        if (s.A.cols() > 0) y += matmul(s.A, x.block(0, s.a_end, 0, n));
        y += matmul(s.T, x.block(s.a_end, s.t_end, 0, n));
        if (s.B.cols() > 0) y += matmul(s.B, x.block(s.t_end, x.rows(), 0, n));
    } else {
        if (x.rows() != s.T.cols())
            throw std::invalid_argument("sliced_forward: input rows mismatch");
        y = Matrix(s.A.rows() + s.T.rows() + s.B.rows(), n);
        if (s.A.rows() > 0) y.set_block(0, 0, matmul(s.A, x));
        y.set_block(s.a_end, 0, matmul(s.T, x));
        if (s.B.rows() > 0) y.set_block(s.t_end, 0, matmul(s.B, x));
    }
    for (std::size_t i = 0; i < y.rows(); ++i)
        for (std::size_t j = 0; j < n; ++j) y(i, j) += s.bias[i];
    return y;
}

// Next start index when a band of width `rank` walks a dimension of size
// `dim`: step by rank; a step that would run past the end but still leaves
// unvisited tail is clamped to the last admissible start (one partial-overlap
// band); a step landing at or beyond dim wraps to 0.
inline std::size_t next_position(std::size_t position, std::size_t dim, std::size_t rank) {
    position = clamp_position(position, dim, rank);
    std::size_t p = position + rank;
    if (p >= dim) return 0;
    if (p > dim - rank) return dim - rank;
    return p;
}

enum class PolicyKind {
    Static,
    CyclicRow,
    CyclicColumn,
    AlternateRowColumn,
    RandomPosition,
    RandomUnstructured,
};

inline const char* to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::Static: return "static";
        case PolicyKind::CyclicRow: return "cyclic_row";
        case PolicyKind::CyclicColumn: return "cyclic_column";
        case PolicyKind::AlternateRowColumn: return "alternate_rc";
        case PolicyKind::RandomPosition: return "random_position";
        case PolicyKind::RandomUnstructured: return "random_unstructured";
    }
    return "?";
}

inline PolicyKind policy_from_string(const std::string& s) {
    if (s == "static") return PolicyKind::Static;
    if (s == "cyclic_row") return PolicyKind::CyclicRow;
    if (s == "cyclic_column") return PolicyKind::CyclicColumn;
    if (s == "alternate_rc") return PolicyKind::AlternateRowColumn;
    if (s == "random_position") return PolicyKind::RandomPosition;
    if (s == "random_unstructured") return PolicyKind::RandomUnstructured;
    throw std::invalid_argument("unknown schedule policy: '" + s + "'");
}

struct SchedulePolicy {
    PolicyKind kind = PolicyKind::Static;
    std::size_t switch_every = 500;  // steps between commits (N)
    std::size_t max_switches = 0;    // switch budget (K); 0 behaves as static
    std::size_t rank = 1;
    std::size_t rank_row = 1;         // AlternateRowColumn only
    std::size_t rank_col = 1;         //
    SliceMode mode = SliceMode::Row;  // Static / RandomPosition band axis
    std::size_t initial_position = 0;
    double budget_fraction = 0.05;  // RandomUnstructured: fraction of entries
};

// Per managed layer: the live mask plus whatever bookkeeping its policy
// needs (cyclic counters per axis, or the explicit 0/1 mask for the
// unstructured policy).
struct LayerSchedule {
    SliceMask active;
    std::size_t next_row_pos = 0;
    std::size_t next_col_pos = 0;
    Matrix unstructured;  // rows x cols 0/1; empty unless RandomUnstructured
    std::size_t unstructured_budget = 0;
};

struct ScheduleState {
    std::vector<std::size_t> managed;  // layer indices into Network::layers
    std::vector<LayerSchedule> per_layer;
    std::size_t switches_done = 0;
    bool degraded_to_static = false;  // switch budget exhausted
};

// Exactly m distinct entries set to 1, drawn uniformly without replacement.
inline Matrix random_unstructured_mask(std::size_t rows, std::size_t cols, std::size_t m,
                                       Rng& rng) {
    if (m > rows * cols)
        throw std::invalid_argument("random_unstructured_mask: budget exceeds entries");
    Matrix mask(rows, cols);
    for (std::size_t flat : rng.subset(rows * cols, m))
        mask(flat / cols, flat % cols) = 1.0;
    return mask;
}

inline std::size_t unstructured_budget(const Matrix& W, double fraction) {
    if (!(fraction >= 0.0) || fraction > 1.0)
        throw std::invalid_argument("budget_fraction must be in [0, 1]");
    auto m = std::size_t(std::llround(fraction * double(W.size())));
    return std::max<std::size_t>(1, std::min(m, W.size()));
}

inline ScheduleState make_schedule(const Network& net, const std::vector<std::size_t>& managed,
                                   const SchedulePolicy& policy, Rng& rng) {
    ScheduleState st;
    st.managed = managed;
    for (std::size_t layer : managed) {
        if (layer >= net.depth())
            throw std::invalid_argument("make_schedule: managed layer out of range");
        const Matrix& W = net.layers[layer].W;
        LayerSchedule ls;
        ls.active.layer = layer;
        ls.active.rank = policy.rank;
        switch (policy.kind) {
            case PolicyKind::Static:
                ls.active.mode = policy.mode;
                ls.active.position =
                    clamp_position(policy.initial_position, slice_dim(W, policy.mode),
                                   policy.rank);
                break;
            case PolicyKind::CyclicRow:
                ls.active.mode = SliceMode::Row;
                ls.active.position = 0;
                clamp_position(0, W.rows(), policy.rank);  // validate rank
                break;
            case PolicyKind::CyclicColumn:
                ls.active.mode = SliceMode::Column;
                ls.active.position = 0;
                clamp_position(0, W.cols(), policy.rank);
                break;
            case PolicyKind::AlternateRowColumn:
                // starts on a column band at 0; each axis keeps its own
                // cyclic counter and only advances when revisited
                ls.active.mode = SliceMode::Column;
                ls.active.position = 0;
                ls.active.rank = policy.rank_col;
                ls.next_col_pos = next_position(0, W.cols(), policy.rank_col);
                ls.next_row_pos = 0;
                clamp_position(0, W.rows(), policy.rank_row);
                break;
            case PolicyKind::RandomPosition: {
                ls.active.mode = policy.mode;
                std::size_t dim = slice_dim(W, policy.mode);
                clamp_position(0, dim, policy.rank);
                ls.active.position = rng.index(dim - policy.rank + 1);
                break;
            }
            case PolicyKind::RandomUnstructured:
                ls.unstructured_budget = unstructured_budget(W, policy.budget_fraction);
                ls.unstructured =
                    random_unstructured_mask(W.rows(), W.cols(), ls.unstructured_budget, rng);
                break;
        }
        st.per_layer.push_back(std::move(ls));
    }
    return st;
}

// Move every managed layer's mask one step per its policy. Once the switch
// budget is spent the state pins itself: further calls change nothing.
inline void advance_masks(ScheduleState& st, const Network& net, const SchedulePolicy& policy,
                          Rng& rng) {
    if (policy.kind == PolicyKind::Static || policy.max_switches == 0 ||
        st.switches_done >= policy.max_switches) {
        if (policy.kind != PolicyKind::Static && policy.max_switches > 0)
            st.degraded_to_static = true;
        return;
    }
    for (std::size_t k = 0; k < st.managed.size(); ++k) {
        LayerSchedule& ls = st.per_layer[k];
        const Matrix& W = net.layers[st.managed[k]].W;
        switch (policy.kind) {
            case PolicyKind::Static:
                break;
            case PolicyKind::CyclicRow:
                ls.active.position = next_position(ls.active.position, W.rows(), policy.rank);
                break;
            case PolicyKind::CyclicColumn:
                ls.active.position = next_position(ls.active.position, W.cols(), policy.rank);
                break;
            case PolicyKind::AlternateRowColumn:
                if (ls.active.mode == SliceMode::Column) {
                    ls.active.mode = SliceMode::Row;
                    ls.active.rank = policy.rank_row;
                    ls.active.position = ls.next_row_pos;
                    ls.next_row_pos = next_position(ls.next_row_pos, W.rows(), policy.rank_row);
                } else {
                    ls.active.mode = SliceMode::Column;
                    ls.active.rank = policy.rank_col;
                    ls.active.position = ls.next_col_pos;
                    ls.next_col_pos = next_position(ls.next_col_pos, W.cols(), policy.rank_col);
                }
                break;
            case PolicyKind::RandomPosition: {
                std::size_t dim = slice_dim(W, policy.mode);
                ls.active.position = rng.index(dim - policy.rank + 1);
                break;
            }
            case PolicyKind::RandomUnstructured:
                ls.unstructured = random_unstructured_mask(W.rows(), W.cols(),
                                                           ls.unstructured_budget, rng);
                break;
        }
    }
    ++st.switches_done;
    if (st.switches_done >= policy.max_switches) st.degraded_to_static = true;
}

// Trainable entries of one managed layer under the current state, row-major.
inline std::vector<std::pair<std::size_t, std::size_t>> active_entries(
    const ScheduleState& st, const Network& net, std::size_t k, const SchedulePolicy& policy) {
    const Matrix& W = net.layers[st.managed[k]].W;
    const LayerSchedule& ls = st.per_layer[k];
    if (policy.kind == PolicyKind::RandomUnstructured) {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        out.reserve(ls.unstructured_budget);
        for (std::size_t i = 0; i < W.rows(); ++i)
            for (std::size_t j = 0; j < W.cols(); ++j)
                if (ls.unstructured(i, j) != 0.0) out.emplace_back(i, j);
        return out;
    }
    return mask_entries(ls.active, W);
}

// ---- training-state commit --------------------------------------------------
// The network always carries the effective weights (frozen base + committed
// slices + the live slice's increment), so folding the increment into the
// base is a bookkeeping step: zero the increment record, drop the slice
// optimizer state, move the mask. Untouched coordinates are never written at
// any point, which is what keeps the frozen backbone bit-exact.

struct SliceTrainState {
    ScheduleState schedule;
    std::vector<Matrix> increment;           // per managed layer, full layer shape
    std::vector<AdamWState> opt;             // per managed layer, entries in gather order
    std::vector<double> committed_delta_sq;  // accumulated ||committed updates||^2
};

inline SliceTrainState make_train_state(const Network& net,
                                        const std::vector<std::size_t>& managed,
                                        const SchedulePolicy& policy, Rng& rng) {
    SliceTrainState ts;
    ts.schedule = make_schedule(net, managed, policy, rng);
    for (std::size_t layer : managed) {
        ts.increment.emplace_back(net.layers[layer].W.rows(), net.layers[layer].W.cols());
        ts.opt.push_back({});
        ts.committed_delta_sq.push_back(0.0);
    }
    return ts;
}

inline void commit_and_move(Network& net, SliceTrainState& ts, const SchedulePolicy& policy,
                            Rng& rng) {
    for (std::size_t k = 0; k < ts.schedule.managed.size(); ++k) {
        ts.committed_delta_sq[k] += ts.increment[k].frobenius() * ts.increment[k].frobenius();
        ts.increment[k] = Matrix(ts.increment[k].rows(), ts.increment[k].cols());
        ts.opt[k] = AdamWState{};
    }
    advance_masks(ts.schedule, net, policy, rng);
}

// ---- parameter accounting ---------------------------------------------------

enum class MethodKind { SliceFineRow, SliceFineColumn, FullFinetune, LoraReference };

inline const char* to_string(MethodKind m) {
    switch (m) {
        case MethodKind::SliceFineRow: return "slicefine_row";
        case MethodKind::SliceFineColumn: return "slicefine_column";
        case MethodKind::FullFinetune: return "full_finetune";
        case MethodKind::LoraReference: return "lora_reference";
    }
    return "?";
}

struct ParamCount {
    std::size_t trainable = 0;   // entries updated during adaptation
    std::size_t additional = 0;  // parameters that exist only because of the method
};

// Counts over the weight matrices being adapted; shapes are (out, in) pairs.
// A rank-r row band of an out x in matrix trains r whole rows (r*in entries);
// a column band trains r*out. Slice methods add nothing to the model; the
// low-rank-adapter reference adds r*(out+in) fresh parameters per matrix.
inline ParamCount trainable_param_count(
    const std::vector<std::pair<std::size_t, std::size_t>>& layer_shapes, MethodKind method,
    std::size_t rank) {
    ParamCount pc;
    for (auto [out, in] : layer_shapes) {
        if (out == 0 || in == 0)
            throw std::invalid_argument("trainable_param_count: zero dimension");
        switch (method) {
            case MethodKind::SliceFineRow:
                if (rank == 0 || rank > out)
                    throw std::invalid_argument("trainable_param_count: bad row rank");
                pc.trainable += rank * in;
                break;
            case MethodKind::SliceFineColumn:
                if (rank == 0 || rank > in)
                    throw std::invalid_argument("trainable_param_count: bad column rank");
                pc.trainable += rank * out;
                break;
            case MethodKind::FullFinetune:
                pc.trainable += out * in;
                break;
            case MethodKind::LoraReference: {
                if (rank == 0) throw std::invalid_argument("trainable_param_count: bad rank");
                std::size_t adapters = rank * (out + in);
                pc.trainable += adapters;
                pc.additional += adapters;
                break;
            }
        }
    }
    return pc;
}

}  // namespace slicefine
