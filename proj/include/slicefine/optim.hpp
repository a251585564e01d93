#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "slicefine/matrix.hpp"

namespace slicefine {

struct AdamWParams {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct SgdParams {
    double lr = 1e-2;
};

// Moment buffers for one restricted parameter set, one entry per trainable
// coordinate in gather order. Sliced training keeps one of these per managed
// layer and throws it away at every commit (a fresh optimizer per slice
// period, step count included).
struct AdamWState {
    Vector m1, m2;
    long steps = 0;

    void ensure(std::size_t n) {
        if (m1.size() != n) {
            m1.assign(n, 0.0);
            m2.assign(n, 0.0);
            steps = 0;
        }
    }
};

using EntryList = std::vector<std::pair<std::size_t, std::size_t>>;

// One decoupled-weight-decay Adam step applied only at `entries` (row-major
// gather order fixes which moment pairs with which coordinate). Coordinates
// outside the list are never read or written. The applied delta is added
// into `increment` when given, so commit bookkeeping sees exactly what the
// optimizer did.
inline void adamw_step_restricted(Matrix& W, const Matrix& grad, const EntryList& entries,
                                  AdamWState& st, const AdamWParams& p,
                                  Matrix* increment = nullptr) {
    if (!W.same_shape(grad))
        throw std::invalid_argument("adamw_step_restricted: gradient shape mismatch");
    st.ensure(entries.size());
    for (const auto& [i, j] : entries)
        if (!std::isfinite(grad(i, j)))
            throw std::runtime_error("non-finite gradient at optimizer step " +
                                     std::to_string(st.steps + 1));
    ++st.steps;
    const double bc1 = 1.0 - std::pow(p.beta1, double(st.steps));
    const double bc2 = 1.0 - std::pow(p.beta2, double(st.steps));
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const auto [i, j] = entries[k];
        const double g = grad(i, j);
        st.m1[k] = p.beta1 * st.m1[k] + (1.0 - p.beta1) * g;
        st.m2[k] = p.beta2 * st.m2[k] + (1.0 - p.beta2) * g * g;
        const double mhat = st.m1[k] / bc1;
        const double vhat = st.m2[k] / bc2;
        const double delta =
            -p.lr * (mhat / (std::sqrt(vhat) + p.eps) + p.weight_decay * W(i, j));
        W(i, j) += delta;
        if (increment) (*increment)(i, j) += delta;
    }
}

// Same gather contract for a whole bias vector (used by the trainable head).
inline void adamw_step_vector(Vector& b, const Vector& grad, AdamWState& st,
                              const AdamWParams& p) {
    if (b.size() != grad.size())
        throw std::invalid_argument("adamw_step_vector: gradient length mismatch");
    st.ensure(b.size());
    for (double g : grad)
        if (!std::isfinite(g))
            throw std::runtime_error("non-finite gradient at optimizer step " +
                                     std::to_string(st.steps + 1));
    ++st.steps;
    const double bc1 = 1.0 - std::pow(p.beta1, double(st.steps));
    const double bc2 = 1.0 - std::pow(p.beta2, double(st.steps));
    for (std::size_t k = 0; k < b.size(); ++k) {
        const double g = grad[k];
        st.m1[k] = p.beta1 * st.m1[k] + (1.0 - p.beta1) * g;
        st.m2[k] = p.beta2 * st.m2[k] + (1.0 - p.beta2) * g * g;
        const double mhat = st.m1[k] / bc1;
        const double vhat = st.m2[k] / bc2;
        b[k] += -p.lr * (mhat / (std::sqrt(vhat) + p.eps) + p.weight_decay * b[k]);
    }
}

inline void sgd_step_restricted(Matrix& W, const Matrix& grad, const EntryList& entries,
                                const SgdParams& p, Matrix* increment = nullptr) {
    if (!W.same_shape(grad))
        throw std::invalid_argument("sgd_step_restricted: gradient shape mismatch");
    for (const auto& [i, j] : entries) {
        if (!std::isfinite(grad(i, j)))
            throw std::runtime_error("non-finite gradient in sgd step");
        const double delta = -p.lr * grad(i, j);
        W(i, j) += delta;
        if (increment) (*increment)(i, j) += delta;
    }
}

}  // namespace slicefine
