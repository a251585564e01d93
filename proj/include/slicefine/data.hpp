#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "slicefine/eig.hpp"
#include "slicefine/matrix.hpp"
#include "slicefine/nn.hpp"
#include "slicefine/rng.hpp"

namespace slicefine {

// Three disjoint sample sets: train drives optimization, val is only ever
// scored, and the calibration set feeds the feature diagnostics so they are
// not computed on data the optimizer saw that step. Samples as columns.
struct Split {
    Matrix x;                          // d x n
    std::vector<std::size_t> labels;   // classification
    Matrix targets;                    // regression, out x n
};

struct Dataset {
    Split train, val, calib;
    LossKind loss = LossKind::CrossEntropy;
    std::size_t num_classes = 0;

    // generator provenance, where it exists (low-rank tasks)
    std::size_t latent_dim = 0;
    Matrix latent_train;  // k x n_train, aligned with train columns
    Matrix latent_val;    // k x n_val
    Matrix latent_calib;  // k x n_calib
    Matrix class_mixer;   // c x k scoring matrix behind the labels

    Targets train_targets() const { return targets_for(train); }
    Targets val_targets() const { return targets_for(val); }
    Targets calib_targets() const { return targets_for(calib); }

    Targets targets_for(const Split& s) const {
        return loss == LossKind::CrossEntropy ? Targets::classes(s.labels)
                                              : Targets::regression(s.targets);
    }
};

struct SplitSpec {
    double train_frac = 0.8;           // remainder is validation
    double calib_frac_of_train = 0.2;  // carved out of the train allocation
};

namespace detail {

struct SplitIndices {
    std::vector<std::size_t> calib, train, val;
};

// Shuffle once, then cut [calibration | train | val]. Calibration comes out
// of the train allocation, so it can never overlap either other split.
inline SplitIndices split_indices(std::size_t n, const SplitSpec& spec, Rng& rng) {
    if (!(spec.train_frac > 0.0) || spec.train_frac > 1.0)
        throw std::invalid_argument("split: train_frac must be in (0, 1]");
    if (spec.calib_frac_of_train < 0.0 || spec.calib_frac_of_train > 1.0)
        throw std::invalid_argument("split: calib_frac_of_train must be in [0, 1]");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    auto train_alloc = std::size_t(std::llround(spec.train_frac * double(n)));
    auto n_calib = std::size_t(std::llround(spec.calib_frac_of_train * double(train_alloc)));
    SplitIndices out;
    out.calib.assign(order.begin(), order.begin() + n_calib);
    out.train.assign(order.begin() + n_calib, order.begin() + train_alloc);
    out.val.assign(order.begin() + train_alloc, order.end());
    return out;
}

inline Matrix gather_columns(const Matrix& x, const std::vector<std::size_t>& idx) {
    Matrix out(x.rows(), idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j)
        for (std::size_t i = 0; i < x.rows(); ++i) out(i, j) = x(i, idx[j]);
    return out;
}

template <typename T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(v[i]);
    return out;
}

}  // namespace detail

// c class means on the sphere of the given radius, isotropic Gaussian noise
// around them. Balanced: n_per_class samples per class before splitting.
inline Dataset gaussian_clusters(std::size_t d, std::size_t c, std::size_t n_per_class,
                                 double separation, double noise, std::uint64_t seed,
                                 const SplitSpec& spec = {}) {
    if (d == 0 || c < 2 || n_per_class == 0)
        throw std::invalid_argument("gaussian_clusters: need d>0, c>=2, n_per_class>0");
    if (noise < 0.0 || separation < 0.0)
        throw std::invalid_argument("gaussian_clusters: negative scale");
    Rng rng = Rng::derive(seed, 0x6c75);
    std::vector<Vector> means(c);
    for (std::size_t k = 0; k < c; ++k) {
        Vector m(d);
        double nrm = 0.0;
        do {
            for (double& v : m) v = rng.normal();
            nrm = norm2(m);
        } while (nrm < 1e-12);
        for (double& v : m) v *= separation / nrm;
        means[k] = m;
    }
    const std::size_t n = c * n_per_class;
    Matrix x(d, n);
    std::vector<std::size_t> y(n);
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t s = 0; s < n_per_class; ++s) {
            std::size_t col = k * n_per_class + s;
            for (std::size_t i = 0; i < d; ++i)
                x(i, col) = means[k][i] + noise * rng.normal();
            y[col] = k;
        }

    auto idx = detail::split_indices(n, spec, rng);
    Dataset ds;
    ds.loss = LossKind::CrossEntropy;
    ds.num_classes = c;
    ds.train = {detail::gather_columns(x, idx.train), detail::gather(y, idx.train), {}};
    ds.val = {detail::gather_columns(x, idx.val), detail::gather(y, idx.val), {}};
    ds.calib = {detail::gather_columns(x, idx.calib), detail::gather(y, idx.calib), {}};
    return ds;
}

// Inputs concentrated on a k_true-dimensional subspace: X = Q Z + noise,
// with Q an orthonormal d x k frame and Z iid standard normal latents.
// Labels are argmax of a fixed linear score of the latent, so the task is
// linearly decided by exactly the k_true subspace directions.
inline Dataset low_rank_task(std::size_t d, std::size_t k_true, std::size_t n, double noise,
                             std::uint64_t seed, const SplitSpec& spec = {}) {
    if (k_true == 0 || k_true > d)
        throw std::invalid_argument("low_rank_task: need 1 <= k_true <= d");
    if (n < 4) throw std::invalid_argument("low_rank_task: need n >= 4");
    Rng rng = Rng::derive(seed, 0x6c72);

    Matrix q(d, k_true);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < k_true; ++j) q(i, j) = rng.normal();
    orthonormalize_columns(q);

    Matrix z(k_true, n);
    for (std::size_t i = 0; i < k_true; ++i)
        for (std::size_t j = 0; j < n; ++j) z(i, j) = rng.normal();

    Matrix x = matmul(q, z);
    if (noise > 0.0)
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < n; ++j) x(i, j) += noise * rng.normal();

    const std::size_t c = std::max<std::size_t>(2, k_true);
    Matrix mixer(c, k_true);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < k_true; ++j) mixer(i, j) = rng.normal();
    Matrix scores = matmul(mixer, z);
    std::vector<std::size_t> y(n);
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < c; ++i)
            if (scores(i, j) > scores(best, j)) best = i;
        y[j] = best;
    }

    auto idx = detail::split_indices(n, spec, rng);
    Dataset ds;
    ds.loss = LossKind::CrossEntropy;
    ds.num_classes = c;
    ds.latent_dim = k_true;
    ds.class_mixer = mixer;
    ds.latent_train = detail::gather_columns(z, idx.train);
    ds.latent_val = detail::gather_columns(z, idx.val);
    ds.latent_calib = detail::gather_columns(z, idx.calib);
    ds.train = {detail::gather_columns(x, idx.train), detail::gather(y, idx.train), {}};
    ds.val = {detail::gather_columns(x, idx.val), detail::gather(y, idx.val), {}};
    ds.calib = {detail::gather_columns(x, idx.calib), detail::gather(y, idx.calib), {}};
    return ds;
}

// Regression targets produced by a fixed random one-hidden-layer network, so
// the task is exactly realizable by a student of the same shape.
inline std::pair<Dataset, Network> teacher_student(std::size_t d, std::size_t hidden,
                                                   std::size_t n, std::uint64_t seed,
                                                   const SplitSpec& spec = {}) {
    if (d == 0 || hidden == 0 || n < 4)
        throw std::invalid_argument("teacher_student: need d>0, hidden>0, n>=4");
    Rng rng = Rng::derive(seed, 0x7473);
    Network teacher =
        Network::init({d, hidden, 1}, {Activation::Tanh, Activation::Identity}, rng);
    Matrix x(d, n);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < n; ++j) x(i, j) = rng.normal();
    Matrix t = forward(teacher, x).logits();

    auto idx = detail::split_indices(n, spec, rng);
    Dataset ds;
    ds.loss = LossKind::Mse;
    ds.train = {detail::gather_columns(x, idx.train), {}, detail::gather_columns(t, idx.train)};
    ds.val = {detail::gather_columns(x, idx.val), {}, detail::gather_columns(t, idx.val)};
    ds.calib = {detail::gather_columns(x, idx.calib), {}, detail::gather_columns(t, idx.calib)};
    return {std::move(ds), std::move(teacher)};
}

// Numeric CSV -> dataset. One row per sample; `label_col` names the label
// column (class index for classification, real target for regression).
// Features are standardized with statistics of the TRAIN split only; a
// zero-variance column is left centered but unscaled.
inline Dataset load_csv(const std::string& path, std::size_t label_col, bool classification,
                        std::uint64_t seed, const SplitSpec& spec = {}) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_csv: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Matrix table = from_csv(text);  // throws with a line number on bad cells
    if (table.rows() < 4) throw std::invalid_argument("load_csv: need at least 4 data rows");
    if (label_col >= table.cols())
        throw std::invalid_argument("load_csv: label column " + std::to_string(label_col) +
                                    " out of range for " + std::to_string(table.cols()) +
                                    " columns");
    const std::size_t n = table.rows(), d = table.cols() - 1;
    if (d == 0) throw std::invalid_argument("load_csv: no feature columns");

    Matrix x(d, n);
    std::vector<std::size_t> y(n);
    Matrix t(1, n);
    std::size_t cmax = 0;
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t fi = 0;
        for (std::size_t cidx = 0; cidx < table.cols(); ++cidx) {
            if (cidx == label_col) continue;
            x(fi++, r) = table(r, cidx);
        }
        double lv = table(r, label_col);
        if (classification) {
            double rounded = std::nearbyint(lv);
            if (!(std::fabs(lv - rounded) <= 1e-9) || rounded < 0.0)
                throw std::invalid_argument("load_csv: row " + std::to_string(r + 1) +
                                            ": label is not a class index");
            y[r] = std::size_t(rounded);
            cmax = std::max(cmax, y[r]);
        } else {
            t(0, r) = lv;
        }
    }

    Rng rng = Rng::derive(seed, 0x6373);
    auto idx = detail::split_indices(n, spec, rng);
    if (idx.train.empty()) throw std::invalid_argument("load_csv: empty train split");

    // train-set statistics only
    Vector mean(d, 0.0), sd(d, 0.0);
    for (std::size_t j : idx.train)
        for (std::size_t i = 0; i < d; ++i) mean[i] += x(i, j);
    for (double& m : mean) m /= double(idx.train.size());
    for (std::size_t j : idx.train)
        for (std::size_t i = 0; i < d; ++i) {
            double v = x(i, j) - mean[i];
            sd[i] += v * v;
        }
    for (double& s : sd) {
        s = std::sqrt(s / double(idx.train.size()));
        if (s == 0.0) s = 1.0;
    }
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < d; ++i) x(i, j) = (x(i, j) - mean[i]) / sd[i];

    Dataset ds;
    ds.loss = classification ? LossKind::CrossEntropy : LossKind::Mse;
    ds.num_classes = classification ? cmax + 1 : 0;
    auto fill = [&](const std::vector<std::size_t>& which, Split& s) {
        s.x = detail::gather_columns(x, which);
        if (classification)
            s.labels = detail::gather(y, which);
        else
            s.targets = detail::gather_columns(t, which);
    };
    fill(idx.train, ds.train);
    fill(idx.val, ds.val);
    fill(idx.calib, ds.calib);
    return ds;
}

}  // namespace slicefine
