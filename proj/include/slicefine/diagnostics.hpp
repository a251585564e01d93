#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "slicefine/eig.hpp"
#include "slicefine/matrix.hpp"
#include "slicefine/nn.hpp"
#include "slicefine/rng.hpp"
#include "slicefine/slice.hpp"

namespace slicefine {

// ---- spectral balance -------------------------------------------------------
// Split a weight matrix into k equal contiguous groups along one axis and
// compare the per-group second-moment spectra. Pretrained matrices tend to
// spread energy evenly across groups; rho quantifies the worst relative
// eigenvalue discrepancy between any two groups.

struct SpectralBalanceReport {
    std::vector<Vector> group_eigs;  // descending spectrum of W_g W_g^T per group
    Vector mean_energy;              // mean eigenvalue per group
    double max_mean_energy_ratio = 1.0;  // worst pairwise mean-energy ratio
    double rho = 0.0;                    // worst relative eigenvalue gap
};

inline SpectralBalanceReport spectral_balance(const Matrix& W, std::size_t k, SliceMode axis) {
    const std::size_t dim = axis == SliceMode::Row ? W.rows() : W.cols();
    if (k == 0 || dim % k != 0)
        throw std::invalid_argument("spectral_balance: group count must divide dimension " +
                                    std::to_string(dim));
    const std::size_t width = dim / k;
    SpectralBalanceReport rep;
    for (std::size_t g = 0; g < k; ++g) {
        Matrix Wg = axis == SliceMode::Row
                        ? W.block(g * width, (g + 1) * width, 0, W.cols())
                        : W.block(0, W.rows(), g * width, (g + 1) * width);
        Matrix gram = matmul(Wg, Wg.transposed());
        rep.group_eigs.push_back(sym_eig(gram).values);
        double mean = 0.0;
        for (double v : rep.group_eigs.back()) mean += v;
        rep.mean_energy.push_back(mean / double(rep.group_eigs.back().size()));
    }
    for (std::size_t g = 0; g < k; ++g)
        for (std::size_t h = 0; h < k; ++h) {
            if (g == h) continue;
            if (rep.mean_energy[h] > 0.0)
                rep.max_mean_energy_ratio = std::max(rep.max_mean_energy_ratio,
                                                     rep.mean_energy[g] / rep.mean_energy[h]);
            const Vector& a = rep.group_eigs[g];
            const Vector& b = rep.group_eigs[h];
            double bmax = 0.0;
            for (double v : b) bmax = std::max(bmax, std::fabs(v));
            for (std::size_t i = 0; i < b.size(); ++i) {
                if (std::fabs(b[i]) <= kRankTolerance * bmax) continue;
                rep.rho = std::max(rep.rho, std::fabs(a[i] - b[i]) / std::fabs(b[i]));
            }
        }
    return rep;
}

// ---- centered feature geometry ---------------------------------------------
// Convention for this block: H is samples-as-rows (n x d). Network code keeps
// features as columns, so callers hand in Phi^T.

inline Matrix center_features(const Matrix& H) {
    Matrix out = H;
    const std::size_t n = H.rows();
    if (n == 0) return out;
    for (std::size_t j = 0; j < H.cols(); ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += H(i, j);
        mean /= double(n);
        for (std::size_t i = 0; i < n; ++i) out(i, j) -= mean;
    }
    return out;
}

// Covariance eigenpairs, principal components, and the sample kernel of one
// centered feature matrix. The kernel K = H H^T and the principal scores
// P = H V describe the same object: K = P P^T exactly, and the kernel
// spectrum is (n-1) times the covariance spectrum on nonzero eigenvalues.
struct KernelReport {
    Vector lambda;        // covariance eigenvalues, descending (length d)
    Matrix components;    // covariance eigenvectors V (d x d)
    Matrix principal;     // P = H_centered V (n x d)
    Vector mu;            // kernel eigenvalues, descending (length n)
    double identity_error_max = 0.0;  // max |K - P P^T|
    Vector cev;           // cev[m] = cumulative explained variance of top m+1
    std::size_t k_task_90 = 0;  // smallest m with cev >= 0.9, 0 if undefined
};

inline std::size_t k_task_tau(const Vector& lambda, double tau) {
    if (!(tau > 0.0) || tau > 1.0)
        throw std::invalid_argument("k_task_tau: tau must be in (0, 1]");
    double total = 0.0;
    for (double l : lambda) total += std::max(0.0, l);
    if (total <= 0.0)
        throw std::invalid_argument("k_task_tau: spectrum carries no variance");
    double cum = 0.0;
    for (std::size_t m = 0; m < lambda.size(); ++m) {
        cum += std::max(0.0, lambda[m]);
        if (cum / total >= tau) return m + 1;
    }
    return lambda.size();
}

inline KernelReport kernel_report(const Matrix& H) {
    const std::size_t n = H.rows(), d = H.cols();
    if (n < 2) throw std::invalid_argument("kernel_report: need at least 2 samples");
    if (d == 0) throw std::invalid_argument("kernel_report: zero feature dimension");
    Matrix Hc = center_features(H);

    Matrix cov = matmul(Hc.transposed(), Hc);
    cov *= 1.0 / double(n - 1);
    EigResult ce = sym_eig(cov);

    KernelReport rep;
    rep.lambda = ce.values;
    rep.components = ce.vectors;
    rep.principal = matmul(Hc, ce.vectors);

    Matrix K = matmul(Hc, Hc.transposed());
    rep.mu = sym_eig(K).values;
    Matrix diff = K - matmul(rep.principal, rep.principal.transposed());
    rep.identity_error_max = diff.max_abs();

    double total = 0.0;
    for (double l : rep.lambda) total += std::max(0.0, l);
    rep.cev.resize(d, 1.0);
    if (total > 0.0) {
        double cum = 0.0;
        for (std::size_t m = 0; m < d; ++m) {
            cum += std::max(0.0, rep.lambda[m]);
            rep.cev[m] = cum / total;
        }
        rep.k_task_90 = k_task_tau(rep.lambda, 0.9);
    } else {
        rep.k_task_90 = 0;  // degenerate: no variance anywhere
    }
    return rep;
}

// ---- task covariance --------------------------------------------------------
// Features projected onto the label span: Sigma_task = Phi P_Y Phi^T / n with
// P_Y the orthogonal projector onto the column space of Y^T. Its rank counts
// how many feature directions the labels actually excite.

struct TaskCovarianceReport {
    Matrix sigma_task;  // d x d
    Vector eigs;
    std::size_t rank = 0;
};

inline TaskCovarianceReport task_covariance_rank(const Matrix& phi, const Matrix& y) {
    if (phi.cols() != y.cols())
        throw std::invalid_argument("task_covariance_rank: sample counts disagree");
    if (y.max_abs() == 0.0)
        throw std::invalid_argument("task_covariance_rank: labels are identically zero");
    const std::size_t n = phi.cols();
    SvdResult ys = thin_svd(y.transposed());  // n x c
    double smax = ys.sigma.empty() ? 0.0 : ys.sigma[0];
    std::size_t r = 0;
    for (double s : ys.sigma)
        if (s > kRankTolerance * smax) ++r;
    Matrix U(n, r);
    for (std::size_t j = 0; j < r; ++j)
        for (std::size_t i = 0; i < n; ++i) U(i, j) = ys.U(i, j);
    Matrix proj = matmul(U, U.transposed());  // P_Y
    TaskCovarianceReport rep;
    rep.sigma_task = matmul(matmul(phi, proj), phi.transposed());
    rep.sigma_task *= 1.0 / double(n);
    rep.eigs = sym_eig(rep.sigma_task).values;
    rep.rank = numeric_rank(rep.eigs);
    return rep;
}

// ---- restricted smoothness --------------------------------------------------
// Dominant curvature of the loss along the listed weight entries of one
// layer, by power iteration on Hessian-vector products; each product is a
// central finite difference of the restricted gradient.

namespace detail {

inline Vector restricted_gradient(const Network& net, const Matrix& x, const Targets& tg,
                                  std::size_t layer, const EntryList& entries) {
    BackwardResult b = backward(net, forward(net, x), tg);
    Vector g(entries.size());
    for (std::size_t k = 0; k < entries.size(); ++k)
        g[k] = b.dW[layer](entries[k].first, entries[k].second);
    return g;
}

}  // namespace detail

inline double restricted_smoothness_estimate(const Network& net, const Matrix& x,
                                             const Targets& tg, std::size_t layer,
                                             const EntryList& entries,
                                             std::size_t iterations = 12) {
    if (layer >= net.depth())
        throw std::invalid_argument("restricted_smoothness_estimate: bad layer");
    if (entries.empty())
        throw std::invalid_argument("restricted_smoothness_estimate: empty entry list");
    Vector theta(entries.size());
    for (std::size_t k = 0; k < entries.size(); ++k)
        theta[k] = net.layers[layer].W(entries[k].first, entries[k].second);
    const double h = 1e-4 * (1.0 + norm2(theta));

    Vector v(entries.size(), 1.0 / std::sqrt(double(entries.size())));
    double rayleigh = 0.0;
    Network probe = net;
    auto grad_at = [&](const Vector& point) {
        for (std::size_t k = 0; k < entries.size(); ++k)
            probe.layers[layer].W(entries[k].first, entries[k].second) = point[k];
        return detail::restricted_gradient(probe, x, tg, layer, entries);
    };
    for (std::size_t it = 0; it < iterations; ++it) {
        Vector plus(theta), minus(theta);
        for (std::size_t k = 0; k < theta.size(); ++k) {
            plus[k] += h * v[k];
            minus[k] -= h * v[k];
        }
        Vector gp = grad_at(plus), gm = grad_at(minus);
        Vector hv(theta.size());
        for (std::size_t k = 0; k < theta.size(); ++k) hv[k] = (gp[k] - gm[k]) / (2.0 * h);
        rayleigh = dot(v, hv);
        double nrm = norm2(hv);
        if (nrm < 1e-300) return 0.0;  // flat direction: no curvature at all
        for (std::size_t k = 0; k < theta.size(); ++k) v[k] = hv[k] / nrm;
    }
    return std::fabs(rayleigh);
}

// ---- gradient alignment -----------------------------------------------------
// For one layer and one slice: how well the restricted gradient retains the
// task-aligned part of the feature gradient. All quantities are evaluated
// per sample and the reported scalars take the pessimistic end, so the
// chained lower bound stays valid for the reported numbers as well.

struct AlignmentReport {
    std::size_t k_task = 0;
    bool vanishing_guarantee = false;  // no feature variance: bound says nothing
    double gamma_min = 0.0;            // min over samples of sigma_min(U_k^T J)
    double beta = 0.0;                 // max over samples of ||(I-P) J||_2
    double g_task_norm = 0.0;          // at the worst-slack sample
    double g_perp_norm = 0.0;
    double rho_align = 0.0;            // max over samples of ||g_perp||/||g_task||
    double restricted_grad_norm = 0.0;  // min over samples of ||J^T g||
    double lower_bound = 0.0;           // min over samples of gamma||g_task|| - beta||g_perp||
    double smoothness = 0.0;            // curvature estimate along the slice
    double predicted_decrease = 0.0;    // one-step improvement the bound promises
    // worst normalized verification margins (>= -1e-9 means the inequality
    // held to rounding); see the per-sample checks in the implementation
    double min_triangle_slack = 0.0;
    double min_sigma_slack = 0.0;
    double min_opnorm_slack = 0.0;
    double min_chain_slack = 0.0;
};

inline AlignmentReport alignment_report(const Network& net, const Matrix& x, const Targets& tg,
                                        std::size_t layer, const EntryList& entries,
                                        double tau = 0.9) {
    if (layer >= net.depth())
        throw std::invalid_argument("alignment_report: layer index out of range");
    if (entries.empty()) throw std::invalid_argument("alignment_report: empty slice");
    const std::size_t n = x.cols();
    if (n < 2) throw std::invalid_argument("alignment_report: need at least 2 samples");

    ForwardTrace trace = forward(net, x);
    const Matrix& phi = trace.activations[layer + 1];  // d x n
    const std::size_t d = phi.rows();

    AlignmentReport rep;
    Matrix phi_c = center_features(phi.transposed()).transposed();  // centered, d x n
    SvdResult ps = thin_svd(phi_c);
    Vector lambda(ps.sigma.size());
    for (std::size_t i = 0; i < ps.sigma.size(); ++i)
        lambda[i] = ps.sigma[i] * ps.sigma[i] / double(n - 1);
    double total = std::accumulate(lambda.begin(), lambda.end(), 0.0);
    // Centering a constant feature map leaves rounding residue rather than an
    // exact zero, so compare the centered spread against the raw scale.
    double spread = ps.sigma.empty() ? 0.0 : ps.sigma[0];
    if (total <= 0.0 || spread <= kRankTolerance * (1.0 + phi.frobenius())) {
        rep.vanishing_guarantee = true;
        return rep;
    }
    rep.k_task = k_task_tau(lambda, tau);

    Matrix U(d, rep.k_task);
    for (std::size_t j = 0; j < rep.k_task; ++j)
        for (std::size_t i = 0; i < d; ++i) U(i, j) = ps.U(i, j);
    Matrix P = matmul(U, U.transposed());
    Matrix Iminus = Matrix::identity(d) - P;

    Matrix g_phi = feature_gradient(net, x, tg, layer);  // d x n

    const double inf = 1e300;
    double worst_chain = inf;
    rep.gamma_min = inf;
    rep.restricted_grad_norm = inf;
    rep.lower_bound = inf;
    rep.min_triangle_slack = inf;
    rep.min_sigma_slack = inf;
    rep.min_opnorm_slack = inf;
    rep.min_chain_slack = inf;

    for (std::size_t s = 0; s < n; ++s) {
        Matrix J = feature_jacobian_wrt_entries(net, x.col(s), layer, entries);
        double gamma = sigma_min_of_product(U, J);
        Matrix PJ = matmul(Iminus, J);
        double beta = PJ.max_abs() == 0.0 ? 0.0 : thin_svd(PJ).sigma[0];

        Vector g = g_phi.col(s);
        Vector gt = matvec(P, g);
        Vector gp(d);
        for (std::size_t i = 0; i < d; ++i) gp[i] = g[i] - gt[i];

        Vector r = matvec(J.transposed(), g);
        Vector rt = matvec(J.transposed(), gt);
        Vector rp = matvec(J.transposed(), gp);
        double nr = norm2(r), nrt = norm2(rt), nrp = norm2(rp);
        double ngt = norm2(gt), ngp = norm2(gp);

        // Every quantity below is assembled from J and g, so their rounding
        // floor is a multiple of ||J||*||g||; fold that into each slack's
        // scale or a projector spanning the whole feature space (task and
        // leakage parts both rounding-level zeros) reports spurious ratios.
        double base = J.frobenius() * norm2(g) + 1e-30;

        // reverse triangle: ||J^T g|| >= ||J^T g_task|| - ||J^T g_perp||
        double s1 = nr - (nrt - nrp);
        double sc1 = nr + nrt + nrp + base;
        // smallest-singular-value bound on the task part
        double s2 = nrt - gamma * ngt;
        double sc2 = nrt + gamma * ngt + base;
        // operator-norm bound on the leakage part
        double s3 = beta * ngp - nrp;
        double sc3 = beta * ngp + nrp + base;
        // chained lower bound
        double lb = gamma * ngt - beta * ngp;
        double s4 = nr - lb;
        double sc4 = nr + std::fabs(lb) + base;

        rep.min_triangle_slack = std::min(rep.min_triangle_slack, s1 / sc1);
        rep.min_sigma_slack = std::min(rep.min_sigma_slack, s2 / sc2);
        rep.min_opnorm_slack = std::min(rep.min_opnorm_slack, s3 / sc3);
        rep.min_chain_slack = std::min(rep.min_chain_slack, s4 / sc4);

        rep.gamma_min = std::min(rep.gamma_min, gamma);
        rep.beta = std::max(rep.beta, beta);
        rep.restricted_grad_norm = std::min(rep.restricted_grad_norm, nr);
        rep.lower_bound = std::min(rep.lower_bound, lb);
        if (ngt > 0.0) rep.rho_align = std::max(rep.rho_align, ngp / ngt);

        double chain_margin = nr - lb;
        if (chain_margin < worst_chain) {
            worst_chain = chain_margin;
            rep.g_task_norm = ngt;
            rep.g_perp_norm = ngp;
        }
    }

    rep.smoothness = restricted_smoothness_estimate(net, x, tg, layer, entries);
    if (rep.gamma_min > 0.0 && rep.smoothness > 0.0) {
        double c = rep.beta / rep.gamma_min;
        double factor = std::max(0.0, 1.0 - c * rep.rho_align);
        rep.predicted_decrease = factor * factor * rep.gamma_min * rep.gamma_min *
                                 rep.g_task_norm * rep.g_task_norm / (2.0 * rep.smoothness);
    }
    return rep;
}

// ---- representation drift ---------------------------------------------------

// Linear centered-kernel alignment between two feature sets with aligned
// samples (rows). 1 means identical up to rotation and scale.
inline double cka(const Matrix& Hb, const Matrix& Hr) {
    if (Hb.rows() != Hr.rows()) throw std::invalid_argument("cka: sample counts disagree");
    if (Hb.rows() < 2) throw std::invalid_argument("cka: need at least 2 samples");
    Matrix b = center_features(Hb);
    Matrix r = center_features(Hr);
    double num = matmul(b.transposed(), r).frobenius();
    num *= num;
    double den = matmul(b.transposed(), b).frobenius() * matmul(r.transposed(), r).frobenius();
    if (den == 0.0)
        throw std::invalid_argument("cka: a feature set has zero variance");
    return num / den;
}

// Mean per-sample KL divergence between the class distributions of two
// classifier heads on the same batch. Probabilities are floored at 1e-300
// before the logs so the value stays finite.
inline double kl_shift(const Network& net_r, const Network& net_b, const Matrix& x) {
    Matrix pr = softmax(forward(net_r, x).logits());
    Matrix pb = softmax(forward(net_b, x).logits());
    if (!pr.same_shape(pb))
        throw std::invalid_argument("kl_shift: networks emit different logit shapes");
    const double floor = 1e-300;
    double total = 0.0;
    for (std::size_t j = 0; j < pr.cols(); ++j)
        for (std::size_t i = 0; i < pr.rows(); ++i) {
            double a = std::max(pr(i, j), floor);
            double b = std::max(pb(i, j), floor);
            total += a * std::log(a / b);
        }
    return total / double(pr.cols());
}

// ---- importance scoring -----------------------------------------------------
// Weight-times-input-norm salience: S_ij = |W_ij| * ||X_col_j||_2 with X the
// calibration activations, samples as rows (s x d_in).

inline Matrix wanda_scores(const Matrix& W, const Matrix& X) {
    if (X.rows() == 0) throw std::invalid_argument("wanda_scores: empty calibration batch");
    if (X.cols() != W.cols())
        throw std::invalid_argument("wanda_scores: X columns must match W columns");
    Vector colnorm(W.cols(), 0.0);
    for (std::size_t j = 0; j < X.cols(); ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < X.rows(); ++i) s += X(i, j) * X(i, j);
        colnorm[j] = std::sqrt(s);
    }
    Matrix S(W.rows(), W.cols());
    for (std::size_t i = 0; i < W.rows(); ++i)
        for (std::size_t j = 0; j < W.cols(); ++j)
            S(i, j) = std::fabs(W(i, j)) * colnorm[j];
    return S;
}

// Aggregate slice scores for every admissible band position (stride 1) and
// the descending-score ranking. Ties keep lower positions first.
struct WandaRanking {
    SliceMode mode = SliceMode::Row;
    std::size_t rank = 1;
    Vector position_scores;           // indexed by band start
    std::vector<std::size_t> order;   // positions, best first
};

inline WandaRanking wanda_slice_ranking(const Matrix& scores, SliceMode mode,
                                        std::size_t rank) {
    const std::size_t dim = mode == SliceMode::Row ? scores.rows() : scores.cols();
    if (rank == 0 || rank > dim)
        throw std::invalid_argument("wanda_slice_ranking: rank out of range");
    WandaRanking r;
    r.mode = mode;
    r.rank = rank;
    const std::size_t positions = dim - rank + 1;
    r.position_scores.resize(positions, 0.0);
    for (std::size_t p = 0; p < positions; ++p) {
        double total = 0.0;
        if (mode == SliceMode::Row) {
            for (std::size_t i = p; i < p + rank; ++i)
                for (std::size_t j = 0; j < scores.cols(); ++j) total += scores(i, j);
        } else {
            for (std::size_t i = 0; i < scores.rows(); ++i)
                for (std::size_t j = p; j < p + rank; ++j) total += scores(i, j);
        }
        r.position_scores[p] = total;
    }
    r.order.resize(positions);
    std::iota(r.order.begin(), r.order.end(), std::size_t{0});
    std::stable_sort(r.order.begin(), r.order.end(), [&](std::size_t a, std::size_t b) {
        return r.position_scores[a] > r.position_scores[b];
    });
    return r;
}

enum class WandaCategory { Most, Least, Mixed, Random };

inline const char* to_string(WandaCategory c) {
    switch (c) {
        case WandaCategory::Most: return "most";
        case WandaCategory::Least: return "least";
        case WandaCategory::Mixed: return "mixed";
        case WandaCategory::Random: return "random";
    }
    return "?";
}

inline WandaCategory wanda_category_from_string(const std::string& s) {
    if (s == "most") return WandaCategory::Most;
    if (s == "least") return WandaCategory::Least;
    if (s == "mixed") return WandaCategory::Mixed;
    if (s == "random") return WandaCategory::Random;
    throw std::invalid_argument("unknown salience category: " + s);
}

// Band positions a category picks, in visit order: the most/least salient
// ends of the ranking, an alternation of both ends, or a uniform draw.
inline std::vector<std::size_t> wanda_category_positions(const WandaRanking& ranking,
                                                         WandaCategory category,
                                                         std::size_t count, Rng& rng) {
    const std::size_t avail = ranking.order.size();
    if (count == 0 || count > avail)
        throw std::invalid_argument("wanda_category_positions: bad count");
    std::vector<std::size_t> out;
    out.reserve(count);
    switch (category) {
        case WandaCategory::Most:
            for (std::size_t i = 0; i < count; ++i) out.push_back(ranking.order[i]);
            break;
        case WandaCategory::Least:
            for (std::size_t i = 0; i < count; ++i)
                out.push_back(ranking.order[avail - 1 - i]);
            break;
        case WandaCategory::Mixed:
            for (std::size_t i = 0; i < count; ++i)
                out.push_back(i % 2 == 0 ? ranking.order[i / 2]
                                         : ranking.order[avail - 1 - i / 2]);
            break;
        case WandaCategory::Random: {
            auto pick = rng.subset(avail, count);
            rng.shuffle(pick);
            out = pick;
            break;
        }
    }
    return out;
}

// ---- spectral energy --------------------------------------------------------
// Fraction of squared singular-value mass the top k directions of the RAW
// (uncentered) feature matrix carry.
inline double energy_ratio(const Matrix& phi, std::size_t k) {
    if (phi.max_abs() == 0.0)
        throw std::invalid_argument("energy_ratio: features are identically zero");
    SvdResult s = thin_svd(phi);
    double total = 0.0, top = 0.0;
    for (std::size_t i = 0; i < s.sigma.size(); ++i) {
        double e = s.sigma[i] * s.sigma[i];
        total += e;
        if (i < k) top += e;
    }
    return top / total;
}

}  // namespace slicefine
