#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "slicefine/matrix.hpp"

namespace slicefine {

// Fraction of the largest-magnitude value below which a spectrum entry is
// treated as zero when counting rank.
inline constexpr double kRankTolerance = 1e-10;

struct EigResult {
    Vector values;   // descending
    Matrix vectors;  // orthonormal columns, vectors.col(i) pairs with values[i]
};

struct SvdResult {
    Matrix U;      // rows(A) x k
    Vector sigma;  // k = min(rows, cols), descending, >= 0
    Matrix V;      // cols(A) x k
};

inline std::size_t numeric_rank(const Vector& spectrum) {
    double largest = 0.0;
    for (double v : spectrum) largest = std::max(largest, std::fabs(v));
    if (largest == 0.0) return 0;
    std::size_t r = 0;
    for (double v : spectrum)
        if (std::fabs(v) > kRankTolerance * largest) ++r;
    return r;
}

// Flip each column so its first nonzero component is nonnegative. Pins the
// sign freedom of eigenvectors so identical inputs give identical bytes.
inline void canonicalize_column_signs(Matrix& m) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
        for (std::size_t i = 0; i < m.rows(); ++i) {
            double v = m(i, j);
            if (v != 0.0) {
                if (v < 0.0)
                    for (std::size_t r = 0; r < m.rows(); ++r) m(r, j) = -m(r, j);
                break;
            }
        }
    }
}

// Symmetric eigendecomposition by cyclic Jacobi sweeps. Chosen over faster
// tridiagonalization because every operation is a plane rotation in a fixed
// order: bit-identical across runs, orthogonality to machine precision, and
// small eigenvalues come out with good relative accuracy.
inline EigResult sym_eig(const Matrix& A) {
    const std::size_t n = A.rows();
    if (n != A.cols()) throw std::invalid_argument("sym_eig: matrix must be square");
    double scale = A.max_abs();
    double asym = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            asym = std::max(asym, std::fabs(A(i, j) - A(j, i)));
    if (asym > 1e-10 * scale)
        throw std::invalid_argument("sym_eig: matrix is not symmetric");

    // Fold any sub-tolerance asymmetry away so the sweeps see an exactly
    // symmetric matrix.
    Matrix B(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) B(i, j) = 0.5 * (A(i, j) + A(j, i));
    Matrix V = Matrix::identity(n);

    if (scale > 0.0) {
        const double stop = 1e-15 * scale;
        for (int sweep = 0; sweep < 100; ++sweep) {
            double off = 0.0;
            for (std::size_t p = 0; p + 1 < n; ++p)
                for (std::size_t q = p + 1; q < n; ++q)
                    off = std::max(off, std::fabs(B(p, q)));
            if (off <= stop) break;
            for (std::size_t p = 0; p + 1 < n; ++p) {
                for (std::size_t q = p + 1; q < n; ++q) {
                    double apq = B(p, q);
                    if (std::fabs(apq) <= stop) continue;
                    double theta = (B(q, q) - B(p, p)) / (2.0 * apq);
                    double t = (theta >= 0.0 ? 1.0 : -1.0) /
                               (std::fabs(theta) + std::sqrt(1.0 + theta * theta));
                    double c = 1.0 / std::sqrt(1.0 + t * t);
                    double s = t * c;
                    for (std::size_t k = 0; k < n; ++k) {
                        double bkp = B(k, p), bkq = B(k, q);
                        B(k, p) = c * bkp - s * bkq;
                        B(k, q) = s * bkp + c * bkq;
                    }
                    for (std::size_t k = 0; k < n; ++k) {
                        double bpk = B(p, k), bqk = B(q, k);
                        B(p, k) = c * bpk - s * bqk;
                        B(q, k) = s * bpk + c * bqk;
                    }
                    for (std::size_t k = 0; k < n; ++k) {
                        double vkp = V(k, p), vkq = V(k, q);
                        V(k, p) = c * vkp - s * vkq;
                        V(k, q) = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return B(a, a) > B(b, b); });

    EigResult out;
    out.values.resize(n);
    out.vectors = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        out.values[j] = B(order[j], order[j]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = V(i, order[j]);
    }
    canonicalize_column_signs(out.vectors);
    return out;
}

// Modified Gram-Schmidt, two passes, in place. Columns assumed independent
// enough to normalize (callers feed near-orthonormal sets or basis fills).
inline void orthonormalize_columns(Matrix& m) {
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < m.cols(); ++j) {
            Vector vj = m.col(j);
            for (std::size_t i = 0; i < j; ++i) {
                Vector vi = m.col(i);
                double proj = dot(vi, vj);
                for (std::size_t r = 0; r < vj.size(); ++r) vj[r] -= proj * vi[r];
            }
            double nrm = norm2(vj);
            if (nrm > 0.0)
                for (double& v : vj) v /= nrm;
            m.set_col(j, vj);
        }
    }
}

// Thin SVD through the eigendecomposition of the smaller Gram matrix.
// Squaring costs resolution: Gram eigenvalues below kGramNoise x the largest
// are indistinguishable from rounding noise and are flushed to exact zero,
// so rank-deficient inputs report exactly rank(A) positive singular values.
inline constexpr double kGramNoise = 1e-12;

inline SvdResult thin_svd(const Matrix& A) {
    const std::size_t m = A.rows(), n = A.cols();
    if (m == 0 || n == 0) throw std::invalid_argument("thin_svd: empty matrix");
    const bool tall = n <= m;  // eigendecompose the smaller of A^T A / A A^T
    const Matrix At = A.transposed();
    const Matrix G = tall ? matmul(At, A) : matmul(A, At);
    EigResult eig = sym_eig(G);

    const std::size_t k = std::min(m, n);
    Vector sigma(k, 0.0);
    double lmax = 0.0;
    for (double l : eig.values) lmax = std::max(lmax, l);
    for (std::size_t i = 0; i < k; ++i) {
        double l = eig.values[i];
        sigma[i] = (l > kGramNoise * lmax) ? std::sqrt(l) : 0.0;
    }

    // "Small" side comes straight from the eigenvectors; the other side is
    // A (or A^T) applied to them, scaled by 1/sigma, with zero-sigma columns
    // filled from standard basis vectors and the whole set re-orthonormalized
    // in descending-sigma order (large columns are already orthonormal and
    // barely move; fills absorb the corrections).
    Matrix small_side(tall ? n : m, k);
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < small_side.rows(); ++i)
            small_side(i, j) = eig.vectors(i, j);

    Matrix big_side(tall ? m : n, k);
    const Matrix& apply = tall ? A : At;
    std::size_t fill = 0;  // next standard basis candidate
    for (std::size_t j = 0; j < k; ++j) {
        if (sigma[j] > 0.0) {
            Vector u = matvec(apply, small_side.col(j));
            for (double& v : u) v /= sigma[j];
            big_side.set_col(j, u);
        } else {
            Vector e(big_side.rows(), 0.0);
            if (fill < e.size()) e[fill++] = 1.0;
            big_side.set_col(j, e);
        }
    }
    orthonormalize_columns(big_side);
    // A zero column can survive when a basis candidate lay in the span of
    // earlier columns; walk remaining candidates until all columns are unit.
    for (std::size_t j = 0; j < k; ++j) {
        if (norm2(big_side.col(j)) > 0.5) continue;
        while (fill < big_side.rows()) {
            Vector e(big_side.rows(), 0.0);
            e[fill++] = 1.0;
            big_side.set_col(j, e);
            orthonormalize_columns(big_side);
            if (norm2(big_side.col(j)) > 0.5) break;
        }
    }

    SvdResult out;
    out.sigma = std::move(sigma);
    if (tall) {
        out.U = std::move(big_side);
        out.V = std::move(small_side);
    } else {
        out.U = std::move(small_side);
        out.V = std::move(big_side);
    }
    return out;
}

// Smallest singular value of U^T J taken over the row dimension of the
// product: if U^T J has fewer columns than rows it cannot have full row rank
// and the value is 0 by convention.
inline double sigma_min_of_product(const Matrix& U, const Matrix& J) {
    if (U.rows() != J.rows())
        throw std::invalid_argument("sigma_min_of_product: row dimensions disagree");
    Matrix P = matmul(U.transposed(), J);
    if (P.cols() < P.rows()) return 0.0;
    SvdResult svd = thin_svd(P);
    return svd.sigma.back();
}

}  // namespace slicefine
