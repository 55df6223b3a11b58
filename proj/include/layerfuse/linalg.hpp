#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "layerfuse/matrix.hpp"

namespace layerfuse {

struct SpectralDecomposition {
  std::vector<double> eigenvalues;  // sorted non-increasing
  DenseMatrix eigenvectors;         // column k pairs with eigenvalues[k]
};

// Symmetric eigendecomposition by cyclic Jacobi rotations. Input must be
// square and symmetric within 1e-10 relative tolerance; it is symmetrized
// internally before sweeping. Eigenpairs are returned sorted by descending
// eigenvalue with orthonormal eigenvector columns.
SpectralDecomposition sym_eig(const DenseMatrix& a);

// Lower-triangular Cholesky factor of s + ridge*I. Throws a singularity
// error carrying the failing pivot index when the matrix is not positive
// definite.
DenseMatrix cholesky_factor(const DenseMatrix& s, double ridge);

// ln|s + ridge*I| via the Cholesky factorization.
double cholesky_logdet(const DenseMatrix& s, double ridge);

// Like cholesky_logdet with ridge 0, retrying once with 1e-9*trace/dim when
// the bare factorization fails.
double cholesky_logdet_auto(const DenseMatrix& s);

// Solves (L L^T) X = B given the lower factor L.
DenseMatrix cholesky_solve(const DenseMatrix& chol_lower, const DenseMatrix& b);

// Unbiased mean-centered covariance of row-wise samples (divides by N-1).
DenseMatrix covariance(const DenseMatrix& samples);

// Mean-centered cross-covariance between two sample matrices sharing N rows.
DenseMatrix cross_covariance(const DenseMatrix& x, const DenseMatrix& y);

using MatVec = std::function<void(std::span<const double>, std::span<double>)>;

// Rayleigh-quotient power iteration against a symmetric linear oracle.
// Returns the dominant |eigenvalue| estimate after `iters` normalized
// iterations; restarts with the next seed when the iterate collapses to
// zero, failing after 3 restarts.
double power_iteration_max_eig(const MatVec& apply, std::size_t dim, std::size_t iters,
                               std::uint64_t seed);

// Median of all N(N-1)/2 squared pairwise Euclidean distances between rows;
// an even count averages the two middle values.
double median_pairwise_sqdist(const DenseMatrix& x);

}  // namespace layerfuse
