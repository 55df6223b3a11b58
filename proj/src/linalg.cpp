#include "layerfuse/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "layerfuse/rng.hpp"

namespace layerfuse {

namespace {

constexpr double kSymmetryRelTol = 1e-10;
constexpr double kJacobiOffTol = 1e-12;
constexpr int kJacobiMaxSweeps = 100;

double off_diagonal_norm(const DenseMatrix& a) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (i != j) sum += a(i, j) * a(i, j);
  return std::sqrt(sum);
}

}  // namespace

SpectralDecomposition sym_eig(const DenseMatrix& input) {
  if (input.rows() != input.cols()) {
    throw Error::invalid_input("sym_eig requires a square matrix, got " +
                               std::to_string(input.rows()) + "x" +
                               std::to_string(input.cols()));
  }
  if (!is_symmetric(input, kSymmetryRelTol)) {
    throw Error::invalid_input("sym_eig input is not symmetric within tolerance");
  }

  const std::size_t n = input.rows();
  DenseMatrix a = symmetric_part(input);
  DenseMatrix v = DenseMatrix::identity(n);
  const double scale = frobenius_norm(a);
  const double stop = kJacobiOffTol * std::max(scale, 1e-300);

  for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
    if (off_diagonal_norm(a) <= stop) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        // Classic two-sided rotation (Golub & Van Loan sym.schur2).
        const double tau = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;

        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (off_diagonal_norm(a) > stop * 1e3 && n > 1) {
    throw Error::numerical_failure("jacobi eigensolver did not converge");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&a](std::size_t lhs, std::size_t rhs) { return a(lhs, lhs) > a(rhs, rhs); });

  SpectralDecomposition out;
  out.eigenvalues.resize(n);
  out.eigenvectors = DenseMatrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.eigenvalues[k] = a(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.eigenvectors(i, k) = v(i, order[k]);
  }
  return out;
}

DenseMatrix cholesky_factor(const DenseMatrix& s, double ridge) {
  if (s.rows() != s.cols()) {
    throw Error::invalid_input("cholesky requires a square matrix");
  }
  if (ridge < 0.0) throw Error::invalid_input("cholesky ridge must be >= 0");
  if (!is_symmetric(s, kSymmetryRelTol)) {
    throw Error::invalid_input("cholesky input is not symmetric within tolerance");
  }

  const std::size_t n = s.rows();
  DenseMatrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = s(j, j) + ridge;
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0)) {
      throw Error::singularity("matrix not positive definite at pivot " + std::to_string(j),
                               j);
    }
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double sum = 0.5 * (s(i, j) + s(j, i));
      for (std::size_t k = 0; k < j; ++k) sum -= l(i, k) * l(j, k);
      l(i, j) = sum / ljj;
    }
  }
  return l;
}

double cholesky_logdet(const DenseMatrix& s, double ridge) {
  const DenseMatrix l = cholesky_factor(s, ridge);
  double logdet = 0.0;
  for (std::size_t i = 0; i < l.rows(); ++i) logdet += std::log(l(i, i));
  return 2.0 * logdet;
}

double cholesky_logdet_auto(const DenseMatrix& s) {
  try {
    return cholesky_logdet(s, 0.0);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Singularity || s.rows() == 0) throw;
    const double fallback = 1e-9 * trace(s) / static_cast<double>(s.rows());
    if (!(fallback > 0.0)) throw;
    return cholesky_logdet(s, fallback);
  }
}

DenseMatrix cholesky_solve(const DenseMatrix& chol_lower, const DenseMatrix& b) {
  const std::size_t n = chol_lower.rows();
  if (b.rows() != n) throw Error::invalid_input("cholesky_solve shape mismatch");
  DenseMatrix x = b;
  // forward: L y = b
  for (std::size_t col = 0; col < x.cols(); ++col) {
    for (std::size_t i = 0; i < n; ++i) {
      double sum = x(i, col);
      for (std::size_t k = 0; k < i; ++k) sum -= chol_lower(i, k) * x(k, col);
      x(i, col) = sum / chol_lower(i, i);
    }
    // backward: L^T x = y
    for (std::size_t ii = n; ii-- > 0;) {
      double sum = x(ii, col);
      for (std::size_t k = ii + 1; k < n; ++k) sum -= chol_lower(k, ii) * x(k, col);
      x(ii, col) = sum / chol_lower(ii, ii);
    }
  }
  return x;
}

DenseMatrix covariance(const DenseMatrix& samples) {
  const std::size_t n = samples.rows();
  const std::size_t d = samples.cols();
  if (n < 2) {
    throw Error::insufficient_samples("covariance needs at least 2 samples, got " +
                                      std::to_string(n));
  }
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = samples.row_ptr(i);
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (double& m : mean) m /= static_cast<double>(n);

  DenseMatrix cov(d, d);
  std::vector<double> centered(d);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = samples.row_ptr(i);
    for (std::size_t j = 0; j < d; ++j) centered[j] = row[j] - mean[j];
    for (std::size_t r = 0; r < d; ++r) {
      const double cr = centered[r];
      double* out = cov.row_ptr(r);
      for (std::size_t c = r; c < d; ++c) out[c] += cr * centered[c];
    }
  }
  const double inv = 1.0 / static_cast<double>(n - 1);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = r; c < d; ++c) {
      cov(r, c) *= inv;
      cov(c, r) = cov(r, c);
    }
  return cov;
}

DenseMatrix cross_covariance(const DenseMatrix& x, const DenseMatrix& y) {
  if (x.rows() != y.rows()) {
    throw Error::invalid_input("cross_covariance sample counts differ: " +
                               std::to_string(x.rows()) + " vs " + std::to_string(y.rows()));
  }
  const std::size_t n = x.rows();
  if (n < 2) throw Error::insufficient_samples("cross_covariance needs at least 2 samples");

  const std::size_t p = x.cols();
  const std::size_t q = y.cols();
  std::vector<double> mx(p, 0.0), my(q, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) mx[j] += x(i, j);
    for (std::size_t j = 0; j < q; ++j) my[j] += y(i, j);
  }
  for (double& m : mx) m /= static_cast<double>(n);
  for (double& m : my) m /= static_cast<double>(n);

  DenseMatrix cov(p, q);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < p; ++r) {
      const double cx = x(i, r) - mx[r];
      if (cx == 0.0) continue;
      double* out = cov.row_ptr(r);
      for (std::size_t c = 0; c < q; ++c) out[c] += cx * (y(i, c) - my[c]);
    }
  }
  const double inv = 1.0 / static_cast<double>(n - 1);
  for (double& v : cov.data()) v *= inv;
  return cov;
}

double power_iteration_max_eig(const MatVec& apply, std::size_t dim, std::size_t iters,
                               std::uint64_t seed) {
  if (dim == 0) throw Error::invalid_input("power iteration requires dim >= 1");
  if (iters == 0) throw Error::invalid_input("power iteration requires iters >= 1");

  for (int restart = 0; restart <= 3; ++restart) {
    Rng rng(seed + static_cast<std::uint64_t>(restart));
    std::vector<double> v(dim), w(dim);
    for (double& e : v) e = rng.normal();
    double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (!(norm > 0.0)) continue;
    for (double& e : v) e /= norm;

    double rayleigh = 0.0;
    bool collapsed = false;
    for (std::size_t it = 0; it < iters; ++it) {
      apply(std::span<const double>(v), std::span<double>(w));
      rayleigh = std::inner_product(v.begin(), v.end(), w.begin(), 0.0);
      const double wnorm = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
      if (!(wnorm > 0.0)) {
        collapsed = true;
        break;
      }
      for (std::size_t i = 0; i < dim; ++i) v[i] = w[i] / wnorm;
    }
    if (!collapsed) return std::fabs(rayleigh);
  }
  throw Error::numerical_failure("power iteration start vector collapsed after 3 restarts");
}

double median_pairwise_sqdist(const DenseMatrix& x) {
  const std::size_t n = x.rows();
  if (n < 2) throw Error::insufficient_samples("median_pairwise_sqdist needs at least 2 rows");

  std::vector<double> dists;
  dists.reserve(n * (n - 1) / 2);
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ri = x.row_ptr(i);
    for (std::size_t j = i + 1; j < n; ++j) {
      const double* rj = x.row_ptr(j);
      double sum = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = ri[k] - rj[k];
        sum += diff * diff;
      }
      dists.push_back(sum);
    }
  }
  std::sort(dists.begin(), dists.end());
  const std::size_t m = dists.size();
  if (m % 2 == 1) return dists[m / 2];
  return 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
}

}  // namespace layerfuse
