#include "layerfuse/manifold.hpp"

#include <cmath>
#include <string>

namespace layerfuse {

void ManifoldConfig::validate() const {
  if (sigma_mode == SigmaMode::Fixed && !(sigma > 0.0)) {
    throw Error::invalid_input("fixed sigma must be > 0");
  }
  if (embed_dim < 1) throw Error::invalid_input("embed_dim must be >= 1");
  if (!(diffusion_time >= 0.0)) throw Error::invalid_input("diffusion time must be >= 0");
}

AffinityResult build_affinity(const DenseMatrix& points, const ManifoldConfig& config) {
  config.validate();
  const std::size_t n = points.rows();
  if (n < 2) throw Error::insufficient_samples("affinity needs at least 2 points");

  // Center per dimension; removes offset differences between layers.
  DenseMatrix centered = points;
  const std::size_t d = points.cols();
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += centered(i, j);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) centered(i, j) -= mean;
  }

  double sigma_sq;
  if (config.sigma_mode == SigmaMode::AutoMedian) {
    sigma_sq = median_pairwise_sqdist(centered);
    if (!(sigma_sq > 0.0)) {
      throw Error::degenerate_data(
          "median pairwise distance is zero (all points identical); use a fixed sigma");
    }
  } else {
    sigma_sq = config.sigma * config.sigma;
  }

  AffinityResult result;
  result.sigma_used = std::sqrt(sigma_sq);
  result.w = DenseMatrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    result.w(i, i) = 1.0;
    const double* ri = centered.row_ptr(i);
    for (std::size_t j = i + 1; j < n; ++j) {
      const double* rj = centered.row_ptr(j);
      double dist_sq = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = ri[c] - rj[c];
        dist_sq += diff * diff;
      }
      const double wij = std::exp(-dist_sq / sigma_sq);
      result.w(i, j) = wij;
      result.w(j, i) = wij;
    }
  }
  return result;
}

DiffusionOperatorBundle diffusion_decompose(const DenseMatrix& w) {
  const std::size_t n = w.rows();
  if (n == 0 || w.cols() != n) throw Error::invalid_input("affinity must be square");
  if (!is_symmetric(w, 1e-10)) throw Error::invalid_input("affinity must be symmetric");

  DiffusionOperatorBundle bundle;
  bundle.affinity = w;
  bundle.degrees.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += w(i, j);
    if (!(deg > 0.0)) {
      throw Error::degenerate_data("affinity row " + std::to_string(i) + " has zero sum");
    }
    bundle.degrees[i] = deg;
  }

  // Symmetric conjugate D^-1/2 W D^-1/2 shares eigenvalues with P = D^-1 W.
  DenseMatrix sym(n, n);
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) inv_sqrt[i] = 1.0 / std::sqrt(bundle.degrees[i]);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sym(i, j) = inv_sqrt[i] * w(i, j) * inv_sqrt[j];

  SpectralDecomposition eig = sym_eig(sym);
  bundle.eigenvalues = std::move(eig.eigenvalues);

  // phi = D^-1/2 psi, rescaled to unit norm; sign convention: the component
  // of largest magnitude is positive.
  bundle.eigenvectors = DenseMatrix(n, n);
  for (std::size_t col = 0; col < n; ++col) {
    double norm_sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double value = inv_sqrt[i] * eig.eigenvectors(i, col);
      bundle.eigenvectors(i, col) = value;
      norm_sq += value * value;
    }
    const double inv_norm = 1.0 / std::sqrt(norm_sq);
    double peak = 0.0;
    std::size_t peak_index = 0;
    for (std::size_t i = 0; i < n; ++i) {
      bundle.eigenvectors(i, col) *= inv_norm;
      const double mag = std::fabs(bundle.eigenvectors(i, col));
      if (mag > peak) {
        peak = mag;
        peak_index = i;
      }
    }
    if (bundle.eigenvectors(peak_index, col) < 0.0) {
      for (std::size_t i = 0; i < n; ++i) bundle.eigenvectors(i, col) = -bundle.eigenvectors(i, col);
    }
  }
  return bundle;
}

double eigenvalue_power(double lambda, double t) {
  if (t == 0.0) return 1.0;
  if (lambda == 0.0) return 0.0;
  if (lambda < 0.0 && t != std::floor(t)) return 0.0;
  return std::pow(lambda, t);
}

DiffusionEmbedding diffusion_map(const DiffusionOperatorBundle& bundle, std::size_t k, double t,
                                 std::size_t layer_index) {
  const std::size_t n = bundle.size();
  if (k < 1 || k > n - 1) {
    throw Error::invalid_input("embedding dimension k must satisfy 1 <= k <= N-1 (k=" +
                               std::to_string(k) + ", N=" + std::to_string(n) + ")");
  }
  if (!(t >= 0.0)) throw Error::invalid_input("diffusion time must be >= 0");

  DiffusionEmbedding embedding;
  embedding.layer_index = layer_index;
  embedding.time = t;
  embedding.coords = DenseMatrix(n, k);
  embedding.eigenvalues_used.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    const double lambda = bundle.eigenvalues[j + 1];  // skip the trivial pair
    embedding.eigenvalues_used[j] = lambda;
    const double factor = eigenvalue_power(lambda, t);
    for (std::size_t i = 0; i < n; ++i) {
      embedding.coords(i, j) = factor * bundle.eigenvectors(i, j + 1);
    }
  }
  return embedding;
}

double diffusion_distance(const DiffusionOperatorBundle& bundle, std::size_t i, std::size_t j,
                          std::size_t k, double t) {
  const std::size_t n = bundle.size();
  if (i >= n || j >= n) throw Error::invalid_input("diffusion_distance index out of range");
  if (k < 1 || k > n - 1) throw Error::invalid_input("diffusion_distance k out of range");

  double sum = 0.0;
  for (std::size_t m = 1; m <= k; ++m) {
    // lambda^(2t) computed as (lambda^t)^2: keeps the sum nonnegative and
    // matches the embedding-space Euclidean distance on eigenvalues that are
    // numerically slightly negative.
    const double factor = eigenvalue_power(bundle.eigenvalues[m], t);
    const double diff = bundle.eigenvectors(i, m) - bundle.eigenvectors(j, m);
    sum += factor * factor * diff * diff;
  }
  return std::sqrt(sum);
}

DiffusionEmbedding embed_points(const DenseMatrix& points, const ManifoldConfig& config,
                                std::size_t layer_index, double* sigma_used) {
  const AffinityResult affinity = build_affinity(points, config);
  if (sigma_used != nullptr) *sigma_used = affinity.sigma_used;
  const DiffusionOperatorBundle bundle = diffusion_decompose(affinity.w);
  const std::size_t k = std::min(config.embed_dim, bundle.size() - 1);
  return diffusion_map(bundle, k, config.diffusion_time, layer_index);
}

}  // namespace layerfuse
