#pragma once

#include <cstdint>
#include <vector>

#include "layerfuse/linalg.hpp"
#include "layerfuse/matrix.hpp"

namespace layerfuse {

enum class SigmaMode { AutoMedian, Fixed };

struct ManifoldConfig {
  SigmaMode sigma_mode = SigmaMode::AutoMedian;
  double sigma = 1.0;      // used when sigma_mode == Fixed; must be > 0
  std::size_t embed_dim = 8;
  double diffusion_time = 1.0;

  void validate() const;
};

struct AffinityResult {
  DenseMatrix w;      // symmetric, diagonal 1, entries in (0,1]
  double sigma_used;  // auto mode: sqrt of the median pairwise squared distance
};

// Gaussian-kernel affinity W_ij = exp(-|h_i - h_j|^2 / sigma^2) over the
// rows of `points`, which are mean-centered per dimension first.
AffinityResult build_affinity(const DenseMatrix& points, const ManifoldConfig& config);

// Spectral decomposition of the random-walk operator P = D^-1 W, obtained
// through the symmetric conjugate D^-1/2 W D^-1/2. Eigenvectors are mapped
// back to eigenvectors of P, rescaled to unit norm, and sign-fixed so the
// largest-magnitude component is positive.
struct DiffusionOperatorBundle {
  DenseMatrix affinity;
  std::vector<double> degrees;
  std::vector<double> eigenvalues;  // descending, eigenvalues[0] = 1
  DenseMatrix eigenvectors;         // columns are eigenvectors of P

  [[nodiscard]] std::size_t size() const { return degrees.size(); }
};

DiffusionOperatorBundle diffusion_decompose(const DenseMatrix& w);

struct DiffusionEmbedding {
  std::size_t layer_index = 0;
  DenseMatrix coords;                   // N x k
  std::vector<double> eigenvalues_used; // the k nontrivial eigenvalues
  double time = 1.0;
};

// Column j of the embedding is lambda_{j+2}^t * phi_{j+2} (1-based eigen
// indices; the trivial lambda_1 pair is skipped). t = 0 returns the raw
// eigenvector coordinates.
DiffusionEmbedding diffusion_map(const DiffusionOperatorBundle& bundle, std::size_t k, double t,
                                 std::size_t layer_index = 0);

// Diffusion distance between points i and j through the k nontrivial
// eigenpairs; equals the Euclidean distance between embedding rows.
double diffusion_distance(const DiffusionOperatorBundle& bundle, std::size_t i, std::size_t j,
                          std::size_t k, double t);

// Full pipeline for one activation cloud: center, affinity, decompose, map.
DiffusionEmbedding embed_points(const DenseMatrix& points, const ManifoldConfig& config,
                                std::size_t layer_index = 0, double* sigma_used = nullptr);

// lambda^t with the conventions shared by diffusion_map and
// diffusion_distance: t = 0 gives 1, and negative eigenvalues raised to a
// non-integer power are treated as 0 (they only arise as numerical noise;
// the Gaussian kernel is positive semidefinite).
double eigenvalue_power(double lambda, double t);

}  // namespace layerfuse
