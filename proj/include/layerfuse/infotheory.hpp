#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "layerfuse/linalg.hpp"
#include "layerfuse/matrix.hpp"

namespace layerfuse {

// Covariances of a pair of embeddings, sliced out of one joint estimate so
// the blocks are exactly consistent with the joint matrix.
struct CovarianceBundle {
  DenseMatrix sigma_l;  // d x d
  DenseMatrix sigma_m;  // d x d
  DenseMatrix cross;    // d x d, cov(psi_l, psi_m)
  DenseMatrix joint;    // 2d x 2d, [[sigma_l, cross], [cross^T, sigma_m]]
  std::size_t sample_count = 0;
  bool low_sample_warning = false;  // sample_count < 2 * block dim

  [[nodiscard]] std::size_t dim() const { return sigma_l.rows(); }
};

CovarianceBundle make_covariance_bundle(const DenseMatrix& psi_l, const DenseMatrix& psi_m);

// Ridge policy for log-determinants: an explicit value applies uniformly;
// nullopt derives 1e-6 * trace/dim from each matrix it regularizes.
using Ridge = std::optional<double>;

double resolve_ridge(const Ridge& ridge, const DenseMatrix& sigma);

// Differential entropy of a Gaussian: 0.5 * (d ln(2*pi*e) + ln|Sigma + rI|).
double gaussian_entropy(const DenseMatrix& sigma, const Ridge& ridge = std::nullopt);

struct MiResult {
  double value = 0.0;  // clamped at 0
  double raw = 0.0;    // unclamped, for diagnostics
};

// Closed-form Gaussian mutual information
// 0.5 * (ln|Sigma_l| + ln|Sigma_m| - ln|Sigma_joint|), each log-det ridged.
MiResult gaussian_mi(const CovarianceBundle& bundle, const Ridge& ridge = std::nullopt);

struct NmiResult {
  double value = 0.0;   // in [0, 1]
  double mi = 0.0;      // clamped MI used in the ratio
  double raw_mi = 0.0;
  double entropy_l = 0.0;
  double entropy_m = 0.0;
  bool fallback = false;  // true when a non-positive entropy forced I/(I+1)
};

// Normalized MI: I / sqrt(H_l * H_m) clamped to [0, 1]; falls back to the
// monotone squash I/(I+1) when either differential entropy is <= 0.
NmiResult nmi(const CovarianceBundle& bundle, const Ridge& ridge = std::nullopt);

// alpha^2 Sigma_l + (1-alpha)^2 Sigma_m + 2 alpha (1-alpha) sym(cross).
DenseMatrix merged_covariance(const CovarianceBundle& bundle, double alpha);

// Schur complement Sigma_c - Sigma_cY (Sigma_Y + rI)^-1 Sigma_Yc, symmetrized.
DenseMatrix conditional_covariance(const DenseMatrix& sigma_c, const DenseMatrix& sigma_cy,
                                   const DenseMatrix& sigma_y, const Ridge& ridge = std::nullopt);

// Covariances against the target variable Y.
struct TargetCovariances {
  DenseMatrix sigma_ly;  // d x dy
  DenseMatrix sigma_my;  // d x dy
  DenseMatrix sigma_y;   // dy x dy
};

struct IBEvaluation {
  double alpha = 0.0;
  double objective = 0.0;
  double logdet_merged = 0.0;
  double logdet_conditional = 0.0;
};

// L_IB(alpha) = 0.5 [ (1-beta) ln|Sigma_c + rI| + beta ln|Sigma_c|Y + rI| ]
// with Sigma_cY = alpha Sigma_lY + (1-alpha) Sigma_mY.
IBEvaluation ib_objective(const CovarianceBundle& bundle, const TargetCovariances& target,
                          double alpha, double beta, const Ridge& ridge = std::nullopt);

// Analytic d L_IB / d alpha through the trace identities; matches central
// finite differences of ib_objective.
double ib_objective_gradient(const CovarianceBundle& bundle, const TargetCovariances& target,
                             double alpha, double beta, const Ridge& ridge = std::nullopt);

enum class AlphaMode { NmiHeuristic, GridSearch, Fixed };
enum class TargetMode { FinalLayerEmbedding, TaskLabels };

struct IBConfig {
  double beta = 2.0;
  TargetMode target_mode = TargetMode::FinalLayerEmbedding;
  AlphaMode alpha_mode = AlphaMode::NmiHeuristic;
  std::size_t grid_steps = 101;  // >= 2
  double fixed_value = 0.5;      // in [0, 1]

  void validate() const;
};

struct AlphaSelection {
  double alpha = 0.0;
  std::optional<IBEvaluation> evaluation;
};

// nmi-heuristic passes the similarity through; grid-search minimizes the IB
// objective over a uniform grid on [0,1] (ties take the smaller alpha) and
// requires target covariances; fixed returns the configured value.
AlphaSelection select_alpha(double similarity,
                            const CovarianceBundle* bundle,
                            const TargetCovariances* target,
                            const IBConfig& config,
                            const Ridge& ridge = std::nullopt);

}  // namespace layerfuse
