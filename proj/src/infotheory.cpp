#include "layerfuse/infotheory.hpp"

#include <algorithm>
#include <cmath>

namespace layerfuse {

namespace {

constexpr double kLnTwoPiE = 2.8378770664093454835606594728112;  // ln(2*pi*e)
constexpr double kAutoRidgeScale = 1e-6;

// tr(A * B) for square A, B of equal size.
double trace_product(const DenseMatrix& a, const DenseMatrix& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) sum += a(i, k) * b(k, i);
  return sum;
}

DenseMatrix spd_inverse(const DenseMatrix& sigma, double ridge) {
  const DenseMatrix l = cholesky_factor(sigma, ridge);
  return cholesky_solve(l, DenseMatrix::identity(sigma.rows()));
}

}  // namespace

double resolve_ridge(const Ridge& ridge, const DenseMatrix& sigma) {
  if (ridge.has_value()) {
    if (*ridge < 0.0) throw Error::invalid_input("ridge must be >= 0");
    return *ridge;
  }
  if (sigma.rows() == 0) return 0.0;
  return kAutoRidgeScale * trace(sigma) / static_cast<double>(sigma.rows());
}

CovarianceBundle make_covariance_bundle(const DenseMatrix& psi_l, const DenseMatrix& psi_m) {
  if (psi_l.rows() != psi_m.rows()) {
    throw Error::invalid_input("covariance bundle requires equal sample counts");
  }
  if (psi_l.cols() != psi_m.cols()) {
    throw Error::invalid_input("covariance bundle requires equal embedding dims");
  }
  const std::size_t n = psi_l.rows();
  const std::size_t d = psi_l.cols();

  DenseMatrix stacked(n, 2 * d);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = stacked.row_ptr(i);
    const double* rl = psi_l.row_ptr(i);
    const double* rm = psi_m.row_ptr(i);
    std::copy(rl, rl + d, row);
    std::copy(rm, rm + d, row + d);
  }

  CovarianceBundle bundle;
  bundle.joint = covariance(stacked);
  bundle.sample_count = n;
  bundle.low_sample_warning = n < 2 * d;
  bundle.sigma_l = DenseMatrix(d, d);
  bundle.sigma_m = DenseMatrix(d, d);
  bundle.cross = DenseMatrix(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      bundle.sigma_l(i, j) = bundle.joint(i, j);
      bundle.sigma_m(i, j) = bundle.joint(d + i, d + j);
      bundle.cross(i, j) = bundle.joint(i, d + j);
    }
  }
  return bundle;
}

double gaussian_entropy(const DenseMatrix& sigma, const Ridge& ridge) {
  if (sigma.rows() != sigma.cols()) throw Error::invalid_input("entropy requires square sigma");
  const double r = resolve_ridge(ridge, sigma);
  const double logdet = cholesky_logdet(sigma, r);
  return 0.5 * (static_cast<double>(sigma.rows()) * kLnTwoPiE + logdet);
}

MiResult gaussian_mi(const CovarianceBundle& bundle, const Ridge& ridge) {
  const double ld_l = cholesky_logdet(bundle.sigma_l, resolve_ridge(ridge, bundle.sigma_l));
  const double ld_m = cholesky_logdet(bundle.sigma_m, resolve_ridge(ridge, bundle.sigma_m));
  const double ld_joint = cholesky_logdet(bundle.joint, resolve_ridge(ridge, bundle.joint));
  MiResult result;
  result.raw = 0.5 * (ld_l + ld_m - ld_joint);
  result.value = std::max(0.0, result.raw);
  return result;
}

NmiResult nmi(const CovarianceBundle& bundle, const Ridge& ridge) {
  const MiResult mi = gaussian_mi(bundle, ridge);
  NmiResult result;
  result.mi = mi.value;
  result.raw_mi = mi.raw;
  result.entropy_l = gaussian_entropy(bundle.sigma_l, ridge);
  result.entropy_m = gaussian_entropy(bundle.sigma_m, ridge);

  if (result.entropy_l > 0.0 && result.entropy_m > 0.0) {
    const double ratio = mi.value / std::sqrt(result.entropy_l * result.entropy_m);
    result.value = std::clamp(ratio, 0.0, 1.0);
  } else {
    // Differential entropies can be negative, where the normalization is
    // undefined; fall back to a monotone squash of the MI.
    result.fallback = true;
    result.value = mi.value / (mi.value + 1.0);
  }
  return result;
}

DenseMatrix merged_covariance(const CovarianceBundle& bundle, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw Error::invalid_input("alpha must lie in [0, 1]");
  const double a2 = alpha * alpha;
  const double b2 = (1.0 - alpha) * (1.0 - alpha);
  const double ab2 = 2.0 * alpha * (1.0 - alpha);
  const DenseMatrix sym_cross = symmetric_part(bundle.cross);

  DenseMatrix merged(bundle.dim(), bundle.dim());
  for (std::size_t i = 0; i < merged.data().size(); ++i) {
    merged.data()[i] = a2 * bundle.sigma_l.data()[i] + b2 * bundle.sigma_m.data()[i] +
                       ab2 * sym_cross.data()[i];
  }
  return merged;
}

DenseMatrix conditional_covariance(const DenseMatrix& sigma_c, const DenseMatrix& sigma_cy,
                                   const DenseMatrix& sigma_y, const Ridge& ridge) {
  if (sigma_c.rows() != sigma_c.cols() || sigma_y.rows() != sigma_y.cols() ||
      sigma_cy.rows() != sigma_c.rows() || sigma_cy.cols() != sigma_y.rows()) {
    throw Error::invalid_input("conditional_covariance shape mismatch");
  }
  const double r = resolve_ridge(ridge, sigma_y);
  const DenseMatrix l = cholesky_factor(sigma_y, r);
  const DenseMatrix solved = cholesky_solve(l, transpose(sigma_cy));  // (Sy+rI)^-1 Syc
  const DenseMatrix reduction = matmul(sigma_cy, solved);
  return symmetric_part(subtract(sigma_c, reduction));
}

void IBConfig::validate() const {
  if (!(beta > 0.0)) throw Error::invalid_input("beta must be > 0");
  if (alpha_mode == AlphaMode::GridSearch && grid_steps < 2) {
    throw Error::invalid_input("grid search needs at least 2 steps");
  }
  if (alpha_mode == AlphaMode::Fixed && (fixed_value < 0.0 || fixed_value > 1.0)) {
    throw Error::invalid_input("fixed alpha must lie in [0, 1]");
  }
}

IBEvaluation ib_objective(const CovarianceBundle& bundle, const TargetCovariances& target,
                          double alpha, double beta, const Ridge& ridge) {
  if (alpha < 0.0 || alpha > 1.0) throw Error::invalid_input("alpha must lie in [0, 1]");
  if (!(beta > 0.0)) throw Error::invalid_input("beta must be > 0");

  const DenseMatrix sigma_c = merged_covariance(bundle, alpha);
  DenseMatrix sigma_cy(target.sigma_ly.rows(), target.sigma_ly.cols());
  for (std::size_t i = 0; i < sigma_cy.data().size(); ++i) {
    sigma_cy.data()[i] =
        alpha * target.sigma_ly.data()[i] + (1.0 - alpha) * target.sigma_my.data()[i];
  }
  const DenseMatrix sigma_cond =
      conditional_covariance(sigma_c, sigma_cy, target.sigma_y, ridge);

  IBEvaluation eval;
  eval.alpha = alpha;
  eval.logdet_merged = cholesky_logdet(sigma_c, resolve_ridge(ridge, sigma_c));
  eval.logdet_conditional = cholesky_logdet(sigma_cond, resolve_ridge(ridge, sigma_cond));
  eval.objective = 0.5 * ((1.0 - beta) * eval.logdet_merged + beta * eval.logdet_conditional);
  return eval;
}

double ib_objective_gradient(const CovarianceBundle& bundle, const TargetCovariances& target,
                             double alpha, double beta, const Ridge& ridge) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw Error::invalid_input("gradient requires alpha in (0, 1)");
  }
  if (!(beta > 0.0)) throw Error::invalid_input("beta must be > 0");

  const std::size_t d = bundle.dim();
  const DenseMatrix sym_cross = symmetric_part(bundle.cross);

  const DenseMatrix sigma_c = merged_covariance(bundle, alpha);
  DenseMatrix d_sigma_c(d, d);
  for (std::size_t i = 0; i < d_sigma_c.data().size(); ++i) {
    d_sigma_c.data()[i] = 2.0 * alpha * bundle.sigma_l.data()[i] -
                          2.0 * (1.0 - alpha) * bundle.sigma_m.data()[i] +
                          2.0 * (1.0 - 2.0 * alpha) * sym_cross.data()[i];
  }

  DenseMatrix sigma_cy(target.sigma_ly.rows(), target.sigma_ly.cols());
  DenseMatrix d_sigma_cy(target.sigma_ly.rows(), target.sigma_ly.cols());
  for (std::size_t i = 0; i < sigma_cy.data().size(); ++i) {
    sigma_cy.data()[i] =
        alpha * target.sigma_ly.data()[i] + (1.0 - alpha) * target.sigma_my.data()[i];
    d_sigma_cy.data()[i] = target.sigma_ly.data()[i] - target.sigma_my.data()[i];
  }

  // M = (Sigma_Y + rI)^-1 Sigma_Yc; the ridge is held constant in alpha
  // (the default trace-scaled policy adds only O(1e-6) relative drift).
  const double r_y = resolve_ridge(ridge, target.sigma_y);
  const DenseMatrix l_y = cholesky_factor(target.sigma_y, r_y);
  const DenseMatrix m = cholesky_solve(l_y, transpose(sigma_cy));
  const DenseMatrix sigma_cond = symmetric_part(subtract(sigma_c, matmul(sigma_cy, m)));

  // d Sigma_c|Y / d alpha = d Sigma_c - (G M + (G M)^T), G = d Sigma_cY.
  const DenseMatrix gm = matmul(d_sigma_cy, m);
  DenseMatrix d_sigma_cond = d_sigma_c;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) d_sigma_cond(i, j) -= gm(i, j) + gm(j, i);

  const DenseMatrix inv_c = spd_inverse(sigma_c, resolve_ridge(ridge, sigma_c));
  const DenseMatrix inv_cond = spd_inverse(sigma_cond, resolve_ridge(ridge, sigma_cond));

  return 0.5 * ((1.0 - beta) * trace_product(inv_c, d_sigma_c) +
                beta * trace_product(inv_cond, d_sigma_cond));
}

AlphaSelection select_alpha(double similarity, const CovarianceBundle* bundle,
                            const TargetCovariances* target, const IBConfig& config,
                            const Ridge& ridge) {
  config.validate();
  AlphaSelection selection;
  switch (config.alpha_mode) {
    case AlphaMode::NmiHeuristic:
      selection.alpha = std::clamp(similarity, 0.0, 1.0);
      return selection;
    case AlphaMode::Fixed:
      selection.alpha = config.fixed_value;
      return selection;
    case AlphaMode::GridSearch:
      break;
  }

  if (bundle == nullptr || target == nullptr) {
    throw Error::missing_target("grid-search alpha selection requires target covariances");
  }
  for (std::size_t i = 0; i < config.grid_steps; ++i) {
    const double alpha =
        static_cast<double>(i) / static_cast<double>(config.grid_steps - 1);
    const IBEvaluation eval = ib_objective(*bundle, *target, alpha, config.beta, ridge);
    if (!selection.evaluation || eval.objective < selection.evaluation->objective) {
      selection.evaluation = eval;
      selection.alpha = alpha;
    }
  }
  return selection;
}

}  // namespace layerfuse
