#include "layerfuse/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "layerfuse/parallel.hpp"

namespace layerfuse {

namespace {

double mean_cosine(const DenseMatrix& a, const DenseMatrix& b) {
  double sum = 0.0;
  const std::size_t n = a.rows();
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ra = a.row_ptr(i);
    const double* rb = b.row_ptr(i);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      dot += ra[j] * rb[j];
      na += ra[j] * ra[j];
      nb += rb[j] * rb[j];
    }
    if (na == 0.0 && nb == 0.0) {
      sum += 1.0;  // identical zero vectors
    } else if (na == 0.0 || nb == 0.0) {
      sum += 0.0;
    } else {
      sum += dot / std::sqrt(na * nb);
    }
  }
  return sum / static_cast<double>(n);
}

double mean_sq_distance(const DenseMatrix& a, const DenseMatrix& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double diff = a.data()[i] - b.data()[i];
    sum += diff * diff;
  }
  return sum / static_cast<double>(a.rows());
}

double mean_sq_mahalanobis(const DenseMatrix& a, const DenseMatrix& b, const Ridge& ridge) {
  // Pooled covariance of the pair regularizes the metric.
  const DenseMatrix pooled =
      scale(add(covariance(a), covariance(b)), 0.5);
  const DenseMatrix l = cholesky_factor(pooled, resolve_ridge(ridge, pooled));

  const std::size_t n = a.rows();
  const std::size_t k = a.cols();
  DenseMatrix diff(k, 1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) diff(j, 0) = a(i, j) - b(i, j);
    const DenseMatrix solved = cholesky_solve(l, diff);
    double quad = 0.0;
    for (std::size_t j = 0; j < k; ++j) quad += diff(j, 0) * solved(j, 0);
    total += std::max(quad, 0.0);
  }
  return total / static_cast<double>(n);
}

double median_of(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size();
  if (m == 0) return 0.0;
  if (m % 2 == 1) return values[m / 2];
  return 0.5 * (values[m / 2 - 1] + values[m / 2]);
}

double rbf_score(double value, double calibration) {
  if (calibration <= 0.0) return value <= 0.0 ? 1.0 : 0.0;
  return std::exp(-value / calibration);
}

}  // namespace

Measure measure_from_string(const std::string& name) {
  if (name == "nmi") return Measure::Nmi;
  if (name == "cosine") return Measure::Cosine;
  if (name == "euclidean-rbf") return Measure::EuclideanRbf;
  if (name == "mahalanobis-rbf") return Measure::MahalanobisRbf;
  throw Error::invalid_input("unknown similarity measure '" + name + "'");
}

std::string measure_to_string(Measure measure) {
  switch (measure) {
    case Measure::Nmi: return "nmi";
    case Measure::Cosine: return "cosine";
    case Measure::EuclideanRbf: return "euclidean-rbf";
    case Measure::MahalanobisRbf: return "mahalanobis-rbf";
  }
  return "nmi";
}

std::size_t SimilarityMatrix::row_of(std::size_t layer_id) const {
  for (std::size_t i = 0; i < layer_ids.size(); ++i) {
    if (layer_ids[i] == layer_id) return i;
  }
  throw Error::invalid_input("layer id " + std::to_string(layer_id) +
                             " not present in similarity matrix");
}

double SimilarityMatrix::score(std::size_t layer_id_a, std::size_t layer_id_b) const {
  return values(row_of(layer_id_a), row_of(layer_id_b));
}

SimilarityMatrix build_similarity_matrix(const std::vector<DiffusionEmbedding>& embeddings,
                                         const std::vector<std::size_t>& layer_ids,
                                         Measure measure, const SimilarityParams& params) {
  const std::size_t count = embeddings.size();
  if (count < 2) throw Error::invalid_input("similarity needs at least 2 layers");
  if (layer_ids.size() != count) {
    throw Error::invalid_input("layer id list length does not match embeddings");
  }
  const std::size_t n = embeddings.front().coords.rows();
  const std::size_t k = embeddings.front().coords.cols();
  for (const DiffusionEmbedding& e : embeddings) {
    if (e.coords.rows() != n || e.coords.cols() != k) {
      throw Error::invalid_input("embeddings must share sample count and dimension");
    }
  }

  SimilarityMatrix matrix;
  matrix.measure = measure;
  matrix.layer_ids = layer_ids;
  matrix.values = DenseMatrix(count, count);
  for (std::size_t i = 0; i < count; ++i) matrix.values(i, i) = 1.0;

  struct PairIndex {
    std::size_t a, b;
  };
  std::vector<PairIndex> pairs;
  pairs.reserve(count * (count - 1) / 2);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = i + 1; j < count; ++j) pairs.push_back({i, j});

  if (measure == Measure::EuclideanRbf || measure == Measure::MahalanobisRbf) {
    std::vector<double> raw(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t p) {
      const auto& [i, j] = pairs[p];
      raw[p] = measure == Measure::EuclideanRbf
                   ? mean_sq_distance(embeddings[i].coords, embeddings[j].coords)
                   : mean_sq_mahalanobis(embeddings[i].coords, embeddings[j].coords,
                                         params.ridge);
    });
    matrix.rbf_median = median_of(raw);
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const double s = rbf_score(raw[p], matrix.rbf_median);
      matrix.values(pairs[p].a, pairs[p].b) = s;
      matrix.values(pairs[p].b, pairs[p].a) = s;
    }
    return matrix;
  }

  std::vector<double> scores(pairs.size());
  std::vector<unsigned char> fallbacks(pairs.size(), 0);
  parallel_for(pairs.size(), [&](std::size_t p) {
    const auto& [i, j] = pairs[p];
    if (measure == Measure::Cosine) {
      const double c = mean_cosine(embeddings[i].coords, embeddings[j].coords);
      scores[p] = std::clamp(0.5 * (c + 1.0), 0.0, 1.0);
    } else {
      const CovarianceBundle bundle =
          make_covariance_bundle(embeddings[i].coords, embeddings[j].coords);
      const NmiResult result = nmi(bundle, params.ridge);
      scores[p] = result.value;
      fallbacks[p] = result.fallback ? 1 : 0;
    }
  });
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    matrix.values(pairs[p].a, pairs[p].b) = scores[p];
    matrix.values(pairs[p].b, pairs[p].a) = scores[p];
    matrix.nmi_fallback_count += fallbacks[p];
  }
  return matrix;
}

AdjacentPair most_similar_adjacent_pair(const SimilarityMatrix& matrix,
                                        const std::vector<std::size_t>& active) {
  if (active.size() < 2) {
    throw Error::exhausted("fewer than 2 active layers; nothing to pair");
  }
  AdjacentPair best;
  bool found = false;
  for (std::size_t i = 0; i + 1 < active.size(); ++i) {
    const double s = matrix.score(active[i], active[i + 1]);
    // >= keeps the deepest pair on ties
    if (!found || s >= best.score) {
      best = {active[i], active[i + 1], s};
      found = true;
    }
  }
  return best;
}

std::string similarity_to_csv(const SimilarityMatrix& matrix) {
  std::string out = "layer";
  char buf[64];
  for (std::size_t id : matrix.layer_ids) {
    std::snprintf(buf, sizeof buf, ",%zu", id);
    out += buf;
  }
  out += "\n";
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu", matrix.layer_ids[i]);
    out += buf;
    for (std::size_t j = 0; j < matrix.size(); ++j) {
      std::snprintf(buf, sizeof buf, ",%.6f", matrix.values(i, j));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

std::string similarity_to_pgm(const SimilarityMatrix& matrix) {
  const std::size_t n = matrix.size();
  std::string out = "P2\n" + std::to_string(n) + " " + std::to_string(n) + "\n255\n";
  char buf[16];
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double v = std::clamp(matrix.values(i, j), 0.0, 1.0);
      const int gray = static_cast<int>(std::lround(v * 255.0));
      std::snprintf(buf, sizeof buf, j + 1 == n ? "%d" : "%d ", gray);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace layerfuse
