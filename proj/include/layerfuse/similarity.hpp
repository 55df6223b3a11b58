#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "layerfuse/infotheory.hpp"
#include "layerfuse/manifold.hpp"
#include "layerfuse/matrix.hpp"

namespace layerfuse {

enum class Measure { Nmi, Cosine, EuclideanRbf, MahalanobisRbf };

Measure measure_from_string(const std::string& name);
std::string measure_to_string(Measure measure);

struct SimilarityParams {
  Ridge ridge;  // nullopt = trace-scaled default
};

struct SimilarityMatrix {
  DenseMatrix values;             // L x L, symmetric, diagonal 1, entries in [0,1]
  std::vector<std::size_t> layer_ids;  // values row/col i describes layer_ids[i]
  Measure measure = Measure::Nmi;
  double rbf_median = 0.0;        // calibration constant for the rbf measures
  std::size_t nmi_fallback_count = 0;

  [[nodiscard]] std::size_t size() const { return layer_ids.size(); }
  [[nodiscard]] std::size_t row_of(std::size_t layer_id) const;
  [[nodiscard]] double score(std::size_t layer_id_a, std::size_t layer_id_b) const;
};

// Pairwise layer similarity over per-layer diffusion embeddings, which must
// share N and k. Diagonal is fixed at 1 by convention.
SimilarityMatrix build_similarity_matrix(const std::vector<DiffusionEmbedding>& embeddings,
                                         const std::vector<std::size_t>& layer_ids,
                                         Measure measure,
                                         const SimilarityParams& params = {});

struct AdjacentPair {
  std::size_t low = 0;   // layer id of the earlier layer
  std::size_t high = 0;  // layer id of its successor in the live list
  double score = 0.0;
};

// Highest-scoring depth-adjacent pair over the ordered live-layer list; ties
// resolve to the deepest pair. Layer ids must be rows of the matrix.
AdjacentPair most_similar_adjacent_pair(const SimilarityMatrix& matrix,
                                        const std::vector<std::size_t>& active);

// CSV with one header row/column of layer indices, 6-decimal values.
std::string similarity_to_csv(const SimilarityMatrix& matrix);

// ASCII PGM (P2) heatmap, values linearly scaled to 0..255.
std::string similarity_to_pgm(const SimilarityMatrix& matrix);

}  // namespace layerfuse
