#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "layerfuse/similarity.hpp"
#include "test_util.hpp"

using namespace layerfuse;
using namespace layerfuse::testutil;

namespace {

DiffusionEmbedding wrap(const DenseMatrix& coords, std::size_t layer_index) {
  DiffusionEmbedding e;
  e.layer_index = layer_index;
  e.coords = coords;
  e.eigenvalues_used.assign(coords.cols(), 0.5);
  e.time = 1.0;
  return e;
}

std::vector<std::size_t> ids_upto(std::size_t n) {
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i + 1;
  return ids;
}

const std::vector<Measure> kAllMeasures{Measure::Nmi, Measure::Cosine, Measure::EuclideanRbf,
                                        Measure::MahalanobisRbf};

}  // namespace

TEST_CASE("identical embeddings score 1 for every measure") {
  Rng rng(10);
  const DenseMatrix psi = random_matrix(rng, 40, 4);
  const DenseMatrix other = random_matrix(rng, 40, 4);
  const std::vector<DiffusionEmbedding> embeddings{wrap(psi, 1), wrap(psi, 2), wrap(other, 3)};

  for (Measure measure : kAllMeasures) {
    const SimilarityMatrix matrix =
        build_similarity_matrix(embeddings, ids_upto(3), measure);
    CHECK(matrix.values(0, 1) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(matrix.values(0, 2) < matrix.values(0, 1));
  }
}

TEST_CASE("independent high-sample embeddings have near-zero nmi") {
  Rng rng(77);
  const DenseMatrix a = random_matrix(rng, 5000, 4);
  const DenseMatrix b = random_matrix(rng, 5000, 4);
  const SimilarityMatrix matrix =
      build_similarity_matrix({wrap(a, 1), wrap(b, 2)}, ids_upto(2), Measure::Nmi);
  CHECK(matrix.values(0, 1) <= 0.05);
}

TEST_CASE("constructed duplicate pair is the argmax for every measure") {
  Rng rng(5);
  const DenseMatrix psi1 = random_matrix(rng, 60, 4);
  DenseMatrix psi2 = random_matrix(rng, 60, 4);
  for (std::size_t i = 0; i < psi2.data().size(); ++i) psi2.data()[i] += 0.4 * psi1.data()[i];
  const DenseMatrix psi3 = psi2;  // layers 2 and 3 identical

  const std::vector<DiffusionEmbedding> embeddings{wrap(psi1, 1), wrap(psi2, 2), wrap(psi3, 3)};
  for (Measure measure : kAllMeasures) {
    const SimilarityMatrix matrix = build_similarity_matrix(embeddings, ids_upto(3), measure);
    double best = -1.0;
    std::pair<std::size_t, std::size_t> argmax{0, 0};
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = i + 1; j < 3; ++j)
        if (matrix.values(i, j) > best) {
          best = matrix.values(i, j);
          argmax = {i + 1, j + 1};
        }
    CHECK(argmax.first == 2);
    CHECK(argmax.second == 3);
  }
}

TEST_CASE("matrix invariants hold for all measures on random embeddings") {
  Rng rng(31);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<DiffusionEmbedding> embeddings;
    const std::size_t layers = 3 + rep % 3;
    for (std::size_t l = 0; l < layers; ++l) {
      embeddings.push_back(wrap(random_matrix(rng, 30, 3), l + 1));
    }
    for (Measure measure : kAllMeasures) {
      const SimilarityMatrix matrix =
          build_similarity_matrix(embeddings, ids_upto(layers), measure);
      for (std::size_t i = 0; i < layers; ++i) {
        CHECK(matrix.values(i, i) == 1.0);
        for (std::size_t j = 0; j < layers; ++j) {
          CHECK(matrix.values(i, j) == matrix.values(j, i));
          CHECK(matrix.values(i, j) >= 0.0);
          CHECK(matrix.values(i, j) <= 1.0);
        }
      }
    }
  }
}

TEST_CASE("sample permutation leaves the matrix unchanged") {
  Rng rng(141);
  const std::size_t n = 50;
  std::vector<DenseMatrix> coords{random_matrix(rng, n, 3), random_matrix(rng, n, 3),
                                  random_matrix(rng, n, 3)};
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = (i * 7 + 3) % n;

  std::vector<DiffusionEmbedding> base, permuted;
  for (std::size_t l = 0; l < coords.size(); ++l) {
    base.push_back(wrap(coords[l], l + 1));
    DenseMatrix shuffled(n, 3);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 3; ++j) shuffled(perm[i], j) = coords[l](i, j);
    permuted.push_back(wrap(shuffled, l + 1));
  }
  for (Measure measure : kAllMeasures) {
    const SimilarityMatrix a = build_similarity_matrix(base, ids_upto(3), measure);
    const SimilarityMatrix b = build_similarity_matrix(permuted, ids_upto(3), measure);
    CHECK(max_abs_diff(a.values, b.values) <= 1e-9);
  }
}

TEST_CASE("common invertible linear map leaves pairwise MI unchanged") {
  Rng rng(9);
  const std::size_t n = 300;
  const DenseMatrix map = random_spd(rng, 3, 1.0);
  std::vector<DenseMatrix> coords;
  coords.push_back(random_matrix(rng, n, 3));
  for (int l = 1; l < 3; ++l) {
    DenseMatrix next = random_matrix(rng, n, 3, 0.5);
    for (std::size_t i = 0; i < next.data().size(); ++i)
      next.data()[i] += 0.8 * coords.back().data()[i];
    coords.push_back(std::move(next));
  }

  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = a + 1; b < 3; ++b) {
      const double before =
          gaussian_mi(make_covariance_bundle(coords[a], coords[b]), 0.0).value;
      const double after = gaussian_mi(
          make_covariance_bundle(matmul(coords[a], map), matmul(coords[b], map)), 0.0).value;
      CHECK(approx_rel(before, after, 1e-6));
    }
  }
}

TEST_CASE("shape validation") {
  Rng rng(3);
  const auto a = wrap(random_matrix(rng, 10, 3), 1);
  const auto b = wrap(random_matrix(rng, 12, 3), 2);
  CHECK_THROWS_AS(build_similarity_matrix({a, b}, ids_upto(2), Measure::Nmi), Error);
  CHECK_THROWS_AS(build_similarity_matrix({a}, {1}, Measure::Nmi), Error);
}

TEST_CASE("most similar adjacent pair selection and tie-breaking") {
  SimilarityMatrix matrix;
  matrix.layer_ids = {1, 2, 3, 4};
  matrix.values = DenseMatrix::identity(4);

  SUBCASE("unique maximum wins") {
    matrix.values(2, 3) = matrix.values(3, 2) = 0.9;
    matrix.values(0, 1) = matrix.values(1, 0) = 0.5;
    matrix.values(1, 2) = matrix.values(2, 1) = 0.6;
    const AdjacentPair pair = most_similar_adjacent_pair(matrix, {1, 2, 3, 4});
    CHECK(pair.low == 3);
    CHECK(pair.high == 4);
    CHECK(pair.score == doctest::Approx(0.9));
  }

  SUBCASE("all-equal scores pick the deepest pair") {
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) matrix.values(i, j) = i == j ? 1.0 : 0.4;
    const AdjacentPair pair = most_similar_adjacent_pair(matrix, {1, 2, 3, 4});
    CHECK(pair.low == 3);
    CHECK(pair.high == 4);
  }

  SUBCASE("only live-list-adjacent pairs are considered") {
    // active {1,5,6}: massive similarity between 1 and 6 must be ignored
    matrix.layer_ids = {1, 4, 5, 6};
    matrix.values = DenseMatrix::identity(4);
    auto set = [&matrix](std::size_t a, std::size_t b, double v) {
      matrix.values(matrix.row_of(a), matrix.row_of(b)) = v;
      matrix.values(matrix.row_of(b), matrix.row_of(a)) = v;
    };
    set(1, 6, 0.99);
    set(1, 5, 0.3);
    set(5, 6, 0.7);
    const AdjacentPair pair = most_similar_adjacent_pair(matrix, {1, 5, 6});
    CHECK(pair.low == 5);
    CHECK(pair.high == 6);
  }

  SUBCASE("fewer than two live layers is exhausted") {
    try {
      most_similar_adjacent_pair(matrix, {2});
      FAIL("expected exhausted error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Exhausted);
    }
  }
}

TEST_CASE("csv and pgm exports") {
  SimilarityMatrix matrix;
  matrix.layer_ids = {1, 2};
  matrix.values = DenseMatrix::from_data(2, 2, {1.0, 0.25, 0.25, 1.0});

  const std::string csv = similarity_to_csv(matrix);
  CHECK(csv == "layer,1,2\n1,1.000000,0.250000\n2,0.250000,1.000000\n");

  const std::string pgm = similarity_to_pgm(matrix);
  CHECK(pgm == "P2\n2 2\n255\n255 64\n64 255\n");
}
