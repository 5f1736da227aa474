#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace mmpq {

struct KMeansConfig {
  std::size_t k = 256;
  std::size_t max_iterations = 100;
  double tolerance = 1e-6;  // stop when relative objective improvement falls below this
  std::uint64_t seed = 0;
};

struct KMeansResult {
  std::vector<float> centroids;      // k x dim
  std::vector<double> objective;     // sum of squared distances after each assignment
  std::size_t iterations = 0;        // Lloyd updates accepted
  std::size_t reseeded_clusters = 0;
};

/// Lloyd's algorithm with k-means++ seeding. An empty cluster is re-seeded
/// with the point farthest from its centroid. An update that would raise the
/// objective (possible only through float rounding) is rejected and ends the
/// run, so `objective` is non-increasing.
///
/// Throws std::invalid_argument when there are fewer distinct points than k.
KMeansResult kmeans(std::span<const float> points, std::size_t dim, const KMeansConfig& cfg);

/// Squared L2 distance accumulated in double.
double squared_distance(std::span<const float> a, std::span<const float> b);

}  // namespace mmpq
