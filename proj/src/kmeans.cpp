#include "mmpq/kmeans.hpp"

#include <algorithm>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace mmpq {

double squared_distance(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

namespace {

struct Assignment {
  std::vector<std::uint32_t> label;
  std::vector<double> distance;
  double objective = 0.0;
};

void assign(std::span<const float> points, std::size_t dim, const std::vector<float>& centroids,
            std::size_t k, Assignment& out) {
  const std::size_t n = points.size() / dim;
  out.label.resize(n);
  out.distance.resize(n);
  out.objective = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const float> p = points.subspan(i * dim, dim);
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double d = squared_distance(p, {centroids.data() + c * dim, dim});
      if (d < best) {
        best = d;
        arg = static_cast<std::uint32_t>(c);
      }
    }
    out.label[i] = arg;
    out.distance[i] = best;
    out.objective += best;
  }
}

[[noreturn]] void too_few_points(std::size_t have, std::size_t k) {
  throw std::invalid_argument("k-means needs at least " + std::to_string(k) +
                              " distinct points but only " + std::to_string(have) +
                              " are available; use a smaller K");
}

std::vector<float> kmeans_plus_plus(std::span<const float> points, std::size_t dim, std::size_t k,
                                    std::mt19937_64& rng) {
  const std::size_t n = points.size() / dim;
  std::vector<float> centroids;
  centroids.reserve(k * dim);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  const std::size_t c0 = first(rng);
  centroids.insert(centroids.end(), points.begin() + static_cast<std::ptrdiff_t>(c0 * dim),
                   points.begin() + static_cast<std::ptrdiff_t>((c0 + 1) * dim));
  std::vector<double> nearest(n);
  for (std::size_t i = 0; i < n; ++i) {
    nearest[i] = squared_distance(points.subspan(i * dim, dim), {centroids.data(), dim});
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double d : nearest) total += d;
    if (!(total > 0.0)) too_few_points(c, k);
    const double target = unit(rng) * total;
    std::size_t pick = n;
    double running = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (nearest[i] <= 0.0) continue;
      pick = i;
      running += nearest[i];
      if (running > target) break;
    }
    centroids.insert(centroids.end(), points.begin() + static_cast<std::ptrdiff_t>(pick * dim),
                     points.begin() + static_cast<std::ptrdiff_t>((pick + 1) * dim));
    std::span<const float> added{centroids.data() + c * dim, dim};
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(points.subspan(i * dim, dim), added));
    }
  }
  return centroids;
}

}  // namespace

KMeansResult kmeans(std::span<const float> points, std::size_t dim, const KMeansConfig& cfg) {
  if (dim == 0 || points.size() % dim != 0) throw std::invalid_argument("k-means: bad point dimension");
  if (cfg.k == 0) throw std::invalid_argument("k-means: k must be positive");
  const std::size_t n = points.size() / dim;
  const std::size_t k = cfg.k;
  if (n < k) too_few_points(n, k);

  std::mt19937_64 rng(cfg.seed);
  KMeansResult result;
  result.centroids = kmeans_plus_plus(points, dim, k, rng);

  Assignment current;
  assign(points, dim, result.centroids, k, current);
  result.objective.push_back(current.objective);

  std::vector<double> sums(k * dim);
  std::vector<std::size_t> counts(k);
  Assignment next;
  for (std::size_t it = 0; it < cfg.max_iterations && current.objective > 0.0; ++it) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = current.label[i];
      ++counts[c];
      for (std::size_t j = 0; j < dim; ++j) sums[c * dim + j] += points[i * dim + j];
    }
    std::vector<float> updated(k * dim);
    std::vector<double> far = current.distance;
    std::size_t reseeded = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        const auto pick = static_cast<std::size_t>(std::max_element(far.begin(), far.end()) - far.begin());
        std::copy_n(points.begin() + static_cast<std::ptrdiff_t>(pick * dim), dim,
                    updated.begin() + static_cast<std::ptrdiff_t>(c * dim));
        far[pick] = 0.0;
        ++reseeded;
        continue;
      }
      for (std::size_t j = 0; j < dim; ++j) {
        updated[c * dim + j] = static_cast<float>(sums[c * dim + j] / static_cast<double>(counts[c]));
      }
    }
    assign(points, dim, updated, k, next);
    if (next.objective > current.objective) break;
    const double improvement = current.objective - next.objective;
    result.centroids = std::move(updated);
    result.reseeded_clusters += reseeded;
    ++result.iterations;
    const double before = current.objective;
    std::swap(current, next);
    result.objective.push_back(current.objective);
    if (improvement <= cfg.tolerance * before) break;
  }
  return result;
}

}  // namespace mmpq
