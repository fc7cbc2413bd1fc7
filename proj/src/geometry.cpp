#include "taylorseg/geometry.hpp"

#include <algorithm>
#include <limits>
#include <string>
#include <utility>

#include "taylorseg/errors.hpp"

namespace taylorseg {

void PointCloud::validate() const {
  const std::size_t n = coords.rows();
  if (n == 0) throw DataError("point cloud is empty");
  if (coords.cols() != 3) throw DataError("point cloud coordinates must be N x 3");
  if (colors.rows() != n || colors.cols() != 3) throw DataError("point cloud colors must be N x 3");
  if (!coords.all_finite() || !colors.all_finite()) throw DataError("point cloud has non-finite values");
  if (!labels.empty() && labels.size() != n) {
    throw DataError("point cloud has " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(n) + " points");
  }
  for (int label : labels) {
    if (label < 0) throw DataError("point cloud labels must be non-negative");
  }
}

double squared_distance(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const double dx = a(i, 0) - b(j, 0);
  const double dy = a(i, 1) - b(j, 1);
  const double dz = a(i, 2) - b(j, 2);
  return dx * dx + dy * dy + dz * dz;
}

std::vector<std::size_t> farthest_point_sample(const Tensor& coords, std::size_t m,
                                               std::size_t start) {
  const std::size_t n = coords.rows();
  if (m == 0 || m > n) {
    throw ConfigError("farthest_point_sample needs 1 <= m <= N (m=" + std::to_string(m) +
                      ", N=" + std::to_string(n) + ")");
  }
  if (start >= n) throw ConfigError("farthest_point_sample start index out of range");

  std::vector<std::size_t> picked;
  picked.reserve(m);
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(n, false);
  std::size_t current = start;
  for (std::size_t step = 0; step < m; ++step) {
    picked.push_back(current);
    taken[current] = true;
    if (step + 1 == m) break;
    std::size_t best = n;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_dist[i] = std::min(min_dist[i], squared_distance(coords, i, coords, current));
      if (min_dist[i] > best_dist) {
        best_dist = min_dist[i];
        best = i;
      }
    }
    current = best;
  }
  return picked;
}

NeighborIndex knn(const Tensor& queries, const Tensor& refs, std::size_t k) {
  const std::size_t n = refs.rows();
  if (k == 0 || k > n) {
    throw ConfigError("knn needs 1 <= k <= N (k=" + std::to_string(k) + ", N=" +
                      std::to_string(n) + ")");
  }
  const std::size_t m = queries.rows();
  NeighborIndex out;
  out.k = k;
  out.centers.resize(m);
  out.neighbors.resize(m * k);
  std::vector<std::pair<double, std::size_t>> scratch(n);
  for (std::size_t q = 0; q < m; ++q) {
    out.centers[q] = q;
    for (std::size_t i = 0; i < n; ++i) scratch[i] = {squared_distance(queries, q, refs, i), i};
    std::partial_sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k),
                      scratch.end());
    for (std::size_t j = 0; j < k; ++j) out.neighbors[q * k + j] = scratch[j].second;
  }
  return out;
}

Tensor group(const Tensor& features, const NeighborIndex& index) {
  const std::size_t c = features.cols();
  const std::size_t m = index.rows();
  Tensor out({m, index.k, c});
  auto dst = out.data();
  for (std::size_t r = 0; r < index.neighbors.size(); ++r) {
    const std::size_t src = index.neighbors[r];
    if (src >= features.rows()) {
      throw ShapeError("group index " + std::to_string(src) + " out of range for " +
                       std::to_string(features.rows()) + " points");
    }
    auto row = features.row_span(src);
    std::copy(row.begin(), row.end(), dst.begin() + static_cast<std::ptrdiff_t>(r * c));
  }
  return out;
}

Interpolation interpolation_weights(const Tensor& coarse_coords, const Tensor& fine_coords,
                                    std::size_t k) {
  if (coarse_coords.rows() == 0) throw ShapeError("interpolation needs at least one coarse point");
  const std::size_t kk = std::min(k, coarse_coords.rows());
  const NeighborIndex nn = knn(fine_coords, coarse_coords, kk);
  Interpolation out{nn.neighbors, std::vector<double>(nn.neighbors.size()), kk};
  for (std::size_t r = 0; r < fine_coords.rows(); ++r) {
    double total = 0.0;
    for (std::size_t j = 0; j < kk; ++j) {
      const std::size_t idx = r * kk + j;
      const double d2 = squared_distance(fine_coords, r, coarse_coords, out.index[idx]);
      out.weights[idx] = 1.0 / (d2 + kInterpolationEps);
      total += out.weights[idx];
    }
    for (std::size_t j = 0; j < kk; ++j) out.weights[r * kk + j] /= total;
  }
  return out;
}

Tensor interpolate_up(const Tensor& coarse_coords, const Tensor& coarse_feats,
                      const Tensor& fine_coords, std::size_t k) {
  if (coarse_feats.rows() != coarse_coords.rows()) {
    throw ShapeError("interpolate_up: coarse features and coordinates disagree");
  }
  const Interpolation w = interpolation_weights(coarse_coords, fine_coords, k);
  const std::size_t c = coarse_feats.cols();
  Tensor out = Tensor::matrix(fine_coords.rows(), c);
  for (std::size_t r = 0; r < fine_coords.rows(); ++r) {
    auto dst = out.row_span(r);
    for (std::size_t j = 0; j < w.k; ++j) {
      const std::size_t idx = r * w.k + j;
      auto src = coarse_feats.row_span(w.index[idx]);
      for (std::size_t q = 0; q < c; ++q) dst[q] += w.weights[idx] * src[q];
    }
  }
  return out;
}

}  // namespace taylorseg
