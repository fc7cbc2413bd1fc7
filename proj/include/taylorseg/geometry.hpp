#pragma once

#include <cstddef>
#include <vector>

#include "taylorseg/tensor.hpp"

namespace taylorseg {

// A scene sample: N x 3 coordinates (meters), N x 3 colors in [0, 1] and
// optional per-point class labels.
struct PointCloud {
  Tensor coords;
  Tensor colors;
  std::vector<int> labels;

  std::size_t size() const noexcept { return coords.rows(); }
  bool has_labels() const noexcept { return !labels.empty(); }

  // Throws DataError when the invariants do not hold.
  void validate() const;
};

// For each of M centers, k neighbor indices into the reference set.
struct NeighborIndex {
  std::vector<std::size_t> centers;
  std::vector<std::size_t> neighbors;  // row-major M x k
  std::size_t k = 0;

  std::size_t rows() const noexcept { return k ? neighbors.size() / k : 0; }
};

inline constexpr double kInterpolationEps = 1e-8;

double squared_distance(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j);

// Greedy max-min subset of m indices starting at `start`; ties go to the
// lowest index.
std::vector<std::size_t> farthest_point_sample(const Tensor& coords, std::size_t m,
                                               std::size_t start = 0);

// k nearest references per query, ordered by (squared distance, index).
// `centers` of the result enumerates the queries.
NeighborIndex knn(const Tensor& queries, const Tensor& refs, std::size_t k);

// Gathers features into an M x k x C tensor.
Tensor group(const Tensor& features, const NeighborIndex& index);

// Inverse-squared-distance weights from each fine point to its k nearest
// coarse points; weights of a row sum to 1.
struct Interpolation {
  std::vector<std::size_t> index;
  std::vector<double> weights;
  std::size_t k = 0;
};

Interpolation interpolation_weights(const Tensor& coarse_coords, const Tensor& fine_coords,
                                    std::size_t k = 3);

Tensor interpolate_up(const Tensor& coarse_coords, const Tensor& coarse_feats,
                      const Tensor& fine_coords, std::size_t k = 3);

}  // namespace taylorseg
