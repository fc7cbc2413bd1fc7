#pragma once

// Reference implementations and helpers shared by the test binaries. Nothing
// here calls into the library code it is used to check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "taylorseg/autodiff.hpp"
#include "taylorseg/params.hpp"
#include "taylorseg/tensor.hpp"

namespace testing_support {

using taylorseg::Tensor;

inline Tensor random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// Magnitudes in [0.2, 1] with random sign, away from kinks at zero.
inline Tensor kink_free_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::uniform_real_distribution<double> mag(0.2, 1.0);
  std::bernoulli_distribution neg(0.5);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.data()) v = neg(rng) ? -mag(rng) : mag(rng);
  return t;
}

inline double sq_dist(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    const double d = a(i, c) - b(j, c);
    s += d * d;
  }
  return s;
}

// Max-min selection by scanning every candidate against every chosen point.
inline std::vector<std::size_t> brute_fps(const Tensor& pts, std::size_t m, std::size_t start) {
  std::vector<std::size_t> chosen{start};
  while (chosen.size() < m) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < pts.rows(); ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t c : chosen) d = std::min(d, sq_dist(pts, i, pts, c));
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

// Full sort of every reference by (distance, index).
inline std::vector<std::size_t> brute_knn(const Tensor& queries, const Tensor& refs, std::size_t k) {
  std::vector<std::size_t> out;
  for (std::size_t q = 0; q < queries.rows(); ++q) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t r = 0; r < refs.rows(); ++r) all.emplace_back(sq_dist(queries, q, refs, r), r);
    std::sort(all.begin(), all.end());
    for (std::size_t j = 0; j < k; ++j) out.push_back(all[j].second);
  }
  return out;
}

// Central differences of a scalar loss over every entry of `params`,
// compared with the tape gradient by ||a - n|| / max(||a||, ||n||).
struct FdResult {
  std::string name;
  double rel_error = 0.0;
};

inline std::vector<FdResult> finite_difference_check(
    taylorseg::ParamStore& params, const std::function<taylorseg::Var(taylorseg::TapeParams&)>& loss,
    double h = 1e-5) {
  using namespace taylorseg;
  auto eval = [&] {
    Tape tape;
    TapeParams bound(tape, params);
    return loss(bound).value()[0];
  };
  GradMap analytic;
  {
    Tape tape;
    TapeParams bound(tape, params);
    Var l = loss(bound);
    tape.backward(l);
    analytic = bound.gradients();
  }
  std::vector<FdResult> out;
  for (auto& e : params.entries()) {
    const Tensor& a = analytic.at(e.name);
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double saved = e.value[i];
      e.value[i] = saved + h;
      const double up = eval();
      e.value[i] = saved - h;
      const double down = eval();
      e.value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      diff += (a[i] - numeric) * (a[i] - numeric);
      na += a[i] * a[i];
      nn += numeric * numeric;
    }
    const double denom = std::sqrt(std::max(na, nn));
    out.push_back({e.name, denom == 0.0 ? 0.0 : std::sqrt(diff) / denom});
  }
  return out;
}

inline double max_error(const std::vector<FdResult>& r) {
  double m = 0.0;
  for (const auto& e : r) m = std::max(m, e.rel_error);
  return m;
}

// Per-class IoU by counting, mean over foreground classes present in either.
inline double naive_miou(const std::vector<int>& pred, const std::vector<int>& gt, int classes) {
  double total = 0.0;
  int present = 0;
  for (int c = 1; c < classes; ++c) {
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (pred[i] == c && gt[i] == c) ++tp;
      if (pred[i] == c && gt[i] != c) ++fp;
      if (pred[i] != c && gt[i] == c) ++fn;
    }
    if (tp + fp + fn == 0) continue;
    total += static_cast<double>(tp) / (tp + fp + fn);
    ++present;
  }
  return present ? total / present : 0.0;
}

}  // namespace testing_support
