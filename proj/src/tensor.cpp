#include "taylorseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

#include "taylorseg/errors.hpp"

namespace taylorseg {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  const Broadcast kind = broadcast_kind(a, b);
  Tensor out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto dst = out.data();
  switch (kind) {
    case Broadcast::Same:
      for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
      break;
    case Broadcast::Scalar:
      for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[0]);
      break;
    case Broadcast::Row: {
      const std::size_t cols = a.cols();
      for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i % cols]);
      break;
    }
  }
  return out;
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + to_string(shape_));
  }
  data_.assign(product(shape_), fill);
  cache_extents();
}

Tensor::Tensor(Shape shape, const std::vector<double>& data)
    : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + to_string(shape_));
  }
  if (product(shape_) != data_.size()) {
    throw ShapeError("shape " + to_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
  cache_extents();
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) {
  return Tensor({rows, cols}, fill);
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged rows in Tensor::from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::row(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::identity(std::size_t n) {
  Tensor t = matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

void Tensor::cache_extents() noexcept {
  if (data_.empty()) {
    rows_ = cols_ = 0;
    return;
  }
  rows_ = shape_.size() < 2 ? 1 : shape_[0];
  cols_ = data_.size() / rows_;
}

std::span<double> Tensor::row_span(std::size_t r) {
  const std::size_t c = cols();
  return std::span<double>(data_).subspan(r * c, c);
}

std::span<const double> Tensor::row_span(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const double>(data_).subspan(r * c, c);
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite values produced by ") + what);
}

Broadcast broadcast_kind(const Tensor& a, const Tensor& b) {
  if (a.size() == b.size() && a.cols() == b.cols()) return Broadcast::Same;
  if (b.size() == 1) return Broadcast::Scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::Row;
  throw ShapeError("cannot broadcast " + to_string(b.shape()) + " onto " + to_string(a.shape()));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  // Each output row is accumulated independently of its position in a.
  const std::size_t n = a.rows(), inner = a.cols(), m = b.cols();
  Tensor out = Tensor::matrix(n, m);
  const double* bp = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.data().data() + i * inner;
    double* __restrict o = out.data().data() + i * m;
    for (std::size_t k = 0; k < inner; ++k) {
      const double s = ar[k];
      const double* __restrict br = bp + k * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += s * br[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out = Tensor::matrix(a.cols(), a.rows());
  MutMap(out.data().data(), a.cols(), a.rows()) =
      ConstMap(a.data().data(), a.rows(), a.cols()).transpose();
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return map_binary(a, b, [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return map_binary(a, b, [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return map_binary(a, b, [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double factor) {
  return map_unary(a, [factor](double x) { return x * factor; });
}

Tensor abs(const Tensor& a) {
  return map_unary(a, [](double x) { return std::abs(x); });
}

Tensor sign(const Tensor& a) {
  return map_unary(a, [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& a) {
  return map_unary(a, [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive input");
  }
  return map_unary(a, [](double x) { return std::log(x); });
}

Tensor relu(const Tensor& a) {
  return map_unary(a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Tensor sin(const Tensor& a) {
  return map_unary(a, [](double x) { return std::sin(x); });
}

Tensor cos(const Tensor& a) {
  return map_unary(a, [](double x) { return std::cos(x); });
}

Tensor pow_scalar(const Tensor& a, double exponent) {
  return map_unary(a, [exponent](double x) { return std::pow(x, exponent); });
}

Tensor sigmoid(const Tensor& a) {
  return map_unary(a, [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
}

Tensor softmax_rows(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto src = a.row_span(r);
    auto dst = out.row_span(r);
    const double peak = *std::max_element(src.begin(), src.end());
    double total = 0.0;
    for (std::size_t c = 0; c < src.size(); ++c) {
      dst[c] = std::exp(src[c] - peak);
      total += dst[c];
    }
    for (double& v : dst) v /= total;
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = x.cols();
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("layer_norm affine parameters must have " + std::to_string(c) + " entries");
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm eps must be positive");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = x.row_span(r);
    auto dst = out.row_span(r);
    double mean = 0.0;
    for (double v : src) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : src) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      dst[j] = gamma[j] * (src[j] - mean) * inv_std + beta[j];
    }
  }
  return out;
}

PoolResult max_pool_stride(const Tensor& x, std::size_t stride) {
  if (x.empty()) throw ShapeError("max_pool_stride of an empty tensor");
  if (stride == 0) throw ConfigError("max_pool_stride requires stride >= 1");
  const std::size_t m = x.rows();
  const std::size_t c = x.cols();
  const std::size_t windows = (m + stride - 1) / stride;
  PoolResult result{Tensor::matrix(windows, c), std::vector<std::size_t>(windows * c)};
  for (std::size_t w = 0; w < windows; ++w) {
    const std::size_t begin = w * stride;
    const std::size_t end = std::min(m, begin + stride);
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t best = begin;
      double best_value = x(begin, j);
      for (std::size_t r = begin + 1; r < end; ++r) {
        // strict comparison keeps the lowest index on ties
        if (x(r, j) > best_value) {
          best_value = x(r, j);
          best = r;
        }
      }
      result.values(w, j) = best_value;
      result.argmax[w * c + j] = best;
    }
  }
  return result;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  const std::size_t c = x.cols();
  Tensor out = Tensor::matrix(index.size(), c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= x.rows()) {
      throw ShapeError("gather index " + std::to_string(index[r]) + " out of range for " +
                       std::to_string(x.rows()) + " rows");
    }
    auto src = x.row_span(index[r]);
    std::copy(src.begin(), src.end(), out.row_span(r).begin());
  }
  return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols row counts differ: " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  Tensor out = Tensor::matrix(a.rows(), a.cols() + b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto dst = out.row_span(r);
    auto left = a.row_span(r);
    auto right = b.row_span(r);
    std::copy(left.begin(), left.end(), dst.begin());
    std::copy(right.begin(), right.end(), dst.begin() + static_cast<std::ptrdiff_t>(left.size()));
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t c = parts.front().cols();
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows column counts differ");
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * c);
  for (const Tensor& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor({rows, c}, std::move(data));
}

double sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return total;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace taylorseg
