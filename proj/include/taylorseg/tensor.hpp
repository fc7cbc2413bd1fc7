#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace taylorseg {

using Shape = std::vector<std::size_t>;

// 64-byte aligned allocator for tensor storage.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

std::string to_string(const Shape& shape);

// Dense row-major tensor of doubles.
//
// Rank-1 tensors behave as a single row: rows() == 1, cols() == size().
// Higher ranks are viewed as shape[0] rows of size()/shape[0] columns.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, const std::vector<double>& data);
  Tensor(Shape shape, Storage data);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row(std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row_span(std::size_t r);
  std::span<const double> row_span(std::size_t r) const;

  // Same data, new shape of equal element count.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const noexcept;
  bool operator==(const Tensor&) const = default;

 private:
  void cache_extents() noexcept;

  Shape shape_;
  Storage data_;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
};

// Throws NumericError naming `what` when t holds NaN or Inf.
void require_finite(const Tensor& t, const char* what);

// ---------------------------------------------------------------------------
// Plain (untracked) kernels. The tracked operations in autodiff.hpp reuse
// these for their forward passes.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Binary ops accept equal shapes, a scalar right operand (size 1), or a
// single-row right operand broadcast over the rows of `a`.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor abs(const Tensor& a);
Tensor sign(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double exponent);
Tensor sigmoid(const Tensor& a);
Tensor softmax_rows(const Tensor& a);

inline constexpr double kLayerNormEps = 1e-5;
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = kLayerNormEps);

struct PoolResult {
  Tensor values;                     // ceil(M/stride) x C
  std::vector<std::size_t> argmax;   // source row for every output element
};
inline constexpr std::size_t kDefaultPoolStride = 32;
PoolResult max_pool_stride(const Tensor& x, std::size_t stride = kDefaultPoolStride);

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(std::span<const Tensor> parts);

double sum(const Tensor& a);
double max_abs(const Tensor& a);

// How `b` broadcasts against `a`; throws ShapeError when it cannot.
enum class Broadcast { Same, Scalar, Row };
Broadcast broadcast_kind(const Tensor& a, const Tensor& b);

}  // namespace taylorseg
