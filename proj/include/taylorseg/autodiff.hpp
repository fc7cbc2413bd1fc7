#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "taylorseg/tensor.hpp"

namespace taylorseg {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Tensor& grad() const;
  bool requires_grad() const;
  bool valid() const noexcept { return tape_ != nullptr; }
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Minimal reverse-mode tape. Nodes are appended in evaluation order, so node
// ids are already a topological order and backward walks them in reverse.
// One tape per forward/backward pass; not thread-safe.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  // Appends a derived node. The node requires grad iff any parent does.
  Var record(Tensor value, std::span<const Var> parents, BackwardFn backward);

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node that
  // requires them. Leaves off every path to the loss end with zero gradients.
  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of a node, zero-initialised on first access. Backward
  // functions accumulate into it.
  Tensor& grad_buffer(std::size_t id);
  // Adds `g` into the gradient of `id`, taking ownership when none exists yet.
  void accumulate_grad(std::size_t id, Tensor&& g);

  std::size_t size() const noexcept { return nodes_.size(); }

  // Number of nodes ever allocated on any tape in this process.
  static std::uint64_t nodes_allocated() noexcept;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool leaf = true;
    BackwardFn backward;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Tracked operations. All operands must live on the same tape.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var abs(Var a);
Var sign(Var a);
Var exp(Var a);
Var log(Var a);
Var relu(Var a);
Var sin(Var a);
Var cos(Var a);
Var pow_scalar(Var a, double exponent);

// exp(p * log(|a| + kPowEps)) with p a learnable 1-element tensor.
inline constexpr double kPowEps = 1e-8;
Var pow_scalar(Var a, Var exponent);

Var sigmoid(Var a);
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps);
Var max_pool_stride(Var x, std::size_t stride = kDefaultPoolStride);

Var gather_rows(Var x, std::vector<std::size_t> index);
// out[r] = sum_j weights[r*k + j] * x[index[r*k + j]]
Var weighted_gather(Var x, std::vector<std::size_t> index, std::vector<double> weights,
                    std::size_t k);
Var concat_cols(Var a, Var b);
Var concat_rows(std::span<const Var> parts);

Var sum(Var a);
Var mean(Var a);

// x_r / (||x_r|| + eps) per row.
inline constexpr double kCosineEps = 1e-8;
Var normalize_rows(Var x, double eps = kCosineEps);

// Mean over rows of -log softmax(logits_r)[labels_r].
Var cross_entropy(Var logits, std::span<const int> labels);

// x W + b
Var linear(Var x, Var weight, Var bias);

}  // namespace taylorseg
