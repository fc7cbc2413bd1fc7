#include "taylorseg/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include <Eigen/Core>

#include "taylorseg/errors.hpp"

namespace taylorseg {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

std::atomic<std::uint64_t> g_nodes_allocated{0};

ConstMap view(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap view(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

Tape& tape_of(Var a) {
  if (!a.valid()) throw ShapeError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ShapeError("operands live on different tapes");
  return t;
}

// Adds `g` into the gradient of node `id`, reducing over broadcast axes.
void accumulate(Tape& tape, std::size_t id, const Tensor& g, Broadcast kind = Broadcast::Same) {
  if (!tape.requires_grad(id)) return;
  Tensor& buf = tape.grad_buffer(id);
  auto dst = buf.data();
  auto src = g.data();
  switch (kind) {
    case Broadcast::Same:
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
      break;
    case Broadcast::Scalar: {
      double total = 0.0;
      for (double v : src) total += v;
      dst[0] += total;
      break;
    }
    case Broadcast::Row: {
      const std::size_t cols = buf.size();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i % cols] += src[i];
      break;
    }
  }
}

void accumulate(Tape& tape, std::size_t id, Tensor&& g, Broadcast kind = Broadcast::Same) {
  if (!tape.requires_grad(id)) return;
  if (kind == Broadcast::Same) {
    tape.accumulate_grad(id, std::move(g));
  } else {
    accumulate(tape, id, static_cast<const Tensor&>(g), kind);
  }
}

// Records an elementwise unary op whose local derivative is `dfdx(x, y)`.
template <typename Deriv>
Var unary(Var a, Tensor value, Deriv dfdx) {
  Tape& tape = tape_of(a);
  const std::size_t pa = a.id();
  Var parents[] = {a};
  return tape.record(std::move(value), parents, [pa, dfdx](Tape& t, std::size_t self) {
    if (!t.requires_grad(pa)) return;
    const Tensor& x = t.value(pa);
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad(self);
    Tensor dx = g;
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] *= dfdx(x[i], y[i]);
    t.accumulate_grad(pa, std::move(dx));
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_of(*this).value(id_); }
const Tensor& Var::grad() const { return tape_of(*this).grad(id_); }
bool Var::requires_grad() const { return tape_of(*this).requires_grad(id_); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  g_nodes_allocated.fetch_add(1, std::memory_order_relaxed);
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  return push(Node{std::move(value), Tensor(), false, true, nullptr});
}

Var Tape::parameter(Tensor value) {
  require_finite(value, "parameter");
  return push(Node{std::move(value), Tensor(), true, true, nullptr});
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn backward) {
  const std::size_t self = nodes_.size();
  bool needs_grad = false;
  for (const Var& p : parents) {
    if (p.tape() != this) throw ShapeError("parent node belongs to another tape");
    // Parents always precede the node; anything else would be a cycle.
    if (p.id() >= self) throw NumericError("tape cycle detected");
    needs_grad = needs_grad || nodes_[p.id()].requires_grad;
  }
  require_finite(value, "tracked operation");
  return push(Node{std::move(value), Tensor(), needs_grad, false,
                   needs_grad ? std::move(backward) : BackwardFn{}});
}

const Tensor& Tape::grad(std::size_t id) const {
  const Node& n = nodes_[id];
  if (n.grad.empty()) throw NumericError("gradient requested before backward");
  return n.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::accumulate_grad(std::size_t id, Tensor&& g) {
  Node& n = nodes_[id];
  if (g.shape() != n.value.shape()) throw ShapeError("gradient shape differs from its node");
  if (n.grad.empty()) {
    n.grad = std::move(g);
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw ShapeError("loss belongs to another tape");
  if (value(loss.id()).size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " + to_string(value(loss.id()).shape()));
  }
  grad_buffer(loss.id())[0] += 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.leaf || n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].requires_grad) grad_buffer(i);
  }
}

std::uint64_t Tape::nodes_allocated() noexcept {
  return g_nodes_allocated.load(std::memory_order_relaxed);
}

// ---------------------------------------------------------------------------
// Operations

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const std::size_t pa = a.id(), pb = b.id();
  Var parents[] = {a, b};
  return tape.record(matmul(a.value(), b.value()), parents, [pa, pb](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(pa)) {
      view(t.grad_buffer(pa)).noalias() += view(g) * view(t.value(pb)).transpose();
    }
    if (t.requires_grad(pb)) {
      view(t.grad_buffer(pb)).noalias() += view(t.value(pa)).transpose() * view(g);
    }
  });
}

Var transpose(Var a) {
  Tape& tape = tape_of(a);
  const std::size_t pa = a.id();
  Var parents[] = {a};
  return tape.record(transpose(a.value()), parents, [pa](Tape& t, std::size_t self) {
    if (!t.requires_grad(pa)) return;
    view(t.grad_buffer(pa)) += view(t.grad(self)).transpose();
  });
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Broadcast kind = broadcast_kind(a.value(), b.value());
  const std::size_t pa = a.id(), pb = b.id();
  Var parents[] = {a, b};
  return tape.record(add(a.value(), b.value()), parents, [pa, pb, kind](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(pa)) accumulate(t, pa, Tensor(g));
    if (t.requires_grad(pb)) accumulate(t, pb, Tensor(g), kind);
  });
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Broadcast kind = broadcast_kind(a.value(), b.value());
  const std::size_t pa = a.id(), pb = b.id();
  Var parents[] = {a, b};
  return tape.record(sub(a.value(), b.value()), parents, [pa, pb, kind](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(pa)) accumulate(t, pa, Tensor(g));
    if (t.requires_grad(pb)) accumulate(t, pb, scale(g, -1.0), kind);
  });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Broadcast kind = broadcast_kind(a.value(), b.value());
  const std::size_t pa = a.id(), pb = b.id();
  Var parents[] = {a, b};
  return tape.record(mul(a.value(), b.value()), parents, [pa, pb, kind](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(pa)) accumulate(t, pa, mul(g, t.value(pb)));
    if (t.requires_grad(pb)) accumulate(t, pb, mul(g, t.value(pa)), kind);
  });
}

Var scale(Var a, double factor) {
  return unary(a, scale(a.value(), factor), [factor](double, double) { return factor; });
}

Var abs(Var a) {
  // d|x|/dx at 0 is taken as 0.
  return unary(a, abs(a.value()),
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var sign(Var a) {
  return unary(a, sign(a.value()), [](double, double) { return 0.0; });
}

Var exp(Var a) {
  return unary(a, exp(a.value()), [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, log(a.value()), [](double x, double) { return 1.0 / x; });
}

Var relu(Var a) {
  return unary(a, relu(a.value()), [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sin(Var a) {
  return unary(a, sin(a.value()), [](double x, double) { return std::cos(x); });
}

Var cos(Var a) {
  return unary(a, cos(a.value()), [](double x, double) { return -std::sin(x); });
}

Var pow_scalar(Var a, double exponent) {
  return unary(a, pow_scalar(a.value(), exponent), [exponent](double x, double) {
    return exponent * std::pow(x, exponent - 1.0);
  });
}

Var pow_scalar(Var a, Var exponent) {
  Tape& tape = tape_of(a, exponent);
  if (exponent.value().size() != 1) throw ShapeError("learnable exponent must be a scalar");
  const double p = exponent.value()[0];
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(p * std::log(std::abs(x[i]) + kPowEps));
  }
  const std::size_t pa = a.id(), pp = exponent.id();
  Var parents[] = {a, exponent};
  return tape.record(std::move(out), parents, [pa, pp](Tape& t, std::size_t self) {
    const Tensor& xv = t.value(pa);
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad(self);
    const double pv = t.value(pp)[0];
    if (t.requires_grad(pa)) {
      Tensor& dx = t.grad_buffer(pa);
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const double sgn = xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0);
        dx[i] += g[i] * y[i] * pv / (std::abs(xv[i]) + kPowEps) * sgn;
      }
    }
    if (t.requires_grad(pp)) {
      double dp = 0.0;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        dp += g[i] * y[i] * std::log(std::abs(xv[i]) + kPowEps);
      }
      t.grad_buffer(pp)[0] += dp;
    }
  });
}

Var sigmoid(Var a) {
  return unary(a, sigmoid(a.value()), [](double, double y) { return y * (1.0 - y); });
}

Var softmax_rows(Var a) {
  Tape& tape = tape_of(a);
  const std::size_t pa = a.id();
  Var parents[] = {a};
  return tape.record(softmax_rows(a.value()), parents, [pa](Tape& t, std::size_t self) {
    if (!t.requires_grad(pa)) return;
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad_buffer(pa);
    const std::size_t c = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g(r, j) * y(r, j);
      for (std::size_t j = 0; j < c; ++j) dx(r, j) += y(r, j) * (g(r, j) - dot);
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& tape = tape_of(x, gamma);
  if (beta.tape() != &tape) throw ShapeError("operands live on different tapes");
  Tensor out = layer_norm(x.value(), gamma.value(), beta.value(), eps);
  const std::size_t px = x.id(), pg = gamma.id(), pb = beta.id();
  Var parents[] = {x, gamma, beta};
  return tape.record(std::move(out), parents, [px, pg, pb, eps](Tape& t, std::size_t self) {
    const Tensor& xv = t.value(px);
    const Tensor& gv = t.value(pg);
    const Tensor& g = t.grad(self);
    const std::size_t c = xv.cols();
    const double n = static_cast<double>(c);
    std::vector<double> xhat(c), dxhat(c);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      double mean = 0.0;
      for (std::size_t j = 0; j < c; ++j) mean += xv(r, j);
      mean /= n;
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) var += (xv(r, j) - mean) * (xv(r, j) - mean);
      var /= n;
      const double inv_std = 1.0 / std::sqrt(var + eps);
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        xhat[j] = (xv(r, j) - mean) * inv_std;
        dxhat[j] = g(r, j) * gv[j];
        mean_d += dxhat[j];
        mean_dx += dxhat[j] * xhat[j];
      }
      mean_d /= n;
      mean_dx /= n;
      if (t.requires_grad(px)) {
        Tensor& dx = t.grad_buffer(px);
        for (std::size_t j = 0; j < c; ++j) {
          dx(r, j) += inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
      }
      if (t.requires_grad(pg)) {
        Tensor& dg = t.grad_buffer(pg);
        for (std::size_t j = 0; j < c; ++j) dg[j] += g(r, j) * xhat[j];
      }
      if (t.requires_grad(pb)) {
        Tensor& db = t.grad_buffer(pb);
        for (std::size_t j = 0; j < c; ++j) db[j] += g(r, j);
      }
    }
  });
}

Var max_pool_stride(Var x, std::size_t stride) {
  Tape& tape = tape_of(x);
  PoolResult pooled = max_pool_stride(x.value(), stride);
  const std::size_t px = x.id();
  const std::size_t c = x.value().cols();
  Var parents[] = {x};
  return tape.record(std::move(pooled.values), parents,
                     [px, c, argmax = std::move(pooled.argmax)](Tape& t, std::size_t self) {
                       if (!t.requires_grad(px)) return;
                       const Tensor& g = t.grad(self);
                       Tensor& dx = t.grad_buffer(px);
                       for (std::size_t i = 0; i < argmax.size(); ++i) {
                         dx(argmax[i], i % c) += g[i];
                       }
                     });
}

Var gather_rows(Var x, std::vector<std::size_t> index) {
  Tape& tape = tape_of(x);
  Tensor out = gather_rows(x.value(), index);
  const std::size_t px = x.id();
  Var parents[] = {x};
  return tape.record(std::move(out), parents,
                     [px, index = std::move(index)](Tape& t, std::size_t self) {
                       if (!t.requires_grad(px)) return;
                       const Tensor& g = t.grad(self);
                       Tensor& dx = t.grad_buffer(px);
                       for (std::size_t r = 0; r < index.size(); ++r) {
                         auto src = g.row_span(r);
                         auto dst = dx.row_span(index[r]);
                         for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
                       }
                     });
}

Var weighted_gather(Var x, std::vector<std::size_t> index, std::vector<double> weights,
                    std::size_t k) {
  Tape& tape = tape_of(x);
  if (k == 0 || index.size() % k != 0 || weights.size() != index.size()) {
    throw ShapeError("weighted_gather expects rows of k indices with matching weights");
  }
  const Tensor& xv = x.value();
  const std::size_t rows = index.size() / k;
  const std::size_t c = xv.cols();
  Tensor out = Tensor::matrix(rows, c);
  for (std::size_t r = 0; r < rows; ++r) {
    auto dst = out.row_span(r);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t src_row = index[r * k + j];
      if (src_row >= xv.rows()) throw ShapeError("weighted_gather index out of range");
      const double w = weights[r * k + j];
      auto src = xv.row_span(src_row);
      for (std::size_t q = 0; q < c; ++q) dst[q] += w * src[q];
    }
  }
  const std::size_t px = x.id();
  Var parents[] = {x};
  return tape.record(
      std::move(out), parents,
      [px, k, index = std::move(index), weights = std::move(weights)](Tape& t, std::size_t self) {
        if (!t.requires_grad(px)) return;
        const Tensor& g = t.grad(self);
        Tensor& dx = t.grad_buffer(px);
        for (std::size_t i = 0; i < index.size(); ++i) {
          auto src = g.row_span(i / k);
          auto dst = dx.row_span(index[i]);
          for (std::size_t q = 0; q < src.size(); ++q) dst[q] += weights[i] * src[q];
        }
      });
}

Var concat_cols(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const std::size_t pa = a.id(), pb = b.id();
  const std::size_t ca = a.value().cols();
  Var parents[] = {a, b};
  return tape.record(concat_cols(a.value(), b.value()), parents,
                     [pa, pb, ca](Tape& t, std::size_t self) {
                       const Tensor& g = t.grad(self);
                       const std::size_t c = g.cols();
                       if (t.requires_grad(pa)) {
                         Tensor& da = t.grad_buffer(pa);
                         for (std::size_t r = 0; r < g.rows(); ++r)
                           for (std::size_t j = 0; j < ca; ++j) da(r, j) += g(r, j);
                       }
                       if (t.requires_grad(pb)) {
                         Tensor& db = t.grad_buffer(pb);
                         for (std::size_t r = 0; r < g.rows(); ++r)
                           for (std::size_t j = ca; j < c; ++j) db(r, j - ca) += g(r, j);
                       }
                     });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  Tape& tape = tape_of(parts.front());
  std::vector<Tensor> values;
  std::vector<std::size_t> ids;
  values.reserve(parts.size());
  for (const Var& p : parts) {
    if (p.tape() != &tape) throw ShapeError("operands live on different tapes");
    values.push_back(p.value());
    ids.push_back(p.id());
  }
  return tape.record(concat_rows(values), parts, [ids](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t offset = 0;
    for (std::size_t id : ids) {
      const std::size_t n = t.value(id).size();
      if (t.requires_grad(id)) {
        Tensor& d = t.grad_buffer(id);
        for (std::size_t i = 0; i < n; ++i) d[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

Var sum(Var a) {
  Tape& tape = tape_of(a);
  const std::size_t pa = a.id();
  Var parents[] = {a};
  return tape.record(Tensor::scalar(sum(a.value())), parents, [pa](Tape& t, std::size_t self) {
    if (!t.requires_grad(pa)) return;
    const double g = t.grad(self)[0];
    for (double& v : t.grad_buffer(pa).data()) v += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var normalize_rows(Var x, double eps) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  std::vector<double> norms(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double sq = 0.0;
    for (double v : xv.row_span(r)) sq += v * v;
    norms[r] = std::sqrt(sq);
    const double denom = norms[r] + eps;
    auto src = xv.row_span(r);
    auto dst = out.row_span(r);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] / denom;
  }
  const std::size_t px = x.id();
  Var parents[] = {x};
  return tape.record(std::move(out), parents,
                     [px, eps, norms = std::move(norms)](Tape& t, std::size_t self) {
                       if (!t.requires_grad(px)) return;
                       const Tensor& xv2 = t.value(px);
                       const Tensor& g = t.grad(self);
                       Tensor& dx = t.grad_buffer(px);
                       for (std::size_t r = 0; r < xv2.rows(); ++r) {
                         const double n = norms[r];
                         const double denom = n + eps;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < xv2.cols(); ++j) dot += xv2(r, j) * g(r, j);
                         const double coef = n > 0.0 ? dot / (n * denom * denom) : 0.0;
                         for (std::size_t j = 0; j < xv2.cols(); ++j) {
                           dx(r, j) += g(r, j) / denom - xv2(r, j) * coef;
                         }
                       }
                     });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  Tape& tape = tape_of(logits);
  const Tensor& z = logits.value();
  if (labels.size() != z.rows()) throw ShapeError("cross_entropy needs one label per row");
  const std::size_t k = z.cols();
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw DataError("cross_entropy label " + std::to_string(label) + " outside [0, " +
                      std::to_string(k) + ")");
    }
  }
  double total = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row_span(r);
    const double peak = *std::max_element(row.begin(), row.end());
    double acc = 0.0;
    for (double v : row) acc += std::exp(v - peak);
    total += peak + std::log(acc) - row[static_cast<std::size_t>(labels[r])];
  }
  const double n = static_cast<double>(z.rows());
  const std::size_t pz = logits.id();
  Var parents[] = {logits};
  return tape.record(Tensor::scalar(total / n), parents,
                     [pz, n, labels = std::vector<int>(labels.begin(), labels.end())](
                         Tape& t, std::size_t self) {
                       if (!t.requires_grad(pz)) return;
                       const double g = t.grad(self)[0];
                       Tensor probs = softmax_rows(t.value(pz));
                       Tensor& dz = t.grad_buffer(pz);
                       for (std::size_t r = 0; r < probs.rows(); ++r) {
                         probs(r, static_cast<std::size_t>(labels[r])) -= 1.0;
                         for (std::size_t j = 0; j < probs.cols(); ++j) {
                           dz(r, j) += g * probs(r, j) / n;
                         }
                       }
                     });
}

Var linear(Var x, Var weight, Var bias) {
  if (!bias.valid()) return matmul(x, weight);
  Tape& tape = tape_of(x, weight);
  if (bias.tape() != &tape) throw ShapeError("operands live on different tapes");
  const Tensor& b = bias.value();
  Tensor y = matmul(x.value(), weight.value());
  if (b.size() != y.cols()) {
    throw ShapeError("bias " + to_string(b.shape()) + " does not match output width " +
                     std::to_string(y.cols()));
  }
  view(y).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), static_cast<Eigen::Index>(b.size()));
  const std::size_t px = x.id(), pw = weight.id(), pb = bias.id();
  Var parents[] = {x, weight, bias};
  return tape.record(std::move(y), parents, [px, pw, pb](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.requires_grad(px)) {
      view(t.grad_buffer(px)).noalias() += view(g) * view(t.value(pw)).transpose();
    }
    if (t.requires_grad(pw)) {
      view(t.grad_buffer(pw)).noalias() += view(t.value(px)).transpose() * view(g);
    }
    if (t.requires_grad(pb)) {
      Tensor& db = t.grad_buffer(pb);
      Eigen::Map<Eigen::RowVectorXd>(db.data().data(), static_cast<Eigen::Index>(db.size())) += view(g).colwise().sum();
    }
  });
}

}  // namespace taylorseg
