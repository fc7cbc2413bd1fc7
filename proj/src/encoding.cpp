#include "taylorseg/encoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "taylorseg/errors.hpp"

namespace taylorseg {

void PEConfig::validate() const {
  if (bands < 1) throw ConfigError("PE bands must be >= 1");
  if (!(base > 1.0)) throw ConfigError("PE base must be > 1");
}

std::vector<double> PEConfig::frequencies() const {
  std::vector<double> u(static_cast<std::size_t>(bands));
  for (int i = 0; i < bands; ++i) {
    u[static_cast<std::size_t>(i)] = std::pow(base, static_cast<double>(i) / bands);
  }
  return u;
}

void KernelConfig::validate() const {
  if (s != 0 && s != 1) throw ConfigError("kernel s must be 0 or 1");
  if (!learnable_p && (p < 1.0 || std::floor(p) != p)) {
    throw ConfigError("fixed kernel exponent must be an integer >= 1");
  }
}

std::size_t pe_dim(std::size_t input_dim, const PEConfig& cfg) {
  return 2 * input_dim * static_cast<std::size_t>(cfg.bands);
}

namespace {

void encode(std::span<const double> x, std::span<const double> u, std::span<double> out) {
  const std::size_t bands = u.size();
  const std::size_t half = x.size() * bands;
  if (out.size() != 2 * half) throw ShapeError("trig_pe output buffer has the wrong size");
  for (std::size_t j = 0; j < x.size(); ++j) {
    for (std::size_t i = 0; i < bands; ++i) {
      const double angle = kTwoPi * u[i] * x[j];
      out[j * bands + i] = std::sin(angle);
      out[half + j * bands + i] = std::cos(angle);
    }
  }
}

}  // namespace

void trig_pe_into(std::span<const double> x, const PEConfig& cfg, std::span<double> out) {
  encode(x, cfg.frequencies(), out);
}

std::vector<double> trig_pe(std::span<const double> x, const PEConfig& cfg) {
  cfg.validate();
  if (x.empty()) throw ShapeError("trig_pe needs at least one input dimension");
  std::vector<double> out(pe_dim(x.size(), cfg));
  trig_pe_into(x, cfg, out);
  return out;
}

Tensor trig_pe_rows(const Tensor& x, const PEConfig& cfg) {
  cfg.validate();
  Tensor out = Tensor::matrix(x.rows(), pe_dim(x.cols(), cfg));
  const std::vector<double> u = cfg.frequencies();
  for (std::size_t r = 0; r < x.rows(); ++r) encode(x.row_span(r), u, out.row_span(r));
  return out;
}

double high_order_kernel(double u, const KernelConfig& cfg) {
  const double magnitude = cfg.learnable_p ? std::exp(cfg.p * std::log(std::abs(u) + kPowEps))
                                           : std::pow(std::abs(u), cfg.p);
  if (cfg.s == 0) return magnitude;
  const double sgn = u > 0.0 ? 1.0 : (u < 0.0 ? -1.0 : 0.0);
  return sgn * magnitude;
}

std::vector<double> high_order_kernel(std::span<const double> delta, std::span<const double> w,
                                      const KernelConfig& cfg) {
  if (delta.size() != w.size()) throw ShapeError("high_order_kernel operand sizes differ");
  std::vector<double> out(delta.size());
  for (std::size_t i = 0; i < delta.size(); ++i) out[i] = high_order_kernel(w[i] * delta[i], cfg);
  return out;
}

std::vector<double> loconv(const Tensor& neighbor_feats, const FeatureMap& phi) {
  if (neighbor_feats.rows() == 0) throw ShapeError("loconv needs at least one neighbor");
  const Tensor mapped = phi ? phi(neighbor_feats) : neighbor_feats;
  std::vector<double> out(mapped.row_span(0).begin(), mapped.row_span(0).end());
  for (std::size_t r = 1; r < mapped.rows(); ++r) {
    auto row = mapped.row_span(r);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = std::max(out[c], row[c]);
  }
  return out;
}

std::vector<double> hiconv(std::span<const double> center_feat, const Tensor& neighbor_feats,
                           const Tensor& weights, const KernelConfig& cfg) {
  const std::size_t c = center_feat.size();
  if (neighbor_feats.cols() != c || weights.cols() != c ||
      weights.rows() != neighbor_feats.rows() || neighbor_feats.rows() == 0) {
    throw ShapeError("hiconv operand shapes are inconsistent");
  }
  std::vector<double> out(c, -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < neighbor_feats.rows(); ++r) {
    for (std::size_t j = 0; j < c; ++j) {
      const double delta = neighbor_feats(r, j) - center_feat[j];
      out[j] = std::max(out[j], high_order_kernel(weights(r, j) * delta, cfg));
    }
  }
  return out;
}

std::size_t geometric_bands(std::size_t channels) {
  const std::size_t bands = channels / 18;
  if (bands == 0) {
    throw ConfigError("geometric encoding needs at least 18 channels, got " +
                      std::to_string(channels));
  }
  return bands;
}

namespace {

void geometric_weights(std::span<const double> center, std::span<const double> neighbor,
                       std::span<const double> geo_freqs, std::span<double> out) {
  const std::size_t bands = geo_freqs.size();
  const std::array<double, 9> geo{center[0],   center[1],   center[2],
                                  neighbor[0], neighbor[1], neighbor[2],
                                  neighbor[0] - center[0], neighbor[1] - center[1],
                                  neighbor[2] - center[2]};
  const std::size_t used = 18 * bands;
  encode(geo, geo_freqs, out.first(used));
  for (std::size_t i = 0; i < used; ++i) out[i] = std::cos(kTwoPi * out[i]);
  // cos(2*pi*0) padding
  std::fill(out.begin() + static_cast<std::ptrdiff_t>(used), out.end(), 1.0);
}

std::vector<double> geometric_frequencies(std::size_t channels, const PEConfig& cfg) {
  return PEConfig{static_cast<int>(geometric_bands(channels)), cfg.base}.frequencies();
}

}  // namespace

void geometric_weights_into(std::span<const double> center, std::span<const double> neighbor,
                            const PEConfig& cfg, std::span<double> out) {
  geometric_weights(center, neighbor, geometric_frequencies(out.size(), cfg), out);
}

Tensor blend_encodings(const Tensor& coords, const Tensor& colors, const Tensor& prior,
                       const PEConfig& cfg) {
  Tensor out = trig_pe_rows(coords, cfg);
  const Tensor color_pe = trig_pe_rows(colors, cfg);
  if (prior.rows() != out.rows() || prior.cols() != out.cols()) {
    throw ShapeError("prior features must be " + std::to_string(out.cols()) + " wide, got " +
                     to_string(prior.shape()));
  }
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] = (dst[i] + color_pe[i] + prior[i]) / 3.0;
  }
  return out;
}

Tensor taylorconv_nn_block(const Tensor& coords, const Tensor& point_feats,
                           const NeighborIndex& index, const PEConfig& cfg) {
  const std::size_t c = point_feats.cols();
  const std::vector<double> geo_freqs = geometric_frequencies(c, cfg);
  const std::size_t centers = index.rows();
  Tensor out = Tensor::matrix(centers, c);
  std::vector<double> lo(c), hi(c), w(c);
  for (std::size_t m = 0; m < centers; ++m) {
    std::fill(lo.begin(), lo.end(), -std::numeric_limits<double>::infinity());
    std::fill(hi.begin(), hi.end(), -std::numeric_limits<double>::infinity());
    auto center = coords.row_span(index.centers[m]);
    for (std::size_t j = 0; j < index.k; ++j) {
      const std::size_t nb = index.neighbors[m * index.k + j];
      auto f = point_feats.row_span(nb);
      geometric_weights(center, coords.row_span(nb), geo_freqs, w);
      for (std::size_t q = 0; q < c; ++q) {
        lo[q] = std::max(lo[q], f[q]);
        hi[q] = std::max(hi[q], w[q] * f[q]);
      }
    }
    auto dst = out.row_span(m);
    for (std::size_t q = 0; q < c; ++q) dst[q] = lo[q] + hi[q];
  }
  return out;
}

std::vector<double> taylorconv_nn(const NNNeighborhood& hood, const PEConfig& cfg) {
  const std::size_t k = hood.coords.rows();
  if (k == 0) throw ShapeError("taylorconv_nn needs at least one neighbor");
  const Tensor feats = blend_encodings(hood.coords, hood.colors, hood.prior, cfg);

  // Local frame: row 0 is the center, rows 1..k the neighbors.
  Tensor coords = Tensor::matrix(k + 1, 3);
  Tensor all_feats = Tensor::matrix(k + 1, feats.cols());
  for (std::size_t d = 0; d < 3; ++d) coords(0, d) = hood.center[d];
  NeighborIndex index{{0}, std::vector<std::size_t>(k), k};
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t d = 0; d < 3; ++d) coords(j + 1, d) = hood.coords(j, d);
    auto src = feats.row_span(j);
    std::copy(src.begin(), src.end(), all_feats.row_span(j + 1).begin());
    index.neighbors[j] = j + 1;
  }
  const Tensor out = taylorconv_nn_block(coords, all_feats, index, cfg);
  return {out.data().begin(), out.data().end()};
}

// ---------------------------------------------------------------------------

Var high_order_kernel(Var u, const KernelConfig& cfg, Var learnable_p) {
  if (cfg.learnable_p && !learnable_p.valid()) {
    throw ConfigError("learnable kernel exponent was not provided");
  }
  Tape& tape = *u.tape();
  const bool signed_kernel = cfg.s == 1;
  const bool learnable = cfg.learnable_p;
  const double p = learnable ? learnable_p.value()[0] : cfg.p;
  const Tensor& x = u.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = std::abs(x[i]);
    double m;
    if (learnable) {
      m = std::exp(p * std::log(a + kPowEps));
    } else {
      m = p == 1.0 ? a : std::pow(a, p);
    }
    y[i] = signed_kernel ? (x[i] > 0.0 ? m : (x[i] < 0.0 ? -m : 0.0)) : m;
  }

  std::vector<Var> parents{u};
  if (learnable) parents.push_back(learnable_p);
  const std::size_t pu = u.id();
  const std::size_t pp = learnable ? learnable_p.id() : 0;
  return tape.record(std::move(y), parents, [pu, pp, p, learnable, signed_kernel](Tape& t, std::size_t self) {
    const Tensor& xv = t.value(pu);
    const Tensor& yv = t.value(self);
    const Tensor& g = t.grad(self);
    if (t.requires_grad(pu)) {
      Tensor dx(xv.shape());
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const double sgn = xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0);
        const double a = std::abs(xv[i]);
        // d|u|^p/du, then the sign factor of the signed kernel.
        double dm;
        if (learnable) {
          dm = std::abs(yv[i]) * p / (a + kPowEps) * sgn;
        } else {
          dm = p == 1.0 ? sgn : p * std::pow(a, p - 1.0) * sgn;
        }
        dx[i] = g[i] * (signed_kernel ? sgn * dm : dm);
      }
      t.accumulate_grad(pu, std::move(dx));
    }
    if (learnable && t.requires_grad(pp)) {
      double dp = 0.0;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        dp += g[i] * yv[i] * std::log(std::abs(xv[i]) + kPowEps);
      }
      t.grad_buffer(pp)[0] += dp;
    }
  });
}

Tensor geometric_inputs(const Tensor& coords, const NeighborIndex& index) {
  Tensor geo = Tensor::matrix(index.neighbors.size(), 9);
  for (std::size_t m = 0; m < index.rows(); ++m) {
    auto center = coords.row_span(index.centers[m]);
    for (std::size_t j = 0; j < index.k; ++j) {
      const std::size_t r = m * index.k + j;
      auto nb = coords.row_span(index.neighbors[r]);
      for (std::size_t d = 0; d < 3; ++d) {
        geo(r, d) = center[d];
        geo(r, 3 + d) = nb[d];
        geo(r, 6 + d) = nb[d] - center[d];
      }
    }
  }
  return geo;
}

Var taylorconv_pn_block(Var feats, const Tensor& geo_inputs, const NeighborIndex& index,
                        const PnConvWeights& weights, const KernelConfig& cfg) {
  Tape& tape = *feats.tape();
  const std::size_t k = index.k;
  if (geo_inputs.rows() != index.neighbors.size() || geo_inputs.cols() != 9) {
    throw ShapeError("geometric inputs must be (M*k) x 9");
  }

  Var mapped = feats;
  if (weights.phi_weight.valid()) mapped = relu(linear(feats, weights.phi_weight, weights.phi_bias));

  Var grouped = gather_rows(mapped, index.neighbors);
  Var low = max_pool_stride(grouped, k);

  std::vector<std::size_t> center_rows(index.neighbors.size());
  for (std::size_t r = 0; r < center_rows.size(); ++r) center_rows[r] = index.centers[r / k];
  Var delta = sub(grouped, gather_rows(mapped, std::move(center_rows)));

  Var geo = tape.constant(geo_inputs);
  Var w = linear(relu(linear(geo, weights.mlp_w1, weights.mlp_b1)), weights.mlp_w2, weights.mlp_b2);
  if (w.value().cols() != delta.value().cols()) {
    throw ShapeError("HiConv MLP width does not match the mapped feature width");
  }
  Var high = max_pool_stride(high_order_kernel(mul(w, delta), cfg, weights.p), k);
  return add(low, high);
}

Var taylorconv_pn(Var center_feat, Var neighbor_feats, const Tensor& geo_inputs,
                  const PnConvWeights& weights, const KernelConfig& cfg) {
  const std::size_t k = neighbor_feats.value().rows();
  Var parts[] = {center_feat, neighbor_feats};
  Var feats = concat_rows(parts);
  NeighborIndex index{{0}, std::vector<std::size_t>(k), k};
  for (std::size_t j = 0; j < k; ++j) index.neighbors[j] = j + 1;
  return taylorconv_pn_block(feats, geo_inputs, index, weights, cfg);
}

}  // namespace taylorseg
