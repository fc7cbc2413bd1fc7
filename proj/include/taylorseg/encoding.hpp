#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "taylorseg/autodiff.hpp"
#include "taylorseg/geometry.hpp"
#include "taylorseg/tensor.hpp"

namespace taylorseg {

// Trigonometric positional encoding: band i uses frequency base^(i / bands).
struct PEConfig {
  int bands = 20;
  double base = 30.0;

  void validate() const;
  std::vector<double> frequencies() const;
};

// High-order kernel T(u) = sign(u)^s * |u|^p with u = w * delta.
struct KernelConfig {
  int s = 1;
  double p = 1.0;
  bool learnable_p = true;

  void validate() const;
};

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

std::size_t pe_dim(std::size_t input_dim, const PEConfig& cfg);

// Layout: all sin terms (dimension-major, band-minor), then all cos terms.
void trig_pe_into(std::span<const double> x, const PEConfig& cfg, std::span<double> out);
std::vector<double> trig_pe(std::span<const double> x, const PEConfig& cfg);
Tensor trig_pe_rows(const Tensor& x, const PEConfig& cfg);

double high_order_kernel(double u, const KernelConfig& cfg);
std::vector<double> high_order_kernel(std::span<const double> delta, std::span<const double> w,
                                      const KernelConfig& cfg);

// Channel-wise max over the k mapped neighbor features.
using FeatureMap = std::function<Tensor(const Tensor&)>;
std::vector<double> loconv(const Tensor& neighbor_feats, const FeatureMap& phi = {});

// Channel-wise max over neighbors of T(w_j * (f_j - f_i)).
std::vector<double> hiconv(std::span<const double> center_feat, const Tensor& neighbor_feats,
                           const Tensor& weights, const KernelConfig& cfg);

// ---------------------------------------------------------------------------
// Parameter-free TaylorConv.

// Bands of the geometric encoding for `channels` output channels; throws
// ConfigError when channels < 18.
std::size_t geometric_bands(std::size_t channels);

// w = cos(2*pi * E([p_i, p_j, p_j - p_i])) padded with ones to `channels`.
void geometric_weights_into(std::span<const double> center, std::span<const double> neighbor,
                            const PEConfig& cfg, std::span<double> out);

struct NNNeighborhood {
  std::array<double, 3> center{};
  Tensor coords;  // k x 3
  Tensor colors;  // k x 3
  Tensor prior;   // k x C, previous-level features (C = 6 * bands)
};

// (E(p_j) + E(c_j) + prior_j) / 3 per row.
Tensor blend_encodings(const Tensor& coords, const Tensor& colors, const Tensor& prior,
                       const PEConfig& cfg);

// max_j f_j + max_j (w_j * f_j) for every center of `index`, where
// `point_feats` already holds the blended f_j of every reference point.
Tensor taylorconv_nn_block(const Tensor& coords, const Tensor& point_feats,
                           const NeighborIndex& index, const PEConfig& cfg);

std::vector<double> taylorconv_nn(const NNNeighborhood& hood, const PEConfig& cfg);

// ---------------------------------------------------------------------------
// Learnable TaylorConv. A default-constructed phi pair means identity.

struct PnConvWeights {
  Var phi_weight, phi_bias;
  Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  Var p;  // used only when the kernel's p is learnable
};

Var high_order_kernel(Var u, const KernelConfig& cfg, Var learnable_p = {});

// [p_i, p_j, p_j - p_i] for every (center, neighbor) pair, (M*k) x 9.
Tensor geometric_inputs(const Tensor& coords, const NeighborIndex& index);

// LoConv(phi(f)) + HiConv with w_j = MLP(geo_j), for every center of `index`.
Var taylorconv_pn_block(Var feats, const Tensor& geo_inputs, const NeighborIndex& index,
                        const PnConvWeights& weights, const KernelConfig& cfg);

Var taylorconv_pn(Var center_feat, Var neighbor_feats, const Tensor& geo_inputs,
                  const PnConvWeights& weights, const KernelConfig& cfg);

}  // namespace taylorseg
