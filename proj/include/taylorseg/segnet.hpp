#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "taylorseg/autodiff.hpp"
#include "taylorseg/encoding.hpp"
#include "taylorseg/geometry.hpp"
#include "taylorseg/params.hpp"

namespace taylorseg {

enum class Variant { NN, PN };

struct NetworkConfig {
  Variant variant = Variant::PN;
  int encoder_layers = 3;
  double downsample_ratio = 0.25;
  int k_neighbors = 16;
  std::vector<int> channels{64, 128, 256};
  int embed_channels = 32;  // PN input embedding width
  int out_channels = 64;    // PN decoder output width
  int interp_k = 3;
  std::size_t fps_start = 0;
  KernelConfig kernel;
  PEConfig pe;

  static NetworkConfig nn_default();
  static NetworkConfig pn_default();

  void validate() const;
  // Point count after one block applied to m points.
  std::size_t downsampled(std::size_t m) const;
};

// Coordinates (and colors, for the parameter-free path) plus features at one
// resolution. Level 0 is the input resolution.
struct FeatureLevel {
  Tensor coords;
  Tensor colors;
  Tensor feats;
  int level = 0;
};

struct TrackedLevel {
  Tensor coords;
  Var feats;
  int level = 0;
};

// Parameter-independent structure of one encoder block: which points of the
// finer level survive, their neighborhoods, and the upsampling weights back.
struct BlockGeometry {
  std::vector<std::size_t> centers;
  NeighborIndex neighbors;  // centers/neighbors index the finer level
  Tensor geo_inputs;        // (M*k) x 9, empty unless built for PN
  Interpolation upsample;   // finer points from this level's points
};

struct CloudGeometry {
  std::vector<Tensor> coords;  // per level, level 0 = input
  std::vector<Tensor> colors;
  std::vector<BlockGeometry> blocks;
};

BlockGeometry plan_block(const Tensor& coords, const NetworkConfig& cfg);
CloudGeometry plan_geometry(const PointCloud& cloud, const NetworkConfig& cfg);

// Parameter-free pipeline -----------------------------------------------------

FeatureLevel nn_input_level(const PointCloud& cloud, const NetworkConfig& cfg);
FeatureLevel taylor_block(const FeatureLevel& level, const NetworkConfig& cfg);
FeatureLevel taylor_block(const FeatureLevel& level, const BlockGeometry& block,
                          const NetworkConfig& cfg);
// Levels fine -> coarse; identity-concat skip fusion.
Tensor decode(const std::vector<FeatureLevel>& levels, const NetworkConfig& cfg);

// Learnable pipeline ----------------------------------------------------------

void register_backbone_params(ParamStore& store, const NetworkConfig& cfg, std::uint64_t seed);

TrackedLevel pn_input_level(TapeParams& params, const PointCloud& cloud);
TrackedLevel taylor_block(TapeParams& params, const TrackedLevel& level, const BlockGeometry& block,
                          const NetworkConfig& cfg, int block_index);
// Levels fine -> coarse; interpolate, concatenate the skip, then linear+relu.
Var decode(TapeParams& params, const std::vector<TrackedLevel>& levels,
           const std::vector<BlockGeometry>& blocks);

// Both variants behind one interface. The NN variant owns no parameters.
class SegNet {
 public:
  static SegNet make_nn(NetworkConfig cfg = NetworkConfig::nn_default());
  static SegNet make_pn(NetworkConfig cfg, std::uint64_t seed);
  // Rebuild a PN network around existing parameters (e.g. from a checkpoint).
  static SegNet with_params(NetworkConfig cfg, ParamStore params);

  const NetworkConfig& config() const noexcept { return cfg_; }
  const ParamStore& params() const noexcept { return params_; }
  ParamStore& params() noexcept { return params_; }
  std::size_t out_channels() const;

  CloudGeometry plan(const PointCloud& cloud) const { return plan_geometry(cloud, cfg_); }

  // Per-point embeddings, N x out_channels.
  Tensor forward(const PointCloud& cloud) const;
  Tensor forward(const PointCloud& cloud, const CloudGeometry& geometry) const;
  // Tracked PN forward.
  Var forward(TapeParams& params, const PointCloud& cloud, const CloudGeometry& geometry) const;

 private:
  SegNet(NetworkConfig cfg, ParamStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {}

  NetworkConfig cfg_;
  ParamStore params_;
};

}  // namespace taylorseg
