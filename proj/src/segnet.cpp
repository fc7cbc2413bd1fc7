#include "taylorseg/segnet.hpp"

#include <cmath>
#include <string>

#include "taylorseg/errors.hpp"
#include "taylorseg/rng.hpp"

namespace taylorseg {

namespace {

std::string block_name(int b, const char* leaf) {
  return "block" + std::to_string(b) + "." + leaf;
}

std::string decoder_name(std::size_t level, const char* leaf) {
  return "decoder" + std::to_string(level) + "." + leaf;
}

Tensor glorot(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w = Tensor::matrix(fan_in, fan_out);
  for (double& v : w.data()) v = rng.uniform(-limit, limit);
  return w;
}

// Feature width of encoder level `l` (level 0 = input embedding).
std::size_t level_width(const NetworkConfig& cfg, std::size_t l) {
  if (l == 0) return static_cast<std::size_t>(cfg.embed_channels);
  return static_cast<std::size_t>(cfg.channels[l - 1]);
}

// Width produced by the decoder stage that lands on level `l`.
std::size_t decoded_width(const NetworkConfig& cfg, std::size_t l) {
  if (l == static_cast<std::size_t>(cfg.encoder_layers)) return level_width(cfg, l);
  if (l == 0) return static_cast<std::size_t>(cfg.out_channels);
  return static_cast<std::size_t>(cfg.channels[l - 1]);
}

}  // namespace

NetworkConfig NetworkConfig::nn_default() {
  NetworkConfig cfg;
  cfg.variant = Variant::NN;
  const int width = 6 * cfg.pe.bands;
  cfg.channels = {width, width, width};
  cfg.embed_channels = width;
  cfg.out_channels = 0;
  return cfg;
}

NetworkConfig NetworkConfig::pn_default() { return NetworkConfig{}; }

void NetworkConfig::validate() const {
  if (encoder_layers < 1) throw ConfigError("encoder_layers must be >= 1");
  if (!(downsample_ratio > 0.0 && downsample_ratio <= 1.0)) {
    throw ConfigError("downsample_ratio must lie in (0, 1]");
  }
  if (k_neighbors < 1) throw ConfigError("k_neighbors must be >= 1");
  if (interp_k < 1) throw ConfigError("interp_k must be >= 1");
  if (channels.size() != static_cast<std::size_t>(encoder_layers)) {
    throw ConfigError("channels must list one width per encoder layer");
  }
  for (int c : channels) {
    if (c < 1) throw ConfigError("channel widths must be positive");
  }
  pe.validate();
  kernel.validate();
  if (variant == Variant::NN) {
    const int width = 6 * pe.bands;
    for (int c : channels) {
      if (c != width) {
        throw ConfigError("parameter-free channels must all equal 6 * bands = " +
                          std::to_string(width));
      }
    }
    geometric_bands(static_cast<std::size_t>(width));
  } else {
    if (embed_channels < 1 || out_channels < 1) {
      throw ConfigError("embed_channels and out_channels must be positive");
    }
    for (int c : channels) {
      if (c < 2) throw ConfigError("learnable channel widths must be >= 2");
    }
  }
}

std::size_t NetworkConfig::downsampled(std::size_t m) const {
  const double target = std::ceil(static_cast<double>(m) * downsample_ratio - 1e-9);
  return std::max<std::size_t>(1, static_cast<std::size_t>(target));
}

// ---------------------------------------------------------------------------
// Geometry

BlockGeometry plan_block(const Tensor& coords, const NetworkConfig& cfg) {
  const std::size_t m = coords.rows();
  const std::size_t k = static_cast<std::size_t>(cfg.k_neighbors);
  if (k > m) {
    throw ConfigError("k_neighbors (" + std::to_string(k) + ") exceeds the " +
                      std::to_string(m) + " points of this level");
  }
  BlockGeometry block;
  block.centers = farthest_point_sample(coords, cfg.downsampled(m), cfg.fps_start % m);
  const Tensor center_coords = gather_rows(coords, block.centers);
  block.neighbors = knn(center_coords, coords, k);
  block.neighbors.centers = block.centers;
  if (cfg.variant == Variant::PN) block.geo_inputs = geometric_inputs(coords, block.neighbors);
  block.upsample =
      interpolation_weights(center_coords, coords, static_cast<std::size_t>(cfg.interp_k));
  return block;
}

CloudGeometry plan_geometry(const PointCloud& cloud, const NetworkConfig& cfg) {
  cfg.validate();
  cloud.validate();
  if (cloud.size() < static_cast<std::size_t>(cfg.k_neighbors)) {
    throw ConfigError("cloud has fewer points than k_neighbors");
  }
  CloudGeometry geo;
  geo.coords.push_back(cloud.coords);
  geo.colors.push_back(cloud.colors);
  for (int b = 0; b < cfg.encoder_layers; ++b) {
    BlockGeometry block = plan_block(geo.coords.back(), cfg);
    geo.coords.push_back(gather_rows(geo.coords.back(), block.centers));
    geo.colors.push_back(gather_rows(geo.colors.back(), block.centers));
    geo.blocks.push_back(std::move(block));
  }
  return geo;
}

// ---------------------------------------------------------------------------
// Parameter-free pipeline

FeatureLevel nn_input_level(const PointCloud& cloud, const NetworkConfig& cfg) {
  Tensor feats = trig_pe_rows(cloud.coords, cfg.pe);
  const Tensor color_pe = trig_pe_rows(cloud.colors, cfg.pe);
  for (std::size_t i = 0; i < feats.size(); ++i) feats[i] = 0.5 * (feats[i] + color_pe[i]);
  return FeatureLevel{cloud.coords, cloud.colors, std::move(feats), 0};
}

FeatureLevel taylor_block(const FeatureLevel& level, const NetworkConfig& cfg) {
  return taylor_block(level, plan_block(level.coords, cfg), cfg);
}

FeatureLevel taylor_block(const FeatureLevel& level, const BlockGeometry& block,
                          const NetworkConfig& cfg) {
  const Tensor blended = blend_encodings(level.coords, level.colors, level.feats, cfg.pe);
  FeatureLevel out;
  out.feats = taylorconv_nn_block(level.coords, blended, block.neighbors, cfg.pe);
  out.coords = gather_rows(level.coords, block.centers);
  out.colors = gather_rows(level.colors, block.centers);
  out.level = level.level + 1;
  return out;
}

Tensor decode(const std::vector<FeatureLevel>& levels, const NetworkConfig& cfg) {
  if (levels.empty()) throw ConfigError("decode needs at least the input level");
  Tensor current = levels.back().feats;
  for (std::size_t l = levels.size() - 1; l-- > 0;) {
    const Tensor up = interpolate_up(levels[l + 1].coords, current, levels[l].coords,
                                     static_cast<std::size_t>(cfg.interp_k));
    current = concat_cols(up, levels[l].feats);
  }
  return current;
}

// ---------------------------------------------------------------------------
// Learnable pipeline

void register_backbone_params(ParamStore& store, const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.variant != Variant::PN) return;
  Rng rng(seed, Stream::Init);
  const auto embed = static_cast<std::size_t>(cfg.embed_channels);
  store.add("embed.weight", ParamGroup::Backbone, glorot(rng, 6, embed));
  store.add("embed.bias", ParamGroup::Backbone, Tensor::matrix(1, embed));

  for (int b = 0; b < cfg.encoder_layers; ++b) {
    const std::size_t in = level_width(cfg, static_cast<std::size_t>(b));
    const std::size_t out = level_width(cfg, static_cast<std::size_t>(b) + 1);
    const std::size_t hidden = std::max<std::size_t>(1, out / 2);
    store.add(block_name(b, "phi.weight"), ParamGroup::Backbone, glorot(rng, in, out));
    store.add(block_name(b, "phi.bias"), ParamGroup::Backbone, Tensor::matrix(1, out));
    store.add(block_name(b, "mlp.w1"), ParamGroup::Backbone, glorot(rng, 9, hidden));
    store.add(block_name(b, "mlp.b1"), ParamGroup::Backbone, Tensor::matrix(1, hidden));
    store.add(block_name(b, "mlp.w2"), ParamGroup::Backbone, glorot(rng, hidden, out));
    store.add(block_name(b, "mlp.b2"), ParamGroup::Backbone, Tensor::matrix(1, out));
    if (cfg.kernel.learnable_p) {
      store.add(block_name(b, "p"), ParamGroup::Backbone, Tensor::scalar(cfg.kernel.p));
    }
  }

  const auto layers = static_cast<std::size_t>(cfg.encoder_layers);
  for (std::size_t l = layers; l-- > 0;) {
    const std::size_t in = decoded_width(cfg, l + 1) + level_width(cfg, l);
    const std::size_t out = decoded_width(cfg, l);
    store.add(decoder_name(l, "weight"), ParamGroup::Backbone, glorot(rng, in, out));
    store.add(decoder_name(l, "bias"), ParamGroup::Backbone, Tensor::matrix(1, out));
  }
}

TrackedLevel pn_input_level(TapeParams& params, const PointCloud& cloud) {
  Var raw = params.tape().constant(concat_cols(cloud.coords, cloud.colors));
  Var feats = linear(raw, params["embed.weight"], params["embed.bias"]);
  return TrackedLevel{cloud.coords, feats, 0};
}

TrackedLevel taylor_block(TapeParams& params, const TrackedLevel& level, const BlockGeometry& block,
                          const NetworkConfig& cfg, int block_index) {
  PnConvWeights w;
  w.phi_weight = params[block_name(block_index, "phi.weight")];
  w.phi_bias = params[block_name(block_index, "phi.bias")];
  w.mlp_w1 = params[block_name(block_index, "mlp.w1")];
  w.mlp_b1 = params[block_name(block_index, "mlp.b1")];
  w.mlp_w2 = params[block_name(block_index, "mlp.w2")];
  w.mlp_b2 = params[block_name(block_index, "mlp.b2")];
  if (cfg.kernel.learnable_p) w.p = params[block_name(block_index, "p")];
  TrackedLevel out;
  if (block.geo_inputs.empty()) {
    const Tensor geo = geometric_inputs(level.coords, block.neighbors);
    out.feats = taylorconv_pn_block(level.feats, geo, block.neighbors, w, cfg.kernel);
  } else {
    out.feats = taylorconv_pn_block(level.feats, block.geo_inputs, block.neighbors, w, cfg.kernel);
  }
  out.coords = gather_rows(level.coords, block.centers);
  out.level = level.level + 1;
  return out;
}

Var decode(TapeParams& params, const std::vector<TrackedLevel>& levels,
           const std::vector<BlockGeometry>& blocks) {
  if (levels.empty()) throw ConfigError("decode needs at least the input level");
  if (blocks.size() + 1 < levels.size()) throw ConfigError("decode is missing block geometry");
  if (levels.size() == 1) {
    return relu(linear(levels[0].feats, params[decoder_name(0, "weight")],
                       params[decoder_name(0, "bias")]));
  }
  Var current = levels.back().feats;
  for (std::size_t l = levels.size() - 1; l-- > 0;) {
    const Interpolation& up = blocks[l].upsample;
    Var upsampled = weighted_gather(current, up.index, up.weights, up.k);
    Var fused = concat_cols(upsampled, levels[l].feats);
    current = relu(linear(fused, params[decoder_name(l, "weight")], params[decoder_name(l, "bias")]));
  }
  return current;
}

// ---------------------------------------------------------------------------
// SegNet

SegNet SegNet::make_nn(NetworkConfig cfg) {
  cfg.variant = Variant::NN;
  cfg.validate();
  return SegNet(std::move(cfg), ParamStore{});
}

SegNet SegNet::make_pn(NetworkConfig cfg, std::uint64_t seed) {
  cfg.variant = Variant::PN;
  ParamStore store;
  register_backbone_params(store, cfg, seed);
  return SegNet(std::move(cfg), std::move(store));
}

SegNet SegNet::with_params(NetworkConfig cfg, ParamStore params) {
  cfg.validate();
  return SegNet(std::move(cfg), std::move(params));
}

std::size_t SegNet::out_channels() const {
  if (cfg_.variant == Variant::PN) return static_cast<std::size_t>(cfg_.out_channels);
  return static_cast<std::size_t>(6 * cfg_.pe.bands) *
         static_cast<std::size_t>(cfg_.encoder_layers + 1);
}

Tensor SegNet::forward(const PointCloud& cloud) const { return forward(cloud, plan(cloud)); }

Tensor SegNet::forward(const PointCloud& cloud, const CloudGeometry& geometry) const {
  if (cfg_.variant == Variant::PN) {
    Tape tape;
    TapeParams params(tape, params_);
    return forward(params, cloud, geometry).value();
  }
  std::vector<FeatureLevel> levels;
  levels.push_back(nn_input_level(cloud, cfg_));
  for (const BlockGeometry& block : geometry.blocks) {
    levels.push_back(taylor_block(levels.back(), block, cfg_));
  }
  return decode(levels, cfg_);
}

Var SegNet::forward(TapeParams& params, const PointCloud& cloud,
                    const CloudGeometry& geometry) const {
  if (cfg_.variant != Variant::PN) throw ConfigError("tracked forward needs the learnable variant");
  std::vector<TrackedLevel> levels;
  levels.push_back(pn_input_level(params, cloud));
  for (std::size_t b = 0; b < geometry.blocks.size(); ++b) {
    levels.push_back(taylor_block(params, levels.back(), geometry.blocks[b], cfg_, static_cast<int>(b)));
  }
  return decode(params, levels, geometry.blocks);
}

}  // namespace taylorseg
