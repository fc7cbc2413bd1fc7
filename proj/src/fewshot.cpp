#include "taylorseg/fewshot.hpp"

#include <cmath>
#include <deque>
#include <string>

#include "taylorseg/errors.hpp"
#include "taylorseg/rng.hpp"

namespace taylorseg {

namespace {

std::size_t count_positive(std::span<const std::uint8_t> mask) {
  std::size_t n = 0;
  for (std::uint8_t m : mask) n += m != 0 ? 1 : 0;
  return n;
}

void check_mask(std::size_t rows, std::span<const std::uint8_t> mask) {
  if (mask.size() != rows) {
    throw ShapeError("mask has " + std::to_string(mask.size()) + " entries for " +
                     std::to_string(rows) + " feature rows");
  }
}

Tensor averaging_row(std::span<const std::uint8_t> mask, bool take_positive, double denom) {
  Tensor w = Tensor::matrix(1, mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if ((mask[i] != 0) == take_positive) w[i] = 1.0 / denom;
  }
  return w;
}

Tensor glorot(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w = Tensor::matrix(fan_in, fan_out);
  for (double& v : w.data()) v = rng.uniform(-limit, limit);
  return w;
}

// Sum of squares of each row of `p`, laid out as a 1 x rows tensor.
Tensor row_norms_sq(const Tensor& p) {
  Tensor out = Tensor::matrix(1, p.rows());
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (double v : p.row_span(r)) s += v * v;
    out[r] = s;
  }
  return out;
}

Tensor normalized_rows(const Tensor& x) {
  Tensor out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (double v : x.row_span(r)) s += v * v;
    const double denom = std::sqrt(s) + kCosineEps;
    for (double& v : out.row_span(r)) v /= denom;
  }
  return out;
}

double plain_cross_entropy(const Tensor& logits, std::span<const int> gt) {
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row_span(r);
    double hi = row[0];
    for (double v : row) hi = std::max(hi, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - hi);
    total += hi + std::log(z) - row[static_cast<std::size_t>(gt[r])];
  }
  return total / static_cast<double>(logits.rows());
}

std::vector<int> flatten(const std::vector<std::vector<int>>& parts) {
  std::vector<int> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<std::vector<int>> split_like(const std::vector<int>& flat,
                                         const std::vector<PointCloud>& clouds) {
  std::vector<std::vector<int>> out;
  std::size_t offset = 0;
  for (const PointCloud& c : clouds) {
    out.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                     flat.begin() + static_cast<std::ptrdiff_t>(offset + c.size()));
    offset += c.size();
  }
  return out;
}

// Geometry lookup that caches dataset scenes and keeps anonymous clouds alive
// for the duration of one episode.
class EpisodeGeometry {
 public:
  EpisodeGeometry(const NetworkConfig& cfg, GeometryCache* cache) : cfg_(cfg), cache_(cache) {}

  const CloudGeometry& get(std::size_t scene, const PointCloud& cloud) {
    if (cache_ != nullptr && scene != SupportShot::kNoScene) return cache_->get(scene, cloud);
    return local_.emplace_back(plan_geometry(cloud, cfg_));
  }

 private:
  const NetworkConfig& cfg_;
  GeometryCache* cache_;
  std::deque<CloudGeometry> local_;
};

std::size_t query_scene(const Episode& e, std::size_t q) {
  return q < e.query_scene.size() ? e.query_scene[q] : SupportShot::kNoScene;
}

}  // namespace

void Episode::validate() const {
  if (n_way < 1 || k_shot < 1) throw DataError("episode needs n_way >= 1 and k_shot >= 1");
  if (classes.size() != static_cast<std::size_t>(n_way)) {
    throw DataError("episode lists " + std::to_string(classes.size()) + " classes for n_way " +
                    std::to_string(n_way));
  }
  if (support.size() != static_cast<std::size_t>(n_way)) {
    throw DataError("episode support does not have n_way entries");
  }
  for (std::size_t i = 0; i < support.size(); ++i) {
    if (support[i].size() != static_cast<std::size_t>(k_shot)) {
      throw DataError("support for way " + std::to_string(i) + " does not have k_shot shots");
    }
    for (const SupportShot& shot : support[i]) {
      shot.cloud.validate();
      if (shot.mask.size() != shot.cloud.size()) {
        throw DataError("support mask length differs from its cloud size");
      }
      if (count_positive(shot.mask) == 0) throw DataError("support mask has no positive point");
    }
  }
  if (query.empty()) throw DataError("episode has no query cloud");
  if (query_gt.size() != query.size()) throw DataError("query ground truth count mismatch");
  for (std::size_t q = 0; q < query.size(); ++q) {
    query[q].validate();
    if (query_gt[q].size() != query[q].size()) {
      throw DataError("query ground truth length differs from its cloud size");
    }
    for (int label : query_gt[q]) {
      if (label < 0 || label > n_way) throw DataError("query label out of range");
    }
  }
}

// ---------------------------------------------------------------------------
// Prototypes

Tensor masked_avg_prototype(const Tensor& feats, std::span<const std::uint8_t> mask) {
  check_mask(feats.rows(), mask);
  const std::size_t n = count_positive(mask);
  if (n == 0) throw DataError("masked average over an all-zero mask");
  return matmul(averaging_row(mask, true, static_cast<double>(n)), feats);
}

Var masked_avg_prototype(Var feats, std::span<const std::uint8_t> mask) {
  check_mask(feats.value().rows(), mask);
  const std::size_t n = count_positive(mask);
  if (n == 0) throw DataError("masked average over an all-zero mask");
  Var w = feats.tape()->constant(averaging_row(mask, true, static_cast<double>(n)));
  return matmul(w, feats);
}

BackgroundPrototype background_prototype(std::span<const Tensor> feats, std::span<const Mask> masks) {
  if (feats.empty() || feats.size() != masks.size()) {
    throw ShapeError("background prototype needs one mask per support feature set");
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    check_mask(feats[i].rows(), masks[i]);
    total += masks[i].size() - count_positive(masks[i]);
  }
  BackgroundPrototype out{Tensor::matrix(1, feats[0].cols()), total == 0};
  if (out.fallback) return out;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    out.vector = add(out.vector,
                     matmul(averaging_row(masks[i], false, static_cast<double>(total)), feats[i]));
  }
  return out;
}

TrackedBackground background_prototype(std::span<const Var> feats, std::span<const Mask> masks) {
  if (feats.empty() || feats.size() != masks.size()) {
    throw ShapeError("background prototype needs one mask per support feature set");
  }
  Tape& tape = *feats[0].tape();
  std::size_t total = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    check_mask(feats[i].value().rows(), masks[i]);
    total += masks[i].size() - count_positive(masks[i]);
  }
  if (total == 0) return {tape.constant(Tensor::matrix(1, feats[0].value().cols())), true};
  Var acc;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    if (count_positive(masks[i]) == masks[i].size()) continue;
    Var w = tape.constant(averaging_row(masks[i], false, static_cast<double>(total)));
    Var part = matmul(w, feats[i]);
    acc = acc.valid() ? add(acc, part) : part;
  }
  return {acc, false};
}

Tensor aggregate_shots(const Tensor& shot_prototypes) {
  const std::size_t k = shot_prototypes.rows();
  return matmul(Tensor::matrix(1, k, 1.0 / static_cast<double>(k)), shot_prototypes);
}

Var aggregate_shots(std::span<const Var> shot_prototypes) {
  if (shot_prototypes.empty()) throw ShapeError("aggregate_shots needs at least one shot");
  if (shot_prototypes.size() == 1) return shot_prototypes[0];
  Var stacked = concat_rows(shot_prototypes);
  const std::size_t k = stacked.value().rows();
  Var w = stacked.tape()->constant(Tensor::matrix(1, k, 1.0 / static_cast<double>(k)));
  return matmul(w, stacked);
}

// ---------------------------------------------------------------------------
// APP

void register_app_params(ParamStore& store, std::size_t channels, std::uint64_t seed) {
  if (channels == 0) throw ConfigError("APP needs a positive channel count");
  Rng rng(seed, Stream::Init, 1);
  const std::size_t c = channels;
  store.add("app.w1", ParamGroup::App, glorot(rng, c, c));
  store.add("app.w2", ParamGroup::App, glorot(rng, c, c));
  store.add("app.w3", ParamGroup::App, Tensor::matrix(1, c));
  store.add("app.w4", ParamGroup::App, glorot(rng, c, c));
  store.add("app.w5", ParamGroup::App, Tensor::matrix(c, c));
  store.add("app.ln1.gamma", ParamGroup::App, Tensor::matrix(1, c, 1.0));
  store.add("app.ln1.beta", ParamGroup::App, Tensor::matrix(1, c));
  store.add("app.ln2.gamma", ParamGroup::App, Tensor::matrix(1, c, 1.0));
  store.add("app.ln2.beta", ParamGroup::App, Tensor::matrix(1, c));
}

AppWeights AppWeights::bind(TapeParams& params) {
  if (!params.contains("app.w1")) throw ConfigError("APP parameters are not registered");
  AppWeights w;
  w.w1 = params["app.w1"];
  w.w2 = params["app.w2"];
  w.w3 = params["app.w3"];
  w.w4 = params["app.w4"];
  w.w5 = params["app.w5"];
  w.ln1_gamma = params["app.ln1.gamma"];
  w.ln1_beta = params["app.ln1.beta"];
  w.ln2_gamma = params["app.ln2.gamma"];
  w.ln2_beta = params["app.ln2.beta"];
  return w;
}

Var acp(Var support_pooled, Var query_pooled, Var proto_bar, const AppWeights& w) {
  const std::size_t c = proto_bar.value().cols();
  if (support_pooled.value().cols() != c || query_pooled.value().cols() != c) {
    throw ShapeError("ACP inputs must share the channel count");
  }
  Var gram_s = matmul(transpose(support_pooled), support_pooled);
  Var gram_q = matmul(transpose(query_pooled), query_pooled);
  Var att_s = sigmoid(matmul(w.w3, gram_s));
  Var att_q = sigmoid(matmul(w.w3, gram_q));
  Var pushed = add(mul(proto_bar, att_s), mul(proto_bar, att_q));
  return layer_norm(matmul(pushed, w.w4), w.ln1_gamma, w.ln1_beta);
}

Var cap(Var support_pooled, Var query_pooled, Var proto) {
  const std::size_t c = proto.value().cols();
  if (support_pooled.value().cols() != c || query_pooled.value().cols() != c) {
    throw ShapeError("CAP inputs must share the channel count");
  }
  if (support_pooled.value().rows() != query_pooled.value().rows()) {
    throw ShapeError("CAP pooled support and query must have equal row counts");
  }
  Var cross = matmul(transpose(query_pooled), support_pooled);
  return transpose(matmul(softmax_rows(cross), transpose(proto)));
}

Var app(Var support_feats, Var query_feats, Var proto, const AppWeights& w, std::size_t stride) {
  Var fs = matmul(max_pool_stride(support_feats, stride), w.w1);
  Var fq = matmul(max_pool_stride(query_feats, stride), w.w1);
  // Cross attention needs equal row counts: pool the longer side again, then
  // keep the common prefix.
  Var fs_cap = fs;
  Var fq_cap = fq;
  const std::size_t ms = fs.value().rows();
  const std::size_t mq = fq.value().rows();
  if (ms > mq) fs_cap = max_pool_stride(fs, (ms + mq - 1) / mq);
  if (mq > ms) fq_cap = max_pool_stride(fq, (mq + ms - 1) / ms);
  const std::size_t common = std::min(fs_cap.value().rows(), fq_cap.value().rows());
  std::vector<std::size_t> rows(common);
  for (std::size_t i = 0; i < common; ++i) rows[i] = i;
  if (fs_cap.value().rows() > common) fs_cap = gather_rows(fs_cap, rows);
  if (fq_cap.value().rows() > common) fq_cap = gather_rows(fq_cap, rows);
  Var proto_bar = matmul(proto, w.w2);
  Var fused = add(acp(fs, fq, proto_bar, w), cap(fs_cap, fq_cap, proto));
  return layer_norm(add(matmul(fused, w.w5), proto), w.ln2_gamma, w.ln2_beta);
}

// ---------------------------------------------------------------------------
// Matching

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> labels(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row_span(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c] > row[best]) best = c;
    }
    labels[r] = static_cast<int>(best);
  }
  return labels;
}

Classification classify_query(const Tensor& query_feats, const Tensor& prototypes,
                              const FewShotConfig& cfg) {
  require_finite(prototypes, "prototypes");
  if (query_feats.cols() != prototypes.cols()) {
    throw ShapeError("query features and prototypes differ in width");
  }
  Classification out;
  if (cfg.similarity == Similarity::Cosine) {
    out.logits = scale(matmul(normalized_rows(query_feats), transpose(normalized_rows(prototypes))),
                       1.0 / cfg.temperature);
  } else {
    const Tensor dots = matmul(query_feats, transpose(prototypes));
    const Tensor q_sq = row_norms_sq(query_feats);
    const Tensor p_sq = row_norms_sq(prototypes);
    out.logits = Tensor::matrix(dots.rows(), dots.cols());
    for (std::size_t r = 0; r < dots.rows(); ++r) {
      for (std::size_t c = 0; c < dots.cols(); ++c) {
        out.logits(r, c) = -(q_sq[r] - 2.0 * dots(r, c) + p_sq[c]) / cfg.temperature;
      }
    }
  }
  out.labels = argmax_rows(out.logits);
  return out;
}

Var similarity_logits(Var query_feats, Var prototypes, const FewShotConfig& cfg) {
  if (query_feats.value().cols() != prototypes.value().cols()) {
    throw ShapeError("query features and prototypes differ in width");
  }
  if (cfg.similarity == Similarity::Cosine) {
    return scale(matmul(normalize_rows(query_feats), transpose(normalize_rows(prototypes))),
                 1.0 / cfg.temperature);
  }
  // -||q - p||^2 up to the per-row constant ||q||^2, which softmax ignores.
  Tape& tape = *query_feats.tape();
  const std::size_t c = prototypes.value().cols();
  Var ones = tape.constant(Tensor::matrix(1, c, 1.0));
  Var p_sq = matmul(ones, transpose(mul(prototypes, prototypes)));
  Var dots = scale(matmul(query_feats, transpose(prototypes)), 2.0);
  return scale(sub(dots, p_sq), 1.0 / cfg.temperature);
}

Var episode_loss(Var logits, std::span<const int> gt) { return cross_entropy(logits, gt); }

IouReport miou(std::span<const int> pred, std::span<const int> gt, int n_classes) {
  if (pred.size() != gt.size()) throw ShapeError("prediction and ground truth lengths differ");
  if (n_classes < 1) throw ConfigError("miou needs at least one class");
  const auto n = static_cast<std::size_t>(n_classes);
  std::vector<std::size_t> tp(n, 0), fp(n, 0), fn(n, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= n_classes || gt[i] < 0 || gt[i] >= n_classes) {
      throw DataError("label out of range in miou");
    }
    const auto p = static_cast<std::size_t>(pred[i]);
    const auto g = static_cast<std::size_t>(gt[i]);
    if (p == g) {
      ++tp[p];
    } else {
      ++fp[p];
      ++fn[g];
    }
  }
  IouReport report;
  report.per_class.resize(n);
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < n; ++c) {
    const std::size_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;
    report.per_class[c] = static_cast<double>(tp[c]) / static_cast<double>(denom);
    if (c > 0) {
      total += *report.per_class[c];
      ++present;
    }
  }
  report.miou = present > 0 ? total / static_cast<double>(present) : 0.0;
  return report;
}

// ---------------------------------------------------------------------------
// Episodes

const CloudGeometry& GeometryCache::get(std::size_t scene, const PointCloud& cloud) {
  auto it = cache_.find(scene);
  if (it == cache_.end()) it = cache_.emplace(scene, plan_geometry(cloud, cfg_)).first;
  return it->second;
}

EpisodeOutcome run_episode(TapeParams& params, const SegNet& net, const Episode& episode,
                           PrototypeMode mode, const FewShotConfig& cfg, GeometryCache* cache) {
  episode.validate();
  EpisodeGeometry geometry(net.config(), cache);

  std::vector<Var> query_feats;
  for (std::size_t q = 0; q < episode.query.size(); ++q) {
    const PointCloud& cloud = episode.query[q];
    query_feats.push_back(net.forward(params, cloud, geometry.get(query_scene(episode, q), cloud)));
  }
  Var query_all = query_feats.size() == 1 ? query_feats[0] : concat_rows(query_feats);

  const bool use_app = mode == PrototypeMode::App;
  AppWeights w;
  if (use_app) w = AppWeights::bind(params);

  std::vector<Var> support_feats;
  std::vector<Mask> support_masks;
  std::vector<Var> prototypes(1);
  for (const auto& way : episode.support) {
    std::vector<Var> shots;
    for (const SupportShot& shot : way) {
      Var feats = net.forward(params, shot.cloud, geometry.get(shot.scene, shot.cloud));
      Var proto = masked_avg_prototype(feats, shot.mask);
      if (use_app) proto = app(feats, query_all, proto, w, cfg.pool_stride);
      shots.push_back(proto);
      support_feats.push_back(feats);
      support_masks.push_back(shot.mask);
    }
    prototypes.push_back(aggregate_shots(shots));
  }

  TrackedBackground bg = background_prototype(support_feats, support_masks);
  prototypes[0] = bg.vector;
  if (use_app && !bg.fallback) {
    Var support_all = support_feats.size() == 1 ? support_feats[0] : concat_rows(support_feats);
    prototypes[0] = app(support_all, query_all, bg.vector, w, cfg.pool_stride);
  }

  Var logits = similarity_logits(query_all, concat_rows(prototypes), cfg);
  const std::vector<int> gt = flatten(episode.query_gt);

  EpisodeOutcome out;
  out.background_fallback = bg.fallback;
  std::vector<std::size_t> kept;
  if (!cfg.loss_includes_background) {
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] > 0) kept.push_back(i);
    }
  }
  if (kept.empty()) {
    out.loss = episode_loss(logits, gt);
  } else {
    std::vector<int> kept_gt;
    for (std::size_t i : kept) kept_gt.push_back(gt[i]);
    out.loss = episode_loss(gather_rows(logits, kept), kept_gt);
  }
  out.loss_value = out.loss.value()[0];

  const std::vector<int> pred = argmax_rows(logits.value());
  out.iou = miou(pred, gt, episode.n_classes());
  out.predictions = split_like(pred, episode.query);
  return out;
}

EpisodeOutcome evaluate_episode(const SegNet& net, const Episode& episode, PrototypeMode mode,
                                const FewShotConfig& cfg, GeometryCache* cache) {
  if (net.config().variant == Variant::PN) {
    Tape tape;
    TapeParams params(tape, net.params());
    EpisodeOutcome out = run_episode(params, net, episode, mode, cfg, cache);
    out.loss = Var{};
    return out;
  }

  episode.validate();
  EpisodeGeometry geometry(net.config(), cache);
  std::vector<Tensor> query_feats;
  for (std::size_t q = 0; q < episode.query.size(); ++q) {
    const PointCloud& cloud = episode.query[q];
    query_feats.push_back(net.forward(cloud, geometry.get(query_scene(episode, q), cloud)));
  }
  const Tensor query_all = concat_rows(query_feats);

  std::vector<Tensor> support_feats;
  std::vector<Mask> support_masks;
  std::vector<Tensor> prototypes(1);
  for (const auto& way : episode.support) {
    Tensor shots = Tensor::matrix(way.size(), net.out_channels());
    for (std::size_t s = 0; s < way.size(); ++s) {
      const SupportShot& shot = way[s];
      Tensor feats = net.forward(shot.cloud, geometry.get(shot.scene, shot.cloud));
      const Tensor proto = masked_avg_prototype(feats, shot.mask);
      std::copy(proto.data().begin(), proto.data().end(), shots.row_span(s).begin());
      support_feats.push_back(std::move(feats));
      support_masks.push_back(shot.mask);
    }
    prototypes.push_back(aggregate_shots(shots));
  }
  BackgroundPrototype bg = background_prototype(support_feats, support_masks);
  prototypes[0] = bg.vector;

  const Classification cls = classify_query(query_all, concat_rows(prototypes), cfg);
  const std::vector<int> gt = flatten(episode.query_gt);
  EpisodeOutcome out;
  out.background_fallback = bg.fallback;
  out.loss_value = plain_cross_entropy(cls.logits, gt);
  out.iou = miou(cls.labels, gt, episode.n_classes());
  out.predictions = split_like(cls.labels, episode.query);
  return out;
}

}  // namespace taylorseg
