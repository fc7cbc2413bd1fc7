#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "taylorseg/autodiff.hpp"
#include "taylorseg/geometry.hpp"
#include "taylorseg/params.hpp"
#include "taylorseg/segnet.hpp"

namespace taylorseg {

using Mask = std::vector<std::uint8_t>;

struct SupportShot {
  PointCloud cloud;
  Mask mask;
  std::size_t scene = kNoScene;

  static constexpr std::size_t kNoScene = static_cast<std::size_t>(-1);
};

// N-way K-shot task. Way i (0-based) is predicted as label i + 1; label 0 is
// background.
struct Episode {
  int n_way = 0;
  int k_shot = 0;
  std::vector<int> classes;                     // dataset class id per way
  std::vector<std::vector<SupportShot>> support;  // [way][shot]
  std::vector<PointCloud> query;
  std::vector<std::vector<int>> query_gt;       // labels in [0, n_way]
  std::vector<std::size_t> query_scene;         // dataset scene per query, optional

  void validate() const;
  int n_classes() const noexcept { return n_way + 1; }
};

enum class Similarity { Cosine, NegSquaredEuclidean };

struct FewShotConfig {
  double temperature = 0.1;
  Similarity similarity = Similarity::Cosine;
  bool loss_includes_background = true;
  std::size_t pool_stride = kDefaultPoolStride;
};

// Prototype extraction --------------------------------------------------------

Tensor masked_avg_prototype(const Tensor& feats, std::span<const std::uint8_t> mask);
Var masked_avg_prototype(Var feats, std::span<const std::uint8_t> mask);

// Mean over all support points outside their foreground mask. When there are
// none the vector is zero and `fallback` is set.
struct BackgroundPrototype {
  Tensor vector;
  bool fallback = false;
};
struct TrackedBackground {
  Var vector;
  bool fallback = false;
};
BackgroundPrototype background_prototype(std::span<const Tensor> feats, std::span<const Mask> masks);
TrackedBackground background_prototype(std::span<const Var> feats, std::span<const Mask> masks);

Tensor aggregate_shots(const Tensor& shot_prototypes);
Var aggregate_shots(std::span<const Var> shot_prototypes);

// Adaptive push-pull ----------------------------------------------------------

void register_app_params(ParamStore& store, std::size_t channels, std::uint64_t seed);

struct AppWeights {
  Var w1, w2, w3, w4, w5;
  Var ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;

  static AppWeights bind(TapeParams& params);
};

// LN(W4(A_s * Fp_bar + A_q * Fp_bar)) with A = sigmoid(w3 G), G = F^T F.
Var acp(Var support_pooled, Var query_pooled, Var proto_bar, const AppWeights& w);
// (softmax_rows(Fq^T Fs) Fp^T)^T
Var cap(Var support_pooled, Var query_pooled, Var proto);
// LN(W5(ACP + CAP) + Fp), pooled features = W1 maxpool(F).
Var app(Var support_feats, Var query_feats, Var proto, const AppWeights& w,
        std::size_t stride = kDefaultPoolStride);

// Matching --------------------------------------------------------------------

struct Classification {
  std::vector<int> labels;
  Tensor logits;  // N x classes
};

Classification classify_query(const Tensor& query_feats, const Tensor& prototypes,
                              const FewShotConfig& cfg = {});
Var similarity_logits(Var query_feats, Var prototypes, const FewShotConfig& cfg = {});
std::vector<int> argmax_rows(const Tensor& logits);

Var episode_loss(Var logits, std::span<const int> gt);

struct IouReport {
  std::vector<std::optional<double>> per_class;  // nullopt when absent from both
  double miou = 0.0;                              // mean over present foreground classes
};
IouReport miou(std::span<const int> pred, std::span<const int> gt, int n_classes);

// Episode execution -----------------------------------------------------------

enum class PrototypeMode { App, MaskedAverage };

struct EpisodeOutcome {
  Var loss;                                 // tracked runs only
  double loss_value = 0.0;
  std::vector<std::vector<int>> predictions;  // per query cloud
  IouReport iou;
  bool background_fallback = false;
};

// Geometry of dataset scenes, computed once per scene.
class GeometryCache {
 public:
  explicit GeometryCache(NetworkConfig cfg) : cfg_(std::move(cfg)) {}
  const CloudGeometry& get(std::size_t scene, const PointCloud& cloud);

 private:
  NetworkConfig cfg_;
  std::unordered_map<std::size_t, CloudGeometry> cache_;
};

// Learnable variant on a tape; `loss` is ready for backward.
EpisodeOutcome run_episode(TapeParams& params, const SegNet& net, const Episode& episode,
                           PrototypeMode mode, const FewShotConfig& cfg,
                           GeometryCache* cache = nullptr);

// Untracked run for either variant. Parameter-free networks always use
// masked average prototypes.
EpisodeOutcome evaluate_episode(const SegNet& net, const Episode& episode, PrototypeMode mode,
                                const FewShotConfig& cfg, GeometryCache* cache = nullptr);

}  // namespace taylorseg
