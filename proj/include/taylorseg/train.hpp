#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taylorseg/checkpoint.hpp"
#include "taylorseg/dataset.hpp"
#include "taylorseg/fewshot.hpp"
#include "taylorseg/segnet.hpp"

namespace taylorseg {

enum class Alternation { PerIter, Joint };

struct TrainConfig {
  int n_way = 2;
  int k_shot = 1;
  int n_query = 0;  // 0 means n_way
  int iterations = 500;
  double lr = 1e-3;
  std::int64_t half_every = 7000;
  double weight_decay = 0.01;
  Alternation alternation = Alternation::PerIter;
  std::uint64_t seed = 1;
  bool use_app = true;
  std::filesystem::path checkpoint;  // empty: do not write
  FewShotConfig fewshot;

  void validate() const;
  int queries() const noexcept { return n_query > 0 ? n_query : n_way; }
};

// Both halves of a key=value run configuration.
struct RunConfig {
  NetworkConfig network = NetworkConfig::pn_default();
  TrainConfig train;
};

// Lines are `key = value`; '#' starts a comment. Unknown keys throw
// ConfigError naming the line.
RunConfig parse_run_config(std::istream& in, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

struct IterationLog {
  int iteration = 0;
  double loss = 0.0;
  double lr = 0.0;
  double miou = 0.0;
  std::string updated;  // "backbone", "app" or "all"
};

std::string to_json_line(const IterationLog& log);

struct TrainResult {
  SegNet net;
  std::vector<IterationLog> log;
};

// Episodic training on `split.seen`. Writes one JSON line per iteration to
// `log_out` when given, and the checkpoint when cfg.checkpoint is set.
// Throws NumericError when the loss stops being finite.
TrainResult train_pn(const Dataset& data, const SplitConfig& split, const TrainConfig& cfg,
                     const NetworkConfig& net_cfg, std::ostream* log_out = nullptr);

SegNet net_from_checkpoint(const Checkpoint& ckpt);
Checkpoint checkpoint_of(const SegNet& net, const FewShotConfig& fewshot, std::uint64_t iterations);

enum class EvalMode { NN, PN, PNNoApp };

const char* to_string(EvalMode mode);

struct EvalConfig {
  int n_way = 2;
  int k_shot = 1;
  int n_query = 0;  // 0 means n_way
  int episodes = 20;
  std::uint64_t seed = 1;
  FewShotConfig fewshot;

  void validate() const;
  int queries() const noexcept { return n_query > 0 ? n_query : n_way; }
};

struct EpisodeRecord {
  std::size_t episode_id = 0;
  int n_way = 0;
  int k_shot = 0;
  std::uint64_t seed = 0;
  std::vector<std::optional<double>> per_class_iou;
  double miou = 0.0;
  double loss = 0.0;
  bool background_fallback = false;
};

std::string to_json_line(const EpisodeRecord& rec);

struct EvalReport {
  EvalMode mode = EvalMode::NN;
  std::vector<EpisodeRecord> episodes;
  double mean_miou = 0.0;
  double std_miou = 0.0;
};

std::string summary_json(const EvalReport& report);

// Seed of evaluation episode `index`; training episodes use their own stream.
std::uint64_t eval_episode_seed(std::uint64_t seed, std::size_t index);
std::uint64_t train_episode_seed(std::uint64_t seed, std::size_t iteration);

// Runs cfg.episodes seeded episodes drawn from `classes`. NN mode requires a
// parameter-free network. Per-episode JSON lines go to `jsonl` when given.
EvalReport evaluate(const SegNet& net, EvalMode mode, const Dataset& data,
                    std::span<const int> classes, const EvalConfig& cfg,
                    std::ostream* jsonl = nullptr);

}  // namespace taylorseg
