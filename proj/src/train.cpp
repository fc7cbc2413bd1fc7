#include "taylorseg/train.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "taylorseg/errors.hpp"
#include "taylorseg/optim.hpp"
#include "taylorseg/rng.hpp"

namespace taylorseg {

using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& value, const std::string& where) {
  T out{};
  const auto res = std::from_chars(value.data(), value.data() + value.size(), out);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
    throw ConfigError(where + ": '" + value + "' is not a valid number");
  }
  return out;
}

bool parse_bool(const std::string& value, const std::string& where) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(where + ": '" + value + "' is not a boolean");
}

std::vector<int> parse_ints(const std::string& value, const std::string& where) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(trim(item), where));
  if (out.empty()) throw ConfigError(where + ": empty list");
  return out;
}

void apply_key(RunConfig& run, const std::string& key, const std::string& value,
               const std::string& where) {
  NetworkConfig& n = run.network;
  TrainConfig& t = run.train;
  if (key == "variant") {
    if (value != "pn" && value != "nn") throw ConfigError(where + ": variant must be pn or nn");
    n.variant = value == "pn" ? Variant::PN : Variant::NN;
  } else if (key == "encoder_layers") {
    n.encoder_layers = parse_number<int>(value, where);
  } else if (key == "downsample_ratio") {
    n.downsample_ratio = parse_number<double>(value, where);
  } else if (key == "k_neighbors") {
    n.k_neighbors = parse_number<int>(value, where);
  } else if (key == "channels") {
    n.channels = parse_ints(value, where);
  } else if (key == "embed_channels") {
    n.embed_channels = parse_number<int>(value, where);
  } else if (key == "out_channels") {
    n.out_channels = parse_number<int>(value, where);
  } else if (key == "interp_k") {
    n.interp_k = parse_number<int>(value, where);
  } else if (key == "fps_start") {
    n.fps_start = parse_number<std::size_t>(value, where);
  } else if (key == "kernel_s") {
    n.kernel.s = parse_number<int>(value, where);
  } else if (key == "kernel_p") {
    n.kernel.p = parse_number<double>(value, where);
  } else if (key == "learnable_p") {
    n.kernel.learnable_p = parse_bool(value, where);
  } else if (key == "pe_bands") {
    n.pe.bands = parse_number<int>(value, where);
  } else if (key == "pe_base") {
    n.pe.base = parse_number<double>(value, where);
  } else if (key == "n_way") {
    t.n_way = parse_number<int>(value, where);
  } else if (key == "k_shot") {
    t.k_shot = parse_number<int>(value, where);
  } else if (key == "n_query") {
    t.n_query = parse_number<int>(value, where);
  } else if (key == "iterations") {
    t.iterations = parse_number<int>(value, where);
  } else if (key == "lr") {
    t.lr = parse_number<double>(value, where);
  } else if (key == "half_every") {
    t.half_every = parse_number<std::int64_t>(value, where);
  } else if (key == "weight_decay") {
    t.weight_decay = parse_number<double>(value, where);
  } else if (key == "alternation") {
    if (value == "per-iter") {
      t.alternation = Alternation::PerIter;
    } else if (value == "joint") {
      t.alternation = Alternation::Joint;
    } else {
      throw ConfigError(where + ": alternation must be per-iter or joint");
    }
  } else if (key == "seed") {
    t.seed = parse_number<std::uint64_t>(value, where);
  } else if (key == "use_app") {
    t.use_app = parse_bool(value, where);
  } else if (key == "checkpoint") {
    t.checkpoint = value;
  } else if (key == "temperature") {
    t.fewshot.temperature = parse_number<double>(value, where);
  } else if (key == "similarity") {
    if (value == "cosine") {
      t.fewshot.similarity = Similarity::Cosine;
    } else if (value == "neg_sq_euclidean") {
      t.fewshot.similarity = Similarity::NegSquaredEuclidean;
    } else {
      throw ConfigError(where + ": similarity must be cosine or neg_sq_euclidean");
    }
  } else if (key == "loss_includes_background") {
    t.fewshot.loss_includes_background = parse_bool(value, where);
  } else if (key == "pool_stride") {
    t.fewshot.pool_stride = parse_number<std::size_t>(value, where);
  } else {
    throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

void check_fewshot(const FewShotConfig& f) {
  if (!(f.temperature > 0.0) || !std::isfinite(f.temperature)) {
    throw ConfigError("temperature must be positive");
  }
  if (f.pool_stride < 1) throw ConfigError("pool_stride must be >= 1");
}

double mean_of(const std::vector<EpisodeRecord>& recs) {
  if (recs.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : recs) s += r.miou;
  return s / static_cast<double>(recs.size());
}

}  // namespace

void TrainConfig::validate() const {
  if (n_way < 1 || k_shot < 1) throw ConfigError("n_way and k_shot must be >= 1");
  if (n_query < 0) throw ConfigError("n_query must be >= 0");
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (half_every < 1) throw ConfigError("half_every must be >= 1");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  check_fewshot(fewshot);
}

void EvalConfig::validate() const {
  if (n_way < 1 || k_shot < 1) throw ConfigError("n_way and k_shot must be >= 1");
  if (n_query < 0) throw ConfigError("n_query must be >= 0");
  if (episodes < 1) throw ConfigError("episodes must be >= 1");
  check_fewshot(fewshot);
}

RunConfig parse_run_config(std::istream& in, RunConfig base) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
    apply_key(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
  }
  base.network.validate();
  base.train.validate();
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_run_config(in, std::move(base));
}

std::string to_json_line(const IterationLog& log) {
  return json{{"iteration", log.iteration},
              {"loss", log.loss},
              {"lr", log.lr},
              {"miou", log.miou},
              {"updated", log.updated}}
      .dump();
}

std::uint64_t eval_episode_seed(std::uint64_t seed, std::size_t index) {
  return derive_seed(derive_seed(seed, static_cast<std::uint64_t>(Stream::EvalEpisode)), index);
}

std::uint64_t train_episode_seed(std::uint64_t seed, std::size_t iteration) {
  return derive_seed(derive_seed(seed, static_cast<std::uint64_t>(Stream::TrainEpisode)), iteration);
}

SegNet net_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.network.variant != Variant::PN) return SegNet::make_nn(ckpt.network);
  return SegNet::with_params(ckpt.network, ckpt.params);
}

Checkpoint checkpoint_of(const SegNet& net, const FewShotConfig& fewshot, std::uint64_t iterations) {
  return Checkpoint{net.config(), fewshot, net.params(), iterations};
}

TrainResult train_pn(const Dataset& data, const SplitConfig& split, const TrainConfig& cfg,
                     const NetworkConfig& net_cfg, std::ostream* log_out) {
  cfg.validate();
  split.validate();
  if (net_cfg.variant != Variant::PN) throw ConfigError("train_pn needs the learnable variant");

  SegNet net = SegNet::make_pn(net_cfg, cfg.seed);
  if (cfg.use_app) register_app_params(net.params(), net.out_channels(), cfg.seed);
  const std::vector<std::string> backbone = net.params().names(ParamGroup::Backbone);
  const std::vector<std::string> app_names = net.params().names(ParamGroup::App);
  std::vector<std::string> all = backbone;
  all.insert(all.end(), app_names.begin(), app_names.end());

  OptimState backbone_state, app_state, joint_state;
  AdamWConfig adam;
  adam.weight_decay = cfg.weight_decay;
  GeometryCache cache(net.config());
  const PrototypeMode mode = cfg.use_app ? PrototypeMode::App : PrototypeMode::MaskedAverage;

  TrainResult result{net, {}};
  for (int it = 0; it < cfg.iterations; ++it) {
    const Episode ep = sample_episode(data, split.seen, cfg.n_way, cfg.k_shot, cfg.queries(),
                                      train_episode_seed(cfg.seed, static_cast<std::size_t>(it)));
    Tape tape;
    TapeParams params(tape, net.params());
    EpisodeOutcome out;
    try {
      out = run_episode(params, net, ep, mode, cfg.fewshot, &cache);
      if (!std::isfinite(out.loss_value)) throw NumericError("loss is not finite");
      tape.backward(out.loss);
    } catch (const NumericError& e) {
      throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
    }
    const GradMap grads = params.gradients();

    IterationLog entry;
    entry.iteration = it;
    entry.loss = out.loss_value;
    entry.miou = out.iou.miou;
    entry.lr = lr_schedule(it, cfg.lr, cfg.half_every);
    if (cfg.alternation == Alternation::Joint) {
      adamw_step(net.params(), grads, all, joint_state, entry.lr, adam);
      entry.updated = "all";
    } else if (!cfg.use_app || it % 2 == 0) {
      adamw_step(net.params(), grads, backbone, backbone_state, entry.lr, adam);
      entry.updated = "backbone";
    } else {
      adamw_step(net.params(), grads, app_names, app_state, entry.lr, adam);
      entry.updated = "app";
    }
    if (log_out != nullptr) *log_out << to_json_line(entry) << '\n';
    result.log.push_back(entry);
  }

  if (!cfg.checkpoint.empty()) {
    save_checkpoint(cfg.checkpoint,
                    checkpoint_of(net, cfg.fewshot, static_cast<std::uint64_t>(cfg.iterations)));
  }
  result.net = std::move(net);
  return result;
}

const char* to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::NN:
      return "nn";
    case EvalMode::PN:
      return "pn";
    case EvalMode::PNNoApp:
      return "pn-no-app";
  }
  return "?";
}

std::string to_json_line(const EpisodeRecord& rec) {
  json ious = json::array();
  for (const auto& v : rec.per_class_iou) ious.push_back(v ? json(*v) : json(nullptr));
  return json{{"episode_id", rec.episode_id},
              {"n_way", rec.n_way},
              {"k_shot", rec.k_shot},
              {"seed", rec.seed},
              {"per_class_iou", ious},
              {"miou", rec.miou},
              {"loss", rec.loss}}
      .dump();
}

std::string summary_json(const EvalReport& report) {
  return json{{"mode", to_string(report.mode)},
              {"episodes", report.episodes.size()},
              {"mean_miou", report.mean_miou},
              {"std_miou", report.std_miou}}
      .dump();
}

EvalReport evaluate(const SegNet& net, EvalMode mode, const Dataset& data,
                    std::span<const int> classes, const EvalConfig& cfg, std::ostream* jsonl) {
  cfg.validate();
  const bool nn = net.config().variant == Variant::NN;
  if (mode == EvalMode::NN) {
    if (!nn || !net.params().empty()) {
      throw ConfigError("nn evaluation requires the parameter-free network with zero parameters");
    }
  } else if (nn) {
    throw ConfigError("pn evaluation requires a learnable network");
  }
  if (mode == EvalMode::PN && !net.params().contains("app.w1")) {
    throw ConfigError("pn evaluation requires APP parameters; use pn-no-app");
  }
  const PrototypeMode proto = mode == EvalMode::PN ? PrototypeMode::App : PrototypeMode::MaskedAverage;

  EvalReport report;
  report.mode = mode;
  GeometryCache cache(net.config());
  for (int i = 0; i < cfg.episodes; ++i) {
    const std::uint64_t seed = eval_episode_seed(cfg.seed, static_cast<std::size_t>(i));
    const Episode ep = sample_episode(data, classes, cfg.n_way, cfg.k_shot, cfg.queries(), seed);
    const EpisodeOutcome out = evaluate_episode(net, ep, proto, cfg.fewshot, &cache);
    EpisodeRecord rec;
    rec.episode_id = static_cast<std::size_t>(i);
    rec.n_way = cfg.n_way;
    rec.k_shot = cfg.k_shot;
    rec.seed = seed;
    rec.per_class_iou = out.iou.per_class;
    rec.miou = out.iou.miou;
    rec.loss = out.loss_value;
    rec.background_fallback = out.background_fallback;
    if (jsonl != nullptr) *jsonl << to_json_line(rec) << '\n';
    report.episodes.push_back(std::move(rec));
  }
  report.mean_miou = mean_of(report.episodes);
  double var = 0.0;
  for (const auto& r : report.episodes) var += (r.miou - report.mean_miou) * (r.miou - report.mean_miou);
  report.std_miou = std::sqrt(var / static_cast<double>(report.episodes.size()));
  return report;
}

}  // namespace taylorseg
