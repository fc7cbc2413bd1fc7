#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "taylorseg/checkpoint.hpp"
#include "taylorseg/dataset.hpp"
#include "taylorseg/errors.hpp"
#include "taylorseg/gradcheck.hpp"
#include "taylorseg/segnet.hpp"
#include "taylorseg/train.hpp"

namespace fs = std::filesystem;
using namespace taylorseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

constexpr double kGradTolerance = 1e-4;

struct EpisodeArgs {
  std::string data;
  std::string split;
  int n_way = 2;
  int k_shot = 1;
  int n_query = 0;
  int episodes = 20;
  std::uint64_t seed = 1;
  std::string json;
  std::string on = "unseen";
};

void add_episode_options(CLI::App* cmd, EpisodeArgs& a) {
  cmd->add_option("--data", a.data, "dataset directory")->required();
  cmd->add_option("--split", a.split, "split file (seen=/unseen= lines)")->required();
  cmd->add_option("--n-way", a.n_way, "classes per episode");
  cmd->add_option("--k-shot", a.k_shot, "support scenes per class");
  cmd->add_option("--n-query", a.n_query, "query scenes per episode (0 = n-way)");
  cmd->add_option("--episodes", a.episodes, "number of episodes");
  cmd->add_option("--seed", a.seed, "episode seed");
  cmd->add_option("--json", a.json, "per-episode JSON lines output");
  cmd->add_option("--on", a.on, "class split to draw episodes from")
      ->check(CLI::IsMember({"seen", "unseen"}));
}

EvalConfig eval_config(const EpisodeArgs& a, const FewShotConfig& fewshot) {
  EvalConfig cfg;
  cfg.n_way = a.n_way;
  cfg.k_shot = a.k_shot;
  cfg.n_query = a.n_query;
  cfg.episodes = a.episodes;
  cfg.seed = a.seed;
  cfg.fewshot = fewshot;
  return cfg;
}

int run_eval(const SegNet& net, EvalMode mode, const EpisodeArgs& a, const FewShotConfig& fewshot) {
  const Dataset data = load_dataset(a.data);
  const SplitConfig split = load_split(a.split);
  std::unique_ptr<std::ofstream> out;
  if (!a.json.empty()) {
    out = std::make_unique<std::ofstream>(a.json);
    if (!*out) throw DataError("cannot open " + a.json + " for writing");
  }
  const EvalReport report = evaluate(net, mode, data, a.on == "seen" ? split.seen : split.unseen, eval_config(a, fewshot), out.get());
  std::cout << summary_json(report) << '\n';
  return kExitOk;
}

int run_bench(std::size_t points, int repeats, std::uint64_t seed) {
  SceneSpec spec;
  const auto palette = standard_palette();
  spec.class_ids = {0, 1, 2, 3};
  for (int id : spec.class_ids) spec.styles.push_back(palette[static_cast<std::size_t>(id)]);
  spec.points = points;
  const PointCloud cloud = synth_scene(spec, seed);

  const SegNet nn = SegNet::make_nn();
  SegNet pn = SegNet::make_pn(NetworkConfig::pn_default(), seed);
  using clock = std::chrono::steady_clock;
  auto time_ms = [&](const SegNet& net) {
    double best = 1e300;
    for (int r = 0; r < repeats; ++r) {
      const auto t0 = clock::now();
      const Tensor out = net.forward(cloud);
      const auto t1 = clock::now();
      if (!out.all_finite()) throw NumericError("forward produced non-finite features");
      best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return best;
  };
  const double nn_ms = time_ms(nn);
  const double pn_ms = time_ms(pn);
  std::printf("{\"points\":%zu,\"nn_forward_ms\":%.3f,\"pn_forward_ms\":%.3f}\n", points, nn_ms, pn_ms);
  return kExitOk;
}

void print_report(const GradcheckReport& report) {
  for (const auto& e : report.entries) {
    std::printf("%-40s n=%-6zu rel_err=%.3e\n", e.name.c_str(), e.size, e.rel_error);
  }
  std::printf("max rel_err %.3e (tolerance %.0e)\n", report.max_rel_error(), kGradTolerance);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"taylorseg: few-shot point cloud segmentation"};
  app.require_subcommand(1);

  SuiteConfig suite;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate the synthetic scene suite");
  synth->add_option("--classes", suite.classes, "number of palette classes (2..6)");
  synth->add_option("--scenes", suite.scenes, "scene count");
  synth->add_option("--points", suite.points, "points per scene");
  synth->add_option("--noise", suite.noise, "coordinate noise sigma");
  synth->add_option("--seed", suite.seed, "generator seed");
  synth->add_option("--out", synth_out, "output directory")->required();

  EpisodeArgs nn_args;
  auto* run_nn = app.add_subcommand("run-nn", "evaluate the parameter-free network");
  add_episode_options(run_nn, nn_args);
  double nn_temperature = FewShotConfig{}.temperature;
  run_nn->add_option("--temperature", nn_temperature, "cosine temperature");

  std::string train_data, train_split, train_config, train_out, train_log;
  std::optional<int> train_iterations;
  std::optional<std::uint64_t> train_seed;
  auto* train = app.add_subcommand("train-pn", "train the learnable network");
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--split", train_split, "split file")->required();
  train->add_option("--config", train_config, "key=value configuration file");
  train->add_option("--out", train_out, "checkpoint path")->required();
  train->add_option("--log", train_log, "JSON lines training log (default: stdout)");
  train->add_option("--iterations", train_iterations, "override iterations");
  train->add_option("--seed", train_seed, "override seed");

  EpisodeArgs pn_args;
  std::string ckpt_path;
  bool no_app = false;
  auto* eval = app.add_subcommand("eval-pn", "evaluate a trained checkpoint");
  eval->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  eval->add_flag("--no-app", no_app, "masked average prototypes instead of APP");
  add_episode_options(eval, pn_args);

  bool full_pipeline = false;
  std::uint64_t grad_seed = 7;
  double grad_h = 1e-5;
  auto* grad = app.add_subcommand("gradcheck", "compare gradients with finite differences");
  grad->add_flag("--full-pipeline", full_pipeline, "check the toy episode end to end");
  grad->add_option("--seed", grad_seed, "seed");
  grad->add_option("--step", grad_h, "central difference step");

  std::size_t bench_points = 2048;
  int bench_repeats = 3;
  std::uint64_t bench_seed = 0;
  auto* bench = app.add_subcommand("bench", "time single forward passes");
  bench->add_option("--points", bench_points, "points in the cloud");
  bench->add_option("--repeats", bench_repeats, "repetitions, best time reported");
  bench->add_option("--seed", bench_seed, "scene seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) {
      const Dataset data = synth_dataset(suite);
      save_dataset(synth_out, data);
      SplitConfig split;
      for (int c = 0; c < suite.classes; ++c) (c < suite.classes - 2 ? split.seen : split.unseen).push_back(c);
      save_split(fs::path(synth_out) / "split.txt", split);
      std::printf("{\"scenes\":%zu,\"out\":\"%s\"}\n", data.scenes.size(), synth_out.c_str());
      return kExitOk;
    }
    if (*run_nn) {
      FewShotConfig fewshot;
      fewshot.temperature = nn_temperature;
      return run_eval(SegNet::make_nn(), EvalMode::NN, nn_args, fewshot);
    }
    if (*train) {
      RunConfig run;
      if (!train_config.empty()) run = load_run_config(train_config);
      if (train_iterations) run.train.iterations = *train_iterations;
      if (train_seed) run.train.seed = *train_seed;
      run.train.checkpoint = train_out;
      const Dataset data = load_dataset(train_data);
      const SplitConfig split = load_split(train_split);
      std::unique_ptr<std::ofstream> log;
      if (!train_log.empty()) {
        log = std::make_unique<std::ofstream>(train_log);
        if (!*log) throw DataError("cannot open " + train_log + " for writing");
      }
      train_pn(data, split, run.train, run.network, log ? log.get() : &std::cout);
      return kExitOk;
    }
    if (*eval) {
      if (!fs::exists(ckpt_path)) throw DataError("checkpoint " + ckpt_path + " does not exist");
      const Checkpoint ckpt = load_checkpoint(fs::path(ckpt_path));
      return run_eval(net_from_checkpoint(ckpt), no_app ? EvalMode::PNNoApp : EvalMode::PN, pn_args,
                      ckpt.fewshot);
    }
    if (*grad) {
      const GradcheckReport report =
          full_pipeline ? gradcheck_pipeline(grad_seed, grad_h) : gradcheck_ops(grad_seed, grad_h);
      print_report(report);
      return report.max_rel_error() < kGradTolerance ? kExitOk : kExitNumeric;
    }
    if (*bench) return run_bench(bench_points, bench_repeats, bench_seed);
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
